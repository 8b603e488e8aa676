//! Monte-Carlo simulator for mobile distributed MIMO networks.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod channel;
pub mod detect;
pub mod error;
pub mod exec;
pub mod experiment;
pub mod layout;
pub mod link_adaptation;
pub mod network;
pub mod precoding;
pub mod protocol;
pub mod reservoir;
pub mod scenario;
pub mod seeding;
pub mod sync;

pub use error::{Error, Result};
