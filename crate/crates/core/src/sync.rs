//! Residual synchronisation errors between cooperating nodes.
//!
//! The gNB is the frequency, timing and phase reference; every other node
//! carries offsets relative to it.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::channel::{CMatrix, ChannelMatrix, C64};
use crate::error::{Error, Result};
use crate::scenario::{NodeId, NodeKind, Scenario};
use crate::seeding;

/// Timing offsets beyond this fraction of the useful symbol break the
/// cyclic-prefix model.
pub const TIMING_BOUND_FRACTION: f64 = 0.1;
/// Normalised CFO below which the non-coherent uplink is unaffected.
pub const UPLINK_CFO_TOLERANCE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct NodeSync {
    pub cfo_hz: f64,
    pub timing_offset_s: f64,
    pub phase_offset_rad: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SyncState {
    pub nodes: BTreeMap<NodeId, NodeSync>,
    pub phase_noise_std_rad_per_slot: f64,
}

/// Impairment magnitudes; per-node offsets are drawn uniformly within
/// `[-level, level]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ImpairmentLevels {
    pub cfo_hz: f64,
    pub timing_offset_s: f64,
    pub phase_offset_rad: f64,
    pub phase_noise_std_rad_per_slot: f64,
}

impl ImpairmentLevels {
    pub fn is_zero(&self) -> bool {
        *self == Self::default()
    }
}

impl SyncState {
    pub fn ideal() -> Self {
        Self::default()
    }

    pub fn node(&self, id: NodeId) -> NodeSync {
        self.nodes.get(&id).copied().unwrap_or_default()
    }

    pub fn with_cfo(mut self, id: NodeId, cfo_hz: f64) -> Self {
        self.nodes.entry(id).or_default().cfo_hz = cfo_hz;
        self
    }

    /// Draws offsets for every non-gNB node. Each node's draw depends only on
    /// `(seed, node id)`, so offsets scale linearly with the levels.
    pub fn draw(levels: &ImpairmentLevels, scenario: &Scenario, seed: u64) -> Self {
        let nodes = scenario
            .nodes
            .iter()
            .filter(|n| n.kind != NodeKind::Gnb)
            .map(|n| {
                let mut rng = seeding::rng(&[seed, seeding::tag::SYNC, n.id as u64]);
                let mut u = || rng.random_range(-1.0..=1.0);
                let s = NodeSync {
                    cfo_hz: levels.cfo_hz * u(),
                    timing_offset_s: levels.timing_offset_s * u(),
                    phase_offset_rad: wrap_phase(levels.phase_offset_rad * u()),
                };
                (n.id, s)
            })
            .collect();
        Self {
            nodes,
            phase_noise_std_rad_per_slot: levels.phase_noise_std_rad_per_slot,
        }
    }

    /// Timing offsets within one symbol and phases inside `(-pi, pi]`.
    pub fn is_valid(&self, symbol_duration_s: f64) -> bool {
        self.nodes.values().all(|s| {
            s.timing_offset_s.abs() < symbol_duration_s && s.phase_offset_rad > -PI && s.phase_offset_rad <= PI
        })
    }

    /// Phase by which node `id`'s transmissions on subcarrier `k` have moved
    /// `elapsed_s` after the channel was measured.
    pub fn rotation_rad(&self, id: NodeId, elapsed_s: f64, k: usize, scs_hz: f64) -> f64 {
        let s = self.node(id);
        2.0 * PI * s.cfo_hz * elapsed_s + s.phase_offset_rad - 2.0 * PI * k as f64 * scs_hz * s.timing_offset_s
    }
}

/// Maps into `(-pi, pi]`.
pub fn wrap_phase(x: f64) -> f64 {
    x - 2.0 * PI * ((x - PI) / (2.0 * PI)).ceil()
}

pub fn apply_cfo(h_effective: &ChannelMatrix, cfo_hz: f64, elapsed_s: f64) -> ChannelMatrix {
    let rot = C64::from_polar(1.0, 2.0 * PI * cfo_hz * elapsed_s);
    ChannelMatrix {
        entries: &h_effective.entries * rot,
        ..h_effective.clone()
    }
}

/// Rotates columns `cols` of `h` by `phase_rad`.
pub fn rotate_columns(h: &mut CMatrix, cols: std::ops::Range<usize>, phase_rad: f64) {
    if phase_rad == 0.0 {
        return;
    }
    let mut view = h.columns_mut(cols.start, cols.len());
    view *= C64::from_polar(1.0, phase_rad);
}

/// Linear phase across subcarriers from a transmit timing error.
pub fn apply_timing_offset(
    h_per_subcarrier: &[ChannelMatrix],
    offset_s: f64,
    scs_hz: f64,
) -> Result<Vec<ChannelMatrix>> {
    let bound = TIMING_BOUND_FRACTION / scs_hz;
    if !(offset_s.abs() <= bound) {
        return Err(Error::TimingOffset {
            offset_s,
            bound_s: bound,
        });
    }
    Ok(h_per_subcarrier
        .iter()
        .map(|h| {
            let phase = -2.0 * PI * h.subcarrier_index as f64 * scs_hz * offset_s;
            ChannelMatrix {
                entries: &h.entries * C64::from_polar(1.0, phase),
                ..h.clone()
            }
        })
        .collect())
}

pub fn evolve_phase_noise<R: Rng + ?Sized>(state: &SyncState, rng: &mut R) -> SyncState {
    let sigma = state.phase_noise_std_rad_per_slot;
    if sigma == 0.0 {
        return state.clone();
    }
    let mut next = state.clone();
    for s in next.nodes.values_mut() {
        let z: f64 = StandardNormal.sample(rng);
        s.phase_offset_rad = wrap_phase(s.phase_offset_rad + sigma * z);
    }
    next
}

/// Inter-carrier interference power relative to the desired signal for a
/// residual CFO, `(pi eps)^2 / 3` with `eps = cfo * T_sym`; zero while
/// `|eps| <= UPLINK_CFO_TOLERANCE`.
pub fn uplink_cfo_ici(cfo_hz: f64, symbol_duration_s: f64) -> f64 {
    let eps = (cfo_hz * symbol_duration_s).abs();
    if eps <= UPLINK_CFO_TOLERANCE {
        0.0
    } else {
        (PI * eps).powi(2) / 3.0
    }
}

/// Realized phase-2 sum rate (bps/Hz, averaged over subcarrier groups) of
/// the gNB plus every RU in `scenario`, precoding on CSI measured
/// `csi_age_s` before transmission.
pub fn coherent_capacity_under_impairment(scenario: &Scenario, sync: &SyncState, csi_age_s: f64) -> Result<f64> {
    let options = crate::protocol::DownlinkOptions {
        csi_age_s,
        ..Default::default()
    };
    let net = crate::network::Network::new(scenario, &options.channel);
    let tx: Vec<NodeId> = scenario.gnb().into_iter().chain(scenario.rus()).map(|n| n.id).collect();
    let ues: Vec<NodeId> = scenario.ues().map(|n| n.id).collect();
    let out = crate::protocol::phase2(&net, &tx, &ues, sync, crate::protocol::CsiSource::Stale, 0.0, &options)?;
    Ok(out.per_ue_rate_bpshz.iter().sum())
}
