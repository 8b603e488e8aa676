//! Random relay-cluster deployments.
//!
//! The gNB sits at the origin. UEs are spread around a cluster centre at
//! `distance_m`, and RUs in an annulus around the same centre, so the RUs
//! help where the direct link is weakest. Node ids: gNB 0, RUs `1..`,
//! UEs `UE_ID_BASE..`.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenario::{validate, MobilityProfile, NodeId, NodeKind, NodeSpec, OfdmConfig, Scenario};
use crate::seeding;

pub const UE_ID_BASE: NodeId = 1000;
const MAX_REJECTIONS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Layout {
    /// gNB to UE-cluster centre.
    pub distance_m: f64,
    pub num_rus: usize,
    pub num_ues: usize,
    pub gnb_antennas: usize,
    pub ru_antennas: usize,
    pub ue_antennas: usize,
    pub gnb_power_dbm: f64,
    pub ru_power_dbm: f64,
    pub ue_power_dbm: f64,
    pub ue_radius_m: f64,
    /// Outer radius of the RU annulus; the inner radius clears the UEs.
    pub ru_radius_m: f64,
    pub min_separation_m: f64,
    pub noise_figure_db: f64,
    pub duration_slots: usize,
}

impl Default for Layout {
    fn default() -> Self {
        Self {
            distance_m: 300.0,
            num_rus: 8,
            num_ues: 2,
            gnb_antennas: 4,
            ru_antennas: 2,
            ue_antennas: 2,
            gnb_power_dbm: 35.0,
            ru_power_dbm: 26.0,
            ue_power_dbm: 23.0,
            ue_radius_m: 20.0,
            ru_radius_m: 60.0,
            min_separation_m: 5.0,
            noise_figure_db: 7.0,
            duration_slots: 1,
        }
    }
}

fn point_in_annulus<R: Rng + ?Sized>(rng: &mut R, inner: f64, outer: f64) -> [f64; 2] {
    // Uniform in area.
    let r = (inner * inner + rng.random::<f64>() * (outer * outer - inner * inner)).sqrt();
    let a = 2.0 * PI * rng.random::<f64>();
    [r * a.cos(), r * a.sin()]
}

fn velocity(seed: u64, id: NodeId, speed_mps: f64) -> [f64; 3] {
    let mut rng = seeding::rng(&[seed, seeding::tag::HEADING, id as u64]);
    let a = 2.0 * PI * rng.random::<f64>();
    [speed_mps * a.cos(), speed_mps * a.sin(), 0.0]
}

/// Draws one deployment. Positions depend only on `seed` and the layout
/// geometry: the first `k` RUs are the same for any `num_rus >= k`, and
/// mobility changes velocities only.
pub fn build_scenario(layout: &Layout, ofdm: &OfdmConfig, mobility: &MobilityProfile, seed: u64) -> Result<Scenario> {
    if !(layout.distance_m >= 1.0) {
        return Err(Error::arg(format!("distance {} m below 1 m", layout.distance_m)));
    }
    if !(layout.ru_radius_m > layout.ue_radius_m + layout.min_separation_m) {
        return Err(Error::arg(
            "RU radius must exceed UE radius plus the minimum separation",
        ));
    }
    let mut centre_rng = seeding::rng(&[seed, seeding::tag::GEOMETRY]);
    let azimuth = 2.0 * PI * centre_rng.random::<f64>();
    let centre = [layout.distance_m * azimuth.cos(), layout.distance_m * azimuth.sin()];

    let mut nodes = vec![NodeSpec {
        id: 0,
        kind: NodeKind::Gnb,
        num_antennas: layout.gnb_antennas,
        tx_power_dbm: layout.gnb_power_dbm,
        position_m: [0.0; 3],
        velocity_mps: velocity(seed, 0, mobility.gnb_speed_mps()),
    }];

    let mut ru_rng = seeding::rng(&[seed, seeding::tag::GEOMETRY, 2]);
    let inner = layout.ue_radius_m + layout.min_separation_m;
    let mut placed: Vec<[f64; 2]> = Vec::new();
    for r in 0..layout.num_rus {
        let mut p = point_in_annulus(&mut ru_rng, inner, layout.ru_radius_m);
        for _ in 0..MAX_REJECTIONS {
            let clear = placed
                .iter()
                .all(|q| (p[0] - q[0]).hypot(p[1] - q[1]) >= layout.min_separation_m);
            if clear {
                break;
            }
            p = point_in_annulus(&mut ru_rng, inner, layout.ru_radius_m);
        }
        placed.push(p);
        let id = 1 + r as NodeId;
        nodes.push(NodeSpec {
            id,
            kind: NodeKind::Ru,
            num_antennas: layout.ru_antennas,
            tx_power_dbm: layout.ru_power_dbm,
            position_m: [centre[0] + p[0], centre[1] + p[1], 0.0],
            velocity_mps: velocity(seed, id, mobility.gnb_speed_mps()),
        });
    }

    let mut ue_rng = seeding::rng(&[seed, seeding::tag::GEOMETRY, 1]);
    for u in 0..layout.num_ues {
        let p = point_in_annulus(&mut ue_rng, 0.0, layout.ue_radius_m);
        let id = UE_ID_BASE + u as NodeId;
        nodes.push(NodeSpec {
            id,
            kind: NodeKind::Ue,
            num_antennas: layout.ue_antennas,
            tx_power_dbm: layout.ue_power_dbm,
            position_m: [centre[0] + p[0], centre[1] + p[1], 0.0],
            velocity_mps: velocity(seed, id, mobility.ue_speed_mps()),
        });
    }

    let scenario = Scenario {
        nodes,
        ofdm: *ofdm,
        mobility: *mobility,
        noise_figure_db: layout.noise_figure_db,
        seed,
        duration_slots: layout.duration_slots,
    };
    if let Some(v) = validate(&scenario).first() {
        return Err(Error::arg(v.to_string()));
    }
    Ok(scenario)
}

/// Ids of the first `k` RUs of a scenario built by [`build_scenario`].
pub fn ru_prefix(k: usize) -> Vec<NodeId> {
    (1..=k as NodeId).collect()
}
