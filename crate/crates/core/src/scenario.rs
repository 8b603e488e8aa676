//! Nodes, geometry, mobility and OFDM numerology.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SPEED_OF_LIGHT_MPS: f64 = 299_792_458.0;

pub type NodeId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Gnb,
    Ru,
    Ue,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub id: NodeId,
    pub kind: NodeKind,
    pub num_antennas: usize,
    pub tx_power_dbm: f64,
    pub position_m: [f64; 3],
    #[serde(default)]
    pub velocity_mps: [f64; 3],
}

impl NodeSpec {
    pub fn speed_mps(&self) -> f64 {
        norm3(self.velocity_mps)
    }

    pub fn distance_to(&self, other: &NodeSpec) -> f64 {
        norm3(sub3(self.position_m, other.position_m))
    }

    pub fn tx_power_mw(&self) -> f64 {
        dbm_to_mw(self.tx_power_dbm)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OfdmConfig {
    pub fc_hz: f64,
    pub scs_hz: f64,
    pub num_subcarriers: usize,
    pub symbols_per_slot: usize,
}

impl Default for OfdmConfig {
    fn default() -> Self {
        Self {
            fc_hz: 3.5e9,
            scs_hz: 15e3,
            num_subcarriers: 512,
            symbols_per_slot: 14,
        }
    }
}

impl OfdmConfig {
    pub fn bandwidth_hz(&self) -> f64 {
        self.scs_hz * self.num_subcarriers as f64
    }

    /// Useful symbol duration `1/scs` (no cyclic prefix).
    pub fn symbol_duration_s(&self) -> f64 {
        1.0 / self.scs_hz
    }

    pub fn slot_duration_s(&self) -> f64 {
        self.symbols_per_slot as f64 / self.scs_hz
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MobilityLabel {
    Low,
    Medium,
    High,
    Custom,
}

impl fmt::Display for MobilityLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            MobilityLabel::Low => "low",
            MobilityLabel::Medium => "medium",
            MobilityLabel::High => "high",
            MobilityLabel::Custom => "custom",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for MobilityLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "low" => Ok(MobilityLabel::Low),
            "medium" => Ok(MobilityLabel::Medium),
            "high" => Ok(MobilityLabel::High),
            "custom" => Ok(MobilityLabel::Custom),
            other => Err(Error::arg(format!("unknown mobility label {other:?}"))),
        }
    }
}

/// Ground speeds of the infrastructure (gNB, RUs) and of the UEs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MobilityProfile {
    pub label: MobilityLabel,
    pub gnb_speed_kmh: f64,
    pub ue_relative_speed_kmh: f64,
}

impl MobilityProfile {
    /// The three tabulated scenarios. `Custom` has no table row and yields
    /// zero speeds; use [`MobilityProfile::custom`] instead.
    pub fn named(label: MobilityLabel) -> Self {
        let (gnb, ue) = Self::table_speeds(label).unwrap_or((0.0, 0.0));
        Self {
            label,
            gnb_speed_kmh: gnb,
            ue_relative_speed_kmh: ue,
        }
    }

    pub fn custom(gnb_speed_kmh: f64, ue_relative_speed_kmh: f64) -> Self {
        Self {
            label: MobilityLabel::Custom,
            gnb_speed_kmh,
            ue_relative_speed_kmh,
        }
    }

    fn table_speeds(label: MobilityLabel) -> Option<(f64, f64)> {
        match label {
            MobilityLabel::Low => Some((0.1, 0.01)),
            MobilityLabel::Medium => Some((3.0, 0.3)),
            MobilityLabel::High => Some((10.0, 1.0)),
            MobilityLabel::Custom => None,
        }
    }

    pub fn gnb_speed_mps(&self) -> f64 {
        kmh_to_mps(self.gnb_speed_kmh)
    }

    pub fn ue_speed_mps(&self) -> f64 {
        kmh_to_mps(self.ue_relative_speed_kmh)
    }
}

impl Default for MobilityProfile {
    fn default() -> Self {
        Self::named(MobilityLabel::Low)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub nodes: Vec<NodeSpec>,
    pub ofdm: OfdmConfig,
    pub mobility: MobilityProfile,
    pub noise_figure_db: f64,
    pub seed: u64,
    pub duration_slots: usize,
}

/// One broken rule, naming the offending field.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub field: String,
    pub rule: String,
}

impl Violation {
    fn new(field: impl Into<String>, rule: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            rule: rule.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.rule)
    }
}

impl Scenario {
    pub fn gnb(&self) -> Option<&NodeSpec> {
        self.nodes.iter().find(|n| n.kind == NodeKind::Gnb)
    }

    pub fn rus(&self) -> impl Iterator<Item = &NodeSpec> {
        self.nodes.iter().filter(|n| n.kind == NodeKind::Ru)
    }

    pub fn ues(&self) -> impl Iterator<Item = &NodeSpec> {
        self.nodes.iter().filter(|n| n.kind == NodeKind::Ue)
    }

    pub fn node(&self, id: NodeId) -> Option<&NodeSpec> {
        self.nodes.iter().find(|n| n.id == id)
    }

    /// Copy of the scenario keeping the gNB, the UEs, and only the listed RUs
    /// (in the given order).
    pub fn with_rus(&self, ru_ids: &[NodeId]) -> Scenario {
        let mut nodes: Vec<NodeSpec> = self.nodes.iter().filter(|n| n.kind == NodeKind::Gnb).cloned().collect();
        nodes.extend(
            ru_ids
                .iter()
                .filter_map(|id| self.node(*id).filter(|n| n.kind == NodeKind::Ru).cloned()),
        );
        nodes.extend(self.ues().cloned());
        Scenario { nodes, ..self.clone() }
    }

    pub fn noise_power_dbm(&self) -> f64 {
        crate::channel::noise_power_dbm(self.ofdm.bandwidth_hz(), self.noise_figure_db)
    }
}

/// Checks every scenario invariant. Returns an empty list iff all hold.
pub fn validate(scenario: &Scenario) -> Vec<Violation> {
    let mut out = Vec::new();
    let gnbs = scenario.nodes.iter().filter(|n| n.kind == NodeKind::Gnb).count();
    if gnbs != 1 {
        out.push(Violation::new("nodes", "exactly one gNB"));
    }
    if scenario.ues().next().is_none() {
        out.push(Violation::new("nodes", "at least one UE required"));
    }
    let mut seen = HashSet::new();
    for n in &scenario.nodes {
        if !seen.insert(n.id) {
            out.push(Violation::new(
                format!("nodes[id={}].id", n.id),
                "node ids must be unique",
            ));
        }
        if n.num_antennas < 1 {
            out.push(Violation::new(
                format!("nodes[id={}].num_antennas", n.id),
                "num_antennas must be at least 1",
            ));
        }
        if !(-10.0..=50.0).contains(&n.tx_power_dbm) {
            out.push(Violation::new(
                format!("nodes[id={}].tx_power_dbm", n.id),
                "tx_power_dbm must lie in [-10, 50]",
            ));
        }
        if n.position_m.iter().chain(&n.velocity_mps).any(|v| !v.is_finite()) {
            out.push(Violation::new(
                format!("nodes[id={}]", n.id),
                "position and velocity must be finite",
            ));
        }
    }
    let o = &scenario.ofdm;
    if !(o.fc_hz > 0.0) {
        out.push(Violation::new("ofdm.fc_hz", "carrier frequency must be positive"));
    }
    if !(o.bandwidth_hz() > 0.0) || o.num_subcarriers == 0 {
        out.push(Violation::new(
            "ofdm",
            "bandwidth scs_hz * num_subcarriers must be positive",
        ));
    }
    if o.symbols_per_slot == 0 {
        out.push(Violation::new("ofdm.symbols_per_slot", "must be positive"));
    }
    let m = &scenario.mobility;
    if !(m.gnb_speed_kmh >= 0.0) || !(m.ue_relative_speed_kmh >= 0.0) {
        out.push(Violation::new("mobility", "speeds must be non-negative"));
    }
    if let Some((gnb, ue)) = MobilityProfile::table_speeds(m.label) {
        if m.gnb_speed_kmh != gnb || m.ue_relative_speed_kmh != ue {
            out.push(Violation::new(
                "mobility",
                format!("label {} requires speeds {gnb}/{ue} km/h", m.label),
            ));
        }
    }
    if !scenario.noise_figure_db.is_finite() {
        out.push(Violation::new("noise_figure_db", "must be finite"));
    }
    if scenario.duration_slots == 0 {
        out.push(Violation::new("duration_slots", "must be positive"));
    }
    out
}

/// Classical narrowband Doppler shift `v f_c / c`.
pub fn doppler_hz(speed_mps: f64, fc_hz: f64) -> Result<f64> {
    if !(speed_mps >= 0.0) {
        return Err(Error::arg(format!("speed must be non-negative, got {speed_mps}")));
    }
    if !(fc_hz > 0.0) {
        return Err(Error::arg(format!("carrier frequency must be positive, got {fc_hz}")));
    }
    Ok(speed_mps * fc_hz / SPEED_OF_LIGHT_MPS)
}

/// Moves every node along its velocity for `dt_s` seconds.
pub fn advance_positions(scenario: &Scenario, dt_s: f64) -> Scenario {
    let mut next = scenario.clone();
    for n in &mut next.nodes {
        for (p, v) in n.position_m.iter_mut().zip(n.velocity_mps) {
            *p += v * dt_s;
        }
    }
    next
}

pub fn kmh_to_mps(kmh: f64) -> f64 {
    kmh / 3.6
}

pub fn dbm_to_mw(dbm: f64) -> f64 {
    10f64.powf(dbm / 10.0)
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn linear_to_db(x: f64) -> f64 {
    10.0 * x.log10()
}

fn sub3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn norm3(a: [f64; 3]) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}
