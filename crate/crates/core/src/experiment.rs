//! Monte-Carlo experiments: config files, sweeps, summaries and result files.
//!
//! A config is a TOML document merged over the preset of the chosen study,
//! so an empty file reproduces the preset. Every trial draws its own
//! geometry, fading, sync offsets and payload from `(root seed, trial)`, so
//! the records do not depend on the worker count.

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::channel::{jakes_sequence, DEFAULT_SINUSOIDS};
use crate::detect::FusionStrategy;
use crate::error::{Error, Result};
use crate::exec::{self, ExecMode};
use crate::layout::{build_scenario, Layout};
use crate::link_adaptation::{McsTable, DEFAULT_OVERHEAD};
use crate::network::Network;
use crate::precoding::relative_gain;
use crate::protocol::{
    direct_capacity, run_downlink_round_on, run_uplink_round_on, CsiSource, DownlinkOptions, PredictorOptions,
    TimeSplit, UplinkOptions,
};
use crate::reservoir::{nmse_db, ChannelPredictor, ReadoutSharing, ReservoirConfig};
use crate::scenario::{MobilityLabel, MobilityProfile, OfdmConfig};
use crate::seeding;
use crate::sync::{ImpairmentLevels, SyncState};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const CSV_HEADER: &str = "sweep_value,seed,metric_name,metric_value,units";
pub const RC_BENCH_HEADER: &str = "seed,f_d_dt,nmse_predictor_db,nmse_persistence_db";
const Z95: f64 = 1.959_963_984_540_054;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Study {
    Downlink,
    Uplink,
    Mobility,
    RcBench,
}

impl fmt::Display for Study {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Study::Downlink => "downlink",
            Study::Uplink => "uplink",
            Study::Mobility => "mobility",
            Study::RcBench => "rc-bench",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmitFormat {
    #[default]
    Csv,
    Json,
}

impl std::str::FromStr for EmitFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(EmitFormat::Csv),
            "json" => Ok(EmitFormat::Json),
            other => Err(Error::arg(format!("unknown output format {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepVariable {
    DistanceM,
    NumRus,
    NumUes,
    Mobility,
    CfoHz,
}

impl fmt::Display for SweepVariable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepVariable::DistanceM => "distance_m",
            SweepVariable::NumRus => "num_rus",
            SweepVariable::NumUes => "num_ues",
            SweepVariable::Mobility => "mobility",
            SweepVariable::CfoHz => "cfo_hz",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SweepValue {
    Number(f64),
    Label(String),
}

impl fmt::Display for SweepValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SweepValue::Number(x) => write!(f, "{x}"),
            SweepValue::Label(s) => f.write_str(s),
        }
    }
}

impl From<f64> for SweepValue {
    fn from(x: f64) -> Self {
        SweepValue::Number(x)
    }
}

impl From<MobilityLabel> for SweepValue {
    fn from(l: MobilityLabel) -> Self {
        SweepValue::Label(l.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub variable: SweepVariable,
    pub values: Vec<SweepValue>,
}

impl Sweep {
    pub fn new(variable: SweepVariable, values: impl IntoIterator<Item = SweepValue>) -> Self {
        Self {
            variable,
            values: values.into_iter().collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MobilitySection {
    pub label: MobilityLabel,
    /// Only with `label = "custom"`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gnb_speed_kmh: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ue_relative_speed_kmh: Option<f64>,
}

impl Default for MobilitySection {
    fn default() -> Self {
        Self {
            label: MobilityLabel::Low,
            gnb_speed_kmh: None,
            ue_relative_speed_kmh: None,
        }
    }
}

impl MobilitySection {
    pub fn profile(&self) -> Result<MobilityProfile> {
        match (self.label, self.gnb_speed_kmh, self.ue_relative_speed_kmh) {
            (MobilityLabel::Custom, Some(g), Some(u)) => {
                if !(g >= 0.0 && u >= 0.0) {
                    return Err(Error::Config("mobility speeds must be non-negative".into()));
                }
                Ok(MobilityProfile::custom(g, u))
            }
            (MobilityLabel::Custom, _, _) => Err(Error::Config(
                "custom mobility needs gnb_speed_kmh and ue_relative_speed_kmh".into(),
            )),
            (label, None, None) => Ok(MobilityProfile::named(label)),
            (label, _, _) => Err(Error::Config(format!(
                "explicit speeds need label = \"custom\", not {label:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McsSection {
    /// CSV with columns index,modulation,code_rate,snr_threshold_db.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub table_csv: Option<PathBuf>,
    pub overhead: f64,
}

impl Default for McsSection {
    fn default() -> Self {
        Self {
            table_csv: None,
            overhead: DEFAULT_OVERHEAD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DownlinkSection {
    pub csi: CsiSource,
    pub csi_age_s: f64,
    pub time_split: TimeSplit,
    pub ru_counts: Vec<usize>,
    pub ue_counts: Vec<usize>,
}

impl Default for DownlinkSection {
    fn default() -> Self {
        Self {
            csi: CsiSource::Stale,
            csi_age_s: 1e-3,
            time_split: TimeSplit::Optimal,
            ru_counts: vec![0, 2, 4, 8],
            ue_counts: vec![2, 4, 8],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UplinkSection {
    pub csi_age_s: f64,
    pub blocks: usize,
    pub fusion: FusionStrategy,
    pub mobilities: Vec<MobilityLabel>,
}

impl Default for UplinkSection {
    fn default() -> Self {
        Self {
            csi_age_s: 0.5e-3,
            blocks: 32,
            fusion: FusionStrategy::ReliabilityWeighted,
            mobilities: vec![MobilityLabel::Low, MobilityLabel::Medium, MobilityLabel::High],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RcSection {
    pub size: usize,
    pub spectral_radius: f64,
    pub leak_rate: f64,
    pub ridge_lambda: f64,
    pub washout: usize,
    /// CSI reports per prediction in the downlink pipeline.
    pub history: usize,
    pub sharing: ReadoutSharing,
    /// Normalised Doppler values of `rc-bench`.
    pub fd_dt: Vec<f64>,
    pub train_steps: usize,
    pub test_steps: usize,
}

impl Default for RcSection {
    fn default() -> Self {
        let p = PredictorOptions::default();
        Self {
            size: p.reservoir.size,
            spectral_radius: p.reservoir.spectral_radius,
            leak_rate: p.reservoir.leak_rate,
            ridge_lambda: p.reservoir.ridge_lambda,
            washout: p.reservoir.washout,
            history: p.history,
            sharing: p.sharing,
            fd_dt: vec![0.01],
            train_steps: 2000,
            test_steps: 500,
        }
    }
}

impl RcSection {
    pub fn reservoir(&self) -> ReservoirConfig {
        ReservoirConfig {
            size: self.size,
            spectral_radius: self.spectral_radius,
            leak_rate: self.leak_rate,
            ridge_lambda: self.ridge_lambda,
            washout: self.washout,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub trials: usize,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    pub format: EmitFormat,
    pub exec: ExecMode,
    pub scenario: Layout,
    pub ofdm: OfdmConfig,
    pub mobility: MobilitySection,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<Sweep>,
    pub sync: ImpairmentLevels,
    pub mcs: McsSection,
    pub downlink: DownlinkSection,
    pub uplink: UplinkSection,
    pub rc: RcSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            trials: 200,
            seed: 1,
            output: None,
            format: EmitFormat::Csv,
            exec: ExecMode::Parallel,
            scenario: Layout::default(),
            ofdm: OfdmConfig::default(),
            mobility: MobilitySection::default(),
            sweep: None,
            sync: ImpairmentLevels::default(),
            mcs: McsSection::default(),
            downlink: DownlinkSection::default(),
            uplink: UplinkSection::default(),
            rc: RcSection::default(),
        }
    }
}

fn cfg_err(e: impl fmt::Display) -> Error {
    Error::Config(e.to_string())
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn number(var: SweepVariable, v: &SweepValue) -> Result<f64> {
    match v {
        SweepValue::Number(x) if x.is_finite() => Ok(*x),
        _ => Err(Error::Config(format!("{var} needs numeric values, got {v}"))),
    }
}

fn count(var: SweepVariable, v: &SweepValue) -> Result<usize> {
    let x = number(var, v)?;
    if x < 0.0 || x.fract() != 0.0 || x > 1e6 {
        return Err(Error::Config(format!("{var} needs non-negative integers, got {v}")));
    }
    Ok(x as usize)
}

fn mobility_label(v: &SweepValue) -> Result<MobilityLabel> {
    let label = match v {
        SweepValue::Label(s) => s.parse::<MobilityLabel>().map_err(cfg_err)?,
        _ => return Err(Error::Config(format!("mobility needs a label, got {v}"))),
    };
    if label == MobilityLabel::Custom {
        return Err(Error::Config("sweep over mobility takes low, medium or high".into()));
    }
    Ok(label)
}

/// One operating point of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    /// `variable=value` pairs joined by `;`, as written to `sweep_value`.
    pub label: String,
    pub layout: Layout,
    pub mobility: MobilityProfile,
    pub sync: ImpairmentLevels,
}

impl SweepPoint {
    fn apply(&mut self, var: SweepVariable, v: &SweepValue) -> Result<()> {
        match var {
            SweepVariable::DistanceM => self.layout.distance_m = number(var, v)?,
            SweepVariable::NumRus => self.layout.num_rus = count(var, v)?,
            SweepVariable::NumUes => self.layout.num_ues = count(var, v)?,
            SweepVariable::Mobility => self.mobility = MobilityProfile::named(mobility_label(v)?),
            SweepVariable::CfoHz => self.sync.cfo_hz = number(var, v)?,
        }
        let pair = format!("{var}={v}");
        if self.label.is_empty() {
            self.label = pair;
        } else {
            self.label = format!("{};{pair}", self.label);
        }
        Ok(())
    }
}

impl ExperimentConfig {
    /// Defaults of one study.
    pub fn preset(study: Study) -> Self {
        let mut c = Self::default();
        match study {
            Study::Downlink => {
                c.sweep = Some(Sweep::new(
                    SweepVariable::DistanceM,
                    [100.0, 300.0, 1000.0].map(SweepValue::from),
                ));
                c.scenario.num_ues = 1;
                c.scenario.gnb_power_dbm = 33.0;
                c.downlink.csi = CsiSource::Perfect;
            }
            Study::Uplink => {
                c.sweep = Some(Sweep::new(
                    SweepVariable::NumRus,
                    [0.0, 1.0, 2.0, 4.0, 8.0].map(SweepValue::from),
                ));
                c.scenario.gnb_antennas = 2;
            }
            Study::Mobility => {
                c.sweep = Some(Sweep::new(
                    SweepVariable::Mobility,
                    [MobilityLabel::Low, MobilityLabel::Medium, MobilityLabel::High].map(SweepValue::from),
                ));
                c.downlink.csi = CsiSource::Predicted;
            }
            Study::RcBench => {
                c.trials = 100;
                c.rc.size = 64;
            }
        }
        c
    }

    /// Parses `text` over the preset of `study` and validates the result.
    pub fn from_toml_str(study: Study, text: &str) -> Result<Self> {
        let mut base = toml::Table::try_from(Self::preset(study)).map_err(cfg_err)?;
        let over: toml::Table = toml::from_str(text).map_err(cfg_err)?;
        merge(&mut base, over);
        let config: Self = toml::Value::Table(base).try_into().map_err(cfg_err)?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_path(study: Study, path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(study, &text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.trials == 0 {
            return fail("trials must be positive");
        }
        if self.seed > i64::MAX as u64 {
            return fail("seed must fit in a signed 64-bit integer");
        }
        self.mobility.profile()?;
        if let Some(sweep) = &self.sweep {
            if sweep.values.is_empty() {
                return fail("sweep values must not be empty");
            }
            let mut probe = self.base_point()?;
            for v in &sweep.values {
                probe.apply(sweep.variable, v)?;
            }
        }
        if !(self.mcs.overhead > 0.0 && self.mcs.overhead <= 1.0) {
            return fail("mcs.overhead must lie in (0, 1]");
        }
        if !(self.downlink.csi_age_s > 0.0 && self.uplink.csi_age_s >= 0.0) {
            return fail("CSI ages must be positive");
        }
        if self.downlink.ru_counts.is_empty() || self.downlink.ue_counts.is_empty() {
            return fail("downlink.ru_counts and downlink.ue_counts must not be empty");
        }
        if self.downlink.ue_counts.contains(&0) {
            return fail("downlink.ue_counts entries must be positive");
        }
        if self.uplink.mobilities.is_empty() || self.uplink.mobilities.contains(&MobilityLabel::Custom) {
            return fail("uplink.mobilities must list low, medium or high");
        }
        if self.uplink.blocks == 0 {
            return fail("uplink.blocks must be positive");
        }
        if self.rc.fd_dt.is_empty() || self.rc.fd_dt.iter().any(|&x| !(x > 0.0 && x < 0.5)) {
            return fail("rc.fd_dt entries must lie in (0, 0.5)");
        }
        if self.rc.train_steps < self.rc.washout + 2 || self.rc.test_steps == 0 {
            return fail("rc.train_steps must exceed washout + 1 and rc.test_steps must be positive");
        }
        if self.rc.history < 2 {
            return fail("rc.history must be at least 2");
        }
        Ok(())
    }

    /// SHA-256 of the canonical TOML form plus the MCS table bytes, if any.
    /// Output location, format and execution mode are excluded.
    pub fn config_hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.output = None;
        c.format = EmitFormat::default();
        c.exec = ExecMode::default();
        let text = toml::to_string(&c).map_err(cfg_err)?;
        let mut h = Sha256::new();
        h.update(text.as_bytes());
        if let Some(p) = &self.mcs.table_csv {
            h.update(fs::read(p).map_err(|e| Error::io(p, e))?);
        }
        Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn mcs_table(&self) -> Result<McsTable> {
        match &self.mcs.table_csv {
            Some(p) => McsTable::from_csv_path(p),
            None => Ok(McsTable::default()),
        }
    }

    pub fn downlink_options(&self) -> Result<DownlinkOptions> {
        Ok(DownlinkOptions {
            csi_age_s: self.downlink.csi_age_s,
            time_split: self.downlink.time_split,
            predictor: PredictorOptions {
                reservoir: self.rc.reservoir(),
                history: self.rc.history,
                sharing: self.rc.sharing,
            },
            mcs: self.mcs_table()?,
            overhead: self.mcs.overhead,
            ..Default::default()
        })
    }

    pub fn uplink_options(&self) -> UplinkOptions {
        UplinkOptions {
            csi_age_s: self.uplink.csi_age_s,
            blocks: self.uplink.blocks,
            fusion: self.uplink.fusion,
            overhead: self.mcs.overhead,
            ..Default::default()
        }
    }

    fn base_point(&self) -> Result<SweepPoint> {
        Ok(SweepPoint {
            label: String::new(),
            layout: self.scenario,
            mobility: self.mobility.profile()?,
            sync: self.sync,
        })
    }

    /// Operating points of `study`: the sweep crossed with the study's
    /// second axis (RU counts, mobilities or UE counts), unless the sweep
    /// already varies that axis.
    pub fn points(&self, study: Study) -> Result<Vec<SweepPoint>> {
        let sweep = match self.sweep.clone().or(Self::preset(study).sweep) {
            Some(s) => s,
            None => return Ok(Vec::new()),
        };
        let second: Option<(SweepVariable, Vec<SweepValue>)> = match study {
            Study::Downlink => Some((
                SweepVariable::NumRus,
                self.downlink
                    .ru_counts
                    .iter()
                    .map(|&k| SweepValue::Number(k as f64))
                    .collect(),
            )),
            Study::Uplink => Some((
                SweepVariable::Mobility,
                self.uplink.mobilities.iter().map(|&l| l.into()).collect(),
            )),
            Study::Mobility => Some((
                SweepVariable::NumUes,
                self.downlink
                    .ue_counts
                    .iter()
                    .map(|&k| SweepValue::Number(k as f64))
                    .collect(),
            )),
            Study::RcBench => None,
        };
        let mut out = Vec::new();
        for v in &sweep.values {
            let mut p = self.base_point()?;
            p.apply(sweep.variable, v)?;
            match &second {
                Some((var, values)) if *var != sweep.variable => {
                    for w in values {
                        let mut q = p.clone();
                        q.apply(*var, w)?;
                        out.push(q);
                    }
                }
                _ => out.push(p),
            }
        }
        Ok(out)
    }

    pub fn manifest(&self, study: Study) -> Result<Manifest> {
        let mut profiles: Vec<MobilityProfile> = Vec::new();
        for p in self.points(study)? {
            if !profiles.contains(&p.mobility) {
                profiles.push(p.mobility);
            }
        }
        Ok(Manifest {
            config_hash: self.config_hash()?,
            seed_root: self.seed,
            version: VERSION.to_string(),
            study,
            trials: self.trials,
            mobility_profiles: profiles,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Units {
    #[serde(rename = "bps/Hz")]
    BpsPerHz,
    Mbps,
    #[serde(rename = "dB")]
    Db,
    #[serde(rename = "ratio")]
    Ratio,
}

impl Units {
    pub fn as_str(self) -> &'static str {
        match self {
            Units::BpsPerHz => "bps/Hz",
            Units::Mbps => "Mbps",
            Units::Db => "dB",
            Units::Ratio => "ratio",
        }
    }
}

impl fmt::Display for Units {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One output row. Per-trial rows carry the trial seed; `_mean`, `_ci95`
/// and other summary rows carry the root seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub sweep_value: String,
    pub seed: u64,
    pub metric_name: String,
    pub metric_value: f64,
    pub units: Units,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seed_root: u64,
    pub version: String,
    pub study: Study,
    pub trials: usize,
    /// Speeds actually simulated, in km/h.
    pub mobility_profiles: Vec<MobilityProfile>,
}

/// Sample mean and 95% half-width (normal approximation).
pub fn mean_ci95(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, Z95 * (var / n).sqrt())
}

type Metric = (&'static str, Units);

struct PointRows<'a> {
    point: &'a SweepPoint,
    /// `(trial seed, metric values)` in trial order.
    rows: Vec<(u64, Vec<f64>)>,
}

impl PointRows<'_> {
    fn column(&self, k: usize) -> Vec<f64> {
        self.rows.iter().map(|(_, v)| v[k]).collect()
    }
}

fn run_points<'a, F>(config: &ExperimentConfig, points: &'a [SweepPoint], trial: F) -> Result<Vec<PointRows<'a>>>
where
    F: Fn(&SweepPoint, u64) -> Result<Vec<f64>> + Sync + Send,
{
    points
        .iter()
        .map(|p| {
            let rows = exec::map_indexed(config.exec, config.trials, |i| {
                let seed = seeding::trial_seed(config.seed, i);
                trial(p, seed).map(|v| (seed, v))
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
            log::info!("{}: {} trials done", p.label, rows.len());
            Ok(PointRows { point: p, rows })
        })
        .collect()
}

fn push_point(out: &mut Vec<ResultRecord>, root: u64, metrics: &[Metric], pr: &PointRows) {
    for (seed, values) in &pr.rows {
        for ((name, units), &v) in metrics.iter().zip(values) {
            out.push(ResultRecord {
                sweep_value: pr.point.label.clone(),
                seed: *seed,
                metric_name: (*name).to_string(),
                metric_value: v,
                units: *units,
            });
        }
    }
    for (k, (name, units)) in metrics.iter().enumerate() {
        let (m, ci) = mean_ci95(&pr.column(k));
        for (suffix, v) in [("mean", m), ("ci95", ci)] {
            out.push(ResultRecord {
                sweep_value: pr.point.label.clone(),
                seed: root,
                metric_name: format!("{name}_{suffix}"),
                metric_value: v,
                units: *units,
            });
        }
    }
}

fn trial_setup(config: &ExperimentConfig, p: &SweepPoint, seed: u64) -> Result<(Network, SyncState)> {
    let scenario = build_scenario(&p.layout, &config.ofdm, &p.mobility, seed)?;
    let sync = SyncState::draw(&p.sync, &scenario, seed);
    let net = Network::new(&scenario, &Default::default());
    Ok((net, sync))
}

const DOWNLINK_METRICS: [Metric; 5] = [
    ("baseline_capacity", Units::BpsPerHz),
    ("virtual_capacity", Units::BpsPerHz),
    ("relative_gain", Units::Ratio),
    ("end_to_end_rate", Units::BpsPerHz),
    ("throughput", Units::Mbps),
];

/// Capacity of the gNB-only link and of the virtual array (phase 2) per
/// trial, their ratio, and the two-phase end-to-end rate and throughput.
/// Each point also gets `relative_gain_of_means`.
pub fn run_downlink_case_study(config: &ExperimentConfig) -> Result<Vec<ResultRecord>> {
    let opts = config.downlink_options()?;
    let csi = config.downlink.csi;
    let points = config.points(Study::Downlink)?;
    let rows = run_points(config, &points, |p, seed| {
        let (net, sync) = trial_setup(config, p, seed)?;
        let round = run_downlink_round_on(&net, &sync, csi, &opts)?;
        let s = &net.scenario;
        let gnb = s.gnb().ok_or_else(|| Error::arg("scenario has no gNB"))?.id;
        let ues: Vec<_> = s.ues().map(|n| n.id).collect();
        // Same accumulation as the round's direct mode, so 0 RUs gives a
        // gain of exactly 1.
        let slots = s.duration_slots.max(1);
        let w = 1.0 / slots as f64;
        let u = ues.len() as f64;
        let mut per_ue = vec![0.0; ues.len()];
        for slot in 0..slots {
            let t0 = slot as f64 * s.ofdm.slot_duration_s();
            for (acc, &ue) in per_ue.iter_mut().zip(&ues) {
                *acc += w * (direct_capacity(&net, gnb, ue, t0)? / u);
            }
        }
        let baseline: f64 = per_ue.iter().sum();
        let virt = round.phase2_sum_bpshz();
        Ok(vec![
            baseline,
            virt,
            relative_gain(virt, baseline)?,
            round.sum_rate_bpshz(),
            round.sum_mbps(),
        ])
    })?;
    let mut out = Vec::new();
    for pr in &rows {
        push_point(&mut out, config.seed, &DOWNLINK_METRICS, pr);
        let (b, _) = mean_ci95(&pr.column(0));
        let (v, _) = mean_ci95(&pr.column(1));
        out.push(ResultRecord {
            sweep_value: pr.point.label.clone(),
            seed: config.seed,
            metric_name: "relative_gain_of_means".into(),
            metric_value: relative_gain(v, b)?,
            units: Units::Ratio,
        });
    }
    Ok(out)
}

const UPLINK_METRICS: [Metric; 4] = [
    ("throughput", Units::Mbps),
    ("mcs_index", Units::Ratio),
    ("fused_snr", Units::Db),
    ("bit_error_rate", Units::Ratio),
];

/// Receive-virtual-array uplink per RU count and mobility: aggregate
/// throughput, chosen MCS index (mean over UEs, -1 when none fits), fused
/// effective SNR (mean over UEs) and the bit-level fused BER.
pub fn run_uplink_case_study(config: &ExperimentConfig) -> Result<Vec<ResultRecord>> {
    let opts = config.uplink_options();
    let table = config.mcs_table()?;
    let points = config.points(Study::Uplink)?;
    let rows = run_points(config, &points, |p, seed| {
        let (net, sync) = trial_setup(config, p, seed)?;
        let round = run_uplink_round_on(&net, &sync, &table, &opts)?;
        let u = round.per_ue_mcs.len().max(1) as f64;
        let mcs = round
            .per_ue_mcs
            .iter()
            .map(|m| m.map_or(-1.0, |i| i as f64))
            .sum::<f64>()
            / u;
        let snr = round.fused_snr_db.iter().sum::<f64>() / u;
        Ok(vec![round.throughput_mbps(), mcs, snr, round.bit_error_rate()])
    })?;
    let mut out = Vec::new();
    for pr in &rows {
        push_point(&mut out, config.seed, &UPLINK_METRICS, pr);
    }
    Ok(out)
}

const MOBILITY_METRICS: [Metric; 2] = [("bit_rate", Units::Mbps), ("spectral_efficiency", Units::BpsPerHz)];

/// Aggregate downlink bit rate and spectral efficiency per mobility and UE
/// count, with the CSI source of `[downlink]` (predicted in the preset).
pub fn run_mobility_sweep(config: &ExperimentConfig) -> Result<Vec<ResultRecord>> {
    let opts = config.downlink_options()?;
    let csi = config.downlink.csi;
    let points = config.points(Study::Mobility)?;
    let rows = run_points(config, &points, |p, seed| {
        let (net, sync) = trial_setup(config, p, seed)?;
        let round = run_downlink_round_on(&net, &sync, csi, &opts)?;
        Ok(vec![round.sum_mbps(), round.sum_rate_bpshz()])
    })?;
    let mut out = Vec::new();
    for pr in &rows {
        push_point(&mut out, config.seed, &MOBILITY_METRICS, pr);
    }
    Ok(out)
}

pub fn run_study(config: &ExperimentConfig, study: Study) -> Result<Vec<ResultRecord>> {
    match study {
        Study::Downlink => run_downlink_case_study(config),
        Study::Uplink => run_uplink_case_study(config),
        Study::Mobility => run_mobility_sweep(config),
        Study::RcBench => Err(Error::arg("rc-bench produces RcBenchRow, use run_rc_bench")),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RcBenchRow {
    pub seed: u64,
    pub f_d_dt: f64,
    pub nmse_predictor_db: f64,
    pub nmse_persistence_db: f64,
}

/// One-step prediction of Jakes fading: reservoir predictor against
/// persistence (last sample) on the `test_steps` samples after training.
pub fn run_rc_bench(config: &ExperimentConfig) -> Result<Vec<RcBenchRow>> {
    let rc = &config.rc;
    let (train, test) = (rc.train_steps, rc.test_steps);
    let per_trial = exec::map_indexed(config.exec, config.trials, |i| {
        let seed = seeding::trial_seed(config.seed, i);
        rc.fd_dt
            .iter()
            .enumerate()
            .map(|(j, &fd_dt)| {
                let mut rng = seeding::rng(&[seed, seeding::tag::RESERVOIR, j as u64]);
                let seq = jakes_sequence(&mut rng, fd_dt, train + test, DEFAULT_SINUSOIDS);
                let mut predictor =
                    ChannelPredictor::new(rc.reservoir(), seeding::derive(&[seed, seeding::tag::RESERVOIR]))?;
                predictor.fit(&seq[..train])?;
                let preds = predictor.one_step_predictions(&seq[..train + test - 1])?;
                let truth = &seq[train..];
                Ok(RcBenchRow {
                    seed,
                    f_d_dt: fd_dt,
                    nmse_predictor_db: nmse_db(&preds[train - 1..], truth),
                    nmse_persistence_db: nmse_db(&seq[train - 1..train + test - 1], truth),
                })
            })
            .collect::<Result<Vec<_>>>()
    });
    Ok(per_trial
        .into_iter()
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect())
}

fn float(x: f64) -> String {
    format!("{x:.16e}")
}

fn check_finite(records: &[ResultRecord]) -> Result<()> {
    match records.iter().find(|r| !r.metric_value.is_finite()) {
        Some(r) => Err(Error::arg(format!(
            "non-finite {} at {} (seed {})",
            r.metric_name, r.sweep_value, r.seed
        ))),
        None => Ok(()),
    }
}

fn csv_writer() -> csv::Writer<Vec<u8>> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new())
}

fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::arg(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::arg(e.to_string()))
}

/// CSV text: header, then one LF-terminated line per record with floats in
/// 17 significant digits.
pub fn render_csv(records: &[ResultRecord]) -> Result<String> {
    check_finite(records)?;
    let mut w = csv_writer();
    let csv_err = |e: csv::Error| Error::arg(e.to_string());
    w.write_record(CSV_HEADER.split(',')).map_err(csv_err)?;
    for r in records {
        w.write_record([
            r.sweep_value.as_str(),
            &r.seed.to_string(),
            &r.metric_name,
            &float(r.metric_value),
            r.units.as_str(),
        ])
        .map_err(csv_err)?;
    }
    finish_csv(w)
}

pub fn render_rc_bench_csv(rows: &[RcBenchRow]) -> Result<String> {
    let mut w = csv_writer();
    let csv_err = |e: csv::Error| Error::arg(e.to_string());
    w.write_record(RC_BENCH_HEADER.split(',')).map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.seed.to_string(),
            float(r.f_d_dt),
            float(r.nmse_predictor_db),
            float(r.nmse_persistence_db),
        ])
        .map_err(csv_err)?;
    }
    finish_csv(w)
}

#[derive(Serialize, Deserialize)]
struct JsonDoc<T> {
    manifest: Manifest,
    records: Vec<T>,
}

/// `<path>.manifest.json`, written next to every CSV output.
pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = OsString::from(path.as_os_str());
    s.push(".manifest.json");
    PathBuf::from(s)
}

/// Manifest of an existing output, if it can be read.
pub fn read_manifest(path: &Path, format: EmitFormat) -> Option<Manifest> {
    #[derive(Deserialize)]
    struct Head {
        manifest: Manifest,
    }
    match format {
        EmitFormat::Csv => serde_json::from_str(&fs::read_to_string(manifest_path(path)).ok()?).ok(),
        EmitFormat::Json => serde_json::from_str::<Head>(&fs::read_to_string(path).ok()?)
            .ok()
            .map(|h| h.manifest),
    }
}

fn warn_on_mismatch(path: &Path, format: EmitFormat, manifest: &Manifest) {
    if let Some(old) = read_manifest(path, format) {
        if old.config_hash != manifest.config_hash {
            log::warn!(
                "{} was produced by a different config (hash {} vs {}); overwriting",
                path.display(),
                old.config_hash,
                manifest.config_hash
            );
        }
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn emit<T: Serialize + Clone>(
    csv_text: impl FnOnce() -> Result<String>,
    records: &[T],
    format: EmitFormat,
    path: &Path,
    manifest: &Manifest,
) -> Result<()> {
    warn_on_mismatch(path, format, manifest);
    match format {
        EmitFormat::Csv => {
            write(path, &csv_text()?)?;
            let m = serde_json::to_string_pretty(manifest).map_err(|e| Error::arg(e.to_string()))?;
            write(&manifest_path(path), &(m + "\n"))
        }
        EmitFormat::Json => write(path, &render_json(records, manifest)?),
    }
}

/// JSON document `{manifest, records}` with a trailing newline.
pub fn render_json<T: Serialize + Clone>(records: &[T], manifest: &Manifest) -> Result<String> {
    let doc = JsonDoc {
        manifest: manifest.clone(),
        records: records.to_vec(),
    };
    let text = serde_json::to_string_pretty(&doc).map_err(|e| Error::arg(e.to_string()))?;
    Ok(text + "\n")
}

/// Writes `records` to `path`. CSV outputs get a sidecar manifest; JSON
/// embeds it. Warns when overwriting an output of a different config.
pub fn emit_results(records: &[ResultRecord], format: EmitFormat, path: &Path, manifest: &Manifest) -> Result<()> {
    check_finite(records)?;
    emit(|| render_csv(records), records, format, path, manifest)
}

pub fn emit_rc_bench(rows: &[RcBenchRow], format: EmitFormat, path: &Path, manifest: &Manifest) -> Result<()> {
    emit(|| render_rc_bench_csv(rows), rows, format, path, manifest)
}

/// Parses CSV produced by [`render_csv`].
pub fn parse_csv(text: &str) -> Result<Vec<ResultRecord>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    r.deserialize()
        .map(|row| row.map_err(|e| Error::arg(e.to_string())))
        .collect()
}
