//! MCS table, capacity-based effective SNR and a logistic BLER abstraction.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detect::Modulation;
use crate::error::{Error, Result};

/// Width of the logistic BLER transition, dB.
pub const BLER_SLOPE_DB: f64 = 0.5;
pub const BLER_FLOOR: f64 = 1e-6;
/// Gap between the Shannon SNR of an entry and its 10% BLER point.
pub const IMPLEMENTATION_GAP_DB: f64 = 2.0;
pub const DEFAULT_OVERHEAD: f64 = 0.86;
/// Goodput under which no MCS counts as feasible.
pub const MIN_GOODPUT_MBPS: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McsEntry {
    pub index: usize,
    pub modulation: Modulation,
    pub code_rate: f64,
    pub spectral_eff_bpshz: f64,
    pub snr_threshold_db: f64,
}

impl McsEntry {
    pub fn new(index: usize, modulation: Modulation, code_rate: f64, snr_threshold_db: f64) -> Self {
        Self {
            index,
            modulation,
            code_rate,
            spectral_eff_bpshz: modulation.bits_per_symbol() as f64 * code_rate,
            snr_threshold_db,
        }
    }

    /// Entry whose threshold sits `IMPLEMENTATION_GAP_DB` above Shannon.
    pub fn shannon_gap(index: usize, modulation: Modulation, code_rate: f64) -> Self {
        let se = modulation.bits_per_symbol() as f64 * code_rate;
        let threshold = 10.0 * (2f64.powf(se) - 1.0).log10() + IMPLEMENTATION_GAP_DB;
        Self::new(index, modulation, code_rate, threshold)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McsTable {
    pub entries: Vec<McsEntry>,
}

#[derive(Debug, Deserialize)]
struct McsRow {
    index: usize,
    modulation: String,
    code_rate: f64,
    snr_threshold_db: f64,
}

impl Default for McsTable {
    fn default() -> Self {
        use Modulation::*;
        let rows = [
            (Qpsk, 0.33),
            (Qpsk, 0.5),
            (Qpsk, 0.66),
            (Qam16, 0.5),
            (Qam16, 0.66),
            (Qam16, 0.75),
            (Qam64, 0.75),
            (Qam64, 0.85),
        ];
        Self {
            entries: rows
                .iter()
                .enumerate()
                .map(|(i, &(m, r))| McsEntry::shannon_gap(i, m, r))
                .collect(),
        }
    }
}

impl McsTable {
    pub fn new(entries: Vec<McsEntry>) -> Result<Self> {
        let table = Self { entries };
        table.check()?;
        Ok(table)
    }

    /// Entries must be non-empty and strictly increasing in both spectral
    /// efficiency and threshold.
    pub fn check(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::arg("empty MCS table"));
        }
        for e in &self.entries {
            if !(e.code_rate > 0.0 && e.code_rate <= 1.0) {
                return Err(Error::arg(format!(
                    "MCS {}: code rate {} outside (0, 1]",
                    e.index, e.code_rate
                )));
            }
        }
        for w in self.entries.windows(2) {
            if !(w[1].spectral_eff_bpshz > w[0].spectral_eff_bpshz && w[1].snr_threshold_db > w[0].snr_threshold_db) {
                return Err(Error::arg(format!(
                    "MCS {} does not increase on MCS {} in both efficiency and threshold",
                    w[1].index, w[0].index
                )));
            }
        }
        Ok(())
    }

    /// Reads `index,modulation,code_rate,snr_threshold_db` rows.
    pub fn from_csv_path(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv_reader(file).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn from_csv_reader<R: std::io::Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let mut entries = Vec::new();
        for row in rdr.deserialize::<McsRow>() {
            let row = row.map_err(|e| Error::Config(e.to_string()))?;
            let modulation = row.modulation.parse()?;
            entries.push(McsEntry::new(
                row.index,
                modulation,
                row.code_rate,
                row.snr_threshold_db,
            ));
        }
        Self::new(entries)
    }

    pub fn lowest_threshold_db(&self) -> f64 {
        self.entries[0].snr_threshold_db
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThroughputReport {
    pub chosen_mcs: Option<usize>,
    pub bler: f64,
    pub goodput_mbps: f64,
}

impl ThroughputReport {
    pub fn none() -> Self {
        Self {
            chosen_mcs: None,
            bler: 1.0,
            goodput_mbps: 0.0,
        }
    }
}

/// Linear effective SNR `2^mean(log2(1 + snr)) - 1`.
pub fn effective_snr_linear(snrs: &[f64]) -> Result<f64> {
    if snrs.is_empty() {
        return Err(Error::arg("effective SNR of an empty list"));
    }
    let mean = snrs.iter().map(|s| s.max(0.0).ln_1p()).sum::<f64>() / snrs.len() as f64 / std::f64::consts::LN_2;
    Ok(mean.exp2() - 1.0)
}

pub fn effective_snr_db(per_subcarrier_snr_db: &[f64]) -> Result<f64> {
    let lin: Vec<f64> = per_subcarrier_snr_db.iter().map(|d| 10f64.powf(d / 10.0)).collect();
    Ok(10.0 * effective_snr_linear(&lin)?.log10())
}

pub fn bler(snr_eff_db: f64, mcs: &McsEntry) -> f64 {
    let x = (snr_eff_db - mcs.snr_threshold_db) / BLER_SLOPE_DB;
    (1.0 / (1.0 + x.exp())).clamp(BLER_FLOOR, 1.0)
}

/// Best entry by `spectral_eff * (1 - BLER)`; ties keep the lower index.
pub fn max_throughput(
    snr_eff_db: f64,
    table: &[McsEntry],
    bandwidth_hz: f64,
    overhead: f64,
) -> Result<ThroughputReport> {
    if table.is_empty() {
        return Err(Error::arg("empty MCS table"));
    }
    if !(overhead > 0.0 && overhead <= 1.0) {
        return Err(Error::arg(format!("overhead {overhead} outside (0, 1]")));
    }
    let mut best: Option<(usize, f64, f64)> = None;
    for e in table {
        let b = bler(snr_eff_db, e);
        let score = e.spectral_eff_bpshz * (1.0 - b);
        if best.is_none_or(|(_, s, _)| score > s) {
            best = Some((e.index, score, b));
        }
    }
    let (index, score, b) = best.expect("non-empty table");
    let goodput = score * bandwidth_hz * overhead / 1e6;
    if goodput < MIN_GOODPUT_MBPS || snr_eff_db.is_nan() {
        return Ok(ThroughputReport::none());
    }
    Ok(ThroughputReport {
        chosen_mcs: Some(index),
        bler: b,
        goodput_mbps: goodput,
    })
}

/// MCS goodput of a link known only by its capacity: `streams` equal-SNR
/// streams sharing `rate_bpshz`.
pub fn capacity_goodput(
    rate_bpshz: f64,
    streams: usize,
    table: &[McsEntry],
    bandwidth_hz: f64,
    overhead: f64,
) -> Result<ThroughputReport> {
    let n = streams.max(1) as f64;
    let snr = (rate_bpshz.max(0.0) / n).exp2() - 1.0;
    let mut r = max_throughput(10.0 * snr.log10(), table, bandwidth_hz, overhead)?;
    r.goodput_mbps *= n;
    Ok(r)
}
