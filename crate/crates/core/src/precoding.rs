//! Zero-forcing multi-user precoding under per-node power budgets, and the
//! Shannon-rate bookkeeping around it.

use nalgebra::DMatrix;

use crate::channel::{CMatrix, C64};
use crate::error::{Error, Result};
use crate::scenario::dbm_to_mw;

/// Relative singular-value threshold for the rank decision.
pub const RANK_TOLERANCE: f64 = 1e-12;

/// Stacked downlink channel from a virtual array to a set of UEs.
///
/// Columns are grouped by transmitting node in the order given by
/// `tx_node_antennas`; rows are grouped by UE.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositeChannel {
    pub per_ue_blocks: Vec<CMatrix>,
    pub total_tx_antennas: usize,
    pub tx_node_antennas: Vec<usize>,
}

impl CompositeChannel {
    pub fn new(per_ue_blocks: Vec<CMatrix>, tx_node_antennas: Vec<usize>) -> Result<Self> {
        let total: usize = tx_node_antennas.iter().sum();
        if let Some(b) = per_ue_blocks.iter().find(|b| b.ncols() != total) {
            return Err(Error::arg(format!(
                "UE block has {} columns, virtual array has {total} antennas",
                b.ncols()
            )));
        }
        Ok(Self {
            per_ue_blocks,
            total_tx_antennas: total,
            tx_node_antennas,
        })
    }

    pub fn num_streams(&self) -> usize {
        self.per_ue_blocks.iter().map(|b| b.nrows()).sum()
    }

    /// True when the streams fit on the transmit antennas.
    pub fn is_feasible(&self) -> bool {
        self.num_streams() <= self.total_tx_antennas
    }

    pub fn stacked(&self) -> CMatrix {
        let rows = self.num_streams();
        let mut h = CMatrix::zeros(rows, self.total_tx_antennas);
        let mut r0 = 0;
        for b in &self.per_ue_blocks {
            h.view_mut((r0, 0), (b.nrows(), b.ncols())).copy_from(b);
            r0 += b.nrows();
        }
        h
    }

    pub fn streams_per_ue(&self) -> Vec<usize> {
        self.per_ue_blocks.iter().map(|b| b.nrows()).collect()
    }

    /// Column range `[start, end)` of every transmitting node.
    pub fn node_columns(&self) -> Vec<std::ops::Range<usize>> {
        let mut start = 0;
        self.tx_node_antennas
            .iter()
            .map(|&n| {
                let r = start..start + n;
                start += n;
                r
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrecodingResult {
    /// Unit-norm columns, one per stream.
    pub precoder: CMatrix,
    /// Power allocated to every stream (mW).
    pub stream_power_mw: f64,
    pub noise_power_mw: f64,
    pub streams_per_ue: Vec<usize>,
    pub per_ue_sinr_db: Vec<Vec<f64>>,
    pub per_ue_rate_bpshz: Vec<f64>,
}

impl PrecodingResult {
    /// Power radiated by each node (mW).
    pub fn node_powers_mw(&self, node_antennas: &[usize]) -> Vec<f64> {
        let mut start = 0;
        node_antennas
            .iter()
            .map(|&n| {
                let p = self.precoder.rows(start, n).norm_squared() * self.stream_power_mw;
                start += n;
                p
            })
            .collect()
    }
}

/// Moore-Penrose pseudo-inverse through the SVD, returning the numerical rank.
pub fn pseudo_inverse(h: &CMatrix) -> (CMatrix, usize) {
    let svd = h.clone().svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let tol = RANK_TOLERANCE * smax;
    let rank = svd.singular_values.iter().filter(|&&s| s > tol && s > 0.0).count();
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut pinv = CMatrix::zeros(h.ncols(), h.nrows());
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s > tol && s > 0.0 {
            let vk = v_t.row(k).adjoint();
            let uk = u.column(k).adjoint();
            pinv += (vk * uk) * C64::from(1.0 / s);
        }
    }
    (pinv, rank)
}

/// Per-stream SINR (linear) when `precoder` with equal per-stream power is
/// applied over `h_true`. Inter-stream leakage counts as noise.
pub fn stream_sinrs(h_true: &CMatrix, precoder: &CMatrix, stream_power_mw: f64, noise_mw: f64) -> Vec<f64> {
    let eff = h_true * precoder;
    (0..eff.nrows())
        .map(|s| {
            let sig = eff[(s, s)].norm_sqr() * stream_power_mw;
            let leak: f64 = (0..eff.ncols())
                .filter(|&j| j != s)
                .map(|j| eff[(s, j)].norm_sqr())
                .sum::<f64>()
                * stream_power_mw;
            sig / (noise_mw + leak)
        })
        .collect()
}

/// Groups per-stream SINRs by UE and converts them to rates.
pub fn per_ue_rates(sinrs: &[f64], streams_per_ue: &[usize]) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut at = 0;
    let mut sinr_db = Vec::with_capacity(streams_per_ue.len());
    let mut rates = Vec::with_capacity(streams_per_ue.len());
    for &n in streams_per_ue {
        let s = &sinrs[at..at + n];
        sinr_db.push(s.iter().map(|x| 10.0 * x.log10()).collect());
        rates.push(s.iter().map(|x| (1.0 + x).log2()).sum());
        at += n;
    }
    (sinr_db, rates)
}

/// Zero-forcing precoder `W = H^H (H H^H)^-1`, column-normalised, with equal
/// stream powers scaled until the tightest node budget binds.
pub fn zf_precoder(
    h: &CompositeChannel,
    node_power_budgets_dbm: &[f64],
    noise_power_dbm: f64,
) -> Result<PrecodingResult> {
    if h.per_ue_blocks.is_empty() {
        return Err(Error::arg("empty UE list"));
    }
    if node_power_budgets_dbm.len() != h.tx_node_antennas.len() {
        return Err(Error::arg(format!(
            "{} power budgets for {} transmitting nodes",
            node_power_budgets_dbm.len(),
            h.tx_node_antennas.len()
        )));
    }
    let streams = h.num_streams();
    let stacked = h.stacked();
    let (mut w, rank) = pseudo_inverse(&stacked);
    if rank < streams {
        return Err(Error::ZfInfeasible { rank, streams });
    }
    for mut col in w.column_iter_mut() {
        let n = col.norm();
        col /= C64::from(n);
    }

    let stream_power_mw = h
        .node_columns()
        .iter()
        .zip(node_power_budgets_dbm)
        .filter_map(|(cols, &budget)| {
            let share = w.rows(cols.start, cols.len()).norm_squared();
            (share > 0.0).then(|| dbm_to_mw(budget) / share)
        })
        .fold(f64::INFINITY, f64::min);

    let noise_mw = dbm_to_mw(noise_power_dbm);
    let sinrs = stream_sinrs(&stacked, &w, stream_power_mw, noise_mw);
    let streams_per_ue = h.streams_per_ue();
    let (per_ue_sinr_db, per_ue_rate_bpshz) = per_ue_rates(&sinrs, &streams_per_ue);
    Ok(PrecodingResult {
        precoder: w,
        stream_power_mw,
        noise_power_mw: noise_mw,
        streams_per_ue,
        per_ue_sinr_db,
        per_ue_rate_bpshz,
    })
}

pub fn sum_capacity_bpshz(result: &PrecodingResult) -> f64 {
    result.per_ue_rate_bpshz.iter().sum::<f64>().max(0.0)
}

/// Open-loop MIMO capacity with equal power over the transmit antennas.
pub fn baseline_capacity_bpshz(h_direct: &CMatrix, tx_power_dbm: f64, noise_power_dbm: f64) -> f64 {
    let nt = h_direct.ncols().max(1) as f64;
    let snr = dbm_to_mw(tx_power_dbm) / (nt * dbm_to_mw(noise_power_dbm));
    log2_det_i_plus(h_direct, snr)
}

/// `log2 det(I + c H H^H)` through a Cholesky factorisation.
pub fn log2_det_i_plus(h: &CMatrix, c: f64) -> f64 {
    let n = h.nrows();
    let gram = h * h.adjoint() * C64::from(c) + CMatrix::identity(n, n);
    match gram.clone().cholesky() {
        Some(ch) => {
            let l = ch.l();
            2.0 * (0..n).map(|i| l[(i, i)].re.ln()).sum::<f64>() / std::f64::consts::LN_2
        }
        None => {
            // Numerically indefinite only for absurd c; fall back to eigenvalues.
            let eig = gram.symmetric_eigenvalues();
            eig.iter().map(|e| e.max(1.0).log2()).sum()
        }
    }
}

pub fn relative_gain(virtual_capacity: f64, baseline_capacity: f64) -> Result<f64> {
    if !(baseline_capacity > 0.0) {
        return Err(Error::UndefinedRelativeGain);
    }
    Ok(virtual_capacity / baseline_capacity)
}

/// Worst-case ratio of leaked to useful power over all streams of `H W`.
pub fn interference_to_signal(h: &CMatrix, w: &CMatrix) -> f64 {
    let eff = h * w;
    let min_sig = (0..eff.nrows().min(eff.ncols()))
        .map(|s| eff[(s, s)].norm_sqr())
        .fold(f64::INFINITY, f64::min);
    let max_leak = (0..eff.nrows())
        .flat_map(|r| (0..eff.ncols()).filter(move |&c| c != r).map(move |c| (r, c)))
        .map(|(r, c)| eff[(r, c)].norm_sqr())
        .fold(0.0, f64::max);
    max_leak / min_sig
}

pub fn random_channel<R: rand::Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> CMatrix {
    DMatrix::from_fn(rows, cols, |_, _| crate::channel::complex_gaussian(rng, 1.0))
}
