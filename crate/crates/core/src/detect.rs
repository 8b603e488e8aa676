//! Uplink detection: constellations, Alamouti STBC, ordered MMSE-SIC, the
//! exhaustive ML oracle, and post-detection fusion of several receivers'
//! decisions.
//!
//! All detectors assume unit-energy symbols; transmit power and pathloss are
//! folded into the channel matrix by the caller.

use std::fmt;

use nalgebra::{DVector, Matrix2};
use serde::{Deserialize, Serialize};

use crate::channel::{CMatrix, ChannelMatrix, C64};
use crate::error::{Error, Result};

/// Largest per-bit LLR magnitude reported.
pub const LLR_CLIP: f64 = 1e3;

/// Hypothesis budget of [`ml_joint_detect`].
pub const ML_MAX_HYPOTHESES: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Modulation {
    Bpsk,
    Qpsk,
    Qam16,
    Qam64,
}

impl Modulation {
    pub fn bits_per_symbol(self) -> usize {
        match self {
            Modulation::Bpsk => 1,
            Modulation::Qpsk => 2,
            Modulation::Qam16 => 4,
            Modulation::Qam64 => 6,
        }
    }
}

impl fmt::Display for Modulation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modulation::Bpsk => "BPSK",
            Modulation::Qpsk => "QPSK",
            Modulation::Qam16 => "QAM16",
            Modulation::Qam64 => "QAM64",
        })
    }
}

impl std::str::FromStr for Modulation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().replace(['-', '_'], "").as_str() {
            "BPSK" => Ok(Modulation::Bpsk),
            "QPSK" => Ok(Modulation::Qpsk),
            "QAM16" | "16QAM" => Ok(Modulation::Qam16),
            "QAM64" | "64QAM" => Ok(Modulation::Qam64),
            other => Err(Error::arg(format!("unknown modulation {other:?}"))),
        }
    }
}

/// Gray-labelled constellation with unit average energy. The label of
/// `points[i]` is the binary expansion of `i`, MSB first.
#[derive(Debug, Clone, PartialEq)]
pub struct Constellation {
    pub label: Modulation,
    pub points: Vec<C64>,
    pub bits_per_symbol: usize,
}

fn gray_decode(mut g: usize) -> usize {
    let mut b = g;
    while g > 0 {
        g >>= 1;
        b ^= g;
    }
    b
}

impl Constellation {
    pub fn new(label: Modulation) -> Self {
        let bits = label.bits_per_symbol();
        let points = match label {
            Modulation::Bpsk => vec![C64::new(1.0, 0.0), C64::new(-1.0, 0.0)],
            _ => {
                let half = bits / 2;
                let levels = 1usize << half;
                let norm = (2.0 * ((levels * levels) as f64 - 1.0) / 3.0).sqrt();
                let pam = |g: usize| (2.0 * gray_decode(g) as f64 - (levels as f64 - 1.0)) / norm;
                (0..1usize << bits)
                    .map(|i| C64::new(pam(i >> half), pam(i & (levels - 1))))
                    .collect()
            }
        };
        Self {
            label,
            points,
            bits_per_symbol: bits,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Nearest point; ties go to the lowest index.
    pub fn slice(&self, z: C64) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, p) in self.points.iter().enumerate() {
            let d = (z - p).norm_sqr();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }

    pub fn bit(&self, index: usize, b: usize) -> bool {
        (index >> (self.bits_per_symbol - 1 - b)) & 1 == 1
    }

    pub fn index_of_bits(&self, bits: &[bool]) -> usize {
        bits.iter().fold(0, |acc, &b| (acc << 1) | b as usize)
    }

    /// Max-log LLRs `ln P(b=1)/P(b=0)` of an unbiased estimate `z` with noise
    /// variance `noise_var`.
    pub fn bit_decisions(&self, z: C64, noise_var: f64) -> Vec<BitDecision> {
        (0..self.bits_per_symbol)
            .map(|b| {
                let (mut d0, mut d1) = (f64::INFINITY, f64::INFINITY);
                for (i, p) in self.points.iter().enumerate() {
                    let d = (z - p).norm_sqr();
                    if self.bit(i, b) {
                        d1 = d1.min(d);
                    } else {
                        d0 = d0.min(d);
                    }
                }
                BitDecision::from_llr(llr((d0 - d1) / noise_var))
            })
            .collect()
    }
}

fn llr(x: f64) -> f64 {
    if x.is_nan() {
        0.0
    } else {
        x.clamp(-LLR_CLIP, LLR_CLIP)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BitDecision {
    pub bit: bool,
    /// `|LLR|`.
    pub reliability: f64,
}

impl BitDecision {
    pub fn from_llr(l: f64) -> Self {
        Self {
            bit: l > 0.0,
            reliability: l.abs(),
        }
    }

    /// Reliability signed towards `1`.
    pub fn signed(&self) -> f64 {
        if self.bit {
            self.reliability
        } else {
            -self.reliability
        }
    }
}

/// Alamouti code word; rows are symbol times, columns antennas.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StbcBlock {
    pub code_matrix: Matrix2<C64>,
}

impl StbcBlock {
    /// Checks `X^H X = (|s1|^2 + |s2|^2) I`.
    pub fn orthogonality_error(&self) -> f64 {
        let x = self.code_matrix;
        let e = x[(0, 0)].norm_sqr() + x[(0, 1)].norm_sqr();
        (x.adjoint() * x - Matrix2::identity() * C64::from(e)).norm()
    }
}

pub fn alamouti_encode(s1: C64, s2: C64) -> StbcBlock {
    StbcBlock {
        code_matrix: Matrix2::new(s1, s2, -s2.conj(), s1.conj()),
    }
}

/// Noise-free reception of one Alamouti block: `nr x 2` (antenna, time).
pub fn alamouti_receive(h: &CMatrix, block: &StbcBlock) -> CMatrix {
    let x = block.code_matrix;
    CMatrix::from_fn(h.nrows(), 2, |r, t| h[(r, 0)] * x[(t, 0)] + h[(r, 1)] * x[(t, 1)])
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionReport {
    /// Decided constellation indices per stream.
    pub symbols: Vec<usize>,
    pub points: Vec<C64>,
    pub post_snr_db: Vec<f64>,
    pub decode_order: Vec<usize>,
    /// Stream-major, `bits_per_symbol` entries per stream.
    pub bits: Vec<BitDecision>,
    /// Streams decided without any channel energy.
    pub erased: Vec<bool>,
}

impl DetectionReport {
    pub fn mean_reliability(&self) -> f64 {
        if self.bits.is_empty() {
            return 0.0;
        }
        self.bits.iter().map(|b| b.reliability).sum::<f64>() / self.bits.len() as f64
    }

    pub fn hard_bits(&self) -> Vec<bool> {
        self.bits.iter().map(|b| b.bit).collect()
    }

    pub fn order_is_permutation(&self) -> bool {
        let mut seen = vec![false; self.decode_order.len()];
        self.decode_order
            .iter()
            .all(|&i| i < seen.len() && !std::mem::replace(&mut seen[i], true))
    }
}

/// Linear Alamouti combining over `nr` receive antennas.
///
/// `y[r]` holds the two received samples of antenna `r`; `h` is `nr x 2`.
pub fn alamouti_decode(
    y: &[[C64; 2]],
    h: &ChannelMatrix,
    noise_var: f64,
    constellation: &Constellation,
) -> Result<DetectionReport> {
    let h = &h.entries;
    if h.ncols() != 2 || h.nrows() != y.len() {
        return Err(Error::arg(format!(
            "Alamouti needs an nr x 2 channel matching {} receive antennas, got {}x{}",
            y.len(),
            h.nrows(),
            h.ncols()
        )));
    }
    let (mut a1, mut a2) = (C64::new(0.0, 0.0), C64::new(0.0, 0.0));
    let mut gain = 0.0;
    for (r, yr) in y.iter().enumerate() {
        let (h1, h2) = (h[(r, 0)], h[(r, 1)]);
        a1 += h1.conj() * yr[0] + h2 * yr[1].conj();
        a2 += h2.conj() * yr[0] - h1 * yr[1].conj();
        gain += h1.norm_sqr() + h2.norm_sqr();
    }
    let mut report = DetectionReport {
        symbols: Vec::with_capacity(2),
        points: Vec::with_capacity(2),
        post_snr_db: Vec::with_capacity(2),
        decode_order: vec![0, 1],
        bits: Vec::with_capacity(2 * constellation.bits_per_symbol),
        erased: Vec::with_capacity(2),
    };
    for a in [a1, a2] {
        if gain > 0.0 {
            let z = a / gain;
            let idx = constellation.slice(z);
            report.symbols.push(idx);
            report.points.push(constellation.points[idx]);
            report.post_snr_db.push(10.0 * (gain / noise_var).log10());
            report.bits.extend(constellation.bit_decisions(z, noise_var / gain));
            report.erased.push(false);
        } else {
            report.symbols.push(0);
            report.points.push(constellation.points[0]);
            report.post_snr_db.push(f64::NEG_INFINITY);
            report
                .bits
                .extend((0..constellation.bits_per_symbol).map(|b| BitDecision {
                    bit: constellation.bit(0, b),
                    reliability: 0.0,
                }));
            report.erased.push(true);
        }
    }
    Ok(report)
}

/// Multi-user Alamouti as a linear model: stacking `y1` and `conj(y2)` of
/// every antenna gives `2 nr` observations of `2 U` symbols
/// `[s1_u0, s2_u0, s1_u1, ...]`. Each block is one UE's `nr x 2` channel.
pub fn alamouti_effective_channel(blocks: &[CMatrix]) -> CMatrix {
    let nr = blocks.first().map_or(0, |b| b.nrows());
    let mut h = CMatrix::zeros(2 * nr, 2 * blocks.len());
    for (u, b) in blocks.iter().enumerate() {
        for r in 0..nr {
            let (h1, h2) = (b[(r, 0)], b[(r, 1)]);
            h[(2 * r, 2 * u)] = h1;
            h[(2 * r, 2 * u + 1)] = h2;
            h[(2 * r + 1, 2 * u)] = h2.conj();
            h[(2 * r + 1, 2 * u + 1)] = -h1.conj();
        }
    }
    h
}

/// Observation vector matching [`alamouti_effective_channel`] from an
/// `nr x 2` (antenna, time) sample matrix.
pub fn alamouti_effective_observation(y: &CMatrix) -> DVector<C64> {
    DVector::from_fn(2 * y.nrows(), |i, _| {
        let r = i / 2;
        if i % 2 == 0 {
            y[(r, 0)]
        } else {
            y[(r, 1)].conj()
        }
    })
}

/// Detection order and per-stream post-MMSE SINR (linear) of ordered SIC,
/// assuming earlier decisions were cancelled correctly. Returned SINRs are
/// indexed by stream, not by order.
pub fn sic_post_sinrs(h: &CMatrix, noise_var: f64) -> Result<(Vec<usize>, Vec<f64>)> {
    let streams = h.ncols();
    if streams > h.nrows() {
        return Err(Error::Underdetermined { streams, rx: h.nrows() });
    }
    let mut remaining: Vec<usize> = (0..streams).collect();
    let mut order = Vec::with_capacity(streams);
    let mut sinrs = vec![0.0; streams];
    while !remaining.is_empty() {
        let sub = h.select_columns(remaining.iter());
        let g = mmse_gram_inverse(&sub, noise_var)?;
        let (pos, k) = pick_strongest(&g, &remaining);
        sinrs[k] = post_sinr(g[(pos, pos)].re, noise_var);
        order.push(k);
        remaining.remove(pos);
    }
    Ok((order, sinrs))
}

fn mmse_gram_inverse(h: &CMatrix, noise_var: f64) -> Result<CMatrix> {
    let n = h.ncols();
    let gram = h.adjoint() * h + CMatrix::identity(n, n) * C64::from(noise_var.max(0.0));
    gram.try_inverse()
        .ok_or_else(|| Error::arg("channel Gram matrix is singular"))
}

/// Highest post-equalisation gain `1/G_kk`; ties to the lowest stream index.
fn pick_strongest(g: &CMatrix, remaining: &[usize]) -> (usize, usize) {
    let mut best = 0;
    for pos in 1..remaining.len() {
        let (gp, gb) = (g[(pos, pos)].re, g[(best, best)].re);
        if gp < gb || (gp == gb && remaining[pos] < remaining[best]) {
            best = pos;
        }
    }
    (best, remaining[best])
}

fn post_sinr(g_kk: f64, noise_var: f64) -> f64 {
    if noise_var <= 0.0 {
        f64::INFINITY
    } else {
        (1.0 / (noise_var * g_kk) - 1.0).max(0.0)
    }
}

/// Ordered MMSE successive interference cancellation (V-BLAST ordering).
pub fn sic_detect(
    y: &DVector<C64>,
    h: &CMatrix,
    constellation: &Constellation,
    noise_var: f64,
) -> Result<DetectionReport> {
    let streams = h.ncols();
    if streams > h.nrows() {
        return Err(Error::Underdetermined { streams, rx: h.nrows() });
    }
    if y.len() != h.nrows() {
        return Err(Error::arg(format!(
            "observation has {} entries, channel has {} rows",
            y.len(),
            h.nrows()
        )));
    }
    let bps = constellation.bits_per_symbol;
    let mut residual = y.clone();
    let mut remaining: Vec<usize> = (0..streams).collect();
    let mut report = DetectionReport {
        symbols: vec![0; streams],
        points: vec![C64::new(0.0, 0.0); streams],
        post_snr_db: vec![0.0; streams],
        decode_order: Vec::with_capacity(streams),
        bits: vec![
            BitDecision {
                bit: false,
                reliability: 0.0
            };
            streams * bps
        ],
        erased: vec![false; streams],
    };
    while !remaining.is_empty() {
        let sub = h.select_columns(remaining.iter());
        let g = mmse_gram_inverse(&sub, noise_var)?;
        let (pos, k) = pick_strongest(&g, &remaining);
        let g_kk = g[(pos, pos)].re;
        let sinr = post_sinr(g_kk, noise_var);
        // Row `pos` of the MMSE filter G H^H, and its bias towards s_k.
        let filter = g.row(pos) * sub.adjoint();
        let z = (filter * &residual)[(0, 0)];
        let bias = 1.0 - noise_var.max(0.0) * g_kk;
        let col_energy = h.column(k).norm_squared();
        let erased = !(bias > 0.0) || col_energy == 0.0;
        let est = if erased { C64::new(0.0, 0.0) } else { z / bias };
        let idx = constellation.slice(est);
        let point = constellation.points[idx];
        report.symbols[k] = idx;
        report.points[k] = point;
        report.post_snr_db[k] = if erased { f64::NEG_INFINITY } else { 10.0 * sinr.log10() };
        report.erased[k] = erased;
        let bits = if erased {
            (0..bps)
                .map(|b| BitDecision {
                    bit: constellation.bit(idx, b),
                    reliability: 0.0,
                })
                .collect()
        } else {
            constellation.bit_decisions(est, 1.0 / sinr)
        };
        report.bits[k * bps..(k + 1) * bps].copy_from_slice(&bits);
        report.decode_order.push(k);
        residual -= h.column(k) * point;
        remaining.remove(pos);
    }
    Ok(report)
}

/// Exhaustive joint maximum-likelihood detection, `min ||y - H s||^2`.
pub fn ml_joint_detect(
    y: &DVector<C64>,
    h: &CMatrix,
    constellation: &Constellation,
    noise_var: f64,
) -> Result<DetectionReport> {
    let streams = h.ncols();
    let m = constellation.len();
    let hyps = (0..streams).try_fold(1usize, |acc, _| acc.checked_mul(m));
    let hyps = match hyps {
        Some(n) if n <= ML_MAX_HYPOTHESES => n,
        Some(n) => return Err(Error::OracleTooLarge(n)),
        None => return Err(Error::OracleTooLarge(usize::MAX)),
    };
    if y.len() != h.nrows() {
        return Err(Error::arg("observation length does not match channel rows"));
    }
    let bps = constellation.bits_per_symbol;
    let mut best_metric = f64::INFINITY;
    let mut best = vec![0usize; streams];
    let mut min0 = vec![f64::INFINITY; streams * bps];
    let mut min1 = vec![f64::INFINITY; streams * bps];
    let mut tuple = vec![0usize; streams];
    let mut s = DVector::from_element(streams, C64::new(0.0, 0.0));
    for n in 0..hyps {
        let mut rem = n;
        for k in (0..streams).rev() {
            tuple[k] = rem % m;
            rem /= m;
            s[k] = constellation.points[tuple[k]];
        }
        let metric = (y - h * &s).norm_squared();
        if metric < best_metric {
            best_metric = metric;
            best.copy_from_slice(&tuple);
        }
        for k in 0..streams {
            for b in 0..bps {
                let slot = if constellation.bit(tuple[k], b) {
                    &mut min1
                } else {
                    &mut min0
                };
                let e = &mut slot[k * bps + b];
                *e = e.min(metric);
            }
        }
    }
    let nv = noise_var.max(f64::MIN_POSITIVE);
    let bits = min0
        .iter()
        .zip(&min1)
        .map(|(d0, d1)| BitDecision::from_llr(llr((d0 - d1) / nv)))
        .collect();
    Ok(DetectionReport {
        points: best.iter().map(|&i| constellation.points[i]).collect(),
        post_snr_db: (0..streams)
            .map(|k| 10.0 * (h.column(k).norm_squared() / noise_var).log10())
            .collect(),
        erased: (0..streams).map(|k| h.column(k).norm_squared() == 0.0).collect(),
        decode_order: (0..streams).collect(),
        symbols: best,
        bits,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionStrategy {
    /// Sum of signed reliabilities (LLR sum); exact ML for independent
    /// Gaussian residuals.
    #[default]
    ReliabilityWeighted,
    MajorityVote,
}

/// Merges several receivers' bit decisions into one bit vector.
pub fn fuse_decisions(copies: &[&[BitDecision]], strategy: FusionStrategy) -> Result<Vec<bool>> {
    let first = copies
        .first()
        .ok_or_else(|| Error::arg("fusion needs at least one copy"))?;
    let n = first.len();
    if copies.iter().any(|c| c.len() != n) {
        return Err(Error::arg("all copies must have the same bit length"));
    }
    let out = match strategy {
        FusionStrategy::ReliabilityWeighted => (0..n)
            .map(|i| {
                let s: f64 = copies.iter().map(|c| c[i].signed()).sum();
                if s == 0.0 {
                    first[i].bit
                } else {
                    s > 0.0
                }
            })
            .collect(),
        FusionStrategy::MajorityVote => {
            let mean_rel = |c: &[BitDecision]| {
                if c.is_empty() {
                    0.0
                } else {
                    c.iter().map(|b| b.reliability).sum::<f64>() / c.len() as f64
                }
            };
            let mut tiebreak = 0;
            for (k, c) in copies.iter().enumerate() {
                if mean_rel(c) > mean_rel(copies[tiebreak]) {
                    tiebreak = k;
                }
            }
            (0..n)
                .map(|i| {
                    let ones = copies.iter().filter(|c| c[i].bit).count();
                    let zeros = copies.len() - ones;
                    match ones.cmp(&zeros) {
                        std::cmp::Ordering::Greater => true,
                        std::cmp::Ordering::Less => false,
                        std::cmp::Ordering::Equal => copies[tiebreak][i].bit,
                    }
                })
                .collect()
        }
    };
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::complex_gaussian;
    use crate::precoding::random_channel;
    use crate::seeding;
    use proptest::prelude::*;
    use rand::Rng;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    #[test]
    fn constellations_have_unit_energy() {
        for m in [Modulation::Bpsk, Modulation::Qpsk, Modulation::Qam16, Modulation::Qam64] {
            let k = Constellation::new(m);
            assert_eq!(k.len(), 1 << k.bits_per_symbol);
            let e = k.points.iter().map(|p| p.norm_sqr()).sum::<f64>() / k.len() as f64;
            assert!((e - 1.0).abs() < 1e-12, "{m}: {e}");
        }
    }

    #[test]
    fn gray_neighbours_differ_by_one_bit() {
        let k = Constellation::new(Modulation::Qam16);
        let dmin = 2.0 / 10f64.sqrt();
        for i in 0..k.len() {
            for j in 0..k.len() {
                if ((k.points[i] - k.points[j]).norm() - dmin).abs() < 1e-9 {
                    assert_eq!((i ^ j).count_ones(), 1, "{i} {j}");
                }
            }
        }
    }

    #[test]
    fn slicing_ties_go_low() {
        let k = Constellation::new(Modulation::Bpsk);
        assert_eq!(k.slice(c(0.0, 0.0)), 0);
        assert_eq!(k.slice(c(-0.1, 0.0)), 1);
    }

    #[test]
    fn alamouti_basis_blocks() {
        let a = alamouti_encode(c(1.0, 0.0), c(0.0, 0.0)).code_matrix;
        assert_eq!(a, Matrix2::identity());
        let b = alamouti_encode(c(0.0, 0.0), c(1.0, 0.0)).code_matrix;
        assert_eq!(b, Matrix2::new(c(0.0, 0.0), c(1.0, 0.0), c(-1.0, 0.0), c(0.0, 0.0)));
    }

    #[test]
    fn alamouti_degenerate_single_antenna() {
        let k = Constellation::new(Modulation::Qpsk);
        let h = ChannelMatrix::new(CMatrix::from_row_slice(1, 2, &[c(1.0, 0.0), c(0.0, 0.0)]));
        let block = alamouti_encode(k.points[2], k.points[1]);
        let y = alamouti_receive(&h.entries, &block);
        let rep = alamouti_decode(&[[y[(0, 0)], y[(0, 1)]]], &h, 1.0, &k).unwrap();
        assert_eq!(rep.symbols, vec![2, 1]);
        assert!((rep.post_snr_db[0] - 0.0).abs() < 1e-12);
    }

    #[test]
    fn alamouti_two_equal_paths() {
        let k = Constellation::new(Modulation::Qpsk);
        let h = ChannelMatrix::new(CMatrix::from_row_slice(1, 2, &[c(1.0, 0.0), c(1.0, 0.0)]));
        let rep = alamouti_decode(&[[c(0.0, 0.0), c(0.0, 0.0)]], &h, 1.0, &k).unwrap();
        assert!((rep.post_snr_db[0] - 3.0103).abs() < 1e-4);
        assert!((rep.post_snr_db[1] - 3.0103).abs() < 1e-4);
    }

    #[test]
    fn alamouti_zero_channel_is_erased() {
        let k = Constellation::new(Modulation::Qpsk);
        let h = ChannelMatrix::new(CMatrix::zeros(1, 2));
        let rep = alamouti_decode(&[[c(0.3, 0.0), c(0.0, 0.1)]], &h, 1.0, &k).unwrap();
        assert_eq!(rep.post_snr_db, vec![f64::NEG_INFINITY; 2]);
        assert_eq!(rep.erased, vec![true, true]);
    }

    #[test]
    fn alamouti_noiseless_roundtrip() {
        let k = Constellation::new(Modulation::Qpsk);
        let mut rng = seeding::rng(&[77]);
        for _ in 0..10_000 {
            let nr = rng.random_range(1..=3);
            let h = ChannelMatrix::new(random_channel(&mut rng, nr, 2));
            let (i1, i2) = (rng.random_range(0..4), rng.random_range(0..4));
            let y = alamouti_receive(&h.entries, &alamouti_encode(k.points[i1], k.points[i2]));
            let rows: Vec<[C64; 2]> = (0..nr).map(|r| [y[(r, 0)], y[(r, 1)]]).collect();
            let rep = alamouti_decode(&rows, &h, 1e-3, &k).unwrap();
            assert_eq!(rep.symbols, vec![i1, i2]);
        }
    }

    #[test]
    fn effective_model_matches_transmission() {
        let k = Constellation::new(Modulation::Qpsk);
        let mut rng = seeding::rng(&[3]);
        let blocks = vec![random_channel(&mut rng, 2, 2), random_channel(&mut rng, 2, 2)];
        let syms = [k.points[0], k.points[3], k.points[1], k.points[2]];
        let y = alamouti_receive(&blocks[0], &alamouti_encode(syms[0], syms[1]))
            + alamouti_receive(&blocks[1], &alamouti_encode(syms[2], syms[3]));
        let h = alamouti_effective_channel(&blocks);
        let s = DVector::from_column_slice(&syms);
        let diff = alamouti_effective_observation(&y) - h * s;
        assert!(diff.norm() < 1e-12);
    }

    #[test]
    fn sic_orders_by_gain() {
        let k = Constellation::new(Modulation::Qpsk);
        let h = CMatrix::from_row_slice(2, 2, &[c(2.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(1.0, 0.0)]);
        let s = DVector::from_column_slice(&[k.points[1], k.points[2]]);
        let rep = sic_detect(&(&h * &s), &h, &k, 0.0).unwrap();
        assert_eq!(rep.decode_order, vec![0, 1]);
        assert_eq!(rep.symbols, vec![1, 2]);
        assert!(rep.order_is_permutation());
    }

    #[test]
    fn sic_identity_any_constellation() {
        for m in [Modulation::Bpsk, Modulation::Qpsk, Modulation::Qam16, Modulation::Qam64] {
            let k = Constellation::new(m);
            let h = CMatrix::identity(3, 3);
            let idx = [0, k.len() - 1, k.len() / 2];
            let s = DVector::from_iterator(3, idx.iter().map(|&i| k.points[i]));
            let rep = sic_detect(&s, &h, &k, 0.0).unwrap();
            assert_eq!(rep.symbols, idx.to_vec());
        }
    }

    #[test]
    fn sic_rejects_underdetermined() {
        let k = Constellation::new(Modulation::Qpsk);
        let h = CMatrix::identity(1, 2);
        let e = sic_detect(&DVector::zeros(1), &h, &k, 1.0).unwrap_err();
        assert!(e.to_string().starts_with("underdetermined without coding"));
    }

    #[test]
    fn ml_examples() {
        let bpsk = Constellation::new(Modulation::Bpsk);
        let h = CMatrix::from_element(1, 1, c(1.0, 0.0));
        let rep = ml_joint_detect(&DVector::from_element(1, c(0.9, 0.0)), &h, &bpsk, 1.0).unwrap();
        assert_eq!(rep.points, vec![c(1.0, 0.0)]);

        let qpsk = Constellation::new(Modulation::Qpsk);
        let mut rng = seeding::rng(&[8]);
        for _ in 0..200 {
            let h = random_channel(&mut rng, 2, 2);
            let idx = vec![rng.random_range(0..4), rng.random_range(0..4)];
            let s = DVector::from_iterator(2, idx.iter().map(|&i| qpsk.points[i]));
            let rep = ml_joint_detect(&(&h * s), &h, &qpsk, 0.0).unwrap();
            assert_eq!(rep.symbols, idx);
        }

        let q64 = Constellation::new(Modulation::Qam64);
        let h3 = CMatrix::identity(3, 3);
        assert!(matches!(
            ml_joint_detect(&DVector::zeros(3), &h3, &q64, 1.0),
            Err(Error::OracleTooLarge(262_144))
        ));
    }

    #[test]
    fn ml_never_loses_to_sic_on_paired_trials() {
        let k = Constellation::new(Modulation::Qpsk);
        let mut rng = seeding::rng(&[10]);
        let noise_var = 0.1; // 10 dB per stream
        let (mut ml_err, mut sic_err) = (0, 0);
        for _ in 0..2000 {
            let h = random_channel(&mut rng, 2, 2);
            let idx = [rng.random_range(0..4), rng.random_range(0..4)];
            let s = DVector::from_iterator(2, idx.iter().map(|&i| k.points[i]));
            let n = DVector::from_fn(2, |_, _| complex_gaussian(&mut rng, noise_var));
            let y = &h * s + n;
            let ml = ml_joint_detect(&y, &h, &k, noise_var).unwrap();
            let sic = sic_detect(&y, &h, &k, noise_var).unwrap();
            ml_err += ml.symbols.iter().zip(&idx).filter(|(a, b)| a != b).count();
            sic_err += sic.symbols.iter().zip(&idx).filter(|(a, b)| a != b).count();
        }
        assert!(ml_err <= sic_err, "ml {ml_err} sic {sic_err}");
    }

    #[test]
    fn fusion_examples() {
        let b = |bit, reliability| BitDecision { bit, reliability };
        let one = [b(true, 1.0), b(false, 2.0)];
        for strat in [FusionStrategy::ReliabilityWeighted, FusionStrategy::MajorityVote] {
            assert_eq!(fuse_decisions(&[&one], strat).unwrap(), vec![true, false]);
        }
        let c1 = [b(true, 0.2)];
        let c2 = [b(true, 0.1)];
        let c3 = [b(false, 5.0)];
        assert_eq!(
            fuse_decisions(&[&c1, &c2, &c3], FusionStrategy::MajorityVote).unwrap(),
            vec![true]
        );
        let strong = [b(true, 5.0)];
        let weak = [b(false, 0.1)];
        assert_eq!(
            fuse_decisions(&[&strong, &weak], FusionStrategy::ReliabilityWeighted).unwrap(),
            vec![true]
        );
        // Majority tie resolved by the more reliable copy.
        assert_eq!(
            fuse_decisions(&[&weak, &strong], FusionStrategy::MajorityVote).unwrap(),
            vec![true]
        );
        let short: [BitDecision; 0] = [];
        assert!(fuse_decisions(&[&one, &short], FusionStrategy::MajorityVote).is_err());
        assert!(fuse_decisions(&[], FusionStrategy::MajorityVote).is_err());
    }

    proptest! {
        #[test]
        fn alamouti_orthogonality(a in -3.0f64..3.0, b in -3.0f64..3.0, c_ in -3.0f64..3.0, d in -3.0f64..3.0) {
            let blk = alamouti_encode(c(a, b), c(c_, d));
            let scale = 1.0 + a * a + b * b + c_ * c_ + d * d;
            prop_assert!(blk.orthogonality_error() <= 1e-12 * scale);
        }

        #[test]
        fn identical_copies_fuse_to_themselves(bits in prop::collection::vec((any::<bool>(), 0.0f64..10.0), 1..40), n in 1usize..6) {
            let copy: Vec<BitDecision> = bits.iter().map(|&(bit, reliability)| BitDecision { bit, reliability }).collect();
            let copies: Vec<&[BitDecision]> = (0..n).map(|_| copy.as_slice()).collect();
            let expect: Vec<bool> = copy.iter().map(|b| b.bit).collect();
            prop_assert_eq!(&fuse_decisions(&copies, FusionStrategy::MajorityVote).unwrap(), &expect);
            prop_assert_eq!(&fuse_decisions(&copies, FusionStrategy::ReliabilityWeighted).unwrap(), &expect);
        }

        #[test]
        fn reliabilities_are_finite(seed in any::<u64>(), nv in 0.0f64..2.0) {
            let k = Constellation::new(Modulation::Qam16);
            let mut rng = seeding::rng(&[seed]);
            let h = random_channel(&mut rng, 3, 2);
            let y = DVector::from_fn(3, |_, _| complex_gaussian(&mut rng, 1.0));
            let rep = sic_detect(&y, &h, &k, nv).unwrap();
            prop_assert!(rep.bits.iter().all(|b| b.reliability.is_finite()));
            prop_assert!(rep.order_is_permutation());
        }
    }
}
