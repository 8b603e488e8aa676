//! Per-link MIMO channels: UMi street-canyon pathloss, Rayleigh fading per
//! subcarrier group, and two time-evolution models.
//!
//! * [`evolve_fading`] is a first-order Gauss-Markov update whose one-step
//!   correlation is the Jakes value `J0(2 pi f_d dt)`.
//! * [`LinkTrajectory`] is a sum-of-sinusoids Jakes generator that can be
//!   sampled at any time instant. Its autocorrelation is `J0(2 pi f_d tau)`
//!   at every lag, which is what makes CSI prediction meaningful; the
//!   protocol engine uses it for all time-varying evaluations.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::scenario::{NodeId, NodeSpec, OfdmConfig, SPEED_OF_LIGHT_MPS};
use crate::seeding;

pub type C64 = Complex64;
pub type CMatrix = DMatrix<C64>;

/// Independent fading bands across the OFDM bandwidth.
pub const SUBCARRIER_GROUPS: usize = 8;

/// Sinusoids per coefficient in [`LinkTrajectory`].
pub const DEFAULT_SINUSOIDS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelOptions {
    /// Log-normal shadowing standard deviation; 0 disables it.
    pub shadowing_std_db: f64,
    pub sinusoids: usize,
}

impl Default for ChannelOptions {
    fn default() -> Self {
        Self {
            shadowing_std_db: 0.0,
            sinusoids: DEFAULT_SINUSOIDS,
        }
    }
}

/// UMi street-canyon pathloss in dB. Distances below 1 m are clamped to 1 m.
pub fn pathloss_db(distance_m: f64, fc_ghz: f64, los: bool) -> f64 {
    let d = distance_m.max(1.0);
    let pl_los = 32.4 + 21.0 * d.log10() + 20.0 * fc_ghz.log10();
    if los {
        pl_los
    } else {
        let pl_nlos = 35.3 * d.log10() + 22.4 + 21.3 * fc_ghz.log10();
        pl_los.max(pl_nlos)
    }
}

/// UMi line-of-sight probability.
pub fn los_probability(distance_m: f64) -> f64 {
    let d = distance_m.max(1e-9);
    let decay = (-d / 36.0).exp();
    (18.0 / d).min(1.0) * (1.0 - decay) + decay
}

/// Thermal noise over `bandwidth_hz` plus the receiver noise figure.
pub fn noise_power_dbm(bandwidth_hz: f64, noise_figure_db: f64) -> f64 {
    -174.0 + 10.0 * bandwidth_hz.log10() + noise_figure_db
}

/// Doppler spread of a link whose two ends move independently.
pub fn link_doppler_hz(tx: &NodeSpec, rx: &NodeSpec, fc_hz: f64) -> f64 {
    (tx.speed_mps() + rx.speed_mps()) * fc_hz / SPEED_OF_LIGHT_MPS
}

/// Subcarrier index at the centre of fading group `g`.
pub fn group_center_subcarrier(ofdm: &OfdmConfig, g: usize) -> usize {
    let width = ofdm.num_subcarriers / SUBCARRIER_GROUPS;
    (g * width + width / 2).min(ofdm.num_subcarriers.saturating_sub(1))
}

/// Circularly-symmetric complex Gaussian with total variance `var`.
pub fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R, var: f64) -> C64 {
    let s = (var / 2.0).sqrt();
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    C64::new(re * s, im * s)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMatrix {
    pub entries: CMatrix,
    pub subcarrier_index: usize,
    pub time_slot: u64,
}

impl ChannelMatrix {
    pub fn new(entries: CMatrix) -> Self {
        Self {
            entries,
            subcarrier_index: 0,
            time_slot: 0,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.entries.nrows() > 0
            && self.entries.ncols() > 0
            && self.entries.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }
}

struct LinkGeometry {
    los: bool,
    pathloss_db: f64,
    doppler_hz: f64,
}

fn draw_geometry(
    tx: &NodeSpec,
    rx: &NodeSpec,
    ofdm: &OfdmConfig,
    options: &ChannelOptions,
    rng: &mut ChaCha8Rng,
) -> LinkGeometry {
    let d = tx.distance_to(rx);
    let los = rng.random::<f64>() < los_probability(d);
    let mut pl = pathloss_db(d, ofdm.fc_hz / 1e9, los);
    if options.shadowing_std_db > 0.0 {
        let z: f64 = StandardNormal.sample(rng);
        pl = (pl + options.shadowing_std_db * z).max(0.0);
    }
    LinkGeometry {
        los,
        pathloss_db: pl,
        doppler_hz: link_doppler_hz(tx, rx, ofdm.fc_hz),
    }
}

/// Stream seed for the directed link `tx -> rx` within a trial.
pub fn link_stream(trial_seed: u64, tx: NodeId, rx: NodeId) -> u64 {
    seeding::derive(&[trial_seed, seeding::tag::LINK, tx as u64, rx as u64])
}

/// Gauss-Markov link state: one fading matrix per subcarrier group.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkState {
    pub tx_id: NodeId,
    pub rx_id: NodeId,
    pub tx_antennas: usize,
    pub rx_antennas: usize,
    pub fading: Vec<CMatrix>,
    pub doppler_hz: f64,
    pub pathloss_db: f64,
    pub los: bool,
    pub rng_stream: u64,
    /// Number of evolution steps taken; keys the per-step random stream.
    pub steps: u64,
}

impl LinkState {
    pub fn new(tx: &NodeSpec, rx: &NodeSpec, ofdm: &OfdmConfig, rng_stream: u64, options: &ChannelOptions) -> Self {
        let mut rng = seeding::rng(&[rng_stream]);
        let geo = draw_geometry(tx, rx, ofdm, options, &mut rng);
        let mut link = Self {
            tx_id: tx.id,
            rx_id: rx.id,
            tx_antennas: tx.num_antennas,
            rx_antennas: rx.num_antennas,
            fading: Vec::new(),
            doppler_hz: geo.doppler_hz,
            pathloss_db: geo.pathloss_db,
            los: geo.los,
            rng_stream,
            steps: 0,
        };
        link.fading = (0..SUBCARRIER_GROUPS)
            .map(|_| draw_fading(&link, &mut rng).entries)
            .collect();
        link
    }

    /// Amplitude scaling `10^(-PL/20)`.
    pub fn amplitude(&self) -> f64 {
        10f64.powf(-self.pathloss_db / 20.0)
    }

    /// Mean power per entry implied by the pathloss.
    pub fn mean_power(&self) -> f64 {
        10f64.powf(-self.pathloss_db / 10.0)
    }
}

/// Fresh i.i.d. CN(0,1) matrix scaled by the link's pathloss amplitude.
pub fn draw_fading<R: Rng + ?Sized>(link: &LinkState, rng: &mut R) -> ChannelMatrix {
    let p = link.mean_power();
    let entries = CMatrix::from_fn(link.rx_antennas, link.tx_antennas, |_, _| complex_gaussian(rng, p));
    ChannelMatrix::new(entries)
}

/// `H' = rho H + sqrt(1 - rho^2) W`, `rho = J0(2 pi f_d dt)`.
pub fn evolve_fading(link: &LinkState, dt_s: f64) -> LinkState {
    let rho = libm::j0(2.0 * PI * link.doppler_hz * dt_s.max(0.0));
    let mut next = link.clone();
    next.steps += 1;
    if rho == 1.0 {
        return next;
    }
    let mut rng = seeding::rng(&[link.rng_stream, link.steps]);
    let innov = (1.0 - rho * rho).max(0.0).sqrt();
    for h in &mut next.fading {
        let w = draw_fading(link, &mut rng).entries;
        *h = &*h * C64::from(rho) + w * C64::from(innov);
    }
    next
}

/// Wideband SNR of a link at full transmit power.
pub fn link_snr_db(link: &LinkState, tx_power_dbm: f64, ofdm: &OfdmConfig, noise_figure_db: f64) -> f64 {
    tx_power_dbm - link.pathloss_db - noise_power_dbm(ofdm.bandwidth_hz(), noise_figure_db)
}

/// Sum-of-sinusoids Rayleigh trajectory for one directed link.
///
/// Each coefficient is `sqrt(P/M) sum_m exp(j(2 pi f_d cos(a_m) t + phi_m))`
/// with `a_m`, `phi_m` uniform, so `h(0)` does not depend on the Doppler and
/// two trajectories that differ only in speed start from the same state.
#[derive(Debug, Clone)]
pub struct LinkTrajectory {
    pub tx_id: NodeId,
    pub rx_id: NodeId,
    pub tx_antennas: usize,
    pub rx_antennas: usize,
    pub doppler_hz: f64,
    pub pathloss_db: f64,
    pub los: bool,
    sinusoids: usize,
    /// `[group][rx][tx][m]` flattened: (angular frequency, phase).
    paths: Vec<(f64, f64)>,
}

impl LinkTrajectory {
    pub fn new(tx: &NodeSpec, rx: &NodeSpec, ofdm: &OfdmConfig, rng_stream: u64, options: &ChannelOptions) -> Self {
        let mut rng = seeding::rng(&[rng_stream]);
        let geo = draw_geometry(tx, rx, ofdm, options, &mut rng);
        let m = options.sinusoids.max(1);
        let n = SUBCARRIER_GROUPS * rx.num_antennas * tx.num_antennas * m;
        let w_d = 2.0 * PI * geo.doppler_hz;
        let paths = (0..n)
            .map(|_| {
                let angle = 2.0 * PI * rng.random::<f64>();
                let phase = 2.0 * PI * rng.random::<f64>();
                (w_d * angle.cos(), phase)
            })
            .collect();
        Self {
            tx_id: tx.id,
            rx_id: rx.id,
            tx_antennas: tx.num_antennas,
            rx_antennas: rx.num_antennas,
            doppler_hz: geo.doppler_hz,
            pathloss_db: geo.pathloss_db,
            los: geo.los,
            sinusoids: m,
            paths,
        }
    }

    pub fn mean_power(&self) -> f64 {
        10f64.powf(-self.pathloss_db / 10.0)
    }

    /// Channel of subcarrier group `group` at time `t_s`.
    pub fn matrix_at(&self, group: usize, t_s: f64) -> CMatrix {
        let scale = (self.mean_power() / self.sinusoids as f64).sqrt();
        let m = self.sinusoids;
        let base = group * self.rx_antennas * self.tx_antennas * m;
        CMatrix::from_fn(self.rx_antennas, self.tx_antennas, |r, c| {
            let off = base + (r * self.tx_antennas + c) * m;
            let sum: C64 = self.paths[off..off + m]
                .iter()
                .map(|&(w, phi)| C64::from_polar(1.0, w * t_s + phi))
                .sum();
            sum * scale
        })
    }

    pub fn matrices_at(&self, t_s: f64) -> Vec<CMatrix> {
        (0..SUBCARRIER_GROUPS).map(|g| self.matrix_at(g, t_s)).collect()
    }
}

/// Unit-power sum-of-sinusoids Jakes sequence sampled every `dt`, where
/// `fd_dt` is the normalised Doppler `f_d * dt`.
pub fn jakes_sequence<R: Rng + ?Sized>(rng: &mut R, fd_dt: f64, len: usize, sinusoids: usize) -> Vec<C64> {
    let m = sinusoids.max(1);
    let paths: Vec<(f64, f64)> = (0..m)
        .map(|_| {
            let angle = 2.0 * PI * rng.random::<f64>();
            let phase = 2.0 * PI * rng.random::<f64>();
            (2.0 * PI * fd_dt * angle.cos(), phase)
        })
        .collect();
    let scale = 1.0 / (m as f64).sqrt();
    (0..len)
        .map(|n| {
            paths
                .iter()
                .map(|&(w, phi)| C64::from_polar(1.0, w * n as f64 + phi))
                .sum::<C64>()
                * scale
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{NodeKind, NodeSpec};
    use proptest::prelude::*;

    fn node(id: NodeId, ant: usize, pos: [f64; 3], speed: f64) -> NodeSpec {
        NodeSpec {
            id,
            kind: NodeKind::Ru,
            num_antennas: ant,
            tx_power_dbm: 26.0,
            position_m: pos,
            velocity_mps: [speed, 0.0, 0.0],
        }
    }

    fn link_with(pl: f64, doppler: f64) -> LinkState {
        LinkState {
            tx_id: 0,
            rx_id: 1,
            tx_antennas: 2,
            rx_antennas: 2,
            fading: vec![CMatrix::zeros(2, 2); SUBCARRIER_GROUPS],
            doppler_hz: doppler,
            pathloss_db: pl,
            los: false,
            rng_stream: 42,
            steps: 0,
        }
    }

    #[test]
    fn pathloss_examples() {
        assert!((pathloss_db(1.0, 3.5, true) - 43.28).abs() < 0.005);
        assert!((pathloss_db(100.0, 3.5, true) - 85.28).abs() < 0.005);
        assert!((pathloss_db(100.0, 3.5, false) - 104.59).abs() < 0.005);
        assert_eq!(pathloss_db(0.2, 3.5, true), pathloss_db(1.0, 3.5, true));
    }

    #[test]
    fn los_probability_limits() {
        assert_eq!(los_probability(10.0), 1.0);
        let p = los_probability(1000.0);
        assert!(p > 0.017 && p < 0.02, "{p}");
    }

    #[test]
    fn unit_power_fading() {
        let link = link_with(0.0, 0.0);
        let mut rng = seeding::rng(&[1]);
        let n = 100_000 / 4;
        let p: f64 = (0..n)
            .map(|_| draw_fading(&link, &mut rng).entries.norm_squared())
            .sum::<f64>()
            / (4 * n) as f64;
        assert!((p - 1.0).abs() < 0.02, "{p}");
    }

    #[test]
    fn pathloss_scales_fading_power() {
        let link = link_with(20.0, 0.0);
        let mut rng = seeding::rng(&[2]);
        let n = 100_000 / 4;
        let p: f64 = (0..n)
            .map(|_| draw_fading(&link, &mut rng).entries.norm_squared())
            .sum::<f64>()
            / (4 * n) as f64;
        assert!((p / 0.01 - 1.0).abs() < 0.02, "{p}");
    }

    #[test]
    fn fixed_seed_reproduces() {
        let link = link_with(3.0, 0.0);
        let a = draw_fading(&link, &mut seeding::rng(&[5]));
        let b = draw_fading(&link, &mut seeding::rng(&[5]));
        assert_eq!(a, b);
    }

    #[test]
    fn evolve_identity_cases() {
        let tx = node(0, 2, [0.0; 3], 3.0);
        let rx = node(1, 2, [50.0, 0.0, 0.0], 0.0);
        let ofdm = OfdmConfig::default();
        let link = LinkState::new(&tx, &rx, &ofdm, 11, &ChannelOptions::default());
        assert!(link.doppler_hz > 0.0);
        assert_eq!(evolve_fading(&link, 0.0).fading, link.fading);
        let mut still = link.clone();
        still.doppler_hz = 0.0;
        assert_eq!(evolve_fading(&still, 1.0).fading, still.fading);
    }

    #[test]
    fn gauss_markov_lag_correlation_matches_bessel() {
        let fd = 50.0;
        let dt = 1e-3;
        let mut link = link_with(0.0, fd);
        let mut rng = seeding::rng(&[3]);
        link.fading = vec![draw_fading(&link, &mut rng).entries; 1];
        let steps = 100_000;
        let (mut num, mut den) = (C64::new(0.0, 0.0), 0.0);
        let mut prev = link.fading[0][(0, 0)];
        for _ in 0..steps {
            link = evolve_fading(&link, dt);
            let cur = link.fading[0][(0, 0)];
            num += cur * prev.conj();
            den += prev.norm_sqr();
            prev = cur;
        }
        let est = num.re / den;
        let expect = libm::j0(2.0 * PI * fd * dt);
        assert!((est - expect).abs() < 0.03, "{est} vs {expect}");
    }

    #[test]
    fn gauss_markov_preserves_power() {
        let mut link = link_with(10.0, 100.0);
        link.fading = vec![draw_fading(&link, &mut seeding::rng(&[4])).entries; 1];
        let steps = 20_000;
        let mut acc = 0.0;
        for _ in 0..steps {
            link = evolve_fading(&link, 1e-3);
            acc += link.fading[0].norm_squared() / 4.0;
        }
        let p = acc / steps as f64;
        assert!((p / link.mean_power() - 1.0).abs() < 0.03, "{p}");
    }

    #[test]
    fn trajectory_autocorrelation_is_jakes() {
        // Ensemble over many links; each trajectory uses 16 sinusoids.
        let ofdm = OfdmConfig::default();
        let tx = node(0, 1, [0.0; 3], 5.0);
        let rx = node(1, 1, [1.0, 0.0, 0.0], 5.0);
        for tau in [1e-3, 5e-3, 2e-2] {
            let (mut num, mut den) = (0.0, 0.0);
            let mut fd = 0.0;
            for s in 0..400 {
                let t = LinkTrajectory::new(&tx, &rx, &ofdm, s, &ChannelOptions::default());
                fd = t.doppler_hz;
                for g in 0..SUBCARRIER_GROUPS {
                    let a = t.matrix_at(g, 0.0)[(0, 0)];
                    let b = t.matrix_at(g, tau)[(0, 0)];
                    num += (b * a.conj()).re;
                    den += a.norm_sqr();
                }
            }
            let expect = libm::j0(2.0 * PI * fd * tau);
            assert!(
                (num / den - expect).abs() < 0.05,
                "tau {tau}: {} vs {expect}",
                num / den
            );
        }
    }

    #[test]
    fn trajectory_start_is_speed_independent() {
        let ofdm = OfdmConfig::default();
        let rx = node(1, 2, [80.0, 0.0, 0.0], 0.0);
        let slow = LinkTrajectory::new(&node(0, 2, [0.0; 3], 0.1), &rx, &ofdm, 9, &ChannelOptions::default());
        let fast = LinkTrajectory::new(&node(0, 2, [0.0; 3], 9.0), &rx, &ofdm, 9, &ChannelOptions::default());
        assert_eq!(slow.matrices_at(0.0), fast.matrices_at(0.0));
        assert_ne!(slow.matrix_at(0, 0.01), fast.matrix_at(0, 0.01));
    }

    #[test]
    fn snr_examples() {
        let link = link_with(85.28, 0.0);
        let ofdm = OfdmConfig::default();
        let snr = link_snr_db(&link, 35.0, &ofdm, 7.0);
        assert!((snr - 47.86).abs() < 0.01, "{snr}");
        let low = link_snr_db(&link, -10.0, &ofdm, 7.0);
        assert!((snr - low - 45.0).abs() < 1e-12);
        let wide = OfdmConfig {
            num_subcarriers: 1024,
            ..ofdm
        };
        let d = snr - link_snr_db(&link, 35.0, &wide, 7.0);
        assert!((d - 3.0103).abs() < 1e-4);
    }

    proptest! {
        #[test]
        fn pathloss_monotone(d in 1.0f64..5000.0, step in 0.0f64..500.0, fc in 0.5f64..30.0) {
            for los in [true, false] {
                prop_assert!(pathloss_db(d + step, fc, los) >= pathloss_db(d, fc, los));
            }
            prop_assert!(pathloss_db(d, fc, false) >= pathloss_db(d, fc, true));
        }

        #[test]
        fn same_seed_same_trajectory(seed in any::<u64>()) {
            let ofdm = OfdmConfig::default();
            let tx = node(0, 2, [0.0; 3], 2.0);
            let rx = node(1, 2, [30.0, 4.0, 0.0], 1.0);
            let a = LinkTrajectory::new(&tx, &rx, &ofdm, seed, &ChannelOptions::default());
            let b = LinkTrajectory::new(&tx, &rx, &ofdm, seed, &ChannelOptions::default());
            prop_assert_eq!(a.matrix_at(3, 0.02), b.matrix_at(3, 0.02));
            let la = LinkState::new(&tx, &rx, &ofdm, seed, &ChannelOptions::default());
            let lb = LinkState::new(&tx, &rx, &ofdm, seed, &ChannelOptions::default());
            prop_assert_eq!(evolve_fading(&la, 1e-3), evolve_fading(&lb, 1e-3));
        }
    }
}
