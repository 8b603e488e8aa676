//! Leaky echo state network used as an online channel predictor.
//!
//! Complex coefficients enter and leave as `(re, im)` pairs. The readout sees
//! `[state; input; 1]` and is fitted in closed form by ridge regression.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::C64;
use crate::error::{Error, Result};
use crate::seeding;

/// Fraction of non-zero recurrent weights.
pub const RECURRENT_DENSITY: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReservoirConfig {
    pub size: usize,
    pub spectral_radius: f64,
    pub leak_rate: f64,
    pub ridge_lambda: f64,
    /// Initial steps whose states are not used for training.
    pub washout: usize,
}

impl Default for ReservoirConfig {
    fn default() -> Self {
        Self {
            size: 64,
            spectral_radius: 0.9,
            leak_rate: 0.3,
            ridge_lambda: 1e-6,
            washout: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reservoir {
    pub input_weights: DMatrix<f64>,
    pub recurrent_weights: DMatrix<f64>,
    pub state: DVector<f64>,
    pub leak_rate: f64,
    pub spectral_radius: f64,
}

/// Largest eigenvalue magnitude.
pub fn spectral_radius_of(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

pub fn init_reservoir(
    size: usize,
    spectral_radius: f64,
    input_dim: usize,
    leak_rate: f64,
    seed: u64,
) -> Result<Reservoir> {
    if size == 0 {
        return Err(Error::arg("reservoir size must be at least 1"));
    }
    if !(spectral_radius > 0.0 && spectral_radius < 1.0) {
        return Err(Error::EchoState(spectral_radius));
    }
    if !(0.0..=1.0).contains(&leak_rate) {
        return Err(Error::arg(format!("leak rate {leak_rate} outside [0, 1]")));
    }
    let mut rng = seeding::rng(&[seed, seeding::tag::RESERVOIR]);
    let mut w = DMatrix::from_fn(size, size, |_, _| {
        if rng.random::<f64>() < RECURRENT_DENSITY {
            rng.random_range(-1.0..1.0)
        } else {
            0.0
        }
    });
    let mut rho = spectral_radius_of(&w);
    if rho < 1e-9 {
        // Sparse draws on tiny reservoirs can be nilpotent; thread a cycle through.
        for i in 0..size {
            w[((i + 1) % size, i)] += rng.random_range(0.5..1.0);
        }
        rho = spectral_radius_of(&w);
    }
    w *= spectral_radius / rho;
    let input_weights = DMatrix::from_fn(size, input_dim, |_, _| rng.random_range(-1.0..1.0));
    Ok(Reservoir {
        input_weights,
        recurrent_weights: w,
        state: DVector::zeros(size),
        leak_rate,
        spectral_radius,
    })
}

impl Reservoir {
    pub fn size(&self) -> usize {
        self.state.len()
    }

    pub fn input_dim(&self) -> usize {
        self.input_weights.ncols()
    }

    pub fn reset(&mut self) {
        self.state.fill(0.0);
    }

    /// `x' = (1 - a) x + a tanh(W x + W_in u)`.
    pub fn step(&mut self, input: &[f64]) -> Result<()> {
        if input.len() != self.input_dim() {
            return Err(Error::arg(format!(
                "input has {} entries, reservoir expects {}",
                input.len(),
                self.input_dim()
            )));
        }
        let u = DVector::from_column_slice(input);
        let pre = &self.recurrent_weights * &self.state + &self.input_weights * u;
        let a = self.leak_rate;
        self.state = &self.state * (1.0 - a) + pre.map(f64::tanh) * a;
        Ok(())
    }

    /// Advances one state column per sequence: `states` is `N x C`,
    /// `inputs` is `input_dim x C`.
    pub fn step_batch(&self, states: &mut DMatrix<f64>, inputs: &DMatrix<f64>) {
        let mut pre = &self.input_weights * inputs;
        pre.gemm(1.0, &self.recurrent_weights, states, 1.0);
        let a = self.leak_rate;
        states.zip_apply(&pre, |x, p| *x = (1.0 - a) * *x + a * p.tanh());
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Readout {
    /// `output_dim x (feature_dim + 1)`, last column is the bias.
    pub weights: DMatrix<f64>,
    pub ridge_lambda: f64,
}

impl Readout {
    pub fn apply(&self, features: &DVector<f64>) -> DVector<f64> {
        let d = self.weights.ncols() - 1;
        self.weights.columns(0, d) * features + self.weights.column(d)
    }
}

/// Ridge solution `W = Y X^T (X X^T + lambda I)^-1` on bias-augmented
/// features. `features` is `d x T`, `targets` is `out x T`.
pub fn train_readout(features: &DMatrix<f64>, targets: &DMatrix<f64>, ridge_lambda: f64) -> Result<Readout> {
    if features.ncols() == 0 || features.ncols() != targets.ncols() {
        return Err(Error::arg("readout training needs matching, non-empty sample sets"));
    }
    if !(ridge_lambda > 0.0) {
        return Err(Error::arg("ridge lambda must be positive"));
    }
    let x = features.clone().insert_row(features.nrows(), 1.0);
    let xxt = &x * x.transpose();
    let yxt = targets * x.transpose();
    Ok(Readout {
        weights: solve_ridge(xxt, yxt, ridge_lambda)?,
        ridge_lambda,
    })
}

/// `yxt (xxt + lambda I)^-1` via Cholesky.
fn solve_ridge(mut xxt: DMatrix<f64>, yxt: DMatrix<f64>, lambda: f64) -> Result<DMatrix<f64>> {
    for i in 0..xxt.nrows() {
        xxt[(i, i)] += lambda;
    }
    let chol = xxt
        .cholesky()
        .ok_or_else(|| Error::arg("ridge system not positive definite"))?;
    // W A = B  <=>  A W^T = B^T (A symmetric)
    Ok(chol.solve(&yxt.transpose()).transpose())
}

fn features_of(state: &DVector<f64>, input: &[f64]) -> DVector<f64> {
    let n = state.len();
    DVector::from_fn(n + input.len(), |i, _| if i < n { state[i] } else { input[i - n] })
}

fn rms(seq: &[C64]) -> f64 {
    let p = seq.iter().map(|z| z.norm_sqr()).sum::<f64>() / seq.len().max(1) as f64;
    if p > 0.0 {
        p.sqrt()
    } else {
        1.0
    }
}

/// One-step-ahead predictor for a scalar complex fading coefficient.
#[derive(Debug, Clone)]
pub struct ChannelPredictor {
    pub reservoir: Reservoir,
    pub readout: Option<Readout>,
    pub config: ReservoirConfig,
    /// Input normalisation fixed at training time.
    pub scale: f64,
}

impl ChannelPredictor {
    pub fn new(config: ReservoirConfig, seed: u64) -> Result<Self> {
        let reservoir = init_reservoir(config.size, config.spectral_radius, 2, config.leak_rate, seed)?;
        Ok(Self {
            reservoir,
            readout: None,
            config,
            scale: 1.0,
        })
    }

    fn input(&self, z: C64) -> [f64; 2] {
        [z.re / self.scale, z.im / self.scale]
    }

    /// Teacher-forced fit: the features after consuming `h[t]` predict `h[t+1]`.
    pub fn fit(&mut self, history: &[C64]) -> Result<()> {
        let washout = self.config.washout.min(history.len().saturating_sub(2));
        if history.len() < 2 {
            return Err(Error::arg("need at least two samples to fit a predictor"));
        }
        self.scale = rms(history);
        let mut res = self.reservoir.clone();
        res.reset();
        let n = res.size();
        let samples = history.len() - 1 - washout;
        let mut x = DMatrix::zeros(n + 2, samples);
        let mut y = DMatrix::zeros(2, samples);
        for t in 0..history.len() - 1 {
            let u = self.input(history[t]);
            res.step(&u)?;
            if t >= washout {
                let col = t - washout;
                x.set_column(col, &features_of(&res.state, &u));
                let next = self.input(history[t + 1]);
                y[(0, col)] = next[0];
                y[(1, col)] = next[1];
            }
        }
        self.readout = Some(train_readout(&x, &y, self.config.ridge_lambda)?);
        Ok(())
    }

    /// Prediction of `seq[t+1]` made after observing `seq[..=t]`, for every `t`.
    pub fn one_step_predictions(&self, seq: &[C64]) -> Result<Vec<C64>> {
        let readout = self.readout.as_ref().ok_or(Error::UntrainedReadout)?;
        let mut res = self.reservoir.clone();
        res.reset();
        seq.iter()
            .map(|&z| {
                let u = self.input(z);
                res.step(&u)?;
                let out = readout.apply(&features_of(&res.state, &u));
                Ok(C64::new(out[0], out[1]) * self.scale)
            })
            .collect()
    }
}

/// Predicts the coefficient that follows `history`.
pub fn predict_channel(predictor: &ChannelPredictor, history: &[C64]) -> Result<C64> {
    if history.is_empty() {
        return Err(Error::arg("empty history"));
    }
    let preds = predictor.one_step_predictions(history)?;
    Ok(*preds.last().expect("non-empty"))
}

/// Normalised mean-square error `sum|p - t|^2 / sum|t|^2`, in dB.
pub fn nmse_db(predicted: &[C64], truth: &[C64]) -> f64 {
    let err: f64 = predicted.iter().zip(truth).map(|(p, t)| (p - t).norm_sqr()).sum();
    let pow: f64 = truth.iter().map(|t| t.norm_sqr()).sum();
    10.0 * (err / pow).log10()
}

/// Sliding-window predictor that refits its readout every `retrain_every`
/// observations on the most recent `window` samples.
#[derive(Debug, Clone)]
pub struct OnlinePredictor {
    inner: ChannelPredictor,
    window: usize,
    retrain_every: usize,
    history: std::collections::VecDeque<C64>,
    since_fit: usize,
}

impl OnlinePredictor {
    pub fn new(config: ReservoirConfig, seed: u64, window: usize, retrain_every: usize) -> Result<Self> {
        Ok(Self {
            inner: ChannelPredictor::new(config, seed)?,
            window: window.max(config.washout + 2),
            retrain_every: retrain_every.max(1),
            history: Default::default(),
            since_fit: 0,
        })
    }

    /// Records `h` and returns the prediction for the next sample, once a
    /// readout exists.
    pub fn observe(&mut self, h: C64) -> Result<Option<C64>> {
        self.history.push_back(h);
        if self.history.len() > self.window {
            self.history.pop_front();
        }
        self.since_fit += 1;
        let full = self.history.len() >= self.window;
        if full && (self.inner.readout.is_none() || self.since_fit >= self.retrain_every) {
            self.inner.fit(self.history.make_contiguous())?;
            self.since_fit = 0;
        }
        if self.inner.readout.is_none() {
            return Ok(None);
        }
        predict_channel(&self.inner, self.history.make_contiguous()).map(Some)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReadoutSharing {
    /// One readout per sequence.
    #[default]
    PerSequence,
    /// One readout fitted on all sequences jointly.
    Pooled,
}

/// Predicts the next sample of many equally spaced sequences at once with a
/// shared reservoir. Each sequence is normalised by its own RMS.
pub fn predict_next_batch(
    config: &ReservoirConfig,
    sharing: ReadoutSharing,
    seed: u64,
    sequences: &[Vec<C64>],
) -> Result<Vec<C64>> {
    let c = sequences.len();
    if c == 0 {
        return Ok(Vec::new());
    }
    let len = sequences[0].len();
    if len < 2 || sequences.iter().any(|s| s.len() != len) {
        return Err(Error::arg(
            "batch prediction needs equal-length sequences of at least two samples",
        ));
    }
    let res = init_reservoir(config.size, config.spectral_radius, 2, config.leak_rate, seed)?;
    let n = res.size();
    let d = n + 3;
    let washout = config.washout.min(len - 2);
    let scales: Vec<f64> = sequences.iter().map(|s| rms(s)).collect();
    let input_at = |t: usize| {
        DMatrix::from_fn(2, c, |r, k| {
            let z = sequences[k][t] / scales[k];
            if r == 0 {
                z.re
            } else {
                z.im
            }
        })
    };
    let feature_block = |states: &DMatrix<f64>, u: &DMatrix<f64>| {
        DMatrix::from_fn(d, c, |r, k| {
            if r < n {
                states[(r, k)]
            } else if r < n + 2 {
                u[(r - n, k)]
            } else {
                1.0
            }
        })
    };

    let samples = len - 1 - washout;
    let mut states = DMatrix::zeros(n, c);
    // Feature block of step t occupies columns t*c .. (t+1)*c.
    let mut feats = DMatrix::zeros(d, samples * c);
    let mut targets = DMatrix::zeros(2, samples * c);
    let mut u = input_at(0);
    for t in 0..len - 1 {
        res.step_batch(&mut states, &u);
        let next = input_at(t + 1);
        if t >= washout {
            let at = (t - washout) * c;
            feats.columns_mut(at, c).copy_from(&feature_block(&states, &u));
            targets.columns_mut(at, c).copy_from(&next);
        }
        u = next;
    }
    // Consume the last sample, then read out.
    res.step_batch(&mut states, &u);
    let f = feature_block(&states, &u);
    let weights: Vec<DMatrix<f64>> = match sharing {
        ReadoutSharing::Pooled => {
            let xxt = &feats * feats.transpose();
            let yxt = &targets * feats.transpose();
            vec![solve_ridge(xxt, yxt, config.ridge_lambda)?]
        }
        ReadoutSharing::PerSequence => (0..c)
            .map(|k| {
                let x = DMatrix::from_fn(d, samples, |r, t| feats[(r, t * c + k)]);
                let y = DMatrix::from_fn(2, samples, |r, t| targets[(r, t * c + k)]);
                let xt = x.transpose();
                solve_ridge(&x * &xt, &y * &xt, config.ridge_lambda)
            })
            .collect::<Result<_>>()?,
    };
    Ok((0..c)
        .map(|k| {
            let w = if weights.len() == 1 { &weights[0] } else { &weights[k] };
            let out = w * f.column(k);
            C64::new(out[0], out[1]) * scales[k]
        })
        .collect())
}
