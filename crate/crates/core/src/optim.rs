//! Adam with a per-epoch exponential learning-rate decay, and the squared-loss
//! training loop for [`StudentModel`].

use std::io::Write;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{StudentModel, WeightedTokens};
use crate::rng;

/// A supervised example for the student.
pub trait Sample {
    fn context(&self) -> &WeightedTokens;
    fn query(&self) -> &[f64];
    fn target(&self) -> f64;
}

/// Plain owned [`Sample`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Labeled {
    pub context: WeightedTokens,
    pub query: Vec<f64>,
    pub target: f64,
}

impl Sample for Labeled {
    fn context(&self) -> &WeightedTokens {
        &self.context
    }

    fn query(&self) -> &[f64] {
        &self.query
    }

    fn target(&self) -> f64 {
        self.target
    }
}

impl<S: Sample + ?Sized> Sample for &S {
    fn context(&self) -> &WeightedTokens {
        (**self).context()
    }

    fn query(&self) -> &[f64] {
        (**self).query()
    }

    fn target(&self) -> f64 {
        (**self).target()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr0: f64,
    pub decay: f64,
    /// Epoch index used for the schedule `lr0 · decay^epoch`.
    pub epoch: u32,
}

impl AdamState {
    pub fn new(n_params: usize, lr0: f64, decay: f64) -> Self {
        AdamState {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr0,
            decay,
            epoch: 0,
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr0 * self.decay.powi(self.epoch as i32)
    }

    /// One bias-corrected Adam update. Non-finite gradients reject the step
    /// and leave both `params` and the state untouched.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::dims(self.m.len(), params.len()));
        }
        if grads.len() != params.len() {
            return Err(Error::dims(params.len(), grads.len()));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient(i));
        }
        self.t += 1;
        let lr = self.learning_rate();
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

pub fn adam_step(state: &mut AdamState, params: &mut [f64], grads: &[f64]) -> Result<()> {
    state.step(params, grads)
}

/// Batch size used when none is configured.
pub const DEFAULT_BATCH: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// `None` means `min(DEFAULT_BATCH, n)`.
    pub batch_size: Option<usize>,
    pub lr0: f64,
    pub decay_per_epoch: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: None,
            lr0: 3e-3,
            decay_per_epoch: 0.95,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            noise_std: 0.01,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_std >= 0.0) {
            return Err(Error::InvalidArgument(
                "noise_std must be nonnegative".into(),
            ));
        }
        if !(self.lr0 > 0.0) || !(self.decay_per_epoch > 0.0 && self.decay_per_epoch <= 1.0) {
            return Err(Error::InvalidArgument(
                "need lr0 > 0 and decay in (0, 1]".into(),
            ));
        }
        if self.batch_size == Some(0) {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn effective_batch(&self, n: usize) -> usize {
        self.batch_size.unwrap_or(DEFAULT_BATCH).min(n).max(1)
    }
}

/// Minibatch Adam on the squared loss. Targets get fresh `N(0, noise_std²)`
/// noise on every presentation. Returns the mean training loss per epoch.
pub fn train<S: Sample>(
    model: &mut StudentModel,
    data: &[S],
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let n = data.len();
    let batch = cfg.effective_batch(n);
    let mut state = AdamState::new(model.n_params(), cfg.lr0, cfg.decay_per_epoch);
    state.beta1 = cfg.beta1;
    state.beta2 = cfg.beta2;
    state.eps = cfg.eps;
    let noise = Normal::new(0.0, cfg.noise_std).expect("validated noise_std");
    let mut acc = vec![0.0; model.n_params()];
    let mut order: Vec<usize> = (0..n).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        state.epoch = epoch as u32;
        let mut shuffle_rng = rng::stream(cfg.seed, &[rng::label("train_shuffle"), epoch as u64]);
        let mut noise_rng = rng::stream(cfg.seed, &[rng::label("train_noise"), epoch as u64]);
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch) {
            acc.fill(0.0);
            let scale = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let ex = &data[i];
                let (pred, cache) = model.forward(ex.context(), ex.query())?;
                let target = ex.target() + noise.sample(&mut noise_rng);
                let resid = pred - target;
                epoch_loss += resid * resid;
                model.backward_accumulate(&cache, 2.0 * resid * scale, &mut acc)?;
            }
            state.step(model.params_mut(), &acc)?;
        }
        trace.push(epoch_loss / n as f64);
    }
    Ok(trace)
}

/// Mean squared error against the clean targets.
pub fn evaluate<S: Sample>(model: &StudentModel, data: &[S]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("evaluation set is empty".into()));
    }
    let mut total = 0.0;
    for ex in data {
        let r = model.predict(ex.context(), ex.query())? - ex.target();
        total += r * r;
    }
    Ok(total / data.len() as f64)
}

/// Writes `epoch,train_loss` rows.
pub fn write_loss_trace<W: Write>(trace: &[f64], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "train_loss"])?;
    for (e, l) in trace.iter().enumerate() {
        w.write_record([e.to_string(), format!("{l:e}")])?;
    }
    w.flush().map_err(|e| Error::io("<loss trace>", e))?;
    Ok(())
}
