//! Denoising score matching for [`MlpDenoiser`].
//!
//! Each minibatch draws a noise level and `ε ~ N(0, I)` per point, corrupts
//! the standardized data, and regresses the network output onto its target:
//! `ε` for noise prediction, `(sqrt(ᾱ)·x0 − c_skip·x_t)/c_out` for the
//! denoiser. In score space this is `E[w·‖s_θ + ε/σ‖²]` with `w = σ²`
//! (noise prediction) or `w = σ⁴/c_out²` (denoiser). Gradients come from a
//! hand-written backward pass; the optimizer is Adam.

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{check_dim, Error, Result};
use crate::rng;
use crate::schedule::{NoiseLevel, NoiseSchedule};

use super::mlp::{Dense, MlpDenoiser, Parameterization, Preconditioning, Standardization};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// How training noise levels are drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "kebab-case")]
pub enum NoiseSampling {
    /// `t ~ U{1..T}` on the discrete schedule.
    UniformSteps,
    /// `ln σ ~ N(mu, sigma_log²)`, continuous levels with `ᾱ = 1`.
    LogNormal { mu: f64, sigma_log: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DsmTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub noise: NoiseSampling,
    pub seed: u64,
    /// Fit per-coordinate standardization before training.
    pub standardize: bool,
}

impl Default for DsmTrainConfig {
    fn default() -> Self {
        DsmTrainConfig {
            epochs: 200,
            batch_size: 128,
            learning_rate: 1e-3,
            noise: NoiseSampling::UniformSteps,
            seed: 0,
            standardize: true,
        }
    }
}

impl DsmTrainConfig {
    fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be positive"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::invalid("learning_rate", "must be positive"));
        }
        if let NoiseSampling::LogNormal { mu, sigma_log } = self.noise {
            crate::schedule::LogNormalSigmaPrior::new(mu, sigma_log)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: MlpDenoiser,
    /// Mean per-sample loss of each epoch.
    pub losses: Vec<f64>,
}

struct Adam {
    m: Vec<Dense>,
    v: Vec<Dense>,
    step: i32,
    lr: f64,
}

impl Adam {
    fn new(model: &MlpDenoiser, lr: f64) -> Self {
        Adam {
            m: model.zero_grads(),
            v: model.zero_grads(),
            step: 0,
            lr,
        }
    }

    fn update(&mut self, layers: &mut [Dense], grads: &[Dense]) {
        self.step += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.step);
        let c2 = 1.0 - ADAM_BETA2.powi(self.step);
        let lr = self.lr;
        let upd = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
        };
        for (((layer, grad), m), v) in layers
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            ndarray::Zip::from(&mut layer.weight)
                .and(&grad.weight)
                .and(&mut m.weight)
                .and(&mut v.weight)
                .for_each(|p, &g, m, v| upd(p, g, m, v));
            ndarray::Zip::from(&mut layer.bias)
                .and(&grad.bias)
                .and(&mut m.bias)
                .and(&mut v.bias)
                .for_each(|p, &g, m, v| upd(p, g, m, v));
        }
    }
}

fn draw_level(noise: &NoiseSampling, schedule: &NoiseSchedule, r: &mut impl Rng) -> NoiseLevel {
    match *noise {
        NoiseSampling::UniformSteps => {
            let t = r.random_range(1..=schedule.steps());
            schedule.level(t).expect("step drawn in range")
        }
        NoiseSampling::LogNormal { mu, sigma_log } => {
            let n: f64 = r.sample(StandardNormal);
            NoiseLevel {
                alpha_bar: 1.0,
                sigma: (mu + sigma_log * n).exp(),
            }
        }
    }
}

/// Loss and parameter gradients for one assembled batch.
fn loss_and_grads(model: &MlpDenoiser, input: Array2<f64>, target: &Array2<f64>) -> (f64, Vec<Dense>) {
    let act = model.spec().activation;
    let last = model.layers.len() - 1;
    let mut inputs = Vec::with_capacity(model.layers.len());
    let mut pre = Vec::with_capacity(model.layers.len());
    let mut h = input;
    for (li, layer) in model.layers.iter().enumerate() {
        let a = h.dot(&layer.weight.t()) + &layer.bias;
        inputs.push(h);
        h = if li == last { a.clone() } else { a.mapv(|v| act.apply(v)) };
        pre.push(a);
    }
    let b = target.nrows() as f64;
    let diff = h - target;
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / b;
    let mut g = diff * (2.0 / b);
    let mut grads = model.zero_grads();
    for li in (0..=last).rev() {
        if li != last {
            g.zip_mut_with(&pre[li], |g, &a| *g *= act.derivative(a));
        }
        grads[li].weight = g.t().dot(&inputs[li]);
        grads[li].bias = g.sum_axis(Axis(0));
        if li > 0 {
            g = g.dot(&model.layers[li].weight);
        }
    }
    (loss, grads)
}

pub fn train_dsm(
    mut model: MlpDenoiser,
    dataset: &Dataset,
    schedule: &NoiseSchedule,
    cfg: &DsmTrainConfig,
) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::Empty("training dataset"));
    }
    check_dim(model.spec().dim, dataset.dim())?;
    cfg.validate()?;

    let standardization = if cfg.standardize {
        Standardization::fit(dataset)
    } else {
        Standardization::identity(dataset.dim())
    };
    let data: Vec<Vec<f64>> = dataset.rows().map(|r| standardization.apply(r)).collect();
    model.set_standardization(standardization)?;

    let d = dataset.dim();
    let in_dim = model.spec().input_dim();
    let param = model.spec().parameterization;
    let mut r = rng::stream(cfg.seed, &[rng::streams::TRAIN]);
    let mut adam = Adam::new(&model, cfg.learning_rate);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut r);
        let mut total = 0.0;
        for (bi, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut input = Array2::zeros((batch.len(), in_dim));
            let mut target = Array2::zeros((batch.len(), d));
            for (row, &i) in batch.iter().enumerate() {
                let level = draw_level(&cfg.noise, schedule, &mut r);
                let pc = Preconditioning::at(&level);
                let sa = level.alpha_bar.sqrt();
                let emb = model.embedding(pc.c_noise);
                for (j, &x0) in data[i].iter().enumerate() {
                    let eps: f64 = r.sample(StandardNormal);
                    let xt = sa * x0 + level.sigma * eps;
                    input[[row, j]] = pc.c_in * xt;
                    target[[row, j]] = match param {
                        Parameterization::Epsilon => eps,
                        Parameterization::Denoiser => (sa * x0 - pc.c_skip * xt) / pc.c_out,
                    };
                }
                for (j, e) in emb.into_iter().enumerate() {
                    input[[row, d + j]] = e;
                }
            }
            let (loss, grads) = loss_and_grads(&model, input, &target);
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss at epoch {epoch}, batch {bi}"
                )));
            }
            total += loss * batch.len() as f64;
            adam.update(&mut model.layers, &grads);
        }
        let mean = total / data.len() as f64;
        log::debug!("epoch {epoch}: loss {mean:.6}");
        losses.push(mean);
    }
    Ok(TrainOutcome { model, losses })
}
