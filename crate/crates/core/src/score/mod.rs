//! Score sources: anything producing `∇ₓ log p_t(x_t)` at a noise level.
//!
//! All models output `+∇ log p`. The typicality ratio only uses `‖s‖²` and
//! `−Tr ∇s`, so it is unchanged under the opposite (`s := −∇ log p`)
//! convention.

mod analytic;
pub(crate) mod io;
mod mlp;
mod train;

use std::sync::atomic::{AtomicU64, Ordering};

pub use analytic::{gaussian_score, gmm_score, AnalyticGaussianScore, GmmScore};
pub use io::{AnyModel, SCPD_MAGIC, SCPD_VERSION};
pub use mlp::{Activation, Dense, MlpDenoiser, MlpSpec, Parameterization, Preconditioning, Standardization};
pub use train::{train_dsm, DsmTrainConfig, NoiseSampling, TrainOutcome};

use crate::error::{check_dim, Error, Result};
use crate::schedule::NoiseLevel;

/// Uniform contract over score sources.
///
/// `evaluate` must be deterministic in `(x, level)`, and the first output of
/// `jvp` must be bit-identical to `evaluate`.
pub trait ScoreModel: Send + Sync {
    fn dim(&self) -> usize;

    fn evaluate(&self, x: &[f64], level: &NoiseLevel) -> Result<Vec<f64>>;

    /// Score and its exact directional derivative `J(x)·v`.
    fn jvp(&self, x: &[f64], level: &NoiseLevel, v: &[f64]) -> Result<(Vec<f64>, Vec<f64>)>;

    /// Maps a raw data point into the space the model was trained in.
    fn to_model_space(&self, x0: &[f64]) -> Vec<f64> {
        x0.to_vec()
    }

    /// `SCPD` envelope; also the input to the model fingerprint.
    fn to_bytes(&self) -> Vec<u8>;
}

impl<M: ScoreModel + ?Sized> ScoreModel for &M {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn evaluate(&self, x: &[f64], level: &NoiseLevel) -> Result<Vec<f64>> {
        (**self).evaluate(x, level)
    }
    fn jvp(&self, x: &[f64], level: &NoiseLevel, v: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        (**self).jvp(x, level, v)
    }
    fn to_model_space(&self, x0: &[f64]) -> Vec<f64> {
        (**self).to_model_space(x0)
    }
    fn to_bytes(&self) -> Vec<u8> {
        (**self).to_bytes()
    }
}

impl<M: ScoreModel + ?Sized> ScoreModel for Box<M> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn evaluate(&self, x: &[f64], level: &NoiseLevel) -> Result<Vec<f64>> {
        (**self).evaluate(x, level)
    }
    fn jvp(&self, x: &[f64], level: &NoiseLevel, v: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        (**self).jvp(x, level, v)
    }
    fn to_model_space(&self, x0: &[f64]) -> Vec<f64> {
        (**self).to_model_space(x0)
    }
    fn to_bytes(&self) -> Vec<u8> {
        (**self).to_bytes()
    }
}

pub fn jvp_score<M: ScoreModel + ?Sized>(
    model: &M,
    x: &[f64],
    level: &NoiseLevel,
    v: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_dim(model.dim(), x.len())?;
    check_dim(x.len(), v.len())?;
    model.jvp(x, level, v)
}

/// `s = −ε̂ / σ_t`
pub fn score_from_eps(eps_pred: &[f64], sigma_t: f64) -> Result<Vec<f64>> {
    if !(sigma_t > 0.0) {
        return Err(Error::invalid("sigma_t", "must be positive"));
    }
    Ok(eps_pred.iter().map(|e| -e / sigma_t).collect())
}

/// `s = (D(x) − x) / σ²`
pub fn score_from_denoiser(d_out: &[f64], x: &[f64], sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0) {
        return Err(Error::invalid("sigma", "must be positive"));
    }
    check_dim(x.len(), d_out.len())?;
    let s2 = sigma * sigma;
    Ok(d_out.iter().zip(x).map(|(d, x)| (d - x) / s2).collect())
}

/// Counts forward evaluations and JVPs passing through a model.
pub struct CountingModel<M> {
    inner: M,
    forwards: AtomicU64,
    jvps: AtomicU64,
}

impl<M> CountingModel<M> {
    pub fn new(inner: M) -> Self {
        CountingModel {
            inner,
            forwards: AtomicU64::new(0),
            jvps: AtomicU64::new(0),
        }
    }

    /// `(forwards, jvps)` so far.
    pub fn counts(&self) -> (u64, u64) {
        (
            self.forwards.load(Ordering::Relaxed),
            self.jvps.load(Ordering::Relaxed),
        )
    }

    pub fn reset(&self) {
        self.forwards.store(0, Ordering::Relaxed);
        self.jvps.store(0, Ordering::Relaxed);
    }

    pub fn into_inner(self) -> M {
        self.inner
    }
}

impl<M: ScoreModel> ScoreModel for CountingModel<M> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn evaluate(&self, x: &[f64], level: &NoiseLevel) -> Result<Vec<f64>> {
        self.forwards.fetch_add(1, Ordering::Relaxed);
        self.inner.evaluate(x, level)
    }
    fn jvp(&self, x: &[f64], level: &NoiseLevel, v: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.jvps.fetch_add(1, Ordering::Relaxed);
        self.inner.jvp(x, level, v)
    }
    fn to_model_space(&self, x0: &[f64]) -> Vec<f64> {
        self.inner.to_model_space(x0)
    }
    fn to_bytes(&self) -> Vec<u8> {
        self.inner.to_bytes()
    }
}
