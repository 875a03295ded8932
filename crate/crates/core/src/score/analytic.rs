//! Closed-form score oracles: isotropic Gaussians and isotropic mixtures,
//! composed with the forward corruption at any noise level.
//!
//! A base density `N(m, v·I)` corrupted at `(ᾱ, σ)` has marginal
//! `N(sqrt(ᾱ)·m, (ᾱ·v + σ²)·I)`; mixtures corrupt component-wise.

use std::f64::consts::PI;

use crate::dual::{Dual, Scalar};
use crate::error::{check_dim, Error, Result};
use crate::schedule::NoiseLevel;

use super::io::{self, ModelTag};
use super::ScoreModel;

#[derive(Clone, Debug, PartialEq)]
pub struct AnalyticGaussianScore {
    mean: Vec<f64>,
    variance: f64,
}

impl AnalyticGaussianScore {
    pub fn new(mean: Vec<f64>, variance: f64) -> Result<Self> {
        if mean.is_empty() {
            return Err(Error::Empty("mean"));
        }
        if !(variance.is_finite() && variance > 0.0) {
            return Err(Error::invalid("variance", "must be positive"));
        }
        Ok(AnalyticGaussianScore { mean, variance })
    }

    pub fn standard(dim: usize) -> Self {
        AnalyticGaussianScore {
            mean: vec![0.0; dim],
            variance: 1.0,
        }
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn variance(&self) -> f64 {
        self.variance
    }

    /// `ᾱ·v + σ²`
    pub fn marginal_variance(&self, level: &NoiseLevel) -> f64 {
        level.alpha_bar * self.variance + level.sigma * level.sigma
    }

    pub fn log_density(&self, x: &[f64], level: &NoiseLevel) -> f64 {
        let var = self.marginal_variance(level);
        let a = level.alpha_bar.sqrt();
        let sq: f64 = x
            .iter()
            .zip(&self.mean)
            .map(|(x, m)| (x - a * m).powi(2))
            .sum();
        -0.5 * sq / var - 0.5 * self.mean.len() as f64 * (2.0 * PI * var).ln()
    }

    fn score_generic<S: Scalar>(&self, x: &[S], level: &NoiseLevel) -> Vec<S> {
        let var = self.marginal_variance(level);
        let a = level.alpha_bar.sqrt();
        x.iter()
            .zip(&self.mean)
            .map(|(&x, &m)| -(x - S::cst(a * m)) / S::cst(var))
            .collect()
    }

    pub(super) fn encode(&self, out: &mut Vec<u8>) {
        io::put_u32(out, self.mean.len() as u32);
        io::put_f64(out, self.variance);
        io::put_f64s(out, &self.mean);
    }

    pub(super) fn decode(r: &mut io::Reader<'_>) -> Result<Self> {
        let dim = r.u32()? as usize;
        let variance = r.f64()?;
        let mean = r.f64s(dim)?;
        AnalyticGaussianScore::new(mean, variance)
    }
}

impl ScoreModel for AnalyticGaussianScore {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn evaluate(&self, x: &[f64], level: &NoiseLevel) -> Result<Vec<f64>> {
        check_dim(self.dim(), x.len())?;
        Ok(self.score_generic(x, level))
    }

    fn jvp(&self, x: &[f64], level: &NoiseLevel, v: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        check_dim(self.dim(), x.len())?;
        check_dim(self.dim(), v.len())?;
        Ok(Dual::split(&self.score_generic(&Dual::seed(x, v), level)))
    }

    fn to_bytes(&self) -> Vec<u8> {
        io::envelope(ModelTag::Gaussian, |out| self.encode(out))
    }
}

/// `∇ log N(x; m, v·I)` for the uncorrupted density.
pub fn gaussian_score(model: &AnalyticGaussianScore, x: &[f64]) -> Result<Vec<f64>> {
    model.evaluate(x, &NoiseLevel::CLEAN)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GmmScore {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    variances: Vec<f64>,
}

impl GmmScore {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, variances: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Empty("mixture components"));
        }
        if means.len() != weights.len() || variances.len() != weights.len() {
            return Err(Error::invalid(
                "components",
                "weights, means and variances must have equal length",
            ));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::invalid("weights", "must be non-negative"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("weights", format!("sum to {total}, not 1")));
        }
        if variances.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::invalid("variances", "must be positive"));
        }
        let dim = means[0].len();
        if dim == 0 {
            return Err(Error::Empty("mean"));
        }
        for m in &means {
            check_dim(dim, m.len())?;
        }
        Ok(GmmScore {
            weights,
            means,
            variances,
        })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    fn components(&self) -> impl Iterator<Item = (f64, &[f64], f64)> {
        self.weights
            .iter()
            .zip(&self.means)
            .zip(&self.variances)
            .filter(|((w, _), _)| **w > 0.0)
            .map(|((w, m), v)| (*w, m.as_slice(), *v))
    }

    pub fn log_density(&self, x: &[f64], level: &NoiseLevel) -> f64 {
        let d = x.len() as f64;
        let a = level.alpha_bar.sqrt();
        let logits: Vec<f64> = self
            .components()
            .map(|(w, m, v)| {
                let var = level.alpha_bar * v + level.sigma * level.sigma;
                let sq: f64 = x.iter().zip(m).map(|(x, m)| (x - a * m).powi(2)).sum();
                w.ln() - 0.5 * sq / var - 0.5 * d * (2.0 * PI * var).ln()
            })
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln()
    }

    fn score_generic<S: Scalar>(&self, x: &[S], level: &NoiseLevel) -> Vec<S> {
        let d = x.len() as f64;
        let a = level.alpha_bar.sqrt();
        let mut logits = Vec::with_capacity(self.weights.len());
        let mut comp_scores = Vec::with_capacity(self.weights.len());
        for (w, m, v) in self.components() {
            let var = level.alpha_bar * v + level.sigma * level.sigma;
            let diff: Vec<S> = x.iter().zip(m).map(|(&x, &m)| x - S::cst(a * m)).collect();
            let sq = diff.iter().fold(S::cst(0.0), |acc, &e| acc + e * e);
            logits.push(S::cst(w.ln() - 0.5 * d * (2.0 * PI * var).ln()) - sq / S::cst(2.0 * var));
            comp_scores.push(diff.into_iter().map(|e| -e / S::cst(var)).collect::<Vec<S>>());
        }
        // Responsibilities via log-sum-exp, shifted by the primal maximum.
        let max = logits
            .iter()
            .map(|l| l.re())
            .fold(f64::NEG_INFINITY, f64::max);
        let unnorm: Vec<S> = logits.iter().map(|&l| (l - S::cst(max)).exp()).collect();
        let total = unnorm.iter().fold(S::cst(0.0), |acc, &u| acc + u);
        let mut out = vec![S::cst(0.0); x.len()];
        for (u, s) in unnorm.iter().zip(&comp_scores) {
            let r = *u / total;
            for (o, &si) in out.iter_mut().zip(s) {
                *o = *o + r * si;
            }
        }
        out
    }

    pub(super) fn encode(&self, out: &mut Vec<u8>) {
        io::put_u32(out, self.weights.len() as u32);
        io::put_u32(out, self.means[0].len() as u32);
        io::put_f64s(out, &self.weights);
        io::put_f64s(out, &self.variances);
        for m in &self.means {
            io::put_f64s(out, m);
        }
    }

    pub(super) fn decode(r: &mut io::Reader<'_>) -> Result<Self> {
        let k = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let weights = r.f64s(k)?;
        let variances = r.f64s(k)?;
        let means = (0..k).map(|_| r.f64s(dim)).collect::<Result<Vec<_>>>()?;
        GmmScore::new(weights, means, variances)
    }
}

impl ScoreModel for GmmScore {
    fn dim(&self) -> usize {
        self.means[0].len()
    }

    fn evaluate(&self, x: &[f64], level: &NoiseLevel) -> Result<Vec<f64>> {
        check_dim(self.dim(), x.len())?;
        Ok(self.score_generic(x, level))
    }

    fn jvp(&self, x: &[f64], level: &NoiseLevel, v: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        check_dim(self.dim(), x.len())?;
        check_dim(self.dim(), v.len())?;
        Ok(Dual::split(&self.score_generic(&Dual::seed(x, v), level)))
    }

    fn to_bytes(&self) -> Vec<u8> {
        io::envelope(ModelTag::Gmm, |out| self.encode(out))
    }
}

/// `∇ log Σ_k w_k N(x; m_k, v_k·I)` for the uncorrupted mixture.
pub fn gmm_score(model: &GmmScore, x: &[f64]) -> Result<Vec<f64>> {
    model.evaluate(x, &NoiseLevel::CLEAN)
}
