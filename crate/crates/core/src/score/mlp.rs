//! Fully connected score network with noise-level conditioning.
//!
//! The network `F` sees `c_in·x` concatenated with a noise embedding of
//! `c_noise = ln(σ)/4` (the scalar itself plus sinusoidal features). Its
//! output is read either as a noise prediction, `s = −F/σ`, or through a
//! preconditioned denoiser `D = c_skip·x + c_out·F` with `s = (D − x)/σ²`.
//! With a VP level `(ᾱ, σ)` the denoiser targets `sqrt(ᾱ)·x0`; continuous
//! levels have `ᾱ = 1`.
//!
//! The forward pass is generic over [`Scalar`], so JVPs run the same code on
//! dual numbers.

use std::f64::consts::PI;

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dual::{Dual, Scalar};
use crate::error::{check_dim, Error, Result};
use crate::rng;
use crate::schedule::NoiseLevel;

use super::io::{self, ModelTag};
use super::ScoreModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Silu,
    Tanh,
    Softplus,
    /// Piecewise linear: `Tr ∇s` is piecewise constant.
    Relu,
}

impl Activation {
    pub fn id(self) -> u8 {
        match self {
            Activation::Silu => 0,
            Activation::Tanh => 1,
            Activation::Softplus => 2,
            Activation::Relu => 3,
        }
    }

    pub fn from_id(id: u8) -> Result<Self> {
        Ok(match id {
            0 => Activation::Silu,
            1 => Activation::Tanh,
            2 => Activation::Softplus,
            3 => Activation::Relu,
            _ => return Err(Error::format("SCPD", format!("unknown activation id {id}"))),
        })
    }

    pub fn is_smooth(self) -> bool {
        !matches!(self, Activation::Relu)
    }

    #[inline]
    pub(crate) fn apply<S: Scalar>(self, x: S) -> S {
        match self {
            Activation::Silu => x.silu(),
            Activation::Tanh => x.tanh(),
            Activation::Softplus => x.softplus(),
            Activation::Relu => x.relu(),
        }
    }

    #[inline]
    pub(crate) fn derivative(self, x: f64) -> f64 {
        Activation::apply(self, Dual::new(x, 1.0)).du
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parameterization {
    /// `ε_θ`: predicts the injected noise.
    Epsilon,
    /// `D_θ`: predicts the (scaled) clean point.
    Denoiser,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Number of sinusoidal frequency pairs in the noise embedding.
    pub embed_freqs: usize,
    pub parameterization: Parameterization,
}

impl MlpSpec {
    /// Three hidden layers of 128 SiLU units, noise prediction.
    pub fn new(dim: usize) -> Self {
        MlpSpec {
            dim,
            hidden: vec![128, 128, 128],
            activation: Activation::Silu,
            embed_freqs: 4,
            parameterization: Parameterization::Epsilon,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.dim + 1 + 2 * self.embed_freqs
    }

    /// `[input, hidden..., output]`
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim()];
        w.extend_from_slice(&self.hidden);
        w.push(self.dim);
        w
    }
}

/// Per-coordinate affine map into model space: `z = (x − mean) / scale`.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardization {
    pub fn identity(dim: usize) -> Self {
        Standardization {
            mean: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    /// Column means and standard deviations; degenerate columns keep scale 1.
    pub fn fit(data: &crate::data::Dataset) -> Self {
        let d = data.dim();
        let n = data.len().max(1) as f64;
        let mut mean = vec![0.0; d];
        for r in data.rows() {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for r in data.rows() {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let scale = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 1e-12 && sd.is_finite() {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Standardization { mean, scale }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((x, m), s)| (x - m) / s)
            .collect()
    }
}

/// Input/output scalings at a noise level, unit data variance in model space.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Preconditioning {
    pub c_in: f64,
    pub c_skip: f64,
    pub c_out: f64,
    pub c_noise: f64,
}

impl Preconditioning {
    pub fn at(level: &NoiseLevel) -> Self {
        let a = level.alpha_bar;
        let s2 = level.sigma * level.sigma;
        let total = a + s2;
        Preconditioning {
            c_in: 1.0 / total.sqrt(),
            c_skip: a / total,
            c_out: level.sigma * a.sqrt() / total.sqrt(),
            c_noise: level.sigma.ln() / 4.0,
        }
    }
}

/// `y = W·x + b` with `W` stored as (out × in).
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    fn init(fan_in: usize, fan_out: usize, r: &mut impl Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Dense {
            weight: Array2::from_shape_fn((fan_out, fan_in), |_| r.random_range(-bound..bound)),
            bias: Array1::from_shape_fn(fan_out, |_| r.random_range(-bound..bound)),
        }
    }

    fn zeros_like(&self) -> Self {
        Dense {
            weight: Array2::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.raw_dim()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpDenoiser {
    spec: MlpSpec,
    standardization: Standardization,
    pub(crate) layers: Vec<Dense>,
}

impl MlpDenoiser {
    pub fn new(spec: MlpSpec, seed: u64) -> Result<Self> {
        if spec.dim == 0 {
            return Err(Error::invalid("dim", "must be positive"));
        }
        if spec.hidden.contains(&0) {
            return Err(Error::invalid("hidden", "layer widths must be positive"));
        }
        if !spec.activation.is_smooth() {
            log::warn!("piecewise-linear activation: the score Jacobian trace is piecewise constant");
        }
        let mut r = rng::stream(seed, &[rng::streams::INIT]);
        let widths = spec.widths();
        let layers = widths
            .windows(2)
            .map(|w| Dense::init(w[0], w[1], &mut r))
            .collect();
        Ok(MlpDenoiser {
            standardization: Standardization::identity(spec.dim),
            spec,
            layers,
        })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn standardization(&self) -> &Standardization {
        &self.standardization
    }

    pub fn set_standardization(&mut self, s: Standardization) -> Result<()> {
        check_dim(self.spec.dim, s.mean.len())?;
        check_dim(self.spec.dim, s.scale.len())?;
        if s.scale.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::invalid("scale", "must be positive"));
        }
        self.standardization = s;
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    /// Flat parameters: per layer, row-major weights then bias.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        check_dim(self.num_params(), params.len())?;
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("model parameters".into()));
        }
        let mut it = params.iter();
        for l in &mut self.layers {
            l.weight.iter_mut().for_each(|w| *w = *it.next().unwrap());
            l.bias.iter_mut().for_each(|b| *b = *it.next().unwrap());
        }
        Ok(())
    }

    pub(crate) fn zero_grads(&self) -> Vec<Dense> {
        self.layers.iter().map(Dense::zeros_like).collect()
    }

    pub fn embedding(&self, c_noise: f64) -> Vec<f64> {
        let mut e = Vec::with_capacity(1 + 2 * self.spec.embed_freqs);
        e.push(c_noise);
        for k in 0..self.spec.embed_freqs {
            let f = PI * (1u64 << k) as f64;
            e.push((f * c_noise).sin());
            e.push((f * c_noise).cos());
        }
        e
    }

    /// The raw network `F` on an already assembled input row.
    pub(crate) fn network<S: Scalar>(&self, input: &[S]) -> Vec<S> {
        let mut h: Vec<S> = input.to_vec();
        let last = self.layers.len() - 1;
        for (li, layer) in self.layers.iter().enumerate() {
            let mut next = Vec::with_capacity(layer.bias.len());
            for (row, &b) in layer.weight.rows().into_iter().zip(layer.bias.iter()) {
                let mut acc = S::cst(b);
                for (&w, &x) in row.iter().zip(&h) {
                    acc = acc + S::cst(w) * x;
                }
                next.push(if li == last {
                    acc
                } else {
                    self.spec.activation.apply(acc)
                });
            }
            h = next;
        }
        h
    }

    fn score_generic<S: Scalar>(&self, x: &[S], level: &NoiseLevel) -> Result<Vec<S>> {
        if !(level.sigma > 0.0 && level.sigma.is_finite()) {
            return Err(Error::invalid("sigma", "network scores need a positive noise level"));
        }
        let pc = Preconditioning::at(level);
        let mut input: Vec<S> = x.iter().map(|&v| v.scale(pc.c_in)).collect();
        input.extend(self.embedding(pc.c_noise).into_iter().map(S::cst));
        let f = self.network(&input);
        Ok(match self.spec.parameterization {
            Parameterization::Epsilon => f.into_iter().map(|v| -v / S::cst(level.sigma)).collect(),
            Parameterization::Denoiser => {
                let s2 = S::cst(level.sigma * level.sigma);
                x.iter()
                    .zip(f)
                    .map(|(&x, f)| (x.scale(pc.c_skip) + f.scale(pc.c_out) - x) / s2)
                    .collect()
            }
        })
    }

    pub(super) fn decode(r: &mut io::Reader<'_>, parameterization: Parameterization) -> Result<Self> {
        let n = r.u32()? as usize;
        if n < 2 {
            return Err(Error::format("SCPD", "need at least input and output widths"));
        }
        let widths = (0..n).map(|_| r.u32().map(|w| w as usize)).collect::<Result<Vec<_>>>()?;
        let activation = Activation::from_id(r.u8()?)?;
        let embed_freqs = r.u32()? as usize;
        let dim = *widths.last().unwrap();
        let spec = MlpSpec {
            dim,
            hidden: widths[1..n - 1].to_vec(),
            activation,
            embed_freqs,
            parameterization,
        };
        if spec.widths() != widths {
            return Err(Error::format("SCPD", "layer widths inconsistent with data dimension"));
        }
        let mean = r.f64s(dim)?;
        let scale = r.f64s(dim)?;
        let mut model = MlpDenoiser::new(spec, 0)?;
        let params = r.f64s(model.num_params())?;
        model.set_params(&params)?;
        model.set_standardization(Standardization { mean, scale })?;
        Ok(model)
    }
}

impl ScoreModel for MlpDenoiser {
    fn dim(&self) -> usize {
        self.spec.dim
    }

    fn evaluate(&self, x: &[f64], level: &NoiseLevel) -> Result<Vec<f64>> {
        check_dim(self.dim(), x.len())?;
        self.score_generic(x, level)
    }

    fn jvp(&self, x: &[f64], level: &NoiseLevel, v: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        check_dim(self.dim(), x.len())?;
        check_dim(self.dim(), v.len())?;
        Ok(Dual::split(&self.score_generic(&Dual::seed(x, v), level)?))
    }

    fn to_model_space(&self, x0: &[f64]) -> Vec<f64> {
        self.standardization.apply(x0)
    }

    fn to_bytes(&self) -> Vec<u8> {
        io::envelope(ModelTag::for_parameterization(self.spec.parameterization), |out| {
            let widths = self.spec.widths();
            io::put_u32(out, widths.len() as u32);
            for w in widths {
                io::put_u32(out, w as u32);
            }
            out.push(self.spec.activation.id());
            io::put_u32(out, self.spec.embed_freqs as u32);
            io::put_f64s(out, &self.standardization.mean);
            io::put_f64s(out, &self.standardization.scale);
            io::put_f64s(out, &self.params());
        })
    }
}
