//! Deterministic synthetic datasets.
//!
//! Transitions from a replay buffer are modelled as flat vectors; structure
//! beyond the dimension does not matter to the statistic.

use std::f64::consts::PI;

use rand::Rng;
use rand::distr::weighted::WeightedIndex;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::{self, streams, StreamRng};

const CHUNK: usize = 1024;

fn z(r: &mut StreamRng) -> f64 {
    StandardNormal.sample(r)
}

/// Kind-specific parameters. Unused fields are ignored.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetParams {
    pub mean: Option<Vec<f64>>,
    pub scale: Option<f64>,
    pub means: Option<Vec<Vec<f64>>>,
    pub scales: Option<Vec<f64>>,
    pub weights: Option<Vec<f64>>,
    pub shift: Option<Vec<f64>>,
    pub radius: Option<f64>,
    pub noise: Option<f64>,
    /// Seed for randomly placed mixture components (replay-mixture).
    pub layout_seed: Option<u64>,
    pub components: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub kind: String,
    pub dim: usize,
    pub size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub params: DatasetParams,
}

impl DatasetSpec {
    pub fn new(kind: &str, dim: usize, size: usize, seed: u64) -> Self {
        DatasetSpec {
            kind: kind.to_string(),
            dim,
            size,
            seed,
            params: DatasetParams::default(),
        }
    }
}

#[derive(Clone, Debug)]
struct Mixture {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    scales: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
enum Generator {
    Gaussian { mean: Vec<f64>, scale: f64 },
    Mixture(Mixture),
    Ring { radius: f64, noise: f64 },
    TwoMoons { noise: f64, scale: f64 },
    ShiftedPair { mean: Vec<f64>, scale: f64, shift: Vec<f64>, half: usize },
}

fn positive(name: &'static str, v: f64) -> Result<f64> {
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(Error::invalid(name, format!("must be positive and finite, got {v}")))
    }
}

fn vector(name: &'static str, v: Option<&Vec<f64>>, dim: usize) -> Result<Vec<f64>> {
    match v {
        None => Ok(vec![0.0; dim]),
        Some(v) if v.len() != dim => Err(Error::invalid(name, format!("length {} != dimension {dim}", v.len()))),
        Some(v) if v.iter().any(|x| !x.is_finite()) => Err(Error::invalid(name, "non-finite entry")),
        Some(v) => Ok(v.clone()),
    }
}

fn unit_shift(dim: usize, magnitude: f64) -> Vec<f64> {
    let mut s = vec![0.0; dim];
    s[0] = magnitude;
    s
}

fn validate_weights(w: &[f64]) -> Result<()> {
    if w.is_empty() || w.iter().any(|x| !x.is_finite() || *x < 0.0) || w.iter().sum::<f64>() <= 0.0 {
        return Err(Error::invalid("weights", "need non-negative finite weights with positive sum"));
    }
    Ok(())
}

fn mixture(spec: &DatasetSpec, random_layout: bool) -> Result<Mixture> {
    let p = &spec.params;
    let d = spec.dim;
    let scale = positive("scale", p.scale.unwrap_or(1.0))?;
    let k = p
        .means
        .as_ref()
        .map(Vec::len)
        .or(p.weights.as_ref().map(Vec::len))
        .or(p.components)
        .unwrap_or(if random_layout { 4 } else { 2 });
    if k == 0 {
        return Err(Error::invalid("components", "need at least one component"));
    }
    let means = match &p.means {
        Some(m) => m
            .iter()
            .map(|m| vector("means", Some(m), d))
            .collect::<Result<Vec<_>>>()?,
        None if random_layout => {
            let mut r = rng::stream(p.layout_seed.unwrap_or(0), &[streams::DATA, u64::MAX]);
            (0..k)
                .map(|_| (0..d).map(|_| r.random_range(-3.0..3.0) * scale).collect())
                .collect()
        }
        // Evenly spaced along the first axis, two scale units apart.
        None => (0..k)
            .map(|i| unit_shift(d, 2.0 * scale * (i as f64 - (k - 1) as f64 / 2.0)))
            .collect(),
    };
    let weights = p.weights.clone().unwrap_or_else(|| vec![1.0; k]);
    validate_weights(&weights)?;
    if weights.len() != k {
        return Err(Error::invalid("weights", format!("{} weights for {k} components", weights.len())));
    }
    let scales = match &p.scales {
        Some(s) if s.len() != k => {
            return Err(Error::invalid("scales", format!("{} scales for {k} components", s.len())))
        }
        Some(s) => s
            .iter()
            .map(|&v| positive("scales", v).map(|v| vec![v; d]))
            .collect::<Result<Vec<_>>>()?,
        None if random_layout => {
            let mut r = rng::stream(p.layout_seed.unwrap_or(0), &[streams::DATA, u64::MAX - 1]);
            (0..k)
                .map(|_| (0..d).map(|_| r.random_range(0.3..1.0) * scale).collect())
                .collect()
        }
        None => vec![vec![scale; d]; k],
    };
    Ok(Mixture { weights, means, scales })
}

fn build(spec: &DatasetSpec) -> Result<Generator> {
    if spec.size == 0 {
        return Err(Error::invalid("size", "must be at least 1"));
    }
    if spec.dim == 0 {
        return Err(Error::invalid("dim", "must be at least 1"));
    }
    let p = &spec.params;
    let d = spec.dim;
    let scale = || positive("scale", p.scale.unwrap_or(1.0));
    let need_2d = || {
        if d < 2 {
            Err(Error::invalid("dim", format!("kind {} needs at least 2 dimensions", spec.kind)))
        } else {
            Ok(())
        }
    };
    Ok(match spec.kind.as_str() {
        "gaussian" => Generator::Gaussian {
            mean: vector("mean", p.mean.as_ref(), d)?,
            scale: scale()?,
        },
        "gmm" => Generator::Mixture(mixture(spec, false)?),
        "replay-mixture" => Generator::Mixture(mixture(spec, true)?),
        "ring" => {
            need_2d()?;
            Generator::Ring {
                radius: positive("radius", p.radius.unwrap_or(1.0))?,
                noise: positive("noise", p.noise.unwrap_or(0.05))?,
            }
        }
        "two-moons" => {
            need_2d()?;
            Generator::TwoMoons {
                noise: positive("noise", p.noise.unwrap_or(0.1))?,
                scale: scale()?,
            }
        }
        "shifted-pair" => {
            let scale = scale()?;
            let shift = match &p.shift {
                Some(s) => vector("shift", Some(s), d)?,
                None => unit_shift(d, 10.0 * scale),
            };
            Generator::ShiftedPair {
                mean: vector("mean", p.mean.as_ref(), d)?,
                scale,
                shift,
                half: spec.size / 2,
            }
        }
        other => {
            return Err(Error::invalid(
                "kind",
                format!("unknown dataset kind {other:?} (expected gaussian, gmm, ring, two-moons, shifted-pair or replay-mixture)"),
            ))
        }
    })
}

impl Generator {
    fn row(&self, r: &mut StreamRng, index: usize, out: &mut [f64]) {
        match self {
            Generator::Gaussian { mean, scale } => {
                for (o, m) in out.iter_mut().zip(mean) {
                    *o = m + scale * z(r);
                }
            }
            Generator::ShiftedPair { mean, scale, shift, half } => {
                let upper = index >= *half;
                for ((o, m), s) in out.iter_mut().zip(mean).zip(shift) {
                    *o = m + scale * z(r) + if upper { *s } else { 0.0 };
                }
            }
            Generator::Mixture(m) => {
                // Weights are validated, so construction cannot fail.
                let c = WeightedIndex::new(&m.weights).expect("validated weights").sample(r);
                for ((o, mu), s) in out.iter_mut().zip(&m.means[c]).zip(&m.scales[c]) {
                    *o = mu + s * z(r);
                }
            }
            Generator::Ring { radius, noise } => {
                let theta = r.random_range(0.0..2.0 * PI);
                let rho = radius + noise * z(r);
                out[0] = rho * theta.cos();
                out[1] = rho * theta.sin();
                for o in &mut out[2..] {
                    *o = noise * z(r);
                }
            }
            Generator::TwoMoons { noise, scale } => {
                let t = r.random_range(0.0..PI);
                let (x, y) = if r.random::<bool>() {
                    (t.cos(), t.sin())
                } else {
                    (1.0 - t.cos(), 0.5 - t.sin())
                };
                out[0] = scale * (x + noise * z(r));
                out[1] = scale * (y + noise * z(r));
                for o in &mut out[2..] {
                    *o = scale * noise * z(r);
                }
            }
        }
    }
}

fn fill(g: &Generator, seed: u64, d: usize, chunk: usize, out: &mut [f64]) {
    let mut r = rng::stream(seed, &[streams::DATA, chunk as u64]);
    for (j, row) in out.chunks_exact_mut(d).enumerate() {
        g.row(&mut r, chunk * CHUNK + j, row);
    }
}

/// Generates the dataset described by `spec`.
///
/// Rows are produced in fixed-size chunks, each with its own derived stream,
/// so the output does not depend on how many threads run the chunks.
pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
    let g = build(spec)?;
    let d = spec.dim;
    let mut values = vec![0.0; spec.size * d];
    values
        .par_chunks_mut(CHUNK * d)
        .enumerate()
        .for_each(|(c, out)| fill(&g, spec.seed, d, c, out));
    Dataset::new(d, values)
}

/// Reference serial generator.
pub fn generate_serial(spec: &DatasetSpec) -> Result<Dataset> {
    let g = build(spec)?;
    let d = spec.dim;
    let mut values = vec![0.0; spec.size * d];
    for (c, out) in values.chunks_mut(CHUNK * d).enumerate() {
        fill(&g, spec.seed, d, c, out);
    }
    Dataset::new(d, values)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShiftKind {
    /// Same distribution translated far away: disjoint support.
    RewardShift,
    /// Same mixture components, reversed weights.
    PolicyShift,
    /// Same distribution, different seed.
    SeedShift,
}

impl std::str::FromStr for ShiftKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reward-shift" => Ok(ShiftKind::RewardShift),
            "policy-shift" => Ok(ShiftKind::PolicyShift),
            "seed-shift" => Ok(ShiftKind::SeedShift),
            _ => Err(Error::invalid("shift", format!("unknown shift kind {s:?}"))),
        }
    }
}

fn pair_seed(seed: u64) -> u64 {
    rng::derive_seed(seed, &[streams::DATA, 1])
}

/// Builds an (ID, OOD) pair from `base`. The OOD side always uses a seed
/// derived from the base seed.
///
/// Policy shift needs a mixture kind; without explicit weights it uses
/// 0.9/0.1 against 0.1/0.9 over two components.
pub fn make_task_pair(kind: ShiftKind, base: &DatasetSpec) -> Result<(Dataset, Dataset)> {
    let mut ood = base.clone();
    ood.seed = pair_seed(base.seed);
    match kind {
        ShiftKind::SeedShift => Ok((generate(base)?, generate(&ood)?)),
        ShiftKind::RewardShift => {
            let id = generate(base)?;
            let scale = base.params.scale.unwrap_or(1.0);
            let shift = match &base.params.shift {
                Some(s) => vector("shift", Some(s), base.dim)?,
                None => unit_shift(base.dim, 10.0 * scale),
            };
            let moved = generate(&ood)?.map_rows(|r| r.iter().zip(&shift).map(|(a, b)| a + b).collect());
            Ok((id, moved))
        }
        ShiftKind::PolicyShift => {
            if base.kind != "gmm" && base.kind != "replay-mixture" {
                return Err(Error::invalid("kind", "policy shift needs a gmm or replay-mixture base"));
            }
            let mut id_spec = base.clone();
            let w = base.params.weights.clone().unwrap_or_else(|| vec![0.9, 0.1]);
            id_spec.params.weights = Some(w.clone());
            ood.params.weights = Some(w.into_iter().rev().collect());
            Ok((generate(&id_spec)?, generate(&ood)?))
        }
    }
}
