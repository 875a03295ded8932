//! The score-curvature ratio.
//!
//! At a corrupted point `x_t` the model gives `ŝ = s_θ(x_t, t)`. The
//! curvature `κ̂ = −Tr ∇ŝ` is estimated with Hutchinson probes, one JVP each,
//! and the statistic is `T = sign · ‖ŝ‖² / (κ̂ + ε)` with
//! `sign = sign(Σᵢ ŝᵢ)`.
//!
//! Randomness is drawn from streams keyed by `(seed, level, sample index)`,
//! so a batch gives the same values whatever the worker count.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{check_dim, Error, Result};
use crate::rng::{self, streams};
use crate::schedule::{LevelSpec, NoiseLevel, NoiseSchedule};
use crate::score::ScoreModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeKind {
    /// Entries ±1; exact for Jacobians proportional to the identity.
    Rademacher,
    Gaussian,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseMode {
    /// Independent corruption noise per sample.
    Fresh,
    /// One corruption draw per level, shared by every sample.
    Fixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TypicalityConfig {
    pub num_probes: usize,
    pub probe_kind: ProbeKind,
    pub epsilon: f64,
    pub noise_mode: NoiseMode,
    pub seed: u64,
    /// Multiply by `sign(Σ ŝᵢ)`. Disabling it is only meant for ablations.
    pub apply_sign: bool,
}

impl Default for TypicalityConfig {
    fn default() -> Self {
        TypicalityConfig {
            num_probes: 1,
            probe_kind: ProbeKind::Rademacher,
            epsilon: 1e-12,
            noise_mode: NoiseMode::Fresh,
            seed: 0,
            apply_sign: true,
        }
    }
}

impl TypicalityConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_probes == 0 {
            return Err(Error::invalid("num_probes", "must be at least 1"));
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::invalid("epsilon", "must be positive"));
        }
        Ok(())
    }
}

/// One evaluation of the statistic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TypicalityScore {
    /// `sign · score_norm_sq / (curvature + ε)`
    pub t_value: f64,
    pub score_norm_sq: f64,
    /// `κ̂ = −(Hutchinson estimate of Tr ∇ŝ)`
    pub curvature: f64,
    pub sign: f64,
    pub level: LevelSpec,
    pub probes_used: usize,
}

impl TypicalityScore {
    /// The ratio before sign correction.
    pub fn unsigned(&self) -> f64 {
        self.sign * self.t_value
    }
}

pub fn draw_probe(kind: ProbeKind, dim: usize, r: &mut impl Rng) -> Vec<f64> {
    match kind {
        ProbeKind::Rademacher => (0..dim)
            .map(|_| if r.random::<bool>() { 1.0 } else { -1.0 })
            .collect(),
        ProbeKind::Gaussian => (0..dim).map(|_| r.sample(StandardNormal)).collect(),
    }
}

/// Hutchinson estimate of `Tr ∇s` at `x_t`: the mean of `vᵀ(J v)` over
/// `cfg.num_probes` probes.
pub fn hutchinson_trace<M: ScoreModel + ?Sized>(
    model: &M,
    x_t: &[f64],
    level: &NoiseLevel,
    cfg: &TypicalityConfig,
    r: &mut impl Rng,
) -> Result<f64> {
    cfg.validate()?;
    check_dim(model.dim(), x_t.len())?;
    let mut acc = 0.0;
    for _ in 0..cfg.num_probes {
        let v = draw_probe(cfg.probe_kind, x_t.len(), r);
        let (_, jv) = model.jvp(x_t, level, &v)?;
        acc += v.iter().zip(&jv).map(|(a, b)| a * b).sum::<f64>();
    }
    Ok(acc / cfg.num_probes as f64)
}

/// `‖ŝ‖² / (−trace + ε)`. A negative curvature gives a negative ratio.
pub fn typicality_ratio(score_norm_sq: f64, trace_est: f64, epsilon: f64) -> f64 {
    score_norm_sq / (-trace_est + epsilon)
}

/// `sign(Σᵢ sᵢ)`, with +1 for an exactly zero sum.
pub fn sign_factor(score: &[f64]) -> f64 {
    let sum: f64 = score.iter().sum();
    if sum < 0.0 {
        -1.0
    } else {
        if sum == 0.0 {
            log::debug!("zero score sum, sign tie broken to +1");
        }
        1.0
    }
}

/// Content-derived key of a data point, used to pick its random sub-streams.
///
/// Keying on content rather than position makes batch results independent of
/// dataset order as well as of worker count. Identical points share draws.
pub fn sample_key(x0: &[f64]) -> u64 {
    let bytes: Vec<u8> = x0.iter().flat_map(|v| v.to_le_bytes()).collect();
    crate::fingerprint::fnv1a64(&bytes)
}

fn corruption_stream(cfg: &TypicalityConfig, level: LevelSpec, sample_key: u64) -> rng::StreamRng {
    match cfg.noise_mode {
        NoiseMode::Fresh => rng::stream(cfg.seed, &[streams::CORRUPT, level.key(), sample_key]),
        NoiseMode::Fixed => rng::stream(cfg.seed, &[streams::CORRUPT, level.key()]),
    }
}

/// Corrupts `x0` at `level` and assembles the signed statistic.
///
/// `x0` is a raw data point; it is mapped into the model's space first.
/// `sample_key` selects the per-sample random streams (see [`sample_key`]).
pub fn scoped_statistic<M: ScoreModel + ?Sized>(
    model: &M,
    x0: &[f64],
    level: LevelSpec,
    schedule: &NoiseSchedule,
    cfg: &TypicalityConfig,
    sample_key: u64,
) -> Result<TypicalityScore> {
    cfg.validate()?;
    check_dim(model.dim(), x0.len())?;
    let lvl = schedule.resolve(level)?;
    let z0 = model.to_model_space(x0);
    let mut cr = corruption_stream(cfg, level, sample_key);
    let eps: Vec<f64> = (0..z0.len()).map(|_| cr.sample(StandardNormal)).collect();
    let x_t = lvl.corrupt(&z0, &eps)?;

    let score = model.evaluate(&x_t, &lvl)?;
    let mut pr = rng::stream(cfg.seed, &[streams::PROBE, level.key(), sample_key]);
    let trace = hutchinson_trace(model, &x_t, &lvl, cfg, &mut pr)?;
    let score_norm_sq: f64 = score.iter().map(|v| v * v).sum();
    if !score_norm_sq.is_finite() || !trace.is_finite() {
        return Err(Error::NonFinite(format!(
            "sample {sample_key:016x} at level {level}: |s|^2={score_norm_sq}, trace={trace}"
        )));
    }
    let sign = if cfg.apply_sign { sign_factor(&score) } else { 1.0 };
    let curvature = -trace;
    Ok(TypicalityScore {
        t_value: sign * typicality_ratio(score_norm_sq, trace, cfg.epsilon),
        score_norm_sq,
        curvature,
        sign,
        level,
        probes_used: cfg.num_probes,
    })
}

/// Scores every `(sample, level)` pair. Outer index is the sample.
pub fn score_batch<M: ScoreModel + ?Sized>(
    model: &M,
    data: &Dataset,
    levels: &[LevelSpec],
    schedule: &NoiseSchedule,
    cfg: &TypicalityConfig,
    threads: Option<usize>,
) -> Result<Vec<Vec<Result<TypicalityScore>>>> {
    cfg.validate()?;
    check_dim(model.dim(), data.dim())?;
    for &l in levels {
        schedule.resolve(l)?;
    }
    crate::parallel::with_threads(threads, || {
        (0..data.len())
            .into_par_iter()
            .map(|i| {
                let x = data.row(i);
                let key = sample_key(x);
                levels
                    .iter()
                    .map(|&l| scoped_statistic(model, x, l, schedule, cfg, key))
                    .collect()
            })
            .collect()
    })
}

pub const BATCH_CSV_HEADER: &str = "sample_index,timestep,score_norm_sq,curvature,sign,t_value";

/// CSV rows for a batch; failed evaluations are written with `nan` fields.
pub fn batch_to_csv(batch: &[Vec<Result<TypicalityScore>>], levels: &[LevelSpec]) -> String {
    let mut s = String::from(BATCH_CSV_HEADER);
    s.push('\n');
    for (i, row) in batch.iter().enumerate() {
        for (res, level) in row.iter().zip(levels) {
            match res {
                Ok(t) => s.push_str(&format!(
                    "{i},{level},{},{},{},{}\n",
                    t.score_norm_sq, t.curvature, t.sign, t.t_value
                )),
                Err(_) => s.push_str(&format!("{i},{level},nan,nan,nan,nan\n")),
            }
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::score::{AnalyticGaussianScore, GmmScore};
    use proptest::prelude::*;

    #[test]
    fn rademacher_is_exact_for_isotropic_jacobian() {
        let g = AnalyticGaussianScore::standard(5);
        let mut r = rng::stream(1, &[]);
        for k in [1, 3, 8] {
            let cfg = TypicalityConfig { num_probes: k, ..Default::default() };
            let tr = hutchinson_trace(&g, &[0.3, 1.0, -2.0, 0.0, 4.0], &NoiseLevel::CLEAN, &cfg, &mut r).unwrap();
            assert_eq!(tr, -5.0);
        }
    }

    #[test]
    fn zero_probes_rejected() {
        let g = AnalyticGaussianScore::standard(2);
        let cfg = TypicalityConfig { num_probes: 0, ..Default::default() };
        let mut r = rng::stream(1, &[]);
        assert!(hutchinson_trace(&g, &[0.0, 0.0], &NoiseLevel::CLEAN, &cfg, &mut r).is_err());
        let cfg = TypicalityConfig { epsilon: 0.0, ..Default::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn gaussian_probe_mean_matches_exact_trace() {
        let m = GmmScore::new(
            vec![0.3, 0.3, 0.4],
            vec![vec![0.0, 0.0, 0.0], vec![1.5, -1.0, 0.5], vec![-1.0, 2.0, 1.0]],
            vec![0.5, 1.0, 0.7],
        )
        .unwrap();
        let x = [0.4, 0.3, 0.2];
        let exact: f64 = (0..3)
            .map(|i| {
                let mut e = vec![0.0; 3];
                e[i] = 1.0;
                m.jvp(&x, &NoiseLevel::CLEAN, &e).unwrap().1[i]
            })
            .sum();
        let cfg = TypicalityConfig {
            num_probes: 100_000,
            probe_kind: ProbeKind::Gaussian,
            ..Default::default()
        };
        let est = hutchinson_trace(&m, &x, &NoiseLevel::CLEAN, &cfg, &mut rng::stream(4, &[])).unwrap();
        assert!(((est - exact) / exact).abs() <= 0.02, "{est} vs {exact}");
    }

    #[test]
    fn ratio_cases() {
        assert_eq!(typicality_ratio(0.0, -3.0, 1e-12), 0.0);
        // Isotropic Gaussian on the shell: ‖x‖² = dσ².
        let (d, s2) = (10.0, 2.0);
        let norm_sq = d * s2 / (s2 * s2);
        let r = typicality_ratio(norm_sq, -d / s2, 1e-12);
        assert!((r - 1.0).abs() < 1e-12);
        assert!(typicality_ratio(4.0, 2.0, 1e-12) < 0.0);
    }

    #[test]
    fn sign_cases() {
        assert_eq!(sign_factor(&[1.0, -2.0]), -1.0);
        assert_eq!(sign_factor(&[0.0, 0.0]), 1.0);
        assert_eq!(sign_factor(&[]), 1.0);
    }

    #[test]
    fn fixed_noise_shares_corruption_and_is_deterministic() {
        let g = AnalyticGaussianScore::standard(8);
        let s = NoiseSchedule::default();
        let cfg = TypicalityConfig { noise_mode: NoiseMode::Fixed, seed: 17, ..Default::default() };
        let x0 = [0.1; 8];
        let a = scoped_statistic(&g, &x0, LevelSpec::Step(100), &s, &cfg, 3).unwrap();
        let b = scoped_statistic(&g, &x0, LevelSpec::Step(100), &s, &cfg, 3).unwrap();
        assert_eq!(a, b);
        let c = scoped_statistic(&g, &x0, LevelSpec::Step(100), &s, &cfg, 4).unwrap();
        assert_eq!(a.score_norm_sq, c.score_norm_sq);
        let fresh = TypicalityConfig { seed: 17, ..Default::default() };
        let d = scoped_statistic(&g, &x0, LevelSpec::Step(100), &s, &fresh, 3).unwrap();
        let e = scoped_statistic(&g, &x0, LevelSpec::Step(100), &s, &fresh, 4).unwrap();
        assert_ne!(d.score_norm_sq, e.score_norm_sq);
    }

    #[test]
    fn no_sign_leaves_unsigned_value() {
        let g = AnalyticGaussianScore::standard(4);
        let s = NoiseSchedule::default();
        let cfg = TypicalityConfig { apply_sign: false, ..Default::default() };
        for i in 0..20 {
            let t = scoped_statistic(&g, &[1.0, -1.0, 0.5, 0.2], LevelSpec::Step(10), &s, &cfg, i).unwrap();
            assert_eq!(t.sign, 1.0);
            assert!(t.t_value > 0.0);
        }
    }

    #[test]
    fn out_of_range_level_rejected() {
        let g = AnalyticGaussianScore::standard(2);
        let s = NoiseSchedule::default();
        let cfg = TypicalityConfig::default();
        assert!(scoped_statistic(&g, &[0.0, 0.0], LevelSpec::Step(0), &s, &cfg, 0).is_err());
        assert!(scoped_statistic(&g, &[0.0, 0.0], LevelSpec::Sigma(-1.0), &s, &cfg, 0).is_err());
        assert!(scoped_statistic(&g, &[0.0], LevelSpec::Step(1), &s, &cfg, 0).is_err());
    }

    proptest! {
        #[test]
        fn sign_flips_with_negation(v in prop::collection::vec(-10.0f64..10.0, 1..20)) {
            let neg: Vec<f64> = v.iter().map(|x| -x).collect();
            let sum: f64 = v.iter().sum();
            if sum != 0.0 {
                prop_assert_eq!(sign_factor(&neg), -sign_factor(&v));
            }
        }

        #[test]
        fn ratio_is_convention_invariant(
            s in prop::collection::vec(-20.0f64..20.0, 1..10),
            tr in -100.0f64..-0.1,
        ) {
            // Internal: s = +∇ log p, κ = −Tr ∇s. Alternative: s' = −s, κ' = +Tr ∇s'.
            let nsq: f64 = s.iter().map(|v| v * v).sum();
            let neg_nsq: f64 = s.iter().map(|v| (-v) * (-v)).sum();
            let tr_alt = -tr;
            let internal = typicality_ratio(nsq, tr, 1e-12);
            let alternative = neg_nsq / (tr_alt + 1e-12);
            prop_assert_eq!(internal, alternative);
        }
    }
}
