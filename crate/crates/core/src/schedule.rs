//! Discrete DDPM noise schedules, continuous σ levels, the forward corruption
//! map and offline noise-level selection.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{check_dim, Error, Result};

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_BETA_MIN: f64 = 1e-4;
pub const DEFAULT_BETA_MAX: f64 = 0.02;
pub const DEFAULT_RETENTION: f64 = 0.95;
pub const DEFAULT_EARLY_STEP: usize = 1;

/// Variance-preserving discrete schedule. Steps are 1-based.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigmas: Vec<f64>,
}

impl NoiseSchedule {
    /// Linearly spaced betas from `beta_min` to `beta_max`, both inclusive.
    pub fn linear(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("steps", "must be at least 1"));
        }
        if !(beta_min.is_finite() && beta_max.is_finite()) {
            return Err(Error::invalid("beta", "bounds must be finite"));
        }
        if !(0.0 < beta_min && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::invalid(
                "beta",
                format!("need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"),
            ));
        }
        let betas = if steps == 1 {
            vec![beta_min]
        } else {
            let span = beta_max - beta_min;
            (0..steps)
                .map(|i| beta_min + span * i as f64 / (steps - 1) as f64)
                .collect()
        };
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Empty("betas"));
        }
        if let Some(b) = betas.iter().find(|b| !(b.is_finite() && **b > 0.0 && **b < 1.0)) {
            return Err(Error::invalid("betas", format!("{b} is outside (0, 1)")));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut sigmas = Vec::with_capacity(betas.len());
        let mut prod = 1.0;
        // log ᾱ accumulated separately so 1 − ᾱ keeps its digits at small t.
        let mut log_ab = 0.0;
        for &b in &betas {
            prod *= 1.0 - b;
            log_ab += (-b).ln_1p();
            alpha_bars.push(prod);
            sigmas.push((-log_ab.exp_m1()).sqrt());
        }
        let strictly = |v: &[f64], inc: bool| {
            v.windows(2)
                .all(|w| if inc { w[0] < w[1] } else { w[0] > w[1] })
        };
        if !strictly(&alpha_bars, false) || !strictly(&sigmas, true) {
            return Err(Error::invalid(
                "betas",
                "schedule is not strictly monotone in double precision",
            ));
        }
        Ok(NoiseSchedule {
            betas,
            alpha_bars,
            sigmas,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            Err(Error::StepOutOfRange {
                step: t,
                max: self.steps(),
            })
        } else {
            Ok(())
        }
    }

    pub fn level(&self, t: usize) -> Result<NoiseLevel> {
        self.check_step(t)?;
        Ok(NoiseLevel {
            alpha_bar: self.alpha_bars[t - 1],
            sigma: self.sigmas[t - 1],
        })
    }

    pub fn resolve(&self, spec: LevelSpec) -> Result<NoiseLevel> {
        match spec {
            LevelSpec::Step(t) => self.level(t),
            LevelSpec::Sigma(s) => NoiseLevel::continuous(s),
        }
    }

    /// `sqrt(ᾱ_t)·x0 + σ_t·eps`
    pub fn corrupt(&self, x0: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>> {
        self.level(t)?.corrupt(x0, eps)
    }

    /// Canonical byte encoding, used for fingerprinting.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 8 * self.steps());
        out.extend_from_slice(b"SSCH");
        out.extend_from_slice(&(self.steps() as u64).to_le_bytes());
        for b in &self.betas {
            out.extend_from_slice(&b.to_le_bytes());
        }
        out
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule::linear(DEFAULT_STEPS, DEFAULT_BETA_MIN, DEFAULT_BETA_MAX)
            .expect("default schedule is valid")
    }
}

/// A concrete noise level: `x_t = sqrt(alpha_bar)·x0 + sigma·ε`.
///
/// A raw continuous σ is treated as a pseudo-step with `alpha_bar = 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseLevel {
    pub alpha_bar: f64,
    pub sigma: f64,
}

impl NoiseLevel {
    /// Uncorrupted data (σ = 0). Only analytic models accept it.
    pub const CLEAN: NoiseLevel = NoiseLevel {
        alpha_bar: 1.0,
        sigma: 0.0,
    };

    pub fn continuous(sigma: f64) -> Result<Self> {
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::invalid("sigma", format!("{sigma} must be positive")));
        }
        Ok(NoiseLevel {
            alpha_bar: 1.0,
            sigma,
        })
    }

    pub fn corrupt(&self, x0: &[f64], eps: &[f64]) -> Result<Vec<f64>> {
        check_dim(x0.len(), eps.len())?;
        let a = self.alpha_bar.sqrt();
        Ok(x0
            .iter()
            .zip(eps)
            .map(|(&x, &e)| a * x + self.sigma * e)
            .collect())
    }
}

/// Where on the noise axis a statistic is evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LevelSpec {
    Step(usize),
    Sigma(f64),
}

impl LevelSpec {
    /// Stable integer key for RNG stream derivation.
    pub fn key(&self) -> u64 {
        match *self {
            LevelSpec::Step(t) => t as u64,
            LevelSpec::Sigma(s) => s.to_bits() ^ (1 << 63),
        }
    }
}

impl std::fmt::Display for LevelSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LevelSpec::Step(t) => write!(f, "{t}"),
            LevelSpec::Sigma(s) => write!(f, "sigma={s}"),
        }
    }
}

/// Log-normal prior over continuous noise scales.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogNormalSigmaPrior {
    pub mu: f64,
    pub sigma_log: f64,
}

impl LogNormalSigmaPrior {
    pub fn new(mu: f64, sigma_log: f64) -> Result<Self> {
        if !mu.is_finite() {
            return Err(Error::invalid("mu", "must be finite"));
        }
        if !(sigma_log.is_finite() && sigma_log > 0.0) {
            return Err(Error::invalid("sigma_log", "must be positive"));
        }
        Ok(LogNormalSigmaPrior { mu, sigma_log })
    }

    pub fn mode(&self) -> f64 {
        sigma_mode(self)
    }
}

/// Mode of the log-normal prior, `exp(μ − σ_log²)`.
pub fn sigma_mode(prior: &LogNormalSigmaPrior) -> f64 {
    (prior.mu - prior.sigma_log * prior.sigma_log).exp()
}

/// Fraction of total energy carried by the scaled clean signal, per step.
#[derive(Clone, Debug, PartialEq)]
pub struct SnrCurve {
    pub timesteps: Vec<usize>,
    pub fractions: Vec<f64>,
}

impl SnrCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,fraction\n");
        for (t, f) in self.timesteps.iter().zip(&self.fractions) {
            s.push_str(&format!("{t},{f}\n"));
        }
        s
    }
}

/// `E_clean / (E_clean + E_noise)` where `E_clean = ᾱ·mean‖x0‖²` and
/// `E_noise = σ²·d`. Zero noise energy gives exactly 1.
pub fn signal_fraction(mean_sq_norm: f64, dim: usize, level: &NoiseLevel) -> f64 {
    let noise = level.sigma * level.sigma * dim as f64;
    if noise == 0.0 {
        return 1.0;
    }
    let clean = level.alpha_bar * mean_sq_norm;
    clean / (clean + noise)
}

pub fn snr_curve(dataset: &Dataset, schedule: &NoiseSchedule, timesteps: &[usize]) -> Result<SnrCurve> {
    if dataset.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let mean_sq = dataset.rows().map(|r| r.iter().map(|v| v * v).sum::<f64>()).sum::<f64>()
        / dataset.len() as f64;
    let mut fractions = Vec::with_capacity(timesteps.len());
    for &t in timesteps {
        fractions.push(signal_fraction(mean_sq, dataset.dim(), &schedule.level(t)?));
    }
    Ok(SnrCurve {
        timesteps: timesteps.to_vec(),
        fractions,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepSelection {
    pub step: usize,
    /// No step met the retention target; `step` is the earliest one.
    pub fallback: bool,
}

/// Largest step whose signal fraction is at least `retention`.
pub fn select_mid_step(curve: &SnrCurve, retention: f64) -> Result<StepSelection> {
    if curve.timesteps.is_empty() {
        return Err(Error::Empty("snr curve"));
    }
    if !(retention > 0.0 && retention < 1.0) {
        return Err(Error::invalid("retention", "must lie in (0, 1)"));
    }
    let best = curve
        .timesteps
        .iter()
        .zip(&curve.fractions)
        .filter(|(_, &f)| f >= retention)
        .map(|(&t, _)| t)
        .max();
    match best {
        Some(step) => Ok(StepSelection {
            step,
            fallback: false,
        }),
        None => {
            let step = *curve.timesteps.iter().min().expect("non-empty");
            log::warn!("no step retains {retention} of the signal; falling back to step {step}");
            Ok(StepSelection {
                step,
                fallback: true,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_step_closed_form() {
        let s = NoiseSchedule::linear(1, 0.5, 0.5).unwrap();
        assert_eq!(s.betas(), &[0.5]);
        assert_eq!(s.alpha_bars(), &[0.5]);
        assert!((s.sigmas()[0] - 0.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn default_first_sigma() {
        let s = NoiseSchedule::default();
        assert_eq!(s.steps(), 1000);
        assert!((s.sigma_at(1) - 0.01).abs() < 1e-15);
        assert_eq!(s.betas()[999], 0.02);
    }

    impl NoiseSchedule {
        fn sigma_at(&self, t: usize) -> f64 {
            self.level(t).unwrap().sigma
        }
    }

    #[test]
    fn rejects_bad_bounds() {
        assert!(NoiseSchedule::linear(0, 1e-4, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.03, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 1e-4, 1.0).is_err());
        assert!(NoiseSchedule::linear(10, f64::NAN, 0.02).is_err());
        assert!(NoiseSchedule::from_betas(vec![]).is_err());
    }

    #[test]
    fn corrupt_branches_and_range() {
        let s = NoiseSchedule::default();
        let lvl = s.level(300).unwrap();
        let x0 = [1.0, -2.0, 0.5];
        let xt = s.corrupt(&x0, 300, &[0.0; 3]).unwrap();
        for (a, b) in xt.iter().zip(&x0) {
            assert_eq!(*a, lvl.alpha_bar.sqrt() * b);
        }
        let eps = [0.3, 0.1, -0.7];
        let xt = s.corrupt(&[0.0; 3], 300, &eps).unwrap();
        for (a, e) in xt.iter().zip(&eps) {
            assert_eq!(*a, lvl.sigma * e);
        }
        assert!(matches!(
            s.corrupt(&x0, 0, &eps),
            Err(Error::StepOutOfRange { .. })
        ));
        assert!(matches!(
            s.corrupt(&x0, 1001, &eps),
            Err(Error::StepOutOfRange { .. })
        ));
        assert!(matches!(
            s.corrupt(&x0, 3, &[0.0; 2]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn sigma_mode_values() {
        let p = LogNormalSigmaPrior::new(0.0, 1e-9).unwrap();
        assert!((sigma_mode(&p) - 1.0).abs() < 1e-12);
        let p = LogNormalSigmaPrior::new(-1.2, 1.2).unwrap();
        assert!((sigma_mode(&p) - (-2.64f64).exp()).abs() < 1e-15);
        let p = LogNormalSigmaPrior::new(0.0, 1.0).unwrap();
        assert!((sigma_mode(&p) - 0.36787944117144233).abs() < 1e-15);
        assert!(LogNormalSigmaPrior::new(0.0, 0.0).is_err());
    }

    #[test]
    fn signal_fraction_zero_noise_is_one() {
        assert_eq!(signal_fraction(3.7, 5, &NoiseLevel::CLEAN), 1.0);
        assert_eq!(signal_fraction(0.0, 5, &NoiseLevel::CLEAN), 1.0);
    }

    #[test]
    fn mid_step_scan() {
        let c = SnrCurve {
            timesteps: vec![1, 2, 3],
            fractions: vec![1.0, 0.97, 0.94],
        };
        assert_eq!(
            select_mid_step(&c, 0.95).unwrap(),
            StepSelection { step: 2, fallback: false }
        );
        let c = SnrCurve {
            timesteps: vec![5, 6],
            fractions: vec![0.99, 0.98],
        };
        assert_eq!(
            select_mid_step(&c, 0.999).unwrap(),
            StepSelection { step: 5, fallback: true }
        );
        assert!(select_mid_step(&c, 1.0).is_err());
        let empty = SnrCurve { timesteps: vec![], fractions: vec![] };
        assert!(select_mid_step(&empty, 0.5).is_err());
    }

    #[test]
    fn snr_rejects_empty_dataset() {
        let d = Dataset::new(3, vec![]).unwrap();
        assert!(matches!(
            snr_curve(&d, &NoiseSchedule::default(), &[1]),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn csv_export() {
        let c = SnrCurve {
            timesteps: vec![1, 2],
            fractions: vec![1.0, 0.5],
        };
        assert_eq!(c.to_csv(), "t,fraction\n1,1\n2,0.5\n");
    }

    proptest! {
        #[test]
        fn random_schedules_are_monotone(betas in prop::collection::vec(1e-6f64..0.02, 1..200)) {
            let s = NoiseSchedule::from_betas(betas).unwrap();
            prop_assert!(s.alpha_bars().windows(2).all(|w| w[0] > w[1]));
            prop_assert!(s.sigmas().windows(2).all(|w| w[0] < w[1]));
            prop_assert!(*s.sigmas().last().unwrap() < 1.0);
        }

        #[test]
        fn corrupt_is_homogeneous(
            x0 in prop::collection::vec(-5.0f64..5.0, 4),
            eps in prop::collection::vec(-3.0f64..3.0, 4),
            a in -4.0f64..4.0,
            t in 1usize..=1000,
        ) {
            let s = NoiseSchedule::default();
            let base = s.corrupt(&x0, t, &eps).unwrap();
            let sx: Vec<f64> = x0.iter().map(|v| a * v).collect();
            let se: Vec<f64> = eps.iter().map(|v| a * v).collect();
            let scaled = s.corrupt(&sx, t, &se).unwrap();
            for (p, q) in scaled.iter().zip(&base) {
                prop_assert!((p - a * q).abs() <= 1e-12 * (1.0 + q.abs() * a.abs()));
            }
        }
    }
}
