use std::path::Path;

use anyhow::{bail, Context, Result};
use scoped::calibration::{BandwidthRule, Variant};
use scoped::schedule::{
    LogNormalSigmaPrior, NoiseSchedule, DEFAULT_BETA_MAX, DEFAULT_BETA_MIN, DEFAULT_EARLY_STEP,
    DEFAULT_RETENTION, DEFAULT_STEPS,
};
use scoped::score::{Activation, DsmTrainConfig, MlpSpec, NoiseSampling, Parameterization};
use scoped::typicality::{NoiseMode, ProbeKind, TypicalityConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleBlock {
    #[serde(rename = "T")]
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleBlock {
    fn default() -> Self {
        ScheduleBlock {
            steps: DEFAULT_STEPS,
            beta_min: DEFAULT_BETA_MIN,
            beta_max: DEFAULT_BETA_MAX,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContinuousBlock {
    pub mu: f64,
    pub sigma_log: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelBlock {
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub parameterization: Parameterization,
    pub embed_freqs: usize,
}

impl Default for ModelBlock {
    fn default() -> Self {
        let s = MlpSpec::new(1);
        ModelBlock {
            widths: s.hidden,
            activation: s.activation,
            parameterization: s.parameterization,
            embed_freqs: s.embed_freqs,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainBlock {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub standardize: bool,
}

impl Default for TrainBlock {
    fn default() -> Self {
        let d = DsmTrainConfig::default();
        TrainBlock {
            epochs: d.epochs,
            batch_size: d.batch_size,
            learning_rate: d.learning_rate,
            standardize: d.standardize,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TypicalityBlock {
    pub probes: usize,
    pub probe_kind: ProbeKind,
    pub epsilon: f64,
    pub noise_mode: NoiseMode,
}

impl Default for TypicalityBlock {
    fn default() -> Self {
        let d = TypicalityConfig::default();
        TypicalityBlock {
            probes: d.num_probes,
            probe_kind: d.probe_kind,
            epsilon: d.epsilon,
            noise_mode: d.noise_mode,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationBlock {
    pub variant: Variant,
    /// Explicit steps; otherwise chosen from the signal-fraction curve.
    pub timesteps: Option<Vec<usize>>,
    /// Explicit noise levels for continuous schedules.
    pub sigmas: Option<Vec<f64>>,
    pub retention: f64,
    pub early_step: usize,
    pub bandwidth: BandwidthRule,
}

impl Default for CalibrationBlock {
    fn default() -> Self {
        CalibrationBlock {
            variant: Variant::Single,
            timesteps: None,
            sigmas: None,
            retention: DEFAULT_RETENTION,
            early_step: DEFAULT_EARLY_STEP,
            bandwidth: BandwidthRule::Silverman,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalBlock {
    pub alpha: Option<f64>,
    pub split_fraction: f64,
    pub ablate_timesteps: Vec<usize>,
}

impl Default for EvalBlock {
    fn default() -> Self {
        EvalBlock {
            alpha: None,
            split_fraction: 0.5,
            ablate_timesteps: vec![1, 10, 50, 100, 200, 300, 500],
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectConfig {
    pub seed: u64,
    pub threads: Option<usize>,
    pub schedule: Option<ScheduleBlock>,
    pub continuous: Option<ContinuousBlock>,
    pub model: ModelBlock,
    pub train: TrainBlock,
    pub typicality: TypicalityBlock,
    pub calibration: CalibrationBlock,
    pub eval: EvalBlock,
}

/// Parses `value` as JSON, falling back to a plain string.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .with_context(|| format!("override {assignment:?} is not key=value"))?;
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("override key {key:?} is malformed");
    }
    let mut node = root;
    for p in &parts[..parts.len() - 1] {
        let obj = node
            .as_object_mut()
            .with_context(|| format!("override {key:?} descends into a non-object"))?;
        node = obj
            .entry(p.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
        if node.is_null() {
            *node = Value::Object(Default::default());
        }
    }
    node.as_object_mut()
        .with_context(|| format!("override {key:?} descends into a non-object"))?
        .insert(parts[parts.len() - 1].to_string(), parse_value(raw));
    Ok(())
}

impl ProjectConfig {
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut root = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => Value::Object(Default::default()),
        };
        for o in overrides {
            apply_override(&mut root, o)?;
        }
        let cfg: ProjectConfig = serde_json::from_value(root).context("invalid config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        if self.schedule.is_some() && self.continuous.is_some() {
            bail!("config sets both `schedule` and `continuous`; choose one");
        }
        if self.threads == Some(0) {
            bail!("threads must be positive");
        }
        if !(self.eval.split_fraction > 0.0 && self.eval.split_fraction < 1.0) {
            bail!("eval.split_fraction must lie in (0, 1)");
        }
        self.typicality().validate()?;
        if let Some(c) = &self.continuous {
            LogNormalSigmaPrior::new(c.mu, c.sigma_log)?;
        }
        Ok(())
    }

    /// Discrete schedule; continuous configs keep the default one for
    /// fingerprinting.
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        let b = self.schedule.clone().unwrap_or_default();
        Ok(NoiseSchedule::linear(b.steps, b.beta_min, b.beta_max)?)
    }

    pub fn prior(&self) -> Option<LogNormalSigmaPrior> {
        self.continuous
            .as_ref()
            .map(|c| LogNormalSigmaPrior { mu: c.mu, sigma_log: c.sigma_log })
    }

    pub fn mlp_spec(&self, dim: usize) -> MlpSpec {
        MlpSpec {
            dim,
            hidden: self.model.widths.clone(),
            activation: self.model.activation,
            embed_freqs: self.model.embed_freqs,
            parameterization: self.model.parameterization,
        }
    }

    pub fn train_config(&self) -> DsmTrainConfig {
        DsmTrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            learning_rate: self.train.learning_rate,
            noise: match &self.continuous {
                Some(c) => NoiseSampling::LogNormal { mu: c.mu, sigma_log: c.sigma_log },
                None => NoiseSampling::UniformSteps,
            },
            seed: self.seed,
            standardize: self.train.standardize,
        }
    }

    pub fn typicality(&self) -> TypicalityConfig {
        TypicalityConfig {
            num_probes: self.typicality.probes,
            probe_kind: self.typicality.probe_kind,
            epsilon: self.typicality.epsilon,
            noise_mode: self.typicality.noise_mode,
            seed: self.seed,
            apply_sign: true,
        }
    }

    /// `SCOPED_THREADS` wins over the config value.
    pub fn threads(&self) -> Result<Option<usize>> {
        match std::env::var("SCOPED_THREADS") {
            Ok(v) => {
                let n: usize = v.trim().parse().with_context(|| format!("SCOPED_THREADS={v:?} is not a count"))?;
                if n == 0 {
                    bail!("SCOPED_THREADS must be positive");
                }
                Ok(Some(n))
            }
            Err(_) => Ok(self.threads),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_create_and_replace() {
        let cfg = ProjectConfig::load(
            None,
            &[
                "seed=5".into(),
                "schedule.T=50".into(),
                "calibration.variant=two-step".into(),
                "model.widths=[8,8]".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.schedule.unwrap().steps, 50);
        assert_eq!(cfg.calibration.variant, Variant::TwoStep);
        assert_eq!(cfg.model.widths, vec![8, 8]);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(ProjectConfig::load(None, &["sed=1".into()]).is_err());
        assert!(ProjectConfig::load(None, &["noequals".into()]).is_err());
        assert!(ProjectConfig::load(None, &["continuous.mu=0".into(), "continuous.sigma_log=1".into(), "schedule.T=10".into()]).is_err());
        assert!(ProjectConfig::load(None, &["typicality.probes=0".into()]).is_err());
        assert!(ProjectConfig::load(None, &["seed.x=1".into()]).is_err());
    }

    #[test]
    fn continuous_block_selects_lognormal_training() {
        let cfg = ProjectConfig::load(None, &["continuous.mu=-1.2".into(), "continuous.sigma_log=1.2".into()]).unwrap();
        assert!(matches!(cfg.train_config().noise, NoiseSampling::LogNormal { .. }));
        assert!((cfg.prior().unwrap().mode() - (-1.2f64 - 1.44).exp()).abs() < 1e-15);
    }
}
