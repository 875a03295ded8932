//! KDE calibration of typicality values into anomaly scores.
//!
//! For each calibrated noise level a Gaussian KDE `h` is fitted on the signed
//! in-distribution `T` values; the anomaly score of a query is `−log h(T)`,
//! floored so that points far outside the support stay finite. The two-step
//! variant takes the maximum over its two levels.
//!
//! `SCAL` artifact layout (little-endian):
//!
//! ```text
//! "SCAL" | version u32 | variant u8 | n_levels u32
//! | n_levels × (kind u8, value u64)            kind 0 = step, 1 = σ bits
//! | n_levels × (bandwidth f64, log_floor f64, count u64, count × f64)
//! | probes u32 | probe kind u8 | ε f64 | noise mode u8 | seed u64 | sign u8
//! | model fingerprint u64 | schedule fingerprint u64
//! | count u64 | count × f64                    calibration-set scores
//! ```
//!
//! Fingerprints are FNV-1a 64 over the model's `SCPD` bytes and the schedule's
//! canonical bytes.

use std::f64::consts::PI;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{check_dim, Error, Result};
use crate::fingerprint::fnv1a64;
use crate::schedule::{LevelSpec, NoiseSchedule};
use crate::score::io::Reader;
use crate::score::ScoreModel;
use crate::typicality::{
    sample_key, scoped_statistic, NoiseMode, ProbeKind, TypicalityConfig, TypicalityScore,
};

pub const SCAL_MAGIC: &[u8; 4] = b"SCAL";
pub const SCAL_VERSION: u32 = 1;
/// `ln(1e-300)`
pub const DEFAULT_LOG_FLOOR: f64 = -690.7755278982137;
/// Largest share of non-finite statistics tolerated during calibration.
pub const MAX_FAILURE_FRACTION: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BandwidthRule {
    /// `0.9 · min(sd, IQR/1.34) · n^(−1/5)`
    Silverman,
    /// `1.06 · sd · n^(−1/5)`
    Scott,
    Fixed(f64),
}

/// One-dimensional Gaussian KDE. Points are kept sorted.
#[derive(Clone, Debug, PartialEq)]
pub struct KdeModel {
    points: Vec<f64>,
    bandwidth: f64,
    log_floor: f64,
}

/// Type-7 quantile (linear interpolation between order statistics) of
/// already sorted values.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn sorted_copy(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

fn sample_sd(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

pub fn fit_kde(values: &[f64], rule: BandwidthRule) -> Result<KdeModel> {
    if values.len() < 2 {
        return Err(Error::invalid("values", "KDE needs at least two points"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("KDE input".into()));
    }
    let points = sorted_copy(values);
    let n = points.len() as f64;
    let sd = sample_sd(&points);
    let bw = match rule {
        BandwidthRule::Fixed(b) => {
            if !(b.is_finite() && b > 0.0) {
                return Err(Error::invalid("bandwidth", "must be positive"));
            }
            b
        }
        BandwidthRule::Silverman => {
            let iqr = quantile_sorted(&points, 0.75) - quantile_sorted(&points, 0.25);
            let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
            0.9 * spread * n.powf(-0.2)
        }
        BandwidthRule::Scott => 1.06 * sd * n.powf(-0.2),
    };
    let bandwidth = if bw > 0.0 && bw.is_finite() {
        bw
    } else {
        let scale = points.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        let fallback = 1e-3 * scale;
        log::warn!("degenerate KDE input; using fixed bandwidth {fallback}");
        fallback
    };
    Ok(KdeModel {
        points,
        bandwidth,
        log_floor: DEFAULT_LOG_FLOOR,
    })
}

impl KdeModel {
    pub fn new(points: Vec<f64>, bandwidth: f64, log_floor: f64) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::invalid("points", "KDE needs at least two points"));
        }
        if !(bandwidth.is_finite() && bandwidth > 0.0) {
            return Err(Error::invalid("bandwidth", "must be positive"));
        }
        if points.iter().any(|p| !p.is_finite()) || !log_floor.is_finite() {
            return Err(Error::NonFinite("KDE parameters".into()));
        }
        Ok(KdeModel {
            points: sorted_copy(&points),
            bandwidth,
            log_floor,
        })
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn log_floor(&self) -> f64 {
        self.log_floor
    }

    pub fn median(&self) -> f64 {
        quantile_sorted(&self.points, 0.5)
    }

    /// Unfloored log-density, via log-sum-exp over kernels.
    pub fn log_density(&self, x: f64) -> f64 {
        let h = self.bandwidth;
        let max = self
            .points
            .iter()
            .map(|p| -0.5 * ((x - p) / h).powi(2))
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY || max.is_nan() {
            return f64::NEG_INFINITY;
        }
        let sum: f64 = self
            .points
            .iter()
            .map(|p| (-0.5 * ((x - p) / h).powi(2) - max).exp())
            .sum();
        max + sum.ln() - (self.points.len() as f64).ln() - (h * (2.0 * PI).sqrt()).ln()
    }

    pub fn density(&self, x: f64) -> f64 {
        self.log_density(x).exp()
    }

    /// `−log h(x)`, capped at `−log_floor`.
    pub fn nll(&self, x: f64) -> f64 {
        (-self.log_density(x)).min(-self.log_floor)
    }

    pub fn is_floored(&self, nll: f64) -> bool {
        nll >= -self.log_floor
    }
}

pub fn kde_nll(kde: &KdeModel, value: f64) -> f64 {
    kde.nll(value)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Single,
    TwoStep,
    /// A single level picked with hindsight from a per-level AUROC sweep.
    Oracle,
}

impl Variant {
    fn tag(self) -> u8 {
        match self {
            Variant::Single => 0,
            Variant::TwoStep => 1,
            Variant::Oracle => 2,
        }
    }

    fn from_tag(t: u8) -> Result<Self> {
        Ok(match t {
            0 => Variant::Single,
            1 => Variant::TwoStep,
            2 => Variant::Oracle,
            _ => return Err(Error::format("SCAL", format!("unknown variant {t}"))),
        })
    }

    pub fn expected_levels(self) -> usize {
        match self {
            Variant::TwoStep => 2,
            Variant::Single | Variant::Oracle => 1,
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Single => "single",
            Variant::TwoStep => "two-step",
            Variant::Oracle => "oracle",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationArtifact {
    pub variant: Variant,
    pub levels: Vec<LevelSpec>,
    pub kdes: Vec<KdeModel>,
    pub config: TypicalityConfig,
    pub model_fingerprint: u64,
    pub schedule_fingerprint: u64,
    /// Anomaly scores of the calibration samples themselves, used to set
    /// quantile thresholds.
    pub calibration_scores: Vec<f64>,
}

pub fn model_fingerprint<M: ScoreModel + ?Sized>(model: &M) -> u64 {
    fnv1a64(&model.to_bytes())
}

pub fn schedule_fingerprint(schedule: &NoiseSchedule) -> u64 {
    fnv1a64(&schedule.to_bytes())
}

impl CalibrationArtifact {
    pub fn check_fingerprints<M: ScoreModel + ?Sized>(&self, model: &M, schedule: &NoiseSchedule) -> Result<()> {
        let m = model_fingerprint(model);
        if m != self.model_fingerprint {
            return Err(Error::FingerprintMismatch(format!(
                "model {m:016x} != calibrated {:016x}",
                self.model_fingerprint
            )));
        }
        let s = schedule_fingerprint(schedule);
        if s != self.schedule_fingerprint {
            return Err(Error::FingerprintMismatch(format!(
                "schedule {s:016x} != calibrated {:016x}",
                self.schedule_fingerprint
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(SCAL_MAGIC);
        out.extend_from_slice(&SCAL_VERSION.to_le_bytes());
        out.push(self.variant.tag());
        out.extend_from_slice(&(self.levels.len() as u32).to_le_bytes());
        for l in &self.levels {
            let (kind, value) = match *l {
                LevelSpec::Step(t) => (0u8, t as u64),
                LevelSpec::Sigma(s) => (1u8, s.to_bits()),
            };
            out.push(kind);
            out.extend_from_slice(&value.to_le_bytes());
        }
        for k in &self.kdes {
            out.extend_from_slice(&k.bandwidth.to_le_bytes());
            out.extend_from_slice(&k.log_floor.to_le_bytes());
            out.extend_from_slice(&(k.points.len() as u64).to_le_bytes());
            for p in &k.points {
                out.extend_from_slice(&p.to_le_bytes());
            }
        }
        let c = &self.config;
        out.extend_from_slice(&(c.num_probes as u32).to_le_bytes());
        out.push(match c.probe_kind {
            ProbeKind::Rademacher => 0,
            ProbeKind::Gaussian => 1,
        });
        out.extend_from_slice(&c.epsilon.to_le_bytes());
        out.push(match c.noise_mode {
            NoiseMode::Fresh => 0,
            NoiseMode::Fixed => 1,
        });
        out.extend_from_slice(&c.seed.to_le_bytes());
        out.push(c.apply_sign as u8);
        out.extend_from_slice(&self.model_fingerprint.to_le_bytes());
        out.extend_from_slice(&self.schedule_fingerprint.to_le_bytes());
        out.extend_from_slice(&(self.calibration_scores.len() as u64).to_le_bytes());
        for v in &self.calibration_scores {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "SCAL");
        if r.take(4)? != SCAL_MAGIC {
            return Err(Error::format("SCAL", "bad magic"));
        }
        let version = r.u32()?;
        if version != SCAL_VERSION {
            return Err(Error::format("SCAL", format!("unsupported version {version}")));
        }
        let variant = Variant::from_tag(r.u8()?)?;
        let n = r.u32()? as usize;
        if n != variant.expected_levels() {
            return Err(Error::format("SCAL", format!("{variant} artifact with {n} levels")));
        }
        let mut levels = Vec::with_capacity(n);
        for _ in 0..n {
            let kind = r.u8()?;
            let value = r.u64()?;
            levels.push(match kind {
                0 => LevelSpec::Step(value as usize),
                1 => LevelSpec::Sigma(f64::from_bits(value)),
                k => return Err(Error::format("SCAL", format!("unknown level kind {k}"))),
            });
        }
        let mut kdes = Vec::with_capacity(n);
        for _ in 0..n {
            let bandwidth = r.f64()?;
            let log_floor = r.f64()?;
            let count = r.u64()? as usize;
            let points = r.f64s(count)?;
            kdes.push(KdeModel::new(points, bandwidth, log_floor)?);
        }
        let num_probes = r.u32()? as usize;
        let probe_kind = match r.u8()? {
            0 => ProbeKind::Rademacher,
            1 => ProbeKind::Gaussian,
            k => return Err(Error::format("SCAL", format!("unknown probe kind {k}"))),
        };
        let epsilon = r.f64()?;
        let noise_mode = match r.u8()? {
            0 => NoiseMode::Fresh,
            1 => NoiseMode::Fixed,
            k => return Err(Error::format("SCAL", format!("unknown noise mode {k}"))),
        };
        let seed = r.u64()?;
        let apply_sign = r.u8()? != 0;
        let model_fingerprint = r.u64()?;
        let schedule_fingerprint = r.u64()?;
        let count = r.u64()? as usize;
        let calibration_scores = r.f64s(count)?;
        r.finish()?;
        let config = TypicalityConfig {
            num_probes,
            probe_kind,
            epsilon,
            noise_mode,
            seed,
            apply_sign,
        };
        config.validate()?;
        Ok(CalibrationArtifact {
            variant,
            levels,
            kdes,
            config,
            model_fingerprint,
            schedule_fingerprint,
            calibration_scores,
        })
    }

    /// Threshold at the `(1 − α)` quantile of the calibration scores.
    pub fn threshold(&self, alpha: f64) -> Result<f64> {
        threshold_from_quantile(&self.calibration_scores, alpha)
    }

    pub fn load(path: &Path) -> Result<Self> {
        CalibrationArtifact::from_bytes(&std::fs::read(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }
}

/// Result of [`calibrate`] plus its diagnostics.
#[derive(Clone, Debug)]
pub struct Calibration {
    pub artifact: CalibrationArtifact,
    /// Signed ID statistics per level, in dataset order (failures dropped).
    pub t_values: Vec<Vec<f64>>,
    pub failures: usize,
    /// Evaluations whose curvature estimate was not positive.
    pub nonpositive_curvature: usize,
}

#[derive(Clone, Debug)]
pub struct CalibrateOptions {
    pub variant: Variant,
    pub bandwidth: BandwidthRule,
    pub threads: Option<usize>,
}

impl Default for CalibrateOptions {
    fn default() -> Self {
        CalibrateOptions {
            variant: Variant::Single,
            bandwidth: BandwidthRule::Silverman,
            threads: None,
        }
    }
}

/// Evaluates the statistic on every `(sample, level)` of the ID data and
/// fits one KDE per level.
pub fn calibrate<M: ScoreModel + ?Sized>(
    model: &M,
    id_dataset: &Dataset,
    levels: &[LevelSpec],
    schedule: &NoiseSchedule,
    cfg: &TypicalityConfig,
    opts: &CalibrateOptions,
) -> Result<Calibration> {
    if id_dataset.is_empty() {
        return Err(Error::Empty("calibration dataset"));
    }
    if levels.len() != opts.variant.expected_levels() {
        return Err(Error::invalid(
            "levels",
            format!(
                "{} variant needs {} level(s), got {}",
                opts.variant,
                opts.variant.expected_levels(),
                levels.len()
            ),
        ));
    }
    let batch = crate::typicality::score_batch(model, id_dataset, levels, schedule, cfg, opts.threads)?;
    let total = batch.len() * levels.len();
    let mut t_values = vec![Vec::with_capacity(batch.len()); levels.len()];
    let mut failures = 0;
    let mut nonpositive = 0;
    for row in &batch {
        for (j, res) in row.iter().enumerate() {
            match res {
                Ok(t) => {
                    if t.curvature <= 0.0 {
                        nonpositive += 1;
                    }
                    t_values[j].push(t.t_value);
                }
                Err(Error::NonFinite(msg)) => {
                    log::debug!("calibration failure: {msg}");
                    failures += 1;
                }
                Err(e) => return Err(Error::invalid("calibration", e.to_string())),
            }
        }
    }
    if failures as f64 > MAX_FAILURE_FRACTION * total as f64 {
        return Err(Error::NonFinite(format!(
            "{failures} of {total} calibration statistics are non-finite"
        )));
    }
    if failures > 0 {
        log::warn!("excluded {failures} non-finite calibration statistics");
    }
    if nonpositive > 0 {
        log::warn!("{nonpositive} calibration evaluations had non-positive curvature");
    }
    let kdes = t_values
        .iter()
        .map(|v| fit_kde(v, opts.bandwidth))
        .collect::<Result<Vec<_>>>()?;
    let calibration_scores = batch
        .iter()
        .filter_map(|row| {
            let nlls = row
                .iter()
                .zip(&kdes)
                .map(|(r, k)| r.as_ref().ok().map(|t| k.nll(t.t_value)))
                .collect::<Option<Vec<f64>>>()?;
            aggregate(&nlls).map(|(_, v)| v)
        })
        .collect();
    Ok(Calibration {
        artifact: CalibrationArtifact {
            variant: opts.variant,
            levels: levels.to_vec(),
            kdes,
            config: cfg.clone(),
            model_fingerprint: model_fingerprint(model),
            schedule_fingerprint: schedule_fingerprint(schedule),
            calibration_scores,
        },
        t_values,
        failures,
        nonpositive_curvature: nonpositive,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnomalyScore {
    /// NLL in nats; the maximum over levels for the two-step variant.
    pub value: f64,
    pub per_level: Vec<(LevelSpec, f64)>,
    pub statistics: Vec<TypicalityScore>,
    /// The deciding NLL sits at the floor.
    pub floored: bool,
    /// Secondary ranking key among floored scores: `|T − median(ID T)|` at
    /// the deciding level; 0 when not floored.
    pub tiebreak: f64,
    pub verdict: Option<bool>,
}

impl AnomalyScore {
    pub fn with_threshold(mut self, cutoff: f64) -> Self {
        self.verdict = Some(self.value > cutoff);
        self
    }

    /// `(value, tiebreak)`, compared lexicographically when ranking.
    pub fn rank_key(&self) -> (f64, f64) {
        (self.value, self.tiebreak)
    }
}

/// Combines per-level NLLs: the exact maximum, first level winning ties.
pub fn aggregate(per_level: &[f64]) -> Option<(usize, f64)> {
    per_level
        .iter()
        .copied()
        .enumerate()
        .fold(None, |best, (i, v)| match best {
            Some((_, b)) if b >= v => best,
            _ => Some((i, v)),
        })
}

pub fn anomaly_score<M: ScoreModel + ?Sized>(
    artifact: &CalibrationArtifact,
    model: &M,
    x0: &[f64],
    schedule: &NoiseSchedule,
    cfg: &TypicalityConfig,
    sample_key: u64,
) -> Result<AnomalyScore> {
    artifact.check_fingerprints(model, schedule)?;
    score_unchecked(artifact, model, x0, schedule, cfg, sample_key)
}

fn score_unchecked<M: ScoreModel + ?Sized>(
    artifact: &CalibrationArtifact,
    model: &M,
    x0: &[f64],
    schedule: &NoiseSchedule,
    cfg: &TypicalityConfig,
    sample_key: u64,
) -> Result<AnomalyScore> {
    let mut per_level = Vec::with_capacity(artifact.levels.len());
    let mut statistics = Vec::with_capacity(artifact.levels.len());
    for (&level, kde) in artifact.levels.iter().zip(&artifact.kdes) {
        let t = scoped_statistic(model, x0, level, schedule, cfg, sample_key)?;
        per_level.push((level, kde.nll(t.t_value)));
        statistics.push(t);
    }
    let nlls: Vec<f64> = per_level.iter().map(|p| p.1).collect();
    let (best, value) = aggregate(&nlls).ok_or(Error::Empty("artifact levels"))?;
    let kde = &artifact.kdes[best];
    let floored = kde.is_floored(value);
    let tiebreak = if floored {
        (statistics[best].t_value - kde.median()).abs()
    } else {
        0.0
    };
    Ok(AnomalyScore {
        value,
        per_level,
        statistics,
        floored,
        tiebreak,
        verdict: None,
    })
}

/// Scores a dataset; per-point sub-streams are keyed by point content.
pub fn score_dataset<M: ScoreModel + ?Sized>(
    artifact: &CalibrationArtifact,
    model: &M,
    data: &Dataset,
    schedule: &NoiseSchedule,
    cfg: &TypicalityConfig,
    threads: Option<usize>,
) -> Result<Vec<Result<AnomalyScore>>> {
    artifact.check_fingerprints(model, schedule)?;
    check_dim(model.dim(), data.dim())?;
    crate::parallel::with_threads(threads, || {
        (0..data.len())
            .into_par_iter()
            .map(|i| {
                let x = data.row(i);
                score_unchecked(artifact, model, x, schedule, cfg, sample_key(x))
            })
            .collect()
    })
}

/// Empirical `(1 − α)` quantile of ID scores; anomalous iff `score > cutoff`.
pub fn threshold_from_quantile(id_scores: &[f64], alpha: f64) -> Result<f64> {
    if id_scores.is_empty() {
        return Err(Error::Empty("ID scores"));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid("alpha", "must lie in (0, 1)"));
    }
    Ok(quantile_sorted(&sorted_copy(id_scores), 1.0 - alpha))
}
