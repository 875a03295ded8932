//! Threshold-free evaluation: AUROC, pair matrices, per-level ablations and
//! function-evaluation accounting.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::calibration::{
    calibrate, score_dataset, AnomalyScore, BandwidthRule, CalibrateOptions, CalibrationArtifact,
    Variant,
};
use crate::data::Dataset;
use crate::error::{check_dim, Error, Result};
use crate::schedule::{LevelSpec, NoiseSchedule};
use crate::score::ScoreModel;
use crate::typicality::TypicalityConfig;

fn cmp_key(a: &(f64, f64), b: &(f64, f64)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1))
}

/// Mann–Whitney AUROC over lexicographic `(primary, secondary)` keys.
///
/// Probability that a random OOD key exceeds a random ID key, exact ties
/// counting one half. Runs in `O(n log n)`.
pub fn auroc_by_key(id: &[(f64, f64)], ood: &[(f64, f64)]) -> Result<f64> {
    if id.is_empty() || ood.is_empty() {
        return Err(Error::Empty("AUROC input"));
    }
    if id.iter().chain(ood).any(|k| k.0.is_nan() || k.1.is_nan()) {
        return Err(Error::NonFinite("AUROC input contains NaN".into()));
    }
    // Adding zero maps -0.0 to 0.0 so signed zeros tie under total_cmp.
    let norm = |k: &(f64, f64)| (k.0 + 0.0, k.1 + 0.0);
    let mut all: Vec<((f64, f64), bool)> = id
        .iter()
        .map(|k| (norm(k), false))
        .chain(ood.iter().map(|k| (norm(k), true)))
        .collect();
    all.sort_by(|a, b| cmp_key(&a.0, &b.0));
    // Twice the U statistic, kept in integers so the count is exact.
    let mut twice_u: u128 = 0;
    let mut id_below: u128 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        let (mut n_id, mut n_ood) = (0u128, 0u128);
        while j < all.len() && cmp_key(&all[j].0, &all[i].0) == Ordering::Equal {
            if all[j].1 {
                n_ood += 1;
            } else {
                n_id += 1;
            }
            j += 1;
        }
        twice_u += n_ood * (2 * id_below + n_id);
        id_below += n_id;
        i = j;
    }
    let denom = 2 * id.len() as u128 * ood.len() as u128;
    // Dividing the smaller side keeps auroc(a, b) + auroc(b, a) == 1 in
    // floating point.
    Ok(if 2 * twice_u <= denom {
        twice_u as f64 / denom as f64
    } else {
        1.0 - (denom - twice_u) as f64 / denom as f64
    })
}

pub fn auroc(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    let key = |v: &f64| (*v, 0.0);
    auroc_by_key(
        &id_scores.iter().map(key).collect::<Vec<_>>(),
        &ood_scores.iter().map(key).collect::<Vec<_>>(),
    )
}

/// Function evaluations per scored sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Nfe {
    pub forward: u64,
    pub jvp: u64,
}

impl std::fmt::Display for Nfe {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}F + {}J", self.forward, self.jvp)
    }
}

/// One forward pass per level, one JVP per probe per level.
pub fn nfe_account(variant: Variant, cfg: &TypicalityConfig) -> Nfe {
    let levels = variant.expected_levels() as u64;
    Nfe {
        forward: levels,
        jvp: levels * cfg.num_probes as u64,
    }
}

/// One ID/OOD comparison under a calibrated artifact.
pub struct PairSpec<'a> {
    pub id_name: String,
    pub ood_name: String,
    /// Held-out ID data (not used for calibration).
    pub id: &'a Dataset,
    pub ood: &'a Dataset,
    pub artifact: &'a CalibrationArtifact,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairResult {
    pub id_name: String,
    pub ood_name: String,
    pub auroc: f64,
    pub n_id: usize,
    pub n_ood: usize,
    /// Scores that hit the NLL floor and were ranked by the secondary key.
    pub floored: usize,
    pub failures: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub pairs: Vec<PairResult>,
    pub nfe: Option<Nfe>,
    pub variant: Option<Variant>,
    pub seed: u64,
}

impl EvalReport {
    /// Rows are ID (training) datasets, columns are evaluated datasets.
    pub fn matrix_csv(&self) -> String {
        let mut rows: Vec<&str> = Vec::new();
        let mut cols: Vec<&str> = Vec::new();
        for p in &self.pairs {
            if !rows.contains(&p.id_name.as_str()) {
                rows.push(&p.id_name);
            }
            if !cols.contains(&p.ood_name.as_str()) {
                cols.push(&p.ood_name);
            }
        }
        let mut s = String::from("train");
        for c in &cols {
            s.push(',');
            s.push_str(c);
        }
        s.push('\n');
        for r in &rows {
            s.push_str(r);
            for c in &cols {
                s.push(',');
                if let Some(p) = self.pairs.iter().find(|p| p.id_name == *r && p.ood_name == *c) {
                    s.push_str(&format!("{:.6}", p.auroc));
                }
            }
            s.push('\n');
        }
        s
    }
}

/// Scores, dropping non-finite failures; other errors propagate.
pub fn collect_scores(scored: Vec<Result<AnomalyScore>>) -> Result<(Vec<AnomalyScore>, usize)> {
    let mut out = Vec::with_capacity(scored.len());
    let mut failures = 0;
    for s in scored {
        match s {
            Ok(v) => out.push(v),
            Err(Error::NonFinite(_)) => failures += 1,
            Err(e) => return Err(e),
        }
    }
    Ok((out, failures))
}

fn keys(scores: &[AnomalyScore]) -> Vec<(f64, f64)> {
    scores.iter().map(AnomalyScore::rank_key).collect()
}

pub fn evaluate_pairs<M: ScoreModel + ?Sized>(
    specs: &[PairSpec<'_>],
    model: &M,
    schedule: &NoiseSchedule,
    cfg: &TypicalityConfig,
    threads: Option<usize>,
) -> Result<EvalReport> {
    let mut pairs = Vec::with_capacity(specs.len());
    for spec in specs {
        check_dim(spec.id.dim(), spec.ood.dim())?;
        check_dim(model.dim(), spec.id.dim())?;
        let (id, f_id) = collect_scores(score_dataset(spec.artifact, model, spec.id, schedule, cfg, threads)?)?;
        let (ood, f_ood) = collect_scores(score_dataset(spec.artifact, model, spec.ood, schedule, cfg, threads)?)?;
        let auroc = auroc_by_key(&keys(&id), &keys(&ood))?;
        pairs.push(PairResult {
            id_name: spec.id_name.clone(),
            ood_name: spec.ood_name.clone(),
            auroc,
            n_id: id.len(),
            n_ood: ood.len(),
            floored: id.iter().chain(&ood).filter(|s| s.floored).count(),
            failures: f_id + f_ood,
        });
    }
    let variant = specs.first().map(|s| s.artifact.variant);
    Ok(EvalReport {
        pairs,
        nfe: variant.map(|v| nfe_account(v, cfg)),
        variant,
        seed: cfg.seed,
    })
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    /// Share of the ID data used for calibration; the rest is held out.
    pub split_fraction: f64,
    pub bandwidth: BandwidthRule,
    pub threads: Option<usize>,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            split_fraction: 0.5,
            bandwidth: BandwidthRule::Silverman,
            threads: None,
            seed: 0,
        }
    }
}

fn level_order(a: &LevelSpec, b: &LevelSpec) -> Ordering {
    match (a, b) {
        (LevelSpec::Step(x), LevelSpec::Step(y)) => x.cmp(y),
        (LevelSpec::Sigma(x), LevelSpec::Sigma(y)) => x.total_cmp(y),
        (LevelSpec::Step(_), LevelSpec::Sigma(_)) => Ordering::Less,
        (LevelSpec::Sigma(_), LevelSpec::Step(_)) => Ordering::Greater,
    }
}

/// Per-level AUROC, sorted by level.
pub type AblationTable = Vec<(LevelSpec, f64)>;

fn single_level_auroc<M: ScoreModel + ?Sized>(
    model: &M,
    calib: &Dataset,
    id_test: &Dataset,
    ood: &Dataset,
    level: LevelSpec,
    variant: Variant,
    schedule: &NoiseSchedule,
    cfg: &TypicalityConfig,
    opts: &EvalOptions,
) -> Result<(f64, CalibrationArtifact)> {
    let copts = CalibrateOptions {
        variant,
        bandwidth: opts.bandwidth,
        threads: opts.threads,
    };
    let artifact = calibrate(model, calib, &[level], schedule, cfg, &copts)?.artifact;
    let (id, _) = collect_scores(score_dataset(&artifact, model, id_test, schedule, cfg, opts.threads)?)?;
    let (od, _) = collect_scores(score_dataset(&artifact, model, ood, schedule, cfg, opts.threads)?)?;
    Ok((auroc_by_key(&keys(&id), &keys(&od))?, artifact))
}

/// Calibrates a single-level detector at each level on one part of the ID
/// data and reports its AUROC against `ood` on the held-out part.
pub fn ablate_timesteps<M: ScoreModel + ?Sized>(
    model: &M,
    id_dataset: &Dataset,
    ood_dataset: &Dataset,
    levels: &[LevelSpec],
    schedule: &NoiseSchedule,
    cfg: &TypicalityConfig,
    opts: &EvalOptions,
) -> Result<AblationTable> {
    check_dim(id_dataset.dim(), ood_dataset.dim())?;
    let (calib, id_test) = id_dataset.split(opts.split_fraction, opts.seed)?;
    let mut sorted = levels.to_vec();
    sorted.sort_by(level_order);
    let mut table = Vec::with_capacity(sorted.len());
    for level in sorted {
        let (auc, _) = single_level_auroc(model, &calib, &id_test, ood_dataset, level, Variant::Single, schedule, cfg, opts)?;
        table.push((level, auc));
    }
    Ok(table)
}

/// Best level by AUROC; ties go to the earlier level.
pub fn oracle_timestep(table: &[(LevelSpec, f64)]) -> Result<(LevelSpec, f64)> {
    table
        .iter()
        .copied()
        .reduce(|best, cur| match cur.1.total_cmp(&best.1) {
            Ordering::Greater => cur,
            Ordering::Equal if level_order(&cur.0, &best.0) == Ordering::Less => cur,
            _ => best,
        })
        .ok_or(Error::Empty("ablation table"))
}

/// Oracle detector: the best level of an ablation sweep, re-calibrated on the
/// same split so its AUROC reproduces the table entry.
pub fn oracle_detector<M: ScoreModel + ?Sized>(
    model: &M,
    id_dataset: &Dataset,
    ood_dataset: &Dataset,
    table: &[(LevelSpec, f64)],
    schedule: &NoiseSchedule,
    cfg: &TypicalityConfig,
    opts: &EvalOptions,
) -> Result<(LevelSpec, f64, CalibrationArtifact)> {
    let (level, _) = oracle_timestep(table)?;
    let (calib, id_test) = id_dataset.split(opts.split_fraction, opts.seed)?;
    let (auc, artifact) = single_level_auroc(model, &calib, &id_test, ood_dataset, level, Variant::Oracle, schedule, cfg, opts)?;
    Ok((level, auc, artifact))
}
