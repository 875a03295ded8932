use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::{info, warn};
use scoped::calibration::{
    calibrate as fit_detector, score_dataset, CalibrateOptions, CalibrationArtifact, Variant,
};
use scoped::data::Dataset;
use scoped::datagen::{generate, make_task_pair, DatasetSpec, ShiftKind};
use scoped::evaluation::{
    ablate_timesteps, evaluate_pairs, nfe_account, oracle_timestep, EvalOptions,
    EvalReport, Nfe, PairResult, PairSpec,
};
use scoped::rng::derive_seed;
use scoped::schedule::{select_mid_step, snr_curve, LevelSpec, NoiseSchedule};
use scoped::score::{train_dsm, AnyModel, MlpDenoiser, ScoreModel, Standardization};
use scoped::typicality::{batch_to_csv, score_batch, TypicalityConfig};
use serde::{Deserialize, Serialize};

use crate::config::ProjectConfig;
use crate::ConfigArgs;

fn load_config(args: &ConfigArgs) -> Result<ProjectConfig> {
    ProjectConfig::load(args.config.as_deref(), &args.overrides)
}

fn load_data(path: &Path) -> Result<Dataset> {
    Dataset::load(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn load_model(path: &Path) -> Result<AnyModel> {
    AnyModel::load(path).with_context(|| format!("loading model {}", path.display()))
}

fn write(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

pub fn gen(spec_path: &Path, out: &Path, pair: Option<&str>, pair_out: Option<&Path>) -> Result<()> {
    let text = std::fs::read_to_string(spec_path).with_context(|| format!("reading spec {}", spec_path.display()))?;
    let spec: DatasetSpec = serde_json::from_str(&text).context("invalid dataset spec")?;
    match (pair, pair_out) {
        (Some(kind), Some(pair_out)) => {
            let kind: ShiftKind = kind.parse()?;
            let (id, ood) = make_task_pair(kind, &spec)?;
            id.save(out)?;
            ood.save(pair_out)?;
            println!("wrote {} x {} to {} and {}", id.len(), id.dim(), out.display(), pair_out.display());
        }
        _ => {
            let data = generate(&spec)?;
            data.save(out)?;
            println!("wrote {} x {} to {}", data.len(), data.dim(), out.display());
        }
    }
    Ok(())
}

pub fn train(args: &ConfigArgs, data: &Path, out: &Path, loss: Option<&Path>) -> Result<()> {
    let cfg = load_config(args)?;
    let data = load_data(data)?;
    let schedule = cfg.schedule()?;
    let model = MlpDenoiser::new(cfg.mlp_spec(data.dim()), cfg.seed)?;
    info!("training {} parameters on {} samples", model.num_params(), data.len());
    let outcome = train_dsm(model, &data, &schedule, &cfg.train_config())?;
    AnyModel::Mlp(outcome.model).save(out)?;
    let mut csv = String::from("epoch,loss\n");
    for (i, l) in outcome.losses.iter().enumerate() {
        writeln!(csv, "{},{l}", i + 1)?;
    }
    let loss_path = loss.map(Path::to_path_buf).unwrap_or_else(|| {
        let mut p = out.as_os_str().to_owned();
        p.push(".loss.csv");
        PathBuf::from(p)
    });
    write(&loss_path, &csv)?;
    println!(
        "loss {:.6} -> {:.6}; model written to {}",
        outcome.losses[0],
        outcome.losses.last().copied().unwrap_or(f64::NAN),
        out.display()
    );
    Ok(())
}

/// Mid step chosen on the signal-fraction curve of `data`.
fn mid_step(cfg: &ProjectConfig, schedule: &NoiseSchedule, data: &Dataset, stride: usize) -> Result<usize> {
    let grid: Vec<usize> = (1..=schedule.steps()).step_by(stride.max(1)).collect();
    let curve = snr_curve(data, schedule, &grid)?;
    let sel = select_mid_step(&curve, cfg.calibration.retention)?;
    if sel.fallback {
        warn!("no step keeps {} of the signal; using step {}", cfg.calibration.retention, sel.step);
    }
    Ok(sel.step)
}

pub fn snr(args: &ConfigArgs, data: &Path, model: Option<&Path>, out: Option<&Path>, stride: usize) -> Result<()> {
    let cfg = load_config(args)?;
    if let Some(prior) = cfg.prior() {
        println!("sigma_mode={}", prior.mode());
        return Ok(());
    }
    if stride == 0 {
        bail!("stride must be positive");
    }
    let schedule = cfg.schedule()?;
    let raw = load_data(data)?;
    let data = match model {
        Some(p) => {
            let m = load_model(p)?;
            raw.map_rows(|r| m.to_model_space(r))
        }
        None if cfg.train.standardize => {
            let s = Standardization::fit(&raw);
            raw.map_rows(|r| s.apply(r))
        }
        None => raw,
    };
    let grid: Vec<usize> = (1..=schedule.steps()).step_by(stride).collect();
    let curve = snr_curve(&data, &schedule, &grid)?;
    if let Some(out) = out {
        write(out, &curve.to_csv())?;
    }
    let sel = select_mid_step(&curve, cfg.calibration.retention)?;
    if sel.fallback {
        warn!("no step keeps {} of the signal; falling back to the earliest", cfg.calibration.retention);
    }
    println!("early_step={}", cfg.calibration.early_step);
    println!("mid_step={}", sel.step);
    Ok(())
}

/// Levels for the configured variant.
fn resolve_levels(cfg: &ProjectConfig, model: &AnyModel, calib: &Dataset) -> Result<Vec<LevelSpec>> {
    let variant = cfg.calibration.variant;
    let want = variant.expected_levels();
    if let Some(prior) = cfg.prior() {
        if let Some(s) = &cfg.calibration.sigmas {
            return Ok(s.iter().map(|&v| LevelSpec::Sigma(v)).collect());
        }
        if want != 1 {
            bail!("{variant} with a continuous schedule needs calibration.sigmas");
        }
        return Ok(vec![LevelSpec::Sigma(prior.mode())]);
    }
    if let Some(t) = &cfg.calibration.timesteps {
        return Ok(t.iter().map(|&s| LevelSpec::Step(s)).collect());
    }
    let schedule = cfg.schedule()?;
    let mid = mid_step(cfg, &schedule, &calib.map_rows(|r| model.to_model_space(r)), 1)?;
    match variant {
        Variant::Single => Ok(vec![LevelSpec::Step(mid)]),
        Variant::TwoStep => {
            let early = cfg.calibration.early_step;
            if early == mid {
                warn!("early and mid step coincide at {mid}");
            }
            Ok(vec![LevelSpec::Step(early), LevelSpec::Step(mid)])
        }
        Variant::Oracle => bail!("the oracle variant needs calibration.timesteps (see `eval --ablate`)"),
    }
}

fn fit(
    cfg: &ProjectConfig,
    model: &AnyModel,
    calib: &Dataset,
    tcfg: &TypicalityConfig,
) -> Result<scoped::calibration::Calibration> {
    let levels = resolve_levels(cfg, model, calib)?;
    let opts = CalibrateOptions {
        variant: cfg.calibration.variant,
        bandwidth: cfg.calibration.bandwidth,
        threads: cfg.threads()?,
    };
    Ok(fit_detector(model, calib, &levels, &cfg.schedule()?, tcfg, &opts)?)
}

pub fn calibrate(args: &ConfigArgs, model: &Path, data: &Path, out: &Path, stats: Option<&Path>) -> Result<()> {
    let cfg = load_config(args)?;
    let model = load_model(model)?;
    let data = load_data(data)?;
    let tcfg = cfg.typicality();
    let cal = fit(&cfg, &model, &data, &tcfg)?;
    cal.artifact.save(out)?;
    if let Some(stats) = stats {
        let batch = score_batch(&model, &data, &cal.artifact.levels, &cfg.schedule()?, &tcfg, cfg.threads()?)?;
        write(stats, &batch_to_csv(&batch, &cal.artifact.levels))?;
    }
    let levels: Vec<String> = cal.artifact.levels.iter().map(ToString::to_string).collect();
    println!(
        "{} detector at levels [{}] from {} samples ({} failures); written to {}",
        cal.artifact.variant,
        levels.join(", "),
        data.len(),
        cal.failures,
        out.display()
    );
    Ok(())
}

fn level_label(l: &LevelSpec) -> String {
    l.to_string().replace('=', "_")
}

pub fn score(
    args: &ConfigArgs,
    artifact: &Path,
    model: &Path,
    data: &Path,
    out: &Path,
    alpha: Option<f64>,
) -> Result<()> {
    let cfg = load_config(args)?;
    let artifact = CalibrationArtifact::load(artifact).with_context(|| format!("loading artifact {}", artifact.display()))?;
    let model = load_model(model)?;
    let data = load_data(data)?;
    let cutoff = alpha.map(|a| artifact.threshold(a)).transpose()?;
    let scored = score_dataset(&artifact, &model, &data, &cfg.schedule()?, &artifact.config, cfg.threads()?)?;

    let mut csv = String::from("sample_index,status,score,floored,tiebreak");
    for l in &artifact.levels {
        let l = level_label(l);
        write!(csv, ",nll_{l},t_{l}")?;
    }
    if cutoff.is_some() {
        csv.push_str(",verdict");
    }
    csv.push('\n');
    let (mut flagged, mut failed) = (0usize, 0usize);
    for (i, s) in scored.into_iter().enumerate() {
        match s {
            Ok(s) => {
                let s = match cutoff {
                    Some(c) => s.with_threshold(c),
                    None => s,
                };
                write!(csv, "{i},ok,{},{},{}", s.value, s.floored, s.tiebreak)?;
                for ((_, nll), t) in s.per_level.iter().zip(&s.statistics) {
                    write!(csv, ",{nll},{}", t.t_value)?;
                }
                if let Some(v) = s.verdict {
                    flagged += v as usize;
                    write!(csv, ",{v}")?;
                }
            }
            Err(scoped::Error::NonFinite(msg)) => {
                warn!("{msg}");
                failed += 1;
                write!(csv, "{i},failed,,,")?;
                for _ in &artifact.levels {
                    csv.push_str(",,");
                }
                if cutoff.is_some() {
                    csv.push(',');
                }
            }
            Err(e) => return Err(e.into()),
        }
        csv.push('\n');
    }
    write(out, &csv)?;
    print!("scored {} samples ({failed} failed)", data.len());
    if let Some(c) = cutoff {
        print!("; threshold {c:.6}, flagged {flagged}");
    }
    println!();
    Ok(())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct NamedPath {
    name: String,
    path: PathBuf,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestRow {
    /// Training dataset; its held-out split is the ID side.
    name: String,
    model: PathBuf,
    #[serde(default)]
    artifact: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    datasets: Vec<NamedPath>,
    rows: Vec<ManifestRow>,
    /// Evaluated datasets; all of them by default.
    #[serde(default)]
    columns: Option<Vec<String>>,
}

#[derive(Serialize)]
struct PairRow {
    #[serde(flatten)]
    result: PairResult,
    #[serde(skip_serializing_if = "Option::is_none")]
    auroc_no_sign: Option<f64>,
}

#[derive(Serialize)]
struct AblationColumn {
    id_name: String,
    ood_name: String,
    table: Vec<(String, f64)>,
    oracle_level: String,
    oracle_auroc: f64,
}

#[derive(Serialize)]
struct JsonReport<'a> {
    variant: Variant,
    nfe: Nfe,
    seed: u64,
    pairs: Vec<PairRow>,
    #[serde(skip_serializing_if = "Option::is_none")]
    ablation: Option<Vec<AblationColumn>>,
    config: &'a ProjectConfig,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Scores one row of the matrix under `tcfg`.
fn eval_row(
    cfg: &ProjectConfig,
    row: &ManifestRow,
    model: &AnyModel,
    data: &[(String, Dataset)],
    columns: &[String],
    tcfg: &TypicalityConfig,
    preset: Option<&CalibrationArtifact>,
) -> Result<Vec<PairResult>> {
    let find = |name: &str| -> Result<&Dataset> {
        data.iter()
            .find(|(n, _)| n == name)
            .map(|(_, d)| d)
            .with_context(|| format!("manifest names unknown dataset {name:?}"))
    };
    let schedule = cfg.schedule()?;
    let id_full = find(&row.name)?;
    let (calib, held) = id_full.split(cfg.eval.split_fraction, cfg.seed)?;
    let fitted;
    let artifact = match preset {
        Some(a) => a,
        None => {
            fitted = fit(cfg, model, &calib, tcfg)?.artifact;
            &fitted
        }
    };
    let (half_a, half_b) = held.split(0.5, derive_seed(cfg.seed, &[1]))?;
    let mut specs = Vec::new();
    for c in columns {
        let (id, ood) = if *c == row.name { (&half_a, &half_b) } else { (&held, find(c)?) };
        specs.push(PairSpec {
            id_name: row.name.clone(),
            ood_name: c.clone(),
            id,
            ood,
            artifact,
        });
    }
    Ok(evaluate_pairs(&specs, model, &schedule, &artifact.config, cfg.threads()?)?.pairs)
}

pub fn eval(args: &ConfigArgs, manifest_path: &Path, out_dir: &Path, ablate: bool, no_sign: bool) -> Result<()> {
    let cfg = load_config(args)?;
    let text = std::fs::read_to_string(manifest_path)
        .with_context(|| format!("reading manifest {}", manifest_path.display()))?;
    let manifest: Manifest = serde_json::from_str(&text).context("invalid manifest")?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let data = manifest
        .datasets
        .iter()
        .map(|d| Ok((d.name.clone(), load_data(&resolve(base, &d.path))?)))
        .collect::<Result<Vec<_>>>()?;
    let columns = manifest
        .columns
        .clone()
        .unwrap_or_else(|| data.iter().map(|(n, _)| n.clone()).collect());
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;

    let tcfg = cfg.typicality();
    let unsigned = TypicalityConfig { apply_sign: false, ..tcfg.clone() };
    let schedule = cfg.schedule()?;
    let mut pairs = Vec::new();
    let mut pairs_no_sign = Vec::new();
    let mut ablation = Vec::new();
    for row in &manifest.rows {
        let model = load_model(&resolve(base, &row.model))?;
        let preset = row
            .artifact
            .as_ref()
            .map(|p| CalibrationArtifact::load(&resolve(base, p)))
            .transpose()?;
        pairs.extend(eval_row(&cfg, row, &model, &data, &columns, &tcfg, preset.as_ref())?);
        if no_sign {
            pairs_no_sign.extend(eval_row(&cfg, row, &model, &data, &columns, &unsigned, None)?);
        }
        if ablate {
            if cfg.prior().is_some() {
                bail!("ablation sweeps discrete steps; the config uses a continuous schedule");
            }
            let levels: Vec<LevelSpec> = cfg.eval.ablate_timesteps.iter().map(|&t| LevelSpec::Step(t)).collect();
            let opts = EvalOptions {
                split_fraction: cfg.eval.split_fraction,
                bandwidth: cfg.calibration.bandwidth,
                threads: cfg.threads()?,
                seed: cfg.seed,
            };
            let id = &data.iter().find(|(n, _)| *n == row.name).context("unknown row dataset")?.1;
            for c in columns.iter().filter(|c| **c != row.name) {
                let ood = &data.iter().find(|(n, _)| n == c).context("unknown column dataset")?.1;
                let table = ablate_timesteps(&model, id, ood, &levels, &schedule, &tcfg, &opts)?;
                let (best, auc) = oracle_timestep(&table)?;
                ablation.push(AblationColumn {
                    id_name: row.name.clone(),
                    ood_name: c.clone(),
                    table: table.iter().map(|(l, a)| (l.to_string(), *a)).collect(),
                    oracle_level: best.to_string(),
                    oracle_auroc: auc,
                });
            }
        }
    }

    let report = EvalReport {
        pairs: pairs.clone(),
        nfe: Some(nfe_account(cfg.calibration.variant, &tcfg)),
        variant: Some(cfg.calibration.variant),
        seed: cfg.seed,
    };
    write(&out_dir.join("matrix.csv"), &report.matrix_csv())?;
    print!("{}", report.matrix_csv());
    if no_sign {
        let ns = EvalReport { pairs: pairs_no_sign.clone(), ..report.clone() };
        write(&out_dir.join("matrix_no_sign.csv"), &ns.matrix_csv())?;
    }
    let rows: Vec<PairRow> = pairs
        .into_iter()
        .enumerate()
        .map(|(i, result)| PairRow {
            auroc_no_sign: pairs_no_sign.get(i).map(|p| p.auroc),
            result,
        })
        .collect();
    if ablate {
        let csv = ablation_csv(&ablation, &cfg.eval.ablate_timesteps);
        write(&out_dir.join("ablation.csv"), &csv)?;
        print_ablation(&ablation);
    }
    let json = JsonReport {
        variant: cfg.calibration.variant,
        nfe: nfe_account(cfg.calibration.variant, &tcfg),
        seed: cfg.seed,
        pairs: rows,
        ablation: ablate.then_some(ablation),
        config: &cfg,
    };
    write(&out_dir.join("report.json"), &serde_json::to_string_pretty(&json)?)?;
    Ok(())
}

/// One row per step plus `oracle` and `oracle_step` rows; one column per pair.
fn ablation_csv(cols: &[AblationColumn], steps: &[usize]) -> String {
    let mut s = String::from("timestep");
    for c in cols {
        let _ = write!(s, ",{}->{}", c.id_name, c.ood_name);
    }
    s.push('\n');
    let mut sorted = steps.to_vec();
    sorted.sort_unstable();
    for (i, t) in sorted.iter().enumerate() {
        let _ = write!(s, "{t}");
        for c in cols {
            let _ = write!(s, ",{:.6}", c.table[i].1);
        }
        s.push('\n');
    }
    s.push_str("oracle");
    for c in cols {
        let _ = write!(s, ",{:.6}", c.oracle_auroc);
    }
    s.push_str("\noracle_step");
    for c in cols {
        let _ = write!(s, ",{}", c.oracle_level);
    }
    s.push('\n');
    s
}

fn print_ablation(cols: &[AblationColumn]) {
    for c in cols {
        println!("{} -> {}", c.id_name, c.ood_name);
        for (level, auc) in &c.table {
            let mark = if *level == c.oracle_level { " *" } else { "" };
            println!("  t={level:<6} {auc:.4}{mark}");
        }
        println!("  oracle   {:.4} (t={})", c.oracle_auroc, c.oracle_level);
    }
}
