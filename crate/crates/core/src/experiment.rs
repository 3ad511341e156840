//! Experiment tasks: train, ablation, robustness, sweep and case study.
//! Each run writes into `<out>/<task>/<timestamp>-<seed>/`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use crate::data::{
    build_dataset, default_boundaries, inject_noise, parse_boundaries, parse_key_values, stratify_by_degree, Dataset,
    DegreeInterval, InteractionTable, SocialTable, Split,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate_stratified, export_relevance_weights, EvalOptions, EvalReport, RelevanceWeightExport};
use crate::objective::{TrainConfig, Variant};
use crate::synthetic::{planted_clusters, PlantedConfig};
use crate::train::{train, TrainOutcome};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Train,
    Ablation,
    Robustness,
    Sweep,
    CaseStudy,
}

impl Task {
    pub fn dir_name(self) -> &'static str {
        match self {
            Task::Train => "train",
            Task::Ablation => "ablation",
            Task::Robustness => "robustness",
            Task::Sweep => "sweep",
            Task::CaseStudy => "case_study",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DatasetSource {
    /// Raw edge files.
    Raw {
        interactions: PathBuf,
        social: PathBuf,
    },
    /// A directory written by [`Dataset::save`].
    Saved(PathBuf),
    Planted(PlantedConfig),
}

impl DatasetSource {
    /// `synthetic` selects the planted-cluster generator. Otherwise `name` is a
    /// directory (relative to `root` when given) holding either a saved
    /// dataset (`meta`) or raw `interactions.txt`/`ratings.txt` and
    /// `social.txt`/`trust.txt`.
    pub fn resolve(root: Option<&Path>, name: Option<&str>) -> Result<Self> {
        if name == Some("synthetic") {
            return Ok(DatasetSource::Planted(PlantedConfig::default()));
        }
        let dir = match (root, name) {
            (Some(r), Some(n)) => r.join(n),
            (Some(r), None) => r.to_owned(),
            (None, Some(n)) => PathBuf::from(n),
            (None, None) => return Err(Error::Config("no dataset given".into())),
        };
        if dir.join("meta").is_file() {
            return Ok(DatasetSource::Saved(dir));
        }
        let pick = |names: &[&str]| names.iter().map(|n| dir.join(n)).find(|p| p.is_file());
        let interactions = pick(&["interactions.txt", "ratings.txt", "rating.txt"])
            .ok_or_else(|| Error::Config(format!("{}: no interaction file", dir.display())))?;
        let social = pick(&["social.txt", "trust.txt", "trusts.txt"])
            .ok_or_else(|| Error::Config(format!("{}: no social file", dir.display())))?;
        Ok(DatasetSource::Raw { interactions, social })
    }

    pub fn load(&self, split_seed: u64) -> Result<Dataset> {
        match self {
            DatasetSource::Raw { interactions, social } => {
                let inter = InteractionTable::load(interactions)?;
                let soc = SocialTable::load(social)?;
                build_dataset(&inter, &soc, split_seed)
            }
            DatasetSource::Saved(dir) => Dataset::load(dir),
            DatasetSource::Planted(cfg) => Ok(planted_clusters(cfg, split_seed)?.dataset),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentSpec {
    pub source: DatasetSource,
    pub split_seed: u64,
    pub train: TrainConfig,
    pub eval: EvalOptions,
    pub strata: Vec<DegreeInterval>,
    pub variants: Vec<Variant>,
    pub noise_ratios: Vec<f64>,
    pub noise_seed: u64,
    /// `(config key, values)`; cells are the cartesian product.
    pub sweep: Vec<(String, Vec<String>)>,
    /// Ties exported in the case study; `None` exports all.
    pub case_sample: Option<usize>,
    pub out: PathBuf,
}

impl ExperimentSpec {
    pub fn new(source: DatasetSource, out: impl Into<PathBuf>) -> Self {
        Self {
            source,
            split_seed: 0,
            train: TrainConfig::default(),
            eval: EvalOptions::default(),
            strata: default_boundaries(),
            variants: Variant::ALL.to_vec(),
            noise_ratios: vec![0.0, 0.1, 0.2, 0.3],
            noise_seed: 1,
            sweep: Vec::new(),
            case_sample: None,
            out: out.into(),
        }
    }

    /// Applies one `key=value` setting. Unknown keys fall through to
    /// [`TrainConfig::set`]. Sweep axes use `sweep.<key>=v1,v2,...`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
            value
                .split(',')
                .map(|v| v.trim().parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Config(format!("bad list `{value}` for `{key}`")))
        }
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
        }
        match key {
            "split_seed" => self.split_seed = num(key, value)?,
            "negatives" => self.eval.num_negatives = num(key, value)?,
            "cutoffs" => self.eval.cutoffs = list(key, value)?,
            "eval_seed" => self.eval.seed = num(key, value)?,
            "strata" => self.strata = parse_boundaries(value)?,
            "variants" => self.variants = list(key, value)?,
            "noise_ratios" => self.noise_ratios = list(key, value)?,
            "noise_seed" => self.noise_seed = num(key, value)?,
            "sample" => self.case_sample = Some(num(key, value)?),
            "out" => self.out = PathBuf::from(value),
            _ if key.starts_with("sweep.") => {
                let axis = key["sweep.".len()..].to_owned();
                let values: Vec<String> = value.split(',').map(|v| v.trim().to_owned()).collect();
                // Reject bad axis names and values up front.
                for v in &values {
                    self.train.clone().set(&axis, v)?;
                }
                self.sweep.retain(|(k, _)| *k != axis);
                self.sweep.push((axis, values));
            }
            _ if key.starts_with("synthetic.") => {
                let DatasetSource::Planted(cfg) = &mut self.source else {
                    return Err(Error::Config(format!("`{key}` needs the synthetic dataset")));
                };
                match &key["synthetic.".len()..] {
                    "users" => cfg.num_users = num(key, value)?,
                    "items" => cfg.num_items = num(key, value)?,
                    "clusters" => cfg.clusters = num(key, value)?,
                    "interactions_per_user" => cfg.interactions_per_user = num(key, value)?,
                    "in_cluster" => cfg.in_cluster = num(key, value)?,
                    "popularity_skew" => cfg.popularity_skew = num(key, value)?,
                    "ties_per_user" => cfg.ties_per_user = num(key, value)?,
                    "cross_ties" => cfg.cross_ties = num(key, value)?,
                    "seed" => cfg.seed = num(key, value)?,
                    other => return Err(Error::Config(format!("unknown synthetic key `{other}`"))),
                }
            }
            _ => self.train.set(key, value)?,
        }
        Ok(())
    }

    /// Applies every setting of a `key=value` file.
    pub fn apply_config_text(&mut self, text: &str) -> Result<()> {
        let map = parse_key_values(text).map_err(Error::Config)?;
        let mut keys: Vec<_> = map.keys().collect();
        // `dataset`/`dataset_dir` are resolved by the caller.
        keys.retain(|k| !matches!(k.as_str(), "dataset" | "dataset_dir" | "threads"));
        keys.sort();
        for k in keys {
            self.set(k, &map[k])?;
        }
        Ok(())
    }

    /// Resolved settings, one `key=value` per line.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "source={:?}", self.source);
        let _ = writeln!(out, "split_seed={}", self.split_seed);
        out.push_str(&self.train.echo());
        let _ = writeln!(out, "negatives={}", self.eval.num_negatives);
        let _ = writeln!(out, "cutoffs={}", join(&self.eval.cutoffs));
        let _ = writeln!(out, "eval_seed={}", self.eval.seed);
        let strata: Vec<String> = self.strata.iter().map(|s| s.lo.to_string()).collect();
        let _ = writeln!(out, "strata={}", strata.join(","));
        let _ = writeln!(out, "variants={}", join(&self.variants));
        let _ = writeln!(out, "noise_ratios={}", join(&self.noise_ratios));
        let _ = writeln!(out, "noise_seed={}", self.noise_seed);
        for (axis, values) in &self.sweep {
            let _ = writeln!(out, "sweep.{axis}={}", values.join(","));
        }
        if let Some(k) = self.case_sample {
            let _ = writeln!(out, "sample={k}");
        }
        out
    }
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

/// Creates a fresh `<out>/<task>/<timestamp>-<seed>[-n]` directory.
pub fn create_run_dir(out: &Path, task: Task, seed: u64) -> Result<PathBuf> {
    let stamp = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let base = out.join(task.dir_name());
    fs::create_dir_all(&base).map_err(|e| Error::io(&base, e))?;
    let mut n = 0;
    loop {
        let name = if n == 0 {
            format!("{stamp}-{seed}")
        } else {
            format!("{stamp}-{seed}-{n}")
        };
        let dir = base.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => n += 1,
            Err(e) => return Err(Error::io(dir, e)),
        }
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// A trained model plus its test report.
#[derive(Clone, Debug)]
pub struct TrainRun {
    pub outcome: TrainOutcome,
    pub report: EvalReport,
    pub dir: Option<PathBuf>,
}

/// Trains, evaluates on test with degree strata, and (when `dir` is given)
/// writes config echo, epoch log, reports and the best checkpoint.
pub fn train_and_report(
    ds: &Dataset,
    cfg: &TrainConfig,
    eval: &EvalOptions,
    strata: &[DegreeInterval],
    strata_source: &Dataset,
    dir: Option<&Path>,
    config_echo: &str,
) -> Result<TrainRun> {
    if let Some(dir) = dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write(&dir.join("config.txt"), config_echo)?;
        write(&dir.join("dataset.txt"), &format!("{}\n", ds.stats()))?;
    }
    let ckpt = dir.map(|d| d.join("checkpoint"));
    let outcome = train(ds, cfg, eval, |ms, _| match &ckpt {
        Some(path) => ms.save(path, cfg.layers, config_echo),
        None => Ok(()),
    })?;
    let strata = stratify_by_degree(strata_source, strata)?;
    let report = evaluate_stratified(&outcome.model, ds, &strata, Split::Test, eval)
        .with_meta("variant", cfg.variant)
        .with_meta("seed", cfg.seed)
        .with_meta(
            "best_epoch",
            outcome.best_epoch.map_or("none".into(), |e| e.to_string()),
        );
    if let Some(dir) = dir {
        if outcome.best_epoch.is_none() {
            outcome.model.save(dir.join("checkpoint"), cfg.layers, config_echo)?;
        }
        write(&dir.join("epochs.txt"), &outcome.history_text())?;
        write(&dir.join("report.txt"), &report.to_table())?;
        write(&dir.join("report.rows"), &report.to_rows())?;
        if let Some(msg) = &outcome.diverged {
            write(&dir.join("DIVERGED"), &format!("{msg}\n"))?;
        }
    }
    Ok(TrainRun {
        outcome,
        report,
        dir: dir.map(Path::to_owned),
    })
}

fn prepare(spec: &ExperimentSpec, task: Task, write_out: bool) -> Result<(Dataset, Option<PathBuf>)> {
    spec.train.validate()?;
    let ds = spec.source.load(spec.split_seed)?;
    log::info!("dataset: {}", ds.stats());
    let dir = if write_out {
        Some(create_run_dir(&spec.out, task, spec.train.seed)?)
    } else {
        None
    };
    if let Some(dir) = &dir {
        write(&dir.join("spec.txt"), &spec.echo())?;
    }
    Ok((ds, dir))
}

pub fn run_train(spec: &ExperimentSpec, write_out: bool) -> Result<TrainRun> {
    let (ds, dir) = prepare(spec, Task::Train, write_out)?;
    train_and_report(
        &ds,
        &spec.train,
        &spec.eval,
        &spec.strata,
        &ds,
        dir.as_deref(),
        &spec.echo(),
    )
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub variant: Variant,
    pub result: std::result::Result<EvalReport, String>,
}

pub fn ablation_table(rows: &[AblationRow], cutoffs: &[usize]) -> String {
    let mut out = String::from("variant");
    for c in cutoffs {
        let _ = write!(out, " HR@{c} NDCG@{c}");
    }
    out.push('\n');
    for row in rows {
        out.push_str(row.variant.name());
        match &row.result {
            Ok(r) => {
                for &c in cutoffs {
                    let _ = write!(out, " {:.4} {:.4}", r.hr_at(c), r.ndcg_at(c));
                }
            }
            Err(e) => {
                let _ = write!(out, " FAILED: {e}");
            }
        }
        out.push('\n');
    }
    out
}

/// Trains every configured variant on the same split and seed.
pub fn run_ablation(spec: &ExperimentSpec, write_out: bool) -> Result<Vec<AblationRow>> {
    let (ds, dir) = prepare(spec, Task::Ablation, write_out)?;
    let mut rows = Vec::new();
    for &variant in &spec.variants {
        let cfg = TrainConfig {
            variant,
            ..spec.train.clone()
        };
        let mut echo = spec.echo();
        echo.push_str(&format!("variant={variant}\n"));
        let sub = dir.as_ref().map(|d| d.join(variant.name()));
        let result = train_and_report(&ds, &cfg, &spec.eval, &spec.strata, &ds, sub.as_deref(), &echo)
            .map(|run| run.report)
            .map_err(|e| {
                log::error!("variant {variant} failed: {e}");
                e.to_string()
            });
        rows.push(AblationRow { variant, result });
    }
    if let Some(dir) = &dir {
        write(&dir.join("ablation.txt"), &ablation_table(&rows, &spec.eval.cutoffs))?;
    }
    Ok(rows)
}

#[derive(Clone, Debug)]
pub struct RobustnessRow {
    pub ratio: f64,
    pub report: EvalReport,
    /// `(baseline − noisy) / baseline` for HR and NDCG at each cutoff.
    pub hr_degradation: Vec<(usize, f64)>,
    pub ndcg_degradation: Vec<(usize, f64)>,
}

#[derive(Clone, Debug)]
pub struct RobustnessResult {
    pub baseline: EvalReport,
    pub rows: Vec<RobustnessRow>,
}

impl RobustnessResult {
    pub fn to_text(&self, cutoffs: &[usize]) -> String {
        let mut out = String::from("ratio");
        for c in cutoffs {
            let _ = write!(out, " HR@{c} NDCG@{c} dHR@{c} dNDCG@{c}");
        }
        out.push('\n');
        for row in &self.rows {
            let _ = write!(out, "{}", row.ratio);
            for (k, &c) in cutoffs.iter().enumerate() {
                let _ = write!(
                    out,
                    " {:.4} {:.4} {:.4} {:.4}",
                    row.report.hr_at(c),
                    row.report.ndcg_at(c),
                    row.hr_degradation[k].1,
                    row.ndcg_degradation[k].1
                );
            }
            out.push('\n');
        }
        out.push_str("\n# per-stratum (metric cutoff stratum value) by ratio\n");
        for row in &self.rows {
            for line in row.report.to_rows().lines() {
                let _ = writeln!(out, "{} {line}", row.ratio);
            }
        }
        out
    }
}

fn relative_drop(base: f64, noisy: f64) -> f64 {
    if base == 0.0 {
        0.0
    } else {
        (base - noisy) / base
    }
}

/// Retrains on train graphs corrupted with each fake-edge ratio. Strata come
/// from the clean train degrees.
pub fn run_robustness(spec: &ExperimentSpec, write_out: bool) -> Result<RobustnessResult> {
    let (ds, dir) = prepare(spec, Task::Robustness, write_out)?;
    let mut runs: Vec<(f64, EvalReport)> = Vec::new();
    let mut ratios = spec.noise_ratios.clone();
    if !ratios.contains(&0.0) {
        ratios.insert(0, 0.0);
    }
    for &ratio in &ratios {
        let noisy = inject_noise(&ds, ratio, spec.noise_seed)?;
        let sub = dir.as_ref().map(|d| d.join(format!("ratio-{ratio}")));
        let run = train_and_report(
            &noisy,
            &spec.train,
            &spec.eval,
            &spec.strata,
            &ds,
            sub.as_deref(),
            &spec.echo(),
        )?;
        runs.push((ratio, run.report.with_meta("noise_ratio", ratio)));
    }
    let baseline = runs
        .iter()
        .find(|(r, _)| *r == 0.0)
        .map(|(_, rep)| rep.clone())
        .expect("ratio 0 always runs");
    let rows = runs
        .into_iter()
        .filter(|(r, _)| spec.noise_ratios.contains(r))
        .map(|(ratio, report)| {
            let drop = |f: &dyn Fn(&EvalReport, usize) -> f64| -> Vec<(usize, f64)> {
                spec.eval
                    .cutoffs
                    .iter()
                    .map(|&c| (c, relative_drop(f(&baseline, c), f(&report, c))))
                    .collect()
            };
            RobustnessRow {
                ratio,
                hr_degradation: drop(&|r, c| r.hr_at(c)),
                ndcg_degradation: drop(&|r, c| r.ndcg_at(c)),
                report,
            }
        })
        .collect();
    let result = RobustnessResult { baseline, rows };
    if let Some(dir) = &dir {
        write(&dir.join("robustness.txt"), &result.to_text(&spec.eval.cutoffs))?;
    }
    Ok(result)
}

#[derive(Clone, Debug)]
pub struct SweepCell {
    pub settings: Vec<(String, String)>,
    pub report: EvalReport,
}

/// Cartesian product of the sweep axes.
pub fn sweep_cells(axes: &[(String, Vec<String>)]) -> Vec<Vec<(String, String)>> {
    let mut cells: Vec<Vec<(String, String)>> = vec![Vec::new()];
    for (axis, values) in axes {
        cells = cells
            .into_iter()
            .flat_map(|cell| {
                values.iter().map(move |v| {
                    let mut next = cell.clone();
                    next.push((axis.clone(), v.clone()));
                    next
                })
            })
            .collect();
    }
    cells
}

/// `cell axis value metric value` rows, metric like `hr@10`.
pub fn sweep_rows(cells: &[SweepCell], cutoffs: &[usize]) -> String {
    let mut out = String::new();
    for (id, cell) in cells.iter().enumerate() {
        for (axis, value) in &cell.settings {
            for &c in cutoffs {
                let _ = writeln!(out, "{id} {axis} {value} hr@{c} {}", cell.report.hr_at(c));
                let _ = writeln!(out, "{id} {axis} {value} ndcg@{c} {}", cell.report.ndcg_at(c));
            }
        }
    }
    out
}

pub fn run_sweep(spec: &ExperimentSpec, write_out: bool) -> Result<Vec<SweepCell>> {
    if spec.sweep.is_empty() || spec.sweep.iter().any(|(_, v)| v.is_empty()) {
        return Err(Error::Config("sweep needs at least one nonempty axis".into()));
    }
    let (ds, dir) = prepare(spec, Task::Sweep, write_out)?;
    let mut out = Vec::new();
    for (id, settings) in sweep_cells(&spec.sweep).into_iter().enumerate() {
        let mut cfg = spec.train.clone();
        for (k, v) in &settings {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        let mut echo = spec.echo();
        for (k, v) in &settings {
            echo.push_str(&format!("{k}={v}\n"));
        }
        let sub = dir.as_ref().map(|d| d.join(format!("cell-{id}")));
        let run = train_and_report(&ds, &cfg, &spec.eval, &spec.strata, &ds, sub.as_deref(), &echo)?;
        out.push(SweepCell {
            settings,
            report: run.report,
        });
    }
    if let Some(dir) = &dir {
        write(&dir.join("sweep.rows"), &sweep_rows(&out, &spec.eval.cutoffs))?;
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct CaseStudy {
    pub run: TrainRun,
    pub weights: RelevanceWeightExport,
    /// `(intra-cluster mean z, cross-cluster mean z)` for planted data.
    pub cluster_means: Option<(f64, f64)>,
}

/// Trains the configured variant and exports learned relevance weights for
/// social ties, sorted ascending.
pub fn run_case_study(spec: &ExperimentSpec, write_out: bool) -> Result<CaseStudy> {
    let (ds, dir) = prepare(spec, Task::CaseStudy, write_out)?;
    let run = train_and_report(
        &ds,
        &spec.train,
        &spec.eval,
        &spec.strata,
        &ds,
        dir.as_deref(),
        &spec.echo(),
    )?;
    let weights = export_relevance_weights(&run.outcome.model, &ds, spec.case_sample, spec.train.seed);
    let cluster_means = match &spec.source {
        DatasetSource::Planted(cfg) => {
            let planted = planted_clusters(cfg, spec.split_seed)?;
            let intra = weights.mean_z(|r| !planted.is_cross(r.user, r.other));
            let cross = weights.mean_z(|r| planted.is_cross(r.user, r.other));
            intra.zip(cross)
        }
        _ => None,
    };
    if let Some(dir) = &dir {
        let mut text = weights.to_text(&ds);
        if let Some((intra, cross)) = cluster_means {
            text.push_str(&format!("# mean z intra={intra:.6} cross={cross:.6}\n"));
        }
        write(&dir.join("relevance.txt"), &text)?;
    }
    Ok(CaseStudy {
        run,
        weights,
        cluster_means,
    })
}

/// Training settings for [`denoising_trial`]: a small model trained long
/// enough for the relevance weights to separate tie kinds.
pub fn denoising_config(seed: u64) -> TrainConfig {
    TrainConfig {
        dim: 32,
        layers: 2,
        lr: 5e-3,
        batch_size: 256,
        lambda1: 0.1,
        lambda2: 0.1,
        lambda3: 1e-4,
        epochs: 30,
        patience: 100,
        seed,
        ..TrainConfig::default()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoisingTrial {
    pub seed: u64,
    pub hr_full: f64,
    pub hr_social_only: f64,
    pub z_intra: f64,
    pub z_cross: f64,
}

impl DenoisingTrial {
    pub fn hr_gain(&self) -> f64 {
        self.hr_full - self.hr_social_only
    }
}

/// Trains `full` and `dsl_s` on the default planted fixture (seeded by
/// `seed`) and compares test HR@10 and the learned weights of intra- vs
/// cross-cluster ties.
pub fn denoising_trial(seed: u64) -> Result<DenoisingTrial> {
    let planted = planted_clusters(
        &PlantedConfig {
            seed,
            ..PlantedConfig::default()
        },
        seed,
    )?;
    let ds = &planted.dataset;
    let eval = EvalOptions {
        seed,
        ..EvalOptions::default()
    };
    let run = |variant| -> Result<TrainOutcome> {
        train(
            ds,
            &TrainConfig {
                variant,
                ..denoising_config(seed)
            },
            &eval,
            |_, _| Ok(()),
        )
    };
    let full = run(Variant::Full)?;
    let social_only = run(Variant::DslS)?;
    let hr = |o: &TrainOutcome| crate::eval::evaluate(&o.model, ds, Split::Test, &eval).hr_at(10);
    let weights = export_relevance_weights(&full.model, ds, None, seed);
    let mean = |cross: bool| {
        weights
            .mean_z(|r| planted.is_cross(r.user, r.other) == cross)
            .unwrap_or(f64::NAN)
    };
    Ok(DenoisingTrial {
        seed,
        hr_full: hr(&full),
        hr_social_only: hr(&social_only),
        z_intra: mean(false),
        z_cross: mean(true),
    })
}
