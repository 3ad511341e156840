use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dslrec::data::{stratify_by_degree, Split};
use dslrec::eval::evaluate_stratified;
use dslrec::experiment::{
    ablation_table, run_ablation, run_case_study, run_robustness, run_sweep, run_train, sweep_rows, DatasetSource,
    ExperimentSpec,
};
use dslrec::model::ModelState;
use dslrec::objective::Graphs;
use dslrec::oracle::{forward_suite, gradient_suite};
use dslrec::{Error, Result};

#[derive(Parser)]
#[command(
    name = "dslrec",
    version,
    about = "Dual-view social recommender with denoised alignment"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model, checkpoint the best epoch and report test metrics.
    Train(Common),
    /// Evaluate a saved checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint directory written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train every variant with shared seeds and splits.
    Ablate(Common),
    /// Retrain on train graphs corrupted with fake edges.
    Robust(Common),
    /// Train the cartesian product of `sweep.<key>=a,b,...` axes.
    Sweep(Common),
    /// Export learned relevance weights of social ties.
    CaseStudy(Common),
    /// Run the gradient and dense-reference oracle suites.
    Check {
        #[arg(long, default_value_t = 24)]
        gradient_cases: u64,
        #[arg(long, default_value_t = 100)]
        forward_cases: u64,
    },
}

#[derive(Args, Clone)]
struct Common {
    /// Directory holding dataset directories.
    #[arg(long)]
    dataset_dir: Option<PathBuf>,
    /// Dataset name under `--dataset-dir`, a path, or `synthetic`.
    #[arg(long)]
    dataset: Option<String>,
    /// `key=value` config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    #[arg(long)]
    variant: Option<String>,
    /// Worker threads (0 = rayon default).
    #[arg(long, default_value_t = 0)]
    threads: usize,
    /// Sampled negatives per evaluated user.
    #[arg(long)]
    negatives: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn spec(&self) -> Result<ExperimentSpec> {
        let text = match &self.config {
            Some(path) => std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?,
            None => String::new(),
        };
        let config = dslrec::data::parse_key_values(&text).map_err(Error::Config)?;
        let dataset_dir = self
            .dataset_dir
            .clone()
            .or_else(|| config.get("dataset_dir").map(PathBuf::from));
        let dataset = self.dataset.clone().or_else(|| config.get("dataset").cloned());
        let source = DatasetSource::resolve(dataset_dir.as_deref(), dataset.as_deref())?;
        let mut spec = ExperimentSpec::new(source, &self.out);
        spec.apply_config_text(&text)?;
        if let Some(seed) = self.seed {
            spec.set("seed", &seed.to_string())?;
            spec.set("split_seed", &seed.to_string())?;
            spec.set("eval_seed", &seed.to_string())?;
        }
        if let Some(v) = &self.variant {
            spec.set("variant", v)?;
        }
        if let Some(n) = self.negatives {
            spec.set("negatives", &n.to_string())?;
        }
        if let Some(n) = self.epochs {
            spec.set("epochs", &n.to_string())?;
        }
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("`--set {kv}` is not key=value")))?;
            spec.set(k.trim(), v.trim())?;
        }
        spec.out = self.out.clone();
        Ok(spec)
    }

    fn install_threads(&self) {
        if self.threads > 0 {
            if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(self.threads).build_global() {
                log::warn!("thread pool: {e}");
            }
        }
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train(c) => {
            c.install_threads();
            let run = run_train(&c.spec()?, true)?;
            print!("{}", run.report.to_table());
            if let Some(dir) = &run.dir {
                println!("wrote {}", dir.display());
            }
        }
        Command::Eval { common, checkpoint } => {
            common.install_threads();
            let spec = common.spec()?;
            let ds = spec.source.load(spec.split_seed)?;
            let (mut ms, layers) = ModelState::load(&checkpoint)?;
            if ms.num_users() != ds.num_users || ms.num_items() != ds.num_items {
                return Err(Error::Dimension(format!(
                    "checkpoint has {}x{} users x items, dataset {}x{}",
                    ms.num_users(),
                    ms.num_items(),
                    ds.num_users,
                    ds.num_items
                )));
            }
            let graphs = Graphs::from_dataset(&ds);
            ms.encode(&graphs.interaction, &graphs.social, layers)?;
            let strata = stratify_by_degree(&ds, &spec.strata)?;
            let report = evaluate_stratified(&ms, &ds, &strata, Split::Test, &spec.eval);
            print!("{}", report.to_table());
        }
        Command::Ablate(c) => {
            c.install_threads();
            let spec = c.spec()?;
            let rows = run_ablation(&spec, true)?;
            print!("{}", ablation_table(&rows, &spec.eval.cutoffs));
        }
        Command::Robust(c) => {
            c.install_threads();
            let spec = c.spec()?;
            print!("{}", run_robustness(&spec, true)?.to_text(&spec.eval.cutoffs));
        }
        Command::Sweep(c) => {
            c.install_threads();
            let spec = c.spec()?;
            print!("{}", sweep_rows(&run_sweep(&spec, true)?, &spec.eval.cutoffs));
        }
        Command::CaseStudy(c) => {
            c.install_threads();
            let study = run_case_study(&c.spec()?, true)?;
            print!("{}", study.run.report.to_table());
            if let Some((intra, cross)) = study.cluster_means {
                println!("mean z intra-cluster {intra:.6} cross-cluster {cross:.6}");
            }
            if let Some(dir) = &study.run.dir {
                println!("wrote {}", dir.join("relevance.txt").display());
            }
        }
        Command::Check {
            gradient_cases,
            forward_cases,
        } => {
            let checks = gradient_suite(gradient_cases, 1e-6)?;
            let worst = checks.iter().map(|c| c.error).fold(0.0, f64::max);
            for c in checks.iter().filter(|c| c.error > 1e-5) {
                println!(
                    "gradient seed {} {} L={}: {} rel err {:e}",
                    c.seed, c.variant, c.layers, c.tensor, c.error
                );
            }
            let grad_ok = worst <= 1e-5;
            println!(
                "gradients: {} cases, worst relative error {worst:.3e} [{}]",
                checks.len(),
                if grad_ok { "ok" } else { "FAIL" }
            );
            let gap = forward_suite(forward_cases, 64)?;
            let fwd_ok = gap <= 1e-10;
            println!(
                "forward: {forward_cases} graphs, worst gap {gap:.3e} [{}]",
                if fwd_ok { "ok" } else { "FAIL" }
            );
            return Ok(grad_ok && fwd_ok);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
