//! Command-line front end: `gen-synthetic`, `cluster`, `train`, `evaluate`
//! and the all-in-one `pipeline`.
//!
//! Settings are resolved in order: built-in defaults, the `--config` file
//! (`key = value` lines), `--set key=value` flags, then the dedicated flags
//! of each subcommand. `ucds keys` lists every key.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use crate::artifacts::{
    load_checkpoint, load_cluster_cache, save_checkpoint, save_cluster_cache, save_report, save_train_log, Checkpoint,
};
use crate::eval::EvalReport;
use crate::fairness::{ClusterMap, ClusterSource};
use crate::pipeline::{
    build_clusters, evaluate_model, load_prepared, prepare, synthetic_dataset, train_model, Prepared, Settings,
};

#[derive(Debug, Parser)]
#[command(name = "ucds", version, about = "Fair user clustering and fairness-regularized recommendation")]
pub struct Cli {
    /// File of `key = value` settings (see `ucds keys`).
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one setting; may be repeated.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Master seed, expanded into per-stage seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for clustering and evaluation.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Log more (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a planted-archetype interaction dataset.
    GenSynthetic(GenArgs),
    /// Cluster every disadvantaged user and write the cluster cache.
    Cluster(ClusterArgs),
    /// Train the recommender and write a checkpoint and loss log.
    Train(TrainArgs),
    /// Evaluate a checkpoint and write a report.
    Evaluate(EvalArgs),
    /// Generate (or load) data, cluster, train and evaluate in one go.
    Pipeline(PipelineArgs),
    /// List every settings key.
    Keys,
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Interaction file with one `user item` pair per line.
    #[arg(long, value_name = "FILE")]
    data: PathBuf,
    /// tsv | csv
    #[arg(long)]
    format: Option<String>,
    /// Share of users treated as advantaged.
    #[arg(long)]
    advantaged_fraction: Option<f64>,
}

#[derive(Debug, Args)]
struct GenArgs {
    /// Destination TSV file.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Number of users.
    #[arg(long)]
    n_users: Option<usize>,
    /// Number of items.
    #[arg(long)]
    n_items: Option<usize>,
    /// Share of users generated as highly active.
    #[arg(long)]
    advantaged_fraction: Option<f64>,
}

#[derive(Debug, Args)]
struct ClusterArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Destination cluster cache (JSON Lines).
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// ucds | naive
    #[arg(long)]
    method: Option<String>,
    /// Members kept per cluster by the fairness loss.
    #[arg(long)]
    k: Option<usize>,
    /// Added to the eigenvalue bound when choosing alpha.
    #[arg(long)]
    alpha_margin: Option<f64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Cluster cache from `ucds cluster`. Required when beta > 0; at beta 0 it
    /// only feeds the logged fairness loss.
    #[arg(long, value_name = "FILE")]
    clusters: Option<PathBuf>,
    /// Destination checkpoint (JSON).
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    /// Per-epoch loss log (TSV).
    #[arg(long, value_name = "FILE")]
    log: Option<PathBuf>,
    /// Weight of the fairness loss.
    #[arg(long)]
    beta: Option<f64>,
    /// Cluster members averaged per disadvantaged user.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Embedding size.
    #[arg(long)]
    dim: Option<usize>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Checkpoint written by `ucds train`.
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    /// Destination report (JSON).
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// test | validation
    #[arg(long)]
    split: Option<String>,
    /// Ranking cutoff for NDCG and F1.
    #[arg(long)]
    cutoff: Option<usize>,
}

#[derive(Debug, Args)]
struct PipelineArgs {
    /// Directory receiving every artifact.
    #[arg(long, value_name = "DIR")]
    out_dir: PathBuf,
    /// Use this interaction file instead of generating synthetic data.
    #[arg(long, value_name = "FILE")]
    data: Option<PathBuf>,
    /// tsv | csv
    #[arg(long)]
    format: Option<String>,
    /// ucds | naive
    #[arg(long)]
    method: Option<String>,
    /// Weight of the fairness loss.
    #[arg(long)]
    beta: Option<f64>,
    /// Cluster members averaged per disadvantaged user.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
}

/// Raised for bad settings; mapped to exit code 2 like clap's own errors.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct UsageError(String);

fn flag<T: ToString>(key: &'static str, v: &Option<T>) -> Option<(&'static str, String)> {
    v.as_ref().map(|v| (key, v.to_string()))
}

impl DataArgs {
    fn overrides(&self) -> Vec<Option<(&'static str, String)>> {
        vec![flag("format", &self.format), flag("advantaged_fraction", &self.advantaged_fraction)]
    }
}

impl Command {
    fn overrides(&self) -> Vec<(&'static str, String)> {
        let list = match self {
            Command::GenSynthetic(a) => vec![
                flag("n_users", &a.n_users),
                flag("n_items", &a.n_items),
                flag("advantaged_fraction", &a.advantaged_fraction),
            ],
            Command::Cluster(a) => {
                let mut v = a.data.overrides();
                v.extend([flag("method", &a.method), flag("k", &a.k), flag("alpha_margin", &a.alpha_margin)]);
                v
            }
            Command::Train(a) => {
                let mut v = a.data.overrides();
                v.extend([
                    flag("beta", &a.beta),
                    flag("k", &a.k),
                    flag("epochs", &a.epochs),
                    flag("learning_rate", &a.learning_rate),
                    flag("dim", &a.dim),
                ]);
                v
            }
            Command::Evaluate(a) => {
                let mut v = a.data.overrides();
                v.extend([flag("split", &a.split), flag("cutoff", &a.cutoff)]);
                v
            }
            Command::Pipeline(a) => vec![
                flag("format", &a.format),
                flag("method", &a.method),
                flag("beta", &a.beta),
                flag("k", &a.k),
                flag("epochs", &a.epochs),
            ],
            Command::Keys => vec![],
        };
        list.into_iter().flatten().collect()
    }
}

fn resolve_settings(cli: &Cli) -> anyhow::Result<Settings> {
    let mut s = Settings::default();
    if let Some(path) = &cli.config {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        s.apply_config_text(&text)
            .map_err(|e| UsageError(format!("{}: {e}", path.display())))?;
    }
    for pair in &cli.set {
        let (key, value) = pair
            .split_once('=')
            .ok_or_else(|| UsageError(format!("--set expects KEY=VALUE, got {pair:?}")))?;
        s.set(key.trim(), value.trim()).map_err(|e| UsageError(e.to_string()))?;
    }
    if let Some(seed) = cli.seed {
        s.seed = seed;
    }
    for (key, value) in cli.command.overrides() {
        s.set(key, &value).map_err(|e| UsageError(e.to_string()))?;
    }
    Ok(s)
}

/// Parses `args` (including the program name), runs the command and maps the
/// outcome to an exit code: 0 success, 1 runtime failure, 2 usage error.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code().clamp(0, 255) as u8);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();

    let result = resolve_settings(&cli).and_then(|settings| {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads.unwrap_or(0))
            .build()
            .context("starting the worker pool")?;
        pool.install(|| execute(&cli.command, &settings))
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn execute(command: &Command, s: &Settings) -> anyhow::Result<()> {
    match command {
        Command::GenSynthetic(a) => gen_synthetic(&a.out, s),
        Command::Cluster(a) => {
            let p = load_prepared(&a.data.data, s)?;
            cluster(&p, &a.out, s).map(|_| ())
        }
        Command::Train(a) => {
            let p = load_prepared(&a.data.data, s)?;
            // at beta 0 a given cache is still loaded so the log reports the fairness loss
            let clusters = match (&a.clusters, s.train.beta > 0.0) {
                (Some(path), _) if path.exists() => Some(
                    load_cluster_cache(path, &p.dataset)
                        .with_context(|| format!("reading cluster cache {}", path.display()))?,
                ),
                (_, false) => None,
                (path, true) => bail!(
                    "beta is {} but no cluster cache was found{}; run `ucds cluster` first or pass --beta 0",
                    s.train.beta,
                    path.as_ref().map(|p| format!(" at {}", p.display())).unwrap_or_default()
                ),
            };
            train(&p, clusters.as_ref(), &a.checkpoint, a.log.as_deref(), s)
        }
        Command::Evaluate(a) => {
            let p = load_prepared(&a.data.data, s)?;
            evaluate(&p, &a.checkpoint, &a.out, s).map(|_| ())
        }
        Command::Pipeline(a) => pipeline(a, s),
        Command::Keys => {
            for (key, doc) in Settings::KEYS {
                println!("{key:28}{doc}");
            }
            Ok(())
        }
    }
}

fn gen_synthetic(out: &Path, s: &Settings) -> anyhow::Result<()> {
    let ds = synthetic_dataset(s)?;
    write_dataset(out, &ds)?;
    eprintln!(
        "wrote {} interactions for {} users and {} items to {}",
        ds.n_interactions(),
        ds.n_users(),
        ds.n_items(),
        out.display()
    );
    Ok(())
}

fn write_dataset(out: &Path, ds: &crate::data::InteractionDataset) -> anyhow::Result<()> {
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let file = std::fs::File::create(out).with_context(|| format!("creating {}", out.display()))?;
    let mut w = std::io::BufWriter::new(file);
    ds.write_tsv(&mut w).with_context(|| format!("writing {}", out.display()))?;
    std::io::Write::flush(&mut w).with_context(|| format!("writing {}", out.display()))?;
    Ok(())
}

fn cluster(p: &Prepared, out: &Path, s: &Settings) -> anyhow::Result<ClusterMap> {
    let start = std::time::Instant::now();
    let map = build_clusters(p, s)?;
    let sizes: Vec<usize> = map.entries.values().map(|c| c.members.len()).collect();
    let mean_size = sizes.iter().sum::<usize>() as f64 / sizes.len().max(1) as f64;
    eprintln!(
        "{} clusters for {} disadvantaged users: {} non-empty, mean size {mean_size:.2}, {:.2?}",
        map.source,
        map.len(),
        map.n_nonempty(),
        start.elapsed()
    );
    if map.source == ClusterSource::Ucds {
        let unconverged = map.entries.values().filter(|c| !c.converged).count();
        let iters: usize = map.entries.values().map(|c| c.iterations).sum();
        eprintln!(
            "dynamics: {unconverged} runs hit the iteration cap, mean {:.1} iterations",
            iters as f64 / map.len().max(1) as f64
        );
    }
    save_cluster_cache(out, &map, &p.dataset)?;
    info!("cluster cache written to {}", out.display());
    Ok(map)
}

fn train(
    p: &Prepared,
    clusters: Option<&ClusterMap>,
    checkpoint: &Path,
    log_path: Option<&Path>,
    s: &Settings,
) -> anyhow::Result<()> {
    let config = s.train_config();
    let (params, log) = train_model(p, clusters, s)?;
    if let (Some(first), Some(last)) = (log.first(), log.last()) {
        eprintln!(
            "trained {} epochs: utility loss {:.5} -> {:.5}, fairness loss {:.5} -> {:.5}",
            log.records.len(),
            first.utility_loss,
            last.utility_loss,
            first.fairness_loss,
            last.fairness_loss
        );
    }
    save_checkpoint(checkpoint, &Checkpoint { config, params })?;
    if let Some(path) = log_path {
        save_train_log(path, &log)?;
    }
    Ok(())
}

fn evaluate(p: &Prepared, checkpoint: &Path, out: &Path, s: &Settings) -> anyhow::Result<EvalReport> {
    let ckpt = load_checkpoint(checkpoint).with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    if ckpt.config.seed != s.train_config().seed {
        warn!("checkpoint was trained under a different master seed; the split may not match");
    }
    let report = evaluate_model(p, &ckpt.params, s)?;
    let show = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    eprintln!(
        "{} NDCG@{}: overall {} adv {} disadv {} gap {}",
        report.split,
        report.k,
        show(report.ndcg.overall),
        show(report.ndcg.advantaged),
        show(report.ndcg.disadvantaged),
        show(report.ndcg.uof_gap)
    );
    save_report(out, &report)?;
    Ok(report)
}

fn pipeline(a: &PipelineArgs, s: &Settings) -> anyhow::Result<()> {
    let dir = &a.out_dir;
    let p = match &a.data {
        Some(path) => load_prepared(path, s).context("stage data")?,
        None => {
            let ds = synthetic_dataset(s).context("stage data")?;
            write_dataset(&dir.join("data.tsv"), &ds).context("stage data")?;
            prepare(ds, s).context("stage data")?
        }
    };
    let clusters = if s.train.beta > 0.0 {
        let file = format!("clusters_{}.jsonl", s.method);
        Some(cluster(&p, &dir.join(file), s).context("stage cluster")?)
    } else {
        None
    };
    train(
        &p,
        clusters.as_ref(),
        &dir.join("checkpoint.json"),
        Some(&dir.join("train_log.tsv")),
        s,
    )
    .context("stage train")?;
    evaluate(&p, &dir.join("checkpoint.json"), &dir.join("report.json"), s).context("stage evaluate")?;
    Ok(())
}
