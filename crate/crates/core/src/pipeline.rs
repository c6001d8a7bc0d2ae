//! Stage runners shared by the command-line front end and the experiment
//! tests, plus the flat `key = value` settings that configure them.
//!
//! # Seeds
//!
//! One master seed drives every stage. Stage `s` gets the first `u64` drawn
//! from `ChaCha8Rng::seed_from_u64(master)` on stream `s`, with
//! `data = 0`, `split = 1`, `train = 2`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cds::DynamicsConfig;
use crate::data::{
    generate_synthetic, load_interactions, partition_users, split_loo, InputFormat, InteractionDataset, SplitDataset,
    SyntheticSpec, UserPartition, DEFAULT_NEGATIVES,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport, SplitKind, DEFAULT_CUTOFF};
use crate::fairness::{naive_clusters, ucds_clusters, ClusterMap, ClusterSource};
use crate::graph::DEFAULT_ALPHA_MARGIN;
use crate::recsys::{train, ModelParams, TrainConfig, TrainLog};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Data = 0,
    Split = 1,
    Train = 2,
}

/// Seed for one stage derived from the master seed.
pub fn stage_seed(master: u64, stage: Stage) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(stage as u64);
    rng.next_u64()
}

/// Every tunable of the pipeline. Each field is reachable through
/// [`Settings::set`] under the key listed in [`Settings::KEYS`].
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub seed: u64,
    pub format: InputFormat,
    /// Share of users treated as advantaged, both when generating synthetic
    /// data and when partitioning any dataset.
    pub advantaged_fraction: f64,
    pub negatives: usize,
    pub synthetic: SyntheticSpec,
    pub method: ClusterSource,
    pub alpha_margin: f64,
    pub dynamics: DynamicsConfig,
    pub train: TrainConfig,
    pub split: SplitKind,
    pub cutoff: usize,
}

impl Default for Settings {
    fn default() -> Self {
        let synthetic = SyntheticSpec::default();
        Self {
            seed: 0,
            format: InputFormat::TsvTriplets,
            advantaged_fraction: synthetic.advantaged_fraction,
            negatives: DEFAULT_NEGATIVES,
            synthetic,
            method: ClusterSource::Ucds,
            alpha_margin: DEFAULT_ALPHA_MARGIN,
            dynamics: DynamicsConfig::default(),
            train: TrainConfig::default(),
            split: SplitKind::Test,
            cutoff: DEFAULT_CUTOFF,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| Error::invalid(format!("{key}: cannot parse {value:?}: {e}")))
}

impl Settings {
    pub const KEYS: &'static [(&'static str, &'static str)] = &[
        ("seed", "master seed expanded into per-stage seeds"),
        ("format", "input format: tsv | csv"),
        ("advantaged_fraction", "share of users in the advantaged group"),
        ("negatives", "sampled negatives per held-out positive"),
        ("n_users", "synthetic: number of users"),
        ("n_items", "synthetic: number of items"),
        ("latent_dim", "synthetic: dimension of the generative factors"),
        ("interactions_advantaged", "synthetic: interactions per advantaged user"),
        ("interactions_disadvantaged", "synthetic: interactions per disadvantaged user"),
        ("n_archetypes", "synthetic: number of planted taste archetypes"),
        ("noise", "synthetic: per-user deviation from the archetype"),
        ("method", "cluster source: ucds | naive"),
        ("alpha_margin", "added to the eigenvalue bound when choosing alpha"),
        ("tolerance", "dynamics: stop when the step is below this"),
        ("max_iterations", "dynamics: iteration cap"),
        ("support_threshold", "dynamics: minimum weight of a cluster member"),
        ("max_alpha_retries", "dynamics: alpha doublings after the target drops out"),
        ("prune", "dynamics: drop undrained vertices after convergence (true | false)"),
        ("dim", "embedding size"),
        ("learning_rate", "optimizer step size"),
        ("l2_reg", "L2 penalty on touched embedding rows"),
        ("epochs", "training epochs"),
        ("negatives_per_positive", "sampled negatives per training positive"),
        ("batch_size", "samples per optimizer step"),
        ("beta", "weight of the fairness loss"),
        ("k", "cluster members averaged per disadvantaged user"),
        ("optimizer", "adam | sgd"),
        ("member_gradients", "fairness gradient on cluster members: flow | frozen"),
        ("split", "evaluation split: test | validation"),
        ("cutoff", "ranking cutoff for NDCG and F1"),
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "format" => self.format = parse(key, v)?,
            "advantaged_fraction" => {
                self.advantaged_fraction = parse(key, v)?;
                self.synthetic.advantaged_fraction = self.advantaged_fraction;
            }
            "negatives" => self.negatives = parse(key, v)?,
            "n_users" => self.synthetic.n_users = parse(key, v)?,
            "n_items" => self.synthetic.n_items = parse(key, v)?,
            "latent_dim" => self.synthetic.latent_dim = parse(key, v)?,
            "interactions_advantaged" => self.synthetic.interactions_advantaged = parse(key, v)?,
            "interactions_disadvantaged" => self.synthetic.interactions_disadvantaged = parse(key, v)?,
            "n_archetypes" => self.synthetic.n_archetypes = parse(key, v)?,
            "noise" => self.synthetic.noise = parse(key, v)?,
            "method" => self.method = parse(key, v)?,
            "alpha_margin" => self.alpha_margin = parse(key, v)?,
            "tolerance" => self.dynamics.tolerance = parse(key, v)?,
            "max_iterations" => self.dynamics.max_iterations = parse(key, v)?,
            "support_threshold" => self.dynamics.support_threshold = parse(key, v)?,
            "max_alpha_retries" => self.dynamics.max_alpha_retries = parse(key, v)?,
            "prune" => self.dynamics.prune = parse(key, v)?,
            "dim" => self.train.dim = parse(key, v)?,
            "learning_rate" => self.train.learning_rate = parse(key, v)?,
            "l2_reg" => self.train.l2_reg = parse(key, v)?,
            "epochs" => self.train.epochs = parse(key, v)?,
            "negatives_per_positive" => self.train.negatives_per_positive = parse(key, v)?,
            "batch_size" => self.train.batch_size = parse(key, v)?,
            "beta" => self.train.beta = parse(key, v)?,
            "k" => self.train.k = parse(key, v)?,
            "optimizer" => self.train.optimizer = parse(key, v)?,
            "member_gradients" => self.train.member_gradients = parse(key, v)?,
            "split" => self.split = parse(key, v)?,
            "cutoff" => self.cutoff = parse(key, v)?,
            _ => return Err(Error::invalid(format!("unknown setting {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines. Blank lines and lines starting with `#`
    /// are skipped.
    pub fn apply_config_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("config line {}: expected key = value", n + 1)))?;
            self.set(key.trim(), value.trim())
                .map_err(|e| Error::invalid(format!("config line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            seed: stage_seed(self.seed, Stage::Data),
            ..self.synthetic.clone()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: stage_seed(self.seed, Stage::Train),
            ..self.train.clone()
        }
    }
}

/// Dataset with its partition and leave-one-out split.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub dataset: InteractionDataset,
    pub partition: UserPartition,
    pub split: SplitDataset,
}

pub fn prepare(dataset: InteractionDataset, settings: &Settings) -> Result<Prepared> {
    let partition = partition_users(&dataset, settings.advantaged_fraction)?;
    let split = split_loo(&dataset, settings.negatives, stage_seed(settings.seed, Stage::Split))?;
    Ok(Prepared {
        dataset,
        partition,
        split,
    })
}

pub fn load_prepared(path: impl AsRef<Path>, settings: &Settings) -> Result<Prepared> {
    prepare(load_interactions(path, settings.format)?, settings)
}

pub fn synthetic_dataset(settings: &Settings) -> Result<InteractionDataset> {
    generate_synthetic(&settings.synthetic_spec())
}

/// Clusters every disadvantaged user with the configured method.
pub fn build_clusters(p: &Prepared, settings: &Settings) -> Result<ClusterMap> {
    match settings.method {
        ClusterSource::Ucds => ucds_clusters(
            &p.split.train,
            &p.partition,
            settings.train.k,
            settings.alpha_margin,
            &settings.dynamics,
        ),
        ClusterSource::Naive => naive_clusters(&p.split.train, &p.partition, settings.train.k),
    }
}

pub fn train_model(p: &Prepared, clusters: Option<&ClusterMap>, settings: &Settings) -> Result<(ModelParams, TrainLog)> {
    train(&p.split, clusters, &p.partition, &settings.train_config())
}

pub fn evaluate_model(p: &Prepared, params: &ModelParams, settings: &Settings) -> Result<EvalReport> {
    evaluate(params, &p.split, &p.partition, settings.split, settings.cutoff)
}
