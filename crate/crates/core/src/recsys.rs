//! Matrix-factorization backbone: embedding tables, pointwise logistic loss
//! with sampled negatives and a training loop that adds the fairness term.

use std::collections::BTreeMap;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{SplitDataset, UserPartition};
use crate::error::{Error, Result};
use crate::fairness::{fairness_loss, ClusterMap, MemberGradients};
use crate::linalg::dot;

const INIT_STD: f64 = 0.01;
const SIGMOID_CLAMP: f64 = 1e-12;

/// Dense row-major embedding table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embeddings {
    rows: usize,
    dim: usize,
    data: Vec<f64>,
}

impl Embeddings {
    pub fn zeros(rows: usize, dim: usize) -> Self {
        Self {
            rows,
            dim,
            data: vec![0.0; rows * dim],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::invalid("embedding rows differ in length"));
        }
        Ok(Self {
            rows: rows.len(),
            dim,
            data: rows.concat(),
        })
    }

    pub fn n_rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.data.chunks_exact(self.dim.max(1)).map(<[f64]>::to_vec).collect()
    }
}

/// Sparse gradient: one dense vector per touched row, in ascending row order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RowGrads {
    dim: usize,
    rows: BTreeMap<usize, Vec<f64>>,
}

impl RowGrads {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            rows: BTreeMap::new(),
        }
    }

    /// `grad[row] += scale * v`.
    pub fn add_scaled(&mut self, row: usize, v: &[f64], scale: f64) {
        let dim = self.dim;
        let g = self.rows.entry(row).or_insert_with(|| vec![0.0; dim]);
        g.iter_mut().zip(v).for_each(|(gi, vi)| *gi += scale * vi);
    }

    pub fn get(&self, row: usize) -> Option<&[f64]> {
        self.rows.get(&row).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.rows.iter().map(|(&r, g)| (r, g.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// `self += scale * other`.
    pub fn merge_scaled(&mut self, other: &RowGrads, scale: f64) {
        for (row, g) in other.iter() {
            self.add_scaled(row, g, scale);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub user_embeddings: Embeddings,
    pub item_embeddings: Embeddings,
}

impl ModelParams {
    pub fn dim(&self) -> usize {
        self.user_embeddings.dim()
    }

    pub fn n_users(&self) -> usize {
        self.user_embeddings.n_rows()
    }

    pub fn n_items(&self) -> usize {
        self.item_embeddings.n_rows()
    }

    pub fn is_finite(&self) -> bool {
        self.user_embeddings
            .as_slice()
            .iter()
            .chain(self.item_embeddings.as_slice())
            .all(|v| v.is_finite())
    }

    /// Score without bounds checks, for hot loops over validated indices.
    #[inline]
    pub(crate) fn score(&self, user: usize, item: usize) -> f64 {
        dot(self.user_embeddings.row(user), self.item_embeddings.row(item))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub const ADAM: Optimizer = Optimizer::Adam {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    };
}

impl FromStr for Optimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Optimizer::Sgd),
            "adam" => Ok(Optimizer::ADAM),
            other => Err(Error::invalid(format!("unknown optimizer '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub dim: usize,
    pub learning_rate: f64,
    pub l2_reg: f64,
    pub epochs: usize,
    pub negatives_per_positive: usize,
    /// Samples (positives plus their negatives) per optimizer step.
    pub batch_size: usize,
    /// Weight of the fairness loss.
    pub beta: f64,
    /// Cluster members averaged per disadvantaged user.
    pub k: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
    pub member_gradients: MemberGradients,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            learning_rate: 1e-4,
            l2_reg: 1e-4,
            epochs: 50,
            negatives_per_positive: 4,
            batch_size: 256,
            beta: 1e-5,
            k: 3,
            seed: 0,
            optimizer: Optimizer::ADAM,
            member_gradients: MemberGradients::Flow,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::invalid("embedding dim must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::invalid("beta must be non-negative"));
        }
        if !(self.l2_reg >= 0.0 && self.l2_reg.is_finite()) {
            return Err(Error::invalid("l2_reg must be non-negative"));
        }
        if self.k == 0 {
            return Err(Error::invalid("k must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        Ok(())
    }
}

/// Stream ids on the ChaCha generator seeded with `TrainConfig::seed`.
const INIT_STREAM: u64 = 0;
const TRAIN_STREAM: u64 = 1;

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Gaussian(0, 0.01²) initialization of both tables.
pub fn init_params(n_users: usize, n_items: usize, cfg: &TrainConfig) -> Result<ModelParams> {
    if n_users == 0 || n_items == 0 {
        return Err(Error::invalid("need at least one user and one item"));
    }
    if cfg.dim == 0 {
        return Err(Error::invalid("embedding dim must be at least 1"));
    }
    let mut rng = rng_for(cfg.seed, INIT_STREAM);
    let normal = Normal::new(0.0, INIT_STD).expect("finite std");
    let mut table = |rows: usize| {
        let mut e = Embeddings::zeros(rows, cfg.dim);
        e.as_mut_slice().iter_mut().for_each(|v| *v = normal.sample(&mut rng));
        e
    };
    let user_embeddings = table(n_users);
    let item_embeddings = table(n_items);
    Ok(ModelParams {
        user_embeddings,
        item_embeddings,
    })
}

pub fn predict_score(params: &ModelParams, user: usize, item: usize) -> Result<f64> {
    if user >= params.n_users() || item >= params.n_items() {
        return Err(Error::invalid(format!(
            "index ({user}, {item}) outside {}x{} model",
            params.n_users(),
            params.n_items()
        )));
    }
    Ok(params.score(user, item))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Sample {
    pub user: usize,
    pub item: usize,
    pub positive: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub users: RowGrads,
    pub items: RowGrads,
}

fn sigmoid(s: f64) -> f64 {
    1.0 / (1.0 + (-s).exp())
}

/// Mean binary cross-entropy over the batch plus `l2_reg` times the squared
/// norm of every distinct embedding row the batch touches. Gradients are
/// returned only for those rows.
pub fn utility_loss_and_grads(params: &ModelParams, batch: &[Sample], cfg: &TrainConfig) -> Result<(f64, Gradients)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty training batch"));
    }
    let dim = params.dim();
    let mut users = RowGrads::new(dim);
    let mut items = RowGrads::new(dim);
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    for s in batch {
        let p = params.user_embeddings.row(s.user);
        let q = params.item_embeddings.row(s.item);
        let sig = sigmoid(dot(p, q)).clamp(SIGMOID_CLAMP, 1.0 - SIGMOID_CLAMP);
        let y = if s.positive { 1.0 } else { 0.0 };
        loss -= y * sig.ln() + (1.0 - y) * (1.0 - sig).ln();
        let err = (sig - y) * scale;
        users.add_scaled(s.user, q, err);
        items.add_scaled(s.item, p, err);
    }
    loss *= scale;

    if cfg.l2_reg > 0.0 {
        for (grads, table) in [
            (&mut users, &params.user_embeddings),
            (&mut items, &params.item_embeddings),
        ] {
            let touched: Vec<usize> = grads.iter().map(|(r, _)| r).collect();
            for r in touched {
                let row = table.row(r);
                loss += cfg.l2_reg * dot(row, row);
                grads.add_scaled(r, row, 2.0 * cfg.l2_reg);
            }
        }
    }
    Ok((loss, Gradients { users, items }))
}

/// Loss values for one finished epoch. The fairness value is measured on the
/// embeddings the epoch ended with.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub utility_loss: f64,
    pub fairness_loss: f64,
    pub combined_loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn first(&self) -> Option<&EpochRecord> {
        self.records.first()
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }
}

/// Per-parameter optimizer state over one embedding table.
struct TableState {
    m: Vec<f64>,
    v: Vec<f64>,
}

struct OptimizerState {
    kind: Optimizer,
    lr: f64,
    step: i32,
    users: TableState,
    items: TableState,
}

impl OptimizerState {
    fn new(kind: Optimizer, lr: f64, params: &ModelParams) -> Self {
        let state = |e: &Embeddings| TableState {
            m: vec![0.0; e.as_slice().len()],
            v: vec![0.0; e.as_slice().len()],
        };
        Self {
            kind,
            lr,
            step: 0,
            users: state(&params.user_embeddings),
            items: state(&params.item_embeddings),
        }
    }

    fn apply(&mut self, params: &mut ModelParams, grads: &Gradients) {
        self.step += 1;
        let (kind, lr, step) = (self.kind, self.lr, self.step);
        update_table(kind, lr, step, &mut params.user_embeddings, &mut self.users, &grads.users);
        update_table(kind, lr, step, &mut params.item_embeddings, &mut self.items, &grads.items);
    }
}

fn update_table(kind: Optimizer, lr: f64, step: i32, table: &mut Embeddings, state: &mut TableState, grads: &RowGrads) {
    let dim = table.dim();
    match kind {
        Optimizer::Sgd => {
            for (row, g) in grads.iter() {
                table.row_mut(row).iter_mut().zip(g).for_each(|(w, gi)| *w -= lr * gi);
            }
        }
        Optimizer::Adam { beta1, beta2, eps } => {
            // dense update: rows without a gradient still move on momentum
            let bias1 = 1.0 - beta1.powi(step);
            let bias2 = 1.0 - beta2.powi(step);
            let zero = vec![0.0; dim];
            for row in 0..table.n_rows() {
                let g = grads.get(row).unwrap_or(&zero);
                let base = row * dim;
                let w = table.row_mut(row);
                for c in 0..dim {
                    let m = &mut state.m[base + c];
                    let v = &mut state.v[base + c];
                    *m = beta1 * *m + (1.0 - beta1) * g[c];
                    *v = beta2 * *v + (1.0 - beta2) * g[c] * g[c];
                    w[c] -= lr * (*m / bias1) / ((*v / bias2).sqrt() + eps);
                }
            }
        }
    }
}

/// Trains the backbone on `split.train`, optionally with the fairness term
/// `beta * L_fairness` over `clusters`, averaging the top `cfg.k` members of
/// each cluster (the map's own `k` is ignored).
///
/// Each epoch shuffles the training positives, pairs every positive with
/// freshly sampled negatives and takes one optimizer step per batch. The
/// fairness loss and its gradient are computed once at the start of the
/// epoch from the current user embeddings and added to every step of that
/// epoch. With `clusters = None` or `beta = 0` this is plain backbone
/// training.
pub fn train(
    split: &SplitDataset,
    clusters: Option<&ClusterMap>,
    partition: &UserPartition,
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainLog)> {
    cfg.validate()?;
    if partition.n_users() != split.n_users {
        return Err(Error::invalid(format!(
            "partition covers {} users, split has {}",
            partition.n_users(),
            split.n_users
        )));
    }
    if let Some(map) = clusters {
        if let Some((&t, _)) = map.entries.iter().find(|(&t, c)| {
            t >= split.n_users || c.members.iter().any(|m| m.user >= split.n_users)
        }) {
            return Err(Error::invalid(format!("cluster for user {t} references unknown users")));
        }
    }

    let capped = clusters.map(|m| m.clone().with_k(cfg.k)).transpose()?;
    let clusters = capped.as_ref();
    let mut params = init_params(split.n_users, split.n_items, cfg)?;
    let mut opt = OptimizerState::new(cfg.optimizer, cfg.learning_rate, &params);
    let mut rng = rng_for(cfg.seed, TRAIN_STREAM);
    let mut positives: Vec<(usize, usize)> = split.train_pairs().collect();
    let mut log = TrainLog::default();
    let fair_weight = clusters.filter(|_| cfg.beta > 0.0);
    let per_step = cfg.negatives_per_positive + 1;
    let positives_per_batch = cfg.batch_size.div_ceil(per_step).max(1);

    for epoch in 0..cfg.epochs {
        positives.shuffle(&mut rng);
        let fair_grads = fair_weight.map(|map| {
            let fl = fairness_loss(&params.user_embeddings, map, cfg.member_gradients);
            fl.grads
        });

        let mut loss_sum = 0.0;
        let mut n_samples = 0usize;
        for chunk in positives.chunks(positives_per_batch) {
            let mut batch = Vec::with_capacity(chunk.len() * per_step);
            for &(u, i) in chunk {
                batch.push(Sample {
                    user: u,
                    item: i,
                    positive: true,
                });
                let seen = &split.train[u];
                if seen.len() >= split.n_items {
                    continue;
                }
                for _ in 0..cfg.negatives_per_positive {
                    let j = loop {
                        let j = rng.random_range(0..split.n_items);
                        if seen.binary_search(&j).is_err() {
                            break j;
                        }
                    };
                    batch.push(Sample {
                        user: u,
                        item: j,
                        positive: false,
                    });
                }
            }
            let (loss, mut grads) = utility_loss_and_grads(&params, &batch, cfg)?;
            loss_sum += loss * batch.len() as f64;
            n_samples += batch.len();
            if let Some(fg) = &fair_grads {
                grads.users.merge_scaled(fg, cfg.beta);
            }
            opt.apply(&mut params, &grads);
        }

        let utility_loss = if n_samples > 0 {
            loss_sum / n_samples as f64
        } else {
            0.0
        };
        let fairness = clusters
            .map(|map| fairness_loss(&params.user_embeddings, map, cfg.member_gradients).value)
            .unwrap_or(0.0);
        log.records.push(EpochRecord {
            epoch: epoch + 1,
            utility_loss,
            fairness_loss: fairness,
            combined_loss: utility_loss + cfg.beta * fairness,
        });
    }
    Ok((params, log))
}
