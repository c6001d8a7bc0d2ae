//! Interaction data: ingestion, synthetic generation, activity-based user
//! partitioning and leave-one-out splitting.

use std::collections::HashMap;
use std::fs;
use std::io::{self, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Implicit-feedback interactions with dense user and item indices.
///
/// Each user's item list is sorted and free of duplicates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionDataset {
    user_ids: Vec<String>,
    item_ids: Vec<String>,
    user_items: Vec<Vec<usize>>,
}

impl InteractionDataset {
    /// Builds a dataset from index pairs. Duplicate pairs are collapsed.
    pub fn from_pairs(
        user_ids: Vec<String>,
        item_ids: Vec<String>,
        pairs: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self> {
        let mut user_items = vec![Vec::new(); user_ids.len()];
        for (u, i) in pairs {
            if u >= user_ids.len() || i >= item_ids.len() {
                return Err(Error::invalid(format!(
                    "pair ({u}, {i}) outside {}x{} index space",
                    user_ids.len(),
                    item_ids.len()
                )));
            }
            user_items[u].push(i);
        }
        for items in &mut user_items {
            items.sort_unstable();
            items.dedup();
        }
        Ok(Self {
            user_ids,
            item_ids,
            user_items,
        })
    }

    pub fn n_users(&self) -> usize {
        self.user_ids.len()
    }

    pub fn n_items(&self) -> usize {
        self.item_ids.len()
    }

    pub fn n_interactions(&self) -> usize {
        self.user_items.iter().map(Vec::len).sum()
    }

    pub fn user_ids(&self) -> &[String] {
        &self.user_ids
    }

    pub fn item_ids(&self) -> &[String] {
        &self.item_ids
    }

    /// Sorted items the user interacted with.
    pub fn user_items(&self, user: usize) -> &[usize] {
        &self.user_items[user]
    }

    pub fn interaction_count(&self, user: usize) -> usize {
        self.user_items[user].len()
    }

    pub fn user_interaction_counts(&self) -> Vec<usize> {
        self.user_items.iter().map(Vec::len).collect()
    }

    /// All `(user, item)` pairs, ordered by user then item.
    pub fn interactions(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.user_items
            .iter()
            .enumerate()
            .flat_map(|(u, items)| items.iter().map(move |&i| (u, i)))
    }

    pub fn user_index(&self) -> HashMap<&str, usize> {
        self.user_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i))
            .collect()
    }

    /// Writes one `user<TAB>item` line per interaction.
    pub fn write_tsv<W: Write>(&self, mut out: W) -> io::Result<()> {
        for (u, i) in self.interactions() {
            writeln!(out, "{}\t{}", self.user_ids[u], self.item_ids[i])?;
        }
        out.flush()
    }
}

/// Text layouts accepted by [`load_interactions`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputFormat {
    /// Whitespace-separated `user item [rating|timestamp ...]`.
    TsvTriplets,
    /// Comma-separated `user,item[,rating|timestamp ...]`.
    CsvTriplets,
}

impl FromStr for InputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tsv" | "tsv_triplets" => Ok(InputFormat::TsvTriplets),
            "csv" | "csv_triplets" => Ok(InputFormat::CsvTriplets),
            other => Err(Error::invalid(format!("unknown input format '{other}'"))),
        }
    }
}

/// Reads an interaction file. Blank lines and `#` comments are skipped and
/// any fields after the item id are ignored.
pub fn load_interactions(path: impl AsRef<Path>, format: InputFormat) -> Result<InteractionDataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_interactions(&text, format).map_err(|(line, message)| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    })?
    .ok_or_else(|| Error::EmptyDataset(path.to_path_buf()))
}

fn parse_interactions(
    text: &str,
    format: InputFormat,
) -> std::result::Result<Option<InteractionDataset>, (usize, String)> {
    let mut users: HashMap<String, usize> = HashMap::new();
    let mut items: HashMap<String, usize> = HashMap::new();
    let mut user_ids = Vec::new();
    let mut item_ids = Vec::new();
    let mut pairs = Vec::new();

    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields: Box<dyn Iterator<Item = &str>> = match format {
            InputFormat::TsvTriplets => Box::new(line.split_whitespace()),
            InputFormat::CsvTriplets => Box::new(line.split(',').map(str::trim)),
        };
        let user = fields.next().filter(|s| !s.is_empty());
        let item = fields.next().filter(|s| !s.is_empty());
        let (Some(user), Some(item)) = (user, item) else {
            return Err((lineno + 1, "expected at least a user id and an item id".into()));
        };
        let u = *users.entry(user.to_string()).or_insert_with(|| {
            user_ids.push(user.to_string());
            user_ids.len() - 1
        });
        let i = *items.entry(item.to_string()).or_insert_with(|| {
            item_ids.push(item.to_string());
            item_ids.len() - 1
        });
        pairs.push((u, i));
    }

    if pairs.is_empty() {
        return Ok(None);
    }
    let ds = InteractionDataset::from_pairs(user_ids, item_ids, pairs)
        .expect("indices are assigned densely while parsing");
    Ok(Some(ds))
}

/// Advantaged (high activity) and disadvantaged users.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserPartition {
    /// Ranked by interaction count descending, ties by ascending index.
    pub advantaged: Vec<usize>,
    /// Ascending user index.
    pub disadvantaged: Vec<usize>,
    pub threshold_fraction: f64,
}

impl UserPartition {
    pub fn n_users(&self) -> usize {
        self.advantaged.len() + self.disadvantaged.len()
    }

    /// Per-user membership flag, `true` for advantaged.
    pub fn advantaged_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.n_users()];
        for &u in &self.advantaged {
            mask[u] = true;
        }
        mask
    }
}

/// `ceil(fraction * n)`, tolerant to products like `0.05 * 20` landing a hair
/// above an integer.
pub(crate) fn top_fraction_count(fraction: f64, n: usize) -> usize {
    let raw = fraction * n as f64;
    let rounded = raw.round();
    if (raw - rounded).abs() < 1e-9 {
        rounded as usize
    } else {
        raw.ceil() as usize
    }
}

/// Marks the top `ceil(fraction * |users|)` users by interaction count as
/// advantaged.
pub fn partition_users(ds: &InteractionDataset, fraction: f64) -> Result<UserPartition> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid(format!("fraction must lie in (0, 1), got {fraction}")));
    }
    if ds.n_users() < 2 {
        return Err(Error::invalid("partitioning needs at least two users"));
    }
    let counts = ds.user_interaction_counts();
    let mut ranked: Vec<usize> = (0..ds.n_users()).collect();
    ranked.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));

    let n_adv = top_fraction_count(fraction, ds.n_users());
    let advantaged = ranked[..n_adv].to_vec();
    let mut disadvantaged = ranked[n_adv..].to_vec();
    disadvantaged.sort_unstable();
    Ok(UserPartition {
        advantaged,
        disadvantaged,
        threshold_fraction: fraction,
    })
}

/// One held-out positive ranked against sampled negatives.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeldOut {
    pub positive: usize,
    pub negatives: Vec<usize>,
}

/// Leave-one-out split. `validation[u]` and `test[u]` are `None` exactly for
/// the users listed in `excluded_users`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitDataset {
    pub n_users: usize,
    pub n_items: usize,
    /// Sorted training items per user.
    pub train: Vec<Vec<usize>>,
    pub validation: Vec<Option<HeldOut>>,
    pub test: Vec<Option<HeldOut>>,
    pub excluded_users: Vec<usize>,
}

impl SplitDataset {
    pub fn train_pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.train
            .iter()
            .enumerate()
            .flat_map(|(u, items)| items.iter().map(move |&i| (u, i)))
    }

    pub fn n_train(&self) -> usize {
        self.train.iter().map(Vec::len).sum()
    }
}

pub const DEFAULT_NEGATIVES: usize = 99;
const MIN_SPLIT_INTERACTIONS: usize = 3;

/// Holds out one random positive for test and another for validation per
/// eligible user, each paired with `n_negatives` items the user never touched.
pub fn split_loo(ds: &InteractionDataset, n_negatives: usize, seed: u64) -> Result<SplitDataset> {
    if n_negatives == 0 {
        return Err(Error::invalid("n_negatives must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_items = ds.n_items();
    let mut train = Vec::with_capacity(ds.n_users());
    let mut validation = Vec::with_capacity(ds.n_users());
    let mut test = Vec::with_capacity(ds.n_users());
    let mut excluded_users = Vec::new();

    for u in 0..ds.n_users() {
        let items = ds.user_items(u);
        if items.len() < MIN_SPLIT_INTERACTIONS || n_items - items.len() < n_negatives {
            excluded_users.push(u);
            train.push(items.to_vec());
            validation.push(None);
            test.push(None);
            continue;
        }
        let held = index::sample(&mut rng, items.len(), 2);
        let (test_pos, val_pos) = (items[held.index(0)], items[held.index(1)]);
        train.push(
            items
                .iter()
                .copied()
                .filter(|&i| i != test_pos && i != val_pos)
                .collect(),
        );

        let complement: Vec<usize> = (0..n_items).filter(|i| items.binary_search(i).is_err()).collect();
        let draw = |rng: &mut ChaCha8Rng| {
            let mut negs: Vec<usize> = index::sample(rng, complement.len(), n_negatives)
                .into_iter()
                .map(|k| complement[k])
                .collect();
            negs.sort_unstable();
            negs
        };
        let val_negs = draw(&mut rng);
        let test_negs = draw(&mut rng);
        validation.push(Some(HeldOut {
            positive: val_pos,
            negatives: val_negs,
        }));
        test.push(Some(HeldOut {
            positive: test_pos,
            negatives: test_negs,
        }));
    }

    Ok(SplitDataset {
        n_users: ds.n_users(),
        n_items,
        train,
        validation,
        test,
        excluded_users,
    })
}

/// Parameters of the planted-archetype generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_users: usize,
    pub n_items: usize,
    pub latent_dim: usize,
    pub advantaged_fraction: f64,
    pub interactions_advantaged: usize,
    pub interactions_disadvantaged: usize,
    pub n_archetypes: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_users: 100,
            n_items: 500,
            latent_dim: 8,
            advantaged_fraction: 0.05,
            interactions_advantaged: 80,
            interactions_disadvantaged: 8,
            n_archetypes: 5,
            noise: 0.1,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn n_advantaged(&self) -> usize {
        top_fraction_count(self.advantaged_fraction, self.n_users)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_users < 2 {
            return Err(Error::invalid("synthetic data needs at least two users"));
        }
        if !(self.advantaged_fraction > 0.0 && self.advantaged_fraction < 1.0) {
            return Err(Error::invalid("advantaged_fraction must lie in (0, 1)"));
        }
        let n_adv = self.n_advantaged();
        if n_adv == 0 || n_adv >= self.n_users {
            return Err(Error::invalid(format!(
                "advantaged_fraction {} leaves {n_adv} of {} users advantaged",
                self.advantaged_fraction, self.n_users
            )));
        }
        if self.interactions_disadvantaged < 3 {
            return Err(Error::invalid("interactions_disadvantaged must be at least 3"));
        }
        if self.interactions_advantaged <= self.interactions_disadvantaged {
            return Err(Error::invalid(
                "interactions_advantaged must exceed interactions_disadvantaged",
            ));
        }
        if self.interactions_advantaged > self.n_items {
            return Err(Error::invalid(format!(
                "{} interactions per advantaged user exceed the {}-item catalog",
                self.interactions_advantaged, self.n_items
            )));
        }
        if self.n_archetypes == 0 {
            return Err(Error::invalid("n_archetypes must be at least 1"));
        }
        if self.latent_dim == 0 {
            return Err(Error::invalid("latent_dim must be at least 1"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::invalid("noise must be a finite non-negative number"));
        }
        Ok(())
    }

    /// Archetype of every user. Users `0..n_advantaged` are the advantaged
    /// ones and cycle through all archetypes; disadvantaged users cycle
    /// through the archetypes that have at least one advantaged member.
    pub fn archetype_assignment(&self) -> Vec<usize> {
        let n_adv = self.n_advantaged();
        let covered = self.n_archetypes.min(n_adv);
        (0..self.n_users)
            .map(|u| {
                if u < n_adv {
                    u % self.n_archetypes
                } else {
                    (u - n_adv) % covered
                }
            })
            .collect()
    }
}

/// Generates a dataset where every user is a noisy copy of a shared archetype
/// and interacts with its highest-scoring items.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<InteractionDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.latent_dim;
    let mut gaussian = |n: usize| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(&mut rng)).collect() };

    let archetypes = gaussian(spec.n_archetypes * d);
    let item_factors = gaussian(spec.n_items * d);
    let n_adv = spec.n_advantaged();
    let assignment = spec.archetype_assignment();

    let mut pairs = Vec::new();
    for (u, &a) in assignment.iter().enumerate() {
        let noise = gaussian(d);
        let factor: Vec<f64> = archetypes[a * d..(a + 1) * d]
            .iter()
            .zip(&noise)
            .map(|(base, eps)| base + spec.noise * eps)
            .collect();
        let scores: Vec<f64> = item_factors
            .chunks_exact(d)
            .map(|item| item.iter().zip(&factor).map(|(x, y)| x * y).sum())
            .collect();
        let mut order: Vec<usize> = (0..spec.n_items).collect();
        order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
        let count = if u < n_adv {
            spec.interactions_advantaged
        } else {
            spec.interactions_disadvantaged
        };
        pairs.extend(order[..count].iter().map(|&i| (u, i)));
    }

    let user_ids = (0..spec.n_users).map(|u| format!("u{u}")).collect();
    let item_ids = (0..spec.n_items).map(|i| format!("i{i}")).collect();
    InteractionDataset::from_pairs(user_ids, item_ids, pairs)
}
