//! Leave-one-out ranking metrics and per-group aggregation.
//!
//! Each evaluated user has one held-out positive and a fixed list of sampled
//! negatives. The positive's rank among those candidates gives NDCG@k and
//! F1@k; means are taken per group and the user-oriented fairness gap is the
//! absolute difference of the advantaged and disadvantaged means.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{HeldOut, SplitDataset, UserPartition};
use crate::error::{Error, Result};
use crate::recsys::{predict_score, ModelParams};

pub const DEFAULT_CUTOFF: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    Validation,
    Test,
}

impl FromStr for SplitKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "validation" => Ok(Self::Validation),
            "test" => Ok(Self::Test),
            _ => Err(Error::invalid(format!("unknown split {s:?} (validation|test)"))),
        }
    }
}

impl fmt::Display for SplitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Validation => "validation",
            Self::Test => "test",
        })
    }
}

/// 1-based rank of `positive` among `positive ∪ negatives`. Negatives scoring
/// at least as high as the positive are ranked above it.
pub fn rank_position(params: &ModelParams, user: usize, positive: usize, negatives: &[usize]) -> Result<usize> {
    let mut seen = negatives.to_vec();
    seen.push(positive);
    seen.sort_unstable();
    if seen.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::invalid(format!("duplicate candidates for user {user}")));
    }
    let p = predict_score(params, user, positive)?;
    let mut above = 0;
    for &n in negatives {
        if predict_score(params, user, n)? >= p {
            above += 1;
        }
    }
    Ok(1 + above)
}

/// `1/log2(rank + 1)` inside the cutoff, else 0.
pub fn ndcg_at_k(rank: usize, k: usize) -> f64 {
    if rank >= 1 && rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

/// With a single relevant item, precision is `hit/k` and recall is `hit`, so
/// F1 reduces to `2·hit/(k+1)`.
pub fn f1_at_k(rank: usize, k: usize) -> f64 {
    if rank >= 1 && rank <= k {
        2.0 / (k + 1) as f64
    } else {
        0.0
    }
}

/// Group means of one metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub overall: Option<f64>,
    pub advantaged: Option<f64>,
    pub disadvantaged: Option<f64>,
    /// `|advantaged − disadvantaged|`; absent when either group is empty.
    pub uof_gap: Option<f64>,
}

impl MetricSummary {
    fn from_groups(adv: &[f64], dis: &[f64]) -> Self {
        let advantaged = mean(adv);
        let disadvantaged = mean(dis);
        let pooled: Vec<f64> = adv.iter().chain(dis).copied().collect();
        Self {
            overall: mean(&pooled),
            advantaged,
            disadvantaged,
            uof_gap: advantaged.zip(disadvantaged).map(|(a, d)| (a - d).abs()),
        }
    }
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: SplitKind,
    pub k: usize,
    pub n_advantaged: usize,
    pub n_disadvantaged: usize,
    /// Set when one of the groups has no evaluated user, in which case the
    /// gaps are absent.
    pub group_missing: bool,
    pub ndcg: MetricSummary,
    pub f1: MetricSummary,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Per-user `(user, rank)` on the chosen split, in ascending user order.
pub fn user_ranks(params: &ModelParams, split: &SplitDataset, which: SplitKind) -> Result<Vec<(usize, usize)>> {
    if params.n_users() != split.n_users || params.n_items() != split.n_items {
        return Err(Error::invalid(format!(
            "model is {}x{}, split is {}x{}",
            params.n_users(),
            params.n_items(),
            split.n_users,
            split.n_items
        )));
    }
    let held: &[Option<HeldOut>] = match which {
        SplitKind::Validation => &split.validation,
        SplitKind::Test => &split.test,
    };
    held.par_iter()
        .enumerate()
        .filter_map(|(u, h)| h.as_ref().map(|h| (u, h)))
        .map(|(u, h)| rank_position(params, u, h.positive, &h.negatives).map(|r| (u, r)))
        .collect()
}

/// NDCG@k and F1@k on one split, averaged over evaluated users per group.
pub fn evaluate(
    params: &ModelParams,
    split: &SplitDataset,
    partition: &UserPartition,
    which: SplitKind,
    k: usize,
) -> Result<EvalReport> {
    if k == 0 {
        return Err(Error::invalid("cutoff k must be at least 1"));
    }
    if partition.n_users() != split.n_users {
        return Err(Error::invalid(format!(
            "partition covers {} users, split has {}",
            partition.n_users(),
            split.n_users
        )));
    }
    let mask = partition.advantaged_mask();
    let ranks = user_ranks(params, split, which)?;
    let (mut adv_ndcg, mut dis_ndcg, mut adv_f1, mut dis_f1) = (vec![], vec![], vec![], vec![]);
    for (u, r) in ranks {
        if mask[u] {
            adv_ndcg.push(ndcg_at_k(r, k));
            adv_f1.push(f1_at_k(r, k));
        } else {
            dis_ndcg.push(ndcg_at_k(r, k));
            dis_f1.push(f1_at_k(r, k));
        }
    }
    Ok(EvalReport {
        split: which,
        k,
        n_advantaged: adv_ndcg.len(),
        n_disadvantaged: dis_ndcg.len(),
        group_missing: adv_ndcg.is_empty() || dis_ndcg.is_empty(),
        ndcg: MetricSummary::from_groups(&adv_ndcg, &dis_ndcg),
        f1: MetricSummary::from_groups(&adv_f1, &dis_f1),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::recsys::Embeddings;

    fn params(users: &[Vec<f64>], items: &[Vec<f64>]) -> ModelParams {
        ModelParams {
            user_embeddings: Embeddings::from_rows(users).unwrap(),
            item_embeddings: Embeddings::from_rows(items).unwrap(),
        }
    }

    #[test]
    fn closed_forms() {
        assert_eq!(ndcg_at_k(1, 10), 1.0);
        assert!((ndcg_at_k(2, 10) - 1.0 / 3f64.log2()).abs() < 1e-12);
        assert_eq!(ndcg_at_k(11, 10), 0.0);
        assert!((f1_at_k(10, 10) - 2.0 / 11.0).abs() < 1e-12);
        assert_eq!(f1_at_k(11, 10), 0.0);
    }

    #[test]
    fn ranking_with_pessimistic_ties() {
        let p = params(&[vec![1.0]], &[vec![3.0], vec![2.0], vec![3.0], vec![1.0]]);
        assert_eq!(rank_position(&p, 0, 0, &[1, 3]).unwrap(), 1);
        assert_eq!(rank_position(&p, 0, 0, &[1, 2, 3]).unwrap(), 2);
        assert_eq!(rank_position(&p, 0, 3, &[0, 1, 2]).unwrap(), 4);
        assert!(rank_position(&p, 0, 0, &[1, 1]).is_err());
        assert!(rank_position(&p, 0, 0, &[0]).is_err());
    }

    #[test]
    fn gap_arithmetic() {
        let s = MetricSummary::from_groups(&[0.5, 0.7], &[0.2, 0.4]);
        assert!((s.uof_gap.unwrap() - 0.3).abs() < 1e-15);
        assert!((s.overall.unwrap() - 0.45).abs() < 1e-15);
        let same = MetricSummary::from_groups(&[0.3], &[0.3]);
        assert_eq!(same.uof_gap, Some(0.0));
        let missing = MetricSummary::from_groups(&[0.3], &[]);
        assert_eq!(missing.uof_gap, None);
        assert_eq!(missing.overall, Some(0.3));
    }

    #[test]
    fn split_names() {
        assert_eq!("test".parse::<SplitKind>().unwrap(), SplitKind::Test);
        assert_eq!(SplitKind::Validation.to_string(), "validation");
        assert!("train".parse::<SplitKind>().is_err());
    }
}
