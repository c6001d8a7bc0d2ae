//! The fairness loss pulling each disadvantaged user toward the mean of its
//! top-k cluster members, and the co-interaction ranking baseline that
//! produces clusters without any graph optimization.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cds::{solve_constrained_cluster, sort_members, ConstrainedCluster, DynamicsConfig, Member};
use crate::data::UserPartition;
use crate::error::{Error, Result};
use crate::graph::{co_interactions, UserGraphBuilder};
use crate::recsys::{Embeddings, RowGrads};

pub const DEFAULT_TOP_K: usize = 3;

/// Whether the fairness gradient also reaches the cluster members' rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemberGradients {
    /// Members receive their share of the gradient, so the pull is mutual.
    Flow,
    /// Members are treated as constants; only the target rows move.
    Frozen,
}

impl FromStr for MemberGradients {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flow" => Ok(Self::Flow),
            "frozen" => Ok(Self::Frozen),
            _ => Err(Error::invalid(format!("unknown member gradient mode {s:?} (flow|frozen)"))),
        }
    }
}

impl fmt::Display for MemberGradients {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Flow => "flow",
            Self::Frozen => "frozen",
        })
    }
}

/// Which procedure built a [`ClusterMap`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterSource {
    Ucds,
    Naive,
}

impl FromStr for ClusterSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ucds" => Ok(Self::Ucds),
            "naive" => Ok(Self::Naive),
            _ => Err(Error::invalid(format!("unknown cluster method {s:?} (ucds|naive)"))),
        }
    }
}

impl fmt::Display for ClusterSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Ucds => "ucds",
            Self::Naive => "naive",
        })
    }
}

/// One cluster per disadvantaged user, keyed by that user's index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterMap {
    pub entries: BTreeMap<usize, ConstrainedCluster>,
    /// Top-k cap applied when the loss is evaluated.
    pub k: usize,
    pub source: ClusterSource,
}

impl ClusterMap {
    pub fn new(entries: BTreeMap<usize, ConstrainedCluster>, k: usize, source: ClusterSource) -> Result<Self> {
        if k == 0 {
            return Err(Error::invalid("k must be at least 1"));
        }
        if let Some((key, c)) = entries.iter().find(|(key, c)| **key != c.target) {
            return Err(Error::invalid(format!("cluster keyed {key} has target {}", c.target)));
        }
        Ok(Self { entries, k, source })
    }

    pub fn with_k(mut self, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::invalid("k must be at least 1"));
        }
        self.k = k;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn n_nonempty(&self) -> usize {
        self.entries.values().filter(|c| !c.members.is_empty()).count()
    }
}

/// The `min(k, |members|)` most important members, ties by ascending user.
pub fn top_k_members(cluster: &ConstrainedCluster, k: usize) -> Vec<usize> {
    let mut members = cluster.members.clone();
    sort_members(&mut members);
    members.into_iter().take(k).map(|m| m.user).collect()
}

fn member_mean(e: &Embeddings, members: &[usize]) -> Vec<f64> {
    let mut mean = vec![0.0; e.dim()];
    for &m in members {
        for (acc, v) in mean.iter_mut().zip(e.row(m)) {
            *acc += v;
        }
    }
    let n = members.len() as f64;
    mean.iter_mut().for_each(|v| *v /= n);
    mean
}

/// `‖E_target − mean(E_members)‖²`, or `None` when `members` is empty.
pub fn fairness_distance(e: &Embeddings, target: usize, members: &[usize]) -> Option<f64> {
    if members.is_empty() {
        return None;
    }
    let mean = member_mean(e, members);
    Some(e.row(target).iter().zip(&mean).map(|(t, m)| (t - m) * (t - m)).sum())
}

#[derive(Debug, Clone, PartialEq)]
pub struct FairnessLoss {
    pub value: f64,
    /// Gradient of `value` with respect to the user embedding rows.
    pub grads: RowGrads,
    /// Number of clusters with at least one member (the averaging
    /// denominator).
    pub active: usize,
}

/// Mean of [`fairness_distance`] over the clusters with members, with its
/// gradient. Users appearing in several clusters accumulate their gradient
/// contributions, in ascending target order.
pub fn fairness_loss(e: &Embeddings, clusters: &ClusterMap, member_grads: MemberGradients) -> FairnessLoss {
    let tops: Vec<(usize, Vec<usize>)> = clusters
        .entries
        .iter()
        .map(|(&t, c)| (t, top_k_members(c, clusters.k)))
        .filter(|(_, m)| !m.is_empty())
        .collect();
    let mut grads = RowGrads::new(e.dim());
    if tops.is_empty() {
        warn!("every cluster is empty; the fairness loss is zero");
        return FairnessLoss {
            value: 0.0,
            grads,
            active: 0,
        };
    }
    let n = tops.len() as f64;
    let mut total = 0.0;
    for (target, members) in &tops {
        let mean = member_mean(e, members);
        let diff: Vec<f64> = e.row(*target).iter().zip(&mean).map(|(t, m)| t - m).collect();
        total += diff.iter().map(|d| d * d).sum::<f64>();
        grads.add_scaled(*target, &diff, 2.0 / n);
        if member_grads == MemberGradients::Flow {
            let share = -2.0 / (members.len() as f64 * n);
            for &m in members {
                grads.add_scaled(m, &diff, share);
            }
        }
    }
    FairnessLoss {
        value: total / n,
        grads,
        active: tops.len(),
    }
}

/// Solves one constrained dominant-set problem per disadvantaged user over
/// the co-interaction graph of `train`. Targets are processed in parallel and
/// collected in ascending user order.
pub fn ucds_clusters(
    train: &[Vec<usize>],
    partition: &UserPartition,
    k: usize,
    alpha_margin: f64,
    cfg: &DynamicsConfig,
) -> Result<ClusterMap> {
    if partition.n_users() != train.len() {
        return Err(Error::invalid(format!(
            "partition covers {} users, training data has {}",
            partition.n_users(),
            train.len()
        )));
    }
    cfg.validate()?;
    let builder = UserGraphBuilder::new(train, &partition.advantaged)?;
    let clusters: Vec<ConstrainedCluster> = partition
        .disadvantaged
        .par_iter()
        .map(|&t| solve_constrained_cluster(&builder.graph_for(train, t)?, alpha_margin, cfg))
        .collect::<Result<_>>()?;
    ClusterMap::new(clusters.into_iter().map(|c| (c.target, c)).collect(), k, ClusterSource::Ucds)
}

/// Ranks the advantaged users by co-interaction count with each
/// disadvantaged user and keeps the top `k` with a positive count.
/// Importances are the counts normalized to sum to one.
pub fn naive_clusters(train: &[Vec<usize>], partition: &UserPartition, k: usize) -> Result<ClusterMap> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if partition.n_users() != train.len() {
        return Err(Error::invalid(format!(
            "partition covers {} users, training data has {}",
            partition.n_users(),
            train.len()
        )));
    }
    let mut entries = BTreeMap::new();
    for &t in &partition.disadvantaged {
        let mut ranked: Vec<(usize, usize)> = partition
            .advantaged
            .iter()
            .map(|&a| (a, co_interactions(&train[t], &train[a])))
            .filter(|&(_, c)| c > 0)
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked.truncate(k);
        let sum: usize = ranked.iter().map(|r| r.1).sum();
        let members = ranked
            .into_iter()
            .map(|(user, c)| Member {
                user,
                importance: c as f64 / sum as f64,
            })
            .collect();
        let cluster = ConstrainedCluster {
            members,
            converged: true,
            ..ConstrainedCluster::empty(t)
        };
        entries.insert(t, cluster);
    }
    ClusterMap::new(entries, k, ClusterSource::Naive)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cluster(target: usize, members: &[(usize, f64)]) -> ConstrainedCluster {
        ConstrainedCluster {
            members: members
                .iter()
                .map(|&(user, importance)| Member { user, importance })
                .collect(),
            ..ConstrainedCluster::empty(target)
        }
    }

    fn map(clusters: Vec<ConstrainedCluster>, k: usize) -> ClusterMap {
        ClusterMap::new(clusters.into_iter().map(|c| (c.target, c)).collect(), k, ClusterSource::Ucds).unwrap()
    }

    #[test]
    fn top_k_ordering() {
        let c = cluster(0, &[(7, 0.1), (2, 0.3), (9, 0.5)]);
        assert_eq!(top_k_members(&c, 2), vec![9, 2]);
        let c = cluster(0, &[(2, 0.4), (1, 0.4)]);
        assert_eq!(top_k_members(&c, 1), vec![1]);
        assert!(top_k_members(&cluster(0, &[]), 3).is_empty());
        assert_eq!(top_k_members(&c, 5).len(), 2);
    }

    #[test]
    fn distances() {
        let e = Embeddings::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![2.0, 0.0]]).unwrap();
        assert_eq!(fairness_distance(&e, 0, &[1, 2]), Some(0.5));
        assert_eq!(fairness_distance(&e, 3, &[0]), Some(4.0));
        assert_eq!(fairness_distance(&e, 1, &[1]), Some(0.0));
        assert_eq!(fairness_distance(&e, 1, &[]), None);
    }

    #[test]
    fn single_pair_loss_and_gradients() {
        let e = Embeddings::from_rows(&[vec![2.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let fl = fairness_loss(&e, &map(vec![cluster(0, &[(1, 1.0)])], 3), MemberGradients::Flow);
        assert_eq!(fl.value, 4.0);
        assert_eq!(fl.active, 1);
        assert_eq!(fl.grads.get(0).unwrap(), &[4.0, 0.0]);
        assert_eq!(fl.grads.get(1).unwrap(), &[-4.0, 0.0]);

        let frozen = fairness_loss(&e, &map(vec![cluster(0, &[(1, 1.0)])], 3), MemberGradients::Frozen);
        assert_eq!(frozen.value, 4.0);
        assert!(frozen.grads.get(1).is_none());
    }

    #[test]
    fn empty_clusters_are_skipped() {
        let e = Embeddings::from_rows(&[vec![2.0], vec![0.0], vec![5.0]]).unwrap();
        let fl = fairness_loss(&e, &map(vec![cluster(0, &[(1, 1.0)]), cluster(2, &[])], 1), MemberGradients::Flow);
        assert_eq!((fl.value, fl.active), (4.0, 1));

        let none = fairness_loss(&e, &map(vec![cluster(2, &[])], 1), MemberGradients::Flow);
        assert_eq!((none.value, none.active), (0.0, 0));
        assert!(none.grads.is_empty());
    }

    #[test]
    fn zero_when_targets_sit_on_their_means() {
        let e = Embeddings::from_rows(&[vec![0.5, 0.5], vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let fl = fairness_loss(&e, &map(vec![cluster(0, &[(1, 0.5), (2, 0.5)])], 3), MemberGradients::Flow);
        assert_eq!(fl.value, 0.0);
        assert!(fl.grads.iter().all(|(_, g)| g.iter().all(|v| *v == 0.0)));
    }

    fn partition(advantaged: Vec<usize>, disadvantaged: Vec<usize>) -> UserPartition {
        UserPartition {
            advantaged,
            disadvantaged,
            threshold_fraction: 0.5,
        }
    }

    #[test]
    fn naive_ranking() {
        // user 0 shares 3, 1, 0 items with users 1, 2, 3
        let train = vec![vec![0, 1, 2, 3], vec![0, 1, 2], vec![3, 9], vec![7, 8]];
        let p = partition(vec![1, 2, 3], vec![0]);
        let m = naive_clusters(&train, &p, 2).unwrap();
        let c = &m.entries[&0];
        assert_eq!(c.member_users(), vec![1, 2]);
        assert_eq!(c.members[0].importance, 0.75);
        assert_eq!(m.source, ClusterSource::Naive);

        let isolated = vec![vec![5], vec![0, 1]];
        let m = naive_clusters(&isolated, &partition(vec![1], vec![0]), 3).unwrap();
        assert!(m.entries[&0].members.is_empty());
    }

    #[test]
    fn naive_tie_break_by_index() {
        // advantaged in rank order 4, 1, 2 with counts 5, 5, 2
        let shared = vec![0, 1, 2, 3, 4];
        let train = vec![
            shared.clone(),
            shared.clone(),
            vec![0, 1],
            vec![20],
            shared.clone(),
        ];
        let m = naive_clusters(&train, &partition(vec![4, 1, 2], vec![0, 3]), 2).unwrap();
        assert_eq!(m.entries[&0].member_users(), vec![1, 4]);
        assert!(m.entries[&3].members.is_empty());
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("flow".parse::<MemberGradients>().unwrap(), MemberGradients::Flow);
        assert_eq!("naive".parse::<ClusterSource>().unwrap(), ClusterSource::Naive);
        assert!("x".parse::<ClusterSource>().is_err());
        assert!(ClusterMap::new(BTreeMap::new(), 0, ClusterSource::Ucds).is_err());
    }
}
