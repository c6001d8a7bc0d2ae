//! Constrained dominant sets.
//!
//! The cluster around a target vertex is the support of a local maximizer of
//! `xᵀBx` over the standard simplex, found with replicator dynamics. The
//! recursive coherence weights (`w_S(i)`, `W(S)`) are provided as an
//! exponential-time oracle for checking the dynamics on small graphs.

use std::collections::HashMap;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{build_penalized, compute_alpha, AffinityMatrix, PenalizedAffinity};
use crate::linalg::{dot, SquareMatrix};

const SIMPLEX_TOLERANCE: f64 = 1e-9;

/// A point of the standard simplex: non-negative entries summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct SimplexVector(Vec<f64>);

impl SimplexVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("simplex vector must be non-empty"));
        }
        if values.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::invalid("simplex entries must be finite and non-negative"));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
            return Err(Error::invalid(format!("simplex entries sum to {sum}")));
        }
        Ok(Self(values))
    }

    pub fn barycenter(z: usize) -> Self {
        Self(vec![1.0 / z as f64; z])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Indices with value strictly above `threshold`.
    pub fn support(&self, threshold: f64) -> Vec<usize> {
        (0..self.0.len()).filter(|&i| self.0[i] > threshold).collect()
    }

    pub fn max_abs_diff(&self, other: &SimplexVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// How the penalized matrix is made entrywise non-negative before the
/// replicator update. Adding `c` to every entry adds exactly `c` to `xᵀBx` on
/// the simplex, so maximizers are unchanged.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum Shift {
    /// `c = α`, the smallest constant that clears the `−α` diagonal.
    Alpha,
    /// A fixed `c`, which must be at least `α`.
    Constant(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DynamicsConfig {
    pub tolerance: f64,
    pub max_iterations: usize,
    pub support_threshold: f64,
    pub shift: Shift,
    /// Times α is doubled after the target drops out of the support.
    pub max_alpha_retries: usize,
    /// Run [`prune_support`] on the converged point.
    pub prune: bool,
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-7,
            max_iterations: 10_000,
            support_threshold: 1e-5,
            shift: Shift::Alpha,
            max_alpha_retries: 3,
            prune: true,
        }
    }
}

impl DynamicsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) {
            return Err(Error::invalid("dynamics tolerance must be positive"));
        }
        if self.max_iterations == 0 {
            return Err(Error::invalid("max_iterations must be at least 1"));
        }
        if !(self.support_threshold > 0.0 && self.support_threshold < 1.0) {
            return Err(Error::invalid("support_threshold must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// One replicator update `x'_i = x_i (Bx)_i / xᵀBx` on a non-negative payoff
/// matrix.
pub fn replicator_step(payoff: &SquareMatrix, x: &SimplexVector) -> Result<SimplexVector> {
    let bx = payoff.mul_vec(x.values());
    let numer: Vec<f64> = x.values().iter().zip(&bx).map(|(xi, bi)| xi * bi).collect();
    let denom: f64 = numer.iter().sum();
    if !(denom > 0.0 && denom.is_finite()) {
        return Err(Error::Degenerate(denom));
    }
    Ok(SimplexVector(numer.into_iter().map(|n| n / denom).collect()))
}

/// The non-negative payoff matrix `B + cJ` the dynamics actually iterate on.
pub fn shifted_payoff(pa: &PenalizedAffinity, shift: Shift) -> Result<SquareMatrix> {
    let c = match shift {
        Shift::Alpha => pa.alpha(),
        Shift::Constant(c) => c,
    };
    let shifted = pa.matrix_b().add_constant(c);
    if shifted.min_entry() < 0.0 {
        return Err(Error::invalid(format!(
            "shift {c} leaves negative payoffs (alpha = {})",
            pa.alpha()
        )));
    }
    Ok(shifted)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsOutcome {
    pub x: SimplexVector,
    pub iterations: usize,
    pub converged: bool,
}

/// Iterates replicator dynamics on `payoff` from `start`, calling `observe`
/// with every new iterate.
pub fn iterate_replicator(
    payoff: &SquareMatrix,
    start: SimplexVector,
    cfg: &DynamicsConfig,
    mut observe: impl FnMut(&SimplexVector),
) -> Result<DynamicsOutcome> {
    let mut x = start;
    for it in 1..=cfg.max_iterations {
        let next = replicator_step(payoff, &x)?;
        observe(&next);
        let delta = next.max_abs_diff(&x);
        x = next;
        if delta < cfg.tolerance {
            return Ok(DynamicsOutcome {
                x,
                iterations: it,
                converged: true,
            });
        }
    }
    Ok(DynamicsOutcome {
        x,
        iterations: cfg.max_iterations,
        converged: false,
    })
}

/// Maximizes `xᵀBx` over the simplex from the barycenter.
pub fn run_dynamics(pa: &PenalizedAffinity, cfg: &DynamicsConfig) -> Result<DynamicsOutcome> {
    run_dynamics_observed(pa, cfg, |_| {})
}

pub fn run_dynamics_observed(
    pa: &PenalizedAffinity,
    cfg: &DynamicsConfig,
    observe: impl FnMut(&SimplexVector),
) -> Result<DynamicsOutcome> {
    cfg.validate()?;
    let payoff = shifted_payoff(pa, cfg.shift)?;
    iterate_replicator(&payoff, SimplexVector::barycenter(pa.base().size()), cfg, observe)
}

/// Vertices at most this heavy are tried for removal by [`prune_support`].
pub const PRUNE_CANDIDATE_BOUND: f64 = 1e-2;
/// Step tolerance of the re-solve, relative to the main run's.
const PRUNE_REFINE_FACTOR: f64 = 1e-3;
/// Payoff advantage, relative to the largest `|b_ij|`, a dropped vertex may
/// keep before the smaller point is rejected.
const PRUNE_PAYOFF_SLACK: f64 = 1e-6;

/// Removes vertices that the dynamics have not finished draining.
///
/// Near a limit point lying on a face of the simplex, entries outside that
/// face can decay like `1/t` rather than geometrically, so a run stopped by
/// the step-size test may still carry them above the support threshold. For
/// the `k` lightest non-constraint vertices, `k = 1, 2, ...`, the problem is
/// re-solved on the remaining support; the smaller point is kept when its objective is no
/// lower and no dropped vertex earns more than the average payoff there. Real
/// members fail the objective test and stay.
pub fn prune_support(pa: &PenalizedAffinity, outcome: DynamicsOutcome, cfg: &DynamicsConfig) -> Result<DynamicsOutcome> {
    let payoff = shifted_payoff(pa, cfg.shift)?;
    let h = pa.base();
    let refine = DynamicsConfig {
        tolerance: cfg.tolerance * PRUNE_REFINE_FACTOR,
        ..*cfg
    };
    let scale = (0..h.size())
        .flat_map(|i| pa.matrix_b().row(i).iter().map(|v| v.abs()))
        .fold(1.0, f64::max);
    let mut current = outcome;
    'outer: loop {
        let x = current.x.values();
        let support = current.x.support(cfg.support_threshold);
        let value = pa.objective(x);
        let mut candidates: Vec<usize> = support
            .iter()
            .copied()
            .filter(|&r| !h.is_constraint(r) && x[r] <= PRUNE_CANDIDATE_BOUND)
            .collect();
        candidates.sort_by(|&a, &b| x[a].total_cmp(&x[b]).then(a.cmp(&b)));
        for n_drop in 1..=candidates.len() {
            let dropped = &candidates[..n_drop];
            let keep: Vec<usize> = support.iter().copied().filter(|r| !dropped.contains(r)).collect();
            let mass: f64 = keep.iter().map(|&r| x[r]).sum();
            let start = SimplexVector(keep.iter().map(|&r| x[r] / mass).collect());
            let sub = iterate_replicator(&payoff.principal_submatrix(&keep), start, &refine, |_| {})?;
            let mut y = vec![0.0; x.len()];
            for (&r, &v) in keep.iter().zip(sub.x.values()) {
                y[r] = v;
            }
            let y_value = pa.objective(&y);
            if y_value < value - 1e-9 * value.abs().max(1.0) {
                continue;
            }
            let by = pa.matrix_b().mul_vec(&y);
            if (0..y.len()).any(|r| y[r] == 0.0 && by[r] > y_value + PRUNE_PAYOFF_SLACK * scale) {
                continue;
            }
            current = DynamicsOutcome {
                x: SimplexVector(y),
                iterations: current.iterations + sub.iterations,
                converged: sub.converged,
            };
            continue 'outer;
        }
        return Ok(current);
    }
}

/// Plain dominant-sets dynamics on `H` from the barycenter.
pub fn run_unconstrained(h: &AffinityMatrix, cfg: &DynamicsConfig) -> Result<DynamicsOutcome> {
    run_unconstrained_observed(h, cfg, |_| {})
}

pub fn run_unconstrained_observed(
    h: &AffinityMatrix,
    cfg: &DynamicsConfig,
    observe: impl FnMut(&SimplexVector),
) -> Result<DynamicsOutcome> {
    cfg.validate()?;
    iterate_replicator(h.weights(), SimplexVector::barycenter(h.size()), cfg, observe)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Member {
    pub user: usize,
    pub importance: f64,
}

/// Advantaged users clustered around one disadvantaged target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstrainedCluster {
    pub target: usize,
    /// Sorted by importance descending, then user index ascending.
    pub members: Vec<Member>,
    pub support_threshold: f64,
    pub converged: bool,
    pub iterations: usize,
    pub final_objective: f64,
    pub alpha: f64,
}

impl ConstrainedCluster {
    /// A cluster holding only the target.
    pub fn empty(target: usize) -> Self {
        Self {
            target,
            members: Vec::new(),
            support_threshold: 0.0,
            converged: false,
            iterations: 0,
            final_objective: 0.0,
            alpha: 0.0,
        }
    }

    pub fn member_users(&self) -> Vec<usize> {
        self.members.iter().map(|m| m.user).collect()
    }
}

pub(crate) fn sort_members(members: &mut [Member]) {
    members.sort_by(|a, b| b.importance.total_cmp(&a.importance).then(a.user.cmp(&b.user)));
}

/// Reads the cluster off a converged simplex vector: every non-constraint
/// vertex above the support threshold becomes a member.
pub fn extract_cluster(
    outcome: &DynamicsOutcome,
    pa: &PenalizedAffinity,
    cfg: &DynamicsConfig,
) -> Result<ConstrainedCluster> {
    let h = pa.base();
    let x = outcome.x.values();
    let target_row = h.constraint_rows()[0];
    let target = h.vertex_labels()[target_row];
    if x[target_row] <= cfg.support_threshold {
        return Err(Error::ConstraintViolation {
            target,
            value: x[target_row],
        });
    }
    let mut members: Vec<Member> = (0..h.size())
        .filter(|&r| !h.is_constraint(r) && x[r] > cfg.support_threshold)
        .map(|r| Member {
            user: h.vertex_labels()[r],
            importance: x[r],
        })
        .collect();
    sort_members(&mut members);
    Ok(ConstrainedCluster {
        target,
        members,
        support_threshold: cfg.support_threshold,
        converged: outcome.converged,
        iterations: outcome.iterations,
        final_objective: pa.objective(x),
        alpha: pa.alpha(),
    })
}

/// Full modeling step for one target graph: α from the eigenvalue bound,
/// dynamics, extraction. α is doubled and the run repeated when the target
/// falls out of the support; after the retries are spent, or on a degenerate
/// payoff, the target gets an empty cluster.
pub fn solve_constrained_cluster(
    h: &AffinityMatrix,
    alpha_margin: f64,
    cfg: &DynamicsConfig,
) -> Result<ConstrainedCluster> {
    cfg.validate()?;
    let target = h.vertex_labels()[h.constraint_rows()[0]];
    let mut alpha = compute_alpha(h, alpha_margin)?;
    for attempt in 0..=cfg.max_alpha_retries {
        let pa = build_penalized(h, alpha)?;
        let run = run_dynamics(&pa, cfg).and_then(|o| if cfg.prune { prune_support(&pa, o, cfg) } else { Ok(o) });
        let outcome = match run {
            Ok(o) => o,
            Err(Error::Degenerate(d)) => {
                warn!("user {target}: degenerate payoff ({d}), recording empty cluster");
                return Ok(ConstrainedCluster::empty(target));
            }
            Err(e) => return Err(e),
        };
        match extract_cluster(&outcome, &pa, cfg) {
            Ok(cluster) => return Ok(cluster),
            Err(Error::ConstraintViolation { value, .. }) => {
                warn!("user {target}: constraint left the support (x = {value:e}) at alpha {alpha}, attempt {attempt}");
                alpha *= 2.0;
            }
            Err(e) => return Err(e),
        }
    }
    warn!("user {target}: retries exhausted, recording empty cluster");
    Ok(ConstrainedCluster::empty(target))
}

/// Largest vertex set the coherence recursion accepts.
pub const ORACLE_SET_LIMIT: usize = 12;
/// Largest graph the exhaustive constrained-cluster search accepts.
pub const BRUTE_FORCE_LIMIT: usize = 10;

/// Memoized evaluator of the recursive coherence weights `w_S(i)` over a
/// symmetric matrix. Sets are bitmasks over the vertex indices.
///
/// The recursion reads the diagonal, so it applies both to a zero-diagonal
/// affinity `H` and to a penalized `B = H − α Î`.
pub struct CoherenceOracle<'a> {
    a: &'a SquareMatrix,
    memo: HashMap<(u32, usize), f64>,
}

impl<'a> CoherenceOracle<'a> {
    pub fn new(a: &'a SquareMatrix) -> Result<Self> {
        if a.size() > ORACLE_SET_LIMIT {
            return Err(Error::OracleSize {
                size: a.size(),
                limit: ORACLE_SET_LIMIT,
            });
        }
        Ok(Self {
            a,
            memo: HashMap::new(),
        })
    }

    pub fn mask(set: &[usize]) -> u32 {
        set.iter().fold(0, |m, &v| m | (1 << v))
    }

    /// `φ_R(j, i) = a(j, i) − (1/|R|) Σ_{k∈R} a(j, k)`.
    fn phi(&self, set: u32, j: usize, i: usize) -> f64 {
        let mean = members(set).map(|k| self.a.get(j, k)).sum::<f64>() / set.count_ones() as f64;
        self.a.get(j, i) - mean
    }

    /// `w_S(i)` for `i ∈ S`.
    pub fn weight(&mut self, set: u32, i: usize) -> f64 {
        debug_assert!(set & (1 << i) != 0);
        if set.count_ones() == 1 {
            return 1.0;
        }
        if let Some(&w) = self.memo.get(&(set, i)) {
            return w;
        }
        let rest = set & !(1 << i);
        let w = members(rest)
            .map(|j| self.phi(rest, j, i) * self.weight(rest, j))
            .sum();
        self.memo.insert((set, i), w);
        w
    }

    /// `W(S) = Σ_{i∈S} w_S(i)`.
    pub fn total_weight(&mut self, set: u32) -> f64 {
        members(set).map(|i| self.weight(set, i)).sum()
    }

    /// Internal coherence (`w_S(i) > 0` inside) and external incoherence
    /// (`w_{S∪{i}}(i) < 0` outside).
    pub fn is_dominant(&mut self, set: u32) -> bool {
        if set == 0 {
            return false;
        }
        let z = self.a.size();
        members(set).all(|i| self.weight(set, i) > 0.0)
            && (0..z)
                .filter(|&i| set & (1 << i) == 0)
                .all(|i| self.weight(set | (1 << i), i) < 0.0)
    }

    /// Among dominant sets containing `constraint`, the one with the largest
    /// `W(S)`; ties keep the smaller bitmask. `None` when there is none.
    pub fn best_dominant_containing(&mut self, constraint: usize) -> Option<u32> {
        let mut best: Option<(u32, f64)> = None;
        for mask in 1u32..(1 << self.a.size()) {
            if mask & (1 << constraint) == 0 || !self.is_dominant(mask) {
                continue;
            }
            let total = self.total_weight(mask);
            if best.is_none_or(|(_, w)| total > w) {
                best = Some((mask, total));
            }
        }
        best.map(|(mask, _)| mask)
    }
}

pub(crate) fn members(set: u32) -> impl Iterator<Item = usize> {
    (0..32).filter(move |&i| set & (1 << i) != 0)
}

fn check_set(a: &SquareMatrix, set: &[usize]) -> Result<u32> {
    if set.is_empty() {
        return Err(Error::invalid("vertex set must be non-empty"));
    }
    if let Some(&v) = set.iter().find(|&&v| v >= a.size()) {
        return Err(Error::invalid(format!("vertex {v} outside a {}-vertex graph", a.size())));
    }
    Ok(CoherenceOracle::mask(set))
}

/// Recursive coherence weight of vertex `i` within `set`.
pub fn coherence_weight(h: &AffinityMatrix, set: &[usize], i: usize) -> Result<f64> {
    coherence_weight_in(h.weights(), set, i)
}

pub fn coherence_weight_in(a: &SquareMatrix, set: &[usize], i: usize) -> Result<f64> {
    let mask = check_set(a, set)?;
    if mask & (1 << i) == 0 {
        return Err(Error::invalid(format!("vertex {i} is not in the set")));
    }
    Ok(CoherenceOracle::new(a)?.weight(mask, i))
}

pub fn total_coherence(h: &AffinityMatrix, set: &[usize]) -> Result<f64> {
    let mask = check_set(h.weights(), set)?;
    Ok(CoherenceOracle::new(h.weights())?.total_weight(mask))
}

/// Dominant-set test on the graph weights `H`.
pub fn is_dominant_set(h: &AffinityMatrix, set: &[usize]) -> Result<bool> {
    is_dominant_set_in(h.weights(), set)
}

/// Dominant-set test on an arbitrary symmetric matrix, e.g. the penalized `B`.
pub fn is_dominant_set_in(a: &SquareMatrix, set: &[usize]) -> Result<bool> {
    let mask = check_set(a, set)?;
    Ok(CoherenceOracle::new(a)?.is_dominant(mask))
}

/// Exhaustive search on `H`: among dominant sets containing `constraint`, the
/// one with the largest total coherence `W(S)`; `{constraint}` when none
/// exists.
pub fn brute_force_constrained_cluster(h: &AffinityMatrix, constraint: usize) -> Result<Vec<usize>> {
    brute_force_constrained_cluster_in(h.weights(), constraint)
}

pub fn brute_force_constrained_cluster_in(a: &SquareMatrix, constraint: usize) -> Result<Vec<usize>> {
    let z = a.size();
    if z > BRUTE_FORCE_LIMIT {
        return Err(Error::OracleSize {
            size: z,
            limit: BRUTE_FORCE_LIMIT,
        });
    }
    if constraint >= z {
        return Err(Error::invalid(format!("constraint {constraint} outside the graph")));
    }
    Ok(match CoherenceOracle::new(a)?.best_dominant_containing(constraint) {
        Some(mask) => members(mask).collect(),
        None => vec![constraint],
    })
}

/// `xᵀ A x`, exposed for callers checking objective values.
pub fn quadratic_objective(a: &SquareMatrix, x: &SimplexVector) -> f64 {
    dot(x.values(), &a.mul_vec(x.values()))
}
