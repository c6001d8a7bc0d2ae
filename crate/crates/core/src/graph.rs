//! Per-target user–user co-interaction graphs and the penalized affinity
//! matrix `B = H − α Î` used by constrained dominant sets.

use crate::error::{Error, Result};
use crate::linalg::{largest_eigenvalue, PowerIteration, SquareMatrix};

pub const DEFAULT_ALPHA_MARGIN: f64 = 1.0;

/// Symmetric, non-negative, zero-diagonal weighted adjacency matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMatrix {
    weights: SquareMatrix,
    vertex_labels: Vec<usize>,
    constraint_rows: Vec<usize>,
}

impl AffinityMatrix {
    pub fn new(weights: SquareMatrix, vertex_labels: Vec<usize>, mut constraint_rows: Vec<usize>) -> Result<Self> {
        let z = weights.size();
        if vertex_labels.len() != z {
            return Err(Error::invalid(format!("{} labels for {z} vertices", vertex_labels.len())));
        }
        for i in 0..z {
            if weights.get(i, i) != 0.0 {
                return Err(Error::invalid(format!("diagonal entry {i} is non-zero")));
            }
            for j in 0..i {
                let w = weights.get(i, j);
                if !(w >= 0.0 && w.is_finite()) || w != weights.get(j, i) {
                    return Err(Error::invalid(format!(
                        "weight ({i}, {j}) must be finite, non-negative and symmetric"
                    )));
                }
            }
        }
        constraint_rows.sort_unstable();
        constraint_rows.dedup();
        if constraint_rows.is_empty() || constraint_rows.iter().any(|&r| r >= z) {
            return Err(Error::invalid("constraint rows must be a non-empty subset of the vertices"));
        }
        Ok(Self {
            weights,
            vertex_labels,
            constraint_rows,
        })
    }

    /// Graph whose vertex labels are the row indices themselves.
    pub fn from_weights(weights: SquareMatrix, constraint_row: usize) -> Result<Self> {
        let labels = (0..weights.size()).collect();
        Self::new(weights, labels, vec![constraint_row])
    }

    pub fn size(&self) -> usize {
        self.weights.size()
    }

    pub fn weights(&self) -> &SquareMatrix {
        &self.weights
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.weights.get(i, j)
    }

    pub fn vertex_labels(&self) -> &[usize] {
        &self.vertex_labels
    }

    pub fn constraint_rows(&self) -> &[usize] {
        &self.constraint_rows
    }

    pub fn is_constraint(&self, row: usize) -> bool {
        self.constraint_rows.binary_search(&row).is_ok()
    }

    pub fn free_rows(&self) -> Vec<usize> {
        (0..self.size()).filter(|&r| !self.is_constraint(r)).collect()
    }
}

/// Size of the intersection of two sorted, duplicate-free slices.
pub fn co_interactions(a: &[usize], b: &[usize]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

/// Builds per-target graphs over one fixed advantaged set. The
/// advantaged–advantaged block is shared by every target and computed once.
#[derive(Debug, Clone)]
pub struct UserGraphBuilder {
    advantaged: Vec<usize>,
    block: SquareMatrix,
}

impl UserGraphBuilder {
    /// `train[u]` holds user `u`'s sorted training items.
    pub fn new(train: &[Vec<usize>], advantaged: &[usize]) -> Result<Self> {
        if advantaged.is_empty() {
            return Err(Error::invalid("the advantaged user list is empty"));
        }
        let n = advantaged.len();
        let mut block = SquareMatrix::zeros(n);
        for a in 0..n {
            for b in 0..a {
                let w = co_interactions(&train[advantaged[a]], &train[advantaged[b]]) as f64;
                block.set(a, b, w);
                block.set(b, a, w);
            }
        }
        Ok(Self {
            advantaged: advantaged.to_vec(),
            block,
        })
    }

    pub fn advantaged(&self) -> &[usize] {
        &self.advantaged
    }

    /// Vertex 0 is `target` (the only constraint row); vertices `1..=N` are the
    /// advantaged users in builder order.
    pub fn graph_for(&self, train: &[Vec<usize>], target: usize) -> Result<AffinityMatrix> {
        if self.advantaged.contains(&target) {
            return Err(Error::invalid(format!("target {target} is an advantaged user")));
        }
        let n = self.advantaged.len();
        let mut weights = SquareMatrix::zeros(n + 1);
        for a in 0..n {
            let w = co_interactions(&train[target], &train[self.advantaged[a]]) as f64;
            weights.set(0, a + 1, w);
            weights.set(a + 1, 0, w);
            for b in 0..n {
                weights.set(a + 1, b + 1, self.block.get(a, b));
            }
        }
        let labels = std::iter::once(target).chain(self.advantaged.iter().copied()).collect();
        AffinityMatrix::new(weights, labels, vec![0])
    }
}

/// Complete graph over `target` and all `advantaged` users weighted by the
/// number of co-interacted training items.
pub fn build_user_graph(train: &[Vec<usize>], target: usize, advantaged: &[usize]) -> Result<AffinityMatrix> {
    UserGraphBuilder::new(train, advantaged)?.graph_for(train, target)
}

/// `λ_max` of the principal submatrix on the non-constraint rows plus a
/// positive `margin`.
pub fn compute_alpha(h: &AffinityMatrix, margin: f64) -> Result<f64> {
    if !(margin > 0.0 && margin.is_finite()) {
        return Err(Error::invalid(format!("alpha margin must be positive, got {margin}")));
    }
    let sub = h.weights().principal_submatrix(&h.free_rows());
    Ok(largest_eigenvalue(&sub, PowerIteration::default()) + margin)
}

/// `B = H − α Î`, where `Î` is 1 on the diagonal of non-constraint rows.
#[derive(Debug, Clone, PartialEq)]
pub struct PenalizedAffinity {
    base: AffinityMatrix,
    alpha: f64,
    matrix_b: SquareMatrix,
}

impl PenalizedAffinity {
    pub fn base(&self) -> &AffinityMatrix {
        &self.base
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn matrix_b(&self) -> &SquareMatrix {
        &self.matrix_b
    }

    /// `xᵀ B x`.
    pub fn objective(&self, x: &[f64]) -> f64 {
        self.matrix_b.quadratic_form(x)
    }
}

pub fn build_penalized(h: &AffinityMatrix, alpha: f64) -> Result<PenalizedAffinity> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::invalid(format!("alpha must be finite and non-negative, got {alpha}")));
    }
    let mut b = h.weights().clone();
    for row in h.free_rows() {
        b.set(row, row, -alpha);
    }
    Ok(PenalizedAffinity {
        base: h.clone(),
        alpha,
        matrix_b: b,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn intersection_weight() {
        // target {1,2,3}, advantaged {2,3,5}
        let train = vec![vec![1, 2, 3], vec![2, 3, 5]];
        let h = build_user_graph(&train, 0, &[1]).unwrap();
        assert_eq!(h.weight(0, 1), 2.0);
        assert_eq!(h.weight(1, 0), 2.0);
        assert_eq!(h.vertex_labels(), &[0, 1]);
        assert_eq!(h.constraint_rows(), &[0]);
    }

    #[test]
    fn disjoint_advantaged_users() {
        let train = vec![vec![0], vec![1, 2], vec![3, 4]];
        let h = build_user_graph(&train, 0, &[1, 2]).unwrap();
        assert_eq!(h.weight(1, 2), 0.0);
    }

    #[test]
    fn full_matrix_against_hand_table() {
        // six items; target user 3, advantaged 0, 1, 2 (in that order)
        let train = vec![
            vec![0, 1, 2, 3], // A
            vec![2, 3, 4],    // B
            vec![0, 5],       // C
            vec![0, 2, 3, 5], // T
        ];
        let h = build_user_graph(&train, 3, &[0, 1, 2]).unwrap();
        // |T∩A|=3 |T∩B|=2 |T∩C|=2 |A∩B|=2 |A∩C|=1 |B∩C|=0
        let expected = [
            [0.0, 3.0, 2.0, 2.0],
            [3.0, 0.0, 2.0, 1.0],
            [2.0, 2.0, 0.0, 0.0],
            [2.0, 1.0, 0.0, 0.0],
        ];
        for (i, row) in expected.iter().enumerate() {
            assert_eq!(h.weights().row(i), row);
        }
        assert_eq!(h.vertex_labels(), &[3, 0, 1, 2]);
    }

    #[test]
    fn empty_advantaged_rejected() {
        assert!(build_user_graph(&[vec![0]], 0, &[]).is_err());
        assert!(build_user_graph(&[vec![0], vec![0]], 1, &[1]).is_err());
    }

    #[test]
    fn alpha_closed_forms() {
        let single = AffinityMatrix::from_weights(SquareMatrix::zeros(2), 0).unwrap();
        assert_eq!(compute_alpha(&single, 1.0).unwrap(), 1.0);

        let w = 4.0;
        let h = AffinityMatrix::from_weights(
            SquareMatrix::from_rows(&[vec![0.0, 1.0, 1.0], vec![1.0, 0.0, w], vec![1.0, w, 0.0]]),
            0,
        )
        .unwrap();
        let alpha = compute_alpha(&h, 0.5).unwrap();
        assert!((alpha - (w + 0.5)).abs() < 1e-8 * w);
        assert!(compute_alpha(&h, 0.0).is_err());
    }

    #[test]
    fn penalized_diagonal() {
        let h = AffinityMatrix::from_weights(
            SquareMatrix::from_rows(&[vec![0.0, 1.0, 2.0], vec![1.0, 0.0, 3.0], vec![2.0, 3.0, 0.0]]),
            0,
        )
        .unwrap();
        let pa = build_penalized(&h, 2.0).unwrap();
        let b = pa.matrix_b();
        assert_eq!([b.get(0, 0), b.get(1, 1), b.get(2, 2)], [0.0, -2.0, -2.0]);
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert_eq!(b.get(i, j), h.weight(i, j));
                }
            }
        }
        assert!(b.is_symmetric());
        assert_eq!(build_penalized(&h, 0.0).unwrap().matrix_b(), h.weights());
        assert!(build_penalized(&h, -1.0).is_err());
    }

    #[test]
    fn rejects_invalid_weights() {
        let asym = SquareMatrix::from_rows(&[vec![0.0, 1.0], vec![2.0, 0.0]]);
        assert!(AffinityMatrix::from_weights(asym, 0).is_err());
        let diag = SquareMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]);
        assert!(AffinityMatrix::from_weights(diag, 0).is_err());
        assert!(AffinityMatrix::from_weights(SquareMatrix::zeros(2), 5).is_err());
    }
}
