//! Small dense square matrices and the power-iteration eigenvalue routine
//! used for the α bound.

use serde::{Deserialize, Serialize};

/// Row-major dense `n x n` matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SquareMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SquareMatrix {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![0.0; n * n],
        }
    }

    /// Panics if `rows` is not square.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let n = rows.len();
        let mut data = Vec::with_capacity(n * n);
        for row in rows {
            assert_eq!(row.len(), n, "matrix rows must have length {n}");
            data.extend_from_slice(row);
        }
        Self { n, data }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.n + j] = value;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.n.max(1)).take(self.n)
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.rows().map(<[f64]>::to_vec).collect()
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.n).all(|i| (0..i).all(|j| self.get(i, j) == self.get(j, i)))
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        self.rows().map(|row| dot(row, x)).collect()
    }

    /// `xᵀ A x`.
    pub fn quadratic_form(&self, x: &[f64]) -> f64 {
        dot(x, &self.mul_vec(x))
    }

    /// Principal submatrix on `keep` (in the given order).
    pub fn principal_submatrix(&self, keep: &[usize]) -> SquareMatrix {
        let mut sub = SquareMatrix::zeros(keep.len());
        for (a, &i) in keep.iter().enumerate() {
            for (b, &j) in keep.iter().enumerate() {
                sub.set(a, b, self.get(i, j));
            }
        }
        sub
    }

    /// Adds `c` to every entry.
    pub fn add_constant(&self, c: f64) -> SquareMatrix {
        SquareMatrix {
            n: self.n,
            data: self.data.iter().map(|v| v + c).collect(),
        }
    }

    pub fn min_entry(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerIteration {
    pub max_iterations: usize,
    /// Relative change of successive Rayleigh quotients that ends the loop.
    pub tolerance: f64,
}

impl Default for PowerIteration {
    fn default() -> Self {
        Self {
            max_iterations: 1000,
            tolerance: 1e-10,
        }
    }
}

/// Largest eigenvalue of a symmetric entrywise non-negative matrix.
///
/// Iterates on `A + cI` with `c` half the largest row sum. For a non-negative
/// matrix the most negative eigenvalue is at least `-λ_max`, so the shift
/// makes the Perron root strictly dominant in modulus and removes the ±λ
/// oscillation bipartite-like blocks otherwise produce. The start vector is
/// all-ones, which is never orthogonal to the Perron vector.
pub fn largest_eigenvalue(a: &SquareMatrix, params: PowerIteration) -> f64 {
    let n = a.size();
    if n == 0 {
        return 0.0;
    }
    let shift = 0.5
        * a.rows()
            .map(|row| row.iter().sum::<f64>())
            .fold(0.0, f64::max);
    if shift == 0.0 {
        return 0.0;
    }

    let mut v = vec![1.0 / (n as f64).sqrt(); n];
    let mut rayleigh = f64::NAN;
    for _ in 0..params.max_iterations {
        let mut w = a.mul_vec(&v);
        for (wi, vi) in w.iter_mut().zip(&v) {
            *wi += shift * vi;
        }
        let next = dot(&v, &w) - shift;
        let norm = dot(&w, &w).sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        v.iter_mut().zip(&w).for_each(|(vi, wi)| *vi = wi / norm);
        let converged = (next - rayleigh).abs() <= params.tolerance * next.abs().max(f64::MIN_POSITIVE);
        rayleigh = next;
        if converged {
            break;
        }
    }
    // one more quotient with the final normalized vector
    a.quadratic_form(&v)
}
