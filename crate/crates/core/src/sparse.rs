//! Envelope Cholesky factorization for matrices with the sparsity of a
//! [`PrecisionPattern`].
//!
//! Rows are reordered with reverse Cuthill-McKee so the profile stays narrow on
//! road-like graphs (bandwidth grows like sqrt(n) on grids). Each row of L is
//! stored densely from its first structural nonzero to the diagonal; fill-in
//! never leaves that envelope.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::graph::PrecisionPattern;

/// Ordering and envelope layout shared by every matrix on one pattern.
#[derive(Clone, Debug)]
pub struct EnvelopeLayout {
    /// `perm[k]` is the original row placed at position `k`.
    perm: Vec<usize>,
    /// `inv[i]` is the position of original row `i`.
    inv: Vec<usize>,
    /// Lower-triangular neighbors of each permuted row, in permuted indices.
    lower: Vec<Vec<usize>>,
    first: Vec<usize>,
    row_start: Vec<usize>,
}

impl EnvelopeLayout {
    pub fn new(pattern: &PrecisionPattern) -> Self {
        let n = pattern.dim();
        let perm = reverse_cuthill_mckee(pattern);
        let mut inv = vec![0; n];
        for (k, &i) in perm.iter().enumerate() {
            inv[i] = k;
        }
        let mut lower = vec![Vec::new(); n];
        let mut first: Vec<usize> = (0..n).collect();
        for (k, row) in lower.iter_mut().enumerate() {
            for &s in pattern.row_neighbors(perm[k]) {
                let c = inv[s];
                if c < k {
                    row.push(c);
                    first[k] = first[k].min(c);
                }
            }
        }
        let mut row_start = Vec::with_capacity(n + 1);
        row_start.push(0);
        for k in 0..n {
            row_start.push(row_start[k] + (k - first[k] + 1));
        }
        EnvelopeLayout {
            perm,
            inv,
            lower,
            first,
            row_start,
        }
    }

    pub fn dim(&self) -> usize {
        self.perm.len()
    }

    /// Stored entries of L.
    pub fn profile(&self) -> usize {
        *self.row_start.last().unwrap_or(&0)
    }

    /// Factorizes the matrix with diagonal `diag` (indexed like the pattern
    /// rows) and the value `offdiag` at every pattern edge.
    pub fn factorize(&self, diag: &[f64], offdiag: f64) -> Result<EnvelopeCholesky> {
        crate::error::ensure_len("diagonal", self.dim(), diag.len())?;
        let n = self.dim();
        let mut l = vec![0.0; self.profile()];
        for k in 0..n {
            let base = self.row_start[k];
            let fk = self.first[k];
            l[base + (k - fk)] = diag[self.perm[k]];
            for &c in &self.lower[k] {
                l[base + (c - fk)] = offdiag;
            }
            // Row k of L from row k of M: l_kj = (m_kj - sum_t l_kt l_jt) / l_jj.
            for j in fk..k {
                let fj = self.first[j];
                let start = fk.max(fj);
                let jb = self.row_start[j];
                let mut acc = l[base + (j - fk)];
                for t in start..j {
                    acc -= l[base + (t - fk)] * l[jb + (t - fj)];
                }
                l[base + (j - fk)] = acc / l[jb + (j - fj)];
            }
            let mut d = l[base + (k - fk)];
            for t in fk..k {
                let v = l[base + (t - fk)];
                d -= v * v;
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::NotPositiveDefinite {
                    pivot: self.perm[k],
                });
            }
            l[base + (k - fk)] = d.sqrt();
        }
        Ok(EnvelopeCholesky {
            layout: self.clone(),
            values: l,
        })
    }
}

/// `P M Pᵀ = L Lᵀ` for a symmetric positive definite `M`.
#[derive(Clone, Debug)]
pub struct EnvelopeCholesky {
    layout: EnvelopeLayout,
    values: Vec<f64>,
}

impl EnvelopeCholesky {
    /// Factorizes `M = diag + offdiag * (edge indicator)` on `pattern`.
    pub fn new(pattern: &PrecisionPattern, diag: &[f64], offdiag: f64) -> Result<Self> {
        EnvelopeLayout::new(pattern).factorize(diag, offdiag)
    }

    /// Factorizes `scale * pattern + shift * I`.
    pub fn scaled(pattern: &PrecisionPattern, scale: f64, shift: f64) -> Result<Self> {
        let diag: Vec<f64> = pattern.diag().iter().map(|d| scale * d + shift).collect();
        Self::new(pattern, &diag, -scale)
    }

    pub fn dim(&self) -> usize {
        self.layout.dim()
    }

    pub fn layout(&self) -> &EnvelopeLayout {
        &self.layout
    }

    fn entry(&self, row: usize, col: usize) -> f64 {
        self.values[self.layout.row_start[row] + (col - self.layout.first[row])]
    }

    /// Solves `L y = b` in place (permuted coordinates).
    fn forward(&self, y: &mut [f64]) {
        for k in 0..self.dim() {
            let fk = self.layout.first[k];
            let base = self.layout.row_start[k];
            let mut acc = y[k];
            for t in fk..k {
                acc -= self.values[base + (t - fk)] * y[t];
            }
            y[k] = acc / self.values[base + (k - fk)];
        }
    }

    /// Solves `Lᵀ x = y` in place (permuted coordinates).
    fn backward(&self, x: &mut [f64]) {
        for k in (0..self.dim()).rev() {
            let fk = self.layout.first[k];
            let base = self.layout.row_start[k];
            x[k] /= self.values[base + (k - fk)];
            let xk = x[k];
            for t in fk..k {
                x[t] -= self.values[base + (t - fk)] * xk;
            }
        }
    }

    /// Solves `M x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        assert_eq!(b.len(), self.dim(), "right-hand side length");
        let mut y: Vec<f64> = self.layout.perm.iter().map(|&i| b[i]).collect();
        self.forward(&mut y);
        self.backward(&mut y);
        self.unpermute(&y)
    }

    /// Returns `x` with `M = Pᵀ L Lᵀ P` and `x = Pᵀ L⁻ᵀ z`; if `z` is standard
    /// normal then `x` has covariance `M⁻¹`.
    pub fn solve_upper(&self, z: &[f64]) -> Vec<f64> {
        assert_eq!(z.len(), self.dim(), "right-hand side length");
        let mut x = z.to_vec();
        self.backward(&mut x);
        self.unpermute(&x)
    }

    fn unpermute(&self, permuted: &[f64]) -> Vec<f64> {
        self.layout.inv.iter().map(|&k| permuted[k]).collect()
    }

    /// `log det M`.
    pub fn log_det(&self) -> f64 {
        2.0 * (0..self.dim()).map(|k| self.entry(k, k).ln()).sum::<f64>()
    }
}

/// Reverse Cuthill-McKee: BFS per component from a low-degree peripheral
/// vertex, visiting neighbors by ascending degree, then reversed.
fn reverse_cuthill_mckee(pattern: &PrecisionPattern) -> Vec<usize> {
    let n = pattern.dim();
    let degree = |v: usize| pattern.row_neighbors(v).len();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut by_degree: Vec<usize> = (0..n).collect();
    by_degree.sort_by_key(|&v| (degree(v), v));

    for &seed in &by_degree {
        if visited[seed] {
            continue;
        }
        let root = peripheral(pattern, seed);
        visited[root] = true;
        let mut queue = VecDeque::from([root]);
        while let Some(v) = queue.pop_front() {
            order.push(v);
            let mut next: Vec<usize> = pattern
                .row_neighbors(v)
                .iter()
                .copied()
                .filter(|&w| !visited[w])
                .collect();
            next.sort_by_key(|&w| (degree(w), w));
            for w in next {
                visited[w] = true;
                queue.push_back(w);
            }
        }
    }
    order.reverse();
    order
}

/// Pseudo-peripheral vertex of `start`'s component by repeated BFS.
fn peripheral(pattern: &PrecisionPattern, start: usize) -> usize {
    let mut root = start;
    let mut best_ecc = 0;
    for _ in 0..8 {
        let (far, ecc) = farthest(pattern, root);
        if ecc <= best_ecc {
            break;
        }
        best_ecc = ecc;
        root = far;
    }
    root
}

fn farthest(pattern: &PrecisionPattern, root: usize) -> (usize, usize) {
    let mut dist = vec![usize::MAX; pattern.dim()];
    dist[root] = 0;
    let mut queue = VecDeque::from([root]);
    let mut best = (root, 0);
    while let Some(v) = queue.pop_front() {
        let d = dist[v];
        let deg = pattern.row_neighbors(v).len();
        let best_deg = pattern.row_neighbors(best.0).len();
        if d > best.1 || (d == best.1 && deg < best_deg) {
            best = (v, d);
        }
        for &w in pattern.row_neighbors(v) {
            if dist[w] == usize::MAX {
                dist[w] = d + 1;
                queue.push_back(w);
            }
        }
    }
    best
}
