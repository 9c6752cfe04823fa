//! Envelope (profile) LDLᵀ factorization for symmetric nodal matrices.
//!
//! Nodal matrices of ladder networks are extremely sparse and nearly banded
//! once the nodes are renumbered with reverse Cuthill-McKee, so a profile
//! solver beats a general sparse LU by a wide margin for this workload. The
//! same code serves the real time-domain conductance matrix and the complex
//! symmetric admittance matrix used by frequency scans.

use std::collections::VecDeque;
use std::fmt::Debug;
use std::ops::{Add, Div, Mul, Neg, Sub};

use num_complex::Complex64;

use crate::error::LinalgError;

/// Field element usable by the envelope solver.
pub trait Scalar:
    Copy
    + Debug
    + Send
    + Sync
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + PartialEq
{
    fn zero() -> Self;
    fn modulus(self) -> f64;
    fn is_finite_value(self) -> bool;
}

impl Scalar for f64 {
    fn zero() -> Self {
        0.0
    }
    fn modulus(self) -> f64 {
        self.abs()
    }
    fn is_finite_value(self) -> bool {
        self.is_finite()
    }
}

impl Scalar for Complex64 {
    fn zero() -> Self {
        Complex64::new(0.0, 0.0)
    }
    fn modulus(self) -> f64 {
        self.norm()
    }
    fn is_finite_value(self) -> bool {
        self.re.is_finite() && self.im.is_finite()
    }
}

/// A symmetric node permutation (`perm[new] = old`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ordering {
    perm: Vec<usize>,
    inv: Vec<usize>,
}

impl Ordering {
    pub fn identity(n: usize) -> Self {
        let perm: Vec<usize> = (0..n).collect();
        Self {
            inv: perm.clone(),
            perm,
        }
    }

    /// Reverse Cuthill-McKee ordering of the graph given by `edges`.
    ///
    /// Every connected component is started from a pseudo-peripheral node of
    /// minimum degree; ties are broken by node index so the result is
    /// deterministic.
    pub fn reverse_cuthill_mckee(n: usize, edges: &[(usize, usize)]) -> Self {
        let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
        for &(a, b) in edges {
            if a != b && a < n && b < n {
                adj[a].push(b);
                adj[b].push(a);
            }
        }
        for list in adj.iter_mut() {
            list.sort_unstable();
            list.dedup();
        }
        let degree: Vec<usize> = adj.iter().map(Vec::len).collect();

        let mut visited = vec![false; n];
        let mut order = Vec::with_capacity(n);
        let mut by_degree: Vec<usize> = (0..n).collect();
        by_degree.sort_by_key(|&i| (degree[i], i));

        for &seed in &by_degree {
            if visited[seed] {
                continue;
            }
            let start = pseudo_peripheral(seed, &adj, &degree);
            let mut queue = VecDeque::new();
            visited[start] = true;
            queue.push_back(start);
            while let Some(node) = queue.pop_front() {
                order.push(node);
                let mut next: Vec<usize> =
                    adj[node].iter().copied().filter(|&m| !visited[m]).collect();
                next.sort_by_key(|&m| (degree[m], m));
                for m in next {
                    visited[m] = true;
                    queue.push_back(m);
                }
            }
        }
        order.reverse();
        let mut inv = vec![0; n];
        for (new, &old) in order.iter().enumerate() {
            inv[old] = new;
        }
        Self { perm: order, inv }
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    /// New position of original index `old`.
    pub fn new_index(&self, old: usize) -> usize {
        self.inv[old]
    }

    /// Original index at new position `new`.
    pub fn old_index(&self, new: usize) -> usize {
        self.perm[new]
    }
}

/// Finds a node far from `seed` by repeated BFS level-structure sweeps.
fn pseudo_peripheral(seed: usize, adj: &[Vec<usize>], degree: &[usize]) -> usize {
    let mut current = seed;
    let mut best_depth = 0;
    for _ in 0..8 {
        let (depth, last_level) = bfs_levels(current, adj);
        let candidate = *last_level
            .iter()
            .min_by_key(|&&m| (degree[m], m))
            .unwrap_or(&current);
        if depth <= best_depth && current != seed {
            break;
        }
        best_depth = depth;
        if candidate == current {
            break;
        }
        current = candidate;
    }
    current
}

fn bfs_levels(start: usize, adj: &[Vec<usize>]) -> (usize, Vec<usize>) {
    let mut level = vec![usize::MAX; adj.len()];
    level[start] = 0;
    let mut frontier = vec![start];
    let mut depth = 0;
    loop {
        let mut next = Vec::new();
        for &node in &frontier {
            for &m in &adj[node] {
                if level[m] == usize::MAX {
                    level[m] = depth + 1;
                    next.push(m);
                }
            }
        }
        if next.is_empty() {
            return (depth, frontier);
        }
        depth += 1;
        frontier = next;
    }
}

/// LDLᵀ factors stored row-wise inside the lower envelope.
#[derive(Debug, Clone)]
pub struct EnvelopeLdl<T: Scalar> {
    ordering: Ordering,
    /// First stored column of every (permuted) row.
    first: Vec<usize>,
    /// Offset of each row's first stored entry in `values`.
    start: Vec<usize>,
    /// Row `i` holds `L[i, first[i]..i]` followed by `D[i]`.
    values: Vec<T>,
}

impl<T: Scalar> EnvelopeLdl<T> {
    /// Factors the symmetric matrix given as triplets in original numbering.
    ///
    /// Duplicate entries are summed. Only one triangle needs to be supplied:
    /// an entry `(i, j)` is taken to stand for both `(i, j)` and `(j, i)`,
    /// so off-diagonal stamps must be given exactly once.
    pub fn factor(
        n: usize,
        triplets: &[(usize, usize, T)],
        ordering: &Ordering,
        pivot_tol: f64,
    ) -> Result<Self, LinalgError> {
        assert_eq!(ordering.len(), n, "ordering size mismatch");
        let mut first: Vec<usize> = (0..n).collect();
        for &(i, j, _) in triplets {
            let (pi, pj) = (ordering.new_index(i), ordering.new_index(j));
            let (r, c) = if pi >= pj { (pi, pj) } else { (pj, pi) };
            if c < first[r] {
                first[r] = c;
            }
        }
        let mut start = Vec::with_capacity(n + 1);
        let mut total = 0;
        for (i, &f) in first.iter().enumerate() {
            start.push(total);
            total += i - f + 1;
        }
        start.push(total);
        let mut values = vec![T::zero(); total];
        let mut max_diag = 0.0f64;
        for &(i, j, v) in triplets {
            let (pi, pj) = (ordering.new_index(i), ordering.new_index(j));
            let (r, c) = if pi >= pj { (pi, pj) } else { (pj, pi) };
            let slot = start[r] + (c - first[r]);
            values[slot] = values[slot] + v;
        }
        for i in 0..n {
            max_diag = max_diag.max(values[start[i + 1] - 1].modulus());
        }

        let mut fac = Self {
            ordering: ordering.clone(),
            first,
            start,
            values,
        };
        fac.factor_in_place(pivot_tol * max_diag.max(f64::MIN_POSITIVE))?;
        Ok(fac)
    }

    fn factor_in_place(&mut self, abs_tol: f64) -> Result<(), LinalgError> {
        let n = self.first.len();
        // Scratch row of L[i,k]*D[k] products for the current row.
        let mut scaled: Vec<T> = Vec::new();
        for i in 0..n {
            let fi = self.first[i];
            let si = self.start[i];
            let len = i - fi;
            scaled.clear();
            scaled.resize(len, T::zero());
            for j in fi..i {
                let fj = self.first[j];
                let sj = self.start[j];
                let k0 = fi.max(fj);
                let mut acc = self.values[si + (j - fi)];
                for k in k0..j {
                    acc = acc - scaled[k - fi] * self.values[sj + (k - fj)];
                }
                // acc is now L[i,j] * D[j]
                let dj = self.values[self.start[j + 1] - 1];
                scaled[j - fi] = acc;
                self.values[si + (j - fi)] = acc / dj;
            }
            let mut d = self.values[si + len];
            for k in fi..i {
                d = d - scaled[k - fi] * self.values[si + (k - fi)];
            }
            if !d.is_finite_value() || d.modulus() <= abs_tol {
                return Err(LinalgError::Singular {
                    index: self.ordering.old_index(i),
                });
            }
            self.values[si + len] = d;
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.first.len()
    }

    /// Solves `A x = b`; `rhs` holds `b` on entry and `x` on return.
    /// `work` is resized as needed and may be reused between calls.
    pub fn solve_in_place(&self, rhs: &mut [T], work: &mut Vec<T>) {
        let n = self.dim();
        work.clear();
        work.extend((0..n).map(|i| rhs[self.ordering.old_index(i)]));
        // L z = b
        for i in 0..n {
            let fi = self.first[i];
            let si = self.start[i];
            let mut acc = work[i];
            for k in fi..i {
                acc = acc - self.values[si + (k - fi)] * work[k];
            }
            work[i] = acc;
        }
        // D y = z
        for i in 0..n {
            work[i] = work[i] / self.values[self.start[i + 1] - 1];
        }
        // Lᵀ x = y, column-oriented over the row storage
        for i in (0..n).rev() {
            let fi = self.first[i];
            let si = self.start[i];
            let xi = work[i];
            for k in fi..i {
                work[k] = work[k] - self.values[si + (k - fi)] * xi;
            }
        }
        for i in 0..n {
            rhs[self.ordering.old_index(i)] = work[i];
        }
    }

    /// Number of stored factor entries (profile size).
    pub fn profile(&self) -> usize {
        self.values.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense_mul(n: usize, trip: &[(usize, usize, f64)], x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; n];
        for &(i, j, v) in trip {
            y[i] += v * x[j];
            if i != j {
                y[j] += v * x[i];
            }
        }
        y
    }

    fn ladder(n: usize) -> Vec<(usize, usize, f64)> {
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, 2.5 + i as f64 * 0.01));
            if i + 1 < n {
                t.push((i + 1, i, -1.0));
            }
        }
        // a long-range coupling to exercise the ordering
        t.push((n - 1, 0, -0.3));
        t
    }

    #[test]
    fn solves_ladder_with_rcm() {
        let n = 40;
        let trip = ladder(n);
        let edges: Vec<_> = trip.iter().map(|&(i, j, _)| (i, j)).collect();
        let ord = Ordering::reverse_cuthill_mckee(n, &edges);
        let f = EnvelopeLdl::factor(n, &trip, &ord, 1e-14).unwrap();
        let x_true: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        let mut b = dense_mul(n, &trip, &x_true);
        let mut work = Vec::new();
        f.solve_in_place(&mut b, &mut work);
        for (a, e) in b.iter().zip(&x_true) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn rcm_is_a_permutation() {
        let edges = vec![(0, 5), (5, 2), (2, 7), (1, 3), (3, 4)];
        let ord = Ordering::reverse_cuthill_mckee(8, &edges);
        let mut seen: Vec<usize> = (0..8).map(|i| ord.old_index(i)).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..8).collect::<Vec<_>>());
        for i in 0..8 {
            assert_eq!(ord.old_index(ord.new_index(i)), i);
        }
    }

    #[test]
    fn detects_singular_matrix() {
        // two nodes joined by a conductance, no path to ground
        let trip = vec![(0, 0, 1.0), (1, 1, 1.0), (1, 0, -1.0)];
        let ord = Ordering::identity(2);
        let err = EnvelopeLdl::factor(2, &trip, &ord, 1e-12).unwrap_err();
        assert!(matches!(err, LinalgError::Singular { .. }));
    }

    #[test]
    fn complex_symmetric_solve() {
        let j = Complex64::new(0.0, 1.0);
        let trip = vec![
            (0, 0, Complex64::new(1.0, 0.0) + j * 2.0),
            (1, 1, Complex64::new(0.5, 0.0) - j * 0.3),
            (1, 0, -j * 0.7),
            (2, 2, Complex64::new(3.0, 1.0)),
            (2, 1, Complex64::new(-1.0, 0.0)),
        ];
        let ord = Ordering::identity(3);
        let f = EnvelopeLdl::factor(3, &trip, &ord, 1e-14).unwrap();
        let x = [Complex64::new(1.0, -1.0), Complex64::new(0.2, 0.0), j];
        let mut b = vec![Complex64::new(0.0, 0.0); 3];
        for &(r, c, v) in &trip {
            b[r] += v * x[c];
            if r != c {
                b[c] += v * x[r];
            }
        }
        let mut work = Vec::new();
        f.solve_in_place(&mut b, &mut work);
        for (a, e) in b.iter().zip(&x) {
            assert!((a - e).norm() < 1e-12);
        }
    }
}
