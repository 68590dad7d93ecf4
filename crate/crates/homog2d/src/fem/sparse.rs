//! Minimal CSR sparse matrix with a Jacobi-preconditioned conjugate-gradient
//! solver — all the linear algebra the P1 pipeline needs.

use rayon::prelude::*;

/// Compressed sparse row matrix.
#[derive(Debug, Clone)]
pub struct Csr {
    nrows: usize,
    ncols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl Csr {
    /// Build from unsorted triplets, summing duplicates.
    pub fn from_triplets(
        nrows: usize,
        ncols: usize,
        mut triplets: Vec<(usize, usize, f64)>,
    ) -> Self {
        triplets.sort_unstable_by_key(|&(r, c, _)| (r, c));
        let mut indptr = vec![0usize; nrows + 1];
        let mut indices = Vec::new();
        let mut values = Vec::new();
        let mut iter = triplets.into_iter().peekable();
        while let Some((r, c, mut v)) = iter.next() {
            debug_assert!(r < nrows && c < ncols);
            while let Some(&(r2, c2, v2)) = iter.peek() {
                if r2 == r && c2 == c {
                    v += v2;
                    iter.next();
                } else {
                    break;
                }
            }
            indices.push(c);
            values.push(v);
            indptr[r + 1] += 1;
        }
        for r in 0..nrows {
            indptr[r + 1] += indptr[r];
        }
        Self {
            nrows,
            ncols,
            indptr,
            indices,
            values,
        }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.ncols);
        debug_assert_eq!(y.len(), self.nrows);
        y.par_iter_mut().enumerate().for_each(|(r, yr)| {
            let mut acc = 0.0;
            for k in self.indptr[r]..self.indptr[r + 1] {
                acc += self.values[k] * x[self.indices[k]];
            }
            *yr = acc;
        });
    }

    pub fn matvec_alloc(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.nrows];
        self.matvec(x, &mut y);
        y
    }

    pub fn diagonal(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.nrows];
        for r in 0..self.nrows {
            for k in self.indptr[r]..self.indptr[r + 1] {
                if self.indices[k] == r {
                    d[r] = self.values[k];
                }
            }
        }
        d
    }

    /// Max over stored entries of `|a_ij - a_ji|` (requires square).
    pub fn symmetry_defect(&self) -> f64 {
        let mut worst = 0.0f64;
        for r in 0..self.nrows {
            for k in self.indptr[r]..self.indptr[r + 1] {
                let c = self.indices[k];
                let mut other = 0.0;
                for k2 in self.indptr[c]..self.indptr[c + 1] {
                    if self.indices[k2] == r {
                        other = self.values[k2];
                    }
                }
                worst = worst.max((self.values[k] - other).abs());
            }
        }
        worst
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let mut m = nalgebra::DMatrix::zeros(self.nrows, self.ncols);
        for r in 0..self.nrows {
            for k in self.indptr[r]..self.indptr[r + 1] {
                m[(r, self.indices[k])] += self.values[k];
            }
        }
        m
    }
}

/// Result of a PCG solve.
#[derive(Debug, Clone, Copy)]
pub struct CgOutcome {
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Jacobi-preconditioned conjugate gradients for SPD systems.
pub fn pcg(a: &Csr, b: &[f64], x0: Option<&[f64]>, rtol: f64, max_iter: usize) -> (Vec<f64>, CgOutcome) {
    let n = b.len();
    let diag = a.diagonal();
    let inv_diag: Vec<f64> = diag
        .iter()
        .map(|&d| if d.abs() > 0.0 { 1.0 / d } else { 1.0 })
        .collect();
    let bnorm = norm(b);
    let mut x = x0.map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
    if bnorm == 0.0 {
        return (
            vec![0.0; n],
            CgOutcome {
                residual: 0.0,
                iterations: 0,
                converged: true,
            },
        );
    }
    let mut r = b.to_vec();
    if x0.is_some() {
        let ax = a.matvec_alloc(&x);
        for (rv, av) in r.iter_mut().zip(&ax) {
            *rv -= av;
        }
    }
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(rv, iv)| rv * iv).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut res = norm(&r) / bnorm;
    let mut ap = vec![0.0; n];
    for it in 0..max_iter {
        if res <= rtol {
            return (
                x,
                CgOutcome {
                    residual: res,
                    iterations: it,
                    converged: true,
                },
            );
        }
        a.matvec(&p, &mut ap);
        let alpha = rz / dot(&p, &ap);
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        res = norm(&r) / bnorm;
        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    let converged = res <= rtol;
    (
        x,
        CgOutcome {
            residual: res,
            iterations: max_iter,
            converged,
        },
    )
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn triplets_sum_duplicates() {
        let a = Csr::from_triplets(
            2,
            2,
            vec![(0, 0, 1.0), (0, 0, 1.5), (1, 1, 2.0), (0, 1, 0.5)],
        );
        assert_eq!(a.nnz(), 3);
        let y = a.matvec_alloc(&[1.0, 1.0]);
        assert_abs_diff_eq!(y[0], 3.0);
        assert_abs_diff_eq!(y[1], 2.0);
    }

    #[test]
    fn pcg_solves_small_spd_system() {
        // Tridiagonal Laplacian.
        let n = 50;
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, 2.0));
            if i > 0 {
                t.push((i, i - 1, -1.0));
                t.push((i - 1, i, -1.0));
            }
        }
        let a = Csr::from_triplets(n, n, t);
        let xstar: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        let b = a.matvec_alloc(&xstar);
        let (x, out) = pcg(&a, &b, None, 1e-12, 1000);
        assert!(out.converged);
        for (xi, xs) in x.iter().zip(&xstar) {
            assert_abs_diff_eq!(xi, xs, epsilon = 1e-8);
        }
    }
}
