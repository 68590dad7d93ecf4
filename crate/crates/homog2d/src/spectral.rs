//! Generalized symmetric eigenproblems `K v = lambda M v` for the assembled
//! stiffness/mass pairs: a dense Cholesky-based solver for small systems and
//! shift-invert Lanczos with full reorthogonalization for large ones, plus
//! eigenvalue clustering and cluster harmonic means.

use crate::error::{Error, Result};
use crate::fem::sparse::{self, Csr};
use nalgebra::DMatrix;

/// Options for [`solve_eigenpairs`].
#[derive(Debug, Clone, Copy)]
pub struct EigenOptions {
    /// Relative residual tolerance: each pair must satisfy
    /// `||K v - lambda M v||_2 <= tolerance * lambda * ||v||_M`.
    pub tolerance: f64,
    /// Maximum Lanczos steps (ignored on the dense path).
    pub max_iterations: usize,
    /// Systems with at most this many dofs use the dense solver.
    pub dense_cutoff: usize,
}

impl Default for EigenOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-8,
            max_iterations: 600,
            dense_cutoff: 2000,
        }
    }
}

/// The `count` smallest eigenpairs, ascending; vectors are M-orthonormal and
/// live on the free dofs of the assembling system.
#[derive(Debug, Clone)]
pub struct EigenSolution {
    pub values: Vec<f64>,
    pub vectors: Vec<Vec<f64>>,
}

/// Compute the `count` smallest eigenpairs of `K v = lambda M v` for SPD `K`
/// and `M`.
pub fn solve_eigenpairs(k: &Csr, m: &Csr, count: usize, opts: EigenOptions) -> Result<EigenSolution> {
    let n = k.nrows();
    assert_eq!(k.ncols(), n);
    assert_eq!((m.nrows(), m.ncols()), (n, n));
    if count == 0 || count > n {
        return Err(Error::DimensionMismatch {
            message: format!("requested {count} eigenpairs of a {n}-dof system"),
        });
    }
    let sol = if n <= opts.dense_cutoff {
        solve_dense(k, m, count)?
    } else {
        solve_lanczos(k, m, count, opts)?
    };
    verify(k, m, &sol, opts.tolerance)?;
    Ok(sol)
}

fn solve_dense(k: &Csr, m: &Csr, count: usize) -> Result<EigenSolution> {
    let kd = k.to_dense();
    let md = m.to_dense();
    let chol = md
        .clone()
        .cholesky()
        .ok_or_else(|| Error::SolverFailure {
            context: "mass matrix Cholesky".into(),
            residual: f64::NAN,
            iterations: 0,
        })?;
    let l = chol.l();
    // C = L^-1 K L^-T, symmetric.
    let mut c = kd;
    // Solve L X = K (column-wise), then (L Y^T = X^T)^T.
    l.solve_lower_triangular_mut(&mut c);
    c.transpose_mut();
    l.solve_lower_triangular_mut(&mut c);
    // Symmetrize against round-off.
    let c = (&c + c.transpose()) * 0.5;
    let eig = c.symmetric_eigen();
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let mut values = Vec::with_capacity(count);
    let mut vectors = Vec::with_capacity(count);
    let lt = l.transpose();
    for &idx in order.iter().take(count) {
        let lambda = eig.eigenvalues[idx];
        if lambda <= 0.0 {
            return Err(Error::NonPositiveEigenvalue { value: lambda });
        }
        let mut q = DMatrix::from_column_slice(k.nrows(), 1, eig.eigenvectors.column(idx).as_slice());
        lt.solve_upper_triangular_mut(&mut q);
        let v: Vec<f64> = q.column(0).iter().cloned().collect();
        let vn = m_norm(m, &v);
        values.push(lambda);
        vectors.push(v.iter().map(|x| x / vn).collect());
    }
    Ok(EigenSolution { values, vectors })
}

fn m_inner(m: &Csr, a: &[f64], b: &[f64]) -> f64 {
    sparse::dot(&m.matvec_alloc(a), b)
}

fn m_norm(m: &Csr, a: &[f64]) -> f64 {
    m_inner(m, a, a).sqrt()
}

/// Shift-invert Lanczos (shift 0) with M-inner products and full
/// reorthogonalization; inner solves by Jacobi-preconditioned CG.
fn solve_lanczos(k: &Csr, m: &Csr, count: usize, opts: EigenOptions) -> Result<EigenSolution> {
    let n = k.nrows();
    let max_steps = opts.max_iterations.min(n);
    // Deterministic seed vector.
    let mut q0: Vec<f64> = (0..n)
        .map(|i| {
            let mut z = (i as u64).wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(1);
            z ^= z >> 31;
            z = z.wrapping_mul(0xBF58476D1CE4E5B9);
            z ^= z >> 27;
            (z % 100_000) as f64 / 100_000.0 - 0.5
        })
        .collect();
    let nrm = m_norm(m, &q0);
    for x in &mut q0 {
        *x /= nrm;
    }
    let mut basis: Vec<Vec<f64>> = vec![q0];
    let mut alphas: Vec<f64> = Vec::new();
    let mut betas: Vec<f64> = Vec::new();
    let inner_rtol = (opts.tolerance * 1e-3).max(1e-13);
    let mut result: Option<EigenSolution> = None;
    for j in 0..max_steps {
        let qj = basis[j].clone();
        let rhs = m.matvec_alloc(&qj);
        let (mut w, out) = sparse::pcg(k, &rhs, None, inner_rtol, 50 * (n as f64).sqrt() as usize + 5000);
        if !out.converged {
            return Err(Error::SolverFailure {
                context: "shift-invert inner solve".into(),
                residual: out.residual,
                iterations: out.iterations,
            });
        }
        let alpha = m_inner(m, &w, &qj);
        alphas.push(alpha);
        // Full reorthogonalization against the whole basis: classical
        // Gram-Schmidt with one mass matvec per pass, two passes.
        for _ in 0..2 {
            let mw = m.matvec_alloc(&w);
            for q in &basis {
                let c = sparse::dot(&mw, q);
                for i in 0..n {
                    w[i] -= c * q[i];
                }
            }
        }
        let beta = m_norm(m, &w);
        // Check Ritz convergence every few steps once we have enough vectors.
        if basis.len() >= count && (beta <= 1e-14 || j + 1 == max_steps || (j + 1) % 5 == 0) {
            if let Some(sol) = ritz_extract(&basis, &alphas, &betas, m, count) {
                if verify(k, m, &sol, opts.tolerance).is_ok() {
                    result = Some(sol);
                    break;
                }
            }
        }
        if beta <= 1e-14 {
            break;
        }
        betas.push(beta);
        basis.push(w.iter().map(|x| x / beta).collect());
    }
    if result.is_none() {
        result = ritz_extract(&basis, &alphas, &betas, m, count);
    }
    result.ok_or(Error::EigenConvergenceFailure {
        index: count,
        residual: f64::NAN,
        tolerance: opts.tolerance,
        iterations: max_steps,
    })
}

fn ritz_extract(
    basis: &[Vec<f64>],
    alphas: &[f64],
    betas: &[f64],
    m: &Csr,
    count: usize,
) -> Option<EigenSolution> {
    let s = alphas.len();
    if s < count {
        return None;
    }
    let mut t = DMatrix::zeros(s, s);
    for i in 0..s {
        t[(i, i)] = alphas[i];
        if i + 1 < s {
            t[(i, i + 1)] = betas[i];
            t[(i + 1, i)] = betas[i];
        }
    }
    let eig = t.symmetric_eigen();
    // Largest theta of the inverse operator = smallest lambda.
    let mut order: Vec<usize> = (0..s).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let n = basis[0].len();
    let mut values: Vec<f64> = Vec::with_capacity(count);
    let mut vectors: Vec<Vec<f64>> = Vec::with_capacity(count);
    for &idx in order.iter().take(count) {
        let theta = eig.eigenvalues[idx];
        if theta <= 0.0 {
            return None;
        }
        let mut v = vec![0.0; n];
        for (c, q) in basis.iter().take(s).enumerate() {
            let s_c = eig.eigenvectors[(c, idx)];
            for i in 0..n {
                v[i] += s_c * q[i];
            }
        }
        let vn = m_norm(m, &v);
        values.push(1.0 / theta);
        vectors.push(v.iter().map(|x| x / vn).collect());
    }
    // Ascending.
    let mut idx: Vec<usize> = (0..count).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    Some(EigenSolution {
        values: idx.iter().map(|&i| values[i]).collect(),
        vectors: idx.iter().map(|&i| vectors[i].clone()).collect(),
    })
}

fn verify(k: &Csr, m: &Csr, sol: &EigenSolution, tol: f64) -> Result<()> {
    for w in sol.values.windows(2) {
        if w[1] < w[0] {
            return Err(Error::EigenConvergenceFailure {
                index: 0,
                residual: f64::NAN,
                tolerance: tol,
                iterations: 0,
            });
        }
    }
    for (lambda, v) in sol.values.iter().zip(&sol.vectors) {
        if *lambda <= 0.0 {
            return Err(Error::NonPositiveEigenvalue { value: *lambda });
        }
        let kv = k.matvec_alloc(v);
        let mv = m.matvec_alloc(v);
        let res: f64 = kv
            .iter()
            .zip(&mv)
            .map(|(a, b)| (a - lambda * b) * (a - lambda * b))
            .sum::<f64>()
            .sqrt();
        let vm = m_norm(m, v);
        if !(res <= tol * lambda * vm) {
            return Err(Error::EigenConvergenceFailure {
                index: sol.values.iter().position(|x| x == lambda).unwrap_or(0),
                residual: res / (lambda * vm),
                tolerance: tol,
                iterations: 0,
            });
        }
    }
    Ok(())
}

/// Greedy clustering of an ascending eigenvalue list: consecutive values
/// whose relative gap is at most `rel_tol` share a cluster. Returns index
/// ranges.
pub fn cluster_eigenvalues(values: &[f64], rel_tol: f64) -> Vec<std::ops::Range<usize>> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=values.len() {
        let split = i == values.len()
            || (values[i] - values[i - 1]).abs() > rel_tol * values[i - 1].abs().max(1e-300);
        if split {
            out.push(start..i);
            start = i;
        }
    }
    out
}

/// Harmonic mean of a cluster of eigenvalues: `m / sum(1/lambda_j)`.
pub fn harmonic_mean_cluster(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::ClusterMismatch {
            message: "empty cluster".into(),
        });
    }
    let mut acc = 0.0;
    for &v in values {
        if v <= 0.0 {
            return Err(Error::NonPositiveEigenvalue { value: v });
        }
        acc += 1.0 / v;
    }
    Ok(values.len() as f64 / acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::{assemble_constant, triangulate, DEFAULT_NODE_BUDGET};
    use crate::geometry::build_polygon;
    use crate::microstructure::BlockMatrix;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::PI;

    fn square_system(h: f64) -> crate::fem::DiscreteSystem {
        let square = build_polygon(&[[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]).unwrap();
        let mesh = triangulate(&square, h, DEFAULT_NODE_BUDGET).unwrap();
        assemble_constant(&mesh, &BlockMatrix::identity(1))
    }

    #[test]
    fn dirichlet_laplacian_spectrum_on_square() {
        let sys = square_system(1.0 / 40.0);
        let sol = solve_eigenpairs(&sys.kff, &sys.mff, 5, EigenOptions::default()).unwrap();
        let exact = [2.0, 5.0, 5.0, 8.0, 10.0].map(|s| PI * PI * s);
        for (l, e) in sol.values.iter().zip(exact) {
            // P1 eigenvalues converge from above at O(h^2).
            assert!(*l >= e - 1e-9, "{l} vs {e}");
            assert!((l - e) / e <= 1e-2, "{l} vs {e}");
        }
    }

    #[test]
    fn vectors_are_m_orthonormal() {
        let sys = square_system(1.0 / 24.0);
        let sol = solve_eigenpairs(&sys.kff, &sys.mff, 4, EigenOptions::default()).unwrap();
        for i in 0..4 {
            for j in 0..=i {
                let p = m_inner(&sys.mff, &sol.vectors[i], &sol.vectors[j]);
                let want = if i == j { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(p, want, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn lanczos_matches_dense() {
        let sys = square_system(1.0 / 40.0);
        let dense = solve_eigenpairs(&sys.kff, &sys.mff, 4, EigenOptions::default()).unwrap();
        let lopts = EigenOptions {
            dense_cutoff: 0,
            ..EigenOptions::default()
        };
        let lanc = solve_eigenpairs(&sys.kff, &sys.mff, 4, lopts).unwrap();
        for (a, b) in dense.values.iter().zip(&lanc.values) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-7 * a);
        }
    }

    #[test]
    fn minmax_monotone_under_coefficient_scaling() {
        let square = build_polygon(&[[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]).unwrap();
        let mesh = triangulate(&square, 1.0 / 16.0, DEFAULT_NODE_BUDGET).unwrap();
        let a1 = assemble_constant(&mesh, &BlockMatrix::identity(1));
        let two = BlockMatrix::identity(1).scaled(2.0);
        let a2 = assemble_constant(&mesh, &two);
        let s1 = solve_eigenpairs(&a1.kff, &a1.mff, 3, EigenOptions::default()).unwrap();
        let s2 = solve_eigenpairs(&a2.kff, &a2.mff, 3, EigenOptions::default()).unwrap();
        for (l1, l2) in s1.values.iter().zip(&s2.values) {
            assert_abs_diff_eq!(2.0 * l1, *l2, epsilon = 1e-8 * l2);
        }
    }

    #[test]
    fn clustering_and_harmonic_mean() {
        let vals = [10.0, 10.0000001, 25.0, 25.0000002, 25.0000003, 40.0];
        let clusters = cluster_eigenvalues(&vals, 1e-6);
        assert_eq!(clusters, vec![0..2, 2..5, 5..6]);
        let hm = harmonic_mean_cluster(&vals[2..5]).unwrap();
        assert!((hm - 25.0).abs() < 1e-6);
        assert!(harmonic_mean_cluster(&[]).is_err());
    }
}
