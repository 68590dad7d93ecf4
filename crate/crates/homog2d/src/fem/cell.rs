//! P1 periodic unit-cell solver: computes cell correctors and the discrete
//! homogenized tensor in the *same* finite element space and quadrature used
//! by the fine-scale assembly, so that discretization errors cancel in
//! corrector studies.

use super::{assemble, foreach_subtriangle, sparse, Coefficient, DiscreteSystem, Mesh, SolveOptions};
use crate::error::{Error, Result};
use crate::microstructure::BlockMatrix;
use crate::microstructure::PeriodicTensor;

/// Fully periodic structured mesh of the unit cell `[0,1]^2` with `n x n`
/// cells; right column and top row are identified with their opposites.
pub fn periodic_cell_mesh(n: usize) -> Mesh {
    let mut mesh = Mesh::structured_rectangle([0.0, 0.0], [1.0, 1.0], n, n);
    let idx = |i: usize, j: usize| j * (n + 1) + i;
    for j in 0..=n {
        mesh.identify[idx(n, j)] = idx(0, if j == n { 0 } else { j });
    }
    for i in 0..n {
        mesh.identify[idx(i, n)] = idx(i, 0);
    }
    mesh
}

/// Discrete cell correctors `chi_h^gamma` (zero mean) and the matching
/// discrete homogenized tensor.
pub struct DiscreteCell {
    pub system: DiscreteSystem,
    /// `chi[gamma][col]` is a full nodal field (component-major per node)
    /// giving the column `col` of the corrector matrix `chi^gamma`.
    pub chi: [Vec<Vec<f64>>; 2],
    pub a0: BlockMatrix,
}

/// Solve the discrete periodic cell problems on an `n x n` P1 torus mesh
/// with quadrature subdivision level `subdiv`.
pub fn solve_cell_fem(
    tensor: &PeriodicTensor,
    n: usize,
    subdiv: usize,
    opts: SolveOptions,
) -> Result<DiscreteCell> {
    let ncomp = tensor.ncomp();
    let mesh = periodic_cell_mesh(n);
    let coef = Coefficient::Oscillating { tensor, eps: 1.0 };
    let system = assemble(&mesh, &coef, subdiv, Some(&[]));
    debug_assert_eq!(system.fixed_dofs.len(), 0);

    // Element-averaged coefficient blocks, reused for loads and for A0.
    let nt = mesh.triangles.len();
    let mut abar = vec![BlockMatrix::zeros(ncomp); nt];
    let mut apoint = BlockMatrix::zeros(ncomp);
    for t in 0..nt {
        let tri = mesh.triangles[t];
        let verts = tri.map(|v| mesh.nodes[v]);
        let area = mesh.triangle_area(t);
        foreach_subtriangle(subdiv, &mut |bary, w| {
            let x = [
                bary[0] * verts[0][0] + bary[1] * verts[1][0] + bary[2] * verts[2][0],
                bary[0] * verts[0][1] + bary[1] * verts[1][1] + bary[2] * verts[2][1],
            ];
            tensor.eval(x, &mut apoint);
            for alpha in 0..2 {
                for beta in 0..2 {
                    for i in 0..ncomp {
                        for j in 0..ncomp {
                            *abar[t].entry_mut(alpha, beta, i, j) +=
                                w * area * apoint.entry(alpha, beta, i, j);
                        }
                    }
                }
            }
        });
    }

    let nfree = system.free_dofs.len();
    let mut chi: [Vec<Vec<f64>>; 2] = [Vec::new(), Vec::new()];
    for gamma in 0..2 {
        for col in 0..ncomp {
            // Weak form: a(chi, phi) = -int A^{alpha gamma}_{i col} d_alpha phi_i.
            let mut rhs = vec![0.0; nfree];
            for t in 0..nt {
                let tri = mesh.triangles[t];
                let (g, _) = mesh.p1_gradients(t);
                for a in 0..3 {
                    for i in 0..ncomp {
                        let dof = mesh.identify[tri[a]] * ncomp + i;
                        if let super::DofClass::Free(fi) = system.dof_class[dof] {
                            for alpha in 0..2 {
                                rhs[fi] -= abar[t].entry(alpha, gamma, i, col) * g[a][alpha];
                            }
                        }
                    }
                }
            }
            let x = solve_singular(&system.kff, &rhs, ncomp, opts)?;
            let mut full = system.expand(&x, &[]);
            // Mass-weighted zero mean per component.
            let ndof = full.len();
            for c in 0..ncomp {
                let ones: Vec<f64> = (0..ndof)
                    .map(|d| if d % ncomp == c { 1.0 } else { 0.0 })
                    .collect();
                let mean = system.mass_inner(&full, &ones) / system.mass_inner(&ones, &ones);
                for node in 0..mesh.nodes.len() {
                    full[node * ncomp + c] -= mean;
                }
            }
            chi[gamma].push(full);
        }
    }

    // Discrete homogenized tensor:
    // A0^{ab}_{ij} = int A^{ab}_{ij} + int A^{ag}_{ik} d_g (chi^b)_{kj}.
    let mut a0 = BlockMatrix::zeros(ncomp);
    for t in 0..nt {
        let tri = mesh.triangles[t];
        let (g, _) = mesh.p1_gradients(t);
        for alpha in 0..2 {
            for beta in 0..2 {
                for i in 0..ncomp {
                    for j in 0..ncomp {
                        let mut acc = abar[t].entry(alpha, beta, i, j);
                        for gam in 0..2 {
                            for k in 0..ncomp {
                                // d_gam (chi^beta)_{kj}, constant per element,
                                // weighted by the element-integrated
                                // coefficient.
                                let mut d = 0.0;
                                for (a, &node) in tri.iter().enumerate() {
                                    d += chi[beta][j][node * ncomp + k] * g[a][gam];
                                }
                                acc += d * abar[t].entry(alpha, gam, i, k);
                            }
                        }
                        *a0.entry_mut(alpha, beta, i, j) += acc;
                    }
                }
            }
        }
    }
    Ok(DiscreteCell { system, chi, a0 })
}

/// Jacobi-preconditioned CG on the zero-mean subspace of a singular SPD
/// system (kernel = per-component constants).
fn solve_singular(kff: &sparse::Csr, rhs: &[f64], ncomp: usize, opts: SolveOptions) -> Result<Vec<f64>> {
    let n = rhs.len();
    let project = |v: &mut [f64]| {
        for c in 0..ncomp {
            let mut mean = 0.0;
            let mut count = 0usize;
            for (d, x) in v.iter().enumerate() {
                if d % ncomp == c {
                    mean += x;
                    count += 1;
                }
            }
            mean /= count as f64;
            for (d, x) in v.iter_mut().enumerate() {
                if d % ncomp == c {
                    *x -= mean;
                }
            }
        }
    };
    let diag = kff.diagonal();
    let mut b = rhs.to_vec();
    project(&mut b);
    let mut x = vec![0.0; n];
    let mut r = b.clone();
    let mut z: Vec<f64> = r.iter().zip(&diag).map(|(r, d)| r / d).collect();
    project(&mut z);
    let mut p = z.clone();
    let mut rz = sparse::dot(&r, &z);
    let bnorm = sparse::norm(&b).max(f64::MIN_POSITIVE);
    for _ in 0..opts.max_iterations {
        if sparse::norm(&r) <= opts.rtol * bnorm {
            return Ok(x);
        }
        let ap = kff.matvec_alloc(&p);
        let alpha = rz / sparse::dot(&p, &ap);
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        project(&mut x);
        project(&mut r);
        z = r.iter().zip(&diag).map(|(r, d)| r / d).collect();
        project(&mut z);
        let rz_new = sparse::dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(Error::NonConvergence {
        context: "periodic cell solve".into(),
        residual: sparse::norm(&r) / bnorm,
        iterations: opts.max_iterations,
        tolerance: opts.rtol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::microstructure::Preset;
    use approx::assert_abs_diff_eq;

    #[test]
    fn identity_cell_has_zero_corrector_and_identity_a0() {
        let id = PeriodicTensor::preset(Preset::Identity { ncomp: 1 });
        let cell = solve_cell_fem(&id, 8, 0, SolveOptions::default()).unwrap();
        for gamma in 0..2 {
            for v in &cell.chi[gamma][0] {
                assert_abs_diff_eq!(*v, 0.0, epsilon = 1e-10);
            }
        }
        let expected = BlockMatrix::identity(1);
        assert!(cell.a0.max_abs_diff(&expected) <= 1e-12);
    }

    #[test]
    fn laminate_discrete_a0_converges_to_harmonic_mean() {
        let lam = PeriodicTensor::preset(Preset::Laminate);
        let mut vals = Vec::new();
        for n in [8usize, 16, 32] {
            let cell = solve_cell_fem(&lam, n, 2, SolveOptions::default()).unwrap();
            // A0 must stay symmetric.
            assert!(cell.a0.symmetry_defect() <= 1e-10);
            vals.push(cell.a0.entry(0, 0, 0, 0));
        }
        let exact = 3.0f64.sqrt();
        let errs: Vec<f64> = vals.iter().map(|v| (v - exact).abs()).collect();
        assert!(errs[2] < errs[1] && errs[1] < errs[0], "{vals:?}");
        // At least first-order decay between the finest levels.
        assert!(errs[2] <= 0.6 * errs[1], "{errs:?}");
    }

    #[test]
    fn laminate_transverse_entry_is_arithmetic_mean() {
        let lam = PeriodicTensor::preset(Preset::Laminate);
        let cell = solve_cell_fem(&lam, 32, 2, SolveOptions::default()).unwrap();
        assert_abs_diff_eq!(cell.a0.entry(1, 1, 0, 0), 2.0, epsilon = 5e-3);
    }
}
