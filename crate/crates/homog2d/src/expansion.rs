//! Multiscale expansions and convergence studies: corrector reconstructions,
//! eigenvalue expansions with boundary-layer corrections, and the inverse
//! cluster-mean consistency check.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::boundary_layer::{
    linear_fit, solve_homogenized_bl, solve_homogenized_bl_with, solve_strip,
    BoundaryLayerTailSet, StripOptions, TailEntry,
};
use crate::error::{Error, Result};
use crate::fem::cell::solve_cell_fem;
use crate::fem::{
    assemble, integrate, p1_value, recover_gradient, triangulate, BoundaryData, Coefficient, Load,
    Mesh, SolveOptions, DEFAULT_NODE_BUDGET,
};
use crate::geometry::{build_polygon, PolygonDomain};
use crate::microstructure::{BlockMatrix, CellCorrectors, CellSolveOptions, MatrixField, PeriodicTensor};
use crate::spectral::{cluster_eigenvalues, harmonic_mean_cluster, solve_eigenpairs, EigenOptions};

// ---------------------------------------------------------------------------
// Convergence reports
// ---------------------------------------------------------------------------

/// One `(epsilon, value)` observation of a convergence study.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvergenceRow {
    pub eps: f64,
    pub value: f64,
}

/// Log-log least-squares fit of `value ~ C * eps^slope` with a two-sided 95%
/// confidence interval on the slope.
#[derive(Debug, Clone)]
pub struct ConvergenceReport {
    /// Label of the quantity whose decay is measured.
    pub quantity: String,
    /// Observations, as supplied (epsilon decreasing by convention).
    pub rows: Vec<ConvergenceRow>,
    /// Fitted decay order.
    pub slope: f64,
    /// 95% confidence interval for the slope.
    pub interval: (f64, f64),
    /// Coefficient of determination of the log-log fit.
    pub goodness: f64,
    /// Decay order claimed for this quantity.
    pub claimed: f64,
    /// Acceptance floor: the study passes when `slope >= floor`.
    pub floor: f64,
    pub pass: bool,
}

/// Two-sided 95% Student-t quantiles for 1..=10 degrees of freedom.
const T_95: [f64; 10] = [
    12.706, 4.303, 3.182, 2.776, 2.571, 2.447, 2.365, 2.306, 2.262, 2.228,
];

/// Fit a decay order to `(eps, value)` rows and compare against a claim.
///
/// Values are clamped below at `1e-16` before taking logs so exact zeros
/// (better-than-claimed convergence) do not poison the fit.
pub fn fit_report(
    quantity: &str,
    rows: &[ConvergenceRow],
    claimed: f64,
    floor: f64,
) -> Result<ConvergenceReport> {
    if rows.len() < 3 {
        return Err(Error::TooFewRows { found: rows.len() });
    }
    let xs: Vec<f64> = rows.iter().map(|r| r.eps.ln()).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.value.max(1e-16).ln()).collect();
    let (slope, goodness) = linear_fit(&xs, &ys);
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let my = ys.iter().sum::<f64>() / n;
    let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let df = rows.len() - 2;
    let half = if df == 0 {
        f64::INFINITY
    } else {
        let resid_var = ((syy - slope * sxy) / df as f64).max(0.0);
        let se = (resid_var / sxx).sqrt();
        T_95[(df - 1).min(T_95.len() - 1)] * se
    };
    let pass = slope >= floor;
    Ok(ConvergenceReport {
        quantity: quantity.to_string(),
        rows: rows.to_vec(),
        slope,
        interval: (slope - half, slope + half),
        goodness,
        claimed,
        floor,
        pass,
    })
}

// ---------------------------------------------------------------------------
// Multiscale reconstruction
// ---------------------------------------------------------------------------

/// Nodal multiscale reconstruction of a homogenized field `u0`:
///
/// * order 0: `u0` itself,
/// * order 1: `u0 + eps * chi^a(x/eps) d_a u0 + eps * theta_bl`,
/// * order 2: adds `eps^2 * Gamma^{ab}(x/eps) d_a d_b u0 + eps^2 * theta2_bl`.
///
/// Gradients and Hessians of `u0` are obtained by patch recovery; the cell
/// fields are evaluated through their trigonometric interpolants. Boundary
/// layer terms are optional nodal fields on the same mesh.
#[allow(clippy::too_many_arguments)]
pub fn multiscale_reconstruct(
    u0: &[f64],
    mesh: &Mesh,
    ncomp: usize,
    chi: &[MatrixField; 2],
    gamma2: Option<&[[MatrixField; 2]; 2]>,
    theta_bl: Option<&[f64]>,
    theta2_bl: Option<&[f64]>,
    eps: f64,
    order: usize,
) -> Result<Vec<f64>> {
    let nn = mesh.nodes.len();
    if u0.len() != nn * ncomp {
        return Err(Error::DimensionMismatch {
            message: format!(
                "reconstruction: field has {} entries, mesh wants {}",
                u0.len(),
                nn * ncomp
            ),
        });
    }
    if order == 0 || eps == 0.0 {
        return Ok(u0.to_vec());
    }
    if order >= 2 && gamma2.is_none() {
        return Err(Error::MissingCorrector {
            which: "second corrector Gamma".into(),
            order,
        });
    }
    let interp = |field: &MatrixField| {
        (0..ncomp * ncomp)
            .map(|k| field.comp(k / ncomp, k % ncomp).trig_interp())
            .collect::<Vec<_>>()
    };
    let chi_i = [interp(&chi[0]), interp(&chi[1])];
    let grad = recover_gradient(u0, mesh, ncomp);
    let hess = if order >= 2 {
        recover_gradient(&grad, mesh, 2 * ncomp)
    } else {
        Vec::new()
    };
    let mut out = u0.to_vec();
    for v in 0..nn {
        let x = mesh.nodes[v];
        let y = [x[0] / eps, x[1] / eps];
        for i in 0..ncomp {
            let mut acc = 0.0;
            for alpha in 0..2 {
                for c in 0..ncomp {
                    acc += eps
                        * chi_i[alpha][i * ncomp + c].eval(y)
                        * grad[v * 2 * ncomp + c * 2 + alpha];
                }
            }
            if let Some(th) = theta_bl {
                acc += eps * th[v * ncomp + i];
            }
            if order >= 2 {
                let g2 = gamma2.unwrap();
                for alpha in 0..2 {
                    for beta in 0..2 {
                        for c in 0..ncomp {
                            // d_b (d_a u0_c), recovered from the recovered gradient.
                            let h = hess[v * 4 * ncomp + (c * 2 + alpha) * 2 + beta];
                            acc += eps
                                * eps
                                * g2[alpha][beta].comp(i, c).trig_interp().eval(y)
                                * h;
                        }
                    }
                }
                if let Some(th2) = theta2_bl {
                    acc += eps * eps * th2[v * ncomp + i];
                }
            }
            out[v * ncomp + i] += acc;
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Corrector error study (matched discrete reference)
// ---------------------------------------------------------------------------

/// Convergence orders of the corrector approximation on the unit square, for
/// a scalar tensor whose discrete homogenized matrix is diagonal.
#[derive(Debug, Clone)]
pub struct CorrectorStudy {
    /// `|u^eps - u0|_{L2}`, claimed order 1 (generic polygonal claim 1/2).
    pub u0_l2: ConvergenceReport,
    /// `|u^eps - u0 - eps chi d u0 - eps theta|_{H1}`, claimed order 1.
    pub reconstruction_h1: ConvergenceReport,
    /// Same difference in `L2`, claimed order 3/2 (observed 2 on the square).
    pub reconstruction_l2: ConvergenceReport,
}

fn unit_square() -> PolygonDomain {
    build_polygon(&[[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
        .expect("unit square is a valid polygon")
}

/// Run the corrector error study at `eps = 1/m` for each `m` in `m_list`,
/// with `mesh_ratio` fine-mesh nodes per period (so the fine mesh has
/// `n = mesh_ratio * m` pitches and resolves the cell lattice exactly).
///
/// The reference pair is matched: the cell problem is solved on the same
/// `mesh_ratio`-per-period lattice with the same quadrature, the load is
/// `f = lambda0_d sin(pi x) sin(pi y)` with `lambda0_d = pi^2 (d1 + d2)` built
/// from the *discrete* homogenized matrix `diag(d1, d2)`, so that
/// `u0 = sin(pi x) sin(pi y)` solves the discrete homogenized problem exactly
/// and the measured errors isolate the corrector terms.
pub fn corrector_error_study(
    tensor: &PeriodicTensor,
    m_list: &[usize],
    mesh_ratio: usize,
    solve: SolveOptions,
) -> Result<CorrectorStudy> {
    if tensor.ncomp() != 1 {
        return Err(Error::DimensionMismatch {
            message: "corrector error study supports scalar tensors only".into(),
        });
    }
    let subdiv = 2;
    let r = mesh_ratio;
    let cell = solve_cell_fem(tensor, r, subdiv, solve)?;
    let a0 = cell.a0.as_2x2();
    if a0[0][1].abs() + a0[1][0].abs() > 1e-8 * (a0[0][0] + a0[1][1]) {
        return Err(Error::DimensionMismatch {
            message: format!(
                "corrector error study requires a diagonal homogenized matrix, got offdiag {:.3e}",
                a0[0][1].abs().max(a0[1][0].abs())
            ),
        });
    }
    let (d1, d2) = (a0[0][0], a0[1][1]);
    let lam0 = PI * PI * (d1 + d2);
    let u0 = |x: [f64; 2]| (PI * x[0]).sin() * (PI * x[1]).sin();
    let du0 = |x: [f64; 2]| [PI * (PI * x[0]).cos() * (PI * x[1]).sin(), PI * (PI * x[0]).sin() * (PI * x[1]).cos()];
    // Hessian rows d_a grad u0.
    let d2u0 = |x: [f64; 2]| {
        let (sx, cx) = (PI * x[0]).sin_cos();
        let (sy, cy) = (PI * x[1]).sin_cos();
        let p2 = PI * PI;
        [[-p2 * sx * sy, p2 * cx * cy], [p2 * cx * cy, -p2 * sx * sy]]
    };

    let domain = unit_square();
    let mut rows_u0 = Vec::new();
    let mut rows_h1 = Vec::new();
    let mut rows_l2 = Vec::new();
    for &m in m_list {
        let eps = 1.0 / m as f64;
        let n = r * m;
        let mesh = triangulate(&domain, 1.0 / n as f64, DEFAULT_NODE_BUDGET)?;
        let sys = assemble(&mesh, &Coefficient::Oscillating { tensor, eps }, subdiv, None);
        let load = |x: [f64; 2], _c: usize| lam0 * u0(x);
        let u_eps = sys.solve_dirichlet(&Load::Fn(&load), &BoundaryData::Zero, solve)?;

        // Discrete corrector transplanted to the fine lattice: fine node
        // (i, j) sees cell node (i mod r, j mod r).
        let node_index = |x: [f64; 2]| -> usize {
            let i = (x[0] * n as f64).round() as usize;
            let j = (x[1] * n as f64).round() as usize;
            (j % r) * (r + 1) + (i % r)
        };
        let nn = mesh.nodes.len();
        let mut chif = [vec![0.0; nn], vec![0.0; nn]];
        for v in 0..nn {
            let c = node_index(mesh.nodes[v]);
            chif[0][v] = cell.chi[0][0][c];
            chif[1][v] = cell.chi[1][0][c];
        }

        // Boundary layer: same oscillating operator, data -chi^a(x/eps) d_a u0.
        let g = |x: [f64; 2], _c: usize| -> f64 {
            let d = du0(x);
            let c = node_index(x);
            -(cell.chi[0][0][c] * d[0] + cell.chi[1][0][c] * d[1])
        };
        let theta = sys.solve_dirichlet(&Load::Zero, &BoundaryData::Fn(&g), solve)?;

        // w = u^eps - eps theta; compare against u0 + eps chi d u0.
        let w: Vec<f64> = u_eps.iter().zip(&theta).map(|(a, b)| a - eps * b).collect();

        let per_element = |t: usize| -> ([f64; 2], [[f64; 2]; 2]) {
            let (grads, _) = mesh.p1_gradients(t);
            let mut gw = [0.0; 2];
            let mut gchi = [[0.0; 2]; 2];
            for v in 0..3 {
                let node = mesh.triangles[t][v];
                for d in 0..2 {
                    gw[d] += w[node] * grads[v][d];
                    gchi[0][d] += chif[0][node] * grads[v][d];
                    gchi[1][d] += chif[1][node] * grads[v][d];
                }
            }
            (gw, gchi)
        };
        let mut cache: (usize, ([f64; 2], [[f64; 2]; 2])) =
            (usize::MAX, ([0.0; 2], [[0.0; 2]; 2]));

        let e_u0_sq = integrate(&mesh, subdiv, &mut |x, t, bary| {
            let diff = p1_value(&u_eps, &mesh, 1, t, bary, 0) - u0(x);
            diff * diff
        });
        let e_h1_sq = integrate(&mesh, subdiv, &mut |x, t, bary| {
            if t != cache.0 {
                cache = (t, per_element(t));
            }
            let (gw, gchi) = cache.1;
            let d = du0(x);
            let h = d2u0(x);
            let chi_q = [
                p1_value(&chif[0], &mesh, 1, t, bary, 0),
                p1_value(&chif[1], &mesh, 1, t, bary, 0),
            ];
            let mut acc = 0.0;
            for dim in 0..2 {
                let mut corr = 0.0;
                for alpha in 0..2 {
                    corr += gchi[alpha][dim] * d[alpha] + chi_q[alpha] * h[alpha][dim];
                }
                let e = gw[dim] - d[dim] - eps * corr;
                acc += e * e;
            }
            acc
        });
        let e_l2_sq = integrate(&mesh, subdiv, &mut |x, t, bary| {
            let d = du0(x);
            let chi_q = [
                p1_value(&chif[0], &mesh, 1, t, bary, 0),
                p1_value(&chif[1], &mesh, 1, t, bary, 0),
            ];
            let diff = p1_value(&w, &mesh, 1, t, bary, 0)
                - u0(x)
                - eps * (chi_q[0] * d[0] + chi_q[1] * d[1]);
            diff * diff
        });
        rows_u0.push(ConvergenceRow { eps, value: e_u0_sq.sqrt() });
        rows_h1.push(ConvergenceRow { eps, value: e_h1_sq.sqrt() });
        rows_l2.push(ConvergenceRow { eps, value: e_l2_sq.sqrt() });
    }
    Ok(CorrectorStudy {
        u0_l2: fit_report("u_eps_minus_u0_l2", &rows_u0, 0.5, 0.4)?,
        reconstruction_h1: fit_report("reconstruction_h1", &rows_h1, 1.0, 0.85)?,
        reconstruction_l2: fit_report("reconstruction_l2", &rows_l2, 1.5, 1.4)?,
    })
}

// ---------------------------------------------------------------------------
// Chi-term decay
// ---------------------------------------------------------------------------

/// Gauss-Legendre nodes and weights of the 4-point rule on `[0, 1]`.
const GL4: [(f64, f64); 4] = [
    (0.5 - 0.5 * 0.8611363115940526, 0.5 * 0.3478548451374538),
    (0.5 - 0.5 * 0.3399810435848563, 0.5 * 0.6521451548625461),
    (0.5 + 0.5 * 0.3399810435848563, 0.5 * 0.6521451548625461),
    (0.5 + 0.5 * 0.8611363115940526, 0.5 * 0.3478548451374538),
];

/// Measure the decay of `I(eps) = |int chi^a(x/eps) d_a v0(x) v0(x) dx|` over
/// the unit square (the weak-convergence term of the first-order expansion).
/// Scalar correctors only; claimed order 1.
pub fn chi_term_decay(
    chi: &[MatrixField; 2],
    v0: &dyn Fn([f64; 2]) -> f64,
    grad_v0: &dyn Fn([f64; 2]) -> [f64; 2],
    eps_list: &[f64],
) -> Result<ConvergenceReport> {
    let interp = [chi[0].comp(0, 0).trig_interp(), chi[1].comp(0, 0).trig_interp()];
    let mut rows = Vec::with_capacity(eps_list.len());
    for &eps in eps_list {
        // Composite 4-point tensor Gauss rule on an (8m)^2 grid of cells, so
        // the quadrature resolves the oscillation well below the O(eps) signal.
        let p = 8 * (1.0 / eps).ceil() as usize;
        let hc = 1.0 / p as f64;
        let mut acc = 0.0;
        for cx in 0..p {
            for cy in 0..p {
                for &(qx, wx) in &GL4 {
                    for &(qy, wy) in &GL4 {
                        let x = [(cx as f64 + qx) * hc, (cy as f64 + qy) * hc];
                        let y = [x[0] / eps, x[1] / eps];
                        let d = grad_v0(x);
                        let val =
                            (interp[0].eval(y) * d[0] + interp[1].eval(y) * d[1]) * v0(x);
                        acc += wx * wy * hc * hc * val;
                    }
                }
            }
        }
        rows.push(ConvergenceRow { eps, value: acc.abs() });
    }
    fit_report("chi_term_weak_decay", &rows, 1.0, 0.9)
}

// ---------------------------------------------------------------------------
// First-order eigenvalue correction
// ---------------------------------------------------------------------------

/// How to obtain the boundary gradient trace of a cluster vector.
pub enum GradientTrace<'a> {
    /// Patch-recover the gradient from the nodal field (O(h) at the boundary).
    Recovered,
    /// Exact trace `g(x, comp, alpha) = d_alpha v_comp(x)`.
    Analytic(&'a dyn Fn([f64; 2], usize, usize) -> f64),
}

/// A cluster eigenvector with its gradient trace.
pub struct ClusterVector<'a> {
    /// Nodal field on the study mesh (component-major per node).
    pub field: &'a [f64],
    pub gradient: GradientTrace<'a>,
}

/// First-order correction data of an eigenvalue cluster.
#[derive(Debug, Clone)]
pub struct EigenExpansionResult {
    pub multiplicity: usize,
    pub lambda0: f64,
    /// Per-vector corrections `c_j = <theta_j, v_j> / <v_j, v_j>`.
    pub corrections: Vec<f64>,
    /// `sum_j c_j`, invariant under orthogonal changes of the cluster basis.
    pub sum: f64,
}

impl EigenExpansionResult {
    /// First-order prediction `lambda0 - eps * (lambda0 / m) * sum_j c_j`.
    pub fn predict(&self, eps: f64) -> f64 {
        self.lambda0 - eps * self.lambda0 / self.multiplicity as f64 * self.sum
    }
}

/// `int a b` over the mesh for P1 nodal fields (componentwise dot).
fn l2_pairing(a: &[f64], b: &[f64], mesh: &Mesh, ncomp: usize) -> f64 {
    integrate(mesh, 2, &mut |_x, t, bary| {
        (0..ncomp)
            .map(|c| p1_value(a, mesh, ncomp, t, bary, c) * p1_value(b, mesh, ncomp, t, bary, c))
            .sum()
    })
}

/// Compute the first-order boundary-layer corrections `c_j` of a cluster:
/// for each cluster vector, solve the homogenized boundary-layer problem with
/// data built from the tails, and project back onto the vector.
pub fn first_order_eigen_correction(
    a0: &BlockMatrix,
    domain: &PolygonDomain,
    mesh: &Mesh,
    tails: &BoundaryLayerTailSet,
    lambda0: f64,
    basis: &[ClusterVector],
    opts: SolveOptions,
) -> Result<EigenExpansionResult> {
    if basis.is_empty() {
        return Err(Error::ClusterMismatch {
            message: "first-order correction of an empty cluster".into(),
        });
    }
    let ncomp = a0.ncomp();
    let mut corrections = Vec::with_capacity(basis.len());
    for v in basis {
        let theta = match &v.gradient {
            GradientTrace::Recovered => {
                solve_homogenized_bl(a0, domain, mesh, tails, v.field, opts)?
            }
            GradientTrace::Analytic(g) => {
                solve_homogenized_bl_with(a0, domain, mesh, tails, *g, opts)?
            }
        };
        let num = l2_pairing(&theta, v.field, mesh, ncomp);
        let den = l2_pairing(v.field, v.field, mesh, ncomp);
        corrections.push(num / den);
    }
    let sum = corrections.iter().sum();
    Ok(EigenExpansionResult {
        multiplicity: basis.len(),
        lambda0,
        corrections,
        sum,
    })
}

// ---------------------------------------------------------------------------
// Inverse cluster-mean consistency check
// ---------------------------------------------------------------------------

/// Discrepancy record of the inverse cluster-mean identity at one `eps`.
#[derive(Debug, Clone, Copy)]
pub struct OsbornRecord {
    pub eps: f64,
    /// `|mean_j (1/lambda0_j - 1/lambda_eps_j - <(T0 - Teps) v_j, v_j>)|`.
    pub lhs: f64,
    /// `max_j |(T0 - Teps) v_j|_M^2`.
    pub rhs_norm_sq: f64,
    /// `lhs / rhs_norm_sq`; bounded uniformly in `eps` when the inverse
    /// cluster means match to second order.
    pub ratio: f64,
}

/// Check the inverse cluster-mean identity on a shared mesh: assemble the
/// oscillating and homogenized stiffness with identical quadrature, take the
/// homogenized cluster vectors `v_j` (indices `cluster`), and compare the
/// defect of the inverse means against the squared solution-operator
/// difference on the cluster.
pub fn osborn_check(
    tensor: &PeriodicTensor,
    a0: &BlockMatrix,
    mesh: &Mesh,
    eps: f64,
    cluster: std::ops::Range<usize>,
    eigen: EigenOptions,
    solve: SolveOptions,
) -> Result<OsbornRecord> {
    if cluster.is_empty() {
        return Err(Error::ClusterMismatch {
            message: "empty cluster range".into(),
        });
    }
    if mesh.h > eps {
        return Err(Error::UnresolvedOscillation { h: mesh.h, eps });
    }
    let subdiv = 2;
    let sys_eps = assemble(mesh, &Coefficient::Oscillating { tensor, eps }, subdiv, None);
    let sys0 = assemble(mesh, &Coefficient::Constant(a0), subdiv, None);
    let count = cluster.end;
    let sol0 = solve_eigenpairs(&sys0.kff, &sys0.mff, count, eigen)?;
    let sol_eps = solve_eigenpairs(&sys_eps.kff, &sys_eps.mff, count, eigen)?;

    // Apply T = K^{-1} M on free vectors.
    let apply_t = |sys: &crate::fem::DiscreteSystem, v: &[f64]| -> Result<Vec<f64>> {
        let rhs = sys0.mff.matvec_alloc(v);
        let (x, out) = crate::fem::sparse::pcg(&sys.kff, &rhs, None, solve.rtol, solve.max_iterations);
        if out.converged {
            Ok(x)
        } else {
            Err(Error::SolverFailure {
                context: "osborn T apply".into(),
                residual: out.residual,
                iterations: out.iterations,
            })
        }
    };

    let m = cluster.len() as f64;
    let mut lhs = 0.0;
    let mut rhs_norm_sq: f64 = 0.0;
    for j in cluster.clone() {
        let v = &sol0.vectors[j];
        let t0v = apply_t(&sys0, v)?;
        let tev = apply_t(&sys_eps, v)?;
        let d: Vec<f64> = t0v.iter().zip(&tev).map(|(a, b)| a - b).collect();
        let md = sys0.mff.matvec_alloc(&d);
        let pairing = crate::fem::sparse::dot(&md, v);
        let dd = crate::fem::sparse::dot(&md, &d);
        lhs += 1.0 / sol0.values[j] - 1.0 / sol_eps.values[j] - pairing;
        rhs_norm_sq = rhs_norm_sq.max(dd);
    }
    let lhs = (lhs / m).abs();
    Ok(OsbornRecord {
        eps,
        lhs,
        rhs_norm_sq,
        ratio: lhs / rhs_norm_sq.max(1e-300),
    })
}

// ---------------------------------------------------------------------------
// Eigenvalue expansion study
// ---------------------------------------------------------------------------

/// Options of [`eigen_expansion_study`].
#[derive(Clone)]
pub struct EigenStudyOptions {
    /// `eps = 1/(m + 1/4)` for each `m`, so the unit-square edge phases are
    /// locked across the sweep (0 on the axes through the origin, 3/4 on the
    /// far edges).
    pub m_list: Vec<usize>,
    /// Fine-mesh pitches per period for the Richardson pair; each must be a
    /// multiple of 4 so that `n = r m + r/4` is an integer.
    pub mesh_ratios: (usize, usize),
    /// Spectral resolution of the cell corrector solve.
    pub cell_resolution: usize,
    /// Strip parameters of the boundary-layer tails (phase is set per edge).
    pub strip: StripOptions,
    /// Homogenized modes `(p, q)` of the unit square: `v0 = sin(p pi x) sin(q pi y)`.
    pub modes: Vec<(usize, usize)>,
    pub eigen: EigenOptions,
    pub solve: SolveOptions,
}

impl Default for EigenStudyOptions {
    fn default() -> Self {
        Self {
            m_list: vec![8, 16, 32],
            mesh_ratios: (8, 16),
            cell_resolution: 256,
            strip: StripOptions::default(),
            modes: vec![(1, 1)],
            eigen: EigenOptions::default(),
            solve: SolveOptions::default(),
        }
    }
}

/// One row of the eigenvalue expansion study.
#[derive(Debug, Clone, Copy)]
pub struct EigenStudyRow {
    pub eps: f64,
    /// Richardson-extrapolated oscillating cluster mean.
    pub lambda_eps: f64,
    /// Richardson-extrapolated homogenized (discrete) cluster mean.
    pub lambda0: f64,
    /// Zeroth-order gap `|lambda_eps - lambda0|`.
    pub gap: f64,
    /// Sum of the first-order corrections at this `eps`.
    pub correction_sum: f64,
    /// First-order prediction `lambda0 (1 - eps * sum / mult)`.
    pub prediction: f64,
    /// First-order residual `|lambda_eps - prediction|`.
    pub residual: f64,
}

/// Per-mode result of the eigenvalue expansion study.
#[derive(Debug, Clone)]
pub struct ModeStudy {
    pub mode: (usize, usize),
    pub multiplicity: usize,
    pub rows: Vec<EigenStudyRow>,
    /// Decay of the zeroth-order gap (claimed order 1).
    pub zeroth: ConvergenceReport,
    /// Decay of the first-order residual (claimed order 3/2).
    pub first: ConvergenceReport,
}

/// Full first-order eigenvalue expansion study on the unit square for a
/// scalar tensor with diagonal homogenized matrix.
///
/// For each `m` the oscillating and homogenized eigenproblems are solved at
/// the two mesh ratios and Richardson-extrapolated in the mesh pitch (both
/// families share the finite-element pollution, which would otherwise mask
/// the `O(eps^{3/2})` residual). Cluster means are harmonic. The correction
/// `c_j` uses the analytic eigenfunctions of the diagonal homogenized
/// operator, whose gradient traces are exact.
pub fn eigen_expansion_study(
    tensor: &PeriodicTensor,
    opts: &EigenStudyOptions,
) -> Result<Vec<ModeStudy>> {
    if tensor.ncomp() != 1 {
        return Err(Error::DimensionMismatch {
            message: "eigen expansion study supports scalar tensors only".into(),
        });
    }
    let (r1, r2) = opts.mesh_ratios;
    if r1 % 4 != 0 || r2 % 4 != 0 || r2 <= r1 {
        return Err(Error::DimensionMismatch {
            message: format!("mesh ratios must be increasing multiples of 4, got ({r1}, {r2})"),
        });
    }
    let correctors = CellCorrectors::compute(tensor, opts.cell_resolution, CellSolveOptions::default())?;
    let a0 = correctors.homogenized.as_2x2();
    if a0[0][1].abs() + a0[1][0].abs() > 1e-8 * (a0[0][0] + a0[1][1]) {
        return Err(Error::DimensionMismatch {
            message: "eigen expansion study requires a diagonal homogenized matrix".into(),
        });
    }
    let (d1, d2) = (a0[0][0], a0[1][1]);
    let domain = unit_square();

    // Rank of each requested mode in the homogenized spectrum
    // lambda(p, q) = pi^2 (p^2 d1 + q^2 d2).
    let lam_exact = |p: usize, q: usize| PI * PI * ((p * p) as f64 * d1 + (q * q) as f64 * d2);
    let mut all: Vec<((usize, usize), f64)> = Vec::new();
    for i in 1..=8usize {
        for j in 1..=8usize {
            all.push(((i, j), lam_exact(i, j)));
        }
    }
    all.sort_by(|a, b| a.1.total_cmp(&b.1));
    let rank_of = |mode: (usize, usize)| -> Result<usize> {
        all.iter()
            .position(|(m, _)| *m == mode)
            .ok_or_else(|| Error::ClusterMismatch {
                message: format!("mode {mode:?} outside the enumerated spectrum"),
            })
    };
    let mut count = 0;
    for &mode in &opts.modes {
        count = count.max(rank_of(mode)? + 1);
    }

    // Boundary-layer tails, cached by (edge, alpha, quantized phase): with
    // phase-locked eps the whole sweep shares one tail set.
    let mut tail_cache: BTreeMap<(usize, usize, i64), TailEntry> = BTreeMap::new();
    let mut tails_for = |eps: f64| -> Result<BoundaryLayerTailSet> {
        let mut set = BoundaryLayerTailSet::default();
        for (k, edge) in domain.edges.iter().enumerate() {
            let phase = (edge.offset / eps).rem_euclid(1.0);
            let key_phase = (phase * 1e9).round() as i64;
            for alpha in 0..2 {
                let key = (k, alpha, key_phase);
                if !tail_cache.contains_key(&key) {
                    let strip = StripOptions {
                        phase,
                        ..opts.strip
                    };
                    let sol = solve_strip(tensor, &correctors.chi[alpha], edge, strip)?;
                    let entry = crate::boundary_layer::extract_tail(&sol, (0.6, 0.9))?;
                    tail_cache.insert(key, entry);
                }
                set.entries.insert((k, alpha), tail_cache[&key].clone());
            }
        }
        Ok(set)
    };

    // Homogenized eigensolutions depend only on the mesh size; cache by n.
    let mut lam0_cache: BTreeMap<usize, Vec<f64>> = BTreeMap::new();

    struct Sweep {
        eps: f64,
        // Cluster means per mode, per ratio: [r1, r2].
        lam_eps: Vec<[f64; 2]>,
        lam0: Vec<[f64; 2]>,
        csum: Vec<f64>,
        mult: Vec<usize>,
    }
    let mut sweeps: Vec<Sweep> = Vec::new();

    for &m in &opts.m_list {
        let eps = 1.0 / (m as f64 + 0.25);
        let tails = tails_for(eps)?;
        let nmodes = opts.modes.len();
        let mut sweep = Sweep {
            eps,
            lam_eps: vec![[0.0; 2]; nmodes],
            lam0: vec![[0.0; 2]; nmodes],
            csum: vec![0.0; nmodes],
            mult: vec![1; nmodes],
        };
        for (ri, &r) in [r1, r2].iter().enumerate() {
            let n = r * m + r / 4;
            let mesh = triangulate(&domain, 1.0 / n as f64, DEFAULT_NODE_BUDGET)?;
            let sys_eps = assemble(&mesh, &Coefficient::Oscillating { tensor, eps }, 2, None);
            let vals_eps = solve_eigenpairs(&sys_eps.kff, &sys_eps.mff, count, opts.eigen)?.values;
            if !lam0_cache.contains_key(&n) {
                let sys0 = assemble(&mesh, &Coefficient::Constant(&correctors.homogenized), 2, None);
                let vals0 = solve_eigenpairs(&sys0.kff, &sys0.mff, count, opts.eigen)?.values;
                lam0_cache.insert(n, vals0);
            }
            let vals0 = &lam0_cache[&n];
            for (mi, &mode) in opts.modes.iter().enumerate() {
                let rank = rank_of(mode)?;
                let clusters = cluster_eigenvalues(vals0, 1e-6);
                let cl = clusters
                    .into_iter()
                    .find(|c| c.contains(&rank))
                    .ok_or_else(|| Error::ClusterMismatch {
                        message: format!("no homogenized cluster contains rank {rank}"),
                    })?;
                sweep.mult[mi] = cl.len();
                sweep.lam0[mi][ri] = harmonic_mean_cluster(&vals0[cl.clone()])?;
                sweep.lam_eps[mi][ri] = harmonic_mean_cluster(&vals_eps[cl.clone()])?;
                if ri == 1 {
                    // First-order correction from the analytic eigenfunctions
                    // on the finer mesh (the cluster is simple for the modes
                    // this study targets; a degenerate cluster would need its
                    // discrete basis instead).
                    if cl.len() != 1 {
                        return Err(Error::ClusterMismatch {
                            message: format!(
                                "mode {mode:?} sits in a degenerate cluster of size {}",
                                cl.len()
                            ),
                        });
                    }
                    let (p, q) = mode;
                    let (pf, qf) = (p as f64 * PI, q as f64 * PI);
                    let vfield: Vec<f64> = mesh
                        .nodes
                        .iter()
                        .map(|x| (pf * x[0]).sin() * (qf * x[1]).sin())
                        .collect();
                    let grad = move |x: [f64; 2], _c: usize, alpha: usize| -> f64 {
                        if alpha == 0 {
                            pf * (pf * x[0]).cos() * (qf * x[1]).sin()
                        } else {
                            qf * (pf * x[0]).sin() * (qf * x[1]).cos()
                        }
                    };
                    let basis = [ClusterVector {
                        field: &vfield,
                        gradient: GradientTrace::Analytic(&grad),
                    }];
                    let corr = first_order_eigen_correction(
                        &correctors.homogenized,
                        &domain,
                        &mesh,
                        &tails,
                        lam_exact(p, q),
                        &basis,
                        opts.solve,
                    )?;
                    sweep.csum[mi] = corr.sum;
                }
            }
        }
        sweeps.push(sweep);
    }

    let factor = (r2 as f64 / r1 as f64).powi(2) - 1.0;
    let mut out = Vec::with_capacity(opts.modes.len());
    for (mi, &mode) in opts.modes.iter().enumerate() {
        let mut rows = Vec::new();
        for sw in &sweeps {
            let ex = |pair: [f64; 2]| pair[1] + (pair[1] - pair[0]) / factor;
            let le = ex(sw.lam_eps[mi]);
            let l0 = ex(sw.lam0[mi]);
            let mult = sw.mult[mi] as f64;
            let prediction = l0 - sw.eps * l0 / mult * sw.csum[mi];
            rows.push(EigenStudyRow {
                eps: sw.eps,
                lambda_eps: le,
                lambda0: l0,
                gap: (le - l0).abs(),
                correction_sum: sw.csum[mi],
                prediction,
                residual: (le - prediction).abs(),
            });
        }
        let conv_rows = |f: &dyn Fn(&EigenStudyRow) -> f64| -> Vec<ConvergenceRow> {
            rows.iter().map(|r| ConvergenceRow { eps: r.eps, value: f(r) }).collect()
        };
        let zeroth = fit_report(
            &format!("eigen_gap_mode_{}_{}", mode.0, mode.1),
            &conv_rows(&|r| r.gap),
            1.0,
            0.9,
        )?;
        let first = fit_report(
            &format!("eigen_residual_mode_{}_{}", mode.0, mode.1),
            &conv_rows(&|r| r.residual),
            1.5,
            1.0,
        )?;
        out.push(ModeStudy {
            mode,
            multiplicity: sweeps.last().map(|s| s.mult[mi]).unwrap_or(1),
            rows,
            zeroth,
            first,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::assemble_constant;
    use crate::microstructure::Preset;
    use approx::assert_abs_diff_eq;

    fn laminate() -> PeriodicTensor {
        PeriodicTensor::preset(Preset::Laminate)
    }

    #[test]
    fn fit_recovers_exact_power_law() {
        let rows: Vec<ConvergenceRow> = [8.0, 16.0, 32.0, 64.0]
            .iter()
            .map(|m| ConvergenceRow {
                eps: 1.0 / *m,
                value: 3.0 * (1.0 / *m as f64).powf(1.5),
            })
            .collect();
        let rep = fit_report("probe", &rows, 1.5, 1.3).unwrap();
        assert_abs_diff_eq!(rep.slope, 1.5, epsilon = 1e-12);
        assert!(rep.pass);
        assert!(rep.interval.0 <= 1.5 && 1.5 <= rep.interval.1);
        assert!(rep.goodness > 1.0 - 1e-12);
    }

    #[test]
    fn fit_rejects_short_tables() {
        let rows = vec![
            ConvergenceRow { eps: 0.5, value: 1.0 },
            ConvergenceRow { eps: 0.25, value: 0.5 },
        ];
        match fit_report("probe", &rows, 1.0, 0.9) {
            Err(Error::TooFewRows { found: 2 }) => {}
            other => panic!("expected TooFewRows, got {other:?}"),
        }
    }

    #[test]
    fn reconstruction_at_eps_zero_is_identity() {
        let domain = unit_square();
        let mesh = triangulate(&domain, 1.0 / 8.0, DEFAULT_NODE_BUDGET).unwrap();
        let u0: Vec<f64> = mesh.nodes.iter().map(|x| x[0] + 2.0 * x[1]).collect();
        let chi = [MatrixField::zeros(1, 8), MatrixField::zeros(1, 8)];
        let rec =
            multiscale_reconstruct(&u0, &mesh, 1, &chi, None, None, None, 0.0, 1).unwrap();
        assert_eq!(rec, u0);
    }

    #[test]
    fn reconstruction_order_two_needs_gamma() {
        let domain = unit_square();
        let mesh = triangulate(&domain, 1.0 / 8.0, DEFAULT_NODE_BUDGET).unwrap();
        let u0 = vec![0.0; mesh.nodes.len()];
        let chi = [MatrixField::zeros(1, 8), MatrixField::zeros(1, 8)];
        match multiscale_reconstruct(&u0, &mesh, 1, &chi, None, None, None, 0.125, 2) {
            Err(Error::MissingCorrector { order: 2, .. }) => {}
            other => panic!("expected MissingCorrector, got {other:?}"),
        }
    }

    #[test]
    fn reconstruction_adds_corrector_term() {
        // chi identically 1 and linear u0: the first-order term is exactly
        // eps * d_a u0 summed over a.
        let domain = unit_square();
        let mesh = triangulate(&domain, 1.0 / 8.0, DEFAULT_NODE_BUDGET).unwrap();
        let u0: Vec<f64> = mesh.nodes.iter().map(|x| 3.0 * x[0] - x[1]).collect();
        let mut chi0 = MatrixField::zeros(1, 8);
        for v in chi0.comp_mut(0, 0).data_mut().iter_mut() {
            *v = 1.0;
        }
        let chi = [chi0, MatrixField::zeros(1, 8)];
        let eps = 0.125;
        let rec =
            multiscale_reconstruct(&u0, &mesh, 1, &chi, None, None, None, eps, 1).unwrap();
        // Interior nodes see the recovered gradient (exact for affine data).
        for (v, x) in mesh.nodes.iter().enumerate() {
            if !mesh.is_boundary(v) {
                assert_abs_diff_eq!(rec[v] - u0[v], eps * 3.0, epsilon = 1e-12);
                let _ = x;
            }
        }
    }

    #[test]
    fn chi_decay_of_constant_chi_is_superlinear_zero() {
        // chi constant: int chi d_a v0 v0 = chi/2 int d_a (v0^2) = 0 for v0
        // vanishing on the boundary, at every eps.
        let mut c0 = MatrixField::zeros(1, 16);
        for v in c0.comp_mut(0, 0).data_mut().iter_mut() {
            *v = 0.7;
        }
        let chi = [c0, MatrixField::zeros(1, 16)];
        let v0 = |x: [f64; 2]| (PI * x[0]).sin() * (PI * x[1]).sin();
        let dv0 = |x: [f64; 2]| {
            [
                PI * (PI * x[0]).cos() * (PI * x[1]).sin(),
                PI * (PI * x[0]).sin() * (PI * x[1]).cos(),
            ]
        };
        let rep = chi_term_decay(&chi, &v0, &dv0, &[1.0 / 4.0, 1.0 / 8.0, 1.0 / 16.0]).unwrap();
        for row in &rep.rows {
            assert!(row.value < 1e-10, "constant chi must integrate to zero");
        }
    }

    #[test]
    fn corrector_study_is_exact_for_identity() {
        // Identity coefficient: chi = 0, u^eps = u0 up to FE error, so the
        // raw gap shrinks at the FE rate h^2 ~ eps^2, far above every floor.
        let tensor = PeriodicTensor::preset(Preset::Identity { ncomp: 1 });
        let study =
            corrector_error_study(&tensor, &[4, 8, 16], 4, SolveOptions::default()).unwrap();
        assert!(study.u0_l2.pass);
        assert!(study.reconstruction_h1.pass);
        assert!(study.reconstruction_l2.pass);
        assert!(study.u0_l2.slope > 1.8, "identity gap is pure FE error");
    }

    #[test]
    fn osborn_identity_coefficient_has_zero_defect() {
        // A = A0 = I: T0 = Teps exactly, so both sides vanish.
        let tensor = PeriodicTensor::preset(Preset::Identity { ncomp: 1 });
        let a0 = BlockMatrix::identity(1);
        let domain = unit_square();
        let mesh = triangulate(&domain, 1.0 / 16.0, DEFAULT_NODE_BUDGET).unwrap();
        let rec = osborn_check(
            &tensor,
            &a0,
            &mesh,
            0.25,
            0..1,
            EigenOptions::default(),
            SolveOptions::default(),
        )
        .unwrap();
        assert!(rec.lhs < 1e-10, "lhs = {:.3e}", rec.lhs);
        assert!(rec.rhs_norm_sq < 1e-18);
    }

    #[test]
    fn correction_of_zero_tails_is_zero() {
        let a0 = BlockMatrix::identity(1);
        let domain = unit_square();
        let mesh = triangulate(&domain, 1.0 / 12.0, DEFAULT_NODE_BUDGET).unwrap();
        let mut tails = BoundaryLayerTailSet::default();
        for k in 0..4 {
            for alpha in 0..2 {
                tails.entries.insert(
                    (k, alpha),
                    TailEntry {
                        tail: nalgebra::DMatrix::zeros(1, 1),
                        fit: crate::boundary_layer::DecayFit {
                            heights: vec![],
                            sup_deviation: vec![],
                            rate: 1.0,
                            goodness: 1.0,
                        },
                        method: crate::boundary_layer::TailMethod::StripRational,
                    },
                );
            }
        }
        let vfield: Vec<f64> = mesh
            .nodes
            .iter()
            .map(|x| (PI * x[0]).sin() * (PI * x[1]).sin())
            .collect();
        let basis = [ClusterVector {
            field: &vfield,
            gradient: GradientTrace::Recovered,
        }];
        let lam0 = 2.0 * PI * PI;
        let res = first_order_eigen_correction(
            &a0,
            &domain,
            &mesh,
            &tails,
            lam0,
            &basis,
            SolveOptions::default(),
        )
        .unwrap();
        assert_abs_diff_eq!(res.sum, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(res.predict(0.1), lam0, epsilon = 1e-10);
        // Empty cluster is rejected.
        assert!(matches!(
            first_order_eigen_correction(
                &a0,
                &domain,
                &mesh,
                &tails,
                lam0,
                &[],
                SolveOptions::default()
            ),
            Err(Error::ClusterMismatch { .. })
        ));
    }

    #[test]
    fn study_rejects_non_diagonal_requests() {
        let tensor = laminate();
        let bad = EigenStudyOptions {
            mesh_ratios: (6, 12),
            ..Default::default()
        };
        assert!(matches!(
            eigen_expansion_study(&tensor, &bad),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn l2_pairing_matches_closed_form() {
        let domain = unit_square();
        let mesh = triangulate(&domain, 1.0 / 32.0, DEFAULT_NODE_BUDGET).unwrap();
        let f: Vec<f64> = mesh.nodes.iter().map(|x| (PI * x[0]).sin() * (PI * x[1]).sin()).collect();
        let den = l2_pairing(&f, &f, &mesh, 1);
        assert_abs_diff_eq!(den, 0.25, epsilon = 2e-3);
        let sys = assemble_constant(&mesh, &BlockMatrix::identity(1));
        assert_abs_diff_eq!(den, sys.mass_inner(&f, &f), epsilon = 2e-4);
    }
}
