//! Boundary-layer systems on rotated half-spaces: per-edge strip solves with
//! lateral periodicity, extraction of the constant tails `V^{k,alpha,*}`,
//! convergent sweeps for irrational slopes, and the homogenized/oscillating
//! boundary-layer problems on the polygon.

use crate::error::{Error, Result};
use crate::fem::{
    assemble, assemble_constant, assemble_oscillating, norms, recover_gradient, BoundaryData,
    Coefficient, Load, Mesh, SolveOptions,
};
use crate::field::TrigInterp;
use crate::geometry::{mat_apply, rotation_to_halfspace, Edge, PolygonDomain, SlopeKind};
use crate::microstructure::{BlockMatrix, MatrixField, PeriodicTensor};
use nalgebra::DMatrix;
use std::collections::BTreeMap;

/// Options for a single strip solve.
#[derive(Debug, Clone, Copy)]
pub struct StripOptions {
    /// Grid points per unit length along the strip (>= 32).
    pub points_per_period: usize,
    /// Strip height as a multiple of the tangential period (>= 10).
    pub height_periods: f64,
    /// Lattice phase `c^k / eps` of the boundary line (only its fractional
    /// part matters).
    pub phase: f64,
    /// Translation of the strip origin along the tangential direction; the
    /// z1-averaged tail must be invariant under it.
    pub lateral_shift: f64,
    /// Quadrature subdivision level for the rotated coefficient.
    pub subdiv: usize,
    pub solve: SolveOptions,
}

impl Default for StripOptions {
    fn default() -> Self {
        Self {
            points_per_period: 32,
            height_periods: 10.0,
            phase: 0.0,
            lateral_shift: 0.0,
            subdiv: 1,
            solve: SolveOptions::default(),
        }
    }
}

/// Discrete boundary-layer field on the periodic strip `T_P x (0, L)`:
/// one nodal vector field per column of the matrix boundary data.
pub struct StripSolution {
    pub mesh: Mesh,
    pub ncomp: usize,
    /// `columns[c][node * ncomp + i]` is component `i` of the solution with
    /// boundary data column `c`.
    pub columns: Vec<Vec<f64>>,
    pub period: f64,
    pub height: f64,
    pub nx: usize,
    pub ny: usize,
}

/// Fitted decay of the strip field towards its tail.
#[derive(Debug, Clone)]
pub struct DecayFit {
    pub heights: Vec<f64>,
    pub sup_deviation: Vec<f64>,
    /// Exponential rate `r` in `sup_deviation ~ C exp(-r z2)` (rational
    /// case); 0 when the profile is flat at round-off level.
    pub rate: f64,
    /// R^2 of the log-linear fit.
    pub goodness: f64,
}

/// How a tail entry was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TailMethod {
    StripRational,
    ConvergentExtrapolated,
}

/// One `(edge, direction)` tail.
#[derive(Debug, Clone)]
pub struct TailEntry {
    /// Constant `N x N` matrix `V^{k,alpha,*}` (rows: components, columns:
    /// boundary-data columns).
    pub tail: DMatrix<f64>,
    pub fit: DecayFit,
    pub method: TailMethod,
}

/// Tails for every `(edge k, direction alpha)` of a polygon.
#[derive(Debug, Clone, Default)]
pub struct BoundaryLayerTailSet {
    pub entries: BTreeMap<(usize, usize), TailEntry>,
}

impl BoundaryLayerTailSet {
    pub fn get(&self, edge: usize, alpha: usize) -> Result<&TailEntry> {
        self.entries.get(&(edge, alpha)).ok_or(Error::MissingTail { edge, direction: alpha })
    }
}

/// Solve the boundary-layer system on the strip for a rational edge: rotated
/// coefficient `M^T A(M z + phase n) M`, lateral period `P = sqrt(p^2+q^2)`,
/// Dirichlet data `chi_alpha(M z + phase n)` at the bottom, zero Neumann at
/// the top.
pub fn solve_strip(
    tensor: &PeriodicTensor,
    chi_alpha: &MatrixField,
    edge: &Edge,
    opts: StripOptions,
) -> Result<StripSolution> {
    let (p, q) = match edge.classification.kind {
        SlopeKind::Rational { p, q } => (p, q),
        ref other => {
            return Err(Error::NotRational {
                found: format!("{other:?}"),
            })
        }
    };
    let period = ((p * p + q * q) as f64).sqrt();
    if opts.points_per_period < 32 {
        return Err(Error::UnresolvedCell {
            points_per_period: opts.points_per_period,
            required: 32,
        });
    }
    if opts.height_periods < 10.0 {
        return Err(Error::StripTooShort {
            l: opts.height_periods * period,
            p: period,
            factor: 10.0,
        });
    }
    let height = opts.height_periods * period;
    let rotation = rotation_to_halfspace(edge.normal);
    let phase = opts.phase.rem_euclid(1.0);
    // Offset combines the normal phase with a tangential origin shift
    // (tangent = image of e1 under the rotation).
    let tangent = mat_apply(&rotation, [1.0, 0.0]);
    let offset = [
        phase * edge.normal[0] + opts.lateral_shift * tangent[0],
        phase * edge.normal[1] + opts.lateral_shift * tangent[1],
    ];

    // Sampled check: rotated coefficient is exactly P-periodic in z1.
    {
        let ncomp = tensor.ncomp();
        let coef = Coefficient::Rotated {
            tensor,
            rotation,
            offset,
        };
        let mut a = BlockMatrix::zeros(ncomp);
        let mut b = BlockMatrix::zeros(ncomp);
        for s in 0..7 {
            let z = [0.31 + 0.13 * s as f64, 0.17 * s as f64];
            coef.eval(z, &mut a);
            coef.eval([z[0] + period, z[1]], &mut b);
            let d = a.max_abs_diff(&b);
            if d > 1e-10 {
                return Err(Error::NotRational {
                    found: format!("coefficient not P-periodic (defect {d:.3e})"),
                });
            }
        }
    }

    let nx = (opts.points_per_period as f64 * period).ceil() as usize;
    let pitch = period / nx as f64;
    let ny = (height / pitch).ceil() as usize;
    let mesh = Mesh::periodic_strip(period, height, nx, ny);
    let coef = Coefficient::Rotated {
        tensor,
        rotation,
        offset,
    };
    // Dirichlet only at the bottom (edge id 0); top edge id 1 is natural
    // (zero Neumann closure of the truncated half-space).
    let system = assemble(&mesh, &coef, opts.subdiv, Some(&[0]));

    let ncomp = tensor.ncomp();
    let interp: Vec<TrigInterp> = (0..ncomp * ncomp)
        .map(|k| chi_alpha.comp(k / ncomp, k % ncomp).trig_interp())
        .collect();
    let trace = |i: usize, c: usize, z: [f64; 2]| -> f64 {
        let mz = mat_apply(&rotation, z);
        interp[i * ncomp + c].eval([mz[0] + offset[0], mz[1] + offset[1]])
    };
    let mut columns = Vec::with_capacity(ncomp);
    for c in 0..ncomp {
        let g = move |_edge: usize, x: [f64; 2], comp: usize| trace(comp, c, x);
        let u = system.solve_dirichlet(&Load::Zero, &BoundaryData::PerEdge(&g), opts.solve)?;
        columns.push(u);
    }
    Ok(StripSolution {
        mesh,
        ncomp,
        columns,
        period,
        height,
        nx,
        ny,
    })
}

/// Row means and sup-deviation profile of a strip solution.
fn row_statistics(sol: &StripSolution) -> (Vec<DMatrix<f64>>, Vec<f64>) {
    let (nx, ny, nc) = (sol.nx, sol.ny, sol.ncomp);
    let mut means = Vec::with_capacity(ny + 1);
    for j in 0..=ny {
        let mut m = DMatrix::zeros(nc, nc);
        for c in 0..nc {
            for i in 0..nx {
                let node = j * (nx + 1) + i;
                for k in 0..nc {
                    m[(k, c)] += sol.columns[c][node * nc + k];
                }
            }
        }
        m /= nx as f64;
        means.push(m);
    }
    (means, Vec::new())
}

/// Extract the constant tail by averaging the `z1`-averaged rows over the
/// window `(lo, hi)` (fractions of the strip height), and fit the decay of
/// the sup deviation.
pub fn extract_tail(sol: &StripSolution, window: (f64, f64)) -> Result<TailEntry> {
    assert!(0.5 <= window.0 && window.0 < window.1 && window.1 <= 1.0, "window must sit in the upper half");
    let (row_means, _) = row_statistics(sol);
    let (nx, ny, nc) = (sol.nx, sol.ny, sol.ncomp);
    let j_lo = (window.0 * ny as f64).floor() as usize;
    let j_hi = (window.1 * ny as f64).ceil() as usize;
    let mut tail = DMatrix::zeros(nc, nc);
    for j in j_lo..=j_hi.min(ny) {
        tail += &row_means[j];
    }
    tail /= (j_hi.min(ny) - j_lo + 1) as f64;

    // sup_{z1} |V(z1, z2) - V*| per row.
    let mut heights = Vec::with_capacity(ny + 1);
    let mut sup = Vec::with_capacity(ny + 1);
    for j in 0..=ny {
        let z2 = sol.height * j as f64 / ny as f64;
        let mut s = 0.0f64;
        for c in 0..nc {
            for i in 0..nx {
                let node = j * (nx + 1) + i;
                for k in 0..nc {
                    s = s.max((sol.columns[c][node * nc + k] - tail[(k, c)]).abs());
                }
            }
        }
        heights.push(z2);
        sup.push(s);
    }

    // Smooth over one period's worth of rows, then check monotone decay up
    // to the averaging window (5% slack, round-off floored).
    let w = (sol.period / (sol.height / ny as f64)).round().max(1.0) as usize;
    let smooth: Vec<f64> = (0..sup.len())
        .map(|j| {
            let a = j.saturating_sub(w / 2);
            let b = (j + w / 2 + 1).min(sup.len());
            sup[a..b].iter().sum::<f64>() / (b - a) as f64
        })
        .collect();
    let floor = 1e-12 * (1.0 + tail.amax());
    for j in 0..j_lo.saturating_sub(w) {
        let later = smooth[j + w];
        let here = smooth[j];
        if later > 1.05 * here + floor {
            return Err(Error::NoDecay {
                rise: 100.0 * (later - here) / here.max(floor),
                z_lo: heights[j],
                z_hi: heights[j + w],
            });
        }
    }

    // Log-linear fit of the decaying part.
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for j in 0..=j_lo.min(ny) {
        if smooth[j] > floor {
            xs.push(heights[j]);
            ys.push(smooth[j].ln());
        }
    }
    let (rate, goodness) = if xs.len() >= 3 {
        let (slope, r2) = linear_fit(&xs, &ys);
        (-slope, r2)
    } else {
        (0.0, 1.0)
    };
    Ok(TailEntry {
        tail,
        fit: DecayFit {
            heights,
            sup_deviation: sup,
            rate,
            goodness,
        },
        method: TailMethod::StripRational,
    })
}

/// Least-squares line `y = a x + b`; returns `(a, R^2)`.
pub(crate) fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let slope = sxy / sxx;
    let r2 = if syy > 0.0 { (sxy * sxy) / (sxx * syy) } else { 1.0 };
    (slope, r2)
}

/// Convergence record of a diophantine tail sweep.
#[derive(Debug, Clone)]
pub struct ConvergentRecord {
    /// `(denominator q, tail)` per convergent.
    pub tails: Vec<(i64, DMatrix<f64>)>,
    /// Max-norm differences between successive tails.
    pub differences: Vec<f64>,
}

/// Tail for an irrational slope by sweeping the continued-fraction
/// convergents of the normal; the last convergent's tail is returned.
pub fn diophantine_tail(
    tensor: &PeriodicTensor,
    chi_alpha: &MatrixField,
    normal: [f64; 2],
    convergents_depth: usize,
    cauchy_tol: f64,
    opts: StripOptions,
) -> Result<(TailEntry, ConvergentRecord)> {
    let convergents = crate::geometry::rational_approximation(normal, convergents_depth)?;
    let mut tails: Vec<(i64, DMatrix<f64>)> = Vec::new();
    let mut last_entry = None;
    for &(p, q) in &convergents {
        let norm = ((p * p + q * q) as f64).sqrt();
        let n = [p as f64 / norm, q as f64 / norm];
        let verts = [[0.0, 0.0], [n[1], -n[0]], [n[1] + n[0], -n[0] + n[1]], [n[0], n[1]]];
        // Build a synthetic rational edge with this exact normal.
        let exact = [Some((p, q)), None, None, None];
        let poly = crate::geometry::build_polygon_with(&verts, Some(&exact))?;
        let edge = &poly.edges[0];
        let sol = solve_strip(tensor, chi_alpha, edge, opts)?;
        let entry = extract_tail(&sol, (0.6, 0.9))?;
        tails.push((q.max(p), entry.tail.clone()));
        last_entry = Some(entry);
    }
    let differences: Vec<f64> = tails
        .windows(2)
        .map(|w| (&w[1].1 - &w[0].1).amax())
        .collect();
    if let Some(&last) = differences.last() {
        if last > cauchy_tol {
            return Err(Error::NonCauchy {
                found: last,
                tolerance: cauchy_tol,
                depth: convergents.len(),
            });
        }
    }
    let mut entry = last_entry.expect("at least one convergent");
    entry.method = TailMethod::ConvergentExtrapolated;
    Ok((
        entry,
        ConvergentRecord {
            tails,
            differences,
        },
    ))
}

/// Solve the homogenized boundary-layer problem with an explicit gradient
/// trace `grad_u0(x, comp, alpha) = d_alpha u0_comp(x)`: constant-coefficient
/// Dirichlet problem with edge data `-V^{k,alpha,*} d_alpha u0(x)`; vertices
/// take the mean of the adjacent edge values.
pub fn solve_homogenized_bl_with(
    a0: &BlockMatrix,
    domain: &PolygonDomain,
    mesh: &Mesh,
    tails: &BoundaryLayerTailSet,
    grad_u0: &dyn Fn([f64; 2], usize, usize) -> f64,
    opts: SolveOptions,
) -> Result<Vec<f64>> {
    let ncomp = a0.ncomp();
    for k in 0..domain.edges.len() {
        for alpha in 0..2 {
            tails.get(k, alpha)?;
        }
    }
    let sys = assemble_constant(mesh, a0);
    let g = |edge: usize, x: [f64; 2], comp: usize| -> f64 {
        let mut acc = 0.0;
        for alpha in 0..2 {
            let v = &tails.entries[&(edge, alpha)].tail;
            for c in 0..ncomp {
                acc -= v[(comp, c)] * grad_u0(x, c, alpha);
            }
        }
        acc
    };
    sys.solve_dirichlet(&Load::Zero, &BoundaryData::PerEdge(&g), opts)
}

/// As [`solve_homogenized_bl_with`], with the gradient trace obtained by
/// patch recovery from the discrete field `u0`.
pub fn solve_homogenized_bl(
    a0: &BlockMatrix,
    domain: &PolygonDomain,
    mesh: &Mesh,
    tails: &BoundaryLayerTailSet,
    u0: &[f64],
    opts: SolveOptions,
) -> Result<Vec<f64>> {
    let ncomp = a0.ncomp();
    let grad = recover_gradient(u0, mesh, ncomp);
    let pos_index: BTreeMap<(i64, i64), usize> = mesh
        .nodes
        .iter()
        .enumerate()
        .map(|(v, p)| (quantize(*p), v))
        .collect();
    let grad_fn = |x: [f64; 2], comp: usize, alpha: usize| -> f64 {
        let node = pos_index[&quantize(x)];
        grad[node * 2 * ncomp + comp * 2 + alpha]
    };
    solve_homogenized_bl_with(a0, domain, mesh, tails, &grad_fn, opts)
}

fn quantize(p: [f64; 2]) -> (i64, i64) {
    ((p[0] * 1e12).round() as i64, (p[1] * 1e12).round() as i64)
}

/// Solve the oscillating boundary-layer problem: fine-scale Dirichlet solve
/// with boundary trace `Phi(x / eps) * g(x)`.
pub fn solve_oscillating_bl(
    tensor: &PeriodicTensor,
    eps: f64,
    mesh: &Mesh,
    phi: &dyn Fn([f64; 2], usize) -> f64,
    g: &dyn Fn([f64; 2]) -> f64,
    opts: SolveOptions,
) -> Result<Vec<f64>> {
    if mesh.h > eps {
        return Err(Error::UnresolvedOscillation { h: mesh.h, eps });
    }
    let sys = assemble_oscillating(mesh, tensor, eps, false)?;
    let data = |x: [f64; 2], comp: usize| phi([x[0] / eps, x[1] / eps], comp) * g(x);
    sys.solve_dirichlet(&Load::Zero, &BoundaryData::Fn(&data), opts)
}

/// L2 norm of a nodal field (convenience re-export for callers comparing
/// oscillating and homogenized layers).
pub fn l2_norm(field: &[f64], mesh: &Mesh, ncomp: usize) -> f64 {
    norms(field, mesh, ncomp).l2
}
