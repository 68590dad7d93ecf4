//! Periodic coefficient tensors, torus cell problems, the homogenized tensor,
//! and the auxiliary periodic potentials (second correctors, stream
//! potentials, `b` potentials).
//!
//! The coefficient family is `A^{ab}(y)`, a 2x2 arrangement of `N x N` matrix
//! blocks over the unit torus. Cell problems are solved pseudospectrally:
//! derivatives and inverse Laplacians are exact on the sampling grid, and the
//! variable-coefficient operator is applied by pointwise multiplication in
//! physical space inside a projected, preconditioned conjugate-gradient
//! iteration on the zero-mean subspace.

use crate::error::{Error, Result};
use crate::field::PeriodicField;
use nalgebra::DMatrix;

/// Indexing helper shared by all block layouts: `(alpha, beta, i, j)` with
/// `alpha, beta` in `{0, 1}` (the spatial indices) and `i, j` in `0..ncomp`.
#[inline]
pub fn block_index(ncomp: usize, alpha: usize, beta: usize, i: usize, j: usize) -> usize {
    ((alpha * 2 + beta) * ncomp + i) * ncomp + j
}

/// A constant block tensor, e.g. the homogenized tensor `A0`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockMatrix {
    ncomp: usize,
    data: Vec<f64>,
}

impl BlockMatrix {
    pub fn zeros(ncomp: usize) -> Self {
        Self {
            ncomp,
            data: vec![0.0; 4 * ncomp * ncomp],
        }
    }

    pub fn identity(ncomp: usize) -> Self {
        let mut m = Self::zeros(ncomp);
        for alpha in 0..2 {
            for i in 0..ncomp {
                *m.entry_mut(alpha, alpha, i, i) = 1.0;
            }
        }
        m
    }

    pub fn ncomp(&self) -> usize {
        self.ncomp
    }

    pub fn entry(&self, alpha: usize, beta: usize, i: usize, j: usize) -> f64 {
        self.data[block_index(self.ncomp, alpha, beta, i, j)]
    }

    pub fn entry_mut(&mut self, alpha: usize, beta: usize, i: usize, j: usize) -> &mut f64 {
        &mut self.data[block_index(self.ncomp, alpha, beta, i, j)]
    }

    /// Scalar case shortcut: the 2x2 matrix `A^{ab}` (requires `ncomp == 1`).
    pub fn as_2x2(&self) -> [[f64; 2]; 2] {
        assert_eq!(self.ncomp, 1);
        [
            [self.entry(0, 0, 0, 0), self.entry(0, 1, 0, 0)],
            [self.entry(1, 0, 0, 0), self.entry(1, 1, 0, 0)],
        ]
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            ncomp: self.ncomp,
            data: self.data.iter().map(|v| c * v).collect(),
        }
    }

    /// Max over `(a,b,i,j)` of `|A^{ab}_ij - A^{ba}_ji|`.
    pub fn symmetry_defect(&self) -> f64 {
        let mut worst = 0.0f64;
        for alpha in 0..2 {
            for beta in 0..2 {
                for i in 0..self.ncomp {
                    for j in 0..self.ncomp {
                        let d = (self.entry(alpha, beta, i, j) - self.entry(beta, alpha, j, i))
                            .abs();
                        worst = worst.max(d);
                    }
                }
            }
        }
        worst
    }

    /// Extreme Rayleigh quotients of the associated `2N x 2N` quadratic form
    /// `Q(xi) = A^{ab} xi^a . xi^b` (returns `(min, max)` eigenvalues of the
    /// symmetrized form).
    pub fn rayleigh_bounds(&self) -> (f64, f64) {
        let n2 = 2 * self.ncomp;
        let mut q = DMatrix::<f64>::zeros(n2, n2);
        for alpha in 0..2 {
            for beta in 0..2 {
                for i in 0..self.ncomp {
                    for j in 0..self.ncomp {
                        let v = self.entry(alpha, beta, i, j);
                        let r = alpha * self.ncomp + i;
                        let c = beta * self.ncomp + j;
                        q[(r, c)] += 0.5 * v;
                        q[(c, r)] += 0.5 * v;
                    }
                }
            }
        }
        let eig = q.symmetric_eigen();
        let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = eig
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        (min, max)
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// An `N x N` matrix of periodic scalar fields (a matrix-valued periodic
/// function such as a corrector `chi^g` or a second corrector `Gamma^{ab}`).
#[derive(Debug, Clone)]
pub struct MatrixField {
    ncomp: usize,
    n: usize,
    comps: Vec<PeriodicField>,
}

impl MatrixField {
    pub fn zeros(ncomp: usize, n: usize) -> Self {
        Self {
            ncomp,
            n,
            comps: vec![PeriodicField::zeros(n); ncomp * ncomp],
        }
    }

    pub fn ncomp(&self) -> usize {
        self.ncomp
    }

    pub fn resolution(&self) -> usize {
        self.n
    }

    pub fn comp(&self, i: usize, j: usize) -> &PeriodicField {
        &self.comps[i * self.ncomp + j]
    }

    pub fn comp_mut(&mut self, i: usize, j: usize) -> &mut PeriodicField {
        &mut self.comps[i * self.ncomp + j]
    }

    pub fn max_abs(&self) -> f64 {
        self.comps.iter().map(|f| f.max_abs()).fold(0.0, f64::max)
    }

    pub fn max_abs_mean(&self) -> f64 {
        self.comps
            .iter()
            .map(|f| f.mean().abs())
            .fold(0.0, f64::max)
    }
}

/// Raw full-grid samples of a block tensor, as read from CSV or sampled from
/// a preset; input to [`validate_tensor`].
#[derive(Debug, Clone)]
pub struct TensorSamples {
    pub ncomp: usize,
    pub n: usize,
    /// `values[block_index(ncomp, a, b, i, j)][grid]`, grid row-major as in
    /// [`PeriodicField`].
    pub values: Vec<Vec<f64>>,
}

impl TensorSamples {
    pub fn from_eval(ncomp: usize, n: usize, eval: impl Fn([f64; 2]) -> BlockMatrix) -> Self {
        let mut values = vec![Vec::with_capacity(n * n); 4 * ncomp * ncomp];
        for j in 0..n {
            for i in 0..n {
                let y = [i as f64 / n as f64, j as f64 / n as f64];
                let b = eval(y);
                for alpha in 0..2 {
                    for beta in 0..2 {
                        for ci in 0..ncomp {
                            for cj in 0..ncomp {
                                values[block_index(ncomp, alpha, beta, ci, cj)]
                                    .push(b.entry(alpha, beta, ci, cj));
                            }
                        }
                    }
                }
            }
        }
        Self { ncomp, n, values }
    }

    /// Read a tabulated tensor from CSV with header
    /// `alpha,beta,i,j,y1,y2,value` covering a full uniform grid. Indices
    /// `alpha,beta` are 1-based (spatial), `i,j` are 1-based components.
    pub fn from_csv(path: &std::path::Path) -> Result<Self> {
        let bad = |message: String| Error::BadTabulatedInput { message };
        let mut rdr = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
        let mut rows: Vec<(usize, usize, usize, usize, f64, f64, f64)> = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| bad(e.to_string()))?;
            if rec.len() != 7 {
                return Err(bad(format!("expected 7 columns, got {}", rec.len())));
            }
            let f = |k: usize| -> Result<f64> {
                rec[k]
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| bad(format!("column {k}: {e}")))
            };
            let u = |k: usize| -> Result<usize> {
                rec[k]
                    .trim()
                    .parse::<usize>()
                    .map_err(|e| bad(format!("column {k}: {e}")))
            };
            rows.push((u(0)?, u(1)?, u(2)?, u(3)?, f(4)?, f(5)?, f(6)?));
        }
        if rows.is_empty() {
            return Err(bad("no data rows".into()));
        }
        let ncomp = rows.iter().map(|r| r.2.max(r.3)).max().unwrap();
        let mut y1s: Vec<f64> = rows.iter().map(|r| r.4).collect();
        y1s.sort_by(f64::total_cmp);
        y1s.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
        let n = y1s.len();
        if n < 4 {
            return Err(bad(format!("grid resolution n = {n} < 4")));
        }
        if rows.len() != 4 * ncomp * ncomp * n * n {
            return Err(bad(format!(
                "expected {} rows for a full n = {n} grid with N = {ncomp}, got {}",
                4 * ncomp * ncomp * n * n,
                rows.len()
            )));
        }
        let mut values = vec![vec![f64::NAN; n * n]; 4 * ncomp * ncomp];
        for (alpha, beta, i, j, y1, y2, v) in rows {
            if !(1..=2).contains(&alpha) || !(1..=2).contains(&beta) {
                return Err(bad(format!("alpha/beta out of range: {alpha},{beta}")));
            }
            if i == 0 || j == 0 {
                return Err(bad("component indices i,j are 1-based".into()));
            }
            let gi = (y1 * n as f64).round() as usize % n;
            let gj = (y2 * n as f64).round() as usize % n;
            if (y1 - gi as f64 / n as f64).abs() > 1e-10 || (y2 - gj as f64 / n as f64).abs() > 1e-10
            {
                return Err(bad(format!("sample ({y1}, {y2}) is off the uniform grid")));
            }
            values[block_index(ncomp, alpha - 1, beta - 1, i - 1, j - 1)][gj * n + gi] = v;
        }
        if values.iter().flatten().any(|v| v.is_nan()) {
            return Err(bad("grid has missing samples".into()));
        }
        Ok(Self { ncomp, n, values })
    }

    fn block_at(&self, grid: usize) -> BlockMatrix {
        let mut b = BlockMatrix::zeros(self.ncomp);
        for alpha in 0..2 {
            for beta in 0..2 {
                for i in 0..self.ncomp {
                    for j in 0..self.ncomp {
                        *b.entry_mut(alpha, beta, i, j) =
                            self.values[block_index(self.ncomp, alpha, beta, i, j)][grid];
                    }
                }
            }
        }
        b
    }
}

/// Builtin analytic coefficient presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// `A = Id` (any block dimension).
    Identity { ncomp: usize },
    /// Scalar laminate `a(y1) = 2 + cos(2 pi y1)`.
    Laminate,
    /// Scalar isotropic `a(y) = 2 + cos(2 pi y1) cos(2 pi y2)`.
    CheckerboardSmooth,
    /// The laminate duplicated on two decoupled components (N = 2); every
    /// scalar eigenvalue appears with doubled multiplicity.
    LaminateBlock2,
}

impl Preset {
    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "identity" => Ok(Self::Identity { ncomp: 1 }),
            "laminate" => Ok(Self::Laminate),
            "checkerboard_smooth" => Ok(Self::CheckerboardSmooth),
            "laminate_block2" => Ok(Self::LaminateBlock2),
            _ => Err(Error::UnknownPreset { name: name.into() }),
        }
    }

    pub fn ncomp(&self) -> usize {
        match self {
            Self::Identity { ncomp } => *ncomp,
            Self::Laminate | Self::CheckerboardSmooth => 1,
            Self::LaminateBlock2 => 2,
        }
    }

    fn eval(&self, y: [f64; 2], scale: f64, out: &mut BlockMatrix) {
        let two_pi = 2.0 * std::f64::consts::PI;
        for v in out.data.iter_mut() {
            *v = 0.0;
        }
        match self {
            Self::Identity { ncomp } => {
                for alpha in 0..2 {
                    for i in 0..*ncomp {
                        *out.entry_mut(alpha, alpha, i, i) = scale;
                    }
                }
            }
            Self::Laminate => {
                let a = scale * (2.0 + (two_pi * y[0]).cos());
                *out.entry_mut(0, 0, 0, 0) = a;
                *out.entry_mut(1, 1, 0, 0) = a;
            }
            Self::CheckerboardSmooth => {
                let a = scale * (2.0 + (two_pi * y[0]).cos() * (two_pi * y[1]).cos());
                *out.entry_mut(0, 0, 0, 0) = a;
                *out.entry_mut(1, 1, 0, 0) = a;
            }
            Self::LaminateBlock2 => {
                let a = scale * (2.0 + (two_pi * y[0]).cos());
                for alpha in 0..2 {
                    for i in 0..2 {
                        *out.entry_mut(alpha, alpha, i, i) = a;
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
enum TensorSource {
    Preset(Preset),
    Tabulated(TensorSamples),
}

/// A validated periodic coefficient tensor.
#[derive(Debug, Clone)]
pub struct PeriodicTensor {
    ncomp: usize,
    /// Measured ellipticity constant: the smallest Rayleigh quotient of the
    /// block quadratic form over the validation grid.
    ellipticity_constant: f64,
    scale: f64,
    source: TensorSource,
}

/// Grid used when validating analytic presets.
const PRESET_VALIDATION_GRID: usize = 64;

impl PeriodicTensor {
    /// Build and validate a builtin preset.
    pub fn preset(preset: Preset) -> Self {
        let tensor = Self {
            ncomp: preset.ncomp(),
            ellipticity_constant: 0.0,
            scale: 1.0,
            source: TensorSource::Preset(preset),
        };
        let samples = tensor.sample(PRESET_VALIDATION_GRID);
        let (lambda, _) = measure_ellipticity(&samples).expect("builtin presets are elliptic");
        Self {
            ellipticity_constant: lambda,
            ..tensor
        }
    }

    pub fn preset_by_name(name: &str) -> Result<Self> {
        Ok(Self::preset(Preset::by_name(name)?))
    }

    pub fn ncomp(&self) -> usize {
        self.ncomp
    }

    pub fn ellipticity_constant(&self) -> f64 {
        self.ellipticity_constant
    }

    /// The tensor `c * A` (same correctors, scaled homogenized tensor).
    pub fn scaled(&self, c: f64) -> Self {
        assert!(c > 0.0, "scaling must preserve ellipticity");
        Self {
            ncomp: self.ncomp,
            ellipticity_constant: self.ellipticity_constant * c,
            scale: self.scale * c,
            source: self.source.clone(),
        }
    }

    /// If the tensor is constant in `y`, return its block value.
    pub fn as_constant(&self) -> Option<BlockMatrix> {
        match &self.source {
            TensorSource::Preset(Preset::Identity { ncomp }) => {
                Some(BlockMatrix::identity(*ncomp).scaled(self.scale))
            }
            _ => None,
        }
    }

    /// Evaluate the full block tensor at a point (periodic in `y`).
    pub fn eval(&self, y: [f64; 2], out: &mut BlockMatrix) {
        match &self.source {
            TensorSource::Preset(p) => p.eval(y, self.scale, out),
            TensorSource::Tabulated(s) => {
                for alpha in 0..2 {
                    for beta in 0..2 {
                        for i in 0..self.ncomp {
                            for j in 0..self.ncomp {
                                let f = &s.values[block_index(self.ncomp, alpha, beta, i, j)];
                                *out.entry_mut(alpha, beta, i, j) =
                                    self.scale * bilinear(f, s.n, y);
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn eval_block(&self, y: [f64; 2]) -> BlockMatrix {
        let mut out = BlockMatrix::zeros(self.ncomp);
        self.eval(y, &mut out);
        out
    }

    /// Sample the tensor on an `n x n` grid.
    pub fn sample(&self, n: usize) -> TensorSamples {
        TensorSamples::from_eval(self.ncomp, n, |y| self.eval_block(y))
    }
}

fn bilinear(values: &[f64], n: usize, y: [f64; 2]) -> f64 {
    let nf = n as f64;
    let x = y[0].rem_euclid(1.0) * nf;
    let z = y[1].rem_euclid(1.0) * nf;
    let i0 = x.floor() as usize % n;
    let j0 = z.floor() as usize % n;
    let i1 = (i0 + 1) % n;
    let j1 = (j0 + 1) % n;
    let fx = x - x.floor();
    let fz = z - z.floor();
    values[j0 * n + i0] * (1.0 - fx) * (1.0 - fz)
        + values[j0 * n + i1] * fx * (1.0 - fz)
        + values[j1 * n + i0] * (1.0 - fx) * fz
        + values[j1 * n + i1] * fx * fz
}

fn measure_ellipticity(samples: &TensorSamples) -> Result<(f64, f64)> {
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    let mut argmin = 0usize;
    for grid in 0..samples.n * samples.n {
        let b = samples.block_at(grid);
        let (lo, hi) = b.rayleigh_bounds();
        if lo < min {
            min = lo;
            argmin = grid;
        }
        max = max.max(hi);
    }
    if min <= 0.0 {
        return Err(Error::EllipticityViolation {
            claimed: 0.0,
            found: min,
            i: argmin % samples.n,
            j: argmin / samples.n,
        });
    }
    Ok((min, max))
}

/// Validate raw grid samples against the structural assumptions (ellipticity,
/// symmetry, finiteness) and wrap them as a usable tensor.
///
/// The returned tensor's `ellipticity_constant` is the measured smallest
/// Rayleigh quotient over the grid (at least `lambda_claim`).
pub fn validate_tensor(raw_samples: TensorSamples, lambda_claim: f64) -> Result<PeriodicTensor> {
    let n = raw_samples.n;
    assert!(n >= 4, "tensor grid must have n >= 4");
    // Finiteness and blockwise symmetry first, reporting the worst point.
    let mut worst_sym = 0.0f64;
    let mut worst_sym_at = 0usize;
    for grid in 0..n * n {
        let b = raw_samples.block_at(grid);
        if b.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteEntry {
                i: grid % n,
                j: grid / n,
            });
        }
        let d = b.symmetry_defect();
        if d > worst_sym {
            worst_sym = d;
            worst_sym_at = grid;
        }
    }
    if worst_sym > 1e-12 {
        return Err(Error::SymmetryViolation {
            discrepancy: worst_sym,
            i: worst_sym_at % n,
            j: worst_sym_at / n,
        });
    }
    // Ellipticity: exact extremal Rayleigh quotients per grid point.
    let mut min = f64::INFINITY;
    let mut argmin = 0usize;
    for grid in 0..n * n {
        let (lo, _) = raw_samples.block_at(grid).rayleigh_bounds();
        if lo < min {
            min = lo;
            argmin = grid;
        }
    }
    if min < lambda_claim - 1e-10 {
        return Err(Error::EllipticityViolation {
            claimed: lambda_claim,
            found: min,
            i: argmin % n,
            j: argmin / n,
        });
    }
    Ok(PeriodicTensor {
        ncomp: raw_samples.ncomp,
        ellipticity_constant: min,
        scale: 1.0,
        source: TensorSource::Tabulated(raw_samples),
    })
}

/// Options for the pseudospectral cell solves.
#[derive(Debug, Clone, Copy)]
pub struct CellSolveOptions {
    /// Relative residual target of the projected CG iteration.
    pub tolerance: f64,
    /// Iteration budget (absolute).
    pub max_iterations: usize,
}

impl Default for CellSolveOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-12,
            max_iterations: 10_000,
        }
    }
}

/// Variable-coefficient torus operator `u -> -div(A grad u)` applied
/// pseudospectrally to an `N`-component field, plus the shared machinery for
/// the cell solves.
struct SpectralCellOperator<'a> {
    samples: &'a TensorSamples,
    /// Mean diagonal coefficient, used by the inverse-Laplacian
    /// preconditioner.
    mean_diag: f64,
}

impl<'a> SpectralCellOperator<'a> {
    fn new(samples: &'a TensorSamples) -> Self {
        let ncomp = samples.ncomp;
        let mut acc = 0.0;
        for alpha in 0..2 {
            for i in 0..ncomp {
                let f = &samples.values[block_index(ncomp, alpha, alpha, i, i)];
                acc += f.iter().sum::<f64>() / f.len() as f64;
            }
        }
        Self {
            samples,
            mean_diag: acc / (2 * ncomp) as f64,
        }
    }

    fn ncomp(&self) -> usize {
        self.samples.ncomp
    }

    fn n(&self) -> usize {
        self.samples.n
    }

    /// `out_i = -sum_a d_a [ sum_{b,j} A^{ab}_ij d_b u_j ]`, all derivatives
    /// spectral. `u` and `out` are `ncomp` stacked grids.
    fn apply(&self, u: &[PeriodicField]) -> Vec<PeriodicField> {
        let ncomp = self.ncomp();
        let n = self.n();
        let grads: Vec<[PeriodicField; 2]> = u
            .iter()
            .map(|uj| [uj.derivative(0), uj.derivative(1)])
            .collect();
        let mut out = Vec::with_capacity(ncomp);
        for i in 0..ncomp {
            let mut flux = [PeriodicField::zeros(n), PeriodicField::zeros(n)];
            for (alpha, flux_a) in flux.iter_mut().enumerate() {
                let data = flux_a.data_mut();
                for beta in 0..2 {
                    for (j, grad_j) in grads.iter().enumerate() {
                        let a = &self.samples.values[block_index(ncomp, alpha, beta, i, j)];
                        let g = grad_j[beta].data();
                        for (d, (av, gv)) in data.iter_mut().zip(a.iter().zip(g)) {
                            *d += av * gv;
                        }
                    }
                }
            }
            let div = flux[0].derivative(0);
            let div2 = flux[1].derivative(1);
            let mut o = PeriodicField::zeros(n);
            for ((ov, d1), d2) in o.data_mut().iter_mut().zip(div.data()).zip(div2.data()) {
                *ov = -(d1 + d2);
            }
            out.push(o);
        }
        out
    }

    /// Preconditioner: componentwise `(-mean_diag * Lap)^{-1}` with the
    /// constant mode projected out.
    fn precondition(&self, r: &[PeriodicField]) -> Vec<PeriodicField> {
        r.iter()
            .map(|ri| {
                let mut z = ri.clone();
                z.sub_mean();
                let mut z = z.inv_laplacian();
                for v in z.data_mut() {
                    *v /= -self.mean_diag;
                }
                z
            })
            .collect()
    }

    /// Projected preconditioned CG for `apply(u) = rhs` on the zero-mean
    /// subspace.
    fn solve(
        &self,
        rhs: &[PeriodicField],
        opts: CellSolveOptions,
        context: &str,
    ) -> Result<Vec<PeriodicField>> {
        let ncomp = self.ncomp();
        let n = self.n();
        let dot = |a: &[PeriodicField], b: &[PeriodicField]| -> f64 {
            a.iter()
                .zip(b)
                .map(|(x, y)| {
                    x.data()
                        .iter()
                        .zip(y.data())
                        .map(|(p, q)| p * q)
                        .sum::<f64>()
                })
                .sum()
        };
        let mut b: Vec<PeriodicField> = rhs.to_vec();
        for bi in &mut b {
            bi.sub_mean();
        }
        let bnorm = dot(&b, &b).sqrt();
        let mut x = vec![PeriodicField::zeros(n); ncomp];
        if bnorm == 0.0 {
            return Ok(x);
        }
        let mut r = b;
        let mut z = self.precondition(&r);
        let mut p = z.clone();
        let mut rz = dot(&r, &z);
        let mut final_res = 1.0;
        for it in 0..opts.max_iterations {
            let ap = self.apply(&p);
            let denom = dot(&p, &ap);
            let alpha = rz / denom;
            for k in 0..ncomp {
                let (xk, pk) = (x[k].data_mut(), p[k].data());
                for (xv, pv) in xk.iter_mut().zip(pk) {
                    *xv += alpha * pv;
                }
                let (rk, apk) = (r[k].data_mut(), ap[k].data());
                for (rv, av) in rk.iter_mut().zip(apk) {
                    *rv -= alpha * av;
                }
                r[k].sub_mean();
            }
            final_res = dot(&r, &r).sqrt() / bnorm;
            if final_res <= opts.tolerance {
                for xk in &mut x {
                    xk.sub_mean();
                }
                return Ok(x);
            }
            z = self.precondition(&r);
            let rz_new = dot(&r, &z);
            let beta = rz_new / rz;
            rz = rz_new;
            for k in 0..ncomp {
                let (pk, zk) = (p[k].data_mut(), z[k].data());
                for (pv, zv) in pk.iter_mut().zip(zk) {
                    *pv = zv + beta * *pv;
                }
            }
            let _ = it;
        }
        Err(Error::NonConvergence {
            context: context.into(),
            residual: final_res,
            iterations: opts.max_iterations,
            tolerance: opts.tolerance,
        })
    }
}

/// Solve the cell problem `-div_y(A grad_y chi^g) = d_a A^{ag}` for the
/// corrector `chi^g` (an `N x N` matrix field, one `N`-vector solve per
/// column) at grid resolution `n` (a power of two).
pub fn solve_cell_corrector(
    tensor: &PeriodicTensor,
    gamma: usize,
    n: usize,
    opts: CellSolveOptions,
) -> Result<MatrixField> {
    assert!(n.is_power_of_two(), "cell grid must be a power of two");
    assert!(gamma < 2);
    let samples = tensor.sample(n);
    solve_cell_corrector_sampled(&samples, gamma, opts)
}

fn solve_cell_corrector_sampled(
    samples: &TensorSamples,
    gamma: usize,
    opts: CellSolveOptions,
) -> Result<MatrixField> {
    let ncomp = samples.ncomp;
    let n = samples.n;
    let op = SpectralCellOperator::new(samples);
    let mut chi = MatrixField::zeros(ncomp, n);
    for col in 0..ncomp {
        // rhs_i = d_a A^{ag}_{i,col}, spectral derivative of the samples.
        let rhs: Vec<PeriodicField> = (0..ncomp)
            .map(|i| {
                let mut acc = PeriodicField::zeros(n);
                for alpha in 0..2 {
                    let f = PeriodicField::from_data(
                        n,
                        samples.values[block_index(ncomp, alpha, gamma, i, col)].clone(),
                    );
                    let d = f.derivative(alpha);
                    for (a, b) in acc.data_mut().iter_mut().zip(d.data()) {
                        *a += b;
                    }
                }
                acc
            })
            .collect();
        let sol = op.solve(&rhs, opts, &format!("cell corrector chi^{}", gamma + 1))?;
        for (i, s) in sol.into_iter().enumerate() {
            *chi.comp_mut(i, col) = s;
        }
    }
    Ok(chi)
}

/// Homogenized tensor `A0^{ab}_ij = <A^{ab}_ij> + <A^{ag}_ik d_g chi^b_kj>`,
/// computed with the same grid quadrature as the cell solve.
pub fn homogenized_tensor(tensor: &PeriodicTensor, chi: &[MatrixField; 2]) -> Result<BlockMatrix> {
    let n = chi[0].resolution();
    if chi[1].resolution() != n {
        return Err(Error::ResolutionMismatch {
            expected: n,
            found: chi[1].resolution(),
        });
    }
    let ncomp = tensor.ncomp();
    let samples = tensor.sample(n);
    let npts = (n * n) as f64;
    let mut a0 = BlockMatrix::zeros(ncomp);
    // Precompute corrector gradients.
    let grad_chi: [Vec<[PeriodicField; 2]>; 2] = [
        matrix_gradients(&chi[0]),
        matrix_gradients(&chi[1]),
    ];
    for alpha in 0..2 {
        for beta in 0..2 {
            for i in 0..ncomp {
                for j in 0..ncomp {
                    let plain = &samples.values[block_index(ncomp, alpha, beta, i, j)];
                    let mut acc = plain.iter().sum::<f64>() / npts;
                    for gamma in 0..2 {
                        for k in 0..ncomp {
                            let a = &samples.values[block_index(ncomp, alpha, gamma, i, k)];
                            let g = grad_chi[beta][k * ncomp + j][gamma].data();
                            acc += a
                                .iter()
                                .zip(g)
                                .map(|(av, gv)| av * gv)
                                .sum::<f64>()
                                / npts;
                        }
                    }
                    *a0.entry_mut(alpha, beta, i, j) = acc;
                }
            }
        }
    }
    Ok(a0)
}

fn matrix_gradients(m: &MatrixField) -> Vec<[PeriodicField; 2]> {
    let ncomp = m.ncomp();
    let mut out = Vec::with_capacity(ncomp * ncomp);
    for i in 0..ncomp {
        for j in 0..ncomp {
            let f = m.comp(i, j);
            out.push([f.derivative(0), f.derivative(1)]);
        }
    }
    out
}

/// Assemble `B^{ab} = A^{ab} + A^{ag} d_g chi^b + d_g (A^{ga} chi^b)` and
/// solve `-div(A grad Gamma^{ab}) = B^{ab} - <B^{ab}>` for the second
/// corrector, zero mean.
pub fn solve_second_corrector(
    tensor: &PeriodicTensor,
    chi: &[MatrixField; 2],
    opts: CellSolveOptions,
) -> Result<([[MatrixField; 2]; 2], [[MatrixField; 2]; 2])> {
    let ncomp = tensor.ncomp();
    let n = chi[0].resolution();
    let samples = tensor.sample(n);
    let op = SpectralCellOperator::new(&samples);
    let grad_chi = [matrix_gradients(&chi[0]), matrix_gradients(&chi[1])];

    let mut b_fields: [[MatrixField; 2]; 2] = [
        [MatrixField::zeros(ncomp, n), MatrixField::zeros(ncomp, n)],
        [MatrixField::zeros(ncomp, n), MatrixField::zeros(ncomp, n)],
    ];
    for alpha in 0..2 {
        for beta in 0..2 {
            for i in 0..ncomp {
                for j in 0..ncomp {
                    // Pointwise part: A^{ab}_ij + sum_{g,k} A^{ag}_ik d_g chi^b_kj.
                    let mut f = PeriodicField::from_data(
                        n,
                        samples.values[block_index(ncomp, alpha, beta, i, j)].clone(),
                    );
                    for gamma in 0..2 {
                        for k in 0..ncomp {
                            let a = &samples.values[block_index(ncomp, alpha, gamma, i, k)];
                            let g = grad_chi[beta][k * ncomp + j][gamma].data();
                            for (fv, (av, gv)) in f.data_mut().iter_mut().zip(a.iter().zip(g)) {
                                *fv += av * gv;
                            }
                        }
                    }
                    // Divergence part: sum_g d_g [ (A^{ga} chi^b)_ij ].
                    for gamma in 0..2 {
                        let mut prod = PeriodicField::zeros(n);
                        for k in 0..ncomp {
                            let a = &samples.values[block_index(ncomp, gamma, alpha, i, k)];
                            let c = chi[beta].comp(k, j).data();
                            for (pv, (av, cv)) in
                                prod.data_mut().iter_mut().zip(a.iter().zip(c))
                            {
                                *pv += av * cv;
                            }
                        }
                        let d = prod.derivative(gamma);
                        for (fv, dv) in f.data_mut().iter_mut().zip(d.data()) {
                            *fv += dv;
                        }
                    }
                    *b_fields[alpha][beta].comp_mut(i, j) = f;
                }
            }
        }
    }

    let mut gamma2: [[MatrixField; 2]; 2] = [
        [MatrixField::zeros(ncomp, n), MatrixField::zeros(ncomp, n)],
        [MatrixField::zeros(ncomp, n), MatrixField::zeros(ncomp, n)],
    ];
    for alpha in 0..2 {
        for beta in 0..2 {
            for col in 0..ncomp {
                let rhs: Vec<PeriodicField> = (0..ncomp)
                    .map(|i| {
                        let mut f = b_fields[alpha][beta].comp(i, col).clone();
                        f.sub_mean();
                        f
                    })
                    .collect();
                let sol = op.solve(
                    &rhs,
                    opts,
                    &format!("second corrector Gamma^{}{}", alpha + 1, beta + 1),
                )?;
                for (i, s) in sol.into_iter().enumerate() {
                    *gamma2[alpha][beta].comp_mut(i, col) = s;
                }
            }
        }
    }
    Ok((b_fields, gamma2))
}

/// Stream potential of a zero-mean divergence-free periodic vector field:
/// `psi` with `grad^perp psi = (-d2 psi, d1 psi) = v`, zero mean.
pub fn stream_potential(v: &[PeriodicField; 2]) -> Result<PeriodicField> {
    let tol = 1e-8;
    let mean = v[0].mean().abs().max(v[1].mean().abs());
    if mean > tol {
        return Err(Error::NonZeroMean {
            found: mean,
            tolerance: tol,
        });
    }
    let div1 = v[0].derivative(0);
    let div2 = v[1].derivative(1);
    let mut div = PeriodicField::zeros(v[0].resolution());
    for ((d, a), b) in div.data_mut().iter_mut().zip(div1.data()).zip(div2.data()) {
        *d = a + b;
    }
    let div_norm = div.l2();
    let scale = v[0].l2().max(v[1].l2()).max(1.0);
    if div_norm > tol * scale {
        return Err(Error::NotDivergenceFree {
            found: div_norm,
            tolerance: tol,
        });
    }
    // curl v = d1 v2 - d2 v1 = Lap psi.
    let c1 = v[1].derivative(0);
    let c2 = v[0].derivative(1);
    let mut curl = PeriodicField::zeros(v[0].resolution());
    for ((c, a), b) in curl.data_mut().iter_mut().zip(c1.data()).zip(c2.data()) {
        *c = a - b;
    }
    Ok(curl.inv_laplacian())
}

/// Potential `b^a` with `Lap_y b^a = chi^a`, zero mean (componentwise).
pub fn chi_potential(chi_alpha: &MatrixField) -> Result<MatrixField> {
    let tol = 1e-8;
    let worst_mean = chi_alpha.max_abs_mean();
    if worst_mean > tol {
        return Err(Error::NonZeroMean {
            found: worst_mean,
            tolerance: tol,
        });
    }
    let mut b = MatrixField::zeros(chi_alpha.ncomp(), chi_alpha.resolution());
    for i in 0..chi_alpha.ncomp() {
        for j in 0..chi_alpha.ncomp() {
            *b.comp_mut(i, j) = chi_alpha.comp(i, j).inv_laplacian();
        }
    }
    Ok(b)
}

/// The full cell-problem output: correctors, second correctors, potentials,
/// stream potentials, and the homogenized tensor, all at one resolution.
#[derive(Debug, Clone)]
pub struct CellCorrectors {
    pub resolution: usize,
    pub ncomp: usize,
    /// First correctors `chi^g`, `g` in `{0, 1}`.
    pub chi: [MatrixField; 2],
    /// Pointwise fields `B^{ab}`.
    pub b_pointwise: [[MatrixField; 2]; 2],
    /// Second correctors `Gamma^{ab}`.
    pub gamma2: [[MatrixField; 2]; 2],
    /// Potentials `b^a` with `Lap b^a = chi^a`.
    pub b_matrix: [MatrixField; 2],
    /// Stream potentials `Psi^g` of the zero-mean divergence-free fluxes
    /// `A (e_g + grad chi^g) - A0 e_g` (componentwise scalar potentials).
    pub stream: [MatrixField; 2],
    /// Homogenized tensor `A0`.
    pub homogenized: BlockMatrix,
}

impl CellCorrectors {
    /// Run the whole cell pipeline at grid resolution `n`.
    pub fn compute(tensor: &PeriodicTensor, n: usize, opts: CellSolveOptions) -> Result<Self> {
        let ncomp = tensor.ncomp();
        let chi = [
            solve_cell_corrector(tensor, 0, n, opts)?,
            solve_cell_corrector(tensor, 1, n, opts)?,
        ];
        let homogenized = homogenized_tensor(tensor, &chi)?;
        let (b_pointwise, gamma2) = solve_second_corrector(tensor, &chi, opts)?;
        let b_matrix = [chi_potential(&chi[0])?, chi_potential(&chi[1])?];

        // Stream potentials from the corrector fluxes.
        let samples = tensor.sample(n);
        let grad_chi = [matrix_gradients(&chi[0]), matrix_gradients(&chi[1])];
        let mut stream = [MatrixField::zeros(ncomp, n), MatrixField::zeros(ncomp, n)];
        for gamma in 0..2 {
            for i in 0..ncomp {
                for c in 0..ncomp {
                    let mut flux = [PeriodicField::zeros(n), PeriodicField::zeros(n)];
                    for (alpha, flux_a) in flux.iter_mut().enumerate() {
                        let data = flux_a.data_mut();
                        let a_plain = &samples.values[block_index(ncomp, alpha, gamma, i, c)];
                        for (d, av) in data.iter_mut().zip(a_plain) {
                            *d += av;
                        }
                        for beta in 0..2 {
                            for k in 0..ncomp {
                                let a = &samples.values[block_index(ncomp, alpha, beta, i, k)];
                                let g = grad_chi[gamma][k * ncomp + c][beta].data();
                                for (d, (av, gv)) in data.iter_mut().zip(a.iter().zip(g)) {
                                    *d += av * gv;
                                }
                            }
                        }
                        let a0 = homogenized.entry(alpha, gamma, i, c);
                        for d in data.iter_mut() {
                            *d -= a0;
                        }
                    }
                    *stream[gamma].comp_mut(i, c) = stream_potential(&flux)?;
                }
            }
        }

        Ok(Self {
            resolution: n,
            ncomp,
            chi,
            b_pointwise,
            gamma2,
            b_matrix,
            stream,
            homogenized,
        })
    }
}
