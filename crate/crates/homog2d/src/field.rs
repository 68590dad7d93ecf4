//! Periodic scalar fields on the unit torus, sampled on a uniform grid, with
//! fast Fourier transforms supplying spectral derivatives and inverse
//! Laplacians.
//!
//! Storage is row-major: `data[j * n + i]` holds the sample at
//! `y = (i/n, j/n)`, so axis 0 is `y1` and axis 1 is `y2`. All operators are
//! exact on trigonometric polynomials resolved by the grid, which is what
//! makes the cell-problem pipeline spectrally accurate for smooth
//! coefficients.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

/// A real scalar field on the unit torus sampled on an `n x n` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PeriodicField {
    n: usize,
    data: Vec<f64>,
}

impl PeriodicField {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![0.0; n * n],
        }
    }

    /// Sample `f(y1, y2)` on the grid.
    pub fn from_fn(n: usize, f: impl Fn(f64, f64) -> f64) -> Self {
        let mut data = Vec::with_capacity(n * n);
        for j in 0..n {
            let y2 = j as f64 / n as f64;
            for i in 0..n {
                let y1 = i as f64 / n as f64;
                data.push(f(y1, y2));
            }
        }
        Self { n, data }
    }

    pub fn from_data(n: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), n * n, "grid data must be n*n");
        Self { n, data }
    }

    pub fn resolution(&self) -> usize {
        self.n
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Grid sample with wrap-around indexing.
    pub fn at(&self, i: isize, j: isize) -> f64 {
        let n = self.n as isize;
        let i = i.rem_euclid(n) as usize;
        let j = j.rem_euclid(n) as usize;
        self.data[j * self.n + i]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / (self.n * self.n) as f64
    }

    pub fn sub_mean(&mut self) {
        let m = self.mean();
        for v in &mut self.data {
            *v -= m;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Root-mean-square over the grid (discrete L^2 norm on the torus).
    pub fn l2(&self) -> f64 {
        (self.data.iter().map(|v| v * v).sum::<f64>() / (self.n * self.n) as f64).sqrt()
    }

    /// Bilinear interpolation with wrap-around; second-order accurate.
    pub fn eval_bilinear(&self, y: [f64; 2]) -> f64 {
        let n = self.n as f64;
        let x = (y[0].rem_euclid(1.0)) * n;
        let z = (y[1].rem_euclid(1.0)) * n;
        let i0 = x.floor() as isize;
        let j0 = z.floor() as isize;
        let fx = x - i0 as f64;
        let fz = z - j0 as f64;
        let f00 = self.at(i0, j0);
        let f10 = self.at(i0 + 1, j0);
        let f01 = self.at(i0, j0 + 1);
        let f11 = self.at(i0 + 1, j0 + 1);
        f00 * (1.0 - fx) * (1.0 - fz) + f10 * fx * (1.0 - fz) + f01 * (1.0 - fx) * fz
            + f11 * fx * fz
    }

    /// Spectral partial derivative along `axis` (0 = y1, 1 = y2).
    pub fn derivative(&self, axis: usize) -> Self {
        let mut hat = to_complex(&self.data);
        fft2(&mut hat, self.n, Direction::Forward);
        apply_ik(&mut hat, self.n, axis);
        fft2(&mut hat, self.n, Direction::Inverse);
        Self {
            n: self.n,
            data: to_real(&hat),
        }
    }

    /// Solve `Lap u = self` with zero-mean data and zero-mean solution.
    pub fn inv_laplacian(&self) -> Self {
        let n = self.n;
        let mut hat = to_complex(&self.data);
        fft2(&mut hat, n, Direction::Forward);
        for jk in 0..n {
            let k2 = signed_wavenumber(jk, n);
            for ik in 0..n {
                let k1 = signed_wavenumber(ik, n);
                let ksq = k1 * k1 + k2 * k2;
                let idx = jk * n + ik;
                if ksq == 0.0 {
                    hat[idx] = Complex::new(0.0, 0.0);
                } else {
                    hat[idx] /= -4.0 * std::f64::consts::PI.powi(2) * ksq;
                }
            }
        }
        fft2(&mut hat, n, Direction::Inverse);
        Self {
            n,
            data: to_real(&hat),
        }
    }

    /// Spectral Laplacian.
    pub fn laplacian(&self) -> Self {
        let n = self.n;
        let mut hat = to_complex(&self.data);
        fft2(&mut hat, n, Direction::Forward);
        for jk in 0..n {
            let k2 = signed_wavenumber(jk, n);
            for ik in 0..n {
                let k1 = signed_wavenumber(ik, n);
                let ksq = k1 * k1 + k2 * k2;
                hat[jk * n + ik] *= -4.0 * std::f64::consts::PI.powi(2) * ksq;
            }
        }
        fft2(&mut hat, n, Direction::Inverse);
        Self {
            n,
            data: to_real(&hat),
        }
    }

    /// Spectrally accurate off-grid evaluator (truncated Fourier series).
    pub fn trig_interp(&self) -> TrigInterp {
        TrigInterp::new(self)
    }
}

/// A pruned Fourier-series representation of a periodic field, for
/// spectrally accurate evaluation at arbitrary points (boundary traces of
/// cell correctors, rotated strip coordinates, ...).
#[derive(Debug, Clone)]
pub struct TrigInterp {
    /// Modes `(k1, k2, re, im)` with coefficient magnitude above the pruning
    /// threshold; the represented field is
    /// `sum_k Re[(re + i im) e^{2 pi i (k1 y1 + k2 y2)}]`.
    modes: Vec<(f64, f64, f64, f64)>,
}

impl TrigInterp {
    fn new(field: &PeriodicField) -> Self {
        let n = field.n;
        let mut hat = to_complex(&field.data);
        fft2(&mut hat, n, Direction::Forward);
        let scale = 1.0 / (n * n) as f64;
        let max_mag = hat.iter().map(|c| c.norm()).fold(0.0f64, f64::max) * scale;
        let prune = (max_mag * 1e-15).max(1e-300);
        let mut modes = Vec::new();
        for jk in 0..n {
            let k2 = signed_wavenumber(jk, n);
            for ik in 0..n {
                let k1 = signed_wavenumber(ik, n);
                let c = hat[jk * n + ik] * scale;
                if c.norm() > prune {
                    modes.push((k1, k2, c.re, c.im));
                }
            }
        }
        Self { modes }
    }

    pub fn eval(&self, y: [f64; 2]) -> f64 {
        let two_pi = 2.0 * std::f64::consts::PI;
        let mut acc = 0.0;
        for &(k1, k2, re, im) in &self.modes {
            let phase = two_pi * (k1 * y[0] + k2 * y[1]);
            let (s, c) = phase.sin_cos();
            // Real part of (re + i im) (cos + i sin).
            acc += re * c - im * s;
        }
        acc
    }
}

#[derive(Clone, Copy, PartialEq)]
pub(crate) enum Direction {
    Forward,
    Inverse,
}

/// In-place 2D FFT on row-major `n x n` complex data. The inverse direction
/// includes the `1/n^2` normalization, so `fft2 . ifft2` is the identity.
pub(crate) fn fft2(data: &mut [Complex<f64>], n: usize, dir: Direction) {
    assert_eq!(data.len(), n * n);
    let mut planner = FftPlanner::new();
    let plan = match dir {
        Direction::Forward => planner.plan_fft_forward(n),
        Direction::Inverse => planner.plan_fft_inverse(n),
    };
    // Rows (contiguous).
    for row in data.chunks_exact_mut(n) {
        plan.process(row);
    }
    // Columns via transpose.
    transpose(data, n);
    for row in data.chunks_exact_mut(n) {
        plan.process(row);
    }
    transpose(data, n);
    if dir == Direction::Inverse {
        let scale = 1.0 / (n * n) as f64;
        for v in data.iter_mut() {
            *v *= scale;
        }
    }
}

fn transpose(data: &mut [Complex<f64>], n: usize) {
    for j in 0..n {
        for i in (j + 1)..n {
            data.swap(j * n + i, i * n + j);
        }
    }
}

/// Signed integer wavenumber for DFT index `k` of length `n`.
pub(crate) fn signed_wavenumber(k: usize, n: usize) -> f64 {
    if k <= n / 2 {
        k as f64
    } else {
        k as f64 - n as f64
    }
}

/// Multiply by `i 2 pi k_axis`, zeroing the Nyquist mode (whose derivative is
/// not representable as a real field of the same parity).
fn apply_ik(hat: &mut [Complex<f64>], n: usize, axis: usize) {
    let two_pi = 2.0 * std::f64::consts::PI;
    for jk in 0..n {
        for ik in 0..n {
            let kidx = if axis == 0 { ik } else { jk };
            let k = if n % 2 == 0 && kidx == n / 2 {
                0.0
            } else {
                signed_wavenumber(kidx, n)
            };
            let idx = jk * n + ik;
            let c = hat[idx];
            hat[idx] = Complex::new(-two_pi * k * c.im, two_pi * k * c.re);
        }
    }
}

fn to_complex(data: &[f64]) -> Vec<Complex<f64>> {
    data.iter().map(|&v| Complex::new(v, 0.0)).collect()
}

fn to_real(data: &[Complex<f64>]) -> Vec<f64> {
    data.iter().map(|c| c.re).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::PI;

    #[test]
    fn derivative_of_single_mode_is_exact() {
        let f = PeriodicField::from_fn(64, |y1, _| (2.0 * PI * y1).sin());
        let d = f.derivative(0);
        let exact = PeriodicField::from_fn(64, |y1, _| 2.0 * PI * (2.0 * PI * y1).cos());
        for (a, b) in d.data().iter().zip(exact.data()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn inv_laplacian_inverts_laplacian_on_zero_mean() {
        let f = PeriodicField::from_fn(32, |y1, y2| {
            (2.0 * PI * y1).sin() * (4.0 * PI * y2).cos() + (2.0 * PI * y2).sin()
        });
        let back = f.laplacian().inv_laplacian();
        for (a, b) in back.data().iter().zip(f.data()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-11);
        }
    }

    #[test]
    fn trig_interp_matches_grid_and_off_grid() {
        let f = PeriodicField::from_fn(32, |y1, y2| {
            1.5 + (2.0 * PI * y1).cos() * (2.0 * PI * y2).sin()
        });
        let interp = f.trig_interp();
        assert_abs_diff_eq!(interp.eval([0.25, 0.125]), f.at(8, 4), epsilon = 1e-13);
        let y = [0.1234, 0.777];
        let exact = 1.5 + (2.0 * PI * y[0]).cos() * (2.0 * PI * y[1]).sin();
        assert_abs_diff_eq!(interp.eval(y), exact, epsilon = 1e-12);
    }

    #[test]
    fn bilinear_wraps_periodically() {
        let f = PeriodicField::from_fn(16, |y1, y2| (2.0 * PI * y1).cos() + y2.powi(0) - 1.0);
        assert_abs_diff_eq!(
            f.eval_bilinear([1.3, 2.9]),
            f.eval_bilinear([0.3, 0.9]),
            epsilon = 1e-14
        );
    }
}
