//! Convex polygonal domains, slope classification of edge normals
//! (rational / diophantine-certified), and the rotations taking the model
//! half-space onto each edge's half-plane.

use crate::error::{Error, Result};

/// Classification of an edge-normal direction.
#[derive(Debug, Clone, PartialEq)]
pub enum SlopeKind {
    /// `n` proportional to the integer vector `(p, q)` in lowest terms
    /// (`q n1 = p n2` to 1e-12).
    Rational { p: i64, q: i64 },
    /// Finite-radius small-divisors certificate: for all nonzero integer
    /// `xi` with `|xi| <= scan_radius`, `|n . xi| >= c / |xi|^l`.
    DiophantineCertified { c: f64, l: f64, scan_radius: u32 },
    /// The scan failed; carries the first failing lattice vector.
    Undetermined { failing_xi: (i64, i64) },
}

/// Slope classification result with the measured worst divisor.
#[derive(Debug, Clone, PartialEq)]
pub struct SlopeClass {
    pub kind: SlopeKind,
    /// `min_{0 < |xi| <= scan_radius} |n . xi| * |xi|^l` (also reported for
    /// rational normals, where it eventually hits zero divisors and is the
    /// minimum over non-orthogonal `xi`).
    pub worst_divisor: f64,
}

/// One edge of a convex polygon.
#[derive(Debug, Clone)]
pub struct Edge {
    /// Unit inward normal `n^k`.
    pub normal: [f64; 2],
    /// Offset `c^k`; the interior is `{x : n^k . x > c^k}`.
    pub offset: f64,
    /// Endpoints, in polygon orientation order.
    pub endpoints: ([f64; 2], [f64; 2]),
    pub classification: SlopeClass,
}

impl Edge {
    pub fn length(&self) -> f64 {
        let (a, b) = self.endpoints;
        ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt()
    }

    /// Tangential period of the rotated coefficient for a rational edge.
    pub fn rational_period(&self) -> Option<f64> {
        match self.classification.kind {
            SlopeKind::Rational { p, q } => Some(((p * p + q * q) as f64).sqrt()),
            _ => None,
        }
    }
}

/// A convex polygon `Omega = intersection_k {x : n^k . x > c^k}`.
#[derive(Debug, Clone)]
pub struct PolygonDomain {
    pub vertices: Vec<[f64; 2]>,
    pub edges: Vec<Edge>,
}

/// Default parameters of the diophantine scan used by [`build_polygon`].
pub const DEFAULT_DIOPHANTINE: (f64, f64, u32) = (0.2, 1.0, 100);

/// Build a convex polygon from counter-clockwise vertices; edge `k` runs from
/// vertex `k` to vertex `k+1`.
pub fn build_polygon(vertices: &[[f64; 2]]) -> Result<PolygonDomain> {
    build_polygon_with(vertices, None)
}

/// As [`build_polygon`], with optional exact integer normals `(p, q)` per
/// edge (bypassing floating-point rational detection).
pub fn build_polygon_with(
    vertices: &[[f64; 2]],
    exact_normals: Option<&[Option<(i64, i64)>]>,
) -> Result<PolygonDomain> {
    let m = vertices.len();
    if m < 3 {
        return Err(Error::TooFewVertices { found: m });
    }
    let mut edges = Vec::with_capacity(m);
    for k in 0..m {
        let a = vertices[k];
        let b = vertices[(k + 1) % m];
        let d = [b[0] - a[0], b[1] - a[1]];
        let len = (d[0] * d[0] + d[1] * d[1]).sqrt();
        if len < 1e-12 {
            return Err(Error::DegenerateEdge {
                edge: k,
                length: len,
            });
        }
        // CCW orientation: the interior lies to the left of the edge, so the
        // inward normal is the direction rotated by +90 degrees.
        let normal = [-d[1] / len, d[0] / len];
        let offset = normal[0] * a[0] + normal[1] * a[1];
        let classification = match exact_normals.and_then(|e| e.get(k).copied().flatten()) {
            Some((p, q)) => exact_rational(p, q),
            None => {
                let (c, l, r) = DEFAULT_DIOPHANTINE;
                classify_normal(normal, c, l, r)
            }
        };
        edges.push(Edge {
            normal,
            offset,
            endpoints: (a, b),
            classification,
        });
    }
    // Convexity: every vertex on the inner side of every edge line.
    for (ei, e) in edges.iter().enumerate() {
        for (vi, v) in vertices.iter().enumerate() {
            let s = e.normal[0] * v[0] + e.normal[1] * v[1] - e.offset;
            if s < -1e-12 {
                return Err(Error::NonConvex {
                    vertex: vi,
                    edge: ei,
                });
            }
        }
    }
    Ok(PolygonDomain {
        vertices: vertices.to_vec(),
        edges,
    })
}

impl PolygonDomain {
    pub fn contains(&self, x: [f64; 2], tol: f64) -> bool {
        self.edges
            .iter()
            .all(|e| e.normal[0] * x[0] + e.normal[1] * x[1] - e.offset >= -tol)
    }

    /// Sum of exterior turning angles (2 pi for a convex CCW polygon).
    pub fn turning_angle_sum(&self) -> f64 {
        let m = self.vertices.len();
        let mut sum = 0.0;
        for k in 0..m {
            let a = self.vertices[k];
            let b = self.vertices[(k + 1) % m];
            let c = self.vertices[(k + 2) % m];
            let d1 = [b[0] - a[0], b[1] - a[1]];
            let d2 = [c[0] - b[0], c[1] - b[1]];
            let cross = d1[0] * d2[1] - d1[1] * d2[0];
            let dot = d1[0] * d2[0] + d1[1] * d2[1];
            sum += cross.atan2(dot);
        }
        sum
    }

    /// Chebyshev center: the point maximizing the minimum distance to all
    /// edge lines, found by enumerating edge triples (a tiny exact linear
    /// program; polygons here have few edges).
    pub fn chebyshev_center(&self) -> [f64; 2] {
        let m = self.edges.len();
        let mut best = (f64::NEG_INFINITY, [0.0, 0.0]);
        let radius_at = |x: [f64; 2]| -> f64 {
            self.edges
                .iter()
                .map(|e| e.normal[0] * x[0] + e.normal[1] * x[1] - e.offset)
                .fold(f64::INFINITY, f64::min)
        };
        for i in 0..m {
            for j in (i + 1)..m {
                for k in (j + 1)..m {
                    // Solve n_i.x - r = c_i for the three edges.
                    if let Some(x) = equidistant_point(
                        [&self.edges[i], &self.edges[j], &self.edges[k]],
                    ) {
                        let r = radius_at(x);
                        if r > best.0 {
                            best = (r, x);
                        }
                    }
                }
            }
        }
        best.1
    }
}

/// Solve for the point equidistant (signed) from three edge lines:
/// `n_e . x - r = c_e`.
fn equidistant_point(edges: [&Edge; 3]) -> Option<[f64; 2]> {
    // 3x3 system in (x1, x2, r).
    let mut a = [[0.0f64; 3]; 3];
    let mut b = [0.0f64; 3];
    for (row, e) in edges.iter().enumerate() {
        a[row] = [e.normal[0], e.normal[1], -1.0];
        b[row] = e.offset;
    }
    solve3(a, b).map(|s| [s[0], s[1]])
}

fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> Option<[f64; 3]> {
    for col in 0..3 {
        let piv = (col..3).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-14 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for row in 0..3 {
            if row != col {
                let f = a[row][col] / a[col][col];
                for k in col..3 {
                    a[row][k] -= f * a[col][k];
                }
                b[row] -= f * b[col];
            }
        }
    }
    Some([b[0] / a[0][0], b[1] / a[1][1], b[2] / a[2][2]])
}

fn gcd(a: i64, b: i64) -> i64 {
    let (mut a, mut b) = (a.abs(), b.abs());
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

fn exact_rational(p: i64, q: i64) -> SlopeClass {
    let g = gcd(p, q).max(1);
    let (mut p, mut q) = (p / g, q / g);
    if q < 0 || (q == 0 && p < 0) {
        p = -p;
        q = -q;
    }
    let norm = ((p * p + q * q) as f64).sqrt();
    let n = [p as f64 / norm, q as f64 / norm];
    let (_, l, r) = DEFAULT_DIOPHANTINE;
    SlopeClass {
        kind: SlopeKind::Rational { p, q },
        worst_divisor: scan_worst_divisor(n, l, r).0,
    }
}

/// Minimum of `|n . xi| * |xi|^l` over nonzero integer `xi` with
/// `|xi| <= radius`, ignoring exact zeros (orthogonal lattice vectors of a
/// rational normal). Returns `(worst, argmin)`.
fn scan_worst_divisor(n: [f64; 2], l: f64, radius: u32) -> (f64, (i64, i64)) {
    let r = radius as i64;
    let mut worst = f64::INFINITY;
    let mut arg = (0, 0);
    for x1 in -r..=r {
        for x2 in -r..=r {
            if x1 == 0 && x2 == 0 {
                continue;
            }
            let norm = ((x1 * x1 + x2 * x2) as f64).sqrt();
            if norm > radius as f64 {
                continue;
            }
            let dot = (n[0] * x1 as f64 + n[1] * x2 as f64).abs();
            if dot < 1e-13 {
                continue; // exact divisor of a rational slope
            }
            let d = dot * norm.powf(l);
            if d < worst {
                worst = d;
                arg = (x1, x2);
            }
        }
    }
    (worst, arg)
}

/// Classify a unit normal as rational (continued fraction of the slope
/// terminates with denominator <= 1e6), diophantine-certified (finite scan
/// passes), or undetermined.
pub fn classify_normal(n: [f64; 2], c: f64, l: f64, scan_radius: u32) -> SlopeClass {
    assert!(c > 0.0 && l > 0.0 && scan_radius >= 10);
    if let Some((p, q)) = detect_rational(n) {
        return exact_rational(p, q);
    }
    let (worst, arg) = scan_worst_divisor(n, l, scan_radius);
    // The certificate |n . xi| >= c / |xi|^l over the scanned ball is
    // exactly worst >= c (after multiplying through by |xi|^l).
    if worst >= c {
        SlopeClass {
            kind: SlopeKind::DiophantineCertified {
                c,
                l,
                scan_radius,
            },
            worst_divisor: worst,
        }
    } else {
        SlopeClass {
            kind: SlopeKind::Undetermined { failing_xi: arg },
            worst_divisor: worst,
        }
    }
}

/// Maximum convergent denominator below which a floating-point slope is
/// declared rational.
const RATIONAL_DENOM_CAP: i64 = 1_000_000;

fn detect_rational(n: [f64; 2]) -> Option<(i64, i64)> {
    // Slope of the normal: n1 / n2 = p / q, i.e. n proportional to (p, q).
    // A vertical-slope normal (n2 = 0) is the rational direction (1, 0).
    if n[1].abs() < 1e-14 {
        return Some((if n[0] < 0.0 { -1 } else { 1 }, 0));
    }
    let slope = n[0] / n[1];
    let convergents = continued_fraction(slope, 40);
    for &(p, q) in &convergents {
        if q > RATIONAL_DENOM_CAP {
            break;
        }
        if (q as f64 * n[0] - p as f64 * n[1]).abs() <= 1e-12 {
            return Some((p, q));
        }
    }
    None
}

/// Continued-fraction convergents `p_j / q_j` of `x`, in lowest terms.
fn continued_fraction(x: f64, max_terms: usize) -> Vec<(i64, i64)> {
    let mut convergents = Vec::new();
    let (mut pm1, mut qm1) = (1i64, 0i64);
    let (mut pm2, mut qm2) = (0i64, 1i64);
    let mut value = x;
    for _ in 0..max_terms {
        let a = value.floor();
        if a.abs() > 1e15 {
            break;
        }
        let ai = a as i64;
        let p = ai.checked_mul(pm1).and_then(|v| v.checked_add(pm2));
        let q = ai.checked_mul(qm1).and_then(|v| v.checked_add(qm2));
        let (Some(p), Some(q)) = (p, q) else { break };
        convergents.push((p, q));
        let frac = value - a;
        if frac.abs() < 1e-12 {
            break;
        }
        value = 1.0 / frac;
        (pm2, qm2) = (pm1, qm1);
        (pm1, qm1) = (p, q);
    }
    convergents
}

/// Continued-fraction convergents of the slope `n1 / n2` of a normal
/// direction, each satisfying `|slope - p/q| < 1/q^2`.
pub fn rational_approximation(n: [f64; 2], depth: usize) -> Result<Vec<(i64, i64)>> {
    assert!(depth <= 20);
    if n[1].abs() < 1e-14 {
        return Err(Error::SlopeInfinite);
    }
    let slope = n[0] / n[1];
    let mut conv = continued_fraction(slope, depth);
    conv.truncate(depth);
    Ok(conv)
}

/// The rotation `M^k` with `M^k e2 = n` and `det M = +1`:
/// `M = [[n2, n1], [-n1, n2]]`.
pub fn rotation_to_halfspace(n: [f64; 2]) -> [[f64; 2]; 2] {
    [[n[1], n[0]], [-n[0], n[1]]]
}

/// Apply a 2x2 matrix to a vector.
pub fn mat_apply(m: &[[f64; 2]; 2], v: [f64; 2]) -> [f64; 2] {
    [
        m[0][0] * v[0] + m[0][1] * v[1],
        m[1][0] * v[0] + m[1][1] * v[1],
    ]
}

/// Transpose of a 2x2 matrix.
pub fn mat_transpose(m: &[[f64; 2]; 2]) -> [[f64; 2]; 2] {
    [[m[0][0], m[1][0]], [m[0][1], m[1][1]]]
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn unit_square_edges() {
        let p = build_polygon(&[[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]).unwrap();
        let normals: Vec<[f64; 2]> = p.edges.iter().map(|e| e.normal).collect();
        assert_eq!(
            normals,
            vec![[0.0, 1.0], [-1.0, 0.0], [0.0, -1.0], [1.0, 0.0]]
        );
        let offsets: Vec<f64> = p.edges.iter().map(|e| e.offset).collect();
        assert_eq!(offsets, vec![0.0, -1.0, -1.0, 0.0]);
    }

    #[test]
    fn right_triangle_hypotenuse() {
        let p = build_polygon(&[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]).unwrap();
        let e = &p.edges[1];
        let s = 1.0 / 2.0f64.sqrt();
        assert_abs_diff_eq!(e.normal[0], -s, epsilon = 1e-15);
        assert_abs_diff_eq!(e.normal[1], -s, epsilon = 1e-15);
        assert_abs_diff_eq!(e.offset, -s, epsilon = 1e-15);
    }

    #[test]
    fn l_shape_rejected() {
        let r = build_polygon(&[
            [0.0, 0.0],
            [2.0, 0.0],
            [2.0, 1.0],
            [1.0, 1.0],
            [1.0, 2.0],
            [0.0, 2.0],
        ]);
        assert!(matches!(r, Err(Error::NonConvex { .. })));
    }

    #[test]
    fn turning_angles_sum_to_two_pi() {
        let p = build_polygon(&[[0.0, 0.0], [1.0, 0.0], [1.5, 1.0], [0.5, 1.7], [-0.5, 0.9]])
            .unwrap();
        assert_abs_diff_eq!(
            p.turning_angle_sum(),
            2.0 * std::f64::consts::PI,
            epsilon = 1e-10
        );
    }

    #[test]
    fn classify_axis_and_simple_rational() {
        let c = classify_normal([0.0, 1.0], 0.2, 1.0, 100);
        assert_eq!(c.kind, SlopeKind::Rational { p: 0, q: 1 });
        let s = 5.0f64.sqrt();
        let c = classify_normal([1.0 / s, 2.0 / s], 0.2, 1.0, 100);
        assert_eq!(c.kind, SlopeKind::Rational { p: 1, q: 2 });
    }

    #[test]
    fn classify_golden_ratio_certified() {
        let phi = (1.0 + 5.0f64.sqrt()) / 2.0;
        let norm = (1.0 + phi * phi).sqrt();
        let n = [1.0 / norm, phi / norm];
        let c = classify_normal(n, 0.2, 1.0, 100);
        assert!(
            matches!(c.kind, SlopeKind::DiophantineCertified { .. }),
            "expected certification, got {:?} (worst divisor {})",
            c.kind,
            c.worst_divisor
        );
        // Sign flip does not change the decision kind.
        let c2 = classify_normal([-n[0], -n[1]], 0.2, 1.0, 100);
        assert!(matches!(c2.kind, SlopeKind::DiophantineCertified { .. }));
        assert_abs_diff_eq!(c.worst_divisor, c2.worst_divisor, epsilon = 1e-12);
    }

    #[test]
    fn convergents_of_golden_ratio() {
        let phi = (1.0 + 5.0f64.sqrt()) / 2.0;
        let norm = (1.0 + phi * phi).sqrt();
        // Normal with slope phi.
        let conv = rational_approximation([phi / norm, 1.0 / norm], 6).unwrap();
        assert_eq!(conv, vec![(1, 1), (2, 1), (3, 2), (5, 3), (8, 5), (13, 8)]);
        for &(p, q) in &conv[1..] {
            let err = (phi - p as f64 / q as f64).abs();
            assert!(err < 1.0 / (q * q) as f64);
        }
    }

    #[test]
    fn convergents_of_simple_slopes() {
        let s = 5.0f64.sqrt();
        let conv = rational_approximation([1.0 / s, 2.0 / s], 5).unwrap();
        assert_eq!(conv, vec![(0, 1), (1, 2)]);
        let conv = rational_approximation([0.0, 1.0], 5).unwrap();
        assert_eq!(conv, vec![(0, 1)]);
    }

    #[test]
    fn rotations_map_e2_to_normal() {
        for n in [
            [0.0, 1.0],
            [1.0, 0.0],
            [1.0 / 2.0f64.sqrt(), 1.0 / 2.0f64.sqrt()],
            [-0.6, 0.8],
        ] {
            let m = rotation_to_halfspace(n);
            let me2 = mat_apply(&m, [0.0, 1.0]);
            assert_abs_diff_eq!(me2[0], n[0], epsilon = 1e-15);
            assert_abs_diff_eq!(me2[1], n[1], epsilon = 1e-15);
            let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
            assert_abs_diff_eq!(det, 1.0, epsilon = 1e-14);
            // Orthogonality.
            let mt = mat_transpose(&m);
            let prod = [
                mat_apply(&mt, [m[0][0], m[1][0]]),
                mat_apply(&mt, [m[0][1], m[1][1]]),
            ];
            assert_abs_diff_eq!(prod[0][0], 1.0, epsilon = 1e-14);
            assert_abs_diff_eq!(prod[1][1], 1.0, epsilon = 1e-14);
            assert_abs_diff_eq!(prod[0][1], 0.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn identity_rotation_for_vertical_normal() {
        let m = rotation_to_halfspace([0.0, 1.0]);
        assert_eq!(m, [[1.0, 0.0], [0.0, 1.0]]);
    }

    #[test]
    fn chebyshev_center_of_square_is_center() {
        let p = build_polygon(&[[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]).unwrap();
        let c = p.chebyshev_center();
        assert_abs_diff_eq!(c[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(c[1], 0.5, epsilon = 1e-12);
    }
}
