//! Acceptance suite: one test per acceptance criterion, each printing a
//! single PASS line. Heavy sweeps share fixtures through `OnceLock`.
//!
//! Run with `cargo test --test acceptance -- --nocapture` to see the lines.

use std::f64::consts::PI;
use std::sync::OnceLock;

use homog2d::boundary_layer::{
    extract_tail, l2_norm, solve_strip, BoundaryLayerTailSet, StripOptions,
};
use homog2d::expansion::{
    corrector_error_study, eigen_expansion_study, fit_report, first_order_eigen_correction,
    osborn_check, ClusterVector, ConvergenceRow, EigenStudyOptions, GradientTrace, ModeStudy,
};
use homog2d::fem::{
    assemble, assemble_constant, triangulate, BoundaryData, Coefficient, Load, SolveOptions,
    DEFAULT_NODE_BUDGET,
};
use homog2d::geometry::{build_polygon, PolygonDomain};
use homog2d::microstructure::{
    BlockMatrix, CellCorrectors, CellSolveOptions, PeriodicTensor, Preset,
};
use homog2d::spectral::{cluster_eigenvalues, solve_eigenpairs, EigenOptions};

fn unit_square() -> PolygonDomain {
    build_polygon(&[[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]).unwrap()
}

fn laminate_study() -> &'static Vec<ModeStudy> {
    static STUDY: OnceLock<Vec<ModeStudy>> = OnceLock::new();
    STUDY.get_or_init(|| {
        let tensor = PeriodicTensor::preset(Preset::Laminate);
        let opts = EigenStudyOptions {
            modes: vec![(1, 1), (2, 1)],
            ..Default::default()
        };
        eigen_expansion_study(&tensor, &opts).unwrap()
    })
}

/// Criterion 1: constant coefficient exactness — zero correctors, identity
/// homogenized tensor, zero tails, expansion residuals at solver noise.
#[test]
fn criterion_01_constant_exactness() {
    let tensor = PeriodicTensor::preset(Preset::Identity { ncomp: 1 });
    let correctors = CellCorrectors::compute(&tensor, 64, CellSolveOptions::default()).unwrap();
    for gamma in 0..2 {
        assert!(correctors.chi[gamma].comp(0, 0).max_abs() <= 1e-12, "chi != 0");
        for alpha in 0..2 {
            assert!(
                correctors.gamma2[gamma][alpha].comp(0, 0).max_abs() <= 1e-12,
                "Gamma != 0"
            );
        }
    }
    let identity = BlockMatrix::identity(1);
    assert!(correctors.homogenized.max_abs_diff(&identity) <= 1e-12, "A0 != I");

    // Tails vanish on every unit-square edge.
    let poly = unit_square();
    for edge in &poly.edges {
        let sol = solve_strip(
            &tensor,
            &correctors.chi[0],
            edge,
            StripOptions::default(),
        )
        .unwrap();
        let entry = extract_tail(&sol, (0.6, 0.9)).unwrap();
        assert!(entry.tail[(0, 0)].abs() <= 1e-12, "tail != 0");
    }

    // Eigen-expansion residuals at solver noise (10x eigensolver tolerance).
    let opts = EigenStudyOptions {
        m_list: vec![2, 4, 8],
        mesh_ratios: (4, 8),
        cell_resolution: 64,
        modes: vec![(1, 1)],
        ..Default::default()
    };
    let study = &eigen_expansion_study(&tensor, &opts).unwrap()[0];
    for row in &study.rows {
        let thresh = 10.0 * 1e-8 * row.lambda0;
        assert!(row.gap <= thresh, "gap {} above noise {}", row.gap, thresh);
        assert!(row.residual <= thresh, "residual {} above noise {}", row.residual, thresh);
    }
    println!("criterion 01 constant-coefficient exactness: PASS");
}

/// Criterion 2: laminate homogenization — A0 = diag(sqrt(3), 2) within 1e-8
/// at cell grid 256.
#[test]
fn criterion_02_laminate_homogenized_tensor() {
    let tensor = PeriodicTensor::preset(Preset::Laminate);
    let correctors = CellCorrectors::compute(&tensor, 256, CellSolveOptions::default()).unwrap();
    let a0 = correctors.homogenized.as_2x2();
    assert!((a0[0][0] - 3f64.sqrt()).abs() <= 1e-8, "a11 = {}", a0[0][0]);
    assert!((a0[1][1] - 2.0).abs() <= 1e-8, "a22 = {}", a0[1][1]);
    assert!(a0[0][1].abs() <= 1e-10 && a0[1][0].abs() <= 1e-10);
    println!("criterion 02 laminate homogenized tensor: PASS");
}

/// Criterion 3: Dirichlet Laplacian spectrum on the square at h = 1/64 —
/// four eigenvalues within 1% of pi^2 * {2, 5, 5, 8}, middle pair clustered
/// with multiplicity 2.
#[test]
fn criterion_03_square_spectrum_and_cluster() {
    let poly = unit_square();
    let mesh = triangulate(&poly, 1.0 / 64.0, DEFAULT_NODE_BUDGET).unwrap();
    let sys = assemble_constant(&mesh, &BlockMatrix::identity(1));
    let sol = solve_eigenpairs(&sys.kff, &sys.mff, 4, EigenOptions::default()).unwrap();
    let exact = [2.0, 5.0, 5.0, 8.0].map(|c| c * PI * PI);
    for (lam, ex) in sol.values.iter().zip(exact) {
        assert!((lam - ex).abs() <= 0.01 * ex, "{lam} vs {ex}");
    }
    // The discrete pair splits only by finite-element error, far below the
    // spacing to its neighbors; the cluster tolerance must dominate that
    // splitting (1e-3 here, vs ~60% gaps to lambda_1 and lambda_4).
    let clusters = cluster_eigenvalues(&sol.values, 1e-3);
    assert_eq!(clusters.len(), 3);
    assert_eq!(clusters[1], 1..3, "middle pair has multiplicity 2");
    println!("criterion 03 square spectrum + cluster multiplicity: PASS");
}

/// Criterion 4: |lambda_eps - lambda0| decays with fitted slope >= 0.9 for
/// the two lowest simple modes of the laminate/square problem.
#[test]
fn criterion_04_eigenvalue_gap_slope() {
    for study in laminate_study() {
        assert!(
            study.zeroth.slope >= 0.9,
            "mode {:?}: zeroth slope {}",
            study.mode,
            study.zeroth.slope
        );
    }
    println!("criterion 04 eigenvalue gap slope >= 0.9: PASS");
}

/// Criterion 5: H1 error of the order-1 corrected reconstruction has fitted
/// slope >= 0.85 over the eps sweep (plus the L2 claims of the same study).
#[test]
fn criterion_05_reconstruction_h1_slope() {
    let tensor = PeriodicTensor::preset(Preset::Laminate);
    let study =
        corrector_error_study(&tensor, &[8, 16, 32], 4, SolveOptions::default()).unwrap();
    assert!(
        study.reconstruction_h1.slope >= 0.85,
        "H1 slope {}",
        study.reconstruction_h1.slope
    );
    assert!(study.u0_l2.pass, "u0 L2 slope {}", study.u0_l2.slope);
    assert!(
        study.reconstruction_l2.pass,
        "reconstruction L2 slope {}",
        study.reconstruction_l2.slope
    );
    println!("criterion 05 corrected reconstruction H1 slope >= 0.85: PASS");
}

/// Criterion 6: strip solver on a rational edge — tail stable to <= 1e-6
/// under doubling of the strip height, non-increasing deviation profile,
/// positive exponential decay rate.
#[test]
fn criterion_06_strip_tail_stability() {
    let tensor = PeriodicTensor::preset(Preset::Laminate);
    let correctors = CellCorrectors::compute(&tensor, 128, CellSolveOptions::default()).unwrap();
    let poly = unit_square();
    let edge = &poly.edges[0];
    let mut tails = Vec::new();
    for height in [10.0, 20.0] {
        let sol = solve_strip(
            &tensor,
            &correctors.chi[0],
            edge,
            StripOptions {
                height_periods: height,
                phase: 0.75,
                ..StripOptions::default()
            },
        )
        .unwrap();
        let entry = extract_tail(&sol, (0.6, 0.9)).unwrap();
        // extract_tail enforces the (5%-tolerant) non-increasing profile.
        assert!(entry.fit.rate > 0.0, "decay rate {}", entry.fit.rate);
        tails.push(entry.tail[(0, 0)]);
    }
    assert!(
        (tails[1] - tails[0]).abs() <= 1e-6,
        "tail moved by {:.3e} under doubling",
        (tails[1] - tails[0]).abs()
    );
    println!("criterion 06 strip tail doubling stability: PASS");
}

/// Criterion 7: L2 norm of the oscillating boundary layer with
/// tail-subtracted data decays with fitted slope >= 0.4 (claimed 1/2).
/// The smooth checkerboard makes the data genuinely oscillatory along the
/// edges (the laminate's is constant there and subtracts to zero).
#[test]
fn criterion_07_oscillating_bl_decay() {
    let tensor = PeriodicTensor::preset(Preset::CheckerboardSmooth);
    let correctors = CellCorrectors::compute(&tensor, 64, CellSolveOptions::default()).unwrap();
    let poly = unit_square();
    let solve = SolveOptions::default();
    // eps = 1/(m + 1/4) puts the top/right edges at cell phase 3/4, where
    // the corrector traces genuinely oscillate (on lattice lines they vanish
    // by the checkerboard's symmetry and the data degenerates to zero). The
    // phase pattern is the same for every m, so one tail per (edge, alpha)
    // serves the whole sweep.
    let eps_of = |m: usize| 1.0 / (m as f64 + 0.25);
    let mut tails = vec![[0.0f64; 2]; poly.edges.len()];
    for (k, edge) in poly.edges.iter().enumerate() {
        let phase = (edge.offset / eps_of(8)).rem_euclid(1.0);
        for alpha in 0..2 {
            let sol = solve_strip(
                &tensor,
                &correctors.chi[alpha],
                edge,
                StripOptions { phase, solve, ..StripOptions::default() },
            )
            .unwrap();
            tails[k][alpha] = extract_tail(&sol, (0.6, 0.9)).unwrap().tail[(0, 0)];
        }
    }
    let chi_i = [
        correctors.chi[0].comp(0, 0).trig_interp(),
        correctors.chi[1].comp(0, 0).trig_interp(),
    ];
    let du0 = |x: [f64; 2]| {
        [
            PI * (PI * x[0]).cos() * (PI * x[1]).sin(),
            PI * (PI * x[0]).sin() * (PI * x[1]).cos(),
        ]
    };
    let mut rows = Vec::new();
    for m in [8usize, 16, 32] {
        let eps = eps_of(m);
        let n = 8 * m + 2;
        let mesh = triangulate(&poly, 1.0 / n as f64, DEFAULT_NODE_BUDGET).unwrap();
        let sys = assemble(&mesh, &Coefficient::Oscillating { tensor: &tensor, eps }, 2, None);
        let data = |k: usize, x: [f64; 2], _c: usize| -> f64 {
            let y = [x[0] / eps, x[1] / eps];
            let d = du0(x);
            (0..2).map(|a| (chi_i[a].eval(y) - tails[k][a]) * d[a]).sum()
        };
        let v = sys
            .solve_dirichlet(&Load::Zero, &BoundaryData::PerEdge(&data), solve)
            .unwrap();
        rows.push(ConvergenceRow { eps, value: l2_norm(&v, &mesh, 1) });
    }
    let report = fit_report("oscillating_bl_l2", &rows, 0.5, 0.4).unwrap();
    assert!(report.pass, "slope {}", report.slope);
    println!(
        "criterion 07 tail-subtracted boundary layer L2 slope {:.3} >= 0.4: PASS",
        report.slope
    );
}

/// Criterion 8: first-order residual slope > 1.0 and strictly greater than
/// the zeroth-order slope on both laminate modes.
#[test]
fn criterion_08_first_order_dominance() {
    for study in laminate_study() {
        assert!(
            study.first.slope > 1.0,
            "mode {:?}: first slope {}",
            study.mode,
            study.first.slope
        );
        assert!(
            study.first.slope > study.zeroth.slope,
            "mode {:?}: first {} vs zeroth {}",
            study.mode,
            study.first.slope,
            study.zeroth.slope
        );
    }
    println!("criterion 08 first-order residual dominance: PASS");
}

/// Criterion 9: the Osborn ratio lhs / |(T0 - Teps)|E|^2 stays within a
/// factor 3 across consecutive eps rows, on a simple cluster and on a
/// multiplicity-2 cluster.
#[test]
fn criterion_09_osborn_boundedness() {
    let poly = unit_square();
    let mesh = triangulate(&poly, 1.0 / 128.0, DEFAULT_NODE_BUDGET).unwrap();
    let cases: [(&str, PeriodicTensor, std::ops::Range<usize>); 2] = [
        ("simple", PeriodicTensor::preset(Preset::Laminate), 0..1),
        ("multiplicity-2", PeriodicTensor::preset(Preset::LaminateBlock2), 0..2),
    ];
    for (label, tensor, cluster) in cases {
        let correctors =
            CellCorrectors::compute(&tensor, 128, CellSolveOptions::default()).unwrap();
        let mut ratios = Vec::new();
        for eps in [1.0 / 8.0, 1.0 / 16.0] {
            let rec = osborn_check(
                &tensor,
                &correctors.homogenized,
                &mesh,
                eps,
                cluster.clone(),
                EigenOptions::default(),
                SolveOptions::default(),
            )
            .unwrap();
            ratios.push(rec.ratio);
        }
        let (lo, hi) = (ratios[0].min(ratios[1]), ratios[0].max(ratios[1]));
        assert!(
            hi <= 3.0 * lo.max(1e-12),
            "{label}: ratios {ratios:?} spread beyond factor 3"
        );
        println!("criterion 09 osborn ratio ({label}): {ratios:?}");
    }
    println!("criterion 09 osborn boundedness: PASS");
}

/// Criterion 10: sum of first-order corrections invariant (<= 1e-6 relative)
/// under a random orthogonal re-basis of a multiplicity-2 cluster of the
/// duplicated-block preset.
#[test]
fn criterion_10_cluster_rebasis_invariance() {
    let tensor = PeriodicTensor::preset(Preset::LaminateBlock2);
    let correctors = CellCorrectors::compute(&tensor, 128, CellSolveOptions::default()).unwrap();
    let poly = unit_square();
    let mesh = triangulate(&poly, 1.0 / 64.0, DEFAULT_NODE_BUDGET).unwrap();
    let solve = SolveOptions::default();

    // Tails at the phase of eps = 1/(8 + 1/4).
    let eps = 1.0 / 8.25;
    let mut tails = BoundaryLayerTailSet::default();
    for (k, edge) in poly.edges.iter().enumerate() {
        let phase = (edge.offset / eps).rem_euclid(1.0);
        for alpha in 0..2 {
            let sol = solve_strip(
                &tensor,
                &correctors.chi[alpha],
                edge,
                StripOptions { phase, solve, ..StripOptions::default() },
            )
            .unwrap();
            tails
                .entries
                .insert((k, alpha), extract_tail(&sol, (0.6, 0.9)).unwrap());
        }
    }

    // Cluster basis: the duplicated fundamental mode on the two components.
    let nn = mesh.nodes.len();
    let scalar: Vec<f64> = mesh
        .nodes
        .iter()
        .map(|x| (PI * x[0]).sin() * (PI * x[1]).sin())
        .collect();
    let embed = |c0: f64, c1: f64| -> Vec<f64> {
        let mut out = vec![0.0; nn * 2];
        for v in 0..nn {
            out[v * 2] = c0 * scalar[v];
            out[v * 2 + 1] = c1 * scalar[v];
        }
        out
    };
    let lambda0 = PI * PI * (3f64.sqrt() + 2.0);
    let sum_for = |basis_vecs: &[Vec<f64>]| -> f64 {
        let basis: Vec<ClusterVector> = basis_vecs
            .iter()
            .map(|f| ClusterVector {
                field: f,
                gradient: GradientTrace::Recovered,
            })
            .collect();
        first_order_eigen_correction(
            &correctors.homogenized,
            &poly,
            &mesh,
            &tails,
            lambda0,
            &basis,
            solve,
        )
        .unwrap()
        .sum
    };

    let aligned = [embed(1.0, 0.0), embed(0.0, 1.0)];
    // Deterministic "random" rotation angle from the documented seed recipe.
    let theta = {
        let mut z = 42u64.wrapping_add(0x9E3779B97F4A7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
        let u = ((z ^ (z >> 31)) >> 11) as f64 / (1u64 << 53) as f64;
        2.0 * PI * u
    };
    let rotated = [
        embed(theta.cos(), theta.sin()),
        embed(-theta.sin(), theta.cos()),
    ];
    let s1 = sum_for(&aligned);
    let s2 = sum_for(&rotated);
    assert!(
        (s1 - s2).abs() <= 1e-6 * s1.abs().max(1e-12),
        "sum changed under re-basis: {s1} vs {s2} (theta = {theta})"
    );
    println!(
        "criterion 10 cluster re-basis invariance (sums {s1:.8} / {s2:.8}): PASS"
    );
}
