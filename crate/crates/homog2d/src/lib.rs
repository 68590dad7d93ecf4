//! Numerical toolkit for two-dimensional periodic homogenization.
//!
//! `homog2d` studies second-order elliptic operators with coefficients that
//! oscillate on a small period `eps`, posed on convex polygons with Dirichlet
//! boundary conditions. It computes the classical objects of homogenization
//! theory — cell correctors, the homogenized tensor, boundary-layer tails —
//! and uses them to verify, numerically, the convergence rates that the
//! theory predicts for solutions and eigenvalues.
//!
//! # Modules
//!
//! - [`microstructure`]: periodic coefficient tensors (built-in presets or
//!   CSV samples), cell correctors `chi`, second-order correctors, and the
//!   homogenized tensor `A0`.
//! - [`geometry`]: convex polygonal domains with edge slope classification
//!   (rational vs. diophantine normals).
//! - [`fem`]: piecewise-linear finite elements — structured triangulation,
//!   assembly with oscillating coefficients, Dirichlet solves, gradient
//!   recovery, norms.
//! - [`spectral`]: a sparse generalized symmetric eigensolver with
//!   eigenvalue clustering and cluster harmonic means.
//! - [`boundary_layer`]: semi-infinite strip problems along rational edges
//!   and extraction of the constant boundary-layer tails.
//! - [`expansion`]: multiscale reconstruction, convergence-rate studies with
//!   fitted log-log slopes and confidence intervals, and the first-order
//!   eigenvalue expansion with its consistency checks.
//! - [`config`] / [`runner`] / [`report`]: the TOML-driven experiment
//!   pipeline behind the `homog2d run` command.
//!
//! # Example: homogenizing a laminate
//!
//! The laminate `a(y) = 2 + cos(2 pi y1)` has a closed-form homogenized
//! tensor: the harmonic mean `sqrt(3)` across the layers and the arithmetic
//! mean `2` along them.
//!
//! ```
//! use homog2d::microstructure::{CellCorrectors, CellSolveOptions, PeriodicTensor, Preset};
//!
//! let tensor = PeriodicTensor::preset(Preset::Laminate);
//! let correctors = CellCorrectors::compute(&tensor, 64, CellSolveOptions::default())?;
//! let a0 = correctors.homogenized.as_2x2();
//!
//! assert!((a0[0][0] - 3f64.sqrt()).abs() < 1e-6);
//! assert!((a0[1][1] - 2.0).abs() < 1e-12);
//! assert!(a0[0][1].abs() < 1e-12);
//! # Ok::<(), homog2d::Error>(())
//! ```
//!
//! # Example: a Dirichlet spectrum
//!
//! The four lowest Laplace eigenvalues on the unit square are
//! `pi^2 {2, 5, 5, 8}`; the degenerate pair shows up as a cluster.
//!
//! ```
//! use homog2d::fem::{assemble_constant, triangulate, DEFAULT_NODE_BUDGET};
//! use homog2d::geometry::build_polygon;
//! use homog2d::microstructure::BlockMatrix;
//! use homog2d::spectral::{cluster_eigenvalues, solve_eigenpairs, EigenOptions};
//!
//! let square = build_polygon(&[[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])?;
//! let mesh = triangulate(&square, 1.0 / 24.0, DEFAULT_NODE_BUDGET)?;
//! let sys = assemble_constant(&mesh, &BlockMatrix::identity(1));
//! let sol = solve_eigenpairs(&sys.kff, &sys.mff, 4, EigenOptions::default())?;
//!
//! let pi2 = std::f64::consts::PI.powi(2);
//! assert!((sol.values[0] - 2.0 * pi2).abs() < 0.05 * pi2);
//! let clusters = cluster_eigenvalues(&sol.values, 1e-2);
//! assert_eq!(clusters[1], 1..3); // the (2,1)/(1,2) pair
//! # Ok::<(), homog2d::Error>(())
//! ```
//!
//! # The experiment pipeline
//!
//! The `homog2d` binary runs a full study from a TOML file:
//!
//! ```text
//! homog2d run presets/laminate_square.toml --strict --out out/laminate
//! ```
//!
//! It computes correctors, boundary-layer tails, the eigenvalue sweep over
//! the configured `eps` list, and the zeroth/first-order convergence
//! reports, writing CSV, JSON, and SVG plots to the output directory. With
//! `--strict` the process exits nonzero unless every fitted slope clears its
//! floor. See the `presets/` directory for ready-made configurations and the
//! book under `book/` for a guided tour of the underlying mathematics.

pub mod boundary_layer;
pub mod error;
pub mod config;
pub mod expansion;
pub mod fem;
pub mod field;
pub mod geometry;
pub mod microstructure;
pub mod report;
pub mod runner;
pub mod spectral;

pub use error::{Error, Result};
