//! Experiment configuration: TOML ingestion, validation, and round-trip
//! serialization for the `run` pipeline.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{build_polygon_with, PolygonDomain};
use crate::microstructure::PeriodicTensor;

/// Coefficient tensor source: a builtin preset or a tabulated CSV file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorConfig {
    /// Builtin preset name (`identity`, `laminate`, `checkerboard_smooth`,
    /// `laminate_block2`). Exactly one of `preset` / `csv` must be set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    /// Path of a tabulated tensor CSV (`alpha,beta,i,j,y1,y2,value`),
    /// relative to the config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv: Option<String>,
    /// Number of vector components `N`.
    #[serde(default = "one")]
    pub components: usize,
}

fn one() -> usize {
    1
}

/// Convex polygonal domain: vertices in counter-clockwise order, with
/// optional exact integer normals `(p, q)` per edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainConfig {
    pub vertices: Vec<[f64; 2]>,
    /// Exact normals, one entry per edge; `[0, 0]` marks "classify
    /// automatically".
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exact_normals: Option<Vec<[i64; 2]>>,
}

/// The epsilon sweep and the homogenized modes it targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    /// Strictly decreasing positive values.
    pub epsilon: Vec<f64>,
    /// Unit-square modes `(p, q)` of the expansion study.
    pub modes: Vec<[usize; 2]>,
    /// Accept meshes coarser than the `h <= eps_min / 4` policy.
    #[serde(default)]
    pub allow_coarse_mesh: bool,
}

/// Grid resolutions of the pipeline stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResolutionConfig {
    /// Spectral cell grid (points per period on the torus).
    pub cell_grid: usize,
    /// Fine-mesh pitches per period for the Richardson pair of the
    /// eigenvalue study; both must be multiples of 4.
    pub mesh_ratios: [usize; 2],
    /// Lateral resolution of the boundary-layer strip.
    pub strip_points_per_period: usize,
    /// Strip height in lateral periods.
    pub strip_height_periods: f64,
}

/// Solver tolerances and acceptance floors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToleranceConfig {
    pub solver_rtol: f64,
    pub eigen_tol: f64,
    pub cluster_rel_tol: f64,
    pub slope_floor_zeroth: f64,
    pub slope_floor_first: f64,
}

impl Default for ToleranceConfig {
    fn default() -> Self {
        Self {
            solver_rtol: 1e-11,
            eigen_tol: 1e-8,
            cluster_rel_tol: 1e-6,
            slope_floor_zeroth: 0.9,
            slope_floor_first: 1.0,
        }
    }
}

/// Output location and the deterministic seed used for any randomized probe
/// vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub directory: String,
    #[serde(default)]
    pub seed: u64,
}

/// A full experiment definition. All lengths are dimensionless on the
/// unit-scaled domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub tensor: TensorConfig,
    pub domain: DomainConfig,
    pub sweep: SweepConfig,
    pub resolution: ResolutionConfig,
    #[serde(default)]
    pub tolerances: ToleranceConfig,
    pub output: OutputConfig,
}

impl ExperimentConfig {
    /// Parse and validate a TOML config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::ConfigParse {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let cfg: Self = toml::from_str(&text).map_err(|e| Error::ConfigParse {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        cfg.validate().map_err(|e| Error::ConfigParse {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Ok(cfg)
    }

    /// Check the structural invariants (decreasing epsilons, mesh policy,
    /// tensor source well-formed).
    pub fn validate(&self) -> Result<()> {
        let invalid = |message: String| Error::ConfigParse {
            path: String::new(),
            message,
        };
        match (&self.tensor.preset, &self.tensor.csv) {
            (Some(_), Some(_)) => {
                return Err(invalid("tensor: set either `preset` or `csv`, not both".into()))
            }
            (None, None) => return Err(invalid("tensor: one of `preset` / `csv` required".into())),
            _ => {}
        }
        if self.sweep.epsilon.is_empty() {
            return Err(invalid("sweep: empty epsilon list".into()));
        }
        for w in self.sweep.epsilon.windows(2) {
            if w[1] >= w[0] {
                return Err(invalid(format!(
                    "sweep: epsilon list must be strictly decreasing, got {} then {}",
                    w[0], w[1]
                )));
            }
        }
        if *self.sweep.epsilon.last().unwrap() <= 0.0 {
            return Err(invalid("sweep: epsilons must be positive".into()));
        }
        let min_ratio = self.resolution.mesh_ratios.iter().copied().min().unwrap();
        if min_ratio < 4 && !self.sweep.allow_coarse_mesh {
            return Err(invalid(format!(
                "resolution: mesh ratio {min_ratio} violates the h <= eps/4 policy \
                 (set sweep.allow_coarse_mesh to override)"
            )));
        }
        for r in self.resolution.mesh_ratios {
            if r % 4 != 0 {
                return Err(invalid(format!("resolution: mesh ratio {r} must be a multiple of 4")));
            }
        }
        if self.resolution.mesh_ratios[1] <= self.resolution.mesh_ratios[0] {
            return Err(invalid("resolution: mesh ratios must increase".into()));
        }
        if self.domain.vertices.len() < 3 {
            return Err(invalid("domain: need at least 3 vertices".into()));
        }
        if let Some(n) = &self.domain.exact_normals {
            if n.len() != self.domain.vertices.len() {
                return Err(invalid(format!(
                    "domain: {} exact normals for {} edges",
                    n.len(),
                    self.domain.vertices.len()
                )));
            }
        }
        Ok(())
    }

    /// Build the validated coefficient tensor (CSV paths resolve relative to
    /// `base`, typically the config file's directory).
    pub fn build_tensor(&self, base: &Path) -> Result<PeriodicTensor> {
        match (&self.tensor.preset, &self.tensor.csv) {
            (Some(name), None) => PeriodicTensor::preset_by_name(name),
            (None, Some(rel)) => {
                let path = base.join(rel);
                if !path.exists() {
                    return Err(Error::ConfigParse {
                        path: path.display().to_string(),
                        message: "tensor CSV file not found".into(),
                    });
                }
                let samples = crate::microstructure::TensorSamples::from_csv(&path)?;
                crate::microstructure::validate_tensor(samples, 0.0)
            }
            _ => unreachable!("validated"),
        }
    }

    /// Build the polygonal domain.
    pub fn build_domain(&self) -> Result<PolygonDomain> {
        let exact: Option<Vec<Option<(i64, i64)>>> = self.domain.exact_normals.as_ref().map(|v| {
            v.iter()
                .map(|&[p, q]| if (p, q) == (0, 0) { None } else { Some((p, q)) })
                .collect()
        });
        build_polygon_with(&self.domain.vertices, exact.as_deref())
    }

    /// Lattice-commensurate decomposition `eps = 1/(m + 1/4)`, required by
    /// the expansion stage so the edge phases stay locked along the sweep.
    pub fn commensurate_m_list(&self) -> Result<Vec<usize>> {
        self.sweep
            .epsilon
            .iter()
            .map(|&eps| {
                let m = (1.0 / eps - 0.25).round();
                if m < 1.0 || (1.0 / (m + 0.25) - eps).abs() > 1e-12 {
                    Err(Error::ConfigParse {
                        path: String::new(),
                        message: format!(
                            "sweep: epsilon {eps} is not of the lattice-commensurate form 1/(m + 1/4)"
                        ),
                    })
                } else {
                    Ok(m as usize)
                }
            })
            .collect()
    }
}
