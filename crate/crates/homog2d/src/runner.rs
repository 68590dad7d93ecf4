//! Experiment orchestration: drive the cell, tails, spectrum and expansion
//! stages from an [`ExperimentConfig`] and emit deterministic artifacts.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::boundary_layer::{extract_tail, solve_strip, StripOptions};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::expansion::{eigen_expansion_study, EigenStudyOptions, ModeStudy};
use crate::fem::{assemble, triangulate, Coefficient, SolveOptions, DEFAULT_NODE_BUDGET};
use crate::geometry::SlopeKind;
use crate::microstructure::{CellCorrectors, CellSolveOptions};
use crate::report::{emit_plotdata, fmt_f64, report_json, sanitize_name, write_report_csv};
use crate::spectral::{solve_eigenpairs, EigenOptions};

/// Pipeline stages selectable with `--only`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Cell,
    Tails,
    Spectrum,
    Expansion,
}

impl std::str::FromStr for Stage {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "cell" => Ok(Self::Cell),
            "tails" => Ok(Self::Tails),
            "spectrum" => Ok(Self::Spectrum),
            "expansion" => Ok(Self::Expansion),
            other => Err(format!(
                "unknown stage '{other}' (expected cell, tails, spectrum or expansion)"
            )),
        }
    }
}

/// Runner options from the command line.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Nonzero exit when any pass flag fails.
    pub strict: bool,
    /// Worker threads (default: rayon's choice).
    pub jobs: Option<usize>,
    /// Output directory override (beats the `HOMOG2D_OUT` environment
    /// variable, which beats the config).
    pub out: Option<PathBuf>,
    /// Run a single stage instead of the full pipeline.
    pub only: Option<Stage>,
}

/// Outcome of a run: conjunction of all pass flags plus the artifacts root
/// and the human-readable log.
#[derive(Debug)]
pub struct RunSummary {
    pub pass: bool,
    pub out_dir: PathBuf,
    pub log: String,
}

fn stage_enabled(opts: &RunOptions, stage: Stage) -> bool {
    opts.only.map(|s| s == stage).unwrap_or(true)
}

/// Execute a config file. Emits artifacts under the resolved output
/// directory and returns the aggregate pass flag; hard errors propagate.
pub fn run(config_path: &Path, opts: &RunOptions) -> Result<RunSummary> {
    if let Some(n) = opts.jobs {
        // Best effort: the global pool can only be installed once per process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let cfg = ExperimentConfig::load(config_path)?;
    let base = config_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let out_dir = opts
        .out
        .clone()
        .or_else(|| std::env::var_os("HOMOG2D_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(&cfg.output.directory));
    std::fs::create_dir_all(&out_dir)?;

    let mut log = String::new();
    let say = |line: String, log: &mut String| {
        log.push_str(&line);
        log.push('\n');
    };
    say(format!("config: {}", config_path.display()), &mut log);
    say(format!("output: {}", out_dir.display()), &mut log);
    say(format!("seed: {}", cfg.output.seed), &mut log);

    let tensor = cfg.build_tensor(&base)?;
    if tensor.ncomp() != cfg.tensor.components {
        return Err(Error::ConfigParse {
            path: config_path.display().to_string(),
            message: format!(
                "tensor has {} components, config declares {}",
                tensor.ncomp(),
                cfg.tensor.components
            ),
        });
    }
    let domain = cfg.build_domain()?;
    let solve = SolveOptions {
        rtol: cfg.tolerances.solver_rtol,
        ..SolveOptions::default()
    };
    let eigen = EigenOptions {
        tolerance: cfg.tolerances.eigen_tol,
        ..EigenOptions::default()
    };

    // The cell correctors feed every stage; compute them once.
    let correctors = CellCorrectors::compute(
        &tensor,
        cfg.resolution.cell_grid,
        CellSolveOptions::default(),
    )?;
    let ncomp = tensor.ncomp();
    let a0 = &correctors.homogenized;
    say(
        format!(
            "cell: A0 diag = [{}, {}], symmetry defect {:.3e}",
            fmt_f64(a0.entry(0, 0, 0, 0)),
            fmt_f64(a0.entry(1, 1, 0, 0)),
            a0.symmetry_defect()
        ),
        &mut log,
    );

    let mut all_pass = true;

    if stage_enabled(opts, Stage::Cell) {
        let dir = out_dir.join("cell");
        std::fs::create_dir_all(&dir)?;
        // A0 table.
        let mut csv = String::from("alpha,beta,i,j,value\n");
        for alpha in 0..2 {
            for beta in 0..2 {
                for i in 0..ncomp {
                    for j in 0..ncomp {
                        let _ = writeln!(
                            csv,
                            "{alpha},{beta},{i},{j},{}",
                            fmt_f64(a0.entry(alpha, beta, i, j))
                        );
                    }
                }
            }
        }
        std::fs::write(dir.join("a0.csv"), csv)?;
        // Corrector fields on the cell grid.
        let n = correctors.resolution;
        let mut csv = String::from("node_id,x,y,component,value\n");
        for gamma in 0..2 {
            for i in 0..ncomp {
                for c in 0..ncomp {
                    let comp_id = gamma * ncomp * ncomp + i * ncomp + c;
                    let field = correctors.chi[gamma].comp(i, c);
                    for jy in 0..n {
                        for jx in 0..n {
                            let _ = writeln!(
                                csv,
                                "{},{},{},{comp_id},{}",
                                jy * n + jx,
                                fmt_f64(jx as f64 / n as f64),
                                fmt_f64(jy as f64 / n as f64),
                                fmt_f64(field.at(jx as isize, jy as isize))
                            );
                        }
                    }
                }
            }
        }
        std::fs::write(dir.join("chi.csv"), csv)?;
        let summary = serde_json::json!({
            "cell_grid": n,
            "components": ncomp,
            "a0": (0..2).map(|al| (0..2).map(|be| (0..ncomp).map(|i| (0..ncomp).map(|j| a0.entry(al, be, i, j)).collect::<Vec<_>>()).collect::<Vec<_>>()).collect::<Vec<_>>()).collect::<Vec<_>>(),
            "symmetry_defect": a0.symmetry_defect(),
            "ellipticity": tensor.ellipticity_constant(),
        });
        std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
        say("cell: wrote a0.csv, chi.csv, summary.json".into(), &mut log);
    }

    if stage_enabled(opts, Stage::Tails) {
        let dir = out_dir.join("tails");
        std::fs::create_dir_all(&dir)?;
        let mut tail_summaries = Vec::new();
        for (k, edge) in domain.edges.iter().enumerate() {
            if !matches!(edge.classification.kind, SlopeKind::Rational { .. }) {
                say(
                    format!("tails: edge {k} is not rational, skipped by the strip stage"),
                    &mut log,
                );
                continue;
            }
            // One strip per distinct lattice phase in the sweep.
            let mut phases: Vec<f64> = cfg
                .sweep
                .epsilon
                .iter()
                .map(|&eps| (edge.offset / eps).rem_euclid(1.0))
                .collect();
            phases.sort_by(f64::total_cmp);
            phases.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
            for phase in phases {
                for alpha in 0..2 {
                    let strip = StripOptions {
                        points_per_period: cfg.resolution.strip_points_per_period,
                        height_periods: cfg.resolution.strip_height_periods,
                        phase,
                        solve,
                        ..StripOptions::default()
                    };
                    let sol = solve_strip(&tensor, &correctors.chi[alpha], edge, strip)?;
                    let entry = extract_tail(&sol, (0.6, 0.9))?;
                    let tag = format!("edge{k}_alpha{alpha}_phase{}", sanitize_name(&format!("{phase:.6}")));
                    // Strip field: z1,z2,component,value.
                    let mut csv = String::from("z1,z2,component,value\n");
                    for (col, u) in sol.columns.iter().enumerate() {
                        for (v, z) in sol.mesh.nodes.iter().enumerate() {
                            for i in 0..sol.ncomp {
                                let _ = writeln!(
                                    csv,
                                    "{},{},{},{}",
                                    fmt_f64(z[0]),
                                    fmt_f64(z[1]),
                                    col * sol.ncomp + i,
                                    fmt_f64(u[v * sol.ncomp + i])
                                );
                            }
                        }
                    }
                    std::fs::write(dir.join(format!("{tag}_field.csv")), csv)?;
                    // Decay profile: z2,sup_deviation.
                    let mut csv = String::from("z2,sup_deviation\n");
                    for (z, s) in entry.fit.heights.iter().zip(&entry.fit.sup_deviation) {
                        let _ = writeln!(csv, "{},{}", fmt_f64(*z), fmt_f64(*s));
                    }
                    std::fs::write(dir.join(format!("{tag}_decay.csv")), csv)?;
                    tail_summaries.push(serde_json::json!({
                        "edge": k,
                        "alpha": alpha,
                        "phase": phase,
                        "tail": (0..ncomp).map(|i| (0..ncomp).map(|c| entry.tail[(i, c)]).collect::<Vec<_>>()).collect::<Vec<_>>(),
                        "decay_rate": entry.fit.rate,
                        "fit_goodness": entry.fit.goodness,
                    }));
                }
            }
        }
        std::fs::write(
            dir.join("tails.json"),
            serde_json::to_string_pretty(&serde_json::Value::Array(tail_summaries))?,
        )?;
        say("tails: wrote strip fields, decay profiles, tails.json".into(), &mut log);
    }

    if stage_enabled(opts, Stage::Spectrum) {
        let dir = out_dir.join("spectrum");
        std::fs::create_dir_all(&dir)?;
        let m_list = cfg.commensurate_m_list()?;
        let r = cfg.resolution.mesh_ratios[0];
        let count = cfg
            .sweep
            .modes
            .iter()
            .map(|m| m[0] * m[0] + m[1] * m[1])
            .max()
            .unwrap_or(2)
            .min(8);
        let mut csv = String::from("epsilon,k,lambda,residual\n");
        for (&eps, &m) in cfg.sweep.epsilon.iter().zip(&m_list) {
            let n = r * m + r / 4;
            let mesh = triangulate(&domain, 1.0 / n as f64, DEFAULT_NODE_BUDGET)?;
            let sys = assemble(&mesh, &Coefficient::Oscillating { tensor: &tensor, eps }, 2, None);
            let sol = solve_eigenpairs(&sys.kff, &sys.mff, count, eigen)?;
            for (kk, (lam, v)) in sol.values.iter().zip(&sol.vectors).enumerate() {
                let kv = sys.kff.matvec_alloc(v);
                let mv = sys.mff.matvec_alloc(v);
                let res: f64 = kv
                    .iter()
                    .zip(&mv)
                    .map(|(a, b)| (a - lam * b) * (a - lam * b))
                    .sum::<f64>()
                    .sqrt();
                let _ = writeln!(csv, "{},{kk},{},{}", fmt_f64(eps), fmt_f64(*lam), fmt_f64(res));
            }
        }
        std::fs::write(dir.join("spectrum.csv"), csv)?;
        say("spectrum: wrote spectrum.csv".into(), &mut log);
    }

    if stage_enabled(opts, Stage::Expansion) {
        let dir = out_dir.join("expansion");
        std::fs::create_dir_all(&dir)?;
        let m_list = cfg.commensurate_m_list()?;
        let study_opts = EigenStudyOptions {
            m_list,
            mesh_ratios: (cfg.resolution.mesh_ratios[0], cfg.resolution.mesh_ratios[1]),
            cell_resolution: cfg.resolution.cell_grid,
            strip: StripOptions {
                points_per_period: cfg.resolution.strip_points_per_period,
                height_periods: cfg.resolution.strip_height_periods,
                solve,
                ..StripOptions::default()
            },
            modes: cfg.sweep.modes.iter().map(|m| (m[0], m[1])).collect(),
            eigen,
            solve,
        };
        let studies = eigen_expansion_study(&tensor, &study_opts)?;
        let mut summary = Vec::new();
        for study in &studies {
            let pass = mode_pass(study, cfg.tolerances.eigen_tol);
            all_pass &= pass;
            for rep in [&study.zeroth, &study.first] {
                write_report_csv(rep, &dir.join(format!("{}.csv", sanitize_name(&rep.quantity))))?;
                std::fs::write(
                    dir.join(format!("{}.json", sanitize_name(&rep.quantity))),
                    serde_json::to_string_pretty(&report_json(rep))?,
                )?;
                emit_plotdata(rep, &dir)?;
            }
            say(
                format!(
                    "expansion: mode {:?} zeroth slope {:.4}, first slope {:.4}, pass {pass}",
                    study.mode, study.zeroth.slope, study.first.slope
                ),
                &mut log,
            );
            summary.push(serde_json::json!({
                "mode": [study.mode.0, study.mode.1],
                "multiplicity": study.multiplicity,
                "zeroth": report_json(&study.zeroth),
                "first": report_json(&study.first),
                "pass": pass,
            }));
        }
        std::fs::write(
            dir.join("summary.json"),
            serde_json::to_string_pretty(&serde_json::Value::Array(summary))?,
        )?;
    }

    say(format!("pass: {all_pass}"), &mut log);
    std::fs::write(out_dir.join("run.log"), &log)?;
    Ok(RunSummary {
        pass: all_pass,
        out_dir,
        log,
    })
}

/// A mode passes when the fitted slopes clear their floors with first-order
/// dominance, or trivially when the whole sweep sits at solver noise (the
/// constant-coefficient case, where every gap and residual is zero up to
/// eigensolver tolerance).
pub fn mode_pass(study: &ModeStudy, eigen_tol: f64) -> bool {
    let noise = study
        .rows
        .iter()
        .all(|r| {
            let thresh = 10.0 * eigen_tol * r.lambda0.abs();
            r.gap <= thresh && r.residual <= thresh
        });
    noise
        || (study.zeroth.pass && study.first.pass && study.first.slope > study.zeroth.slope)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_parsing() {
        assert_eq!("cell".parse::<Stage>().unwrap(), Stage::Cell);
        assert_eq!("expansion".parse::<Stage>().unwrap(), Stage::Expansion);
        assert!("bogus".parse::<Stage>().is_err());
    }

    #[test]
    fn missing_config_is_config_parse() {
        let err = run(Path::new("/nonexistent/config.toml"), &RunOptions::default()).unwrap_err();
        assert!(matches!(err, Error::ConfigParse { .. }));
    }
}
