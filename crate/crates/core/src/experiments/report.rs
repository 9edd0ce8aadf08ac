//! Diagnostics, acceptance checks and the content-hash manifest of a run.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::nmpc::stage_cost;
use super::{at, paths, ClosedLoopSummary, ExperimentConfig, R2Table};
use crate::artifact;
use crate::error::{Error, Result};
use crate::kdpc::Regularization;
use crate::plants::Trajectory;
use crate::terminal::{InvarianceReport, TerminalIngredients};

/// Bound violations below this count as satisfied.
pub const CONSTRAINT_TOL: f64 = 1e-6;
/// Largest eigenvalue allowed in the terminal decrease condition.
pub const LYAPUNOV_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TerminalDiagnostics {
    pub rows: usize,
    pub closed_loop_radius: f64,
    pub lyapunov_max_eig: f64,
    pub dare_residual: f64,
    pub iterations: usize,
    pub ellipsoidal: bool,
    pub check: InvarianceReport,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClosedLoopDiagnostics {
    pub steps: usize,
    pub infeasible: usize,
    pub fallback: usize,
    pub refined: usize,
    /// Largest constraint violation of the shifted candidate over all steps.
    pub max_candidate_violation: f64,
    /// Steps without a candidate check (the first step).
    pub unchecked_candidates: usize,
    pub max_terminal_violation: f64,
    /// Largest `r_k / (1 + |V_k|)` of the value-decrease residual.
    pub max_decrease_residual: f64,
    pub final_y_abs: f64,
    pub max_e: f64,
    pub median_e: f64,
    /// Largest ‖e‖ over the second half of the run.
    pub tail_max_e: f64,
    pub xi_min: f64,
    pub xi_max: f64,
    /// First step with an active input bound.
    pub first_saturated: Option<usize>,
    pub last_saturated: Option<usize>,
    /// Largest ξ after the last step with an active input bound.
    pub xi_max_after_saturation: f64,
    pub max_interpolation_error: f64,
    pub kdpc_cost: f64,
    pub nmpc_cost: Option<f64>,
    pub cost_ratio: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub name: String,
    pub seed: u64,
    pub r2: Option<R2Table>,
    /// Smallest R² of the prediction form used by the controller.
    pub r2_min: Option<f64>,
    pub terminal: Option<TerminalDiagnostics>,
    /// All counters stay zero when no closed-loop run is present.
    pub closed_loop: ClosedLoopDiagnostics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub diagnostics: Diagnostics,
    pub checks: Vec<AcceptanceCheck>,
    pub all_passed: bool,
}

fn read_if_exists<T>(path: &Path, read: impl FnOnce(&Path) -> Result<T>) -> Result<Option<T>> {
    if path.exists() {
        read(path).map(Some)
    } else {
        Ok(None)
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Closed-loop figures from the persisted summary and trajectories.
pub fn closed_loop_diagnostics(
    cfg: &ExperimentConfig,
    summary: &ClosedLoopSummary,
    kdpc: &Trajectory,
    nmpc: Option<&Trajectory>,
) -> Result<ClosedLoopDiagnostics> {
    let recs = &summary.records;
    let mut d = ClosedLoopDiagnostics { steps: recs.len(), ..Default::default() };
    d.infeasible = recs.iter().filter(|r| !r.feasible).count();
    d.fallback = recs.iter().filter(|r| r.fallback).count();
    d.refined = recs.iter().filter(|r| r.refined).count();
    d.unchecked_candidates = recs.iter().filter(|r| r.candidate_violation.is_none()).count();
    d.max_candidate_violation = recs.iter().filter_map(|r| r.candidate_violation).fold(0.0, f64::max);
    d.max_terminal_violation = recs.iter().map(|r| r.terminal_violation).fold(0.0, f64::max);
    d.max_decrease_residual = recs
        .windows(2)
        .map(|w| {
            let sigma = match summary.regularization {
                Regularization::LegacyXi => summary.lambda,
                _ => summary.lambda * w[1].e_norm * w[1].e_norm,
            };
            let r = w[1].value - w[0].value + summary.lambda_min_q * w[0].z0_norm * w[0].z0_norm - sigma;
            r / (1.0 + w[0].value.abs())
        })
        .fold(f64::NEG_INFINITY, f64::max);
    if recs.len() < 2 {
        d.max_decrease_residual = 0.0;
    }
    d.final_y_abs = kdpc.y.last().map(|y| y.amax()).unwrap_or(0.0);
    let e: Vec<f64> = recs.iter().map(|r| r.e_norm).collect();
    d.max_e = e.iter().cloned().fold(0.0, f64::max);
    d.median_e = median(e.clone());
    d.tail_max_e = e[e.len() / 2..].iter().cloned().fold(0.0, f64::max);
    d.xi_min = recs.iter().map(|r| r.xi).fold(f64::INFINITY, f64::min);
    d.xi_max = recs.iter().map(|r| r.xi).fold(f64::NEG_INFINITY, f64::max);
    if recs.is_empty() {
        d.xi_min = 0.0;
        d.xi_max = 0.0;
    }
    let saturated = |k: usize| {
        kdpc.u.get(k).is_some_and(|u| {
            u.iter().enumerate().any(|(i, &v)| {
                let (lo, hi) = (summary.u_min[i], summary.u_max[i]);
                v <= lo + CONSTRAINT_TOL * (1.0 + lo.abs()) || v >= hi - CONSTRAINT_TOL * (1.0 + hi.abs())
            })
        })
    };
    let sat: Vec<usize> = (0..recs.len()).filter(|&k| saturated(k)).collect();
    d.first_saturated = sat.first().copied();
    d.last_saturated = sat.last().copied();
    let after = d.last_saturated.map(|k| k + 1).unwrap_or(0);
    d.xi_max_after_saturation = recs.iter().skip(after).map(|r| r.xi).fold(0.0, f64::max);
    d.max_interpolation_error = recs.iter().map(|r| r.interpolation_error).fold(0.0, f64::max);

    let n = cfg.plant.build()?.state_dim();
    let q = DMatrix::identity(n, n) * cfg.nmpc.q_scale;
    let r = cfg.controller.r_matrix()?;
    let cost = |t: &Trajectory| -> Result<f64> {
        let x = t.x.as_ref().ok_or_else(|| Error::InvalidArgument("closed-loop trajectory has no states".into()))?;
        Ok(stage_cost(x, &t.u, &q, &r))
    };
    d.kdpc_cost = cost(kdpc)?;
    if let Some(t) = nmpc {
        let c = cost(t)?;
        d.nmpc_cost = Some(c);
        d.cost_ratio = Some(d.kdpc_cost / c.max(f64::MIN_POSITIVE));
    }
    Ok(d)
}

/// Collects whatever diagnostics the artifacts in `out` allow.
pub fn diagnostics(cfg: &ExperimentConfig, out: &Path) -> Result<Diagnostics> {
    let r2 = read_if_exists(&at(out, paths::R2), |p| {
        let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        R2Table::from_csv(&text).map_err(|e| Error::format(p, e))
    })?;
    let r2_min = r2
        .as_ref()
        .map(|t| t.for_form(cfg.predictor.form).iter().cloned().fold(f64::INFINITY, f64::min));
    let terminal = match (
        read_if_exists(&at(out, paths::TERMINAL), TerminalIngredients::load)?,
        read_if_exists(&at(out, paths::TERMINAL_CHECK), artifact::read_json::<InvarianceReport>)?,
    ) {
        (Some(t), Some(check)) => Some(TerminalDiagnostics {
            rows: t.set.rows(),
            closed_loop_radius: t.closed_loop_radius,
            lyapunov_max_eig: t.lyapunov_max_eig,
            dare_residual: t.dare_residual,
            iterations: t.iterations,
            ellipsoidal: t.level.is_some(),
            check,
        }),
        _ => None,
    };
    let summary = read_if_exists(&at(out, paths::KDPC_SUMMARY), artifact::read_json::<ClosedLoopSummary>)?;
    let kdpc = read_if_exists(&at(out, paths::KDPC_TRAJECTORY), Trajectory::read_csv)?;
    let nmpc = read_if_exists(&at(out, paths::NMPC_TRAJECTORY), Trajectory::read_csv)?;
    let closed_loop = match (summary, kdpc) {
        (Some(s), Some(t)) => closed_loop_diagnostics(cfg, &s, &t, nmpc.as_ref())?,
        _ => ClosedLoopDiagnostics::default(),
    };
    Ok(Diagnostics { name: cfg.name.clone(), seed: cfg.seed, r2, r2_min, terminal, closed_loop })
}

fn check(name: &str, passed: bool, detail: String) -> AcceptanceCheck {
    AcceptanceCheck { name: name.to_string(), passed, detail }
}

fn missing(name: &str, what: &str) -> AcceptanceCheck {
    check(name, false, format!("{what} not available"))
}

/// Evaluates the thresholds configured in `[acceptance]`.
pub fn acceptance_checks(cfg: &ExperimentConfig, d: &Diagnostics) -> Vec<AcceptanceCheck> {
    let a = &cfg.acceptance;
    let mut out = Vec::new();
    if let Some(min) = a.r2_min {
        out.push(match d.r2_min {
            Some(v) => check("r2_min", v >= min, format!("min R² {v:.6} (threshold {min})")),
            None => missing("r2_min", "R² table"),
        });
    }
    if a.terminal_certificate {
        out.push(match &d.terminal {
            Some(t) => check(
                "terminal_certificate",
                t.lyapunov_max_eig <= LYAPUNOV_TOL && t.closed_loop_radius < 1.0 && t.check.total() == 0,
                format!(
                    "max eig {:.3e}, spectral radius {:.6}, {} violations in {} samples",
                    t.lyapunov_max_eig,
                    t.closed_loop_radius,
                    t.check.total(),
                    t.check.samples
                ),
            ),
            None => missing("terminal_certificate", "terminal ingredients"),
        });
    }
    let cl = Some(&d.closed_loop).filter(|c| c.steps > 0);
    let mut cl_check = |name: &str, f: &dyn Fn(&ClosedLoopDiagnostics) -> (bool, String)| {
        out.push(match cl {
            Some(c) => {
                let (ok, detail) = f(c);
                check(name, ok, detail)
            }
            None => missing(name, "closed-loop run"),
        })
    };
    if a.recursive_feasibility {
        cl_check("recursive_feasibility", &|c| {
            let ok = c.infeasible == 0
                && c.fallback == 0
                && c.unchecked_candidates <= 1
                && c.max_candidate_violation <= CONSTRAINT_TOL;
            (
                ok,
                format!(
                    "{} infeasible, {} fallback, {} refined, candidate violation {:.3e}",
                    c.infeasible, c.fallback, c.refined, c.max_candidate_violation
                ),
            )
        });
    }
    if let Some(tol) = a.decrease_tol {
        cl_check("value_decrease", &|c| {
            (c.max_decrease_residual <= tol, format!("max normalized residual {:.3e} (threshold {tol})", c.max_decrease_residual))
        });
    }
    if let Some(max) = a.final_y_max {
        cl_check("final_output", &|c| (c.final_y_abs <= max, format!("final |y| {:.3e} (threshold {max})", c.final_y_abs)));
    }
    if let Some(within) = a.saturation_within {
        cl_check("early_saturation", &|c| {
            let ok = c.first_saturated.is_some_and(|k| k < within);
            (ok, format!("first active input bound at {:?} (within {within})", c.first_saturated))
        });
    }
    if let Some(max) = a.xi_after_saturation_max {
        cl_check("xi_after_saturation", &|c| {
            (
                c.xi_max_after_saturation <= max,
                format!("max ξ after step {:?} is {:.3e} (threshold {max})", c.last_saturated, c.xi_max_after_saturation),
            )
        });
    }
    if let Some(max) = a.e_max {
        cl_check("model_error_max", &|c| (c.max_e <= max, format!("max ‖e‖ {:.3e} (threshold {max})", c.max_e)));
    }
    if let Some(max) = a.e_median_max {
        cl_check("model_error_median", &|c| (c.median_e <= max, format!("median ‖e‖ {:.3e} (threshold {max})", c.median_e)));
    }
    if let Some(max) = a.nmpc_cost_ratio_max {
        cl_check("nmpc_cost_ratio", &|c| match c.cost_ratio {
            Some(r) => (r <= max, format!("KDPC/NMPC cost {r:.4} (threshold {max})")),
            None => (false, "NMPC run not available".into()),
        });
    }
    out
}

fn relative_name(root: &Path, path: &Path) -> String {
    let rel = path.strip_prefix(root).unwrap_or(path);
    rel.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect::<Vec<_>>().join("/")
}

fn collect_files(dir: &Path, files: &mut Vec<PathBuf>) -> Result<()> {
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            collect_files(&path, files)?;
        } else {
            files.push(path);
        }
    }
    Ok(())
}

/// SHA-256 of every file under `out` except the manifest itself, sorted by path.
pub fn content_manifest(out: &Path) -> Result<Vec<ManifestEntry>> {
    let mut files = Vec::new();
    collect_files(out, &mut files)?;
    let mut entries = Vec::new();
    for f in files {
        let path = relative_name(out, &f);
        if path == paths::MANIFEST {
            continue;
        }
        let bytes = std::fs::read(&f).map_err(|e| Error::io(&f, e))?;
        entries.push(ManifestEntry { path, bytes: bytes.len() as u64, sha256: hex::encode(Sha256::digest(&bytes)) });
    }
    entries.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(entries)
}

/// Writes the diagnostics, the acceptance results and the manifest.
pub fn emit_report(cfg: &ExperimentConfig, out: &Path) -> Result<RunReport> {
    let stage = |e: Error| e.in_stage("report");
    let diagnostics = diagnostics(cfg, out).map_err(stage)?;
    let checks = acceptance_checks(cfg, &diagnostics);
    let all_passed = checks.iter().all(|c| c.passed);
    artifact::write_json(&at(out, paths::DIAGNOSTICS), &diagnostics).map_err(stage)?;
    artifact::write_json(&at(out, paths::ACCEPTANCE), &checks).map_err(stage)?;
    let manifest = content_manifest(out).map_err(stage)?;
    artifact::write_json(&at(out, paths::MANIFEST), &manifest).map_err(stage)?;
    for c in &checks {
        log::info!("report: {} {} ({})", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    Ok(RunReport { diagnostics, checks, all_passed })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(median(vec![]), 0.0);
    }

    #[test]
    fn empty_run_has_zeroed_counters() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::from_toml_str(super::super::config::tests::MINIMAL).unwrap();
        let d = diagnostics(&cfg, dir.path()).unwrap();
        assert_eq!(d.closed_loop, ClosedLoopDiagnostics::default());
        assert!(d.r2.is_none() && d.terminal.is_none());
        let rep = emit_report(&cfg, dir.path()).unwrap();
        assert!(rep.checks.is_empty() && rep.all_passed);
        assert!(dir.path().join(paths::MANIFEST).exists());
    }

    #[test]
    fn manifest_is_sorted_and_skips_itself() {
        let dir = tempfile::tempdir().unwrap();
        artifact::write_text(&dir.path().join("b.txt"), "b").unwrap();
        artifact::write_text(&dir.path().join("a/z.txt"), "z").unwrap();
        artifact::write_text(&dir.path().join(paths::MANIFEST), "[]").unwrap();
        let m = content_manifest(dir.path()).unwrap();
        let names: Vec<&str> = m.iter().map(|e| e.path.as_str()).collect();
        assert_eq!(names, ["a/z.txt", "b.txt"]);
        // sha256("b")
        assert_eq!(m[1].sha256, "3e23e8160039594a33894f6564e1b1348bbd7a0088d42c4acb73eeaed59c009d");
        assert_eq!(m[1].bytes, 1);
    }
}
