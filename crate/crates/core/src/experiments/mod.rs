//! End-to-end experiments: data generation, training, predictor fitting,
//! terminal ingredients, closed-loop runs, the NMPC comparator and reports.
//!
//! Every stage reads its inputs from and writes its artifacts to one output
//! directory, so stages can run separately (see the CLI) or in sequence via
//! [`run_pipeline`].

pub mod config;
pub mod nmpc;
pub mod report;

use std::path::{Path, PathBuf};

use log::info;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

pub use config::*;
pub use nmpc::{nmpc_baseline, stage_cost, terminal_weight, NmpcConfig, NmpcRun};
pub use report::{emit_report, AcceptanceCheck, ClosedLoopDiagnostics, Diagnostics, ManifestEntry, RunReport};

use crate::artifact;
use crate::datapipe::{build_hankels, lifted_len, past_windows, split_train_test, DatasetManifest, HankelSet};
use crate::error::{Error, Result};
use crate::kdpc::{run_closed_loop, write_step_log, ClosedLoop, Kdpc, KdpcConfig, StepResult};
use crate::multisine::multisine;
use crate::observables::{fit_heads, r_squared_table, train_multistep, ObservableMap, TrainingManifest};
use crate::plants::{fmt_f64, simulate, zero_input_history, PlantModel, Trajectory};
use crate::predictor::{fit_predictor, MultiStepPredictor, PredictionForm};
use crate::terminal::{compute_terminal, estimate_xz, BoxSet, InvarianceReport, TerminalIngredients, TerminalOptions};

/// Artifact locations relative to the output directory.
pub mod paths {
    pub const CONFIG: &str = "config.toml";
    pub const TRAJECTORY: &str = "data/trajectory.csv";
    pub const TRAIN: &str = "data/train.csv";
    pub const TEST: &str = "data/test.csv";
    pub const HANKEL_DIR: &str = "data/hankel";
    pub const DATASET_MANIFEST: &str = "data/manifest.json";
    pub const MODEL: &str = "model/observables.json";
    pub const LOSS: &str = "model/loss.csv";
    pub const LIFTED_HANKEL_DIR: &str = "model/hankel_lifted";
    pub const PREDICTOR: &str = "model/predictor.json";
    pub const TERMINAL: &str = "model/terminal.json";
    pub const TERMINAL_CHECK: &str = "model/terminal_check.json";
    pub const KDPC_TRAJECTORY: &str = "closed_loop/kdpc_trajectory.csv";
    pub const KDPC_LOG: &str = "closed_loop/kdpc_log.csv";
    pub const KDPC_SUMMARY: &str = "closed_loop/kdpc_summary.json";
    pub const NMPC_TRAJECTORY: &str = "closed_loop/nmpc_trajectory.csv";
    pub const NMPC_COST: &str = "closed_loop/nmpc_cost.csv";
    pub const R2: &str = "report/r2.csv";
    pub const DIAGNOSTICS: &str = "report/diagnostics.json";
    pub const ACCEPTANCE: &str = "report/acceptance.json";
    pub const MANIFEST: &str = "report/manifest.json";
}

fn at(out: &Path, rel: &str) -> PathBuf {
    out.join(rel)
}

/// Identification data: excitation, plant run and train/test split.
pub fn generate_data(cfg: &ExperimentConfig, out: &Path) -> Result<DatasetManifest> {
    let stage = |e: Error| e.in_stage("generate-data");
    let plant = cfg.plant.build().map_err(stage)?;
    let spec = cfg.excitation.spec(cfg.seed);
    let signal = multisine(&spec).map_err(stage)?;
    let m = plant.input_dim();
    if m != 1 {
        return Err(stage(Error::Config("the multisine generator drives single-input plants only".into())));
    }
    let u: Vec<DVector<f64>> = signal.samples.iter().map(|&v| DVector::from_element(1, v)).collect();
    let x0 = cfg.data.initial_state(plant.state_dim()).map_err(stage)?;
    let traj = simulate(plant.as_ref(), &x0, &u).map_err(stage)?;
    let (train, test, split) = split_train_test(&traj.aligned(), cfg.data.train_fraction).map_err(stage)?;
    let h_train = build_hankels(&train, None, cfg.model.t_ini, cfg.model.horizon).map_err(stage)?;
    let h_test = build_hankels(&test, None, cfg.model.t_ini, cfg.model.horizon).map_err(stage)?;
    traj.write_csv(&at(out, paths::TRAJECTORY)).map_err(stage)?;
    train.write_csv(&at(out, paths::TRAIN)).map_err(stage)?;
    test.write_csv(&at(out, paths::TEST)).map_err(stage)?;
    h_train.export_csv(&at(out, paths::HANKEL_DIR)).map_err(stage)?;
    let manifest = DatasetManifest {
        t_ini: cfg.model.t_ini,
        horizon: cfg.model.horizon,
        samples: traj.len(),
        split_index: split,
        train_t: h_train.t,
        test_t: h_test.t,
        seed: cfg.seed,
    };
    artifact::write_json(&at(out, paths::DATASET_MANIFEST), &manifest).map_err(stage)?;
    info!("generate-data: {} samples, {} train / {} test columns", traj.len(), h_train.t, h_test.t);
    Ok(manifest)
}

/// Joint training of the observables and the multi-step heads.
pub fn train(cfg: &ExperimentConfig, out: &Path) -> Result<(ObservableMap, TrainingManifest)> {
    let stage = |e: Error| e.in_stage("train");
    let train = Trajectory::read_csv(&at(out, paths::TRAIN)).map_err(stage)?;
    let h = build_hankels(&train, None, cfg.model.t_ini, cfg.model.horizon).map_err(stage)?;
    let tc = cfg.training.to_train_config(cfg.seed);
    let (map, trained) = train_multistep(&h, &cfg.model.architecture(), &tc).map_err(stage)?;
    let manifest = tc.manifest(&trained);
    map.save(&at(out, paths::MODEL), Some(manifest.clone())).map_err(stage)?;
    let mut loss = String::from("epoch,loss\n");
    for (i, l) in trained.loss_history.iter().enumerate() {
        loss.push_str(&format!("{i},{}\n", fmt_f64(*l)));
    }
    artifact::write_text(&at(out, paths::LOSS), &loss).map_err(stage)?;
    info!("train: {} epochs, best loss {:.4e} at epoch {}", manifest.epochs_run, manifest.best_loss, manifest.best_epoch);
    Ok((map, manifest))
}

/// Lifted Hankel data of a trajectory under `map`.
pub fn lifted_hankels(map: &ObservableMap, traj: &Trajectory, t_ini: usize, horizon: usize) -> Result<HankelSet> {
    let plain = build_hankels(traj, None, t_ini, horizon)?;
    let past = past_windows(traj, t_ini, lifted_len(plain.t, horizon))?;
    let z = map.lift_columns(&past)?;
    let cols: Vec<DVector<f64>> = z.column_iter().map(|c| c.into_owned()).collect();
    build_hankels(traj, Some(&cols), t_ini, horizon)
}

/// Per-horizon test R² of the stage-1 heads and both predictor forms.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct R2Table {
    pub stage1: Vec<f64>,
    pub least_squares: Vec<f64>,
    pub structured: Vec<f64>,
}

impl R2Table {
    pub fn for_form(&self, form: PredictionForm) -> &[f64] {
        match form {
            PredictionForm::LeastSquares => &self.least_squares,
            PredictionForm::Structured => &self.structured,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("j,r2_stage1,r2_least_squares,r2_structured\n");
        for j in 0..self.least_squares.len() {
            let get = |v: &[f64]| v.get(j).map(|x| fmt_f64(*x)).unwrap_or_default();
            s.push_str(&format!("{},{},{},{}\n", j + 1, get(&self.stage1), get(&self.least_squares), get(&self.structured)));
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut t = R2Table::default();
        for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(Error::InvalidArgument(format!("R² row `{line}` must have 4 fields")));
            }
            let p = |s: &str| s.parse::<f64>().map_err(|e| Error::InvalidArgument(format!("R² value `{s}`: {e}")));
            t.stage1.push(p(f[1])?);
            t.least_squares.push(p(f[2])?);
            t.structured.push(p(f[3])?);
        }
        Ok(t)
    }
}

/// Least-squares predictor on the lifted training data, plus test R².
pub fn fit_predictor_stage(cfg: &ExperimentConfig, out: &Path) -> Result<(MultiStepPredictor, R2Table)> {
    let stage = |e: Error| e.in_stage("fit-predictor");
    let (map, _) = ObservableMap::load(&at(out, paths::MODEL)).map_err(stage)?;
    let train = Trajectory::read_csv(&at(out, paths::TRAIN)).map_err(stage)?;
    let test = Trajectory::read_csv(&at(out, paths::TEST)).map_err(stage)?;
    let (t_ini, n) = (cfg.model.t_ini, cfg.model.horizon);
    let h = lifted_hankels(&map, &train, t_ini, n).map_err(stage)?;
    let c = map
        .output_selector()
        .ok_or_else(|| stage(Error::Config("the controller needs a pass-through output in the lifted state".into())))?;
    let pred = fit_predictor(
        h.z_p.as_ref().expect("lifted"),
        h.z_f.as_ref().expect("lifted"),
        &h.u_f,
        &c,
        cfg.predictor.ridge_fallback,
    )
    .map_err(stage)?;
    h.export_csv(&at(out, paths::LIFTED_HANKEL_DIR)).map_err(stage)?;
    pred.save(&at(out, paths::PREDICTOR)).map_err(stage)?;

    let heads = fit_heads(&map, &build_hankels(&train, None, t_ini, n).map_err(stage)?).map_err(stage)?;
    let ht = build_hankels(&test, None, t_ini, n).map_err(stage)?;
    let zt = map.lift_columns(&ht.past()).map_err(stage)?;
    let p = map.p;
    let r2 = |y: &DMatrix<f64>| r_squared_table(&ht.y_f, y, p);
    let (psi_s, gamma_s) = pred.structured();
    let table = R2Table {
        stage1: r2(&heads.predict(&zt, &ht.u_f)).map_err(stage)?,
        least_squares: r2(&pred.outputs(&(&pred.psi * &zt + &pred.gamma * &ht.u_f))).map_err(stage)?,
        structured: r2(&pred.outputs(&(&psi_s * &zt + &gamma_s * &ht.u_f))).map_err(stage)?,
    };
    artifact::write_text(&at(out, paths::R2), &table.to_csv()).map_err(stage)?;
    info!(
        "fit-predictor: rank {}, residual {:.3e}, min test R² {:.4}",
        pred.rank.rank,
        pred.residual,
        table.for_form(cfg.predictor.form).iter().cloned().fold(f64::INFINITY, f64::min)
    );
    Ok((pred, table))
}

/// Output box for the lifted-state constraint estimate: configured, or the
/// range of the training outputs.
fn output_box(cfg: &ExperimentConfig, train: &Trajectory) -> Result<BoxSet> {
    if let (Some(lo), Some(hi)) = (&cfg.terminal.y_min, &cfg.terminal.y_max) {
        return BoxSet::new(lo.clone(), hi.clone());
    }
    let p = train.output_dim();
    let lo = (0..p).map(|i| train.y.iter().map(|y| y[i]).fold(f64::INFINITY, f64::min)).collect();
    let hi = (0..p).map(|i| train.y.iter().map(|y| y[i]).fold(f64::NEG_INFINITY, f64::max)).collect();
    BoxSet::new(lo, hi)
}

/// Terminal cost, gain, lifted-state box and invariant terminal set.
pub fn terminal_stage(cfg: &ExperimentConfig, out: &Path) -> Result<(TerminalIngredients, InvarianceReport)> {
    let stage = |e: Error| e.in_stage("terminal");
    let (map, _) = ObservableMap::load(&at(out, paths::MODEL)).map_err(stage)?;
    let pred = MultiStepPredictor::load(&at(out, paths::PREDICTOR)).map_err(stage)?;
    let train = Trajectory::read_csv(&at(out, paths::TRAIN)).map_err(stage)?;
    let u_box = cfg.controller.u_box().map_err(stage)?;
    let y_box = output_box(cfg, &train).map_err(stage)?;
    let tc = &cfg.terminal;
    let xz = estimate_xz(&map, &u_box, &y_box, tc.xz_samples, tc.xz_margin, cfg.seed).map_err(stage)?;
    let l = map.lifted_dim();
    let q = cfg.controller.q_matrix(l);
    let r = cfg.controller.r_matrix().map_err(stage)?;
    let opts = TerminalOptions {
        max_iterations: tc.max_iterations,
        max_exact_dim: tc.max_exact_dim,
        redundancy_tol: tc.redundancy_tol,
        gain_weight: tc.gain_weight,
    };
    let term = compute_terminal(&pred.a, &pred.b, &q, &r, &xz, &u_box, &opts).map_err(stage)?;
    let check = term.check_samples(tc.check_samples, cfg.seed, 1e-8);
    term.save(&at(out, paths::TERMINAL)).map_err(stage)?;
    artifact::write_json(&at(out, paths::TERMINAL_CHECK), &check).map_err(stage)?;
    info!(
        "terminal: {} rows, ρ(A+BK) = {:.4}, {} sample violations",
        term.set.rows(),
        term.closed_loop_radius,
        check.total()
    );
    Ok((term, check))
}

/// Builds the controller from persisted artifacts.
pub fn load_controller(cfg: &ExperimentConfig, out: &Path) -> Result<Kdpc> {
    let (map, _) = ObservableMap::load(&at(out, paths::MODEL))?;
    let pred = MultiStepPredictor::load(&at(out, paths::PREDICTOR))?;
    let term = TerminalIngredients::load(&at(out, paths::TERMINAL))?;
    let c = &cfg.controller;
    let mut kc = KdpcConfig::from_terminal(&term, c.lambda, cfg.model.horizon);
    kc.regularization = c.regularization;
    kc.form = cfg.predictor.form;
    kc.constrain_z0 = c.constrain_z0;
    kc.qp_tol = c.qp_tol;
    kc.qp_max_iter = c.qp_max_iter;
    Kdpc::new(kc, &pred, map)
}

/// Summary persisted next to the closed-loop log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosedLoopSummary {
    pub steps: usize,
    pub lambda: f64,
    pub lambda_min_q: f64,
    pub regularization: crate::kdpc::Regularization,
    pub u_min: Vec<f64>,
    pub u_max: Vec<f64>,
    pub records: Vec<StepRecord>,
}

/// Per-step values needed by the diagnostics, beyond the CSV log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub k: usize,
    pub xi: f64,
    pub value: f64,
    pub e_norm: f64,
    pub z0_norm: f64,
    pub interpolation_error: f64,
    pub feasible: bool,
    pub fallback: bool,
    pub refined: bool,
    pub candidate_violation: Option<f64>,
    pub terminal_violation: f64,
    pub qp_iterations: usize,
}

impl StepRecord {
    fn from_step(s: &StepResult) -> Self {
        StepRecord {
            k: s.k,
            xi: s.xi,
            value: s.value,
            e_norm: s.e.norm(),
            z0_norm: s.z0.norm(),
            interpolation_error: (&s.z0 - &s.phi - &s.e * s.xi).amax(),
            feasible: s.feasible,
            fallback: s.fallback,
            refined: s.refined,
            candidate_violation: s.candidate_violation,
            terminal_violation: s.terminal_violation,
            qp_iterations: s.qp_iterations,
        }
    }
}

/// Closed-loop KDPC run on the true plant.
pub fn simulate_stage(cfg: &ExperimentConfig, out: &Path) -> Result<(ClosedLoop, ClosedLoopSummary)> {
    let stage = |e: Error| e.in_stage("simulate");
    let ctrl = load_controller(cfg, out).map_err(stage)?;
    let plant = cfg.plant.build().map_err(stage)?;
    let x0 = cfg.closed_loop.initial_state(plant.state_dim()).map_err(stage)?;
    let (hx, hu) = zero_input_history(plant.as_ref(), &x0, cfg.model.t_ini - 1).map_err(stage)?;
    let run = run_closed_loop(&ctrl, plant.as_ref(), &x0, (&hx, &hu), cfg.closed_loop.steps).map_err(stage)?;
    let traj = closed_loop_trajectory(plant.as_ref(), &run).map_err(stage)?;
    traj.write_csv(&at(out, paths::KDPC_TRAJECTORY)).map_err(stage)?;
    write_step_log(&at(out, paths::KDPC_LOG), &run.steps).map_err(stage)?;
    let summary = ClosedLoopSummary {
        steps: run.steps.len(),
        lambda: ctrl.cfg.lambda,
        lambda_min_q: ctrl.lambda_min_q(),
        regularization: ctrl.cfg.regularization,
        u_min: ctrl.cfg.u_box.lo.clone(),
        u_max: ctrl.cfg.u_box.hi.clone(),
        records: run.steps.iter().map(StepRecord::from_step).collect(),
    };
    artifact::write_json(&at(out, paths::KDPC_SUMMARY), &summary).map_err(stage)?;
    let infeasible = run.steps.iter().filter(|s| !s.feasible).count();
    info!("simulate: {} steps, {infeasible} solver failures, final |y| {:.3e}", run.steps.len(), traj.y.last().unwrap().amax());
    Ok((run, summary))
}

fn closed_loop_trajectory(plant: &dyn PlantModel, run: &ClosedLoop) -> Result<Trajectory> {
    let y = run.states.iter().map(|x| plant.output(x)).collect();
    Trajectory::new(run.inputs.clone(), y, Some(run.states.clone()))
}

/// NMPC comparator on the true plant.
pub fn nmpc_stage(cfg: &ExperimentConfig, out: &Path) -> Result<NmpcRun> {
    let stage = |e: Error| e.in_stage("nmpc");
    let plant = cfg.plant.build().map_err(stage)?;
    let ncfg = cfg.nmpc_config(plant.as_ref()).map_err(stage)?;
    let x0 = cfg.closed_loop.initial_state(plant.state_dim()).map_err(stage)?;
    let run = nmpc_baseline(plant.as_ref(), &ncfg, &x0, cfg.closed_loop.steps).map_err(stage)?;
    run.trajectory.write_csv(&at(out, paths::NMPC_TRAJECTORY)).map_err(stage)?;
    let mut csv = String::from("k,cost,iterations\n");
    for (k, (c, it)) in run.costs.iter().zip(&run.iterations).enumerate() {
        csv.push_str(&format!("{k},{},{it}\n", fmt_f64(*c)));
    }
    artifact::write_text(&at(out, paths::NMPC_COST), &csv).map_err(stage)?;
    info!("nmpc: {} steps, {} line-search failures", run.costs.len(), run.line_search_failures);
    Ok(run)
}

/// Every stage in order, followed by the report.
pub fn run_pipeline(cfg: &ExperimentConfig, out: &Path) -> Result<RunReport> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    artifact::write_text(&at(out, paths::CONFIG), &cfg.to_toml()?)?;
    generate_data(cfg, out)?;
    train(cfg, out)?;
    fit_predictor_stage(cfg, out)?;
    terminal_stage(cfg, out)?;
    simulate_stage(cfg, out)?;
    if cfg.nmpc.enabled {
        nmpc_stage(cfg, out)?;
    }
    emit_report(cfg, out)
}
