//! TOML experiment configuration.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::nmpc::{terminal_weight, NmpcConfig};
use crate::error::{Error, Result};
use crate::kdpc::Regularization;
use crate::multisine::{FrequencyPlacement, MultisineSpec};
use crate::observables::{Architecture, TrainConfig};
use crate::plants::{matrix_from_rows, PlantModel, PlantSpec};
use crate::predictor::PredictionForm;
use crate::terminal::BoxSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// Seeds the excitation phases, the observable initialization (unless
    /// `training.seed` is set) and all sampling checks.
    pub seed: u64,
    pub plant: PlantSpec,
    #[serde(default)]
    pub excitation: ExcitationConfig,
    #[serde(default)]
    pub data: DataConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub predictor: PredictorConfig,
    #[serde(default)]
    pub terminal: TerminalConfig,
    pub controller: ControllerConfig,
    pub closed_loop: ClosedLoopConfig,
    #[serde(default)]
    pub nmpc: NmpcSection,
    #[serde(default)]
    pub acceptance: AcceptanceConfig,
}

/// Multisine parameters; the seed comes from the experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExcitationConfig {
    pub range: [f64; 2],
    pub band: [f64; 2],
    pub period: usize,
    pub num_period: usize,
    pub num_sines: usize,
    pub num_trials: usize,
    pub grid_skip: usize,
    pub placement: FrequencyPlacement,
}

impl Default for ExcitationConfig {
    fn default() -> Self {
        let d = MultisineSpec::default();
        ExcitationConfig {
            range: d.range,
            band: d.band,
            period: d.period,
            num_period: d.num_period,
            num_sines: d.num_sines,
            num_trials: d.num_trials,
            grid_skip: d.grid_skip,
            placement: d.placement,
        }
    }
}

impl ExcitationConfig {
    pub fn spec(&self, seed: u64) -> MultisineSpec {
        MultisineSpec {
            range: self.range,
            band: self.band,
            period: self.period,
            num_period: self.num_period,
            num_sines: self.num_sines,
            num_trials: self.num_trials,
            grid_skip: self.grid_skip,
            seed,
            placement: self.placement,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Initial state of the identification run (zeros when empty).
    pub x0: Vec<f64>,
    pub train_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { x0: Vec::new(), train_fraction: 0.7 }
    }
}

impl DataConfig {
    pub fn initial_state(&self, n: usize) -> Result<DVector<f64>> {
        if self.x0.is_empty() {
            return Ok(DVector::zeros(n));
        }
        state_vector(&self.x0, n, "data.x0")
    }
}

fn state_vector(v: &[f64], n: usize, what: &str) -> Result<DVector<f64>> {
    if v.len() != n {
        return Err(Error::Config(format!("{what} has {} entries, the plant has {n} states", v.len())));
    }
    Ok(DVector::from_column_slice(v))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub t_ini: usize,
    pub horizon: usize,
    pub hidden: Vec<usize>,
    #[serde(default = "yes")]
    pub pass_through: bool,
}

fn yes() -> bool {
    true
}

impl ModelConfig {
    pub fn architecture(&self) -> Architecture {
        Architecture { hidden: self.hidden.clone(), pass_through: self.pass_through }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub lr: f64,
    pub epochs: usize,
    /// Overrides the experiment seed for the network initialization.
    pub seed: Option<u64>,
    pub patience: usize,
    pub min_improvement: f64,
    pub refit_heads: bool,
    pub normalize_inputs: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        let d = TrainConfig::default();
        TrainingConfig {
            lr: d.lr,
            epochs: d.epochs,
            seed: None,
            patience: d.patience,
            min_improvement: d.min_improvement,
            refit_heads: d.refit_heads,
            normalize_inputs: d.normalize_inputs,
        }
    }
}

impl TrainingConfig {
    pub fn to_train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            epochs: self.epochs,
            seed: self.seed.unwrap_or(seed),
            patience: self.patience,
            min_improvement: self.min_improvement,
            refit_heads: self.refit_heads,
            normalize_inputs: self.normalize_inputs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorConfig {
    pub ridge_fallback: bool,
    /// Prediction matrices used by the controller.
    pub form: PredictionForm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TerminalConfig {
    pub xz_margin: f64,
    pub xz_samples: usize,
    /// Output box used to sample past windows for the lifted-state box;
    /// defaults to the range of the training outputs.
    pub y_min: Option<Vec<f64>>,
    pub y_max: Option<Vec<f64>>,
    pub gain_weight: f64,
    pub max_iterations: usize,
    pub max_exact_dim: usize,
    pub redundancy_tol: f64,
    pub check_samples: usize,
}

impl Default for TerminalConfig {
    fn default() -> Self {
        TerminalConfig {
            xz_margin: 1.1,
            xz_samples: 5000,
            y_min: None,
            y_max: None,
            gain_weight: 1.0,
            max_iterations: 200,
            max_exact_dim: 12,
            redundancy_tol: 1e-9,
            check_samples: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerConfig {
    /// `Q = q_scale * I_L`.
    pub q_scale: f64,
    pub r: Vec<Vec<f64>>,
    pub lambda: f64,
    pub u_min: Vec<f64>,
    pub u_max: Vec<f64>,
    #[serde(default)]
    pub regularization: Regularization,
    #[serde(default)]
    pub constrain_z0: bool,
    #[serde(default = "qp_tol")]
    pub qp_tol: f64,
    #[serde(default = "qp_max_iter")]
    pub qp_max_iter: usize,
}

fn qp_tol() -> f64 {
    crate::numerics::qp::DEFAULT_TOL
}

fn qp_max_iter() -> usize {
    crate::numerics::qp::DEFAULT_MAX_ITER
}

impl ControllerConfig {
    pub fn q_matrix(&self, l: usize) -> DMatrix<f64> {
        DMatrix::identity(l, l) * self.q_scale
    }

    pub fn r_matrix(&self) -> Result<DMatrix<f64>> {
        matrix_from_rows(&self.r)
    }

    pub fn u_box(&self) -> Result<BoxSet> {
        BoxSet::new(self.u_min.clone(), self.u_max.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClosedLoopConfig {
    pub x0: Vec<f64>,
    #[serde(default = "default_steps")]
    pub steps: usize,
}

fn default_steps() -> usize {
    200
}

impl ClosedLoopConfig {
    pub fn initial_state(&self, n: usize) -> Result<DVector<f64>> {
        state_vector(&self.x0, n, "closed_loop.x0")
    }
}

/// The comparator shares `R`, the input bounds and the horizon with the controller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NmpcSection {
    pub enabled: bool,
    /// `Q_x = q_scale * I_n`.
    pub q_scale: f64,
    pub max_iter: usize,
    pub tol: f64,
    pub fd_step: f64,
}

impl Default for NmpcSection {
    fn default() -> Self {
        NmpcSection { enabled: true, q_scale: 10.0, max_iter: 100, tol: 1e-8, fd_step: 1e-6 }
    }
}

/// Thresholds checked by the report. Absent entries are not checked.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AcceptanceConfig {
    /// Minimum test R² over all horizons (controller's prediction form).
    pub r2_min: Option<f64>,
    /// Zero sampled violations of invariance, admissibility and decrease.
    pub terminal_certificate: bool,
    /// Zero solver failures and a feasible shifted candidate at every step.
    pub recursive_feasibility: bool,
    /// Bound on `r_k / (1 + |V_k|)`.
    pub decrease_tol: Option<f64>,
    pub final_y_max: Option<f64>,
    /// Input bounds must be active within the first `saturation_within` steps.
    pub saturation_within: Option<usize>,
    /// Bound on ξ once the input bounds are no longer active.
    pub xi_after_saturation_max: Option<f64>,
    pub e_max: Option<f64>,
    pub e_median_max: Option<f64>,
    /// Closed-loop stage cost of KDPC over that of NMPC.
    pub nmpc_cost_ratio_max: Option<f64>,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| Error::format(path, e))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let plant = self.plant.build()?;
        let (n, m) = (plant.state_dim(), plant.input_dim());
        let bad = |msg: String| Err(Error::Config(msg));
        if self.model.t_ini == 0 || self.model.horizon == 0 {
            return bad("model.t_ini and model.horizon must be at least 1".into());
        }
        if !(self.data.train_fraction > 0.0 && self.data.train_fraction < 1.0) {
            return bad(format!("data.train_fraction must lie in (0, 1), got {}", self.data.train_fraction));
        }
        if !self.data.x0.is_empty() {
            self.data.initial_state(n)?;
        }
        self.closed_loop.initial_state(n)?;
        let r = self.controller.r_matrix()?;
        if r.shape() != (m, m) {
            return bad(format!("controller.r must be {m}x{m}"));
        }
        if self.controller.u_min.len() != m || self.controller.u_max.len() != m {
            return bad(format!("controller input bounds must have {m} entries"));
        }
        self.controller.u_box()?;
        if !(self.controller.q_scale > 0.0) {
            return bad("controller.q_scale must be positive".into());
        }
        if !(self.controller.lambda >= 0.0) {
            return bad("controller.lambda must be nonnegative".into());
        }
        if self.controller.lambda == 0.0 && self.controller.regularization != Regularization::LegacyXi {
            return bad("controller.lambda must be positive for the deviation and xi_error regularizations".into());
        }
        match (&self.terminal.y_min, &self.terminal.y_max) {
            (Some(lo), Some(hi)) => {
                if lo.len() != plant.output_dim() || hi.len() != plant.output_dim() {
                    return bad("terminal.y_min / y_max must have one entry per output".into());
                }
            }
            (None, None) => {}
            _ => return bad("terminal.y_min and terminal.y_max must be given together".into()),
        }
        if !self.model.pass_through {
            return bad("the controller needs model.pass_through = true".into());
        }
        Ok(())
    }

    pub fn nmpc_config(&self, plant: &dyn PlantModel) -> Result<NmpcConfig> {
        let n = plant.state_dim();
        let q = DMatrix::identity(n, n) * self.nmpc.q_scale;
        let r = self.controller.r_matrix()?;
        let p = terminal_weight(plant, &q, &r)?;
        Ok(NmpcConfig {
            q,
            r,
            p,
            u_box: self.controller.u_box()?,
            horizon: self.model.horizon,
            max_iter: self.nmpc.max_iter,
            tol: self.nmpc.tol,
            fd_step: self.nmpc.fd_step,
        })
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) const MINIMAL: &str = r#"
name = "lti"
seed = 3

[plant]
kind = "lti"
a = [[0.9]]
b = [[0.5]]
c = [[1.0]]

[model]
t_ini = 1
horizon = 4
hidden = []

[controller]
q_scale = 1.0
r = [[1.0]]
lambda = 1e9
u_min = [-1.0]
u_max = [1.0]

[closed_loop]
x0 = [1.0]
"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        assert_eq!(cfg.excitation.range, [-4.0, 4.0]);
        assert_eq!(cfg.excitation.period, 1000);
        assert_eq!(cfg.training.lr, 1e-2);
        assert_eq!(cfg.training.to_train_config(cfg.seed).seed, 3);
        assert_eq!(cfg.closed_loop.steps, 200);
        assert_eq!(cfg.terminal.xz_margin, 1.1);
        assert_eq!(cfg.controller.regularization, Regularization::Deviation);
        assert_eq!(cfg.predictor.form, PredictionForm::Structured);
        assert!(cfg.nmpc.enabled);
    }

    #[test]
    fn toml_round_trip() {
        let cfg = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        let again = ExperimentConfig::from_toml_str(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn rejects_bad_configs() {
        let swap = |from: &str, to: &str| ExperimentConfig::from_toml_str(&MINIMAL.replace(from, to));
        assert!(swap("seed = 3\n", "").is_err());
        assert!(swap("x0 = [1.0]", "x0 = [1.0, 2.0]").is_err());
        assert!(swap("u_min = [-1.0]", "u_min = [2.0]").is_err());
        assert!(swap("lambda = 1e9", "lambda = 0.0").is_err());
        assert!(swap("hidden = []", "hidden = []\nbogus = 1").is_err());
        assert!(swap("r = [[1.0]]", "r = [[1.0, 0.0]]").is_err());
        assert!(swap("kind = \"lti\"", "kind = \"lti\"\ngain = 2.0").is_err());
        assert!(swap("t_ini = 1", "t_ini = 0").is_err());
    }

    #[test]
    fn named_plants_parse() {
        let csd = MINIMAL.replace("kind = \"lti\"\na = [[0.9]]\nb = [[0.5]]\nc = [[1.0]]", "kind = \"cart_spring_damper\"");
        let csd = csd.replace("x0 = [1.0]", "x0 = [-0.4, 0.0]");
        let cfg = ExperimentConfig::from_toml_str(&csd).unwrap();
        assert_eq!(cfg.plant, PlantSpec::CartSpringDamper(Default::default()));
        let pend = csd.replace("\"cart_spring_damper\"", "\"pendulum\"\nfriction = 0.2");
        let cfg = ExperimentConfig::from_toml_str(&pend).unwrap();
        match cfg.plant {
            PlantSpec::Pendulum(p) => assert_eq!(p.friction, 0.2),
            other => panic!("unexpected plant {other:?}"),
        }
    }
}
