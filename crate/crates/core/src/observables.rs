//! Lifting map `φ` from past windows to the Koopman state, joint multi-step
//! training of the map and its linear prediction heads, and R² scoring.
//!
//! The lifted state is `z = [y(k); NN(x_ini) - NN(0)]`, where `NN` is a tanh
//! network whose last hidden layer supplies the learned observables. The
//! pass-through block makes the output selector `C = [I_p 0]` exact.

use std::path::Path;

use log::{debug, info, warn};
use nalgebra::{DMatrix, DVector};
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::artifact::{self, matrix_from_rows_shaped, matrix_rows, vector_from, Header};
use crate::datapipe::{ini_dim, HankelSet};
use crate::error::{Error, Result};
use crate::numerics::linalg::{solve_least_squares, vstack};
use crate::numerics::{adam_step, AdamMoments, Tape, Var};

pub const MODEL_FORMAT: &str = "kdpc-observable-map";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    /// Widths of the tanh hidden layers; the last one is the number of learned observables.
    pub hidden: Vec<usize>,
    #[serde(default = "default_true")]
    pub pass_through: bool,
}

fn default_true() -> bool {
    true
}

impl Architecture {
    pub fn learned_dim(&self) -> usize {
        self.hidden.last().copied().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObservableMap {
    pub t_ini: usize,
    pub m: usize,
    pub p: usize,
    pub pass_through: bool,
    /// Inputs are divided by this before entering the network.
    pub input_scale: DVector<f64>,
    pub layers: Vec<Layer>,
    center: DVector<f64>,
}

impl ObservableMap {
    pub fn new(
        t_ini: usize,
        m: usize,
        p: usize,
        pass_through: bool,
        input_scale: DVector<f64>,
        layers: Vec<Layer>,
    ) -> Result<Self> {
        if t_ini == 0 || m == 0 || p == 0 {
            return Err(Error::InvalidArgument("T_ini, m and p must be positive".into()));
        }
        let dim = ini_dim(t_ini, m, p);
        if input_scale.len() != dim || input_scale.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidArgument(format!("input scale must be {dim} positive finite entries")));
        }
        let mut fan_in = dim;
        for (i, layer) in layers.iter().enumerate() {
            if layer.weights.ncols() != fan_in || layer.bias.len() != layer.weights.nrows() {
                return Err(Error::Dimension(format!("layer {i} does not chain with its input width {fan_in}")));
            }
            fan_in = layer.weights.nrows();
        }
        if !pass_through && layers.is_empty() {
            return Err(Error::InvalidArgument("lifting has no coordinates".into()));
        }
        let mut map = ObservableMap { t_ini, m, p, pass_through, input_scale, layers, center: DVector::zeros(0) };
        map.center = map.forward_raw(&DVector::zeros(dim));
        Ok(map)
    }

    /// Uniform(±1/sqrt(fan_in)) initialization from a seeded generator.
    pub fn init(arch: &Architecture, t_ini: usize, m: usize, p: usize, input_scale: DVector<f64>, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fan_in = ini_dim(t_ini, m, p);
        let mut layers = Vec::with_capacity(arch.hidden.len());
        for &width in &arch.hidden {
            if width == 0 {
                return Err(Error::InvalidArgument("hidden layer width must be positive".into()));
            }
            let bound = 1.0 / (fan_in as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound);
            let weights = DMatrix::from_fn(width, fan_in, |_, _| dist.sample(&mut rng));
            let bias = DVector::from_fn(width, |_, _| dist.sample(&mut rng));
            layers.push(Layer { weights, bias });
            fan_in = width;
        }
        ObservableMap::new(t_ini, m, p, arch.pass_through, input_scale, layers)
    }

    pub fn input_dim(&self) -> usize {
        ini_dim(self.t_ini, self.m, self.p)
    }

    pub fn learned_dim(&self) -> usize {
        self.layers.last().map(|l| l.weights.nrows()).unwrap_or(0)
    }

    /// Lifted dimension `L`.
    pub fn lifted_dim(&self) -> usize {
        self.learned_dim() + if self.pass_through { self.p } else { 0 }
    }

    /// `C` with `y = C z`; only defined with the pass-through block.
    pub fn output_selector(&self) -> Option<DMatrix<f64>> {
        self.pass_through.then(|| DMatrix::identity(self.p, self.lifted_dim()))
    }

    pub fn architecture(&self) -> Architecture {
        Architecture { hidden: self.layers.iter().map(|l| l.weights.nrows()).collect(), pass_through: self.pass_through }
    }

    fn forward_raw(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut h = x.component_div(&self.input_scale);
        for layer in &self.layers {
            h = (&layer.weights * &h + &layer.bias).map(f64::tanh);
        }
        h
    }

    /// `φ(x_ini)`, with `x_ini = col(u_ini, y_ini)`.
    pub fn lift(&self, x_ini: &DVector<f64>) -> Result<DVector<f64>> {
        if x_ini.len() != self.input_dim() {
            return Err(Error::Dimension(format!("x_ini has {} entries, map expects {}", x_ini.len(), self.input_dim())));
        }
        let mut z = DVector::zeros(self.lifted_dim());
        let mut off = 0;
        if self.pass_through {
            z.rows_mut(0, self.p).copy_from(&x_ini.rows(x_ini.len() - self.p, self.p));
            off = self.p;
        }
        if !self.layers.is_empty() {
            let h = self.forward_raw(x_ini) - &self.center;
            z.rows_mut(off, h.len()).copy_from(&h);
        }
        Ok(z)
    }

    /// Lifts every column of a stacked past-window matrix.
    pub fn lift_columns(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(self.lifted_dim(), x.ncols());
        for c in 0..x.ncols() {
            out.column_mut(c).copy_from(&self.lift(&x.column(c).into_owned())?);
        }
        Ok(out)
    }

    /// Network weights as `[W_1, b_1, W_2, b_2, ...]` (biases as columns).
    pub fn params(&self) -> Vec<DMatrix<f64>> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for l in &self.layers {
            out.push(l.weights.clone());
            out.push(DMatrix::from_column_slice(l.bias.len(), 1, l.bias.as_slice()));
        }
        out
    }

    pub fn with_params(&self, params: &[DMatrix<f64>]) -> Result<Self> {
        if params.len() != 2 * self.layers.len() {
            return Err(Error::Dimension(format!("{} parameter blocks for {} layers", params.len(), self.layers.len())));
        }
        let layers = params
            .chunks(2)
            .map(|wb| Layer { weights: wb[0].clone(), bias: wb[1].column(0).into_owned() })
            .collect();
        ObservableMap::new(self.t_ini, self.m, self.p, self.pass_through, self.input_scale.clone(), layers)
    }

    pub fn to_file(&self, training: Option<TrainingManifest>) -> ModelFile {
        ModelFile {
            header: Header::new(MODEL_FORMAT, MODEL_VERSION),
            t_ini: self.t_ini,
            m: self.m,
            p: self.p,
            architecture: self.architecture(),
            input_scale: self.input_scale.as_slice().to_vec(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerFile { weights: matrix_rows(&l.weights), bias: l.bias.as_slice().to_vec() })
                .collect(),
            training,
        }
    }

    pub fn save(&self, path: &Path, training: Option<TrainingManifest>) -> Result<()> {
        artifact::write_json(path, &self.to_file(training))
    }

    pub fn load(path: &Path) -> Result<(Self, Option<TrainingManifest>)> {
        let file: ModelFile = artifact::read_json(path)?;
        file.into_map().map_err(|e| Error::format(path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerFile {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingManifest {
    pub seed: u64,
    pub lr: f64,
    pub max_epochs: usize,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_loss: f64,
    pub final_loss: f64,
    pub heads_refit: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    #[serde(flatten)]
    pub header: Header,
    pub t_ini: usize,
    pub m: usize,
    pub p: usize,
    pub architecture: Architecture,
    pub input_scale: Vec<f64>,
    pub layers: Vec<LayerFile>,
    pub training: Option<TrainingManifest>,
}

impl ModelFile {
    pub fn into_map(self) -> Result<(ObservableMap, Option<TrainingManifest>)> {
        self.header.expect(MODEL_FORMAT, MODEL_VERSION)?;
        let mut fan_in = ini_dim(self.t_ini, self.m, self.p);
        let mut layers = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let weights = matrix_from_rows_shaped(&l.weights, fan_in)?;
            fan_in = weights.nrows();
            layers.push(Layer { weights, bias: vector_from(&l.bias) });
        }
        let map = ObservableMap::new(
            self.t_ini,
            self.m,
            self.p,
            self.architecture.pass_through,
            vector_from(&self.input_scale),
            layers,
        )?;
        if map.architecture() != self.architecture {
            return Err(Error::Dimension("layer shapes disagree with the recorded architecture".into()));
        }
        Ok((map, self.training))
    }
}

/// Linear multi-step output heads: `Ŷ_f = Ψ̃ φ([U_p; Y_p]) + Γ̃ U_f`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorHeads {
    pub psi: DMatrix<f64>,
    pub gamma: DMatrix<f64>,
}

impl PredictorHeads {
    pub fn zeros(horizon: usize, p: usize, m: usize, l: usize) -> Self {
        PredictorHeads { psi: DMatrix::zeros(horizon * p, l), gamma: DMatrix::zeros(horizon * p, horizon * m) }
    }

    pub fn predict(&self, z: &DMatrix<f64>, u_f: &DMatrix<f64>) -> DMatrix<f64> {
        &self.psi * z + &self.gamma * u_f
    }
}

#[derive(Debug, Clone)]
pub struct TrainedHeads {
    pub heads: PredictorHeads,
    /// Loss at every epoch, evaluated before that epoch's update.
    pub loss_history: Vec<f64>,
    pub best_loss: f64,
    pub best_epoch: usize,
    /// Loss of the returned map and heads.
    pub final_loss: f64,
    pub heads_refit: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Early stop when the best loss improves by less than `min_improvement` over this many epochs.
    pub patience: usize,
    pub min_improvement: f64,
    /// Replace the heads by the exact least-squares fit for the final map.
    pub refit_heads: bool,
    /// Divide network inputs by their RMS over the training windows.
    pub normalize_inputs: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-2,
            epochs: 5000,
            seed: 0,
            patience: 200,
            min_improvement: 1e-12,
            refit_heads: true,
            normalize_inputs: true,
        }
    }
}

impl TrainConfig {
    pub fn manifest(&self, trained: &TrainedHeads) -> TrainingManifest {
        TrainingManifest {
            seed: self.seed,
            lr: self.lr,
            max_epochs: self.epochs,
            epochs_run: trained.loss_history.len(),
            best_epoch: trained.best_epoch,
            best_loss: trained.best_loss,
            final_loss: trained.final_loss,
            heads_refit: trained.heads_refit,
        }
    }
}

/// Per-coordinate RMS of the past windows, with zero rows mapped to 1.
pub fn rms_scale(x: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_fn(x.nrows(), |r, _| {
        let ms = x.row(r).iter().map(|v| v * v).sum::<f64>() / x.ncols().max(1) as f64;
        let s = ms.sqrt();
        if s > 1e-12 && s.is_finite() {
            s
        } else {
            1.0
        }
    })
}

/// Fixed data of the stage-1 loss, pre-scaled for the network.
#[derive(Debug, Clone)]
pub struct TrainingProblem {
    x_scaled: DMatrix<f64>,
    y_now: DMatrix<f64>,
    u_f: DMatrix<f64>,
    y_f: DMatrix<f64>,
    pass_through: bool,
    layers: usize,
}

impl TrainingProblem {
    pub fn new(map: &ObservableMap, data: &HankelSet) -> Result<Self> {
        let x = data.past();
        if x.nrows() != map.input_dim() {
            return Err(Error::Dimension(format!("past windows have {} rows, map expects {}", x.nrows(), map.input_dim())));
        }
        let mut x_scaled = x.clone();
        for mut col in x_scaled.column_iter_mut() {
            col.component_div_assign(&map.input_scale);
        }
        let p = map.p;
        let y_now = data.y_p.rows(data.y_p.nrows() - p, p).into_owned();
        Ok(TrainingProblem {
            x_scaled,
            y_now,
            u_f: data.u_f.clone(),
            y_f: data.y_f.clone(),
            pass_through: map.pass_through,
            layers: map.layers.len(),
        })
    }

    pub fn num_samples(&self) -> usize {
        self.y_f.len()
    }

    fn record(&self, tape: &mut Tape, params: &[DMatrix<f64>]) -> Result<Var> {
        if params.len() != 2 * self.layers + 2 {
            return Err(Error::Dimension(format!("expected {} parameter blocks, got {}", 2 * self.layers + 2, params.len())));
        }
        let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
        let x = tape.constant(self.x_scaled.clone());
        let mut lifted = None;
        if self.layers > 0 {
            let mut h = x;
            let mut h0: Option<Var> = None;
            for i in 0..self.layers {
                let (w, b) = (vars[2 * i], vars[2 * i + 1]);
                let wx = tape.matmul(w, h);
                let pre = tape.add_column(wx, b);
                h = tape.tanh(pre);
                let pre0 = match h0 {
                    None => b,
                    Some(prev) => {
                        let wh = tape.matmul(w, prev);
                        tape.add(wh, b)
                    }
                };
                h0 = Some(tape.tanh(pre0));
            }
            lifted = Some(tape.sub_column(h, h0.expect("at least one layer")));
        }
        let z = match (self.pass_through, lifted) {
            (true, Some(nn)) => {
                let y = tape.constant(self.y_now.clone());
                tape.vstack(y, nn)
            }
            (true, None) => tape.constant(self.y_now.clone()),
            (false, Some(nn)) => nn,
            (false, None) => return Err(Error::InvalidArgument("lifting has no coordinates".into())),
        };
        let psi = vars[2 * self.layers];
        let gamma = vars[2 * self.layers + 1];
        let u_f = tape.constant(self.u_f.clone());
        let y_f = tape.constant(self.y_f.clone());
        let pz = tape.matmul(psi, z);
        let gu = tape.matmul(gamma, u_f);
        let pred = tape.add(pz, gu);
        let err = tape.sub(pred, y_f);
        let sq = tape.square(err);
        let total = tape.sum(sq);
        Ok(tape.scale(total, 1.0 / self.num_samples() as f64))
    }

    /// Mean squared prediction error for `[W_1, b_1, ..., Ψ̃, Γ̃]`.
    pub fn loss(&self, params: &[DMatrix<f64>]) -> Result<f64> {
        let mut tape = Tape::new();
        let out = self.record(&mut tape, params)?;
        Ok(tape.value(out)[(0, 0)])
    }

    pub fn loss_and_grad(&self, params: &[DMatrix<f64>]) -> Result<(f64, Vec<DMatrix<f64>>)> {
        let mut tape = Tape::new();
        let out = self.record(&mut tape, params)?;
        let loss = tape.value(out)[(0, 0)];
        Ok((loss, tape.grad(out)?))
    }
}

/// Least-squares heads for a fixed map: `[Ψ̃ Γ̃] = Y_f [Z; U_f]^†`.
pub fn fit_heads(map: &ObservableMap, data: &HankelSet) -> Result<PredictorHeads> {
    let z = map.lift_columns(&data.past())?;
    let reg = vstack(&[&z, &data.u_f]);
    let ls = solve_least_squares(&reg, &data.y_f, 0.0)?;
    let l = z.nrows();
    Ok(PredictorHeads { psi: ls.x.columns(0, l).into_owned(), gamma: ls.x.columns(l, data.u_f.nrows()).into_owned() })
}

pub fn stage1_loss(map: &ObservableMap, heads: &PredictorHeads, data: &HankelSet) -> Result<f64> {
    let z = map.lift_columns(&data.past())?;
    let err = heads.predict(&z, &data.u_f) - &data.y_f;
    Ok(err.norm_squared() / err.len() as f64)
}

/// Jointly fits the network and the heads by full-batch Adam on the MSE.
pub fn train_multistep(
    data: &HankelSet,
    arch: &Architecture,
    cfg: &TrainConfig,
) -> Result<(ObservableMap, TrainedHeads)> {
    if !(cfg.lr > 0.0) {
        return Err(Error::InvalidArgument(format!("learning rate must be positive, got {}", cfg.lr)));
    }
    let m = data.u_f.nrows() / data.horizon;
    let p = data.y_f.nrows() / data.horizon;
    let past = data.past();
    let scale = if cfg.normalize_inputs { rms_scale(&past) } else { DVector::from_element(past.nrows(), 1.0) };
    let init = ObservableMap::init(arch, data.t_ini, m, p, scale, cfg.seed)?;
    let problem = TrainingProblem::new(&init, data)?;
    let l = init.lifted_dim();
    let mut params = init.params();
    let zero_heads = PredictorHeads::zeros(data.horizon, p, m, l);
    params.push(zero_heads.psi);
    params.push(zero_heads.gamma);
    let mut moments = AdamMoments::zeros_like(&params);

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best_history = Vec::with_capacity(cfg.epochs);
    let mut best = (f64::INFINITY, 0usize, params.clone());
    for epoch in 0..cfg.epochs {
        let (loss, grads) = problem.loss_and_grad(&params)?;
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged { epoch });
        }
        history.push(loss);
        if loss < best.0 {
            best = (loss, epoch, params.clone());
        }
        best_history.push(best.0);
        if epoch >= cfg.patience && best_history[epoch - cfg.patience] - best.0 < cfg.min_improvement {
            debug!("early stop at epoch {epoch}, best loss {:.3e}", best.0);
            break;
        }
        adam_step(&mut params, &grads, &mut moments, cfg.lr, epoch as u64 + 1).map_err(|e| match e {
            Error::NonFinite(_) => Error::TrainingDiverged { epoch },
            other => other,
        })?;
    }
    let (best_loss, best_epoch, best_params) = best;
    let nn = best_params.len() - 2;
    let map = init.with_params(&best_params[..nn])?;
    let mut heads = PredictorHeads { psi: best_params[nn].clone(), gamma: best_params[nn + 1].clone() };
    let mut final_loss = stage1_loss(&map, &heads, data)?;
    let mut heads_refit = false;
    if cfg.refit_heads {
        let refit = fit_heads(&map, data)?;
        let refit_loss = stage1_loss(&map, &refit, data)?;
        if refit_loss <= final_loss {
            heads = refit;
            final_loss = refit_loss;
            heads_refit = true;
        } else {
            warn!("head refit did not lower the loss ({refit_loss:.3e} > {final_loss:.3e}); keeping Adam heads");
        }
    }
    info!(
        "trained {} epochs: best Adam loss {best_loss:.3e} at epoch {best_epoch}, final loss {final_loss:.3e}",
        history.len()
    );
    Ok((map, TrainedHeads { heads, loss_history: history, best_loss, best_epoch, final_loss, heads_refit }))
}

/// Coefficient of determination at horizon `j` (1-based) over all window columns.
pub fn r_squared(y_true: &DMatrix<f64>, y_pred: &DMatrix<f64>, j: usize, p: usize) -> Result<f64> {
    if y_true.shape() != y_pred.shape() {
        return Err(Error::Dimension(format!("shapes {:?} and {:?}", y_true.shape(), y_pred.shape())));
    }
    if p == 0 || j == 0 || j * p > y_true.nrows() {
        return Err(Error::InvalidArgument(format!("horizon index {j} out of range")));
    }
    let rows = (j - 1) * p..j * p;
    let n = y_true.ncols() as f64;
    let (mut num, mut den) = (0.0, 0.0);
    for r in rows {
        let mean = y_true.row(r).sum() / n;
        for c in 0..y_true.ncols() {
            num += (y_true[(r, c)] - y_pred[(r, c)]).powi(2);
            den += (y_true[(r, c)] - mean).powi(2);
        }
    }
    if !(den > 0.0) {
        return Err(Error::InvalidArgument(format!("zero output variance at horizon {j}; degenerate test set")));
    }
    Ok(1.0 - num / den)
}

pub fn r_squared_table(y_true: &DMatrix<f64>, y_pred: &DMatrix<f64>, p: usize) -> Result<Vec<f64>> {
    (1..=y_true.nrows() / p).map(|j| r_squared(y_true, y_pred, j, p)).collect()
}
