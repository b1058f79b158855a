//! Untrained-network reconstruction: a convolutional network maps the
//! backpropagation current and permittivity to induced currents, and its
//! weights are fitted to the measurements through physics losses alone.

pub mod adam;
pub mod network;
pub mod physics;

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bp::{bp_current, bp_permittivity};
use crate::forward::{incident_fields, CurrentSet, FieldSet};
use crate::operators::GreenOperators;
use crate::scene::{ContrastMap, Grid, ImagingSetup};
use crate::{Complex, Error, Real, Result};

pub use adam::{learning_rate, Adam};
pub use network::{parameter_count, ArchConfig, Mode, NetworkParams};
pub use physics::{compute_contrast, LossBreakdown, Problem};

/// Optimization settings.
/// Missing fields in a JSON config take their default values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub halve_every: usize,
    pub max_epochs: usize,
    /// Weight of the lower-bound penalty on `Re eps_r`.
    pub alpha: f64,
    /// Base weight of the adaptive TV penalty.
    pub beta0: f64,
    pub dropout_p: f64,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub arch: ArchConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-3,
            halve_every: 1000,
            max_epochs: 1500,
            alpha: 1e-4,
            beta0: 1e-5,
            dropout_p: 0.1,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            arch: ArchConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be at least 1".into()));
        }
        if !(self.alpha >= 0.0 && self.beta0 >= 0.0) {
            return Err(Error::Config("alpha and beta0 must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!("dropout probability must lie in [0, 1), got {}", self.dropout_p)));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::Config("invalid Adam constants".into()));
        }
        self.arch.validate()
    }
}

#[derive(Debug, Clone)]
pub struct ReconstructionResult<T: Real = f64> {
    /// Permittivity from the final eval-mode pass.
    pub eps_r_pre: ContrastMap<T>,
    /// Backpropagation initial permittivity.
    pub eps_r_bp: ContrastMap<T>,
    /// Losses of the training-mode pass at each epoch, before the update.
    pub loss_history: Vec<LossBreakdown>,
    pub lr_history: Vec<f64>,
    /// Losses of the backpropagation current.
    pub bp_loss: LossBreakdown,
    /// Losses of the final eval-mode current.
    pub final_loss: LossBreakdown,
    pub currents: CurrentSet<T>,
    pub epochs_run: usize,
    pub param_count: usize,
    /// Seconds spent before the first epoch (initialization and input assembly).
    pub setup_time: f64,
    /// Total seconds including setup and the final pass.
    pub wall_time: f64,
    /// Normalization applied to the current channels of the input.
    pub input_scale: f64,
}

/// Network input `n x 4 x m x m`: `[Re J0 / s, Im J0 / s, Re eps, Im eps]`
/// with `s = max |J0|` (1 when `J0 = 0`). Returns the input and `s`.
pub fn assemble_input<T: Real>(j0: &CurrentSet<T>, eps0: &ContrastMap<T>) -> Result<(Vec<T>, T)> {
    if j0.m != eps0.m {
        return Err(Error::ShapeMismatch("current and permittivity grids differ".into()));
    }
    let mm = j0.m * j0.m;
    let max = j0.values.iter().fold(T::zero(), |a, v| a.max(v.norm()));
    let s = if max > T::zero() { max } else { T::one() };
    let eps = eps0.eps_r();
    let mut x = Vec::with_capacity(j0.n_illum * 4 * mm);
    for p in 0..j0.n_illum {
        let jp = j0.illum(p);
        x.extend(jp.iter().map(|v| v.re / s));
        x.extend(jp.iter().map(|v| v.im / s));
        x.extend(eps.iter().map(|v| v.re));
        x.extend(eps.iter().map(|v| v.im));
    }
    Ok((x, s))
}

/// Interprets the `n x 2 x m x m` network output as currents scaled by `s`.
pub fn output_to_currents<T: Real>(out: &[T], n: usize, mm: usize, s: T) -> Vec<Complex<T>> {
    let mut j = Vec::with_capacity(n * mm);
    for p in 0..n {
        let o = &out[p * 2 * mm..(p + 1) * 2 * mm];
        j.extend((0..mm).map(|q| Complex::new(o[q] * s, o[mm + q] * s)));
    }
    j
}

fn currents_grad_to_output<T: Real>(g: &[Complex<T>], n: usize, mm: usize, s: T) -> Vec<T> {
    let mut d = vec![T::zero(); n * 2 * mm];
    for p in 0..n {
        for q in 0..mm {
            let v = g[p * mm + q];
            d[p * 2 * mm + q] = v.re * s;
            d[p * 2 * mm + mm + q] = v.im * s;
        }
    }
    d
}

/// Network plus physics: the map from weights to the total loss.
pub struct Objective<'a, T: Real> {
    pub problem: Problem<'a, T>,
    pub input: Vec<T>,
    pub scale: T,
    pub n_illum: usize,
}

impl<'a, T: Real> Objective<'a, T> {
    pub fn new(problem: Problem<'a, T>, j0: &CurrentSet<T>, eps0: &ContrastMap<T>) -> Result<Self> {
        problem.check()?;
        let (input, scale) = assemble_input(j0, eps0)?;
        Ok(Self { problem, input, scale, n_illum: j0.n_illum })
    }

    fn mm(&self) -> usize {
        self.problem.ops.n_cells()
    }

    pub fn currents(&self, params: &NetworkParams<T>, mode: Mode<'_, T>) -> Result<Vec<Complex<T>>> {
        let (out, _) = params.forward(&self.input, self.n_illum, mode)?;
        Ok(output_to_currents(&out, self.n_illum, self.mm(), self.scale))
    }

    /// Loss only. `frozen_tv` fixes the TV weights.
    pub fn loss(&self, params: &NetworkParams<T>, mode: Mode<'_, T>, frozen_tv: Option<(f64, f64)>) -> Result<LossBreakdown> {
        let j = self.currents(params, mode)?;
        match frozen_tv {
            None => Ok(self.problem.losses(&j)?.0),
            Some(_) => Ok(self.problem.evaluate(&j, frozen_tv)?.loss),
        }
    }

    /// Loss, parameter gradient and the TV weights used.
    pub fn loss_and_grad(
        &self,
        params: &NetworkParams<T>,
        mode: Mode<'_, T>,
        frozen_tv: Option<(f64, f64)>,
    ) -> Result<(LossBreakdown, Vec<T>, (f64, f64))> {
        let (out, tape) = params.forward(&self.input, self.n_illum, mode)?;
        let j = output_to_currents(&out, self.n_illum, self.mm(), self.scale);
        let ev = self.problem.evaluate(&j, frozen_tv)?;
        let d_out = currents_grad_to_output(&ev.grad_j, self.n_illum, self.mm(), self.scale);
        let grad = params.backward(&tape, &d_out)?;
        Ok((ev.loss, grad, ev.tv_weights))
    }
}

/// Builds the operators and incident field, then runs [`reconstruct_with`].
pub fn reconstruct<T: Real>(
    e_mea: &FieldSet<T>,
    setup: &ImagingSetup,
    grid: &Grid,
    cfg: &TrainConfig,
) -> Result<ReconstructionResult<T>> {
    let start = Instant::now();
    let ops = GreenOperators::<T>::build(grid, setup)?;
    let e_inc = incident_fields::<T>(setup, grid)?;
    let mut res = reconstruct_with(&ops, &e_inc, e_mea, cfg, |_, _| {})?;
    let extra = start.elapsed().as_secs_f64() - res.wall_time;
    res.setup_time += extra;
    res.wall_time += extra;
    Ok(res)
}

/// Full reconstruction loop on prebuilt operators. `on_epoch` sees every
/// epoch's losses.
pub fn reconstruct_with<T: Real, F: FnMut(usize, &LossBreakdown)>(
    ops: &GreenOperators<T>,
    e_inc: &FieldSet<T>,
    e_mea: &FieldSet<T>,
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<ReconstructionResult<T>> {
    let start = Instant::now();
    cfg.validate()?;
    let m = ops.grid().m;
    let n_illum = e_mea.n_illum;

    let bp = bp_current(e_mea, ops)?;
    let eps_bp = bp_permittivity(&bp.currents, e_inc, ops)?;
    let problem = Problem { ops, e_inc, e_mea, alpha: cfg.alpha, beta0: cfg.beta0 };
    let bp_loss = problem.losses(&bp.currents.values)?.0;
    let objective = Objective::new(problem, &bp.currents, &eps_bp)?;
    let mut params = NetworkParams::<T>::init(m, &cfg.arch, cfg.seed)?;
    let mut opt = Adam::<T>::new(params.len(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let setup_time = start.elapsed().as_secs_f64();
    log::info!(
        "reconstruction: {m}x{m} grid, {n_illum} illuminations, {} parameters, {} epochs",
        params.len(),
        cfg.max_epochs
    );

    let mut loss_history = Vec::with_capacity(cfg.max_epochs);
    let mut lr_history = Vec::with_capacity(cfg.max_epochs);
    for epoch in 0..cfg.max_epochs {
        let lr = learning_rate(cfg.lr0, cfg.halve_every, epoch);
        let mask = network::dropout_mask::<T>(&mut rng, n_illum * cfg.arch.hidden, cfg.dropout_p);
        let mut step = || -> Result<LossBreakdown> {
            let (loss, grad, _) = objective.loss_and_grad(&params, Mode::Train { mask: &mask }, None)?;
            opt.step(&mut params.data, &grad, lr)?;
            Ok(loss)
        };
        let loss = step().map_err(|e| Error::Epoch { epoch, source: Box::new(e) })?;
        if epoch % 100 == 0 || epoch + 1 == cfg.max_epochs {
            log::info!(
                "epoch {epoch}: total {:.4e} (state {:.3e}, data {:.3e}, bound {:.3e}, tv {:.3e}), lr {lr:.2e}",
                loss.total,
                loss.state,
                loss.data,
                loss.bound,
                loss.tv
            );
        }
        on_epoch(epoch, &loss);
        loss_history.push(loss);
        lr_history.push(lr);
    }

    let j = objective
        .currents(&params, Mode::Eval)
        .map_err(|e| Error::Epoch { epoch: cfg.max_epochs, source: Box::new(e) })?;
    let (final_loss, contrast) = objective.problem.losses(&j)?;
    Ok(ReconstructionResult {
        eps_r_pre: ContrastMap::from_chi(m, contrast.chi)?,
        eps_r_bp: eps_bp,
        loss_history,
        lr_history,
        bp_loss,
        final_loss,
        currents: CurrentSet::new(n_illum, m, j)?,
        epochs_run: cfg.max_epochs,
        param_count: params.len(),
        setup_time,
        wall_time: start.elapsed().as_secs_f64(),
        input_scale: objective.scale.to_f64_lossy(),
    })
}
