//! Full-batch GD and SAM.
//!
//! GD: `W' = W - eta * grad L(W)`.
//! SAM: `W' = W - eta * grad L(W + r * grad L(W))` with `r = rho / ||grad L(W)||_F`
//! (normalized) or `r = rho` (raw).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{alignment, error_from_margins};
use crate::model::{evaluate, gradient, margins, LogitWeights, WeightMatrix};
use crate::synthgen::Dataset;

/// Below this gradient norm a normalized SAM step skips its perturbation.
pub const ZERO_GRADIENT_NORM: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Gd,
    Sam,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Gd => "gd",
            OptimizerKind::Sam => "sam",
        }
    }
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub eta: f64,
    #[serde(default)]
    pub rho: f64,
    #[serde(default = "default_true")]
    pub normalize_perturbation: bool,
    pub iterations: usize,
}

impl OptimizerConfig {
    pub fn gd(eta: f64, iterations: usize) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Gd,
            eta,
            rho: 0.0,
            normalize_perturbation: true,
            iterations,
        }
    }

    pub fn sam(eta: f64, rho: f64, iterations: usize) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sam,
            eta,
            rho,
            normalize_perturbation: true,
            iterations,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::InvalidConfig(format!("eta = {} (need > 0)", self.eta)));
        }
        if !(self.rho >= 0.0 && self.rho.is_finite()) {
            return Err(Error::InvalidConfig(format!("rho = {} (need >= 0)", self.rho)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub loss_before: f64,
    pub grad_frobenius: f64,
    /// The `rho^(t)` actually applied to the gradient.
    pub perturbation_scale: f64,
    /// Normalized SAM met a vanishing gradient and took a plain GD step.
    pub perturbation_skipped: bool,
}

fn check_eta(eta: f64) -> Result<()> {
    if !(eta >= 0.0 && eta.is_finite()) {
        return Err(Error::InvalidConfig(format!("eta = {eta} (need finite, >= 0)")));
    }
    Ok(())
}

fn perturbation_scale(rho: f64, normalize: bool, grad_norm: f64) -> (f64, bool) {
    if rho == 0.0 {
        (0.0, false)
    } else if normalize {
        if grad_norm < ZERO_GRADIENT_NORM {
            (0.0, true)
        } else {
            (rho / grad_norm, false)
        }
    } else {
        (rho, false)
    }
}

fn checked(g: WeightMatrix) -> Result<WeightMatrix> {
    if g.is_finite() {
        Ok(g)
    } else {
        Err(Error::NonFiniteGradient)
    }
}

fn descend(
    w: &WeightMatrix,
    ds: &Dataset,
    grad: &WeightMatrix,
    eta: f64,
    sam: Option<(f64, bool)>,
) -> Result<(WeightMatrix, f64, bool)> {
    let grad_norm = grad.frobenius_norm();
    let (scale, skipped) = match sam {
        Some((rho, normalize)) => perturbation_scale(rho, normalize, grad_norm),
        None => (0.0, false),
    };
    let next = if scale == 0.0 {
        w.add_scaled(-eta, grad)
    } else {
        let perturbed = w.add_scaled(scale, grad);
        let g = checked(gradient(&perturbed, ds)?)?;
        w.add_scaled(-eta, &g)
    };
    Ok((next, scale, skipped))
}

fn loss_and_gradient(w: &WeightMatrix, ds: &Dataset) -> Result<(f64, Vec<f64>, WeightMatrix)> {
    let eval = evaluate(w, ds, true, LogitWeights::Live)?;
    let g = checked(eval.gradient.expect("gradient requested"))?;
    Ok((eval.loss, eval.margins, g))
}

pub fn gd_step(w: &WeightMatrix, ds: &Dataset, eta: f64) -> Result<(WeightMatrix, StepReport)> {
    check_eta(eta)?;
    let (loss, _, g) = loss_and_gradient(w, ds)?;
    let grad_frobenius = g.frobenius_norm();
    let (next, _, _) = descend(w, ds, &g, eta, None)?;
    Ok((
        next,
        StepReport {
            loss_before: loss,
            grad_frobenius,
            perturbation_scale: 0.0,
            perturbation_skipped: false,
        },
    ))
}

pub fn sam_step(
    w: &WeightMatrix,
    ds: &Dataset,
    eta: f64,
    rho: f64,
    normalize: bool,
) -> Result<(WeightMatrix, StepReport)> {
    check_eta(eta)?;
    if !(rho >= 0.0 && rho.is_finite()) {
        return Err(Error::InvalidConfig(format!("rho = {rho} (need >= 0)")));
    }
    let (loss, _, g) = loss_and_gradient(w, ds)?;
    let grad_frobenius = g.frobenius_norm();
    let (next, scale, skipped) = descend(w, ds, &g, eta, Some((rho, normalize)))?;
    Ok((
        next,
        StepReport {
            loss_before: loss,
            grad_frobenius,
            perturbation_scale: scale,
            perturbation_skipped: skipped,
        },
    ))
}

/// State of `W^(t)`, recorded before the step from `t` to `t + 1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub loss: f64,
    pub fast_alignment: f64,
    pub slow_alignment: f64,
    pub train_error: f64,
    pub test_error: Option<f64>,
    pub grad_norm: f64,
    pub perturbation_scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub iteration: usize,
    pub weights: WeightMatrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub config: OptimizerConfig,
    pub rows: Vec<TraceRow>,
    pub checkpoints: Vec<Checkpoint>,
    pub final_weights: WeightMatrix,
    /// Iterations where normalized SAM skipped its perturbation.
    pub skipped_perturbations: Vec<usize>,
}

impl TrainTrace {
    pub fn fast_alignments(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.fast_alignment).collect()
    }

    pub fn slow_alignments(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.slow_alignment).collect()
    }

    pub fn train_errors(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.train_error).collect()
    }

    pub fn initial(&self) -> &TraceRow {
        &self.rows[0]
    }

    pub fn last(&self) -> &TraceRow {
        self.rows.last().expect("trace has the initial row")
    }

    /// Keeps rows and checkpoints up to and including `iteration`.
    pub fn truncated(&self, iteration: usize, weights: WeightMatrix) -> TrainTrace {
        let mut out = self.clone();
        out.rows.truncate(iteration + 1);
        out.checkpoints.retain(|c| c.iteration <= iteration);
        out.skipped_perturbations.retain(|&t| t < iteration);
        out.config.iterations = iteration;
        out.final_weights = weights;
        out
    }
}

/// What an observer sees after each evaluation of `W^(t)`.
pub struct Snapshot<'a> {
    pub iteration: usize,
    pub weights: &'a WeightMatrix,
    /// `y_i f(x_i; W^(t))` for every training example.
    pub margins: &'a [f64],
    pub dataset: &'a Dataset,
    pub row: &'a TraceRow,
}

pub trait Observer {
    fn observe(&mut self, snapshot: &Snapshot<'_>);
}

impl<F: FnMut(&Snapshot<'_>)> Observer for F {
    fn observe(&mut self, snapshot: &Snapshot<'_>) {
        self(snapshot)
    }
}

/// Keeps a copy of the weights at every iteration.
#[derive(Clone, Debug, Default)]
pub struct WeightRecorder {
    pub weights: Vec<WeightMatrix>,
}

impl Observer for WeightRecorder {
    fn observe(&mut self, snapshot: &Snapshot<'_>) {
        self.weights.push(snapshot.weights.clone());
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TrainOptions<'a> {
    pub test_set: Option<&'a Dataset>,
    /// Test error is measured every `test_every` iterations and at the end.
    pub test_every: usize,
    /// Weight checkpoints every `c` iterations (plus the final weights).
    pub checkpoint_every: Option<usize>,
}

impl Default for TrainOptions<'_> {
    fn default() -> Self {
        TrainOptions {
            test_set: None,
            test_every: 1,
            checkpoint_every: Some(50),
        }
    }
}

impl<'a> TrainOptions<'a> {
    pub fn with_test_set(test_set: &'a Dataset) -> Self {
        TrainOptions {
            test_set: Some(test_set),
            ..Default::default()
        }
    }
}

/// Runs `config.iterations` steps from `w0`, recording one row per iterate
/// (so `iterations + 1` rows in total).
pub fn train(
    w0: &WeightMatrix,
    ds: &Dataset,
    config: &OptimizerConfig,
    options: &TrainOptions<'_>,
    observers: &mut [&mut dyn Observer],
) -> Result<TrainTrace> {
    config.validate()?;
    let sam = match config.kind {
        OptimizerKind::Gd => None,
        OptimizerKind::Sam => Some((config.rho, config.normalize_perturbation)),
    };
    let test_every = options.test_every.max(1);
    let mut w = w0.clone();
    let mut trace = TrainTrace {
        config: config.clone(),
        rows: Vec::with_capacity(config.iterations + 1),
        checkpoints: Vec::new(),
        final_weights: w0.clone(),
        skipped_perturbations: Vec::new(),
    };

    for t in 0..=config.iterations {
        let (loss, train_margins, g) = loss_and_gradient(&w, ds).map_err(|e| e.at_iteration(t))?;
        let grad_norm = g.frobenius_norm();
        let (scale, _) = match sam {
            Some((rho, normalize)) => perturbation_scale(rho, normalize, grad_norm),
            None => (0.0, false),
        };
        let test_error = match options.test_set {
            Some(test) if t % test_every == 0 || t == config.iterations => {
                let m = margins(&w, test).map_err(|e| e.at_iteration(t))?;
                Some(error_from_margins(&m, test.multiplicity()))
            }
            _ => None,
        };
        let row = TraceRow {
            iteration: t,
            loss,
            fast_alignment: alignment(&w, &ds.basis().fast),
            slow_alignment: alignment(&w, &ds.basis().slow),
            train_error: error_from_margins(&train_margins, ds.multiplicity()),
            test_error,
            grad_norm,
            perturbation_scale: scale,
        };
        let snapshot = Snapshot {
            iteration: t,
            weights: &w,
            margins: &train_margins,
            dataset: ds,
            row: &row,
        };
        for obs in observers.iter_mut() {
            obs.observe(&snapshot);
        }
        trace.rows.push(row);
        if let Some(c) = options.checkpoint_every {
            if c > 0 && (t % c == 0 || t == config.iterations) {
                trace.checkpoints.push(Checkpoint {
                    iteration: t,
                    weights: w.clone(),
                });
            }
        }
        if t < config.iterations {
            let (next, _, skipped) = descend(&w, ds, &g, config.eta, sam).map_err(|e| e.at_iteration(t))?;
            if skipped {
                trace.skipped_perturbations.push(t);
            }
            w = next;
        }
    }
    trace.final_weights = w;
    Ok(trace)
}
