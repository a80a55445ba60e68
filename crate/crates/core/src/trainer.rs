//! SGD empirical risk minimization with restarts and tolerance stopping.
//!
//! Training is organised as a [`TrainSession`]: a deterministic sequence of
//! restarts, each one plain constant-step SGD over shuffled mini-batches,
//! with the full-sample empirical risk evaluated at every checkpoint. The
//! three entry points only differ in when they stop consuming checkpoints:
//!
//! * [`exact_erm`] runs every restart to plateau or budget and keeps the
//!   best checkpoint seen; its risk is the reference minimum `Ê_min`.
//! * [`approx_erm`] stops at the first checkpoint with risk `≤ Ê_min + ρ`.
//! * [`erm_with_schedule`] keeps going through a decreasing list of
//!   tolerances, snapshotting the first checkpoint that meets each level.
//!
//! With identical seeds all three walk the same trajectory, so a tolerance
//! stop is always a prefix of the exact run.

use std::num::NonZeroUsize;
use std::sync::Arc;

use ndarray::{s, Array1, Array2};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{config_err, Error, Result};
use crate::model::{init_model, risk_with, HyperParams, LossSpec, Model, Workspace};
use crate::rng::{self, Stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainBudget {
    /// Epochs per restart.
    pub max_epochs: usize,
    pub restarts: usize,
    /// SGD steps between risk evaluations; `None` means once per epoch.
    pub checkpoint_every: Option<NonZeroUsize>,
    /// Checkpoints without an improvement of `plateau_min_delta` before a restart ends.
    pub plateau_patience: usize,
    pub plateau_min_delta: f64,
}

impl Default for TrainBudget {
    fn default() -> Self {
        TrainBudget {
            max_epochs: 20,
            restarts: 5,
            checkpoint_every: None,
            plateau_patience: 10,
            plateau_min_delta: 1e-6,
        }
    }
}

impl TrainBudget {
    /// Same budget with a checkpoint every `every` steps; the plateau
    /// patience is scaled so that it spans as many epochs as before.
    pub fn with_checkpoint_every(&self, every: NonZeroUsize, steps_per_epoch: usize) -> Self {
        let per_checkpoint = match self.checkpoint_every {
            Some(k) => k.get(),
            None => steps_per_epoch.max(1),
        };
        let steps = self.plateau_patience * per_checkpoint;
        TrainBudget {
            checkpoint_every: Some(every),
            plateau_patience: steps.div_ceil(every.get()).max(1),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 || self.restarts == 0 || self.plateau_patience == 0 {
            return config_err("max_epochs, restarts and plateau_patience must be at least 1");
        }
        if !(self.plateau_min_delta >= 0.0) {
            return config_err("plateau_min_delta must be non-negative");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Tolerance,
    Budget,
    Plateau,
}

/// Where in a session a checkpoint was taken.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CheckpointId {
    pub restart: usize,
    /// Global step count (across restarts) at the checkpoint.
    pub step: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainResult {
    pub model: Model,
    pub achieved_risk: f64,
    pub steps_used: usize,
    pub trajectory: Vec<(usize, f64)>,
    pub stopped_by: StopReason,
    pub checkpoint: CheckpointId,
}

impl TrainResult {
    pub fn write_trajectory_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "empirical_risk"])?;
        for (step, risk) in &self.trajectory {
            w.write_record([step.to_string(), format!("{risk:.17e}")])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// One evaluated checkpoint of a session.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub id: CheckpointId,
    pub risk: f64,
    pub params: Arc<Vec<f64>>,
    /// Set when this checkpoint ends its restart.
    pub ends_restart: Option<StopReason>,
}

struct Restart {
    index: usize,
    model: Model,
    epoch: usize,
    /// Position inside the current epoch's permutation.
    cursor: usize,
    order: Vec<usize>,
    steps: usize,
    best: f64,
    stale: usize,
}

/// Deterministic, resumable training run over all restarts.
pub struct TrainSession<'a> {
    train: &'a Dataset,
    hp: HyperParams,
    loss: LossSpec,
    budget: TrainBudget,
    seed: u64,
    ws: Workspace,
    eval_ws: Workspace,
    grad: Vec<f64>,
    xb: Array2<f64>,
    yb: Array1<f64>,
    current: Option<Restart>,
    next_restart: usize,
    steps_total: usize,
    trajectory: Vec<(usize, f64)>,
    best: Option<Checkpoint>,
    best_reason: Option<StopReason>,
    last: Option<Checkpoint>,
}

impl<'a> TrainSession<'a> {
    pub fn new(train: &'a Dataset, hp: &HyperParams, loss: &LossSpec, budget: &TrainBudget, seed: u64) -> Result<Self> {
        hp.validate()?;
        loss.validate()?;
        budget.validate()?;
        if train.count() == 0 {
            return config_err("empty training set");
        }
        let batch = hp.batch_size.min(train.count());
        let proto = init_model(hp, train.n_features(), 0)?;
        let ws = Workspace::new(&proto, batch);
        let eval_ws = Workspace::new(&proto, train.count().min(2048));
        Ok(TrainSession {
            train,
            hp: hp.normalized(),
            loss: *loss,
            budget: budget.clone(),
            seed,
            ws,
            eval_ws,
            grad: vec![0.0; proto.params.len()],
            xb: Array2::zeros((batch, train.n_features())),
            yb: Array1::zeros(batch),
            current: None,
            next_restart: 0,
            steps_total: 0,
            trajectory: Vec::new(),
            best: None,
            best_reason: None,
            last: None,
        })
    }

    pub fn steps_total(&self) -> usize {
        self.steps_total
    }

    pub fn best(&self) -> Option<&Checkpoint> {
        self.best.as_ref()
    }

    fn steps_per_epoch(&self) -> usize {
        self.train.count().div_ceil(self.hp.batch_size)
    }

    fn start_restart(&mut self) -> Result<bool> {
        if self.next_restart >= self.budget.restarts {
            return Ok(false);
        }
        let index = self.next_restart;
        self.next_restart += 1;
        let run_seed = rng::derive(self.seed, Stream::Restart, index as u64);
        let model = init_model(&self.hp, self.train.n_features(), rng::derive(run_seed, Stream::Init, 0))?;
        let mut r = Restart {
            index,
            model,
            epoch: 0,
            cursor: 0,
            order: (0..self.train.count()).collect(),
            steps: 0,
            best: f64::INFINITY,
            stale: 0,
        };
        Self::shuffle(&mut r, run_seed);
        self.current = Some(r);
        Ok(true)
    }

    fn shuffle(r: &mut Restart, run_seed: u64) {
        r.order.sort_unstable();
        let epoch_seed = rng::derive(run_seed, Stream::Epoch, r.epoch as u64);
        r.order.shuffle(&mut rng::seeded(epoch_seed));
    }

    /// Train until the next checkpoint and evaluate it. `None` once every
    /// restart has finished.
    pub fn next_checkpoint(&mut self) -> Result<Option<Checkpoint>> {
        if self.current.is_none() && !self.start_restart()? {
            return Ok(None);
        }
        let per_epoch = self.steps_per_epoch();
        let every = self.budget.checkpoint_every.map(|v| v.get());
        let max_steps = per_epoch * self.budget.max_epochs;
        let lr = self.hp.learning_rate;
        let batch = self.hp.batch_size;
        let mut r = self.current.take().expect("active restart");
        let run_seed = rng::derive(self.seed, Stream::Restart, r.index as u64);

        loop {
            let end = (r.cursor + batch).min(r.order.len());
            let rows = end - r.cursor;
            for (k, &i) in r.order[r.cursor..end].iter().enumerate() {
                self.xb.row_mut(k).assign(&self.train.features.row(i));
                self.yb[k] = self.train.labels[i];
            }
            let x = self.xb.slice(s![..rows, ..]);
            let y = self.yb.slice(s![..rows]);
            let batch_loss = self.ws.loss_and_grad(&r.model, x, y, &self.loss, &mut self.grad);
            if !batch_loss.is_finite() {
                return Err(Error::Numeric {
                    step: self.steps_total,
                    restart: r.index,
                    detail: format!("batch loss {batch_loss} with {}", self.hp),
                });
            }
            for (p, g) in r.model.params.iter_mut().zip(&self.grad) {
                *p -= lr * g;
            }
            r.cursor = end;
            r.steps += 1;
            self.steps_total += 1;
            let epoch_done = r.cursor >= r.order.len();
            if epoch_done {
                r.epoch += 1;
                r.cursor = 0;
                Self::shuffle(&mut r, run_seed);
            }
            let at_checkpoint = match every {
                Some(k) => r.steps.is_multiple_of(k),
                None => epoch_done,
            };
            let exhausted = r.steps >= max_steps;
            if at_checkpoint || exhausted {
                break;
            }
        }

        let risk = risk_with(&mut self.eval_ws, &r.model, self.train, &self.loss);
        if !risk.is_finite() {
            return Err(Error::Numeric {
                step: self.steps_total,
                restart: r.index,
                detail: format!("empirical risk {risk} with {}", self.hp),
            });
        }
        self.trajectory.push((self.steps_total, risk));
        if risk < r.best - self.budget.plateau_min_delta {
            r.best = risk;
            r.stale = 0;
        } else {
            r.best = r.best.min(risk);
            r.stale += 1;
        }
        let ends_restart = if r.steps >= max_steps {
            Some(StopReason::Budget)
        } else if r.stale >= self.budget.plateau_patience {
            Some(StopReason::Plateau)
        } else {
            None
        };
        let cp = Checkpoint {
            id: CheckpointId {
                restart: r.index,
                step: self.steps_total,
            },
            risk,
            params: Arc::new(r.model.params.clone()),
            ends_restart,
        };
        let improves = self.best.as_ref().is_none_or(|b| risk < b.risk);
        if improves {
            self.best = Some(cp.clone());
            self.best_reason = None;
        }
        if let Some(reason) = ends_restart {
            if self.best.as_ref().is_some_and(|b| b.id.restart == r.index) {
                self.best_reason = Some(reason);
            }
        } else {
            self.current = Some(r);
        }
        self.last = Some(cp.clone());
        Ok(Some(cp))
    }

    fn result_from(&self, cp: &Checkpoint, stopped_by: StopReason) -> TrainResult {
        TrainResult {
            model: Model {
                hp: self.hp,
                n_features: self.train.n_features(),
                params: cp.params.as_ref().clone(),
            },
            achieved_risk: cp.risk,
            steps_used: self.steps_total,
            trajectory: self.trajectory.clone(),
            stopped_by,
            checkpoint: cp.id,
        }
    }

    /// The result of a run that stopped at the most recent checkpoint.
    pub fn stop_here(&self, reason: StopReason) -> Option<TrainResult> {
        self.last.as_ref().map(|cp| self.result_from(cp, reason))
    }

    /// The best checkpoint so far, as an exact-ERM result.
    pub fn best_result(&self) -> Option<TrainResult> {
        self.best.as_ref().map(|cp| {
            let reason = self.best_reason.unwrap_or(StopReason::Budget);
            self.result_from(cp, reason)
        })
    }

    /// Run to completion and return the best checkpoint.
    pub fn finish(&mut self) -> Result<TrainResult> {
        while self.next_checkpoint()?.is_some() {}
        Ok(self.best_result().expect("at least one checkpoint"))
    }

    /// Advance until a checkpoint with risk `≤ target`. Returns `None` if the
    /// session ends first.
    pub fn advance_to(&mut self, target: f64) -> Result<Option<TrainResult>> {
        if let Some(last) = &self.last {
            if last.risk <= target {
                return Ok(self.stop_here(StopReason::Tolerance));
            }
        }
        while let Some(cp) = self.next_checkpoint()? {
            if cp.risk <= target {
                return Ok(self.stop_here(StopReason::Tolerance));
            }
        }
        Ok(None)
    }
}

/// Budgeted "exact" ERM: best checkpoint over every restart.
pub fn exact_erm(train: &Dataset, hp: &HyperParams, loss: &LossSpec, budget: &TrainBudget, seed: u64) -> Result<TrainResult> {
    TrainSession::new(train, hp, loss, budget, seed)?.finish()
}

fn check_rho(rho: f64) -> Result<()> {
    if rho.is_nan() || rho < 0.0 {
        return config_err(format!("tolerance must be non-negative, got {rho}"));
    }
    Ok(())
}

/// Tolerance-stopped ERM. `rho = 0` is the exact run itself; `rho = ∞`
/// stops at the first checkpoint.
pub fn approx_erm(
    train: &Dataset,
    hp: &HyperParams,
    loss: &LossSpec,
    rho: f64,
    reference_min: f64,
    budget: &TrainBudget,
    seed: u64,
) -> Result<TrainResult> {
    check_rho(rho)?;
    let mut session = TrainSession::new(train, hp, loss, budget, seed)?;
    if rho == 0.0 {
        return session.finish();
    }
    match session.advance_to(reference_min + rho)? {
        Some(r) => Ok(r),
        None => Ok(session.best_result().expect("at least one checkpoint")),
    }
}

/// One training run, snapshotted at each level of a strictly decreasing
/// tolerance schedule. Levels that are never reached fall back to the
/// best checkpoint of the complete run.
pub fn erm_with_schedule(
    train: &Dataset,
    hp: &HyperParams,
    loss: &LossSpec,
    schedule: &[f64],
    reference_min: f64,
    budget: &TrainBudget,
    seed: u64,
) -> Result<Vec<(f64, TrainResult)>> {
    if schedule.is_empty() {
        return config_err("empty tolerance schedule");
    }
    for &rho in schedule {
        check_rho(rho)?;
    }
    if schedule.windows(2).any(|w| w[1] >= w[0]) {
        return config_err("tolerance schedule must be strictly decreasing");
    }
    let mut session = TrainSession::new(train, hp, loss, budget, seed)?;
    let mut out = Vec::with_capacity(schedule.len());
    for &rho in schedule {
        let snap = if rho == 0.0 {
            session.finish()?
        } else {
            match session.advance_to(reference_min + rho)? {
                Some(r) => r,
                None => session.best_result().expect("at least one checkpoint"),
            }
        };
        out.push((rho, snap));
    }
    Ok(out)
}

/// A completed exact run with every checkpoint kept, so tolerance-stopped
/// results for any `ρ` can be read off without retraining.
#[derive(Clone, Debug)]
pub struct RecordedRun {
    hp: HyperParams,
    n_features: usize,
    checkpoints: Vec<Checkpoint>,
    exact: TrainResult,
}

impl RecordedRun {
    pub fn record(train: &Dataset, hp: &HyperParams, loss: &LossSpec, budget: &TrainBudget, seed: u64) -> Result<Self> {
        let mut session = TrainSession::new(train, hp, loss, budget, seed)?;
        let mut checkpoints = Vec::new();
        while let Some(cp) = session.next_checkpoint()? {
            checkpoints.push(cp);
        }
        let exact = session.best_result().expect("at least one checkpoint");
        Ok(RecordedRun {
            hp: hp.normalized(),
            n_features: train.n_features(),
            checkpoints,
            exact,
        })
    }

    pub fn exact(&self) -> &TrainResult {
        &self.exact
    }

    pub fn reference_min(&self) -> f64 {
        self.exact.achieved_risk
    }

    pub fn checkpoints(&self) -> &[Checkpoint] {
        &self.checkpoints
    }

    /// Same result as [`approx_erm`] with the same inputs.
    pub fn approx(&self, rho: f64, reference_min: f64) -> Result<TrainResult> {
        check_rho(rho)?;
        if rho == 0.0 {
            return Ok(self.exact.clone());
        }
        let target = reference_min + rho;
        Ok(match self.checkpoints.iter().position(|c| c.risk <= target) {
            Some(k) => self.result_at(k, StopReason::Tolerance),
            None => self.exact.clone(),
        })
    }

    fn result_at(&self, k: usize, reason: StopReason) -> TrainResult {
        let cp = &self.checkpoints[k];
        TrainResult {
            model: Model {
                hp: self.hp,
                n_features: self.n_features,
                params: cp.params.as_ref().clone(),
            },
            achieved_risk: cp.risk,
            steps_used: cp.id.step,
            trajectory: self.checkpoints[..=k].iter().map(|c| (c.id.step, c.risk)).collect(),
            stopped_by: reason,
            checkpoint: cp.id,
        }
    }
}

/// Mean training objective and gradient over a whole dataset; used for
/// gradient checks.
pub fn objective_and_gradient(model: &Model, data: &Dataset, loss: &LossSpec) -> (f64, Vec<f64>) {
    let mut ws = Workspace::new(model, data.count());
    let mut grad = vec![0.0; model.params.len()];
    let v = ws.loss_and_grad(model, data.features.view(), data.labels.view(), loss, &mut grad);
    (v, grad)
}
