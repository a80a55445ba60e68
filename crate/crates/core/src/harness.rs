//! Experiment sweeps: the retrain-or-not choice, the data-dependent inner
//! tolerance and the iterative outer-tolerance controller.
//!
//! A sweep is split into units, one per `(n, μ/n, trial)`. Each unit draws
//! its data, records the exact inner runs once, and answers every tolerance
//! setting of the plan from those recordings. Units run on a rayon pool and
//! their rows are concatenated in unit order, so the output does not depend
//! on the number of threads.

use std::collections::HashMap;
use std::io::Write;
use std::num::NonZeroUsize;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{generate, DataSpec, Dataset};
use crate::error::{config_err, Error, Result};
use crate::heuristics::{h1_choose, h1_threshold, h2_rho_in, h3_kappa, Choice, H3Decision, H3State};
use crate::hpo::{improvement, oracle_from_risks, report_from, HpoConfig, HpoOutcome, InnerRuns, OracleChoice, RiskReport, SeedBundle};
use crate::model::{HpGrid, LossKind, LossSpec, RiskEstimate, TestSample, MIN_TEST_COUNT};
use crate::rng::{self, Stream};
use crate::trainer::{CheckpointId, RecordedRun, TrainBudget, TrainResult};

pub const SCHEMA_LINE: &str = "# schema=v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridName {
    Grid36,
    Grid18,
    Linear,
}

impl GridName {
    pub fn grid(self) -> HpGrid {
        match self {
            GridName::Grid36 => HpGrid::grid36(),
            GridName::Grid18 => HpGrid::grid18(),
            GridName::Linear => HpGrid::linear(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RhoMode {
    /// Explicit `(ρ_in, ρ_out)` pairs.
    Fixed { pairs: Vec<(f64, f64)> },
    /// `ρ_in` from the inner-tolerance rule for each γ in the plan; exact retraining.
    H2Driven,
    /// `ρ_out` from the controller for each γ in the plan; `ρ_in` from the
    /// inner-tolerance rule at `rho_in_gamma`.
    H3Driven { nu: f64, rho_in_gamma: f64 },
}

impl RhoMode {
    /// `ρ_in ∈ {1e-4, 1e-3, 1e-2, 1e-1}`, each with `ρ_out ∈ {ρ_in, 10·ρ_in}`.
    pub fn standard_pairs() -> Self {
        let mut pairs = Vec::new();
        for rho_in in [1e-4, 1e-3, 1e-2, 1e-1] {
            pairs.push((rho_in, rho_in));
            pairs.push((rho_in, 10.0 * rho_in));
        }
        RhoMode::Fixed { pairs }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentPlan {
    pub n_values: Vec<usize>,
    pub mu_fractions: Vec<f64>,
    pub grid_name: GridName,
    /// Replaces the named grid when present.
    pub custom_grid: Option<HpGrid>,
    pub trials: usize,
    pub delta: f64,
    pub gamma_values: Vec<f64>,
    pub rho_mode: RhoMode,
    pub base_seed: u64,
    pub data: DataSpec,
    pub loss: LossSpec,
    pub budget: TrainBudget,
    pub test_count: usize,
    /// Safety cap on controller levels.
    pub max_h3_levels: usize,
    /// Checkpoint spacing (in steps) for the final fits on all `n` rows;
    /// `None` keeps the inner budget's spacing.
    pub retrain_checkpoint_every: Option<NonZeroUsize>,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        ExperimentPlan {
            n_values: (9..=14).map(|k| 1usize << k).collect(),
            mu_fractions: vec![0.1, 0.3, 0.5],
            grid_name: GridName::Grid36,
            custom_grid: None,
            trials: 10,
            delta: 0.05,
            gamma_values: vec![0.1, 1.0, 10.0],
            rho_mode: RhoMode::standard_pairs(),
            base_seed: 0,
            data: DataSpec::default(),
            loss: LossSpec::default(),
            budget: TrainBudget::default(),
            test_count: 100_000,
            max_h3_levels: 40,
            retrain_checkpoint_every: None,
        }
    }
}

impl ExperimentPlan {
    pub fn grid(&self) -> HpGrid {
        self.custom_grid.clone().unwrap_or_else(|| self.grid_name.grid())
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_values.is_empty() || self.mu_fractions.is_empty() || self.gamma_values.is_empty() {
            return config_err("n_values, mu_fractions and gamma_values must be non-empty");
        }
        if self.trials == 0 {
            return config_err("trials must be at least 1");
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return config_err(format!("delta must lie in (0,1), got {}", self.delta));
        }
        if self.gamma_values.iter().any(|g| !(*g >= 0.0 && g.is_finite())) {
            return config_err("gamma values must be finite and non-negative");
        }
        for &f in &self.mu_fractions {
            if !(f > 0.0 && f < 1.0) {
                return config_err(format!("mu fraction must lie in (0,1), got {f}"));
            }
            for &n in &self.n_values {
                let (m, mu) = split_sizes(n, f);
                if m == 0 || mu == 0 {
                    return config_err(format!("n={n} with mu fraction {f} leaves an empty side"));
                }
            }
        }
        match &self.rho_mode {
            RhoMode::Fixed { pairs } => {
                if pairs.is_empty() {
                    return config_err("fixed tolerance mode needs at least one pair");
                }
                if pairs.iter().flat_map(|&(a, b)| [a, b]).any(|r| r.is_nan() || r < 0.0) {
                    return config_err("tolerances must be non-negative");
                }
            }
            RhoMode::H2Driven => {}
            RhoMode::H3Driven { nu, rho_in_gamma } => {
                if !(*nu > 0.0 && *nu < 1.0) {
                    return config_err(format!("nu must lie in (0,1), got {nu}"));
                }
                if !(*rho_in_gamma > 0.0 && rho_in_gamma.is_finite()) {
                    return config_err("rho_in_gamma must be positive");
                }
            }
        }
        if self.test_count < MIN_TEST_COUNT {
            return config_err(format!("test_count must be at least {MIN_TEST_COUNT}"));
        }
        self.data.validate()?;
        self.loss.validate()?;
        self.budget.validate()
    }

    fn units(&self) -> Vec<Unit> {
        let mut units = Vec::new();
        for (ni, &n) in self.n_values.iter().enumerate() {
            for (fi, &f) in self.mu_fractions.iter().enumerate() {
                for trial in 0..self.trials {
                    units.push(Unit {
                        n,
                        n_index: ni,
                        mu_fraction: f,
                        mu_index: fi,
                        trial,
                    });
                }
            }
        }
        units
    }

    fn data_seed(&self, n: usize, trial: usize) -> u64 {
        let s = rng::derive(self.base_seed, Stream::Draw, n as u64);
        rng::derive(s, Stream::Draw, trial as u64)
    }

    fn unit_seeds(&self, unit: &Unit) -> SeedBundle {
        let s = rng::derive(self.base_seed, Stream::Trial, unit.n_index as u64);
        let s = rng::derive(s, Stream::Trial, unit.mu_index as u64);
        SeedBundle::from_base(rng::derive(s, Stream::Trial, unit.trial as u64))
    }
}

/// `μ = round(f·n)` validation rows, the rest for training.
pub fn split_sizes(n: usize, mu_fraction: f64) -> (usize, usize) {
    let mu = ((mu_fraction * n as f64).round() as usize).min(n);
    (n - mu, mu)
}

#[derive(Clone, Copy, Debug)]
struct Unit {
    n: usize,
    n_index: usize,
    mu_fraction: f64,
    mu_index: usize,
    trial: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Choice,
    Tolerance,
    H3,
}

impl Experiment {
    pub fn as_str(self) -> &'static str {
        match self {
            Experiment::Choice => "choice",
            Experiment::Tolerance => "tolerance",
            Experiment::H3 => "h3",
        }
    }
}

/// One result row. Excess risks are true risks (surrogate loss) with the
/// Bayes risk taken as zero. Failed runs keep their key fields, carry the
/// error in `error` and have NaN everywhere else.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRow {
    pub experiment: Experiment,
    pub n: usize,
    pub mu_fraction: f64,
    pub trial: usize,
    pub gamma: f64,
    pub rho_in: f64,
    pub rho_out: f64,
    pub lambda_index: usize,
    pub lambda_bar_index: usize,
    pub excess_risk_holdin: f64,
    pub excess_risk_retrained: f64,
    pub excess_risk_choice: f64,
    pub excess_risk_oracle: f64,
    /// Reference arm: exact inner ERM for the tolerance sweep, exact
    /// retraining for the controller sweep, the retrained model otherwise.
    pub excess_risk_exact: f64,
    pub zero_one_holdin: f64,
    pub zero_one_retrained: f64,
    pub improvement_i: f64,
    pub h1_threshold: f64,
    pub choice_made: String,
    pub matched_oracle: bool,
    pub delta_tilde: f64,
    pub e_mcm_hat: f64,
    pub e_hin_hat: f64,
    pub tie_within_1e5: bool,
    pub steps_exact: usize,
    pub steps_approx: usize,
    pub speedup: f64,
    pub speedup_honest: f64,
    pub error: String,
}

impl ExperimentRow {
    fn failed(experiment: Experiment, unit: &Unit, gamma: f64, rho: (f64, f64), err: &Error) -> Self {
        ExperimentRow {
            experiment,
            n: unit.n,
            mu_fraction: unit.mu_fraction,
            trial: unit.trial,
            gamma,
            rho_in: rho.0,
            rho_out: rho.1,
            lambda_index: 0,
            lambda_bar_index: 0,
            excess_risk_holdin: f64::NAN,
            excess_risk_retrained: f64::NAN,
            excess_risk_choice: f64::NAN,
            excess_risk_oracle: f64::NAN,
            excess_risk_exact: f64::NAN,
            zero_one_holdin: f64::NAN,
            zero_one_retrained: f64::NAN,
            improvement_i: f64::NAN,
            h1_threshold: f64::NAN,
            choice_made: String::new(),
            matched_oracle: false,
            delta_tilde: f64::NAN,
            e_mcm_hat: f64::NAN,
            e_hin_hat: f64::NAN,
            tie_within_1e5: false,
            steps_exact: 0,
            steps_approx: 0,
            speedup: f64::NAN,
            speedup_honest: f64::NAN,
            error: format!("{}: {err}", err.code()),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.error.is_empty()
    }

    pub fn choice(&self) -> Option<Choice> {
        self.choice_made.parse().ok()
    }
}

/// One controller step of the outer-tolerance sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct H3TraceRecord {
    pub n: usize,
    pub mu_fraction: f64,
    pub trial: usize,
    pub gamma: f64,
    #[serde(rename = "T")]
    pub iteration: usize,
    pub rho_out: f64,
    pub gamma_value: f64,
    pub decision: H3Decision,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
enum Role {
    Inner,
    Retrain,
}

/// One HPO solve at a given `(ρ_in, ρ_out)` with its post-hoc report.
struct Evaluation {
    outcome: HpoOutcome,
    oracle: OracleChoice,
    report: RiskReport,
    steps_exact: usize,
    steps_approx: usize,
    steps_honest: usize,
}

/// Everything one `(n, μ/n, trial)` unit shares across tolerance settings.
struct UnitRun<'a> {
    plan: &'a ExperimentPlan,
    grid: HpGrid,
    unit: Unit,
    data: Dataset,
    cfg: HpoConfig,
    inner: InnerRuns,
    test: TestSample,
    retrains: HashMap<usize, RecordedRun>,
    risks: HashMap<(Role, usize, CheckpointId), (RiskEstimate, f64)>,
}

impl<'a> UnitRun<'a> {
    fn new(plan: &'a ExperimentPlan, unit: Unit) -> Result<Self> {
        let grid = plan.grid();
        let data = generate(&plan.data, unit.n, plan.data_seed(unit.n, unit.trial))?;
        let (m, mu) = split_sizes(unit.n, unit.mu_fraction);
        let cfg = HpoConfig {
            grid: grid.clone(),
            m,
            mu,
            rho_in: 0.0,
            rho_out: 0.0,
            delta: plan.delta,
            budget: plan.budget.clone(),
            seeds: plan.unit_seeds(&unit),
        };
        let inner = InnerRuns::record(&data, &cfg, &plan.loss)?;
        let test = TestSample::draw(&plan.data, plan.test_count, cfg.seeds.eval)?;
        Ok(UnitRun {
            plan,
            grid,
            unit,
            data,
            cfg,
            inner,
            test,
            retrains: HashMap::new(),
            risks: HashMap::new(),
        })
    }

    fn retrain_run(&mut self, index: usize) -> Result<&RecordedRun> {
        if !self.retrains.contains_key(&index) {
            let hp = self.grid.configs()[index];
            let budget = match self.plan.retrain_checkpoint_every {
                Some(k) => self.cfg.budget.with_checkpoint_every(k, self.data.count().div_ceil(hp.batch_size)),
                None => self.cfg.budget.clone(),
            };
            let run = RecordedRun::record(&self.data, &hp, &self.plan.loss, &budget, self.cfg.seeds.retrain_seed(&hp))?;
            self.retrains.insert(index, run);
        }
        Ok(&self.retrains[&index])
    }

    fn true_risk(&mut self, role: Role, index: usize, res: &TrainResult) -> (RiskEstimate, f64) {
        let key = (role, index, res.checkpoint);
        if let Some(v) = self.risks.get(&key) {
            return *v;
        }
        let surrogate = self.test.estimate(&res.model, &self.plan.loss);
        let zo = LossSpec {
            kind: LossKind::ZeroOne,
            ..self.plan.loss
        };
        let v = (surrogate, self.test.estimate(&res.model, &zo).risk);
        self.risks.insert(key, v);
        v
    }

    fn bound_terms(&self) -> (f64, usize, f64) {
        (self.plan.loss.bound, self.grid.len(), self.plan.delta)
    }

    fn evaluate(&mut self, rho_in: f64, rho_out: f64) -> Result<Evaluation> {
        let loss = self.plan.loss;
        let selection = self.inner.select(&self.grid, rho_in, &loss)?;
        let k = selection.lambda_index;
        let run = self.retrain_run(k)?;
        let retrained = run.approx(rho_out, run.reference_min())?;
        let retrain_exact = run.exact().steps_used;
        let outcome = HpoOutcome::assemble(&selection, self.inner.steps_exact_total(), retrained, retrain_exact, &self.data, &loss)?;

        let mut true_risks = Vec::with_capacity(selection.per_lambda.len());
        let mut zero_one_holdin = 0.0;
        for (i, res) in selection.per_lambda.iter().enumerate() {
            let (r, zo) = self.true_risk(Role::Inner, i, res);
            if i == k {
                zero_one_holdin = zo;
            }
            true_risks.push(r);
        }
        let (retrained_risk, zero_one_retrained) = self.true_risk(Role::Retrain, k, &outcome.retrained_model);
        let oracle = oracle_from_risks(&selection.per_lambda, true_risks)?;
        let report = report_from(&outcome, &oracle, oracle.true_risks[k], retrained_risk, (zero_one_holdin, zero_one_retrained));

        let mut steps_honest = 0;
        for run in &self.inner.runs {
            steps_honest += run.approx(rho_in, 0.0)?.steps_used;
        }
        Ok(Evaluation {
            steps_exact: outcome.steps_inner_exact,
            steps_approx: outcome.steps_inner_total,
            steps_honest,
            outcome,
            oracle,
            report,
        })
    }

    fn row(&self, experiment: Experiment, gamma: f64, rho: (f64, f64), ev: &Evaluation) -> Result<ExperimentRow> {
        let (bound, l, delta) = self.bound_terms();
        let threshold = h1_threshold(bound, l, delta, self.unit.n)?;
        let choice = h1_choose(ev.outcome.improvement_i, threshold);
        let r = &ev.report;
        let holdin = r.true_risk_holdin.risk;
        let retrained = r.true_risk_retrained.risk;
        Ok(ExperimentRow {
            experiment,
            n: self.unit.n,
            mu_fraction: self.unit.mu_fraction,
            trial: self.unit.trial,
            gamma,
            rho_in: rho.0,
            rho_out: rho.1,
            lambda_index: ev.outcome.lambda_index,
            lambda_bar_index: r.lambda_bar_index,
            excess_risk_holdin: holdin,
            excess_risk_retrained: retrained,
            excess_risk_choice: match choice {
                Choice::Retrained => retrained,
                Choice::HoldIn => holdin,
            },
            excess_risk_oracle: r.true_risk_oracle_holdin.risk,
            excess_risk_exact: retrained,
            zero_one_holdin: r.zero_one_holdin,
            zero_one_retrained: r.zero_one_retrained,
            improvement_i: ev.outcome.improvement_i,
            h1_threshold: threshold,
            choice_made: choice.as_str().to_string(),
            matched_oracle: r.matched_oracle,
            delta_tilde: r.delta_tilde,
            e_mcm_hat: r.e_mcm_hat,
            e_hin_hat: r.e_hin_hat,
            tie_within_1e5: r.tie_within_1e5,
            steps_exact: ev.steps_exact,
            steps_approx: ev.steps_approx,
            speedup: ratio(ev.steps_exact, ev.steps_approx),
            speedup_honest: ratio(ev.steps_exact, ev.steps_honest),
            error: String::new(),
        })
    }

    fn h2_rho_in(&self, gamma: f64) -> Result<f64> {
        let (bound, l, delta) = self.bound_terms();
        h2_rho_in(gamma, bound, l, delta, self.cfg.m, self.cfg.mu)
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        f64::NAN
    } else {
        num as f64 / den as f64
    }
}

fn choice_unit(plan: &ExperimentPlan, unit: Unit, pairs: &[(f64, f64)]) -> Vec<ExperimentRow> {
    let mut run = match UnitRun::new(plan, unit) {
        Ok(r) => r,
        Err(e) => {
            return pairs
                .iter()
                .map(|&p| ExperimentRow::failed(Experiment::Choice, &unit, f64::NAN, p, &e))
                .collect()
        }
    };
    pairs
        .iter()
        .map(|&p| {
            run.evaluate(p.0, p.1)
                .and_then(|ev| run.row(Experiment::Choice, f64::NAN, p, &ev))
                .unwrap_or_else(|e| ExperimentRow::failed(Experiment::Choice, &unit, f64::NAN, p, &e))
        })
        .collect()
}

fn tolerance_unit(plan: &ExperimentPlan, unit: Unit) -> Vec<ExperimentRow> {
    let fail_all = |e: &Error| {
        plan.gamma_values
            .iter()
            .map(|&g| ExperimentRow::failed(Experiment::Tolerance, &unit, g, (f64::NAN, 0.0), e))
            .collect::<Vec<_>>()
    };
    let mut run = match UnitRun::new(plan, unit) {
        Ok(r) => r,
        Err(e) => return fail_all(&e),
    };
    let exact = match run.evaluate(0.0, 0.0) {
        Ok(ev) => ev,
        Err(e) => return fail_all(&e),
    };
    plan.gamma_values
        .iter()
        .map(|&g| {
            let mut attempt = || -> Result<ExperimentRow> {
                let rho_in = run.h2_rho_in(g)?;
                let ev = run.evaluate(rho_in, 0.0)?;
                let mut row = run.row(Experiment::Tolerance, g, (rho_in, 0.0), &ev)?;
                row.excess_risk_exact = exact.report.true_risk_retrained.risk;
                Ok(row)
            };
            attempt().unwrap_or_else(|e| ExperimentRow::failed(Experiment::Tolerance, &unit, g, (f64::NAN, 0.0), &e))
        })
        .collect()
}

fn h3_unit(plan: &ExperimentPlan, unit: Unit, nu: f64, rho_in_gamma: f64) -> (Vec<ExperimentRow>, Vec<H3TraceRecord>) {
    let mut rows = Vec::new();
    let mut trace = Vec::new();
    let mut run = match UnitRun::new(plan, unit) {
        Ok(r) => r,
        Err(e) => {
            for &g in &plan.gamma_values {
                rows.push(ExperimentRow::failed(Experiment::H3, &unit, g, (f64::NAN, f64::NAN), &e));
            }
            return (rows, trace);
        }
    };
    for &g in &plan.gamma_values {
        match h3_single(&mut run, g, nu, rho_in_gamma, &mut trace) {
            Ok(row) => rows.push(row),
            Err(e) => rows.push(ExperimentRow::failed(Experiment::H3, &unit, g, (f64::NAN, f64::NAN), &e)),
        }
    }
    (rows, trace)
}

fn h3_single(run: &mut UnitRun, gamma: f64, nu: f64, rho_in_gamma: f64, trace: &mut Vec<H3TraceRecord>) -> Result<ExperimentRow> {
    let loss = run.plan.loss;
    let rho_in = run.h2_rho_in(rho_in_gamma)?;
    let (bound, l, delta) = run.bound_terms();
    let kappa = h3_kappa(rho_in, bound, l, delta, run.unit.n, run.cfg.m, run.cfg.mu)?;
    let ev = run.evaluate(rho_in, rho_in)?;
    let k = ev.outcome.lambda_index;
    let holdin = ev.outcome.holdin_model.clone();

    let recorded = run.retrain_run(k)?.clone();
    let reference = recorded.reference_min();
    let mut state = H3State::new(rho_in, kappa, nu)?;
    let mut levels = 0;
    while !state.terminated && levels < run.plan.max_h3_levels {
        let snap = recorded.approx(state.current_rho_out, reference)?;
        let value = improvement(&holdin, &snap, &run.data, &loss)?;
        let (next, decision) = state.step(value, gamma)?;
        trace.push(H3TraceRecord {
            n: run.unit.n,
            mu_fraction: run.unit.mu_fraction,
            trial: run.unit.trial,
            gamma,
            iteration: state.iteration,
            rho_out: state.current_rho_out,
            gamma_value: value,
            decision,
        });
        state = next;
        levels += 1;
    }
    let rho_out = state.final_rho_out();
    let deployed = recorded.approx(rho_out, reference)?;
    let exact = recorded.exact().clone();

    let (retrained_risk, zero_one_retrained) = run.true_risk(Role::Retrain, k, &deployed);
    let (exact_risk, _) = run.true_risk(Role::Retrain, k, &exact);
    let outcome = HpoOutcome {
        steps_retrain: deployed.steps_used,
        improvement_i: improvement(&holdin, &deployed, &run.data, &loss)?,
        retrained_model: deployed,
        ..ev.outcome
    };
    let report = report_from(
        &outcome,
        &ev.oracle,
        ev.report.true_risk_holdin,
        retrained_risk,
        (ev.report.zero_one_holdin, zero_one_retrained),
    );
    let steps_exact = exact.steps_used;
    let steps_approx = outcome.steps_retrain;
    let adjusted = Evaluation {
        outcome,
        oracle: ev.oracle,
        report,
        steps_exact,
        steps_approx,
        steps_honest: steps_approx,
    };
    let mut row = run.row(Experiment::H3, gamma, (rho_in, rho_out), &adjusted)?;
    row.excess_risk_exact = exact_risk.risk;
    row.speedup_honest = f64::NAN;
    Ok(row)
}

fn in_pool<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None => Ok(f()),
        Some(t) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(t.max(1))
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

/// Retrain-or-not sweep over the plan's fixed `(ρ_in, ρ_out)` pairs.
pub fn run_choice_experiment(plan: &ExperimentPlan, threads: Option<usize>) -> Result<Vec<ExperimentRow>> {
    plan.validate()?;
    let RhoMode::Fixed { pairs } = &plan.rho_mode else {
        return config_err("choice experiment needs fixed tolerance pairs");
    };
    let units = plan.units();
    let rows = in_pool(threads, || units.par_iter().map(|&u| choice_unit(plan, u, pairs)).collect::<Vec<_>>())?;
    Ok(rows.into_iter().flatten().collect())
}

/// Inner-tolerance sweep: `ρ_in` from the rule for each γ, compared with exact inner ERM.
pub fn run_tolerance_experiment(plan: &ExperimentPlan, threads: Option<usize>) -> Result<Vec<ExperimentRow>> {
    plan.validate()?;
    if plan.rho_mode != RhoMode::H2Driven {
        return config_err("tolerance experiment needs rho_mode h2_driven");
    }
    let units = plan.units();
    let rows = in_pool(threads, || units.par_iter().map(|&u| tolerance_unit(plan, u)).collect::<Vec<_>>())?;
    Ok(rows.into_iter().flatten().collect())
}

/// Outer-tolerance controller sweep for each γ of the plan.
pub fn run_h3_experiment(plan: &ExperimentPlan, threads: Option<usize>) -> Result<(Vec<ExperimentRow>, Vec<H3TraceRecord>)> {
    plan.validate()?;
    let RhoMode::H3Driven { nu, rho_in_gamma } = plan.rho_mode else {
        return config_err("controller experiment needs rho_mode h3_driven");
    };
    let units = plan.units();
    let parts = in_pool(threads, || {
        units
            .par_iter()
            .map(|&u| h3_unit(plan, u, nu, rho_in_gamma))
            .collect::<Vec<_>>()
    })?;
    let mut rows = Vec::new();
    let mut trace = Vec::new();
    for (r, t) in parts {
        rows.extend(r);
        trace.extend(t);
    }
    Ok((rows, trace))
}

/// Versioned CSV: a schema comment line, then a header and one record per item.
pub fn write_versioned_csv<T: Serialize, W: Write>(items: &[T], mut out: W) -> Result<()> {
    writeln!(out, "{SCHEMA_LINE}")?;
    let mut w = csv::Writer::from_writer(out);
    for item in items {
        w.serialize(item)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_versioned_csv<T: Serialize>(items: &[T], path: &Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_versioned_csv(items, std::io::BufWriter::new(f))
}

pub fn rows_to_bytes(rows: &[ExperimentRow]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_versioned_csv(rows, &mut buf)?;
    Ok(buf)
}

/// Parse experiment rows; comment lines are skipped.
pub fn read_rows<R: std::io::Read>(input: R) -> Result<Vec<ExperimentRow>> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(input);
    let mut rows = Vec::new();
    for rec in r.deserialize() {
        let row: ExperimentRow = rec.map_err(|e| Error::Parse {
            line: e.position().map(|p| p.line() as usize).unwrap_or(0),
            msg: e.to_string(),
        })?;
        rows.push(row);
    }
    Ok(rows)
}

pub fn load_rows(path: &Path) -> Result<Vec<ExperimentRow>> {
    read_rows(std::fs::File::open(path)?)
}
