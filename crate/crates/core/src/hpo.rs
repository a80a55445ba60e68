//! Hold-out hyperparameter selection with approximate inner ERM, the final
//! retraining, and the post-hoc excess-risk analysis.
//!
//! The `n` rows are split once into `m` training and `μ` validation rows.
//! Each configuration is fitted on the training rows to within `ρ_in` of
//! its budgeted exact minimum, scored on the validation rows, and the first
//! minimizer in grid order is selected. The selected configuration is then
//! refitted on all `n` rows to within `ρ_out`.

use serde::{Deserialize, Serialize};

use crate::data::{split, DataSpec, Dataset};
use crate::error::{config_err, Error, Result};
use crate::model::{empirical_risk, HpGrid, HyperParams, LossKind, LossSpec, RiskEstimate, TestSample};
use crate::rng::{self, Stream};
use crate::trainer::{RecordedRun, TrainBudget, TrainResult};

/// Independent seeds for the split, the per-configuration fits, the final
/// refit and the fresh test samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedBundle {
    pub split: u64,
    pub train: u64,
    pub retrain: u64,
    pub eval: u64,
}

impl SeedBundle {
    pub fn from_base(base: u64) -> Self {
        SeedBundle {
            split: rng::derive(base, Stream::Split, 0),
            train: rng::derive(base, Stream::Train, 0),
            retrain: rng::derive(base, Stream::Retrain, 0),
            eval: rng::derive(base, Stream::Eval, 0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let training = [self.split, self.train, self.retrain];
        if training.contains(&self.eval) {
            return config_err("evaluation seed collides with a training seed");
        }
        Ok(())
    }

    /// Training seed of a configuration; depends on its values, not its
    /// position in the grid.
    pub fn lambda_seed(&self, hp: &HyperParams) -> u64 {
        config_seed(self.train, Stream::Train, hp)
    }

    pub fn retrain_seed(&self, hp: &HyperParams) -> u64 {
        config_seed(self.retrain, Stream::Retrain, hp)
    }
}

fn config_seed(parent: u64, stream: Stream, hp: &HyperParams) -> u64 {
    let hp = hp.normalized();
    [hp.depth as u64, hp.width as u64, hp.learning_rate.to_bits(), hp.batch_size as u64]
        .into_iter()
        .fold(parent, |s, v| rng::derive(s, stream, v))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HpoConfig {
    pub grid: HpGrid,
    pub m: usize,
    pub mu: usize,
    pub rho_in: f64,
    pub rho_out: f64,
    pub delta: f64,
    pub budget: TrainBudget,
    pub seeds: SeedBundle,
}

impl HpoConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.m == 0 || self.mu == 0 {
            return config_err("m and mu must be positive");
        }
        if self.m + self.mu > n {
            return Err(Error::Size {
                requested: self.m + self.mu,
                available: n,
            });
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return config_err(format!("delta must lie in (0,1), got {}", self.delta));
        }
        for (name, rho) in [("rho_in", self.rho_in), ("rho_out", self.rho_out)] {
            if rho.is_nan() || rho < 0.0 {
                return config_err(format!("{name} must be non-negative, got {rho}"));
            }
        }
        self.budget.validate()?;
        self.seeds.validate()
    }
}

/// First index attaining the minimum; NaN never wins.
pub fn argmin_first(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if v.is_nan() {
            continue;
        }
        match best {
            Some(b) if values[b] <= v => {}
            _ => best = Some(i),
        }
    }
    best
}

/// Exact runs of every configuration on the training rows, kept so that the
/// inner problem can be re-solved for any `ρ_in` without retraining.
pub struct InnerRuns {
    pub train: Dataset,
    pub validation: Dataset,
    pub runs: Vec<RecordedRun>,
}

impl InnerRuns {
    pub fn record(data: &Dataset, cfg: &HpoConfig, loss: &LossSpec) -> Result<Self> {
        cfg.validate(data.count())?;
        let (train, validation) = split(data, cfg.m, cfg.mu, cfg.seeds.split)?;
        let mut runs = Vec::with_capacity(cfg.grid.len());
        for (i, hp) in cfg.grid.configs().iter().enumerate() {
            let run = RecordedRun::record(&train, hp, loss, &cfg.budget, cfg.seeds.lambda_seed(hp)).map_err(|e| {
                Error::Lambda {
                    index: i,
                    source: Box::new(e),
                }
            })?;
            runs.push(run);
        }
        Ok(InnerRuns {
            train,
            validation,
            runs,
        })
    }

    pub fn steps_exact_total(&self) -> usize {
        self.runs.iter().map(|r| r.exact().steps_used).sum()
    }

    pub fn select(&self, grid: &HpGrid, rho_in: f64, loss: &LossSpec) -> Result<Selection> {
        let mut per_lambda = Vec::with_capacity(self.runs.len());
        let mut validation_risks = Vec::with_capacity(self.runs.len());
        for (i, run) in self.runs.iter().enumerate() {
            let res = run.approx(rho_in, run.reference_min()).map_err(|e| Error::Lambda {
                index: i,
                source: Box::new(e),
            })?;
            validation_risks.push(empirical_risk(&res.model, &self.validation, loss)?);
            per_lambda.push(res);
        }
        let lambda_index = argmin_first(&validation_risks).ok_or_else(|| Error::Domain("no finite validation risk".into()))?;
        Ok(Selection {
            lambda_index,
            lambda_hat: grid.configs()[lambda_index],
            references: self.runs.iter().map(|r| r.reference_min()).collect(),
            per_lambda,
            validation_risks,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub lambda_index: usize,
    pub lambda_hat: HyperParams,
    pub per_lambda: Vec<TrainResult>,
    pub references: Vec<f64>,
    pub validation_risks: Vec<f64>,
}

impl Selection {
    pub fn steps_total(&self) -> usize {
        self.per_lambda.iter().map(|r| r.steps_used).sum()
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["lambda_index", "depth", "width", "lr", "batch", "val_risk", "steps"])?;
        for (i, (res, v)) in self.per_lambda.iter().zip(&self.validation_risks).enumerate() {
            let hp = res.model.hp;
            w.write_record([
                i.to_string(),
                hp.depth.to_string(),
                hp.width.to_string(),
                hp.learning_rate.to_string(),
                hp.batch_size.to_string(),
                format!("{v:.17e}"),
                res.steps_used.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Split, fit every configuration to within `ρ_in`, and select by validation risk.
pub fn select_hp(data: &Dataset, cfg: &HpoConfig, loss: &LossSpec) -> Result<Selection> {
    InnerRuns::record(data, cfg, loss)?.select(&cfg.grid, cfg.rho_in, loss)
}

/// Final fit of the selected configuration on all rows, to within `ρ_out`
/// of its own exact reference on those rows.
pub fn retrain_full(data: &Dataset, lambda_index: usize, cfg: &HpoConfig, loss: &LossSpec) -> Result<(TrainResult, RecordedRun)> {
    let hp = cfg
        .grid
        .configs()
        .get(lambda_index)
        .ok_or_else(|| Error::Config(format!("no configuration #{lambda_index}")))?;
    let run = RecordedRun::record(data, hp, loss, &cfg.budget, cfg.seeds.retrain_seed(hp))?;
    let res = run.approx(cfg.rho_out, run.reference_min())?;
    Ok((res, run))
}

/// Empirical risk improvement `E_n(hold-in) − E_n(retrained)`; may be negative.
pub fn improvement(holdin: &TrainResult, retrained: &TrainResult, data_n: &Dataset, loss: &LossSpec) -> Result<f64> {
    Ok(empirical_risk(&holdin.model, data_n, loss)? - empirical_risk(&retrained.model, data_n, loss)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HpoOutcome {
    pub lambda_index: usize,
    pub lambda_hat: HyperParams,
    pub holdin_model: TrainResult,
    pub retrained_model: TrainResult,
    pub validation_risks: Vec<f64>,
    pub improvement_i: f64,
    pub steps_inner_total: usize,
    pub steps_inner_exact: usize,
    pub steps_retrain: usize,
    pub steps_retrain_exact: usize,
}

impl HpoOutcome {
    pub fn assemble(selection: &Selection, inner_exact: usize, retrained: TrainResult, retrain_exact: usize, data_n: &Dataset, loss: &LossSpec) -> Result<Self> {
        let holdin = selection.per_lambda[selection.lambda_index].clone();
        let improvement_i = improvement(&holdin, &retrained, data_n, loss)?;
        Ok(HpoOutcome {
            lambda_index: selection.lambda_index,
            lambda_hat: selection.lambda_hat,
            steps_inner_total: selection.steps_total(),
            steps_inner_exact: inner_exact,
            steps_retrain: retrained.steps_used,
            steps_retrain_exact: retrain_exact,
            holdin_model: holdin,
            retrained_model: retrained,
            validation_risks: selection.validation_risks.clone(),
            improvement_i,
        })
    }
}

/// Complete run: selection, retraining and the improvement `I`.
pub fn run_hpo(data: &Dataset, cfg: &HpoConfig, loss: &LossSpec) -> Result<(HpoOutcome, Selection)> {
    let inner = InnerRuns::record(data, cfg, loss)?;
    let selection = inner.select(&cfg.grid, cfg.rho_in, loss)?;
    let (retrained, run) = retrain_full(data, selection.lambda_index, cfg, loss)?;
    let outcome = HpoOutcome::assemble(&selection, inner.steps_exact_total(), retrained, run.exact().steps_used, data, loss)?;
    Ok((outcome, selection))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleChoice {
    pub index: usize,
    pub lambda_bar: HyperParams,
    pub true_risks: Vec<RiskEstimate>,
}

/// Configuration whose hold-in model has the smallest estimated true risk.
pub fn oracle_from_risks(per_lambda: &[TrainResult], true_risks: Vec<RiskEstimate>) -> Result<OracleChoice> {
    let values: Vec<f64> = true_risks.iter().map(|r| r.risk).collect();
    let index = argmin_first(&values).ok_or_else(|| Error::Domain("no trained configurations".into()))?;
    Ok(OracleChoice {
        index,
        lambda_bar: per_lambda[index].model.hp,
        true_risks,
    })
}

pub fn oracle_hp(per_lambda: &[TrainResult], spec: &DataSpec, loss: &LossSpec, test_count: usize, eval_seed: u64) -> Result<OracleChoice> {
    let test = TestSample::draw(spec, test_count, eval_seed)?;
    oracle_on(per_lambda, &test, loss)
}

pub fn oracle_on(per_lambda: &[TrainResult], test: &TestSample, loss: &LossSpec) -> Result<OracleChoice> {
    let risks = per_lambda.iter().map(|r| test.estimate(&r.model, loss)).collect();
    oracle_from_risks(per_lambda, risks)
}

/// Relative threshold under which the two deployable models count as tied.
pub const TIE_RELATIVE: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskReport {
    pub true_risk_holdin: RiskEstimate,
    pub true_risk_retrained: RiskEstimate,
    pub true_risk_oracle_holdin: RiskEstimate,
    pub zero_one_holdin: f64,
    pub zero_one_retrained: f64,
    pub lambda_bar: HyperParams,
    pub lambda_bar_index: usize,
    /// Model class mis-specification: `E(g̃_λ̂) − E(g̃_λ̄)`.
    pub e_mcm_hat: f64,
    /// Hold-in risk: `E(g̃_λ̂) − E(f̃_λ̂)`.
    pub e_hin_hat: f64,
    /// `100·(E(g̃_λ̂) − E(g̃_λ̄)) / E(g̃_λ̄)`, or the plain difference when the
    /// oracle risk is zero.
    pub delta_tilde: f64,
    pub matched_oracle: bool,
    pub tie_within_1e5: bool,
}

fn relative_gap(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Post-hoc report from already estimated true risks on one shared test sample.
pub fn report_from(
    outcome: &HpoOutcome,
    oracle: &OracleChoice,
    holdin: RiskEstimate,
    retrained: RiskEstimate,
    zero_one: (f64, f64),
) -> RiskReport {
    let oracle_risk = oracle.true_risks[oracle.index];
    let e_mcm_hat = holdin.risk - oracle_risk.risk;
    let delta_tilde = if oracle_risk.risk > 0.0 {
        100.0 * e_mcm_hat / oracle_risk.risk
    } else {
        e_mcm_hat
    };
    RiskReport {
        true_risk_holdin: holdin,
        true_risk_retrained: retrained,
        true_risk_oracle_holdin: oracle_risk,
        zero_one_holdin: zero_one.0,
        zero_one_retrained: zero_one.1,
        lambda_bar: oracle.lambda_bar,
        lambda_bar_index: oracle.index,
        e_mcm_hat,
        e_hin_hat: holdin.risk - retrained.risk,
        delta_tilde,
        matched_oracle: outcome.lambda_index == oracle.index,
        tie_within_1e5: relative_gap(holdin.risk, retrained.risk) <= TIE_RELATIVE,
    }
}

pub fn risk_report_on(outcome: &HpoOutcome, per_lambda: &[TrainResult], test: &TestSample, loss: &LossSpec) -> Result<RiskReport> {
    let oracle = oracle_on(per_lambda, test, loss)?;
    let holdin = oracle.true_risks[outcome.lambda_index];
    let retrained = test.estimate(&outcome.retrained_model.model, loss);
    let zo = LossSpec {
        kind: LossKind::ZeroOne,
        ..*loss
    };
    let zero_one = (
        test.estimate(&outcome.holdin_model.model, &zo).risk,
        test.estimate(&outcome.retrained_model.model, &zo).risk,
    );
    Ok(report_from(outcome, &oracle, holdin, retrained, zero_one))
}

pub fn risk_report(
    outcome: &HpoOutcome,
    per_lambda: &[TrainResult],
    spec: &DataSpec,
    loss: &LossSpec,
    test_count: usize,
    eval_seed: u64,
) -> Result<RiskReport> {
    let test = TestSample::draw(spec, test_count, eval_seed)?;
    risk_report_on(outcome, per_lambda, &test, loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate;

    #[test]
    fn argmin_takes_first_minimum() {
        assert_eq!(argmin_first(&[0.3, 0.1, 0.1, 0.2]), Some(1));
        assert_eq!(argmin_first(&[f64::NAN, 0.5]), Some(1));
        assert_eq!(argmin_first(&[]), None);
    }

    #[test]
    fn seed_bundle_is_disjoint() {
        let s = SeedBundle::from_base(123);
        s.validate().unwrap();
        let bad = SeedBundle { eval: s.train, ..s };
        assert!(bad.validate().is_err());
    }

    fn small_cfg(grid: HpGrid, m: usize, mu: usize) -> HpoConfig {
        HpoConfig {
            grid,
            m,
            mu,
            rho_in: 0.01,
            rho_out: 0.01,
            delta: 0.05,
            budget: TrainBudget {
                max_epochs: 4,
                restarts: 2,
                ..TrainBudget::default()
            },
            seeds: SeedBundle::from_base(5),
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = small_cfg(HpGrid::linear(), 90, 20);
        assert!(matches!(cfg.validate(100), Err(Error::Size { .. })));
        cfg.mu = 10;
        cfg.validate(100).unwrap();
        cfg.delta = 1.0;
        assert!(cfg.validate(100).is_err());
    }

    #[test]
    fn singleton_grid_selects_its_config() {
        let data = generate(&DataSpec::default(), 120, 1).unwrap();
        let grid = HpGrid::new(vec![HyperParams::new(1, 4, 0.1, 8).unwrap()]).unwrap();
        let cfg = small_cfg(grid.clone(), 100, 20);
        let sel = select_hp(&data, &cfg, &LossSpec::default()).unwrap();
        assert_eq!(sel.lambda_index, 0);
        assert_eq!(sel.lambda_hat, grid.configs()[0]);
    }

    #[test]
    fn outcome_improvement_is_recomputable() {
        let data = generate(&DataSpec::default(), 150, 2).unwrap();
        let cfg = small_cfg(HpGrid::linear(), 120, 30);
        let loss = LossSpec::default();
        let (out, sel) = run_hpo(&data, &cfg, &loss).unwrap();
        let again = empirical_risk(&out.holdin_model.model, &data, &loss).unwrap()
            - empirical_risk(&out.retrained_model.model, &data, &loss).unwrap();
        assert!((out.improvement_i - again).abs() <= 1e-12);
        let best = out.validation_risks[out.lambda_index];
        assert!(out.validation_risks.iter().all(|&v| best <= v));
        assert_eq!(sel.per_lambda[out.lambda_index], out.holdin_model);
        let json = serde_json::to_string(&out).unwrap();
        let back: HpoOutcome = serde_json::from_str(&json).unwrap();
        assert_eq!(back.lambda_index, out.lambda_index);
    }

    #[test]
    fn identical_models_give_zero_improvement() {
        let data = generate(&DataSpec::default(), 60, 3).unwrap();
        let loss = LossSpec::default();
        let r = crate::trainer::exact_erm(
            &data,
            &HyperParams::linear(0.1, 8),
            &loss,
            &TrainBudget {
                max_epochs: 2,
                restarts: 1,
                ..TrainBudget::default()
            },
            0,
        )
        .unwrap();
        assert_eq!(improvement(&r, &r, &data, &loss).unwrap(), 0.0);
    }

    #[test]
    fn selection_csv_columns() {
        let data = generate(&DataSpec::default(), 150, 2).unwrap();
        let cfg = small_cfg(HpGrid::linear(), 120, 30);
        let sel = select_hp(&data, &cfg, &LossSpec::default()).unwrap();
        let mut buf = Vec::new();
        sel.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "lambda_index,depth,width,lr,batch,val_risk,steps");
        assert_eq!(text.lines().count(), 7);
    }
}
