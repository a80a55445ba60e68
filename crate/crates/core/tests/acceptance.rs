//! End-to-end acceptance checks. Prints one line per criterion.
//!
//! Criteria listed in `KNOWN_RED` are reported but do not fail the run;
//! every other failure exits with a nonzero status.

mod common;

use std::num::NonZeroUsize;
use std::process::ExitCode;
use std::time::Instant;

use common::{h1_oracle, h2_oracle, kappa_oracle, rel_err};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tolhpo::data::{generate, DataSpec};
use tolhpo::harness::{
    rows_to_bytes, run_choice_experiment, run_h3_experiment, run_tolerance_experiment, ExperimentPlan, ExperimentRow,
    GridName, RhoMode,
};
use tolhpo::heuristics::{h1_threshold, h2_rho_in, h3_kappa, H3Decision, H3State};
use tolhpo::hpo::{run_hpo, HpoConfig, SeedBundle};
use tolhpo::model::{init_model, HpGrid, HyperParams, LossSpec, Model};
use tolhpo::report::aggregate;
use tolhpo::trainer::{approx_erm, exact_erm, objective_and_gradient, TrainBudget};

/// Criteria whose failure is understood and recorded.
const KNOWN_RED: &[u32] = &[7];

const TEST_COUNT: usize = 20_000;

struct Outcome {
    id: u32,
    pass: bool,
    detail: String,
}

fn outcome(id: u32, pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        id,
        pass,
        detail: detail.into(),
    }
}

fn formulas() -> Outcome {
    let mut worst = 0.0f64;
    let worked = [
        (h1_threshold(1.0, 36, 0.05, 1024).unwrap(), 0.23924, 5e-6, h1_oracle(1.0, 36, 0.05, 1024)),
        (
            h2_rho_in(0.1, 1.0, 36, 0.05, 922, 102).unwrap(),
            0.06300,
            5e-6,
            h2_oracle(0.1, 1.0, 36, 0.05, 922, 102),
        ),
        (
            h3_kappa(0.063, 1.0, 36, 0.05, 1024, 922, 102).unwrap(),
            0.9334,
            5e-5,
            kappa_oracle(0.063, 1.0, 36, 0.05, 1024, 922, 102),
        ),
    ];
    let mut worked_ok = true;
    for (got, printed, tol, oracle) in worked {
        worked_ok &= (got - printed).abs() < tol;
        worst = worst.max(rel_err(got, oracle));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..100 {
        let b = rng.gen_range(0.1..10.0);
        let l = rng.gen_range(1..200usize);
        let delta = rng.gen_range(1e-4..0.999);
        let m = rng.gen_range(1..100_000usize);
        let mu = rng.gen_range(1..100_000usize);
        let n = m + mu;
        let gamma = rng.gen_range(0.0..20.0);
        let rho = rng.gen_range(0.0..1.0);
        worst = worst
            .max(rel_err(h1_threshold(b, l, delta, n).unwrap(), h1_oracle(b, l, delta, n)))
            .max(rel_err(h2_rho_in(gamma, b, l, delta, m, mu).unwrap(), h2_oracle(gamma, b, l, delta, m, mu)))
            .max(rel_err(h3_kappa(rho, b, l, delta, n, m, mu).unwrap(), kappa_oracle(rho, b, l, delta, n, m, mu)));
    }
    outcome(
        1,
        worked_ok && worst <= 1e-12,
        format!("worked values ok={worked_ok}, max rel err {worst:.2e} over 103 evaluations"),
    )
}

fn tolerance_contract() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let grid = HpGrid::grid36();
    let loss = LossSpec::default();
    let budget = TrainBudget {
        max_epochs: 10,
        restarts: 2,
        ..TrainBudget::default()
    };
    let mut violations = 0;
    let mut non_monotone = 0;
    for case in 0..50u64 {
        let count = rng.gen_range(100..400usize);
        let data = generate(&DataSpec::default(), count, 1000 + case).unwrap();
        let hp = &grid.configs()[rng.gen_range(0..grid.len())];
        let rho = 10f64.powf(rng.gen_range(-4.0..-1.0));
        let seed = rng.gen();
        let reference = exact_erm(&data, hp, &loss, &budget, seed).unwrap().achieved_risk;
        let a = approx_erm(&data, hp, &loss, rho, reference, &budget, seed).unwrap();
        let b = approx_erm(&data, hp, &loss, 2.0 * rho, reference, &budget, seed).unwrap();
        if a.achieved_risk > reference + rho || b.achieved_risk > reference + 2.0 * rho {
            violations += 1;
        }
        if b.steps_used > a.steps_used {
            non_monotone += 1;
        }
    }
    outcome(
        2,
        violations == 0 && non_monotone == 0,
        format!("50 cases: {violations} tolerance violations, {non_monotone} step-count inversions"),
    )
}

fn convex_improvement() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let loss = LossSpec::default();
    let mut worst = f64::INFINITY;
    for inst in 0..20u64 {
        let n = rng.gen_range(128..1024usize);
        let mu = ((n as f64) * rng.gen_range(0.1..0.5)).round() as usize;
        let data = generate(&DataSpec::default(), n, 500 + inst).unwrap();
        let cfg = HpoConfig {
            grid: HpGrid::linear(),
            m: n - mu,
            mu,
            rho_in: 0.0,
            rho_out: 0.0,
            delta: 0.05,
            budget: TrainBudget::default(),
            seeds: SeedBundle::from_base(inst),
        };
        let (out, _) = run_hpo(&data, &cfg, &loss).unwrap();
        worst = worst.min(out.improvement_i);
    }
    outcome(3, worst >= -1e-4, format!("20 instances: min I = {worst:.3e}"))
}

fn telescoping(rows: &[ExperimentRow]) -> Outcome {
    let ok: Vec<&ExperimentRow> = rows.iter().filter(|r| r.is_ok()).collect();
    let worst = ok
        .iter()
        .map(|r| (r.e_mcm_hat + r.excess_risk_oracle - r.excess_risk_holdin).abs())
        .fold(0.0f64, f64::max);
    let failed = rows.len() - ok.len();
    outcome(
        4,
        failed == 0 && !ok.is_empty() && worst <= 1e-12,
        format!("{} rows ({failed} failed), max residual {worst:.2e}", ok.len()),
    )
}

fn choice_plan() -> ExperimentPlan {
    ExperimentPlan {
        n_values: vec![512, 1024, 2048, 4096],
        mu_fractions: vec![0.1, 0.3, 0.5],
        grid_name: GridName::Grid18,
        trials: 10,
        rho_mode: RhoMode::standard_pairs(),
        test_count: TEST_COUNT,
        ..ExperimentPlan::default()
    }
}

fn choice_dominance(rows: &[ExperimentRow]) -> Outcome {
    let aggs = aggregate(rows);
    let good = aggs
        .iter()
        .filter(|a| a.choice_mean <= a.retrained_mean.min(a.holdin_mean) + a.choice_se)
        .count();
    let frac = good as f64 / aggs.len().max(1) as f64;
    let picked_retrain = rows.iter().filter(|r| r.choice_made == "retrain").count();
    outcome(
        5,
        !aggs.is_empty() && frac >= 0.7,
        format!(
            "{good}/{} cells within one standard error of the better arm ({:.0}%); retrain chosen in {picked_retrain}/{} rows",
            aggs.len(),
            100.0 * frac,
            rows.len()
        ),
    )
}

fn tolerance_plan() -> ExperimentPlan {
    ExperimentPlan {
        n_values: vec![4096],
        mu_fractions: vec![0.1],
        grid_name: GridName::Grid36,
        trials: 10,
        gamma_values: vec![0.1, 1.0],
        rho_mode: RhoMode::H2Driven,
        test_count: TEST_COUNT,
        ..ExperimentPlan::default()
    }
}

struct ArmSummary {
    speedup: f64,
    mean_speedup: f64,
    risk_ratio: f64,
}

/// Speedup as the ratio of summed steps over all trials.
fn summarize(rows: &[ExperimentRow], gamma: f64) -> ArmSummary {
    let arm: Vec<&ExperimentRow> = rows.iter().filter(|r| r.gamma == gamma && r.is_ok()).collect();
    let k = arm.len().max(1) as f64;
    let exact: usize = arm.iter().map(|r| r.steps_exact).sum();
    let approx: usize = arm.iter().map(|r| r.steps_approx).sum();
    let retrained = arm.iter().map(|r| r.excess_risk_retrained).sum::<f64>() / k;
    let reference = arm.iter().map(|r| r.excess_risk_exact).sum::<f64>() / k;
    ArmSummary {
        speedup: exact as f64 / approx.max(1) as f64,
        mean_speedup: arm.iter().map(|r| r.speedup).sum::<f64>() / k,
        risk_ratio: retrained / reference,
    }
}

fn inner_speedup(rows: &[ExperimentRow]) -> Outcome {
    let low = summarize(rows, 0.1);
    let high = summarize(rows, 1.0);
    let pass = low.speedup >= 1.5 && low.risk_ratio <= 1.1 && high.speedup >= 3.0;
    outcome(
        6,
        pass,
        format!(
            "gamma=0.1: speedup {:.2}x (per-trial mean {:.2}x), risk ratio {:.3}; gamma=1: speedup {:.2}x (mean {:.2}x), risk ratio {:.3}",
            low.speedup, low.mean_speedup, low.risk_ratio, high.speedup, high.mean_speedup, high.risk_ratio
        ),
    )
}

fn h3_plan() -> ExperimentPlan {
    ExperimentPlan {
        n_values: vec![1024],
        mu_fractions: vec![0.1],
        grid_name: GridName::Grid36,
        trials: 10,
        gamma_values: vec![0.005],
        rho_mode: RhoMode::H3Driven {
            nu: 0.5,
            rho_in_gamma: 0.1,
        },
        retrain_checkpoint_every: NonZeroUsize::new(8),
        test_count: TEST_COUNT,
        ..ExperimentPlan::default()
    }
}

fn injected_traces() -> Result<(), String> {
    let (state, rows) = H3State::new(0.1, 1.0, 0.5)
        .unwrap()
        .run_trace(&[0.50, 0.30, 0.29], 0.05)
        .unwrap();
    let decisions: Vec<H3Decision> = rows.iter().map(|r| r.decision).collect();
    if decisions != [H3Decision::Bootstrap, H3Decision::Reduce, H3Decision::Exit]
        || state.iteration != 2
        || state.final_rho_out() != 0.05
    {
        return Err(format!("three-level trace: {decisions:?}, final {}", state.final_rho_out()));
    }
    let (state, _) = H3State::new(0.1, 1.0, 0.5).unwrap().run_trace(&[0.3; 5], 0.05).unwrap();
    if !state.terminated || state.iteration != 1 {
        return Err(format!("constant trace stopped at T={}", state.iteration));
    }
    let steep: Vec<f64> = (0..12).map(|t| 0.5f64.powi(t)).collect();
    let (state, rows) = H3State::new(0.1, 1.0, 0.5).unwrap().run_trace(&steep, 1e-6).unwrap();
    let geometric = rows.iter().enumerate().all(|(t, r)| r.rho_out == 0.1 * 0.5f64.powi(t as i32));
    if state.terminated || !geometric || rows.len() != 12 {
        return Err("non-exiting trace is not geometric".into());
    }
    Ok(())
}

fn controller(rows: &[ExperimentRow]) -> Outcome {
    let traces = injected_traces();
    let ok: Vec<&ExperimentRow> = rows.iter().filter(|r| r.is_ok()).collect();
    let reduced = ok.iter().filter(|r| r.rho_out < r.rho_in).count();
    let s = summarize(rows, 0.005);
    let pass = traces.is_ok() && !ok.is_empty() && reduced == ok.len() && s.risk_ratio <= 1.15;
    outcome(
        7,
        pass,
        format!(
            "injected traces {}; rho_out < rho_in in {reduced}/{} trials; risk ratio {:.3}; retrain speedup {:.2}x",
            match &traces {
                Ok(()) => "ok".to_string(),
                Err(e) => e.clone(),
            },
            ok.len(),
            s.risk_ratio,
            s.speedup
        ),
    )
}

fn determinism() -> Outcome {
    let small = ExperimentPlan {
        n_values: vec![256, 512],
        mu_fractions: vec![0.1, 0.3],
        grid_name: GridName::Grid18,
        trials: 2,
        rho_mode: RhoMode::Fixed {
            pairs: vec![(1e-3, 1e-3), (1e-2, 1e-1)],
        },
        gamma_values: vec![0.1, 1.0],
        test_count: 10_000,
        budget: TrainBudget {
            max_epochs: 5,
            restarts: 2,
            ..TrainBudget::default()
        },
        ..ExperimentPlan::default()
    };
    let tol = ExperimentPlan {
        rho_mode: RhoMode::H2Driven,
        ..small.clone()
    };
    let h3 = ExperimentPlan {
        rho_mode: RhoMode::H3Driven {
            nu: 0.5,
            rho_in_gamma: 0.1,
        },
        gamma_values: vec![0.005],
        retrain_checkpoint_every: NonZeroUsize::new(8),
        ..small.clone()
    };
    let run_all = |threads: usize| -> Vec<Vec<u8>> {
        let (h3_rows, trace) = run_h3_experiment(&h3, Some(threads)).unwrap();
        let mut trace_bytes = Vec::new();
        tolhpo::harness::write_versioned_csv(&trace, &mut trace_bytes).unwrap();
        vec![
            rows_to_bytes(&run_choice_experiment(&small, Some(threads)).unwrap()).unwrap(),
            rows_to_bytes(&run_tolerance_experiment(&tol, Some(threads)).unwrap()).unwrap(),
            rows_to_bytes(&h3_rows).unwrap(),
            trace_bytes,
        ]
    };
    let one = run_all(1);
    let two = run_all(2);
    let again = run_all(1);
    let same = one == two && one == again;
    let bytes: usize = one.iter().map(Vec::len).sum();
    outcome(
        8,
        same,
        format!("choice, tolerance, controller and trace CSVs ({bytes} bytes) identical across 1/2/1 threads: {same}"),
    )
}

fn gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let loss = LossSpec::default();
    let mut worst = 0.0f64;
    for i in 0..20u64 {
        let depth = rng.gen_range(0..3usize);
        let width = rng.gen_range(2..8usize);
        let hp = HyperParams::new(depth, width, 0.1, 8).unwrap();
        let data = generate(&DataSpec::default(), rng.gen_range(10..60usize), 900 + i).unwrap();
        let mut model = init_model(&hp, data.n_features(), rng.gen()).unwrap();
        for p in model.params.iter_mut() {
            *p += rng.gen_range(-0.5..0.5);
        }
        let (_, grad) = objective_and_gradient(&model, &data, &loss);
        let h = 1e-6;
        let fd: Vec<f64> = (0..model.params.len())
            .map(|k| {
                let mut plus: Model = model.clone();
                plus.params[k] += h;
                let mut minus: Model = model.clone();
                minus.params[k] -= h;
                (objective_and_gradient(&plus, &data, &loss).0 - objective_and_gradient(&minus, &data, &loss).0)
                    / (2.0 * h)
            })
            .collect();
        let diff = grad.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm = grad.iter().map(|a| a * a).sum::<f64>().sqrt().max(fd.iter().map(|b| b * b).sum::<f64>().sqrt());
        worst = worst.max(if norm == 0.0 { diff } else { diff / norm });
    }
    outcome(9, worst <= 1e-4, format!("20 models: max relative gradient error {worst:.2e}"))
}

fn timed<T>(label: &str, f: impl FnOnce() -> T) -> T {
    let start = Instant::now();
    let v = f();
    eprintln!("[{label}: {:.1}s]", start.elapsed().as_secs_f64());
    v
}

fn main() -> ExitCode {
    let mut results = vec![
        timed("formulas", formulas),
        timed("tolerance contract", tolerance_contract),
        timed("convex improvement", convex_improvement),
        timed("gradients", gradients),
        timed("determinism", determinism),
    ];

    let choice_rows = timed("choice sweep", || run_choice_experiment(&choice_plan(), None).unwrap());
    results.push(choice_dominance(&choice_rows));
    let tol_rows = timed("tolerance sweep", || run_tolerance_experiment(&tolerance_plan(), None).unwrap());
    results.push(inner_speedup(&tol_rows));
    let (h3_rows, _) = timed("controller sweep", || run_h3_experiment(&h3_plan(), None).unwrap());
    results.push(controller(&h3_rows));

    let all: Vec<ExperimentRow> = choice_rows.into_iter().chain(tol_rows).chain(h3_rows).collect();
    results.push(telescoping(&all));
    results.sort_by_key(|o| o.id);

    let mut unexpected = 0;
    for o in &results {
        let known = KNOWN_RED.contains(&o.id);
        let tag = match (o.pass, known) {
            (true, false) => "PASS",
            (true, true) => "PASS (listed as known red)",
            (false, true) => "FAIL (known)",
            (false, false) => {
                unexpected += 1;
                "FAIL"
            }
        };
        println!("criterion {}: {tag} {}", o.id, o.detail);
    }
    if unexpected > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
