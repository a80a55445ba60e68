use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use tolhpo::data::{generate, DataSpec};
use tolhpo::harness::{self, ExperimentPlan, GridName};
use tolhpo::heuristics::{h1_choose, h1_threshold};
use tolhpo::hpo::{risk_report_on, run_hpo, HpoConfig, SeedBundle};
use tolhpo::model::{LossSpec, TestSample};
use tolhpo::report;
use tolhpo::rng::{self, Stream};
use tolhpo::trainer::TrainBudget;

#[derive(Parser)]
#[command(name = "tolhpo", version, about = "Hold-out HPO with explicit ERM tolerances")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON configuration file.
    config: PathBuf,
    /// Override the configuration's seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    /// Worker threads (default: rayon's choice).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Draw a synthetic dataset and write it as CSV.
    GenData(Common),
    /// One HPO run with its post-hoc risk report.
    Hpo(Common),
    /// Retrain-or-not sweep.
    ChoiceExp(Common),
    /// Data-dependent inner tolerance sweep.
    TolExp(Common),
    /// Outer-tolerance controller sweep.
    H3Exp(Common),
    /// Aggregate result CSVs into a table and plots.
    Report(Common),
}

#[derive(Deserialize)]
#[serde(default)]
struct GenDataConfig {
    data: DataSpec,
    count: usize,
    seed: u64,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        GenDataConfig {
            data: DataSpec::default(),
            count: 1024,
            seed: 0,
        }
    }
}

#[derive(Deserialize, Serialize)]
#[serde(default)]
struct HpoRunConfig {
    data: DataSpec,
    n: usize,
    grid_name: GridName,
    mu_fraction: f64,
    rho_in: f64,
    rho_out: f64,
    delta: f64,
    loss: LossSpec,
    budget: TrainBudget,
    test_count: usize,
    seed: u64,
}

impl Default for HpoRunConfig {
    fn default() -> Self {
        HpoRunConfig {
            data: DataSpec::default(),
            n: 1024,
            grid_name: GridName::Grid36,
            mu_fraction: 0.1,
            rho_in: 0.0,
            rho_out: 0.0,
            delta: 0.05,
            loss: LossSpec::default(),
            budget: TrainBudget::default(),
            test_count: 100_000,
            seed: 0,
        }
    }
}

#[derive(Deserialize)]
struct ReportConfig {
    inputs: Vec<PathBuf>,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> anyhow::Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn load_plan(c: &Common) -> anyhow::Result<ExperimentPlan> {
    let mut plan: ExperimentPlan = read_json(&c.config)?;
    if let Some(s) = c.seed {
        plan.base_seed = s;
    }
    fs::create_dir_all(&c.out_dir)?;
    Ok(plan)
}

fn gen_data(c: &Common) -> anyhow::Result<()> {
    let mut cfg: GenDataConfig = read_json(&c.config)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    fs::create_dir_all(&c.out_dir)?;
    let data = generate(&cfg.data, cfg.count, cfg.seed)?;
    let path = c.out_dir.join("data.csv");
    data.save_csv(&path)?;
    println!("wrote {} rows to {}", data.count(), path.display());
    Ok(())
}

fn hpo(c: &Common) -> anyhow::Result<()> {
    let mut cfg: HpoRunConfig = read_json(&c.config)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    fs::create_dir_all(&c.out_dir)?;
    let seeds = SeedBundle::from_base(cfg.seed);
    let data = generate(&cfg.data, cfg.n, rng::derive(cfg.seed, Stream::Draw, 0))?;
    let (m, mu) = harness::split_sizes(cfg.n, cfg.mu_fraction);
    let grid = cfg.grid_name.grid();
    let hcfg = HpoConfig {
        grid: grid.clone(),
        m,
        mu,
        rho_in: cfg.rho_in,
        rho_out: cfg.rho_out,
        delta: cfg.delta,
        budget: cfg.budget.clone(),
        seeds,
    };
    let (outcome, selection) = run_hpo(&data, &hcfg, &cfg.loss)?;
    let test = TestSample::draw(&cfg.data, cfg.test_count, seeds.eval)?;
    let rep = risk_report_on(&outcome, &selection.per_lambda, &test, &cfg.loss)?;
    let threshold = h1_threshold(cfg.loss.bound, grid.len(), cfg.delta, cfg.n)?;
    let choice = h1_choose(outcome.improvement_i, threshold);

    selection.write_csv(fs::File::create(c.out_dir.join("validation.csv"))?)?;
    write_json(&outcome, &c.out_dir.join("outcome.json"))?;
    write_json(&rep, &c.out_dir.join("report.json"))?;
    println!("selected #{} {}", outcome.lambda_index, outcome.lambda_hat);
    println!("oracle   #{} {}", rep.lambda_bar_index, rep.lambda_bar);
    println!(
        "I = {:.6e}, threshold = {:.6e} -> {}",
        outcome.improvement_i,
        threshold,
        choice.as_str()
    );
    println!(
        "true risk: hold-in {:.4e} ± {:.1e}, retrained {:.4e} ± {:.1e}",
        rep.true_risk_holdin.risk, rep.true_risk_holdin.std_err, rep.true_risk_retrained.risk, rep.true_risk_retrained.std_err
    );
    Ok(())
}

fn run_report(c: &Common) -> anyhow::Result<()> {
    let cfg: ReportConfig = read_json(&c.config)?;
    let out = report::report(&cfg.inputs, &c.out_dir)?;
    for w in &out.warnings {
        eprintln!("warning: {w}");
    }
    print!("{}", report::format_table(&out.aggregates));
    for p in &out.plots {
        println!("plot: {}", p.display());
    }
    Ok(())
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match &cli.cmd {
        Cmd::GenData(c) => gen_data(c),
        Cmd::Hpo(c) => hpo(c),
        Cmd::ChoiceExp(c) => {
            let plan = load_plan(c)?;
            let rows = harness::run_choice_experiment(&plan, c.threads)?;
            let path = c.out_dir.join("choice.csv");
            harness::save_versioned_csv(&rows, &path)?;
            println!("wrote {} rows to {}", rows.len(), path.display());
            Ok(())
        }
        Cmd::TolExp(c) => {
            let plan = load_plan(c)?;
            let rows = harness::run_tolerance_experiment(&plan, c.threads)?;
            let path = c.out_dir.join("tolerance.csv");
            harness::save_versioned_csv(&rows, &path)?;
            println!("wrote {} rows to {}", rows.len(), path.display());
            Ok(())
        }
        Cmd::H3Exp(c) => {
            let plan = load_plan(c)?;
            let (rows, trace) = harness::run_h3_experiment(&plan, c.threads)?;
            let path = c.out_dir.join("h3.csv");
            harness::save_versioned_csv(&rows, &path)?;
            harness::save_versioned_csv(&trace, &c.out_dir.join("h3_trace.csv"))?;
            println!("wrote {} rows to {}", rows.len(), path.display());
            Ok(())
        }
        Cmd::Report(c) => {
            if c.threads.is_some() || c.seed.is_some() {
                eprintln!("note: --seed and --threads have no effect on report");
            }
            run_report(c)
        }
    }
}
