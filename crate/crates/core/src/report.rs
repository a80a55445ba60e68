//! Aggregation of experiment rows into per-cell tables and log-log plots.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::{Experiment, ExperimentRow};

/// Mean and standard error of the mean over the finite values of a column.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanSe {
    pub mean: f64,
    pub se: f64,
}

impl MeanSe {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Self {
        let v: Vec<f64> = values.into_iter().filter(|x| x.is_finite()).collect();
        if v.is_empty() {
            return MeanSe {
                mean: f64::NAN,
                se: f64::NAN,
            };
        }
        let k = v.len() as f64;
        let mean = v.iter().sum::<f64>() / k;
        let se = if v.len() < 2 {
            0.0
        } else {
            let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (k - 1.0);
            (var / k).sqrt()
        };
        MeanSe { mean, se }
    }
}

/// Trials sharing everything but the trial index and `n` form a cell; one
/// aggregate row per `(cell, n)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub experiment: Experiment,
    pub cell: String,
    pub n: usize,
    pub trials: usize,
    pub failed: usize,
    pub holdin_mean: f64,
    pub holdin_se: f64,
    pub retrained_mean: f64,
    pub retrained_se: f64,
    pub choice_mean: f64,
    pub choice_se: f64,
    pub exact_mean: f64,
    pub exact_se: f64,
    pub speedup_mean: f64,
    pub speedup_se: f64,
    pub speedup_honest_mean: f64,
    pub speedup_honest_se: f64,
    pub rho_out_mean: f64,
}

/// Cell label, also used in plot file names.
pub fn cell_label(row: &ExperimentRow) -> String {
    match row.experiment {
        Experiment::Choice => format!("mu{}_rin{:e}_rout{:e}", row.mu_fraction, row.rho_in, row.rho_out),
        Experiment::Tolerance | Experiment::H3 => format!("mu{}_gamma{}", row.mu_fraction, row.gamma),
    }
}

pub fn aggregate(rows: &[ExperimentRow]) -> Vec<AggregateRow> {
    let mut groups: BTreeMap<(String, String, usize), Vec<&ExperimentRow>> = BTreeMap::new();
    for r in rows {
        groups
            .entry((r.experiment.as_str().to_string(), cell_label(r), r.n))
            .or_default()
            .push(r);
    }
    groups
        .into_values()
        .map(|g| {
            let ok: Vec<&ExperimentRow> = g.iter().copied().filter(|r| r.is_ok()).collect();
            let col = |f: fn(&ExperimentRow) -> f64| MeanSe::of(ok.iter().map(|r| f(r)));
            let holdin = col(|r| r.excess_risk_holdin);
            let retrained = col(|r| r.excess_risk_retrained);
            let choice = col(|r| r.excess_risk_choice);
            let exact = col(|r| r.excess_risk_exact);
            let speedup = col(|r| r.speedup);
            let honest = col(|r| r.speedup_honest);
            AggregateRow {
                experiment: g[0].experiment,
                cell: cell_label(g[0]),
                n: g[0].n,
                trials: ok.len(),
                failed: g.len() - ok.len(),
                holdin_mean: holdin.mean,
                holdin_se: holdin.se,
                retrained_mean: retrained.mean,
                retrained_se: retrained.se,
                choice_mean: choice.mean,
                choice_se: choice.se,
                exact_mean: exact.mean,
                exact_se: exact.se,
                speedup_mean: speedup.mean,
                speedup_se: speedup.se,
                speedup_honest_mean: honest.mean,
                speedup_honest_se: honest.se,
                rho_out_mean: col(|r| r.rho_out).mean,
            }
        })
        .collect()
}

type Point = (f64, f64);
type Series = (&'static str, fn(&AggregateRow) -> f64, RGBColor);

fn series_for(experiment: Experiment) -> Vec<Series> {
    match experiment {
        Experiment::Choice => vec![
            ("retrained", |a| a.retrained_mean, BLUE),
            ("hold-in", |a| a.holdin_mean, GREEN),
            ("choice", |a| a.choice_mean, RED),
        ],
        Experiment::Tolerance => vec![
            ("exact inner", |a| a.exact_mean, BLACK),
            ("approx inner", |a| a.retrained_mean, RED),
        ],
        Experiment::H3 => vec![
            ("exact retrain", |a| a.exact_mean, BLACK),
            ("controller retrain", |a| a.retrained_mean, RED),
        ],
    }
}

fn plot_err<E: std::fmt::Display>(e: E) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

/// One SVG per cell: excess risk against `n`, both axes logarithmic.
/// Cells without any positive value are skipped.
pub fn plot_cells(aggregates: &[AggregateRow], out_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut cells: BTreeMap<(String, String), Vec<&AggregateRow>> = BTreeMap::new();
    for a in aggregates {
        cells
            .entry((a.experiment.as_str().to_string(), a.cell.clone()))
            .or_default()
            .push(a);
    }
    let mut written = Vec::new();
    for ((exp, cell), mut points) in cells {
        points.sort_by_key(|a| a.n);
        let series = series_for(points[0].experiment);
        let mut lines: Vec<(&str, RGBColor, Vec<Point>)> = Vec::new();
        for (name, get, color) in series {
            let pts: Vec<(f64, f64)> = points
                .iter()
                .map(|a| (a.n as f64, get(a)))
                .filter(|&(_, y)| y.is_finite() && y > 0.0)
                .collect();
            if !pts.is_empty() {
                lines.push((name, color, pts));
            }
        }
        if lines.is_empty() {
            continue;
        }
        let all = lines.iter().flat_map(|l| l.2.iter());
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, 0.0f64, f64::INFINITY, 0.0f64);
        for &(x, y) in all {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        let (x0, x1) = (x0 / 1.2, x1 * 1.2);
        let (y0, y1) = (y0 / 2.0, y1 * 2.0);

        let path = out_dir.join(format!("{exp}_{cell}.svg"));
        {
            let root = SVGBackend::new(&path, (640, 480)).into_drawing_area();
            root.fill(&WHITE).map_err(plot_err)?;
            let mut chart = ChartBuilder::on(&root)
                .caption(format!("{exp} {cell}"), ("sans-serif", 16))
                .margin(10)
                .x_label_area_size(40)
                .y_label_area_size(60)
                .build_cartesian_2d((x0..x1).log_scale(), (y0..y1).log_scale())
                .map_err(plot_err)?;
            chart
                .configure_mesh()
                .x_desc("n")
                .y_desc("excess risk")
                .draw()
                .map_err(plot_err)?;
            for (name, color, pts) in &lines {
                let c = *color;
                chart
                    .draw_series(LineSeries::new(pts.iter().copied(), c.stroke_width(2)))
                    .map_err(plot_err)?
                    .label(*name)
                    .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], c));
            }
            chart
                .configure_series_labels()
                .background_style(WHITE.mix(0.8))
                .border_style(BLACK)
                .draw()
                .map_err(plot_err)?;
            root.present().map_err(plot_err)?;
        }
        written.push(path);
    }
    Ok(written)
}

/// Plain-text table of the aggregates.
pub fn format_table(aggregates: &[AggregateRow]) -> String {
    let mut s = format!(
        "{:<10} {:<36} {:>6} {:>3} {:>22} {:>22} {:>22} {:>22} {:>14}\n",
        "experiment", "cell", "n", "k", "hold-in", "retrained", "choice", "exact", "speedup"
    );
    let pm = |m: f64, se: f64| format!("{m:.3e} ± {se:.1e}");
    for a in aggregates {
        s.push_str(&format!(
            "{:<10} {:<36} {:>6} {:>3} {:>22} {:>22} {:>22} {:>22} {:>14}\n",
            a.experiment.as_str(),
            a.cell,
            a.n,
            a.trials,
            pm(a.holdin_mean, a.holdin_se),
            pm(a.retrained_mean, a.retrained_se),
            pm(a.choice_mean, a.choice_se),
            pm(a.exact_mean, a.exact_se),
            format!("{:.2} ± {:.2}", a.speedup_mean, a.speedup_se),
        ));
    }
    s
}

pub struct ReportOutput {
    pub aggregates: Vec<AggregateRow>,
    pub plots: Vec<PathBuf>,
    pub warnings: Vec<String>,
}

/// Read result CSVs, write `summary.csv` and the plots into `out_dir`.
pub fn report(csv_paths: &[PathBuf], out_dir: &Path) -> Result<ReportOutput> {
    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    for p in csv_paths {
        let text = std::fs::read(p)?;
        let parsed = crate::harness::read_rows(text.as_slice()).map_err(|e| match e {
            Error::Parse { line, msg } => Error::Parse {
                line,
                msg: format!("{}: {msg}", p.display()),
            },
            other => other,
        })?;
        rows.extend(parsed);
    }
    std::fs::create_dir_all(out_dir)?;
    if rows.is_empty() {
        warnings.push("no result rows; nothing to aggregate".to_string());
    }
    let failed = rows.iter().filter(|r| !r.is_ok()).count();
    if failed > 0 {
        warnings.push(format!("{failed} failed rows excluded from aggregates"));
    }
    let aggregates = aggregate(&rows);
    crate::harness::save_versioned_csv(&aggregates, &out_dir.join("summary.csv"))?;
    let plots = plot_cells(&aggregates, out_dir)?;
    Ok(ReportOutput {
        aggregates,
        plots,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_se_of_identical_values() {
        let m = MeanSe::of(vec![0.25; 10]);
        assert_eq!(m.mean, 0.25);
        assert_eq!(m.se, 0.0);
        let single = MeanSe::of([3.0]);
        assert_eq!((single.mean, single.se), (3.0, 0.0));
        assert!(MeanSe::of([]).mean.is_nan());
    }

    #[test]
    fn mean_se_matches_hand_value() {
        let m = MeanSe::of([1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m.mean, 2.5);
        let expected = (1.25f64 * 4.0 / 3.0 / 4.0).sqrt();
        assert!((m.se - expected).abs() < 1e-15);
    }
}
