//! Data-driven rules for choosing the deployed model and the ERM tolerances.
//!
//! All concentration terms use the natural logarithm.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};

fn check_common(bound: f64, l: usize, delta: f64) -> Result<()> {
    if !(bound > 0.0 && bound.is_finite()) {
        return config_err(format!("loss bound must be positive, got {bound}"));
    }
    if l == 0 {
        return config_err("grid size L must be positive");
    }
    if !(delta > 0.0 && delta < 1.0) {
        return config_err(format!("delta must lie in (0,1), got {delta}"));
    }
    Ok(())
}

fn check_size(name: &str, v: usize) -> Result<f64> {
    if v == 0 {
        return config_err(format!("{name} must be positive"));
    }
    Ok(v as f64)
}

/// Retraining threshold `2B·√(2·ln(2(L+2)/δ)/n)`.
pub fn h1_threshold(bound: f64, l: usize, delta: f64, n: usize) -> Result<f64> {
    check_common(bound, l, delta)?;
    let n = check_size("n", n)?;
    let log_term = (2.0 * (l as f64 + 2.0) / delta).ln();
    Ok(2.0 * bound * (2.0 * log_term / n).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Choice {
    Retrained,
    HoldIn,
}

impl Choice {
    pub fn as_str(self) -> &'static str {
        match self {
            Choice::Retrained => "retrained",
            Choice::HoldIn => "hold_in",
        }
    }
}

impl std::str::FromStr for Choice {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "retrained" => Ok(Choice::Retrained),
            "hold_in" => Ok(Choice::HoldIn),
            other => Err(Error::Config(format!("unknown choice '{other}'"))),
        }
    }
}

/// Deploy the retrained model only if the empirical risk improvement
/// strictly exceeds the threshold.
pub fn h1_choose(improvement: f64, threshold: f64) -> Choice {
    if improvement > threshold {
        Choice::Retrained
    } else {
        Choice::HoldIn
    }
}

/// Inner tolerance `γ·B·√(2·ln(2(L+1)/δ))·(2/√m + 1/√μ)`.
pub fn h2_rho_in(gamma: f64, bound: f64, l: usize, delta: f64, m: usize, mu: usize) -> Result<f64> {
    check_common(bound, l, delta)?;
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return config_err(format!("gamma must be non-negative, got {gamma}"));
    }
    let m = check_size("m", m)?;
    let mu = check_size("mu", mu)?;
    let log_term = (2.0 * (l as f64 + 1.0) / delta).ln();
    Ok(gamma * bound * (2.0 * log_term).sqrt() * (2.0 / m.sqrt() + 1.0 / mu.sqrt()))
}

/// `κ = ρ_in + B·√(2·ln(2(L+2)/δ))·(2/√n + 2/√m + 1/√μ)`.
pub fn h3_kappa(rho_in: f64, bound: f64, l: usize, delta: f64, n: usize, m: usize, mu: usize) -> Result<f64> {
    check_common(bound, l, delta)?;
    if !(rho_in >= 0.0 && rho_in.is_finite()) {
        return config_err(format!("rho_in must be non-negative, got {rho_in}"));
    }
    let n = check_size("n", n)?;
    let m = check_size("m", m)?;
    let mu = check_size("mu", mu)?;
    let log_term = (2.0 * (l as f64 + 2.0) / delta).ln();
    Ok(rho_in + bound * (2.0 * log_term).sqrt() * (2.0 / n.sqrt() + 2.0 / m.sqrt() + 1.0 / mu.sqrt()))
}

/// Inputs shared by the three rules.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeuristicParams {
    pub bound: f64,
    pub l: usize,
    pub delta: f64,
    pub n: usize,
    pub m: usize,
    pub mu: usize,
    pub gamma: f64,
    pub nu: f64,
}

impl HeuristicParams {
    pub fn validate(&self) -> Result<()> {
        check_common(self.bound, self.l, self.delta)?;
        check_size("n", self.n)?;
        check_size("m", self.m)?;
        check_size("mu", self.mu)?;
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return config_err("gamma must be positive");
        }
        if !(self.nu > 0.0 && self.nu < 1.0) {
            return config_err("nu must lie in (0,1)");
        }
        Ok(())
    }

    pub fn h1_threshold(&self) -> Result<f64> {
        h1_threshold(self.bound, self.l, self.delta, self.n)
    }

    pub fn h2_rho_in(&self) -> Result<f64> {
        h2_rho_in(self.gamma, self.bound, self.l, self.delta, self.m, self.mu)
    }

    pub fn h3_kappa(&self, rho_in: f64) -> Result<f64> {
        h3_kappa(rho_in, self.bound, self.l, self.delta, self.n, self.m, self.mu)
    }
}

/// What the outer-tolerance controller did at one step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum H3Decision {
    /// First level: no previous value to compare, reduce unconditionally.
    Bootstrap,
    Reduce,
    Exit,
}

impl H3Decision {
    pub fn as_str(self) -> &'static str {
        match self {
            H3Decision::Bootstrap => "bootstrap",
            H3Decision::Reduce => "reduce",
            H3Decision::Exit => "exit",
        }
    }
}

/// State of the iterative outer-tolerance controller.
///
/// The tolerance starts at `ρ⁽⁰⁾ = ρ_in` and is multiplied by `ν` after each
/// accepted step. `Γ(ρ)` is the empirical risk improvement of the model
/// retrained to tolerance `ρ`. Level 0 has no predecessor and always
/// reduces once. From level `T ≥ 1` the reduction continues while
/// `|Γ(ρ⁽ᵀ⁻¹⁾) − Γ(ρ⁽ᵀ⁾)| > γ·κ`; otherwise the controller exits and the
/// deployed tolerance is `ρ⁽ᵀ⁻¹⁾`, the last level whose reduction paid off.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct H3State {
    pub current_rho_out: f64,
    pub previous_rho_out: Option<f64>,
    pub previous_gamma_value: Option<f64>,
    pub iteration: usize,
    pub kappa: f64,
    pub nu: f64,
    pub terminated: bool,
}

/// One row of a controller trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct H3TraceRow {
    pub iteration: usize,
    pub rho_out: f64,
    pub gamma_value: f64,
    pub decision: H3Decision,
}

impl H3State {
    pub fn new(rho_in: f64, kappa: f64, nu: f64) -> Result<Self> {
        if !(rho_in > 0.0 && rho_in.is_finite()) {
            return config_err(format!("initial tolerance must be positive, got {rho_in}"));
        }
        if !(kappa > 0.0 && kappa.is_finite()) {
            return config_err("kappa must be positive");
        }
        if !(nu > 0.0 && nu < 1.0) {
            return config_err(format!("nu must lie in (0,1), got {nu}"));
        }
        Ok(H3State {
            current_rho_out: rho_in,
            previous_rho_out: None,
            previous_gamma_value: None,
            iteration: 0,
            kappa,
            nu,
            terminated: false,
        })
    }

    /// Feed `Γ(ρ⁽ᵀ⁾)` for the current level and advance.
    pub fn step(&self, gamma_current: f64, gamma_h3: f64) -> Result<(H3State, H3Decision)> {
        if self.terminated {
            return Err(Error::State);
        }
        let mut next = self.clone();
        let decision = match self.previous_gamma_value {
            None => H3Decision::Bootstrap,
            Some(prev) if (prev - gamma_current).abs() > gamma_h3 * self.kappa => H3Decision::Reduce,
            Some(_) => H3Decision::Exit,
        };
        match decision {
            H3Decision::Exit => next.terminated = true,
            _ => {
                next.previous_rho_out = Some(self.current_rho_out);
                next.current_rho_out = self.nu * self.current_rho_out;
                next.iteration += 1;
                next.previous_gamma_value = Some(gamma_current);
            }
        }
        Ok((next, decision))
    }

    /// Tolerance to deploy: `ρ⁽ᵀ⁻¹⁾` after an exit, the current level otherwise.
    pub fn final_rho_out(&self) -> f64 {
        match (self.terminated, self.previous_rho_out) {
            (true, Some(prev)) => prev,
            _ => self.current_rho_out,
        }
    }

    /// Drive the controller over a precomputed `Γ` trace (one value per level).
    /// Stops at exit or when the trace runs out.
    pub fn run_trace(self, trace: &[f64], gamma_h3: f64) -> Result<(H3State, Vec<H3TraceRow>)> {
        let mut state = self;
        let mut rows = Vec::new();
        for &g in trace {
            let (next, decision) = state.step(g, gamma_h3)?;
            rows.push(H3TraceRow {
                iteration: state.iteration,
                rho_out: state.current_rho_out,
                gamma_value: g,
                decision,
            });
            state = next;
            if state.terminated {
                break;
            }
        }
        Ok((state, rows))
    }
}

pub fn write_h3_trace_csv<W: std::io::Write>(rows: &[H3TraceRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["T", "rho_out", "gamma_value", "decision"])?;
    for r in rows {
        w.write_record([
            r.iteration.to_string(),
            format!("{:.17e}", r.rho_out),
            format!("{:.17e}", r.gamma_value),
            r.decision.as_str().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn h1_worked_value() {
        let t = h1_threshold(1.0, 36, 0.05, 1024).unwrap();
        assert!((t - 0.23924).abs() < 5e-6, "{t}");
    }

    #[test]
    fn h1_scaling() {
        let a = h1_threshold(1.0, 36, 0.05, 1000).unwrap();
        let b = h1_threshold(1.0, 36, 0.05, 4000).unwrap();
        assert!((a / b - 2.0).abs() < 1e-14);
        let c = h1_threshold(3.0, 36, 0.05, 1000).unwrap();
        assert!((c / a - 3.0).abs() < 1e-14);
    }

    #[test]
    fn h1_rejects_bad_delta() {
        assert!(h1_threshold(1.0, 36, 0.0, 10).is_err());
        assert!(h1_threshold(1.0, 36, 1.0, 10).is_err());
    }

    #[test]
    fn h1_choice_boundaries() {
        assert_eq!(h1_choose(0.0, 0.1), Choice::HoldIn);
        assert_eq!(h1_choose(0.1, 0.1), Choice::HoldIn);
        let t = h1_threshold(1.0, 36, 0.05, 1024).unwrap();
        assert_eq!(h1_choose(0.3, t), Choice::Retrained);
    }

    #[test]
    fn h2_worked_value() {
        let r = h2_rho_in(0.1, 1.0, 36, 0.05, 922, 102).unwrap();
        assert!((r - 0.06300).abs() < 5e-6, "{r}");
        assert_eq!(h2_rho_in(0.0, 1.0, 36, 0.05, 922, 102).unwrap(), 0.0);
        let r1 = h2_rho_in(1.0, 1.0, 36, 0.05, 922, 102).unwrap();
        assert!((r1 / r - 10.0).abs() < 1e-13);
        assert!(h2_rho_in(0.1, 1.0, 36, 0.05, 0, 102).is_err());
        assert!(h2_rho_in(0.1, 1.0, 36, 0.05, 922, 0).is_err());
    }

    #[test]
    fn kappa_worked_value() {
        let k = h3_kappa(0.063, 1.0, 36, 0.05, 1024, 922, 102).unwrap();
        assert!((k - 0.9334).abs() < 5e-5, "{k}");
        let k0 = h3_kappa(0.0, 1.0, 36, 0.05, 1024, 922, 102).unwrap();
        assert!((k - k0 - 0.063).abs() < 1e-15);
        let k4 = h3_kappa(0.0, 1.0, 36, 0.05, 4096, 3688, 408).unwrap();
        assert!((k0 / k4 - 2.0).abs() < 1e-13);
    }

    #[test]
    fn controller_hand_trace() {
        // γ·κ = 0.05 with γ = 0.05, κ = 1.
        let state = H3State::new(0.1, 1.0, 0.5).unwrap();
        let (s1, d1) = state.step(0.50, 0.05).unwrap();
        assert_eq!(d1, H3Decision::Bootstrap);
        assert_eq!(s1.current_rho_out, 0.05);
        let (s2, d2) = s1.step(0.30, 0.05).unwrap();
        assert_eq!(d2, H3Decision::Reduce);
        assert_eq!(s2.current_rho_out, 0.025);
        let (s3, d3) = s2.step(0.29, 0.05).unwrap();
        assert_eq!(d3, H3Decision::Exit);
        assert!(s3.terminated);
        assert_eq!(s3.iteration, 2);
        assert_eq!(s3.final_rho_out(), 0.05);
        assert!(matches!(s3.step(0.1, 0.05), Err(Error::State)));
    }

    #[test]
    fn constant_trace_exits_at_first_comparison() {
        let (s, rows) = H3State::new(0.1, 1.0, 0.5).unwrap().run_trace(&[0.2; 5], 0.01).unwrap();
        assert!(s.terminated);
        assert_eq!(s.iteration, 1);
        assert_eq!(rows.len(), 2);
    }

    #[test]
    fn three_reductions_are_exact() {
        let (s, _) = H3State::new(0.1, 1.0, 0.5)
            .unwrap()
            .run_trace(&[0.9, 0.6, 0.3], 0.01)
            .unwrap();
        assert!(!s.terminated);
        assert_eq!(s.iteration, 3);
        assert_eq!(s.current_rho_out, 0.1 / 8.0);
    }

    proptest! {
        #[test]
        fn choose_is_monotone(i in -1.0f64..1.0, di in 0.0f64..1.0, t in 1e-6f64..1.0) {
            if h1_choose(i, t) == Choice::Retrained {
                prop_assert_eq!(h1_choose(i + di, t), Choice::Retrained);
            }
        }

        #[test]
        fn rho_in_monotonicity(m in 1usize..10_000, mu in 1usize..10_000, l in 1usize..100, g in 0.01f64..10.0) {
            let base = h2_rho_in(g, 1.0, l, 0.05, m, mu).unwrap();
            prop_assert!(h2_rho_in(g, 1.0, l, 0.05, m + 1, mu).unwrap() < base);
            prop_assert!(h2_rho_in(g, 1.0, l, 0.05, m, mu + 1).unwrap() < base);
            prop_assert!(h2_rho_in(g, 1.0, l + 1, 0.05, m, mu).unwrap() > base);
            let twice = h2_rho_in(2.0 * g, 1.0, l, 0.05, m, mu).unwrap();
            prop_assert!((twice / base - 2.0).abs() < 1e-12);
        }

        #[test]
        fn controller_rho_is_geometric(trace in prop::collection::vec(0.0f64..1.0, 1..20), nu in 0.05f64..0.95) {
            let start = 0.1;
            let mut state = H3State::new(start, 1.0, nu).unwrap();
            let mut expected = start;
            let mut prev = start;
            for g in trace {
                let (next, d) = state.step(g, 0.01).unwrap();
                if d == H3Decision::Exit {
                    prop_assert!(next.terminated);
                    prop_assert_eq!(next.current_rho_out, expected);
                    if next.iteration > 0 {
                        prop_assert_eq!(next.final_rho_out(), prev);
                    }
                    prop_assert!(next.step(g, 0.01).is_err());
                    break;
                }
                prev = expected;
                expected *= nu;
                prop_assert_eq!(next.current_rho_out, expected);
                state = next;
            }
        }
    }
}
