//! Closed-loop simulation and Monte Carlo batching.

use std::time::Instant;

use rayon::prelude::*;
use simul_ecmpc_core::costs::PowerLaw;
use simul_ecmpc_core::dynamics::sample_noise;
use simul_ecmpc_core::ecmpc::{AnyController, Controller, IndependentPipeline};
use simul_ecmpc_core::horizons;
use simul_ecmpc_core::Error as CoreError;

use crate::presets::Experiment;

/// Which controller drives the loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Simultaneous,
    Independent,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Simultaneous => "simultaneous",
            Mode::Independent => "independent",
        }
    }
}

/// Everything recorded at one sampling instant.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub k: usize,
    pub x_true: Vec<f64>,
    pub estimate: Vec<f64>,
    pub u: Vec<f64>,
    pub y: Vec<f64>,
    pub w: Vec<f64>,
    pub v: Vec<f64>,
    pub psi_e: f64,
    pub psi_c: f64,
    pub objective: f64,
    /// Criterion at the shifted previous solution (unweighted sum),
    /// evaluated at this step against the new measurement.
    pub tail_total: Option<f64>,
    pub tail_weighted: Option<f64>,
    /// `Ψ_{k+1}(tail) − Ψ_k(solution)` in the window-shift form of the
    /// cost-decrease analysis (the incoming output residual is excluded);
    /// filled once the next step ran.
    pub delta_psi: Option<f64>,
    pub stage_cost: f64,
    pub cost_to_go: f64,
    pub arrival_deviation: f64,
    pub arrival_lambda_min: f64,
    pub arrival_lambda_max: f64,
    pub iterations: usize,
    pub converged: bool,
    pub max_state_violation: f64,
    /// Wall-clock time of the controller step in milliseconds. Excluded
    /// from the deterministic trajectory outputs.
    pub wall_ms: f64,
}

impl StepRecord {
    /// Equivalent scalar feedback gain `−u/x̂`; meaningful for scalar
    /// plants away from the origin.
    pub fn equivalent_gain(&self) -> Option<f64> {
        if self.estimate.len() == 1 && self.u.len() == 1 && self.estimate[0].abs() >= 1e-6 {
            Some(-self.u[0] / self.estimate[0])
        } else {
            None
        }
    }
}

/// Full trace of one closed-loop run.
#[derive(Debug, Clone)]
pub struct ClosedLoopRecord {
    pub steps: Vec<StepRecord>,
    pub failed: bool,
    pub failure: Option<String>,
    pub ts: f64,
    pub trial: u64,
    pub mode: Mode,
    pub phi: f64,
    pub n_e: usize,
    pub n_c: usize,
    pub success_threshold: f64,
}

impl ClosedLoopRecord {
    /// Time-averaged squared state norm; regulation target is the origin.
    pub fn mse(&self) -> Result<f64, CoreError> {
        mse_of(
            self.steps
                .iter()
                .map(|s| s.x_true.iter().map(|v| v * v).sum::<f64>()),
            self.steps.len(),
        )
    }

    /// Time-averaged |x| over the final fifth of the run, the quantity the
    /// regulation-success rule thresholds.
    pub fn settling_level(&self) -> f64 {
        if self.steps.is_empty() {
            return f64::INFINITY;
        }
        let tail_len = (self.steps.len() / 5).max(1);
        let tail = &self.steps[self.steps.len() - tail_len..];
        tail.iter()
            .map(|s| s.x_true.iter().map(|v| v * v).sum::<f64>().sqrt())
            .sum::<f64>()
            / tail_len as f64
    }

    /// Regulated iff the run finished and settled below the threshold.
    pub fn regulation_success(&self) -> bool {
        !self.failed && self.settling_level() < self.success_threshold
    }

    /// Largest realized |w| and |v| over the run.
    pub fn realized_noise_sup(&self) -> (f64, f64) {
        let mut w_sup = 0.0f64;
        let mut v_sup = 0.0f64;
        for s in &self.steps {
            w_sup = w_sup.max(s.w.iter().map(|x| x * x).sum::<f64>().sqrt());
            v_sup = v_sup.max(s.v.iter().map(|x| x * x).sum::<f64>().sqrt());
        }
        (w_sup, v_sup)
    }

    /// Smallest positive equivalent gain observed while the estimate was
    /// clearly away from the noise floor.
    pub fn min_equivalent_gain(&self, estimate_floor: f64) -> Option<f64> {
        let mut min_gain: Option<f64> = None;
        for s in &self.steps {
            if s.estimate.len() == 1 && s.estimate[0].abs() >= estimate_floor {
                if let Some(g) = s.equivalent_gain() {
                    if g > 0.0 {
                        min_gain = Some(min_gain.map_or(g, |m: f64| m.min(g)));
                    }
                }
            }
        }
        min_gain
    }
}

/// Time-averaged value of a squared-norm iterator.
pub fn mse_of(squares: impl Iterator<Item = f64>, len: usize) -> Result<f64, CoreError> {
    if len == 0 {
        return Err(Error::empty_record());
    }
    Ok(squares.sum::<f64>() / len as f64)
}

struct Error;

impl Error {
    fn empty_record() -> CoreError {
        CoreError::Config("empty record".into())
    }
}

/// Run one closed loop: the plant is stepped with the true noise, the
/// controller only ever sees the measurements. A diverging plant or a
/// solver failure marks the run failed and keeps the partial record.
pub fn run_closed_loop(
    exp: &Experiment,
    mode: Mode,
    n_steps: usize,
    trial: u64,
) -> ClosedLoopRecord {
    let w_seq = sample_noise(&exp.process_noise.clone().with_stream(trial), n_steps)
        .expect("validated noise spec");
    let v_seq = sample_noise(&exp.measurement_noise.clone().with_stream(trial), n_steps)
        .expect("validated noise spec");

    let mut controller = match mode {
        Mode::Simultaneous => AnyController::Simultaneous(
            Controller::new(exp.model.clone(), exp.cfg.clone(), exp.prior.clone())
                .expect("validated config"),
        ),
        Mode::Independent => AnyController::Independent(
            IndependentPipeline::new(
                exp.model.clone(),
                exp.cfg.clone(),
                exp.cfg.clone(),
                exp.prior.clone(),
            )
            .expect("validated config"),
        ),
    };

    let divergence_bound = 1e3
        * exp
            .cfg
            .x_box
            .upper()
            .iter()
            .fold(1.0f64, |a, &b| a.max(b.abs()));

    let mut record = ClosedLoopRecord {
        steps: Vec::with_capacity(n_steps),
        failed: false,
        failure: None,
        ts: exp.ts,
        trial,
        mode,
        phi: exp.cfg.phi,
        n_e: exp.cfg.n_e,
        n_c: exp.cfg.n_c,
        success_threshold: exp.success_threshold,
    };

    let mut x = exp.x0.clone();
    let mut prev_psi_total: Option<f64> = None;
    for k in 0..n_steps {
        let y = exp.model.output(&x) + &v_seq[k];
        let started = Instant::now();
        let out = match controller.step(&y) {
            Ok(out) => out,
            Err(e) => {
                record.failed = true;
                record.failure = Some(format!("solver failure at step {k}: {e}"));
                break;
            }
        };
        let wall_ms = started.elapsed().as_secs_f64() * 1e3;

        // ΔΨ of the previous step becomes known now.
        if let (Some(prev_total), Some(tail)) = (prev_psi_total, out.tail_from_prev) {
            if let Some(last) = record.steps.last_mut() {
                let new_output = out.tail_new_output_cost.unwrap_or(0.0);
                last.delta_psi = Some(tail.total() - new_output - prev_total);
            }
        }

        record.steps.push(StepRecord {
            k,
            x_true: x.iter().copied().collect(),
            estimate: out.estimate.iter().copied().collect(),
            u: out.applied_input.iter().copied().collect(),
            y: y.iter().copied().collect(),
            w: w_seq[k].iter().copied().collect(),
            v: v_seq[k].iter().copied().collect(),
            psi_e: out.psi.psi_e,
            psi_c: out.psi.psi_c,
            objective: out.objective,
            tail_total: out.tail_from_prev.map(|t| t.total()),
            tail_weighted: out.tail_from_prev.map(|t| t.weighted(exp.cfg.phi)),
            delta_psi: None,
            stage_cost: out.stage_cost,
            cost_to_go: out.cost_to_go,
            arrival_deviation: out.arrival_deviation,
            arrival_lambda_min: out.arrival_bounds.0,
            arrival_lambda_max: out.arrival_bounds.1,
            iterations: out.iterations,
            converged: out.converged,
            max_state_violation: out.max_state_violation,
            wall_ms,
        });
        prev_psi_total = Some(out.psi.total());

        x = match exp.model.step(&x, &out.applied_input) {
            Ok(next) => next + &w_seq[k],
            Err(e) => {
                record.failed = true;
                record.failure = Some(format!("plant integration failure at step {k}: {e}"));
                break;
            }
        };
        if x.iter().any(|v| !v.is_finite()) || x.amax() > divergence_bound {
            record.failed = true;
            record.failure = Some(format!("plant divergence at step {k}"));
            break;
        }
    }
    record
}

/// Per-step verdicts of the cost-decrease inequality.
#[derive(Debug, Clone)]
pub struct TheoremReport {
    /// Steps with a defined ΔΨ and a converged solve.
    pub checked: usize,
    pub passed: usize,
    /// Worst measured δω over the run.
    pub delta_omega_max: f64,
    /// δω stayed below one at every checked step.
    pub delta_omega_ok: bool,
    /// Indices of the steps violating the inequality.
    pub violations: Vec<usize>,
}

impl TheoremReport {
    pub fn pass_fraction(&self) -> f64 {
        if self.checked == 0 {
            1.0
        } else {
            self.passed as f64 / self.checked as f64
        }
    }
}

/// Check the per-step cost-decrease inequality
/// `ΔΨ ≤ −ℓ_c(1 − δω) + π̄_E + tol` along a run, with
/// `ω = Υ(Ξ)/ℓ_c + Δ/δ` from the step's own quantities and the
/// perturbation budget from the realized noise magnitudes and the step's
/// arrival deviation.
pub fn check_theorem1(
    record: &ClosedLoopRecord,
    delta: f64,
    delta_wc: f64,
    qe_max: f64,
    qe_min: f64,
    re_max: f64,
    tol: f64,
) -> TheoremReport {
    let (w_sup, v_sup) = record.realized_noise_sup();
    let mut checked = 0;
    let mut passed = 0;
    let mut delta_omega_max = 0.0f64;
    let mut delta_omega_ok = true;
    let mut violations = Vec::new();
    for s in &record.steps {
        let Some(delta_psi) = s.delta_psi else {
            continue;
        };
        if !s.converged {
            continue;
        }
        checked += 1;

        let omega_ratio = if s.stage_cost >= 1e-12 {
            s.cost_to_go / s.stage_cost
        } else {
            0.0
        };
        let delta_omega = delta * omega_ratio + delta_wc;
        delta_omega_max = delta_omega_max.max(delta_omega);
        if delta_omega >= 1.0 {
            delta_omega_ok = false;
        }

        // K∞ envelopes implied by the quadratic weights, with the arrival
        // envelope from this step's weight bounds.
        let k = simul_ecmpc_core::costs::KBoundFunctions {
            gamma_w_lower: PowerLaw::new(qe_min.max(f64::MIN_POSITIVE), 2.0).expect("valid law"),
            gamma_w_upper: PowerLaw::new(qe_max, 2.0).expect("valid law"),
            gamma_v_lower: PowerLaw::new(re_max, 2.0).expect("valid law"),
            gamma_v_upper: PowerLaw::new(re_max, 2.0).expect("valid law"),
            gamma_p_upper: PowerLaw::new(s.arrival_lambda_max, 2.0).expect("valid law"),
            gamma_1: PowerLaw::new(1.0, 1.0).expect("valid law"),
            gamma_2: PowerLaw::new(1.0, 1.0).expect("valid law"),
        };
        let pi_e = horizons::pi_e_bar(s.arrival_deviation, w_sup, v_sup, &k, record.n_e);

        let rhs = -s.stage_cost * (1.0 - delta_omega) + pi_e + tol;
        if delta_psi <= rhs {
            passed += 1;
        } else {
            violations.push(s.k);
        }
    }
    TheoremReport {
        checked,
        passed,
        delta_omega_max,
        delta_omega_ok,
        violations,
    }
}

/// Aggregates over a batch of trials of one configuration.
#[derive(Debug, Clone)]
pub struct MonteCarloSummary {
    pub mode: Mode,
    pub n_trials: usize,
    pub mse_mean: f64,
    pub mse_std: f64,
    pub mse_per_trial: Vec<f64>,
    pub success_count: usize,
    pub failed_count: usize,
    /// Mean controller wall time per step, milliseconds.
    pub mean_step_ms: f64,
    /// Mean wall time at each step index across trials.
    pub step_ms_profile: Vec<f64>,
}

/// Run `n_trials` independent closed loops in parallel. Trial `t` uses the
/// noise sub-stream `t`, so results are reproducible and independent of
/// the worker count.
pub fn run_monte_carlo(
    exp: &Experiment,
    mode: Mode,
    n_steps: usize,
    n_trials: usize,
) -> (MonteCarloSummary, Vec<ClosedLoopRecord>) {
    let records: Vec<ClosedLoopRecord> = (0..n_trials as u64)
        .into_par_iter()
        .map(|trial| run_closed_loop(exp, mode, n_steps, trial))
        .collect();
    (summarize(mode, &records), records)
}

/// Collapse per-trial records into a summary; failed trials keep their
/// partial MSE and are counted, never hidden.
pub fn summarize(mode: Mode, records: &[ClosedLoopRecord]) -> MonteCarloSummary {
    let mse_per_trial: Vec<f64> = records
        .iter()
        .map(|r| r.mse().unwrap_or(f64::INFINITY))
        .collect();
    let finite: Vec<f64> = mse_per_trial
        .iter()
        .copied()
        .filter(|m| m.is_finite())
        .collect();
    let mse_mean = if finite.is_empty() {
        f64::INFINITY
    } else {
        finite.iter().sum::<f64>() / finite.len() as f64
    };
    let mse_std = if finite.len() < 2 {
        0.0
    } else {
        (finite
            .iter()
            .map(|m| (m - mse_mean) * (m - mse_mean))
            .sum::<f64>()
            / (finite.len() - 1) as f64)
            .sqrt()
    };

    let mut total_ms = 0.0;
    let mut total_steps = 0usize;
    let max_len = records.iter().map(|r| r.steps.len()).max().unwrap_or(0);
    let mut profile = vec![0.0f64; max_len];
    let mut counts = vec![0usize; max_len];
    for r in records {
        for s in &r.steps {
            total_ms += s.wall_ms;
            total_steps += 1;
            profile[s.k] += s.wall_ms;
            counts[s.k] += 1;
        }
    }
    for (p, c) in profile.iter_mut().zip(counts.iter()) {
        if *c > 0 {
            *p /= *c as f64;
        }
    }

    MonteCarloSummary {
        mode,
        n_trials: records.len(),
        mse_mean,
        mse_std,
        mse_per_trial,
        success_count: records.iter().filter(|r| r.regulation_success()).count(),
        failed_count: records.iter().filter(|r| r.failed).count(),
        mean_step_ms: if total_steps == 0 {
            0.0
        } else {
            total_ms / total_steps as f64
        },
        step_ms_profile: profile,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets::{example1, Regime};

    #[test]
    fn mse_examples() {
        // Hand-built three-step record values 1, 0.5, 0.
        let squares = [1.0f64, 0.25, 0.0];
        let m = mse_of(squares.iter().copied(), 3).unwrap();
        assert!((m - 0.41666666666).abs() < 1e-9);
        assert!(mse_of(std::iter::empty(), 0).is_err());
    }

    #[test]
    fn zero_noise_origin_run_is_identically_zero() {
        let mut exp = example1(Regime::Nominal, 3, 3, 0.5, 0.1, 0).unwrap();
        exp.x0 = nalgebra::DVector::zeros(1);
        exp.prior = nalgebra::DVector::zeros(1);
        exp.process_noise = simul_ecmpc_core::dynamics::NoiseSpec::uniform(1, 0.0, 0.0, 0);
        exp.measurement_noise = simul_ecmpc_core::dynamics::NoiseSpec::uniform(1, 0.0, 0.0, 0);
        let rec = run_closed_loop(&exp, Mode::Simultaneous, 10, 0);
        assert!(!rec.failed);
        assert!(rec.mse().unwrap() == 0.0);
        for s in &rec.steps {
            assert_eq!(s.u[0], 0.0);
            assert_eq!(s.psi_e, 0.0);
            assert_eq!(s.psi_c, 0.0);
        }
    }

    #[test]
    fn seeded_runs_are_bit_identical() {
        let exp = example1(Regime::Nominal, 5, 5, 0.5, 0.1, 42).unwrap();
        let a = run_closed_loop(&exp, Mode::Simultaneous, 15, 3);
        let b = run_closed_loop(&exp, Mode::Simultaneous, 15, 3);
        for (sa, sb) in a.steps.iter().zip(b.steps.iter()) {
            assert_eq!(sa.x_true, sb.x_true);
            assert_eq!(sa.estimate, sb.estimate);
            assert_eq!(sa.u, sb.u);
            assert_eq!(sa.psi_e, sb.psi_e);
        }
        let c = run_closed_loop(&exp, Mode::Simultaneous, 15, 4);
        assert_ne!(a.steps[0].w, c.steps[0].w);
    }

    #[test]
    fn monte_carlo_single_trial_equals_single_run() {
        let exp = example1(Regime::Nominal, 4, 6, 0.5, 0.1, 9).unwrap();
        let (summary, records) = run_monte_carlo(&exp, Mode::Simultaneous, 12, 1);
        let single = run_closed_loop(&exp, Mode::Simultaneous, 12, 0);
        assert_eq!(summary.n_trials, 1);
        assert_eq!(records[0].steps.len(), single.steps.len());
        assert!((summary.mse_mean - single.mse().unwrap()).abs() < 1e-15);
    }

    #[test]
    fn monte_carlo_is_order_independent() {
        let exp = example1(Regime::Nominal, 4, 6, 0.5, 0.1, 11).unwrap();
        let (par, _) = run_monte_carlo(&exp, Mode::Simultaneous, 10, 4);
        // Serial reference with the same per-trial streams.
        let serial: Vec<ClosedLoopRecord> = (0..4)
            .map(|t| run_closed_loop(&exp, Mode::Simultaneous, 10, t))
            .collect();
        let ser = summarize(Mode::Simultaneous, &serial);
        assert_eq!(par.mse_per_trial, ser.mse_per_trial);
    }

    #[test]
    fn theorem_check_on_clean_run() {
        let exp = example1(Regime::Nominal, 8, 10, 0.5, 0.1, 5).unwrap();
        let rec = run_closed_loop(&exp, Mode::Simultaneous, 30, 0);
        assert!(!rec.failed);
        let report = check_theorem1(&rec, 1.0, 4.8e-5, 15.0, 15.0, 1e3, 1e-6);
        assert!(report.checked > 0);
        assert!(
            report.pass_fraction() >= 0.9,
            "fraction {}",
            report.pass_fraction()
        );
        assert!(report.delta_omega_ok, "max {}", report.delta_omega_max);
    }
}
