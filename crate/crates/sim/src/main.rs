//! Command-line runner for the benchmark experiments, horizon calculators
//! and sweeps.
//!
//! Exit codes: 0 success, 1 configuration error, 2 at least one failed
//! trial, 3 controllability-budget violation.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use simul_ecmpc::config::{RunConfig, SCHEMA_VERSION};
use simul_ecmpc::presets::{self, Experiment, Regime};
use simul_ecmpc::report::{
    self, CertificateReport, OmegaReportRow, RunReport, SummaryJson, TheoremReportJson,
};
use simul_ecmpc::runner::{self, ClosedLoopRecord, Mode};
use simul_ecmpc_core::costs::PowerLaw;
use simul_ecmpc_core::horizons::{self, ControllabilityBudget, EstimatorBoundConstants, SweepMode};
use simul_ecmpc_core::Error as CoreError;

#[derive(Parser)]
#[command(
    name = "simul-ecmpc",
    version,
    about = "Simultaneous moving-horizon estimation and control: benchmark runner"
)]
struct Cli {
    /// Worker threads for trial parallelism (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Scalar cubic benchmark: closed loops, CSVs and certificate report.
    Example1(Example1Args),
    /// Van der Pol benchmark: Monte Carlo MSE and timing tables.
    Example2(Example2Args),
    /// Horizon formulas and the empirical omega sweep.
    Horizons(HorizonsArgs),
}

#[derive(Args)]
struct Example1Args {
    /// Constraint regime: nominal | tight.
    #[arg(long, default_value = "nominal")]
    regime: String,
    /// Controller: simultaneous | independent | both.
    #[arg(long, default_value = "both")]
    mode: String,
    #[arg(long = "Ne", default_value_t = 30)]
    n_e: usize,
    #[arg(long = "Nc", default_value_t = 10)]
    n_c: usize,
    /// Number of seeded trials.
    #[arg(long, default_value_t = 20)]
    seeds: usize,
    /// Steps per trial (t = steps·ts).
    #[arg(long, default_value_t = 100)]
    steps: usize,
    #[arg(long, default_value_t = 0.1)]
    ts: f64,
    #[arg(long)]
    phi: Option<f64>,
    /// Base seed; SIMUL_ECMPC_SEED overrides the default.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out/example1")]
    out: PathBuf,
    /// Load a full run configuration instead of the flags above.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Print the effective configuration as JSON and exit.
    #[arg(long, default_value_t = false)]
    dump_config: bool,
}

#[derive(Args)]
struct Example2Args {
    /// Oscillator damping.
    #[arg(long, default_value_t = 0.1)]
    epsilon: f64,
    /// Run the full backward/forward horizon grid with the φ schedule.
    #[arg(long, default_value_t = false)]
    grid: bool,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long = "Ne", default_value_t = 10)]
    n_e: usize,
    #[arg(long = "Nc", default_value_t = 10)]
    n_c: usize,
    #[arg(long, default_value_t = 200)]
    steps: usize,
    #[arg(long, default_value_t = 0.1)]
    ts: f64,
    #[arg(long)]
    phi: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out/example2")]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = false)]
    dump_config: bool,
}

#[derive(Args)]
struct HorizonsArgs {
    /// Closed-form formula: ne | ne-ex1 | nc.
    #[arg(long)]
    formula: Option<String>,
    /// Empirical omega sweep over the scalar benchmark.
    #[arg(long, default_value_t = false)]
    sweep_omega: bool,
    #[arg(long, default_value = "nominal")]
    regime: String,
    /// Forward horizons for the sweep, e.g. "5:70:5" or "5,10,20".
    #[arg(long, default_value = "5:70:5")]
    nc_list: String,
    #[arg(long = "Ne", default_value_t = 30)]
    n_e: usize,
    #[arg(long, default_value_t = 0.1)]
    ts: f64,
    #[arg(long, default_value_t = 33)]
    grid_points: usize,

    // Budget constants (forward horizon).
    #[arg(long, default_value_t = 1.0)]
    delta: f64,
    #[arg(long = "L", default_value_t = 2.0)]
    l_bound: f64,
    #[arg(long = "Delta", default_value_t = 0.1)]
    delta_wc: f64,

    // Scalar-benchmark constants (backward horizon).
    #[arg(long, default_value_t = 1e-5)]
    p_inv: f64,
    #[arg(long, default_value_t = 15.0)]
    qe: f64,
    #[arg(long, default_value_t = 1e3)]
    re: f64,
    #[arg(long, default_value_t = 1.0)]
    a: f64,
    /// Detectability constant; defaults to 3·x_max³ of the scalar benchmark.
    #[arg(long)]
    g: Option<f64>,
    #[arg(long = "K", default_value_t = 0.7326)]
    k_gain: f64,

    // General-formula constants.
    #[arg(long, default_value_t = 1.0)]
    zeta: f64,
    #[arg(long, default_value_t = 1.0)]
    eta: f64,
    #[arg(long, default_value_t = 1.0)]
    c_beta_bar: f64,
    #[arg(long, default_value_t = 1.0)]
    e_max: f64,
    #[arg(long, default_value_t = 0.05)]
    mu: f64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Clap prints its own usage text; fold every parse problem into
            // the configuration-error exit code.
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    if let Some(jobs) = cli.jobs {
        if jobs >= 1 {
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(jobs)
                .build_global();
        }
    }
    let outcome = match cli.command {
        Command::Example1(args) => cmd_example1(args),
        Command::Example2(args) => cmd_example2(args),
        Command::Horizons(args) => cmd_horizons(args),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn default_seed(flag: Option<u64>) -> u64 {
    flag.or_else(|| {
        std::env::var("SIMUL_ECMPC_SEED")
            .ok()
            .and_then(|s| s.parse().ok())
    })
    .unwrap_or(1)
}

fn run_meta(exp: &Experiment) -> Vec<(&'static str, String)> {
    vec![
        ("experiment", exp.name.clone()),
        ("seed", exp.process_noise.seed().to_string()),
        ("gradient_tol", format!("{:e}", exp.cfg.solver.gradient_tol)),
        ("max_iterations", exp.cfg.solver.max_iterations.to_string()),
        ("state_penalty", format!("{:e}", exp.cfg.state_penalty)),
    ]
}

#[allow(clippy::type_complexity)]
fn run_and_export(
    exp: &Experiment,
    modes: &[Mode],
    steps: usize,
    trials: usize,
    out: &Path,
) -> anyhow::Result<(Vec<SummaryJson>, Vec<(Mode, Vec<ClosedLoopRecord>)>, bool)> {
    let mut summaries = Vec::new();
    let mut all_records = Vec::new();
    let mut any_failed = false;
    for &mode in modes {
        let (summary, records) = runner::run_monte_carlo(exp, mode, steps, trials);
        any_failed |= summary.failed_count > 0;
        for record in &records {
            let text = report::trajectory_csv(record, &run_meta(exp));
            let path = out.join(format!("{}_trial{:03}.csv", mode.as_str(), record.trial));
            report::write_text(&path, &text)?;
        }
        let timing = report::timing_csv(&[(mode.as_str(), &summary.step_ms_profile)]);
        report::write_text(&out.join(format!("timing_{}.csv", mode.as_str())), &timing)?;
        summaries.push(SummaryJson::from(&summary));
        all_records.push((mode, records));
    }
    Ok((summaries, all_records, any_failed))
}

fn example1_certificate(
    exp: &Experiment,
    delta: f64,
    delta_wc: f64,
) -> anyhow::Result<CertificateReport> {
    let budget = ControllabilityBudget {
        delta,
        l_bound: 2.0,
        delta_wc,
    };
    let omega = horizons::omega_empirical(
        &exp.model,
        &exp.cfg,
        SweepMode::Simultaneous,
        &[exp.cfg.n_c],
        &budget,
        33,
    )?;
    let l_measured = omega.iter().map(|r| r.l_max).fold(1.0f64, f64::max);
    // Round the measured growth bound up to one decimal before use.
    let l_rounded = ((l_measured * 10.0).ceil() / 10.0).max(1.1);
    let n_c_min = horizons::min_forward_horizon(&ControllabilityBudget {
        delta,
        l_bound: l_rounded,
        delta_wc,
    })?;
    let n_e_min = horizons::min_backward_horizon_example1(
        1e-5,
        15.0,
        1e3,
        1.0,
        presets::example1_g(),
        0.7326,
    )?;

    let k_bounds = simul_ecmpc_core::costs::KBoundFunctions {
        gamma_w_lower: PowerLaw::new(15.0, 2.0)?,
        gamma_w_upper: PowerLaw::new(15.0, 2.0)?,
        gamma_v_lower: PowerLaw::new(1e3, 2.0)?,
        gamma_v_upper: PowerLaw::new(1e3, 2.0)?,
        gamma_p_upper: PowerLaw::new(1e-5, 2.0)?,
        gamma_1: PowerLaw::new(1.0 / 0.7326, 1.0)?,
        gamma_2: PowerLaw::new(presets::example1_g() / 0.7326, 1.0)?,
    };
    let chi = (&exp.x0 - &exp.prior).norm();
    let w_sup = exp.process_noise.amplitude();
    let v_sup = exp.measurement_noise.amplitude();
    let pi = horizons::pi_e_bar(chi, w_sup, v_sup, &k_bounds, exp.cfg.n_e);
    let eps = horizons::estimation_error_bound_example1(
        1e-5,
        15.0,
        1e3,
        1.0,
        presets::example1_g(),
        0.7326,
        0.05,
        chi,
        w_sup,
        v_sup,
        0,
        exp.cfg.n_e.max(n_e_min),
    )?;

    Ok(CertificateReport {
        n_e_min,
        n_c_min,
        delta_wc,
        pi_e_bar: pi,
        epsilon_e: eps,
        omega: omega.iter().map(OmegaReportRow::from).collect(),
    })
}

fn cmd_example1(args: Example1Args) -> anyhow::Result<ExitCode> {
    let cfg = if let Some(path) = &args.config {
        RunConfig::from_json(&std::fs::read_to_string(path)?)?
    } else {
        RunConfig {
            schema_version: SCHEMA_VERSION,
            example: "example1".into(),
            regime: Some(args.regime.clone()),
            epsilon: None,
            mode: args.mode.clone(),
            n_e: args.n_e,
            n_c: args.n_c,
            phi: args.phi,
            ts: args.ts,
            steps: args.steps,
            trials: args.seeds,
            seed: default_seed(args.seed),
        }
    };
    cfg.validate()?;
    if args.dump_config {
        println!("{}", cfg.to_json()?);
        return Ok(ExitCode::SUCCESS);
    }

    let exp = cfg.experiment()?;
    let (summaries, records, any_failed) =
        run_and_export(&exp, &cfg.modes(), cfg.steps, cfg.trials, &args.out)?;

    // Certificate and cost-decrease audit over the simultaneous records.
    let delta_wc_computed = horizons::pseudo_controllability(
        &exp.cfg.weights,
        &exp.cfg.x_box,
        &exp.cfg.u_box,
        &exp.cfg.w_box,
        1e-2,
    )
    .map(|(v, _)| v)
    .unwrap_or(0.0);
    let certificate = example1_certificate(&exp, 1.0, 0.1)?;
    let theorem = records
        .iter()
        .find(|(m, _)| *m == Mode::Simultaneous)
        .map(|(_, recs)| {
            let mut total = runner::TheoremReport {
                checked: 0,
                passed: 0,
                delta_omega_max: 0.0,
                delta_omega_ok: true,
                violations: vec![],
            };
            for r in recs {
                let rep = runner::check_theorem1(r, 1.0, delta_wc_computed, 15.0, 15.0, 1e3, 1e-6);
                total.checked += rep.checked;
                total.passed += rep.passed;
                total.delta_omega_max = total.delta_omega_max.max(rep.delta_omega_max);
                total.delta_omega_ok &= rep.delta_omega_ok;
                total.violations.extend(rep.violations);
            }
            total
        });

    let report = RunReport {
        schema_version: SCHEMA_VERSION,
        experiment: exp.name.clone(),
        ts: cfg.ts,
        n_e: cfg.n_e,
        n_c: cfg.n_c,
        phi: cfg.effective_phi(),
        seed: cfg.seed,
        steps: cfg.steps,
        solver_gradient_tol: exp.cfg.solver.gradient_tol,
        solver_max_iterations: exp.cfg.solver.max_iterations,
        summaries,
        certificate: Some(certificate),
        theorem: theorem.as_ref().map(TheoremReportJson::from),
    };
    report::write_text(
        &args.out.join("report.json"),
        &serde_json::to_string_pretty(&report)?,
    )?;

    Ok(if any_failed {
        ExitCode::from(2)
    } else {
        ExitCode::SUCCESS
    })
}

fn cmd_example2(args: Example2Args) -> anyhow::Result<ExitCode> {
    let base_cfg = if let Some(path) = &args.config {
        RunConfig::from_json(&std::fs::read_to_string(path)?)?
    } else {
        RunConfig {
            schema_version: SCHEMA_VERSION,
            example: "example2".into(),
            regime: None,
            epsilon: Some(args.epsilon),
            mode: "both".into(),
            n_e: args.n_e,
            n_c: args.n_c,
            phi: args.phi,
            ts: args.ts,
            steps: args.steps,
            trials: args.trials,
            seed: default_seed(args.seed),
        }
    };
    base_cfg.validate()?;
    if args.dump_config {
        println!("{}", base_cfg.to_json()?);
        return Ok(ExitCode::SUCCESS);
    }

    let combos: Vec<(usize, usize)> = if args.grid {
        presets::EXAMPLE2_NE_GRID
            .iter()
            .flat_map(|&ne| presets::EXAMPLE2_NC_GRID.iter().map(move |&nc| (ne, nc)))
            .collect()
    } else {
        vec![(base_cfg.n_e, base_cfg.n_c)]
    };

    let mut any_failed = false;
    let mut table =
        String::from("epsilon,n_e,n_c,phi,mode,mse_mean,mse_std,success,failed,mean_step_ms\n");
    let mut summaries = Vec::new();
    for (ne, nc) in combos {
        let phi = base_cfg
            .phi
            .unwrap_or_else(|| presets::example2_phi_for(ne));
        let exp = presets::example2(
            base_cfg.epsilon.unwrap_or(0.1),
            ne,
            nc,
            phi,
            base_cfg.ts,
            base_cfg.seed,
        )?;
        for mode in base_cfg.modes() {
            let (summary, _) = runner::run_monte_carlo(&exp, mode, base_cfg.steps, base_cfg.trials);
            any_failed |= summary.failed_count > 0;
            table.push_str(&format!(
                "{},{},{},{},{},{:.9e},{:.9e},{},{},{:.6e}\n",
                base_cfg.epsilon.unwrap_or(0.1),
                ne,
                nc,
                phi,
                mode.as_str(),
                summary.mse_mean,
                summary.mse_std,
                summary.success_count,
                summary.failed_count,
                summary.mean_step_ms,
            ));
            if ne == 10 && nc == 10 {
                let timing = report::timing_csv(&[(mode.as_str(), &summary.step_ms_profile)]);
                report::write_text(
                    &args.out.join(format!("timing_{}.csv", mode.as_str())),
                    &timing,
                )?;
            }
            summaries.push(SummaryJson::from(&summary));
        }
    }
    report::write_text(&args.out.join("mse_grid.csv"), &table)?;

    let report = RunReport {
        schema_version: SCHEMA_VERSION,
        experiment: format!("example2-eps{}", base_cfg.epsilon.unwrap_or(0.1)),
        ts: base_cfg.ts,
        n_e: base_cfg.n_e,
        n_c: base_cfg.n_c,
        phi: base_cfg.effective_phi(),
        seed: base_cfg.seed,
        steps: base_cfg.steps,
        solver_gradient_tol: 1e-8,
        solver_max_iterations: 80,
        summaries,
        certificate: None,
        theorem: None,
    };
    report::write_text(
        &args.out.join("report.json"),
        &serde_json::to_string_pretty(&report)?,
    )?;

    Ok(if any_failed {
        ExitCode::from(2)
    } else {
        ExitCode::SUCCESS
    })
}

fn parse_nc_list(text: &str) -> anyhow::Result<Vec<usize>> {
    if text.contains(':') {
        let parts: Vec<&str> = text.split(':').collect();
        if parts.len() != 3 {
            anyhow::bail!("range must be start:end:step");
        }
        let (start, end, step): (usize, usize, usize) =
            (parts[0].parse()?, parts[1].parse()?, parts[2].parse()?);
        if step == 0 {
            anyhow::bail!("step must be positive");
        }
        Ok((start..=end).step_by(step).collect())
    } else {
        Ok(text
            .split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<Result<_, _>>()?)
    }
}

fn cmd_horizons(args: HorizonsArgs) -> anyhow::Result<ExitCode> {
    let g = args.g.unwrap_or_else(presets::example1_g);
    if args.sweep_omega {
        let regime = match args.regime.as_str() {
            "tight" => Regime::Tight,
            "nominal" => Regime::Nominal,
            other => anyhow::bail!("unknown regime {other:?}"),
        };
        let exp = presets::example1(regime, args.n_e, 10, 0.5, args.ts, 1)?;
        let budget = ControllabilityBudget {
            delta: args.delta,
            l_bound: args.l_bound,
            delta_wc: args.delta_wc,
        };
        if let Err(e @ CoreError::UncontrollableBudget { .. }) = budget.validate() {
            eprintln!("error: {e}");
            return Ok(ExitCode::from(3));
        }
        let nc_list = parse_nc_list(&args.nc_list)?;
        let sim = horizons::omega_empirical(
            &exp.model,
            &exp.cfg,
            SweepMode::Simultaneous,
            &nc_list,
            &budget,
            args.grid_points,
        )?;
        let ind = horizons::omega_empirical(
            &exp.model,
            &exp.cfg,
            SweepMode::Independent,
            &nc_list,
            &budget,
            args.grid_points,
        )?;
        let l_measured = sim
            .iter()
            .chain(ind.iter())
            .map(|r| r.l_max)
            .fold(1.0f64, f64::max);
        let l_rounded = ((l_measured * 10.0).ceil() / 10.0).max(1.1);
        let n_c_min = horizons::min_forward_horizon(&ControllabilityBudget {
            delta: args.delta,
            l_bound: l_rounded,
            delta_wc: args.delta_wc,
        })?;
        let n_e_min = horizons::min_backward_horizon_example1(
            args.p_inv,
            args.qe,
            args.re,
            args.a,
            g,
            args.k_gain,
        )?;
        let (delta_wc_computed, _) = horizons::pseudo_controllability(
            &exp.cfg.weights,
            &exp.cfg.x_box,
            &exp.cfg.u_box,
            &exp.cfg.w_box,
            1e-3,
        )?;
        let k_bounds = simul_ecmpc_core::costs::KBoundFunctions {
            gamma_w_lower: PowerLaw::new(args.qe, 2.0)?,
            gamma_w_upper: PowerLaw::new(args.qe, 2.0)?,
            gamma_v_lower: PowerLaw::new(args.re, 2.0)?,
            gamma_v_upper: PowerLaw::new(args.re, 2.0)?,
            gamma_p_upper: PowerLaw::new(args.p_inv.max(f64::MIN_POSITIVE), 2.0)?,
            gamma_1: PowerLaw::new(1.0 / args.k_gain, 1.0)?,
            gamma_2: PowerLaw::new(g / args.k_gain, 1.0)?,
        };
        let chi = (&exp.x0 - &exp.prior).norm();
        let pi_e_bar = horizons::pi_e_bar(
            chi,
            exp.process_noise.amplitude(),
            exp.measurement_noise.amplitude(),
            &k_bounds,
            args.n_e,
        );
        let json = serde_json::json!({
            "regime": args.regime,
            "delta": args.delta,
            "delta_wc": args.delta_wc,
            "delta_wc_computed": delta_wc_computed,
            "pi_e_bar": pi_e_bar,
            "l_measured": l_measured,
            "l_rounded": l_rounded,
            "n_c_min": n_c_min,
            "n_e_min": n_e_min,
            "omega_simultaneous": sim.iter().map(OmegaReportRow::from).collect::<Vec<_>>(),
            "omega_independent": ind.iter().map(OmegaReportRow::from).collect::<Vec<_>>(),
        });
        println!("{}", serde_json::to_string_pretty(&json)?);
        return Ok(ExitCode::SUCCESS);
    }

    match args.formula.as_deref() {
        Some("nc") => {
            let budget = ControllabilityBudget {
                delta: args.delta,
                l_bound: args.l_bound,
                delta_wc: args.delta_wc,
            };
            match horizons::min_forward_horizon(&budget) {
                Ok(n) => {
                    println!("{}", serde_json::json!({ "n_c_min": n }));
                    Ok(ExitCode::SUCCESS)
                }
                Err(e @ CoreError::UncontrollableBudget { .. }) => {
                    eprintln!("error: {e}");
                    Ok(ExitCode::from(3))
                }
                Err(e) => Err(e.into()),
            }
        }
        Some("ne-ex1") => {
            let n = horizons::min_backward_horizon_example1(
                args.p_inv,
                args.qe,
                args.re,
                args.a,
                g,
                args.k_gain,
            )?;
            println!("{}", serde_json::json!({ "n_e_min": n }));
            Ok(ExitCode::SUCCESS)
        }
        Some("ne") => {
            let constants = EstimatorBoundConstants {
                zeta: args.zeta,
                rho: 1.0,
                c_beta: 1.0,
                p: 2.0,
                a_exp: 1.0,
                c1: 1.0,
                c2: 1.0,
                alpha1: 1.0,
                alpha2: 1.0,
                eta: args.eta,
                mu: args.mu,
                e_max: args.e_max,
                lambda_min_p_inv: 1.0,
                lambda_max_p_inv: 1.0,
                c_beta_bar: args.c_beta_bar,
            };
            let n = horizons::min_backward_horizon_general(&constants)?;
            println!("{}", serde_json::json!({ "n_e_min": n }));
            Ok(ExitCode::SUCCESS)
        }
        Some(other) => anyhow::bail!("unknown formula {other:?} (expected ne | ne-ex1 | nc)"),
        None => anyhow::bail!("horizons needs --formula or --sweep-omega"),
    }
}
