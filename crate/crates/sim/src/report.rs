//! File outputs: per-step trajectory CSV, timing CSV and the JSON run
//! report carrying the certificate block.
//!
//! Trajectory CSVs are deterministic for a fixed seed (timing lives in a
//! separate file), use `.` decimals, LF line endings and UTF-8, and print
//! floats with 17 significant digits so a round trip is value-exact.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::runner::{ClosedLoopRecord, MonteCarloSummary, TheoremReport};

fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.17e}")
    } else {
        format!("{v}")
    }
}

/// Render a closed-loop record as CSV with a `# key=value` preamble.
pub fn trajectory_csv(record: &ClosedLoopRecord, meta: &[(&str, String)]) -> String {
    let mut out = String::new();
    for (k, v) in meta {
        let _ = writeln!(out, "# {k}={v}");
    }
    let _ = writeln!(out, "# mode={}", record.mode.as_str());
    let _ = writeln!(out, "# ts={}", fmt_f64(record.ts));
    let _ = writeln!(out, "# trial={}", record.trial);
    let _ = writeln!(out, "# n_e={}", record.n_e);
    let _ = writeln!(out, "# n_c={}", record.n_c);
    let _ = writeln!(out, "# phi={}", fmt_f64(record.phi));
    let _ = writeln!(out, "# failed={}", record.failed);

    let (n_x, n_u, n_y, n_w) = record
        .steps
        .first()
        .map(|s| (s.x_true.len(), s.u.len(), s.y.len(), s.w.len()))
        .unwrap_or((0, 0, 0, 0));
    let mut header: Vec<String> = vec!["k".into()];
    for i in 0..n_x {
        header.push(format!("x{i}"));
    }
    for i in 0..n_x {
        header.push(format!("xhat{i}"));
    }
    for i in 0..n_u {
        header.push(format!("u{i}"));
    }
    for i in 0..n_y {
        header.push(format!("y{i}"));
    }
    for i in 0..n_w {
        header.push(format!("w{i}"));
    }
    for i in 0..n_y {
        header.push(format!("v{i}"));
    }
    header.extend(
        [
            "psi_e",
            "psi_c",
            "objective",
            "tail_total",
            "delta_psi",
            "stage_cost",
            "cost_to_go",
            "chi",
            "p_inv_min",
            "p_inv_max",
            "iterations",
            "converged",
            "state_violation",
        ]
        .map(String::from),
    );
    let _ = writeln!(out, "{}", header.join(","));

    for s in &record.steps {
        let mut row: Vec<String> = vec![s.k.to_string()];
        row.extend(s.x_true.iter().map(|&v| fmt_f64(v)));
        row.extend(s.estimate.iter().map(|&v| fmt_f64(v)));
        row.extend(s.u.iter().map(|&v| fmt_f64(v)));
        row.extend(s.y.iter().map(|&v| fmt_f64(v)));
        row.extend(s.w.iter().map(|&v| fmt_f64(v)));
        row.extend(s.v.iter().map(|&v| fmt_f64(v)));
        for v in [s.psi_e, s.psi_c, s.objective] {
            row.push(fmt_f64(v));
        }
        row.push(s.tail_total.map(fmt_f64).unwrap_or_default());
        row.push(s.delta_psi.map(fmt_f64).unwrap_or_default());
        for v in [
            s.stage_cost,
            s.cost_to_go,
            s.arrival_deviation,
            s.arrival_lambda_min,
            s.arrival_lambda_max,
        ] {
            row.push(fmt_f64(v));
        }
        row.push(s.iterations.to_string());
        row.push(if s.converged { "1".into() } else { "0".into() });
        row.push(fmt_f64(s.max_state_violation));
        let _ = writeln!(out, "{}", row.join(","));
    }
    out
}

/// Mean per-step wall times of one or two modes, side by side.
pub fn timing_csv(profiles: &[(&str, &[f64])]) -> String {
    let mut out = String::new();
    let mut header = vec!["k".to_string()];
    header.extend(profiles.iter().map(|(name, _)| format!("mean_ms_{name}")));
    let _ = writeln!(out, "{}", header.join(","));
    let len = profiles.iter().map(|(_, p)| p.len()).max().unwrap_or(0);
    for k in 0..len {
        let mut row = vec![k.to_string()];
        for (_, p) in profiles {
            row.push(p.get(k).map(|&v| fmt_f64(v)).unwrap_or_default());
        }
        let _ = writeln!(out, "{}", row.join(","));
    }
    out
}

/// Numeric fields parsed back from a trajectory CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedCsv {
    pub preamble: Vec<(String, String)>,
    pub header: Vec<String>,
    pub rows: Vec<Vec<Option<f64>>>,
}

/// Parse a trajectory CSV produced by [`trajectory_csv`].
pub fn parse_csv(text: &str) -> io::Result<ParsedCsv> {
    let mut preamble = Vec::new();
    let mut header = Vec::new();
    let mut rows = Vec::new();
    for line in text.lines() {
        if let Some(rest) = line.strip_prefix("# ") {
            let mut parts = rest.splitn(2, '=');
            let key = parts.next().unwrap_or_default().to_string();
            let value = parts.next().unwrap_or_default().to_string();
            preamble.push((key, value));
        } else if header.is_empty() {
            header = line.split(',').map(String::from).collect();
        } else if !line.is_empty() {
            let row = line
                .split(',')
                .map(|cell| {
                    if cell.is_empty() {
                        None
                    } else {
                        cell.parse::<f64>().ok()
                    }
                })
                .collect();
            rows.push(row);
        }
    }
    Ok(ParsedCsv {
        preamble,
        header,
        rows,
    })
}

pub fn write_text(path: &Path, text: &str) -> io::Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, text)
}

/// Certificate block of a run report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CertificateReport {
    pub n_e_min: usize,
    pub n_c_min: usize,
    pub delta_wc: f64,
    pub pi_e_bar: f64,
    pub epsilon_e: f64,
    pub omega: Vec<OmegaReportRow>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OmegaReportRow {
    pub n_c: usize,
    pub omega: f64,
    pub argmax_x0: f64,
    pub l_max: f64,
    pub skipped: usize,
}

impl From<&simul_ecmpc_core::horizons::OmegaRow> for OmegaReportRow {
    fn from(r: &simul_ecmpc_core::horizons::OmegaRow) -> Self {
        Self {
            n_c: r.n_c,
            omega: r.omega,
            argmax_x0: r.argmax_x0,
            l_max: r.l_max,
            skipped: r.skipped,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TheoremReportJson {
    pub checked: usize,
    pub passed: usize,
    pub pass_fraction: f64,
    pub delta_omega_max: f64,
    pub delta_omega_ok: bool,
    pub violations: Vec<usize>,
}

impl From<&TheoremReport> for TheoremReportJson {
    fn from(r: &TheoremReport) -> Self {
        Self {
            checked: r.checked,
            passed: r.passed,
            pass_fraction: r.pass_fraction(),
            delta_omega_max: r.delta_omega_max,
            delta_omega_ok: r.delta_omega_ok,
            violations: r.violations.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SummaryJson {
    pub mode: String,
    pub n_trials: usize,
    pub mse_mean: f64,
    pub mse_std: f64,
    pub mse_per_trial: Vec<f64>,
    pub success_count: usize,
    pub failed_count: usize,
    pub mean_step_ms: f64,
}

impl From<&MonteCarloSummary> for SummaryJson {
    fn from(s: &MonteCarloSummary) -> Self {
        Self {
            mode: s.mode.as_str().to_string(),
            n_trials: s.n_trials,
            mse_mean: s.mse_mean,
            mse_std: s.mse_std,
            mse_per_trial: s.mse_per_trial.clone(),
            success_count: s.success_count,
            failed_count: s.failed_count,
            mean_step_ms: s.mean_step_ms,
        }
    }
}

/// Top-level JSON run report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub experiment: String,
    pub ts: f64,
    pub n_e: usize,
    pub n_c: usize,
    pub phi: f64,
    pub seed: u64,
    pub steps: usize,
    pub solver_gradient_tol: f64,
    pub solver_max_iterations: usize,
    pub summaries: Vec<SummaryJson>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub certificate: Option<CertificateReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theorem: Option<TheoremReportJson>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets::{example1, Regime};
    use crate::runner::{run_closed_loop, Mode};

    #[test]
    fn csv_round_trip_is_value_exact() {
        let exp = example1(Regime::Nominal, 4, 6, 0.5, 0.1, 23).unwrap();
        let rec = run_closed_loop(&exp, Mode::Simultaneous, 12, 0);
        let text = trajectory_csv(&rec, &[("experiment", "roundtrip".into())]);
        let parsed = parse_csv(&text).unwrap();
        assert_eq!(parsed.rows.len(), rec.steps.len());
        let x0_col = parsed.header.iter().position(|h| h == "x0").unwrap();
        let u0_col = parsed.header.iter().position(|h| h == "u0").unwrap();
        for (row, step) in parsed.rows.iter().zip(rec.steps.iter()) {
            // 17 significant digits reproduce the f64 exactly.
            assert_eq!(row[x0_col].unwrap(), step.x_true[0]);
            assert_eq!(row[u0_col].unwrap(), step.u[0]);
        }
    }

    #[test]
    fn empty_record_gives_header_only() {
        let exp = example1(Regime::Nominal, 4, 6, 0.5, 0.1, 23).unwrap();
        let rec = run_closed_loop(&exp, Mode::Simultaneous, 0, 0);
        let text = trajectory_csv(&rec, &[]);
        let parsed = parse_csv(&text).unwrap();
        assert!(parsed.rows.is_empty());
        assert!(!parsed.header.is_empty());
    }

    #[test]
    fn report_json_round_trips() {
        let report = RunReport {
            schema_version: 1,
            experiment: "example1-nominal".into(),
            ts: 0.1,
            n_e: 30,
            n_c: 10,
            phi: 0.5,
            seed: 1,
            steps: 100,
            solver_gradient_tol: 1e-8,
            solver_max_iterations: 80,
            summaries: vec![],
            certificate: None,
            theorem: None,
        };
        let text = serde_json::to_string_pretty(&report).unwrap();
        let back: RunReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back.experiment, report.experiment);
        assert_eq!(back.seed, report.seed);
    }
}
