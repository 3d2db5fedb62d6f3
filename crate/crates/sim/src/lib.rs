//! Simulation harness, file formats and experiment presets for the
//! simultaneous moving-horizon estimation and control crate.
//!
//! The algorithmic core lives in `simul-ecmpc-core`; this crate adds what
//! needs the standard library: wall-clock timing, parallel Monte Carlo
//! batches, CSV/JSON outputs and the benchmark experiment definitions used
//! by the `simul-ecmpc` binary.

pub mod config;
pub mod presets;
pub mod report;
pub mod runner;

pub use config::RunConfig;
pub use presets::{example1, example2, Experiment, Regime};
pub use runner::{
    check_theorem1, run_closed_loop, run_monte_carlo, ClosedLoopRecord, Mode, MonteCarloSummary,
    StepRecord, TheoremReport,
};
