//! Ready-made experiment setups for the two benchmark plants.
//!
//! The plants are stated in continuous time with the disturbance entering
//! the state derivative, so the discrete-step disturbance is the sampled
//! law scaled by the sampling time; measurement noise is sampled, not
//! integrated, and is never scaled. Constraint sets on the disturbance
//! estimates are scaled the same way to stay commensurate with what the
//! plant actually injects per step.

use nalgebra::{DMatrix, DVector};
use simul_ecmpc_core::costs::{ArrivalStrategy, QuadraticWeights};
use simul_ecmpc_core::dynamics::{
    discretize, scalar_cubic_model, van_der_pol_model, BoxSet, Discretization, NoiseSpec,
    SystemModel,
};
use simul_ecmpc_core::ecmpc::{EcmpcConfig, ForwardDisturbances};
use simul_ecmpc_core::nlp::SolveOptions;
use simul_ecmpc_core::Result;

/// Constraint regime of the scalar benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    /// Wide input box, mild noise.
    Nominal,
    /// Tight input box, bounded disturbance/noise sets, heavy noise.
    Tight,
}

/// A fully specified closed-loop experiment.
pub struct Experiment {
    pub name: String,
    /// Discrete one-step model shared by plant and controller.
    pub model: SystemModel,
    pub cfg: EcmpcConfig,
    pub x0: DVector<f64>,
    pub prior: DVector<f64>,
    /// Per-step process disturbance law (already in discrete units).
    pub process_noise: NoiseSpec,
    pub measurement_noise: NoiseSpec,
    pub ts: f64,
    /// Regulation threshold: twice the worst noise amplitude.
    pub success_threshold: f64,
}

// Practical closed-loop tolerance: the weighted gradients carry the 10³
// output weight, so 1e-6 on the projected gradient already polishes the
// inputs far below the noise floor.
fn default_solver() -> SolveOptions {
    SolveOptions {
        max_iterations: 60,
        gradient_tol: 1e-6,
        ..SolveOptions::default()
    }
}

/// Scalar cubic benchmark. Both constraint regimes share the weights
/// `Qe=15, Re=10³, Qc=Rc=Sc=5`, the arrival weight `P₀=10⁵` and `φ` as
/// given; they differ in the constraint boxes and the noise laws.
pub fn example1(
    regime: Regime,
    n_e: usize,
    n_c: usize,
    phi: f64,
    ts: f64,
    seed: u64,
) -> Result<Experiment> {
    let model = discretize(&scalar_cubic_model(1.0)?, Discretization::rk4(ts)?)?;
    let weights = QuadraticWeights::scalar(15.0, 1e3, 5.0, 5.0, 5.0)?;

    let (u_box, w_box_cont, v_box, process, measurement) = match regime {
        Regime::Nominal => (
            BoxSet::symmetric(1, 2.5)?,
            BoxSet::symmetric(1, 0.01)?,
            None,
            NoiseSpec::uniform(1, 0.0, 0.01, seed),
            NoiseSpec::gaussian(1, 0.0, 0.02, seed.wrapping_add(0x9E3779B97F4A7C15)),
        ),
        Regime::Tight => (
            BoxSet::symmetric(1, 0.6)?,
            BoxSet::symmetric(1, 0.4)?,
            Some(BoxSet::symmetric(1, 0.8)?),
            NoiseSpec::uniform(1, 0.0, 0.1, seed),
            NoiseSpec::gaussian(1, 0.0, 0.2, seed.wrapping_add(0x9E3779B97F4A7C15)),
        ),
    };

    let process_discrete = process.scaled(ts);
    let success_threshold = 2.0 * process_discrete.amplitude().max(measurement.amplitude());

    let cfg = EcmpcConfig {
        n_e,
        n_c,
        phi,
        forward_disturbances: ForwardDisturbances::Omit,
        terminal_set: None,
        weights,
        x_box: BoxSet::symmetric(1, 0.8)?,
        u_box,
        w_box: w_box_cont.scaled(ts),
        v_box: v_box.clone(),
        enforce_v_box: v_box.is_some(),
        solver: default_solver(),
        state_penalty: 1e6,
        arrival_strategy: ArrivalStrategy::SurrogateAdaptive { forgetting: 0.95 },
        p0_inv: DMatrix::from_element(1, 1, 1e-5),
    };

    Ok(Experiment {
        name: format!("example1-{:?}", regime).to_lowercase(),
        model,
        cfg,
        x0: DVector::from_element(1, 0.766),
        prior: DVector::from_element(1, -2.5),
        process_noise: process_discrete,
        measurement_noise: measurement,
        ts,
        success_threshold,
    })
}

/// `g = 3·x_max³` of the scalar benchmark's detectability bound, with
/// `x_max` the state-box radius.
pub fn example1_g() -> f64 {
    3.0 * 0.8f64.powi(3)
}

/// The φ schedule used with the oscillator benchmark, keyed by the
/// backward horizon: longer windows need less emphasis on the estimation
/// half to stay balanced.
pub fn example2_phi_for(n_e: usize) -> f64 {
    match n_e {
        0..=2 => 0.95,
        3..=5 => 0.95,
        6..=10 => 0.85,
        _ => 0.65,
    }
}

/// Backward/forward horizon grids swept by the oscillator benchmark.
pub const EXAMPLE2_NE_GRID: [usize; 4] = [2, 5, 10, 20];
pub const EXAMPLE2_NC_GRID: [usize; 3] = [5, 10, 35];

/// Van der Pol oscillator benchmark with damping `ε`.
pub fn example2(
    epsilon: f64,
    n_e: usize,
    n_c: usize,
    phi: f64,
    ts: f64,
    seed: u64,
) -> Result<Experiment> {
    let model = discretize(&van_der_pol_model(epsilon)?, Discretization::rk4(ts)?)?;
    let weights = QuadraticWeights::new(
        DMatrix::identity(2, 2) * 50.0,
        DMatrix::from_element(1, 1, 150.0),
        DMatrix::identity(2, 2) * 200.0,
        DMatrix::from_element(1, 1, 1e-2),
        DMatrix::identity(2, 2) * 200.0,
    )?;

    let process = NoiseSpec::uniform(2, 0.0, 0.25, seed);
    let measurement = NoiseSpec::uniform(1, 0.0, 0.025, seed.wrapping_add(0x9E3779B97F4A7C15));
    let process_discrete = process.scaled(ts);
    let success_threshold = 2.0 * process_discrete.amplitude().max(measurement.amplitude());

    let cfg = EcmpcConfig {
        n_e,
        n_c,
        phi,
        forward_disturbances: ForwardDisturbances::Omit,
        terminal_set: None,
        weights,
        x_box: BoxSet::symmetric(2, 5.0)?,
        u_box: BoxSet::symmetric(1, 5.0)?.with_rate(DVector::from_element(1, 2.0))?,
        w_box: BoxSet::symmetric(2, 0.25)?.scaled(ts),
        v_box: None,
        enforce_v_box: false,
        solver: default_solver(),
        state_penalty: 1e6,
        arrival_strategy: ArrivalStrategy::SurrogateAdaptive { forgetting: 0.95 },
        p0_inv: DMatrix::identity(2, 2) * 1e-5,
    };

    Ok(Experiment {
        name: format!("example2-eps{epsilon}"),
        model,
        cfg,
        x0: DVector::from_column_slice(&[0.5, 1.0]),
        prior: DVector::zeros(2),
        process_noise: process_discrete,
        measurement_noise: measurement,
        ts,
        success_threshold,
    })
}
