//! Simultaneous moving-horizon estimation and model-predictive control
//! for nonlinear systems under bounded disturbances.
//!
//! At every sampling instant a single box-constrained nonlinear program is
//! solved over a backward (estimation) window and a forward (control)
//! window: the unknowns are the state at the start of the backward window,
//! the process disturbances along it and the future control inputs. The
//! first input of the solution is applied and the problem is rebuilt one
//! step later, warm-started from the shifted solution.
//!
//! The crate is split along that structure:
//!
//! - [`dynamics`] — plant and prediction models, fixed-step discretization,
//!   constraint boxes and seeded noise generation,
//! - [`costs`] — quadratic stage costs, arrival cost and cost-to-go, and
//!   the φ-weighted combined criterion,
//! - [`nlp`] — the projected Gauss-Newton solver with Levenberg damping
//!   used for every receding-horizon solve, plus a brute-force grid oracle,
//! - [`ecmpc`] — the receding-horizon controller itself (simultaneous and
//!   independent estimate-then-control pipelines),
//! - [`horizons`] — minimum horizon lengths, the stability-certificate
//!   quantities and estimation-error bounds.
//!
//! Everything here is `no_std` (with `alloc`); simulation harnesses, file
//! formats and the command line live in the companion `simul-ecmpc` crate.
#![no_std]
#![deny(unsafe_code)]
// Validation uses `!(x > 0.0)`-style comparisons on purpose: they reject
// NaN inputs, which `x <= 0.0` would let through.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod costs;
pub mod dynamics;
pub mod ecmpc;
pub mod horizons;
mod math;
pub mod nlp;

mod error;

pub use error::{Error, Result};

pub use dynamics::{BoxSet, Discretization, NoiseSpec, Scheme, SystemModel, TimeDomain};
pub use ecmpc::{
    Controller, DecisionVector, EcmpcConfig, IndependentPipeline, StepOutput, WindowBuffer,
};
pub use nlp::{SolveOptions, SolveResult, TerminationReason};
