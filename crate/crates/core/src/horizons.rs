//! Horizon lengths, stability-certificate quantities and error bounds.
//!
//! The closed-loop guarantees of the simultaneous scheme hinge on the
//! backward window being long enough for the estimation error to contract
//! and the forward window being long enough for the cost decrease to
//! dominate the disturbance budget. This module carries the closed-form
//! minimum horizon lengths, the pseudo-controllability measure, the
//! empirical ω(N_c) sweep and the estimation-error bounds, both in their
//! general form and specialized to the scalar cubic benchmark plant.

use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::costs::{self, KBoundFunctions, QuadraticWeights};
use crate::dynamics::{BoxSet, SystemModel};
use crate::ecmpc::{Controller, EcmpcConfig, IndependentPipeline};
use crate::error::{Error, Result};
use crate::math;
use crate::nlp::{self, ResidualProblem, SolveOptions};

/// Constants entering the general estimation-error bound.
///
/// These are properties of the system and the estimator tuning; they are
/// supplied by the user, not derived here.
#[derive(Debug, Clone, Copy)]
pub struct EstimatorBoundConstants {
    pub zeta: f64,
    pub rho: f64,
    pub c_beta: f64,
    pub p: f64,
    /// Exponent `a` in the `p/a` power of the disturbance envelope.
    pub a_exp: f64,
    pub c1: f64,
    pub c2: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub eta: f64,
    pub mu: f64,
    /// Maximal error of the prior on the initial condition.
    pub e_max: f64,
    pub lambda_min_p_inv: f64,
    pub lambda_max_p_inv: f64,
    /// Constant of the minimum-backward-window formula.
    pub c_beta_bar: f64,
}

impl EstimatorBoundConstants {
    pub fn validate(&self) -> Result<()> {
        for (v, name) in [
            (self.zeta, "zeta"),
            (self.rho, "rho"),
            (self.c_beta, "c_beta"),
            (self.p, "p"),
            (self.a_exp, "a_exp"),
            (self.c1, "c1"),
            (self.c2, "c2"),
            (self.alpha1, "alpha1"),
            (self.alpha2, "alpha2"),
            (self.eta, "eta"),
            (self.e_max, "e_max"),
            (self.lambda_min_p_inv, "lambda_min_p_inv"),
            (self.lambda_max_p_inv, "lambda_max_p_inv"),
            (self.c_beta_bar, "c_beta_bar"),
        ] {
            if !(v > 0.0) {
                return Err(Error::InvalidConstant { name, value: v });
            }
        }
        if !(self.mu >= 0.0) {
            return Err(Error::InvalidConstant {
                name: "mu",
                value: self.mu,
            });
        }
        Ok(())
    }

    /// Contraction base `θ = (2+μ)/(2(1+μ))`, strictly below one for `μ > 0`.
    pub fn theta(&self) -> f64 {
        (2.0 + self.mu) / (2.0 * (1.0 + self.mu))
    }
}

/// Inputs of the minimum-forward-horizon formula.
#[derive(Debug, Clone, Copy)]
pub struct ControllabilityBudget {
    /// Relaxation constant of the cost-to-go contraction.
    pub delta: f64,
    /// Upper bound on the partial-cost growth sequence.
    pub l_bound: f64,
    /// Pseudo-controllability measure; must stay below one.
    pub delta_wc: f64,
}

impl ControllabilityBudget {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0) {
            return Err(Error::InvalidConstant {
                name: "delta",
                value: self.delta,
            });
        }
        if !(self.l_bound > 1.0) {
            return Err(Error::InvalidConstant {
                name: "l_bound",
                value: self.l_bound,
            });
        }
        if !(self.delta_wc >= 0.0) {
            return Err(Error::InvalidConstant {
                name: "delta_wc",
                value: self.delta_wc,
            });
        }
        if self.delta_wc >= 1.0 {
            return Err(Error::UncontrollableBudget {
                ratio: self.delta_wc,
            });
        }
        Ok(())
    }
}

/// One row of the empirical ω sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OmegaRow {
    pub n_c: usize,
    pub omega: f64,
    /// Initial condition attaining the maximum.
    pub argmax_x0: f64,
    /// Largest partial-cost ratio observed (constructive L sequence).
    pub l_max: f64,
    /// Grid points skipped because the stage cost vanished.
    pub skipped: usize,
}

/// Certificate block serialized into run reports.
#[derive(Debug, Clone)]
pub struct HorizonCertificate {
    pub n_e_min: usize,
    pub n_c_min: usize,
    pub delta_wc: f64,
    pub omega: Vec<OmegaRow>,
    pub pi_e_bar: f64,
    /// Asymptotic estimation-error radius (noise-driven part only).
    pub epsilon_e: f64,
}

/// Ceiling with a relative guard against floating-point dust just above an
/// integer.
fn ceil_guarded(v: f64) -> usize {
    (math::ceil(v - 1e-9 * v.max(1.0)) as usize).max(1)
}

/// Minimum backward window `⌈(2^ζ e_max^{ζ−1} c̄_β)^{1/η}⌉`, floored at 1.
pub fn min_backward_horizon_general(c: &EstimatorBoundConstants) -> Result<usize> {
    c.validate()?;
    let base = math::powf(2.0, c.zeta) * math::powf(c.e_max, c.zeta - 1.0) * c.c_beta_bar;
    let val = math::powf(base, 1.0 / c.eta);
    Ok(ceil_guarded(val))
}

/// Minimum backward window for the scalar cubic plant:
/// `⌈4(2 + (√(P⁻¹Re) + √(P⁻¹Qe)·a·g)/(√(QeRe)·K))²⌉`.
pub fn min_backward_horizon_example1(
    p_inv: f64,
    qe: f64,
    re: f64,
    a: f64,
    g: f64,
    k_gain: f64,
) -> Result<usize> {
    if !(k_gain > 0.0) {
        return Err(Error::ControllabilityGain { gain: k_gain });
    }
    for (v, name) in [(qe, "qe"), (re, "re"), (a, "a")] {
        if !(v > 0.0) {
            return Err(Error::InvalidConstant { name, value: v });
        }
    }
    // p_inv = 0 is the vanishing-fraction limit and is allowed.
    for (v, name) in [(p_inv, "p_inv"), (g, "g")] {
        if !(v >= 0.0) {
            return Err(Error::InvalidConstant { name, value: v });
        }
    }
    let frac =
        (math::sqrt(p_inv * re) + math::sqrt(p_inv * qe) * a * g) / (math::sqrt(qe * re) * k_gain);
    let val = 4.0 * (2.0 + frac) * (2.0 + frac);
    Ok(ceil_guarded(val))
}

/// Minimum forward window `⌈1 + ln(δ(L−1)/(1−Δ))/ln(L/(L−1))⌉`, floored at
/// 1 when the logarithm argument drops below one.
pub fn min_forward_horizon(b: &ControllabilityBudget) -> Result<usize> {
    b.validate()?;
    let arg = b.delta * (b.l_bound - 1.0) / (1.0 - b.delta_wc);
    if arg <= 1.0 {
        return Ok(1);
    }
    let val = 1.0 + math::ln(arg) / math::ln(b.l_bound / (b.l_bound - 1.0));
    Ok(ceil_guarded(val))
}

/// Pseudo-controllability measure: worst case over gridded states and
/// disturbances of the best-achievable cost ratio
/// `ℓ_{w_c}(w) / max_u ℓ_c(x, u)`.
///
/// Returns the measure together with the number of grid states excluded
/// because the stage cost vanished over the whole input grid.
pub fn pseudo_controllability(
    weights: &QuadraticWeights,
    x_box: &BoxSet,
    u_box: &BoxSet,
    w_box: &BoxSet,
    resolution: f64,
) -> Result<(f64, usize)> {
    for (b, name) in [(x_box, "X"), (u_box, "U"), (w_box, "W")] {
        if !b.is_finite() {
            let _ = name;
            return Err(Error::InfeasibleBox {
                context: "pseudo-controllability needs finite boxes",
            });
        }
    }
    if !(resolution > 0.0) {
        return Err(Error::InvalidConstant {
            name: "resolution",
            value: resolution,
        });
    }

    let mut w_max = 0.0f64;
    for w in grid_points(w_box, resolution) {
        w_max = w_max.max(costs::forward_disturbance_cost(&w, weights)?);
    }

    let mut denom_min = f64::INFINITY;
    let mut skipped = 0usize;
    for x in grid_points(x_box, resolution) {
        let mut best = 0.0f64;
        for u in grid_points(u_box, resolution) {
            best = best.max(costs::controller_stage_cost(&x, &u, weights)?);
        }
        if best < 1e-12 {
            skipped += 1;
            continue;
        }
        denom_min = denom_min.min(best);
    }
    if !denom_min.is_finite() {
        return Err(Error::Config(alloc::string::String::from(
            "stage cost vanished on the whole grid",
        )));
    }
    Ok((w_max / denom_min, skipped))
}

fn grid_points(box_set: &BoxSet, resolution: f64) -> Vec<DVector<f64>> {
    let n = box_set.dim();
    let mut counts = Vec::with_capacity(n);
    for i in 0..n {
        let span = box_set.upper()[i] - box_set.lower()[i];
        counts.push(if span == 0.0 {
            0usize
        } else {
            math::ceil(span / resolution) as usize
        });
    }
    let mut points = Vec::new();
    let mut idx = alloc::vec![0usize; n];
    loop {
        points.push(DVector::from_fn(n, |i, _| {
            let span = box_set.upper()[i] - box_set.lower()[i];
            if counts[i] == 0 {
                box_set.lower()[i]
            } else {
                box_set.lower()[i] + span * idx[i] as f64 / counts[i] as f64
            }
        }));
        let mut dim = 0;
        loop {
            if dim == n {
                return points;
            }
            idx[dim] += 1;
            if idx[dim] <= counts[dim] {
                break;
            }
            idx[dim] = 0;
            dim += 1;
        }
    }
}

/// Controller flavour for the ω sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepMode {
    Simultaneous,
    Independent,
}

/// Empirical ω(N_c): for each horizon in `n_c_list`, sweep initial
/// conditions over a grid in the state box, run one controller solve from
/// a clean one-measurement window primed at the initial condition, and
/// record the worst `Υ(Ξ)/ℓ_c + Δ/δ` together with the constructive L
/// sequence. Grid points where the stage cost vanishes are skipped and
/// counted.
pub fn omega_empirical(
    model: &SystemModel,
    cfg_template: &EcmpcConfig,
    mode: SweepMode,
    n_c_list: &[usize],
    budget: &ControllabilityBudget,
    grid_points_per_axis: usize,
) -> Result<Vec<OmegaRow>> {
    if n_c_list.is_empty() {
        return Err(Error::Config(alloc::string::String::from(
            "empty horizon list",
        )));
    }
    budget.validate()?;
    if !cfg_template.x_box.is_finite() {
        return Err(Error::InfeasibleBox {
            context: "omega sweep needs a finite state box",
        });
    }
    let weights = &cfg_template.weights;
    let mut rows = Vec::with_capacity(n_c_list.len());
    for &n_c in n_c_list {
        let mut best = f64::NEG_INFINITY;
        let mut best_x0 = f64::NAN;
        let mut l_max = 1.0f64;
        let mut skipped = 0usize;
        for x0 in sweep_grid(&cfg_template.x_box, grid_points_per_axis) {
            let mut cfg = cfg_template.clone();
            cfg.n_c = n_c;
            let y0 = model.output(&x0);
            let out = match mode {
                SweepMode::Simultaneous => {
                    let mut ctl = Controller::new(model.clone(), cfg, x0.clone())?;
                    ctl.step(&y0)?
                }
                SweepMode::Independent => {
                    let mut ctl =
                        IndependentPipeline::new(model.clone(), cfg.clone(), cfg, x0.clone())?;
                    ctl.step(&y0)?
                }
            };
            if out.stage_cost < 1e-12 {
                skipped += 1;
                continue;
            }
            let omega = out.cost_to_go / out.stage_cost + budget.delta_wc / budget.delta;
            if omega > best {
                best = omega;
                best_x0 = x0[0];
            }

            // Constructive L sequence along the solved forward trajectory.
            let sigma = costs::sigma_lower_bound(&out.estimate, weights);
            if sigma > 1e-12 {
                let mut x = out.estimate.clone();
                let mut partial = 0.0f64;
                let l0 = costs::cost_to_go(&x, weights)? / sigma;
                l_max = l_max.max(l0);
                for u in &out.decision.u_fwd {
                    partial += costs::controller_stage_cost(&x, u, weights)?;
                    x = model.step(&x, u)?;
                    let psi_partial = partial + costs::cost_to_go(&x, weights)?;
                    l_max = l_max.max(psi_partial / sigma);
                }
            }
        }
        if !best.is_finite() {
            return Err(Error::Config(alloc::format!(
                "stage cost vanished at every sweep point for n_c={n_c}"
            )));
        }
        rows.push(OmegaRow {
            n_c,
            omega: best,
            argmax_x0: best_x0,
            l_max,
            skipped,
        });
    }
    Ok(rows)
}

fn sweep_grid(x_box: &BoxSet, points_per_axis: usize) -> Vec<DVector<f64>> {
    let n = x_box.dim();
    if n == 1 {
        let count = points_per_axis.max(2);
        return (0..count)
            .map(|i| {
                let t = i as f64 / (count - 1) as f64;
                DVector::from_element(
                    1,
                    x_box.lower()[0] + t * (x_box.upper()[0] - x_box.lower()[0]),
                )
            })
            .collect();
    }
    // Boundary plus axes for higher dimensions: corners, face midpoints and
    // per-axis interior lines.
    let mut points = Vec::new();
    let per_axis = points_per_axis.max(2);
    for axis in 0..n {
        for i in 0..per_axis {
            let t = i as f64 / (per_axis - 1) as f64;
            let mut v = DVector::zeros(n);
            v[axis] = x_box.lower()[axis] + t * (x_box.upper()[axis] - x_box.lower()[axis]);
            points.push(v);
        }
    }
    for corner in 0..(1usize << n) {
        points.push(DVector::from_fn(n, |i, _| {
            if corner >> i & 1 == 1 {
                x_box.upper()[i]
            } else {
                x_box.lower()[i]
            }
        }));
    }
    points
}

/// Worst-case estimation-side perturbation of the cost decrease:
/// `γ̄_w(γ̲_w⁻¹(γ̄_p(χ)/N_e + γ̄_w(‖w‖) + γ̄_v(‖v‖)))`.
pub fn pi_e_bar(chi_bound: f64, w_sup: f64, v_sup: f64, k: &KBoundFunctions, n_e: usize) -> f64 {
    let inner = k.gamma_p_upper.eval(chi_bound) / n_e as f64
        + k.gamma_w_upper.eval(w_sup)
        + k.gamma_v_upper.eval(v_sup);
    k.gamma_w_upper.eval(k.gamma_w_lower.inverse(inner))
}

/// General estimation-error bound: prior-error contraction plus
/// disturbance- and noise-driven offsets.
pub fn estimation_error_bound(
    c: &EstimatorBoundConstants,
    k: &KBoundFunctions,
    x0_err: f64,
    w_sup: f64,
    v_sup: f64,
    step: usize,
    n_e: usize,
) -> Result<f64> {
    c.validate()?;
    let n_e_min = min_backward_horizon_general(c)?;
    if n_e < n_e_min {
        return Err(Error::Config(alloc::format!(
            "backward window {n_e} below the minimum {n_e_min}"
        )));
    }
    let theta = c.theta();
    let i = (step / n_e) as f64;

    let phi_bar = math::powf(theta, i)
        * math::powf(x0_err, c.zeta)
        * (n_e_min as f64 / n_e as f64)
        * (math::powf(c.lambda_max_p_inv / c.lambda_min_p_inv, c.rho)
            * (c.c_beta * math::powf(18.0, c.p)
                + math::powf(c.lambda_min_p_inv, c.alpha1)
                    * (c.c1 * math::powf(3.0, c.alpha1) + c.c2 * math::powf(3.0, c.alpha2)))
            + c.c_beta * math::powf(2.0, c.p));

    let pi_w = 2.0
        * (1.0 + c.mu)
        * (c.c_beta * math::powf(18.0, c.p) / c.lambda_min_p_inv
            * math::powf(k.gamma_w_upper.eval(w_sup), c.p / c.a_exp)
            + c.c2 * math::powf(3.0, c.alpha2) * math::powf(k.gamma_w_upper.eval(w_sup), c.alpha2)
            + k.gamma_1.eval(6.0 * w_sup)
            + k.gamma_1
                .eval(6.0 * k.gamma_w_lower.inverse(3.0 * k.gamma_w_upper.eval(w_sup))));

    let pi_v = 2.0
        * (1.0 + c.mu)
        * (c.c_beta * math::powf(18.0, c.p) / c.lambda_min_p_inv
            * math::powf(k.gamma_v_upper.eval(v_sup), c.p / c.a_exp)
            + c.c1 * math::powf(3.0, c.alpha1) * math::powf(k.gamma_v_upper.eval(v_sup), c.alpha1)
            + k.gamma_2.eval(6.0 * v_sup)
            + k.gamma_2
                .eval(6.0 * k.gamma_v_lower.inverse(3.0 * k.gamma_v_upper.eval(v_sup))));

    Ok(phi_bar + pi_w + pi_v)
}

/// Estimation-error bound specialized to the scalar cubic plant with
/// quadratic costs. `step` is the sample index; the contraction exponent is
/// `⌊step/N_e⌋`.
#[allow(clippy::too_many_arguments)]
pub fn estimation_error_bound_example1(
    p_inv: f64,
    qe: f64,
    re: f64,
    a: f64,
    g: f64,
    k_gain: f64,
    mu: f64,
    x0_err: f64,
    w_sup: f64,
    v_sup: f64,
    step: usize,
    n_e: usize,
) -> Result<f64> {
    if !(k_gain > 0.0) {
        return Err(Error::ControllabilityGain { gain: k_gain });
    }
    if n_e == 0 {
        return Err(Error::Config(alloc::string::String::from(
            "backward window must be positive",
        )));
    }
    if !(mu >= 0.0) {
        return Err(Error::InvalidConstant {
            name: "mu",
            value: mu,
        });
    }
    let n_e_min = min_backward_horizon_example1(p_inv, qe, re, a, g, k_gain)? as f64;
    let theta = (2.0 + mu) / (2.0 * (1.0 + mu));
    let i = (step / n_e) as f64;

    let frac =
        (math::sqrt(p_inv * re) + math::sqrt(p_inv * qe) * a * g) / (math::sqrt(qe * re) * k_gain);
    let prior_term = x0_err * math::powf(theta * n_e_min / (2.0 * n_e as f64), i) * (2.0 + frac);

    let w_term = 2.0
        * (1.0 + mu)
        * w_sup
        * (2.0 / k_gain
            + (math::sqrt(qe * re) * k_gain + math::sqrt(p_inv * qe) * a * g)
                / (math::sqrt(p_inv * qe) * k_gain));

    let v_term = 2.0
        * (1.0 + mu)
        * v_sup
        * (2.0 * g / k_gain
            + (math::sqrt(re * qe) * k_gain + math::sqrt(p_inv * re))
                / (math::sqrt(p_inv * qe) * k_gain));

    Ok(prior_term + w_term + v_term)
}

/// Trajectory-divergence bound of the scalar cubic plant:
/// `|Δx₀|e^{−Kt} + ‖Δw‖/K + a·g·‖Δy‖/K`.
pub fn iioss_bound_example1(
    dx0: f64,
    k_gain: f64,
    a: f64,
    g: f64,
    w_diff_sup: f64,
    y_diff_sup: f64,
    t: f64,
) -> f64 {
    math::abs(dx0) * math::exp(-k_gain * t) + w_diff_sup / k_gain + a * g * y_diff_sup / k_gain
}

struct ReachabilityProblem<'a> {
    model: &'a SystemModel,
    x0: DVector<f64>,
    w_seq: &'a [DVector<f64>],
    omega: &'a BoxSet,
    target: &'a BoxSet,
    n_c: usize,
    pen: f64,
}

impl<'a> ReachabilityProblem<'a> {
    fn n_rows(&self) -> usize {
        let n_x = self.model.n_x();
        self.n_c * n_x + n_x
    }

    fn hinge(v: f64, lo: f64, hi: f64) -> (f64, f64) {
        if v > hi {
            (v - hi, 1.0)
        } else if v < lo {
            (lo - v, -1.0)
        } else {
            (0.0, 0.0)
        }
    }
}

impl<'a> ResidualProblem for ReachabilityProblem<'a> {
    fn dims(&self) -> (usize, usize) {
        (self.n_rows(), self.n_c * self.model.n_u())
    }

    fn assemble(
        &self,
        z: &DVector<f64>,
        want_jacobian: bool,
    ) -> Result<(DVector<f64>, Option<DMatrix<f64>>)> {
        let n_x = self.model.n_x();
        let n_u = self.model.n_u();
        let n_vars = self.n_c * n_u;
        let mut r = DVector::zeros(self.n_rows());
        let mut jac = want_jacobian.then(|| DMatrix::zeros(self.n_rows(), n_vars));
        let mut sens = DMatrix::<f64>::zeros(n_x, n_vars);
        let mut x = self.x0.clone();
        let mut row = 0;
        for step in 0..self.n_c {
            let u = z.rows(step * n_u, n_u).into_owned();
            let (a, b) = self.model.jacobians(&x, &u);
            x = self.model.step(&x, &u)? + &self.w_seq[step];
            sens = &a * &sens;
            for ci in 0..n_u {
                for ri in 0..n_x {
                    sens[(ri, step * n_u + ci)] += b[(ri, ci)];
                }
            }
            let box_set = if step + 1 == self.n_c {
                self.target
            } else {
                self.omega
            };
            for i in 0..n_x {
                let (viol, sign) = Self::hinge(x[i], box_set.lower()[i], box_set.upper()[i]);
                r[row] = self.pen * viol;
                if let Some(j) = jac.as_mut() {
                    if sign != 0.0 {
                        for col in 0..n_vars {
                            j[(row, col)] = sign * self.pen * sens[(i, col)];
                        }
                    }
                }
                row += 1;
            }
        }
        // Terminal hinge against Ω as well, so the whole path stays inside.
        for i in 0..n_x {
            let (viol, sign) = Self::hinge(x[i], self.omega.lower()[i], self.omega.upper()[i]);
            r[row] = self.pen * viol;
            if let Some(j) = jac.as_mut() {
                if sign != 0.0 {
                    for col in 0..n_vars {
                        j[(row, col)] = sign * self.pen * sens[(i, col)];
                    }
                }
            }
            row += 1;
        }
        Ok((r, jac))
    }
}

/// Sampled membership check for the robust controllable set: for each of
/// `n_samples` disturbance sequences drawn from the disturbance box, search
/// for an input sequence keeping the state in `omega` and steering it into
/// `target` within `n_c` steps. True iff every sample admits one.
#[allow(clippy::too_many_arguments)]
pub fn robust_controllable_membership(
    model: &SystemModel,
    omega: &BoxSet,
    u_box: &BoxSet,
    w_box: &BoxSet,
    target: &BoxSet,
    n_c: usize,
    x0: &DVector<f64>,
    n_samples: usize,
    seed: u64,
) -> Result<bool> {
    if !omega.contains(x0, 0.0) {
        return Ok(false);
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let n_u = model.n_u();

    // Greedy stabilizing warm start: per step, pick the grid input whose
    // nominal successor is closest to the target center. Keeps the initial
    // rollout bounded even for plants that blow up under zero input.
    let center = (target.lower() + target.upper()) * 0.5;
    let mut u_span = 0.0f64;
    for i in 0..n_u {
        u_span = u_span.max(u_box.upper()[i] - u_box.lower()[i]);
    }
    let u_grid = grid_points(u_box, (u_span / 8.0).max(1e-9));
    let mut warm = DVector::zeros(n_c * n_u);
    let mut x = x0.clone();
    for j in 0..n_c {
        let mut best_d = f64::INFINITY;
        let mut best_u = DVector::zeros(n_u);
        for u in &u_grid {
            if let Ok(next) = model.step(&x, u) {
                let d = (&next - &center).norm();
                if d.is_finite() && d < best_d {
                    best_d = d;
                    best_u = u.clone();
                }
            }
        }
        warm.rows_mut(j * n_u, n_u).copy_from(&best_u);
        if let Ok(next) = model.step(&x, &best_u) {
            x = next;
        }
    }

    for _ in 0..n_samples.max(1) {
        let w_seq: Vec<DVector<f64>> = (0..n_c)
            .map(|_| w_box.sample(&mut rng))
            .collect::<Result<_>>()?;
        let problem = ReachabilityProblem {
            model,
            x0: x0.clone(),
            w_seq: &w_seq,
            omega,
            target,
            n_c,
            pen: 1.0,
        };
        let mut bounds_lower = DVector::zeros(n_c * n_u);
        let mut bounds_upper = DVector::zeros(n_c * n_u);
        for j in 0..n_c {
            for i in 0..n_u {
                bounds_lower[j * n_u + i] = u_box.lower()[i];
                bounds_upper[j * n_u + i] = u_box.upper()[i];
            }
        }
        let bounds = BoxSet::new(bounds_lower, bounds_upper)?;
        let opts = SolveOptions {
            max_iterations: 200,
            gradient_tol: 1e-10,
            warm_start: Some(warm.clone()),
            ..SolveOptions::default()
        };
        let res = nlp::solve(&problem, &bounds, &opts)?;
        if res.objective > 1e-10 {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Convenience: certificate quantities for a configuration, combining the
/// closed-form horizons with an ω sweep.
#[allow(clippy::too_many_arguments)]
pub fn certificate(
    model: &SystemModel,
    cfg: &EcmpcConfig,
    mode: SweepMode,
    budget: &ControllabilityBudget,
    constants: &EstimatorBoundConstants,
    k_bounds: &KBoundFunctions,
    n_c_list: &[usize],
    chi_bound: f64,
    w_sup: f64,
    v_sup: f64,
) -> Result<HorizonCertificate> {
    let omega = omega_empirical(model, cfg, mode, n_c_list, budget, 33)?;
    let n_e_min = min_backward_horizon_general(constants)?;
    let n_c_min = min_forward_horizon(budget)?;
    let pi = pi_e_bar(chi_bound, w_sup, v_sup, k_bounds, cfg.n_e);
    // Noise-driven part of the general bound: the prior term vanishes as
    // the contraction settles, so evaluate at zero prior error.
    let eps = estimation_error_bound(
        constants,
        k_bounds,
        0.0,
        w_sup,
        v_sup,
        0,
        cfg.n_e.max(n_e_min),
    )?;
    Ok(HorizonCertificate {
        n_e_min,
        n_c_min,
        delta_wc: budget.delta_wc,
        omega,
        pi_e_bar: pi,
        epsilon_e: eps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::costs::PowerLaw;

    fn unit_constants() -> EstimatorBoundConstants {
        EstimatorBoundConstants {
            zeta: 1.0,
            rho: 1.0,
            c_beta: 1.0,
            p: 2.0,
            a_exp: 1.0,
            c1: 1.0,
            c2: 1.0,
            alpha1: 1.0,
            alpha2: 1.0,
            eta: 1.0,
            mu: 0.05,
            e_max: 1.0,
            lambda_min_p_inv: 1.0,
            lambda_max_p_inv: 1.0,
            c_beta_bar: 1.0,
        }
    }

    #[test]
    fn backward_horizon_general_examples() {
        let c = unit_constants();
        assert_eq!(min_backward_horizon_general(&c).unwrap(), 2);

        let mut tiny = c;
        tiny.c_beta_bar = 1e-12;
        assert_eq!(min_backward_horizon_general(&tiny).unwrap(), 1);

        let mut c2 = c;
        c2.zeta = 2.0;
        c2.e_max = 2.0;
        c2.eta = 2.0;
        // (2² · 2 · 1)^{1/2} = 2.828..., ceiled to 3.
        assert_eq!(min_backward_horizon_general(&c2).unwrap(), 3);
    }

    #[test]
    fn backward_horizon_example1_cases() {
        // Vanishing fraction: ⌈4·4⌉ = 16.
        assert_eq!(
            min_backward_horizon_example1(0.0, 15.0, 1e3, 1.0, 1.536, 0.7326).unwrap(),
            16
        );
        // All ones with g = 0: ⌈4(2+1)²⌉ = 36.
        assert_eq!(
            min_backward_horizon_example1(1.0, 1.0, 1.0, 1.0, 0.0, 1.0).unwrap(),
            36
        );
        assert!(min_backward_horizon_example1(1.0, 1.0, 1.0, 1.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn forward_horizon_examples() {
        let b = ControllabilityBudget {
            delta: 1.0,
            l_bound: 2.0,
            delta_wc: 0.1,
        };
        assert_eq!(min_forward_horizon(&b).unwrap(), 2);

        let b = ControllabilityBudget {
            delta: 1.0,
            l_bound: 10.0,
            delta_wc: 0.1,
        };
        assert_eq!(min_forward_horizon(&b).unwrap(), 23);

        // Degenerate floor: argument of the logarithm below one.
        let b = ControllabilityBudget {
            delta: 0.5,
            l_bound: 1.5,
            delta_wc: 0.1,
        };
        assert_eq!(min_forward_horizon(&b).unwrap(), 1);

        let bad = ControllabilityBudget {
            delta: 1.0,
            l_bound: 2.0,
            delta_wc: 1.0,
        };
        assert!(matches!(
            min_forward_horizon(&bad),
            Err(Error::UncontrollableBudget { .. })
        ));
    }

    #[test]
    fn forward_horizon_monotonicity() {
        use rand_chacha::rand_core::RngCore;
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let mut unif = |lo: f64, hi: f64| {
            lo + (hi - lo) * ((rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64))
        };
        for _ in 0..1000 {
            let delta = unif(0.05, 3.0);
            let l = unif(1.1, 20.0);
            let dwc = unif(0.0, 0.95);
            let base = ControllabilityBudget {
                delta,
                l_bound: l,
                delta_wc: dwc,
            };
            let n = min_forward_horizon(&base).unwrap();
            for bumped in [
                ControllabilityBudget {
                    delta: delta * 1.3,
                    ..base
                },
                ControllabilityBudget {
                    l_bound: l * 1.3,
                    ..base
                },
                ControllabilityBudget {
                    delta_wc: (dwc + 0.04).min(0.99),
                    ..base
                },
            ] {
                assert!(
                    min_forward_horizon(&bumped).unwrap() >= n,
                    "monotonicity violated at {base:?} -> {bumped:?}"
                );
            }
        }
    }

    #[test]
    fn example1_horizon_monotone_in_gain_and_g() {
        use rand_chacha::rand_core::RngCore;
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let mut unif = |lo: f64, hi: f64| {
            lo + (hi - lo) * ((rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64))
        };
        for _ in 0..1000 {
            let p_inv = unif(1e-6, 10.0);
            let qe = unif(0.1, 100.0);
            let re = unif(0.1, 2000.0);
            let a = unif(0.1, 3.0);
            let g = unif(0.0, 4.0);
            let k = unif(0.05, 3.0);
            let n = min_backward_horizon_example1(p_inv, qe, re, a, g, k).unwrap();
            let n_more_gain = min_backward_horizon_example1(p_inv, qe, re, a, g, k * 1.5).unwrap();
            let n_more_g = min_backward_horizon_example1(p_inv, qe, re, a, g + 0.5, k).unwrap();
            assert!(n_more_gain <= n);
            assert!(n_more_g >= n);
        }
    }

    #[test]
    fn pseudo_controllability_analytic_case() {
        // ℓ_{w_c} = w², ℓ_c = x² + u² over W = [−0.4, 0.4], U = [−0.6, 0.6],
        // X = [−0.8, 0.8]: worst ratio 0.4²/0.6² at x = 0.
        let w = QuadraticWeights::scalar(1.0, 1.0, 1.0, 1.0, 1.0).unwrap();
        let (val, skipped) = pseudo_controllability(
            &w,
            &BoxSet::symmetric(1, 0.8).unwrap(),
            &BoxSet::symmetric(1, 0.6).unwrap(),
            &BoxSet::symmetric(1, 0.4).unwrap(),
            1e-3,
        )
        .unwrap();
        assert!((val - 0.4444444).abs() < 1e-3, "got {val}");
        assert_eq!(skipped, 0);

        // Degenerate disturbance set: measure collapses to zero.
        let (val, _) = pseudo_controllability(
            &w,
            &BoxSet::symmetric(1, 0.8).unwrap(),
            &BoxSet::symmetric(1, 0.6).unwrap(),
            &BoxSet::symmetric(1, 0.0).unwrap(),
            1e-2,
        )
        .unwrap();
        assert_eq!(val, 0.0);

        // Halving the disturbance box quarters the quadratic measure.
        let (v1, _) = pseudo_controllability(
            &w,
            &BoxSet::symmetric(1, 0.8).unwrap(),
            &BoxSet::symmetric(1, 0.6).unwrap(),
            &BoxSet::symmetric(1, 0.4).unwrap(),
            1e-3,
        )
        .unwrap();
        let (v2, _) = pseudo_controllability(
            &w,
            &BoxSet::symmetric(1, 0.8).unwrap(),
            &BoxSet::symmetric(1, 0.6).unwrap(),
            &BoxSet::symmetric(1, 0.2).unwrap(),
            1e-3,
        )
        .unwrap();
        assert!((v2 / v1 - 0.25).abs() < 1e-2);
    }

    #[test]
    fn pi_e_bar_cases() {
        let quad = |c: f64| PowerLaw::new(c, 2.0).unwrap();
        let id = PowerLaw::new(1.0, 1.0).unwrap();
        let k = KBoundFunctions {
            gamma_w_lower: quad(15.0),
            gamma_w_upper: quad(15.0),
            gamma_v_lower: quad(1e3),
            gamma_v_upper: quad(1e3),
            gamma_p_upper: quad(1e-5),
            gamma_1: id,
            gamma_2: id,
        };
        assert_eq!(pi_e_bar(0.0, 0.0, 0.0, &k, 30), 0.0);
        // Equal envelopes collapse the composition: π̄_E = γ̄_w(‖w‖).
        let v = pi_e_bar(0.0, 0.1, 0.0, &k, 30);
        assert!((v - 0.15).abs() < 1e-12, "got {v}");
        // Monotone in each argument.
        assert!(pi_e_bar(0.5, 0.1, 0.0, &k, 30) >= v);
        assert!(pi_e_bar(0.0, 0.2, 0.0, &k, 30) >= v);
        assert!(pi_e_bar(0.0, 0.1, 0.1, &k, 30) >= v);
    }

    #[test]
    fn general_bound_zero_and_decay() {
        let c = unit_constants();
        let quad = |co: f64| PowerLaw::new(co, 2.0).unwrap();
        let id = PowerLaw::new(1.0, 1.0).unwrap();
        let k = KBoundFunctions {
            gamma_w_lower: quad(1.0),
            gamma_w_upper: quad(1.0),
            gamma_v_lower: quad(1.0),
            gamma_v_upper: quad(1.0),
            gamma_p_upper: quad(1.0),
            gamma_1: id,
            gamma_2: id,
        };
        let b0 = estimation_error_bound(&c, &k, 0.0, 0.0, 0.0, 0, 2).unwrap();
        assert_eq!(b0, 0.0);
        let early = estimation_error_bound(&c, &k, 1.0, 0.0, 0.0, 0, 2).unwrap();
        let late = estimation_error_bound(&c, &k, 1.0, 0.0, 0.0, 4, 2).unwrap();
        assert!(late < early);
    }

    #[test]
    fn general_bound_matches_direct_transcription() {
        // Independent transcription of the three displays with all
        // constants 1, μ = 0.05, p = 2, quadratic unit envelopes, k = 0.
        let c = unit_constants();
        let quad = PowerLaw::new(1.0, 2.0).unwrap();
        let id = PowerLaw::new(1.0, 1.0).unwrap();
        let k = KBoundFunctions {
            gamma_w_lower: quad,
            gamma_w_upper: quad,
            gamma_v_lower: quad,
            gamma_v_upper: quad,
            gamma_p_upper: quad,
            gamma_1: id,
            gamma_2: id,
        };
        let (x0e, ws, vs, n_e) = (0.7, 0.1, 0.05, 2);

        let phi_direct = {
            // θ⁰ x0e^1 (ℕe/Ne) ((1/1)^1 (1·18² + 1^1(1·3 + 1·3)) + 1·2²)
            let n_e_min = 2.0;
            x0e * (n_e_min / n_e as f64) * ((18.0f64 * 18.0 + 6.0) + 4.0)
        };
        let pi_w_direct = {
            // 2(1.05)(18²/1 · (w²)^{2/1} + 1·3·(w²)^1 + γ1(6w) + γ1(6·√(3w²)))
            let gw = ws * ws;
            2.1 * (324.0 * gw * gw + 3.0 * gw + 6.0 * ws + 6.0 * libm::sqrt(3.0 * gw))
        };
        let pi_v_direct = {
            let gv = vs * vs;
            2.1 * (324.0 * gv * gv + 3.0 * gv + 6.0 * vs + 6.0 * libm::sqrt(3.0 * gv))
        };
        let expect = phi_direct + pi_w_direct + pi_v_direct;
        let got = estimation_error_bound(&c, &k, x0e, ws, vs, 0, n_e).unwrap();
        assert!(
            (got - expect).abs() < 1e-9 * expect.max(1.0),
            "{got} vs {expect}"
        );
    }

    #[test]
    fn example1_bound_cases() {
        let b = estimation_error_bound_example1(
            1e-5, 15.0, 1e3, 1.0, 1.536, 0.7326, 0.05, 0.0, 0.0, 0.0, 0, 30,
        )
        .unwrap();
        assert_eq!(b, 0.0);

        // Doubling the gain strictly decreases the bound.
        let args = (1e-5, 15.0, 1e3, 1.0, 1.536, 0.05, 3.266, 0.001, 0.06);
        let b1 = estimation_error_bound_example1(
            args.0, args.1, args.2, args.3, args.4, 0.7326, args.5, args.6, args.7, args.8, 10, 30,
        )
        .unwrap();
        let b2 = estimation_error_bound_example1(
            args.0, args.1, args.2, args.3, args.4, 1.4652, args.5, args.6, args.7, args.8, 10, 30,
        )
        .unwrap();
        assert!(b2 < b1);

        // Decaying in the contraction index.
        let b_early = estimation_error_bound_example1(
            args.0, args.1, args.2, args.3, args.4, 0.7326, args.5, args.6, 0.0, 0.0, 0, 30,
        )
        .unwrap();
        let b_late = estimation_error_bound_example1(
            args.0, args.1, args.2, args.3, args.4, 0.7326, args.5, args.6, 0.0, 0.0, 90, 30,
        )
        .unwrap();
        assert!(b_late < b_early);
    }

    #[test]
    fn iioss_bound_cases() {
        assert_eq!(iioss_bound_example1(0.0, 0.7, 1.0, 1.5, 0.0, 0.0, 3.0), 0.0);
        let early = iioss_bound_example1(1.5, 0.7, 1.0, 1.5, 0.0, 0.0, 0.0);
        let late = iioss_bound_example1(1.5, 0.7, 1.0, 1.5, 0.0, 0.0, 50.0);
        assert!(early > 1.0 && late < 1e-10);
    }

    #[test]
    fn reachability_from_origin() {
        let model = crate::dynamics::discretize(
            &crate::dynamics::scalar_cubic_model(1.0).unwrap(),
            crate::dynamics::Discretization::rk4(0.1).unwrap(),
        )
        .unwrap();
        let omega = BoxSet::symmetric(1, 0.8).unwrap();
        let u_box = BoxSet::symmetric(1, 2.5).unwrap();
        let w_box = BoxSet::symmetric(1, 0.001).unwrap();
        let target = BoxSet::symmetric(1, 0.1).unwrap();

        // From the origin with tiny disturbances the target is reachable.
        assert!(robust_controllable_membership(
            &model,
            &omega,
            &u_box,
            &w_box,
            &target,
            10,
            &DVector::zeros(1),
            20,
            7,
        )
        .unwrap());

        // Outside Ω: immediate rejection.
        assert!(!robust_controllable_membership(
            &model,
            &omega,
            &u_box,
            &w_box,
            &target,
            10,
            &DVector::from_element(1, 0.9),
            5,
            7,
        )
        .unwrap());

        // From the box corner with the nominal-regime authority.
        assert!(robust_controllable_membership(
            &model,
            &omega,
            &u_box,
            &w_box,
            &target,
            10,
            &DVector::from_element(1, 0.8),
            50,
            11,
        )
        .unwrap());
    }
}
