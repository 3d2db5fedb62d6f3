//! Receding-horizon estimation and control.
//!
//! At time `k` the controller solves one box-constrained program over a
//! backward window of measurements and a forward window of predictions. The
//! decision variables are the state at the window start, the disturbances
//! along the backward window and the future inputs; noise estimates are
//! eliminated through the output residuals `v̂_j = y_j − h(x̂_j)`. The
//! infinite-horizon version of the criterion (both sums unbounded) is the
//! conceptual limit case; the finite windows plus arrival cost and
//! cost-to-go keep the per-step problem bounded and tractable.
//!
//! Two drivers are provided: [`Controller`] solves the joint (simultaneous)
//! problem, [`IndependentPipeline`] solves estimation first and control
//! second, which is the classical separation-principle pipeline used as a
//! comparison baseline.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::costs::{self, ArrivalCost, ArrivalStrategy, CriterionValue, QuadraticWeights};
use crate::dynamics::{project_box, BoxSet, SystemModel};
use crate::error::{Error, Result};
use crate::math;
use crate::nlp::{self, ResidualProblem, SolveOptions, SolveResult};

/// Handling of process disturbances along the forward window.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum ForwardDisturbances {
    /// No forward disturbance variables (the default; keeps the problem a
    /// pure least-squares minimization).
    #[default]
    Omit,
    /// Worst-case disturbances via alternating descent/ascent: one
    /// projected gradient-ascent step on the forward disturbances per
    /// outer minimization, capped at `alternations`.
    AlternatingMinMax {
        alternations: usize,
        ascent_step: f64,
    },
}

/// Configuration of one receding-horizon controller.
#[derive(Debug, Clone)]
pub struct EcmpcConfig {
    pub n_e: usize,
    pub n_c: usize,
    /// Multi-objective weight: `φ·Ψ_E + (1−φ)·Ψ_C`.
    pub phi: f64,
    pub forward_disturbances: ForwardDisturbances,
    pub terminal_set: Option<BoxSet>,
    pub weights: QuadraticWeights,
    pub x_box: BoxSet,
    pub u_box: BoxSet,
    pub w_box: BoxSet,
    pub v_box: Option<BoxSet>,
    /// Enforce the noise box on the eliminated residuals (penalty).
    pub enforce_v_box: bool,
    pub solver: SolveOptions,
    /// Exact-penalty weight for predicted states leaving the state box.
    pub state_penalty: f64,
    pub arrival_strategy: ArrivalStrategy,
    /// Initial arrival weight `P₀⁻¹`.
    pub p0_inv: DMatrix<f64>,
}

impl EcmpcConfig {
    pub fn validate(&self, model: &SystemModel) -> Result<()> {
        if self.n_e < 1 || self.n_c < 1 {
            return Err(Error::Config(alloc::format!(
                "horizons must be at least 1 (n_e={}, n_c={})",
                self.n_e,
                self.n_c
            )));
        }
        if !(0.0..=1.0).contains(&self.phi) {
            return Err(Error::InvalidConstant {
                name: "phi",
                value: self.phi,
            });
        }
        if self.x_box.dim() != model.n_x()
            || self.u_box.dim() != model.n_u()
            || self.w_box.dim() != model.n_w()
        {
            return Err(Error::InfeasibleBox {
                context: "box dimensions do not match the model",
            });
        }
        for (b, name) in [(&self.x_box, "X"), (&self.u_box, "U"), (&self.w_box, "W")] {
            if !b.contains_origin() {
                return Err(Error::Config(alloc::format!(
                    "{name} must contain the origin"
                )));
            }
        }
        if let Some(xf) = &self.terminal_set {
            if xf.dim() != model.n_x() {
                return Err(Error::InfeasibleBox {
                    context: "terminal set dimension",
                });
            }
            for i in 0..xf.dim() {
                if xf.lower()[i] < self.x_box.lower()[i] || xf.upper()[i] > self.x_box.upper()[i] {
                    return Err(Error::InfeasibleBox {
                        context: "terminal set not contained in the state box",
                    });
                }
            }
        }
        if !(self.state_penalty > 0.0) {
            return Err(Error::InvalidConstant {
                name: "state_penalty",
                value: self.state_penalty,
            });
        }
        self.weights.validate()?;
        self.solver.validate()?;
        Ok(())
    }
}

/// Sliding window of measurements and applied inputs.
///
/// Holds `y_s ..= y_k` and `u_s ..= u_{k−1}`; the arrival cost describing
/// the state at time `s` is owned by the controller and travels with the
/// window start.
#[derive(Debug, Clone)]
pub struct WindowBuffer {
    start: usize,
    ys: Vec<DVector<f64>>,
    us: Vec<DVector<f64>>,
}

impl WindowBuffer {
    pub fn new() -> Self {
        Self {
            start: 0,
            ys: Vec::new(),
            us: Vec::new(),
        }
    }

    /// Buffer preloaded with history; `ys` must hold exactly one more entry
    /// than `us`.
    pub fn with_history(
        start: usize,
        ys: Vec<DVector<f64>>,
        us: Vec<DVector<f64>>,
    ) -> Result<Self> {
        if ys.is_empty() || ys.len() != us.len() + 1 {
            return Err(Error::Config(alloc::format!(
                "window needs |ys| = |us| + 1, got {} and {}",
                ys.len(),
                us.len()
            )));
        }
        Ok(Self { start, ys, us })
    }

    pub fn is_empty(&self) -> bool {
        self.ys.is_empty()
    }

    /// Time index of the newest measurement.
    pub fn k(&self) -> usize {
        self.start + self.ys.len().saturating_sub(1)
    }

    pub fn window_start(&self) -> usize {
        self.start
    }

    /// Effective backward horizon `min(k, N_e)` once managed by a controller.
    pub fn horizon(&self) -> usize {
        self.ys.len().saturating_sub(1)
    }

    pub fn measurements(&self) -> &Vec<DVector<f64>> {
        &self.ys
    }

    pub fn inputs(&self) -> &Vec<DVector<f64>> {
        &self.us
    }

    pub fn push_measurement(&mut self, y: DVector<f64>) {
        self.ys.push(y);
    }

    pub fn push_input(&mut self, u: DVector<f64>) {
        self.us.push(u);
    }

    /// Drop the oldest sample; the caller re-anchors the arrival cost.
    pub fn slide(&mut self) {
        self.start += 1;
        self.ys.remove(0);
        self.us.remove(0);
    }
}

impl Default for WindowBuffer {
    fn default() -> Self {
        Self::new()
    }
}

/// Stacked unknowns of one receding-horizon solve.
///
/// `u_fwd` always stores actual input values; the increment substitution
/// used under rate constraints is internal to the solver layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionVector {
    pub x_init: DVector<f64>,
    pub w_back: Vec<DVector<f64>>,
    pub u_fwd: Vec<DVector<f64>>,
    pub w_fwd: Option<Vec<DVector<f64>>>,
}

/// What one call to `step` produced.
#[derive(Debug, Clone)]
pub struct StepOutput {
    /// First forward input, clamped to the input box.
    pub applied_input: DVector<f64>,
    /// Current state estimate `x̂_{k|k}`.
    pub estimate: DVector<f64>,
    pub decision: DecisionVector,
    /// Solver objective (weighted criterion plus constraint penalties).
    pub objective: f64,
    /// Penalty-free criterion halves at the solution.
    pub psi: CriterionValue,
    /// Criterion at the shifted previous solution, evaluated against the
    /// new measurement: the feasible-candidate cost used for ΔΨ checks.
    pub tail_from_prev: Option<CriterionValue>,
    /// Estimator cost of the newest output residual inside the tail,
    /// `v̂ᵀRe v̂` at `v̂ = y_k − h(x̂_{k|k−1})`. The cost-decrease analysis
    /// compares window shifts only, so its ΔΨ excludes this term; the
    /// optimality comparison against the full tail keeps it.
    pub tail_new_output_cost: Option<f64>,
    /// Predicted terminal state Ξ.
    pub terminal_state: DVector<f64>,
    /// Υ(Ξ) at the solution.
    pub cost_to_go: f64,
    /// ℓ_c(x̂_{k|k}, û_{k|k}) at the solution.
    pub stage_cost: f64,
    /// |x̂_s − x̄_s| at the solution.
    pub arrival_deviation: f64,
    /// Eigenvalue bounds of the current arrival weight P⁻¹.
    pub arrival_bounds: (f64, f64),
    pub iterations: usize,
    pub converged: bool,
    pub kkt_residual: f64,
    pub max_state_violation: f64,
    pub max_noise_violation: f64,
    pub max_input_violation: f64,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum ProblemKind {
    Simultaneous,
    EstimateOnly,
    ControlOnly,
}

struct Layout {
    n_x: usize,
    n_u: usize,
    n_w: usize,
    n_y: usize,
    n_back: usize,
    n_c: usize,
    backward: bool,
    forward: bool,
    minmax: bool,
    rate_mode: bool,
    x_off: usize,
    w_off: usize,
    u_off: usize,
    wf_off: usize,
    n_vars: usize,
    n_res: usize,
}

impl Layout {
    fn new(model: &SystemModel, cfg: &EcmpcConfig, n_back: usize, kind: ProblemKind) -> Layout {
        let backward = kind != ProblemKind::ControlOnly;
        let forward = kind != ProblemKind::EstimateOnly;
        let minmax = forward
            && matches!(
                cfg.forward_disturbances,
                ForwardDisturbances::AlternatingMinMax { .. }
            );
        let rate_mode = forward && cfg.u_box.rate().is_some();
        let (n_x, n_u, n_w, n_y) = (model.n_x(), model.n_u(), model.n_w(), model.n_y());
        let n_c = if forward { cfg.n_c } else { 0 };
        let n_back = if backward { n_back } else { 0 };

        let x_off = 0;
        let w_off = if backward { n_x } else { 0 };
        let u_off = w_off + if backward { n_back * n_w } else { 0 };
        let wf_off = u_off + n_c * n_u;
        let n_vars = wf_off + if minmax { n_c * n_w } else { 0 };

        let mut n_res = 0;
        if backward {
            n_res += n_x; // arrival
            n_res += n_back * n_w; // disturbance stage costs
            n_res += (n_back + 1) * n_y; // output residuals
            n_res += n_back * n_x; // state-box penalties on rolled states
            if cfg.enforce_v_box && cfg.v_box.is_some() {
                n_res += (n_back + 1) * n_y;
            }
        }
        if forward {
            n_res += n_c * (n_x + n_u); // stage costs
            n_res += n_x; // terminal cost
            n_res += n_c * n_x; // state-box penalties
            if cfg.terminal_set.is_some() {
                n_res += n_x;
            }
            if rate_mode {
                n_res += n_c * n_u; // input-box penalties under substitution
            }
        }

        Layout {
            n_x,
            n_u,
            n_w,
            n_y,
            n_back,
            n_c,
            backward,
            forward,
            minmax,
            rate_mode,
            x_off,
            w_off,
            u_off,
            wf_off,
            n_vars,
            n_res,
        }
    }
}

/// One receding-horizon program in residual form, ready for [`nlp::solve`].
pub struct HorizonProblem<'a> {
    model: &'a SystemModel,
    cfg: &'a EcmpcConfig,
    layout: Layout,
    ys: Vec<DVector<f64>>,
    us: Vec<DVector<f64>>,
    arrival_mean: DVector<f64>,
    sqrt_p_inv: DMatrix<f64>,
    sqrt_qe: DMatrix<f64>,
    sqrt_re: DMatrix<f64>,
    sqrt_qc: DMatrix<f64>,
    sqrt_rc: DMatrix<f64>,
    sqrt_sc: DMatrix<f64>,
    weight_e: f64,
    weight_c: f64,
    pen_sqrt: f64,
    /// Previous applied input; base point of the increment substitution.
    u_prev: DVector<f64>,
    fixed_x_now: Option<DVector<f64>>,
}

impl<'a> HorizonProblem<'a> {
    fn new(
        model: &'a SystemModel,
        cfg: &'a EcmpcConfig,
        buf: &WindowBuffer,
        arrival: &ArrivalCost,
        u_prev: DVector<f64>,
        kind: ProblemKind,
        fixed_x_now: Option<DVector<f64>>,
    ) -> Result<Self> {
        if buf.is_empty() {
            return Err(Error::EmptyBuffer);
        }
        let n_back = buf.horizon().min(cfg.n_e);
        let layout = Layout::new(model, cfg, n_back, kind);
        let (we, wc) = match kind {
            ProblemKind::Simultaneous => (math::sqrt(cfg.phi), math::sqrt(1.0 - cfg.phi)),
            ProblemKind::EstimateOnly => (1.0, 0.0),
            ProblemKind::ControlOnly => (0.0, 1.0),
        };
        Ok(Self {
            model,
            cfg,
            layout,
            ys: buf.ys.clone(),
            us: buf.us.clone(),
            arrival_mean: arrival.mean().clone(),
            sqrt_p_inv: costs::matrix_sqrt(arrival.weight()),
            sqrt_qe: costs::matrix_sqrt(&cfg.weights.qe),
            sqrt_re: costs::matrix_sqrt(&cfg.weights.re),
            sqrt_qc: costs::matrix_sqrt(&cfg.weights.qc),
            sqrt_rc: costs::matrix_sqrt(&cfg.weights.rc),
            sqrt_sc: costs::matrix_sqrt(&cfg.weights.sc),
            weight_e: we,
            weight_c: wc,
            pen_sqrt: math::sqrt(cfg.state_penalty),
            u_prev,
            fixed_x_now,
        })
    }

    pub fn n_variables(&self) -> usize {
        self.layout.n_vars
    }

    pub fn n_residuals(&self) -> usize {
        self.layout.n_res
    }

    /// Flat solver bounds matching the packed variable layout.
    pub fn bounds(&self) -> BoxSet {
        let l = &self.layout;
        let mut lower = DVector::from_element(l.n_vars, f64::NEG_INFINITY);
        let mut upper = DVector::from_element(l.n_vars, f64::INFINITY);
        if l.backward {
            for i in 0..l.n_x {
                lower[l.x_off + i] = self.cfg.x_box.lower()[i];
                upper[l.x_off + i] = self.cfg.x_box.upper()[i];
            }
            for j in 0..l.n_back {
                for i in 0..l.n_w {
                    lower[l.w_off + j * l.n_w + i] = self.cfg.w_box.lower()[i];
                    upper[l.w_off + j * l.n_w + i] = self.cfg.w_box.upper()[i];
                }
            }
        }
        if l.forward {
            for j in 0..l.n_c {
                for i in 0..l.n_u {
                    let (lo, hi) = if l.rate_mode {
                        let r = self.cfg.u_box.rate().expect("rate mode")[i];
                        (-r, r)
                    } else {
                        (self.cfg.u_box.lower()[i], self.cfg.u_box.upper()[i])
                    };
                    lower[l.u_off + j * l.n_u + i] = lo;
                    upper[l.u_off + j * l.n_u + i] = hi;
                }
            }
            if l.minmax {
                for j in 0..l.n_c {
                    for i in 0..l.n_w {
                        lower[l.wf_off + j * l.n_w + i] = self.cfg.w_box.lower()[i];
                        upper[l.wf_off + j * l.n_w + i] = self.cfg.w_box.upper()[i];
                    }
                }
            }
        }
        BoxSet::new(lower, upper).expect("layout bounds are ordered")
    }

    /// Pack a decision vector into the flat solver layout.
    pub fn pack(&self, dv: &DecisionVector) -> DVector<f64> {
        let l = &self.layout;
        let mut z = DVector::zeros(l.n_vars);
        if l.backward {
            z.rows_mut(l.x_off, l.n_x).copy_from(&dv.x_init);
            for (j, w) in dv.w_back.iter().enumerate().take(l.n_back) {
                z.rows_mut(l.w_off + j * l.n_w, l.n_w).copy_from(w);
            }
        }
        if l.forward {
            let mut prev = self.u_prev.clone();
            for (j, u) in dv.u_fwd.iter().enumerate().take(l.n_c) {
                if l.rate_mode {
                    z.rows_mut(l.u_off + j * l.n_u, l.n_u)
                        .copy_from(&(u - &prev));
                    prev = u.clone();
                } else {
                    z.rows_mut(l.u_off + j * l.n_u, l.n_u).copy_from(u);
                }
            }
            if l.minmax {
                if let Some(wf) = &dv.w_fwd {
                    for (j, w) in wf.iter().enumerate().take(l.n_c) {
                        z.rows_mut(l.wf_off + j * l.n_w, l.n_w).copy_from(w);
                    }
                }
            }
        }
        z
    }

    /// Unpack a flat solver vector; inputs are reconstructed from the
    /// increments under rate substitution.
    pub fn unpack(&self, z: &DVector<f64>) -> DecisionVector {
        let l = &self.layout;
        let x_init = if l.backward {
            z.rows(l.x_off, l.n_x).into_owned()
        } else {
            self.fixed_x_now
                .clone()
                .unwrap_or_else(|| DVector::zeros(l.n_x))
        };
        let w_back = (0..l.n_back)
            .map(|j| z.rows(l.w_off + j * l.n_w, l.n_w).into_owned())
            .collect();
        let mut u_fwd = Vec::with_capacity(l.n_c);
        let mut prev = self.u_prev.clone();
        for j in 0..l.n_c {
            let raw = z.rows(l.u_off + j * l.n_u, l.n_u).into_owned();
            let u = if l.rate_mode { &prev + &raw } else { raw };
            prev = u.clone();
            u_fwd.push(u);
        }
        let w_fwd = l.minmax.then(|| {
            (0..l.n_c)
                .map(|j| z.rows(l.wf_off + j * l.n_w, l.n_w).into_owned())
                .collect()
        });
        DecisionVector {
            x_init,
            w_back,
            u_fwd,
            w_fwd,
        }
    }

    /// Roll the full state trajectory `x̂_s ..= x̂_{k+Nc}` at `z`.
    pub fn rollout(&self, z: &DVector<f64>) -> Result<Vec<DVector<f64>>> {
        let l = &self.layout;
        let dv = self.unpack(z);
        let mut states = Vec::with_capacity(l.n_back + l.n_c + 1);
        let mut x = if l.backward {
            dv.x_init.clone()
        } else {
            self.fixed_x_now
                .clone()
                .expect("control-only needs a fixed state")
        };
        states.push(x.clone());
        for j in 0..l.n_back {
            x = self.model.step(&x, &self.us[j])? + &dv.w_back[j];
            states.push(x.clone());
        }
        for j in 0..l.n_c {
            x = self.model.step(&x, &dv.u_fwd[j])?;
            if let Some(wf) = &dv.w_fwd {
                x += &wf[j];
            }
            states.push(x.clone());
        }
        Ok(states)
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

impl<'a> ResidualProblem for HorizonProblem<'a> {
    fn dims(&self) -> (usize, usize) {
        (self.layout.n_res, self.layout.n_vars)
    }

    fn assemble(
        &self,
        z: &DVector<f64>,
        want_jacobian: bool,
    ) -> Result<(DVector<f64>, Option<DMatrix<f64>>)> {
        let l = &self.layout;
        let mut r = DVector::zeros(l.n_res);
        let mut jac = if want_jacobian {
            Some(DMatrix::zeros(l.n_res, l.n_vars))
        } else {
            None
        };
        let mut row = 0usize;

        // Sensitivity of the current rolled state w.r.t. the variables.
        let mut sens = DMatrix::zeros(l.n_x, l.n_vars);
        let mut x;

        if l.backward {
            x = z.rows(l.x_off, l.n_x).into_owned();
            for i in 0..l.n_x {
                sens[(i, l.x_off + i)] = 1.0;
            }

            // Arrival rows.
            let chi = &x - &self.arrival_mean;
            let ar = &self.sqrt_p_inv * chi * self.weight_e;
            r.rows_mut(row, l.n_x).copy_from(&ar);
            if let Some(j) = jac.as_mut() {
                j.view_mut((row, l.x_off), (l.n_x, l.n_x))
                    .copy_from(&(&self.sqrt_p_inv * self.weight_e));
            }
            row += l.n_x;

            for step in 0..=l.n_back {
                // Output residual rows for x̂_{s+step}.
                let v_hat = &self.ys[step] - self.model.output(&x);
                let vr = &self.sqrt_re * &v_hat * self.weight_e;
                r.rows_mut(row, l.n_y).copy_from(&vr);
                let c_jac = (want_jacobian || self.cfg.enforce_v_box && self.cfg.v_box.is_some())
                    .then(|| self.model.output_jacobian(&x));
                if let Some(j) = jac.as_mut() {
                    let block =
                        (&self.sqrt_re * c_jac.as_ref().unwrap()) * &sens * (-self.weight_e);
                    j.view_mut((row, 0), (l.n_y, l.n_vars)).copy_from(&block);
                }
                row += l.n_y;

                // Noise-box penalty rows.
                if self.cfg.enforce_v_box {
                    if let Some(vb) = &self.cfg.v_box {
                        for i in 0..l.n_y {
                            let (viol, sign) = Self::hinge(v_hat[i], vb.lower()[i], vb.upper()[i]);
                            r[row] = self.pen_sqrt * viol;
                            if let Some(j) = jac.as_mut() {
                                if sign != 0.0 {
                                    let crow = c_jac.as_ref().unwrap().row(i) * &sens;
                                    for col in 0..l.n_vars {
                                        j[(row, col)] = -sign * self.pen_sqrt * crow[col];
                                    }
                                }
                            }
                            row += 1;
                        }
                    }
                }

                if step < l.n_back {
                    // Disturbance stage rows (constant Jacobian block).
                    let w = z.rows(l.w_off + step * l.n_w, l.n_w).into_owned();
                    let wr = &self.sqrt_qe * &w * self.weight_e;
                    r.rows_mut(row, l.n_w).copy_from(&wr);
                    if let Some(j) = jac.as_mut() {
                        j.view_mut((row, l.w_off + step * l.n_w), (l.n_w, l.n_w))
                            .copy_from(&(&self.sqrt_qe * self.weight_e));
                    }
                    row += l.n_w;

                    // Advance: x⁺ = Φ(x, u_applied) + ŵ.
                    let (a, _) = self.model.jacobians(&x, &self.us[step]);
                    x = self.model.step(&x, &self.us[step])? + &w;
                    sens = &a * &sens;
                    for i in 0..l.n_w {
                        sens[(i, l.w_off + step * l.n_w + i)] += 1.0;
                    }

                    // State-box penalty on the rolled state.
                    row = self.emit_state_penalty(
                        &x,
                        &sens,
                        &mut r,
                        jac.as_mut(),
                        row,
                        &self.cfg.x_box,
                    );
                }
            }
        } else {
            x = self
                .fixed_x_now
                .clone()
                .ok_or(Error::Config(alloc::string::String::from(
                    "control-only problem missing its state",
                )))?;
        }

        if l.forward {
            let mut u = self.u_prev.clone();
            for step in 0..l.n_c {
                // Stage cost rows on the current state.
                let xr = &self.sqrt_qc * &x * self.weight_c;
                r.rows_mut(row, l.n_x).copy_from(&xr);
                if let Some(j) = jac.as_mut() {
                    let block = &self.sqrt_qc * &sens * self.weight_c;
                    j.view_mut((row, 0), (l.n_x, l.n_vars)).copy_from(&block);
                }
                row += l.n_x;

                // Current input value.
                let raw = z.rows(l.u_off + step * l.n_u, l.n_u).into_owned();
                if l.rate_mode {
                    u += &raw;
                } else {
                    u = raw;
                }

                // Input stage rows.
                let ur = &self.sqrt_rc * &u * self.weight_c;
                r.rows_mut(row, l.n_u).copy_from(&ur);
                if let Some(j) = jac.as_mut() {
                    if l.rate_mode {
                        // u_step depends on every increment up to step.
                        for past in 0..=step {
                            j.view_mut((row, l.u_off + past * l.n_u), (l.n_u, l.n_u))
                                .copy_from(&(&self.sqrt_rc * self.weight_c));
                        }
                    } else {
                        j.view_mut((row, l.u_off + step * l.n_u), (l.n_u, l.n_u))
                            .copy_from(&(&self.sqrt_rc * self.weight_c));
                    }
                }
                row += l.n_u;

                // Input-box penalties, needed only under rate substitution.
                if l.rate_mode {
                    for i in 0..l.n_u {
                        let (viol, sign) =
                            Self::hinge(u[i], self.cfg.u_box.lower()[i], self.cfg.u_box.upper()[i]);
                        r[row] = self.pen_sqrt * viol;
                        if let Some(j) = jac.as_mut() {
                            if sign != 0.0 {
                                for past in 0..=step {
                                    j[(row, l.u_off + past * l.n_u + i)] = sign * self.pen_sqrt;
                                }
                            }
                        }
                        row += 1;
                    }
                }

                // Advance the prediction.
                let (a, b) = self.model.jacobians(&x, &u);
                x = self.model.step(&x, &u)?;
                sens = &a * &sens;
                if l.rate_mode {
                    for past in 0..=step {
                        for ci in 0..l.n_u {
                            for ri in 0..l.n_x {
                                sens[(ri, l.u_off + past * l.n_u + ci)] += b[(ri, ci)];
                            }
                        }
                    }
                } else {
                    for ci in 0..l.n_u {
                        for ri in 0..l.n_x {
                            sens[(ri, l.u_off + step * l.n_u + ci)] += b[(ri, ci)];
                        }
                    }
                }
                if l.minmax {
                    let wf = z.rows(l.wf_off + step * l.n_w, l.n_w).into_owned();
                    x += &wf;
                    for i in 0..l.n_w {
                        sens[(i, l.wf_off + step * l.n_w + i)] += 1.0;
                    }
                }

                row =
                    self.emit_state_penalty(&x, &sens, &mut r, jac.as_mut(), row, &self.cfg.x_box);
            }

            // Terminal cost rows on Ξ.
            let tr = &self.sqrt_sc * &x * self.weight_c;
            r.rows_mut(row, l.n_x).copy_from(&tr);
            if let Some(j) = jac.as_mut() {
                let block = &self.sqrt_sc * &sens * self.weight_c;
                j.view_mut((row, 0), (l.n_x, l.n_vars)).copy_from(&block);
            }
            row += l.n_x;

            if let Some(xf) = &self.cfg.terminal_set {
                row = self.emit_state_penalty(&x, &sens, &mut r, jac.as_mut(), row, xf);
            }
        }

        debug_assert_eq!(row, l.n_res);
        if !r.iter().all(|v| v.is_finite()) {
            return Err(Error::IntegrationFailure {
                stage: "residual assembly",
            });
        }
        Ok((r, jac))
    }

    fn extra(&self, z: &DVector<f64>) -> (f64, DVector<f64>) {
        let l = &self.layout;
        let mut value = 0.0;
        let mut grad = DVector::zeros(l.n_vars);
        if l.minmax {
            let q = &self.cfg.weights.qw_c;
            let scale = self.weight_c * self.weight_c;
            for step in 0..l.n_c {
                let w = z.rows(l.wf_off + step * l.n_w, l.n_w).into_owned();
                let qw = q * &w;
                value -= scale * w.dot(&qw);
                grad.rows_mut(l.wf_off + step * l.n_w, l.n_w)
                    .copy_from(&(qw * (-2.0 * scale)));
            }
        }
        (value, grad)
    }
}

impl<'a> HorizonProblem<'a> {
    fn emit_state_penalty(
        &self,
        x: &DVector<f64>,
        sens: &DMatrix<f64>,
        r: &mut DVector<f64>,
        mut jac: Option<&mut DMatrix<f64>>,
        mut row: usize,
        box_set: &BoxSet,
    ) -> usize {
        for i in 0..x.len() {
            let (viol, sign) = Self::hinge(x[i], box_set.lower()[i], box_set.upper()[i]);
            r[row] = self.pen_sqrt * viol;
            if let Some(j) = jac.as_deref_mut() {
                if sign != 0.0 {
                    for col in 0..self.layout.n_vars {
                        j[(row, col)] = sign * self.pen_sqrt * sens[(i, col)];
                    }
                }
            }
            row += 1;
        }
        row
    }
}

/// Build the receding-horizon program for the simultaneous controller.
///
/// Exposed for direct inspection and for the feasibility checks in
/// [`crate::horizons`]; [`Controller::step`] drives it internally.
pub fn build_problem<'a>(
    model: &'a SystemModel,
    cfg: &'a EcmpcConfig,
    buf: &WindowBuffer,
    arrival: &ArrivalCost,
    u_prev: DVector<f64>,
) -> Result<HorizonProblem<'a>> {
    HorizonProblem::new(
        model,
        cfg,
        buf,
        arrival,
        u_prev,
        ProblemKind::Simultaneous,
        None,
    )
}

fn solve_horizon(problem: &HorizonProblem<'_>, opts: &SolveOptions) -> Result<SolveResult> {
    let bounds = problem.bounds();
    if !problem.layout.minmax {
        return nlp::solve(problem, &bounds, opts);
    }

    // Alternating descent/ascent on the forward disturbances.
    let (alternations, ascent_step) = match problem.cfg.forward_disturbances {
        ForwardDisturbances::AlternatingMinMax {
            alternations,
            ascent_step,
        } => (alternations.max(1), ascent_step),
        ForwardDisturbances::Omit => unreachable!(),
    };
    let l = &problem.layout;
    let wf_len = l.n_c * l.n_w;
    let mut z = match &opts.warm_start {
        Some(w) => project_box(w, &bounds)?,
        None => project_box(&DVector::zeros(l.n_vars), &bounds)?,
    };
    let mut last = None;
    for _ in 0..alternations {
        // Descent with the forward disturbances pinned at their values.
        let mut pinned = bounds.clone();
        let mut lower = pinned.lower().clone();
        let mut upper = pinned.upper().clone();
        for i in 0..wf_len {
            lower[l.wf_off + i] = z[l.wf_off + i];
            upper[l.wf_off + i] = z[l.wf_off + i];
        }
        pinned = BoxSet::new(lower, upper)?;
        let mut inner = opts.clone();
        inner.warm_start = Some(z.clone());
        let res = nlp::solve(problem, &pinned, &inner)?;
        z = res.solution.clone();
        last = Some(res);

        // One projected gradient-ascent step on the forward disturbances.
        let (r, jac) = problem.assemble(&z, true)?;
        let jac = jac.expect("jacobian requested");
        let (_, egrad) = problem.extra(&z);
        let grad = jac.tr_mul(&r) * 2.0 + egrad;
        let f0 = problem.objective(&z)?;
        let mut eta = ascent_step;
        for _ in 0..12 {
            let mut cand = z.clone();
            for i in 0..wf_len {
                cand[l.wf_off + i] += eta * grad[l.wf_off + i];
            }
            let cand = project_box(&cand, &bounds)?;
            if problem.objective(&cand)? > f0 {
                z = cand;
                break;
            }
            eta *= 0.5;
        }
    }
    // Final descent so the returned point is a minimizer for the last
    // disturbance guess.
    let mut pinned_lower = bounds.lower().clone();
    let mut pinned_upper = bounds.upper().clone();
    for i in 0..wf_len {
        pinned_lower[l.wf_off + i] = z[l.wf_off + i];
        pinned_upper[l.wf_off + i] = z[l.wf_off + i];
    }
    let pinned = BoxSet::new(pinned_lower, pinned_upper)?;
    let mut inner = opts.clone();
    inner.warm_start = Some(z);
    let res = nlp::solve(problem, &pinned, &inner)?;
    let _ = last;
    Ok(res)
}

struct PrevSolution {
    dv: DecisionVector,
    states: Vec<DVector<f64>>,
    psi: CriterionValue,
    weighted: f64,
}

/// Greedy grid warm start for the forward inputs: per step, pick the input
/// whose nominal successor is closest to `target`. Cheap, derivative-free
/// and bounded even for plants that escape under zero input.
pub(crate) fn greedy_inputs(
    model: &SystemModel,
    from: &DVector<f64>,
    u_box: &BoxSet,
    n_c: usize,
    target: &DVector<f64>,
) -> Vec<DVector<f64>> {
    let n_u = model.n_u();
    let grid_per_axis = 9usize;
    let mut candidates: Vec<DVector<f64>> = Vec::new();
    let mut idx = vec![0usize; n_u];
    loop {
        candidates.push(DVector::from_fn(n_u, |i, _| {
            let (lo, hi) = (u_box.lower()[i], u_box.upper()[i]);
            if lo.is_finite() && hi.is_finite() {
                lo + (hi - lo) * idx[i] as f64 / (grid_per_axis - 1) as f64
            } else {
                0.0
            }
        }));
        let mut dim = 0;
        loop {
            if dim == n_u {
                break;
            }
            idx[dim] += 1;
            if idx[dim] < grid_per_axis {
                break;
            }
            idx[dim] = 0;
            dim += 1;
        }
        if dim == n_u {
            break;
        }
    }
    let mut x = from.clone();
    let mut out = Vec::with_capacity(n_c);
    for _ in 0..n_c {
        let mut best_d = f64::INFINITY;
        let mut best_u = DVector::zeros(n_u);
        for u in &candidates {
            if let Ok(next) = model.step(&x, u) {
                let d = (&next - target).norm();
                if d.is_finite() && d < best_d {
                    best_d = d;
                    best_u = u.clone();
                }
            }
        }
        if let Ok(next) = model.step(&x, &best_u) {
            x = next;
        }
        out.push(best_u);
    }
    out
}

/// Simultaneous receding-horizon estimator and controller.
pub struct Controller {
    model: SystemModel,
    cfg: EcmpcConfig,
    buf: WindowBuffer,
    arrival: ArrivalCost,
    pending_arrival: Option<ArrivalCost>,
    prev: Option<PrevSolution>,
    u_prev: DVector<f64>,
}

impl Controller {
    /// `prior_mean` is the prior guess of the initial state; the arrival
    /// weight starts at `cfg.p0_inv`.
    pub fn new(model: SystemModel, cfg: EcmpcConfig, prior_mean: DVector<f64>) -> Result<Self> {
        cfg.validate(&model)?;
        let arrival = ArrivalCost::new(prior_mean, cfg.p0_inv.clone(), cfg.arrival_strategy)?;
        let n_u = model.n_u();
        Ok(Self {
            model,
            cfg,
            buf: WindowBuffer::new(),
            arrival,
            pending_arrival: None,
            prev: None,
            u_prev: DVector::zeros(n_u),
        })
    }

    pub fn config(&self) -> &EcmpcConfig {
        &self.cfg
    }

    pub fn buffer(&self) -> &WindowBuffer {
        &self.buf
    }

    pub fn arrival(&self) -> &ArrivalCost {
        &self.arrival
    }

    /// Shifted previous solution: drop the departed stage, repeat the
    /// window bookkeeping, append a zero terminal input.
    fn shifted_warm_start(&self, slid: bool) -> Option<DecisionVector> {
        let prev = self.prev.as_ref()?;
        let first = if slid { 1 } else { 0 };
        let x_init = prev.states[first].clone();
        let mut w_back: Vec<DVector<f64>> = prev.dv.w_back[first..].to_vec();
        let appended_w = match &prev.dv.w_fwd {
            Some(wf) if !wf.is_empty() => wf[0].clone(),
            _ => DVector::zeros(self.model.n_w()),
        };
        w_back.push(appended_w);
        let mut u_fwd: Vec<DVector<f64>> = prev.dv.u_fwd[1..].to_vec();
        u_fwd.push(DVector::zeros(self.model.n_u()));
        let w_fwd = prev.dv.w_fwd.as_ref().map(|wf| {
            let mut shifted: Vec<DVector<f64>> = wf[1..].to_vec();
            shifted.push(DVector::zeros(self.model.n_w()));
            shifted
        });
        Some(DecisionVector {
            x_init,
            w_back,
            u_fwd,
            w_fwd,
        })
    }

    /// Advance one sampling instant: ingest `y_k`, solve, apply the first
    /// input and prepare the next arrival cost.
    pub fn step(&mut self, y: &DVector<f64>) -> Result<StepOutput> {
        if y.len() != self.model.n_y() || !y.iter().all(|v| v.is_finite()) {
            return Err(Error::Config(alloc::format!(
                "measurement must be finite of dim {}",
                self.model.n_y()
            )));
        }
        self.buf.push_measurement(y.clone());
        let mut slid = false;
        if self.buf.horizon() > self.cfg.n_e {
            self.arrival = self
                .pending_arrival
                .take()
                .expect("window slid without a prepared arrival cost");
            self.buf.slide();
            slid = true;
        }

        // Feasible-candidate cost at the shifted previous solution.
        let shifted = self.shifted_warm_start(slid);
        let tail_from_prev = shifted.as_ref().and_then(|dv| {
            costs::evaluate_criterion(&self.model, dv, &self.buf, &self.cfg.weights, &self.arrival)
                .ok()
        });
        let tail_new_output_cost = self.prev.as_ref().and_then(|prev| {
            // One-step-ahead prediction under the input actually applied,
            // matching the tail's rollout exactly.
            let x_k = prev.states.get(prev.dv.w_back.len())?;
            let mut predicted = self.model.step(x_k, &self.u_prev).ok()?;
            if let Some(wf) = &prev.dv.w_fwd {
                if let Some(w0) = wf.first() {
                    predicted += w0;
                }
            }
            let v_hat = y - self.model.output(&predicted);
            Some((v_hat.transpose() * &self.cfg.weights.re * v_hat)[(0, 0)])
        });

        let problem = HorizonProblem::new(
            &self.model,
            &self.cfg,
            &self.buf,
            &self.arrival,
            self.u_prev.clone(),
            ProblemKind::Simultaneous,
            None,
        )?;
        let mut opts = self.cfg.solver.clone();
        opts.warm_start = Some(match &shifted {
            Some(dv) => problem.pack(dv),
            None => {
                // Cold start: prior projected into the state box, greedy
                // stabilizing inputs (a zero-input rollout can escape).
                let x0 = project_box(self.arrival.mean(), &self.cfg.x_box)?;
                let origin = DVector::zeros(self.model.n_x());
                let cold = DecisionVector {
                    x_init: x0.clone(),
                    w_back: vec![DVector::zeros(self.model.n_w()); problem.layout.n_back],
                    u_fwd: greedy_inputs(&self.model, &x0, &self.cfg.u_box, self.cfg.n_c, &origin),
                    w_fwd: problem
                        .layout
                        .minmax
                        .then(|| vec![DVector::zeros(self.model.n_w()); self.cfg.n_c]),
                };
                problem.pack(&cold)
            }
        });
        let solved = solve_horizon(&problem, &opts)?;
        let dv = problem.unpack(&solved.solution);
        let states = problem.rollout(&solved.solution)?;
        let psi = costs::evaluate_criterion(
            &self.model,
            &dv,
            &self.buf,
            &self.cfg.weights,
            &self.arrival,
        )?;

        let n_back = problem.layout.n_back;
        let estimate = states[n_back].clone();
        let terminal = states.last().expect("rollout nonempty").clone();
        let applied = project_box(&dv.u_fwd[0], &self.cfg.u_box)?;

        let output = self.finish_step(
            dv,
            states,
            psi,
            tail_from_prev,
            tail_new_output_cost,
            estimate,
            terminal,
            applied,
            &solved,
            n_back,
        )?;
        Ok(output)
    }

    #[allow(clippy::too_many_arguments)]
    fn finish_step(
        &mut self,
        dv: DecisionVector,
        states: Vec<DVector<f64>>,
        psi: CriterionValue,
        tail_from_prev: Option<CriterionValue>,
        tail_new_output_cost: Option<f64>,
        estimate: DVector<f64>,
        terminal: DVector<f64>,
        applied: DVector<f64>,
        solved: &SolveResult,
        n_back: usize,
    ) -> Result<StepOutput> {
        let weights = &self.cfg.weights;
        let stage_cost = costs::controller_stage_cost(&estimate, &dv.u_fwd[0], weights)?;
        let cost_to_go = costs::cost_to_go(&terminal, weights)?;
        let chi = (&dv.x_init - self.arrival.mean()).norm();

        // Constraint audit at the solution.
        let mut max_state_violation = 0.0f64;
        for x in &states[1..] {
            for i in 0..x.len() {
                let (viol, _) = HorizonProblem::hinge(
                    x[i],
                    self.cfg.x_box.lower()[i],
                    self.cfg.x_box.upper()[i],
                );
                max_state_violation = max_state_violation.max(viol);
            }
        }
        let mut max_noise_violation = 0.0f64;
        if let Some(vb) = &self.cfg.v_box {
            for (j, y) in self.buf.measurements().iter().enumerate().take(n_back + 1) {
                let v_hat = y - self.model.output(&states[j]);
                for i in 0..v_hat.len() {
                    let (viol, _) = HorizonProblem::hinge(v_hat[i], vb.lower()[i], vb.upper()[i]);
                    max_noise_violation = max_noise_violation.max(viol);
                }
            }
        }
        let mut max_input_violation = 0.0f64;
        for u in &dv.u_fwd {
            for i in 0..u.len() {
                let (viol, _) = HorizonProblem::hinge(
                    u[i],
                    self.cfg.u_box.lower()[i],
                    self.cfg.u_box.upper()[i],
                );
                max_input_violation = max_input_violation.max(viol);
            }
        }

        // Prepare the arrival cost for the next slide.
        if self.buf.horizon() == self.cfg.n_e {
            let new_mean = states[1].clone();
            let (a, _) = self.model.jacobians(&states[0], &self.buf.inputs()[0]);
            self.pending_arrival =
                Some(costs::update_arrival(&self.arrival, new_mean, &a, weights)?);
        }

        self.buf.push_input(applied.clone());
        self.u_prev = applied.clone();
        let arrival_bounds = self.arrival.eigen_bounds();
        let weighted = psi.weighted(self.cfg.phi);
        self.prev = Some(PrevSolution {
            dv: dv.clone(),
            states,
            psi,
            weighted,
        });

        Ok(StepOutput {
            applied_input: applied,
            estimate,
            decision: dv,
            objective: solved.objective,
            psi,
            tail_from_prev,
            tail_new_output_cost,
            terminal_state: terminal,
            cost_to_go,
            stage_cost,
            arrival_deviation: chi,
            arrival_bounds,
            iterations: solved.iterations,
            converged: solved.converged(),
            kkt_residual: solved.kkt_residual,
            max_state_violation,
            max_noise_violation,
            max_input_violation,
        })
    }

    /// Criterion halves of the previous solution (for ΔΨ bookkeeping).
    pub fn previous_psi(&self) -> Option<CriterionValue> {
        self.prev.as_ref().map(|p| p.psi)
    }

    pub fn previous_weighted_objective(&self) -> Option<f64> {
        self.prev.as_ref().map(|p| p.weighted)
    }
}

/// Criterion value of the shifted tail of `prev`, evaluated on the already
/// advanced buffer. This is the standalone form of the tail bookkeeping
/// done inside [`Controller::step`]; `StepOutput::tail_from_prev` is this
/// value computed at the right moment of the step.
pub fn tail_cost(
    model: &SystemModel,
    tail: &DecisionVector,
    buf: &WindowBuffer,
    weights: &QuadraticWeights,
    arrival: &ArrivalCost,
) -> Result<CriterionValue> {
    costs::evaluate_criterion(model, tail, buf, weights, arrival)
}

/// Estimate-then-control pipeline: a standalone moving-horizon estimation
/// solve followed by a predictive-control solve from the fresh estimate.
pub struct IndependentPipeline {
    model: SystemModel,
    cfg_mhe: EcmpcConfig,
    cfg_mpc: EcmpcConfig,
    buf: WindowBuffer,
    arrival: ArrivalCost,
    pending_arrival: Option<ArrivalCost>,
    prev_est: Option<(DecisionVector, Vec<DVector<f64>>)>,
    prev_ctl: Option<DecisionVector>,
    prev_psi: Option<CriterionValue>,
    u_prev: DVector<f64>,
}

impl IndependentPipeline {
    pub fn new(
        model: SystemModel,
        cfg_mhe: EcmpcConfig,
        cfg_mpc: EcmpcConfig,
        prior_mean: DVector<f64>,
    ) -> Result<Self> {
        cfg_mhe.validate(&model)?;
        cfg_mpc.validate(&model)?;
        if cfg_mhe.n_e != cfg_mpc.n_e {
            return Err(Error::Config(alloc::string::String::from(
                "estimator and controller configs disagree on the backward horizon",
            )));
        }
        let arrival =
            ArrivalCost::new(prior_mean, cfg_mhe.p0_inv.clone(), cfg_mhe.arrival_strategy)?;
        let n_u = model.n_u();
        Ok(Self {
            model,
            cfg_mhe,
            cfg_mpc,
            buf: WindowBuffer::new(),
            arrival,
            pending_arrival: None,
            prev_est: None,
            prev_ctl: None,
            prev_psi: None,
            u_prev: DVector::zeros(n_u),
        })
    }

    pub fn buffer(&self) -> &WindowBuffer {
        &self.buf
    }

    pub fn arrival(&self) -> &ArrivalCost {
        &self.arrival
    }

    pub fn step(&mut self, y: &DVector<f64>) -> Result<StepOutput> {
        if y.len() != self.model.n_y() || !y.iter().all(|v| v.is_finite()) {
            return Err(Error::Config(alloc::format!(
                "measurement must be finite of dim {}",
                self.model.n_y()
            )));
        }
        self.buf.push_measurement(y.clone());
        let mut slid = false;
        if self.buf.horizon() > self.cfg_mhe.n_e {
            self.arrival = self
                .pending_arrival
                .take()
                .expect("window slid without a prepared arrival cost");
            self.buf.slide();
            slid = true;
        }

        // Tail bookkeeping on the merged previous solution.
        let shifted_est = self.prev_est.as_ref().map(|(dv, states)| {
            let first = if slid { 1 } else { 0 };
            let mut w_back: Vec<DVector<f64>> = dv.w_back[first..].to_vec();
            w_back.push(DVector::zeros(self.model.n_w()));
            (states[first].clone(), w_back)
        });
        let shifted_ctl = self.prev_ctl.as_ref().map(|dv| {
            let mut u_fwd: Vec<DVector<f64>> = dv.u_fwd[1..].to_vec();
            u_fwd.push(DVector::zeros(self.model.n_u()));
            u_fwd
        });
        let tail_from_prev = match (&shifted_est, &shifted_ctl) {
            (Some((x_init, w_back)), Some(u_fwd)) => {
                let tail_dv = DecisionVector {
                    x_init: x_init.clone(),
                    w_back: w_back.clone(),
                    u_fwd: u_fwd.clone(),
                    w_fwd: None,
                };
                costs::evaluate_criterion(
                    &self.model,
                    &tail_dv,
                    &self.buf,
                    &self.cfg_mhe.weights,
                    &self.arrival,
                )
                .ok()
            }
            _ => None,
        };
        let tail_new_output_cost = self.prev_est.as_ref().and_then(|(_, states)| {
            let predicted = self.model.step(states.last()?, &self.u_prev).ok()?;
            let v_hat = y - self.model.output(&predicted);
            Some((v_hat.transpose() * &self.cfg_mhe.weights.re * v_hat)[(0, 0)])
        });

        // Estimation solve.
        let est_problem = HorizonProblem::new(
            &self.model,
            &self.cfg_mhe,
            &self.buf,
            &self.arrival,
            self.u_prev.clone(),
            ProblemKind::EstimateOnly,
            None,
        )?;
        let mut est_opts = self.cfg_mhe.solver.clone();
        est_opts.warm_start = Some(match &shifted_est {
            Some((x_init, w_back)) => est_problem.pack(&DecisionVector {
                x_init: x_init.clone(),
                w_back: w_back.clone(),
                u_fwd: Vec::new(),
                w_fwd: None,
            }),
            None => est_problem.pack(&DecisionVector {
                x_init: project_box(self.arrival.mean(), &self.cfg_mhe.x_box)?,
                w_back: vec![DVector::zeros(self.model.n_w()); est_problem.layout.n_back],
                u_fwd: Vec::new(),
                w_fwd: None,
            }),
        });
        let est_solved = nlp::solve(&est_problem, &est_problem.bounds(), &est_opts)?;
        let est_dv = est_problem.unpack(&est_solved.solution);
        let est_states = est_problem.rollout(&est_solved.solution)?;
        let n_back = est_problem.layout.n_back;
        let estimate = est_states[n_back].clone();

        // Control solve from the fixed estimate.
        let ctl_problem = HorizonProblem::new(
            &self.model,
            &self.cfg_mpc,
            &self.buf,
            &self.arrival,
            self.u_prev.clone(),
            ProblemKind::ControlOnly,
            Some(estimate.clone()),
        )?;
        let mut ctl_opts = self.cfg_mpc.solver.clone();
        let ctl_warm = shifted_ctl.clone().unwrap_or_else(|| {
            greedy_inputs(
                &self.model,
                &estimate,
                &self.cfg_mpc.u_box,
                self.cfg_mpc.n_c,
                &DVector::zeros(self.model.n_x()),
            )
        });
        ctl_opts.warm_start = Some(ctl_problem.pack(&DecisionVector {
            x_init: estimate.clone(),
            w_back: Vec::new(),
            u_fwd: ctl_warm,
            w_fwd: None,
        }));
        let ctl_solved = solve_horizon_control(&ctl_problem, &ctl_opts)?;
        let ctl_dv = ctl_problem.unpack(&ctl_solved.solution);
        let ctl_states = ctl_problem.rollout(&ctl_solved.solution)?;
        let terminal = ctl_states.last().expect("rollout nonempty").clone();

        let merged = DecisionVector {
            x_init: est_dv.x_init.clone(),
            w_back: est_dv.w_back.clone(),
            u_fwd: ctl_dv.u_fwd.clone(),
            w_fwd: ctl_dv.w_fwd.clone(),
        };
        let psi = costs::evaluate_criterion(
            &self.model,
            &merged,
            &self.buf,
            &self.cfg_mhe.weights,
            &self.arrival,
        )?;
        let applied = project_box(&merged.u_fwd[0], &self.cfg_mpc.u_box)?;
        let stage_cost =
            costs::controller_stage_cost(&estimate, &merged.u_fwd[0], &self.cfg_mpc.weights)?;
        let cost_to_go = costs::cost_to_go(&terminal, &self.cfg_mpc.weights)?;
        let chi = (&est_dv.x_init - self.arrival.mean()).norm();

        let mut max_state_violation = 0.0f64;
        for x in est_states[1..].iter().chain(ctl_states[1..].iter()) {
            for i in 0..x.len() {
                let (viol, _) = HorizonProblem::hinge(
                    x[i],
                    self.cfg_mhe.x_box.lower()[i],
                    self.cfg_mhe.x_box.upper()[i],
                );
                max_state_violation = max_state_violation.max(viol);
            }
        }
        let mut max_noise_violation = 0.0f64;
        if let Some(vb) = &self.cfg_mhe.v_box {
            for (j, ym) in self.buf.measurements().iter().enumerate().take(n_back + 1) {
                let v_hat = ym - self.model.output(&est_states[j]);
                for i in 0..v_hat.len() {
                    let (viol, _) = HorizonProblem::hinge(v_hat[i], vb.lower()[i], vb.upper()[i]);
                    max_noise_violation = max_noise_violation.max(viol);
                }
            }
        }
        let mut max_input_violation = 0.0f64;
        for u in &merged.u_fwd {
            for i in 0..u.len() {
                let (viol, _) = HorizonProblem::hinge(
                    u[i],
                    self.cfg_mpc.u_box.lower()[i],
                    self.cfg_mpc.u_box.upper()[i],
                );
                max_input_violation = max_input_violation.max(viol);
            }
        }

        if self.buf.horizon() == self.cfg_mhe.n_e {
            let new_mean = est_states[1].clone();
            let (a, _) = self.model.jacobians(&est_states[0], &self.buf.inputs()[0]);
            self.pending_arrival = Some(costs::update_arrival(
                &self.arrival,
                new_mean,
                &a,
                &self.cfg_mhe.weights,
            )?);
        }

        self.buf.push_input(applied.clone());
        self.u_prev = applied.clone();
        self.prev_est = Some((est_dv, est_states));
        self.prev_ctl = Some(ctl_dv);
        self.prev_psi = Some(psi);

        Ok(StepOutput {
            applied_input: applied,
            estimate,
            decision: merged,
            objective: est_solved.objective + ctl_solved.objective,
            psi,
            tail_from_prev,
            tail_new_output_cost,
            terminal_state: terminal,
            cost_to_go,
            stage_cost,
            arrival_deviation: chi,
            arrival_bounds: self.arrival.eigen_bounds(),
            iterations: est_solved.iterations + ctl_solved.iterations,
            converged: est_solved.converged() && ctl_solved.converged(),
            kkt_residual: est_solved.kkt_residual.max(ctl_solved.kkt_residual),
            max_state_violation,
            max_noise_violation,
            max_input_violation,
        })
    }

    pub fn previous_psi(&self) -> Option<CriterionValue> {
        self.prev_psi
    }
}

fn solve_horizon_control(problem: &HorizonProblem<'_>, opts: &SolveOptions) -> Result<SolveResult> {
    solve_horizon(problem, opts)
}

/// Either controller flavour behind one `step` call.
#[allow(clippy::large_enum_variant)]
pub enum AnyController {
    Simultaneous(Controller),
    Independent(IndependentPipeline),
}

impl AnyController {
    pub fn step(&mut self, y: &DVector<f64>) -> Result<StepOutput> {
        match self {
            AnyController::Simultaneous(c) => c.step(y),
            AnyController::Independent(p) => p.step(y),
        }
    }

    pub fn previous_psi(&self) -> Option<CriterionValue> {
        match self {
            AnyController::Simultaneous(c) => c.previous_psi(),
            AnyController::Independent(p) => p.previous_psi(),
        }
    }

    pub fn arrival_bounds(&self) -> (f64, f64) {
        match self {
            AnyController::Simultaneous(c) => c.arrival().eigen_bounds(),
            AnyController::Independent(p) => p.arrival().eigen_bounds(),
        }
    }
}
