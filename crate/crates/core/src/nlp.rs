//! Box-constrained nonlinear least squares.
//!
//! Every receding-horizon solve in this crate goes through [`solve`]: a
//! projected Gauss-Newton iteration with Levenberg damping and a monotone
//! backtracking line search. Box constraints are handled by projecting the
//! trial points inside the line search, so every iterate is feasible by
//! construction. A brute-force [`grid_oracle`] over the same problem
//! interface provides an independent optimum for small test instances.

use alloc::format;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::dynamics::{project_box, BoxSet};
use crate::error::{Error, Result};

/// Objective in residual form: `f(z) = |r(z)|² + extra(z)`.
///
/// The `extra` part carries signed non-residual terms (the forward
/// disturbance reward enters with a minus sign); it is zero for plain
/// least-squares problems.
pub trait ResidualProblem {
    /// `(residual count, variable count)`.
    fn dims(&self) -> (usize, usize);

    /// Residual vector and, when requested, its Jacobian at `z`.
    fn assemble(
        &self,
        z: &DVector<f64>,
        want_jacobian: bool,
    ) -> Result<(DVector<f64>, Option<DMatrix<f64>>)>;

    /// Signed non-residual objective part and its gradient.
    fn extra(&self, z: &DVector<f64>) -> (f64, DVector<f64>) {
        (0.0, DVector::zeros(z.len()))
    }

    fn objective(&self, z: &DVector<f64>) -> Result<f64> {
        let (r, _) = self.assemble(z, false)?;
        Ok(r.norm_squared() + self.extra(z).0)
    }
}

/// Residual problem defined by a closure, differentiated numerically.
/// Intended for tests and small feasibility checks.
pub struct ClosureProblem<F>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    pub n_residuals: usize,
    pub n_variables: usize,
    pub residual_fn: F,
}

impl<F> ResidualProblem for ClosureProblem<F>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    fn dims(&self) -> (usize, usize) {
        (self.n_residuals, self.n_variables)
    }

    fn assemble(
        &self,
        z: &DVector<f64>,
        want_jacobian: bool,
    ) -> Result<(DVector<f64>, Option<DMatrix<f64>>)> {
        let r = (self.residual_fn)(z);
        if r.len() != self.n_residuals {
            return Err(Error::DimensionMismatch {
                expected: self.n_residuals,
                got: r.len(),
                context: "closure residuals",
            });
        }
        let jac = if want_jacobian {
            let mut j = DMatrix::zeros(self.n_residuals, self.n_variables);
            for col in 0..self.n_variables {
                let h = 1e-7 * (1.0 + libm::fabs(z[col]));
                let mut hi = z.clone();
                let mut lo = z.clone();
                hi[col] += h;
                lo[col] -= h;
                j.set_column(
                    col,
                    &(((self.residual_fn)(&hi) - (self.residual_fn)(&lo)) / (2.0 * h)),
                );
            }
            Some(j)
        } else {
            None
        };
        Ok((r, jac))
    }
}

/// Solver knobs. The defaults suit the receding-horizon problems here.
#[derive(Debug, Clone)]
pub struct SolveOptions {
    pub max_iterations: usize,
    /// Projected-gradient infinity-norm tolerance.
    pub gradient_tol: f64,
    /// Infinity-norm tolerance on the accepted step.
    pub step_tol: f64,
    /// Backtracking contraction factor in (0, 1).
    pub line_search_contraction: f64,
    /// Initial Levenberg damping.
    pub damping_init: f64,
    /// Multiplicative damping decay after an accepted full step.
    pub damping_decay: f64,
    pub warm_start: Option<DVector<f64>>,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            gradient_tol: 1e-8,
            step_tol: 1e-10,
            line_search_contraction: 0.5,
            damping_init: 1e-6,
            damping_decay: 0.25,
            warm_start: None,
        }
    }
}

impl SolveOptions {
    pub fn validate(&self) -> Result<()> {
        for (v, name) in [
            (self.gradient_tol, "gradient_tol"),
            (self.step_tol, "step_tol"),
            (self.damping_init, "damping_init"),
        ] {
            if !(v > 0.0) {
                return Err(Error::InvalidConstant { name, value: v });
            }
        }
        if !(self.line_search_contraction > 0.0 && self.line_search_contraction < 1.0) {
            return Err(Error::InvalidConstant {
                name: "line_search_contraction",
                value: self.line_search_contraction,
            });
        }
        Ok(())
    }
}

/// Why the iteration stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TerminationReason {
    /// Projected gradient below tolerance.
    Gradient,
    /// Accepted step (or attainable step) below tolerance.
    Step,
    MaxIterations,
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    pub solution: DVector<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub termination: TerminationReason,
    /// Projected-gradient infinity norm at the solution.
    pub kkt_residual: f64,
    /// Objective at each accepted iterate, starting from the warm start.
    pub objective_trace: Vec<f64>,
}

impl SolveResult {
    pub fn converged(&self) -> bool {
        matches!(
            self.termination,
            TerminationReason::Gradient | TerminationReason::Step
        )
    }
}

const DAMPING_FLOOR: f64 = 1e-10;
const DAMPING_CEIL: f64 = 1e14;
const DAMPING_GROWTH: f64 = 10.0;

/// Minimize `|r(z)|² + extra(z)` over the box.
///
/// The warm start is projected into the box if needed. Accepted iterates
/// never increase the objective, and the returned solution satisfies the
/// bounds exactly.
pub fn solve(
    problem: &impl ResidualProblem,
    bounds: &BoxSet,
    opts: &SolveOptions,
) -> Result<SolveResult> {
    opts.validate()?;
    let (_, n) = problem.dims();
    if bounds.dim() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: bounds.dim(),
            context: "solver bounds",
        });
    }

    let mut z = match &opts.warm_start {
        Some(w) => project_box(w, bounds)?,
        None => project_box(&DVector::zeros(n), bounds)?,
    };
    let mut f = checked_objective(problem, &z, 0)?;
    let mut trace = alloc::vec![f];
    let mut damping = opts.damping_init.max(DAMPING_FLOOR);
    let mut iterations = 0;
    let mut termination = TerminationReason::MaxIterations;
    let mut kkt = f64::INFINITY;

    while iterations < opts.max_iterations {
        iterations += 1;
        let (r, jac) = problem.assemble(&z, true)?;
        let jac = jac.expect("jacobian requested");
        let (_, extra_grad) = problem.extra(&z);
        let grad = jac.tr_mul(&r) * 2.0 + extra_grad;
        if !grad.iter().all(|g| g.is_finite()) {
            return Err(Error::NumericalFailure {
                what: format!("non-finite gradient at iterate {:?}", z.as_slice()),
                iteration: iterations,
            });
        }

        kkt = projected_gradient_norm(&z, &grad, bounds)?;
        if kkt <= opts.gradient_tol {
            termination = TerminationReason::Gradient;
            break;
        }

        // Active set: pinned coordinates and bound-active coordinates whose
        // gradient points outward. The damped system is solved on the free
        // block only; a full-space step would drag the projected iterate
        // along directions the projection then cancels.
        let free: Vec<usize> = (0..n)
            .filter(|&i| {
                let at_lower = z[i] <= bounds.lower()[i];
                let at_upper = z[i] >= bounds.upper()[i];
                !(bounds.lower()[i] == bounds.upper()[i]
                    || (at_lower && grad[i] > 0.0)
                    || (at_upper && grad[i] < 0.0))
            })
            .collect();
        if free.is_empty() {
            termination = TerminationReason::Gradient;
            break;
        }
        let jac_free = jac.select_columns(free.iter());
        let grad_free = DVector::from_fn(free.len(), |i, _| grad[free[i]]);
        let hessian = jac_free.tr_mul(&jac_free) * 2.0;
        let diag_scale = 1.0f64.max(hessian.diagonal().amax());

        // Levenberg loop: grow damping until a monotone step is found.
        let mut accepted: Option<(DVector<f64>, f64, f64)> = None;
        while damping <= DAMPING_CEIL {
            let mut damped = hessian.clone();
            for i in 0..free.len() {
                damped[(i, i)] += damping * diag_scale;
            }
            let step_free = match damped.cholesky() {
                Some(chol) => chol.solve(&(-&grad_free)),
                None => {
                    damping *= DAMPING_GROWTH;
                    continue;
                }
            };
            let mut step = DVector::zeros(n);
            for (i, &idx) in free.iter().enumerate() {
                step[idx] = step_free[i];
            }

            // Backtracking with projection; ties accept the larger step.
            // Candidates where the rollout blows up are rejected, not fatal.
            let mut alpha = 1.0;
            for _ in 0..30 {
                let candidate = project_box(&(&z + &step * alpha), bounds)?;
                match problem.objective(&candidate) {
                    Ok(f_new) if f_new.is_finite() && f_new <= f => {
                        accepted = Some((candidate, f_new, alpha));
                        break;
                    }
                    _ => {}
                }
                alpha *= opts.line_search_contraction;
            }
            if accepted.is_some() {
                break;
            }
            damping *= DAMPING_GROWTH;
        }

        match accepted {
            Some((z_new, f_new, alpha)) => {
                let step_size = (&z_new - &z).amax();
                z = z_new;
                f = f_new;
                trace.push(f);
                if alpha == 1.0 {
                    damping = (damping * opts.damping_decay).max(DAMPING_FLOOR);
                }
                if step_size < opts.step_tol {
                    termination = TerminationReason::Step;
                    break;
                }
            }
            None => {
                // Damping exhausted: no feasible decrease direction left.
                termination = TerminationReason::Step;
                break;
            }
        }
    }

    Ok(SolveResult {
        solution: z,
        objective: f,
        iterations,
        termination,
        kkt_residual: kkt,
        objective_trace: trace,
    })
}

fn checked_objective(
    problem: &impl ResidualProblem,
    z: &DVector<f64>,
    iteration: usize,
) -> Result<f64> {
    let f = problem.objective(z)?;
    if f.is_finite() {
        Ok(f)
    } else {
        Err(Error::NumericalFailure {
            what: format!("non-finite objective at iterate {:?}", z.as_slice()),
            iteration,
        })
    }
}

fn projected_gradient_norm(z: &DVector<f64>, grad: &DVector<f64>, bounds: &BoxSet) -> Result<f64> {
    let moved = project_box(&(z - grad), bounds)?;
    Ok((z - moved).amax())
}

/// Exhaustive grid minimum for problems with at most four variables and
/// finite bounds. Test oracle only: independent of the solver path.
pub fn grid_oracle(
    problem: &impl ResidualProblem,
    bounds: &BoxSet,
    resolution: f64,
) -> Result<(DVector<f64>, f64)> {
    let (_, n) = problem.dims();
    if n > 4 {
        return Err(Error::GridTooLarge { max: 4, got: n });
    }
    if !bounds.is_finite() {
        return Err(Error::InfeasibleBox {
            context: "grid oracle needs finite bounds",
        });
    }
    if !(resolution > 0.0) {
        return Err(Error::InvalidConstant {
            name: "resolution",
            value: resolution,
        });
    }

    let mut steps = Vec::with_capacity(n);
    let mut total: u64 = 1;
    for i in 0..n {
        let span = bounds.upper()[i] - bounds.lower()[i];
        let count = if span == 0.0 {
            0
        } else {
            libm::ceil(span / resolution) as u64
        };
        steps.push(count);
        total = total.saturating_mul(count + 1);
        if total > 200_000_000 {
            return Err(Error::Config(format!(
                "grid oracle would evaluate {total} points; coarsen the resolution"
            )));
        }
    }

    let mut idx = alloc::vec![0u64; n];
    let mut best_z = DVector::zeros(n);
    let mut best_f = f64::INFINITY;
    let mut z = DVector::zeros(n);
    loop {
        for i in 0..n {
            let span = bounds.upper()[i] - bounds.lower()[i];
            z[i] = if steps[i] == 0 {
                bounds.lower()[i]
            } else {
                bounds.lower()[i] + span * (idx[i] as f64) / (steps[i] as f64)
            };
        }
        let f = problem.objective(&z)?;
        if f < best_f {
            best_f = f;
            best_z.copy_from(&z);
        }
        // Odometer increment.
        let mut dim = 0;
        loop {
            if dim == n {
                return Ok((best_z, best_f));
            }
            idx[dim] += 1;
            if idx[dim] <= steps[dim] {
                break;
            }
            idx[dim] = 0;
            dim += 1;
        }
    }
}

/// Central-difference gradient of a scalar function.
pub fn finite_diff_gradient(
    f: impl Fn(&DVector<f64>) -> f64,
    z: &DVector<f64>,
    h: f64,
) -> Result<DVector<f64>> {
    if !(h > 0.0) {
        return Err(Error::InvalidConstant {
            name: "h",
            value: h,
        });
    }
    let mut g = DVector::zeros(z.len());
    for i in 0..z.len() {
        let mut hi = z.clone();
        let mut lo = z.clone();
        hi[i] += h;
        lo[i] -= h;
        let (fh, fl) = (f(&hi), f(&lo));
        if !fh.is_finite() || !fl.is_finite() {
            return Err(Error::NumericalFailure {
                what: format!("non-finite sample in finite differences at column {i}"),
                iteration: 0,
            });
        }
        g[i] = (fh - fl) / (2.0 * h);
    }
    Ok(g)
}
