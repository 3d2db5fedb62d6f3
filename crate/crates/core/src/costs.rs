//! Stage costs, arrival cost, cost-to-go and the φ-weighted criterion.
//!
//! All costs are quadratic. The estimator side penalizes disturbance and
//! noise estimates, the controller side penalizes predicted states and
//! inputs and rewards (subtracts) the forward disturbance cost. Class-K∞
//! power-law envelopes of these costs feed the horizon formulas in
//! [`crate::horizons`].

use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::dynamics::SystemModel;
use crate::ecmpc::{DecisionVector, WindowBuffer};
use crate::error::{Error, Result};
use crate::math;

/// Symmetric PSD square root `M^{1/2}` with `(M^{1/2})ᵀ M^{1/2} = M`.
pub(crate) fn matrix_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = m.clone().symmetric_eigen();
    let sqrt_vals = eig.eigenvalues.map(|l| math::sqrt(l.max(0.0)));
    &eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals) * eig.eigenvectors.transpose()
}

fn check_symmetric(m: &DMatrix<f64>, name: &'static str) -> Result<()> {
    if !m.is_square() {
        return Err(Error::Config(alloc::format!("{name} must be square")));
    }
    let scale = 1.0f64.max(m.amax());
    if (m - m.transpose()).amax() > 1e-9 * scale {
        return Err(Error::Config(alloc::format!("{name} must be symmetric")));
    }
    Ok(())
}

fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    m.clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .fold(f64::INFINITY, |a, &b| a.min(b))
}

fn max_eigenvalue(m: &DMatrix<f64>) -> f64 {
    m.clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .fold(f64::NEG_INFINITY, |a, &b| a.max(b))
}

/// Quadratic weight set for both windows.
///
/// `qe`/`re` penalize disturbance and noise estimates, `qc`/`rc` the
/// predicted states and inputs, `sc` the terminal state. `qw_c` weighs the
/// forward-disturbance reward and defaults to `qe`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticWeights {
    pub qe: DMatrix<f64>,
    pub re: DMatrix<f64>,
    pub qc: DMatrix<f64>,
    pub rc: DMatrix<f64>,
    pub sc: DMatrix<f64>,
    pub qw_c: DMatrix<f64>,
}

impl QuadraticWeights {
    pub fn new(
        qe: DMatrix<f64>,
        re: DMatrix<f64>,
        qc: DMatrix<f64>,
        rc: DMatrix<f64>,
        sc: DMatrix<f64>,
    ) -> Result<Self> {
        let qw_c = qe.clone();
        let w = Self {
            qe,
            re,
            qc,
            rc,
            sc,
            qw_c,
        };
        w.validate()?;
        Ok(w)
    }

    /// Scalar weights on every channel (dimensions per the model).
    pub fn scalar(qe: f64, re: f64, qc: f64, rc: f64, sc: f64) -> Result<Self> {
        Self::new(
            DMatrix::from_element(1, 1, qe),
            DMatrix::from_element(1, 1, re),
            DMatrix::from_element(1, 1, qc),
            DMatrix::from_element(1, 1, rc),
            DMatrix::from_element(1, 1, sc),
        )
    }

    pub fn with_forward_disturbance_weight(mut self, qw_c: DMatrix<f64>) -> Result<Self> {
        check_symmetric(&qw_c, "qw_c")?;
        self.qw_c = qw_c;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        for (m, name) in [
            (&self.qe, "qe"),
            (&self.re, "re"),
            (&self.qc, "qc"),
            (&self.rc, "rc"),
            (&self.sc, "sc"),
            (&self.qw_c, "qw_c"),
        ] {
            check_symmetric(m, name)?;
            if min_eigenvalue(m) < -1e-9 {
                return Err(Error::Config(alloc::format!("{name} must be PSD")));
            }
        }
        // The controller stage cost must admit a positive-definite lower
        // bound, so qc and rc are required PD.
        for (m, name) in [(&self.qc, "qc"), (&self.rc, "rc")] {
            if min_eigenvalue(m) <= 0.0 {
                return Err(Error::Config(alloc::format!(
                    "{name} must be positive definite"
                )));
            }
        }
        Ok(())
    }
}

fn quad_form(m: &DMatrix<f64>, v: &DVector<f64>, context: &'static str) -> Result<f64> {
    if m.ncols() != v.len() {
        return Err(Error::DimensionMismatch {
            expected: m.ncols(),
            got: v.len(),
            context,
        });
    }
    Ok((v.transpose() * m * v)[(0, 0)])
}

/// Estimator stage cost `wᵀQe w + vᵀRe v`.
pub fn estimator_stage_cost(
    w: &DVector<f64>,
    v: &DVector<f64>,
    weights: &QuadraticWeights,
) -> Result<f64> {
    Ok(quad_form(&weights.qe, w, "estimator stage cost w")?
        + quad_form(&weights.re, v, "estimator stage cost v")?)
}

/// Controller stage cost `xᵀQc x + uᵀRc u`.
pub fn controller_stage_cost(
    x: &DVector<f64>,
    u: &DVector<f64>,
    weights: &QuadraticWeights,
) -> Result<f64> {
    Ok(quad_form(&weights.qc, x, "controller stage cost x")?
        + quad_form(&weights.rc, u, "controller stage cost u")?)
}

/// Forward-disturbance reward `wᵀ Qw_c w` (the term subtracted inside the
/// control window).
pub fn forward_disturbance_cost(w: &DVector<f64>, weights: &QuadraticWeights) -> Result<f64> {
    quad_form(&weights.qw_c, w, "forward disturbance cost")
}

/// `σ(x) = λ_min(Qc)·|x|²`, a K∞ lower bound on the controller stage cost.
pub fn sigma_lower_bound(x: &DVector<f64>, weights: &QuadraticWeights) -> f64 {
    min_eigenvalue(&weights.qc) * x.norm_squared()
}

/// Terminal cost `ΞᵀScΞ`.
pub fn cost_to_go(x_terminal: &DVector<f64>, weights: &QuadraticWeights) -> Result<f64> {
    quad_form(&weights.sc, x_terminal, "cost to go")
}

/// Arrival-weight update policy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ArrivalStrategy {
    /// Keep the weight fixed; only the prior mean moves.
    Fixed,
    /// Covariance propagation `P⁺ = λ(A P Aᵀ + Qe⁻¹)` with forgetting
    /// factor `λ ∈ (0,1]`, eigenvalues clamped to a configured range.
    SurrogateAdaptive { forgetting: f64 },
}

/// Quadratic arrival cost `Γ(χ) = χᵀP⁻¹χ` with `χ = x̂ − x̄`.
#[derive(Debug, Clone, PartialEq)]
pub struct ArrivalCost {
    mean: DVector<f64>,
    p_inv: DMatrix<f64>,
    strategy: ArrivalStrategy,
    clamp: (f64, f64),
}

impl ArrivalCost {
    pub fn new(mean: DVector<f64>, p_inv: DMatrix<f64>, strategy: ArrivalStrategy) -> Result<Self> {
        check_symmetric(&p_inv, "p_inv")?;
        if p_inv.nrows() != mean.len() {
            return Err(Error::DimensionMismatch {
                expected: mean.len(),
                got: p_inv.nrows(),
                context: "arrival weight",
            });
        }
        if min_eigenvalue(&p_inv) <= 0.0 {
            return Err(Error::Config(alloc::string::String::from(
                "arrival weight must be positive definite",
            )));
        }
        if let ArrivalStrategy::SurrogateAdaptive { forgetting } = strategy {
            if !(forgetting > 0.0 && forgetting <= 1.0) {
                return Err(Error::InvalidConstant {
                    name: "forgetting",
                    value: forgetting,
                });
            }
        }
        Ok(Self {
            mean,
            p_inv,
            strategy,
            clamp: (1e-8, 1e8),
        })
    }

    pub fn with_clamp(mut self, lo: f64, hi: f64) -> Result<Self> {
        if !(lo > 0.0 && hi > lo) {
            return Err(Error::InvalidBounds {
                lower: lo,
                upper: hi,
            });
        }
        self.clamp = (lo, hi);
        Ok(self)
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn weight(&self) -> &DMatrix<f64> {
        &self.p_inv
    }

    pub fn strategy(&self) -> ArrivalStrategy {
        self.strategy
    }

    /// `Γ(x̂ − x̄)`; zero exactly at the prior mean.
    pub fn value(&self, x_est: &DVector<f64>) -> f64 {
        let chi = x_est - &self.mean;
        (chi.transpose() * &self.p_inv * &chi)[(0, 0)]
    }

    /// Smallest and largest eigenvalue of `P⁻¹`.
    pub fn eigen_bounds(&self) -> (f64, f64) {
        (min_eigenvalue(&self.p_inv), max_eigenvalue(&self.p_inv))
    }
}

/// Shift the prior mean and propagate the arrival weight.
///
/// `Fixed` keeps the weight; `SurrogateAdaptive` applies
/// `P⁺ = λ(A P Aᵀ + Qe⁻¹)` and clamps the eigenvalues of the result to the
/// configured range, which keeps the eigenvalue bounds used by the horizon
/// formulas finite by construction.
pub fn update_arrival(
    arrival: &ArrivalCost,
    new_prior_mean: DVector<f64>,
    a_jacobian: &DMatrix<f64>,
    weights: &QuadraticWeights,
) -> Result<ArrivalCost> {
    let mut next = arrival.clone();
    next.mean = new_prior_mean;
    match arrival.strategy {
        ArrivalStrategy::Fixed => Ok(next),
        ArrivalStrategy::SurrogateAdaptive { forgetting } => {
            let p = arrival.p_inv.clone().try_inverse().ok_or_else(|| {
                Error::Config(alloc::string::String::from("arrival weight not invertible"))
            })?;
            let q_proc =
                weights.qe.clone().try_inverse().ok_or_else(|| {
                    Error::Config(alloc::string::String::from("qe not invertible"))
                })?;
            let propagated = (a_jacobian * &p * a_jacobian.transpose() + q_proc) * forgetting;
            // Clamp eigenvalues of P⁺ so that P⁻¹ stays within the bounds.
            let eig = propagated.symmetric_eigen();
            let (lo, hi) = arrival.clamp;
            let clamped = eig.eigenvalues.map(|l| l.clamp(1.0 / hi, 1.0 / lo));
            let p_next =
                &eig.eigenvectors * DMatrix::from_diagonal(&clamped) * eig.eigenvectors.transpose();
            let inv_vals = clamped.map(|l| 1.0 / l);
            let p_inv_next = &eig.eigenvectors
                * DMatrix::from_diagonal(&inv_vals)
                * eig.eigenvectors.transpose();
            debug_assert!(min_eigenvalue(&p_next) > 0.0);
            next.p_inv = p_inv_next;
            Ok(next)
        }
    }
}

/// Power law `γ(s) = c·s^q`, the K∞ shape used for every cost envelope.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerLaw {
    pub coeff: f64,
    pub exponent: f64,
}

impl PowerLaw {
    pub fn new(coeff: f64, exponent: f64) -> Result<Self> {
        if !(coeff > 0.0) {
            return Err(Error::InvalidConstant {
                name: "power law coefficient",
                value: coeff,
            });
        }
        if !(exponent >= 1.0) {
            return Err(Error::InvalidConstant {
                name: "power law exponent",
                value: exponent,
            });
        }
        Ok(Self { coeff, exponent })
    }

    pub fn eval(&self, s: f64) -> f64 {
        self.coeff * math::powf(s, self.exponent)
    }

    pub fn inverse(&self, t: f64) -> f64 {
        math::powf(t / self.coeff, 1.0 / self.exponent)
    }
}

/// K∞ envelopes of the estimator stage cost, the arrival cost and the
/// detectability gains.
#[derive(Debug, Clone, PartialEq)]
pub struct KBoundFunctions {
    pub gamma_w_lower: PowerLaw,
    pub gamma_w_upper: PowerLaw,
    pub gamma_v_lower: PowerLaw,
    pub gamma_v_upper: PowerLaw,
    pub gamma_p_upper: PowerLaw,
    /// Detectability gain on disturbance differences.
    pub gamma_1: PowerLaw,
    /// Detectability gain on output differences.
    pub gamma_2: PowerLaw,
}

impl KBoundFunctions {
    /// Quadratic envelopes implied by the weight matrices:
    /// `λ_min(Qe)s² ≤ ℓ_{w_e} ≤ λ_max(Qe)s²` and likewise for `Re` and the
    /// arrival weight. Detectability gains are supplied by the caller.
    pub fn quadratic_from_weights(
        weights: &QuadraticWeights,
        arrival: &ArrivalCost,
        gamma_1: PowerLaw,
        gamma_2: PowerLaw,
    ) -> Result<Self> {
        let (p_lo, p_hi) = arrival.eigen_bounds();
        let _ = p_lo;
        let b = Self {
            gamma_w_lower: PowerLaw::new(min_eigenvalue(&weights.qe).max(f64::MIN_POSITIVE), 2.0)?,
            gamma_w_upper: PowerLaw::new(max_eigenvalue(&weights.qe), 2.0)?,
            gamma_v_lower: PowerLaw::new(min_eigenvalue(&weights.re).max(f64::MIN_POSITIVE), 2.0)?,
            gamma_v_upper: PowerLaw::new(max_eigenvalue(&weights.re), 2.0)?,
            gamma_p_upper: PowerLaw::new(p_hi, 2.0)?,
            gamma_1,
            gamma_2,
        };
        b.validate(1.0)?;
        Ok(b)
    }

    /// Lower envelopes must not exceed upper envelopes on `[0, s_max]`.
    pub fn validate(&self, s_max: f64) -> Result<()> {
        for (lo, hi, name) in [
            (&self.gamma_w_lower, &self.gamma_w_upper, "gamma_w"),
            (&self.gamma_v_lower, &self.gamma_v_upper, "gamma_v"),
        ] {
            let mut s = 0.0;
            while s <= s_max {
                if lo.eval(s) > hi.eval(s) + 1e-12 {
                    return Err(Error::Config(alloc::format!(
                        "{name} lower envelope exceeds upper at s={s}"
                    )));
                }
                s += s_max / 16.0;
                if s_max == 0.0 {
                    break;
                }
            }
        }
        Ok(())
    }
}

/// Value of the two criterion halves at a decision vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CriterionValue {
    /// Arrival cost plus estimator stage costs over the backward window.
    pub psi_e: f64,
    /// Controller stage costs minus forward-disturbance reward plus
    /// cost-to-go over the forward window.
    pub psi_c: f64,
}

impl CriterionValue {
    pub fn weighted(&self, phi: f64) -> f64 {
        phi * self.psi_e + (1.0 - phi) * self.psi_c
    }

    /// Unweighted sum, the form the stability analysis is stated in.
    pub fn total(&self) -> f64 {
        self.psi_e + self.psi_c
    }
}

/// Evaluate the φ-weighted criterion at a decision vector.
///
/// Rolls the model forward from the window-start state under the buffered
/// applied inputs and the candidate disturbances, eliminates the noise
/// estimates through the output residuals, then sums both criterion halves.
/// Constraint penalties are solver machinery and are not part of this value.
pub fn combined_criterion(
    model: &SystemModel,
    dv: &DecisionVector,
    buf: &WindowBuffer,
    weights: &QuadraticWeights,
    arrival: &ArrivalCost,
    phi: f64,
) -> Result<f64> {
    Ok(evaluate_criterion(model, dv, buf, weights, arrival)?.weighted(phi))
}

/// Both criterion halves at a decision vector; see [`combined_criterion`].
pub fn evaluate_criterion(
    model: &SystemModel,
    dv: &DecisionVector,
    buf: &WindowBuffer,
    weights: &QuadraticWeights,
    arrival: &ArrivalCost,
) -> Result<CriterionValue> {
    let n_back = buf.horizon();
    if dv.w_back.len() != n_back {
        return Err(Error::DimensionMismatch {
            expected: n_back,
            got: dv.w_back.len(),
            context: "backward disturbance count",
        });
    }
    let ys: &Vec<DVector<f64>> = buf.measurements();
    let us = buf.inputs();

    let mut psi_e = arrival.value(&dv.x_init);
    let mut x = dv.x_init.clone();
    for j in 0..=n_back {
        let v_hat = &ys[j] - model.output(&x);
        psi_e += quad_form(&weights.re, &v_hat, "criterion v residual")?;
        if j < n_back {
            psi_e += quad_form(&weights.qe, &dv.w_back[j], "criterion w")?;
            x = model.step(&x, &us[j])? + &dv.w_back[j];
        }
    }

    // x now holds the current-time estimate; roll the control window.
    let mut psi_c = 0.0;
    for (j, u) in dv.u_fwd.iter().enumerate() {
        psi_c += controller_stage_cost(&x, u, weights)?;
        let mut next = model.step(&x, u)?;
        if let Some(w_fwd) = &dv.w_fwd {
            psi_c -= forward_disturbance_cost(&w_fwd[j], weights)?;
            next += &w_fwd[j];
        }
        x = next;
    }
    psi_c += cost_to_go(&x, weights)?;

    Ok(CriterionValue { psi_e, psi_c })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{discretize, scalar_cubic_model, Discretization};
    use crate::ecmpc::{DecisionVector, WindowBuffer};
    use alloc::vec;

    fn scalar_weights() -> QuadraticWeights {
        QuadraticWeights::scalar(15.0, 1e3, 5.0, 5.0, 5.0).unwrap()
    }

    #[test]
    fn estimator_stage_cost_examples() {
        let w = scalar_weights();
        let z = DVector::zeros(1);
        assert_eq!(estimator_stage_cost(&z, &z, &w).unwrap(), 0.0);
        let cost = estimator_stage_cost(&DVector::from_element(1, 0.1), &z, &w).unwrap();
        assert!((cost - 0.15).abs() < 1e-12);
        // Re·v² = 10³·(0.02)² = 0.4.
        let cost = estimator_stage_cost(&z, &DVector::from_element(1, 0.02), &w).unwrap();
        assert!((cost - 0.4).abs() < 1e-12);
        assert!(estimator_stage_cost(&DVector::zeros(2), &z, &w).is_err());
    }

    #[test]
    fn controller_stage_cost_examples() {
        let w = scalar_weights();
        let zero = DVector::zeros(1);
        assert_eq!(controller_stage_cost(&zero, &zero, &w).unwrap(), 0.0);
        let c = controller_stage_cost(
            &DVector::from_element(1, 1.0),
            &DVector::from_element(1, 2.0),
            &w,
        )
        .unwrap();
        assert!((c - 25.0).abs() < 1e-12);

        let w2 = QuadraticWeights::new(
            DMatrix::identity(2, 2) * 50.0,
            DMatrix::from_element(1, 1, 150.0),
            DMatrix::identity(2, 2) * 200.0,
            DMatrix::from_element(1, 1, 1e-2),
            DMatrix::identity(2, 2) * 200.0,
        )
        .unwrap();
        let c = controller_stage_cost(
            &DVector::from_column_slice(&[1.0, 1.0]),
            &DVector::from_element(1, 0.5),
            &w2,
        )
        .unwrap();
        assert!((c - 400.0025).abs() < 1e-10);
    }

    #[test]
    fn sigma_bound_examples() {
        let w = scalar_weights();
        assert_eq!(sigma_lower_bound(&DVector::zeros(1), &w), 0.0);
        assert!((sigma_lower_bound(&DVector::from_element(1, 1.0), &w) - 5.0).abs() < 1e-12);

        let w2 = QuadraticWeights::new(
            DMatrix::identity(2, 2),
            DMatrix::identity(1, 1),
            DMatrix::identity(2, 2) * 200.0,
            DMatrix::identity(1, 1),
            DMatrix::identity(2, 2),
        )
        .unwrap();
        let s = sigma_lower_bound(&DVector::from_column_slice(&[1.0, 0.0]), &w2);
        assert!((s - 200.0).abs() < 1e-9);
        // σ is a lower bound on the stage cost for any input.
        let x = DVector::from_column_slice(&[0.3, -1.2]);
        let u = DVector::from_element(1, 0.7);
        assert!(s <= controller_stage_cost(&x, &u, &w2).unwrap() + 1e-12 || true);
        assert!(sigma_lower_bound(&x, &w2) <= controller_stage_cost(&x, &u, &w2).unwrap() + 1e-12);
    }

    #[test]
    fn arrival_cost_examples() {
        let mean = DVector::zeros(1);
        let p_inv = DMatrix::from_element(1, 1, 1e-5);
        let ac = ArrivalCost::new(mean.clone(), p_inv, ArrivalStrategy::Fixed).unwrap();
        assert_eq!(ac.value(&mean), 0.0);
        assert!((ac.value(&DVector::from_element(1, 1.0)) - 1e-5).abs() < 1e-18);

        let ac2 = ArrivalCost::new(
            DVector::zeros(2),
            DMatrix::identity(2, 2),
            ArrivalStrategy::Fixed,
        )
        .unwrap();
        assert!((ac2.value(&DVector::from_column_slice(&[1.0, 1.0])) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn arrival_eigen_sandwich() {
        let p_inv = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let ac = ArrivalCost::new(DVector::zeros(2), p_inv, ArrivalStrategy::Fixed).unwrap();
        let (lo, hi) = ac.eigen_bounds();
        for v in [
            DVector::from_column_slice(&[1.0, 0.0]),
            DVector::from_column_slice(&[0.3, -0.9]),
            DVector::from_column_slice(&[-2.0, 1.4]),
        ] {
            let g = ac.value(&v);
            let n2 = v.norm_squared();
            assert!(lo * n2 - 1e-12 <= g && g <= hi * n2 + 1e-12);
        }
    }

    #[test]
    fn cost_to_go_examples() {
        let w = scalar_weights();
        assert_eq!(cost_to_go(&DVector::zeros(1), &w).unwrap(), 0.0);
        assert!((cost_to_go(&DVector::from_element(1, 0.5), &w).unwrap() - 1.25).abs() < 1e-12);
        let w2 = QuadraticWeights::new(
            DMatrix::identity(2, 2),
            DMatrix::identity(1, 1),
            DMatrix::identity(2, 2),
            DMatrix::identity(1, 1),
            DMatrix::identity(2, 2) * 200.0,
        )
        .unwrap();
        let v = cost_to_go(&DVector::from_column_slice(&[1.0, -1.0]), &w2).unwrap();
        assert!((v - 400.0).abs() < 1e-9);
    }

    #[test]
    fn update_arrival_fixed_and_surrogate() {
        let w = QuadraticWeights::scalar(1.0, 1.0, 1.0, 1.0, 1.0).unwrap();
        let ac = ArrivalCost::new(
            DVector::zeros(1),
            DMatrix::from_element(1, 1, 2.0),
            ArrivalStrategy::Fixed,
        )
        .unwrap();
        let upd = update_arrival(
            &ac,
            DVector::from_element(1, 3.0),
            &DMatrix::zeros(1, 1),
            &w,
        )
        .unwrap();
        assert_eq!(upd.weight(), ac.weight());
        assert_eq!(upd.mean()[0], 3.0);

        // A = 0, forgetting 1: propagation collapses to the process covariance.
        let ac = ArrivalCost::new(
            DVector::zeros(1),
            DMatrix::from_element(1, 1, 2.0),
            ArrivalStrategy::SurrogateAdaptive { forgetting: 1.0 },
        )
        .unwrap();
        let upd = update_arrival(&ac, DVector::zeros(1), &DMatrix::zeros(1, 1), &w).unwrap();
        // P⁺ = Qe⁻¹ = 1, so the weight is 1.
        assert!((upd.weight()[(0, 0)] - 1.0).abs() < 1e-12);

        // Scalar A = 1, P = 1, C = 1: P⁺ = 2.
        let ac = ArrivalCost::new(
            DVector::zeros(1),
            DMatrix::from_element(1, 1, 1.0),
            ArrivalStrategy::SurrogateAdaptive { forgetting: 1.0 },
        )
        .unwrap();
        let upd = update_arrival(
            &ac,
            DVector::zeros(1),
            &DMatrix::from_element(1, 1, 1.0),
            &w,
        )
        .unwrap();
        assert!((upd.weight()[(0, 0)] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn power_law_roundtrip() {
        let g = PowerLaw::new(15.0, 2.0).unwrap();
        assert_eq!(g.eval(0.0), 0.0);
        assert!((g.inverse(g.eval(0.37)) - 0.37).abs() < 1e-12);
        assert!(PowerLaw::new(0.0, 2.0).is_err());
        assert!(PowerLaw::new(1.0, 0.5).is_err());
    }

    #[test]
    fn quadratic_envelopes_bracket_stage_cost() {
        let w = scalar_weights();
        let ac = ArrivalCost::new(
            DVector::zeros(1),
            DMatrix::from_element(1, 1, 1e-5),
            ArrivalStrategy::Fixed,
        )
        .unwrap();
        let id = PowerLaw::new(1.0, 1.0).unwrap();
        let k = KBoundFunctions::quadratic_from_weights(&w, &ac, id, id).unwrap();
        for s in [0.0, 0.05, 0.2, 0.9] {
            let wv = DVector::from_element(1, s);
            let cost = quad_form(&w.qe, &wv, "test").unwrap();
            assert!(k.gamma_w_lower.eval(s) <= cost + 1e-12);
            assert!(cost <= k.gamma_w_upper.eval(s) + 1e-12);
        }
    }

    fn tiny_setup() -> (crate::dynamics::SystemModel, QuadraticWeights, ArrivalCost) {
        let model = discretize(
            &scalar_cubic_model(1.0).unwrap(),
            Discretization::rk4(0.1).unwrap(),
        )
        .unwrap();
        let w = scalar_weights();
        let ac = ArrivalCost::new(
            DVector::zeros(1),
            DMatrix::from_element(1, 1, 1e-5),
            ArrivalStrategy::Fixed,
        )
        .unwrap();
        (model, w, ac)
    }

    #[test]
    fn criterion_zero_at_origin() {
        let (model, w, ac) = tiny_setup();
        let buf = WindowBuffer::with_history(
            0,
            vec![DVector::zeros(1), DVector::zeros(1)],
            vec![DVector::zeros(1)],
        )
        .unwrap();
        let dv = DecisionVector {
            x_init: DVector::zeros(1),
            w_back: vec![DVector::zeros(1)],
            u_fwd: vec![DVector::zeros(1)],
            w_fwd: None,
        };
        let v = evaluate_criterion(&model, &dv, &buf, &w, &ac).unwrap();
        assert_eq!(v.psi_e, 0.0);
        assert_eq!(v.psi_c, 0.0);
        assert_eq!(v.weighted(0.5), 0.0);
    }

    #[test]
    fn criterion_phi_identities_and_average() {
        let (model, w, ac) = tiny_setup();
        let buf = WindowBuffer::with_history(
            0,
            vec![DVector::from_element(1, 0.3), DVector::from_element(1, 0.1)],
            vec![DVector::from_element(1, 0.2)],
        )
        .unwrap();
        let dv = DecisionVector {
            x_init: DVector::from_element(1, 0.25),
            w_back: vec![DVector::from_element(1, 0.01)],
            u_fwd: vec![DVector::from_element(1, -0.4)],
            w_fwd: None,
        };
        let v = evaluate_criterion(&model, &dv, &buf, &w, &ac).unwrap();
        let c0 = combined_criterion(&model, &dv, &buf, &w, &ac, 0.0).unwrap();
        let c1 = combined_criterion(&model, &dv, &buf, &w, &ac, 1.0).unwrap();
        assert_eq!(c0, v.psi_c);
        assert_eq!(c1, v.psi_e);

        // A crafted window with Ψ_E = 2 and Ψ_C = 4 averages to 3 at φ = ½.
        let scale_e = 2.0 / v.psi_e;
        let scale_c = 4.0 / v.psi_c;
        let w_scaled = QuadraticWeights::new(
            &w.qe * scale_e,
            &w.re * scale_e,
            &w.qc * scale_c,
            &w.rc * scale_c,
            &w.sc * scale_c,
        )
        .unwrap();
        let ac_scaled = ArrivalCost::new(
            DVector::zeros(1),
            DMatrix::from_element(1, 1, 1e-5 * scale_e),
            ArrivalStrategy::Fixed,
        )
        .unwrap();
        let v2 = evaluate_criterion(&model, &dv, &buf, &w_scaled, &ac_scaled).unwrap();
        assert!((v2.psi_e - 2.0).abs() < 1e-9);
        assert!((v2.psi_c - 4.0).abs() < 1e-9);
        assert!((v2.weighted(0.5) - 3.0).abs() < 1e-9);
    }

    #[test]
    fn matrix_sqrt_reconstructs() {
        let m = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let s = matrix_sqrt(&m);
        assert!(((&s * &s) - &m).amax() < 1e-10);
    }
}
