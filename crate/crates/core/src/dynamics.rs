//! Plant and prediction models, constraint boxes and seeded noise.
//!
//! Models are written down in continuous time (`ẋ = f(x, u)`) and turned
//! into one-step maps by [`discretize`]; the process disturbance is additive
//! on the discrete step, `x⁺ = Φ(x, u) + w`, so the prediction model used by
//! the estimator keeps the plain additive structure.

use alloc::sync::Arc;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::math;

type DynamicsFn = dyn Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync;
type OutputFn = dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync;
type StateJacFn = dyn Fn(&DVector<f64>, &DVector<f64>) -> DMatrix<f64> + Send + Sync;
type OutputJacFn = dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync;

/// Whether `f` is a state derivative or a one-step map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimeDomain {
    Continuous,
    Discrete,
}

/// Fixed-step integration scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    Rk4,
    Euler,
}

/// Fixed-step discretization parameters.
#[derive(Debug, Clone, Copy)]
pub struct Discretization {
    pub sample_time: f64,
    pub scheme: Scheme,
}

impl Discretization {
    pub fn new(sample_time: f64, scheme: Scheme) -> Result<Self> {
        if !(sample_time > 0.0) {
            return Err(Error::InvalidConstant {
                name: "sample_time",
                value: sample_time,
            });
        }
        Ok(Self {
            sample_time,
            scheme,
        })
    }

    pub fn rk4(sample_time: f64) -> Result<Self> {
        Self::new(sample_time, Scheme::Rk4)
    }
}

/// Dynamics `f`, output map `h` and optional analytic Jacobians.
///
/// The disturbance dimension equals the state dimension: disturbances are
/// additive on the state update and are injected by the caller, not by `f`.
#[derive(Clone)]
pub struct SystemModel {
    n_x: usize,
    n_u: usize,
    n_y: usize,
    time: TimeDomain,
    f: Arc<DynamicsFn>,
    h: Arc<OutputFn>,
    jac_fx: Option<Arc<StateJacFn>>,
    jac_fu: Option<Arc<StateJacFn>>,
    jac_hx: Option<Arc<OutputJacFn>>,
}

impl SystemModel {
    pub fn continuous(
        n_x: usize,
        n_u: usize,
        n_y: usize,
        f: impl Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
        h: impl Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    ) -> Self {
        Self {
            n_x,
            n_u,
            n_y,
            time: TimeDomain::Continuous,
            f: Arc::new(f),
            h: Arc::new(h),
            jac_fx: None,
            jac_fu: None,
            jac_hx: None,
        }
    }

    /// Model already in one-step-map form; `f` returns the next state.
    pub fn discrete(
        n_x: usize,
        n_u: usize,
        n_y: usize,
        f: impl Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
        h: impl Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    ) -> Self {
        Self {
            time: TimeDomain::Discrete,
            ..Self::continuous(n_x, n_u, n_y, f, h)
        }
    }

    pub fn with_jacobians(
        mut self,
        jac_fx: impl Fn(&DVector<f64>, &DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
        jac_fu: impl Fn(&DVector<f64>, &DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
        jac_hx: impl Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        self.jac_fx = Some(Arc::new(jac_fx));
        self.jac_fu = Some(Arc::new(jac_fu));
        self.jac_hx = Some(Arc::new(jac_hx));
        self
    }

    pub fn n_x(&self) -> usize {
        self.n_x
    }

    pub fn n_u(&self) -> usize {
        self.n_u
    }

    /// Disturbances are additive on the state, so `n_w == n_x`.
    pub fn n_w(&self) -> usize {
        self.n_x
    }

    pub fn n_y(&self) -> usize {
        self.n_y
    }

    pub fn time_domain(&self) -> TimeDomain {
        self.time
    }

    /// Raw dynamics: derivative (continuous) or next state (discrete).
    pub fn eval_f(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        (self.f)(x, u)
    }

    pub fn output(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.h)(x)
    }

    /// One nominal step of a discrete model, checking for finite results.
    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        debug_assert_eq!(self.time, TimeDomain::Discrete);
        let next = (self.f)(x, u);
        if next.iter().all(|v| v.is_finite()) {
            Ok(next)
        } else {
            Err(Error::IntegrationFailure { stage: "step" })
        }
    }

    /// `∂f/∂x` and `∂f/∂u`, analytic when supplied, central differences otherwise.
    pub fn jacobians(&self, x: &DVector<f64>, u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let a = match &self.jac_fx {
            Some(j) => j(x, u),
            None => fd_jacobian(self.n_x, |p| (self.f)(p, u), x),
        };
        let b = match &self.jac_fu {
            Some(j) => j(x, u),
            None => fd_jacobian(self.n_x, |p| (self.f)(x, p), u),
        };
        (a, b)
    }

    /// `∂h/∂x`, analytic when supplied.
    pub fn output_jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        match &self.jac_hx {
            Some(j) => j(x),
            None => fd_jacobian(self.n_y, |p| (self.h)(p), x),
        }
    }

    /// Max relative deviation between analytic and finite-difference
    /// Jacobians on `n_points` seeded points drawn from the given boxes.
    pub fn validate_jacobians(
        &self,
        x_box: &BoxSet,
        u_box: &BoxSet,
        n_points: usize,
        seed: u64,
    ) -> Result<f64> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut worst = 0.0f64;
        for _ in 0..n_points {
            let x = x_box.sample_uniform(&mut rng)?;
            let u = u_box.sample_uniform(&mut rng)?;
            let (a, b) = self.jacobians(&x, &u);
            let a_fd = fd_jacobian(self.n_x, |p| (self.f)(p, &u), &x);
            let b_fd = fd_jacobian(self.n_x, |p| (self.f)(&x, p), &u);
            let c = self.output_jacobian(&x);
            let c_fd = fd_jacobian(self.n_y, |p| (self.h)(p), &x);
            worst = worst
                .max(rel_error(&a, &a_fd))
                .max(rel_error(&b, &b_fd))
                .max(rel_error(&c, &c_fd));
        }
        Ok(worst)
    }
}

fn rel_error(m: &DMatrix<f64>, reference: &DMatrix<f64>) -> f64 {
    let scale = 1.0f64.max(reference.amax());
    (m - reference).amax() / scale
}

fn fd_jacobian(
    rows: usize,
    f: impl Fn(&DVector<f64>) -> DVector<f64>,
    at: &DVector<f64>,
) -> DMatrix<f64> {
    let n = at.len();
    let mut jac = DMatrix::zeros(rows, n);
    for j in 0..n {
        let h = 1e-6 * (1.0 + math::abs(at[j]));
        let mut hi = at.clone();
        let mut lo = at.clone();
        hi[j] += h;
        lo[j] -= h;
        let diff = (f(&hi) - f(&lo)) / (2.0 * h);
        jac.set_column(j, &diff);
    }
    jac
}

/// One RK4 step of `ẋ = f(x, u)` with `u` held constant.
fn rk4_step(f: &Arc<DynamicsFn>, x: &DVector<f64>, u: &DVector<f64>, h: f64) -> DVector<f64> {
    let k1 = f(x, u);
    let k2 = f(&(x + &k1 * (h / 2.0)), u);
    let k3 = f(&(x + &k2 * (h / 2.0)), u);
    let k4 = f(&(x + &k3 * h), u);
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

/// Turn a continuous-time model into a one-step map under the chosen scheme.
///
/// The returned model carries chain-rule Jacobians of the step map, built
/// from the continuous Jacobians (analytic or finite-difference), so solver
/// rollouts never fall back to differencing the integrator itself.
pub fn discretize(model: &SystemModel, disc: Discretization) -> Result<SystemModel> {
    if model.time != TimeDomain::Continuous {
        return Err(Error::Config(alloc::string::String::from(
            "discretize expects a continuous-time model",
        )));
    }
    let h = disc.sample_time;
    let cont = model.clone();
    let step_f = cont.f.clone();
    let scheme = disc.scheme;

    let stepper = move |x: &DVector<f64>, u: &DVector<f64>| -> DVector<f64> {
        match scheme {
            Scheme::Rk4 => rk4_step(&step_f, x, u, h),
            Scheme::Euler => x + step_f(x, u) * h,
        }
    };

    let jac_model = cont.clone();
    let jac = move |x: &DVector<f64>, u: &DVector<f64>| -> (DMatrix<f64>, DMatrix<f64>) {
        let n = jac_model.n_x;
        let eye = DMatrix::<f64>::identity(n, n);
        match scheme {
            Scheme::Euler => {
                let (a, b) = jac_model.jacobians(x, u);
                (&eye + a * h, b * h)
            }
            Scheme::Rk4 => {
                // Chain rule through the four stages.
                let f = &jac_model.f;
                let x1 = x.clone();
                let k1 = f(&x1, u);
                let x2 = x + &k1 * (h / 2.0);
                let k2 = f(&x2, u);
                let x3 = x + &k2 * (h / 2.0);
                let k3 = f(&x3, u);
                let x4 = x + &k3 * h;

                let (a1, b1) = jac_model.jacobians(&x1, u);
                let (a2, b2) = jac_model.jacobians(&x2, u);
                let (a3, b3) = jac_model.jacobians(&x3, u);
                let (a4, b4) = jac_model.jacobians(&x4, u);

                let k1x = a1.clone();
                let k2x = &a2 * (&eye + &k1x * (h / 2.0));
                let k3x = &a3 * (&eye + &k2x * (h / 2.0));
                let k4x = &a4 * (&eye + &k3x * h);
                let ax = &eye + (k1x + &k2x * 2.0 + &k3x * 2.0 + k4x) * (h / 6.0);

                let k1u = b1;
                let k2u = &a2 * (&k1u * (h / 2.0)) + b2;
                let k3u = &a3 * (&k2u * (h / 2.0)) + b3;
                let k4u = &a4 * (&k3u * h) + b4;
                let bu = (k1u + &k2u * 2.0 + &k3u * 2.0 + k4u) * (h / 6.0);
                (ax, bu)
            }
        }
    };
    let jac_fx = {
        let jac = jac.clone();
        move |x: &DVector<f64>, u: &DVector<f64>| jac(x, u).0
    };
    let jac_fu = move |x: &DVector<f64>, u: &DVector<f64>| jac(x, u).1;

    let out = cont.h.clone();
    let out_jac_model = cont.clone();

    Ok(SystemModel {
        n_x: cont.n_x,
        n_u: cont.n_u,
        n_y: cont.n_y,
        time: TimeDomain::Discrete,
        f: Arc::new(stepper),
        h: Arc::new(move |x: &DVector<f64>| out(x)),
        jac_fx: Some(Arc::new(jac_fx)),
        jac_fu: Some(Arc::new(jac_fu)),
        jac_hx: Some(Arc::new(move |x: &DVector<f64>| {
            out_jac_model.output_jacobian(x)
        })),
    })
}

/// Continuous-time scalar plant `ẋ = a·x³ + u`, `y = x`.
///
/// The disturbance is injected additively by the simulation harness.
pub fn scalar_cubic_model(a: f64) -> Result<SystemModel> {
    if !(a > 0.0) {
        return Err(Error::InvalidConstant {
            name: "a",
            value: a,
        });
    }
    let model = SystemModel::continuous(
        1,
        1,
        1,
        move |x, u| DVector::from_element(1, a * x[0] * x[0] * x[0] + u[0]),
        |x| x.clone(),
    )
    .with_jacobians(
        move |x, _| DMatrix::from_element(1, 1, 3.0 * a * x[0] * x[0]),
        |_, _| DMatrix::from_element(1, 1, 1.0),
        |_| DMatrix::from_element(1, 1, 1.0),
    );
    Ok(model)
}

/// Continuous-time van der Pol oscillator
/// `ẋ₁ = ε(1 − x₂²)x₁ − 2x₂ + u`, `ẋ₂ = 2x₁`, `y = (x₁ + x₂)/2`.
pub fn van_der_pol_model(epsilon: f64) -> Result<SystemModel> {
    if !(epsilon >= 0.0) {
        return Err(Error::InvalidConstant {
            name: "epsilon",
            value: epsilon,
        });
    }
    let model = SystemModel::continuous(
        2,
        1,
        1,
        move |x, u| {
            DVector::from_column_slice(&[
                epsilon * (1.0 - x[1] * x[1]) * x[0] - 2.0 * x[1] + u[0],
                2.0 * x[0],
            ])
        },
        |x| DVector::from_element(1, 0.5 * (x[0] + x[1])),
    )
    .with_jacobians(
        move |x, _| {
            DMatrix::from_row_slice(
                2,
                2,
                &[
                    epsilon * (1.0 - x[1] * x[1]),
                    -2.0 * epsilon * x[1] * x[0] - 2.0,
                    2.0,
                    0.0,
                ],
            )
        },
        |_, _| DMatrix::from_column_slice(2, 1, &[1.0, 0.0]),
        |_| DMatrix::from_row_slice(1, 2, &[0.5, 0.5]),
    );
    Ok(model)
}

/// Per-coordinate interval bounds, possibly infinite, with optional
/// per-step increment (rate) limits.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxSet {
    lower: DVector<f64>,
    upper: DVector<f64>,
    rate: Option<DVector<f64>>,
}

impl BoxSet {
    pub fn new(lower: DVector<f64>, upper: DVector<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::DimensionMismatch {
                expected: lower.len(),
                got: upper.len(),
                context: "box bounds",
            });
        }
        for i in 0..lower.len() {
            if !(lower[i] <= upper[i]) {
                return Err(Error::InvalidBounds {
                    lower: lower[i],
                    upper: upper[i],
                });
            }
        }
        Ok(Self {
            lower,
            upper,
            rate: None,
        })
    }

    /// `[-b, b]` in every coordinate.
    pub fn symmetric(dim: usize, b: f64) -> Result<Self> {
        Self::new(
            DVector::from_element(dim, -b),
            DVector::from_element(dim, b),
        )
    }

    pub fn unbounded(dim: usize) -> Self {
        Self {
            lower: DVector::from_element(dim, f64::NEG_INFINITY),
            upper: DVector::from_element(dim, f64::INFINITY),
            rate: None,
        }
    }

    /// Attach per-step increment limits `|Δv_i| ≤ rate_i`.
    pub fn with_rate(mut self, rate: DVector<f64>) -> Result<Self> {
        if rate.len() != self.lower.len() {
            return Err(Error::DimensionMismatch {
                expected: self.lower.len(),
                got: rate.len(),
                context: "rate bounds",
            });
        }
        self.rate = Some(rate);
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &DVector<f64> {
        &self.lower
    }

    pub fn upper(&self) -> &DVector<f64> {
        &self.upper
    }

    pub fn rate(&self) -> Option<&DVector<f64>> {
        self.rate.as_ref()
    }

    pub fn is_finite(&self) -> bool {
        self.lower.iter().all(|v| v.is_finite()) && self.upper.iter().all(|v| v.is_finite())
    }

    pub fn contains(&self, v: &DVector<f64>, tol: f64) -> bool {
        v.len() == self.dim()
            && (0..v.len()).all(|i| v[i] >= self.lower[i] - tol && v[i] <= self.upper[i] + tol)
    }

    pub fn contains_origin(&self) -> bool {
        (0..self.dim()).all(|i| self.lower[i] <= 0.0 && self.upper[i] >= 0.0)
    }

    /// Scale both bounds (and rate limits) by a positive factor.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            lower: &self.lower * factor,
            upper: &self.upper * factor,
            rate: self.rate.as_ref().map(|r| r * factor),
        }
    }

    fn sample_uniform(&self, rng: &mut ChaCha12Rng) -> Result<DVector<f64>> {
        if !self.is_finite() {
            return Err(Error::InfeasibleBox {
                context: "cannot sample an unbounded box",
            });
        }
        Ok(DVector::from_fn(self.dim(), |i, _| {
            self.lower[i] + (self.upper[i] - self.lower[i]) * uniform01(rng)
        }))
    }

    /// Seeded uniform sample, used by sampled feasibility checks.
    pub fn sample(&self, rng: &mut ChaCha12Rng) -> Result<DVector<f64>> {
        self.sample_uniform(rng)
    }
}

/// Component-wise clamp of `v` onto `box_set`; idempotent, identity inside.
pub fn project_box(v: &DVector<f64>, box_set: &BoxSet) -> Result<DVector<f64>> {
    if v.len() != box_set.dim() {
        return Err(Error::DimensionMismatch {
            expected: box_set.dim(),
            got: v.len(),
            context: "project_box",
        });
    }
    Ok(DVector::from_fn(v.len(), |i, _| {
        v[i].max(box_set.lower[i]).min(box_set.upper[i])
    }))
}

/// Per-channel noise law.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseChannel {
    /// Uniform on the closed interval `[lo, hi]` (not necessarily zero-mean).
    Uniform {
        lo: f64,
        hi: f64,
    },
    Gaussian {
        mean: f64,
        std: f64,
    },
}

impl NoiseChannel {
    /// Magnitude scale of the channel: support bound for uniform,
    /// `|mean| + 2σ` for gaussian.
    pub fn amplitude(&self) -> f64 {
        match *self {
            NoiseChannel::Uniform { lo, hi } => math::abs(lo).max(math::abs(hi)),
            NoiseChannel::Gaussian { mean, std } => math::abs(mean) + 2.0 * std,
        }
    }
}

/// Seeded noise description; sampling is deterministic given `(seed, stream)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSpec {
    channels: Vec<NoiseChannel>,
    seed: u64,
    stream: u64,
}

impl NoiseSpec {
    pub fn new(channels: Vec<NoiseChannel>, seed: u64) -> Self {
        Self {
            channels,
            seed,
            stream: 0,
        }
    }

    pub fn uniform(dim: usize, lo: f64, hi: f64, seed: u64) -> Self {
        Self::new(alloc::vec![NoiseChannel::Uniform { lo, hi }; dim], seed)
    }

    pub fn gaussian(dim: usize, mean: f64, std: f64, seed: u64) -> Self {
        Self::new(alloc::vec![NoiseChannel::Gaussian { mean, std }; dim], seed)
    }

    /// Independent sub-stream for a trial index; keeps single- and
    /// multi-threaded batch results identical.
    pub fn with_stream(mut self, stream: u64) -> Self {
        self.stream = stream;
        self
    }

    pub fn dim(&self) -> usize {
        self.channels.len()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn amplitude(&self) -> f64 {
        self.channels
            .iter()
            .map(|c| c.amplitude())
            .fold(0.0, f64::max)
    }

    /// Scale the law by a positive factor (uniform bounds and gaussian
    /// moments alike).
    pub fn scaled(&self, factor: f64) -> Self {
        let channels = self
            .channels
            .iter()
            .map(|c| match *c {
                NoiseChannel::Uniform { lo, hi } => NoiseChannel::Uniform {
                    lo: lo * factor,
                    hi: hi * factor,
                },
                NoiseChannel::Gaussian { mean, std } => NoiseChannel::Gaussian {
                    mean: mean * factor,
                    std: std * factor,
                },
            })
            .collect();
        Self {
            channels,
            seed: self.seed,
            stream: self.stream,
        }
    }

    fn validate(&self) -> Result<()> {
        for c in &self.channels {
            match *c {
                NoiseChannel::Uniform { lo, hi } => {
                    if !(lo <= hi) {
                        return Err(Error::InvalidBounds {
                            lower: lo,
                            upper: hi,
                        });
                    }
                }
                NoiseChannel::Gaussian { std, .. } => {
                    if !(std >= 0.0) {
                        return Err(Error::InvalidConstant {
                            name: "std",
                            value: std,
                        });
                    }
                }
            }
        }
        Ok(())
    }

    pub fn rng(&self) -> ChaCha12Rng {
        let mut rng = ChaCha12Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng
    }
}

#[inline]
fn uniform01(rng: &mut ChaCha12Rng) -> f64 {
    // 53 random mantissa bits, value in [0, 1).
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

fn draw(channel: &NoiseChannel, rng: &mut ChaCha12Rng) -> f64 {
    match *channel {
        NoiseChannel::Uniform { lo, hi } => lo + (hi - lo) * uniform01(rng),
        NoiseChannel::Gaussian { mean, std } => {
            // Box-Muller, cosine branch only: one draw per pair keeps the
            // stream layout independent of call order.
            let u1 = 1.0 - uniform01(rng);
            let u2 = uniform01(rng);
            mean + std
                * math::sqrt(-2.0 * math::ln(u1))
                * math::cos(2.0 * core::f64::consts::PI * u2)
        }
    }
}

/// Deterministic noise sequence of length `n_steps` for the given spec.
pub fn sample_noise(spec: &NoiseSpec, n_steps: usize) -> Result<Vec<DVector<f64>>> {
    spec.validate()?;
    let mut rng = spec.rng();
    let mut out = Vec::with_capacity(n_steps);
    for _ in 0..n_steps {
        out.push(DVector::from_fn(spec.dim(), |i, _| {
            draw(&spec.channels[i], &mut rng)
        }));
    }
    Ok(out)
}
