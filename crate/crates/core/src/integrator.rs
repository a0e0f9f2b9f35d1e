//! Adaptive time integration with dense output and event location.
//!
//! Two embedded pairs are available:
//!
//! * [`StiffnessMode::Implicit`] (default): a five-stage, stiffly accurate,
//!   L-stable SDIRK method of order 4 with an embedded order-3 estimate
//!   (Hairer & Wanner, *Solving ODEs II*, table IV.6.5). Stage equations are
//!   solved by damped simplified Newton with the system's analytic Jacobian.
//!   The local error estimate is filtered through `(I - h*gamma*J)^-1` so
//!   stiff components do not force needless rejections.
//! * [`StiffnessMode::Explicit`]: Dormand-Prince 5(4), kept as an
//!   independent cross-check.
//!
//! Steps never cross a corner of any input signal: the integration span is
//! split at [`OdeSystem::breakpoints`]. Dense output is a cubic Hermite
//! interpolant on the accepted steps.

use crate::dynamics::ModelError;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A first-order system `dy/dt = f(t, y)`.
pub trait OdeSystem {
    fn dim(&self) -> usize;

    fn rhs(&self, t: f64, y: &DVector<f64>) -> Result<DVector<f64>, ModelError>;

    /// Jacobian `df/dy`. The default uses forward differences.
    fn jacobian(&self, t: f64, y: &DVector<f64>) -> Result<DMatrix<f64>, ModelError> {
        finite_difference_jacobian(self, t, y)
    }

    /// Times in the open interval `(t0, t1)` where `f` has a kink in `t`.
    fn breakpoints(&self, _t0: f64, _t1: f64) -> Vec<f64> {
        Vec::new()
    }

    /// Whether `y` lies in the meaningful domain (e.g. non-negative concentrations).
    fn in_domain(&self, _y: &DVector<f64>) -> bool {
        true
    }
}

impl<S: OdeSystem + ?Sized> OdeSystem for &S {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn rhs(&self, t: f64, y: &DVector<f64>) -> Result<DVector<f64>, ModelError> {
        (**self).rhs(t, y)
    }
    fn jacobian(&self, t: f64, y: &DVector<f64>) -> Result<DMatrix<f64>, ModelError> {
        (**self).jacobian(t, y)
    }
    fn breakpoints(&self, t0: f64, t1: f64) -> Vec<f64> {
        (**self).breakpoints(t0, t1)
    }
    fn in_domain(&self, y: &DVector<f64>) -> bool {
        (**self).in_domain(y)
    }
}

pub fn finite_difference_jacobian<S: OdeSystem + ?Sized>(
    sys: &S,
    t: f64,
    y: &DVector<f64>,
) -> Result<DMatrix<f64>, ModelError> {
    let n = y.len();
    let f0 = sys.rhs(t, y)?;
    let mut jac = DMatrix::zeros(n, n);
    let mut yp = y.clone();
    for j in 0..n {
        let h = 1e-8 * (1.0 + y[j].abs());
        yp[j] = y[j] + h;
        let fj = sys.rhs(t, &yp)?;
        yp[j] = y[j];
        jac.set_column(j, &((fj - &f0) / h));
    }
    Ok(jac)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StiffnessMode {
    Implicit,
    Explicit,
}

impl std::str::FromStr for StiffnessMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "implicit" => Ok(Self::Implicit),
            "explicit" | "explicit-adaptive" => Ok(Self::Explicit),
            other => Err(format!("unknown stiffness mode '{other}' (implicit|explicit)")),
        }
    }
}

impl std::fmt::Display for StiffnessMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Implicit => "implicit",
            Self::Explicit => "explicit",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegratorConfig {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_step: f64,
    pub mode: StiffnessMode,
    pub max_steps: usize,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            rel_tol: 1e-8,
            abs_tol: 1e-10,
            max_step: f64::INFINITY,
            mode: StiffnessMode::Implicit,
            max_steps: 5_000_000,
        }
    }
}

impl IntegratorConfig {
    pub fn with_tolerances(rel_tol: f64, abs_tol: f64) -> Self {
        Self {
            rel_tol,
            abs_tol,
            ..Self::default()
        }
    }

    pub fn explicit(self) -> Self {
        Self {
            mode: StiffnessMode::Explicit,
            ..self
        }
    }

    fn validate(&self) -> Result<(), IntegrationError> {
        if !(self.rel_tol > 0.0) || !(self.abs_tol > 0.0) || !(self.max_step > 0.0) {
            return Err(IntegrationError::InvalidConfig(format!(
                "tolerances and max_step must be positive (rel_tol={}, abs_tol={}, max_step={})",
                self.rel_tol, self.abs_tol, self.max_step
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IntegrationError {
    #[error("invalid integrator configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid integration span [{t0}, {t1}]")]
    InvalidSpan { t0: f64, t1: f64 },
    #[error("initial state: {0}")]
    BadInitialState(ModelError),
    #[error("step size underflow at t = {t} (h = {h:e}); last state {state:?}")]
    StepUnderflow { t: f64, h: f64, state: Vec<f64> },
    #[error("trajectory reached a pole at t = {t}: {source}")]
    PoleExit { t: f64, source: ModelError, state: Vec<f64> },
    #[error("trajectory left the non-negative domain at t = {t}; state {state:?}")]
    DomainExit { t: f64, state: Vec<f64> },
    #[error("step budget of {steps} exhausted at t = {t}")]
    TooManySteps { t: f64, steps: usize },
    #[error("time {t} outside trajectory span [{t0}, {t1}]")]
    OutOfSpan { t: f64, t0: f64, t1: f64 },
    #[error("event predicate does not change sign on [{t0}, {t1}]")]
    NoSignChange { t0: f64, t1: f64 },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct IntegrationStats {
    pub accepted: usize,
    pub rejected: usize,
    pub rhs_evals: usize,
    pub jacobian_evals: usize,
    pub newton_failures: usize,
}

/// Accepted steps with derivatives at every sample, for Hermite dense output.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub derivatives: Vec<DVector<f64>>,
    pub stats: IntegrationStats,
}

impl Trajectory {
    pub fn t0(&self) -> f64 {
        self.times[0]
    }

    pub fn t1(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn last_state(&self) -> &DVector<f64> {
        self.states.last().unwrap()
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    fn segment(&self, t: f64) -> usize {
        let i = self.times.partition_point(|&s| s <= t);
        i.saturating_sub(1).min(self.times.len() - 2)
    }

    /// State at `t` from the cubic Hermite interpolant of the containing step.
    pub fn dense_eval(&self, t: f64) -> Result<DVector<f64>, IntegrationError> {
        let (t0, t1) = (self.t0(), self.t1());
        if !(t >= t0 && t <= t1) {
            return Err(IntegrationError::OutOfSpan { t, t0, t1 });
        }
        if self.times.len() == 1 {
            return Ok(self.states[0].clone());
        }
        let i = self.segment(t);
        let (ta, tb) = (self.times[i], self.times[i + 1]);
        if t == ta {
            return Ok(self.states[i].clone());
        }
        if t == tb {
            return Ok(self.states[i + 1].clone());
        }
        let h = tb - ta;
        let s = (t - ta) / h;
        let s2 = s * s;
        let s3 = s2 * s;
        let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
        let h10 = s3 - 2.0 * s2 + s;
        let h01 = -2.0 * s3 + 3.0 * s2;
        let h11 = s3 - s2;
        Ok(&self.states[i] * h00
            + &self.derivatives[i] * (h10 * h)
            + &self.states[i + 1] * h01
            + &self.derivatives[i + 1] * (h11 * h))
    }

    /// Time derivative of the dense interpolant.
    pub fn dense_derivative(&self, t: f64) -> Result<DVector<f64>, IntegrationError> {
        let (t0, t1) = (self.t0(), self.t1());
        if !(t >= t0 && t <= t1) {
            return Err(IntegrationError::OutOfSpan { t, t0, t1 });
        }
        let i = self.segment(t);
        let (ta, tb) = (self.times[i], self.times[i + 1]);
        let h = tb - ta;
        let s = (t - ta) / h;
        let s2 = s * s;
        let d00 = (6.0 * s2 - 6.0 * s) / h;
        let d10 = 3.0 * s2 - 4.0 * s + 1.0;
        let d01 = (-6.0 * s2 + 6.0 * s) / h;
        let d11 = 3.0 * s2 - 2.0 * s;
        Ok(&self.states[i] * d00
            + &self.derivatives[i] * d10
            + &self.states[i + 1] * d01
            + &self.derivatives[i + 1] * d11)
    }

    /// Samples the dense output on `n` equally spaced times spanning the trajectory.
    pub fn resample(&self, n: usize) -> Vec<(f64, DVector<f64>)> {
        let (t0, t1) = (self.t0(), self.t1());
        (0..n)
            .map(|i| {
                let t = if n == 1 {
                    t0
                } else if i == n - 1 {
                    t1
                } else {
                    t0 + (t1 - t0) * i as f64 / (n - 1) as f64
                };
                (t, self.dense_eval(t).expect("inside span"))
            })
            .collect()
    }
}

/// First root of `predicate(t, state)` along the dense output within `window`
/// (whole span when `None`), located by bisection to 1e-10 in time.
pub fn find_event<P>(traj: &Trajectory, predicate: P, window: Option<(f64, f64)>) -> Result<f64, IntegrationError>
where
    P: Fn(f64, &DVector<f64>) -> f64,
{
    let (w0, w1) = window.unwrap_or((traj.t0(), traj.t1()));
    let w0 = w0.max(traj.t0());
    let w1 = w1.min(traj.t1());
    let eval = |t: f64| -> Result<f64, IntegrationError> { Ok(predicate(t, &traj.dense_eval(t)?)) };

    // probe points: window ends, every sample inside, and three interior points per step
    let mut probes = vec![w0];
    for w in traj.times.windows(2) {
        let (a, b) = (w[0], w[1]);
        if b <= w0 || a >= w1 {
            continue;
        }
        for q in 1..4 {
            let t = a + (b - a) * q as f64 / 4.0;
            if t > w0 && t < w1 {
                probes.push(t);
            }
        }
        if b > w0 && b < w1 {
            probes.push(b);
        }
    }
    probes.push(w1);

    let mut prev_t = probes[0];
    let mut prev_v = eval(prev_t)?;
    if prev_v == 0.0 {
        return Ok(prev_t);
    }
    for &t in &probes[1..] {
        let v = eval(t)?;
        if v == 0.0 {
            return Ok(t);
        }
        if v.signum() != prev_v.signum() {
            let (mut lo, mut hi, mut f_lo) = (prev_t, t, prev_v);
            while hi - lo > 1e-10 {
                let mid = 0.5 * (lo + hi);
                if mid <= lo || mid >= hi {
                    break;
                }
                let fm = eval(mid)?;
                if fm == 0.0 {
                    return Ok(mid);
                }
                if fm.signum() == f_lo.signum() {
                    lo = mid;
                    f_lo = fm;
                } else {
                    hi = mid;
                }
            }
            return Ok(0.5 * (lo + hi));
        }
        prev_t = t;
        prev_v = v;
    }
    Err(IntegrationError::NoSignChange { t0: w0, t1: w1 })
}

// SDIRK4 (Hairer & Wanner), gamma = 1/4, stiffly accurate.
const SD_GAMMA: f64 = 0.25;
const SD_C: [f64; 5] = [0.25, 0.75, 11.0 / 20.0, 0.5, 1.0];
const SD_A: [[f64; 5]; 5] = [
    [0.25, 0.0, 0.0, 0.0, 0.0],
    [0.5, 0.25, 0.0, 0.0, 0.0],
    [17.0 / 50.0, -1.0 / 25.0, 0.25, 0.0, 0.0],
    [371.0 / 1360.0, -137.0 / 2720.0, 15.0 / 544.0, 0.25, 0.0],
    [25.0 / 24.0, -49.0 / 48.0, 125.0 / 16.0, -85.0 / 12.0, 0.25],
];
/// `b - b_hat` where `b_hat` is the embedded order-3 solution.
const SD_E: [f64; 5] = [
    25.0 / 24.0 - 59.0 / 48.0,
    -49.0 / 48.0 + 17.0 / 96.0,
    125.0 / 16.0 - 225.0 / 32.0,
    0.0,
    0.25,
];

// Dormand-Prince 5(4)
const DP_C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
const DP_A: [[f64; 6]; 7] = [
    [0.0; 6],
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const DP_E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

struct Stepper<'a, S: OdeSystem + ?Sized> {
    sys: &'a S,
    cfg: IntegratorConfig,
    stats: IntegrationStats,
}

enum StepOutcome {
    Accepted { y: DVector<f64>, err: f64 },
    /// Stage solve failed (Newton divergence or a pole in a trial stage).
    Failed(Option<ModelError>),
}

impl<'a, S: OdeSystem + ?Sized> Stepper<'a, S> {
    fn weights(&self, y0: &DVector<f64>, y1: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            y0.len(),
            y0.iter()
                .zip(y1.iter())
                .map(|(a, b)| self.cfg.abs_tol + self.cfg.rel_tol * a.abs().max(b.abs())),
        )
    }

    fn norm(v: &DVector<f64>, w: &DVector<f64>) -> f64 {
        let n = v.len() as f64;
        (v.iter().zip(w.iter()).map(|(a, b)| (a / b).powi(2)).sum::<f64>() / n).sqrt()
    }

    fn rhs(&mut self, t: f64, y: &DVector<f64>) -> Result<DVector<f64>, ModelError> {
        self.stats.rhs_evals += 1;
        self.sys.rhs(t, y)
    }

    fn initial_step(&mut self, t: f64, y: &DVector<f64>, f0: &DVector<f64>, order: f64, span: f64) -> f64 {
        let w = self.weights(y, y);
        let d0 = Self::norm(y, &w);
        let d1 = Self::norm(f0, &w);
        let mut h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
        h0 = h0.min(span).min(self.cfg.max_step);
        let y1 = y + f0 * h0;
        let d2 = match self.rhs(t + h0, &y1) {
            Ok(f1) => Self::norm(&(f1 - f0), &w) / h0,
            Err(_) => return h0 * 1e-3,
        };
        let dmax = d1.max(d2);
        let h1 = if dmax <= 1e-15 {
            (h0 * 1e-3).max(1e-6)
        } else {
            (0.01 / dmax).powf(1.0 / (order + 1.0))
        };
        (100.0 * h0).min(h1).min(span).min(self.cfg.max_step)
    }

    fn dopri_step(&mut self, t: f64, y: &DVector<f64>, f0: &DVector<f64>, h: f64) -> StepOutcome {
        let mut k: Vec<DVector<f64>> = Vec::with_capacity(7);
        k.push(f0.clone());
        for i in 1..7 {
            let mut yi = y.clone();
            for (j, kj) in k.iter().enumerate() {
                let a = DP_A[i][j];
                if a != 0.0 {
                    yi.axpy(h * a, kj, 1.0);
                }
            }
            match self.rhs(t + DP_C[i] * h, &yi) {
                Ok(f) => k.push(f),
                Err(e) => return StepOutcome::Failed(Some(e)),
            }
        }
        let mut y_new = y.clone();
        for (j, kj) in k.iter().enumerate().take(6) {
            y_new.axpy(h * DP_A[6][j], kj, 1.0);
        }
        let mut e = DVector::zeros(y.len());
        for (j, kj) in k.iter().enumerate() {
            e.axpy(h * DP_E[j], kj, 1.0);
        }
        let w = self.weights(y, &y_new);
        StepOutcome::Accepted {
            err: Self::norm(&e, &w),
            y: y_new,
        }
    }

    fn sdirk_step(&mut self, t: f64, y: &DVector<f64>, f0: &DVector<f64>, h: f64) -> StepOutcome {
        let n = y.len();
        let jac = match self.sys.jacobian(t, y) {
            Ok(j) => j,
            Err(e) => return StepOutcome::Failed(Some(e)),
        };
        self.stats.jacobian_evals += 1;
        let hg = h * SD_GAMMA;
        let m = DMatrix::identity(n, n) - &jac * hg;
        let lu = m.lu();
        if !lu.is_invertible() {
            return StepOutcome::Failed(None);
        }
        let w = self.weights(y, y);
        let newton_tol = 1e-2;
        let mut k: Vec<DVector<f64>> = Vec::with_capacity(5);
        for i in 0..5 {
            let mut base = y.clone();
            for (j, kj) in k.iter().enumerate() {
                base.axpy(h * SD_A[i][j], kj, 1.0);
            }
            let prev = k.last().unwrap_or(f0);
            let mut z = &base + prev * hg;
            let ti = t + SD_C[i] * h;
            let mut converged = false;
            let mut last_norm = f64::INFINITY;
            let mut fz = match self.rhs(ti, &z) {
                Ok(f) => f,
                Err(e) => return StepOutcome::Failed(Some(e)),
            };
            for iter in 0..10 {
                let g = &z - &base - &fz * hg;
                let delta = match lu.solve(&(-g)) {
                    Some(d) => d,
                    None => return StepOutcome::Failed(None),
                };
                let dn = Self::norm(&delta, &w);
                // damping: back off while the trial point is not evaluable
                let mut lambda = 1.0;
                loop {
                    let trial = &z + &delta * lambda;
                    match self.rhs(ti, &trial) {
                        Ok(f) => {
                            z = trial;
                            fz = f;
                            break;
                        }
                        Err(e) => {
                            lambda *= 0.5;
                            if lambda < 0.06 {
                                return StepOutcome::Failed(Some(e));
                            }
                        }
                    }
                }
                if iter > 0 {
                    let theta = dn / last_norm;
                    if theta >= 1.0 {
                        break;
                    }
                    if theta / (1.0 - theta) * dn <= newton_tol {
                        converged = true;
                        break;
                    }
                } else if dn <= 1e-3 * newton_tol {
                    converged = true;
                    break;
                }
                last_norm = dn;
            }
            if !converged {
                self.stats.newton_failures += 1;
                return StepOutcome::Failed(None);
            }
            k.push((&z - &base) / hg);
            if i == 4 {
                // stiffly accurate: the last stage is the new solution
                let mut e = DVector::zeros(n);
                for (j, kj) in k.iter().enumerate() {
                    e.axpy(h * SD_E[j], kj, 1.0);
                }
                let e = lu.solve(&e).unwrap_or(e);
                let w1 = self.weights(y, &z);
                return StepOutcome::Accepted {
                    err: Self::norm(&e, &w1),
                    y: z,
                };
            }
        }
        unreachable!()
    }
}

/// Integrates `sys` from `(t0, y0)` to `t1`.
pub fn integrate<S: OdeSystem + ?Sized>(
    sys: &S,
    t0: f64,
    t1: f64,
    y0: &DVector<f64>,
    cfg: &IntegratorConfig,
) -> Result<Trajectory, IntegrationError> {
    cfg.validate()?;
    if !(t1 > t0) || !t0.is_finite() || !t1.is_finite() {
        return Err(IntegrationError::InvalidSpan { t0, t1 });
    }
    let mut st = Stepper {
        sys,
        cfg: *cfg,
        stats: IntegrationStats::default(),
    };
    let f0 = st.rhs(t0, y0).map_err(IntegrationError::BadInitialState)?;
    let (order, err_exp) = match cfg.mode {
        StiffnessMode::Implicit => (4.0, 0.25),
        StiffnessMode::Explicit => (5.0, 0.2),
    };

    let mut stops = sys.breakpoints(t0, t1);
    stops.push(t1);

    let mut traj = Trajectory {
        times: vec![t0],
        states: vec![y0.clone()],
        derivatives: vec![f0.clone()],
        stats: IntegrationStats::default(),
    };
    let mut t = t0;
    let mut y = y0.clone();
    let mut f = f0;
    let mut h = st.initial_step(t, &y, &f, order, stops[0] - t0);
    let mut last_pole: Option<ModelError> = None;

    for &stop in &stops {
        if stop <= t {
            continue;
        }
        let mut rejected_last = false;
        while t < stop {
            if st.stats.accepted + st.stats.rejected >= cfg.max_steps {
                return Err(IntegrationError::TooManySteps {
                    t,
                    steps: cfg.max_steps,
                });
            }
            let remaining = stop - t;
            let mut h_try = h.min(cfg.max_step);
            let mut hits_stop = false;
            if h_try >= remaining * (1.0 - 1e-12) {
                h_try = remaining;
                hits_stop = true;
            } else if h_try > 0.5 * remaining {
                // avoid leaving a sliver before the corner
                h_try = 0.5 * remaining;
            }
            let min_step = 1e-14 * t.abs().max(1.0);
            if h_try < min_step {
                return Err(match last_pole.take() {
                    Some(source) => IntegrationError::PoleExit {
                        t,
                        source,
                        state: y.as_slice().to_vec(),
                    },
                    None => IntegrationError::StepUnderflow {
                        t,
                        h: h_try,
                        state: y.as_slice().to_vec(),
                    },
                });
            }
            let outcome = match cfg.mode {
                StiffnessMode::Implicit => st.sdirk_step(t, &y, &f, h_try),
                StiffnessMode::Explicit => st.dopri_step(t, &y, &f, h_try),
            };
            match outcome {
                StepOutcome::Failed(pole) => {
                    if pole.is_some() {
                        last_pole = pole;
                    }
                    st.stats.rejected += 1;
                    h = 0.25 * h_try;
                    rejected_last = true;
                }
                StepOutcome::Accepted { y: y_new, err } => {
                    if err <= 1.0 && err.is_finite() {
                        let t_new = if hits_stop { stop } else { t + h_try };
                        let f_new = match st.rhs(t_new, &y_new) {
                            Ok(v) => v,
                            Err(e) => {
                                return Err(IntegrationError::PoleExit {
                                    t: t_new,
                                    source: e,
                                    state: y_new.as_slice().to_vec(),
                                })
                            }
                        };
                        if !sys.in_domain(&y_new) {
                            let neg = y_new.iter().cloned().fold(f64::INFINITY, f64::min);
                            if neg < -10.0 * cfg.abs_tol {
                                return Err(IntegrationError::DomainExit {
                                    t: t_new,
                                    state: y_new.as_slice().to_vec(),
                                });
                            }
                        }
                        st.stats.accepted += 1;
                        last_pole = None;
                        t = t_new;
                        y = y_new;
                        f = f_new;
                        traj.times.push(t);
                        traj.states.push(y.clone());
                        traj.derivatives.push(f.clone());
                        let mut fac = 0.9 * err.max(1e-10).powf(-err_exp);
                        fac = fac.clamp(0.2, 5.0);
                        if rejected_last {
                            fac = fac.min(1.0);
                        }
                        rejected_last = false;
                        // a clipped step says nothing about the natural size
                        h = if hits_stop { h.max(h_try * fac) } else { h_try * fac };
                    } else {
                        st.stats.rejected += 1;
                        let fac = if err.is_finite() {
                            (0.9 * err.powf(-err_exp)).clamp(0.1, 0.9)
                        } else {
                            0.1
                        };
                        h = h_try * fac;
                        rejected_last = true;
                    }
                }
            }
        }
    }
    traj.stats = st.stats;
    Ok(traj)
}

/// Linearized flow `[y; vec(Phi)]` with `dPhi/dt = J(t, y) Phi`, used for
/// monodromy matrices. `Phi` is stored column-major after the state.
pub struct VariationalSystem<'a, S: OdeSystem + ?Sized> {
    pub inner: &'a S,
}

impl<'a, S: OdeSystem + ?Sized> VariationalSystem<'a, S> {
    pub fn new(inner: &'a S) -> Self {
        Self { inner }
    }

    pub fn initial_state(&self, y0: &DVector<f64>) -> DVector<f64> {
        let n = self.inner.dim();
        let mut z = DVector::zeros(n + n * n);
        z.rows_mut(0, n).copy_from(y0);
        for i in 0..n {
            z[n + i * n + i] = 1.0;
        }
        z
    }

    /// Splits an augmented state into `(y, Phi)`.
    pub fn split(&self, z: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let n = self.inner.dim();
        let y = z.rows(0, n).into_owned();
        let phi = DMatrix::from_column_slice(n, n, &z.as_slice()[n..]);
        (y, phi)
    }
}

impl<'a, S: OdeSystem + ?Sized> OdeSystem for VariationalSystem<'a, S> {
    fn dim(&self) -> usize {
        let n = self.inner.dim();
        n + n * n
    }

    fn rhs(&self, t: f64, z: &DVector<f64>) -> Result<DVector<f64>, ModelError> {
        let (y, phi) = self.split(z);
        let f = self.inner.rhs(t, &y)?;
        let jac = self.inner.jacobian(t, &y)?;
        let dphi = jac * phi;
        let n = y.len();
        let mut out = DVector::zeros(n + n * n);
        out.rows_mut(0, n).copy_from(&f);
        out.rows_mut(n, n * n).copy_from_slice(dphi.as_slice());
        Ok(out)
    }

    /// Block-diagonal approximation; the neglected `dJ/dy * Phi` coupling only
    /// slows the simplified Newton iteration, it does not change the solution.
    fn jacobian(&self, t: f64, z: &DVector<f64>) -> Result<DMatrix<f64>, ModelError> {
        let n = self.inner.dim();
        let (y, _) = self.split(z);
        let jac = self.inner.jacobian(t, &y)?;
        let mut big = DMatrix::zeros(n + n * n, n + n * n);
        for b in 0..=n {
            big.view_mut((b * n, b * n), (n, n)).copy_from(&jac);
        }
        Ok(big)
    }

    fn breakpoints(&self, t0: f64, t1: f64) -> Vec<f64> {
        self.inner.breakpoints(t0, t1)
    }

    fn in_domain(&self, z: &DVector<f64>) -> bool {
        let (y, _) = self.split(z);
        self.inner.in_domain(&y)
    }
}
