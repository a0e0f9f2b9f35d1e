//! Averaging on the slow manifold and periodic-orbit shooting.
//!
//! Along the critical manifold the slow equation of the 2D model is
//! `x' = eps' (J(t, x) + F(t) (L - phi(x, t)))`, because the exchange term
//! equals `F (L - y)` wherever `g = 0`. Its period average
//! `fbar(x) = Jbar(x) + L Fbar - (1/T) int F phi dt` predicts the slow
//! coordinate of the forced periodic orbit. The prediction is then checked
//! against the true period map and refined by Newton shooting.

use crate::dynamics::{jacobian_4d, ModelError, Params2D, Params4D, System2D, System4D};
use crate::equilibria::Eigenvalue;
use crate::integrator::{integrate, IntegrationError, IntegratorConfig, OdeSystem, VariationalSystem};
use crate::manifold::{manifold_point_4d, mu_bound_2d, phi_2d, phi_2d_frozen, ManifoldError};
use crate::quadrature::{integrate_piecewise, QuadratureError};
use crate::signals::{fmt17, Control, Signal};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AveragingError {
    #[error("period must be positive and finite, got {0}")]
    InvalidPeriod(f64),
    #[error("condition {condition} fails: {detail}")]
    ConditionFailed { condition: char, detail: String },
    #[error("averaged field has no sign change on [{lo}, {hi}]")]
    NoSignChange { lo: f64, hi: f64 },
    #[error("averaged field changes sign more than once; brackets {0:?}")]
    MultipleRoots(Vec<(f64, f64)>),
    #[error("averaged root at {x} is not isolated (|fbar'| = {margin:e})")]
    NonIsolated { x: f64, margin: f64 },
    #[error("period-map refinement did not converge in {iterations} iterations (defect {defect:e})")]
    RefinementNonConvergence { iterations: usize, defect: f64 },
    #[error(transparent)]
    Quadrature(#[from] QuadratureError),
    #[error(transparent)]
    Manifold(#[from] ManifoldError),
    #[error(transparent)]
    Integration(#[from] IntegrationError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub const QUAD_REL_TOL: f64 = 1e-12;
pub const CONDITION_B_TOL: f64 = 1e-8;
pub const ISOLATION_TOL: f64 = 1e-8;
pub const SCAN_POINTS: usize = 256;
pub const REFINE_TOL: f64 = 1e-10;
pub const REFINE_MAX_ITER: usize = 50;

fn check_period(period: f64) -> Result<(), AveragingError> {
    if period > 0.0 && period.is_finite() {
        Ok(())
    } else {
        Err(AveragingError::InvalidPeriod(period))
    }
}

fn quad_err(t: f64, e: impl std::fmt::Display) -> QuadratureError {
    QuadratureError::Integrand { t, msg: e.to_string() }
}

/// Linearization of the reduced slow equation at `x`:
/// `A(t) = eps' [J_x - (k C/(k+x)^2) F / (F + k' C/(k'+y)^2)]` with `y = phi(x, t)`.
pub fn a_of_t(x: f64, t: f64, p: &Params2D, f: &Signal, j_x: f64) -> Result<f64, ManifoldError> {
    let f_val = f.eval(t);
    let y = phi_2d_frozen(x, f_val, p)?;
    let dx = p.k * p.c / (p.k + x).powi(2);
    let dy = p.kprime * p.c / (p.kprime + y).powi(2);
    Ok(p.eps_prime * (j_x - dx * f_val / (f_val + dy)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionB {
    pub integral: f64,
    pub passed: bool,
}

/// `int_0^T A(t) dt`; the scalar variational equation has a nonzero periodic
/// solution exactly when this vanishes.
pub fn check_condition_b(x_ref: f64, period: f64, p: &Params2D, f: &Signal, j_x: f64) -> Result<ConditionB, AveragingError> {
    check_period(period)?;
    let breaks = f.breakpoints_in(0.0, period);
    let integral = integrate_piecewise(
        |t| a_of_t(x_ref, t, p, f, j_x).map_err(|e| quad_err(t, e)),
        0.0,
        period,
        &breaks,
        QUAD_REL_TOL,
        // a near-zero integral is exactly the failing case; resolve it well below the threshold
        1e-4 * CONDITION_B_TOL,
    )?;
    Ok(ConditionB {
        integral,
        passed: integral.abs() > CONDITION_B_TOL,
    })
}

fn merged_breaks(f: &Signal, j: &Control, period: f64) -> Vec<f64> {
    let mut b = f.breakpoints_in(0.0, period);
    b.extend(j.signal.breakpoints_in(0.0, period));
    b.sort_by(f64::total_cmp);
    b.dedup();
    b
}

/// `fbar(x) = Jbar(x) + L Fbar - (1/T) int_0^T F(t) phi(x, t) dt`, in mM/s
/// (without the `eps'` factor).
pub fn averaged_rhs(x: f64, period: f64, p: &Params2D, f: &Signal, j: &Control) -> Result<f64, AveragingError> {
    check_period(period)?;
    let breaks = merged_breaks(f, j, period);
    let flux = integrate_piecewise(
        |t| {
            let fv = f.eval(t);
            phi_2d_frozen(x, fv, p).map(|y| fv * y).map_err(|e| quad_err(t, e))
        },
        0.0,
        period,
        &breaks,
        QUAD_REL_TOL,
        1e-300,
    )?;
    Ok(j.average(period, x) + p.l * f.average(period) - flux / period)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AveragedRoot {
    pub x0: f64,
    pub residual: f64,
    /// `|fbar'(x0)|` by central difference.
    pub isolation_margin: f64,
}

/// Brackets of sign changes of `fbar` on a uniform scan of `[lo, hi]`.
pub fn scan_brackets(
    period: f64,
    p: &Params2D,
    f: &Signal,
    j: &Control,
    lo: f64,
    hi: f64,
    n: usize,
) -> Result<Vec<(f64, f64)>, AveragingError> {
    let n = n.max(2);
    let xs: Vec<f64> = (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect();
    let mut vals = Vec::with_capacity(n);
    for &x in &xs {
        vals.push(averaged_rhs(x, period, p, f, j)?);
    }
    let mut out = Vec::new();
    for i in 0..n - 1 {
        if vals[i] == 0.0 {
            out.push((xs[i], xs[i]));
        } else if vals[i] * vals[i + 1] < 0.0 {
            out.push((xs[i], xs[i + 1]));
        }
    }
    if vals[n - 1] == 0.0 {
        out.push((xs[n - 1], xs[n - 1]));
    }
    Ok(out)
}

/// Unique root of `fbar` on `[lo, hi]`, polished by an Illinois-safeguarded secant.
pub fn find_averaged_root(
    period: f64,
    p: &Params2D,
    f: &Signal,
    j: &Control,
    lo: f64,
    hi: f64,
) -> Result<AveragedRoot, AveragingError> {
    let brackets = scan_brackets(period, p, f, j, lo, hi, SCAN_POINTS)?;
    let (mut a, mut b) = match brackets.as_slice() {
        [] => return Err(AveragingError::NoSignChange { lo, hi }),
        [one] => *one,
        _ => return Err(AveragingError::MultipleRoots(brackets)),
    };
    let fbar = |x: f64| averaged_rhs(x, period, p, f, j);
    let mut fa = fbar(a)?;
    let mut fb = fbar(b)?;
    let mut x = a;
    let mut fx = fa;
    if a != b {
        let mut side = 0i8;
        for _ in 0..200 {
            x = (a * fb - b * fa) / (fb - fa);
            if !(x > a.min(b) && x < a.max(b)) {
                x = 0.5 * (a + b);
            }
            fx = fbar(x)?;
            if fx.abs() <= 1e-13 || (b - a).abs() <= 1e-15 * x.abs().max(1.0) {
                break;
            }
            if fx * fb < 0.0 {
                a = b;
                fa = fb;
                b = x;
                fb = fx;
                side = 0;
            } else {
                b = x;
                fb = fx;
                if side == 1 {
                    fa *= 0.5;
                }
                side = 1;
            }
        }
    }
    let h = 1e-6 * (1.0 + x.abs());
    let margin = ((fbar(x + h)? - fbar(x - h)?) / (2.0 * h)).abs();
    if margin < ISOLATION_TOL {
        return Err(AveragingError::NonIsolated { x, margin });
    }
    Ok(AveragedRoot {
        x0: x,
        residual: fx.abs(),
        isolation_margin: margin,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AveragingReport {
    pub period: f64,
    pub mu_bound: f64,
    pub mu_analytic_floor: f64,
    pub condition_b_integral: f64,
    pub x0_avg: f64,
    pub averaged_residual: f64,
    pub isolation_margin: f64,
    /// `(x0_avg, phi(x0_avg, 0))`.
    pub predicted_initial: Vec<f64>,
    /// Euclidean norm of `P(s0) - s0` for the true period map.
    pub period_map_defect: f64,
}

/// Checks conditions a, b, c and assembles the predicted initial data.
pub fn predict_periodic_orbit(
    sys: &System2D,
    period: f64,
    search: (f64, f64),
    cfg: &IntegratorConfig,
) -> Result<AveragingReport, AveragingError> {
    check_period(period)?;
    let p = &sys.params;
    let root = find_averaged_root(period, p, &sys.input, &sys.control, search.0, search.1).map_err(|e| match e {
        AveragingError::NoSignChange { .. } | AveragingError::MultipleRoots(_) | AveragingError::NonIsolated { .. } => {
            AveragingError::ConditionFailed {
                condition: 'c',
                detail: e.to_string(),
            }
        }
        other => other,
    })?;
    let x0 = root.x0;
    let mu = mu_bound_2d((x0, x0), (0.0, period), p, &sys.input, crate::manifold::DEFAULT_GRID)?;
    if !(mu.mu > 0.0) {
        return Err(AveragingError::ConditionFailed {
            condition: 'a',
            detail: format!("manifold attraction rate {} is not positive", mu.mu),
        });
    }
    let cb = check_condition_b(x0, period, p, &sys.input, sys.control.coupling)?;
    if !cb.passed {
        return Err(AveragingError::ConditionFailed {
            condition: 'b',
            detail: format!("|int A dt| = {:e} <= {:e}", cb.integral.abs(), CONDITION_B_TOL),
        });
    }
    let s0 = vec![x0, phi_2d(x0, 0.0, p, &sys.input)?];
    let start = DVector::from_column_slice(&s0);
    let end = period_map(sys, &start, period, cfg)?;
    Ok(AveragingReport {
        period,
        mu_bound: mu.mu,
        mu_analytic_floor: mu.analytic_floor,
        condition_b_integral: cb.integral,
        x0_avg: x0,
        averaged_residual: root.residual,
        isolation_margin: root.isolation_margin,
        predicted_initial: s0,
        period_map_defect: (end - start).norm(),
    })
}

/// State after one forcing period starting at `t = 0`.
pub fn period_map<S: OdeSystem + ?Sized>(
    sys: &S,
    s: &DVector<f64>,
    period: f64,
    cfg: &IntegratorConfig,
) -> Result<DVector<f64>, IntegrationError> {
    Ok(integrate(sys, 0.0, period, s, cfg)?.last_state().clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MonodromySource {
    Variational,
    FiniteDifference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodicOrbitReport {
    pub fixed_point: Vec<f64>,
    /// `|P(s) - s|` at the starting guess.
    pub initial_defect: f64,
    pub final_defect: f64,
    pub floquet_multipliers: Vec<Eigenvalue>,
    pub max_multiplier_modulus: f64,
    pub iterations: usize,
    /// Claimed only when every multiplier lies strictly inside the unit circle.
    pub stable: bool,
    pub monodromy: MonodromySource,
}

/// Period map and its Jacobian; variational equations first, forward
/// differences with step `1e-7 (1 + |s_i|)` if those fail.
pub fn period_map_with_monodromy<S: OdeSystem + ?Sized>(
    sys: &S,
    s: &DVector<f64>,
    period: f64,
    cfg: &IntegratorConfig,
) -> Result<(DVector<f64>, DMatrix<f64>, MonodromySource), IntegrationError> {
    let var = VariationalSystem::new(sys);
    match integrate(&var, 0.0, period, &var.initial_state(s), cfg) {
        Ok(traj) => {
            let (end, m) = var.split(traj.last_state());
            Ok((end, m, MonodromySource::Variational))
        }
        Err(e) => {
            log::warn!("variational integration failed ({e}); using finite differences");
            let end = period_map(sys, s, period, cfg)?;
            let n = s.len();
            let mut m = DMatrix::zeros(n, n);
            for i in 0..n {
                let h = 1e-7 * (1.0 + s[i].abs());
                let mut sp = s.clone();
                sp[i] += h;
                let col = (period_map(sys, &sp, period, cfg)? - &end) / h;
                m.set_column(i, &col);
            }
            Ok((end, m, MonodromySource::FiniteDifference))
        }
    }
}

/// Refinement runs use at least this accuracy.
pub fn refinement_config(cfg: &IntegratorConfig) -> IntegratorConfig {
    IntegratorConfig {
        rel_tol: cfg.rel_tol.min(1e-10),
        abs_tol: cfg.abs_tol.min(1e-12),
        ..*cfg
    }
}

/// Newton iteration on `P(s) - s = 0`.
pub fn refine_periodic_orbit<S: OdeSystem + ?Sized>(
    sys: &S,
    guess: &[f64],
    period: f64,
    cfg: &IntegratorConfig,
) -> Result<PeriodicOrbitReport, AveragingError> {
    refine_periodic_orbit_with(sys, guess, period, cfg, REFINE_MAX_ITER)
}

/// [`refine_periodic_orbit`] with an explicit Newton iteration cap.
pub fn refine_periodic_orbit_with<S: OdeSystem + ?Sized>(
    sys: &S,
    guess: &[f64],
    period: f64,
    cfg: &IntegratorConfig,
    max_iter: usize,
) -> Result<PeriodicOrbitReport, AveragingError> {
    check_period(period)?;
    let cfg = refinement_config(cfg);
    let n = guess.len();
    let mut s = DVector::from_column_slice(guess);
    let mut initial_defect = None;
    for it in 0..=max_iter {
        let (end, m, source) = period_map_with_monodromy(sys, &s, period, &cfg)?;
        let g = &end - &s;
        let defect = g.norm();
        let initial = *initial_defect.get_or_insert(defect);
        if defect <= REFINE_TOL {
            let eigs: Vec<Eigenvalue> = m.complex_eigenvalues().iter().map(|&c| c.into()).collect();
            let max_mod = eigs.iter().map(|e| e.re.hypot(e.im)).fold(0.0, f64::max);
            return Ok(PeriodicOrbitReport {
                fixed_point: s.as_slice().to_vec(),
                initial_defect: initial,
                final_defect: defect,
                max_multiplier_modulus: max_mod,
                stable: max_mod < 1.0,
                floquet_multipliers: eigs,
                iterations: it,
                monodromy: source,
            });
        }
        if it == max_iter {
            return Err(AveragingError::RefinementNonConvergence {
                iterations: it,
                defect,
            });
        }
        let dg = m - DMatrix::identity(n, n);
        let step = dg.lu().solve(&(-&g)).ok_or(AveragingError::RefinementNonConvergence {
            iterations: it,
            defect,
        })?;
        // keep the iterate inside the physical domain
        let mut lambda = 1.0;
        while !sys.in_domain(&(&s + &step * lambda)) && lambda > 1e-6 {
            lambda *= 0.5;
        }
        s += step * lambda;
    }
    unreachable!()
}

/// Linear `3x3` (or general `n x n`) matrix ODE `Phi' = A(t) Phi` in column-major form.
struct LinearFlow<A: Fn(f64) -> Result<DMatrix<f64>, ModelError>> {
    n: usize,
    a: A,
    breaks: Vec<f64>,
}

impl<A: Fn(f64) -> Result<DMatrix<f64>, ModelError>> OdeSystem for LinearFlow<A> {
    fn dim(&self) -> usize {
        self.n * self.n
    }
    fn rhs(&self, t: f64, z: &DVector<f64>) -> Result<DVector<f64>, ModelError> {
        let phi = DMatrix::from_column_slice(self.n, self.n, z.as_slice());
        Ok(DVector::from_column_slice(((self.a)(t)? * phi).as_slice()))
    }
    fn jacobian(&self, t: f64, _z: &DVector<f64>) -> Result<DMatrix<f64>, ModelError> {
        let a = (self.a)(t)?;
        let n = self.n;
        let mut big = DMatrix::zeros(n * n, n * n);
        for b in 0..n {
            big.view_mut((b * n, b * n), (n, n)).copy_from(&a);
        }
        Ok(big)
    }
    fn breakpoints(&self, t0: f64, t1: f64) -> Vec<f64> {
        self.breaks.iter().copied().filter(|&t| t > t0 && t < t1).collect()
    }
    fn in_domain(&self, _z: &DVector<f64>) -> bool {
        true
    }
}

/// Schur complement `J_ss - J_sy J_yy^{-1} J_ys` eliminating the last (fast) variable.
pub fn reduced_slow_matrix(jac: &DMatrix<f64>) -> DMatrix<f64> {
    let n = jac.nrows() - 1;
    let jss = jac.view((0, 0), (n, n));
    let jsy = jac.view((0, n), (n, 1));
    let jys = jac.view((n, 0), (1, n));
    let jyy = jac[(n, n)];
    jss - jsy * jys / jyy
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionB4D {
    pub multipliers: Vec<Eigenvalue>,
    /// `min |lambda - 1|` over the reduced monodromy eigenvalues.
    pub distance_to_one: f64,
    pub passed: bool,
}

/// Monodromy test for the three slow variables of the 4D model, linearized at
/// the slow point `(x, u, v)` on the critical manifold.
pub fn check_condition_b_4d(
    slow: [f64; 3],
    period: f64,
    p: &Params4D,
    f: &Signal,
    couplings: [f64; 3],
    cfg: &IntegratorConfig,
) -> Result<ConditionB4D, AveragingError> {
    check_period(period)?;
    let a = |t: f64| -> Result<DMatrix<f64>, ModelError> {
        let f_val = f.eval(t);
        let y = manifold_point_4d(slow[0], slow[2], f_val, p)
            .map(|pt| pt.y)
            .map_err(|_| ModelError::NonPositiveInput(f_val))?;
        let s = crate::dynamics::State4D::new(slow[0], slow[1], slow[2], y);
        let jac = jacobian_4d(s, p, couplings, f_val)?;
        Ok(reduced_slow_matrix(&DMatrix::from_iterator(4, 4, jac.iter().copied())))
    };
    let flow = LinearFlow {
        n: 3,
        a,
        breaks: f.breakpoints_in(0.0, period),
    };
    let id = DMatrix::<f64>::identity(3, 3);
    let traj = integrate(&flow, 0.0, period, &DVector::from_column_slice(id.as_slice()), &refinement_config(cfg))?;
    let m = DMatrix::from_column_slice(3, 3, traj.last_state().as_slice());
    let eigs = m.complex_eigenvalues();
    let distance = eigs.iter().map(|e| (e - 1.0).norm()).fold(f64::INFINITY, f64::min);
    let multipliers: Vec<Eigenvalue> = eigs.iter().map(|&c| c.into()).collect();
    Ok(ConditionB4D {
        multipliers,
        distance_to_one: distance,
        passed: distance > 1e-6,
    })
}

/// Periodic orbit of the 4D model by shooting from `guess`.
pub fn refine_periodic_orbit_4d(
    sys: &System4D,
    guess: &[f64],
    period: f64,
    cfg: &IntegratorConfig,
) -> Result<PeriodicOrbitReport, AveragingError> {
    refine_periodic_orbit(sys, guess, period, cfg)
}

impl AveragingReport {
    pub fn to_key_value(&self) -> String {
        let mut s = String::new();
        for (k, v) in [
            ("period", self.period),
            ("mu_bound", self.mu_bound),
            ("mu_analytic_floor", self.mu_analytic_floor),
            ("condition_b_integral", self.condition_b_integral),
            ("x0_avg", self.x0_avg),
            ("averaged_residual", self.averaged_residual),
            ("isolation_margin", self.isolation_margin),
            ("predicted_x", self.predicted_initial[0]),
            ("predicted_y", self.predicted_initial[1]),
            ("period_map_defect", self.period_map_defect),
        ] {
            writeln!(s, "{k} = {}", fmt17(v)).unwrap();
        }
        s
    }
}

impl PeriodicOrbitReport {
    pub fn to_key_value(&self) -> String {
        let mut s = String::new();
        for (i, v) in self.fixed_point.iter().enumerate() {
            writeln!(s, "fixed_point_{i} = {}", fmt17(*v)).unwrap();
        }
        writeln!(s, "initial_defect = {}", fmt17(self.initial_defect)).unwrap();
        writeln!(s, "final_defect = {}", fmt17(self.final_defect)).unwrap();
        for (i, e) in self.floquet_multipliers.iter().enumerate() {
            writeln!(s, "multiplier_re_{i} = {}", fmt17(e.re)).unwrap();
            writeln!(s, "multiplier_im_{i} = {}", fmt17(e.im)).unwrap();
        }
        writeln!(s, "max_multiplier_modulus = {}", fmt17(self.max_multiplier_modulus)).unwrap();
        writeln!(s, "iterations = {}", self.iterations).unwrap();
        writeln!(s, "stable = {}", self.stable).unwrap();
        writeln!(
            s,
            "monodromy = {}",
            match self.monodromy {
                MonodromySource::Variational => "variational",
                MonodromySource::FiniteDifference => "finite_difference",
            }
        )
        .unwrap();
        s
    }
}
