//! Vector fields, fast nullclines and analytic Jacobians of the two
//! compartmental lactate models.
//!
//! The 2D model couples extracellular lactate `x` (slow) with capillary
//! lactate `y` (fast). The 4D model adds intra-neuron `u` and
//! intra-astrocyte `v` (both slow). Right-hand sides are stored in explicit
//! form, `dy/dt = g / eps`, so a single integrator serves both models.
//! State vectors are ordered `[x, y]` and `[x, u, v, y]`.

use crate::integrator::OdeSystem;
use crate::signals::{Control, Signal};
use nalgebra::{DMatrix, DVector, Matrix2, Matrix4, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Relative distance to a Michaelis pole below which evaluation is refused.
pub const POLE_GUARD: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("concentration {value} is at the pole of a Michaelis term with constant {constant}")]
    Pole { value: f64, constant: f64 },
    #[error("parameter {name} must be strictly positive, got {value}")]
    NonPositive { name: &'static str, value: f64 },
    #[error("input F(t) must be positive, got {0}")]
    NonPositiveInput(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Params2D {
    /// Maximal cotransport rate across the blood-brain barrier (mM/s).
    pub c: f64,
    /// Michaelis constant, extracellular side (mM).
    pub k: f64,
    /// Michaelis constant, capillary side (mM).
    pub kprime: f64,
    /// Arterial supply level (mM).
    pub l: f64,
    pub eps: f64,
    pub eps_prime: f64,
}

impl Default for Params2D {
    fn default() -> Self {
        Self {
            c: 1.0,
            k: 1.0,
            kprime: 1.0,
            l: 1.0,
            eps: 1e-2,
            eps_prime: 1e-1,
        }
    }
}

fn positive(name: &'static str, value: f64) -> Result<(), ModelError> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(ModelError::NonPositive { name, value })
    }
}

impl Params2D {
    pub fn validate(&self) -> Result<(), ModelError> {
        positive("C", self.c)?;
        positive("k", self.k)?;
        positive("kprime", self.kprime)?;
        positive("L", self.l)?;
        positive("eps", self.eps)?;
        positive("eps_prime", self.eps_prime)?;
        if self.eps > 0.5 || self.eps_prime > 0.5 {
            log::warn!(
                "time-scale separation is weak (eps = {}, eps' = {}); slow-manifold reasoning may not apply",
                self.eps,
                self.eps_prime
            );
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Params4D {
    pub base: Params2D,
    /// Neuron <-> extracellular cotransport rate (mM/s).
    pub c1: f64,
    /// Astrocyte <-> extracellular cotransport rate (mM/s).
    pub c2: f64,
    /// Astrocyte <-> capillary cotransport rate (mM/s).
    pub ca: f64,
    pub kn: f64,
    pub ka: f64,
}

impl Default for Params4D {
    fn default() -> Self {
        Self {
            base: Params2D::default(),
            c1: 1.0,
            c2: 1.0,
            ca: 1.0,
            kn: 1.0,
            ka: 1.0,
        }
    }
}

impl Params4D {
    pub fn validate(&self) -> Result<(), ModelError> {
        self.base.validate()?;
        positive("C1", self.c1)?;
        positive("C2", self.c2)?;
        positive("Ca", self.ca)?;
        positive("kn", self.kn)?;
        positive("ka", self.ka)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct State2D {
    pub x: f64,
    pub y: f64,
}

impl State2D {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
    pub fn to_vector(self) -> DVector<f64> {
        DVector::from_vec(vec![self.x, self.y])
    }
    pub fn from_slice(s: &[f64]) -> Self {
        Self { x: s[0], y: s[1] }
    }
    pub fn in_positive_quadrant(&self) -> bool {
        self.x >= 0.0 && self.y >= 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct State4D {
    pub x: f64,
    pub u: f64,
    pub v: f64,
    pub y: f64,
}

impl State4D {
    pub fn new(x: f64, u: f64, v: f64, y: f64) -> Self {
        Self { x, u, v, y }
    }
    pub fn to_vector(self) -> DVector<f64> {
        DVector::from_vec(vec![self.x, self.u, self.v, self.y])
    }
    pub fn from_slice(s: &[f64]) -> Self {
        Self { x: s[0], u: s[1], v: s[2], y: s[3] }
    }
    pub fn in_positive_orthant(&self) -> bool {
        self.x >= 0.0 && self.u >= 0.0 && self.v >= 0.0 && self.y >= 0.0
    }
}

/// Michaelis fraction `a / (k + a)` with the pole guard.
pub fn saturation(a: f64, k: f64) -> Result<f64, ModelError> {
    let den = k + a;
    if den.abs() < POLE_GUARD * k || !den.is_finite() {
        return Err(ModelError::Pole { value: a, constant: k });
    }
    Ok(a / den)
}

/// `d/da [a / (k + a)] = k / (k + a)^2`.
fn saturation_slope(a: f64, k: f64) -> f64 {
    let den = k + a;
    k / (den * den)
}

/// Saturating exchange flux `cmax * (a/(ka+a) - b/(kb+b))`, positive from `a` to `b`.
pub fn cotransport(a: f64, b: f64, cmax: f64, ka: f64, kb: f64) -> Result<f64, ModelError> {
    Ok(cmax * (saturation(a, ka)? - saturation(b, kb)?))
}

/// Fast right-hand side of the 2D model, `F(L - y) + C(x/(k+x) - y/(k'+y))`.
pub fn fast_nullcline_g_2d(x: f64, y: f64, f_val: f64, p: &Params2D) -> Result<f64, ModelError> {
    Ok(f_val * (p.l - y) + cotransport(x, y, p.c, p.k, p.kprime)?)
}

/// Fast right-hand side of the 4D model (capillary balance).
pub fn fast_nullcline_g_4d(x: f64, v: f64, y: f64, f_val: f64, p: &Params4D) -> Result<f64, ModelError> {
    let b = &p.base;
    Ok(f_val * (b.l - y)
        + cotransport(x, y, b.c, b.k, b.kprime)?
        + cotransport(v, y, p.ca, p.ka, b.kprime)?)
}

pub fn rhs_2d(t: f64, s: State2D, p: &Params2D, j: &Control, f: &Signal) -> Result<State2D, ModelError> {
    let flux = cotransport(s.x, s.y, p.c, p.k, p.kprime)?;
    let f_val = f.eval(t);
    Ok(State2D {
        x: p.eps_prime * (j.eval(t, s.x) - flux),
        y: (f_val * (p.l - s.y) + flux) / p.eps,
    })
}

/// Analytic Jacobian of [`rhs_2d`] with respect to `(x, y)`.
///
/// With `A = kC/(k+x)^2` and `B = k'C/(k'+y)^2`:
/// `[[eps'(J_x - A), eps' B], [A/eps, -(B + F)/eps]]`.
pub fn jacobian_2d(s: State2D, p: &Params2D, j_x: f64, f_val: f64) -> Result<Matrix2<f64>, ModelError> {
    saturation(s.x, p.k)?;
    saturation(s.y, p.kprime)?;
    let a = p.c * saturation_slope(s.x, p.k);
    let b = p.c * saturation_slope(s.y, p.kprime);
    Ok(Matrix2::new(
        p.eps_prime * (j_x - a),
        p.eps_prime * b,
        a / p.eps,
        -(b + f_val) / p.eps,
    ))
}

pub fn rhs_4d(
    t: f64,
    s: State4D,
    p: &Params4D,
    controls: &[Control; 3],
    f: &Signal,
) -> Result<State4D, ModelError> {
    let b = &p.base;
    let sx = saturation(s.x, b.k)?;
    let su = saturation(s.u, p.kn)?;
    let sv = saturation(s.v, p.ka)?;
    let sy = saturation(s.y, b.kprime)?;
    let neuron = p.c1 * (su - sx);
    let astro = p.c2 * (sv - sx);
    let barrier = b.c * (sx - sy);
    let astro_cap = p.ca * (sv - sy);
    let f_val = f.eval(t);
    Ok(State4D {
        x: b.eps_prime * (controls[0].eval(t, s.x) + neuron + astro - barrier),
        u: b.eps_prime * (controls[1].eval(t, s.x) - neuron),
        v: b.eps_prime * (controls[2].eval(t, s.x) - astro - astro_cap),
        y: (f_val * (b.l - s.y) + barrier + astro_cap) / b.eps,
    })
}

/// Analytic Jacobian of [`rhs_4d`], variable order `[x, u, v, y]`.
/// `couplings` are the `J_x` coefficients of the three controls.
pub fn jacobian_4d(s: State4D, p: &Params4D, couplings: [f64; 3], f_val: f64) -> Result<Matrix4<f64>, ModelError> {
    let b = &p.base;
    saturation(s.x, b.k)?;
    saturation(s.u, p.kn)?;
    saturation(s.v, p.ka)?;
    saturation(s.y, b.kprime)?;
    let dx = saturation_slope(s.x, b.k);
    let du = saturation_slope(s.u, p.kn);
    let dv = saturation_slope(s.v, p.ka);
    let dy = saturation_slope(s.y, b.kprime);
    let ep = b.eps_prime;
    let e = b.eps;
    #[rustfmt::skip]
    let m = Matrix4::new(
        ep * (couplings[0] - (p.c1 + p.c2 + b.c) * dx), ep * p.c1 * du, ep * p.c2 * dv, ep * b.c * dy,
        ep * (couplings[1] + p.c1 * dx), -ep * p.c1 * du, 0.0, 0.0,
        ep * (couplings[2] + p.c2 * dx), 0.0, -ep * (p.c2 + p.ca) * dv, ep * p.ca * dy,
        b.c * dx / e, 0.0, p.ca * dv / e, -(f_val + (b.c + p.ca) * dy) / e,
    );
    Ok(m)
}

/// Weighted sum `(dx + du + dv)/eps' + eps*dy` of the 4D right-hand sides.
/// All exchange fluxes cancel, leaving `J0 + J1 + J2 + F(L - y)`.
pub fn source_balance_4d(d: &State4D, p: &Params4D) -> f64 {
    (d.x + d.u + d.v) / p.base.eps_prime + p.base.eps * d.y
}

/// System (2D) assembled for integration.
#[derive(Debug, Clone)]
pub struct System2D {
    pub params: Params2D,
    pub control: Control,
    pub input: Signal,
}

impl OdeSystem for System2D {
    fn dim(&self) -> usize {
        2
    }

    fn rhs(&self, t: f64, y: &DVector<f64>) -> Result<DVector<f64>, ModelError> {
        let d = rhs_2d(t, State2D::from_slice(y.as_slice()), &self.params, &self.control, &self.input)?;
        Ok(d.to_vector())
    }

    fn jacobian(&self, t: f64, y: &DVector<f64>) -> Result<DMatrix<f64>, ModelError> {
        let m = jacobian_2d(
            State2D::from_slice(y.as_slice()),
            &self.params,
            self.control.coupling,
            self.input.eval(t),
        )?;
        Ok(DMatrix::from_iterator(2, 2, m.iter().copied()))
    }

    fn breakpoints(&self, t0: f64, t1: f64) -> Vec<f64> {
        merge_breakpoints(&[&self.input, &self.control.signal], t0, t1)
    }

    fn in_domain(&self, y: &DVector<f64>) -> bool {
        y.iter().all(|&c| c >= 0.0)
    }
}

#[derive(Debug, Clone)]
pub struct System4D {
    pub params: Params4D,
    pub controls: [Control; 3],
    pub input: Signal,
}

impl OdeSystem for System4D {
    fn dim(&self) -> usize {
        4
    }

    fn rhs(&self, t: f64, y: &DVector<f64>) -> Result<DVector<f64>, ModelError> {
        let d = rhs_4d(t, State4D::from_slice(y.as_slice()), &self.params, &self.controls, &self.input)?;
        Ok(d.to_vector())
    }

    fn jacobian(&self, t: f64, y: &DVector<f64>) -> Result<DMatrix<f64>, ModelError> {
        let couplings = [
            self.controls[0].coupling,
            self.controls[1].coupling,
            self.controls[2].coupling,
        ];
        let m = jacobian_4d(State4D::from_slice(y.as_slice()), &self.params, couplings, self.input.eval(t))?;
        Ok(DMatrix::from_iterator(4, 4, m.iter().copied()))
    }

    fn breakpoints(&self, t0: f64, t1: f64) -> Vec<f64> {
        merge_breakpoints(
            &[
                &self.input,
                &self.controls[0].signal,
                &self.controls[1].signal,
                &self.controls[2].signal,
            ],
            t0,
            t1,
        )
    }

    fn in_domain(&self, y: &DVector<f64>) -> bool {
        y.iter().all(|&c| c >= 0.0)
    }
}

pub(crate) fn merge_breakpoints(signals: &[&Signal], t0: f64, t1: f64) -> Vec<f64> {
    let mut all: Vec<f64> = signals.iter().flat_map(|s| s.breakpoints_in(t0, t1)).collect();
    all.sort_by(|a, b| a.total_cmp(b));
    all.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * (1.0 + b.abs()));
    all
}

impl From<Vector4<f64>> for State4D {
    fn from(v: Vector4<f64>) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_params() -> Params2D {
        Params2D {
            c: 1.0,
            k: 1.0,
            kprime: 1.0,
            l: 1.0,
            eps: 0.01,
            eps_prime: 0.1,
        }
    }

    #[test]
    fn cotransport_examples() {
        assert_eq!(cotransport(0.0, 0.0, 1.0, 1.0, 1.0).unwrap(), 0.0);
        assert_eq!(cotransport(2.5, 2.5, 3.0, 0.7, 0.7).unwrap(), 0.0);
        assert_eq!(cotransport(1.0, 0.0, 1.0, 1.0, 1.0).unwrap(), 0.5);
    }

    #[test]
    fn cotransport_pole_is_an_error() {
        let err = cotransport(-1.0, 0.0, 1.0, 1.0, 1.0).unwrap_err();
        assert!(matches!(err, ModelError::Pole { .. }));
        assert!(cotransport(0.0, -2.0 + 1e-14, 1.0, 1.0, 2.0).is_err());
    }

    #[test]
    fn rhs_2d_hand_values() {
        // x = y = 0: dx/dt = eps' * J = 0.02, dy/dt = F L / eps = 50
        let p = unit_params();
        let d = rhs_2d(0.0, State2D::new(0.0, 0.0), &p, &Control::constant(0.2), &Signal::constant(0.5)).unwrap();
        assert!((d.x - 0.02).abs() < 1e-15);
        assert!((d.y - 50.0).abs() < 1e-12);
    }

    #[test]
    fn rhs_2d_scales_with_eps_prime() {
        let p = unit_params();
        let q = Params2D { eps_prime: 0.2, ..p };
        let s = State2D::new(0.7, 1.3);
        let j = Control::constant(0.2);
        let f = Signal::constant(0.5);
        let a = rhs_2d(0.0, s, &p, &j, &f).unwrap();
        let b = rhs_2d(0.0, s, &q, &j, &f).unwrap();
        assert!((b.x - 2.0 * a.x).abs() < 1e-16);
        assert_eq!(a.y, b.y);
    }

    #[test]
    fn nullcline_through_unit_equilibrium() {
        assert_eq!(fast_nullcline_g_2d(1.0, 1.0, 1.0, &unit_params()).unwrap(), 0.0);
    }

    #[test]
    fn jacobian_trace_and_determinant_signs() {
        let p = unit_params();
        let s = State2D::new(2.0, 1.5);
        let m = jacobian_2d(s, &p, 0.0, 0.5).unwrap();
        let a = p.c * p.k / (p.k + s.x).powi(2);
        let b = p.c * p.kprime / (p.kprime + s.y).powi(2);
        assert!((m.trace() - (-p.eps_prime * a - (b + 0.5) / p.eps)).abs() < 1e-12);
        assert!((m.determinant() - p.eps_prime * a * 0.5 / p.eps).abs() < 1e-12);
        assert!(m.trace() < 0.0 && m.determinant() > 0.0);
    }

    #[test]
    fn zero_flux_point_is_stationary_in_4d() {
        // every Michaelis fraction equals 1/2, F(L - y) = 0, J = 0
        let p = Params4D::default();
        let zero = [Control::constant(0.0), Control::constant(0.0), Control::constant(0.0)];
        let d = rhs_4d(0.0, State4D::new(1.0, 1.0, 1.0, 1.0), &p, &zero, &Signal::constant(0.5)).unwrap();
        assert_eq!(d, State4D::new(0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn invalid_params_are_rejected() {
        let p = Params2D { k: 0.0, ..unit_params() };
        assert!(matches!(p.validate(), Err(ModelError::NonPositive { name: "k", .. })));
        assert!(Params4D { ka: -1.0, ..Params4D::default() }.validate().is_err());
    }
}
