//! Critical manifolds of the fast equation and attractiveness diagnostics.
//!
//! Clearing the `k' + y` denominator in `g = 0` gives, for both models,
//!
//! `y^2 + y [k' - L + (Ctot - Q)/F] - k' (L + Q/F) = 0`
//!
//! with `Q = C x/(k+x)` and `Ctot = C` in 2D, `Q = C x/(k+x) + Ca v/(ka+v)` and
//! `Ctot = C + Ca` in 4D. The manifold is the nonnegative root.

use crate::dynamics::{fast_nullcline_g_2d, fast_nullcline_g_4d, ModelError, Params2D, Params4D};
use crate::integrator::Trajectory;
use crate::signals::{fmt17, Signal};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ManifoldError {
    #[error("input F must be positive, got {0}")]
    NonPositiveInput(f64),
    #[error("slow coordinate {name} = {value} is at or below the pole -{pole}")]
    BelowPole { name: &'static str, value: f64, pole: f64 },
    #[error("no nonnegative root of the fast equation (roots {0}, {1})")]
    NoNonnegativeRoot(f64, f64),
    #[error("no finite intersection: B(y) = {b} >= C = {c}")]
    NoFiniteIntersection { b: f64, c: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ManifoldPoint {
    pub x: f64,
    /// Astrocyte coordinate, 4D only.
    pub v: Option<f64>,
    pub y: f64,
    pub discriminant: f64,
    /// `dg/dy` on the manifold (1/s); negative means attracting.
    pub gprime_y: f64,
}

/// Roots of the fast quadratic, larger first.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FastQuadratic {
    pub b: f64,
    pub c: f64,
    pub discriminant: f64,
}

impl FastQuadratic {
    fn new(q: f64, ctot: f64, f_val: f64, kprime: f64, l: f64) -> Self {
        let b = kprime - l + (ctot - q) / f_val;
        let c = -kprime * (l + q / f_val);
        Self {
            b,
            c,
            discriminant: b * b - 4.0 * c,
        }
    }

    pub fn roots(&self) -> (f64, f64) {
        let sq = self.discriminant.max(0.0).sqrt();
        // avoid cancellation in whichever root would suffer it
        let q = -0.5 * (self.b + self.b.signum() * sq);
        if q == 0.0 {
            return (0.0, 0.0);
        }
        let (r1, r2) = (q, self.c / q);
        if r1 >= r2 {
            (r1, r2)
        } else {
            (r2, r1)
        }
    }
}

fn check_input(f_val: f64) -> Result<(), ManifoldError> {
    if f_val > 0.0 && f_val.is_finite() {
        Ok(())
    } else {
        Err(ManifoldError::NonPositiveInput(f_val))
    }
}

fn check_pole(name: &'static str, value: f64, pole: f64) -> Result<(), ManifoldError> {
    if value > -pole {
        Ok(())
    } else {
        Err(ManifoldError::BelowPole { name, value, pole })
    }
}

fn select_root(quad: &FastQuadratic) -> Result<f64, ManifoldError> {
    let (hi, lo) = quad.roots();
    if hi >= 0.0 {
        Ok(hi)
    } else {
        Err(ManifoldError::NoNonnegativeRoot(hi, lo))
    }
}

pub fn fast_quadratic_2d(x: f64, f_val: f64, p: &Params2D) -> Result<FastQuadratic, ManifoldError> {
    check_input(f_val)?;
    check_pole("x", x, p.k)?;
    let q = p.c * x / (p.k + x);
    Ok(FastQuadratic::new(q, p.c, f_val, p.kprime, p.l))
}

pub fn fast_quadratic_4d(x: f64, v: f64, f_val: f64, p: &Params4D) -> Result<FastQuadratic, ManifoldError> {
    check_input(f_val)?;
    check_pole("x", x, p.base.k)?;
    check_pole("v", v, p.ka)?;
    let q = p.base.c * x / (p.base.k + x) + p.ca * v / (p.ka + v);
    Ok(FastQuadratic::new(q, p.base.c + p.ca, f_val, p.base.kprime, p.base.l))
}

/// Manifold height at a frozen input value.
pub fn phi_2d_frozen(x: f64, f_val: f64, p: &Params2D) -> Result<f64, ManifoldError> {
    select_root(&fast_quadratic_2d(x, f_val, p)?)
}

pub fn phi_2d(x: f64, t: f64, p: &Params2D, f: &Signal) -> Result<f64, ManifoldError> {
    phi_2d_frozen(x, f.eval(t), p)
}

pub fn phi_4d_frozen(x: f64, v: f64, f_val: f64, p: &Params4D) -> Result<f64, ManifoldError> {
    select_root(&fast_quadratic_4d(x, v, f_val, p)?)
}

pub fn phi_4d(x: f64, v: f64, t: f64, p: &Params4D, f: &Signal) -> Result<f64, ManifoldError> {
    phi_4d_frozen(x, v, f.eval(t), p)
}

pub fn attractiveness_2d(y: f64, f_val: f64, p: &Params2D) -> f64 {
    -f_val - p.c * p.kprime / (p.kprime + y).powi(2)
}

pub fn attractiveness_4d(y: f64, f_val: f64, p: &Params4D) -> f64 {
    let kp = p.base.kprime;
    -f_val - (p.base.c + p.ca) * kp / (kp + y).powi(2)
}

pub fn manifold_point_2d(x: f64, f_val: f64, p: &Params2D) -> Result<ManifoldPoint, ManifoldError> {
    let quad = fast_quadratic_2d(x, f_val, p)?;
    let y = select_root(&quad)?;
    Ok(ManifoldPoint {
        x,
        v: None,
        y,
        discriminant: quad.discriminant,
        gprime_y: attractiveness_2d(y, f_val, p),
    })
}

pub fn manifold_point_4d(x: f64, v: f64, f_val: f64, p: &Params4D) -> Result<ManifoldPoint, ManifoldError> {
    let quad = fast_quadratic_4d(x, v, f_val, p)?;
    let y = select_root(&quad)?;
    Ok(ManifoldPoint {
        x,
        v: Some(v),
        y,
        discriminant: quad.discriminant,
        gprime_y: attractiveness_4d(y, f_val, p),
    })
}

/// Magnitude of the fast right-hand side (without the `1/eps` factor) at a manifold point.
pub fn manifold_residual_2d(pt: &ManifoldPoint, f_val: f64, p: &Params2D) -> Result<f64, ModelError> {
    Ok(fast_nullcline_g_2d(pt.x, pt.y, f_val, p)?.abs())
}

pub fn manifold_residual_4d(pt: &ManifoldPoint, f_val: f64, p: &Params4D) -> Result<f64, ModelError> {
    Ok(fast_nullcline_g_4d(pt.x, pt.v.unwrap_or(0.0), pt.y, f_val, p)?.abs())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CriticalX {
    pub x: f64,
    pub b: f64,
    /// False when the intersection lies at negative `x`.
    pub feasible: bool,
}

/// Slow coordinate at which the 2D critical manifold reaches height `y`:
/// `x = k B / (C - B)` with `B = C y/(k'+y) - F (L - y)`.
pub fn critical_x_2d(y: f64, f_val: f64, p: &Params2D) -> Result<CriticalX, ManifoldError> {
    check_input(f_val)?;
    check_pole("y", y, p.kprime)?;
    let b = p.c * y / (p.kprime + y) - f_val * (p.l - y);
    if b >= p.c {
        return Err(ManifoldError::NoFiniteIntersection { b, c: p.c });
    }
    let x = p.k * b / (p.c - b);
    Ok(CriticalX { x, b, feasible: b >= 0.0 })
}

/// Uniform attraction rate over a window of slow states and times.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MuBound {
    /// `min (-g'_y)` over the grid (1/s).
    pub mu: f64,
    pub t_argmin: f64,
    pub x_argmin: f64,
    /// `min F`, a floor valid for any `y`.
    pub analytic_floor: f64,
}

pub const DEFAULT_GRID: usize = 256;

/// Time grid of `n` uniform points on `[t0, t1]` merged with the input's breakpoints.
fn time_grid(f: &Signal, t0: f64, t1: f64, n: usize) -> Vec<f64> {
    let n = n.max(2);
    let mut ts: Vec<f64> = (0..n).map(|i| t0 + (t1 - t0) * i as f64 / (n - 1) as f64).collect();
    ts.extend(f.breakpoints_in(t0, t1));
    ts.sort_by(f64::total_cmp);
    ts.dedup();
    ts
}

fn value_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if hi <= lo || n < 2 {
        return vec![lo];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

/// `mu` over `x` in `x_window` and `t` in `[t0, t1]` (2D).
pub fn mu_bound_2d(
    x_window: (f64, f64),
    t_window: (f64, f64),
    p: &Params2D,
    f: &Signal,
    n: usize,
) -> Result<MuBound, ManifoldError> {
    let mut best = MuBound {
        mu: f64::INFINITY,
        t_argmin: t_window.0,
        x_argmin: x_window.0,
        analytic_floor: f64::INFINITY,
    };
    for t in time_grid(f, t_window.0, t_window.1, n) {
        let f_val = f.eval(t);
        best.analytic_floor = best.analytic_floor.min(f_val);
        for x in value_grid(x_window.0, x_window.1, n) {
            let rate = -manifold_point_2d(x, f_val, p)?.gprime_y;
            if rate < best.mu {
                best.mu = rate;
                best.t_argmin = t;
                best.x_argmin = x;
            }
        }
    }
    Ok(best)
}

/// `mu` over `x` and `v` windows and `t` in `[t0, t1]` (4D).
pub fn mu_bound_4d(
    x_window: (f64, f64),
    v_window: (f64, f64),
    t_window: (f64, f64),
    p: &Params4D,
    f: &Signal,
    n: usize,
) -> Result<MuBound, ManifoldError> {
    let mut best = MuBound {
        mu: f64::INFINITY,
        t_argmin: t_window.0,
        x_argmin: x_window.0,
        analytic_floor: f64::INFINITY,
    };
    let m = ((n as f64).sqrt().ceil() as usize).max(2);
    for t in time_grid(f, t_window.0, t_window.1, n) {
        let f_val = f.eval(t);
        best.analytic_floor = best.analytic_floor.min(f_val);
        for x in value_grid(x_window.0, x_window.1, m) {
            for v in value_grid(v_window.0, v_window.1, m) {
                let rate = -manifold_point_4d(x, v, f_val, p)?.gprime_y;
                if rate < best.mu {
                    best.mu = rate;
                    best.t_argmin = t;
                    best.x_argmin = x;
                }
            }
        }
    }
    Ok(best)
}

/// Distance from a trajectory to the critical manifold.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceSeries {
    pub times: Vec<f64>,
    pub distances: Vec<f64>,
    pub t_transient: f64,
    /// Max distance over samples with `t >= t_transient`.
    pub post_transient_max: f64,
    /// Min of `-g'_y` along the trajectory's manifold projection.
    pub mu_hat: f64,
}

fn distance_series<G>(traj: &Trajectory, eps: f64, t_transient: Option<f64>, mut at: G) -> Result<DistanceSeries, ManifoldError>
where
    G: FnMut(f64, &[f64]) -> Result<(f64, f64), ManifoldError>,
{
    let mut times = Vec::with_capacity(traj.len());
    let mut distances = Vec::with_capacity(traj.len());
    let mut mu_hat = f64::INFINITY;
    for (t, s) in traj.times.iter().zip(&traj.states) {
        let (phi, rate) = at(*t, s.as_slice())?;
        times.push(*t);
        distances.push((s[s.len() - 1] - phi).abs());
        mu_hat = mu_hat.min(rate);
    }
    let t_tr = traj.t0() + t_transient.unwrap_or(5.0 * eps / mu_hat);
    let post_transient_max = times
        .iter()
        .zip(&distances)
        .filter(|(t, _)| **t >= t_tr)
        .map(|(_, d)| *d)
        .fold(0.0, f64::max);
    Ok(DistanceSeries {
        times,
        distances,
        t_transient: t_tr,
        post_transient_max,
        mu_hat,
    })
}

/// `|y(t) - phi(x(t), t)|` at every stored step of a 2D trajectory. The
/// transient length defaults to `5 eps / mu_hat`, measured from the start.
pub fn manifold_distance_2d(
    traj: &Trajectory,
    p: &Params2D,
    f: &Signal,
    t_transient: Option<f64>,
) -> Result<DistanceSeries, ManifoldError> {
    distance_series(traj, p.eps, t_transient, |t, s| {
        let pt = manifold_point_2d(s[0], f.eval(t), p)?;
        Ok((pt.y, -pt.gprime_y))
    })
}

/// 4D analog of [`manifold_distance_2d`]; states are `[x, u, v, y]`.
pub fn manifold_distance_4d(
    traj: &Trajectory,
    p: &Params4D,
    f: &Signal,
    t_transient: Option<f64>,
) -> Result<DistanceSeries, ManifoldError> {
    distance_series(traj, p.base.eps, t_transient, |t, s| {
        let pt = manifold_point_4d(s[0], s[2], f.eval(t), p)?;
        Ok((pt.y, -pt.gprime_y))
    })
}

/// Manifold points for `n` uniformly spaced `x` in `[x_lo, x_hi]`.
pub fn slice_2d(x_lo: f64, x_hi: f64, n: usize, f_val: f64, p: &Params2D) -> Result<Vec<ManifoldPoint>, ManifoldError> {
    value_grid(x_lo, x_hi, n)
        .into_iter()
        .map(|x| manifold_point_2d(x, f_val, p))
        .collect()
}

/// Tensor grid of manifold points, `x` outer, `v` inner.
pub fn slice_4d(
    x_window: (f64, f64),
    v_window: (f64, f64),
    n: usize,
    f_val: f64,
    p: &Params4D,
) -> Result<Vec<ManifoldPoint>, ManifoldError> {
    let mut out = Vec::with_capacity(n * n);
    for x in value_grid(x_window.0, x_window.1, n) {
        for v in value_grid(v_window.0, v_window.1, n) {
            out.push(manifold_point_4d(x, v, f_val, p)?);
        }
    }
    Ok(out)
}

/// CSV with header `x,phi,gprime_y` or `x,v,phi,gprime_y`.
pub fn slice_to_csv(points: &[ManifoldPoint]) -> String {
    let four = points.first().is_some_and(|p| p.v.is_some());
    let mut out = String::from(if four { "x,v,phi,gprime_y\n" } else { "x,phi,gprime_y\n" });
    for pt in points {
        match pt.v {
            Some(v) => writeln!(out, "{},{},{},{}", fmt17(pt.x), fmt17(v), fmt17(pt.y), fmt17(pt.gprime_y)),
            None => writeln!(out, "{},{},{}", fmt17(pt.x), fmt17(pt.y), fmt17(pt.gprime_y)),
        }
        .unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit() -> Params2D {
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
    fn unit_equilibrium_on_manifold() {
        assert!((phi_2d_frozen(1.0, 1.0, &unit()).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn x_zero_has_one_positive_root() {
        let p = Params2D::default();
        let quad = fast_quadratic_2d(0.0, 0.5, &p).unwrap();
        let (hi, lo) = quad.roots();
        assert!(hi > 0.0 && lo < 0.0);
        assert!((hi * lo - quad.c).abs() < 1e-14);
    }

    #[test]
    fn critical_x_examples() {
        let r = critical_x_2d(1.0, 1.0, &unit()).unwrap();
        assert!((r.b - 0.5).abs() < 1e-15 && (r.x - 1.0).abs() < 1e-15);
        let p = Params2D { kprime: 2.0, l: 3.0, ..unit() };
        let r = critical_x_2d(p.l, 1.0, &p).unwrap();
        assert!((r.b - p.c * p.l / (p.kprime + p.l)).abs() < 1e-15);
        assert!((r.x - p.k * p.l / p.kprime).abs() < 1e-12);
        assert!(critical_x_2d(10.0, 1.0, &unit()).is_err());
        assert!(!critical_x_2d(0.1, 1.0, &unit()).unwrap().feasible);
    }

    #[test]
    fn attractiveness_plug_in() {
        assert_eq!(attractiveness_2d(0.0, 1.0, &unit()), -2.0);
        assert!((attractiveness_2d(1e9, 1.0, &unit()) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn ca_zero_reduces_to_2d() {
        let p4 = Params4D {
            ca: 0.0,
            ..Params4D::default()
        };
        for x in [0.0, 0.5, 3.0, 20.0] {
            let a = phi_4d_frozen(x, 7.0, 0.5, &p4).unwrap();
            let b = phi_2d_frozen(x, 0.5, &p4.base).unwrap();
            assert!((a - b).abs() <= 1e-14 * b.max(1.0));
        }
    }

    #[test]
    fn non_positive_input_rejected() {
        assert_eq!(phi_2d_frozen(1.0, 0.0, &unit()), Err(ManifoldError::NonPositiveInput(0.0)));
    }

    #[test]
    fn mu_bound_hits_lowest_input() {
        let f = Signal::new(&[(0.0, 0.5), (5.0, 1.0), (10.0, 0.5)], Some(10.0)).unwrap();
        let p = Params2D::default();
        let mu = mu_bound_2d((3.0, 3.0), (0.0, 10.0), &p, &f, 64).unwrap();
        assert_eq!(mu.analytic_floor, 0.5);
        assert!(mu.mu > mu.analytic_floor);
    }

    #[test]
    fn slice_csv_headers() {
        let p = Params2D::default();
        let csv = slice_to_csv(&slice_2d(0.0, 5.0, 3, 0.5, &p).unwrap());
        assert!(csv.starts_with("x,phi,gprime_y\n"));
        assert_eq!(csv.lines().count(), 4);
        let p4 = Params4D::default();
        let csv = slice_to_csv(&slice_4d((0.0, 1.0), (0.0, 1.0), 2, 0.5, &p4).unwrap());
        assert!(csv.starts_with("x,v,phi,gprime_y\n"));
        assert_eq!(csv.lines().count(), 5);
    }
}
