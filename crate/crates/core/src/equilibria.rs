//! Stationary points of the frozen-input models.
//!
//! Closed forms:
//!
//! * 2D: `y0 = L + J/F`, `x0 = k s / (1 - s)` with `s = J/C + y0/(k'+y0)`.
//! * 4D: summing the four balances gives `y0 = L + (J0+J1+J2)/F`. The
//!   capillary and astrocyte balances are then linear in the Michaelis
//!   fractions `X = x/(k+x)` and `V = v/(ka+v)`; with `S = J0+J1+J2` and
//!   `D = C*C2 + C*Ca + C2*Ca`,
//!   `X = Y + ((C2+Ca) S - Ca J2) / D`, `V = Y + (C J2 + C2 S) / D`,
//!   and the neuron balance gives `U = X + J1/C1`, where `Y = y0/(k'+y0)`.
//!
//! A damped Newton solver on the same equations serves as an independent
//! check of both closed forms.

use crate::dynamics::{
    jacobian_2d, jacobian_4d, rhs_2d, rhs_4d, ModelError, Params2D, Params4D, State2D, State4D,
};
use crate::integrator::OdeSystem;
use crate::signals::{Control, Signal};
use nalgebra::{Complex, DMatrix, DVector, Matrix2, Matrix4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EquilibriumError {
    #[error("no positive equilibrium: {0}")]
    Infeasible(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("Newton iteration did not converge in {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },
    #[error("singular Jacobian in Newton iteration at {0:?}")]
    SingularJacobian(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Classification {
    Node,
    Focus,
    Saddle,
    Degenerate,
}

impl std::fmt::Display for Classification {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Node => "node",
            Self::Focus => "focus",
            Self::Saddle => "saddle",
            Self::Degenerate => "degenerate",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Eigenvalue {
    pub re: f64,
    pub im: f64,
}

impl From<Complex<f64>> for Eigenvalue {
    fn from(c: Complex<f64>) -> Self {
        Self { re: c.re, im: c.im }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumReport {
    /// `[x, y]` or `[x, u, v, y]`.
    pub point: Vec<f64>,
    /// Max-norm of the stationarity equations with the `eps`, `eps'` factors removed (mM/s).
    pub residual_norm: f64,
    pub eigenvalues: Vec<Eigenvalue>,
    pub classification: Classification,
    pub stable: bool,
    pub feasible: bool,
}

impl EquilibriumReport {
    pub fn x(&self) -> f64 {
        self.point[0]
    }
    pub fn y(&self) -> f64 {
        *self.point.last().unwrap()
    }
    pub fn state_2d(&self) -> State2D {
        State2D::from_slice(&self.point)
    }
    pub fn state_4d(&self) -> State4D {
        State4D::from_slice(&self.point)
    }
}

/// Eigen-structure of the 2D linearization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linearization2D {
    pub trace: f64,
    pub determinant: f64,
    pub discriminant: f64,
    pub eigenvalues: [Complex<f64>; 2],
    pub classification: Classification,
}

/// Eigenvalues of a real 2x2 matrix, cancellation-free for the small root.
pub fn eigenvalues_2x2(m: &Matrix2<f64>) -> (f64, f64, f64, [Complex<f64>; 2]) {
    let tr = m.trace();
    let det = m.determinant();
    let disc = tr * tr - 4.0 * det;
    let eigs = if disc >= 0.0 {
        let sq = disc.sqrt();
        let q = 0.5 * (tr + tr.signum() * sq);
        if q == 0.0 {
            [Complex::new(0.0, 0.0), Complex::new(0.0, 0.0)]
        } else {
            let (a, b) = (q, det / q);
            let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
            [Complex::new(hi, 0.0), Complex::new(lo, 0.0)]
        }
    } else {
        let im = 0.5 * (-disc).sqrt();
        [Complex::new(0.5 * tr, im), Complex::new(0.5 * tr, -im)]
    };
    (tr, det, disc, eigs)
}

fn classify_2x2(tr: f64, det: f64, disc: f64) -> Classification {
    let scale = tr * tr + det.abs();
    if scale == 0.0 || det == 0.0 || disc.abs() <= 1e-12 * scale {
        Classification::Degenerate
    } else if disc < 0.0 {
        Classification::Focus
    } else if det < 0.0 {
        Classification::Saddle
    } else {
        Classification::Node
    }
}

/// Classification from an arbitrary eigenvalue list.
pub fn classify_eigenvalues(eigs: &[Complex<f64>]) -> Classification {
    let scale = eigs.iter().map(|e| e.norm()).fold(0.0, f64::max);
    if scale == 0.0 {
        return Classification::Degenerate;
    }
    let tiny = 1e-12 * scale;
    if eigs.iter().any(|e| e.re.abs() <= tiny) {
        return Classification::Degenerate;
    }
    let pos = eigs.iter().any(|e| e.re > 0.0);
    let neg = eigs.iter().any(|e| e.re < 0.0);
    if pos && neg {
        Classification::Saddle
    } else if eigs.iter().any(|e| e.im.abs() > tiny) {
        Classification::Focus
    } else {
        Classification::Node
    }
}

pub fn linearize_2d(state: State2D, p: &Params2D, j_x: f64, f: f64) -> Result<Linearization2D, ModelError> {
    let m = jacobian_2d(state, p, j_x, f)?;
    let (trace, determinant, discriminant, eigenvalues) = eigenvalues_2x2(&m);
    Ok(Linearization2D {
        trace,
        determinant,
        discriminant,
        eigenvalues,
        classification: classify_2x2(trace, determinant, discriminant),
    })
}

fn residual_2d(s: State2D, j: f64, f: f64, p: &Params2D) -> Result<f64, ModelError> {
    let d = rhs_2d(0.0, s, p, &Control::constant(j), &Signal::constant(f))?;
    Ok((d.x / p.eps_prime).abs().max((d.y * p.eps).abs()))
}

pub fn equilibrium_2d(j: f64, f: f64, p: &Params2D) -> Result<EquilibriumReport, EquilibriumError> {
    p.validate()?;
    if !(f > 0.0) {
        return Err(ModelError::NonPositiveInput(f).into());
    }
    let y0 = p.l + j / f;
    if y0 <= -p.kprime {
        return Err(EquilibriumError::Infeasible("L + J/F <= -k'".into()));
    }
    let s = j / p.c + y0 / (p.kprime + y0);
    if s >= 1.0 {
        return Err(EquilibriumError::Infeasible("J/C + y0/(k'+y0) >= 1".into()));
    }
    let x0 = p.k * s / (1.0 - s);
    let state = State2D::new(x0, y0);
    let feasible = x0 >= 0.0 && y0 >= 0.0;
    let lin = linearize_2d(state, p, 0.0, f)?;
    Ok(EquilibriumReport {
        point: vec![x0, y0],
        residual_norm: residual_2d(state, j, f, p)?,
        eigenvalues: lin.eigenvalues.iter().map(|&e| e.into()).collect(),
        classification: lin.classification,
        stable: lin.eigenvalues.iter().all(|e| e.re < 0.0),
        feasible,
    })
}

/// Re-linearizes a 2D equilibrium with state coupling `j_x`.
pub fn classify_2d(report: &EquilibriumReport, p: &Params2D, j_x: f64, f: f64) -> Result<Linearization2D, ModelError> {
    linearize_2d(report.state_2d(), p, j_x, f)
}

fn fraction_to_concentration(frac: f64, k: f64) -> f64 {
    k * frac / (1.0 - frac)
}

/// Control combinations that govern the 4D stationary point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Combinations4D {
    pub total: f64,
    /// `(Ca J2 - (C2+Ca) S) / D`
    pub x_combination: f64,
    /// `(C J2 + C2 S) / D`
    pub v_combination: f64,
}

pub fn combinations_4d(j0: f64, j1: f64, j2: f64, p: &Params4D) -> Combinations4D {
    let c = p.base.c;
    let d = c * p.c2 + c * p.ca + p.c2 * p.ca;
    let s = j0 + j1 + j2;
    Combinations4D {
        total: s,
        x_combination: (p.ca * j2 - (p.c2 + p.ca) * s) / d,
        v_combination: (c * j2 + p.c2 * s) / d,
    }
}

fn residual_4d(s: State4D, js: [f64; 3], f: f64, p: &Params4D) -> Result<f64, ModelError> {
    let controls = js.map(Control::constant);
    let d = rhs_4d(0.0, s, p, &controls, &Signal::constant(f))?;
    let ep = p.base.eps_prime;
    Ok([d.x / ep, d.u / ep, d.v / ep, d.y * p.base.eps]
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs())))
}

pub fn equilibrium_4d(j0: f64, j1: f64, j2: f64, f: f64, p: &Params4D) -> Result<EquilibriumReport, EquilibriumError> {
    p.validate()?;
    if !(f > 0.0) {
        return Err(ModelError::NonPositiveInput(f).into());
    }
    let b = &p.base;
    let comb = combinations_4d(j0, j1, j2, p);
    let y0 = b.l + comb.total / f;
    if y0 <= -b.kprime {
        return Err(EquilibriumError::Infeasible("L + (J0+J1+J2)/F <= -k'".into()));
    }
    let frac_y = y0 / (b.kprime + y0);
    let frac_x = frac_y - comb.x_combination;
    let frac_v = frac_y + comb.v_combination;
    let frac_u = frac_x + j1 / p.c1;
    for (name, frac) in [
        ("y0/(k'+y0)", frac_y),
        ("x0/(k+x0)", frac_x),
        ("u0/(kn+u0)", frac_u),
        ("v0/(ka+v0)", frac_v),
    ] {
        if frac >= 1.0 {
            return Err(EquilibriumError::Infeasible(format!("{name} >= 1")));
        }
    }
    let state = State4D::new(
        fraction_to_concentration(frac_x, b.k),
        fraction_to_concentration(frac_u, p.kn),
        fraction_to_concentration(frac_v, p.ka),
        y0,
    );
    let feasible = [frac_x, frac_u, frac_v, frac_y].iter().all(|&q| q > 0.0);
    let jac = jacobian_4d(state, p, [0.0; 3], f)?;
    let eigs: Vec<Complex<f64>> = jac.complex_eigenvalues().iter().copied().collect();
    Ok(EquilibriumReport {
        point: vec![state.x, state.u, state.v, state.y],
        residual_norm: residual_4d(state, [j0, j1, j2], f, p)?,
        classification: classify_eigenvalues(&eigs),
        stable: eigs.iter().all(|e| e.re < 0.0),
        eigenvalues: eigs.into_iter().map(Eigenvalue::from).collect(),
        feasible,
    })
}

/// Outcome of [`newton_equilibrium`].
#[derive(Debug, Clone, PartialEq)]
pub struct NewtonSolution {
    pub state: DVector<f64>,
    pub iterations: usize,
    pub residual: f64,
}

/// Damped Newton on `row_scale .* f(t, s) = 0`, with backtracking that keeps
/// the iterate inside the system's domain. Converged when the max-norm of the
/// scaled residual is at most `tol`.
pub fn newton_equilibrium<S: OdeSystem + ?Sized>(
    sys: &S,
    t: f64,
    row_scale: &[f64],
    guess: &DVector<f64>,
    tol: f64,
) -> Result<NewtonSolution, EquilibriumError> {
    const MAX_ITER: usize = 200;
    let w = DVector::from_column_slice(row_scale);
    let scaled = |s: &DVector<f64>| -> Result<DVector<f64>, ModelError> { Ok(sys.rhs(t, s)?.component_mul(&w)) };
    let inf = |v: &DVector<f64>| v.amax();

    let mut s = guess.clone();
    let mut r = scaled(&s)?;
    let mut rn = inf(&r);
    if rn <= tol {
        return Ok(NewtonSolution {
            state: s,
            iterations: 0,
            residual: rn,
        });
    }
    for it in 1..=MAX_ITER {
        let jac = sys.jacobian(t, &s)?;
        let mut jw = jac;
        for (i, mut row) in jw.row_iter_mut().enumerate() {
            row *= w[i];
        }
        let delta = jw
            .lu()
            .solve(&(-&r))
            .filter(|d| d.iter().all(|v| v.is_finite()))
            .ok_or_else(|| EquilibriumError::SingularJacobian(s.as_slice().to_vec()))?;
        let r2 = r.norm();
        let mut lambda = 1.0;
        loop {
            let trial = &s + &delta * lambda;
            if sys.in_domain(&trial) {
                if let Ok(rt) = scaled(&trial) {
                    if rt.norm() < (1.0 - 1e-4 * lambda) * r2 || inf(&rt) <= tol {
                        s = trial;
                        r = rt;
                        break;
                    }
                }
            }
            lambda *= 0.5;
            if lambda < 1e-12 {
                return Err(EquilibriumError::NonConvergence {
                    iterations: it,
                    residual: rn,
                });
            }
        }
        rn = inf(&r);
        if rn <= tol {
            return Ok(NewtonSolution {
                state: s,
                iterations: it,
                residual: rn,
            });
        }
    }
    Err(EquilibriumError::NonConvergence {
        iterations: MAX_ITER,
        residual: rn,
    })
}

/// Residual weights that strip the time-scale factors: `1/eps'` on slow rows, `eps` on the fast row.
pub fn row_scale_2d(p: &Params2D) -> [f64; 2] {
    [1.0 / p.eps_prime, p.eps]
}

pub fn row_scale_4d(p: &Params4D) -> [f64; 4] {
    let ep = p.base.eps_prime;
    [1.0 / ep, 1.0 / ep, 1.0 / ep, p.base.eps]
}

/// Dense linearization of the 4D model at a state (for reporting).
pub fn jacobian_4d_dense(s: State4D, p: &Params4D, f: f64) -> Result<DMatrix<f64>, ModelError> {
    let m: Matrix4<f64> = jacobian_4d(s, p, [0.0; 3], f)?;
    Ok(DMatrix::from_iterator(4, 4, m.iter().copied()))
}
