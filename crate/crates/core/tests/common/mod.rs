#![allow(dead_code)]

use lactodyn::dynamics::ModelError;
use lactodyn::signals::{make_dip_control, make_trapezoid, DipControlSpec, TrapezoidSpec};
use lactodyn::{OdeSystem, Params2D, Params4D, Signal};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn log_uniform(r: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    (r.gen_range(lo.ln()..hi.ln())).exp()
}

/// 2D parameters with every constant log-uniform in [1e-2, 1e2], plus (J, F).
pub fn draw_2d(r: &mut impl Rng) -> (Params2D, f64, f64) {
    let mut g = || log_uniform(r, 1e-2, 1e2);
    let p = Params2D {
        c: g(),
        k: g(),
        kprime: g(),
        l: g(),
        eps: 1e-2,
        eps_prime: 1e-1,
    };
    let j = g();
    let f = g();
    (p, j, f)
}

pub fn draw_4d(r: &mut impl Rng) -> (Params4D, [f64; 3], f64) {
    let mut g = || log_uniform(r, 1e-2, 1e2);
    let base = Params2D {
        c: g(),
        k: g(),
        kprime: g(),
        l: g(),
        eps: 1e-2,
        eps_prime: 1e-1,
    };
    let p = Params4D {
        base,
        c1: g(),
        c2: g(),
        ca: g(),
        kn: g(),
        ka: g(),
    };
    let j = [g(), g(), g()];
    let f = g();
    (p, j, f)
}

/// Independent feasibility test for the 2D closed form: J/C + y0/(k'+y0) < 1.
pub fn feasible_2d(p: &Params2D, j: f64, f: f64) -> bool {
    let y0 = p.l + j / f;
    j / p.c + y0 / (p.kprime + y0) < 1.0
}

/// `y' = A y` with known matrix exponential, for integrator order checks.
pub struct Linear {
    pub a: DMatrix<f64>,
}

impl Linear {
    /// Lightly damped rotation: eigenvalues `-0.1 +- 2i`.
    pub fn spiral() -> Self {
        Self {
            a: DMatrix::from_row_slice(2, 2, &[-0.1, 2.0, -2.0, -0.1]),
        }
    }

    pub fn exact(&self, y0: &DVector<f64>, t: f64) -> DVector<f64> {
        let (c, s) = ((2.0 * t).cos(), (2.0 * t).sin());
        let m = DMatrix::from_row_slice(2, 2, &[c, s, -s, c]) * (-0.1 * t).exp();
        m * y0
    }
}

impl OdeSystem for Linear {
    fn dim(&self) -> usize {
        self.a.nrows()
    }
    fn rhs(&self, _t: f64, y: &DVector<f64>) -> Result<DVector<f64>, ModelError> {
        Ok(&self.a * y)
    }
    fn jacobian(&self, _t: f64, _y: &DVector<f64>) -> Result<DMatrix<f64>, ModelError> {
        Ok(self.a.clone())
    }
}

/// The signals used across the averaging and periodicity checks, each with a
/// horizon whose 10^6-point grid contains every corner (so the trapezoid
/// reference is exact up to rounding).
pub fn signal_corpus() -> Vec<(&'static str, Signal, f64)> {
    let trap = TrapezoidSpec {
        base: 0.5,
        boost_fraction: 0.5,
        t_start: 10.0,
        t_rise_end: 20.0,
        t_fall_start: 80.0,
        t_end: 90.0,
    };
    let pulse = TrapezoidSpec {
        base: 0.5,
        boost_fraction: 0.5,
        t_start: 0.0,
        t_rise_end: 1.0,
        t_fall_start: 5.0,
        t_end: 6.0,
    };
    let dip = DipControlSpec {
        j0: 0.2,
        j1: 0.3,
        jm1: 0.1,
        times: [60.0, 70.0, 110.0, 120.0, 150.0, 160.0],
    };
    let periodic_pulse = Signal::new(
        &[(0.0, 0.5), (1.0, 0.75), (5.0, 0.75), (6.0, 0.5), (20.0, 0.5)],
        Some(20.0),
    )
    .unwrap();
    let saw = Signal::new(&[(0.0, 1.0), (0.3, 3.0), (1.7, -0.5), (2.5, 1.0)], Some(2.5)).unwrap();
    vec![
        ("constant", Signal::constant(0.7), 50.0),
        ("trapezoid", make_trapezoid(&trap).unwrap(), 200.0),
        ("pulse", make_trapezoid(&pulse).unwrap(), 20.0),
        ("dip_control", make_dip_control(&dip).unwrap(), 400.0),
        ("periodic_pulse", periodic_pulse.clone(), 20.0),
        ("periodic_pulse_partial", periodic_pulse, 125.0),
        ("sawtooth", saw, 10.0),
    ]
}

/// Composite trapezoid rule with `n` subintervals and Neumaier-compensated summation.
pub fn dense_trapezoid(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    let mut add = |v: f64| {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    };
    add(0.5 * f(a));
    add(0.5 * f(b));
    for i in 1..n {
        add(f(a + i as f64 * h));
    }
    (sum + comp) * h
}

/// Relative difference with an absolute floor of 1.
pub fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}
