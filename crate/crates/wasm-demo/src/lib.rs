//! Browser front end for `lactodyn`. The three operations are plain Rust
//! functions returning flat `Vec<f64>` series so they can be tested natively;
//! the `#[wasm_bindgen]` exports only wrap them.

use lactodyn::integrate;
use lactodyn::manifold::{manifold_point_2d, phi_2d_frozen};
use lactodyn::scenarios::{default_scenario, run_buffering, run_dip, ControlSpec, SignalSpec};
use lactodyn::signals::DipControlSpec;
use lactodyn::{equilibria::equilibrium_2d, Control, IntegratorConfig, Params2D, Signal, System2D};
use wasm_bindgen::prelude::*;

/// Samples kept for plotting.
const PLOT_POINTS: usize = 1500;

#[wasm_bindgen(getter_with_clone)]
#[derive(Debug, Clone)]
pub struct DipView {
    pub t: Vec<f64>,
    pub x: Vec<f64>,
    /// Frozen equilibrium x0(F(t), J(t)) that x chases.
    pub target: Vec<f64>,
    pub baseline: f64,
    pub min_x: f64,
    pub t_min: f64,
    pub overshoot_max: f64,
    pub t_overshoot: f64,
    /// NaN when x never settles.
    pub t_return: f64,
    pub ordered: bool,
}

/// Default dip protocol with the F boost, the two control levels and eps adjustable.
pub fn dip_view(boost: f64, j_raised: f64, j_lowered: f64, eps: f64) -> Result<DipView, String> {
    let mut cfg = default_scenario("dip").map_err(|e| e.to_string())?;
    cfg.params.base.eps = eps;
    if let SignalSpec::Trapezoid { spec, .. } = &mut cfg.input {
        spec.boost_fraction = boost;
    }
    cfg.controls = vec![ControlSpec::open_loop(SignalSpec::Dip {
        spec: DipControlSpec {
            j0: 0.2,
            j1: j_raised,
            jm1: j_lowered,
            times: [60.0, 70.0, 110.0, 120.0, 150.0, 160.0],
        },
    })];
    cfg.run.samples = PLOT_POINTS;
    let out = run_dip(&cfg).map_err(|e| e.to_string())?;
    let r = &out.report;
    Ok(DipView {
        t: out.target.iter().map(|p| p[0]).collect(),
        x: out.target.iter().map(|p| p[1]).collect(),
        target: out.target.iter().map(|p| p[2]).collect(),
        baseline: r.baseline_x,
        min_x: r.min_x,
        t_min: r.t_min,
        overshoot_max: r.overshoot_max,
        t_overshoot: r.t_overshoot,
        t_return: r.t_return.unwrap_or(f64::NAN),
        ordered: r.ordered(),
    })
}

#[wasm_bindgen(getter_with_clone)]
#[derive(Debug, Clone)]
pub struct PhaseView {
    /// Critical manifold `y = phi(x)` at the frozen F.
    pub manifold_x: Vec<f64>,
    pub manifold_y: Vec<f64>,
    pub traj_x: Vec<f64>,
    pub traj_y: Vec<f64>,
    pub eq_x: f64,
    pub eq_y: f64,
    /// `-g'_y` at the equilibrium: how fast the fast variable collapses.
    pub attraction: f64,
}

/// Trajectory from `(x_start, y_start)` under constant inputs, over the critical manifold.
pub fn phase_view(f: f64, j: f64, x_start: f64, y_start: f64, eps: f64) -> Result<PhaseView, String> {
    let params = Params2D {
        eps,
        ..Params2D::default()
    };
    let eq = equilibrium_2d(j, f, &params).map_err(|e| e.to_string())?;
    let x_hi = 2.0 * eq.x().max(x_start);
    let (mut manifold_x, mut manifold_y) = (Vec::new(), Vec::new());
    for i in 1..=200 {
        let x = x_hi * f64::from(i) / 200.0;
        manifold_x.push(x);
        manifold_y.push(phi_2d_frozen(x, f, &params).map_err(|e| e.to_string())?);
    }
    let sys = System2D {
        params,
        control: Control::constant(j),
        input: Signal::constant(f),
    };
    let start = lactodyn::State2D::new(x_start, y_start).to_vector();
    // about ten slow time constants at the default parameters
    let horizon = 3000.0;
    let traj = integrate(&sys, 0.0, horizon, &start, &IntegratorConfig::default()).map_err(|e| e.to_string())?;
    let samples = traj.resample(PLOT_POINTS);
    let attraction = -manifold_point_2d(eq.x(), f, &params).map_err(|e| e.to_string())?.gprime_y;
    Ok(PhaseView {
        manifold_x,
        manifold_y,
        traj_x: samples.iter().map(|(_, s)| s[0]).collect(),
        traj_y: samples.iter().map(|(_, s)| s[1]).collect(),
        eq_x: eq.x(),
        eq_y: eq.y(),
        attraction,
    })
}

#[wasm_bindgen(getter_with_clone)]
#[derive(Debug, Clone)]
pub struct BufferView {
    /// Stroboscopic `x(nT)`, `n = 0..=n_periods`.
    pub section_x: Vec<f64>,
    /// `log10 |s_n - s_{n-1}|`.
    pub log_displacement: Vec<f64>,
    pub locked: bool,
    pub fixed_x: f64,
    pub fixed_y: f64,
    pub multiplier: f64,
}

/// Repeated pulses with period `period`, F boost `boost` and state coupling `coupling`.
pub fn buffer_view(period: f64, boost: f64, coupling: f64, n_periods: usize) -> Result<BufferView, String> {
    let mut cfg = default_scenario("buffer").map_err(|e| e.to_string())?;
    if let SignalSpec::Trapezoid { spec, period: p } = &mut cfg.input {
        spec.boost_fraction = boost;
        *p = Some(period);
    }
    if let SignalSpec::Trapezoid { period: p, .. } = &mut cfg.controls[0].signal {
        *p = Some(period);
    }
    cfg.controls[0].coupling = coupling;
    cfg.run.n_periods = n_periods;
    let out = run_buffering(&cfg).map_err(|e| e.to_string())?;
    let (fixed_x, fixed_y, multiplier) = match &out.orbit {
        Ok(o) => (o.fixed_point[0], o.fixed_point[1], o.max_multiplier_modulus),
        Err(_) => (f64::NAN, f64::NAN, f64::NAN),
    };
    Ok(BufferView {
        section_x: out.report.section.iter().map(|s| s[0]).collect(),
        log_displacement: out.report.displacements.iter().map(|d| d.max(1e-16).log10()).collect(),
        locked: out.report.locked,
        fixed_x,
        fixed_y,
        multiplier,
    })
}

#[wasm_bindgen]
pub fn dip(boost: f64, j_raised: f64, j_lowered: f64, eps: f64) -> Result<DipView, JsError> {
    dip_view(boost, j_raised, j_lowered, eps).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn phase(f: f64, j: f64, x_start: f64, y_start: f64, eps: f64) -> Result<PhaseView, JsError> {
    phase_view(f, j, x_start, y_start, eps).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn buffer(period: f64, boost: f64, coupling: f64, n_periods: usize) -> Result<BufferView, JsError> {
    buffer_view(period, boost, coupling, n_periods).map_err(|e| JsError::new(&e))
}
