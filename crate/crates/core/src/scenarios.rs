//! Canonical experiments: the dip protocol, periodic buffering, and 4D
//! quasi-stationary sensitivity.

use crate::averaging::{predict_periodic_orbit, refine_periodic_orbit_with, AveragingReport, REFINE_MAX_ITER, PeriodicOrbitReport};
use crate::dynamics::{Params2D, Params4D, State2D, System2D, System4D};
use crate::equilibria::{
    combinations_4d, equilibrium_2d, equilibrium_4d, newton_equilibrium, row_scale_2d, row_scale_4d, EquilibriumError,
};
use crate::integrator::{find_event, integrate, IntegrationError, IntegratorConfig, OdeSystem, Trajectory};
use crate::manifold::{manifold_distance_2d, ManifoldError};
use crate::signals::{fmt17, make_dip_control, make_trapezoid, Control, DipControlSpec, Signal, SignalError, TrapezoidSpec};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScenarioError {
    #[error("unknown scenario {0:?} (expected dip, buffer or sensitivity)")]
    UnknownScenario(String),
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Equilibrium(#[from] EquilibriumError),
    #[error(transparent)]
    Integration(#[from] IntegrationError),
    #[error(transparent)]
    Manifold(#[from] ManifoldError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "2d")]
    TwoD,
    #[serde(rename = "4d")]
    FourD,
}

impl std::str::FromStr for ModelKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "2d" => Ok(Self::TwoD),
            "4d" => Ok(Self::FourD),
            other => Err(format!("unknown model {other:?} (expected 2d or 4d)")),
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::TwoD => "2d",
            Self::FourD => "4d",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScenarioKind {
    Dip,
    Buffer,
    Sensitivity,
    Custom,
}

impl std::str::FromStr for ScenarioKind {
    type Err = ScenarioError;
    fn from_str(s: &str) -> Result<Self, ScenarioError> {
        match s {
            "dip" => Ok(Self::Dip),
            "buffer" => Ok(Self::Buffer),
            "sensitivity" => Ok(Self::Sensitivity),
            "custom" => Ok(Self::Custom),
            other => Err(ScenarioError::UnknownScenario(other.to_string())),
        }
    }
}

impl std::fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Dip => "dip",
            Self::Buffer => "buffer",
            Self::Sensitivity => "sensitivity",
            Self::Custom => "custom",
        })
    }
}

/// Declarative description of a signal, turned into a [`Signal`] by [`SignalSpec::build`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SignalSpec {
    Constant {
        value: f64,
    },
    /// Single pulse, or a repeated one when `period` is set.
    Trapezoid {
        spec: TrapezoidSpec,
        period: Option<f64>,
    },
    Dip {
        spec: DipControlSpec,
    },
    Points {
        points: Vec<(f64, f64)>,
        period: Option<f64>,
    },
}

impl SignalSpec {
    pub fn build(&self) -> Result<Signal, SignalError> {
        match self {
            Self::Constant { value } => Ok(Signal::constant(*value)),
            Self::Trapezoid { spec, period: None } => make_trapezoid(spec),
            Self::Trapezoid {
                spec,
                period: Some(period),
            } => {
                if spec.t_start < 0.0 || spec.t_end > *period {
                    return Err(SignalError::Trapezoid(format!(
                        "periodic pulse [{}, {}] must fit inside [0, {period}]",
                        spec.t_start, spec.t_end
                    )));
                }
                let single = make_trapezoid(spec)?;
                if single.is_constant() {
                    return Ok(single);
                }
                let mut pts = single.points();
                if spec.t_start > 0.0 {
                    pts.insert(0, (0.0, spec.base));
                }
                if spec.t_end < *period {
                    pts.push((*period, spec.base));
                }
                Signal::new(&pts, Some(*period))
            }
            Self::Dip { spec } => make_dip_control(spec),
            Self::Points { points, period } => Signal::new(points, *period),
        }
    }

    pub fn period(&self) -> Option<f64> {
        match self {
            Self::Trapezoid { period, .. } | Self::Points { period, .. } => *period,
            _ => None,
        }
    }
}

/// A control `J(t) + coupling (x - x_ref)`; `x_ref = None` means the frozen
/// equilibrium at the initial input levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlSpec {
    pub signal: SignalSpec,
    pub coupling: f64,
    pub x_ref: Option<f64>,
}

impl ControlSpec {
    pub fn open_loop(signal: SignalSpec) -> Self {
        Self {
            signal,
            coupling: 0.0,
            x_ref: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub horizon: f64,
    /// Rows in exported trajectory CSVs and samples for the chase statistic.
    pub samples: usize,
    pub n_periods: usize,
    /// Search interval for the averaged root.
    pub search_lo: f64,
    pub search_hi: f64,
    /// Finite-difference step for the sensitivity table (mM/s).
    pub delta: f64,
    /// Newton iteration cap for the periodic-orbit refinement.
    pub refine_max_iter: usize,
}

impl Default for RunSpec {
    fn default() -> Self {
        Self {
            horizon: 3000.0,
            samples: 3001,
            n_periods: 40,
            search_lo: 0.0,
            search_hi: 50.0,
            delta: 1e-6,
            refine_max_iter: REFINE_MAX_ITER,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectSpec {
    pub dip_depth_fraction: f64,
    pub return_tol: f64,
    /// Minimum excess over baseline counted as an overshoot (mM).
    pub overshoot_min: f64,
    pub lock_threshold: f64,
    pub lock_consecutive: usize,
}

impl Default for DetectSpec {
    fn default() -> Self {
        Self {
            dip_depth_fraction: 0.01,
            return_tol: 1e-4,
            overshoot_min: 1e-4,
            lock_threshold: 1e-8,
            lock_consecutive: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub scenario: ScenarioKind,
    pub model: ModelKind,
    /// 4D parameters; the 2D model uses `params.base`.
    pub params: Params4D,
    pub input: SignalSpec,
    /// One control for 2D, three (`J0`, `J1`, `J2`) for 4D.
    pub controls: Vec<ControlSpec>,
    pub integrator: IntegratorConfig,
    pub run: RunSpec,
    pub detect: DetectSpec,
}

fn trapezoid(base: f64, boost: f64, t: [f64; 4]) -> TrapezoidSpec {
    TrapezoidSpec {
        base,
        boost_fraction: boost,
        t_start: t[0],
        t_rise_end: t[1],
        t_fall_start: t[2],
        t_end: t[3],
    }
}

pub fn default_scenario(name: &str) -> Result<ScenarioConfig, ScenarioError> {
    let kind: ScenarioKind = name.parse()?;
    let base = ScenarioConfig {
        scenario: kind,
        model: ModelKind::TwoD,
        params: Params4D::default(),
        input: SignalSpec::Constant { value: 0.5 },
        controls: vec![ControlSpec::open_loop(SignalSpec::Constant { value: 0.2 })],
        integrator: IntegratorConfig::default(),
        run: RunSpec::default(),
        detect: DetectSpec::default(),
    };
    Ok(match kind {
        ScenarioKind::Dip | ScenarioKind::Custom => ScenarioConfig {
            input: SignalSpec::Trapezoid {
                spec: trapezoid(0.5, 0.5, [10.0, 20.0, 80.0, 90.0]),
                period: None,
            },
            controls: vec![ControlSpec::open_loop(SignalSpec::Dip {
                spec: DipControlSpec {
                    j0: 0.2,
                    j1: 0.3,
                    jm1: 0.1,
                    times: [60.0, 70.0, 110.0, 120.0, 150.0, 160.0],
                },
            })],
            ..base
        },
        ScenarioKind::Buffer => ScenarioConfig {
            input: SignalSpec::Trapezoid {
                spec: trapezoid(0.5, 0.5, [0.0, 1.0, 5.0, 6.0]),
                period: Some(20.0),
            },
            controls: vec![ControlSpec {
                signal: SignalSpec::Trapezoid {
                    spec: trapezoid(0.2, 0.5, [0.0, 1.0, 5.0, 6.0]),
                    period: Some(20.0),
                },
                coupling: -1.0,
                x_ref: None,
            }],
            integrator: IntegratorConfig::with_tolerances(1e-10, 1e-12),
            ..base
        },
        ScenarioKind::Sensitivity => ScenarioConfig {
            model: ModelKind::FourD,
            controls: vec![
                ControlSpec::open_loop(SignalSpec::Constant { value: 0.1 }),
                ControlSpec::open_loop(SignalSpec::Constant { value: 0.05 }),
                ControlSpec::open_loop(SignalSpec::Constant { value: 0.05 }),
            ],
            ..base
        },
    })
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let want = match self.model {
            ModelKind::TwoD => 1,
            ModelKind::FourD => 3,
        };
        if self.controls.len() != want {
            return Err(ScenarioError::Invalid(format!(
                "{} model needs {want} control(s), got {}",
                self.model,
                self.controls.len()
            )));
        }
        match self.model {
            ModelKind::TwoD => self.params.base.validate(),
            ModelKind::FourD => self.params.validate(),
        }
        .map_err(EquilibriumError::from)?;
        if !(self.run.horizon > 0.0) {
            return Err(ScenarioError::Invalid(format!("horizon must be positive, got {}", self.run.horizon)));
        }
        let f = self.input.build()?;
        if !(f.min_value() > 0.0) {
            return Err(ScenarioError::Invalid("input F must stay positive".into()));
        }
        for c in &self.controls {
            c.signal.build()?;
        }
        Ok(())
    }

    /// Common forcing period of the input and the controls, if any signal is periodic.
    pub fn period(&self) -> Result<Option<f64>, ScenarioError> {
        let mut period = None;
        for p in std::iter::once(self.input.period()).chain(self.controls.iter().map(|c| c.signal.period())).flatten() {
            match period {
                None => period = Some(p),
                Some(q) if q == p => {}
                Some(q) => return Err(ScenarioError::Invalid(format!("signal periods differ ({q} vs {p})"))),
            }
        }
        Ok(period)
    }

    fn control_2d(&self, f0: f64, j0: f64) -> Result<Control, ScenarioError> {
        let spec = &self.controls[0];
        let signal = spec.signal.build()?;
        let x_ref = match spec.x_ref {
            Some(x) => x,
            None if spec.coupling == 0.0 => 0.0,
            None => equilibrium_2d(j0, f0, &self.params.base)?.x(),
        };
        Ok(Control {
            signal,
            coupling: spec.coupling,
            x_ref,
        })
    }

    pub fn system_2d(&self) -> Result<System2D, ScenarioError> {
        self.validate()?;
        if self.model != ModelKind::TwoD {
            return Err(ScenarioError::Invalid("expected a 2d model".into()));
        }
        let input = self.input.build()?;
        let j0 = self.controls[0].signal.build()?.eval(0.0);
        let control = self.control_2d(input.eval(0.0), j0)?;
        Ok(System2D {
            params: self.params.base,
            control,
            input,
        })
    }

    pub fn system_4d(&self) -> Result<System4D, ScenarioError> {
        self.validate()?;
        if self.model != ModelKind::FourD {
            return Err(ScenarioError::Invalid("expected a 4d model".into()));
        }
        let input = self.input.build()?;
        let signals: Vec<Signal> = self.controls.iter().map(|c| c.signal.build()).collect::<Result<_, _>>()?;
        let levels = [signals[0].eval(0.0), signals[1].eval(0.0), signals[2].eval(0.0)];
        let needs_ref = self.controls.iter().any(|c| c.x_ref.is_none() && c.coupling != 0.0);
        let auto_ref = if needs_ref {
            equilibrium_4d(levels[0], levels[1], levels[2], input.eval(0.0), &self.params)?.x()
        } else {
            0.0
        };
        let mut controls = signals.into_iter().zip(&self.controls).map(|(signal, spec)| Control {
            signal,
            coupling: spec.coupling,
            x_ref: spec.x_ref.unwrap_or(auto_ref),
        });
        Ok(System4D {
            params: self.params,
            controls: [controls.next().unwrap(), controls.next().unwrap(), controls.next().unwrap()],
            input,
        })
    }
}

/// Stationary state of the 2D model with inputs frozen at `(f_val, j_val)`
/// and the control's state coupling kept.
pub fn frozen_equilibrium_2d(p: &Params2D, control: &Control, f_val: f64, j_val: f64) -> Result<State2D, EquilibriumError> {
    let open = equilibrium_2d(j_val, f_val, p)?;
    if control.coupling == 0.0 || open.x() == control.x_ref {
        return Ok(open.state_2d());
    }
    let sys = System2D {
        params: *p,
        control: Control {
            signal: Signal::constant(j_val),
            coupling: control.coupling,
            x_ref: control.x_ref,
        },
        input: Signal::constant(f_val),
    };
    let sol = newton_equilibrium(&sys, 0.0, &row_scale_2d(p), &open.state_2d().to_vector(), 1e-13)?;
    Ok(State2D::from_slice(sol.state.as_slice()))
}

/// Frozen-input equilibrium of the 4D model with the given control levels.
pub fn frozen_equilibrium_4d(sys: &System4D, f_val: f64, levels: [f64; 3]) -> Result<DVector<f64>, EquilibriumError> {
    let open = equilibrium_4d(levels[0], levels[1], levels[2], f_val, &sys.params)?;
    let guess = DVector::from_column_slice(&open.point);
    if sys.controls.iter().all(|c| c.coupling == 0.0 || c.x_ref == open.x()) {
        return Ok(guess);
    }
    let frozen = System4D {
        params: sys.params,
        controls: [0, 1, 2].map(|i| Control {
            signal: Signal::constant(levels[i]),
            coupling: sys.controls[i].coupling,
            x_ref: sys.controls[i].x_ref,
        }),
        input: Signal::constant(f_val),
    };
    Ok(newton_equilibrium(&frozen, 0.0, &row_scale_4d(&sys.params), &guess, 1e-13)?.state)
}

/// Integrates the configured model from the frozen equilibrium at `t = 0`.
pub fn simulate(cfg: &ScenarioConfig) -> Result<Trajectory, ScenarioError> {
    match cfg.model {
        ModelKind::TwoD => {
            let sys = cfg.system_2d()?;
            let s0 = frozen_equilibrium_2d(&sys.params, &sys.control, sys.input.eval(0.0), sys.control.signal.eval(0.0))?;
            Ok(integrate(&sys, 0.0, cfg.run.horizon, &s0.to_vector(), &cfg.integrator)?)
        }
        ModelKind::FourD => {
            let sys = cfg.system_4d()?;
            let levels = [0, 1, 2].map(|i| sys.controls[i].signal.eval(0.0));
            let s0 = frozen_equilibrium_4d(&sys, sys.input.eval(0.0), levels)?;
            Ok(integrate(&sys, 0.0, cfg.run.horizon, &s0, &cfg.integrator)?)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DipReport {
    pub baseline_x: f64,
    pub min_x: f64,
    pub t_min: f64,
    pub dip_depth: f64,
    pub dip_detected: bool,
    pub overshoot_max: f64,
    pub t_overshoot: f64,
    pub overshoot_detected: bool,
    pub final_deviation: f64,
    pub returned_to_baseline: bool,
    /// First sample time after which `x` stays within the return tolerance.
    pub t_return: Option<f64>,
    /// Share of post-transient samples where `dx/dt` points toward the frozen equilibrium.
    pub chase_fraction: f64,
    pub t_transient: f64,
}

impl DipReport {
    /// Dip, then overshoot, then return, in that order.
    pub fn ordered(&self) -> bool {
        self.dip_detected
            && self.overshoot_detected
            && self.returned_to_baseline
            && self.t_min < self.t_overshoot
            && self.t_return.is_some_and(|t| t > self.t_overshoot)
    }
}

#[derive(Debug, Clone)]
pub struct DipOutcome {
    pub report: DipReport,
    pub trajectory: Trajectory,
    /// `(t, x(t), x0(F(t), J(t)))` on the sample grid.
    pub target: Vec<[f64; 3]>,
}

fn slow_rate(sys: &System2D, t: f64, s: &DVector<f64>) -> Result<f64, IntegrationError> {
    sys.rhs(t, s)
        .map(|d| d[0])
        .map_err(|e| IntegrationError::PoleExit { t, source: e, state: s.as_slice().to_vec() })
}

/// Extremum of `x` near stored step `i`, refined to the zero of `dx/dt`.
fn refine_extremum(sys: &System2D, traj: &Trajectory, i: usize) -> (f64, f64) {
    let n = traj.len();
    let lo = traj.times[i.saturating_sub(1)];
    let hi = traj.times[(i + 1).min(n - 1)];
    let fallback = (traj.times[i], traj.states[i][0]);
    if i == 0 || i + 1 >= n {
        return fallback;
    }
    match find_event(traj, |t, s| slow_rate(sys, t, s).unwrap_or(0.0), Some((lo, hi))) {
        Ok(t) => match traj.dense_eval(t) {
            Ok(s) => (t, s[0]),
            Err(_) => fallback,
        },
        Err(_) => fallback,
    }
}

pub fn run_dip(cfg: &ScenarioConfig) -> Result<DipOutcome, ScenarioError> {
    let sys = cfg.system_2d()?;
    let traj = simulate(cfg)?;
    let det = &cfg.detect;
    let baseline = traj.states[0][0];

    let (i_min, _) = traj
        .states
        .iter()
        .enumerate()
        .min_by(|a, b| a.1[0].total_cmp(&b.1[0]))
        .unwrap();
    let (t_min, min_x) = refine_extremum(&sys, &traj, i_min);
    let (i_max, _) = traj
        .states
        .iter()
        .enumerate()
        .skip(i_min)
        .max_by(|a, b| a.1[0].total_cmp(&b.1[0]))
        .unwrap();
    let (t_overshoot, overshoot_max) = refine_extremum(&sys, &traj, i_max);
    let final_deviation = traj.last_state()[0] - baseline;

    let dist = manifold_distance_2d(&traj, &sys.params, &sys.input, None)?;
    let samples = traj.resample(cfg.run.samples.max(2));
    let mut target = Vec::with_capacity(samples.len());
    let (mut agree, mut total) = (0usize, 0usize);
    for (t, s) in &samples {
        let j_val = sys.control.signal.eval(*t);
        let x_star = frozen_equilibrium_2d(&sys.params, &sys.control, sys.input.eval(*t), j_val)?.x;
        target.push([*t, s[0], x_star]);
        if *t < dist.t_transient {
            continue;
        }
        total += 1;
        let gap = x_star - s[0];
        let rate = slow_rate(&sys, *t, s)?;
        // at rest both vanish; count that as agreement
        if gap.abs() <= 1e-9 * x_star.abs() || gap.signum() == rate.signum() {
            agree += 1;
        }
    }

    let t_return = samples
        .iter()
        .rposition(|(_, s)| (s[0] - baseline).abs() > det.return_tol)
        .and_then(|i| samples.get(i + 1))
        .map(|(t, _)| *t);

    let report = DipReport {
        baseline_x: baseline,
        min_x,
        t_min,
        dip_depth: baseline - min_x,
        dip_detected: baseline - min_x >= det.dip_depth_fraction * baseline,
        overshoot_max,
        t_overshoot,
        overshoot_detected: overshoot_max - baseline >= det.overshoot_min && t_overshoot > t_min,
        final_deviation,
        returned_to_baseline: final_deviation.abs() <= det.return_tol,
        t_return,
        chase_fraction: if total == 0 { 1.0 } else { agree as f64 / total as f64 },
        t_transient: dist.t_transient,
    };
    Ok(DipOutcome {
        report,
        trajectory: traj,
        target,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BufferingReport {
    pub period: f64,
    pub n_periods: usize,
    /// `[min x, max x, min y, max y]` for each period.
    pub extrema: Vec<[f64; 4]>,
    /// Section states at `t = nT`, `n = 0..=n_periods`.
    pub section: Vec<Vec<f64>>,
    /// `|s_n - s_{n-1}|` for `n = 1..=n_periods`.
    pub displacements: Vec<f64>,
    pub contraction_ratio: f64,
    pub locked: bool,
    /// First period of the run of sub-threshold displacements.
    pub lock_period: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct BufferingOutcome {
    pub report: BufferingReport,
    pub averaging: Result<AveragingReport, String>,
    pub orbit: Result<PeriodicOrbitReport, String>,
    /// Componentwise max of `|s_N - fixed point|` when shooting succeeded.
    pub agreement: Option<f64>,
}

/// Displacements below this are treated as converged when estimating the contraction ratio.
pub const DISPLACEMENT_NOISE_FLOOR: f64 = 1e-10;

fn contraction_ratio(displacements: &[f64]) -> f64 {
    let ratios: Vec<f64> = displacements
        .windows(2)
        .skip(2)
        .filter(|w| w[1] > DISPLACEMENT_NOISE_FLOOR && w[0] > 0.0)
        .map(|w| w[1] / w[0])
        .collect();
    if ratios.is_empty() {
        return 0.0;
    }
    (ratios.iter().map(|r| r.ln()).sum::<f64>() / ratios.len() as f64).exp()
}

pub fn run_buffering(cfg: &ScenarioConfig) -> Result<BufferingOutcome, ScenarioError> {
    let sys = cfg.system_2d()?;
    let period = cfg
        .period()?
        .ok_or_else(|| ScenarioError::Invalid("buffering needs a periodic input".into()))?;
    let det = &cfg.detect;
    let n_periods = cfg.run.n_periods.max(1);

    let f_mean = sys.input.average(period);
    let j_mean = sys.control.signal.average(period);
    let s0 = frozen_equilibrium_2d(&sys.params, &sys.control, f_mean, j_mean)?.to_vector();

    let mut section = vec![s0.as_slice().to_vec()];
    let mut extrema = Vec::with_capacity(n_periods);
    let mut displacements = Vec::with_capacity(n_periods);
    let mut s = s0;
    for n in 0..n_periods {
        let t0 = n as f64 * period;
        let traj = integrate(&sys, t0, t0 + period, &s, &cfg.integrator)?;
        let mut e = [f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY];
        for st in &traj.states {
            e[0] = e[0].min(st[0]);
            e[1] = e[1].max(st[0]);
            e[2] = e[2].min(st[1]);
            e[3] = e[3].max(st[1]);
        }
        extrema.push(e);
        let next = traj.last_state().clone();
        displacements.push((&next - &s).norm());
        section.push(next.as_slice().to_vec());
        s = next;
    }

    let need = det.lock_consecutive.max(1);
    let lock_period = displacements
        .windows(need)
        .position(|w| w.iter().all(|&d| d <= det.lock_threshold))
        .map(|i| i + 1);
    let ratio = contraction_ratio(&displacements);
    let report = BufferingReport {
        period,
        n_periods,
        extrema,
        section,
        displacements,
        contraction_ratio: ratio,
        locked: lock_period.is_some() && ratio < 1.0,
        lock_period,
    };

    let averaging = predict_periodic_orbit(&sys, period, (cfg.run.search_lo, cfg.run.search_hi), &cfg.integrator);
    let guess = match &averaging {
        Ok(a) => a.predicted_initial.clone(),
        Err(_) => s.as_slice().to_vec(),
    };
    let orbit = refine_periodic_orbit_with(&sys, &guess, period, &cfg.integrator, cfg.run.refine_max_iter);
    let agreement = orbit.as_ref().ok().map(|o| {
        o.fixed_point
            .iter()
            .zip(s.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    });
    Ok(BufferingOutcome {
        report,
        averaging: averaging.map_err(|e| e.to_string()),
        orbit: orbit.map_err(|e| e.to_string()),
        agreement,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Claim {
    /// Lowering `J0+J1+J2` lowers `y0`.
    TotalControlLowersY0,
    /// Lowering the `x` combination lowers `x0`.
    XCombinationLowersX0,
    /// Raising `J1` raises `u0`.
    J1RaisesU0,
    /// Raising the `v` combination lowers `v0`.
    VCombinationLowersV0,
}

impl Claim {
    pub const ALL: [Claim; 4] = [
        Claim::TotalControlLowersY0,
        Claim::XCombinationLowersX0,
        Claim::J1RaisesU0,
        Claim::VCombinationLowersV0,
    ];

    pub fn key(self) -> &'static str {
        match self {
            Self::TotalControlLowersY0 => "total_control_lowers_y0",
            Self::XCombinationLowersX0 => "x_combination_lowers_x0",
            Self::J1RaisesU0 => "j1_raises_u0",
            Self::VCombinationLowersV0 => "v_combination_lowers_v0",
        }
    }

    /// Index of the affected coordinate in `[x, u, v, y]`.
    fn coordinate(self) -> usize {
        match self {
            Self::TotalControlLowersY0 => 3,
            Self::XCombinationLowersX0 => 0,
            Self::J1RaisesU0 => 1,
            Self::VCombinationLowersV0 => 2,
        }
    }

    /// Control step `(dJ0, dJ1, dJ2)` per unit `delta`. Combination claims
    /// move `J2` against `J0`, which leaves `J0+J1+J2` and hence `y0` unchanged.
    fn direction(self) -> [f64; 3] {
        match self {
            Self::TotalControlLowersY0 => [-1.0, 0.0, 0.0],
            Self::XCombinationLowersX0 => [1.0, 0.0, -1.0],
            Self::J1RaisesU0 => [0.0, 1.0, 0.0],
            Self::VCombinationLowersV0 => [-1.0, 0.0, 1.0],
        }
    }

    /// Claimed sign of d(coordinate)/d(combination).
    pub fn expected_sign(self) -> f64 {
        match self {
            Self::VCombinationLowersV0 => -1.0,
            _ => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRow {
    pub claim: Claim,
    /// `(dJ0, dJ1, dJ2)` actually applied.
    pub step: [f64; 3],
    /// Change of the governing combination (`S`, x or v combination, or `J1`).
    pub combination_change: f64,
    /// Finite-difference quotient of the affected coordinate.
    pub response: f64,
    pub expected_sign: f64,
    /// `None` when the perturbed point is infeasible.
    pub observed_sign: Option<f64>,
    pub matches: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityTable {
    pub base_point: Vec<f64>,
    pub rows: Vec<SensitivityRow>,
}

impl SensitivityTable {
    pub fn all_match(&self) -> bool {
        self.rows.iter().all(|r| r.matches == Some(true))
    }
}

/// One-sided finite differences of the 4D closed-form equilibrium.
pub fn run_sensitivity_4d(cfg: &ScenarioConfig, delta: f64) -> Result<SensitivityTable, ScenarioError> {
    let sys = cfg.system_4d()?;
    let p = &sys.params;
    let f_val = sys.input.eval(0.0);
    let j = [0, 1, 2].map(|i| sys.controls[i].signal.eval(0.0));
    let base = equilibrium_4d(j[0], j[1], j[2], f_val, p)?;
    if !base.feasible {
        return Err(EquilibriumError::Infeasible("base point has a negative concentration".into()).into());
    }
    let comb0 = combinations_4d(j[0], j[1], j[2], p);
    let mut rows = Vec::new();
    for claim in Claim::ALL {
        let step = claim.direction().map(|d| d * delta);
        let jp = [j[0] + step[0], j[1] + step[1], j[2] + step[2]];
        let comb1 = combinations_4d(jp[0], jp[1], jp[2], p);
        let combination_change = match claim {
            Claim::TotalControlLowersY0 => comb1.total - comb0.total,
            Claim::XCombinationLowersX0 => comb1.x_combination - comb0.x_combination,
            Claim::J1RaisesU0 => step[1],
            Claim::VCombinationLowersV0 => comb1.v_combination - comb0.v_combination,
        };
        let k = claim.coordinate();
        let (response, observed) = match equilibrium_4d(jp[0], jp[1], jp[2], f_val, p) {
            Ok(r) if r.feasible => {
                let dq = (r.point[k] - base.point[k]) / delta;
                // sign of the response relative to the direction the combination moved
                (dq, Some((dq * combination_change.signum()).signum()))
            }
            _ => (f64::NAN, None),
        };
        let expected_sign = claim.expected_sign();
        rows.push(SensitivityRow {
            claim,
            step,
            combination_change,
            response,
            expected_sign,
            observed_sign: observed,
            matches: observed.map(|o| o == expected_sign),
        });
    }
    Ok(SensitivityTable {
        base_point: base.point,
        rows,
    })
}

impl DipReport {
    pub fn to_key_value(&self) -> String {
        let mut s = String::new();
        for (k, v) in [
            ("baseline_x", self.baseline_x),
            ("min_x", self.min_x),
            ("t_min", self.t_min),
            ("dip_depth", self.dip_depth),
            ("overshoot_max", self.overshoot_max),
            ("t_overshoot", self.t_overshoot),
            ("final_deviation", self.final_deviation),
            ("chase_fraction", self.chase_fraction),
            ("t_transient", self.t_transient),
        ] {
            writeln!(s, "{k} = {}", fmt17(v)).unwrap();
        }
        writeln!(s, "t_return = {}", self.t_return.map_or("none".into(), fmt17)).unwrap();
        writeln!(s, "dip_detected = {}", self.dip_detected).unwrap();
        writeln!(s, "overshoot_detected = {}", self.overshoot_detected).unwrap();
        writeln!(s, "returned_to_baseline = {}", self.returned_to_baseline).unwrap();
        writeln!(s, "ordered = {}", self.ordered()).unwrap();
        s
    }
}

impl BufferingReport {
    pub fn to_key_value(&self) -> String {
        let mut s = String::new();
        writeln!(s, "period = {}", fmt17(self.period)).unwrap();
        writeln!(s, "n_periods = {}", self.n_periods).unwrap();
        let last = self.section.last().unwrap();
        writeln!(s, "section_x = {}", fmt17(last[0])).unwrap();
        writeln!(s, "section_y = {}", fmt17(last[1])).unwrap();
        writeln!(s, "final_displacement = {}", fmt17(*self.displacements.last().unwrap())).unwrap();
        writeln!(s, "contraction_ratio = {}", fmt17(self.contraction_ratio)).unwrap();
        writeln!(s, "lock_period = {}", self.lock_period.map_or("none".into(), |p| p.to_string())).unwrap();
        writeln!(s, "locked = {}", self.locked).unwrap();
        s
    }

    /// CSV with one row per period: `period,x_section,y_section,displacement,x_min,x_max,y_min,y_max`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("period,x_section,y_section,displacement,x_min,x_max,y_min,y_max\n");
        for (i, (d, e)) in self.displacements.iter().zip(&self.extrema).enumerate() {
            let sec = &self.section[i + 1];
            writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                i + 1,
                fmt17(sec[0]),
                fmt17(sec[1]),
                fmt17(*d),
                fmt17(e[0]),
                fmt17(e[1]),
                fmt17(e[2]),
                fmt17(e[3])
            )
            .unwrap();
        }
        s
    }
}

impl SensitivityTable {
    pub fn to_key_value(&self) -> String {
        let mut s = String::new();
        for (name, v) in ["x0", "u0", "v0", "y0"].iter().zip(&self.base_point) {
            writeln!(s, "{name} = {}", fmt17(*v)).unwrap();
        }
        for r in &self.rows {
            let k = r.claim.key();
            writeln!(s, "{k}.response = {}", fmt17(r.response)).unwrap();
            writeln!(s, "{k}.combination_change = {}", fmt17(r.combination_change)).unwrap();
            let m = match r.matches {
                Some(true) => "true",
                Some(false) => "false",
                None => "untestable",
            };
            writeln!(s, "{k}.matches = {m}").unwrap();
        }
        writeln!(s, "all_match = {}", self.all_match()).unwrap();
        s
    }
}
