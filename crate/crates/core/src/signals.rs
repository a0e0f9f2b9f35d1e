//! Piecewise-linear, optionally periodic, scalar signals of time.
//!
//! A [`Signal`] carries the stimulus `F(t)` and every control `J(t)`. Values
//! are linearly interpolated between breakpoints and held constant outside
//! them. A periodic signal is defined on `[0, period]` and repeated.

use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SignalError {
    #[error("signal needs at least one breakpoint")]
    Empty,
    #[error("breakpoint times must be strictly increasing (index {index}: {prev} then {next})")]
    NonMonotone { index: usize, prev: f64, next: f64 },
    #[error("non-finite value in signal definition")]
    NonFinite,
    #[error("period must be positive, got {0}")]
    BadPeriod(f64),
    #[error("periodic breakpoints must lie in [0, {period}], found t = {t}")]
    OutsidePeriod { t: f64, period: f64 },
    #[error("periodic signal is discontinuous at the wrap point ({first} vs {last})")]
    WrapDiscontinuity { first: f64, last: f64 },
    #[error("invalid trapezoid: {0}")]
    Trapezoid(String),
    #[error("invalid dip control: {0}")]
    DipControl(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Continuous piecewise-linear function of time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Signal {
    times: Vec<f64>,
    values: Vec<f64>,
    period: Option<f64>,
}

impl Signal {
    pub fn new(points: &[(f64, f64)], period: Option<f64>) -> Result<Self, SignalError> {
        if points.is_empty() {
            return Err(SignalError::Empty);
        }
        if points.iter().any(|(t, v)| !t.is_finite() || !v.is_finite()) {
            return Err(SignalError::NonFinite);
        }
        for (i, w) in points.windows(2).enumerate() {
            if w[1].0 <= w[0].0 {
                return Err(SignalError::NonMonotone {
                    index: i + 1,
                    prev: w[0].0,
                    next: w[1].0,
                });
            }
        }
        if let Some(p) = period {
            if !(p > 0.0) || !p.is_finite() {
                return Err(SignalError::BadPeriod(p));
            }
            for &(t, _) in points {
                if t < 0.0 || t > p {
                    return Err(SignalError::OutsidePeriod { t, period: p });
                }
            }
            let first = points[0].1;
            let last = points[points.len() - 1].1;
            if first != last {
                return Err(SignalError::WrapDiscontinuity { first, last });
            }
        }
        Ok(Self {
            times: points.iter().map(|p| p.0).collect(),
            values: points.iter().map(|p| p.1).collect(),
            period,
        })
    }

    pub fn constant(value: f64) -> Self {
        Self {
            times: vec![0.0],
            values: vec![value],
            period: None,
        }
    }

    /// Same breakpoints, repeated with the given period.
    pub fn with_period(&self, period: f64) -> Result<Self, SignalError> {
        Self::new(&self.points(), Some(period))
    }

    pub fn period(&self) -> Option<f64> {
        self.period
    }

    pub fn points(&self) -> Vec<(f64, f64)> {
        self.times.iter().copied().zip(self.values.iter().copied()).collect()
    }

    pub fn is_constant(&self) -> bool {
        self.values.iter().all(|&v| v == self.values[0])
    }

    fn local_time(&self, t: f64) -> f64 {
        match self.period {
            Some(p) => t.rem_euclid(p),
            None => t,
        }
    }

    fn eval_local(&self, t: f64) -> f64 {
        let n = self.times.len();
        if t <= self.times[0] {
            return self.values[0];
        }
        if t >= self.times[n - 1] {
            return self.values[n - 1];
        }
        // index of the first breakpoint strictly greater than t
        let hi = self.times.partition_point(|&bt| bt <= t);
        let lo = hi - 1;
        let (t0, t1) = (self.times[lo], self.times[hi]);
        let (v0, v1) = (self.values[lo], self.values[hi]);
        v0 + (v1 - v0) * ((t - t0) / (t1 - t0))
    }

    pub fn eval(&self, t: f64) -> f64 {
        self.eval_local(self.local_time(t))
    }

    /// Largest absolute segment slope (the Lipschitz constant).
    pub fn max_slope(&self) -> f64 {
        self.times
            .windows(2)
            .zip(self.values.windows(2))
            .map(|(t, v)| ((v[1] - v[0]) / (t[1] - t[0])).abs())
            .fold(0.0, f64::max)
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Exact integral of the non-repeated definition over `[a, b]`, `a <= b`.
    fn integral_local(&self, a: f64, b: f64) -> f64 {
        let n = self.times.len();
        let mut total = 0.0;
        // hold-first region
        let t_first = self.times[0];
        if a < t_first {
            total += self.values[0] * (b.min(t_first) - a);
        }
        for i in 0..n.saturating_sub(1) {
            let (t0, t1) = (self.times[i], self.times[i + 1]);
            let lo = a.max(t0);
            let hi = b.min(t1);
            if hi > lo {
                let va = self.eval_local(lo);
                let vb = self.eval_local(hi);
                total += 0.5 * (va + vb) * (hi - lo);
            }
        }
        let t_last = self.times[n - 1];
        if b > t_last {
            total += self.values[n - 1] * (b - a.max(t_last));
        }
        total
    }

    /// Exact integral over `[a, b]` (closed-form piecewise trapezoids).
    pub fn integral(&self, a: f64, b: f64) -> f64 {
        if b < a {
            return -self.integral(b, a);
        }
        match self.period {
            None => self.integral_local(a, b),
            Some(p) => {
                let ka = (a / p).floor();
                let kb = (b / p).floor();
                if ka == kb {
                    return self.integral_local(a - ka * p, b - ka * p);
                }
                let full = self.integral_local(0.0, p);
                let head = self.integral_local(a - ka * p, p);
                let tail = self.integral_local(0.0, b - kb * p);
                head + (kb - ka - 1.0) * full + tail
            }
        }
    }

    /// Mean value over `[0, horizon]`.
    pub fn average(&self, horizon: f64) -> f64 {
        self.integral(0.0, horizon) / horizon
    }

    /// Every corner of the signal in the open interval `(t0, t1)`, ascending.
    pub fn breakpoints_in(&self, t0: f64, t1: f64) -> Vec<f64> {
        let mut out = Vec::new();
        if self.is_constant() {
            return out;
        }
        match self.period {
            None => out.extend(self.times.iter().copied().filter(|&t| t > t0 && t < t1)),
            Some(p) => {
                let k0 = (t0 / p).floor() as i64;
                let k1 = (t1 / p).ceil() as i64;
                for k in k0..=k1 {
                    let base = k as f64 * p;
                    for &tau in self.times.iter().chain(std::iter::once(&0.0)) {
                        let t = base + tau;
                        if t > t0 && t < t1 {
                            out.push(t);
                        }
                    }
                }
            }
        }
        out.sort_by(|a, b| a.total_cmp(b));
        out.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * (1.0 + b.abs()));
        out
    }

    /// Plain-text form: `# period=<T|none>` then one `t value` pair per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        match self.period {
            Some(p) => writeln!(s, "# period={}", fmt17(p)).unwrap(),
            None => writeln!(s, "# period=none").unwrap(),
        }
        for (t, v) in self.times.iter().zip(&self.values) {
            writeln!(s, "{} {}", fmt17(*t), fmt17(*v)).unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, SignalError> {
        let mut period: Option<Option<f64>> = None;
        let mut points = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let lineno = i + 1;
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                let rest = rest.trim();
                if let Some(val) = rest.strip_prefix("period=") {
                    let parsed = match val.trim() {
                        "none" => None,
                        v => Some(v.parse::<f64>().map_err(|e| SignalError::Parse {
                            line: lineno,
                            msg: format!("bad period '{v}': {e}"),
                        })?),
                    };
                    period = Some(parsed);
                }
                continue;
            }
            let mut it = line.split_whitespace();
            let (Some(a), Some(b), None) = (it.next(), it.next(), it.next()) else {
                return Err(SignalError::Parse {
                    line: lineno,
                    msg: "expected 't value'".into(),
                });
            };
            let parse = |s: &str| {
                s.parse::<f64>().map_err(|e| SignalError::Parse {
                    line: lineno,
                    msg: format!("bad number '{s}': {e}"),
                })
            };
            points.push((parse(a)?, parse(b)?));
        }
        let period = period.ok_or(SignalError::Parse {
            line: 1,
            msg: "missing '# period=' header".into(),
        })?;
        Self::new(&points, period)
    }
}

/// 17-significant-digit scientific notation (round-trips every f64).
pub fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

/// Trapezoidal stimulus: `base` outside the pulse, `(1 + boost) * base` on the plateau.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrapezoidSpec {
    pub base: f64,
    pub boost_fraction: f64,
    pub t_start: f64,
    pub t_rise_end: f64,
    pub t_fall_start: f64,
    pub t_end: f64,
}

impl TrapezoidSpec {
    pub fn plateau(&self) -> f64 {
        (1.0 + self.boost_fraction) * self.base
    }
}

pub fn make_trapezoid(spec: &TrapezoidSpec) -> Result<Signal, SignalError> {
    let s = spec;
    if !(s.base > 0.0) {
        return Err(SignalError::Trapezoid(format!("base must be positive, got {}", s.base)));
    }
    if !(s.boost_fraction >= 0.0) {
        return Err(SignalError::Trapezoid(format!(
            "boost fraction must be non-negative, got {}",
            s.boost_fraction
        )));
    }
    if !(s.t_start < s.t_rise_end && s.t_rise_end <= s.t_fall_start && s.t_fall_start < s.t_end) {
        return Err(SignalError::Trapezoid(format!(
            "need t_start < t_rise_end <= t_fall_start < t_end, got {} {} {} {}",
            s.t_start, s.t_rise_end, s.t_fall_start, s.t_end
        )));
    }
    if s.boost_fraction == 0.0 {
        return Ok(Signal::constant(s.base));
    }
    let top = s.plateau();
    let mut pts = vec![(s.t_start, s.base), (s.t_rise_end, top)];
    if s.t_fall_start > s.t_rise_end {
        pts.push((s.t_fall_start, top));
    }
    pts.push((s.t_end, s.base));
    Signal::new(&pts, None)
}

/// Control protocol `J0 -> J1 -> Jm1 -> J0`.
///
/// `times` are the six corners: rise start, rise end, fall start, low level
/// reached, recovery start, recovery end.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DipControlSpec {
    pub j0: f64,
    pub j1: f64,
    pub jm1: f64,
    pub times: [f64; 6],
}

pub fn make_dip_control(spec: &DipControlSpec) -> Result<Signal, SignalError> {
    if !(spec.j1 > spec.j0) {
        return Err(SignalError::DipControl(format!(
            "raised level J1={} must exceed J0={}",
            spec.j1, spec.j0
        )));
    }
    if !(spec.jm1 < spec.j0) {
        return Err(SignalError::DipControl(format!(
            "lowered level Jm1={} must be below J0={}",
            spec.jm1, spec.j0
        )));
    }
    let t = spec.times;
    if t.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(SignalError::DipControl(format!(
            "transition times must be strictly increasing, got {t:?}"
        )));
    }
    let levels = [spec.j0, spec.j1, spec.j1, spec.jm1, spec.jm1, spec.j0];
    let pts: Vec<(f64, f64)> = t.iter().copied().zip(levels).collect();
    Signal::new(&pts, None)
}

/// A control `J(t, x) = J(t) + coupling * (x - x_ref)`, affine in the
/// extracellular concentration. `coupling <= 0` keeps the slow linearization
/// contracting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Control {
    pub signal: Signal,
    pub coupling: f64,
    pub x_ref: f64,
}

impl Control {
    pub fn open_loop(signal: Signal) -> Self {
        Self {
            signal,
            coupling: 0.0,
            x_ref: 0.0,
        }
    }

    pub fn constant(value: f64) -> Self {
        Self::open_loop(Signal::constant(value))
    }

    pub fn eval(&self, t: f64, x: f64) -> f64 {
        let open = self.signal.eval(t);
        if self.coupling == 0.0 {
            open
        } else {
            open + self.coupling * (x - self.x_ref)
        }
    }

    /// Period average of `J(t, x)` at fixed `x`.
    pub fn average(&self, period: f64, x: f64) -> f64 {
        self.signal.average(period) + self.coupling * (x - self.x_ref)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trapezoid_example() -> TrapezoidSpec {
        TrapezoidSpec {
            base: 0.5,
            boost_fraction: 0.5,
            t_start: 1.0,
            t_rise_end: 2.0,
            t_fall_start: 5.0,
            t_end: 6.0,
        }
    }

    #[test]
    fn constant_and_ramp() {
        let c = Signal::constant(0.5);
        for t in [0.0, 1.0, 1e6] {
            assert_eq!(c.eval(t), 0.5);
        }
        let r = Signal::new(&[(0.0, 1.0), (2.0, 3.0)], None).unwrap();
        assert_eq!(r.eval(1.0), 2.0);
        assert_eq!(r.eval(10.0), 3.0);
    }

    #[test]
    fn trapezoid_values() {
        let f = make_trapezoid(&trapezoid_example()).unwrap();
        assert!((f.eval(1.5) - 0.625).abs() < 1e-15);
        assert_eq!(f.eval(3.0), 0.75);
        assert_eq!(f.eval(0.0), 0.5);
        assert_eq!(f.eval(7.0), 0.5);
        let flat = make_trapezoid(&TrapezoidSpec { boost_fraction: 0.0, ..trapezoid_example() }).unwrap();
        assert!(flat.is_constant());
        assert_eq!(flat.eval(3.0), 0.5);
    }

    #[test]
    fn trapezoid_average_matches_closed_form() {
        let f = make_trapezoid(&trapezoid_example()).unwrap().with_period(10.0).unwrap();
        assert!((f.average(10.0) - 0.6).abs() < 1e-15);
    }

    #[test]
    fn trapezoid_rejects_bad_times() {
        let bad = TrapezoidSpec { t_rise_end: 0.5, ..trapezoid_example() };
        assert!(matches!(make_trapezoid(&bad), Err(SignalError::Trapezoid(_))));
    }

    #[test]
    fn ramp_average_is_half() {
        let r = Signal::new(&[(0.0, 0.0), (4.0, 1.0)], None).unwrap();
        assert!((r.average(4.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn dip_control_levels() {
        let spec = DipControlSpec {
            j0: 0.2,
            j1: 0.3,
            jm1: 0.1,
            times: [10.0, 20.0, 30.0, 40.0, 50.0, 60.0],
        };
        let j = make_dip_control(&spec).unwrap();
        assert_eq!(j.max_value(), 0.3);
        assert_eq!(j.min_value(), 0.1);
        assert!((j.eval(15.0) - 0.25).abs() < 1e-15);
        assert_eq!(j.eval(0.0), 0.2);
        assert_eq!(j.eval(100.0), 0.2);
        // Closed form: 0.2*70 + 0.1*(5+10+5) - 0.1*(5+10+5) over [0,70]
        let expected = (0.2 * 70.0 + 0.1 * 20.0 - 0.1 * 20.0) / 70.0;
        assert!((j.average(70.0) - expected).abs() < 1e-15);
    }

    #[test]
    fn dip_control_rejects_missing_undershoot() {
        let spec = DipControlSpec {
            j0: 0.2,
            j1: 0.3,
            jm1: 0.2,
            times: [1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
        };
        assert!(make_dip_control(&spec).is_err());
        let spec = DipControlSpec { j1: 0.2, jm1: 0.1, ..spec };
        assert!(make_dip_control(&spec).is_err());
    }

    #[test]
    fn periodic_requires_continuity() {
        let err = Signal::new(&[(0.0, 1.0), (5.0, 2.0)], Some(5.0)).unwrap_err();
        assert!(matches!(err, SignalError::WrapDiscontinuity { .. }));
        let err = Signal::new(&[(0.0, 1.0), (6.0, 1.0)], Some(5.0)).unwrap_err();
        assert!(matches!(err, SignalError::OutsidePeriod { .. }));
    }

    #[test]
    fn periodic_integral_spans_periods() {
        let f = make_trapezoid(&trapezoid_example()).unwrap().with_period(10.0).unwrap();
        let one = f.integral(0.0, 10.0);
        assert!((f.integral(0.0, 30.0) - 3.0 * one).abs() < 1e-12);
        assert!((f.integral(3.0, 23.0) - 2.0 * one).abs() < 1e-12);
    }

    #[test]
    fn breakpoints_repeat_with_period() {
        let f = make_trapezoid(&trapezoid_example()).unwrap().with_period(10.0).unwrap();
        let bps = f.breakpoints_in(0.0, 20.0);
        assert_eq!(bps, vec![1.0, 2.0, 5.0, 6.0, 10.0, 11.0, 12.0, 15.0, 16.0]);
        assert!(Signal::constant(1.0).breakpoints_in(0.0, 10.0).is_empty());
    }

    #[test]
    fn text_parse_errors_carry_line_numbers() {
        let err = Signal::from_text("# period=none\n0 1\n1 x\n").unwrap_err();
        assert_eq!(
            err,
            SignalError::Parse {
                line: 3,
                msg: "bad number 'x': invalid float literal".into()
            }
        );
    }
}
