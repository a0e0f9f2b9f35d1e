//! Flat `key = value` configuration files.
//!
//! ```text
//! # comment
//! scenario = buffer
//! model = 2d
//! params.C = 1.0
//! signal.F.kind = trapezoid
//! signal.F.base = 0.5
//! signal.J.coupling = -1.0
//! signal.J.x_ref = auto
//! ```
//!
//! A file is read as overrides on top of the named scenario's defaults. Keys
//! under `manifest.` are metadata and ignored on input, so a run manifest is
//! itself a valid config that reproduces the run.

use crate::dynamics::Params4D;
use crate::integrator::{IntegratorConfig, StiffnessMode};
use crate::scenarios::{
    default_scenario, ControlSpec, DetectSpec, ModelKind, RunSpec, ScenarioConfig, ScenarioError, ScenarioKind,
    SignalSpec,
};
use crate::signals::{fmt17, DipControlSpec, TrapezoidSpec};
use std::collections::BTreeMap;
use std::path::Path;
use thiserror::Error;

pub const SEED_DIR_ENV: &str = "LACTODYN_SEED_DIR";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("{key}: {msg}")]
    Value { key: String, msg: String },
    #[error("missing key {0:?}")]
    MissingKey(String),
    #[error("cannot read {path}: {msg}")]
    Io { path: String, msg: String },
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
}

/// Parsed key/value pairs with the line each key came from.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValues {
    pub entries: BTreeMap<String, (String, usize)>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap().trim();
            if content.is_empty() {
                continue;
            }
            let (k, v) = content.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line,
                msg: format!("expected `key = value`, got {content:?}"),
            })?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() || k.contains(char::is_whitespace) {
                return Err(ConfigError::Syntax {
                    line,
                    msg: format!("invalid key {k:?}"),
                });
            }
            if v.is_empty() {
                return Err(ConfigError::Syntax {
                    line,
                    msg: format!("empty value for {k}"),
                });
            }
            if let Some((_, prev)) = entries.insert(k.to_string(), (v.to_string(), line)) {
                return Err(ConfigError::Syntax {
                    line,
                    msg: format!("duplicate key {k} (first set on line {prev})"),
                });
            }
        }
        Ok(Self { entries })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(v, _)| v.as_str())
    }

    fn value_error(&self, key: &str, msg: String) -> ConfigError {
        match self.entries.get(key) {
            Some((_, line)) => ConfigError::Syntax {
                line: *line,
                msg: format!("{key}: {msg}"),
            },
            None => ConfigError::Value { key: key.into(), msg },
        }
    }
}

/// Ordered flat representation used for emission.
type Flat = Vec<(String, String)>;

fn push(out: &mut Flat, key: impl Into<String>, value: impl Into<String>) {
    out.push((key.into(), value.into()));
}

fn num(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.into()
    } else {
        fmt17(v)
    }
}

fn emit_signal(out: &mut Flat, prefix: &str, spec: &SignalSpec) {
    match spec {
        SignalSpec::Constant { value } => {
            push(out, format!("{prefix}.kind"), "constant");
            push(out, format!("{prefix}.value"), num(*value));
        }
        SignalSpec::Trapezoid { spec, period } => {
            push(out, format!("{prefix}.kind"), "trapezoid");
            push(out, format!("{prefix}.base"), num(spec.base));
            push(out, format!("{prefix}.boost"), num(spec.boost_fraction));
            push(out, format!("{prefix}.t_start"), num(spec.t_start));
            push(out, format!("{prefix}.t_rise_end"), num(spec.t_rise_end));
            push(out, format!("{prefix}.t_fall_start"), num(spec.t_fall_start));
            push(out, format!("{prefix}.t_end"), num(spec.t_end));
            push(out, format!("{prefix}.period"), period.map_or("none".into(), num));
        }
        SignalSpec::Dip { spec } => {
            push(out, format!("{prefix}.kind"), "dip");
            push(out, format!("{prefix}.j0"), num(spec.j0));
            push(out, format!("{prefix}.j1"), num(spec.j1));
            push(out, format!("{prefix}.jm1"), num(spec.jm1));
            let times: Vec<String> = spec.times.iter().map(|t| num(*t)).collect();
            push(out, format!("{prefix}.times"), times.join(", "));
        }
        SignalSpec::Points { points, period } => {
            push(out, format!("{prefix}.kind"), "points");
            let pts: Vec<String> = points.iter().map(|(t, v)| format!("{}:{}", num(*t), num(*v))).collect();
            push(out, format!("{prefix}.points"), pts.join(", "));
            push(out, format!("{prefix}.period"), period.map_or("none".into(), num));
        }
    }
}

fn emit_control(out: &mut Flat, prefix: &str, c: &ControlSpec) {
    emit_signal(out, prefix, &c.signal);
    push(out, format!("{prefix}.coupling"), num(c.coupling));
    push(out, format!("{prefix}.x_ref"), c.x_ref.map_or("auto".into(), num));
}

fn control_prefixes(model: ModelKind) -> &'static [&'static str] {
    match model {
        ModelKind::TwoD => &["signal.J"],
        ModelKind::FourD => &["signal.J0", "signal.J1", "signal.J2"],
    }
}

/// Every setting of a config as ordered `(key, value)` pairs.
pub fn to_flat(cfg: &ScenarioConfig) -> Flat {
    let mut out = Flat::new();
    push(&mut out, "scenario", cfg.scenario.to_string());
    push(&mut out, "model", cfg.model.to_string());
    let p = &cfg.params;
    let b = &p.base;
    for (k, v) in [
        ("C", b.c),
        ("k", b.k),
        ("kprime", b.kprime),
        ("L", b.l),
        ("eps", b.eps),
        ("eps_prime", b.eps_prime),
    ] {
        push(&mut out, format!("params.{k}"), num(v));
    }
    if cfg.model == ModelKind::FourD {
        for (k, v) in [("C1", p.c1), ("C2", p.c2), ("Ca", p.ca), ("kn", p.kn), ("ka", p.ka)] {
            push(&mut out, format!("params.{k}"), num(v));
        }
    }
    emit_signal(&mut out, "signal.F", &cfg.input);
    for (prefix, c) in control_prefixes(cfg.model).iter().zip(&cfg.controls) {
        emit_control(&mut out, prefix, c);
    }
    let ic = &cfg.integrator;
    push(&mut out, "integrator.rel_tol", num(ic.rel_tol));
    push(&mut out, "integrator.abs_tol", num(ic.abs_tol));
    push(&mut out, "integrator.max_step", num(ic.max_step));
    push(&mut out, "integrator.mode", ic.mode.to_string());
    push(&mut out, "integrator.max_steps", ic.max_steps.to_string());
    let r = &cfg.run;
    push(&mut out, "run.horizon", num(r.horizon));
    push(&mut out, "run.samples", r.samples.to_string());
    push(&mut out, "run.n_periods", r.n_periods.to_string());
    push(&mut out, "run.search_lo", num(r.search_lo));
    push(&mut out, "run.search_hi", num(r.search_hi));
    push(&mut out, "run.delta", num(r.delta));
    push(&mut out, "run.refine_max_iter", r.refine_max_iter.to_string());
    let d = &cfg.detect;
    push(&mut out, "detect.dip_depth_fraction", num(d.dip_depth_fraction));
    push(&mut out, "detect.return_tol", num(d.return_tol));
    push(&mut out, "detect.overshoot_min", num(d.overshoot_min));
    push(&mut out, "detect.lock_threshold", num(d.lock_threshold));
    push(&mut out, "detect.lock_consecutive", d.lock_consecutive.to_string());
    out
}

pub fn to_text(cfg: &ScenarioConfig) -> String {
    to_flat(cfg).into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

/// Reads typed values out of a merged key map, tracking which keys were used.
struct Reader<'a> {
    kv: &'a KeyValues,
    used: std::cell::RefCell<std::collections::BTreeSet<String>>,
}

impl<'a> Reader<'a> {
    fn raw(&self, key: &str) -> Result<&'a str, ConfigError> {
        self.used.borrow_mut().insert(key.to_string());
        self.kv.get(key).ok_or_else(|| ConfigError::MissingKey(key.into()))
    }

    fn has(&self, key: &str) -> bool {
        self.kv.get(key).is_some()
    }

    fn f64(&self, key: &str) -> Result<f64, ConfigError> {
        let v = self.raw(key)?;
        let x: f64 = v
            .parse()
            .map_err(|_| self.kv.value_error(key, format!("expected a number, got {v:?}")))?;
        if x.is_nan() {
            return Err(self.kv.value_error(key, "NaN is not allowed".into()));
        }
        Ok(x)
    }

    fn opt_f64(&self, key: &str, none_word: &str) -> Result<Option<f64>, ConfigError> {
        if !self.has(key) {
            self.used.borrow_mut().insert(key.to_string());
            return Ok(None);
        }
        if self.raw(key)? == none_word {
            Ok(None)
        } else {
            self.f64(key).map(Some)
        }
    }

    fn usize(&self, key: &str) -> Result<usize, ConfigError> {
        let v = self.raw(key)?;
        v.parse()
            .map_err(|_| self.kv.value_error(key, format!("expected a non-negative integer, got {v:?}")))
    }

    fn list(&self, key: &str) -> Result<Vec<f64>, ConfigError> {
        let v = self.raw(key)?;
        v.split(',')
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| self.kv.value_error(key, format!("bad number {:?} in list", s.trim())))
            })
            .collect()
    }

    fn signal(&self, prefix: &str) -> Result<SignalSpec, ConfigError> {
        let kind = self.raw(&format!("{prefix}.kind"))?;
        let f = |name: &str| self.f64(&format!("{prefix}.{name}"));
        Ok(match kind {
            "constant" => SignalSpec::Constant { value: f("value")? },
            "trapezoid" => SignalSpec::Trapezoid {
                spec: TrapezoidSpec {
                    base: f("base")?,
                    boost_fraction: f("boost")?,
                    t_start: f("t_start")?,
                    t_rise_end: f("t_rise_end")?,
                    t_fall_start: f("t_fall_start")?,
                    t_end: f("t_end")?,
                },
                period: self.opt_f64(&format!("{prefix}.period"), "none")?,
            },
            "dip" => {
                let key = format!("{prefix}.times");
                let times = self.list(&key)?;
                let times: [f64; 6] = times
                    .try_into()
                    .map_err(|t: Vec<f64>| self.kv.value_error(&key, format!("expected 6 times, got {}", t.len())))?;
                SignalSpec::Dip {
                    spec: DipControlSpec {
                        j0: f("j0")?,
                        j1: f("j1")?,
                        jm1: f("jm1")?,
                        times,
                    },
                }
            }
            "points" => {
                let key = format!("{prefix}.points");
                let raw = self.raw(&key)?;
                let mut points = Vec::new();
                for item in raw.split(',') {
                    let (t, v) = item
                        .trim()
                        .split_once(':')
                        .ok_or_else(|| self.kv.value_error(&key, format!("expected `t:value`, got {:?}", item.trim())))?;
                    let parse = |s: &str| {
                        s.trim()
                            .parse::<f64>()
                            .map_err(|_| self.kv.value_error(&key, format!("bad number {:?}", s.trim())))
                    };
                    points.push((parse(t)?, parse(v)?));
                }
                SignalSpec::Points {
                    points,
                    period: self.opt_f64(&format!("{prefix}.period"), "none")?,
                }
            }
            other => {
                return Err(self.kv.value_error(
                    &format!("{prefix}.kind"),
                    format!("unknown signal kind {other:?} (expected constant, trapezoid, dip or points)"),
                ))
            }
        })
    }

    fn control(&self, prefix: &str) -> Result<ControlSpec, ConfigError> {
        Ok(ControlSpec {
            signal: self.signal(prefix)?,
            coupling: if self.has(&format!("{prefix}.coupling")) {
                self.f64(&format!("{prefix}.coupling"))?
            } else {
                0.0
            },
            x_ref: self.opt_f64(&format!("{prefix}.x_ref"), "auto")?,
        })
    }
}

fn from_merged(kv: &KeyValues, base: &ScenarioConfig) -> Result<ScenarioConfig, ConfigError> {
    let r = Reader {
        kv,
        used: Default::default(),
    };
    let scenario: ScenarioKind = r.raw("scenario")?.parse()?;
    let model: ModelKind = r
        .raw("model")?
        .parse()
        .map_err(|e: String| kv.value_error("model", e))?;
    let b4 = base.params;
    let opt = |key: &str, fallback: f64| -> Result<f64, ConfigError> {
        if r.has(key) {
            r.f64(key)
        } else {
            Ok(fallback)
        }
    };
    let mut params = Params4D {
        base: b4.base,
        c1: opt("params.C1", b4.c1)?,
        c2: opt("params.C2", b4.c2)?,
        ca: opt("params.Ca", b4.ca)?,
        kn: opt("params.kn", b4.kn)?,
        ka: opt("params.ka", b4.ka)?,
    };
    params.base.c = r.f64("params.C")?;
    params.base.k = r.f64("params.k")?;
    params.base.kprime = r.f64("params.kprime")?;
    params.base.l = r.f64("params.L")?;
    params.base.eps = r.f64("params.eps")?;
    params.base.eps_prime = r.f64("params.eps_prime")?;

    let input = r.signal("signal.F")?;
    let controls = control_prefixes(model)
        .iter()
        .map(|p| r.control(p))
        .collect::<Result<Vec<_>, _>>()?;
    let mode_raw = r.raw("integrator.mode")?;
    let mode: StiffnessMode = mode_raw
        .parse()
        .map_err(|_| kv.value_error("integrator.mode", format!("expected implicit or explicit, got {mode_raw:?}")))?;
    let integrator = IntegratorConfig {
        rel_tol: r.f64("integrator.rel_tol")?,
        abs_tol: r.f64("integrator.abs_tol")?,
        max_step: r.f64("integrator.max_step")?,
        mode,
        max_steps: r.usize("integrator.max_steps")?,
    };
    let run = RunSpec {
        horizon: r.f64("run.horizon")?,
        samples: r.usize("run.samples")?,
        n_periods: r.usize("run.n_periods")?,
        search_lo: r.f64("run.search_lo")?,
        search_hi: r.f64("run.search_hi")?,
        delta: r.f64("run.delta")?,
        refine_max_iter: r.usize("run.refine_max_iter")?,
    };
    let detect = DetectSpec {
        dip_depth_fraction: r.f64("detect.dip_depth_fraction")?,
        return_tol: r.f64("detect.return_tol")?,
        overshoot_min: r.f64("detect.overshoot_min")?,
        lock_threshold: r.f64("detect.lock_threshold")?,
        lock_consecutive: r.usize("detect.lock_consecutive")?,
    };

    let used = r.used.borrow();
    for (key, (_, line)) in &kv.entries {
        if !used.contains(key) && !key.starts_with("manifest.") {
            return Err(ConfigError::Syntax {
                line: *line,
                msg: format!("unknown key {key:?}"),
            });
        }
    }
    Ok(ScenarioConfig {
        scenario,
        model,
        params,
        input,
        controls,
        integrator,
        run,
        detect,
    })
}

/// Signal prefixes whose keys are replaced wholesale when `kind` changes.
fn signal_prefix(key: &str) -> Option<&str> {
    let rest = key.strip_prefix("signal.")?;
    let name = rest.split('.').next()?;
    Some(&key[..7 + name.len()])
}

/// Applies the user's keys on top of `base`. A changed `signal.X.kind`
/// discards the base's other `signal.X.*` keys; a changed `model` discards
/// the base's control keys.
pub fn apply_overrides(base: &ScenarioConfig, user: &KeyValues) -> Result<ScenarioConfig, ConfigError> {
    let base_flat = to_flat(base);
    let mut merged = KeyValues::default();
    let model_changed = user.get("model").is_some_and(|m| m != base.model.to_string());
    for (k, v) in &base_flat {
        if let Some(prefix) = signal_prefix(k) {
            let kind_key = format!("{prefix}.kind");
            let base_kind = base_flat.iter().find(|(bk, _)| *bk == kind_key).map(|(_, bv)| bv.as_str());
            if user.get(&kind_key).is_some_and(|uk| Some(uk) != base_kind) {
                continue;
            }
            if model_changed && prefix != "signal.F" {
                continue;
            }
        }
        merged.entries.insert(k.clone(), (v.clone(), 0));
    }
    for (k, v) in &user.entries {
        merged.entries.insert(k.clone(), v.clone());
    }
    from_merged(&merged, base)
}

/// Default config for a scenario name, overridden by `<LACTODYN_SEED_DIR>/<name>.cfg` when present.
pub fn seed_scenario(name: &str) -> Result<ScenarioConfig, ConfigError> {
    let builtin = default_scenario(name)?;
    let Some(dir) = std::env::var_os(SEED_DIR_ENV) else {
        return Ok(builtin);
    };
    let path = Path::new(&dir).join(format!("{name}.cfg"));
    if !path.exists() {
        return Ok(builtin);
    }
    log::info!("seed override from {}", path.display());
    let text = read_file(&path)?;
    apply_overrides(&builtin, &KeyValues::parse(&text)?)
}

pub fn read_file(path: &Path) -> Result<String, ConfigError> {
    std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    })
}

/// Parses config text; the base scenario is named by its `scenario` key (default `dip`).
pub fn parse_config(text: &str) -> Result<ScenarioConfig, ConfigError> {
    parse_config_with(text, &[])
}

/// Like [`parse_config`], with extra `(key, value)` pairs that take precedence over the text.
pub fn parse_config_with(text: &str, extra: &[(&str, &str)]) -> Result<ScenarioConfig, ConfigError> {
    let mut user = KeyValues::parse(text)?;
    for (k, v) in extra {
        user.entries.insert(k.to_string(), (v.to_string(), 0));
    }
    let name = user.get("scenario").unwrap_or("dip");
    let base = seed_scenario(name).map_err(|e| match e {
        ConfigError::Scenario(ScenarioError::UnknownScenario(s)) => user.value_error("scenario", format!("unknown scenario {s:?}")),
        other => other,
    })?;
    let cfg = apply_overrides(&base, &user)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ScenarioConfig, ConfigError> {
    parse_config(&read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        for name in ["dip", "buffer", "sensitivity"] {
            let cfg = default_scenario(name).unwrap();
            let back = parse_config(&to_text(&cfg)).unwrap();
            assert_eq!(back, cfg, "{name}");
        }
    }

    #[test]
    fn override_single_field() {
        let cfg = parse_config("scenario = dip\nparams.eps = 0.005\nsignal.F.base = 0.6\n").unwrap();
        assert_eq!(cfg.params.base.eps, 0.005);
        match cfg.input {
            SignalSpec::Trapezoid { spec, .. } => assert_eq!(spec.base, 0.6),
            _ => panic!(),
        }
    }

    #[test]
    fn kind_change_requires_new_fields() {
        let cfg = parse_config("signal.F.kind = constant\nsignal.F.value = 0.7\n").unwrap();
        assert_eq!(cfg.input, SignalSpec::Constant { value: 0.7 });
        let err = parse_config("signal.F.kind = constant\n").unwrap_err();
        assert_eq!(err, ConfigError::MissingKey("signal.F.value".into()));
    }

    #[test]
    fn syntax_errors_carry_line_numbers() {
        let err = parse_config("model = 2d\n\nthis line is wrong\n").unwrap_err();
        assert!(matches!(err, ConfigError::Syntax { line: 3, .. }), "{err:?}");
        let err = parse_config("params.C = abc\n").unwrap_err();
        assert!(matches!(err, ConfigError::Syntax { line: 1, .. }), "{err:?}");
        let err = parse_config("# c\nparams.bogus = 1\n").unwrap_err();
        assert!(matches!(err, ConfigError::Syntax { line: 2, .. }), "{err:?}");
        let err = parse_config("params.C = 1\nparams.C = 2\n").unwrap_err();
        assert!(matches!(err, ConfigError::Syntax { line: 2, .. }), "{err:?}");
    }

    #[test]
    fn manifest_keys_are_ignored() {
        let mut text = to_text(&default_scenario("buffer").unwrap());
        text.push_str("manifest.version = 0.1.0\n");
        assert_eq!(parse_config(&text).unwrap(), default_scenario("buffer").unwrap());
    }

    #[test]
    fn points_signal_parses() {
        let cfg = parse_config("signal.F.kind = points\nsignal.F.points = 0:0.5, 5:0.8, 10:0.5\nsignal.F.period = 10\n").unwrap();
        assert_eq!(cfg.input.build().unwrap().eval(15.0), 0.8);
    }

    #[test]
    fn switching_model_drops_base_controls() {
        let text = "model = 4d\nsignal.J0.kind = constant\nsignal.J0.value = 0.1\nsignal.J1.kind = constant\nsignal.J1.value = 0.05\nsignal.J2.kind = constant\nsignal.J2.value = 0.05\n";
        let cfg = parse_config(text).unwrap();
        assert_eq!(cfg.controls.len(), 3);
    }
}
