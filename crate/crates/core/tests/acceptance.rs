//! Acceptance run: one PASS/FAIL line per criterion on stderr, then a single
//! assertion over all of them.

mod common;

use std::io::Write as _;
use std::process::Command;
use std::time::{Duration, Instant};

use common::{dense_trapezoid, draw_2d, draw_4d, feasible_2d, rng, signal_corpus, Linear};
use lactodyn::averaging::{predict_periodic_orbit, refine_periodic_orbit};
use lactodyn::equilibria::{
    classify_2d, equilibrium_2d, equilibrium_4d, newton_equilibrium, row_scale_2d, row_scale_4d, Classification,
};
use lactodyn::manifold::{manifold_distance_2d, manifold_point_2d, manifold_point_4d};
use lactodyn::scenarios::{default_scenario, run_buffering, run_dip, run_sensitivity_4d, simulate};
use lactodyn::{integrate, Control, IntegratorConfig, Signal, System2D, System4D};
use nalgebra::DVector;
use rand::Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs())
}

/// Newton from several starts around `point`; every converged start must land on it.
fn multi_start<S: lactodyn::OdeSystem>(sys: &S, scale: &[f64], point: &[f64], r: &mut impl Rng) -> Result<usize, String> {
    let mut converged = 0;
    for k in 0..4 {
        let guess: Vec<f64> = point
            .iter()
            .map(|v| match k {
                0 => v * 1.05,
                1 => v * 0.95,
                _ => v * r.gen_range(0.7..1.4),
            })
            .collect();
        let Ok(sol) = newton_equilibrium(sys, 0.0, scale, &DVector::from_vec(guess), 1e-13) else {
            continue;
        };
        converged += 1;
        for (a, b) in sol.state.iter().zip(point) {
            ensure!(rel(*a, *b) <= 1e-8, "Newton root {a} vs closed form {b}");
        }
    }
    Ok(converged)
}

fn criterion_1() -> Outcome {
    let mut r = rng(1);
    let (mut n2, mut n4, mut newton_hits, mut worst) = (0, 0, 0, 0.0f64);
    while n2 < 500 {
        let (p, j, f) = draw_2d(&mut r);
        if !feasible_2d(&p, j, f) {
            continue;
        }
        let eq = equilibrium_2d(j, f, &p).map_err(|e| e.to_string())?;
        worst = worst.max(eq.residual_norm);
        ensure!(eq.residual_norm <= 1e-10, "2D residual {:e}", eq.residual_norm);
        let sys = System2D {
            params: p,
            control: Control::constant(j),
            input: Signal::constant(f),
        };
        newton_hits += multi_start(&sys, &row_scale_2d(&p), &eq.point, &mut r)?;
        n2 += 1;
    }
    while n4 < 500 {
        let (p, j, f) = draw_4d(&mut r);
        let Ok(eq) = equilibrium_4d(j[0], j[1], j[2], f, &p) else {
            continue;
        };
        worst = worst.max(eq.residual_norm);
        ensure!(eq.residual_norm <= 1e-10, "4D residual {:e}", eq.residual_norm);
        let sys = System4D {
            params: p,
            controls: j.map(Control::constant),
            input: Signal::constant(f),
        };
        newton_hits += multi_start(&sys, &row_scale_4d(&p), &eq.point, &mut r)?;
        n4 += 1;
    }
    ensure!(newton_hits >= 1000, "only {newton_hits} Newton starts converged");
    Ok(format!("1000 draws, {newton_hits} Newton roots agree, max residual {worst:.1e}"))
}

fn criterion_2() -> Outcome {
    let mut r = rng(2);
    let mut n = 0;
    while n < 500 {
        let (p, j, f) = draw_2d(&mut r);
        if !feasible_2d(&p, j, f) {
            continue;
        }
        let eq = equilibrium_2d(j, f, &p).map_err(|e| e.to_string())?;
        let lin = classify_2d(&eq, &p, 0.0, f).map_err(|e| e.to_string())?;
        ensure!(lin.discriminant > 0.0, "discriminant {:e}", lin.discriminant);
        ensure!(lin.classification == Classification::Node, "class {:?}", lin.classification);
        for e in lin.eigenvalues {
            ensure!(e.im == 0.0 && e.re < 0.0, "eigenvalue {e}");
        }
        let a = p.k * p.c / (p.k + eq.x()).powi(2);
        let b = p.kprime * p.c / (p.kprime + eq.y()).powi(2);
        let bound = (p.eps_prime * a - (b + f) / p.eps).powi(2);
        ensure!(lin.discriminant > bound, "discriminant {:e} <= bound {:e}", lin.discriminant, bound);
        n += 1;
    }
    Ok("500 draws, stable nodes, discriminant above bound".into())
}

fn post_transient(eps: f64) -> Result<f64, String> {
    let mut cfg = default_scenario("dip").map_err(|e| e.to_string())?;
    cfg.params.base.eps = eps;
    let traj = simulate(&cfg).map_err(|e| e.to_string())?;
    let sys = cfg.system_2d().map_err(|e| e.to_string())?;
    let d = manifold_distance_2d(&traj, &sys.params, &sys.input, None).map_err(|e| e.to_string())?;
    Ok(d.post_transient_max)
}

fn criterion_3() -> Outcome {
    let mut r = rng(3);
    let mut n = 0;
    while n < 10_000 {
        let (p, _, f) = draw_2d(&mut r);
        let x = common::log_uniform(&mut r, 1e-2, 1e2);
        let g = manifold_point_2d(x, f, &p).map_err(|e| e.to_string())?.gprime_y;
        ensure!(g < 0.0, "2D g'_y = {g}");
        let (p4, _, f4) = draw_4d(&mut r);
        let v = common::log_uniform(&mut r, 1e-2, 1e2);
        let g = manifold_point_4d(x, v, f4, &p4).map_err(|e| e.to_string())?.gprime_y;
        ensure!(g < 0.0, "4D g'_y = {g}");
        n += 1;
    }
    let ratio = post_transient(1e-2)? / post_transient(5e-3)?;
    ensure!((1.5..=2.5).contains(&ratio), "distance ratio {ratio}");
    Ok(format!("2x10^4 manifold points attracting, distance ratio {ratio:.3}"))
}

fn criterion_4() -> Outcome {
    let cfg = default_scenario("dip").map_err(|e| e.to_string())?;
    let rep = run_dip(&cfg).map_err(|e| e.to_string())?.report;
    ensure!(rep.dip_detected && rep.dip_depth >= 0.01 * rep.baseline_x, "no dip: {rep:?}");
    ensure!(rep.overshoot_detected && rep.overshoot_max > rep.baseline_x, "no overshoot: {rep:?}");
    ensure!(rep.returned_to_baseline && rep.final_deviation.abs() <= 1e-4, "no return: {rep:?}");
    ensure!(rep.ordered(), "events out of order: {rep:?}");
    ensure!(rep.chase_fraction >= 0.95, "chase fraction {}", rep.chase_fraction);
    Ok(format!(
        "dip {:.4} at t={:.1}, overshoot {:.4} at t={:.1}, return t={:.0}, chase {:.3}",
        rep.dip_depth,
        rep.t_min,
        rep.overshoot_max - rep.baseline_x,
        rep.t_overshoot,
        rep.t_return.unwrap_or(f64::NAN),
        rep.chase_fraction
    ))
}

fn buffering_defect(eps: f64, eps_prime: f64) -> Result<f64, String> {
    let mut cfg = default_scenario("buffer").map_err(|e| e.to_string())?;
    cfg.params.base.eps = eps;
    cfg.params.base.eps_prime = eps_prime;
    let sys = cfg.system_2d().map_err(|e| e.to_string())?;
    let period = cfg.period().map_err(|e| e.to_string())?.unwrap();
    let rep = predict_periodic_orbit(&sys, period, (cfg.run.search_lo, cfg.run.search_hi), &cfg.integrator)
        .map_err(|e| e.to_string())?;
    ensure!(rep.condition_b_integral < 0.0, "integral {}", rep.condition_b_integral);
    Ok(rep.period_map_defect)
}

fn criterion_5() -> Outcome {
    let base = buffering_defect(1e-2, 1e-1)?;
    let by_eps_prime = base / buffering_defect(1e-2, 5e-2)?;
    let by_eps = base / buffering_defect(5e-3, 1e-1)?;
    let msg = format!("defect {base:.3e}, ratio under eps' halving {by_eps_prime:.3}, under eps halving {by_eps:.4}");
    ensure!((1.5..=3.0).contains(&by_eps_prime), "{msg}");
    ensure!((1.5..=3.0).contains(&by_eps), "{msg}");
    Ok(msg)
}

fn criterion_6() -> Outcome {
    let cfg = default_scenario("buffer").map_err(|e| e.to_string())?;
    let out = run_buffering(&cfg).map_err(|e| e.to_string())?;
    let orbit = out.orbit.map_err(|e| e)?;
    ensure!(orbit.final_defect <= 1e-10, "shooting defect {:e}", orbit.final_defect);
    ensure!(orbit.max_multiplier_modulus < 1.0, "multiplier {}", orbit.max_multiplier_modulus);
    let gap = out.agreement.ok_or("no agreement")?;
    ensure!(gap <= 1e-6, "stroboscopic limit off by {gap:e}");
    // independent check on the fixed point: one more period from it
    let sys = cfg.system_2d().map_err(|e| e.to_string())?;
    let period = cfg.period().map_err(|e| e.to_string())?.unwrap();
    let again = refine_periodic_orbit(&sys, &orbit.fixed_point, period, &cfg.integrator).map_err(|e| e.to_string())?;
    ensure!(again.iterations <= 1, "fixed point needed {} more iterations", again.iterations);
    Ok(format!(
        "defect {:.1e}, |multiplier| {:.4}, stroboscopic gap {gap:.1e}",
        orbit.final_defect, orbit.max_multiplier_modulus
    ))
}

fn criterion_7() -> Outcome {
    let cfg = default_scenario("sensitivity").map_err(|e| e.to_string())?;
    let table = run_sensitivity_4d(&cfg, cfg.run.delta).map_err(|e| e.to_string())?;
    let summary: Vec<String> = table
        .rows
        .iter()
        .map(|r| format!("{}={}", r.claim.key(), r.matches.map_or("untestable", |m| if m { "ok" } else { "wrong" })))
        .collect();
    let msg = summary.join(", ");
    ensure!(table.all_match(), "{msg}");
    Ok(msg)
}

fn criterion_8() -> Outcome {
    // tolerance ladder on a problem with a known solution
    let sys = Linear::spiral();
    let y0 = DVector::from_vec(vec![1.0, 0.5]);
    for base in [IntegratorConfig::default(), IntegratorConfig::default().explicit()] {
        let mut prev = f64::NAN;
        for i in 0..8 {
            let rtol = 1e-5 / 2f64.powi(i);
            let cfg = IntegratorConfig {
                rel_tol: rtol,
                abs_tol: rtol * 1e-3,
                ..base
            };
            let traj = integrate(&sys, 0.0, 10.0, &y0, &cfg).map_err(|e| e.to_string())?;
            let err = (traj.last_state() - sys.exact(&y0, 10.0)).amax();
            ensure!(i == 0 || prev / err >= 1.5, "error ratio {} at rtol {rtol:e}", prev / err);
            prev = err;
        }
    }
    for (name, sig, horizon) in signal_corpus() {
        let reference = dense_trapezoid(|t| sig.eval(t), 0.0, horizon, 1_000_000) / horizon;
        let e = rel(sig.average(horizon), reference);
        ensure!(e <= 1e-12, "{name}: average off by {e:e}");
    }
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = dir.path().join("short.cfg");
    std::fs::write(&cfg, "scenario = dip\nrun.horizon = 200\nrun.samples = 201\n").map_err(|e| e.to_string())?;
    let cfg = cfg.display().to_string();
    let exe = env!("CARGO_BIN_EXE_lactodyn");
    let status = |args: &[&str]| -> Result<i32, String> {
        let o = Command::new(exe)
            .env_remove("LACTODYN_SEED_DIR")
            .args(args)
            .output()
            .map_err(|e| e.to_string())?;
        o.status.code().ok_or_else(|| "killed".to_string())
    };
    let mut csvs = Vec::new();
    for tag in ["a", "b"] {
        let prefix = dir.path().join(tag).display().to_string();
        ensure!(status(&["simulate", &cfg, "--out", &prefix])? == 0, "simulate failed");
        csvs.push(std::fs::read(format!("{prefix}.csv")).map_err(|e| e.to_string())?);
    }
    ensure!(csvs[0] == csvs[1], "reruns differ");
    let write = |name: &str, text: &str| -> Result<String, String> {
        let p = dir.path().join(name);
        std::fs::write(&p, text).map_err(|e| e.to_string())?;
        Ok(p.display().to_string())
    };
    let cases = [
        (vec!["equilibrium".to_string(), write("bad.cfg", "params.k = oops\n")?], 2),
        (
            vec![
                "equilibrium".into(),
                write("inf.cfg", "signal.J.kind = constant\nsignal.J.value = 5\n")?,
            ],
            3,
        ),
        (
            vec![
                "simulate".into(),
                write("steps.cfg", "integrator.max_steps = 3\n")?,
                "--out".into(),
                dir.path().join("steps").display().to_string(),
            ],
            4,
        ),
        (
            vec![
                "average".into(),
                write("win.cfg", "scenario = buffer\nrun.search_lo = 100\nrun.search_hi = 200\n")?,
            ],
            5,
        ),
        (
            vec!["average".into(), write("newton.cfg", "scenario = buffer\nrun.refine_max_iter = 0\n")?],
            6,
        ),
    ];
    for (args, want) in cases {
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        let got = status(&args)?;
        ensure!(got == want, "{args:?} exited {got}, expected {want}");
    }
    Ok("tolerance ladder, signal averages, byte-identical rerun, exit codes 2-6".into())
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Outcome, u64); 8] = [
        ("equilibrium oracle equivalence", criterion_1, 10),
        ("node certificate", criterion_2, 5),
        ("slow-manifold certificate", criterion_3, 30),
        ("dip reproduction", criterion_4, 20),
        ("averaging prediction", criterion_5, 60),
        ("frequency locking", criterion_6, 60),
        ("4D sensitivity table", criterion_7, 5),
        ("infrastructure", criterion_8, 30),
    ];
    let mut failed = Vec::new();
    let mut err = std::io::stderr().lock();
    for (i, (name, f, budget)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let result = f();
        let took = start.elapsed();
        let result = match result {
            Ok(m) if took > Duration::from_secs(budget) => Err(format!("{m}; took {took:.1?} > {budget} s")),
            other => other,
        };
        let (tag, msg) = match &result {
            Ok(m) => ("PASS", m),
            Err(m) => ("FAIL", m),
        };
        writeln!(err, "criterion {}: {tag} [{:.2?}] {name}: {msg}", i + 1, took).unwrap();
        if result.is_err() {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
