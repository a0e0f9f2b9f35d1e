use super::output::{manifest_text, trajectory_csv, Table};
use super::{Cli, CliError, Command, PlotKind, Source};
use crate::averaging::{predict_periodic_orbit, refine_periodic_orbit_with};
use crate::config::{load_config, parse_config_with, read_file, seed_scenario, to_text};
use crate::equilibria::{classify_2d, equilibrium_2d, equilibrium_4d, EquilibriumReport};
use crate::manifold::{
    manifold_point_2d, manifold_point_4d, mu_bound_2d, mu_bound_4d, phi_2d, phi_4d, slice_2d, slice_4d, slice_to_csv,
};
use crate::scenarios::{run_buffering, run_dip, run_sensitivity_4d, simulate, ModelKind, ScenarioConfig};
use crate::signals::fmt17;
use serde_json::{json, Value};
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

type Out<'a> = &'a mut dyn Write;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn emit(out: Out, text: &str) -> Result<(), CliError> {
    out.write_all(text.as_bytes()).map_err(|e| io_err(Path::new("<stdout>"), e))
}

fn emit_json(out: Out, value: &Value) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("reports serialize");
    text.push('\n');
    emit(out, &text)
}

fn resolve(source: &Source, fallback: &str) -> Result<ScenarioConfig, CliError> {
    match (&source.config, &source.scenario) {
        (Some(path), None) => Ok(load_config(path)?),
        (Some(path), Some(name)) => {
            let text = read_file(path)?;
            Ok(parse_config_with(&text, &[("scenario", name)])?)
        }
        (None, name) => {
            let cfg = seed_scenario(name.as_deref().unwrap_or(fallback))?;
            cfg.validate()?;
            Ok(cfg)
        }
    }
}

pub(super) fn dispatch(cli: &Cli, out: Out) -> Result<(), CliError> {
    match &cli.command {
        Command::Simulate {
            configs,
            model,
            out: prefix,
            jobs,
        } => cmd_simulate(configs, model.as_deref(), prefix.as_deref(), *jobs, cli.json, out),
        Command::Equilibrium { source, csv } => cmd_equilibrium(&resolve(source, "dip")?, csv.as_deref(), cli.json, out),
        Command::Manifold {
            source,
            slice,
            points,
            x_min,
            x_max,
            v_min,
            v_max,
            time,
            csv,
        } => {
            let cfg = resolve(source, "dip")?;
            let window = Window {
                points: *points,
                x: (*x_min, *x_max),
                v: (*v_min, *v_max),
                time: *time,
            };
            cmd_manifold(&cfg, *slice, &window, csv.as_deref(), cli.json, out)
        }
        Command::Average { source, period } => cmd_average(&resolve(source, "buffer")?, *period, cli.json, out),
        Command::Dip { source, csv } => cmd_dip(&resolve(source, "dip")?, csv.as_deref(), cli.json, out),
        Command::Buffer { source, csv } => cmd_buffer(&resolve(source, "buffer")?, csv.as_deref(), cli.json, out),
        Command::Sensitivity { source, csv } => {
            cmd_sensitivity(&resolve(source, "sensitivity")?, csv.as_deref(), cli.json, out)
        }
        Command::Plotdata {
            input,
            kind,
            config,
            scenario,
            plane,
        } => {
            let source = Source {
                config: config.clone(),
                scenario: scenario.clone(),
            };
            cmd_plotdata(input, *kind, &source, plane, out)
        }
        Command::Defaults { name } => emit(out, &to_text(&seed_scenario(name)?)),
    }
}

fn output_prefix(config: &Path, prefix: Option<&str>, many: bool) -> String {
    let stem = config.file_stem().map_or("run".into(), |s| s.to_string_lossy().into_owned());
    match (prefix, many) {
        (Some(p), false) => p.to_string(),
        (Some(p), true) => format!("{p}-{stem}"),
        (None, _) => config.with_file_name(&stem).to_string_lossy().into_owned(),
    }
}

fn simulate_one(config: &Path, model: Option<&str>, prefix: &str) -> Result<(String, String), CliError> {
    let text = read_file(config)?;
    let extra: Vec<(&str, &str)> = model.map(|m| ("model", m)).into_iter().collect();
    let cfg = parse_config_with(&text, &extra)?;
    let traj = simulate(&cfg)?;
    let csv = trajectory_csv(&traj, cfg.model, cfg.run.samples);
    let csv_path = format!("{prefix}.csv");
    let manifest_path = format!("{prefix}.manifest");
    let csv_name = Path::new(&csv_path)
        .file_name()
        .map_or(csv_path.clone(), |n| n.to_string_lossy().into_owned());
    let manifest = manifest_text(
        &cfg,
        Some((&config.display().to_string(), text.as_bytes())),
        &[(&csv_name, csv.as_bytes())],
    );
    write_file(Path::new(&csv_path), &csv)?;
    write_file(Path::new(&manifest_path), &manifest)?;
    Ok((csv_path, manifest_path))
}

fn cmd_simulate(
    configs: &[PathBuf],
    model: Option<&str>,
    prefix: Option<&str>,
    jobs: usize,
    json: bool,
    out: Out,
) -> Result<(), CliError> {
    if let Some(m) = model {
        m.parse::<ModelKind>().map_err(CliError::Usage)?;
    }
    let many = configs.len() > 1;
    let prefixes: Vec<String> = configs.iter().map(|c| output_prefix(c, prefix, many)).collect();
    let jobs = jobs.clamp(1, configs.len());
    let mut results: Vec<Option<Result<(String, String), CliError>>> = (0..configs.len()).map(|_| None).collect();
    if jobs == 1 {
        for (i, c) in configs.iter().enumerate() {
            results[i] = Some(simulate_one(c, model, &prefixes[i]));
        }
    } else {
        let next = std::sync::atomic::AtomicUsize::new(0);
        let slots = std::sync::Mutex::new(&mut results);
        std::thread::scope(|scope| {
            for _ in 0..jobs {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                    if i >= configs.len() {
                        break;
                    }
                    let r = simulate_one(&configs[i], model, &prefixes[i]);
                    slots.lock().unwrap()[i] = Some(r);
                });
            }
        });
    }

    let mut first_err = None;
    let mut report = Vec::new();
    let mut text = String::new();
    for (cfg, r) in configs.iter().zip(results) {
        match r.expect("every job ran") {
            Ok((csv, manifest)) => {
                writeln!(text, "output = {csv}\nmanifest = {manifest}").unwrap();
                report.push(json!({"config": cfg.display().to_string(), "csv": csv, "manifest": manifest}));
            }
            Err(e) => {
                eprintln!("error: {}: {e}", cfg.display());
                first_err.get_or_insert(e);
            }
        }
    }
    if json {
        emit_json(out, &Value::Array(report))?;
    } else {
        emit(out, &text)?;
    }
    first_err.map_or(Ok(()), Err)
}

fn equilibrium_of(cfg: &ScenarioConfig) -> Result<EquilibriumReport, CliError> {
    let infeasible = |e: crate::equilibria::EquilibriumError| CliError::Infeasible(e.to_string());
    let report = match cfg.model {
        ModelKind::TwoD => {
            let sys = cfg.system_2d()?;
            let f0 = sys.input.eval(0.0);
            let mut r = equilibrium_2d(sys.control.signal.eval(0.0), f0, &sys.params).map_err(infeasible)?;
            if sys.control.coupling != 0.0 {
                let lin = classify_2d(&r, &sys.params, sys.control.coupling, f0).map_err(|e| CliError::Infeasible(e.to_string()))?;
                r.eigenvalues = lin.eigenvalues.iter().map(|&e| e.into()).collect();
                r.classification = lin.classification;
                r.stable = lin.eigenvalues.iter().all(|e| e.re < 0.0);
            }
            r
        }
        ModelKind::FourD => {
            let sys = cfg.system_4d()?;
            let j = [0, 1, 2].map(|i| sys.controls[i].signal.eval(0.0));
            equilibrium_4d(j[0], j[1], j[2], sys.input.eval(0.0), &sys.params).map_err(infeasible)?
        }
    };
    Ok(report)
}

fn equilibrium_pairs(cfg: &ScenarioConfig, r: &EquilibriumReport) -> Vec<(String, String)> {
    let names: &[&str] = match cfg.model {
        ModelKind::TwoD => &["x0", "y0"],
        ModelKind::FourD => &["x0", "u0", "v0", "y0"],
    };
    let mut pairs: Vec<(String, String)> = names.iter().zip(&r.point).map(|(n, v)| (n.to_string(), fmt17(*v))).collect();
    for (i, e) in r.eigenvalues.iter().enumerate() {
        pairs.push((format!("lambda_re_{i}"), fmt17(e.re)));
        pairs.push((format!("lambda_im_{i}"), fmt17(e.im)));
    }
    pairs.push(("class".into(), r.classification.to_string()));
    pairs.push(("stable".into(), r.stable.to_string()));
    pairs.push(("feasible".into(), r.feasible.to_string()));
    pairs.push(("residual".into(), fmt17(r.residual_norm)));
    pairs
}

fn cmd_equilibrium(cfg: &ScenarioConfig, csv: Option<&Path>, json: bool, out: Out) -> Result<(), CliError> {
    let r = equilibrium_of(cfg)?;
    let pairs = equilibrium_pairs(cfg, &r);
    if let Some(path) = csv {
        let head: Vec<&str> = pairs.iter().map(|(k, _)| k.as_str()).collect();
        let row: Vec<&str> = pairs.iter().map(|(_, v)| v.as_str()).collect();
        write_file(path, &format!("{}\n{}\n", head.join(","), row.join(",")))?;
    }
    if json {
        emit_json(out, &serde_json::to_value(&r).expect("serializable"))?;
    } else {
        emit(out, &pairs.iter().map(|(k, v)| format!("{k} = {v}\n")).collect::<String>())?;
    }
    if !r.feasible {
        return Err(CliError::Infeasible("stationary point has a negative concentration".into()));
    }
    Ok(())
}

struct Window {
    points: usize,
    x: (Option<f64>, Option<f64>),
    v: (Option<f64>, Option<f64>),
    time: f64,
}

fn cmd_manifold(
    cfg: &ScenarioConfig,
    slice: bool,
    w: &Window,
    csv: Option<&Path>,
    json: bool,
    out: Out,
) -> Result<(), CliError> {
    let eq = equilibrium_of(cfg)?;
    let x_win = (w.x.0.unwrap_or(0.0), w.x.1.unwrap_or(2.0 * eq.x()));
    let t_span = (0.0, cfg.period()?.unwrap_or(cfg.run.horizon));
    let infeasible = |e: crate::manifold::ManifoldError| CliError::Infeasible(e.to_string());
    let (grid, mu, at_eq) = match cfg.model {
        ModelKind::TwoD => {
            let sys = cfg.system_2d()?;
            let f_val = sys.input.eval(w.time);
            let grid = slice_2d(x_win.0, x_win.1, w.points, f_val, &sys.params).map_err(infeasible)?;
            let mu = mu_bound_2d(x_win, t_span, &sys.params, &sys.input, crate::manifold::DEFAULT_GRID).map_err(infeasible)?;
            let at = manifold_point_2d(eq.x(), sys.input.eval(0.0), &sys.params).map_err(infeasible)?;
            (grid, mu, at)
        }
        ModelKind::FourD => {
            let sys = cfg.system_4d()?;
            let f_val = sys.input.eval(w.time);
            let v0 = eq.point[2];
            let v_win = (w.v.0.unwrap_or(0.0), w.v.1.unwrap_or(2.0 * v0));
            let grid = slice_4d(x_win, v_win, w.points, f_val, &sys.params).map_err(infeasible)?;
            let mu = mu_bound_4d(x_win, v_win, t_span, &sys.params, &sys.input, crate::manifold::DEFAULT_GRID)
                .map_err(infeasible)?;
            let at = manifold_point_4d(eq.x(), v0, sys.input.eval(0.0), &sys.params).map_err(infeasible)?;
            (grid, mu, at)
        }
    };
    let slice_csv = slice_to_csv(&grid);
    if let Some(path) = csv {
        write_file(path, &slice_csv)?;
    }
    if slice {
        return emit(out, &slice_csv);
    }
    let max_gprime = grid.iter().map(|p| p.gprime_y).fold(f64::NEG_INFINITY, f64::max);
    let pairs = [
        ("mu_bound", mu.mu),
        ("mu_analytic_floor", mu.analytic_floor),
        ("mu_t_argmin", mu.t_argmin),
        ("mu_x_argmin", mu.x_argmin),
        ("phi_at_x0", at_eq.y),
        ("y0", eq.y()),
        ("gprime_y_at_x0", at_eq.gprime_y),
        ("max_gprime_y_on_slice", max_gprime),
    ];
    if json {
        let mut map = serde_json::Map::new();
        for (k, v) in pairs {
            map.insert(k.into(), json!(v));
        }
        map.insert("attracting".into(), json!(max_gprime < 0.0));
        emit_json(out, &Value::Object(map))
    } else {
        let mut text: String = pairs.iter().map(|(k, v)| format!("{k} = {}\n", fmt17(*v))).collect();
        writeln!(text, "attracting = {}", max_gprime < 0.0).unwrap();
        emit(out, &text)
    }
}

fn cmd_average(cfg: &ScenarioConfig, period: Option<f64>, json: bool, out: Out) -> Result<(), CliError> {
    let sys = cfg.system_2d()?;
    let period = match (cfg.period()?, period) {
        (Some(p), Some(q)) if p != q => {
            return Err(CliError::Usage(format!("--period {q} conflicts with the signals' period {p}")))
        }
        (Some(p), _) | (None, Some(p)) => p,
        (None, None) => 1.0,
    };
    let avg = predict_periodic_orbit(&sys, period, (cfg.run.search_lo, cfg.run.search_hi), &cfg.integrator)?;
    let orbit = refine_periodic_orbit_with(&sys, &avg.predicted_initial, period, &cfg.integrator, cfg.run.refine_max_iter)?;
    if json {
        return emit_json(out, &json!({"averaging": avg, "orbit": orbit}));
    }
    let mut text = avg.to_key_value();
    for line in orbit.to_key_value().lines() {
        writeln!(text, "orbit.{line}").unwrap();
    }
    emit(out, &text)
}

fn cmd_dip(cfg: &ScenarioConfig, csv: Option<&Path>, json: bool, out: Out) -> Result<(), CliError> {
    let outcome = run_dip(cfg)?;
    if let Some(path) = csv {
        let mut text = String::from("t,x,y,x_target\n");
        for row in &outcome.target {
            let y = outcome
                .trajectory
                .dense_eval(row[0])
                .map_err(|e| CliError::Integration(e.to_string()))?[1];
            writeln!(text, "{},{},{},{}", fmt17(row[0]), fmt17(row[1]), fmt17(y), fmt17(row[2])).unwrap();
        }
        write_file(path, &text)?;
    }
    if json {
        let mut v = serde_json::to_value(&outcome.report).expect("serializable");
        v["ordered"] = json!(outcome.report.ordered());
        emit_json(out, &v)
    } else {
        emit(out, &outcome.report.to_key_value())
    }
}

fn cmd_buffer(cfg: &ScenarioConfig, csv: Option<&Path>, json: bool, out: Out) -> Result<(), CliError> {
    let outcome = run_buffering(cfg)?;
    if let Some(path) = csv {
        write_file(path, &outcome.report.to_csv())?;
    }
    if json {
        let as_value = |r: &Result<Value, String>| match r {
            Ok(v) => v.clone(),
            Err(e) => json!({ "error": e }),
        };
        let avg = outcome.averaging.as_ref().map(|a| serde_json::to_value(a).unwrap()).map_err(Clone::clone);
        let orbit = outcome.orbit.as_ref().map(|o| serde_json::to_value(o).unwrap()).map_err(Clone::clone);
        return emit_json(
            out,
            &json!({
                "buffering": outcome.report,
                "averaging": as_value(&avg),
                "orbit": as_value(&orbit),
                "agreement": outcome.agreement,
            }),
        );
    }
    let mut text = outcome.report.to_key_value();
    match &outcome.averaging {
        Ok(a) => a.to_key_value().lines().for_each(|l| writeln!(text, "averaging.{l}").unwrap()),
        Err(e) => writeln!(text, "averaging.error = {e}").unwrap(),
    }
    match &outcome.orbit {
        Ok(o) => o.to_key_value().lines().for_each(|l| writeln!(text, "orbit.{l}").unwrap()),
        Err(e) => writeln!(text, "orbit.error = {e}").unwrap(),
    }
    if let Some(a) = outcome.agreement {
        writeln!(text, "agreement = {}", fmt17(a)).unwrap();
    }
    emit(out, &text)
}

fn cmd_sensitivity(cfg: &ScenarioConfig, csv: Option<&Path>, json: bool, out: Out) -> Result<(), CliError> {
    let table = run_sensitivity_4d(cfg, cfg.run.delta)?;
    if let Some(path) = csv {
        let mut text = String::from("claim,combination_change,response,expected_sign,observed_sign,matches\n");
        for r in &table.rows {
            writeln!(
                text,
                "{},{},{},{},{},{}",
                r.claim.key(),
                fmt17(r.combination_change),
                fmt17(r.response),
                r.expected_sign,
                r.observed_sign.map_or("nan".into(), |s| s.to_string()),
                r.matches.map_or("untestable".into(), |m| m.to_string())
            )
            .unwrap();
        }
        write_file(path, &text)?;
    }
    if json {
        let mut v = serde_json::to_value(&table).expect("serializable");
        v["all_match"] = json!(table.all_match());
        emit_json(out, &v)
    } else {
        emit(out, &table.to_key_value())
    }
}

fn cmd_plotdata(input: &Path, kind: PlotKind, source: &Source, plane: &str, out: Out) -> Result<(), CliError> {
    let text = std::fs::read_to_string(input).map_err(|e| io_err(input, e))?;
    let schema = |msg: String| CliError::Usage(format!("{}: {msg}", input.display()));
    let table = Table::parse(&text).map_err(schema)?;
    let model = match table.columns.join(",").as_str() {
        "t,x,y" => ModelKind::TwoD,
        "t,x,u,v,y" => ModelKind::FourD,
        other => return Err(schema(format!("expected header t,x,y or t,x,u,v,y, found {other}"))),
    };
    let result = match kind {
        PlotKind::Timeseries => table.select(&["t", "x"]).map_err(schema)?,
        PlotKind::Phase => {
            let cols: Vec<&str> = plane.split(',').map(str::trim).collect();
            if cols.len() != 2 {
                return Err(CliError::Usage(format!("--plane needs two columns, got {plane:?}")));
            }
            table.select(&cols).map_err(schema)?
        }
        PlotKind::ManifoldOverlay => {
            let mut cfg = resolve(source, "dip")?;
            if cfg.model != model {
                if source.config.is_some() {
                    return Err(schema(format!("trajectory is {model} but the config is {}", cfg.model)));
                }
                cfg = resolve(
                    &Source {
                        config: None,
                        scenario: Some(if model == ModelKind::FourD { "sensitivity" } else { "dip" }.into()),
                    },
                    "dip",
                )?;
            }
            let mut t = table.clone();
            t.columns.push("phi".into());
            let infeasible = |e: crate::manifold::ManifoldError| CliError::Infeasible(e.to_string());
            match model {
                ModelKind::TwoD => {
                    let sys = cfg.system_2d()?;
                    for row in &mut t.rows {
                        let phi = phi_2d(row[1], row[0], &sys.params, &sys.input).map_err(infeasible)?;
                        row.push(phi);
                    }
                }
                ModelKind::FourD => {
                    let sys = cfg.system_4d()?;
                    for row in &mut t.rows {
                        let phi = phi_4d(row[1], row[3], row[0], &sys.params, &sys.input).map_err(infeasible)?;
                        row.push(phi);
                    }
                }
            }
            t
        }
    };
    emit(out, &result.to_csv())
}

