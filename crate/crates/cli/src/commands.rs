use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use mapd::config::RunConfig;
use mapd::dataset::{load_dataset, node_positions, save_dataset, slot_problem, split_windows, Dataset};
use mapd::eval::{self, emit_report, evaluate, time_inference, MetricReport, Persistence};
use mapd::models::{load_model, save_model, train as train_model, Model};
use mapd::pso::optimize_slot;

use crate::error::{Category, CliError};

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write(path: &Path, body: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, body).map_err(|e| CliError::io(path, e))
}

pub fn gen_data(config: &RunConfig, out: &Path) -> Result<(), CliError> {
    ensure_dir(out)?;
    let slots = config.trajectories.slots;
    let ds = config.build_dataset(|r| {
        if (r.t + 1) % 20 == 0 || r.t + 1 == slots {
            eprintln!("slot {}/{slots}: secrecy {:.4} bit/s/Hz", r.t + 1, r.secrecy);
        }
    })?;
    let path = out.join("dataset.mapd");
    save_dataset(&ds, &path)?;
    println!("{}", path.display());
    Ok(())
}

pub fn optimize(config: &RunConfig, slot: usize, dataset: Option<&Path>, out: &Path) -> Result<(), CliError> {
    let nodes = node_positions(&config.trajectories.bob_spec(), &config.trajectories.eve_spec(), config.seed)?;
    let &(bob, eve) = nodes
        .get(slot)
        .ok_or_else(|| CliError::config(format!("slot {slot} is outside the {}-slot trajectory", nodes.len())))?;
    let prev = match (slot, dataset) {
        (0, _) => None,
        (_, Some(p)) => {
            let ds = load_dataset(p)?;
            let rec = ds.records.get(slot - 1).ok_or_else(|| {
                CliError::config(format!("{} has no slot {}", p.display(), slot - 1))
            })?;
            Some(rec.layout.clone())
        }
        (_, None) => return Err(CliError::config(format!("slot {slot} needs --dataset for the previous layout"))),
    };
    let fixed = config.scenario.fixed_layout()?;
    let (evaluator, cfg) = slot_problem(&config.scenario, &config.swarm, config.seed, slot, bob, eve)?;
    let fitness = |l: &mapd::channel::ArrayLayout| evaluator.evaluate(l);
    let warm = prev.as_ref().unwrap_or(&fixed);
    let sol = optimize_slot(&fitness, &cfg, prev.as_ref(), Some(warm))?;
    if !sol.fitness.is_finite() {
        return Err(CliError::new(Category::Numeric, format!("slot {slot}: fitness is {}", sol.fitness)));
    }

    ensure_dir(out)?;
    let mut hist = Vec::new();
    sol.write_diagnostics_csv(&mut hist).expect("write to memory");
    let hist_path = out.join(format!("pso_slot{slot}.csv"));
    write(&hist_path, hist)?;
    let mut layout = String::from("antenna,x_m,y_m,z_m\n");
    for (i, p) in sol.layout.positions.iter().enumerate() {
        layout.push_str(&format!("{i},{},{},{}\n", p.x, p.y, p.z));
    }
    write(&out.join(format!("pso_slot{slot}_layout.csv")), layout)?;
    println!(
        "slot {slot}: secrecy {:.6} bit/s/Hz (fixed grid {:.6}), last improvement at iteration {}",
        sol.fitness,
        evaluator.evaluate(&fixed),
        sol.converged_at
    );
    println!("{}", hist_path.display());
    Ok(())
}

pub fn train(config: &RunConfig, dataset: &Path, out: &Path) -> Result<(), CliError> {
    let ds = load_dataset(dataset)?;
    let set = config.windows(&ds)?;
    let (model, report) = train_model(&config.model, &set, ds.meta.bounds)?;
    ensure_dir(out)?;
    let kind = model.kind();
    let mut csv = Vec::new();
    report.write_csv(&mut csv).expect("write to memory");
    write(&out.join(format!("{kind}_loss.csv")), csv)?;
    let mut timing = Vec::new();
    report.write_timing_csv(&mut timing).expect("write to memory");
    write(&out.join(format!("{kind}_timing.csv")), timing)?;
    let path = out.join(format!("{kind}.model"));
    save_model(&model, &path)?;
    let best = &report.epochs[report.best_epoch.max(1) - 1];
    println!(
        "{kind}: {} parameters, best epoch {} (val NMSE {:.4e}), {} epochs run",
        model.param_count(),
        report.best_epoch,
        best.val_nmse,
        report.epochs.len()
    );
    println!("{}", path.display());
    Ok(())
}

fn check_finite(r: &MetricReport) -> Result<(), CliError> {
    let mut values = vec![r.nmse, r.accuracy, r.mse.median];
    values.extend(r.horizon_nmse.iter().map(|p| p.1));
    if values.iter().any(|v| !v.is_finite()) {
        return Err(CliError::new(Category::Numeric, format!("{}: non-finite metric", r.model)));
    }
    Ok(())
}

pub fn eval(config: &RunConfig, dataset: &Path, models: &[PathBuf], timing: bool, out: &Path) -> Result<(), CliError> {
    let ds: Dataset = load_dataset(dataset)?;
    let loaded: Vec<Model> = models.iter().map(|p| load_model(p, None)).collect::<Result<_, _>>()?;
    let mut reports = Vec::new();
    let (hist, pre) = loaded.first().map_or((config.model.hist, config.model.pre), |m| (m.config.hist, m.config.pre));
    let base = split_windows(&ds, hist, pre, config.windows.stride, config.split())?;
    let persistence = Persistence { width: base.width() };
    reports.push(evaluate(&persistence, &ds, &base, &config.scenario, &config.eval, config.seed)?);
    for m in &loaded {
        let set = split_windows(&ds, m.config.hist, m.config.pre, config.windows.stride, config.split())?;
        let mut r = evaluate(m, &ds, &set, &config.scenario, &config.eval, config.seed)?;
        if timing {
            let first = set.subset(&set.test).first().map(|w| set.normalizer.denormalize(&w.input));
            if let Some(history) = first {
                r.inference = Some(time_inference(m, &history, config.eval.repetitions)?);
            }
        }
        reports.push(r);
    }
    for r in &reports {
        check_finite(r)?;
    }
    ensure_dir(out)?;
    let path = out.join("metrics.json");
    write(&path, serde_json::to_string_pretty(&reports).expect("metrics serialise") + "\n")?;
    let mut stdout = std::io::stdout().lock();
    for r in &reports {
        let h = r.horizon_nmse.last().map_or(f64::NAN, |p| p.1);
        let t = r.inference.as_ref().map_or(String::new(), |t| format!(", predict {:.3} ms", t.mean_ms));
        let _ = writeln!(
            stdout,
            "{:>16}: window NMSE {:.4e}, NMSE@{} {:.4e}, accuracy {:.3}{t}",
            r.model,
            r.nmse,
            r.horizon_nmse.last().map_or(0, |p| p.0),
            h,
            r.accuracy
        );
    }
    let _ = writeln!(stdout, "{}", path.display());
    Ok(())
}

pub fn gain_pattern(config: &RunConfig, dataset: &Path, slot: usize, step_deg: f64, out: &Path) -> Result<(), CliError> {
    let ds = load_dataset(dataset)?;
    let rec = ds
        .records
        .get(slot)
        .ok_or_else(|| CliError::config(format!("{} has no slot {slot}", dataset.display())))?;
    let fixed = config.scenario.fixed_layout()?;
    let target = rec.bob - config.scenario.array_center()?;
    let rows = eval::gain_pattern(&fixed, &rec.layout, target, config.scenario.tx_power_w, ds.meta.wavelength, step_deg)?;
    ensure_dir(out)?;
    let mut csv = String::from("azimuth_deg,fixed_db,optimized_db,mrt_db\n");
    for r in &rows {
        csv.push_str(&format!("{},{},{},{}\n", r.azimuth_deg, r.fixed_db, r.optimized_db, r.mrt_db));
    }
    let path = out.join(format!("gain_pattern_slot{slot}.csv"));
    write(&path, csv)?;
    let series = |name: &str, f: fn(&eval::PatternRow) -> f64| eval::Series {
        name: name.into(),
        points: rows.iter().map(|r| (r.azimuth_deg, f(r))).collect(),
    };
    let svg = eval::line_chart(
        &format!("Array gain, slot {slot}"),
        "azimuth (deg)",
        "gain (dB)",
        &[series("fixed", |r| r.fixed_db), series("optimized", |r| r.optimized_db), series("mrt", |r| r.mrt_db)],
        false,
    );
    write(&out.join(format!("gain_pattern_slot{slot}.svg")), svg)?;
    println!("{}", path.display());
    Ok(())
}

pub fn report(metrics: &Path, out: &Path) -> Result<(), CliError> {
    let text = fs::read_to_string(metrics).map_err(|e| CliError::io(metrics, e))?;
    let reports: Vec<MetricReport> = serde_json::from_str(&text).map_err(|e| CliError::io(metrics, e))?;
    let manifest = emit_report(&reports, out)?;
    for f in &manifest.files {
        println!("{}", out.join(&f.file).display());
    }
    Ok(())
}
