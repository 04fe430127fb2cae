use std::fmt::Write as _;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Serialize;
use stripelight::attack::{affinity_targets, build_signal_bank, select_signal, AffinityTarget, SignalBank};
use stripelight::classifier::{serve_bridge, train_reference, BridgeClassifier, Classifier};
use stripelight::eval::{ambient_sweep, baseline_check, evaluate_with, exposure_sweep, SweepCurve};
use stripelight::pwm::{compile, export_firmware, parse_firmware};
use stripelight::scene::synthesize_pair;
use stripelight::{optimize_signal, Error, Image, LightSignal, Model, Result, ScenePair};

use crate::manifest::Run;

fn required<'a>(value: &'a Option<PathBuf>, key: &str) -> Result<&'a PathBuf> {
    value
        .as_ref()
        .ok_or_else(|| Error::Parse(format!("config key `{key}` is required for this subcommand")))
}

fn load_classifier(run: &mut Run) -> Result<Box<dyn Classifier>> {
    let section = run.config.classifier.clone();
    if let Some(cmd) = &section.bridge_cmd {
        let c = &run.config.camera;
        let timeout = Duration::from_secs_f64(section.timeout_s);
        return Ok(Box::new(BridgeClassifier::spawn(cmd, c.rows, c.cols, section.labels, timeout)?));
    }
    let path = required(&section.model, "classifier.model")?;
    let model = Model::load(run.input("model", path)?)?;
    if let Some(labels) = section.labels {
        if labels != model.labels() {
            return Err(Error::Parse("classifier.labels disagree with the model file".into()));
        }
    }
    Ok(Box::new(model))
}

fn load_png(run: &mut Run, role: &str, path: &Path) -> Result<Image> {
    Image::load_png(run.input(role, path)?)
}

/// The configured scene pair, or one synthesized from the base image.
fn load_scene(run: &mut Run) -> Result<ScenePair> {
    let s = run.config.scene.clone();
    match (&s.ambient, &s.full) {
        (Some(a), Some(f)) => ScenePair::new(load_png(run, "ambient", a)?, load_png(run, "full", f)?),
        (None, None) => {
            let base = required(&s.base, "scene.base")?;
            synthesize_pair(&load_png(run, "base", base)?, &s.targets())
        }
        _ => Err(Error::Parse("set both scene.ambient and scene.full, or neither".into())),
    }
}

fn load_signal(run: &mut Run, role: &str, path: &Path) -> Result<LightSignal> {
    LightSignal::load(run.input(role, path)?)
}

fn load_bank(run: &mut Run, path: &Path) -> Result<SignalBank> {
    SignalBank::load(run.input("bank", path)?)
}

pub fn synth_scene(run: &mut Run) -> Result<()> {
    let base_path = required(&run.config.scene.base, "scene.base")?.clone();
    let base = load_png(run, "base", &base_path)?;
    let pair = synthesize_pair(&base, &run.config.scene.targets())?;
    pair.ambient.save_png(run.output("ambient.png"))?;
    pair.full.save_png(run.output("full.png"))?;
    let (h, w) = pair.dims();
    let mean8 = |img: &Image| img.quantize().iter().map(|&b| b as f64).sum::<f64>() / (255.0 * (h * w * 3) as f64);
    #[derive(Serialize)]
    struct Summary {
        height: usize,
        width: usize,
        target_ambient_mean: f64,
        target_full_mean: f64,
        ambient_mean: f64,
        full_mean: f64,
    }
    let summary = Summary {
        height: h,
        width: w,
        target_ambient_mean: run.config.scene.ambient_mean,
        target_full_mean: run.config.scene.full_mean,
        ambient_mean: mean8(&pair.ambient),
        full_mean: mean8(&pair.full),
    };
    run.write_json("scene.json", &summary)
}

pub fn train_classifier(run: &mut Run) -> Result<()> {
    let trained = train_reference(&run.config.train, run.config.seed)?;
    trained.model.save(run.output("model.json"))?;
    #[derive(Serialize)]
    struct Summary<'a> {
        test_accuracy: f64,
        epoch_losses: &'a [f64],
        labels: Vec<String>,
    }
    let summary = Summary {
        test_accuracy: trained.test_accuracy,
        epoch_losses: &trained.epoch_losses,
        labels: trained.model.labels(),
    };
    run.write_json("training.json", &summary)
}

pub fn attack(run: &mut Run) -> Result<()> {
    let classifier = load_classifier(run)?;
    let scene = load_scene(run)?;
    let timings = run.config.timings()?;
    let config = run.config.attack_config();
    let result = optimize_signal(&scene, &*classifier, &timings, &config)?;
    result.signal.save(run.output("signal.json"))?;
    let mut csv = String::from("iteration,loss,target_confidence\n");
    for (i, (l, c)) in result.loss_trace.iter().zip(&result.confidence_trace).enumerate() {
        let _ = writeln!(csv, "{i},{l:.9},{c:.9}");
    }
    run.write("loss.csv", &csv)?;
    #[derive(Serialize)]
    struct Summary {
        target_class: usize,
        target_label: String,
        final_loss: f64,
        iterations_used: usize,
        converged: bool,
    }
    let summary = Summary {
        target_class: config.target_class,
        target_label: classifier.label(config.target_class),
        final_loss: result.final_loss,
        iterations_used: result.iterations_used,
        converged: result.converged,
    };
    run.write_json("attack.json", &summary)
}

pub fn affinity(run: &mut Run) -> Result<()> {
    let classifier = load_classifier(run)?;
    let scene = load_scene(run)?;
    let timings = run.config.timings()?;
    let (source, targets) = affinity_targets(
        &scene,
        &*classifier,
        &timings,
        &run.config.attack_config(),
        &run.config.affinity,
    )?;
    #[derive(Serialize)]
    struct Summary {
        source_class: usize,
        source_label: String,
        targets: Vec<AffinityTarget>,
    }
    let summary = Summary {
        source_class: source,
        source_label: classifier.label(source),
        targets,
    };
    run.write_json("affinity.json", &summary)
}

pub fn eval(run: &mut Run) -> Result<()> {
    let classifier = load_classifier(run)?;
    let scene = load_scene(run)?;
    let timings = run.config.timings()?;
    let signal_path = required(&run.config.eval.signal, "eval.signal")?.clone();
    let signal = load_signal(run, "signal", &signal_path)?;
    let cfg = run.config.eval.clone();
    let target = cfg.target.unwrap_or(run.config.attack.target_class);
    let report = evaluate_with(
        &signal,
        &scene,
        &*classifier,
        &timings,
        target,
        cfg.n_transforms,
        run.config.seed,
        &cfg.options(),
    )?;
    run.output("eval.csv");
    run.output("eval.json");
    report.save(run.out_dir(), "eval")?;
    if let Some(source) = cfg.baseline_class {
        let base = baseline_check(&scene, &*classifier, &timings, source, cfg.n_transforms, run.config.seed)?;
        run.output("baseline.csv");
        run.output("baseline.json");
        base.save(run.out_dir(), "baseline")?;
    }
    Ok(())
}

#[derive(Serialize)]
struct PointFailure {
    x: f64,
    error: String,
}

fn save_curve(run: &mut Run, stem: &str, title: &str, curve: &SweepCurve, failures: &[PointFailure]) -> Result<()> {
    for ext in ["csv", "svg", "json"] {
        run.output(&format!("{stem}.{ext}"));
    }
    curve.save(run.out_dir(), stem, title)?;
    run.write_json(&format!("{stem}_failures.json"), &failures)
}

fn finish_sweep(curve: &SweepCurve, failures: &[PointFailure]) -> Result<()> {
    if curve.points.is_empty() {
        let first = failures.first().map(|f| f.error.clone()).unwrap_or_default();
        return Err(Error::OutOfRange(format!("every sweep point failed; first error: {first}")));
    }
    Ok(())
}

pub fn sweep_exposure(run: &mut Run) -> Result<()> {
    let classifier = load_classifier(run)?;
    let scene = load_scene(run)?;
    let timings = run.config.timings()?;
    let sweep = run.config.sweep.clone();
    let exposures = if sweep.exposures_us.is_empty() {
        sweep.signals.iter().map(|s| s.exposure_us).collect()
    } else {
        sweep.exposures_us.clone()
    };
    let mut signals = Vec::new();
    for s in &sweep.signals {
        signals.push((s.exposure_us, load_signal(run, "signal", &s.path)?));
    }
    if let Some(bank_path) = &sweep.bank {
        let bank = load_bank(run, bank_path)?;
        let level = scene.ambient.mean();
        for &e in &exposures {
            if !signals.iter().any(|(x, _)| (x - e).abs() <= 1e-9) {
                if let Ok(sig) = select_signal(&bank, level, e) {
                    signals.push((e, sig.clone()));
                }
            }
        }
    }
    let target = run.config.eval.target.unwrap_or(run.config.attack.target_class);
    let n = run.config.eval.n_transforms;
    let mut curve: Option<SweepCurve> = None;
    let mut failures = Vec::new();
    for &e in &exposures {
        match exposure_sweep(&scene, &*classifier, &timings, &signals, &[e], target, n, run.config.seed) {
            Ok(c) => match &mut curve {
                Some(all) => all.points.extend(c.points),
                None => curve = Some(c),
            },
            Err(err) => failures.push(PointFailure {
                x: e,
                error: err.to_string(),
            }),
        }
    }
    let curve = curve.unwrap_or_else(|| SweepCurve {
        x_label: "exposure_us".into(),
        detail_label: "window_slots".into(),
        points: Vec::new(),
    });
    save_curve(run, "sweep_exposure", "Success versus exposure", &curve, &failures)?;
    finish_sweep(&curve, &failures)
}

pub fn sweep_ambient(run: &mut Run) -> Result<()> {
    let classifier = load_classifier(run)?;
    let timings = run.config.timings()?;
    let sweep = run.config.sweep.clone();
    let base_path = required(&run.config.scene.base, "scene.base")?.clone();
    let base = load_png(run, "base", &base_path)?;
    let bank = load_bank(run, required(&sweep.bank, "sweep.bank")?)?;
    let exposure = sweep.exposure_us.unwrap_or(timings.exposure_us);
    let target = run.config.eval.target.unwrap_or(run.config.attack.target_class);
    let n = run.config.eval.n_transforms;
    let mut curve: Option<SweepCurve> = None;
    let mut failures = Vec::new();
    for &level in &sweep.levels {
        match ambient_sweep(&base, &*classifier, &bank, &timings, &[level], exposure, target, n, run.config.seed) {
            Ok(c) => match &mut curve {
                Some(all) => all.points.extend(c.points),
                None => curve = Some(c),
            },
            Err(err) => failures.push(PointFailure {
                x: level,
                error: err.to_string(),
            }),
        }
    }
    let curve = curve.unwrap_or_else(|| SweepCurve {
        x_label: "led_fraction".into(),
        detail_label: "ambient_mean".into(),
        points: Vec::new(),
    });
    save_curve(run, "sweep_ambient", "Success versus LED fraction", &curve, &failures)?;
    finish_sweep(&curve, &failures)
}

pub fn bank(run: &mut Run) -> Result<()> {
    let classifier = load_classifier(run)?;
    let timings = run.config.timings()?;
    let base_path = required(&run.config.scene.base, "scene.base")?.clone();
    let base = load_png(run, "base", &base_path)?;
    let b = run.config.bank.clone();
    let bank = build_signal_bank(
        &base,
        &*classifier,
        &timings,
        &b.levels,
        &b.exposures_us,
        b.full_mean,
        &run.config.attack_config(),
    )?;
    bank.save(run.output("bank.json"))
}

pub fn select(run: &mut Run) -> Result<()> {
    let timings = run.config.timings()?;
    let s = run.config.select.clone();
    let bank = load_bank(run, required(&s.bank, "select.bank")?)?;
    let level = s
        .level
        .ok_or_else(|| Error::Parse("config key `select.level` is required for this subcommand".into()))?;
    let exposure = s.exposure_us.unwrap_or(timings.exposure_us);
    select_signal(&bank, level, exposure)?.save(run.output("signal.json"))
}

pub fn compile_pwm(run: &mut Run) -> Result<()> {
    let p = run.config.pwm.clone();
    let signal = load_signal(run, "signal", required(&p.signal, "pwm.signal")?)?;
    let schedule = compile(&signal, p.slot_us, p.grid_us)?;
    schedule.save(run.output("schedule.json"))?;
    let header = export_firmware(&schedule);
    run.write("schedule.h", &header)?;
    // Replay what the firmware will actually play.
    let replay = parse_firmware(&header)?;
    if replay != schedule {
        return Err(Error::MalformedSchedule("firmware export does not re-parse to the schedule".into()));
    }
    let duties = replay.simulate()?;
    let max_error = duties
        .iter()
        .zip(signal.values())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    #[derive(Serialize)]
    struct Summary {
        slots: usize,
        events: usize,
        period_us: u64,
        max_duty_error: f64,
        duty_error_bound: f64,
    }
    let summary = Summary {
        slots: schedule.slots.len(),
        events: schedule.event_count(),
        period_us: schedule.period_us(),
        max_duty_error: max_error,
        duty_error_bound: p.grid_us as f64 / (2.0 * p.slot_us as f64) + 1.0 / p.slot_us as f64,
    };
    run.write_json("pwm.json", &summary)
}

/// Serves the configured classifier over the bridge protocol on stdio.
pub fn bridge_serve(run: &mut Run) -> Result<()> {
    run.config.classifier.bridge_cmd = None;
    let classifier = load_classifier(run)?;
    let stdin = std::io::stdin();
    serve_bridge(&*classifier, BufReader::new(stdin.lock()), BufWriter::new(std::io::stdout().lock()))
}
