//! Acceptance checks for the whole pipeline. Prints one PASS/FAIL line per
//! criterion and exits nonzero if any fails.
//!
//! `STRIPELIGHT_ACCEPTANCE=1,8` runs a subset.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stripelight::attack::{build_signal_bank, scene_at_level, SignalBank};
use stripelight::camera::{reparameterize, reparameterize_backward, signal_length, SRGB_GAMMA};
use stripelight::classifier::{clean_exemplar, evaluate_accuracy, shape_labels, Dataset, ShapeClass, TrainConfig};
use stripelight::eval::{ambient_sweep, baseline_check, evaluate, exposure_sweep};
use stripelight::pwm::{compile_duties, export_firmware, parse_firmware};
use stripelight::render::cyclic_shift;
use stripelight::scene::{synthesize_pair, SceneTargets, DEFAULT_FULL_MEAN};
use stripelight::{optimize_signal, AttackConfig, CameraTimings, Classifier, Image, LightSignal, Model, Renderer, ScenePair};

const MODEL_PATH: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/assets/reference_model.json");
/// Seed the bundled model was trained with (`train_reference` defaults).
const MODEL_TRAIN_SEED: u64 = 1;

/// Desk-scale scene: the clean exemplar of `SOURCE` drawn with `SCENE_SEED`.
const SOURCE: ShapeClass = ShapeClass::Ring;
const SCENE_SEED: u64 = 0;
const TARGET: ShapeClass = ShapeClass::Ell;
const SLOT_US: f64 = 120.0;
const N_TRANSFORMS: usize = 50;
const CHANCE: f64 = 0.1;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

type Check = fn(&mut Shared) -> Outcome;

/// Artifacts reused between criteria.
#[derive(Default)]
struct Shared {
    model: Option<Model>,
    window5_signal: Option<LightSignal>,
    bank: Option<SignalBank>,
}

impl Shared {
    fn model(&mut self) -> &Model {
        self.model
            .get_or_insert_with(|| Model::load(MODEL_PATH).expect("bundled reference model"))
    }
}

fn camera(exposure_us: f64) -> CameraTimings {
    CameraTimings::new(SLOT_US, exposure_us, 64, 64, SRGB_GAMMA).unwrap()
}

fn desk_scene() -> ScenePair {
    synthesize_pair(&clean_exemplar(SOURCE, 64, SCENE_SEED), &SceneTargets::default()).unwrap()
}

/// Smaller steps and a larger batch than the defaults: the defaults stop
/// on the loss plateau at roughly 0.69 success for this scene.
fn attack_config(seed: u64) -> AttackConfig {
    let mut cfg = AttackConfig {
        target_class: TARGET.index(),
        batch_size: 16,
        convergence_window: 400,
        seed,
        ..AttackConfig::default()
    };
    cfg.adam.learning_rate = 0.005;
    cfg
}

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize, lo: f64, hi: f64) -> Image {
    let mut img = Image::zeros(h, w);
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                img.set(c, y, x, rng.random_range(lo..hi));
            }
        }
    }
    img
}

/// Ambient strictly below full so composition never clamps.
fn random_scene(rng: &mut ChaCha8Rng, h: usize, w: usize) -> ScenePair {
    let full = random_image(rng, h, w, 0.3, 0.95);
    let mut ambient = full.clone();
    for v in ambient.data_mut() {
        *v *= rng.random_range(0.1..0.9);
    }
    ScenePair::new(ambient, full).unwrap()
}

fn random_signal(rng: &mut ChaCha8Rng, t: CameraTimings) -> LightSignal {
    let n = 3 * signal_length(&t);
    LightSignal::new(t, (0..n).map(|_| rng.random::<f64>()).collect()).unwrap()
}

// 1. Analytic gradient of the loss with respect to the free variables v
// against central finite differences.
fn gradient_check(_: &mut Shared) -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let t = CameraTimings::new(SLOT_US, 330.0, 8, 8, SRGB_GAMMA).unwrap();
    let scene = random_scene(&mut rng, 8, 8);
    let model = Model::reference_with_widths(8, 8, shape_labels(), [4, 8], 16, 7).unwrap();
    let renderer = Renderer::new(&scene, &t).unwrap();
    let len = signal_length(&t);
    let v: Vec<f64> = (0..3 * len).map(|_| rng.random_range(-1.5..1.5)).collect();
    let delta = 3;
    let target = 6;
    let loss_at = |v: &[f64]| {
        let s = LightSignal::new(t, reparameterize(v)).unwrap();
        model.loss_and_input_gradient(&renderer.render(&s, delta).unwrap(), target).unwrap().0
    };
    let signal = LightSignal::new(t, reparameterize(&v)).unwrap();
    let (rendered, gain) = renderer.render_with_gain(&signal, delta).unwrap();
    let (_, grad_img) = model.loss_and_input_gradient(&rendered, target).unwrap();
    let grad_signal = renderer.backward(&signal, delta, &gain, &rendered, &grad_img).unwrap();
    let grad_v = reparameterize_backward(&v, &grad_signal).unwrap();

    // The scene keeps every composite strictly inside (0, 1), so no pixel saturates.
    let saturated = rendered.data().iter().any(|&p| p <= 0.0 || p >= 1.0);
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for _ in 0..48 {
        let i = rng.random_range(0..v.len());
        let (mut up, mut down) = (v.clone(), v.clone());
        up[i] += h;
        down[i] -= h;
        let numeric = (loss_at(&up) - loss_at(&down)) / (2.0 * h);
        let denom = numeric.abs().max(grad_v[i].abs());
        if denom == 0.0 {
            // Slot outside every row's window at this offset; not counted.
            continue;
        }
        worst = worst.max((numeric - grad_v[i]).abs() / denom);
        checked += 1;
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        !saturated && checked >= 32 && worst < 1e-3 && secs < 30.0,
        format!("{checked} coordinates, worst relative error {worst:.2e}, {secs:.1} s"),
    )
}

// 2. Renderer identities at the extremes and under offset rotation.
fn renderer_identities(_: &mut Shared) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let t = CameraTimings::new(SLOT_US, 500.0, 32, 24, SRGB_GAMMA).unwrap();
    let scene = ScenePair::new(
        random_image(&mut rng, 32, 24, 0.0, 0.5),
        random_image(&mut rng, 32, 24, 0.5, 1.0),
    )
    .unwrap();
    let r = Renderer::new(&scene, &t).unwrap();
    let len = signal_length(&t);
    let dark = r.render(&LightSignal::constant(t, 0.0).unwrap(), 0).unwrap();
    let off_ok = dark.quantize() == scene.ambient.quantize();
    let lit = r.render(&LightSignal::constant(t, 1.0).unwrap(), 0).unwrap();
    let max_lsb = lit
        .quantize()
        .iter()
        .zip(scene.full.quantize())
        .map(|(&a, b)| (a as i32 - b as i32).abs())
        .max()
        .unwrap();
    let mut shift_ok = 0;
    for _ in 0..100 {
        let s = random_signal(&mut rng, t);
        let delta = rng.random_range(0..=len);
        let shifted = LightSignal::new(t, cyclic_shift(s.values(), len, delta).unwrap()).unwrap();
        if r.render(&s, delta).unwrap() == r.render(&shifted, 0).unwrap() {
            shift_ok += 1;
        }
    }
    outcome(
        off_ok && max_lsb <= 1 && shift_ok == 100,
        format!("off == ambient: {off_ok}, on vs full max {max_lsb} LSB, shift identity {shift_ok}/100"),
    )
}

// 3. Exposure spanning whole signal periods flattens every row gain.
fn global_shutter(_: &mut Shared) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let rows = rng.random_range(4..40);
        let own = CameraTimings::new(SLOT_US, rng.random_range(SLOT_US..700.0), rows, 4, SRGB_GAMMA).unwrap();
        let s = random_signal(&mut rng, own);
        let k = 1 + i % 3;
        let cam = CameraTimings::new(SLOT_US, (k * s.len()) as f64 * SLOT_US, rows, 4, SRGB_GAMMA).unwrap();
        let scene = ScenePair::new(Image::filled(rows, 4, 0.2), Image::filled(rows, 4, 0.8)).unwrap();
        let r = Renderer::new(&scene, &cam).unwrap();
        let delta = rng.random_range(0..=s.len());
        let g = r.gain(&s, delta).unwrap();
        for ch in 0..3 {
            let row: Vec<f64> = (0..rows).map(|y| g.get(ch, y)).collect();
            let spread = row.iter().cloned().fold(f64::MIN, f64::max) - row.iter().cloned().fold(f64::MAX, f64::min);
            worst = worst.max(spread);
        }
    }
    outcome(worst < 1e-9, format!("windows of 1-3 full periods, worst row-gain spread {worst:.2e}"))
}

// 4. Brute-force integration of the shutter at 1 us resolution.
fn continuous_time_oracle(_: &mut Shared) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut worst: f64 = 0.0;
    let mut fractional = 0;
    for _ in 0..20 {
        let rows = rng.random_range(3..10);
        let cols = rng.random_range(2..5);
        let tr: u32 = rng.random_range(3..15);
        let te: u32 = rng.random_range(tr..6 * tr);
        if !te.is_multiple_of(tr) {
            fractional += 1;
        }
        let gamma = rng.random_range(1.8..2.6);
        let t = CameraTimings::new(tr as f64, te as f64, rows, cols, gamma).unwrap();
        let scene = random_scene(&mut rng, rows, cols);
        let s = random_signal(&mut rng, t);
        let len = s.len();
        let delta = rng.random_range(0..=len);
        let img = Renderer::new(&scene, &t).unwrap().render(&s, delta).unwrap();
        for ch in 0..3 {
            for y in 0..rows {
                // Row y opens at (y + delta) readout periods and integrates te microseconds.
                let open = (y + delta) as u64 * tr as u64;
                let mut sum = 0.0;
                for us in 0..te as u64 {
                    let slot = ((open + us) / tr as u64) as usize % len;
                    sum += s.value(ch, slot);
                }
                let gain = sum / te as f64;
                for x in 0..cols {
                    let a = scene.ambient.get(ch, y, x).powf(gamma);
                    let f = scene.full.get(ch, y, x).powf(gamma);
                    let expect = (a + gain * (f - a).max(0.0)).powf(1.0 / gamma).clamp(0.0, 1.0);
                    worst = worst.max((expect - img.get(ch, y, x)).abs());
                }
            }
        }
    }
    outcome(
        worst < 1e-4 && fractional > 0,
        format!("20 instances ({fractional} with fractional te/tr), worst pixel error {worst:.2e}"),
    )
}

// 5. Targeted attack on the desk-scale scene with the bundled model.
fn desk_attack(shared: &mut Shared) -> Outcome {
    let config = TrainConfig::default();
    let data = Dataset::generate(&config.dataset, MODEL_TRAIN_SEED).unwrap();
    let model = shared.model().clone();
    let accuracy = evaluate_accuracy(&model, &data, &data.test).unwrap();

    let t = camera(500.0);
    let scene = desk_scene();
    let baseline = baseline_check(&scene, &model, &t, SOURCE.index(), N_TRANSFORMS, 11).unwrap();

    let start = Instant::now();
    let result = optimize_signal(&scene, &model, &t, &attack_config(5)).unwrap();
    let report = evaluate(&result.signal, &scene, &model, &t, TARGET.index(), N_TRANSFORMS, 12).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let window = t.window_slots();
    shared.window5_signal = Some(result.signal);
    outcome(
        accuracy >= 0.95
            && baseline.success_rate >= 0.95
            && report.success_rate >= 0.70
            && window <= 5
            && result.iterations_used <= 5000
            && secs < 900.0,
        format!(
            "model accuracy {accuracy:.3}, baseline {} {:.3}, {} -> {} success {:.3} over {} images \
             (window {window} slots, {} iterations, {secs:.0} s)",
            SOURCE.label(),
            baseline.success_rate,
            SOURCE.label(),
            TARGET.label(),
            report.success_rate,
            report.total_images,
            result.iterations_used
        ),
    )
}

// 6. Success against exposure: windows of 2, 5 and 20 slots, then a window
// covering a whole signal period.
fn exposure_trend(shared: &mut Shared) -> Outcome {
    let model = shared.model().clone();
    let scene = desk_scene();
    let five = match &shared.window5_signal {
        Some(s) => s.clone(),
        None => optimize_signal(&scene, &model, &camera(500.0), &attack_config(5)).unwrap().signal,
    };
    let two = optimize_signal(&scene, &model, &camera(2.0 * SLOT_US), &attack_config(6)).unwrap().signal;
    let twenty = optimize_signal(&scene, &model, &camera(20.0 * SLOT_US), &attack_config(7)).unwrap().signal;
    // No signal can be optimized for a window as long as its own period, so
    // the short-exposure signal is played to a camera that integrates it whole.
    let whole = two.len() as f64 * SLOT_US;
    let signals = vec![
        (2.0 * SLOT_US, two.clone()),
        (500.0, five),
        (20.0 * SLOT_US, twenty),
        (whole, two),
    ];
    let exposures: Vec<f64> = signals.iter().map(|s| s.0).collect();
    let curve = exposure_sweep(&scene, &model, &camera(500.0), &signals, &exposures, TARGET.index(), N_TRANSFORMS, 13).unwrap();
    let rates: Vec<f64> = curve.points.iter().map(|p| p.success_rate).collect();
    let monotone = rates.windows(2).all(|w| w[1] <= w[0]);
    let last = *rates.last().unwrap();
    outcome(
        monotone && last <= CHANCE + 0.10,
        format!(
            "success by window {:?} slots: {}",
            exposures.iter().map(|&e| camera(e).window_slots()).collect::<Vec<_>>(),
            fmt_rates(&rates)
        ),
    )
}

const BANK_LEVELS: [f64; 3] = [0.15, 0.3, 0.45];

fn bank(shared: &mut Shared) -> SignalBank {
    if shared.bank.is_none() {
        let model = shared.model().clone();
        let base = clean_exemplar(SOURCE, 64, SCENE_SEED);
        let b = build_signal_bank(&base, &model, &camera(500.0), &BANK_LEVELS, &[500.0], DEFAULT_FULL_MEAN, &attack_config(8))
            .unwrap();
        shared.bank = Some(b);
    }
    shared.bank.clone().unwrap()
}

// 7. Success against the LED share of the light, down to a scene the LED
// cannot change at all.
fn ambient_trend(shared: &mut Shared) -> Outcome {
    let bank = bank(shared);
    let model = shared.model().clone();
    let base = clean_exemplar(SOURCE, 64, SCENE_SEED);
    let mut levels = BANK_LEVELS.to_vec();
    levels.push(DEFAULT_FULL_MEAN);
    let curve = ambient_sweep(&base, &model, &bank, &camera(500.0), &levels, 500.0, TARGET.index(), N_TRANSFORMS, 14).unwrap();
    let mut points: Vec<(f64, f64)> = curve.points.iter().map(|p| (p.x, p.success_rate)).collect();
    points.sort_by(|a, b| a.0.total_cmp(&b.0));
    let monotone = points.windows(2).all(|w| w[1].1 >= w[0].1);
    let zero = points.iter().find(|p| p.0.abs() < 1e-9).map(|p| p.1);
    outcome(
        points.len() >= 4 && monotone && zero.is_some_and(|z| z <= CHANCE + 0.10),
        format!(
            "success by LED fraction: {}",
            points
                .iter()
                .map(|(x, s)| format!("{x:.3}: {s:.3}"))
                .collect::<Vec<_>>()
                .join(", ")
        ),
    )
}

// 8. PWM compile, simulate and firmware round trip.
fn pwm_round_trip(_: &mut Shared) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let (slot, grid) = (120u32, 4u32);
    let bound = grid as f64 / (2.0 * slot as f64) + 1.0 / slot as f64;
    let mut duties: Vec<f64> = (0..30_000).map(|_| rng.random::<f64>()).collect();
    // Exercise the edges too.
    for (i, d) in [0.0, 1.0, 1.0, 1.0, 0.5, 2.0 / 120.0].into_iter().enumerate() {
        duties[i * 7] = d;
    }
    let len = duties.len() / 3;
    let schedule = compile_duties(&duties, len, slot, grid).unwrap();
    let back = schedule.simulate().unwrap();
    let worst = back.iter().zip(&duties).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let reparsed = parse_firmware(&export_firmware(&schedule)).unwrap();
    outcome(
        worst <= bound && reparsed == schedule,
        format!(
            "{} duties, worst error {worst:.4} (bound {bound:.4}), firmware re-parse identical: {}",
            duties.len(),
            reparsed == schedule
        ),
    )
}

// 9. Evaluation row count and byte-identical CSV.
fn eval_bookkeeping(_: &mut Shared) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let t = CameraTimings::new(SLOT_US, 500.0, 16, 16, SRGB_GAMMA).unwrap();
    let scene = random_scene(&mut rng, 16, 16);
    let model = Model::reference_with_widths(16, 16, shape_labels(), [4, 8], 16, 9).unwrap();
    let s = random_signal(&mut rng, t);
    let a = evaluate(&s, &scene, &model, &t, 3, 200, 77).unwrap();
    let b = evaluate(&s, &scene, &model, &t, 3, 200, 77).unwrap();
    let (ca, cb) = (a.csv_string().unwrap(), b.csv_string().unwrap());
    let rows = ca.lines().count() - 1;
    let expected = 200 * s.len();
    outcome(
        rows == expected && a.rows.len() == expected && a.total_images == expected && ca == cb,
        format!("{rows} rows (expected {expected}), CSV byte-identical: {}", ca == cb),
    )
}

// 10. Each bank entry at its own level against any one signal everywhere.
fn bank_dominance(shared: &mut Shared) -> Outcome {
    let bank = bank(shared);
    let model = shared.model().clone();
    let base = clean_exemplar(SOURCE, 64, SCENE_SEED);
    let t = camera(500.0);
    let mut table = BTreeMap::new();
    for (j, entry) in bank.entries.iter().enumerate() {
        for (i, &level) in BANK_LEVELS.iter().enumerate() {
            let scene = scene_at_level(&base, level, bank.full_mean).unwrap();
            let r = evaluate(&entry.signal, &scene, &model, &t, TARGET.index(), N_TRANSFORMS, 15).unwrap();
            table.insert((j, i), r.success_rate);
        }
    }
    let n = BANK_LEVELS.len();
    let entries = bank.entries.len();
    let banked = (0..n).map(|i| table[&(i, i)]).sum::<f64>() / n as f64;
    let singles: Vec<f64> = (0..entries)
        .map(|j| (0..n).map(|i| table[&(j, i)]).sum::<f64>() / n as f64)
        .collect();
    let best_single = singles.iter().cloned().fold(0.0, f64::max);
    outcome(
        entries == n && banked >= best_single,
        format!(
            "bank mean success {banked:.3}, single signals across the grid {}",
            fmt_rates(&singles)
        ),
    )
}

fn fmt_rates(r: &[f64]) -> String {
    r.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(", ")
}

fn main() -> ExitCode {
    let checks: [(usize, &str, Check); 10] = [
        (1, "end-to-end gradient check", gradient_check),
        (2, "renderer identities", renderer_identities),
        (3, "global-shutter limit", global_shutter),
        (4, "continuous-time oracle", continuous_time_oracle),
        (5, "desk-scale targeted attack", desk_attack),
        (6, "exposure trend", exposure_trend),
        (7, "ambient trend", ambient_trend),
        (8, "PWM round trip", pwm_round_trip),
        (9, "evaluation bookkeeping", eval_bookkeeping),
        (10, "signal-bank dominance", bank_dominance),
    ];
    let only: Option<Vec<usize>> = std::env::var("STRIPELIGHT_ACCEPTANCE")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let mut shared = Shared::default();
    let mut failed = 0;
    for (n, name, check) in checks {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let start = Instant::now();
        let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| check(&mut shared)));
        let secs = start.elapsed().as_secs_f64();
        let o = result.unwrap_or_else(|_| outcome(false, "panicked".into()));
        if !o.pass {
            failed += 1;
        }
        println!(
            "{} criterion {n:>2} ({name}): {} [{secs:.1} s]",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
