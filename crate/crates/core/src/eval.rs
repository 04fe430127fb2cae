//! Measuring attack success over transforms and offsets, and sweeping
//! exposure and ambient light.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{draw_eot, scene_at_level, select_signal, SignalBank};
use crate::camera::{CameraTimings, LightSignal};
use crate::classifier::Classifier;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::render::{Renderer, ScenePair};
use crate::scene::led_fraction;
use crate::transforms::{ColorRanges, TransformRanges};

/// Distributions the evaluation draws from; defaults match the attack's.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub transforms: TransformRanges,
    pub color: ColorRanges,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub transform_id: usize,
    pub offset: usize,
    pub predicted_class: usize,
    pub predicted_label: String,
    pub target_confidence: f64,
    pub success: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub target: usize,
    pub target_label: String,
    pub n_transforms: usize,
    pub n_offsets: usize,
    pub total_images: usize,
    pub successes: usize,
    pub success_rate: f64,
    /// Mean target probability over successful images only; 0 without successes.
    pub mean_target_confidence: f64,
    pub seed: u64,
    #[serde(skip)]
    pub rows: Vec<EvalRow>,
}

/// Evaluates `signal` on `n_transforms` sampled transforms at every offset
/// `0..l`, with the default distributions.
pub fn evaluate<C: Classifier + ?Sized>(
    signal: &LightSignal,
    scene: &ScenePair,
    classifier: &C,
    timings: &CameraTimings,
    target: usize,
    n_transforms: usize,
    seed: u64,
) -> Result<EvalReport> {
    evaluate_with(signal, scene, classifier, timings, target, n_transforms, seed, &EvalOptions::default())
}

#[allow(clippy::too_many_arguments)]
pub fn evaluate_with<C: Classifier + ?Sized>(
    signal: &LightSignal,
    scene: &ScenePair,
    classifier: &C,
    timings: &CameraTimings,
    target: usize,
    n_transforms: usize,
    seed: u64,
    options: &EvalOptions,
) -> Result<EvalReport> {
    if n_transforms == 0 {
        return Err(Error::OutOfRange("n_transforms must be at least 1".into()));
    }
    let k = classifier.num_classes();
    if target >= k {
        return Err(Error::InvalidClass { index: target, classes: k });
    }
    let labels = classifier.labels();
    let l = signal.len();
    let constant = signal.is_constant();

    let per_transform: Vec<Result<Vec<EvalRow>>> = (0..n_transforms)
        .into_par_iter()
        .map(|t| {
            let draw = draw_eot(scene, &options.transforms, &options.color, l, seed, t as u64);
            let renderer = Renderer::new(&draw.pair, timings)?;
            let classify = |delta: usize| -> Result<(usize, f64, bool)> {
                let seen = draw.color.apply(&renderer.render(signal, delta)?);
                let out = classifier.forward(&seen)?;
                let success = out.strict_argmax() == Some(target);
                Ok((out.top_class(), out.probabilities[target], success))
            };
            // A constant signal renders identically at every offset.
            let fixed = if constant { Some(classify(0)?) } else { None };
            (0..l)
                .map(|offset| {
                    let (predicted_class, target_confidence, success) = match fixed {
                        Some(v) => v,
                        None => classify(offset)?,
                    };
                    Ok(EvalRow {
                        transform_id: t,
                        offset,
                        predicted_class,
                        predicted_label: labels[predicted_class].clone(),
                        target_confidence,
                        success,
                    })
                })
                .collect()
        })
        .collect();

    let mut rows = Vec::with_capacity(n_transforms * l);
    for r in per_transform {
        rows.extend(r?);
    }
    let successes = rows.iter().filter(|r| r.success).count();
    let conf_sum: f64 = rows.iter().filter(|r| r.success).map(|r| r.target_confidence).sum();
    let total_images = rows.len();
    Ok(EvalReport {
        target,
        target_label: labels[target].clone(),
        n_transforms,
        n_offsets: l,
        total_images,
        successes,
        success_rate: successes as f64 / total_images as f64,
        mean_target_confidence: if successes > 0 { conf_sum / successes as f64 } else { 0.0 },
        seed,
        rows,
    })
}

/// Success of the unattacked scene (steady full illumination) as `source`.
pub fn baseline_check<C: Classifier + ?Sized>(
    scene: &ScenePair,
    classifier: &C,
    timings: &CameraTimings,
    source: usize,
    n_transforms: usize,
    seed: u64,
) -> Result<EvalReport> {
    let steady = LightSignal::constant(*timings, 1.0)?;
    evaluate(&steady, scene, classifier, timings, source, n_transforms, seed)
}

impl EvalReport {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["transform_id", "offset", "predicted_class", "predicted_label", "target_confidence", "success"])?;
        for r in &self.rows {
            w.write_record([
                r.transform_id.to_string(),
                r.offset.to_string(),
                r.predicted_class.to_string(),
                r.predicted_label.clone(),
                format!("{:.9}", r.target_confidence),
                r.success.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }

    /// Summary document without the per-image rows.
    pub fn summary_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        let csv_path = dir.join(format!("{stem}.csv"));
        let file = std::fs::File::create(&csv_path).map_err(|source| Error::File {
            path: csv_path.clone(),
            source,
        })?;
        self.write_csv(std::io::BufWriter::new(file))?;
        write_file(&dir.join(format!("{stem}.json")), &self.summary_json()?)
    }
}

pub(crate) fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|source| Error::File {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    /// Exposure in microseconds, or LED fraction for ambient sweeps.
    pub x: f64,
    /// Exposure window in readout slots, or the ambient mean level.
    pub detail: f64,
    pub success_rate: f64,
    pub mean_target_confidence: f64,
    pub total_images: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCurve {
    pub x_label: String,
    pub detail_label: String,
    pub points: Vec<SweepPoint>,
}

/// Evaluates each exposure with its matching signal. `signals` pairs a
/// camera exposure with the signal played at that exposure.
#[allow(clippy::too_many_arguments)]
pub fn exposure_sweep<C: Classifier + ?Sized>(
    scene: &ScenePair,
    classifier: &C,
    timings: &CameraTimings,
    signals: &[(f64, LightSignal)],
    exposures_us: &[f64],
    target: usize,
    n_transforms: usize,
    seed: u64,
) -> Result<SweepCurve> {
    let mut points = Vec::with_capacity(exposures_us.len());
    for &e in exposures_us {
        let signal = signals
            .iter()
            .find(|(x, _)| (x - e).abs() < 1e-9)
            .map(|(_, s)| s)
            .ok_or(Error::MissingSignal { exposure_us: e })?;
        let camera = timings.with_exposure(e)?;
        let r = evaluate(signal, scene, classifier, &camera, target, n_transforms, seed)?;
        points.push(SweepPoint {
            x: e,
            detail: camera.exposure_ratio(),
            success_rate: r.success_rate,
            mean_target_confidence: r.mean_target_confidence,
            total_images: r.total_images,
        });
    }
    Ok(SweepCurve {
        x_label: "exposure_us".into(),
        detail_label: "window_slots".into(),
        points,
    })
}

/// For each ambient level: synthesize the scene from `base`, select the
/// bank signal and evaluate. Points are reported against the LED fraction.
#[allow(clippy::too_many_arguments)]
pub fn ambient_sweep<C: Classifier + ?Sized>(
    base: &Image,
    classifier: &C,
    bank: &SignalBank,
    timings: &CameraTimings,
    levels: &[f64],
    exposure_us: f64,
    target: usize,
    n_transforms: usize,
    seed: u64,
) -> Result<SweepCurve> {
    let camera = timings.with_exposure(exposure_us)?;
    let mut points = Vec::with_capacity(levels.len());
    for &level in levels {
        let scene = scene_at_level(base, level, bank.full_mean)?;
        let signal = select_signal(bank, level, exposure_us)?;
        let r = evaluate(signal, &scene, classifier, &camera, target, n_transforms, seed)?;
        points.push(SweepPoint {
            x: led_fraction(level, bank.full_mean),
            detail: level,
            success_rate: r.success_rate,
            mean_target_confidence: r.mean_target_confidence,
            total_images: r.total_images,
        });
    }
    Ok(SweepCurve {
        x_label: "led_fraction".into(),
        detail_label: "ambient_mean".into(),
        points,
    })
}

impl SweepCurve {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            self.x_label.as_str(),
            self.detail_label.as_str(),
            "success_rate",
            "mean_target_confidence",
            "total_images",
        ])?;
        for p in &self.points {
            w.write_record([
                format!("{}", p.x),
                format!("{}", p.detail),
                format!("{:.9}", p.success_rate),
                format!("{:.9}", p.mean_target_confidence),
                p.total_images.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Success rate against `x` as a standalone SVG line chart.
    pub fn to_svg(&self, title: &str) -> String {
        let (w, h, m) = (480.0, 320.0, 48.0);
        let xs: Vec<f64> = self.points.iter().map(|p| p.x).collect();
        let (x0, x1) = xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
        let span = if x1 > x0 { x1 - x0 } else { 1.0 };
        let px = |x: f64| m + (x - x0) / span * (w - 2.0 * m);
        let py = |y: f64| h - m - y * (h - 2.0 * m);
        let mut svg = String::new();
        let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
        let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
        let _ = writeln!(svg, r#"<text x="{}" y="24" font-size="14" text-anchor="middle">{}</text>"#, w / 2.0, escape(title));
        let _ = writeln!(
            svg,
            r#"<path d="M{m} {} L{m} {} L{} {}" stroke="black" fill="none"/>"#,
            m,
            h - m,
            w - m,
            h - m
        );
        for tick in [0.0, 0.5, 1.0] {
            let _ = writeln!(
                svg,
                r#"<text x="{}" y="{}" font-size="10" text-anchor="end">{tick:.1}</text>"#,
                m - 4.0,
                py(tick) + 3.0
            );
        }
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">{}</text>"#,
            w / 2.0,
            h - 12.0,
            escape(&self.x_label)
        );
        let path: Vec<String> = self
            .points
            .iter()
            .map(|p| format!("{:.2},{:.2}", px(p.x), py(p.success_rate)))
            .collect();
        let _ = writeln!(svg, r#"<polyline points="{}" stroke="steelblue" stroke-width="2" fill="none"/>"#, path.join(" "));
        for p in &self.points {
            let _ = writeln!(
                svg,
                r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="steelblue"/>"#,
                px(p.x),
                py(p.success_rate)
            );
            let _ = writeln!(
                svg,
                r#"<text x="{:.2}" y="{}" font-size="10" text-anchor="middle">{}</text>"#,
                px(p.x),
                h - m + 14.0,
                p.x
            );
        }
        svg.push_str("</svg>\n");
        svg
    }

    pub fn save(&self, dir: impl AsRef<Path>, stem: &str, title: &str) -> Result<()> {
        let dir = dir.as_ref();
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        write_file(&dir.join(format!("{stem}.csv")), &String::from_utf8(buf).expect("utf-8"))?;
        write_file(&dir.join(format!("{stem}.svg")), &self.to_svg(title))?;
        write_file(&dir.join(format!("{stem}.json")), &serde_json::to_string_pretty(self)?)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
