//! Procedural ten-class dataset: colored geometric shapes on textured backgrounds.

use std::f64::consts::PI;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, CHANNELS};
use crate::rng::stream_rng;
use crate::transforms::{apply_color_error, apply_transform, sample_color_error, sample_transform, ColorDistortion, ColorRanges, Range, TransformRanges};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeClass {
    Disk,
    Ring,
    Square,
    Triangle,
    Cross,
    Bar,
    Star,
    Crescent,
    Ell,
    DotPair,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 10] = [
        ShapeClass::Disk,
        ShapeClass::Ring,
        ShapeClass::Square,
        ShapeClass::Triangle,
        ShapeClass::Cross,
        ShapeClass::Bar,
        ShapeClass::Star,
        ShapeClass::Crescent,
        ShapeClass::Ell,
        ShapeClass::DotPair,
    ];

    pub fn label(self) -> &'static str {
        match self {
            ShapeClass::Disk => "disk",
            ShapeClass::Ring => "ring",
            ShapeClass::Square => "square",
            ShapeClass::Triangle => "triangle",
            ShapeClass::Cross => "cross",
            ShapeClass::Bar => "bar",
            ShapeClass::Star => "star",
            ShapeClass::Crescent => "crescent",
            ShapeClass::Ell => "ell",
            ShapeClass::DotPair => "dot pair",
        }
    }

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&c| c == self).expect("listed")
    }

    /// Membership in shape-local coordinates, unit = shape radius.
    fn contains(self, u: f64, v: f64) -> bool {
        let rho = u.hypot(v);
        match self {
            ShapeClass::Disk => rho <= 0.85,
            ShapeClass::Ring => (0.55..=0.95).contains(&rho),
            ShapeClass::Square => u.abs().max(v.abs()) <= 0.7,
            ShapeClass::Triangle => (0..3).all(|k| {
                let a = PI / 2.0 + k as f64 * 2.0 * PI / 3.0;
                u * a.cos() + v * a.sin() <= 0.475
            }),
            ShapeClass::Cross => (u.abs() <= 0.28 && v.abs() <= 0.95) || (v.abs() <= 0.28 && u.abs() <= 0.95),
            ShapeClass::Bar => u.abs() <= 1.0 && v.abs() <= 0.25,
            ShapeClass::Star => {
                let phase = (5.0 * v.atan2(u) / (2.0 * PI)).rem_euclid(1.0);
                let tip = 1.0 - 2.0 * (phase - 0.5).abs();
                rho <= 0.38 + 0.6 * tip
            }
            ShapeClass::Crescent => rho <= 0.9 && (u - 0.4).hypot(v) > 0.72,
            ShapeClass::Ell => {
                ((-0.8..=-0.35).contains(&u) && (-0.85..=0.85).contains(&v))
                    || ((-0.8..=0.8).contains(&u) && (0.4..=0.85).contains(&v))
            }
            ShapeClass::DotPair => (u - 0.5).hypot(v) <= 0.38 || (u + 0.5).hypot(v) <= 0.38,
        }
    }
}

pub fn shape_labels() -> Vec<String> {
    ShapeClass::ALL.iter().map(|c| c.label().to_string()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub size: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// Probability of applying a viewpoint transform to a sample.
    pub transform_prob: f64,
    /// Viewpoint transform distribution; lighting is ignored.
    pub viewpoint: TransformRanges,
    /// Probability of applying a color error to a sample.
    pub color_prob: f64,
    /// Global brightness multiplier range.
    pub brightness: Range,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            size: 64,
            n_train: 2000,
            n_test: 500,
            transform_prob: 0.35,
            viewpoint: TransformRanges::default(),
            color_prob: 0.5,
            brightness: Range::new(0.5, 1.3),
        }
    }
}

/// One 8-bit RGB sample stored interleaved, as it would be read from a PNG.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub pixels: Vec<u8>,
    pub label: usize,
}

impl Sample {
    pub fn image(&self, size: usize) -> Image {
        Image::from_rgb8(size, size, &self.pixels).expect("sample matches dataset size")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub size: usize,
    pub labels: Vec<String>,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    /// Deterministic in `seed`. Classes are balanced round-robin.
    pub fn generate(config: &DatasetConfig, seed: u64) -> Result<Self> {
        if config.size < 8 {
            return Err(Error::OutOfRange("dataset images must be at least 8x8".into()));
        }
        Ok(Self {
            size: config.size,
            labels: shape_labels(),
            train: generate_samples(config, seed, 0, config.n_train),
            test: generate_samples(config, seed, TEST_STREAM_BASE, config.n_test),
        })
    }

    pub fn image(&self, sample: &Sample) -> Image {
        sample.image(self.size)
    }

    /// Relabels every sample through `perm` (old index -> new index).
    pub fn permute_labels(&self, perm: &[usize]) -> Result<Self> {
        let k = self.labels.len();
        let mut seen = vec![false; k];
        if perm.len() != k || perm.iter().any(|&p| p >= k || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::OutOfRange("label map is not a permutation".into()));
        }
        let mut labels = vec![String::new(); k];
        for (old, &new) in perm.iter().enumerate() {
            labels[new] = self.labels[old].clone();
        }
        let relabel = |s: &Sample| Sample {
            pixels: s.pixels.clone(),
            label: perm[s.label],
        };
        Ok(Self {
            size: self.size,
            labels,
            train: self.train.iter().map(relabel).collect(),
            test: self.test.iter().map(relabel).collect(),
        })
    }
}

/// Test samples draw from streams far above any training index.
const TEST_STREAM_BASE: u64 = 1 << 40;

/// `count` samples drawn from streams `first..first + count`, labels round-robin.
pub fn generate_samples(config: &DatasetConfig, seed: u64, first: u64, count: usize) -> Vec<Sample> {
    let k = ShapeClass::ALL.len() as u64;
    (0..count as u64)
        .into_par_iter()
        .map(|i| {
            let class = ShapeClass::ALL[(i % k) as usize];
            let img = render_sample(class, config, seed, first + i, true);
            Sample {
                pixels: img.quantize(),
                label: class.index(),
            }
        })
        .collect()
}

/// A clean, centered exemplar of `class`, suitable as an attack scene.
pub fn clean_exemplar(class: ShapeClass, size: usize, seed: u64) -> Image {
    let config = DatasetConfig {
        size,
        ..DatasetConfig::default()
    };
    render_sample(class, &config, seed, 0, false)
}

fn render_sample(class: ShapeClass, config: &DatasetConfig, seed: u64, index: u64, augment: bool) -> Image {
    let mut rng = stream_rng(seed, index);
    let n = config.size;
    let nf = n as f64;

    // Opposite-polarity background and foreground so the shape always has contrast.
    let dark_bg = rng.random_bool(0.5);
    let (bg_lo, bg_hi, fg_lo, fg_hi) = if dark_bg {
        (0.1, 0.4, 0.6, 0.95)
    } else {
        (0.6, 0.9, 0.05, 0.4)
    };
    let bg: [f64; 3] = std::array::from_fn(|_| rng.random_range(bg_lo..bg_hi));
    let fg: [f64; 3] = std::array::from_fn(|_| rng.random_range(fg_lo..fg_hi));

    let waves: Vec<(f64, f64, f64, f64)> = (0..2)
        .map(|_| {
            let angle = rng.random_range(0.0..PI);
            let freq = rng.random_range(1.0..4.0) * 2.0 * PI / nf;
            let phase = rng.random_range(0.0..2.0 * PI);
            let amp = rng.random_range(0.02..0.08);
            (angle, freq, phase, amp)
        })
        .collect();

    let (cy, cx, radius, theta) = if augment {
        (
            rng.random_range(0.4..0.6) * nf,
            rng.random_range(0.4..0.6) * nf,
            rng.random_range(0.26..0.36) * nf,
            rng.random_range(0.0..2.0 * PI),
        )
    } else {
        (0.5 * nf, 0.5 * nf, 0.32 * nf, rng.random_range(0.0..2.0 * PI))
    };
    let mirror = rng.random_bool(0.5);
    let (cos, sin) = (theta.cos(), theta.sin());

    let mut img = Image::zeros(n, n);
    const SS: usize = 2;
    for y in 0..n {
        for x in 0..n {
            let mut texture = 0.0;
            for &(angle, freq, phase, amp) in &waves {
                let t = x as f64 * angle.cos() + y as f64 * angle.sin();
                texture += amp * (freq * t + phase).sin();
            }
            let grain = rng.random_range(-0.03..0.03);
            let mut cover = 0.0;
            for sy in 0..SS {
                for sx in 0..SS {
                    let py = y as f64 + (sy as f64 + 0.5) / SS as f64 - cy;
                    let px = x as f64 + (sx as f64 + 0.5) / SS as f64 - cx;
                    let u = (cos * px + sin * py) / radius;
                    let mut v = (-sin * px + cos * py) / radius;
                    if mirror {
                        v = -v;
                    }
                    if class.contains(u, v) {
                        cover += 1.0;
                    }
                }
            }
            cover /= (SS * SS) as f64;
            for c in 0..CHANNELS {
                let back = bg[c] + texture + grain;
                let value = cover * (fg[c] + 0.5 * grain) + (1.0 - cover) * back;
                img.set(c, y, x, value.clamp(0.0, 1.0));
            }
        }
    }

    if augment {
        if rng.random_bool(config.transform_prob) {
            let ranges = TransformRanges {
                lighting_mult: Range::new(1.0, 1.0),
                ..config.viewpoint.clone()
            };
            let p = sample_transform(&ranges, &mut rng);
            img = apply_transform(&img, &p, false);
        }
        let gain = config.brightness.sample(&mut rng);
        img = img.map(|v| (v * gain).clamp(0.0, 1.0));
        if rng.random_bool(config.color_prob) {
            if let ColorDistortion::Affine(err) = sample_color_error(&ColorRanges::default(), &mut rng) {
                img = apply_color_error(&img, &err);
            }
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic_and_balanced() {
        let cfg = DatasetConfig {
            size: 16,
            n_train: 30,
            n_test: 10,
            ..DatasetConfig::default()
        };
        let a = Dataset::generate(&cfg, 3).unwrap();
        let b = Dataset::generate(&cfg, 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, Dataset::generate(&cfg, 4).unwrap());
        for k in 0..10 {
            assert_eq!(a.train.iter().filter(|s| s.label == k).count(), 3);
        }
        assert_eq!(a.test.len(), 10);
    }

    #[test]
    fn every_class_draws_something() {
        for class in ShapeClass::ALL {
            let img = clean_exemplar(class, 32, 1);
            let center = img.get(0, 16, 16);
            let corner = img.get(0, 0, 0);
            let spread = img.data().iter().copied().fold(f64::NEG_INFINITY, f64::max)
                - img.data().iter().copied().fold(f64::INFINITY, f64::min);
            assert!(spread > 0.2, "{class:?} has no contrast ({center} vs {corner})");
        }
    }

    #[test]
    fn label_permutation_moves_names_with_samples() {
        let cfg = DatasetConfig {
            size: 8,
            n_train: 10,
            n_test: 0,
            ..DatasetConfig::default()
        };
        let d = Dataset::generate(&cfg, 1).unwrap();
        let perm: Vec<usize> = (0..10).map(|i| (i + 3) % 10).collect();
        let p = d.permute_labels(&perm).unwrap();
        for (a, b) in d.train.iter().zip(&p.train) {
            assert_eq!(d.labels[a.label], p.labels[b.label]);
        }
        assert!(d.permute_labels(&[0; 10]).is_err());
    }
}
