//! Viewpoint/lighting transformations and color-reproduction error, and the
//! distributions they are drawn from during expectation over transformation.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, CHANNELS};
use crate::render::ScenePair;

/// Closed interval `[lo, hi]` sampled uniformly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.hi <= self.lo {
            self.lo
        } else {
            rng.random_range(self.lo..=self.hi)
        }
    }

    fn validate(&self, name: &str) -> Result<()> {
        if !(self.lo.is_finite() && self.hi.is_finite() && self.lo <= self.hi) {
            return Err(Error::OutOfRange(format!("{name}: invalid range [{}, {}]", self.lo, self.hi)));
        }
        Ok(())
    }
}

/// Viewpoint and lighting distribution. Defaults are the evaluation ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformRanges {
    pub rotation_deg: Range,
    pub flip_h: bool,
    pub flip_v: bool,
    pub translation_frac: Range,
    pub scale: Range,
    pub lighting_mult: Range,
}

impl Default for TransformRanges {
    fn default() -> Self {
        Self {
            rotation_deg: Range::new(0.0, 360.0),
            flip_h: true,
            flip_v: true,
            translation_frac: Range::new(0.0, 0.7),
            scale: Range::new(1.0, 1.5),
            lighting_mult: Range::new(0.8, 1.2),
        }
    }
}

impl TransformRanges {
    /// Degenerate distribution that always yields the identity transform.
    pub fn identity() -> Self {
        Self {
            rotation_deg: Range::new(0.0, 0.0),
            flip_h: false,
            flip_v: false,
            translation_frac: Range::new(0.0, 0.0),
            scale: Range::new(1.0, 1.0),
            lighting_mult: Range::new(1.0, 1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.rotation_deg.validate("rotation_deg")?;
        self.translation_frac.validate("translation_frac")?;
        self.scale.validate("scale")?;
        self.lighting_mult.validate("lighting_mult")?;
        if self.scale.lo <= 0.0 {
            return Err(Error::OutOfRange("scale must be positive".into()));
        }
        if self.lighting_mult.lo < 0.0 {
            return Err(Error::OutOfRange("lighting_mult must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformParams {
    pub rotation_deg: f64,
    pub flip_h: bool,
    pub flip_v: bool,
    pub translation_frac: f64,
    /// Direction of the translation, radians in `[0, 2 pi)`.
    pub translation_angle: f64,
    pub scale: f64,
    pub lighting_mult: f64,
}

impl TransformParams {
    pub fn identity() -> Self {
        Self {
            rotation_deg: 0.0,
            flip_h: false,
            flip_v: false,
            translation_frac: 0.0,
            translation_angle: 0.0,
            scale: 1.0,
            lighting_mult: 1.0,
        }
    }

    fn is_geometric_identity(&self) -> bool {
        self.rotation_deg.rem_euclid(360.0) == 0.0 && self.scale == 1.0 && self.translation_frac == 0.0
    }
}

pub fn sample_transform<R: Rng + ?Sized>(ranges: &TransformRanges, rng: &mut R) -> TransformParams {
    TransformParams {
        rotation_deg: ranges.rotation_deg.sample(rng),
        flip_h: ranges.flip_h && rng.random_bool(0.5),
        flip_v: ranges.flip_v && rng.random_bool(0.5),
        translation_frac: ranges.translation_frac.sample(rng),
        translation_angle: rng.random_range(0.0..2.0 * PI),
        scale: ranges.scale.sample(rng),
        lighting_mult: ranges.lighting_mult.sample(rng),
    }
}

fn flip(image: &Image, horizontal: bool, vertical: bool) -> Image {
    let (h, w) = image.dims();
    let mut out = Image::zeros(h, w);
    for c in 0..CHANNELS {
        for y in 0..h {
            let sy = if vertical { h - 1 - y } else { y };
            for x in 0..w {
                let sx = if horizontal { w - 1 - x } else { x };
                out.set(c, y, x, image.get(c, sy, sx));
            }
        }
    }
    out
}

/// `(cos, sin)` with exact values at multiples of 90 degrees.
fn exact_cos_sin(deg: f64) -> (f64, f64) {
    let d = deg.rem_euclid(360.0);
    let quarter = (d / 90.0).round();
    if (d - quarter * 90.0).abs() < 1e-9 {
        match quarter as i64 % 4 {
            0 => (1.0, 0.0),
            1 => (0.0, 1.0),
            2 => (-1.0, 0.0),
            _ => (0.0, -1.0),
        }
    } else {
        let r = d.to_radians();
        (r.cos(), r.sin())
    }
}

#[inline]
fn bilinear(plane: &[f64], h: usize, w: usize, sy: f64, sx: f64) -> f64 {
    let max_y = (h - 1) as f64;
    let max_x = (w - 1) as f64;
    let sy = sy.clamp(0.0, max_y);
    let sx = sx.clamp(0.0, max_x);
    let y0 = sy.floor() as usize;
    let x0 = sx.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = sy - y0 as f64;
    let fx = sx - x0 as f64;
    let top = if fx == 0.0 {
        plane[y0 * w + x0]
    } else {
        plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx
    };
    if fy == 0.0 {
        return top;
    }
    let bottom = if fx == 0.0 {
        plane[y1 * w + x0]
    } else {
        plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx
    };
    top * (1.0 - fy) + bottom * fy
}

/// Rotation, center magnification and translation as one inverse-mapped
/// bilinear resample with edge-replicated fill.
fn warp(image: &Image, p: &TransformParams) -> Image {
    let (h, w) = image.dims();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let (cos, sin) = exact_cos_sin(p.rotation_deg);
    let mag = p.translation_frac * (h.min(w) as f64) / 2.0;
    let ty = mag * p.translation_angle.sin();
    let tx = mag * p.translation_angle.cos();
    let inv_scale = 1.0 / p.scale;
    let mut out = Image::zeros(h, w);
    for c in 0..CHANNELS {
        let src = image.plane(c);
        let dst = out.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                // undo translation, then magnification, then rotation
                let dy = (y as f64 - ty - cy) * inv_scale;
                let dx = (x as f64 - tx - cx) * inv_scale;
                let sx = cx + cos * dx + sin * dy;
                let sy = cy - sin * dx + cos * dy;
                dst[y * w + x] = bilinear(src, h, w, sy, sx);
            }
        }
    }
    out
}

/// Flips, then rotation, magnification and translation, then (ambient only)
/// lighting, then clamping to `[0, 1]`.
pub fn apply_transform(image: &Image, params: &TransformParams, is_ambient: bool) -> Image {
    let mut out = if params.flip_h || params.flip_v {
        flip(image, params.flip_h, params.flip_v)
    } else {
        image.clone()
    };
    if !params.is_geometric_identity() {
        out = warp(&out, params);
    }
    if is_ambient && params.lighting_mult != 1.0 {
        for v in out.data_mut() {
            *v *= params.lighting_mult;
        }
    }
    out.clamp01();
    out
}

/// Applies one sampled transform to both members of a scene pair.
pub fn apply_transform_pair(scene: &ScenePair, params: &TransformParams) -> ScenePair {
    ScenePair {
        ambient: apply_transform(&scene.ambient, params, true),
        full: apply_transform(&scene.full, params, false),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColorRanges {
    pub mult: Range,
    pub add: Range,
    /// Optional per-channel polynomial model; off unless configured.
    pub polynomial: Option<PolynomialRanges>,
}

impl Default for ColorRanges {
    fn default() -> Self {
        Self {
            mult: Range::new(0.7, 1.3),
            add: Range::new(-0.2, 0.2),
            polynomial: None,
        }
    }
}

impl ColorRanges {
    pub fn identity() -> Self {
        Self {
            mult: Range::new(1.0, 1.0),
            add: Range::new(0.0, 0.0),
            polynomial: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.mult.validate("color mult")?;
        self.add.validate("color add")?;
        if let Some(p) = &self.polynomial {
            if p.coefficients.is_empty() {
                return Err(Error::OutOfRange("polynomial color model needs coefficients".into()));
            }
            for (i, r) in p.coefficients.iter().enumerate() {
                r.validate(&format!("polynomial coefficient {i}"))?;
            }
        }
        Ok(())
    }
}

/// Coefficient ranges, highest power first: `a0 x^n + a1 x^(n-1) + ... + an`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolynomialRanges {
    pub coefficients: Vec<Range>,
}

/// Per-channel affine color error `clamp(mult * x + add, 0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColorError {
    pub mult: [f64; CHANNELS],
    pub add: [f64; CHANNELS],
}

impl ColorError {
    pub fn identity() -> Self {
        Self {
            mult: [1.0; CHANNELS],
            add: [0.0; CHANNELS],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolynomialColorError {
    /// Per channel, highest power first.
    pub coefficients: [Vec<f64>; CHANNELS],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum ColorDistortion {
    Affine(ColorError),
    Polynomial(PolynomialColorError),
}

pub fn sample_color_error<R: Rng + ?Sized>(ranges: &ColorRanges, rng: &mut R) -> ColorDistortion {
    match &ranges.polynomial {
        None => {
            let mut err = ColorError::identity();
            for ch in 0..CHANNELS {
                err.mult[ch] = ranges.mult.sample(rng);
                err.add[ch] = ranges.add.sample(rng);
            }
            ColorDistortion::Affine(err)
        }
        Some(p) => {
            let coefficients = std::array::from_fn(|_| p.coefficients.iter().map(|r| r.sample(rng)).collect());
            ColorDistortion::Polynomial(PolynomialColorError { coefficients })
        }
    }
}

pub fn apply_color_error(image: &Image, err: &ColorError) -> Image {
    let mut out = image.clone();
    for ch in 0..CHANNELS {
        let (m, a) = (err.mult[ch], err.add[ch]);
        for v in out.plane_mut(ch) {
            *v = (m * *v + a).clamp(0.0, 1.0);
        }
    }
    out
}

fn horner(coeffs: &[f64], x: f64) -> (f64, f64) {
    let mut value = 0.0;
    let mut deriv = 0.0;
    for &c in coeffs {
        deriv = deriv * x + value;
        value = value * x + c;
    }
    (value, deriv)
}

impl ColorDistortion {
    pub fn identity() -> Self {
        ColorDistortion::Affine(ColorError::identity())
    }

    pub fn apply(&self, image: &Image) -> Image {
        match self {
            ColorDistortion::Affine(err) => apply_color_error(image, err),
            ColorDistortion::Polynomial(p) => {
                let mut out = image.clone();
                for ch in 0..CHANNELS {
                    for v in out.plane_mut(ch) {
                        *v = horner(&p.coefficients[ch], *v).0.clamp(0.0, 1.0);
                    }
                }
                out
            }
        }
    }

    /// Pulls an output gradient back through the distortion. Pixels whose
    /// output was clamped receive zero gradient.
    pub fn backward(&self, input: &Image, upstream: &Image) -> Result<Image> {
        if input.dims() != upstream.dims() {
            return Err(Error::shape("color error backward: dimension mismatch"));
        }
        let mut out = upstream.clone();
        for ch in 0..CHANNELS {
            let inp = input.plane(ch);
            let g = out.plane_mut(ch);
            for (gi, &x) in g.iter_mut().zip(inp) {
                let (y, dy) = match self {
                    ColorDistortion::Affine(err) => (err.mult[ch] * x + err.add[ch], err.mult[ch]),
                    ColorDistortion::Polynomial(p) => horner(&p.coefficients[ch], x),
                };
                *gi = if (0.0..=1.0).contains(&y) { *gi * dy } else { 0.0 };
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = stream_rng(seed, 0);
        Image::from_planar(h, w, (0..3 * h * w).map(|_| rng.random()).collect()).unwrap()
    }

    #[test]
    fn sampling_is_deterministic() {
        let r = TransformRanges::default();
        let a = sample_transform(&r, &mut stream_rng(5, 9));
        let b = sample_transform(&r, &mut stream_rng(5, 9));
        assert_eq!(a, b);
        let c = sample_transform(&r, &mut stream_rng(5, 10));
        assert_ne!(a, c);
    }

    #[test]
    fn sampled_parameters_stay_in_range() {
        let r = TransformRanges::default();
        let c = ColorRanges::default();
        let mut rng = stream_rng(1, 0);
        let n = 10_000;
        let mut rot_sum = 0.0;
        let mut flips = 0;
        for _ in 0..n {
            let p = sample_transform(&r, &mut rng);
            assert!(r.rotation_deg.contains(p.rotation_deg));
            assert!(r.translation_frac.contains(p.translation_frac));
            assert!(r.scale.contains(p.scale));
            assert!(r.lighting_mult.contains(p.lighting_mult));
            assert!((0.0..2.0 * PI).contains(&p.translation_angle));
            rot_sum += p.rotation_deg;
            flips += p.flip_h as usize;
            let ColorDistortion::Affine(e) = sample_color_error(&c, &mut rng) else {
                panic!("affine model expected by default");
            };
            for ch in 0..3 {
                assert!(c.mult.contains(e.mult[ch]));
                assert!(c.add.contains(e.add[ch]));
            }
        }
        // Uniform on [0, 360]: mean 180, standard error of the mean ~1.04 deg.
        assert!((rot_sum / n as f64 - 180.0).abs() < 5.0);
        assert!((flips as f64 / n as f64 - 0.5).abs() < 0.03);
    }

    #[test]
    fn identity_transform_is_bitwise_identity() {
        let img = random_image(7, 9, 2);
        assert_eq!(apply_transform(&img, &TransformParams::identity(), true), img);
        assert_eq!(apply_transform(&img, &TransformParams::identity(), false), img);
    }

    #[test]
    fn double_flip_is_identity() {
        let img = random_image(6, 5, 3);
        let p = TransformParams {
            flip_h: true,
            ..TransformParams::identity()
        };
        let once = apply_transform(&img, &p, false);
        assert_ne!(once, img);
        assert_eq!(apply_transform(&once, &p, false), img);
    }

    #[test]
    fn quarter_turn_is_an_exact_permutation() {
        let n = 8;
        let img = random_image(n, n, 4);
        let p = TransformParams {
            rotation_deg: 90.0,
            ..TransformParams::identity()
        };
        let out = apply_transform(&img, &p, false);
        // Inverse map of the quarter turn about the center: (y, x) samples (n-1-x, y).
        for c in 0..3 {
            for y in 0..n {
                for x in 0..n {
                    assert_eq!(out.get(c, y, x), img.get(c, n - 1 - x, y));
                }
            }
        }
        let p4 = TransformParams {
            rotation_deg: 360.0,
            ..TransformParams::identity()
        };
        assert_eq!(apply_transform(&img, &p4, false), img);
    }

    #[test]
    fn lighting_only_touches_ambient() {
        let img = Image::filled(3, 3, 0.5);
        let p = TransformParams {
            lighting_mult: 1.2,
            ..TransformParams::identity()
        };
        assert!(apply_transform(&img, &p, true).data().iter().all(|&v| (v - 0.6).abs() < 1e-15));
        assert_eq!(apply_transform(&img, &p, false), img);
    }

    #[test]
    fn translation_replicates_edges() {
        let mut img = Image::zeros(4, 4);
        for c in 0..3 {
            for y in 0..4 {
                for x in 0..4 {
                    img.set(c, y, x, x as f64 / 4.0);
                }
            }
        }
        // shift right by 0.5 * 4 / 2 = 1 pixel
        let p = TransformParams {
            translation_frac: 0.5,
            translation_angle: 0.0,
            ..TransformParams::identity()
        };
        let out = apply_transform(&img, &p, false);
        for y in 0..4 {
            assert_eq!(out.get(0, y, 0), 0.0);
            assert_eq!(out.get(0, y, 1), 0.0);
            assert_eq!(out.get(0, y, 3), 0.5);
        }
    }

    #[test]
    fn color_error_examples() {
        let img = random_image(3, 3, 5);
        assert_eq!(apply_color_error(&img, &ColorError::identity()), img);
        let bright = Image::filled(2, 2, 0.9);
        let e = ColorError {
            mult: [1.0; 3],
            add: [0.2; 3],
        };
        assert!(apply_color_error(&bright, &e).data().iter().all(|&v| v == 1.0));
        let e = ColorError {
            mult: [0.8; 3],
            add: [-0.1; 3],
        };
        let out = apply_color_error(&Image::filled(1, 1, 0.5), &e);
        assert!((out.get(0, 0, 0) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn color_backward_matches_finite_differences() {
        let img = random_image(4, 4, 6).map(|v| 0.2 + 0.6 * v);
        let up = random_image(4, 4, 7);
        let dist = ColorDistortion::Polynomial(PolynomialColorError {
            coefficients: [vec![0.1, 0.9, 0.02], vec![-0.2, 1.1, 0.0], vec![0.0, 1.0, 0.05]],
        });
        let g = dist.backward(&img, &up).unwrap();
        let h = 1e-6;
        for i in 0..img.data().len() {
            let mut p = img.clone();
            let mut m = img.clone();
            p.data_mut()[i] += h;
            m.data_mut()[i] -= h;
            let fp: f64 = dist.apply(&p).data().iter().zip(up.data()).map(|(a, b)| a * b).sum();
            let fm: f64 = dist.apply(&m).data().iter().zip(up.data()).map(|(a, b)| a * b).sum();
            assert!(((fp - fm) / (2.0 * h) - g.data()[i]).abs() < 1e-6);
        }
    }

    proptest! {
        #[test]
        fn color_error_is_monotone(x in 0.0f64..1.0, dx in 0.0f64..0.5, m in 0.7f64..1.3, a in -0.2f64..0.2) {
            let e = ColorError { mult: [m; 3], add: [a; 3] };
            let lo = apply_color_error(&Image::filled(1, 1, x), &e).get(0, 0, 0);
            let hi = apply_color_error(&Image::filled(1, 1, (x + dx).min(1.0)), &e).get(0, 0, 0);
            prop_assert!(hi >= lo);
        }

        #[test]
        fn transformed_pair_keeps_scene_invariants(seed in 0u64..300) {
            let amb = random_image(8, 8, seed).map(|v| 0.5 * v);
            let full = amb.map(|v| (v + 0.3).min(1.0));
            let scene = ScenePair::new(amb, full).unwrap();
            let mut rng = stream_rng(seed, 1);
            let ranges = TransformRanges { lighting_mult: Range::new(0.8, 1.0), ..Default::default() };
            let p = sample_transform(&ranges, &mut rng);
            let t = apply_transform_pair(&scene, &p);
            prop_assert!(ScenePair::new(t.ambient.clone(), t.full.clone()).is_ok());
            for (a, f) in t.ambient.data().iter().zip(t.full.data()) {
                prop_assert!(f >= a);
            }
        }
    }
}
