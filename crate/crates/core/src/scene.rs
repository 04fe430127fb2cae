//! Building scene pairs from a single base photograph by mean-intensity matching.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::render::ScenePair;

/// Default ambient-only mean intensity.
pub const DEFAULT_AMBIENT_MEAN: f64 = 85.0 / 255.0;
/// Default mean intensity with the attacker light fully on.
pub const DEFAULT_FULL_MEAN: f64 = 160.0 / 255.0;
/// Required accuracy of a matched mean.
pub const MEAN_TOLERANCE: f64 = 1.0 / 255.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneTargets {
    pub ambient_mean: f64,
    pub full_mean: f64,
}

impl Default for SceneTargets {
    fn default() -> Self {
        Self {
            ambient_mean: DEFAULT_AMBIENT_MEAN,
            full_mean: DEFAULT_FULL_MEAN,
        }
    }
}

impl SceneTargets {
    pub fn validate(&self) -> Result<()> {
        let (a, f) = (self.ambient_mean, self.full_mean);
        if !(a.is_finite() && f.is_finite() && 0.0 < a && a < f && f <= 1.0) {
            return Err(Error::OutOfRange(format!(
                "scene means need 0 < ambient < full <= 1, got ambient {a}, full {f}"
            )));
        }
        Ok(())
    }
}

/// `clamp(base * s)` with `s` chosen so the mean equals `target`.
///
/// The first guess is the plain ratio; if clamping pulls the mean away the
/// scale is refined by bisection, which is monotone in `s`.
pub fn match_mean(base: &Image, target: f64) -> Result<Image> {
    if !(0.0..=1.0).contains(&target) {
        return Err(Error::UnreachableMean {
            target,
            reason: "target outside [0, 1]".into(),
        });
    }
    let scaled = |s: f64| base.map(|v| (v * s).clamp(0.0, 1.0));
    let m0 = base.mean();
    if target == 0.0 {
        return Ok(scaled(0.0));
    }
    if m0 <= 0.0 {
        return Err(Error::UnreachableMean {
            target,
            reason: "base image is black".into(),
        });
    }
    let first = scaled(target / m0);
    if (first.mean() - target).abs() <= 1e-12 {
        return Ok(first);
    }
    let min_positive = base
        .data()
        .iter()
        .copied()
        .filter(|&v| v > 0.0)
        .fold(f64::INFINITY, f64::min);
    let mut hi = 1.0 / min_positive;
    let ceiling = scaled(hi).mean();
    if ceiling < target - MEAN_TOLERANCE {
        return Err(Error::UnreachableMean {
            target,
            reason: format!("saturating every lit pixel only reaches {ceiling:.4}"),
        });
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if scaled(mid).mean() < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let out = scaled(hi);
    let err = (out.mean() - target).abs();
    if err > MEAN_TOLERANCE {
        return Err(Error::UnreachableMean {
            target,
            reason: format!("closest mean is off by {err:.4}"),
        });
    }
    Ok(out)
}

/// Ambient and fully-lit captures synthesized from one base image.
pub fn synthesize_pair(base: &Image, targets: &SceneTargets) -> Result<ScenePair> {
    targets.validate()?;
    let ambient = match_mean(base, targets.ambient_mean)?;
    let full = match_mean(base, targets.full_mean)?;
    ScenePair::new(ambient, full)
}

/// Fraction of the fully-lit mean contributed by the attacker light when
/// the ambient mean is `ambient_mean`.
pub fn led_fraction(ambient_mean: f64, full_mean: f64) -> f64 {
    1.0 - ambient_mean / full_mean
}
