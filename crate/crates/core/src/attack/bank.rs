//! Banks of signals, one per ambient-light interval and exposure.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;

use super::{optimize_signal, AttackConfig};
use crate::camera::{CameraTimings, LightSignal};
use crate::classifier::Classifier;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::render::ScenePair;
use crate::rng::derive_seed;
use crate::scene::match_mean;

/// Exposures closer than this are the same exposure.
const EXPOSURE_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct BankEntry {
    /// Closed ambient mean-intensity interval served by this entry.
    pub ambient_interval: [f64; 2],
    /// Level the signal was optimized at.
    pub ambient_level: f64,
    pub exposure_us: f64,
    pub signal: LightSignal,
    pub final_loss: f64,
    pub iterations_used: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankFailure {
    pub ambient_level: f64,
    pub exposure_us: f64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SignalBank {
    /// Mean intensity of the fully-lit capture used for every entry.
    pub full_mean: f64,
    pub entries: Vec<BankEntry>,
    pub failures: Vec<BankFailure>,
}

/// Intervals bounded by midpoints between neighbouring levels; the outer
/// ends extend by half the adjacent gap (0.1 for a lone level), clamped to [0, 1].
fn intervals(sorted: &[f64]) -> Vec<[f64; 2]> {
    let n = sorted.len();
    (0..n)
        .map(|i| {
            let lo = if i > 0 {
                0.5 * (sorted[i - 1] + sorted[i])
            } else if n > 1 {
                sorted[0] - 0.5 * (sorted[1] - sorted[0])
            } else {
                sorted[0] - 0.1
            };
            let hi = if i + 1 < n {
                0.5 * (sorted[i] + sorted[i + 1])
            } else if n > 1 {
                sorted[i] + 0.5 * (sorted[i] - sorted[i - 1])
            } else {
                sorted[0] + 0.1
            };
            [lo.max(0.0), hi.min(1.0)]
        })
        .collect()
}

/// The scene pair for one ambient level: the base image matched to
/// `ambient_level` and to `full_mean`.
pub fn scene_at_level(base: &Image, ambient_level: f64, full_mean: f64) -> Result<ScenePair> {
    ScenePair::new(match_mean(base, ambient_level)?, match_mean(base, full_mean)?)
}

/// One optimization per (exposure, level). Entry `i` in exposure-major
/// order is seeded with `derive_seed(config.seed, i)`.
pub fn build_signal_bank<C: Classifier + ?Sized>(
    base: &Image,
    classifier: &C,
    timings: &CameraTimings,
    ambient_levels: &[f64],
    exposures_us: &[f64],
    full_mean: f64,
    config: &AttackConfig,
) -> Result<SignalBank> {
    if ambient_levels.is_empty() || exposures_us.is_empty() {
        return Err(Error::Bank("needs at least one ambient level and one exposure".into()));
    }
    if let Some(l) = ambient_levels.iter().find(|l| !(0.0..=1.0).contains(*l)) {
        return Err(Error::Bank(format!("ambient level {l} outside [0, 1]")));
    }
    let mut levels = ambient_levels.to_vec();
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    let mut exposures = exposures_us.to_vec();
    exposures.sort_by(f64::total_cmp);
    exposures.dedup_by(|a, b| (*a - *b).abs() < EXPOSURE_EPS);
    let bounds = intervals(&levels);

    let jobs: Vec<(usize, f64)> = exposures
        .iter()
        .flat_map(|&e| (0..levels.len()).map(move |li| (li, e)))
        .collect();
    let results: Vec<(usize, f64, Result<BankEntry>)> = jobs
        .par_iter()
        .enumerate()
        .map(|(idx, &(li, exposure))| {
            let run = || -> Result<BankEntry> {
                let camera = timings.with_exposure(exposure)?;
                let scene = scene_at_level(base, levels[li], full_mean)?;
                let cfg = AttackConfig {
                    seed: derive_seed(config.seed, idx as u64),
                    ..config.clone()
                };
                let r = optimize_signal(&scene, classifier, &camera, &cfg)?;
                Ok(BankEntry {
                    ambient_interval: bounds[li],
                    ambient_level: levels[li],
                    exposure_us: exposure,
                    signal: r.signal,
                    final_loss: r.final_loss,
                    iterations_used: r.iterations_used,
                })
            };
            (li, exposure, run())
        })
        .collect();

    let mut entries = Vec::new();
    let mut failures = Vec::new();
    for (li, exposure, r) in results {
        match r {
            Ok(e) => entries.push(e),
            Err(e) => failures.push(BankFailure {
                ambient_level: levels[li],
                exposure_us: exposure,
                error: e.to_string(),
            }),
        }
    }
    if entries.is_empty() {
        let detail: Vec<String> = failures.iter().map(|f| f.error.clone()).collect();
        return Err(Error::Bank(format!("every entry failed: {}", detail.join("; "))));
    }
    Ok(SignalBank {
        full_mean,
        entries,
        failures,
    })
}

/// The entry for `exposure_us` whose interval contains `ambient_level`;
/// the lower interval wins on a shared boundary, and a level outside every
/// interval goes to the nearest interval midpoint (lower on a tie).
pub fn select_signal(bank: &SignalBank, ambient_level: f64, exposure_us: f64) -> Result<&LightSignal> {
    let mut candidates: Vec<&BankEntry> = bank
        .entries
        .iter()
        .filter(|e| (e.exposure_us - exposure_us).abs() < EXPOSURE_EPS)
        .collect();
    if candidates.is_empty() {
        return Err(Error::MissingSignal { exposure_us });
    }
    candidates.sort_by(|a, b| a.ambient_interval[0].total_cmp(&b.ambient_interval[0]));
    if let Some(e) = candidates
        .iter()
        .find(|e| e.ambient_interval[0] <= ambient_level && ambient_level <= e.ambient_interval[1])
    {
        return Ok(&e.signal);
    }
    let distance = |e: &BankEntry| (0.5 * (e.ambient_interval[0] + e.ambient_interval[1]) - ambient_level).abs();
    let mut best = candidates[0];
    for e in &candidates[1..] {
        if distance(e) < distance(best) {
            best = e;
        }
    }
    Ok(&best.signal)
}

const BANK_FORMAT: &str = "stripelight-bank";
const BANK_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EntryDoc {
    ambient_interval: [f64; 2],
    ambient_level: f64,
    exposure_us: f64,
    final_loss: f64,
    iterations_used: usize,
    signal: Box<RawValue>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BankDoc {
    format: String,
    version: u32,
    full_mean: f64,
    entries: Vec<EntryDoc>,
    failures: Vec<BankFailure>,
}

impl SignalBank {
    pub fn to_json(&self) -> Result<String> {
        let entries = self
            .entries
            .iter()
            .map(|e| {
                Ok(EntryDoc {
                    ambient_interval: e.ambient_interval,
                    ambient_level: e.ambient_level,
                    exposure_us: e.exposure_us,
                    final_loss: e.final_loss,
                    iterations_used: e.iterations_used,
                    signal: RawValue::from_string(e.signal.to_json()?)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(serde_json::to_string_pretty(&BankDoc {
            format: BANK_FORMAT.into(),
            version: BANK_VERSION,
            full_mean: self.full_mean,
            entries,
            failures: self.failures.clone(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: BankDoc = serde_json::from_str(text)?;
        if doc.format != BANK_FORMAT || doc.version != BANK_VERSION {
            return Err(Error::Parse(format!("unsupported bank document {:?} v{}", doc.format, doc.version)));
        }
        let entries = doc
            .entries
            .into_iter()
            .map(|e| {
                let signal = LightSignal::from_json(e.signal.get())?;
                if (signal.timings().exposure_us - e.exposure_us).abs() >= EXPOSURE_EPS {
                    return Err(Error::Bank(format!(
                        "entry for exposure {} holds a signal for exposure {}",
                        e.exposure_us,
                        signal.timings().exposure_us
                    )));
                }
                Ok(BankEntry {
                    ambient_interval: e.ambient_interval,
                    ambient_level: e.ambient_level,
                    exposure_us: e.exposure_us,
                    signal,
                    final_loss: e.final_loss,
                    iterations_used: e.iterations_used,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            full_mean: doc.full_mean,
            entries,
            failures: doc.failures,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|source| Error::File {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| Error::File {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }
}
