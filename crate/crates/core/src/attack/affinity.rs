//! Discovering which target classes a scene is easiest to push towards.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{draw_eot, run_attack, AttackConfig, Objective};
use crate::camera::{CameraTimings, LightSignal};
use crate::classifier::Classifier;
use crate::error::{Error, Result};
use crate::render::{Renderer, ScenePair};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AffinityConfig {
    /// Iterations of the untargeted warmup attack.
    pub warmup_iterations: usize,
    /// EoT renders used to rank classes after the warmup.
    pub ranking_samples: usize,
    pub top_k: usize,
    /// Labels never returned (case-insensitive).
    pub exclusions: Vec<String>,
    /// Also drop classes whose label shares a word with the source label.
    pub token_filter: bool,
}

impl Default for AffinityConfig {
    fn default() -> Self {
        Self {
            warmup_iterations: 1000,
            ranking_samples: 64,
            top_k: 7,
            exclusions: Vec::new(),
            token_filter: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffinityTarget {
    pub class: usize,
    pub label: String,
    /// Mean probability over the ranking renders.
    pub confidence: f64,
}

fn tokens(label: &str) -> Vec<String> {
    label
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Whether two labels share a word, ignoring case and punctuation.
pub fn label_tokens_overlap(a: &str, b: &str) -> bool {
    let ta = tokens(a);
    tokens(b).iter().any(|t| ta.contains(t))
}

/// Runs an untargeted warmup away from the scene's own class, then ranks the
/// remaining classes by how often the warmed-up signal already yields them.
///
/// Returns the source class and up to `top_k` targets, most likely first.
pub fn affinity_targets<C: Classifier + ?Sized>(
    scene: &ScenePair,
    classifier: &C,
    timings: &CameraTimings,
    config: &AttackConfig,
    affinity: &AffinityConfig,
) -> Result<(usize, Vec<AffinityTarget>)> {
    let k = classifier.num_classes();
    let warm_cfg = AttackConfig {
        target_class: 0,
        max_iterations: affinity.warmup_iterations.max(1),
        ..config.clone()
    };
    warm_cfg.validate(k)?;
    let source = classifier.forward(&scene.full)?.top_class();
    let warm = run_attack(scene, classifier, timings, &warm_cfg, Objective::Untargeted(source), false)?;
    let mean_probs = mean_probabilities(scene, classifier, timings, &warm.signal, config, affinity.ranking_samples)?;

    let labels = classifier.labels();
    let source_label = &labels[source];
    let excluded: Vec<String> = affinity.exclusions.iter().map(|e| e.to_lowercase()).collect();
    let mut ranked: Vec<AffinityTarget> = (0..k)
        .filter(|&c| c != source)
        .filter(|&c| !excluded.contains(&labels[c].to_lowercase()))
        .filter(|&c| !(affinity.token_filter && label_tokens_overlap(&labels[c], source_label)))
        .map(|c| AffinityTarget {
            class: c,
            label: labels[c].clone(),
            confidence: mean_probs[c],
        })
        .collect();
    // Stable sort keeps lower class indices first on equal confidence.
    ranked.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    ranked.truncate(affinity.top_k);
    if ranked.is_empty() {
        return Err(Error::OutOfRange("every candidate target was filtered out".into()));
    }
    Ok((source, ranked))
}

fn mean_probabilities<C: Classifier + ?Sized>(
    scene: &ScenePair,
    classifier: &C,
    timings: &CameraTimings,
    signal: &LightSignal,
    config: &AttackConfig,
    samples: usize,
) -> Result<Vec<f64>> {
    let samples = samples.max(1);
    // Streams above any the warmup could have used.
    let base = u64::MAX / 2;
    let probs: Vec<Result<Vec<f64>>> = (0..samples as u64)
        .into_par_iter()
        .map(|i| {
            let draw = draw_eot(scene, &config.transforms, &config.color, signal.len(), config.seed, base + i);
            let renderer = Renderer::new(&draw.pair, timings)?;
            let seen = draw.color.apply(&renderer.render(signal, draw.delta)?);
            Ok(classifier.forward(&seen)?.probabilities)
        })
        .collect();
    let mut sum = vec![0.0; classifier.num_classes()];
    for p in probs {
        for (s, v) in sum.iter_mut().zip(p?) {
            *s += v;
        }
    }
    Ok(sum.into_iter().map(|s| s / samples as f64).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_overlap() {
        assert!(label_tokens_overlap("coffee mug", "Mug"));
        assert!(label_tokens_overlap("dot pair", "pair-of-socks"));
        assert!(!label_tokens_overlap("disk", "ring"));
    }
}
