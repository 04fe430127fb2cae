//! Optimization of adversarial light signals under expectation over
//! transformation, affinity-target discovery and signal banks.

mod affinity;
mod bank;

pub use affinity::{affinity_targets, label_tokens_overlap, AffinityConfig, AffinityTarget};
pub use bank::{build_signal_bank, scene_at_level, select_signal, BankEntry, BankFailure, SignalBank};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{signal_length, CameraTimings, LightSignal, OptimizerVariables};
use crate::classifier::Classifier;
use crate::error::{Error, Result};
use crate::optim::AdamConfig;
use crate::render::{Renderer, ScenePair};
use crate::rng::stream_rng;
use crate::transforms::{apply_transform_pair, sample_color_error, sample_transform, ColorRanges, TransformRanges};

/// Below this linearized attacker-light contribution the scene cannot be influenced.
pub const MIN_HEADROOM: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub target_class: usize,
    pub max_iterations: usize,
    /// EoT samples averaged per step.
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub convergence_window: usize,
    /// Stop once the mean loss of the last window improves on the window
    /// before it by less than this.
    pub convergence_tolerance: f64,
    /// Stop once the mean target confidence over the last window reaches this.
    pub confidence_stop: f64,
    pub transforms: TransformRanges,
    pub color: ColorRanges,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            target_class: 0,
            max_iterations: 5000,
            batch_size: 8,
            adam: AdamConfig::default(),
            convergence_window: 200,
            convergence_tolerance: 1e-4,
            confidence_stop: 0.9,
            transforms: TransformRanges::default(),
            color: ColorRanges::default(),
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self, classes: usize) -> Result<()> {
        if self.max_iterations == 0 || self.batch_size == 0 {
            return Err(Error::OutOfRange("max_iterations and batch_size must be at least 1".into()));
        }
        if self.convergence_window == 0 {
            return Err(Error::OutOfRange("convergence_window must be at least 1".into()));
        }
        if self.target_class >= classes {
            return Err(Error::InvalidClass {
                index: self.target_class,
                classes,
            });
        }
        let a = &self.adam;
        if !(a.learning_rate > 0.0 && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.epsilon > 0.0) {
            return Err(Error::OutOfRange("invalid Adam hyperparameters".into()));
        }
        self.transforms.validate()?;
        self.color.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackResult {
    pub signal: LightSignal,
    /// Batch loss of the last iteration.
    pub final_loss: f64,
    pub iterations_used: usize,
    pub loss_trace: Vec<f64>,
    /// Mean target probability per iteration.
    pub confidence_trace: Vec<f64>,
    pub converged: bool,
}

/// What the optimizer drives the classifier towards.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// Minimize cross-entropy of this class.
    Targeted(usize),
    /// Maximize cross-entropy of this class.
    Untargeted(usize),
}

impl Objective {
    fn class(self) -> usize {
        match self {
            Objective::Targeted(k) | Objective::Untargeted(k) => k,
        }
    }
}

/// One EoT draw: transform, color error and offset.
#[derive(Debug, Clone)]
pub(crate) struct EotDraw {
    pub pair: ScenePair,
    pub color: crate::transforms::ColorDistortion,
    pub delta: usize,
}

pub(crate) fn draw_eot(
    scene: &ScenePair,
    transforms: &TransformRanges,
    color: &ColorRanges,
    len: usize,
    seed: u64,
    stream: u64,
) -> EotDraw {
    let mut rng = stream_rng(seed, stream);
    let t = sample_transform(transforms, &mut rng);
    let color = sample_color_error(color, &mut rng);
    // Both ends included; delta = len aliases delta = 0.
    let delta = rng.random_range(0..=len);
    EotDraw {
        pair: apply_transform_pair(scene, &t),
        color,
        delta,
    }
}

struct SampleOutcome {
    loss: f64,
    confidence: f64,
    grad: Vec<f64>,
}

fn eot_sample<C: Classifier + ?Sized>(
    draw: &EotDraw,
    classifier: &C,
    timings: &CameraTimings,
    signal: &LightSignal,
    objective: Objective,
) -> Result<SampleOutcome> {
    let renderer = Renderer::new(&draw.pair, timings)?;
    let (rendered, gain) = renderer.render_with_gain(signal, draw.delta)?;
    let seen = draw.color.apply(&rendered);
    let (ce, grad_seen) = classifier.loss_and_input_gradient(&seen, objective.class())?;
    let (loss, grad_seen) = match objective {
        Objective::Targeted(_) => (ce, grad_seen),
        Objective::Untargeted(_) => (-ce, grad_seen.map(|g| -g)),
    };
    let grad_rendered = draw.color.backward(&rendered, &grad_seen)?;
    let grad = renderer.backward(signal, draw.delta, &gain, &rendered, &grad_rendered)?;
    Ok(SampleOutcome {
        loss,
        confidence: (-ce).exp(),
        grad,
    })
}

pub(crate) fn check_inputs(scene: &ScenePair, timings: &CameraTimings) -> Result<()> {
    timings.validate()?;
    if scene.dims() != (timings.rows, timings.cols) {
        return Err(Error::shape(format!(
            "scene is {:?}, camera expects {}x{}",
            scene.dims(),
            timings.rows,
            timings.cols
        )));
    }
    let headroom = scene.headroom(timings.gamma);
    if headroom < MIN_HEADROOM {
        return Err(Error::NoSignalLeverage {
            headroom,
            threshold: MIN_HEADROOM,
        });
    }
    Ok(())
}

/// Optimizes a light signal that makes `classifier` see `config.target_class`.
pub fn optimize_signal<C: Classifier + ?Sized>(
    scene: &ScenePair,
    classifier: &C,
    timings: &CameraTimings,
    config: &AttackConfig,
) -> Result<AttackResult> {
    config.validate(classifier.num_classes())?;
    run_attack(scene, classifier, timings, config, Objective::Targeted(config.target_class), true)
}

/// The optimization loop shared by targeted attacks and untargeted warmups.
/// With `may_stop` false the loop always runs `max_iterations`.
pub fn run_attack<C: Classifier + ?Sized>(
    scene: &ScenePair,
    classifier: &C,
    timings: &CameraTimings,
    config: &AttackConfig,
    objective: Objective,
    may_stop: bool,
) -> Result<AttackResult> {
    check_inputs(scene, timings)?;
    let k = classifier.num_classes();
    if objective.class() >= k {
        return Err(Error::InvalidClass {
            index: objective.class(),
            classes: k,
        });
    }
    let len = signal_length(timings);
    let mut vars = OptimizerVariables::random(*timings, config.adam, &mut stream_rng(config.seed, 0));
    let b = config.batch_size;
    let window = config.convergence_window;
    let mut loss_trace = Vec::new();
    let mut confidence_trace = Vec::new();
    let mut converged = false;

    for n in 0..config.max_iterations {
        let signal = vars.signal();
        let outcomes: Vec<Result<SampleOutcome>> = (0..b)
            .into_par_iter()
            .map(|i| {
                let stream = 1 + (n * b + i) as u64;
                let draw = draw_eot(scene, &config.transforms, &config.color, len, config.seed, stream);
                eot_sample(&draw, classifier, timings, &signal, objective)
            })
            .collect();
        let mut loss = 0.0;
        let mut confidence = 0.0;
        let mut grad = vec![0.0; vars.v.len()];
        for o in outcomes {
            let o = o?;
            loss += o.loss;
            confidence += o.confidence;
            for (g, x) in grad.iter_mut().zip(&o.grad) {
                *g += x;
            }
        }
        let scale = 1.0 / b as f64;
        loss *= scale;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("attack loss at iteration {n}")));
        }
        grad.iter_mut().for_each(|g| *g *= scale);
        loss_trace.push(loss);
        confidence_trace.push(confidence * scale);
        vars.descend(&grad)?;

        if may_stop && has_converged(&loss_trace, &confidence_trace, window, config) {
            converged = true;
            break;
        }
    }

    Ok(AttackResult {
        signal: vars.signal(),
        final_loss: *loss_trace.last().expect("at least one iteration"),
        iterations_used: loss_trace.len(),
        loss_trace,
        confidence_trace,
        converged,
    })
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn has_converged(losses: &[f64], confidences: &[f64], window: usize, config: &AttackConfig) -> bool {
    let n = losses.len();
    if n < window {
        return false;
    }
    if mean(&confidences[n - window..]) >= config.confidence_stop {
        return true;
    }
    if n < 2 * window {
        return false;
    }
    let previous = mean(&losses[n - 2 * window..n - window]);
    let current = mean(&losses[n - window..]);
    previous - current < config.convergence_tolerance
}

/// Trailing moving average with the given window (shorter at the start).
pub fn smoothed(trace: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(trace.len());
    let mut sum = 0.0;
    for i in 0..trace.len() {
        sum += trace[i];
        if i >= window {
            sum -= trace[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

/// Mean targeted cross-entropy at every offset `0..l`, averaged over
/// `n_transforms` sampled transforms and color errors.
#[allow(clippy::too_many_arguments)]
pub fn per_offset_losses<C: Classifier + ?Sized>(
    scene: &ScenePair,
    classifier: &C,
    timings: &CameraTimings,
    signal: &LightSignal,
    target: usize,
    transforms: &TransformRanges,
    color: &ColorRanges,
    n_transforms: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let len = signal.len();
    let per_transform: Vec<Result<Vec<f64>>> = (0..n_transforms as u64)
        .into_par_iter()
        .map(|t| {
            let draw = draw_eot(scene, transforms, color, len, seed, t);
            let renderer = Renderer::new(&draw.pair, timings)?;
            (0..len)
                .map(|delta| {
                    let seen = draw.color.apply(&renderer.render(signal, delta)?);
                    let out = classifier.forward(&seen)?;
                    Ok(crate::classifier::softmax_cross_entropy(&out.logits, target).0)
                })
                .collect()
        })
        .collect();
    let mut sums = vec![0.0; len];
    for row in per_transform {
        for (s, l) in sums.iter_mut().zip(row?) {
            *s += l;
        }
    }
    Ok(sums.into_iter().map(|s| s / n_transforms.max(1) as f64).collect())
}

/// Mean of the per-iteration values, for reporting.
pub fn trace_mean(trace: &[f64]) -> f64 {
    if trace.is_empty() {
        0.0
    } else {
        mean(trace)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::SRGB_GAMMA;
    use crate::classifier::Model;
    use crate::image::Image;

    fn small_setup() -> (ScenePair, Model, CameraTimings) {
        let n = 8;
        let amb = Image::from_planar(n, n, (0..3 * n * n).map(|i| 0.2 + 0.3 * ((i * 7) % 11) as f64 / 11.0).collect()).unwrap();
        let full = amb.map(|v| (v + 0.3).min(1.0));
        let model = Model::reference_with_widths(n, n, vec!["a".into(), "b".into(), "c".into()], [2, 3], 4, 3).unwrap();
        let t = CameraTimings::new(10.0, 30.0, n, n, SRGB_GAMMA).unwrap();
        (ScenePair::new(amb, full).unwrap(), model, t)
    }

    #[test]
    fn flat_scene_has_no_leverage() {
        let (scene, model, t) = small_setup();
        let flat = ScenePair::new(scene.ambient.clone(), scene.ambient.clone()).unwrap();
        let r = optimize_signal(&flat, &model, &t, &AttackConfig::default());
        assert!(matches!(r, Err(Error::NoSignalLeverage { .. })));
    }

    #[test]
    fn single_iteration_and_determinism() {
        let (scene, model, t) = small_setup();
        let cfg = AttackConfig {
            max_iterations: 1,
            target_class: 2,
            seed: 11,
            ..AttackConfig::default()
        };
        let a = optimize_signal(&scene, &model, &t, &cfg).unwrap();
        assert_eq!(a.iterations_used, 1);
        assert_eq!(a.loss_trace.len(), 1);
        let cfg = AttackConfig {
            max_iterations: 30,
            ..cfg
        };
        let x = optimize_signal(&scene, &model, &t, &cfg).unwrap();
        let y = optimize_signal(&scene, &model, &t, &cfg).unwrap();
        assert_eq!(x, y);
        assert_eq!(x.signal.len(), signal_length(&t));
    }

    #[test]
    fn config_is_validated() {
        let (scene, model, t) = small_setup();
        for cfg in [
            AttackConfig {
                target_class: 3,
                ..AttackConfig::default()
            },
            AttackConfig {
                batch_size: 0,
                ..AttackConfig::default()
            },
            AttackConfig {
                max_iterations: 0,
                ..AttackConfig::default()
            },
        ] {
            assert!(optimize_signal(&scene, &model, &t, &cfg).is_err());
        }
    }

    #[test]
    fn smoothing_window() {
        assert_eq!(smoothed(&[2.0, 4.0, 6.0, 8.0], 2), vec![2.0, 3.0, 5.0, 7.0]);
    }
}
