//! Differentiable image classifiers: the built-in CNN, its training
//! procedure and synthetic dataset, and a bridge to external models.

mod bridge;
mod dataset;
mod network;
mod train;

pub use bridge::{decode_pixels, encode_pixels, serve_bridge, BridgeClassifier, BridgeRequest, BridgeResponse};
pub use dataset::{clean_exemplar, generate_samples, shape_labels, Dataset, DatasetConfig, Sample, ShapeClass};
pub use network::{ForwardTape, Layer, Model, ParamGrads, Shape};
pub use train::{evaluate_accuracy, train_on, train_reference, TrainConfig, TrainedModel};

use crate::error::{Error, Result};
use crate::image::Image;

/// Logits and their softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierOutput {
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
}

impl ClassifierOutput {
    pub fn from_logits(logits: Vec<f64>) -> Result<Self> {
        if logits.is_empty() {
            return Err(Error::shape("classifier returned no logits"));
        }
        if let Some(v) = logits.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("logit {v}")));
        }
        let probabilities = softmax(&logits);
        Ok(Self { logits, probabilities })
    }

    /// Index of the unique largest logit; `None` on an exact tie.
    pub fn strict_argmax(&self) -> Option<usize> {
        let (best, &max) = self
            .logits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))?;
        let ties = self.logits.iter().filter(|&&v| v == max).count();
        (ties == 1).then_some(best)
    }

    /// Lowest index holding the largest logit.
    pub fn top_class(&self) -> usize {
        let max = self.logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        self.logits.iter().position(|&v| v == max).unwrap_or(0)
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Cross-entropy `-log softmax(logits)[target]` and its gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&v| (v - max).exp()).sum();
    let log_z = max + sum.ln();
    let loss = log_z - logits[target];
    let mut grad: Vec<f64> = logits.iter().map(|&v| (v - log_z).exp()).collect();
    grad[target] -= 1.0;
    (loss, grad)
}

/// A model the attack can query for outputs and input gradients.
///
/// Weights are frozen; only the input image is differentiated.
pub trait Classifier: Send + Sync {
    fn num_classes(&self) -> usize;

    fn labels(&self) -> Vec<String>;

    fn forward(&self, image: &Image) -> Result<ClassifierOutput>;

    /// Cross-entropy against `target` and its gradient with respect to every input sample.
    fn loss_and_input_gradient(&self, image: &Image, target: usize) -> Result<(f64, Image)>;

    fn label(&self, class: usize) -> String {
        self.labels()
            .get(class)
            .cloned()
            .unwrap_or_else(|| format!("class_{class}"))
    }
}

impl<C: Classifier + ?Sized> Classifier for &C {
    fn num_classes(&self) -> usize {
        (**self).num_classes()
    }

    fn labels(&self) -> Vec<String> {
        (**self).labels()
    }

    fn forward(&self, image: &Image) -> Result<ClassifierOutput> {
        (**self).forward(image)
    }

    fn loss_and_input_gradient(&self, image: &Image, target: usize) -> Result<(f64, Image)> {
        (**self).loss_and_input_gradient(image, target)
    }
}

impl<C: Classifier + ?Sized> Classifier for Box<C> {
    fn num_classes(&self) -> usize {
        (**self).num_classes()
    }

    fn labels(&self) -> Vec<String> {
        (**self).labels()
    }

    fn forward(&self, image: &Image) -> Result<ClassifierOutput> {
        (**self).forward(image)
    }

    fn loss_and_input_gradient(&self, image: &Image, target: usize) -> Result<(f64, Image)> {
        (**self).loss_and_input_gradient(image, target)
    }
}
