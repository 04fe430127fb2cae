//! Deterministic minibatch training for the reference CNN.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::{generate_samples, Dataset, DatasetConfig, Sample};
use super::network::{Model, ParamGrads};
use super::{softmax_cross_entropy, Classifier, ClassifierOutput};
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::rng::{derive_seed, stream_rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub dataset: DatasetConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Minimum held-out accuracy; training below it is an error.
    pub required_accuracy: f64,
    pub conv_channels: [usize; 2],
    pub hidden: usize,
    /// Draw a fresh training set for every epoch after the first.
    pub resample: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetConfig::default(),
            epochs: 80,
            batch_size: 32,
            learning_rate: 3e-3,
            required_accuracy: 0.95,
            conv_channels: [16, 32],
            hidden: 64,
            resample: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: Model,
    pub test_accuracy: f64,
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Samples per gradient chunk. Chunks are summed in a fixed order so the
/// result does not depend on the thread count.
const CHUNK: usize = 8;

/// Generates the dataset and trains the reference model on it.
pub fn train_reference(config: &TrainConfig, seed: u64) -> Result<TrainedModel> {
    let data = Dataset::generate(&config.dataset, seed)?;
    train_on(&data, config, seed)
}

pub fn train_on(data: &Dataset, config: &TrainConfig, seed: u64) -> Result<TrainedModel> {
    if config.batch_size == 0 || data.train.is_empty() {
        return Err(Error::OutOfRange("training needs samples and a positive batch size".into()));
    }
    let mut model = Model::reference_with_widths(
        data.size,
        data.size,
        data.labels.clone(),
        config.conv_channels,
        config.hidden,
        derive_seed(seed, 1),
    )?;
    let adam_cfg = AdamConfig {
        learning_rate: config.learning_rate,
        ..AdamConfig::default()
    };
    let mut adams: Vec<Adam> = model
        .param_tensors_mut()
        .into_iter()
        .map(|t| Adam::new(t.len(), adam_cfg))
        .collect();

    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        // Cosine decay to 5% of the base rate.
        let progress = epoch as f64 / config.epochs.max(1) as f64;
        let lr = config.learning_rate * (0.05 + 0.95 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()));
        for a in &mut adams {
            a.config.learning_rate = lr;
        }
        let fresh;
        let samples = if config.resample && epoch > 0 {
            let first = (epoch * data.train.len()) as u64;
            fresh = generate_samples(&config.dataset, seed, first, data.train.len());
            &fresh
        } else {
            &data.train
        };
        order.shuffle(&mut stream_rng(derive_seed(seed, 2), epoch as u64));
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let (loss, grads) = batch_gradient(&model, data.size, samples, batch)?;
            total += loss;
            let scale = 1.0 / batch.len() as f64;
            let flat: Vec<Vec<f64>> = grads
                .into_iter()
                .flatten()
                .flat_map(|(w, b)| [w, b])
                .map(|g| g.into_iter().map(|v| v * scale).collect())
                .collect();
            for ((tensor, adam), g) in model.param_tensors_mut().into_iter().zip(&mut adams).zip(&flat) {
                adam.step(tensor, g);
            }
        }
        let mean = total / data.train.len() as f64;
        if !mean.is_finite() {
            return Err(Error::NonFinite(format!("training loss at epoch {epoch}")));
        }
        epoch_losses.push(mean);
    }

    let test_accuracy = evaluate_accuracy(&model, data, &data.test)?;
    if test_accuracy < config.required_accuracy {
        return Err(Error::TrainingFailed {
            accuracy: test_accuracy,
            required: config.required_accuracy,
        });
    }
    Ok(TrainedModel {
        model,
        test_accuracy,
        epoch_losses,
    })
}

fn batch_gradient(model: &Model, size: usize, samples: &[Sample], batch: &[usize]) -> Result<(f64, ParamGrads)> {
    let partials: Vec<Result<(f64, ParamGrads)>> = batch
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut grads = model.zero_grads();
            let mut loss = 0.0;
            for &i in chunk {
                let sample = &samples[i];
                let tape = model.forward_tape(&sample.image(size))?;
                let (l, g) = softmax_cross_entropy(tape.logits(), sample.label);
                loss += l;
                model.backward(&tape, &g, Some(&mut grads));
            }
            Ok((loss, grads))
        })
        .collect();
    let mut iter = partials.into_iter();
    let (mut loss, mut acc) = iter.next().expect("batch is non-empty")?;
    for part in iter {
        let (l, g) = part?;
        loss += l;
        for (a, b) in acc.iter_mut().zip(g) {
            if let (Some((aw, ab)), Some((bw, bb))) = (a.as_mut(), b) {
                aw.iter_mut().zip(bw).for_each(|(x, y)| *x += y);
                ab.iter_mut().zip(bb).for_each(|(x, y)| *x += y);
            }
        }
    }
    Ok((loss, acc))
}

/// Fraction of `samples` whose strict top-1 prediction matches the label.
pub fn evaluate_accuracy<C: Classifier + ?Sized>(model: &C, data: &Dataset, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let hits: Vec<Result<bool>> = samples
        .par_iter()
        .map(|s| {
            let out: ClassifierOutput = model.forward(&data.image(s))?;
            Ok(out.strict_argmax() == Some(s.label))
        })
        .collect();
    let mut correct = 0usize;
    for h in hits {
        correct += h? as usize;
    }
    Ok(correct as f64 / samples.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TrainConfig {
        TrainConfig {
            dataset: DatasetConfig {
                size: 16,
                n_train: 40,
                n_test: 20,
                ..DatasetConfig::default()
            },
            epochs: 2,
            batch_size: 16,
            required_accuracy: 0.0,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn training_is_deterministic() {
        let a = train_reference(&tiny(), 5).unwrap();
        let b = train_reference(&tiny(), 5).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.epoch_losses, b.epoch_losses);
    }

    #[test]
    fn accuracy_gate_is_enforced() {
        let cfg = TrainConfig {
            required_accuracy: 1.01,
            ..tiny()
        };
        assert!(matches!(train_reference(&cfg, 5), Err(Error::TrainingFailed { .. })));
    }
}
