use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::dataset::{sample_balanced_batch, Dataset, LabeledPatch};
use super::PipelineError;
use crate::color::RgbImage;
use crate::convnet::{
    accumulate_gradient, adam_step, argmax, forward, AdamState, NetworkParams, NetworkSpec, Tensor, CANONICAL_WIDTHS,
};

/// Samples per gradient work unit. Per-unit gradients are summed in unit
/// order, so results do not depend on the number of worker threads.
const GROUP_SIZE: usize = 8;

/// Patches per forward pass when predicting.
const PREDICT_CHUNK: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub augment_rotations: bool,
    /// Validation accuracy is logged every this many iterations.
    pub validation_interval: usize,
    /// Fraction of each class held out for validation (0 disables it).
    pub validation_fraction: f64,
    /// Channel widths of the six convolutions.
    pub widths: [usize; 6],
    /// Compute on the calling thread only.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 4000,
            batch_size: 256,
            learning_rate: 3e-4,
            seed: 42,
            augment_rotations: true,
            validation_interval: 100,
            validation_fraction: 0.1,
            widths: CANONICAL_WIDTHS,
            deterministic: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |msg: &str| Err(PipelineError::InvalidConfig(msg.into()));
        if self.iterations == 0 || self.batch_size == 0 || self.validation_interval == 0 {
            return bad("iterations, batch_size and validation_interval must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad("validation_fraction must be in [0, 1)");
        }
        if self.widths.contains(&0) {
            return bad("layer widths must be at least 1");
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainLogEntry {
    pub iteration: usize,
    pub loss: f64,
    pub val_acc: Option<f64>,
}

impl fmt::Display for TrainLogEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "iter {} loss {:.6}", self.iteration, self.loss)?;
        if let Some(acc) = self.val_acc {
            write!(f, " val_acc {acc:.6}")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub spec: NetworkSpec,
    pub params: NetworkParams<f32>,
    pub class_names: Vec<String>,
    pub log: Vec<TrainLogEntry>,
    /// Number of optimizer steps taken.
    pub steps: u64,
}

impl TrainedModel {
    /// Class probabilities of 150×150 patches.
    pub fn predict(&self, patches: &[RgbImage]) -> Result<Vec<Vec<f64>>, PipelineError> {
        predict_patches(&self.spec, &self.params, patches)
    }

    /// Predicted class of every patch.
    pub fn classify(&self, patches: &[RgbImage]) -> Result<Vec<usize>, PipelineError> {
        Ok(self.predict(patches)?.iter().map(|p| argmax(p)).collect())
    }
}

pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<TrainedModel, PipelineError> {
    train_with_log(dataset, config, |_| {})
}

/// Trains with balanced minibatches, cross-entropy and ADAM, reporting every
/// log entry to `on_entry` as it is produced.
pub fn train_with_log<F>(
    dataset: &Dataset,
    config: &TrainConfig,
    mut on_entry: F,
) -> Result<TrainedModel, PipelineError>
where
    F: FnMut(&TrainLogEntry),
{
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (train_set, held_out) = if config.validation_fraction > 0.0 {
        dataset.split_holdout(config.validation_fraction, &mut rng)
    } else {
        (dataset.clone(), Vec::new())
    };
    let spec = NetworkSpec::with_widths(dataset.num_classes(), config.widths)?;
    let mut params = NetworkParams::<f32>::he_init(&spec, config.seed);
    let mut adam = AdamState::new(&spec);
    let mut grads = NetworkParams::zeros(&spec);
    let mut log = Vec::with_capacity(config.iterations);

    for iteration in 1..=config.iterations {
        let batch = sample_balanced_batch(&train_set, config.batch_size, config.augment_rotations, &mut rng)?;
        let loss = batch_gradient(&spec, &params, &batch, config.deterministic, &mut grads)?;
        adam_step(&mut params, &grads, &mut adam, config.learning_rate);
        let val_acc = if !held_out.is_empty() && iteration % config.validation_interval == 0 {
            Some(holdout_accuracy(&spec, &params, &held_out)?)
        } else {
            None
        };
        let entry = TrainLogEntry {
            iteration,
            loss,
            val_acc,
        };
        on_entry(&entry);
        log.push(entry);
    }
    Ok(TrainedModel {
        spec,
        params,
        class_names: dataset.class_names().to_vec(),
        log,
        steps: adam.t,
    })
}

/// Mean cross-entropy over the batch; its gradient is written to `grads`.
fn batch_gradient(
    spec: &NetworkSpec,
    params: &NetworkParams<f32>,
    batch: &[LabeledPatch],
    deterministic: bool,
    grads: &mut NetworkParams<f32>,
) -> Result<f64, PipelineError> {
    let scale = 1.0 / batch.len() as f32;
    let group_gradient = |group: &[LabeledPatch], out: &mut NetworkParams<f32>| {
        let input = Tensor::from_images(group.iter().map(|p| &p.image));
        let labels: Vec<usize> = group.iter().map(|p| p.label).collect();
        accumulate_gradient(spec, params, &input, &labels, scale, out)
    };

    let groups: Vec<&[LabeledPatch]> = batch.chunks(GROUP_SIZE).collect();
    grads.fill_zero();
    let mut loss = 0.0;
    if deterministic || rayon::current_num_threads() == 1 {
        let mut scratch = NetworkParams::zeros(spec);
        for group in groups {
            scratch.fill_zero();
            loss += group_gradient(group, &mut scratch)?;
            grads.add_assign(&scratch);
        }
    } else {
        // Waves of one group per worker bound the number of live buffers.
        for wave in groups.chunks(rayon::current_num_threads()) {
            let parts = wave
                .par_iter()
                .map(|group| {
                    let mut g = NetworkParams::zeros(spec);
                    group_gradient(group, &mut g).map(|l| (l, g))
                })
                .collect::<Result<Vec<_>, _>>()?;
            for (l, g) in parts {
                loss += l;
                grads.add_assign(&g);
            }
        }
    }
    Ok(loss / batch.len() as f64)
}

fn holdout_accuracy(
    spec: &NetworkSpec,
    params: &NetworkParams<f32>,
    held_out: &[LabeledPatch],
) -> Result<f64, PipelineError> {
    let images: Vec<RgbImage> = held_out.iter().map(|p| p.image.clone()).collect();
    let probs = predict_patches(spec, params, &images)?;
    let correct = probs.iter().zip(held_out).filter(|(p, s)| argmax(p) == s.label).count();
    Ok(correct as f64 / held_out.len() as f64)
}

/// Class probabilities of every 150×150 patch, in input order.
pub fn predict_patches(
    spec: &NetworkSpec,
    params: &NetworkParams<f32>,
    patches: &[RgbImage],
) -> Result<Vec<Vec<f64>>, PipelineError> {
    let chunks = patches
        .par_chunks(PREDICT_CHUNK)
        .map(|chunk| {
            let out = forward(spec, params, &Tensor::from_images(chunk))?;
            if out.h != 1 || out.w != 1 {
                return Err(PipelineError::InvalidDataset(format!(
                    "patch prediction expects 150x150 inputs, got a {}x{} output grid",
                    out.h, out.w
                )));
            }
            Ok((0..out.n)
                .map(|i| out.cell(i, 0, 0).iter().map(|&p| p as f64).collect())
                .collect::<Vec<Vec<f64>>>())
        })
        .collect::<Result<Vec<_>, PipelineError>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::convnet::PATCH_SIZE;

    const TINY: [usize; 6] = [2, 2, 2, 2, 4, 4];

    fn toy_dataset() -> Dataset {
        let shades = [[250u8, 250, 250], [120, 40, 160], [220, 120, 170]];
        let classes = shades
            .iter()
            .map(|&s| {
                (0..4u8)
                    .map(|i| RgbImage::filled(PATCH_SIZE, PATCH_SIZE, [s[0] - i, s[1], s[2]]))
                    .collect()
            })
            .collect();
        Dataset::new(vec!["a".into(), "b".into(), "c".into()], classes).unwrap()
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            iterations: 3,
            batch_size: 6,
            widths: TINY,
            validation_interval: 2,
            validation_fraction: 0.25,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn single_iteration_takes_one_step() {
        let cfg = TrainConfig {
            iterations: 1,
            ..tiny_config()
        };
        let model = train(&toy_dataset(), &cfg).unwrap();
        assert_eq!(model.steps, 1);
        assert_eq!(model.log.len(), 1);
        assert!(model.log[0].loss.is_finite());
    }

    #[test]
    fn log_format_and_validation_interval() {
        let model = train(&toy_dataset(), &tiny_config()).unwrap();
        assert_eq!(
            model.log.iter().map(|e| e.val_acc.is_some()).collect::<Vec<_>>(),
            vec![false, true, false]
        );
        let line = model.log[1].to_string();
        assert!(line.starts_with("iter 2 loss "), "{line}");
        assert!(line.contains(" val_acc "), "{line}");
        assert!(!model.log[0].to_string().contains("val_acc"));
    }

    #[test]
    fn deterministic_and_thread_independent() {
        let data = toy_dataset();
        let det = TrainConfig {
            deterministic: true,
            batch_size: 20,
            ..tiny_config()
        };
        let a = train(&data, &det).unwrap();
        let b = train(&data, &det).unwrap();
        assert_eq!(a.params, b.params);
        let par = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let c = par
            .install(|| {
                train(
                    &data,
                    &TrainConfig {
                        deterministic: false,
                        ..det.clone()
                    },
                )
            })
            .unwrap();
        assert_eq!(a.params, c.params);
    }

    #[test]
    fn invalid_configs() {
        let data = toy_dataset();
        for cfg in [
            TrainConfig {
                iterations: 0,
                ..tiny_config()
            },
            TrainConfig {
                learning_rate: 0.0,
                ..tiny_config()
            },
            TrainConfig {
                validation_fraction: 1.0,
                ..tiny_config()
            },
        ] {
            assert!(matches!(train(&data, &cfg), Err(PipelineError::InvalidConfig(_))));
        }
        let small = TrainConfig {
            batch_size: 2,
            ..tiny_config()
        };
        assert!(matches!(train(&data, &small), Err(PipelineError::BatchTooSmall { .. })));
    }

    #[test]
    fn predictions_are_distributions() {
        let data = toy_dataset();
        let model = train(&data, &tiny_config()).unwrap();
        let patches: Vec<RgbImage> = data.iter().map(|(_, p)| p.clone()).collect();
        let probs = model.predict(&patches).unwrap();
        assert_eq!(probs.len(), patches.len());
        for p in probs {
            assert_eq!(p.len(), 3);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-5);
        }
    }
}
