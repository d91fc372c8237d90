//! The four train/test combinations with and without stain normalization.

use std::fmt;

use super::dataset::Dataset;
use super::normalizer::{MacenkoNormalizer, Normalizer};
use super::train::{train, TrainConfig, TrainedModel};
use super::PipelineError;
use crate::stain::TemplateParams;

/// Accuracies of the four experiments:
/// A = train w/o SN, test w/o SN; B = train w/o, test w/;
/// C = train w/, test w/; D = train w/, test w/o.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExperimentGrid {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
}

impl ExperimentGrid {
    pub fn cell(&self, train_sn: bool, test_sn: bool) -> f64 {
        match (train_sn, test_sn) {
            (false, false) => self.a,
            (false, true) => self.b,
            (true, true) => self.c,
            (true, false) => self.d,
        }
    }
}

impl fmt::Display for ExperimentGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<12} {:<14} {:<14}", "", "train w/ SN", "train w/o SN")?;
        writeln!(f, "{:<12} C {:<12.6} B {:<12.6}", "test w/ SN", self.c, self.b)?;
        writeln!(f, "{:<12} D {:<12.6} A {:<12.6}", "test w/o SN", self.d, self.a)
    }
}

/// The model trained on raw data and the one trained on normalized data.
#[derive(Clone, Debug)]
pub struct GridModels {
    pub raw: TrainedModel,
    pub normalized: TrainedModel,
}

/// Trains both models with the same configuration and seed.
pub fn train_grid_models(
    train_data: &Dataset,
    normalizer: &dyn Normalizer,
    config: &TrainConfig,
) -> Result<GridModels, PipelineError> {
    let normalized_data = train_data.try_map(|img| normalizer.normalize(img))?;
    let (raw, normalized) = if config.deterministic {
        (train(train_data, config), train(&normalized_data, config))
    } else {
        rayon::join(|| train(train_data, config), || train(&normalized_data, config))
    };
    Ok(GridModels {
        raw: raw?,
        normalized: normalized?,
    })
}

fn accuracy(model: &TrainedModel, test: &Dataset) -> Result<f64, PipelineError> {
    let patches: Vec<_> = test.iter().map(|(_, p)| p.clone()).collect();
    let predicted = model.classify(&patches)?;
    let correct = predicted.iter().zip(test.labels()).filter(|(p, t)| **p == *t).count();
    Ok(correct as f64 / test.len() as f64)
}

/// Evaluates both models on the raw and the normalized test set.
pub fn evaluate_grid(
    models: &GridModels,
    test_data: &Dataset,
    normalizer: &dyn Normalizer,
) -> Result<ExperimentGrid, PipelineError> {
    if models.raw.class_names.len() != test_data.num_classes() {
        return Err(PipelineError::InvalidDataset(format!(
            "models know {} classes, test data has {}",
            models.raw.class_names.len(),
            test_data.num_classes()
        )));
    }
    let normalized_test = test_data.try_map(|img| normalizer.normalize(img))?;
    Ok(ExperimentGrid {
        a: accuracy(&models.raw, test_data)?,
        b: accuracy(&models.raw, &normalized_test)?,
        c: accuracy(&models.normalized, &normalized_test)?,
        d: accuracy(&models.normalized, test_data)?,
    })
}

/// The experiment grid with per-patch Macenko normalization towards `template`.
pub fn run_experiment_grid(
    train_data: &Dataset,
    test_data: &Dataset,
    template: &TemplateParams,
    config: &TrainConfig,
) -> Result<ExperimentGrid, PipelineError> {
    run_experiment_grid_with(train_data, test_data, &MacenkoNormalizer::new(*template), config)
}

/// The experiment grid with an arbitrary normalization.
pub fn run_experiment_grid_with(
    train_data: &Dataset,
    test_data: &Dataset,
    normalizer: &dyn Normalizer,
    config: &TrainConfig,
) -> Result<ExperimentGrid, PipelineError> {
    let models = train_grid_models(train_data, normalizer, config)?;
    evaluate_grid(&models, test_data, normalizer)
}
