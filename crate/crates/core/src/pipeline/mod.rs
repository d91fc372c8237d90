//! Datasets, training, dense tile classification, evaluation and the
//! stain-normalization experiment grid.

use std::path::PathBuf;

use thiserror::Error;

use crate::convnet::ConvNetError;
use crate::io::ImageIoError;
use crate::lut::LutError;
use crate::stain::StainError;

pub mod classify;
pub mod dataset;
pub mod grid;
pub mod grouping;
pub mod metrics;
pub mod normalizer;
pub mod synth;
pub mod train;

pub use classify::{
    blend_class_map, classify_tile, read_probability_dump, render_class_map, write_probability_dump, ClassMap,
    CELL_STRIDE, DEFAULT_PALETTE,
};
pub use dataset::{load_dataset, rotations_of, sample_balanced_batch, save_dataset, Dataset, LabeledPatch};
pub use grid::{
    evaluate_grid, run_experiment_grid, run_experiment_grid_with, train_grid_models, ExperimentGrid, GridModels,
};
pub use grouping::{group_classes, ClassGroup, ClassMapping, GroupedSamples};
pub use metrics::{evaluate, Metrics};
pub use normalizer::{IdentityNormalizer, LutNormalizer, MacenkoNormalizer, Normalizer};
pub use synth::{generate_synthetic_dataset, render_patch, render_texture, GenConfig, Palette, Pattern, Texture};
pub use train::{predict_patches, train, train_with_log, TrainConfig, TrainLogEntry, TrainedModel};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("class directory {0} contains no patches")]
    EmptyClass(PathBuf),
    #[error("{path}: patch is {width}x{height}, expected 150x150")]
    BadPatchSize { path: PathBuf, width: usize, height: usize },
    #[error(transparent)]
    UnreadableImage(#[from] ImageIoError),
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("batch of {batch} cannot hold one patch from each of {classes} classes")]
    BatchTooSmall { batch: usize, classes: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("palette has {colors} colors for {classes} classes")]
    PaletteTooSmall { colors: usize, classes: usize },
    #[error("{side} class {class} is neither mapped nor listed as unmatched")]
    UnmappedClass { side: &'static str, class: usize },
    #[error("invalid class mapping: {0}")]
    InvalidMapping(String),
    #[error("class mapping line {line}: {reason}")]
    MappingFormat { line: usize, reason: String },
    #[error("{predicted} predictions for {truth} ground-truth labels")]
    LengthMismatch { predicted: usize, truth: usize },
    #[error("nothing to evaluate")]
    EmptyInput,
    #[error("label {label} is out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("probability dump: {0}")]
    DumpFormat(String),
    #[error(transparent)]
    Stain(#[from] StainError),
    #[error(transparent)]
    ConvNet(#[from] ConvNetError),
    #[error(transparent)]
    Lut(#[from] LutError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
