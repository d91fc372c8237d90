//! H&E stain normalization and a fully convolutional tissue classifier.

pub mod color;
pub mod convnet;
pub mod io;
pub mod lut;
pub mod pipeline;
pub mod stain;

pub use color::{od_to_rgb, rgb_to_od, OdImage, OpticsConfig, RgbImage};
pub use lut::{apply_lut, bake_lut, read_lut, write_lut, Lut, LutError};
pub use stain::{
    estimate_concentrations, estimate_stain_basis, fit_template, normalize, ConcentrationMap, EstimationConfig,
    StainBasis, StainError, StainMapping, TemplateParams,
};
