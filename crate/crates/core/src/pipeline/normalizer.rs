use super::PipelineError;
use crate::color::RgbImage;
use crate::lut::Lut;
use crate::stain::{normalize, EstimationConfig, StainError, TemplateParams};

/// A color normalization applied to images before classification.
pub trait Normalizer: Sync {
    fn normalize(&self, image: &RgbImage) -> Result<RgbImage, PipelineError>;
}

/// Leaves images untouched.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityNormalizer;

impl Normalizer for IdentityNormalizer {
    fn normalize(&self, image: &RgbImage) -> Result<RgbImage, PipelineError> {
        Ok(image.clone())
    }
}

/// Per-image Macenko normalization towards a template.
///
/// Images on which no stain basis can be estimated (too little tissue, or a
/// single stain) are returned unchanged when `passthrough_on_failure` is set,
/// which is what a patch-level pipeline needs for background and single-stain
/// patches.
#[derive(Clone, Copy, Debug)]
pub struct MacenkoNormalizer {
    pub template: TemplateParams,
    pub estimation: EstimationConfig,
    pub passthrough_on_failure: bool,
}

impl MacenkoNormalizer {
    pub fn new(template: TemplateParams) -> Self {
        Self {
            template,
            estimation: template.estimation,
            passthrough_on_failure: true,
        }
    }
}

impl Normalizer for MacenkoNormalizer {
    fn normalize(&self, image: &RgbImage) -> Result<RgbImage, PipelineError> {
        match normalize(image, &self.template, &self.estimation) {
            Ok(out) => Ok(out),
            Err(StainError::InsufficientTissue { .. } | StainError::DegenerateStains(_))
                if self.passthrough_on_failure =>
            {
                Ok(image.clone())
            }
            Err(e) => Err(e.into()),
        }
    }
}

/// A baked look-up table.
#[derive(Debug)]
pub struct LutNormalizer {
    pub lut: Lut,
}

impl Normalizer for LutNormalizer {
    fn normalize(&self, image: &RgbImage) -> Result<RgbImage, PipelineError> {
        Ok(self.lut.apply(image))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::color::OpticsConfig;
    use crate::pipeline::synth::{render_patch, Texture};
    use crate::stain::{fit_template, StainBasis};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn macenko_passes_background_through() {
        let optics = OpticsConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tissue = render_patch(
            &Texture::catalogue()[1],
            &StainBasis::reference(),
            1.0,
            0.0,
            &optics,
            &mut rng,
        );
        let template = fit_template(&tissue, &EstimationConfig::default(), &optics).unwrap();
        let white = RgbImage::filled(150, 150, [255, 255, 255]);

        let lenient = MacenkoNormalizer::new(template);
        assert_eq!(lenient.normalize(&white).unwrap(), white);
        let strict = MacenkoNormalizer {
            passthrough_on_failure: false,
            ..lenient
        };
        assert!(strict.normalize(&white).is_err());
        // a tissue patch is actually normalized (here: onto itself)
        let out = lenient.normalize(&tissue).unwrap();
        assert!(out.mean_abs_diff(&tissue) <= 3.0, "{}", out.mean_abs_diff(&tissue));
    }

    #[test]
    fn identity_and_lut() {
        let img = RgbImage::filled(3, 2, [10, 20, 30]);
        assert_eq!(IdentityNormalizer.normalize(&img).unwrap(), img);
        let lut = LutNormalizer { lut: Lut::identity() };
        assert_eq!(lut.normalize(&img).unwrap(), img);
    }
}
