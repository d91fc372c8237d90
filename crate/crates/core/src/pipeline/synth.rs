//! Procedural two-stain tissue patches rendered through the Beer–Lambert model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::dataset::Dataset;
use super::PipelineError;
use crate::color::{OpticsConfig, RgbImage};
use crate::convnet::PATCH_SIZE;
use crate::stain::StainBasis;

/// Spatial layout of the foreground stain.
#[derive(Clone, Debug, PartialEq)]
pub enum Pattern {
    /// Ground only.
    Flat,
    /// Soft-edged discs, radius drawn uniformly from the range.
    Blobs { count: usize, radius: (f64, f64) },
    /// Parallel bands at a random angle, period drawn uniformly from the range.
    Stripes { period: (f64, f64) },
}

/// A class appearance: (H, E) concentrations inside and outside the pattern.
#[derive(Clone, Debug, PartialEq)]
pub struct Texture {
    pub name: String,
    pub pattern: Pattern,
    pub ground: [f64; 2],
    pub foreground: [f64; 2],
}

impl Texture {
    pub fn new(name: &str, pattern: Pattern, ground: [f64; 2], foreground: [f64; 2]) -> Self {
        Self {
            name: name.to_string(),
            pattern,
            ground,
            foreground,
        }
    }

    /// Built-in class appearances; the first is always the empty background.
    pub fn catalogue() -> Vec<Texture> {
        use Pattern::*;
        vec![
            Texture::new("background", Flat, [0.0, 0.0], [0.0, 0.0]),
            Texture::new(
                "nuclei",
                Blobs {
                    count: 40,
                    radius: (5.0, 9.0),
                },
                [0.0, 0.9],
                [1.0, 0.0],
            ),
            Texture::new("stroma", Stripes { period: (10.0, 18.0) }, [0.0, 0.3], [0.1, 1.2]),
            Texture::new(
                "lymphocytes",
                Blobs {
                    count: 220,
                    radius: (2.5, 4.0),
                },
                [0.05, 0.35],
                [1.3, 0.0],
            ),
            Texture::new(
                "inverse",
                Blobs {
                    count: 40,
                    radius: (5.0, 9.0),
                },
                [0.8, 0.0],
                [0.0, 1.1],
            ),
            Texture::new("fibres", Stripes { period: (6.0, 10.0) }, [0.0, 0.8], [0.9, 0.0]),
            Texture::new("mucus", Flat, [0.25, 0.35], [0.0, 0.0]),
            Texture::new(
                "fat",
                Blobs {
                    count: 12,
                    radius: (14.0, 24.0),
                },
                [0.2, 0.7],
                [0.0, 0.0],
            ),
            Texture::new(
                "blood",
                Blobs {
                    count: 90,
                    radius: (3.0, 5.0),
                },
                [0.0, 0.6],
                [0.0, 1.6],
            ),
        ]
    }

    /// Textures that differ mainly in which stain forms the foreground, so
    /// telling them apart depends on stain colors. Every tissue texture
    /// contains regions of pure hematoxylin and of pure eosin, which per-patch
    /// stain estimation needs.
    pub fn stain_shift_set() -> Vec<Texture> {
        use Pattern::*;
        vec![
            Texture::new("background", Flat, [0.0, 0.0], [0.0, 0.0]),
            Texture::new(
                "nuclei",
                Blobs {
                    count: 40,
                    radius: (5.0, 9.0),
                },
                [0.0, 0.9],
                [1.0, 0.0],
            ),
            Texture::new(
                "inverse",
                Blobs {
                    count: 40,
                    radius: (5.0, 9.0),
                },
                [0.8, 0.0],
                [0.0, 1.1],
            ),
            Texture::new("fibres", Stripes { period: (6.0, 10.0) }, [0.0, 0.8], [0.9, 0.0]),
            Texture::new(
                "lymphocytes",
                Blobs {
                    count: 220,
                    radius: (2.5, 4.0),
                },
                [0.0, 0.8],
                [1.2, 0.0],
            ),
        ]
    }
}

/// Stain appearance of a simulated lab: a central basis plus per-patch
/// variation of the stain directions and of the overall staining intensity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Palette {
    pub basis: StainBasis,
    /// Standard deviation of the per-patch perturbation of each stain
    /// direction, in degrees.
    pub angle_jitter_deg: f64,
    /// Range of the per-patch concentration scale.
    pub intensity_range: (f64, f64),
}

impl Palette {
    pub fn fixed(basis: StainBasis) -> Self {
        Self {
            basis,
            angle_jitter_deg: 0.0,
            intensity_range: (1.0, 1.0),
        }
    }

    /// `basis` with the per-patch variation of one lab: about 3 degrees of
    /// stain-direction jitter and ±15% staining intensity.
    pub fn varied(basis: StainBasis) -> Self {
        Self {
            basis,
            angle_jitter_deg: 3.0,
            intensity_range: (0.85, 1.15),
        }
    }

    /// A second lab whose stains look markedly different from the reference:
    /// the eosin resembles the reference hematoxylin and staining is darker.
    pub fn shifted() -> Self {
        let basis = StainBasis::new([0.70, 0.45, 0.55], [0.40, 0.75, 0.53]).expect("valid basis");
        Self {
            basis,
            angle_jitter_deg: 3.0,
            intensity_range: (1.02, 1.38),
        }
    }

    /// One draw of the per-patch stain appearance: (basis, intensity scale).
    pub fn sample<R: Rng>(&self, rng: &mut R) -> (StainBasis, f64) {
        let (lo, hi) = self.intensity_range;
        let scale = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        if self.angle_jitter_deg <= 0.0 {
            return (self.basis, scale);
        }
        // Independent Gaussian perturbations orthogonal-ish to each vector; at
        // small angles the resulting deviation is about `jitter` degrees.
        let sd = self.angle_jitter_deg.to_radians() / 2f64.sqrt();
        let normal = Normal::new(0.0, sd).expect("finite jitter");
        for _ in 0..64 {
            let mut perturb = |v: [f64; 3]| v.map(|x| x + normal.sample(rng));
            if let Ok(b) = StainBasis::new(perturb(self.basis.h()), perturb(self.basis.e())) {
                return (b, scale);
            }
        }
        (self.basis, scale)
    }
}

/// Everything that determines a synthetic dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub textures: Vec<Texture>,
    pub patches_per_class: usize,
    pub palette: Palette,
    /// Gaussian pixel noise in 8-bit intensity levels.
    pub noise_sd: f64,
    pub optics: OpticsConfig,
    pub seed: u64,
}

impl GenConfig {
    /// The first `classes` catalogue textures with the reference basis.
    pub fn standard(classes: usize, patches_per_class: usize, seed: u64) -> Result<Self, PipelineError> {
        let catalogue = Texture::catalogue();
        if classes < 2 || classes > catalogue.len() {
            return Err(PipelineError::InvalidConfig(format!(
                "synthetic class count must be in 2..={}, got {classes}",
                catalogue.len()
            )));
        }
        Ok(Self {
            textures: catalogue.into_iter().take(classes).collect(),
            patches_per_class,
            palette: Palette::fixed(StainBasis::reference()),
            noise_sd: 2.0,
            optics: OpticsConfig::default(),
            seed,
        })
    }
}

/// Foreground coverage in [0, 1] per pixel.
fn pattern_mask<R: Rng>(pattern: &Pattern, size: usize, rng: &mut R) -> Vec<f64> {
    let mut mask = vec![0.0f64; size * size];
    match *pattern {
        Pattern::Flat => {}
        Pattern::Blobs { count, radius } => {
            for _ in 0..count {
                let cx = rng.random_range(0.0..size as f64);
                let cy = rng.random_range(0.0..size as f64);
                let r = if radius.1 > radius.0 {
                    rng.random_range(radius.0..radius.1)
                } else {
                    radius.0
                };
                let reach = r + 1.0;
                let x0 = (cx - reach).floor().max(0.0) as usize;
                let x1 = ((cx + reach).ceil() as usize).min(size);
                let y0 = (cy - reach).floor().max(0.0) as usize;
                let y1 = ((cy + reach).ceil() as usize).min(size);
                for y in y0..y1 {
                    for x in x0..x1 {
                        let d = ((x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2)).sqrt();
                        let m = (r - d + 0.5).clamp(0.0, 1.0);
                        let cell = &mut mask[y * size + x];
                        *cell = cell.max(m);
                    }
                }
            }
        }
        Pattern::Stripes { period } => {
            let p = if period.1 > period.0 {
                rng.random_range(period.0..period.1)
            } else {
                period.0
            };
            let theta = rng.random_range(0.0..std::f64::consts::PI);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let (s, c) = theta.sin_cos();
            for y in 0..size {
                for x in 0..size {
                    let t = (x as f64 * c + y as f64 * s) / p * std::f64::consts::TAU + phase;
                    mask[y * size + x] = (0.5 + 1.5 * t.sin()).clamp(0.0, 1.0);
                }
            }
        }
    }
    mask
}

/// Renders one `PATCH_SIZE` patch of `texture` with the given stain basis and
/// concentration scale.
pub fn render_patch<R: Rng>(
    texture: &Texture,
    basis: &StainBasis,
    scale: f64,
    noise_sd: f64,
    optics: &OpticsConfig,
    rng: &mut R,
) -> RgbImage {
    render_texture(texture, PATCH_SIZE, basis, scale, noise_sd, optics, rng)
}

/// Renders a `size`-square image of `texture`.
pub fn render_texture<R: Rng>(
    texture: &Texture,
    size: usize,
    basis: &StainBasis,
    scale: f64,
    noise_sd: f64,
    optics: &OpticsConfig,
    rng: &mut R,
) -> RgbImage {
    let mask = pattern_mask(&texture.pattern, size, rng);
    let noise = (noise_sd > 0.0).then(|| Normal::new(0.0, noise_sd).expect("finite noise"));
    let mut data = Vec::with_capacity(size * size * 3);
    for &m in &mask {
        let ch = scale * (texture.ground[0] * (1.0 - m) + texture.foreground[0] * m);
        let ce = scale * (texture.ground[1] * (1.0 - m) + texture.foreground[1] * m);
        let od = basis.od(ch, ce);
        for d in od {
            let v = match &noise {
                None => optics.intensity(d),
                Some(n) => {
                    let i = optics.i0 * 10f64.powf(-d) + n.sample(rng);
                    i.round().clamp(0.0, 255.0) as u8
                }
            };
            data.push(v);
        }
    }
    RgbImage::new(size, size, data).expect("size*size*3 bytes")
}

/// Generates `patches_per_class` patches for every texture. Class names are
/// prefixed with their index so that the on-disk layout sorts in class order.
pub fn generate_synthetic_dataset(config: &GenConfig) -> Result<Dataset, PipelineError> {
    if config.textures.len() < 2 {
        return Err(PipelineError::InvalidConfig(
            "synthetic data needs at least 2 classes".into(),
        ));
    }
    if config.patches_per_class == 0 {
        return Err(PipelineError::InvalidConfig(
            "patches_per_class must be at least 1".into(),
        ));
    }
    if !(config.noise_sd >= 0.0) {
        return Err(PipelineError::InvalidConfig(format!(
            "noise_sd must be >= 0, got {}",
            config.noise_sd
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let digits = config.textures.len().saturating_sub(1).to_string().len();
    let mut names = Vec::with_capacity(config.textures.len());
    let mut classes = Vec::with_capacity(config.textures.len());
    for (i, texture) in config.textures.iter().enumerate() {
        names.push(format!("c{i:0digits$}_{}", texture.name));
        let patches = (0..config.patches_per_class)
            .map(|_| {
                let (basis, scale) = config.palette.sample(&mut rng);
                render_patch(texture, &basis, scale, config.noise_sd, &config.optics, &mut rng)
            })
            .collect();
        classes.push(patches);
    }
    Dataset::new(names, classes)
}
