//! Macenko stain-basis estimation and template-driven stain normalization.
//!
//! A template image is reduced to [`TemplateParams`]: a two-stain OD basis plus
//! a robust maximum concentration per stain. Normalizing an image estimates the
//! same quantities on the image itself, rescales each pixel's concentrations to
//! the template's range and re-renders them with the template basis.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, SymmetricEigen};
use rayon::prelude::*;
use thiserror::Error;

use crate::color::{ColorError, OpticsConfig, RgbImage};
use crate::io::write_atomic;

#[derive(Debug, Error)]
pub enum StainError {
    #[error("only {retained} tissue pixels above the OD threshold, need at least {required}")]
    InsufficientTissue { retained: usize, required: usize },
    #[error("stain estimation is degenerate: {0}")]
    DegenerateStains(String),
    #[error("invalid stain basis: {0}")]
    InvalidBasis(String),
    #[error("invalid estimation config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Optics(#[from] ColorError),
    #[error("template file line {line}: {reason}")]
    TemplateFormat { line: usize, reason: String },
    #[error("template file {path}: {source}")]
    TemplateIo { path: PathBuf, source: std::io::Error },
}

/// Minimum angle between the two stain vectors, in degrees.
const MIN_STAIN_ANGLE_DEG: f64 = 1.0;

/// Ratio below which the second covariance eigenvalue counts as zero.
const RANK_TOLERANCE: f64 = 1e-10;

fn norm(v: [f64; 3]) -> f64 {
    dot(v, v).sqrt()
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Angle between two 3-vectors in degrees.
pub fn angle_deg(a: [f64; 3], b: [f64; 3]) -> f64 {
    let c = dot(a, b) / (norm(a) * norm(b));
    c.clamp(-1.0, 1.0).acos().to_degrees()
}

/// Clips negatives and rescales to unit norm. Vectors that are already
/// non-negative unit vectors are returned untouched, which keeps persisted
/// bases bit-exact across save/load.
fn clip_and_normalize(v: [f64; 3]) -> Option<[f64; 3]> {
    let clipped = v.map(|x| x.max(0.0));
    let n = norm(clipped);
    if !(n > 0.0 && n.is_finite()) {
        return None;
    }
    if clipped == v && (n - 1.0).abs() < 1e-12 {
        return Some(v);
    }
    Some(clipped.map(|x| x / n))
}

/// Unit OD directions of hematoxylin and eosin.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StainBasis {
    h: [f64; 3],
    e: [f64; 3],
}

impl StainBasis {
    /// Builds a basis from explicitly labelled vectors. Negative components are
    /// clipped and both vectors renormalized.
    pub fn new(h: [f64; 3], e: [f64; 3]) -> Result<Self, StainError> {
        let h = clip_and_normalize(h)
            .ok_or_else(|| StainError::InvalidBasis("hematoxylin vector has no positive component".into()))?;
        let e = clip_and_normalize(e)
            .ok_or_else(|| StainError::InvalidBasis("eosin vector has no positive component".into()))?;
        if angle_deg(h, e) <= MIN_STAIN_ANGLE_DEG {
            return Err(StainError::InvalidBasis(format!(
                "stain vectors are {:.4} degrees apart",
                angle_deg(h, e)
            )));
        }
        if h[0] <= e[0] {
            return Err(StainError::InvalidBasis(
                "hematoxylin must have the larger red-channel density".into(),
            ));
        }
        Ok(Self { h, e })
    }

    /// Labels two unordered stain directions: hematoxylin absorbs red the most.
    fn from_unlabelled(a: [f64; 3], b: [f64; 3]) -> Result<Self, StainError> {
        let degenerate = |why: &str| StainError::DegenerateStains(why.to_string());
        let a = clip_and_normalize(a).ok_or_else(|| degenerate("extreme stain direction is all-negative"))?;
        let b = clip_and_normalize(b).ok_or_else(|| degenerate("extreme stain direction is all-negative"))?;
        if angle_deg(a, b) <= MIN_STAIN_ANGLE_DEG {
            return Err(degenerate("extreme stain directions coincide"));
        }
        match a[0].partial_cmp(&b[0]) {
            Some(std::cmp::Ordering::Greater) => Ok(Self { h: a, e: b }),
            Some(std::cmp::Ordering::Less) => Ok(Self { h: b, e: a }),
            _ => Err(degenerate("stains have equal red density, cannot label H and E")),
        }
    }

    /// The reference H&E directions distributed with the original Macenko code.
    pub fn reference() -> Self {
        Self::new([0.5626, 0.7201, 0.4062], [0.2159, 0.8012, 0.5581]).expect("reference basis is valid")
    }

    pub fn h(&self) -> [f64; 3] {
        self.h
    }

    pub fn e(&self) -> [f64; 3] {
        self.e
    }

    /// OD of a pixel holding the given stain concentrations.
    #[inline]
    pub fn od(&self, c_h: f64, c_e: f64) -> [f64; 3] {
        [
            c_h * self.h[0] + c_e * self.e[0],
            c_h * self.h[1] + c_e * self.e[1],
            c_h * self.h[2] + c_e * self.e[2],
        ]
    }

    /// Rows of the Moore–Penrose pseudo-inverse of the 3x2 matrix `[h e]`.
    pub fn pseudo_inverse(&self) -> [[f64; 3]; 2] {
        let hh = dot(self.h, self.h);
        let ee = dot(self.e, self.e);
        let he = dot(self.h, self.e);
        let det = hh * ee - he * he;
        let mut rows = [[0.0; 3]; 2];
        for k in 0..3 {
            rows[0][k] = (ee * self.h[k] - he * self.e[k]) / det;
            rows[1][k] = (hh * self.e[k] - he * self.h[k]) / det;
        }
        rows
    }

    /// Largest of the two angular errors against `other`, in degrees.
    pub fn max_angle_to(&self, other: &StainBasis) -> f64 {
        angle_deg(self.h, other.h).max(angle_deg(self.e, other.e))
    }
}

/// Least-squares concentrations of one OD vector, negatives clipped.
#[inline]
fn decompose(pinv: &[[f64; 3]; 2], od: [f64; 3]) -> [f64; 2] {
    [dot(pinv[0], od).max(0.0), dot(pinv[1], od).max(0.0)]
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EstimationConfig {
    /// Pixels are tissue when every OD channel exceeds this.
    pub od_threshold_beta: f64,
    /// Percent of angles trimmed at each extreme.
    pub angle_percentile_alpha: f64,
    /// Percentile used as the robust maximum concentration.
    pub concentration_percentile: f64,
    pub min_tissue_pixels: usize,
}

impl Default for EstimationConfig {
    fn default() -> Self {
        Self {
            od_threshold_beta: 0.15,
            angle_percentile_alpha: 1.0,
            concentration_percentile: 99.0,
            min_tissue_pixels: 100,
        }
    }
}

impl EstimationConfig {
    pub fn validate(&self) -> Result<(), StainError> {
        let bad = |s: String| Err(StainError::InvalidConfig(s));
        if !(self.od_threshold_beta > 0.0) {
            return bad(format!("beta must be > 0, got {}", self.od_threshold_beta));
        }
        if !(self.angle_percentile_alpha > 0.0 && self.angle_percentile_alpha < 50.0) {
            return bad(format!(
                "alpha must lie in (0, 50), got {}",
                self.angle_percentile_alpha
            ));
        }
        if !(self.concentration_percentile > 50.0 && self.concentration_percentile <= 100.0) {
            return bad(format!(
                "concentration percentile must lie in (50, 100], got {}",
                self.concentration_percentile
            ));
        }
        Ok(())
    }
}

/// Nearest-rank percentile of an ascending sample. `p` is in percent.
pub fn percentile_nearest_rank(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of empty sample");
    let n = sorted.len();
    let rank = ((p / 100.0) * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

fn sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v
}

/// OD vectors of the pixels whose every channel exceeds `beta`.
fn tissue_od(image: &RgbImage, beta: f64, optics: &OpticsConfig) -> Vec<[f64; 3]> {
    let table = optics.od_table();
    image
        .pixels()
        .map(|p| p.map(|v| table[v as usize]))
        .filter(|od| od.iter().all(|&c| c > beta))
        .collect()
}

fn basis_from_tissue(tissue: &[[f64; 3]], cfg: &EstimationConfig) -> Result<StainBasis, StainError> {
    if tissue.len() < cfg.min_tissue_pixels.max(2) {
        return Err(StainError::InsufficientTissue {
            retained: tissue.len(),
            required: cfg.min_tissue_pixels.max(2),
        });
    }

    // Second-moment matrix of the raw OD vectors, i.e. the right singular
    // directions of the OD matrix. Not mean-centered: two-stain data whose
    // pixels are mixtures of just two colors lies on an affine line, which
    // centering would collapse to rank 1.
    let mut cov = Matrix3::<f64>::zeros();
    for od in tissue {
        for r in 0..3 {
            for c in 0..3 {
                cov[(r, c)] += od[r] * od[c];
            }
        }
    }
    cov /= tissue.len() as f64;

    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let (l1, l2) = (eig.eigenvalues[order[0]], eig.eigenvalues[order[1]]);
    if !(l1 > 0.0) || !(l2 > RANK_TOLERANCE * l1) {
        return Err(StainError::DegenerateStains(format!(
            "tissue OD spans rank < 2 (eigenvalues {l1:e}, {l2:e})"
        )));
    }

    let axis = |i: usize| {
        let col = eig.eigenvectors.column(order[i]);
        let v = [col[0], col[1], col[2]];
        if v.iter().sum::<f64>() < 0.0 {
            v.map(|x| -x)
        } else {
            v
        }
    };
    let (u1, u2) = (axis(0), axis(1));

    let angles = sorted(tissue.iter().map(|&od| dot(od, u2).atan2(dot(od, u1))).collect());
    let lo = percentile_nearest_rank(&angles, cfg.angle_percentile_alpha);
    let hi = percentile_nearest_rank(&angles, 100.0 - cfg.angle_percentile_alpha);
    let direction = |phi: f64| {
        let (s, c) = phi.sin_cos();
        [c * u1[0] + s * u2[0], c * u1[1] + s * u2[1], c * u1[2] + s * u2[2]]
    };
    StainBasis::from_unlabelled(direction(lo), direction(hi))
}

/// Estimates the H&E basis of an image with the Macenko angular-extremes method.
pub fn estimate_stain_basis(
    image: &RgbImage,
    cfg: &EstimationConfig,
    optics: &OpticsConfig,
) -> Result<StainBasis, StainError> {
    cfg.validate()?;
    optics.validate()?;
    basis_from_tissue(&tissue_od(image, cfg.od_threshold_beta, optics), cfg)
}

/// Per-pixel (H, E) concentrations.
#[derive(Clone, Debug, PartialEq)]
pub struct ConcentrationMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[f64; 2]>,
}

pub fn estimate_concentrations(image: &RgbImage, basis: &StainBasis, optics: &OpticsConfig) -> ConcentrationMap {
    let table = optics.od_table();
    let pinv = basis.pseudo_inverse();
    ConcentrationMap {
        width: image.width(),
        height: image.height(),
        data: image
            .pixels()
            .map(|p| decompose(&pinv, p.map(|v| table[v as usize])))
            .collect(),
    }
}

/// The stain appearance of a template image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TemplateParams {
    pub basis: StainBasis,
    /// Robust maximum concentration of H and E.
    pub max_concentrations: [f64; 2],
    pub optics: OpticsConfig,
    pub estimation: EstimationConfig,
}

pub fn fit_template(
    image: &RgbImage,
    cfg: &EstimationConfig,
    optics: &OpticsConfig,
) -> Result<TemplateParams, StainError> {
    cfg.validate()?;
    optics.validate()?;
    let tissue = tissue_od(image, cfg.od_threshold_beta, optics);
    let basis = basis_from_tissue(&tissue, cfg)?;
    let pinv = basis.pseudo_inverse();
    let (h, e): (Vec<f64>, Vec<f64>) = tissue
        .iter()
        .map(|&od| {
            let c = decompose(&pinv, od);
            (c[0], c[1])
        })
        .unzip();
    let pct = cfg.concentration_percentile;
    let max_concentrations = [
        percentile_nearest_rank(&sorted(h), pct),
        percentile_nearest_rank(&sorted(e), pct),
    ];
    if max_concentrations.iter().any(|&c| !(c > 0.0) || !c.is_finite()) {
        return Err(StainError::DegenerateStains(format!(
            "robust max concentrations {max_concentrations:?} are not positive"
        )));
    }
    Ok(TemplateParams {
        basis,
        max_concentrations,
        optics: *optics,
        estimation: *cfg,
    })
}

/// The pixel-wise map between two fixed stain appearances.
///
/// Once both the source and the target template are fixed the Macenko
/// reconstruction no longer depends on neighbouring pixels, which is what
/// makes it bakeable into a look-up table.
#[derive(Clone, Debug)]
pub struct StainMapping {
    source_od: [f64; 256],
    pinv: [[f64; 3]; 2],
    scale: [f64; 2],
    target: StainBasis,
    target_optics: OpticsConfig,
}

impl StainMapping {
    pub fn new(source: &TemplateParams, target: &TemplateParams) -> Self {
        Self {
            source_od: source.optics.od_table(),
            pinv: source.basis.pseudo_inverse(),
            scale: [
                target.max_concentrations[0] / source.max_concentrations[0],
                target.max_concentrations[1] / source.max_concentrations[1],
            ],
            target: target.basis,
            target_optics: target.optics,
        }
    }

    #[inline]
    pub fn map_pixel(&self, rgb: [u8; 3]) -> [u8; 3] {
        let od = rgb.map(|v| self.source_od[v as usize]);
        let c = decompose(&self.pinv, od);
        let out = self.target.od(c[0] * self.scale[0], c[1] * self.scale[1]);
        out.map(|d| self.target_optics.intensity(d))
    }

    pub fn apply(&self, image: &RgbImage) -> RgbImage {
        let mut out = image.clone();
        out.data_mut().par_chunks_mut(3 * 4096).for_each(|chunk| {
            for px in chunk.chunks_exact_mut(3) {
                let mapped = self.map_pixel([px[0], px[1], px[2]]);
                px.copy_from_slice(&mapped);
            }
        });
        out
    }
}

/// Normalizes `image` to the stain appearance of `template`.
pub fn normalize(image: &RgbImage, template: &TemplateParams, cfg: &EstimationConfig) -> Result<RgbImage, StainError> {
    let source = fit_template(image, cfg, &template.optics)?;
    Ok(StainMapping::new(&source, template).apply(image))
}

impl TemplateParams {
    /// Key/value text form. Reals are written with 18 significant digits so
    /// that reading the file back reproduces the exact values.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let v3 = |v: [f64; 3]| format!("{:.17e} {:.17e} {:.17e}", v[0], v[1], v[2]);
        writeln!(s, "version=1").unwrap();
        writeln!(s, "h={}", v3(self.basis.h)).unwrap();
        writeln!(s, "e={}", v3(self.basis.e)).unwrap();
        writeln!(
            s,
            "cmax={:.17e} {:.17e}",
            self.max_concentrations[0], self.max_concentrations[1]
        )
        .unwrap();
        writeln!(s, "i0={:.17e}", self.optics.i0).unwrap();
        writeln!(s, "beta={:.17e}", self.estimation.od_threshold_beta).unwrap();
        writeln!(s, "alpha={:.17e}", self.estimation.angle_percentile_alpha).unwrap();
        writeln!(s, "cpct={:.17e}", self.estimation.concentration_percentile).unwrap();
        // Non-default values of settings outside the fixed key set.
        let defaults = (OpticsConfig::default(), EstimationConfig::default());
        if self.optics.min_intensity_clamp != defaults.0.min_intensity_clamp {
            writeln!(s, "clamp={:.17e}", self.optics.min_intensity_clamp).unwrap();
        }
        if self.estimation.min_tissue_pixels != defaults.1.min_tissue_pixels {
            writeln!(s, "min_tissue={}", self.estimation.min_tissue_pixels).unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, StainError> {
        let mut version = None;
        let (mut h, mut e, mut cmax) = (None, None, None);
        let mut optics = OpticsConfig::default();
        let mut estimation = EstimationConfig::default();
        let mut seen_i0 = false;

        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let fail = |reason: String| StainError::TemplateFormat { line, reason };
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (key, value) = trimmed
                .split_once('=')
                .ok_or_else(|| fail(format!("expected key=value, got {trimmed:?}")))?;
            let reals = |n: usize| -> Result<Vec<f64>, StainError> {
                let parsed: Result<Vec<f64>, _> = value.split_whitespace().map(str::parse::<f64>).collect();
                match parsed {
                    Ok(v) if v.len() == n && v.iter().all(|x| x.is_finite()) => Ok(v),
                    _ => Err(fail(format!("{key} needs {n} finite reals, got {value:?}"))),
                }
            };
            match key.trim() {
                "version" => {
                    let v = value.trim();
                    if v != "1" {
                        return Err(fail(format!("unsupported version {v}")));
                    }
                    version = Some(1);
                }
                "h" => h = Some(reals(3)?),
                "e" => e = Some(reals(3)?),
                "cmax" => cmax = Some(reals(2)?),
                "i0" => {
                    optics.i0 = reals(1)?[0];
                    seen_i0 = true;
                }
                "beta" => estimation.od_threshold_beta = reals(1)?[0],
                "alpha" => estimation.angle_percentile_alpha = reals(1)?[0],
                "cpct" => estimation.concentration_percentile = reals(1)?[0],
                "clamp" => optics.min_intensity_clamp = reals(1)?[0],
                "min_tissue" => {
                    estimation.min_tissue_pixels = value
                        .trim()
                        .parse()
                        .map_err(|_| fail(format!("min_tissue must be a count, got {value:?}")))?
                }
                other => return Err(fail(format!("unknown key {other:?}"))),
            }
        }

        let missing = |k: &str| StainError::TemplateFormat {
            line: 0,
            reason: format!("missing key {k}"),
        };
        version.ok_or_else(|| missing("version"))?;
        if !seen_i0 {
            return Err(missing("i0"));
        }
        let h = h.ok_or_else(|| missing("h"))?;
        let e = e.ok_or_else(|| missing("e"))?;
        let cmax = cmax.ok_or_else(|| missing("cmax"))?;
        if cmax.iter().any(|&c| !(c > 0.0)) {
            return Err(StainError::TemplateFormat {
                line: 0,
                reason: format!("cmax must be positive, got {cmax:?}"),
            });
        }
        optics.validate()?;
        estimation.validate()?;
        Ok(TemplateParams {
            basis: StainBasis::new([h[0], h[1], h[2]], [e[0], e[1], e[2]])?,
            max_concentrations: [cmax[0], cmax[1]],
            optics,
            estimation,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), StainError> {
        write_atomic(path, self.to_text().as_bytes()).map_err(|source| StainError::TemplateIo {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, StainError> {
        let text = std::fs::read_to_string(path).map_err(|source| StainError::TemplateIo {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_text(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    // Beer–Lambert renderer kept separate from the estimation code paths.
    fn render(basis_h: [f64; 3], basis_e: [f64; 3], conc: &[[f64; 2]], w: usize, h: usize) -> RgbImage {
        let mut data = Vec::with_capacity(w * h * 3);
        for c in conc {
            for k in 0..3 {
                let od = c[0] * basis_h[k] + c[1] * basis_e[k];
                data.push((255.0 * 10f64.powf(-od)).round().clamp(0.0, 255.0) as u8);
            }
        }
        RgbImage::new(w, h, data).unwrap()
    }

    fn unit(v: [f64; 3]) -> [f64; 3] {
        let n = norm(v);
        v.map(|x| x / n)
    }

    fn uniform_conc(n: usize, hi: f64, seed: u64) -> Vec<[f64; 2]> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| [rng.random_range(0.0..hi), rng.random_range(0.0..hi)])
            .collect()
    }

    const H: [f64; 3] = [0.5626, 0.7201, 0.4062];
    const E: [f64; 3] = [0.2159, 0.8012, 0.5581];

    #[test]
    fn recovers_known_basis() {
        let conc = uniform_conc(200 * 200, 2.0, 1);
        let img = render(unit(H), unit(E), &conc, 200, 200);
        let basis = estimate_stain_basis(&img, &EstimationConfig::default(), &OpticsConfig::default()).unwrap();
        let truth = StainBasis::new(H, E).unwrap();
        assert!(basis.max_angle_to(&truth) < 2.0, "{basis:?}");
    }

    #[test]
    fn basis_invariants_hold_after_estimation() {
        for seed in 0..5 {
            let conc = uniform_conc(100 * 100, 1.5, seed);
            let img = render(unit(H), unit(E), &conc, 100, 100);
            let b = estimate_stain_basis(&img, &EstimationConfig::default(), &OpticsConfig::default()).unwrap();
            for v in [b.h(), b.e()] {
                assert!((norm(v) - 1.0).abs() < 1e-9);
                assert!(v.iter().all(|&x| x >= 0.0));
            }
            assert!(b.h()[0] > b.e()[0]);
            assert!(angle_deg(b.h(), b.e()) > 1.0);
        }
    }

    #[test]
    fn white_image_has_no_tissue() {
        let img = RgbImage::filled(50, 50, [255, 255, 255]);
        let err = estimate_stain_basis(&img, &EstimationConfig::default(), &OpticsConfig::default()).unwrap_err();
        assert!(matches!(err, StainError::InsufficientTissue { retained: 0, .. }));
        let err = fit_template(&img, &EstimationConfig::default(), &OpticsConfig::default()).unwrap_err();
        assert!(matches!(err, StainError::InsufficientTissue { .. }));
    }

    #[test]
    fn grey_gradient_is_degenerate() {
        let mut data = Vec::new();
        for y in 0..64 {
            for x in 0..64 {
                let v = (20 + (x + y) % 160) as u8;
                data.extend_from_slice(&[v, v, v]);
            }
        }
        let img = RgbImage::new(64, 64, data).unwrap();
        let err = estimate_stain_basis(&img, &EstimationConfig::default(), &OpticsConfig::default()).unwrap_err();
        assert!(matches!(err, StainError::DegenerateStains(_)), "{err}");
    }

    #[test]
    fn concentrations_of_special_pixels() {
        let basis = StainBasis::new(H, E).unwrap();
        let optics = OpticsConfig::default();
        let white = estimate_concentrations(&RgbImage::filled(1, 1, [255; 3]), &basis, &optics);
        assert_eq!(white.data[0], [0.0, 0.0]);

        // Noiseless OD decomposition, bypassing 8-bit quantization.
        let pinv = basis.pseudo_inverse();
        let c = decompose(&pinv, basis.od(1.0, 0.0));
        assert!((c[0] - 1.0).abs() < 1e-6 && c[1].abs() < 1e-6);

        let normal = {
            let (h, e) = (basis.h(), basis.e());
            unit([
                h[1] * e[2] - h[2] * e[1],
                h[2] * e[0] - h[0] * e[2],
                h[0] * e[1] - h[1] * e[0],
            ])
        };
        let c = decompose(&pinv, normal);
        assert!(c[0].abs() < 1e-12 && c[1].abs() < 1e-12, "{c:?}");
    }

    #[test]
    fn decomposition_inverts_rendering() {
        let basis = StainBasis::new(H, E).unwrap();
        let pinv = basis.pseudo_inverse();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..1000 {
            let c = [rng.random_range(0.0..3.0), rng.random_range(0.0..3.0)];
            let got = decompose(&pinv, basis.od(c[0], c[1]));
            assert!((got[0] - c[0]).abs() < 1e-6 && (got[1] - c[1]).abs() < 1e-6);
        }
    }

    #[test]
    fn template_max_concentrations_match_generator() {
        let conc = uniform_conc(300 * 300, 2.0, 3);
        let img = render(unit(H), unit(E), &conc, 300, 300);
        let t = fit_template(&img, &EstimationConfig::default(), &OpticsConfig::default()).unwrap();
        for c in t.max_concentrations {
            assert!((c - 1.98).abs() / 1.98 < 0.05, "{c}");
        }
        let again = fit_template(&img, &EstimationConfig::default(), &OpticsConfig::default()).unwrap();
        assert_eq!(t, again);
    }

    #[test]
    fn self_normalization_is_near_identity() {
        let conc = uniform_conc(120 * 120, 1.5, 4);
        let img = render(unit(H), unit(E), &conc, 120, 120);
        let cfg = EstimationConfig::default();
        let t = fit_template(&img, &cfg, &OpticsConfig::default()).unwrap();
        let out = normalize(&img, &t, &cfg).unwrap();
        assert!(out.mean_abs_diff(&img) <= 3.0);
        assert_eq!(out, normalize(&img, &t, &cfg).unwrap());
    }

    #[test]
    fn white_stays_white() {
        let mut conc = uniform_conc(100 * 100, 1.5, 5);
        for c in conc.iter_mut().take(500) {
            *c = [0.0, 0.0];
        }
        let img = render(unit(H), unit(E), &conc, 100, 100);
        let cfg = EstimationConfig::default();
        let t = fit_template(&img, &cfg, &OpticsConfig::default()).unwrap();
        let out = normalize(&img, &t, &cfg).unwrap();
        for i in 0..500 {
            let px = out.pixel(i % 100, i / 100);
            assert!(px.iter().all(|&v| v >= 253), "{px:?}");
        }
    }

    #[test]
    fn template_text_round_trip() {
        let t = TemplateParams {
            basis: StainBasis::reference(),
            max_concentrations: [1.234_567_890_123, 0.987_654_321],
            optics: OpticsConfig::default(),
            estimation: EstimationConfig::default(),
        };
        let text = t.to_text();
        for key in ["version=", "h=", "e=", "cmax=", "i0=", "beta=", "alpha=", "cpct="] {
            assert!(text.lines().any(|l| l.starts_with(key)), "missing {key}");
        }
        assert!(!text.contains("clamp="));
        assert_eq!(TemplateParams::from_text(&text).unwrap(), t);

        let custom = TemplateParams {
            optics: OpticsConfig {
                i0: 250.0,
                min_intensity_clamp: 2.0,
            },
            estimation: EstimationConfig {
                min_tissue_pixels: 7,
                ..EstimationConfig::default()
            },
            ..t
        };
        assert_eq!(TemplateParams::from_text(&custom.to_text()).unwrap(), custom);
    }

    #[test]
    fn template_text_errors() {
        assert!(matches!(
            TemplateParams::from_text("version=2\n"),
            Err(StainError::TemplateFormat { line: 1, .. })
        ));
        let t = TemplateParams {
            basis: StainBasis::reference(),
            max_concentrations: [1.0, 1.0],
            optics: OpticsConfig::default(),
            estimation: EstimationConfig::default(),
        };
        let text = t.to_text().replace("cmax=", "cmx=");
        assert!(TemplateParams::from_text(&text).is_err());
        let text = t
            .to_text()
            .lines()
            .filter(|l| !l.starts_with("h="))
            .collect::<Vec<_>>()
            .join("\n");
        assert!(TemplateParams::from_text(&text).is_err());
    }

    #[test]
    fn nearest_rank_percentile() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile_nearest_rank(&v, 99.0), 99.0);
        assert_eq!(percentile_nearest_rank(&v, 1.0), 1.0);
        assert_eq!(percentile_nearest_rank(&v, 0.0), 1.0);
        assert_eq!(percentile_nearest_rank(&v, 100.0), 100.0);
        assert_eq!(percentile_nearest_rank(&[1.0, 3.0, 5.0], 50.0), 3.0);
    }

    #[test]
    fn basis_labelling_and_validation() {
        assert!(
            StainBasis::new(E, H).is_err(),
            "eosin cannot be redder than hematoxylin"
        );
        assert!(StainBasis::new(H, H).is_err());
        let b = StainBasis::from_unlabelled(E, H).unwrap();
        assert!(b.max_angle_to(&StainBasis::new(H, E).unwrap()) < 1e-9);
        let clipped = StainBasis::new([0.8, 0.5, -0.2], [0.1, 0.9, 0.4]).unwrap();
        assert_eq!(clipped.h()[2], 0.0);
    }
}
