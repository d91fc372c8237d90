//! 8-bit RGB rasters and their Beer–Lambert optical-density transform.
//!
//! Stains combine linearly in optical density (OD) space, so every
//! normalization step in this crate works on `OdImage` values and converts
//! back to intensities only at the end.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ColorError {
    #[error("buffer holds {got} values, expected {expected} for a {width}x{height} image")]
    BadBufferLength {
        width: usize,
        height: usize,
        expected: usize,
        got: usize,
    },
    #[error("invalid optics: need 1 <= min_intensity_clamp ({clamp}) < i0 ({i0}) <= 255")]
    BadOptics { i0: f64, clamp: f64 },
}

/// Row-major, channel-interleaved 8-bit RGB image.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self, ColorError> {
        let expected = width * height * 3;
        if data.len() != expected {
            return Err(ColorError::BadBufferLength {
                width,
                height,
                expected,
                got: data.len(),
            });
        }
        Ok(Self { width, height, data })
    }

    /// Image filled with a single color.
    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let data = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn pixels(&self) -> impl Iterator<Item = [u8; 3]> + '_ {
        self.data.chunks_exact(3).map(|p| [p[0], p[1], p[2]])
    }

    /// Copy of the `w`x`h` window whose top-left corner is `(x0, y0)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> RgbImage {
        assert!(x0 + w <= self.width && y0 + h <= self.height, "crop out of bounds");
        let mut data = Vec::with_capacity(w * h * 3);
        for y in y0..y0 + h {
            let row = (y * self.width + x0) * 3;
            data.extend_from_slice(&self.data[row..row + w * 3]);
        }
        RgbImage {
            width: w,
            height: h,
            data,
        }
    }

    /// Rotation by 90 degrees clockwise.
    pub fn rotate90(&self) -> RgbImage {
        let (w, h) = (self.width, self.height);
        let mut data = vec![0u8; w * h * 3];
        for y in 0..h {
            for x in 0..w {
                // (x, y) lands at column h-1-y, row x of the w-tall result.
                let src = (y * w + x) * 3;
                let dst = (x * h + (h - 1 - y)) * 3;
                data[dst..dst + 3].copy_from_slice(&self.data[src..src + 3]);
            }
        }
        RgbImage {
            width: h,
            height: w,
            data,
        }
    }

    /// Mean absolute per-channel difference, in intensity levels.
    pub fn mean_abs_diff(&self, other: &RgbImage) -> f64 {
        assert_eq!(
            (self.width, self.height),
            (other.width, other.height),
            "image dimensions differ"
        );
        let total: u64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| u64::from(a.abs_diff(b)))
            .sum();
        total as f64 / self.data.len().max(1) as f64
    }
}

/// Per-pixel optical densities, same layout as [`RgbImage`].
#[derive(Clone, Debug, PartialEq)]
pub struct OdImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl OdImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self, ColorError> {
        let expected = width * height * 3;
        if data.len() != expected {
            return Err(ColorError::BadBufferLength {
                width,
                height,
                expected,
                got: data.len(),
            });
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixels(&self) -> impl Iterator<Item = [f64; 3]> + '_ {
        self.data.chunks_exact(3).map(|p| [p[0], p[1], p[2]])
    }
}

/// Transmitted-light model shared by the OD conversions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OpticsConfig {
    /// Intensity of unattenuated light (white level).
    pub i0: f64,
    /// Intensities below this are raised to it before taking the log.
    pub min_intensity_clamp: f64,
}

impl Default for OpticsConfig {
    fn default() -> Self {
        Self {
            i0: 255.0,
            min_intensity_clamp: 1.0,
        }
    }
}

impl OpticsConfig {
    pub fn validate(&self) -> Result<(), ColorError> {
        let ok = self.min_intensity_clamp >= 1.0 && self.min_intensity_clamp < self.i0 && self.i0 <= 255.0;
        if ok {
            Ok(())
        } else {
            Err(ColorError::BadOptics {
                i0: self.i0,
                clamp: self.min_intensity_clamp,
            })
        }
    }

    /// Largest representable OD, reached at the clamp intensity.
    pub fn max_od(&self) -> f64 {
        -(self.min_intensity_clamp / self.i0).log10()
    }

    /// OD of a single 8-bit intensity. Intensities brighter than `i0` read as 0.
    #[inline]
    pub fn od(&self, intensity: u8) -> f64 {
        let v = f64::from(intensity).max(self.min_intensity_clamp);
        (-(v / self.i0).log10()).max(0.0)
    }

    /// Inverse of [`OpticsConfig::od`]: round half away from zero, saturate to [0, 255].
    #[inline]
    pub fn intensity(&self, od: f64) -> u8 {
        let v = (self.i0 * 10f64.powf(-od)).round();
        v.clamp(0.0, 255.0) as u8
    }

    /// Table of `od(v)` for all 256 intensities.
    pub fn od_table(&self) -> [f64; 256] {
        let mut table = [0.0; 256];
        for (v, slot) in table.iter_mut().enumerate() {
            *slot = self.od(v as u8);
        }
        table
    }
}

pub fn rgb_to_od(image: &RgbImage, cfg: &OpticsConfig) -> OdImage {
    let table = cfg.od_table();
    OdImage {
        width: image.width,
        height: image.height,
        data: image.data.iter().map(|&v| table[v as usize]).collect(),
    }
}

pub fn od_to_rgb(image: &OdImage, cfg: &OpticsConfig) -> RgbImage {
    RgbImage {
        width: image.width,
        height: image.height,
        data: image.data.iter().map(|&od| cfg.intensity(od)).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(rgb: [u8; 3]) -> RgbImage {
        RgbImage::new(1, 1, rgb.to_vec()).unwrap()
    }

    #[test]
    fn od_of_reference_pixels() {
        let cfg = OpticsConfig::default();
        let white = rgb_to_od(&single([255, 255, 255]), &cfg);
        assert_eq!(white.data(), &[0.0, 0.0, 0.0]);

        let grey = rgb_to_od(&single([26, 26, 26]), &cfg);
        for &v in grey.data() {
            assert!((v - 0.991_566_8).abs() < 1e-6, "{v}");
        }

        let mixed = rgb_to_od(&single([0, 128, 255]), &cfg);
        assert!((mixed.data()[0] - 2.406_540).abs() < 1e-5);
        assert!((mixed.data()[1] - 0.299_330).abs() < 1e-5);
        assert_eq!(mixed.data()[2], 0.0);
    }

    #[test]
    fn rgb_of_reference_densities() {
        let cfg = OpticsConfig::default();
        let to_rgb = |od: f64| od_to_rgb(&OdImage::new(1, 1, vec![od; 3]).unwrap(), &cfg);
        assert_eq!(to_rgb(0.0).data(), &[255, 255, 255]);
        // 255 * 0.1 = 25.5 rounds away from zero.
        assert_eq!(to_rgb(1.0).data(), &[26, 26, 26]);
        assert_eq!(to_rgb(10.0).data(), &[0, 0, 0]);
    }

    #[test]
    fn round_trip_is_exact_above_clamp() {
        let cfg = OpticsConfig::default();
        for v in 1..=255u8 {
            assert_eq!(cfg.intensity(cfg.od(v)), v, "intensity {v}");
        }
        // zero is clamped to 1
        assert_eq!(cfg.intensity(cfg.od(0)), 1);
    }

    #[test]
    fn od_is_strictly_decreasing_and_bounded() {
        let cfg = OpticsConfig::default();
        let table = cfg.od_table();
        for v in 1..255 {
            assert!(table[v] > table[v + 1]);
        }
        for &od in &table {
            assert!(od.is_finite() && od >= 0.0 && od <= cfg.max_od());
        }
    }

    #[test]
    fn brighter_than_white_reads_as_zero_density() {
        let cfg = OpticsConfig {
            i0: 240.0,
            min_intensity_clamp: 1.0,
        };
        assert_eq!(cfg.od(250), 0.0);
    }

    #[test]
    fn optics_validation() {
        assert!(OpticsConfig::default().validate().is_ok());
        let bad = OpticsConfig {
            i0: 255.0,
            min_intensity_clamp: 0.0,
        };
        assert!(bad.validate().is_err());
        let bad = OpticsConfig {
            i0: 300.0,
            min_intensity_clamp: 1.0,
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn rotation_four_times_is_identity() {
        let data: Vec<u8> = (0..5 * 3 * 3).map(|i| (i * 7 % 256) as u8).collect();
        let img = RgbImage::new(5, 3, data).unwrap();
        let r1 = img.rotate90();
        assert_eq!((r1.width(), r1.height()), (3, 5));
        assert_eq!(r1.pixel(2, 0), img.pixel(0, 0));
        assert_eq!(r1.rotate90().rotate90().rotate90(), img);
    }

    #[test]
    fn buffer_length_is_checked() {
        assert!(RgbImage::new(2, 2, vec![0; 11]).is_err());
    }
}
