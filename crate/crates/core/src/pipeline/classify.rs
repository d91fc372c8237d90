use std::io::{Read, Write};
use std::path::Path;

use super::normalizer::Normalizer;
use super::PipelineError;
use crate::color::RgbImage;
use crate::convnet::{argmax, dense_forward_image, NetworkParams, NetworkSpec, DEFAULT_TILE_CELLS, PATCH_SIZE};
use crate::io::write_atomic_with;

const DUMP_MAGIC: [u8; 4] = *b"CLM1";

/// Input pixels per output cell of the classifier.
pub const CELL_STRIDE: usize = 16;

/// Ten well separated colors for rendering class maps.
pub const DEFAULT_PALETTE: [[u8; 3]; 10] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [128, 128, 0],
    [255, 255, 255],
];

/// Dense classification of a tile: one probability vector per output cell.
///
/// Cell `(y, x)` classifies the 150×150 window whose top-left corner is at
/// `(stride·y, stride·x)`; the cell is drawn over the central `stride`-wide
/// square of that window, i.e. starting at `origin + stride·(y, x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassMap {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub stride: usize,
    pub origin: usize,
    /// Row-major argmax class per cell.
    pub classes: Vec<usize>,
    /// Row-major probability vectors, `num_classes` per cell.
    pub probabilities: Vec<f32>,
}

impl ClassMap {
    pub fn from_probabilities(
        height: usize,
        width: usize,
        num_classes: usize,
        stride: usize,
        probabilities: Vec<f32>,
    ) -> Result<Self, PipelineError> {
        if num_classes == 0 || probabilities.len() != height * width * num_classes {
            return Err(PipelineError::DumpFormat(format!(
                "{} probabilities do not fill a {height}x{width}x{num_classes} grid",
                probabilities.len()
            )));
        }
        let classes = probabilities.chunks_exact(num_classes).map(argmax).collect();
        Ok(Self {
            height,
            width,
            num_classes,
            stride,
            origin: (PATCH_SIZE / 2).saturating_sub(stride / 2),
            classes,
            probabilities,
        })
    }

    pub fn class_at(&self, y: usize, x: usize) -> usize {
        self.classes[y * self.width + x]
    }

    pub fn probabilities_at(&self, y: usize, x: usize) -> &[f32] {
        let i = (y * self.width + x) * self.num_classes;
        &self.probabilities[i..i + self.num_classes]
    }
}

/// Normalizes the tile (if requested) and classifies it densely.
pub fn classify_tile(
    spec: &NetworkSpec,
    params: &NetworkParams<f32>,
    tile: &RgbImage,
    normalizer: Option<&dyn Normalizer>,
) -> Result<ClassMap, PipelineError> {
    let normalized;
    let input = match normalizer {
        Some(n) => {
            normalized = n.normalize(tile)?;
            &normalized
        }
        None => tile,
    };
    let probs = dense_forward_image(spec, params, input, DEFAULT_TILE_CELLS)?;
    ClassMap::from_probabilities(probs.h, probs.w, probs.c, spec.stride(), probs.data)
}

fn check_palette(map: &ClassMap, palette: &[[u8; 3]]) -> Result<(), PipelineError> {
    if palette.len() < map.num_classes {
        return Err(PipelineError::PaletteTooSmall {
            colors: palette.len(),
            classes: map.num_classes,
        });
    }
    Ok(())
}

/// Nearest-neighbor upscaling of the class grid: every cell becomes a
/// `stride`×`stride` block of its palette color.
pub fn render_class_map(map: &ClassMap, palette: &[[u8; 3]]) -> Result<RgbImage, PipelineError> {
    check_palette(map, palette)?;
    let s = map.stride;
    let mut out = RgbImage::filled(map.width * s, map.height * s, [0, 0, 0]);
    let w = out.width();
    let data = out.data_mut();
    for y in 0..map.height * s {
        for x in 0..w {
            let color = palette[map.class_at(y / s, x / s)];
            data[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&color);
        }
    }
    Ok(out)
}

/// Overlays the class colors on `tile` at 50% opacity. Pixels outside the
/// area covered by cells take the color of the nearest cell.
pub fn blend_class_map(map: &ClassMap, palette: &[[u8; 3]], tile: &RgbImage) -> Result<RgbImage, PipelineError> {
    check_palette(map, palette)?;
    let cell = |p: usize, cells: usize| (p.saturating_sub(map.origin) / map.stride).min(cells - 1);
    let mut out = tile.clone();
    let w = out.width();
    let h = out.height();
    let data = out.data_mut();
    for y in 0..h {
        let cy = cell(y, map.height);
        for x in 0..w {
            let color = palette[map.class_at(cy, cell(x, map.width))];
            for (v, c) in data[(y * w + x) * 3..(y * w + x) * 3 + 3].iter_mut().zip(color) {
                *v = (*v as u16 + c as u16).div_ceil(2) as u8;
            }
        }
    }
    Ok(out)
}

/// Writes the per-cell probabilities: `CLM1`, then height, width and class
/// count as little-endian u32, then the row-major f32 probabilities.
pub fn write_probability_dump(map: &ClassMap, path: &Path) -> Result<(), PipelineError> {
    write_atomic_with(path, |w| {
        w.write_all(&DUMP_MAGIC)?;
        for v in [map.height, map.width, map.num_classes] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        for p in &map.probabilities {
            w.write_all(&p.to_le_bytes())?;
        }
        Ok(())
    })?;
    Ok(())
}

pub fn read_probability_dump(path: &Path) -> Result<ClassMap, PipelineError> {
    let bytes = std::fs::read(path)?;
    let mut r = bytes.as_slice();
    let mut magic = [0u8; 4];
    let truncated = |_| PipelineError::DumpFormat("truncated file".into());
    r.read_exact(&mut magic).map_err(truncated)?;
    if magic != DUMP_MAGIC {
        return Err(PipelineError::DumpFormat(format!("bad magic {magic:?}")));
    }
    let mut dims = [0usize; 3];
    for d in &mut dims {
        let mut b = [0u8; 4];
        r.read_exact(&mut b).map_err(truncated)?;
        *d = u32::from_le_bytes(b) as usize;
    }
    let [h, w, k] = dims;
    let expected = h
        .checked_mul(w)
        .and_then(|v| v.checked_mul(k))
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| PipelineError::DumpFormat("dimensions overflow".into()))?;
    if r.len() != expected {
        return Err(PipelineError::DumpFormat(format!(
            "expected {expected} payload bytes, found {}",
            r.len()
        )));
    }
    let probs = r
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    ClassMap::from_probabilities(h, w, k, CELL_STRIDE, probs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::convnet::{dense_forward_image as dense, forward, ConvNetError, Tensor};
    use crate::pipeline::IdentityNormalizer;

    fn map_2x2() -> ClassMap {
        let probs = vec![0.9, 0.1, 0.2, 0.8, 0.6, 0.4, 0.3, 0.7];
        ClassMap::from_probabilities(2, 2, 2, CELL_STRIDE, probs).unwrap()
    }

    #[test]
    fn class_map_basics() {
        let m = map_2x2();
        assert_eq!(m.classes, vec![0, 1, 0, 1]);
        assert_eq!(m.origin, 67);
        assert_eq!(m.probabilities_at(1, 1), &[0.3, 0.7]);
    }

    #[test]
    fn render_blocks() {
        let m = map_2x2();
        let img = render_class_map(&m, &DEFAULT_PALETTE).unwrap();
        assert_eq!((img.width(), img.height()), (32, 32));
        for y in 0..32 {
            for x in 0..32 {
                let i = (y * 32 + x) * 3;
                assert_eq!(&img.data()[i..i + 3], &DEFAULT_PALETTE[m.class_at(y / 16, x / 16)]);
            }
        }
        assert!(matches!(
            render_class_map(&m, &DEFAULT_PALETTE[..1]),
            Err(PipelineError::PaletteTooSmall { colors: 1, classes: 2 })
        ));
    }

    #[test]
    fn blend_keeps_tile_dims() {
        let m = map_2x2();
        let tile = RgbImage::filled(166, 166, [0, 0, 0]);
        let out = blend_class_map(&m, &DEFAULT_PALETTE, &tile).unwrap();
        assert_eq!((out.width(), out.height()), (166, 166));
        // pixel (0, 0) lies in cell (0, 0): class 0 over black at 50%
        let c = DEFAULT_PALETTE[0];
        assert_eq!(
            &out.data()[..3],
            &[
                (c[0] as u16).div_ceil(2) as u8,
                (c[1] as u16).div_ceil(2) as u8,
                (c[2] as u16).div_ceil(2) as u8
            ]
        );
        // the last column belongs to the rightmost cell
        let i = (165) * 3;
        let c = DEFAULT_PALETTE[1];
        assert_eq!(out.data()[i], (c[0] as u16).div_ceil(2) as u8);
    }

    #[test]
    fn dump_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.clm");
        let m = map_2x2();
        write_probability_dump(&m, &path).unwrap();
        assert_eq!(read_probability_dump(&path).unwrap(), m);
        std::fs::write(&path, b"CLM1\x01\x00").unwrap();
        assert!(matches!(
            read_probability_dump(&path),
            Err(PipelineError::DumpFormat(_))
        ));
        std::fs::write(&path, b"XXXX").unwrap();
        assert!(matches!(
            read_probability_dump(&path),
            Err(PipelineError::DumpFormat(_))
        ));
    }

    #[test]
    fn patch_sized_tile_is_a_single_cell() {
        let (spec, params) = {
            let spec = NetworkSpec::with_widths(3, [2, 2, 2, 2, 4, 4]).unwrap();
            let params = NetworkParams::he_init(&spec, 5);
            (spec, params)
        };
        let mut tile = RgbImage::filled(150, 150, [200, 100, 150]);
        tile.data_mut()[1000] = 3;
        let map = classify_tile(&spec, &params, &tile, Some(&IdentityNormalizer)).unwrap();
        assert_eq!((map.height, map.width), (1, 1));
        let direct = forward(&spec, &params, &Tensor::from_image(&tile)).unwrap();
        assert_eq!(map.probabilities, direct.data);
        let small = RgbImage::filled(149, 150, [0, 0, 0]);
        assert!(matches!(
            classify_tile(&spec, &params, &small, None),
            Err(PipelineError::ConvNet(ConvNetError::InputTooSmall { .. }))
        ));
        // consistent with the raw dense pass
        let raw = dense(&spec, &params, &tile, 4).unwrap();
        assert_eq!(raw.data, map.probabilities);
    }
}
