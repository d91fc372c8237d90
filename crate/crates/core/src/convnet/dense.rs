//! Memory-bounded dense inference over large images.
//!
//! The image is cut into overlapping chunks whose origins are multiples of the
//! network stride, so every layer of a chunk lines up with the same layer of
//! the whole image. An output cell of a chunk is kept only when its input cone
//! lies inside the chunk (or touches a true image border, where the chunk sees
//! the same zero padding as the whole image), which makes the stitched result
//! identical to a single forward pass.

use super::network::forward;
use super::real::Real;
use super::spec::NetworkSpec;
use super::tensor::Tensor;
use super::{ConvNetError, NetworkParams};
use crate::color::RgbImage;

/// Output cells per chunk side used by [`dense_forward_image`] by default.
pub const DEFAULT_TILE_CELLS: usize = 32;

/// One chunk along an axis: input range and the output cells it produces.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct AxisChunk {
    input_start: usize,
    input_len: usize,
    /// Global index of the first output cell kept from this chunk.
    out_start: usize,
    out_len: usize,
    /// Index of that cell in the chunk's own output grid.
    local_offset: usize,
}

fn plan_axis(spec: &NetworkSpec, input_len: usize, tile_cells: usize) -> Result<Vec<AxisChunk>, ConvNetError> {
    let stride = spec.stride();
    let (lo, hi) = spec.input_cone();
    let total = spec.output_len(input_len).ok_or(ConvNetError::ShapeMismatch(format!(
        "axis of length {input_len} yields no output"
    )))?;
    let tile_cells = tile_cells.max(1);
    let mut chunks = Vec::new();
    let mut j0 = 0;
    while j0 < total {
        let j1 = (j0 + tile_cells).min(total);
        // Largest stride-aligned start that still contains the cone of j0.
        let cone_start = (stride * j0) as isize + lo;
        let input_start = if cone_start <= 0 {
            0
        } else {
            (cone_start as usize / stride) * stride
        };
        let cone_end = (stride * (j1 - 1)) as isize + hi + 1;
        let input_end = (cone_end.max(0) as usize).min(input_len);
        let input_len_chunk = input_end - input_start;
        let local_offset = j0 - input_start / stride;
        chunks.push(AxisChunk {
            input_start,
            input_len: input_len_chunk,
            out_start: j0,
            out_len: j1 - j0,
            local_offset,
        });
        j0 = j1;
    }
    Ok(chunks)
}

/// Dense forward pass of a single image, processed chunk by chunk so peak
/// memory depends on `tile_cells` rather than the image size. `fetch(y, x, h, w)`
/// must return the `(1, h, w, 3)` input window at that position.
pub fn dense_forward_with<T, F>(
    spec: &NetworkSpec,
    params: &NetworkParams<T>,
    height: usize,
    width: usize,
    tile_cells: usize,
    mut fetch: F,
) -> Result<Tensor<T>, ConvNetError>
where
    T: Real,
    F: FnMut(usize, usize, usize, usize) -> Tensor<T>,
{
    let (gh, gw) = spec.output_dims(height, width)?;
    let rows = plan_axis(spec, height, tile_cells)?;
    let cols = plan_axis(spec, width, tile_cells)?;
    let k = spec.num_classes;
    let mut out = Tensor::zeros(1, gh, gw, k);
    for r in &rows {
        for c in &cols {
            let window = fetch(r.input_start, c.input_start, r.input_len, c.input_len);
            let probs = forward(spec, params, &window)?;
            if probs.h < r.local_offset + r.out_len || probs.w < c.local_offset + c.out_len {
                return Err(ConvNetError::ShapeMismatch(
                    "chunk produced too few output cells".into(),
                ));
            }
            for y in 0..r.out_len {
                for x in 0..c.out_len {
                    let src = probs.cell(0, r.local_offset + y, c.local_offset + x);
                    let dst = out.index(0, r.out_start + y, c.out_start + x, 0);
                    out.data[dst..dst + k].copy_from_slice(src);
                }
            }
        }
    }
    Ok(out)
}

/// Tiled dense forward pass of an RGB image (intensities scaled to [0, 1]).
pub fn dense_forward_image<T: Real>(
    spec: &NetworkSpec,
    params: &NetworkParams<T>,
    image: &RgbImage,
    tile_cells: usize,
) -> Result<Tensor<T>, ConvNetError> {
    dense_forward_with(spec, params, image.height(), image.width(), tile_cells, |y, x, h, w| {
        Tensor::from_image(&image.crop(x, y, w, h))
    })
}

/// Tiled dense forward pass of a single-sample tensor.
pub fn dense_forward<T: Real>(
    spec: &NetworkSpec,
    params: &NetworkParams<T>,
    input: &Tensor<T>,
    tile_cells: usize,
) -> Result<Tensor<T>, ConvNetError> {
    if input.n != 1 || input.c != spec.input_channels {
        return Err(ConvNetError::ShapeMismatch(format!(
            "dense inference expects one {}-channel image, got {:?}",
            spec.input_channels,
            input.dims()
        )));
    }
    let c = input.c;
    dense_forward_with(spec, params, input.h, input.w, tile_cells, |y0, x0, h, w| {
        let mut data = Vec::with_capacity(h * w * c);
        for y in y0..y0 + h {
            let start = input.index(0, y, x0, 0);
            data.extend_from_slice(&input.data[start..start + w * c]);
        }
        Tensor::from_vec(1, h, w, c, data)
    })
}
