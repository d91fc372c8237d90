//! Layer kernels: im2col convolution, 2x2 max pooling, softmax and the fused
//! softmax cross-entropy gradient.

use super::real::{gemm, Layout, Real};
use super::spec::ConvSpec;
use super::tensor::Tensor;

/// im2col buffer elements per band. Narrow products are bound by memory
/// traffic and want a cache-resident band; wide ones by arithmetic and want
/// tall GEMMs.
const NARROW_BAND_ELEMS: usize = 1 << 16;
const WIDE_BAND_ELEMS: usize = 1 << 22;
const WIDE_GEMM: usize = 64;

/// Target GEMM width (output columns) for narrow layers.
const TARGET_GEMM_WIDTH: usize = 32;

/// Convolution lowered to GEMM over blocks of `p` horizontally adjacent output
/// positions. A block reads one contiguous input window of `p + k - 1` columns
/// per kernel row and is multiplied by a Toeplitz expansion of the kernel,
/// giving a product `p * cout` wide. Narrow layers thereby get a GEMM shape the
/// matrix kernels handle efficiently; with `p == 1` this is plain im2col.
struct ConvPlan {
    k: usize,
    pad: usize,
    cin: usize,
    cout: usize,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
    /// Output positions per block.
    p: usize,
    /// Blocks per output row.
    blocks_per_row: usize,
    /// Elements of one kernel-row window: `(p + k - 1) * cin`.
    win: usize,
    /// im2col row length: `k * win`.
    cols: usize,
    /// GEMM output width: `p * cout`.
    width: usize,
}

impl ConvPlan {
    fn new<T: Real>(input: &Tensor<T>, spec: &ConvSpec) -> Self {
        assert_eq!(input.c, spec.in_channels, "conv input channels");
        let out_h = spec.output_len(input.h).expect("conv input too small");
        let out_w = spec.output_len(input.w).expect("conv input too small");
        let (k, cin, cout) = (spec.kernel, spec.in_channels, spec.out_channels);
        let p = if k == 1 {
            1
        } else {
            TARGET_GEMM_WIDTH.div_ceil(cout).clamp(1, 8).min(out_w)
        };
        let win = (p + k - 1) * cin;
        Self {
            k,
            pad: spec.pad(),
            cin,
            cout,
            in_h: input.h,
            in_w: input.w,
            out_h,
            out_w,
            p,
            blocks_per_row: out_w.div_ceil(p),
            win,
            cols: k * win,
            width: p * cout,
        }
    }

    fn blocks(&self, n: usize) -> usize {
        n * self.out_h * self.blocks_per_row
    }

    fn band_len(&self) -> usize {
        let elems = if self.width >= WIDE_GEMM {
            WIDE_BAND_ELEMS
        } else {
            NARROW_BAND_ELEMS
        };
        (elems / self.cols).max(1)
    }

    /// (sample, output row, first output column, valid positions) of block `t`.
    #[inline]
    fn block(&self, t: usize) -> (usize, usize, usize, usize) {
        let bx = t % self.blocks_per_row;
        let row = t / self.blocks_per_row;
        let ox0 = bx * self.p;
        (row / self.out_h, row % self.out_h, ox0, self.p.min(self.out_w - ox0))
    }

    /// In-bounds part of the window that starts at output column `ox0`:
    /// (offset within the window in columns, first input column, column count).
    #[inline]
    fn window_span(&self, ox0: usize) -> (usize, usize, usize) {
        let start = ox0 as isize - self.pad as isize;
        let span = (self.p + self.k - 1) as isize;
        let lo = start.max(0);
        let hi = (start + span).min(self.in_w as isize);
        if lo >= hi {
            return (0, 0, 0);
        }
        ((lo - start) as usize, lo as usize, (hi - lo) as usize)
    }

    /// Kernel `[ky][kx][ci][co]` expanded to the `cols x width` block matrix
    /// `[ky][wx][ci] x [q][co]`, nonzero where `wx - q` is a kernel column.
    fn expand_kernel<T: Real>(&self, kernel: &[T]) -> Vec<T> {
        if self.p == 1 {
            return kernel.to_vec();
        }
        let mut out = vec![T::zero(); self.cols * self.width];
        for ky in 0..self.k {
            for kx in 0..self.k {
                for ci in 0..self.cin {
                    let src = ((ky * self.k + kx) * self.cin + ci) * self.cout;
                    for q in 0..self.p {
                        let row = ky * self.win + (kx + q) * self.cin + ci;
                        let dst = row * self.width + q * self.cout;
                        out[dst..dst + self.cout].copy_from_slice(&kernel[src..src + self.cout]);
                    }
                }
            }
        }
        out
    }

    /// Adds the gradient of the expanded kernel back onto the compact kernel.
    fn fold_kernel_grad<T: Real>(&self, expanded: &[T], grad_kernel: &mut [T]) {
        if self.p == 1 {
            for (g, &e) in grad_kernel.iter_mut().zip(expanded) {
                *g += e;
            }
            return;
        }
        for ky in 0..self.k {
            for kx in 0..self.k {
                for ci in 0..self.cin {
                    let dst = ((ky * self.k + kx) * self.cin + ci) * self.cout;
                    for q in 0..self.p {
                        let row = ky * self.win + (kx + q) * self.cin + ci;
                        let src = row * self.width + q * self.cout;
                        for (g, &e) in grad_kernel[dst..dst + self.cout]
                            .iter_mut()
                            .zip(&expanded[src..src + self.cout])
                        {
                            *g += e;
                        }
                    }
                }
            }
        }
    }

    /// Output position index of column `ox` in block row `(b, oy)`.
    #[inline]
    fn position(&self, b: usize, oy: usize, ox: usize) -> usize {
        (b * self.out_h + oy) * self.out_w + ox
    }

    /// Fills im2col rows for blocks `[t0, t1)`.
    fn im2col<T: Real>(&self, input: &Tensor<T>, t0: usize, t1: usize, col: &mut [T]) {
        for t in t0..t1 {
            let row = &mut col[(t - t0) * self.cols..(t - t0 + 1) * self.cols];
            let (b, oy, ox0, _) = self.block(t);
            let (off, ix0, nx) = self.window_span(ox0);
            for ky in 0..self.k {
                let seg = &mut row[ky * self.win..(ky + 1) * self.win];
                let iy = oy as isize + ky as isize - self.pad as isize;
                if iy < 0 || iy >= self.in_h as isize || nx == 0 {
                    seg.fill(T::zero());
                    continue;
                }
                let (a, e) = (off * self.cin, (off + nx) * self.cin);
                seg[..a].fill(T::zero());
                seg[e..].fill(T::zero());
                let src = ((b * self.in_h + iy as usize) * self.in_w + ix0) * self.cin;
                seg[a..e].copy_from_slice(&input.data[src..src + nx * self.cin]);
            }
        }
    }

    /// Scatter-adds im2col rows for blocks `[t0, t1)` onto `grad`.
    fn col2im<T: Real>(&self, grad: &mut [T], t0: usize, t1: usize, col: &[T]) {
        for t in t0..t1 {
            let row = &col[(t - t0) * self.cols..(t - t0 + 1) * self.cols];
            let (b, oy, ox0, _) = self.block(t);
            let (off, ix0, nx) = self.window_span(ox0);
            if nx == 0 {
                continue;
            }
            for ky in 0..self.k {
                let iy = oy as isize + ky as isize - self.pad as isize;
                if iy < 0 || iy >= self.in_h as isize {
                    continue;
                }
                let seg = &row[ky * self.win + off * self.cin..ky * self.win + (off + nx) * self.cin];
                let dst = ((b * self.in_h + iy as usize) * self.in_w + ix0) * self.cin;
                for (d, &s) in grad[dst..dst + nx * self.cin].iter_mut().zip(seg) {
                    *d += s;
                }
            }
        }
    }

    /// Copies per-position rows of `src` (`cout` wide) into block rows
    /// (`width` wide) for blocks `[t0, t1)`, zero-filling past the row end.
    fn gather<T: Real>(&self, src: &[T], t0: usize, t1: usize, dst: &mut [T]) {
        for t in t0..t1 {
            let (b, oy, ox0, valid) = self.block(t);
            let row = &mut dst[(t - t0) * self.width..(t - t0 + 1) * self.width];
            let s = self.position(b, oy, ox0) * self.cout;
            row[..valid * self.cout].copy_from_slice(&src[s..s + valid * self.cout]);
            row[valid * self.cout..].fill(T::zero());
        }
    }

    /// Inverse of [`ConvPlan::gather`], dropping padding positions.
    fn scatter<T: Real>(&self, src: &[T], t0: usize, t1: usize, dst: &mut [T]) {
        for t in t0..t1 {
            let (b, oy, ox0, valid) = self.block(t);
            let row = &src[(t - t0) * self.width..(t - t0) * self.width + valid * self.cout];
            let d = self.position(b, oy, ox0) * self.cout;
            dst[d..d + valid * self.cout].copy_from_slice(row);
        }
    }
}

/// Convolution plus bias, with ReLU when the layer asks for it.
pub fn conv_forward<T: Real>(input: &Tensor<T>, spec: &ConvSpec, kernel: &[T], bias: &[T]) -> Tensor<T> {
    let plan = ConvPlan::new(input, spec);
    let cout = spec.out_channels;
    let total = plan.blocks(input.n);
    let wide = plan.expand_kernel(kernel);
    let mut out = Tensor::zeros(input.n, plan.out_h, plan.out_w, cout);
    let band = plan.band_len().min(total);
    let mut col = vec![T::zero(); band * plan.cols];
    let mut ybuf = vec![T::zero(); band * plan.width];
    let mut t0 = 0;
    while t0 < total {
        let t1 = (t0 + band).min(total);
        let m = t1 - t0;
        plan.im2col(input, t0, t1, &mut col);
        gemm(
            m,
            plan.cols,
            plan.width,
            &col[..m * plan.cols],
            Layout::row_major(plan.cols),
            &wide,
            Layout::row_major(plan.width),
            &mut ybuf[..m * plan.width],
            Layout::row_major(plan.width),
            false,
        );
        plan.scatter(&ybuf, t0, t1, &mut out.data);
        t0 = t1;
    }
    for cell in out.data.chunks_exact_mut(cout) {
        for (v, &b) in cell.iter_mut().zip(bias) {
            *v += b;
            if spec.relu && *v < T::zero() {
                *v = T::zero();
            }
        }
    }
    out
}

/// Gradients of one convolution.
///
/// `output` is the forward result (used as the ReLU mask) and `grad_output`
/// the loss gradient with respect to it. Kernel and bias gradients are added
/// into `grad_kernel` / `grad_bias`. The input gradient is returned when
/// `want_input` is set.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward<T: Real>(
    input: &Tensor<T>,
    output: &Tensor<T>,
    grad_output: &Tensor<T>,
    spec: &ConvSpec,
    kernel: &[T],
    grad_kernel: &mut [T],
    grad_bias: &mut [T],
    want_input: bool,
) -> Option<Tensor<T>> {
    let plan = ConvPlan::new(input, spec);
    let cout = spec.out_channels;
    assert_eq!(
        grad_output.len(),
        input.n * plan.out_h * plan.out_w * cout,
        "conv grad_output shape"
    );

    let mut dy = grad_output.data.clone();
    if spec.relu {
        for (d, &y) in dy.iter_mut().zip(&output.data) {
            if y <= T::zero() {
                *d = T::zero();
            }
        }
    }
    for cell in dy.chunks_exact(cout) {
        for (gb, &d) in grad_bias.iter_mut().zip(cell) {
            *gb += d;
        }
    }

    let total = plan.blocks(input.n);
    let wide = if want_input {
        plan.expand_kernel(kernel)
    } else {
        Vec::new()
    };
    let mut wide_grad = vec![T::zero(); plan.cols * plan.width];
    let mut grad_input = want_input.then(|| Tensor::zeros(input.n, input.h, input.w, input.c));
    let band = plan.band_len().min(total);
    let mut col = vec![T::zero(); band * plan.cols];
    let mut dybuf = vec![T::zero(); band * plan.width];
    let mut t0 = 0;
    while t0 < total {
        let t1 = (t0 + band).min(total);
        let m = t1 - t0;
        plan.gather(&dy, t0, t1, &mut dybuf);
        plan.im2col(input, t0, t1, &mut col);
        // dW += col^T * dY
        gemm(
            plan.cols,
            m,
            plan.width,
            &col[..m * plan.cols],
            Layout::transposed(plan.cols),
            &dybuf[..m * plan.width],
            Layout::row_major(plan.width),
            &mut wide_grad,
            Layout::row_major(plan.width),
            true,
        );
        if let Some(gi) = grad_input.as_mut() {
            // dcol = dY * W^T, reusing the im2col buffer
            gemm(
                m,
                plan.width,
                plan.cols,
                &dybuf[..m * plan.width],
                Layout::row_major(plan.width),
                &wide,
                Layout::transposed(plan.width),
                &mut col[..m * plan.cols],
                Layout::row_major(plan.cols),
                false,
            );
            plan.col2im(&mut gi.data, t0, t1, &col[..m * plan.cols]);
        }
        t0 = t1;
    }
    plan.fold_kernel_grad(&wide_grad, grad_kernel);
    grad_input
}

/// 2x2 stride-2 max pooling. When `argmax` is given it receives, per output
/// element, the window slot (0..4 in scan order) of the first maximum.
pub fn maxpool_forward<T: Real>(input: &Tensor<T>, argmax: Option<&mut Vec<u8>>) -> Tensor<T> {
    let (oh, ow, c) = (input.h / 2, input.w / 2, input.c);
    let mut out = Tensor::zeros(input.n, oh, ow, c);
    let mut slots = argmax;
    if let Some(s) = slots.as_deref_mut() {
        s.clear();
        s.resize(out.len(), 0);
    }
    for n in 0..input.n {
        for oy in 0..oh {
            for ox in 0..ow {
                let base = out.index(n, oy, ox, 0);
                let taps = [
                    input.index(n, 2 * oy, 2 * ox, 0),
                    input.index(n, 2 * oy, 2 * ox + 1, 0),
                    input.index(n, 2 * oy + 1, 2 * ox, 0),
                    input.index(n, 2 * oy + 1, 2 * ox + 1, 0),
                ];
                for ch in 0..c {
                    let mut best = input.data[taps[0] + ch];
                    let mut slot = 0u8;
                    for (s, &t) in taps.iter().enumerate().skip(1) {
                        let v = input.data[t + ch];
                        if v > best {
                            best = v;
                            slot = s as u8;
                        }
                    }
                    out.data[base + ch] = best;
                    if let Some(s) = slots.as_deref_mut() {
                        s[base + ch] = slot;
                    }
                }
            }
        }
    }
    out
}

/// Routes each pooled gradient to the recorded maximum of its window.
pub fn maxpool_backward<T: Real>(
    input_dims: (usize, usize, usize, usize),
    grad_output: &Tensor<T>,
    argmax: &[u8],
) -> Tensor<T> {
    let (n, h, w, c) = input_dims;
    let mut grad = Tensor::zeros(n, h, w, c);
    for b in 0..grad_output.n {
        for oy in 0..grad_output.h {
            for ox in 0..grad_output.w {
                let base = grad_output.index(b, oy, ox, 0);
                for ch in 0..c {
                    let slot = argmax[base + ch] as usize;
                    let (dy, dx) = (slot / 2, slot % 2);
                    let dst = grad.index(b, 2 * oy + dy, 2 * ox + dx, ch);
                    grad.data[dst] += grad_output.data[base + ch];
                }
            }
        }
    }
    grad
}

/// In-place softmax over the channel axis of every cell.
pub fn softmax_inplace<T: Real>(t: &mut Tensor<T>) {
    for cell in t.data.chunks_exact_mut(t.c) {
        let max = cell.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in cell.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in cell.iter_mut() {
            *v = *v / sum;
        }
    }
}

/// Summed cross-entropy over all cells of `logits`, every cell of sample `i`
/// carrying label `labels[i]`; the gradient `(softmax - one_hot) * scale` is
/// written to the returned tensor.
pub fn softmax_cross_entropy<T: Real>(logits: &Tensor<T>, labels: &[usize], scale: T) -> (f64, Tensor<T>) {
    assert_eq!(logits.n, labels.len(), "one label per sample");
    let cells = logits.h * logits.w;
    let mut grad = logits.clone();
    let mut loss = 0.0f64;
    for (i, cell) in grad.data.chunks_exact_mut(logits.c).enumerate() {
        let label = labels[i / cells];
        assert!(label < logits.c, "label out of range");
        let max = cell.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = 0.0f64;
        for v in cell.iter() {
            sum += (*v - max).as_f64().exp();
        }
        let log_sum = sum.ln() + max.as_f64();
        loss += log_sum - cell[label].as_f64();
        for (k, v) in cell.iter_mut().enumerate() {
            let p = (v.as_f64() - log_sum).exp();
            let target = if k == label { 1.0 } else { 0.0 };
            *v = T::lit(p - target) * scale;
        }
    }
    (loss, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::convnet::spec::Padding;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize, c: usize) -> Tensor<f64> {
        Tensor::from_vec(
            n,
            h,
            w,
            c,
            (0..n * h * w * c).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
    }

    /// Direct six-loop convolution used as the reference.
    fn naive_conv(input: &Tensor<f64>, spec: &ConvSpec, kernel: &[f64], bias: &[f64]) -> Tensor<f64> {
        let pad = spec.pad() as isize;
        let (oh, ow) = (spec.output_len(input.h).unwrap(), spec.output_len(input.w).unwrap());
        let mut out = Tensor::zeros(input.n, oh, ow, spec.out_channels);
        for n in 0..input.n {
            for oy in 0..oh {
                for ox in 0..ow {
                    for co in 0..spec.out_channels {
                        let mut acc = bias[co];
                        for ky in 0..spec.kernel {
                            for kx in 0..spec.kernel {
                                let iy = oy as isize + ky as isize - pad;
                                let ix = ox as isize + kx as isize - pad;
                                if iy < 0 || ix < 0 || iy >= input.h as isize || ix >= input.w as isize {
                                    continue;
                                }
                                for ci in 0..spec.in_channels {
                                    let w = kernel
                                        [((ky * spec.kernel + kx) * spec.in_channels + ci) * spec.out_channels + co];
                                    acc += w * input.at(n, iy as usize, ix as usize, ci);
                                }
                            }
                        }
                        if spec.relu {
                            acc = acc.max(0.0);
                        }
                        let i = out.index(n, oy, ox, co);
                        out.data[i] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cases = [
            (5, Padding::Same, true, 4, 17),
            (3, Padding::Valid, false, 4, 7),
            (1, Padding::Valid, true, 4, 7),
            (5, Padding::Same, false, 7, 13),
            (3, Padding::Same, true, 40, 9),
            (9, Padding::Valid, true, 3, 11),
        ];
        for (k, padding, relu, cout, w) in cases {
            let spec = ConvSpec {
                kernel: k,
                in_channels: 3,
                out_channels: cout,
                padding,
                relu,
            };
            let input = random_tensor(&mut rng, 2, 9.max(k), w, 3);
            let kernel: Vec<f64> = (0..spec.kernel_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let bias: Vec<f64> = (0..cout).map(|_| rng.random_range(-0.5..0.5)).collect();
            let fast = conv_forward(&input, &spec, &kernel, &bias);
            let slow = naive_conv(&input, &spec, &kernel, &bias);
            assert_eq!(fast.dims(), slow.dims());
            for (a, b) in fast.data.iter().zip(&slow.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pooling_floors_and_breaks_ties_first() {
        let input = Tensor::from_vec(1, 3, 3, 1, vec![1.0, 1.0, 9.0, 0.5, 1.0, 9.0, 9.0, 9.0, 9.0]);
        let mut slots = Vec::new();
        let out = maxpool_forward(&input, Some(&mut slots));
        assert_eq!(out.dims(), (1, 1, 1, 1));
        assert_eq!(out.data, vec![1.0]);
        assert_eq!(slots, vec![0]);
        let grad = maxpool_backward(input.dims(), &Tensor::from_vec(1, 1, 1, 1, vec![2.0]), &slots);
        assert_eq!(grad.data, vec![2.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn softmax_cells_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut t = random_tensor(&mut rng, 2, 3, 3, 5);
        t.data.iter_mut().for_each(|v| *v *= 50.0);
        softmax_inplace(&mut t);
        for cell in t.data.chunks_exact(5) {
            assert!((cell.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(cell.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn cross_entropy_closed_forms() {
        let uniform = Tensor::from_vec(1, 1, 1, 9, vec![0.3f64; 9]);
        let (loss, grad) = softmax_cross_entropy(&uniform, &[4], 1.0);
        assert!((loss - 9f64.ln()).abs() < 1e-12);
        assert!((grad.data[4] - (1.0 / 9.0 - 1.0)).abs() < 1e-12);

        let confident = Tensor::from_vec(1, 1, 1, 3, vec![-1e3f64, 1e3, -1e3]);
        let (loss, _) = softmax_cross_entropy(&confident, &[1], 1.0);
        assert_eq!(loss, 0.0);
    }

    // Finite-difference checks of each layer in isolation against the scalar
    // objective sum(output * probe).
    fn fd_check_conv(spec: ConvSpec, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input = random_tensor(&mut rng, 2, 8, 7, spec.in_channels);
        let kernel: Vec<f64> = (0..spec.kernel_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let bias: Vec<f64> = (0..spec.out_channels).map(|_| rng.random_range(-0.1..0.1)).collect();
        let out = conv_forward(&input, &spec, &kernel, &bias);
        let probe = random_tensor(&mut rng, out.n, out.h, out.w, out.c);
        let objective = |inp: &Tensor<f64>, k: &[f64], b: &[f64]| -> f64 {
            let o = conv_forward(inp, &spec, k, b);
            o.data.iter().zip(&probe.data).map(|(a, p)| a * p).sum()
        };
        let mut gk = vec![0.0; kernel.len()];
        let mut gb = vec![0.0; bias.len()];
        let gi = conv_backward(&input, &out, &probe, &spec, &kernel, &mut gk, &mut gb, true).unwrap();
        let h = 1e-4;
        let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
        for i in (0..kernel.len()).step_by(7) {
            let (mut kp, mut km) = (kernel.clone(), kernel.clone());
            kp[i] += h;
            km[i] -= h;
            let num = (objective(&input, &kp, &bias) - objective(&input, &km, &bias)) / (2.0 * h);
            assert!(rel(gk[i], num) < 1e-3, "kernel {i}: {} vs {num}", gk[i]);
        }
        for i in 0..bias.len() {
            let (mut bp, mut bm) = (bias.clone(), bias.clone());
            bp[i] += h;
            bm[i] -= h;
            let num = (objective(&input, &kernel, &bp) - objective(&input, &kernel, &bm)) / (2.0 * h);
            assert!(rel(gb[i], num) < 1e-3, "bias {i}");
        }
        for i in (0..input.len()).step_by(5) {
            let (mut ip, mut im) = (input.clone(), input.clone());
            ip.data[i] += h;
            im.data[i] -= h;
            let num = (objective(&ip, &kernel, &bias) - objective(&im, &kernel, &bias)) / (2.0 * h);
            assert!(rel(gi.data[i], num) < 1e-3, "input {i}: {} vs {num}", gi.data[i]);
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let cases = [
            (5, Padding::Same, true, 3),
            (3, Padding::Same, false, 3),
            (3, Padding::Valid, true, 3),
            (1, Padding::Valid, false, 3),
            (5, Padding::Same, false, 40),
        ];
        for (k, padding, relu, cout) in cases {
            fd_check_conv(
                ConvSpec {
                    kernel: k,
                    in_channels: 2,
                    out_channels: cout,
                    padding,
                    relu,
                },
                k as u64 + cout as u64,
            );
        }
    }

    #[test]
    fn pool_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let input = random_tensor(&mut rng, 2, 7, 6, 3);
        let mut slots = Vec::new();
        let out = maxpool_forward(&input, Some(&mut slots));
        let probe = random_tensor(&mut rng, out.n, out.h, out.w, out.c);
        let grad = maxpool_backward(input.dims(), &probe, &slots);
        let objective = |inp: &Tensor<f64>| -> f64 {
            let o = maxpool_forward(inp, None);
            o.data.iter().zip(&probe.data).map(|(a, p)| a * p).sum()
        };
        let h = 1e-4;
        for i in 0..input.len() {
            let (mut ip, mut im) = (input.clone(), input.clone());
            ip.data[i] += h;
            im.data[i] -= h;
            let num = (objective(&ip) - objective(&im)) / (2.0 * h);
            assert!((grad.data[i] - num).abs() < 1e-6, "{i}");
        }
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let logits = random_tensor(&mut rng, 3, 2, 1, 4);
        let labels = [0, 3, 2];
        let (_, grad) = softmax_cross_entropy(&logits, &labels, 1.0);
        let h = 1e-4;
        for i in 0..logits.len() {
            let (mut lp, mut lm) = (logits.clone(), logits.clone());
            lp.data[i] += h;
            lm.data[i] -= h;
            let num =
                (softmax_cross_entropy(&lp, &labels, 1.0).0 - softmax_cross_entropy(&lm, &labels, 1.0).0) / (2.0 * h);
            assert!((grad.data[i] - num).abs() < 1e-7);
        }
    }
}
