use super::layers::{
    conv_backward, conv_forward, maxpool_backward, maxpool_forward, softmax_cross_entropy, softmax_inplace,
};
use super::real::Real;
use super::spec::{Layer, NetworkParams, NetworkSpec};
use super::tensor::Tensor;
use super::ConvNetError;

fn check_input<T: Real>(spec: &NetworkSpec, params: &NetworkParams<T>, input: &Tensor<T>) -> Result<(), ConvNetError> {
    if !params.matches(spec) {
        return Err(ConvNetError::ShapeMismatch(
            "parameters do not match the network spec".into(),
        ));
    }
    if input.c != spec.input_channels {
        return Err(ConvNetError::ShapeMismatch(format!(
            "input has {} channels, network expects {}",
            input.c, spec.input_channels
        )));
    }
    spec.output_dims(input.h, input.w).map(|_| ())
}

/// Class probabilities for every output cell, shape `(n, grid_h, grid_w, num_classes)`.
pub fn forward<T: Real>(
    spec: &NetworkSpec,
    params: &NetworkParams<T>,
    input: &Tensor<T>,
) -> Result<Tensor<T>, ConvNetError> {
    check_input(spec, params, input)?;
    let mut x = input.clone();
    let mut conv_idx = 0;
    for layer in &spec.layers {
        x = match layer {
            Layer::Conv(c) => {
                let p = &params.layers[conv_idx];
                conv_idx += 1;
                conv_forward(&x, c, &p.kernel, &p.bias)
            }
            Layer::MaxPool => maxpool_forward(&x, None),
            Layer::Softmax => {
                softmax_inplace(&mut x);
                x
            }
        };
    }
    Ok(x)
}

/// Mean cross-entropy of `batch` against `labels` and its gradient.
///
/// The loss is averaged over samples and output cells; for patch-sized
/// inputs there is exactly one cell per sample.
pub fn loss_and_gradient<T: Real>(
    spec: &NetworkSpec,
    params: &NetworkParams<T>,
    batch: &Tensor<T>,
    labels: &[usize],
) -> Result<(f64, NetworkParams<T>), ConvNetError> {
    let mut grads = NetworkParams::zeros(spec);
    let cells = {
        check_input(spec, params, batch)?;
        let (gh, gw) = spec.output_dims(batch.h, batch.w)?;
        gh * gw
    };
    let denom = (batch.n * cells) as f64;
    let loss_sum = accumulate_gradient(spec, params, batch, labels, T::lit(1.0 / denom), &mut grads)?;
    Ok((loss_sum / denom, grads))
}

/// Adds `scale * d(summed loss)/d(params)` into `grads` and returns the summed
/// (unscaled) cross-entropy.
pub fn accumulate_gradient<T: Real>(
    spec: &NetworkSpec,
    params: &NetworkParams<T>,
    batch: &Tensor<T>,
    labels: &[usize],
    scale: T,
    grads: &mut NetworkParams<T>,
) -> Result<f64, ConvNetError> {
    check_input(spec, params, batch)?;
    if labels.len() != batch.n {
        return Err(ConvNetError::ShapeMismatch(format!(
            "{} labels for {} samples",
            labels.len(),
            batch.n
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= spec.num_classes) {
        return Err(ConvNetError::ShapeMismatch(format!("label {bad} out of range")));
    }

    // Forward pass keeping every intermediate activation; the final softmax is
    // fused into the loss.
    let mut acts: Vec<Tensor<T>> = vec![batch.clone()];
    let mut pool_slots: Vec<Vec<u8>> = Vec::new();
    let mut conv_idx = 0;
    for layer in &spec.layers {
        let x = acts.last().expect("input activation");
        let y = match layer {
            Layer::Conv(c) => {
                let p = &params.layers[conv_idx];
                conv_idx += 1;
                conv_forward(x, c, &p.kernel, &p.bias)
            }
            Layer::MaxPool => {
                let mut slots = Vec::new();
                let y = maxpool_forward(x, Some(&mut slots));
                pool_slots.push(slots);
                y
            }
            Layer::Softmax => break,
        };
        acts.push(y);
    }

    let logits = acts.last().expect("logits");
    let (loss, mut grad) = softmax_cross_entropy(logits, labels, scale);

    let computed = acts.len() - 1;
    for (li, layer) in spec.layers[..computed].iter().enumerate().rev() {
        let input = &acts[li];
        grad = match layer {
            Layer::Conv(c) => {
                conv_idx -= 1;
                let g = &mut grads.layers[conv_idx];
                let gi = conv_backward(
                    input,
                    &acts[li + 1],
                    &grad,
                    c,
                    &params.layers[conv_idx].kernel,
                    &mut g.kernel,
                    &mut g.bias,
                    li > 0,
                );
                match gi {
                    Some(gi) => gi,
                    None => break,
                }
            }
            Layer::MaxPool => {
                let slots = pool_slots.pop().expect("pool slots");
                maxpool_backward(input.dims(), &grad, &slots)
            }
            Layer::Softmax => unreachable!("softmax is fused into the loss"),
        };
    }
    Ok(loss)
}

/// Index of the largest entry of `v`; ties resolve to the lowest index.
pub fn argmax<T: Real>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
