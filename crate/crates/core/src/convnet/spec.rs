use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::real::Real;
use super::ConvNetError;

/// Side of the square training patch; also the smallest accepted input.
pub const PATCH_SIZE: usize = 150;

/// Filter counts of the six hidden weight layers of the full-size network.
pub const CANONICAL_WIDTHS: [usize; 6] = [32, 64, 128, 256, 1024, 512];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding that preserves the spatial size (odd kernels).
    Same,
    Valid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub padding: Padding,
    pub relu: bool,
}

impl ConvSpec {
    pub fn pad(&self) -> usize {
        match self.padding {
            Padding::Same => (self.kernel - 1) / 2,
            Padding::Valid => 0,
        }
    }

    /// Output extent along one axis, `None` if the input is too small.
    pub fn output_len(&self, input: usize) -> Option<usize> {
        (input + 2 * self.pad() + 1).checked_sub(self.kernel).filter(|&v| v > 0)
    }

    pub fn kernel_len(&self) -> usize {
        self.kernel * self.kernel * self.in_channels * self.out_channels
    }

    pub fn parameter_count(&self) -> usize {
        self.kernel_len() + self.out_channels
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layer {
    Conv(ConvSpec),
    /// 2x2 window, stride 2, trailing odd row/column dropped.
    MaxPool,
    /// Per-cell softmax over channels.
    Softmax,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkSpec {
    pub layers: Vec<Layer>,
    pub input_channels: usize,
    pub num_classes: usize,
}

impl NetworkSpec {
    /// The full-size seven-weight-layer classifier.
    pub fn canonical(num_classes: usize) -> Result<Self, ConvNetError> {
        Self::with_widths(num_classes, CANONICAL_WIDTHS)
    }

    /// Same topology as [`NetworkSpec::canonical`] with custom filter counts.
    pub fn with_widths(num_classes: usize, widths: [usize; 6]) -> Result<Self, ConvNetError> {
        if num_classes < 2 {
            return Err(ConvNetError::InvalidClassCount(num_classes));
        }
        if widths.contains(&0) {
            return Err(ConvNetError::ShapeMismatch(format!(
                "layer widths must be positive, got {widths:?}"
            )));
        }
        let conv = |kernel, in_channels, out_channels, padding, relu| {
            Layer::Conv(ConvSpec {
                kernel,
                in_channels,
                out_channels,
                padding,
                relu,
            })
        };
        let [w1, w2, w3, w4, w5, w6] = widths;
        let layers = vec![
            conv(5, 3, w1, Padding::Same, true),
            Layer::MaxPool,
            conv(5, w1, w2, Padding::Same, true),
            Layer::MaxPool,
            conv(3, w2, w3, Padding::Same, true),
            Layer::MaxPool,
            conv(3, w3, w4, Padding::Same, true),
            Layer::MaxPool,
            conv(9, w4, w5, Padding::Valid, true),
            conv(1, w5, w6, Padding::Valid, true),
            conv(1, w6, num_classes, Padding::Valid, false),
            Layer::Softmax,
        ];
        Ok(Self {
            layers,
            input_channels: 3,
            num_classes,
        })
    }

    pub fn widths(&self) -> [usize; 6] {
        let mut out = [0; 6];
        for (slot, conv) in out.iter_mut().zip(self.convs()) {
            *slot = conv.out_channels;
        }
        out
    }

    pub fn convs(&self) -> impl Iterator<Item = &ConvSpec> {
        self.layers.iter().filter_map(|l| match l {
            Layer::Conv(c) => Some(c),
            _ => None,
        })
    }

    pub fn weight_layer_count(&self) -> usize {
        self.convs().count()
    }

    pub fn parameter_count(&self) -> usize {
        self.convs().map(ConvSpec::parameter_count).sum()
    }

    /// Input pixels per output cell.
    pub fn stride(&self) -> usize {
        1 << self.layers.iter().filter(|l| matches!(l, Layer::MaxPool)).count()
    }

    /// Spatial extent of the output grid along one axis.
    pub fn output_len(&self, input: usize) -> Option<usize> {
        self.layers.iter().try_fold(input, |len, layer| match layer {
            Layer::Conv(c) => c.output_len(len),
            Layer::MaxPool => Some(len / 2).filter(|&v| v > 0),
            Layer::Softmax => Some(len),
        })
    }

    pub fn output_dims(&self, height: usize, width: usize) -> Result<(usize, usize), ConvNetError> {
        let too_small = ConvNetError::InputTooSmall {
            height,
            width,
            min: PATCH_SIZE,
        };
        if height < PATCH_SIZE || width < PATCH_SIZE {
            return Err(too_small);
        }
        match (self.output_len(height), self.output_len(width)) {
            (Some(h), Some(w)) => Ok((h, w)),
            _ => Err(too_small),
        }
    }

    /// Input interval `[stride * j + lo, stride * j + hi]` that output cell `j`
    /// depends on, including zero-padded positions.
    pub fn input_cone(&self) -> (isize, isize) {
        let (mut lo, mut hi) = (0isize, 0isize);
        for layer in self.layers.iter().rev() {
            match layer {
                Layer::Conv(c) => {
                    lo -= c.pad() as isize;
                    hi += c.kernel as isize - 1 - c.pad() as isize;
                }
                Layer::MaxPool => {
                    lo *= 2;
                    hi = 2 * hi + 1;
                }
                Layer::Softmax => {}
            }
        }
        (lo, hi)
    }
}

/// Kernel and bias of one convolution. The kernel is laid out as
/// `[ky][kx][in_channel][out_channel]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T> {
    pub kernel: Vec<T>,
    pub bias: Vec<T>,
}

/// Learned weights, one entry per convolution in layer order.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams<T> {
    pub layers: Vec<ConvParams<T>>,
}

impl<T: Real> NetworkParams<T> {
    pub fn zeros(spec: &NetworkSpec) -> Self {
        Self {
            layers: spec
                .convs()
                .map(|c| ConvParams {
                    kernel: vec![T::zero(); c.kernel_len()],
                    bias: vec![T::zero(); c.out_channels],
                })
                .collect(),
        }
    }

    /// He-normal kernels (variance 2 / fan-in), zero biases.
    pub fn he_init(spec: &NetworkSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Self::zeros(spec);
        for (conv, layer) in spec.convs().zip(params.layers.iter_mut()) {
            let fan_in = conv.kernel * conv.kernel * conv.in_channels;
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            for w in layer.kernel.iter_mut() {
                *w = T::lit(normal.sample(&mut rng));
            }
        }
        params
    }

    pub fn matches(&self, spec: &NetworkSpec) -> bool {
        self.layers.len() == spec.weight_layer_count()
            && spec
                .convs()
                .zip(&self.layers)
                .all(|(c, p)| p.kernel.len() == c.kernel_len() && p.bias.len() == c.out_channels)
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.kernel.len() + l.bias.len()).sum()
    }

    /// Kernel and bias buffers in a fixed order.
    pub fn slices(&self) -> impl Iterator<Item = &[T]> {
        self.layers
            .iter()
            .flat_map(|l| [l.kernel.as_slice(), l.bias.as_slice()])
    }

    pub fn slices_mut(&mut self) -> impl Iterator<Item = &mut [T]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.kernel.as_mut_slice(), l.bias.as_mut_slice()])
    }

    /// Flat-index access across all buffers, in [`NetworkParams::slices`] order.
    pub fn get_flat(&self, mut index: usize) -> T {
        for s in self.slices() {
            if index < s.len() {
                return s[index];
            }
            index -= s.len();
        }
        panic!("parameter index out of range")
    }

    pub fn set_flat(&mut self, mut index: usize, value: T) {
        for s in self.slices_mut() {
            if index < s.len() {
                s[index] = value;
                return;
            }
            index -= s.len();
        }
        panic!("parameter index out of range")
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.slices_mut().zip(other.slices()) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn fill_zero(&mut self) {
        for s in self.slices_mut() {
            s.fill(T::zero());
        }
    }

    pub fn cast<U: Real>(&self) -> NetworkParams<U> {
        let conv = |v: &[T]| v.iter().map(|&x| U::from_f64(x.as_f64()).unwrap()).collect();
        NetworkParams {
            layers: self
                .layers
                .iter()
                .map(|l| ConvParams {
                    kernel: conv(&l.kernel),
                    bias: conv(&l.bias),
                })
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.slices().all(|s| s.iter().all(|v| v.is_finite()))
    }
}

/// The canonical architecture with seeded He initialization.
pub fn build_network(num_classes: usize, seed: u64) -> Result<(NetworkSpec, NetworkParams<f32>), ConvNetError> {
    let spec = NetworkSpec::canonical(num_classes)?;
    let params = NetworkParams::he_init(&spec, seed);
    Ok((spec, params))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_layout() {
        let spec = NetworkSpec::canonical(9).unwrap();
        assert_eq!(spec.weight_layer_count(), 7);
        assert_eq!(spec.layers.len(), 12);
        // Layer-table arithmetic: (kernel area * in + 1) * out per weight layer.
        let table = [
            (5, 3, 32),
            (5, 32, 64),
            (3, 64, 128),
            (3, 128, 256),
            (9, 256, 1024),
            (1, 1024, 512),
            (1, 512, 9),
        ];
        let expected: usize = table.iter().map(|&(k, i, o)| (k * k * i + 1) * o).sum();
        assert_eq!(expected, 22_186_825);
        assert_eq!(spec.parameter_count(), expected);
        assert_eq!(spec.stride(), 16);
        assert!(matches!(spec.layers.last(), Some(Layer::Softmax)));
        let kernels: Vec<usize> = spec.convs().map(|c| c.kernel).collect();
        assert_eq!(kernels, [5, 5, 3, 3, 9, 1, 1]);
    }

    #[test]
    fn output_grid_sizes() {
        let spec = NetworkSpec::canonical(9).unwrap();
        assert_eq!(spec.output_dims(150, 150).unwrap(), (1, 1));
        assert_eq!(spec.output_dims(166, 166).unwrap(), (2, 2));
        assert_eq!(spec.output_dims(5000, 5000).unwrap(), (304, 304));
        assert_eq!(spec.output_dims(150, 182).unwrap(), (1, 3));
        assert!(matches!(
            spec.output_dims(149, 300),
            Err(ConvNetError::InputTooSmall { .. })
        ));
    }

    #[test]
    fn class_count_is_validated() {
        assert!(matches!(build_network(1, 0), Err(ConvNetError::InvalidClassCount(1))));
        assert!(NetworkSpec::with_widths(3, [4, 0, 4, 4, 4, 4]).is_err());
    }

    #[test]
    fn cone_of_canonical_topology() {
        let spec = NetworkSpec::canonical(9).unwrap();
        assert_eq!(spec.input_cone(), (-18, 161));
    }

    #[test]
    fn init_is_seeded() {
        let spec = NetworkSpec::with_widths(3, [4, 4, 4, 4, 8, 4]).unwrap();
        let a = NetworkParams::<f32>::he_init(&spec, 7);
        assert_eq!(a, NetworkParams::he_init(&spec, 7));
        assert_ne!(a, NetworkParams::he_init(&spec, 8));
        assert!(a.matches(&spec));
        assert!(a.layers.iter().all(|l| l.bias.iter().all(|&b| b == 0.0)));
        let first = &a.layers[0].kernel;
        let var = first.iter().map(|&w| (w as f64).powi(2)).sum::<f64>() / first.len() as f64;
        assert!((var - 2.0 / 75.0).abs() < 0.3 * 2.0 / 75.0, "{var}");
    }
}
