use super::real::Real;
use crate::color::RgbImage;

/// Batch of feature maps in (batch, height, width, channels) order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(n: usize, h: usize, w: usize, c: usize) -> Self {
        Self {
            n,
            h,
            w,
            c,
            data: vec![T::zero(); n * h * w * c],
        }
    }

    pub fn from_vec(n: usize, h: usize, w: usize, c: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), n * h * w * c, "tensor data length");
        Self { n, h, w, c, data }
    }

    /// Stacks equally sized RGB images, scaling intensities to [0, 1].
    pub fn from_images<'a, I>(images: I) -> Self
    where
        I: IntoIterator<Item = &'a RgbImage>,
    {
        let scale = T::lit(1.0 / 255.0);
        let mut dims = None;
        let mut n = 0;
        let mut data = Vec::new();
        for img in images {
            let d = (img.height(), img.width());
            assert!(
                dims.is_none_or(|prev| prev == d),
                "images in a batch must share dimensions"
            );
            dims = Some(d);
            data.extend(img.data().iter().map(|&v| T::from_u8(v).unwrap() * scale));
            n += 1;
        }
        let (h, w) = dims.unwrap_or((0, 0));
        Self { n, h, w, c: 3, data }
    }

    pub fn from_image(image: &RgbImage) -> Self {
        Self::from_images(std::iter::once(image))
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.n, self.h, self.w, self.c)
    }

    #[inline]
    pub fn index(&self, n: usize, y: usize, x: usize, ch: usize) -> usize {
        ((n * self.h + y) * self.w + x) * self.c + ch
    }

    #[inline]
    pub fn at(&self, n: usize, y: usize, x: usize, ch: usize) -> T {
        self.data[self.index(n, y, x, ch)]
    }

    /// Channel vector at one spatial cell.
    pub fn cell(&self, n: usize, y: usize, x: usize) -> &[T] {
        let i = self.index(n, y, x, 0);
        &self.data[i..i + self.c]
    }

    /// One sample of the batch.
    pub fn sample(&self, n: usize) -> Tensor<T> {
        let stride = self.h * self.w * self.c;
        Tensor::from_vec(
            1,
            self.h,
            self.w,
            self.c,
            self.data[n * stride..(n + 1) * stride].to_vec(),
        )
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            n: self.n,
            h: self.h,
            w: self.w,
            c: self.c,
            data: self.data.iter().map(|&v| U::from_f64(v.as_f64()).unwrap()).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
