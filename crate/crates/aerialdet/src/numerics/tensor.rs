use rand::Rng;

use crate::error::{Error, Result};

/// Dense rank-4 array in batch/channel/height/width layout, row-major, f64.
///
/// The single value type for images, feature maps, kernels and score maps.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 4]) -> Tensor {
        Tensor {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: [usize; 4], value: f64) -> Tensor {
        Tensor {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f64>) -> Result<Tensor> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::shape(
                "data length",
                expected,
                data.len(),
                format!("tensor shape {shape:?}"),
            ));
        }
        Ok(Tensor { shape, data })
    }

    /// Standard-normal entries scaled by `std`.
    pub fn randn(shape: [usize; 4], std: f64, rng: &mut impl Rng) -> Tensor {
        let len: usize = shape.iter().product();
        let data = (0..len)
            .map(|_| {
                // Box-Muller on open-interval uniforms.
                let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
                let u2: f64 = rng.gen_range(0.0..1.0);
                std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
            })
            .collect();
        Tensor { shape, data }
    }

    pub fn uniform(shape: [usize; 4], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
        let len: usize = shape.iter().product();
        let data = (0..len).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn idx(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.shape[1] + c) * self.shape[2] + h) * self.shape[3] + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.idx(n, c, h, w)]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, c: usize, h: usize, w: usize) -> &mut f64 {
        let i = self.idx(n, c, h, w);
        &mut self.data[i]
    }

    /// Same data under a new shape; element count must match.
    pub fn reshaped(&self, shape: [usize; 4]) -> Result<Tensor> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(Error::shape(
                "element count",
                self.data.len(),
                expected,
                format!("reshape {:?} -> {:?}", self.shape, shape),
            ));
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Channel-feature vector at one grid cell.
    pub fn cell_vector(&self, n: usize, h: usize, w: usize) -> Vec<f64> {
        (0..self.channels()).map(|c| self.at(n, c, h, w)).collect()
    }

    /// Single batch item as a batch-1 tensor.
    pub fn batch_item(&self, n: usize) -> Tensor {
        let [_, c, h, w] = self.shape;
        let stride = c * h * w;
        Tensor {
            shape: [1, c, h, w],
            data: self.data[n * stride..(n + 1) * stride].to_vec(),
        }
    }

    /// Stack batch-1 tensors along the batch axis.
    pub fn stack_batch(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::invalid("stack_batch on empty list"))?;
        let [_, c, h, w] = first.shape;
        let mut data = Vec::with_capacity(items.len() * c * h * w);
        for (i, item) in items.iter().enumerate() {
            if item.shape[0] != 1 {
                return Err(Error::shape("batch", 1, item.shape[0], format!("stack_batch item {i}")));
            }
            if item.shape != [1, c, h, w] {
                return Err(Error::shape(
                    "channels/height/width",
                    c * h * w,
                    item.shape[1] * item.shape[2] * item.shape[3],
                    format!("stack_batch item {i}"),
                ));
            }
            data.extend_from_slice(&item.data);
        }
        Ok(Tensor {
            shape: [items.len(), c, h, w],
            data,
        })
    }
}

/// Geometry of a 2-D convolution: kernel size, stride, zero padding, groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn new(kernel: (usize, usize), stride: usize, padding: usize, groups: usize) -> ConvSpec {
        ConvSpec {
            kernel,
            stride,
            padding,
            groups,
        }
    }

    /// 1x1, stride 1, no padding.
    pub fn pointwise(groups: usize) -> ConvSpec {
        ConvSpec::new((1, 1), 1, 0, groups)
    }

    /// kxk, stride `stride`, same-ish padding (k/2), ungrouped.
    pub fn same(k: usize, stride: usize) -> ConvSpec {
        ConvSpec::new((k, k), stride, k / 2, 1)
    }

    pub fn out_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel;
        if self.stride == 0 {
            return Err(Error::invalid("conv stride must be >= 1"));
        }
        if kh == 0 || kw == 0 {
            return Err(Error::invalid("conv kernel must be >= 1 in both dims"));
        }
        let ph = h + 2 * self.padding;
        let pw = w + 2 * self.padding;
        if ph < kh {
            return Err(Error::shape("padded height", kh, ph, "conv2d input too small"));
        }
        if pw < kw {
            return Err(Error::shape("padded width", kw, pw, "conv2d input too small"));
        }
        Ok(((ph - kh) / self.stride + 1, (pw - kw) / self.stride + 1))
    }
}
