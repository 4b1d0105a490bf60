//! Dense f64 tensors and floating-point images.
//!
//! Feature maps use rank-4 shape `(batch, height, width, channels)` in
//! row-major NHWC order. Scalars are rank-1 tensors of length 1. [`Image`]
//! is a single `(height, width, channels)` plane with values nominally in
//! `[0, 1]`; it stays a separate type so image-domain code cannot be handed
//! a batch by accident.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn filled(shape: &[usize], v: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![v; n] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "from_vec",
                format!("shape {:?} holds {} elements, got {}", shape, n, data.len()),
            ));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Batch/height/width/channel extents of a rank-4 tensor.
    pub fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        if self.shape.len() != 4 {
            return Err(Error::shape(op, format!("expected rank 4, got shape {:?}", self.shape)));
        }
        Ok((self.shape[0], self.shape[1], self.shape[2], self.shape[3]))
    }

    #[inline]
    pub fn at4(&self, b: usize, y: usize, x: usize, c: usize) -> f64 {
        let (_, h, w, ch) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        debug_assert!(y < h && x < w && c < ch);
        self.data[((b * h + y) * w + x) * ch + c]
    }

    #[inline]
    pub fn at4_mut(&mut self, b: usize, y: usize, x: usize, c: usize) -> &mut f64 {
        let (h, w, ch) = (self.shape[1], self.shape[2], self.shape[3]);
        &mut self.data[((b * h + y) * w + x) * ch + c]
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of {} elements", self.numel());
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::from_vec(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Little-endian byte image of the payload, used for digests and
    /// checkpoint serialization.
    pub fn le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * 8);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    h: usize,
    w: usize,
    c: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn zeros(h: usize, w: usize, c: usize) -> Image {
        Image { h, w, c, data: vec![0.0; h * w * c] }
    }

    pub fn from_vec(h: usize, w: usize, c: usize, data: Vec<f64>) -> Result<Image> {
        if data.len() != h * w * c {
            return Err(Error::shape(
                "image_from_vec",
                format!("{}x{}x{} needs {} values, got {}", h, w, c, h * w * c, data.len()),
            ));
        }
        Ok(Image { h, w, c, data })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.w + x) * self.c + c]
    }

    #[inline]
    pub fn at_mut(&mut self, y: usize, x: usize, c: usize) -> &mut f64 {
        &mut self.data[(y * self.w + x) * self.c + c]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image { h: self.h, w: self.w, c: self.c, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn clamp01(&self) -> Image {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    /// Crop of `ph x pw` starting at `(y0, x0)`.
    pub fn crop(&self, y0: usize, x0: usize, ph: usize, pw: usize) -> Result<Image> {
        if y0 + ph > self.h || x0 + pw > self.w {
            return Err(Error::shape(
                "crop",
                format!("{}x{} at ({}, {}) exceeds {}x{}", ph, pw, y0, x0, self.h, self.w),
            ));
        }
        let mut out = Image::zeros(ph, pw, self.c);
        for y in 0..ph {
            for x in 0..pw {
                for ch in 0..self.c {
                    *out.at_mut(y, x, ch) = self.at(y0 + y, x0 + x, ch);
                }
            }
        }
        Ok(out)
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        assert_eq!((self.h, self.w, self.c), (other.h, other.w, other.c));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Single-image rank-4 tensor `(1, h, w, c)`.
    pub fn to_tensor(&self) -> Tensor {
        Tensor { shape: vec![1, self.h, self.w, self.c], data: self.data.clone() }
    }

    /// Stacks same-sized images into a `(n, h, w, c)` batch.
    pub fn batch(images: &[Image]) -> Result<Tensor> {
        let first = images.first().ok_or_else(|| Error::shape("batch", "empty image list"))?;
        let (h, w, c) = (first.h, first.w, first.c);
        let mut data = Vec::with_capacity(images.len() * h * w * c);
        for im in images {
            if (im.h, im.w, im.c) != (h, w, c) {
                return Err(Error::shape(
                    "batch",
                    format!("mixed sizes: {}x{}x{} vs {}x{}x{}", im.h, im.w, im.c, h, w, c),
                ));
            }
            data.extend_from_slice(&im.data);
        }
        Ok(Tensor { shape: vec![images.len(), h, w, c], data })
    }

    /// Splits a `(n, h, w, c)` batch back into images.
    pub fn from_batch(t: &Tensor) -> Result<Vec<Image>> {
        let (n, h, w, c) = t.dims4("from_batch")?;
        let stride = h * w * c;
        Ok((0..n)
            .map(|i| Image {
                h,
                w,
                c,
                data: t.data()[i * stride..(i + 1) * stride].to_vec(),
            })
            .collect())
    }
}
