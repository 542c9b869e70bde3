//! Binary masks and grayscale images on a pixel grid.

use spt_tensor::Tensor;

use crate::error::{Result, SptError};

/// Binary mask, row-major, `true` = anomaly.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Mask {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn from_bits(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(SptError::DegenerateInput(format!(
                "{} bits for a {width}x{height} mask",
                bits.len()
            )));
        }
        Ok(Mask { width, height, bits })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut m = Mask::new(width, height);
        for y in 0..height {
            for x in 0..width {
                m.bits[y * width + x] = f(x, y);
            }
        }
        m
    }

    /// Thresholds logits with ties to anomaly: `logit >= 0`.
    pub fn from_logits(logits: &Tensor) -> Result<Self> {
        match logits.shape() {
            &[h, w] => Ok(Mask {
                width: w,
                height: h,
                bits: logits.data().iter().map(|&v| v >= 0.0).collect(),
            }),
            s => Err(SptError::DegenerateInput(format!("logits of shape {s:?} are not a 2-D grid"))),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn same_shape(&self, other: &Mask) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Set pixels as `(x, y)`, scanline order.
    pub fn pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(i, _)| (i % self.width, i / self.width))
    }

    pub fn union(&self, other: &Mask) -> Mask {
        self.zip(other, |a, b| a || b)
    }

    pub fn intersection(&self, other: &Mask) -> Mask {
        self.zip(other, |a, b| a && b)
    }

    fn zip(&self, other: &Mask, f: impl Fn(bool, bool) -> bool) -> Mask {
        assert!(self.same_shape(other), "mask shape mismatch");
        Mask {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().zip(&other.bits).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    /// 0/1 tensor of shape `[height, width]`.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.height, self.width],
            self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )
        .expect("mask dimensions are positive")
    }
}

/// Grayscale image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height || width == 0 || height == 0 {
            return Err(SptError::DegenerateInput(format!(
                "{} values for a {width}x{height} image",
                data.len()
            )));
        }
        Ok(Image { width, height, data })
    }

    /// Image from 8-bit samples, scaled by 1/255.
    pub fn from_u8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        Image::new(width, height, bytes.iter().map(|&b| b as f64 / 255.0).collect())
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
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

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.height, self.width], self.data.clone()).expect("image dimensions are positive")
    }
}
