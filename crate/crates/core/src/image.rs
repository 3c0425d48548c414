use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Channel-major (`C x H x W`) image with `f64` values; real data lives in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::invalid(format!(
                "image: dimensions must be positive, got {channels}x{height}x{width}"
            )));
        }
        if values.len() != channels * height * width {
            return Err(Error::invalid(format!(
                "image: {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                values.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            values,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self {
            channels,
            height,
            width,
            values: vec![value; channels * height * width],
        }
    }

    /// I.i.d. standard normal values.
    pub fn randn<R: Rng + ?Sized>(channels: usize, height: usize, width: usize, rng: &mut R) -> Self {
        let values = (0..channels * height * width)
            .map(|_| rng.sample(StandardNormal))
            .collect();
        Self {
            channels,
            height,
            width,
            values,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.values[(c * self.height + y) * self.width + x]
    }

    pub fn same_dims(&self, other: &Image, op: &'static str) -> Result<()> {
        if self.dims() != other.dims() {
            let (a, b) = (self.dims(), other.dims());
            return Err(Error::Shape {
                op,
                lhs: vec![a.0, a.1, a.2],
                rhs: vec![b.0, b.1, b.2],
            });
        }
        Ok(())
    }

    /// `a * self + b * other`, element-wise.
    pub fn lincomb(&self, a: f64, other: &Image, b: f64) -> Result<Image> {
        self.same_dims(other, "lincomb")?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(x, y)| a * x + b * y)
            .collect();
        Ok(self.with_values(values))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        self.with_values(self.values.iter().map(|&v| f(v)).collect())
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Same dimensions, new values. Panics on a length mismatch.
    pub fn with_values(&self, values: Vec<f64>) -> Image {
        assert_eq!(values.len(), self.values.len(), "with_values: length mismatch");
        Image {
            channels: self.channels,
            height: self.height,
            width: self.width,
            values,
        }
    }
}
