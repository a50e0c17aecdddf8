use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Result};
use crate::tensor::Tensor;

/// An `H×W×C` array stored row-major with interleaved channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plane<T> {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<T>,
}

/// Intensities, nominally in `[0, 1]`.
pub type Image = Plane<f64>;
/// Per-pixel class ids; always single-channel.
pub type Mask = Plane<u8>;

impl<T: Copy + Default> Plane<T> {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(invalid(format!("empty array {height}×{width}×{channels}")));
        }
        if data.len() != height * width * channels {
            return Err(shape(format!(
                "{height}×{width}×{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: T) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_fn(height: usize, width: usize, channels: usize, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> T {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: T) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// The `channels`-long slice for one pixel.
    pub fn pixel(&self, y: usize, x: usize) -> &[T] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }
}

impl Image {
    /// Channel-planar copy (`C×H×W`), the layout the networks consume.
    pub fn to_chw(&self) -> Vec<f64> {
        let (h, w, c) = self.dims();
        let mut out = vec![0.0; h * w * c];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    out[ch * h * w + y * w + x] = self.get(y, x, ch);
                }
            }
        }
        out
    }

    /// Stacks same-sized images into a `B×C×H×W` tensor.
    pub fn batch_tensor(images: &[&Image]) -> Result<Tensor> {
        let Some(first) = images.first() else {
            return Err(shape("cannot batch zero images"));
        };
        let (h, w, c) = first.dims();
        let mut data = Vec::with_capacity(images.len() * h * w * c);
        for img in images {
            if img.dims() != (h, w, c) {
                return Err(shape(format!("image {:?} in a batch of {:?}", img.dims(), (h, w, c))));
            }
            data.extend(img.to_chw());
        }
        Tensor::new(vec![images.len(), c, h, w], data)
    }

    pub fn from_chw(height: usize, width: usize, channels: usize, chw: &[f64]) -> Result<Self> {
        if chw.len() != height * width * channels {
            return Err(shape("planar buffer size mismatch"));
        }
        Ok(Self::from_fn(height, width, channels, |y, x, c| {
            chw[c * height * width + y * width + x]
        }))
    }
}

impl Mask {
    pub fn max_class(&self) -> u8 {
        self.data.iter().copied().max().unwrap_or(0)
    }
}
