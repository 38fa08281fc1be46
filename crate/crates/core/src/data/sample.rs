use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Row-major `H x W x C` image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageBuf {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl ImageBuf {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Data(format!("degenerate image {height}x{width}x{channels}")));
        }
        if data.len() != height * width * channels {
            return Err(Error::Data(format!(
                "image {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(ImageBuf { height, width, channels, data })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        ImageBuf { height, width, channels, data: vec![value; height * width * channels] }
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [f32] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    /// Copy of the `h x w` window at `(y, x)`.
    pub fn crop(&self, y: usize, x: usize, h: usize, w: usize) -> Result<Self> {
        if h == 0 || w == 0 || y + h > self.height || x + w > self.width {
            return Err(Error::Data(format!(
                "crop {h}x{w} at ({x}, {y}) outside {}x{} image",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(h * w * self.channels);
        for r in y..y + h {
            let start = (r * self.width + x) * self.channels;
            data.extend_from_slice(&self.data[start..start + w * self.channels]);
        }
        Ok(ImageBuf { height: h, width: w, channels: self.channels, data })
    }

    /// Repeats a single channel `channels` times.
    pub fn replicate_channels(&self, channels: usize) -> Result<Self> {
        if self.channels == channels {
            return Ok(self.clone());
        }
        if self.channels != 1 {
            return Err(Error::Data(format!("cannot expand {} channels to {channels}", self.channels)));
        }
        let data = self.data.iter().flat_map(|&v| std::iter::repeat_n(v, channels)).collect();
        Ok(ImageBuf { channels, data, ..*self })
    }
}

/// One image with its class-index mask. `offset` is the `(top, left)`
/// position of the original content after padding.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationSample {
    pub id: String,
    pub image: ImageBuf,
    pub mask: Vec<u8>,
    pub original_hw: (usize, usize),
    pub offset: (usize, usize),
}

impl SegmentationSample {
    pub fn new(id: impl Into<String>, image: ImageBuf, mask: Vec<u8>) -> Result<Self> {
        let id = id.into();
        if mask.len() != image.height * image.width {
            return Err(Error::Data(format!(
                "{id}: mask has {} pixels, image is {}x{}",
                mask.len(),
                image.height,
                image.width
            )));
        }
        let hw = (image.height, image.width);
        Ok(SegmentationSample { id, image, mask, original_hw: hw, offset: (0, 0) })
    }

    pub fn height(&self) -> usize {
        self.image.height
    }

    pub fn width(&self) -> usize {
        self.image.width
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if let Some(p) = self.mask.iter().position(|&c| c as usize >= num_classes) {
            return Err(Error::Data(format!(
                "{}: mask class {} at ({}, {}) out of range for {num_classes} classes",
                self.id,
                self.mask[p],
                p % self.width(),
                p / self.width()
            )));
        }
        Ok(())
    }
}

/// Stacks same-size images into an NCHW tensor and their masks into targets.
pub fn batch_tensor<T: Element>(samples: &[&SegmentationSample]) -> Result<(Tensor<T>, Vec<u8>)> {
    let first = samples.first().ok_or_else(|| Error::Data("empty batch".into()))?;
    let (h, w, c) = (first.height(), first.width(), first.image.channels);
    let mut data = Vec::with_capacity(samples.len() * c * h * w);
    let mut targets = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if (s.height(), s.width(), s.image.channels) != (h, w, c) {
            return Err(Error::Data(format!(
                "batch mixes {h}x{w}x{c} and {}x{}x{} images ({})",
                s.height(),
                s.width(),
                s.image.channels,
                s.id
            )));
        }
        for ch in 0..c {
            data.extend(s.image.data.iter().skip(ch).step_by(c).map(|&v| T::of(v as f64)));
        }
        targets.extend_from_slice(&s.mask);
    }
    Ok((Tensor::new(&[samples.len(), c, h, w], data)?, targets))
}
