use serde::{Deserialize, Serialize};

use super::sample::{ImageBuf, SegmentationSample};
use crate::error::{Error, Result};

/// Target size used for the full-resolution dataset, `(height, width)`.
pub const DEFAULT_TARGET_HW: (usize, usize) = (672, 1280);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Padding {
    pub left: usize,
    pub right: usize,
    pub top: usize,
    pub bottom: usize,
}

/// Centered padding: floor on the left/top, ceil on the right/bottom.
pub fn padding_for(hw: (usize, usize), target_hw: (usize, usize)) -> Result<Padding> {
    let (h, w) = hw;
    let (th, tw) = target_hw;
    if th < h || tw < w {
        return Err(Error::Data(format!("target {tw}x{th} is smaller than the {w}x{h} source")));
    }
    let (dw, dh) = (tw - w, th - h);
    Ok(Padding { left: dw / 2, right: dw - dw / 2, top: dh / 2, bottom: dh - dh / 2 })
}

/// Sea-surface region used to fill padding: `w x h` pixels at `(x, y)` of
/// image `image_id` (the first training image when unset).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSource {
    #[serde(default)]
    pub image_id: Option<String>,
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl Default for PatchSource {
    fn default() -> Self {
        PatchSource { image_id: None, x: 0, y: 0, w: 32, h: 32 }
    }
}

impl PatchSource {
    /// Cuts the region out of `samples`, clamping the size to the image.
    pub fn extract(&self, samples: &[SegmentationSample]) -> Result<ImageBuf> {
        let src = match &self.image_id {
            Some(id) => samples
                .iter()
                .find(|s| &s.id == id)
                .ok_or_else(|| Error::Data(format!("patch source image `{id}` not found")))?,
            None => samples.first().ok_or_else(|| Error::Data("no images to take a padding patch from".into()))?,
        };
        let img = &src.image;
        if self.x >= img.width || self.y >= img.height {
            return Err(Error::Data(format!(
                "patch origin ({}, {}) outside the {}x{} image `{}`",
                self.x, self.y, img.width, img.height, src.id
            )));
        }
        let w = self.w.min(img.width - self.x);
        let h = self.h.min(img.height - self.y);
        if w == 0 || h == 0 {
            return Err(Error::Data("padding patch region is empty".into()));
        }
        img.crop(self.y, self.x, h, w)
    }
}

/// Pads `sample` to `target_hw`, tiling `patch` over the border and labelling
/// the border sea surface (class 0). The interior is copied unchanged.
pub fn pad_to_target(
    sample: &SegmentationSample,
    target_hw: (usize, usize),
    patch: &ImageBuf,
) -> Result<SegmentationSample> {
    let (h, w) = (sample.height(), sample.width());
    let pad = padding_for((h, w), target_hw)?;
    if (h, w) == target_hw {
        return Ok(sample.clone());
    }
    let c = sample.image.channels;
    if patch.channels != c {
        return Err(Error::Data(format!("patch has {} channels, image has {c}", patch.channels)));
    }
    if patch.data.is_empty() {
        return Err(Error::Data("padding patch region is empty".into()));
    }
    let (th, tw) = target_hw;
    let mut image = ImageBuf::filled(th, tw, c, 0.0);
    let mut mask = vec![0u8; th * tw];
    for y in 0..th {
        for x in 0..tw {
            let inside = (pad.top..pad.top + h).contains(&y) && (pad.left..pad.left + w).contains(&x);
            if inside {
                let (sy, sx) = (y - pad.top, x - pad.left);
                image.pixel_mut(y, x).copy_from_slice(sample.image.pixel(sy, sx));
                mask[y * tw + x] = sample.mask[sy * w + sx];
            } else {
                image.pixel_mut(y, x).copy_from_slice(patch.pixel(y % patch.height, x % patch.width));
            }
        }
    }
    Ok(SegmentationSample {
        id: sample.id.clone(),
        image,
        mask,
        original_hw: sample.original_hw,
        offset: (sample.offset.0 + pad.top, sample.offset.1 + pad.left),
    })
}

/// How a run padded its inputs, kept with the checkpoint so that evaluation
/// and prediction pad the same way.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PaddingSpec {
    /// `(height, width)`.
    pub target_hw: (usize, usize),
    /// Fill patch; `None` when no input needed padding.
    pub patch: Option<ImageBuf>,
}

/// Pads every sample to `target_hw`. `patch` may be `None` only if all
/// samples already have the target size.
pub fn pad_dataset(
    samples: &[SegmentationSample],
    target_hw: (usize, usize),
    patch: Option<&ImageBuf>,
) -> Result<Vec<SegmentationSample>> {
    samples
        .iter()
        .map(|s| match patch {
            Some(p) => pad_to_target(s, target_hw, p),
            None if (s.height(), s.width()) == target_hw => Ok(s.clone()),
            None => Err(Error::Data(format!("`{}` needs padding but no padding patch is available", s.id))),
        })
        .collect()
}

/// `target_hw` when the image fits inside it, otherwise the smallest
/// multiple-of-16 size bounding the image.
pub fn bounding_target(hw: (usize, usize), target_hw: (usize, usize)) -> (usize, usize) {
    if hw.0 <= target_hw.0 && hw.1 <= target_hw.1 {
        target_hw
    } else {
        (hw.0.div_ceil(16) * 16, hw.1.div_ceil(16) * 16)
    }
}

/// Inverse of [`pad_to_target`] for a row-major label map of `padded_hw`.
pub fn crop_labels(
    labels: &[u8],
    padded_hw: (usize, usize),
    offset: (usize, usize),
    hw: (usize, usize),
) -> Result<Vec<u8>> {
    let (ph, pw) = padded_hw;
    let (top, left) = offset;
    let (h, w) = hw;
    if labels.len() != ph * pw || top + h > ph || left + w > pw {
        return Err(Error::Data(format!("cannot crop {w}x{h} at ({left}, {top}) from {pw}x{ph} labels")));
    }
    Ok((0..h).flat_map(|y| labels[(top + y) * pw + left..(top + y) * pw + left + w].iter().copied()).collect())
}
