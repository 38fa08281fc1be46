use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::sample::ImageBuf;
use crate::error::{Error, Result};

pub const STD_FLOOR: f64 = 1e-6;

/// Per-channel mean and population standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormalizationStats {
    pub fn compute<'a>(images: impl IntoIterator<Item = &'a ImageBuf>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut count = 0usize;
        for img in images {
            if sum.is_empty() {
                sum = vec![0.0; img.channels];
                sq = vec![0.0; img.channels];
            } else if img.channels != sum.len() {
                return Err(Error::Data(format!("images mix {} and {} channels", sum.len(), img.channels)));
            }
            for px in img.data.chunks_exact(img.channels) {
                for (c, &v) in px.iter().enumerate() {
                    sum[c] += v as f64;
                    sq[c] += v as f64 * v as f64;
                }
            }
            count += img.height * img.width;
        }
        if count == 0 {
            return Err(Error::Data("cannot compute normalization statistics over zero pixels".into()));
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq.iter().zip(&mean).map(|(q, m)| (q / n - m * m).max(0.0).sqrt().max(STD_FLOOR)).collect();
        Ok(NormalizationStats { mean, std })
    }

    fn check(&self, img: &ImageBuf) -> Result<()> {
        if img.channels != self.mean.len() {
            return Err(Error::Data(format!(
                "statistics cover {} channels, image has {}",
                self.mean.len(),
                img.channels
            )));
        }
        Ok(())
    }

    pub fn normalize(&self, img: &ImageBuf) -> Result<ImageBuf> {
        self.check(img)?;
        let c = img.channels;
        let data = img
            .data
            .iter()
            .enumerate()
            .map(|(i, &v)| ((v as f64 - self.mean[i % c]) / self.std[i % c]) as f32)
            .collect();
        Ok(ImageBuf { data, ..*img })
    }

    pub fn denormalize(&self, img: &ImageBuf) -> Result<ImageBuf> {
        self.check(img)?;
        let c = img.channels;
        let data =
            img.data.iter().enumerate().map(|(i, &v)| (v as f64 * self.std[i % c] + self.mean[i % c]) as f32).collect();
        Ok(ImageBuf { data, ..*img })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
