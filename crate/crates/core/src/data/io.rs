use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{ColorType, DynamicImage, GrayImage, RgbImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::sample::{ImageBuf, SegmentationSample};
use super::scheme::ClassScheme;
use super::stats::{class_distribution, ClassDistribution};
use crate::error::{Error, Result};

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

fn open(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

/// Loads an image as intensities in `[0, 1]`; grayscale is replicated to
/// `channels` when `channels > 1`.
pub fn load_image(path: &Path, channels: usize) -> Result<ImageBuf> {
    let img = open(path)?;
    let gray = matches!(img.color(), ColorType::L8 | ColorType::L16 | ColorType::La8 | ColorType::La16);
    let buf = if gray {
        let g = img.to_luma8();
        ImageBuf::new(g.height() as usize, g.width() as usize, 1, g.pixels().map(|p| p.0[0] as f32 / 255.0).collect())?
    } else {
        let rgb = img.to_rgb8();
        let data = rgb.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
        ImageBuf::new(rgb.height() as usize, rgb.width() as usize, 3, data)?
    };
    buf.replicate_channels(channels).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Decodes a mask. RGB masks are mapped through the palette; single-channel
/// masks are read as class indices.
pub fn load_mask(path: &Path, scheme: &ClassScheme) -> Result<(usize, usize, Vec<u8>)> {
    let img = open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if img.color() == ColorType::L8 {
        let labels = img.to_luma8().into_raw();
        if let Some(p) = labels.iter().position(|&v| v as usize >= scheme.num_classes()) {
            return Err(Error::Data(format!(
                "{}: class index {} at ({}, {}) out of range",
                path.display(),
                labels[p],
                p % w,
                p / w
            )));
        }
        return Ok((h, w, labels));
    }
    let rgb = img.to_rgb8();
    let mut labels = Vec::with_capacity(w * h);
    for (x, y, px) in rgb.enumerate_pixels() {
        match scheme.class_of(px.0) {
            Some(c) => labels.push(c),
            None => {
                return Err(Error::Data(format!("{}: unknown mask color {:?} at ({x}, {y})", path.display(), px.0)))
            }
        }
    }
    Ok((h, w, labels))
}

pub fn mask_to_rgb(labels: &[u8], height: usize, width: usize, scheme: &ClassScheme) -> Result<RgbImage> {
    if labels.len() != height * width {
        return Err(Error::Data(format!("{} labels for a {width}x{height} mask", labels.len())));
    }
    let mut raw = Vec::with_capacity(labels.len() * 3);
    for &l in labels {
        let c = scheme.color(l).ok_or_else(|| Error::Data(format!("class {l} has no palette color")))?;
        raw.extend_from_slice(&c);
    }
    Ok(RgbImage::from_raw(width as u32, height as u32, raw).expect("buffer size checked"))
}

pub fn save_mask(path: &Path, labels: &[u8], height: usize, width: usize, scheme: &ClassScheme) -> Result<()> {
    mask_to_rgb(labels, height, width, scheme)?
        .save(path)
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

/// Saves the first channel of `img` as an 8-bit grayscale PNG.
pub fn save_gray(path: &Path, img: &ImageBuf) -> Result<()> {
    let raw = img.data.iter().step_by(img.channels).map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    GrayImage::from_raw(img.width as u32, img.height as u32, raw)
        .expect("buffer size checked")
        .save(path)
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

fn find_file(dir: &Path, stem: &str) -> Option<PathBuf> {
    IMAGE_EXTENSIONS.iter().map(|e| dir.join(format!("{stem}.{e}"))).find(|p| p.is_file())
}

/// Image ids (file stems) under `root/images`, sorted.
pub fn list_ids(root: &Path) -> Result<Vec<String>> {
    let dir = root.join("images");
    let entries = fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut ids = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(&dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if path.is_file() && ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    if ids.is_empty() {
        return Err(Error::Data(format!("no images found in {}", dir.display())));
    }
    Ok(ids)
}

pub fn load_sample(root: &Path, id: &str, scheme: &ClassScheme, channels: usize) -> Result<SegmentationSample> {
    let img_path = find_file(&root.join("images"), id)
        .ok_or_else(|| Error::Data(format!("no image file for `{id}` in {}", root.join("images").display())))?;
    let mask_path = find_file(&root.join("masks"), id)
        .ok_or_else(|| Error::Data(format!("missing mask for image `{id}` in {}", root.join("masks").display())))?;
    let image = load_image(&img_path, channels)?;
    let (h, w, mask) = load_mask(&mask_path, scheme)?;
    if (h, w) != (image.height, image.width) {
        return Err(Error::Data(format!("`{id}`: image is {}x{} but mask is {w}x{h}", image.width, image.height)));
    }
    SegmentationSample::new(id, image, mask)
}

/// Loads every `root/images/<id>` with its `root/masks/<id>`, in id order.
/// Loading runs on the rayon pool; results keep the sorted id order.
pub fn load_dataset(root: &Path, scheme: &ClassScheme, channels: usize) -> Result<Vec<SegmentationSample>> {
    let ids = list_ids(root)?;
    ids.par_iter().map(|id| load_sample(root, id, scheme, channels)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub count: usize,
    pub ids: Vec<String>,
    /// Number of images per `WxH` size.
    pub sizes: BTreeMap<String, usize>,
    pub distribution: ClassDistribution,
}

impl DatasetManifest {
    pub fn new(root: &Path, samples: &[SegmentationSample], scheme: &ClassScheme) -> Result<Self> {
        let mut sizes = BTreeMap::new();
        for s in samples {
            *sizes.entry(format!("{}x{}", s.width(), s.height())).or_insert(0) += 1;
        }
        Ok(DatasetManifest {
            root: root.to_path_buf(),
            count: samples.len(),
            ids: samples.iter().map(|s| s.id.clone()).collect(),
            sizes,
            distribution: class_distribution(samples, scheme)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_round_trip_and_unknown_color() {
        let dir = tempfile::tempdir().unwrap();
        let scheme = ClassScheme::default();
        let labels: Vec<u8> = (0..12).map(|i| (i % 5) as u8).collect();
        let p = dir.path().join("m.png");
        save_mask(&p, &labels, 3, 4, &scheme).unwrap();
        assert_eq!(load_mask(&p, &scheme).unwrap(), (3, 4, labels));

        let mut img = RgbImage::new(3, 2);
        img.put_pixel(2, 1, image::Rgb([7, 7, 7]));
        img.save(&p).unwrap();
        let err = load_mask(&p, &scheme).unwrap_err().to_string();
        assert!(err.contains("m.png") && err.contains("(2, 1)"), "{err}");
    }

    #[test]
    fn dataset_layout_errors() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("images")).unwrap();
        fs::create_dir_all(dir.path().join("masks")).unwrap();
        assert!(load_dataset(dir.path(), &ClassScheme::default(), 3).is_err());
        save_gray(&dir.path().join("images/a.png"), &ImageBuf::filled(2, 2, 1, 0.5)).unwrap();
        let err = load_dataset(dir.path(), &ClassScheme::default(), 3).unwrap_err().to_string();
        assert!(err.contains("missing mask"), "{err}");
        save_mask(&dir.path().join("masks/a.png"), &[0; 6], 2, 3, &ClassScheme::default()).unwrap();
        assert!(load_dataset(dir.path(), &ClassScheme::default(), 3).is_err());
        save_mask(&dir.path().join("masks/a.png"), &[1; 4], 2, 2, &ClassScheme::default()).unwrap();
        let s = load_dataset(dir.path(), &ClassScheme::default(), 3).unwrap();
        assert_eq!(s[0].image.channels, 3);
        assert_eq!(s[0].mask, vec![1; 4]);
    }
}
