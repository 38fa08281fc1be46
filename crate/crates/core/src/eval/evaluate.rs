use std::fs;
use std::path::PathBuf;

use rayon::prelude::*;

use super::confusion::ConfusionMatrix;
use super::report::IouReport;
use crate::data::{batch_tensor, crop_labels, save_mask, ClassScheme, NormalizationStats, SegmentationSample};
use crate::error::{Error, Result};
use crate::model::SegmentationModel;
use crate::tensor::{cross_entropy, Element};

#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    pub scheme: ClassScheme,
    /// Write each prediction as `<dir>/<id>.png` in the palette colors.
    pub mask_dir: Option<PathBuf>,
    /// Score and write only the original (unpadded) region.
    pub crop_to_original: bool,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: IouReport,
    pub confusion: ConfusionMatrix,
    /// Pixel-weighted mean cross-entropy.
    pub mean_loss: f64,
}

struct ImageResult {
    cm: ConfusionMatrix,
    loss: f64,
    pixels: usize,
}

fn evaluate_one<T: Element>(
    model: &SegmentationModel<T>,
    sample: &SegmentationSample,
    stats: &NormalizationStats,
    opts: &EvalOptions,
) -> Result<ImageResult> {
    let k = model.config().num_classes;
    let normalized = SegmentationSample { image: stats.normalize(&sample.image)?, ..sample.clone() };
    let (x, targets) = batch_tensor::<T>(&[&normalized])?;
    let logits = model.logits(&x)?;
    let (loss, _) = cross_entropy(&logits, &targets)?;
    let mut pred = logits.argmax_channels()?;
    let mut target = targets;
    let (mut h, mut w) = (sample.height(), sample.width());
    if opts.crop_to_original {
        let padded = (h, w);
        (h, w) = sample.original_hw;
        pred = crop_labels(&pred, padded, sample.offset, (h, w))?;
        target = crop_labels(&target, padded, sample.offset, (h, w))?;
    }
    if let Some(dir) = &opts.mask_dir {
        save_mask(&dir.join(format!("{}.png", sample.id)), &pred, h, w, &opts.scheme)?;
    }
    Ok(ImageResult { cm: ConfusionMatrix::from_masks(k, &pred, &target)?, loss: loss.as_f64(), pixels: h * w })
}

/// Eval-mode forward over every sample, accumulating one dataset-level
/// confusion matrix. Images run in parallel; results merge in input order.
pub fn evaluate_model<T: Element>(
    model: &SegmentationModel<T>,
    samples: &[SegmentationSample],
    stats: &NormalizationStats,
    opts: &EvalOptions,
) -> Result<Evaluation> {
    let k = model.config().num_classes;
    if opts.scheme.num_classes() != k {
        return Err(Error::Config(format!(
            "model predicts {k} classes but the class scheme has {}",
            opts.scheme.num_classes()
        )));
    }
    if samples.is_empty() {
        return Err(Error::Data("no samples to evaluate".into()));
    }
    if let Some(dir) = &opts.mask_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let results: Vec<ImageResult> =
        samples.par_iter().map(|s| evaluate_one(model, s, stats, opts)).collect::<Result<_>>()?;
    let mut cm = ConfusionMatrix::new(k);
    let (mut loss_sum, mut pixels) = (0.0, 0usize);
    for r in &results {
        cm.merge(&r.cm)?;
        loss_sum += r.loss * r.pixels as f64;
        pixels += r.pixels;
    }
    let report = IouReport::new(&cm, &opts.scheme.names(), samples.len())?;
    Ok(Evaluation { report, confusion: cm, mean_loss: loss_sum / pixels as f64 })
}
