use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use segforge::data::{
    batch_tensor, bounding_target, class_distribution, crop_labels, load_dataset, load_image, pad_dataset, save_mask,
    split_train_val, synth_generate, ClassScheme, DatasetManifest, ImageBuf, NormalizationStats, PaddingSpec,
    PatchSource, SegmentationSample, SynthConfig,
};
use segforge::eval::{
    cross_validate as run_cv, emit_learning_curves, emit_report, evaluate_model, CvOptions, EvalOptions,
};
use segforge::gradcheck::{run_gradcheck, GradcheckOptions};
use segforge::model::{ModelConfig, SegmentationModel};
use segforge::train::{fit, load_checkpoint, CheckpointRecord, FitOptions, TrainState};
use segforge::{Error, Result};

use super::config::RunConfig;

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        ensure_dir(dir)?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    write_text(path, &serde_json::to_string_pretty(value)?)
}

fn echo_config(cfg: &RunConfig) -> Result<()> {
    write_text(&cfg.out.join("config.echo"), &cfg.to_toml()?)
}

fn check_classes(scheme: &ClassScheme, model: &ModelConfig) -> Result<()> {
    if scheme.num_classes() != model.num_classes {
        return Err(Error::Config(format!(
            "the palette has {} classes but the model predicts {}",
            scheme.num_classes(),
            model.num_classes
        )));
    }
    Ok(())
}

/// The fill patch, or `None` when every sample already has the target size.
fn padding_patch(
    samples: &[SegmentationSample],
    target_hw: (usize, usize),
    source: &PatchSource,
) -> Result<Option<ImageBuf>> {
    if samples.iter().all(|s| (s.height(), s.width()) == target_hw) {
        return Ok(None);
    }
    source.extract(samples).map(Some)
}

fn subset(samples: &[SegmentationSample], ids: &[String]) -> Vec<SegmentationSample> {
    let keep: HashSet<&str> = ids.iter().map(String::as_str).collect();
    samples.iter().filter(|s| keep.contains(s.id.as_str())).cloned().collect()
}

pub fn synth(cfg: &RunConfig, n: usize, height: usize, width: usize, cell: usize) -> Result<()> {
    let scheme = cfg.data.scheme()?;
    let synth = SynthConfig { cell, ..SynthConfig::new(n, height, width, cfg.train.seed) };
    let ids = synth_generate(&cfg.out, &synth, &scheme)?;
    println!("wrote {} synthetic images to {}", ids.len(), cfg.out.display());
    Ok(())
}

pub fn stats(cfg: &RunConfig) -> Result<()> {
    let scheme = cfg.data.scheme()?;
    let root = cfg.data.root()?;
    let samples = load_dataset(root, &scheme, cfg.data.channels)?;
    let dist = class_distribution(&samples, &scheme)?;
    let target = cfg.data.target_hw();
    let patch = padding_patch(&samples, target, &cfg.data.patch)?;
    let padded = pad_dataset(&samples, target, patch.as_ref())?;
    let norm = NormalizationStats::compute(padded.iter().map(|s| &s.image))?;
    print!("{}", dist.to_table());
    println!("images: {}", samples.len());
    println!("normalization over images padded to {}x{}:", target.1, target.0);
    for (c, (m, s)) in norm.mean.iter().zip(&norm.std).enumerate() {
        println!("  channel {c}: mean {m:.6}, std {s:.6}");
    }
    ensure_dir(&cfg.out)?;
    DatasetManifest::new(root, &samples, &scheme)?.save(&cfg.out.join("manifest.json"))?;
    norm.save(&cfg.out.join("normalization.json"))
}

pub fn train(cfg: &RunConfig, resume: Option<&Path>, stop_at_epoch: Option<usize>) -> Result<()> {
    let scheme = cfg.data.scheme()?;
    check_classes(&scheme, &cfg.model)?;
    let root = cfg.data.root()?;
    let all = load_dataset(root, &scheme, cfg.data.channels)?;
    let (train, val) = match &cfg.data.val_root {
        Some(v) => (all.clone(), load_dataset(v, &scheme, cfg.data.channels)?),
        None if cfg.data.val_fraction > 0.0 => {
            let ids: Vec<String> = all.iter().map(|s| s.id.clone()).collect();
            let plan = split_train_val(&ids, cfg.data.val_fraction, cfg.data.split_seed)?;
            (subset(&all, &plan.train), subset(&all, &plan.val))
        }
        None => (all.clone(), Vec::new()),
    };
    log::info!("{} training and {} validation images", train.len(), val.len());

    let target = cfg.data.target_hw();
    let patch = padding_patch(&train, target, &cfg.data.patch)?;
    let train = pad_dataset(&train, target, patch.as_ref())?;
    let val = pad_dataset(&val, target, patch.as_ref())?;
    let norm = NormalizationStats::compute(train.iter().map(|s| &s.image))?;

    let mut state = match resume {
        Some(p) => {
            let record = load_checkpoint::<f32>(p)?;
            if record.header.model != cfg.model {
                log::warn!("resuming with the model configuration stored in {}", p.display());
            }
            record.into_state()?
        }
        None => TrainState::<f32>::new(cfg.model.clone(), cfg.train.seed)?,
    };

    ensure_dir(&cfg.out)?;
    echo_config(cfg)?;
    DatasetManifest::new(root, &all, &scheme)?.save(&cfg.out.join("manifest.json"))?;
    norm.save(&cfg.out.join("normalization.json"))?;
    write_json(&cfg.out.join("model_summary.json"), &state.model.summary(target.0, target.1)?)?;

    let ckpt_dir = cfg.out.join("checkpoints");
    ensure_dir(&ckpt_dir)?;
    let opts = FitOptions {
        checkpoint_dir: Some(ckpt_dir.clone()),
        stop_at_epoch,
        scheme: Some(scheme.clone()),
        padding: Some(PaddingSpec { target_hw: target, patch }),
    };
    fit(&mut state, &train, &val, &norm, &cfg.train, &opts)?;
    emit_learning_curves(&state.logs, &cfg.out.join("logs.csv"))?;

    if let Some(last) = state.logs.last() {
        println!("epoch {}/{}: train loss {:.5}, lr {:.3e}", last.epoch, cfg.train.epochs, last.train_loss, last.lr);
    }
    if !val.is_empty() && state.epoch > 0 {
        let eval = EvalOptions { scheme, crop_to_original: cfg.data.crop_back, ..Default::default() };
        let ev = evaluate_model(&state.model, &val, &norm, &eval)?;
        emit_report(&ev.report, &cfg.out, "report")?;
        print!("{}", ev.report.to_table());
    }
    println!("checkpoints in {}", ckpt_dir.display());
    Ok(())
}

/// First top-level field where two model configurations differ.
fn config_mismatch(expected: &ModelConfig, found: &ModelConfig) -> Result<Option<String>> {
    let (a, b) = (serde_json::to_value(expected)?, serde_json::to_value(found)?);
    let (Some(a), Some(b)) = (a.as_object(), b.as_object()) else { return Ok(None) };
    let diffs: Vec<String> = a
        .iter()
        .filter(|(k, v)| b.get(*k) != Some(*v))
        .map(|(k, v)| format!("`{k}`: requested {v}, checkpoint has {}", b.get(k).cloned().unwrap_or_default()))
        .collect();
    Ok((!diffs.is_empty()).then(|| diffs.join("; ")))
}

struct Loaded {
    model: SegmentationModel<f32>,
    norm: NormalizationStats,
    padding: Option<PaddingSpec>,
}

fn load_for_inference(cfg: &RunConfig, checkpoint: &Path, explicit_model: bool) -> Result<Loaded> {
    let record: CheckpointRecord<f32> = load_checkpoint(checkpoint)?;
    if explicit_model {
        if let Some(diff) = config_mismatch(&cfg.model, &record.header.model)? {
            return Err(Error::Checkpoint(format!(
                "{} does not match the requested model: {diff}",
                checkpoint.display()
            )));
        }
    }
    let norm =
        record.header.normalization.clone().ok_or_else(|| {
            Error::Checkpoint(format!("{} carries no normalization statistics", checkpoint.display()))
        })?;
    let model = record.build_model()?;
    Ok(Loaded { model, norm, padding: record.header.padding })
}

pub fn evaluate(cfg: &RunConfig, checkpoint: &Path, save_masks: bool, explicit_model: bool) -> Result<()> {
    let loaded = load_for_inference(cfg, checkpoint, explicit_model)?;
    let scheme = cfg.data.scheme()?;
    check_classes(&scheme, loaded.model.config())?;
    let samples = load_dataset(cfg.data.root()?, &scheme, loaded.model.config().in_channels)?;
    let (target, patch) = match loaded.padding {
        Some(p) => (p.target_hw, p.patch),
        None => (cfg.data.target_hw(), None),
    };
    let patch = match patch {
        Some(p) => Some(p),
        None => padding_patch(&samples, target, &cfg.data.patch)?,
    };
    let padded = pad_dataset(&samples, target, patch.as_ref())?;
    let opts = EvalOptions {
        scheme,
        mask_dir: save_masks.then(|| cfg.out.join("masks")),
        crop_to_original: cfg.data.crop_back,
    };
    let ev = evaluate_model(&loaded.model, &padded, &loaded.norm, &opts)?;
    ensure_dir(&cfg.out)?;
    echo_config(cfg)?;
    emit_report(&ev.report, &cfg.out, "report")?;
    print!("{}", ev.report.to_table());
    Ok(())
}

fn stem_of(path: &Path) -> String {
    path.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string()
}

pub fn predict(cfg: &RunConfig, checkpoint: &Path, images: &[PathBuf], explicit_model: bool) -> Result<()> {
    let loaded = load_for_inference(cfg, checkpoint, explicit_model)?;
    let scheme = cfg.data.scheme()?;
    check_classes(&scheme, loaded.model.config())?;
    let channels = loaded.model.config().in_channels;
    let (base_target, stored_patch) = match &loaded.padding {
        Some(p) => (p.target_hw, p.patch.clone()),
        None => (cfg.data.target_hw(), None),
    };
    let mask_dir = cfg.out.join("masks");
    ensure_dir(&mask_dir)?;
    for path in images {
        let image = load_image(path, channels)?;
        let hw = (image.height, image.width);
        let sample = SegmentationSample::new(stem_of(path), image, vec![0; hw.0 * hw.1])?;
        let target = bounding_target(hw, base_target);
        let patch = match &stored_patch {
            Some(p) if p.channels == channels => Some(p.clone()),
            _ => {
                let own = PatchSource { image_id: None, ..cfg.data.patch.clone() };
                padding_patch(std::slice::from_ref(&sample), target, &own)?
            }
        };
        let padded = pad_dataset(std::slice::from_ref(&sample), target, patch.as_ref())?.remove(0);
        let normalized = SegmentationSample { image: loaded.norm.normalize(&padded.image)?, ..padded.clone() };
        let (x, _) = batch_tensor::<f32>(&[&normalized])?;
        let mut pred = loaded.model.predict(&x)?;
        let (mut h, mut w) = target;
        if cfg.data.crop_back {
            pred = crop_labels(&pred, target, padded.offset, hw)?;
            (h, w) = hw;
        }
        let dest = mask_dir.join(format!("{}.png", sample.id));
        save_mask(&dest, &pred, h, w, &scheme)?;
        println!("{} -> {} ({w}x{h})", path.display(), dest.display());
    }
    Ok(())
}

pub fn cross_validate(cfg: &RunConfig, k: usize) -> Result<()> {
    let scheme = cfg.data.scheme()?;
    check_classes(&scheme, &cfg.model)?;
    let samples = load_dataset(cfg.data.root()?, &scheme, cfg.data.channels)?;
    let target = cfg.data.target_hw();
    let patch = padding_patch(&samples, target, &cfg.data.patch)?;
    let padded = pad_dataset(&samples, target, patch.as_ref())?;
    let opts = CvOptions { k, seed: cfg.data.split_seed, scheme };
    let result = run_cv::<f32>(&padded, &cfg.model, &cfg.train, &opts)?;
    ensure_dir(&cfg.out)?;
    echo_config(cfg)?;
    for f in &result.folds {
        emit_report(&f.report, &cfg.out.join("folds"), &format!("fold{}", f.fold))?;
        println!("fold {}: {} train, {} held out, m-IoU {:.3}%", f.fold, f.train_count, f.val_count, f.report.mean_iou);
    }
    write_json(&cfg.out.join("cv.json"), &result)?;
    let line = format!("m-IoU over {k} folds: {}", result.summary.formatted());
    write_text(&cfg.out.join("cv_summary.txt"), &format!("{line}\n"))?;
    println!("{line}");
    Ok(())
}

pub fn gradcheck(cfg: &RunConfig, instances: usize, composites: bool) -> Result<()> {
    let report = run_gradcheck(&GradcheckOptions { instances, seed: cfg.train.seed, composites })?;
    print!("{}", report.to_table());
    match report.checks.iter().find(|c| !c.passed()) {
        Some(c) => Err(Error::GradientCheck { op: c.op.clone(), error: c.max_rel_error }),
        None => Ok(()),
    }
}

pub fn summary(cfg: &RunConfig, height: Option<usize>, width: Option<usize>) -> Result<()> {
    let (th, tw) = cfg.data.target_hw();
    let model = SegmentationModel::<f32>::new(cfg.model.clone())?;
    let s = model.summary(height.unwrap_or(th), width.unwrap_or(tw))?;
    print!("{}", s.to_text());
    write_json(&cfg.out.join("model_summary.json"), &s)
}
