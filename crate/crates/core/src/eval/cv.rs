use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::evaluate::{evaluate_model, EvalOptions};
use super::report::{CvSummary, IouReport};
use crate::data::{kfold, ClassScheme, NormalizationStats, SegmentationSample};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tensor::Element;
use crate::train::{fit, FitOptions, TrainConfig, TrainState};

#[derive(Debug, Clone)]
pub struct CvOptions {
    pub k: usize,
    /// Seed for the fold assignment.
    pub seed: u64,
    pub scheme: ClassScheme,
}

impl Default for CvOptions {
    fn default() -> Self {
        CvOptions { k: 5, seed: 0, scheme: ClassScheme::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    /// 1-based fold index.
    pub fold: usize,
    pub train_count: usize,
    pub val_count: usize,
    pub report: IouReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub folds: Vec<FoldResult>,
    pub summary: CvSummary,
}

fn run_fold<T: Element>(
    train: &[SegmentationSample],
    val: &[SegmentationSample],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    scheme: &ClassScheme,
) -> Result<IouReport> {
    let stats = NormalizationStats::compute(train.iter().map(|s| &s.image))?;
    let mut state = TrainState::<T>::new(model_cfg.clone(), train_cfg.seed)?;
    let opts = FitOptions { scheme: Some(scheme.clone()), ..Default::default() };
    fit(&mut state, train, &[], &stats, train_cfg, &opts)?;
    let eval = EvalOptions { scheme: scheme.clone(), ..Default::default() };
    Ok(evaluate_model(&state.model, val, &stats, &eval)?.report)
}

/// Trains a fresh model on every `k - 1` folds and evaluates it on the held-out fold.
pub fn cross_validate<T: Element>(
    samples: &[SegmentationSample],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    opts: &CvOptions,
) -> Result<CvResult> {
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    let plan = kfold(&ids, opts.k, opts.seed)?;
    let by_id: HashMap<&str, &SegmentationSample> = samples.iter().map(|s| (s.id.as_str(), s)).collect();
    let pick =
        |ids: &[String]| -> Vec<SegmentationSample> { ids.iter().map(|id| by_id[id.as_str()].clone()).collect() };
    let mut folds = Vec::with_capacity(opts.k);
    for i in 0..opts.k {
        let (train_ids, val_ids) = plan.fold(i)?;
        let (train, val) = (pick(&train_ids), pick(&val_ids));
        log::info!("fold {}/{}: {} train, {} held out", i + 1, opts.k, train.len(), val.len());
        let report = run_fold::<T>(&train, &val, model_cfg, train_cfg, &opts.scheme)
            .map_err(|e| Error::Fold { fold: i + 1, source: Box::new(e) })?;
        folds.push(FoldResult { fold: i + 1, train_count: train.len(), val_count: val.len(), report });
    }
    let summary = CvSummary::new(folds.iter().map(|f| f.report.mean_iou).collect())?;
    Ok(CvResult { folds, summary })
}
