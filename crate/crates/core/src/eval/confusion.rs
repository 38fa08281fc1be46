use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `K x K` pixel counts; entry `(g, p)` counts ground truth `g` predicted as `p`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        ConfusionMatrix { k, counts: vec![0; k * k] }
    }

    pub fn from_masks(k: usize, predicted: &[u8], target: &[u8]) -> Result<Self> {
        let mut cm = Self::new(k);
        cm.update(predicted, target)?;
        Ok(cm)
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.k + predicted]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn update(&mut self, predicted: &[u8], target: &[u8]) -> Result<()> {
        if predicted.len() != target.len() {
            return Err(Error::shape(
                "confusion",
                format!("{} predicted vs {} target pixels", predicted.len(), target.len()),
            ));
        }
        if let Some(&bad) = predicted.iter().chain(target).find(|&&c| c as usize >= self.k) {
            return Err(Error::InvalidArgument(format!("class {bad} out of range for {} classes", self.k)));
        }
        for (&p, &t) in predicted.iter().zip(target) {
            self.counts[t as usize * self.k + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.k != self.k {
            return Err(Error::shape(
                "confusion",
                format!("cannot merge {}x{} into {}x{}", other.k, other.k, self.k, self.k),
            ));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn support(&self, class: usize) -> u64 {
        (0..self.k).map(|p| self.get(class, p)).sum()
    }

    fn predicted_count(&self, class: usize) -> u64 {
        (0..self.k).map(|g| self.get(g, class)).sum()
    }

    /// `tp / (row + col - tp)`, or `None` when the class is absent from both
    /// ground truth and prediction.
    pub fn class_iou(&self, class: usize) -> Option<f64> {
        let tp = self.get(class, class);
        let union = self.support(class) + self.predicted_count(class) - tp;
        (union > 0).then(|| tp as f64 / union as f64)
    }

    /// Mean IoU over classes present in ground truth or prediction.
    pub fn mean_iou(&self) -> Result<f64> {
        let ious: Vec<f64> = (0..self.k).filter_map(|c| self.class_iou(c)).collect();
        if ious.is_empty() {
            return Err(Error::InvalidArgument("mean IoU of an empty confusion matrix".into()));
        }
        Ok(ious.iter().sum::<f64>() / ious.len() as f64)
    }
}

pub fn class_iou(cm: &ConfusionMatrix, class: usize) -> Option<f64> {
    cm.class_iou(class)
}

pub fn mean_iou(cm: &ConfusionMatrix) -> Result<f64> {
    cm.mean_iou()
}
