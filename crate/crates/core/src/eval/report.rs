use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::confusion::ConfusionMatrix;
use crate::error::{Error, Result};
use crate::train::EpochLog;

/// `sea_surface` -> `Sea surface`, `oil_spill_lookalike` -> `Oil spill look-alike`.
pub fn display_name(name: &str) -> String {
    let spaced = name.replace('_', " ").replace("lookalike", "look-alike");
    let mut chars = spaced.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

/// Per-class and mean IoU in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouReport {
    pub classes: Vec<String>,
    /// `None` for classes absent from both ground truth and prediction.
    pub class_iou: Vec<Option<f64>>,
    pub mean_iou: f64,
    pub images: usize,
    pub support: Vec<u64>,
}

impl IouReport {
    pub fn new(cm: &ConfusionMatrix, class_names: &[&str], images: usize) -> Result<Self> {
        if class_names.len() != cm.num_classes() {
            return Err(Error::Config(format!(
                "{} class names for a {}-class confusion matrix",
                class_names.len(),
                cm.num_classes()
            )));
        }
        Ok(IouReport {
            classes: class_names.iter().map(|n| display_name(n)).collect(),
            class_iou: (0..cm.num_classes()).map(|c| cm.class_iou(c).map(|v| 100.0 * v)).collect(),
            mean_iou: 100.0 * cm.mean_iou()?,
            images,
            support: (0..cm.num_classes()).map(|c| cm.support(c)).collect(),
        })
    }

    /// `class,iou_percent` rows followed by a `mean` row; absent classes are blank.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,iou_percent\n");
        for (name, iou) in self.classes.iter().zip(&self.class_iou) {
            let v = iou.map(|v| format!("{v:.3}")).unwrap_or_default();
            let _ = writeln!(s, "{name},{v}");
        }
        let _ = writeln!(s, "mean,{:.3}", self.mean_iou);
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("{:<24} {:>10} {:>14}\n", "class", "IoU (%)", "pixels");
        for ((name, iou), n) in self.classes.iter().zip(&self.class_iou).zip(&self.support) {
            let v = iou.map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into());
            let _ = writeln!(s, "{name:<24} {v:>10} {n:>14}");
        }
        let _ = writeln!(s, "{:<24} {:>10.3}", "mean", self.mean_iou);
        let _ = writeln!(s, "images evaluated: {}", self.images);
        s
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `<stem>.csv` and `<stem>.json` next to each other.
pub fn emit_report(report: &IouReport, dir: &Path, stem: &str) -> Result<()> {
    write(&dir.join(format!("{stem}.csv")), &report.to_csv())?;
    write(&dir.join(format!("{stem}.json")), &serde_json::to_string_pretty(report)?)
}

pub fn learning_curves_csv(logs: &[EpochLog]) -> String {
    let mut s = String::from("epoch,train_loss,val_loss,val_miou,lr\n");
    let opt = |v: Option<f64>| v.map(|v| format!("{v}")).unwrap_or_default();
    for l in logs {
        let _ = writeln!(s, "{},{},{},{},{}", l.epoch, l.train_loss, opt(l.val_loss), opt(l.val_miou), l.lr);
    }
    s
}

pub fn emit_learning_curves(logs: &[EpochLog], path: &Path) -> Result<()> {
    write(path, &learning_curves_csv(logs))
}

/// Cross-validation summary over per-fold m-IoU values (percent).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvSummary {
    pub fold_miou: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation over folds.
    pub std: f64,
}

impl CvSummary {
    pub fn new(fold_miou: Vec<f64>) -> Result<Self> {
        if fold_miou.is_empty() {
            return Err(Error::InvalidArgument("no folds to summarize".into()));
        }
        let n = fold_miou.len() as f64;
        let mean = fold_miou.iter().sum::<f64>() / n;
        let std = (fold_miou.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        Ok(CvSummary { fold_miou, mean, std })
    }

    /// `"67.345 ± 1.407"`.
    pub fn formatted(&self) -> String {
        format_mean_std(self.mean, self.std)
    }
}

pub fn format_mean_std(mean: f64, std: f64) -> String {
    format!("{mean:.3} ± {std:.3}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_display_names() {
        let names = ["sea_surface", "oil_spill", "oil_spill_lookalike", "ship", "land"];
        let shown: Vec<_> = names.iter().map(|n| display_name(n)).collect();
        assert_eq!(shown, vec!["Sea surface", "Oil spill", "Oil spill look-alike", "Ship", "Land"]);
    }

    #[test]
    fn csv_layout() {
        let cm = ConfusionMatrix::from_masks(3, &[0, 1, 1], &[0, 0, 1]).unwrap();
        let r = IouReport::new(&cm, &["a", "b", "c"], 1).unwrap();
        let csv = r.to_csv();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], "class,iou_percent");
        assert_eq!(lines[1], "A,50.000");
        assert_eq!(lines[3], "C,");
        assert_eq!(lines[4], "mean,50.000");
    }

    #[test]
    fn mean_std_format() {
        let s = CvSummary::new(vec![66.0, 68.0]).unwrap();
        assert_eq!(s.formatted(), "67.000 ± 1.000");
        assert_eq!(format_mean_std(67.3454, 1.40749), "67.345 ± 1.407");
    }
}
