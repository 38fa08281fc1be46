use serde::{Deserialize, Serialize};

use super::sample::SegmentationSample;
use super::scheme::ClassScheme;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDistribution {
    pub names: Vec<String>,
    pub counts: Vec<u64>,
    pub fractions: Vec<f64>,
}

pub fn class_distribution(samples: &[SegmentationSample], scheme: &ClassScheme) -> Result<ClassDistribution> {
    if samples.is_empty() {
        return Err(Error::Data("class distribution of an empty sample list".into()));
    }
    let k = scheme.num_classes();
    let mut counts = vec![0u64; k];
    for s in samples {
        for &c in &s.mask {
            let slot =
                counts.get_mut(c as usize).ok_or_else(|| Error::Data(format!("{}: class {c} out of range", s.id)))?;
            *slot += 1;
        }
    }
    let total: u64 = counts.iter().sum();
    let fractions = counts.iter().map(|&c| c as f64 / total as f64).collect();
    Ok(ClassDistribution { names: scheme.names().iter().map(|s| s.to_string()).collect(), counts, fractions })
}

impl ClassDistribution {
    pub fn to_table(&self) -> String {
        let mut s = format!("{:<22} {:>14} {:>10}\n", "class", "pixels", "fraction");
        for ((n, c), f) in self.names.iter().zip(&self.counts).zip(&self.fractions) {
            s.push_str(&format!("{n:<22} {c:>14} {f:>10.6}\n"));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ImageBuf;

    #[test]
    fn all_sea_mask() {
        let s = SegmentationSample::new("a", ImageBuf::filled(2, 2, 1, 0.0), vec![0; 4]).unwrap();
        let d = class_distribution(&[s], &ClassScheme::default()).unwrap();
        assert_eq!(d.counts, vec![4, 0, 0, 0, 0]);
        assert_eq!(d.fractions[0], 1.0);
    }

    #[test]
    fn empty_rejected() {
        assert!(class_distribution(&[], &ClassScheme::default()).is_err());
    }
}
