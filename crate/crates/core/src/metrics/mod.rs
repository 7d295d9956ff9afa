//! Segmentation overlap metrics and image-quality metrics.

mod embed;
mod fid;
mod image;

use ndarray::ArrayView;
use serde::{Deserialize, Serialize};

use crate::ingest::{Tissue, TissueLabelMap};
use crate::{Error, Result};

pub use embed::{embed_features, FeatureExtractor, RandomConvEmbedder, EMBEDDING_DIM};
pub use fid::{fid, fid_from_moments, FeatureSet, Moments, SHRINKAGE};
pub use image::{default_ssim_window, gaussian_window, psnr, ssim, ssim_volume, SsimParams};

/// One-vs-rest pixel counts for a single class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn from_labels<D: ndarray::Dimension>(pred: ArrayView<u8, D>, gt: ArrayView<u8, D>, class: u8) -> Result<Self> {
        if pred.shape() != gt.shape() {
            return Err(Error::Data(format!(
                "prediction shape {:?} does not match ground truth {:?}",
                pred.shape(),
                gt.shape()
            )));
        }
        let mut c = Self::default();
        for (&p, &g) in pred.iter().zip(gt.iter()) {
            match (p == class, g == class) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Class absent from both prediction and ground truth.
    pub fn is_empty_pair(&self) -> bool {
        self.tp + self.fp + self.fn_ == 0
    }
}

/// DSC, accuracy, sensitivity and specificity of one class.
///
/// A ratio whose denominator is zero (class absent from both maps, or
/// present everywhere) is reported as 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricQuad {
    pub dsc: f64,
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

impl MetricQuad {
    pub fn from_counts(c: &ConfusionCounts) -> Self {
        Self {
            dsc: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
            accuracy: ratio(c.tp + c.tn, c.total()),
            sensitivity: ratio(c.tp, c.tp + c.fn_),
            specificity: ratio(c.tn, c.tn + c.fp),
        }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.dsc, self.accuracy, self.sensitivity, self.specificity]
    }

    pub const NAMES: [&'static str; 4] = ["DSC", "ACC", "SENS", "SPEC"];
}

pub fn seg_metrics(pred: &TissueLabelMap, gt: &TissueLabelMap, tissue: Tissue) -> Result<MetricQuad> {
    let counts = ConfusionCounts::from_labels(pred.labels().view(), gt.labels().view(), tissue.id())?;
    Ok(MetricQuad::from_counts(&counts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn two_by_two_hand_count() {
        let pred = array![[1u8, 1], [0, 0]];
        let gt = array![[0u8, 1], [0, 1]];
        let c = ConfusionCounts::from_labels(pred.view(), gt.view(), 1).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 1, fp: 1, fn_: 1, tn: 1 });
        let m = MetricQuad::from_counts(&c);
        assert_eq!(m.as_array(), [0.5; 4]);
    }

    #[test]
    fn perfect_and_empty() {
        let gt = array![[0u8, 1], [2, 3]];
        let c = ConfusionCounts::from_labels(gt.view(), gt.view(), 1).unwrap();
        assert_eq!(MetricQuad::from_counts(&c).as_array(), [1.0; 4]);
        let c = ConfusionCounts::from_labels(gt.view(), gt.view(), 4).unwrap();
        assert!(c.is_empty_pair());
        let m = MetricQuad::from_counts(&c);
        assert_eq!((m.dsc, m.sensitivity), (1.0, 1.0));
    }

    #[test]
    fn shape_mismatch() {
        let a = ndarray::Array2::<u8>::zeros((2, 2));
        let b = ndarray::Array2::<u8>::zeros((2, 3));
        assert!(matches!(ConfusionCounts::from_labels(a.view(), b.view(), 0), Err(Error::Data(_))));
    }
}
