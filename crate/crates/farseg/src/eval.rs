//! Confusion-matrix evaluation: per-class IoU, mean IoU, and
//! foreground-ratio diagnostics.

use ndarray::ArrayView2;
use serde::Serialize;

use crate::error::{Error, Result};

/// K x K count matrix; rows index ground truth, columns index prediction.
/// Matrices over disjoint pixel sets merge by addition, so evaluation can be
/// sharded and combined.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: Vec<u64>,
    num_classes: usize,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            counts: vec![0; num_classes * num_classes],
            num_classes,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Tallies one prediction/ground-truth pair, skipping `ignore_label`
    /// pixels.
    pub fn accumulate(
        &mut self,
        pred: ArrayView2<u8>,
        gt: ArrayView2<u8>,
        ignore_label: Option<u8>,
    ) -> Result<()> {
        if pred.dim() != gt.dim() {
            return Err(Error::Shape(format!(
                "prediction {:?} and ground truth {:?} disagree",
                pred.dim(),
                gt.dim()
            )));
        }
        let k = self.num_classes;
        for (&p, &g) in pred.iter().zip(gt.iter()) {
            if Some(g) == ignore_label {
                continue;
            }
            if (g as usize) >= k {
                return Err(Error::Data(format!(
                    "ground-truth label {g} outside the {k}-class range"
                )));
            }
            if (p as usize) >= k {
                return Err(Error::Data(format!(
                    "predicted label {p} outside the {k}-class range"
                )));
            }
            self.counts[(g as usize) * k + (p as usize)] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.num_classes, other.num_classes, "class count mismatch");
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    /// Per-class intersection over union; classes absent from both
    /// prediction and ground truth (zero union) are `None` and excluded
    /// from means.
    pub fn iou_per_class(&self) -> Vec<Option<f64>> {
        let k = self.num_classes;
        (0..k)
            .map(|c| {
                let tp = self.count(c, c);
                let fp: u64 = (0..k).filter(|&g| g != c).map(|g| self.count(g, c)).sum();
                let fn_: u64 = (0..k).filter(|&p| p != c).map(|p| self.count(c, p)).sum();
                let union = tp + fp + fn_;
                if union == 0 {
                    None
                } else {
                    Some(tp as f64 / union as f64)
                }
            })
            .collect()
    }

    /// Arithmetic mean over defined classes. With `include_background`
    /// false, class 0 is dropped from the mean (the foreground-only view).
    pub fn mean_iou(&self, include_background: bool) -> Result<f64> {
        let ious = self.iou_per_class();
        let start = usize::from(!include_background);
        let defined: Vec<f64> = ious[start..].iter().filter_map(|x| *x).collect();
        if defined.is_empty() {
            return Err(Error::Data(
                "no class has a defined IoU (zero union everywhere)".into(),
            ));
        }
        Ok(defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

/// Fraction of non-background, non-ignored pixels in one mask.
pub fn foreground_ratio(mask: ArrayView2<u8>, ignore_label: Option<u8>) -> f64 {
    let mut fg = 0usize;
    let mut valid = 0usize;
    for &v in mask.iter() {
        if Some(v) == ignore_label {
            continue;
        }
        valid += 1;
        if v != 0 {
            fg += 1;
        }
    }
    if valid == 0 {
        0.0
    } else {
        fg as f64 / valid as f64
    }
}

/// Per-image and aggregate foreground fractions for a whole dataset.
pub fn dataset_foreground_ratio<'a>(
    masks: impl Iterator<Item = ArrayView2<'a, u8>>,
    ignore_label: Option<u8>,
) -> (Vec<f64>, f64) {
    let mut per_image = Vec::new();
    let mut fg = 0u64;
    let mut valid = 0u64;
    for mask in masks {
        per_image.push(foreground_ratio(mask.view(), ignore_label));
        for &v in mask.iter() {
            if Some(v) == ignore_label {
                continue;
            }
            valid += 1;
            if v != 0 {
                fg += 1;
            }
        }
    }
    let aggregate = if valid == 0 { 0.0 } else { fg as f64 / valid as f64 };
    (per_image, aggregate)
}

/// JSON-serializable evaluation summary.
#[derive(Debug, Serialize)]
pub struct EvalReport {
    pub num_classes: usize,
    pub pixels: u64,
    /// `null` entries are zero-union classes, excluded from both means.
    pub per_class_iou: Vec<Option<f64>>,
    pub mean_iou_all_classes: f64,
    pub mean_iou_foreground: Option<f64>,
    pub undefined_classes: Vec<usize>,
    pub foreground_ratio: f64,
    pub images: usize,
    pub per_image_foreground_ratio: Vec<f64>,
}

impl EvalReport {
    pub fn from_matrix(
        cm: &ConfusionMatrix,
        per_image_fg: Vec<f64>,
        aggregate_fg: f64,
    ) -> Result<Self> {
        let per_class_iou = cm.iou_per_class();
        let undefined = per_class_iou
            .iter()
            .enumerate()
            .filter_map(|(c, iou)| iou.is_none().then_some(c))
            .collect();
        Ok(EvalReport {
            num_classes: cm.num_classes(),
            pixels: cm.total(),
            mean_iou_all_classes: cm.mean_iou(true)?,
            mean_iou_foreground: cm.mean_iou(false).ok(),
            per_class_iou,
            undefined_classes: undefined,
            foreground_ratio: aggregate_fg,
            images: per_image_fg.len(),
            per_image_foreground_ratio: per_image_fg,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn perfect_prediction_gives_unit_ious() {
        let gt = array![[0u8, 1], [2, 1]];
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(gt.view(), gt.view(), None).unwrap();
        assert!(cm
            .iou_per_class()
            .iter()
            .all(|iou| iou == &Some(1.0)));
        assert_eq!(cm.mean_iou(true).unwrap(), 1.0);
    }

    #[test]
    fn hand_counted_two_class_example() {
        // gt = [1,1,0,0], pred = [1,0,0,0]:
        // class 1: tp=1 fp=0 fn=1 -> 1/2; class 0: tp=2 fp=1 fn=0 -> 2/3
        let gt = array![[1u8, 1, 0, 0]];
        let pred = array![[1u8, 0, 0, 0]];
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(pred.view(), gt.view(), None).unwrap();
        let ious = cm.iou_per_class();
        assert!((ious[1].unwrap() - 0.5).abs() < 1e-15);
        assert!((ious[0].unwrap() - 2.0 / 3.0).abs() < 1e-15);
        let miou = cm.mean_iou(true).unwrap();
        assert!((miou - (0.5 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn absent_class_is_undefined_and_excluded() {
        let gt = array![[0u8, 0]];
        let pred = array![[0u8, 0]];
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(pred.view(), gt.view(), None).unwrap();
        let ious = cm.iou_per_class();
        assert_eq!(ious[1], None);
        assert_eq!(ious[2], None);
        assert_eq!(cm.mean_iou(true).unwrap(), 1.0);
        assert!(cm.mean_iou(false).is_err(), "no defined foreground class");
    }

    #[test]
    fn merge_equals_joint_accumulation() {
        let gt_a = array![[0u8, 1], [1, 1]];
        let pred_a = array![[0u8, 1], [0, 1]];
        let gt_b = array![[1u8, 0], [0, 0]];
        let pred_b = array![[1u8, 1], [0, 0]];

        let mut joint = ConfusionMatrix::new(2);
        joint.accumulate(pred_a.view(), gt_a.view(), None).unwrap();
        joint.accumulate(pred_b.view(), gt_b.view(), None).unwrap();

        let mut a = ConfusionMatrix::new(2);
        a.accumulate(pred_a.view(), gt_a.view(), None).unwrap();
        let mut b = ConfusionMatrix::new(2);
        b.accumulate(pred_b.view(), gt_b.view(), None).unwrap();
        a.merge(&b);
        assert_eq!(a, joint);
    }

    #[test]
    fn ignored_pixels_leave_matrix_unchanged() {
        let gt = array![[255u8, 255]];
        let pred = array![[0u8, 1]];
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(pred.view(), gt.view(), Some(255)).unwrap();
        assert_eq!(cm.total(), 0);
    }

    #[test]
    fn foreground_ratio_edges() {
        assert_eq!(foreground_ratio(array![[0u8, 0]].view(), None), 0.0);
        assert_eq!(foreground_ratio(array![[1u8, 2]].view(), None), 1.0);
        assert_eq!(
            foreground_ratio(array![[0u8, 3, 255, 255]].view(), Some(255)),
            0.5
        );
    }

    #[test]
    fn miou_invariant_under_class_permutation() {
        let gt = array![[0u8, 1, 2, 1, 0]];
        let pred = array![[0u8, 2, 2, 1, 1]];
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(pred.view(), gt.view(), None).unwrap();
        let base = cm.mean_iou(true).unwrap();

        // permutation (0 1 2) -> (1 2 0) applied to both
        let perm = |v: u8| (v + 1) % 3;
        let gt_p = gt.mapv(perm);
        let pred_p = pred.mapv(perm);
        let mut cm_p = ConfusionMatrix::new(3);
        cm_p.accumulate(pred_p.view(), gt_p.view(), None).unwrap();
        assert!((cm_p.mean_iou(true).unwrap() - base).abs() < 1e-15);
    }
}
