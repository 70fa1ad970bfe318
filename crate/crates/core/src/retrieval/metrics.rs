//! Segmentation and depth metrics, accumulated over a whole evaluation set.

use crate::error::{Error, Result};
use crate::incontext::LabelMap;
use crate::tensor_store::IGNORE;

/// Ground-truth × prediction pixel counts over non-ignored ground truth.
///
/// A pixel without a prediction ([`IGNORE`] in the prediction map) counts as
/// a false negative for its ground-truth class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
    unpredicted: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
            unpredicted: vec![0; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn add(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
            return Err(Error::Shape(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.height(),
                pred.width(),
                gt.height(),
                gt.width()
            )));
        }
        let c = self.classes;
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            if g == IGNORE {
                continue;
            }
            if g as usize >= c {
                return Err(Error::LabelRange { label: g, classes: c });
            }
            if p == IGNORE {
                self.unpredicted[g as usize] += 1;
                continue;
            }
            if p as usize >= c {
                return Err(Error::LabelRange { label: p, classes: c });
            }
            self.counts[g as usize * c + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.classes, other.classes, "confusion matrices differ in class count");
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        for (a, b) in self.unpredicted.iter_mut().zip(&other.unpredicted) {
            *a += b;
        }
    }

    /// (TP, FP, FN) of one class.
    pub fn class_counts(&self, class: usize) -> (u64, u64, u64) {
        let c = self.classes;
        let tp = self.get(class, class);
        let fp = (0..c).filter(|&g| g != class).map(|g| self.get(g, class)).sum();
        let fn_ = (0..c).filter(|&p| p != class).map(|p| self.get(class, p)).sum::<u64>()
            + self.unpredicted[class];
        (tp, fp, fn_)
    }

    /// IoU per class; `None` for classes absent from both ground truth and prediction.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|c| {
                let (tp, fp, fn_) = self.class_counts(c);
                let denom = tp + fp + fn_;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect()
    }

    /// Mean IoU over classes present in ground truth or prediction (0 if none).
    pub fn mean_iou(&self) -> f64 {
        let present: Vec<f64> = self.per_class_iou().into_iter().flatten().collect();
        if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        }
    }

    /// Pixels with non-ignored ground truth.
    pub fn evaluated_pixels(&self) -> u64 {
        self.counts.iter().sum::<u64>() + self.unpredicted.iter().sum::<u64>()
    }
}

/// Per-class IoU and mean IoU of a single prediction.
pub fn miou(pred: &LabelMap, gt: &LabelMap, classes: usize) -> Result<(Vec<Option<f64>>, f64)> {
    let mut cm = ConfusionMatrix::new(classes);
    cm.add(pred, gt)?;
    Ok((cm.per_class_iou(), cm.mean_iou()))
}

/// Running squared-error sum for depth evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DepthAccumulator {
    pub sum_sq: f64,
    pub count: u64,
}

impl DepthAccumulator {
    pub fn add(&mut self, pred: &[f64], gt: &[f64], valid: &[bool]) -> Result<()> {
        if pred.len() != gt.len() || gt.len() != valid.len() {
            return Err(Error::Shape(format!(
                "depth maps of {}, {} and mask of {} pixels",
                pred.len(),
                gt.len(),
                valid.len()
            )));
        }
        for ((&p, &g), &ok) in pred.iter().zip(gt).zip(valid) {
            if ok {
                self.sum_sq += (p - g) * (p - g);
                self.count += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &DepthAccumulator) {
        self.sum_sq += other.sum_sq;
        self.count += other.count;
    }

    pub fn rmse(&self) -> Result<f64> {
        if self.count == 0 {
            return Err(Error::Degenerate("no valid depth pixel".into()));
        }
        Ok((self.sum_sq / self.count as f64).sqrt())
    }
}

/// Root mean squared error over the valid pixels.
pub fn rmse_depth(pred: &[f64], gt: &[f64], valid: &[bool]) -> Result<f64> {
    let mut acc = DepthAccumulator::default();
    acc.add(pred, gt, valid)?;
    acc.rmse()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(w: usize, data: &[u16]) -> LabelMap {
        LabelMap::new(data.len() / w, w, data.to_vec()).unwrap()
    }

    #[test]
    fn perfect_prediction() {
        let gt = map(2, &[0, 1, 1, 2]);
        let (iou, mean) = miou(&gt, &gt, 4).unwrap();
        assert_eq!(iou, vec![Some(1.0), Some(1.0), Some(1.0), None]);
        assert_eq!(mean, 1.0);
    }

    #[test]
    fn disjoint_prediction() {
        let (iou, mean) = miou(&map(2, &[0, 0, 0, 0]), &map(2, &[1, 1, 1, 1]), 2).unwrap();
        assert_eq!(iou, vec![Some(0.0), Some(0.0)]);
        assert_eq!(mean, 0.0);
    }

    #[test]
    fn hand_counted_example() {
        let (iou, mean) = miou(&map(4, &[0, 1, 1, 1]), &map(4, &[0, 0, 1, 1]), 2).unwrap();
        assert_eq!(iou, vec![Some(0.5), Some(2.0 / 3.0)]);
        assert!((mean - 0.583_333_333_333_333_4).abs() < 1e-12);
    }

    #[test]
    fn ignored_ground_truth_is_skipped() {
        let (iou, _) = miou(&map(2, &[1, 1]), &map(2, &[IGNORE, 1]), 2).unwrap();
        assert_eq!(iou, vec![None, Some(1.0)]);
    }

    #[test]
    fn missing_prediction_is_a_false_negative() {
        let mut cm = ConfusionMatrix::new(2);
        cm.add(&map(2, &[IGNORE, 1]), &map(2, &[1, 1])).unwrap();
        assert_eq!(cm.class_counts(1), (1, 0, 1));
        assert_eq!(cm.evaluated_pixels(), 2);
    }

    #[test]
    fn out_of_range_label() {
        assert!(matches!(
            miou(&map(1, &[0]), &map(1, &[3]), 2),
            Err(Error::LabelRange { label: 3, classes: 2 })
        ));
    }

    #[test]
    fn rmse_cases() {
        let gt = [1.0, 2.0, 3.0, 4.0];
        let valid = [true; 4];
        assert_eq!(rmse_depth(&gt, &gt, &valid).unwrap(), 0.0);
        let shifted: Vec<f64> = gt.iter().map(|v| v - 0.25).collect();
        assert!((rmse_depth(&shifted, &gt, &valid).unwrap() - 0.25).abs() < 1e-15);
        assert!(matches!(rmse_depth(&gt, &gt, &[false; 4]), Err(Error::Degenerate(_))));
    }
}
