//! Evaluation metrics: pixel confusion counts, recall/precision/F1, mean
//! IoU over the two classes, and mean absolute error.
//!
//! Conventions (also stamped into report footers): ratios with a zero
//! denominator evaluate to 0; a class absent from both prediction and
//! ground truth contributes IoU 1; dataset-level metrics accumulate one
//! global confusion matrix (micro-averaging).

use crate::tensor::{Real, Tensor};
use crate::{CoreError, Result};
use alloc::format;
use alloc::string::String;

pub const METRIC_CONVENTIONS: &str = "micro-averaged confusion; zero-denominator ratios = 0; \
class absent from prediction and ground truth counts IoU 1; threshold at 0.5";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub true_pos: u64,
    pub false_pos: u64,
    pub true_neg: u64,
    pub false_neg: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.true_pos + self.false_pos + self.true_neg + self.false_neg
    }
}

impl core::ops::AddAssign for ConfusionMatrix {
    fn add_assign(&mut self, rhs: Self) {
        self.true_pos += rhs.true_pos;
        self.false_pos += rhs.false_pos;
        self.true_neg += rhs.true_neg;
        self.false_neg += rhs.false_neg;
    }
}

fn check_shapes<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>, op: &'static str) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(CoreError::ShapeMismatch {
            op,
            detail: format!("prediction {:?} vs mask {:?}", pred.shape(), gt.shape()),
        });
    }
    Ok(())
}

/// Binarize the prediction at `threshold` (>= is positive) and count pixels
/// against the mask (>= 0.5 is foreground).
pub fn confusion<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>, threshold: f64) -> Result<ConfusionMatrix> {
    check_shapes(pred, gt, "confusion")?;
    let thr = T::fr(threshold);
    let half = T::fr(0.5);
    let mut cm = ConfusionMatrix::default();
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        match (p >= thr, g >= half) {
            (true, true) => cm.true_pos += 1,
            (true, false) => cm.false_pos += 1,
            (false, true) => cm.false_neg += 1,
            (false, false) => cm.true_neg += 1,
        }
    }
    Ok(cm)
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatioMetrics {
    pub recall_pct: f64,
    pub precision_pct: f64,
    pub f1_pct: f64,
}

/// Recall = TP/(TP+FN), Precision = TP/(TP+FP), F1 = 2PR/(P+R), as
/// percentages; zero denominators yield 0.
pub fn metrics_from_confusion(cm: &ConfusionMatrix) -> RatioMetrics {
    let recall = ratio(cm.true_pos, cm.true_pos + cm.false_neg);
    let precision = ratio(cm.true_pos, cm.true_pos + cm.false_pos);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    RatioMetrics {
        recall_pct: recall * 100.0,
        precision_pct: precision * 100.0,
        f1_pct: f1 * 100.0,
    }
}

/// Mean IoU over the two classes (foreground and background, the
/// background class swapping the positive label), as a percentage.
pub fn miou_from_confusion(cm: &ConfusionMatrix) -> f64 {
    let fg_den = cm.true_pos + cm.false_pos + cm.false_neg;
    let fg = if fg_den == 0 { 1.0 } else { cm.true_pos as f64 / fg_den as f64 };
    let bg_den = cm.true_neg + cm.false_neg + cm.false_pos;
    let bg = if bg_den == 0 { 1.0 } else { cm.true_neg as f64 / bg_den as f64 };
    (fg + bg) / 2.0 * 100.0
}

pub fn miou<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>, threshold: f64) -> Result<f64> {
    Ok(miou_from_confusion(&confusion(pred, gt, threshold)?))
}

/// Mean absolute pixel difference between a probability map and the mask.
pub fn mae<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<f64> {
    check_shapes(pred, gt, "mae")?;
    let mut acc = 0.0f64;
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        acc += (p.to_f64() - g.to_f64()).abs();
    }
    Ok(acc / pred.len() as f64)
}

/// One result row: ratio metrics as percentages, MAE in [0, 1], and the
/// optional cost columns.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub recall_pct: f64,
    pub precision_pct: f64,
    pub miou_pct: f64,
    pub mae: f64,
    pub f1_pct: f64,
    pub params_mb: Option<f64>,
    pub flops_g: Option<f64>,
    pub inference_s: Option<f64>,
}

pub const REPORT_CSV_HEADER: &str = "model,recall,precision,miou,mae,f1,params_mb,flops_g,inference_s";

impl MetricsReport {
    pub fn from_confusion(cm: &ConfusionMatrix, mae: f64) -> Self {
        let r = metrics_from_confusion(cm);
        Self {
            recall_pct: r.recall_pct,
            precision_pct: r.precision_pct,
            miou_pct: miou_from_confusion(cm),
            mae,
            f1_pct: r.f1_pct,
            params_mb: None,
            flops_g: None,
            inference_s: None,
        }
    }

    pub fn csv_row(&self, model: &str) -> String {
        let opt = |v: Option<f64>, prec: usize| match v {
            Some(x) => format!("{x:.prec$}"),
            None => String::new(),
        };
        format!(
            "{model},{:.4},{:.4},{:.4},{:.6},{:.4},{},{},{}",
            self.recall_pct,
            self.precision_pct,
            self.miou_pct,
            self.mae,
            self.f1_pct,
            opt(self.params_mb, 3),
            opt(self.flops_g, 3),
            opt(self.inference_s, 4),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use alloc::vec::Vec;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn perfect_prediction_has_no_errors() {
        let gt = t(&[1, 1, 2, 2], vec![1.0, 0.0, 1.0, 0.0]);
        let cm = confusion(&gt, &gt, 0.5).unwrap();
        assert_eq!(cm.false_pos, 0);
        assert_eq!(cm.false_neg, 0);
        assert_eq!(miou_from_confusion(&cm), 100.0);
        let m = metrics_from_confusion(&cm);
        assert_eq!((m.recall_pct, m.precision_pct, m.f1_pct), (100.0, 100.0, 100.0));
    }

    #[test]
    fn inverted_prediction_is_total_confusion() {
        let gt = t(&[1, 1, 2, 2], vec![1.0, 1.0, 0.0, 0.0]);
        let pred = t(&[1, 1, 2, 2], vec![0.0, 0.0, 1.0, 1.0]);
        let cm = confusion(&pred, &gt, 0.5).unwrap();
        assert_eq!(cm.true_pos, 0);
        assert_eq!(cm.true_neg, 0);
        assert_eq!(miou_from_confusion(&cm), 0.0);
        assert_eq!(mae(&pred, &gt).unwrap(), 1.0);
    }

    #[test]
    fn hand_counted_two_by_two() {
        let pred = t(&[1, 1, 2, 2], vec![0.9, 0.4, 0.6, 0.1]);
        let gt = t(&[1, 1, 2, 2], vec![1.0, 1.0, 0.0, 0.0]);
        let cm = confusion(&pred, &gt, 0.5).unwrap();
        assert_eq!(
            (cm.true_pos, cm.false_neg, cm.false_pos, cm.true_neg),
            (1, 1, 1, 1)
        );
    }

    #[test]
    fn ratio_example_values() {
        let cm = ConfusionMatrix {
            true_pos: 8,
            false_pos: 2,
            false_neg: 4,
            true_neg: 0,
        };
        let m = metrics_from_confusion(&cm);
        assert!((m.recall_pct - 100.0 * 8.0 / 12.0).abs() < 1e-12);
        assert!((m.precision_pct - 80.0).abs() < 1e-12);
        assert!((m.f1_pct - 100.0 * 2.0 * (8.0 / 12.0) * 0.8 / (8.0 / 12.0 + 0.8)).abs() < 1e-12);
    }

    #[test]
    fn f1_equals_p_when_p_equals_r() {
        let cm = ConfusionMatrix {
            true_pos: 6,
            false_pos: 2,
            false_neg: 2,
            true_neg: 6,
        };
        let m = metrics_from_confusion(&cm);
        assert!((m.precision_pct - m.recall_pct).abs() < 1e-12);
        assert!((m.f1_pct - m.precision_pct).abs() < 1e-12);
    }

    #[test]
    fn zero_denominators_yield_zero() {
        let cm = ConfusionMatrix {
            true_pos: 0,
            false_pos: 0,
            false_neg: 0,
            true_neg: 4,
        };
        let m = metrics_from_confusion(&cm);
        assert_eq!((m.recall_pct, m.precision_pct, m.f1_pct), (0.0, 0.0, 0.0));
        // both classes empty on the foreground side: IoU 1 convention
        assert_eq!(miou_from_confusion(&cm), 100.0);
    }

    #[test]
    fn offset_mae() {
        let gt = t(&[1, 1, 1, 4], vec![0.5, 0.5, 0.5, 0.5]);
        let pred = t(&[1, 1, 1, 4], vec![0.6, 0.4, 0.6, 0.4]);
        assert!((mae(&pred, &gt).unwrap() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn sixteen_pixel_miou_against_pixel_sets() {
        // gt: 8 foreground pixels; pred hits 6 of them plus 1 stray.
        let mut gt_v = vec![0.0; 16];
        for i in 0..8 {
            gt_v[i] = 1.0;
        }
        let mut pr_v = vec![0.0; 16];
        for i in 0..6 {
            pr_v[i] = 1.0;
        }
        pr_v[12] = 1.0;
        let gt = t(&[1, 1, 4, 4], gt_v.clone());
        let pred = t(&[1, 1, 4, 4], pr_v.clone());

        // brute-force set intersection oracle
        let fg_inter = gt_v.iter().zip(&pr_v).filter(|(a, b)| **a == 1.0 && **b == 1.0).count();
        let fg_union = gt_v.iter().zip(&pr_v).filter(|(a, b)| **a == 1.0 || **b == 1.0).count();
        let bg_inter = gt_v.iter().zip(&pr_v).filter(|(a, b)| **a == 0.0 && **b == 0.0).count();
        let bg_union = gt_v.iter().zip(&pr_v).filter(|(a, b)| **a == 0.0 || **b == 0.0).count();
        let expect = 50.0 * (fg_inter as f64 / fg_union as f64 + bg_inter as f64 / bg_union as f64);

        let got = miou(&pred, &gt, 0.5).unwrap();
        assert!((got - expect).abs() < 1e-12);
        assert!((got - 100.0 * (6.0 / 9.0 + 7.0 / 10.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn csv_row_column_count_matches_header() {
        let r = MetricsReport::from_confusion(&ConfusionMatrix::default(), 0.0);
        let row = r.csv_row("u2net");
        assert_eq!(row.split(',').count(), REPORT_CSV_HEADER.split(',').count());
    }
}
