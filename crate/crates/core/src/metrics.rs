//! Binary change-detection metrics from a single dataset-level confusion
//! matrix. Change is the positive class.
//!
//! Any class-level ratio of the form `0/0` (a class that is absent and never
//! predicted) is defined as `1.0`. An F1 whose precision and recall are both
//! zero is `0.0`.

use ndarray::{ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionMatrix {
    pub fn new(tp: u64, fp: u64, tn: u64, fn_: u64) -> Self {
        Self { tp, fp, tn, fn_ }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn merge(&self, other: &ConfusionMatrix) -> ConfusionMatrix {
        ConfusionMatrix {
            tp: self.tp + other.tp,
            fp: self.fp + other.fp,
            tn: self.tn + other.tn,
            fn_: self.fn_ + other.fn_,
        }
    }

    /// The matrix seen with the class labels exchanged.
    pub fn swapped(&self) -> ConfusionMatrix {
        ConfusionMatrix {
            tp: self.tn,
            fp: self.fn_,
            tn: self.tp,
            fn_: self.fp,
        }
    }

    /// Adds the pixel counts of one prediction/ground-truth mask pair.
    pub fn accumulate(&mut self, pred: ArrayView2<'_, u8>, gt: ArrayView2<'_, u8>) -> Result<()> {
        if pred.dim() != gt.dim() {
            return Err(Error::Shape(format!(
                "prediction {:?} and ground truth {:?} differ",
                pred.dim(),
                gt.dim()
            )));
        }
        if let Some(v) = pred.iter().chain(gt.iter()).find(|v| **v > 1) {
            return Err(Error::Data(format!("mask value {v} is not binary")));
        }
        let mut counts = [0u64; 4];
        Zip::from(&pred).and(&gt).for_each(|p, g| {
            counts[((*p as usize) << 1) | *g as usize] += 1;
        });
        // index = pred * 2 + gt
        self.tn += counts[0];
        self.fn_ += counts[1];
        self.fp += counts[2];
        self.tp += counts[3];
        Ok(())
    }

    pub fn compute(&self) -> Result<MetricReport> {
        if self.total() == 0 {
            return Err(Error::Data("confusion matrix is empty".into()));
        }
        let (tp, fp, tn, fn_) = (self.tp, self.fp, self.tn, self.fn_);
        let prec_c = ratio(tp, tp + fp);
        let rec_c = ratio(tp, tp + fn_);
        let prec_n = ratio(tn, tn + fn_);
        let rec_n = ratio(tn, tn + fp);
        let f1_c = f1(prec_c, rec_c);
        let f1_n = f1(prec_n, rec_n);
        let iou_c = ratio(tp, tp + fp + fn_);
        let iou_n = ratio(tn, tn + fn_ + fp);
        Ok(MetricReport {
            oa: ratio(tp + tn, self.total()),
            m_prec: 0.5 * (prec_c + prec_n),
            m_rec: 0.5 * (rec_c + rec_n),
            m_f1: 0.5 * (f1_c + f1_n),
            m_iou: 0.5 * (iou_c + iou_n),
            prec_c,
            rec_c,
            f1_c,
            iou_c,
            prec_n,
            rec_n,
            f1_n,
            iou_n,
        })
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

fn f1(prec: f64, rec: f64) -> f64 {
    if prec + rec == 0.0 {
        0.0
    } else {
        2.0 * prec * rec / (prec + rec)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub oa: f64,
    pub m_prec: f64,
    pub m_rec: f64,
    pub m_f1: f64,
    pub m_iou: f64,
    pub prec_c: f64,
    pub rec_c: f64,
    pub f1_c: f64,
    pub iou_c: f64,
    pub prec_n: f64,
    pub rec_n: f64,
    pub f1_n: f64,
    pub iou_n: f64,
}

impl MetricReport {
    /// Headline columns in table order: OA, mF1, mPrec, mRec, mIoU.
    pub fn headline(&self) -> [(&'static str, f64); 5] {
        [
            ("OA", self.oa),
            ("mF1", self.m_f1),
            ("mPrec", self.m_prec),
            ("mRec", self.m_rec),
            ("mIoU", self.m_iou),
        ]
    }

    /// Plain-text table with percentages.
    pub fn to_table(&self) -> String {
        let header: Vec<String> = self.headline().iter().map(|(k, _)| format!("{k:>8}")).collect();
        let values: Vec<String> = self
            .headline()
            .iter()
            .map(|(_, v)| format!("{:>8.2}", 100.0 * v))
            .collect();
        format!("{}\n{}\n", header.join(" "), values.join(" "))
    }

    /// Machine-readable `key = value` form; parses back losslessly.
    pub fn to_key_values(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Data(format!("serializing metrics: {e}")))
    }

    pub fn from_key_values(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Data(format!("parsing metrics: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn accumulate_examples() {
        let ones = Array2::<u8>::ones((4, 4));
        let zeros = Array2::<u8>::zeros((4, 4));
        let mut cm = ConfusionMatrix::default();
        cm.accumulate(ones.view(), ones.view()).unwrap();
        assert_eq!(cm, ConfusionMatrix::new(16, 0, 0, 0));
        let mut cm = ConfusionMatrix::default();
        cm.accumulate(ones.view(), zeros.view()).unwrap();
        assert_eq!(cm, ConfusionMatrix::new(0, 16, 0, 0));
    }

    #[test]
    fn accumulate_errors() {
        let a = Array2::<u8>::zeros((2, 2));
        let b = Array2::<u8>::zeros((2, 3));
        let mut cm = ConfusionMatrix::default();
        assert!(matches!(cm.accumulate(a.view(), b.view()), Err(Error::Shape(_))));
        let c = Array2::<u8>::from_elem((2, 2), 255);
        assert!(matches!(cm.accumulate(c.view(), a.view()), Err(Error::Data(_))));
        assert_eq!(cm.total(), 0);
    }

    #[test]
    fn worked_example() {
        let r = ConfusionMatrix::new(50, 5, 40, 5).compute().unwrap();
        assert!((r.oa - 0.90).abs() < 1e-15);
        let m = 0.5 * (50.0 / 55.0 + 40.0 / 45.0);
        assert!((r.m_prec - m).abs() < 1e-15);
        assert!((r.m_rec - m).abs() < 1e-15);
        assert!((r.m_prec - 0.89899).abs() < 5e-6);
        assert!((r.m_iou - 0.5 * (50.0 / 60.0 + 40.0 / 50.0)).abs() < 1e-15);
        assert!((r.m_iou - 0.81667).abs() < 5e-6);
    }

    #[test]
    fn perfect_prediction() {
        let r = ConfusionMatrix::new(7, 0, 9, 0).compute().unwrap();
        for v in [r.oa, r.m_prec, r.m_rec, r.m_f1, r.m_iou] {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn absent_change_class_uses_convention() {
        let r = ConfusionMatrix::new(0, 3, 12, 0).compute().unwrap();
        assert_eq!(r.rec_c, 1.0);
        assert_eq!(r.prec_n, 1.0);
        assert_eq!(r.m_iou, 0.5 * (0.0 + 12.0 / 15.0));
        let r = ConfusionMatrix::new(0, 0, 12, 0).compute().unwrap();
        assert_eq!(r.m_iou, 1.0);
        assert_eq!(r.m_f1, 1.0);
    }

    #[test]
    fn missed_class_scores_zero_f1() {
        let r = ConfusionMatrix::new(0, 4, 10, 6).compute().unwrap();
        assert_eq!(r.f1_c, 0.0);
    }

    #[test]
    fn empty_matrix_is_an_error() {
        assert!(ConfusionMatrix::default().compute().is_err());
    }

    #[test]
    fn key_value_round_trip() {
        let r = ConfusionMatrix::new(123, 17, 999, 31).compute().unwrap();
        let text = r.to_key_values().unwrap();
        assert!(text.contains("m_iou"));
        assert_eq!(MetricReport::from_key_values(&text).unwrap(), r);
    }

    proptest::proptest! {
        #[test]
        fn metrics_bounded_and_swap_symmetric(tp in 0u64..1000, fp in 0u64..1000, tn in 0u64..1000, fn_ in 0u64..1000) {
            let cm = ConfusionMatrix::new(tp, fp, tn, fn_);
            proptest::prop_assume!(cm.total() > 0);
            let r = cm.compute().unwrap();
            let s = cm.swapped().compute().unwrap();
            for v in [r.oa, r.m_prec, r.m_rec, r.m_f1, r.m_iou, r.prec_c, r.rec_c, r.f1_c, r.iou_c, r.prec_n, r.rec_n, r.f1_n, r.iou_n] {
                proptest::prop_assert!((0.0..=1.0).contains(&v));
            }
            proptest::prop_assert!(r.m_f1 >= r.f1_c.min(r.f1_n) && r.m_f1 <= r.f1_c.max(r.f1_n));
            proptest::prop_assert_eq!(r.oa, s.oa);
            proptest::prop_assert_eq!(r.m_prec, s.m_prec);
            proptest::prop_assert_eq!(r.m_rec, s.m_rec);
            proptest::prop_assert_eq!(r.m_f1, s.m_f1);
            proptest::prop_assert_eq!(r.m_iou, s.m_iou);
        }

        #[test]
        fn merge_is_commutative(a in proptest::array::uniform4(0u64..1000), b in proptest::array::uniform4(0u64..1000)) {
            let x = ConfusionMatrix::new(a[0], a[1], a[2], a[3]);
            let y = ConfusionMatrix::new(b[0], b[1], b[2], b[3]);
            proptest::prop_assert_eq!(x.merge(&y), y.merge(&x));
        }
    }
}
