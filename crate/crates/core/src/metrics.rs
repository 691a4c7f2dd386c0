//! Confusion matrices and the class-averaged accuracy / IoU derived from them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::LabelMap;

/// `counts[g][p]`: pixels of ground-truth class `g` predicted as `p`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn from_counts(rows: Vec<Vec<u64>>) -> Result<Self> {
        let c = rows.len();
        if rows.iter().any(|r| r.len() != c) {
            return Err(Error::invalid("confusion matrix", "rows must form a square matrix"));
        }
        Ok(ConfusionMatrix {
            num_classes: c,
            counts: rows.concat(),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.num_classes.max(1)).map(<[u64]>::to_vec).collect()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if (pred.n(), pred.height(), pred.width()) != (gt.n(), gt.height(), gt.width()) {
            return Err(Error::invalid(
                "confusion matrix",
                format!(
                    "prediction {}×{}×{} vs ground truth {}×{}×{}",
                    pred.n(),
                    pred.height(),
                    pred.width(),
                    gt.n(),
                    gt.height(),
                    gt.width()
                ),
            ));
        }
        pred.check_classes(self.num_classes)?;
        gt.check_classes(self.num_classes)?;
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            self.counts[usize::from(g) * self.num_classes + usize::from(p)] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::invalid(
                "confusion matrix",
                format!("cannot merge {} and {} classes", self.num_classes, other.num_classes),
            ));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn true_positives(&self, k: usize) -> u64 {
        self.get(k, k)
    }

    pub fn false_negatives(&self, k: usize) -> u64 {
        (0..self.num_classes).filter(|&p| p != k).map(|p| self.get(k, p)).sum()
    }

    pub fn false_positives(&self, k: usize) -> u64 {
        (0..self.num_classes).filter(|&g| g != k).map(|g| self.get(g, k)).sum()
    }

    /// Recall of class `k` in [0, 1]; 0 when the class never occurs.
    pub fn class_accuracy(&self, k: usize) -> f64 {
        ratio(self.true_positives(k), self.true_positives(k) + self.false_negatives(k))
    }

    pub fn class_iou(&self, k: usize) -> f64 {
        let tp = self.true_positives(k);
        ratio(tp, tp + self.false_positives(k) + self.false_negatives(k))
    }

    /// Mean class accuracy in percent over all classes.
    pub fn macc(&self) -> f64 {
        self.mean_percent(|k| self.class_accuracy(k))
    }

    /// Mean IoU in percent over all classes.
    pub fn miou(&self) -> f64 {
        self.mean_percent(|k| self.class_iou(k))
    }

    fn mean_percent(&self, f: impl Fn(usize) -> f64) -> f64 {
        if self.num_classes == 0 {
            return 0.0;
        }
        100.0 * (0..self.num_classes).map(f).sum::<f64>() / self.num_classes as f64
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn round1(v: f64) -> f64 {
    (v * 10.0).round() / 10.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub class: usize,
    pub acc: f64,
    pub iou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub split: Option<String>,
    pub pixels: u64,
    pub classes: Vec<ClassScore>,
    pub macc: f64,
    pub miou: f64,
    pub confusion: Vec<Vec<u64>>,
}

impl EvalReport {
    /// Scores rounded to one decimal place, in percent.
    pub fn from_matrix(cm: &ConfusionMatrix, split: Option<&str>) -> Self {
        EvalReport {
            split: split.map(str::to_owned),
            pixels: cm.total(),
            classes: (0..cm.num_classes())
                .map(|k| ClassScore {
                    class: k,
                    acc: round1(100.0 * cm.class_accuracy(k)),
                    iou: round1(100.0 * cm.class_iou(k)),
                })
                .collect(),
            macc: round1(cm.macc()),
            miou: round1(cm.miou()),
            confusion: cm.rows(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        if let Some(s) = &self.split {
            out.push_str(&format!("split: {s}\n"));
        }
        out.push_str(&format!("pixels: {}\nclass    Acc    IoU\n", self.pixels));
        for c in &self.classes {
            out.push_str(&format!("{:>5} {:>6.1} {:>6.1}\n", c.class, c.acc, c.iou));
        }
        out.push_str(&format!("mAcc {:.1}\nmIoU {:.1}\n", self.macc, self.miou));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(rows: &[&[u8]]) -> LabelMap {
        LabelMap::new(rows.len(), rows[0].len(), rows.concat()).unwrap()
    }

    #[test]
    fn hand_counted_matrix() {
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&map(&[&[0, 1], &[2, 2]]), &map(&[&[0, 1], &[1, 2]])).unwrap();
        assert_eq!(cm.get(1, 2), 1);
        assert_eq!((cm.get(0, 0), cm.get(1, 1), cm.get(2, 2)), (1, 1, 1));
        assert_eq!(cm.total(), 4);
    }

    #[test]
    fn perfect_and_mixed_scores() {
        let mut cm = ConfusionMatrix::new(2);
        let m = map(&[&[0, 1]]);
        cm.accumulate(&m, &m).unwrap();
        assert_eq!((cm.macc(), cm.miou()), (100.0, 100.0));

        // Class 1: TP 1, FP 1, FN 1. Class 0: TP 2, FN 1, FP 1.
        let cm = ConfusionMatrix::from_counts(vec![vec![2, 1], vec![1, 1]]).unwrap();
        assert!((cm.miou() - 50.0 * (0.5 + 1.0 / 3.0)).abs() < 1e-12);
        assert!((cm.miou() - 41.67).abs() < 0.01);
    }

    #[test]
    fn absent_classes_count_as_zero() {
        let mut cm = ConfusionMatrix::new(4);
        let m = map(&[&[0, 1]]);
        cm.accumulate(&m, &m).unwrap();
        assert_eq!(cm.miou(), 50.0);
    }

    #[test]
    fn rejects_out_of_range_and_mismatched() {
        let mut cm = ConfusionMatrix::new(2);
        assert!(cm.accumulate(&map(&[&[2]]), &map(&[&[0]])).is_err());
        assert!(cm.accumulate(&map(&[&[0, 0]]), &map(&[&[0]])).is_err());
        assert!(cm.merge(&ConfusionMatrix::new(3)).is_err());
    }

    #[test]
    fn report_formats() {
        let cm = ConfusionMatrix::from_counts(vec![vec![2, 1], vec![1, 1]]).unwrap();
        let r = EvalReport::from_matrix(&cm, Some("night"));
        assert_eq!(r.miou, 41.7);
        assert_eq!(r.classes[0].acc, 66.7);
        let back: EvalReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
        assert!(r.to_text().contains("mIoU 41.7"));
    }
}
