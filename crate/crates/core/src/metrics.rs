//! Evaluation (per-class IoU, mIoU, tail split) and training-dynamics
//! accounting: cumulative per-class counts of pixels contributing to the
//! unsupervised loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{LabelMask, IGNORE};
use crate::loss::PixelWeights;

/// Row = ground truth, column = prediction; IGNORE pixels are not scored.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Score one prediction against its ground truth.
    pub fn accumulate(&mut self, pred: &LabelMask, gt: &LabelMask) -> Result<()> {
        if pred.height() != gt.height() || pred.width() != gt.width() {
            return Err(Error::DimMismatch("prediction vs ground-truth dims".into()));
        }
        pred.validate_classes(self.classes)?;
        gt.validate_classes(self.classes)?;
        for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
            if g == IGNORE || p == IGNORE {
                continue;
            }
            self.counts[g as usize * self.classes + p as usize] += 1;
        }
        Ok(())
    }

    /// Merge per-image matrices (commutative addition).
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::DimMismatch("confusion matrix class counts".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

/// Per-class IoU report. Classes with an empty union (never predicted and
/// never present) are `None` and excluded from both means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouReport {
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
    pub miou_tail: f64,
    pub tail_classes: Vec<usize>,
}

/// Compute IoU per class (`TP / (TP + FP + FN)`), the mean over present
/// classes, and the mean over the designated tail classes.
pub fn iou_report(cm: &ConfusionMatrix, tail_classes: &[usize]) -> IouReport {
    let classes = cm.classes;
    let mut per_class = Vec::with_capacity(classes);
    for c in 0..classes {
        let tp = cm.count(c, c);
        let row: u64 = (0..classes).map(|p| cm.count(c, p)).sum();
        let col: u64 = (0..classes).map(|g| cm.count(g, c)).sum();
        let union = row + col - tp;
        per_class.push(if union == 0 {
            None
        } else {
            Some(tp as f64 / union as f64)
        });
    }
    let mean_over = |indices: &mut dyn Iterator<Item = usize>| -> f64 {
        let present: Vec<f64> = indices.filter_map(|c| per_class.get(c).copied().flatten()).collect();
        if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        }
    };
    let miou = mean_over(&mut (0..classes));
    let miou_tail = mean_over(&mut tail_classes.iter().copied());
    IouReport {
        per_class,
        miou,
        miou_tail,
        tail_classes: tail_classes.to_vec(),
    }
}

/// The `ceil(C / 2)` classes with the fewest labeled pixels, the run's "tail".
/// Ties break toward the lower class id so the split is deterministic.
pub fn tail_classes_from_counts(labeled_pixel_counts: &[u64]) -> Vec<usize> {
    let classes = labeled_pixel_counts.len();
    let mut order: Vec<usize> = (0..classes).collect();
    order.sort_by_key(|&c| (labeled_pixel_counts[c], c));
    let mut tail: Vec<usize> = order.into_iter().take(classes.div_ceil(2)).collect();
    tail.sort_unstable();
    tail
}

/// Cumulative per-class counts of pixels with positive unsupervised-loss
/// weight, recorded once per training step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleLedger {
    classes: usize,
    cumulative: Vec<u64>,
    rows: Vec<LedgerRow>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LedgerRow {
    pub step: u64,
    pub cumulative: Vec<u64>,
}

impl SampleLedger {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            cumulative: vec![0; classes],
            rows: Vec::new(),
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn rows(&self) -> &[LedgerRow] {
        &self.rows
    }

    pub fn totals(&self) -> &[u64] {
        &self.cumulative
    }

    /// Add one step's per-class counts and snapshot the running totals.
    pub fn record_step(&mut self, step: u64, added: &[u64]) -> Result<()> {
        if added.len() != self.classes {
            return Err(Error::DimMismatch("ledger class count".into()));
        }
        for (t, &a) in self.cumulative.iter_mut().zip(added) {
            *t += a;
        }
        self.rows.push(LedgerRow {
            step,
            cumulative: self.cumulative.clone(),
        });
        Ok(())
    }

    /// Share of the final totals held by the given classes.
    pub fn class_share(&self, classes: &[usize]) -> f64 {
        let total: u64 = self.cumulative.iter().sum();
        if total == 0 {
            return 0.0;
        }
        let selected: u64 = classes.iter().map(|&c| self.cumulative[c]).sum();
        selected as f64 / total as f64
    }

    /// Checkpoint plumbing: rebuild from saved rows.
    pub fn from_rows(classes: usize, rows: Vec<LedgerRow>) -> Result<Self> {
        let cumulative = match rows.last() {
            Some(row) => {
                if row.cumulative.len() != classes {
                    return Err(Error::DimMismatch("ledger row class count".into()));
                }
                row.cumulative.clone()
            }
            None => vec![0; classes],
        };
        Ok(Self {
            classes,
            cumulative,
            rows,
        })
    }

    /// Export as `step,class,count` CSV with cumulative counts.
    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["step", "class", "count"])?;
        for row in &self.rows {
            for (c, &n) in row.cumulative.iter().enumerate() {
                w.write_record([row.step.to_string(), c.to_string(), n.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Per-class counts of positively weighted pixels in one image, keyed by the
/// pseudo label. Out-of-range labels (IGNORE) are not counted.
pub fn ledger_counts(pseudo: &LabelMask, weights: &PixelWeights, classes: usize) -> Vec<u64> {
    let mut counts = vec![0u64; classes];
    for (&label, &w) in pseudo.labels().iter().zip(weights.values()) {
        if w > 0.0 && label != IGNORE && (label as usize) < classes {
            counts[label as usize] += 1;
        }
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::{pixel_weights, SampleIndicator};
    use crate::grid::ProbMap;

    #[test]
    fn perfect_predictions_increment_the_diagonal() {
        let mut cm = ConfusionMatrix::new(3);
        let mask = LabelMask::from_fn(2, 3, |y, x| ((y + x) % 3) as u8);
        cm.accumulate(&mask, &mask).unwrap();
        for g in 0..3 {
            for p in 0..3 {
                if g == p {
                    assert!(cm.count(g, p) > 0);
                } else {
                    assert_eq!(cm.count(g, p), 0);
                }
            }
        }
        assert_eq!(cm.total(), 6);
    }

    #[test]
    fn ignore_pixels_are_not_scored() {
        let mut cm = ConfusionMatrix::new(2);
        let pred = LabelMask::filled(2, 2, 1);
        let gt = LabelMask::filled(2, 2, IGNORE);
        cm.accumulate(&pred, &gt).unwrap();
        assert_eq!(cm.total(), 0);
    }

    #[test]
    fn single_error_lands_off_diagonal() {
        let mut cm = ConfusionMatrix::new(2);
        let gt = LabelMask::new(2, 2, vec![0, 0, 1, 1]).unwrap();
        let pred = LabelMask::new(2, 2, vec![0, 1, 1, 1]).unwrap();
        cm.accumulate(&pred, &gt).unwrap();
        assert_eq!(cm.count(0, 1), 1);
        assert_eq!(cm.count(0, 0), 1);
        assert_eq!(cm.count(1, 1), 2);
        assert_eq!(cm.count(1, 0), 0);
    }

    #[test]
    fn iou_formula_and_exclusions() {
        // Class 0: TP=6, FP=2, FN=2 -> IoU 0.6; class 2 vacuous.
        let mut cm = ConfusionMatrix::new(3);
        cm.counts[0] = 6; // (0,0)
        cm.counts[1] = 2; // (0,1) FN for 0
        cm.counts[3] = 2; // (1,0) FP for 0
        cm.counts[4] = 5; // (1,1)
        let report = iou_report(&cm, &[2]);
        assert!((report.per_class[0].unwrap() - 0.6).abs() < 1e-12);
        assert_eq!(report.per_class[2], None);
        let expected_miou = (0.6 + 5.0 / 9.0) / 2.0;
        assert!((report.miou - expected_miou).abs() < 1e-12);
        assert_eq!(report.miou_tail, 0.0, "tail holds only the vacuous class");
    }

    #[test]
    fn perfect_iou_is_one() {
        let mut cm = ConfusionMatrix::new(2);
        let mask = LabelMask::from_fn(4, 4, |y, _| (y % 2) as u8);
        cm.accumulate(&mask, &mask).unwrap();
        let report = iou_report(&cm, &[1]);
        assert_eq!(report.miou, 1.0);
        assert_eq!(report.miou_tail, 1.0);
    }

    #[test]
    fn miou_is_the_unweighted_mean_of_per_class_ious() {
        let mut cm = ConfusionMatrix::new(3);
        for g in 0..3 {
            for p in 0..3 {
                cm.counts[g * 3 + p] = (g * 3 + p + 1) as u64;
            }
        }
        let report = iou_report(&cm, &[0]);
        let present: Vec<f64> = report.per_class.iter().flatten().copied().collect();
        let mean = present.iter().sum::<f64>() / present.len() as f64;
        assert!((report.miou - mean).abs() < 1e-12);
    }

    #[test]
    fn accumulation_is_order_independent() {
        let masks: Vec<(LabelMask, LabelMask)> = (0..4)
            .map(|i| {
                (
                    LabelMask::from_fn(3, 3, |y, x| ((y * x + i) % 3) as u8),
                    LabelMask::from_fn(3, 3, |y, x| ((y + x + i) % 3) as u8),
                )
            })
            .collect();
        let mut fwd = ConfusionMatrix::new(3);
        for (p, g) in &masks {
            fwd.accumulate(p, g).unwrap();
        }
        let mut rev = ConfusionMatrix::new(3);
        for (p, g) in masks.iter().rev() {
            rev.accumulate(p, g).unwrap();
        }
        assert_eq!(fwd, rev);
    }

    #[test]
    fn tail_split_takes_fewest_labeled_pixels() {
        let tail = tail_classes_from_counts(&[500, 20, 300, 10, 90, 40]);
        assert_eq!(tail, vec![1, 3, 5], "ceil(6/2) = 3 smallest counts");
    }

    #[test]
    fn ledger_accumulates_positive_weight_pixels() {
        let mut ledger = SampleLedger::new(3);
        let pseudo = LabelMask::filled(64, 64, 2);
        let probs = ProbMap::from_fn(64, 64, 3, |_, _| vec![0.2, 0.2, 0.6]).unwrap();
        let w = pixel_weights(&probs, &SampleIndicator::all_valid(&pseudo), 2.0).unwrap();
        let counts = ledger_counts(&pseudo, &w, 3);
        assert_eq!(counts, vec![0, 0, 4096]);
        ledger.record_step(0, &counts).unwrap();
        ledger.record_step(1, &[0, 0, 0]).unwrap();
        assert_eq!(ledger.totals(), &[0, 0, 4096], "zero-weight step leaves totals unchanged");
        assert_eq!(ledger.rows().len(), 2);
        assert!((ledger.class_share(&[2]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ledger_totals_equal_sum_of_steps() {
        let mut ledger = SampleLedger::new(2);
        let steps = [[3u64, 1], [0, 7], [5, 5]];
        for (i, s) in steps.iter().enumerate() {
            ledger.record_step(i as u64, s).unwrap();
        }
        assert_eq!(ledger.totals(), &[8, 13]);
        for (i, row) in ledger.rows().iter().enumerate() {
            let expect: Vec<u64> = (0..2)
                .map(|c| steps[..=i].iter().map(|s| s[c]).sum())
                .collect();
            assert_eq!(row.cumulative, expect);
        }
    }

    #[test]
    fn mixed_mask_counts_match_per_class_positive_weights() {
        let pseudo = LabelMask::from_fn(8, 8, |y, _| (y % 3) as u8);
        let probs = ProbMap::from_fn(8, 8, 3, |_, _| vec![0.5, 0.3, 0.2]).unwrap();
        let ind = SampleIndicator::new(8, 8, (0..64).map(|i| i % 2 == 0).collect()).unwrap();
        let w = pixel_weights(&probs, &ind, 1.0).unwrap();
        let counts = ledger_counts(&pseudo, &w, 3);
        let mut expected = vec![0u64; 3];
        for y in 0..8 {
            for x in 0..8 {
                if w.weight(y, x) > 0.0 {
                    expected[pseudo.label(y, x) as usize] += 1;
                }
            }
        }
        assert_eq!(counts, expected);
    }
}
