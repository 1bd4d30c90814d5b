//! Agreement between a predicted label map and ground truth.
//!
//! Pixels labeled [`IGNORE`] in the ground truth are left out of every count.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::supervision::{LabelMap, IGNORE};

/// Joint label counts over the evaluated pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionCounts {
    /// `table[i][j]` = pixels with predicted label `i` and true label `j`.
    pub table: Vec<Vec<u64>>,
    pub total: u64,
}

impl ConfusionCounts {
    pub fn new(pred: &LabelMap, gt: &LabelMap) -> Result<Self> {
        if pred.shape() != gt.shape() {
            return Err(Error::input(format!(
                "prediction is {:?}, ground truth is {:?}",
                pred.shape(),
                gt.shape()
            )));
        }
        let rows = pred.num_classes().max(1);
        let cols = gt.num_classes().max(1);
        let mut table = vec![vec![0u64; cols]; rows];
        let mut total = 0;
        for (&a, &b) in pred.as_slice().iter().zip(gt.as_slice()) {
            if b == IGNORE || a == IGNORE {
                continue;
            }
            table[a as usize][b as usize] += 1;
            total += 1;
        }
        Ok(Self { table, total })
    }

    pub fn pred_sizes(&self) -> Vec<u64> {
        self.table.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn gt_sizes(&self) -> Vec<u64> {
        let cols = self.table.first().map_or(0, Vec::len);
        (0..cols).map(|j| self.table.iter().map(|r| r[j]).sum()).collect()
    }

    /// `(tp, fp, fn, tn)` for one class treated as positive in both maps.
    pub fn binary(&self, class: usize) -> (u64, u64, u64, u64) {
        let cell = |i: usize, j: usize| self.table.get(i).and_then(|r| r.get(j)).copied().unwrap_or(0);
        let tp = cell(class, class);
        let pred_pos = self.table.get(class).map_or(0, |r| r.iter().sum());
        let gt_pos: u64 = self.table.iter().map(|r| r.get(class).copied().unwrap_or(0)).sum();
        let fp = pred_pos - tp;
        let fneg = gt_pos - tp;
        (tp, fp, fneg, self.total - tp - fp - fneg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapMetrics {
    pub iou: f64,
    pub dice: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Ratio with the empty-denominator convention: 1 when both masks are empty.
fn ratio(num: u64, den: u64, both_empty: bool) -> f64 {
    if den == 0 {
        if both_empty {
            1.0
        } else {
            0.0
        }
    } else {
        num as f64 / den as f64
    }
}

pub fn overlap_metrics(pred: &LabelMap, gt: &LabelMap, positive_class: u8) -> Result<OverlapMetrics> {
    let counts = ConfusionCounts::new(pred, gt)?;
    Ok(overlap_from_counts(&counts, positive_class as usize))
}

pub fn overlap_from_counts(counts: &ConfusionCounts, class: usize) -> OverlapMetrics {
    let (tp, fp, fneg, _) = counts.binary(class);
    let empty = tp + fp + fneg == 0;
    OverlapMetrics {
        iou: ratio(tp, tp + fp + fneg, empty),
        dice: ratio(2 * tp, 2 * tp + fp + fneg, empty),
        precision: ratio(tp, tp + fp, empty),
        recall: ratio(tp, tp + fneg, empty),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusteringMetrics {
    /// Region covering of the ground truth by the prediction.
    pub rc: f64,
    /// Rand index: fraction of pixel pairs on which both maps agree.
    pub pri: f64,
    /// Variation of information in nats.
    pub vi: f64,
}

pub fn clustering_metrics(pred: &LabelMap, gt: &LabelMap) -> Result<ClusteringMetrics> {
    let counts = ConfusionCounts::new(pred, gt)?;
    Ok(clustering_from_counts(&counts))
}

fn pairs(k: u64) -> f64 {
    let k = k as f64;
    k * (k - 1.0) / 2.0
}

pub fn clustering_from_counts(counts: &ConfusionCounts) -> ClusteringMetrics {
    let n = counts.total;
    if n == 0 {
        return ClusteringMetrics { rc: 1.0, pri: 1.0, vi: 0.0 };
    }
    let nf = n as f64;
    let a = counts.pred_sizes();
    let b = counts.gt_sizes();

    let mut rc = 0.0;
    for (j, &bj) in b.iter().enumerate() {
        if bj == 0 {
            continue;
        }
        let best = a
            .iter()
            .enumerate()
            .filter(|(_, &ai)| ai > 0)
            .map(|(i, &ai)| {
                let inter = counts.table[i][j];
                inter as f64 / (ai + bj - inter) as f64
            })
            .fold(0.0, f64::max);
        rc += bj as f64 * best;
    }
    rc /= nf;

    let total_pairs = pairs(n);
    let pri = if total_pairs == 0.0 {
        1.0
    } else {
        let same_both: f64 = counts.table.iter().flatten().map(|&c| pairs(c)).sum();
        let same_pred: f64 = a.iter().map(|&c| pairs(c)).sum();
        let same_gt: f64 = b.iter().map(|&c| pairs(c)).sum();
        (total_pairs + 2.0 * same_both - same_pred - same_gt) / total_pairs
    };

    // H(pred) + H(gt) - 2 I = H(pred | gt) + H(gt | pred)
    let mut vi = 0.0;
    for (i, row) in counts.table.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            if c > 0 {
                let cf = c as f64;
                vi += cf / nf * ((a[i] as f64 / cf).ln() + (b[j] as f64 / cf).ln());
            }
        }
    }

    ClusteringMetrics { rc, pri, vi }
}

/// One evaluation row: overlap metrics are present only when a positive
/// class was requested.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub image: String,
    pub method: String,
    pub overlap: Option<OverlapMetrics>,
    pub clustering: ClusteringMetrics,
}

pub const CSV_HEADER: &str = "image,method,iou,dice,precision,recall,rc,pri,vi";

impl MetricsRow {
    pub fn evaluate(
        image: impl Into<String>,
        method: impl Into<String>,
        pred: &LabelMap,
        gt: &LabelMap,
        positive_class: Option<u8>,
    ) -> Result<Self> {
        let counts = ConfusionCounts::new(pred, gt)?;
        Ok(Self {
            image: image.into(),
            method: method.into(),
            overlap: positive_class.map(|c| overlap_from_counts(&counts, c as usize)),
            clustering: clustering_from_counts(&counts),
        })
    }

    pub fn to_csv(&self) -> String {
        let overlap = match &self.overlap {
            Some(o) => format!("{},{},{},{}", o.iou, o.dice, o.precision, o.recall),
            None => ",,,".to_string(),
        };
        format!(
            "{},{},{},{},{},{}",
            csv_field(&self.image),
            csv_field(&self.method),
            overlap,
            self.clustering.rc,
            self.clustering.pri,
            self.clustering.vi
        )
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(h: usize, w: usize, v: &[u8]) -> LabelMap {
        LabelMap::new(h, w, v.to_vec()).unwrap()
    }

    #[test]
    fn identical_maps_are_perfect() {
        let g = map(2, 3, &[0, 1, 1, 2, 2, 0]);
        let o = overlap_metrics(&g, &g, 1).unwrap();
        assert_eq!((o.iou, o.dice, o.precision, o.recall), (1.0, 1.0, 1.0, 1.0));
        let c = clustering_metrics(&g, &g).unwrap();
        assert_eq!((c.rc, c.pri), (1.0, 1.0));
        assert!(c.vi.abs() < 1e-15);
    }

    #[test]
    fn complement_has_no_overlap() {
        let g = map(2, 2, &[1, 1, 0, 0]);
        let p = map(2, 2, &[0, 0, 1, 1]);
        let o = overlap_metrics(&p, &g, 1).unwrap();
        assert_eq!((o.iou, o.dice), (0.0, 0.0));
    }

    #[test]
    fn single_region_against_two_halves() {
        let p = map(2, 2, &[0, 0, 0, 0]);
        let g = map(2, 2, &[0, 0, 1, 1]);
        let c = clustering_metrics(&p, &g).unwrap();
        assert!((c.pri - 1.0 / 3.0).abs() < 1e-15);
        assert!((c.vi - 2f64.ln()).abs() < 1e-15);
        assert!((c.rc - 0.5).abs() < 1e-15);
    }

    #[test]
    fn empty_masks_follow_convention() {
        let g = map(1, 3, &[0, 0, 0]);
        let o = overlap_metrics(&g, &g, 1).unwrap();
        assert_eq!((o.iou, o.dice, o.precision, o.recall), (1.0, 1.0, 1.0, 1.0));
        let p = map(1, 3, &[0, 1, 0]);
        let o = overlap_metrics(&g, &p, 1).unwrap();
        assert_eq!((o.iou, o.precision, o.recall), (0.0, 0.0, 0.0));
    }

    #[test]
    fn mismatch_is_an_error() {
        assert!(overlap_metrics(&map(1, 2, &[0, 1]), &map(2, 1, &[0, 1]), 0).is_err());
        assert!(clustering_metrics(&map(1, 2, &[0, 1]), &map(1, 1, &[0])).is_err());
    }

    #[test]
    fn ignored_ground_truth_is_skipped() {
        let g = map(1, 4, &[1, 1, IGNORE, 0]);
        let p = map(1, 4, &[1, 1, 0, 0]);
        let counts = ConfusionCounts::new(&p, &g).unwrap();
        assert_eq!(counts.total, 3);
        assert_eq!(overlap_metrics(&p, &g, 1).unwrap().iou, 1.0);
    }

    #[test]
    fn csv_row_leaves_overlap_blank_without_positive_class() {
        let g = map(1, 2, &[0, 1]);
        let row = MetricsRow::evaluate("a", "b", &g, &g, None).unwrap();
        assert_eq!(row.to_csv(), "a,b,,,,,1,1,0");
        let row = MetricsRow::evaluate("a,x", "b", &g, &g, Some(1)).unwrap();
        assert!(row.to_csv().starts_with("\"a,x\",b,1,1,1,1,"));
    }
}
