use serde::{Deserialize, Serialize};

use super::OcrResult;
use crate::imaging::TextAnnotation;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl MatchCounts {
    pub fn add(&mut self, other: MatchCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// Zero when nothing was predicted.
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn f_measure(&self) -> f64 {
        f_measure(self.recall(), self.precision())
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Harmonic mean; zero when both are zero.
pub fn f_measure(recall: f64, precision: f64) -> f64 {
    if recall + precision == 0.0 {
        0.0
    } else {
        2.0 * recall * precision / (recall + precision)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatchOptions {
    pub iou_thresh: f64,
    pub case_sensitive: bool,
}

impl Default for MatchOptions {
    fn default() -> Self {
        Self {
            iou_thresh: 0.5,
            case_sensitive: false,
        }
    }
}

pub fn texts_match(a: &str, b: &str, case_sensitive: bool) -> bool {
    let (a, b) = (a.trim(), b.trim());
    if case_sensitive {
        a == b
    } else {
        a.to_lowercase() == b.to_lowercase()
    }
}

/// `eligible[p][g]`: prediction `p` may count as ground truth `g`.
pub fn eligibility(pred: &OcrResult, gt: &TextAnnotation, options: &MatchOptions) -> Vec<Vec<bool>> {
    pred.boxes
        .iter()
        .zip(&pred.texts)
        .map(|(pb, pt)| {
            gt.boxes
                .iter()
                .zip(&gt.transcriptions)
                .map(|(gb, gtxt)| pb.iou(gb) >= options.iou_thresh && texts_match(pt, gtxt, options.case_sensitive))
                .collect()
        })
        .collect()
}

/// One-to-one matching of predictions to ground truth.
///
/// Eligible pairs are taken greedily by descending IoU; augmenting paths
/// then extend the matching to maximum size, so orderings where greedy
/// choices block each other still yield the best true-positive count.
pub fn match_and_score(pred: &OcrResult, gt: &TextAnnotation, options: &MatchOptions) -> MatchCounts {
    let eligible = eligibility(pred, gt, options);
    let (np, ng) = (pred.len(), gt.len());
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for p in 0..np {
        for g in 0..ng {
            if eligible[p][g] {
                pairs.push((pred.boxes[p].iou(&gt.boxes[g]), p, g));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut pred_of_gt: Vec<Option<usize>> = vec![None; ng];
    let mut gt_of_pred: Vec<Option<usize>> = vec![None; np];
    for &(_, p, g) in &pairs {
        if gt_of_pred[p].is_none() && pred_of_gt[g].is_none() {
            gt_of_pred[p] = Some(g);
            pred_of_gt[g] = Some(p);
        }
    }
    for p in 0..np {
        if gt_of_pred[p].is_none() {
            let mut seen = vec![false; ng];
            augment(p, &eligible, &mut seen, &mut pred_of_gt, &mut gt_of_pred);
        }
    }
    let tp = gt_of_pred.iter().filter(|m| m.is_some()).count();
    MatchCounts {
        tp,
        fp: np - tp,
        fn_: ng - tp,
    }
}

fn augment(
    p: usize,
    eligible: &[Vec<bool>],
    seen: &mut [bool],
    pred_of_gt: &mut [Option<usize>],
    gt_of_pred: &mut [Option<usize>],
) -> bool {
    for g in 0..seen.len() {
        if !eligible[p][g] || seen[g] {
            continue;
        }
        seen[g] = true;
        let free = match pred_of_gt[g] {
            None => true,
            Some(other) => augment(other, eligible, seen, pred_of_gt, gt_of_pred),
        };
        if free {
            pred_of_gt[g] = Some(p);
            gt_of_pred[p] = Some(g);
            return true;
        }
    }
    false
}
