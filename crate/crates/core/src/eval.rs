//! AP@0.5 per defect class, mAP, steps per image and Spearman correlation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::agent::PredictionSet;
use crate::geometry::{iou, BBox};
use crate::synthgen::DefectClass;

/// One classless detection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub image: usize,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub image: usize,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub class: DefectClass,
}

/// Index of the matched ground truth for each prediction (`None` = false positive).
pub type Assignment = Vec<Option<usize>>;

/// Descending score; ties keep input order.
fn score_order(preds: &[PredictionRecord]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score));
    order
}

/// Class-agnostic greedy matching in descending score order.
///
/// Each prediction takes the still-unmatched ground truth of its image with the
/// largest IoU (lowest index on ties) if that IoU reaches `iou_thresh`.
pub fn match_predictions(preds: &[PredictionRecord], gts: &[GroundTruth], iou_thresh: f64) -> Assignment {
    let mut taken = vec![false; gts.len()];
    let mut out = vec![None; preds.len()];
    for i in score_order(preds) {
        let p = &preds[i];
        let mut best: Option<(f64, usize)> = None;
        for (j, g) in gts.iter().enumerate() {
            if taken[j] || g.image != p.image {
                continue;
            }
            let v = iou(&p.bbox, &g.bbox);
            if v >= iou_thresh && best.is_none_or(|(bv, _)| v > bv) {
                best = Some((v, j));
            }
        }
        if let Some((_, j)) = best {
            taken[j] = true;
            out[i] = Some(j);
        }
    }
    out
}

/// Area under the all-points interpolated precision-recall curve.
///
/// `ranked` holds (score, is_true_positive); `n_gt` is the number of ground
/// truths. Returns `None` when `n_gt` is 0.
pub fn average_precision(ranked: &[(f64, bool)], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..ranked.len()).collect();
    order.sort_by(|&a, &b| ranked[b].0.total_cmp(&ranked[a].0));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut recall = Vec::with_capacity(order.len());
    let mut precision = Vec::with_capacity(order.len());
    for i in order {
        if ranked[i].1 {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    Some(ap.clamp(0.0, 1.0))
}

/// Per-class AP: predictions matched to this class's ground truths count as
/// true positives, every unmatched prediction counts as a false positive, and
/// predictions matched to other classes are left out.
pub fn class_ap(
    preds: &[PredictionRecord],
    gts: &[GroundTruth],
    assignment: &Assignment,
    class: DefectClass,
) -> Option<f64> {
    let n_gt = gts.iter().filter(|g| g.class == class).count();
    let ranked: Vec<(f64, bool)> = preds
        .iter()
        .zip(assignment)
        .filter_map(|(p, m)| match m {
            Some(j) if gts[*j].class == class => Some((p.score, true)),
            Some(_) => None,
            None => Some((p.score, false)),
        })
        .collect();
    average_precision(&ranked, n_gt)
}

/// Unweighted mean of the defined APs.
pub fn mean_ap(per_class: &BTreeMap<DefectClass, f64>) -> Option<f64> {
    if per_class.is_empty() {
        None
    } else {
        Some(per_class.values().sum::<f64>() / per_class.len() as f64)
    }
}

/// Total steps across every episode divided by the image count.
pub fn avg_steps(steps_per_image: &[usize]) -> f64 {
    if steps_per_image.is_empty() {
        0.0
    } else {
        steps_per_image.iter().sum::<usize>() as f64 / steps_per_image.len() as f64
    }
}

/// 1-based ranks with ties sharing their average rank.
pub fn fractional_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman's rho: Pearson correlation of fractional ranks. `None` for
/// mismatched or too-short inputs and for constant ranks.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let (rx, ry) = (fractional_ranks(xs), fractional_ranks(ys));
    let n = xs.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// AP per class that has ground truth in the test set.
    pub per_class_ap: BTreeMap<DefectClass, f64>,
    pub gt_per_class: BTreeMap<DefectClass, usize>,
    /// Absent when no class has ground truth.
    pub map: Option<f64>,
    pub avg_steps: f64,
    pub images: usize,
    pub predictions: usize,
    pub matched_predictions: usize,
    pub unmatched_predictions: usize,
    pub matched_ground_truths: usize,
    pub unmatched_ground_truths: usize,
    pub iou_threshold: f64,
    pub interpolation: String,
    pub score_source: String,
}

impl EvalReport {
    pub fn from_records(
        preds: &[PredictionRecord],
        gts: &[GroundTruth],
        steps_per_image: &[usize],
        iou_thresh: f64,
        score_source: &str,
    ) -> Self {
        let assignment = match_predictions(preds, gts, iou_thresh);
        let mut per_class_ap = BTreeMap::new();
        let mut gt_per_class = BTreeMap::new();
        for c in DefectClass::ALL {
            let n = gts.iter().filter(|g| g.class == c).count();
            gt_per_class.insert(c, n);
            if let Some(ap) = class_ap(preds, gts, &assignment, c) {
                per_class_ap.insert(c, ap);
            }
        }
        let matched = assignment.iter().filter(|m| m.is_some()).count();
        EvalReport {
            map: mean_ap(&per_class_ap),
            per_class_ap,
            gt_per_class,
            avg_steps: avg_steps(steps_per_image),
            images: steps_per_image.len(),
            predictions: preds.len(),
            matched_predictions: matched,
            unmatched_predictions: preds.len() - matched,
            matched_ground_truths: matched,
            unmatched_ground_truths: gts.len() - matched,
            iou_threshold: iou_thresh,
            interpolation: "all-points".into(),
            score_source: score_source.into(),
        }
    }

    pub fn from_predictions(set: &PredictionSet, iou_thresh: f64, score_source: &str) -> Self {
        let (preds, gts) = flatten(set);
        let steps: Vec<usize> = set.images.iter().map(|i| i.steps).collect();
        EvalReport::from_records(&preds, &gts, &steps, iou_thresh, score_source)
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# Evaluation report\n");
        let mut header = String::from("|");
        let mut rule = String::from("|");
        let mut row = String::from("|");
        for c in DefectClass::ALL {
            let _ = write!(header, " {} |", c.code());
            rule.push_str("---:|");
            match self.per_class_ap.get(&c) {
                Some(ap) => {
                    let _ = write!(row, " {:.1} |", 100.0 * ap);
                }
                None => row.push_str(" n/a |"),
            }
        }
        header.push_str(" All (mAP) | Avg no. steps |");
        rule.push_str("---:|---:|");
        match self.map {
            Some(m) => {
                let _ = write!(row, " {:.1} |", 100.0 * m);
            }
            None => row.push_str(" n/a |"),
        }
        let _ = write!(row, " {:.1} |", self.avg_steps);
        let _ = writeln!(s, "{header}\n{rule}\n{row}\n");
        let _ = writeln!(
            s,
            "AP in percent at IoU {} ({} interpolation, class-agnostic matching; unmatched predictions count against every class). Score: {}.\n",
            self.iou_threshold, self.interpolation, self.score_source
        );
        let _ = writeln!(
            s,
            "Images: {}. Predictions: {} ({} matched, {} unmatched). Ground truths: {} matched, {} missed.",
            self.images,
            self.predictions,
            self.matched_predictions,
            self.unmatched_predictions,
            self.matched_ground_truths,
            self.unmatched_ground_truths
        );
        s
    }
}

/// Prediction and ground-truth records keyed by image position in the set.
pub fn flatten(set: &PredictionSet) -> (Vec<PredictionRecord>, Vec<GroundTruth>) {
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for (i, img) in set.images.iter().enumerate() {
        preds.extend(img.detections.iter().map(|d| PredictionRecord {
            image: i,
            bbox: d.bbox,
            score: d.score,
            steps: d.steps,
        }));
        gts.extend(img.ground_truth.iter().map(|a| GroundTruth {
            image: i,
            bbox: a.bbox,
            class: a.class,
        }));
    }
    (preds, gts)
}
