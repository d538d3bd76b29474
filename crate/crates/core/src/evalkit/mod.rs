//! Detection metrics, the meta-testing protocol, the ablation grid runner and
//! detection overlays.

mod ablation;
mod overlay;
mod protocol;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::config::Interpolation;
use crate::dataspec::{ClassId, ImageId};
use crate::detector::Detection;
use crate::geometry::{self, BBox};

pub use ablation::{cell_config, run_ablation, AblationData, AblationGrid, AblationReport, AblationRow, Axis};
pub use overlay::{draw_overlay, match_detections, read_detections, write_detections};
pub use protocol::{evaluate_detections, meta_test, MetricsRow, MetricsTable};

pub use crate::geometry::iou;

/// COCO thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruth {
    pub image_id: ImageId,
    pub class_id: ClassId,
    pub bbox: BBox,
}

/// AP averaged over classes with ground truth, per threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApSummary {
    pub thresholds: Vec<f64>,
    pub per_threshold: Vec<f64>,
    pub per_class: BTreeMap<ClassId, Vec<f64>>,
    /// Mean over all thresholds.
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
}

/// Greedy matching in descending score order (ties keep input order): each
/// detection takes the unmatched ground truth of its image with the highest
/// IoU, if that IoU reaches `threshold`. Returns a true-positive flag per
/// detection in sorted order, plus that order.
pub fn greedy_match(dets: &[(ImageId, BBox, f64)], gts: &[(ImageId, BBox)], threshold: f64) -> (Vec<usize>, Vec<bool>) {
    let scores: Vec<f64> = dets.iter().map(|d| d.2).collect();
    let order = geometry::order_by_score(&scores);
    let mut used = vec![false; gts.len()];
    let tp = order
        .iter()
        .map(|&i| {
            let (img, b, _) = dets[i];
            let mut best: Option<(f64, usize)> = None;
            for (j, (gi, g)) in gts.iter().enumerate() {
                if *gi != img || used[j] {
                    continue;
                }
                let v = geometry::iou(&b, g);
                if v >= threshold && best.map_or(true, |(bv, _)| v > bv) {
                    best = Some((v, j));
                }
            }
            match best {
                Some((_, j)) => {
                    used[j] = true;
                    true
                }
                None => false,
            }
        })
        .collect();
    (order, tp)
}

/// Interpolated AP of one precision/recall curve given in ranked order.
pub fn interpolated_ap(recall: &[f64], precision: &[f64], interpolation: Interpolation) -> f64 {
    let mut envelope = precision.to_vec();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let points: Vec<f64> = match interpolation {
        Interpolation::Coco101 => (0..=100).map(|i| i as f64 / 100.0).collect(),
        Interpolation::Voc11 => (0..=10).map(|i| i as f64 / 10.0).collect(),
    };
    let sum: f64 = points
        .iter()
        .map(|&r| match recall.iter().position(|&x| x >= r) {
            Some(k) => envelope[k],
            None => 0.0,
        })
        .sum();
    sum / points.len() as f64
}

/// AP of one class at one threshold.
pub fn class_ap(
    dets: &[(ImageId, BBox, f64)],
    gts: &[(ImageId, BBox)],
    threshold: f64,
    interpolation: Interpolation,
) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    let (_, tp) = greedy_match(dets, gts, threshold);
    let (mut t, mut f) = (0usize, 0usize);
    let mut recall = Vec::with_capacity(tp.len());
    let mut precision = Vec::with_capacity(tp.len());
    for hit in tp {
        if hit {
            t += 1;
        } else {
            f += 1;
        }
        recall.push(t as f64 / gts.len() as f64);
        precision.push(t as f64 / (t + f) as f64);
    }
    interpolated_ap(&recall, &precision, interpolation)
}

/// Class-averaged AP at every threshold. Classes without ground truth are
/// skipped; empty inputs give zeros.
pub fn compute_ap(
    dets: &[(ImageId, Detection)],
    gts: &[GroundTruth],
    thresholds: &[f64],
    interpolation: Interpolation,
) -> ApSummary {
    let classes: BTreeSet<ClassId> = gts.iter().map(|g| g.class_id).collect();
    let mut per_class = BTreeMap::new();
    for &c in &classes {
        let d: Vec<(ImageId, BBox, f64)> = dets
            .iter()
            .filter(|(_, d)| d.class_id == c)
            .map(|(i, d)| (*i, d.bbox, d.score))
            .collect();
        let g: Vec<(ImageId, BBox)> = gts
            .iter()
            .filter(|g| g.class_id == c)
            .map(|g| (g.image_id, g.bbox))
            .collect();
        per_class.insert(
            c,
            thresholds
                .iter()
                .map(|&t| class_ap(&d, &g, t, interpolation))
                .collect::<Vec<_>>(),
        );
    }
    let per_threshold: Vec<f64> = (0..thresholds.len())
        .map(|k| {
            if per_class.is_empty() {
                0.0
            } else {
                per_class.values().map(|v| v[k]).sum::<f64>() / per_class.len() as f64
            }
        })
        .collect();
    let at = |t: f64| {
        thresholds
            .iter()
            .position(|&x| (x - t).abs() < 1e-9)
            .map(|k| per_threshold[k])
            .unwrap_or(0.0)
    };
    let ap = if per_threshold.is_empty() {
        0.0
    } else {
        per_threshold.iter().sum::<f64>() / per_threshold.len() as f64
    };
    ApSummary {
        thresholds: thresholds.to_vec(),
        ap,
        ap50: at(0.5),
        ap75: at(0.75),
        per_threshold,
        per_class,
    }
}
