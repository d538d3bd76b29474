//! Training objectives: detection losses for both stages with their target
//! assignment, prototype distillation, and visual-semantic contrastive
//! alignment.

use mmfsod_autograd::{Graph, Scalar, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{self, BBox};
use crate::{Error, Result};

/// Per-prediction labels and weights for one stage. Only sampled entries
/// carry weight; `reg_weights` is 1 on sampled positives.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SampledTargets {
    pub labels: Vec<f64>,
    pub weights: Vec<f64>,
    pub deltas: Vec<[f64; 4]>,
    pub reg_weights: Vec<f64>,
}

impl SampledTargets {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sampled(&self) -> usize {
        self.weights.iter().filter(|&&w| w > 0.0).count()
    }

    pub fn positives(&self) -> usize {
        self.reg_weights.iter().filter(|&&w| w > 0.0).count()
    }

    pub fn extend(&mut self, other: SampledTargets) {
        self.labels.extend(other.labels);
        self.weights.extend(other.weights);
        self.deltas.extend(other.deltas);
        self.reg_weights.extend(other.reg_weights);
    }
}

/// IoU-based sampling parameters for one stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sampling {
    pub samples: usize,
    pub positive_fraction: f64,
    pub positive_iou: f64,
    /// Entries whose best IoU is at most this are negatives.
    pub negative_iou: f64,
    /// Also mark the best candidate for every ground truth positive.
    pub force_best: bool,
}

fn best_matches(candidates: &[BBox], gts: &[BBox]) -> Vec<(f64, usize)> {
    candidates
        .iter()
        .map(|c| {
            gts.iter()
                .enumerate()
                .map(|(j, g)| (geometry::iou(c, g), j))
                .fold((0.0, 0), |acc, x| if x.0 > acc.0 { x } else { acc })
        })
        .collect()
}

/// Labels every candidate against `gts` and samples at most `s.samples` of
/// them, at most `positive_fraction` positive.
pub fn assign_targets<R: Rng + ?Sized>(candidates: &[BBox], gts: &[BBox], s: &Sampling, rng: &mut R) -> SampledTargets {
    let n = candidates.len();
    let best = best_matches(candidates, gts);
    let mut pos: Vec<usize> = Vec::new();
    let mut neg: Vec<usize> = Vec::new();
    let mut is_pos = vec![false; n];
    for (i, &(iou, _)) in best.iter().enumerate() {
        if !gts.is_empty() && iou >= s.positive_iou {
            is_pos[i] = true;
        }
    }
    if s.force_best {
        for g in gts {
            let top = candidates
                .iter()
                .map(|c| geometry::iou(c, g))
                .fold(0.0f64, f64::max);
            if top > 0.0 {
                for (i, c) in candidates.iter().enumerate() {
                    if geometry::iou(c, g) == top {
                        is_pos[i] = true;
                    }
                }
            }
        }
    }
    for i in 0..n {
        if is_pos[i] {
            pos.push(i);
        } else if best[i].0 <= s.negative_iou {
            neg.push(i);
        }
    }
    let max_pos = (s.samples as f64 * s.positive_fraction).floor() as usize;
    pos.shuffle(rng);
    pos.truncate(max_pos);
    neg.shuffle(rng);
    neg.truncate(s.samples - pos.len());

    let mut t = SampledTargets {
        labels: vec![0.0; n],
        weights: vec![0.0; n],
        deltas: vec![[0.0; 4]; n],
        reg_weights: vec![0.0; n],
    };
    for &i in &pos {
        t.labels[i] = 1.0;
        t.weights[i] = 1.0;
        t.reg_weights[i] = 1.0;
        t.deltas[i] = geometry::encode(&candidates[i], &gts[best[i].1]);
    }
    for &i in &neg {
        t.weights[i] = 1.0;
    }
    t
}

/// Second-stage sampling: ground truths join the proposals, then only the
/// sampled RoIs are returned together with their targets.
pub fn sample_rois<R: Rng + ?Sized>(
    proposals: &[BBox],
    gts: &[BBox],
    s: &Sampling,
    rng: &mut R,
) -> (Vec<BBox>, SampledTargets) {
    let mut candidates: Vec<BBox> = proposals.to_vec();
    candidates.extend_from_slice(gts);
    let full = assign_targets(&candidates, gts, s, rng);
    let keep: Vec<usize> = (0..candidates.len()).filter(|&i| full.weights[i] > 0.0).collect();
    let rois = keep.iter().map(|&i| candidates[i]).collect();
    let t = SampledTargets {
        labels: keep.iter().map(|&i| full.labels[i]).collect(),
        weights: keep.iter().map(|&i| full.weights[i]).collect(),
        deltas: keep.iter().map(|&i| full.deltas[i]).collect(),
        reg_weights: keep.iter().map(|&i| full.reg_weights[i]).collect(),
    };
    (rois, t)
}

/// Binary cross-entropy over sampled entries plus smooth-L1 over sampled
/// positives, both divided by the number of sampled entries. `logits` holds
/// one value per entry and `deltas` four.
pub fn detection_loss<T: Scalar>(g: &Graph<T>, logits: Var, deltas: Var, t: &SampledTargets, beta: f64) -> Var {
    let n = t.len();
    let norm = t.sampled().max(1) as f64;
    let labels = Tensor::from_f64(&[n], &t.labels);
    let weights = Tensor::from_f64(&[n], &t.weights);
    let flat_targets: Vec<f64> = t.deltas.iter().flatten().copied().collect();
    let flat_weights: Vec<f64> = t.reg_weights.iter().flat_map(|&w| [w; 4]).collect();
    let cls = g.bce_with_logits_sum(logits, &labels, &weights);
    let reg = g.smooth_l1_sum(
        deltas,
        &Tensor::from_f64(&[n * 4], &flat_targets),
        &Tensor::from_f64(&[n * 4], &flat_weights),
        beta,
    );
    g.scale(g.add(cls, reg), T::cast(1.0 / norm))
}

/// First-stage loss over anchors.
pub fn rpn_loss<T: Scalar>(g: &Graph<T>, logits: Var, deltas: Var, t: &SampledTargets, beta: f64) -> Var {
    detection_loss(g, logits, deltas, t, beta)
}

/// Second-stage loss over sampled RoIs.
pub fn rcnn_loss<T: Scalar>(g: &Graph<T>, logits: Var, deltas: Var, t: &SampledTargets, beta: f64) -> Var {
    detection_loss(g, logits, deltas, t, beta)
}

/// Mean Euclidean distance between student rows and (detached) teacher rows,
/// both `[N, C]`.
pub fn kd_loss<T: Scalar>(g: &Graph<T>, student: Var, teacher: Var) -> Result<Var> {
    let (s, t) = (g.shape(student), g.shape(teacher));
    if s != t || s.len() != 2 || s[0] == 0 {
        return Err(Error::Shape(format!("kd_loss needs equal non-empty [N, C] inputs, got {s:?} and {t:?}")));
    }
    let diff = g.sub(student, g.detach(teacher));
    Ok(g.mean_all(g.row_norms(diff)))
}

/// Symmetric InfoNCE between visual rows and semantic rows (`[N, C]` each,
/// already in the same space). Rows are divided by `max(|x|, norm_floor)`.
pub fn contrastive_loss<T: Scalar>(
    g: &Graph<T>,
    visual: Var,
    semantic: Var,
    temperature: f64,
    norm_floor: f64,
) -> Result<Var> {
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    let (v, s) = (g.shape(visual), g.shape(semantic));
    if v != s || v.len() != 2 || v[0] == 0 {
        return Err(Error::Shape(format!("contrastive_loss needs equal non-empty [N, C] inputs, got {v:?} and {s:?}")));
    }
    let n = v[0];
    let vn = g.l2_normalize_rows(visual, norm_floor);
    let sn = g.l2_normalize_rows(semantic, norm_floor);
    let inv = T::cast(1.0 / temperature);
    let diag: Vec<usize> = (0..n).collect();
    let vs = g.cross_entropy_rows(g.scale(g.matmul_nt(vn, sn), inv), &diag);
    let sv = g.cross_entropy_rows(g.scale(g.matmul_nt(sn, vn), inv), &diag);
    Ok(g.scale(g.add(vs, sv), T::cast(0.5)))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBundle {
    pub rpn: f64,
    pub rcnn: f64,
    pub kd: f64,
    pub contrastive: f64,
    pub total: f64,
}

impl LossBundle {
    pub fn scaled(&self, s: f64) -> LossBundle {
        LossBundle {
            rpn: self.rpn * s,
            rcnn: self.rcnn * s,
            kd: self.kd * s,
            contrastive: self.contrastive * s,
            total: self.total * s,
        }
    }

    pub fn add(&self, o: &LossBundle) -> LossBundle {
        LossBundle {
            rpn: self.rpn + o.rpn,
            rcnn: self.rcnn + o.rcnn,
            kd: self.kd + o.kd,
            contrastive: self.contrastive + o.contrastive,
            total: self.total + o.total,
        }
    }
}

/// Unweighted sum of the four components. `iteration` is only used to label
/// a non-finite component in the error.
pub fn total_loss(rpn: f64, rcnn: f64, kd: f64, contrastive: f64, iteration: usize) -> Result<LossBundle> {
    for (name, v) in [("rpn", rpn), ("rcnn", rcnn), ("kd", kd), ("contrastive", contrastive)] {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                iteration,
                component: name.to_string(),
            });
        }
    }
    Ok(LossBundle {
        rpn,
        rcnn,
        kd,
        contrastive,
        total: rpn + rcnn + kd + contrastive,
    })
}
