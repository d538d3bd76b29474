//! Two-stage class-conditioned detector: prototype-modulated region proposals
//! and a pairwise matching head with box regression.

use std::collections::BTreeMap;

use image::RgbImage;
use mmfsod_autograd::{Conv2d, Graph, RoiBox, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::dataspec::{ClassId, ImageId};
use crate::encoders::{backbone, final_projection, images_to_tensor, roi_features_var, to_roi, STRIDE};
use crate::geometry::{self, BBox};
use crate::model::Model;
use crate::params::{Ctx, Group, Init, ParamStore};
use crate::{Error, Result};

/// Smallest side, in pixels, of a proposal or detection that is kept.
pub const MIN_BOX_SIZE: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proposal {
    pub bbox: BBox,
    /// Sigmoid of the objectness logit.
    pub objectness: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub class_id: ClassId,
    pub bbox: BBox,
    pub score: f64,
}

/// One line of a detection dump, in manifest conventions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: ImageId,
    pub category_id: ClassId,
    /// `[x, y, w, h]`
    pub bbox: [f64; 4],
    pub score: f64,
}

impl DetectionRecord {
    pub fn new(image_id: ImageId, d: &Detection) -> Self {
        Self {
            image_id,
            category_id: d.class_id,
            bbox: d.bbox.to_xywh(),
            score: d.score,
        }
    }

    pub fn detection(&self) -> Result<Detection> {
        let [x, y, w, h] = self.bbox;
        Ok(Detection {
            class_id: self.category_id,
            bbox: BBox::from_xywh(x, y, w, h)?,
            score: self.score,
        })
    }
}

/// Fused prototype maps `[h, w, C_v]` of one class for each stage.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPrototypes<T> {
    pub rpn: Tensor<T>,
    pub rcnn: Tensor<T>,
}

pub(crate) fn init_params<T: Scalar>(ps: &mut ParamStore<T>, m: &ModelConfig, init: &mut Init) {
    let a = m.anchor_sizes.len();
    let (cv, cr, h) = (m.feature_dim, m.roi_dim, m.head_hidden);
    ps.insert("rpn.conv.w", Group::Rpn, init.normal(&[9 * cv, m.rpn_hidden], 0.01));
    ps.insert("rpn.conv.b", Group::Rpn, Tensor::zeros(&[m.rpn_hidden]));
    ps.insert("rpn.cls.w", Group::Rpn, init.normal(&[m.rpn_hidden, a], 0.01));
    ps.insert("rpn.cls.b", Group::Rpn, Tensor::zeros(&[a]));
    ps.insert("rpn.reg.w", Group::Rpn, init.normal(&[m.rpn_hidden, 4 * a], 0.01));
    ps.insert("rpn.reg.b", Group::Rpn, Tensor::zeros(&[4 * a]));
    ps.insert("head.fc.w", Group::Head, init.he(3 * cr, h));
    ps.insert("head.fc.b", Group::Head, Tensor::zeros(&[h]));
    ps.insert("head.cls.w", Group::Head, init.normal(&[h, 1], 0.01));
    ps.insert("head.cls.b", Group::Head, Tensor::zeros(&[1]));
    let r = m.roi_size * m.roi_size * cr;
    ps.insert("head.reg.w", Group::Head, init.normal(&[r + h, 4], 0.001));
    ps.insert("head.reg.b", Group::Head, Tensor::zeros(&[4]));
}

/// Square anchors centred on every stride-8 cell, ordered `(y, x, size)`.
pub fn anchors(m: &ModelConfig) -> Vec<BBox> {
    let cells = m.image_size / STRIDE;
    let mut out = Vec::with_capacity(cells * cells * m.anchor_sizes.len());
    for y in 0..cells {
        for x in 0..cells {
            let cx = (x as f64 + 0.5) * STRIDE as f64;
            let cy = (y as f64 + 0.5) * STRIDE as f64;
            for &s in &m.anchor_sizes {
                out.push(BBox {
                    x1: cx - 0.5 * s,
                    y1: cy - 0.5 * s,
                    x2: cx + 0.5 * s,
                    y2: cy + 0.5 * s,
                });
            }
        }
    }
    out
}

/// RPN over modulated maps `[P, h, w, C_v]`: objectness logits `[P, h*w*A]`
/// and deltas `[P, h*w*A, 4]` in anchor order.
pub fn rpn_head<T: Scalar>(cx: &Ctx<T>, modulated: Var) -> (Var, Var) {
    let g = cx.g;
    let shape = g.shape(modulated);
    let (p, h, w) = (shape[0], shape[1], shape[2]);
    let hid = g.relu(g.conv2d(modulated, cx.p("rpn.conv.w"), cx.p("rpn.conv.b"), Conv2d::new(3, 1, 1)));
    let cls = g.linear(hid, cx.p("rpn.cls.w"), cx.p("rpn.cls.b"));
    let reg = g.linear(hid, cx.p("rpn.reg.w"), cx.p("rpn.reg.b"));
    let a = g.shape(cls)[3];
    (g.reshape(cls, &[p, h * w * a]), g.reshape(reg, &[p, h * w * a, 4]))
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Decodes, clips and suppresses one map's anchor predictions; at most
/// `top_n` proposals in non-increasing objectness.
pub fn select_proposals(
    anchors: &[BBox],
    logits: &[f64],
    deltas: &[f64],
    image_size: f64,
    nms_threshold: f64,
    top_n: usize,
) -> Vec<Proposal> {
    let mut boxes = Vec::with_capacity(anchors.len());
    let mut scores = Vec::with_capacity(anchors.len());
    for (i, a) in anchors.iter().enumerate() {
        let d = [deltas[4 * i], deltas[4 * i + 1], deltas[4 * i + 2], deltas[4 * i + 3]];
        let b = geometry::decode(a, d).clip(image_size, image_size);
        if b.width() >= MIN_BOX_SIZE && b.height() >= MIN_BOX_SIZE && logits[i].is_finite() {
            boxes.push(b);
            scores.push(sigmoid(logits[i]));
        }
    }
    geometry::nms(&boxes, &scores, nms_threshold)
        .into_iter()
        .take(top_n)
        .map(|i| Proposal {
            bbox: boxes[i],
            objectness: scores[i],
        })
        .collect()
}

/// Post-RoI prototype features `[1, r, r, C_r]` from a fused support map
/// `[1, h, w, C_v]`, sampling the whole support crop.
pub fn prototype_roi<T: Scalar>(cx: &Ctx<T>, m: &ModelConfig, proto: Var) -> Var {
    let s = m.support_size as f64;
    let full = RoiBox {
        batch: 0,
        x1: 0.0,
        y1: 0.0,
        x2: s,
        y2: s,
    };
    roi_features_var(cx, final_projection(cx, proto), &[full], m.roi_size)
}

/// Matching head: `rois: [R, r, r, C_r]` against `proto: [1, r, r, C_r]`.
/// Returns match logits `[R, 1]` and deltas `[R, 4]`.
pub fn match_head<T: Scalar>(cx: &Ctx<T>, rois: Var, proto: Var) -> (Var, Var) {
    let g = cx.g;
    let shape = g.shape(rois);
    let (r, c) = (shape[0], shape[3]);
    let gr = g.spatial_mean(rois);
    let gq = g.reshape(g.spatial_mean(proto), &[c]);
    let prod = g.mul_bias(gr, gq);
    let diff = g.add_bias(gr, g.scale(gq, T::cast(-1.0)));
    let rel = g.concat_last(&[prod, diff, gr]);
    let hid = g.relu(g.linear(rel, cx.p("head.fc.w"), cx.p("head.fc.b")));
    let cls = g.linear(hid, cx.p("head.cls.w"), cx.p("head.cls.b"));
    let flat = g.reshape(rois, &[r, shape[1] * shape[2] * c]);
    let reg = g.linear(g.concat_last(&[flat, hid]), cx.p("head.reg.w"), cx.p("head.reg.b"));
    (cls, reg)
}

/// Applies deltas to proposal boxes and clips to a `width` x `height` image.
pub fn decode_boxes(proposals: &[Proposal], deltas: &[[f64; 4]], width: f64, height: f64) -> Result<Vec<BBox>> {
    if proposals.len() != deltas.len() {
        return Err(Error::Shape(format!("{} proposals but {} deltas", proposals.len(), deltas.len())));
    }
    Ok(proposals
        .iter()
        .zip(deltas)
        .map(|(p, d)| geometry::decode(&p.bbox, *d).clip(width, height))
        .collect())
}

impl<T: Scalar> Model<T> {
    /// Top proposals for one query map `[h, w, C_v]` and one fused stage-1
    /// prototype `[h', w', C_v]`.
    pub fn generate_proposals(&self, query: &Tensor<T>, prototype: &Tensor<T>, top_n: usize) -> Vec<Proposal> {
        let g = Graph::new();
        let cx = Ctx::inference(&g, &self.params);
        let q = g.constant(add_batch(query));
        let pooled = g.spatial_mean(g.constant(add_batch(prototype)));
        let (cls, reg) = rpn_head(&cx, g.modulate(q, pooled));
        select_proposals(
            &self.anchors,
            &g.value(cls).to_f64_vec(),
            &g.value(reg).to_f64_vec(),
            self.cfg.image_size as f64,
            self.eval.rpn_nms_threshold,
            top_n,
        )
    }

    /// Match probability and deltas for each RoI feature `[r, r, C_r]` against
    /// a prototype RoI feature of the same shape.
    pub fn match_proposals(&self, rois: &[Tensor<T>], prototype: &Tensor<T>) -> Vec<(f64, [f64; 4])> {
        if rois.is_empty() {
            return Vec::new();
        }
        let g = Graph::new();
        let cx = Ctx::inference(&g, &self.params);
        let parts: Vec<Var> = rois.iter().map(|r| g.constant(add_batch(r))).collect();
        let (cls, reg) = match_head(&cx, g.concat_rows(&parts), g.constant(add_batch(prototype)));
        let cls = g.value(cls).to_f64_vec();
        let reg = g.value(reg).to_f64_vec();
        cls.iter()
            .enumerate()
            .map(|(i, &l)| (sigmoid(l), [reg[4 * i], reg[4 * i + 1], reg[4 * i + 2], reg[4 * i + 3]]))
            .collect()
    }

    /// Runs both stages for every class on one query image. Classes never
    /// interact: each has its own proposals, scores and suppression.
    pub fn detect(
        &self,
        image: &RgbImage,
        prototypes: &BTreeMap<ClassId, ClassPrototypes<T>>,
        score_threshold: f64,
        nms_threshold: f64,
    ) -> Result<Vec<Detection>> {
        for t in [score_threshold, nms_threshold] {
            if !(t > 0.0 && t <= 1.0) {
                return Err(Error::Config(format!("detection threshold {t} outside (0, 1]")));
            }
        }
        if prototypes.is_empty() {
            return Ok(Vec::new());
        }
        let m = &self.cfg;
        let size = m.image_size as f64;
        let g = Graph::new();
        let cx = Ctx::inference(&g, &self.params);
        let query = backbone(&cx, g.constant(images_to_tensor(&[image], m.image_size)?));
        let projected = final_projection(&cx, query);
        let classes: Vec<ClassId> = prototypes.keys().copied().collect();
        let rpn_protos: Vec<Var> = classes
            .iter()
            .map(|c| g.constant(add_batch(&prototypes[c].rpn)))
            .collect();
        let pooled = g.spatial_mean(g.concat_rows(&rpn_protos));
        let (cls, reg) = rpn_head(&cx, g.modulate(query, pooled));
        let cls = g.value(cls).to_f64_vec();
        let reg = g.value(reg).to_f64_vec();
        let na = self.anchors.len();

        let mut out = Vec::new();
        for (n, class) in classes.iter().enumerate() {
            let proposals = select_proposals(
                &self.anchors,
                &cls[n * na..(n + 1) * na],
                &reg[n * na * 4..(n + 1) * na * 4],
                size,
                self.eval.rpn_nms_threshold,
                self.eval.top_n,
            );
            if proposals.is_empty() {
                continue;
            }
            let rois: Vec<RoiBox> = proposals.iter().map(|p| to_roi(0, &p.bbox)).collect();
            let feats = roi_features_var(&cx, projected, &rois, m.roi_size);
            let proto = prototype_roi(&cx, m, g.constant(add_batch(&prototypes[class].rcnn)));
            let (logits, deltas) = match_head(&cx, feats, proto);
            let logits = g.value(logits).to_f64_vec();
            let deltas = g.value(deltas).to_f64_vec();
            let deltas: Vec<[f64; 4]> = deltas.chunks(4).map(|d| [d[0], d[1], d[2], d[3]]).collect();
            let boxes = decode_boxes(&proposals, &deltas, size, size)?;
            let mut kept_boxes = Vec::new();
            let mut kept_scores = Vec::new();
            for (b, &l) in boxes.iter().zip(&logits) {
                let s = sigmoid(l);
                if s > score_threshold && b.width() >= MIN_BOX_SIZE && b.height() >= MIN_BOX_SIZE {
                    kept_boxes.push(*b);
                    kept_scores.push(s);
                }
            }
            for i in geometry::nms(&kept_boxes, &kept_scores, nms_threshold)
                .into_iter()
                .take(self.eval.max_detections)
            {
                out.push(Detection {
                    class_id: *class,
                    bbox: kept_boxes[i],
                    score: kept_scores[i],
                });
            }
        }
        Ok(out)
    }
}

pub(crate) fn add_batch<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let mut shape = vec![1];
    shape.extend_from_slice(t.shape());
    t.clone().reshape(&shape)
}
