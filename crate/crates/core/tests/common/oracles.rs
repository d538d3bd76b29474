//! Slow, direct reimplementations used as references.

use std::collections::BTreeMap;

use mmfsod::dataspec::{ClassId, ImageId};
use mmfsod::geometry::BBox;

/// Overlap ratio written from scratch.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = a.x2.min(b.x2) - a.x1.max(b.x1);
    let ih = a.y2.min(b.y2) - a.y1.max(b.y1);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    inter / ((a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter)
}

/// Repeatedly take the best remaining box and strike everything that
/// overlaps it at or above the threshold.
pub fn nms(boxes: &[BBox], scores: &[f64], thr: f64) -> Vec<usize> {
    let mut alive: Vec<bool> = vec![true; boxes.len()];
    let mut keep = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for i in 0..boxes.len() {
            if alive[i] && best.map_or(true, |b| scores[i] > scores[b]) {
                best = Some(i);
            }
        }
        let Some(b) = best else { break };
        keep.push(b);
        for i in 0..boxes.len() {
            if alive[i] && iou(&boxes[b], &boxes[i]) >= thr {
                alive[i] = false;
            }
        }
    }
    keep
}

/// Number of true positives among the `k` best detections, matching from
/// scratch: each detection in turn claims the highest-IoU free ground truth
/// of its image if the IoU reaches `thr`.
fn true_positives(ranked: &[(ImageId, BBox)], gts: &[(ImageId, BBox)], k: usize, thr: f64) -> usize {
    let mut free = vec![true; gts.len()];
    let mut tp = 0;
    for (img, b) in &ranked[..k] {
        let mut pick: Option<usize> = None;
        let mut pick_iou = 0.0;
        for (j, (gi, g)) in gts.iter().enumerate() {
            let v = iou(b, g);
            if free[j] && gi == img && v >= thr && (pick.is_none() || v > pick_iou) {
                pick = Some(j);
                pick_iou = v;
            }
        }
        if let Some(j) = pick {
            free[j] = false;
            tp += 1;
        }
    }
    tp
}

/// 101-point AP of one class: precision at every cut-off, interpolated as the
/// best precision over all cut-offs reaching each recall level.
pub fn class_ap(dets: &[(ImageId, BBox, f64)], gts: &[(ImageId, BBox)], thr: f64) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    // Selection sort by score, earliest first on ties.
    let mut rest: Vec<usize> = (0..dets.len()).collect();
    let mut ranked = Vec::new();
    while !rest.is_empty() {
        let mut bi = 0;
        for i in 1..rest.len() {
            if dets[rest[i]].2 > dets[rest[bi]].2 {
                bi = i;
            }
        }
        let d = dets[rest.remove(bi)];
        ranked.push((d.0, d.1));
    }
    let curve: Vec<(f64, f64)> = (1..=ranked.len())
        .map(|k| {
            let tp = true_positives(&ranked, gts, k, thr);
            (tp as f64 / gts.len() as f64, tp as f64 / k as f64)
        })
        .collect();
    let mut sum = 0.0;
    for i in 0..=100 {
        let r = i as f64 / 100.0;
        let best = curve
            .iter()
            .filter(|(rec, _)| *rec >= r)
            .map(|(_, p)| *p)
            .fold(0.0, f64::max);
        sum += best;
    }
    sum / 101.0
}

/// Class-averaged AP at one threshold over classes that have ground truth.
pub fn mean_ap(dets: &[(ImageId, ClassId, BBox, f64)], gts: &[(ImageId, ClassId, BBox)], thr: f64) -> f64 {
    let mut classes: BTreeMap<ClassId, ()> = BTreeMap::new();
    for g in gts {
        classes.insert(g.1, ());
    }
    if classes.is_empty() {
        return 0.0;
    }
    let mut sum = 0.0;
    for &c in classes.keys() {
        let d: Vec<_> = dets.iter().filter(|d| d.1 == c).map(|d| (d.0, d.2, d.3)).collect();
        let g: Vec<_> = gts.iter().filter(|g| g.1 == c).map(|g| (g.0, g.2)).collect();
        sum += class_ap(&d, &g, thr);
    }
    sum / classes.len() as f64
}

/// Bilinear value of an `[H, W]` grid (row-major) at continuous `(y, x)`,
/// written as a sum of tent functions after clamping into the grid.
pub fn bilinear(grid: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let y = y.max(0.0).min((h - 1) as f64);
    let x = x.max(0.0).min((w - 1) as f64);
    let mut v = 0.0;
    for i in 0..h {
        for j in 0..w {
            let wy = (1.0 - (y - i as f64).abs()).max(0.0);
            let wx = (1.0 - (x - j as f64).abs()).max(0.0);
            v += wy * wx * grid[i * w + j];
        }
    }
    v
}

/// Single-sample RoIAlign of one channel: bin centres in image pixels mapped
/// to cell coordinates with a half-cell offset.
pub fn roi_align(grid: &[f64], h: usize, w: usize, b: &BBox, out: usize, scale: f64) -> Vec<f64> {
    let mut res = Vec::with_capacity(out * out);
    let (bh, bw) = ((b.y2 - b.y1) / out as f64, (b.x2 - b.x1) / out as f64);
    for i in 0..out {
        for j in 0..out {
            let y = (b.y1 + bh * (i as f64 + 0.5)) * scale - 0.5;
            let x = (b.x1 + bw * (j as f64 + 0.5)) * scale - 0.5;
            res.push(bilinear(grid, h, w, y, x));
        }
    }
    res
}

/// `x [r, k] @ w [k, n] + b [n]` by triple loop.
pub fn affine(x: &[f64], w: &[f64], b: &[f64], r: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * n];
    for i in 0..r {
        for j in 0..n {
            let mut s = b[j];
            for t in 0..k {
                s += x[i * k + t] * w[t * n + j];
            }
            out[i * n + j] = s;
        }
    }
    out
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}
