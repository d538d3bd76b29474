use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use super::greedy_match;
use crate::dataspec::{Dataset, ImageId};
use crate::detector::DetectionRecord;
use crate::geometry::BBox;
use crate::{Error, Result};

pub const TP_COLOR: Rgb<u8> = Rgb([255, 255, 0]);
pub const FP_COLOR: Rgb<u8> = Rgb([255, 0, 0]);

#[derive(Serialize, Deserialize)]
struct Dump {
    detections: Vec<DetectionRecord>,
}

pub fn write_detections(path: &Path, records: &[DetectionRecord]) -> Result<()> {
    let text = serde_json::to_string_pretty(&Dump {
        detections: records.to_vec(),
    })
    .map_err(|e| Error::parse(path.display().to_string(), e))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_detections(path: &Path) -> Result<Vec<DetectionRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let dump: Dump = serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))?;
    for (i, r) in dump.detections.iter().enumerate() {
        r.detection()
            .map_err(|e| Error::parse(format!("{} detections[{i}]", path.display()), e))?;
    }
    Ok(dump.detections)
}

/// True-positive flag per record (input order) at IoU `threshold`, matched
/// greedily per class against the annotations of `gt`.
pub fn match_detections(records: &[DetectionRecord], gt: &Dataset, threshold: f64) -> Result<Vec<bool>> {
    let dets = records
        .iter()
        .map(|r| r.detection().map(|d| (r.image_id, d)))
        .collect::<Result<Vec<_>>>()?;
    let mut flags = vec![false; records.len()];
    let mut classes: Vec<_> = dets.iter().map(|(_, d)| d.class_id).collect();
    classes.sort_unstable();
    classes.dedup();
    for c in classes {
        let idx: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].1.class_id == c).collect();
        let d: Vec<(ImageId, BBox, f64)> = idx.iter().map(|&i| (dets[i].0, dets[i].1.bbox, dets[i].1.score)).collect();
        let g: Vec<(ImageId, BBox)> = gt
            .annotations
            .iter()
            .filter(|a| a.class_id == c)
            .map(|a| (a.image_id, a.bbox))
            .collect();
        let (order, tp) = greedy_match(&d, &g, threshold);
        for (k, hit) in order.into_iter().zip(tp) {
            flags[idx[k]] = hit;
        }
    }
    Ok(flags)
}

/// The image with a one-pixel outline per detection: yellow for true
/// positives, red for false positives.
pub fn draw_overlay(image: &RgbImage, boxes: &[(BBox, bool)]) -> RgbImage {
    let mut out = image.clone();
    let (w, h) = out.dimensions();
    if w == 0 || h == 0 {
        return out;
    }
    let px = |v: f64, max: u32| (v.round().max(0.0) as u32).min(max - 1);
    for (b, tp) in boxes {
        let color = if *tp { TP_COLOR } else { FP_COLOR };
        let (x1, x2) = (px(b.x1, w), px(b.x2 - 1.0, w));
        let (y1, y2) = (px(b.y1, h), px(b.y2 - 1.0, h));
        for x in x1..=x2.max(x1) {
            out.put_pixel(x, y1, color);
            out.put_pixel(x, y2.max(y1), color);
        }
        for y in y1..=y2.max(y1) {
            out.put_pixel(x1, y, color);
            out.put_pixel(x2.max(x1), y, color);
        }
    }
    out
}
