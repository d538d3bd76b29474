use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{compute_ap, coco_thresholds, ApSummary, GroundTruth};
use crate::config::Interpolation;
use crate::dataspec::{crop_support, ClassId, ClassSplit, Dataset, ImageId, SupportCrop};
use crate::detector::{Detection, DetectionRecord};
use crate::trainer::Checkpoint;
use crate::{Error, Result};

/// One evaluated (shot, seed) cell; `seed == None` marks the mean over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub shot: usize,
    pub seed: Option<u64>,
    pub classes: String,
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub checkpoint_digest: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<MetricsRow>,
    /// Detections behind every per-seed row, keyed `"{shot}/{seed}"`.
    #[serde(skip)]
    pub detections: BTreeMap<String, Vec<DetectionRecord>>,
}

impl MetricsTable {
    pub fn mean(&self, shot: usize) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.shot == shot && r.seed.is_none())
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["shot", "seed", "classes", "AP", "AP50", "AP75"])
            .map_err(|e| Error::parse("metrics csv", e))?;
        for r in &self.rows {
            let seed = r.seed.map_or("mean".to_string(), |s| s.to_string());
            w.write_record([
                r.shot.to_string(),
                seed,
                r.classes.clone(),
                format!("{:.6}", r.ap),
                format!("{:.6}", r.ap50),
                format!("{:.6}", r.ap75),
            ])
            .map_err(|e| Error::parse("metrics csv", e))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::parse("metrics csv", e))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }

    /// Plain-text table, AP values in percent.
    pub fn summary(&self) -> String {
        let mut s = format!("checkpoint {}\n", self.checkpoint_digest);
        let _ = writeln!(s, "{:>5} {:>6} {:>7} {:>7} {:>7}", "shot", "seed", "AP", "AP50", "AP75");
        for r in &self.rows {
            let seed = r.seed.map_or("mean".to_string(), |v| v.to_string());
            let _ = writeln!(
                s,
                "{:>5} {:>6} {:>7.2} {:>7.2} {:>7.2}",
                r.shot,
                seed,
                100.0 * r.ap,
                100.0 * r.ap50,
                100.0 * r.ap75
            );
        }
        s
    }
}

/// Scores detections against every annotation of `classes` in `test`.
pub fn evaluate_detections(
    detections: &[(ImageId, Detection)],
    test: &Dataset,
    classes: &[ClassId],
    interpolation: Interpolation,
) -> ApSummary {
    let gts: Vec<GroundTruth> = test
        .annotations
        .iter()
        .filter(|a| classes.contains(&a.class_id))
        .map(|a| GroundTruth {
            image_id: a.image_id,
            class_id: a.class_id,
            bbox: a.bbox,
        })
        .collect();
    let dets: Vec<(ImageId, Detection)> = detections
        .iter()
        .filter(|(_, d)| classes.contains(&d.class_id))
        .copied()
        .collect();
    compute_ap(&dets, &gts, &coco_thresholds(), interpolation)
}

/// `shot` support crops per class, drawn from `pool` with a generator seeded
/// only by `(seed, shot)`, so every checkpoint sees the same supports.
fn sample_support(
    pool: &Dataset,
    classes: &[ClassId],
    shot: usize,
    seed: u64,
    size: u32,
    context: f64,
) -> Result<BTreeMap<ClassId, Vec<SupportCrop>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x5eed_0000 + shot as u64);
    let by_class = pool.by_class();
    let images = pool.image_index();
    let mut out = BTreeMap::new();
    for &c in classes {
        let anns = by_class.get(&c).map(Vec::as_slice).unwrap_or(&[]);
        if anns.len() < shot {
            return Err(Error::Sampling(format!(
                "novel class {c} has {} instances in the support pool, {shot} needed",
                anns.len()
            )));
        }
        let crops = index::sample(&mut rng, anns.len(), shot)
            .into_iter()
            .map(|k| {
                let a = &pool.annotations[anns[k]];
                let img = &pool.images[images[&a.image_id]];
                SupportCrop {
                    class_id: c,
                    image_id: a.image_id,
                    annotation_id: a.id,
                    pixels: crop_support(&img.pixels, &a.bbox, size, context),
                }
            })
            .collect();
        out.insert(c, crops);
    }
    Ok(out)
}

/// Evaluates a meta-trained checkpoint on the novel classes without any
/// parameter update. Supports come from `pool`, detections are scored on
/// `test`. Only the student path runs: no class name is ever tokenised, which
/// is checked against the model's token log.
pub fn meta_test(
    ckpt: &Checkpoint,
    pool: &Dataset,
    test: &Dataset,
    split: &ClassSplit,
    shots: &[usize],
    seeds: &[u64],
) -> Result<MetricsTable> {
    if shots.is_empty() || seeds.is_empty() {
        return Err(Error::Config("meta_test needs at least one shot and one seed".into()));
    }
    split.check_against(pool)?;
    let cfg = &ckpt.config;
    let model = ckpt.model();
    let novel: Vec<ClassId> = split.novel.iter().copied().collect();
    let class_label = novel.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(" ");
    let no_names = BTreeMap::new();
    model.clear_token_log();

    let mut table = MetricsTable {
        checkpoint_digest: ckpt.digest(),
        seeds: seeds.to_vec(),
        rows: Vec::new(),
        detections: BTreeMap::new(),
    };
    for &shot in shots {
        let mut per_seed = Vec::new();
        for &seed in seeds {
            let support = sample_support(
                pool,
                &novel,
                shot,
                seed,
                cfg.model.support_size as u32,
                cfg.episode.support_context,
            )?;
            let protos = model.build_prototypes(&support, &no_names, false, cfg.mpg.placement)?;
            let mut dets = Vec::new();
            for img in &test.images {
                for d in model.detect(
                    &img.pixels,
                    &protos,
                    cfg.eval.score_threshold,
                    cfg.eval.nms_threshold,
                )? {
                    dets.push((img.id, d));
                }
            }
            let s = evaluate_detections(&dets, test, &novel, cfg.eval.interpolation);
            table.detections.insert(
                format!("{shot}/{seed}"),
                dets.iter().map(|(i, d)| DetectionRecord::new(*i, d)).collect(),
            );
            let row = MetricsRow {
                shot,
                seed: Some(seed),
                classes: class_label.clone(),
                ap: s.ap,
                ap50: s.ap50,
                ap75: s.ap75,
            };
            per_seed.push(row.clone());
            table.rows.push(row);
        }
        let n = per_seed.len() as f64;
        table.rows.push(MetricsRow {
            shot,
            seed: None,
            classes: class_label.clone(),
            ap: per_seed.iter().map(|r| r.ap).sum::<f64>() / n,
            ap50: per_seed.iter().map(|r| r.ap50).sum::<f64>() / n,
            ap75: per_seed.iter().map(|r| r.ap75).sum::<f64>() / n,
        });
    }
    let touched = model.token_accesses();
    if !touched.is_empty() {
        return Err(Error::Integrity(format!(
            "meta_test read {} name tokens; novel names must stay unseen",
            touched.len()
        )));
    }
    Ok(table)
}
