mod common;

use common::{checks, tiny_config, tiny_data};
use mmfsod::config::Interpolation;
use mmfsod::dataspec::{ClassSplit, Dataset};
use mmfsod::detector::{Detection, DetectionRecord};
use mmfsod::evalkit::{
    cell_config, coco_thresholds, compute_ap, match_detections, meta_test, read_detections, run_ablation,
    write_detections, AblationData, AblationGrid, Axis, GroundTruth,
};
use mmfsod::geometry::BBox;
use mmfsod::trainer::meta_train;
use mmfsod::Error;
use proptest::prelude::*;

#[test]
fn ap_matches_the_brute_force_oracle() {
    assert_eq!(checks::ap_oracle_mismatches(200), 0);
}

fn case() -> impl Strategy<Value = (Vec<(u64, Detection)>, Vec<GroundTruth>)> {
    let b = (0.0f64..12.0, 0.0f64..12.0, 1.0f64..8.0, 1.0f64..8.0)
        .prop_map(|(x, y, w, h)| BBox::from_xywh(x, y, w, h).unwrap());
    let det = (0u64..2, b.clone(), 0.0f64..1.0).prop_map(|(i, bbox, score)| (i, Detection { class_id: 1, bbox, score }));
    let gt = (0u64..2, b).prop_map(|(image_id, bbox)| GroundTruth { image_id, class_id: 1, bbox });
    (prop::collection::vec(det, 0..6), prop::collection::vec(gt, 1..6))
}

proptest! {
    #[test]
    fn ap_is_monotone_in_the_threshold((dets, gts) in case()) {
        let s = compute_ap(&dets, &gts, &coco_thresholds(), Interpolation::Coco101);
        for w in s.per_threshold.windows(2) {
            prop_assert!(w[1] <= w[0]);
        }
        prop_assert!(0.0 <= s.ap && s.ap <= s.ap50 && s.ap50 <= 1.0 && s.ap75 <= s.ap50);
    }

    #[test]
    fn duplicating_a_detection_never_helps((dets, gts) in case(), pick in 0usize..6) {
        prop_assume!(!dets.is_empty());
        let mut more = dets.clone();
        more.push(dets[pick % dets.len()]);
        let a = compute_ap(&dets, &gts, &coco_thresholds(), Interpolation::Coco101);
        let b = compute_ap(&more, &gts, &coco_thresholds(), Interpolation::Coco101);
        prop_assert!(b.ap <= a.ap + 1e-12);
    }
}

fn checkpoint(d: &common::TinyData) -> mmfsod::trainer::Checkpoint {
    meta_train(&d.train, &d.split, &tiny_config(), |_| {}).unwrap().checkpoint
}

#[test]
fn meta_test_rows_and_student_contract() {
    let d = tiny_data();
    let ckpt = checkpoint(&d);
    // Strip the novel names: evaluation must not need them.
    let mut pool = d.train.clone();
    for c in pool.categories.iter_mut().filter(|c| d.split.novel.contains(&c.id)) {
        c.name = None;
    }
    let t = meta_test(&ckpt, &pool, &d.test, &d.split, &[1, 2], &[0, 1]).unwrap();
    assert_eq!(t.rows.len(), 6);
    assert_eq!(t.checkpoint_digest, ckpt.digest());
    for shot in [1, 2] {
        let seeds: Vec<_> = t.rows.iter().filter(|r| r.shot == shot).map(|r| r.seed).collect();
        assert_eq!(seeds, [Some(0), Some(1), None]);
        let m = t.mean(shot).unwrap();
        let per: Vec<_> = t.rows.iter().filter(|r| r.shot == shot && r.seed.is_some()).collect();
        assert!((m.ap50 - (per[0].ap50 + per[1].ap50) / 2.0).abs() < 1e-15);
    }
    for r in &t.rows {
        assert!(0.0 <= r.ap && r.ap <= r.ap50 && r.ap50 <= 1.0 && r.ap75 <= r.ap50);
    }
    let again = meta_test(&ckpt, &d.train, &d.test, &d.split, &[1, 2], &[0, 1]).unwrap();
    assert_eq!(again.rows, t.rows);
    assert!(t.to_csv().unwrap().lines().count() == 7);
}

#[test]
fn meta_test_needs_enough_novel_instances() {
    let d = tiny_data();
    let ckpt = checkpoint(&d);
    let novel: Vec<_> = d.split.novel.iter().copied().collect();
    let pool = Dataset {
        annotations: d.train.annotations.iter().filter(|a| a.class_id != novel[0]).cloned().collect(),
        ..d.train.clone()
    };
    let r = meta_test(&ckpt, &pool, &d.test, &d.split, &[1], &[0]);
    assert!(matches!(r, Err(Error::Sampling(_)) | Err(Error::Validation(_))), "{r:?}");
}

#[test]
fn ablation_grid_shapes_and_rerun_equivalence() {
    let d = tiny_data();
    let mut base = tiny_config();
    base.train.iterations = 3;
    base.train.decay_step = 2;
    base.eval.seeds = vec![0];
    let data = AblationData {
        train: &d.train,
        split: &d.split,
        pool: &d.train,
        test: &d.test,
    };
    let grid = AblationGrid::parse("fusion;seed=0,1").unwrap();
    let report = run_ablation(&grid, &base, &data, |_| {}).unwrap();
    assert_eq!(report.rows.len(), 6);
    let csv = report.to_csv().unwrap();
    assert_eq!(csv.lines().next().unwrap(), "setting,AP,AP50,AP75");
    assert_eq!(csv.lines().count(), 7);

    let default_cell = report
        .rows
        .iter()
        .find(|r| r.setting == "fusion=addition seed=0")
        .unwrap();
    assert_eq!(cell_config(&base, &default_cell.cell).unwrap(), base);
    let ckpt = meta_train(&d.train, &d.split, &base, |_| {}).unwrap().checkpoint;
    let alone = meta_test(&ckpt, &d.train, &d.test, &d.split, &base.eval.shots, &base.eval.seeds).unwrap();
    assert_eq!(alone.rows, default_cell.metrics.rows);
    assert_eq!(alone.checkpoint_digest, default_cell.metrics.checkpoint_digest);
}

#[test]
fn unknown_axis_value_is_a_config_error() {
    assert!(matches!(AblationGrid::parse("prompt_position=middle"), Err(Error::Config(_))));
    assert!(matches!(AblationGrid::parse("fusion=addition"), Ok(_)));
    assert_eq!(AblationGrid::standard(Axis::MpgPlacement).unwrap().cells().len(), 3);
}

#[test]
fn detection_dump_round_trip_and_matching() {
    let d = tiny_data();
    let gt = &d.test.annotations[0];
    let hit = Detection { class_id: gt.class_id, bbox: gt.bbox, score: 0.9 };
    let miss = Detection {
        class_id: gt.class_id,
        bbox: BBox::new(0.0, 0.0, 1.0, 1.0).unwrap(),
        score: 0.8,
    };
    let recs = vec![DetectionRecord::new(gt.image_id, &miss), DetectionRecord::new(gt.image_id, &hit)];
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("dets.json");
    write_detections(&path, &recs).unwrap();
    let back = read_detections(&path).unwrap();
    assert_eq!(back, recs);
    assert_eq!(match_detections(&back, &d.test, 0.5).unwrap(), [false, true]);
}

#[test]
fn split_must_fit_the_pool() {
    let d = tiny_data();
    let ckpt = checkpoint(&d);
    let bad = ClassSplit::new([1, 2], [99]).unwrap();
    assert!(meta_test(&ckpt, &d.train, &d.test, &bad, &[1], &[0]).is_err());
}
