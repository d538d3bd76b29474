mod common;

use std::collections::BTreeSet;

use common::{tiny_config, tiny_data, tiny_toy};
use mmfsod::dataspec::{
    build_finetune_set, load_dataset, save_dataset, toy_split, ClassPool, ClassSplit, EpisodeSampler, EpisodeSpec,
};
use mmfsod::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn manifest_round_trip() {
    let ds = tiny_toy(6, 11).generate().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("m.json");
    save_dataset(&ds, &manifest, &dir.path().join("img")).unwrap();
    let back = load_dataset(&manifest, &dir.path().join("img")).unwrap();
    assert_eq!(back.images.len(), ds.images.len());
    assert_eq!(back.categories, ds.categories);
    for (a, b) in ds.annotations.iter().zip(&back.annotations) {
        assert_eq!((a.id, a.image_id, a.class_id), (b.id, b.image_id, b.class_id));
        assert!((a.bbox.x1 - b.bbox.x1).abs() < 1e-9 && (a.bbox.y2 - b.bbox.y2).abs() < 1e-9);
    }
    for (a, b) in ds.images.iter().zip(&back.images) {
        assert_eq!(a.pixels, b.pixels);
    }
}

#[test]
fn degenerate_box_names_the_record() {
    let ds = tiny_toy(2, 12).generate().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("m.json");
    save_dataset(&ds, &manifest, &dir.path().join("img")).unwrap();
    let mut doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&manifest).unwrap()).unwrap();
    doc["annotations"][1]["bbox"][2] = serde_json::json!(0.0);
    std::fs::write(&manifest, doc.to_string()).unwrap();
    let err = load_dataset(&manifest, &dir.path().join("img")).unwrap_err();
    assert!(err.to_string().contains("annotations[1]"), "{err}");
}

#[test]
fn missing_image_is_an_io_error() {
    let ds = tiny_toy(2, 13).generate().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("m.json");
    save_dataset(&ds, &manifest, &dir.path().join("img")).unwrap();
    std::fs::remove_file(dir.path().join("img").join(&ds.images[0].file_name)).unwrap();
    assert!(matches!(load_dataset(&manifest, &dir.path().join("img")), Err(Error::Io { .. })));
}

#[test]
fn overlapping_split_is_rejected() {
    assert!(ClassSplit::new([1, 2, 3], [3, 4]).is_err());
    let s = toy_split(12);
    assert_eq!((s.base.len(), s.novel.len()), (8, 4));
    assert!(s.base.is_disjoint(&s.novel));
}

#[test]
fn toy_generation_is_seeded() {
    let a = tiny_toy(5, 1).generate().unwrap();
    let b = tiny_toy(5, 1).generate().unwrap();
    let c = tiny_toy(5, 2).generate().unwrap();
    assert_eq!(a.annotations, b.annotations);
    assert_eq!(a.images[0].pixels, b.images[0].pixels);
    assert_ne!(a.images[0].pixels, c.images[0].pixels);
}

#[test]
fn episodes_are_exact_and_consistent() {
    let d = tiny_data();
    let spec = EpisodeSpec::from_config(&tiny_config());
    let sampler = EpisodeSampler::new(&d.train, &d.split, ClassPool::Base, &spec).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let ep = sampler.sample(&mut rng).unwrap();
        assert_eq!(ep.classes().len(), spec.way);
        assert_eq!(ep.queries.len(), spec.queries);
        for c in ep.classes() {
            assert!(d.split.base.contains(&c));
            let crops = &ep.support[&c];
            assert_eq!(crops.len(), spec.shot);
            assert!(crops.iter().all(|s| s.class_id == c));
            let ids: BTreeSet<u64> = crops.iter().map(|s| s.annotation_id).collect();
            assert_eq!(ids.len(), spec.shot, "support annotations repeat");
            assert!(crops.iter().all(|s| s.pixels.dimensions() == (16, 16)));
        }
        let present: BTreeSet<_> = ep
            .queries
            .iter()
            .flat_map(|q| d.train.annotations.iter().filter(move |a| a.image_id == q.image_id))
            .map(|a| a.class_id)
            .collect();
        for n in &ep.negative {
            assert!(!present.contains(n), "negative class in a query image");
        }
        assert!(ep.queries.iter().all(|q| !q.boxes.is_empty()));
    }
}

#[test]
fn too_few_instances_is_a_sampling_error() {
    let d = tiny_data();
    let mut spec = EpisodeSpec::from_config(&tiny_config());
    spec.shot = 10_000;
    assert!(matches!(
        EpisodeSampler::new(&d.train, &d.split, ClassPool::Base, &spec),
        Err(Error::Sampling(_))
    ));
}

#[test]
fn finetune_set_is_balanced() {
    let d = tiny_data();
    let ft = build_finetune_set(&d.train, &d.split, 2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let counts = ft.class_counts();
    assert_eq!(counts.len(), 12);
    assert!(counts.values().all(|&n| n == 2));
}
