//! Measurements shared by the module tests and the acceptance report.

use std::collections::BTreeMap;

use mmfsod::autograd::{Graph, RoiBox, Tensor};
use mmfsod::config::{FusionMode, GeneratorVariant};
use mmfsod::geometry::{self, BBox};
use mmfsod::mpg::{fuse, generate_prompt, visual_prototype, visual_prototype_of, Role, Stage};
use mmfsod::params::Ctx;
use mmfsod::Model64;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::grad::random;
use super::oracles;
use super::tiny_config;

fn random_box<R: Rng>(rng: &mut R, span: f64) -> BBox {
    let x = rng.gen_range(0.0..span);
    let y = rng.gen_range(0.0..span);
    BBox::new(x, y, x + rng.gen_range(1.0..span), y + rng.gen_range(1.0..span)).unwrap()
}

/// Instances whose AP differs from the oracle, out of `trials` random
/// instances with at most five detections and five ground truths.
pub fn ap_oracle_mismatches(trials: u64) -> usize {
    use mmfsod::config::Interpolation;
    use mmfsod::detector::Detection;
    use mmfsod::evalkit::{coco_thresholds, compute_ap, GroundTruth};
    let mut bad = 0;
    for seed in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nd = rng.gen_range(0..=5);
        let ng = rng.gen_range(0..=5);
        let dets: Vec<(u64, u32, BBox, f64)> = (0..nd)
            .map(|_| (rng.gen_range(0..2), rng.gen_range(0..2), random_box(&mut rng, 10.0), rng.gen_range(0.0..1.0)))
            .collect();
        let gts: Vec<(u64, u32, BBox)> = (0..ng)
            .map(|_| (rng.gen_range(0..2), rng.gen_range(0..2), random_box(&mut rng, 10.0)))
            .collect();
        let d: Vec<_> = dets
            .iter()
            .map(|&(i, c, bbox, score)| (i, Detection { class_id: c, bbox, score }))
            .collect();
        let g: Vec<_> = gts
            .iter()
            .map(|&(image_id, class_id, bbox)| GroundTruth { image_id, class_id, bbox })
            .collect();
        let s = compute_ap(&d, &g, &coco_thresholds(), Interpolation::Coco101);
        let per: Vec<f64> = coco_thresholds().iter().map(|&t| oracles::mean_ap(&dets, &gts, t)).collect();
        let ap = per.iter().sum::<f64>() / per.len() as f64;
        if s.per_threshold != per || s.ap != ap {
            bad += 1;
        }
    }
    bad
}

/// Instances where greedy NMS differs from the oracle.
pub fn nms_oracle_mismatches(trials: u64) -> usize {
    let mut bad = 0;
    for seed in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let n = rng.gen_range(0..=20);
        let boxes: Vec<BBox> = (0..n).map(|_| random_box(&mut rng, 20.0)).collect();
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let thr = rng.gen_range(0.1..0.9);
        if geometry::nms(&boxes, &scores, thr) != oracles::nms(&boxes, &scores, thr) {
            bad += 1;
        }
    }
    bad
}

/// Worst deviation of RoIAlign from the bilinear oracle on random maps.
pub fn roi_oracle_error(trials: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        let (h, w, c) = (rng.gen_range(2..7), rng.gen_range(2..7), 3);
        let feat: Tensor<f32> = random(&[1, h, w, c], seed).cast();
        let scale = 0.25;
        let b = BBox::new(
            rng.gen_range(-4.0..10.0),
            rng.gen_range(-4.0..10.0),
            rng.gen_range(12.0..30.0),
            rng.gen_range(12.0..30.0),
        )
        .unwrap();
        let out = rng.gen_range(1..5);
        let g = Graph::<f32>::new();
        let roi = RoiBox { batch: 0, x1: b.x1, y1: b.y1, x2: b.x2, y2: b.y2 };
        let got = g.value(g.roi_align(g.constant(feat.clone()), &[roi], out, scale));
        let fd = feat.to_f64_vec();
        for ch in 0..c {
            let grid: Vec<f64> = (0..h * w).map(|k| fd[k * c + ch]).collect();
            let want = oracles::roi_align(&grid, h, w, &b, out, scale);
            for (k, v) in want.iter().enumerate() {
                worst = worst.max((got.data()[k * c + ch] as f64 - v).abs());
            }
        }
    }
    worst
}

/// Worst deviation of every generator variant from a loop-based oracle.
pub fn prompt_oracle_error() -> f64 {
    let mut worst: f64 = 0.0;
    for variant in [
        GeneratorVariant::OneLayer,
        GeneratorVariant::TwoLayer,
        GeneratorVariant::PreTransformer,
        GeneratorVariant::PostTransformer,
    ] {
        let mut cfg = tiny_config();
        cfg.mpg.generator_variant = variant;
        let m = Model64::new(&cfg);
        let (cv, ct, len) = (cfg.model.feature_dim, cfg.model.text_dim, cfg.mpg.prompt_len);
        let pooled = random(&[1, cv], 3);
        let cells = random(&[4, cv], 4);
        let g = Graph::new();
        let cx = Ctx::inference(&g, &m.params);
        let got = g.value(
            generate_prompt(
                &cx,
                &cfg.model,
                &cfg.mpg,
                Stage::Rcnn,
                Role::Teacher,
                g.constant(pooled.clone()),
                g.constant(cells.clone()),
            )
            .unwrap(),
        );
        let p = |s: &str| m.params.tensor(&format!("mpg.rcnn.teacher.{s}")).to_f64_vec();
        let want: Vec<f64> = match variant {
            GeneratorVariant::OneLayer => oracles::affine(pooled.data(), &p("fc.w"), &p("fc.b"), 1, cv, len * ct),
            GeneratorVariant::TwoLayer => {
                let h: Vec<f64> = oracles::affine(pooled.data(), &p("fc1.w"), &p("fc1.b"), 1, cv, cv)
                    .into_iter()
                    .map(|v| v.max(0.0))
                    .collect();
                oracles::affine(&h, &p("fc2.w"), &p("fc2.b"), 1, cv, len * ct)
            }
            GeneratorVariant::PreTransformer => {
                let q = p("queries");
                let zero = vec![0.0; ct];
                let k = oracles::affine(cells.data(), &p("k"), &zero, 4, cv, ct);
                let v = oracles::affine(cells.data(), &p("v"), &zero, 4, cv, ct);
                let mut out = q.clone();
                for i in 0..len {
                    let logits: Vec<f64> = (0..4)
                        .map(|j| (0..ct).map(|t| q[i * ct + t] * k[j * ct + t]).sum::<f64>() / (ct as f64).sqrt())
                        .collect();
                    let a = oracles::softmax(&logits);
                    for t in 0..ct {
                        out[i * ct + t] += (0..4).map(|j| a[j] * v[j * ct + t]).sum::<f64>();
                    }
                }
                out
            }
            GeneratorVariant::PostTransformer => p("prompt"),
        };
        assert_eq!(got.numel(), len * ct);
        for (a, b) in got.data().iter().zip(&want) {
            worst = worst.max((a - b).abs());
        }
    }
    worst
}

/// Whether averaging shuffled support maps reproduces the unshuffled mean
/// to rounding, on both the tensor and the graph path.
pub fn permutation_invariance_error(trials: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(3000 + seed);
        let k = rng.gen_range(1..8);
        let maps: Vec<Tensor<f64>> = (0..k).map(|i| random(&[2, 2, 3], seed * 100 + i)).collect();
        let base = visual_prototype_of(&maps).unwrap();
        let mut shuffled = maps.clone();
        shuffled.shuffle(&mut rng);
        worst = worst.max(base.max_abs_diff(&visual_prototype_of(&shuffled).unwrap()));

        let stack = |ms: &[Tensor<f64>]| {
            let data: Vec<f64> = ms.iter().flat_map(|m| m.data().to_vec()).collect();
            Tensor::new(&[ms.len(), 2, 2, 3], data)
        };
        let g = Graph::new();
        let params = mmfsod::params::ParamStore::new();
        let cx = Ctx::inference(&g, &params);
        let a = g.value(visual_prototype(&cx, g.constant(stack(&maps)), k as usize).unwrap());
        let b = g.value(visual_prototype(&cx, g.constant(stack(&shuffled)), k as usize).unwrap());
        worst = worst.max(a.max_abs_diff(&b));
        worst = worst.max(a.max_abs_diff(&base.clone().reshape(&[1, 2, 2, 3])));
    }
    worst
}

/// Fusion modes whose freshly initialised output is not bit-identical to the
/// visual prototype.
pub fn zero_init_fusion_failures() -> Vec<FusionMode> {
    let mut bad = Vec::new();
    for mode in [FusionMode::Addition, FusionMode::Multiplication, FusionMode::Concatenation] {
        let mut cfg = tiny_config();
        cfg.mpg.fusion = mode;
        let m = Model64::new(&cfg);
        let vis = random(&[1, 2, 2, 8], 5).scale(7.0);
        let sem = random(&[1, 8], 6).scale(9.0);
        let g = Graph::new();
        let cx = Ctx::inference(&g, &m.params);
        let out = g.value(fuse(&cx, Stage::Rpn, mode, g.constant(sem), g.constant(vis.clone())));
        if out.data() != vis.data() {
            bad.push(mode);
        }
    }
    bad
}

/// Per-class support-count histogram over `n` episodes; every count must be
/// exactly the configured shot.
pub fn episode_shot_counts(n: usize) -> BTreeMap<usize, usize> {
    use mmfsod::dataspec::{ClassPool, EpisodeSampler, EpisodeSpec};
    let data = super::tiny_data();
    let spec = EpisodeSpec::from_config(&tiny_config());
    let sampler = EpisodeSampler::new(&data.train, &data.split, ClassPool::Base, &spec).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut hist = BTreeMap::new();
    for _ in 0..n {
        let ep = sampler.sample(&mut rng).unwrap();
        for crops in ep.support.values() {
            *hist.entry(crops.len()).or_insert(0) += 1;
        }
    }
    hist
}
