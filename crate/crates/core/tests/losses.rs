use mmfsod::autograd::{Graph, Tensor};
use mmfsod::geometry::BBox;
use mmfsod::losses::{assign_targets, contrastive_loss, kd_loss, total_loss, Sampling};
use mmfsod::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn kd(s: &[f64], t: &[f64], n: usize) -> f64 {
    let g = Graph::<f64>::new();
    let c = s.len() / n;
    let a = g.leaf(Tensor::new(&[n, c], s.to_vec()));
    let b = g.constant(Tensor::new(&[n, c], t.to_vec()));
    g.value(kd_loss(&g, a, b).unwrap()).item()
}

fn con(v: &[f64], s: &[f64], n: usize, tau: f64) -> f64 {
    let g = Graph::<f64>::new();
    let c = v.len() / n;
    let a = g.leaf(Tensor::new(&[n, c], v.to_vec()));
    let b = g.leaf(Tensor::new(&[n, c], s.to_vec()));
    g.value(contrastive_loss(&g, a, b, tau, 1e-12).unwrap()).item()
}

#[test]
fn kd_identical_is_zero() {
    let x = [0.3, -1.0, 2.5, 0.0, 4.0, -2.0];
    assert_eq!(kd(&x, &x, 2), 0.0);
}

#[test]
fn kd_orthonormal_pair_is_sqrt_two() {
    assert!((kd(&[1.0, 0.0], &[0.0, 1.0], 1) - 2f64.sqrt()).abs() < 1e-9);
}

#[test]
fn kd_is_mean_of_row_distances() {
    // Rows at distances 3 and 5 (3-4-5 triangle).
    let v = kd(&[3.0, 0.0, 0.0, 4.0], &[0.0, 0.0, 0.0, 0.0], 2);
    assert!((v - 3.5).abs() < 1e-12);
}

#[test]
fn contrastive_single_pair_is_zero() {
    assert_eq!(con(&[0.2, 0.9], &[-1.0, 0.4], 1, 0.07), 0.0);
}

#[test]
fn contrastive_orthonormal_pair() {
    let expect = (1.0 + (-1f64).exp()).ln();
    let v = con(&[1.0, 0.0, 0.0, 1.0], &[1.0, 0.0, 0.0, 1.0], 2, 1.0);
    assert!((v - expect).abs() < 1e-6);
}

#[test]
fn contrastive_rejects_bad_temperature() {
    let g = Graph::<f64>::new();
    let a = g.leaf(Tensor::new(&[1, 2], vec![1.0, 0.0]));
    assert!(matches!(contrastive_loss(&g, a, a, 0.0, 1.0), Err(Error::Config(_))));
    assert!(matches!(contrastive_loss(&g, a, a, -1.0, 1.0), Err(Error::Config(_))));
}

#[test]
fn shape_mismatch_is_an_error() {
    let g = Graph::<f64>::new();
    let a = g.leaf(Tensor::zeros(&[2, 3]));
    let b = g.leaf(Tensor::zeros(&[2, 4]));
    assert!(matches!(kd_loss(&g, a, b), Err(Error::Shape(_))));
    assert!(matches!(contrastive_loss(&g, a, b, 1.0, 1.0), Err(Error::Shape(_))));
}

#[test]
fn total_is_plain_sum() {
    let b = total_loss(0.5, 0.25, 1.0, 2.0, 0).unwrap();
    assert_eq!(b.total, 3.75);
}

#[test]
fn total_names_the_non_finite_component() {
    match total_loss(0.1, 0.2, f64::NAN, 0.3, 17) {
        Err(Error::NonFinite { iteration, component }) => {
            assert_eq!(iteration, 17);
            assert_eq!(component, "kd");
        }
        other => panic!("expected NonFinite, got {other:?}"),
    }
}

#[test]
fn target_sampling_respects_budget_and_fraction() {
    let gts = [BBox::new(10.0, 10.0, 30.0, 30.0).unwrap()];
    let mut cands = Vec::new();
    for i in 0..40 {
        let o = i as f64;
        cands.push(BBox::new(o, o, o + 20.0, o + 20.0).unwrap());
    }
    let s = Sampling {
        samples: 16,
        positive_fraction: 0.25,
        positive_iou: 0.7,
        negative_iou: 0.3,
        force_best: true,
    };
    let t = assign_targets(&cands, &gts, &s, &mut ChaCha8Rng::seed_from_u64(0));
    assert!(t.sampled() <= 16);
    assert!(t.positives() >= 1 && t.positives() <= 4);
}

proptest! {
    #[test]
    fn kd_is_non_negative_and_symmetric(
        a in prop::collection::vec(-5.0f64..5.0, 6),
        b in prop::collection::vec(-5.0f64..5.0, 6),
    ) {
        let x = kd(&a, &b, 2);
        prop_assert!(x >= 0.0);
        prop_assert!((x - kd(&b, &a, 2)).abs() < 1e-12);
    }

    #[test]
    fn contrastive_is_bounded_by_chance_at_unit_temperature(
        a in prop::collection::vec(-3.0f64..3.0, 8),
        b in prop::collection::vec(-3.0f64..3.0, 8),
    ) {
        // With cosines in [-1, 1] and tau = 1 every logit gap is at most 2.
        let n = 4.0f64;
        let x = con(&a, &b, 4, 1.0);
        prop_assert!(x >= 0.0);
        prop_assert!(x <= (1.0 + (n - 1.0) * 2f64.exp()).ln() + 1e-9);
    }
}
