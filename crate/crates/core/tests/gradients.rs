//! Analytic gradients against central differences at 64-bit.

mod common;

use common::grad::{input_error, param_error, project, random};
use common::tiny_config;
use mmfsod::autograd::Tensor;
use mmfsod::config::{FusionMode, GeneratorVariant};
use mmfsod::encoders::text_encode_var;
use mmfsod::losses::{contrastive_loss, kd_loss};
use mmfsod::mpg::{fuse, generate_prompt, student_semantic_prototype, Role, Stage};
use mmfsod::Model64;

const TOL: f64 = 1e-4;

fn model(variant: GeneratorVariant, fusion: FusionMode) -> Model64 {
    let mut cfg = tiny_config();
    cfg.mpg.generator_variant = variant;
    cfg.mpg.fusion = fusion;
    let mut m = Model64::new(&cfg);
    // The semantic map starts at zero; move it off zero so gradients reach
    // the semantic side.
    for (i, name) in ["mpg.rpn.proj.w", "mpg.rpn.proj.b"].iter().enumerate() {
        let shape = m.params.tensor(name).shape().to_vec();
        m.params.get_mut(name).unwrap().value = random(&shape, 40 + i as u64).scale(0.5);
    }
    m
}

#[test]
fn kd_loss_gradient() {
    let t = random(&[3, 5], 2);
    let e = input_error(&random(&[3, 5], 1), |g, s| {
        kd_loss(g, s, g.constant(t.clone())).unwrap()
    });
    assert!(e < TOL, "kd: {e}");
}

#[test]
fn contrastive_loss_gradient() {
    for (floor, tau) in [(1.0, 0.5), (1e-12, 0.07)] {
        let sem = random(&[3, 6], 4).scale(3.0);
        let e = input_error(&random(&[3, 6], 3).scale(3.0), |g, v| {
            contrastive_loss(g, v, g.constant(sem.clone()), tau, floor).unwrap()
        });
        assert!(e < TOL, "contrastive floor {floor} tau {tau}: {e}");
        let vis = random(&[3, 6], 5).scale(3.0);
        let e = input_error(&sem, |g, s| contrastive_loss(g, g.constant(vis.clone()), s, tau, floor).unwrap());
        assert!(e < TOL, "contrastive semantic side: {e}");
    }
}

#[test]
fn prompt_generator_gradients() {
    let variants = [
        (GeneratorVariant::OneLayer, "fc.w"),
        (GeneratorVariant::TwoLayer, "fc1.w"),
        (GeneratorVariant::PreTransformer, "k"),
        (GeneratorVariant::PostTransformer, "v"),
    ];
    for (variant, pname) in variants {
        let m = model(variant, FusionMode::Addition);
        let pooled = random(&[1, 8], 6);
        let cells = random(&[4, 8], 7);
        // Through the frozen encoder so the post-transformer refinement counts.
        let run = |cx: &mmfsod::params::Ctx<f64>, p, c| {
            let prompt = generate_prompt(cx, &m.cfg, &m.mpg, Stage::Rpn, Role::Student, p, c).unwrap();
            let sem = student_semantic_prototype(cx, &m.cfg, &m.mpg, Stage::Rpn, prompt, c).unwrap();
            project(cx.g, cx.g.concat_rows(&[sem, prompt]))
        };
        let e = param_error(&m.params, &format!("mpg.rpn.student.{pname}"), |cx| {
            run(cx, cx.g.constant(pooled.clone()), cx.g.constant(cells.clone()))
        });
        assert!(e < TOL, "{variant:?} param {pname}: {e}");
        let e = common::grad::input_error(&cells, |g, c| {
            let cx = mmfsod::params::Ctx::inference(g, &m.params);
            run(&cx, g.constant(pooled.clone()), c)
        });
        if matches!(variant, GeneratorVariant::PreTransformer | GeneratorVariant::PostTransformer) {
            assert!(e < TOL, "{variant:?} cells: {e}");
        }
        let e = common::grad::input_error(&pooled, |g, p| {
            let cx = mmfsod::params::Ctx::inference(g, &m.params);
            run(&cx, p, g.constant(cells.clone()))
        });
        assert!(e < TOL, "{variant:?} pooled: {e}");
    }
}

#[test]
fn fusion_gradients() {
    for mode in [FusionMode::Addition, FusionMode::Multiplication, FusionMode::Concatenation] {
        let m = model(GeneratorVariant::OneLayer, mode);
        let sem = random(&[1, 8], 8);
        let vis = random(&[1, 2, 2, 8], 9);
        let e = input_error(&sem, |g, s| {
            let cx = mmfsod::params::Ctx::inference(g, &m.params);
            project(g, fuse(&cx, Stage::Rpn, mode, s, g.constant(vis.clone())))
        });
        assert!(e < TOL, "{mode:?} semantic: {e}");
        let e = input_error(&vis, |g, v| {
            let cx = mmfsod::params::Ctx::inference(g, &m.params);
            project(g, fuse(&cx, Stage::Rpn, mode, g.constant(sem.clone()), v))
        });
        assert!(e < TOL, "{mode:?} visual: {e}");
        let e = param_error(&m.params, "mpg.rpn.proj.w", |cx| {
            project(cx.g, fuse(cx, Stage::Rpn, mode, cx.g.constant(sem.clone()), cx.g.constant(vis.clone())))
        });
        assert!(e < TOL, "{mode:?} map: {e}");
    }
}

#[test]
fn text_encoder_input_gradient() {
    let m = model(GeneratorVariant::OneLayer, FusionMode::Addition);
    let seq: Tensor<f64> = random(&[5, 8], 10);
    let e = input_error(&seq, |g, s| {
        let cx = mmfsod::params::Ctx::inference(g, &m.params);
        project(g, text_encode_var(&cx, &m.cfg, s).unwrap())
    });
    assert!(e < TOL, "text encoder: {e}");
}
