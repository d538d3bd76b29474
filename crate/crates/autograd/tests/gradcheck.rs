use mmfsod_autograd::gradcheck::{max_relative_error, numeric_gradient};
use mmfsod_autograd::{Conv2d, Graph, RoiBox, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// Checks d/d(inputs) of `sum(op(inputs) * probe)` against central differences.
fn check(inputs: Vec<Tensor<f64>>, op: impl Fn(&Graph<f64>, &[Var]) -> Var) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let probe_shape = {
        let g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = op(&g, &vars);
        g.shape(out)
    };
    let probe = rand_tensor(&mut rng, &probe_shape);
    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = g.value(op(&g, &vars));
        out.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
    };
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = op(&g, &vars);
    let p = g.constant(probe.clone());
    let loss = g.sum_all(g.mul(out, p));
    let grads = g.backward(loss);
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        let numeric = numeric_gradient(&inputs[i], 1e-6, |x| {
            let mut xs = inputs.clone();
            xs[i] = x.clone();
            eval(&xs)
        });
        let err = max_relative_error(&analytic.to_f64_vec(), numeric.data(), 1e-3);
        assert!(err < 1e-4, "input {i}: relative error {err}");
    }
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(7)
}

#[test]
fn elementwise_ops() {
    let mut r = rng();
    let a = rand_tensor(&mut r, &[3, 4]);
    let b = rand_tensor(&mut r, &[3, 4]);
    check(vec![a.clone(), b.clone()], |g, v| g.add(v[0], v[1]));
    check(vec![a.clone(), b.clone()], |g, v| g.sub(v[0], v[1]));
    check(vec![a.clone(), b.clone()], |g, v| g.mul(v[0], v[1]));
    check(vec![a.clone()], |g, v| g.scale(v[0], 2.5));
    check(vec![a.map(|x| if x.abs() < 0.05 { 0.3 } else { x })], |g, v| g.relu(v[0]));
}

#[test]
fn broadcast_ops() {
    let mut r = rng();
    let a = rand_tensor(&mut r, &[2, 3, 4]);
    let v = rand_tensor(&mut r, &[4]);
    check(vec![a.clone(), v.clone()], |g, x| g.add_bias(x[0], x[1]));
    check(vec![a.clone(), v.clone()], |g, x| g.mul_bias(x[0], x[1]));
    check(vec![v.clone()], |g, x| g.broadcast_rows(x[0], 3));
    let maps = rand_tensor(&mut r, &[2, 3, 3, 4]);
    let vecs = rand_tensor(&mut r, &[3, 4]);
    check(vec![maps, vecs], |g, x| g.modulate(x[0], x[1]));
}

#[test]
fn matmul_ops() {
    let mut r = rng();
    let a = rand_tensor(&mut r, &[2, 3, 5]);
    let w = rand_tensor(&mut r, &[5, 4]);
    let b = rand_tensor(&mut r, &[4]);
    check(vec![a.clone(), w.clone()], |g, x| g.matmul(x[0], x[1]));
    check(vec![a, w, b], |g, x| g.linear(x[0], x[1], x[2]));
    let p = rand_tensor(&mut r, &[3, 5]);
    let q = rand_tensor(&mut r, &[4, 5]);
    check(vec![p, q], |g, x| g.matmul_nt(x[0], x[1]));
}

#[test]
fn conv_ops() {
    let mut r = rng();
    for &(k, s, p) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (2, 2, 0)] {
        let x = rand_tensor(&mut r, &[2, 5, 6, 3]);
        let w = rand_tensor(&mut r, &[k * k * 3, 4]);
        let b = rand_tensor(&mut r, &[4]);
        check(vec![x, w, b], move |g, v| g.conv2d(v[0], v[1], v[2], Conv2d::new(k, s, p)));
    }
}

#[test]
fn reductions_and_reshapes() {
    let mut r = rng();
    let a = rand_tensor(&mut r, &[6, 2, 2, 3]);
    check(vec![a.clone()], |g, v| g.group_mean(v[0], 2));
    check(vec![a.clone()], |g, v| g.spatial_mean(v[0]));
    check(vec![a.clone()], |g, v| g.sum_all(v[0]));
    check(vec![a.clone()], |g, v| g.mean_all(v[0]));
    check(vec![a.clone()], |g, v| g.reshape(v[0], &[12, 6]));
    check(vec![a.clone()], |g, v| g.gather_rows(v[0], &[1, 1, 5, 0]));
    check(vec![a.clone()], |g, v| g.slice_rows(v[0], 2, 5));
    let m = rand_tensor(&mut r, &[4, 3]);
    check(vec![m.clone()], |g, v| g.mean_rows(v[0]));
    let n = rand_tensor(&mut r, &[2, 3]);
    check(vec![m.clone(), n.clone()], |g, v| g.concat_rows(&[v[0], v[1]]));
    let o = rand_tensor(&mut r, &[4, 2]);
    check(vec![m, o], |g, v| g.concat_last(&[v[0], v[1]]));
}

#[test]
fn normalisations() {
    let mut r = rng();
    let a = rand_tensor(&mut r, &[3, 5]);
    check(vec![a.clone()], |g, v| g.softmax_rows(v[0]));
    check(vec![a.clone()], |g, v| g.layer_norm_rows(v[0], 1e-5));
    check(vec![a.clone()], |g, v| g.l2_normalize_rows(v[0], 1e-12));
    check(vec![a.scale(0.1)], |g, v| g.l2_normalize_rows(v[0], 1.0));
    check(vec![a.clone()], |g, v| g.row_norms(v[0]));
}

#[test]
fn losses() {
    let mut r = rng();
    let x = rand_tensor(&mut r, &[6]).scale(3.0);
    let t = Tensor::from_f64(&[6], &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
    let w = Tensor::from_f64(&[6], &[0.5, 1.0, 0.0, 2.0, 1.0, 1.0]);
    let (t2, w2) = (t.clone(), w.clone());
    check(vec![x.clone()], move |g, v| g.bce_with_logits_sum(v[0], &t2, &w2));
    let target = rand_tensor(&mut r, &[6]);
    check(vec![x.clone()], move |g, v| g.smooth_l1_sum(v[0], &target, &w, 1.0 / 9.0));
    let logits = rand_tensor(&mut r, &[3, 4]).scale(4.0);
    check(vec![logits], |g, v| g.cross_entropy_rows(v[0], &[0, 3, 1]));
}

#[test]
fn roi_align_gradient() {
    let mut r = rng();
    let feat = rand_tensor(&mut r, &[2, 5, 5, 3]);
    let rois = vec![
        RoiBox { batch: 0, x1: 3.3, y1: 6.1, x2: 30.7, y2: 25.0 },
        RoiBox { batch: 1, x1: 0.0, y1: 0.0, x2: 40.0, y2: 40.0 },
    ];
    check(vec![feat], move |g, v| g.roi_align(v[0], &rois, 3, 1.0 / 8.0));
}

#[test]
fn detached_branch_gets_no_gradient() {
    let g = Graph::<f64>::new();
    let a = g.leaf(Tensor::from_f64(&[2], &[1.0, 2.0]));
    let d = g.detach(a);
    let loss = g.sum_all(g.mul(d, a));
    let grads = g.backward(loss);
    assert_eq!(grads.get(a).unwrap().data(), &[1.0, 2.0]);
    assert!(grads.get(d).is_none());
}
