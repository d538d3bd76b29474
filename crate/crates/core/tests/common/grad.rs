//! Finite-difference checks in f64.

use mmfsod::autograd::gradcheck::{max_relative_error, numeric_gradient};
use mmfsod::autograd::{Graph, Tensor, Var};
use mmfsod::params::{Ctx, ParamStore, Trainable};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const FLOOR: f64 = 1e-6;

pub fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// A fixed random linear functional, so non-scalar outputs get a generic
/// upstream gradient.
pub fn project(g: &Graph<f64>, out: Var) -> Var {
    let r = random(&g.shape(out), 0xfeed);
    g.sum_all(g.mul(out, g.constant(r)))
}

/// Worst relative error of d f / d x.
pub fn input_error(x: &Tensor<f64>, f: impl Fn(&Graph<f64>, Var) -> Var) -> f64 {
    let g = Graph::new();
    let v = g.leaf(x.clone());
    let grads = g.backward(f(&g, v));
    let analytic = grads
        .get(v)
        .map(|t| t.to_f64_vec())
        .unwrap_or_else(|| vec![0.0; x.numel()]);
    let numeric = numeric_gradient(x, STEP, |p| {
        let g = Graph::new();
        let v = g.constant(p.clone());
        g.value(f(&g, v)).item()
    });
    max_relative_error(&analytic, numeric.data(), FLOOR)
}

/// Worst relative error of d f / d params[name].
pub fn param_error(params: &ParamStore<f64>, name: &str, f: impl Fn(&Ctx<f64>) -> Var) -> f64 {
    let g = Graph::new();
    let cx = Ctx::new(&g, params, Trainable::all());
    let grads = g.backward(f(&cx));
    let all = cx.collect_grads(&grads);
    let analytic = all
        .get(name)
        .unwrap_or_else(|| panic!("no gradient reached {name}"))
        .to_f64_vec();
    let numeric = numeric_gradient(params.tensor(name), STEP, |p| {
        let mut ps = params.clone();
        ps.get_mut(name).unwrap().value = p.clone();
        let g = Graph::new();
        let cx = Ctx::inference(&g, &ps);
        g.value(f(&cx)).item()
    });
    max_relative_error(&analytic, numeric.data(), FLOOR)
}
