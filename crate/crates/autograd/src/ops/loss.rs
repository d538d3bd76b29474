use crate::{Graph, Scalar, Tensor, Var};

impl<T: Scalar> Graph<T> {
    /// `sum_i w_i * BCE(sigmoid(x_i), t_i)` evaluated in the stable logit form.
    pub fn bce_with_logits_sum(&self, logits: Var, targets: &Tensor<T>, weights: &Tensor<T>) -> Var {
        let xv = self.value(logits);
        assert_eq!(xv.numel(), targets.numel(), "bce: target count");
        assert_eq!(xv.numel(), weights.numel(), "bce: weight count");
        let mut total = T::zero();
        for ((&x, &t), &w) in xv.data().iter().zip(targets.data()).zip(weights.data()) {
            if w == T::zero() {
                continue;
            }
            let l = x.max(T::zero()) - x * t + (-x.abs()).exp().ln_1p();
            total = total + w * l;
        }
        let targets = targets.clone();
        let weights = weights.clone();
        self.op(Tensor::scalar(total), &[logits], move |g, _| {
            let gs = g.item();
            let data = xv
                .data()
                .iter()
                .zip(targets.data())
                .zip(weights.data())
                .map(|((&x, &t), &w)| {
                    let p = T::one() / (T::one() + (-x).exp());
                    gs * w * (p - t)
                })
                .collect();
            vec![Some(Tensor::new(xv.shape(), data))]
        })
    }

    /// `sum_i w_i * smoothL1(p_i - t_i)` with transition point `beta`.
    pub fn smooth_l1_sum(&self, pred: Var, targets: &Tensor<T>, weights: &Tensor<T>, beta: f64) -> Var {
        let pv = self.value(pred);
        assert_eq!(pv.numel(), targets.numel(), "smooth_l1: target count");
        assert_eq!(pv.numel(), weights.numel(), "smooth_l1: weight count");
        let beta = T::cast(beta);
        let half = T::cast(0.5);
        let mut total = T::zero();
        for ((&p, &t), &w) in pv.data().iter().zip(targets.data()).zip(weights.data()) {
            if w == T::zero() {
                continue;
            }
            let d = (p - t).abs();
            let l = if d < beta { half * d * d / beta } else { d - half * beta };
            total = total + w * l;
        }
        let targets = targets.clone();
        let weights = weights.clone();
        self.op(Tensor::scalar(total), &[pred], move |g, _| {
            let gs = g.item();
            let data = pv
                .data()
                .iter()
                .zip(targets.data())
                .zip(weights.data())
                .map(|((&p, &t), &w)| {
                    let d = p - t;
                    let dl = if d.abs() < beta { d / beta } else { d.signum() };
                    gs * w * dl
                })
                .collect();
            vec![Some(Tensor::new(pv.shape(), data))]
        })
    }

    /// Mean over rows of `-log softmax(logits[r])[targets[r]]`.
    pub fn cross_entropy_rows(&self, logits: Var, targets: &[usize]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rank(), 2, "cross_entropy_rows: logits must be [rows, classes]");
        let (rows, n) = (lv.dim(0), lv.dim(1));
        assert_eq!(targets.len(), rows, "cross_entropy_rows: one target per row");
        let mut probs = Vec::with_capacity(rows * n);
        let mut total = T::zero();
        for (row, &t) in lv.data().chunks(n).zip(targets) {
            assert!(t < n, "cross_entropy_rows: target {t} of {n}");
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let s: T = row.iter().map(|&v| (v - m).exp()).sum();
            let lse = m + s.ln();
            total = total + (lse - row[t]);
            probs.extend(row.iter().map(|&v| (v - lse).exp()));
        }
        let inv = T::one() / T::cast(rows as f64);
        let targets = targets.to_vec();
        self.op(Tensor::scalar(total * inv), &[logits], move |g, _| {
            let gs = g.item() * inv;
            let mut d = probs.clone();
            for (r, &t) in targets.iter().enumerate() {
                d[r * n + t] = d[r * n + t] - T::one();
            }
            for v in d.iter_mut() {
                *v = *v * gs;
            }
            vec![Some(Tensor::new(&[rows, n], d))]
        })
    }
}
