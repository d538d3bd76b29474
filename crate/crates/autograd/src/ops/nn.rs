use crate::{Graph, Scalar, Tensor, Var};

fn rows_of(shape: &[usize]) -> (usize, usize) {
    let n = *shape.last().expect("rank >= 1");
    (shape.iter().product::<usize>() / n.max(1), n)
}

impl<T: Scalar> Graph<T> {
    /// Softmax over the last axis.
    pub fn softmax_rows(&self, a: Var) -> Var {
        let av = self.value(a);
        let (_, n) = rows_of(av.shape());
        let mut out = (*av).clone();
        for row in out.data_mut().chunks_mut(n) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s = s + *v;
            }
            for v in row.iter_mut() {
                *v = *v / s;
            }
        }
        let y = out.clone();
        self.op(out, &[a], move |g, _| {
            let mut d = g.clone();
            for (drow, yrow) in d.data_mut().chunks_mut(n).zip(y.data().chunks(n)) {
                let dot: T = drow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                for (dv, &yv) in drow.iter_mut().zip(yrow) {
                    *dv = yv * (*dv - dot);
                }
            }
            vec![Some(d)]
        })
    }

    /// Zero-mean unit-variance normalisation over the last axis (no affine).
    pub fn layer_norm_rows(&self, a: Var, eps: f64) -> Var {
        let av = self.value(a);
        let (rows, n) = rows_of(av.shape());
        let eps = T::cast(eps);
        let nf = T::cast(n as f64);
        let mut out = (*av).clone();
        let mut inv_std = Vec::with_capacity(rows);
        for row in out.data_mut().chunks_mut(n) {
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let is = T::one() / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        let y = out.clone();
        self.op(out, &[a], move |g, _| {
            let mut d = g.clone();
            for ((drow, yrow), &is) in d.data_mut().chunks_mut(n).zip(y.data().chunks(n)).zip(&inv_std) {
                let mg = drow.iter().copied().sum::<T>() / nf;
                let mgy = drow.iter().zip(yrow).map(|(&a, &b)| a * b).sum::<T>() / nf;
                for (dv, &yv) in drow.iter_mut().zip(yrow) {
                    *dv = is * (*dv - mg - yv * mgy);
                }
            }
            vec![Some(d)]
        })
    }

    /// `x / max(|x|, floor)` row by row over the last axis.
    pub fn l2_normalize_rows(&self, a: Var, floor: f64) -> Var {
        let av = self.value(a);
        let (_, n) = rows_of(av.shape());
        let floor = T::cast(floor);
        let mut out = (*av).clone();
        let mut denom = Vec::new();
        for row in out.data_mut().chunks_mut(n) {
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            let d = norm.max(floor);
            for v in row.iter_mut() {
                *v = *v / d;
            }
            denom.push((d, norm > floor));
        }
        let y = out.clone();
        self.op(out, &[a], move |g, _| {
            let mut d = g.clone();
            for ((drow, yrow), &(den, scaled)) in d.data_mut().chunks_mut(n).zip(y.data().chunks(n)).zip(&denom) {
                let dot = if scaled {
                    drow.iter().zip(yrow).map(|(&a, &b)| a * b).sum::<T>()
                } else {
                    T::zero()
                };
                for (dv, &yv) in drow.iter_mut().zip(yrow) {
                    *dv = (*dv - yv * dot) / den;
                }
            }
            vec![Some(d)]
        })
    }

    /// Euclidean norm of each row: `[..., n]` to `[rows]`. The gradient at a zero
    /// row is taken as zero.
    pub fn row_norms(&self, a: Var) -> Var {
        let av = self.value(a);
        let (rows, n) = rows_of(av.shape());
        let norms: Vec<T> = av
            .data()
            .chunks(n)
            .map(|r| r.iter().map(|&v| v * v).sum::<T>().sqrt())
            .collect();
        let out = Tensor::new(&[rows], norms.clone());
        self.op(out, &[a], move |g, _| {
            let mut d = (*av).clone();
            for ((row, &nv), &gv) in d.data_mut().chunks_mut(n).zip(&norms).zip(g.data()) {
                let s = if nv > T::zero() { gv / nv } else { T::zero() };
                for v in row.iter_mut() {
                    *v = *v * s;
                }
            }
            vec![Some(d)]
        })
    }
}
