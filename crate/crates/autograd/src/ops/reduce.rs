use crate::{Graph, Scalar, Tensor, Var};

impl<T: Scalar> Graph<T> {
    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let av = self.value(a);
        let old = av.shape().to_vec();
        let out = (*av).clone().reshape(shape);
        self.op(out, &[a], move |g, _| vec![Some(g.clone().reshape(&old))])
    }

    /// Views `a` as `[outer, mid, inner]` and averages over `mid`.
    fn mean_mid(&self, a: Var, outer: usize, mid: usize, out_shape: Vec<usize>) -> Var {
        let av = self.value(a);
        assert!(mid > 0, "mean over an empty axis");
        let inner = av.numel() / (outer * mid);
        assert_eq!(outer * mid * inner, av.numel());
        let inv = T::one() / T::cast(mid as f64);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for m in 0..mid {
                let src = &av.data()[(o * mid + m) * inner..(o * mid + m + 1) * inner];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = *d + s;
                }
            }
            for d in dst.iter_mut() {
                *d = *d * inv;
            }
        }
        let in_shape = av.shape().to_vec();
        self.op(Tensor::new(&out_shape, out), &[a], move |g, _| {
            let mut d = Vec::with_capacity(outer * mid * inner);
            for o in 0..outer {
                let src = &g.data()[o * inner..(o + 1) * inner];
                for _ in 0..mid {
                    d.extend(src.iter().map(|&v| v * inv));
                }
            }
            vec![Some(Tensor::new(&in_shape, d))]
        })
    }

    /// `[G * K, rest...]` to `[G, rest...]`, averaging each run of `K` rows.
    pub fn group_mean(&self, a: Var, groups: usize) -> Var {
        let shape = self.shape(a);
        assert!(groups > 0 && shape[0] % groups == 0, "group_mean: {} rows into {} groups", shape[0], groups);
        let mut out = shape.clone();
        out[0] = groups;
        self.mean_mid(a, groups, shape[0] / groups, out)
    }

    /// `[N, H, W, C]` to `[N, C]`.
    pub fn spatial_mean(&self, a: Var) -> Var {
        let shape = self.shape(a);
        assert_eq!(shape.len(), 4, "spatial_mean: expected NHWC");
        self.mean_mid(a, shape[0], shape[1] * shape[2], vec![shape[0], shape[3]])
    }

    /// Mean over the rows of a `[L, C]` matrix, giving `[C]`.
    pub fn mean_rows(&self, a: Var) -> Var {
        let shape = self.shape(a);
        assert_eq!(shape.len(), 2, "mean_rows: expected a matrix");
        self.mean_mid(a, 1, shape[0], vec![shape[1]])
    }

    pub fn sum_all(&self, a: Var) -> Var {
        let av = self.value(a);
        let shape = av.shape().to_vec();
        self.op(Tensor::scalar(av.sum()), &[a], move |g, _| {
            vec![Some(Tensor::full(&shape, g.item()))]
        })
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let n = self.value(a).numel();
        assert!(n > 0, "mean of an empty tensor");
        let s = self.sum_all(a);
        self.scale(s, T::one() / T::cast(n as f64))
    }

    /// Rows of a `[N, rest...]` tensor picked by index (repeats allowed).
    pub fn gather_rows(&self, a: Var, idx: &[usize]) -> Var {
        let av = self.value(a);
        let rows = av.dim(0);
        let w = av.numel() / rows.max(1);
        let mut data = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            assert!(i < rows, "gather_rows: index {i} out of {rows}");
            data.extend_from_slice(&av.data()[i * w..(i + 1) * w]);
        }
        let mut shape = av.shape().to_vec();
        shape[0] = idx.len();
        let idx = idx.to_vec();
        let in_shape = av.shape().to_vec();
        self.op(Tensor::new(&shape, data), &[a], move |g, _| {
            let mut d = vec![T::zero(); rows * w];
            for (r, &i) in idx.iter().enumerate() {
                let src = &g.data()[r * w..(r + 1) * w];
                for (x, &v) in d[i * w..(i + 1) * w].iter_mut().zip(src) {
                    *x = *x + v;
                }
            }
            vec![Some(Tensor::new(&in_shape, d))]
        })
    }

    /// Concatenation along axis 0; trailing shapes must agree.
    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows: nothing to concatenate");
        let vals: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let tail = vals[0].shape()[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        let mut spans = Vec::with_capacity(vals.len());
        for v in &vals {
            assert_eq!(&v.shape()[1..], &tail[..], "concat_rows: trailing shape mismatch");
            rows += v.dim(0);
            spans.push((data.len(), v.numel(), v.shape().to_vec()));
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        self.op(Tensor::new(&shape, data), parts, move |g, need| {
            spans
                .iter()
                .zip(need)
                .map(|((off, len, shape), &n)| {
                    n.then(|| Tensor::new(shape, g.data()[*off..off + len].to_vec()))
                })
                .collect()
        })
    }

    /// Concatenation along the last axis; leading shapes must agree.
    pub fn concat_last(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_last: nothing to concatenate");
        let vals: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let lead = vals[0].shape()[..vals[0].rank() - 1].to_vec();
        let rows: usize = lead.iter().product();
        let widths: Vec<usize> = vals
            .iter()
            .map(|v| {
                assert_eq!(&v.shape()[..v.rank() - 1], &lead[..], "concat_last: leading shape mismatch");
                *v.shape().last().unwrap()
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (v, &w) in vals.iter().zip(&widths) {
                data.extend_from_slice(&v.data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.clone();
        shape.push(total);
        self.op(Tensor::new(&shape, data), parts, move |g, need| {
            let mut offset = 0;
            let mut out = Vec::with_capacity(widths.len());
            for (&w, &n) in widths.iter().zip(need) {
                let part = n.then(|| {
                    let mut d = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        let s = r * total + offset;
                        d.extend_from_slice(&g.data()[s..s + w]);
                    }
                    let mut sh = lead.clone();
                    sh.push(w);
                    Tensor::new(&sh, d)
                });
                out.push(part);
                offset += w;
            }
            out
        })
    }

    /// Rows `start..end` of a `[N, rest...]` tensor.
    pub fn slice_rows(&self, a: Var, start: usize, end: usize) -> Var {
        let av = self.value(a);
        let rows = av.dim(0);
        assert!(start <= end && end <= rows, "slice_rows: {start}..{end} of {rows}");
        let w = av.numel() / rows.max(1);
        let mut shape = av.shape().to_vec();
        shape[0] = end - start;
        let data = av.data()[start * w..end * w].to_vec();
        let in_shape = av.shape().to_vec();
        self.op(Tensor::new(&shape, data), &[a], move |g, _| {
            let mut d = vec![T::zero(); rows * w];
            d[start * w..end * w].copy_from_slice(g.data());
            vec![Some(Tensor::new(&in_shape, d))]
        })
    }
}
