use crate::{Graph, Scalar, Tensor, Var};

fn last_dim(shape: &[usize]) -> usize {
    *shape.last().expect("rank >= 1")
}

impl<T: Scalar> Graph<T> {
    pub fn add(&self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let out = av.zip_map(&bv, |x, y| x + y);
        self.op(out, &[a, b], |g, _| vec![Some(g.clone()), Some(g.clone())])
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let out = av.zip_map(&bv, |x, y| x - y);
        self.op(out, &[a, b], |g, _| vec![Some(g.clone()), Some(g.map(|v| -v))])
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let out = av.zip_map(&bv, |x, y| x * y);
        self.op(out, &[a, b], move |g, need| {
            vec![
                need[0].then(|| g.zip_map(&bv, |x, y| x * y)),
                need[1].then(|| g.zip_map(&av, |x, y| x * y)),
            ]
        })
    }

    pub fn scale(&self, a: Var, s: T) -> Var {
        let out = self.value(a).scale(s);
        self.op(out, &[a], move |g, _| vec![Some(g.scale(s))])
    }

    pub fn relu(&self, a: Var) -> Var {
        let av = self.value(a);
        let out = av.map(|x| x.max(T::zero()));
        self.op(out, &[a], move |g, _| {
            vec![Some(g.zip_map(&av, |gv, x| if x > T::zero() { gv } else { T::zero() }))]
        })
    }

    /// `a[..., j] + bias[j]`.
    pub fn add_bias(&self, a: Var, bias: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(bias);
        let n = last_dim(av.shape());
        assert_eq!(bv.numel(), n, "add_bias: bias length {} vs last dim {}", bv.numel(), n);
        let mut out = (*av).clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &b) in row.iter_mut().zip(bv.data()) {
                *o = *o + b;
            }
        }
        let bshape = bv.shape().to_vec();
        self.op(out, &[a, bias], move |g, need| {
            let gb = need[1].then(|| {
                let mut acc = vec![T::zero(); n];
                for row in g.data().chunks(n) {
                    for (s, &v) in acc.iter_mut().zip(row) {
                        *s = *s + v;
                    }
                }
                Tensor::new(&bshape, acc)
            });
            vec![Some(g.clone()), gb]
        })
    }

    /// `a[..., j] * v[j]`.
    pub fn mul_bias(&self, a: Var, v: Var) -> Var {
        let av = self.value(a);
        let vv = self.value(v);
        let n = last_dim(av.shape());
        assert_eq!(vv.numel(), n, "mul_bias: vector length {} vs last dim {}", vv.numel(), n);
        let mut out = (*av).clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &s) in row.iter_mut().zip(vv.data()) {
                *o = *o * s;
            }
        }
        self.op(out, &[a, v], move |g, need| {
            let ga = need[0].then(|| {
                let mut ga = g.clone();
                for row in ga.data_mut().chunks_mut(n) {
                    for (o, &s) in row.iter_mut().zip(vv.data()) {
                        *o = *o * s;
                    }
                }
                ga
            });
            let gv = need[1].then(|| {
                let mut acc = vec![T::zero(); n];
                for (grow, arow) in g.data().chunks(n).zip(av.data().chunks(n)) {
                    for j in 0..n {
                        acc[j] = acc[j] + grow[j] * arow[j];
                    }
                }
                Tensor::new(vv.shape(), acc)
            });
            vec![ga, gv]
        })
    }

    /// Repeats a length-`n` vector into `[rows, n]`.
    pub fn broadcast_rows(&self, v: Var, rows: usize) -> Var {
        let vv = self.value(v);
        let n = vv.numel();
        let mut data = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            data.extend_from_slice(vv.data());
        }
        let vshape = vv.shape().to_vec();
        self.op(Tensor::new(&[rows, n], data), &[v], move |g, _| {
            let mut acc = vec![T::zero(); n];
            for row in g.data().chunks(n) {
                for (s, &x) in acc.iter_mut().zip(row) {
                    *s = *s + x;
                }
            }
            vec![Some(Tensor::new(&vshape, acc))]
        })
    }

    /// `maps` is `[Q, ..., C]`, `vecs` is `[N, C]`; the result is `[Q * N, ..., C]`
    /// with entry `q * N + n` equal to `maps[q] * vecs[n]` channelwise.
    pub fn modulate(&self, maps: Var, vecs: Var) -> Var {
        let mv = self.value(maps);
        let vv = self.value(vecs);
        let q = mv.dim(0);
        let c = last_dim(mv.shape());
        assert_eq!(vv.rank(), 2, "modulate: vecs must be [N, C]");
        assert_eq!(vv.dim(1), c, "modulate: channel mismatch");
        let n = vv.dim(0);
        let per = mv.numel() / q;
        let mut data = Vec::with_capacity(q * n * per);
        for qi in 0..q {
            let m = &mv.data()[qi * per..(qi + 1) * per];
            for ni in 0..n {
                let v = vv.row(ni);
                for cell in m.chunks(c) {
                    data.extend(cell.iter().zip(v).map(|(&x, &y)| x * y));
                }
            }
        }
        let mut shape = mv.shape().to_vec();
        shape[0] = q * n;
        self.op(Tensor::new(&shape, data), &[maps, vecs], move |g, need| {
            let gm = need[0].then(|| {
                let mut out = vec![T::zero(); q * per];
                for qi in 0..q {
                    let dst = &mut out[qi * per..(qi + 1) * per];
                    for ni in 0..n {
                        let v = vv.row(ni);
                        let src = &g.data()[(qi * n + ni) * per..(qi * n + ni + 1) * per];
                        for (dcell, scell) in dst.chunks_mut(c).zip(src.chunks(c)) {
                            for j in 0..c {
                                dcell[j] = dcell[j] + scell[j] * v[j];
                            }
                        }
                    }
                }
                Tensor::new(mv.shape(), out)
            });
            let gv = need[1].then(|| {
                let mut out = vec![T::zero(); n * c];
                for qi in 0..q {
                    let m = &mv.data()[qi * per..(qi + 1) * per];
                    for ni in 0..n {
                        let dst = &mut out[ni * c..(ni + 1) * c];
                        let src = &g.data()[(qi * n + ni) * per..(qi * n + ni + 1) * per];
                        for (mcell, scell) in m.chunks(c).zip(src.chunks(c)) {
                            for j in 0..c {
                                dst[j] = dst[j] + scell[j] * mcell[j];
                            }
                        }
                    }
                }
                Tensor::new(vv.shape(), out)
            });
            vec![gm, gv]
        })
    }
}
