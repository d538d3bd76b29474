use crate::{Graph, Scalar, Tensor, Var};

impl<T: Scalar> Graph<T> {
    /// `a` is `[..., k]`, `w` is `[k, n]`; leading axes of `a` are flattened into rows.
    pub fn matmul(&self, a: Var, w: Var) -> Var {
        let av = self.value(a);
        let wv = self.value(w);
        assert_eq!(wv.rank(), 2, "matmul: rhs must be 2-D");
        let k = *av.shape().last().expect("rank >= 1");
        assert_eq!(wv.dim(0), k, "matmul: inner dims {:?} x {:?}", av.shape(), wv.shape());
        let n = wv.dim(1);
        let m = av.numel() / k.max(1);
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, av.data(), false, wv.data(), false, &mut out, T::zero());
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        self.op(Tensor::new(&shape, out), &[a, w], move |g, need| {
            let ga = need[0].then(|| {
                let mut d = vec![T::zero(); m * k];
                T::gemm(m, n, k, g.data(), false, wv.data(), true, &mut d, T::zero());
                Tensor::new(av.shape(), d)
            });
            let gw = need[1].then(|| {
                let mut d = vec![T::zero(); k * n];
                T::gemm(k, m, n, av.data(), true, g.data(), false, &mut d, T::zero());
                Tensor::new(wv.shape(), d)
            });
            vec![ga, gw]
        })
    }

    /// `a @ b^T` for `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_nt(&self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert!(av.rank() == 2 && bv.rank() == 2, "matmul_nt: operands must be 2-D");
        let (m, k) = (av.dim(0), av.dim(1));
        let n = bv.dim(0);
        assert_eq!(bv.dim(1), k, "matmul_nt: inner dims {:?} x {:?}^T", av.shape(), bv.shape());
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, av.data(), false, bv.data(), true, &mut out, T::zero());
        self.op(Tensor::new(&[m, n], out), &[a, b], move |g, need| {
            let ga = need[0].then(|| {
                let mut d = vec![T::zero(); m * k];
                T::gemm(m, n, k, g.data(), false, bv.data(), false, &mut d, T::zero());
                Tensor::new(&[m, k], d)
            });
            let gb = need[1].then(|| {
                let mut d = vec![T::zero(); n * k];
                T::gemm(n, m, k, g.data(), true, av.data(), false, &mut d, T::zero());
                Tensor::new(&[n, k], d)
            });
            vec![ga, gb]
        })
    }

    /// Affine map over the last axis: `x @ w + b`.
    pub fn linear(&self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_bias(y, b)
    }
}
