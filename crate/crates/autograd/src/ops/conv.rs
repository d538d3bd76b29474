use std::rc::Rc;

use crate::{Graph, Scalar, Tensor, Var};

/// Square-kernel 2-D convolution geometry over NHWC inputs. Weights are stored
/// as `[k * k * c_in, c_out]` with `(ky, kx, c)` row order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2d {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        assert!(kernel >= 1 && stride >= 1, "degenerate convolution");
        Self { kernel, stride, pad }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let oh = (h + 2 * self.pad - self.kernel) / self.stride + 1;
        let ow = (w + 2 * self.pad - self.kernel) / self.stride + 1;
        (oh, ow)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

struct Geometry {
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    oh: usize,
    ow: usize,
    spec: Conv2d,
}

impl Geometry {
    fn patch(&self) -> usize {
        self.spec.kernel * self.spec.kernel * self.c
    }

    fn rows(&self) -> usize {
        self.n * self.oh * self.ow
    }

    /// Calls `f(col_index, input_index)` for every in-bounds patch element.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let k = self.spec.kernel;
        let (s, p) = (self.spec.stride as isize, self.spec.pad as isize);
        let patch = self.patch();
        for ni in 0..self.n {
            for oy in 0..self.oh {
                for ox in 0..self.ow {
                    let row = (ni * self.oh + oy) * self.ow + ox;
                    let base = row * patch;
                    for ky in 0..k {
                        let iy = oy as isize * s + ky as isize - p;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = ox as isize * s + kx as isize - p;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            let src = ((ni * self.h + iy as usize) * self.w + ix as usize) * self.c;
                            let dst = base + (ky * k + kx) * self.c;
                            f(dst, src, self.c);
                        }
                    }
                }
            }
        }
    }
}

fn im2col<T: Scalar>(x: &[T], geo: &Geometry) -> Vec<T> {
    let mut col = vec![T::zero(); geo.rows() * geo.patch()];
    geo.for_each_tap(|dst, src, c| col[dst..dst + c].copy_from_slice(&x[src..src + c]));
    col
}

fn col2im<T: Scalar>(col: &[T], geo: &Geometry) -> Vec<T> {
    let mut x = vec![T::zero(); geo.n * geo.h * geo.w * geo.c];
    geo.for_each_tap(|dst, src, c| {
        for j in 0..c {
            x[src + j] = x[src + j] + col[dst + j];
        }
    });
    x
}

impl<T: Scalar> Graph<T> {
    /// `x: [N, H, W, C_in]`, `weight: [k*k*C_in, C_out]`, `bias: [C_out]`.
    pub fn conv2d(&self, x: Var, weight: Var, bias: Var, spec: Conv2d) -> Var {
        let xv = self.value(x);
        let wv = self.value(weight);
        assert_eq!(xv.rank(), 4, "conv2d: input must be NHWC");
        let (n, h, w, c) = (xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3));
        assert!(
            h + 2 * spec.pad >= spec.kernel && w + 2 * spec.pad >= spec.kernel,
            "conv2d: kernel larger than padded input"
        );
        let (oh, ow) = spec.output_size(h, w);
        let geo = Geometry { n, h, w, c, oh, ow, spec };
        let patch = geo.patch();
        assert_eq!(wv.dim(0), patch, "conv2d: weight rows {} vs patch {}", wv.dim(0), patch);
        let cout = wv.dim(1);
        let rows = geo.rows();

        let col: Rc<Vec<T>> = if spec.is_pointwise() {
            Rc::new(xv.data().to_vec())
        } else {
            Rc::new(im2col(xv.data(), &geo))
        };
        let mut out = vec![T::zero(); rows * cout];
        T::gemm(rows, patch, cout, &col, false, wv.data(), false, &mut out, T::zero());
        let y = self.op(Tensor::new(&[n, oh, ow, cout], out), &[x, weight], move |g, need| {
            let gx = need[0].then(|| {
                let mut dcol = vec![T::zero(); rows * patch];
                T::gemm(rows, cout, patch, g.data(), false, wv.data(), true, &mut dcol, T::zero());
                let dx = if geo.spec.is_pointwise() { dcol } else { col2im(&dcol, &geo) };
                Tensor::new(&[geo.n, geo.h, geo.w, geo.c], dx)
            });
            let gw = need[1].then(|| {
                let mut dw = vec![T::zero(); patch * cout];
                T::gemm(patch, rows, cout, &col, true, g.data(), false, &mut dw, T::zero());
                Tensor::new(&[patch, cout], dw)
            });
            vec![gx, gw]
        });
        self.add_bias(y, bias)
    }
}
