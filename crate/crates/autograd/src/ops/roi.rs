use crate::{Graph, Scalar, Tensor, Var};

/// Region in input-image pixel coordinates, attached to one feature map of a batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoiBox {
    pub batch: usize,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

/// Corners and weights of the bilinear sample at continuous cell coordinate
/// `(y, x)`, clamped into the map.
pub fn bilinear_taps(y: f64, x: f64, h: usize, w: usize) -> [(usize, usize, f64); 4] {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let ly = y - y0 as f64;
    let lx = x - x0 as f64;
    [
        (y0, x0, (1.0 - ly) * (1.0 - lx)),
        (y0, x1, (1.0 - ly) * lx),
        (y1, x0, ly * (1.0 - lx)),
        (y1, x1, ly * lx),
    ]
}

/// Continuous cell coordinate of the centre of output bin `i` along one axis.
pub fn bin_center(lo: f64, hi: f64, i: usize, bins: usize, spatial_scale: f64) -> f64 {
    let size = (hi - lo) / bins as f64;
    (lo + (i as f64 + 0.5) * size) * spatial_scale - 0.5
}

impl<T: Scalar> Graph<T> {
    /// RoIAlign with one bilinear sample per output bin, centred in the bin.
    /// `feat: [B, H, W, C]` to `[R, out, out, C]`. With a full-map box at
    /// `spatial_scale = 1` and `out = H = W` this is the identity.
    pub fn roi_align(&self, feat: Var, rois: &[RoiBox], out: usize, spatial_scale: f64) -> Var {
        let fv = self.value(feat);
        assert_eq!(fv.rank(), 4, "roi_align: expected NHWC features");
        let (b, h, w, c) = (fv.dim(0), fv.dim(1), fv.dim(2), fv.dim(3));
        let mut plan: Vec<[(usize, T); 4]> = Vec::with_capacity(rois.len() * out * out);
        for r in rois {
            assert!(r.batch < b, "roi_align: batch index {} of {}", r.batch, b);
            for i in 0..out {
                let y = bin_center(r.y1, r.y2, i, out, spatial_scale);
                for j in 0..out {
                    let x = bin_center(r.x1, r.x2, j, out, spatial_scale);
                    let taps = bilinear_taps(y, x, h, w);
                    plan.push(taps.map(|(yy, xx, wt)| (((r.batch * h + yy) * w + xx) * c, T::cast(wt))));
                }
            }
        }
        let mut data = vec![T::zero(); plan.len() * c];
        for (cell, taps) in data.chunks_mut(c).zip(&plan) {
            for &(off, wt) in taps {
                if wt == T::zero() {
                    continue;
                }
                for (d, &s) in cell.iter_mut().zip(&fv.data()[off..off + c]) {
                    *d = *d + wt * s;
                }
            }
        }
        let in_shape = fv.shape().to_vec();
        let numel = fv.numel();
        self.op(Tensor::new(&[rois.len(), out, out, c], data), &[feat], move |g, _| {
            let mut d = vec![T::zero(); numel];
            for (cell, taps) in g.data().chunks(c).zip(&plan) {
                for &(off, wt) in taps {
                    if wt == T::zero() {
                        continue;
                    }
                    for (dst, &s) in d[off..off + c].iter_mut().zip(cell) {
                        *dst = *dst + wt * s;
                    }
                }
            }
            vec![Some(Tensor::new(&in_shape, d))]
        })
    }
}
