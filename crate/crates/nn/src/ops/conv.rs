//! 2D convolution through im2col + GEMM.

use crate::element::{gemm, Element, Strides};
use crate::tensor::{BackwardOp, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl Conv2dGeometry {
    pub fn new(stride: usize, padding: usize) -> Self {
        Conv2dGeometry { stride: (stride, stride), padding: (padding, padding) }
    }

    pub fn output_size(&self, h: usize, w: usize, kh: usize, kw: usize) -> Option<(usize, usize)> {
        let (sh, sw) = self.stride;
        let (ph, pw) = self.padding;
        if h + 2 * ph < kh || w + 2 * pw < kw {
            return None;
        }
        Some(((h + 2 * ph - kh) / sh + 1, (w + 2 * pw - kw) / sw + 1))
    }
}

#[derive(Clone, Copy)]
struct Layout {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    ho: usize,
    wo: usize,
}

impl Layout {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.sh == 1 && self.sw == 1 && self.ph == 0 && self.pw == 0
    }

    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn spatial_out(&self) -> usize {
        self.ho * self.wo
    }

    /// Range of output columns whose input column `ox*sw + kj - pw` is in bounds.
    fn valid_cols(&self, kj: usize) -> (usize, usize) {
        let lo = if self.pw > kj { (self.pw - kj).div_ceil(self.sw) } else { 0 };
        // largest ox with ox*sw + kj - pw <= w-1
        let limit = self.w + self.pw;
        let hi = if limit > kj { ((limit - kj - 1) / self.sw + 1).min(self.wo) } else { 0 };
        (lo.min(hi), hi)
    }
}

fn im2col<T: Element>(x: &[T], l: &Layout, cols: &mut [T]) {
    let len = l.spatial_out();
    for ci in 0..l.c {
        let plane = &x[ci * l.h * l.w..(ci + 1) * l.h * l.w];
        for ki in 0..l.kh {
            for kj in 0..l.kw {
                let row = (ci * l.kh + ki) * l.kw + kj;
                let dst = &mut cols[row * len..(row + 1) * len];
                let (lo, hi) = l.valid_cols(kj);
                for oy in 0..l.ho {
                    let seg = &mut dst[oy * l.wo..(oy + 1) * l.wo];
                    let iy = (oy * l.sh + ki) as isize - l.ph as isize;
                    if iy < 0 || iy >= l.h as isize {
                        seg.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * l.w..(iy as usize + 1) * l.w];
                    seg[..lo].fill(T::zero());
                    seg[hi..].fill(T::zero());
                    if l.sw == 1 {
                        let start = lo + kj - l.pw;
                        seg[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                    } else {
                        for (ox, d) in seg.iter_mut().enumerate().take(hi).skip(lo) {
                            *d = src[ox * l.sw + kj - l.pw];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Element>(cols: &[T], l: &Layout, x: &mut [T]) {
    let len = l.spatial_out();
    for ci in 0..l.c {
        let plane = &mut x[ci * l.h * l.w..(ci + 1) * l.h * l.w];
        for ki in 0..l.kh {
            for kj in 0..l.kw {
                let row = (ci * l.kh + ki) * l.kw + kj;
                let src = &cols[row * len..(row + 1) * len];
                let (lo, hi) = l.valid_cols(kj);
                for oy in 0..l.ho {
                    let iy = (oy * l.sh + ki) as isize - l.ph as isize;
                    if iy < 0 || iy >= l.h as isize {
                        continue;
                    }
                    let seg = &src[oy * l.wo..(oy + 1) * l.wo];
                    let dst = &mut plane[iy as usize * l.w..(iy as usize + 1) * l.w];
                    for ox in lo..hi {
                        dst[ox * l.sw + kj - l.pw] += seg[ox];
                    }
                }
            }
        }
    }
}

struct ConvBack {
    n: usize,
    o: usize,
    layout: Layout,
    has_bias: bool,
}

impl<T: Element> BackwardOp<T> for ConvBack {
    fn backward(&self, parents: &[Tensor<T>], _out: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let l = &self.layout;
        let (x, w) = (&parents[0], &parents[1]);
        let patch = l.patch();
        let len = l.spatial_out();
        let in_size = l.c * l.h * l.w;
        let xd = x.data();
        let wd = w.data();
        let want_x = x.requires_grad();
        let want_w = w.requires_grad();
        let mut gx = want_x.then(|| vec![T::zero(); self.n * in_size]);
        let mut gw = want_w.then(|| vec![T::zero(); self.o * patch]);
        let pointwise = l.is_pointwise();
        let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); patch * len] };
        for i in 0..self.n {
            let g = &grad[i * self.o * len..(i + 1) * self.o * len];
            let xi = &xd[i * in_size..(i + 1) * in_size];
            if let Some(gw) = gw.as_mut() {
                let c: &[T] = if pointwise {
                    xi
                } else {
                    im2col(xi, l, &mut cols);
                    &cols
                };
                gemm(self.o, len, patch, T::one(), g, Strides::row_major(len), c, Strides::transposed(len), T::one(), gw, Strides::row_major(patch));
            }
            if let Some(gx) = gx.as_mut() {
                let dst = &mut gx[i * in_size..(i + 1) * in_size];
                if pointwise {
                    gemm(patch, self.o, len, T::one(), &wd, Strides::transposed(patch), g, Strides::row_major(len), T::zero(), dst, Strides::row_major(len));
                } else {
                    gemm(patch, self.o, len, T::one(), &wd, Strides::transposed(patch), g, Strides::row_major(len), T::zero(), &mut cols, Strides::row_major(len));
                    col2im(&cols, l, dst);
                }
            }
        }
        let mut grads = vec![gx, gw];
        if self.has_bias {
            grads.push(parents[2].requires_grad().then(|| {
                let mut gb = vec![T::zero(); self.o];
                for i in 0..self.n {
                    for (oc, b) in gb.iter_mut().enumerate() {
                        let start = (i * self.o + oc) * len;
                        *b += grad[start..start + len].iter().copied().sum::<T>();
                    }
                }
                gb
            }));
        }
        grads
    }
}

impl<T: Element> Tensor<T> {
    /// NCHW convolution with an `[O, C, kh, kw]` kernel.
    pub fn conv2d(&self, weight: &Tensor<T>, bias: Option<&Tensor<T>>, geom: Conv2dGeometry) -> Tensor<T> {
        let (n, c, h, w) = self.dims4();
        let (o, wc, kh, kw) = weight.dims4();
        assert_eq!(c, wc, "conv2d: input has {c} channels but kernel expects {wc}");
        let (ho, wo) = geom
            .output_size(h, w, kh, kw)
            .unwrap_or_else(|| panic!("conv2d: kernel {kh}x{kw} larger than padded input {h}x{w}"));
        if let Some(b) = bias {
            assert_eq!(b.shape(), &[o], "conv2d: bias shape mismatch");
        }
        let layout = Layout {
            c,
            h,
            w,
            kh,
            kw,
            sh: geom.stride.0,
            sw: geom.stride.1,
            ph: geom.padding.0,
            pw: geom.padding.1,
            ho,
            wo,
        };
        let patch = layout.patch();
        let len = layout.spatial_out();
        let in_size = c * h * w;
        let mut data = vec![T::zero(); n * o * len];
        {
            let xd = self.data();
            let wd = weight.data();
            let bd = bias.map(|b| b.data());
            let pointwise = layout.is_pointwise();
            let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); patch * len] };
            for i in 0..n {
                let xi = &xd[i * in_size..(i + 1) * in_size];
                let dst = &mut data[i * o * len..(i + 1) * o * len];
                let src: &[T] = if pointwise {
                    xi
                } else {
                    im2col(xi, &layout, &mut cols);
                    &cols
                };
                let beta = if let Some(bd) = &bd {
                    for (oc, row) in dst.chunks_exact_mut(len).enumerate() {
                        row.fill(bd[oc]);
                    }
                    T::one()
                } else {
                    T::zero()
                };
                gemm(o, patch, len, T::one(), &wd, Strides::row_major(patch), src, Strides::row_major(len), beta, dst, Strides::row_major(len));
            }
        }
        let has_bias = bias.is_some();
        let mut parents = vec![self, weight];
        if let Some(b) = bias {
            parents.push(b);
        }
        Tensor::from_op(data, vec![n, o, ho, wo], &parents, || ConvBack { n, o, layout, has_bias })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(x: &[f64], (n, c, h, w): (usize, usize, usize, usize), k: &[f64], (o, kh, kw): (usize, usize, usize), g: Conv2dGeometry) -> Vec<f64> {
        let (ho, wo) = g.output_size(h, w, kh, kw).unwrap();
        let mut out = vec![0.0; n * o * ho * wo];
        for b in 0..n {
            for oc in 0..o {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let iy = (oy * g.stride.0 + ki) as isize - g.padding.0 as isize;
                                    let ix = (ox * g.stride.1 + kj) as isize - g.padding.1 as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        acc += x[((b * c + ci) * h + iy as usize) * w + ix as usize]
                                            * k[((oc * c + ci) * kh + ki) * kw + kj];
                                    }
                                }
                            }
                        }
                        out[((b * o + oc) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_direct_convolution() {
        let cases = [
            ((2, 3, 7, 6), (4, 3, 3), Conv2dGeometry::new(1, 1)),
            ((1, 2, 9, 9), (3, 5, 5), Conv2dGeometry::new(2, 2)),
            ((1, 2, 8, 8), (2, 1, 7), Conv2dGeometry { stride: (1, 1), padding: (0, 3) }),
            ((2, 4, 5, 5), (3, 1, 1), Conv2dGeometry::new(1, 0)),
            ((1, 3, 11, 10), (2, 4, 4), Conv2dGeometry { stride: (3, 2), padding: (1, 2) }),
        ];
        for (xs, (o, kh, kw), g) in cases {
            let (n, c, h, w) = xs;
            let x: Vec<f64> = (0..n * c * h * w).map(|i| ((i * 7919) % 23) as f64 - 11.0).collect();
            let k: Vec<f64> = (0..o * c * kh * kw).map(|i| ((i * 31) % 13) as f64 * 0.1 - 0.6).collect();
            let xt = Tensor::new(x.clone(), &[n, c, h, w]);
            let kt = Tensor::new(k.clone(), &[o, c, kh, kw]);
            let got = xt.conv2d(&kt, None, g).to_vec();
            let want = naive(&x, xs, &k, (o, kh, kw), g);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
        }
    }
}
