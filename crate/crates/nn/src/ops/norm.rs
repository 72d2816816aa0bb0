use crate::element::Element;
use crate::tensor::{BackwardOp, Tensor};

struct BatchNormBack<T> {
    shape: (usize, usize, usize, usize),
    xhat: Vec<T>,
    invstd: Vec<T>,
    training: bool,
}

impl<T: Element> BackwardOp<T> for BatchNormBack<T> {
    fn backward(&self, parents: &[Tensor<T>], _out: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let (n, c, h, w) = self.shape;
        let plane = h * w;
        let count = T::from_usize(n * plane).unwrap();
        let mut sum_g = vec![T::zero(); c];
        let mut sum_gx = vec![T::zero(); c];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * plane;
                for i in off..off + plane {
                    sum_g[ch] += grad[i];
                    sum_gx[ch] += grad[i] * self.xhat[i];
                }
            }
        }
        let (x, gamma, beta) = (&parents[0], &parents[1], &parents[2]);
        let gx = x.requires_grad().then(|| {
            let gd = gamma.data();
            let mut gx = vec![T::zero(); grad.len()];
            for b in 0..n {
                for ch in 0..c {
                    let off = (b * c + ch) * plane;
                    let scale = gd[ch] * self.invstd[ch];
                    if self.training {
                        let (mg, mgx) = (sum_g[ch] / count, sum_gx[ch] / count);
                        for i in off..off + plane {
                            gx[i] = scale * (grad[i] - mg - self.xhat[i] * mgx);
                        }
                    } else {
                        for i in off..off + plane {
                            gx[i] = scale * grad[i];
                        }
                    }
                }
            }
            gx
        });
        vec![gx, gamma.requires_grad().then_some(sum_gx), beta.requires_grad().then_some(sum_g)]
    }
}

struct LayerNormBack<T> {
    dim: usize,
    xhat: Vec<T>,
    invstd: Vec<T>,
}

impl<T: Element> BackwardOp<T> for LayerNormBack<T> {
    fn backward(&self, parents: &[Tensor<T>], _out: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let d = self.dim;
        let dn = T::from_usize(d).unwrap();
        let (x, gamma, beta) = (&parents[0], &parents[1], &parents[2]);
        let gd = gamma.data();
        let mut gg = vec![T::zero(); d];
        let mut gb = vec![T::zero(); d];
        let mut gx = x.requires_grad().then(|| vec![T::zero(); grad.len()]);
        for (r, (g, xh)) in grad.chunks_exact(d).zip(self.xhat.chunks_exact(d)).enumerate() {
            let mut s1 = T::zero();
            let mut s2 = T::zero();
            for j in 0..d {
                gg[j] += g[j] * xh[j];
                gb[j] += g[j];
                let gxh = g[j] * gd[j];
                s1 += gxh;
                s2 += gxh * xh[j];
            }
            if let Some(gx) = gx.as_mut() {
                let inv = self.invstd[r];
                let (m1, m2) = (s1 / dn, s2 / dn);
                for j in 0..d {
                    gx[r * d + j] = inv * (g[j] * gd[j] - m1 - xh[j] * m2);
                }
            }
        }
        vec![gx, gamma.requires_grad().then_some(gg), beta.requires_grad().then_some(gb)]
    }
}

impl<T: Element> Tensor<T> {
    /// Per-channel batch normalisation of an NCHW tensor.
    ///
    /// In training mode batch statistics are used and the running buffers are
    /// updated in place (`running_var` with the unbiased estimate); otherwise
    /// the running buffers normalise the input.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm2d(
        &self,
        gamma: &Tensor<T>,
        beta: &Tensor<T>,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        training: bool,
        momentum: f64,
        eps: f64,
    ) -> Tensor<T> {
        let (n, c, h, w) = self.dims4();
        for t in [gamma, beta, running_mean, running_var] {
            assert_eq!(t.shape(), &[c], "batch_norm2d: per-channel tensor has shape {:?}, want [{c}]", t.shape());
        }
        let plane = h * w;
        let count = n * plane;
        let eps = T::from_f64_lossy(eps);
        let xd = self.data();
        let (mean, var) = if training {
            let cnt = T::from_usize(count).unwrap();
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for b in 0..n {
                for ch in 0..c {
                    let off = (b * c + ch) * plane;
                    mean[ch] += xd[off..off + plane].iter().copied().sum::<T>();
                }
            }
            for m in mean.iter_mut() {
                *m /= cnt;
            }
            for b in 0..n {
                for ch in 0..c {
                    let off = (b * c + ch) * plane;
                    let m = mean[ch];
                    var[ch] += xd[off..off + plane].iter().map(|v| (*v - m) * (*v - m)).sum::<T>();
                }
            }
            for v in var.iter_mut() {
                *v /= cnt;
            }
            let mom = T::from_f64_lossy(momentum);
            let unbias = if count > 1 { cnt / (cnt - T::one()) } else { T::one() };
            {
                let mut rm = running_mean.data_mut();
                let mut rv = running_var.data_mut();
                for ch in 0..c {
                    rm[ch] = (T::one() - mom) * rm[ch] + mom * mean[ch];
                    rv[ch] = (T::one() - mom) * rv[ch] + mom * var[ch] * unbias;
                }
            }
            (mean, var)
        } else {
            (running_mean.to_vec(), running_var.to_vec())
        };
        let invstd: Vec<T> = var.iter().map(|v| T::one() / (*v + eps).sqrt()).collect();
        let gd = gamma.data();
        let bd = beta.data();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * plane;
                let (m, s, g, bb) = (mean[ch], invstd[ch], gd[ch], bd[ch]);
                for i in off..off + plane {
                    let xh = (xd[i] - m) * s;
                    xhat[i] = xh;
                    out[i] = xh * g + bb;
                }
            }
        }
        drop((xd, gd, bd));
        Tensor::from_op(out, vec![n, c, h, w], &[self, gamma, beta], move || BatchNormBack {
            shape: (n, c, h, w),
            xhat,
            invstd,
            training,
        })
    }

    /// Layer normalisation over the last axis with an affine transform.
    pub fn layer_norm(&self, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> Tensor<T> {
        let d = *self.shape().last().expect("layer_norm of a scalar");
        assert_eq!(gamma.shape(), &[d], "layer_norm: gamma shape");
        assert_eq!(beta.shape(), &[d], "layer_norm: beta shape");
        let dn = T::from_usize(d).unwrap();
        let eps = T::from_f64_lossy(eps);
        let xd = self.data();
        let gd = gamma.data();
        let bd = beta.data();
        let rows = xd.len() / d;
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        let mut invstd = Vec::with_capacity(rows);
        for (r, row) in xd.chunks_exact(d).enumerate() {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / dn;
            let inv = T::one() / (var + eps).sqrt();
            invstd.push(inv);
            for j in 0..d {
                let xh = (row[j] - mean) * inv;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * gd[j] + bd[j];
            }
        }
        drop((xd, gd, bd));
        Tensor::from_op(out, self.shape().to_vec(), &[self, gamma, beta], move || LayerNormBack { dim: d, xhat, invstd })
    }
}
