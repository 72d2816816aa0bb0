use rand::Rng;

use crate::element::Element;
use crate::tensor::{BackwardOp, Tensor};

struct AddBack;

impl<T: Element> BackwardOp<T> for AddBack {
    fn backward(&self, parents: &[Tensor<T>], _out: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        parents
            .iter()
            .map(|p| p.requires_grad().then(|| grad.to_vec()))
            .collect()
    }
}

struct AddLeadingBack {
    outer: usize,
}

impl<T: Element> BackwardOp<T> for AddLeadingBack {
    fn backward(&self, parents: &[Tensor<T>], _out: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let gx = parents[0].requires_grad().then(|| grad.to_vec());
        let gy = parents[1].requires_grad().then(|| {
            let inner = grad.len() / self.outer;
            let mut acc = vec![T::zero(); inner];
            for chunk in grad.chunks_exact(inner) {
                for (a, g) in acc.iter_mut().zip(chunk) {
                    *a += *g;
                }
            }
            acc
        });
        vec![gx, gy]
    }
}

struct ScaleBack<T>(T);

impl<T: Element> BackwardOp<T> for ScaleBack<T> {
    fn backward(&self, _p: &[Tensor<T>], _out: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        vec![Some(grad.iter().map(|g| *g * self.0).collect())]
    }
}

struct ReluBack;

impl<T: Element> BackwardOp<T> for ReluBack {
    fn backward(&self, _p: &[Tensor<T>], out: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let zero = T::zero();
        vec![Some(
            out.iter()
                .zip(grad)
                .map(|(o, g)| if *o > zero { *g } else { zero })
                .collect(),
        )]
    }
}

struct GeluBack;

impl<T: Element> BackwardOp<T> for GeluBack {
    fn backward(&self, parents: &[Tensor<T>], _out: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let x = parents[0].data();
        let half = T::from_f64_lossy(0.5);
        let inv_sqrt2 = T::from_f64_lossy(std::f64::consts::FRAC_1_SQRT_2);
        let inv_sqrt_2pi = T::from_f64_lossy(1.0 / (2.0 * std::f64::consts::PI).sqrt());
        let gx = x
            .iter()
            .zip(grad)
            .map(|(&v, &g)| {
                let cdf = half * (T::one() + (v * inv_sqrt2).erf());
                let pdf = inv_sqrt_2pi * (-(v * v) * half).exp();
                g * (cdf + v * pdf)
            })
            .collect();
        vec![Some(gx)]
    }
}

struct SoftmaxBack {
    cols: usize,
}

impl<T: Element> BackwardOp<T> for SoftmaxBack {
    fn backward(&self, _p: &[Tensor<T>], out: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let mut gx = vec![T::zero(); out.len()];
        for ((y, g), dst) in out
            .chunks_exact(self.cols)
            .zip(grad.chunks_exact(self.cols))
            .zip(gx.chunks_exact_mut(self.cols))
        {
            let dot: T = y.iter().zip(g).map(|(a, b)| *a * *b).sum();
            for ((d, yi), gi) in dst.iter_mut().zip(y).zip(g) {
                *d = *yi * (*gi - dot);
            }
        }
        vec![Some(gx)]
    }
}

struct MaskBack<T> {
    mask: Vec<T>,
}

impl<T: Element> BackwardOp<T> for MaskBack<T> {
    fn backward(&self, _p: &[Tensor<T>], _out: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        vec![Some(grad.iter().zip(&self.mask).map(|(g, m)| *g * *m).collect())]
    }
}

struct SumBack {
    len: usize,
}

impl<T: Element> BackwardOp<T> for SumBack {
    fn backward(&self, _p: &[Tensor<T>], _out: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        vec![Some(vec![grad[0]; self.len])]
    }
}

impl<T: Element> Tensor<T> {
    /// Elementwise sum of two tensors of identical shape.
    pub fn add(&self, other: &Tensor<T>) -> Tensor<T> {
        assert_eq!(self.shape(), other.shape(), "add: shape mismatch");
        let data = {
            let a = self.data();
            let b = other.data();
            a.iter().zip(b.iter()).map(|(x, y)| *x + *y).collect()
        };
        Tensor::from_op(data, self.shape().to_vec(), &[self, other], || AddBack)
    }

    /// `self[n, ...] + other[0, ...]`, broadcasting `other` over the leading axis.
    pub fn add_leading_broadcast(&self, other: &Tensor<T>) -> Tensor<T> {
        assert!(
            other.rank() == self.rank() && other.shape()[0] == 1 && other.shape()[1..] == self.shape()[1..],
            "add_leading_broadcast: {:?} cannot broadcast onto {:?}",
            other.shape(),
            self.shape()
        );
        let outer = self.shape()[0];
        let data = {
            let a = self.data();
            let b = other.data();
            let inner = b.len();
            let mut out = a.clone();
            for chunk in out.chunks_exact_mut(inner.max(1)) {
                for (o, y) in chunk.iter_mut().zip(b.iter()) {
                    *o += *y;
                }
            }
            out
        };
        Tensor::from_op(data, self.shape().to_vec(), &[self, other], || AddLeadingBack { outer })
    }

    pub fn scale(&self, factor: T) -> Tensor<T> {
        let data = self.data().iter().map(|v| *v * factor).collect();
        Tensor::from_op(data, self.shape().to_vec(), &[self], || ScaleBack(factor))
    }

    pub fn relu(&self) -> Tensor<T> {
        let zero = T::zero();
        let data = self.data().iter().map(|v| if *v > zero || v.is_nan() { *v } else { zero }).collect();
        Tensor::from_op(data, self.shape().to_vec(), &[self], || ReluBack)
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&self) -> Tensor<T> {
        let half = T::from_f64_lossy(0.5);
        let inv_sqrt2 = T::from_f64_lossy(std::f64::consts::FRAC_1_SQRT_2);
        let data = self
            .data()
            .iter()
            .map(|&v| half * v * (T::one() + (v * inv_sqrt2).erf()))
            .collect();
        Tensor::from_op(data, self.shape().to_vec(), &[self], || GeluBack)
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&self) -> Tensor<T> {
        let cols = *self.shape().last().expect("softmax of a scalar");
        let mut data = self.to_vec();
        for row in data.chunks_exact_mut(cols) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        Tensor::from_op(data, self.shape().to_vec(), &[self], || SoftmaxBack { cols })
    }

    /// Inverted dropout: zeroes each element with probability `p` and scales
    /// survivors by `1/(1-p)`.
    pub fn dropout<R: Rng + ?Sized>(&self, p: f64, rng: &mut R) -> Tensor<T> {
        assert!((0.0..1.0).contains(&p), "dropout probability must be in [0, 1)");
        if p == 0.0 {
            return self.clone();
        }
        let keep = T::from_f64_lossy(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.numel())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let data = self.data().iter().zip(&mask).map(|(v, m)| *v * *m).collect();
        Tensor::from_op(data, self.shape().to_vec(), &[self], move || MaskBack { mask })
    }

    pub fn sum_all(&self) -> Tensor<T> {
        let total: T = self.data().iter().copied().sum();
        let len = self.numel();
        Tensor::from_op(vec![total], vec![], &[self], || SumBack { len })
    }

    pub fn mean_all(&self) -> Tensor<T> {
        let n = T::from_usize(self.numel()).expect("count fits");
        self.sum_all().scale(T::one() / n)
    }
}
