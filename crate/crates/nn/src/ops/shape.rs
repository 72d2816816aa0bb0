use crate::element::Element;
use crate::tensor::{numel, BackwardOp, Tensor};

struct ReshapeBack;

impl<T: Element> BackwardOp<T> for ReshapeBack {
    fn backward(&self, _p: &[Tensor<T>], _out: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        vec![Some(grad.to_vec())]
    }
}

fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Gathers `src` (with `shape`) into the axis order `perm`.
fn permute_data<T: Copy>(src: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let in_strides = contiguous_strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(src.len());
    if src.is_empty() {
        return out;
    }
    let mut idx = vec![0usize; rank];
    let inner = out_shape[rank - 1];
    let inner_stride = src_strides[rank - 1];
    loop {
        let base: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        for j in 0..inner {
            out.push(src[base + j * inner_stride]);
        }
        // advance all but the innermost axis
        let mut axis = rank - 1;
        loop {
            if axis == 0 {
                return out;
            }
            axis -= 1;
            idx[axis] += 1;
            if idx[axis] < out_shape[axis] {
                break;
            }
            idx[axis] = 0;
        }
    }
}

struct PermuteBack {
    out_shape: Vec<usize>,
    inverse: Vec<usize>,
}

impl<T: Element> BackwardOp<T> for PermuteBack {
    fn backward(&self, _p: &[Tensor<T>], _out: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        vec![Some(permute_data(grad, &self.out_shape, &self.inverse))]
    }
}

struct NarrowBack {
    outer: usize,
    axis_len: usize,
    inner: usize,
    start: usize,
    len: usize,
}

impl<T: Element> BackwardOp<T> for NarrowBack {
    fn backward(&self, _p: &[Tensor<T>], _out: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let mut gx = vec![T::zero(); self.outer * self.axis_len * self.inner];
        let block = self.len * self.inner;
        for o in 0..self.outer {
            let dst = o * self.axis_len * self.inner + self.start * self.inner;
            gx[dst..dst + block].copy_from_slice(&grad[o * block..(o + 1) * block]);
        }
        vec![Some(gx)]
    }
}

struct ConcatBack {
    outer: usize,
    inner: usize,
    sizes: Vec<usize>,
}

impl<T: Element> BackwardOp<T> for ConcatBack {
    fn backward(&self, parents: &[Tensor<T>], _out: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let total: usize = self.sizes.iter().sum();
        let mut offset = 0;
        let mut grads = Vec::with_capacity(parents.len());
        for (p, &size) in parents.iter().zip(&self.sizes) {
            if p.requires_grad() {
                let block = size * self.inner;
                let mut g = Vec::with_capacity(self.outer * block);
                for o in 0..self.outer {
                    let src = (o * total + offset) * self.inner;
                    g.extend_from_slice(&grad[src..src + block]);
                }
                grads.push(Some(g));
            } else {
                grads.push(None);
            }
            offset += size;
        }
        grads
    }
}

struct RepeatBack {
    times: usize,
}

impl<T: Element> BackwardOp<T> for RepeatBack {
    fn backward(&self, _p: &[Tensor<T>], _out: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let inner = grad.len() / self.times;
        let mut acc = vec![T::zero(); inner];
        for chunk in grad.chunks_exact(inner.max(1)) {
            for (a, g) in acc.iter_mut().zip(chunk) {
                *a += *g;
            }
        }
        vec![Some(acc)]
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Element> Tensor<T> {
    pub fn reshape(&self, shape: &[usize]) -> Tensor<T> {
        assert_eq!(numel(shape), self.numel(), "reshape {:?} -> {:?} changes element count", self.shape(), shape);
        Tensor::from_op(self.to_vec(), shape.to_vec(), &[self], || ReshapeBack)
    }

    /// Collapses every axis after the first.
    pub fn flatten_batch(&self) -> Tensor<T> {
        let n = self.shape()[0];
        self.reshape(&[n, self.numel() / n.max(1)])
    }

    pub fn permute(&self, perm: &[usize]) -> Tensor<T> {
        let rank = self.rank();
        assert_eq!(perm.len(), rank, "permute: wrong number of axes");
        let mut seen = vec![false; rank];
        for &p in perm {
            assert!(p < rank && !seen[p], "permute: {perm:?} is not a permutation");
            seen[p] = true;
        }
        let data = permute_data(&self.data(), self.shape(), perm);
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape()[p]).collect();
        let mut inverse = vec![0; rank];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        let os = out_shape.clone();
        Tensor::from_op(data, out_shape, &[self], move || PermuteBack { out_shape: os, inverse })
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor<T> {
        let (outer, axis_len, inner) = split_axis(self.shape(), axis);
        assert!(start + len <= axis_len, "narrow: range {start}..{} exceeds axis length {axis_len}", start + len);
        let data = {
            let src = self.data();
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let from = o * axis_len * inner + start * inner;
                out.extend_from_slice(&src[from..from + len * inner]);
            }
            out
        };
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        Tensor::from_op(data, shape, &[self], || NarrowBack { outer, axis_len, inner, start, len })
    }

    /// Concatenates tensors along `axis`; all other axes must agree.
    pub fn concat(parts: &[&Tensor<T>], axis: usize) -> Tensor<T> {
        assert!(!parts.is_empty(), "concat of nothing");
        let first = parts[0].shape();
        for p in parts {
            assert!(
                p.rank() == first.len()
                    && p.shape()[..axis] == first[..axis]
                    && p.shape()[axis + 1..] == first[axis + 1..],
                "concat: incompatible shapes {:?} and {:?} on axis {axis}",
                first,
                p.shape()
            );
        }
        let (outer, _, inner) = split_axis(first, axis);
        let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = sizes.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        {
            let views: Vec<_> = parts.iter().map(|p| p.data()).collect();
            for o in 0..outer {
                for (v, &size) in views.iter().zip(&sizes) {
                    let block = size * inner;
                    data.extend_from_slice(&v[o * block..(o + 1) * block]);
                }
            }
        }
        let mut shape = first.to_vec();
        shape[axis] = total;
        Tensor::from_op(data, shape, parts, move || ConcatBack { outer, inner, sizes })
    }

    /// Tiles a `[1, ...]` tensor `times` along the leading axis.
    pub fn repeat_leading(&self, times: usize) -> Tensor<T> {
        assert_eq!(self.shape()[0], 1, "repeat_leading expects a leading axis of 1");
        let src = self.to_vec();
        let mut data = Vec::with_capacity(src.len() * times);
        for _ in 0..times {
            data.extend_from_slice(&src);
        }
        let mut shape = self.shape().to_vec();
        shape[0] = times;
        Tensor::from_op(data, shape, &[self], move || RepeatBack { times })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_matches_index_formula() {
        let x = Tensor::<f64>::new((0..24).map(f64::from).collect(), &[2, 3, 4]);
        let y = x.permute(&[2, 0, 1]);
        assert_eq!(y.shape(), &[4, 2, 3]);
        let yd = y.to_vec();
        for a in 0..2 {
            for b in 0..3 {
                for c in 0..4 {
                    assert_eq!(yd[c * 6 + a * 3 + b], (a * 12 + b * 4 + c) as f64);
                }
            }
        }
    }

    #[test]
    fn concat_then_narrow_roundtrips() {
        let a = Tensor::<f64>::new((0..12).map(f64::from).collect(), &[2, 2, 3]);
        let b = Tensor::<f64>::new((100..106).map(f64::from).collect(), &[2, 1, 3]);
        let c = Tensor::concat(&[&a, &b], 1);
        assert_eq!(c.shape(), &[2, 3, 3]);
        assert_eq!(c.narrow(1, 0, 2).to_vec(), a.to_vec());
        assert_eq!(c.narrow(1, 2, 1).to_vec(), b.to_vec());
    }
}
