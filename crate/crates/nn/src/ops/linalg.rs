use crate::element::{gemm, Element, Strides};
use crate::tensor::{BackwardOp, Tensor};

struct LinearBack {
    rows: usize,
    inp: usize,
    out: usize,
    has_bias: bool,
}

impl<T: Element> BackwardOp<T> for LinearBack {
    fn backward(&self, parents: &[Tensor<T>], _out: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let (m, k, n) = (self.rows, self.inp, self.out);
        let (x, w) = (&parents[0], &parents[1]);
        let gx = x.requires_grad().then(|| {
            // gx[m,k] = g[m,n] · w[n,k]
            let mut gx = vec![T::zero(); m * k];
            let wd = w.data();
            gemm(m, n, k, T::one(), grad, Strides::row_major(n), &wd, Strides::row_major(k), T::zero(), &mut gx, Strides::row_major(k));
            gx
        });
        let gw = w.requires_grad().then(|| {
            // gw[n,k] = g^T[n,m] · x[m,k]
            let mut gw = vec![T::zero(); n * k];
            let xd = x.data();
            gemm(n, m, k, T::one(), grad, Strides::transposed(n), &xd, Strides::row_major(k), T::zero(), &mut gw, Strides::row_major(k));
            gw
        });
        let mut grads = vec![gx, gw];
        if self.has_bias {
            grads.push(parents[2].requires_grad().then(|| {
                let mut gb = vec![T::zero(); n];
                for row in grad.chunks_exact(n) {
                    for (b, g) in gb.iter_mut().zip(row) {
                        *b += *g;
                    }
                }
                gb
            }));
        }
        grads
    }
}

struct BmmBack {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    trans_b: bool,
}

impl<T: Element> BackwardOp<T> for BmmBack {
    fn backward(&self, parents: &[Tensor<T>], _out: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let (m, k, n) = (self.m, self.k, self.n);
        let (a, b) = (&parents[0], &parents[1]);
        let ad = a.data();
        let bd = b.data();
        let ga = a.requires_grad().then(|| {
            let mut ga = vec![T::zero(); self.batch * m * k];
            for i in 0..self.batch {
                let g = &grad[i * m * n..(i + 1) * m * n];
                let bm = &bd[i * k * n..(i + 1) * k * n];
                // ga = g · b^T, where b is [k,n] (or [n,k] when trans_b)
                let sb = if self.trans_b { Strides::row_major(k) } else { Strides::transposed(n) };
                gemm(m, n, k, T::one(), g, Strides::row_major(n), bm, sb, T::zero(), &mut ga[i * m * k..(i + 1) * m * k], Strides::row_major(k));
            }
            ga
        });
        let gb = b.requires_grad().then(|| {
            let mut gb = vec![T::zero(); self.batch * k * n];
            for i in 0..self.batch {
                let g = &grad[i * m * n..(i + 1) * m * n];
                let am = &ad[i * m * k..(i + 1) * m * k];
                let dst = &mut gb[i * k * n..(i + 1) * k * n];
                if self.trans_b {
                    // gb[n,k] = g^T[n,m] · a[m,k]
                    gemm(n, m, k, T::one(), g, Strides::transposed(n), am, Strides::row_major(k), T::zero(), dst, Strides::row_major(k));
                } else {
                    // gb[k,n] = a^T[k,m] · g[m,n]
                    gemm(k, m, n, T::one(), am, Strides::transposed(k), g, Strides::row_major(n), T::zero(), dst, Strides::row_major(n));
                }
            }
            gb
        });
        vec![ga, gb]
    }
}

impl<T: Element> Tensor<T> {
    /// `x · wᵀ + b` over the last axis of `x`; `w` is `[out, in]`.
    pub fn linear(&self, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Tensor<T> {
        let inp = *self.shape().last().expect("linear on a scalar");
        let [out, w_in] = weight.shape()[..] else {
            panic!("linear weight must be rank 2, got {:?}", weight.shape());
        };
        assert_eq!(w_in, inp, "linear: input width {inp} does not match weight {:?}", weight.shape());
        if let Some(b) = bias {
            assert_eq!(b.shape(), &[out], "linear: bias shape mismatch");
        }
        let rows = self.numel() / inp.max(1);
        let mut data = vec![T::zero(); rows * out];
        {
            let x = self.data();
            let w = weight.data();
            if let Some(b) = bias {
                let bd = b.data();
                for row in data.chunks_exact_mut(out) {
                    row.copy_from_slice(&bd);
                }
            }
            let beta = if bias.is_some() { T::one() } else { T::zero() };
            gemm(rows, inp, out, T::one(), &x, Strides::row_major(inp), &w, Strides::transposed(inp), beta, &mut data, Strides::row_major(out));
        }
        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = out;
        let has_bias = bias.is_some();
        let mut parents = vec![self, weight];
        if let Some(b) = bias {
            parents.push(b);
        }
        Tensor::from_op(data, shape, &parents, || LinearBack { rows, inp, out, has_bias })
    }

    /// Batched matrix product of `[B,m,k]` with `[B,k,n]`, or with `[B,n,k]`
    /// transposed when `trans_b` is set.
    pub fn bmm(&self, other: &Tensor<T>, trans_b: bool) -> Tensor<T> {
        let [batch, m, k] = self.shape()[..] else {
            panic!("bmm lhs must be rank 3, got {:?}", self.shape());
        };
        let (bb, n) = match other.shape()[..] {
            [bb, kk, n] if !trans_b && kk == k => (bb, n),
            [bb, n, kk] if trans_b && kk == k => (bb, n),
            _ => panic!("bmm: {:?} x {:?} (trans_b={trans_b}) is not defined", self.shape(), other.shape()),
        };
        assert_eq!(bb, batch, "bmm: batch mismatch");
        let mut data = vec![T::zero(); batch * m * n];
        {
            let a = self.data();
            let b = other.data();
            let sb = if trans_b { Strides::transposed(k) } else { Strides::row_major(n) };
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    T::one(),
                    &a[i * m * k..(i + 1) * m * k],
                    Strides::row_major(k),
                    &b[i * k * n..(i + 1) * k * n],
                    sb,
                    T::zero(),
                    &mut data[i * m * n..(i + 1) * m * n],
                    Strides::row_major(n),
                );
            }
        }
        Tensor::from_op(data, vec![batch, m, n], &[self, other], || BmmBack { batch, m, k, n, trans_b })
    }
}
