use crate::element::Element;
use crate::tensor::{BackwardOp, Tensor};

struct CrossEntropyBack<T> {
    probs: Vec<T>,
    targets: Vec<usize>,
    classes: usize,
}

impl<T: Element> BackwardOp<T> for CrossEntropyBack<T> {
    fn backward(&self, _p: &[Tensor<T>], _out: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let n = self.targets.len();
        let scale = grad[0] / T::from_usize(n).unwrap();
        let mut gx = self.probs.clone();
        for (row, &t) in gx.chunks_exact_mut(self.classes).zip(&self.targets) {
            row[t] -= T::one();
            for v in row.iter_mut() {
                *v *= scale;
            }
        }
        vec![Some(gx)]
    }
}

/// Row-wise softmax, computed stably.
pub fn softmax_rows<T: Element>(logits: &[T], classes: usize) -> Vec<T> {
    let mut out = logits.to_vec();
    for row in out.chunks_exact_mut(classes) {
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
    out
}

impl<T: Element> Tensor<T> {
    /// Mean categorical cross-entropy of `[N, K]` logits against class ids.
    pub fn cross_entropy(&self, targets: &[usize]) -> Tensor<T> {
        let [n, k] = self.shape()[..] else {
            panic!("cross_entropy expects [N, K] logits, got {:?}", self.shape());
        };
        assert_eq!(n, targets.len(), "cross_entropy: {n} rows but {} targets", targets.len());
        assert!(n > 0, "cross_entropy of an empty batch");
        let (loss, probs) = {
            let x = self.data();
            let mut total = T::zero();
            for (row, &t) in x.chunks_exact(k).zip(targets) {
                assert!(t < k, "target {t} out of range for {k} classes");
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let lse = max + row.iter().map(|v| (*v - max).exp()).sum::<T>().ln();
                total += lse - row[t];
            }
            (total / T::from_usize(n).unwrap(), softmax_rows(&x, k))
        };
        let targets = targets.to_vec();
        Tensor::from_op(vec![loss], vec![], &[self], move || CrossEntropyBack { probs, targets, classes: k })
    }
}
