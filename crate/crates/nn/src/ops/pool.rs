use crate::element::Element;
use crate::tensor::{BackwardOp, Tensor};

/// Pooling window parameters, with PyTorch's output-size rules.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pool2d {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub ceil_mode: bool,
}

impl Pool2d {
    pub fn new(kernel: usize, stride: usize) -> Self {
        Pool2d { kernel, stride, padding: 0, ceil_mode: false }
    }

    pub fn padded(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn ceil(mut self) -> Self {
        self.ceil_mode = true;
        self
    }

    pub fn output_len(&self, input: usize) -> usize {
        let span = input + 2 * self.padding;
        assert!(span >= self.kernel, "pool window {} larger than padded input {span}", self.kernel);
        let num = span - self.kernel;
        let mut out = if self.ceil_mode { num.div_ceil(self.stride) + 1 } else { num / self.stride + 1 };
        // the last window must start inside the input or left padding
        if self.ceil_mode && (out - 1) * self.stride >= input + self.padding {
            out -= 1;
        }
        out
    }
}

struct MaxPoolBack {
    in_len: usize,
    argmax: Vec<usize>,
}

impl<T: Element> BackwardOp<T> for MaxPoolBack {
    fn backward(&self, _p: &[Tensor<T>], _out: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let mut gx = vec![T::zero(); self.in_len];
        for (&src, g) in self.argmax.iter().zip(grad) {
            gx[src] += *g;
        }
        vec![Some(gx)]
    }
}

/// Average pooling expressed as a fixed sparse linear map: for every output,
/// the contributing input window and its divisor.
struct AvgPoolBack {
    in_shape: (usize, usize, usize, usize),
    windows: Vec<(usize, usize, usize, usize, usize)>, // y0, y1, x0, x1, divisor per output plane cell
    out_plane: usize,
}

impl<T: Element> BackwardOp<T> for AvgPoolBack {
    fn backward(&self, _p: &[Tensor<T>], _out: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let (n, c, h, w) = self.in_shape;
        let mut gx = vec![T::zero(); n * c * h * w];
        for plane in 0..n * c {
            let src = &mut gx[plane * h * w..(plane + 1) * h * w];
            let g = &grad[plane * self.out_plane..(plane + 1) * self.out_plane];
            for (gv, &(y0, y1, x0, x1, div)) in g.iter().zip(&self.windows) {
                let share = *gv / T::from_usize(div).unwrap();
                for y in y0..y1 {
                    for v in &mut src[y * w + x0..y * w + x1] {
                        *v += share;
                    }
                }
            }
        }
        vec![Some(gx)]
    }
}

fn avg_pool_with_windows<T: Element>(
    x: &Tensor<T>,
    oh: usize,
    ow: usize,
    windows: Vec<(usize, usize, usize, usize, usize)>,
) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let out_plane = oh * ow;
    let mut data = vec![T::zero(); n * c * out_plane];
    {
        let xd = x.data();
        for plane in 0..n * c {
            let src = &xd[plane * h * w..(plane + 1) * h * w];
            let dst = &mut data[plane * out_plane..(plane + 1) * out_plane];
            for (d, &(y0, y1, x0, x1, div)) in dst.iter_mut().zip(&windows) {
                let mut acc = T::zero();
                for y in y0..y1 {
                    for v in &src[y * w + x0..y * w + x1] {
                        acc += *v;
                    }
                }
                *d = acc / T::from_usize(div).unwrap();
            }
        }
    }
    Tensor::from_op(data, vec![n, c, oh, ow], &[x], move || AvgPoolBack { in_shape: (n, c, h, w), windows, out_plane })
}

impl<T: Element> Tensor<T> {
    pub fn max_pool2d(&self, p: Pool2d) -> Tensor<T> {
        let (n, c, h, w) = self.dims4();
        let (oh, ow) = (p.output_len(h), p.output_len(w));
        let mut data = vec![T::zero(); n * c * oh * ow];
        let mut argmax = vec![0usize; data.len()];
        {
            let xd = self.data();
            for plane in 0..n * c {
                let base = plane * h * w;
                for oy in 0..oh {
                    let y0 = (oy * p.stride) as isize - p.padding as isize;
                    let ys = y0.max(0) as usize..((y0 + p.kernel as isize).min(h as isize)) as usize;
                    for ox in 0..ow {
                        let x0 = (ox * p.stride) as isize - p.padding as isize;
                        let xs = x0.max(0) as usize..((x0 + p.kernel as isize).min(w as isize)) as usize;
                        let mut best = T::neg_infinity();
                        let mut best_idx = base + ys.start * w + xs.start;
                        for y in ys.clone() {
                            for xx in xs.clone() {
                                let v = xd[base + y * w + xx];
                                if v > best || v.is_nan() {
                                    best = v;
                                    best_idx = base + y * w + xx;
                                }
                            }
                        }
                        let o = (plane * oh + oy) * ow + ox;
                        data[o] = best;
                        argmax[o] = best_idx;
                    }
                }
            }
        }
        let in_len = self.numel();
        Tensor::from_op(data, vec![n, c, oh, ow], &[self], move || MaxPoolBack { in_len, argmax })
    }

    /// Average pooling; `count_include_pad` follows the PyTorch definition.
    pub fn avg_pool2d(&self, p: Pool2d, count_include_pad: bool) -> Tensor<T> {
        let (_, _, h, w) = self.dims4();
        let (oh, ow) = (p.output_len(h), p.output_len(w));
        let bounds = |o: usize, len: usize| {
            let start = (o * p.stride) as isize - p.padding as isize;
            let end = (start + p.kernel as isize).min((len + p.padding) as isize);
            let padded = (end - start) as usize;
            let (s, e) = (start.max(0) as usize, end.min(len as isize) as usize);
            (s, e, padded)
        };
        let mut windows = Vec::with_capacity(oh * ow);
        for oy in 0..oh {
            let (y0, y1, ph) = bounds(oy, h);
            for ox in 0..ow {
                let (x0, x1, pw) = bounds(ox, w);
                let div = if count_include_pad { ph * pw } else { (y1 - y0) * (x1 - x0) };
                windows.push((y0, y1, x0, x1, div.max(1)));
            }
        }
        avg_pool_with_windows(self, oh, ow, windows)
    }

    pub fn adaptive_avg_pool2d(&self, oh: usize, ow: usize) -> Tensor<T> {
        let (_, _, h, w) = self.dims4();
        let mut windows = Vec::with_capacity(oh * ow);
        for oy in 0..oh {
            let (y0, y1) = (oy * h / oh, ((oy + 1) * h).div_ceil(oh));
            for ox in 0..ow {
                let (x0, x1) = (ox * w / ow, ((ox + 1) * w).div_ceil(ow));
                windows.push((y0, y1, x0, x1, (y1 - y0) * (x1 - x0)));
            }
        }
        avg_pool_with_windows(self, oh, ow, windows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_sizes_follow_torch_rules() {
        // squeezenet: 111 -> 55 with k3 s2 ceil
        assert_eq!(Pool2d::new(3, 2).ceil().output_len(111), 55);
        assert_eq!(Pool2d::new(3, 2).ceil().output_len(54), 27);
        // resnet stem: 112 -> 56 with k3 s2 p1
        assert_eq!(Pool2d::new(3, 2).padded(1).output_len(112), 56);
        // alexnet: 55 -> 27
        assert_eq!(Pool2d::new(3, 2).output_len(55), 27);
    }

    #[test]
    fn max_pool_routes_gradient_to_argmax() {
        let x = Tensor::<f64>::param(vec![1.0, 5.0, 2.0, 3.0], &[1, 1, 2, 2]);
        let y = x.max_pool2d(Pool2d::new(2, 2));
        assert_eq!(y.to_vec(), vec![5.0]);
        y.sum_all().backward();
        assert_eq!(x.grad().unwrap(), vec![0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn avg_pool_counts_padding() {
        let x = Tensor::<f64>::new(vec![9.0; 9], &[1, 1, 3, 3]);
        let with_pad = x.avg_pool2d(Pool2d::new(3, 1).padded(1), true).to_vec();
        // corner sees 4 of 9 cells
        assert!((with_pad[0] - 4.0).abs() < 1e-12);
        let without = x.avg_pool2d(Pool2d::new(3, 1).padded(1), false).to_vec();
        assert!(without.iter().all(|v| (v - 9.0).abs() < 1e-12));
    }

    #[test]
    fn adaptive_pool_to_one_is_mean() {
        let x = Tensor::<f64>::new((0..12).map(f64::from).collect(), &[1, 3, 2, 2]);
        assert_eq!(x.adaptive_avg_pool2d(1, 1).to_vec(), vec![1.5, 5.5, 9.5]);
    }
}
