//! Parameterised building blocks.

use crate::init::{fans, Init};
use crate::ops::conv::Conv2dGeometry;
use crate::store::VarBuilder;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub bias: bool,
}

impl ConvSpec {
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        ConvSpec { in_ch, out_ch, kernel: (kernel, kernel), stride: (1, 1), padding: (0, 0), bias: true }
    }

    pub fn rect(in_ch: usize, out_ch: usize, kh: usize, kw: usize) -> Self {
        ConvSpec { kernel: (kh, kw), ..Self::new(in_ch, out_ch, 1) }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = (s, s);
        self
    }

    pub fn padding(mut self, p: usize) -> Self {
        self.padding = (p, p);
        self
    }

    pub fn padding_hw(mut self, ph: usize, pw: usize) -> Self {
        self.padding = (ph, pw);
        self
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub geometry: Conv2dGeometry,
}

impl Conv2d {
    /// Bias defaults to the fan-in uniform when `bias_init` is `None`.
    pub fn new(vb: &mut VarBuilder, spec: ConvSpec, weight_init: Init, bias_init: Option<Init>) -> Self {
        let shape = [spec.out_ch, spec.in_ch, spec.kernel.0, spec.kernel.1];
        let weight = vb.param("weight", &shape, weight_init);
        let bias = spec.bias.then(|| {
            let init = bias_init.unwrap_or(Init::FanInBias(fans(&shape).0));
            vb.param("bias", &[spec.out_ch], init)
        });
        Conv2d { weight, bias, geometry: Conv2dGeometry { stride: spec.stride, padding: spec.padding } }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.conv2d(&self.weight, self.bias.as_ref(), self.geometry)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(vb: &mut VarBuilder, inp: usize, out: usize, weight_init: Init, bias_init: Option<Init>) -> Self {
        let weight = vb.param("weight", &[out, inp], weight_init);
        let bias = vb.param("bias", &[out], bias_init.unwrap_or(Init::FanInBias(inp)));
        Linear { weight, bias: Some(bias) }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.linear(&self.weight, self.bias.as_ref())
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new(vb: &mut VarBuilder, channels: usize, eps: f64) -> Self {
        BatchNorm2d {
            weight: vb.param("weight", &[channels], Init::Constant(1.0)),
            bias: vb.param("bias", &[channels], Init::Zeros),
            running_mean: vb.buffer("running_mean", &[channels], 0.0),
            running_var: vb.buffer("running_var", &[channels], 1.0),
            eps,
            momentum: 0.1,
        }
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Tensor {
        x.batch_norm2d(&self.weight, &self.bias, &self.running_mean, &self.running_var, train, self.momentum, self.eps)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub weight: Tensor,
    pub bias: Tensor,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(vb: &mut VarBuilder, dim: usize, eps: f64) -> Self {
        LayerNorm {
            weight: vb.param("weight", &[dim], Init::Constant(1.0)),
            bias: vb.param("bias", &[dim], Init::Zeros),
            eps,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.layer_norm(&self.weight, &self.bias, self.eps)
    }
}
