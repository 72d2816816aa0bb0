use ggograde_nn::{Conv2d, ConvSpec, Init, Pool2d, Tensor, VarBuilder};

use super::{Ctx, Features, Network};

struct Fire {
    squeeze: Conv2d,
    expand1x1: Conv2d,
    expand3x3: Conv2d,
}

impl Fire {
    fn new(vb: &mut VarBuilder, inp: usize, squeeze: usize, e1: usize, e3: usize) -> Self {
        let w = Init::KaimingUniform(0.0);
        let b = Some(Init::Zeros);
        Fire {
            squeeze: Conv2d::new(&mut vb.pp("squeeze"), ConvSpec::new(inp, squeeze, 1), w, b),
            expand1x1: Conv2d::new(&mut vb.pp("expand1x1"), ConvSpec::new(squeeze, e1, 1), w, b),
            expand3x3: Conv2d::new(&mut vb.pp("expand3x3"), ConvSpec::new(squeeze, e3, 3).padding(1), w, b),
        }
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        let s = self.squeeze.forward(x).relu();
        let a = self.expand1x1.forward(&s).relu();
        let b = self.expand3x3.forward(&s).relu();
        Tensor::concat(&[&a, &b], 1)
    }
}

enum Layer {
    Fire(Fire),
    Pool,
}

/// SqueezeNet 1.1.
pub struct SqueezeNet {
    stem: Conv2d,
    layers: Vec<Layer>,
    final_conv: Conv2d,
}

impl SqueezeNet {
    pub fn v1_1(vb: &mut VarBuilder, k: usize) -> Self {
        let mut f = vb.pp("features");
        let stem = Conv2d::new(&mut f.pp(0), ConvSpec::new(3, 64, 3).stride(2), Init::KaimingUniform(0.0), Some(Init::Zeros));
        let fires = [
            (3, 64, 16, 64),
            (4, 128, 16, 64),
            (6, 128, 32, 128),
            (7, 256, 32, 128),
            (9, 256, 48, 192),
            (10, 384, 48, 192),
            (11, 384, 64, 256),
            (12, 512, 64, 256),
        ];
        let mut layers = Vec::new();
        for (i, inp, s, e) in fires {
            if i == 6 || i == 9 {
                layers.push(Layer::Pool);
            }
            layers.push(Layer::Fire(Fire::new(&mut f.pp(i), inp, s, e, e)));
        }
        let final_conv = Conv2d::new(&mut vb.pp("classifier").pp(1), ConvSpec::new(512, k, 1), Init::Normal(0.01), Some(Init::Zeros));
        SqueezeNet { stem, layers, final_conv }
    }
}

impl Network for SqueezeNet {
    fn backbone(&self, x: &Tensor, _ctx: &mut Ctx) -> Features {
        let pool = Pool2d::new(3, 2).ceil();
        let mut h = self.stem.forward(x).relu().max_pool2d(pool);
        for layer in &self.layers {
            h = match layer {
                Layer::Fire(f) => f.forward(&h),
                Layer::Pool => h.max_pool2d(pool),
            };
        }
        Features { main: h, aux_logits: None }
    }

    fn head(&self, features: &Tensor, ctx: &mut Ctx) -> Tensor {
        let h = self.final_conv.forward(&ctx.dropout(features, 0.5)).relu();
        h.adaptive_avg_pool2d(1, 1).flatten_batch()
    }
}
