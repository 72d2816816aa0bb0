use ggograde_nn::{Conv2d, ConvSpec, FanMode, Init, Linear, Pool2d, Tensor, VarBuilder};

use super::{Ctx, Features, Network};

const VGG16: [Option<usize>; 18] = [
    Some(64), Some(64), None,
    Some(128), Some(128), None,
    Some(256), Some(256), Some(256), None,
    Some(512), Some(512), Some(512), None,
    Some(512), Some(512), Some(512), None,
];

enum Layer {
    Conv(Conv2d),
    Pool,
}

pub struct Vgg {
    features: Vec<Layer>,
    fc0: Linear,
    fc3: Linear,
    head: Linear,
}

impl Vgg {
    pub fn vgg16(vb: &mut VarBuilder, k: usize) -> Self {
        let mut f = vb.pp("features");
        let mut features = Vec::new();
        let mut index = 0;
        let mut channels = 3;
        for entry in VGG16 {
            match entry {
                Some(out) => {
                    let spec = ConvSpec::new(channels, out, 3).padding(1);
                    let conv = Conv2d::new(&mut f.pp(index), spec, Init::KaimingNormal(FanMode::Out), Some(Init::Zeros));
                    features.push(Layer::Conv(conv));
                    channels = out;
                    index += 2;
                }
                None => {
                    features.push(Layer::Pool);
                    index += 1;
                }
            }
        }
        let mut c = vb.pp("classifier");
        let linear = |c: &mut VarBuilder, i: usize, inp: usize, out: usize| {
            Linear::new(&mut c.pp(i), inp, out, Init::Normal(0.01), Some(Init::Zeros))
        };
        let fc0 = linear(&mut c, 0, 512 * 7 * 7, 4096);
        let fc3 = linear(&mut c, 3, 4096, 4096);
        let head = linear(&mut c, 6, 4096, k);
        Vgg { features, fc0, fc3, head }
    }
}

impl Network for Vgg {
    fn backbone(&self, x: &Tensor, ctx: &mut Ctx) -> Features {
        let mut h = x.clone();
        for layer in &self.features {
            h = match layer {
                Layer::Conv(c) => c.forward(&h).relu(),
                Layer::Pool => h.max_pool2d(Pool2d::new(2, 2)),
            };
        }
        h = h.adaptive_avg_pool2d(7, 7).flatten_batch();
        h = ctx.dropout(&self.fc0.forward(&h).relu(), 0.5);
        h = self.fc3.forward(&h).relu();
        Features { main: h, aux_logits: None }
    }

    fn head(&self, features: &Tensor, ctx: &mut Ctx) -> Tensor {
        self.head.forward(&ctx.dropout(features, 0.5))
    }
}
