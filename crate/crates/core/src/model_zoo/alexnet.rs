use ggograde_nn::init::TORCH_DEFAULT_WEIGHT;
use ggograde_nn::{Conv2d, ConvSpec, Linear, Pool2d, Tensor, VarBuilder};

use super::{Ctx, Features, Network};

pub struct AlexNet {
    convs: Vec<Conv2d>,
    fc1: Linear,
    fc2: Linear,
    head: Linear,
}

impl AlexNet {
    pub fn new(vb: &mut VarBuilder, k: usize) -> Self {
        let layers = [
            (0, ConvSpec::new(3, 64, 11).stride(4).padding(2)),
            (3, ConvSpec::new(64, 192, 5).padding(2)),
            (6, ConvSpec::new(192, 384, 3).padding(1)),
            (8, ConvSpec::new(384, 256, 3).padding(1)),
            (10, ConvSpec::new(256, 256, 3).padding(1)),
        ];
        let mut f = vb.pp("features");
        let convs = layers
            .into_iter()
            .map(|(i, spec)| Conv2d::new(&mut f.pp(i), spec, TORCH_DEFAULT_WEIGHT, None))
            .collect();
        let mut c = vb.pp("classifier");
        let fc1 = Linear::new(&mut c.pp(1), 256 * 6 * 6, 4096, TORCH_DEFAULT_WEIGHT, None);
        let fc2 = Linear::new(&mut c.pp(4), 4096, 4096, TORCH_DEFAULT_WEIGHT, None);
        let head = Linear::new(&mut c.pp(6), 4096, k, TORCH_DEFAULT_WEIGHT, None);
        AlexNet { convs, fc1, fc2, head }
    }
}

impl Network for AlexNet {
    fn backbone(&self, x: &Tensor, ctx: &mut Ctx) -> Features {
        let pool = Pool2d::new(3, 2);
        let c = &self.convs;
        let mut h = c[0].forward(x).relu().max_pool2d(pool);
        h = c[1].forward(&h).relu().max_pool2d(pool);
        h = c[2].forward(&h).relu();
        h = c[3].forward(&h).relu();
        h = c[4].forward(&h).relu().max_pool2d(pool);
        h = h.adaptive_avg_pool2d(6, 6).flatten_batch();
        h = self.fc1.forward(&ctx.dropout(&h, 0.5)).relu();
        h = self.fc2.forward(&ctx.dropout(&h, 0.5)).relu();
        Features { main: h, aux_logits: None }
    }

    fn head(&self, features: &Tensor, _ctx: &mut Ctx) -> Tensor {
        self.head.forward(features)
    }
}
