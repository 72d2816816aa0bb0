use ggograde_nn::init::TORCH_DEFAULT_WEIGHT;
use ggograde_nn::{BatchNorm2d, Conv2d, ConvSpec, FanMode, Init, Linear, Pool2d, Tensor, VarBuilder};

use super::{Ctx, Features, Network};

const BN_SIZE: usize = 4;

fn conv(vb: &mut VarBuilder, name: &str, spec: ConvSpec) -> Conv2d {
    Conv2d::new(&mut vb.pp(name), spec.no_bias(), Init::KaimingNormal(FanMode::In), None)
}

fn bn(vb: &mut VarBuilder, name: &str, ch: usize) -> BatchNorm2d {
    BatchNorm2d::new(&mut vb.pp(name), ch, 1e-5)
}

struct DenseLayer {
    norm1: BatchNorm2d,
    conv1: Conv2d,
    norm2: BatchNorm2d,
    conv2: Conv2d,
}

impl DenseLayer {
    fn new(vb: &mut VarBuilder, inp: usize, growth: usize) -> Self {
        DenseLayer {
            norm1: bn(vb, "norm1", inp),
            conv1: conv(vb, "conv1", ConvSpec::new(inp, BN_SIZE * growth, 1)),
            norm2: bn(vb, "norm2", BN_SIZE * growth),
            conv2: conv(vb, "conv2", ConvSpec::new(BN_SIZE * growth, growth, 3).padding(1)),
        }
    }

    fn forward(&self, x: &Tensor, train: bool) -> Tensor {
        let h = self.conv1.forward(&self.norm1.forward(x, train).relu());
        self.conv2.forward(&self.norm2.forward(&h, train).relu())
    }
}

struct Transition {
    norm: BatchNorm2d,
    conv: Conv2d,
}

impl Transition {
    fn forward(&self, x: &Tensor, train: bool) -> Tensor {
        let h = self.conv.forward(&self.norm.forward(x, train).relu());
        h.avg_pool2d(Pool2d::new(2, 2), true)
    }
}

pub struct DenseNet {
    conv0: Conv2d,
    norm0: BatchNorm2d,
    blocks: Vec<Vec<DenseLayer>>,
    transitions: Vec<Transition>,
    norm5: BatchNorm2d,
    classifier: Linear,
}

impl DenseNet {
    pub fn new(vb: &mut VarBuilder, growth: usize, config: [usize; 4], init_features: usize, k: usize) -> Self {
        let mut f = vb.pp("features");
        let conv0 = conv(&mut f, "conv0", ConvSpec::new(3, init_features, 7).stride(2).padding(3));
        let norm0 = bn(&mut f, "norm0", init_features);
        let mut channels = init_features;
        let mut blocks = Vec::new();
        let mut transitions = Vec::new();
        for (i, &layers) in config.iter().enumerate() {
            let mut bv = f.pp(format!("denseblock{}", i + 1));
            let block = (0..layers)
                .map(|l| DenseLayer::new(&mut bv.pp(format!("denselayer{}", l + 1)), channels + l * growth, growth))
                .collect();
            blocks.push(block);
            channels += layers * growth;
            if i + 1 < config.len() {
                let mut tv = f.pp(format!("transition{}", i + 1));
                transitions.push(Transition {
                    norm: bn(&mut tv, "norm", channels),
                    conv: conv(&mut tv, "conv", ConvSpec::new(channels, channels / 2, 1)),
                });
                channels /= 2;
            }
        }
        let norm5 = bn(&mut f, "norm5", channels);
        let classifier = Linear::new(&mut vb.pp("classifier"), channels, k, TORCH_DEFAULT_WEIGHT, Some(Init::Zeros));
        DenseNet { conv0, norm0, blocks, transitions, norm5, classifier }
    }
}

impl Network for DenseNet {
    fn backbone(&self, x: &Tensor, ctx: &mut Ctx) -> Features {
        let train = ctx.train;
        let mut h = self.norm0.forward(&self.conv0.forward(x), train).relu();
        h = h.max_pool2d(Pool2d::new(3, 2).padded(1));
        for (i, block) in self.blocks.iter().enumerate() {
            for layer in block {
                let new = layer.forward(&h, train);
                h = Tensor::concat(&[&h, &new], 1);
            }
            if let Some(t) = self.transitions.get(i) {
                h = t.forward(&h, train);
            }
        }
        h = self.norm5.forward(&h, train).relu();
        Features { main: h.adaptive_avg_pool2d(1, 1).flatten_batch(), aux_logits: None }
    }

    fn head(&self, features: &Tensor, _ctx: &mut Ctx) -> Tensor {
        self.classifier.forward(features)
    }
}
