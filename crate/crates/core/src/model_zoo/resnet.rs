use ggograde_nn::init::TORCH_DEFAULT_WEIGHT;
use ggograde_nn::{BatchNorm2d, Conv2d, ConvSpec, FanMode, Init, Linear, Pool2d, Tensor, VarBuilder};

use super::{Ctx, Features, Network};

const EXPANSION: usize = 4;

fn conv(vb: &mut VarBuilder, name: &str, spec: ConvSpec) -> Conv2d {
    Conv2d::new(&mut vb.pp(name), spec.no_bias(), Init::KaimingNormal(FanMode::Out), None)
}

fn bn(vb: &mut VarBuilder, name: &str, ch: usize) -> BatchNorm2d {
    BatchNorm2d::new(&mut vb.pp(name), ch, 1e-5)
}

struct Bottleneck {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    conv3: Conv2d,
    bn3: BatchNorm2d,
    downsample: Option<(Conv2d, BatchNorm2d)>,
}

impl Bottleneck {
    fn new(vb: &mut VarBuilder, inplanes: usize, planes: usize, width: usize, stride: usize) -> Self {
        let out = planes * EXPANSION;
        let downsample = (stride != 1 || inplanes != out).then(|| {
            let mut d = vb.pp("downsample");
            (conv(&mut d, "0", ConvSpec::new(inplanes, out, 1).stride(stride)), bn(&mut d, "1", out))
        });
        Bottleneck {
            conv1: conv(vb, "conv1", ConvSpec::new(inplanes, width, 1)),
            bn1: bn(vb, "bn1", width),
            conv2: conv(vb, "conv2", ConvSpec::new(width, width, 3).stride(stride).padding(1)),
            bn2: bn(vb, "bn2", width),
            conv3: conv(vb, "conv3", ConvSpec::new(width, out, 1)),
            bn3: bn(vb, "bn3", out),
            downsample,
        }
    }

    fn forward(&self, x: &Tensor, train: bool) -> Tensor {
        let h = self.bn1.forward(&self.conv1.forward(x), train).relu();
        let h = self.bn2.forward(&self.conv2.forward(&h), train).relu();
        let h = self.bn3.forward(&self.conv3.forward(&h), train);
        let identity = match &self.downsample {
            Some((c, b)) => b.forward(&c.forward(x), train),
            None => x.clone(),
        };
        h.add(&identity).relu()
    }
}

/// Bottleneck ResNet; `width_per_group = 128` gives the wide variant.
pub struct ResNet {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    layers: Vec<Vec<Bottleneck>>,
    fc: Linear,
}

impl ResNet {
    pub fn new(vb: &mut VarBuilder, blocks: [usize; 4], width_per_group: usize, k: usize) -> Self {
        let conv1 = conv(vb, "conv1", ConvSpec::new(3, 64, 7).stride(2).padding(3));
        let bn1 = bn(vb, "bn1", 64);
        let mut inplanes = 64;
        let mut layers = Vec::new();
        for (i, &count) in blocks.iter().enumerate() {
            let planes = 64 << i;
            let width = planes * width_per_group / 64;
            let mut lv = vb.pp(format!("layer{}", i + 1));
            let mut layer = Vec::new();
            for b in 0..count {
                let stride = if b == 0 && i > 0 { 2 } else { 1 };
                layer.push(Bottleneck::new(&mut lv.pp(b), inplanes, planes, width, stride));
                inplanes = planes * EXPANSION;
            }
            layers.push(layer);
        }
        let fc = Linear::new(&mut vb.pp("fc"), 512 * EXPANSION, k, TORCH_DEFAULT_WEIGHT, None);
        ResNet { conv1, bn1, layers, fc }
    }
}

impl Network for ResNet {
    fn backbone(&self, x: &Tensor, ctx: &mut Ctx) -> Features {
        let mut h = self.bn1.forward(&self.conv1.forward(x), ctx.train).relu();
        h = h.max_pool2d(Pool2d::new(3, 2).padded(1));
        for layer in &self.layers {
            for block in layer {
                h = block.forward(&h, ctx.train);
            }
        }
        Features { main: h.adaptive_avg_pool2d(1, 1).flatten_batch(), aux_logits: None }
    }

    fn head(&self, features: &Tensor, _ctx: &mut Ctx) -> Tensor {
        self.fc.forward(features)
    }
}
