use ggograde_nn::{BatchNorm2d, Conv2d, ConvSpec, Init, Linear, Pool2d, Tensor, VarBuilder};

use super::{Ctx, Features, Network};

struct BasicConv {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl BasicConv {
    fn new(vb: &mut VarBuilder, name: &str, spec: ConvSpec) -> Self {
        Self::with_std(vb, name, spec, 0.1)
    }

    fn with_std(vb: &mut VarBuilder, name: &str, spec: ConvSpec, std: f64) -> Self {
        let mut v = vb.pp(name);
        BasicConv {
            conv: Conv2d::new(&mut v.pp("conv"), spec.no_bias(), Init::Normal(std), None),
            bn: BatchNorm2d::new(&mut v.pp("bn"), spec.out_ch, 1e-3),
        }
    }

    fn forward(&self, x: &Tensor, train: bool) -> Tensor {
        self.bn.forward(&self.conv.forward(x), train).relu()
    }
}

fn sq(i: usize, o: usize, k: usize) -> ConvSpec {
    ConvSpec::new(i, o, k)
}

fn row(i: usize, o: usize, k: usize) -> ConvSpec {
    ConvSpec::rect(i, o, 1, k).padding_hw(0, k / 2)
}

fn col(i: usize, o: usize, k: usize) -> ConvSpec {
    ConvSpec::rect(i, o, k, 1).padding_hw(k / 2, 0)
}

fn chain(x: &Tensor, convs: &[&BasicConv], train: bool) -> Tensor {
    convs.iter().fold(x.clone(), |h, c| c.forward(&h, train))
}

fn avg3(x: &Tensor) -> Tensor {
    x.avg_pool2d(Pool2d::new(3, 1).padded(1), true)
}

struct InceptionA {
    b1: BasicConv,
    b5_1: BasicConv,
    b5_2: BasicConv,
    b3_1: BasicConv,
    b3_2: BasicConv,
    b3_3: BasicConv,
    pool: BasicConv,
}

impl InceptionA {
    fn new(vb: &mut VarBuilder, inp: usize, pool_features: usize) -> Self {
        InceptionA {
            b1: BasicConv::new(vb, "branch1x1", sq(inp, 64, 1)),
            b5_1: BasicConv::new(vb, "branch5x5_1", sq(inp, 48, 1)),
            b5_2: BasicConv::new(vb, "branch5x5_2", sq(48, 64, 5).padding(2)),
            b3_1: BasicConv::new(vb, "branch3x3dbl_1", sq(inp, 64, 1)),
            b3_2: BasicConv::new(vb, "branch3x3dbl_2", sq(64, 96, 3).padding(1)),
            b3_3: BasicConv::new(vb, "branch3x3dbl_3", sq(96, 96, 3).padding(1)),
            pool: BasicConv::new(vb, "branch_pool", sq(inp, pool_features, 1)),
        }
    }

    fn forward(&self, x: &Tensor, t: bool) -> Tensor {
        let a = self.b1.forward(x, t);
        let b = chain(x, &[&self.b5_1, &self.b5_2], t);
        let c = chain(x, &[&self.b3_1, &self.b3_2, &self.b3_3], t);
        let d = self.pool.forward(&avg3(x), t);
        Tensor::concat(&[&a, &b, &c, &d], 1)
    }
}

struct InceptionB {
    b3: BasicConv,
    bd_1: BasicConv,
    bd_2: BasicConv,
    bd_3: BasicConv,
}

impl InceptionB {
    fn new(vb: &mut VarBuilder, inp: usize) -> Self {
        InceptionB {
            b3: BasicConv::new(vb, "branch3x3", sq(inp, 384, 3).stride(2)),
            bd_1: BasicConv::new(vb, "branch3x3dbl_1", sq(inp, 64, 1)),
            bd_2: BasicConv::new(vb, "branch3x3dbl_2", sq(64, 96, 3).padding(1)),
            bd_3: BasicConv::new(vb, "branch3x3dbl_3", sq(96, 96, 3).stride(2)),
        }
    }

    fn forward(&self, x: &Tensor, t: bool) -> Tensor {
        let a = self.b3.forward(x, t);
        let b = chain(x, &[&self.bd_1, &self.bd_2, &self.bd_3], t);
        let c = x.max_pool2d(Pool2d::new(3, 2));
        Tensor::concat(&[&a, &b, &c], 1)
    }
}

struct InceptionC {
    b1: BasicConv,
    b7: [BasicConv; 3],
    b7d: [BasicConv; 5],
    pool: BasicConv,
}

impl InceptionC {
    fn new(vb: &mut VarBuilder, inp: usize, c7: usize) -> Self {
        InceptionC {
            b1: BasicConv::new(vb, "branch1x1", sq(inp, 192, 1)),
            b7: [
                BasicConv::new(vb, "branch7x7_1", sq(inp, c7, 1)),
                BasicConv::new(vb, "branch7x7_2", row(c7, c7, 7)),
                BasicConv::new(vb, "branch7x7_3", col(c7, 192, 7)),
            ],
            b7d: [
                BasicConv::new(vb, "branch7x7dbl_1", sq(inp, c7, 1)),
                BasicConv::new(vb, "branch7x7dbl_2", col(c7, c7, 7)),
                BasicConv::new(vb, "branch7x7dbl_3", row(c7, c7, 7)),
                BasicConv::new(vb, "branch7x7dbl_4", col(c7, c7, 7)),
                BasicConv::new(vb, "branch7x7dbl_5", row(c7, 192, 7)),
            ],
            pool: BasicConv::new(vb, "branch_pool", sq(inp, 192, 1)),
        }
    }

    fn forward(&self, x: &Tensor, t: bool) -> Tensor {
        let a = self.b1.forward(x, t);
        let b = chain(x, &self.b7.iter().collect::<Vec<_>>(), t);
        let c = chain(x, &self.b7d.iter().collect::<Vec<_>>(), t);
        let d = self.pool.forward(&avg3(x), t);
        Tensor::concat(&[&a, &b, &c, &d], 1)
    }
}

struct InceptionD {
    b3: [BasicConv; 2],
    b7: [BasicConv; 4],
}

impl InceptionD {
    fn new(vb: &mut VarBuilder, inp: usize) -> Self {
        InceptionD {
            b3: [
                BasicConv::new(vb, "branch3x3_1", sq(inp, 192, 1)),
                BasicConv::new(vb, "branch3x3_2", sq(192, 320, 3).stride(2)),
            ],
            b7: [
                BasicConv::new(vb, "branch7x7x3_1", sq(inp, 192, 1)),
                BasicConv::new(vb, "branch7x7x3_2", row(192, 192, 7)),
                BasicConv::new(vb, "branch7x7x3_3", col(192, 192, 7)),
                BasicConv::new(vb, "branch7x7x3_4", sq(192, 192, 3).stride(2)),
            ],
        }
    }

    fn forward(&self, x: &Tensor, t: bool) -> Tensor {
        let a = chain(x, &self.b3.iter().collect::<Vec<_>>(), t);
        let b = chain(x, &self.b7.iter().collect::<Vec<_>>(), t);
        let c = x.max_pool2d(Pool2d::new(3, 2));
        Tensor::concat(&[&a, &b, &c], 1)
    }
}

struct InceptionE {
    b1: BasicConv,
    b3_1: BasicConv,
    b3_2a: BasicConv,
    b3_2b: BasicConv,
    bd_1: BasicConv,
    bd_2: BasicConv,
    bd_3a: BasicConv,
    bd_3b: BasicConv,
    pool: BasicConv,
}

impl InceptionE {
    fn new(vb: &mut VarBuilder, inp: usize) -> Self {
        InceptionE {
            b1: BasicConv::new(vb, "branch1x1", sq(inp, 320, 1)),
            b3_1: BasicConv::new(vb, "branch3x3_1", sq(inp, 384, 1)),
            b3_2a: BasicConv::new(vb, "branch3x3_2a", row(384, 384, 3)),
            b3_2b: BasicConv::new(vb, "branch3x3_2b", col(384, 384, 3)),
            bd_1: BasicConv::new(vb, "branch3x3dbl_1", sq(inp, 448, 1)),
            bd_2: BasicConv::new(vb, "branch3x3dbl_2", sq(448, 384, 3).padding(1)),
            bd_3a: BasicConv::new(vb, "branch3x3dbl_3a", row(384, 384, 3)),
            bd_3b: BasicConv::new(vb, "branch3x3dbl_3b", col(384, 384, 3)),
            pool: BasicConv::new(vb, "branch_pool", sq(inp, 192, 1)),
        }
    }

    fn forward(&self, x: &Tensor, t: bool) -> Tensor {
        let a = self.b1.forward(x, t);
        let s = self.b3_1.forward(x, t);
        let b = Tensor::concat(&[&self.b3_2a.forward(&s, t), &self.b3_2b.forward(&s, t)], 1);
        let d = chain(x, &[&self.bd_1, &self.bd_2], t);
        let c = Tensor::concat(&[&self.bd_3a.forward(&d, t), &self.bd_3b.forward(&d, t)], 1);
        let p = self.pool.forward(&avg3(x), t);
        Tensor::concat(&[&a, &b, &c, &p], 1)
    }
}

struct InceptionAux {
    conv0: BasicConv,
    conv1: BasicConv,
    fc: Linear,
}

impl InceptionAux {
    fn new(vb: &mut VarBuilder, inp: usize, k: usize) -> Self {
        InceptionAux {
            conv0: BasicConv::new(vb, "conv0", sq(inp, 128, 1)),
            conv1: BasicConv::with_std(vb, "conv1", sq(128, 768, 5), 0.01),
            fc: Linear::new(&mut vb.pp("fc"), 768, k, Init::Normal(0.001), None),
        }
    }

    fn forward(&self, x: &Tensor, t: bool) -> Tensor {
        let h = x.avg_pool2d(Pool2d::new(5, 3), true);
        let h = chain(&h, &[&self.conv0, &self.conv1], t);
        self.fc.forward(&h.adaptive_avg_pool2d(1, 1).flatten_batch())
    }
}

enum Mixed {
    A(InceptionA),
    B(InceptionB),
    C(InceptionC),
    D(InceptionD),
    E(InceptionE),
}

impl Mixed {
    fn forward(&self, x: &Tensor, t: bool) -> Tensor {
        match self {
            Mixed::A(m) => m.forward(x, t),
            Mixed::B(m) => m.forward(x, t),
            Mixed::C(m) => m.forward(x, t),
            Mixed::D(m) => m.forward(x, t),
            Mixed::E(m) => m.forward(x, t),
        }
    }
}

/// Inception-v3 with auxiliary logits, which are computed in training mode
/// only.
pub struct InceptionV3 {
    stem: Vec<BasicConv>,
    mixed: Vec<Mixed>,
    aux: InceptionAux,
    fc: Linear,
}

/// Index into `mixed` after which the auxiliary classifier taps in.
const AUX_AFTER: usize = 7;
/// Smallest tap resolution the auxiliary classifier's 5x5 convolution fits.
const AUX_MIN_SIDE: usize = 17;

impl InceptionV3 {
    pub fn new(vb: &mut VarBuilder, k: usize) -> Self {
        let stem = vec![
            BasicConv::new(vb, "Conv2d_1a_3x3", sq(3, 32, 3).stride(2)),
            BasicConv::new(vb, "Conv2d_2a_3x3", sq(32, 32, 3)),
            BasicConv::new(vb, "Conv2d_2b_3x3", sq(32, 64, 3).padding(1)),
            BasicConv::new(vb, "Conv2d_3b_1x1", sq(64, 80, 1)),
            BasicConv::new(vb, "Conv2d_4a_3x3", sq(80, 192, 3)),
        ];
        let mixed = vec![
            Mixed::A(InceptionA::new(&mut vb.pp("Mixed_5b"), 192, 32)),
            Mixed::A(InceptionA::new(&mut vb.pp("Mixed_5c"), 256, 64)),
            Mixed::A(InceptionA::new(&mut vb.pp("Mixed_5d"), 288, 64)),
            Mixed::B(InceptionB::new(&mut vb.pp("Mixed_6a"), 288)),
            Mixed::C(InceptionC::new(&mut vb.pp("Mixed_6b"), 768, 128)),
            Mixed::C(InceptionC::new(&mut vb.pp("Mixed_6c"), 768, 160)),
            Mixed::C(InceptionC::new(&mut vb.pp("Mixed_6d"), 768, 160)),
            Mixed::C(InceptionC::new(&mut vb.pp("Mixed_6e"), 768, 192)),
        ];
        let aux = InceptionAux::new(&mut vb.pp("AuxLogits"), 768, k);
        let mut mixed = mixed;
        mixed.push(Mixed::D(InceptionD::new(&mut vb.pp("Mixed_7a"), 768)));
        mixed.push(Mixed::E(InceptionE::new(&mut vb.pp("Mixed_7b"), 1280)));
        mixed.push(Mixed::E(InceptionE::new(&mut vb.pp("Mixed_7c"), 2048)));
        let fc = Linear::new(&mut vb.pp("fc"), 2048, k, Init::Normal(0.1), None);
        InceptionV3 { stem, mixed, aux, fc }
    }
}

impl Network for InceptionV3 {
    fn backbone(&self, x: &Tensor, ctx: &mut Ctx) -> Features {
        let t = ctx.train;
        let pool = Pool2d::new(3, 2);
        let s = &self.stem;
        let mut h = chain(x, &[&s[0], &s[1], &s[2]], t).max_pool2d(pool);
        h = chain(&h, &[&s[3], &s[4]], t).max_pool2d(pool);
        let mut aux_logits = None;
        for (i, m) in self.mixed.iter().enumerate() {
            h = m.forward(&h, t);
            if i == AUX_AFTER && t && h.shape()[2] >= AUX_MIN_SIDE {
                aux_logits = Some(self.aux.forward(&h, t));
            }
        }
        let main = h.adaptive_avg_pool2d(1, 1).flatten_batch();
        Features { main, aux_logits }
    }

    fn head(&self, features: &Tensor, ctx: &mut Ctx) -> Tensor {
        self.fc.forward(&ctx.dropout(features, 0.5))
    }
}
