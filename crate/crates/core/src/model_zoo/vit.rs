use ggograde_nn::init::TORCH_DEFAULT_WEIGHT;
use ggograde_nn::{Conv2d, ConvSpec, Init, LayerNorm, Linear, Tensor, VarBuilder};

use super::{Ctx, Features, Network};

const PATCH: usize = 32;
const DIM: usize = 768;
const HEADS: usize = 12;
const LAYERS: usize = 12;
const MLP_DIM: usize = 3072;
const LN_EPS: f64 = 1e-6;

struct SelfAttention {
    in_proj_weight: Tensor,
    in_proj_bias: Tensor,
    out_proj: Linear,
}

impl SelfAttention {
    fn new(vb: &mut VarBuilder) -> Self {
        SelfAttention {
            in_proj_weight: vb.param("in_proj_weight", &[3 * DIM, DIM], Init::XavierUniform),
            in_proj_bias: vb.param("in_proj_bias", &[3 * DIM], Init::Zeros),
            out_proj: Linear::new(&mut vb.pp("out_proj"), DIM, DIM, TORCH_DEFAULT_WEIGHT, Some(Init::Zeros)),
        }
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        let (b, s) = (x.shape()[0], x.shape()[1]);
        let hd = DIM / HEADS;
        let qkv = x.linear(&self.in_proj_weight, Some(&self.in_proj_bias));
        let split = |i: usize| {
            qkv.narrow(2, i * DIM, DIM)
                .reshape(&[b, s, HEADS, hd])
                .permute(&[0, 2, 1, 3])
                .reshape(&[b * HEADS, s, hd])
        };
        let (q, k, v) = (split(0), split(1), split(2));
        let attn = q.bmm(&k, true).scale(1.0 / (hd as f32).sqrt()).softmax_last();
        let out = attn.bmm(&v, false).reshape(&[b, HEADS, s, hd]).permute(&[0, 2, 1, 3]).reshape(&[b, s, DIM]);
        self.out_proj.forward(&out)
    }
}

struct EncoderBlock {
    ln_1: LayerNorm,
    attention: SelfAttention,
    ln_2: LayerNorm,
    mlp_0: Linear,
    mlp_3: Linear,
}

impl EncoderBlock {
    fn new(vb: &mut VarBuilder) -> Self {
        let mut mlp = vb.pp("mlp");
        let mlp_0 = Linear::new(&mut mlp.pp(0), DIM, MLP_DIM, Init::XavierUniform, Some(Init::Normal(1e-6)));
        let mlp_3 = Linear::new(&mut mlp.pp(3), MLP_DIM, DIM, Init::XavierUniform, Some(Init::Normal(1e-6)));
        EncoderBlock {
            ln_1: LayerNorm::new(&mut vb.pp("ln_1"), DIM, LN_EPS),
            attention: SelfAttention::new(&mut vb.pp("self_attention")),
            ln_2: LayerNorm::new(&mut vb.pp("ln_2"), DIM, LN_EPS),
            mlp_0,
            mlp_3,
        }
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        let x = x.add(&self.attention.forward(&self.ln_1.forward(x)));
        let h = self.mlp_3.forward(&self.mlp_0.forward(&self.ln_2.forward(&x)).gelu());
        x.add(&h)
    }
}

/// ViT-B/32. The position table is sized for the configured input side.
pub struct VisionTransformer {
    conv_proj: Conv2d,
    class_token: Tensor,
    pos_embedding: Tensor,
    layers: Vec<EncoderBlock>,
    ln: LayerNorm,
    head: Linear,
}

impl VisionTransformer {
    pub fn b32(vb: &mut VarBuilder, v: usize, k: usize) -> Self {
        let grid = v / PATCH;
        let fan_in = 3 * PATCH * PATCH;
        let conv_proj = Conv2d::new(
            &mut vb.pp("conv_proj"),
            ConvSpec::new(3, DIM, PATCH).stride(PATCH),
            Init::Normal((1.0 / fan_in as f64).sqrt()),
            Some(Init::Zeros),
        );
        let class_token = vb.param("class_token", &[1, 1, DIM], Init::Zeros);
        let mut enc = vb.pp("encoder");
        let pos_embedding = enc.param("pos_embedding", &[1, grid * grid + 1, DIM], Init::Normal(0.02));
        let mut lv = enc.pp("layers");
        let layers = (0..LAYERS).map(|i| EncoderBlock::new(&mut lv.pp(format!("encoder_layer_{i}")))).collect();
        let ln = LayerNorm::new(&mut enc.pp("ln"), DIM, LN_EPS);
        let head = Linear::new(&mut vb.pp("heads").pp("head"), DIM, k, Init::Zeros, Some(Init::Zeros));
        VisionTransformer { conv_proj, class_token, pos_embedding, layers, ln, head }
    }
}

impl Network for VisionTransformer {
    fn backbone(&self, x: &Tensor, _ctx: &mut Ctx) -> Features {
        let b = x.shape()[0];
        let p = self.conv_proj.forward(x);
        let tokens = p.shape()[2] * p.shape()[3];
        let p = p.reshape(&[b, DIM, tokens]).permute(&[0, 2, 1]);
        let cls = self.class_token.repeat_leading(b);
        let mut h = Tensor::concat(&[&cls, &p], 1).add_leading_broadcast(&self.pos_embedding);
        for layer in &self.layers {
            h = layer.forward(&h);
        }
        let h = self.ln.forward(&h);
        Features { main: h.narrow(1, 0, 1).reshape(&[b, DIM]), aux_logits: None }
    }

    fn head(&self, features: &Tensor, _ctx: &mut Ctx) -> Tensor {
        self.head.forward(features)
    }
}
