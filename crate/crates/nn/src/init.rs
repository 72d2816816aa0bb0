//! Weight initialisation schemes (PyTorch conventions).

use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FanMode {
    In,
    Out,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Constant(f64),
    Uniform(f64),
    Normal(f64),
    /// Normal truncated at two standard deviations.
    TruncNormal(f64),
    /// He normal with ReLU gain.
    KaimingNormal(FanMode),
    /// He uniform with leaky-ReLU slope `a` on fan-in. `a = √5` is the
    /// default for PyTorch conv and linear weights.
    KaimingUniform(f64),
    XavierUniform,
    /// `U(-1/√fan_in, 1/√fan_in)`, the default PyTorch bias.
    FanInBias(usize),
}

/// `(fan_in, fan_out)` of a weight shaped `[out, in, ...kernel]`.
pub fn fans(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [n] => (*n, *n),
        [out, inp, rest @ ..] => {
            let receptive: usize = rest.iter().product();
            (inp * receptive, out * receptive)
        }
    }
}

impl Init {
    pub fn sample(&self, shape: &[usize], rng: &mut dyn RngCore) -> Vec<f32> {
        let len: usize = shape.iter().product();
        let (fan_in, fan_out) = fans(shape);
        let uniform = |bound: f64, rng: &mut dyn RngCore| -> Vec<f32> {
            (0..len).map(|_| rng.random_range(-bound..=bound) as f32).collect()
        };
        let normal = |std: f64, rng: &mut dyn RngCore| -> Vec<f32> {
            let dist = Normal::new(0.0, std).expect("valid std");
            (0..len).map(|_| dist.sample(rng) as f32).collect()
        };
        match *self {
            Init::Zeros => vec![0.0; len],
            Init::Constant(v) => vec![v as f32; len],
            Init::Uniform(bound) => uniform(bound, rng),
            Init::Normal(std) => normal(std, rng),
            Init::TruncNormal(std) => {
                let dist = Normal::new(0.0, std).expect("valid std");
                (0..len)
                    .map(|_| loop {
                        let v: f64 = dist.sample(rng);
                        if v.abs() <= 2.0 * std {
                            break v as f32;
                        }
                    })
                    .collect()
            }
            Init::KaimingNormal(mode) => {
                let fan = if mode == FanMode::In { fan_in } else { fan_out };
                normal((2.0 / fan as f64).sqrt(), rng)
            }
            Init::KaimingUniform(a) => {
                let gain = (2.0 / (1.0 + a * a)).sqrt();
                uniform(gain * (3.0 / fan_in as f64).sqrt(), rng)
            }
            Init::XavierUniform => uniform((6.0 / (fan_in + fan_out) as f64).sqrt(), rng),
            Init::FanInBias(fan) => uniform(1.0 / (fan as f64).sqrt(), rng),
        }
    }
}

pub const TORCH_DEFAULT_WEIGHT: Init = Init::KaimingUniform(2.236_067_977_499_79);
