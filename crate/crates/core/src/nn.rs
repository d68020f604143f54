//! Minimal trainable layers on top of candle `Var`s.

use candle_core::{DType, Device, Tensor, Var};

use crate::conv::same_conv;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

/// A named trainable tensor. `decay` marks weights that take weight decay;
/// biases do not.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub var: Var,
    pub decay: bool,
}

/// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
fn fan_in_uniform(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng, dtype: DType) -> Result<Var> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    let t = Tensor::from_vec(v, shape, &Device::Cpu)?.to_dtype(dtype)?;
    Ok(Var::from_tensor(&t)?)
}

fn zeros(shape: &[usize], dtype: DType) -> Result<Var> {
    Ok(Var::zeros(shape, dtype, &Device::Cpu)?)
}

pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Square-kernel convolution, stride 1, zero padding that keeps the size.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Var,
    pub bias: Var,
}

impl Conv2d {
    pub fn new(c_in: usize, c_out: usize, k: usize, rng: &mut ChaCha8Rng, dtype: DType) -> Result<Self> {
        Ok(Self {
            weight: fan_in_uniform(&[c_out, c_in, k, k], c_in * k * k, rng, dtype)?,
            bias: zeros(&[c_out], dtype)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let b = self.bias.as_tensor().reshape((1, (), 1, 1))?;
        Ok(same_conv(x, self.weight.as_tensor())?.broadcast_add(&b)?)
    }

    pub fn params(&self, prefix: &str) -> Vec<Param> {
        vec![
            Param {
                name: format!("{prefix}.weight"),
                var: self.weight.clone(),
                decay: true,
            },
            Param {
                name: format!("{prefix}.bias"),
                var: self.bias.clone(),
                decay: false,
            },
        ]
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    /// `(out, in)`
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    pub fn new(c_in: usize, c_out: usize, rng: &mut ChaCha8Rng, dtype: DType) -> Result<Self> {
        Ok(Self {
            weight: fan_in_uniform(&[c_out, c_in], c_in, rng, dtype)?,
            bias: zeros(&[c_out], dtype)?,
        })
    }

    /// `(N, in) -> (N, out)`
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.as_tensor().t()?)?.broadcast_add(self.bias.as_tensor())?)
    }

    pub fn params(&self, prefix: &str) -> Vec<Param> {
        Conv2d {
            weight: self.weight.clone(),
            bias: self.bias.clone(),
        }
        .params(prefix)
    }
}
