//! Thin layer over candle: seeded initialization, the few layer types the
//! pipeline needs, and a momentum-SGD optimizer (candle's AdamW covers the
//! adaptive side).

pub mod backbone;
pub mod stego_nets;

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::error::Result;

/// Kaiming-style uniform init from a caller-owned rng, so every network in a
/// run is reproducible from the run seed.
pub fn init_uniform(rng: &mut ChaCha12Rng, shape: &[usize], fan_in: usize, dev: &Device) -> Result<Tensor> {
    let bound = (1.0 / fan_in as f32).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Ok(Tensor::from_vec(data, shape, dev)?)
}

#[derive(Clone)]
pub struct Conv2d {
    pub weight: Var,
    pub bias: Var,
    pub padding: usize,
    pub stride: usize,
}

impl Conv2d {
    pub fn new(
        rng: &mut ChaCha12Rng,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        padding: usize,
        stride: usize,
        dev: &Device,
    ) -> Result<Self> {
        let fan_in = in_ch * kernel * kernel;
        let weight = Var::from_tensor(&init_uniform(rng, &[out_ch, in_ch, kernel, kernel], fan_in, dev)?)?;
        let bias = Var::from_tensor(&init_uniform(rng, &[out_ch], fan_in, dev)?)?;
        Ok(Conv2d { weight, bias, padding, stride })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(self.weight.as_tensor(), self.padding, self.stride, 1, 1)?;
        Ok(y.broadcast_add(&self.bias.as_tensor().reshape((1, (), 1, 1))?)?)
    }

    pub fn params(&self) -> Vec<Var> {
        vec![self.weight.clone(), self.bias.clone()]
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, Var)> {
        vec![
            (format!("{prefix}.weight"), self.weight.clone()),
            (format!("{prefix}.bias"), self.bias.clone()),
        ]
    }
}

#[derive(Clone)]
pub struct Linear {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    pub fn new(rng: &mut ChaCha12Rng, in_dim: usize, out_dim: usize, dev: &Device) -> Result<Self> {
        let weight = Var::from_tensor(&init_uniform(rng, &[out_dim, in_dim], in_dim, dev)?)?;
        let bias = Var::from_tensor(&init_uniform(rng, &[out_dim], in_dim, dev)?)?;
        Ok(Linear { weight, bias })
    }

    pub fn zeros(in_dim: usize, out_dim: usize, dev: &Device) -> Result<Self> {
        Ok(Linear {
            weight: Var::zeros((out_dim, in_dim), DType::F32, dev)?,
            bias: Var::zeros((out_dim,), DType::F32, dev)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.as_tensor().t()?)?.broadcast_add(self.bias.as_tensor())?)
    }

    pub fn params(&self) -> Vec<Var> {
        vec![self.weight.clone(), self.bias.clone()]
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, Var)> {
        vec![
            (format!("{prefix}.weight"), self.weight.clone()),
            (format!("{prefix}.bias"), self.bias.clone()),
        ]
    }
}

/// Group normalization with learned affine, built from candle primitives so
/// it stays differentiable.
#[derive(Clone)]
pub struct GroupNorm {
    pub gamma: Var,
    pub beta: Var,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new(channels: usize, groups: usize, dev: &Device) -> Result<Self> {
        assert!(channels % groups == 0, "channels must divide into groups");
        Ok(GroupNorm {
            gamma: Var::from_tensor(&Tensor::ones((channels,), DType::F32, dev)?)?,
            beta: Var::zeros((channels,), DType::F32, dev)?,
            groups,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let g = self.groups;
        let xg = x.reshape((n, g, c / g * h * w))?;
        let mu = xg.mean_keepdim(2)?;
        let centered = xg.broadcast_sub(&mu)?;
        let var = centered.sqr()?.mean_keepdim(2)?;
        let norm = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
        let norm = norm.reshape((n, c, h, w))?;
        let y = norm
            .broadcast_mul(&self.gamma.as_tensor().reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.beta.as_tensor().reshape((1, c, 1, 1))?)?;
        Ok(y)
    }

    pub fn params(&self) -> Vec<Var> {
        vec![self.gamma.clone(), self.beta.clone()]
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, Var)> {
        vec![
            (format!("{prefix}.gamma"), self.gamma.clone()),
            (format!("{prefix}.beta"), self.beta.clone()),
        ]
    }
}

pub fn leaky_relu(x: &Tensor) -> Result<Tensor> {
    Ok(x.maximum(&x.affine(0.01, 0.0)?)?)
}

/// Spatial global average pool: (N, C, H, W) -> (N, C).
pub fn gap(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean(3)?.mean(2)?)
}

pub fn cross_entropy(logits: &Tensor, labels: &Tensor) -> Result<Tensor> {
    let lsm = candle_nn::ops::log_softmax(logits, 1)?;
    Ok(lsm.gather(&labels.unsqueeze(1)?, 1)?.mean_all()?.neg()?)
}

pub fn accuracy(logits: &Tensor, labels: &Tensor) -> Result<f64> {
    let pred = logits.argmax(1)?.to_dtype(DType::U32)?;
    let eq = pred.eq(&labels.to_dtype(DType::U32)?)?.to_dtype(DType::F32)?;
    Ok(eq.mean_all()?.to_scalar::<f32>()? as f64)
}

/// Numerically stable binary cross-entropy on logits:
/// max(z,0) - z*t + log(1 + exp(-|z|)).
pub fn bce_with_logits(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let zeros = logits.zeros_like()?;
    let pos = logits.maximum(&zeros)?;
    let abs = logits.abs()?;
    let log_term = (abs.neg()?.exp()? + 1.0)?.log()?;
    Ok(((pos - logits.mul(targets)?)? + log_term)?.mean_all()?)
}

/// Heavy-ball SGD. candle-nn's SGD has no momentum, and the baseline/real
/// expert recipes call for it.
pub struct SgdMomentum {
    vars: Vec<Var>,
    velocity: Vec<Tensor>,
    pub lr: f64,
    pub momentum: f64,
}

impl SgdMomentum {
    pub fn new(vars: Vec<Var>, lr: f64, momentum: f64) -> Result<Self> {
        let velocity = vars
            .iter()
            .map(|v| Tensor::zeros(v.shape(), DType::F32, v.device()))
            .collect::<candle_core::Result<Vec<_>>>()?;
        Ok(SgdMomentum { vars, velocity, lr, momentum })
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        for (var, vel) in self.vars.iter().zip(self.velocity.iter_mut()) {
            if let Some(g) = grads.get(var.as_tensor()) {
                // detach: without it each velocity keeps the whole forward
                // graph of every previous step alive
                *vel = ((&*vel * self.momentum)? + g)?.detach();
                var.set(&(var.as_tensor() - (&*vel * self.lr)?)?)?;
            }
        }
        Ok(())
    }
}

/// Clamp every parameter to [-limit, limit]; used for the Wasserstein critic.
pub fn clip_params(vars: &[Var], limit: f64) -> Result<()> {
    for v in vars {
        v.set(&v.as_tensor().clamp(-limit, limit)?)?;
    }
    Ok(())
}

/// SHA-256 over parameter bytes, for "training left this network untouched"
/// checks.
pub fn params_digest(named: &[(String, Var)]) -> Result<String> {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for (name, v) in named {
        h.update(name.as_bytes());
        let data = v.as_tensor().flatten_all()?.to_vec1::<f32>()?;
        for x in data {
            h.update(x.to_le_bytes());
        }
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}
