//! Steganographic encoder / decoder / critic networks, plus the key-less
//! generator used by the reverse-engineering attack.

use candle_core::{Device, Tensor, Var};
use rand_chacha::ChaCha12Rng;

use super::{leaky_relu, Conv2d};
use crate::error::Result;

/// Densely connected residual encoder: (image, expanded key) -> stego image
/// in [0,1], same shape as the image.
pub struct StegoEncoder {
    c1: Conv2d,
    c2: Conv2d,
    c3: Conv2d,
    c4: Conv2d,
}

impl StegoEncoder {
    pub fn new(rng: &mut ChaCha12Rng, key_channels: usize, width: usize, dev: &Device) -> Result<Self> {
        let k = key_channels;
        Ok(StegoEncoder {
            c1: Conv2d::new(rng, 3, width, 3, 1, 1, dev)?,
            c2: Conv2d::new(rng, width + k, width, 3, 1, 1, dev)?,
            c3: Conv2d::new(rng, 2 * width + k, width, 3, 1, 1, dev)?,
            c4: Conv2d::new(rng, 3 * width + k, 3, 3, 1, 1, dev)?,
        })
    }

    pub fn forward(&self, image: &Tensor, key_plane: &Tensor) -> Result<Tensor> {
        let f1 = leaky_relu(&self.c1.forward(image)?)?;
        let f2 = leaky_relu(&self.c2.forward(&Tensor::cat(&[&f1, key_plane], 1)?)?)?;
        let f3 = leaky_relu(&self.c3.forward(&Tensor::cat(&[&f1, &f2, key_plane], 1)?)?)?;
        let residual = self.c4.forward(&Tensor::cat(&[&f1, &f2, &f3, key_plane], 1)?)?;
        Ok((image + residual)?.clamp(0.0, 1.0)?)
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, Var)> {
        let mut v = self.c1.named(&format!("{prefix}.c1"));
        v.extend(self.c2.named(&format!("{prefix}.c2")));
        v.extend(self.c3.named(&format!("{prefix}.c3")));
        v.extend(self.c4.named(&format!("{prefix}.c4")));
        v
    }

    pub fn params(&self) -> Vec<Var> {
        self.named("e").into_iter().map(|(_, v)| v).collect()
    }
}

/// Mirrored decoder: stego image -> real-valued c x h x w message logits.
pub struct StegoDecoder {
    d1: Conv2d,
    d2: Conv2d,
    d3: Conv2d,
    d4: Conv2d,
}

impl StegoDecoder {
    pub fn new(rng: &mut ChaCha12Rng, key_channels: usize, width: usize, dev: &Device) -> Result<Self> {
        Ok(StegoDecoder {
            d1: Conv2d::new(rng, 3, width, 3, 1, 1, dev)?,
            d2: Conv2d::new(rng, width, width, 3, 1, 1, dev)?,
            d3: Conv2d::new(rng, 2 * width, width, 3, 1, 1, dev)?,
            d4: Conv2d::new(rng, 3 * width, key_channels, 3, 1, 1, dev)?,
        })
    }

    /// Raw logits; sigmoid happens at the decode() surface.
    pub fn forward(&self, stego: &Tensor) -> Result<Tensor> {
        let f1 = leaky_relu(&self.d1.forward(stego)?)?;
        let f2 = leaky_relu(&self.d2.forward(&f1)?)?;
        let f3 = leaky_relu(&self.d3.forward(&Tensor::cat(&[&f1, &f2], 1)?)?)?;
        Ok(self.d4.forward(&Tensor::cat(&[&f1, &f2, &f3], 1)?)?)
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, Var)> {
        let mut v = self.d1.named(&format!("{prefix}.d1"));
        v.extend(self.d2.named(&format!("{prefix}.d2")));
        v.extend(self.d3.named(&format!("{prefix}.d3")));
        v.extend(self.d4.named(&format!("{prefix}.d4")));
        v
    }

    pub fn params(&self) -> Vec<Var> {
        self.named("d").into_iter().map(|(_, v)| v).collect()
    }
}

/// 3-layer critic: image -> scalar realness score per sample.
pub struct StegoCritic {
    c1: Conv2d,
    c2: Conv2d,
    c3: Conv2d,
}

impl StegoCritic {
    pub fn new(rng: &mut ChaCha12Rng, width: usize, dev: &Device) -> Result<Self> {
        Ok(StegoCritic {
            c1: Conv2d::new(rng, 3, width, 3, 1, 1, dev)?,
            c2: Conv2d::new(rng, width, width, 3, 1, 1, dev)?,
            c3: Conv2d::new(rng, width, 1, 3, 1, 1, dev)?,
        })
    }

    /// (N, 3, H, W) -> (N,) scores.
    pub fn forward(&self, image: &Tensor) -> Result<Tensor> {
        let f = leaky_relu(&self.c1.forward(image)?)?;
        let f = leaky_relu(&self.c2.forward(&f)?)?;
        let s = self.c3.forward(&f)?;
        Ok(s.mean(3)?.mean(2)?.squeeze(1)?)
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, Var)> {
        let mut v = self.c1.named(&format!("{prefix}.c1"));
        v.extend(self.c2.named(&format!("{prefix}.c2")));
        v.extend(self.c3.named(&format!("{prefix}.c3")));
        v
    }

    pub fn params(&self) -> Vec<Var> {
        self.named("c").into_iter().map(|(_, v)| v).collect()
    }
}

/// Encoder-shaped network without the key input port: image -> image.
/// The reverse-engineering attacker trains this to mimic authorized images.
pub struct Generator {
    c1: Conv2d,
    c2: Conv2d,
    c3: Conv2d,
    c4: Conv2d,
}

impl Generator {
    pub fn new(rng: &mut ChaCha12Rng, width: usize, dev: &Device) -> Result<Self> {
        Ok(Generator {
            c1: Conv2d::new(rng, 3, width, 3, 1, 1, dev)?,
            c2: Conv2d::new(rng, width, width, 3, 1, 1, dev)?,
            c3: Conv2d::new(rng, 2 * width, width, 3, 1, 1, dev)?,
            c4: Conv2d::new(rng, 3 * width, 3, 3, 1, 1, dev)?,
        })
    }

    pub fn forward(&self, image: &Tensor) -> Result<Tensor> {
        let f1 = leaky_relu(&self.c1.forward(image)?)?;
        let f2 = leaky_relu(&self.c2.forward(&f1)?)?;
        let f3 = leaky_relu(&self.c3.forward(&Tensor::cat(&[&f1, &f2], 1)?)?)?;
        let residual = self.c4.forward(&Tensor::cat(&[&f1, &f2, &f3], 1)?)?;
        Ok((image + residual)?.clamp(0.0, 1.0)?)
    }

    pub fn params(&self) -> Vec<Var> {
        let mut v = self.c1.params();
        v.extend(self.c2.params());
        v.extend(self.c3.params());
        v.extend(self.c4.params());
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn encoder_output_in_range_even_untrained() {
        let dev = Device::Cpu;
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let enc = StegoEncoder::new(&mut rng, 1, 8, &dev).unwrap();
        let img = Tensor::rand(0f32, 1f32, (2, 3, 16, 16), &dev).unwrap();
        let key = Tensor::rand(0f32, 1f32, (2, 1, 16, 16), &dev).unwrap().round().unwrap();
        let stego = enc.forward(&img, &key).unwrap();
        assert_eq!(stego.dims(), img.dims());
        let v = stego.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(v.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn decoder_and_critic_shapes() {
        let dev = Device::Cpu;
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let dec = StegoDecoder::new(&mut rng, 2, 8, &dev).unwrap();
        let critic = StegoCritic::new(&mut rng, 8, &dev).unwrap();
        let img = Tensor::rand(0f32, 1f32, (3, 3, 16, 16), &dev).unwrap();
        assert_eq!(dec.forward(&img).unwrap().dims(), &[3, 2, 16, 16]);
        assert_eq!(critic.forward(&img).unwrap().dims(), &[3]);
    }
}
