//! Steganographic key codec: adversarial training of the encoder / decoder /
//! critic triple, batched encode/decode, and codec checkpoints.

use std::path::Path;

use candle_core::{Device, Tensor, Var};
use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::ckpt;
use crate::error::{Error, Result};
use crate::key::{self, ExpandedKey, UserKey};
use crate::nn::stego_nets::{StegoCritic, StegoDecoder, StegoEncoder};
use crate::nn::{bce_with_logits, clip_params};

/// Input geometry the codec was built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodecGeometry {
    pub height: usize,
    pub width: usize,
    /// Key channels c.
    pub key_channels: usize,
    /// Key block side r.
    pub key_side: usize,
}

impl CodecGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.key_side == 0 || self.key_channels == 0 {
            return Err(Error::invalid("key geometry must be positive"));
        }
        if self.height % self.key_side != 0 || self.width % self.key_side != 0 {
            return Err(Error::invalid(format!(
                "image {}x{} is not a multiple of key side {}",
                self.height, self.width, self.key_side
            )));
        }
        Ok(())
    }

    pub fn image_len(&self) -> usize {
        3 * self.height * self.width
    }

    pub fn plane_len(&self) -> usize {
        self.key_channels * self.height * self.width
    }
}

/// Encoder/decoder/critic bundle. The encoder ships to users; the decoder
/// stays with the owner.
pub struct StegoCodec {
    pub geometry: CodecGeometry,
    pub net_width: usize,
    pub encoder: StegoEncoder,
    pub decoder: StegoDecoder,
    pub critic: StegoCritic,
    device: Device,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CodecTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub critic_lr: f64,
    /// L_d : L_s : L_r weights.
    pub decode_weight: f64,
    pub similarity_weight: f64,
    pub realness_weight: f64,
    pub critic_clip: f64,
    /// Critic updates per codec update.
    pub critic_steps: usize,
    pub seed: u64,
}

impl Default for CodecTrainConfig {
    fn default() -> Self {
        CodecTrainConfig {
            epochs: 30,
            batch_size: 32,
            lr: 1e-3,
            critic_lr: 1e-3,
            decode_weight: 1.0,
            similarity_weight: 1.0,
            realness_weight: 0.1,
            critic_clip: 0.1,
            critic_steps: 1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CodecEpochStats {
    pub epoch: usize,
    pub decode_loss: f64,
    pub similarity_loss: f64,
    pub realness_loss: f64,
    pub bit_accuracy: f64,
}

pub fn batch_to_tensor(images: &[Vec<f32>], channels: usize, height: usize, width: usize, dev: &Device) -> Result<Tensor> {
    let mut flat = Vec::with_capacity(images.len() * channels * height * width);
    for img in images {
        if img.len() != channels * height * width {
            return Err(Error::invalid("image length does not match geometry"));
        }
        flat.extend_from_slice(img);
    }
    Ok(Tensor::from_vec(flat, (images.len(), channels, height, width), dev)?)
}

pub fn tensor_to_images(t: &Tensor) -> Result<Vec<Vec<f32>>> {
    let (n, c, h, w) = t.dims4()?;
    let flat = t.flatten_all()?.to_vec1::<f32>()?;
    Ok(flat.chunks(c * h * w).map(|s| s.to_vec()).take(n).collect())
}

impl StegoCodec {
    pub fn new(rng: &mut ChaCha12Rng, geometry: CodecGeometry, net_width: usize, dev: &Device) -> Result<Self> {
        geometry.validate()?;
        Ok(StegoCodec {
            geometry,
            net_width,
            encoder: StegoEncoder::new(rng, geometry.key_channels, net_width, dev)?,
            decoder: StegoDecoder::new(rng, geometry.key_channels, net_width, dev)?,
            critic: StegoCritic::new(rng, net_width / 2, dev)?,
            device: dev.clone(),
        })
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn check_image_batch(&self, t: &Tensor) -> Result<()> {
        let (_, c, h, w) = t.dims4().map_err(|_| Error::invalid("expected an NCHW image batch"))?;
        if c != 3 || h != self.geometry.height || w != self.geometry.width {
            return Err(Error::invalid(format!(
                "image batch {c}x{h}x{w} does not match codec geometry 3x{}x{}",
                self.geometry.height, self.geometry.width
            )));
        }
        Ok(())
    }

    /// Encode a batch against a single expanded key.
    pub fn encode_batch(&self, images: &Tensor, key: &ExpandedKey) -> Result<Tensor> {
        self.check_image_batch(images)?;
        if key.channels != self.geometry.key_channels
            || key.height != self.geometry.height
            || key.width != self.geometry.width
        {
            return Err(Error::invalid("expanded key does not match codec geometry"));
        }
        let n = images.dims4()?.0;
        let plane = Tensor::from_vec(
            key.as_f32(),
            (1, key.channels, key.height, key.width),
            &self.device,
        )?
        .broadcast_as((n, key.channels, key.height, key.width))?
        .contiguous()?;
        self.encoder.forward(images, &plane)
    }

    pub fn encode_images(&self, images: &[Vec<f32>], key: &ExpandedKey) -> Result<Vec<Vec<f32>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            let t = batch_to_tensor(chunk, 3, self.geometry.height, self.geometry.width, &self.device)?;
            out.extend(tensor_to_images(&self.encode_batch(&t, key)?)?);
        }
        Ok(out)
    }

    /// Decoded message plane after sigmoid, one `c*h*w` vector per image.
    pub fn decode_images(&self, images: &[Vec<f32>]) -> Result<Vec<Vec<f32>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            let t = batch_to_tensor(chunk, 3, self.geometry.height, self.geometry.width, &self.device)?;
            self.check_image_batch(&t)?;
            let logits = self.decoder.forward(&t)?;
            let probs = candle_nn::ops::sigmoid(&logits)?;
            out.extend(tensor_to_images(&probs)?);
        }
        Ok(out)
    }

    /// decode -> split -> vote.
    pub fn extract_key(&self, image: &[f32]) -> Result<UserKey> {
        let plane = &self.decode_images(std::slice::from_ref(&image.to_vec()))?[0];
        key::extract_key(
            plane,
            self.geometry.key_channels,
            self.geometry.height,
            self.geometry.width,
            self.geometry.key_side,
        )
    }

    pub fn named_params(&self) -> Vec<(String, Var)> {
        let mut v = self.encoder.named("encoder");
        v.extend(self.decoder.named("decoder"));
        v.extend(self.critic.named("critic"));
        v
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let meta = json!({
            "kind": "stego_codec",
            "geometry": self.geometry,
            "net_width": self.net_width,
        });
        ckpt::save(path, &meta, &self.named_params())
    }

    pub fn load(path: impl AsRef<Path>, dev: &Device) -> Result<Self> {
        let ck = ckpt::load(path, dev)?;
        if ck.meta["kind"] != "stego_codec" {
            return Err(Error::Format("not a codec checkpoint".into()));
        }
        let geometry: CodecGeometry =
            serde_json::from_value(ck.meta["geometry"].clone()).map_err(|e| Error::Format(e.to_string()))?;
        let net_width = ck.meta["net_width"].as_u64().ok_or_else(|| Error::Format("missing net_width".into()))? as usize;
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let codec = StegoCodec::new(&mut rng, geometry, net_width, dev)?;
        ck.load_into(&codec.named_params())?;
        Ok(codec)
    }
}

/// Adversarial codec training on generic random binary message planes.
/// `checkpoint_path`, when given, receives a save after every epoch; on NaN
/// divergence that file is the last stable state and an error is returned.
pub fn train_codec(
    train_images: &[Vec<f32>],
    geometry: CodecGeometry,
    net_width: usize,
    cfg: &CodecTrainConfig,
    dev: &Device,
    checkpoint_path: Option<&Path>,
    mut on_epoch: impl FnMut(&CodecEpochStats),
) -> Result<StegoCodec> {
    if train_images.is_empty() {
        return Err(Error::invalid("codec training needs at least one image"));
    }
    geometry.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let codec = StegoCodec::new(&mut rng, geometry, net_width, dev)?;

    let mut codec_params = codec.encoder.params();
    codec_params.extend(codec.decoder.params());
    let mut opt = AdamW::new(codec_params, ParamsAdamW { lr: cfg.lr, ..Default::default() })?;
    let critic_params = codec.critic.params();
    let mut critic_opt = AdamW::new(critic_params.clone(), ParamsAdamW { lr: cfg.critic_lr, ..Default::default() })?;

    let n = train_images.len();
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        shuffle(&mut order, &mut rng);
        let mut sums = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let imgs: Vec<Vec<f32>> = chunk.iter().map(|&i| train_images[i].clone()).collect();
            let x = batch_to_tensor(&imgs, 3, geometry.height, geometry.width, dev)?;
            // fresh random message per image per step
            let msg_len = chunk.len() * geometry.plane_len();
            let msg_bits: Vec<f32> = (0..msg_len).map(|_| rng.gen_range(0..2) as f32).collect();
            let msg = Tensor::from_vec(
                msg_bits,
                (chunk.len(), geometry.key_channels, geometry.height, geometry.width),
                dev,
            )?;

            let stego = codec.encoder.forward(&x, &msg)?;
            let logits = codec.decoder.forward(&stego)?;
            let l_d = bce_with_logits(&logits, &msg)?;
            let l_s = (&stego - &x)?.sqr()?.mean_all()?;
            let l_r = codec.critic.forward(&stego)?.mean_all()?;
            let loss = ((l_d.affine(cfg.decode_weight, 0.0)? + l_s.affine(cfg.similarity_weight, 0.0)?)?
                + l_r.affine(cfg.realness_weight, 0.0)?)?;
            let loss_v = loss.to_scalar::<f32>()? as f64;
            if !loss_v.is_finite() {
                return Err(Error::TrainingFailure(format!(
                    "codec loss diverged at epoch {epoch}; last stable checkpoint: {:?}",
                    checkpoint_path
                )));
            }
            opt.backward_step(&loss)?;

            // critic: widen the score gap between covers and (detached) stegos
            for _ in 0..cfg.critic_steps {
                let stego_d = codec.encoder.forward(&x, &msg)?.detach();
                let c_loss = (codec.critic.forward(&x)?.mean_all()? - codec.critic.forward(&stego_d)?.mean_all()?)?;
                critic_opt.backward_step(&c_loss)?;
                clip_params(&critic_params, cfg.critic_clip)?;
            }

            // bit accuracy at 0.5 on this batch
            let probs = candle_nn::ops::sigmoid(&logits)?;
            let pred = probs.ge(0.5)?.to_dtype(candle_core::DType::F32)?;
            let acc = pred.eq(&msg)?.to_dtype(candle_core::DType::F32)?.mean_all()?.to_scalar::<f32>()?;

            sums.0 += l_d.to_scalar::<f32>()? as f64;
            sums.1 += l_s.to_scalar::<f32>()? as f64;
            sums.2 += l_r.to_scalar::<f32>()? as f64;
            sums.3 += acc as f64;
            batches += 1;
        }
        let stats = CodecEpochStats {
            epoch,
            decode_loss: sums.0 / batches as f64,
            similarity_loss: sums.1 / batches as f64,
            realness_loss: sums.2 / batches as f64,
            bit_accuracy: sums.3 / batches as f64,
        };
        on_epoch(&stats);
        if let Some(p) = checkpoint_path {
            codec.save(p)?;
        }
    }
    Ok(codec)
}

pub(crate) fn shuffle<T>(xs: &mut [T], rng: &mut ChaCha12Rng) {
    for i in (1..xs.len()).rev() {
        xs.swap(i, rng.gen_range(0..=i));
    }
}
