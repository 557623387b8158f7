//! The classifier backbone shared by baseline, experts and students: four
//! conv-norm-relu x2 stages with a feature tap after each stage.

use candle_core::{Device, Tensor, Var};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use super::{gap, Conv2d, GroupNorm, Linear};
use crate::error::{Error, Result};

pub const NUM_STAGES: usize = 4;

/// Ordered layer identifiers where mutual information is estimated and
/// distillation features are aligned: one tap per stage, shallow to deep.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSelection(pub Vec<usize>);

impl Default for LayerSelection {
    fn default() -> Self {
        LayerSelection((0..NUM_STAGES).collect())
    }
}

impl LayerSelection {
    pub fn validate(&self) -> Result<()> {
        if self.0.is_empty() {
            return Err(Error::invalid("empty layer selection"));
        }
        if !self.0.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::invalid("layer selection must be strictly increasing"));
        }
        if *self.0.last().unwrap() >= NUM_STAGES {
            return Err(Error::invalid(format!("layer id out of range (max {})", NUM_STAGES - 1)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub widths: [usize; NUM_STAGES],
    pub num_classes: usize,
    pub norm_groups: usize,
}

impl BackboneConfig {
    pub fn new(widths: [usize; NUM_STAGES], num_classes: usize) -> Self {
        BackboneConfig { widths, num_classes, norm_groups: 4 }
    }
}

impl Default for BackboneConfig {
    fn default() -> Self {
        // half of the paper-style desk widths; sized for a single-core box
        BackboneConfig::new([16, 32, 64, 128], 10)
    }
}

struct Stage {
    conv1: Conv2d,
    gn1: GroupNorm,
    conv2: Conv2d,
    gn2: GroupNorm,
}

impl Stage {
    fn new(rng: &mut ChaCha12Rng, in_ch: usize, out_ch: usize, groups: usize, dev: &Device) -> Result<Self> {
        Ok(Stage {
            conv1: Conv2d::new(rng, in_ch, out_ch, 3, 1, 1, dev)?,
            gn1: GroupNorm::new(out_ch, groups, dev)?,
            conv2: Conv2d::new(rng, out_ch, out_ch, 3, 1, 1, dev)?,
            gn2: GroupNorm::new(out_ch, groups, dev)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.gn1.forward(&self.conv1.forward(x)?)?.relu()?;
        Ok(self.gn2.forward(&self.conv2.forward(&h)?)?.relu()?)
    }

    fn named(&self, prefix: &str) -> Vec<(String, Var)> {
        let mut v = self.conv1.named(&format!("{prefix}.conv1"));
        v.extend(self.gn1.named(&format!("{prefix}.gn1")));
        v.extend(self.conv2.named(&format!("{prefix}.conv2")));
        v.extend(self.gn2.named(&format!("{prefix}.gn2")));
        v
    }
}

/// K-class CNN classifier exposing tapped activations after every stage.
pub struct TappedClassifier {
    pub config: BackboneConfig,
    stages: Vec<Stage>,
    head: Linear,
}

impl TappedClassifier {
    pub fn new(rng: &mut ChaCha12Rng, config: &BackboneConfig, dev: &Device) -> Result<Self> {
        let mut stages = Vec::with_capacity(NUM_STAGES);
        let mut in_ch = 3;
        for &w in &config.widths {
            stages.push(Stage::new(rng, in_ch, w, config.norm_groups, dev)?);
            in_ch = w;
        }
        let head = Linear::new(rng, config.widths[NUM_STAGES - 1], config.num_classes, dev)?;
        Ok(TappedClassifier { config: config.clone(), stages, head })
    }

    /// Logits plus the activation map at every stage tap.
    pub fn forward_tapped(&self, x: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let mut taps = Vec::with_capacity(NUM_STAGES);
        let mut h = x.clone();
        for (i, stage) in self.stages.iter().enumerate() {
            h = stage.forward(&h)?;
            taps.push(h.clone());
            if i + 1 < self.stages.len() {
                h = h.avg_pool2d(2)?;
            }
        }
        let pooled = gap(&h)?;
        let logits = self.head.forward(&pooled)?;
        Ok((logits, taps))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_tapped(x)?.0)
    }

    pub fn params(&self) -> Vec<Var> {
        self.named_params().into_iter().map(|(_, v)| v).collect()
    }

    /// Parameters of everything except the classification head.
    pub fn feature_params(&self) -> Vec<Var> {
        self.named_params()
            .into_iter()
            .filter(|(n, _)| !n.starts_with("head"))
            .map(|(_, v)| v)
            .collect()
    }

    pub fn head_params(&self) -> Vec<Var> {
        self.head.params()
    }

    pub fn named_params(&self) -> Vec<(String, Var)> {
        let mut v = Vec::new();
        for (i, s) in self.stages.iter().enumerate() {
            v.extend(s.named(&format!("stage{i}")));
        }
        v.extend(self.head.named("head"));
        v
    }

    /// Replace the classification head (used by transfer-learning attacks).
    pub fn reset_head(&mut self, rng: &mut ChaCha12Rng, num_classes: usize, dev: &Device) -> Result<()> {
        self.head = Linear::new(rng, self.config.widths[NUM_STAGES - 1], num_classes, dev)?;
        self.config.num_classes = num_classes;
        Ok(())
    }

    /// Deep copy with independent parameters.
    pub fn clone_detached(&self) -> Result<Self> {
        let mut rng = <ChaCha12Rng as rand::SeedableRng>::seed_from_u64(0);
        let dev = self.head.weight.as_tensor().device().clone();
        let mut out = TappedClassifier::new(&mut rng, &self.config, &dev)?;
        out.load_from(self)?;
        Ok(out)
    }

    pub fn load_from(&mut self, other: &TappedClassifier) -> Result<()> {
        for ((_, dst), (_, src)) in self.named_params().iter().zip(other.named_params()) {
            dst.set(src.as_tensor())?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn forward_shapes_and_taps() {
        let dev = Device::Cpu;
        let cfg = BackboneConfig::new([8, 8, 16, 16], 10);
        let net = TappedClassifier::new(&mut ChaCha12Rng::seed_from_u64(1), &cfg, &dev).unwrap();
        let x = Tensor::zeros((2, 3, 32, 32), candle_core::DType::F32, &dev).unwrap();
        let (logits, taps) = net.forward_tapped(&x).unwrap();
        assert_eq!(logits.dims(), &[2, 10]);
        assert_eq!(taps.len(), 4);
        assert_eq!(taps[0].dims(), &[2, 8, 32, 32]);
        assert_eq!(taps[3].dims(), &[2, 16, 4, 4]);
    }

    #[test]
    fn layer_selection_validation() {
        assert!(LayerSelection::default().validate().is_ok());
        assert!(LayerSelection(vec![0, 0, 1]).validate().is_err());
        assert!(LayerSelection(vec![0, 5]).validate().is_err());
        assert!(LayerSelection(vec![]).validate().is_err());
    }

    #[test]
    fn clone_detached_is_independent() {
        let dev = Device::Cpu;
        let cfg = BackboneConfig::new([8, 8, 8, 8], 4);
        let a = TappedClassifier::new(&mut ChaCha12Rng::seed_from_u64(2), &cfg, &dev).unwrap();
        let b = a.clone_detached().unwrap();
        let w0 = a.named_params()[0].1.clone();
        let snapshot = |n: &TappedClassifier| {
            n.named_params()[0].1.as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap()
        };
        let before = snapshot(&b);
        w0.set(&(w0.as_tensor() + 1.0).unwrap()).unwrap();
        let after = snapshot(&b);
        assert_eq!(before, after);
    }
}
