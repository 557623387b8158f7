//! Pipeline configuration: one TOML file drives every stage. Unset fields
//! fall back to desk-scale defaults sized for a single CPU core.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::backbone::{LayerSelection, NUM_STAGES};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// "synthetic", "folder" or "packed".
    pub kind: String,
    /// Source path for folder/packed datasets.
    pub path: String,
    pub train: usize,
    pub test: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    /// Augment after encoding, so key patterns see the same distortions the
    /// classifier does.
    pub augment_after_encode: bool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            kind: "synthetic".into(),
            path: String::new(),
            train: 600,
            test: 300,
            height: 32,
            width: 32,
            classes: 10,
            augment_after_encode: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecConfig {
    pub key_side: usize,
    pub key_channels: usize,
    pub net_width: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub critic_lr: f64,
    pub decode_weight: f64,
    pub similarity_weight: f64,
    pub realness_weight: f64,
    pub critic_clip: f64,
    pub critic_steps: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            key_side: 16,
            key_channels: 1,
            net_width: 16,
            epochs: 30,
            batch_size: 32,
            lr: 1e-3,
            critic_lr: 1e-3,
            decode_weight: 1.0,
            similarity_weight: 1.0,
            realness_weight: 0.1,
            critic_clip: 0.1,
            critic_steps: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneTomlConfig {
    pub widths: Vec<usize>,
    pub norm_groups: usize,
}

impl Default for BackboneTomlConfig {
    fn default() -> Self {
        BackboneTomlConfig { widths: vec![16, 32, 64, 128], norm_groups: 4 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub augment: Vec<String>,
}

impl Default for StageTrainConfig {
    fn default() -> Self {
        StageTrainConfig { epochs: 25, batch_size: 20, lr: 0.002, momentum: 0.9, augment: vec![] }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FakeConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub aux_lr: f64,
    pub aux_steps: usize,
    pub layers: Vec<usize>,
}

impl Default for FakeConfig {
    fn default() -> Self {
        FakeConfig { steps: 60, batch_size: 32, lr: 1e-3, aux_lr: 1e-3, aux_steps: 5, layers: vec![0, 1, 2, 3] }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillTomlConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub tau: f64,
    pub lambda_at: f64,
    pub lambda_crd: f64,
    pub n_neg: usize,
    pub weight_decay: f64,
    pub alpha: f64,
    pub layers: Vec<usize>,
}

impl Default for DistillTomlConfig {
    fn default() -> Self {
        DistillTomlConfig {
            epochs: 8,
            batch_size: 32,
            lr: 5e-4,
            tau: 4.0,
            lambda_at: 1000.0,
            lambda_crd: 1.0,
            n_neg: 4,
            weight_decay: 0.0,
            alpha: 2.0,
            layers: vec![0, 1, 2, 3],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyTomlConfig {
    /// Innocence gap threshold, percentage points.
    pub eps1: f64,
    /// Piracy gap threshold, percentage points.
    pub eps2: f64,
    /// Hamming tolerance for key tracing.
    pub eps3: u32,
    /// Probe images per domain.
    pub probes: usize,
}

impl Default for VerifyTomlConfig {
    fn default() -> Self {
        VerifyTomlConfig { eps1: 5.0, eps2: 30.0, eps3: 1, probes: 100 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackTomlConfig {
    pub finetune_epochs: usize,
    /// Attack learning rate as a fraction of the baseline rate.
    pub lr_scale: f64,
    pub prune_sparsities: Vec<f64>,
    pub reverse_steps: usize,
    pub reverse_lambda4: f64,
}

impl Default for AttackTomlConfig {
    fn default() -> Self {
        AttackTomlConfig {
            finetune_epochs: 5,
            lr_scale: 0.1,
            prune_sparsities: vec![0.1, 0.3, 0.5, 0.7],
            reverse_steps: 60,
            reverse_lambda4: 10.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub dataset: DatasetConfig,
    pub codec: CodecConfig,
    pub backbone: BackboneTomlConfig,
    pub baseline: StageTrainConfig,
    pub real: StageTrainConfig,
    pub fake: FakeConfig,
    pub distill: DistillTomlConfig,
    pub verify: VerifyTomlConfig,
    pub attack: AttackTomlConfig,
    pub users: Vec<String>,
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        match d.kind.as_str() {
            "synthetic" => {}
            "folder" | "packed" => {
                if d.path.is_empty() {
                    return Err(Error::invalid(format!("dataset.kind {:?} needs dataset.path", d.kind)));
                }
            }
            other => return Err(Error::invalid(format!("unknown dataset.kind {other:?}"))),
        }
        if d.train == 0 || d.classes < 2 {
            return Err(Error::invalid("dataset needs train >= 1 and classes >= 2"));
        }
        if d.height % self.codec.key_side != 0 || d.width % self.codec.key_side != 0 {
            return Err(Error::invalid(format!(
                "image {}x{} is not a multiple of codec.key_side {}",
                d.height, d.width, self.codec.key_side
            )));
        }
        if self.codec.key_channels == 0 || self.codec.net_width == 0 {
            return Err(Error::invalid("codec.key_channels and codec.net_width must be positive"));
        }
        if self.backbone.widths.len() != NUM_STAGES {
            return Err(Error::invalid(format!("backbone.widths must list {NUM_STAGES} stage widths")));
        }
        if self.backbone.widths.iter().any(|&w| w == 0 || w % self.backbone.norm_groups != 0) {
            return Err(Error::invalid("backbone widths must be positive multiples of norm_groups"));
        }
        LayerSelection(self.fake.layers.clone()).validate()?;
        LayerSelection(self.distill.layers.clone()).validate()?;
        if self.verify.eps1 >= self.verify.eps2 {
            return Err(Error::invalid("verify.eps1 must be below verify.eps2"));
        }
        if self.verify.probes == 0 {
            return Err(Error::invalid("verify.probes must be positive"));
        }
        if self.users.is_empty() {
            return Err(Error::invalid("at least one user id is required"));
        }
        let mut seen = std::collections::HashSet::new();
        for u in &self.users {
            if u.is_empty() || !seen.insert(u) {
                return Err(Error::invalid(format!("user ids must be unique and nonempty (got {u:?})")));
            }
        }
        if self.attack.prune_sparsities.iter().any(|&s| !(0.0..1.0).contains(&s)) {
            return Err(Error::invalid("attack.prune_sparsities must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.attack.lr_scale) || self.attack.lr_scale == 0.0 {
            return Err(Error::invalid("attack.lr_scale must be in (0, 1]"));
        }
        Ok(())
    }

    /// Content hash of the effective configuration; used to detect config
    /// drift when resuming a run directory.
    pub fn digest(&self) -> String {
        let canon = serde_json::to_vec(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(&canon);
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_toml_yields_valid_defaults() {
        let cfg = PipelineConfig::from_toml_str("users = [\"alice\"]").unwrap();
        assert_eq!(cfg.dataset.kind, "synthetic");
        assert_eq!(cfg.codec.key_side, 16);
        assert_eq!(cfg.distill.lambda_at, 1000.0);
        assert_eq!(cfg.distill.tau, 4.0);
        assert_eq!(cfg.verify.eps3, 1);
        assert!(cfg.dataset.augment_after_encode);
    }

    #[test]
    fn partial_override_keeps_other_defaults() {
        let cfg = PipelineConfig::from_toml_str(
            r#"
            users = ["u1", "u2"]
            [dataset]
            train = 100
            [codec]
            key_side = 8
            "#,
        )
        .unwrap();
        assert_eq!(cfg.dataset.train, 100);
        assert_eq!(cfg.dataset.test, 300);
        assert_eq!(cfg.codec.key_side, 8);
        assert_eq!(cfg.codec.epochs, 30);
    }

    #[test]
    fn schema_violations_are_rejected() {
        // unknown key
        assert!(PipelineConfig::from_toml_str("users=[\"a\"]\n[codec]\nkye_side=8").is_err());
        // missing users
        assert!(PipelineConfig::from_toml_str("").is_err());
        // duplicate users
        assert!(PipelineConfig::from_toml_str("users=[\"a\",\"a\"]").is_err());
        // geometry not divisible
        assert!(PipelineConfig::from_toml_str("users=[\"a\"]\n[dataset]\nheight=30").is_err());
        // bad layer ids
        assert!(PipelineConfig::from_toml_str("users=[\"a\"]\n[distill]\nlayers=[0,9]").is_err());
        // inverted thresholds
        assert!(PipelineConfig::from_toml_str("users=[\"a\"]\n[verify]\neps1=40.0\neps2=30.0").is_err());
        // folder kind without a path
        assert!(PipelineConfig::from_toml_str("users=[\"a\"]\n[dataset]\nkind=\"folder\"").is_err());
        // bad sparsity
        assert!(PipelineConfig::from_toml_str("users=[\"a\"]\n[attack]\nprune_sparsities=[1.5]").is_err());
    }

    #[test]
    fn digest_tracks_content_not_formatting() {
        let a = PipelineConfig::from_toml_str("users = [\"alice\"]").unwrap();
        let b = PipelineConfig::from_toml_str("users   =   [ \"alice\" ]   # comment").unwrap();
        assert_eq!(a.digest(), b.digest());
        let c = PipelineConfig::from_toml_str("users = [\"bob\"]").unwrap();
        assert_ne!(a.digest(), c.digest());
    }
}
