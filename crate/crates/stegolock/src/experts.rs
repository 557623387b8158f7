//! The expert mixture: a baseline classifier, the real expert fine-tuned on
//! authorized images, and two fake experts whose features are decorrelated
//! from the real expert's by minimizing the CLUB bound, one fake expert for
//! benign inputs and one for wrong-key (noise) inputs.

use candle_core::{Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::ckpt;
use crate::data::{AugmentPolicy, Domain, ImageDataset};
use crate::error::{Error, Result};
use crate::mi::MultilayerMi;
use crate::nn::backbone::{BackboneConfig, LayerSelection, TappedClassifier};
use crate::nn::{accuracy, cross_entropy, SgdMomentum};
use crate::stego::{batch_to_tensor, shuffle};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExpertTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    #[serde(default)]
    pub augment: Vec<String>,
    pub seed: u64,
}

impl Default for ExpertTrainConfig {
    fn default() -> Self {
        ExpertTrainConfig { epochs: 10, batch_size: 32, lr: 0.02, momentum: 0.9, augment: vec![], seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

fn labels_tensor(labels: &[u32], dev: &Device) -> Result<Tensor> {
    Ok(Tensor::from_vec(labels.to_vec(), (labels.len(),), dev)?)
}

/// Cross-entropy SGD training of (a subset of) a classifier's parameters.
/// Shared by the baseline recipe, real-expert fine-tuning and the
/// fine-tuning attacks, which differ only in which parameters they pass.
pub fn train_classifier(
    net: &TappedClassifier,
    params: Vec<candle_core::Var>,
    ds: &ImageDataset,
    cfg: &ExpertTrainConfig,
    dev: &Device,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<()> {
    ds.validate()?;
    if ds.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if params.is_empty() {
        return Err(Error::invalid("no parameters selected for training"));
    }
    let augment = AugmentPolicy::parse(&cfg.augment)?;
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut opt = SgdMomentum::new(params, cfg.lr, cfg.momentum)?;
    let mut order: Vec<usize> = (0..ds.len()).collect();
    for epoch in 0..cfg.epochs {
        shuffle(&mut order, &mut rng);
        let (mut loss_sum, mut acc_sum, mut batches) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let imgs: Vec<Vec<f32>> = chunk
                .iter()
                .map(|&i| {
                    if augment.is_empty() {
                        ds.images[i].clone()
                    } else {
                        augment.apply(&ds.images[i], ds.height, ds.width, &mut rng)
                    }
                })
                .collect();
            let x = batch_to_tensor(&imgs, 3, ds.height, ds.width, dev)?;
            let y: Vec<u32> = chunk.iter().map(|&i| ds.labels[i]).collect();
            let y = labels_tensor(&y, dev)?;
            let logits = net.forward(&x)?;
            let loss = cross_entropy(&logits, &y)?;
            let lv = loss.to_scalar::<f32>()? as f64;
            if !lv.is_finite() {
                return Err(Error::TrainingFailure(format!("classifier loss diverged at epoch {epoch}")));
            }
            let grads = loss.backward()?;
            opt.step(&grads)?;
            loss_sum += lv;
            acc_sum += accuracy(&logits, &y)?;
            batches += 1;
        }
        on_epoch(&EpochStats {
            epoch,
            loss: loss_sum / batches as f64,
            accuracy: acc_sum / batches as f64,
        });
    }
    Ok(())
}

/// Top-1 accuracy over a dataset, batched.
pub fn evaluate(net: &TappedClassifier, ds: &ImageDataset, dev: &Device) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::invalid("evaluating on an empty dataset"));
    }
    let mut correct = 0.0;
    for start in (0..ds.len()).step_by(64) {
        let end = (start + 64).min(ds.len());
        let x = batch_to_tensor(&ds.images[start..end], 3, ds.height, ds.width, dev)?;
        let y = labels_tensor(&ds.labels[start..end], dev)?;
        let logits = net.forward(&x)?;
        correct += accuracy(&logits, &y)? * (end - start) as f64;
    }
    Ok(correct / ds.len() as f64)
}

/// Train a fresh classifier on plain covers.
pub fn train_baseline(
    bb: &BackboneConfig,
    ds: &ImageDataset,
    cfg: &ExpertTrainConfig,
    dev: &Device,
    on_epoch: impl FnMut(&EpochStats),
) -> Result<TappedClassifier> {
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed ^ 0xba5e);
    let net = TappedClassifier::new(&mut rng, bb, dev)?;
    let params = net.params();
    train_classifier(&net, params, ds, cfg, dev, on_epoch)?;
    Ok(net)
}

/// The real expert: a copy of the baseline fine-tuned end-to-end on the
/// authorized domain.
pub fn finetune_real(
    baseline: &TappedClassifier,
    authorized: &ImageDataset,
    cfg: &ExpertTrainConfig,
    dev: &Device,
    on_epoch: impl FnMut(&EpochStats),
) -> Result<TappedClassifier> {
    let net = baseline.clone_detached()?;
    let params = net.params();
    train_classifier(&net, params, authorized, cfg, dev, on_epoch)?;
    Ok(net)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FakeTrainConfig {
    /// Fake-expert update steps.
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub aux_lr: f64,
    /// Aux-estimator likelihood steps per fake update (the 5:1 alternation).
    pub aux_steps: usize,
    pub selection: LayerSelection,
    pub seed: u64,
}

impl Default for FakeTrainConfig {
    fn default() -> Self {
        FakeTrainConfig {
            steps: 60,
            batch_size: 32,
            lr: 1e-3,
            aux_lr: 1e-3,
            aux_steps: 5,
            selection: LayerSelection::default(),
            seed: 0,
        }
    }
}

/// Train a randomly initialized fake expert purely by minimizing the summed
/// CLUB bound between its features on `fake_inputs` and the frozen real
/// expert's features on the paired `real_inputs`. No label loss is involved,
/// so the fake expert stays uninformative on its domain.
///
/// Returns the per-layer MI trace, one row per step.
pub fn train_fake(
    real: &TappedClassifier,
    fake: &TappedClassifier,
    real_inputs: &ImageDataset,
    fake_inputs: &ImageDataset,
    cfg: &FakeTrainConfig,
    dev: &Device,
) -> Result<Vec<Vec<f64>>> {
    if real_inputs.len() != fake_inputs.len() || real_inputs.is_empty() {
        return Err(Error::invalid("fake training needs paired nonempty domains"));
    }
    cfg.selection.validate()?;
    let dims: Vec<usize> = cfg.selection.0.iter().map(|&l| real.config.widths[l]).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed ^ 0xfa4e);
    let mut ml = MultilayerMi::new(&mut rng, cfg.selection.clone(), &dims, cfg.aux_lr, dev)?;
    let mut opt = candle_nn::optim::AdamW::new(
        fake.params(),
        candle_nn::optim::ParamsAdamW { lr: cfg.lr, ..Default::default() },
    )?;
    use candle_nn::optim::Optimizer;

    let n = real_inputs.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n; // force an initial shuffle
    let mut trace = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        if cursor + cfg.batch_size > n {
            shuffle(&mut order, &mut rng);
            cursor = 0;
        }
        let idx = &order[cursor..(cursor + cfg.batch_size).min(n)];
        cursor += cfg.batch_size;
        let real_imgs: Vec<Vec<f32>> = idx.iter().map(|&i| real_inputs.images[i].clone()).collect();
        let fake_imgs: Vec<Vec<f32>> = idx.iter().map(|&i| fake_inputs.images[i].clone()).collect();
        let xr = batch_to_tensor(&real_imgs, 3, real_inputs.height, real_inputs.width, dev)?;
        let xf = batch_to_tensor(&fake_imgs, 3, fake_inputs.height, fake_inputs.width, dev)?;

        let (_, real_taps) = real.forward_tapped(&xr)?;
        let real_taps: Vec<Tensor> = real_taps.iter().map(|t| t.detach()).collect();
        let (_, fake_taps) = fake.forward_tapped(&xf)?;

        // 5:1 alternation: tighten the variational conditional, then push
        // the fake features down the bound
        ml.fit(&real_taps, &fake_taps, cfg.aux_steps)?;
        let mi = ml.total_mi(&real_taps, &fake_taps)?;
        let mi_v = mi.to_scalar::<f32>()? as f64;
        if !mi_v.is_finite() {
            return Err(Error::TrainingFailure("fake-expert MI objective diverged".into()));
        }
        opt.backward_step(&mi)?;
        trace.push(ml.per_layer_mi(&real_taps, &fake_taps)?);
    }
    Ok(trace)
}

/// The tag-dispatched mixture: one network per domain, no gating network.
/// The tag comes from how the input was produced, not from the input itself.
pub struct ExpertEnsemble {
    pub real: TappedClassifier,
    pub fake_benign: TappedClassifier,
    pub fake_noise: TappedClassifier,
}

impl ExpertEnsemble {
    pub fn expert(&self, domain: Domain) -> &TappedClassifier {
        match domain {
            Domain::Authorized => &self.real,
            Domain::Benign => &self.fake_benign,
            Domain::Noise => &self.fake_noise,
        }
    }

    pub fn forward_tapped(&self, x: &Tensor, domain: Domain) -> Result<(Tensor, Vec<Tensor>)> {
        self.expert(domain).forward_tapped(x)
    }

    fn named_params(&self) -> Vec<(String, candle_core::Var)> {
        let mut v: Vec<(String, candle_core::Var)> = self
            .real
            .named_params()
            .into_iter()
            .map(|(n, p)| (format!("real.{n}"), p))
            .collect();
        v.extend(self.fake_benign.named_params().into_iter().map(|(n, p)| (format!("fake_benign.{n}"), p)));
        v.extend(self.fake_noise.named_params().into_iter().map(|(n, p)| (format!("fake_noise.{n}"), p)));
        v
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let meta = json!({ "kind": "expert_ensemble", "backbone": self.real.config });
        ckpt::save(path, &meta, &self.named_params())
    }

    pub fn load(path: impl AsRef<std::path::Path>, dev: &Device) -> Result<Self> {
        let ck = ckpt::load(path, dev)?;
        if ck.meta["kind"] != "expert_ensemble" {
            return Err(Error::Format("not an expert ensemble checkpoint".into()));
        }
        let bb: BackboneConfig =
            serde_json::from_value(ck.meta["backbone"].clone()).map_err(|e| Error::Format(e.to_string()))?;
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let ens = ExpertEnsemble {
            real: TappedClassifier::new(&mut rng, &bb, dev)?,
            fake_benign: TappedClassifier::new(&mut rng, &bb, dev)?,
            fake_noise: TappedClassifier::new(&mut rng, &bb, dev)?,
        };
        ck.load_into(&ens.named_params())?;
        Ok(ens)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_dataset;
    use crate::nn::params_digest;

    fn dev() -> Device {
        Device::Cpu
    }

    fn small_bb() -> BackboneConfig {
        BackboneConfig::new([8, 8, 16, 16], 5)
    }

    #[test]
    fn baseline_learns_the_synthetic_task() {
        let ds = synthetic_dataset(100, 16, 16, 5, 1).unwrap();
        let (train, test) = ds.split(80).unwrap();
        let cfg = ExpertTrainConfig { epochs: 8, batch_size: 20, lr: 0.02, ..Default::default() };
        let mut last = 0.0;
        let net = train_baseline(&small_bb(), &train, &cfg, &dev(), |s| last = s.accuracy).unwrap();
        let test_acc = evaluate(&net, &test, &dev()).unwrap();
        assert!(last > 0.6, "train accuracy stalled at {last}");
        assert!(test_acc > 0.4, "test accuracy {test_acc}");
    }

    #[test]
    fn training_rejects_degenerate_inputs() {
        let ds = synthetic_dataset(10, 16, 16, 5, 1).unwrap();
        let empty = ds.split(0).unwrap().0;
        let cfg = ExpertTrainConfig::default();
        assert!(train_baseline(&small_bb(), &empty, &cfg, &dev(), |_| {}).is_err());
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let net = TappedClassifier::new(&mut rng, &small_bb(), &dev()).unwrap();
        assert!(train_classifier(&net, vec![], &ds, &cfg, &dev(), |_| {}).is_err());
    }

    #[test]
    fn finetune_leaves_the_baseline_untouched() {
        let ds = synthetic_dataset(40, 16, 16, 5, 2).unwrap();
        let cfg = ExpertTrainConfig { epochs: 1, batch_size: 20, ..Default::default() };
        let baseline = train_baseline(&small_bb(), &ds, &cfg, &dev(), |_| {}).unwrap();
        let digest_before = params_digest(&baseline.named_params()).unwrap();
        let tuned = finetune_real(&baseline, &ds, &cfg, &dev(), |_| {}).unwrap();
        assert_eq!(params_digest(&baseline.named_params()).unwrap(), digest_before);
        assert_ne!(params_digest(&tuned.named_params()).unwrap(), digest_before);
    }

    #[test]
    fn fake_training_reduces_mi_and_freezes_the_real_expert() {
        let ds = synthetic_dataset(48, 16, 16, 5, 3).unwrap();
        let cfg = ExpertTrainConfig { epochs: 2, batch_size: 16, ..Default::default() };
        let real = train_baseline(&small_bb(), &ds, &cfg, &dev(), |_| {}).unwrap();
        let real_digest = params_digest(&real.named_params()).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let fake = TappedClassifier::new(&mut rng, &small_bb(), &dev()).unwrap();
        let fcfg = FakeTrainConfig {
            steps: 12,
            batch_size: 16,
            selection: LayerSelection(vec![2, 3]),
            ..Default::default()
        };
        let trace = train_fake(&real, &fake, &ds, &ds, &fcfg, &dev()).unwrap();
        assert_eq!(trace.len(), 12);
        assert_eq!(trace[0].len(), 2);
        // MI-only training never touches the real expert
        assert_eq!(params_digest(&real.named_params()).unwrap(), real_digest);
        // the summed bound at the end is below where it started
        let first: f64 = trace.first().unwrap().iter().sum();
        let last: f64 = trace.last().unwrap().iter().sum();
        assert!(last <= first + 1e-6, "MI went up: {first} -> {last}");
    }

    #[test]
    fn ensemble_dispatch_and_checkpoint() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let bb = small_bb();
        let ens = ExpertEnsemble {
            real: TappedClassifier::new(&mut rng, &bb, &dev()).unwrap(),
            fake_benign: TappedClassifier::new(&mut rng, &bb, &dev()).unwrap(),
            fake_noise: TappedClassifier::new(&mut rng, &bb, &dev()).unwrap(),
        };
        let x = Tensor::rand(0f32, 1f32, (2, 3, 16, 16), &dev()).unwrap();
        let (la, _) = ens.forward_tapped(&x, Domain::Authorized).unwrap();
        let (lb, _) = ens.forward_tapped(&x, Domain::Benign).unwrap();
        let (ln, _) = ens.forward_tapped(&x, Domain::Noise).unwrap();
        // three distinct experts answer
        assert_ne!(la.flatten_all().unwrap().to_vec1::<f32>().unwrap(), lb.flatten_all().unwrap().to_vec1::<f32>().unwrap());
        assert_ne!(lb.flatten_all().unwrap().to_vec1::<f32>().unwrap(), ln.flatten_all().unwrap().to_vec1::<f32>().unwrap());

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ens.ckpt");
        ens.save(&p).unwrap();
        let loaded = ExpertEnsemble::load(&p, &dev()).unwrap();
        let (la2, _) = loaded.forward_tapped(&x, Domain::Authorized).unwrap();
        assert_eq!(
            la.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            la2.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
    }
}
