//! Attack harness: every attack takes a protected student, builds an
//! independent copy, perturbs the copy under attacker assumptions, and hands
//! it back for re-verification. Inputs are never mutated.

use std::io::Write as _;
use std::path::Path;

use candle_core::{Device, Tensor};
use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::data::ImageDataset;
use crate::error::{Error, Result};
use crate::experts::{train_classifier, ExpertTrainConfig};
use crate::nn::backbone::TappedClassifier;
use crate::nn::stego_nets::Generator;
use crate::nn::{accuracy, cross_entropy};
use crate::stego::{batch_to_tensor, shuffle};

/// The four fine-tuning regimes: fine-tune or re-train (reset head),
/// all layers or last layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FinetuneMode {
    /// Fine-Tune All Layers.
    Ftal,
    /// Fine-Tune the Last Layer, features frozen.
    Ftll,
    /// Re-initialize the head, then Train All Layers.
    Rtal,
    /// Re-initialize the head, then Train the Last Layer only.
    Rtll,
}

impl FinetuneMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ftal" => Ok(FinetuneMode::Ftal),
            "ftll" => Ok(FinetuneMode::Ftll),
            "rtal" => Ok(FinetuneMode::Rtal),
            "rtll" => Ok(FinetuneMode::Rtll),
            other => Err(Error::invalid(format!("unknown fine-tune mode {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            FinetuneMode::Ftal => "FTAL",
            FinetuneMode::Ftll => "FTLL",
            FinetuneMode::Rtal => "RTAL",
            FinetuneMode::Rtll => "RTLL",
        }
    }
}

/// Fine-tune a copy of the suspect on the attacker's labeled benign data.
pub fn finetune_attack(
    model: &TappedClassifier,
    mode: FinetuneMode,
    attacker_ds: &ImageDataset,
    cfg: &ExpertTrainConfig,
    dev: &Device,
) -> Result<TappedClassifier> {
    let mut copy = model.clone_detached()?;
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed ^ 0xa77c);
    if matches!(mode, FinetuneMode::Rtal | FinetuneMode::Rtll) {
        copy.reset_head(&mut rng, copy.config.num_classes, dev)?;
    }
    let params = match mode {
        FinetuneMode::Ftal | FinetuneMode::Rtal => copy.params(),
        FinetuneMode::Ftll | FinetuneMode::Rtll => copy.head_params(),
    };
    train_classifier(&copy, params, attacker_ds, cfg, dev, |_| {})?;
    Ok(copy)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PruneMode {
    /// Zero the globally smallest-magnitude weights.
    Weight,
    /// Zero whole conv filters with the smallest L1 norms.
    Filter,
}

impl PruneMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "wp" | "weight" => Ok(PruneMode::Weight),
            "fp" | "filter" => Ok(PruneMode::Filter),
            other => Err(Error::invalid(format!("unknown prune mode {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PruneMode::Weight => "WP",
            PruneMode::Filter => "FP",
        }
    }
}

/// Prune a copy of the suspect to the requested sparsity. Returns the copy
/// and the achieved zero-fraction over the pruned parameter set.
pub fn prune_attack(model: &TappedClassifier, mode: PruneMode, sparsity: f64) -> Result<(TappedClassifier, f64)> {
    if !(0.0..1.0).contains(&sparsity) {
        return Err(Error::invalid("sparsity must be in [0, 1)"));
    }
    let copy = model.clone_detached()?;
    let weights: Vec<_> = copy
        .named_params()
        .into_iter()
        .filter(|(n, v)| n.ends_with(".weight") && v.dims().len() == 4)
        .collect();
    match mode {
        PruneMode::Weight => {
            // global magnitude threshold across all conv weights
            let mut mags: Vec<f32> = Vec::new();
            for (_, v) in &weights {
                mags.extend(v.as_tensor().abs()?.flatten_all()?.to_vec1::<f32>()?);
            }
            mags.sort_by(f32::total_cmp);
            let cut = (sparsity * mags.len() as f64) as usize;
            let threshold = if cut == 0 { f32::NEG_INFINITY } else { mags[cut - 1] };
            for (_, v) in &weights {
                let t = v.as_tensor();
                let mask = t.abs()?.gt(threshold)?.to_dtype(candle_core::DType::F32)?;
                v.set(&t.mul(&mask)?)?;
            }
        }
        PruneMode::Filter => {
            for (_, v) in &weights {
                let t = v.as_tensor();
                let (o, i, kh, kw) = t.dims4()?;
                let l1: Vec<f32> = t.abs()?.reshape((o, i * kh * kw))?.sum(1)?.to_vec1::<f32>()?;
                let mut order: Vec<usize> = (0..o).collect();
                order.sort_by(|&a, &b| l1[a].total_cmp(&l1[b]));
                let kill = (sparsity * o as f64).round() as usize;
                let mut mask = vec![1f32; o];
                for &f in &order[..kill] {
                    mask[f] = 0.0;
                }
                let mask = Tensor::from_vec(mask, (o, 1, 1, 1), t.device())?.broadcast_as(t.dims())?;
                v.set(&t.mul(&mask)?)?;
            }
        }
    }
    let mut zeros = 0usize;
    let mut total = 0usize;
    for (_, v) in &weights {
        let vals = v.as_tensor().flatten_all()?.to_vec1::<f32>()?;
        zeros += vals.iter().filter(|&&x| x == 0.0).count();
        total += vals.len();
    }
    Ok((copy, zeros as f64 / total as f64))
}

/// Transfer learning: keep the features, replace the head for a new label
/// space, train on the attacker's task.
pub fn transfer_attack(
    model: &TappedClassifier,
    new_task: &ImageDataset,
    train_all: bool,
    cfg: &ExpertTrainConfig,
    dev: &Device,
) -> Result<TappedClassifier> {
    let mut copy = model.clone_detached()?;
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed ^ 0x7a45);
    copy.reset_head(&mut rng, new_task.num_classes, dev)?;
    let params = if train_all { copy.params() } else { copy.head_params() };
    train_classifier(&copy, params, new_task, cfg, dev, |_| {})?;
    Ok(copy)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReverseConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Weight of the stay-close-to-the-cover term.
    pub lambda4: f64,
    pub net_width: usize,
    pub seed: u64,
}

impl Default for ReverseConfig {
    fn default() -> Self {
        ReverseConfig { steps: 60, batch_size: 32, lr: 1e-3, lambda4: 10.0, net_width: 8, seed: 0 }
    }
}

/// Reverse-engineering attack. Assumptions: the attacker holds the protected
/// model and labeled benign images, but neither the decoder nor any key. They
/// train a generator G so the suspect answers correctly on G(x) while G(x)
/// stays close to x:  CE(M(G(x)), y) + lambda4 * ||G(x) - x||^2.
/// Returns the generator and the suspect's accuracy on generated images.
pub fn reverse_engineer(
    model: &TappedClassifier,
    benign: &ImageDataset,
    cfg: &ReverseConfig,
    dev: &Device,
) -> Result<(Generator, f64)> {
    benign.validate()?;
    if benign.is_empty() {
        return Err(Error::invalid("reverse engineering needs benign samples"));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed ^ 0x4e7e);
    let gen = Generator::new(&mut rng, cfg.net_width, dev)?;
    let mut opt = AdamW::new(gen.params(), ParamsAdamW { lr: cfg.lr, ..Default::default() })?;
    let n = benign.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    for step in 0..cfg.steps {
        if cursor + cfg.batch_size > n {
            shuffle(&mut order, &mut rng);
            cursor = 0;
        }
        let idx = &order[cursor..(cursor + cfg.batch_size).min(n)];
        cursor += cfg.batch_size;
        let imgs: Vec<Vec<f32>> = idx.iter().map(|&i| benign.images[i].clone()).collect();
        let labels: Vec<u32> = idx.iter().map(|&i| benign.labels[i]).collect();
        let x = batch_to_tensor(&imgs, 3, benign.height, benign.width, dev)?;
        let y = Tensor::from_vec(labels, (idx.len(),), dev)?;
        let g = gen.forward(&x)?;
        let logits = model.forward(&g)?;
        let ce = cross_entropy(&logits, &y)?;
        let mse = (&g - &x)?.sqr()?.mean_all()?;
        let loss = (&ce + mse.affine(cfg.lambda4, 0.0)?)?;
        let lv = loss.to_scalar::<f32>()? as f64;
        if !lv.is_finite() {
            return Err(Error::TrainingFailure(format!("generator loss diverged at step {step}")));
        }
        opt.backward_step(&loss)?;
    }
    // success rate: suspect accuracy on generated images
    let mut correct = 0.0;
    for start in (0..n).step_by(64) {
        let end = (start + 64).min(n);
        let x = batch_to_tensor(&benign.images[start..end], 3, benign.height, benign.width, dev)?;
        let y = Tensor::from_vec(benign.labels[start..end].to_vec(), (end - start,), dev)?;
        let g = gen.forward(&x)?;
        correct += accuracy(&model.forward(&g)?, &y)? * (end - start) as f64;
    }
    Ok((gen, correct / n as f64))
}

/// One attack outcome row for the results CSV.
#[derive(Debug, Clone, Serialize)]
pub struct AttackOutcome {
    pub attack: String,
    pub parameter: String,
    pub benign_accuracy: f64,
    pub authorized_accuracy: f64,
}

/// `attack,parameter,benign_accuracy,authorized_accuracy` CSV.
pub fn write_attack_csv(path: impl AsRef<Path>, rows: &[AttackOutcome]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "attack,parameter,benign_accuracy,authorized_accuracy")?;
    for r in rows {
        writeln!(f, "{},{},{:.4},{:.4}", r.attack, r.parameter, r.benign_accuracy, r.authorized_accuracy)?;
    }
    Ok(())
}
