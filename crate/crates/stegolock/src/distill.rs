//! Obfuscation distillation: the deployed student is distilled from the
//! tag-dispatched expert mixture with a soft-label KL term, attention
//! transfer on selected taps, and contrastive representation distillation.
//! No ground-truth labels enter this stage; the mixture is the only teacher.

use candle_core::{Device, Tensor};
use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::ckpt;
use crate::data::{Domain, ImageDataset};
use crate::error::{Error, Result};
use crate::experts::ExpertEnsemble;
use crate::nn::backbone::{BackboneConfig, LayerSelection, TappedClassifier};
use crate::nn::Linear;
use crate::stego::{batch_to_tensor, shuffle};

/// Temperature-scaled KL(p_teacher || p_student), batch mean, times tau^2.
/// Gradients flow only through the student logits.
pub fn kl_loss(teacher_logits: &Tensor, student_logits: &Tensor, tau: f64) -> Result<Tensor> {
    if teacher_logits.dims() != student_logits.dims() {
        return Err(Error::invalid("teacher/student logit shapes differ"));
    }
    let t = candle_nn::ops::log_softmax(&teacher_logits.detach().affine(1.0 / tau, 0.0)?, 1)?;
    let s = candle_nn::ops::log_softmax(&student_logits.affine(1.0 / tau, 0.0)?, 1)?;
    let p_t = t.exp()?;
    let kl = p_t.mul(&(&t - &s)?)?.sum(1)?.mean_all()?;
    Ok(kl.affine(tau * tau, 0.0)?)
}

/// Spatial attention map sum_c |f_c|^alpha, flattened to (N, H*W).
pub fn attention_map(f: &Tensor, alpha: f64) -> Result<Tensor> {
    let (n, _, h, w) = f.dims4()?;
    let a = if (alpha - 2.0).abs() < 1e-12 {
        f.sqr()?
    } else {
        f.abs()?.powf(alpha)?
    };
    Ok(a.sum(1)?.reshape((n, h * w))?)
}

/// L2 distance between L2-normalized attention maps, mean over the batch.
pub fn at_loss(teacher_tap: &Tensor, student_tap: &Tensor, alpha: f64) -> Result<Tensor> {
    if teacher_tap.dims() != student_tap.dims() {
        return Err(Error::invalid("attention taps must share shape"));
    }
    let qt = attention_map(&teacher_tap.detach(), alpha)?;
    let qs = attention_map(student_tap, alpha)?;
    let norm = |q: &Tensor| -> Result<Tensor> {
        let n = q.sqr()?.sum_keepdim(1)?.sqrt()?;
        Ok(q.broadcast_div(&(n + 1e-8)?)?)
    };
    let diff = (norm(&qs)? - norm(&qt)?)?;
    Ok(diff.sqr()?.sum(1)?.sqrt()?.mean_all()?)
}

/// Per-layer bilinear critic for contrastive representation distillation:
/// h(f_t, f_s) = sigmoid(<P_t f_t, P_s f_s> / sqrt(e)), embeddings e = 128.
pub struct CrdCritic {
    pub proj_t: Vec<Linear>,
    pub proj_s: Vec<Linear>,
    pub embed_dim: usize,
}

impl CrdCritic {
    pub fn new(rng: &mut ChaCha12Rng, dims: &[usize], embed_dim: usize, dev: &Device) -> Result<Self> {
        Ok(CrdCritic {
            proj_t: dims.iter().map(|&d| Linear::new(rng, d, embed_dim, dev)).collect::<Result<_>>()?,
            proj_s: dims.iter().map(|&d| Linear::new(rng, d, embed_dim, dev)).collect::<Result<_>>()?,
            embed_dim,
        })
    }

    pub fn params(&self) -> Vec<candle_core::Var> {
        self.proj_t.iter().chain(&self.proj_s).flat_map(|l| l.params()).collect()
    }

    /// (N, N) pairwise match probabilities at layer `l`; entry [i, j] scores
    /// teacher sample i against student sample j.
    pub fn scores(&self, l: usize, teacher_feat: &Tensor, student_feat: &Tensor) -> Result<Tensor> {
        let et = self.proj_t[l].forward(teacher_feat)?;
        let es = self.proj_s[l].forward(student_feat)?;
        let logits = et.matmul(&es.t()?)?.affine(1.0 / (self.embed_dim as f64).sqrt(), 0.0)?;
        Ok(candle_nn::ops::sigmoid(&logits)?)
    }
}

/// Contrastive loss at one layer over a mixed-domain batch: pairs sharing a
/// domain tag are positives, cross-domain pairs negatives:
/// -E_pos[log h] - N_neg * E_neg[log(1 - h)].
/// A critic stuck at 1/2 scores exactly (1 + N_neg) * ln 2.
pub fn crd_loss(h: &Tensor, tags: &[Domain], n_neg: f64) -> Result<Tensor> {
    let (n, m) = h.dims2()?;
    if n != m || tags.len() != n {
        return Err(Error::invalid("crd score matrix must be square and match the tag count"));
    }
    if tags.windows(2).all(|w| w[0] == w[1]) {
        return Err(Error::invalid("crd batch holds a single domain: no negatives available"));
    }
    let mut pos_v = vec![0f32; n * n];
    let mut n_pos = 0usize;
    for i in 0..n {
        for j in 0..n {
            if tags[i] == tags[j] {
                pos_v[i * n + j] = 1.0;
                n_pos += 1;
            }
        }
    }
    let pos_mask = Tensor::from_vec(pos_v, (n, n), h.device())?;
    let neg_mask = pos_mask.affine(-1.0, 1.0)?;
    let n_negpairs = n * n - n_pos;
    let eps = 1e-7;
    let hc = h.clamp(eps, 1.0 - eps)?;
    let pos = hc.log()?.mul(&pos_mask)?.sum_all()?.affine(1.0 / n_pos as f64, 0.0)?.neg()?;
    let neg = (hc.neg()? + 1.0)?
        .log()?
        .mul(&neg_mask)?
        .sum_all()?
        .affine(1.0 / n_negpairs as f64, 0.0)?;
    Ok((pos - neg.affine(n_neg, 0.0)?)?)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistillConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub tau: f64,
    /// lambda_1, the attention-transfer weight.
    pub lambda_at: f64,
    /// lambda_2, the contrastive weight.
    pub lambda_crd: f64,
    /// Weight on the contrastive negative term (negatives per positive).
    pub n_neg: usize,
    /// AdamW weight decay. Defaults to zero: decay drags a student that is
    /// still on the uniform-output plateau back toward it.
    pub weight_decay: f64,
    pub alpha: f64,
    pub selection: LayerSelection,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            epochs: 8,
            batch_size: 32,
            lr: 5e-4,
            tau: 4.0,
            lambda_at: 1000.0,
            lambda_crd: 1.0,
            n_neg: 4,
            weight_decay: 0.0,
            alpha: 2.0,
            selection: LayerSelection::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DistillEpochStats {
    pub epoch: usize,
    pub kl: f64,
    pub at: f64,
    pub crd: f64,
}

/// Distill the mixture into a single deployable student, trained from random
/// initialization. `domains` pairs each tagged domain with its materialized
/// dataset; every batch is drawn from the shuffled union of all domains, with
/// each sample taught by the expert its tag selects, so the residual that
/// separates the domains is the only thing that distinguishes the opposing
/// soft targets inside one gradient step. `on_epoch` sees the epoch stats and
/// the current student; returning `false` stops training early.
pub fn distill_student(
    ensemble: &ExpertEnsemble,
    domains: &[(Domain, ImageDataset)],
    cfg: &DistillConfig,
    dev: &Device,
    mut on_epoch: impl FnMut(&DistillEpochStats, &TappedClassifier) -> bool,
) -> Result<TappedClassifier> {
    if domains.is_empty() || domains.iter().any(|(_, d)| d.is_empty()) {
        return Err(Error::invalid("distillation needs nonempty domain datasets"));
    }
    cfg.selection.validate()?;
    let bb = &ensemble.real.config;
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed ^ 0xd157);
    let student = TappedClassifier::new(&mut rng, bb, dev)?;
    let dims: Vec<usize> = cfg.selection.0.iter().map(|&l| bb.widths[l]).collect();
    let crd = CrdCritic::new(&mut rng, &dims, 128, dev)?;
    let kl_only = cfg.lambda_at == 0.0 && cfg.lambda_crd == 0.0;
    let mut params = student.params();
    if !kl_only {
        params.extend(crd.params());
    }
    let mut opt = AdamW::new(
        params,
        ParamsAdamW { lr: cfg.lr, weight_decay: cfg.weight_decay, ..Default::default() },
    )?;

    // the tagged union W: every (domain, index) pair, reshuffled per epoch
    let mut pool: Vec<(usize, usize)> = domains
        .iter()
        .enumerate()
        .flat_map(|(di, (_, ds))| (0..ds.len()).map(move |i| (di, i)))
        .collect();
    let h = domains[0].1.height;
    let w = domains[0].1.width;

    for epoch in 0..cfg.epochs {
        shuffle(&mut pool, &mut rng);
        let (mut kl_sum, mut at_sum, mut crd_sum) = (0.0, 0.0, 0.0);
        let mut batches = 0.0;
        for batch in pool.chunks(cfg.batch_size) {
            // group the batch into per-domain segments so each expert runs once
            let mut segments: Vec<(usize, Vec<usize>)> = Vec::new();
            for di in 0..domains.len() {
                let idx: Vec<usize> =
                    batch.iter().filter(|(d, _)| *d == di).map(|&(_, i)| i).collect();
                if !idx.is_empty() {
                    segments.push((di, idx));
                }
            }
            let mut xs = Vec::new();
            let mut tags: Vec<Domain> = Vec::new();
            let mut t_logits_parts = Vec::new();
            let mut t_taps_parts: Vec<Vec<Tensor>> = Vec::new();
            for (di, idx) in &segments {
                let (domain, ds) = &domains[*di];
                let imgs: Vec<Vec<f32>> = idx.iter().map(|&i| ds.images[i].clone()).collect();
                let x = batch_to_tensor(&imgs, 3, h, w, dev)?;
                let (tl, tt) = ensemble.forward_tapped(&x, *domain)?;
                xs.push(x);
                tags.extend(std::iter::repeat(*domain).take(idx.len()));
                t_logits_parts.push(tl.detach());
                t_taps_parts.push(tt.into_iter().map(|t| t.detach()).collect());
            }
            let x = Tensor::cat(&xs, 0)?;
            let t_logits = Tensor::cat(&t_logits_parts, 0)?;
            let n_taps = t_taps_parts[0].len();
            let t_taps: Vec<Tensor> = (0..n_taps)
                .map(|l| {
                    Tensor::cat(&t_taps_parts.iter().map(|p| p[l].clone()).collect::<Vec<_>>(), 0)
                })
                .collect::<std::result::Result<_, _>>()?;
            let (s_logits, s_taps) = student.forward_tapped(&x)?;

            let l_kl = kl_loss(&t_logits, &s_logits, cfg.tau)?;
            // with both weights at zero the loss is the KL term alone,
            // bit for bit: nothing else is computed or added
            let (loss, l_at, l_crd) = if kl_only {
                (l_kl.clone(), None, None)
            } else {
                let mut l_at: Option<Tensor> = None;
                let mut l_crd: Option<Tensor> = None;
                for (li, &layer) in cfg.selection.0.iter().enumerate() {
                    let a = at_loss(&t_taps[layer], &s_taps[layer], cfg.alpha)?;
                    l_at = Some(match l_at {
                        Some(t) => (t + a)?,
                        None => a,
                    });
                    // a tail batch can land in one domain; it then carries no
                    // within-batch negatives and contributes no contrastive term
                    if segments.len() > 1 {
                        let tf = crate::nn::gap(&t_taps[layer])?;
                        let sf = crate::nn::gap(&s_taps[layer])?;
                        let hm = crd.scores(li, &tf, &sf)?;
                        let c = crd_loss(&hm, &tags, cfg.n_neg as f64)?;
                        l_crd = Some(match l_crd {
                            Some(t) => (t + c)?,
                            None => c,
                        });
                    }
                }
                let l_at = l_at.unwrap();
                let mut loss = (&l_kl + l_at.affine(cfg.lambda_at, 0.0)?)?;
                if let Some(ref c) = l_crd {
                    loss = (loss + c.affine(cfg.lambda_crd, 0.0)?)?;
                }
                (loss, Some(l_at), l_crd)
            };
            let lv = loss.to_scalar::<f32>()? as f64;
            if !lv.is_finite() {
                return Err(Error::TrainingFailure(format!("distillation loss diverged at epoch {epoch}")));
            }
            opt.backward_step(&loss)?;
            kl_sum += l_kl.to_scalar::<f32>()? as f64;
            if let Some(t) = l_at {
                at_sum += t.to_scalar::<f32>()? as f64;
            }
            if let Some(t) = l_crd {
                crd_sum += t.to_scalar::<f32>()? as f64;
            }
            batches += 1.0;
        }
        let keep_going = on_epoch(
            &DistillEpochStats {
                epoch,
                kl: kl_sum / batches,
                at: at_sum / batches,
                crd: crd_sum / batches,
            },
            &student,
        );
        if !keep_going {
            break;
        }
    }
    Ok(student)
}

/// The per-user deliverable: one student network bound to one key.
pub struct ProtectedModel {
    pub student: TappedClassifier,
    pub user_id: String,
    pub key_fingerprint: String,
}

impl ProtectedModel {
    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let meta = json!({
            "kind": "protected_model",
            "user_id": self.user_id,
            "key_fingerprint": self.key_fingerprint,
            "backbone": self.student.config,
        });
        ckpt::save(path, &meta, &self.student.named_params())
    }

    pub fn load(path: impl AsRef<std::path::Path>, dev: &Device) -> Result<Self> {
        let ck = ckpt::load(path, dev)?;
        if ck.meta["kind"] != "protected_model" {
            return Err(Error::Format("not a protected model checkpoint".into()));
        }
        let bb: BackboneConfig =
            serde_json::from_value(ck.meta["backbone"].clone()).map_err(|e| Error::Format(e.to_string()))?;
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let student = TappedClassifier::new(&mut rng, &bb, dev)?;
        ck.load_into(&student.named_params())?;
        Ok(ProtectedModel {
            student,
            user_id: ck.meta["user_id"].as_str().unwrap_or_default().to_string(),
            key_fingerprint: ck.meta["key_fingerprint"].as_str().unwrap_or_default().to_string(),
        })
    }
}
