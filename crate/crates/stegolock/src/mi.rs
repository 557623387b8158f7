//! Mutual-information control between expert features: a variational
//! Gaussian conditional q(y|x) fitted by maximum likelihood, and the CLUB
//! sampled upper bound built on it. Fake experts are trained by minimizing
//! this bound against the real expert, layer by layer.

use std::io::Write as _;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::nn::backbone::LayerSelection;
use crate::nn::{gap, Linear};

const LOGVAR_MIN: f64 = -10.0;
const LOGVAR_MAX: f64 = 10.0;

/// MLP d -> 2d -> 2d -> (mu, logvar) parameterizing the Gaussian
/// conditional q(y|x). Log-variances are clamped to [-10, 10].
pub struct AuxEstimator {
    l1: Linear,
    l2: Linear,
    mu: Linear,
    logvar: Linear,
    pub dim: usize,
}

impl AuxEstimator {
    pub fn new(rng: &mut ChaCha12Rng, dim: usize, dev: &Device) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("aux estimator needs dim >= 1"));
        }
        Ok(AuxEstimator {
            l1: Linear::new(rng, dim, 2 * dim, dev)?,
            l2: Linear::new(rng, 2 * dim, 2 * dim, dev)?,
            mu: Linear::new(rng, 2 * dim, dim, dev)?,
            logvar: Linear::new(rng, 2 * dim, dim, dev)?,
            dim,
        })
    }

    /// (N, d) -> mean and clamped log-variance of q(.|x), both (N, d).
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let h = self.l1.forward(x)?.relu()?;
        let h = self.l2.forward(&h)?.relu()?;
        let mu = self.mu.forward(&h)?;
        let lv = self.logvar.forward(&h)?.clamp(LOGVAR_MIN, LOGVAR_MAX)?;
        Ok((mu, lv))
    }

    pub fn params(&self) -> Vec<candle_core::Var> {
        let mut v = self.l1.params();
        v.extend(self.l2.params());
        v.extend(self.mu.params());
        v.extend(self.logvar.params());
        v
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, candle_core::Var)> {
        let mut v = self.l1.named(&format!("{prefix}.l1"));
        v.extend(self.l2.named(&format!("{prefix}.l2")));
        v.extend(self.mu.named(&format!("{prefix}.mu")));
        v.extend(self.logvar.named(&format!("{prefix}.logvar")));
        v
    }
}

/// Per-sample Gaussian log-likelihood up to the constant term:
/// sum_d [ -(y - mu)^2 / (2 e^lv) - lv / 2 ], shape (N,).
fn gaussian_loglik(mu: &Tensor, logvar: &Tensor, y: &Tensor) -> Result<Tensor> {
    let var = logvar.exp()?;
    let quad = (y - mu)?.sqr()?.div(&var.affine(2.0, 0.0)?)?;
    Ok((quad.neg()? - logvar.affine(0.5, 0.0)?)?.sum(1)?)
}

/// CLUB sampled bound from precomputed conditionals: positive-pair mean minus
/// the full N x N marginal mean,
/// (1/N) sum_i log q(y_i|x_i) - (1/N^2) sum_{i,j} log q(y_j|x_i).
/// Differentiable in `mu`, `logvar` and `y`.
pub fn club_from_stats(mu: &Tensor, logvar: &Tensor, y: &Tensor) -> Result<Tensor> {
    let (n, d) = mu.dims2()?;
    if y.dims2()? != (n, d) {
        return Err(Error::invalid("CLUB shapes disagree"));
    }
    // (N, N, d): entry [i, j] compares mu(x_i) with y_j
    let mu_i = mu.unsqueeze(1)?.broadcast_as((n, n, d))?;
    let lv_i = logvar.unsqueeze(1)?.broadcast_as((n, n, d))?;
    let y_j = y.unsqueeze(0)?.broadcast_as((n, n, d))?;
    let var = lv_i.exp()?;
    let quad = (&y_j - &mu_i)?.sqr()?.div(&var.affine(2.0, 0.0)?)?;
    let ll = (quad.neg()? - lv_i.affine(0.5, 0.0)?)?.sum(2)?; // (N, N)
    let eye = Tensor::eye(n, DType::F32, mu.device())?;
    let positive = ll.mul(&eye)?.sum_all()?.affine(1.0 / n as f64, 0.0)?;
    let marginal = ll.mean_all()?;
    Ok((positive - marginal)?)
}

/// CLUB bound for an (x, y) feature batch under this estimator. A batch of
/// one has identical positive and marginal terms, so the bound is exactly 0.
pub fn club_mi(est: &AuxEstimator, x: &Tensor, y: &Tensor) -> Result<Tensor> {
    let (mu, lv) = est.forward(x)?;
    club_from_stats(&mu, &lv, y)
}

/// Slice-level convenience surface over [`club_mi`].
pub fn club_mi_value(est: &AuxEstimator, x: &[Vec<f32>], y: &[Vec<f32>], dev: &Device) -> Result<f64> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::invalid("CLUB needs equal nonempty sample sets"));
    }
    let to_t = |rows: &[Vec<f32>]| -> Result<Tensor> {
        let d = rows[0].len();
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::invalid("ragged feature rows"));
        }
        let flat: Vec<f32> = rows.iter().flatten().copied().collect();
        Ok(Tensor::from_vec(flat, (rows.len(), d), dev)?)
    };
    Ok(club_mi(est, &to_t(x)?, &to_t(y)?)?.to_scalar::<f32>()? as f64)
}

/// A few maximum-likelihood steps of the aux estimator on (detached)
/// positive pairs. Returns the final negative log-likelihood.
pub fn fit_aux(est: &AuxEstimator, opt: &mut AdamW, x: &Tensor, y: &Tensor, steps: usize) -> Result<f64> {
    let x = x.detach();
    let y = y.detach();
    let mut last = f64::NAN;
    for _ in 0..steps {
        let (mu, lv) = est.forward(&x)?;
        let nll = gaussian_loglik(&mu, &lv, &y)?.mean_all()?.neg()?;
        last = nll.to_scalar::<f32>()? as f64;
        if !last.is_finite() {
            return Err(Error::TrainingFailure("aux estimator log-likelihood diverged".into()));
        }
        opt.backward_step(&nll)?;
    }
    Ok(last)
}

/// One aux estimator per selected backbone tap, comparing gap-pooled
/// activations of two networks layer by layer.
pub struct MultilayerMi {
    pub selection: LayerSelection,
    pub estimators: Vec<AuxEstimator>,
    opts: Vec<AdamW>,
}

impl MultilayerMi {
    /// `dims[i]` is the channel count at selected tap `selection.0[i]`.
    pub fn new(rng: &mut ChaCha12Rng, selection: LayerSelection, dims: &[usize], lr: f64, dev: &Device) -> Result<Self> {
        selection.validate()?;
        if dims.len() != selection.0.len() {
            return Err(Error::invalid("one feature dim per selected layer"));
        }
        let estimators: Vec<AuxEstimator> =
            dims.iter().map(|&d| AuxEstimator::new(rng, d, dev)).collect::<Result<_>>()?;
        let opts = estimators
            .iter()
            .map(|e| AdamW::new(e.params(), ParamsAdamW { lr, ..Default::default() }))
            .collect::<candle_core::Result<Vec<_>>>()?;
        Ok(MultilayerMi { selection, estimators, opts })
    }

    fn pooled(&self, taps: &[Tensor]) -> Result<Vec<Tensor>> {
        self.selection.0.iter().map(|&l| {
            taps.get(l)
                .ok_or_else(|| Error::invalid(format!("tap {l} missing")))
                .and_then(|t| gap(t))
        }).collect()
    }

    /// Refresh every per-layer estimator on detached features.
    pub fn fit(&mut self, x_taps: &[Tensor], y_taps: &[Tensor], steps: usize) -> Result<Vec<f64>> {
        let xs = self.pooled(x_taps)?;
        let ys = self.pooled(y_taps)?;
        let mut nlls = Vec::with_capacity(xs.len());
        for ((est, opt), (x, y)) in self.estimators.iter().zip(&mut self.opts).zip(xs.iter().zip(&ys)) {
            nlls.push(fit_aux(est, opt, x, y, steps)?);
        }
        Ok(nlls)
    }

    /// Summed CLUB bound over the selected layers; differentiable, so it can
    /// drive the fake-expert update.
    pub fn total_mi(&self, x_taps: &[Tensor], y_taps: &[Tensor]) -> Result<Tensor> {
        let xs = self.pooled(x_taps)?;
        let ys = self.pooled(y_taps)?;
        let mut total: Option<Tensor> = None;
        for (est, (x, y)) in self.estimators.iter().zip(xs.iter().zip(&ys)) {
            let mi = club_mi(est, x, y)?;
            total = Some(match total {
                Some(t) => (t + mi)?,
                None => mi,
            });
        }
        total.ok_or_else(|| Error::invalid("no layers selected"))
    }

    /// Per-layer bound values, for trace logging.
    pub fn per_layer_mi(&self, x_taps: &[Tensor], y_taps: &[Tensor]) -> Result<Vec<f64>> {
        let xs = self.pooled(x_taps)?;
        let ys = self.pooled(y_taps)?;
        self.estimators
            .iter()
            .zip(xs.iter().zip(&ys))
            .map(|(est, (x, y))| Ok(club_mi(est, x, y)?.to_scalar::<f32>()? as f64))
            .collect()
    }
}

/// Append-only CSV log of per-layer MI estimates over training.
pub struct MiTrace {
    w: std::io::BufWriter<std::fs::File>,
}

impl MiTrace {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "step,expert,layer,mi")?;
        Ok(MiTrace { w })
    }

    pub fn log(&mut self, step: usize, expert: &str, layer: usize, mi: f64) -> Result<()> {
        writeln!(self.w, "{step},{expert},{layer},{mi:.6}")?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.w.flush()?;
        Ok(())
    }
}
