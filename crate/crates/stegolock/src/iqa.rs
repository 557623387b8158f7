//! Image quality assessment of encoded images: windowed SSIM and PSNR over
//! [0,1] images, aggregated as mean +/- std.

use crate::error::{Error, Result};

/// Aggregated quality of a cover/stego batch. `psnr` entries are dB with
/// `f64::INFINITY` as the identical-pair sentinel.
#[derive(Debug, Clone, PartialEq)]
pub struct IqaReport {
    pub ssim_mean: f64,
    pub ssim_std: f64,
    pub psnr_mean: f64,
    pub psnr_std: f64,
    pub n: usize,
}

const C1: f64 = 0.01 * 0.01; // (K1 * L)^2 with L = 1
const C2: f64 = 0.03 * 0.03;
const WINDOW: usize = 11;
const SIGMA: f64 = 1.5;

/// PSNR in dB for a single pair of same-length [0,1] images; max value 1.0.
pub fn psnr(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::invalid("psnr needs two equal nonempty images"));
    }
    let mse: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        Ok(f64::INFINITY)
    } else {
        Ok(-10.0 * mse.log10())
    }
}

fn gaussian_window() -> Vec<f64> {
    let mut w = Vec::with_capacity(WINDOW * WINDOW);
    let c = (WINDOW / 2) as f64;
    for i in 0..WINDOW {
        for j in 0..WINDOW {
            let d2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2);
            w.push((-d2 / (2.0 * SIGMA * SIGMA)).exp());
        }
    }
    let s: f64 = w.iter().sum();
    w.iter().map(|x| x / s).collect()
}

/// Mean SSIM over an 11x11 Gaussian window, averaged across channels.
/// Images are `channels x h x w`, values in [0,1].
pub fn ssim(a: &[f32], b: &[f32], channels: usize, height: usize, width: usize) -> Result<f64> {
    if a.len() != b.len() || a.len() != channels * height * width {
        return Err(Error::invalid("ssim shape mismatch"));
    }
    if height < WINDOW || width < WINDOW {
        return Err(Error::invalid(format!("ssim needs images at least {WINDOW}x{WINDOW}")));
    }
    let win = gaussian_window();
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..channels {
        let pa = &a[ch * height * width..(ch + 1) * height * width];
        let pb = &b[ch * height * width..(ch + 1) * height * width];
        for y in 0..=(height - WINDOW) {
            for x in 0..=(width - WINDOW) {
                let (mut ma, mut mb) = (0.0f64, 0.0f64);
                let (mut va, mut vb, mut cov) = (0.0f64, 0.0f64, 0.0f64);
                for i in 0..WINDOW {
                    for j in 0..WINDOW {
                        let w = win[i * WINDOW + j];
                        let xa = pa[(y + i) * width + x + j] as f64;
                        let xb = pb[(y + i) * width + x + j] as f64;
                        ma += w * xa;
                        mb += w * xb;
                        va += w * xa * xa;
                        vb += w * xb * xb;
                        cov += w * xa * xb;
                    }
                }
                va -= ma * ma;
                vb -= mb * mb;
                cov -= ma * mb;
                let s = ((2.0 * ma * mb + C1) * (2.0 * cov + C2))
                    / ((ma * ma + mb * mb + C1) * (va + vb + C2));
                total += s;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Per-pair SSIM and PSNR over equal-length batches, aggregated mean +/- std.
pub fn iqa(
    cover: &[Vec<f32>],
    stego: &[Vec<f32>],
    channels: usize,
    height: usize,
    width: usize,
) -> Result<IqaReport> {
    if cover.len() != stego.len() {
        return Err(Error::invalid(format!(
            "batch length mismatch: {} covers vs {} stegos",
            cover.len(),
            stego.len()
        )));
    }
    if cover.is_empty() {
        return Err(Error::invalid("iqa over empty batches"));
    }
    let mut ssims = Vec::with_capacity(cover.len());
    let mut psnrs = Vec::with_capacity(cover.len());
    for (c, s) in cover.iter().zip(stego) {
        ssims.push(ssim(c, s, channels, height, width)?);
        psnrs.push(psnr(c, s)?);
    }
    let (sm, ss) = mean_std(&ssims);
    let (pm, ps) = mean_std(&psnrs);
    Ok(IqaReport { ssim_mean: sm, ssim_std: ss, psnr_mean: pm, psnr_std: ps, n: cover.len() })
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 || !mean.is_finite() {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}
