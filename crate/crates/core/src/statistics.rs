//! False-positive accounting for the double-tail rule and benchmark metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BitString, ImageBuffer};

/// Summary of the false-positive bounds for one threshold choice.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FprReport {
    pub n: usize,
    pub m: usize,
    pub tau1: usize,
    pub tau2: usize,
    pub per_user_two_tail: f64,
    pub union_bound_m: f64,
    pub union_bound_3m: f64,
}

/// Neumaier-compensated sum.
fn compensated_sum(terms: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for t in terms {
        let s = sum + t;
        if sum.abs() >= t.abs() {
            comp += (sum - s) + t;
        } else {
            comp += (t - s) + sum;
        }
        sum = s;
    }
    sum + comp
}

fn ln_factorials(n: usize) -> Vec<f64> {
    let mut table = Vec::with_capacity(n + 1);
    let mut acc = 0.0;
    table.push(0.0);
    let mut comp = 0.0;
    for k in 1..=n {
        // Kahan-accumulated running sum of ln k.
        let y = (k as f64).ln() - comp;
        let t = acc + y;
        comp = (t - acc) - y;
        acc = t;
        table.push(acc);
    }
    table
}

/// Log of the binomial pmf for every q in 0..=n.
fn ln_binomial_pmf(n: usize, p: f64) -> Vec<f64> {
    let lf = ln_factorials(n);
    let (lp, lq) = (p.ln(), (-p).ln_1p());
    (0..=n)
        .map(|q| lf[n] - lf[q] - lf[n - q] + q as f64 * lp + (n - q) as f64 * lq)
        .collect()
}

fn sum_exp(logs: &[f64]) -> f64 {
    if logs.is_empty() {
        return 0.0;
    }
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max.exp() * compensated_sum(logs.iter().map(|l| (l - max).exp()))
}

/// Binomial probability mass over `[0, tau1] ∪ [tau2, n]`.
pub fn two_tail_prob(n: usize, p: f64, tau1: usize, tau2: usize) -> Result<f64> {
    if !(tau1 < tau2 && tau2 <= n) {
        return Err(Error::InvalidInput(format!(
            "thresholds must satisfy tau1 < tau2 <= n, got {tau1}, {tau2}, n = {n}"
        )));
    }
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidInput(format!("p must lie in (0, 1), got {p}")));
    }
    let pmf = ln_binomial_pmf(n, p);
    let tails: Vec<f64> = pmf[..=tau1].iter().chain(&pmf[tau2..]).cloned().collect();
    Ok(sum_exp(&tails).min(1.0))
}

/// Union bound over users, capped at 1.
pub fn fpr_union(per_user: &[f64]) -> f64 {
    compensated_sum(per_user.iter().cloned()).min(1.0)
}

/// Bound for triple-domain attribution: three per-domain union bounds.
pub fn fpr3_bound(p_hat: f64) -> f64 {
    (3.0 * p_hat).min(1.0)
}

pub fn fpr_report(n: usize, p: f64, m: usize, tau1: usize, tau2: usize) -> Result<FprReport> {
    let per_user = two_tail_prob(n, p, tau1, tau2)?;
    let p_hat = fpr_union(&vec![per_user; m]);
    Ok(FprReport {
        n,
        m,
        tau1,
        tau2,
        per_user_two_tail: per_user,
        union_bound_m: p_hat,
        union_bound_3m: fpr3_bound(p_hat),
    })
}

/// Widest symmetric thresholds `(tau1, n - tau1)` whose bound
/// `domains * m * two_tail_prob` stays within `target_fpr`.
pub fn solve_thresholds(n: usize, p: f64, m: usize, target_fpr: f64, domains: usize) -> Result<(usize, usize)> {
    if n == 0 {
        return Err(Error::InvalidInput("n must be positive".into()));
    }
    let bound = |tau1: usize| -> Result<f64> {
        let per_user = two_tail_prob(n, p, tau1, n - tau1)?;
        Ok((domains as f64 * fpr_union(&vec![per_user; m])).min(1.0))
    };
    let mut best = None;
    let mut tau1 = 0;
    while tau1 < n - tau1 {
        if bound(tau1)? > target_fpr {
            break;
        }
        best = Some(tau1);
        tau1 += 1;
    }
    match best {
        Some(t) => Ok((t, n - t)),
        None => Err(Error::NoThreshold { target: target_fpr, best: bound(0)? }),
    }
}

/// Average bit-wise error over a corpus of watermarks.
pub fn abwe(gt: &[BitString], extracted: &[BitString]) -> Result<f64> {
    if gt.len() != extracted.len() {
        return Err(Error::LengthMismatch { expected: gt.len(), actual: extracted.len() });
    }
    if gt.is_empty() {
        return Err(Error::InvalidInput("abwe needs at least one watermark".into()));
    }
    let mut errors = 0usize;
    let mut total = 0usize;
    for (a, b) in gt.iter().zip(extracted) {
        errors += a.hamming_distance(b)?;
        total += a.len();
    }
    Ok(errors as f64 / total as f64)
}

/// PSNR for identical images.
pub const PSNR_IDENTICAL: f64 = f64::INFINITY;

pub fn psnr(x: &ImageBuffer, y: &ImageBuffer) -> Result<f64> {
    x.same_shape(y)?;
    let mse = x.pixels.iter().zip(&y.pixels).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / x.len() as f64;
    Ok(if mse == 0.0 { PSNR_IDENTICAL } else { 10.0 * (1.0 / mse).log10() })
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Normalized separable Gaussian window, row-major `SSIM_WINDOW^2`.
pub fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for a in &g {
        for b in &g {
            w.push(a * b / (s * s));
        }
    }
    w
}

/// Mean SSIM over all fully-contained window positions and channels, and
/// its gradient with respect to `x`.
pub fn ssim_with_grad(x: &ImageBuffer, y: &ImageBuffer) -> Result<(f64, Vec<f64>)> {
    x.same_shape(y)?;
    let (h, w, ch) = x.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidInput(format!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels")));
    }
    let win = gaussian_window();
    let (ph, pw) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let count = (ph * pw * ch) as f64;
    let mut total = 0.0;
    let mut grad = vec![0.0; x.len()];
    let idx = |r: usize, c: usize, k: usize| (r * w + c) * ch + k;
    for k in 0..ch {
        for pr in 0..ph {
            for pc in 0..pw {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dr in 0..SSIM_WINDOW {
                    for dc in 0..SSIM_WINDOW {
                        let wt = win[dr * SSIM_WINDOW + dc];
                        let i = idx(pr + dr, pc + dc, k);
                        let (a, b) = (x.pixels[i], y.pixels[i]);
                        mx += wt * a;
                        my += wt * b;
                        sxx += wt * a * a;
                        syy += wt * b * b;
                        sxy += wt * a * b;
                    }
                }
                let vx = sxx - mx * mx;
                let vy = syy - my * my;
                let cxy = sxy - mx * my;
                let num_a = 2.0 * mx * my + SSIM_C1;
                let num_b = 2.0 * cxy + SSIM_C2;
                let den_c = mx * mx + my * my + SSIM_C1;
                let den_d = vx + vy + SSIM_C2;
                let s = num_a * num_b / (den_c * den_d);
                total += s;

                let d_mx = 2.0 * my * num_b / (den_c * den_d) - s * 2.0 * mx / den_c;
                let d_vx = -s / den_d;
                let d_cxy = 2.0 * num_a / (den_c * den_d);
                for dr in 0..SSIM_WINDOW {
                    for dc in 0..SSIM_WINDOW {
                        let wt = win[dr * SSIM_WINDOW + dc];
                        let i = idx(pr + dr, pc + dc, k);
                        grad[i] += wt * (d_mx + 2.0 * d_vx * (x.pixels[i] - mx) + d_cxy * (y.pixels[i] - my));
                    }
                }
            }
        }
    }
    grad.iter_mut().for_each(|g| *g /= count);
    Ok((total / count, grad))
}

pub fn ssim(x: &ImageBuffer, y: &ImageBuffer) -> Result<f64> {
    Ok(ssim_with_grad(x, y)?.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityMetrics {
    pub psnr: f64,
    pub ssim: f64,
}

pub fn quality_metrics(x: &ImageBuffer, y: &ImageBuffer) -> Result<QualityMetrics> {
    Ok(QualityMetrics { psnr: psnr(x, y)?, ssim: ssim(x, y)? })
}
