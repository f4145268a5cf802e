//! Watermark embedding by first-order optimization.
//!
//! The optimized parameters `theta` go through a differentiable carrier to
//! produce an image, which is clamped to `[0, 1]` before any loss is
//! evaluated. The loss is
//!
//! ```text
//! lambda_wm * L_pixel + lambda_qual * L_qual + lambda_t * L_freq + lambda_r * L_mellin
//! ```
//!
//! where each `L_*` is a hinge `sum_i max(0, margin - s_i * (v[a_i] - v[b_i]))`
//! with `s_i = +1` for bit 0 and `-1` for bit 1, evaluated on pixels, on the
//! luminance DFT modulus, or on the log-polar DFT modulus.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extraction::extract_bits;
use crate::model::{BitString, Domain, ImageBuffer, IndexPair, UserRecord};
use crate::optim::{halving_schedule, Adam};
use crate::statistics::{psnr, ssim_with_grad};
use crate::transforms::{luminance, luminance_vjp, InvariantEvaluator, LogPolarGrid};

/// Weight used when the quality weight cannot be balanced automatically.
pub const DEFAULT_LAMBDA_QUAL: f64 = 150.0;

/// `embed` optimizes towards margins this much larger than configured, so
/// that Adam's oscillation around the hinge kink stays above the real margin.
pub const MARGIN_OVERSHOOT: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Carrier {
    /// `theta` are the pixels.
    Identity,
    /// `theta` is a residual on a grid `factor` times coarser than the
    /// image, bilinearly upsampled and added to the original.
    Smooth { factor: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QualityKind {
    L2,
    GradientL2,
    Ssim,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QualityWeight {
    Fixed(f64),
    /// Chosen at step 0 so that the quality penalty of moving every
    /// watermark-active pixel to the box edge along the descent direction
    /// equals the initial watermark loss.
    Auto,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedConfig {
    pub margin: f64,
    /// Margins for the two invariant domains, in units of DFT modulus.
    pub margin_t: f64,
    pub margin_r: f64,
    pub lambda_wm: f64,
    pub lambda_qual: QualityWeight,
    pub lambda_t: f64,
    pub lambda_r: f64,
    pub steps: usize,
    pub lr: f64,
    pub lr_halving_period: usize,
    pub carrier: Carrier,
    pub quality_loss: QualityKind,
    /// Keep optimizing after every margin is met and return the satisfying
    /// iterate with the lowest quality loss, instead of stopping at the first.
    pub polish: bool,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        EmbedConfig {
            margin: 0.2,
            margin_t: 0.2,
            // Rotation perturbs Fourier-Mellin moduli through interpolation
            // far more than translation perturbs the plain DFT.
            margin_r: 2.0,
            lambda_wm: 0.9,
            lambda_qual: QualityWeight::Auto,
            lambda_t: 0.0,
            lambda_r: 0.0,
            steps: 700,
            lr: 8e-3,
            lr_halving_period: 100,
            carrier: Carrier::Identity,
            quality_loss: QualityKind::L2,
            polish: true,
        }
    }
}

impl EmbedConfig {
    /// Pixel, translation-invariant and rotation-invariant domains together.
    pub fn triple() -> Self {
        EmbedConfig { lambda_t: 0.9, lambda_r: 0.9, ..Default::default() }
    }

    pub fn enabled_domains(&self) -> Vec<Domain> {
        let mut out = vec![Domain::Pixel];
        if self.lambda_t > 0.0 {
            out.push(Domain::Freq);
        }
        if self.lambda_r > 0.0 {
            out.push(Domain::Mellin);
        }
        out
    }

    pub fn margin_for(&self, domain: Domain) -> f64 {
        match domain {
            Domain::Pixel => self.margin,
            Domain::Freq => self.margin_t,
            Domain::Mellin => self.margin_r,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
        if !(self.margin > 0.0 && self.margin_t > 0.0 && self.margin_r > 0.0) {
            return bad("margins must be positive");
        }
        if self.steps == 0 {
            return bad("steps must be at least 1");
        }
        if self.lr.is_nan() || self.lr <= 0.0 {
            return bad("learning rate must be positive");
        }
        if self.lambda_wm < 0.0 || self.lambda_t < 0.0 || self.lambda_r < 0.0 {
            return bad("loss weights must be non-negative");
        }
        if let QualityWeight::Fixed(v) = self.lambda_qual {
            if v < 0.0 || !v.is_finite() {
                return bad("quality weight must be non-negative");
            }
        }
        if let Carrier::Smooth { factor } = self.carrier {
            if factor == 0 {
                return bad("smooth carrier factor must be at least 1");
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainReport {
    pub domain: Domain,
    pub satisfied_fraction: f64,
    /// Smallest signed gap `s_i * (v[a_i] - v[b_i])` over the pairs.
    pub min_signed_gap: f64,
    pub bit_errors: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbedReport {
    pub final_wm_loss: f64,
    pub domains: Vec<DomainReport>,
    pub iterations_run: usize,
    pub psnr_vs_original: f64,
    pub lambda_qual: f64,
    /// How much clamping to [0, 1] shrank the smallest pixel-domain gap.
    pub clamp_slack: f64,
    pub success: bool,
}

impl EmbedReport {
    pub fn domain(&self, domain: Domain) -> Option<&DomainReport> {
        self.domains.iter().find(|d| d.domain == domain)
    }
}

/// Sum of hinge terms `max(0, margin - s_i * diff_i)` and its subgradient
/// with respect to each `diff_i`.
pub fn wm_hinge_loss(diffs: &[f64], bits: &BitString, margin: f64) -> Result<(f64, Vec<f64>)> {
    if diffs.len() != bits.len() {
        return Err(Error::LengthMismatch { expected: bits.len(), actual: diffs.len() });
    }
    let mut loss = 0.0;
    let grad = diffs
        .iter()
        .zip(bits.bits())
        .map(|(&d, &bit)| {
            let s = if bit { -1.0 } else { 1.0 };
            let term = margin - s * d;
            if term > 0.0 {
                loss += term;
                -s
            } else {
                0.0
            }
        })
        .collect();
    Ok((loss, grad))
}

fn pair_diffs(values: &[f64], pairs: &[IndexPair]) -> Vec<f64> {
    pairs.iter().map(|&(a, b)| values[a] - values[b]).collect()
}

fn min_signed_gap(diffs: &[f64], bits: &BitString) -> f64 {
    diffs
        .iter()
        .zip(bits.bits())
        .map(|(&d, &bit)| if bit { -d } else { d })
        .fold(f64::INFINITY, f64::min)
}

/// Hinge on indexed values; adds `weight * dL/dvalues` into `grad`.
/// Also returns the smallest signed gap.
fn hinge_on_values(
    values: &[f64],
    pairs: &[IndexPair],
    bits: &BitString,
    margin: f64,
    weight: f64,
    grad: &mut [f64],
) -> Result<(f64, f64)> {
    let diffs = pair_diffs(values, pairs);
    let (loss, dd) = wm_hinge_loss(&diffs, bits, margin)?;
    for (&(a, b), g) in pairs.iter().zip(dd) {
        grad[a] += weight * g;
        grad[b] -= weight * g;
    }
    Ok((loss, min_signed_gap(&diffs, bits)))
}

/// Quality penalty of `x` relative to `x0` and its gradient in `x`.
pub fn quality_loss(x: &ImageBuffer, x0: &ImageBuffer, kind: QualityKind) -> Result<(f64, Vec<f64>)> {
    x.same_shape(x0)?;
    let d = x.len() as f64;
    let diff: Vec<f64> = x.pixels.iter().zip(&x0.pixels).map(|(a, b)| a - b).collect();
    let mut loss = diff.iter().map(|v| v * v).sum::<f64>() / d;
    let mut grad: Vec<f64> = diff.iter().map(|v| 2.0 * v / d).collect();
    match kind {
        QualityKind::L2 => {}
        QualityKind::GradientL2 => {
            let (h, w, c) = x.shape();
            let idx = |r: usize, col: usize, k: usize| (r * w + col) * c + k;
            let mut add_term = |p: usize, q: usize, count: usize| {
                let t = diff[q] - diff[p];
                loss += t * t / count as f64;
                grad[q] += 2.0 * t / count as f64;
                grad[p] -= 2.0 * t / count as f64;
            };
            let nh = h * w.saturating_sub(1) * c;
            let nv = h.saturating_sub(1) * w * c;
            for r in 0..h {
                for col in 0..w {
                    for k in 0..c {
                        if col + 1 < w {
                            add_term(idx(r, col, k), idx(r, col + 1, k), nh);
                        }
                        if r + 1 < h {
                            add_term(idx(r, col, k), idx(r + 1, col, k), nv);
                        }
                    }
                }
            }
        }
        QualityKind::Ssim => {
            let (s, g) = ssim_with_grad(x, x0)?;
            loss = 1.0 - s;
            grad = g.iter().map(|v| -v).collect();
        }
    }
    Ok((loss, grad))
}

/// Precomputed bilinear upsampling taps along one axis.
#[derive(Clone, Debug)]
struct AxisTaps {
    coarse: usize,
    taps: Vec<(usize, usize, f64)>,
}

impl AxisTaps {
    fn new(fine: usize, factor: usize) -> Self {
        let coarse = (fine - 1).div_ceil(factor) + 1;
        let taps = (0..fine)
            .map(|i| {
                let pos = i as f64 / factor as f64;
                let i0 = (pos.floor() as usize).min(coarse - 1);
                let i1 = (i0 + 1).min(coarse - 1);
                (i0, i1, pos - i0 as f64)
            })
            .collect();
        AxisTaps { coarse, taps }
    }
}

#[derive(Clone, Debug)]
enum CarrierState {
    Identity,
    Smooth { rows: AxisTaps, cols: AxisTaps },
}

impl CarrierState {
    fn new(carrier: Carrier, shape: (usize, usize, usize)) -> Self {
        match carrier {
            Carrier::Identity => CarrierState::Identity,
            Carrier::Smooth { factor } => CarrierState::Smooth {
                rows: AxisTaps::new(shape.0, factor),
                cols: AxisTaps::new(shape.1, factor),
            },
        }
    }

    fn init(&self, x0: &ImageBuffer) -> Vec<f64> {
        match self {
            CarrierState::Identity => x0.pixels.clone(),
            CarrierState::Smooth { rows, cols } => vec![0.0; rows.coarse * cols.coarse * x0.channels],
        }
    }

    fn decode(&self, theta: &[f64], x0: &ImageBuffer) -> Vec<f64> {
        match self {
            CarrierState::Identity => theta.to_vec(),
            CarrierState::Smooth { rows, cols } => {
                let c = x0.channels;
                let gw = cols.coarse;
                let mut out = x0.pixels.clone();
                for (r, &(r0, r1, fr)) in rows.taps.iter().enumerate() {
                    for (col, &(c0, c1, fc)) in cols.taps.iter().enumerate() {
                        for k in 0..c {
                            let at = |gr: usize, gc: usize| theta[(gr * gw + gc) * c + k];
                            out[(r * x0.width + col) * c + k] += (1.0 - fr) * (1.0 - fc) * at(r0, c0)
                                + (1.0 - fr) * fc * at(r0, c1)
                                + fr * (1.0 - fc) * at(r1, c0)
                                + fr * fc * at(r1, c1);
                        }
                    }
                }
                out
            }
        }
    }

    fn vjp(&self, grad_image: &[f64], shape: (usize, usize, usize)) -> Vec<f64> {
        match self {
            CarrierState::Identity => grad_image.to_vec(),
            CarrierState::Smooth { rows, cols } => {
                let (_, w, c) = shape;
                let gw = cols.coarse;
                let mut out = vec![0.0; rows.coarse * gw * c];
                for (r, &(r0, r1, fr)) in rows.taps.iter().enumerate() {
                    for (col, &(c0, c1, fc)) in cols.taps.iter().enumerate() {
                        for k in 0..c {
                            let g = grad_image[(r * w + col) * c + k];
                            out[(r0 * gw + c0) * c + k] += (1.0 - fr) * (1.0 - fc) * g;
                            out[(r0 * gw + c1) * c + k] += (1.0 - fr) * fc * g;
                            out[(r1 * gw + c0) * c + k] += fr * (1.0 - fc) * g;
                            out[(r1 * gw + c1) * c + k] += fr * fc * g;
                        }
                    }
                }
                out
            }
        }
    }
}

/// Loss value, gradient in `theta`, and the watermark-only part of the loss.
#[derive(Clone, Debug)]
pub struct LossEval {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub wm_loss: f64,
    /// Unweighted quality loss.
    pub quality: f64,
    /// Every enabled domain clears its configured (not inflated) margin.
    pub satisfied: bool,
}

/// Everything needed to evaluate the embedding loss repeatedly.
pub struct EmbedProblem<'a> {
    x0: &'a ImageBuffer,
    user: &'a UserRecord,
    cfg: &'a EmbedConfig,
    carrier: CarrierState,
    freq: Option<InvariantEvaluator>,
    mellin: Option<InvariantEvaluator>,
    lambda_qual: f64,
    margin_scale: f64,
}

impl<'a> EmbedProblem<'a> {
    pub fn new(x0: &'a ImageBuffer, user: &'a UserRecord, cfg: &'a EmbedConfig) -> Result<Self> {
        cfg.validate()?;
        if user.secret.image_shape != x0.shape() {
            return Err(Error::ShapeMismatch { expected: user.secret.image_shape, actual: x0.shape() });
        }
        user.secret.validate()?;
        if user.watermark.len() != user.secret.n_bits() {
            return Err(Error::LengthMismatch { expected: user.secret.n_bits(), actual: user.watermark.len() });
        }
        let (h, w, _) = x0.shape();
        let freq = if cfg.lambda_t > 0.0 {
            user.secret.require(Domain::Freq)?;
            Some(InvariantEvaluator::translation(h, w))
        } else {
            None
        };
        let mellin = if cfg.lambda_r > 0.0 {
            user.secret.require(Domain::Mellin)?;
            Some(InvariantEvaluator::rotation(h, w, LogPolarGrid::default_for(h, w))?)
        } else {
            None
        };
        let mut problem = EmbedProblem {
            x0,
            user,
            cfg,
            carrier: CarrierState::new(cfg.carrier, x0.shape()),
            freq,
            mellin,
            lambda_qual: 0.0,
            margin_scale: 1.0,
        };
        problem.lambda_qual = match cfg.lambda_qual {
            QualityWeight::Fixed(v) => v,
            QualityWeight::Auto => problem.balanced_quality_weight()?,
        };
        Ok(problem)
    }

    /// Optimize towards `scale` times the configured margins.
    pub fn with_margin_scale(mut self, scale: f64) -> Self {
        self.margin_scale = scale;
        self
    }

    pub fn lambda_qual(&self) -> f64 {
        self.lambda_qual
    }

    pub fn initial_theta(&self) -> Vec<f64> {
        self.carrier.init(self.x0)
    }

    /// Clamped carrier output.
    pub fn image(&self, theta: &[f64]) -> ImageBuffer {
        let raw = self.carrier.decode(theta, self.x0);
        self.x0.with_pixels(raw.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
    }

    /// Watermark loss, its gradient with respect to the (clamped) image, and
    /// whether every domain clears its configured margin.
    fn watermark_terms(&self, x: &ImageBuffer, scale: f64) -> Result<(f64, Vec<f64>, bool)> {
        let bits = &self.user.watermark;
        let secret = &self.user.secret;
        let mut grad = vec![0.0; x.len()];
        let (pix, gap) = hinge_on_values(
            &x.pixels,
            &secret.pixel_pairs,
            bits,
            scale * self.cfg.margin,
            self.cfg.lambda_wm,
            &mut grad,
        )?;
        let mut loss = self.cfg.lambda_wm * pix;
        let mut satisfied = gap >= self.cfg.margin;
        let invariant = [
            (&self.freq, Domain::Freq, self.cfg.lambda_t),
            (&self.mellin, Domain::Mellin, self.cfg.lambda_r),
        ];
        if self.freq.is_some() || self.mellin.is_some() {
            let lum = luminance(x);
            let mut lum_grad = vec![0.0; lum.len()];
            for (eval, domain, weight) in invariant {
                let Some(eval) = eval else { continue };
                let fwd = eval.forward(&lum);
                let mut cot = vec![0.0; eval.output_len()];
                let pairs = secret.require(domain)?;
                let margin = self.cfg.margin_for(domain);
                let (l, gap) = hinge_on_values(&fwd.values, pairs, bits, scale * margin, weight, &mut cot)?;
                loss += weight * l;
                satisfied &= gap >= margin;
                for (g, v) in lum_grad.iter_mut().zip(eval.pullback(&fwd, &cot)) {
                    *g += v;
                }
            }
            let lum_grad = crate::transforms::Field2D { height: x.height, width: x.width, values: lum_grad };
            for (g, v) in grad.iter_mut().zip(luminance_vjp(x.shape(), &lum_grad)?) {
                *g += v;
            }
        }
        Ok((loss, grad, satisfied))
    }

    fn balanced_quality_weight(&self) -> Result<f64> {
        let x = self.image(&self.initial_theta());
        let (wm_loss, wm_grad, _) = self.watermark_terms(&x, 1.0)?;
        if wm_loss <= 0.0 {
            return Ok(DEFAULT_LAMBDA_QUAL);
        }
        let reference = x.with_pixels(
            x.pixels
                .iter()
                .zip(&wm_grad)
                .map(|(&v, &g)| if g > 0.0 { 0.0 } else if g < 0.0 { 1.0 } else { v })
                .collect(),
        );
        let (q, _) = quality_loss(&reference, self.x0, self.cfg.quality_loss)?;
        Ok(if q > 0.0 { wm_loss / q } else { DEFAULT_LAMBDA_QUAL })
    }

    pub fn evaluate(&self, theta: &[f64]) -> Result<LossEval> {
        let raw = self.carrier.decode(theta, self.x0);
        let x = self.x0.with_pixels(raw.iter().map(|v| v.clamp(0.0, 1.0)).collect());
        let (wm_loss, mut grad, satisfied) = self.watermark_terms(&x, self.margin_scale)?;
        let mut loss = wm_loss;
        let (quality, qg) = quality_loss(&x, self.x0, self.cfg.quality_loss)?;
        if self.lambda_qual > 0.0 {
            loss += self.lambda_qual * quality;
            for (g, v) in grad.iter_mut().zip(qg) {
                *g += self.lambda_qual * v;
            }
        }
        // The clamp is flat outside the box, which would strand pixels there
        // for good; outside we keep only components that lead back inside.
        for (g, v) in grad.iter_mut().zip(&raw) {
            if (*v > 1.0 && *g < 0.0) || (*v < 0.0 && *g > 0.0) {
                *g = 0.0;
            }
        }
        Ok(LossEval { loss, grad: self.carrier.vjp(&grad, self.x0.shape()), wm_loss, quality, satisfied })
    }
}

/// Total embedding loss and its gradient with respect to `theta`.
pub fn total_loss(theta: &[f64], x0: &ImageBuffer, user: &UserRecord, cfg: &EmbedConfig) -> Result<(f64, Vec<f64>)> {
    let eval = EmbedProblem::new(x0, user, cfg)?.evaluate(theta)?;
    Ok((eval.loss, eval.grad))
}

/// One loss evaluation as seen by the optimizer.
pub struct Evaluation {
    pub loss: f64,
    pub grad: Vec<f64>,
    /// Stop before stepping from this point.
    pub converged: bool,
}

#[derive(Clone, Debug)]
pub struct OptimizeOutcome {
    pub theta: Vec<f64>,
    pub iterations: usize,
    pub final_loss: f64,
    pub converged: bool,
}

/// Adam with learning rate halved every `cfg.lr_halving_period` steps.
pub fn optimize<F>(mut loss_fn: F, theta0: Vec<f64>, cfg: &EmbedConfig) -> Result<OptimizeOutcome>
where
    F: FnMut(&[f64]) -> Result<Evaluation>,
{
    let mut theta = theta0;
    let mut adam = Adam::new(theta.len());
    for step in 0..cfg.steps {
        let eval = loss_fn(&theta)?;
        if !eval.loss.is_finite() || eval.grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite { step, value: eval.loss });
        }
        if eval.converged {
            return Ok(OptimizeOutcome { theta, iterations: step, final_loss: eval.loss, converged: true });
        }
        adam.step(&mut theta, &eval.grad, halving_schedule(cfg.lr, cfg.lr_halving_period, step));
    }
    let last = loss_fn(&theta)?;
    if !last.loss.is_finite() {
        return Err(Error::NonFinite { step: cfg.steps, value: last.loss });
    }
    Ok(OptimizeOutcome { theta, iterations: cfg.steps, final_loss: last.loss, converged: last.converged })
}

fn domain_report(values: &[f64], pairs: &[IndexPair], bits: &BitString, margin: f64, domain: Domain) -> Result<DomainReport> {
    let diffs = pair_diffs(values, pairs);
    let gaps: Vec<f64> = diffs
        .iter()
        .zip(bits.bits())
        .map(|(&d, &bit)| if bit { -d } else { d })
        .collect();
    let satisfied = gaps.iter().filter(|&&g| g >= margin).count();
    let extracted = extract_bits(values, pairs)?;
    Ok(DomainReport {
        domain,
        satisfied_fraction: satisfied as f64 / pairs.len() as f64,
        min_signed_gap: gaps.iter().cloned().fold(f64::INFINITY, f64::min),
        bit_errors: extracted.hamming_distance(bits)?,
    })
}

/// Per-domain compliance of an image with a user's watermark.
pub fn compliance(x: &ImageBuffer, user: &UserRecord, cfg: &EmbedConfig) -> Result<Vec<DomainReport>> {
    cfg.enabled_domains()
        .into_iter()
        .map(|domain| {
            let values = crate::extraction::domain_values(x, domain)?;
            let pairs = user.secret.require(domain)?;
            domain_report(&values, pairs, &user.watermark, cfg.margin_for(domain), domain)
        })
        .collect()
}

/// Embeds `user`'s watermark into `x0`.
///
/// Failure to satisfy every constraint is reported through
/// `EmbedReport::success`, not as an error.
pub fn embed(x0: &ImageBuffer, user: &UserRecord, cfg: &EmbedConfig) -> Result<(ImageBuffer, EmbedReport)> {
    let problem = EmbedProblem::new(x0, user, cfg)?.with_margin_scale(1.0 + MARGIN_OVERSHOOT);
    let mut best: Option<(f64, Vec<f64>)> = None;
    let outcome = optimize(
        |theta| {
            let e = problem.evaluate(theta)?;
            if cfg.polish && e.satisfied && best.as_ref().is_none_or(|(q, _)| e.quality < *q) {
                best = Some((e.quality, theta.to_vec()));
            }
            // An untouched satisfying image cannot be improved on.
            let converged = e.satisfied && (!cfg.polish || e.quality == 0.0);
            Ok(Evaluation { loss: e.loss, grad: e.grad, converged })
        },
        problem.initial_theta(),
        cfg,
    )?;
    let theta = best.map_or(outcome.theta, |(_, t)| t);
    let raw = problem.carrier.decode(&theta, x0);
    let x_wm = x0.with_pixels(raw.iter().map(|v| v.clamp(0.0, 1.0)).collect());
    let domains = compliance(&x_wm, user, cfg)?;

    let raw_gap = min_signed_gap(&pair_diffs(&raw, &user.secret.pixel_pairs), &user.watermark);
    let clamped_gap = domains[0].min_signed_gap;
    let final_wm_loss = problem.watermark_terms(&x_wm, 1.0)?.0;
    let report = EmbedReport {
        final_wm_loss,
        success: domains.iter().all(|d| d.satisfied_fraction == 1.0),
        domains,
        iterations_run: outcome.iterations,
        psnr_vs_original: psnr(&x_wm, x0)?,
        lambda_qual: problem.lambda_qual,
        clamp_slack: (raw_gap - clamped_gap).max(0.0),
    };
    Ok((x_wm, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keygen::{build_registry, KeygenConfig};
    use crate::model::SecretKey;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bits(s: &str) -> BitString {
        s.parse().unwrap()
    }

    #[test]
    fn hinge_examples() {
        let (l, g) = wm_hinge_loss(&[0.3], &bits("0"), 0.2).unwrap();
        assert_eq!((l, g[0]), (0.0, 0.0));
        let (l, g) = wm_hinge_loss(&[0.1], &bits("0"), 0.2).unwrap();
        assert!((l - 0.1).abs() < 1e-15 && g[0] == -1.0);
        let (l, g) = wm_hinge_loss(&[0.1], &bits("1"), 0.2).unwrap();
        assert!((l - 0.3).abs() < 1e-15 && g[0] == 1.0);
        assert!(wm_hinge_loss(&[0.1, 0.2], &bits("1"), 0.2).is_err());
    }

    fn random_image(h: usize, w: usize, c: usize, seed: u64) -> ImageBuffer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageBuffer::new(h, w, c, (0..h * w * c).map(|_| rng.gen_range(0.05..0.95)).collect()).unwrap()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-12);
        num / den
    }

    fn numeric_grad(f: impl Fn(&[f64]) -> f64, at: &[f64], h: f64) -> Vec<f64> {
        let mut p = at.to_vec();
        (0..at.len())
            .map(|i| {
                let orig = p[i];
                p[i] = orig + h;
                let up = f(&p);
                p[i] = orig - h;
                let down = f(&p);
                p[i] = orig;
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn quality_loss_examples() {
        let x0 = random_image(12, 12, 3, 1);
        for kind in [QualityKind::L2, QualityKind::GradientL2, QualityKind::Ssim] {
            let (l, g) = quality_loss(&x0, &x0, kind).unwrap();
            assert!(l.abs() < 1e-12, "{kind:?}");
            assert!(g.iter().all(|v| v.abs() < 1e-12), "{kind:?}");
        }
        let mut x = x0.clone();
        x.pixels[7] += 0.5;
        let (l, _) = quality_loss(&x, &x0, QualityKind::L2).unwrap();
        assert!((l - 0.25 / x0.len() as f64).abs() < 1e-15);
        assert!(quality_loss(&x, &random_image(12, 11, 3, 1), QualityKind::L2).is_err());
    }

    #[test]
    fn quality_loss_gradients_match_finite_differences() {
        let x0 = random_image(13, 12, 3, 2);
        let x = random_image(13, 12, 3, 3);
        for kind in [QualityKind::L2, QualityKind::GradientL2, QualityKind::Ssim] {
            let (_, g) = quality_loss(&x, &x0, kind).unwrap();
            let num = numeric_grad(|p| quality_loss(&x.with_pixels(p.to_vec()), &x0, kind).unwrap().0, &x.pixels, 1e-6);
            let err = rel_err(&g, &num);
            assert!(err < 1e-4, "{kind:?}: {err}");
        }
    }

    fn user_for(shape: (usize, usize, usize), n: usize, all: bool, seed: u64) -> UserRecord {
        let cfg = if all { KeygenConfig::all_domains(n, shape, seed) } else { KeygenConfig::pixel(n, shape, seed) };
        build_registry(1, &cfg).unwrap().users.remove(0)
    }

    #[test]
    fn satisfied_image_has_zero_loss() {
        let shape = (8, 8, 1);
        let user = UserRecord {
            user_id: "u".into(),
            watermark: bits("01"),
            secret: SecretKey { image_shape: shape, pixel_pairs: vec![(0, 1), (2, 3)], freq_pairs: None, mellin_pairs: None },
        };
        let mut x0 = ImageBuffer::filled(8, 8, 1, 0.5).unwrap();
        x0.pixels[0] = 0.8;
        x0.pixels[1] = 0.3;
        x0.pixels[2] = 0.1;
        x0.pixels[3] = 0.6;
        let cfg = EmbedConfig::default();
        let (loss, grad) = total_loss(&x0.pixels, &x0, &user, &cfg).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
        let (x_wm, report) = embed(&x0, &user, &cfg).unwrap();
        assert_eq!(x_wm, x0);
        assert_eq!(report.iterations_run, 0);
        assert!(report.success);
    }

    #[test]
    fn single_unsatisfied_pair_without_quality() {
        let shape = (4, 4, 1);
        let user = UserRecord {
            user_id: "u".into(),
            watermark: bits("0"),
            secret: SecretKey { image_shape: shape, pixel_pairs: vec![(5, 9)], freq_pairs: None, mellin_pairs: None },
        };
        let mut x0 = ImageBuffer::filled(4, 4, 1, 0.4).unwrap();
        x0.pixels[5] = 0.45;
        let cfg = EmbedConfig { lambda_qual: QualityWeight::Fixed(0.0), ..Default::default() };
        let (loss, _) = total_loss(&x0.pixels, &x0, &user, &cfg).unwrap();
        assert!((loss - 0.9 * (0.2 - 0.05)).abs() < 1e-12);
    }

    #[test]
    fn missing_domain_secret_is_rejected() {
        let user = user_for((16, 16, 3), 8, false, 1);
        let x0 = random_image(16, 16, 3, 1);
        let cfg = EmbedConfig::triple();
        assert!(matches!(total_loss(&x0.pixels, &x0, &user, &cfg), Err(Error::MissingDomain(_))));
    }

    #[test]
    fn total_loss_gradient_matches_finite_differences() {
        let shape = (16, 16, 3);
        let x0 = random_image(16, 16, 3, 4);
        let user = user_for(shape, 16, true, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for carrier in [Carrier::Identity, Carrier::Smooth { factor: 2 }] {
            for quality in [QualityKind::L2, QualityKind::GradientL2, QualityKind::Ssim] {
                let cfg = EmbedConfig { carrier, quality_loss: quality, ..EmbedConfig::triple() };
                let problem = EmbedProblem::new(&x0, &user, &cfg).unwrap();
                let theta: Vec<f64> = match carrier {
                    Carrier::Identity => random_image(16, 16, 3, 7).pixels,
                    Carrier::Smooth { .. } => problem.initial_theta().iter().map(|_| rng.gen_range(-0.04..0.04)).collect(),
                };
                let analytic = problem.evaluate(&theta).unwrap().grad;
                let numeric = numeric_grad(|t| problem.evaluate(t).unwrap().loss, &theta, 1e-6);
                let err = rel_err(&analytic, &numeric);
                assert!(err < 1e-3, "{carrier:?}/{quality:?}: {err}");
            }
        }
    }

    #[test]
    fn optimizer_finds_quadratic_minimum() {
        let cfg = EmbedConfig { lr: 0.1, lr_halving_period: 200, ..Default::default() };
        let c = 1.7;
        let out = optimize(
            |t| Ok(Evaluation { loss: (t[0] - c).powi(2), grad: vec![2.0 * (t[0] - c)], converged: false }),
            vec![0.0],
            &cfg,
        )
        .unwrap();
        assert!((out.theta[0] - c).abs() < 1e-3, "{}", out.theta[0]);
    }

    #[test]
    fn optimizer_zero_gradient_and_determinism() {
        let cfg = EmbedConfig { steps: 50, ..Default::default() };
        let out = optimize(|_| Ok(Evaluation { loss: 1.0, grad: vec![0.0; 3], converged: false }), vec![0.1, 0.2, 0.3], &cfg).unwrap();
        assert_eq!(out.theta, vec![0.1, 0.2, 0.3]);
        let run = || {
            optimize(
                |t: &[f64]| Ok(Evaluation { loss: t.iter().map(|v| v.sin()).sum(), grad: t.iter().map(|v| v.cos()).collect(), converged: false }),
                vec![0.3, -1.2],
                &cfg,
            )
            .unwrap()
            .theta
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn optimizer_aborts_on_non_finite() {
        let cfg = EmbedConfig::default();
        let res = optimize(|_| Ok(Evaluation { loss: f64::NAN, grad: vec![0.0], converged: false }), vec![0.0], &cfg);
        assert!(matches!(res, Err(Error::NonFinite { step: 0, .. })));
    }

    #[test]
    fn pixel_embedding_succeeds() {
        let x0 = random_image(32, 32, 3, 9);
        let user = user_for((32, 32, 3), 100, false, 10);
        let (x_wm, report) = embed(&x0, &user, &EmbedConfig::default()).unwrap();
        assert!(report.success, "{report:?}");
        let extracted = extract_bits(&x_wm.pixels, &user.secret.pixel_pairs).unwrap();
        assert_eq!(extracted, user.watermark);
        assert!(report.domains[0].min_signed_gap >= 0.2);
        // Re-embedding a successful result is a no-op.
        let (again, r2) = embed(&x_wm, &user, &EmbedConfig::default()).unwrap();
        assert_eq!(r2.iterations_run, 0);
        assert_eq!(again, x_wm);
    }

    #[test]
    fn polishing_never_costs_quality() {
        let x0 = random_image(32, 32, 3, 21);
        let user = user_for((32, 32, 3), 100, false, 22);
        let early = EmbedConfig { polish: false, ..Default::default() };
        let (x_early, r_early) = embed(&x0, &user, &early).unwrap();
        let (x_pol, r_pol) = embed(&x0, &user, &EmbedConfig::default()).unwrap();
        assert!(r_early.success && r_pol.success);
        assert!(r_early.iterations_run < early.steps);
        assert!(r_pol.psnr_vs_original >= r_early.psnr_vs_original);
        for x in [&x_early, &x_pol] {
            assert_eq!(extract_bits(&x.pixels, &user.secret.pixel_pairs).unwrap(), user.watermark);
        }
    }

    #[test]
    fn pixels_outside_the_box_can_return() {
        // Both pixels of the pair start above 1 and clamp to a tie; bit 1
        // needs pixel 0 below pixel 1.
        let x0 = ImageBuffer::new(1, 2, 1, vec![0.95, 0.95]).unwrap();
        let user = UserRecord {
            user_id: "u".into(),
            watermark: "1".parse().unwrap(),
            secret: SecretKey { image_shape: (1, 2, 1), pixel_pairs: vec![(0, 1)], freq_pairs: None, mellin_pairs: None },
        };
        let cfg = EmbedConfig { lambda_qual: QualityWeight::Fixed(0.0), ..Default::default() };
        let problem = EmbedProblem::new(&x0, &user, &cfg).unwrap();
        let eval = problem.evaluate(&[1.3, 1.3]).unwrap();
        assert!(eval.grad[0] > 0.0, "pixel 0 must be allowed back down");
        assert_eq!(eval.grad[1], 0.0, "pixel 1 may not be pushed further out");
        let (x, report) = embed(&x0, &user, &cfg).unwrap();
        assert!(report.success);
        assert!(x.pixels[1] - x.pixels[0] >= 0.2);
    }

    #[test]
    fn oversized_key_is_rejected() {
        let x0 = random_image(4, 4, 1, 1);
        let user = UserRecord {
            user_id: "u".into(),
            watermark: BitString::zeros(9).unwrap(),
            secret: SecretKey {
                image_shape: (4, 4, 1),
                pixel_pairs: (0..9).map(|i| (i, i + 9)).collect(),
                freq_pairs: None,
                mellin_pairs: None,
            },
        };
        assert!(embed(&x0, &user, &EmbedConfig::default()).is_err());
    }
}
