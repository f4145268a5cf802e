//! Watermark-removal attacks.
//!
//! Every attack in [`apply_attack`] is followed by per-channel
//! renormalization to the full `[0, 1]` range. Parameters are in `[0, 1]`
//! pixel units; any parameter left out of an [`AttackSpec`] is drawn from
//! its default range using the spec's seed.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use image::codecs::jpeg::JpegEncoder;
use image::{ExtendedColorType, ImageEncoder};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::embedding::{quality_loss, wm_hinge_loss, QualityKind};
use crate::error::{Error, Result};
use crate::model::{BitString, ImageBuffer, IndexPair};
use crate::optim::Adam;
use crate::transforms::{rotate_about_center, Field2D};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AttackKind {
    Brightness,
    ContrastPos,
    ContrastNeg,
    Gamma,
    Sharpness,
    Hue,
    Saturation,
    Noise,
    Jpeg,
    Rotation,
    Translation,
}

impl AttackKind {
    pub const ALL: [AttackKind; 11] = [
        AttackKind::Brightness,
        AttackKind::ContrastPos,
        AttackKind::ContrastNeg,
        AttackKind::Gamma,
        AttackKind::Sharpness,
        AttackKind::Hue,
        AttackKind::Saturation,
        AttackKind::Noise,
        AttackKind::Jpeg,
        AttackKind::Rotation,
        AttackKind::Translation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttackKind::Brightness => "brightness",
            AttackKind::ContrastPos => "contrast_pos",
            AttackKind::ContrastNeg => "contrast_neg",
            AttackKind::Gamma => "gamma",
            AttackKind::Sharpness => "sharpness",
            AttackKind::Hue => "hue",
            AttackKind::Saturation => "saturation",
            AttackKind::Noise => "noise",
            AttackKind::Jpeg => "jpeg",
            AttackKind::Rotation => "rotation",
            AttackKind::Translation => "translation",
        }
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AttackKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::UnknownAttack(s.to_string()))
    }
}

impl Serialize for AttackKind {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for AttackKind {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(deserializer)?.parse().map_err(serde::de::Error::custom)
    }
}

/// One attack with optional explicit parameters.
///
/// | kind | params | default |
/// |---|---|---|
/// | brightness | `b` | U[-20/255, 20/255] |
/// | contrast_pos | `c` | U[0.5, 2] |
/// | contrast_neg | `c` | U[-2, -0.5] |
/// | gamma | `g` | U[0.5, 2] |
/// | sharpness | `a` | 2 |
/// | hue | `h` (radians) | 0.2 |
/// | saturation | `a` | 2 |
/// | noise | `delta` | 25/255 |
/// | jpeg | `quality` | 50 |
/// | rotation | `angle_deg` | U[-10, 10] |
/// | translation | `dx`, `dy` (pixels), `wrap` (0/1) | U[-10, 10] each, 0 |
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub kind: AttackKind,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    #[serde(default)]
    pub seed: u64,
}

impl AttackSpec {
    pub fn new(kind: AttackKind, seed: u64) -> Self {
        AttackSpec { kind, params: BTreeMap::new(), seed }
    }

    pub fn with(mut self, key: &str, value: f64) -> Self {
        self.params.insert(key.to_string(), value);
        self
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| {
            // Surface unknown kinds as such rather than as a generic parse error.
            if let Ok(v) = serde_json::from_str::<serde_json::Value>(text) {
                if let Some(kind) = v.get("kind").and_then(|k| k.as_str()) {
                    if kind.parse::<AttackKind>().is_err() {
                        return Error::UnknownAttack(kind.to_string());
                    }
                }
            }
            Error::Parse { what: "attack spec", line: e.line(), column: e.column(), message: e.to_string() }
        })
    }

    fn param<R: Rng>(&self, key: &str, rng: &mut R, default: impl FnOnce(&mut R) -> f64) -> f64 {
        // The draw happens regardless so that explicit parameters do not
        // shift later draws.
        let drawn = default(rng);
        self.params.get(key).copied().unwrap_or(drawn)
    }

    /// Label used in reports, e.g. `gamma` or `gamma(g=1.7)`.
    pub fn label(&self) -> String {
        if self.params.is_empty() {
            return self.kind.name().to_string();
        }
        let args: Vec<String> = self.params.iter().map(|(k, v)| format!("{k}={v}")).collect();
        format!("{}({})", self.kind, args.join(","))
    }
}

/// Per-channel linear stretch to `[0, 1]`; constant channels are unchanged.
pub fn renormalize(x: &ImageBuffer) -> ImageBuffer {
    let c = x.channels;
    let mut lo = vec![f64::INFINITY; c];
    let mut hi = vec![f64::NEG_INFINITY; c];
    for (i, &v) in x.pixels.iter().enumerate() {
        lo[i % c] = lo[i % c].min(v);
        hi[i % c] = hi[i % c].max(v);
    }
    x.with_pixels(
        x.pixels
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let (l, h) = (lo[i % c], hi[i % c]);
                if h > l {
                    ((v - l) / (h - l)).clamp(0.0, 1.0)
                } else {
                    v
                }
            })
            .collect(),
    )
}

fn map_pixels(x: &ImageBuffer, f: impl Fn(f64) -> f64) -> ImageBuffer {
    x.with_pixels(x.pixels.iter().map(|&v| f(v)).collect())
}

fn channel_field(x: &ImageBuffer, k: usize) -> Field2D {
    Field2D {
        height: x.height,
        width: x.width,
        values: x.pixels.iter().skip(k).step_by(x.channels).copied().collect(),
    }
}

fn from_channel_fields(x: &ImageBuffer, fields: &[Field2D]) -> ImageBuffer {
    let mut pixels = vec![0.0; x.len()];
    for (k, f) in fields.iter().enumerate() {
        for (i, &v) in f.values.iter().enumerate() {
            pixels[i * x.channels + k] = v;
        }
    }
    x.with_pixels(pixels)
}

fn per_channel(x: &ImageBuffer, f: impl Fn(&Field2D) -> Field2D) -> ImageBuffer {
    let fields: Vec<Field2D> = (0..x.channels).map(|k| f(&channel_field(x, k))).collect();
    from_channel_fields(x, &fields)
}

/// `blur + a * (x - blur)` with the 3x3 kernel `[[1,1,1],[1,5,1],[1,1,1]] / 13`;
/// border pixels are left unblurred.
pub fn sharpen(x: &ImageBuffer, amount: f64) -> ImageBuffer {
    per_channel(x, |f| {
        let (h, w) = (f.height, f.width);
        let mut out = f.values.clone();
        for r in 1..h.saturating_sub(1) {
            for c in 1..w.saturating_sub(1) {
                let mut acc = 0.0;
                for dr in 0..3 {
                    for dc in 0..3 {
                        let wt = if dr == 1 && dc == 1 { 5.0 } else { 1.0 };
                        acc += wt * f.get(r + dr - 1, c + dc - 1);
                    }
                }
                let blur = acc / 13.0;
                out[r * w + c] = (blur + amount * (f.get(r, c) - blur)).clamp(0.0, 1.0);
            }
        }
        Field2D { height: h, width: w, values: out }
    })
}

/// RGB in [0,1] to (hue in [0, 2pi), saturation, value).
pub fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let v = max;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    if delta == 0.0 {
        return (0.0, s, v);
    }
    let h6 = if max == r {
        ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        (b - r) / delta + 2.0
    } else {
        (r - g) / delta + 4.0
    };
    (h6 / 6.0 * 2.0 * PI, s, v)
}

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = (h / (2.0 * PI)).rem_euclid(1.0) * 6.0;
    let sector = (h6.floor() as usize).min(5);
    let f = h6 - sector as f64;
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    match sector {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

fn map_hsv(x: &ImageBuffer, f: impl Fn(f64, f64, f64) -> (f64, f64, f64)) -> ImageBuffer {
    if x.channels != 3 {
        return x.clone();
    }
    let mut pixels = Vec::with_capacity(x.len());
    for px in x.pixels.chunks_exact(3) {
        let (h, s, v) = rgb_to_hsv(px[0].clamp(0.0, 1.0), px[1].clamp(0.0, 1.0), px[2].clamp(0.0, 1.0));
        let (h, s, v) = f(h, s, v);
        let (r, g, b) = hsv_to_rgb(h, s, v);
        pixels.extend([r, g, b]);
    }
    x.with_pixels(pixels)
}

pub fn adjust_hue(x: &ImageBuffer, shift: f64) -> ImageBuffer {
    map_hsv(x, |h, s, v| ((h + shift).rem_euclid(2.0 * PI), s, v))
}

pub fn adjust_saturation(x: &ImageBuffer, factor: f64) -> ImageBuffer {
    map_hsv(x, |h, s, v| (h, (s * factor).clamp(0.0, 1.0), v))
}

/// 8-bit quantization as used for PNG and JPEG output.
pub fn quantize_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Baseline JPEG encode/decode round trip.
pub fn jpeg_round_trip(x: &ImageBuffer, quality: u8) -> Result<ImageBuffer> {
    let bytes: Vec<u8> = x.pixels.iter().map(|&v| quantize_u8(v)).collect();
    let color = if x.channels == 3 { ExtendedColorType::Rgb8 } else { ExtendedColorType::L8 };
    let mut buf = Vec::new();
    JpegEncoder::new_with_quality(&mut buf, quality).write_image(&bytes, x.width as u32, x.height as u32, color)?;
    let decoded = image::load_from_memory_with_format(&buf, image::ImageFormat::Jpeg)?;
    let raw: Vec<u8> = if x.channels == 3 { decoded.to_rgb8().into_raw() } else { decoded.to_luma8().into_raw() };
    ImageBuffer::new(x.height, x.width, x.channels, raw.iter().map(|&b| b as f64 / 255.0).collect())
}

/// Rotation about the center, bilinear, edge-replicated.
pub fn rotate(x: &ImageBuffer, angle_deg: f64) -> ImageBuffer {
    per_channel(x, |f| rotate_about_center(f, angle_deg.to_radians()))
}

/// Integer shift so that `out[r + dy][c + dx] = x[r][c]`; vacated pixels are
/// edge-replicated, or wrapped around when `wrap` is set.
pub fn translate(x: &ImageBuffer, dy: isize, dx: isize, wrap: bool) -> ImageBuffer {
    let (h, w) = (x.height as isize, x.width as isize);
    let mut pixels = Vec::with_capacity(x.len());
    for r in 0..h {
        for c in 0..w {
            let (sr, sc) = if wrap {
                ((r - dy).rem_euclid(h), (c - dx).rem_euclid(w))
            } else {
                ((r - dy).clamp(0, h - 1), (c - dx).clamp(0, w - 1))
            };
            for k in 0..x.channels {
                pixels.push(x.get(sr as usize, sc as usize, k));
            }
        }
    }
    x.with_pixels(pixels)
}

/// Applies the attack, then renormalizes.
pub fn apply_attack(x: &ImageBuffer, spec: &AttackSpec) -> Result<ImageBuffer> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let attacked = match spec.kind {
        AttackKind::Brightness => {
            let b = spec.param("b", &mut rng, |r| r.gen_range(-20.0..=20.0) / 255.0);
            map_pixels(x, |v| v + b)
        }
        AttackKind::ContrastPos => {
            let c = spec.param("c", &mut rng, |r| r.gen_range(0.5..=2.0));
            if c.is_nan() || c <= 0.0 {
                return Err(Error::InvalidInput(format!("contrast_pos needs c > 0, got {c}")));
            }
            map_pixels(x, |v| c * v)
        }
        AttackKind::ContrastNeg => {
            let c = spec.param("c", &mut rng, |r| r.gen_range(-2.0..=-0.5));
            if c.is_nan() || c >= 0.0 {
                return Err(Error::InvalidInput(format!("contrast_neg needs c < 0, got {c}")));
            }
            map_pixels(x, |v| c * v)
        }
        AttackKind::Gamma => {
            let g = spec.param("g", &mut rng, |r| r.gen_range(0.5..=2.0));
            if g.is_nan() || g <= 0.0 {
                return Err(Error::InvalidInput(format!("gamma needs g > 0, got {g}")));
            }
            map_pixels(x, |v| v.clamp(0.0, 1.0).powf(g))
        }
        AttackKind::Sharpness => sharpen(x, spec.param("a", &mut rng, |_| 2.0)),
        AttackKind::Hue => adjust_hue(x, spec.param("h", &mut rng, |_| 0.2)),
        AttackKind::Saturation => adjust_saturation(x, spec.param("a", &mut rng, |_| 2.0)),
        AttackKind::Noise => {
            let delta = spec.param("delta", &mut rng, |_| 25.0 / 255.0);
            let pixels = x
                .pixels
                .iter()
                .map(|&v| v + if delta > 0.0 { rng.gen_range(-delta..=delta) } else { 0.0 })
                .collect();
            x.with_pixels(pixels)
        }
        AttackKind::Jpeg => {
            let q = spec.param("quality", &mut rng, |_| 50.0);
            if !(1.0..=100.0).contains(&q) {
                return Err(Error::InvalidInput(format!("jpeg quality must be in 1..=100, got {q}")));
            }
            jpeg_round_trip(x, q.round() as u8)?
        }
        AttackKind::Rotation => {
            let angle = spec.param("angle_deg", &mut rng, |r| r.gen_range(-10.0..=10.0));
            rotate(x, angle)
        }
        AttackKind::Translation => {
            let dx = spec.param("dx", &mut rng, |r| r.gen_range(-10.0..=10.0)).round() as isize;
            let dy = spec.param("dy", &mut rng, |r| r.gen_range(-10.0..=10.0)).round() as isize;
            let wrap = spec.params.get("wrap").is_some_and(|&v| v != 0.0);
            translate(x, dy, dx, wrap)
        }
    };
    Ok(renormalize(&attacked))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PgdConfig {
    pub budget: f64,
    pub iters: usize,
    pub lr: f64,
    pub margin: f64,
    pub lambda_wm: f64,
    pub lambda_qual: f64,
}

impl Default for PgdConfig {
    fn default() -> Self {
        PgdConfig { budget: 0.1, iters: 10, lr: 0.1, margin: 0.2, lambda_wm: 0.9, lambda_qual: 150.0 }
    }
}

/// White-box attack: Adam on the image towards the decoy watermark `target`,
/// projected onto the l-infinity ball of radius `budget` around `x` and the
/// unit box after every step.
pub fn pgd_attack(x: &ImageBuffer, pairs: &[IndexPair], target: &BitString, cfg: &PgdConfig) -> Result<ImageBuffer> {
    if target.len() != pairs.len() {
        return Err(Error::LengthMismatch { expected: pairs.len(), actual: target.len() });
    }
    if cfg.budget < 0.0 {
        return Err(Error::InvalidInput("PGD budget must be non-negative".into()));
    }
    for &(a, b) in pairs {
        for idx in [a, b] {
            if idx >= x.len() {
                return Err(Error::IndexOutOfRange { index: idx, size: x.len() });
            }
        }
    }
    let mut cur = x.pixels.clone();
    let mut adam = Adam::new(cur.len());
    for _ in 0..cfg.iters {
        let diffs: Vec<f64> = pairs.iter().map(|&(a, b)| cur[a] - cur[b]).collect();
        let (_, dd) = wm_hinge_loss(&diffs, target, cfg.margin)?;
        let (_, mut grad) = quality_loss(&x.with_pixels(cur.clone()), x, QualityKind::L2)?;
        grad.iter_mut().for_each(|g| *g *= cfg.lambda_qual);
        for (&(a, b), g) in pairs.iter().zip(dd) {
            grad[a] += cfg.lambda_wm * g;
            grad[b] -= cfg.lambda_wm * g;
        }
        adam.step(&mut cur, &grad, cfg.lr);
        for (v, &orig) in cur.iter_mut().zip(&x.pixels) {
            *v = v.clamp(orig - cfg.budget, orig + cfg.budget).clamp(0.0, 1.0);
        }
    }
    Ok(x.with_pixels(cur))
}
