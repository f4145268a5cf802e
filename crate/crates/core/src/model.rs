//! Shared domain types: watermarks, secrets, users, images and detection policies.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// The three value domains a watermark can live in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    /// Raw pixels, flat row-major (row, col, channel) indexing.
    Pixel,
    /// Modulus of the 2-D DFT of the luminance plane.
    Freq,
    /// Modulus of the 2-D DFT of the log-polar resampled luminance plane.
    Mellin,
}

impl Domain {
    pub const ALL: [Domain; 3] = [Domain::Pixel, Domain::Freq, Domain::Mellin];

    pub fn name(self) -> &'static str {
        match self {
            Domain::Pixel => "pixel",
            Domain::Freq => "freq",
            Domain::Mellin => "mellin",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pixel" => Ok(Domain::Pixel),
            "freq" => Ok(Domain::Freq),
            "mellin" => Ok(Domain::Mellin),
            other => Err(Error::InvalidInput(format!("unknown domain `{other}`"))),
        }
    }
}

/// A fixed-length binary watermark.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BitString(Vec<bool>);

impl BitString {
    pub fn new(bits: Vec<bool>) -> Result<Self> {
        if bits.is_empty() {
            return Err(Error::InvalidInput("bit string must have at least one bit".into()));
        }
        Ok(BitString(bits))
    }

    pub fn zeros(n: usize) -> Result<Self> {
        Self::new(vec![false; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    // Never empty by construction; present for clippy's len_without_is_empty.
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.0
    }

    pub fn get(&self, i: usize) -> bool {
        self.0[i]
    }

    /// Number of positions where the two strings differ.
    pub fn hamming_distance(&self, other: &BitString) -> Result<usize> {
        if self.len() != other.len() {
            return Err(Error::LengthMismatch {
                expected: self.len(),
                actual: other.len(),
            });
        }
        Ok(self.0.iter().zip(&other.0).filter(|(a, b)| a != b).count())
    }

    pub fn complement(&self) -> BitString {
        BitString(self.0.iter().map(|b| !b).collect())
    }
}

impl fmt::Display for BitString {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &b in &self.0 {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl FromStr for BitString {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bits = s
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(Error::InvalidInput(format!("invalid bit character `{other}`"))),
            })
            .collect::<Result<Vec<_>>>()?;
        BitString::new(bits)
    }
}

impl Serialize for BitString {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for BitString {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Ordered index pair `(a, b)`; the bit is 0 when `value[a] >= value[b]`.
pub type IndexPair = (usize, usize);

/// The private key: per-domain lists of index pairs.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SecretKey {
    pub image_shape: (usize, usize, usize),
    pub pixel_pairs: Vec<IndexPair>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub freq_pairs: Option<Vec<IndexPair>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mellin_pairs: Option<Vec<IndexPair>>,
}

impl SecretKey {
    pub fn n_bits(&self) -> usize {
        self.pixel_pairs.len()
    }

    pub fn pairs(&self, domain: Domain) -> Option<&[IndexPair]> {
        match domain {
            Domain::Pixel => Some(&self.pixel_pairs),
            Domain::Freq => self.freq_pairs.as_deref(),
            Domain::Mellin => self.mellin_pairs.as_deref(),
        }
    }

    pub fn require(&self, domain: Domain) -> Result<&[IndexPair]> {
        self.pairs(domain).ok_or(Error::MissingDomain(domain.name()))
    }

    pub fn has_invariant_domains(&self) -> bool {
        self.freq_pairs.is_some() && self.mellin_pairs.is_some()
    }

    /// Checks uniqueness, range and (for spectral domains) the DC and
    /// conjugate-partner exclusions.
    pub fn validate(&self) -> Result<()> {
        let (h, w, c) = self.image_shape;
        let n = self.n_bits();
        if n == 0 {
            return Err(Error::InvalidInput("secret has no pairs".into()));
        }
        check_pairs(&self.pixel_pairs, h * w * c)?;
        if let Some(pairs) = &self.freq_pairs {
            if pairs.len() != n {
                return Err(Error::LengthMismatch { expected: n, actual: pairs.len() });
            }
            check_pairs(pairs, h * w)?;
            check_spectral(pairs, h, w)?;
        }
        if let Some(pairs) = &self.mellin_pairs {
            if pairs.len() != n {
                return Err(Error::LengthMismatch { expected: n, actual: pairs.len() });
            }
            let grid = crate::transforms::LogPolarGrid::default_for(h, w);
            check_pairs(pairs, grid.n_radial * grid.n_angular)?;
            check_spectral(pairs, grid.n_radial, grid.n_angular)?;
        }
        Ok(())
    }
}

fn check_pairs(pairs: &[IndexPair], size: usize) -> Result<()> {
    let mut seen = std::collections::HashSet::with_capacity(pairs.len() * 2);
    for &(a, b) in pairs {
        for idx in [a, b] {
            if idx >= size {
                return Err(Error::IndexOutOfRange { index: idx, size });
            }
            if !seen.insert(idx) {
                return Err(Error::InvalidInput(format!("index {idx} used more than once")));
            }
        }
    }
    Ok(())
}

fn check_spectral(pairs: &[IndexPair], h: usize, w: usize) -> Result<()> {
    for &(a, b) in pairs {
        if a == 0 || b == 0 {
            return Err(Error::InvalidInput("spectral pair uses the DC bin".into()));
        }
        if conjugate_index(a, h, w) == b {
            return Err(Error::InvalidInput(format!(
                "spectral pair ({a}, {b}) joins conjugate-symmetric bins"
            )));
        }
    }
    Ok(())
}

/// Flat index of the Hermitian partner `(-u mod h, -v mod w)` of bin `idx`.
pub fn conjugate_index(idx: usize, h: usize, w: usize) -> usize {
    let (u, v) = (idx / w, idx % w);
    ((h - u) % h) * w + (w - v) % w
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserRecord {
    pub user_id: String,
    pub watermark: BitString,
    pub secret: SecretKey,
}

/// All registered users of one service; every watermark has `n_bits` bits.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Registry {
    pub version: u32,
    pub n_bits: usize,
    #[serde(rename = "seed")]
    pub rng_seed: u64,
    pub users: Vec<UserRecord>,
}

impl Registry {
    pub const VERSION: u32 = 1;

    pub fn new(n_bits: usize, rng_seed: u64) -> Self {
        Registry {
            version: Self::VERSION,
            n_bits,
            rng_seed,
            users: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    pub fn user(&self, user_id: &str) -> Option<&UserRecord> {
        self.users.iter().find(|u| u.user_id == user_id)
    }

    /// True when every user carries freq and mellin secrets.
    pub fn supports_invariants(&self) -> bool {
        !self.users.is_empty() && self.users.iter().all(|u| u.secret.has_invariant_domains())
    }
}

/// An H x W x C float image, row-major over (row, col, channel).
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<f64>,
}

impl ImageBuffer {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidInput(format!("unsupported channel count {channels}")));
        }
        if height == 0 || width == 0 {
            return Err(Error::InvalidInput("image must be non-empty".into()));
        }
        if pixels.len() != height * width * channels {
            return Err(Error::LengthMismatch {
                expected: height * width * channels,
                actual: pixels.len(),
            });
        }
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("image contains non-finite pixels".into()));
        }
        Ok(ImageBuffer { height, width, channels, pixels })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize, ch: usize) -> usize {
        (row * self.width + col) * self.channels + ch
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.pixels[self.index(row, col, ch)]
    }

    pub fn with_pixels(&self, pixels: Vec<f64>) -> ImageBuffer {
        debug_assert_eq!(pixels.len(), self.pixels.len());
        ImageBuffer { pixels, ..*self }
    }

    pub fn clamped(&self) -> ImageBuffer {
        self.with_pixels(self.pixels.iter().map(|v| v.clamp(0.0, 1.0)).collect())
    }

    pub fn same_shape(&self, other: &ImageBuffer) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                expected: self.shape(),
                actual: other.shape(),
            });
        }
        Ok(())
    }

    /// Largest absolute per-pixel difference.
    pub fn linf_distance(&self, other: &ImageBuffer) -> Result<f64> {
        self.same_shape(other)?;
        Ok(self
            .pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

/// Double-tail thresholds and the per-bit match probability under the null.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionPolicy {
    pub tau1: usize,
    pub tau2: usize,
    pub p_null: f64,
}

impl DetectionPolicy {
    pub fn new(tau1: usize, tau2: usize, p_null: f64) -> Result<Self> {
        let policy = DetectionPolicy { tau1, tau2, p_null };
        if !(tau1 < tau2) {
            return Err(Error::InvalidConfig(format!("need tau1 < tau2, got {tau1} >= {tau2}")));
        }
        if !(p_null > 0.0 && p_null < 1.0) {
            return Err(Error::InvalidConfig(format!("p_null must lie in (0, 1), got {p_null}")));
        }
        Ok(policy)
    }

    pub fn validate_for(&self, n: usize) -> Result<()> {
        if self.tau2 > n {
            return Err(Error::InvalidConfig(format!("tau2 = {} exceeds n = {n}", self.tau2)));
        }
        Ok(())
    }
}
