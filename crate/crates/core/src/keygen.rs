//! Watermark and secret sampling, user registration and registry files.

use std::collections::{BTreeSet, HashSet};
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::model::{conjugate_index, BitString, Domain, IndexPair, Registry, SecretKey, UserRecord};
use crate::transforms::LogPolarGrid;

pub const DEFAULT_BITS: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct KeygenConfig {
    pub n_bits: usize,
    /// Pixel is always sampled; freq and mellin are optional.
    pub domains: BTreeSet<Domain>,
    pub image_shape: (usize, usize, usize),
    pub seed: u64,
}

impl KeygenConfig {
    pub fn pixel(n_bits: usize, image_shape: (usize, usize, usize), seed: u64) -> Self {
        KeygenConfig {
            n_bits,
            domains: BTreeSet::from([Domain::Pixel]),
            image_shape,
            seed,
        }
    }

    pub fn all_domains(n_bits: usize, image_shape: (usize, usize, usize), seed: u64) -> Self {
        KeygenConfig {
            n_bits,
            domains: Domain::ALL.into_iter().collect(),
            image_shape,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w, c) = self.image_shape;
        if self.n_bits == 0 {
            return Err(Error::InvalidConfig("n_bits must be at least 1".into()));
        }
        if c != 1 && c != 3 {
            return Err(Error::InvalidConfig(format!("unsupported channel count {c}")));
        }
        if !self.domains.contains(&Domain::Pixel) {
            return Err(Error::InvalidConfig("the pixel domain is mandatory".into()));
        }
        let need = 2 * self.n_bits;
        let pixel_grid = h * w * c;
        if need > pixel_grid {
            return Err(Error::InvalidConfig(format!(
                "{} bits need {need} distinct pixels but the image has {pixel_grid}",
                self.n_bits
            )));
        }
        if self.domains.contains(&Domain::Freq) {
            let avail = spectral_candidates(h, w).len();
            if need > avail {
                return Err(Error::InvalidConfig(format!(
                    "{} bits need {need} distinct frequency bins but only {avail} are usable",
                    self.n_bits
                )));
            }
        }
        if self.domains.contains(&Domain::Mellin) {
            let grid = LogPolarGrid::default_for(h, w);
            grid.validate(h, w)?;
            let avail = spectral_candidates(grid.n_radial, grid.n_angular).len();
            if need > avail {
                return Err(Error::InvalidConfig(format!(
                    "{} bits need {need} distinct log-polar bins but only {avail} are usable",
                    self.n_bits
                )));
            }
        }
        Ok(())
    }
}

pub fn sample_watermark<R: Rng + ?Sized>(n_bits: usize, rng: &mut R) -> Result<BitString> {
    BitString::new((0..n_bits).map(|_| rng.gen_bool(0.5)).collect())
}

/// Bins of an `h x w` real spectrum that carry an independent modulus:
/// one representative per conjugate pair, DC excluded.
pub fn spectral_candidates(h: usize, w: usize) -> Vec<usize> {
    (1..h * w).filter(|&k| k <= conjugate_index(k, h, w)).collect()
}

fn sample_pairs<R: Rng + ?Sized>(pool: &[usize], n: usize, rng: &mut R) -> Vec<IndexPair> {
    let picked = index::sample(rng, pool.len(), 2 * n);
    let picked: Vec<usize> = picked.iter().map(|i| pool[i]).collect();
    picked.chunks_exact(2).map(|p| (p[0], p[1])).collect()
}

pub fn sample_secret<R: Rng + ?Sized>(cfg: &KeygenConfig, rng: &mut R) -> Result<SecretKey> {
    cfg.validate()?;
    let (h, w, c) = cfg.image_shape;
    let n = cfg.n_bits;
    let pixel_pool: Vec<usize> = (0..h * w * c).collect();
    let pixel_pairs = sample_pairs(&pixel_pool, n, rng);
    let freq_pairs = cfg
        .domains
        .contains(&Domain::Freq)
        .then(|| sample_pairs(&spectral_candidates(h, w), n, rng));
    let mellin_pairs = cfg.domains.contains(&Domain::Mellin).then(|| {
        let grid = LogPolarGrid::default_for(h, w);
        sample_pairs(&spectral_candidates(grid.n_radial, grid.n_angular), n, rng)
    });
    let key = SecretKey {
        image_shape: cfg.image_shape,
        pixel_pairs,
        freq_pairs,
        mellin_pairs,
    };
    key.validate()?;
    Ok(key)
}

/// Per-user generator: the registry seed selects the key, the insertion
/// position selects the stream.
fn user_rng(seed: u64, position: usize) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(position as u64);
    rng
}

pub fn register_user(mut reg: Registry, user_id: &str, cfg: &KeygenConfig) -> Result<Registry> {
    if reg.user(user_id).is_some() {
        return Err(Error::DuplicateUser(user_id.to_string()));
    }
    if cfg.n_bits != reg.n_bits {
        return Err(Error::InvalidConfig(format!(
            "registry uses {} bits, config asks for {}",
            reg.n_bits, cfg.n_bits
        )));
    }
    let mut rng = user_rng(reg.rng_seed, reg.users.len());
    let watermark = sample_watermark(cfg.n_bits, &mut rng)?;
    let secret = sample_secret(cfg, &mut rng)?;
    reg.users.push(UserRecord {
        user_id: user_id.to_string(),
        watermark,
        secret,
    });
    Ok(reg)
}

/// Builds a registry of `count` users named `user-0`, `user-1`, ...
pub fn build_registry(count: usize, cfg: &KeygenConfig) -> Result<Registry> {
    let mut reg = Registry::new(cfg.n_bits, cfg.seed);
    for i in 0..count {
        reg = register_user(reg, &format!("user-{i}"), cfg)?;
    }
    Ok(reg)
}

pub fn validate_registry(reg: &Registry) -> Result<()> {
    let mut ids = HashSet::new();
    for user in &reg.users {
        if !ids.insert(user.user_id.as_str()) {
            return Err(Error::DuplicateUser(user.user_id.clone()));
        }
        if user.watermark.len() != reg.n_bits {
            return Err(Error::LengthMismatch {
                expected: reg.n_bits,
                actual: user.watermark.len(),
            });
        }
        if user.secret.n_bits() != reg.n_bits {
            return Err(Error::LengthMismatch {
                expected: reg.n_bits,
                actual: user.secret.n_bits(),
            });
        }
        user.secret.validate()?;
    }
    Ok(())
}

pub fn registry_to_json(reg: &Registry) -> Result<String> {
    Ok(serde_json::to_string_pretty(reg)?)
}

pub fn registry_from_json(text: &str) -> Result<Registry> {
    let reg: Registry = serde_json::from_str(text).map_err(|e| Error::Parse {
        what: "registry",
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    validate_registry(&reg)?;
    Ok(reg)
}

pub fn persist_registry(reg: &Registry, path: &Path) -> Result<()> {
    std::fs::write(path, registry_to_json(reg)?)?;
    Ok(())
}

pub fn load_registry(path: &Path) -> Result<Registry> {
    registry_from_json(&std::fs::read_to_string(path)?)
}
