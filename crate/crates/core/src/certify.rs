//! l-infinity robustness certificates for pixel-domain watermarks.
//!
//! With half-gaps `Δ_j = |x[a_j] - x[b_j]| / 2` sorted ascending, flipping
//! bit `j` requires moving one of its two pixels by at least `Δ_j`. Since
//! secret indices are all distinct, a perturbation with `‖ε‖∞ < Δ_(k)`
//! (k-th smallest) can flip at most `k - 1` bits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extraction::extract_bits;
use crate::model::{BitString, ImageBuffer, IndexPair};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaProfile {
    /// Sorted ascending.
    pub deltas: Vec<f64>,
    /// `pair_order[i]` is the original pair index of `deltas[i]`.
    pub pair_order: Vec<usize>,
}

impl DeltaProfile {
    pub fn len(&self) -> usize {
        self.deltas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.deltas.is_empty()
    }

    pub fn min(&self) -> f64 {
        self.deltas.first().copied().unwrap_or(0.0)
    }

    pub fn median(&self) -> f64 {
        let n = self.deltas.len();
        match n {
            0 => 0.0,
            _ if n % 2 == 1 => self.deltas[n / 2],
            _ => 0.5 * (self.deltas[n / 2 - 1] + self.deltas[n / 2]),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub budget: f64,
    /// Fewer than this many bits can flip; `n + 1` means no guarantee.
    pub max_flips_exclusive: usize,
    pub delta_min: f64,
    pub delta_median: f64,
}

pub fn delta_profile(x: &ImageBuffer, pairs: &[IndexPair]) -> Result<DeltaProfile> {
    let mut entries = pairs
        .iter()
        .enumerate()
        .map(|(j, &(a, b))| {
            for idx in [a, b] {
                if idx >= x.len() {
                    return Err(Error::IndexOutOfRange { index: idx, size: x.len() });
                }
            }
            Ok(((x.pixels[a] - x.pixels[b]).abs() / 2.0, j))
        })
        .collect::<Result<Vec<_>>>()?;
    entries.sort_by(|p, q| p.0.total_cmp(&q.0));
    Ok(DeltaProfile {
        deltas: entries.iter().map(|e| e.0).collect(),
        pair_order: entries.iter().map(|e| e.1).collect(),
    })
}

/// Smallest 1-based `k` with `budget < Δ_(k)`, or `n + 1` if there is none.
pub fn certified_bits(profile: &DeltaProfile, budget: f64) -> usize {
    profile.deltas.partition_point(|&d| d <= budget) + 1
}

pub fn certify(profile: &DeltaProfile, budget: f64) -> Certificate {
    Certificate {
        budget,
        max_flips_exclusive: certified_bits(profile, budget),
        delta_min: profile.min(),
        delta_median: profile.median(),
    }
}

/// Tight adversary: every pair is pushed towards the opposite of `bits` by
/// `budget` on both pixels. Returns the perturbed image and the number of
/// pairs whose extracted bit changed.
pub fn worst_case_adversary(
    x: &ImageBuffer,
    pairs: &[IndexPair],
    bits: &BitString,
    budget: f64,
) -> Result<(ImageBuffer, usize)> {
    if bits.len() != pairs.len() {
        return Err(Error::LengthMismatch { expected: pairs.len(), actual: bits.len() });
    }
    let before = extract_bits(&x.pixels, pairs)?;
    let mut pixels = x.pixels.clone();
    for (&(a, b), &bit) in pairs.iter().zip(bits.bits()) {
        // Bit 0 means a >= b, so the attack lowers a and raises b.
        let s = if bit { -1.0 } else { 1.0 };
        pixels[a] = (x.pixels[a] - s * budget).clamp(0.0, 1.0);
        pixels[b] = (x.pixels[b] + s * budget).clamp(0.0, 1.0);
    }
    let after = extract_bits(&pixels, pairs)?;
    let flips = before.hamming_distance(&after)?;
    Ok((x.with_pixels(pixels), flips))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keygen::{build_registry, KeygenConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn profile(deltas: &[f64]) -> DeltaProfile {
        DeltaProfile { deltas: deltas.to_vec(), pair_order: (0..deltas.len()).collect() }
    }

    #[test]
    fn delta_examples() {
        let x = ImageBuffer::new(1, 4, 1, vec![0.9, 0.1, 0.5, 0.5]).unwrap();
        let p = delta_profile(&x, &[(0, 1), (2, 3)]).unwrap();
        assert_eq!(p.deltas[0], 0.0);
        assert_eq!(p.pair_order, vec![1, 0]);
        assert!((p.deltas[1] - 0.4).abs() < 1e-15);
        assert!(delta_profile(&x, &[(0, 4)]).is_err());
    }

    #[test]
    fn certified_bits_examples() {
        let p = profile(&[0.1, 0.2, 0.3]);
        assert_eq!(certified_bits(&p, 0.15), 2);
        assert_eq!(certified_bits(&p, 0.0), 1);
        assert_eq!(certified_bits(&p, 0.3), 4);
        assert_eq!(certified_bits(&p, 0.5), 4);
        // Strict inequality at the boundary.
        assert_eq!(certified_bits(&p, 0.1), 2);
        let tied = profile(&[0.0, 0.0, 0.2]);
        assert_eq!(certified_bits(&tied, 0.0), 3);
    }

    #[test]
    fn certified_bits_is_monotone() {
        let p = profile(&[0.01, 0.05, 0.05, 0.2, 0.4]);
        let mut prev = 0;
        for i in 0..100 {
            let k = certified_bits(&p, i as f64 * 0.005);
            assert!(k >= prev);
            prev = k;
        }
    }

    fn interior_image(seed: u64) -> ImageBuffer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageBuffer::new(32, 32, 3, (0..32 * 32 * 3).map(|_| rng.gen_range(0.3..0.7)).collect()).unwrap()
    }

    #[test]
    fn adversary_examples() {
        let reg = build_registry(1, &KeygenConfig::pixel(40, (32, 32, 3), 3)).unwrap();
        let pairs = &reg.users[0].secret.pixel_pairs;
        let x = interior_image(1);
        let bits = extract_bits(&x.pixels, pairs).unwrap();
        let p = delta_profile(&x, pairs).unwrap();
        let (_, flips) = worst_case_adversary(&x, pairs, &bits, p.deltas[0] * 0.99).unwrap();
        assert_eq!(flips, 0);
        let between = 0.5 * (p.deltas[0] + p.deltas[1]);
        let (y, flips) = worst_case_adversary(&x, pairs, &bits, between).unwrap();
        assert_eq!(flips, 1);
        assert!(x.linf_distance(&y).unwrap() <= between);
    }

    #[test]
    fn adversary_flip_count_matches_recount() {
        let reg = build_registry(1, &KeygenConfig::pixel(100, (32, 32, 3), 4)).unwrap();
        let pairs = &reg.users[0].secret.pixel_pairs;
        let x = interior_image(2);
        let bits = extract_bits(&x.pixels, pairs).unwrap();
        // Direct recount from raw pixel gaps, independent of the profile.
        let gaps: Vec<f64> = pairs.iter().map(|&(a, b)| (x.pixels[a] - x.pixels[b]).abs() / 2.0).collect();
        for step in 1..40 {
            let budget = step as f64 * 0.005;
            let (_, flips) = worst_case_adversary(&x, pairs, &bits, budget).unwrap();
            assert_eq!(flips, gaps.iter().filter(|&&g| g < budget).count(), "budget {budget}");
            let k = certified_bits(&delta_profile(&x, pairs).unwrap(), budget);
            assert!(flips < k || k == pairs.len() + 1);
        }
    }
}
