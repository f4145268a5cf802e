//! Pairwise-sign extraction, the double-tail rule, and attribution over a registry.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BitString, DetectionPolicy, Domain, ImageBuffer, IndexPair, Registry};
use crate::transforms::{fft_magnitude, fourier_mellin, luminance, LogPolarGrid};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributionResult {
    pub matched_user: Option<String>,
    pub domain: Domain,
    /// Hamming distance of the matched user, or of the closest user when
    /// nothing matched.
    pub distance: usize,
    /// The distance fell in the upper tail (sign-inverted image).
    pub inverted: bool,
}

impl AttributionResult {
    pub fn is_match(&self) -> bool {
        self.matched_user.is_some()
    }
}

/// `bit_j = 0` when `values[a_j] >= values[b_j]`, else 1.
pub fn extract_bits(values: &[f64], pairs: &[IndexPair]) -> Result<BitString> {
    let bits = pairs
        .iter()
        .map(|&(a, b)| {
            for idx in [a, b] {
                if idx >= values.len() {
                    return Err(Error::IndexOutOfRange { index: idx, size: values.len() });
                }
            }
            Ok(values[a] < values[b])
        })
        .collect::<Result<Vec<_>>>()?;
    BitString::new(bits)
}

pub fn double_tail_indicator(d: usize, policy: &DetectionPolicy) -> bool {
    d <= policy.tau1 || d >= policy.tau2
}

/// The value array a domain's secret pairs index into.
pub fn domain_values(x: &ImageBuffer, domain: Domain) -> Result<Vec<f64>> {
    Ok(match domain {
        Domain::Pixel => x.pixels.clone(),
        Domain::Freq => fft_magnitude(&luminance(x)).values,
        Domain::Mellin => {
            let grid = LogPolarGrid::default_for(x.height, x.width);
            fourier_mellin(&luminance(x), &grid)?.values
        }
    })
}

/// Extracts the watermark a user's secret reads from `x` in one domain.
pub fn extract_domain(x: &ImageBuffer, pairs: &[IndexPair], domain: Domain) -> Result<BitString> {
    extract_bits(&domain_values(x, domain)?, pairs)
}

#[derive(Clone, Copy, Debug)]
struct Candidate {
    user: usize,
    distance: usize,
    score: usize,
}

/// Distances of every user in one domain plus the winning candidate.
fn attribute_values(
    values: &[f64],
    reg: &Registry,
    policy: &DetectionPolicy,
    domain: Domain,
) -> Result<(Option<Candidate>, Candidate)> {
    let n = reg.n_bits;
    let mut best: Option<Candidate> = None;
    let mut closest: Option<Candidate> = None;
    for (i, user) in reg.users.iter().enumerate() {
        let pairs = user.secret.require(domain)?;
        let extracted = extract_bits(values, pairs)?;
        let distance = extracted.hamming_distance(&user.watermark)?;
        let cand = Candidate { user: i, distance, score: distance.min(n - distance) };
        // Strict comparisons keep the earliest user on ties.
        if closest.is_none_or(|c| cand.score < c.score) {
            closest = Some(cand);
        }
        if double_tail_indicator(distance, policy) && best.is_none_or(|c| cand.score < c.score) {
            best = Some(cand);
        }
    }
    Ok((best, closest.expect("registry is non-empty")))
}

fn check_registry(x: &ImageBuffer, reg: &Registry, policy: &DetectionPolicy) -> Result<()> {
    policy.validate_for(reg.n_bits)?;
    for user in &reg.users {
        if user.secret.image_shape != x.shape() {
            return Err(Error::ShapeMismatch {
                expected: user.secret.image_shape,
                actual: x.shape(),
            });
        }
    }
    Ok(())
}

fn no_match(domain: Domain) -> AttributionResult {
    AttributionResult { matched_user: None, domain, distance: 0, inverted: false }
}

fn result_from(
    reg: &Registry,
    policy: &DetectionPolicy,
    domain: Domain,
    found: (Option<Candidate>, Candidate),
) -> AttributionResult {
    match found {
        (Some(c), _) => AttributionResult {
            matched_user: Some(reg.users[c.user].user_id.clone()),
            domain,
            distance: c.distance,
            inverted: c.distance >= policy.tau2,
        },
        (None, closest) => AttributionResult {
            matched_user: None,
            domain,
            distance: closest.distance,
            inverted: false,
        },
    }
}

/// Attribution in a single domain.
pub fn attribute_in(
    x: &ImageBuffer,
    reg: &Registry,
    policy: &DetectionPolicy,
    domain: Domain,
) -> Result<AttributionResult> {
    if reg.is_empty() {
        return Ok(no_match(domain));
    }
    check_registry(x, reg, policy)?;
    let values = domain_values(x, domain)?;
    Ok(result_from(reg, policy, domain, attribute_values(&values, reg, policy, domain)?))
}

/// Pixel-domain attribution: among users whose distance is in either tail,
/// pick the one with the smallest `min(d, n - d)`; ties go to the earlier user.
pub fn attribute(x: &ImageBuffer, reg: &Registry, policy: &DetectionPolicy) -> Result<AttributionResult> {
    attribute_in(x, reg, policy, Domain::Pixel)
}

/// Triple-domain attribution: per-domain candidates, then the smallest
/// score across domains (ties resolved pixel, freq, mellin).
pub fn attribute3(x: &ImageBuffer, reg: &Registry, policy: &DetectionPolicy) -> Result<AttributionResult> {
    attribute_over(x, reg, policy, &Domain::ALL)
}

/// Attribution over the given domains, in the order given for ties.
pub fn attribute_over(
    x: &ImageBuffer,
    reg: &Registry,
    policy: &DetectionPolicy,
    domains: &[Domain],
) -> Result<AttributionResult> {
    let Some(&first) = domains.first() else {
        return Err(Error::InvalidInput("no domains to attribute over".into()));
    };
    if reg.is_empty() {
        return Ok(no_match(first));
    }
    check_registry(x, reg, policy)?;
    let n = reg.n_bits;
    let mut best: Option<(AttributionResult, usize)> = None;
    let mut closest: Option<(AttributionResult, usize)> = None;
    for &domain in domains {
        let values = domain_values(x, domain)?;
        let found = attribute_values(&values, reg, policy, domain)?;
        let res = result_from(reg, policy, domain, found);
        let score = res.distance.min(n - res.distance);
        if res.is_match() {
            if best.as_ref().is_none_or(|(_, s)| score < *s) {
                best = Some((res, score));
            }
        } else if closest.as_ref().is_none_or(|(_, s)| score < *s) {
            closest = Some((res, score));
        }
    }
    Ok(best.or(closest).map(|(r, _)| r).expect("at least one domain evaluated"))
}

/// Whether `x` carries any registered watermark; uses all three domains when
/// every user has invariant-domain secrets.
pub fn detect(x: &ImageBuffer, reg: &Registry, policy: &DetectionPolicy) -> Result<bool> {
    if reg.is_empty() {
        return Ok(false);
    }
    let res = if reg.supports_invariants() {
        attribute3(x, reg, policy)?
    } else {
        attribute(x, reg, policy)?
    };
    Ok(res.is_match())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keygen::{build_registry, KeygenConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn extraction_rule() {
        assert_eq!(extract_bits(&[0.9, 0.1], &[(0, 1)]).unwrap().to_string(), "0");
        assert_eq!(extract_bits(&[0.1, 0.9], &[(0, 1)]).unwrap().to_string(), "1");
        assert_eq!(extract_bits(&[0.5, 0.5], &[(0, 1)]).unwrap().to_string(), "0");
        assert!(matches!(extract_bits(&[0.5], &[(0, 1)]), Err(Error::IndexOutOfRange { .. })));
    }

    #[test]
    fn double_tail_examples() {
        let p = DetectionPolicy::new(25, 75, 0.5).unwrap();
        assert!(double_tail_indicator(0, &p));
        assert!(double_tail_indicator(100, &p));
        assert!(!double_tail_indicator(50, &p));
        assert!(double_tail_indicator(25, &p) && double_tail_indicator(75, &p));
        assert!(!double_tail_indicator(26, &p) && !double_tail_indicator(74, &p));
    }

    /// Writes the user's watermark into an otherwise random image by
    /// setting each pair to (0.8, 0.2) or (0.2, 0.8).
    fn imprint(x: &mut ImageBuffer, reg: &Registry, user: usize) {
        let u = &reg.users[user];
        for (&(a, b), &bit) in u.secret.pixel_pairs.iter().zip(u.watermark.bits()) {
            let (va, vb) = if bit { (0.2, 0.8) } else { (0.8, 0.2) };
            x.pixels[a] = va;
            x.pixels[b] = vb;
        }
    }

    fn random_image(seed: u64) -> ImageBuffer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageBuffer::new(32, 32, 3, (0..32 * 32 * 3).map(|_| rng.gen()).collect()).unwrap()
    }

    #[test]
    fn attribute_finds_imprinted_user_and_negation() {
        let reg = build_registry(10, &KeygenConfig::pixel(100, (32, 32, 3), 4)).unwrap();
        let policy = DetectionPolicy::new(25, 75, 0.5).unwrap();
        let mut x = random_image(1);
        imprint(&mut x, &reg, 3);
        let res = attribute(&x, &reg, &policy).unwrap();
        assert_eq!(res.matched_user.as_deref(), Some("user-3"));
        assert_eq!(res.distance, 0);
        assert!(!res.inverted);

        let neg = x.with_pixels(x.pixels.iter().map(|v| 1.0 - v).collect());
        let res = attribute(&neg, &reg, &policy).unwrap();
        assert_eq!(res.matched_user.as_deref(), Some("user-3"));
        assert_eq!(res.distance, 100);
        assert!(res.inverted);
        assert!(detect(&neg, &reg, &policy).unwrap());
    }

    #[test]
    fn random_images_rarely_match() {
        let reg = build_registry(10, &KeygenConfig::pixel(100, (32, 32, 3), 8)).unwrap();
        let policy = DetectionPolicy::new(25, 75, 0.5).unwrap();
        // Union bound: 10 * two_tail(100, 0.5, 25, 75) ~ 5.6e-6 per image.
        let hits = (0..200)
            .filter(|&s| attribute(&random_image(100 + s), &reg, &policy).unwrap().is_match())
            .count();
        assert_eq!(hits, 0);
    }

    #[test]
    fn empty_registry_never_detects() {
        let reg = Registry::new(100, 0);
        let policy = DetectionPolicy::new(25, 75, 0.5).unwrap();
        assert!(!detect(&random_image(0), &reg, &policy).unwrap());
        assert!(!attribute(&random_image(0), &reg, &policy).unwrap().is_match());
    }

    #[test]
    fn ties_go_to_earlier_user() {
        let reg = build_registry(2, &KeygenConfig::pixel(4, (4, 4, 1), 1)).unwrap();
        let policy = DetectionPolicy::new(3, 4, 0.5).unwrap();
        // With tau1 = 3, tau2 = 4 and n = 4 every distance fires.
        let x = ImageBuffer::filled(4, 4, 1, 0.5).unwrap();
        let d0 = extract_domain(&x, &reg.users[0].secret.pixel_pairs, Domain::Pixel)
            .unwrap()
            .hamming_distance(&reg.users[0].watermark)
            .unwrap();
        let d1 = extract_domain(&x, &reg.users[1].secret.pixel_pairs, Domain::Pixel)
            .unwrap()
            .hamming_distance(&reg.users[1].watermark)
            .unwrap();
        let res = attribute(&x, &reg, &policy).unwrap();
        let expect = if d1.min(4 - d1) < d0.min(4 - d0) { "user-1" } else { "user-0" };
        assert_eq!(res.matched_user.as_deref(), Some(expect));
    }

    #[test]
    fn attribute3_requires_invariant_secrets() {
        let reg = build_registry(2, &KeygenConfig::pixel(10, (16, 16, 3), 1)).unwrap();
        let policy = DetectionPolicy::new(2, 8, 0.5).unwrap();
        let x = ImageBuffer::filled(16, 16, 3, 0.5).unwrap();
        assert!(matches!(attribute3(&x, &reg, &policy), Err(Error::MissingDomain(_))));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let reg = build_registry(1, &KeygenConfig::pixel(10, (16, 16, 3), 1)).unwrap();
        let policy = DetectionPolicy::new(2, 8, 0.5).unwrap();
        let x = ImageBuffer::filled(8, 8, 3, 0.5).unwrap();
        assert!(attribute(&x, &reg, &policy).is_err());
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    fn pairs_for(len: usize) -> Vec<IndexPair> {
        (0..len / 2).map(|i| (2 * i, 2 * i + 1)).collect()
    }

    proptest! {
        #[test]
        fn monotone_maps_preserve_bits(values in prop::collection::vec(0.01f64..0.99, 2..64), g in 0.5f64..2.0, c in 0.5f64..2.0) {
            let len = values.len() / 2 * 2;
            prop_assume!(len >= 2);
            let pairs = pairs_for(len);
            let base = extract_bits(&values, &pairs).unwrap();
            let gamma: Vec<f64> = values.iter().map(|v| v.powf(g)).collect();
            let contrast: Vec<f64> = values.iter().map(|v| v * c).collect();
            // Strictly increasing maps preserve strict order; ties stay ties.
            prop_assert_eq!(&extract_bits(&gamma, &pairs).unwrap(), &base);
            prop_assert_eq!(&extract_bits(&contrast, &pairs).unwrap(), &base);
        }

        #[test]
        fn negation_complements_untied_bits(values in prop::collection::vec(0.0f64..1.0, 2..64)) {
            let len = values.len() / 2 * 2;
            let pairs = pairs_for(len);
            prop_assume!(pairs.iter().all(|&(a, b)| values[a] != values[b]));
            let neg: Vec<f64> = values.iter().map(|v| -v).collect();
            prop_assert_eq!(extract_bits(&neg, &pairs).unwrap(), extract_bits(&values, &pairs).unwrap().complement());
        }
    }
}
