//! Procedural test images and the attack benchmark harness.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{apply_attack, AttackSpec};
use crate::certify::delta_profile;
use crate::embedding::{embed, EmbedConfig};
use crate::error::{Error, Result};
use crate::extraction::{attribute_over, extract_domain};
use crate::io::load_png;
use crate::keygen::load_registry;
use crate::model::{BitString, DetectionPolicy, Domain, ImageBuffer, Registry};
use crate::statistics::{abwe, fpr_report, psnr, solve_thresholds, ssim, FprReport};

pub const MIN_CORPUS_SIZE: usize = 32;
/// Generated channels are stretched onto this range.
pub const CORPUS_RANGE: (f64, f64) = (0.02, 0.98);
/// Weight given to invariant domains the config enables without a weight.
const DEFAULT_DOMAIN_WEIGHT: f64 = 0.9;
/// Label of the row measured on un-attacked watermarked images.
pub const GENERATION_ROW: &str = "none";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusStyle {
    /// Textures, gradients and hard-edged shapes in rotation.
    #[default]
    Mixed,
    /// Only low-frequency content; used where interpolation error matters.
    Smooth,
}

/// Bilinearly interpolated random lattice with `cells` cells per side.
fn value_noise(size: usize, cells: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let side = cells + 1;
    let lattice: Vec<f64> = (0..side * side).map(|_| rng.gen::<f64>()).collect();
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let mut out = Vec::with_capacity(size * size);
    for i in 0..size {
        let y = i as f64 / (size - 1) as f64 * cells as f64;
        let (y0, ty) = ((y.floor() as usize).min(cells - 1), smooth(y - (y.floor()).min((cells - 1) as f64)));
        for j in 0..size {
            let x = j as f64 / (size - 1) as f64 * cells as f64;
            let (x0, tx) = ((x.floor() as usize).min(cells - 1), smooth(x - (x.floor()).min((cells - 1) as f64)));
            let at = |r: usize, c: usize| lattice[r * side + c];
            let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
            let bottom = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

fn octaves(size: usize, cells: &[usize], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut acc = vec![0.0; size * size];
    let mut amp = 1.0;
    for &c in cells {
        for (a, v) in acc.iter_mut().zip(value_noise(size, c, rng)) {
            *a += amp * v;
        }
        amp *= 0.5;
    }
    acc
}

fn gradient(size: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let (s, c) = angle.sin_cos();
    (0..size * size)
        .map(|k| {
            let (i, j) = ((k / size) as f64 / size as f64, (k % size) as f64 / size as f64);
            c * j + s * i
        })
        .collect()
}

/// Paints a few discs and rectangles with random colors over `chans`.
fn composite_shapes(size: usize, chans: &mut [Vec<f64>], rng: &mut ChaCha8Rng) {
    for _ in 0..rng.gen_range(3..7) {
        let color: Vec<f64> = (0..chans.len()).map(|_| rng.gen_range(-0.5..1.5)).collect();
        let (cy, cx) = (rng.gen_range(0.0..size as f64), rng.gen_range(0.0..size as f64));
        let r = rng.gen_range(0.1..0.3) * size as f64;
        let disc = rng.gen_bool(0.5);
        for i in 0..size {
            for j in 0..size {
                let (dy, dx) = (i as f64 - cy, j as f64 - cx);
                let inside = if disc { dy * dy + dx * dx <= r * r } else { dy.abs() <= r && dx.abs() <= 0.6 * r };
                if inside {
                    for (ch, &col) in chans.iter_mut().zip(&color) {
                        ch[i * size + j] = col;
                    }
                }
            }
        }
    }
}

fn stretch(values: &mut [f64]) {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (a, b) = CORPUS_RANGE;
    for v in values.iter_mut() {
        *v = if hi > lo { a + (b - a) * (*v - lo) / (hi - lo) } else { 0.5 };
    }
}

fn generate_image(size: usize, style: CorpusStyle, kind: usize, rng: &mut ChaCha8Rng) -> Result<ImageBuffer> {
    let mut chans: Vec<Vec<f64>> = match (style, kind % 3) {
        (CorpusStyle::Smooth, _) => (0..3)
            .map(|_| {
                let g = gradient(size, rng);
                let n = octaves(size, &[2, 3], rng);
                g.iter().zip(n).map(|(a, b)| 0.6 * a + b).collect()
            })
            .collect(),
        (CorpusStyle::Mixed, 0) => (0..3).map(|_| octaves(size, &[2, 4, 8, 16], rng)).collect(),
        (CorpusStyle::Mixed, 1) => (0..3)
            .map(|_| {
                let g = gradient(size, rng);
                let n = octaves(size, &[4], rng);
                g.iter().zip(n).map(|(a, b)| a + 0.3 * b).collect()
            })
            .collect(),
        (CorpusStyle::Mixed, _) => {
            let mut chans: Vec<Vec<f64>> = (0..3).map(|_| octaves(size, &[2, 4], rng)).collect();
            composite_shapes(size, &mut chans, rng);
            chans
        }
    };
    for ch in chans.iter_mut() {
        stretch(ch);
    }
    let pixels = (0..size * size).flat_map(|k| chans.iter().map(move |ch| ch[k])).collect();
    ImageBuffer::new(size, size, 3, pixels)
}

/// Deterministic RGB corpus with every channel spanning `CORPUS_RANGE`.
pub fn generate_corpus(count: usize, size: usize, seed: u64) -> Result<Vec<ImageBuffer>> {
    generate_corpus_styled(count, size, seed, CorpusStyle::Mixed)
}

pub fn generate_corpus_styled(count: usize, size: usize, seed: u64, style: CorpusStyle) -> Result<Vec<ImageBuffer>> {
    if size < MIN_CORPUS_SIZE {
        return Err(Error::InvalidConfig(format!("corpus size must be at least {MIN_CORPUS_SIZE}, got {size}")));
    }
    (0..count).map(|i| corpus_image(size, seed, i, style)).collect()
}

/// Image `index` of the corpus with this seed, generated on its own.
pub fn corpus_image(size: usize, seed: u64, index: usize, style: CorpusStyle) -> Result<ImageBuffer> {
    if size < MIN_CORPUS_SIZE {
        return Err(Error::InvalidConfig(format!("corpus size must be at least {MIN_CORPUS_SIZE}, got {size}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    generate_image(size, style, index, &mut rng)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusSource {
    Dir(PathBuf),
    Procedural {
        count: usize,
        size: usize,
        seed: u64,
        #[serde(default)]
        style: CorpusStyle,
    },
}

impl CorpusSource {
    /// Directory images are read in file-name order.
    pub fn load(&self) -> Result<Vec<ImageBuffer>> {
        match self {
            CorpusSource::Procedural { count, size, seed, style } => {
                generate_corpus_styled(*count, *size, *seed, *style)
            }
            CorpusSource::Dir(dir) => {
                let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
                    .map(|e| e.map(|e| e.path()))
                    .collect::<std::io::Result<_>>()?;
                paths.retain(|p| {
                    p.extension()
                        .and_then(|e| e.to_str())
                        .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
                });
                paths.sort();
                paths.iter().map(|p| load_png(p)).collect()
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicySource {
    Fixed(DetectionPolicy),
    /// Thresholds solved for this registry-wide false-positive bound.
    TargetFpr { target_fpr: f64, p_null: f64 },
}

fn pixel_only() -> BTreeSet<Domain> {
    BTreeSet::from([Domain::Pixel])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub corpus: CorpusSource,
    pub registry_path: PathBuf,
    /// The clean row is always reported in addition to these.
    #[serde(default)]
    pub attacks: Vec<AttackSpec>,
    pub policy: PolicySource,
    #[serde(default = "pixel_only")]
    pub domains: BTreeSet<Domain>,
    /// Report prefix: `<path>.csv` and `<path>.json` are written.
    #[serde(default)]
    pub output_path: Option<PathBuf>,
    #[serde(default)]
    pub embed: Option<EmbedConfig>,
}

impl BenchConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            what: "bench config",
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub attack: String,
    /// Pixel-domain ABWE.
    pub abwe: f64,
    pub domain_abwe: BTreeMap<Domain, f64>,
    pub tpr_attribution: f64,
    pub tpr_detection: f64,
    /// Clean row: watermarked vs original. Attack rows: attacked vs watermarked.
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    /// Mean smallest half-gap of the evaluated image under its user's key.
    pub mean_certified_budget: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub images: usize,
    pub embed_failures: usize,
    pub policy: DetectionPolicy,
    pub fpr: FprReport,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn row(&self, attack: &str) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.attack == attack)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["attack", "abwe", "tpr_attr", "tpr_det", "psnr", "ssim", "cert_budget"])?;
        for r in &self.rows {
            w.write_record([
                r.attack.clone(),
                r.abwe.to_string(),
                r.tpr_attribution.to_string(),
                r.tpr_detection.to_string(),
                r.mean_psnr.to_string(),
                r.mean_ssim.to_string(),
                r.mean_certified_budget.to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::InvalidInput(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn write(&self, prefix: &Path) -> Result<()> {
        std::fs::write(prefix.with_extension("csv"), self.to_csv()?)?;
        std::fs::write(prefix.with_extension("json"), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// The embed config actually used for a domain set: enabled invariant
/// domains get a default weight when unweighted, disabled ones get zero.
pub fn embed_config_for(base: Option<&EmbedConfig>, domains: &BTreeSet<Domain>) -> EmbedConfig {
    let mut cfg = base.cloned().unwrap_or_default();
    for (domain, weight) in [(Domain::Freq, &mut cfg.lambda_t), (Domain::Mellin, &mut cfg.lambda_r)] {
        if !domains.contains(&domain) {
            *weight = 0.0;
        } else if *weight <= 0.0 {
            *weight = DEFAULT_DOMAIN_WEIGHT;
        }
    }
    cfg
}

pub fn resolve_policy(source: &PolicySource, reg: &Registry, domains: usize) -> Result<DetectionPolicy> {
    match *source {
        PolicySource::Fixed(p) => {
            p.validate_for(reg.n_bits)?;
            Ok(p)
        }
        PolicySource::TargetFpr { target_fpr, p_null } => {
            let (t1, t2) = solve_thresholds(reg.n_bits, p_null, reg.len().max(1), target_fpr, domains)?;
            DetectionPolicy::new(t1, t2, p_null)
        }
    }
}

/// Thread pool honoring `STA_THREADS`.
fn pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = std::env::var("STA_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        builder = builder.num_threads(n.max(1));
    }
    builder.build().map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))
}

/// Per-image measurements for one row.
#[derive(Clone, Debug)]
struct Sample {
    extracted: BTreeMap<Domain, BitString>,
    attributed: bool,
    detected: bool,
    psnr: f64,
    ssim: f64,
    cert: f64,
}

struct Prepared {
    user: usize,
    watermarked: ImageBuffer,
    original: ImageBuffer,
}

fn measure(
    x: &ImageBuffer,
    reference: &ImageBuffer,
    user: usize,
    reg: &Registry,
    policy: &DetectionPolicy,
    domains: &[Domain],
) -> Result<Sample> {
    let record = &reg.users[user];
    let mut extracted = BTreeMap::new();
    for &d in domains {
        extracted.insert(d, extract_domain(x, record.secret.require(d)?, d)?);
    }
    let res = attribute_over(x, reg, policy, domains)?;
    Ok(Sample {
        extracted,
        attributed: res.matched_user.as_deref() == Some(record.user_id.as_str()),
        detected: res.is_match(),
        psnr: psnr(x, reference)?,
        ssim: ssim(x, reference)?,
        cert: delta_profile(x, &record.secret.pixel_pairs)?.min(),
    })
}

/// Mean that ignores infinite PSNR of unchanged images.
fn finite_mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.filter(|v| v.is_finite()).fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::INFINITY
    } else {
        sum / n as f64
    }
}

fn summarize(attack: String, samples: &[Sample], truth: &[&BitString], domains: &[Domain]) -> Result<BenchRow> {
    let n = samples.len().max(1) as f64;
    let mut domain_abwe = BTreeMap::new();
    for &d in domains {
        let got: Vec<BitString> = samples.iter().map(|s| s.extracted[&d].clone()).collect();
        let gt: Vec<BitString> = truth.iter().map(|b| (*b).clone()).collect();
        domain_abwe.insert(d, if got.is_empty() { 0.0 } else { abwe(&gt, &got)? });
    }
    Ok(BenchRow {
        attack,
        abwe: domain_abwe[&Domain::Pixel],
        domain_abwe,
        tpr_attribution: samples.iter().filter(|s| s.attributed).count() as f64 / n,
        tpr_detection: samples.iter().filter(|s| s.detected).count() as f64 / n,
        mean_psnr: finite_mean(samples.iter().map(|s| s.psnr)),
        mean_ssim: samples.iter().map(|s| s.ssim).sum::<f64>() / n,
        mean_certified_budget: samples.iter().map(|s| s.cert).sum::<f64>() / n,
    })
}

/// Embeds every image for a round-robin user, then evaluates the clean row
/// and every attack. Embedding failures are counted; the images still enter
/// every row.
pub fn evaluate_corpus(
    images: &[ImageBuffer],
    reg: &Registry,
    attacks: &[AttackSpec],
    policy: DetectionPolicy,
    domains: &BTreeSet<Domain>,
    embed_cfg: &EmbedConfig,
) -> Result<BenchReport> {
    if reg.is_empty() {
        return Err(Error::InvalidConfig("registry has no users".into()));
    }
    if !domains.contains(&Domain::Pixel) {
        return Err(Error::InvalidConfig("the pixel domain is always evaluated".into()));
    }
    let domains: Vec<Domain> = domains.iter().copied().collect();
    let pool = pool()?;
    let prepared: Vec<(Prepared, bool)> = pool.install(|| {
        images
            .par_iter()
            .enumerate()
            .map(|(i, x0)| {
                let user = i % reg.len();
                let (watermarked, report) = embed(x0, &reg.users[user], embed_cfg)?;
                Ok((Prepared { user, watermarked, original: x0.clone() }, report.success))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let embed_failures = prepared.iter().filter(|(_, ok)| !ok).count();
    let truth: Vec<&BitString> = prepared.iter().map(|(p, _)| &reg.users[p.user].watermark).collect();

    let clean: Vec<Sample> = pool.install(|| {
        prepared
            .par_iter()
            .map(|(p, _)| measure(&p.watermarked, &p.original, p.user, reg, &policy, &domains))
            .collect::<Result<_>>()
    })?;
    let mut rows = vec![summarize(GENERATION_ROW.to_string(), &clean, &truth, &domains)?];
    for spec in attacks {
        let samples: Vec<Sample> = pool.install(|| {
            prepared
                .par_iter()
                .enumerate()
                .map(|(i, (p, _))| {
                    // Each image gets its own draw of the attack's random parameters.
                    let spec = AttackSpec { seed: spec.seed.wrapping_add(i as u64), ..spec.clone() };
                    let attacked = apply_attack(&p.watermarked, &spec)?;
                    measure(&attacked, &p.watermarked, p.user, reg, &policy, &domains)
                })
                .collect::<Result<_>>()
        })?;
        rows.push(summarize(spec.label(), &samples, &truth, &domains)?);
    }
    Ok(BenchReport {
        images: images.len(),
        embed_failures,
        policy,
        fpr: fpr_report(reg.n_bits, policy.p_null, reg.len(), policy.tau1, policy.tau2)?,
        rows,
    })
}

/// Loads corpus and registry, runs the benchmark and writes the report when
/// an output path is configured.
pub fn run_benchmark(cfg: &BenchConfig) -> Result<BenchReport> {
    let images = cfg.corpus.load()?;
    let reg = load_registry(&cfg.registry_path)?;
    let policy = resolve_policy(&cfg.policy, &reg, cfg.domains.len())?;
    let embed_cfg = embed_config_for(cfg.embed.as_ref(), &cfg.domains);
    let report = evaluate_corpus(&images, &reg, &cfg.attacks, policy, &cfg.domains, &embed_cfg)?;
    if let Some(prefix) = &cfg.output_path {
        report.write(prefix)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::AttackKind;
    use crate::keygen::{build_registry, persist_registry, KeygenConfig};

    #[test]
    fn corpus_is_deterministic_and_spread() {
        let a = generate_corpus(3, 64, 7).unwrap();
        assert_eq!(a, generate_corpus(3, 64, 7).unwrap());
        assert_ne!(a, generate_corpus(3, 64, 8).unwrap());
        for style in [CorpusStyle::Mixed, CorpusStyle::Smooth] {
            for img in generate_corpus_styled(6, 32, 3, style).unwrap() {
                for k in 0..3 {
                    let ch: Vec<f64> = img.pixels.iter().skip(k).step_by(3).copied().collect();
                    let lo = ch.iter().cloned().fold(f64::INFINITY, f64::min);
                    let hi = ch.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    assert!(lo >= 0.0 && hi <= 1.0);
                    assert!(hi - lo >= 0.5, "{style:?} channel {k} spread {}", hi - lo);
                }
            }
        }
        assert!(generate_corpus(1, 31, 0).is_err());
    }

    #[test]
    fn config_json_defaults() {
        let cfg = BenchConfig::from_json(
            r#"{"corpus":{"procedural":{"count":2,"size":32,"seed":1}},
                "registry_path":"reg.json",
                "policy":{"target_fpr":{"target_fpr":1e-6,"p_null":0.5}}}"#,
        )
        .unwrap();
        assert_eq!(cfg.domains, pixel_only());
        assert!(cfg.attacks.is_empty() && cfg.embed.is_none());
        assert!(matches!(BenchConfig::from_json("{"), Err(Error::Parse { .. })));
    }

    #[test]
    fn embed_config_follows_domains() {
        let all: BTreeSet<Domain> = Domain::ALL.into_iter().collect();
        let cfg = embed_config_for(None, &all);
        assert_eq!((cfg.lambda_t, cfg.lambda_r), (0.9, 0.9));
        let cfg = embed_config_for(Some(&EmbedConfig::triple()), &pixel_only());
        assert_eq!((cfg.lambda_t, cfg.lambda_r), (0.0, 0.0));
    }

    #[test]
    fn small_benchmark_runs_end_to_end() {
        let dir = tempfile::tempdir().unwrap();
        let reg_path = dir.path().join("reg.json");
        persist_registry(&build_registry(2, &KeygenConfig::pixel(32, (32, 32, 3), 5)).unwrap(), &reg_path).unwrap();
        let cfg = BenchConfig {
            corpus: CorpusSource::Procedural { count: 3, size: 32, seed: 2, style: CorpusStyle::Mixed },
            registry_path: reg_path,
            attacks: vec![
                AttackSpec::new(AttackKind::Gamma, 1),
                AttackSpec::new(AttackKind::ContrastNeg, 1).with("c", -1.0),
            ],
            policy: PolicySource::Fixed(DetectionPolicy::new(4, 28, 0.5).unwrap()),
            domains: pixel_only(),
            output_path: Some(dir.path().join("report")),
            embed: None,
        };
        let report = run_benchmark(&cfg).unwrap();
        assert_eq!(report.rows.len(), 3);
        assert_eq!(report.embed_failures, 0);
        let clean = report.row(GENERATION_ROW).unwrap();
        assert_eq!(clean.abwe, 0.0);
        assert_eq!(clean.tpr_attribution, 1.0);
        let neg = &report.rows[2];
        assert_eq!(neg.abwe, 1.0);
        assert_eq!(neg.tpr_attribution, 1.0);
        for r in &report.rows {
            assert!(r.tpr_detection >= r.tpr_attribution);
        }
        let csv = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
        assert!(csv.starts_with("attack,abwe,tpr_attr,tpr_det,psnr,ssim,cert_budget\n"));
        assert_eq!(csv.lines().count(), 4);
        assert_eq!(run_benchmark(&cfg).unwrap(), report);
    }
}
