//! `sta`: issue keys, embed, extract, attribute, attack, certify, benchmark.
//!
//! Exit codes: 0 on success, 1 when the operation itself fails (bad input
//! files, shape mismatches, unreachable thresholds), 2 on usage errors.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use sta_core::attacks::{apply_attack, AttackSpec};
use sta_core::bench::{resolve_policy, run_benchmark, BenchConfig, PolicySource};
use sta_core::certify::{certify, delta_profile};
use sta_core::embedding::{embed, EmbedConfig};
use sta_core::extraction::{attribute_over, extract_domain};
use sta_core::io::{load_png, save_png};
use sta_core::keygen::{build_registry, load_registry, persist_registry, KeygenConfig};
use sta_core::{DetectionPolicy, Domain, Registry, UserRecord};

#[derive(Parser)]
#[command(name = "sta", version, about = "Pairwise-sign image watermarking")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Issue keys for a number of users and write the registry.
    Keygen {
        #[arg(long)]
        users: usize,
        #[arg(long, default_value_t = 100)]
        bits: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
        /// Comma-separated subset of pixel,freq,mellin.
        #[arg(long, default_value = "pixel", value_delimiter = ',')]
        domains: Vec<Domain>,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Embed a user's watermark into a PNG.
    Embed {
        #[command(flatten)]
        key: UserKey,
        #[arg(long)]
        image: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// Also embed into the translation- and rotation-invariant domains.
        #[arg(long)]
        triple: bool,
        /// Embedding config as JSON; missing fields take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Where to write the embedding report; printed otherwise.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Print the bit string a user's key reads from an image.
    Extract {
        #[command(flatten)]
        key: UserKey,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value = "pixel")]
        domain: Domain,
    },
    /// Find which registered user, if any, watermarked an image.
    Attribute(Query),
    /// Report whether an image carries any registered watermark.
    Detect(Query),
    /// Apply one attack and write the result.
    Attack {
        #[arg(long)]
        image: PathBuf,
        /// Attack spec as inline JSON or a path to a JSON file.
        #[arg(long)]
        spec: String,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Certificate of how many bits an l-infinity budget can flip.
    Certify {
        #[command(flatten)]
        key: UserKey,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        budget: f64,
    },
    /// Run the attack benchmark described by a config file.
    Bench {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Args)]
struct UserKey {
    #[arg(long)]
    registry: PathBuf,
    #[arg(long)]
    user: String,
}

#[derive(Args)]
struct Query {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    registry: PathBuf,
    /// Fixed lower threshold; requires --tau2.
    #[arg(long, requires = "tau2")]
    tau1: Option<usize>,
    #[arg(long, requires = "tau1")]
    tau2: Option<usize>,
    /// Registry-wide false-positive bound used to solve the thresholds.
    #[arg(long, default_value_t = 1e-6)]
    target_fpr: f64,
    #[arg(long, default_value_t = 0.5)]
    p_null: f64,
    /// Use all three domains (the registry must carry invariant secrets).
    #[arg(long)]
    triple: bool,
}

fn user<'a>(reg: &'a Registry, id: &str) -> Result<&'a UserRecord> {
    reg.user(id).with_context(|| format!("user {id:?} is not in the registry"))
}

fn read_json_arg(arg: &str) -> Result<String> {
    if arg.trim_start().starts_with('{') {
        Ok(arg.to_string())
    } else {
        std::fs::read_to_string(arg).with_context(|| format!("reading {arg}"))
    }
}

fn emit(value: serde_json::Value, to: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(&value)?;
    match to {
        Some(path) => std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))?,
        None => println!("{text}"),
    }
    Ok(())
}

fn query_setup(q: &Query) -> Result<(sta_core::ImageBuffer, Registry, DetectionPolicy, Vec<Domain>)> {
    let image = load_png(&q.image).with_context(|| format!("reading {}", q.image.display()))?;
    let reg = load_registry(&q.registry)?;
    let domains = if q.triple { Domain::ALL.to_vec() } else { vec![Domain::Pixel] };
    if q.triple && !reg.supports_invariants() {
        bail!("--triple needs a registry with freq and mellin secrets");
    }
    let source = match (q.tau1, q.tau2) {
        (Some(t1), Some(t2)) => PolicySource::Fixed(DetectionPolicy::new(t1, t2, q.p_null)?),
        _ => PolicySource::TargetFpr { target_fpr: q.target_fpr, p_null: q.p_null },
    };
    let policy = resolve_policy(&source, &reg, domains.len())?;
    Ok((image, reg, policy, domains))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Keygen { users, bits, seed, height, width, domains, output } => {
            let mut cfg = KeygenConfig::pixel(bits, (height, width, 3), seed);
            cfg.domains.extend(domains);
            let reg = build_registry(users, &cfg)?;
            persist_registry(&reg, &output)?;
            eprintln!("wrote {} users to {}", reg.len(), output.display());
        }
        Command::Embed { key, image, output, triple, config, report } => {
            let reg = load_registry(&key.registry)?;
            let record = user(&reg, &key.user)?;
            let mut cfg: EmbedConfig = match &config {
                Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)
                    .with_context(|| format!("parsing {}", path.display()))?,
                None => EmbedConfig::default(),
            };
            if triple {
                let t = EmbedConfig::triple();
                cfg.lambda_t = t.lambda_t;
                cfg.lambda_r = t.lambda_r;
            }
            let x0 = load_png(&image).with_context(|| format!("reading {}", image.display()))?;
            let (x, rep) = embed(&x0, record, &cfg)?;
            save_png(&output, &x)?;
            emit(serde_json::to_value(&rep)?, report.as_deref())?;
        }
        Command::Extract { key, image, domain } => {
            let reg = load_registry(&key.registry)?;
            let record = user(&reg, &key.user)?;
            let x = load_png(&image).with_context(|| format!("reading {}", image.display()))?;
            println!("{}", extract_domain(&x, record.secret.require(domain)?, domain)?);
        }
        Command::Attribute(q) => {
            let (x, reg, policy, domains) = query_setup(&q)?;
            let res = attribute_over(&x, &reg, &policy, &domains)?;
            emit(json!({ "result": res, "policy": policy }), None)?;
        }
        Command::Detect(q) => {
            let (x, reg, policy, domains) = query_setup(&q)?;
            let res = attribute_over(&x, &reg, &policy, &domains)?;
            emit(json!({ "detected": res.is_match(), "policy": policy }), None)?;
        }
        Command::Attack { image, spec, output } => {
            let spec = AttackSpec::from_json(&read_json_arg(&spec)?)?;
            let x = load_png(&image).with_context(|| format!("reading {}", image.display()))?;
            save_png(&output, &apply_attack(&x, &spec)?)?;
        }
        Command::Certify { key, image, budget } => {
            if budget.is_nan() || budget < 0.0 {
                bail!("budget must be non-negative");
            }
            let reg = load_registry(&key.registry)?;
            let record = user(&reg, &key.user)?;
            let x = load_png(&image).with_context(|| format!("reading {}", image.display()))?;
            emit(serde_json::to_value(certify(&delta_profile(&x, &record.secret.pixel_pairs)?, budget))?, None)?;
        }
        Command::Bench { config } => {
            let cfg = BenchConfig::from_json(&std::fs::read_to_string(&config)?)?;
            let report = run_benchmark(&cfg)?;
            print!("{}", report.to_csv()?);
            let domains: BTreeSet<&str> = cfg.domains.iter().map(|d| d.name()).collect();
            eprintln!(
                "{} images, {} embedding failures, domains {:?}, tau = ({}, {})",
                report.images, report.embed_failures, domains, report.policy.tau1, report.policy.tau2
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
