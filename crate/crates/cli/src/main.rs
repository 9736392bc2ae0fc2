use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use wind_core::attacks::{apply, AttackContext, AttackSpec, PatternEstimate};
use wind_core::channel::{calibrate, CalibrationTargets, Channel, ChannelImage, SyntheticChannel};
use wind_core::codebook::{CodebookSpec, Salt};
use wind_core::config::WindConfig;
use wind_core::detector::{default_l2_gate, Detector, Variant};
use wind_core::group_identifier::{calibrate_amplitude, embed};
use wind_core::harness::{run_regeneration_curve, run_robustness, run_separation, run_steganalysis, trial_seed, write_outputs, Bench};
use wind_core::sim_index::SketchIndex;
use wind_core::store::{now_secs, query_log, read_log, GenerationRecord, LogQuery, LogWriter};
use wind_core::tensor::LatentTensor;
use wind_core::Error;

#[derive(Parser)]
#[command(name = "wind", version, about = "Initial-noise watermarking: generate, detect, attack, benchmark")]
struct Cli {
    /// Configuration file.
    #[arg(long, global = true, default_value = "wind.toml")]
    config: PathBuf,
    /// Run seed. Commands that draw randomness are reproducible under a fixed seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a fresh configuration with a random salt.
    Init(InitArgs),
    /// Generate watermarked latents and log them.
    Gen(GenArgs),
    /// Detect a watermark. Exit status 0 = watermarked, 1 = not, 2 = error.
    Detect(DetectArgs),
    /// Apply an attack to a latent file.
    Attack(AttackArgs),
    /// Build the sketch index named by `index_path`.
    Index,
    /// Run the evaluation experiments.
    Bench(BenchArgs),
    /// Fit channel parameters and the ring amplitude, then rewrite the config.
    Calibrate(CalibrateArgs),
    /// Query the generation log.
    Log(LogArgs),
}

#[derive(Args)]
struct InitArgs {
    #[arg(long)]
    n: u64,
    #[arg(long)]
    m: u64,
    /// Salt as hex (at least 32 bytes); random when omitted.
    #[arg(long)]
    salt_hex: Option<String>,
    /// Store the salt in this file instead of inline.
    #[arg(long)]
    salt_file: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = 1)]
    count: u64,
    #[arg(long)]
    out_dir: PathBuf,
    /// Prompt label; only its hash is logged.
    #[arg(long)]
    label: Option<String>,
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Fast,
    Full,
}

#[derive(Args)]
struct DetectArgs {
    path: PathBuf,
    #[arg(long, value_enum, default_value = "full")]
    variant: VariantArg,
    /// Channel nonce for inversion (default: derived from the file contents).
    #[arg(long)]
    nonce: Option<u64>,
}

#[derive(Args)]
struct AttackArgs {
    path: PathBuf,
    /// e.g. rotate:75, jpeg:25, cropscale:0.75, blur:8, noise:0.1, bright:6,
    /// regen:10, steg:forge:512, steg:remove:512, reconforge
    #[arg(long)]
    spec: String,
    #[arg(long)]
    out: PathBuf,
    /// Pattern estimate tensor for steganalysis attacks.
    #[arg(long)]
    estimate: Option<PathBuf>,
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Experiment {
    Robustness,
    Separation,
    Steganalysis,
    Regeneration,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value = "bench_out")]
    out_dir: PathBuf,
    #[arg(long, value_enum, value_delimiter = ',', default_values = ["robustness", "separation", "steganalysis", "regeneration"])]
    experiments: Vec<Experiment>,
    #[arg(long, default_value_t = 100)]
    trials: u64,
    #[arg(long, default_value_t = 10_000)]
    null_trials: u64,
    #[arg(long, default_value_t = 512)]
    k_pairs: usize,
    #[arg(long, default_value_t = 50)]
    max_iters: u32,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long, default_value_t = 500)]
    trials: usize,
}

#[derive(Args)]
struct LogArgs {
    #[arg(long, conflicts_with_all = ["from", "to"])]
    index: Option<u64>,
    #[arg(long)]
    from: Option<u64>,
    #[arg(long)]
    to: Option<u64>,
    #[arg(long)]
    log: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: &Cli) -> wind_core::Result<u8> {
    match &cli.cmd {
        Cmd::Init(a) => cmd_init(cli, a),
        Cmd::Gen(a) => cmd_gen(cli, a),
        Cmd::Detect(a) => cmd_detect(cli, a),
        Cmd::Attack(a) => cmd_attack(cli, a),
        Cmd::Index => cmd_index(cli),
        Cmd::Bench(a) => cmd_bench(cli, a),
        Cmd::Calibrate(a) => cmd_calibrate(cli, a),
        Cmd::Log(a) => cmd_log(cli, a),
    }
}

fn default_log(cli: &Cli, explicit: &Option<PathBuf>) -> PathBuf {
    explicit.clone().unwrap_or_else(|| {
        let dir = cli.config.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        dir.join("generations.jsonl")
    })
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string(v).unwrap_or_default());
}

fn load_index(cfg: &WindConfig, spec: &CodebookSpec) -> wind_core::Result<Option<SketchIndex>> {
    match &cfg.index_path {
        Some(p) if p.exists() => SketchIndex::load(p, spec).map(Some),
        _ => Ok(None),
    }
}

fn cmd_init(cli: &Cli, a: &InitArgs) -> wind_core::Result<u8> {
    if cli.config.exists() && !a.force {
        return Err(Error::Config(format!("{} exists; pass --force to overwrite", cli.config.display())));
    }
    let salt = match &a.salt_hex {
        Some(h) => Salt::from_hex(h)?,
        None => {
            let mut bytes = vec![0u8; 32];
            rand::rng().fill_bytes(&mut bytes);
            Salt::new(bytes)?
        }
    };
    let mut cfg = WindConfig::new(a.n, a.m, &salt);
    if let Some(f) = &a.salt_file {
        std::fs::write(f, salt.to_hex()).map_err(|e| Error::Io { path: f.clone(), source: e })?;
        cfg.salt_hex = None;
        cfg.salt_file = Some(f.clone());
    }
    cfg.index_path = Some(PathBuf::from("wind.index"));
    cfg.codebook()?;
    cfg.geometry()?;
    cfg.save(&cli.config)?;
    print_json(&serde_json::json!({ "config": cli.config, "n": a.n, "m": a.m, "fingerprint": cfg.fingerprint()? }));
    Ok(0)
}

fn cmd_gen(cli: &Cli, a: &GenArgs) -> wind_core::Result<u8> {
    let cfg = WindConfig::load(&cli.config)?;
    let spec = cfg.codebook()?;
    let geo = cfg.geometry()?;
    let ch = SyntheticChannel::new(cfg.channel_params()?)?;
    let fingerprint = cfg.fingerprint()?;
    let run_seed = cli.seed.unwrap_or_else(|| rand::rng().random());
    let mut rng = ChaCha8Rng::seed_from_u64(run_seed);
    let label_hash = a.label.as_ref().map(|l| hex::encode(Sha256::digest(l.as_bytes())));
    std::fs::create_dir_all(&a.out_dir).map_err(|e| Error::Io { path: a.out_dir.clone(), source: e })?;
    let mut log = LogWriter::open(&default_log(cli, &a.log))?;
    if log.repaired_tail > 0 {
        eprintln!("warning: dropped {} bytes of a torn record at the end of the log", log.repaired_tail);
    }
    for k in 0..a.count {
        let i = rng.random_range(0..spec.n);
        let nonce = trial_seed(run_seed, "gen", k);
        let g = spec.group_of(i);
        let img = ch.generate(&embed(&spec.noise(i)?, g, spec.m, &geo)?, nonce)?;
        let path = a.out_dir.join(format!("gen_{k:06}.wndt"));
        img.data.save(&path)?;
        let rec = log.append(GenerationRecord {
            timestamp: now_secs(),
            seq: 0,
            index: i,
            group: g,
            nonce,
            attack: None,
            fingerprint: fingerprint.clone(),
            label_hash: label_hash.clone(),
            path: Some(path.display().to_string()),
        })?;
        print_json(&serde_json::json!({ "path": path, "index": i, "group": g, "seq": rec.seq, "run_seed": run_seed }));
    }
    Ok(0)
}

/// A nonce that depends only on the tensor's contents.
fn content_nonce(t: &LatentTensor) -> u64 {
    let mut h = Sha256::new();
    for v in t.as_slice() {
        h.update(v.to_le_bytes());
    }
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

fn cmd_detect(cli: &Cli, a: &DetectArgs) -> wind_core::Result<u8> {
    let cfg = WindConfig::load(&cli.config)?;
    let spec = cfg.codebook()?;
    let ch = SyntheticChannel::new(cfg.channel_params()?)?;
    let variant = match a.variant {
        VariantArg::Fast => Variant::Fast,
        VariantArg::Full => Variant::Full,
    };
    let index = load_index(&cfg, &spec)?;
    let det = Detector::new(&spec, cfg.geometry()?, cfg.detection(variant)?, &ch, index.as_ref())?;
    let img = ChannelImage::new(LatentTensor::load(&a.path)?)?;
    let nonce = a.nonce.unwrap_or_else(|| content_nonce(&img.data));
    let r = det.detect(&img, nonce)?;
    let mut rec = r.to_record();
    rec["path"] = serde_json::json!(a.path);
    print_json(&rec);
    Ok(if r.is_watermarked() { 0 } else { 1 })
}

fn cmd_attack(cli: &Cli, a: &AttackArgs) -> wind_core::Result<u8> {
    let cfg = WindConfig::load(&cli.config)?;
    let ch = SyntheticChannel::new(cfg.channel_params()?)?;
    let spec: AttackSpec = a.spec.parse()?;
    let img = ChannelImage::new(LatentTensor::load(&a.path)?)?;
    let estimate = match &a.estimate {
        Some(p) => Some(PatternEstimate {
            data: LatentTensor::load(p)?,
            k: 0,
        }),
        None => None,
    };
    let seed = cli.seed.unwrap_or(0);
    let ctx = AttackContext {
        channel: &ch,
        params: ch.params,
        estimate: estimate.as_ref(),
    };
    let out = apply(&img, &spec, seed, &ctx)?;
    out.data.save(&a.out)?;

    // provenance: log the derived file against the source's record
    let log_path = default_log(cli, &a.log);
    let source = a.path.display().to_string();
    let parent = read_log(&log_path)?.records.into_iter().rev().find(|r| r.path.as_deref() == Some(source.as_str()));
    let logged = match parent {
        Some(p) => {
            let mut log = LogWriter::open(&log_path)?;
            let attack = match &p.attack {
                Some(prev) => format!("{prev}+{spec}"),
                None => spec.to_string(),
            };
            log.append(GenerationRecord {
                timestamp: now_secs(),
                seq: 0,
                attack: Some(attack),
                nonce: seed,
                path: Some(a.out.display().to_string()),
                ..p
            })?;
            true
        }
        None => false,
    };
    print_json(&serde_json::json!({ "path": a.out, "attack": spec.to_string(), "seed": seed, "logged": logged }));
    Ok(0)
}

fn cmd_index(cli: &Cli) -> wind_core::Result<u8> {
    let cfg = WindConfig::load(&cli.config)?;
    let spec = cfg.codebook()?;
    let path = cfg
        .index_path
        .clone()
        .ok_or_else(|| Error::Config("index_path is not set".into()))?;
    let t = Instant::now();
    let idx = SketchIndex::build(&spec, cfg.k_dims, cfg.projection_seed)?;
    idx.save(&path)?;
    print_json(&serde_json::json!({ "path": path, "n": spec.n, "k_dims": cfg.k_dims, "secs": t.elapsed().as_secs_f64() }));
    Ok(0)
}

fn cmd_bench(cli: &Cli, a: &BenchArgs) -> wind_core::Result<u8> {
    let cfg = WindConfig::load(&cli.config)?;
    let spec = cfg.codebook()?;
    let index = load_index(&cfg, &spec)?;
    let bench = Bench {
        spec: &spec,
        geometry: cfg.geometry()?,
        channel: SyntheticChannel::new(cfg.channel_params()?)?,
        index: index.as_ref(),
        run_seed: cli.seed.unwrap_or(0),
    };
    let det = cfg.detection(Variant::Full)?;
    let mut reports = Vec::new();
    for e in &a.experiments {
        let t = Instant::now();
        let r = match e {
            Experiment::Robustness => {
                let mut attacks = vec![None];
                attacks.extend(AttackSpec::battery().into_iter().map(Some));
                run_robustness(&bench, &det, &[Variant::Fast, Variant::Full], &attacks, a.trials)?
            }
            Experiment::Separation => run_separation(&bench, a.trials.max(2), a.null_trials, cfg.tau_cos)?,
            Experiment::Steganalysis => run_steganalysis(&bench, &det, a.k_pairs, a.trials)?,
            Experiment::Regeneration => {
                let checkpoints: Vec<u32> = [1, 10, 20, 30, 40, 50].into_iter().filter(|&c| c <= a.max_iters).collect();
                run_regeneration_curve(&bench, &det, a.max_iters, &checkpoints, a.trials.max(2))?
            }
        };
        eprintln!("{} done in {:.1}s", r.experiment, t.elapsed().as_secs_f64());
        print_json(&serde_json::json!({ "experiment": r.experiment, "rows": r.rows, "summary": r.summary }));
        reports.push(r);
    }
    write_outputs(&reports, &a.out_dir)?;
    Ok(0)
}

fn cmd_calibrate(cli: &Cli, a: &CalibrateArgs) -> wind_core::Result<u8> {
    let mut cfg = WindConfig::load(&cli.config)?;
    let shape = cfg.shape();
    let seed = cli.seed.unwrap_or(0);
    let (params, report) = calibrate(cfg.channel_params()?, &CalibrationTargets::default(), shape, a.trials, seed)?;
    let geo = calibrate_amplitude(shape, cfg.m, cfg.geometry()?, a.trials.min(200), seed)?;
    cfg.set_channel_params(&params);
    cfg.amplitude = geo.amplitude;
    cfg.l2_gate = default_l2_gate(shape.len());
    cfg.save(&cli.config)?;
    print_json(&serde_json::json!({ "channel": params, "report": report, "amplitude": geo.amplitude, "l2_gate": cfg.l2_gate }));
    Ok(0)
}

fn cmd_log(cli: &Cli, a: &LogArgs) -> wind_core::Result<u8> {
    let path = default_log(cli, &a.log);
    let contents = read_log(&path)?;
    if contents.truncated_tail > 0 {
        eprintln!("warning: ignoring {} bytes of a torn record at the end of the log", contents.truncated_tail);
    }
    let q = match a.index {
        Some(i) => LogQuery::Index(i),
        None => LogQuery::Time(a.from.unwrap_or(0)..=a.to.unwrap_or(u64::MAX)),
    };
    for r in query_log(&path, &q)? {
        print_json(&serde_json::to_value(&r)?);
    }
    Ok(0)
}
