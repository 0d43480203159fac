//! `catssl`: pre-training, gradient checks, probing and checkpoint inspection.
//!
//! Exit codes: 0 ok, 1 usage, 2 validation (bad config, failed gradcheck),
//! 3 divergence, 4 I/O or file format.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use catssl::audio::{make_synth_corpus, write_corpus, SynthConfig};
use catssl::checkpoint::read_header;
use catssl::config::{RunConfig, TargetEncoder};
use catssl::external::write_embeddings;
use catssl::gradcheck::{gradcheck, GradcheckOptions};
use catssl::numerics::BackwardMutation;
use catssl::train::{
    embed_dataset, pretrain, probe_checkpoint, target_encoder, Dataset, PretrainOptions,
};
use clap::{Args, Parser, Subcommand, ValueEnum};

const DEFAULT_CONFIG: &str = "cat.toml";

#[derive(Parser, Debug)]
#[command(
    name = "catssl",
    version,
    about = "Multi-resolution audio transformer pre-training"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pre-train from scratch or resume a run.
    Pretrain(PretrainArgs),
    /// Compare whole-model gradients with finite differences (always f64).
    Gradcheck(GradcheckArgs),
    /// Linear probe on frozen encoder features from a checkpoint.
    Probe(ProbeArgs),
    /// Write target embeddings for every clip of a corpus.
    EmbedTargets(EmbedArgs),
    /// Generate the 4-class synthetic corpus.
    MakeSynthCorpus(SynthArgs),
    /// Summarize a checkpoint.
    Inspect(InspectArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    /// 8x8 input, hidden 16.
    Tiny,
    /// 32x32 input, hidden 32.
    Desk,
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// Run configuration file. Without it, `cat.toml` in the config
    /// directory is used when present, otherwise built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,

    #[arg(long, env = "CAT_CONFIG_DIR", default_value = ".")]
    config_dir: PathBuf,

    /// Built-in configuration used when no file is found.
    #[arg(long, value_enum, default_value_t = Preset::Tiny)]
    preset: Preset,

    /// Overrides `corpus_dir`.
    #[arg(long)]
    corpus: Option<PathBuf>,

    /// Overrides `output_dir`.
    #[arg(long)]
    output: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => {
                let path = self.config_dir.join(DEFAULT_CONFIG);
                if path.exists() {
                    RunConfig::load(&path)?
                } else {
                    match self.preset {
                        Preset::Tiny => RunConfig::default(),
                        Preset::Desk => RunConfig::desk(),
                    }
                }
            }
        };
        if let Some(c) = &self.corpus {
            cfg.corpus_dir = c.clone();
        }
        if let Some(o) = &self.output {
            cfg.output_dir = o.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct PretrainArgs {
    #[command(flatten)]
    config: ConfigArgs,

    /// Continue from the checkpoint in the output directory.
    #[arg(long)]
    resume: bool,

    /// Stop once this many total steps are done (the schedule still spans `total_steps`).
    #[arg(long)]
    steps: Option<u64>,

    /// Print a loss line every this many steps.
    #[arg(long, default_value_t = 10)]
    log_every: u64,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[command(flatten)]
    config: ConfigArgs,

    #[arg(long, default_value_t = 1e-5)]
    epsilon: f64,

    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,

    #[arg(long, default_value_t = 2)]
    clones: usize,

    /// Scale one op's backward pass, as `op:factor` (e.g. `gelu:1.01`).
    #[arg(long, value_parser = parse_mutation)]
    mutate: Option<BackwardMutation>,
}

#[derive(Args, Debug)]
struct ProbeArgs {
    #[arg(long)]
    checkpoint: PathBuf,

    /// Corpus to probe on; defaults to the one in the checkpoint's configuration.
    #[arg(long)]
    corpus: Option<PathBuf>,

    /// Probe the run's step-0 weights instead, as a baseline.
    #[arg(long)]
    random_init: bool,

    /// JSON report path; defaults to `probe.json` next to the checkpoint.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EmbedArgs {
    #[command(flatten)]
    config: ConfigArgs,

    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,

    #[arg(long, default_value_t = 64)]
    clips: usize,

    #[arg(long, default_value_t = 1)]
    seed: u64,

    #[arg(long, default_value_t = 340.0)]
    duration_ms: f64,

    #[arg(long, default_value_t = 16_000)]
    sample_rate: u32,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,

    /// Print every tensor, not only the group totals.
    #[arg(long)]
    tensors: bool,
}

fn parse_mutation(s: &str) -> std::result::Result<BackwardMutation, String> {
    let (op, factor) = s.split_once(':').ok_or("expected op:factor")?;
    let factor: f64 = factor.parse().map_err(|e| format!("bad factor: {e}"))?;
    let op = catssl::numerics::OP_NAMES
        .iter()
        .find(|&&n| n == op)
        .ok_or_else(|| {
            format!(
                "unknown op {op:?}; one of {}",
                catssl::numerics::OP_NAMES.join(", ")
            )
        })?;
    Ok(BackwardMutation { op, factor })
}

fn cmd_pretrain(args: &PretrainArgs) -> Result<()> {
    let cfg = args.config.load()?;
    let opts = PretrainOptions {
        resume: args.resume,
        stop_at: args.steps,
    };
    let summary = pretrain(&cfg, &opts)?;
    let every = args.log_every.max(1);
    for r in summary
        .records
        .iter()
        .filter(|r| r.step % every == 0 || r.step == summary.last_step)
    {
        println!(
            "step={} L_total={:.6} L_p={:.6} L_g={:.6} L_r={:.6} lr={:.3e} tau={:.6}",
            r.step, r.l_total, r.l_p, r.l_g, r.l_r, r.lr, r.tau
        );
    }
    println!("steps={}..{}", summary.first_step, summary.last_step);
    println!("checkpoint={}", summary.checkpoint.display());
    println!("metrics={}", summary.metrics.display());
    Ok(())
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<bool> {
    let cfg = args.config.load()?;
    let opts = GradcheckOptions {
        epsilon: args.epsilon,
        tolerance: args.tolerance,
        clones: args.clones,
        mutation: args.mutate,
    };
    let report = gradcheck(&cfg, &opts)?;
    println!("{report}");
    Ok(report.passed())
}

fn cmd_probe(args: &ProbeArgs) -> Result<()> {
    let outcome = probe_checkpoint(&args.checkpoint, args.corpus.as_deref(), args.random_init)?;
    println!("step={}", outcome.step);
    println!("random_init={}", outcome.random_init);
    println!("{}", outcome.report);
    let log = match &args.log {
        Some(p) => p.clone(),
        None => args.checkpoint.with_file_name("probe.json"),
    };
    let json = serde_json::to_string_pretty(&outcome)?;
    fs::write(&log, json + "\n").map_err(|e| catssl::Error::io(&log, e))?;
    println!("log={}", log.display());
    Ok(())
}

fn cmd_embed(args: &EmbedArgs) -> Result<()> {
    let mut cfg = args.config.load()?;
    if cfg.target_encoder == TargetEncoder::File {
        // Re-exporting a file through itself is pointless; embed with the oracle.
        cfg.target_encoder = TargetEncoder::Oracle;
    }
    let data = Dataset::load(&cfg, None)?;
    let encoder = target_encoder(&cfg)?;
    let records = embed_dataset(encoder.as_ref(), &data)?;
    write_embeddings(&args.out, &records)?;
    println!("clips={}", records.len());
    println!("dim={}", encoder.dim());
    println!("source={}", encoder.source_id());
    println!("out={}", args.out.display());
    Ok(())
}

fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let clips = make_synth_corpus(&SynthConfig {
        seed: args.seed,
        n_clips: args.clips,
        duration_ms: args.duration_ms,
        sample_rate_hz: args.sample_rate,
    })?;
    let manifest = write_corpus(&args.out, &clips)?;
    println!("clips={}", clips.len());
    println!("manifest={}", manifest.display());
    Ok(())
}

fn cmd_inspect(args: &InspectArgs) -> Result<()> {
    let header = read_header(&args.checkpoint)?;
    // A full load verifies every checksum.
    match header.dtype {
        catssl::numerics::DType::F32 => {
            catssl::checkpoint::Checkpoint::<f32>::load(&args.checkpoint)?;
        }
        catssl::numerics::DType::F64 => {
            catssl::checkpoint::Checkpoint::<f64>::load(&args.checkpoint)?;
        }
    }
    let cfg = header.config()?;
    let model = cfg.model();
    println!("path={}", args.checkpoint.display());
    println!("dtype={}", header.dtype.as_str());
    println!("step={}", header.step);
    println!("config_digest={}", header.config_digest());
    let groups = ["student", "teacher", "adam_m", "adam_v"];
    for g in groups {
        let n = header.tensors.iter().filter(|t| t.group == g).count();
        println!(
            "group.{g}={} tensors, {} scalars",
            n,
            header.group_scalars(g)
        );
    }
    let student = header.group_scalars("student");
    let expected = model.param_count();
    println!("params.student={student}");
    println!("params.expected={expected}");
    println!("params.encoder={}", model.encoder_param_count());
    println!("params.projector={}", model.projector_param_count());
    println!("params.match={}", student == expected);
    if args.tensors {
        for t in &header.tensors {
            let n: usize = t.shape.iter().product();
            println!("{}/{} {:?} {n}", t.group, t.name, t.shape);
        }
    }
    Ok(())
}

fn path_of(err: &catssl::Error) -> Option<&Path> {
    match err {
        catssl::Error::Io { path, .. } | catssl::Error::Corrupt { path, .. } => Some(path),
        _ => None,
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use catssl::Error as E;
    let Some(e) = err.chain().find_map(|c| c.downcast_ref::<E>()) else {
        return if err.chain().any(|c| c.is::<std::io::Error>()) {
            4
        } else {
            2
        };
    };
    match e {
        E::Divergence { .. } | E::NonFinite(_) => 3,
        E::Io { .. }
        | E::Corrupt { .. }
        | E::Checksum(_)
        | E::Version { .. }
        | E::WavParse { .. }
        | E::UnsupportedFormat(_)
        | E::Lookup(_) => 4,
        _ => 2,
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match &cli.command {
        Command::Pretrain(a) => cmd_pretrain(a).context("pretrain")?,
        Command::Gradcheck(a) => {
            if !cmd_gradcheck(a).context("gradcheck")? {
                return Ok(ExitCode::from(2));
            }
        }
        Command::Probe(a) => cmd_probe(a).context("probe")?,
        Command::EmbedTargets(a) => cmd_embed(a).context("embed-targets")?,
        Command::MakeSynthCorpus(a) => cmd_synth(a).context("make-synth-corpus")?,
        Command::Inspect(a) => cmd_inspect(a).context("inspect")?,
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            if let Some(p) = err
                .chain()
                .find_map(|c| c.downcast_ref::<catssl::Error>())
                .and_then(path_of)
            {
                eprintln!("file: {}", p.display());
            }
            ExitCode::from(exit_code(&err))
        }
    }
}
