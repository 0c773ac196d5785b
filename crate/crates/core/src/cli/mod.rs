//! The `gtk` command line: corpus generation, training, synthesis,
//! evaluation and codebook inspection.
//!
//! Exit codes: 0 success, 1 invalid configuration or failed training,
//! 2 I/O, 3 missing prerequisite, 4 incompatible or invalid checkpoint,
//! 5 insufficient data.

pub mod checkpoint;
pub mod config;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use checkpoint::{Blob, Checkpoint, CheckpointError, Component};
pub use config::{ConfigError, Paths, RunConfig};

use crate::metrics::{evaluate_motion, train_feature_extractor, MetricsError};
use crate::motion::{dataset_stats, extract_windows, io, synth_corpus, GestureClip, MotionError, MotionSequence, FPS};
use crate::prior::{
    synthesize_long, token_windows, train_stage2, validation_nll, Prior, PriorError, TokenLayout,
};
use crate::rqvae::{train_stage1, RqVae, RqVaeError};

/// Environment variable capping worker threads.
pub const THREADS_VAR: &str = "GTK_THREADS";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Config(String),
    #[error("missing prerequisite: {0}")]
    Missing(String),
    #[error("incompatible input: {0}")]
    Incompatible(String),
    #[error("insufficient data: {0}")]
    Insufficient(String),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Failed(_) => 1,
            CliError::Io { .. } => 2,
            CliError::Missing(_) => 3,
            CliError::Incompatible(_) => 4,
            CliError::Insufficient(_) => 5,
        }
    }

    fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<RqVaeError> for CliError {
    fn from(e: RqVaeError) -> Self {
        match e {
            RqVaeError::Empty => CliError::Insufficient(e.to_string()),
            RqVaeError::Config(_) => CliError::Config(e.to_string()),
            RqVaeError::CodeOutOfRange { .. } => CliError::Incompatible(e.to_string()),
            _ => CliError::Failed(e.to_string()),
        }
    }
}

impl From<PriorError> for CliError {
    fn from(e: PriorError) -> Self {
        match e {
            PriorError::Incompatible(_) | PriorError::UnknownWord { .. } | PriorError::CodeOutOfRange { .. } => {
                CliError::Incompatible(e.to_string())
            }
            PriorError::TooShort(_) | PriorError::Empty => CliError::Insufficient(e.to_string()),
            PriorError::Config(_) => CliError::Config(e.to_string()),
            PriorError::Tokens(inner) => inner.into(),
            _ => CliError::Failed(e.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::TooFew { .. } => CliError::Insufficient(e.to_string()),
            MetricsError::Config(_) => CliError::Config(e.to_string()),
            _ => CliError::Failed(e.to_string()),
        }
    }
}

impl From<MotionError> for CliError {
    fn from(e: MotionError) -> Self {
        match e {
            MotionError::TooFew { .. } => CliError::Insufficient(e.to_string()),
            MotionError::Config(_) => CliError::Config(e.to_string()),
            _ => CliError::Failed(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "gtk", version, about = "Speech-driven gesture synthesis with residual-quantized gesture tokens")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Start from the small desk-scale defaults instead of the full-size ones.
    #[arg(long, global = true)]
    pub desk: bool,
    /// Override one configuration key, e.g. `--set stage1.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic speech-gesture corpus and its manifest.
    GenCorpus {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the token model (1), the prior (2) or the metric feature extractor (feat).
    Train {
        stage: Stage,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Trained token model, required for stage 2.
        #[arg(long)]
        vae: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Loss curve; defaults to the checkpoint path with a `.tsv` extension.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Synthesize gestures for a speech file.
    Synth {
        #[arg(long)]
        vae: Option<PathBuf>,
        #[arg(long)]
        prior: Option<PathBuf>,
        /// Motion file carrying audio and word tracks.
        #[arg(long)]
        speech: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        top_k: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Also write a plain-text dump of the result.
        #[arg(long)]
        text: Option<PathBuf>,
    },
    /// Score synthesized motion against reference motion.
    Eval {
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        synth: PathBuf,
        /// `key: value` report; a tab-separated copy is written next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode every code on its own and tabulate codebook usage.
    Inspect {
        #[arg(long)]
        vae: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Stage {
    #[value(name = "1")]
    Tokens,
    #[value(name = "2")]
    Prior,
    #[value(name = "feat")]
    Features,
}

/// Corpus manifest written next to the motion files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub seed: u64,
    pub sequences: usize,
    pub frames: usize,
    pub vocab: usize,
    pub files: Vec<String>,
    /// Hex SHA-256 of each file, in order.
    pub digests: Vec<String>,
    pub config: RunConfig,
}

pub const MANIFEST: &str = "manifest.toml";

/// Writes through a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let name = path
        .file_name()
        .ok_or_else(|| CliError::io(path, std::io::Error::other("not a file path")))?;
    let mut tmp_name = name.to_os_string();
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    fs::write(&tmp, bytes).map_err(|e| CliError::io(path, e))?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        CliError::io(path, e)
    })
}

fn read_file(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| CliError::io(path, e))
}

pub fn read_motion(path: &Path) -> Result<MotionSequence, CliError> {
    io::from_bytes(&read_file(path)?).map_err(|e| CliError::io(path, std::io::Error::new(std::io::ErrorKind::InvalidData, e)))
}

/// A single motion file, or every sequence of a corpus directory in
/// manifest order (sorted file names when there is no manifest).
pub fn read_corpus(path: &Path) -> Result<Vec<MotionSequence>, CliError> {
    if !path.is_dir() {
        return Ok(vec![read_motion(path)?]);
    }
    let manifest = path.join(MANIFEST);
    let files: Vec<PathBuf> = if manifest.exists() {
        let text = String::from_utf8_lossy(&read_file(&manifest)?).into_owned();
        let m: Manifest = toml::from_str(&text).map_err(|e| CliError::io(&manifest, std::io::Error::new(std::io::ErrorKind::InvalidData, e)))?;
        m.files.iter().map(|f| path.join(f)).collect()
    } else {
        let mut v: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| CliError::io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "gtkm"))
            .collect();
        v.sort();
        v
    };
    files.iter().map(|f| read_motion(f)).collect()
}

fn load_checkpoint(flag: Option<&PathBuf>, fallback: Option<&PathBuf>, what: &str) -> Result<Checkpoint, CliError> {
    let path = flag
        .or(fallback)
        .ok_or_else(|| CliError::Missing(format!("no {what} checkpoint given")))?;
    if !path.exists() {
        return Err(CliError::Missing(format!("{what} checkpoint {} does not exist", path.display())));
    }
    Checkpoint::from_bytes(&read_file(path)?).map_err(|e| CliError::Incompatible(format!("{}: {e}", path.display())))
}

fn incompatible(e: CheckpointError) -> CliError {
    CliError::Incompatible(e.to_string())
}

fn corpus_path(flag: Option<&PathBuf>, cfg: &RunConfig) -> Result<PathBuf, CliError> {
    flag.or(cfg.paths.corpus.as_ref())
        .cloned()
        .ok_or_else(|| CliError::Missing("no corpus given".into()))
}

fn clips_of(seqs: &[MotionSequence]) -> Vec<GestureClip> {
    seqs.iter().flat_map(extract_windows).collect()
}

fn thread_cap() -> Result<Option<usize>, CliError> {
    match std::env::var(THREADS_VAR) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(CliError::Config(format!("{THREADS_VAR}={v}: expected a positive integer"))),
        },
    }
}

/// Resolves the configuration and runs one command, returning lines for
/// standard output.
pub fn run(cli: &Cli) -> Result<Vec<String>, CliError> {
    if let Some(n) = thread_cap()? {
        info!("worker threads capped at {n}; computation is single-threaded");
    }
    let base = if cli.global.desk { RunConfig::desk() } else { RunConfig::default() };
    let text = match &cli.global.config {
        Some(p) => Some(String::from_utf8_lossy(&read_file(p)?).into_owned()),
        None => None,
    };
    let cfg = RunConfig::resolve(&base, text.as_deref(), &cli.global.overrides)?;
    match &cli.command {
        Command::GenCorpus { out } => gen_corpus(&cfg, out),
        Command::Train {
            stage,
            corpus,
            vae,
            out,
            log,
        } => {
            let log = log.clone().unwrap_or_else(|| out.with_extension("tsv"));
            match stage {
                Stage::Tokens => train_tokens(&cfg, corpus.as_ref(), out, &log),
                Stage::Prior => train_prior(&cfg, corpus.as_ref(), vae.as_ref(), out, &log),
                Stage::Features => train_features(&cfg, corpus.as_ref(), out, &log),
            }
        }
        Command::Synth {
            vae,
            prior,
            speech,
            seed,
            top_k,
            out,
            text,
        } => synth(&cfg, vae.as_ref(), prior.as_ref(), speech, *seed, *top_k, out, text.as_ref()),
        Command::Eval {
            features,
            reference,
            synth,
            out,
        } => eval(&cfg, features.as_ref(), reference, synth, out),
        Command::Inspect { vae, out } => inspect(&cfg, vae.as_ref(), out),
    }
}

fn gen_corpus(cfg: &RunConfig, out: &Path) -> Result<Vec<String>, CliError> {
    let corpus = synth_corpus(&cfg.corpus, cfg.seed)?;
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let mut files = Vec::new();
    let mut digests = Vec::new();
    for (i, seq) in corpus.sequences.iter().enumerate() {
        let name = format!("seq_{i:04}.gtkm");
        let bytes = io::to_bytes(seq);
        digests.push(hex::encode(Sha256::digest(&bytes)));
        write_atomic(&out.join(&name), &bytes)?;
        files.push(name);
    }
    let manifest = Manifest {
        seed: cfg.seed,
        sequences: files.len(),
        frames: cfg.corpus.frames,
        vocab: corpus.bank.vocab_size(),
        files,
        digests,
        config: cfg.clone(),
    };
    let text = toml::to_string(&manifest).map_err(|e| CliError::Failed(e.to_string()))?;
    write_atomic(&out.join(MANIFEST), text.as_bytes())?;
    Ok(vec![format!("wrote {} sequences to {}", manifest.sequences, out.display())])
}

fn train_tokens(cfg: &RunConfig, corpus: Option<&PathBuf>, out: &Path, log: &Path) -> Result<Vec<String>, CliError> {
    let seqs = read_corpus(&corpus_path(corpus, cfg)?)?;
    let clips = clips_of(&seqs);
    let stats = dataset_stats(&clips)?;
    let mut vae = RqVae::new(cfg.vae.clone(), stats, cfg.seed)?;
    let result = train_stage1(&mut vae, &clips, &cfg.stage1, cfg.seed);
    write_atomic(out, &Checkpoint::from_vae(&vae, cfg).to_bytes())?;
    let history = result?;
    let mut tsv = String::from("epoch\tloss\tnmse\tl1\tusage\tresets\n");
    for r in &history {
        tsv.push_str(&format!("{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}\n", r.epoch, r.loss, r.nmse, r.l1, r.usage, r.resets));
    }
    write_atomic(log, tsv.as_bytes())?;
    let last = history.last();
    Ok(vec![format!(
        "token model: {} clips, {} epochs, final l1 {:.5}, usage {:.3}",
        clips.len(),
        history.len(),
        last.map_or(f64::NAN, |r| r.l1),
        last.map_or(f64::NAN, |r| r.usage)
    )])
}

fn train_prior(
    cfg: &RunConfig,
    corpus: Option<&PathBuf>,
    vae: Option<&PathBuf>,
    out: &Path,
    log: &Path,
) -> Result<Vec<String>, CliError> {
    let vae = load_checkpoint(vae, cfg.paths.vae.as_ref(), "token model")?
        .to_vae()
        .map_err(incompatible)?;
    let seqs = read_corpus(&corpus_path(corpus, cfg)?)?;
    let windows = token_windows(&vae, &seqs)?;
    let vocab = cfg.corpus.modes + 1;
    let mut prior = Prior::new(cfg.prior.clone(), TokenLayout::of(&vae, vocab), cfg.seed)?;
    let result = train_stage2(&mut prior, &seqs, &windows, &cfg.stage2, cfg.seed);
    write_atomic(out, &Checkpoint::from_prior(&prior, cfg).to_bytes())?;
    let history = result?;
    let mut tsv = String::from("epoch\tnll\n");
    for r in &history {
        tsv.push_str(&format!("{}\t{:.6}\n", r.epoch, r.nll));
    }
    write_atomic(log, tsv.as_bytes())?;
    let nll = validation_nll(&prior, &seqs, &windows)?;
    Ok(vec![format!("prior: {} windows, {} epochs, nll {nll:.4}", windows.len(), history.len())])
}

fn train_features(cfg: &RunConfig, corpus: Option<&PathBuf>, out: &Path, log: &Path) -> Result<Vec<String>, CliError> {
    let seqs = read_corpus(&corpus_path(corpus, cfg)?)?;
    let clips = clips_of(&seqs);
    let (fx, curve) = train_feature_extractor(&clips, &cfg.features, cfg.seed)?;
    write_atomic(out, &Checkpoint::from_features(&fx, cfg).to_bytes())?;
    let mut tsv = String::from("epoch\tmse\n");
    for (i, m) in curve.epochs.iter().enumerate() {
        tsv.push_str(&format!("{i}\t{m:.6}\n"));
    }
    write_atomic(log, tsv.as_bytes())?;
    Ok(vec![format!(
        "feature extractor: {} clips, mse {:.5} -> {:.5}",
        clips.len(),
        curve.initial,
        curve.epochs.last().copied().unwrap_or(curve.initial)
    )])
}

#[allow(clippy::too_many_arguments)]
fn synth(
    cfg: &RunConfig,
    vae: Option<&PathBuf>,
    prior: Option<&PathBuf>,
    speech: &Path,
    seed: Option<u64>,
    top_k: Option<usize>,
    out: &Path,
    text: Option<&PathBuf>,
) -> Result<Vec<String>, CliError> {
    let vae = load_checkpoint(vae, cfg.paths.vae.as_ref(), "token model")?
        .to_vae()
        .map_err(incompatible)?;
    let prior = load_checkpoint(prior, cfg.paths.prior.as_ref(), "prior")?
        .to_prior()
        .map_err(incompatible)?;
    prior.layout.check(&vae)?;
    let speech = read_motion(speech)?;
    let mut sampler = cfg.sampler.clone();
    if let Some(s) = seed {
        sampler.seed = s;
    }
    if let Some(k) = top_k {
        sampler.top_k = k;
    }
    let motion = synthesize_long(&prior, &vae, &speech, &sampler)?;
    write_atomic(out, &io::to_bytes(&motion))?;
    let mut resolved = cfg.clone();
    resolved.sampler = sampler.clone();
    let mut side = out.as_os_str().to_os_string();
    side.push(".toml");
    write_atomic(Path::new(&side), resolved.to_toml().as_bytes())?;
    if let Some(t) = text {
        write_atomic(t, io::to_text(&motion).as_bytes())?;
    }
    Ok(vec![format!("frames {} seed {}", motion.len(), sampler.seed)])
}

fn eval(cfg: &RunConfig, features: Option<&PathBuf>, reference: &Path, synth: &Path, out: &Path) -> Result<Vec<String>, CliError> {
    let fx = load_checkpoint(features, cfg.paths.features.as_ref(), "feature extractor")?
        .to_features()
        .map_err(incompatible)?;
    let reference = read_corpus(reference)?;
    let synth = read_corpus(synth)?;
    let report = evaluate_motion(&fx, &reference, &synth, &cfg.metrics, &cfg.to_toml())?;
    write_atomic(out, report.to_text().as_bytes())?;
    write_atomic(&out.with_extension("tsv"), report.to_tsv().as_bytes())?;
    Ok(report.to_text().lines().take_while(|l| *l != "config:").map(String::from).collect())
}

fn inspect(cfg: &RunConfig, vae: Option<&PathBuf>, out: &Path) -> Result<Vec<String>, CliError> {
    let ck = load_checkpoint(vae, cfg.paths.vae.as_ref(), "token model")?;
    let vae = ck.to_vae().map_err(incompatible)?;
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let (n, d) = (vae.codebook.size(), vae.depth());
    let pad = vae.codebook.padding_index();
    let mut poses = Vec::new();
    for code in 0..n {
        let mut stack = vec![pad; d];
        stack[0] = code;
        poses.extend(vae.decode_codes(&stack)?);
    }
    let snippets = MotionSequence::new(FPS, poses)?;
    let padding = MotionSequence::new(FPS, vae.decode_codes(&vec![pad; d])?)?;
    write_atomic(&out.join("snippets.gtkm"), &io::to_bytes(&snippets))?;
    write_atomic(&out.join("padding.gtkm"), &io::to_bytes(&padding))?;
    let mut tsv = String::from("code\tusage\tema_count\tnorm\n");
    for c in 0..n {
        let norm = vae.codebook.code(c).iter().map(|v| (v * v) as f64).sum::<f64>().sqrt();
        tsv.push_str(&format!("{c}\t{}\t{:.6}\t{norm:.6}\n", vae.codebook.usage[c], vae.codebook.counts[c]));
    }
    write_atomic(&out.join("usage.tsv"), tsv.as_bytes())?;
    // the configuration the token model was trained with
    write_atomic(&out.join("config.toml"), ck.config.as_bytes())?;
    Ok(vec![format!(
        "{n} codes, {} frames per code, snippets in {}",
        snippets.len() / n,
        out.display()
    )])
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(lines) => {
            for l in lines {
                println!("{l}");
            }
            0
        }
        Err(e) => {
            eprintln!("gtk: {e}");
            e.exit_code()
        }
    }
}
