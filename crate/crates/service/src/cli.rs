//! Command-line entry points.

use std::fmt::Write as _;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use rhythmvae::encoding::{encode_pattern, patterns_from_midi, Pattern};
use rhythmvae::midi::{write_smf, DrumClass, DrumMap, OutputNotes};
use rhythmvae::sequencer::{MidiPortSink, RawMidiOutput, PPQ};
use rhythmvae::synth::template_corpus;
use rhythmvae::vae::{self, LatentVector, TrainConfig, VaeModel};
use walkdir::WalkDir;

use crate::session::{DiscardSink, Session};

#[derive(Debug, Parser)]
#[command(name = "rhythmvae", version, about = "Drum-pattern VAE: train on MIDI, steer a 2-D latent space")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model on every MIDI file under a directory.
    Train(TrainArgs),
    /// Decode one latent point into a MIDI file.
    Generate(GenerateArgs),
    /// Decode a regular grid of latent points into one MIDI file each.
    Sweep(SweepArgs),
    /// Report the patterns and onsets found in a MIDI file.
    Inspect {
        file: PathBuf,
        #[arg(long)]
        drum_map: Option<PathBuf>,
    },
    /// Write a synthetic kick/snare/hat corpus as MIDI files.
    SynthCorpus {
        out_dir: PathBuf,
        #[arg(long, default_value_t = 20)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the HTTP and WebSocket service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    pub midi_dir: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value = "model.rvae")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 1.0)]
    pub beta: f64,
    #[arg(long, default_value_t = 0.1)]
    pub kl_warmup_fraction: f64,
    #[arg(long, default_value_t = 0.1)]
    pub val_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write per-epoch losses as CSV.
    #[arg(long)]
    pub history: Option<PathBuf>,
    /// Note-to-class table (`note = class` per line) replacing the GM default.
    #[arg(long)]
    pub drum_map: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Latent point as `X,Y`.
    #[arg(long, allow_hyphen_values = true, value_parser = parse_latent)]
    pub z: LatentVector,
    #[arg(long, default_value = "pattern.mid")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 120.0)]
    pub tempo: f64,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Grid size as `COLSxROWS`.
    #[arg(long, default_value = "8x8", value_parser = parse_grid)]
    pub grid: (usize, usize),
    #[arg(long)]
    pub out_dir: PathBuf,
    /// The grid spans `[-range, range]` on both axes.
    #[arg(long, default_value_t = 3.0)]
    pub range: f64,
    #[arg(long, default_value_t = 120.0)]
    pub tempo: f64,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
    /// Start with this model loaded.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Raw MIDI output device or file to play into (e.g. /dev/snd/midiC1D0).
    #[arg(long)]
    pub midi_out: Option<PathBuf>,
    #[arg(long)]
    pub drum_map: Option<PathBuf>,
}

pub fn parse_latent(s: &str) -> Result<LatentVector, String> {
    let (x, y) = s.split_once(',').ok_or_else(|| format!("expected X,Y, got {s:?}"))?;
    let parse = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("{v:?}: {e}"));
    let z = LatentVector::new(parse(x)?, parse(y)?);
    if !z.is_finite() {
        return Err("latent coordinates must be finite".into());
    }
    Ok(z)
}

pub fn parse_grid(s: &str) -> Result<(usize, usize), String> {
    let (c, r) = s.to_ascii_lowercase().split_once('x').map(|(a, b)| (a.to_string(), b.to_string())).ok_or_else(|| format!("expected COLSxROWS, got {s:?}"))?;
    let c: usize = c.trim().parse().map_err(|e| format!("{c:?}: {e}"))?;
    let r: usize = r.trim().parse().map_err(|e| format!("{r:?}: {e}"))?;
    if c == 0 || r == 0 {
        return Err("grid dimensions must be positive".into());
    }
    Ok((c, r))
}

fn load_drum_map(path: Option<&Path>) -> anyhow::Result<DrumMap> {
    match path {
        None => Ok(DrumMap::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(DrumMap::parse(&text)?)
        }
    }
}

fn is_midi(path: &Path) -> bool {
    path.extension().and_then(|e| e.to_str()).is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "mid" | "midi" | "smf"))
}

/// Loads every MIDI file under `dir`, printing one line per file.
pub fn load_corpus(dir: &Path, map: &DrumMap, log: &mut impl std::io::Write) -> anyhow::Result<Vec<Pattern>> {
    let mut patterns = Vec::new();
    let mut files: Vec<PathBuf> = WalkDir::new(dir)
        .into_iter()
        .filter_map(Result::ok)
        .filter(|e| e.file_type().is_file() && is_midi(e.path()))
        .map(|e| e.into_path())
        .collect();
    files.sort();
    for path in files {
        let bytes = fs::read(&path)?;
        match patterns_from_midi(&bytes, map) {
            Ok(ps) => {
                writeln!(log, "{}: {} patterns", path.display(), ps.len())?;
                patterns.extend(ps);
            }
            Err(e) => writeln!(log, "{}: skipped ({e})", path.display())?,
        }
    }
    Ok(patterns)
}

fn load_model(path: &Path) -> anyhow::Result<VaeModel> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    VaeModel::load_weights(&bytes).with_context(|| format!("loading {}", path.display()))
}

fn write_pattern(path: &Path, pattern: &Pattern, tempo: f64) -> anyhow::Result<()> {
    let bytes = write_smf(pattern, PPQ as u16, tempo, &OutputNotes::default())?;
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

pub fn train(args: &TrainArgs, out: &mut impl std::io::Write) -> anyhow::Result<()> {
    let map = load_drum_map(args.drum_map.as_deref())?;
    let patterns = load_corpus(&args.midi_dir, &map, out)?;
    if patterns.len() < 2 {
        bail!("found {} patterns under {}, need at least 2", patterns.len(), args.midi_dir.display());
    }
    let dataset = patterns.iter().map(encode_pattern).collect::<Result<Vec<_>, _>>()?;
    let cfg = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch_size,
        lr: args.lr,
        kl_weight_beta: args.beta,
        kl_warmup_fraction: args.kl_warmup_fraction,
        val_fraction: args.val_fraction,
        seed: args.seed,
        ..TrainConfig::default()
    };
    writeln!(out, "training on {} patterns for {} epochs", dataset.len(), cfg.epochs)?;
    let mut log = String::new();
    let outcome = vae::train(
        &dataset,
        &cfg,
        |r, _| {
            let _ = writeln!(log, "epoch {:>4}  beta {:.3}  train {:.4}  val {:.4}", r.epoch, r.beta, r.train.total, r.val.total);
        },
        None,
    )?;
    out.write_all(log.as_bytes())?;
    fs::write(&args.out, outcome.model.save_weights()).with_context(|| format!("writing {}", args.out.display()))?;
    if let Some(h) = &args.history {
        fs::write(h, vae::history_to_csv(&outcome.history))?;
    }
    writeln!(out, "saved {}", args.out.display())?;
    Ok(())
}

pub fn generate(args: &GenerateArgs, out: &mut impl std::io::Write) -> anyhow::Result<()> {
    let model = load_model(&args.model)?;
    let pattern = model.generate(args.z, args.threshold)?;
    write_pattern(&args.out, &pattern, args.tempo)?;
    writeln!(out, "z = ({}, {}): {} onsets -> {}", args.z.x, args.z.y, pattern.len(), args.out.display())?;
    Ok(())
}

/// Evenly spaced coordinates from `-range` to `range`.
fn axis(n: usize, range: f64) -> Vec<f64> {
    if n == 1 {
        return vec![0.0];
    }
    (0..n).map(|i| -range + 2.0 * range * i as f64 / (n - 1) as f64).collect()
}

pub fn sweep(args: &SweepArgs, out: &mut impl std::io::Write) -> anyhow::Result<()> {
    let model = load_model(&args.model)?;
    fs::create_dir_all(&args.out_dir)?;
    let (cols, rows) = args.grid;
    for (j, y) in axis(rows, args.range).into_iter().enumerate() {
        for (i, x) in axis(cols, args.range).into_iter().enumerate() {
            let pattern = model.generate(LatentVector::new(x, y), args.threshold)?;
            let path = args.out_dir.join(format!("z_{j:02}_{i:02}.mid"));
            write_pattern(&path, &pattern, args.tempo)?;
        }
    }
    writeln!(out, "wrote {} files to {}", cols * rows, args.out_dir.display())?;
    Ok(())
}

pub fn inspect(file: &Path, drum_map: Option<&Path>, out: &mut impl std::io::Write) -> anyhow::Result<()> {
    let map = load_drum_map(drum_map)?;
    let bytes = fs::read(file).with_context(|| format!("reading {}", file.display()))?;
    let patterns = patterns_from_midi(&bytes, &map)?;
    let mut hist = [0usize; DrumClass::COUNT];
    for p in &patterns {
        for o in &p.onsets {
            hist[o.class.index()] += 1;
        }
    }
    writeln!(out, "{}: {} patterns, {} onsets", file.display(), patterns.len(), hist.iter().sum::<usize>())?;
    for class in DrumClass::ALL {
        writeln!(out, "  {:<14} {}", class.name(), hist[class.index()])?;
    }
    Ok(())
}

pub fn synth_corpus(out_dir: &Path, count: usize, seed: u64, out: &mut impl std::io::Write) -> anyhow::Result<()> {
    fs::create_dir_all(out_dir)?;
    for (i, p) in template_corpus(count, seed).iter().enumerate() {
        write_pattern(&out_dir.join(format!("synth_{i:03}.mid")), p, 120.0)?;
    }
    writeln!(out, "wrote {count} files to {}", out_dir.display())?;
    Ok(())
}

pub fn serve(args: &ServeArgs) -> anyhow::Result<()> {
    let session = match &args.midi_out {
        Some(path) => {
            let port = fs::OpenOptions::new().write(true).create(true).truncate(false).open(path)
                .with_context(|| format!("opening MIDI output {}", path.display()))?;
            Session::with_sink(Box::new(MidiPortSink::new(RawMidiOutput(port))))
        }
        None => Session::with_sink(Box::new(DiscardSink)),
    };
    session.set_drum_map(load_drum_map(args.drum_map.as_deref())?);
    if let Some(m) = &args.model {
        session.set_model(load_model(m)?)?;
    }
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(crate::api::serve(args.addr, session))
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let mut stdout = std::io::stdout().lock();
    match cli.command {
        Command::Train(a) => train(&a, &mut stdout),
        Command::Generate(a) => generate(&a, &mut stdout),
        Command::Sweep(a) => sweep(&a, &mut stdout),
        Command::Inspect { file, drum_map } => inspect(&file, drum_map.as_deref(), &mut stdout),
        Command::SynthCorpus { out_dir, count, seed } => synth_corpus(&out_dir, count, seed, &mut stdout),
        Command::Serve(a) => {
            drop(stdout);
            serve(&a)
        }
    }
}
