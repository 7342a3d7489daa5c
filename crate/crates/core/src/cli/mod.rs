//! The `convtx` command line: data generation, training, synthesis,
//! evaluation, gradient checking and attention-map dumps.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 I/O or file
//! format error, 4 numeric failure (non-finite loss, failed gradient check).

pub mod config;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::{Error, IoContext, Result};
use crate::metrics;
use crate::model::{Checkpoint, ConvTransformer, Mode, Preset, SynthesisRequest};
use crate::synthdata::{self, DataPreset, FrameSequence, ManifestEntry, Rgb8Image};
use crate::tensor::{Scalar, Tensor};
use crate::training::{self, Example, GradcheckOptions, Trainer};

pub use config::RunConfig;

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

/// Accuracy a `gradcheck` run must beat to exit 0.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "convtx", version, about = "Convolutional transformer for video frame synthesis")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render synthetic sequences into PPM directories plus a manifest.
    GenData(GenDataArgs),
    /// Train a model from a run config.
    Train(TrainArgs),
    /// Predict frames from a directory of input frames.
    Synth(SynthArgs),
    /// Score predicted frames against ground truth.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients of a small model.
    Gradcheck(GradcheckArgs),
    /// Write decoder cross-attention maps as grayscale PPMs.
    DumpAttention(DumpAttentionArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Scene distribution.
    #[arg(long, default_value = "extrapolate")]
    pub preset: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of sampled scenes (the direction preset also writes each reversal).
    #[arg(long, default_value_t = 10)]
    pub count: usize,
    /// Frame height and width in pixels.
    #[arg(long, default_value_t = 16)]
    pub size: usize,
    /// Train/val/test fractions recorded in the manifest.
    #[arg(long, default_value = "0.8,0.1,0.1")]
    pub split: String,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Run config (`[model]`, `[train]`, `[data]` sections).
    #[arg(long)]
    pub config: PathBuf,
    /// Run directory for the echoed config, report and checkpoints.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from a checkpoint written by an earlier run with the same config.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Extrapolate,
    Interpolate,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Directory of input frames as written by `gen-data`.
    #[arg(long)]
    pub input_dir: PathBuf,
    #[arg(long, value_enum, default_value = "extrapolate")]
    pub mode: ModeArg,
    /// Frames to synthesize: after the inputs, or evenly spaced inside the middle gap.
    #[arg(long, default_value_t = 1)]
    pub targets: usize,
    /// Output directory for the predicted frames.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred_dir: PathBuf,
    /// Ground truth; frames are matched to predictions by position.
    #[arg(long)]
    pub truth_dir: PathBuf,
    /// Where to write `scores.txt` and residual maps (default: the prediction directory).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value = "micro")]
    pub preset: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Minimum number of sampled parameter coordinates.
    #[arg(long, default_value_t = 256)]
    pub coords: usize,
}

#[derive(Debug, Args)]
pub struct DumpAttentionArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub input_dir: PathBuf,
    /// Decoder layer, counted from 0.
    #[arg(long, default_value_t = 0)]
    pub layer: usize,
    /// Attention head, counted from 0.
    #[arg(long, default_value_t = 0)]
    pub head: usize,
    #[arg(long, value_enum, default_value = "extrapolate")]
    pub mode: ModeArg,
    #[arg(long, default_value_t = 1)]
    pub targets: usize,
    #[arg(long)]
    pub out: PathBuf,
}

/// Exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::NonFiniteLoss { .. } | Error::GradCheck { .. } => EXIT_NUMERIC,
        Error::Io { .. }
        | Error::PpmBadMagic { .. }
        | Error::PpmMalformedHeader { .. }
        | Error::PpmShortFile { .. }
        | Error::Checkpoint(_)
        | Error::Meta { .. } => EXIT_IO,
        Error::ShapeMismatch { .. }
        | Error::InvalidArgument(_)
        | Error::NonScalarLoss(_)
        | Error::MissingGrad(_)
        | Error::Config(_) => EXIT_USAGE,
    }
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    match execute(&cli.command) {
        Ok(msg) => {
            print!("{msg}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Runs one command, returning what it would print on success.
pub fn execute(command: &Command) -> Result<String> {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Synth(a) => synth(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::DumpAttention(a) => dump_attention(a),
    }
}

fn parse_split(s: &str) -> Result<(f64, f64, f64)> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::invalid(format!("--split expects three comma-separated numbers, got `{s}`")))?;
    match parts[..] {
        [a, b, c] => Ok((a, b, c)),
        _ => Err(Error::invalid(format!("--split expects three numbers, got {}", parts.len()))),
    }
}

fn create_out_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::invalid(format!("cannot create output directory {}: {e}", dir.display())))
}

pub fn gen_data(a: &GenDataArgs) -> Result<String> {
    if a.count == 0 {
        return Err(Error::invalid("count must be positive"));
    }
    let preset: DataPreset = a.preset.parse().map_err(|e: Error| Error::invalid(e.to_string()))?;
    let ratios = parse_split(&a.split)?;
    create_out_dir(&a.out)?;
    let seqs = synthdata::generate_dataset(preset, a.size, a.count, a.seed)?;
    let dirs: Vec<String> = (0..seqs.len()).map(|i| format!("seq_{i:04}")).collect();
    let (train, val, test) = synthdata::split(&dirs, ratios, a.seed)?;
    for (seq, dir) in seqs.iter().zip(&dirs) {
        synthdata::write_frames(seq, &a.out.join(dir))?;
    }
    let mut entries = Vec::with_capacity(dirs.len());
    for (part, name) in [(&train, "train"), (&val, "val"), (&test, "test")] {
        entries.extend(part.iter().map(|d| ManifestEntry {
            dir: d.clone(),
            split: name.into(),
        }));
    }
    entries.sort_by(|x, y| x.dir.cmp(&y.dir));
    synthdata::write_manifest(&a.out.join("manifest.txt"), &entries)?;
    Ok(format!(
        "wrote {} sequences to {} (train {}, val {}, test {})\n",
        seqs.len(),
        a.out.display(),
        train.len(),
        val.len(),
        test.len()
    ))
}

/// Loads the sequences of one split from a manifest.
pub fn load_split(manifest: &Path, split: &str) -> Result<Vec<FrameSequence>> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    synthdata::read_manifest(manifest)?
        .iter()
        .filter(|e| e.split == split)
        .map(|e| synthdata::read_frames(&base.join(&e.dir)))
        .collect()
}

fn run_data(cfg: &RunConfig) -> Result<(Vec<FrameSequence>, Vec<FrameSequence>)> {
    let d = &cfg.data;
    match &d.manifest {
        Some(m) => Ok((load_split(m, "train")?, load_split(m, "val")?)),
        None => {
            let preset = d.preset()?;
            // direction datasets come in (sequence, reversal) pairs
            let per = |n: usize| if preset == DataPreset::Direction { n.div_ceil(2) } else { n };
            let train = synthdata::generate_dataset(preset, d.size, per(d.train_count), d.seed)?;
            let val = if d.val_count == 0 {
                Vec::new()
            } else {
                synthdata::generate_dataset(preset, d.size, per(d.val_count), d.seed.wrapping_add(1_000_003))?
            };
            Ok((train, val))
        }
    }
}

fn train_with<T: Scalar>(a: &TrainArgs, cfg: &RunConfig) -> Result<String> {
    let model_cfg = cfg.model.resolve()?;
    let train_cfg = cfg.train.resolve()?;
    let (train_seqs, val_seqs) = run_data(cfg)?;
    if train_seqs.is_empty() {
        return Err(Error::Config("the training split is empty".into()));
    }
    let s = train_seqs[0].frames.shape();
    model_cfg.check_frame_size(s.h, s.w).map_err(|e| Error::Config(e.to_string()))?;
    let task = train_cfg.task;
    let train_set = Example::<T>::from_sequences(&train_seqs, &task).map_err(|e| Error::Config(e.to_string()))?;
    let val_set = Example::<T>::from_sequences(&val_seqs, &task).map_err(|e| Error::Config(e.to_string()))?;

    let mut trainer = match &a.resume {
        Some(path) => {
            let ck = Checkpoint::<T>::load(path)?;
            if ck.model != model_cfg {
                return Err(Error::Config(format!(
                    "checkpoint {} was trained with a different model config",
                    path.display()
                )));
            }
            Trainer::from_checkpoint(ck, train_cfg.clone())?
        }
        None => Trainer::new(ConvTransformer::new(model_cfg)?, train_cfg.clone()),
    };
    let start = trainer.step();
    let report = trainer.run(&train_set, &val_set, train_cfg.steps, Some(&a.out))?;
    let mut msg = format!(
        "trained steps {}..{} ({} parameters, {}-bit)\n",
        start,
        trainer.step(),
        trainer.model().param_count(),
        T::BITS
    );
    if let Some(last) = report.records.last() {
        writeln!(msg, "final loss {:.6e}", last.loss).unwrap();
        if let Some(p) = last.psnr {
            writeln!(msg, "validation psnr {p:.3} dB").unwrap();
        }
    }
    if let Some(path) = &report.final_checkpoint {
        writeln!(msg, "checkpoint {}", path.display()).unwrap();
    }
    Ok(msg)
}

pub fn train(a: &TrainArgs) -> Result<String> {
    let cfg = match RunConfig::load(&a.config) {
        Err(Error::Io { context, source }) => {
            return Err(Error::invalid(format!("{context}: {source}")));
        }
        other => other?,
    };
    create_out_dir(&a.out)?;
    let echo = a.out.join("config.toml");
    fs::write(&echo, cfg.resolved_toml()?).io_context(|| format!("writing {}", echo.display()))?;
    match cfg.train.precision {
        config::Precision::F32 => train_with::<f32>(a, &cfg),
        config::Precision::F64 => train_with::<f64>(a, &cfg),
    }
}

/// Builds the request `synth` and `dump-attention` run on.
pub fn build_request<T: Scalar>(seq: &FrameSequence, mode: ModeArg, targets: usize) -> Result<SynthesisRequest<T>> {
    if targets == 0 {
        return Err(Error::invalid("--targets must be positive"));
    }
    let frames = seq.frames.cast::<T>();
    match mode {
        ModeArg::Extrapolate => SynthesisRequest::extrapolate(frames, seq.positions.clone(), targets),
        ModeArg::Interpolate => {
            let times: Vec<f64> = (1..=targets).map(|k| k as f64 / (targets + 1) as f64).collect();
            SynthesisRequest::interpolate(frames, seq.positions.clone(), &times)
        }
    }
}

fn load_model(path: &Path) -> Result<(ConvTransformer, Checkpoint<f64>)> {
    let ck = Checkpoint::<f64>::load(path)?;
    let model = ConvTransformer::new(ck.model.clone()).map_err(|e| Error::Checkpoint(e.to_string()))?;
    ck.params.check_layout(model.layout()).map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok((model, ck))
}

pub fn synth(a: &SynthArgs) -> Result<String> {
    let (model, ck) = load_model(&a.checkpoint)?;
    let seq = synthdata::read_frames(&a.input_dir)?;
    let request = build_request::<f64>(&seq, a.mode, a.targets)?;
    let pred = model.predict(&ck.params, &request)?;
    let out = FrameSequence::new(pred, request.query_positions.clone(), None)?;
    create_out_dir(&a.out)?;
    synthdata::write_frames(&out, &a.out)?;
    let mode = match request.mode {
        Mode::Extrapolate => "extrapolated",
        Mode::Interpolate => "interpolated",
    };
    Ok(format!(
        "{mode} {} frames at positions {:?} into {}\n",
        out.len(),
        out.positions,
        a.out.display()
    ))
}

/// Per-frame scores of `eval`; `ssim` is absent for frames smaller than its window.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameScore {
    pub position: f64,
    pub psnr: f64,
    pub ssim: Option<f64>,
}

/// Pairs every predicted frame with the truth frame at the same position.
pub fn score_frames(pred: &FrameSequence, truth: &FrameSequence) -> Result<Vec<FrameScore>> {
    let (ps, ts) = (pred.frames.shape(), truth.frames.shape());
    if (ps.h, ps.w) != (ts.h, ts.w) {
        return Err(Error::ShapeMismatch {
            op: "eval (prediction vs truth)",
            left: ps,
            right: ts,
        });
    }
    let with_ssim = ps.h >= metrics::SSIM_WINDOW && ps.w >= metrics::SSIM_WINDOW;
    (0..pred.len())
        .map(|i| {
            let pos = pred.positions[i];
            let j = truth
                .positions
                .iter()
                .position(|&p| (p - pos).abs() < 1e-9)
                .ok_or_else(|| Error::invalid(format!("no truth frame at position {pos}")))?;
            let (p, t) = (pred.frames.item_at(i), truth.frames.item_at(j));
            Ok(FrameScore {
                position: pos,
                psnr: metrics::psnr(&p, &t)?,
                ssim: if with_ssim { Some(metrics::ssim(&p, &t)?) } else { None },
            })
        })
        .collect()
}

pub fn eval(a: &EvalArgs) -> Result<String> {
    let pred = synthdata::read_frames(&a.pred_dir)?;
    let truth = synthdata::read_frames(&a.truth_dir)?;
    let scores = score_frames(&pred, &truth)?;
    let out = a.out.clone().unwrap_or_else(|| a.pred_dir.clone());
    create_out_dir(&out)?;
    let fmt_ssim = |s: Option<f64>| s.map_or("-".to_string(), |v| format!("{v:.6}"));
    let mut text = String::from("frame\tposition\tpsnr\tssim\n");
    for (i, s) in scores.iter().enumerate() {
        writeln!(text, "{i}\t{}\t{:.6}\t{}", s.position, s.psnr, fmt_ssim(s.ssim)).unwrap();
        let j = truth.positions.iter().position(|&p| (p - s.position).abs() < 1e-9).expect("matched above");
        let map = metrics::residual_map(&pred.frames.item_at(i), &truth.frames.item_at(j), 0)?;
        synthdata::write_ppm(&out.join(format!("residual_{i:04}.ppm")), &map.to_image())?;
    }
    let n = scores.len() as f64;
    let mean_psnr = scores.iter().map(|s| s.psnr).sum::<f64>() / n;
    let mean_ssim = scores
        .iter()
        .map(|s| s.ssim)
        .sum::<Option<f64>>()
        .map(|v| v / n);
    writeln!(text, "mean\t-\t{mean_psnr:.6}\t{}", fmt_ssim(mean_ssim)).unwrap();
    let path = out.join("scores.txt");
    fs::write(&path, &text).io_context(|| format!("writing {}", path.display()))?;
    Ok(text)
}

pub fn gradcheck(a: &GradcheckArgs) -> Result<String> {
    let preset: Preset = a.preset.parse().map_err(|e: Error| Error::invalid(e.to_string()))?;
    let opts = GradcheckOptions {
        coords: a.coords,
        frame_size: preset.frame_size(),
        ..GradcheckOptions::default()
    };
    let report = training::gradcheck(&preset.config(), a.seed, &opts)?;
    let w = &report.worst;
    let msg = format!(
        "checked {} coordinates over {} parameter tensors\nworst coordinate: {}[{}] analytic {:.9e} numeric {:.9e}\nmax relative error {:.3e}\n",
        report.coords, report.tensors, w.param, w.index, w.analytic, w.numeric, w.rel_error
    );
    match report.check(GRADCHECK_TOLERANCE) {
        Ok(_) => Ok(msg),
        Err(e) => {
            eprint!("{msg}");
            Err(e)
        }
    }
}

pub fn dump_attention(a: &DumpAttentionArgs) -> Result<String> {
    let (model, ck) = load_model(&a.checkpoint)?;
    let cfg = model.config();
    if a.layer >= cfg.layers {
        return Err(Error::invalid(format!("--layer {} but the decoder has {} layers", a.layer, cfg.layers)));
    }
    if a.head >= cfg.heads {
        return Err(Error::invalid(format!("--head {} but attention has {} heads", a.head, cfg.heads)));
    }
    let seq = synthdata::read_frames(&a.input_dir)?;
    let request = build_request::<f64>(&seq, a.mode, a.targets)?;
    let (_, dump) = model.predict_with_attention(&ck.params, &request)?;
    let maps = &dump.decoder_cross[a.layer][a.head];
    create_out_dir(&a.out)?;
    for q in 0..maps.queries() {
        for k in 0..maps.keys() {
            let m: Tensor<f64> = maps.map(q, k);
            let s = m.shape();
            let img = Rgb8Image::from_gray(s.w, s.h, m.data());
            synthdata::write_ppm(&a.out.join(format!("attn_q{q}_k{k}.ppm")), &img)?;
        }
    }
    Ok(format!(
        "wrote {} maps ({} queries x {} keys) for decoder layer {} head {} to {}\n",
        maps.queries() * maps.keys(),
        maps.queries(),
        maps.keys(),
        a.layer,
        a.head,
        a.out.display()
    ))
}
