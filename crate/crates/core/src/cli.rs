//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 on a usage or configuration error, 2 when the
//! input data or a checkpoint is unusable. Log verbosity comes from the
//! `TRAJMASK_LOG` environment variable (`error`, `warn`, `info`, `debug`).

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use log::info;

use crate::checkpoint::Checkpoint;
use crate::data::{load_frame_labels, load_pose_tracks, sliding_windows, write_frame_labels, write_pose_tracks, Normalization, Trajectory};
use crate::error::{Error, Result};
use crate::occlusion::TaskKind;
use crate::scoring::{
    auc_table, eval_windows, evaluate, frame_scores_header, score_task, write_frame_scores, write_scored_frames, Aggregation,
    Attribution, EvalConfig, NormalizationConfig,
};
use crate::synthetic::{generate, AnomalyKind, SynthConfig};
use crate::trainer::{fit, FitOutputs, TrainConfig};

pub const LOG_ENV: &str = "TRAJMASK_LOG";

#[derive(Debug, Parser)]
#[command(name = "trajmask", version, about = "Occluded-segment reconstruction for trajectory anomaly detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic train/test dataset with frame labels.
    GenSynth(GenSynthArgs),
    /// Train a model on pose tracks and write a checkpoint.
    Train(TrainArgs),
    /// Score labeled tracks, print one AUC per task and write frame scores.
    Evaluate(EvaluateArgs),
    /// Write frame scores for unlabeled tracks.
    Score(ScoreArgs),
    /// Print the config, step and array shapes of a checkpoint.
    InspectCheckpoint(InspectArgs),
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct FrameSize(f64, f64);

impl FromStr for FrameSize {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (w, h) = s
            .split_once(['x', 'X'])
            .ok_or_else(|| format!("expected WIDTHxHEIGHT, got {s:?}"))?;
        let w: f64 = w.trim().parse().map_err(|_| format!("bad width {w:?}"))?;
        let h: f64 = h.trim().parse().map_err(|_| format!("bad height {h:?}"))?;
        if w > 0.0 && h > 0.0 {
            Ok(FrameSize(w, h))
        } else {
            Err("frame size must be positive".into())
        }
    }
}

fn parse_tasks(s: &str) -> std::result::Result<Vec<TaskKind>, String> {
    if s.eq_ignore_ascii_case("all") {
        return Ok(TaskKind::ALL.to_vec());
    }
    s.split(',')
        .map(|t| t.trim().parse::<TaskKind>().map_err(|e| e.to_string()))
        .collect()
}

fn parse_from_str<T: FromStr<Err = Error>>(s: &str) -> std::result::Result<T, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Debug, Args)]
struct GenSynthArgs {
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Normal tracks in the training file.
    #[arg(long, default_value_t = 200)]
    train_tracks: usize,
    /// Normal tracks in the test file.
    #[arg(long, default_value_t = 50)]
    normal_tracks: usize,
    /// Anomalous tracks in the test file.
    #[arg(long, default_value_t = 50)]
    anomalous_tracks: usize,
    #[arg(long, default_value_t = 80)]
    track_length: usize,
    #[arg(long, default_value_t = 17)]
    joints: usize,
    /// velocity_jump, reversal or freeze.
    #[arg(long, default_value = "velocity_jump", value_parser = parse_from_str::<AnomalyKind>)]
    anomaly_kind: AnomalyKind,
    /// Jitter standard deviation in normalized units.
    #[arg(long, default_value_t = 0.002)]
    noise_std: f64,
    #[arg(long, default_value = "1280x720")]
    frame_size: FrameSize,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Pose-track file of normal training data.
    #[arg(long)]
    tracks: PathBuf,
    /// Where the final checkpoint goes.
    #[arg(long)]
    out: PathBuf,
    /// TOML file with training settings; flags given here override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Per-step loss log (CSV).
    #[arg(long)]
    log: Option<PathBuf>,
    /// Frames per window [default: 18].
    #[arg(long)]
    window_length: Option<usize>,
    /// Occluded frames per window [default: 6].
    #[arg(long)]
    segment_length: Option<usize>,
    /// Comma-separated subset of Pst,Prs,Ftr, or `all` [default: all].
    // the full path stops clap from reading this as a repeated flag
    #[arg(long, value_parser = parse_tasks)]
    tasks: Option<std::vec::Vec<TaskKind>>,
    /// Drop the hard-negative term of the encoder loss.
    #[arg(long)]
    no_hard_negatives: bool,
    /// Drop the soft-negative term of the encoder loss.
    #[arg(long)]
    no_soft_negatives: bool,
    /// With a single task, read its learned run from the leading rows of u.
    #[arg(long)]
    single_task_full_u: bool,
    /// Treat encoder targets as constants.
    #[arg(long)]
    stop_gradient_targets: bool,
    /// Seed for initialization, shuffling and negative pairing [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Stop after this many updates; overrides --epochs.
    #[arg(long)]
    max_steps: Option<u64>,
    /// Passes over the training windows [default: 30].
    #[arg(long)]
    epochs: Option<usize>,
    /// [default: 512]
    #[arg(long)]
    batch_size: Option<usize>,
    /// [default: 0.0001]
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Latent width C [default: 256].
    #[arg(long)]
    latent_width: Option<usize>,
    /// Transformer blocks in encoder and decoder [default: 4].
    #[arg(long)]
    layers: Option<usize>,
    /// [default: 4]
    #[arg(long)]
    heads: Option<usize>,
    /// [default: 512]
    #[arg(long)]
    feedforward_width: Option<usize>,
    /// Clip gradients to this global norm [default: off].
    #[arg(long)]
    grad_clip_norm: Option<f64>,
    /// Write the checkpoint every this many steps [default: off].
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// Stride between training windows.
    #[arg(long, default_value_t = 1)]
    stride: usize,
    #[arg(long, default_value = "1280x720")]
    frame_size: FrameSize,
    /// Run single-threaded.
    #[arg(long)]
    sequential: bool,
}

#[derive(Debug, Args)]
struct ScoringArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Pose-track file to score.
    #[arg(long)]
    tracks: PathBuf,
    /// Comma-separated subset of Pst,Prs,Ftr, or `all` [default: the checkpoint's tasks].
    // the full path stops clap from reading this as a repeated flag
    #[arg(long, value_parser = parse_tasks)]
    tasks: Option<std::vec::Vec<TaskKind>>,
    /// Occluded frames at test time [default: the training value].
    #[arg(long)]
    eval_segment_length: Option<usize>,
    #[arg(long, default_value_t = 1)]
    stride: usize,
    /// How overlapping contributions combine: max or mean.
    #[arg(long, default_value = "max", value_parser = parse_from_str::<Aggregation>)]
    aggregation: Aggregation,
    /// Credit errors to occluded frames (`occluded`) or to whole windows (`window`).
    #[arg(long, default_value = "occluded", value_parser = parse_from_str::<Attribution>)]
    attribution: Attribution,
    /// Moving-average width over frames [default: off].
    #[arg(long)]
    smoothing: Option<usize>,
    /// Min-max normalize scores within each scene.
    #[arg(long)]
    normalize_per_scene: bool,
    #[arg(long, default_value = "1280x720")]
    frame_size: FrameSize,
    /// Run single-threaded.
    #[arg(long)]
    sequential: bool,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[command(flatten)]
    common: ScoringArgs,
    /// Frame label file.
    #[arg(long)]
    labels: PathBuf,
    /// Frame scores output (CSV); with several tasks one file per task,
    /// named `<stem>_<task>.<ext>`.
    #[arg(long, default_value = "scores.csv")]
    scores_out: PathBuf,
}

#[derive(Debug, Args)]
struct ScoreArgs {
    #[command(flatten)]
    common: ScoringArgs,
    /// Output file [default: stdout].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct InspectArgs {
    checkpoint: PathBuf,
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or(LOG_ENV, "warn");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 1,
        _ => 2,
    }
}

/// Runs the tool with `argv` (including the program name) and returns the
/// process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run_with(argv, &mut stdout.lock(), &mut stderr.lock())
}

pub fn run_with<I, S>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    init_logging();
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let text = e.render().to_string();
            return if e.use_stderr() {
                let _ = write!(err, "{text}");
                1
            } else {
                let _ = write!(out, "{text}");
                0
            };
        }
    };
    let result = match cli.command {
        Command::GenSynth(a) => gen_synth(&a, out),
        Command::Train(a) => train(&a, out),
        Command::Evaluate(a) => evaluate_cmd(&a, out),
        Command::Score(a) => score_cmd(&a, out),
        Command::InspectCheckpoint(a) => Checkpoint::load(&a.checkpoint)
            .and_then(|c| write!(out, "{}", c.describe()).map_err(Error::from)),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn gen_synth(a: &GenSynthArgs, out: &mut dyn Write) -> Result<()> {
    fs::create_dir_all(&a.out)?;
    let base = SynthConfig {
        track_length: a.track_length,
        joints: a.joints,
        seed: a.seed,
        anomaly_kind: a.anomaly_kind,
        noise_std: a.noise_std,
        frame_size: (a.frame_size.0, a.frame_size.1),
        ..SynthConfig::default()
    };
    let train = SynthConfig {
        n_normal_tracks: a.train_tracks,
        n_anomalous_tracks: 0,
        scene_prefix: "train".into(),
        ..base.clone()
    };
    let test = SynthConfig {
        n_normal_tracks: a.normal_tracks,
        n_anomalous_tracks: a.anomalous_tracks,
        scene_prefix: "test".into(),
        ..base
    };
    let (train_tracks, _) = generate(&train)?;
    let (test_tracks, labels) = generate(&test)?;
    let mut f = create(&a.out.join("train_tracks.csv"))?;
    write_pose_tracks(&train_tracks, &mut f)?;
    f.flush()?;
    let mut f = create(&a.out.join("test_tracks.csv"))?;
    write_pose_tracks(&test_tracks, &mut f)?;
    f.flush()?;
    let mut f = create(&a.out.join("test_labels.csv"))?;
    write_frame_labels(&labels, &mut f)?;
    f.flush()?;
    writeln!(
        out,
        "wrote {} training and {} test tracks to {}",
        train_tracks.len(),
        test_tracks.len(),
        a.out.display()
    )?;
    Ok(())
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::from_toml_file(p)?,
        None => TrainConfig::default(),
    };
    macro_rules! set {
        ($field:expr, $flag:expr) => {
            if let Some(v) = $flag.clone() {
                $field = v;
            }
        };
    }
    set!(cfg.model.window, a.window_length);
    set!(cfg.segment_length, a.segment_length);
    set!(cfg.tasks, a.tasks);
    set!(cfg.seed, a.seed);
    set!(cfg.epochs, a.epochs);
    set!(cfg.batch_size, a.batch_size);
    set!(cfg.learning_rate, a.learning_rate);
    set!(cfg.model.latent_width, a.latent_width);
    set!(cfg.model.encoder_layers, a.layers);
    set!(cfg.model.attention_heads, a.heads);
    set!(cfg.model.feedforward_width, a.feedforward_width);
    if a.max_steps.is_some() {
        cfg.max_steps = a.max_steps;
    }
    if a.grad_clip_norm.is_some() {
        cfg.grad_clip_norm = a.grad_clip_norm;
    }
    if a.checkpoint_every.is_some() {
        cfg.checkpoint_every = a.checkpoint_every;
    }
    cfg.loss.hard_negatives &= !a.no_hard_negatives;
    cfg.loss.soft_negatives &= !a.no_soft_negatives;
    cfg.loss.stop_gradient_targets |= a.stop_gradient_targets;
    cfg.single_task_full_u |= a.single_task_full_u;
    cfg.parallel &= !a.sequential;
    Ok(cfg)
}

fn load_windows(path: &Path, window: usize, stride: usize, norm: &Normalization) -> Result<Vec<Trajectory>> {
    let tracks = load_pose_tracks(path)?;
    let mut windows = Vec::new();
    for t in &tracks {
        windows.extend(sliding_windows(t, window, stride, norm)?);
    }
    Ok(windows)
}

fn train(a: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let mut cfg = train_config(a)?;
    let norm = Normalization {
        frame_size: (a.frame_size.0, a.frame_size.1),
        ..Normalization::default()
    };
    let windows = load_windows(&a.tracks, cfg.model.window, a.stride, &norm)?;
    let Some(first) = windows.first() else {
        return Err(Error::Precondition(format!(
            "{} has no track with {} consecutive frames",
            a.tracks.display(),
            cfg.model.window
        )));
    };
    // the point layout comes from the data
    cfg.model.input_width = first.points.cols();
    cfg.validate()?;
    info!("{} training windows from {}", windows.len(), a.tracks.display());

    let mut log = a.log.as_deref().map(create).transpose()?;
    let ckpt = fit(
        &windows,
        &cfg,
        FitOutputs {
            log: log.as_mut().map(|w| w as &mut dyn Write),
            checkpoint_path: Some(&a.out),
        },
    )?;
    if let Some(mut l) = log {
        l.flush()?;
    }
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    ckpt.save(&a.out)?;
    writeln!(out, "wrote checkpoint at step {} to {}", ckpt.step, a.out.display())?;
    Ok(())
}

fn eval_config(a: &ScoringArgs, ckpt: &Checkpoint) -> EvalConfig {
    EvalConfig {
        task: TaskKind::Ftr,
        segment_length: a.eval_segment_length.unwrap_or(ckpt.config.segment_length),
        stride: a.stride,
        aggregation: a.aggregation,
        attribution: a.attribution,
        smoothing: a.smoothing,
        normalize_per_scene: a.normalize_per_scene,
        normalization: NormalizationConfig {
            frame_size: (a.frame_size.0, a.frame_size.1),
            ..NormalizationConfig::default()
        },
        parallel: !a.sequential,
    }
}

/// Requested tasks, or the checkpoint's, in Ftr, Prs, Pst order.
fn eval_tasks(a: &ScoringArgs, ckpt: &Checkpoint) -> Vec<TaskKind> {
    let wanted = a.tasks.clone().unwrap_or_else(|| ckpt.config.tasks.clone());
    [TaskKind::Ftr, TaskKind::Prs, TaskKind::Pst]
        .into_iter()
        .filter(|t| wanted.contains(t))
        .collect()
}

fn evaluate_cmd(a: &EvaluateArgs, out: &mut dyn Write) -> Result<()> {
    let ckpt = Checkpoint::load(&a.common.checkpoint)?;
    let tracks = load_pose_tracks(&a.common.tracks)?;
    let labels = load_frame_labels(&a.labels)?;
    let base = eval_config(&a.common, &ckpt);
    let results = evaluate(&ckpt, &tracks, &labels, &eval_tasks(&a.common, &ckpt), &base)?;
    for r in &results {
        let path = if results.len() == 1 {
            a.scores_out.clone()
        } else {
            per_task_path(&a.scores_out, r.task)
        };
        let mut f = create(&path)?;
        write_scored_frames(&r.frames, &mut f)?;
        f.flush()?;
    }
    write!(out, "{}", auc_table(&results))?;
    Ok(())
}

/// `dir/scores.csv` becomes `dir/scores_Ftr.csv`.
fn per_task_path(path: &Path, task: TaskKind) -> PathBuf {
    let stem = path.file_stem().map_or("scores".into(), |s| s.to_string_lossy().into_owned());
    let name = match path.extension() {
        Some(ext) => format!("{stem}_{task}.{}", ext.to_string_lossy()),
        None => format!("{stem}_{task}"),
    };
    path.with_file_name(name)
}

fn score_cmd(a: &ScoreArgs, out: &mut dyn Write) -> Result<()> {
    let ckpt = Checkpoint::load(&a.common.checkpoint)?;
    let model = ckpt.model()?;
    let tracks = load_pose_tracks(&a.common.tracks)?;
    let base = eval_config(&a.common, &ckpt);
    let windows = eval_windows(&tracks, model.config().window, &base)?;
    let tasks = eval_tasks(&a.common, &ckpt);
    let mut buf = Vec::new();
    writeln!(buf, "{}", frame_scores_header(tasks.len() > 1))?;
    for &task in &tasks {
        let cfg = EvalConfig { task, ..base.clone() };
        let scores = score_task(&ckpt, &model, &windows, &cfg)?;
        write_frame_scores(&scores, (tasks.len() > 1).then_some(task), &mut buf)?;
    }
    match &a.out {
        Some(p) => {
            let mut f = create(p)?;
            f.write_all(&buf)?;
            f.flush()?;
        }
        None => out.write_all(&buf)?,
    }
    Ok(())
}

