//! Anomaly scores and ROC-AUC.
//!
//! A window is occluded, reconstructed, and compared with the ground truth on
//! the occluded frames only. Those per-frame errors are spread back onto video
//! frames, combined across persons and overlapping windows, and ranked
//! against the frame labels.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{sliding_windows, FrameLabels, Normalization, PoseTrack, Trajectory};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::occlusion::{make_occlusion, OcclusionSpec, TaskKind};
use crate::parallel::{map_ordered, Parallelism};
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Max,
    Mean,
}

impl FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "max" => Ok(Aggregation::Max),
            "mean" => Ok(Aggregation::Mean),
            _ => Err(Error::Config(format!("unknown aggregation {s:?}"))),
        }
    }
}

/// Which frames a window's errors are credited to.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Attribution {
    /// Each occluded frame gets its own error. A frame that some window
    /// covers but that is never occluded falls back to the mean error of the
    /// windows covering it.
    #[default]
    Occluded,
    /// Every frame of the window gets the window's mean error.
    Window,
}

impl FromStr for Attribution {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "occluded" => Ok(Attribution::Occluded),
            "window" => Ok(Attribution::Window),
            _ => Err(Error::Config(format!("unknown attribution {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub task: TaskKind,
    pub segment_length: usize,
    pub stride: usize,
    pub aggregation: Aggregation,
    pub attribution: Attribution,
    /// Centered moving-average width over frames; `None` or 1 disables it.
    pub smoothing: Option<usize>,
    /// Min-max normalize scores within each scene.
    pub normalize_per_scene: bool,
    pub normalization: NormalizationConfig,
    pub parallel: bool,
}

/// Serializable mirror of [`Normalization`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NormalizationConfig {
    pub frame_size: (f64, f64),
    pub visibility_threshold: f64,
}

impl Default for NormalizationConfig {
    fn default() -> Self {
        let n = Normalization::default();
        Self {
            frame_size: n.frame_size,
            visibility_threshold: n.visibility_threshold,
        }
    }
}

impl From<NormalizationConfig> for Normalization {
    fn from(c: NormalizationConfig) -> Self {
        Normalization {
            frame_size: c.frame_size,
            visibility_threshold: c.visibility_threshold,
        }
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            task: TaskKind::Ftr,
            segment_length: 6,
            stride: 1,
            aggregation: Aggregation::Max,
            attribution: Attribution::Occluded,
            smoothing: None,
            normalize_per_scene: false,
            normalization: NormalizationConfig::default(),
            parallel: true,
        }
    }
}

/// Score of one video frame, before labels are attached.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameScore {
    pub scene_id: String,
    pub frame_index: i64,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredFrame {
    pub scene_id: String,
    pub frame_index: i64,
    pub score: f64,
    pub label: bool,
}

/// Per-occluded-frame errors of one window.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowError {
    pub scene_id: String,
    pub track_id: i64,
    pub first_frame: i64,
    pub len: usize,
    pub occluded: Range<usize>,
    /// One value per occluded frame, in time order.
    pub errors: Vec<f64>,
}

impl WindowError {
    pub fn mean(&self) -> f64 {
        if self.errors.is_empty() {
            0.0
        } else {
            self.errors.iter().sum::<f64>() / self.errors.len() as f64
        }
    }
}

/// Euclidean reconstruction error of every occluded frame, over the
/// coordinates of visible points only.
///
/// `visible` holds one flag per point (coordinate pair), row-major; `None`
/// means everything is visible.
pub fn segment_error(predicted: &Mat, target: &Mat, visible: Option<&[bool]>, spec: &OcclusionSpec) -> Result<Vec<f64>> {
    if predicted.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs target {:?}",
            predicted.shape(),
            target.shape()
        )));
    }
    if predicted.rows() != spec.window() {
        return Err(Error::Shape(format!(
            "{} frames, occlusion is for {}",
            predicted.rows(),
            spec.window()
        )));
    }
    let points = target.cols().div_ceil(2);
    if let Some(v) = visible {
        if v.len() != target.rows() * points {
            return Err(Error::Shape(format!("{} visibility flags for {}x{}", v.len(), target.rows(), points)));
        }
    }
    Ok(spec
        .occluded()
        .map(|t| {
            let (p, x) = (predicted.row(t), target.row(t));
            let sq: f64 = (0..target.cols())
                .filter(|&c| visible.is_none_or(|v| v[t * points + c / 2]))
                .map(|c| (p[c] - x[c]).powi(2))
                .sum();
            sq.sqrt()
        })
        .collect())
}

/// Reconstructs each window under `spec` and measures its occluded frames.
pub fn score_windows(
    model: &Model,
    windows: &[Trajectory],
    spec: &OcclusionSpec,
    full_u: bool,
    mode: Parallelism,
) -> Result<Vec<WindowError>> {
    map_ordered(windows, mode, |_, w| {
        let pred = model.reconstruct(&w.points, spec, full_u)?;
        let errors = segment_error(&pred, &w.points, Some(&w.visibility), spec)?;
        Ok(WindowError {
            scene_id: w.origin.scene_id.clone(),
            track_id: w.origin.track_id,
            first_frame: w.origin.first_frame,
            len: w.len(),
            occluded: spec.occluded(),
            errors,
        })
    })
    .into_iter()
    .collect()
}

fn combine(values: &[f64], agg: Aggregation) -> f64 {
    match agg {
        Aggregation::Max => values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        Aggregation::Mean => values.iter().sum::<f64>() / values.len() as f64,
    }
}

/// Frame-level scores, ordered by scene and frame, for every frame that at
/// least one window covers.
pub fn frame_scores(windows: &[WindowError], cfg: &EvalConfig) -> Vec<FrameScore> {
    type Key = (String, i64);
    let mut direct: BTreeMap<Key, Vec<f64>> = BTreeMap::new();
    let mut covering: BTreeMap<Key, Vec<f64>> = BTreeMap::new();
    for w in windows {
        let mean = w.mean();
        for t in 0..w.len {
            let key = (w.scene_id.clone(), w.first_frame + t as i64);
            covering.entry(key.clone()).or_default().push(mean);
            if cfg.attribution == Attribution::Occluded && w.occluded.contains(&t) {
                direct.entry(key).or_default().push(w.errors[t - w.occluded.start]);
            }
        }
    }
    let mut scores: Vec<FrameScore> = covering
        .into_iter()
        .map(|(key, fallback)| {
            let vals = direct.get(&key).unwrap_or(&fallback);
            FrameScore {
                score: combine(vals, cfg.aggregation),
                scene_id: key.0,
                frame_index: key.1,
            }
        })
        .collect();
    postprocess(&mut scores, cfg);
    scores
}

fn postprocess(scores: &mut [FrameScore], cfg: &EvalConfig) {
    let width = cfg.smoothing.unwrap_or(1);
    if width <= 1 && !cfg.normalize_per_scene {
        return;
    }
    // scores are grouped by scene already
    let mut start = 0;
    while start < scores.len() {
        let scene = scores[start].scene_id.clone();
        let end = start + scores[start..].iter().take_while(|s| s.scene_id == scene).count();
        let group = &mut scores[start..end];
        if width > 1 {
            let raw: Vec<f64> = group.iter().map(|s| s.score).collect();
            let half = width / 2;
            for (i, s) in group.iter_mut().enumerate() {
                let lo = i.saturating_sub(half);
                let hi = (i + width - half).min(raw.len());
                s.score = raw[lo..hi].iter().sum::<f64>() / (hi - lo) as f64;
            }
        }
        if cfg.normalize_per_scene {
            let lo = group.iter().map(|s| s.score).fold(f64::INFINITY, f64::min);
            let hi = group.iter().map(|s| s.score).fold(f64::NEG_INFINITY, f64::max);
            for s in group.iter_mut() {
                s.score = if hi > lo { (s.score - lo) / (hi - lo) } else { 0.0 };
            }
        }
        start = end;
    }
}

/// Pairs scores with labels. Every labeled frame gets a score (0 if no
/// window covered it); a scored frame without a label is an error.
pub fn attach_labels(scores: &[FrameScore], labels: &FrameLabels) -> Result<Vec<ScoredFrame>> {
    let mut by_key: BTreeMap<(&str, i64), f64> = BTreeMap::new();
    for s in scores {
        let known = labels
            .get(&s.scene_id)
            .is_some_and(|set| set.labels.contains_key(&s.frame_index));
        if !known {
            return Err(Error::MissingLabel {
                scene: s.scene_id.clone(),
                frame: s.frame_index,
            });
        }
        by_key.insert((&s.scene_id, s.frame_index), s.score);
    }
    let mut out = Vec::new();
    for (scene, set) in labels {
        for (&frame, &label) in &set.labels {
            out.push(ScoredFrame {
                scene_id: scene.clone(),
                frame_index: frame,
                score: by_key.get(&(scene.as_str(), frame)).copied().unwrap_or(0.0),
                label,
            });
        }
    }
    Ok(out)
}

/// Area under the ROC curve of `scores` against `labels`: the probability
/// that a random positive outscores a random negative, ties counting half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores, {} labels", scores.len(), labels.len())));
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Precondition(format!("non-finite score {bad}")));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 {
        return Err(Error::SingleClass("no positive labels"));
    }
    if neg == 0 {
        return Err(Error::SingleClass("no negative labels"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // midranks, 1-based; ties share the average of their positions
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + 1 + j) as f64 / 2.0;
        rank_sum += midrank * order[i..j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

pub fn compute_auc(frames: &[ScoredFrame]) -> Result<f64> {
    let scores: Vec<f64> = frames.iter().map(|f| f.score).collect();
    let labels: Vec<bool> = frames.iter().map(|f| f.label).collect();
    auc(&scores, &labels)
}

/// Every window of every track, cut with stride `cfg.stride`.
pub fn eval_windows(tracks: &[PoseTrack], window: usize, cfg: &EvalConfig) -> Result<Vec<Trajectory>> {
    let norm: Normalization = cfg.normalization.into();
    let mut out = Vec::new();
    for track in tracks {
        out.extend(sliding_windows(track, window, cfg.stride, &norm)?);
    }
    Ok(out)
}

fn check_shape(model: &Model, windows: &[Trajectory]) -> Result<()> {
    let shape = (model.config().window, model.config().input_width);
    match windows.iter().find(|w| w.points.shape() != shape) {
        Some(w) => Err(Error::Shape(format!(
            "window of {}:{} is {:?}, checkpoint expects {:?}",
            w.origin.scene_id,
            w.origin.track_id,
            w.points.shape(),
            shape
        ))),
        None => Ok(()),
    }
}

/// Frame scores of one task over pre-cut windows.
pub fn score_task(ckpt: &Checkpoint, model: &Model, windows: &[Trajectory], cfg: &EvalConfig) -> Result<Vec<FrameScore>> {
    check_shape(model, windows)?;
    let spec = make_occlusion(cfg.task, model.config().window, cfg.segment_length)?;
    let mode = Parallelism::from_flag(cfg.parallel);
    let errors = score_windows(model, windows, &spec, ckpt.config.single_task_full_u, mode)?;
    Ok(frame_scores(&errors, cfg))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskResult {
    pub task: TaskKind,
    pub auc: f64,
    pub frames: Vec<ScoredFrame>,
}

/// AUC of each task in `tasks`; `base` supplies everything except the task.
pub fn evaluate(
    ckpt: &Checkpoint,
    tracks: &[PoseTrack],
    labels: &FrameLabels,
    tasks: &[TaskKind],
    base: &EvalConfig,
) -> Result<Vec<TaskResult>> {
    let model = ckpt.model()?;
    let windows = eval_windows(tracks, model.config().window, base)?;
    if windows.is_empty() {
        return Err(Error::Precondition(format!(
            "no track has {} consecutive frames",
            model.config().window
        )));
    }
    tasks
        .iter()
        .map(|&task| {
            let cfg = EvalConfig { task, ..base.clone() };
            let scores = score_task(ckpt, &model, &windows, &cfg)?;
            let frames = attach_labels(&scores, labels)?;
            Ok(TaskResult {
                task,
                auc: compute_auc(&frames)?,
                frames,
            })
        })
        .collect()
}

impl fmt::Display for TaskResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:<6}{:.4}", self.task.to_string(), self.auc)
    }
}

/// Plain-text AUC table, one row per task.
pub fn auc_table(results: &[TaskResult]) -> String {
    let mut s = String::from("task  auc\n");
    for r in results {
        s.push_str(&format!("{r}\n"));
    }
    s
}

pub fn write_scored_frames(frames: &[ScoredFrame], mut out: impl Write) -> Result<()> {
    writeln!(out, "scene_id,frame_index,score,label")?;
    for f in frames {
        writeln!(out, "{},{},{:.9e},{}", f.scene_id, f.frame_index, f.score, u8::from(f.label))?;
    }
    Ok(())
}

pub fn frame_scores_header(with_task: bool) -> &'static str {
    if with_task {
        "task,scene_id,frame_index,score"
    } else {
        "scene_id,frame_index,score"
    }
}

/// Unlabeled score rows, without header; `task` adds a leading column.
pub fn write_frame_scores(scores: &[FrameScore], task: Option<TaskKind>, mut out: impl Write) -> Result<()> {
    for s in scores {
        if let Some(t) = task {
            write!(out, "{t},")?;
        }
        writeln!(out, "{},{},{:.9e}", s.scene_id, s.frame_index, s.score)?;
    }
    Ok(())
}
