//! Training objective.
//!
//! For each occluded timestep `t_i` the learned latent `ẑ_i` is pulled toward
//! the full-trajectory latent `z_i` (positive pair), pushed away from the
//! other occluded latents of the same trajectory with a weight that grows
//! with temporal distance (soft negatives), and pushed away from the latent
//! of another trajectory at the same timestep (hard negative):
//!
//! ```text
//! weight(i, j)  = beta * |t_i - t_j| / max_k |t_i - t_k|
//! soft(i)       = sum_j weight(i, j) * |learned_i - latent_j|
//! encoder       = sum_i max(|learned_i - latent_i| - soft(i) - |learned_i - other_i| + gamma, 0)
//! decoder       = mean over frames of |predicted_t - target_t|
//! total         = encoder + lambda_joints * decoder(joints) + lambda_bbox * decoder(bbox)
//! ```
//!
//! `other` is the latent of the paired trajectory and `|.|` is the Euclidean
//! norm of a row.

use serde::{Deserialize, Serialize};

use crate::autograd::{euclid, Tape, Var};
use crate::data::BBOX_COORDS;
use crate::error::{Error, Result};
use crate::tensor::Mat;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub beta: f64,
    pub gamma: f64,
    pub lambda_joints: f64,
    pub lambda_bbox: f64,
    pub soft_negatives: bool,
    pub hard_negatives: bool,
    /// Treat `z = B(v)` and `z'` as constants.
    pub stop_gradient_targets: bool,
    /// Trailing coordinates of each frame that belong to the bbox stream.
    pub bbox_coords: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            beta: 0.001,
            gamma: 0.1,
            lambda_joints: 5.0,
            lambda_bbox: 3.0,
            soft_negatives: true,
            hard_negatives: true,
            stop_gradient_targets: false,
            bbox_coords: BBOX_COORDS,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("lambda_joints", self.lambda_joints),
            ("lambda_bbox", self.lambda_bbox),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Latents entering the encoder loss for one trajectory and one occlusion.
#[derive(Clone, Debug)]
pub struct TripletBatch {
    /// `|t̂| × C`, row `k` stands for timestep `occluded_steps[k]`.
    pub learned: Mat,
    /// `T × C`, `B(v)` of the same trajectory.
    pub latents: Mat,
    /// `|t̂| × C`, latents of another trajectory at `occluded_steps`.
    pub other: Mat,
    pub occluded_steps: Vec<usize>,
}

impl TripletBatch {
    fn validate(&self) -> Result<()> {
        let c = self.learned.cols();
        if self.learned.rows() != self.occluded_steps.len()
            || self.other.rows() != self.occluded_steps.len()
            || self.latents.cols() != c
            || self.other.cols() != c
        {
            return Err(Error::Shape("triplet batch rows/widths disagree with occluded_steps".into()));
        }
        if self.occluded_steps.iter().any(|&t| t >= self.latents.rows()) {
            return Err(Error::Shape("occluded_steps index beyond latent sequence".into()));
        }
        Ok(())
    }
}

/// `P⁺ = ‖ẑ - z‖₂`.
pub fn positive_pair(learned: &[f64], latent: &[f64]) -> f64 {
    assert_eq!(learned.len(), latent.len());
    euclid(learned, latent)
}

/// `H⁻ = ‖ẑ - z'‖₂`.
pub fn hard_negative_distance(learned: &[f64], other: &[f64]) -> f64 {
    assert_eq!(learned.len(), other.len());
    euclid(learned, other)
}

/// Soft-negative weight `R(t_i, t_j)` within the occluded set `occluded_steps`.
pub fn temporal_regularizer(ti: usize, tj: usize, occluded_steps: &[usize], beta: f64) -> Result<f64> {
    if occluded_steps.len() < 2 {
        return Err(Error::DegenerateSegment);
    }
    if !occluded_steps.contains(&ti) || !occluded_steps.contains(&tj) {
        return Err(Error::Precondition(format!("{ti} or {tj} not in the occluded set")));
    }
    let far = occluded_steps.iter().map(|&tk| ti.abs_diff(tk)).max().unwrap_or(0);
    if far == 0 {
        return Err(Error::DegenerateSegment);
    }
    Ok(beta * ti.abs_diff(tj) as f64 / far as f64)
}

/// `S⁻` for the `i`-th occluded position.
pub fn soft_negative_penalty(batch: &TripletBatch, i: usize, beta: f64) -> Result<f64> {
    batch.validate()?;
    let ti = batch.occluded_steps[i];
    let learned_row = batch.learned.row(i);
    let mut total = 0.0;
    for &tj in &batch.occluded_steps {
        let r = temporal_regularizer(ti, tj, &batch.occluded_steps, beta)?;
        total += r * euclid(learned_row, batch.latents.row(tj));
    }
    Ok(total)
}

/// `sum max(positive - soft - hard + gamma, 0)` over per-position
/// `(positive, soft, hard)` triples.
pub fn triplet_hinge(terms: &[(f64, f64, f64)], gamma: f64) -> f64 {
    terms
        .iter()
        .map(|&(p, s, h)| (p - s - h + gamma).max(0.0))
        .sum()
}

/// Encoder loss `L_B` for one trajectory.
///
/// With a single occluded timestep the soft-negative term is taken as zero.
/// The `soft_negatives`/`hard_negatives` switches of `cfg` drop those terms.
pub fn encoder_loss(batch: &TripletBatch, cfg: &LossConfig) -> Result<f64> {
    batch.validate()?;
    let mut terms = Vec::with_capacity(batch.occluded_steps.len());
    for (i, &ti) in batch.occluded_steps.iter().enumerate() {
        let learned_row = batch.learned.row(i);
        let p = positive_pair(learned_row, batch.latents.row(ti));
        let s = if cfg.soft_negatives && batch.occluded_steps.len() > 1 {
            soft_negative_penalty(batch, i, cfg.beta)?
        } else {
            0.0
        };
        let h = if cfg.hard_negatives {
            hard_negative_distance(learned_row, batch.other.row(i))
        } else {
            0.0
        };
        terms.push((p, s, h));
    }
    Ok(triplet_hinge(&terms, cfg.gamma))
}

/// `L_D`: per-frame Euclidean error averaged over frames.
pub fn decoder_loss(predicted: &Mat, target: &Mat) -> Result<f64> {
    if predicted.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "decoder loss on {:?} vs {:?}",
            predicted.shape(),
            target.shape()
        )));
    }
    if predicted.rows() == 0 {
        return Ok(0.0);
    }
    let total: f64 = (0..predicted.rows())
        .map(|t| euclid(predicted.row(t), target.row(t)))
        .sum();
    Ok(total / predicted.rows() as f64)
}

/// `L_D` split into the joint and bbox coordinate streams.
pub fn stream_decoder_losses(predicted: &Mat, target: &Mat, bbox_coords: usize) -> Result<(f64, f64)> {
    if predicted.shape() != target.shape() {
        return Err(Error::Shape("decoder loss shapes differ".into()));
    }
    let joint = predicted.cols().checked_sub(bbox_coords).ok_or_else(|| {
        Error::Shape(format!("{} bbox coordinates exceed frame width", bbox_coords))
    })?;
    let lj = decoder_loss(&predicted.cols_range(0, joint), &target.cols_range(0, joint))?;
    let lb = decoder_loss(
        &predicted.cols_range(joint, bbox_coords),
        &target.cols_range(joint, bbox_coords),
    )?;
    Ok((lj, lb))
}

/// Encoder loss plus the weighted decoder losses of both streams.
pub fn total_loss(encoder: f64, decoder_joints: f64, decoder_bbox: f64, cfg: &LossConfig) -> f64 {
    encoder + cfg.lambda_joints * decoder_joints + cfg.lambda_bbox * decoder_bbox
}

/// `W = I - R` so that row `i` of `W ∘ dist(ẑ, z)` sums to `P⁺ - S⁻`.
pub fn soft_weight_matrix(occluded_steps: &[usize], cfg: &LossConfig) -> Mat {
    let n = occluded_steps.len();
    let soft = cfg.soft_negatives && n > 1;
    Mat::from_fn(n, n, |i, j| {
        if i == j {
            1.0
        } else if soft {
            -temporal_regularizer(occluded_steps[i], occluded_steps[j], occluded_steps, cfg.beta).expect("n > 1")
        } else {
            0.0
        }
    })
}

/// Tape version of [`encoder_loss`]. `latents` holds the rows at `occluded_steps`;
/// `other` is ignored when hard negatives are switched off.
pub fn encoder_loss_on(
    tape: &mut Tape,
    learned: Var,
    latents: Var,
    other: Option<Var>,
    occluded_steps: &[usize],
    cfg: &LossConfig,
) -> Var {
    let dist = tape.pairwise_dist(learned, latents);
    let weighted = tape.mul_const(dist, soft_weight_matrix(occluded_steps, cfg));
    let mut margin = tape.row_sum(weighted);
    if let Some(other) = other.filter(|_| cfg.hard_negatives) {
        let diff = tape.sub(learned, other);
        let hard = tape.row_norm(diff);
        margin = tape.sub(margin, hard);
    }
    let margin = tape.add_scalar(margin, cfg.gamma);
    let hinge = tape.relu(margin);
    tape.sum(hinge)
}

/// Tape version of [`stream_decoder_losses`].
pub fn decoder_losses_on(tape: &mut Tape, predicted: Var, target: Var, bbox_coords: usize) -> (Var, Var) {
    let width = tape.value(predicted).cols();
    let joint = width - bbox_coords;
    let diff = tape.sub(predicted, target);
    let mut stream = |start: usize, len: usize| {
        if len == 0 {
            return tape.constant(Mat::zeros(1, 1));
        }
        let part = tape.slice_cols(diff, start, len);
        let norms = tape.row_norm(part);
        tape.mean(norms)
    };
    let lj = stream(0, joint);
    let lb = stream(joint, bbox_coords);
    (lj, lb)
}
