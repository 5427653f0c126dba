//! Multitask training.
//!
//! Every step reuses one batch of windows for all enabled tasks. Each
//! window's objective is the sum of its per-task losses, the batch objective
//! is the mean over windows, and a single optimizer update follows. Because
//! the tasks read different rows of `u`, the update to `u` accumulates
//! contributions from all of them.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::data::Trajectory;
use crate::error::{Error, Result};
use crate::losses::{decoder_losses_on, encoder_loss_on, LossConfig};
use crate::model::{ForwardOptions, Model, ModelConfig};
use crate::occlusion::{make_occlusion, OcclusionSpec, TaskKind};
use crate::optim::AdamState;
use crate::parallel::{map_ordered, Parallelism};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Stop after this many updates; `None` runs `epochs` full passes.
    pub max_steps: Option<u64>,
    pub epochs: usize,
    pub seed: u64,
    pub tasks: Vec<TaskKind>,
    pub segment_length: usize,
    pub grad_clip_norm: Option<f64>,
    /// A single task reads its learned run from the leading rows of `u`.
    pub single_task_full_u: bool,
    /// Fan examples out over threads; results are identical either way.
    pub parallel: bool,
    /// Write a checkpoint every this many steps (needs a checkpoint path).
    pub checkpoint_every: Option<u64>,
    pub model: ModelConfig,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 512,
            max_steps: None,
            epochs: 30,
            seed: 0,
            tasks: TaskKind::ALL.to_vec(),
            segment_length: 6,
            grad_clip_norm: None,
            single_task_full_u: false,
            parallel: true,
            checkpoint_every: None,
            model: ModelConfig::default(),
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if self.tasks.is_empty() {
            return Err(Error::Config("at least one task is required".into()));
        }
        let mut seen = self.tasks.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.tasks.len() {
            return Err(Error::Config("tasks listed twice".into()));
        }
        if self.single_task_full_u && self.tasks.len() != 1 {
            return Err(Error::Config("single_task_full_u needs exactly one task".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.loss.bbox_coords > self.model.input_width {
            return Err(Error::Config("bbox_coords exceeds input width".into()));
        }
        for &task in &self.tasks {
            make_occlusion(task, self.model.window, self.segment_length)?;
        }
        Ok(())
    }

    /// Reads a TOML key-value file; missing keys keep their defaults.
    pub fn from_toml_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        Self::from_toml_str(&text)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn occlusions(&self) -> Result<Vec<OcclusionSpec>> {
        self.tasks
            .iter()
            .map(|&t| make_occlusion(t, self.model.window, self.segment_length))
            .collect()
    }

    pub fn parallelism(&self) -> Parallelism {
        Parallelism::from_flag(self.parallel)
    }
}

/// Loss terms of one task, averaged over a batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TaskLoss {
    pub encoder: f64,
    pub decoder_joints: f64,
    pub decoder_bbox: f64,
    pub total: f64,
}

impl TaskLoss {
    fn add(&mut self, o: &TaskLoss) {
        self.encoder += o.encoder;
        self.decoder_joints += o.decoder_joints;
        self.decoder_bbox += o.decoder_bbox;
        self.total += o.total;
    }

    fn scale(&mut self, s: f64) {
        self.encoder *= s;
        self.decoder_joints *= s;
        self.decoder_bbox *= s;
        self.total *= s;
    }

    fn is_finite(&self) -> bool {
        [self.encoder, self.decoder_joints, self.decoder_bbox, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub tasks: Vec<(TaskKind, TaskLoss)>,
}

impl StepReport {
    pub fn total(&self) -> f64 {
        self.tasks.iter().map(|(_, l)| l.total).sum()
    }

    pub fn mean_decoder(&self) -> f64 {
        let n = self.tasks.len().max(1) as f64;
        self.tasks
            .iter()
            .map(|(_, l)| l.decoder_joints + l.decoder_bbox)
            .sum::<f64>()
            / n
    }
}

impl fmt::Display for StepReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, (task, l)) in self.tasks.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(
                f,
                "{},{},{:.6e},{:.6e},{:.6e},{:.6e}",
                self.step, task, l.encoder, l.decoder_joints, l.decoder_bbox, l.total
            )?;
        }
        Ok(())
    }
}

/// What one window contributes to the objective.
#[derive(Clone, Debug)]
pub struct ObjectiveSettings<'a> {
    pub specs: &'a [OcclusionSpec],
    pub loss: &'a LossConfig,
    pub full_u: bool,
    pub dropout_seed: Option<u64>,
}

/// Builds one window's multitask objective on `tape` and returns the total
/// together with the per-task terms.
pub fn window_objective(
    tape: &mut Tape,
    model: &Model,
    window: &Trajectory,
    negative: &Trajectory,
    settings: &ObjectiveSettings,
) -> (Var, Vec<(Var, Var, Var, Var)>) {
    let opts = ForwardOptions {
        dropout_seed: settings.dropout_seed,
    };
    let cfg = settings.loss;
    let all_steps: Vec<usize> = (0..model.config().window).collect();

    let target = tape.constant(window.points.clone());
    let mut latents = model.encode_on(tape, target, &all_steps, opts);
    let mut other = if cfg.hard_negatives {
        let x = tape.constant(negative.points.clone());
        Some(model.encode_on(tape, x, &all_steps, opts))
    } else {
        None
    };
    if cfg.stop_gradient_targets {
        latents = tape.detach(latents);
        other = other.map(|o| tape.detach(o));
    }

    let mut terms = Vec::with_capacity(settings.specs.len());
    let mut total: Option<Var> = None;
    for spec in settings.specs {
        let observed = spec.observed_indices();
        let occluded_steps = spec.occluded_indices();
        let x_obs = tape.constant(window.points.select_rows(&observed));
        let z_obs = model.encode_on(tape, x_obs, &observed, opts);
        let learned = if settings.full_u {
            model.u_prefix_on(tape, occluded_steps.len())
        } else {
            model.u_slice_on(tape, spec)
        };
        let merged = model.merge_on(tape, z_obs, learned, spec);
        let decoded = model.decode_on(tape, merged, opts);

        let positives = tape.gather_rows(latents, &occluded_steps);
        let negatives = other.map(|o| tape.gather_rows(o, &occluded_steps));
        let lb = encoder_loss_on(tape, learned, positives, negatives, &occluded_steps, cfg);
        let (ldj, ldb) = decoder_losses_on(tape, decoded, target, cfg.bbox_coords);
        let wj = tape.scale(ldj, cfg.lambda_joints);
        let wb = tape.scale(ldb, cfg.lambda_bbox);
        let task_total = tape.add(lb, wj);
        let task_total = tape.add(task_total, wb);
        total = Some(match total {
            Some(acc) => tape.add(acc, task_total),
            None => task_total,
        });
        terms.push((lb, ldj, ldb, task_total));
    }
    (total.expect("at least one task"), terms)
}

/// Each window is paired with a different, uniformly drawn window of the batch.
pub fn sample_hard_negatives(batch_len: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if batch_len < 2 {
        return Err(Error::Precondition(format!(
            "hard negatives need at least 2 windows, got {batch_len}"
        )));
    }
    Ok((0..batch_len)
        .map(|b| {
            let j = rng.gen_range(0..batch_len - 1);
            if j >= b {
                j + 1
            } else {
                j
            }
        })
        .collect())
}

/// Mean objective over a batch and its gradient.
pub fn batch_gradients(
    model: &Model,
    batch: &[&Trajectory],
    pairing: &[usize],
    settings: &ObjectiveSettings,
    mode: Parallelism,
    step_seed: u64,
) -> (Gradients, Vec<TaskLoss>) {
    let per_window = map_ordered(batch, mode, |b, window| {
        let mut tape = Tape::new(model.params());
        let local = ObjectiveSettings {
            dropout_seed: settings.dropout_seed.map(|_| step_seed ^ (b as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)),
            ..settings.clone()
        };
        let (total, terms) = window_objective(&mut tape, model, window, batch[pairing[b]], &local);
        let losses: Vec<TaskLoss> = terms
            .iter()
            .map(|&(lb, ldj, ldb, t)| TaskLoss {
                encoder: tape.scalar(lb),
                decoder_joints: tape.scalar(ldj),
                decoder_bbox: tape.scalar(ldb),
                total: tape.scalar(t),
            })
            .collect();
        (tape.backward(total), losses)
    });

    let n = batch.len() as f64;
    let mut grads = Gradients::zeros_like(model.params());
    let mut losses = vec![TaskLoss::default(); settings.specs.len()];
    for (g, l) in &per_window {
        grads.add_assign(g);
        for (acc, x) in losses.iter_mut().zip(l) {
            acc.add(x);
        }
    }
    grads.scale(1.0 / n);
    losses.iter_mut().for_each(|l| l.scale(1.0 / n));
    (grads, losses)
}

/// Mean objective over a batch, without gradients.
pub fn batch_objective(model: &Model, batch: &[&Trajectory], pairing: &[usize], settings: &ObjectiveSettings) -> f64 {
    let mut total = 0.0;
    for (b, window) in batch.iter().enumerate() {
        let mut tape = Tape::new(model.params());
        let (t, _) = window_objective(&mut tape, model, window, batch[pairing[b]], settings);
        total += tape.scalar(t);
    }
    total / batch.len() as f64
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RunningLoss {
    pub mean: f64,
    pub count: u64,
}

/// Model, optimizer and bookkeeping of a training run.
pub struct Trainer {
    config: TrainConfig,
    specs: Vec<OcclusionSpec>,
    model: Model,
    optimizer: AdamState,
    step: u64,
    rng: ChaCha8Rng,
    pub running: BTreeMap<TaskKind, RunningLoss>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(config.model.clone(), config.seed)?;
        let optimizer = AdamState::new(model.params());
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Self {
            specs: config.occlusions()?,
            config,
            model,
            optimizer,
            step: 0,
            rng,
            running: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn settings(&self) -> ObjectiveSettings<'_> {
        ObjectiveSettings {
            specs: &self.specs,
            loss: &self.config.loss,
            full_u: self.config.single_task_full_u,
            dropout_seed: (self.config.model.dropout > 0.0).then_some(self.config.seed),
        }
    }

    /// One update from `batch`; the model is left untouched on error.
    pub fn train_step(&mut self, batch: &[&Trajectory]) -> Result<StepReport> {
        let pairing = sample_hard_negatives(batch.len(), &mut self.rng)?;
        let step_seed = self.config.seed ^ self.step.wrapping_mul(0x2545_f491_4f6c_dd1d);
        let (mut grads, losses) = batch_gradients(
            &self.model,
            batch,
            &pairing,
            &self.settings(),
            self.config.parallelism(),
            step_seed,
        );
        for (spec, l) in self.specs.iter().zip(&losses) {
            if !l.is_finite() {
                let origins: Vec<String> = batch
                    .iter()
                    .map(|w| format!("{}:{}@{}", w.origin.scene_id, w.origin.track_id, w.origin.first_frame))
                    .collect();
                return Err(Error::NonFinite {
                    step: self.step + 1,
                    task: spec.task().map_or("none".into(), |t| t.to_string()),
                    detail: format!("losses {l:?}; windows [{}]", origins.join(", ")),
                });
            }
        }
        if !grads.all_finite() {
            return Err(Error::NonFinite {
                step: self.step + 1,
                task: "all".into(),
                detail: "non-finite gradient".into(),
            });
        }
        if let Some(max) = self.config.grad_clip_norm {
            let norm = grads.global_norm();
            if norm > max {
                grads.scale(max / norm);
            }
        }
        self.optimizer
            .update(self.model.params_mut(), &grads, self.config.learning_rate);
        self.step += 1;

        let tasks: Vec<(TaskKind, TaskLoss)> = self
            .specs
            .iter()
            .zip(losses)
            .map(|(s, l)| (s.task().expect("task occlusion"), l))
            .collect();
        for (task, l) in &tasks {
            let r = self.running.entry(*task).or_default();
            r.count += 1;
            r.mean += (l.total - r.mean) / r.count as f64;
        }
        Ok(StepReport {
            step: self.step,
            tasks,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            params: self.model.params().clone(),
            optimizer: self.optimizer.clone(),
            step: self.step,
        }
    }

    /// Restores model and optimizer state; shuffling restarts from the seed.
    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let mut trainer = Self::new(ckpt.config.clone())?;
        trainer.model = Model::from_params(ckpt.config.model.clone(), ckpt.params)?;
        trainer.optimizer = ckpt.optimizer;
        trainer.step = ckpt.step;
        Ok(trainer)
    }

    fn shuffled(&mut self, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.rng);
        order
    }
}

/// Where `fit` reports progress.
#[derive(Default)]
pub struct FitOutputs<'a> {
    /// One `step,task,L_B,L_D_joints,L_D_bbox,total` line per task and step.
    pub log: Option<&'a mut dyn Write>,
    /// Periodic checkpoints are written here.
    pub checkpoint_path: Option<&'a Path>,
}

/// Trains on `dataset` until `max_steps` updates or `epochs` passes.
pub fn fit(dataset: &[Trajectory], config: &TrainConfig, mut out: FitOutputs) -> Result<Checkpoint> {
    if dataset.is_empty() {
        return Err(Error::Precondition("empty training set".into()));
    }
    if dataset.len() < 2 {
        return Err(Error::Precondition("need at least 2 training windows".into()));
    }
    let shape = (config.model.window, config.model.input_width);
    if let Some(w) = dataset.iter().find(|w| w.points.shape() != shape) {
        return Err(Error::Shape(format!(
            "training window {:?} is {:?}, model expects {:?}",
            w.origin,
            w.points.shape(),
            shape
        )));
    }
    let mut trainer = Trainer::new(config.clone())?;
    if let Some(log) = out.log.as_deref_mut() {
        writeln!(log, "step,task,L_B,L_D_joints,L_D_bbox,total")?;
    }
    let batch_size = config.batch_size.min(dataset.len());
    info!(
        "training on {} windows, batch {}, {} parameters",
        dataset.len(),
        batch_size,
        trainer.model().params().numel()
    );

    // an explicit step budget overrides the epoch count and cycles the data
    let done = |trainer: &Trainer, epoch: usize| match config.max_steps {
        Some(n) => trainer.step() >= n,
        None => epoch >= config.epochs,
    };
    let mut epoch = 0;
    while !done(&trainer, epoch) {
        let order = trainer.shuffled(dataset.len());
        for chunk in order.chunks(batch_size) {
            if config.max_steps.is_some_and(|n| trainer.step() >= n) {
                break;
            }
            if chunk.len() < 2 {
                continue;
            }
            let batch: Vec<&Trajectory> = chunk.iter().map(|&i| &dataset[i]).collect();
            let report = trainer.train_step(&batch)?;
            debug!("{report}");
            if let Some(log) = out.log.as_deref_mut() {
                writeln!(log, "{report}")?;
            }
            if let (Some(every), Some(path)) = (config.checkpoint_every, out.checkpoint_path) {
                if every > 0 && trainer.step() % every == 0 {
                    trainer.checkpoint().save(path)?;
                }
            }
        }
        epoch += 1;
        info!("epoch {epoch} done at step {}", trainer.step());
    }
    Ok(trainer.checkpoint())
}
