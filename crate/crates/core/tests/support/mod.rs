//! Checks shared by the acceptance suite and the invariant tests.

#![allow(dead_code)]

use std::panic::{catch_unwind, AssertUnwindSafe};

use proptest::prelude::*;
use proptest::test_runner::Config as ProptestConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use trajmask::autograd::{Gradients, ParamId};
use trajmask::data::{normalize_window, sliding_windows, Normalization, PoseFrame, PoseTrack, Trajectory, WindowOrigin};
use trajmask::losses::{
    decoder_loss, encoder_loss, hard_negative_distance, positive_pair, soft_negative_penalty, temporal_regularizer,
    LossConfig, TripletBatch,
};
use trajmask::model::{Model, ModelConfig};
use trajmask::occlusion::{make_occlusion, reorder_merge, OcclusionSpec, TaskKind};
use trajmask::optim::AdamState;
use trajmask::parallel::Parallelism;
use trajmask::scoring::{auc, frame_scores, segment_error, Attribution, EvalConfig, WindowError};
use trajmask::synthetic::{generate, simulate_track, AnomalyKind, SynthConfig};
use trajmask::tensor::Mat;
use trajmask::trainer::{
    batch_gradients, batch_objective, fit, sample_hard_negatives, FitOutputs, ObjectiveSettings, TrainConfig, Trainer,
};

pub fn random_windows(n: usize, t: usize, width: usize, seed: u64) -> Vec<Trajectory> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let m = Mat::from_fn(t, width, |_, _| rng.gen_range(0.0..1.0));
            let origin = WindowOrigin { scene_id: "r".into(), track_id: i as i64, first_frame: 0 };
            Trajectory::from_points(m, origin)
        })
        .collect()
}

fn small_config(window: usize, width: usize, bbox_coords: usize, latent: usize) -> TrainConfig {
    TrainConfig {
        model: ModelConfig {
            window,
            input_width: width,
            latent_width: latent,
            encoder_layers: 2,
            attention_heads: 2,
            feedforward_width: 2 * latent,
            dropout: 0.0,
        },
        loss: LossConfig { bbox_coords, ..LossConfig::default() },
        tasks: TaskKind::ALL.to_vec(),
        batch_size: 4,
        learning_rate: 1e-3,
        seed: 5,
        ..TrainConfig::default()
    }
}

/// `positive - soft - hard + gamma` for every window, task and occluded index.
fn hinge_arguments(model: &Model, batch: &[&Trajectory], pairing: &[usize], specs: &[OcclusionSpec], cfg: &LossConfig) -> Vec<f64> {
    let t = model.config().window;
    let all: Vec<usize> = (0..t).collect();
    let mut out = Vec::new();
    for (b, w) in batch.iter().enumerate() {
        let z = model.encode(&w.points, &all).unwrap().values;
        let z_other = model.encode(&batch[pairing[b]].points, &all).unwrap().values;
        for spec in specs {
            let occluded_steps = spec.occluded_indices();
            let tb = TripletBatch {
                learned: model.select_u_slice(spec),
                latents: z.clone(),
                other: z_other.select_rows(&occluded_steps),
                occluded_steps: occluded_steps.clone(),
            };
            for i in 0..occluded_steps.len() {
                let p = positive_pair(tb.learned.row(i), tb.latents.row(occluded_steps[i]));
                let h = hard_negative_distance(tb.learned.row(i), tb.other.row(i));
                let s = if occluded_steps.len() > 1 { soft_negative_penalty(&tb, i, cfg.beta).unwrap() } else { 0.0 };
                out.push(p - s - h + cfg.gamma);
            }
        }
    }
    out
}

pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
}

/// Central differences of the batch objective against the analytic gradient,
/// for every entry of every parameter including `u`.
pub fn gradient_check() -> GradCheck {
    let mut cfg = small_config(6, 6, 2, 8);
    cfg.segment_length = 2;
    cfg.batch_size = 2;
    let specs = cfg.occlusions().unwrap();
    let data = random_windows(2, 6, 6, 21);
    let batch: Vec<&Trajectory> = data.iter().collect();
    let pairing = [1, 0];
    let base = Model::new(cfg.model.clone(), 17).unwrap();
    let settings = ObjectiveSettings { specs: &specs, loss: &cfg.loss, full_u: false, dropout_seed: None };
    let (grads, _) = batch_gradients(&base, &batch, &pairing, &settings, Parallelism::Sequential, 0);

    let h = 1e-5;
    let kink = 1e-6;
    let (mut max_rel, mut checked, mut skipped) = (0.0f64, 0, 0);
    let mut model = base.clone();
    for p in 0..base.params().len() {
        let id = ParamId(p);
        let analytic = grads.dense(id, base.params());
        for k in 0..analytic.len() {
            let orig = base.params().get(id).data()[k];
            model.params_mut().get_mut(id).data_mut()[k] = orig + h;
            let plus = batch_objective(&model, &batch, &pairing, &settings);
            let hinge_plus = hinge_arguments(&model, &batch, &pairing, &specs, &cfg.loss);
            model.params_mut().get_mut(id).data_mut()[k] = orig - h;
            let minus = batch_objective(&model, &batch, &pairing, &settings);
            let hinge_minus = hinge_arguments(&model, &batch, &pairing, &specs, &cfg.loss);
            model.params_mut().get_mut(id).data_mut()[k] = orig;

            let near_kink = hinge_plus
                .iter()
                .zip(&hinge_minus)
                .any(|(a, b)| a.abs() < kink || b.abs() < kink || (a > &0.0) != (b > &0.0));
            if near_kink {
                skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[k];
            // entries with a zero gradient are judged against the round-off
            // level of a central difference at this step
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-5);
            max_rel = max_rel.max(rel);
            checked += 1;
        }
    }
    GradCheck { max_rel_error: max_rel, checked, skipped }
}

pub struct UpdateCheck {
    pub max_param_diff: f64,
    pub max_objective_diff: f64,
    pub min_u_row_norm: f64,
}

/// One joint step through the trainer against an optimizer step on the sum
/// of separately computed per-task gradients.
pub fn joint_update_check() -> UpdateCheck {
    let cfg = small_config(18, 12, 4, 8);
    let data = random_windows(4, 18, 12, 6);
    let batch: Vec<&Trajectory> = data.iter().collect();

    let mut trainer = Trainer::new(cfg.clone()).unwrap();
    let start = trainer.model().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let pairing = sample_hard_negatives(batch.len(), &mut rng).unwrap();
    trainer.train_step(&batch).unwrap();

    let specs = cfg.occlusions().unwrap();
    let joint = ObjectiveSettings { specs: &specs, loss: &cfg.loss, full_u: false, dropout_seed: None };
    let mut summed = Gradients::zeros_like(start.params());
    let mut summed_objective = 0.0;
    for spec in &specs {
        let one = ObjectiveSettings { specs: std::slice::from_ref(spec), ..joint.clone() };
        let (g, _) = batch_gradients(&start, &batch, &pairing, &one, Parallelism::Sequential, 0);
        summed.add_assign(&g);
        summed_objective += batch_objective(&start, &batch, &pairing, &one);
    }
    let joint_objective = batch_objective(&start, &batch, &pairing, &joint);

    let mut manual = start.clone();
    let mut adam = AdamState::new(manual.params());
    adam.update(manual.params_mut(), &summed, cfg.learning_rate);
    let max_param_diff = (0..manual.params().len())
        .map(|i| manual.params().get(ParamId(i)).max_abs_diff(trainer.model().params().get(ParamId(i))))
        .fold(0.0, f64::max);

    let (grads, _) = batch_gradients(&start, &batch, &pairing, &joint, Parallelism::Sequential, 0);
    let gu = grads.dense(start.u_id(), start.params());
    let min_u_row_norm = (0..gu.rows())
        .map(|r| gu.row(r).iter().map(|v| v * v).sum::<f64>().sqrt())
        .fold(f64::INFINITY, f64::min);
    UpdateCheck {
        max_param_diff,
        max_objective_diff: (joint_objective - summed_objective).abs(),
        min_u_row_norm,
    }
}

pub fn brute_force_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li && !lj {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

/// Largest deviation from the pairwise statistic over `sets` random score
/// sets of 2 to 100 entries, drawn from coarse grids so that ties occur.
pub fn auc_oracle_deviation(sets: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..sets {
        let n = rng.gen_range(2..=100);
        let levels = rng.gen_range(2..=20);
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..levels) as f64 / levels as f64).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
        labels[0] = true;
        labels[1] = false;
        let got = auc(&scores, &labels).unwrap();
        worst = worst.max((got - brute_force_auc(&scores, &labels)).abs());
    }
    worst
}

fn cases(n: u32) -> ProptestConfig {
    ProptestConfig { cases: n, failure_persistence: None, ..ProptestConfig::default() }
}

fn pixel_frames(t: usize, j: usize, w: f64, h: f64, coords: &[(f64, f64, f64)]) -> Vec<PoseFrame> {
    (0..t)
        .map(|i| PoseFrame {
            frame_index: i as i64,
            keypoints: (0..j).map(|k| [coords[i * j + k].0 * w, coords[i * j + k].1 * h]).collect(),
            confidence: (0..j).map(|k| coords[i * j + k].2).collect(),
            bbox: [[0.0, 0.0], [w, 0.0], [0.0, h], [w, h]],
        })
        .collect()
}

fn arb_frames() -> impl Strategy<Value = (Vec<PoseFrame>, (f64, f64))> {
    (3usize..10, 1usize..4, 10.0f64..2000.0, 10.0f64..2000.0)
        .prop_flat_map(|(t, j, w, h)| {
            (prop::collection::vec((0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0), t * j), Just((t, j, w, h)))
        })
        .prop_map(|(coords, (t, j, w, h))| (pixel_frames(t, j, w, h, &coords), (w, h)))
}

fn denormalize_round_trip() {
    proptest!(cases(64), |((frames, size) in arb_frames(), threshold in 0.0f64..0.6)| {
        let traj = normalize_window(&frames, &Normalization { frame_size: size, visibility_threshold: threshold });
        let px = traj.denormalize();
        for (t, f) in frames.iter().enumerate() {
            for (k, kp) in f.keypoints.iter().enumerate() {
                if traj.is_visible(t, k) {
                    for d in 0..2 {
                        prop_assert!((px.get(t, 2 * k + d) - kp[d]).abs() <= 1e-9 * kp[d].abs().max(1e-300));
                    }
                }
            }
        }
    });
}

fn stride_one_windows_cover_track() {
    proptest!(cases(64), |(n in 18usize..60, len in 3usize..18)| {
        let coords = vec![(0.5, 0.5, 1.0); n];
        let track = PoseTrack { scene_id: "a".into(), track_id: 0, frames: pixel_frames(n, 1, 100.0, 100.0, &coords) };
        let windows = sliding_windows(&track, len, 1, &Normalization::default()).unwrap();
        let mut covered = vec![false; n];
        for w in &windows {
            for k in 0..len {
                covered[w.origin.first_frame as usize + k] = true;
            }
        }
        prop_assert!(covered.iter().all(|&c| c));
    });
}

fn interpolated_fill_within_endpoints() {
    proptest!(cases(64), |((frames, size) in arb_frames())| {
        let traj = normalize_window(&frames, &Normalization { frame_size: size, visibility_threshold: 0.5 });
        for k in 0..traj.num_joints() {
            let visible: Vec<usize> = (0..traj.len()).filter(|&t| traj.is_visible(t, k)).collect();
            for t in (0..traj.len()).filter(|&t| !traj.is_visible(t, k)) {
                let before = visible.iter().rev().find(|&&v| v < t);
                let after = visible.iter().find(|&&v| v > t);
                if let (Some(&a), Some(&b)) = (before, after) {
                    for d in 0..2 {
                        let (pa, pb) = (traj.points.get(a, 2 * k + d), traj.points.get(b, 2 * k + d));
                        let v = traj.points.get(t, 2 * k + d);
                        prop_assert!(v >= pa.min(pb) - 1e-15 && v <= pa.max(pb) + 1e-15);
                    }
                }
            }
        }
    });
}

fn task_strategy() -> impl Strategy<Value = TaskKind> {
    prop_oneof![Just(TaskKind::Pst), Just(TaskKind::Prs), Just(TaskKind::Ftr)]
}

fn merge_is_pure_placement() {
    proptest!(cases(128), |(task in task_strategy(), t in 3usize..24, l in 1usize..22, c in 1usize..5, seed in any::<u64>())| {
        let Ok(spec) = make_occlusion(task, t, l) else { return Ok(()) };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let observed = Mat::from_fn(t - spec.occluded_len(), c, |_, _| rng.gen_range(-1.0..1.0));
        let learned = Mat::from_fn(spec.occluded_len(), c, |_, _| rng.gen_range(-1.0..1.0));
        let merged = reorder_merge(&observed, &learned, &spec).unwrap();
        let mut next_obs = 0;
        for row in 0..t {
            if spec.is_occluded(row) {
                prop_assert_eq!(merged.row(row), learned.row(row - spec.occluded().start));
            } else {
                prop_assert_eq!(merged.row(row), observed.row(next_obs));
                next_obs += 1;
            }
        }
    });
}

fn occlusion_is_deterministic() {
    proptest!(cases(128), |(task in task_strategy(), t in 3usize..40, l in 1usize..40)| {
        prop_assert_eq!(make_occlusion(task, t, l).ok(), make_occlusion(task, t, l).ok());
    });
}

fn short_runs_are_disjoint() {
    proptest!(cases(128), |(t in 3usize..60, l in 1usize..20)| {
        prop_assume!(l <= t / 3);
        let runs: Vec<_> = TaskKind::ALL.iter().map(|&k| make_occlusion(k, t, l).unwrap().occluded()).collect();
        for a in 0..3 {
            for b in a + 1..3 {
                prop_assert!(runs[a].end <= runs[b].start || runs[b].end <= runs[a].start);
            }
        }
    });
}

fn tiny_model(t: usize, n: usize, c: usize, seed: u64) -> Model {
    let cfg = ModelConfig {
        window: t,
        input_width: n,
        latent_width: c,
        encoder_layers: 1,
        attention_heads: 2,
        feedforward_width: 8,
        dropout: 0.0,
    };
    Model::new(cfg, seed).unwrap()
}

fn model_shapes_hold() {
    proptest!(cases(32), |(t in 3usize..12, n in 2usize..8, half_c in 1usize..5, task in task_strategy(), l in 1usize..10, seed in 0u64..100)| {
        let c = 2 * half_c;
        let model = tiny_model(t, n, c, seed);
        let Ok(spec) = make_occlusion(task, t, l) else { return Ok(()) };
        let points = Mat::from_fn(t, n, |r, k| ((r * n + k) as f64 * 0.37).sin().abs());
        let observed = spec.observed_indices();
        let z = model.encode(&points.select_rows(&observed), &observed).unwrap();
        prop_assert_eq!(z.values.shape(), (observed.len(), c));
        let full = model.encode(&points, &(0..t).collect::<Vec<_>>()).unwrap();
        prop_assert_eq!(full.values.shape(), (t, c));
        prop_assert_eq!(model.select_u_slice(&spec).shape(), (l, c));
        let merged = reorder_merge(&z.values, &model.select_u_slice(&spec), &spec).unwrap();
        prop_assert_eq!(merged.shape(), (t, c));
        prop_assert_eq!(model.reconstruct(&points, &spec, false).unwrap().shape(), (t, n));
    });
}

fn parameter_count_shared_across_tasks() {
    let data = random_windows(3, 18, 12, 1);
    let mut counts = Vec::new();
    for tasks in [vec![TaskKind::Pst], vec![TaskKind::Prs], vec![TaskKind::Ftr], TaskKind::ALL.to_vec()] {
        let cfg = TrainConfig { tasks, max_steps: Some(1), ..small_config(18, 12, 4, 8) };
        let ckpt = fit(&data, &cfg, FitOutputs::default()).unwrap();
        counts.push((ckpt.params.len(), ckpt.params.numel()));
    }
    assert!(counts.windows(2).all(|w| w[0] == w[1]), "{counts:?}");
}

fn regularizer_monotone() {
    proptest!(cases(128), |(len in 2usize..20, start in 0usize..10, a in 0usize..20, beta in 0.0f64..2.0)| {
        let occluded_steps: Vec<usize> = (start..start + len).collect();
        let ti = occluded_steps[a % len];
        let mut by_distance = occluded_steps.clone();
        by_distance.sort_by_key(|&tj| tj.abs_diff(ti));
        let mut prev = -1.0;
        for tj in by_distance {
            let r = temporal_regularizer(ti, tj, &occluded_steps, beta).unwrap();
            prop_assert!(r >= prev - 1e-15 && r <= beta + 1e-15);
            prev = r;
        }
    });
}

fn random_triplets(rng: &mut ChaCha8Rng, t: usize, occluded_steps: Vec<usize>, c: usize) -> TripletBatch {
    let mut m = |r| Mat::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0));
    TripletBatch { learned: m(occluded_steps.len()), latents: m(t), other: m(occluded_steps.len()), occluded_steps }
}

fn losses_non_negative() {
    proptest!(cases(128), |(seed in any::<u64>(), len in 1usize..7, gamma in 0.0f64..1.0)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = random_triplets(&mut rng, 8, (1..1 + len).collect(), 4);
        let cfg = LossConfig { gamma, ..LossConfig::default() };
        prop_assert!(encoder_loss(&b, &cfg).unwrap() >= 0.0);
        for i in 0..len {
            prop_assert!(positive_pair(b.learned.row(i), b.latents.row(b.occluded_steps[i])) >= 0.0);
            prop_assert!(hard_negative_distance(b.learned.row(i), b.other.row(i)) >= 0.0);
            if len > 1 {
                prop_assert!(soft_negative_penalty(&b, i, cfg.beta).unwrap() >= 0.0);
            }
        }
        let p = Mat::from_fn(5, 6, |_, _| rng.gen_range(0.0..1.0));
        let q = Mat::from_fn(5, 6, |_, _| rng.gen_range(0.0..1.0));
        prop_assert!(decoder_loss(&p, &q).unwrap() >= 0.0);
    });
}

fn gradients_match_finite_differences() {
    let g = gradient_check();
    assert!(g.max_rel_error <= 1e-4 && g.checked > 0, "max relative error {:.3e}", g.max_rel_error);
}

fn decoder_loss_triangle() {
    proptest!(cases(128), |(seed in any::<u64>())| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = || Mat::from_fn(4, 5, |_, _| rng.gen_range(-1.0..1.0));
        let (a, b, c) = (m(), m(), m());
        let direct = decoder_loss(&a, &c).unwrap();
        prop_assert!(direct <= decoder_loss(&a, &b).unwrap() + decoder_loss(&b, &c).unwrap() + 1e-12);
    });
}

fn single_index_hinge() {
    proptest!(cases(128), |(seed in any::<u64>(), at in 0usize..6, gamma in 0.0f64..3.0)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = random_triplets(&mut rng, 6, vec![at], 3);
        let cfg = LossConfig { gamma, ..LossConfig::default() };
        let p = positive_pair(b.learned.row(0), b.latents.row(at));
        let h = hard_negative_distance(b.learned.row(0), b.other.row(0));
        prop_assert!((encoder_loss(&b, &cfg).unwrap() - (p - h + gamma).max(0.0)).abs() < 1e-12);
    });
}

fn joint_update_equals_summed_update() {
    let u = joint_update_check();
    assert!(u.max_param_diff <= 1e-10 && u.max_objective_diff <= 1e-10);
}

fn reported_losses_finite() {
    proptest!(cases(8), |(seed in 0u64..1000)| {
        let data = random_windows(6, 18, 12, seed);
        let cfg = TrainConfig { max_steps: Some(4), seed, parallel: false, ..small_config(18, 12, 4, 8) };
        let mut log = Vec::new();
        fit(&data, &cfg, FitOutputs { log: Some(&mut log), checkpoint_path: None }).unwrap();
        let text = String::from_utf8(log).unwrap();
        for line in text.lines().skip(1) {
            for field in line.split(',').skip(2) {
                prop_assert!(field.parse::<f64>().unwrap().is_finite(), "{line}");
            }
        }
    });
}

fn single_task_full_u_trains() {
    for task in TaskKind::ALL {
        let cfg = TrainConfig {
            tasks: vec![task],
            single_task_full_u: true,
            max_steps: Some(2),
            ..small_config(18, 12, 4, 8)
        };
        let ckpt = fit(&random_windows(4, 18, 12, 2), &cfg, FitOutputs::default()).unwrap();
        assert_eq!(ckpt.step, 2);
    }
}

fn scores_and_labels() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2usize..60).prop_flat_map(|n| {
        (prop::collection::vec(0.0f64..1.0, n), prop::collection::vec(any::<bool>(), n))
            .prop_map(|(s, mut l)| {
                l[0] = true;
                l[1] = false;
                (s, l)
            })
    })
}

fn auc_monotone_invariance() {
    proptest!(cases(128), |((s, l) in scores_and_labels(), a in 0.1f64..5.0, b in -3.0f64..3.0)| {
        let mapped: Vec<f64> = s.iter().map(|x| (a * x + b).exp()).collect();
        prop_assert!((auc(&s, &l).unwrap() - auc(&mapped, &l).unwrap()).abs() < 1e-12);
    });
}

fn auc_label_flip() {
    proptest!(cases(128), |((s, l) in scores_and_labels())| {
        let distinct: Vec<f64> = s.iter().enumerate().map(|(i, x)| x + i as f64 * 1e-6).collect();
        let flipped: Vec<bool> = l.iter().map(|x| !x).collect();
        prop_assert!((auc(&distinct, &flipped).unwrap() - (1.0 - auc(&distinct, &l).unwrap())).abs() < 1e-12);
    });
}

fn segment_error_zero_iff_match() {
    proptest!(cases(128), |(
        vals in prop::collection::vec(0.0f64..1.0, 24),
        noise in prop::collection::vec(prop_oneof![Just(0.0), 0.01f64..0.5], 24),
        vis in prop::collection::vec(any::<bool>(), 12),
        task in task_strategy(),
    )| {
        let spec = make_occlusion(task, 6, 2).unwrap();
        let truth = Mat::from_vec(6, 4, vals.clone());
        let pred = Mat::from_vec(6, 4, vals.iter().zip(&noise).map(|(a, b)| a + b).collect());
        let e = segment_error(&pred, &truth, Some(&vis), &spec).unwrap();
        for (k, t) in spec.occluded().enumerate() {
            let equal = (0..4).all(|c| !vis[t * 2 + c / 2] || pred.get(t, c) == truth.get(t, c));
            prop_assert_eq!(e[k] == 0.0, equal);
        }
    });
}

fn max_aggregation_monotone() {
    proptest!(cases(128), |(
        errs in prop::collection::vec(0.0f64..1.0, 12),
        which in 0usize..12,
        bump in 0.0f64..1.0,
        by_window in any::<bool>(),
    )| {
        let cfg = EvalConfig {
            attribution: if by_window { Attribution::Window } else { Attribution::Occluded },
            ..EvalConfig::default()
        };
        let build = |e: &[f64]| -> Vec<WindowError> {
            e.chunks(3)
                .enumerate()
                .map(|(k, c)| WindowError {
                    scene_id: if k % 2 == 0 { "a".into() } else { "b".into() },
                    track_id: k as i64,
                    first_frame: k as i64,
                    len: 6,
                    occluded: 1..4,
                    errors: c.to_vec(),
                })
                .collect()
        };
        let before = frame_scores(&build(&errs), &cfg);
        let mut bumped = errs.clone();
        bumped[which] += bump;
        let after = frame_scores(&build(&bumped), &cfg);
        prop_assert_eq!(before.len(), after.len());
        for (x, y) in before.iter().zip(&after) {
            prop_assert!(y.score >= x.score);
        }
    });
}

fn synth_strategy() -> impl Strategy<Value = SynthConfig> {
    (0u64..1000, 18usize..40, 0usize..3, 1usize..3, prop_oneof![Just(AnomalyKind::VelocityJump), Just(AnomalyKind::Reversal), Just(AnomalyKind::Freeze)])
        .prop_map(|(seed, len, normal, anomalous, kind)| SynthConfig {
            n_normal_tracks: normal,
            n_anomalous_tracks: anomalous,
            track_length: len,
            seed,
            anomaly_kind: kind,
            ..SynthConfig::default()
        })
}

fn synthetic_coordinates_in_unit_square() {
    proptest!(cases(32), |(cfg in synth_strategy())| {
        let (tracks, _) = generate(&cfg).unwrap();
        for t in &tracks {
            for w in sliding_windows(t, 18, 1, &Normalization::default()).unwrap() {
                prop_assert!(w.points.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    });
}

fn synthetic_bbox_contains_joints() {
    proptest!(cases(32), |(cfg in synth_strategy())| {
        let (tracks, _) = generate(&cfg).unwrap();
        for f in tracks.iter().flat_map(|t| &t.frames) {
            let [tl, _, _, br] = f.bbox;
            for kp in &f.keypoints {
                prop_assert!(kp[0] >= tl[0] && kp[0] <= br[0] && kp[1] >= tl[1] && kp[1] <= br[1]);
            }
        }
    });
}

fn synthetic_label_count() {
    proptest!(cases(32), |(cfg in synth_strategy())| {
        let (_, labels) = generate(&cfg).unwrap();
        let positives: usize = labels.values().map(|s| s.labels.values().filter(|&&l| l).count()).sum();
        let mut expected = 0;
        for set in labels.values() {
            if let Some((&first, _)) = set.labels.iter().find(|(_, &l)| l) {
                // first labeled frame is the 0-based onset
                expected += cfg.track_length - first as usize;
            }
        }
        prop_assert_eq!(positives, expected);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let track = simulate_track(&cfg, Some(cfg.anomaly_kind), &mut rng);
        let onset = track.onset.unwrap();
        prop_assert!(onset >= 1 && onset < cfg.track_length);
    });
}

fn run_cli(args: &[&str]) -> (i32, String, String) {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = trajmask::cli::run_with(std::iter::once("trajmask").chain(args.iter().copied()), &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn cli_defaults_and_help() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let (code, _, err) = run_cli(&["gen-synth", "--out", d, "--train-tracks", "2", "--normal-tracks", "1", "--anomalous-tracks", "1", "--track-length", "20"]);
    assert_eq!(code, 0, "{err}");
    let ckpt = dir.path().join("m.ckpt");
    let tracks = dir.path().join("train_tracks.csv");
    let (code, _, err) = run_cli(&["train", "--tracks", tracks.to_str().unwrap(), "--out", ckpt.to_str().unwrap(), "--max-steps", "0"]);
    assert_eq!(code, 0, "{err}");
    let stored = trajmask::checkpoint::Checkpoint::load(&ckpt).unwrap().config;
    let mut expected = TrainConfig { max_steps: Some(0), ..TrainConfig::default() };
    expected.model.input_width = 42;
    assert_eq!(stored, expected);

    let help = |cmd: &str| run_cli(&[cmd, "--help"]).1;
    let train_flags = [
        "--tracks", "--out", "--config", "--log", "--window-length", "--segment-length", "--tasks",
        "--no-hard-negatives", "--no-soft-negatives", "--single-task-full-u", "--stop-gradient-targets", "--seed",
        "--max-steps", "--epochs", "--batch-size", "--learning-rate", "--latent-width", "--layers", "--heads",
        "--feedforward-width", "--grad-clip-norm", "--checkpoint-every", "--stride", "--frame-size", "--sequential",
    ];
    let scoring_flags = [
        "--checkpoint", "--tracks", "--tasks", "--eval-segment-length", "--stride", "--aggregation", "--attribution",
        "--smoothing", "--normalize-per-scene", "--frame-size", "--sequential",
    ];
    let synth_flags = [
        "--out", "--seed", "--train-tracks", "--normal-tracks", "--anomalous-tracks", "--track-length", "--joints",
        "--anomaly-kind", "--noise-std", "--frame-size",
    ];
    for (cmd, flags) in [("train", &train_flags[..]), ("evaluate", &scoring_flags[..]), ("score", &scoring_flags[..]), ("gen-synth", &synth_flags[..])] {
        let text = help(cmd);
        for f in flags {
            assert!(text.contains(f), "{cmd} --help lacks {f}");
        }
    }
    let eval_help = help("evaluate");
    for default in ["[default: 1]", "[default: max]", "[default: occluded]", "[default: 1280x720]"] {
        assert!(eval_help.contains(default), "evaluate --help lacks {default}");
    }
    assert_eq!(trajmask::scoring::EvalConfig::default().stride, 1);
}

fn cli_single_seed() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    let synth = |out: &str, seed: &str| {
        let (code, _, err) = run_cli(&["gen-synth", "--out", out, "--seed", seed, "--train-tracks", "3", "--normal-tracks", "1", "--anomalous-tracks", "1", "--track-length", "20"]);
        assert_eq!(code, 0, "{err}");
    };
    std::fs::create_dir_all(p("a")).unwrap();
    std::fs::create_dir_all(p("b")).unwrap();
    synth(&p("a"), "4");
    synth(&p("b"), "4");
    let read = |f: String| std::fs::read(f).unwrap();
    assert_eq!(read(p("a/train_tracks.csv")), read(p("b/train_tracks.csv")));
    let train = |seed: &str, out: &str| {
        let (code, _, err) = run_cli(&[
            "train", "--tracks", &p("a/train_tracks.csv"), "--out", out, "--seed", seed, "--max-steps", "2",
            "--latent-width", "8", "--layers", "1", "--heads", "2", "--feedforward-width", "8", "--batch-size", "4",
        ]);
        assert_eq!(code, 0, "{err}");
        read(out.to_string())
    };
    let first = train("9", &p("x.ckpt"));
    assert_eq!(first, train("9", &p("y.ckpt")));
    assert_ne!(first, train("10", &p("z.ckpt")));
}

pub type Suite = (&'static str, fn());

/// One entry per stated invariant or property.
pub const SUITES: &[Suite] = &[
    ("denormalize round trip", denormalize_round_trip),
    ("stride-1 windows cover the track", stride_one_windows_cover_track),
    ("interpolated fill within endpoints", interpolated_fill_within_endpoints),
    ("merge is pure placement", merge_is_pure_placement),
    ("occlusion is deterministic", occlusion_is_deterministic),
    ("short occluded runs are disjoint", short_runs_are_disjoint),
    ("encoder/decoder shapes", model_shapes_hold),
    ("parameter count shared across tasks", parameter_count_shared_across_tasks),
    ("regularizer monotone in distance", regularizer_monotone),
    ("losses non-negative", losses_non_negative),
    ("gradients match finite differences", gradients_match_finite_differences),
    ("decoder loss triangle bound", decoder_loss_triangle),
    ("single-index hinge drops soft term", single_index_hinge),
    ("joint update equals summed update", joint_update_equals_summed_update),
    ("reported losses finite", reported_losses_finite),
    ("single task with whole latent tensor trains", single_task_full_u_trains),
    ("AUC invariant under increasing maps", auc_monotone_invariance),
    ("AUC complements under label flip", auc_label_flip),
    ("segment error zero iff match", segment_error_zero_iff_match),
    ("max aggregation monotone", max_aggregation_monotone),
    ("synthetic coordinates in unit square", synthetic_coordinates_in_unit_square),
    ("synthetic bbox contains joints", synthetic_bbox_contains_joints),
    ("synthetic label count", synthetic_label_count),
    ("CLI defaults and help", cli_defaults_and_help),
    ("CLI single seed", cli_single_seed),
];

/// Runs `suite`, turning a panic into an error message.
pub fn run_suite(suite: &Suite) -> Result<(), String> {
    catch_unwind(AssertUnwindSafe(suite.1)).map_err(|e| {
        e.downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into())
    })
}
