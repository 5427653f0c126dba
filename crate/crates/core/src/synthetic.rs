//! Labeled synthetic pose tracks.
//!
//! A normal track is a walking skeleton: the root moves at constant velocity
//! along a path that stays inside an inner margin of the frame, every joint
//! swings around its rest offset with its own phase, and each coordinate gets
//! small Gaussian jitter. The swing advances with the distance walked, so a
//! faster root also means faster limbs and a stopped root means still limbs.
//! An anomalous track follows the same recipe until an onset frame, after
//! which the selected perturbation applies and the root may bounce off the
//! margin. Each track is its own scene, so frame labels are per track.
//!
//! Coordinates are produced in normalized units and written out in pixels of
//! the configured frame size.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{FrameLabelSet, FrameLabels, PoseFrame, PoseTrack, DEFAULT_JOINTS};
use crate::error::{Error, Result};

/// Jitter is cut at this many standard deviations.
pub const JITTER_CLIP: f64 = 1.5;

const ROOT_X: (f64, f64) = (0.2, 0.8);
const ROOT_Y: (f64, f64) = (0.3, 0.7);
const SPEED: (f64, f64) = (0.0015, 0.003);

// rest pose relative to the hip centre, in units of body height (y down)
const REST_POSE: [[f64; 2]; DEFAULT_JOINTS] = [
    [0.0, -0.45],
    [-0.02, -0.47],
    [0.02, -0.47],
    [-0.04, -0.45],
    [0.04, -0.45],
    [-0.10, -0.35],
    [0.10, -0.35],
    [-0.13, -0.18],
    [0.13, -0.18],
    [-0.14, -0.02],
    [0.14, -0.02],
    [-0.07, 0.0],
    [0.07, 0.0],
    [-0.07, 0.25],
    [0.07, 0.25],
    [-0.07, 0.50],
    [0.07, 0.50],
];

// horizontal swing per joint, in units of body height
const SWING: [f64; DEFAULT_JOINTS] = [
    0.0025, 0.0025, 0.0025, 0.0025, 0.0025, 0.005, 0.005, 0.015, 0.015, 0.03, 0.03, 0.005, 0.005, 0.025, 0.025, 0.05, 0.05,
];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyKind {
    /// Root speed multiplied by five.
    #[default]
    VelocityJump,
    /// Root velocity negated.
    Reversal,
    /// Root and limbs stop; only jitter remains.
    Freeze,
}

impl AnomalyKind {
    pub const ALL: [AnomalyKind; 3] = [AnomalyKind::VelocityJump, AnomalyKind::Reversal, AnomalyKind::Freeze];

    pub fn as_str(self) -> &'static str {
        match self {
            AnomalyKind::VelocityJump => "velocity_jump",
            AnomalyKind::Reversal => "reversal",
            AnomalyKind::Freeze => "freeze",
        }
    }
}

impl fmt::Display for AnomalyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AnomalyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == norm)
            .ok_or_else(|| Error::Config(format!("unknown anomaly kind {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_normal_tracks: usize,
    pub n_anomalous_tracks: usize,
    pub track_length: usize,
    pub joints: usize,
    pub seed: u64,
    pub anomaly_kind: AnomalyKind,
    pub noise_std: f64,
    pub frame_size: (f64, f64),
    /// Shortest window the tracks must fit.
    pub min_window: usize,
    /// Scene ids are `<prefix>_<index>`; the prefix also selects the random stream.
    pub scene_prefix: String,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_normal_tracks: 200,
            n_anomalous_tracks: 0,
            track_length: 80,
            joints: DEFAULT_JOINTS,
            seed: 0,
            anomaly_kind: AnomalyKind::default(),
            noise_std: 0.002,
            frame_size: (1280.0, 720.0),
            min_window: 18,
            scene_prefix: "scene".into(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.track_length < self.min_window.max(2) {
            return Err(Error::Config(format!(
                "track_length {} is shorter than the window {}",
                self.track_length, self.min_window
            )));
        }
        if self.joints == 0 {
            return Err(Error::Config("joints must be positive".into()));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config("noise_std must be finite and non-negative".into()));
        }
        if !(self.frame_size.0 > 0.0 && self.frame_size.1 > 0.0) {
            return Err(Error::Config("frame size must be positive".into()));
        }
        Ok(())
    }
}

/// Normalized joint positions of one track plus its first anomalous frame.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthTrack {
    /// `track_length` frames of `joints` normalized `[x, y]` pairs.
    pub joints: Vec<Vec<[f64; 2]>>,
    pub onset: Option<usize>,
}

fn rest_offset(k: usize) -> ([f64; 2], f64) {
    let base = REST_POSE[k % DEFAULT_JOINTS];
    // extra joints beyond the template sit slightly off their template twin
    let shift = (k / DEFAULT_JOINTS) as f64 * 0.01;
    ([base[0] + shift, base[1] - shift], SWING[k % DEFAULT_JOINTS])
}

fn stream_id(prefix: &str, index: u64) -> u64 {
    // FNV-1a of the prefix in the high bits, track index in the low bits
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in prefix.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    (h << 24) ^ index
}

fn bounce(pos: &mut f64, vel: &mut f64, (lo, hi): (f64, f64)) {
    // fold back into range; a large step may need several reflections
    for _ in 0..8 {
        if *pos < lo {
            *pos = 2.0 * lo - *pos;
            *vel = -*vel;
        } else if *pos > hi {
            *pos = 2.0 * hi - *pos;
            *vel = -*vel;
        } else {
            return;
        }
    }
    *pos = pos.clamp(lo, hi);
}

/// One track in normalized coordinates.
pub fn simulate_track(cfg: &SynthConfig, anomaly: Option<AnomalyKind>, rng: &mut impl Rng) -> SynthTrack {
    let n = cfg.track_length;
    let height = rng.gen_range(0.15..0.25);
    // the speed range spans less than the jump factor, so a jumped track is
    // always faster than every normal one
    let speed = rng.gen_range(SPEED.0..SPEED.1);
    let heading = rng.gen_range(0.0..2.0 * PI);
    let mut vel = [speed * heading.cos(), speed * heading.sin()];
    // start where the constant-velocity path stays inside the box
    let mut root = [0.0; 2];
    for (d, (lo, hi)) in [ROOT_X, ROOT_Y].into_iter().enumerate() {
        let reach = vel[d] * n.saturating_sub(1) as f64;
        let (first, last) = (lo + (-reach).max(0.0), hi - reach.max(0.0));
        // a path longer than the box is centred and will bounce
        root[d] = if first <= last { rng.gen_range(first..=last) } else { 0.5 * (lo + hi - reach) };
    }
    let period = rng.gen_range(12.0..24.0);
    let omega = 2.0 * PI / period;
    let phase0 = rng.gen_range(0.0..2.0 * PI);
    let onset = anomaly.map(|_| rng.gen_range(n / 4..=(3 * n / 4).max(n / 4)));
    let jitter = Normal::<f64>::new(0.0, 1.0).expect("unit normal");
    let clip = JITTER_CLIP;

    let mut gait_phase = phase0;
    let mut frames = Vec::with_capacity(n);
    for t in 0..n {
        if t > 0 {
            let mut step = vel;
            if onset.is_some_and(|o| t >= o) {
                match anomaly.expect("onset implies anomaly") {
                    AnomalyKind::VelocityJump => step = [5.0 * vel[0], 5.0 * vel[1]],
                    AnomalyKind::Reversal => step = [-vel[0], -vel[1]],
                    AnomalyKind::Freeze => step = [0.0, 0.0],
                }
            }
            let before = step;
            root[0] += step[0];
            root[1] += step[1];
            bounce(&mut root[0], &mut step[0], ROOT_X);
            bounce(&mut root[1], &mut step[1], ROOT_Y);
            // keep the underlying velocity consistent with any reflection
            for d in 0..2 {
                if step[d].signum() != before[d].signum() {
                    vel[d] = -vel[d];
                }
            }
            // cadence follows the distance walked
            let cruise = vel[0].hypot(vel[1]);
            gait_phase += omega * before[0].hypot(before[1]) / cruise;
        }
        let joints = (0..cfg.joints)
            .map(|k| {
                let (rest, swing) = rest_offset(k);
                let phi = gait_phase + 2.0 * PI * k as f64 / cfg.joints as f64;
                let gx = swing * phi.sin();
                let gy = 0.01 * (2.0 * phi).sin();
                let mut p = [0.0; 2];
                for (d, g) in [gx, gy].into_iter().enumerate() {
                    let noise = jitter.sample(rng).clamp(-clip, clip) * cfg.noise_std;
                    p[d] = (root[d] + height * (rest[d] + g) + noise).clamp(0.0, 1.0);
                }
                p
            })
            .collect();
        frames.push(joints);
    }
    SynthTrack { joints: frames, onset }
}

/// Axis-aligned hull of `joints`, padded by 5% of its extent on every side.
pub fn padded_hull(joints: &[[f64; 2]]) -> [[f64; 2]; 4] {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for p in joints {
        for d in 0..2 {
            lo[d] = lo[d].min(p[d]);
            hi[d] = hi[d].max(p[d]);
        }
    }
    for d in 0..2 {
        let pad = 0.05 * (hi[d] - lo[d]);
        lo[d] = (lo[d] - pad).max(0.0);
        hi[d] = (hi[d] + pad).min(1.0);
    }
    [[lo[0], lo[1]], [hi[0], lo[1]], [lo[0], hi[1]], [hi[0], hi[1]]]
}

fn to_pose_track(cfg: &SynthConfig, scene: String, track: &SynthTrack) -> PoseTrack {
    let (w, h) = cfg.frame_size;
    let px = |p: [f64; 2]| [p[0] * w, p[1] * h];
    let frames = track
        .joints
        .iter()
        .enumerate()
        .map(|(t, joints)| PoseFrame {
            frame_index: t as i64,
            keypoints: joints.iter().map(|&p| px(p)).collect(),
            confidence: vec![1.0; joints.len()],
            bbox: padded_hull(joints).map(px),
        })
        .collect();
    PoseTrack {
        scene_id: scene,
        track_id: 0,
        frames,
    }
}

/// Normal tracks first, then anomalous ones; every frame of every scene is labeled.
pub fn generate(cfg: &SynthConfig) -> Result<(Vec<PoseTrack>, FrameLabels)> {
    cfg.validate()?;
    let total = cfg.n_normal_tracks + cfg.n_anomalous_tracks;
    let mut tracks = Vec::with_capacity(total);
    let mut labels = FrameLabels::new();
    for i in 0..total {
        let anomaly = (i >= cfg.n_normal_tracks).then_some(cfg.anomaly_kind);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(stream_id(&cfg.scene_prefix, i as u64));
        let sim = simulate_track(cfg, anomaly, &mut rng);
        let scene = format!("{}_{i:04}", cfg.scene_prefix);
        let set = FrameLabelSet {
            scene_id: scene.clone(),
            labels: (0..cfg.track_length)
                .map(|t| (t as i64, sim.onset.is_some_and(|o| t >= o)))
                .collect(),
        };
        tracks.push(to_pose_track(cfg, scene.clone(), &sim));
        labels.insert(scene, set);
    }
    Ok((tracks, labels))
}
