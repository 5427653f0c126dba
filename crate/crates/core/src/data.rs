//! Pose-track ingestion and fixed-length trajectory windows.
//!
//! Pose-track files hold one detection per line:
//!
//! ```text
//! scene_id, track_id, frame_index, x_0, y_0, c_0, ..., x_{J-1}, y_{J-1}, c_{J-1}, bbox corners (8 values)
//! ```
//!
//! Fields are comma separated, or the whole line is a JSON array with the same
//! field order. Blank lines and lines starting with `#` are skipped. The bbox
//! corners are top-left, top-right, bottom-left, bottom-right, each as `x, y`.
//!
//! A [`Trajectory`] row packs the `J` keypoints and then the four bbox
//! corners, each as an `(x, y)` pair in coordinates normalized by frame size,
//! so a row has `2 * (J + 4)` entries.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Mat;

pub const DEFAULT_JOINTS: usize = 17;
pub const BBOX_CORNERS: usize = 4;
pub const BBOX_COORDS: usize = 2 * BBOX_CORNERS;

#[derive(Clone, Debug, PartialEq)]
pub struct PoseFrame {
    pub frame_index: i64,
    /// Pixel coordinates, one `[x, y]` per joint.
    pub keypoints: Vec<[f64; 2]>,
    pub confidence: Vec<f64>,
    /// Top-left, top-right, bottom-left, bottom-right.
    pub bbox: [[f64; 2]; BBOX_CORNERS],
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoseTrack {
    pub scene_id: String,
    pub track_id: i64,
    /// Sorted by strictly increasing `frame_index`.
    pub frames: Vec<PoseFrame>,
}

impl PoseTrack {
    pub fn num_joints(&self) -> usize {
        self.frames.first().map_or(0, |f| f.keypoints.len())
    }
}

/// Ground-truth per-frame anomaly labels for one scene.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrameLabelSet {
    pub scene_id: String,
    pub labels: BTreeMap<i64, bool>,
}

pub type FrameLabels = BTreeMap<String, FrameLabelSet>;

#[derive(Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord)]
pub struct WindowOrigin {
    pub scene_id: String,
    pub track_id: i64,
    pub first_frame: i64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    /// `T × 2(J+4)`, visible entries within `[0, 1]`.
    pub points: Mat,
    /// `T × (J+4)`, row-major; bbox corners are always visible.
    pub visibility: Vec<bool>,
    pub origin: WindowOrigin,
    pub frame_size: (f64, f64),
}

impl Trajectory {
    /// Wraps already-normalized points; every point counts as visible.
    pub fn from_points(points: Mat, origin: WindowOrigin) -> Self {
        let visibility = vec![true; points.rows() * points.cols().div_ceil(2)];
        Self {
            points,
            visibility,
            origin,
            frame_size: Normalization::default().frame_size,
        }
    }

    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.rows() == 0
    }

    /// Number of tracked points per frame (`J + 4`).
    pub fn points_per_frame(&self) -> usize {
        self.points.cols() / 2
    }

    pub fn num_joints(&self) -> usize {
        self.points_per_frame() - BBOX_CORNERS
    }

    pub fn is_visible(&self, t: usize, point: usize) -> bool {
        self.visibility[t * self.points_per_frame() + point]
    }

    /// Pixel coordinates of every point.
    pub fn denormalize(&self) -> Mat {
        let (w, h) = self.frame_size;
        Mat::from_fn(self.points.rows(), self.points.cols(), |r, c| {
            self.points.get(r, c) * if c % 2 == 0 { w } else { h }
        })
    }
}

/// How raw pixel windows become normalized trajectories.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalization {
    pub frame_size: (f64, f64),
    /// Keypoints with confidence strictly below this are treated as missing.
    pub visibility_threshold: f64,
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            frame_size: (1280.0, 720.0),
            visibility_threshold: 0.0,
        }
    }
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn split_fields(line: &str, path: &Path, lineno: usize) -> Result<Vec<String>> {
    let trimmed = line.trim();
    if trimmed.starts_with('[') {
        let values: Vec<serde_json::Value> = serde_json::from_str(trimmed)
            .map_err(|e| parse_err(path, lineno, format!("invalid JSON record: {e}")))?;
        Ok(values
            .into_iter()
            .map(|v| match v {
                serde_json::Value::String(s) => s,
                other => other.to_string(),
            })
            .collect())
    } else {
        Ok(trimmed.split(',').map(|f| f.trim().to_string()).collect())
    }
}

fn num<T: std::str::FromStr>(field: &str, what: &str, path: &Path, line: usize) -> Result<T> {
    field
        .parse()
        .map_err(|_| parse_err(path, line, format!("bad {what}: {field:?}")))
}

fn records(path: &Path) -> Result<Vec<(usize, Vec<String>)>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        out.push((i + 1, split_fields(t, path, i + 1)?));
    }
    Ok(out)
}

/// Reads a pose-track file; tracks come out ordered by `(scene_id, track_id)`.
pub fn load_pose_tracks(path: impl AsRef<Path>) -> Result<Vec<PoseTrack>> {
    let path = path.as_ref();
    let mut tracks: BTreeMap<(String, i64), Vec<PoseFrame>> = BTreeMap::new();
    let mut joints: Option<usize> = None;

    for (line, fields) in records(path)? {
        let extra = fields.len().checked_sub(3 + BBOX_COORDS);
        let j = match extra {
            Some(e) if e % 3 == 0 && e > 0 => e / 3,
            _ => {
                return Err(parse_err(
                    path,
                    line,
                    format!("expected 3 + 3J + 8 fields, got {}", fields.len()),
                ))
            }
        };
        match joints {
            None => joints = Some(j),
            Some(prev) if prev != j => {
                return Err(parse_err(path, line, format!("{j} joints, earlier records had {prev}")))
            }
            _ => {}
        }
        let scene = fields[0].clone();
        let track: i64 = num(&fields[1], "track_id", path, line)?;
        let frame_index: i64 = num(&fields[2], "frame_index", path, line)?;
        let vals = fields[3..]
            .iter()
            .map(|f| num::<f64>(f, "coordinate", path, line))
            .collect::<Result<Vec<_>>>()?;
        if let Some(bad) = vals.iter().find(|v| !v.is_finite()) {
            return Err(parse_err(path, line, format!("non-finite value {bad}")));
        }
        let keypoints = (0..j).map(|k| [vals[3 * k], vals[3 * k + 1]]).collect();
        let confidence = (0..j).map(|k| vals[3 * k + 2]).collect();
        let b = &vals[3 * j..];
        let bbox = [[b[0], b[1]], [b[2], b[3]], [b[4], b[5]], [b[6], b[7]]];
        tracks.entry((scene, track)).or_default().push(PoseFrame {
            frame_index,
            keypoints,
            confidence,
            bbox,
        });
    }

    let mut out = Vec::with_capacity(tracks.len());
    for ((scene_id, track_id), mut frames) in tracks {
        frames.sort_by_key(|f| f.frame_index);
        if let Some(w) = frames.windows(2).find(|w| w[0].frame_index == w[1].frame_index) {
            return Err(Error::DuplicateFrame {
                scene: scene_id,
                track: track_id,
                frame: w[0].frame_index,
            });
        }
        out.push(PoseTrack {
            scene_id,
            track_id,
            frames,
        });
    }
    Ok(out)
}

/// Writes tracks in the comma-separated pose-track format.
pub fn write_pose_tracks(tracks: &[PoseTrack], mut out: impl Write) -> Result<()> {
    for track in tracks {
        for f in &track.frames {
            write!(out, "{},{},{}", track.scene_id, track.track_id, f.frame_index)?;
            for (kp, c) in f.keypoints.iter().zip(&f.confidence) {
                write!(out, ",{},{},{}", kp[0], kp[1], c)?;
            }
            for corner in &f.bbox {
                write!(out, ",{},{}", corner[0], corner[1])?;
            }
            writeln!(out)?;
        }
    }
    Ok(())
}

/// Reads a `scene_id, frame_index, label` file.
pub fn load_frame_labels(path: impl AsRef<Path>) -> Result<FrameLabels> {
    let path = path.as_ref();
    let mut out = FrameLabels::new();
    for (line, fields) in records(path)? {
        if fields.len() != 3 {
            return Err(parse_err(path, line, format!("expected 3 fields, got {}", fields.len())));
        }
        let frame: i64 = num(&fields[1], "frame_index", path, line)?;
        let label = match fields[2].as_str() {
            "0" => false,
            "1" => true,
            other => return Err(parse_err(path, line, format!("label must be 0 or 1, got {other:?}"))),
        };
        let set = out.entry(fields[0].clone()).or_insert_with(|| FrameLabelSet {
            scene_id: fields[0].clone(),
            labels: BTreeMap::new(),
        });
        if set.labels.insert(frame, label).is_some() {
            return Err(parse_err(path, line, format!("duplicate label for frame {frame}")));
        }
    }
    Ok(out)
}

pub fn write_frame_labels(labels: &FrameLabels, mut out: impl Write) -> Result<()> {
    for set in labels.values() {
        for (frame, &l) in &set.labels {
            writeln!(out, "{},{},{}", set.scene_id, frame, u8::from(l))?;
        }
    }
    Ok(())
}

/// Cuts a track into windows of `len` consecutive frames.
///
/// Windows start every `stride` frames along the track; a window whose
/// frame indices are not consecutive is skipped.
pub fn sliding_windows(
    track: &PoseTrack,
    len: usize,
    stride: usize,
    norm: &Normalization,
) -> Result<Vec<Trajectory>> {
    if len < 3 {
        return Err(Error::Precondition(format!("window length {len} < 3")));
    }
    if stride == 0 {
        return Err(Error::Precondition("stride must be at least 1".into()));
    }
    let frames = &track.frames;
    if frames.len() < len {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for start in (0..=frames.len() - len).step_by(stride) {
        let window = &frames[start..start + len];
        let span = window[len - 1].frame_index - window[0].frame_index;
        if span != (len - 1) as i64 {
            continue;
        }
        let mut traj = normalize_window(window, norm);
        traj.origin = WindowOrigin {
            scene_id: track.scene_id.clone(),
            track_id: track.track_id,
            first_frame: window[0].frame_index,
        };
        out.push(traj);
    }
    Ok(out)
}

/// Scales pixel coordinates into `[0, 1]` and fills missing keypoints.
///
/// A missing keypoint takes the linear interpolation of its nearest visible
/// observations before and after, the nearest one when only one side exists,
/// or the bbox center when it is never visible in the window. The returned
/// origin is left empty; [`sliding_windows`] fills it in.
pub fn normalize_window(raw: &[PoseFrame], norm: &Normalization) -> Trajectory {
    let (w, h) = norm.frame_size;
    let t_len = raw.len();
    let joints = raw.first().map_or(0, |f| f.keypoints.len());
    let per_frame = joints + BBOX_CORNERS;
    let mut points = Mat::zeros(t_len, 2 * per_frame);
    let mut visibility = vec![true; t_len * per_frame];

    for (t, f) in raw.iter().enumerate() {
        for (k, kp) in f.keypoints.iter().enumerate() {
            points.set(t, 2 * k, kp[0] / w);
            points.set(t, 2 * k + 1, kp[1] / h);
            visibility[t * per_frame + k] = f.confidence[k] >= norm.visibility_threshold;
        }
        for (c, corner) in f.bbox.iter().enumerate() {
            points.set(t, 2 * (joints + c), corner[0] / w);
            points.set(t, 2 * (joints + c) + 1, corner[1] / h);
        }
    }

    for k in 0..joints {
        let visible: Vec<usize> = (0..t_len).filter(|&t| visibility[t * per_frame + k]).collect();
        for t in 0..t_len {
            if visibility[t * per_frame + k] {
                continue;
            }
            let before = visible.iter().rev().find(|&&v| v < t).copied();
            let after = visible.iter().find(|&&v| v > t).copied();
            let fill = |d: usize| -> f64 {
                match (before, after) {
                    (Some(a), Some(b)) => {
                        let alpha = (t - a) as f64 / (b - a) as f64;
                        let (pa, pb) = (points.get(a, 2 * k + d), points.get(b, 2 * k + d));
                        pa + alpha * (pb - pa)
                    }
                    (Some(a), None) => points.get(a, 2 * k + d),
                    (None, Some(b)) => points.get(b, 2 * k + d),
                    (None, None) => {
                        let base = 2 * joints + d;
                        (0..BBOX_CORNERS).map(|c| points.get(t, base + 2 * c)).sum::<f64>()
                            / BBOX_CORNERS as f64
                    }
                }
            };
            let (x, y) = (fill(0), fill(1));
            points.set(t, 2 * k, x);
            points.set(t, 2 * k + 1, y);
        }
    }

    Trajectory {
        points,
        visibility,
        origin: WindowOrigin {
            scene_id: String::new(),
            track_id: 0,
            first_frame: raw.first().map_or(0, |f| f.frame_index),
        },
        frame_size: (w, h),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn frame(idx: i64, joints: usize, pos: f64) -> PoseFrame {
        PoseFrame {
            frame_index: idx,
            keypoints: vec![[pos, pos]; joints],
            confidence: vec![1.0; joints],
            bbox: [[pos - 10.0, pos - 10.0], [pos + 10.0, pos - 10.0], [pos - 10.0, pos + 10.0], [pos + 10.0, pos + 10.0]],
        }
    }

    fn track(n: usize) -> PoseTrack {
        PoseTrack {
            scene_id: "s".into(),
            track_id: 1,
            frames: (0..n).map(|i| frame(i as i64, 2, 100.0 + i as f64)).collect(),
        }
    }

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn loads_two_tracks_with_counts() {
        let mut tracks = Vec::new();
        for id in 0..2 {
            let mut t = track(20);
            t.track_id = id;
            tracks.push(t);
        }
        let mut buf = Vec::new();
        write_pose_tracks(&tracks, &mut buf).unwrap();
        let f = write_tmp(std::str::from_utf8(&buf).unwrap());
        let loaded = load_pose_tracks(f.path()).unwrap();
        assert_eq!(loaded.len(), 2);
        assert!(loaded.iter().all(|t| t.frames.len() == 20));
        assert_eq!(loaded, tracks);
    }

    #[test]
    fn empty_file_gives_no_tracks() {
        let f = write_tmp("");
        assert!(load_pose_tracks(f.path()).unwrap().is_empty());
    }

    #[test]
    fn out_of_order_frames_are_sorted() {
        let body = "a,1,5,1,2,1,0,0,1,0,0,1,1,1\n\
                    a,1,3,1,2,1,0,0,1,0,0,1,1,1\n\
                    [\"a\", 1, 4, 1, 2, 1, 0, 0, 1, 0, 0, 1, 1, 1]\n";
        let f = write_tmp(body);
        let t = load_pose_tracks(f.path()).unwrap();
        let idx: Vec<i64> = t[0].frames.iter().map(|f| f.frame_index).collect();
        assert_eq!(idx, vec![3, 4, 5]);
    }

    #[test]
    fn malformed_line_names_line_number() {
        let f = write_tmp("# header\na,1,0,1,2,1,0,0,1,0,0,1,1,1\na,1,x,1,2,1,0,0,1,0,0,1,1,1\n");
        match load_pose_tracks(f.path()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
        let f = write_tmp("a,1,0,1,2\n");
        assert!(matches!(load_pose_tracks(f.path()), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn duplicate_frame_rejected() {
        let f = write_tmp("a,1,0,1,2,1,0,0,1,0,0,1,1,1\na,1,0,1,2,1,0,0,1,0,0,1,1,1\n");
        assert!(matches!(load_pose_tracks(f.path()), Err(Error::DuplicateFrame { frame: 0, .. })));
    }

    #[test]
    fn label_file_round_trip() {
        let f = write_tmp("s,0,0\ns,1,1\nt,4,0\n");
        let labels = load_frame_labels(f.path()).unwrap();
        assert!(labels["s"].labels[&1]);
        let mut buf = Vec::new();
        write_frame_labels(&labels, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "s,0,0\ns,1,1\nt,4,0\n");
        let bad = write_tmp("s,0,2\n");
        assert!(load_frame_labels(bad.path()).is_err());
    }

    #[test]
    fn window_counts() {
        let n = Normalization::default();
        assert_eq!(sliding_windows(&track(20), 18, 1, &n).unwrap().len(), 3);
        assert_eq!(sliding_windows(&track(18), 18, 1, &n).unwrap().len(), 1);
        assert_eq!(sliding_windows(&track(17), 18, 1, &n).unwrap().len(), 0);
        assert_eq!(sliding_windows(&track(40), 18, 5, &n).unwrap().len(), 5);
        assert!(sliding_windows(&track(20), 2, 1, &n).is_err());
        assert!(sliding_windows(&track(20), 18, 0, &n).is_err());
    }

    #[test]
    fn windows_skip_gaps() {
        let mut t = track(20);
        t.frames.remove(10);
        for f in t.frames.iter_mut().skip(10) {
            f.frame_index += 1;
        }
        // every 18-frame window of the 19 remaining frames straddles the gap
        let w = sliding_windows(&t, 18, 1, &Normalization::default()).unwrap();
        assert!(w.is_empty());
        let w = sliding_windows(&t, 5, 1, &Normalization::default()).unwrap();
        assert!(w.iter().all(|w| w.origin.first_frame + 4 < 10 || w.origin.first_frame > 10));
        assert_eq!(w.len(), 6 + 5);
    }

    #[test]
    fn normalization_divides_by_frame_size() {
        let mut f = frame(0, 1, 0.0);
        f.keypoints[0] = [640.0, 360.0];
        let traj = normalize_window(&[f], &Normalization::default());
        assert_eq!(traj.points.get(0, 0), 0.5);
        assert_eq!(traj.points.get(0, 1), 0.5);
    }

    #[test]
    fn missing_keypoint_interpolated() {
        let size = Normalization { frame_size: (1.0, 1.0), visibility_threshold: 0.5 };
        let mut frames: Vec<PoseFrame> = (0..3).map(|i| frame(i, 1, 0.0)).collect();
        frames[0].keypoints[0] = [0.2, 0.2];
        frames[2].keypoints[0] = [0.4, 0.4];
        frames[1].keypoints[0] = [9.0, 9.0];
        frames[1].confidence[0] = 0.1;
        let traj = normalize_window(&frames, &size);
        assert!(!traj.is_visible(1, 0));
        assert!((traj.points.get(1, 0) - 0.3).abs() < 1e-15);
        assert!((traj.points.get(1, 1) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn never_visible_keypoint_uses_bbox_center() {
        let size = Normalization { frame_size: (100.0, 100.0), visibility_threshold: 0.5 };
        let mut frames: Vec<PoseFrame> = (0..4).map(|i| frame(i, 2, 50.0 + i as f64)).collect();
        for f in &mut frames {
            f.confidence[1] = 0.0;
        }
        let traj = normalize_window(&frames, &size);
        for t in 0..4 {
            let c = (50.0 + t as f64) / 100.0;
            assert!((traj.points.get(t, 2) - c).abs() < 1e-12);
            assert!((traj.points.get(t, 3) - c).abs() < 1e-12);
        }
    }

    fn arb_frames() -> impl Strategy<Value = (Vec<PoseFrame>, (f64, f64))> {
        (3usize..10, 1usize..4, 10.0f64..2000.0, 10.0f64..2000.0).prop_flat_map(|(t, j, w, h)| {
            let coords = prop::collection::vec((0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0), t * j);
            (coords, Just((t, j, w, h)))
        }).prop_map(|(coords, (t, j, w, h))| {
            let frames = (0..t)
                .map(|i| PoseFrame {
                    frame_index: i as i64,
                    keypoints: (0..j).map(|k| [coords[i * j + k].0 * w, coords[i * j + k].1 * h]).collect(),
                    confidence: (0..j).map(|k| coords[i * j + k].2).collect(),
                    bbox: [[0.0, 0.0], [w, 0.0], [0.0, h], [w, h]],
                })
                .collect();
            (frames, (w, h))
        })
    }

    proptest! {
        #[test]
        fn denormalize_recovers_visible_pixels((frames, size) in arb_frames()) {
            let norm = Normalization { frame_size: size, visibility_threshold: 0.3 };
            let traj = normalize_window(&frames, &norm);
            let px = traj.denormalize();
            for (t, f) in frames.iter().enumerate() {
                for (k, kp) in f.keypoints.iter().enumerate() {
                    if traj.is_visible(t, k) {
                        for d in 0..2 {
                            let got = px.get(t, 2 * k + d);
                            prop_assert!((got - kp[d]).abs() <= 1e-9 * kp[d].abs().max(1e-300));
                        }
                    }
                }
            }
        }

        #[test]
        fn interpolated_fill_stays_between_endpoints((frames, size) in arb_frames()) {
            let norm = Normalization { frame_size: size, visibility_threshold: 0.5 };
            let traj = normalize_window(&frames, &norm);
            let j = traj.num_joints();
            for k in 0..j {
                let visible: Vec<usize> = (0..traj.len()).filter(|&t| traj.is_visible(t, k)).collect();
                for t in 0..traj.len() {
                    if traj.is_visible(t, k) { continue; }
                    let a = visible.iter().rev().find(|&&v| v < t);
                    let b = visible.iter().find(|&&v| v > t);
                    if let (Some(&a), Some(&b)) = (a, b) {
                        for d in 0..2 {
                            let (pa, pb) = (traj.points.get(a, 2 * k + d), traj.points.get(b, 2 * k + d));
                            let v = traj.points.get(t, 2 * k + d);
                            prop_assert!(v >= pa.min(pb) - 1e-15 && v <= pa.max(pb) + 1e-15);
                        }
                    }
                }
            }
        }

        #[test]
        fn stride_one_windows_cover_every_frame(n in 18usize..40, len in 3usize..18) {
            let t = track(n);
            let w = sliding_windows(&t, len, 1, &Normalization::default()).unwrap();
            prop_assert_eq!(w.len(), n - len + 1);
            let mut covered = vec![false; n];
            for win in &w {
                for k in 0..len { covered[win.origin.first_frame as usize + k] = true; }
            }
            prop_assert!(covered.iter().all(|&c| c));
        }
    }
}
