//! The three occlusion regimes and the merge of observed latents with the
//! learned segment.
//!
//! Indices are 0-based in code. A window of length `T` occluded over the run
//! `start..start + L` is encoded from the complementary timesteps only.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TaskKind {
    /// Reconstruct the past from the future.
    Pst,
    /// Reconstruct the middle from both sides.
    Prs,
    /// Reconstruct the future from the past.
    Ftr,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Pst, TaskKind::Prs, TaskKind::Ftr];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Pst => "Pst",
            TaskKind::Prs => "Prs",
            TaskKind::Ftr => "Ftr",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pst" | "past" => Ok(TaskKind::Pst),
            "prs" | "present" => Ok(TaskKind::Prs),
            "ftr" | "future" => Ok(TaskKind::Ftr),
            _ => Err(Error::Config(format!("unknown task {s:?}, expected Pst, Prs or Ftr"))),
        }
    }
}

/// Which contiguous run of a window is hidden.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OcclusionSpec {
    task: Option<TaskKind>,
    window: usize,
    occluded: Range<usize>,
}

impl OcclusionSpec {
    /// Nothing occluded; every timestep is observed.
    pub fn none(window: usize) -> Self {
        Self {
            task: None,
            window,
            occluded: 0..0,
        }
    }

    pub fn task(&self) -> Option<TaskKind> {
        self.task
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn occluded(&self) -> Range<usize> {
        self.occluded.clone()
    }

    pub fn occluded_len(&self) -> usize {
        self.occluded.len()
    }

    pub fn is_occluded(&self, t: usize) -> bool {
        self.occluded.contains(&t)
    }

    pub fn occluded_indices(&self) -> Vec<usize> {
        self.occluded.clone().collect()
    }

    pub fn observed_indices(&self) -> Vec<usize> {
        (0..self.window).filter(|&t| !self.is_occluded(t)).collect()
    }

    /// `(T_Pst, T_Ftr)` in 1-based frame positions: the past run ends at
    /// `T_Pst` and the future run starts at `T_Ftr`.
    pub fn boundaries(&self) -> (usize, usize) {
        let (s, e) = (self.occluded.start, self.occluded.end);
        match self.task {
            Some(TaskKind::Pst) => (e, self.window + 1),
            Some(TaskKind::Ftr) => (0, s + 1),
            Some(TaskKind::Prs) => (s, e + 1),
            None => (0, self.window + 1),
        }
    }

    /// For every output timestep, the row it takes from `[observed; learned]`.
    pub fn merge_order(&self) -> Vec<usize> {
        let n_obs = self.window - self.occluded_len();
        let mut next_obs = 0;
        (0..self.window)
            .map(|t| {
                if self.is_occluded(t) {
                    n_obs + (t - self.occluded.start)
                } else {
                    next_obs += 1;
                    next_obs - 1
                }
            })
            .collect()
    }
}

/// Occlusion of `len` timesteps in a window of `window` timesteps.
///
/// `Pst` hides the first run, `Ftr` the last, and `Prs` a centered run
/// starting at `(window - len) / 2`.
pub fn make_occlusion(task: TaskKind, window: usize, len: usize) -> Result<OcclusionSpec> {
    let max = match task {
        TaskKind::Prs => window.saturating_sub(2),
        _ => window.saturating_sub(1),
    };
    if len < 1 || len > max {
        return Err(Error::Precondition(format!(
            "{task} occlusion length {len} outside 1..={max} for window {window}"
        )));
    }
    let start = match task {
        TaskKind::Pst => 0,
        TaskKind::Ftr => window - len,
        TaskKind::Prs => (window - len) / 2,
    };
    Ok(OcclusionSpec {
        task: Some(task),
        window,
        occluded: start..start + len,
    })
}

/// Places observed latents and the learned segment back in temporal order.
pub fn reorder_merge(observed: &Mat, learned: &Mat, spec: &OcclusionSpec) -> Result<Mat> {
    let n_obs = spec.window() - spec.occluded_len();
    if observed.rows() != n_obs || learned.rows() != spec.occluded_len() {
        return Err(Error::Shape(format!(
            "merge expects {} observed + {} learned rows, got {} + {}",
            n_obs,
            spec.occluded_len(),
            observed.rows(),
            learned.rows()
        )));
    }
    if n_obs > 0 && learned.rows() > 0 && observed.cols() != learned.cols() {
        return Err(Error::Shape("latent widths differ".into()));
    }
    let cols = if n_obs > 0 { observed.cols() } else { learned.cols() };
    let mut out = Mat::zeros(spec.window(), cols);
    for (t, src) in spec.merge_order().into_iter().enumerate() {
        let row = if src < n_obs {
            observed.row(src)
        } else {
            learned.row(src - n_obs)
        };
        out.row_mut(t).copy_from_slice(row);
    }
    Ok(out)
}
