//! Trajectory tracks, forecasting windows and pivot preprocessing.

mod synth;
mod tsv;

pub use synth::{mode_path, synth_generate, synth_generate_labeled, SynthMode, SynthSpec};
pub use tsv::{emit_tsv, load_tsv, parse_tsv};

use serde::{Deserialize, Serialize};

use crate::error::{MgfError, Result};

pub type Point = [f64; 2];

pub const DEFAULT_T_OBS: usize = 8;
pub const DEFAULT_T_FUT: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrackPoint {
    pub frame: i64,
    pub agent_id: i64,
    pub position: Point,
}

/// One forecasting instance in absolute coordinates (meters).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryWindow {
    pub scene_id: String,
    pub agent_id: i64,
    pub observed: Vec<Point>,
    pub future: Vec<Point>,
}

impl TrajectoryWindow {
    /// Position at the last observed step.
    pub fn pivot(&self) -> Point {
        *self.observed.last().expect("window has at least one observed step")
    }

    pub fn t_obs(&self) -> usize {
        self.observed.len()
    }

    pub fn t_fut(&self) -> usize {
        self.future.len()
    }
}

/// A window expressed relative to its pivot.
#[derive(Clone, Debug, PartialEq)]
pub struct OffsetWindow {
    pub observed_offsets: Vec<Point>,
    pub future_offsets: Vec<Point>,
    pub pivot: Point,
    pub scene_id: String,
    pub agent_id: i64,
}

impl OffsetWindow {
    /// Future offsets flattened to `[x0, y0, x1, y1, ...]`.
    pub fn flat_future(&self) -> Vec<f64> {
        flatten(&self.future_offsets)
    }

    pub fn flat_observed(&self) -> Vec<f64> {
        flatten(&self.observed_offsets)
    }
}

pub fn flatten(points: &[Point]) -> Vec<f64> {
    points.iter().flat_map(|p| p.iter().copied()).collect()
}

pub fn unflatten(flat: &[f64]) -> Vec<Point> {
    flat.chunks_exact(2).map(|c| [c[0], c[1]]).collect()
}

pub fn pivot(w: &TrajectoryWindow) -> OffsetWindow {
    let p = w.pivot();
    OffsetWindow {
        observed_offsets: offsets_from(&w.observed, p),
        future_offsets: offsets_from(&w.future, p),
        pivot: p,
        scene_id: w.scene_id.clone(),
        agent_id: w.agent_id,
    }
}

/// Inverse of [`pivot`]; the last observed offset is restored to the pivot
/// exactly.
pub fn unpivot(o: &OffsetWindow) -> TrajectoryWindow {
    let n = o.observed_offsets.len();
    let observed = o
        .observed_offsets
        .iter()
        .enumerate()
        .map(|(i, q)| if i + 1 == n { o.pivot } else { add(*q, o.pivot) })
        .collect();
    TrajectoryWindow {
        scene_id: o.scene_id.clone(),
        agent_id: o.agent_id,
        observed,
        future: o.future_offsets.iter().map(|q| add(*q, o.pivot)).collect(),
    }
}

pub fn offsets_from(points: &[Point], origin: Point) -> Vec<Point> {
    points.iter().map(|p| [p[0] - origin[0], p[1] - origin[1]]).collect()
}

pub fn add(a: Point, b: Point) -> Point {
    [a[0] + b[0], a[1] + b[1]]
}

/// Groups points by agent, sorted by frame.
fn group_by_agent(points: &[TrackPoint]) -> Vec<(i64, Vec<TrackPoint>)> {
    let mut sorted = points.to_vec();
    sorted.sort_by_key(|p| (p.agent_id, p.frame));
    let mut out: Vec<(i64, Vec<TrackPoint>)> = Vec::new();
    for p in sorted {
        match out.last_mut() {
            Some((id, v)) if *id == p.agent_id => v.push(p),
            _ => out.push((p.agent_id, vec![p])),
        }
    }
    out
}

/// Smallest positive frame gap between consecutive points of any agent;
/// 1 when no agent has two points.
pub fn frame_step(points: &[TrackPoint]) -> i64 {
    group_by_agent(points)
        .iter()
        .flat_map(|(_, v)| v.windows(2).map(|w| w[1].frame - w[0].frame))
        .filter(|&d| d > 0)
        .min()
        .unwrap_or(1)
}

/// Cuts every agent's track into windows of `t_obs` observed plus `t_fut`
/// future steps, advancing `stride` steps between windows. A track is split
/// into contiguous runs wherever the frame gap differs from [`frame_step`].
pub fn build_windows(
    points: &[TrackPoint],
    t_obs: usize,
    t_fut: usize,
    stride: usize,
) -> Result<Vec<TrajectoryWindow>> {
    build_windows_in_scene(points, t_obs, t_fut, stride, "")
}

pub fn build_windows_in_scene(
    points: &[TrackPoint],
    t_obs: usize,
    t_fut: usize,
    stride: usize,
    scene_id: &str,
) -> Result<Vec<TrajectoryWindow>> {
    if t_obs == 0 || t_fut == 0 || stride == 0 {
        return Err(MgfError::invalid("t_obs, t_fut and stride must be at least 1"));
    }
    let step = frame_step(points);
    let span = t_obs + t_fut;
    let mut windows = Vec::new();
    for (agent, track) in group_by_agent(points) {
        let mut run_start = 0;
        for i in 1..=track.len() {
            let breaks = i == track.len() || track[i].frame - track[i - 1].frame != step;
            if !breaks {
                continue;
            }
            let run = &track[run_start..i];
            let mut s = 0;
            while s + span <= run.len() {
                let pos: Vec<Point> = run[s..s + span].iter().map(|p| p.position).collect();
                windows.push(TrajectoryWindow {
                    scene_id: scene_id.to_string(),
                    agent_id: agent,
                    observed: pos[..t_obs].to_vec(),
                    future: pos[t_obs..].to_vec(),
                });
                s += stride;
            }
            run_start = i;
        }
    }
    Ok(windows)
}
