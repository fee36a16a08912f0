//! Synthetic multimodal walking data.
//!
//! Every window is observed walking straight along +x at the mode's speed,
//! so the history carries no information about the upcoming mode. From the
//! pivot on, the heading turns at a constant rate that accumulates the
//! mode's full turn angle at the final future step. Gaussian noise of the
//! mode's σ is added independently to every point except the pivot.

use serde::{Deserialize, Serialize};

use super::{Point, TrajectoryWindow, DEFAULT_T_FUT, DEFAULT_T_OBS};
use crate::error::{MgfError, Result};
use crate::numerics::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthMode {
    pub name: String,
    /// Total heading change over the future horizon, degrees (positive = left).
    pub turn_deg: f64,
    /// Meters per step.
    pub speed: f64,
    /// Per-point Gaussian noise, meters.
    pub noise: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub modes: Vec<SynthMode>,
    pub probabilities: Vec<f64>,
    pub t_obs: usize,
    pub t_fut: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        let mode = |name: &str, turn_deg| SynthMode {
            name: name.to_string(),
            turn_deg,
            speed: 1.0,
            noise: 0.05,
        };
        Self {
            modes: vec![mode("straight", 0.0), mode("left", 60.0), mode("right", -60.0)],
            probabilities: vec![0.6, 0.2, 0.2],
            t_obs: DEFAULT_T_OBS,
            t_fut: DEFAULT_T_FUT,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.modes.is_empty() || self.modes.len() != self.probabilities.len() {
            return Err(MgfError::invalid("synth spec needs one probability per mode"));
        }
        if self.probabilities.iter().any(|&p| !(p >= 0.0)) {
            return Err(MgfError::invalid("synth probabilities must be nonnegative"));
        }
        let total: f64 = self.probabilities.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(MgfError::invalid(format!("synth probabilities sum to {total}, not 1")));
        }
        if self.t_obs == 0 || self.t_fut == 0 {
            return Err(MgfError::invalid("t_obs and t_fut must be at least 1"));
        }
        if self
            .modes
            .iter()
            .any(|m| !(m.speed.is_finite() && m.noise >= 0.0 && m.turn_deg.is_finite()))
        {
            return Err(MgfError::invalid("synth modes need finite speed and nonnegative noise"));
        }
        Ok(())
    }
}

/// Noise-free future offsets of `mode` relative to the pivot.
pub fn mode_path(mode: &SynthMode, t_fut: usize) -> Vec<Point> {
    let rate = mode.turn_deg.to_radians() / t_fut as f64;
    let mut p = [0.0, 0.0];
    (1..=t_fut)
        .map(|t| {
            let heading = rate * t as f64;
            p = [p[0] + mode.speed * heading.cos(), p[1] + mode.speed * heading.sin()];
            p
        })
        .collect()
}

pub fn synth_generate(spec: &SynthSpec, n: usize, rng: &mut Rng) -> Result<Vec<TrajectoryWindow>> {
    Ok(synth_generate_labeled(spec, n, rng)?
        .into_iter()
        .map(|(w, _)| w)
        .collect())
}

/// Like [`synth_generate`], also returning the mode index of each window.
pub fn synth_generate_labeled(spec: &SynthSpec, n: usize, rng: &mut Rng) -> Result<Vec<(TrajectoryWindow, usize)>> {
    spec.validate()?;
    let paths: Vec<Vec<Point>> = spec.modes.iter().map(|m| mode_path(m, spec.t_fut)).collect();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let k = rng.categorical(&spec.probabilities);
        let mode = &spec.modes[k];
        let pivot = [rng.normal(0.0, 5.0), rng.normal(0.0, 5.0)];
        let mut jitter = |p: Point| [p[0] + rng.normal(0.0, mode.noise), p[1] + rng.normal(0.0, mode.noise)];
        let observed = (0..spec.t_obs)
            .map(|j| {
                let back = (spec.t_obs - 1 - j) as f64 * mode.speed;
                let p = [pivot[0] - back, pivot[1]];
                if j + 1 == spec.t_obs {
                    p
                } else {
                    jitter(p)
                }
            })
            .collect();
        let future = paths[k]
            .iter()
            .map(|o| jitter([pivot[0] + o[0], pivot[1] + o[1]]))
            .collect();
        out.push((
            TrajectoryWindow {
                scene_id: "synthetic".to_string(),
                agent_id: i as i64,
                observed,
                future,
            },
            k,
        ));
    }
    Ok(out)
}
