use serde::{Deserialize, Serialize};

use super::edit::rotate_steps;
use crate::error::{MgfError, Result};
use crate::trajdata::{flatten, pivot, unflatten, unpivot, TrajectoryWindow};

/// One augmentation group: futures rotated by `degrees` about the pivot, in
/// proportion `ratio` relative to the first group.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RotationSpec {
    pub degrees: f64,
    pub ratio: f64,
}

impl RotationSpec {
    /// original : 180° : 90° : −90° = 2 : 2 : 1 : 1.
    pub fn u_turn_and_sharp_turns() -> Vec<RotationSpec> {
        [(0.0, 2.0), (180.0, 2.0), (90.0, 1.0), (-90.0, 1.0)]
            .into_iter()
            .map(|(degrees, ratio)| RotationSpec { degrees, ratio })
            .collect()
    }
}

/// Builds the augmented dataset. Group `i` holds `round(n · ratio_i / ratio_0)`
/// windows taken at evenly spaced indices of the input; observed histories are
/// left unchanged.
pub fn augment_dataset(windows: &[TrajectoryWindow], spec: &[RotationSpec]) -> Result<Vec<TrajectoryWindow>> {
    let base = spec
        .first()
        .ok_or_else(|| MgfError::invalid("rotation spec must have at least one entry"))?
        .ratio;
    if !(base > 0.0) || spec.iter().any(|s| !(s.ratio >= 0.0) || !s.degrees.is_finite()) {
        return Err(MgfError::invalid(
            "ratios must be nonnegative with a positive first entry",
        ));
    }
    let n = windows.len();
    let mut out = Vec::new();
    for s in spec {
        let count = (n as f64 * s.ratio / base).round() as usize;
        for j in 0..count {
            let src = &windows[j * n / count];
            out.push(rotate_future(src, s.degrees));
        }
    }
    Ok(out)
}

pub fn rotate_future(w: &TrajectoryWindow, degrees: f64) -> TrajectoryWindow {
    if degrees == 0.0 {
        return w.clone();
    }
    let mut o = pivot(w);
    o.future_offsets = unflatten(&rotate_steps(&flatten(&o.future_offsets), degrees.to_radians()));
    let mut out = unpivot(&o);
    out.observed = w.observed.clone();
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn window(id: i64) -> TrajectoryWindow {
        TrajectoryWindow {
            scene_id: "t".into(),
            agent_id: id,
            observed: vec![[-1.0, 0.0], [0.0, 0.0]],
            future: vec![[1.0, 0.0], [2.0, 0.0]],
        }
    }

    #[test]
    fn half_turn() {
        let r = rotate_future(&window(0), 180.0);
        for (got, want) in r.future.iter().zip([[-1.0, 0.0], [-2.0, 0.0]]) {
            assert!((got[0] - want[0]).abs() < 1e-12 && (got[1] - want[1]).abs() < 1e-12);
        }
        assert_eq!(r.observed, window(0).observed);
    }

    #[test]
    fn two_two_one_one() {
        let ws: Vec<_> = (0..100).map(window).collect();
        let out = augment_dataset(&ws, &RotationSpec::u_turn_and_sharp_turns()).unwrap();
        assert_eq!(out.len(), 300);
        let ends: Vec<[f64; 2]> = out.iter().map(|w| *w.future.last().unwrap()).collect();
        let count = |x: f64, y: f64| {
            ends.iter()
                .filter(|e| (e[0] - x).abs() < 1e-9 && (e[1] - y).abs() < 1e-9)
                .count()
        };
        assert_eq!(count(2.0, 0.0), 100);
        assert_eq!(count(-2.0, 0.0), 100);
        assert_eq!(count(0.0, 2.0), 50);
        assert_eq!(count(0.0, -2.0), 50);
    }

    #[test]
    fn identity_spec() {
        let ws: Vec<_> = (0..10).map(window).collect();
        let spec = [
            RotationSpec {
                degrees: 0.0,
                ratio: 1.0,
            },
            RotationSpec {
                degrees: 90.0,
                ratio: 0.0,
            },
        ];
        assert_eq!(augment_dataset(&ws, &spec).unwrap(), ws);
        assert!(augment_dataset(&ws, &[]).is_err());
    }
}
