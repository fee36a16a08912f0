//! Whitespace-separated `frame agent_id x y` track files (the ETH/UCY layout).

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::TrackPoint;
use crate::error::{MgfError, Result};

pub fn load_tsv(path: impl AsRef<Path>) -> Result<Vec<TrackPoint>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    parse_tsv(&text, path)
}

/// Parses track text; `origin` is only used in error messages. Points come
/// back sorted by agent, then frame.
pub fn parse_tsv(text: &str, origin: &Path) -> Result<Vec<TrackPoint>> {
    let err = |line: usize, msg: String| MgfError::Parse {
        path: PathBuf::from(origin),
        line,
        msg,
    };
    let mut seen = HashSet::new();
    let mut points = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let fields: Vec<&str> = raw.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() != 4 {
            return Err(err(line_no, format!("expected 4 fields, found {}", fields.len())));
        }
        let frame = parse_index(fields[0]).ok_or_else(|| err(line_no, format!("bad frame {:?}", fields[0])))?;
        let agent_id = parse_index(fields[1]).ok_or_else(|| err(line_no, format!("bad agent id {:?}", fields[1])))?;
        let coord = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| err(line_no, format!("bad coordinate {s:?}")))
        };
        let position = [coord(fields[2])?, coord(fields[3])?];
        if !seen.insert((frame, agent_id)) {
            return Err(err(
                line_no,
                format!("duplicate point for frame {frame}, agent {agent_id}"),
            ));
        }
        points.push(TrackPoint {
            frame,
            agent_id,
            position,
        });
    }
    points.sort_by_key(|p| (p.agent_id, p.frame));
    Ok(points)
}

/// Integers, also accepting the `780.0` spelling used by published files.
fn parse_index(s: &str) -> Option<i64> {
    if let Ok(v) = s.parse::<i64>() {
        return Some(v);
    }
    let v = s.parse::<f64>().ok()?;
    (v.is_finite() && v.fract() == 0.0 && v.abs() < 9.0e15).then_some(v as i64)
}

/// Writes points one per line as `frame\tagent\tx\ty`. Coordinates use the
/// shortest representation that parses back to the same `f64`.
pub fn emit_tsv(points: &[TrackPoint]) -> String {
    let mut out = String::new();
    for p in points {
        let _ = writeln!(out, "{}\t{}\t{}\t{}", p.frame, p.agent_id, p.position[0], p.position[1]);
    }
    out
}
