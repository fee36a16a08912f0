//! Best-of-M alignment metrics, pairwise diversity metrics and evaluation reports.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{MgfError, Result};
use crate::model::{MgfModel, PredictOptions, DEFAULT_J, DEFAULT_M};
use crate::numerics::Rng;
use crate::trajdata::{Point, TrajectoryWindow};

/// M candidate futures in absolute coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub candidates: Vec<Vec<Point>>,
    pub components: Vec<usize>,
    pub log_probs: Vec<f64>,
    pub prior_version: u64,
}

impl PredictionSet {
    /// A set with no labels or densities, for metric computation.
    pub fn from_candidates(candidates: Vec<Vec<Point>>) -> Self {
        let m = candidates.len();
        Self {
            candidates,
            components: vec![0; m],
            log_probs: vec![0.0; m],
            prior_version: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    fn check(&self) -> Result<usize> {
        let first = self
            .candidates
            .first()
            .ok_or_else(|| MgfError::invalid("prediction set is empty"))?;
        let t = first.len();
        if t == 0 || self.candidates.iter().any(|c| c.len() != t) {
            return Err(MgfError::invalid("candidates must share a non-zero horizon"));
        }
        Ok(t)
    }
}

fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

pub fn ade(candidate: &[Point], gt: &[Point]) -> Result<f64> {
    if candidate.len() != gt.len() || gt.is_empty() {
        return Err(MgfError::invalid(format!(
            "candidate has {} steps, ground truth {}",
            candidate.len(),
            gt.len()
        )));
    }
    Ok(candidate.iter().zip(gt).map(|(&a, &b)| dist(a, b)).sum::<f64>() / gt.len() as f64)
}

pub fn fde(candidate: &[Point], gt: &[Point]) -> Result<f64> {
    if candidate.len() != gt.len() || gt.is_empty() {
        return Err(MgfError::invalid(format!(
            "candidate has {} steps, ground truth {}",
            candidate.len(),
            gt.len()
        )));
    }
    Ok(dist(candidate[candidate.len() - 1], gt[gt.len() - 1]))
}

fn min_over(set: &PredictionSet, gt: &[Point], f: fn(&[Point], &[Point]) -> Result<f64>) -> Result<f64> {
    set.check()?;
    let mut best = f64::INFINITY;
    for c in &set.candidates {
        best = best.min(f(c, gt)?);
    }
    Ok(best)
}

pub fn min_ade(set: &PredictionSet, gt: &[Point]) -> Result<f64> {
    min_over(set, gt, ade)
}

pub fn min_fde(set: &PredictionSet, gt: &[Point]) -> Result<f64> {
    min_over(set, gt, fde)
}

/// Average pairwise displacement, summed over all ordered pairs (self-pairs
/// included) and divided by `M²·T_fut`.
pub fn apd(set: &PredictionSet) -> Result<f64> {
    let t = set.check()?;
    let c = &set.candidates;
    let mut total = 0.0;
    for a in c {
        for b in c {
            let sq: f64 = a
                .iter()
                .zip(b)
                .map(|(p, q)| (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2))
                .sum();
            total += sq.sqrt();
        }
    }
    let m = c.len() as f64;
    Ok(total / (m * m * t as f64))
}

/// Final pairwise displacement over all ordered pairs, divided by `M²`.
pub fn fpd(set: &PredictionSet) -> Result<f64> {
    let t = set.check()?;
    let c = &set.candidates;
    let mut total = 0.0;
    for a in c {
        for b in c {
            total += dist(a[t - 1], b[t - 1]);
        }
    }
    let m = c.len() as f64;
    Ok(total / (m * m))
}

/// Mean of the `n` largest scores. Equal scores keep input order.
pub fn worst_n(scores: &[f64], n: usize) -> Result<f64> {
    if n == 0 || n > scores.len() {
        return Err(MgfError::invalid(format!(
            "worst-N needs 1 ≤ N ≤ {}, got {n}",
            scores.len()
        )));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    Ok(sorted[..n].iter().sum::<f64>() / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub m: usize,
    pub clustering: bool,
    pub j: usize,
    pub m_sweep: Vec<usize>,
    pub worst_n: Option<usize>,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            m: DEFAULT_M,
            clustering: false,
            j: DEFAULT_J,
            m_sweep: Vec::new(),
            worst_n: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowRecord {
    pub scene_id: String,
    pub agent_id: i64,
    pub min_ade: f64,
    pub min_fde: f64,
    pub apd: f64,
    pub fpd: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub m: usize,
    pub windows: usize,
    pub min_ade: f64,
    pub min_fde: f64,
    pub apd: f64,
    pub fpd: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: EvalConfig,
    pub records: Vec<WindowRecord>,
    pub aggregate: Aggregate,
    pub sweep: Vec<Aggregate>,
    pub worst_ade: Option<f64>,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let row = |s: &mut String, a: &Aggregate| {
            let _ = writeln!(
                s,
                "M={:<4} windows={:<6} minADE={:.4} minFDE={:.4} APD={:.4} FPD={:.4}",
                a.m, a.windows, a.min_ade, a.min_fde, a.apd, a.fpd
            );
        };
        for r in &self.records {
            let _ = writeln!(
                s,
                "window scene={} agent={} minADE={:.4} minFDE={:.4} APD={:.4} FPD={:.4}",
                r.scene_id, r.agent_id, r.min_ade, r.min_fde, r.apd, r.fpd
            );
        }
        row(&mut s, &self.aggregate);
        for a in &self.sweep {
            s.push_str("sweep ");
            row(&mut s, a);
        }
        if let (Some(n), Some(w)) = (self.config.worst_n, self.worst_ade) {
            let _ = writeln!(s, "worst-{n} minADE={w:.4}");
        }
        s
    }
}

fn score_windows(
    model: &MgfModel,
    windows: &[TrajectoryWindow],
    m: usize,
    cfg: &EvalConfig,
) -> Result<Vec<WindowRecord>> {
    let opts = PredictOptions {
        clustering: cfg.clustering,
        oversample: cfg.j,
    };
    windows
        .iter()
        .enumerate()
        .map(|(i, w)| {
            let mut rng = Rng::stream(cfg.seed, i as u64);
            let set = model.predict(&w.observed, m, &mut rng, opts)?;
            Ok(WindowRecord {
                scene_id: w.scene_id.clone(),
                agent_id: w.agent_id,
                min_ade: min_ade(&set, &w.future)?,
                min_fde: min_fde(&set, &w.future)?,
                apd: apd(&set)?,
                fpd: fpd(&set)?,
            })
        })
        .collect()
}

fn aggregate(m: usize, records: &[WindowRecord]) -> Aggregate {
    let n = records.len() as f64;
    let mean = |f: fn(&WindowRecord) -> f64| records.iter().map(f).sum::<f64>() / n;
    Aggregate {
        m,
        windows: records.len(),
        min_ade: mean(|r| r.min_ade),
        min_fde: mean(|r| r.min_fde),
        apd: mean(|r| r.apd),
        fpd: mean(|r| r.fpd),
    }
}

/// Scores every window with per-window RNG streams, so results do not depend
/// on window order or on which other windows are evaluated.
pub fn evaluate(model: &MgfModel, windows: &[TrajectoryWindow], cfg: &EvalConfig) -> Result<EvalReport> {
    if windows.is_empty() {
        return Err(MgfError::invalid("evaluation set is empty"));
    }
    let records = score_windows(model, windows, cfg.m, cfg)?;
    let agg = aggregate(cfg.m, &records);
    let sweep = cfg
        .m_sweep
        .iter()
        .map(|&m| Ok(aggregate(m, &score_windows(model, windows, m, cfg)?)))
        .collect::<Result<Vec<_>>>()?;
    let worst_ade = match cfg.worst_n {
        Some(n) => Some(worst_n(&records.iter().map(|r| r.min_ade).collect::<Vec<_>>(), n)?),
        None => None,
    };
    Ok(EvalReport {
        config: cfg.clone(),
        records,
        aggregate: agg,
        sweep,
        worst_ade,
    })
}
