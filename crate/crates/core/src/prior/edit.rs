use serde::{Deserialize, Serialize};

use super::{GaussianComponent, MixedGaussianPrior};
use crate::error::{MgfError, Result};

/// A transparent edit of the prior. `component: None` targets every component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum PriorEdit {
    /// Raw nonnegative weights, renormalized to sum to one.
    SetWeights {
        weights: Vec<f64>,
    },
    /// Rotates every 2-D step of the mean by `degrees` (counter-clockwise).
    RotateMean {
        #[serde(default)]
        component: Option<usize>,
        degrees: f64,
    },
    /// Multiplies the variance σ² by `factor`, so σ scales by √factor.
    ScaleSigma {
        #[serde(default)]
        component: Option<usize>,
        factor: f64,
    },
    RemoveComponent {
        component: usize,
    },
}

fn check_index(prior: &MixedGaussianPrior, k: Option<usize>) -> Result<()> {
    match k {
        Some(k) if k >= prior.k() => Err(MgfError::invalid(format!(
            "component {k} out of range (K = {})",
            prior.k()
        ))),
        _ => Ok(()),
    }
}

pub fn rotate_steps(flat: &[f64], radians: f64) -> Vec<f64> {
    let (s, c) = radians.sin_cos();
    flat.chunks_exact(2)
        .flat_map(|p| [c * p[0] - s * p[1], s * p[0] + c * p[1]])
        .collect()
}

impl MixedGaussianPrior {
    /// Applies `edit` to a copy; the result carries `version + 1`.
    pub fn edit(&self, edit: &PriorEdit) -> Result<MixedGaussianPrior> {
        let mut comps: Vec<GaussianComponent> = self.components.clone();
        match edit {
            PriorEdit::SetWeights { weights } => {
                if weights.len() != comps.len() {
                    return Err(MgfError::invalid(format!(
                        "expected {} weights, got {}",
                        comps.len(),
                        weights.len()
                    )));
                }
                comps.iter_mut().zip(weights).for_each(|(c, &w)| c.weight = w);
            }
            PriorEdit::RotateMean { component, degrees } => {
                check_index(self, *component)?;
                if !degrees.is_finite() {
                    return Err(MgfError::invalid("rotation angle must be finite"));
                }
                if !self.dim.is_multiple_of(2) {
                    return Err(MgfError::invalid("mean rotation needs an even dimension"));
                }
                for (k, c) in comps.iter_mut().enumerate() {
                    if component.is_none_or(|t| t == k) {
                        c.mean = rotate_steps(&c.mean, degrees.to_radians());
                    }
                }
            }
            PriorEdit::ScaleSigma { component, factor } => {
                check_index(self, *component)?;
                if !(*factor > 0.0) || !factor.is_finite() {
                    return Err(MgfError::invalid(format!(
                        "variance factor must be positive, got {factor}"
                    )));
                }
                for (k, c) in comps.iter_mut().enumerate() {
                    if component.is_none_or(|t| t == k) {
                        c.log_sigma += 0.5 * factor.ln();
                    }
                }
            }
            PriorEdit::RemoveComponent { component } => {
                check_index(self, Some(*component))?;
                if comps.len() < 2 {
                    return Err(MgfError::invalid("cannot remove the only component"));
                }
                comps.remove(*component);
            }
        }
        Ok(MixedGaussianPrior::new(comps, self.version)?.with_version(self.version + 1))
    }

    /// Applies edits in order; all or nothing.
    pub fn edit_all(&self, edits: &[PriorEdit]) -> Result<MixedGaussianPrior> {
        let mut p = self.clone();
        for e in edits {
            p = p.edit(e)?;
        }
        Ok(p)
    }
}
