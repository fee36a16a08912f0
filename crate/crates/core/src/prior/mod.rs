//! The mixed Gaussian prior over flattened future offsets.
//!
//! `Σ_k β_k N(μ_k, σ_k² I)` with isotropic components. Means come from
//! K-means over training futures and weights from the cluster proportions;
//! each `σ_k = exp(ρ_k)` is stored through its log.

mod augment;
mod edit;
pub mod kmeans;

pub use augment::{augment_dataset, rotate_future, RotationSpec};
pub use edit::PriorEdit;
pub use kmeans::{fit_kmeans, KMeansFit, DEFAULT_MAX_ITERS};

use serde::{Deserialize, Serialize};

use crate::error::{MgfError, Result};
use crate::numerics::Rng;

pub const DEFAULT_K: usize = 8;
pub const DEFAULT_SIGMA_INIT: f64 = 0.5;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianComponent {
    pub mean: Vec<f64>,
    pub log_sigma: f64,
    pub weight: f64,
}

impl GaussianComponent {
    pub fn sigma(&self) -> f64 {
        self.log_sigma.exp()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixedGaussianPrior {
    components: Vec<GaussianComponent>,
    dim: usize,
    version: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentSample {
    pub z: Vec<f64>,
    pub component: usize,
    pub log_weight: f64,
}

impl MixedGaussianPrior {
    /// Validates components and renormalizes their weights.
    pub fn new(mut components: Vec<GaussianComponent>, version: u64) -> Result<Self> {
        let dim = components
            .first()
            .map(|c| c.mean.len())
            .ok_or_else(|| MgfError::invalid("prior needs at least one component"))?;
        if dim == 0 || components.iter().any(|c| c.mean.len() != dim) {
            return Err(MgfError::invalid("prior components must share a positive dimension"));
        }
        if components
            .iter()
            .any(|c| !c.log_sigma.is_finite() || c.mean.iter().any(|v| !v.is_finite()))
        {
            return Err(MgfError::NonFinite("prior component".into()));
        }
        normalize_weights(&mut components)?;
        Ok(Self {
            components,
            dim,
            version,
        })
    }

    /// Equal-weight prior with the given means and a shared `sigma`.
    pub fn from_means(means: Vec<Vec<f64>>, weights: Vec<f64>, sigma: f64) -> Result<Self> {
        if means.len() != weights.len() {
            return Err(MgfError::invalid("one weight per mean required"));
        }
        if !(sigma > 0.0) {
            return Err(MgfError::invalid("sigma must be positive"));
        }
        let comps = means
            .into_iter()
            .zip(weights)
            .map(|(mean, weight)| GaussianComponent {
                mean,
                log_sigma: sigma.ln(),
                weight,
            })
            .collect();
        Self::new(comps, 0)
    }

    pub fn components(&self) -> &[GaussianComponent] {
        &self.components
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn weights(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.weight).collect()
    }

    pub fn means(&self) -> Vec<Vec<f64>> {
        self.components.iter().map(|c| c.mean.clone()).collect()
    }

    pub fn log_sigmas(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.log_sigma).collect()
    }

    /// Replaces means and log-sigmas (e.g. after training), keeping weights
    /// and version.
    pub fn with_parameters(&self, means: &[Vec<f64>], log_sigmas: &[f64]) -> Result<Self> {
        if means.len() != self.k() || log_sigmas.len() != self.k() {
            return Err(MgfError::invalid("parameter count does not match prior"));
        }
        let comps = self
            .components
            .iter()
            .zip(means.iter().zip(log_sigmas))
            .map(|(c, (m, &ls))| GaussianComponent {
                mean: m.clone(),
                log_sigma: ls,
                weight: c.weight,
            })
            .collect();
        Self::new(comps, self.version)
    }

    pub(crate) fn with_version(mut self, version: u64) -> Self {
        self.version = version;
        self
    }

    fn component(&self, k: usize) -> Result<&GaussianComponent> {
        self.components
            .get(k)
            .ok_or_else(|| MgfError::invalid(format!("component {k} out of range (K = {})", self.k())))
    }

    pub fn draw_component(&self, rng: &mut Rng) -> usize {
        rng.categorical(&self.weights())
    }

    /// Component-wise sampling: pick `k` by weight, then `z = μ_k + σ_k ε`.
    pub fn sample(&self, n: usize, rng: &mut Rng) -> Vec<LatentSample> {
        (0..n)
            .map(|_| {
                let k = self.draw_component(rng);
                let c = &self.components[k];
                let sigma = c.sigma();
                let z = c.mean.iter().map(|m| m + sigma * rng.standard_normal()).collect();
                LatentSample {
                    z,
                    component: k,
                    log_weight: c.weight.ln(),
                }
            })
            .collect()
    }

    /// `log β_k − D·log(σ_k √(2π)) − ‖z − μ_k‖² / (2σ_k²)`.
    pub fn logpdf_component(&self, k: usize, z: &[f64]) -> Result<f64> {
        let c = self.component(k)?;
        if z.len() != self.dim {
            return Err(MgfError::Shape {
                op: "logpdf_component",
                shapes: format!("z of length {} vs D = {}", z.len(), self.dim),
            });
        }
        let d2 = kmeans::squared_distance(z, &c.mean);
        Ok(c.weight.ln() - self.dim as f64 * (c.log_sigma + HALF_LN_2PI) - d2 * (-2.0 * c.log_sigma).exp() * 0.5)
    }

    /// Stabilized log-sum-exp of the component log-densities. Intended for
    /// evaluation; training uses the nearest component instead.
    pub fn logpdf_mixture(&self, z: &[f64]) -> Result<f64> {
        let terms = (0..self.k())
            .map(|k| self.logpdf_component(k, z))
            .collect::<Result<Vec<_>>>()?;
        Ok(log_sum_exp(&terms))
    }

    /// Component whose mean is nearest to `x` (lowest index on ties).
    pub fn nearest_component(&self, x: &[f64]) -> usize {
        let mut best = (0, f64::INFINITY);
        for (k, c) in self.components.iter().enumerate() {
            let d = kmeans::squared_distance(x, &c.mean);
            if d < best.1 {
                best = (k, d);
            }
        }
        best.0
    }
}

pub fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

fn normalize_weights(components: &mut [GaussianComponent]) -> Result<()> {
    if components.iter().any(|c| !(c.weight >= 0.0) || !c.weight.is_finite()) {
        return Err(MgfError::invalid("weights must be finite and nonnegative"));
    }
    let total: f64 = components.iter().map(|c| c.weight).sum();
    if !(total > 0.0) {
        return Err(MgfError::invalid("weights must not all be zero"));
    }
    // Already-normalized weights are left bit-for-bit untouched.
    if (total - 1.0).abs() > 1e-12 {
        components.iter_mut().for_each(|c| c.weight /= total);
    }
    Ok(())
}

/// K-means over flattened future offsets; weights are cluster proportions
/// and every component starts at `sigma_init`.
pub fn build_prior(futures: &[Vec<f64>], k: usize, sigma_init: f64, rng: &mut Rng) -> Result<MixedGaussianPrior> {
    if futures.is_empty() {
        return Err(MgfError::invalid("cannot build a prior from an empty dataset"));
    }
    let fit = fit_kmeans(futures, k, rng, DEFAULT_MAX_ITERS)?;
    MixedGaussianPrior::from_means(fit.centroids, fit.weights, sigma_init)
}

/// Reduces `samples` to `m` K-means centroids over whole flattened
/// trajectories. With `samples.len() == m` the input is returned as is.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusteredPredictions {
    pub centroids: Vec<Vec<f64>>,
    pub counts: Vec<usize>,
    pub assignments: Vec<usize>,
}

pub fn prediction_cluster(samples: &[Vec<f64>], m: usize, rng: &mut Rng) -> Result<ClusteredPredictions> {
    if m == 0 || samples.len() < m {
        return Err(MgfError::invalid(format!(
            "prediction clustering needs J >= M >= 1 (J = {}, M = {m})",
            samples.len()
        )));
    }
    if samples.len() == m {
        return Ok(ClusteredPredictions {
            centroids: samples.to_vec(),
            counts: vec![1; m],
            assignments: (0..m).collect(),
        });
    }
    let fit = fit_kmeans(samples, m, rng, DEFAULT_MAX_ITERS)?;
    Ok(ClusteredPredictions {
        counts: fit.counts(),
        centroids: fit.centroids,
        assignments: fit.assignments,
    })
}
