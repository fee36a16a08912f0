//! Encoder + flow + prior, with density evaluation and prediction.

use serde::{Deserialize, Serialize};

use crate::encoder::{Encoder, DEFAULT_CONTEXT_DIM};
use crate::error::{MgfError, Result};
use crate::flow::{ConditionalFlow, FlowShape, DEFAULT_CLAMP, DEFAULT_HIDDEN, DEFAULT_LAYERS};
use crate::metrics::PredictionSet;
use crate::nn::{Bound, ParamStore};
use crate::numerics::{Rng, Tape, Tensor, Var};
use crate::prior::{prediction_cluster, MixedGaussianPrior};
use crate::trajdata::{flatten, offsets_from, unflatten, Point, DEFAULT_T_FUT, DEFAULT_T_OBS};

/// Oversampling size before prediction clustering.
pub const DEFAULT_J: usize = 500;
/// Best-of-M candidate count.
pub const DEFAULT_M: usize = 20;

const CHUNK: usize = 1024;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub t_obs: usize,
    pub t_fut: usize,
    pub context_dim: usize,
    pub layers: usize,
    pub hidden: usize,
    pub clamp: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            t_obs: DEFAULT_T_OBS,
            t_fut: DEFAULT_T_FUT,
            context_dim: DEFAULT_CONTEXT_DIM,
            layers: DEFAULT_LAYERS,
            hidden: DEFAULT_HIDDEN,
            clamp: DEFAULT_CLAMP,
        }
    }
}

impl ModelConfig {
    pub fn dim(&self) -> usize {
        2 * self.t_fut
    }

    fn flow_shape(&self) -> FlowShape {
        FlowShape {
            dim: self.dim(),
            context_dim: self.context_dim,
            layers: self.layers,
            hidden: self.hidden,
            clamp: self.clamp,
        }
    }
}

/// Which prior density `log_prob` evaluates the latent under.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DensityMode {
    Component(usize),
    /// The component nearest to `x` itself, as in the training loss.
    Nearest,
    Mixture,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PredictOptions {
    pub clustering: bool,
    pub oversample: usize,
}

impl Default for PredictOptions {
    fn default() -> Self {
        Self {
            clustering: false,
            oversample: DEFAULT_J,
        }
    }
}

#[derive(Clone, Debug)]
pub struct MgfModel {
    config: ModelConfig,
    params: ParamStore,
    encoder: Encoder,
    flow: ConditionalFlow,
    prior: MixedGaussianPrior,
}

impl MgfModel {
    pub fn new(config: ModelConfig, prior: MixedGaussianPrior, rng: &mut Rng) -> Result<Self> {
        if config.t_obs == 0 || config.t_fut == 0 || config.context_dim == 0 {
            return Err(MgfError::invalid("t_obs, t_fut and context_dim must be positive"));
        }
        if prior.dim() != config.dim() {
            return Err(MgfError::invalid(format!(
                "prior dimension {} does not match 2·t_fut = {}",
                prior.dim(),
                config.dim()
            )));
        }
        let mut params = ParamStore::default();
        let encoder = Encoder::new(&mut params, config.context_dim, rng);
        let flow = ConditionalFlow::new(&mut params, config.flow_shape(), rng)?;
        Ok(Self {
            config,
            params,
            encoder,
            flow,
            prior,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn prior(&self) -> &MixedGaussianPrior {
        &self.prior
    }

    pub fn set_prior(&mut self, prior: MixedGaussianPrior) -> Result<()> {
        if prior.dim() != self.config.dim() {
            return Err(MgfError::invalid("prior dimension does not match the model"));
        }
        self.prior = prior;
        Ok(())
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn flow(&self) -> &ConditionalFlow {
        &self.flow
    }

    /// Context for a batch of flattened observed offsets (`B × 2·T_obs`).
    pub fn context(&self, tape: &mut Tape, p: &Bound, observed: Var) -> Result<Var> {
        self.encoder.encode(tape, p, observed)
    }

    /// Pivots an absolute history (at least `t_obs` points, the last `t_obs`
    /// are used) and returns `(pivot, flattened observed offsets)`.
    pub fn prepare_history(&self, history: &[Point]) -> Result<(Point, Vec<f64>)> {
        let t = self.config.t_obs;
        if history.len() < t {
            return Err(MgfError::invalid(format!(
                "history has {} points, model needs {t}",
                history.len()
            )));
        }
        if history.iter().flatten().any(|v| !v.is_finite()) {
            return Err(MgfError::NonFinite("history".into()));
        }
        let tail = &history[history.len() - t..];
        let pivot = tail[t - 1];
        Ok((pivot, flatten(&offsets_from(tail, pivot))))
    }

    fn context_rows(&self, tape: &mut Tape, p: &Bound, observed: &[f64], rows: usize) -> Result<Var> {
        let obs = tape.constant(Tensor::matrix(1, observed.len(), observed.to_vec())?);
        let c = self.context(tape, p, obs)?;
        tape.gather_rows(c, &vec![0; rows])
    }

    /// Maps latents through the flow under one history's context. Returns
    /// `(x, log|det ∂x/∂z|)` per row.
    pub fn forward_latents(&self, observed: &[f64], z: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        self.map_rows(observed, z, true)
    }

    /// Inverse map; returns `(z, log|det ∂z/∂x|)` per row.
    pub fn inverse_offsets(&self, observed: &[f64], x: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        self.map_rows(observed, x, false)
    }

    fn map_rows(&self, observed: &[f64], rows: &[Vec<f64>], forward: bool) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        let d = self.config.dim();
        let mut out = Vec::with_capacity(rows.len());
        let mut logdets = Vec::with_capacity(rows.len());
        for chunk in rows.chunks(CHUNK) {
            if chunk.iter().any(|r| r.len() != d) {
                return Err(MgfError::Shape {
                    op: "flow",
                    shapes: format!("rows must have length D = {d}"),
                });
            }
            let mut tape = Tape::new();
            let p = self.params.bind(&mut tape, false);
            let c = self.context_rows(&mut tape, &p, observed, chunk.len())?;
            let input = tape.constant(Tensor::matrix(chunk.len(), d, chunk.concat())?);
            let (y, ld) = if forward {
                self.flow.forward(&mut tape, &p, input, c)?
            } else {
                self.flow.inverse(&mut tape, &p, input, c)?
            };
            out.extend(tape.value(y).data().chunks_exact(d).map(<[f64]>::to_vec));
            logdets.extend_from_slice(tape.value(ld).data());
        }
        Ok((out, logdets))
    }

    /// `log p(x | history)` for flattened future offsets `x`.
    pub fn log_prob(&self, x: &[f64], observed: &[f64], mode: DensityMode) -> Result<f64> {
        self.log_prob_with(&self.prior, x, observed, mode)
    }

    pub fn log_prob_with(
        &self,
        prior: &MixedGaussianPrior,
        x: &[f64],
        observed: &[f64],
        mode: DensityMode,
    ) -> Result<f64> {
        Ok(self.log_prob_batch(prior, &[x.to_vec()], observed, mode)?[0])
    }

    pub fn log_prob_batch(
        &self,
        prior: &MixedGaussianPrior,
        xs: &[Vec<f64>],
        observed: &[f64],
        mode: DensityMode,
    ) -> Result<Vec<f64>> {
        let (zs, logdets) = self.inverse_offsets(observed, xs)?;
        xs.iter()
            .zip(zs.iter().zip(logdets))
            .map(|(x, (z, ld))| {
                let base = match mode {
                    DensityMode::Component(k) => prior.logpdf_component(k, z)?,
                    DensityMode::Nearest => prior.logpdf_component(prior.nearest_component(x), z)?,
                    DensityMode::Mixture => prior.logpdf_mixture(z)?,
                };
                Ok(base + ld)
            })
            .collect()
    }

    pub fn predict(&self, history: &[Point], m: usize, rng: &mut Rng, opts: PredictOptions) -> Result<PredictionSet> {
        self.predict_with(&self.prior, history, m, rng, opts)
    }

    /// Samples `m` futures for `history` under `prior`. With clustering,
    /// `opts.oversample` candidates are drawn and reduced to `m` K-means
    /// centroids, each labelled with its members' majority component.
    pub fn predict_with(
        &self,
        prior: &MixedGaussianPrior,
        history: &[Point],
        m: usize,
        rng: &mut Rng,
        opts: PredictOptions,
    ) -> Result<PredictionSet> {
        if m == 0 {
            return Err(MgfError::invalid("m must be at least 1"));
        }
        if prior.dim() != self.config.dim() {
            return Err(MgfError::invalid("prior dimension does not match the model"));
        }
        let (pivot, observed) = self.prepare_history(history)?;
        let draws = if opts.clustering {
            if opts.oversample < m {
                return Err(MgfError::invalid(format!(
                    "oversample J = {} is smaller than m = {m}",
                    opts.oversample
                )));
            }
            opts.oversample
        } else {
            m
        };
        let latents = prior.sample(draws, rng);
        let zs: Vec<Vec<f64>> = latents.iter().map(|s| s.z.clone()).collect();
        let (xs, fwd_logdets) = self.forward_latents(&observed, &zs)?;

        let (offsets, components, log_probs) = if opts.clustering {
            let clusters = prediction_cluster(&xs, m, rng)?;
            let mut labels = Vec::with_capacity(m);
            for c in 0..m {
                let mut votes = vec![0usize; prior.k()];
                for (i, &a) in clusters.assignments.iter().enumerate() {
                    if a == c {
                        votes[latents[i].component] += 1;
                    }
                }
                // max_by_key keeps the last maximum; reverse to prefer the lowest index.
                let label = (0..prior.k()).rev().max_by_key(|&k| votes[k]).unwrap_or(0);
                labels.push(label);
            }
            let (zc, inv_ld) = self.inverse_offsets(&observed, &clusters.centroids)?;
            let lp = zc
                .iter()
                .zip(&inv_ld)
                .zip(&labels)
                .map(|((z, ld), &k)| Ok(prior.logpdf_component(k, z)? + ld))
                .collect::<Result<Vec<f64>>>()?;
            (clusters.centroids, labels, lp)
        } else {
            let lp = latents
                .iter()
                .zip(&fwd_logdets)
                .map(|(s, ld)| Ok(prior.logpdf_component(s.component, &s.z)? - ld))
                .collect::<Result<Vec<f64>>>()?;
            (xs, latents.iter().map(|s| s.component).collect(), lp)
        };

        let candidates = offsets
            .iter()
            .map(|x| {
                unflatten(x)
                    .into_iter()
                    .map(|q| [q[0] + pivot[0], q[1] + pivot[1]])
                    .collect()
            })
            .collect();
        Ok(PredictionSet {
            candidates,
            components,
            log_probs,
            prior_version: prior.version(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prior::PriorEdit;

    fn small_config(t_fut: usize) -> ModelConfig {
        ModelConfig {
            t_obs: 3,
            t_fut,
            context_dim: 4,
            layers: 2,
            hidden: 8,
            clamp: 5.0,
        }
    }

    fn model(prior: MixedGaussianPrior, t_fut: usize) -> MgfModel {
        MgfModel::new(small_config(t_fut), prior, &mut Rng::seed(1)).unwrap()
    }

    const HISTORY: [Point; 3] = [[-2.0, 1.0], [-1.0, 1.0], [0.0, 1.0]];

    #[test]
    fn identity_flow_mixture_density_is_prior_density() {
        let prior = MixedGaussianPrior::from_means(
            vec![vec![1.0, 0.0, 2.0, 0.0], vec![0.0, 1.0, 0.0, 2.0]],
            vec![0.7, 0.3],
            0.6,
        )
        .unwrap();
        let m = model(prior.clone(), 2);
        let (_, obs) = m.prepare_history(&HISTORY).unwrap();
        let x = [0.4, 0.3, 1.5, 0.2];
        let lp = m.log_prob(&x, &obs, DensityMode::Mixture).unwrap();
        assert!((lp - prior.logpdf_mixture(&x).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn nearest_mode_at_mean() {
        let prior =
            MixedGaussianPrior::from_means(vec![vec![1.0, 0.0], vec![0.0, 3.0]], vec![0.25, 0.75], 0.4).unwrap();
        let m = model(prior.clone(), 1);
        let (_, obs) = m.prepare_history(&HISTORY).unwrap();
        let lp = m.log_prob(&[0.0, 3.0], &obs, DensityMode::Nearest).unwrap();
        let expect = 0.75f64.ln() - 2.0 * (0.4 * (2.0 * std::f64::consts::PI).sqrt()).ln();
        assert!((lp - expect).abs() < 1e-12);
        assert!(m.log_prob(&[0.0, 3.0], &obs, DensityMode::Component(5)).is_err());
    }

    #[test]
    fn degenerate_prior_predicts_means() {
        let means = vec![vec![1.0, 0.0, 2.0, 0.0], vec![0.0, 1.0, 0.0, 2.0]];
        let prior = MixedGaussianPrior::from_means(means.clone(), vec![0.5, 0.5], 1e-12).unwrap();
        let m = model(prior, 2);
        let set = m
            .predict(&HISTORY, 20, &mut Rng::seed(3), PredictOptions::default())
            .unwrap();
        assert_eq!(set.candidates.len(), 20);
        for (cand, &k) in set.candidates.iter().zip(&set.components) {
            for (t, p) in cand.iter().enumerate() {
                assert!((p[0] - means[k][2 * t]).abs() < 1e-9);
                assert!((p[1] - (means[k][2 * t + 1] + 1.0)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_weight_component_never_sampled() {
        let prior =
            MixedGaussianPrior::from_means(vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]], vec![1.0; 3], 0.5)
                .unwrap()
                .edit(&PriorEdit::SetWeights {
                    weights: vec![1.0, 1.0, 0.0],
                })
                .unwrap();
        let m = model(prior, 1);
        let set = m
            .predict(&HISTORY, 500, &mut Rng::seed(4), PredictOptions::default())
            .unwrap();
        assert!(!set.components.contains(&2));
        assert_eq!(set.prior_version, 1);
    }

    #[test]
    fn clustered_prediction_count() {
        let prior = MixedGaussianPrior::from_means(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![1.0; 2], 0.5).unwrap();
        let m = model(prior, 1);
        let opts = PredictOptions {
            clustering: true,
            oversample: 500,
        };
        let set = m.predict(&HISTORY, 20, &mut Rng::seed(5), opts).unwrap();
        assert_eq!(set.candidates.len(), 20);
        assert!(set.log_probs.iter().all(|v| v.is_finite()));
        let short = m.predict(&HISTORY[..2], 20, &mut Rng::seed(5), opts);
        assert!(short.is_err());
    }

    #[test]
    fn prior_dimension_checked() {
        let prior = MixedGaussianPrior::from_means(vec![vec![0.0; 4]], vec![1.0], 1.0).unwrap();
        assert!(MgfModel::new(small_config(3), prior, &mut Rng::seed(0)).is_err());
    }
}
