//! Training objective and loop.
//!
//! The forward term is the negative log-likelihood of the ground-truth future
//! under the prior component whose mean is nearest to it, transported through
//! the inverse flow. The inverse term draws `M` latents per window (component
//! by weight, then `μ_k + σ_k ε`), maps them forward and keeps the smallest
//! per-step squared error. Total loss is `forward + γ·inverse`.

mod adam;
pub mod checkpoint;

pub use adam::Adam;
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};

use serde::{Deserialize, Serialize};

use crate::error::{MgfError, Result};
use crate::model::{MgfModel, ModelConfig, DEFAULT_J, DEFAULT_M};
use crate::nn::Bound;
use crate::numerics::{Rng, Tape, Tensor, Var};
use crate::prior::{build_prior, MixedGaussianPrior, DEFAULT_K, DEFAULT_SIGMA_INIT};
use crate::trajdata::{pivot, TrajectoryWindow};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub k: usize,
    pub sigma_init: f64,
    pub learnable_sigma: bool,
    pub trainable_means: bool,
    pub gamma: f64,
    pub m_train: usize,
    pub j: usize,
    pub clustering: bool,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            sigma_init: DEFAULT_SIGMA_INIT,
            learnable_sigma: true,
            trainable_means: false,
            gamma: 1.0,
            m_train: DEFAULT_M,
            j: DEFAULT_J,
            clustering: false,
            lr: 1e-3,
            epochs: 100,
            batch: 64,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(MgfError::Config(m.to_string()));
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad("gamma must be a finite value ≥ 0");
        }
        if self.m_train == 0 {
            return bad("m_train must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.sigma_init > 0.0 && self.sigma_init.is_finite()) {
            return bad("sigma_init must be positive");
        }
        if self.k == 0 || self.batch == 0 {
            return bad("k and batch must be at least 1");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub total: f64,
    pub forward: f64,
    pub inverse: f64,
}

/// Pivoted rows for a set of windows.
#[derive(Clone, Debug)]
pub struct Batch {
    pub observed: Tensor,
    pub future: Tensor,
}

impl Batch {
    pub fn from_windows(windows: &[&TrajectoryWindow]) -> Result<Self> {
        let first = windows.first().ok_or_else(|| MgfError::invalid("empty batch"))?;
        let (to, tf) = (first.t_obs(), first.t_fut());
        let mut obs = Vec::with_capacity(windows.len() * 2 * to);
        let mut fut = Vec::with_capacity(windows.len() * 2 * tf);
        for w in windows {
            if w.t_obs() != to || w.t_fut() != tf {
                return Err(MgfError::invalid("windows in a batch must share T_obs and T_fut"));
            }
            let o = pivot(w);
            obs.extend(o.flat_observed());
            fut.extend(o.flat_future());
        }
        Ok(Self {
            observed: Tensor::matrix(windows.len(), 2 * to, obs)?,
            future: Tensor::matrix(windows.len(), 2 * tf, fut)?,
        })
    }

    pub fn len(&self) -> usize {
        self.future.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn futures(&self) -> Vec<Vec<f64>> {
        (0..self.len()).map(|i| self.future.row_slice(i).to_vec()).collect()
    }
}

/// Prior parameters as tape variables: means `K×D`, log-sigmas `K×1`.
/// Weights are not trained.
#[derive(Clone, Debug)]
pub struct PriorVars {
    pub means: Var,
    pub log_sigma: Var,
    pub log_weights: Vec<f64>,
}

impl PriorVars {
    pub fn bind(tape: &mut Tape, prior: &MixedGaussianPrior, means_grad: bool, sigma_grad: bool) -> Self {
        let (k, d) = (prior.k(), prior.dim());
        let means = tape.leaf(Tensor::from_parts(vec![k, d], prior.means().concat()), means_grad);
        let log_sigma = tape.leaf(Tensor::from_parts(vec![k, 1], prior.log_sigmas()), sigma_grad);
        Self {
            means,
            log_sigma,
            log_weights: prior.weights().iter().map(|w| w.ln()).collect(),
        }
    }
}

/// Latent draws for the inverse term, `M` consecutive rows per window.
#[derive(Clone, Debug)]
pub struct InverseDraws {
    pub m: usize,
    pub components: Vec<usize>,
    pub eps: Tensor,
}

impl InverseDraws {
    pub fn sample(prior: &MixedGaussianPrior, windows: usize, m: usize, rng: &mut Rng) -> Self {
        let d = prior.dim();
        let weights = prior.weights();
        let mut components = Vec::with_capacity(windows * m);
        let mut eps = Vec::with_capacity(windows * m * d);
        for _ in 0..windows * m {
            components.push(rng.categorical(&weights));
            eps.extend((0..d).map(|_| rng.standard_normal()));
        }
        Self {
            m,
            components,
            eps: Tensor::from_parts(vec![windows * m, d], eps),
        }
    }
}

/// Nearest prior mean per ground-truth future.
pub fn nearest_components(prior: &MixedGaussianPrior, batch: &Batch) -> Vec<usize> {
    (0..batch.len())
        .map(|i| prior.nearest_component(batch.future.row_slice(i)))
        .collect()
}

/// Mean forward NLL over the batch.
pub fn forward_loss(
    tape: &mut Tape,
    model: &MgfModel,
    p: &Bound,
    prior: &PriorVars,
    batch: &Batch,
    nearest: &[usize],
    context: Var,
) -> Result<Var> {
    let d = model.config().dim() as f64;
    let x = tape.constant(batch.future.clone());
    let (z, logdet_inv) = model.flow().inverse(tape, p, x, context)?;
    let mu = tape.gather_rows(prior.means, nearest)?;
    let rho = tape.gather_rows(prior.log_sigma, nearest)?;
    let diff = tape.sub(z, mu)?;
    let sq = tape.square(diff);
    let dist = tape.sum_cols(sq)?;
    // Same expression and order as `logpdf_component`, then negated.
    let neg2rho = tape.scale(rho, -2.0);
    let inv_var = tape.exp(neg2rho);
    let quad = tape.mul(dist, inv_var)?;
    let quad = tape.scale(quad, 0.5);
    let half_ln_2pi = tape.constant(Tensor::filled(vec![nearest.len(), 1], HALF_LN_2PI));
    let norm = tape.add(rho, half_ln_2pi)?;
    let norm = tape.scale(norm, d);
    let log_w: Vec<f64> = nearest.iter().map(|&k| prior.log_weights[k]).collect();
    let log_w = tape.constant(Tensor::from_parts(vec![nearest.len(), 1], log_w));
    let logp = tape.sub(log_w, norm)?;
    let logp = tape.sub(logp, quad)?;
    let nll = tape.neg(logp);
    let nll = tape.sub(nll, logdet_inv)?;
    tape.check_finite(nll, "forward loss")?;
    Ok(tape.mean(nll))
}

/// Per-candidate mean-per-step squared error against the ground truth,
/// `B·M × 1`, plus the argmin candidate row of each window.
pub fn inverse_candidate_errors(
    tape: &mut Tape,
    model: &MgfModel,
    p: &Bound,
    prior: &PriorVars,
    batch: &Batch,
    draws: &InverseDraws,
    context: Var,
) -> Result<(Var, Vec<usize>)> {
    let (b, m) = (batch.len(), draws.m);
    if m == 0 || draws.components.len() != b * m {
        return Err(MgfError::invalid("inverse draws do not match the batch"));
    }
    let t_fut = model.config().t_fut as f64;
    let mu = tape.gather_rows(prior.means, &draws.components)?;
    let rho = tape.gather_rows(prior.log_sigma, &draws.components)?;
    let sigma = tape.exp(rho);
    let eps = tape.constant(draws.eps.clone());
    let noise = tape.mul_broadcast(eps, sigma)?;
    let z = tape.add(mu, noise)?;
    let rep: Vec<usize> = (0..b * m).map(|i| i / m).collect();
    let c = tape.gather_rows(context, &rep)?;
    let (x_hat, _) = model.flow().forward(tape, p, z, c)?;
    let gt = tape.constant(batch.future.clone());
    let gt = tape.gather_rows(gt, &rep)?;
    let diff = tape.sub(x_hat, gt)?;
    let sq = tape.square(diff);
    let err = tape.sum_cols(sq)?;
    let err = tape.scale(err, 1.0 / t_fut);
    tape.check_finite(err, "inverse loss")?;
    let values = tape.value(err).data();
    let best = (0..b)
        .map(|w| {
            let row = &values[w * m..(w + 1) * m];
            // Strict comparison keeps the lowest index among ties.
            let mut arg = 0;
            for (i, &v) in row.iter().enumerate() {
                if v < row[arg] {
                    arg = i;
                }
            }
            w * m + arg
        })
        .collect();
    Ok((err, best))
}

/// Mean over windows of the smallest candidate error.
pub fn inverse_loss(
    tape: &mut Tape,
    model: &MgfModel,
    p: &Bound,
    prior: &PriorVars,
    batch: &Batch,
    draws: &InverseDraws,
    context: Var,
) -> Result<Var> {
    let (err, best) = inverse_candidate_errors(tape, model, p, prior, batch, draws, context)?;
    let chosen = tape.gather_rows(err, &best)?;
    Ok(tape.mean(chosen))
}

#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub forward: Var,
    pub inverse: Option<Var>,
    pub total: Var,
}

/// `forward + γ·inverse`. The inverse term is skipped when `γ = 0` or no
/// draws are given.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    tape: &mut Tape,
    model: &MgfModel,
    p: &Bound,
    prior: &PriorVars,
    batch: &Batch,
    nearest: &[usize],
    draws: Option<&InverseDraws>,
    gamma: f64,
) -> Result<LossTerms> {
    let obs = tape.constant(batch.observed.clone());
    let context = model.context(tape, p, obs)?;
    let forward = forward_loss(tape, model, p, prior, batch, nearest, context)?;
    let (inverse, total) = match draws {
        Some(d) if gamma != 0.0 => {
            let inv = inverse_loss(tape, model, p, prior, batch, d, context)?;
            let weighted = tape.scale(inv, gamma);
            (Some(inv), tape.add(forward, weighted)?)
        }
        _ => (None, forward),
    };
    Ok(LossTerms {
        forward,
        inverse,
        total,
    })
}

/// Mean forward loss of `model` over `windows`, without gradients.
pub fn mean_forward_loss(model: &MgfModel, windows: &[TrajectoryWindow]) -> Result<f64> {
    if windows.is_empty() {
        return Err(MgfError::invalid("no windows"));
    }
    let mut total = 0.0;
    for chunk in windows.chunks(256) {
        let refs: Vec<&TrajectoryWindow> = chunk.iter().collect();
        let batch = Batch::from_windows(&refs)?;
        let nearest = nearest_components(model.prior(), &batch);
        let mut tape = Tape::new();
        let p = model.params().bind(&mut tape, false);
        let pv = PriorVars::bind(&mut tape, model.prior(), false, false);
        let terms = total_loss(&mut tape, model, &p, &pv, &batch, &nearest, None, 0.0)?;
        total += tape.value(terms.forward).item() * chunk.len() as f64;
    }
    Ok(total / windows.len() as f64)
}

/// Result of a completed run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: MgfModel,
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub history: Vec<EpochStats>,
}

/// Builds the prior from the training futures, initializes a model and
/// trains it.
pub fn train(windows: &[TrajectoryWindow], model_cfg: ModelConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with_progress(windows, model_cfg, cfg, |_| {})
}

pub fn train_with_progress(
    windows: &[TrajectoryWindow],
    model_cfg: ModelConfig,
    cfg: &TrainConfig,
    progress: impl FnMut(&EpochStats),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let futures: Vec<Vec<f64>> = windows.iter().map(|w| pivot(w).flat_future()).collect();
    let mut init_rng = Rng::stream(cfg.seed, 0);
    let prior = build_prior(&futures, cfg.k, cfg.sigma_init, &mut init_rng)?;
    let model = MgfModel::new(model_cfg, prior, &mut init_rng)?;
    train_model(model, windows, cfg, progress)
}

/// Trains an existing model in place of its current parameters and prior.
pub fn train_model(
    mut model: MgfModel,
    windows: &[TrajectoryWindow],
    cfg: &TrainConfig,
    mut progress: impl FnMut(&EpochStats),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if windows.len() < cfg.batch {
        return Err(MgfError::Config(format!(
            "{} training windows is fewer than the batch size {}",
            windows.len(),
            cfg.batch
        )));
    }
    let (t_obs, t_fut) = (model.config().t_obs, model.config().t_fut);
    if windows.iter().any(|w| w.t_obs() != t_obs || w.t_fut() != t_fut) {
        return Err(MgfError::invalid(format!(
            "training windows must have T_obs = {t_obs}, T_fut = {t_fut}"
        )));
    }
    let mut shuffle_rng = Rng::stream(cfg.seed, 1);
    let mut draw_rng = Rng::stream(cfg.seed, 2);
    let mut adam = Adam::new(cfg.lr);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut last_good = Checkpoint::from_model(&model, cfg, 0, &history);
    let mut best = last_good.clone();
    let mut best_loss = f64::INFINITY;
    let mut order: Vec<usize> = (0..windows.len()).collect();

    for epoch in 1..=cfg.epochs {
        shuffle_rng.shuffle(&mut order);
        let (mut sum_total, mut sum_fwd, mut sum_inv) = (0.0, 0.0, 0.0);
        for idx in order.chunks(cfg.batch) {
            let refs: Vec<&TrajectoryWindow> = idx.iter().map(|&i| &windows[i]).collect();
            let batch = Batch::from_windows(&refs)?;
            let nearest = nearest_components(model.prior(), &batch);
            let draws = (cfg.gamma != 0.0)
                .then(|| InverseDraws::sample(model.prior(), batch.len(), cfg.m_train, &mut draw_rng));

            let mut tape = Tape::new();
            let p = model.params().bind(&mut tape, true);
            let pv = PriorVars::bind(&mut tape, model.prior(), cfg.trainable_means, cfg.learnable_sigma);
            let step =
                total_loss(&mut tape, &model, &p, &pv, &batch, &nearest, draws.as_ref(), cfg.gamma).and_then(|terms| {
                    let total = tape.value(terms.total).item();
                    if !total.is_finite() {
                        return Err(MgfError::NonFinite("total loss".into()));
                    }
                    let grads = tape.backward(terms.total)?;
                    Ok((terms, grads))
                });
            let (terms, mut grads) = match step {
                Ok(v) => v,
                Err(MgfError::NonFinite(_)) | Err(MgfError::Domain { .. }) => {
                    return Err(MgfError::Diverged {
                        epoch,
                        last_good: Box::new(last_good),
                    })
                }
                Err(e) => return Err(e),
            };
            let n = batch.len() as f64;
            sum_total += tape.value(terms.total).item() * n;
            sum_fwd += tape.value(terms.forward).item() * n;
            sum_inv += terms.inverse.map_or(0.0, |v| tape.value(v).item()) * n;

            let param_grads: Vec<Option<Tensor>> = p.vars().iter().map(|&v| grads.take(v)).collect();
            let mut means = Tensor::from_parts(
                vec![model.prior().k(), model.prior().dim()],
                model.prior().means().concat(),
            );
            let mut log_sigma = Tensor::from_parts(vec![model.prior().k(), 1], model.prior().log_sigmas());
            let g_means = grads.take(pv.means);
            let g_sigma = grads.take(pv.log_sigma);
            {
                let mut slots: Vec<(&mut Tensor, Option<&Tensor>)> = model
                    .params_mut()
                    .tensors_mut()
                    .iter_mut()
                    .zip(&param_grads)
                    .map(|(t, g)| (t, g.as_ref()))
                    .collect();
                slots.push((&mut means, g_means.as_ref()));
                slots.push((&mut log_sigma, g_sigma.as_ref()));
                adam.step(&mut slots);
            }
            if g_means.is_some() || g_sigma.is_some() {
                let d = model.prior().dim();
                let means: Vec<Vec<f64>> = means.data().chunks_exact(d).map(<[f64]>::to_vec).collect();
                let prior = model.prior().with_parameters(&means, log_sigma.data())?;
                model.set_prior(prior)?;
            }
            if model.params().tensors().iter().any(|t| !t.is_finite()) {
                return Err(MgfError::Diverged {
                    epoch,
                    last_good: Box::new(last_good),
                });
            }
        }
        let n = windows.len() as f64;
        let stats = EpochStats {
            epoch,
            total: sum_total / n,
            forward: sum_fwd / n,
            inverse: sum_inv / n,
        };
        history.push(stats);
        progress(&stats);
        last_good = Checkpoint::from_model(&model, cfg, epoch, &history);
        if stats.total < best_loss {
            best_loss = stats.total;
            best = last_good.clone();
        }
    }
    Ok(TrainOutcome {
        model,
        best,
        last: last_good,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::check_gradients;
    use crate::trajdata::{synth_generate, SynthSpec};

    fn tiny_config(t_fut: usize) -> ModelConfig {
        ModelConfig {
            t_obs: 3,
            t_fut,
            context_dim: 8,
            layers: 2,
            hidden: 8,
            clamp: 5.0,
        }
    }

    fn window(obs: Vec<[f64; 2]>, fut: Vec<[f64; 2]>) -> TrajectoryWindow {
        TrajectoryWindow {
            scene_id: "t".into(),
            agent_id: 0,
            observed: obs,
            future: fut,
        }
    }

    fn perturb(model: &mut MgfModel, scale: f64, seed: u64) {
        let mut rng = Rng::seed(seed);
        for t in model.params_mut().tensors_mut() {
            t.data_mut()
                .iter_mut()
                .for_each(|v| *v += scale * rng.standard_normal());
        }
    }

    fn random_windows(n: usize, t_obs: usize, t_fut: usize, seed: u64) -> Vec<TrajectoryWindow> {
        let mut rng = Rng::seed(seed);
        (0..n)
            .map(|_| {
                let mut pt = |_| [rng.normal(0.0, 1.5), rng.normal(0.0, 1.5)];
                window((0..t_obs).map(&mut pt).collect(), (0..t_fut).map(&mut pt).collect())
            })
            .collect()
    }

    #[test]
    fn forward_loss_at_mode_is_gaussian_normalizer() {
        let sigma = 0.3;
        let prior = MixedGaussianPrior::from_means(vec![vec![1.0, 2.0, 3.0, 4.0]], vec![1.0], sigma).unwrap();
        let model = MgfModel::new(tiny_config(2), prior, &mut Rng::seed(0)).unwrap();
        let w = window(vec![[0.0, 0.0]; 3], vec![[1.0, 2.0], [3.0, 4.0]]);
        let loss = mean_forward_loss(&model, &[w]).unwrap();
        let expect = 4.0 * (sigma * (2.0 * std::f64::consts::PI).sqrt()).ln();
        assert!((loss - expect).abs() < 1e-12, "{loss} vs {expect}");
    }

    #[test]
    fn identity_flow_forward_loss_is_component_nll() {
        let prior =
            MixedGaussianPrior::from_means(vec![vec![0.0; 4], vec![2.0, 0.0, 4.0, 0.0]], vec![0.3, 0.7], 0.8).unwrap();
        let model = MgfModel::new(tiny_config(2), prior.clone(), &mut Rng::seed(0)).unwrap();
        for w in random_windows(20, 3, 2, 9) {
            let x = pivot(&w).flat_future();
            let k = prior.nearest_component(&x);
            let loss = mean_forward_loss(&model, std::slice::from_ref(&w)).unwrap();
            assert_eq!(loss, -prior.logpdf_component(k, &x).unwrap());
        }
    }

    #[test]
    fn forward_loss_matches_independent_chain() {
        let prior = MixedGaussianPrior::from_means(
            vec![vec![0.5, 0.0, 1.0, 0.0], vec![0.0, -0.5, 0.0, -1.0]],
            vec![0.4, 0.6],
            0.7,
        )
        .unwrap()
        .edit(&crate::prior::PriorEdit::ScaleSigma {
            component: Some(1),
            factor: 1.7,
        })
        .unwrap();
        let mut model = MgfModel::new(tiny_config(2), prior.clone(), &mut Rng::seed(3)).unwrap();
        perturb(&mut model, 0.2, 4);
        let windows = random_windows(50, 3, 2, 5);
        let batched = mean_forward_loss(&model, &windows).unwrap();
        let mut sum = 0.0;
        for w in &windows {
            let o = pivot(w);
            let x = o.flat_future();
            let (z, ld) = model
                .inverse_offsets(&o.flat_observed(), std::slice::from_ref(&x))
                .unwrap();
            let k = prior.nearest_component(&x);
            let c = &prior.components()[k];
            let s2 = (2.0 * c.log_sigma).exp();
            let d2: f64 = z[0].iter().zip(&c.mean).map(|(a, b)| (a - b).powi(2)).sum();
            let logp = c.weight.ln() - 0.5 * 4.0 * (2.0 * std::f64::consts::PI * s2).ln() - d2 / (2.0 * s2);
            sum += -(logp + ld[0]);
        }
        assert!((batched - sum / 50.0).abs() < 1e-10);
    }

    fn tiny_setup() -> (MgfModel, Batch, Vec<usize>, InverseDraws) {
        let prior = MixedGaussianPrior::from_means(
            vec![vec![0.5, 0.2, 1.0, 0.3], vec![-0.4, 0.1, -0.9, 0.2]],
            vec![0.5, 0.5],
            0.6,
        )
        .unwrap();
        let mut model = MgfModel::new(tiny_config(2), prior.clone(), &mut Rng::seed(11)).unwrap();
        perturb(&mut model, 0.1, 12);
        let windows = random_windows(3, 3, 2, 13);
        let refs: Vec<&TrajectoryWindow> = windows.iter().collect();
        let batch = Batch::from_windows(&refs).unwrap();
        let nearest = nearest_components(&prior, &batch);
        let draws = InverseDraws::sample(&prior, 3, 4, &mut Rng::seed(14));
        (model, batch, nearest, draws)
    }

    fn tensors_with_prior(model: &MgfModel) -> Vec<Tensor> {
        let prior = model.prior();
        let mut inputs = model.params().tensors().to_vec();
        inputs.push(Tensor::from_parts(vec![prior.k(), prior.dim()], prior.means().concat()));
        inputs.push(Tensor::from_parts(vec![prior.k(), 1], prior.log_sigmas()));
        inputs
    }

    fn loss_fn<'a>(
        model: &'a MgfModel,
        batch: &'a Batch,
        nearest: &[usize],
        draws: &InverseDraws,
        which: u8,
    ) -> impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'a {
        let nearest = nearest.to_vec();
        let draws = draws.clone();
        move |tape, vars| {
            let n = vars.len();
            let p = Bound::from_vars(vars[..n - 2].to_vec());
            let pv = PriorVars {
                means: vars[n - 2],
                log_sigma: vars[n - 1],
                log_weights: model.prior().weights().iter().map(|w| w.ln()).collect(),
            };
            let terms = total_loss(tape, model, &p, &pv, batch, &nearest, Some(&draws), 1.0)?;
            Ok(match which {
                0 => terms.total,
                1 => terms.forward,
                _ => terms.inverse.unwrap(),
            })
        }
    }

    #[test]
    fn total_loss_gradients_match_finite_differences() {
        let (model, batch, nearest, draws) = tiny_setup();
        let inputs = tensors_with_prior(&model);
        let report = check_gradients(loss_fn(&model, &batch, &nearest, &draws, 0), &inputs, 1e-5).unwrap();
        assert!(report.max_rel_err < 1e-3, "{report:?}");
        assert_eq!(report.checked, inputs.iter().map(Tensor::len).sum::<usize>());
    }

    #[test]
    fn total_gradient_is_sum_of_term_gradients() {
        let (model, batch, nearest, draws) = tiny_setup();
        let inputs = tensors_with_prior(&model);
        let grads = |which: u8| -> Vec<Tensor> {
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
            let out = loss_fn(&model, &batch, &nearest, &draws, which)(&mut tape, &vars).unwrap();
            let g = tape.backward(out).unwrap();
            vars.iter()
                .zip(&inputs)
                .map(|(&v, t)| g.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
                .collect()
        };
        let (total, fwd, inv) = (grads(0), grads(1), grads(2));
        for ((t, f), i) in total.iter().zip(&fwd).zip(&inv) {
            for ((a, b), c) in t.data().iter().zip(f.data()).zip(i.data()) {
                assert!((a - (b + c)).abs() <= 1e-12 * a.abs().max(1.0));
            }
        }
    }

    #[test]
    fn gamma_zero_is_forward_only() {
        let (model, batch, nearest, draws) = tiny_setup();
        let mut tape = Tape::new();
        let p = model.params().bind(&mut tape, false);
        let pv = PriorVars::bind(&mut tape, model.prior(), false, false);
        let t0 = total_loss(&mut tape, &model, &p, &pv, &batch, &nearest, Some(&draws), 0.0).unwrap();
        assert_eq!(tape.value(t0.total).item(), tape.value(t0.forward).item());
        let t1 = total_loss(&mut tape, &model, &p, &pv, &batch, &nearest, Some(&draws), 1.0).unwrap();
        let (f, i) = (tape.value(t1.forward).item(), tape.value(t1.inverse.unwrap()).item());
        assert_eq!(tape.value(t1.total).item(), f + i);
    }

    #[test]
    fn inverse_loss_matches_brute_force_min() {
        let (model, batch, _, draws) = tiny_setup();
        let mut tape = Tape::new();
        let p = model.params().bind(&mut tape, false);
        let pv = PriorVars::bind(&mut tape, model.prior(), false, false);
        let obs = tape.constant(batch.observed.clone());
        let c = model.context(&mut tape, &p, obs).unwrap();
        let loss = inverse_loss(&mut tape, &model, &p, &pv, &batch, &draws, c).unwrap();
        let prior = model.prior();
        let mut expect = 0.0;
        for w in 0..batch.len() {
            let zs: Vec<Vec<f64>> = (0..draws.m)
                .map(|i| {
                    let r = w * draws.m + i;
                    let comp = &prior.components()[draws.components[r]];
                    comp.mean
                        .iter()
                        .zip(draws.eps.row_slice(r))
                        .map(|(mu, e)| mu + comp.sigma() * e)
                        .collect()
                })
                .collect();
            let (xs, _) = model.forward_latents(batch.observed.row_slice(w), &zs).unwrap();
            let gt = batch.future.row_slice(w);
            let best = xs
                .iter()
                .map(|x| x.iter().zip(gt).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 2.0)
                .fold(f64::INFINITY, f64::min);
            expect += best;
        }
        assert!((tape.value(loss).item() - expect / batch.len() as f64).abs() < 1e-10);
    }

    #[test]
    fn inverse_loss_zero_for_exact_candidate() {
        let prior = MixedGaussianPrior::from_means(vec![vec![1.0, 0.0, 2.0, 0.0]], vec![1.0], 0.5).unwrap();
        let model = MgfModel::new(tiny_config(2), prior.clone(), &mut Rng::seed(0)).unwrap();
        let w = window(vec![[0.0, 0.0]; 3], vec![[1.0, 0.0], [2.0, 0.0]]);
        let batch = Batch::from_windows(&[&w]).unwrap();
        let mut eps = vec![0.0; 8];
        eps[4] = 2.0;
        let draws = InverseDraws {
            m: 2,
            components: vec![0, 0],
            eps: Tensor::from_parts(vec![2, 4], eps),
        };
        let mut tape = Tape::new();
        let p = model.params().bind(&mut tape, false);
        let pv = PriorVars::bind(&mut tape, &prior, false, false);
        let obs = tape.constant(batch.observed.clone());
        let c = model.context(&mut tape, &p, obs).unwrap();
        let (err, best) = inverse_candidate_errors(&mut tape, &model, &p, &pv, &batch, &draws, c).unwrap();
        assert_eq!(tape.value(err).data(), &[0.0, 0.5]);
        assert_eq!(best, vec![0]);
        let loss = inverse_loss(&mut tape, &model, &p, &pv, &batch, &draws, c).unwrap();
        assert_eq!(tape.value(loss).item(), 0.0);
    }

    #[test]
    fn inverse_loss_picks_smaller_error() {
        // Candidate errors 4.0 and 1.0 per step over one step.
        let prior = MixedGaussianPrior::from_means(vec![vec![0.0, 0.0]], vec![1.0], 1.0).unwrap();
        let model = MgfModel::new(tiny_config(1), prior.clone(), &mut Rng::seed(0)).unwrap();
        let w = window(vec![[0.0, 0.0]; 3], vec![[0.0, 0.0]]);
        let batch = Batch::from_windows(&[&w]).unwrap();
        let draws = InverseDraws {
            m: 2,
            components: vec![0, 0],
            eps: Tensor::from_parts(vec![2, 2], vec![2.0, 0.0, 0.0, 1.0]),
        };
        let mut tape = Tape::new();
        let p = model.params().bind(&mut tape, false);
        let pv = PriorVars::bind(&mut tape, &prior, false, false);
        let obs = tape.constant(batch.observed.clone());
        let c = model.context(&mut tape, &p, obs).unwrap();
        let loss = inverse_loss(&mut tape, &model, &p, &pv, &batch, &draws, c).unwrap();
        assert_eq!(tape.value(loss).item(), 1.0);
    }

    #[test]
    fn config_validation() {
        let ok = TrainConfig::default();
        assert!(ok.validate().is_ok());
        for bad in [
            TrainConfig {
                gamma: -1.0,
                ..ok.clone()
            },
            TrainConfig {
                m_train: 0,
                ..ok.clone()
            },
            TrainConfig { lr: 0.0, ..ok.clone() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    fn small_train_config(seed: u64) -> TrainConfig {
        TrainConfig {
            k: 3,
            epochs: 3,
            batch: 16,
            m_train: 4,
            lr: 3e-3,
            seed,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn training_is_deterministic_and_moves_sigma() {
        let spec = SynthSpec {
            t_obs: 3,
            t_fut: 4,
            ..SynthSpec::default()
        };
        let windows = synth_generate(&spec, 64, &mut Rng::seed(21)).unwrap();
        let cfg = tiny_config(4);
        let a = train(&windows, cfg, &small_train_config(5)).unwrap();
        let b = train(&windows, cfg, &small_train_config(5)).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.history.len(), 3);
        assert!(a.model.prior().log_sigmas().iter().any(|&r| r != 0.5f64.ln()));
        assert_eq!(a.last.epoch, 3);
        assert!(a.best.loss_history.len() <= 3);
    }

    #[test]
    fn too_few_windows_for_batch() {
        let windows = random_windows(5, 3, 2, 1);
        let cfg = TrainConfig {
            k: 2,
            batch: 8,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train(&windows, tiny_config(2), &cfg),
            Err(MgfError::Config(_))
        ));
    }

    #[test]
    fn divergence_returns_last_good_checkpoint() {
        let windows = random_windows(16, 3, 2, 2);
        let cfg = TrainConfig {
            k: 2,
            batch: 8,
            epochs: 50,
            lr: 1e6,
            m_train: 2,
            ..TrainConfig::default()
        };
        match train(&windows, tiny_config(2), &cfg) {
            Err(MgfError::Diverged { epoch, last_good }) => {
                assert_eq!(last_good.epoch + 1, epoch);
                assert!(last_good.params.tensors().iter().all(Tensor::is_finite));
            }
            other => panic!("expected divergence, got {:?}", other.map(|o| o.history)),
        }
    }
}
