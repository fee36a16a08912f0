//! Checkpoint files: `MGF1`, a little-endian u64 manifest length, the JSON
//! manifest, then every tensor as raw little-endian f64 in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EpochStats, TrainConfig};
use crate::error::{MgfError, Result};
use crate::model::{MgfModel, ModelConfig};
use crate::nn::ParamStore;
use crate::numerics::{Rng, Tensor};
use crate::prior::{GaussianComponent, MixedGaussianPrior};

const MAGIC: &[u8; 4] = b"MGF1";
const FORMAT_VERSION: u32 = 1;

const PRIOR_MEANS: &str = "prior.means";
const PRIOR_LOG_SIGMA: &str = "prior.log_sigma";
const PRIOR_WEIGHTS: &str = "prior.weights";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub epoch: usize,
    pub loss_history: Vec<EpochStats>,
    pub params: ParamStore,
    pub prior: MixedGaussianPrior,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    model: ModelConfig,
    train: TrainConfig,
    epoch: usize,
    loss_history: Vec<EpochStats>,
    prior_version: u64,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn from_model(model: &MgfModel, train: &TrainConfig, epoch: usize, history: &[EpochStats]) -> Self {
        Self {
            model: *model.config(),
            train: train.clone(),
            epoch,
            loss_history: history.to_vec(),
            params: model.params().clone(),
            prior: model.prior().clone(),
        }
    }

    /// Rebuilds the model, checking that every stored tensor matches the
    /// architecture named in the config.
    pub fn to_model(&self) -> Result<MgfModel> {
        let mut model = MgfModel::new(self.model, self.prior.clone(), &mut Rng::seed(0))?;
        if model.params().names() != self.params.names() {
            return Err(MgfError::Checkpoint(
                "parameter names do not match the model config".into(),
            ));
        }
        for (name, t) in self.params.iter() {
            model.params_mut().assign(name, t.clone())?;
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let prior = &self.prior;
        let (k, d) = (prior.k(), prior.dim());
        let mut tensors: Vec<(String, Tensor)> = self.params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        tensors.push((
            PRIOR_MEANS.into(),
            Tensor::from_parts(vec![k, d], prior.means().concat()),
        ));
        tensors.push((
            PRIOR_LOG_SIGMA.into(),
            Tensor::from_parts(vec![k, 1], prior.log_sigmas()),
        ));
        tensors.push((PRIOR_WEIGHTS.into(), Tensor::from_parts(vec![k, 1], prior.weights())));

        let mut offset = 0u64;
        let entries = tensors
            .iter()
            .map(|(name, t)| {
                let e = TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += 8 * t.len() as u64;
                e
            })
            .collect();
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            model: self.model,
            train: self.train.clone(),
            epoch: self.epoch,
            loss_history: self.loss_history.clone(),
            prior_version: prior.version(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(12 + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let err = |m: String| MgfError::Checkpoint(m);
        if bytes.len() < 12 {
            return Err(err(format!("file is {} bytes, too short for a header", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(err("bad magic, not an MGF1 checkpoint".into()));
        }
        let len = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes")) as usize;
        let body = &bytes[12..];
        if body.len() < len {
            return Err(err(format!(
                "truncated manifest: need {len} bytes, have {}",
                body.len()
            )));
        }
        let manifest: Manifest = serde_json::from_slice(&body[..len]).map_err(|e| err(format!("manifest: {e}")))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(err(format!("unsupported format version {}", manifest.format_version)));
        }
        let data = &body[len..];
        let mut expected = 0u64;
        let mut params = ParamStore::default();
        let (mut means, mut log_sigma, mut weights) = (None, None, None);
        for e in &manifest.tensors {
            let n: usize = e.shape.iter().product();
            if e.offset != expected {
                return Err(err(format!(
                    "tensor {:?} has offset {}, expected {expected}",
                    e.name, e.offset
                )));
            }
            let start = e.offset as usize;
            let end = start + 8 * n;
            if data.len() < end {
                return Err(err(format!("truncated data in tensor {:?}", e.name)));
            }
            let values: Vec<f64> = data[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(e.shape.clone(), values)?;
            match e.name.as_str() {
                PRIOR_MEANS => means = Some(t),
                PRIOR_LOG_SIGMA => log_sigma = Some(t),
                PRIOR_WEIGHTS => weights = Some(t),
                _ => {
                    params.add(e.name.clone(), t);
                }
            }
            expected = end as u64;
        }
        if data.len() as u64 != expected {
            return Err(err(format!(
                "{} trailing bytes after tensor data",
                data.len() as u64 - expected
            )));
        }
        let (Some(means), Some(log_sigma), Some(weights)) = (means, log_sigma, weights) else {
            return Err(err("prior tensors missing".into()));
        };
        let (k, d) = (means.rows(), means.cols());
        if log_sigma.len() != k || weights.len() != k {
            return Err(err("prior tensors disagree on K".into()));
        }
        let components = (0..k)
            .map(|i| GaussianComponent {
                mean: means.row_slice(i).to_vec(),
                log_sigma: log_sigma.data()[i],
                weight: weights.data()[i],
            })
            .collect();
        let prior = MixedGaussianPrior::new(components, manifest.prior_version)?;
        if prior.dim() != d {
            return Err(err("prior dimension mismatch".into()));
        }
        Ok(Self {
            model: manifest.model,
            train: manifest.train,
            epoch: manifest.epoch,
            loss_history: manifest.loss_history,
            params,
            prior,
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, ckpt.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DensityMode;
    use crate::prior::PriorEdit;

    fn sample_checkpoint() -> Checkpoint {
        let prior = MixedGaussianPrior::from_means(
            vec![vec![0.1, 0.2, 0.3, 0.4], vec![-1.0, 0.5, 2.0, 1.0 / 3.0]],
            vec![0.3, 0.7],
            0.45,
        )
        .unwrap()
        .edit(&PriorEdit::RotateMean {
            component: None,
            degrees: 17.0,
        })
        .unwrap();
        let cfg = ModelConfig {
            t_obs: 4,
            t_fut: 2,
            context_dim: 6,
            layers: 2,
            hidden: 5,
            clamp: 5.0,
        };
        let mut model = MgfModel::new(cfg, prior, &mut Rng::seed(8)).unwrap();
        let mut rng = Rng::seed(9);
        for t in model.params_mut().tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v += 0.1 * rng.standard_normal());
        }
        let history = vec![EpochStats {
            epoch: 1,
            total: 1.0 / 7.0,
            forward: 0.1,
            inverse: std::f64::consts::E,
        }];
        Checkpoint::from_model(&model, &TrainConfig::default(), 1, &history)
    }

    #[test]
    fn bytes_round_trip_identically() {
        let ckpt = sample_checkpoint();
        let bytes = ckpt.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn file_round_trip_and_probe() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.mgf"), dir.path().join("b.mgf"));
        let ckpt = sample_checkpoint();
        save_checkpoint(&ckpt, &a).unwrap();
        let loaded = load_checkpoint(&a).unwrap();
        save_checkpoint(&loaded, &b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

        let obs = [0.3, -0.1, 0.2, 0.0, 0.1, 0.05, 0.0, 0.0];
        let x = [0.5, 0.1, 0.9, 0.3];
        let m0 = ckpt.to_model().unwrap();
        let m1 = loaded.to_model().unwrap();
        for mode in [DensityMode::Mixture, DensityMode::Nearest, DensityMode::Component(1)] {
            assert_eq!(
                m0.log_prob(&x, &obs, mode).unwrap(),
                m1.log_prob(&x, &obs, mode).unwrap()
            );
        }
    }

    #[test]
    fn truncation_and_bad_magic_are_errors() {
        let bytes = sample_checkpoint().to_bytes().unwrap();
        for cut in [0, 3, 11, 40, bytes.len() - 1] {
            assert!(
                matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(MgfError::Checkpoint(_))),
                "cut {cut}"
            );
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(MgfError::Checkpoint(_))));
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }

    #[test]
    fn architecture_mismatch_is_rejected() {
        let mut ckpt = sample_checkpoint();
        ckpt.model.hidden = 7;
        assert!(matches!(ckpt.to_model(), Err(MgfError::Checkpoint(_))));
    }
}
