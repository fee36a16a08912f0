//! JSON application config. Keys are flat so each one has a matching
//! `--kebab-case` CLI flag.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{MgfError, Result};
use crate::flow::{DEFAULT_CLAMP, DEFAULT_HIDDEN, DEFAULT_LAYERS};
use crate::metrics::EvalConfig;
use crate::model::{ModelConfig, DEFAULT_J, DEFAULT_M};
use crate::numerics::Rng;
use crate::prior::{augment_dataset, RotationSpec};
use crate::training::TrainConfig;
use crate::trajdata::{build_windows_in_scene, load_tsv, synth_generate, SynthSpec, TrajectoryWindow};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Tsv {
        path: PathBuf,
        #[serde(default = "one")]
        stride: usize,
    },
    Synth {
        #[serde(default)]
        spec: Option<SynthSpec>,
        #[serde(default = "default_synth_n")]
        n: usize,
    },
}

fn one() -> usize {
    1
}

fn default_synth_n() -> usize {
    1000
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synth {
            spec: None,
            n: default_synth_n(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AppConfig {
    pub data: DataSource,
    /// Fraction of windows held out (taken from the end) for evaluation.
    pub holdout: f64,
    pub augment: Vec<RotationSpec>,

    pub t_obs: usize,
    pub t_fut: usize,
    pub context_dim: usize,
    pub layers: usize,
    pub hidden: usize,
    pub clamp: f64,

    pub k: usize,
    pub sigma_init: f64,
    pub learnable_sigma: bool,
    pub trainable_means: bool,
    pub gamma: f64,
    pub m_train: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,

    pub m: usize,
    pub j: usize,
    pub clustering: bool,
    pub m_sweep: Vec<usize>,
    pub worst_n: Option<usize>,

    pub seed: u64,

    pub checkpoint: PathBuf,
    pub best_checkpoint: Option<PathBuf>,
    pub loss_log: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

impl Default for AppConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let t = TrainConfig::default();
        Self {
            data: DataSource::default(),
            holdout: 0.2,
            augment: Vec::new(),
            t_obs: m.t_obs,
            t_fut: m.t_fut,
            context_dim: m.context_dim,
            layers: DEFAULT_LAYERS,
            hidden: DEFAULT_HIDDEN,
            clamp: DEFAULT_CLAMP,
            k: t.k,
            sigma_init: t.sigma_init,
            learnable_sigma: t.learnable_sigma,
            trainable_means: t.trainable_means,
            gamma: t.gamma,
            m_train: t.m_train,
            lr: t.lr,
            epochs: t.epochs,
            batch: t.batch,
            m: DEFAULT_M,
            j: DEFAULT_J,
            clustering: false,
            m_sweep: Vec::new(),
            worst_n: None,
            seed: 0,
            checkpoint: PathBuf::from("mgf.ckpt"),
            best_checkpoint: None,
            loss_log: None,
            report: None,
        }
    }
}

impl AppConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let cfg: Self =
            serde_json::from_str(&text).map_err(|e| MgfError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MgfError::Config(m));
        if !(0.0..1.0).contains(&self.holdout) {
            return bad(format!("holdout must be in [0, 1), got {}", self.holdout));
        }
        if self.t_obs == 0 || self.t_fut == 0 {
            return bad("t_obs and t_fut must be at least 1".into());
        }
        if self.layers < 2 || self.hidden == 0 || self.context_dim == 0 {
            return bad("need layers ≥ 2 and positive hidden/context_dim".into());
        }
        if !(self.clamp > 0.0 && self.clamp.is_finite()) {
            return bad("clamp must be positive".into());
        }
        if self.m == 0 || self.m_sweep.contains(&0) {
            return bad("m values must be at least 1".into());
        }
        if self.clustering && self.j < self.m.max(self.m_sweep.iter().copied().max().unwrap_or(0)) {
            return bad(format!("j = {} must be at least every evaluated m", self.j));
        }
        if let DataSource::Synth { spec: Some(s), .. } = &self.data {
            s.validate().map_err(|e| MgfError::Config(e.to_string()))?;
            if s.t_obs != self.t_obs || s.t_fut != self.t_fut {
                return bad("synth spec horizons must match t_obs/t_fut".into());
            }
        }
        self.train_config().validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            t_obs: self.t_obs,
            t_fut: self.t_fut,
            context_dim: self.context_dim,
            layers: self.layers,
            hidden: self.hidden,
            clamp: self.clamp,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            k: self.k,
            sigma_init: self.sigma_init,
            learnable_sigma: self.learnable_sigma,
            trainable_means: self.trainable_means,
            gamma: self.gamma,
            m_train: self.m_train,
            j: self.j,
            clustering: self.clustering,
            lr: self.lr,
            epochs: self.epochs,
            batch: self.batch,
            seed: self.seed,
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            m: self.m,
            clustering: self.clustering,
            j: self.j,
            m_sweep: self.m_sweep.clone(),
            worst_n: self.worst_n,
            seed: self.seed,
        }
    }

    /// All windows of the configured source, in a fixed order.
    pub fn load_windows(&self) -> Result<Vec<TrajectoryWindow>> {
        let windows = match &self.data {
            DataSource::Tsv { path, stride } => {
                let points = load_tsv(path)?;
                let scene = path
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default();
                build_windows_in_scene(&points, self.t_obs, self.t_fut, *stride, &scene)?
            }
            DataSource::Synth { spec, n } => {
                let spec = spec.clone().unwrap_or_else(|| SynthSpec {
                    t_obs: self.t_obs,
                    t_fut: self.t_fut,
                    ..SynthSpec::default()
                });
                synth_generate(&spec, *n, &mut Rng::stream(self.seed, 100))?
            }
        };
        if windows.is_empty() {
            return Err(MgfError::Config("data source yields no windows".into()));
        }
        Ok(windows)
    }

    /// `(train, test)`; augmentation applies to the training part only.
    pub fn split_windows(&self) -> Result<(Vec<TrajectoryWindow>, Vec<TrajectoryWindow>)> {
        let mut windows = self.load_windows()?;
        let n_test = (windows.len() as f64 * self.holdout).round() as usize;
        let test = windows.split_off(windows.len() - n_test);
        let train = if self.augment.is_empty() {
            windows
        } else {
            augment_dataset(&windows, &self.augment)?
        };
        Ok((train, test))
    }
}
