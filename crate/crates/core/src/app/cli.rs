use std::fs::File;
use std::io::{BufWriter, Write};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use super::config::{AppConfig, DataSource};
use super::service::{self, ServiceState};
use crate::error::{MgfError, Result};
use crate::metrics::evaluate;
use crate::model::{MgfModel, PredictOptions};
use crate::numerics::Rng;
use crate::prior::PriorEdit;
use crate::training::{load_checkpoint, save_checkpoint, train_with_progress, Checkpoint};
use crate::trajdata::{Point, TrajectoryWindow};

#[derive(Debug, Parser)]
#[command(name = "mgf", version, about = "Mixed Gaussian flow trajectory forecaster")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a prior and train a model, writing a checkpoint and a loss log.
    Train(Overrides),
    /// Score a checkpoint on the held-out windows.
    Eval(Overrides),
    /// Sample candidate futures for one window as JSON.
    Sample(SampleArgs),
    /// Edit the prior of a checkpoint and write a new checkpoint.
    EditPrior(EditArgs),
    /// Serve predictions and prior edits over HTTP.
    Serve(ServeArgs),
}

/// Config file plus per-key overrides.
#[derive(Debug, Default, Args)]
pub struct Overrides {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Read tracks from a TSV file instead of generating synthetic data.
    #[arg(long)]
    pub tsv: Option<PathBuf>,
    #[arg(long)]
    pub stride: Option<usize>,
    /// Number of synthetic windows.
    #[arg(long)]
    pub synth_n: Option<usize>,
    #[arg(long)]
    pub holdout: Option<f64>,
    /// Train on the 2:2:1:1 original/180°/90°/−90° augmented set.
    #[arg(long)]
    pub augment: bool,
    #[arg(long)]
    pub t_obs: Option<usize>,
    #[arg(long)]
    pub t_fut: Option<usize>,
    #[arg(long)]
    pub context_dim: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub clamp: Option<f64>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub sigma_init: Option<f64>,
    #[arg(long)]
    pub learnable_sigma: Option<bool>,
    #[arg(long)]
    pub trainable_means: Option<bool>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub m_train: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub j: Option<usize>,
    #[arg(long)]
    pub clustering: Option<bool>,
    #[arg(long, value_delimiter = ',')]
    pub m_sweep: Option<Vec<usize>>,
    #[arg(long)]
    pub worst_n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub best_checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub loss_log: Option<PathBuf>,
    /// Where to write the JSON evaluation report.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

impl Overrides {
    pub fn resolve(&self) -> Result<AppConfig> {
        let mut c = match &self.config {
            Some(p) => AppConfig::load(p)?,
            None => AppConfig::default(),
        };
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = &self.$f { c.$f = v.clone(); } )* };
        }
        set!(
            holdout,
            t_obs,
            t_fut,
            context_dim,
            layers,
            hidden,
            clamp,
            k,
            sigma_init,
            learnable_sigma,
            trainable_means
        );
        set!(gamma, m_train, lr, epochs, batch, m, j, clustering, m_sweep, seed, checkpoint);
        if let Some(n) = self.worst_n {
            c.worst_n = Some(n);
        }
        for (dst, src) in [
            (&mut c.best_checkpoint, &self.best_checkpoint),
            (&mut c.loss_log, &self.loss_log),
            (&mut c.report, &self.report),
        ] {
            if src.is_some() {
                dst.clone_from(src);
            }
        }
        if let Some(path) = &self.tsv {
            c.data = DataSource::Tsv {
                path: path.clone(),
                stride: self.stride.unwrap_or(1),
            };
        } else if let Some(n) = self.synth_n {
            c.data = match c.data {
                DataSource::Synth { spec, .. } => DataSource::Synth { spec, n },
                DataSource::Tsv { .. } => DataSource::Synth { spec: None, n },
            };
        }
        if self.augment {
            c.augment = crate::prior::RotationSpec::u_turn_and_sharp_turns();
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = crate::model::DEFAULT_M)]
    pub m: usize,
    #[arg(long)]
    pub clustering: bool,
    #[arg(long, default_value_t = crate::model::DEFAULT_J)]
    pub j: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Observed history as `x,y;x,y;…`. Defaults to a synthetic window.
    #[arg(long)]
    pub history: Option<String>,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EditArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Output checkpoint; defaults to overwriting the input.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Raw weights, renormalized, e.g. `2,1,1`.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub set_weights: Option<Vec<f64>>,
    /// Rotation in degrees applied to every step of the mean.
    #[arg(long, allow_hyphen_values = true)]
    pub rotate_mean: Option<f64>,
    /// Variance factor.
    #[arg(long)]
    pub scale_sigma: Option<f64>,
    /// Restricts --rotate-mean and --scale-sigma to one component.
    #[arg(long)]
    pub component: Option<usize>,
    #[arg(long)]
    pub remove_component: Option<usize>,
    /// JSON file holding a list of edits.
    #[arg(long)]
    pub edits: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
    /// Config whose held-out windows become the bundled scenes.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    pub scenes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(o) => cmd_train(&o.resolve()?),
        Command::Eval(o) => cmd_eval(&o.resolve()?),
        Command::Sample(a) => cmd_sample(&a),
        Command::EditPrior(a) => cmd_edit(&a),
        Command::Serve(a) => cmd_serve(&a),
    }
}

fn cmd_train(cfg: &AppConfig) -> Result<()> {
    let (train, _) = cfg.split_windows()?;
    let mut log: Box<dyn Write> = match &cfg.loss_log {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(std::io::stderr()),
    };
    let mut io_err = None;
    let outcome = train_with_progress(&train, cfg.model_config(), &cfg.train_config(), |s| {
        if let Err(e) = writeln!(
            log,
            "epoch\t{}\ttotal\t{}\tforward\t{}\tinverse\t{}",
            s.epoch, s.total, s.forward, s.inverse
        ) {
            io_err.get_or_insert(e);
        }
    });
    let outcome = match outcome {
        Ok(o) => o,
        Err(MgfError::Diverged { epoch, last_good }) => {
            save_checkpoint(&last_good, &cfg.checkpoint)?;
            return Err(MgfError::Diverged { epoch, last_good });
        }
        Err(e) => return Err(e),
    };
    if let Some(e) = io_err {
        return Err(e.into());
    }
    log.flush()?;
    save_checkpoint(&outcome.last, &cfg.checkpoint)?;
    if let Some(p) = &cfg.best_checkpoint {
        save_checkpoint(&outcome.best, p)?;
    }
    eprintln!(
        "trained {} epochs on {} windows; checkpoint written to {}",
        outcome.history.len(),
        train.len(),
        cfg.checkpoint.display()
    );
    Ok(())
}

fn cmd_eval(cfg: &AppConfig) -> Result<()> {
    let model = load_checkpoint(&cfg.checkpoint)?.to_model()?;
    let (_, test) = cfg.split_windows()?;
    if test.is_empty() {
        return Err(MgfError::Config("holdout leaves no evaluation windows".into()));
    }
    let report = evaluate(&model, &test, &cfg.eval_config())?;
    print!("{}", report.to_text());
    if let Some(p) = &cfg.report {
        std::fs::write(p, serde_json::to_vec_pretty(&report)?)?;
    }
    Ok(())
}

fn parse_history(text: &str) -> Result<Vec<Point>> {
    text.split(';')
        .filter(|s| !s.trim().is_empty())
        .map(|pair| {
            let v: Vec<f64> = pair
                .split(',')
                .map(|x| {
                    x.trim()
                        .parse::<f64>()
                        .map_err(|e| MgfError::invalid(format!("history value {x:?}: {e}")))
                })
                .collect::<Result<_>>()?;
            match v[..] {
                [x, y] => Ok([x, y]),
                _ => Err(MgfError::invalid(format!("history point {pair:?} needs two values"))),
            }
        })
        .collect()
}

#[derive(Serialize)]
struct SampleOutput<'a> {
    history: &'a [Point],
    prior_version: u64,
    candidates: Vec<Vec<Point>>,
    components: Vec<usize>,
    log_probs: Vec<f64>,
}

fn default_window(model: &MgfModel, seed: u64) -> Result<TrajectoryWindow> {
    let cfg = model.config();
    let spec = crate::trajdata::SynthSpec {
        t_obs: cfg.t_obs,
        t_fut: cfg.t_fut,
        ..Default::default()
    };
    Ok(crate::trajdata::synth_generate(&spec, 1, &mut Rng::stream(seed, 7))?.remove(0))
}

fn cmd_sample(a: &SampleArgs) -> Result<()> {
    let model = load_checkpoint(&a.checkpoint)?.to_model()?;
    let history = match &a.history {
        Some(h) => parse_history(h)?,
        None => default_window(&model, a.seed)?.observed,
    };
    let opts = PredictOptions {
        clustering: a.clustering,
        oversample: a.j,
    };
    let set = model.predict(&history, a.m, &mut Rng::seed(a.seed), opts)?;
    let out = SampleOutput {
        history: &history,
        prior_version: set.prior_version,
        candidates: set.candidates,
        components: set.components,
        log_probs: set.log_probs,
    };
    let json = serde_json::to_vec(&out)?;
    match &a.output {
        Some(p) => std::fs::write(p, json)?,
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(&json)?;
            stdout.write_all(b"\n")?;
        }
    }
    Ok(())
}

fn collect_edits(a: &EditArgs) -> Result<Vec<PriorEdit>> {
    let mut edits: Vec<PriorEdit> = match &a.edits {
        Some(p) => serde_json::from_slice(&std::fs::read(p)?)?,
        None => Vec::new(),
    };
    if let Some(w) = &a.set_weights {
        edits.push(PriorEdit::SetWeights { weights: w.clone() });
    }
    if let Some(degrees) = a.rotate_mean {
        edits.push(PriorEdit::RotateMean {
            component: a.component,
            degrees,
        });
    }
    if let Some(factor) = a.scale_sigma {
        edits.push(PriorEdit::ScaleSigma {
            component: a.component,
            factor,
        });
    }
    if let Some(component) = a.remove_component {
        edits.push(PriorEdit::RemoveComponent { component });
    }
    if edits.is_empty() {
        return Err(MgfError::invalid("no edits given"));
    }
    Ok(edits)
}

fn cmd_edit(a: &EditArgs) -> Result<()> {
    let edits = collect_edits(a)?;
    let mut ckpt: Checkpoint = load_checkpoint(&a.checkpoint)?;
    ckpt.prior = ckpt.prior.edit_all(&edits)?;
    let out = a.output.as_ref().unwrap_or(&a.checkpoint);
    save_checkpoint(&ckpt, out)?;
    eprintln!("prior version {} written to {}", ckpt.prior.version(), out.display());
    Ok(())
}

fn cmd_serve(a: &ServeArgs) -> Result<()> {
    let model = load_checkpoint(&a.checkpoint)?.to_model()?;
    let mut scenes = match &a.config {
        Some(p) => AppConfig::load(p)?.split_windows()?.1,
        None => {
            let cfg = model.config();
            let spec = crate::trajdata::SynthSpec {
                t_obs: cfg.t_obs,
                t_fut: cfg.t_fut,
                ..Default::default()
            };
            crate::trajdata::synth_generate(&spec, a.scenes, &mut Rng::stream(a.seed, 7))?
        }
    };
    scenes.truncate(a.scenes);
    let state = Arc::new(ServiceState::new(model, scenes, a.seed));
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(service::serve(state, a.addr))
}
