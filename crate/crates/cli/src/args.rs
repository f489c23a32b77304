use std::path::PathBuf;

use acrkn_core::config::OptimizerName;
use acrkn_core::{ControlKind, EvalOptions, LossKind, Protocol, RunConfig, SystemKind};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;

#[derive(Debug, Parser)]
#[command(name = "acrkn", version, about = "Action-conditional recurrent Kalman network dynamics models")]
pub struct Cli {
    /// Log training progress to stderr (RUST_LOG overrides).
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a synthetic system and write data.csv plus manifest.json.
    GenData(GenDataArgs),
    /// Train a forward or inverse dynamics model.
    Train(TrainArgs),
    /// Score a trained model on the test split.
    Evaluate(EvaluateArgs),
    /// Open-loop multi-step prediction for one episode.
    Predict(PredictArgs),
    /// Finite-difference gradient check of a tiny end-to-end model.
    Gradcheck(GradcheckArgs),
    /// Train and score a grid of variants over several seeds.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, value_parser = parse_system)]
    pub system: SystemKind,
    #[arg(long)]
    pub episodes: usize,
    #[arg(long)]
    pub len: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Standard deviation of additive observation noise.
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Forward,
    Inverse,
}

impl From<ModeArg> for acrkn_core::Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Forward => acrkn_core::Mode::Forward,
            ModeArg::Inverse => acrkn_core::Mode::Inverse,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    pub mode: ModeArg,
    /// JSON run configuration; flags override its keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory for model.json, metrics.csv and run.json.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub flags: ConfigFlags,
}

/// Every run-configuration key as a flag.
#[derive(Clone, Debug, Default, Args)]
pub struct ConfigFlags {
    /// Dataset: a manifest.json (uses its split) or a CSV (4:1 split).
    #[arg(long)]
    pub data: Option<String>,
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub latent_obs_dim: Option<usize>,
    #[arg(long)]
    pub latent_state_dim: Option<usize>,
    #[arg(long)]
    pub num_basis: Option<usize>,
    #[arg(long)]
    pub bandwidth: Option<usize>,
    /// linear, locally-linear or nonlinear.
    #[arg(long, value_parser = parse_kebab::<ControlKind>)]
    pub control_kind: Option<ControlKind>,
    #[arg(long)]
    pub control_basis: Option<usize>,
    /// Feed actions to the encoder instead of using a control model.
    #[arg(long)]
    pub actions_as_observations: bool,
    #[arg(long, value_delimiter = ',')]
    pub encoder_hidden: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub decoder_hidden: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub control_hidden: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub action_decoder_hidden: Option<Vec<usize>>,
    #[arg(long)]
    pub variance_head: Option<bool>,
    #[arg(long)]
    pub init_var: Option<f64>,
    /// Weight of the auxiliary forward loss of the inverse model.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub action_feedback: Option<bool>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// adam or sgd.
    #[arg(long, value_parser = parse_kebab::<OptimizerName>)]
    pub optimizer: Option<OptimizerName>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// full, prefix:<observed> or random:<drop fraction>.
    #[arg(long, value_parser = parse_protocol)]
    pub protocol: Option<Protocol>,
    /// rmse or nll.
    #[arg(long, value_parser = parse_kebab::<LossKind>)]
    pub loss: Option<LossKind>,
    #[arg(long)]
    pub clip_norm: Option<f64>,
    #[arg(long)]
    pub val_fraction: Option<f64>,
    /// Record wall-clock milliseconds per epoch in metrics.csv.
    #[arg(long)]
    pub record_time: bool,
}

impl ConfigFlags {
    pub fn to_run_config(&self) -> RunConfig {
        RunConfig {
            preset: self.preset.clone(),
            data: self.data.clone(),
            latent_obs_dim: self.latent_obs_dim,
            latent_state_dim: self.latent_state_dim,
            num_basis: self.num_basis,
            bandwidth: self.bandwidth,
            control_kind: self.control_kind,
            control_basis: self.control_basis,
            actions_as_observations: self.actions_as_observations.then_some(true),
            encoder_hidden: self.encoder_hidden.clone(),
            decoder_hidden: self.decoder_hidden.clone(),
            control_hidden: self.control_hidden.clone(),
            action_decoder_hidden: self.action_decoder_hidden.clone(),
            variance_head: self.variance_head,
            init_var: self.init_var,
            lambda: self.lambda,
            action_feedback: self.action_feedback,
            lr: self.lr,
            optimizer: self.optimizer,
            momentum: self.momentum,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            protocol: self.protocol,
            loss: self.loss,
            clip_norm: self.clip_norm,
            val_fraction: self.val_fraction,
            record_time: self.record_time.then_some(true),
        }
    }
}

#[derive(Clone, Copy, Debug, Args)]
pub struct EvalFlags {
    /// Longest prediction horizon.
    #[arg(long, default_value_t = 20)]
    pub horizon: usize,
    /// First window start; earlier observations are always visible.
    #[arg(long, default_value_t = 20)]
    pub warmup: usize,
    #[arg(long, default_value_t = 5)]
    pub stride: usize,
}

impl EvalFlags {
    pub fn options(&self) -> EvalOptions {
        EvalOptions {
            horizon: self.horizon,
            warmup: self.warmup,
            stride: self.stride,
            ..EvalOptions::default()
        }
    }
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Checkpoint file or the directory holding model.json.
    #[arg(long)]
    pub model: PathBuf,
    /// Defaults to the dataset the model was trained on.
    #[arg(long)]
    pub data: Option<String>,
    #[command(flatten)]
    pub eval: EvalFlags,
    /// Also train and score an RKN that treats actions as observations.
    #[arg(long)]
    pub aao_baseline: bool,
    /// Results CSV; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: String,
    #[arg(long)]
    pub episode: u64,
    /// Number of leading observations the model sees.
    #[arg(long)]
    pub observed: usize,
    #[arg(long)]
    pub horizon: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    #[arg(long, default_value_t = 1e-6)]
    pub eps: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Ablation {
    /// Linear, locally-linear and nonlinear control models (forward).
    ControlKind,
    /// Inverse model with and without action feedback.
    ActionFeedback,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long, value_enum)]
    pub ablate: Ablation,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    pub seeds: Vec<u64>,
    /// Output directory for ablation.csv and run.json.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub eval: EvalFlags,
    #[command(flatten)]
    pub flags: ConfigFlags,
}

/// Parses a kebab-case enum value through its serde representation.
fn parse_kebab<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

fn parse_system(s: &str) -> Result<SystemKind, String> {
    s.parse().map_err(|e: acrkn_core::CoreError| e.to_string())
}

pub fn parse_protocol(s: &str) -> Result<Protocol, String> {
    let (kind, arg) = match s.split_once(':') {
        Some((k, a)) => (k, Some(a)),
        None => (s, None),
    };
    let protocol = match (kind, arg) {
        ("full", None) => Protocol::Full,
        ("prefix", Some(a)) => Protocol::Prefix {
            observed: a.parse().map_err(|_| format!("bad prefix length `{a}`"))?,
        },
        ("random", Some(a)) => Protocol::Random {
            drop_fraction: a.parse().map_err(|_| format!("bad drop fraction `{a}`"))?,
        },
        _ => return Err(format!("expected full, prefix:<observed> or random:<fraction>, got `{s}`")),
    };
    protocol.validate().map_err(|e| e.to_string())?;
    Ok(protocol)
}
