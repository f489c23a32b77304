//! Run configuration: a JSON document whose keys may also be given as
//! command-line flags. Unset keys fall back to the selected preset.

use std::path::Path;

use acrkn_numerics::OptimizerRule;
use serde::{Deserialize, Serialize};

use crate::control::ControlKind;
use crate::data::Protocol;
use crate::error::{CoreError, Result};
use crate::models::{Conditioning, InverseConfig, LossKind, ModelConfig};
use crate::presets::preset;
use crate::train::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Forward,
    Inverse,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerName {
    Adam,
    Sgd,
}

/// Every key is optional; see [`RunConfig::resolve`] for defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Option<String>,
    pub data: Option<String>,
    pub latent_obs_dim: Option<usize>,
    pub latent_state_dim: Option<usize>,
    pub num_basis: Option<usize>,
    pub bandwidth: Option<usize>,
    pub control_kind: Option<ControlKind>,
    pub control_basis: Option<usize>,
    pub actions_as_observations: Option<bool>,
    pub encoder_hidden: Option<Vec<usize>>,
    pub decoder_hidden: Option<Vec<usize>>,
    pub control_hidden: Option<Vec<usize>>,
    pub action_decoder_hidden: Option<Vec<usize>>,
    pub variance_head: Option<bool>,
    pub init_var: Option<f64>,
    pub lambda: Option<f64>,
    pub action_feedback: Option<bool>,
    pub lr: Option<f64>,
    pub optimizer: Option<OptimizerName>,
    pub momentum: Option<f64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub seed: Option<u64>,
    pub protocol: Option<Protocol>,
    pub loss: Option<LossKind>,
    pub clip_norm: Option<f64>,
    pub val_fraction: Option<f64>,
    pub record_time: Option<bool>,
}

macro_rules! overlay {
    ($base:expr, $top:expr, $($field:ident),* $(,)?) => {
        $( if $top.$field.is_some() { $base.$field = $top.$field.clone(); } )*
    };
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| CoreError::Config(format!("{}: {e}", path.display())))
    }

    /// Keys set in `top` replace those of `self`.
    pub fn merged(mut self, top: &RunConfig) -> Self {
        overlay!(
            self, top, preset, data, latent_obs_dim, latent_state_dim, num_basis, bandwidth,
            control_kind, control_basis, actions_as_observations, encoder_hidden, decoder_hidden,
            control_hidden, action_decoder_hidden, variance_head, init_var, lambda, action_feedback,
            lr, optimizer, momentum, epochs, batch_size, seed, protocol, loss, clip_norm,
            val_fraction, record_time,
        );
        self
    }

    /// Fills every unset key from the preset and the built-in defaults.
    pub fn resolve(&self, mode: Mode, obs_dim: usize, action_dim: usize) -> Result<ResolvedConfig> {
        let preset_name = self.preset.clone().unwrap_or_else(|| "desk".to_string());
        let p = preset(&preset_name)?;
        let m = self.latent_obs_dim.unwrap_or(p.latent_obs_dim);
        if let Some(n) = self.latent_state_dim {
            if n != 2 * m {
                return Err(CoreError::Config(format!(
                    "latent_state_dim {n} must be twice latent_obs_dim {m}"
                )));
            }
        }
        let num_basis = self.num_basis.unwrap_or(p.num_basis);
        let control_kind = self.control_kind.unwrap_or(ControlKind::Nonlinear);
        let aao = self.actions_as_observations.unwrap_or(false);
        if aao && mode == Mode::Inverse {
            return Err(CoreError::Config("actions_as_observations is a forward-model baseline".into()));
        }
        let inverse = (mode == Mode::Inverse).then(|| InverseConfig {
            action_decoder_hidden: self
                .action_decoder_hidden
                .clone()
                .unwrap_or_else(|| p.action_decoder_hidden.clone()),
            lambda: self.lambda.unwrap_or(p.lambda),
            action_feedback: self.action_feedback.unwrap_or(true),
        });
        let model = ModelConfig {
            obs_dim,
            action_dim,
            latent_obs_dim: m,
            num_basis,
            bandwidth: self.bandwidth.unwrap_or(p.bandwidth),
            encoder_hidden: self.encoder_hidden.clone().unwrap_or_else(|| p.encoder_hidden.clone()),
            decoder_hidden: self.decoder_hidden.clone().unwrap_or_else(|| p.decoder_hidden.clone()),
            variance_head: self.variance_head.unwrap_or(self.loss == Some(LossKind::Nll)),
            conditioning: if aao {
                Conditioning::ActionsAsObservations
            } else {
                Conditioning::Control(control_kind)
            },
            control_hidden: self.control_hidden.clone().unwrap_or_else(|| p.control_hidden.clone()),
            control_basis: self.control_basis.unwrap_or(num_basis),
            init_var: self.init_var.unwrap_or(10.0),
            inverse,
        };
        model.validate()?;
        let optimizer = match self.optimizer {
            None => p.optimizer,
            Some(OptimizerName::Adam) => OptimizerRule::adam(),
            Some(OptimizerName::Sgd) => OptimizerRule::sgd(self.momentum.unwrap_or(0.9)),
        };
        let optimizer = match (optimizer, self.momentum) {
            (OptimizerRule::SgdMomentum { .. }, Some(momentum)) => OptimizerRule::sgd(momentum),
            (rule, _) => rule,
        };
        let train = TrainConfig {
            epochs: self.epochs.unwrap_or(100),
            batch_size: self.batch_size.unwrap_or(16),
            lr: self.lr.unwrap_or(p.lr),
            optimizer,
            seed: self.seed.unwrap_or(0),
            protocol: self.protocol.unwrap_or(match mode {
                Mode::Forward => Protocol::Random { drop_fraction: 0.75 },
                Mode::Inverse => Protocol::Full,
            }),
            loss: self.loss.unwrap_or_default(),
            clip_norm: self.clip_norm.unwrap_or(5.0),
            record_time: self.record_time.unwrap_or(false),
        };
        if train.loss == LossKind::Nll && !model.variance_head {
            return Err(CoreError::Config("loss `nll` needs variance_head".into()));
        }
        if mode == Mode::Inverse && train.loss == LossKind::Nll {
            return Err(CoreError::Config("the inverse model trains on the RMSE objective".into()));
        }
        train.validate()?;
        let val_fraction = self.val_fraction.unwrap_or(0.2);
        if !(0.0..1.0).contains(&val_fraction) {
            return Err(CoreError::Config(format!("val_fraction must be in [0, 1), got {val_fraction}")));
        }
        Ok(ResolvedConfig {
            mode,
            preset: preset_name,
            data: self.data.clone(),
            model,
            train,
            val_fraction,
        })
    }
}

/// A fully specified run, stored in checkpoints and run manifests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResolvedConfig {
    pub mode: Mode,
    pub preset: String,
    pub data: Option<String>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub val_fraction: f64,
}
