//! Named architecture and optimizer presets.
//!
//! The robot presets reproduce published layer tables; `desk` is a small
//! configuration sized for the synthetic systems on a single CPU core.

use acrkn_numerics::OptimizerRule;

use crate::error::{CoreError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Preset {
    pub name: &'static str,
    pub latent_obs_dim: usize,
    pub num_basis: usize,
    pub bandwidth: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub control_hidden: Vec<usize>,
    pub action_decoder_hidden: Vec<usize>,
    pub lr: f64,
    pub optimizer: OptimizerRule,
    pub lambda: f64,
}

pub const PRESET_NAMES: [&str; 6] = ["desk", "pam", "brokk", "panda-fwd", "panda-inv", "wam-inv"];

/// Momentum used with the SGD presets.
const SGD_MOMENTUM: f64 = 0.9;

pub fn preset(name: &str) -> Result<Preset> {
    let p = |latent_obs_dim,
             num_basis,
             encoder: &[usize],
             decoder: &[usize],
             control: &[usize],
             action: &[usize],
             lr,
             optimizer,
             lambda| Preset {
        name: PRESET_NAMES.iter().find(|n| **n == name).copied().unwrap_or("desk"),
        latent_obs_dim,
        num_basis,
        bandwidth: 3,
        encoder_hidden: encoder.to_vec(),
        decoder_hidden: decoder.to_vec(),
        control_hidden: control.to_vec(),
        action_decoder_hidden: action.to_vec(),
        lr,
        optimizer,
        lambda,
    };
    let adam = OptimizerRule::adam();
    let sgd = OptimizerRule::sgd(SGD_MOMENTUM);
    Ok(match name {
        "desk" => p(8, 8, &[32], &[32], &[32, 32, 32], &[64], 5e-3, adam, 0.15),
        "pam" => p(60, 15, &[120], &[120], &[120, 120, 120], &[120], 3.1e-3, adam, 0.15),
        "brokk" => p(30, 32, &[30], &[30], &[120], &[30], 5e-4, adam, 0.15),
        "panda-fwd" => p(45, 15, &[120], &[240], &[30, 30, 30], &[512], 3.1e-3, sgd, 0.158),
        "panda-inv" => p(15, 15, &[120], &[240], &[45], &[512], 7.62e-3, sgd, 0.158),
        "wam-inv" => p(15, 15, &[120], &[240], &[45], &[256, 256], 7.7e-3, sgd, 0.176),
        other => return Err(CoreError::UnknownPreset(other.to_string())),
    })
}
