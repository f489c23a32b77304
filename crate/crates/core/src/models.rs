//! Forward and inverse dynamics models built around the cell.
//!
//! Forward rollout, per step `t`:
//!
//! 1. if `o_t` is observed, encode it and run the Kalman update, otherwise
//!    the posterior is the prior;
//! 2. the prediction memory is `o_t` when observed and `ô_t` otherwise;
//! 3. predict with the control increment `b(a_t)`;
//! 4. decode the prior into `ô_{t+1} = memory_t + dec(z-_{t+1})`.
//!
//! The inverse model additionally decodes `â_t = a_{t-1} + dec(z+_t, o_{t+1})`
//! from the posterior before the executed action enters the predict step.
//!
//! All values live in normalized units.

use acrkn_numerics::{Graph, ParamStore, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cell::{self, BeliefVars, FactorizedBelief, LatentDims, TransitionBank};
use crate::codecs::{ActionDecoder, Encoder, ObsDecoder, VarDecoder};
use crate::control::{ControlKind, ControlModel};
use crate::data::SequenceBatch;
use crate::error::{CoreError, Result};

/// How actions reach the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Conditioning {
    /// Through a control model added in the predict step.
    Control(ControlKind),
    /// Appended to the encoder input together with an observed flag; the
    /// predict step gets no action information.
    ActionsAsObservations,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InverseConfig {
    pub action_decoder_hidden: Vec<usize>,
    pub lambda: f64,
    /// When false the predict step uses `b(0)` instead of `b(a_t)`.
    pub action_feedback: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub obs_dim: usize,
    pub action_dim: usize,
    pub latent_obs_dim: usize,
    pub num_basis: usize,
    pub bandwidth: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub variance_head: bool,
    pub conditioning: Conditioning,
    pub control_hidden: Vec<usize>,
    /// Basis count of the locally-linear control model.
    pub control_basis: usize,
    pub init_var: f64,
    pub inverse: Option<InverseConfig>,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("obs_dim", self.obs_dim),
            ("action_dim", self.action_dim),
            ("latent_obs_dim", self.latent_obs_dim),
            ("num_basis", self.num_basis),
            ("bandwidth", self.bandwidth),
            ("control_basis", self.control_basis),
        ];
        for (name, v) in sizes {
            if v == 0 {
                return Err(CoreError::Config(format!("{name} must be >= 1")));
            }
        }
        let widths = self
            .encoder_hidden
            .iter()
            .chain(&self.decoder_hidden)
            .chain(&self.control_hidden)
            .chain(self.inverse.iter().flat_map(|i| &i.action_decoder_hidden));
        if widths.into_iter().any(|&w| w == 0) {
            return Err(CoreError::Config("hidden layer widths must be >= 1".into()));
        }
        if !(self.init_var > 0.0 && self.init_var.is_finite()) {
            return Err(CoreError::Config(format!("init_var must be positive, got {}", self.init_var)));
        }
        if let Some(inv) = &self.inverse {
            if !(inv.lambda >= 0.0 && inv.lambda.is_finite()) {
                return Err(CoreError::Config(format!("lambda must be >= 0, got {}", inv.lambda)));
            }
            if self.conditioning == Conditioning::ActionsAsObservations {
                return Err(CoreError::Config(
                    "the inverse model needs a control model for action feedback".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn dims(&self) -> Result<LatentDims> {
        LatentDims::new(self.latent_obs_dim)
    }

    fn encoder_input(&self) -> usize {
        match self.conditioning {
            Conditioning::Control(_) => self.obs_dim,
            Conditioning::ActionsAsObservations => self.obs_dim + self.action_dim + 1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ForwardModel {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub transition: TransitionBank,
    pub control: Option<ControlModel>,
    pub obs_decoder: ObsDecoder,
    pub var_decoder: Option<VarDecoder>,
}

#[derive(Clone, Debug)]
pub struct InverseModel {
    pub forward: ForwardModel,
    pub action_decoder: ActionDecoder,
    pub lambda: f64,
    pub action_feedback: bool,
}

/// Parameter name prefixes, one per component.
pub const PARAM_GROUPS: [&str; 6] = [
    "encoder",
    "transition",
    "control",
    "obs_decoder",
    "var_decoder",
    "action_decoder",
];

impl ForwardModel {
    /// Registers all parameters in `store`, drawing initial values from `rng`.
    pub fn new(config: &ModelConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let dims = config.dims()?;
        let n = dims.n();
        let encoder = Encoder::new(
            store,
            "encoder",
            config.encoder_input(),
            &config.encoder_hidden,
            dims.m(),
            rng,
        )?;
        let transition = TransitionBank::new(store, "transition", dims, config.num_basis, config.bandwidth, rng)?;
        let control = match config.conditioning {
            Conditioning::Control(ControlKind::Linear) => {
                Some(ControlModel::linear(store, "control", config.action_dim, n, rng)?)
            }
            Conditioning::Control(ControlKind::LocallyLinear) => Some(ControlModel::locally_linear(
                store,
                "control",
                config.action_dim,
                n,
                config.control_basis,
                rng,
            )?),
            Conditioning::Control(ControlKind::Nonlinear) => Some(ControlModel::nonlinear(
                store,
                "control",
                config.action_dim,
                n,
                &config.control_hidden,
                rng,
            )?),
            Conditioning::ActionsAsObservations => None,
        };
        let obs_decoder = ObsDecoder::new(store, "obs_decoder", n, &config.decoder_hidden, config.obs_dim, rng)?;
        let var_decoder = if config.variance_head {
            Some(VarDecoder::new(store, "var_decoder", n, &config.decoder_hidden, config.obs_dim, rng)?)
        } else {
            None
        };
        Ok(Self {
            config: config.clone(),
            encoder,
            transition,
            control,
            obs_decoder,
            var_decoder,
        })
    }

    fn check_batch(&self, batch: &SequenceBatch) -> Result<()> {
        if batch.obs_dim != self.config.obs_dim || batch.action_dim != self.config.action_dim {
            return Err(CoreError::Dimension(format!(
                "model expects d_o={}, d_a={} but the batch has d_o={}, d_a={}",
                self.config.obs_dim, self.config.action_dim, batch.obs_dim, batch.action_dim
            )));
        }
        if batch.mask.len() != batch.len || batch.mask.iter().any(|m| m.len() != batch.batch) {
            return Err(CoreError::Dimension("mask does not match the batch".into()));
        }
        if batch.len == 0 {
            return Err(CoreError::Data("empty sequence".into()));
        }
        if batch.mask[0].iter().any(|&seen| !seen) {
            return Err(CoreError::Data("the first step of every episode must be observed".into()));
        }
        Ok(())
    }

    pub fn rollout(&self, g: &mut Graph, store: &ParamStore, batch: &SequenceBatch) -> Result<Rollout> {
        rollout(self, None, g, store, batch)
    }
}

impl InverseModel {
    pub fn new(config: &ModelConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        let inv = config
            .inverse
            .clone()
            .ok_or_else(|| CoreError::Config("inverse model needs an inverse section".into()))?;
        let forward = ForwardModel::new(config, store, rng)?;
        let action_decoder = ActionDecoder::new(
            store,
            "action_decoder",
            config.dims()?.n(),
            config.obs_dim,
            &inv.action_decoder_hidden,
            config.action_dim,
            rng,
        )?;
        Ok(Self {
            forward,
            action_decoder,
            lambda: inv.lambda,
            action_feedback: inv.action_feedback,
        })
    }

    pub fn rollout(&self, g: &mut Graph, store: &ParamStore, batch: &SequenceBatch) -> Result<Rollout> {
        rollout(&self.forward, Some(self), g, store, batch)
    }
}

/// Graph handles of one rollout. Index `t` of `priors`, `predictions`
/// and `variances` refers to the prediction for step `t + 1` made at `t`.
#[derive(Clone, Debug)]
pub struct Rollout {
    pub posteriors: Vec<BeliefVars>,
    pub priors: Vec<BeliefVars>,
    pub predictions: Vec<Var>,
    pub memory: Vec<Var>,
    pub variances: Vec<Var>,
    /// `â_t` for `t = 0..T-1` (inverse model only).
    pub actions: Vec<Var>,
    pub psd_clamps: usize,
}

/// Plain values of a [`Rollout`], `[t][batch row]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutTrace {
    pub posteriors: Vec<Vec<FactorizedBelief>>,
    pub priors: Vec<Vec<FactorizedBelief>>,
    pub predictions: Vec<Vec<Vec<f64>>>,
    pub memory: Vec<Vec<Vec<f64>>>,
    pub actions: Vec<Vec<Vec<f64>>>,
    pub mask: Vec<Vec<bool>>,
    pub psd_clamps: usize,
}

fn rows(g: &Graph, v: Var) -> Vec<Vec<f64>> {
    let t = g.value(v);
    (0..t.shape()[0]).map(|i| t.row(i).to_vec()).collect()
}

impl Rollout {
    pub fn trace(&self, g: &Graph, batch: &SequenceBatch) -> RolloutTrace {
        RolloutTrace {
            posteriors: self.posteriors.iter().map(|b| b.values(g)).collect(),
            priors: self.priors.iter().map(|b| b.values(g)).collect(),
            predictions: self.predictions.iter().map(|&v| rows(g, v)).collect(),
            memory: self.memory.iter().map(|&v| rows(g, v)).collect(),
            actions: self.actions.iter().map(|&v| rows(g, v)).collect(),
            mask: batch.mask.clone(),
            psd_clamps: self.psd_clamps,
        }
    }
}

fn rollout(
    fwd: &ForwardModel,
    inverse: Option<&InverseModel>,
    g: &mut Graph,
    store: &ParamStore,
    batch: &SequenceBatch,
) -> Result<Rollout> {
    fwd.check_batch(batch)?;
    let dims = fwd.config.dims()?;
    let (bsz, len) = (batch.batch, batch.len);
    let mut belief = BeliefVars::initial(g, bsz, dims.m(), fwd.config.init_var)?;
    let zero_actions = g.constant(Tensor::zeros(&[bsz, batch.action_dim]));
    let mut out = Rollout {
        posteriors: Vec::with_capacity(len),
        priors: Vec::with_capacity(len),
        predictions: Vec::with_capacity(len),
        memory: Vec::with_capacity(len),
        variances: Vec::new(),
        actions: Vec::new(),
        psd_clamps: 0,
    };
    let mut previous_action = zero_actions;

    for t in 0..len {
        let mask = &batch.mask[t];
        let all_seen = mask.iter().all(|&s| s);
        let any_seen = mask.iter().any(|&s| s);
        let visible = g.constant(batch.visible_obs(t)?);
        let action = g.constant(batch.actions_at(t)?);

        let posterior = match fwd.config.conditioning {
            Conditioning::ActionsAsObservations => {
                let flags = Tensor::matrix(bsz, 1, mask.iter().map(|&s| if s { 1.0 } else { 0.0 }).collect())?;
                let flags = g.constant(flags);
                let input = g.concat(&[visible, action, flags], 1)?;
                let w = fwd.encoder.encode(g, store, input)?;
                cell::update(g, &belief, &w)?
            }
            Conditioning::Control(_) if any_seen => {
                let w = fwd.encoder.encode(g, store, visible)?;
                let updated = cell::update(g, &belief, &w)?;
                if all_seen {
                    updated
                } else {
                    BeliefVars::select(g, mask, &updated, &cell::update_skip(&belief))?
                }
            }
            Conditioning::Control(_) => cell::update_skip(&belief),
        };

        let memory = match out.predictions.last() {
            None => visible,
            Some(_) if all_seen => visible,
            Some(&previous) => g.select_rows(mask, visible, previous)?,
        };

        if let Some(inv) = inverse {
            if t + 1 < len {
                let desired = g.constant(batch.obs_at(t + 1)?);
                let delta = inv.action_decoder.decode(g, store, &posterior, desired)?;
                out.actions.push(g.add(previous_action, delta)?);
                previous_action = action;
            }
        }

        let z = posterior.mean(g)?;
        let increment = match &fwd.control {
            Some(control) => {
                let fed = match inverse {
                    Some(inv) if !inv.action_feedback => zero_actions,
                    _ => action,
                };
                control.increment(g, store, fed, z)?
            }
            None => g.constant(Tensor::zeros(&[bsz, dims.n()])),
        };
        let predicted = cell::predict(g, store, &fwd.transition, &posterior, increment)?;
        out.psd_clamps += predicted.psd_clamps;
        let prior = predicted.belief;

        let delta = fwd.obs_decoder.decode(g, store, &prior)?;
        out.predictions.push(g.add(memory, delta)?);
        if let Some(var) = &fwd.var_decoder {
            out.variances.push(var.decode(g, store, &prior)?);
        }
        out.posteriors.push(posterior);
        out.priors.push(prior);
        out.memory.push(memory);
        belief = prior;
    }
    Ok(out)
}

fn sum_squares(g: &mut Graph, terms: impl IntoIterator<Item = (Var, Var)>) -> Result<Option<Var>> {
    let mut total: Option<Var> = None;
    for (target, estimate) in terms {
        let err = g.sub(target, estimate)?;
        let sq = g.square(err)?;
        let s = g.sum(sq)?;
        total = Some(match total {
            None => s,
            Some(acc) => g.add(acc, s)?,
        });
    }
    Ok(total)
}

/// `sqrt(sum_t ||o_{t+1} - ô_{t+1}||^2 / T)` with `T` the number of
/// (episode, step) pairs that have a next observation.
pub fn loss_forward(g: &mut Graph, rollout: &Rollout, batch: &SequenceBatch) -> Result<Var> {
    let pairs = batch.batch * batch.len.saturating_sub(1);
    if pairs == 0 {
        return Err(CoreError::Data("no prediction targets: sequences need at least 2 steps".into()));
    }
    let mut terms = Vec::with_capacity(batch.len - 1);
    for t in 0..batch.len - 1 {
        terms.push((g.constant(batch.obs_at(t + 1)?), rollout.predictions[t]));
    }
    let total = sum_squares(g, terms)?.expect("at least one term");
    let mean = g.scale(total, 1.0 / pairs as f64)?;
    Ok(g.sqrt(mean)?)
}

/// Mean Gaussian negative log-likelihood over all targets and channels.
pub fn loss_nll(g: &mut Graph, rollout: &Rollout, batch: &SequenceBatch) -> Result<Var> {
    if rollout.variances.is_empty() {
        return Err(CoreError::Config("NLL needs a model with a variance head".into()));
    }
    let count = batch.batch * batch.len.saturating_sub(1) * batch.obs_dim;
    if count == 0 {
        return Err(CoreError::Data("no prediction targets: sequences need at least 2 steps".into()));
    }
    let mut total: Option<Var> = None;
    for t in 0..batch.len - 1 {
        let target = g.constant(batch.obs_at(t + 1)?);
        let s = gaussian_nll_sum(g, target, rollout.predictions[t], rollout.variances[t])?;
        total = Some(match total {
            None => s,
            Some(acc) => g.add(acc, s)?,
        });
    }
    Ok(g.scale(total.expect("at least one term"), 1.0 / count as f64)?)
}

/// `sum 0.5 (ln(2 pi var) + (target - mean)^2 / var)`.
pub fn gaussian_nll_sum(g: &mut Graph, target: Var, mean: Var, var: Var) -> Result<Var> {
    let err = g.sub(target, mean)?;
    let sq = g.square(err)?;
    let ratio = g.div(sq, var)?;
    let scaled = g.scale(var, 2.0 * std::f64::consts::PI)?;
    let log = g.log(scaled)?;
    let both = g.add(log, ratio)?;
    let s = g.sum(both)?;
    Ok(g.scale(s, 0.5)?)
}

/// Action RMSE over `t = 1..T-1` plus `lambda` times [`loss_forward`].
pub fn loss_inverse(g: &mut Graph, rollout: &Rollout, batch: &SequenceBatch, lambda: f64) -> Result<Var> {
    if !(lambda >= 0.0) {
        return Err(CoreError::Config(format!("lambda must be >= 0, got {lambda}")));
    }
    if batch.len < 3 {
        return Err(CoreError::Data("inverse loss needs sequences of at least 3 steps".into()));
    }
    if rollout.actions.len() + 1 != batch.len {
        return Err(CoreError::Data("rollout has no action estimates".into()));
    }
    let pairs = batch.batch * (batch.len - 2);
    let mut terms = Vec::with_capacity(batch.len - 2);
    for t in 1..batch.len - 1 {
        terms.push((g.constant(batch.actions_at(t)?), rollout.actions[t]));
    }
    let total = sum_squares(g, terms)?.expect("at least one term");
    let mean = g.scale(total, 1.0 / pairs as f64)?;
    let action_rmse = g.sqrt(mean)?;
    if lambda == 0.0 {
        return Ok(action_rmse);
    }
    let fwd = loss_forward(g, rollout, batch)?;
    let weighted = g.scale(fwd, lambda)?;
    Ok(g.add(action_rmse, weighted)?)
}

/// Training objective of a forward model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    #[default]
    Rmse,
    Nll,
}

/// Either architecture, for code that handles both.
#[derive(Clone, Debug)]
pub enum Network {
    Forward(ForwardModel),
    Inverse(InverseModel),
}

impl Network {
    pub fn new(config: &ModelConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        Ok(if config.inverse.is_some() {
            Network::Inverse(InverseModel::new(config, store, rng)?)
        } else {
            Network::Forward(ForwardModel::new(config, store, rng)?)
        })
    }

    pub fn forward_model(&self) -> &ForwardModel {
        match self {
            Network::Forward(f) => f,
            Network::Inverse(i) => &i.forward,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.forward_model().config
    }

    pub fn rollout(&self, g: &mut Graph, store: &ParamStore, batch: &SequenceBatch) -> Result<Rollout> {
        match self {
            Network::Forward(f) => f.rollout(g, store, batch),
            Network::Inverse(i) => i.rollout(g, store, batch),
        }
    }

    /// Rolls out and records the training loss.
    pub fn loss(&self, g: &mut Graph, store: &ParamStore, batch: &SequenceBatch, kind: LossKind) -> Result<Var> {
        let r = self.rollout(g, store, batch)?;
        self.objective(g, &r, batch, kind)
    }

    /// The training loss of an existing rollout. The inverse model ignores
    /// `kind`.
    pub fn objective(&self, g: &mut Graph, r: &Rollout, batch: &SequenceBatch, kind: LossKind) -> Result<Var> {
        match (self, kind) {
            (Network::Inverse(i), _) => loss_inverse(g, r, batch, i.lambda),
            (Network::Forward(_), LossKind::Rmse) => loss_forward(g, r, batch),
            (Network::Forward(_), LossKind::Nll) => loss_nll(g, r, batch),
        }
    }
}
