//! Encoder and decoder networks around the cell.

use acrkn_numerics::{Graph, ParamStore, Tensor, Var};
use rand::Rng;

use crate::cell::{BeliefVars, ObservationVars};
use crate::error::{CoreError, Result};
use crate::nn::{relu_stack, Dense, Mlp};

/// Observation to latent features `w` and variances `elu(.) + 1`.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub hidden: Vec<Dense>,
    pub mean_head: Dense,
    pub var_head: Dense,
}

impl Encoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: &[usize],
        latent_obs_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(hidden.len());
        let mut width = in_dim;
        for (i, &h) in hidden.iter().enumerate() {
            layers.push(Dense::new(store, &format!("{name}.hidden{i}"), width, h, rng)?);
            width = h;
        }
        Ok(Self {
            hidden: layers,
            mean_head: Dense::new(store, &format!("{name}.mean"), width, latent_obs_dim, rng)?,
            var_head: Dense::new(store, &format!("{name}.var"), width, latent_obs_dim, rng)?,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.hidden.first().unwrap_or(&self.mean_head).in_dim
    }

    pub fn latent_obs_dim(&self) -> usize {
        self.mean_head.out_dim
    }

    /// `x` is `[batch, in_dim]`.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<ObservationVars> {
        let h = relu_stack(g, store, &self.hidden, x)?;
        let features = self.mean_head.forward(g, store, h)?;
        let raw = self.var_head.forward(g, store, h)?;
        Ok(ObservationVars {
            features,
            variance: g.elu_plus_one(raw)?,
        })
    }

    pub fn encode_value(&self, store: &ParamStore, o: &[f64]) -> Result<crate::cell::LatentObservation> {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(1, o.len(), o.to_vec())?);
        let obs = self.encode(&mut g, store, x)?;
        Ok(crate::cell::LatentObservation {
            features: g.value(obs.features).data().to_vec(),
            variance: g.value(obs.variance).data().to_vec(),
        })
    }
}

/// Prior mean `[batch, n]` to a normalized observation delta.
#[derive(Clone, Debug)]
pub struct ObsDecoder {
    pub net: Mlp,
}

impl ObsDecoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        state_dim: usize,
        hidden: &[usize],
        obs_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            net: Mlp::new(store, name, state_dim, hidden, obs_dim, rng)?,
        })
    }

    pub fn decode(&self, g: &mut Graph, store: &ParamStore, prior: &BeliefVars) -> Result<Var> {
        let z = prior.mean(g)?;
        self.net.forward(g, store, z)
    }
}

/// Belief variances `(upper_var, lower_var)` to a positive predictive
/// variance per observation channel.
#[derive(Clone, Debug)]
pub struct VarDecoder {
    pub net: Mlp,
}

impl VarDecoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        state_dim: usize,
        hidden: &[usize],
        obs_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            net: Mlp::new(store, name, state_dim, hidden, obs_dim, rng)?,
        })
    }

    pub fn decode(&self, g: &mut Graph, store: &ParamStore, belief: &BeliefVars) -> Result<Var> {
        let x = g.concat(&[belief.upper_var, belief.lower_var], 1)?;
        let raw = self.net.forward(g, store, x)?;
        Ok(g.elu_plus_one(raw)?)
    }
}

/// Posterior mean and desired next observation to an action delta.
#[derive(Clone, Debug)]
pub struct ActionDecoder {
    pub net: Mlp,
    obs_dim: usize,
}

impl ActionDecoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        state_dim: usize,
        obs_dim: usize,
        hidden: &[usize],
        action_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if action_dim == 0 {
            return Err(CoreError::Config("action decoder needs d_a >= 1".into()));
        }
        Ok(Self {
            net: Mlp::new(store, name, state_dim + obs_dim, hidden, action_dim, rng)?,
            obs_dim,
        })
    }

    pub fn action_dim(&self) -> usize {
        self.net.out_dim()
    }

    /// `desired` is the normalized next observation `[batch, d_o]`.
    pub fn decode(&self, g: &mut Graph, store: &ParamStore, posterior: &BeliefVars, desired: Var) -> Result<Var> {
        if g.shape(desired).get(1) != Some(&self.obs_dim) {
            return Err(CoreError::Dimension(format!(
                "action decoder expects desired observations [batch, {}], got {:?}",
                self.obs_dim,
                g.shape(desired)
            )));
        }
        let z = posterior.mean(g)?;
        let x = g.concat(&[z, desired], 1)?;
        self.net.forward(g, store, x)
    }
}
