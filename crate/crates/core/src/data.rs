//! Trajectory containers, normalization, observation masks and batching.

use acrkn_numerics::Tensor;
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// One trajectory. `observations[t]` has `obs_dim` entries and
/// `actions[t]` is the command applied between `t` and `t + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub id: u64,
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub obs_dim: usize,
    pub action_dim: usize,
    pub episodes: Vec<Episode>,
}

impl Dataset {
    pub fn new(obs_dim: usize, action_dim: usize, episodes: Vec<Episode>) -> Result<Self> {
        if obs_dim == 0 || action_dim == 0 {
            return Err(CoreError::Data(format!(
                "observation and action dimensions must be >= 1, got {obs_dim} and {action_dim}"
            )));
        }
        for ep in &episodes {
            if ep.observations.len() != ep.actions.len() {
                return Err(CoreError::Data(format!(
                    "episode {}: {} observations but {} actions",
                    ep.id,
                    ep.observations.len(),
                    ep.actions.len()
                )));
            }
            if ep.len() < 2 {
                return Err(CoreError::Data(format!("episode {} has fewer than 2 steps", ep.id)));
            }
            for (t, (o, a)) in ep.observations.iter().zip(&ep.actions).enumerate() {
                if o.len() != obs_dim || a.len() != action_dim {
                    return Err(CoreError::Data(format!(
                        "episode {} step {t}: expected {obs_dim} observation and {action_dim} action values",
                        ep.id
                    )));
                }
                if o.iter().chain(a).any(|v| !v.is_finite()) {
                    return Err(CoreError::Data(format!("episode {} step {t}: non-finite value", ep.id)));
                }
            }
        }
        Ok(Self {
            obs_dim,
            action_dim,
            episodes,
        })
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    /// The episodes at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            obs_dim: self.obs_dim,
            action_dim: self.action_dim,
            episodes: indices.iter().map(|&i| self.episodes[i].clone()).collect(),
        }
    }

    pub fn select_ids(&self, ids: &[u64]) -> Result<Self> {
        let indices = ids
            .iter()
            .map(|id| {
                self.episodes
                    .iter()
                    .position(|e| e.id == *id)
                    .ok_or_else(|| CoreError::Data(format!("episode {id} not in dataset")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(self.subset(&indices))
    }

    pub fn ids(&self) -> Vec<u64> {
        self.episodes.iter().map(|e| e.id).collect()
    }
}

/// Seeded shuffle of episode indices into `(first, second)` with
/// `second` holding `round(fraction * len)` episodes (at least one when
/// `fraction > 0` and there are two or more episodes).
pub fn split_indices(len: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(CoreError::Config(format!("split fraction must be in [0, 1), got {fraction}")));
    }
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut held = (fraction * len as f64).round() as usize;
    if fraction > 0.0 && len >= 2 {
        held = held.clamp(1, len - 1);
    }
    let second = idx.split_off(len - held);
    let mut first = idx;
    first.sort_unstable();
    let mut second = second;
    second.sort_unstable();
    Ok((first, second))
}

/// Default train:test ratio of 4:1.
pub const TEST_FRACTION: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    fn fit(rows: &[&[f64]], what: &str) -> Result<Self> {
        let dim = rows.first().map_or(0, |r| r.len());
        if rows.is_empty() {
            return Err(CoreError::Data(format!("no {what} rows to fit normalization on")));
        }
        let count = rows.len() as f64;
        let mut mean = vec![0.0; dim];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(*r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; dim];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(*r).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        // Constant channels are only centred.
        let std: Vec<f64> = var
            .iter()
            .map(|s| (s / count).sqrt())
            .map(|s| if s < 1e-12 { 1.0 } else { s })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    pub fn invert(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| v * s + m)
            .collect()
    }
}

/// Per-channel statistics of observations and actions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub observations: ChannelStats,
    pub actions: ChannelStats,
}

impl NormStats {
    /// Fits on exactly the episodes passed in.
    pub fn fit(training: &Dataset) -> Result<Self> {
        let obs: Vec<&[f64]> = training
            .episodes
            .iter()
            .flat_map(|e| e.observations.iter().map(Vec::as_slice))
            .collect();
        let act: Vec<&[f64]> = training
            .episodes
            .iter()
            .flat_map(|e| e.actions.iter().map(Vec::as_slice))
            .collect();
        Ok(Self {
            observations: ChannelStats::fit(&obs, "observation")?,
            actions: ChannelStats::fit(&act, "action")?,
        })
    }

    pub fn apply(&self, data: &Dataset) -> Result<Dataset> {
        self.check(data)?;
        Ok(self.map(data, ChannelStats::apply))
    }

    pub fn invert(&self, data: &Dataset) -> Result<Dataset> {
        self.check(data)?;
        Ok(self.map(data, ChannelStats::invert))
    }

    fn check(&self, data: &Dataset) -> Result<()> {
        if data.obs_dim != self.observations.mean.len() || data.action_dim != self.actions.mean.len() {
            return Err(CoreError::Dimension(format!(
                "normalization fitted for d_o={}, d_a={} but data has d_o={}, d_a={}",
                self.observations.mean.len(),
                self.actions.mean.len(),
                data.obs_dim,
                data.action_dim
            )));
        }
        Ok(())
    }

    fn map(&self, data: &Dataset, f: fn(&ChannelStats, &[f64]) -> Vec<f64>) -> Dataset {
        Dataset {
            obs_dim: data.obs_dim,
            action_dim: data.action_dim,
            episodes: data
                .episodes
                .iter()
                .map(|e| Episode {
                    id: e.id,
                    observations: e.observations.iter().map(|o| f(&self.observations, o)).collect(),
                    actions: e.actions.iter().map(|a| f(&self.actions, a)).collect(),
                })
                .collect(),
        }
    }
}

/// Which observations a model sees during training or evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Protocol {
    /// Every observation is available.
    Full,
    /// The first `observed` steps are available, the rest are not.
    Prefix { observed: usize },
    /// `floor(drop_fraction * T)` interior steps are removed at random.
    Random { drop_fraction: f64 },
}

impl Protocol {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Protocol::Full => Ok(()),
            Protocol::Prefix { observed: 0 } => {
                Err(CoreError::Config("observed prefix must be >= 1".into()))
            }
            Protocol::Random { drop_fraction } if !(0.0..1.0).contains(&drop_fraction) => Err(
                CoreError::Config(format!("drop fraction must be in [0, 1), got {drop_fraction}")),
            ),
            _ => Ok(()),
        }
    }

    pub fn mask(&self, len: usize, rng: &mut impl Rng) -> Result<Vec<bool>> {
        match *self {
            Protocol::Full => Ok(vec![true; len]),
            Protocol::Prefix { observed } => mask_prefix(len, observed),
            Protocol::Random { drop_fraction } => mask_random(len, drop_fraction, rng),
        }
    }
}

/// `true` for `t < observed`.
pub fn mask_prefix(len: usize, observed: usize) -> Result<Vec<bool>> {
    if observed == 0 || observed >= len {
        return Err(CoreError::Config(format!(
            "observed prefix must satisfy 0 < P < T, got P={observed}, T={len}"
        )));
    }
    Ok((0..len).map(|t| t < observed).collect())
}

/// Drops `floor(drop_fraction * len)` distinct steps from `1..len`.
pub fn mask_random(len: usize, drop_fraction: f64, rng: &mut impl Rng) -> Result<Vec<bool>> {
    if !(0.0..1.0).contains(&drop_fraction) {
        return Err(CoreError::Config(format!("drop fraction must be in [0, 1), got {drop_fraction}")));
    }
    if len == 0 {
        return Ok(Vec::new());
    }
    let drop = (drop_fraction * len as f64).floor() as usize;
    let mut mask = vec![true; len];
    for i in sample(rng, len - 1, drop.min(len - 1)) {
        mask[i + 1] = false;
    }
    Ok(mask)
}

/// Time-major batch of equal-length episodes.
///
/// Row `b` of every step belongs to `episode_ids[b]`. Masked observations
/// stay in `observations` because they remain prediction targets; models
/// must read them through [`SequenceBatch::visible_obs`].
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceBatch {
    pub len: usize,
    pub batch: usize,
    pub obs_dim: usize,
    pub action_dim: usize,
    pub episode_ids: Vec<u64>,
    /// `[t][b * obs_dim + i]`.
    pub observations: Vec<Vec<f64>>,
    /// `[t][b * action_dim + j]`.
    pub actions: Vec<Vec<f64>>,
    /// `[t][b]`, `true` = observed.
    pub mask: Vec<Vec<bool>>,
}

impl SequenceBatch {
    /// Builds a fully observed batch; all episodes must share one length.
    pub fn new(data: &Dataset, episodes: &[&Episode]) -> Result<Self> {
        let first = episodes
            .first()
            .ok_or_else(|| CoreError::Data("empty batch".into()))?;
        let len = first.len();
        if let Some(e) = episodes.iter().find(|e| e.len() != len) {
            return Err(CoreError::Data(format!(
                "episode {} has length {} but the batch has length {len}",
                e.id,
                e.len()
            )));
        }
        let batch = episodes.len();
        let observations = (0..len)
            .map(|t| episodes.iter().flat_map(|e| e.observations[t].iter().copied()).collect())
            .collect();
        let actions = (0..len)
            .map(|t| episodes.iter().flat_map(|e| e.actions[t].iter().copied()).collect())
            .collect();
        Ok(Self {
            len,
            batch,
            obs_dim: data.obs_dim,
            action_dim: data.action_dim,
            episode_ids: episodes.iter().map(|e| e.id).collect(),
            observations,
            actions,
            mask: vec![vec![true; batch]; len],
        })
    }

    /// Replaces the mask; `masks[b]` is the per-step mask of row `b`.
    pub fn with_masks(mut self, masks: &[Vec<bool>]) -> Result<Self> {
        if masks.len() != self.batch || masks.iter().any(|m| m.len() != self.len) {
            return Err(CoreError::Dimension(format!(
                "expected {} masks of length {}",
                self.batch, self.len
            )));
        }
        self.mask = (0..self.len)
            .map(|t| masks.iter().map(|m| m[t]).collect())
            .collect();
        Ok(self)
    }

    /// The same mask for every row.
    pub fn with_shared_mask(self, mask: &[bool]) -> Result<Self> {
        let masks = vec![mask.to_vec(); self.batch];
        self.with_masks(&masks)
    }

    /// The first `len` steps.
    pub fn truncate(&self, len: usize) -> Result<Self> {
        if len == 0 || len > self.len {
            return Err(CoreError::Dimension(format!("cannot truncate {} steps to {len}", self.len)));
        }
        let mut out = self.clone();
        out.len = len;
        out.observations.truncate(len);
        out.actions.truncate(len);
        out.mask.truncate(len);
        Ok(out)
    }

    pub fn obs_at(&self, t: usize) -> Result<Tensor> {
        Ok(Tensor::matrix(self.batch, self.obs_dim, self.observations[t].clone())?)
    }

    /// Observations at `t` with masked rows zero-filled.
    pub fn visible_obs(&self, t: usize) -> Result<Tensor> {
        let mut v = self.observations[t].clone();
        for (b, &seen) in self.mask[t].iter().enumerate() {
            if !seen {
                v[b * self.obs_dim..(b + 1) * self.obs_dim].fill(0.0);
            }
        }
        Ok(Tensor::matrix(self.batch, self.obs_dim, v)?)
    }

    pub fn actions_at(&self, t: usize) -> Result<Tensor> {
        Ok(Tensor::matrix(self.batch, self.action_dim, self.actions[t].clone())?)
    }
}

/// Groups episode indices into batches of equal-length episodes. Order
/// within a length bucket follows `order`.
pub fn batch_indices(data: &Dataset, order: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let mut lengths: Vec<usize> = order.iter().map(|&i| data.episodes[i].len()).collect();
    lengths.sort_unstable();
    lengths.dedup();
    let mut out = Vec::new();
    for len in lengths {
        let bucket: Vec<usize> = order
            .iter()
            .copied()
            .filter(|&i| data.episodes[i].len() == len)
            .collect();
        out.extend(bucket.chunks(batch_size.max(1)).map(<[usize]>::to_vec));
    }
    out
}
