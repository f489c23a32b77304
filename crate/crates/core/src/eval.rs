//! Multi-step prediction and evaluation metrics in physical units.

use acrkn_numerics::{Graph, ParamStore};
use serde::{Deserialize, Serialize};

use crate::data::{batch_indices, Dataset, Episode, NormStats, SequenceBatch};
use crate::error::{CoreError, Result};
use crate::models::{ForwardModel, InverseModel};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalOptions {
    /// Longest horizon `H`; metrics are reported for `h = 1..=H`.
    pub horizon: usize,
    /// First window start `s`; observations `0..=s` are visible.
    pub warmup: usize,
    /// Distance between window starts.
    pub stride: usize,
    pub batch_size: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            horizon: 20,
            warmup: 20,
            stride: 5,
            batch_size: 64,
        }
    }
}

/// Per-horizon errors; index `h - 1` holds horizon `h`.
#[derive(Clone, Debug, PartialEq)]
pub struct HorizonReport {
    pub model_rmse: Vec<f64>,
    pub copy_last_rmse: Vec<f64>,
    pub nll: Option<Vec<f64>>,
    /// Number of (episode, window) pairs averaged.
    pub windows: usize,
}

/// Window starts `s` with `s + horizon <= len - 1`.
fn window_starts(len: usize, opts: &EvalOptions) -> Vec<usize> {
    (opts.warmup..)
        .step_by(opts.stride.max(1))
        .take_while(|s| s + opts.horizon < len)
        .collect()
}

/// Multi-step open-loop prediction on normalized `data`: for every window
/// start `s`, observations after `s` are hidden and `o_{s+h}` is predicted
/// from the actions alone. Errors are reported in physical units.
pub fn multistep(
    model: &ForwardModel,
    store: &ParamStore,
    data: &Dataset,
    norm: &NormStats,
    opts: &EvalOptions,
) -> Result<HorizonReport> {
    if opts.horizon == 0 {
        return Err(CoreError::Config("horizon must be >= 1".into()));
    }
    let h_max = opts.horizon;
    let std = &norm.observations.std;
    let mut sq_model = vec![0.0; h_max];
    let mut sq_copy = vec![0.0; h_max];
    let mut nll = vec![0.0; h_max];
    let mut windows = 0;
    let order: Vec<usize> = (0..data.len()).collect();
    for idx in batch_indices(data, &order, opts.batch_size) {
        let eps: Vec<&Episode> = idx.iter().map(|&i| &data.episodes[i]).collect();
        let full = SequenceBatch::new(data, &eps)?;
        for s in window_starts(full.len, opts) {
            let mask: Vec<bool> = (0..s + h_max).map(|t| t <= s).collect();
            let batch = full.truncate(s + h_max)?.with_shared_mask(&mask)?;
            let mut g = Graph::new();
            let r = model.rollout(&mut g, store, &batch)?;
            for h in 1..=h_max {
                let t = s + h - 1;
                let pred = g.value(r.predictions[t]).data();
                let var = r.variances.get(t).map(|&v| g.value(v).data());
                let target = &full.observations[s + h];
                let last = &full.observations[s];
                for (k, (&y, &p)) in target.iter().zip(pred).enumerate() {
                    let sd = std[k % full.obs_dim];
                    let e = (y - p) * sd;
                    sq_model[h - 1] += e * e;
                    let c = (y - last[k]) * sd;
                    sq_copy[h - 1] += c * c;
                    if let Some(var) = var {
                        let v = var[k] * sd * sd;
                        nll[h - 1] += 0.5 * ((2.0 * std::f64::consts::PI * v).ln() + e * e / v);
                    }
                }
            }
            windows += full.batch;
        }
    }
    if windows == 0 {
        return Err(CoreError::Data(format!(
            "episodes are too short for warmup {} and horizon {}",
            opts.warmup, opts.horizon
        )));
    }
    let count = (windows * data.obs_dim) as f64;
    let rmse = |v: Vec<f64>| v.into_iter().map(|s| (s / count).sqrt()).collect();
    Ok(HorizonReport {
        model_rmse: rmse(sq_model),
        copy_last_rmse: rmse(sq_copy),
        nll: model
            .var_decoder
            .is_some()
            .then(|| nll.into_iter().map(|s| s / count).collect()),
        windows,
    })
}

/// Predicts `o_P .. o_{P+H-1}` from the raw observations `o_0 .. o_{P-1}`
/// and raw actions `a_0, a_1, ...` (at least `P - 1 + H` of them).
pub fn predict_multistep(
    model: &ForwardModel,
    store: &ParamStore,
    norm: &NormStats,
    prefix: &[Vec<f64>],
    actions: &[Vec<f64>],
    horizon: usize,
) -> Result<Vec<Vec<f64>>> {
    if horizon == 0 {
        return Err(CoreError::Config("horizon must be >= 1".into()));
    }
    if prefix.is_empty() {
        return Err(CoreError::Data("prediction needs at least one observation".into()));
    }
    let p = prefix.len();
    let len = p - 1 + horizon;
    if actions.len() < len {
        return Err(CoreError::Data(format!(
            "horizon {horizon} after {p} observations needs {len} actions, got {}",
            actions.len()
        )));
    }
    let (d_o, d_a) = (model.config.obs_dim, model.config.action_dim);
    let mut observations: Vec<Vec<f64>> = prefix.to_vec();
    observations.resize(len, norm.observations.mean.clone());
    let episode = Episode {
        id: 0,
        observations,
        actions: actions[..len].to_vec(),
    };
    let raw = Dataset::new(d_o, d_a, vec![episode]).map_err(|e| CoreError::Dimension(e.to_string()))?;
    let data = norm.apply(&raw)?;
    let mask: Vec<bool> = (0..len).map(|t| t < p).collect();
    let batch = SequenceBatch::new(&data, &[&data.episodes[0]])?.with_shared_mask(&mask)?;
    let mut g = Graph::new();
    let r = model.rollout(&mut g, store, &batch)?;
    Ok((p - 1..len)
        .map(|t| norm.observations.invert(g.value(r.predictions[t]).data()))
        .collect())
}

/// Action RMSE in physical units over `t = 1..T-1` with every observation
/// visible.
pub fn action_rmse(model: &InverseModel, store: &ParamStore, data: &Dataset, norm: &NormStats, batch_size: usize) -> Result<f64> {
    let std = &norm.actions.std;
    let order: Vec<usize> = (0..data.len()).collect();
    let (mut sq, mut count) = (0.0, 0usize);
    for idx in batch_indices(data, &order, batch_size) {
        let eps: Vec<&Episode> = idx.iter().map(|&i| &data.episodes[i]).collect();
        let batch = SequenceBatch::new(data, &eps)?;
        if batch.len < 3 {
            continue;
        }
        let mut g = Graph::new();
        let r = model.rollout(&mut g, store, &batch)?;
        for t in 1..batch.len - 1 {
            let est = g.value(r.actions[t]).data();
            for (k, (&a, &e)) in batch.actions[t].iter().zip(est).enumerate() {
                let d = (a - e) * std[k % batch.action_dim];
                sq += d * d;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(CoreError::Data("episodes need at least 3 steps for action errors".into()));
    }
    Ok((sq / count as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::{ControlKind, ControlModel};
    use crate::models::{Conditioning, ModelConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn config() -> ModelConfig {
        ModelConfig {
            obs_dim: 1,
            action_dim: 1,
            latent_obs_dim: 2,
            num_basis: 2,
            bandwidth: 1,
            encoder_hidden: vec![4],
            decoder_hidden: vec![],
            variance_head: true,
            conditioning: Conditioning::Control(ControlKind::Linear),
            control_hidden: vec![],
            control_basis: 2,
            init_var: 1.0,
            inverse: None,
        }
    }

    fn random_data(episodes: usize, len: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Dataset::new(
            1,
            1,
            (0..episodes)
                .map(|id| Episode {
                    id: id as u64,
                    observations: (0..len).map(|_| vec![rng.gen_range(-1.0..1.0)]).collect(),
                    actions: (0..len).map(|_| vec![rng.gen_range(-1.0..1.0)]).collect(),
                })
                .collect(),
        )
        .unwrap()
    }

    /// Zero decoder and zero control: predictions copy the last visible
    /// observation.
    fn copy_model(store: &mut ParamStore) -> ForwardModel {
        let m = ForwardModel::new(&config(), store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let Some(ControlModel::Linear { matrix, .. }) = &m.control else { unreachable!() };
        for id in [*matrix, m.obs_decoder.net.output.weight, m.obs_decoder.net.output.bias] {
            let n = store.value(id).len();
            store.value_mut(id).assign(&vec![0.0; n]).unwrap();
        }
        m
    }

    #[test]
    fn copy_model_matches_copy_baseline() {
        let mut store = ParamStore::new();
        let m = copy_model(&mut store);
        let data = random_data(3, 40, 1);
        let norm = NormStats::fit(&data).unwrap();
        let opts = EvalOptions {
            horizon: 5,
            warmup: 10,
            stride: 5,
            batch_size: 2,
        };
        let r = multistep(&m, &store, &norm.apply(&data).unwrap(), &norm, &opts).unwrap();
        assert_eq!(r.windows, 3 * 5);
        for h in 0..5 {
            assert!((r.model_rmse[h] - r.copy_last_rmse[h]).abs() < 1e-12);
        }
        assert!(r.nll.unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn constant_data_gives_zero_copy_error() {
        let mut store = ParamStore::new();
        let m = copy_model(&mut store);
        let mut data = random_data(2, 30, 2);
        for ep in &mut data.episodes {
            for o in &mut ep.observations {
                o[0] = 0.5;
            }
        }
        let norm = NormStats::fit(&data).unwrap();
        let opts = EvalOptions {
            horizon: 3,
            warmup: 5,
            stride: 4,
            batch_size: 8,
        };
        let r = multistep(&m, &store, &norm.apply(&data).unwrap(), &norm, &opts).unwrap();
        assert!(r.copy_last_rmse.iter().all(|&v| v == 0.0));
        assert!(r.model_rmse.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_step_matches_the_rollout() {
        let mut store = ParamStore::new();
        let mut cfg = config();
        cfg.conditioning = Conditioning::Control(ControlKind::Nonlinear);
        cfg.control_hidden = vec![3];
        let m = ForwardModel::new(&cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let data = random_data(1, 12, 4);
        let norm = NormStats::fit(&data).unwrap();
        let ep = &data.episodes[0];
        let one = predict_multistep(&m, &store, &norm, &ep.observations[..6], &ep.actions, 1).unwrap();

        let nd = norm.apply(&data).unwrap();
        let batch = SequenceBatch::new(&nd, &[&nd.episodes[0]]).unwrap();
        let mut g = Graph::new();
        let r = m.rollout(&mut g, &store, &batch).unwrap();
        let expected = norm.observations.invert(g.value(r.predictions[5]).data());
        assert!((one[0][0] - expected[0]).abs() < 1e-12);

        let three = predict_multistep(&m, &store, &norm, &ep.observations[..6], &ep.actions, 3).unwrap();
        assert_eq!(three.len(), 3);
        assert!((three[0][0] - one[0][0]).abs() < 1e-12);
        assert!(predict_multistep(&m, &store, &norm, &ep.observations[..6], &ep.actions[..7], 3).is_err());
    }

    #[test]
    fn short_episodes_are_reported() {
        let mut store = ParamStore::new();
        let m = copy_model(&mut store);
        let data = random_data(2, 10, 6);
        let norm = NormStats::fit(&data).unwrap();
        assert!(multistep(&m, &store, &norm.apply(&data).unwrap(), &norm, &EvalOptions::default()).is_err());
    }
}
