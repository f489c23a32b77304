//! Training runs from a resolved configuration, model checkpoints and
//! ablation grids.

use std::path::Path;

use acrkn_numerics::ParamStore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ResolvedConfig;
use crate::data::{Dataset, NormStats};
use crate::error::{CoreError, Result};
use crate::eval::{action_rmse, multistep, EvalOptions};
use crate::models::Network;
use crate::train::{rng_stream, train, EpochMetrics, TrainOutcome, STREAM_INIT};

pub const MODEL_TAG: &str = "acrkn-model";

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelMeta {
    kind: String,
    config: ResolvedConfig,
    norm: NormStats,
    best_epoch: usize,
}

/// A network together with its parameters and normalization.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub config: ResolvedConfig,
    pub network: Network,
    pub store: ParamStore,
    pub norm: NormStats,
    pub best_epoch: usize,
}

impl TrainedModel {
    /// Freshly initialized model for `config`, normalized with `norm`.
    pub fn init(config: &ResolvedConfig, norm: NormStats) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = rng_stream(config.train.seed, STREAM_INIT);
        let network = Network::new(&config.model, &mut store, &mut rng)?;
        Ok(Self {
            config: config.clone(),
            network,
            store,
            norm,
            best_epoch: 0,
        })
    }

    /// Fits normalization on `train_raw`, trains, and keeps the parameters
    /// of the best validation epoch.
    pub fn fit(
        config: &ResolvedConfig,
        train_raw: &Dataset,
        val_raw: Option<&Dataset>,
        on_epoch: impl FnMut(&EpochMetrics),
    ) -> Result<(Self, TrainOutcome)> {
        check_dims(config, train_raw)?;
        let norm = NormStats::fit(train_raw)?;
        let mut model = Self::init(config, norm)?;
        let train_data = model.norm.apply(train_raw)?;
        let val_data = val_raw.map(|v| model.norm.apply(v)).transpose()?;
        let outcome = train(
            &model.network,
            &mut model.store,
            &train_data,
            val_data.as_ref(),
            &config.train,
            on_epoch,
        )?;
        model.store.copy_values_from(&outcome.best)?;
        model.best_epoch = outcome.best_epoch;
        Ok((model, outcome))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let meta = ModelMeta {
            kind: MODEL_TAG.to_string(),
            config: self.config.clone(),
            norm: self.norm.clone(),
            best_epoch: self.best_epoch,
        };
        self.store.save(path, serde_json::to_value(meta)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (loaded, meta) = ParamStore::load(path)?;
        let meta: ModelMeta = serde_json::from_value(meta)
            .map_err(|e| CoreError::Config(format!("checkpoint metadata: {e}")))?;
        if meta.kind != MODEL_TAG {
            return Err(CoreError::Config(format!("not a model checkpoint: `{}`", meta.kind)));
        }
        let mut model = Self::init(&meta.config, meta.norm)?;
        model
            .store
            .copy_values_from(&loaded)
            .map_err(|e| CoreError::Config(format!("checkpoint does not match its configuration: {e}")))?;
        model.best_epoch = meta.best_epoch;
        Ok(model)
    }

    /// Errors unless `data` has the dimensions the model was built for.
    pub fn check_data(&self, data: &Dataset) -> Result<()> {
        check_dims(&self.config, data)
    }
}

fn check_dims(config: &ResolvedConfig, data: &Dataset) -> Result<()> {
    if data.obs_dim != config.model.obs_dim || data.action_dim != config.model.action_dim {
        return Err(CoreError::Dimension(format!(
            "model expects d_o={}, d_a={} but the data has d_o={}, d_a={}",
            config.model.obs_dim, config.model.action_dim, data.obs_dim, data.action_dim
        )));
    }
    Ok(())
}

/// Test-set scores of one trained model.
#[derive(Clone, Debug, PartialEq)]
pub enum Score {
    /// Per-horizon RMSE of the model and of the copy-last baseline.
    Forward {
        rmse: Vec<f64>,
        copy_last: Vec<f64>,
        nll: Option<Vec<f64>>,
    },
    /// Action RMSE.
    Inverse { action_rmse: f64 },
}

pub fn score(model: &TrainedModel, test_raw: &Dataset, opts: &EvalOptions) -> Result<Score> {
    model.check_data(test_raw)?;
    let test = model.norm.apply(test_raw)?;
    match &model.network {
        Network::Forward(f) => {
            let r = multistep(f, &model.store, &test, &model.norm, opts)?;
            Ok(Score::Forward {
                rmse: r.model_rmse,
                copy_last: r.copy_last_rmse,
                nll: r.nll,
            })
        }
        Network::Inverse(i) => Ok(Score::Inverse {
            action_rmse: action_rmse(i, &model.store, &test, &model.norm, opts.batch_size)?,
        }),
    }
}

/// One variant of an ablation grid.
#[derive(Clone, Debug)]
pub struct Variant {
    pub name: String,
    pub config: ResolvedConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VariantResult {
    pub name: String,
    pub seeds: Vec<u64>,
    /// Per-seed scores, in `seeds` order.
    pub scores: Vec<Score>,
}

impl VariantResult {
    /// Median over seeds of the per-horizon RMSE (forward) or of the action
    /// RMSE as a single-element vector (inverse).
    pub fn median(&self) -> Vec<f64> {
        let series: Vec<Vec<f64>> = self
            .scores
            .iter()
            .map(|s| match s {
                Score::Forward { rmse, .. } => rmse.clone(),
                Score::Inverse { action_rmse } => vec![*action_rmse],
            })
            .collect();
        let width = series.iter().map(Vec::len).min().unwrap_or(0);
        (0..width)
            .map(|h| median(&series.iter().map(|s| s[h]).collect::<Vec<_>>()))
            .collect()
    }

    pub fn median_copy_last(&self) -> Option<Vec<f64>> {
        let series: Vec<&Vec<f64>> = self
            .scores
            .iter()
            .filter_map(|s| match s {
                Score::Forward { copy_last, .. } => Some(copy_last),
                Score::Inverse { .. } => None,
            })
            .collect();
        let width = series.iter().map(|v| v.len()).min()?;
        Some(
            (0..width)
                .map(|h| median(&series.iter().map(|s| s[h]).collect::<Vec<_>>()))
                .collect(),
        )
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Trains and scores every (variant, seed) cell. Cells are independent and
/// run on the rayon pool; results come back in grid order.
pub fn run_grid(
    variants: &[Variant],
    seeds: &[u64],
    train_raw: &Dataset,
    val_raw: Option<&Dataset>,
    test_raw: &Dataset,
    opts: &EvalOptions,
) -> Result<Vec<VariantResult>> {
    let cells: Vec<(usize, u64)> = (0..variants.len())
        .flat_map(|v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    let scores: Vec<Score> = cells
        .par_iter()
        .map(|&(v, seed)| {
            let mut config = variants[v].config.clone();
            config.train.seed = seed;
            let (model, _) = TrainedModel::fit(&config, train_raw, val_raw, |_| {})?;
            log::info!("{} seed {seed}: done", variants[v].name);
            score(&model, test_raw, opts)
        })
        .collect::<Result<_>>()?;
    let mut it = scores.into_iter();
    Ok(variants
        .iter()
        .map(|v| VariantResult {
            name: v.name.clone(),
            seeds: seeds.to_vec(),
            scores: it.by_ref().take(seeds.len()).collect(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }
}
