//! Minibatch BPTT training over full sequences.

use std::time::Instant;

use acrkn_numerics::{Graph, NumericsError, Optimizer, OptimizerRule, ParamStore};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{batch_indices, Dataset, Protocol, SequenceBatch};
use crate::error::{CoreError, Result};
use crate::models::{LossKind, Network};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerRule,
    pub seed: u64,
    pub protocol: Protocol,
    pub loss: LossKind,
    pub clip_norm: f64,
    /// Record wall-clock time per epoch. Off by default so that metric logs
    /// of identical runs are byte-identical.
    pub record_time: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(CoreError::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(CoreError::Config(format!("lr must be >= 0, got {}", self.lr)));
        }
        if !(self.clip_norm > 0.0) {
            return Err(CoreError::Config(format!("clip_norm must be positive, got {}", self.clip_norm)));
        }
        self.protocol.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    /// `NaN` when there is no validation data.
    pub val_loss: f64,
    pub wall_ms: u64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub metrics: Vec<EpochMetrics>,
    /// Parameters of the epoch with the lowest validation loss (training
    /// loss when there is no validation data).
    pub best: ParamStore,
    pub best_epoch: usize,
    pub psd_clamps: usize,
}

/// Independent random streams derived from one seed.
pub const STREAM_INIT: u64 = 0;
pub const STREAM_TRAIN: u64 = 1;
pub const STREAM_EVAL: u64 = 2;

pub fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Masks for every episode of `data`, drawn in episode order.
pub fn draw_masks(data: &Dataset, protocol: &Protocol, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<bool>>> {
    data.episodes.iter().map(|e| protocol.mask(e.len(), rng)).collect()
}

fn make_batch(data: &Dataset, indices: &[usize], masks: &[Vec<bool>]) -> Result<SequenceBatch> {
    let eps: Vec<_> = indices.iter().map(|&i| &data.episodes[i]).collect();
    let m: Vec<Vec<bool>> = indices.iter().map(|&i| masks[i].clone()).collect();
    SequenceBatch::new(data, &eps)?.with_masks(&m)
}

/// Episode-weighted mean loss over `data` without updating parameters.
pub fn mean_loss(
    net: &Network,
    store: &ParamStore,
    data: &Dataset,
    masks: &[Vec<bool>],
    kind: LossKind,
    batch_size: usize,
) -> Result<f64> {
    let order: Vec<usize> = (0..data.len()).collect();
    let mut total = 0.0;
    for idx in batch_indices(data, &order, batch_size) {
        let batch = make_batch(data, &idx, masks)?;
        let mut g = Graph::new();
        let loss = net.loss(&mut g, store, &batch, kind)?;
        total += g.value(loss).data()[0] * idx.len() as f64;
    }
    Ok(total / data.len() as f64)
}

fn diverged(epoch: usize, batch: usize, e: CoreError) -> CoreError {
    match e {
        CoreError::Numerics(NumericsError::NonFinite { .. } | NumericsError::NonFiniteGradient { .. })
        | CoreError::Numerics(NumericsError::ZeroDivisor { .. })
        | CoreError::CorruptBelief(_) => CoreError::Diverged {
            epoch,
            batch,
            detail: e.to_string(),
        },
        other => other,
    }
}

/// Trains `net` in place on normalized data. `on_epoch` sees each metrics
/// row as soon as it is available.
pub fn train(
    net: &Network,
    store: &mut ParamStore,
    train: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(CoreError::Data("training set is empty".into()));
    }
    let val = val.filter(|v| !v.is_empty());
    let mut rng = rng_stream(cfg.seed, STREAM_TRAIN);
    let val_masks = match val {
        Some(v) => draw_masks(v, &cfg.protocol, &mut rng_stream(cfg.seed, STREAM_EVAL))?,
        None => Vec::new(),
    };
    let mut optimizer = Optimizer::new(cfg.optimizer, cfg.lr)?;
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut best = store.clone();
    let mut best_score = f64::INFINITY;
    let mut best_epoch = 0;
    let mut psd_clamps = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let masks = draw_masks(train, &cfg.protocol, &mut rng)?;
        let mut total = 0.0;
        for (b, idx) in batch_indices(train, &order, cfg.batch_size).into_iter().enumerate() {
            let batch = make_batch(train, &idx, &masks)?;
            let mut g = Graph::new();
            let r = net.rollout(&mut g, store, &batch).map_err(|e| diverged(epoch, b, e))?;
            psd_clamps += r.psd_clamps;
            let loss = net
                .objective(&mut g, &r, &batch, cfg.loss)
                .map_err(|e| diverged(epoch, b, e))?;
            total += g.value(loss).data()[0] * idx.len() as f64;
            g.backward(loss, store).map_err(|e| diverged(epoch, b, e.into()))?;
            store.clip_grad_norm(cfg.clip_norm);
            optimizer.step(store).map_err(|e| diverged(epoch, b, e.into()))?;
        }
        let train_loss = total / train.len() as f64;
        let val_loss = match val {
            Some(v) => mean_loss(net, store, v, &val_masks, cfg.loss, cfg.batch_size)
                .map_err(|e| diverged(epoch, 0, e))?,
            None => f64::NAN,
        };
        let score = if val.is_some() { val_loss } else { train_loss };
        if score < best_score {
            best_score = score;
            best_epoch = epoch;
            best.copy_values_from(store)?;
        }
        let row = EpochMetrics {
            epoch,
            train_loss,
            val_loss,
            wall_ms: if cfg.record_time { start.elapsed().as_millis() as u64 } else { 0 },
        };
        log::info!("epoch {epoch}: train {train_loss:.6} val {val_loss:.6}");
        on_epoch(&row);
        metrics.push(row);
    }
    Ok(TrainOutcome {
        metrics,
        best,
        best_epoch,
        psd_clamps,
    })
}

/// Writes the metrics log as CSV.
pub fn write_metrics(path: impl AsRef<std::path::Path>, metrics: &[EpochMetrics]) -> Result<()> {
    let mut text = String::from("epoch,train_loss,val_loss,wall_ms\n");
    for m in metrics {
        text.push_str(&format!("{},{},{},{}\n", m.epoch, m.train_loss, m.val_loss, m.wall_ms));
    }
    std::fs::write(path, text)?;
    Ok(())
}
