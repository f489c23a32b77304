//! Action-conditional recurrent Kalman networks: a factorized Kalman cell
//! with locally linear, action-conditioned latent dynamics, forward and
//! inverse dynamics models trained by backpropagation through time, and the
//! synthetic systems, data handling and evaluation around them.

pub mod cell;
pub mod codecs;
pub mod config;
pub mod control;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod io;
pub mod models;
pub mod nn;
pub mod presets;
pub mod synth;
pub mod train;

pub use cell::{FactorizedBelief, KalmanGain, LatentDims, LatentObservation, TransitionBank};
pub use config::{Mode, ResolvedConfig, RunConfig};
pub use control::{ControlKind, ControlModel};
pub use data::{Dataset, Episode, NormStats, Protocol, SequenceBatch};
pub use error::{CoreError, Result};
pub use eval::{EvalOptions, HorizonReport};
pub use experiment::{Score, TrainedModel, Variant, VariantResult};
pub use models::{Conditioning, ForwardModel, InverseModel, LossKind, ModelConfig, Network};
pub use synth::{SyntheticSystem, SystemKind};
pub use train::{EpochMetrics, TrainConfig, TrainOutcome};
