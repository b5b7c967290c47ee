//! Encoder pretraining, episodic meta-training of the metric, per-episode
//! test protocol, evaluation reports and checkpoints.

mod checkpoint;
mod config;
mod eval;
mod model;
mod pretrain;
mod train;
mod variant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{checkpoint_load, checkpoint_save, decode, encode, MAGIC, VERSION};
pub use config::{
    EngineConfig, MetricSettings, PretrainConfig, BENCHMARK_HOLDOUT_CLASSES, DEFAULT_EVAL_EPISODES,
    DEFAULT_META_EPISODES,
};
pub use eval::{evaluate, format_cell, mean_ci95, EvalReport, CSV_HEADER};
pub use model::{Metric, Model};
pub use pretrain::{fomaml, pretrain_encoders};
pub use train::{init_metric, meta_train, train_model};
pub use variant::{ModelVariant, Predictor, PretrainMode, VariantTag};

pub(crate) fn substream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}
