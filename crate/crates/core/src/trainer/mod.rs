//! Training loops, run configuration, checkpoints and pre-generated pairs.

mod checkpoint;
mod config;
mod pairs;
mod train;

pub use checkpoint::{rng_from_blob, rng_to_blob, Checkpoint, ScoreNetState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{
    fnv1a, is_known_key, parse_config_text, parse_override, DmdSettings, EditSettings, EvalSettings, FreezeMode,
    LrSchedule, Mode, RunConfig, SampleMode, SampleSettings, ScalingSettings, ScoreKind, ScoreSettings,
    TrainSettings,
};
pub use pairs::{pregenerate_pairs, PairStore, PAIR_MAGIC};
pub use train::{
    data_scale, pretrain_score, score_checkpoint, score_from_checkpoint, train_ign, train_sign, CollectRows,
    Divergence, MetricsRow, StabilityStats, TrainObserver, TrainOutcome, Trainer, METRICS_HEADER,
};
