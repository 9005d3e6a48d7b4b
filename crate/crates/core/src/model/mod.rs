//! The age-cohort network: layer ledger, parameters, training and checkpoints.

mod arch;
mod checkpoint;
mod gradcheck;
mod graph;
mod train;

pub use arch::{
    layer_shapes, layer_specs, ArchConfig, LayerKind, LayerSpec, LayerSummary, OutputShape, PaddingPolicy,
    CONV_KERNELS, NUM_COHORTS,
};
pub use checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use gradcheck::model_gradcheck;
pub use graph::{mix_seed, Layer, ModelGraph, Tape};
pub use train::{evaluate, fit, predict, EpochRecord, Evaluation, TrainConfig, TrainingHistory};
