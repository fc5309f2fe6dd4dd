//! Staged training over mixed 2D/3D streams: optimizer, synthetic data,
//! batch construction, checkpoints and the stage loop.

mod batches;
mod checkpoint;
mod optim;
mod stage;
pub mod synthetic;

pub use batches::{mixed_batch_iterator, Batch, MixedBatches};
pub use checkpoint::{digest, encoder_text, load_checkpoint, save_checkpoint, Checkpoint};
pub use optim::{adamw_step, cosine_lr, AdamState, OptimConfig};
pub use stage::{
    evaluate_losses, read_metrics, run_stage, sigreg_seed, Init, Losses, Stage, StageConfig, StageOutputs,
    StageSummary, Start, StepMetrics, TrainData, TrainSetup,
};
pub use synthetic::{gen_synthetic, MemorySource, Sample, SampleSource, SynthConfig, SyntheticSource};
