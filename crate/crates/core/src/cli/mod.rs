//! Configuration, on-disk dataset format and the command implementations
//! behind the `mmv` binary.

pub mod commands;
pub mod config;
pub mod dataset;

pub use commands::{
    bench_lengths, cmd_bench_pack, BENCH_TOLERANCE, cmd_eval, cmd_gen_data, cmd_pca_map, cmd_train, BenchArgs, BenchReport, EvalArgs,
    GenDataArgs, PcaMapArgs, TrainArgs,
};
pub use config::{DataConfig, EvalConfig, RunConfig, SEED_ENV};
pub use dataset::{
    decode_raw, dir_splits, encode_raw, synthetic_splits, write_dataset, DataSplits, Manifest, ManifestRow, Split,
};
