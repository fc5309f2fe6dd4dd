//! Frozen-feature evaluation: center-view embeddings, linear probes, AUROC
//! with bootstrap intervals, the modality-robustness grid and PCA maps.

mod embed;
mod metrics;
mod pca;
mod probe;
mod report;

pub use embed::{embed_source, encode_samples, extract_frozen_embeddings, Embeddings, SampleFeatures};
pub use metrics::{auroc, bootstrap_ci, macro_bootstrap_ci, quantile, rank_counts, RankCounts};
pub use pca::{
    embedding_pca, encode_pgm, patch_pca_map, pca_probe_coefficients, write_pca_maps, Pca, PcaMap,
};
pub use probe::{fit_linear_probe, fit_probe_on, LinearProbe, ProbeConfig, ProbeFilter};
pub use report::{
    evaluate_probe, modality_robustness_report, probe_and_evaluate, EvalReport, Evaluation, LabelResult,
    ReportMeta,
};
