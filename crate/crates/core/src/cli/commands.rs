use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand_distr::{Distribution, StandardNormal};

use crate::atomic::write_atomic;
use crate::error::{Error, Result};
use crate::eval::{
    embed_source, embedding_pca, encode_samples, modality_robustness_report, patch_pca_map, probe_and_evaluate,
    write_pca_maps, EvalReport, Embeddings, ProbeConfig, ProbeFilter, ReportMeta,
};
use crate::packing::{packed_attention, padded_attention, padding_overhead};
use crate::rng;
use crate::substrate::Tensor;
use crate::tokenizer::Modality;
use crate::training::{
    load_checkpoint, run_stage, Checkpoint, Sample, Stage, StageOutputs, StageSummary, Start, TrainData,
};

use super::config::RunConfig;
use super::dataset::{
    decode_raw, dir_splits, parse_sample_name, read_manifest, synthetic_splits, write_dataset, DataSplits, Manifest,
    Split, MANIFEST,
};

/// The dataset directory's splits, or the config's synthetic dataset.
pub fn open_data(dir: Option<&Path>, cfg: &RunConfig) -> Result<DataSplits> {
    match dir {
        Some(d) => dir_splits(d),
        None => Ok(synthetic_splits(&cfg.data)),
    }
}

#[derive(Clone, Debug)]
pub struct GenDataArgs {
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub n_2d: Option<usize>,
    pub n_3d: Option<usize>,
    pub force: bool,
}

/// Writes a synthetic dataset (MMV-RAW files and `manifest.tsv`).
///
/// An existing non-empty directory is rejected unless `force` is set, in
/// which case its previous sample files and manifest are removed first.
pub fn cmd_gen_data(cfg: &RunConfig, args: &GenDataArgs) -> Result<Manifest> {
    let mut data = cfg.data.clone();
    if let Some(s) = args.seed {
        data.seed = s;
    }
    data.n_2d = args.n_2d.unwrap_or(data.n_2d);
    data.n_3d = args.n_3d.unwrap_or(data.n_3d);
    data.validate()?;
    if args.out.exists() {
        let entries: Vec<_> = fs::read_dir(&args.out)?.collect::<std::io::Result<_>>()?;
        if !entries.is_empty() {
            if !args.force {
                return Err(Error::invalid(format!(
                    "{} exists and is not empty (use --force to overwrite)",
                    args.out.display()
                )));
            }
            for e in entries {
                let name = e.file_name();
                let name = name.to_string_lossy();
                if name.ends_with(".mmv") || name == MANIFEST {
                    fs::remove_file(e.path())?;
                }
            }
        }
    }
    write_dataset(&args.out, &data)
}

#[derive(Clone, Debug)]
pub struct TrainArgs {
    pub stage: Stage,
    pub data: Option<PathBuf>,
    pub out: PathBuf,
    pub init_from: Option<PathBuf>,
    pub resume: bool,
}

impl TrainArgs {
    pub fn outputs(&self) -> StageOutputs {
        StageOutputs {
            checkpoint: self.out.join(format!("{}.ckpt", self.stage.name())),
            metrics: self.out.join(format!("{}.metrics.log", self.stage.name())),
        }
    }
}

/// Runs one stage, writing `<out>/<stage>.ckpt` and `<out>/<stage>.metrics.log`.
pub fn cmd_train(cfg: &RunConfig, args: &TrainArgs) -> Result<StageSummary> {
    let cfg = cfg.with_stage(args.stage);
    cfg.validate()?;
    let setup = cfg.train_setup();
    let splits = open_data(args.data.as_deref(), &cfg)?;
    let data = TrainData {
        d2: splits.train_2d.clone().filter(|_| cfg.stage.batch_2d > 0),
        d3: splits.train_3d.clone().filter(|_| cfg.stage.batch_3d > 0),
    };
    let outputs = args.outputs();
    let start = if args.resume {
        if args.init_from.is_some() {
            return Err(Error::Config("--resume and --init-from are exclusive".into()));
        }
        Start::Resume(load_checkpoint(&outputs.checkpoint)?)
    } else {
        match (args.stage, &args.init_from) {
            (Stage::Stage2, Some(p)) => {
                let ckpt = load_checkpoint(p)?;
                ckpt.expect_encoder(&cfg.encoder)?;
                Start::Init(ckpt.params)
            }
            (Stage::Stage2, None) => {
                return Err(Error::Config("stage2 requires --init-from <stage1 checkpoint>".into()));
            }
            (_, Some(_)) => {
                return Err(Error::Config(format!("{} trains from random init; drop --init-from", args.stage)));
            }
            (_, None) => Start::Random,
        }
    };
    run_stage(&setup, &data, start, Some(&outputs))
}

#[derive(Clone, Debug)]
pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub data: Option<PathBuf>,
    pub probe: ProbeFilter,
    pub robustness: bool,
    pub out: Option<PathBuf>,
}

fn all_indices(n: usize) -> Vec<usize> {
    (0..n).collect()
}

/// Frozen embeddings of every sample in one split, both modalities.
pub fn embed_split(ckpt: &Checkpoint, cfg: &RunConfig, splits: &DataSplits, split: Split) -> Result<Embeddings> {
    let mut out = Embeddings::default();
    for m in [Modality::Xray2d, Modality::Ct3d] {
        if let Some(src) = splits.source(m, split) {
            out.extend(embed_source(&ckpt.params, &cfg.encoder, &cfg.views, src.as_ref(), &all_indices(src.len()))?);
        }
    }
    Ok(out)
}

/// Linear-probe evaluation of a checkpoint's frozen features.
///
/// Without `robustness`, one probe (trained on `probe`-filtered train data)
/// is evaluated on each test modality; with it, the full 3 x 2 grid.
pub fn cmd_eval(cfg: &RunConfig, args: &EvalArgs) -> Result<EvalReport> {
    cfg.validate()?;
    let ckpt = load_checkpoint(&args.checkpoint)?;
    ckpt.expect_encoder(&cfg.encoder)?;
    let splits = open_data(args.data.as_deref(), cfg)?;
    let train = embed_split(&ckpt, cfg, &splits, Split::Train)?;
    let test = embed_split(&ckpt, cfg, &splits, Split::Test)?;
    let probe = ProbeConfig {
        filter: args.probe,
        ..cfg.eval.probe.clone()
    };
    let evaluations = if args.robustness {
        modality_robustness_report(&train, &test, &probe, cfg.eval.n_boot)?
    } else {
        probe_and_evaluate(&train, &test, &probe, cfg.eval.n_boot)?
    };
    let stage = RunConfig::from_toml(&ckpt.config)
        .map(|c| c.stage.stage.name().to_string())
        .unwrap_or_else(|_| "unknown".into());
    let report = EvalReport {
        metadata: ReportMeta {
            stage,
            checkpoint_step: ckpt.step,
            dataset: splits.name.clone(),
            seed: cfg.seed,
            probe_seed: probe.seed,
            probe_epochs: probe.epochs,
            probe_lr: probe.lr,
            probe_l2: probe.l2,
            n_boot: cfg.eval.n_boot,
            config: cfg.resolved(),
        },
        evaluations,
    };
    if let Some(out) = &args.out {
        write_atomic(out, report.to_toml().as_bytes())?;
    }
    Ok(report)
}

#[derive(Clone, Debug)]
pub struct BenchArgs {
    /// Dataset directory whose training split supplies the batch; the
    /// config's synthetic mix when `None`.
    pub lengths_from: Option<PathBuf>,
    pub repeats: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub segments: usize,
    pub tokens: usize,
    pub max_len: usize,
    pub padding_overhead: f64,
    pub packed_score_entries: usize,
    pub padded_score_entries: usize,
    pub max_abs_diff: f64,
    pub packed_secs: f64,
    pub padded_secs: f64,
}

impl fmt::Display for BenchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "segments={}", self.segments)?;
        writeln!(f, "tokens={}", self.tokens)?;
        writeln!(f, "max_len={}", self.max_len)?;
        writeln!(f, "padding_overhead={:.4}", self.padding_overhead)?;
        writeln!(f, "packed_score_entries={}", self.packed_score_entries)?;
        writeln!(f, "padded_score_entries={}", self.padded_score_entries)?;
        writeln!(f, "outputs_verified=true max_abs_diff={:e}", self.max_abs_diff)?;
        writeln!(f, "packed_secs={:.4}", self.packed_secs)?;
        writeln!(f, "padded_secs={:.4}", self.padded_secs)?;
        writeln!(f, "speedup={:.3}", self.padded_secs / self.packed_secs.max(1e-12))
    }
}

/// Tolerance for the packed-vs-padded equality check.
pub const BENCH_TOLERANCE: f64 = 1e-5;

/// Packed versus pad-to-max attention on the lengths of the default
/// mixed-view batch (step 0 of the configured stage mix).
///
/// The two paths are checked elementwise before anything is timed; a
/// mismatch is an error.
pub fn cmd_bench_pack(cfg: &RunConfig, args: &BenchArgs) -> Result<BenchReport> {
    cfg.validate()?;
    let splits = open_data(args.lengths_from.as_deref(), cfg)?;
    let setup = cfg.train_setup();
    let data = TrainData {
        d2: splits.train_2d.clone().filter(|_| cfg.stage.batch_2d > 0),
        d3: splits.train_3d.clone().filter(|_| cfg.stage.batch_3d > 0),
    };
    let batch = setup.batches(&data)?.batch_at(0)?;
    let lengths = batch.packed.lengths();
    let bench = bench_lengths(&lengths, cfg.encoder.heads, cfg.encoder.head_dim(), cfg.seed, args.repeats)?;
    Ok(bench)
}

/// Benchmarks attention over random `q, k, v` with the given segment
/// lengths.
pub fn bench_lengths(lengths: &[usize], heads: usize, head_dim: usize, seed: u64, repeats: usize) -> Result<BenchReport> {
    let ratio = padding_overhead(lengths)?;
    let t: usize = lengths.iter().sum();
    let mut r = rng::stream(seed, &[rng::tag::BENCH]);
    let mut rand = || -> Result<Tensor> {
        let data = (0..t * heads * head_dim).map(|_| StandardNormal.sample(&mut r)).collect();
        Tensor::new(vec![t, heads, head_dim], data)
    };
    let (q, k, v) = (rand()?, rand()?, rand()?);
    let mut bounds = vec![0];
    for &l in lengths {
        bounds.push(bounds.last().expect("non-empty") + l);
    }
    let packed = packed_attention(&q, &k, &v, &bounds)?;
    let (padded, padded_entries) = padded_attention(&q, &k, &v, &bounds)?;
    let max_abs_diff = packed
        .data()
        .iter()
        .zip(padded.data())
        .map(|(a, b)| (a - b).abs() as f64)
        .fold(0.0, f64::max);
    if max_abs_diff > BENCH_TOLERANCE {
        return Err(Error::NonFinite(format!(
            "packed and padded attention disagree (max |diff| = {max_abs_diff:e})"
        )));
    }
    let time = |f: &dyn Fn() -> Result<()>| -> Result<f64> {
        let mut best = f64::INFINITY;
        for _ in 0..repeats.max(1) {
            let s = Instant::now();
            f()?;
            best = best.min(s.elapsed().as_secs_f64());
        }
        Ok(best)
    };
    let packed_secs = time(&|| packed_attention(&q, &k, &v, &bounds).map(drop))?;
    let padded_secs = time(&|| padded_attention(&q, &k, &v, &bounds).map(drop))?;
    Ok(BenchReport {
        segments: lengths.len(),
        tokens: t,
        max_len: lengths.iter().copied().max().unwrap_or(0),
        padding_overhead: ratio,
        packed_score_entries: heads * lengths.iter().map(|l| l * l).sum::<usize>(),
        padded_score_entries: padded_entries,
        max_abs_diff,
        packed_secs,
        padded_secs,
    })
}

#[derive(Clone, Debug)]
pub struct PcaMapArgs {
    pub checkpoint: PathBuf,
    pub data: Option<PathBuf>,
    pub sample_id: String,
    pub out: PathBuf,
    /// Output pixels per patch along each axis.
    pub scale: usize,
}

/// Loads sample `id` (`x######` or `c######`) from a dataset directory, or
/// generates it from the config's synthetic settings.
pub fn load_sample(dir: Option<&Path>, cfg: &RunConfig, id: &str) -> Result<Sample> {
    let (m, index) = parse_sample_name(id)?;
    match dir {
        Some(d) => {
            let manifest = read_manifest(d)?;
            let row = manifest
                .rows
                .iter()
                .find(|r| r.id == id)
                .ok_or_else(|| Error::invalid(format!("sample {id} is not in {}", d.display())))?;
            decode_raw(&fs::read(d.join(&row.file))?, index as u64)
        }
        None => {
            let n = if m.is_2d() { cfg.data.n_2d } else { cfg.data.n_3d };
            if index >= n {
                return Err(Error::invalid(format!("sample {id} is beyond the configured {n} samples")));
            }
            crate::training::synthetic::generate_one(&cfg.data.synth, cfg.data.seed, m, index)
        }
    }
}

/// Writes top-3 patch PCA maps of one sample, with components fitted on the
/// pooled token features of the first `eval.pca_reference` training
/// samples of each modality.
pub fn cmd_pca_map(cfg: &RunConfig, args: &PcaMapArgs) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let ckpt = load_checkpoint(&args.checkpoint)?;
    ckpt.expect_encoder(&cfg.encoder)?;
    let splits = open_data(args.data.as_deref(), cfg)?;
    let mut reference = Vec::new();
    for m in [Modality::Xray2d, Modality::Ct3d] {
        if let Some(src) = splits.source(m, Split::Train) {
            for i in 0..cfg.eval.pca_reference.min(src.len()) {
                reference.push(src.get(i)?);
            }
        }
    }
    if reference.is_empty() {
        return Err(Error::invalid("no reference samples to fit PCA"));
    }
    let feats = encode_samples(&ckpt.params, &cfg.encoder, &cfg.views, &reference)?;
    let d = cfg.encoder.dim;
    let pooled: Vec<f32> = feats.iter().flat_map(|f| f.tokens.data().iter().copied()).collect();
    let n = pooled.len() / d;
    let pca = embedding_pca(&Tensor::new(vec![n, d], pooled)?, 3.min(d))?;

    let sample = load_sample(args.data.as_deref(), cfg, &args.sample_id)?;
    let f = encode_samples(&ckpt.params, &cfg.encoder, &cfg.views, std::slice::from_ref(&sample))?
        .pop()
        .expect("one sample in, one out");
    let map = patch_pca_map(&f.tokens, f.grid, &pca)?;
    fs::create_dir_all(&args.out)?;
    write_pca_maps(&map, &args.out, &args.sample_id, args.scale)
}
