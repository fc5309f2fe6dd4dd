use std::fmt;
use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::atomic::write_atomic;
use crate::encoder::{check_params, encode, init_params, EncoderConfig};
use crate::error::{Error, Result};
use crate::objective::{prediction_loss, sigreg_loss, total_loss, ObjectiveConfig};
use crate::params::ParamSet;
use crate::rng;
use crate::substrate::Graph;
use crate::views::ViewConfig;

use super::batches::{Batch, MixedBatches};
use super::checkpoint::{save_checkpoint, Checkpoint};
use super::optim::{adamw_step, cosine_lr, AdamState, OptimConfig};
use super::synthetic::SampleSource;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "stage1_2d_only", alias = "stage1")]
    Stage1,
    #[serde(rename = "stage2_curriculum", alias = "stage2")]
    Stage2,
    #[serde(rename = "stage3_native_joint", alias = "stage3")]
    Stage3,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Stage1 => "stage1_2d_only",
            Stage::Stage2 => "stage2_curriculum",
            Stage::Stage3 => "stage3_native_joint",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "stage1" | "stage1_2d_only" => Ok(Stage::Stage1),
            "stage2" | "stage2_curriculum" => Ok(Stage::Stage2),
            "stage3" | "stage3_native_joint" => Ok(Stage::Stage3),
            _ => Err(Error::Config(format!("unknown stage {s:?} (expected stage1, stage2 or stage3)"))),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    Random,
    FromCheckpoint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageConfig {
    pub stage: Stage,
    pub init: Init,
    pub steps: usize,
    pub batch_2d: usize,
    pub batch_3d: usize,
    /// Save a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: usize,
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig {
            stage: Stage::Stage3,
            init: Init::Random,
            steps: 120,
            batch_2d: 12,
            batch_3d: 4,
            checkpoint_every: 50,
        }
    }
}

impl StageConfig {
    /// This config switched to `stage`, with the initialization and batch
    /// mix the stage requires.
    pub fn for_stage(&self, stage: Stage) -> Self {
        let mut c = self.clone();
        c.stage = stage;
        c.init = if stage == Stage::Stage2 {
            Init::FromCheckpoint
        } else {
            Init::Random
        };
        if stage == Stage::Stage1 {
            c.batch_3d = 0;
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("stage {}: {m}", self.stage)));
        if self.batch_2d + self.batch_3d == 0 {
            return fail("batch_2d and batch_3d are both 0");
        }
        match self.stage {
            Stage::Stage1 if self.batch_3d != 0 => fail("2D-only training requires batch_3d = 0"),
            Stage::Stage1 if self.init != Init::Random => fail("stage1 starts from random init"),
            Stage::Stage2 if self.init != Init::FromCheckpoint => fail("curriculum training requires init = from_checkpoint"),
            Stage::Stage2 | Stage::Stage3 if self.batch_2d == 0 || self.batch_3d == 0 => {
                fail("joint stages need batch_2d > 0 and batch_3d > 0")
            }
            Stage::Stage3 if self.init != Init::Random => fail("native joint training starts from random init"),
            _ => Ok(()),
        }
    }
}

/// Resolved configuration of one training run.
#[derive(Clone, Debug)]
pub struct TrainSetup {
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub views: ViewConfig,
    pub objective: ObjectiveConfig,
    pub optim: OptimConfig,
    pub stage: StageConfig,
    /// Text echoed into the metrics log and checkpoints.
    pub config_echo: String,
}

impl TrainSetup {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.views.validate()?;
        self.objective.validate()?;
        self.optim.validate()?;
        self.stage.validate()
    }

    pub fn batches(&self, data: &TrainData) -> Result<MixedBatches> {
        MixedBatches::new(
            data.d2.clone(),
            data.d3.clone(),
            self.stage.batch_2d,
            self.stage.batch_3d,
            self.seed,
            self.views.clone(),
            self.encoder.patch,
            self.encoder.alpha,
        )
    }
}

#[derive(Clone, Default)]
pub struct TrainData {
    pub d2: Option<Arc<dyn SampleSource>>,
    pub d3: Option<Arc<dyn SampleSource>>,
}

pub enum Start {
    Random,
    /// Fresh optimizer over these weights (curriculum warm start).
    Init(ParamSet),
    Resume(Checkpoint),
}

#[derive(Clone, Debug)]
pub struct StageOutputs {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub lr: f32,
    pub loss_pred: f32,
    pub loss_sigreg: f32,
    pub loss_total: f32,
    pub n_2d: usize,
    pub n_3d: usize,
}

impl fmt::Display for StepMetrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "step={} lr={:e} loss_pred={:e} loss_sigreg={:e} loss_total={:e} n_2d={} n_3d={}",
            self.step, self.lr, self.loss_pred, self.loss_sigreg, self.loss_total, self.n_2d, self.n_3d
        )
    }
}

impl StepMetrics {
    pub fn parse(line: &str) -> Result<Self> {
        let mut m = StepMetrics {
            step: 0,
            lr: 0.0,
            loss_pred: 0.0,
            loss_sigreg: 0.0,
            loss_total: 0.0,
            n_2d: 0,
            n_3d: 0,
        };
        let bad = || Error::Format(format!("metrics line {line:?}"));
        let mut seen = 0;
        for field in line.split_whitespace() {
            let (k, v) = field.split_once('=').ok_or_else(bad)?;
            let f = || v.parse::<f32>().map_err(|_| bad());
            match k {
                "step" => m.step = v.parse().map_err(|_| bad())?,
                "lr" => m.lr = f()?,
                "loss_pred" => m.loss_pred = f()?,
                "loss_sigreg" => m.loss_sigreg = f()?,
                "loss_total" => m.loss_total = f()?,
                "n_2d" => m.n_2d = v.parse().map_err(|_| bad())?,
                "n_3d" => m.n_3d = v.parse().map_err(|_| bad())?,
                _ => return Err(bad()),
            }
            seen += 1;
        }
        if seen != 7 {
            return Err(bad());
        }
        Ok(m)
    }
}

/// Parses every record of a metrics log, skipping `#` comment lines.
pub fn read_metrics(text: &str) -> Result<Vec<StepMetrics>> {
    text.lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .map(StepMetrics::parse)
        .collect()
}

#[derive(Clone, Debug)]
pub struct StageSummary {
    pub params: ParamSet,
    pub adam: AdamState,
    pub metrics: Vec<StepMetrics>,
    /// Samples consumed by the steps run in this invocation.
    pub consumed_2d: u64,
    pub consumed_3d: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Losses {
    pub pred: f32,
    pub sigreg: f32,
    pub total: f32,
}

/// SIGReg direction seed for `step`.
pub fn sigreg_seed(seed: u64, step: u64) -> u64 {
    rng::derive(seed, &[rng::tag::SIGREG, step])
}

fn forward(
    g: &mut Graph,
    params: &ParamSet,
    batch: &Batch,
    setup: &TrainSetup,
    step: u64,
    train: bool,
) -> Result<(Vec<crate::substrate::Var>, [crate::substrate::Var; 3])> {
    let bound = params.bind(g, train);
    let out = encode(g, &bound, &batch.packed, &setup.encoder)?;
    let pred = prediction_loss(g, out.pooled, batch.views_per_sample, setup.views.global_views)?;
    let sig = sigreg_loss(g, out.pooled, setup.objective.directions, sigreg_seed(setup.seed, step))?;
    let total = total_loss(g, pred, sig, setup.objective.lambda)?;
    Ok((bound.vars().to_vec(), [pred, sig, total]))
}

/// Loss components of `params` on `batch` as seen at `step`, without
/// updating anything.
pub fn evaluate_losses(params: &ParamSet, batch: &Batch, setup: &TrainSetup, step: u64) -> Result<Losses> {
    let mut g = Graph::new();
    let (_, [p, s, t]) = forward(&mut g, params, batch, setup, step, false)?;
    Ok(Losses {
        pred: g.value(p).item(),
        sigreg: g.value(s).item(),
        total: g.value(t).item(),
    })
}

fn log_header(setup: &TrainSetup) -> String {
    let mut h = format!("# stage={} seed={}\n", setup.stage.stage, setup.seed);
    for line in setup.config_echo.lines() {
        h.push_str("# ");
        h.push_str(line);
        h.push('\n');
    }
    h
}

fn render_log(header: &str, metrics: &[StepMetrics]) -> String {
    let mut s = header.to_string();
    for m in metrics {
        s.push_str(&m.to_string());
        s.push('\n');
    }
    s
}

/// Runs one training stage: batch, views, tokenize, pack, encode, loss,
/// backward and AdamW, once per step.
///
/// With `outputs`, the metrics log and a checkpoint are written every
/// `checkpoint_every` steps and at the end. A non-finite loss or gradient
/// aborts with [`Error::NumericAbort`] and leaves the last good checkpoint
/// and its log in place.
pub fn run_stage(setup: &TrainSetup, data: &TrainData, start: Start, outputs: Option<&StageOutputs>) -> Result<StageSummary> {
    setup.validate()?;
    let batches = setup.batches(data)?;
    let total_steps = setup.stage.steps as u64;

    let header = log_header(setup);
    let mut metrics = Vec::new();
    let (mut params, mut adam, first) = match start {
        Start::Random => {
            if setup.stage.init != Init::Random {
                return Err(Error::Config(format!("{} requires an initial checkpoint", setup.stage.stage)));
            }
            let p = init_params(&setup.encoder, rng::derive(setup.seed, &[rng::tag::INIT]))?;
            let a = AdamState::new(&p);
            (p, a, 0)
        }
        Start::Init(p) => {
            if setup.stage.init != Init::FromCheckpoint {
                return Err(Error::Config(format!("{} trains from random init", setup.stage.stage)));
            }
            check_params(&setup.encoder, &p)?;
            let a = AdamState::new(&p);
            (p, a, 0)
        }
        Start::Resume(ckpt) => {
            ckpt.expect_encoder(&setup.encoder)?;
            ckpt.expect_config(&setup.config_echo)?;
            let adam = ckpt
                .adam
                .ok_or_else(|| Error::Format("checkpoint has no optimizer state to resume".into()))?;
            if let Some(out) = outputs {
                if out.metrics.exists() {
                    let text = std::fs::read_to_string(&out.metrics)?;
                    metrics = read_metrics(&text)?;
                    metrics.retain(|m| m.step < ckpt.step);
                }
            }
            (ckpt.params, adam, ckpt.step)
        }
    };
    if first > total_steps {
        return Err(Error::Config(format!("checkpoint at step {first} is past the stage's {total_steps} steps")));
    }

    let save = |params: &ParamSet, adam: &AdamState, step: u64, metrics: &[StepMetrics]| -> Result<()> {
        if let Some(out) = outputs {
            let ckpt = Checkpoint {
                encoder: setup.encoder.clone(),
                config: setup.config_echo.clone(),
                step,
                seed: setup.seed,
                params: params.clone(),
                adam: Some(adam.clone()),
            };
            save_checkpoint(&out.checkpoint, &ckpt)?;
            write_atomic(&out.metrics, render_log(&header, metrics).as_bytes())?;
        }
        Ok(())
    };

    let (mut consumed_2d, mut consumed_3d) = (0u64, 0u64);
    for step in first..total_steps {
        let batch = batches.batch_at(step)?;
        let lr = cosine_lr(step as usize, total_steps as usize, setup.optim.lr);
        let mut g = Graph::new();
        let (vars, [p, s, t]) = forward(&mut g, &params, &batch, setup, step, true)?;
        let row = StepMetrics {
            step,
            lr,
            loss_pred: g.value(p).item(),
            loss_sigreg: g.value(s).item(),
            loss_total: g.value(t).item(),
            n_2d: batch.n_2d,
            n_3d: batch.n_3d,
        };
        if !row.loss_total.is_finite() {
            return Err(Error::NumericAbort {
                step,
                detail: format!("loss is {}; last good checkpoint kept", row.loss_total),
            });
        }
        let grads = g.backward(t)?;
        let gs: Vec<Option<&[f32]>> = vars.iter().map(|&v| grads.get(v)).collect();
        adamw_step(&mut params, &gs, &mut adam, &setup.optim, lr).map_err(|e| match e {
            Error::NonFinite(d) => Error::NumericAbort {
                step,
                detail: format!("{d}; last good checkpoint kept"),
            },
            e => e,
        })?;
        consumed_2d += batch.n_2d as u64;
        consumed_3d += batch.n_3d as u64;
        metrics.push(row);
        let done = step + 1;
        let every = setup.stage.checkpoint_every as u64;
        if every > 0 && done % every == 0 && done < total_steps {
            save(&params, &adam, done, &metrics)?;
        }
    }
    save(&params, &adam, total_steps, &metrics)?;
    Ok(StageSummary {
        params,
        adam,
        metrics,
        consumed_2d,
        consumed_3d,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_invariants() {
        let base = StageConfig::default();
        assert!(base.validate().is_ok());
        let s1 = base.for_stage(Stage::Stage1);
        assert_eq!((s1.batch_3d, s1.init), (0, Init::Random));
        assert!(s1.validate().is_ok());
        let s2 = base.for_stage(Stage::Stage2);
        assert_eq!(s2.init, Init::FromCheckpoint);
        assert!(s2.validate().is_ok());
        assert!(StageConfig { stage: Stage::Stage1, ..base.clone() }.validate().is_err());
        assert!(StageConfig { stage: Stage::Stage2, ..base.clone() }.validate().is_err());
        assert!(StageConfig { batch_3d: 0, ..base.clone() }.validate().is_err());
        assert!(StageConfig { init: Init::FromCheckpoint, ..base }.validate().is_err());
    }

    #[test]
    fn metrics_line_round_trip() {
        let m = StepMetrics {
            step: 7,
            lr: 9.5e-5,
            loss_pred: 0.125,
            loss_sigreg: 3.0,
            loss_total: 0.19,
            n_2d: 12,
            n_3d: 0,
        };
        let line = m.to_string();
        assert!(line.starts_with("step=7 lr="));
        assert_eq!(StepMetrics::parse(&line).unwrap(), m);
        assert!(StepMetrics::parse("step=1 lr=2").is_err());
        assert_eq!(read_metrics(&format!("# c\n{line}\n")).unwrap(), vec![m]);
    }

    #[test]
    fn stage_names_parse() {
        for s in [Stage::Stage1, Stage::Stage2, Stage::Stage3] {
            assert_eq!(Stage::parse(s.name()).unwrap(), s);
        }
        assert_eq!(Stage::parse("stage2").unwrap(), Stage::Stage2);
        assert!(Stage::parse("stage4").is_err());
    }
}
