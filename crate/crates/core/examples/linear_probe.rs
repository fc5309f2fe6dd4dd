//! Frozen-feature linear probes on a randomly initialized encoder and on a
//! briefly trained one, with the full probe-modality by test-modality grid.

use mmv::cli::{synthetic_splits, RunConfig};
use mmv::eval::{embed_source, modality_robustness_report, Embeddings, ProbeConfig};
use mmv::params::ParamSet;
use mmv::training::{run_stage, SampleSource, Stage, Start, TrainData};
use std::sync::Arc;

const CONFIG: &str = r#"
[encoder]
depth = 2
dim = 48
heads = 2

[views]
local_views = 2
long_side_2d = 112
long_side_3d = 56

[stage]
steps = 10
batch_2d = 6
batch_3d = 2

[data]
n_2d = 240
n_3d = 120

[data.synth]
size_2d = 112
size_3d = 56
"#;

fn embed_all(params: &ParamSet, cfg: &RunConfig, sources: &[&Option<Arc<dyn SampleSource>>]) -> mmv::Result<Embeddings> {
    let mut out = Embeddings::default();
    for src in sources.iter().filter_map(|s| s.as_ref()) {
        let idx: Vec<usize> = (0..src.len()).collect();
        out.extend(embed_source(params, &cfg.encoder, &cfg.views, src.as_ref(), &idx)?);
    }
    Ok(out)
}

fn grid(name: &str, params: &ParamSet, cfg: &RunConfig) -> mmv::Result<()> {
    let s = synthetic_splits(&cfg.data);
    let train = embed_all(params, cfg, &[&s.train_2d, &s.train_3d])?;
    let test = embed_all(params, cfg, &[&s.test_2d, &s.test_3d])?;
    println!("{name}: {} train / {} test embeddings of width {}", train.len(), test.len(), train.dim());
    for e in modality_robustness_report(&train, &test, &ProbeConfig::default(), 200)? {
        let per: Vec<String> = e.labels.iter().map(|l| format!("{:.2}", l.auroc.unwrap_or(f64::NAN))).collect();
        println!(
            "  probe {:<3} on {:<3} macro {:.3} [{:.3}, {:.3}]  per label {}",
            e.probe.name(),
            e.eval_modality.name(),
            e.macro_auroc.unwrap_or(f64::NAN),
            e.macro_ci_lo.unwrap_or(f64::NAN),
            e.macro_ci_hi.unwrap_or(f64::NAN),
            per.join(" ")
        );
    }
    Ok(())
}

fn main() -> mmv::Result<()> {
    let cfg = RunConfig::from_toml(CONFIG)?.with_stage(Stage::Stage3);
    let init = mmv::encoder::init_params(&cfg.encoder, 1)?;
    grid("random init", &init, &cfg)?;

    let s = synthetic_splits(&cfg.data);
    let data = TrainData {
        d2: s.train_2d.clone(),
        d3: s.train_3d.clone(),
    };
    let trained = run_stage(&cfg.train_setup(), &data, Start::Random, None)?;
    grid(&format!("after {} joint steps", cfg.stage.steps), &trained.params, &cfg)
}
