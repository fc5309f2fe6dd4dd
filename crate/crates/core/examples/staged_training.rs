//! The three training protocols on small synthetic data: 2D-only,
//! curriculum warm-started from the 2D weights, and joint training from
//! scratch. Usage: `staged_training [steps]`.

use mmv::cli::{synthetic_splits, RunConfig};
use mmv::training::{run_stage, Stage, StageSummary, Start, TrainData};

const CONFIG: &str = r#"
seed = 3

[encoder]
depth = 2
dim = 48
heads = 2

[views]
local_views = 4
long_side_2d = 112
long_side_3d = 56

[stage]
batch_2d = 6
batch_3d = 2

[data]
n_2d = 200
n_3d = 80

[data.synth]
size_2d = 112
size_3d = 56
"#;

fn summarize(stage: Stage, r: &StageSummary) {
    let m = &r.metrics;
    let window = (m.len() / 5).max(1);
    let avg = |xs: &[mmv::training::StepMetrics], f: fn(&mmv::training::StepMetrics) -> f32| {
        xs.iter().map(f).sum::<f32>() / xs.len() as f32
    };
    let (head, tail) = (&m[..window], &m[m.len() - window..]);
    println!(
        "{:<20} total {:.4} -> {:.4}  pred {:.4} -> {:.4}  sigreg {:.4} -> {:.4}  ({} 2D, {} 3D samples)",
        stage.name(),
        avg(head, |x| x.loss_total),
        avg(tail, |x| x.loss_total),
        avg(head, |x| x.loss_pred),
        avg(tail, |x| x.loss_pred),
        avg(head, |x| x.loss_sigreg),
        avg(tail, |x| x.loss_sigreg),
        r.consumed_2d,
        r.consumed_3d
    );
}

fn main() -> mmv::Result<()> {
    let mut cfg = RunConfig::from_toml(CONFIG)?;
    cfg.stage.steps = std::env::args().nth(1).map_or(Ok(20), |s| s.parse()).expect("steps is a number");
    let splits = synthetic_splits(&cfg.data);

    let mut stage1 = None;
    for stage in [Stage::Stage1, Stage::Stage2, Stage::Stage3] {
        let c = cfg.with_stage(stage);
        let data = TrainData {
            d2: splits.train_2d.clone(),
            d3: splits.train_3d.clone().filter(|_| c.stage.batch_3d > 0),
        };
        let start = match (stage, &stage1) {
            (Stage::Stage2, Some(p)) => Start::Init(Clone::clone(p)),
            _ => Start::Random,
        };
        let r = run_stage(&c.train_setup(), &data, start, None)?;
        summarize(stage, &r);
        if stage == Stage::Stage1 {
            stage1 = Some(r.params);
        }
    }
    Ok(())
}
