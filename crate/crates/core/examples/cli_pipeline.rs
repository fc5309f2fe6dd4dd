//! The file-based workflow end to end on a tiny configuration: write a
//! dataset, train a joint stage, evaluate with the robustness grid and
//! render PCA maps, all through the command functions behind the binary.
//! Usage: `cli_pipeline [work_dir]`.

use mmv::cli::{cmd_eval, cmd_gen_data, cmd_pca_map, cmd_train, EvalArgs, GenDataArgs, PcaMapArgs, RunConfig, TrainArgs};
use mmv::eval::ProbeFilter;
use mmv::training::{read_metrics, Stage};

const CONFIG: &str = r#"
seed = 11

[encoder]
depth = 1
dim = 24
heads = 2

[views]
local_views = 2
long_side_2d = 56
long_side_3d = 28

[stage]
steps = 6
batch_2d = 4
batch_3d = 2
checkpoint_every = 3

[data]
n_2d = 40
n_3d = 20

[data.synth]
size_2d = 56
size_3d = 28
"#;

fn main() -> mmv::Result<()> {
    let work = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("mmv-pipeline"), Into::into);
    let cfg = RunConfig::from_toml(CONFIG)?;
    let data = work.join("data");
    let run = work.join("run");

    let manifest = cmd_gen_data(
        &cfg,
        &GenDataArgs {
            out: data.clone(),
            seed: None,
            n_2d: None,
            n_3d: None,
            force: true,
        },
    )?;
    println!("wrote {} samples to {}", manifest.rows.len(), data.display());

    let train = TrainArgs {
        stage: Stage::Stage3,
        data: Some(data.clone()),
        out: run.clone(),
        init_from: None,
        resume: false,
    };
    cmd_train(&cfg, &train)?;
    let outputs = train.outputs();
    for m in read_metrics(&std::fs::read_to_string(&outputs.metrics)?)? {
        println!("{m}");
    }

    let report_path = run.join("report.toml");
    let report = cmd_eval(
        &cfg,
        &EvalArgs {
            checkpoint: outputs.checkpoint.clone(),
            data: Some(data.clone()),
            probe: ProbeFilter::All,
            robustness: true,
            out: Some(report_path.clone()),
        },
    )?;
    for e in &report.evaluations {
        println!(
            "probe {:<3} on {:<3} macro AUROC {:.3}",
            e.probe.name(),
            e.eval_modality.name(),
            e.macro_auroc.unwrap_or(f64::NAN)
        );
    }
    println!("report at {}", report_path.display());

    let id = &manifest.rows.iter().find(|r| !r.modality.is_2d()).expect("a volume").id;
    let maps = cmd_pca_map(
        &cfg,
        &PcaMapArgs {
            checkpoint: outputs.checkpoint,
            data: Some(data),
            sample_id: id.clone(),
            out: run.join("maps"),
            scale: 8,
        },
    )?;
    println!("{} PCA slice images for {id}", maps.len());
    Ok(())
}
