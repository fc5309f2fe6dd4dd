use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mmv::cli::{
    cmd_bench_pack, cmd_eval, cmd_gen_data, cmd_pca_map, cmd_train, BenchArgs, EvalArgs, GenDataArgs, PcaMapArgs,
    RunConfig, TrainArgs, SEED_ENV,
};
use mmv::eval::ProbeFilter;
use mmv::training::Stage;

#[derive(Parser)]
#[command(name = "mmv", about = "Unified 2D/3D ViT training and probing")]
struct Cli {
    /// TOML run configuration; defaults apply to every missing key.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic multi-label dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        n_2d: Option<usize>,
        #[arg(long)]
        n_3d: Option<usize>,
        #[arg(long)]
        force: bool,
    },
    /// Run one training stage.
    Train {
        #[arg(long, value_parser = parse_stage)]
        stage: Stage,
        /// Dataset directory; the configured synthetic data when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        init_from: Option<PathBuf>,
        #[arg(long)]
        resume: bool,
    },
    /// Linear-probe a frozen checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "all", value_parser = parse_probe)]
        probe: ProbeFilter,
        #[arg(long)]
        robustness: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare packed and padded attention on a mixed batch.
    BenchPack {
        #[arg(long)]
        lengths_from: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
    },
    /// Write top-3 patch PCA maps of one sample as PGM images.
    PcaMap {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        sample_id: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        scale: usize,
    },
}

fn parse_stage(s: &str) -> Result<Stage, String> {
    Stage::parse(s).map_err(|e| e.to_string())
}

fn parse_probe(s: &str) -> Result<ProbeFilter, String> {
    ProbeFilter::parse(s).map_err(|e| e.to_string())
}

fn run(cli: Cli) -> mmv::Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cfg.apply_seed_override(std::env::var(SEED_ENV).ok().as_deref())? {
        eprintln!("{SEED_ENV} override: seed = {seed}");
    }
    match cli.cmd {
        Cmd::GenData { out, seed, n_2d, n_3d, force } => {
            let m = cmd_gen_data(&cfg, &GenDataArgs { out: out.clone(), seed, n_2d, n_3d, force })?;
            println!("wrote {} samples to {}", m.rows.len(), out.display());
        }
        Cmd::Train { stage, data, out, init_from, resume } => {
            let args = TrainArgs { stage, data, out, init_from, resume };
            let s = cmd_train(&cfg, &args)?;
            let o = args.outputs();
            if let Some(last) = s.metrics.last() {
                println!("{last}");
            }
            println!("checkpoint {}", o.checkpoint.display());
            println!("metrics {}", o.metrics.display());
        }
        Cmd::Eval { checkpoint, data, probe, robustness, out } => {
            let r = cmd_eval(&cfg, &EvalArgs { checkpoint, data, probe, robustness, out: out.clone() })?;
            if out.is_none() {
                print!("{}", r.to_toml());
            } else {
                for e in &r.evaluations {
                    let auroc = e.macro_auroc.map_or("undefined".to_string(), |a| format!("{a:.4}"));
                    println!("probe={} eval={} macro_auroc={auroc}", e.probe.name(), e.eval_modality.name());
                }
            }
        }
        Cmd::BenchPack { lengths_from, repeats } => {
            print!("{}", cmd_bench_pack(&cfg, &BenchArgs { lengths_from, repeats })?);
        }
        Cmd::PcaMap { checkpoint, data, sample_id, out, scale } => {
            for p in cmd_pca_map(&cfg, &PcaMapArgs { checkpoint, data, sample_id, out, scale })? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
