use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ctrldiff::commands::{
    cmd_bench, cmd_compare, cmd_gen_data, cmd_sample, cmd_train, ControlSource, SampleRequest,
    CHECKPOINT_FILE,
};
use ctrldiff::config::RunConfig;
use ctrldiff::{Error, Result};

/// Train, sample, benchmark and compare control modules for a small diffusion backbone.
///
/// Every global flag can also be set through an environment variable with
/// the `CTRLDIFF_` prefix; log verbosity follows `CTRLDIFF_LOG`.
#[derive(Parser, Debug)]
#[command(name = "ctrldiff", version)]
struct Cli {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true, env = "CTRLDIFF_CONFIG")]
    config: Option<PathBuf>,

    /// Root directory for runs, reports and caches.
    #[arg(long, global = true, env = "CTRLDIFF_OUTDIR", default_value = "runs")]
    outdir: PathBuf,

    /// Training seed (`train`), the single compared seed (`compare`) or the
    /// sampling seed (`sample`).
    #[arg(long, global = true, env = "CTRLDIFF_SEED")]
    seed: Option<u64>,

    /// Concurrent sub-runs for `compare`.
    #[arg(long, global = true, env = "CTRLDIFF_PARALLEL", default_value_t = 1)]
    parallel: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fine-tune the configured architecture and write checkpoint, trace and reports.
    Train,
    /// Generate images for control maps from a checkpoint and score them.
    Sample {
        /// Defaults to `<outdir>/<run_name>/checkpoint.cdar`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Graymap control files; defaults to the held-out split.
        #[arg(long = "control", num_args = 1..)]
        controls: Vec<PathBuf>,
        /// Defaults to one image per control file, or up to 32 from the held-out split.
        #[arg(long)]
        count: Option<usize>,
        /// Ignore the controls and sample the plain backbone.
        #[arg(long)]
        unconditional: bool,
        /// Defaults to `<outdir>/<run_name>/samples/seed-<seed>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parameter counts and per-step latency of base, ControlNet and ControlNeXt.
    Bench,
    /// Train both architectures over the configured seeds and compare convergence.
    Compare,
    /// Generate and cache the dataset splits.
    GenData {
        /// Also write this many image/control pairs as graymaps.
        #[arg(long, default_value_t = 0)]
        preview: usize,
    },
    /// Print the resolved configuration.
    Config,
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        match cli.command {
            Command::Train => cfg.train.seed = seed,
            Command::Compare => cfg.compare.seeds = vec![seed],
            _ => {}
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli).map_err(|e| e.in_stage("config"))?;
    let outdir = &cli.outdir;
    match &cli.command {
        Command::Train => {
            let out = cmd_train(&cfg, outdir)?;
            println!("run written to {}", out.run_dir.display());
            match out.trace.steps_to_threshold() {
                Some(s) => println!("adherence threshold reached at step {s}"),
                None => println!("adherence threshold not reached"),
            }
        }
        Command::Sample {
            checkpoint,
            controls,
            count,
            unconditional,
            out,
        } => {
            let seed = cli.seed.unwrap_or(0);
            let run_dir = outdir.join(&cfg.run_name);
            let req = SampleRequest {
                checkpoint: checkpoint
                    .clone()
                    .unwrap_or_else(|| run_dir.join(CHECKPOINT_FILE)),
                controls: if controls.is_empty() {
                    ControlSource::Split(cfg.data.eval_key())
                } else {
                    ControlSource::Files(controls.clone())
                },
                count: count.unwrap_or(if controls.is_empty() {
                    32.min(cfg.data.eval_count)
                } else {
                    controls.len()
                }),
                seed,
                unconditional: *unconditional,
            };
            let dir = out
                .clone()
                .unwrap_or_else(|| run_dir.join("samples").join(format!("seed-{seed}")));
            let res = cmd_sample(&req, outdir, &dir)?;
            println!(
                "{} images written to {}; mean adherence {:.4}",
                res.images.len(),
                dir.display(),
                res.mean_adherence()
            );
        }
        Command::Bench => {
            let res = cmd_bench(&cfg, outdir)?;
            print!("{}", res.params.to_csv());
            for rep in &res.latency {
                print!("{}", rep.to_csv());
            }
        }
        Command::Compare => {
            let res = cmd_compare(&cfg, outdir, cli.parallel)?;
            println!("{}", res.verdict_line());
        }
        Command::GenData { preview } => {
            for p in cmd_gen_data(&cfg, outdir, *preview)? {
                println!("{}", p.display());
            }
        }
        Command::Config => print!("{}", cfg.to_toml()),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CTRLDIFF_LOG", "info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Error::Stage { stage, source }) => {
            eprintln!("ctrldiff: {stage} stage failed: {source}");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("ctrldiff: {e}");
            ExitCode::FAILURE
        }
    }
}
