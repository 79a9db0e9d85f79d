//! Fine-tune a control module on a cached pretrained backbone, then sample
//! the held-out controls from the saved checkpoint and score adherence.
//!
//! `cargo run --release --example train_and_sample [config.toml]`
//! (defaults to the tiny config; pass `configs/default.toml` for the full run)

use std::path::Path;

use ctrldiff::commands::{cmd_sample, cmd_train, ControlSource, SampleRequest, CHECKPOINT_FILE};
use ctrldiff::config::RunConfig;

fn main() -> ctrldiff::Result<()> {
    let cfg = match std::env::args().nth(1) {
        Some(p) => RunConfig::load(Path::new(&p))?,
        None => {
            RunConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/tiny.toml"))?
        }
    };
    let outdir = std::env::temp_dir().join("ctrldiff-examples");
    let run = cmd_train(&cfg, &outdir)?;
    println!("run directory: {}", run.run_dir.display());
    for r in &run.trace.records {
        println!(
            "step {:>5}  loss {:.5}  adherence {:.3}",
            r.step, r.train_loss, r.adherence
        );
    }

    let req = SampleRequest {
        checkpoint: run.run_dir.join(CHECKPOINT_FILE),
        controls: ControlSource::Split(cfg.data.eval_key()),
        count: cfg.data.eval_count.min(16),
        seed: 0,
        unconditional: false,
    };
    let conditioned = cmd_sample(&req, &outdir, &run.run_dir.join("samples/example"))?;
    let plain = cmd_sample(
        &SampleRequest {
            unconditional: true,
            ..req
        },
        &outdir,
        &run.run_dir.join("samples/example-unconditional"),
    )?;
    println!(
        "{} samples: mean adherence {:.3} with control, {:.3} without",
        conditioned.images.len(),
        conditioned.mean_adherence(),
        plain.mean_adherence()
    );
    Ok(())
}
