//! Convergence comparison: train both architectures over several seeds and
//! compare the median step at which adherence first reaches the threshold.
//!
//! `cargo run --release --example compare [config.toml]`
//! The tiny default finishes in seconds; `configs/default.toml` is the full experiment.

use std::path::Path;

use ctrldiff::commands::cmd_compare;
use ctrldiff::config::RunConfig;

fn main() -> ctrldiff::Result<()> {
    let cfg = match std::env::args().nth(1) {
        Some(p) => RunConfig::load(Path::new(&p))?,
        None => {
            RunConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/tiny.toml"))?
        }
    };
    let outdir = std::env::temp_dir().join("ctrldiff-examples");
    let out = cmd_compare(&cfg, &outdir, 1)?;
    for (label, step) in out.report.thresholds() {
        println!(
            "{label:<24} {}",
            step.map_or("not reached".into(), |s| format!("step {s}"))
        );
    }
    println!("{}", out.verdict_line());
    println!(
        "curves: {}",
        outdir
            .join(format!("{}.compare/reports", cfg.run_name))
            .display()
    );
    Ok(())
}
