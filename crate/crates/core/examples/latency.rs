//! Median per-step denoiser latency of the base model, ControlNeXt and
//! ControlNet on identical inputs.
//!
//! `cargo run --release --example latency [config.toml]`

use std::path::Path;

use ctrldiff::bench::{REFERENCE_OVERHEAD_CONTROLNET, REFERENCE_OVERHEAD_CONTROLNEXT};
use ctrldiff::commands::latency_reports;
use ctrldiff::config::RunConfig;

fn main() -> ctrldiff::Result<()> {
    let mut cfg = match std::env::args().nth(1) {
        Some(p) => RunConfig::load(Path::new(&p))?,
        None => RunConfig::default(),
    };
    cfg.bench.repeats = 1;
    for rep in latency_reports(&cfg)? {
        for r in &rep.rows {
            println!(
                "{:<12} {:>8.3} ms  {:+6.1}%",
                r.label,
                1e3 * r.median_step_seconds,
                r.overhead_percent
            );
        }
    }
    println!("reference overheads: ControlNeXt +{REFERENCE_OVERHEAD_CONTROLNEXT}%, ControlNet +{REFERENCE_OVERHEAD_CONTROLNET}%");
    Ok(())
}
