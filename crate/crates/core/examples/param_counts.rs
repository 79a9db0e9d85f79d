//! Total and learnable parameters of the base model and both control
//! architectures, next to the reference large-model figures.
//!
//! `cargo run --example param_counts [config.toml]`

use std::path::Path;

use ctrldiff::bench::{REFERENCE_LEARNABLE_PARAMS, REFERENCE_TOTAL_PARAMS};
use ctrldiff::commands::param_report;
use ctrldiff::config::RunConfig;

fn main() -> ctrldiff::Result<()> {
    let cfg = match std::env::args().nth(1) {
        Some(p) => RunConfig::load(Path::new(&p))?,
        None => RunConfig::default(),
    };
    let report = param_report(&cfg)?;
    println!(
        "{:<12} {:>12} {:>12} {:>9}",
        "config", "total", "learnable", "fraction"
    );
    for r in &report.rows {
        println!(
            "{:<12} {:>12} {:>12} {:>8.2}%",
            r.label,
            r.total_params,
            r.learnable_params,
            100.0 * r.learnable_fraction
        );
    }
    println!(
        "reference large model: {}M learnable of {}M ({:.1}%)",
        REFERENCE_LEARNABLE_PARAMS / 1_000_000,
        REFERENCE_TOTAL_PARAMS / 1_000_000,
        100.0 * REFERENCE_LEARNABLE_PARAMS as f64 / REFERENCE_TOTAL_PARAMS as f64
    );
    Ok(())
}
