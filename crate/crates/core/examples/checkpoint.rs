//! Checkpoints: a self-describing archive holding the model spec and every
//! tensor, verified by a SHA-256 digest on load.
//!
//! `cargo run --example checkpoint`

use std::path::Path;

use ctrldiff::backbone::build_backbone;
use ctrldiff::checkpoint::{load_checkpoint, save_checkpoint, ModelSpec};
use ctrldiff::commands::fresh_model;
use ctrldiff::config::RunConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg =
        RunConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/tiny.toml"))?;
    let (backbone, _, _) = build_backbone(&cfg.backbone, cfg.model_seed)?;
    let model = fresh_model(&cfg, backbone)?;
    let dir = std::env::temp_dir().join("ctrldiff-examples");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("example-checkpoint.cdar");
    save_checkpoint(&path, &ModelSpec::conditioned(&cfg), &model)?;
    let size = std::fs::metadata(&path)?.len();

    let (spec, loaded) = load_checkpoint(&path)?;
    println!(
        "{} ({size} bytes): {:?} over a {}px backbone, {} parameters",
        path.display(),
        spec.architecture,
        spec.backbone.image_size,
        loaded.registry().total_params()
    );
    println!(
        "backbone identical: {}",
        loaded.backbone.params.bit_eq(&model.backbone.params)
    );

    let mut bytes = std::fs::read(&path)?;
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    let corrupt = dir.join("example-corrupt.cdar");
    std::fs::write(&corrupt, &bytes)?;
    match load_checkpoint(&corrupt) {
        Ok(_) => println!("corrupted archive loaded (unexpected)"),
        Err(e) => println!("corrupted archive rejected: {e}"),
    }
    Ok(())
}
