//! Synthetic shape dataset: deterministic image/control pairs addressed by
//! (seed, index), cached as archives and previewable as graymaps.
//!
//! `cargo run --release --example generate_data [config.toml]`

use std::path::{Path, PathBuf};

use ctrldiff::commands::cmd_gen_data;
use ctrldiff::config::RunConfig;
use ctrldiff::datagen::{generate_one, ControlKind};

fn main() -> ctrldiff::Result<()> {
    let cfg = match std::env::args().nth(1) {
        Some(p) => RunConfig::load(Path::new(&p))?,
        None => {
            RunConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/tiny.toml"))?
        }
    };
    let outdir = std::env::temp_dir().join("ctrldiff-examples");
    let written: Vec<PathBuf> = cmd_gen_data(&cfg, &outdir, 4)?;
    for p in &written {
        println!("{}", p.display());
    }

    let a = generate_one(cfg.data.seed, 3, cfg.data.size, ControlKind::Mask)?;
    let b = generate_one(cfg.data.seed, 3, cfg.data.size, ControlKind::Mask)?;
    let fg = a.control.data().iter().filter(|&&v| v > 0.5).count();
    println!(
        "item 3 regenerates identically: {}; {fg} of {} pixels are foreground; shape {:?}",
        a.image.bit_eq(&b.image) && a.control.bit_eq(&b.control),
        a.control.numel(),
        a.shape.map(|s| s.kind)
    );
    Ok(())
}
