//! Training-free weight swapping: attach a low-rank adapter to the backbone
//! of a conditioned model, sample, detach, and get the original back.
//!
//! `cargo run --release --example lora_swap`

use std::path::Path;

use ctrldiff::backbone::build_backbone;
use ctrldiff::commands::fresh_model;
use ctrldiff::config::RunConfig;
use ctrldiff::datagen::Dataset;
use ctrldiff::finetune::{lora_attach, lora_detach, sample_images, LoraAdapter};
use ctrldiff::Tensor;

fn main() -> ctrldiff::Result<()> {
    let cfg =
        RunConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/tiny.toml"))?;
    let (backbone, _, _) = build_backbone(&cfg.backbone, cfg.model_seed)?;
    let mut model = fresh_model(&cfg, backbone)?;
    let control = Dataset::generate(cfg.data.eval_key())?.controls;
    let sched = cfg.diffusion.schedule()?;
    let n = control.shape()[0];
    let draw = |m: &_| {
        sample_images(
            m,
            Some(&control),
            n,
            cfg.backbone.image_size,
            cfg.train.prediction_kind,
            &sched,
            8,
            1,
            0,
        )
    };
    let reference = draw(&model)?;
    let original = model.backbone.params.clone();

    let targets: Vec<String> = model
        .backbone
        .params
        .registry()
        .names()
        .filter(|n| n.starts_with("decoder.") && n.ends_with(".conv.weight"))
        .map(str::to_string)
        .collect();
    let mut adapter = LoraAdapter::new("style", &model.backbone.params, &targets, 2, 2.0, 0)?;
    println!(
        "adapter over {} kernels, {} parameters",
        adapter.targets.len(),
        adapter
            .targets
            .iter()
            .map(|t| t.a.numel() + t.b.numel())
            .sum::<usize>()
    );

    let att = lora_attach(&adapter, &mut model.backbone.params)?;
    println!(
        "zero-initialized adapter: samples unchanged = {}",
        draw(&model)?.bit_eq(&reference)
    );
    lora_detach(att, &mut model.backbone.params);

    // A "trained" adapter: any nonzero B.
    for t in &mut adapter.targets {
        t.b = Tensor::from_fn(
            t.b.shape().to_vec(),
            |i| if i % 2 == 0 { 0.05 } else { -0.05 },
        );
    }
    let control_before = model.control.clone();
    let att = lora_attach(&adapter, &mut model.backbone.params)?;
    let styled = draw(&model)?;
    println!(
        "nonzero adapter: max pixel change {:.3}",
        styled.max_abs_diff(&reference)
    );
    let untouched = model
        .control
        .stores()
        .iter()
        .zip(control_before.stores())
        .all(|(a, b)| a.bit_eq(b));
    println!("control module untouched: {untouched}");
    lora_detach(att, &mut model.backbone.params);
    println!(
        "after detach: weights restored = {}, samples restored = {}",
        model.backbone.params.bit_eq(&original),
        draw(&model)?.bit_eq(&reference)
    );
    Ok(())
}
