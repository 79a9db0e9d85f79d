//! A freshly built ControlNet branch leaves the base model untouched, and
//! its zero bridges block every gradient into the copied trunk. The
//! ControlNeXt extractor receives gradient from the first step.
//!
//! `cargo run --release --example zero_conv_identity`

use ctrldiff::backbone::{build_backbone, BackboneConfig};
use ctrldiff::control::{
    build_controlnet_branch, build_extractor, controlnet_forward, ConditionedModel,
    ControlExtractorConfig, ControlModule, ControlNetBranchConfig, CrossNormState,
};
use ctrldiff::graph::{GradMode, Graph};
use ctrldiff::FeatureMap;

fn grad_norms(
    model: &ConditionedModel,
    x: &FeatureMap,
    c: &FeatureMap,
) -> ctrldiff::Result<Vec<(String, f64)>> {
    let mut g = Graph::new(GradMode::All);
    let (xv, cv) = (g.input(x.clone()), g.input(c.clone()));
    let out = model.graph(&mut g, xv, &[300], Some(cv))?;
    let target = x.map(|v| -v);
    let loss = g.weighted_mse(out.output, target, vec![1.0])?;
    let grads = g.backward(loss)?;
    let mut rows = Vec::new();
    for store in model.control.stores() {
        for id in store.ids() {
            let n = g.param_grad(&grads, store, id).map_or(0.0, |t| {
                t.data()
                    .iter()
                    .map(|&v| (v as f64).powi(2))
                    .sum::<f64>()
                    .sqrt()
            });
            rows.push((store.entry(id).name.clone(), n));
        }
    }
    Ok(rows)
}

fn main() -> ctrldiff::Result<()> {
    let cfg = BackboneConfig {
        base_channels: 8,
        channel_multipliers: vec![1, 2],
        mid_channels: 16,
        time_embed_dim: 16,
        image_size: 16,
        ..BackboneConfig::default()
    };
    let (backbone, _, port) = build_backbone(&cfg, 1)?;
    let (branch, registry) =
        build_controlnet_branch(&backbone, &ControlNetBranchConfig::default(), 2)?;
    let x = FeatureMap::from_fn([1, 1, 16, 16], |i| ((i * 37 % 101) as f32 / 50.0) - 1.0);
    let c = FeatureMap::from_fn([1, 1, 16, 16], |i| ((i / 16) % 5 < 2) as u8 as f32);

    let base = backbone.forward(&x, &[300], None)?;
    let with_branch = controlnet_forward(&backbone, &branch, &x, &[300], &c)?;
    println!(
        "ControlNet branch with {} parameters; output bit-identical to base: {}",
        registry.total_params(),
        with_branch.bit_eq(&base)
    );

    let net = ConditionedModel {
        backbone: backbone.clone(),
        control: ControlModule::ControlNet(branch),
    };
    let mut blocked = 0;
    let mut total = 0;
    for (name, n) in grad_norms(&net, &x, &c)? {
        if name.starts_with("control.bridge.") {
            println!("  {name:<40} grad norm {n:.3e}");
        } else {
            total += 1;
            blocked += (n == 0.0) as usize;
        }
    }
    println!(
        "  {blocked}/{total} branch tensors behind the zero bridges receive exactly zero gradient"
    );

    let ecfg = ControlExtractorConfig::for_port(&port, 16, 1);
    let (extractor, _) = build_extractor(&ecfg, 3)?;
    let next = ConditionedModel {
        backbone,
        control: ControlModule::ControlNeXt {
            extractor,
            cross_norm: CrossNormState::new(port.channels)?,
        },
    };
    let total: f64 = grad_norms(&next, &x, &c)?
        .iter()
        .map(|(_, n)| n * n)
        .sum::<f64>()
        .sqrt();
    println!("ControlNeXt extractor + gamma gradient norm at init: {total:.3e}");
    Ok(())
}
