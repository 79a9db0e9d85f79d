//! Cross normalization: align control features to the main branch's
//! per-channel statistics before adding them.
//!
//! `cargo run --example cross_norm`

use ctrldiff::control::{cross_normalize, CrossNormState};
use ctrldiff::{FeatureMap, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn channel_moments(y: &FeatureMap) -> Vec<(f64, f64)> {
    let [_, _, h, w] = y.dims4().unwrap();
    y.data()
        .chunks(h * w)
        .map(|c| {
            let n = c.len() as f64;
            let m = c.iter().map(|&v| v as f64).sum::<f64>() / n;
            (
                m,
                c.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / n,
            )
        })
        .collect()
}

fn main() -> ctrldiff::Result<()> {
    // Hand case: x_m = [1, 3] has mean 2 and variance 1, so [0, 4] maps to [-2, 2].
    let exact = CrossNormState::with_gamma(Tensor::<f64>::full([1], 1.0), 0.0)?;
    let xm = FeatureMap::<f64>::new([1, 1, 1, 2], vec![1.0, 3.0])?;
    let xc = FeatureMap::<f64>::new([1, 1, 1, 2], vec![0.0, 4.0])?;
    println!("hand case: {:?}", cross_normalize(&xc, &xm, &exact)?.data());

    // Control features on a wildly different scale than the main branch.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let main_branch =
        FeatureMap::from_fn([1, 4, 8, 8], |_| 0.2 * rng.gen_range(-1.0f32..1.0) + 3.0);
    let control = FeatureMap::from_fn([1, 4, 8, 8], |_| 50.0 * rng.gen_range(-1.0f32..1.0));
    let state = CrossNormState::new(4)?;
    let aligned = cross_normalize(&control, &main_branch, &state)?;
    for (k, ((mm, mv), (am, av))) in channel_moments(&main_branch)
        .into_iter()
        .zip(channel_moments(&aligned))
        .enumerate()
    {
        println!(
            "channel {k}: main mean {mm:.3} var {mv:.4} | aligned control mean {am:.2} var {av:.1}"
        );
    }

    let self_norm = cross_normalize(&main_branch, &main_branch, &state)?;
    for (k, (m, v)) in channel_moments(&self_norm).into_iter().enumerate() {
        println!("self-normalized channel {k}: mean {m:+.2e}, variance {v:.6}");
    }
    Ok(())
}
