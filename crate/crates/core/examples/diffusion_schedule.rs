//! Noise schedule, loss weights, the forward process and the reverse step.
//!
//! `cargo run --example diffusion_schedule`

use ctrldiff::diffusion::{
    ddpm_step, loss_weight, make_schedule, q_sample, PredictionKind, ScheduleKind,
};
use ctrldiff::FeatureMap;

fn main() -> ctrldiff::Result<()> {
    let s = make_schedule(1000, 1e-4, 0.02, ScheduleKind::Linear)?;
    println!(
        "{:>5} {:>10} {:>12} {:>12} {:>10} {:>10}",
        "t", "beta", "alpha_bar", "post_var", "w_eps", "w_v"
    );
    for t in [1, 10, 100, 250, 500, 750, 1000] {
        println!(
            "{t:>5} {:>10.6} {:>12.6e} {:>12.6e} {:>10.4e} {:>10.4e}",
            s.beta(t)?,
            s.alpha_bar(t)?,
            s.posterior_var(t)?,
            loss_weight(t, PredictionKind::Eps, &s)?,
            loss_weight(t, PredictionKind::V, &s)?
        );
    }

    let x0 = FeatureMap::<f64>::new([1, 1, 1, 3], vec![1.0, -0.5, 0.0])?;
    let eps = FeatureMap::<f64>::new([1, 1, 1, 3], vec![0.3, 0.3, -1.0])?;
    for t in [1, 500, 1000] {
        println!("q_sample t={t:<4} {:?}", q_sample(&x0, t, &eps, &s)?.data());
    }
    let xt = q_sample(&x0, 500, &eps, &s)?;
    let zero = FeatureMap::<f64>::zeros([1, 1, 1, 3]);
    println!(
        "posterior mean at t=500 given the true x0: {:?}",
        ddpm_step(&xt, 500, &x0, &zero, &s)?.data()
    );
    Ok(())
}
