//! Noise schedule, forward noising, weighted losses and the ancestral sampler.
//!
//! Timesteps are 1-based: `t` ranges over `1..=T`, and `alpha_bar(0)` is taken
//! to be 1 so the posterior variance at `t = 1` is exactly zero. Nothing here
//! draws random numbers; all noise is passed in by the caller.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, FeatureMap};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    #[default]
    Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    posterior_var: Vec<f64>,
}

/// Build a schedule with `steps` betas interpolated from `beta_start` to `beta_end`.
pub fn make_schedule(
    steps: usize,
    beta_start: f64,
    beta_end: f64,
    kind: ScheduleKind,
) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::Config("schedule needs at least one step".into()));
    }
    let ok = |b: f64| b > 0.0 && b < 1.0;
    if !ok(beta_start) || !ok(beta_end) || beta_start > beta_end {
        return Err(Error::Config(format!(
            "beta bounds must satisfy 0 < start <= end < 1, got ({beta_start}, {beta_end})"
        )));
    }
    let beta: Vec<f64> = match kind {
        ScheduleKind::Linear if steps == 1 => vec![beta_start],
        ScheduleKind::Linear => (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect(),
    };
    NoiseSchedule::from_betas(beta)
}

impl NoiseSchedule {
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        let mut alpha_bar = Vec::with_capacity(beta.len());
        let mut acc = 1.0;
        for b in &beta {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        Self::from_parts(beta, alpha_bar)
    }

    /// Schedule whose cumulative products are exactly the given `alpha_bar` values.
    pub fn from_alpha_bar(alpha_bar: &[f64]) -> Result<Self> {
        let mut prev = 1.0;
        let mut beta = Vec::with_capacity(alpha_bar.len());
        for &ab in alpha_bar {
            beta.push(1.0 - ab / prev);
            prev = ab;
        }
        Self::from_parts(beta, alpha_bar.to_vec())
    }

    fn from_parts(beta: Vec<f64>, alpha_bar: Vec<f64>) -> Result<Self> {
        if beta.is_empty() || beta.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::Config("every beta must lie in (0, 1)".into()));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let posterior_var = (0..beta.len())
            .map(|i| {
                let prev = if i == 0 { 1.0 } else { alpha_bar[i - 1] };
                (1.0 - prev) / (1.0 - alpha_bar[i]) * beta[i]
            })
            .collect();
        Ok(NoiseSchedule {
            beta,
            alpha,
            alpha_bar,
            posterior_var,
        })
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn check(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(Error::Timestep {
                t,
                max: self.steps(),
            });
        }
        Ok(t - 1)
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn posterior_vars(&self) -> &[f64] {
        &self.posterior_var
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.beta[self.check(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(self.alpha[self.check(t)?])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bar[self.check(t)?])
    }

    /// `alpha_bar(t - 1)`, with `alpha_bar(0) = 1`.
    pub fn alpha_bar_prev(&self, t: usize) -> Result<f64> {
        let i = self.check(t)?;
        Ok(if i == 0 { 1.0 } else { self.alpha_bar[i - 1] })
    }

    pub fn posterior_var(&self, t: usize) -> Result<f64> {
        Ok(self.posterior_var[self.check(t)?])
    }

    /// Evenly spaced sub-schedule of `n` steps for fast sampling.
    pub fn strided(&self, n: usize) -> Result<StridedSchedule> {
        if n == 0 || n > self.steps() {
            return Err(Error::Config(format!(
                "strided sampling needs 1..={} steps, got {n}",
                self.steps()
            )));
        }
        let timesteps: Vec<usize> = (1..=n)
            .map(|k| ((k * self.steps()) as f64 / n as f64).round() as usize)
            .collect();
        let abar: Vec<f64> = timesteps.iter().map(|&t| self.alpha_bar[t - 1]).collect();
        Ok(StridedSchedule {
            schedule: NoiseSchedule::from_alpha_bar(&abar)?,
            timesteps,
        })
    }
}

/// A sub-sampled schedule: step `k` of `schedule` corresponds to timestep
/// `timesteps[k - 1]` of the full schedule the model was trained on.
#[derive(Clone, Debug, PartialEq)]
pub struct StridedSchedule {
    pub schedule: NoiseSchedule,
    pub timesteps: Vec<usize>,
}

/// What the denoiser's raw output represents.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictionKind {
    X,
    #[default]
    Eps,
    V,
}

/// Loss weight `w`: 1 for x-prediction, `abar/(1-abar)` for noise
/// prediction, `1 + abar/(1-abar)` for v-prediction.
pub fn loss_weight(t: usize, kind: PredictionKind, sched: &NoiseSchedule) -> Result<f64> {
    let ab = sched.alpha_bar(t)?;
    let snr = ab / (1.0 - ab);
    Ok(match kind {
        PredictionKind::X => 1.0,
        PredictionKind::Eps => snr,
        PredictionKind::V => 1.0 + snr,
    })
}

/// Coefficients `(a, b)` with `x0_hat = a * x_t + b * output`.
pub fn x0_coefficients(
    t: usize,
    kind: PredictionKind,
    sched: &NoiseSchedule,
) -> Result<(f64, f64)> {
    let ab = sched.alpha_bar(t)?;
    let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(match kind {
        PredictionKind::X => (0.0, 1.0),
        PredictionKind::Eps => (1.0 / s, -n / s),
        PredictionKind::V => (s, -n),
    })
}

/// The quantity a model of the given kind is trained to output.
pub fn prediction_target<T: Element>(
    x0: &FeatureMap<T>,
    eps: &FeatureMap<T>,
    t: usize,
    kind: PredictionKind,
    sched: &NoiseSchedule,
) -> Result<FeatureMap<T>> {
    let ab = sched.alpha_bar(t)?;
    match kind {
        PredictionKind::X => Ok(x0.clone()),
        PredictionKind::Eps => Ok(eps.clone()),
        PredictionKind::V => {
            let (s, n) = (
                T::from_f64_lossy(ab.sqrt()),
                T::from_f64_lossy((1.0 - ab).sqrt()),
            );
            eps.zip_map(x0, |e, x| s * e - n * x)
        }
    }
}

/// Convert a raw model output to an estimate of `x0`.
pub fn to_x0<T: Element>(
    x_t: &FeatureMap<T>,
    output: &FeatureMap<T>,
    t: usize,
    kind: PredictionKind,
    sched: &NoiseSchedule,
) -> Result<FeatureMap<T>> {
    let (a, b) = x0_coefficients(t, kind, sched)?;
    if kind == PredictionKind::X {
        output.expect_shape(x_t.shape(), "x0 conversion")?;
        return Ok(output.clone());
    }
    let (a, b) = (T::from_f64_lossy(a), T::from_f64_lossy(b));
    x_t.zip_map(output, |x, o| a * x + b * o)
}

/// `sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps`.
pub fn q_sample<T: Element>(
    x0: &FeatureMap<T>,
    t: usize,
    eps: &FeatureMap<T>,
    sched: &NoiseSchedule,
) -> Result<FeatureMap<T>> {
    let ab = sched.alpha_bar(t)?;
    mix(x0, eps, ab)
}

/// [`q_sample`] with a separate timestep for every batch item.
pub fn q_sample_each<T: Element>(
    x0: &FeatureMap<T>,
    ts: &[usize],
    eps: &FeatureMap<T>,
    sched: &NoiseSchedule,
) -> Result<FeatureMap<T>> {
    x0.expect_shape(eps.shape(), "q_sample noise")?;
    if ts.len() != x0.shape()[0] {
        return Err(Error::shape(
            "q_sample timesteps",
            &[x0.shape()[0]],
            &[ts.len()],
        ));
    }
    let items = x0
        .split_batch()
        .iter()
        .zip(eps.split_batch())
        .zip(ts)
        .map(|((x, e), &t)| q_sample(x, t, &e, sched))
        .collect::<Result<Vec<_>>>()?;
    FeatureMap::concat_batch(&items.iter().collect::<Vec<_>>())
}

/// `sqrt(abar) * x0 + sqrt(1 - abar) * eps` for an explicit `abar` in `[0, 1]`.
pub fn mix<T: Element>(
    x0: &FeatureMap<T>,
    eps: &FeatureMap<T>,
    alpha_bar: f64,
) -> Result<FeatureMap<T>> {
    if !(0.0..=1.0).contains(&alpha_bar) {
        return Err(Error::Config(format!(
            "alpha_bar {alpha_bar} outside [0, 1]"
        )));
    }
    let a = T::from_f64_lossy(alpha_bar.sqrt());
    let b = T::from_f64_lossy((1.0 - alpha_bar).sqrt());
    x0.zip_map(eps, |x, e| a * x + b * e)
}

/// Anything that maps `(x_t, t, control)` to a raw prediction of the same shape.
pub trait Denoiser<T: Element = f32> {
    fn predict(
        &self,
        x_t: &FeatureMap<T>,
        t: &[usize],
        control: Option<&FeatureMap<T>>,
    ) -> Result<FeatureMap<T>>;
}

impl<T, F> Denoiser<T> for F
where
    T: Element,
    F: Fn(&FeatureMap<T>, &[usize], Option<&FeatureMap<T>>) -> Result<FeatureMap<T>>,
{
    fn predict(
        &self,
        x_t: &FeatureMap<T>,
        t: &[usize],
        control: Option<&FeatureMap<T>>,
    ) -> Result<FeatureMap<T>> {
        self(x_t, t, control)
    }
}

/// `w(t, kind) * mean((x0 - x0_hat)^2)` where `x0_hat` is the model output
/// converted to data space, so every prediction kind shares one target.
#[allow(clippy::too_many_arguments)]
pub fn diffusion_loss<T: Element, D: Denoiser<T> + ?Sized>(
    x0: &FeatureMap<T>,
    t: usize,
    control: Option<&FeatureMap<T>>,
    model: &D,
    kind: PredictionKind,
    sched: &NoiseSchedule,
    eps: &FeatureMap<T>,
) -> Result<f64> {
    x0.expect_shape(eps.shape(), "diffusion_loss noise")?;
    let x_t = q_sample(x0, t, eps, sched)?;
    let batch = x0.shape()[0];
    let out = model.predict(&x_t, &vec![t; batch], control)?;
    out.expect_shape(x0.shape(), "denoiser output")?;
    let x0_hat = to_x0(&x_t, &out, t, kind, sched)?;
    let sq: f64 = x0
        .data()
        .iter()
        .zip(x0_hat.data())
        .map(|(&a, &b)| {
            let d = (a - b).to_f64().unwrap();
            d * d
        })
        .sum();
    Ok(loss_weight(t, kind, sched)? * sq / x0.numel() as f64)
}

/// Posterior mean coefficients `(c_x0, c_xt)` of `q(x_{t-1} | x_t, x0)`.
pub fn posterior_coefficients(t: usize, sched: &NoiseSchedule) -> Result<(f64, f64)> {
    let ab = sched.alpha_bar(t)?;
    let ab_prev = sched.alpha_bar_prev(t)?;
    let beta = sched.beta(t)?;
    let alpha = sched.alpha(t)?;
    Ok((
        ab_prev.sqrt() * beta / (1.0 - ab),
        alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab),
    ))
}

/// One reverse step: `mu(x0_hat, x_t) + sqrt(posterior_var_t) * noise`.
/// At `t = 1` the variance is zero and `noise` is not read.
pub fn ddpm_step<T: Element>(
    x_t: &FeatureMap<T>,
    t: usize,
    x0_hat: &FeatureMap<T>,
    noise: &FeatureMap<T>,
    sched: &NoiseSchedule,
) -> Result<FeatureMap<T>> {
    let (c0, ct) = posterior_coefficients(t, sched)?;
    let var = sched.posterior_var(t)?;
    let (c0, ct) = (T::from_f64_lossy(c0), T::from_f64_lossy(ct));
    let mean = x0_hat.zip_map(x_t, |a, b| c0 * a + ct * b)?;
    if var == 0.0 {
        return Ok(mean);
    }
    let sd = T::from_f64_lossy(var.sqrt());
    mean.zip_map(noise, |m, n| m + sd * n)
}

/// Ancestral sampling over a strided schedule.
///
/// `x_init` is the starting noise; `noise_for_step(k)` supplies the Gaussian
/// draw for sub-step `k` (it is never called for the final step). Data-space
/// estimates are clipped to `[-1, 1]` before every step.
pub fn ancestral_sample<T: Element, D: Denoiser<T> + ?Sized>(
    model: &D,
    control: Option<&FeatureMap<T>>,
    kind: PredictionKind,
    strided: &StridedSchedule,
    x_init: FeatureMap<T>,
    mut noise_for_step: impl FnMut(usize) -> FeatureMap<T>,
) -> Result<FeatureMap<T>> {
    let sched = &strided.schedule;
    let batch = x_init.shape()[0];
    let mut x = x_init;
    for k in (1..=sched.steps()).rev() {
        let t = strided.timesteps[k - 1];
        let out = model.predict(&x, &vec![t; batch], control)?;
        let x0_hat = to_x0(&x, &out, k, kind, sched)?.map(|v| v.max(-T::one()).min(T::one()));
        x = if k == 1 {
            ddpm_step(&x, k, &x0_hat, &x0_hat, sched)?
        } else {
            let noise = noise_for_step(k);
            ddpm_step(&x, k, &x0_hat, &noise, sched)?
        };
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fm(v: &[f64]) -> FeatureMap<f64> {
        FeatureMap::new(vec![1, 1, 1, v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn rejects_bad_schedules() {
        assert!(make_schedule(0, 0.1, 0.2, ScheduleKind::Linear).is_err());
        assert!(make_schedule(10, 0.0, 0.2, ScheduleKind::Linear).is_err());
        assert!(make_schedule(10, 0.3, 0.2, ScheduleKind::Linear).is_err());
        assert!(make_schedule(10, 0.1, 1.0, ScheduleKind::Linear).is_err());
    }

    #[test]
    fn timestep_range_is_enforced() {
        let s = make_schedule(4, 0.1, 0.2, ScheduleKind::Linear).unwrap();
        assert!(matches!(
            s.alpha_bar(0),
            Err(Error::Timestep { t: 0, max: 4 })
        ));
        assert!(s.alpha_bar(5).is_err());
        assert!(loss_weight(5, PredictionKind::X, &s).is_err());
        let x = fm(&[1.0]);
        assert!(q_sample(&x, 0, &x, &s).is_err());
        assert!(ddpm_step(&x, 5, &x, &x, &s).is_err());
    }

    #[test]
    fn q_sample_rejects_shape_mismatch() {
        let s = make_schedule(4, 0.1, 0.2, ScheduleKind::Linear).unwrap();
        assert!(matches!(
            q_sample(&fm(&[1.0]), 1, &fm(&[1.0, 2.0]), &s),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn prediction_targets_convert_back_to_x0() {
        let s = make_schedule(50, 1e-3, 0.05, ScheduleKind::Linear).unwrap();
        let x0 = fm(&[0.3, -0.7, 1.0]);
        let eps = fm(&[1.2, 0.1, -0.4]);
        for kind in [PredictionKind::X, PredictionKind::Eps, PredictionKind::V] {
            for t in [1, 17, 50] {
                let xt = q_sample(&x0, t, &eps, &s).unwrap();
                let target = prediction_target(&x0, &eps, t, kind, &s).unwrap();
                let back = to_x0(&xt, &target, t, kind, &s).unwrap();
                assert!(back.max_abs_diff(&x0) < 1e-12, "{kind:?} t={t}");
            }
        }
    }

    #[test]
    fn strided_schedule_keeps_alpha_bar_at_selected_steps() {
        let s = make_schedule(1000, 1e-4, 0.02, ScheduleKind::Linear).unwrap();
        let st = s.strided(20).unwrap();
        assert_eq!(st.timesteps.first(), Some(&50));
        assert_eq!(st.timesteps.last(), Some(&1000));
        for (k, &t) in st.timesteps.iter().enumerate() {
            let want = s.alpha_bar(t).unwrap();
            assert!((st.schedule.alpha_bar(k + 1).unwrap() - want).abs() <= 1e-12 * want);
        }
    }
}
