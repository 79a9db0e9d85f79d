use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::adherence::adherence_each;
use super::selector::{resolve_selector, ParamSelector};
use crate::backbone::{BackboneModel, Conditioning};
use crate::control::{Architecture, ConditionedModel};
use crate::datagen::Dataset;
use crate::diffusion::{
    ancestral_sample, loss_weight, mix, x0_coefficients, Denoiser, NoiseSchedule, PredictionKind,
};
use crate::error::{Error, Result};
use crate::graph::{GradMode, Graph, Var};
use crate::params::ParamStore;
use crate::tensor::{FeatureMap, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub prediction_kind: PredictionKind,
    pub architecture: Architecture,
    /// Backbone parameters unfrozen for the extractor architecture.
    #[serde(default)]
    pub selector: ParamSelector,
    pub eval_every: usize,
    pub adherence_threshold: f64,
    /// Held-out controls scored at each evaluation.
    #[serde(default = "default_eval_count")]
    pub eval_count: usize,
    /// Reverse steps used when sampling for evaluation.
    #[serde(default = "default_sample_steps")]
    pub sample_steps: usize,
    /// Seed of the sampling noise used at every evaluation.
    #[serde(default)]
    pub eval_seed: u64,
    /// End the run at the first evaluation that reaches the threshold.
    #[serde(default)]
    pub stop_at_threshold: bool,
}

fn default_eval_count() -> usize {
    16
}

fn default_sample_steps() -> usize {
    20
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 3000,
            batch_size: 8,
            learning_rate: 0.1,
            seed: 0,
            prediction_kind: PredictionKind::X,
            architecture: Architecture::ControlNeXt,
            selector: ParamSelector::default(),
            eval_every: 100,
            adherence_threshold: 0.6,
            eval_count: default_eval_count(),
            sample_steps: default_sample_steps(),
            eval_seed: 0,
            stop_at_threshold: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("train.{m}")));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and non-negative");
        }
        if self.eval_every == 0 || self.eval_count == 0 || self.sample_steps == 0 {
            return bad("eval_every, eval_count and sample_steps must be positive");
        }
        if !(self.adherence_threshold > 0.0 && self.adherence_threshold < 1.0) {
            return bad("adherence_threshold must lie in (0, 1)");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    /// Mean training loss since the previous evaluation.
    pub train_loss: f64,
    pub adherence: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceTrace {
    pub threshold: f64,
    pub records: Vec<EvalRecord>,
}

impl ConvergenceTrace {
    pub fn new(threshold: f64) -> Self {
        ConvergenceTrace {
            threshold,
            records: Vec::new(),
        }
    }

    /// First evaluated step whose adherence reaches the threshold.
    pub fn steps_to_threshold(&self) -> Option<usize> {
        self.records
            .iter()
            .find(|r| r.adherence >= self.threshold)
            .map(|r| r.step)
    }

    pub fn final_adherence(&self) -> Option<f64> {
        self.records.last().map(|r| r.adherence)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss,adherence\n");
        for r in &self.records {
            s.push_str(&format!("{},{},{}\n", r.step, r.train_loss, r.adherence));
        }
        s
    }

    pub fn from_csv(text: &str, threshold: f64) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some("step,loss,adherence") {
            return Err(Error::Report(
                "trace CSV must start with `step,loss,adherence`".into(),
            ));
        }
        let mut records = Vec::new();
        for (i, line) in lines.enumerate() {
            let bad = || Error::Report(format!("malformed trace row {}: `{line}`", i + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 3 {
                return Err(bad());
            }
            records.push(EvalRecord {
                step: f[0].parse().map_err(|_| bad())?,
                train_loss: f[1].parse().map_err(|_| bad())?,
                adherence: f[2].parse().map_err(|_| bad())?,
            });
        }
        Ok(ConvergenceTrace { threshold, records })
    }
}

pub fn gaussian(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> FeatureMap {
    FeatureMap::from_fn(shape, |_| rng.sample::<f32, _>(StandardNormal))
}

/// Per-item noise streams: item `i` of a sampling run with `seed` always
/// draws the same noise regardless of how the run is batched.
pub fn item_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Draw images with `sample_steps` strided ancestral steps. Item `b` uses
/// noise stream `first_index + b`.
#[allow(clippy::too_many_arguments)]
pub fn sample_images<D: Denoiser + ?Sized>(
    model: &D,
    control: Option<&FeatureMap>,
    count: usize,
    image_size: usize,
    kind: PredictionKind,
    sched: &NoiseSchedule,
    sample_steps: usize,
    seed: u64,
    first_index: u64,
) -> Result<FeatureMap> {
    let strided = sched.strided(sample_steps)?;
    let mut rngs: Vec<ChaCha8Rng> = (0..count as u64)
        .map(|i| item_rng(seed, first_index + i))
        .collect();
    let shape = [1, 1, image_size, image_size];
    let draw = |rngs: &mut Vec<ChaCha8Rng>| -> FeatureMap {
        let items: Vec<FeatureMap> = rngs.iter_mut().map(|r| gaussian(r, shape)).collect();
        FeatureMap::concat_batch(&items.iter().collect::<Vec<_>>()).expect("uniform item shapes")
    };
    let x_init = draw(&mut rngs);
    ancestral_sample(model, control, kind, &strided, x_init, |_| draw(&mut rngs))
}

/// Mean adherence of samples generated for the first `count` held-out controls.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_adherence(
    model: &ConditionedModel,
    eval: &Dataset,
    count: usize,
    batch: usize,
    kind: PredictionKind,
    sched: &NoiseSchedule,
    sample_steps: usize,
    seed: u64,
) -> Result<f64> {
    let count = count.min(eval.len());
    let mut scores = Vec::with_capacity(count);
    for start in (0..count).step_by(batch.max(1)) {
        let idx: Vec<usize> = (start..(start + batch).min(count)).collect();
        let (_, controls) = eval.batch(&idx)?;
        let images = sample_images(
            model,
            Some(&controls),
            idx.len(),
            eval.key.size,
            kind,
            sched,
            sample_steps,
            seed,
            start as u64,
        )?;
        scores.extend(adherence_each(&images, &controls)?);
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Data-space diffusion loss of one batch as a graph scalar.
#[allow(clippy::too_many_arguments)]
fn batch_loss<'a>(
    g: &mut Graph<'a, f32>,
    forward: impl FnOnce(&mut Graph<'a, f32>, Var, &[usize]) -> Result<Var>,
    x0: &FeatureMap,
    ts: &[usize],
    eps: &FeatureMap,
    kind: PredictionKind,
    sched: &NoiseSchedule,
) -> Result<Var> {
    let items: Vec<FeatureMap> = x0
        .split_batch()
        .iter()
        .zip(eps.split_batch())
        .zip(ts)
        .map(|((x, e), &t)| mix(x, &e, sched.alpha_bar(t)?))
        .collect::<Result<_>>()?;
    let x_t = FeatureMap::concat_batch(&items.iter().collect::<Vec<_>>())?;
    let mut a = Vec::with_capacity(ts.len());
    let mut b = Vec::with_capacity(ts.len());
    let mut w = Vec::with_capacity(ts.len());
    for &t in ts {
        let (ca, cb) = x0_coefficients(t, kind, sched)?;
        a.push(ca as f32);
        b.push(cb as f32);
        w.push(loss_weight(t, kind, sched)? as f32);
    }
    let per = x_t.numel() / ts.len();
    let offset = FeatureMap::from_fn(x_t.shape().to_vec(), |i| a[i / per] * x_t.data()[i]);
    let xv = g.input(x_t);
    let out = forward(g, xv, ts)?;
    let x0_hat = g.scale_add(out, b, &offset)?;
    g.weighted_mse(x0_hat, x0.clone(), w)
}

struct StepDraw {
    indices: Vec<usize>,
    ts: Vec<usize>,
    eps: FeatureMap,
}

fn draw_step(
    rng: &mut ChaCha8Rng,
    data_len: usize,
    batch: usize,
    steps: usize,
    size: usize,
) -> StepDraw {
    let indices = (0..batch).map(|_| rng.gen_range(0..data_len)).collect();
    let ts = (0..batch).map(|_| rng.gen_range(1..=steps)).collect();
    let eps = gaussian(rng, [batch, 1, size, size]);
    StepDraw { indices, ts, eps }
}

/// Names of every parameter the run updates, across backbone and control.
pub fn trainable_names(cfg: &TrainConfig, model: &ConditionedModel) -> Result<BTreeSet<String>> {
    let mut names = match cfg.architecture {
        Architecture::ControlNet => BTreeSet::new(),
        Architecture::ControlNeXt => {
            resolve_selector(&cfg.selector, &model.backbone.params.registry())?.names
        }
    };
    names.extend(model.control.registry().names().map(str::to_string));
    Ok(names)
}

fn apply_sgd(store: &mut ParamStore<f32>, grads: Vec<(crate::params::ParamId, Tensor)>, lr: f32) {
    for (id, grad) in grads {
        for (p, g) in store.value_mut(id).data_mut().iter_mut().zip(grad.data()) {
            *p -= lr * g;
        }
    }
}

pub struct TrainOutcome {
    pub model: ConditionedModel,
    pub trace: ConvergenceTrace,
}

/// Minimize the conditional diffusion loss with plain SGD.
///
/// The extractor architecture trains the extractor, the cross-norm scale and
/// the selected backbone subset; the branch architecture trains the whole
/// branch with the backbone frozen. `on_eval` observes each trace record.
pub fn train(
    cfg: &TrainConfig,
    sched: &NoiseSchedule,
    mut model: ConditionedModel,
    train_set: &Dataset,
    eval_set: &Dataset,
    mut on_eval: impl FnMut(&EvalRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if model.control.architecture() != cfg.architecture {
        return Err(Error::Config(format!(
            "train.architecture is {} but the model carries a {} module",
            cfg.architecture.label(),
            model.control.architecture().label()
        )));
    }
    let size = model.backbone.backbone.config.image_size;
    if train_set.key.size != size || eval_set.key.size != size {
        return Err(Error::Config(format!(
            "dataset size {} / {} does not match image size {size}",
            train_set.key.size, eval_set.key.size
        )));
    }
    let names = trainable_names(cfg, &model)?;
    model.backbone.params.set_all_trainable(false);
    let backbone_names: BTreeSet<String> = model
        .backbone
        .params
        .registry()
        .names()
        .filter(|n| names.contains(*n))
        .map(str::to_string)
        .collect();
    model.backbone.params.set_trainable_set(&backbone_names)?;
    for store in model.control.stores_mut() {
        store.set_all_trainable(true);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trace = ConvergenceTrace::new(cfg.adherence_threshold);
    let mut loss_sum = 0.0;
    let mut loss_n = 0usize;
    let lr = cfg.learning_rate as f32;
    for step in 1..=cfg.steps {
        let draw = draw_step(
            &mut rng,
            train_set.len(),
            cfg.batch_size,
            sched.steps(),
            size,
        );
        let (x0, controls) = train_set.batch(&draw.indices)?;
        let (loss, backbone_grads, control_grads) = {
            let mut g = Graph::new(GradMode::Trainable);
            let c = g.input(controls);
            let m = &model;
            let l = batch_loss(
                &mut g,
                |g, x, ts| Ok(m.graph(g, x, ts, Some(c))?.output),
                &x0,
                &draw.ts,
                &draw.eps,
                cfg.prediction_kind,
                sched,
            )?;
            let loss = g.value(l).data()[0] as f64;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            let grads = g.backward(l)?;
            let collect = |store: &ParamStore<f32>| {
                store
                    .ids()
                    .filter(|&id| store.is_trainable(id))
                    .filter_map(|id| g.param_grad(&grads, store, id).map(|t| (id, t.clone())))
                    .collect::<Vec<_>>()
            };
            let bg = collect(&m.backbone.params);
            let cg: Vec<_> = m.control.stores().into_iter().map(collect).collect();
            (loss, bg, cg)
        };
        apply_sgd(&mut model.backbone.params, backbone_grads, lr);
        for (store, grads) in model.control.stores_mut().into_iter().zip(control_grads) {
            apply_sgd(store, grads, lr);
        }
        loss_sum += loss;
        loss_n += 1;
        if step % cfg.eval_every == 0 {
            let adherence = evaluate_adherence(
                &model,
                eval_set,
                cfg.eval_count,
                cfg.batch_size,
                cfg.prediction_kind,
                sched,
                cfg.sample_steps,
                cfg.eval_seed,
            )?;
            let rec = EvalRecord {
                step,
                train_loss: loss_sum / loss_n as f64,
                adherence,
            };
            log::info!(
                "{} seed {} step {step}: loss {:.5} adherence {adherence:.4}",
                cfg.architecture.label(),
                cfg.seed,
                rec.train_loss
            );
            on_eval(&rec);
            trace.records.push(rec);
            loss_sum = 0.0;
            loss_n = 0;
            if cfg.stop_at_threshold && adherence >= cfg.adherence_threshold {
                break;
            }
        }
    }
    Ok(TrainOutcome { model, trace })
}

/// Unconditional training of the backbone with Adam, standing in for a
/// large pretrained generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 1500,
            batch_size: 8,
            learning_rate: 2e-3,
            seed: 0,
        }
    }
}

struct Adam {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: i32,
}

impl Adam {
    const B1: f32 = 0.9;
    const B2: f32 = 0.999;
    const EPS: f32 = 1e-8;

    fn new(store: &ParamStore<f32>) -> Self {
        let zeros = || {
            store
                .ids()
                .map(|id| vec![0.0; store.value(id).numel()])
                .collect()
        };
        Adam {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    fn step(
        &mut self,
        store: &mut ParamStore<f32>,
        grads: Vec<(crate::params::ParamId, Tensor)>,
        lr: f32,
    ) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for (id, grad) in grads {
            let k = id.index();
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, (p, &g)) in store
                .value_mut(id)
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .enumerate()
            {
                m[i] = Self::B1 * m[i] + (1.0 - Self::B1) * g;
                v[i] = Self::B2 * v[i] + (1.0 - Self::B2) * g * g;
                *p -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + Self::EPS);
            }
        }
    }
}

/// Returns the trained backbone and the per-step losses.
pub fn pretrain_backbone(
    cfg: &PretrainConfig,
    kind: PredictionKind,
    sched: &NoiseSchedule,
    mut model: BackboneModel,
    data: &Dataset,
) -> Result<(BackboneModel, Vec<f64>)> {
    if cfg.batch_size == 0 || !(cfg.learning_rate >= 0.0 && cfg.learning_rate.is_finite()) {
        return Err(Error::Config(
            "pretrain.batch_size and learning_rate must be valid".into(),
        ));
    }
    let size = model.backbone.config.image_size;
    if data.key.size != size {
        return Err(Error::Config(format!(
            "dataset size {} does not match image size {size}",
            data.key.size
        )));
    }
    model.params.set_all_trainable(true);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(&model.params);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let draw = draw_step(&mut rng, data.len(), cfg.batch_size, sched.steps(), size);
        let (x0, _) = data.batch(&draw.indices)?;
        let (loss, grads) = {
            let mut g = Graph::new(GradMode::Trainable);
            let m = &model;
            let l = batch_loss(
                &mut g,
                |g, x, ts| {
                    Ok(m.backbone
                        .forward_graph(g, &m.params, x, ts, Conditioning::None)?
                        .output)
                },
                &x0,
                &draw.ts,
                &draw.eps,
                kind,
                sched,
            )?;
            let loss = g.value(l).data()[0] as f64;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            let grads = g.backward(l)?;
            let collected: Vec<_> = m
                .params
                .ids()
                .filter_map(|id| g.param_grad(&grads, &m.params, id).map(|t| (id, t.clone())))
                .collect();
            (loss, collected)
        };
        adam.step(&mut model.params, grads, cfg.learning_rate as f32);
        if step % 100 == 0 {
            log::info!("pretrain step {step}: loss {loss:.5}");
        }
        losses.push(loss);
    }
    Ok((model, losses))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{build_backbone, BackboneConfig};
    use crate::control::{
        build_controlnet_branch, build_extractor, ControlExtractorConfig, ControlModule,
        ControlNetBranchConfig, CrossNormState,
    };
    use crate::datagen::{ControlKind, DatasetKey};
    use crate::diffusion::{make_schedule, ScheduleKind};

    fn tiny() -> (
        ConditionedModel,
        ConditionedModel,
        Dataset,
        Dataset,
        NoiseSchedule,
    ) {
        let bcfg = BackboneConfig {
            in_channels: 1,
            base_channels: 4,
            channel_multipliers: vec![1, 2],
            mid_channels: 8,
            num_res_blocks_per_level: 1,
            time_embed_dim: 8,
            image_size: 16,
        };
        let (bb, _, port) = build_backbone(&bcfg, 1).unwrap();
        let ecfg = ControlExtractorConfig {
            in_channels: 1,
            num_blocks: 1,
            channels_per_stage: vec![4, 4],
            downsample_to: port.size,
            out_channels: port.channels,
            image_size: 16,
        };
        let (ext, _) = build_extractor(&ecfg, 2).unwrap();
        let (branch, _) =
            build_controlnet_branch(&bb, &ControlNetBranchConfig::default(), 3).unwrap();
        let next = ConditionedModel {
            backbone: bb.clone(),
            control: ControlModule::ControlNeXt {
                extractor: ext,
                cross_norm: CrossNormState::new(port.channels).unwrap(),
            },
        };
        let net = ConditionedModel {
            backbone: bb,
            control: ControlModule::ControlNet(branch),
        };
        let key = DatasetKey {
            seed: 0,
            count: 16,
            size: 16,
            kind: ControlKind::Mask,
        };
        let train_set = Dataset::generate(key).unwrap();
        let eval_set = Dataset::generate(DatasetKey {
            seed: 1,
            count: 4,
            ..key
        })
        .unwrap();
        let sched = make_schedule(100, 1e-3, 0.05, ScheduleKind::Linear).unwrap();
        (next, net, train_set, eval_set, sched)
    }

    fn cfg(arch: Architecture, steps: usize, lr: f64) -> TrainConfig {
        TrainConfig {
            steps,
            batch_size: 2,
            learning_rate: lr,
            architecture: arch,
            eval_every: 2,
            eval_count: 2,
            sample_steps: 4,
            ..TrainConfig::default()
        }
    }

    fn all_params(m: &ConditionedModel) -> Vec<(String, Tensor)> {
        let mut v: Vec<_> = m
            .backbone
            .params
            .iter()
            .map(|(e, t)| (e.name.clone(), t.clone()))
            .collect();
        for s in m.control.stores() {
            v.extend(s.iter().map(|(e, t)| (e.name.clone(), t.clone())));
        }
        v
    }

    #[test]
    fn zero_steps_and_zero_rate_leave_parameters_untouched() {
        let (next, net, tr, ev, sched) = tiny();
        for (model, arch) in [
            (next, Architecture::ControlNeXt),
            (net, Architecture::ControlNet),
        ] {
            let before = all_params(&model);
            let out = train(&cfg(arch, 0, 0.1), &sched, model.clone(), &tr, &ev, |_| {}).unwrap();
            assert!(out.trace.records.is_empty());
            assert_eq!(out.trace.steps_to_threshold(), None);
            assert!(before
                .iter()
                .zip(all_params(&out.model))
                .all(|(a, b)| a.0 == b.0 && a.1.bit_eq(&b.1)));
            let out = train(&cfg(arch, 3, 0.0), &sched, model, &tr, &ev, |_| {}).unwrap();
            assert_eq!(out.trace.records.len(), 1);
            assert!(before
                .iter()
                .zip(all_params(&out.model))
                .all(|(a, b)| a.1.bit_eq(&b.1)));
        }
    }

    #[test]
    fn frozen_parameters_stay_bit_identical_and_runs_repeat() {
        let (next, net, tr, ev, sched) = tiny();
        for (model, arch) in [
            (next, Architecture::ControlNeXt),
            (net, Architecture::ControlNet),
        ] {
            let c = cfg(arch, 4, 0.05);
            let trained = trainable_names(&c, &model).unwrap();
            let before = all_params(&model);
            let a = train(&c, &sched, model.clone(), &tr, &ev, |_| {}).unwrap();
            let b = train(&c, &sched, model, &tr, &ev, |_| {}).unwrap();
            assert_eq!(a.trace, b.trace);
            let mut changed = 0;
            for ((name, init), ((_, pa), (_, pb))) in before
                .iter()
                .zip(all_params(&a.model).into_iter().zip(all_params(&b.model)))
            {
                assert!(pa.bit_eq(&pb));
                if trained.contains(name) {
                    changed += (!pa.bit_eq(init)) as usize;
                } else {
                    assert!(pa.bit_eq(init), "{name} changed");
                }
            }
            assert!(changed > 0);
        }
    }

    #[test]
    fn diverging_run_reports_the_step() {
        let (next, _, tr, ev, sched) = tiny();
        let mut c = cfg(Architecture::ControlNeXt, 50, 1e30);
        c.eval_every = 1000;
        match train(&c, &sched, next, &tr, &ev, |_| {}) {
            Err(Error::NonFiniteLoss { step }) => assert!(step > 1),
            other => panic!(
                "expected a non-finite loss, got {:?}",
                other.map(|o| o.trace)
            ),
        }
    }

    #[test]
    fn architecture_mismatch_is_rejected() {
        let (next, _, tr, ev, sched) = tiny();
        assert!(train(
            &cfg(Architecture::ControlNet, 1, 0.1),
            &sched,
            next,
            &tr,
            &ev,
            |_| {}
        )
        .is_err());
    }

    #[test]
    fn trace_csv_round_trip() {
        let t = ConvergenceTrace {
            threshold: 0.6,
            records: vec![
                EvalRecord {
                    step: 100,
                    train_loss: 0.25,
                    adherence: 0.5,
                },
                EvalRecord {
                    step: 200,
                    train_loss: 0.125,
                    adherence: 0.61,
                },
            ],
        };
        assert_eq!(t.steps_to_threshold(), Some(200));
        let csv = t.to_csv();
        assert!(csv.starts_with("step,loss,adherence\n100,0.25,0.5\n"));
        assert_eq!(ConvergenceTrace::from_csv(&csv, 0.6).unwrap(), t);
    }

    #[test]
    fn pretraining_reduces_loss() {
        let (next, _, tr, _, sched) = tiny();
        let pc = PretrainConfig {
            steps: 60,
            batch_size: 4,
            learning_rate: 3e-3,
            seed: 0,
        };
        let (_, losses) =
            pretrain_backbone(&pc, PredictionKind::X, &sched, next.backbone, &tr).unwrap();
        let head: f64 = losses[..10].iter().sum();
        let tail: f64 = losses[50..].iter().sum();
        assert!(tail < head, "{head} -> {tail}");
    }
}
