//! The pipelines behind the command-line verbs.
//!
//! Every command takes a validated [`RunConfig`] and an output root. Shared
//! inputs (dataset splits, the pretrained backbone) are cached under
//! `<outdir>/cache/` keyed by everything that determines them.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use crate::archive::write_atomic;
use crate::backbone::{build_backbone, BackboneModel};
use crate::bench::{
    bench_latency, compare_traces, count_params, median_threshold_step, CompareReport,
    LatencyReport, ParamReport, StepFn, BASE_LABEL,
};
use crate::checkpoint::{
    build_control, control_seed, load_backbone, load_checkpoint, save_backbone, save_checkpoint,
    ModelSpec,
};
use crate::config::RunConfig;
use crate::control::{Architecture, ConditionedModel};
use crate::datagen::{Dataset, DatasetKey};
use crate::diffusion::Denoiser;
use crate::error::{Error, Result};
use crate::finetune::{
    adherence_each, gaussian, item_rng, pretrain_backbone, sample_images, train, trainable_names,
    ConvergenceTrace, TrainOutcome,
};
use crate::pgm;
use crate::tensor::FeatureMap;

pub const CHECKPOINT_FILE: &str = "checkpoint.cdar";
pub const TRACE_FILE: &str = "trace.csv";
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved";
pub const REPORTS_DIR: &str = "reports";

pub fn cache_dir(outdir: &Path) -> PathBuf {
    outdir.join("cache")
}

fn data_dir(outdir: &Path) -> PathBuf {
    cache_dir(outdir).join("data")
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

/// Timestamps live in a sidecar so report bodies stay reproducible.
fn write_meta(dir: &Path, command: &str, started: Instant) -> Result<()> {
    let created = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let meta = serde_json::json!({
        "command": command,
        "created_unix_seconds": created,
        "elapsed_seconds": started.elapsed().as_secs_f64(),
        "version": env!("CARGO_PKG_VERSION"),
    });
    write_text(&dir.join("meta.json"), &format!("{meta:#}\n"))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Build outputs in a hidden sibling and move them into place only on success.
fn publish<T>(final_dir: &Path, build: impl FnOnce(&Path) -> Result<T>) -> Result<T> {
    let parent = final_dir.parent().unwrap_or(Path::new("."));
    let name = final_dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let partial = parent.join(format!(".{name}.partial"));
    if partial.exists() {
        fs::remove_dir_all(&partial).map_err(|e| Error::io(&partial, e))?;
    }
    create_dir(&partial)?;
    let value = match build(&partial) {
        Ok(v) => v,
        Err(e) => {
            let _ = fs::remove_dir_all(&partial);
            return Err(e);
        }
    };
    if final_dir.exists() {
        fs::remove_dir_all(final_dir).map_err(|e| Error::io(final_dir, e))?;
    }
    fs::rename(&partial, final_dir).map_err(|e| Error::io(final_dir, e))?;
    Ok(value)
}

pub struct Splits {
    pub train: Dataset,
    pub eval: Dataset,
}

pub fn load_splits(cfg: &RunConfig, outdir: &Path) -> Result<Splits> {
    let dir = data_dir(outdir);
    let (train, _) = Dataset::load_or_generate(&dir, cfg.data.train_key())?;
    let (eval, _) = Dataset::load_or_generate(&dir, cfg.data.eval_key())?;
    Ok(Splits { train, eval })
}

/// The pretrained backbone for `cfg`, trained once and then read from the cache.
pub fn pretrained_backbone(
    cfg: &RunConfig,
    outdir: &Path,
    splits: &Splits,
) -> Result<BackboneModel> {
    let path = cache_dir(outdir).join(format!("pretrained-{}.cdar", cfg.pretrain_key()));
    if path.exists() {
        match load_backbone(&path, &cfg.backbone) {
            Ok(m) => return Ok(m),
            Err(e) => log::warn!("retraining backbone, cache unusable: {e}"),
        }
    }
    let (model, _, _) = build_backbone(&cfg.backbone, cfg.model_seed)?;
    let model = if cfg.pretrain.steps == 0 {
        model
    } else {
        log::info!("pretraining backbone for {} steps", cfg.pretrain.steps);
        let sched = cfg.diffusion.schedule()?;
        pretrain_backbone(
            &cfg.pretrain,
            cfg.train.prediction_kind,
            &sched,
            model,
            &splits.train,
        )?
        .0
    };
    save_backbone(&path, &ModelSpec::backbone_only(cfg), &model)?;
    Ok(model)
}

/// A fresh conditioned model for `cfg`'s architecture on top of `backbone`.
pub fn fresh_model(cfg: &RunConfig, backbone: BackboneModel) -> Result<ConditionedModel> {
    let control = build_control(
        cfg.architecture(),
        &backbone,
        &cfg.extractor,
        &cfg.controlnet,
        control_seed(cfg.model_seed, cfg.train.seed),
    )?;
    Ok(ConditionedModel { backbone, control })
}

/// Total and learnable parameters of the base model and both control architectures.
pub fn param_report(cfg: &RunConfig) -> Result<ParamReport> {
    let (backbone, base_reg, _) = build_backbone(&cfg.backbone, cfg.model_seed)?;
    let base_trainable: BTreeSet<String> = base_reg.names().map(str::to_string).collect();
    let mut regs = Vec::new();
    for arch in [Architecture::ControlNet, Architecture::ControlNeXt] {
        let mut c = cfg.clone();
        c.train.architecture = arch;
        let model = fresh_model(&c, backbone.clone())?;
        regs.push((arch, model.registry(), trainable_names(&c.train, &model)?));
    }
    let mut rows: Vec<(&str, _, _)> = vec![(BASE_LABEL, &base_reg, &base_trainable)];
    rows.extend(regs.iter().map(|(a, r, t)| (a.label(), r, t)));
    count_params(&rows)
}

fn train_run(cfg: &RunConfig, backbone: BackboneModel, splits: &Splits) -> Result<TrainOutcome> {
    let model = fresh_model(cfg, backbone)?;
    let sched = cfg.diffusion.schedule()?;
    train(
        &cfg.train,
        &sched,
        model,
        &splits.train,
        &splits.eval,
        |_| {},
    )
}

fn write_run(dir: &Path, cfg: &RunConfig, outcome: &TrainOutcome) -> Result<()> {
    save_checkpoint(
        &dir.join(CHECKPOINT_FILE),
        &ModelSpec::conditioned(cfg),
        &outcome.model,
    )?;
    write_text(&dir.join(TRACE_FILE), &outcome.trace.to_csv())
}

pub struct TrainArtifacts {
    pub run_dir: PathBuf,
    pub trace: ConvergenceTrace,
}

/// Fine-tune the configured architecture and write
/// `<outdir>/<run_name>/{checkpoint.cdar, trace.csv, config.resolved, reports/}`.
pub fn cmd_train(cfg: &RunConfig, outdir: &Path) -> Result<TrainArtifacts> {
    let started = Instant::now();
    cfg.validate().map_err(|e| e.in_stage("config"))?;
    let splits = load_splits(cfg, outdir).map_err(|e| e.in_stage("data"))?;
    let backbone = pretrained_backbone(cfg, outdir, &splits).map_err(|e| e.in_stage("pretrain"))?;
    let run_dir = outdir.join(&cfg.run_name);
    let trace = publish(&run_dir, |dir| {
        let outcome = train_run(cfg, backbone, &splits).map_err(|e| e.in_stage("train"))?;
        (|| {
            write_run(dir, cfg, &outcome)?;
            write_text(&dir.join(RESOLVED_CONFIG_FILE), &cfg.to_toml())?;
            let reports = dir.join(REPORTS_DIR);
            create_dir(&reports)?;
            let params = param_report(cfg)?;
            write_text(&reports.join("params.csv"), &params.to_csv())?;
            write_text(&reports.join("params.json"), &params.to_json())?;
            write_meta(&reports, "train", started)
        })()
        .map_err(|e| e.in_stage("write"))?;
        Ok(outcome.trace)
    })?;
    Ok(TrainArtifacts { run_dir, trace })
}

/// Where `sample` reads its control maps from.
#[derive(Clone, Debug)]
pub enum ControlSource {
    /// The first maps of a generated split.
    Split(DatasetKey),
    /// Graymap files; pixels at or above mid-gray are foreground.
    Files(Vec<PathBuf>),
}

pub struct SampleRequest {
    pub checkpoint: PathBuf,
    pub controls: ControlSource,
    pub count: usize,
    pub seed: u64,
    /// Sample without the control module (the plain backbone).
    pub unconditional: bool,
}

pub struct SampleOutcome {
    pub images: Vec<PathBuf>,
    pub adherence: Vec<f64>,
}

impl SampleOutcome {
    pub fn mean_adherence(&self) -> f64 {
        self.adherence.iter().sum::<f64>() / self.adherence.len().max(1) as f64
    }
}

fn read_controls(source: &ControlSource, count: usize, outdir: &Path) -> Result<FeatureMap> {
    match source {
        ControlSource::Split(key) => {
            let (ds, _) = Dataset::load_or_generate(&data_dir(outdir), *key)?;
            if count > ds.len() {
                return Err(Error::Config(format!(
                    "requested {count} controls but the split holds {}",
                    ds.len()
                )));
            }
            Ok(ds.batch(&(0..count).collect::<Vec<_>>())?.1)
        }
        ControlSource::Files(paths) => {
            if count > paths.len() {
                return Err(Error::Config(format!(
                    "requested {count} controls but {} files were given",
                    paths.len()
                )));
            }
            let maps = paths[..count]
                .iter()
                .map(|p| Ok(pgm::read(p)?.map(|v| if v >= 0.0 { 1.0 } else { 0.0 })))
                .collect::<Result<Vec<_>>>()?;
            FeatureMap::concat_batch(&maps.iter().collect::<Vec<_>>())
        }
    }
}

/// Draw one image per control and score it; writes `sample_NNNN.pgm` files and
/// `adherence.csv` into `dir`.
pub fn cmd_sample(req: &SampleRequest, outdir: &Path, dir: &Path) -> Result<SampleOutcome> {
    if req.count == 0 {
        return Err(Error::Config("sample count must be positive".into()).in_stage("config"));
    }
    let (spec, model) = load_checkpoint(&req.checkpoint).map_err(|e| e.in_stage("checkpoint"))?;
    let controls =
        read_controls(&req.controls, req.count, outdir).map_err(|e| e.in_stage("controls"))?;
    let size = spec.backbone.image_size;
    if controls.shape()[1..] != [1, size, size] {
        return Err(Error::shape(
            "control maps for this checkpoint",
            &[req.count, 1, size, size],
            controls.shape(),
        )
        .in_stage("controls"));
    }
    let sched = spec
        .diffusion
        .schedule()
        .map_err(|e| e.in_stage("checkpoint"))?;
    let run = || -> Result<(Vec<PathBuf>, Vec<f64>)> {
        create_dir(dir)?;
        let per_item = controls.split_batch();
        let (mut images, mut scores) = (Vec::new(), Vec::new());
        for start in (0..req.count).step_by(8) {
            let end = (start + 8).min(req.count);
            let c = FeatureMap::concat_batch(&per_item[start..end].iter().collect::<Vec<_>>())?;
            let denoiser: &dyn Denoiser = if req.unconditional {
                &model.backbone
            } else {
                &model
            };
            let out = sample_images(
                denoiser,
                (!req.unconditional).then_some(&c),
                end - start,
                size,
                spec.prediction_kind,
                &sched,
                spec.sample_steps,
                req.seed,
                start as u64,
            )?;
            scores.extend(adherence_each(&out, &c)?);
            for (k, item) in out.split_batch().iter().enumerate() {
                let path = dir.join(format!("sample_{:04}.pgm", start + k));
                pgm::write(&path, item)?;
                images.push(path);
            }
        }
        let mut csv = String::from("index,adherence\n");
        for (i, s) in scores.iter().enumerate() {
            csv.push_str(&format!("{i},{s}\n"));
        }
        write_text(&dir.join("adherence.csv"), &csv)?;
        Ok((images, scores))
    };
    let (images, adherence) = run().map_err(|e| e.in_stage("sample"))?;
    Ok(SampleOutcome { images, adherence })
}

pub struct BenchOutcome {
    pub params: ParamReport,
    pub latency: Vec<LatencyReport>,
}

/// Median single-step denoiser latency of the base model and both
/// architectures on identical inputs, repeated `bench.repeats` times.
pub fn latency_reports(cfg: &RunConfig) -> Result<Vec<LatencyReport>> {
    let (backbone, _, _) = build_backbone(&cfg.backbone, cfg.model_seed)?;
    let mut models = Vec::new();
    for arch in [Architecture::ControlNeXt, Architecture::ControlNet] {
        let mut c = cfg.clone();
        c.train.architecture = arch;
        models.push(fresh_model(&c, backbone.clone())?);
    }
    let b = cfg.bench.batch_size;
    let s = cfg.backbone.image_size;
    let mut rng = item_rng(cfg.model_seed, 0);
    let x = gaussian(&mut rng, [b, cfg.backbone.in_channels, s, s]);
    let control = Dataset::generate(DatasetKey {
        count: b,
        ..cfg.data.eval_key()
    })?
    .controls;
    let t = vec![cfg.diffusion.steps / 2 + 1; b];
    let mut reports = Vec::with_capacity(cfg.bench.repeats);
    for _ in 0..cfg.bench.repeats {
        let mut configs: Vec<(String, StepFn<'_>)> = vec![(
            BASE_LABEL.to_string(),
            Box::new(|| backbone.forward(&x, &t, None).map(drop)),
        )];
        for m in &models {
            let (x, t, control) = (&x, &t, &control);
            configs.push((
                m.control.architecture().label().to_string(),
                Box::new(move || m.predict(x, t, Some(control)).map(drop)),
            ));
        }
        reports.push(bench_latency(
            &mut configs,
            cfg.bench.iters,
            cfg.bench.warmup,
        )?);
    }
    Ok(reports)
}

/// Parameter and latency reports under `<outdir>/<run_name>.bench/`.
pub fn cmd_bench(cfg: &RunConfig, outdir: &Path) -> Result<BenchOutcome> {
    let started = Instant::now();
    cfg.validate().map_err(|e| e.in_stage("config"))?;
    let params = param_report(cfg).map_err(|e| e.in_stage("params"))?;
    let latency = latency_reports(cfg).map_err(|e| e.in_stage("latency"))?;
    publish(&outdir.join(format!("{}.bench", cfg.run_name)), |dir| {
        write_text(&dir.join("params.csv"), &params.to_csv())?;
        write_text(&dir.join("params.json"), &params.to_json())?;
        for (k, rep) in latency.iter().enumerate() {
            write_text(&dir.join(format!("latency-{k}.csv")), &rep.to_csv())?;
            write_text(&dir.join(format!("latency-{k}.json")), &rep.to_json())?;
        }
        write_meta(dir, "bench", started)
    })
    .map_err(|e| e.in_stage("write"))?;
    Ok(BenchOutcome { params, latency })
}

#[derive(Clone, Debug)]
pub struct CompareOutcome {
    pub report: CompareReport,
    pub extractor_median: Option<usize>,
    pub baseline_median: Option<usize>,
    /// Last step any baseline run was trained to.
    pub baseline_horizon: usize,
    pub verdict: bool,
}

impl CompareOutcome {
    pub fn verdict_line(&self) -> String {
        let fmt = |m: Option<usize>, horizon: usize| match m {
            Some(s) => s.to_string(),
            None => format!("not reached by step {horizon}"),
        };
        let next_horizon = self
            .report
            .curves
            .iter()
            .filter(|(l, _)| l.starts_with(Architecture::ControlNeXt.label()))
            .filter_map(|(_, t)| t.records.last().map(|r| r.step))
            .max()
            .unwrap_or(0);
        format!(
            "verdict: median steps_to_threshold controlnext = {}, controlnet = {} -> controlnext {}",
            fmt(self.extractor_median, next_horizon),
            fmt(self.baseline_median, self.baseline_horizon),
            if self.verdict { "converges first" } else { "does not converge first" }
        )
    }
}

/// Run `jobs` on up to `parallel` threads; results keep job order.
fn run_jobs<J: Sync, R: Send>(
    jobs: &[J],
    parallel: usize,
    f: impl Fn(&J) -> Result<R> + Sync,
) -> Result<Vec<R>> {
    let next = Mutex::new(0usize);
    let results: Vec<Mutex<Option<Result<R>>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..parallel.clamp(1, jobs.len().max(1)) {
            s.spawn(|| loop {
                let k = {
                    let mut n = next.lock().expect("job counter");
                    let k = *n;
                    *n += 1;
                    k
                };
                let Some(job) = jobs.get(k) else { break };
                *results[k].lock().expect("job slot") = Some(f(job));
            });
        }
    });
    results
        .into_iter()
        .map(|m| m.into_inner().expect("job slot").expect("every job ran"))
        .collect()
}

/// Train both architectures for every seed under one budget and compare
/// their convergence; outputs go to `<outdir>/<run_name>.compare/`.
pub fn cmd_compare(cfg: &RunConfig, outdir: &Path, parallel: usize) -> Result<CompareOutcome> {
    let started = Instant::now();
    cfg.validate().map_err(|e| e.in_stage("config"))?;
    let splits = load_splits(cfg, outdir).map_err(|e| e.in_stage("data"))?;
    let backbone = pretrained_backbone(cfg, outdir, &splits).map_err(|e| e.in_stage("pretrain"))?;
    let job_cfg = |arch: Architecture, seed: u64, steps: usize| {
        let mut c = cfg.clone();
        c.train.architecture = arch;
        c.train.seed = seed;
        c.train.steps = steps;
        c.train.stop_at_threshold = cfg.compare.stop_at_threshold;
        c.run_name = format!("{}-seed{seed}", arch.label());
        c
    };
    publish(&outdir.join(format!("{}.compare", cfg.run_name)), |dir| {
        let run = |c: &RunConfig| -> Result<ConvergenceTrace> {
            let outcome = train_run(c, backbone.clone(), &splits).map_err(|e| {
                e.in_stage(if c.architecture() == Architecture::ControlNet {
                    "compare controlnet"
                } else {
                    "compare controlnext"
                })
            })?;
            let run_dir = dir.join("runs").join(&c.run_name);
            create_dir(&run_dir)?;
            write_run(&run_dir, c, &outcome)?;
            Ok(outcome.trace)
        };
        let seeds = &cfg.compare.seeds;
        let next_jobs: Vec<RunConfig> = seeds
            .iter()
            .map(|&s| job_cfg(Architecture::ControlNeXt, s, cfg.train.steps))
            .collect();
        let next_traces = run_jobs(&next_jobs, parallel, run)?;
        let extractor_median = median_threshold_step(
            &next_traces
                .iter()
                .map(|t| t.steps_to_threshold())
                .collect::<Vec<_>>(),
        );
        let horizon = match extractor_median {
            Some(m) if cfg.compare.truncate_after_verdict => m.min(cfg.train.steps),
            _ => cfg.train.steps,
        };
        let net_jobs: Vec<RunConfig> = seeds
            .iter()
            .map(|&s| job_cfg(Architecture::ControlNet, s, horizon))
            .collect();
        let net_traces = run_jobs(&net_jobs, parallel, run)?;
        let baseline_median = median_threshold_step(
            &net_traces
                .iter()
                .map(|t| t.steps_to_threshold())
                .collect::<Vec<_>>(),
        );
        let labelled: Vec<(String, ConvergenceTrace)> = next_jobs
            .iter()
            .zip(next_traces)
            .chain(net_jobs.iter().zip(net_traces))
            .map(|(c, t)| (c.run_name.clone(), t))
            .collect();
        let report = compare_traces(&labelled)?;
        let verdict = match (extractor_median, baseline_median) {
            (Some(a), Some(b)) => a < b,
            (Some(_), None) => true,
            (None, _) => false,
        };
        let outcome = CompareOutcome {
            report,
            extractor_median,
            baseline_median,
            baseline_horizon: horizon,
            verdict,
        };
        let reports = dir.join(REPORTS_DIR);
        create_dir(&reports)?;
        write_text(&reports.join("compare.csv"), &outcome.report.to_csv())?;
        write_text(&reports.join("compare.json"), &outcome.report.to_json())?;
        write_text(&reports.join("compare.svg"), &outcome.report.to_svg())?;
        write_text(
            &reports.join("verdict.txt"),
            &format!("{}\n", outcome.verdict_line()),
        )?;
        write_text(&dir.join(RESOLVED_CONFIG_FILE), &cfg.to_toml())?;
        write_meta(&reports, "compare", started)?;
        Ok(outcome)
    })
}

/// Generate and cache both splits; optionally write the first `preview`
/// image/control pairs of the training split as graymaps.
pub fn cmd_gen_data(cfg: &RunConfig, outdir: &Path, preview: usize) -> Result<Vec<PathBuf>> {
    cfg.validate().map_err(|e| e.in_stage("config"))?;
    let dir = data_dir(outdir);
    let mut written = Vec::new();
    let mut train_split = None;
    for key in [cfg.data.train_key(), cfg.data.eval_key()] {
        let (ds, path) = Dataset::load_or_generate(&dir, key).map_err(|e| e.in_stage("data"))?;
        written.push(path);
        train_split.get_or_insert(ds);
    }
    if preview > 0 {
        let ds = train_split.expect("train split generated");
        let pdir = outdir.join("data-preview");
        let n = preview.min(ds.len());
        let (images, controls) = ds
            .batch(&(0..n).collect::<Vec<_>>())
            .map_err(|e| e.in_stage("preview"))?;
        for (i, (img, ctl)) in images
            .split_batch()
            .iter()
            .zip(controls.split_batch())
            .enumerate()
        {
            let ip = pdir.join(format!("{i:04}-image.pgm"));
            let cp = pdir.join(format!("{i:04}-control.pgm"));
            pgm::write(&ip, img).map_err(|e| e.in_stage("preview"))?;
            pgm::write(&cp, &ctl.map(|v| 2.0 * v - 1.0)).map_err(|e| e.in_stage("preview"))?;
            written.extend([ip, cp]);
        }
    }
    Ok(written)
}
