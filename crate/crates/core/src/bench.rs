//! Parameter accounting, per-step latency and convergence-curve reports.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::finetune::ConvergenceTrace;
use crate::params::ParamRegistry;

/// Stable Diffusion 1.5 scale reference for the extractor method.
pub const REFERENCE_TOTAL_PARAMS: u64 = 865_000_000;
pub const REFERENCE_LEARNABLE_PARAMS: u64 = 30_000_000;
/// Reference per-step latency overheads over the base model, in percent.
pub const REFERENCE_OVERHEAD_CONTROLNET: f64 = 41.9;
pub const REFERENCE_OVERHEAD_CONTROLNEXT: f64 = 10.4;

pub const BASE_LABEL: &str = "base";
pub const MIN_TIMED_ITERS: usize = 100;
pub const MIN_WARMUP_ITERS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRow {
    pub label: String,
    pub total_params: u64,
    pub learnable_params: u64,
    pub learnable_fraction: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub rows: Vec<ParamRow>,
}

impl ParamReport {
    pub fn row(&self, label: &str) -> Option<&ParamRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("label,total_params,learnable_params,learnable_fraction\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{:.6}",
                r.label, r.total_params, r.learnable_params, r.learnable_fraction
            );
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes")
    }
}

/// Exact totals per configuration. Every trainable name must exist in its registry.
pub fn count_params(configs: &[(&str, &ParamRegistry, &BTreeSet<String>)]) -> Result<ParamReport> {
    let mut rows = Vec::with_capacity(configs.len());
    for &(label, registry, trainable) in configs {
        let mut learnable = 0u64;
        for name in trainable {
            let entry = registry.get(name).ok_or_else(|| {
                Error::Report(format!(
                    "`{label}`: trainable parameter `{name}` is not registered"
                ))
            })?;
            learnable += entry.numel() as u64;
        }
        let total = registry.total_params() as u64;
        rows.push(ParamRow {
            label: label.to_string(),
            total_params: total,
            learnable_params: learnable,
            learnable_fraction: if total == 0 {
                0.0
            } else {
                learnable as f64 / total as f64
            },
        });
    }
    Ok(ParamReport { rows })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyRow {
    pub label: String,
    pub median_step_seconds: f64,
    pub overhead_percent: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub iters: usize,
    pub warmup: usize,
    pub rows: Vec<LatencyRow>,
}

impl LatencyReport {
    pub fn row(&self, label: &str) -> Option<&LatencyRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn overhead(&self, label: &str) -> Option<f64> {
        self.row(label).map(|r| r.overhead_percent)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("label,median_step_seconds,overhead_percent\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{:.9},{:.4}",
                r.label, r.median_step_seconds, r.overhead_percent
            );
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes")
    }
}

pub type StepFn<'a> = Box<dyn FnMut() -> Result<()> + 'a>;

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median wall-clock time of one call per configuration.
///
/// Configurations are timed round-robin, one call each per round, so slow
/// drift of the machine affects all of them alike. Runs on the calling thread.
pub fn bench_latency(
    configs: &mut [(String, StepFn<'_>)],
    iters: usize,
    warmup: usize,
) -> Result<LatencyReport> {
    if iters < MIN_TIMED_ITERS || warmup < MIN_WARMUP_ITERS {
        return Err(Error::Config(format!(
            "latency benchmark needs at least {MIN_TIMED_ITERS} timed and {MIN_WARMUP_ITERS} warm-up iterations (got {iters} / {warmup})"
        )));
    }
    let base = configs
        .iter()
        .position(|(l, _)| l == BASE_LABEL)
        .ok_or_else(|| Error::Report(format!("no configuration labelled `{BASE_LABEL}`")))?;
    for _ in 0..warmup {
        for (_, f) in configs.iter_mut() {
            f()?;
        }
    }
    let mut times = vec![Vec::with_capacity(iters); configs.len()];
    for _ in 0..iters {
        for (k, (_, f)) in configs.iter_mut().enumerate() {
            let t0 = Instant::now();
            f()?;
            times[k].push(t0.elapsed().as_secs_f64());
        }
    }
    let medians: Vec<f64> = times.into_iter().map(median).collect();
    let base_t = medians[base];
    let rows = configs
        .iter()
        .zip(&medians)
        .enumerate()
        .map(|(k, ((label, _), &m))| LatencyRow {
            label: label.clone(),
            median_step_seconds: m,
            overhead_percent: if k == base {
                0.0
            } else {
                100.0 * (m - base_t) / base_t
            },
        })
        .collect();
    Ok(LatencyReport {
        iters,
        warmup,
        rows,
    })
}

/// Median first-threshold step of several runs; runs that never reach the
/// threshold rank above every finite step.
pub fn median_threshold_step(steps: &[Option<usize>]) -> Option<usize> {
    if steps.is_empty() {
        return None;
    }
    let mut v: Vec<usize> = steps.iter().map(|s| s.unwrap_or(usize::MAX)).collect();
    v.sort_unstable();
    let m = v[(v.len() - 1) / 2];
    (m != usize::MAX).then_some(m)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub threshold: f64,
    pub curves: Vec<(String, ConvergenceTrace)>,
}

/// Check that all traces share one evaluation schedule and bundle them.
///
/// A trace may stop early, so each step list must be a prefix of the longest.
pub fn compare_traces(traces: &[(String, ConvergenceTrace)]) -> Result<CompareReport> {
    let first = traces
        .first()
        .ok_or_else(|| Error::Report("no traces to compare".into()))?;
    let threshold = first.1.threshold;
    let longest = traces
        .iter()
        .max_by_key(|(_, t)| t.records.len())
        .map(|(_, t)| t.records.iter().map(|r| r.step).collect::<Vec<_>>())
        .unwrap_or_default();
    for (label, t) in traces {
        if t.threshold != threshold {
            return Err(Error::Report(format!(
                "trace `{label}` uses threshold {} but `{}` uses {threshold}",
                t.threshold, first.0
            )));
        }
        if t.records.iter().zip(&longest).any(|(r, &s)| r.step != s) {
            return Err(Error::Report(format!(
                "trace `{label}` has a different evaluation schedule"
            )));
        }
    }
    Ok(CompareReport {
        threshold,
        curves: traces.to_vec(),
    })
}

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b",
];

impl CompareReport {
    pub fn thresholds(&self) -> Vec<(String, Option<usize>)> {
        self.curves
            .iter()
            .map(|(l, t)| (l.clone(), t.steps_to_threshold()))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("label,step,loss,adherence\n");
        for (label, t) in &self.curves {
            for r in &t.records {
                let _ = writeln!(s, "{label},{},{},{}", r.step, r.train_loss, r.adherence);
            }
        }
        s
    }

    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Curve<'a> {
            label: &'a str,
            steps_to_threshold: Option<usize>,
            trace: &'a ConvergenceTrace,
        }
        #[derive(Serialize)]
        struct Doc<'a> {
            threshold: f64,
            curves: Vec<Curve<'a>>,
        }
        let doc = Doc {
            threshold: self.threshold,
            curves: self
                .curves
                .iter()
                .map(|(l, t)| Curve {
                    label: l,
                    steps_to_threshold: t.steps_to_threshold(),
                    trace: t,
                })
                .collect(),
        };
        serde_json::to_string_pretty(&doc).expect("plain data serializes")
    }

    /// Adherence against step, one polyline per trace, with a dashed marker
    /// at each trace's first threshold step.
    pub fn to_svg(&self) -> String {
        let (w, h, ml, mr, mt, mb) = (720.0, 440.0, 60.0, 180.0, 20.0, 50.0);
        let pw = w - ml - mr;
        let ph = h - mt - mb;
        let max_step = self
            .curves
            .iter()
            .flat_map(|(_, t)| t.records.iter().map(|r| r.step))
            .max()
            .unwrap_or(1)
            .max(1) as f64;
        let px = |step: f64| ml + pw * step / max_step;
        let py = |a: f64| mt + ph * (1.0 - a.clamp(0.0, 1.0));
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
        );
        for i in 0..=5 {
            let a = i as f64 / 5.0;
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{a:.1}</text>"#,
                ml - 6.0,
                py(a) + 4.0
            );
            let step = max_step * a;
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{step:.0}</text>"#,
                px(step),
                mt + ph + 16.0
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">training step</text>"#,
            ml + pw / 2.0,
            h - 10.0
        );
        let _ = writeln!(
            s,
            r#"<text x="14" y="{:.1}" text-anchor="middle" transform="rotate(-90 14 {:.1})">adherence (IoU)</text>"#,
            mt + ph / 2.0,
            mt + ph / 2.0
        );
        let ty = py(self.threshold);
        let _ = writeln!(
            s,
            r##"<line x1="{ml}" y1="{ty:.1}" x2="{:.1}" y2="{ty:.1}" stroke="#888" stroke-dasharray="2,3"/>"##,
            ml + pw
        );
        for (k, (label, t)) in self.curves.iter().enumerate() {
            let color = PALETTE[k % PALETTE.len()];
            let pts: Vec<String> = t
                .records
                .iter()
                .map(|r| format!("{:.1},{:.1}", px(r.step as f64), py(r.adherence)))
                .collect();
            let _ = writeln!(
                s,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
                pts.join(" ")
            );
            let note = match t.steps_to_threshold() {
                Some(step) => {
                    let x = px(step as f64);
                    let _ = writeln!(
                        s,
                        r#"<line x1="{x:.1}" y1="{mt}" x2="{x:.1}" y2="{:.1}" stroke="{color}" stroke-dasharray="5,4"/>"#,
                        mt + ph
                    );
                    format!("{label}: {step}")
                }
                None => format!("{label}: not reached"),
            };
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" fill="{color}">{}</text>"#,
                ml + pw + 10.0,
                mt + 14.0 + 16.0 * k as f64,
                xml_escape(&note)
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::finetune::EvalRecord;
    use crate::params::ParamStore;
    use std::time::Duration;

    fn registry(shapes: &[(&str, &[usize])]) -> ParamRegistry {
        let mut s = ParamStore::<f32>::new();
        for (n, sh) in shapes {
            s.add(*n, crate::Tensor::zeros(sh.to_vec())).unwrap();
        }
        s.registry()
    }

    fn trace(points: &[(usize, f64)]) -> ConvergenceTrace {
        ConvergenceTrace {
            threshold: 0.6,
            records: points
                .iter()
                .map(|&(step, adherence)| EvalRecord {
                    step,
                    train_loss: 0.1,
                    adherence,
                })
                .collect(),
        }
    }

    #[test]
    fn empty_registry_counts_zero() {
        let r = registry(&[]);
        let rep = count_params(&[("e", &r, &BTreeSet::new())]).unwrap();
        assert_eq!(
            (rep.rows[0].total_params, rep.rows[0].learnable_params),
            (0, 0)
        );
    }

    #[test]
    fn counts_are_exact_and_order_free() {
        let a = registry(&[("w", &[3, 2, 3, 3]), ("b", &[3]), ("g", &[7])]);
        let b = registry(&[("g", &[7]), ("b", &[3]), ("w", &[3, 2, 3, 3])]);
        let tr: BTreeSet<String> = ["b".to_string(), "g".to_string()].into();
        let ra = count_params(&[("a", &a, &tr)]).unwrap();
        let rb = count_params(&[("a", &b, &tr)]).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(ra.rows[0].total_params, 64);
        assert_eq!(ra.rows[0].learnable_params, 10);
        let bad: BTreeSet<String> = ["nope".to_string()].into();
        assert!(count_params(&[("a", &a, &bad)]).is_err());
    }

    #[test]
    fn reference_fraction_is_about_three_and_a_half_percent() {
        let f = REFERENCE_LEARNABLE_PARAMS as f64 / REFERENCE_TOTAL_PARAMS as f64;
        assert!((f - 0.035).abs() < 0.001);
    }

    fn sleeper(d: Duration) -> StepFn<'static> {
        Box::new(move || {
            std::thread::sleep(d);
            Ok(())
        })
    }

    #[test]
    fn latency_requires_base_and_enough_iterations() {
        let mut c = vec![("x".to_string(), sleeper(Duration::ZERO))];
        assert!(matches!(
            bench_latency(&mut c, 100, 10),
            Err(Error::Report(_))
        ));
        let mut c = vec![(BASE_LABEL.to_string(), sleeper(Duration::ZERO))];
        assert!(bench_latency(&mut c, 99, 10).is_err());
        assert!(bench_latency(&mut c, 100, 9).is_err());
    }

    #[test]
    fn latency_medians_track_added_delay() {
        let mut c = vec![
            (BASE_LABEL.to_string(), sleeper(Duration::from_millis(1))),
            ("same".to_string(), sleeper(Duration::from_millis(1))),
            ("slower".to_string(), sleeper(Duration::from_millis(2))),
        ];
        let rep = bench_latency(&mut c, 100, 10).unwrap();
        assert_eq!(rep.overhead(BASE_LABEL), Some(0.0));
        assert!(rep.overhead("same").unwrap().abs() < 2.0, "{rep:?}");
        let (b, s) = (rep.row(BASE_LABEL).unwrap(), rep.row("slower").unwrap());
        assert!(s.median_step_seconds > b.median_step_seconds);
        assert!(rep.overhead("slower").unwrap() > 50.0);
    }

    #[test]
    fn median_threshold_treats_unreached_as_largest() {
        assert_eq!(
            median_threshold_step(&[Some(300), None, Some(100)]),
            Some(300)
        );
        assert_eq!(median_threshold_step(&[None, None, Some(100)]), None);
        assert_eq!(median_threshold_step(&[Some(5)]), Some(5));
        assert_eq!(median_threshold_step(&[]), None);
    }

    #[test]
    fn single_and_duplicate_traces() {
        let t = trace(&[(100, 0.2), (200, 0.65), (300, 0.7)]);
        let rep = compare_traces(&[("a".into(), t.clone())]).unwrap();
        assert_eq!(rep.thresholds(), vec![("a".to_string(), Some(200))]);
        assert!(rep.to_svg().contains("a: 200"));
        let rep = compare_traces(&[("a".into(), t.clone()), ("b".into(), t)]).unwrap();
        let th = rep.thresholds();
        assert_eq!(th[0].1, th[1].1);
    }

    #[test]
    fn mismatched_schedules_are_rejected_but_prefixes_allowed() {
        let a = trace(&[(100, 0.2), (200, 0.3)]);
        let b = trace(&[(100, 0.2), (250, 0.3)]);
        assert!(compare_traces(&[("a".into(), a.clone()), ("b".into(), b)]).is_err());
        let early = trace(&[(100, 0.7)]);
        assert!(compare_traces(&[("a".into(), a.clone()), ("e".into(), early)]).is_ok());
        let mut other = a.clone();
        other.threshold = 0.5;
        assert!(compare_traces(&[("a".into(), a), ("o".into(), other)]).is_err());
    }

    #[test]
    fn reports_are_reproducible() {
        let t = trace(&[(100, 0.2), (200, 0.65)]);
        let rep = compare_traces(&[("x".into(), t)]).unwrap();
        assert_eq!(
            rep.to_csv(),
            "label,step,loss,adherence\nx,100,0.1,0.2\nx,200,0.1,0.65\n"
        );
        let again = rep.clone();
        assert_eq!(rep.to_svg(), again.to_svg());
        assert_eq!(rep.to_json(), again.to_json());
    }
}
