//! `sweep`: a grid of configuration values times seeds.

use std::path::Path;

use anyhow::{bail, Context, Result};
use clap::Args;
use maccal_core::{masked_inference, Real, Split, TrainConfig};
use rayon::prelude::*;
use serde_json::Value;

use crate::config::TrainArgs;
use crate::manifest::RunManifest;
use crate::SourceArgs;

/// Pseudo-key that sweeps masked-inference retention on a trained model.
pub const PROBE_KEY: &str = "probe_q";

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub train: TrainArgs,
    #[command(flatten)]
    pub source: SourceArgs,
    /// `field=v1,v2,...` over configuration fields (or `probe_q`); at most two.
    #[arg(long, required = true)]
    pub grid: Vec<String>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    pub seeds: Vec<u64>,
    /// Worker threads.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long, default_value_t = 10)]
    pub probe_draws: usize,
    #[arg(long, default_value = "sweep")]
    pub name: String,
}

#[derive(Debug, Clone)]
struct Axis {
    key: String,
    values: Vec<Value>,
}

fn parse_axis(spec: &str) -> Result<Axis> {
    let (key, values) = spec
        .split_once('=')
        .with_context(|| format!("grid entry {spec:?} must look like field=v1,v2"))?;
    let key = key.trim().replace('-', "_");
    let values = values
        .split(',')
        .map(|v| {
            let v = v.trim();
            serde_json::from_str::<Value>(v).unwrap_or_else(|_| Value::String(v.to_string()))
        })
        .collect::<Vec<_>>();
    if values.is_empty() {
        bail!("grid entry {spec:?} has no values");
    }
    Ok(Axis { key, values })
}

fn patch(base: &TrainConfig, seed: u64, assignments: &[(&str, &Value)]) -> Result<TrainConfig> {
    let mut v = serde_json::to_value(base)?;
    v["seed"] = Value::from(seed);
    let obj = v.as_object_mut().expect("config is an object");
    for (key, value) in assignments {
        if !obj.contains_key(*key) {
            bail!("unknown configuration field {key:?}");
        }
        obj.insert(key.to_string(), (*value).clone());
    }
    let cfg: TrainConfig = serde_json::from_value(v)?;
    cfg.validate()?;
    Ok(cfg)
}

struct Job {
    seed: u64,
    assignments: Vec<(String, Value)>,
}

struct Row {
    seed: u64,
    values: Vec<String>,
    probe_q: Option<f64>,
    outcome: Result<Metrics, String>,
}

#[derive(Default)]
struct Metrics {
    acc: f64,
    conf: f64,
    ece: Option<f64>,
    aece: Option<f64>,
    mce: Option<f64>,
    nll: Option<f64>,
    final_q: Option<f64>,
}

fn render(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn run_job<T: Real>(
    job: &Job,
    base: &TrainConfig,
    split: &Split<T>,
    probes: Option<&[Value]>,
    draws: usize,
) -> Vec<Row> {
    let values: Vec<String> = job.assignments.iter().map(|(_, v)| render(v)).collect();
    let failed = |probe_q, msg: String| Row {
        seed: job.seed,
        values: values.clone(),
        probe_q,
        outcome: Err(msg),
    };
    let assignments: Vec<(&str, &Value)> = job.assignments.iter().map(|(k, v)| (k.as_str(), v)).collect();
    let cfg = match patch(base, job.seed, &assignments) {
        Ok(c) => c,
        Err(e) => return vec![failed(None, format!("{e:#}"))],
    };
    let out = match maccal_core::train(split, &cfg) {
        Ok(o) => o,
        Err(e) => return vec![failed(None, e.to_string())],
    };
    match probes {
        None => vec![Row {
            seed: job.seed,
            values,
            probe_q: None,
            outcome: Ok(Metrics {
                acc: out.report.accuracy,
                conf: out.report.avg_confidence,
                ece: Some(out.report.ece),
                aece: Some(out.report.aece),
                mce: Some(out.report.mce),
                nll: Some(out.report.nll),
                final_q: out.final_q,
            }),
        }],
        Some(qs) => qs
            .iter()
            .map(|qv| {
                let Some(q) = qv.as_f64() else {
                    return failed(None, format!("probe_q value {qv} is not a number"));
                };
                match masked_inference(&out.model, &split.test, q, draws, job.seed) {
                    Ok(p) => Row {
                        seed: job.seed,
                        values: values.clone(),
                        probe_q: Some(q),
                        outcome: Ok(Metrics {
                            acc: p.acc,
                            conf: p.conf,
                            final_q: out.final_q,
                            ..Metrics::default()
                        }),
                    },
                    Err(e) => failed(Some(q), e.to_string()),
                }
            })
            .collect(),
    }
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

pub fn sweep(args: &SweepArgs, root: &Path) -> Result<()> {
    let axes = args.grid.iter().map(|g| parse_axis(g)).collect::<Result<Vec<_>>>()?;
    if axes.len() > 2 {
        bail!("at most two grid axes are supported");
    }
    let (probe, config_axes): (Vec<Axis>, Vec<Axis>) = axes.into_iter().partition(|a| a.key == PROBE_KEY);
    let probes = probe.first().map(|a| a.values.clone());
    let base = args.train.resolve()?;
    let source = args.source.source();

    let mut combos: Vec<Vec<(String, Value)>> = vec![Vec::new()];
    for axis in &config_axes {
        combos = combos
            .into_iter()
            .flat_map(|c| {
                axis.values.iter().map(move |v| {
                    let mut next = c.clone();
                    next.push((axis.key.clone(), v.clone()));
                    next
                })
            })
            .collect();
    }
    let jobs: Vec<Job> = combos
        .iter()
        .flat_map(|c| {
            args.seeds.iter().map(move |&seed| Job {
                seed,
                assignments: c.clone(),
            })
        })
        .collect();

    let mut manifest = RunManifest::start("sweep");
    manifest.config = serde_json::json!({
        "base": base,
        "grid": args.grid,
        "seeds": args.seeds,
        "source": source,
    });
    let split = source.load::<f64>()?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(args.jobs.max(1)).build()?;
    let rows: Vec<Row> = pool.install(|| {
        jobs.par_iter()
            .map(|job| run_job(job, &base, &split, probes.as_deref(), args.probe_draws))
            .collect::<Vec<_>>()
            .into_iter()
            .flatten()
            .collect()
    });

    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["seed".to_string()];
    header.extend(config_axes.iter().map(|a| a.key.clone()));
    if probes.is_some() {
        header.push(PROBE_KEY.to_string());
    }
    header.extend(["status", "acc", "conf", "ece", "aece", "mce", "nll", "final_q", "error"].map(String::from));
    w.write_record(&header)?;
    let mut failures = 0;
    for row in &rows {
        let mut rec = vec![row.seed.to_string()];
        rec.extend(row.values.iter().cloned());
        if probes.is_some() {
            rec.push(opt(row.probe_q));
        }
        match &row.outcome {
            Ok(m) => rec.extend([
                "ok".to_string(),
                m.acc.to_string(),
                m.conf.to_string(),
                opt(m.ece),
                opt(m.aece),
                opt(m.mce),
                opt(m.nll),
                opt(m.final_q),
                String::new(),
            ]),
            Err(e) => {
                failures += 1;
                rec.extend(["failed".to_string()]);
                rec.extend(std::iter::repeat_n(String::new(), 7));
                rec.push(e.clone());
            }
        }
        w.write_record(&rec)?;
    }
    let csv = String::from_utf8(w.into_inner()?)?;
    let dir = root.join(&args.name);
    manifest.emit(&dir.join("sweep.csv"), &csv)?;
    manifest.finish(&dir.join("manifest.json"))?;
    println!("{} rows ({} failed) in {}", rows.len(), failures, dir.join("sweep.csv").display());
    Ok(())
}
