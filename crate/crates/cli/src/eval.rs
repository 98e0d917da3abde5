//! `eval`: re-scores a trained run.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use maccal_core::metrics::{CalibrationReport, OodScores, PredictionSet};
use maccal_core::posthoc::{apply_temperature, fit_temperature};
use maccal_core::report::{Checkpoint, OodSummary, RunReport, SeveritySummary};
use maccal_core::{corrupt, load_csv, masked_inference, Dataset, Real};

use crate::data::{load_dir, DataSource};
use crate::manifest::RunManifest;

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    pub run: PathBuf,
    /// Data directory; defaults to the source recorded with the run.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Post-hoc calibration fitted on the validation split.
    #[arg(long, value_parser = ["ts", "none"], default_value = "none")]
    pub posthoc: String,
    /// Out-of-distribution CSV file; repeatable.
    #[arg(long)]
    pub ood: Vec<PathBuf>,
    /// Comma-separated Gaussian corruption severities (0 = clean).
    #[arg(long, value_delimiter = ',')]
    pub severity: Vec<u8>,
    /// Comma-separated retention probabilities for masked inference.
    #[arg(long, value_delimiter = ',')]
    pub probe_q: Vec<f64>,
    #[arg(long, default_value_t = 10)]
    pub probe_draws: usize,
    /// Seed for corruption noise and probe masks.
    #[arg(long, default_value_t = 0)]
    pub eval_seed: u64,
    /// Basename of the outputs inside the run directory.
    #[arg(long, default_value = "eval")]
    pub name: String,
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let ckpt_path = args.run.join("checkpoint.json");
    let text = fs::read_to_string(&ckpt_path)
        .with_context(|| format!("no checkpoint at {}", ckpt_path.display()))?;
    let scalar: serde_json::Value = serde_json::from_str(&text)?;
    match scalar.get("scalar").and_then(|s| s.as_str()) {
        Some("f32") => eval_as::<f32>(args, &ckpt_path),
        Some("f64") => eval_as::<f64>(args, &ckpt_path),
        other => bail!("checkpoint {} has unknown scalar type {other:?}", ckpt_path.display()),
    }
}

fn max_softmax<T: Real>(model: &maccal_core::TrainedModel<T>, features: &maccal_core::Matrix<T>) -> Result<Vec<f64>> {
    let probs = model.logits(features)?.softmax_rows();
    Ok((0..probs.rows()).map(|r| probs.row_max(r).as_f64()).collect())
}

fn eval_as<T: Real>(args: &EvalArgs, ckpt_path: &Path) -> Result<()> {
    let mut manifest = RunManifest::start("eval");
    let ckpt = Checkpoint::<T>::load(ckpt_path)?;
    let cfg = ckpt.config.clone();
    manifest.config = serde_json::to_value(&cfg)?;
    manifest.seed = Some(cfg.seed);
    manifest.config_hash = Some(ckpt.config_hash.clone());
    let model = ckpt.model();

    let split = match &args.data {
        Some(dir) => load_dir::<T>(dir)?,
        None => {
            let path = args.run.join("data.json");
            let text = fs::read_to_string(&path)
                .with_context(|| format!("no data source recorded at {}; pass --data", path.display()))?;
            serde_json::from_str::<DataSource>(&text)?.load::<T>()?
        }
    };
    let bins = cfg.num_bins;
    let test_preds = model.predict(&split.test)?;
    let mut report = RunReport::new(&cfg, &model, CalibrationReport::from_predictions(&test_preds, bins)?);
    report.final_q = ckpt.q;

    if args.posthoc == "ts" {
        let val_logits = model.logits(split.val.features())?;
        let t = fit_temperature(&val_logits, split.val.labels())?;
        let scaled = apply_temperature(&model.logits(split.test.features())?, t);
        let preds = PredictionSet::new(scaled, split.test.labels().to_vec())?;
        report.temperature = Some(t);
        report.posthoc_test = Some(CalibrationReport::from_predictions(&preds, bins)?);
    }

    for path in &args.ood {
        let ood: Dataset<T> = load_csv(path, None)?;
        let scores = OodScores::new(
            max_softmax(&model, split.test.features())?,
            max_softmax(&model, ood.features())?,
        )?;
        report.ood.push(OodSummary::new(path.display().to_string(), &scores));
    }

    for &s in &args.severity {
        let data = if s == 0 {
            split.test.clone()
        } else {
            corrupt(&split.test, s, args.eval_seed)?
        };
        report.severity.push(SeveritySummary {
            severity: s,
            report: model.evaluate(&data, bins)?,
        });
    }

    for &q in &args.probe_q {
        report
            .probes
            .push(masked_inference(&model, &split.test, q, args.probe_draws, args.eval_seed)?);
    }

    manifest.emit(&args.run.join(format!("{}.json", args.name)), &report.to_json()?)?;
    manifest.emit(
        &args.run.join(format!("{}-reliability.csv", args.name)),
        &report.test.reliability_csv(),
    )?;
    manifest.finish(&args.run.join(format!("{}-manifest.json", args.name)))?;

    let r = &report.test;
    println!(
        "test: acc {:.4} conf {:.4} ece {:.4} aece {:.4} mce {:.4} nll {:.4}",
        r.accuracy, r.avg_confidence, r.ece, r.aece, r.mce, r.nll
    );
    if let (Some(t), Some(p)) = (report.temperature, &report.posthoc_test) {
        println!("temperature {:.4}: ece {:.4} nll {:.4}", t.value, p.ece, p.nll);
    }
    for o in &report.ood {
        println!("ood {}: auroc {:.4} fpr95 {:.4}", o.out_dataset, o.auroc, o.fpr95);
    }
    if !report.ood.is_empty() {
        let n = report.ood.len() as f64;
        println!(
            "ood mean: auroc {:.4} fpr95 {:.4}",
            report.ood.iter().map(|o| o.auroc).sum::<f64>() / n,
            report.ood.iter().map(|o| o.fpr95).sum::<f64>() / n
        );
    }
    for s in &report.severity {
        println!("severity {}: acc {:.4} ece {:.4}", s.severity, s.report.accuracy, s.report.ece);
    }
    for p in &report.probes {
        println!("probe q {:.2}: acc {:.4} conf {:.4}", p.q, p.acc, p.conf);
    }
    Ok(())
}
