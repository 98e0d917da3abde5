//! `gen-data` and `train`.

use std::path::Path;

use anyhow::Result;
use maccal_core::maccal::stats_csv;
use maccal_core::report::{Checkpoint, RunReport};
use maccal_core::{save_csv, Real, TrainConfig};

use crate::config::to_toml;
use crate::data::{BlobArgs, DataSource};
use crate::manifest::RunManifest;
use crate::Precision;

pub fn gen_data(blobs: &BlobArgs, dir: &Path) -> Result<()> {
    let mut manifest = RunManifest::start("gen-data");
    manifest.config = serde_json::to_value(blobs)?;
    manifest.seed = Some(blobs.data_seed);
    let split = blobs.generate::<f64>()?;
    for (name, set) in [("train", &split.train), ("val", &split.val), ("test", &split.test)] {
        let path = dir.join(format!("{name}.csv"));
        save_csv(set, &path)?;
        manifest.record(&path);
    }
    manifest.finish(&dir.join("manifest.json"))?;
    println!(
        "wrote {} / {} / {} rows to {}",
        split.train.len(),
        split.val.len(),
        split.test.len(),
        dir.display()
    );
    Ok(())
}

pub fn train(cfg: &TrainConfig, source: &DataSource, dir: &Path, precision: Precision) -> Result<()> {
    match precision {
        Precision::F64 => train_as::<f64>(cfg, source, dir),
        Precision::F32 => train_as::<f32>(cfg, source, dir),
    }
}

fn train_as<T: Real>(cfg: &TrainConfig, source: &DataSource, dir: &Path) -> Result<()> {
    let mut manifest = RunManifest::start("train");
    manifest.config = serde_json::to_value(cfg)?;
    manifest.seed = Some(cfg.seed);
    manifest.config_hash = Some(cfg.config_hash());

    let split = source.load::<T>()?;
    let out = maccal_core::train(&split, cfg)?;

    let mut report = RunReport::new(cfg, &out.model, out.report.clone());
    report.stage1_test = out.stage1_report.clone();
    report.stage1_history = out.stage1_history.clone();
    report.stage2_history = out.stats.clone();
    report.final_q = out.final_q;

    manifest.emit(&dir.join("report.json"), &report.to_json()?)?;
    manifest.emit(&dir.join("reliability.csv"), &out.report.reliability_csv())?;
    manifest.emit(&dir.join("stats.csv"), &stats_csv(&out.stats))?;
    manifest.emit(&dir.join("config.toml"), &to_toml(cfg)?)?;
    manifest.emit(&dir.join("data.json"), &serde_json::to_string_pretty(source)?)?;
    let ckpt = dir.join("checkpoint.json");
    Checkpoint::new(cfg, &out.model, out.final_q).save(&ckpt)?;
    manifest.record(&ckpt);
    if let Some(stage1) = &out.stage1_model {
        let path = dir.join("stage1.checkpoint.json");
        Checkpoint::new(cfg, stage1, None).save(&path)?;
        manifest.record(&path);
    }
    manifest.finish(&dir.join("manifest.json"))?;

    let r = &out.report;
    println!(
        "{} seed {}: acc {:.4} conf {:.4} ece {:.4} aece {:.4} mce {:.4} nll {:.4}{}",
        cfg.method.name(),
        cfg.seed,
        r.accuracy,
        r.avg_confidence,
        r.ece,
        r.aece,
        r.mce,
        r.nll,
        out.final_q.map(|q| format!(" q {q:.4}")).unwrap_or_default()
    );
    println!("outputs in {}", dir.display());
    Ok(())
}
