//! `report`: collects report files into one table.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use clap::Args;
use maccal_core::report::RunReport;

use crate::manifest::RunManifest;

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    /// Report files or directories searched recursively for `*.json`
    /// reports; defaults to the output root.
    pub paths: Vec<PathBuf>,
    #[arg(long, default_value = "summary")]
    pub name: String,
}

fn collect(path: &Path, found: &mut Vec<PathBuf>) -> Result<()> {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(path)?.map(|e| e.map(|e| e.path())).collect::<Result<_, _>>()?;
        entries.sort();
        for entry in entries {
            collect(&entry, found)?;
        }
    } else if path.extension().is_some_and(|e| e == "json")
        && path
            .file_name()
            .and_then(|n| n.to_str())
            .is_some_and(|n| n == "report.json" || n.starts_with("eval") && !n.contains("manifest"))
    {
        found.push(path.to_path_buf());
    }
    Ok(())
}

pub fn report(args: &ReportArgs, root: &Path) -> Result<()> {
    let inputs = if args.paths.is_empty() {
        vec![root.to_path_buf()]
    } else {
        args.paths.clone()
    };
    let out_dir = root.join(&args.name);
    let mut files = Vec::new();
    for p in &inputs {
        if !p.exists() {
            bail!("{} does not exist", p.display());
        }
        collect(p, &mut files)?;
    }
    files.retain(|f| !f.starts_with(&out_dir));
    if files.is_empty() {
        bail!("no report files found");
    }

    let mut manifest = RunManifest::start("report");
    manifest.config = serde_json::json!({ "inputs": files });
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "path", "method", "seed", "scalar", "accuracy", "avg_confidence", "ece", "aece", "mce", "nll",
        "final_q", "temperature", "posthoc_ece",
    ])?;
    println!(
        "{:<48} {:>13} {:>5} {:>7} {:>7} {:>7} {:>7} {:>7}",
        "report", "method", "seed", "acc", "conf", "ece", "aece", "nll"
    );
    for f in &files {
        let r = RunReport::load(f)?;
        let t = &r.test;
        w.write_record([
            f.display().to_string(),
            r.method.name().to_string(),
            r.seed.to_string(),
            r.scalar.clone(),
            t.accuracy.to_string(),
            t.avg_confidence.to_string(),
            t.ece.to_string(),
            t.aece.to_string(),
            t.mce.to_string(),
            t.nll.to_string(),
            r.final_q.map(|q| q.to_string()).unwrap_or_default(),
            r.temperature.map(|t| t.value.to_string()).unwrap_or_default(),
            r.posthoc_test.as_ref().map(|p| p.ece.to_string()).unwrap_or_default(),
        ])?;
        let shown = f.display().to_string();
        let shown = if shown.len() > 48 { format!("…{}", &shown[shown.len() - 47..]) } else { shown };
        println!(
            "{:<48} {:>13} {:>5} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4}",
            shown,
            r.method.name(),
            r.seed,
            t.accuracy,
            t.avg_confidence,
            t.ece,
            t.aece,
            t.nll
        );
    }
    let csv = String::from_utf8(w.into_inner()?)?;
    manifest.emit(&out_dir.join("summary.csv"), &csv)?;
    manifest.finish(&out_dir.join("manifest.json"))?;
    Ok(())
}
