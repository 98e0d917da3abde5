//! Serialized run artifacts: the JSON report and model checkpoints.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maccal::{EpochStats, Method, ProbeResult, Stage1Epoch, TrainConfig, TrainedModel};
use crate::metrics::{CalibrationReport, OodScores};
use crate::model::{FeatureExtractor, Head};
use crate::posthoc::Temperature;
use crate::scalar::Real;

pub const SCHEMA_VERSION: u32 = 1;

/// Out-of-distribution summary for one (in, out) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodSummary {
    pub out_dataset: String,
    pub auroc: f64,
    pub fpr95: f64,
}

impl OodSummary {
    pub fn new(out_dataset: impl Into<String>, scores: &OodScores) -> Self {
        Self {
            out_dataset: out_dataset.into(),
            auroc: scores.auroc,
            fpr95: scores.fpr95,
        }
    }
}

/// Metrics on a corrupted copy of the test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeveritySummary {
    pub severity: u8,
    pub report: CalibrationReport,
}

/// Everything a run measured. Contains no wall-clock data, so equal inputs
/// produce byte-identical files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub method: Method,
    pub seed: u64,
    pub config_hash: String,
    pub num_bins: usize,
    pub scalar: String,
    pub config: TrainConfig,
    pub test: CalibrationReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage1_test: Option<CalibrationReport>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub stage1_history: Vec<Stage1Epoch>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub stage2_history: Vec<EpochStats>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_q: Option<f64>,
    pub extractor_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<Temperature>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub posthoc_test: Option<CalibrationReport>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ood: Vec<OodSummary>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub severity: Vec<SeveritySummary>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub probes: Vec<ProbeResult>,
}

impl RunReport {
    pub fn new<T: Real>(cfg: &TrainConfig, model: &TrainedModel<T>, test: CalibrationReport) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            method: cfg.method,
            seed: cfg.seed,
            config_hash: cfg.config_hash(),
            num_bins: cfg.num_bins,
            scalar: T::type_name().to_string(),
            config: cfg.clone(),
            test,
            stage1_test: None,
            stage1_history: Vec::new(),
            stage2_history: Vec::new(),
            final_q: None,
            extractor_hash: model.extractor.param_hash(),
            temperature: None,
            posthoc_test: None,
            ood: Vec::new(),
            severity: Vec::new(),
            probes: Vec::new(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_json()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let report: Self = serde_json::from_str(&text)?;
        if report.schema_version != SCHEMA_VERSION {
            return Err(Error::State(format!(
                "report schema {} is not supported (expected {SCHEMA_VERSION})",
                report.schema_version
            )));
        }
        Ok(report)
    }
}

/// Trained weights plus the lineage needed to reproduce them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct Checkpoint<T> {
    pub schema_version: u32,
    pub scalar: String,
    pub seed: u64,
    pub config_hash: String,
    pub config: TrainConfig,
    pub num_classes: usize,
    pub extractor: FeatureExtractor<T>,
    pub head: Head<T>,
    #[serde(default)]
    pub q: Option<f64>,
}

impl<T: Real> Checkpoint<T> {
    pub fn new(cfg: &TrainConfig, model: &TrainedModel<T>, q: Option<f64>) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            scalar: T::type_name().to_string(),
            seed: cfg.seed,
            config_hash: cfg.config_hash(),
            config: cfg.clone(),
            num_classes: model.head.num_classes(),
            extractor: model.extractor.clone(),
            head: model.head.clone(),
            q,
        }
    }

    pub fn model(&self) -> TrainedModel<T> {
        TrainedModel {
            extractor: self.extractor.clone(),
            head: self.head.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = serde_json::to_string(self)?;
        s.push('\n');
        write_file(path, &s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Self = serde_json::from_str(&text)?;
        if ckpt.schema_version != SCHEMA_VERSION {
            return Err(Error::State(format!(
                "checkpoint schema {} is not supported (expected {SCHEMA_VERSION})",
                ckpt.schema_version
            )));
        }
        if ckpt.scalar != T::type_name() {
            return Err(Error::State(format!(
                "checkpoint holds {} weights, loader expects {}",
                ckpt.scalar,
                T::type_name()
            )));
        }
        if ckpt.extractor.output_dim() != ckpt.head.input_dim() || ckpt.head.num_classes() != ckpt.num_classes {
            return Err(Error::shape(
                "checkpoint",
                format!(
                    "extractor emits {} features, head expects {} and predicts {} of {} classes",
                    ckpt.extractor.output_dim(),
                    ckpt.head.input_dim(),
                    ckpt.head.num_classes(),
                    ckpt.num_classes
                ),
            ));
        }
        Ok(ckpt)
    }
}

/// Writes `contents`, creating parent directories as needed.
pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}
