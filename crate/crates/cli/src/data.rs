//! Where a run's train/val/test sets come from.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use maccal_core::{gen_blobs, load_csv, split, Dataset, Real, Split};
use serde::{Deserialize, Serialize};

pub const SPLIT_FRACTIONS: [f64; 3] = [0.6, 0.2, 0.2];

/// Synthetic blob parameters shared by `gen-data` and inline training data.
#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct BlobArgs {
    /// Number of classes.
    #[arg(long, default_value_t = 5)]
    pub classes: usize,
    /// Input dimension.
    #[arg(long, default_value_t = 20)]
    pub dim: usize,
    /// Samples per class before splitting.
    #[arg(long, default_value_t = 1000)]
    pub per_class: usize,
    /// Per-coordinate standard deviation around each center.
    #[arg(long, default_value_t = 1.75, allow_negative_numbers = true)]
    pub spread: f64,
    /// Seed for centers, samples and the split.
    #[arg(long = "data-seed", default_value_t = 1)]
    pub data_seed: u64,
}

impl BlobArgs {
    pub fn generate<T: Real>(&self) -> Result<Split<T>> {
        let data: Dataset<T> = gen_blobs(self.classes, self.dim, self.per_class, self.spread, self.data_seed)?;
        Ok(split(&data, SPLIT_FRACTIONS, self.data_seed)?)
    }
}

/// Recorded next to every trained model so `eval` can rebuild the same data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Directory { path: PathBuf },
    Blobs(BlobArgs),
}

impl DataSource {
    pub fn load<T: Real>(&self) -> Result<Split<T>> {
        match self {
            DataSource::Directory { path } => load_dir(path),
            DataSource::Blobs(b) => b.generate(),
        }
    }
}

/// Reads `train.csv`, `val.csv` and `test.csv` from `dir`.
pub fn load_dir<T: Real>(dir: &Path) -> Result<Split<T>> {
    let train: Dataset<T> = load_csv(&dir.join("train.csv"), None)
        .with_context(|| format!("loading training data from {}", dir.display()))?;
    let k = Some(train.num_classes());
    let val = load_csv(&dir.join("val.csv"), k)?;
    let test = load_csv(&dir.join("test.csv"), k)?;
    if val.dim() != train.dim() || test.dim() != train.dim() {
        bail!("feature dimensions differ between train/val/test in {}", dir.display());
    }
    Ok(Split { train, val, test })
}
