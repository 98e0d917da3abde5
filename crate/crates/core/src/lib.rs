//! Mask-based classifier calibration for small MLP classifiers.
//!
//! The numeric core is generic over [`Real`] (`f32` or `f64`); the aliases
//! below name the common `f64` instantiations.

pub mod datasets;
pub mod error;
pub mod kernel;
pub mod losses;
pub mod maccal;
pub mod metrics;
pub mod model;
pub mod posthoc;
pub mod report;
pub mod scalar;

pub use datasets::{corrupt, gen_blobs, load_csv, save_csv, split, BlobSpec, Dataset, Split};
pub use error::{Error, Result};
pub use kernel::{streams, Matrix, RngStream};
pub use losses::{LossKind, Targets};
pub use maccal::{
    masked_inference, run_maccal, run_stage2, stage1_train, train, train_baseline, AblationRow,
    ControllerMode, ControllerSign, EpochStats, HeadChoice, MaskResample, Method, RunOutput,
    SparsityController, TrainConfig, TrainedModel,
};
pub use metrics::{CalibrationReport, OodScores, PredictionSet, ReliabilityBin};
pub use model::{Activation, FeatureExtractor, Head, HeadKind, MaskScope, MaskedHead, Sgd};
pub use posthoc::{fit_temperature, Temperature};
pub use report::{Checkpoint, RunReport};
pub use scalar::Real;

pub type MatrixF64 = Matrix<f64>;
pub type MatrixF32 = Matrix<f32>;
pub type DatasetF64 = Dataset<f64>;
pub type DatasetF32 = Dataset<f32>;
pub type SplitF64 = Split<f64>;
pub type ModelF64 = TrainedModel<f64>;
pub type ModelF32 = TrainedModel<f32>;
pub type CheckpointF64 = Checkpoint<f64>;
