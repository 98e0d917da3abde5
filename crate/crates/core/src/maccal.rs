//! Two-stage mask-based classifier calibration.
//!
//! Stage 1 trains an MLP extractor and a linear head jointly. The transition
//! freezes the extractor and builds a fresh head. Stage 2 retrains only that
//! head under per-step Bernoulli weight masks whose retention probability
//! `q` follows the clipped confidence–accuracy feedback
//! `q_t = clamp(q_{t−1} + clip(Conf_t − γ·Acc_t, −η_t, η_t), 0, 1)` with
//! `η_t = η_init · (η_final / η_init)^{t/T}`.
//!
//! Single-stage baselines (cross-entropy, label smoothing, focal, mixup) run
//! through the same stage-1 loop.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datasets::{mix_with_lambdas, Dataset, Split};
use crate::error::{Error, Result};
use crate::kernel::{streams, Matrix, RngStream};
use crate::losses::{LossKind, Targets, DEFAULT_FOCAL_GAMMA, DEFAULT_SMOOTHING};
use crate::metrics::{running_mean, CalibrationReport, PredictionSet, DEFAULT_BINS};
use crate::model::{
    default_hidden, reinit_head, Activation, FeatureExtractor, Head, HeadKind, MaskScope,
    MaskedHead, Sgd,
};
use crate::scalar::Real;

pub const ETA_INIT: f64 = 0.1;
pub const ETA_FINAL: f64 = 0.001;
pub const Q_INIT: f64 = 0.5;
pub const DEFAULT_GAMMA: f64 = 0.9;

/// Training recipe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Vanilla,
    Ls,
    Focal,
    FlsdLike,
    Mixup,
    Maccal,
    #[serde(rename = "mixup+maccal")]
    MixupMaccal,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Vanilla,
        Method::Ls,
        Method::Focal,
        Method::FlsdLike,
        Method::Mixup,
        Method::Maccal,
        Method::MixupMaccal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Vanilla => "vanilla",
            Method::Ls => "ls",
            Method::Focal => "focal",
            Method::FlsdLike => "flsd-like",
            Method::Mixup => "mixup",
            Method::Maccal => "maccal",
            Method::MixupMaccal => "mixup+maccal",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::domain(format!("unknown method {s:?}")))
    }

    pub fn is_two_stage(self) -> bool {
        matches!(self, Method::Maccal | Method::MixupMaccal)
    }

    pub fn uses_mixup(self) -> bool {
        matches!(self, Method::Mixup | Method::MixupMaccal)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerMode {
    /// `q` stays at its initial value.
    Fixed,
    /// Clip bound fixed at `η_init`.
    StaticAdaptive,
    /// Clip bound decays from `η_init` to `η_final`.
    #[default]
    DecayingAdaptive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerSign {
    /// `q` grows when confidence exceeds `γ·Acc`.
    #[default]
    Literal,
    /// `q` shrinks when confidence exceeds `γ·Acc`.
    Negated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskResample {
    Epoch,
    #[default]
    Batch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadChoice {
    Linear,
    #[default]
    Bottleneck,
}

/// Every knob of a run. Field names double as config-file keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    pub seed: u64,
    pub batch_size: usize,
    /// Widths of the extractor's hidden layers; the last is the feature dim.
    pub hidden_widths: Vec<usize>,

    pub stage1_epochs: usize,
    pub stage1_lr: f64,
    pub stage1_momentum: f64,
    pub stage1_weight_decay: f64,
    /// Fractions of stage 1 after which the learning rate is multiplied by
    /// `lr_decay`.
    pub lr_milestones: Vec<f64>,
    pub lr_decay: f64,
    pub focal_gamma: f64,
    pub smoothing: f64,
    pub mixup_alpha: f64,

    pub stage2_epochs: usize,
    /// Stage-2 step size.
    pub learning_rate: f64,
    pub stage2_momentum: f64,
    pub stage2_weight_decay: f64,
    pub head_kind: HeadChoice,
    /// Bottleneck width; `max(2K, d/2)` when unset.
    pub hidden: Option<usize>,
    pub bottleneck_activation: Activation,
    pub masking: bool,
    pub mask_resample: MaskResample,
    pub mask_scope: MaskScope,
    pub gradient_restriction: bool,
    pub controller: ControllerMode,
    pub controller_sign: ControllerSign,
    pub q_init: f64,
    pub gamma: f64,
    pub eta_init: f64,
    pub eta_final: f64,
    /// Measure `Acc_t`/`Conf_t` under a fresh mask draw instead of all-ones.
    pub stats_masked: bool,

    pub num_bins: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Maccal,
            seed: 1,
            batch_size: 128,
            hidden_widths: vec![256, 256],
            stage1_epochs: 100,
            stage1_lr: 0.05,
            stage1_momentum: 0.9,
            stage1_weight_decay: 5e-4,
            lr_milestones: vec![150.0 / 350.0, 250.0 / 350.0],
            lr_decay: 0.1,
            focal_gamma: DEFAULT_FOCAL_GAMMA,
            smoothing: DEFAULT_SMOOTHING,
            mixup_alpha: 1.0,
            stage2_epochs: 40,
            learning_rate: 0.1,
            stage2_momentum: 0.9,
            stage2_weight_decay: 0.0,
            head_kind: HeadChoice::Bottleneck,
            hidden: None,
            bottleneck_activation: Activation::Relu,
            masking: true,
            mask_resample: MaskResample::Batch,
            mask_scope: MaskScope::All,
            gradient_restriction: true,
            controller: ControllerMode::DecayingAdaptive,
            controller_sign: ControllerSign::Literal,
            q_init: Q_INIT,
            gamma: DEFAULT_GAMMA,
            eta_init: ETA_INIT,
            eta_final: ETA_FINAL,
            stats_masked: false,
            num_bins: DEFAULT_BINS,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("num_bins", self.num_bins),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::domain(format!("{name} must be positive")));
            }
        }
        if self.hidden_widths.contains(&0) {
            return Err(Error::domain("hidden widths must be positive"));
        }
        for (name, v) in [
            ("stage1_lr", self.stage1_lr),
            ("learning_rate", self.learning_rate),
            ("mixup_alpha", self.mixup_alpha),
            ("eta_init", self.eta_init),
            ("eta_final", self.eta_final),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::domain(format!("{name} must be > 0, got {v}")));
            }
        }
        for (name, v) in [
            ("stage1_momentum", self.stage1_momentum),
            ("stage2_momentum", self.stage2_momentum),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::domain(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        if !(self.stage1_weight_decay >= 0.0) || !(self.stage2_weight_decay >= 0.0) {
            return Err(Error::domain("weight decay must be ≥ 0"));
        }
        if !(0.0..=1.0).contains(&self.q_init) {
            return Err(Error::domain(format!("q_init {} outside [0, 1]", self.q_init)));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::domain(format!("gamma {} outside (0, 1]", self.gamma)));
        }
        if self.method.is_two_stage() && self.stage2_epochs == 0 {
            return Err(Error::domain("stage2_epochs must be positive for two-stage methods"));
        }
        if self.lr_milestones.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::domain("lr milestones are fractions in [0, 1]"));
        }
        self.stage1_loss().validate()
    }

    /// Objective of the first (or only) stage.
    pub fn stage1_loss(&self) -> LossKind {
        match self.method {
            Method::Ls => LossKind::LabelSmoothing {
                epsilon: self.smoothing,
            },
            Method::Focal => LossKind::Focal {
                gamma: self.focal_gamma,
            },
            Method::FlsdLike => LossKind::FocalSampleDependent,
            _ => LossKind::CrossEntropy,
        }
    }

    pub fn stage1_mixup(&self) -> Option<f64> {
        self.method.uses_mixup().then_some(self.mixup_alpha)
    }

    pub fn head_kind_for(&self, dim: usize, num_classes: usize) -> HeadKind {
        match self.head_kind {
            HeadChoice::Linear => HeadKind::Linear,
            HeadChoice::Bottleneck => HeadKind::Bottleneck {
                hidden: self.hidden.unwrap_or_else(|| default_hidden(dim, num_classes)),
                activation: self.bottleneck_activation,
            },
        }
    }

    /// Stage-1 learning rate at `epoch` (0-based) after step decays.
    pub fn stage1_lr_at(&self, epoch: usize) -> f64 {
        let progress = epoch as f64 / self.stage1_epochs.max(1) as f64;
        let decays = self.lr_milestones.iter().filter(|&&m| progress >= m).count();
        self.stage1_lr * self.lr_decay.powi(decays as i32)
    }

    /// First 16 hex digits of SHA-256 over the canonical JSON encoding.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        crate::model::to_hex(&digest[..8])
    }
}

/// Rungs of the component ablation, each adding one piece to the previous.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationRow {
    Vanilla,
    MaskedRetraining,
    GradientRestriction,
    ClassifierRestructure,
    StaticAdaptiveSparsity,
    DecayingAdaptiveSparsity,
}

impl AblationRow {
    pub const LADDER: [AblationRow; 6] = [
        AblationRow::Vanilla,
        AblationRow::MaskedRetraining,
        AblationRow::GradientRestriction,
        AblationRow::ClassifierRestructure,
        AblationRow::StaticAdaptiveSparsity,
        AblationRow::DecayingAdaptiveSparsity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationRow::Vanilla => "vanilla",
            AblationRow::MaskedRetraining => "masked-retraining",
            AblationRow::GradientRestriction => "gradient-restriction",
            AblationRow::ClassifierRestructure => "classifier-restructure",
            AblationRow::StaticAdaptiveSparsity => "static-adaptive-sparsity",
            AblationRow::DecayingAdaptiveSparsity => "decaying-adaptive-sparsity",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::LADDER
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::domain(format!("unknown ablation row {s:?}")))
    }

    /// Sets the method and stage-2 flags for this rung.
    pub fn apply(self, cfg: &mut TrainConfig) {
        if self == AblationRow::Vanilla {
            cfg.method = Method::Vanilla;
            return;
        }
        let rank = Self::LADDER.iter().position(|&r| r == self).expect("rung on ladder");
        cfg.method = Method::Maccal;
        cfg.masking = true;
        cfg.gradient_restriction = rank >= 2;
        cfg.head_kind = if rank >= 3 {
            HeadChoice::Bottleneck
        } else {
            HeadChoice::Linear
        };
        cfg.controller = match rank {
            0..=3 => ControllerMode::Fixed,
            4 => ControllerMode::StaticAdaptive,
            _ => ControllerMode::DecayingAdaptive,
        };
    }
}

/// Adaptive retention probability with a clipped, optionally decaying step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityController {
    q: f64,
    t: usize,
    pub gamma: f64,
    pub eta_init: f64,
    pub eta_final: f64,
    pub total_epochs: usize,
    pub mode: ControllerMode,
    pub sign: ControllerSign,
}

/// Outcome of one controller update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparsityUpdate {
    pub q_prev: f64,
    pub q_next: f64,
    /// Clip bound used; 0 in fixed mode.
    pub eta: f64,
}

/// `η_t = η_init · (η_final / η_init)^{t/T}`, written as
/// `η_init^{1−t/T} · η_final^{t/T}` so both endpoints are exact.
pub fn clip_threshold(t: usize, total: usize, eta_init: f64, eta_final: f64) -> f64 {
    let frac = if total == 0 { 1.0 } else { t as f64 / total as f64 };
    eta_init.powf(1.0 - frac) * eta_final.powf(frac)
}

/// `clamp(q + clip(conf − γ·acc, −η, η), 0, 1)`.
pub fn sparsity_step(q: f64, conf: f64, acc: f64, gamma: f64, eta: f64) -> f64 {
    let delta = (conf - gamma * acc).clamp(-eta, eta);
    (q + delta).clamp(0.0, 1.0)
}

impl SparsityController {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            q: cfg.q_init,
            t: 0,
            gamma: cfg.gamma,
            eta_init: cfg.eta_init,
            eta_final: cfg.eta_final,
            total_epochs: cfg.stage2_epochs,
            mode: cfg.controller,
            sign: cfg.controller_sign,
        }
    }

    pub fn q(&self) -> f64 {
        self.q
    }

    pub fn epoch(&self) -> usize {
        self.t
    }

    /// Clip bound for epoch `t`.
    pub fn clip_threshold(&self, t: usize) -> f64 {
        match self.mode {
            ControllerMode::Fixed => 0.0,
            ControllerMode::StaticAdaptive => self.eta_init,
            ControllerMode::DecayingAdaptive => {
                clip_threshold(t, self.total_epochs, self.eta_init, self.eta_final)
            }
        }
    }

    /// Advances to the next epoch and moves `q` by the clipped gap.
    pub fn update(&mut self, acc: f64, conf: f64) -> SparsityUpdate {
        self.t += 1;
        let q_prev = self.q;
        let eta = self.clip_threshold(self.t);
        if self.mode != ControllerMode::Fixed {
            self.q = match self.sign {
                ControllerSign::Literal => sparsity_step(q_prev, conf, acc, self.gamma, eta),
                ControllerSign::Negated => {
                    let delta = (conf - self.gamma * acc).clamp(-eta, eta);
                    (q_prev - delta).clamp(0.0, 1.0)
                }
            };
        }
        SparsityUpdate {
            q_prev,
            q_next: self.q,
            eta,
        }
    }
}

/// Extractor plus classifier, evaluated without masks.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel<T> {
    pub extractor: FeatureExtractor<T>,
    pub head: Head<T>,
}

impl<T: Real> TrainedModel<T> {
    pub fn logits(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        self.head.logits(&self.extractor.forward(x)?)
    }

    pub fn predict(&self, data: &Dataset<T>) -> Result<PredictionSet<T>> {
        PredictionSet::from_logits(&self.logits(data.features())?, data.labels().to_vec())
    }

    pub fn evaluate(&self, data: &Dataset<T>, num_bins: usize) -> Result<CalibrationReport> {
        CalibrationReport::from_predictions(&self.predict(data)?, num_bins)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage1Epoch {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    /// Running accuracy over the epoch's mini-batches (primary labels).
    pub acc: f64,
}

/// Output of the first stage (or of a single-stage baseline).
#[derive(Debug, Clone)]
pub struct Stage1Model<T> {
    pub model: TrainedModel<T>,
    pub history: Vec<Stage1Epoch>,
}

fn batches(order: &[usize], batch_size: usize) -> impl Iterator<Item = &[usize]> {
    order.chunks(batch_size)
}

fn check_finite(value: f64, stage: &'static str, epoch: usize) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged {
            stage,
            epoch,
            detail: format!("loss is {value}"),
        })
    }
}

/// Joint mini-batch SGD of a fresh extractor and linear head on the
/// configured loss, with mixup when the method asks for it.
pub fn stage1_train<T: Real>(train: &Dataset<T>, cfg: &TrainConfig) -> Result<Stage1Model<T>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::domain("empty training set"));
    }
    let mut extractor = FeatureExtractor::random(
        train.dim(),
        &cfg.hidden_widths,
        &mut RngStream::new(cfg.seed, streams::EXTRACTOR_INIT),
    );
    let mut head = MaskedHead::new(
        Head::random(
            extractor.output_dim(),
            train.num_classes(),
            HeadKind::Linear,
            &mut RngStream::new(cfg.seed, streams::HEAD_INIT_STAGE1),
        )?,
        MaskScope::All,
    );
    let loss_kind = cfg.stage1_loss();
    let mixup = cfg.stage1_mixup();
    let mut opt_ext = Sgd::new(cfg.stage1_lr, cfg.stage1_momentum, cfg.stage1_weight_decay);
    let mut opt_head = Sgd::new(cfg.stage1_lr, cfg.stage1_momentum, cfg.stage1_weight_decay);
    let mut history = Vec::with_capacity(cfg.stage1_epochs);

    for epoch in 0..cfg.stage1_epochs {
        let lr = cfg.stage1_lr_at(epoch);
        opt_ext.lr = lr;
        opt_head.lr = lr;
        let order = RngStream::new(cfg.seed, streams::id(streams::SHUFFLE_STAGE1, epoch, 0))
            .permutation(train.len());
        let (mut loss_sum, mut hits) = (0.0, 0usize);
        for (b, idx) in batches(&order, cfg.batch_size).enumerate() {
            let x = train.features().select_rows(idx);
            let y: Vec<usize> = idx.iter().map(|&i| train.labels()[i]).collect();
            let (inputs, pairs, lambdas) = match mixup {
                Some(alpha) => {
                    let mut rng = RngStream::new(cfg.seed, streams::id(streams::MIXUP, epoch, b));
                    let partner = rng.permutation(idx.len());
                    let xb = x.select_rows(&partner);
                    let yb: Vec<usize> = partner.iter().map(|&p| y[p]).collect();
                    let lambdas = (0..idx.len())
                        .map(|_| rng.symmetric_beta(alpha).map(T::lit))
                        .collect::<Result<Vec<T>>>()?;
                    let mixed = mix_with_lambdas((&x, &y), (&xb, &yb), &lambdas, alpha)?;
                    (mixed.mixed_features, mixed.label_pairs, mixed.lambdas)
                }
                None => (x, Vec::new(), Vec::new()),
            };
            let targets = if mixup.is_some() {
                Targets::Mixup {
                    pairs: &pairs,
                    lambdas: &lambdas,
                }
            } else {
                Targets::Hard(&y)
            };

            let cache = extractor.forward_cached(&inputs)?;
            let head_cache = head.masked_forward(&cache.output)?;
            let out = loss_kind.evaluate(&head_cache.logits, &targets)?;
            let loss = out.loss.value.as_f64();
            check_finite(loss, "stage 1", epoch)?;
            loss_sum += loss * idx.len() as f64;
            hits += out
                .probs
                .argmax_rows()
                .iter()
                .zip(&y)
                .filter(|(p, t)| p == t)
                .count();

            let head_grads = head.backward_from_logits(&head_cache, &out.grad_logits, false)?;
            let ext_grads = extractor.backward(&cache, &head_grads.input)?;
            head.apply_update(&head_grads, &mut opt_head, false)?;
            extractor.apply_update(&ext_grads, &mut opt_ext)?;
        }
        history.push(Stage1Epoch {
            epoch,
            lr,
            loss: loss_sum / train.len() as f64,
            acc: hits as f64 / train.len() as f64,
        });
    }
    Ok(Stage1Model {
        model: TrainedModel {
            extractor,
            head: head.into_head(),
        },
        history,
    })
}

/// Freezes the extractor and builds a fresh stage-2 head from its own stream.
pub fn transition<T: Real>(
    extractor: &FeatureExtractor<T>,
    num_classes: usize,
    cfg: &TrainConfig,
) -> Result<(FeatureExtractor<T>, MaskedHead<T>)> {
    let mut frozen = extractor.clone();
    frozen.freeze();
    let dim = frozen.output_dim();
    let head = reinit_head(
        dim,
        num_classes,
        cfg.head_kind_for(dim, num_classes),
        cfg.mask_scope,
        &mut RngStream::new(cfg.seed, streams::HEAD_INIT_STAGE2),
    )?;
    Ok((frozen, head))
}

/// Per-epoch stage-2 log line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub acc: f64,
    pub conf: f64,
    /// Retention probability used for this epoch's mask draws.
    pub q: f64,
    /// Retention probability after the controller update.
    pub q_next: f64,
    pub eta: f64,
    pub loss: f64,
}

/// Mutable state of the second stage.
#[derive(Debug, Clone)]
pub struct Stage2State<T> {
    pub extractor: FeatureExtractor<T>,
    pub head: MaskedHead<T>,
    pub controller: SparsityController,
    opt: Sgd<T>,
    /// Cached `f(x; θ)` of the training set; valid because θ is frozen.
    train_features: Matrix<T>,
    train_labels: Vec<usize>,
}

impl<T: Real> Stage2State<T> {
    pub fn new(
        extractor: FeatureExtractor<T>,
        head: MaskedHead<T>,
        train: &Dataset<T>,
        cfg: &TrainConfig,
    ) -> Result<Self> {
        if !extractor.is_frozen() {
            return Err(Error::State("stage 2 requires a frozen extractor".into()));
        }
        let train_features = extractor.forward(train.features())?;
        Ok(Self {
            extractor,
            head,
            controller: SparsityController::new(cfg),
            opt: Sgd::new(cfg.learning_rate, cfg.stage2_momentum, cfg.stage2_weight_decay),
            train_features,
            train_labels: train.labels().to_vec(),
        })
    }

    pub fn train_features(&self) -> &Matrix<T> {
        &self.train_features
    }

    pub fn model(&self) -> TrainedModel<T> {
        TrainedModel {
            extractor: self.extractor.clone(),
            head: self.head.head().clone(),
        }
    }
}

/// One epoch of masked head retraining followed by the controller update.
pub fn stage2_epoch<T: Real>(state: &mut Stage2State<T>, cfg: &TrainConfig) -> Result<EpochStats> {
    let epoch = state.controller.epoch() + 1;
    let q = if cfg.masking { state.controller.q() } else { 1.0 };
    let n = state.train_labels.len();
    let order = RngStream::new(cfg.seed, streams::id(streams::SHUFFLE_STAGE2, epoch, 0)).permutation(n);

    if !cfg.masking {
        state.head.set_all_ones();
    } else if cfg.mask_resample == MaskResample::Epoch {
        state
            .head
            .sample_masks(q, &mut RngStream::new(cfg.seed, streams::id(streams::MASK, epoch, 0)))?;
    }

    let mut loss_sum = 0.0;
    for (b, idx) in batches(&order, cfg.batch_size).enumerate() {
        if cfg.masking && cfg.mask_resample == MaskResample::Batch {
            state
                .head
                .sample_masks(q, &mut RngStream::new(cfg.seed, streams::id(streams::MASK, epoch, b)))?;
        }
        let z = state.train_features.select_rows(idx);
        let y: Vec<usize> = idx.iter().map(|&i| state.train_labels[i]).collect();
        let cache = state.head.masked_forward(&z)?;
        let out = LossKind::CrossEntropy.evaluate(&cache.logits, &Targets::Hard(&y))?;
        let loss = out.loss.value.as_f64();
        check_finite(loss, "stage 2", epoch)?;
        loss_sum += loss * idx.len() as f64;
        let grads = state
            .head
            .backward_from_logits(&cache, &out.grad_logits, cfg.gradient_restriction)?;
        state
            .head
            .apply_update(&grads, &mut state.opt, cfg.gradient_restriction)?;
    }

    if cfg.masking && cfg.stats_masked {
        state.head.sample_masks(
            q,
            &mut RngStream::new(cfg.seed, streams::id(streams::STATS_MASK, epoch, 0)),
        )?;
    } else {
        state.head.set_all_ones();
    }
    let preds = PredictionSet::from_logits(
        &state.head.masked_logits(&state.train_features)?,
        state.train_labels.clone(),
    )?;
    let acc = crate::metrics::accuracy(&preds)?;
    let conf = crate::metrics::avg_confidence(&preds)?;
    state.head.set_all_ones();

    let update = if cfg.masking {
        state.controller.update(acc, conf)
    } else {
        let mut pinned = state.controller.clone();
        pinned.mode = ControllerMode::Fixed;
        let u = pinned.update(acc, conf);
        state.controller = SparsityController {
            mode: state.controller.mode,
            ..pinned
        };
        u
    };
    Ok(EpochStats {
        epoch,
        acc,
        conf,
        q,
        q_next: update.q_next,
        eta: update.eta,
        loss: loss_sum / n as f64,
    })
}

/// Stage-2 result: frozen extractor, retrained head and the epoch log.
#[derive(Debug, Clone)]
pub struct Stage2Outcome<T> {
    pub model: TrainedModel<T>,
    pub final_q: f64,
    pub stats: Vec<EpochStats>,
    /// Extractor hash at the transition and after every stage-2 epoch.
    pub extractor_hashes: Vec<String>,
}

/// Transition plus `T` stage-2 epochs on top of a stage-1 model.
pub fn run_stage2<T: Real>(
    stage1: &TrainedModel<T>,
    train: &Dataset<T>,
    cfg: &TrainConfig,
) -> Result<Stage2Outcome<T>> {
    cfg.validate()?;
    let (extractor, head) = transition(&stage1.extractor, train.num_classes(), cfg)?;
    let mut state = Stage2State::new(extractor, head, train, cfg)?;
    let mut hashes = vec![state.extractor.param_hash()];
    let mut stats = Vec::with_capacity(cfg.stage2_epochs);
    for _ in 0..cfg.stage2_epochs {
        stats.push(stage2_epoch(&mut state, cfg)?);
        hashes.push(state.extractor.param_hash());
    }
    Ok(Stage2Outcome {
        model: state.model(),
        final_q: state.controller.q(),
        stats,
        extractor_hashes: hashes,
    })
}

/// Everything a training run produces.
#[derive(Debug, Clone)]
pub struct RunOutput<T> {
    pub model: TrainedModel<T>,
    pub report: CalibrationReport,
    /// Stage-1 test report for two-stage methods.
    pub stage1_report: Option<CalibrationReport>,
    /// Stage-1 model for two-stage methods.
    pub stage1_model: Option<TrainedModel<T>>,
    pub stage1_history: Vec<Stage1Epoch>,
    pub stats: Vec<EpochStats>,
    pub final_q: Option<f64>,
}

/// Stage 1, transition, `T` stage-2 epochs, and an all-ones-mask test evaluation.
pub fn run_maccal<T: Real>(split: &Split<T>, cfg: &TrainConfig) -> Result<RunOutput<T>> {
    if !cfg.method.is_two_stage() {
        return Err(Error::domain(format!(
            "method {} is single-stage; use train_baseline",
            cfg.method.name()
        )));
    }
    let stage1 = stage1_train(&split.train, cfg)?;
    let stage1_report = stage1.model.evaluate(&split.test, cfg.num_bins)?;
    let stage2 = run_stage2(&stage1.model, &split.train, cfg)?;
    Ok(RunOutput {
        report: stage2.model.evaluate(&split.test, cfg.num_bins)?,
        model: stage2.model,
        stage1_report: Some(stage1_report),
        stage1_model: Some(stage1.model),
        stage1_history: stage1.history,
        stats: stage2.stats,
        final_q: Some(stage2.final_q),
    })
}

/// Single-stage training with the method's loss and augmentation.
pub fn train_baseline<T: Real>(split: &Split<T>, cfg: &TrainConfig) -> Result<RunOutput<T>> {
    if cfg.method.is_two_stage() {
        return Err(Error::domain(format!(
            "method {} is two-stage; use run_maccal",
            cfg.method.name()
        )));
    }
    let stage1 = stage1_train(&split.train, cfg)?;
    Ok(RunOutput {
        report: stage1.model.evaluate(&split.test, cfg.num_bins)?,
        model: stage1.model,
        stage1_report: None,
        stage1_model: None,
        stage1_history: stage1.history,
        stats: Vec::new(),
        final_q: None,
    })
}

/// Dispatches on the configured method.
pub fn train<T: Real>(split: &Split<T>, cfg: &TrainConfig) -> Result<RunOutput<T>> {
    if cfg.method.is_two_stage() {
        run_maccal(split, cfg)
    } else {
        train_baseline(split, cfg)
    }
}

/// Mean accuracy and confidence under random classifier masks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub q: f64,
    pub acc: f64,
    pub conf: f64,
}

/// Evaluates `data` with every head weight matrix masked by Bernoulli(`q`),
/// averaged over `draws` independent masks. Draw `i` uses the same stream
/// for every `q`, so masks are nested across retention levels.
pub fn masked_inference<T: Real>(
    model: &TrainedModel<T>,
    data: &Dataset<T>,
    q: f64,
    draws: usize,
    seed: u64,
) -> Result<ProbeResult> {
    if draws == 0 {
        return Err(Error::domain("masked inference needs at least one draw"));
    }
    let z = model.extractor.forward(data.features())?;
    let mut head = MaskedHead::new(model.head.clone(), MaskScope::All);
    let mut acc = Vec::with_capacity(draws);
    let mut conf = Vec::with_capacity(draws);
    for draw in 0..draws {
        head.sample_masks(q, &mut RngStream::new(seed, streams::id(streams::PROBE, draw, 0)))?;
        let preds = PredictionSet::from_logits(&head.masked_logits(&z)?, data.labels().to_vec())?;
        acc.push(crate::metrics::accuracy(&preds)?);
        conf.push(crate::metrics::avg_confidence(&preds)?);
    }
    Ok(ProbeResult {
        q,
        acc: running_mean(acc),
        conf: running_mean(conf),
    })
}

/// Stage-2 log as CSV: `epoch,acc,conf,q,eta,loss`.
pub fn stats_csv(stats: &[EpochStats]) -> String {
    let mut out = String::from("epoch,acc,conf,q,eta,loss\n");
    for s in stats {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            s.epoch, s.acc, s.conf, s.q, s.eta, s.loss
        ));
    }
    out
}
