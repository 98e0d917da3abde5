//! Effective training configuration: flag > config file > default.

use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use maccal_core::{
    AblationRow, Activation, ControllerMode, ControllerSign, HeadChoice, MaskResample, MaskScope,
    Method, TrainConfig,
};
use serde::de::DeserializeOwned;

/// Parses a value through its serde string form.
fn serde_str<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

fn method(s: &str) -> Result<Method, String> {
    Method::parse(s).map_err(|e| e.to_string())
}

fn ablation(s: &str) -> Result<AblationRow, String> {
    AblationRow::parse(s).map_err(|e| e.to_string())
}

fn on_off(s: &str) -> Result<bool, String> {
    match s {
        "on" | "true" => Ok(true),
        "off" | "false" => Ok(false),
        _ => Err(format!("expected on|off, got {s:?}")),
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct TrainArgs {
    /// TOML file whose keys mirror the training configuration fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// vanilla | ls | focal | flsd-like | mixup | maccal | mixup+maccal
    #[arg(long, value_parser = method)]
    pub method: Option<Method>,
    /// Preset for one rung of the component ablation; individual flags still win.
    #[arg(long, value_parser = ablation)]
    pub ablation: Option<AblationRow>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Comma-separated extractor widths, e.g. 256,256.
    #[arg(long, value_delimiter = ',')]
    pub hidden_widths: Option<Vec<usize>>,
    #[arg(long)]
    pub stage1_epochs: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    pub stage1_lr: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub stage1_weight_decay: Option<f64>,
    /// Mixup Beta(α, α) parameter.
    #[arg(long, allow_negative_numbers = true)]
    pub alpha: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub focal_gamma: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub smoothing: Option<f64>,
    #[arg(long)]
    pub stage2_epochs: Option<usize>,
    /// Stage-2 step size.
    #[arg(long, allow_negative_numbers = true)]
    pub lr: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub stage2_weight_decay: Option<f64>,
    /// linear | bottleneck
    #[arg(long, value_parser = serde_str::<HeadChoice>)]
    pub head: Option<HeadChoice>,
    /// Bottleneck width.
    #[arg(long)]
    pub hidden: Option<usize>,
    /// relu | identity
    #[arg(long, value_parser = serde_str::<Activation>)]
    pub bottleneck_activation: Option<Activation>,
    /// on | off
    #[arg(long, value_parser = on_off)]
    pub masking: Option<bool>,
    /// epoch | batch
    #[arg(long, value_parser = serde_str::<MaskResample>)]
    pub mask_resample: Option<MaskResample>,
    /// all | final_only
    #[arg(long, value_parser = serde_str::<MaskScope>)]
    pub mask_scope: Option<MaskScope>,
    /// on | off
    #[arg(long, value_parser = on_off)]
    pub gradient_restriction: Option<bool>,
    /// fixed | static_adaptive | decaying_adaptive
    #[arg(long, value_parser = serde_str::<ControllerMode>)]
    pub controller: Option<ControllerMode>,
    /// literal | negated
    #[arg(long, value_parser = serde_str::<ControllerSign>)]
    pub controller_sign: Option<ControllerSign>,
    #[arg(long, allow_negative_numbers = true)]
    pub q_init: Option<f64>,
    /// Accuracy down-weighting factor of the retention update.
    #[arg(long, allow_negative_numbers = true)]
    pub gamma: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub eta_init: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub eta_final: Option<f64>,
    /// on | off: measure epoch statistics under a fresh mask draw.
    #[arg(long, value_parser = on_off)]
    pub stats_masked: Option<bool>,
    #[arg(long)]
    pub num_bins: Option<usize>,
}

impl TrainArgs {
    pub fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?
            }
            None => TrainConfig::default(),
        };
        if let Some(row) = self.ablation {
            row.apply(&mut cfg);
        }
        macro_rules! set {
            ($($flag:ident => $field:ident),* $(,)?) => {
                $(if let Some(v) = &self.$flag { cfg.$field = v.clone(); })*
            };
        }
        set!(
            method => method,
            seed => seed,
            batch_size => batch_size,
            hidden_widths => hidden_widths,
            stage1_epochs => stage1_epochs,
            stage1_lr => stage1_lr,
            stage1_weight_decay => stage1_weight_decay,
            alpha => mixup_alpha,
            focal_gamma => focal_gamma,
            smoothing => smoothing,
            stage2_epochs => stage2_epochs,
            lr => learning_rate,
            stage2_weight_decay => stage2_weight_decay,
            head => head_kind,
            bottleneck_activation => bottleneck_activation,
            masking => masking,
            mask_resample => mask_resample,
            mask_scope => mask_scope,
            gradient_restriction => gradient_restriction,
            controller => controller,
            controller_sign => controller_sign,
            q_init => q_init,
            gamma => gamma,
            eta_init => eta_init,
            eta_final => eta_final,
            stats_masked => stats_masked,
            num_bins => num_bins,
        );
        if self.hidden.is_some() {
            cfg.hidden = self.hidden;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// TOML dump of the effective configuration.
pub fn to_toml(cfg: &TrainConfig) -> Result<String> {
    Ok(toml::to_string(cfg)?)
}
