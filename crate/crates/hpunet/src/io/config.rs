//! Plain-text configuration: one `key = value` per line, `#` comments,
//! dot-namespaced keys (`model.*`, `train.*`). Every key has a default, so
//! an empty file resolves to the full defaults table, and `resolved_text`
//! serializes a configuration so that parsing it back reproduces the inputs
//! exactly.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::model::ModelConfig;
use crate::trainer::{Objective, TrainConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got {content:?}")]
    Malformed { line: usize, content: String },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: duplicate key {key:?}")]
    DuplicateKey { line: usize, key: String },
    #[error("line {line}: bad value for {key:?}: {message}")]
    BadValue {
        line: usize,
        key: String,
        message: String,
    },
    #[error("invalid model config: {0}")]
    Model(String),
    #[error("invalid train config: {0}")]
    Train(String),
}

fn bad(line: usize, key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::BadValue {
        line,
        key: key.to_string(),
        message: message.into(),
    }
}

fn p_i64(line: usize, key: &str, v: &str) -> Result<i64, ConfigError> {
    v.parse::<i64>()
        .map_err(|e| bad(line, key, format!("{e} (got {v:?})")))
}

fn p_usize(line: usize, key: &str, v: &str) -> Result<usize, ConfigError> {
    let n = p_i64(line, key, v)?;
    if n < 0 {
        return Err(bad(line, key, format!("{n} is out of range (must be >= 0)")));
    }
    Ok(n as usize)
}

fn p_u64(line: usize, key: &str, v: &str) -> Result<u64, ConfigError> {
    v.parse::<u64>()
        .map_err(|e| bad(line, key, format!("{e} (got {v:?})")))
}

fn p_f64(line: usize, key: &str, v: &str) -> Result<f64, ConfigError> {
    let x = v
        .parse::<f64>()
        .map_err(|e| bad(line, key, format!("{e} (got {v:?})")))?;
    if !x.is_finite() {
        return Err(bad(line, key, format!("{v:?} is not finite")));
    }
    Ok(x)
}

fn p_bool(line: usize, key: &str, v: &str) -> Result<bool, ConfigError> {
    match v {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        other => Err(bad(line, key, format!("expected true/false, got {other:?}"))),
    }
}

fn p_enable_list(line: usize, key: &str, v: &str) -> Result<Vec<bool>, ConfigError> {
    v.split(',')
        .map(|item| p_bool(line, key, item.trim()))
        .collect()
}

fn p_schedule(line: usize, key: &str, v: &str) -> Result<Vec<(usize, f64)>, ConfigError> {
    let mut out = Vec::new();
    for item in v.split(',') {
        let item = item.trim();
        let (step, value) = item
            .split_once(':')
            .ok_or_else(|| bad(line, key, format!("expected step:value, got {item:?}")))?;
        out.push((
            p_usize(line, key, step.trim())?,
            p_f64(line, key, value.trim())?,
        ));
    }
    Ok(out)
}

/// Parses a configuration, starting from the full defaults table
/// (`ModelConfig::default()` / `TrainConfig::default()`) and applying one
/// override per line. Unknown and duplicate keys are errors; all values are
/// type- and range-checked with the offending line number.
pub fn parse_config(text: &str) -> Result<(ModelConfig, TrainConfig), ConfigError> {
    let mut model = ModelConfig::default();
    let mut train = TrainConfig::default();
    // The objective is assembled at the end from three keys.
    let mut objective_kind = match train.objective {
        Objective::Elbo { .. } => "elbo",
        Objective::Geco { .. } => "geco",
    }
    .to_string();
    let mut beta = 1.0f64;
    let mut kappa = 0.05f64;
    match train.objective {
        Objective::Elbo { beta: b } => beta = b,
        Objective::Geco { kappa: k } => kappa = k,
    }

    let mut seen: BTreeSet<String> = BTreeSet::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        };
        let content = content.trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content.split_once('=').ok_or(ConfigError::Malformed {
            line,
            content: content.to_string(),
        })?;
        let key = key.trim();
        let v = value.trim();
        if v.is_empty() {
            return Err(ConfigError::Malformed {
                line,
                content: content.to_string(),
            });
        }
        if !seen.insert(key.to_string()) {
            return Err(ConfigError::DuplicateKey {
                line,
                key: key.to_string(),
            });
        }
        match key {
            "model.input_channels" => model.input_channels = p_usize(line, key, v)?,
            "model.num_classes" => model.num_classes = p_usize(line, key, v)?,
            "model.total_scales" => model.total_scales = p_usize(line, key, v)?,
            "model.latent_scales" => model.latent_scales = p_usize(line, key, v)?,
            "model.base_channels" => model.base_channels = p_usize(line, key, v)?,
            "model.channel_cap_doublings" => {
                model.channel_cap_doublings = p_usize(line, key, v)?
            }
            "model.res_blocks_per_scale" => model.res_blocks_per_scale = p_usize(line, key, v)?,
            "model.latents_per_position" => model.latents_per_position = p_usize(line, key, v)?,
            "model.logsigma_clamp_lo" => model.logsigma_clamp.0 = p_f64(line, key, v)?,
            "model.logsigma_clamp_hi" => model.logsigma_clamp.1 = p_f64(line, key, v)?,
            "model.latent_enable" => model.latent_enable = p_enable_list(line, key, v)?,
            "train.iterations" => train.iterations = p_usize(line, key, v)?,
            "train.batch_size" => train.batch_size = p_usize(line, key, v)?,
            "train.lr_schedule" => train.lr_schedule = p_schedule(line, key, v)?,
            "train.weight_decay" => train.weight_decay = p_f64(line, key, v)?,
            "train.objective" => match v {
                "elbo" | "geco" => objective_kind = v.to_string(),
                other => {
                    return Err(bad(line, key, format!("expected elbo or geco, got {other:?}")))
                }
            },
            "train.beta" => beta = p_f64(line, key, v)?,
            "train.kappa" => kappa = p_f64(line, key, v)?,
            "train.topk_k" => train.topk_k = p_f64(line, key, v)?,
            "train.seed" => train.seed = p_u64(line, key, v)?,
            "train.eval_every" => train.eval_every = p_usize(line, key, v)?,
            "train.checkpoint_every" => train.checkpoint_every = p_usize(line, key, v)?,
            "train.augment_hflip" => train.augment_hflip = p_bool(line, key, v)?,
            "train.augment_translate" => train.augment_translate = p_bool(line, key, v)?,
            "train.geco_gamma" => train.geco.ema_decay = p_f64(line, key, v)?,
            "train.geco_eta" => train.geco.step_size = p_f64(line, key, v)?,
            "train.geco_lambda_init" => train.geco.lambda_init = p_f64(line, key, v)?,
            "train.geco_lambda_min" => train.geco.lambda_bounds.0 = p_f64(line, key, v)?,
            "train.geco_lambda_max" => train.geco.lambda_bounds.1 = p_f64(line, key, v)?,
            other => {
                return Err(ConfigError::UnknownKey {
                    line,
                    key: other.to_string(),
                })
            }
        }
    }

    // When the scale count changes without an explicit enable list, keep the
    // default of all-enabled at the new length.
    if !seen.contains("model.latent_enable") {
        model.latent_enable = vec![true; model.latent_scales];
    }
    train.objective = match objective_kind.as_str() {
        "elbo" => Objective::Elbo { beta },
        _ => Objective::Geco { kappa },
    };

    model
        .validate()
        .map_err(|e| ConfigError::Model(e.to_string()))?;
    train
        .validate()
        .map_err(|e| ConfigError::Train(e.to_string()))?;
    Ok((model, train))
}

fn fmt_bool_list(list: &[bool]) -> String {
    list.iter()
        .map(|&b| if b { "1" } else { "0" })
        .collect::<Vec<_>>()
        .join(",")
}

fn fmt_schedule(schedule: &[(usize, f64)]) -> String {
    schedule
        .iter()
        .map(|&(s, v)| format!("{s}:{v}"))
        .collect::<Vec<_>>()
        .join(",")
}

/// Serializes a resolved configuration (every key explicit, defaults
/// included). `parse_config(resolved_text(m, t))` reproduces `(m, t)`
/// exactly; float formatting uses the shortest round-tripping decimal.
pub fn resolved_text(model: &ModelConfig, train: &TrainConfig) -> String {
    let (objective, beta, kappa) = match train.objective {
        Objective::Elbo { beta } => ("elbo", beta, 0.05),
        Objective::Geco { kappa } => ("geco", 1.0, kappa),
    };
    let mut out = String::new();
    out.push_str("# resolved configuration\n");
    out.push_str(&format!("model.input_channels = {}\n", model.input_channels));
    out.push_str(&format!("model.num_classes = {}\n", model.num_classes));
    out.push_str(&format!("model.total_scales = {}\n", model.total_scales));
    out.push_str(&format!("model.latent_scales = {}\n", model.latent_scales));
    out.push_str(&format!("model.base_channels = {}\n", model.base_channels));
    out.push_str(&format!(
        "model.channel_cap_doublings = {}\n",
        model.channel_cap_doublings
    ));
    out.push_str(&format!(
        "model.res_blocks_per_scale = {}\n",
        model.res_blocks_per_scale
    ));
    out.push_str(&format!(
        "model.latents_per_position = {}\n",
        model.latents_per_position
    ));
    out.push_str(&format!("model.logsigma_clamp_lo = {}\n", model.logsigma_clamp.0));
    out.push_str(&format!("model.logsigma_clamp_hi = {}\n", model.logsigma_clamp.1));
    out.push_str(&format!(
        "model.latent_enable = {}\n",
        fmt_bool_list(&model.latent_enable)
    ));
    out.push_str(&format!("train.iterations = {}\n", train.iterations));
    out.push_str(&format!("train.batch_size = {}\n", train.batch_size));
    out.push_str(&format!(
        "train.lr_schedule = {}\n",
        fmt_schedule(&train.lr_schedule)
    ));
    out.push_str(&format!("train.weight_decay = {}\n", train.weight_decay));
    out.push_str(&format!("train.objective = {objective}\n"));
    out.push_str(&format!("train.beta = {beta}\n"));
    out.push_str(&format!("train.kappa = {kappa}\n"));
    out.push_str(&format!("train.topk_k = {}\n", train.topk_k));
    out.push_str(&format!("train.seed = {}\n", train.seed));
    out.push_str(&format!("train.eval_every = {}\n", train.eval_every));
    out.push_str(&format!("train.checkpoint_every = {}\n", train.checkpoint_every));
    out.push_str(&format!("train.augment_hflip = {}\n", train.augment_hflip));
    out.push_str(&format!(
        "train.augment_translate = {}\n",
        train.augment_translate
    ));
    out.push_str(&format!("train.geco_gamma = {}\n", train.geco.ema_decay));
    out.push_str(&format!("train.geco_eta = {}\n", train.geco.step_size));
    out.push_str(&format!(
        "train.geco_lambda_init = {}\n",
        train.geco.lambda_init
    ));
    out.push_str(&format!(
        "train.geco_lambda_min = {}\n",
        train.geco.lambda_bounds.0
    ));
    out.push_str(&format!(
        "train.geco_lambda_max = {}\n",
        train.geco.lambda_bounds.1
    ));
    out
}
