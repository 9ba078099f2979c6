//! Line-oriented key=value serialization of [`TrainConfig`].
//!
//! Nested keys are dotted (`arch.base_channels=32`). Unknown keys and
//! duplicates are errors naming the line; missing keys fall back to the
//! defaults, so a config file only has to state what it changes. Blank
//! lines and `#` comments are ignored. Float formatting uses the shortest
//! round-tripping form, so write-then-parse is exact.

use std::fmt;
use std::path::PathBuf;

use crate::losses::{AdvMode, Distance};
use crate::networks::ModelKind;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub line: usize,
    pub detail: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config line {}: {}", self.line, self.detail)
    }
}

impl std::error::Error for ConfigError {}

pub fn to_kv_text(cfg: &TrainConfig) -> String {
    let adv_mode = match cfg.weights.adv_mode {
        AdvMode::LeastSquares => "least_squares",
        AdvMode::CrossEntropy => "cross_entropy",
    };
    let distance = match cfg.weights.distance {
        Distance::L1 => "l1",
        Distance::L2 => "l2",
    };
    format!(
        "arch.image_size={}\n\
         arch.base_channels={}\n\
         arch.encoder_downsamples={}\n\
         arch.translator_resblocks={}\n\
         arch.disc_layers={}\n\
         weights.lambda_cyc={}\n\
         weights.lambda_dev_a={}\n\
         weights.lambda_dev_b={}\n\
         weights.use_dev_term_b={}\n\
         weights.adv_mode={}\n\
         weights.distance={}\n\
         optimizer.lr={}\n\
         optimizer.beta1={}\n\
         optimizer.beta2={}\n\
         optimizer.eps={}\n\
         train.epochs={}\n\
         train.batch_size={}\n\
         train.seed={}\n\
         train.model={}\n\
         train.checkpoint_every={}\n\
         train.scope_audit_every={}\n\
         train.detach_adversarial={}\n\
         data.root={}\n\
         out.dir={}\n",
        cfg.arch.image_size,
        cfg.arch.base_channels,
        cfg.arch.encoder_downsamples,
        cfg.arch.translator_resblocks,
        cfg.arch.disc_layers,
        cfg.weights.lambda_cyc,
        cfg.weights.lambda_dev_a,
        cfg.weights.lambda_dev_b,
        cfg.weights.use_dev_term_b,
        adv_mode,
        distance,
        cfg.optimizer.lr,
        cfg.optimizer.beta1,
        cfg.optimizer.beta2,
        cfg.optimizer.eps,
        cfg.epochs,
        cfg.batch_size,
        cfg.seed,
        cfg.model.as_str(),
        cfg.checkpoint_every,
        cfg.scope_audit_every,
        cfg.detach_adversarial,
        cfg.data_root.display(),
        cfg.out_dir.display(),
    )
}

pub fn from_kv_text(text: &str) -> Result<TrainConfig, ConfigError> {
    let mut cfg = TrainConfig::default();
    let mut seen: Vec<String> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |detail: String| ConfigError {
            line: line_no,
            detail,
        };
        let Some((key, value)) = line.split_once('=') else {
            return Err(err(format!("expected key=value, got '{line}'")));
        };
        let key = key.trim();
        let value = value.trim();
        if seen.iter().any(|k| k == key) {
            return Err(err(format!("duplicate key '{key}'")));
        }
        seen.push(key.to_string());

        macro_rules! parse {
            ($ty:ty) => {
                value
                    .parse::<$ty>()
                    .map_err(|_| err(format!("bad value '{value}' for {key}")))?
            };
        }
        match key {
            "arch.image_size" => cfg.arch.image_size = parse!(usize),
            "arch.base_channels" => cfg.arch.base_channels = parse!(usize),
            "arch.encoder_downsamples" => cfg.arch.encoder_downsamples = parse!(usize),
            "arch.translator_resblocks" => cfg.arch.translator_resblocks = parse!(usize),
            "arch.disc_layers" => cfg.arch.disc_layers = parse!(usize),
            "weights.lambda_cyc" => cfg.weights.lambda_cyc = parse!(f64),
            "weights.lambda_dev_a" => cfg.weights.lambda_dev_a = parse!(f64),
            "weights.lambda_dev_b" => cfg.weights.lambda_dev_b = parse!(f64),
            "weights.use_dev_term_b" => cfg.weights.use_dev_term_b = parse!(bool),
            "weights.adv_mode" => {
                cfg.weights.adv_mode = match value {
                    "least_squares" => AdvMode::LeastSquares,
                    "cross_entropy" => AdvMode::CrossEntropy,
                    other => return Err(err(format!("unknown adv_mode '{other}'"))),
                }
            }
            "weights.distance" => {
                cfg.weights.distance = match value {
                    "l1" => Distance::L1,
                    "l2" => Distance::L2,
                    other => return Err(err(format!("unknown distance '{other}'"))),
                }
            }
            "optimizer.lr" => cfg.optimizer.lr = parse!(f64),
            "optimizer.beta1" => cfg.optimizer.beta1 = parse!(f64),
            "optimizer.beta2" => cfg.optimizer.beta2 = parse!(f64),
            "optimizer.eps" => cfg.optimizer.eps = parse!(f64),
            "train.epochs" => cfg.epochs = parse!(usize),
            "train.batch_size" => cfg.batch_size = parse!(usize),
            "train.seed" => cfg.seed = parse!(u64),
            "train.model" => {
                cfg.model = match value {
                    "proposed" => ModelKind::Proposed,
                    "baseline" => ModelKind::Baseline,
                    other => return Err(err(format!("unknown model '{other}'"))),
                }
            }
            "train.checkpoint_every" => cfg.checkpoint_every = parse!(usize),
            "train.scope_audit_every" => cfg.scope_audit_every = parse!(usize),
            "train.detach_adversarial" => cfg.detach_adversarial = parse!(bool),
            "data.root" => cfg.data_root = PathBuf::from(value),
            "out.dir" => cfg.out_dir = PathBuf::from(value),
            other => return Err(err(format!("unknown key '{other}'"))),
        }
    }
    Ok(cfg)
}
