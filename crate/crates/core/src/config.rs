//! Flat run configuration: one JSON object per run, unknown keys rejected,
//! absent keys filled with desk-scale defaults.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::card::{CardConfig, CondMode};
use crate::nn::BlockConfig;
use crate::optim::{AdamWConfig, Schedule};
use crate::regu::{ReguConfig, ReguKind};
use crate::tokenizer::TokenizerConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    TrainTokenizer,
    TrainGenerator,
    Reconstruct,
    Generate,
    SweepPrefix,
    CrossSwap,
    Gradcheck,
}

impl Mode {
    pub fn parse(s: &str) -> Result<Mode, ConfigError> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| ConfigError::Invalid(format!("unknown mode `{s}`")))
    }

    /// Modes that read a tokenizer checkpoint.
    pub fn needs_tokenizer(&self) -> bool {
        matches!(
            self,
            Mode::TrainGenerator | Mode::Reconstruct | Mode::Generate | Mode::SweepPrefix | Mode::CrossSwap
        )
    }

    /// Modes that read a generator checkpoint.
    pub fn needs_generator(&self) -> bool {
        matches!(self, Mode::Generate)
    }
}

#[derive(Debug)]
pub enum ConfigError {
    /// Syntax or unknown-key error from the JSON layer (carries line/column).
    Parse(String),
    Invalid(String),
    MissingPath { key: &'static str, path: String },
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Parse(e) => write!(f, "config parse error: {e}"),
            ConfigError::Invalid(e) => write!(f, "invalid config: {e}"),
            ConfigError::MissingPath { key, path } => {
                write!(f, "config key `{key}` points at missing file: {path}")
            }
        }
    }
}

impl std::error::Error for ConfigError {}

macro_rules! run_config {
    ($( $field:ident : $ty:ty = $default:expr ),* $(,)?) => {
        /// Fully resolved run configuration.
        #[derive(Debug, Clone, PartialEq, Serialize)]
        pub struct RunConfig {
            pub mode: Option<Mode>,
            $(pub $field: $ty,)*
        }

        /// Raw parse target: every key optional, unknown keys rejected.
        #[derive(Debug, Default, Deserialize)]
        #[serde(deny_unknown_fields)]
        struct RawConfig {
            mode: Option<Mode>,
            $($field: Option<$ty>,)*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                RunConfig {
                    mode: None,
                    $($field: $default,)*
                }
            }
        }

        impl RunConfig {
            fn from_raw(raw: RawConfig) -> RunConfig {
                let mut cfg = RunConfig::default();
                cfg.mode = raw.mode;
                $(if let Some(v) = raw.$field { cfg.$field = v; })*
                cfg
            }
        }
    };
}

run_config! {
    // dataset
    dataset_seed: u64 = 13,
    train_seed: u64 = 42,
    n_per_class: usize = 250,
    // tokenizer architecture
    image_size: usize = 32,
    patch: usize = 8,
    channels: usize = 1,
    width: usize = 64,
    latent_count: usize = 8,
    condition_count: usize = 1,
    num_classes: usize = 4,
    d_latent: usize = 16,
    enc_depth: usize = 3,
    dec_depth: usize = 3,
    heads: usize = 4,
    mlp_ratio: f64 = 4.0,
    // regularizer
    regu: String = "kl".to_string(),
    codebook_size: usize = 64,
    vq_beta: f64 = 0.25,
    softvq_tau: f64 = 0.1,
    softvq_entropy_weight: f64 = 0.0,
    kl_weight: f64 = 1e-4,
    aux_weight: f64 = 1.0,
    tokenizer_class_dropout: f64 = 0.0,
    // training
    steps: usize = 3000,
    batch_size: usize = 32,
    lr: f64 = 1e-3,
    min_lr: f64 = 1e-5,
    warmup_steps: usize = 100,
    weight_decay: f64 = 1e-4,
    class_dropout_p: f64 = 0.1,
    // generator architecture
    card_depth: usize = 4,
    card_width: usize = 64,
    card_heads: usize = 4,
    card_mlp_ratio: f64 = 1.0,
    head_depth: usize = 2,
    head_width: usize = 256,
    head_mlp_ratio: f64 = 4.0,
    sampling_steps: usize = 25,
    cfg_scale: f64 = 2.7,
    cond_mode: String = "shared".to_string(),
    // io
    out_dir: String = "out".to_string(),
    tokenizer_ckpt: String = String::new(),
    generator_ckpt: String = String::new(),
    input_image: String = String::new(),
    sample_index: usize = 0,
    class_id: Option<usize> = None,
    prefix_k: Option<usize> = None,
    samples_per_class: usize = 8,
}

/// Parse a flat JSON object; unknown keys are rejected with the offending
/// key named and syntax errors carry the line number.
pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let raw: RawConfig =
        serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
    let cfg = RunConfig::from_raw(raw);
    cfg.validate()?;
    Ok(cfg)
}

impl RunConfig {
    /// Canonical serialized form: pretty JSON with fields in struct order.
    pub fn canonical(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn to_json_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.latent_count < 1 {
            return Err(ConfigError::Invalid("latent_count: K >= 1 required".into()));
        }
        if self.condition_count < 1 {
            return Err(ConfigError::Invalid("condition_count: N >= 1 required".into()));
        }
        if self.image_size == 0 || self.patch == 0 || self.image_size % self.patch != 0 {
            return Err(ConfigError::Invalid(format!(
                "image_size {} must be a positive multiple of patch {}",
                self.image_size, self.patch
            )));
        }
        if self.num_classes < 1 || self.num_classes > 4 {
            return Err(ConfigError::Invalid(
                "num_classes: the shapes dataset defines 1..=4 classes".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(ConfigError::Invalid("batch_size must be >= 1".into()));
        }
        ReguKind::parse(&self.regu).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.parse_cond_mode()?;
        if self.condition_count * self.width != self.card_width {
            return Err(ConfigError::Invalid(format!(
                "card_width {} must equal condition_count*width = {}",
                self.card_width,
                self.condition_count * self.width
            )));
        }
        self.tokenizer_config()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.card_config()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    pub fn parse_cond_mode(&self) -> Result<CondMode, ConfigError> {
        match self.cond_mode.as_str() {
            "shared" => Ok(CondMode::Shared),
            "shared-unfrozen" => Ok(CondMode::SharedUnfrozen),
            "independent" => Ok(CondMode::Independent),
            other => Err(ConfigError::Invalid(format!(
                "cond_mode `{other}` (shared|shared-unfrozen|independent)"
            ))),
        }
    }

    pub fn tokenizer_config(&self) -> TokenizerConfig {
        TokenizerConfig {
            image_size: self.image_size,
            patch: self.patch,
            channels: self.channels,
            width: self.width,
            latent_count: self.latent_count,
            condition_count: self.condition_count,
            num_classes: self.num_classes,
            enc: BlockConfig {
                depth: self.enc_depth,
                width: self.width,
                heads: self.heads,
                mlp_ratio: self.mlp_ratio,
            },
            dec: BlockConfig {
                depth: self.dec_depth,
                width: self.width,
                heads: self.heads,
                mlp_ratio: self.mlp_ratio,
            },
            regu: ReguConfig {
                kind: ReguKind::parse(&self.regu).expect("validated"),
                d_latent: self.d_latent,
                codebook_size: self.codebook_size,
                vq_beta: self.vq_beta,
                softvq_tau: self.softvq_tau,
                softvq_entropy_weight: self.softvq_entropy_weight,
            },
            kl_weight: self.kl_weight,
            aux_weight: self.aux_weight,
        }
    }

    pub fn card_config(&self) -> CardConfig {
        CardConfig {
            depth: self.card_depth,
            width: self.card_width,
            heads: self.card_heads,
            mlp_ratio: self.card_mlp_ratio,
            head_depth: self.head_depth,
            head_width: self.head_width,
            head_mlp_ratio: self.head_mlp_ratio,
            token_count: self.latent_count,
            d_latent: self.d_latent,
            sampling_steps: self.sampling_steps,
            cfg_scale: self.cfg_scale,
            class_dropout_p: self.class_dropout_p,
            num_classes: self.num_classes,
            cond_mode: self.parse_cond_mode().expect("validated"),
        }
    }

    pub fn train_config(&self, class_dropout_p: f64) -> TrainConfig {
        // short runs shrink the warmup so the schedule invariant holds
        let warmup = self.warmup_steps.min(self.steps.saturating_sub(1));
        TrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            optim: AdamWConfig {
                lr: self.lr,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                weight_decay: self.weight_decay,
            },
            schedule: Schedule {
                base_lr: self.lr,
                min_lr: self.min_lr,
                warmup_steps: warmup,
                total_steps: self.steps.max(warmup + 2),
            },
            class_dropout_p,
        }
    }
}
