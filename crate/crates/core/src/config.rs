//! Experiment configuration.
//!
//! Configs are TOML files whose keys are the field names of
//! [`ExperimentConfig`]. Missing keys take their defaults, the `MCRLAB_SEED`
//! environment variable replaces `seed`, and explicit `key = value` overrides
//! are applied last. The result is validated before it is returned.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::Aggregation;
use crate::error::{McrError, Result};
use crate::rng::{self, StreamRng};

pub const SEED_ENV: &str = "MCRLAB_SEED";

/// Order of projection and pooling when building global embeddings.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignStrategy {
    /// Project every token into the common space, then pool.
    #[default]
    Mba,
    /// Pool in the encoder space, then project the pooled vector.
    Abm,
}

impl FromStr for AlignStrategy {
    type Err = McrError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mba" => Ok(AlignStrategy::Mba),
            "abm" => Ok(AlignStrategy::Abm),
            other => Err(McrError::config(
                "align_strategy",
                format!("unknown strategy `{other}` (expected mba or abm)"),
            )),
        }
    }
}

/// Which encoder inputs feed the contrastive objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    /// One masked forward per modality feeds every objective.
    #[default]
    MaskedOnly,
    /// Unmasked forwards feed the contrastive loss, masked ones the reconstruction losses.
    DualInput,
}

impl FromStr for InputMode {
    type Err = McrError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "masked_only" => Ok(InputMode::MaskedOnly),
            "dual_input" => Ok(InputMode::DualInput),
            other => Err(McrError::config(
                "input_mode",
                format!("unknown mode `{other}` (expected masked_only or dual_input)"),
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Square image side in pixels.
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub image_mask_rate: f64,
    pub text_mask_rate: f64,
    /// Body tokens per report, excluding [CLS] and [SEP].
    pub max_text_len: usize,
    pub vocab_size: usize,
    /// Encoder and decoder width.
    pub embed_dim: usize,
    /// Common-space width.
    pub proj_dim: usize,
    /// Hidden width of the projection perceptron; 0 selects a single affine map.
    pub proj_hidden: usize,
    pub vision_depth: usize,
    pub text_depth: usize,
    /// Depth of the image reconstruction decoder. The report decoder is a per-position head.
    pub decoder_depth: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub lambda_v: f64,
    pub lambda_r: f64,
    pub lambda_vrc: f64,
    pub lambda_mim: f64,
    pub lambda_mrm: f64,
    pub tau_init: f64,
    pub tau_min: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub peak_lr_encoders: f64,
    pub peak_lr_rest: f64,
    /// Final learning rate as a fraction of the peak.
    pub final_lr_ratio: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub seed: u64,
    pub align_strategy: AlignStrategy,
    pub input_mode: InputMode,
    pub agg: Aggregation,
    /// Whether the [CLS] token takes part in pooling.
    pub pool_cls: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            channels: 1,
            patch_size: 8,
            image_mask_rate: 0.5,
            text_mask_rate: 0.25,
            max_text_len: 32,
            vocab_size: 512,
            embed_dim: 64,
            proj_dim: 64,
            proj_hidden: 64,
            vision_depth: 4,
            text_depth: 4,
            decoder_depth: 2,
            num_heads: 4,
            mlp_ratio: 4,
            lambda_v: 0.75,
            lambda_r: 0.25,
            lambda_vrc: 0.1,
            lambda_mim: 1.0,
            lambda_mrm: 1.0,
            tau_init: 0.07,
            tau_min: 0.01,
            batch_size: 64,
            epochs: 30,
            warmup_epochs: 3,
            peak_lr_encoders: 1e-4,
            peak_lr_rest: 3e-4,
            final_lr_ratio: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.05,
            grad_clip: 1.0,
            seed: 0,
            align_strategy: AlignStrategy::Mba,
            input_mode: InputMode::MaskedOnly,
            agg: Aggregation::Max,
            pool_cls: true,
        }
    }
}

impl ExperimentConfig {
    /// Patches per image, `N`.
    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Values per flattened patch, `P * P * C`.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    /// Framed text length `M + 2`.
    pub fn text_len(&self) -> usize {
        self.max_text_len + 2
    }

    pub fn image_mask_count(&self) -> usize {
        crate::masking::mask_count(self.num_patches(), self.image_mask_rate)
    }

    /// Visible patches per masked image, `N_hat`.
    pub fn kept_patches(&self) -> usize {
        self.num_patches() - self.image_mask_count()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("channels", self.channels),
            ("patch_size", self.patch_size),
            ("max_text_len", self.max_text_len),
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("proj_dim", self.proj_dim),
            ("num_heads", self.num_heads),
            ("mlp_ratio", self.mlp_ratio),
            ("batch_size", self.batch_size),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(McrError::config(field, "must be positive"));
            }
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(McrError::config(
                "patch_size",
                format!(
                    "image_size {} not divisible by patch_size {}",
                    self.image_size, self.patch_size
                ),
            ));
        }
        if self.num_patches() < 2 {
            return Err(McrError::config(
                "patch_size",
                "image must contain at least 2 patches",
            ));
        }
        for (field, r) in [
            ("image_mask_rate", self.image_mask_rate),
            ("text_mask_rate", self.text_mask_rate),
        ] {
            if !(r > 0.0 && r < 1.0) {
                return Err(McrError::config(field, format!("{r} not inside (0, 1)")));
            }
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(McrError::config(
                "num_heads",
                format!("embed_dim {} not divisible by {}", self.embed_dim, self.num_heads),
            ));
        }
        if self.vocab_size < crate::preprocessing::RESERVED_TOKENS.len() {
            return Err(McrError::config("vocab_size", "smaller than the reserved tokens"));
        }
        for (field, w) in [
            ("lambda_v", self.lambda_v),
            ("lambda_r", self.lambda_r),
            ("lambda_vrc", self.lambda_vrc),
            ("lambda_mim", self.lambda_mim),
            ("lambda_mrm", self.lambda_mrm),
            ("weight_decay", self.weight_decay),
            ("peak_lr_encoders", self.peak_lr_encoders),
            ("peak_lr_rest", self.peak_lr_rest),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(McrError::config(field, format!("{w} must be finite and >= 0")));
            }
        }
        if (self.lambda_v + self.lambda_r - 1.0).abs() > 1e-9 {
            return Err(McrError::config(
                "lambda_v",
                format!(
                    "lambda_v + lambda_r must equal 1 (got {} + {})",
                    self.lambda_v, self.lambda_r
                ),
            ));
        }
        if !(self.tau_min > 0.0) {
            return Err(McrError::config("tau_min", "must be > 0"));
        }
        if !(self.tau_init >= self.tau_min) {
            return Err(McrError::config(
                "tau_init",
                format!("{} below tau_min {}", self.tau_init, self.tau_min),
            ));
        }
        if !(self.final_lr_ratio > 0.0 && self.final_lr_ratio <= 1.0) {
            return Err(McrError::config("final_lr_ratio", "must be in (0, 1]"));
        }
        for (field, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(McrError::config(field, "must be in [0, 1)"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(McrError::config("adam_eps", "must be > 0"));
        }
        if !(self.grad_clip > 0.0) {
            return Err(McrError::config("grad_clip", "must be > 0"));
        }
        if self.warmup_epochs > self.epochs {
            return Err(McrError::config("warmup_epochs", "exceeds epochs"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| McrError::Parse {
            what: "config".into(),
            reason: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Hex SHA-256 of the canonical TOML form; stored in checkpoints.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Random stream keyed to this config's seed and the given tags.
    pub fn rng(&self, tags: &[u64]) -> StreamRng {
        rng::stream(self.seed, tags)
    }

    /// Field names with their default values rendered as strings, in declaration order.
    pub fn default_fields() -> Vec<(String, String)> {
        let value = toml::Value::try_from(Self::default()).expect("config serializes");
        let table = value.as_table().expect("config is a table");
        // toml tables are sorted; recover declaration order from the serialized text.
        let text = Self::default().to_toml();
        text.lines()
            .filter_map(|line| line.split_once(" = ").map(|(k, _)| k.trim().to_string()))
            .filter_map(|k| table.get(&k).map(|v| (k.clone(), render_value(v))))
            .collect()
    }

    /// Applies `key = value` overrides. Values are parsed according to the
    /// type of the field they replace.
    pub fn with_overrides(&self, overrides: &[(String, String)]) -> Result<Self> {
        let value = toml::Value::try_from(self).expect("config serializes");
        let mut table = value.as_table().cloned().expect("config is a table");
        for (key, raw) in overrides {
            let key = key.trim_start_matches("--").replace('-', "_");
            let slot = table
                .get_mut(&key)
                .ok_or_else(|| McrError::config(key.clone(), "unknown config key"))?;
            *slot = parse_like(slot, raw).map_err(|reason| McrError::config(key.clone(), reason))?;
        }
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| McrError::Parse {
                what: "config overrides".into(),
                reason: e.to_string(),
            })?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn render_value(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn parse_like(current: &toml::Value, raw: &str) -> std::result::Result<toml::Value, String> {
    let raw = raw.trim();
    match current {
        toml::Value::Integer(_) => raw
            .parse::<i64>()
            .map(toml::Value::Integer)
            .map_err(|e| format!("expected integer, got `{raw}`: {e}")),
        toml::Value::Float(_) => raw
            .parse::<f64>()
            .map(toml::Value::Float)
            .map_err(|e| format!("expected number, got `{raw}`: {e}")),
        toml::Value::Boolean(_) => raw
            .parse::<bool>()
            .map(toml::Value::Boolean)
            .map_err(|e| format!("expected true/false, got `{raw}`: {e}")),
        toml::Value::String(_) => Ok(toml::Value::String(raw.to_ascii_lowercase().replace('-', "_"))),
        _ => Err("unsupported field type".into()),
    }
}

/// Loads a config file (or the defaults when `path` is `None`), then applies
/// the seed environment variable and finally `overrides`.
pub fn load_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<ExperimentConfig> {
    let base = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| McrError::io(p, e))?;
            let cfg: ExperimentConfig = toml::from_str(&text).map_err(|e| McrError::Parse {
                what: format!("config {}", p.display()),
                reason: e.to_string(),
            })?;
            cfg
        }
        None => ExperimentConfig::default(),
    };
    let mut all = Vec::new();
    if let Ok(seed) = std::env::var(SEED_ENV) {
        all.push(("seed".to_string(), seed));
    }
    all.extend_from_slice(overrides);
    base.with_overrides(&all)
}

/// The six component combinations of the ablation table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arm {
    A,
    B,
    C,
    D,
    E,
    F,
}

impl Arm {
    pub const ALL: [Arm; 6] = [Arm::A, Arm::B, Arm::C, Arm::D, Arm::E, Arm::F];

    pub fn letter(self) -> char {
        match self {
            Arm::A => 'a',
            Arm::B => 'b',
            Arm::C => 'c',
            Arm::D => 'd',
            Arm::E => 'e',
            Arm::F => 'f',
        }
    }

    /// Component set, e.g. `MC + MIM + MRM + MbA`. `Con` marks a contrastive
    /// term fed by separate unmasked forwards.
    pub fn components(self) -> &'static str {
        match self {
            Arm::A => "MC + MIM",
            Arm::B => "MC + MRM",
            Arm::C => "Con + MIM + MRM",
            Arm::D => "MC + MIM + MRM",
            Arm::E => "Con + MIM + MRM + MbA",
            Arm::F => "MC + MIM + MRM + MbA",
        }
    }

    /// Sets input mode, alignment order and reconstruction weights; every
    /// other field of `base` is kept. Arms without MbA use AbM.
    pub fn apply(self, base: &ExperimentConfig) -> ExperimentConfig {
        let (mode, strategy, mim, mrm) = match self {
            Arm::A => (InputMode::MaskedOnly, AlignStrategy::Abm, base.lambda_mim, 0.0),
            Arm::B => (InputMode::MaskedOnly, AlignStrategy::Abm, 0.0, base.lambda_mrm),
            Arm::C => (InputMode::DualInput, AlignStrategy::Abm, base.lambda_mim, base.lambda_mrm),
            Arm::D => (InputMode::MaskedOnly, AlignStrategy::Abm, base.lambda_mim, base.lambda_mrm),
            Arm::E => (InputMode::DualInput, AlignStrategy::Mba, base.lambda_mim, base.lambda_mrm),
            Arm::F => (InputMode::MaskedOnly, AlignStrategy::Mba, base.lambda_mim, base.lambda_mrm),
        };
        ExperimentConfig {
            input_mode: mode,
            align_strategy: strategy,
            lambda_mim: mim,
            lambda_mrm: mrm,
            ..base.clone()
        }
    }
}

impl FromStr for Arm {
    type Err = McrError;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_lowercase();
        Arm::ALL
            .into_iter()
            .find(|a| t.len() == 1 && t.starts_with(a.letter()))
            .ok_or_else(|| McrError::config("arm", format!("unknown arm `{s}` (expected a-f)")))
    }
}
