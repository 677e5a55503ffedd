//! Experiment configuration: modes, hyperparameters, config-file loading
//! and flat `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoders::{EncoderConfig, PretrainConfig};
use crate::error::{Error, Result};
use crate::synthdata::SynthConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    TpptV,
    TpptVt,
    /// Cross-entropy-only prompt tuning (the ablation baseline).
    CeOnly,
    /// Frozen encoders with template prototypes; nothing trains.
    ZeroShot,
    /// Single-task upper bound; requires tasks = 1.
    Joint,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::TpptV => "tppt-v",
            Mode::TpptVt => "tppt-vt",
            Mode::CeOnly => "ce-only",
            Mode::ZeroShot => "zero-shot",
            Mode::Joint => "joint",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tppt-v" => Ok(Mode::TpptV),
            "tppt-vt" => Ok(Mode::TpptVt),
            "ce-only" => Ok(Mode::CeOnly),
            "zero-shot" => Ok(Mode::ZeroShot),
            "joint" => Ok(Mode::Joint),
            other => Err(Error::Config(format!(
                "mode: unknown value '{other}' (expected tppt-v | tppt-vt | ce-only | zero-shot | joint)"
            ))),
        }
    }

    pub fn uses_textual_prompts(&self) -> bool {
        matches!(self, Mode::TpptVt)
    }

    pub fn trains(&self) -> bool {
        !matches!(self, Mode::ZeroShot)
    }
}

/// Training-loop hyperparameters; the defaults are the reported settings.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct HyperParams {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Visual prompt length L_v.
    pub visual_prompt_len: usize,
    /// Textual prompt length L_t.
    pub textual_prompt_len: usize,
    /// Visual prompt depth d_v (clamped to the encoder depth).
    pub visual_prompt_depth: usize,
    /// Textual prompt depth d_t (clamped to the encoder depth).
    pub textual_prompt_depth: usize,
    pub prompts_per_task: usize,
    pub exemplars_per_class: usize,
    /// Diversity loss weight alpha.
    pub alpha: f64,
    /// Shared softmax temperature tau.
    pub tau: f64,
    /// Number of incremental tasks T.
    pub tasks: usize,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            batch_size: 64,
            epochs: 5,
            lr: 0.1,
            momentum: 0.9,
            visual_prompt_len: 4,
            textual_prompt_len: 4,
            visual_prompt_depth: 12,
            textual_prompt_depth: 12,
            prompts_per_task: 10,
            exemplars_per_class: 20,
            alpha: 1.0,
            tau: 0.07,
            tasks: 10,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("hp.batch_size", self.batch_size),
            ("hp.epochs", self.epochs),
            ("hp.visual_prompt_len", self.visual_prompt_len),
            ("hp.textual_prompt_len", self.textual_prompt_len),
            ("hp.visual_prompt_depth", self.visual_prompt_depth),
            ("hp.textual_prompt_depth", self.textual_prompt_depth),
            ("hp.prompts_per_task", self.prompts_per_task),
            ("hp.exemplars_per_class", self.exemplars_per_class),
            ("hp.tasks", self.tasks),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name}: must be >= 1")));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("hp.lr: must be positive".into()));
        }
        if !(self.momentum >= 0.0 && self.momentum < 1.0) {
            return Err(Error::Config("hp.momentum: must lie in [0, 1)".into()));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config("hp.alpha: must be >= 0".into()));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config("hp.tau: must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub synth: SynthConfig,
    pub encoder: EncoderConfig,
    pub pretrain: PretrainConfig,
    pub hp: HyperParams,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    /// Load a pretrained encoder instead of pretraining per seed.
    pub encoder_path: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let synth = SynthConfig::default();
        let encoder = EncoderConfig {
            vocab_size: synth.vocab_size(),
            image_token_dim: synth.image_token_dim,
            ..EncoderConfig::default()
        };
        Self {
            mode: Mode::TpptV,
            synth,
            encoder,
            pretrain: PretrainConfig::default(),
            hp: HyperParams::default(),
            seeds: vec![0],
            out_dir: PathBuf::from("runs"),
            encoder_path: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.encoder.validate()?;
        self.hp.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds: at least one seed required".into()));
        }
        if self.encoder.vocab_size != self.synth.vocab_size() {
            return Err(Error::Config(format!(
                "encoder.vocab_size: {} does not match synth vocabulary {}",
                self.encoder.vocab_size,
                self.synth.vocab_size()
            )));
        }
        if self.encoder.image_token_dim != self.synth.image_token_dim {
            return Err(Error::Config(format!(
                "encoder.image_token_dim: {} does not match synth.image_token_dim {}",
                self.encoder.image_token_dim, self.synth.image_token_dim
            )));
        }
        if self.synth.n_classes % self.hp.tasks != 0 {
            return Err(Error::Config(format!(
                "hp.tasks: {} classes are not divisible into {} tasks",
                self.synth.n_classes, self.hp.tasks
            )));
        }
        if self.mode == Mode::Joint && self.hp.tasks != 1 {
            return Err(Error::Config(
                "hp.tasks: joint mode requires tasks = 1".into(),
            ));
        }
        let image_seq = 1 + self.hp.visual_prompt_len + self.synth.image_tokens;
        let text_seq = 1 + self.hp.textual_prompt_len + self.synth.template_len + 1;
        if image_seq > self.encoder.max_tokens || text_seq > self.encoder.max_tokens {
            return Err(Error::Config(format!(
                "encoder.max_tokens: {} too small for sequences of {} (image) / {} (text)",
                self.encoder.max_tokens, image_seq, text_seq
            )));
        }
        if self.pretrain.steps == 0 {
            return Err(Error::Config("pretrain.steps: must be >= 1".into()));
        }
        Ok(())
    }

    /// Prompt depths clamped to the encoder depth ("prompt every layer"
    /// when the configured depth exceeds the tower).
    pub fn effective_visual_depth(&self) -> usize {
        self.hp.visual_prompt_depth.min(self.encoder.depth)
    }

    pub fn effective_textual_depth(&self) -> usize {
        self.hp.textual_prompt_depth.min(self.encoder.depth)
    }

    /// Fully resolved config as the JSON echo stored in every metrics log.
    pub fn echo(&self) -> Result<serde_json::Value> {
        Ok(serde_json::to_value(self)?)
    }

    /// Parses a JSON config file, applies `key=value` overrides (dotted
    /// paths), then validates. Unknown keys are rejected.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("config file {}: {e}", path.display())))?;
        let value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("config file {}: {e}", path.display())))?;
        Self::from_value(value, overrides)
    }

    pub fn from_value(mut value: serde_json::Value, overrides: &[String]) -> Result<Self> {
        for ov in overrides {
            apply_override(&mut value, ov)?;
        }
        // Encoder input dimensions follow the dataset unless set explicitly.
        let explicit_vocab = value.pointer("/encoder/vocab_size").is_some();
        let explicit_token_dim = value.pointer("/encoder/image_token_dim").is_some();
        let mut cfg: Self = serde_json::from_value(value)
            .map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        if !explicit_vocab {
            cfg.encoder.vocab_size = cfg.synth.vocab_size();
        }
        if !explicit_token_dim {
            cfg.encoder.image_token_dim = cfg.synth.image_token_dim;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Applies one `path.to.key=value` override onto a JSON tree. Values parse
/// as JSON when possible and fall back to strings.
fn apply_override(root: &mut serde_json::Value, spec: &str) -> Result<()> {
    let (path, raw) = spec.split_once('=').ok_or_else(|| {
        Error::Config(format!("override '{spec}': expected key=value"))
    })?;
    if path.is_empty() {
        return Err(Error::Config(format!("override '{spec}': empty key")));
    }
    let parsed: serde_json::Value = serde_json::from_str(raw)
        .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));

    let mut node = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if !node.is_object() {
            return Err(Error::Config(format!(
                "override '{spec}': '{}' is not an object",
                parts[..i].join(".")
            )));
        }
        let map = node.as_object_mut().expect("checked object");
        if i + 1 == parts.len() {
            map.insert(part.to_string(), parsed);
            return Ok(());
        }
        node = map
            .entry(part.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    unreachable!("loop always returns on the last segment")
}
