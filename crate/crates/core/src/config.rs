//! Configuration schema, TOML I/O and dotted `key=value` overrides.
//!
//! The file has three tables, `[model]`, `[loss]` and `[train]`; every key
//! is optional and falls back to the desk-scale default. Unknown keys are
//! rejected. [`KEY_TABLE`] documents each key next to the published setting
//! where one exists.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    /// Hybrid chunked attention + state-space block.
    #[default]
    Mamba,
    /// Plain pre-norm transformer block with full self-attention.
    Attention,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CccScope {
    /// One CCC per window over its central frames, averaged over the batch.
    #[default]
    Window,
    /// One CCC over the central frames of the whole batch.
    Batch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Common projected width of every cue.
    pub d: usize,
    pub k_audio: usize,
    pub k_visual: usize,
    /// Blocks per group stack and per context stack.
    pub layers: usize,
    pub d_state: usize,
    pub chunk_size: usize,
    pub conv_kernel: usize,
    pub ffn_expansion: usize,
    pub heads: usize,
    pub dropout: f64,
    pub ln_eps: f64,
    pub selective: bool,
    /// Replace the context stacks by the identity map.
    pub ctx_identity: bool,
    /// `false`: one stack over all five concatenated cues instead of two groups.
    pub modality_fusion: bool,
    /// `false`: skip partner cross-attention and predict from target embeddings.
    pub partner_fusion: bool,
    pub backend: Backend,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 16,
            k_audio: 32,
            k_visual: 32,
            layers: 4,
            d_state: 16,
            chunk_size: 32,
            conv_kernel: 4,
            ffn_expansion: 2,
            heads: 1,
            dropout: 0.0,
            ln_eps: 1e-5,
            selective: false,
            ctx_identity: false,
            modality_fusion: true,
            partner_fusion: true,
            backend: Backend::Mamba,
            init_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NegativeCount {
    Count(usize),
    Keyword(String),
}

impl NegativeCount {
    /// `None` means all other frames.
    pub fn resolve(&self) -> Result<Option<usize>> {
        match self {
            NegativeCount::Count(0) => Err(Error::Config("loss.negatives must be >= 1".into())),
            NegativeCount::Count(k) => Ok(Some(*k)),
            NegativeCount::Keyword(s) if s == "all" => Ok(None),
            NegativeCount::Keyword(s) => Err(Error::Config(format!(
                "loss.negatives must be a positive integer or \"all\", got {s:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda_ccc: f64,
    /// Zero disables the alignment term entirely.
    pub lambda_align: f64,
    pub tau: f64,
    pub negatives: NegativeCount,
    /// Width of the shared contrastive projection; required when
    /// `k_audio != k_visual`, ignored otherwise.
    pub contrastive_width: usize,
    pub ccc_scope: CccScope,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_ccc: 1.0,
            lambda_align: 0.4,
            tau: 0.07,
            negatives: NegativeCount::Keyword("all".into()),
            contrastive_width: 0,
            ccc_scope: CccScope::Window,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    /// Final learning rate as a fraction of `lr`.
    pub lr_min_ratio: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_windows: usize,
    pub window: usize,
    pub central: usize,
    pub context: usize,
    pub warmup_steps: u64,
    pub max_grad_norm: f64,
    pub ema_decay: f64,
    /// Ramp the EMA decay as `min(decay, (1+k)/(10+k))` over update `k`.
    pub ema_warmup: bool,
    pub epochs: usize,
    pub seed: u64,
    /// Number of sessions (taken from the end of the sorted list) held out
    /// for validation.
    pub val_sessions: usize,
    /// Use every participant as a target, not only the designated one.
    pub all_targets: bool,
    /// Worker threads for window-parallel passes; 0 uses the rayon default.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 2e-3,
            lr_min_ratio: 0.01,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_windows: 8,
            window: 96,
            central: 32,
            context: 32,
            warmup_steps: 20,
            max_grad_norm: 5.0,
            ema_decay: 0.999,
            ema_warmup: true,
            epochs: 30,
            seed: 0,
            val_sessions: 2,
            all_targets: true,
            threads: 0,
        }
    }
}

impl TrainConfig {
    /// Settings of the published training run.
    pub fn published() -> Self {
        TrainConfig {
            lr: 5e-5,
            batch_windows: 128,
            warmup_steps: 500,
            ema_warmup: false,
            ..TrainConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
}

/// `(dotted key, desk default, published setting or note)`.
pub const KEY_TABLE: &[(&str, &str, &str)] = &[
    ("model.d", "16", "unstated; common cue width"),
    ("model.k_audio", "32", "unstated"),
    ("model.k_visual", "32", "unstated"),
    ("model.layers", "4", "published: L = 4"),
    ("model.d_state", "16", "published: 16"),
    ("model.chunk_size", "32", "published: s = 32"),
    ("model.conv_kernel", "4", "published: 4"),
    ("model.ffn_expansion", "2", "published: expansion factor 2"),
    ("model.heads", "1", "unstated"),
    ("model.dropout", "0.0", "unstated; residual dropout"),
    ("model.ln_eps", "1e-5", "unstated"),
    ("model.selective", "false", "input-dependent B, C"),
    ("model.ctx_identity", "false", "replace context stacks by identity"),
    ("model.modality_fusion", "true", "ablation switch"),
    ("model.partner_fusion", "true", "ablation switch"),
    ("model.backend", "mamba", "mamba | attention"),
    ("model.init_seed", "0", "parameter initialization seed"),
    ("loss.lambda_ccc", "1.0", "published: 1.0"),
    ("loss.lambda_align", "0.4", "published: 0.4; 0 disables alignment"),
    ("loss.tau", "0.07", "unstated"),
    ("loss.negatives", "\"all\"", "\"all\" or a per-frame count"),
    ("loss.contrastive_width", "0", "shared projection width when k_audio != k_visual"),
    ("loss.ccc_scope", "window", "window | batch"),
    ("train.lr", "2e-3", "published: 5e-5"),
    ("train.lr_min_ratio", "0.01", "cosine floor as a fraction of lr"),
    ("train.weight_decay", "0.01", "AdamW decoupled decay"),
    ("train.beta1", "0.9", ""),
    ("train.beta2", "0.999", ""),
    ("train.adam_eps", "1e-8", ""),
    ("train.batch_windows", "8", "published: 128"),
    ("train.window", "96", "published: 96"),
    ("train.central", "32", "published: 32"),
    ("train.context", "32", "published: 32 per side"),
    ("train.warmup_steps", "20", "published: 500"),
    ("train.max_grad_norm", "5.0", "published: 5.0"),
    ("train.ema_decay", "0.999", "published: 0.999"),
    ("train.ema_warmup", "true", "ramp EMA decay over early updates"),
    ("train.epochs", "30", "unstated"),
    ("train.seed", "0", ""),
    ("train.val_sessions", "2", "held-out sessions"),
    ("train.all_targets", "true", "train on every participant as target"),
    ("train.threads", "0", "0 = rayon default"),
];

impl Config {
    pub fn from_toml_str(s: &str) -> Result<Config> {
        let cfg: Config =
            toml::from_str(s).map_err(|e| Error::Config(format!("parsing config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Config> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Config::from_toml_str(&s)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_toml_string()).map_err(|e| Error::io(path, e))
    }

    /// Applies `key=value` overrides. Keys are dotted paths
    /// (`model.partner_fusion`) or bare leaf names when unambiguous
    /// (`lambda_align`). Values use TOML syntax and are type-checked.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Config> {
        let mut root = toml::Value::try_from(self)
            .map_err(|e| Error::Config(format!("serializing config: {e}")))?;
        for ov in overrides {
            let ov = ov.as_ref();
            let (key, raw) = ov
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {ov:?} is not key=value")))?;
            let path = resolve_key(&root, key.trim())?;
            let value = parse_value(raw.trim())?;
            set_path(&mut root, &path, value)?;
        }
        let cfg: Config = root
            .try_into()
            .map_err(|e| Error::Config(format!("override does not type-check: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let positive = [
            ("model.d", m.d),
            ("model.k_audio", m.k_audio),
            ("model.k_visual", m.k_visual),
            ("model.layers", m.layers),
            ("model.d_state", m.d_state),
            ("model.chunk_size", m.chunk_size),
            ("model.conv_kernel", m.conv_kernel),
            ("model.ffn_expansion", m.ffn_expansion),
            ("model.heads", m.heads),
            ("train.batch_windows", self.train.batch_windows),
            ("train.window", self.train.window),
            ("train.central", self.train.central),
            ("train.epochs", self.train.epochs),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{k} must be positive")));
            }
        }
        for (k, w) in [("model.k_audio", m.k_audio), ("model.k_visual", m.k_visual)] {
            if w % m.heads != 0 {
                return Err(Error::Config(format!(
                    "{k} = {w} is not divisible by model.heads = {}",
                    m.heads
                )));
            }
        }
        if m.d % m.heads != 0 {
            return Err(Error::Config(format!(
                "model.d = {} is not divisible by model.heads = {}",
                m.d, m.heads
            )));
        }
        if !(0.0..1.0).contains(&m.dropout) {
            return Err(Error::Config("model.dropout must be in [0, 1)".into()));
        }
        if !(m.ln_eps > 0.0) {
            return Err(Error::Config("model.ln_eps must be > 0".into()));
        }
        let l = &self.loss;
        if !(l.lambda_ccc > 0.0) {
            return Err(Error::Config("loss.lambda_ccc must be > 0".into()));
        }
        if !(l.lambda_align >= 0.0) {
            return Err(Error::Config("loss.lambda_align must be >= 0".into()));
        }
        if !(l.tau > 0.0) {
            return Err(Error::Config("loss.tau must be > 0".into()));
        }
        l.negatives.resolve()?;
        if l.lambda_align > 0.0
            && m.modality_fusion
            && m.k_audio != m.k_visual
            && l.contrastive_width == 0
        {
            return Err(Error::Config(format!(
                "k_audio = {} differs from k_visual = {}; set loss.contrastive_width to enable the shared projection",
                m.k_audio, m.k_visual
            )));
        }
        let t = &self.train;
        if t.window != t.central + 2 * t.context {
            return Err(Error::Config(format!(
                "train.window ({}) must equal central ({}) + 2 × context ({})",
                t.window, t.central, t.context
            )));
        }
        for (k, v) in [
            ("train.lr", t.lr),
            ("train.max_grad_norm", t.max_grad_norm),
            ("train.adam_eps", t.adam_eps),
        ] {
            if !(v > 0.0) {
                return Err(Error::Config(format!("{k} must be > 0")));
            }
        }
        for (k, v) in [
            ("train.ema_decay", t.ema_decay),
            ("train.beta1", t.beta1),
            ("train.beta2", t.beta2),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{k} must be in [0, 1)")));
            }
        }
        if !(0.0..=1.0).contains(&t.lr_min_ratio) || t.weight_decay < 0.0 {
            return Err(Error::Config(
                "train.lr_min_ratio must be in [0, 1] and weight_decay >= 0".into(),
            ));
        }
        Ok(())
    }
}

fn resolve_key(root: &toml::Value, key: &str) -> Result<Vec<String>> {
    let table = root.as_table().expect("config is a table");
    if key.contains('.') {
        let path: Vec<String> = key.split('.').map(str::to_string).collect();
        let mut cur = root;
        for part in &path {
            cur = cur
                .as_table()
                .and_then(|t| t.get(part))
                .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
        }
        return Ok(path);
    }
    let hits: Vec<Vec<String>> = table
        .iter()
        .filter_map(|(section, v)| {
            v.as_table()
                .filter(|t| t.contains_key(key))
                .map(|_| vec![section.clone(), key.to_string()])
        })
        .collect();
    match hits.len() {
        1 => Ok(hits.into_iter().next().unwrap()),
        0 => Err(Error::Config(format!("unknown config key {key:?}"))),
        _ => Err(Error::Config(format!(
            "ambiguous config key {key:?}; use a dotted path"
        ))),
    }
}

fn parse_value(raw: &str) -> Result<toml::Value> {
    let doc: toml::Table = format!("v = {raw}")
        .parse()
        .or_else(|_| format!("v = \"{raw}\"").parse())
        .map_err(|e| Error::Config(format!("cannot parse override value {raw:?}: {e}")))?;
    Ok(doc["v"].clone())
}

fn set_path(root: &mut toml::Value, path: &[String], value: toml::Value) -> Result<()> {
    let mut cur = root;
    for part in &path[..path.len() - 1] {
        cur = cur.get_mut(part.as_str()).expect("resolved path");
    }
    let slot = cur
        .get_mut(path[path.len() - 1].as_str())
        .expect("resolved path");
    let value = match (&*slot, value) {
        (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
        (old, new) if std::mem::discriminant(old) == std::mem::discriminant(&new) => new,
        // Untagged values such as `negatives` accept either form.
        (toml::Value::String(_), new @ toml::Value::Integer(_))
        | (toml::Value::Integer(_), new @ toml::Value::String(_)) => new,
        (old, new) => {
            return Err(Error::Config(format!(
                "override for {} expects a {}, got a {}",
                path.join("."),
                old.type_str(),
                new.type_str()
            )))
        }
    };
    *slot = value;
    Ok(())
}
