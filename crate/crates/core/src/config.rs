//! Model hyperparameters, the residual-block pattern, and the parameter-count
//! audit.
//!
//! [`ModelConfig`] is the single source of truth for every tensor shape in the
//! crate. The two full-size presets carry the published hyperparameters; the
//! `desk` preset is a small configuration that runs in seconds on a laptop
//! while still exercising every layer kind at least twice.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::layers::params::tensor_specs;

/// Floating-point storage type of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn size_bytes(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }

    /// Tag byte used by the checkpoint format.
    pub fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }
}

impl FromStr for Dtype {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Dtype::F32),
            "f64" => Ok(Dtype::F64),
            other => Err(Error::InvalidConfig(format!("unknown dtype `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Rg2b,
    Rg9b,
    Desk,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rg2b" => Ok(Preset::Rg2b),
            "rg9b" => Ok(Preset::Rg9b),
            "desk" => Ok(Preset::Desk),
            _ => Err(Error::UnknownPreset(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub model_width: usize,
    pub rnn_width: usize,
    pub mlp_expansion: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub attention_window: usize,
    pub conv_kernel: usize,
    pub rglru_power_c: f64,
    pub train_seq_len: usize,
    pub dtype: Dtype,
}

impl ModelConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Rg2b => ModelConfig {
                vocab_size: 256_000,
                model_width: 2560,
                rnn_width: 2560,
                mlp_expansion: 3,
                depth: 26,
                num_heads: 10,
                attention_window: 2048,
                conv_kernel: 4,
                rglru_power_c: 8.0,
                train_seq_len: 8192,
                dtype: Dtype::F32,
            },
            Preset::Rg9b => ModelConfig {
                vocab_size: 256_000,
                model_width: 4096,
                rnn_width: 4096,
                mlp_expansion: 3,
                depth: 38,
                num_heads: 16,
                attention_window: 2048,
                conv_kernel: 4,
                rglru_power_c: 8.0,
                train_seq_len: 8192,
                dtype: Dtype::F32,
            },
            Preset::Desk => ModelConfig {
                vocab_size: 259,
                model_width: 64,
                rnn_width: 64,
                mlp_expansion: 3,
                depth: 6,
                num_heads: 4,
                attention_window: 8,
                conv_kernel: 4,
                rglru_power_c: 8.0,
                train_seq_len: 128,
                dtype: Dtype::F32,
            },
        }
    }

    /// Looks a preset up by name (`rg2b`, `rg9b`, `desk`, case-insensitive).
    pub fn preset_named(name: &str) -> Result<Self> {
        Ok(Self::preset(name.parse()?))
    }

    pub fn head_dim(&self) -> usize {
        self.model_width / self.num_heads
    }

    pub fn mlp_width(&self) -> usize {
        self.mlp_expansion * self.model_width
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
        if self.vocab_size == 0 {
            return bad("vocab_size must be at least 1");
        }
        if self.model_width == 0 || self.num_heads == 0 {
            return bad("model_width and num_heads must be at least 1");
        }
        if !self.model_width.is_multiple_of(self.num_heads) {
            return bad("model_width must be divisible by num_heads");
        }
        // Rotary encoding rotates channel pairs.
        if !self.head_dim().is_multiple_of(2) {
            return bad("head_dim (model_width / num_heads) must be even");
        }
        if self.attention_window == 0 {
            return bad("attention_window must be at least 1");
        }
        if self.depth == 0 {
            return bad("depth must be at least 1");
        }
        if self.mlp_expansion == 0 {
            return bad("mlp_expansion must be at least 1");
        }
        if self.rnn_width == 0 {
            return bad("rnn_width must be at least 1");
        }
        if self.conv_kernel == 0 {
            return bad("conv_kernel must be at least 1");
        }
        if !(self.rglru_power_c.is_finite() && self.rglru_power_c > 0.0) {
            return bad("rglru_power_c must be a positive finite number");
        }
        Ok(())
    }

    /// Canonical `key = value` rendering. Parsing it back yields an equal config,
    /// and its bytes are what [`ModelConfig::hash`] digests.
    pub fn to_text(&self) -> String {
        format!(
            "vocab_size = {}\nmodel_width = {}\nrnn_width = {}\nmlp_expansion = {}\ndepth = {}\n\
             num_heads = {}\nattention_window = {}\nconv_kernel = {}\nrglru_power_c = {:?}\n\
             train_seq_len = {}\ndtype = {}\n",
            self.vocab_size,
            self.model_width,
            self.rnn_width,
            self.mlp_expansion,
            self.depth,
            self.num_heads,
            self.attention_window,
            self.conv_kernel,
            self.rglru_power_c,
            self.train_seq_len,
            self.dtype.name(),
        )
    }

    /// Parses `key = value` lines. Blank lines and `#` comments are skipped.
    /// Keys missing from the text fall back to the desk preset; unknown keys
    /// are rejected.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::preset(Preset::Desk);
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| Error::ConfigParse {
                line,
                msg: format!("expected `key = value`, got `{content}`"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            let err = |msg: String| Error::ConfigParse { line, msg };
            let int = |v: &str| -> Result<usize> {
                v.parse::<usize>().map_err(|e| err(format!("`{key}`: {e}")))
            };
            match key {
                "vocab_size" => cfg.vocab_size = int(value)?,
                "model_width" => cfg.model_width = int(value)?,
                "rnn_width" => cfg.rnn_width = int(value)?,
                "mlp_expansion" => cfg.mlp_expansion = int(value)?,
                "depth" => cfg.depth = int(value)?,
                "num_heads" => cfg.num_heads = int(value)?,
                "attention_window" => cfg.attention_window = int(value)?,
                "conv_kernel" => cfg.conv_kernel = int(value)?,
                "train_seq_len" => cfg.train_seq_len = int(value)?,
                "rglru_power_c" => {
                    cfg.rglru_power_c = value
                        .parse::<f64>()
                        .map_err(|e| err(format!("`{key}`: {e}")))?
                }
                "dtype" => cfg.dtype = value.parse().map_err(|e: Error| err(e.to_string()))?,
                other => return Err(err(format!("unknown key `{other}`"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// 64-bit FNV-1a digest of the canonical text. Stable across platforms and
    /// toolchains, so it can be embedded in on-disk formats.
    pub fn hash(&self) -> u64 {
        fnv1a64(self.to_text().as_bytes())
    }
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    bytes
        .iter()
        .fold(OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(PRIME))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Recurrent,
    LocalAttention,
}

impl LayerKind {
    pub fn short(self) -> char {
        match self {
            LayerKind::Recurrent => 'R',
            LayerKind::LocalAttention => 'A',
        }
    }
}

/// Ordered residual-block kinds, one per block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerPattern {
    kinds: Vec<LayerKind>,
}

impl LayerPattern {
    pub fn kinds(&self) -> &[LayerKind] {
        &self.kinds
    }

    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }

    pub fn count(&self, kind: LayerKind) -> usize {
        self.kinds.iter().filter(|&&k| k == kind).count()
    }
}

impl fmt::Display for LayerPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s: String = self.kinds.iter().map(|k| k.short()).collect();
        f.write_str(&s)
    }
}

const BLOCK_CYCLE: [LayerKind; 3] = [
    LayerKind::Recurrent,
    LayerKind::Recurrent,
    LayerKind::LocalAttention,
];

/// Repeating `[Recurrent, Recurrent, LocalAttention]`, truncated at `depth`.
pub fn layer_pattern(config: &ModelConfig) -> LayerPattern {
    LayerPattern {
        kinds: BLOCK_CYCLE
            .iter()
            .copied()
            .cycle()
            .take(config.depth)
            .collect(),
    }
}

/// Which model family a parameter set / inference state belongs to.
///
/// `GlobalBaseline` is the transformer-style comparison model used by the
/// benchmarks: every block is multi-query attention with an unbounded window,
/// so its cache grows linearly with the number of processed tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Arch {
    Recurrent,
    GlobalBaseline,
}

impl Arch {
    pub fn name(self) -> &'static str {
        match self {
            Arch::Recurrent => "recurrent",
            Arch::GlobalBaseline => "baseline",
        }
    }

    pub fn layer_kinds(self, config: &ModelConfig) -> Vec<LayerKind> {
        match self {
            Arch::Recurrent => layer_pattern(config).kinds,
            Arch::GlobalBaseline => vec![LayerKind::LocalAttention; config.depth],
        }
    }

    /// Attention span in tokens; `None` means unbounded.
    pub fn attention_span(self, config: &ModelConfig) -> Option<usize> {
        match self {
            Arch::Recurrent => Some(config.attention_window),
            Arch::GlobalBaseline => None,
        }
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "recurrent" => Ok(Arch::Recurrent),
            "baseline" | "global" | "globalbaseline" => Ok(Arch::GlobalBaseline),
            other => Err(Error::InvalidConfig(format!("unknown arch `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamAudit {
    pub embedding_params: u64,
    pub non_embedding_params: u64,
    pub total_params: u64,
    /// `(layer name, parameter count)` in model order: `embed`, `blocks.{i}`,
    /// `final_norm`.
    pub per_layer_breakdown: Vec<(String, u64)>,
}

impl fmt::Display for ParamAudit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "embedding {}", self.embedding_params)?;
        writeln!(f, "non_embedding {}", self.non_embedding_params)?;
        writeln!(f, "total {}", self.total_params)?;
        for (name, count) in &self.per_layer_breakdown {
            writeln!(f, "layer {name} {count}")?;
        }
        Ok(())
    }
}

/// Counts the parameters the layers module would allocate for `config`.
///
/// The input/output embedding is tied and therefore counted once.
pub fn count_params(config: &ModelConfig) -> ParamAudit {
    count_params_for(config, Arch::Recurrent)
}

pub fn count_params_for(config: &ModelConfig, arch: Arch) -> ParamAudit {
    let mut breakdown: Vec<(String, u64)> = Vec::new();
    let mut embedding = 0u64;
    let mut non_embedding = 0u64;
    for spec in tensor_specs(config, arch) {
        let n = spec.numel() as u64;
        if spec.name.starts_with("embed.") {
            embedding += n;
        } else {
            non_embedding += n;
        }
        let group = layer_group(&spec.name);
        match breakdown.last_mut() {
            Some((name, count)) if *name == group => *count += n,
            _ => breakdown.push((group, n)),
        }
    }
    ParamAudit {
        embedding_params: embedding,
        non_embedding_params: non_embedding,
        total_params: embedding + non_embedding,
        per_layer_breakdown: breakdown,
    }
}

fn layer_group(name: &str) -> String {
    let mut parts = name.split('.');
    match (parts.next(), parts.next()) {
        (Some("blocks"), Some(idx)) => format!("blocks.{idx}"),
        (Some(head), _) => head.to_string(),
        _ => name.to_string(),
    }
}
