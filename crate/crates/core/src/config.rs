//! Architectural hyperparameters and the merged run configuration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthdata::SynthSpec;
use crate::trainer::TrainConfig;

/// Which vision layers receive a temporal prompt token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PromptDepth {
    #[default]
    All,
    /// Inject at layer 0 only.
    First,
    /// No prompt token anywhere; frames are encoded independently.
    Disabled,
}

impl PromptDepth {
    pub fn active_at(self, layer: usize) -> bool {
        match self {
            PromptDepth::All => true,
            PromptDepth::First => layer == 0,
            PromptDepth::Disabled => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Transformer depth of each tower.
    pub layers: usize,
    pub d_visual: usize,
    pub d_text: usize,
    /// Joint embedding width.
    pub d_embed: usize,
    pub heads: usize,
    /// Frames per video.
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch: usize,
    pub vocab: usize,
    /// Maximum text length in tokens.
    pub ctx: usize,
    /// Adapter bottleneck ratio; hidden width is `floor(D / r)`.
    pub bottleneck_ratio: usize,
    pub mlp_ratio: usize,
    pub tau: f64,
    pub prompt_depth: PromptDepth,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ModelConfig {
    /// Desk-scale configuration used by tests and the default run.
    pub fn toy() -> Self {
        Self {
            layers: 2,
            d_visual: 16,
            d_text: 16,
            d_embed: 16,
            heads: 2,
            frames: 4,
            height: 32,
            width: 32,
            channels: 3,
            patch: 8,
            vocab: crate::encoders::VOCAB_SIZE,
            ctx: 32,
            bottleneck_ratio: 4,
            mlp_ratio: 4,
            tau: 0.01,
            prompt_depth: PromptDepth::All,
        }
    }

    /// ViT-B/16-sized towers: 12 layers, 768-wide vision, 512-wide text, 8 frames of 224x224.
    pub fn vit_b16() -> Self {
        Self {
            layers: 12,
            d_visual: 768,
            d_text: 512,
            d_embed: 512,
            heads: 8,
            frames: 8,
            height: 224,
            width: 224,
            channels: 3,
            patch: 16,
            vocab: crate::encoders::VOCAB_SIZE,
            ctx: 77,
            bottleneck_ratio: 4,
            mlp_ratio: 4,
            tau: 0.01,
            prompt_depth: PromptDepth::All,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.patch == 0 || self.height % self.patch != 0 || self.width % self.patch != 0 {
            return fail(format!(
                "frame {}x{} is not divisible into {}-pixel patches",
                self.height, self.width, self.patch
            ));
        }
        if self.heads == 0 || self.d_visual % self.heads != 0 || self.d_text % self.heads != 0 {
            return fail(format!(
                "widths {} / {} not divisible by {} heads",
                self.d_visual, self.d_text, self.heads
            ));
        }
        if self.frames < 2 {
            return fail(format!("need at least 2 frames, got {}", self.frames));
        }
        if self.bottleneck_ratio < 1 {
            return fail("bottleneck_ratio must be >= 1".into());
        }
        if self.layers == 0 || self.d_embed == 0 || self.channels == 0 || self.mlp_ratio == 0 {
            return fail("layers, d_embed, channels and mlp_ratio must be positive".into());
        }
        if self.ctx < 2 || self.vocab < crate::encoders::VOCAB_SIZE {
            return fail(format!(
                "ctx must be >= 2 and vocab >= {}",
                crate::encoders::VOCAB_SIZE
            ));
        }
        if !(self.tau > 0.0) {
            return fail("tau must be positive".into());
        }
        Ok(())
    }

    /// Patches per frame.
    pub fn num_patches(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn adapter_hidden(&self, width: usize) -> usize {
        width / self.bottleneck_ratio
    }
}

/// Which evaluation protocol a run performs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    #[default]
    ZeroShot,
    BaseToNovel,
    FewShot,
}

impl std::str::FromStr for Protocol {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero-shot" => Ok(Protocol::ZeroShot),
            "base-to-novel" => Ok(Protocol::BaseToNovel),
            "few-shot" => Ok(Protocol::FewShot),
            other => Err(Error::Config(format!(
                "unknown protocol `{other}` (expected zero-shot, base-to-novel or few-shot)"
            ))),
        }
    }
}

impl std::fmt::Display for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Protocol::ZeroShot => "zero-shot",
            Protocol::BaseToNovel => "base-to-novel",
            Protocol::FewShot => "few-shot",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub protocol: Protocol,
    /// Shots per category for the few-shot protocol.
    pub k: Option<usize>,
    /// Categories of the zero-shot target set, starting at this id.
    pub target_first_category: u32,
    pub target_categories: usize,
    pub samples_per_category: usize,
    /// Score novel videos against base prompts too.
    pub novel_with_base_distractors: bool,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            protocol: Protocol::ZeroShot,
            k: None,
            target_first_category: 4,
            target_categories: 4,
            samples_per_category: 25,
            novel_with_base_distractors: false,
            seed: 7,
        }
    }
}

/// Everything a run needs, resolved before any computation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub trainer: TrainConfig,
    pub data: SynthSpec,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Parses TOML text, then applies dotted `key=value` overrides.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut root: toml::Table = text.parse().map_err(|e: toml::de::Error| toml_error(text, &e))?;
        for ov in overrides {
            apply_override(&mut root, ov)?;
        }
        let source = if overrides.is_empty() {
            text.to_string()
        } else {
            toml::to_string(&root).map_err(|e| Error::Config(e.to_string()))?
        };
        let cfg: RunConfig = toml::from_str(&source).map_err(|e: toml::de::Error| toml_error(&source, &e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.trainer.validate()?;
        self.data.validate(&self.model)?;
        Ok(())
    }

    /// Canonical TOML rendering, used as the echo header of every artifact.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// The echo as `# `-prefixed lines.
    pub fn echo(&self) -> String {
        comment_block(&self.to_toml())
    }

    /// Recovers a configuration from an echo produced by [`RunConfig::echo`].
    pub fn from_echo(echo: &str) -> Result<Self> {
        Self::from_echo_with_overrides(echo, &[])
    }

    pub fn from_echo_with_overrides(echo: &str, overrides: &[String]) -> Result<Self> {
        let body: String = echo
            .lines()
            .filter_map(|l| l.strip_prefix("# ").or_else(|| (l == "#").then_some("")))
            .map(|l| format!("{l}\n"))
            .collect();
        Self::from_toml_with_overrides(&body, overrides)
    }
}

pub fn comment_block(text: &str) -> String {
    text.lines()
        .map(|l| if l.is_empty() { "#\n".to_string() } else { format!("# {l}\n") })
        .collect()
}

fn toml_error(text: &str, e: &toml::de::Error) -> Error {
    let line = e
        .span()
        .map(|s| text[..s.start.min(text.len())].lines().count().max(1))
        .unwrap_or(0);
    Error::Parse {
        line,
        msg: e.message().to_string(),
    }
}

fn apply_override(root: &mut toml::Table, ov: &str) -> Result<()> {
    let (key, raw) = ov
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{ov}` is not KEY=VALUE")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    let value = parse_override_value(raw.trim());
    let mut table = root;
    for seg in &path[..path.len() - 1] {
        let entry = table
            .entry(seg.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override key `{key}`: `{seg}` is not a table")))?;
    }
    table.insert(path[path.len() - 1].to_string(), value);
    Ok(())
}

fn parse_override_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}
