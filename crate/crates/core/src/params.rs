//! Named tensors partitioned into frozen and tunable sets.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{Array, Precision};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Tag {
    Frozen,
    Prompt,
    VisualAdapter,
    TextAdapter,
    ClsToken,
}

impl Tag {
    pub const TUNABLE: [Tag; 4] = [Tag::Prompt, Tag::VisualAdapter, Tag::TextAdapter, Tag::ClsToken];

    pub fn is_tunable(self) -> bool {
        self != Tag::Frozen
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Tag::Frozen => "frozen",
            Tag::Prompt => "prompt",
            Tag::VisualAdapter => "visual-adapter",
            Tag::TextAdapter => "text-adapter",
            Tag::ClsToken => "cls-token",
        }
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Tag {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "frozen" => Tag::Frozen,
            "prompt" => Tag::Prompt,
            "visual-adapter" => Tag::VisualAdapter,
            "text-adapter" => Tag::TextAdapter,
            "cls-token" => Tag::ClsToken,
            other => return Err(Error::UnknownTag(other.to_string())),
        })
    }
}

/// How a tensor is filled at construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub tag: Tag,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

pub mod names {
    pub const PROMPTS: &str = "prompts.temporal";
    pub const VISUAL_CLS: &str = "visual.cls";

    pub fn visual_layer(l: usize, leaf: &str) -> String {
        format!("visual.layers.{l}.{leaf}")
    }

    pub fn text_layer(l: usize, leaf: &str) -> String {
        format!("text.layers.{l}.{leaf}")
    }
}

fn linear(specs: &mut Vec<ParamSpec>, prefix: &str, fan_in: usize, fan_out: usize, tag: Tag, weight_init: Init) {
    specs.push(ParamSpec {
        name: format!("{prefix}.weight"),
        tag,
        shape: vec![fan_in, fan_out],
        init: weight_init,
    });
    specs.push(ParamSpec {
        name: format!("{prefix}.bias"),
        tag,
        shape: vec![1, fan_out],
        init: Init::Zeros,
    });
}

fn layer_norm(specs: &mut Vec<ParamSpec>, prefix: &str, width: usize) {
    specs.push(ParamSpec {
        name: format!("{prefix}.gamma"),
        tag: Tag::Frozen,
        shape: vec![1, width],
        init: Init::Ones,
    });
    specs.push(ParamSpec {
        name: format!("{prefix}.beta"),
        tag: Tag::Frozen,
        shape: vec![1, width],
        init: Init::Zeros,
    });
}

fn fan_in_init(fan_in: usize) -> Init {
    Init::Normal(1.0 / (fan_in as f64).sqrt())
}

fn block(specs: &mut Vec<ParamSpec>, prefix: &str, width: usize, cfg: &ModelConfig, adapter_tag: Tag) {
    layer_norm(specs, &format!("{prefix}.ln1"), width);
    for proj in ["q", "k", "v", "o"] {
        linear(specs, &format!("{prefix}.attn.{proj}"), width, width, Tag::Frozen, fan_in_init(width));
    }
    let hidden = cfg.adapter_hidden(width);
    linear(specs, &format!("{prefix}.adapter.down"), width, hidden, adapter_tag, fan_in_init(width));
    // Zero up-projection: the adapter starts as the identity map.
    linear(specs, &format!("{prefix}.adapter.up"), hidden, width, adapter_tag, Init::Zeros);
    layer_norm(specs, &format!("{prefix}.ln2"), width);
    let mlp = width * cfg.mlp_ratio;
    linear(specs, &format!("{prefix}.mlp.fc1"), width, mlp, Tag::Frozen, fan_in_init(width));
    linear(specs, &format!("{prefix}.mlp.fc2"), mlp, width, Tag::Frozen, fan_in_init(mlp));
}

/// Every tensor of the model, in construction order.
pub fn layout(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    let (dv, dt) = (cfg.d_visual, cfg.d_text);
    let n = cfg.num_patches();

    linear(&mut specs, "visual.patch", cfg.patch_dim(), dv, Tag::Frozen, fan_in_init(cfg.patch_dim()));
    specs.push(ParamSpec {
        name: names::VISUAL_CLS.into(),
        tag: Tag::ClsToken,
        shape: vec![1, dv],
        init: fan_in_init(dv),
    });
    specs.push(ParamSpec {
        name: "visual.pos".into(),
        tag: Tag::Frozen,
        shape: vec![n + 1, dv],
        init: fan_in_init(dv),
    });
    for l in 0..cfg.layers {
        block(&mut specs, &format!("visual.layers.{l}"), dv, cfg, Tag::VisualAdapter);
    }
    layer_norm(&mut specs, "visual.ln_post", dv);
    specs.push(ParamSpec {
        name: "visual.proj".into(),
        tag: Tag::Frozen,
        shape: vec![dv, cfg.d_embed],
        init: fan_in_init(dv),
    });
    specs.push(ParamSpec {
        name: names::PROMPTS.into(),
        tag: Tag::Prompt,
        shape: vec![cfg.layers, cfg.frames, dv],
        init: Init::Normal(0.02),
    });

    specs.push(ParamSpec {
        name: "text.token_embedding".into(),
        tag: Tag::Frozen,
        shape: vec![cfg.vocab, dt],
        init: Init::Normal(0.5),
    });
    specs.push(ParamSpec {
        name: "text.pos".into(),
        tag: Tag::Frozen,
        shape: vec![cfg.ctx, dt],
        init: fan_in_init(dt),
    });
    for l in 0..cfg.layers {
        block(&mut specs, &format!("text.layers.{l}"), dt, cfg, Tag::TextAdapter);
    }
    layer_norm(&mut specs, "text.ln_final", dt);
    specs.push(ParamSpec {
        name: "text.proj".into(),
        tag: Tag::Frozen,
        shape: vec![dt, cfg.d_embed],
        init: fan_in_init(dt),
    });
    specs
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub tag: Tag,
    pub value: Array,
}

/// Named arrays keyed by dotted path, iterated in lexicographic name order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterStore {
    entries: BTreeMap<String, Entry>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds and initializes every tensor of `cfg` from `seed`.
    pub fn init(cfg: &ModelConfig, seed: u64, precision: Precision) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = Self::new();
        for spec in layout(cfg) {
            let n = spec.numel();
            let data = match spec.init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Normal(std) => {
                    let dist = Normal::new(0.0, std).map_err(|e| Error::Invalid(e.to_string()))?;
                    (0..n).map(|_| dist.sample(&mut rng)).collect()
                }
            };
            let value = Array::new(spec.shape, data)?.with_precision(precision);
            store.insert(spec.name, spec.tag, value)?;
        }
        Ok(store)
    }

    pub fn insert(&mut self, name: impl Into<String>, tag: Tag, value: Array) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Invalid(format!("duplicate parameter `{name}`")));
        }
        self.entries.insert(name, Entry { tag, value });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Array> {
        self.entries
            .get(name)
            .map(|e| &e.value)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Array> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.value)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn tag(&self, name: &str) -> Result<Tag> {
        self.entries
            .get(name)
            .map(|e| e.tag)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    /// Replaces a tensor's value, keeping its tag. Shapes must agree.
    pub fn set(&mut self, name: &str, value: Array) -> Result<()> {
        let slot = self.get_mut(name)?;
        if slot.shape() != value.shape() {
            return Err(Error::Shape {
                op: "store.set",
                lhs: slot.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        *slot = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Entry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names_with_tag(&self, tag: Tag) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, e)| e.tag == tag)
            .map(|(k, _)| k.clone())
            .collect()
    }

    pub fn tunable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, e)| e.tag.is_tunable())
            .map(|(k, _)| k.clone())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    /// SHA-256 over names, shapes and exact value bits of the frozen partition.
    pub fn frozen_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, e) in self.entries.iter().filter(|(_, e)| e.tag == Tag::Frozen) {
            h.update(name.as_bytes());
            for d in e.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in e.value.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Fills every tensor carrying `tag` with i.i.d. normal values.
    pub fn randomize_tag(&mut self, tag: Tag, std: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, std).expect("valid std");
        for e in self.entries.values_mut().filter(|e| e.tag == tag) {
            let p = e.value.precision();
            for v in e.value.data_mut() {
                *v = p.round(dist.sample(&mut rng));
            }
        }
    }

    pub fn zero_tag(&mut self, tag: Tag) {
        for e in self.entries.values_mut().filter(|e| e.tag == tag) {
            e.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Checks that the store holds exactly the tensors `cfg` lays out, with
    /// matching shapes and tags.
    pub fn check_layout(&self, cfg: &ModelConfig) -> Result<()> {
        let specs = layout(cfg);
        for spec in &specs {
            let e = self
                .entries
                .get(&spec.name)
                .ok_or_else(|| Error::UnknownParam(spec.name.clone()))?;
            if e.value.shape() != spec.shape.as_slice() {
                return Err(Error::Shape {
                    op: "checkpoint layout",
                    lhs: e.value.shape().to_vec(),
                    rhs: spec.shape.clone(),
                });
            }
            if e.tag != spec.tag {
                return Err(Error::Invalid(format!("`{}` is tagged {} but the model expects {}", spec.name, e.tag, spec.tag)));
            }
        }
        if self.entries.len() != specs.len() {
            return Err(Error::Invalid(format!(
                "store holds {} tensors, the model lays out {}",
                self.entries.len(),
                specs.len()
            )));
        }
        Ok(())
    }

    /// Re-rounds every value to `precision`.
    pub fn to_precision(&self, precision: Precision) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(k, e)| {
                    (
                        k.clone(),
                        Entry {
                            tag: e.tag,
                            value: e.value.clone().with_precision(precision),
                        },
                    )
                })
                .collect(),
        }
    }
}

/// Seeded generator shared by the data and sampling code.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent seed for a sub-stream.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    r.random()
}
