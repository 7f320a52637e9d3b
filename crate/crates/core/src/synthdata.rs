//! Synthetic sprite videos whose category is carried by motion, appearance,
//! or both, plus category-description ingestion.

use std::collections::BTreeSet;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::encoders::tokenize;
use crate::error::{Error, Result};
use crate::params::{derive_seed, rng};
use crate::tensor::Array;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SynthMode {
    #[default]
    MotionOnly,
    AppearanceOnly,
    Mixed,
}

/// Direction (dx, dy) per category id; ids 0..8.
const DIRECTIONS: [(i64, i64, &str); 8] = [
    (1, 0, "right"),
    (-1, 0, "left"),
    (0, 1, "down"),
    (0, -1, "up"),
    (1, 1, "down-right"),
    (-1, -1, "up-left"),
    (-1, 1, "down-left"),
    (1, -1, "up-right"),
];

/// RGB sprite color per category id.
const PALETTE: [([f64; 3], &str); 8] = [
    ([1.0, 0.2, 0.2], "red"),
    ([0.2, 1.0, 0.2], "green"),
    ([0.2, 0.2, 1.0], "blue"),
    ([1.0, 1.0, 0.2], "yellow"),
    ([1.0, 0.2, 1.0], "magenta"),
    ([0.2, 1.0, 1.0], "cyan"),
    ([1.0, 0.6, 0.2], "orange"),
    ([0.6, 0.6, 0.6], "grey"),
];

pub const MAX_CATEGORIES: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub mode: SynthMode,
    /// Category ids are `first_category .. first_category + categories`.
    pub first_category: u32,
    pub categories: usize,
    pub samples_per_category: usize,
    /// Sprite side in pixels; 0 means twice the patch size.
    pub sprite: usize,
    /// Pixels moved per frame.
    pub speed: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            mode: SynthMode::MotionOnly,
            first_category: 0,
            categories: 4,
            samples_per_category: 200,
            sprite: 0,
            speed: 4,
            noise_std: 0.05,
            seed: 17,
        }
    }
}

impl SynthSpec {
    pub fn sprite_size(&self, cfg: &ModelConfig) -> usize {
        if self.sprite == 0 {
            2 * cfg.patch
        } else {
            self.sprite
        }
    }

    pub fn category_ids(&self) -> Vec<u32> {
        (0..self.categories as u32).map(|i| self.first_category + i).collect()
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.categories == 0 {
            return fail("need at least one category".into());
        }
        if self.first_category as usize + self.categories > MAX_CATEGORIES {
            return fail(format!("synthetic category ids must be below {MAX_CATEGORIES}"));
        }
        if !(self.noise_std >= 0.0) {
            return fail("noise_std must be non-negative".into());
        }
        if cfg.channels != 3 {
            return fail("synthetic sprites are RGB; channels must be 3".into());
        }
        let size = self.sprite_size(cfg);
        if size > cfg.height || size > cfg.width {
            return fail(format!("sprite of {size} px does not fit a {}x{} frame", cfg.height, cfg.width));
        }
        if self.mode != SynthMode::AppearanceOnly {
            let travel = (cfg.frames - 1) * self.speed;
            for id in self.category_ids() {
                let (dx, dy, _) = DIRECTIONS[id as usize];
                if (dx != 0 && size + travel > cfg.width) || (dy != 0 && size + travel > cfg.height) {
                    return fail(format!(
                        "sprite path leaves the frame: {size} px sprite moving {travel} px in a {}x{} frame",
                        cfg.height, cfg.width
                    ));
                }
            }
        }
        Ok(())
    }
}

/// One labelled clip: `T x H x W x C` pixels and the index of its category
/// within the dataset's category list.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub video: Array,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub category_ids: Vec<u32>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// Keeps the samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            category_ids: self.category_ids.clone(),
            samples: indices.iter().map(|i| self.samples[*i].clone()).collect(),
        }
    }

    /// Keeps the samples of the categories in `ids`, relabelled by position
    /// in `ids`.
    pub fn restrict(&self, ids: &[u32]) -> Result<Dataset> {
        let mut map = Vec::with_capacity(ids.len());
        for id in ids {
            let label = self
                .category_ids
                .iter()
                .position(|c| c == id)
                .ok_or_else(|| Error::Invalid(format!("category {id} is not in the dataset")))?;
            map.push(label);
        }
        let samples = self
            .samples
            .iter()
            .filter_map(|s| {
                map.iter().position(|l| *l == s.label).map(|label| Sample {
                    video: s.video.clone(),
                    label,
                })
            })
            .collect();
        Ok(Dataset {
            category_ids: ids.to_vec(),
            samples,
        })
    }
}

/// Renders one clip with the sprite's top-left corner at `start` and moving by
/// `velocity` pixels per frame, without noise.
pub fn render(cfg: &ModelConfig, size: usize, color: [f64; 3], start: (i64, i64), velocity: (i64, i64)) -> Result<Array> {
    let (t, h, w, c) = (cfg.frames, cfg.height, cfg.width, cfg.channels);
    let mut data = vec![0.0; t * h * w * c];
    for f in 0..t {
        let x0 = start.0 + velocity.0 * f as i64;
        let y0 = start.1 + velocity.1 * f as i64;
        if x0 < 0 || y0 < 0 || x0 as usize + size > w || y0 as usize + size > h {
            return Err(Error::Invalid(format!("sprite leaves the frame at frame {f}")));
        }
        for y in y0 as usize..y0 as usize + size {
            for x in x0 as usize..x0 as usize + size {
                let base = ((f * h + y) * w + x) * c;
                data[base..base + c].copy_from_slice(&color[..c]);
            }
        }
    }
    Array::new(vec![t, h, w, c], data)
}

fn start_range(extent: usize, size: usize, travel: usize, dir: i64) -> (i64, i64) {
    let free = (extent - size) as i64;
    match dir {
        1 => (0, free - travel as i64),
        -1 => (travel as i64, free),
        _ => (0, free),
    }
}

/// Generates the dataset described by `spec` at the geometry of `cfg`.
pub fn generate(spec: &SynthSpec, cfg: &ModelConfig) -> Result<Dataset> {
    spec.validate(cfg)?;
    let size = spec.sprite_size(cfg);
    let travel = (cfg.frames - 1) * spec.speed;
    let noise = Normal::new(0.0, spec.noise_std.max(0.0)).map_err(|e| Error::Invalid(e.to_string()))?;
    let ids = spec.category_ids();
    let mut samples = Vec::with_capacity(ids.len() * spec.samples_per_category);
    let mut index = 0u64;
    for _ in 0..spec.samples_per_category {
        for (label, id) in ids.iter().enumerate() {
            let mut r = rng(derive_seed(spec.seed, index));
            index += 1;
            let id = *id as usize;
            let (velocity, color) = match spec.mode {
                SynthMode::MotionOnly => ((DIRECTIONS[id].0, DIRECTIONS[id].1), [1.0, 1.0, 1.0]),
                SynthMode::AppearanceOnly => ((0, 0), PALETTE[id].0),
                SynthMode::Mixed => ((DIRECTIONS[id].0, DIRECTIONS[id].1), PALETTE[id].0),
            };
            let (x_lo, x_hi) = start_range(cfg.width, size, travel, velocity.0);
            let (y_lo, y_hi) = start_range(cfg.height, size, travel, velocity.1);
            let start = (r.random_range(x_lo..=x_hi), r.random_range(y_lo..=y_hi));
            let speed = spec.speed as i64;
            let mut video = render(cfg, size, color, start, (velocity.0 * speed, velocity.1 * speed))?;
            if spec.noise_std > 0.0 {
                for v in video.data_mut() {
                    *v += noise.sample(&mut r);
                }
            }
            samples.push(Sample { video, label });
        }
    }
    Ok(Dataset {
        category_ids: ids,
        samples,
    })
}

/// Picks `frames` indices at equal intervals out of `available`, rounding down.
pub fn sample_frame_indices(available: usize, frames: usize) -> Result<Vec<usize>> {
    if frames == 0 || available < frames {
        return Err(Error::Invalid(format!("cannot sample {frames} frames from a clip of {available}")));
    }
    Ok((0..frames).map(|i| i * available / frames).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CategoryPrompt {
    pub id: u32,
    pub name: String,
    pub description: Option<String>,
    pub tokens: Vec<u32>,
}

impl CategoryPrompt {
    pub fn new(id: u32, name: &str, description: Option<&str>, ctx: usize) -> Self {
        let text = description.unwrap_or(name);
        Self {
            id,
            name: name.to_string(),
            description: description.map(str::to_string),
            tokens: tokenize(text, ctx),
        }
    }
}

/// Prompt text per category, in dataset label order.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryPromptSet {
    pub entries: Vec<CategoryPrompt>,
}

impl CategoryPromptSet {
    pub fn ids(&self) -> Vec<u32> {
        self.entries.iter().map(|e| e.id).collect()
    }

    pub fn tokens(&self) -> Vec<Vec<u32>> {
        self.entries.iter().map(|e| e.tokens.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries for `ids`, in that order.
    pub fn select(&self, ids: &[u32]) -> Result<Self> {
        let entries = ids
            .iter()
            .map(|id| {
                self.entries
                    .iter()
                    .find(|e| e.id == *id)
                    .cloned()
                    .ok_or_else(|| Error::Invalid(format!("no prompt for category {id}")))
            })
            .collect::<Result<_>>()?;
        Ok(Self { entries })
    }

    /// Template names and descriptions for synthetic categories.
    pub fn synthetic(spec: &SynthSpec, ctx: usize) -> Self {
        let entries = spec
            .category_ids()
            .into_iter()
            .map(|id| {
                let dir = DIRECTIONS[id as usize].2;
                let color = PALETTE[id as usize].1;
                let (name, desc) = match spec.mode {
                    SynthMode::MotionOnly => (format!("moving {dir}"), format!("square moving {dir}")),
                    SynthMode::AppearanceOnly => (format!("{color} square"), format!("a still {color} square")),
                    SynthMode::Mixed => (format!("{color} {dir}"), format!("{color} box moving {dir}")),
                };
                CategoryPrompt::new(id, &name, Some(&desc), ctx)
            })
            .collect();
        Self { entries }
    }

    /// Parses `id<TAB>name[<TAB>description]` lines.
    pub fn parse(text: &str, ctx: usize) -> Result<Self> {
        let mut entries = Vec::new();
        let mut seen = BTreeSet::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() < 2 || fields.len() > 3 {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("expected 2 or 3 tab-separated fields, found {}", fields.len()),
                });
            }
            let id: u32 = fields[0].trim().parse().map_err(|_| Error::Parse {
                line: line_no,
                msg: format!("category id `{}` is not a number", fields[0]),
            })?;
            let name = fields[1].trim();
            if name.is_empty() {
                return Err(Error::Parse {
                    line: line_no,
                    msg: "empty category name".into(),
                });
            }
            if !seen.insert(id) {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("duplicate category id {id}"),
                });
            }
            let desc = fields.get(2).map(|d| d.trim()).filter(|d| !d.is_empty());
            entries.push(CategoryPrompt::new(id, name, desc, ctx));
        }
        if entries.is_empty() {
            return Err(Error::Invalid("description file has no categories".into()));
        }
        Ok(Self { entries })
    }
}

pub fn load_descriptions(path: &Path, ctx: usize) -> Result<CategoryPromptSet> {
    let text = std::fs::read_to_string(path)?;
    CategoryPromptSet::parse(&text, ctx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let cfg = ModelConfig::toy();
        let spec = SynthSpec {
            samples_per_category: 3,
            ..Default::default()
        };
        let a = generate(&spec, &cfg).unwrap();
        let b = generate(&spec, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 12);
        let c = generate(&SynthSpec { seed: 99, ..spec }, &cfg).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn path_leaving_frame_rejected() {
        let cfg = ModelConfig::toy();
        let spec = SynthSpec { speed: 6, ..Default::default() };
        assert!(spec.validate(&cfg).is_err());
        let still = SynthSpec {
            speed: 6,
            mode: SynthMode::AppearanceOnly,
            ..Default::default()
        };
        assert!(still.validate(&cfg).is_ok());
    }

    #[test]
    fn right_reversed_is_left() {
        let cfg = ModelConfig::toy();
        let right = render(&cfg, 16, [1.0; 3], (2, 5), (4, 0)).unwrap();
        let end = 2 + 4 * (cfg.frames as i64 - 1);
        let left = render(&cfg, 16, [1.0; 3], (end, 5), (-4, 0)).unwrap();
        let frame = cfg.height * cfg.width * cfg.channels;
        for t in 0..cfg.frames {
            let r = &right.data()[t * frame..(t + 1) * frame];
            let l = &left.data()[(cfg.frames - 1 - t) * frame..(cfg.frames - t) * frame];
            assert_eq!(r, l);
        }
    }

    #[test]
    fn right_mirrored_is_left() {
        let cfg = ModelConfig::toy();
        let (w, c) = (cfg.width, cfg.channels);
        let right = render(&cfg, 16, [1.0; 3], (2, 5), (4, 0)).unwrap();
        let left = render(&cfg, 16, [1.0; 3], (w as i64 - 16 - 2, 5), (-4, 0)).unwrap();
        for t in 0..cfg.frames {
            for y in 0..cfg.height {
                for x in 0..w {
                    for ch in 0..c {
                        let a = right.data()[((t * cfg.height + y) * w + x) * c + ch];
                        let b = left.data()[((t * cfg.height + y) * w + (w - 1 - x)) * c + ch];
                        assert_eq!(a, b);
                    }
                }
            }
        }
    }

    #[test]
    fn equal_interval_sampling() {
        assert_eq!(sample_frame_indices(16, 4).unwrap(), vec![0, 4, 8, 12]);
        assert_eq!(sample_frame_indices(10, 4).unwrap(), vec![0, 2, 5, 7]);
        assert!(sample_frame_indices(3, 4).is_err());
    }

    #[test]
    fn descriptions_parse() {
        let text = "3\tBasketball\tBasketball is a sport played by two teams of five players...\n4\tDiving\n";
        let set = CategoryPromptSet::parse(text, 32).unwrap();
        assert_eq!(set.entries[0].id, 3);
        assert_eq!(
            set.entries[0].description.as_deref(),
            Some("Basketball is a sport played by two teams of five players...")
        );
        assert_eq!(set.entries[1].description, None);
        assert_eq!(set.entries[1].tokens, tokenize("Diving", 32));
    }

    #[test]
    fn descriptions_errors() {
        assert!(CategoryPromptSet::parse("", 32).is_err());
        let dup = CategoryPromptSet::parse("1\ta\n1\tb\n", 32).unwrap_err();
        assert!(dup.to_string().contains("line 2"), "{dup}");
        let bad = CategoryPromptSet::parse("1\ta\nnope\n", 32).unwrap_err();
        assert!(bad.to_string().contains("line 2"), "{bad}");
    }

    #[test]
    fn synthetic_prompts_unique() {
        let spec = SynthSpec::default();
        let set = CategoryPromptSet::synthetic(&spec, 32);
        let unique: BTreeSet<_> = set.entries.iter().map(|e| e.tokens.clone()).collect();
        assert_eq!(unique.len(), set.len());
    }
}
