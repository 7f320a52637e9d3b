//! Top-1 accuracy and the zero-shot, base-to-novel and few-shot protocols.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fmt::Write as _;

use rand::seq::SliceRandom;

use crate::config::{ModelConfig, Protocol};
use crate::error::{Error, Result};
use crate::model::{argmax, class_embeddings, class_scores, frame_embeddings, mean_rows};
use crate::params::{rng, ParameterStore};
use crate::synthdata::{CategoryPromptSet, Dataset};
use crate::tensor::{Array, Precision};

/// Percentage of rows whose highest score sits at the label.
pub fn top1(scores: &Array, labels: &[usize]) -> Result<f64> {
    if scores.shape().len() != 2 || scores.rows() == 0 {
        return Err(Error::Invalid("top1 needs a non-empty B x K score matrix".into()));
    }
    if scores.cols() == 0 {
        return Err(Error::Invalid("top1 needs at least one category".into()));
    }
    if labels.len() != scores.rows() {
        return Err(Error::Shape {
            op: "top1",
            lhs: scores.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    let hits = (0..scores.rows())
        .filter(|r| argmax(scores.row_slice(*r)) == labels[*r])
        .count();
    Ok(100.0 * hits as f64 / labels.len() as f64)
}

pub fn harmonic_mean(a: f64, b: f64) -> Result<f64> {
    if !(a >= 0.0 && b >= 0.0) {
        return Err(Error::Invalid(format!("harmonic mean of negative accuracy ({a}, {b})")));
    }
    if a + b == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * a * b / (a + b))
}

/// Disjoint base and novel category ids covering a category set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CategorySplit {
    base: BTreeSet<u32>,
    novel: BTreeSet<u32>,
}

impl CategorySplit {
    pub fn new(base: &[u32], novel: &[u32], all: &[u32]) -> Result<Self> {
        let base: BTreeSet<u32> = base.iter().copied().collect();
        let novel: BTreeSet<u32> = novel.iter().copied().collect();
        let all: BTreeSet<u32> = all.iter().copied().collect();
        if base.is_empty() || novel.is_empty() {
            return Err(Error::Invalid("base and novel sets must both be non-empty".into()));
        }
        if let Some(id) = base.intersection(&novel).next() {
            return Err(Error::Invalid(format!("category {id} is both base and novel")));
        }
        if base.union(&novel).copied().collect::<BTreeSet<_>>() != all {
            return Err(Error::Invalid("base and novel sets must cover every category".into()));
        }
        Ok(Self { base, novel })
    }

    /// Even ids are base, odd ids novel.
    pub fn even_odd(all: &[u32]) -> Result<Self> {
        let (base, novel): (Vec<u32>, Vec<u32>) = all.iter().partition(|id| *id % 2 == 0);
        Self::new(&base, &novel, all)
    }

    pub fn base_ids(&self) -> Vec<u32> {
        self.base.iter().copied().collect()
    }

    pub fn novel_ids(&self) -> Vec<u32> {
        self.novel.iter().copied().collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitResult {
    pub name: String,
    pub top1: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub splits: Vec<SplitResult>,
    pub harmonic_mean: Option<f64>,
    pub frames: usize,
    pub views: usize,
    pub seed: Option<u64>,
}

impl EvalReport {
    pub fn split(&self, name: &str) -> Option<&SplitResult> {
        self.splits.iter().find(|s| s.name == name)
    }

    /// Comma-separated rows under the `# `-prefixed `echo`.
    pub fn to_csv(&self, echo: &str) -> String {
        let mut out = echo.to_string();
        out.push_str("protocol,split,top1,samples,frames,views,seed\n");
        let seed = self.seed.map(|s| s.to_string()).unwrap_or_default();
        for s in &self.splits {
            let _ = writeln!(
                out,
                "{},{},{:.4},{},{},{},{}",
                self.protocol, s.name, s.top1, s.samples, self.frames, self.views, seed
            );
        }
        if let Some(hm) = self.harmonic_mean {
            let n: usize = self.splits.iter().map(|s| s.samples).sum();
            let _ = writeln!(out, "{},hm,{:.4},{},{},{},{}", self.protocol, hm, n, self.frames, self.views, seed);
        }
        out
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "protocol {}  frames={} views={}", self.protocol, self.frames, self.views)?;
        writeln!(f, "{:<10}{:>10}{:>10}", "split", "top1", "samples")?;
        for s in &self.splits {
            writeln!(f, "{:<10}{:>10.2}{:>10}", s.name, s.top1, s.samples)?;
        }
        if let Some(hm) = self.harmonic_mean {
            writeln!(f, "{:<10}{:>10.2}", "hm", hm)?;
        }
        Ok(())
    }
}

/// `B x K` cosine scores of every video against the class embeddings.
pub fn score_videos(store: &ParameterStore, cfg: &ModelConfig, data: &Dataset, classes: &Array, precision: Precision) -> Result<Array> {
    let mut rows = Vec::with_capacity(data.len());
    for s in &data.samples {
        let frames = frame_embeddings(store, cfg, &s.video, precision)?;
        rows.push(class_scores(&mean_rows(&frames), classes)?);
    }
    Array::from_rows(&rows)
}

/// Classifies every target video against the target categories' prompts.
///
/// `source_ids` are the categories seen in training; any overlap with the
/// target categories is rejected. All predictions are made before labels are
/// consulted.
pub fn zero_shot_eval(
    store: &ParameterStore,
    cfg: &ModelConfig,
    source_ids: &[u32],
    target: &Dataset,
    prompts: &CategoryPromptSet,
    precision: Precision,
) -> Result<EvalReport> {
    if target.is_empty() {
        return Err(Error::Invalid("empty target set".into()));
    }
    let source: BTreeSet<u32> = source_ids.iter().copied().collect();
    if let Some(id) = target.category_ids.iter().find(|id| source.contains(id)) {
        return Err(Error::Invalid(format!("target category {id} was seen in training")));
    }
    let pool = prompts.select(&target.category_ids)?;
    let classes = class_embeddings(store, cfg, &pool.tokens(), precision)?;
    let scores = score_videos(store, cfg, target, &classes, precision)?;
    let acc = top1(&scores, &target.labels())?;
    Ok(EvalReport {
        protocol: Protocol::ZeroShot,
        splits: vec![SplitResult {
            name: "target".into(),
            top1: acc,
            samples: target.len(),
        }],
        harmonic_mean: None,
        frames: cfg.frames,
        views: 1,
        seed: None,
    })
}

/// Base and novel top-1 and their harmonic mean.
///
/// Novel videos are scored against the novel prompts only unless
/// `novel_with_base_distractors` adds the base prompts to the pool.
pub fn base_to_novel_eval(
    store: &ParameterStore,
    cfg: &ModelConfig,
    split: &CategorySplit,
    base: &Dataset,
    novel: &Dataset,
    prompts: &CategoryPromptSet,
    novel_with_base_distractors: bool,
    precision: Precision,
) -> Result<EvalReport> {
    if base.category_ids != split.base_ids() {
        return Err(Error::Invalid("base dataset categories do not match the split".into()));
    }
    if novel.category_ids != split.novel_ids() {
        return Err(Error::Invalid("novel dataset categories do not match the split".into()));
    }
    if base.is_empty() || novel.is_empty() {
        return Err(Error::Invalid("base and novel datasets must be non-empty".into()));
    }
    let base_pool = prompts.select(&split.base_ids())?;
    let base_classes = class_embeddings(store, cfg, &base_pool.tokens(), precision)?;
    let base_scores = score_videos(store, cfg, base, &base_classes, precision)?;
    let base_acc = top1(&base_scores, &base.labels())?;

    let (pool_ids, offset) = if novel_with_base_distractors {
        let mut ids = split.base_ids();
        let n = ids.len();
        ids.extend(split.novel_ids());
        (ids, n)
    } else {
        (split.novel_ids(), 0)
    };
    let novel_pool = prompts.select(&pool_ids)?;
    let novel_classes = class_embeddings(store, cfg, &novel_pool.tokens(), precision)?;
    let novel_scores = score_videos(store, cfg, novel, &novel_classes, precision)?;
    let novel_labels: Vec<usize> = novel.labels().iter().map(|l| l + offset).collect();
    let novel_acc = top1(&novel_scores, &novel_labels)?;

    Ok(EvalReport {
        protocol: Protocol::BaseToNovel,
        splits: vec![
            SplitResult {
                name: "base".into(),
                top1: base_acc,
                samples: base.len(),
            },
            SplitResult {
                name: "novel".into(),
                top1: novel_acc,
                samples: novel.len(),
            },
        ],
        harmonic_mean: Some(harmonic_mean(base_acc, novel_acc)?),
        frames: cfg.frames,
        views: 1,
        seed: None,
    })
}

/// Exactly `k` samples of every category, chosen by `seed`, in dataset order.
pub fn few_shot_sample(data: &Dataset, k: usize, seed: u64) -> Result<Dataset> {
    if k == 0 {
        return Err(Error::Invalid("K must be at least 1".into()));
    }
    let mut by_label: BTreeMap<usize, Vec<usize>> = (0..data.category_ids.len()).map(|l| (l, Vec::new())).collect();
    for (i, s) in data.samples.iter().enumerate() {
        by_label.entry(s.label).or_default().push(i);
    }
    let mut r = rng(seed);
    let mut keep = Vec::with_capacity(k * by_label.len());
    for (label, mut idx) in by_label {
        if idx.len() < k {
            let id = data.category_ids.get(label).copied().unwrap_or(label as u32);
            return Err(Error::Invalid(format!(
                "category {id} has {} samples, fewer than K = {k}",
                idx.len()
            )));
        }
        idx.shuffle(&mut r);
        keep.extend_from_slice(&idx[..k]);
    }
    keep.sort_unstable();
    Ok(data.subset(&keep))
}
