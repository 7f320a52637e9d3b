//! Bottleneck adapters and tunable-parameter accounting.

use std::fmt;

use crate::autodiff::Var;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::layers::linear;
use crate::params::{layout, ParameterStore, Tag};
use crate::session::Session;

/// `x + up(GELU(down(x)))`, row-wise, with weights under `{block}.adapter`.
pub fn adapter_forward(s: &mut Session, x: Var, block: &str) -> Result<Var> {
    let width = s.shape(x)[1];
    let down_w = s.store().get(&format!("{block}.adapter.down.weight"))?;
    if down_w.shape()[0] != width {
        return Err(Error::Shape {
            op: "adapter",
            lhs: s.shape(x).to_vec(),
            rhs: down_w.shape().to_vec(),
        });
    }
    let h = linear(s, x, &format!("{block}.adapter.down"))?;
    let h = s.gelu(h)?;
    let up = linear(s, h, &format!("{block}.adapter.up"))?;
    s.add(x, up)
}

/// Element count of one adapter on a `width`-wide stream.
pub fn adapter_param_count(width: usize, ratio: usize) -> usize {
    let hidden = width / ratio;
    2 * width * hidden + hidden + width
}

/// Per-tag element counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ParamBreakdown {
    pub frozen: usize,
    pub prompts: usize,
    pub visual_adapters: usize,
    pub text_adapters: usize,
    pub cls_token: usize,
    pub total_tunable: usize,
}

impl ParamBreakdown {
    fn add(&mut self, tag: Tag, n: usize) {
        match tag {
            Tag::Frozen => self.frozen += n,
            Tag::Prompt => self.prompts += n,
            Tag::VisualAdapter => self.visual_adapters += n,
            Tag::TextAdapter => self.text_adapters += n,
            Tag::ClsToken => self.cls_token += n,
        }
        if tag.is_tunable() {
            self.total_tunable += n;
        }
    }

    pub fn total(&self) -> usize {
        self.frozen + self.total_tunable
    }

    /// `(label, count)` rows in display order.
    pub fn rows(&self) -> Vec<(&'static str, usize)> {
        vec![
            ("prompts", self.prompts),
            ("visual_adapters", self.visual_adapters),
            ("text_adapters", self.text_adapters),
            ("cls_token", self.cls_token),
            ("total_tunable", self.total_tunable),
            ("frozen", self.frozen),
        ]
    }
}

impl fmt::Display for ParamBreakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<16} {:>14} {:>10}", "component", "elements", "millions")?;
        for (label, n) in self.rows() {
            writeln!(f, "{:<16} {:>14} {:>10.2}", label, n, n as f64 / 1e6)?;
        }
        Ok(())
    }
}

/// Counts `(tag, element count)` records given as tag strings.
pub fn count_params<'a>(records: impl IntoIterator<Item = (&'a str, usize)>) -> Result<ParamBreakdown> {
    let mut b = ParamBreakdown::default();
    for (tag, n) in records {
        b.add(tag.parse()?, n);
    }
    Ok(b)
}

/// Counts a built store.
pub fn count_store(store: &ParameterStore) -> ParamBreakdown {
    let mut b = ParamBreakdown::default();
    for (_, e) in store.iter() {
        b.add(e.tag, e.value.len());
    }
    b
}

/// Counts from the layout alone, without allocating any tensor.
pub fn count_layout(cfg: &ModelConfig) -> Result<ParamBreakdown> {
    cfg.validate()?;
    let mut b = ParamBreakdown::default();
    for spec in layout(cfg) {
        b.add(spec.tag, spec.numel());
    }
    Ok(b)
}
