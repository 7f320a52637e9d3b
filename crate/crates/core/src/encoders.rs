//! The frozen dual-encoder backbone: a per-frame vision transformer and a
//! byte-level text transformer, with hook points for temporal prompts and
//! adapters.

use crate::adapters::adapter_forward;
use crate::autodiff::Var;
use crate::config::{ModelConfig, PromptDepth};
use crate::error::{Error, Result};
use crate::layers::{layer_norm, mha, mlp};
use crate::params::names;
use crate::session::Session;
use crate::tensor::Array;
use crate::tvp;

pub const START_TOKEN: u32 = 256;
pub const END_TOKEN: u32 = 257;
pub const PAD_TOKEN: u32 = 258;
/// 256 byte values plus start, end and padding markers.
pub const VOCAB_SIZE: usize = 259;

const MASKED: f64 = -1e9;

/// Which tunable components take part in a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Forward {
    pub prompts: PromptDepth,
    pub adapters: bool,
}

impl Forward {
    pub fn model(cfg: &ModelConfig) -> Self {
        Self {
            prompts: cfg.prompt_depth,
            adapters: true,
        }
    }

    /// Backbone only: no prompt tokens and no adapters.
    pub fn frozen_backbone() -> Self {
        Self {
            prompts: PromptDepth::Disabled,
            adapters: false,
        }
    }
}

/// Byte-level tokenization: start marker, UTF-8 bytes, end marker, padding.
/// Text longer than `ctx - 2` bytes is truncated so the end marker always fits.
pub fn tokenize(text: &str, ctx: usize) -> Vec<u32> {
    let body = ctx.saturating_sub(2);
    let mut out = Vec::with_capacity(ctx);
    out.push(START_TOKEN);
    out.extend(text.bytes().take(body).map(u32::from));
    out.push(END_TOKEN);
    out.resize(ctx, PAD_TOKEN);
    out
}

/// Splits an `H x W x C` frame into `N` row-major flattened patches.
pub fn patchify(frame: &[f64], cfg: &ModelConfig) -> Result<Array> {
    let (h, w, c, p) = (cfg.height, cfg.width, cfg.channels, cfg.patch);
    if h % p != 0 || w % p != 0 {
        return Err(Error::Config(format!("frame {h}x{w} not divisible by patch {p}")));
    }
    if frame.len() != h * w * c {
        return Err(Error::Shape {
            op: "patchify",
            lhs: vec![frame.len()],
            rhs: vec![h, w, c],
        });
    }
    let (gh, gw) = (h / p, w / p);
    let mut out = Vec::with_capacity(h * w * c);
    for py in 0..gh {
        for px in 0..gw {
            for i in 0..p {
                let row = (py * p + i) * w + px * p;
                out.extend_from_slice(&frame[row * c..(row + p) * c]);
            }
        }
    }
    Array::new(vec![gh * gw, p * p * c], out)
}

/// Layer-0 tokens of one frame: `[cls; patches W + b] + E_pos`.
pub fn patch_embed(s: &mut Session, frame: &Array, cfg: &ModelConfig) -> Result<Var> {
    let expected = [cfg.height, cfg.width, cfg.channels];
    if frame.shape() != expected {
        return Err(Error::Shape {
            op: "patch_embed",
            lhs: frame.shape().to_vec(),
            rhs: expected.to_vec(),
        });
    }
    let patches = patchify(frame.data(), cfg)?;
    let x = s.input(patches)?;
    let proj = crate::layers::linear(s, x, "visual.patch")?;
    let cls = s.p(names::VISUAL_CLS)?;
    let tokens = s.concat(&[cls, proj], 0)?;
    let pos = s.p("visual.pos")?;
    s.add(tokens, pos)
}

/// One adapted block. `input` holds the `keep` token rows, optionally
/// followed by one prompt row; the prompt row's output is dropped after
/// attention.
fn adapted_block(
    s: &mut Session,
    input: Var,
    prefix: &str,
    keep: usize,
    heads: usize,
    mask: Option<Var>,
    adapters: bool,
) -> Result<Var> {
    let normed = layer_norm(s, input, &format!("{prefix}.ln1"))?;
    let attended = mha(s, normed, prefix, heads, mask)?;
    let u = s.add(input, attended)?;
    let rows = s.shape(u)[0];
    let tilde = if rows == keep { u } else { s.slice(u, 0, 0, keep)? };
    let hat = if adapters { adapter_forward(s, tilde, prefix)? } else { tilde };
    let normed = layer_norm(s, hat, &format!("{prefix}.ln2"))?;
    let m = mlp(s, normed, prefix)?;
    s.add(hat, m)
}

/// Vision block `l` on `[z; p]` (N+2 rows) or `z` alone (N+1 rows).
pub fn block_forward(s: &mut Session, input: Var, layer: usize, cfg: &ModelConfig, adapters: bool) -> Result<Var> {
    let tokens = cfg.num_patches() + 1;
    let rows = s.shape(input)[0];
    if rows != tokens && rows != tokens + 1 {
        return Err(Error::Shape {
            op: "block_forward",
            lhs: s.shape(input).to_vec(),
            rhs: vec![tokens + 1, cfg.d_visual],
        });
    }
    let prefix = format!("visual.layers.{layer}");
    adapted_block(s, input, &prefix, tokens, cfg.heads, None, adapters)
}

/// Per-frame embeddings `T x D_e` for a `T x H x W x C` video.
pub fn encode_frames(s: &mut Session, video: &Array, cfg: &ModelConfig, fwd: Forward) -> Result<Var> {
    let expected = [cfg.frames, cfg.height, cfg.width, cfg.channels];
    if video.shape() != expected {
        return Err(Error::Shape {
            op: "encode_frames",
            lhs: video.shape().to_vec(),
            rhs: expected.to_vec(),
        });
    }
    let frame_len = cfg.height * cfg.width * cfg.channels;
    let mut z = Vec::with_capacity(cfg.frames);
    for t in 0..cfg.frames {
        let frame = Array::new(
            vec![cfg.height, cfg.width, cfg.channels],
            video.data()[t * frame_len..(t + 1) * frame_len].to_vec(),
        )?;
        z.push(patch_embed(s, &frame, cfg)?);
    }
    for l in 0..cfg.layers {
        let attended = if fwd.prompts.active_at(l) {
            let p = tvp::prompts_for_layer(s, l, cfg)?;
            let assoc = tvp::associate(s, p, &z)?;
            Some(tvp::temporal_attend(s, assoc, l, cfg)?)
        } else {
            None
        };
        for (t, zt) in z.iter_mut().enumerate() {
            let input = match attended {
                Some(a) => tvp::inject(s, a, t, *zt)?,
                None => *zt,
            };
            *zt = block_forward(s, input, l, cfg, fwd.adapters)?;
        }
    }
    let mut rows = Vec::with_capacity(cfg.frames);
    for zt in z {
        let cls = s.slice(zt, 0, 0, 1)?;
        let normed = layer_norm(s, cls, "visual.ln_post")?;
        let proj = s.p("visual.proj")?;
        rows.push(s.matmul(normed, proj)?);
    }
    s.concat(&rows, 0)
}

/// Mean over the frame axis: `T x D_e -> 1 x D_e`.
pub fn video_embed(s: &mut Session, frames: Var) -> Result<Var> {
    s.mean(frames, Some(0))
}

fn causal_mask(ctx: usize) -> Array {
    let mut m = Array::zeros(vec![ctx, ctx]);
    for i in 0..ctx {
        for j in i + 1..ctx {
            m.data_mut()[i * ctx + j] = MASKED;
        }
    }
    m
}

/// Embeds one `ctx`-length token sequence into `1 x D_e`, read out at the
/// end marker.
pub fn encode_text(s: &mut Session, tokens: &[u32], cfg: &ModelConfig, fwd: Forward) -> Result<Var> {
    if tokens.len() != cfg.ctx {
        return Err(Error::Shape {
            op: "encode_text",
            lhs: vec![tokens.len()],
            rhs: vec![cfg.ctx],
        });
    }
    if let Some(bad) = tokens.iter().find(|t| **t as usize >= cfg.vocab) {
        return Err(Error::Invalid(format!("token id {bad} outside vocabulary of {}", cfg.vocab)));
    }
    let eot = tokens
        .iter()
        .position(|t| *t == END_TOKEN)
        .ok_or_else(|| Error::Invalid("token sequence has no end marker".into()))?;

    // The embedding table is frozen, so rows are gathered outside the tape.
    let table = s.store().get("text.token_embedding")?;
    let d = cfg.d_text;
    let mut rows = Vec::with_capacity(cfg.ctx * d);
    for t in tokens {
        rows.extend_from_slice(table.row_slice(*t as usize));
    }
    let x = s.input(Array::new(vec![cfg.ctx, d], rows)?)?;
    let pos = s.p("text.pos")?;
    let mut x = s.add(x, pos)?;
    let mask = s.input(causal_mask(cfg.ctx))?;
    for l in 0..cfg.layers {
        let prefix = format!("text.layers.{l}");
        x = adapted_block(s, x, &prefix, cfg.ctx, cfg.heads, Some(mask), fwd.adapters)?;
    }
    let end = s.slice(x, 0, eot, 1)?;
    let normed = layer_norm(s, end, "text.ln_final")?;
    let proj = s.p("text.proj")?;
    s.matmul(normed, proj)
}

/// Stacks the embeddings of several prompts into `K x D_e`.
pub fn encode_texts(s: &mut Session, prompts: &[Vec<u32>], cfg: &ModelConfig, fwd: Forward) -> Result<Var> {
    let rows = prompts
        .iter()
        .map(|t| encode_text(s, t, cfg, fwd))
        .collect::<Result<Vec<_>>>()?;
    s.concat(&rows, 0)
}
