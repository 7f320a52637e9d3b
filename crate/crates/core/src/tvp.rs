//! Temporal visual prompting.
//!
//! Each vision layer owns one learnable prompt per frame. Before the layer
//! runs, every frame's prompt is shifted by the mean of that frame's tokens,
//! the `T` shifted prompts attend to each other through the layer's own
//! frozen attention, and each result is appended to its frame as one extra
//! token.

use crate::autodiff::Var;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::layers::{layer_norm, mha};
use crate::params::names;
use crate::session::Session;

/// The `T x D` slice of the prompt bank for `layer`.
pub fn prompts_for_layer(s: &mut Session, layer: usize, cfg: &ModelConfig) -> Result<Var> {
    let bank = s.p(names::PROMPTS)?;
    let l = s.slice(bank, 0, layer, 1)?;
    s.reshape(l, &[cfg.frames, cfg.d_visual])
}

/// Adds the token mean of frame `t` to prompt row `t`.
pub fn associate(s: &mut Session, prompts: Var, frames: &[Var]) -> Result<Var> {
    let (t, d) = (s.shape(prompts)[0], s.shape(prompts)[1]);
    if frames.len() != t {
        return Err(Error::Shape {
            op: "associate",
            lhs: vec![t, d],
            rhs: vec![frames.len()],
        });
    }
    let means = frames
        .iter()
        .map(|z| s.mean(*z, Some(0)))
        .collect::<Result<Vec<_>>>()?;
    let stacked = s.concat(&means, 0)?;
    s.add(prompts, stacked)
}

/// `MHA_l(LN_l(p))` across the `T` prompt rows, with layer `l`'s frozen
/// pre-attention norm and attention weights. No residual, no temporal
/// position signal.
pub fn temporal_attend(s: &mut Session, associated: Var, layer: usize, cfg: &ModelConfig) -> Result<Var> {
    let prefix = format!("visual.layers.{layer}");
    let normed = layer_norm(s, associated, &format!("{prefix}.ln1"))?;
    mha(s, normed, &prefix, cfg.heads, None)
}

/// Appends prompt row `t` of `attended` below the frame's tokens.
pub fn inject(s: &mut Session, attended: Var, t: usize, tokens: Var) -> Result<Var> {
    let (pw, zw) = (s.shape(attended)[1], s.shape(tokens)[1]);
    if pw != zw {
        return Err(Error::Shape {
            op: "inject",
            lhs: s.shape(tokens).to_vec(),
            rhs: s.shape(attended).to_vec(),
        });
    }
    let row = s.slice(attended, 0, t, 1)?;
    s.concat(&[tokens, row], 0)
}

/// Elements in the prompt bank.
pub fn prompt_param_count(cfg: &ModelConfig) -> usize {
    cfg.layers * cfg.frames * cfg.d_visual
}
