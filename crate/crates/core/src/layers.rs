//! Transformer building blocks shared by both towers.

use crate::autodiff::Var;
use crate::error::Result;
use crate::session::Session;

/// `x W + b` with `{prefix}.weight` / `{prefix}.bias`.
pub fn linear(s: &mut Session, x: Var, prefix: &str) -> Result<Var> {
    let w = s.p(&format!("{prefix}.weight"))?;
    let b = s.p(&format!("{prefix}.bias"))?;
    let xw = s.matmul(x, w)?;
    s.add(xw, b)
}

/// Row-wise layer normalization followed by the `{prefix}.gamma/beta` affine.
pub fn layer_norm(s: &mut Session, x: Var, prefix: &str) -> Result<Var> {
    let gamma = s.p(&format!("{prefix}.gamma"))?;
    let beta = s.p(&format!("{prefix}.beta"))?;
    let n = s.layer_norm(x)?;
    let scaled = s.mul(n, gamma)?;
    s.add(scaled, beta)
}

/// Multi-head scaled dot-product self-attention over the rows of `x`.
///
/// `mask` is added to every head's score matrix before the softmax.
pub fn mha(s: &mut Session, x: Var, prefix: &str, heads: usize, mask: Option<Var>) -> Result<Var> {
    let q = linear(s, x, &format!("{prefix}.attn.q"))?;
    let k = linear(s, x, &format!("{prefix}.attn.k"))?;
    let v = linear(s, x, &format!("{prefix}.attn.v"))?;
    let width = s.shape(x)[1];
    let dh = width / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = s.slice(q, 1, h * dh, dh)?;
        let kh = s.slice(k, 1, h * dh, dh)?;
        let vh = s.slice(v, 1, h * dh, dh)?;
        let scores = s.matmul_t(qh, kh)?;
        let mut scores = s.scale(scores, scale)?;
        if let Some(m) = mask {
            scores = s.add(scores, m)?;
        }
        let att = s.softmax(scores)?;
        outs.push(s.matmul(att, vh)?);
    }
    let merged = if heads == 1 { outs[0] } else { s.concat(&outs, 1)? };
    linear(s, merged, &format!("{prefix}.attn.o"))
}

pub fn mlp(s: &mut Session, x: Var, prefix: &str) -> Result<Var> {
    let h = linear(s, x, &format!("{prefix}.mlp.fc1"))?;
    let h = s.gelu(h)?;
    linear(s, h, &format!("{prefix}.mlp.fc2"))
}
