//! Contrastive and motion objectives.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Array, Precision};

pub const MIN_NORM: f64 = 1e-12;
/// Offset in the motion loss denominator.
pub const MOTION_DELTA: f64 = 1.0;

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            op: "cosine",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < MIN_NORM || nb < MIN_NORM {
        return Err(Error::Invalid("cosine of a near-zero vector".into()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

fn normalize_rows(g: &mut Graph, x: Var) -> Result<Var> {
    let sq = g.square(x)?;
    let ss = g.sum(sq, Some(1))?;
    if g.value(ss).data().iter().any(|v| v.sqrt() < MIN_NORM) {
        return Err(Error::Invalid("cosine of a near-zero embedding".into()));
    }
    let norm = g.sqrt(ss)?;
    g.div(x, norm)
}

/// `B x K` cosine similarities between rows of `videos` and rows of `classes`.
pub fn cosine_similarities(g: &mut Graph, videos: Var, classes: Var) -> Result<Var> {
    let v = normalize_rows(g, videos)?;
    let y = normalize_rows(g, classes)?;
    g.matmul_t(v, y)
}

/// Mean over rows of `-log softmax(sims / tau)[label]`.
pub fn contrastive_loss(g: &mut Graph, sims: Var, labels: &[usize], tau: f64) -> Result<Var> {
    let (b, k) = (g.shape(sims)[0], g.shape(sims)[1]);
    if labels.len() != b {
        return Err(Error::Shape {
            op: "contrastive_loss",
            lhs: vec![b, k],
            rhs: vec![labels.len()],
        });
    }
    if let Some(bad) = labels.iter().find(|l| **l >= k) {
        return Err(Error::Invalid(format!("label {bad} out of range for {k} categories")));
    }
    let logits = g.scale(sims, 1.0 / tau)?;
    let logp = g.log_softmax(logits)?;
    let mut onehot = Array::zeros(vec![b, k]);
    for (i, l) in labels.iter().enumerate() {
        onehot.data_mut()[i * k + l] = 1.0;
    }
    let mask = g.constant(onehot)?;
    let picked = g.mul(logp, mask)?;
    let total = g.sum(picked, None)?;
    g.scale(total, -1.0 / b as f64)
}

/// Graph handles for the motion statistics of one video.
#[derive(Debug, Clone, Copy)]
pub struct MotionVars {
    pub variance: Var,
    pub central: Var,
    pub spread: Var,
    pub loss: Var,
}

/// Motion statistics of a `T x D` frame-embedding matrix.
///
/// Variance and central difference are elementwise over the embedding axis.
/// Central differences exist only for interior frames; the end frames
/// contribute nothing but the `1/T` normalization is kept.
pub fn motion_terms(g: &mut Graph, frames: Var) -> Result<MotionVars> {
    let t = g.shape(frames)[0];
    if t < 2 {
        return Err(Error::Invalid(format!("motion statistics need at least 2 frames, got {t}")));
    }
    let mean = g.mean(frames, Some(0))?;
    let centered = g.sub(frames, mean)?;
    let sq = g.square(centered)?;
    let variance = g.mean(sq, Some(0))?;

    let central = if t >= 3 {
        let ahead = g.slice(frames, 0, 2, t - 2)?;
        let behind = g.slice(frames, 0, 0, t - 2)?;
        let diff = g.sub(ahead, behind)?;
        let mag = g.abs(diff)?;
        let total = g.sum(mag, Some(0))?;
        g.scale(total, 0.5 / t as f64)?
    } else {
        let zero = Array::zeros(g.shape(variance).to_vec());
        g.constant(zero)?
    };

    let mv = g.mean(variance, None)?;
    let mc = g.mean(central, None)?;
    let spread = g.add(mv, mc)?;
    let denom = g.offset(spread, MOTION_DELTA)?;
    let loss = g.recip(denom)?;
    Ok(MotionVars {
        variance,
        central,
        spread,
        loss,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MotionStats {
    pub variance: Vec<f64>,
    pub central: Vec<f64>,
    pub spread: f64,
    pub loss: f64,
    pub delta: f64,
}

/// Evaluates [`motion_terms`] on plain values at 64-bit precision.
pub fn motion_stats(frames: &Array) -> Result<MotionStats> {
    let mut g = Graph::new(Precision::F64);
    let x = g.constant(frames.clone())?;
    let m = motion_terms(&mut g, x)?;
    Ok(MotionStats {
        variance: g.value(m.variance).data().to_vec(),
        central: g.value(m.central).data().to_vec(),
        spread: g.scalar_value(m.spread),
        loss: g.scalar_value(m.loss),
        delta: MOTION_DELTA,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub contrastive: f64,
    pub motion: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            contrastive: 1.0,
            motion: 1.0,
        }
    }
}

/// `w_c * contrastive + w_m * mean_b(L_m)` over a batch.
///
/// `frames` holds one `T x D` matrix per video; video embeddings are their
/// frame means.
pub fn total_loss(g: &mut Graph, frames: &[Var], classes: Var, labels: &[usize], tau: f64, w: LossWeights) -> Result<Var> {
    if w.contrastive < 0.0 || w.motion < 0.0 {
        return Err(Error::Invalid("loss weights must be non-negative".into()));
    }
    let videos = frames.iter().map(|f| g.mean(*f, Some(0))).collect::<Result<Vec<_>>>()?;
    let v = g.concat(&videos, 0)?;
    let sims = cosine_similarities(g, v, classes)?;
    let lc = contrastive_loss(g, sims, labels, tau)?;
    let motion = frames
        .iter()
        .map(|f| motion_terms(g, *f).map(|m| m.loss))
        .collect::<Result<Vec<_>>>()?;
    let lm = g.concat(&motion, 0)?;
    let lm = g.mean(lm, None)?;
    let a = g.scale(lc, w.contrastive)?;
    let b = g.scale(lm, w.motion)?;
    g.add(a, b)
}
