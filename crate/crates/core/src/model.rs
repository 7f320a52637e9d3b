//! Inference helpers over a parameter store: frame, video and class
//! embeddings and similarity scores.

use crate::config::ModelConfig;
use crate::encoders::{encode_frames, encode_texts, Forward};
use crate::error::Result;
use crate::losses::cosine;
use crate::params::ParameterStore;
use crate::session::Session;
use crate::tensor::{Array, Precision};

/// `T x D_e` frame embeddings of one video.
pub fn frame_embeddings(store: &ParameterStore, cfg: &ModelConfig, video: &Array, precision: Precision) -> Result<Array> {
    let mut s = Session::inference(store, precision);
    let e = encode_frames(&mut s, video, cfg, Forward::model(cfg))?;
    Ok(s.value(e).clone())
}

/// `K x D_e` class embeddings.
pub fn class_embeddings(store: &ParameterStore, cfg: &ModelConfig, prompts: &[Vec<u32>], precision: Precision) -> Result<Array> {
    let mut s = Session::inference(store, precision);
    let y = encode_texts(&mut s, prompts, cfg, Forward::model(cfg))?;
    Ok(s.value(y).clone())
}

/// Mean of the frame rows.
pub fn mean_rows(frames: &Array) -> Vec<f64> {
    let (rows, cols) = (frames.rows(), frames.cols());
    let mut out = vec![0.0; cols];
    for r in 0..rows {
        for (o, v) in out.iter_mut().zip(frames.row_slice(r)) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|v| *v /= rows as f64);
    out
}

/// Cosine similarity of one video embedding to every class row.
pub fn class_scores(video: &[f64], classes: &Array) -> Result<Vec<f64>> {
    (0..classes.rows()).map(|k| cosine(video, classes.row_slice(k))).collect()
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = i;
        }
    }
    best
}
