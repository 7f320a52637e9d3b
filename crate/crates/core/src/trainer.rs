//! Optimization loop: decoupled weight decay Adam, warmup + cosine schedule,
//! freeze-mask enforcement, checkpointing and per-epoch metrics.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::{ModelConfig, PromptDepth};
use crate::encoders::{encode_frames, encode_texts, Forward};
use crate::error::{Error, Result};
use crate::losses::{contrastive_loss, cosine_similarities, motion_terms, total_loss, LossWeights};
use crate::model::{argmax, class_embeddings, class_scores, frame_embeddings, mean_rows};
use crate::params::{derive_seed, rng, ParameterStore, Tag};
use crate::session::Session;
use crate::synthdata::{Dataset, Sample};
use crate::tensor::{Array, Precision};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub epochs: usize,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    /// Desk-scale recipe: the reference schedule with a learning rate suited
    /// to a randomly initialized backbone.
    fn default() -> Self {
        Self {
            base_lr: 1e-3,
            ..Self::reference()
        }
    }
}

impl TrainConfig {
    /// The full-scale recipe for a pretrained backbone.
    pub fn reference() -> Self {
        Self {
            base_lr: 5e-6,
            epochs: 50,
            warmup_fraction: 0.10,
            weight_decay: 0.2,
            batch_size: 16,
            seed: 0,
            lambda1: 1.0,
            lambda2: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            precision: Precision::F32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.base_lr > 0.0) {
            return fail("base_lr must be positive");
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return fail("warmup_fraction must lie in [0, 1)");
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return fail("batch_size and epochs must be positive");
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return fail("loss weights must be non-negative");
        }
        if self.weight_decay < 0.0 {
            return fail("weight_decay must be non-negative");
        }
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            contrastive: self.lambda1,
            motion: self.lambda2,
        }
    }
}

/// Linear warmup from 0 to `base_lr` over the first `warmup_fraction` of the
/// steps, then half-cosine decay to 0 at `total`.
pub fn lr_at(step: usize, total: usize, cfg: &TrainConfig) -> Result<f64> {
    if step > total {
        return Err(Error::Invalid(format!("step {step} beyond schedule of {total}")));
    }
    let warmup = cfg.warmup_fraction * total as f64;
    let s = step as f64;
    if s < warmup {
        return Ok(cfg.base_lr * s / warmup);
    }
    let span = total as f64 - warmup;
    if span <= 0.0 {
        return Ok(cfg.base_lr);
    }
    let progress = (s - warmup) / span;
    Ok(0.5 * cfg.base_lr * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// First and second moment accumulators for each trained tensor.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptimizerState {
    pub step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl OptimizerState {
    /// State for `names`, which must all be tunable.
    pub fn new(store: &ParameterStore, names: &[String]) -> Result<Self> {
        let mut moments = BTreeMap::new();
        for n in names {
            if store.tag(n)? == Tag::Frozen {
                return Err(Error::FrozenGradient(n.clone()));
            }
            let len = store.get(n)?.len();
            moments.insert(n.clone(), (vec![0.0; len], vec![0.0; len]));
        }
        Ok(Self { step: 0, moments })
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.moments.keys().map(String::as_str)
    }
}

/// One bias-corrected adaptive update with decoupled weight decay.
pub fn step(
    store: &mut ParameterStore,
    grads: &BTreeMap<String, Array>,
    state: &mut OptimizerState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    for name in grads.keys() {
        if store.tag(name)? == Tag::Frozen {
            return Err(Error::FrozenGradient(name.clone()));
        }
        if !state.moments.contains_key(name) {
            return Err(Error::Invalid(format!("gradient for untrained tensor `{name}`")));
        }
    }
    if let Some(missing) = state.moments.keys().find(|n| !grads.contains_key(*n)) {
        return Err(Error::Invalid(format!("missing gradient for `{missing}`")));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (name, (m, v)) in state.moments.iter_mut() {
        let g = grads[name].data();
        let param = store.get_mut(name)?;
        if g.len() != param.len() {
            return Err(Error::Shape {
                op: "optimizer step",
                lhs: param.shape().to_vec(),
                rhs: grads[name].shape().to_vec(),
            });
        }
        let precision = param.precision();
        for (i, p) in param.data_mut().iter_mut().enumerate() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + cfg.epsilon);
            *p = precision.round(*p - lr * (update + cfg.weight_decay * *p));
        }
    }
    Ok(())
}

/// Loss, number of correct top-1 predictions and gradients for one batch.
#[derive(Debug, Clone)]
pub struct BatchResult {
    pub loss: f64,
    pub correct: usize,
    pub grads: BTreeMap<String, Array>,
}

fn add_into(acc: &mut BTreeMap<String, Array>, grads: BTreeMap<String, Array>) {
    for (k, g) in grads {
        match acc.get_mut(&k) {
            Some(a) => a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y),
            None => {
                acc.insert(k, g);
            }
        }
    }
}

/// Gradients of the batch objective with respect to every tunable tensor.
///
/// The objective is `w_c * mean_i CE_i + w_m * mean_i L_m,i`, separable over
/// videos once the class embeddings are fixed. Each video is differentiated
/// on its own tape with the class embeddings as a leaf; the summed class
/// adjoint is then pulled back through the text tower in one pass.
pub fn batch_gradients(
    store: &ParameterStore,
    cfg: &ModelConfig,
    samples: &[&Sample],
    prompts: &[Vec<u32>],
    w: LossWeights,
    precision: Precision,
) -> Result<BatchResult> {
    let b = samples.len();
    if b == 0 {
        return Err(Error::Invalid("empty batch".into()));
    }
    let mut text = Session::new(store, precision);
    let classes = encode_texts(&mut text, prompts, cfg, Forward::model(cfg))?;
    let class_values = text.value(classes).clone();

    let mut grads = BTreeMap::new();
    let mut class_adjoint = vec![0.0; class_values.len()];
    let mut loss = 0.0;
    let mut correct = 0;
    for sample in samples {
        let mut s = Session::new(store, precision);
        let y = s.param(class_values.clone())?;
        let frames = encode_frames(&mut s, &sample.video, cfg, Forward::model(cfg))?;
        let video = s.mean(frames, Some(0))?;
        let sims = cosine_similarities(&mut s, video, y)?;
        if argmax(s.value(sims).data()) == sample.label {
            correct += 1;
        }
        let ce = contrastive_loss(&mut s, sims, &[sample.label], cfg.tau)?;
        let motion = motion_terms(&mut s, frames)?;
        let a = s.scale(ce, w.contrastive / b as f64)?;
        let c = s.scale(motion.loss, w.motion / b as f64)?;
        let li = s.add(a, c)?;
        loss += s.scalar_value(li);
        let (g, extra) = s.gradients_with(li, &[y])?;
        add_into(&mut grads, g);
        class_adjoint.iter_mut().zip(extra[0].data()).for_each(|(x, y)| *x += y);
    }

    let seed = text.input(Array::new(class_values.shape().to_vec(), class_adjoint)?)?;
    let weighted = text.mul(classes, seed)?;
    let pullback = text.sum(weighted, None)?;
    add_into(&mut grads, text.gradients(pullback)?);
    Ok(BatchResult { loss, correct, grads })
}

/// The batch objective evaluated on a single tape, forward only.
pub fn batch_loss(
    store: &ParameterStore,
    cfg: &ModelConfig,
    samples: &[&Sample],
    prompts: &[Vec<u32>],
    w: LossWeights,
    precision: Precision,
) -> Result<f64> {
    let mut s = Session::inference(store, precision);
    let classes = encode_texts(&mut s, prompts, cfg, Forward::model(cfg))?;
    let frames = samples
        .iter()
        .map(|x| encode_frames(&mut s, &x.video, cfg, Forward::model(cfg)))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = samples.iter().map(|x| x.label).collect();
    let l = total_loss(&mut s, &frames, classes, &labels, cfg.tau, w)?;
    Ok(s.scalar_value(l))
}

/// Mean objective and top-1 accuracy (percent) over a dataset, evaluated
/// without gradients.
pub fn evaluate(
    store: &ParameterStore,
    cfg: &ModelConfig,
    data: &Dataset,
    prompts: &[Vec<u32>],
    w: LossWeights,
    precision: Precision,
) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::Invalid("empty dataset".into()));
    }
    let classes = class_embeddings(store, cfg, prompts, precision)?;
    let mut loss = 0.0;
    let mut correct = 0;
    for sample in &data.samples {
        let frames = frame_embeddings(store, cfg, &sample.video, precision)?;
        let scores = class_scores(&mean_rows(&frames), &classes)?;
        if argmax(&scores) == sample.label {
            correct += 1;
        }
        let mut g = crate::autodiff::Graph::new(Precision::F64);
        let sims = g.constant(Array::row(&scores))?;
        let ce = contrastive_loss(&mut g, sims, &[sample.label], cfg.tau)?;
        let f = g.constant(frames)?;
        let m = motion_terms(&mut g, f)?;
        loss += w.contrastive * g.scalar_value(ce) + w.motion * g.scalar_value(m.loss);
    }
    let n = data.len() as f64;
    Ok((loss / n, 100.0 * correct as f64 / n))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_top1: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricLog {
    /// `# `-prefixed configuration echo.
    pub header: String,
    pub records: Vec<EpochRecord>,
}

pub const METRIC_COLUMNS: &str = "epoch,lr,train_loss,train_top1,wall_seconds";

impl MetricLog {
    pub fn to_csv(&self) -> String {
        let mut out = self.header.clone();
        out.push_str(METRIC_COLUMNS);
        out.push('\n');
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{:e},{:.9},{:.4},{:.3}",
                r.epoch, r.lr, r.train_loss, r.train_top1, r.wall_seconds
            );
        }
        out
    }

    /// Records with the wall-clock column removed.
    pub fn deterministic_part(&self) -> Vec<(usize, f64, f64, f64)> {
        self.records
            .iter()
            .map(|r| (r.epoch, r.lr, r.train_loss, r.train_top1))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub store: ParameterStore,
    pub log: MetricLog,
    /// Objective and top-1 over the training set at the final parameters.
    pub final_loss: f64,
    pub final_top1: f64,
    pub checkpoint: Option<PathBuf>,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";

/// Names updated by the optimizer under `cfg`.
pub fn trained_names(store: &ParameterStore, cfg: &ModelConfig) -> Vec<String> {
    store
        .tunable_names()
        .into_iter()
        .filter(|n| !(cfg.prompt_depth == PromptDepth::Disabled && store.tag(n).ok() == Some(Tag::Prompt)))
        .collect()
}

/// Trains the tunable partition of `store` on `data`.
///
/// With `out_dir`, the checkpoint and metric log are rewritten after every
/// epoch; a non-finite loss aborts the run and leaves the previous epoch's
/// files in place.
pub fn train(
    mut store: ParameterStore,
    cfg: &ModelConfig,
    data: &Dataset,
    prompts: &[Vec<u32>],
    tcfg: &TrainConfig,
    echo: &str,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    tcfg.validate()?;
    if data.is_empty() {
        return Err(Error::Invalid("empty training set".into()));
    }
    store = store.to_precision(tcfg.precision);
    let names = trained_names(&store, cfg);
    let mut state = OptimizerState::new(&store, &names)?;
    let w = tcfg.weights();
    let per_epoch = data.len().div_ceil(tcfg.batch_size);
    let total = per_epoch * tcfg.epochs;
    let mut log = MetricLog {
        header: echo.to_string(),
        records: Vec::new(),
    };
    let started = Instant::now();
    let mut global = 0;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut last_checkpoint = None;

    for epoch in 1..=tcfg.epochs {
        order.shuffle(&mut rng(derive_seed(tcfg.seed, epoch as u64)));
        let mut loss_sum = 0.0;
        let mut correct = 0;
        let mut lr = 0.0;
        for chunk in order.chunks(tcfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|i| &data.samples[*i]).collect();
            let result = batch_gradients(&store, cfg, &batch, prompts, w, tcfg.precision).map_err(|e| match e {
                Error::NonFinite { op } => Error::Aborted {
                    epoch,
                    reason: format!("non-finite value in {op}"),
                },
                other => other,
            })?;
            if !result.loss.is_finite() {
                return Err(Error::Aborted {
                    epoch,
                    reason: "non-finite loss".into(),
                });
            }
            loss_sum += result.loss * batch.len() as f64;
            correct += result.correct;
            lr = lr_at(global, total, tcfg)?;
            let grads: BTreeMap<String, Array> = result
                .grads
                .into_iter()
                .filter(|(k, _)| names.contains(k))
                .collect();
            step(&mut store, &grads, &mut state, lr, tcfg)?;
            global += 1;
        }
        log.records.push(EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / data.len() as f64,
            train_top1: 100.0 * correct as f64 / data.len() as f64,
            wall_seconds: started.elapsed().as_secs_f64(),
        });
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir)?;
            let path = dir.join(CHECKPOINT_FILE);
            checkpoint::save(&path, echo, &store)?;
            std::fs::write(dir.join(METRICS_FILE), log.to_csv())?;
            last_checkpoint = Some(path);
        }
    }
    let (final_loss, final_top1) = evaluate(&store, cfg, data, prompts, w, tcfg.precision)?;
    Ok(TrainOutcome {
        store,
        log,
        final_loss,
        final_top1,
        checkpoint: last_checkpoint,
    })
}
