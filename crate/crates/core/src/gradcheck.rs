//! Central-difference gradient oracle and whole-model gradient certification.
//!
//! The oracle only ever evaluates the loss; it never touches the tape.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::index::sample;

use crate::config::{ModelConfig, PromptDepth};
use crate::encoders::tokenize;
use crate::error::{Error, Result};
use crate::params::{derive_seed, rng, ParameterStore, Tag};
use crate::synthdata::{generate, SynthMode, SynthSpec};
use crate::tensor::{Array, Precision};
use crate::trainer::{batch_gradients, batch_loss};
use crate::losses::LossWeights;

pub const H_MIN: f64 = 1e-6;
pub const H_MAX: f64 = 1e-3;
pub const DEFAULT_H: f64 = 1e-4;
/// Gradients below this magnitude are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-4;

/// Named parameters whose coordinates the oracle can nudge.
pub trait Perturbable {
    fn coordinate_count(&self, name: &str) -> Result<usize>;
    fn coordinate(&self, name: &str, i: usize) -> Result<f64>;
    fn set_coordinate(&mut self, name: &str, i: usize, v: f64) -> Result<()>;
    fn all_f64(&self) -> bool;
}

impl Perturbable for ParameterStore {
    fn coordinate_count(&self, name: &str) -> Result<usize> {
        Ok(self.get(name)?.len())
    }

    fn coordinate(&self, name: &str, i: usize) -> Result<f64> {
        self.get(name)?
            .data()
            .get(i)
            .copied()
            .ok_or_else(|| Error::Invalid(format!("coordinate {i} out of range for `{name}`")))
    }

    fn set_coordinate(&mut self, name: &str, i: usize, v: f64) -> Result<()> {
        let a = self.get_mut(name)?;
        let slot = a
            .data_mut()
            .get_mut(i)
            .ok_or_else(|| Error::Invalid(format!("coordinate {i} out of range for `{name}`")))?;
        *slot = v;
        Ok(())
    }

    fn all_f64(&self) -> bool {
        self.iter().all(|(_, e)| e.value.precision() == Precision::F64)
    }
}

impl Perturbable for BTreeMap<String, Array> {
    fn coordinate_count(&self, name: &str) -> Result<usize> {
        self.get(name)
            .map(Array::len)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    fn coordinate(&self, name: &str, i: usize) -> Result<f64> {
        self.get(name)
            .and_then(|a| a.data().get(i).copied())
            .ok_or_else(|| Error::UnknownParam(format!("{name}[{i}]")))
    }

    fn set_coordinate(&mut self, name: &str, i: usize, v: f64) -> Result<()> {
        let slot = self
            .get_mut(name)
            .and_then(|a| a.data_mut().get_mut(i))
            .ok_or_else(|| Error::UnknownParam(format!("{name}[{i}]")))?;
        *slot = v;
        Ok(())
    }

    fn all_f64(&self) -> bool {
        self.values().all(|a| a.precision() == Precision::F64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdOptions {
    pub h: f64,
    /// Check at most this many coordinates per tensor, chosen by `seed`.
    pub max_coords: Option<usize>,
    pub seed: u64,
    /// Spend two extra evaluations per coordinate looking for kinks.
    pub detect_kinks: bool,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            h: DEFAULT_H,
            max_coords: None,
            seed: 0,
            detect_kinks: false,
        }
    }
}

/// Central-difference estimates at the checked coordinates.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FdGradient {
    pub coords: BTreeMap<String, Vec<(usize, f64)>>,
    /// Coordinates where the loss looks non-differentiable within `h`.
    pub kinks: Vec<(String, usize)>,
}

impl FdGradient {
    /// The estimate as a dense array, if every coordinate was checked.
    pub fn dense(&self, name: &str, shape: &[usize]) -> Option<Array> {
        let c = self.coords.get(name)?;
        let n: usize = shape.iter().product();
        if c.len() != n {
            return None;
        }
        let mut data = vec![0.0; n];
        for (i, v) in c {
            data[*i] = *v;
        }
        Array::new(shape.to_vec(), data).ok()
    }
}

/// Estimates `d loss / d names` by `(f(x+h) - f(x-h)) / 2h` per coordinate.
///
/// A coordinate is flagged as a kink when halving the step does not shrink
/// the second difference quadratically, the signature of a slope jump.
pub fn fd_oracle<P, F>(params: &mut P, names: &[String], mut loss: F, opts: FdOptions) -> Result<FdGradient>
where
    P: Perturbable,
    F: FnMut(&P) -> Result<f64>,
{
    if !params.all_f64() {
        return Err(Error::Invalid("finite differences require 64-bit parameters".into()));
    }
    if !(H_MIN..=H_MAX).contains(&opts.h) {
        return Err(Error::Invalid(format!("step {} outside [{H_MIN}, {H_MAX}]", opts.h)));
    }
    let h = opts.h;
    let mut eval = |p: &P, what: &str| -> Result<f64> {
        let v = loss(p)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite {
                op: if what == "center" { "fd_oracle center" } else { "fd_oracle perturbation" },
            })
        }
    };
    let center = if opts.detect_kinks { Some(eval(params, "center")?) } else { None };
    let mut out = FdGradient::default();
    for (k, name) in names.iter().enumerate() {
        let n = params.coordinate_count(name)?;
        let mut idx: Vec<usize> = match opts.max_coords {
            Some(m) if m < n => sample(&mut rng(derive_seed(opts.seed, k as u64)), n, m).into_vec(),
            _ => (0..n).collect(),
        };
        idx.sort_unstable();
        let mut est = Vec::with_capacity(idx.len());
        for i in idx {
            let x = params.coordinate(name, i)?;
            let mut at = |p: &mut P, v: f64| -> Result<f64> {
                p.set_coordinate(name, i, v)?;
                let r = eval(p, "perturbation");
                p.set_coordinate(name, i, x)?;
                r
            };
            let plus = at(params, x + h)?;
            let minus = at(params, x - h)?;
            est.push((i, (plus - minus) / (2.0 * h)));
            if let Some(f0) = center {
                let half_plus = at(params, x + h / 2.0)?;
                let half_minus = at(params, x - h / 2.0)?;
                let d_full = plus - 2.0 * f0 + minus;
                let d_half = half_plus - 2.0 * f0 + half_minus;
                let noise = 1e3 * f64::EPSILON * f0.abs().max(1.0);
                if d_full.abs() > noise && d_half.abs() > noise && (d_full / d_half) < 3.0 {
                    out.kinks.push((name.clone(), i));
                }
            }
        }
        out.coords.insert(name.clone(), est);
    }
    Ok(out)
}

/// `|a - f| / max(|a|, |f|, REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Largest relative error per tensor over the checked coordinates.
pub fn compare(analytic: &BTreeMap<String, Array>, fd: &FdGradient) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for (name, coords) in &fd.coords {
        let a = analytic
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.clone()))?;
        let worst = coords
            .iter()
            .map(|(i, f)| relative_error(a.data()[*i], *f))
            .fold(0.0, f64::max);
        out.insert(name.clone(), worst);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckOptions {
    pub h: f64,
    pub max_coords: Option<usize>,
    pub batch: usize,
    pub classes: usize,
    /// Test hook: perturb the analytic gradient of this tag before comparing.
    pub corrupt: Option<Tag>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            h: DEFAULT_H,
            max_coords: None,
            batch: 2,
            classes: 3,
            corrupt: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckRow {
    pub tag: Tag,
    pub tensors: usize,
    pub coords: usize,
    pub max_rel_error: f64,
}

impl GradcheckRow {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub seed: u64,
    pub rows: Vec<GradcheckRow>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(GradcheckRow::passed)
    }

    pub fn failing(&self) -> Vec<Tag> {
        self.rows.iter().filter(|r| !r.passed()).map(|r| r.tag).collect()
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<16}{:>8}{:>8}{:>14}  status", "tag", "tensors", "coords", "max_rel_err")?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<16}{:>8}{:>8}{:>14.3e}  {}",
                r.tag.as_str(),
                r.tensors,
                r.coords,
                r.max_rel_error,
                if r.passed() { "pass" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

/// Certifies the gradient of the training objective with respect to every
/// tunable tag at 64-bit precision.
///
/// Adapters are moved off their identity start so that both projections
/// carry signal; the prompt path is forced on.
pub fn gradcheck_model(cfg: &ModelConfig, seed: u64, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut cfg = cfg.clone();
    if cfg.prompt_depth == PromptDepth::Disabled {
        cfg.prompt_depth = PromptDepth::All;
    }
    cfg.validate()?;
    let mut store = ParameterStore::init(&cfg, seed, Precision::F64)?;
    store.randomize_tag(Tag::VisualAdapter, 0.3, derive_seed(seed, 101));
    store.randomize_tag(Tag::TextAdapter, 0.3, derive_seed(seed, 102));
    store.randomize_tag(Tag::Prompt, 0.3, derive_seed(seed, 103));

    let classes = opts.classes.clamp(2, 8);
    let spec = SynthSpec {
        mode: SynthMode::Mixed,
        first_category: 0,
        categories: classes,
        samples_per_category: opts.batch.div_ceil(classes),
        noise_std: 0.1,
        seed: derive_seed(seed, 104),
        ..SynthSpec::default()
    };
    let data = generate(&spec, &cfg)?;
    let batch: Vec<_> = data.samples.iter().take(opts.batch.max(1)).collect();
    let prompts: Vec<Vec<u32>> = (0..classes)
        .map(|k| tokenize(&format!("class {k} of {seed}"), cfg.ctx))
        .collect();
    let w = LossWeights::default();

    let mut analytic = batch_gradients(&store, &cfg, &batch, &prompts, w, Precision::F64)?.grads;
    if let Some(tag) = opts.corrupt {
        let name = store
            .names_with_tag(tag)
            .into_iter()
            .next()
            .ok_or_else(|| Error::Invalid(format!("no tensors tagged {tag}")))?;
        let g = analytic.get_mut(&name).ok_or_else(|| Error::UnknownParam(name.clone()))?;
        let v = &mut g.data_mut()[0];
        *v = *v * 1.01 + 1e-3;
    }

    let names = store.tunable_names();
    let fd_opts = FdOptions {
        h: opts.h,
        max_coords: opts.max_coords,
        seed: derive_seed(seed, 105),
        detect_kinks: false,
    };
    let fd = fd_oracle(
        &mut store,
        &names,
        |st| batch_loss(st, &cfg, &batch, &prompts, w, Precision::F64),
        fd_opts,
    )?;
    let errors = compare(&analytic, &fd)?;

    let mut rows = Vec::new();
    for tag in Tag::TUNABLE {
        let tensors: Vec<&String> = names.iter().filter(|n| store.tag(n).ok() == Some(tag)).collect();
        rows.push(GradcheckRow {
            tag,
            tensors: tensors.len(),
            coords: tensors.iter().map(|n| fd.coords[*n].len()).sum(),
            max_rel_error: tensors.iter().map(|n| errors[*n]).fold(0.0, f64::max),
        });
    }
    Ok(GradcheckReport { seed, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(name: &str, v: &[f64]) -> BTreeMap<String, Array> {
        BTreeMap::from([(name.to_string(), Array::row(v).with_precision(Precision::F64))])
    }

    #[test]
    fn square_at_three() {
        let mut p = one("x", &[3.0]);
        let fd = fd_oracle(&mut p, &["x".into()], |p| Ok(p["x"].data()[0].powi(2)), FdOptions { h: 1e-4, ..Default::default() }).unwrap();
        assert!((fd.coords["x"][0].1 - 6.0).abs() < 1e-7);
        assert_eq!(p["x"].data()[0], 3.0);
    }

    #[test]
    fn abs_at_zero_is_flagged() {
        let mut p = one("x", &[0.0, 1.0]);
        let opts = FdOptions {
            h: 1e-4,
            detect_kinks: true,
            ..Default::default()
        };
        let fd = fd_oracle(&mut p, &["x".into()], |p| Ok(p["x"].data().iter().map(|v| v.abs()).sum()), opts).unwrap();
        assert_eq!(fd.kinks, vec![("x".to_string(), 0)]);
    }

    #[test]
    fn smooth_function_has_no_kinks() {
        let mut p = one("x", &[0.3, -1.2, 1.9]);
        let opts = FdOptions {
            h: 1e-3,
            detect_kinks: true,
            ..Default::default()
        };
        let fd = fd_oracle(&mut p, &["x".into()], |p| Ok(p["x"].data().iter().map(|v| v.sin() * v.exp()).sum()), opts).unwrap();
        assert!(fd.kinks.is_empty());
    }

    #[test]
    fn rejects_bad_step_and_precision() {
        let mut p = one("x", &[1.0]);
        assert!(fd_oracle(&mut p, &["x".into()], |_| Ok(0.0), FdOptions { h: 1e-2, ..Default::default() }).is_err());
        assert!(fd_oracle(&mut p, &["x".into()], |_| Ok(0.0), FdOptions { h: 1e-8, ..Default::default() }).is_err());
        let mut q = BTreeMap::from([("x".to_string(), Array::row(&[1.0]).with_precision(Precision::F32))]);
        assert!(fd_oracle(&mut q, &["x".into()], |_| Ok(0.0), FdOptions::default()).is_err());
    }

    #[test]
    fn rejects_non_finite_evaluation() {
        let mut p = one("x", &[0.0]);
        let r = fd_oracle(&mut p, &["x".into()], |p| Ok(1.0 / (p["x"].data()[0] - DEFAULT_H)), FdOptions::default());
        assert!(matches!(r, Err(Error::NonFinite { .. })));
    }

    #[test]
    fn subsampling_is_deterministic() {
        let mut p = one("x", &[0.0; 10]);
        let opts = FdOptions {
            max_coords: Some(3),
            seed: 9,
            ..Default::default()
        };
        let a = fd_oracle(&mut p, &["x".into()], |_| Ok(1.0), opts).unwrap();
        let b = fd_oracle(&mut p, &["x".into()], |_| Ok(1.0), opts).unwrap();
        assert_eq!(a.coords["x"].len(), 3);
        assert_eq!(a, b);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((relative_error(1e-9, 0.0) - 1e-3).abs() < 1e-15);
    }
}
