//! The acceptance suite: every criterion runs in order and prints one
//! PASS/FAIL line; the test fails if any criterion does.
//!
//! Run with `cargo test -p clipvid-core --test acceptance -- --nocapture`.

use std::time::{Duration, Instant};

use clipvid::adapters::count_layout;
use clipvid::autodiff::Graph;
use clipvid::checkpoint;
use clipvid::encoders::{encode_frames, encode_texts, Forward};
use clipvid::evalkit::{few_shot_sample, harmonic_mean, zero_shot_eval, CategorySplit};
use clipvid::gradcheck::{gradcheck_model, GradcheckOptions};
use clipvid::losses::{contrastive_loss, cosine_similarities, motion_stats};
use clipvid::model::frame_embeddings;
use clipvid::session::Session;
use clipvid::synthdata::{generate, CategoryPromptSet, Dataset, SynthMode, SynthSpec};
use clipvid::trainer::{evaluate, train, TrainOutcome};
use clipvid::{Array, ModelConfig, ParameterStore, Precision, PromptDepth, Tag, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

/// Training budget shared by the motion experiments.
const MOTION_SEEDS: [u64; 3] = [0, 1, 2];
const MOTION_EPOCHS: usize = 25;
const MOTION_BATCH: usize = 8;
const MOTION_LR: f64 = 1e-2;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn approx(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn c1_prompt_count() -> Outcome {
    let b = count_layout(&ModelConfig::vit_b16()).map_err(|e| e.to_string())?;
    ensure(b.prompts == 73_728, format!("prompt elements = {}", b.prompts))
}

fn c2_tunable_total() -> Outcome {
    let b = count_layout(&ModelConfig::vit_b16()).map_err(|e| e.to_string())?;
    let ok = (4_680_000..=5_720_000).contains(&b.total_tunable);
    ensure(ok, format!("total tunable = {} (allowed 4.68M..5.72M)", b.total_tunable))
}

fn c3_gradcheck() -> Outcome {
    let cfg = ModelConfig::toy();
    let mut worst = 0.0f64;
    for seed in 0..5 {
        let report = gradcheck_model(&cfg, seed, &GradcheckOptions::default()).map_err(|e| e.to_string())?;
        for row in &report.rows {
            worst = worst.max(row.max_rel_error);
        }
        if !report.passed() {
            return Err(format!("seed {seed} failing tags {:?}\n{report}", report.failing()));
        }
        let tags: Vec<Tag> = report.rows.iter().map(|r| r.tag).collect();
        if Tag::TUNABLE.iter().any(|t| !tags.contains(t)) {
            return Err(format!("seed {seed} did not check every tunable tag: {tags:?}"));
        }
    }
    Ok(format!("5 seeds, all tags, max rel err {worst:.2e}"))
}

fn motion_data(cfg: &ModelConfig) -> (Dataset, Vec<Vec<u32>>) {
    let spec = SynthSpec {
        mode: SynthMode::MotionOnly,
        categories: 4,
        samples_per_category: 200,
        ..SynthSpec::default()
    };
    (generate(&spec, cfg).unwrap(), CategoryPromptSet::synthetic(&spec, cfg.ctx).tokens())
}

fn c4_frozen_invariance() -> Outcome {
    let cfg = ModelConfig::toy();
    let spec = SynthSpec {
        mode: SynthMode::Mixed,
        categories: 4,
        samples_per_category: 25,
        ..SynthSpec::default()
    };
    let data = generate(&spec, &cfg).map_err(|e| e.to_string())?;
    let prompts = CategoryPromptSet::synthetic(&spec, cfg.ctx).tokens();
    let tc = TrainConfig {
        epochs: 4,
        batch_size: 4,
        base_lr: 1e-2,
        ..TrainConfig::default()
    };
    let steps = tc.epochs * data.len().div_ceil(tc.batch_size);
    let store = ParameterStore::init(&cfg, 0, Precision::F32).map_err(|e| e.to_string())?;
    let before = store.frozen_hash();
    let out = train(store.clone(), &cfg, &data, &prompts, &tc, "", None).map_err(|e| e.to_string())?;
    let after = out.store.frozen_hash();
    let moved = out.store != store;
    ensure(
        before == after && moved && steps == 100,
        format!("{steps} steps, frozen hash {} -> {}, tunable moved: {moved}", &before[..12], &after[..12]),
    )
}

fn softmax_ce(row: &[f64], label: usize, tau: f64) -> f64 {
    let z: Vec<f64> = row.iter().map(|s| s / tau).collect();
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - z[label]
}

fn cosine_ref(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn c5_loss_oracles() -> Outcome {
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (b, k, d) = (r.random_range(1..6), r.random_range(2..7), r.random_range(2..9));
        let v: Vec<Vec<f64>> = (0..b).map(|_| (0..d).map(|_| r.random_range(-2.0..2.0)).collect()).collect();
        let y: Vec<Vec<f64>> = (0..k).map(|_| (0..d).map(|_| r.random_range(-2.0..2.0)).collect()).collect();
        let labels: Vec<usize> = (0..b).map(|_| r.random_range(0..k)).collect();
        let tau = 0.07;
        let mut g = Graph::new(Precision::F64);
        let vv = g.constant(Array::from_rows(&v).unwrap()).map_err(|e| e.to_string())?;
        let yv = g.constant(Array::from_rows(&y).unwrap()).map_err(|e| e.to_string())?;
        let s = cosine_similarities(&mut g, vv, yv).map_err(|e| e.to_string())?;
        let l = contrastive_loss(&mut g, s, &labels, tau).map_err(|e| e.to_string())?;
        let oracle = (0..b)
            .map(|i| {
                let row: Vec<f64> = y.iter().map(|yk| cosine_ref(&v[i], yk)).collect();
                softmax_ce(&row, labels[i], tau)
            })
            .sum::<f64>()
            / b as f64;
        worst = worst.max((g.scalar_value(l) - oracle).abs());
    }
    let col = |xs: &[f64]| Array::new(vec![xs.len(), 1], xs.to_vec()).unwrap();
    let a = motion_stats(&col(&[0.0, 1.0, 0.0, 1.0])).map_err(|e| e.to_string())?.loss;
    let b = motion_stats(&col(&[0.0, 1.0, 2.0, 3.0])).map_err(|e| e.to_string())?.loss;
    let same = motion_stats(&Array::from_rows(&vec![vec![0.3, -1.1, 2.0]; 5]).unwrap())
        .map_err(|e| e.to_string())?
        .loss;
    ensure(
        worst <= 1e-6 && approx(a, 0.8, 1e-9) && approx(b, 1.0 / 2.75, 1e-9) && same == 1.0,
        format!("contrastive max |diff| {worst:.1e}; L_m {a:.12}, {b:.12}; identical frames {same}"),
    )
}

fn motion_run(prompts_on: bool, lambda2: f64, seed: u64) -> Result<TrainOutcome, String> {
    let mut cfg = ModelConfig::toy();
    if !prompts_on {
        cfg.prompt_depth = PromptDepth::Disabled;
    }
    let (data, prompts) = motion_data(&cfg);
    let tc = TrainConfig {
        epochs: MOTION_EPOCHS,
        batch_size: MOTION_BATCH,
        base_lr: MOTION_LR,
        lambda2,
        seed,
        ..TrainConfig::default()
    };
    let store = ParameterStore::init(&cfg, seed, Precision::F32).map_err(|e| e.to_string())?;
    train(store, &cfg, &data, &prompts, &tc, "", None).map_err(|e| e.to_string())
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn c6_motion_separation(trained: &mut Vec<ParameterStore>) -> Outcome {
    let started = Instant::now();
    let mut off = Vec::new();
    let mut on = Vec::new();
    for seed in MOTION_SEEDS {
        off.push(motion_run(false, 1.0, seed)?.final_top1);
        let run = motion_run(true, 1.0, seed)?;
        on.push(run.final_top1);
        trained.push(run.store);
    }
    let elapsed = started.elapsed();
    let (a, b) = (mean(&off), mean(&on));
    ensure(
        a <= 40.0 && b >= 90.0 && elapsed <= Duration::from_secs(600),
        format!(
            "(a) prompts off {a:.2}% {off:?} <= 40; (b) prompts + motion loss {b:.2}% {on:?} >= 90; {:.0} s of 600",
            elapsed.as_secs_f64()
        ),
    )
}

fn mean_frame_variance(store: &ParameterStore) -> Result<f64, String> {
    let cfg = ModelConfig::toy();
    let (data, _) = motion_data(&cfg);
    let mut per_video = Vec::with_capacity(data.len());
    for s in &data.samples {
        let frames = frame_embeddings(store, &cfg, &s.video, Precision::F32).map_err(|e| e.to_string())?;
        per_video.push(mean(&motion_stats(&frames).map_err(|e| e.to_string())?.variance));
    }
    Ok(mean(&per_video))
}

fn c7_motion_loss_spread(with_motion: &[ParameterStore]) -> Outcome {
    if with_motion.len() != MOTION_SEEDS.len() {
        return Err("motion-separation runs unavailable".into());
    }
    let mut with = Vec::new();
    let mut without = Vec::new();
    for (seed, store) in MOTION_SEEDS.iter().zip(with_motion) {
        with.push(mean_frame_variance(store)?);
        without.push(mean_frame_variance(&motion_run(true, 0.0, *seed)?.store)?);
    }
    let (a, b) = (mean(&with), mean(&without));
    ensure(
        a > b,
        format!("mean frame variance λ2=1: {a:.4e}; λ2=0: {b:.4e}"),
    )
}

fn c8_harmonic_mean() -> Outcome {
    let rows = [(76.4, 61.1, 67.9), (83.7, 62.5, 71.5)];
    let mut details = Vec::new();
    let mut ok = true;
    for (a, b, expect) in rows {
        let h = harmonic_mean(a, b).map_err(|e| e.to_string())?;
        let pass = approx(h, expect, 0.05);
        ok &= pass;
        details.push(format!("HM({a}, {b}) = {h:.4} vs {expect} ± 0.05 {}", if pass { "ok" } else { "MISS" }));
    }
    ensure(ok, details.join("; "))
}

fn c9_identity_start() -> Outcome {
    let cfg = ModelConfig {
        prompt_depth: PromptDepth::Disabled,
        ..ModelConfig::toy()
    };
    let mut store = ParameterStore::init(&cfg, 7, Precision::F32).map_err(|e| e.to_string())?;
    store.zero_tag(Tag::Prompt);
    let spec = SynthSpec {
        samples_per_category: 2,
        ..SynthSpec::default()
    };
    let data = generate(&spec, &cfg).map_err(|e| e.to_string())?;
    let prompts = CategoryPromptSet::synthetic(&spec, cfg.ctx).tokens();
    for sample in &data.samples {
        let mut s = Session::inference(&store, Precision::F32);
        let full = encode_frames(&mut s, &sample.video, &cfg, Forward::model(&cfg)).map_err(|e| e.to_string())?;
        let frozen = encode_frames(&mut s, &sample.video, &cfg, Forward::frozen_backbone()).map_err(|e| e.to_string())?;
        if s.value(full) != s.value(frozen) {
            return Err("video tower differs from the frozen backbone".into());
        }
    }
    let mut s = Session::inference(&store, Precision::F32);
    let full = encode_texts(&mut s, &prompts, &cfg, Forward::model(&cfg)).map_err(|e| e.to_string())?;
    let frozen = encode_texts(&mut s, &prompts, &cfg, Forward::frozen_backbone()).map_err(|e| e.to_string())?;
    ensure(
        s.value(full) == s.value(frozen),
        format!("{} videos and {} prompts bit-identical at 32-bit", data.len(), prompts.len()),
    )
}

fn c10_checkpoint_round_trip() -> Outcome {
    let cfg = ModelConfig::toy();
    let spec = SynthSpec {
        mode: SynthMode::Mixed,
        categories: 3,
        samples_per_category: 8,
        ..SynthSpec::default()
    };
    let data = generate(&spec, &cfg).map_err(|e| e.to_string())?;
    let prompts = CategoryPromptSet::synthetic(&spec, cfg.ctx).tokens();
    let tc = TrainConfig {
        epochs: 2,
        batch_size: 8,
        base_lr: 1e-2,
        ..TrainConfig::default()
    };
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let echo = clipvid::config::comment_block("acceptance checkpoint run");
    let store = ParameterStore::init(&cfg, 4, Precision::F32).map_err(|e| e.to_string())?;
    let out = train(store, &cfg, &data, &prompts, &tc, &echo, Some(dir.path())).map_err(|e| e.to_string())?;
    let path = out.checkpoint.ok_or("no checkpoint written")?;
    let first = std::fs::read(&path).map_err(|e| e.to_string())?;
    let (echo2, loaded) = checkpoint::load(&path).map_err(|e| e.to_string())?;
    let again = dir.path().join("again.ckpt");
    checkpoint::save(&again, &echo2, &loaded).map_err(|e| e.to_string())?;
    let second = std::fs::read(&again).map_err(|e| e.to_string())?;
    let (loss, top1) = evaluate(&loaded, &cfg, &data, &prompts, tc.weights(), tc.precision).map_err(|e| e.to_string())?;
    ensure(
        first == second && loss == out.final_loss && top1 == out.final_top1,
        format!(
            "{} bytes identical: {}; reloaded loss {loss} vs {}, top-1 {top1} vs {}",
            first.len(),
            first == second,
            out.final_loss,
            out.final_top1
        ),
    )
}

fn c11_protocol_invariants() -> Outcome {
    let all: Vec<u32> = (0..8).collect();
    let split = CategorySplit::even_odd(&all).map_err(|e| e.to_string())?;
    let (base, novel) = (split.base_ids(), split.novel_ids());
    let mut union: Vec<u32> = base.iter().chain(&novel).copied().collect();
    union.sort_unstable();
    let disjoint = base.iter().all(|b| !novel.contains(b));
    let overlap_rejected = CategorySplit::new(&[0, 1], &[1, 2], &[0, 1, 2]).is_err();
    let gap_rejected = CategorySplit::new(&[0], &[2], &[0, 1, 2]).is_err();

    let cfg = ModelConfig::toy();
    let spec = SynthSpec {
        categories: 4,
        samples_per_category: 6,
        ..SynthSpec::default()
    };
    let data = generate(&spec, &cfg).map_err(|e| e.to_string())?;
    let a = few_shot_sample(&data, 2, 11).map_err(|e| e.to_string())?;
    let b = few_shot_sample(&data, 2, 11).map_err(|e| e.to_string())?;
    let counts_ok = (0..4).all(|l| a.samples.iter().filter(|s| s.label == l).count() == 2);

    let store = ParameterStore::init(&cfg, 0, Precision::F32).map_err(|e| e.to_string())?;
    let prompts = CategoryPromptSet::synthetic(&spec, cfg.ctx);
    let clash = zero_shot_eval(&store, &cfg, &[data.category_ids[2]], &data, &prompts, Precision::F32);
    let disjoint_ok = zero_shot_eval(&store, &cfg, &[6, 7], &data, &prompts, Precision::F32).is_ok();
    ensure(
        union == all && disjoint && overlap_rejected && gap_rejected && a == b && counts_ok && clash.is_err() && disjoint_ok,
        format!(
            "split covers/disjoint {}/{disjoint}, bad splits rejected {}; few-shot deterministic {} counts {counts_ok}; overlapping source rejected {}",
            union == all,
            overlap_rejected && gap_rejected,
            a == b,
            clash.is_err()
        ),
    )
}

#[test]
fn acceptance() {
    let mut trained = Vec::new();
    let mut failures = Vec::new();
    let mut run = |n: usize, name: &str, limit: Duration, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let result = f();
        let took = t.elapsed();
        let (ok, detail) = match result {
            Ok(d) if took <= limit => (true, d),
            Ok(d) => (false, format!("{d}; over the {} s limit", limit.as_secs_f64())),
            Err(d) => (false, d),
        };
        println!(
            "{} #{n:<2} {name}: {detail} [{:.2} s]",
            if ok { "PASS" } else { "FAIL" },
            took.as_secs_f64()
        );
        if !ok {
            failures.push(n);
        }
    };
    let secs = Duration::from_secs;
    run(1, "prompt parameter count", secs(1), &mut c1_prompt_count);
    run(2, "tunable total", secs(1), &mut c2_tunable_total);
    run(3, "gradient certification", secs(60), &mut c3_gradcheck);
    run(4, "frozen invariance", secs(120), &mut c4_frozen_invariance);
    run(5, "loss oracles", secs(10), &mut c5_loss_oracles);
    run(6, "motion separation", secs(600), &mut || c6_motion_separation(&mut trained));
    run(7, "motion loss spread", secs(600), &mut || c7_motion_loss_spread(&trained));
    run(8, "harmonic mean arithmetic", secs(1), &mut c8_harmonic_mean);
    run(9, "identity start", secs(10), &mut c9_identity_start);
    run(10, "checkpoint round trip", secs(30), &mut c10_checkpoint_round_trip);
    run(11, "protocol invariants", secs(10), &mut c11_protocol_invariants);
    assert!(failures.is_empty(), "failing criteria: {failures:?}");
}
