use clipvid::encoders::{block_forward, encode_frames, encode_text, tokenize, Forward};
use clipvid::evalkit::zero_shot_eval;
use clipvid::session::Session;
use clipvid::synthdata::{generate, CategoryPromptSet, Dataset, SynthSpec};
use clipvid::{Array, ModelConfig, ParameterStore, Precision, PromptDepth, Tag};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const PROMPTS: &str = "prompts.temporal";

fn store(cfg: &ModelConfig, seed: u64) -> ParameterStore {
    let mut st = ParameterStore::init(cfg, seed, Precision::F64).unwrap();
    st.randomize_tag(Tag::Prompt, 0.5, seed + 1);
    st.randomize_tag(Tag::VisualAdapter, 0.3, seed + 2);
    st
}

fn random_video(cfg: &ModelConfig, seed: u64) -> Array {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.frames * cfg.height * cfg.width * cfg.channels;
    Array::new(
        vec![cfg.frames, cfg.height, cfg.width, cfg.channels],
        (0..n).map(|_| r.random_range(0.0..1.0)).collect(),
    )
    .unwrap()
}

fn frame_len(cfg: &ModelConfig) -> usize {
    cfg.height * cfg.width * cfg.channels
}

fn embed(st: &ParameterStore, cfg: &ModelConfig, video: &Array) -> Array {
    let mut s = Session::new(st, Precision::F64);
    let e = encode_frames(&mut s, video, cfg, Forward::model(cfg)).unwrap();
    s.value(e).clone()
}

fn permute_frames(cfg: &ModelConfig, video: &Array, perm: &[usize]) -> Array {
    let f = frame_len(cfg);
    let mut data = Vec::with_capacity(video.len());
    for &src in perm {
        data.extend_from_slice(&video.data()[src * f..(src + 1) * f]);
    }
    Array::new(video.shape().to_vec(), data).unwrap()
}

fn permute_prompts(cfg: &ModelConfig, st: &mut ParameterStore, perm: &[usize]) {
    let bank = st.get(PROMPTS).unwrap().clone();
    let d = cfg.d_visual;
    let mut data = bank.data().to_vec();
    for l in 0..cfg.layers {
        for (t, &src) in perm.iter().enumerate() {
            let dst = (l * cfg.frames + t) * d;
            let from = (l * cfg.frames + src) * d;
            data[dst..dst + d].copy_from_slice(&bank.data()[from..from + d]);
        }
    }
    st.set(PROMPTS, Array::new(bank.shape().to_vec(), data).unwrap()).unwrap();
}

#[test]
fn joint_frame_and_prompt_permutation_is_equivariant() {
    let cfg = ModelConfig::toy();
    for seed in 0..3 {
        let mut st = store(&cfg, seed);
        let video = random_video(&cfg, seed + 10);
        let base = embed(&st, &cfg, &video);
        let perm = [2, 0, 3, 1];
        permute_prompts(&cfg, &mut st, &perm);
        let moved = embed(&st, &cfg, &permute_frames(&cfg, &video, &perm));
        for (t, &src) in perm.iter().enumerate() {
            for (a, b) in moved.row_slice(t).iter().zip(base.row_slice(src)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn prompts_carry_information_across_frames() {
    let cfg = ModelConfig::toy();
    let st = store(&cfg, 3);
    let video = random_video(&cfg, 4);
    let mut changed = video.clone();
    let f = frame_len(&cfg);
    changed.data_mut()[3 * f..4 * f].iter_mut().for_each(|v| *v = 1.0 - *v);
    let a = embed(&st, &cfg, &video);
    let b = embed(&st, &cfg, &changed);
    assert!(a.row_slice(0).iter().zip(b.row_slice(0)).any(|(x, y)| (x - y).abs() > 1e-9));
}

#[test]
fn without_prompts_frames_are_independent() {
    let cfg = ModelConfig {
        prompt_depth: PromptDepth::Disabled,
        ..ModelConfig::toy()
    };
    let st = store(&cfg, 3);
    let video = random_video(&cfg, 4);
    let mut changed = video.clone();
    let f = frame_len(&cfg);
    changed.data_mut()[3 * f..4 * f].iter_mut().for_each(|v| *v = 1.0 - *v);
    let a = embed(&st, &cfg, &video);
    let b = embed(&st, &cfg, &changed);
    for t in 0..3 {
        assert_eq!(a.row_slice(t), b.row_slice(t));
    }
    assert_ne!(a.row_slice(3), b.row_slice(3));
}

#[test]
fn identical_frames_with_equal_prompts_embed_identically() {
    let cfg = ModelConfig::toy();
    let mut st = store(&cfg, 5);
    let mut video = random_video(&cfg, 6);
    let f = frame_len(&cfg);
    let first = video.data()[..f].to_vec();
    video.data_mut()[2 * f..3 * f].copy_from_slice(&first);
    permute_prompts(&cfg, &mut st, &[0, 1, 0, 3]);
    let e = embed(&st, &cfg, &video);
    assert_eq!(e.row_slice(0), e.row_slice(2));
    assert_ne!(e.row_slice(0), e.row_slice(1));
}

#[test]
fn block_drops_the_prompt_row() {
    let cfg = ModelConfig::toy();
    let st = store(&cfg, 1);
    let n = cfg.num_patches();
    let mut s = Session::new(&st, Precision::F64);
    let x = s.input(Array::full(vec![n + 2, cfg.d_visual], 0.1)).unwrap();
    let y = block_forward(&mut s, x, 0, &cfg, true).unwrap();
    assert_eq!(s.shape(y), &[n + 1, cfg.d_visual]);
}

#[test]
fn residual_identity_when_value_paths_are_zero() {
    let cfg = ModelConfig::toy();
    let mut st = ParameterStore::init(&cfg, 2, Precision::F64).unwrap();
    for leaf in ["attn.o.weight", "attn.o.bias", "mlp.fc2.weight", "mlp.fc2.bias"] {
        let name = format!("visual.layers.1.{leaf}");
        let shape = st.get(&name).unwrap().shape().to_vec();
        st.set(&name, Array::zeros(shape)).unwrap();
    }
    let mut r = ChaCha8Rng::seed_from_u64(8);
    let n = cfg.num_patches() + 1;
    let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..cfg.d_visual).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
    let mut s = Session::new(&st, Precision::F64);
    let x = s.input(Array::from_rows(&rows).unwrap()).unwrap();
    let y = block_forward(&mut s, x, 1, &cfg, true).unwrap();
    assert_eq!(s.value(y), s.value(x));
}

#[test]
fn identity_text_adapters_leave_text_tower_unchanged() {
    let cfg = ModelConfig::toy();
    let st = ParameterStore::init(&cfg, 9, Precision::F32).unwrap();
    for text in ["moving up", "a still red square", ""] {
        let toks = tokenize(text, cfg.ctx);
        let mut s = Session::new(&st, Precision::F32);
        let a = encode_text(&mut s, &toks, &cfg, Forward::model(&cfg)).unwrap();
        let b = encode_text(&mut s, &toks, &cfg, Forward::frozen_backbone()).unwrap();
        assert_eq!(s.value(a), s.value(b));
    }
}

fn motion_set(per_category: usize) -> (ModelConfig, SynthSpec, Dataset, CategoryPromptSet) {
    let cfg = ModelConfig::toy();
    let spec = SynthSpec {
        samples_per_category: per_category,
        seed: 5,
        ..SynthSpec::default()
    };
    let data = generate(&spec, &cfg).unwrap();
    let prompts = CategoryPromptSet::synthetic(&spec, cfg.ctx);
    (cfg, spec, data, prompts)
}

#[test]
fn untrained_zero_shot_is_at_chance() {
    let (cfg, spec, data, prompts) = motion_set(125);
    let st = ParameterStore::init(&cfg, 0, Precision::F32).unwrap();
    let report = zero_shot_eval(&st, &cfg, &[], &data, &prompts, Precision::F32).unwrap();
    let k = spec.categories as f64;
    let n = data.len() as f64;
    let p = 1.0 / k;
    let sigma = 100.0 * (p * (1.0 - p) / n).sqrt();
    let acc = report.splits[0].top1;
    assert_eq!(data.len(), 500);
    assert!((acc - 100.0 * p).abs() <= 5.0 * sigma, "accuracy {acc} vs chance {} ± {}", 100.0 * p, 5.0 * sigma);
}

#[test]
fn zero_shot_ignores_label_order() {
    let (cfg, _, data, prompts) = motion_set(10);
    let mut st = ParameterStore::init(&cfg, 1, Precision::F32).unwrap();
    st.randomize_tag(Tag::TextAdapter, 0.3, 4);
    let a = zero_shot_eval(&st, &cfg, &[], &data, &prompts, Precision::F32).unwrap();

    let order = [2usize, 0, 3, 1];
    let ids: Vec<u32> = order.iter().map(|i| data.category_ids[*i]).collect();
    let permuted = data.restrict(&ids).unwrap();
    let b = zero_shot_eval(&st, &cfg, &[], &permuted, &prompts, Precision::F32).unwrap();
    assert_eq!(a.splits[0].top1, b.splits[0].top1);
}

#[test]
fn zero_shot_rejects_overlapping_source() {
    let (cfg, _, data, prompts) = motion_set(2);
    let st = ParameterStore::init(&cfg, 1, Precision::F32).unwrap();
    let err = zero_shot_eval(&st, &cfg, &[7, data.category_ids[1]], &data, &prompts, Precision::F32).unwrap_err();
    assert!(err.to_string().contains(&data.category_ids[1].to_string()));
}
