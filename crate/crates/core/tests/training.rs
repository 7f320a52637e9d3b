use clipvid::checkpoint;
use clipvid::config::comment_block;
use clipvid::synthdata::{generate, CategoryPromptSet, Dataset, SynthMode, SynthSpec};
use clipvid::trainer::{train, CHECKPOINT_FILE, METRICS_FILE};
use clipvid::{Error, ModelConfig, ParameterStore, Precision, PromptDepth, TrainConfig};

fn dataset(mode: SynthMode, categories: usize, per: usize, cfg: &ModelConfig) -> (Dataset, Vec<Vec<u32>>) {
    let spec = SynthSpec {
        mode,
        categories,
        samples_per_category: per,
        ..SynthSpec::default()
    };
    let data = generate(&spec, cfg).unwrap();
    (data, CategoryPromptSet::synthetic(&spec, cfg.ctx).tokens())
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 8,
        base_lr: 1e-2,
        ..TrainConfig::default()
    }
}

#[test]
fn fixed_seed_gives_identical_logs() {
    let cfg = ModelConfig::toy();
    let (data, prompts) = dataset(SynthMode::Mixed, 2, 8, &cfg);
    let run = || {
        let st = ParameterStore::init(&cfg, 3, Precision::F32).unwrap();
        train(st, &cfg, &data, &prompts, &quick(2), "", None).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.log.deterministic_part(), b.log.deterministic_part());
    assert_eq!(a.store, b.store);
    assert_eq!(a.final_loss, b.final_loss);
}

#[test]
fn echo_heads_the_metric_log() {
    let cfg = ModelConfig::toy();
    let (data, prompts) = dataset(SynthMode::Mixed, 2, 4, &cfg);
    let echo = comment_block("[trainer]\nepochs = 1\n");
    let dir = tempfile::tempdir().unwrap();
    let st = ParameterStore::init(&cfg, 0, Precision::F32).unwrap();
    train(st, &cfg, &data, &prompts, &quick(1), &echo, Some(dir.path())).unwrap();
    let csv = std::fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
    assert!(csv.starts_with(&echo));
    assert_eq!(csv.lines().filter(|l| !l.starts_with('#')).count(), 2);
    let (ckpt_echo, _) = checkpoint::load(&dir.path().join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(ckpt_echo, echo);
}

#[test]
fn separable_set_is_learned_with_contrastive_loss_only() {
    let cfg = ModelConfig::toy();
    let (data, prompts) = dataset(SynthMode::AppearanceOnly, 2, 20, &cfg);
    let tc = TrainConfig {
        lambda2: 0.0,
        ..quick(8)
    };
    let st = ParameterStore::init(&cfg, 0, Precision::F32).unwrap();
    let out = train(st, &cfg, &data, &prompts, &tc, "", None).unwrap();
    assert_eq!(out.final_top1, 100.0);
}

#[test]
fn appearance_is_learnable_without_prompts() {
    let cfg = ModelConfig {
        prompt_depth: PromptDepth::Disabled,
        ..ModelConfig::toy()
    };
    let (data, prompts) = dataset(SynthMode::AppearanceOnly, 4, 25, &cfg);
    let st = ParameterStore::init(&cfg, 1, Precision::F32).unwrap();
    let out = train(st, &cfg, &data, &prompts, &quick(8), "", None).unwrap();
    assert!(out.final_top1 > 90.0, "top-1 {}", out.final_top1);
}

#[test]
fn divergence_aborts_and_keeps_last_checkpoint() {
    let cfg = ModelConfig::toy();
    let (data, prompts) = dataset(SynthMode::Mixed, 2, 2, &cfg);
    let tc = TrainConfig {
        epochs: 3,
        batch_size: 4,
        base_lr: 1e30,
        weight_decay: 0.0,
        ..TrainConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let st = ParameterStore::init(&cfg, 0, Precision::F32).unwrap();
    let err = train(st, &cfg, &data, &prompts, &tc, "", Some(dir.path())).unwrap_err();
    let Error::Aborted { epoch, .. } = err else {
        panic!("expected an abort, got {err}");
    };
    let (_, kept) = checkpoint::load(&dir.path().join(CHECKPOINT_FILE)).unwrap();
    assert!(kept.iter().all(|(_, e)| e.value.is_finite()));
    let csv = std::fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
    assert_eq!(csv.lines().filter(|l| !l.starts_with('#')).count(), epoch);
}

#[test]
fn frozen_partition_is_untouched() {
    let cfg = ModelConfig::toy();
    let (data, prompts) = dataset(SynthMode::Mixed, 2, 8, &cfg);
    let st = ParameterStore::init(&cfg, 2, Precision::F32).unwrap();
    let before = st.frozen_hash();
    let out = train(st.clone(), &cfg, &data, &prompts, &quick(2), "", None).unwrap();
    assert_eq!(out.store.frozen_hash(), before);
    assert_ne!(out.store, st);
}
