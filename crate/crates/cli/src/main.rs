use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};

use clipvid::adapters::count_layout;
use clipvid::checkpoint;
use clipvid::evalkit::{base_to_novel_eval, few_shot_sample, zero_shot_eval, CategorySplit, EvalReport};
use clipvid::gradcheck::{gradcheck_model, GradcheckOptions};
use clipvid::losses::motion_stats;
use clipvid::model::frame_embeddings;
use clipvid::synthdata::{generate, load_descriptions, CategoryPromptSet, Dataset, SynthSpec};
use clipvid::trainer::{self, train};
use clipvid::{ModelConfig, ParameterStore, Protocol, RunConfig, Tag};

#[derive(Parser)]
#[command(name = "clipvid", version, about = "Temporal prompts and adapters on a frozen video-text encoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Dotted override, e.g. `trainer.epochs=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Toy,
    VitB16,
}

#[derive(Subcommand)]
enum Command {
    /// Train the tunable parameters on synthetic data.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Overrides `trainer.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Tab-separated category descriptions replacing the synthetic prompts.
        #[arg(long, value_name = "PATH")]
        descriptions: Option<PathBuf>,
    },
    /// Evaluate a checkpoint under one of the protocols.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// zero-shot, base-to-novel or few-shot; defaults to `eval.protocol`.
        #[arg(long)]
        protocol: Option<Protocol>,
        /// Shots per category (few-shot).
        #[arg(long)]
        k: Option<usize>,
        /// Overrides `eval.seed`.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        descriptions: Option<PathBuf>,
    },
    /// Print the tunable/frozen parameter breakdown.
    CountParams {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Start from a built-in model preset instead of the configured model.
        #[arg(long, value_enum)]
        preset: Option<Preset>,
    },
    /// Certify analytic gradients against central differences at 64-bit.
    GradCheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of consecutive seeds to check, starting at `--seed`.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        /// Check at most this many coordinates per tensor.
        #[arg(long)]
        max_coords: Option<usize>,
        /// Negative control: corrupt the analytic gradient of this tag.
        #[arg(long, hide = true)]
        corrupt: Option<Tag>,
    },
    /// Write per-frame embeddings of a dataset as CSV.
    ExportEmbeddings {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Dataset container; generated from the checkpoint's data section when omitted.
        #[arg(long, value_name = "PATH")]
        dataset: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
    },
    /// Write the configured synthetic dataset as a container file.
    GenerateData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
    },
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    let text = match &args.config {
        Some(p) => std::fs::read_to_string(p).with_context(|| format!("cannot read config file {}", p.display()))?,
        None => String::new(),
    };
    let what = args
        .config
        .as_ref()
        .map(|p| p.display().to_string())
        .unwrap_or_else(|| "default configuration".into());
    RunConfig::from_toml_with_overrides(&text, &args.set).with_context(|| format!("invalid configuration in {what}"))
}

fn with_seed(mut cfg: RunConfig, key: &str, seed: Option<u64>) -> Result<RunConfig> {
    if let Some(s) = seed {
        cfg = RunConfig::from_toml_with_overrides(&cfg.to_toml(), &[format!("{key}={s}")])?;
    }
    Ok(cfg)
}

fn category_prompts(cfg: &RunConfig, spec: &SynthSpec, descriptions: Option<&Path>) -> Result<CategoryPromptSet> {
    match descriptions {
        Some(p) => load_descriptions(p, cfg.model.ctx).with_context(|| format!("cannot load descriptions {}", p.display())),
        None => Ok(CategoryPromptSet::synthetic(spec, cfg.model.ctx)),
    }
}

/// Categories `first .. first + n` of the configured mode, drawn with `seed`.
fn eval_spec(cfg: &RunConfig, first: u32, n: usize, seed: u64) -> SynthSpec {
    SynthSpec {
        first_category: first,
        categories: n,
        samples_per_category: cfg.eval.samples_per_category,
        seed,
        ..cfg.data.clone()
    }
}

/// The training subset selected by the configured protocol.
fn training_set(cfg: &RunConfig, data: Dataset) -> Result<Dataset> {
    Ok(match cfg.eval.protocol {
        Protocol::ZeroShot => data,
        Protocol::BaseToNovel => {
            let split = CategorySplit::even_odd(&data.category_ids)?;
            data.restrict(&split.base_ids())?
        }
        Protocol::FewShot => {
            let Some(k) = cfg.eval.k else {
                bail!("few-shot training requires eval.k");
            };
            few_shot_sample(&data, k, cfg.eval.seed)?
        }
    })
}

fn cmd_train(args: ConfigArgs, out: PathBuf, seed: Option<u64>, descriptions: Option<PathBuf>) -> Result<()> {
    let cfg = with_seed(load_config(&args)?, "trainer.seed", seed)?;
    let echo = cfg.echo();
    let data = training_set(&cfg, generate(&cfg.data, &cfg.model)?)?;
    let prompts = category_prompts(&cfg, &cfg.data, descriptions.as_deref())?.select(&data.category_ids)?;
    let store = ParameterStore::init(&cfg.model, cfg.trainer.seed, cfg.trainer.precision)?;
    std::fs::create_dir_all(&out).with_context(|| format!("cannot create {}", out.display()))?;
    let outcome = train(store, &cfg.model, &data, &prompts.tokens(), &cfg.trainer, &echo, Some(&out))?;
    for r in &outcome.log.records {
        println!(
            "epoch {:>3}  lr {:.3e}  loss {:.5}  top1 {:6.2}  {:.1}s",
            r.epoch, r.lr, r.train_loss, r.train_top1, r.wall_seconds
        );
    }
    println!("final  loss {:.5}  top1 {:.2}", outcome.final_loss, outcome.final_top1);
    println!("wrote {} and {}", out.join(trainer::CHECKPOINT_FILE).display(), out.join(trainer::METRICS_FILE).display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    args: ConfigArgs,
    checkpoint_path: PathBuf,
    protocol: Option<Protocol>,
    k: Option<usize>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    descriptions: Option<PathBuf>,
) -> Result<()> {
    let (ck_echo, store) =
        checkpoint::load(&checkpoint_path).with_context(|| format!("cannot load checkpoint {}", checkpoint_path.display()))?;
    let trained = RunConfig::from_echo(&ck_echo).context("checkpoint carries an unreadable configuration")?;
    let mut cfg = if args.config.is_some() {
        load_config(&args)?
    } else {
        RunConfig::from_echo_with_overrides(&ck_echo, &args.set)?
    };
    if cfg.model != trained.model {
        bail!("configured model does not match the checkpoint's model (e.g. widths or depth differ)");
    }
    store.check_layout(&cfg.model).context("checkpoint does not fit the configured model")?;
    if let Some(p) = protocol {
        cfg.eval.protocol = p;
    }
    if k.is_some() {
        cfg.eval.k = k;
    }
    cfg = with_seed(cfg, "eval.seed", seed)?;
    let precision = trained.trainer.precision;
    let prompts = category_prompts(&cfg, &eval_spec(&cfg, 0, clipvid::synthdata::MAX_CATEGORIES, 0), descriptions.as_deref())?;

    let mut report: EvalReport = match cfg.eval.protocol {
        Protocol::ZeroShot => {
            let target = generate(
                &eval_spec(&cfg, cfg.eval.target_first_category, cfg.eval.target_categories, cfg.eval.seed),
                &cfg.model,
            )?;
            zero_shot_eval(&store, &cfg.model, &trained.data.category_ids(), &target, &prompts, precision)?
        }
        Protocol::BaseToNovel => {
            let all = generate(
                &eval_spec(&cfg, cfg.data.first_category, cfg.data.categories, cfg.eval.seed),
                &cfg.model,
            )?;
            let split = CategorySplit::even_odd(&all.category_ids)?;
            let base = all.restrict(&split.base_ids())?;
            let novel = all.restrict(&split.novel_ids())?;
            base_to_novel_eval(
                &store,
                &cfg.model,
                &split,
                &base,
                &novel,
                &prompts,
                cfg.eval.novel_with_base_distractors,
                precision,
            )?
        }
        Protocol::FewShot => {
            if cfg.eval.k.is_none() {
                Cli::command()
                    .error(
                        clap::error::ErrorKind::MissingRequiredArgument,
                        "the few-shot protocol requires --k <K> (or eval.k in the configuration)",
                    )
                    .exit();
            }
            let held_out = generate(
                &eval_spec(&cfg, cfg.data.first_category, cfg.data.categories, cfg.eval.seed),
                &cfg.model,
            )?;
            let pool = prompts.select(&held_out.category_ids)?;
            let classes = clipvid::model::class_embeddings(&store, &cfg.model, &pool.tokens(), precision)?;
            let scores = clipvid::evalkit::score_videos(&store, &cfg.model, &held_out, &classes, precision)?;
            let acc = clipvid::evalkit::top1(&scores, &held_out.labels())?;
            EvalReport {
                protocol: Protocol::FewShot,
                splits: vec![clipvid::evalkit::SplitResult {
                    name: format!("k{}", cfg.eval.k.unwrap_or_default()),
                    top1: acc,
                    samples: held_out.len(),
                }],
                harmonic_mean: None,
                frames: cfg.model.frames,
                views: 1,
                seed: None,
            }
        }
    };
    report.seed = Some(cfg.eval.seed);
    print!("{report}");
    if let Some(dir) = out {
        std::fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
        let path = dir.join(format!("eval_{}.csv", cfg.eval.protocol));
        std::fs::write(&path, report.to_csv(&cfg.echo()))?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_count_params(args: ConfigArgs, preset: Option<Preset>) -> Result<()> {
    let mut cfg = load_config(&args)?;
    match preset {
        Some(Preset::VitB16) => cfg.model = ModelConfig::vit_b16(),
        Some(Preset::Toy) => cfg.model = ModelConfig::toy(),
        None => {}
    }
    let b = count_layout(&cfg.model)?;
    print!("{}", cfg.echo());
    print!("{b}");
    Ok(())
}

fn cmd_grad_check(args: ConfigArgs, seed: u64, seeds: u64, max_coords: Option<usize>, corrupt: Option<Tag>) -> Result<bool> {
    let cfg = load_config(&args)?;
    let opts = GradcheckOptions {
        max_coords,
        corrupt,
        ..GradcheckOptions::default()
    };
    let mut ok = true;
    for s in seed..seed + seeds.max(1) {
        let report = gradcheck_model(&cfg.model, s, &opts)?;
        println!("seed {s}");
        print!("{report}");
        if !report.passed() {
            let names: Vec<&str> = report.failing().iter().map(|t| t.as_str()).collect();
            eprintln!("gradient check failed for: {}", names.join(", "));
            ok = false;
        }
    }
    Ok(ok)
}

fn cmd_export_embeddings(checkpoint_path: PathBuf, dataset: Option<PathBuf>, out: PathBuf) -> Result<()> {
    let (echo, store) =
        checkpoint::load(&checkpoint_path).with_context(|| format!("cannot load checkpoint {}", checkpoint_path.display()))?;
    let cfg = RunConfig::from_echo(&echo).context("checkpoint carries an unreadable configuration")?;
    store.check_layout(&cfg.model)?;
    let data = match &dataset {
        Some(p) => {
            let bytes = std::fs::read(p).with_context(|| format!("cannot read dataset {}", p.display()))?;
            checkpoint::dataset_from_bytes(&bytes)?.1
        }
        None => generate(&cfg.data, &cfg.model)?,
    };
    let expect = [cfg.model.frames, cfg.model.height, cfg.model.width, cfg.model.channels];
    if let Some(s) = data.samples.iter().find(|s| s.video.shape() != expect) {
        bail!("dataset videos are {:?} but the checkpoint's model expects {:?}", s.video.shape(), expect);
    }
    let mut csv = echo.clone();
    csv.push_str("video,frame,label");
    for d in 0..cfg.model.d_embed {
        let _ = write!(csv, ",e{d}");
    }
    csv.push('\n');
    let mut spread = 0.0;
    for (v, sample) in data.samples.iter().enumerate() {
        let e = frame_embeddings(&store, &cfg.model, &sample.video, cfg.trainer.precision)?;
        spread += motion_stats(&e)?.variance.iter().sum::<f64>() / e.cols() as f64;
        for t in 0..e.rows() {
            let _ = write!(csv, "{v},{t},{}", data.category_ids[sample.label]);
            for x in e.row_slice(t) {
                let _ = write!(csv, ",{x:e}");
            }
            csv.push('\n');
        }
    }
    std::fs::write(&out, csv).with_context(|| format!("cannot write {}", out.display()))?;
    println!("wrote {} ({} videos x {} frames)", out.display(), data.len(), cfg.model.frames);
    println!("mean frame variance {:.6e}", spread / data.len().max(1) as f64);
    Ok(())
}

fn cmd_generate_data(args: ConfigArgs, out: PathBuf) -> Result<()> {
    let cfg = load_config(&args)?;
    let data = generate(&cfg.data, &cfg.model)?;
    std::fs::write(&out, checkpoint::dataset_to_bytes(&cfg.echo(), &data))
        .with_context(|| format!("cannot write {}", out.display()))?;
    println!("wrote {} ({} videos)", out.display(), data.len());
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train {
            cfg,
            out,
            seed,
            descriptions,
        } => cmd_train(cfg, out, seed, descriptions).map(|_| true),
        Command::Eval {
            cfg,
            checkpoint,
            protocol,
            k,
            seed,
            out,
            descriptions,
        } => cmd_eval(cfg, checkpoint, protocol, k, seed, out, descriptions).map(|_| true),
        Command::CountParams { cfg, preset } => cmd_count_params(cfg, preset).map(|_| true),
        Command::GradCheck {
            cfg,
            seed,
            seeds,
            max_coords,
            corrupt,
        } => cmd_grad_check(cfg, seed, seeds, max_coords, corrupt),
        Command::ExportEmbeddings { checkpoint, dataset, out } => cmd_export_embeddings(checkpoint, dataset, out).map(|_| true),
        Command::GenerateData { cfg, out } => cmd_generate_data(cfg, out).map(|_| true),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
