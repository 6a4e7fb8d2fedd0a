use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use log::info;
use semstereo::data::checkpoint::Checkpoint;
use semstereo::data::dataset::{write_synthetic, Dataset, Pair};
use semstereo::data::raster::{read_rgb, write_classes, write_disparity, DISPARITY_SCALE};
use semstereo::harness::report::{KvReport, Table};
use semstereo::harness::{bench, evaluate, infer, training_pairs, validation_pairs, RunConfig, Trainer};
use semstereo::model::Model;
use semstereo::tensor::Tensor;
use semstereo::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

macro_rules! overrides {
    ($($field:ident: $help:literal,)*) => {
        /// Per-field overrides, applied after the profile and config file.
        #[derive(Args, Debug, Default)]
        struct Overrides {
            $(
                #[arg(long, global = true, value_name = "VALUE", help = $help)]
                $field: Option<String>,
            )*
        }

        impl Overrides {
            fn pairs(&self) -> Vec<(&'static str, &str)> {
                let mut v = Vec::new();
                $(
                    if let Some(x) = &self.$field {
                        v.push((stringify!($field), x.as_str()));
                    }
                )*
                v
            }
        }
    };
}

overrides! {
    c: "Base channel width",
    n_classes: "Number of semantic classes",
    variant: "disparity, disparity-semantic or full",
    crop_height: "Training crop height",
    crop_width: "Training crop width",
    batch_size: "Training batch size",
    steps: "Optimizer steps (0 = use --epochs)",
    epochs: "Training epochs when --steps is 0",
    lr: "Initial learning rate",
    lr_halving_epochs: "Epochs between learning-rate halvings",
    beta1: "Adam beta1",
    beta2: "Adam beta2",
    adam_eps: "Adam epsilon",
    w_stage1: "Loss weight of stage 1",
    w_stage2: "Loss weight of stage 2",
    w_stage3: "Loss weight of stage 3",
    w_disparity: "Weight of the disparity term",
    w_semantic: "Weight of the semantic term",
    w_refined: "Weight of the refined-disparity term",
    gamma: "Coarse-pixel reweighting strength",
    k: "Class-weight smoothing constant",
    seed: "Parameter initialization seed",
    data_seed: "Data generation and shuffling seed",
    stage_stop: "Last stage to run (1, 2 or 3)",
    refine: "Run synergy refinement (true/false)",
    sequential: "Single-threaded kernels (true/false)",
    data_root: "Dataset root; synthetic data when empty",
    train_split: "Training split directory name",
    val_split: "Validation split directory name",
    synth_count: "Number of synthetic training pairs",
    synth_height: "Synthetic image height",
    synth_width: "Synthetic image width",
    synth_objects: "Objects per synthetic scene",
    synth_max_disp: "Largest synthetic disparity",
    checkpoint_every: "Steps between checkpoints (0 = final only)",
    log_every: "Steps between log lines",
    out_dir: "Output directory",
}

#[derive(Parser, Debug)]
#[command(name = "semstereo", version, about = "Joint stereo disparity and semantic segmentation")]
struct Cli {
    /// Base settings: `full` or `desk`.
    #[arg(long, global = true, default_value = "desk")]
    profile: String,
    /// Flat `key = value` file applied on top of the profile.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write checkpoints to the output directory.
    Train,
    /// Report per-stage EPE, D1, mIoU and pixel accuracy.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Synthetic validation pairs when no dataset root is set.
        #[arg(long, default_value_t = 8)]
        count: usize,
    },
    /// Run one stereo pair and write per-stage disparity and class maps.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        left: PathBuf,
        #[arg(long)]
        right: PathBuf,
    },
    /// Measure per-stage latency, FLOPs and parameter counts.
    Bench {
        /// Uses a freshly initialized model when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 256)]
        height: usize,
        #[arg(long, default_value_t = 512)]
        width: usize,
        #[arg(long, default_value_t = 10)]
        reps: usize,
    },
    /// Write a synthetic dataset split.
    GenData {
        #[arg(long)]
        root: PathBuf,
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn config(cli: &Cli) -> semstereo::Result<RunConfig> {
    let mut cfg = RunConfig::profile(&cli.profile)?;
    if let Some(path) = &cli.config {
        cfg = RunConfig::load(path, cfg)?;
    }
    for (k, v) in cli.overrides.pairs() {
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).map_err(|e| Error::Io { path: path.into(), source: e })?;
    Ok(())
}

fn write_reports(dir: &Path, name: &str, kv: &KvReport, table: &Table) -> anyhow::Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.into(), source: e })?;
    print!("{}", kv.to_text());
    print!("{}", table.to_tsv());
    write_text(&dir.join(format!("{name}.txt")), &kv.to_text())?;
    write_text(&dir.join(format!("{name}.tsv")), &table.to_tsv())
}

fn load_model(path: &Path) -> anyhow::Result<Model<f32>> {
    let ckpt = Checkpoint::load(path)?;
    info!("loaded {} (step {})", path.display(), ckpt.step);
    Ok(ckpt.into_model()?)
}

fn train(cfg: RunConfig) -> anyhow::Result<()> {
    let dir = cfg.out_dir.clone();
    let ckpt_dir = dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(|e| Error::Io { path: ckpt_dir.clone(), source: e })?;
    write_text(&dir.join("config.txt"), &cfg.to_text())?;
    let pairs = training_pairs(&cfg)?;
    info!("training on {} pairs", pairs.len());
    let mut trainer = Trainer::new(cfg, pairs)?;
    info!("{} steps planned", trainer.planned_steps());
    let mut log = Table::new(&["step", "epoch", "lr", "total"]);
    trainer.run(Some(&ckpt_dir), |l| {
        log.row(vec![l.step.to_string(), l.epoch.to_string(), format!("{:e}", l.lr), format!("{:.6}", l.total)]);
    })?;
    write_text(&dir.join("train_log.tsv"), &log.to_tsv())?;
    let path = dir.join("final.ckpt");
    trainer.checkpoint().save(&path)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn eval_pairs(cfg: &RunConfig, count: usize) -> semstereo::Result<Vec<Pair>> {
    match &cfg.data_root {
        Some(root) => Dataset::open(root, &cfg.val_split)?.load_all(),
        None => validation_pairs(cfg, count),
    }
}

fn eval(cfg: RunConfig, checkpoint: &Path, count: usize) -> anyhow::Result<()> {
    let model = load_model(checkpoint)?;
    let pairs = eval_pairs(&cfg, count)?;
    let report = evaluate(&model, &pairs, cfg.run_options())?;
    write_reports(&cfg.out_dir, "eval", &report.kv(), &report.table())
}

/// Out-of-range estimates are clamped to what the 16-bit format can hold.
fn disparity_raster(t: &Tensor<f32>, h: usize, w: usize) -> semstereo::Result<Tensor<f32>> {
    let max = u16::MAX as f32 / DISPARITY_SCALE;
    let data = t.data().iter().map(|d| d.clamp(0.0, max)).collect();
    Tensor::new(vec![1, h, w], data)
}

fn run_infer(cfg: RunConfig, checkpoint: &Path, left: &Path, right: &Path) -> anyhow::Result<()> {
    let model = load_model(checkpoint)?;
    let l = read_rgb(left)?;
    let r = read_rgb(right)?;
    if l.shape() != r.shape() {
        return Err(Error::Mismatch(format!("left {:?} and right {:?} differ in size", l.shape(), r.shape())).into());
    }
    let (h, w) = (l.shape()[1], l.shape()[2]);
    let out = infer(&model, &l.reshape(vec![1, 3, h, w])?, &r.reshape(vec![1, 3, h, w])?, cfg.run_options())?;

    let dir = &cfg.out_dir;
    fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
    let mut kv = KvReport::default();
    kv.push("input", format!("{h}x{w}"));
    kv.push("encode_ms", format!("{:.3}", out.encode_time.as_secs_f64() * 1e3));
    let mut table = Table::new(&["stage", "disparity_ms", "semantic_ms", "refine_ms", "total_ms", "flops"]);
    let valid = vec![true; h * w];
    for (s, counters) in out.stages.iter().zip(&out.counters[1..]) {
        let n = s.stage.number();
        let disp = dir.join(format!("stage{n}_disparity.png"));
        write_disparity(&disparity_raster(s.final_disparity(), h, w)?, &valid, &disp)?;
        kv.push(format!("stage{n}.disparity"), disp.display());
        if let Some(classes) = &s.classes {
            let path = dir.join(format!("stage{n}_classes.png"));
            write_classes(&classes.ids, h, w, &path)?;
            kv.push(format!("stage{n}.classes"), path.display());
        }
        let ms = |d: std::time::Duration| format!("{:.3}", d.as_secs_f64() * 1e3);
        table.row(vec![
            n.to_string(),
            ms(s.times.disparity),
            ms(s.times.semantic),
            ms(s.times.refine),
            ms(s.times.total()),
            counters.flops.to_string(),
        ]);
    }
    kv.push("flops.total", out.total_flops());
    write_reports(dir, "infer", &kv, &table)
}

fn run_bench(cfg: RunConfig, checkpoint: Option<&Path>, h: usize, w: usize, reps: usize) -> anyhow::Result<()> {
    let model = match checkpoint {
        Some(p) => load_model(p)?,
        None => Model::new(cfg.model_config(), cfg.seed)?,
    };
    let report = bench(&model, h, w, reps, cfg.run_options(), cfg.data_seed)?;
    if report.insufficient_samples {
        log::warn!("only {reps} repetitions; percentiles are unreliable");
    }
    write_reports(&cfg.out_dir, "bench", &report.kv(), &report.table())
}

fn gen_data(cfg: RunConfig, root: &Path, split: &str, count: Option<usize>, seed: Option<u64>) -> anyhow::Result<()> {
    let count = count.unwrap_or(cfg.synth_count);
    if count == 0 {
        bail!(Error::Config("count must be positive".into()));
    }
    write_synthetic(root, split, count, seed.unwrap_or(cfg.data_seed), &cfg.scene_params())?;
    println!("wrote {count} pairs to {}", root.join(split).display());
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = config(&cli)?;
    semstereo::diffops::exec::set_parallel(!cfg.sequential);
    match &cli.command {
        Command::Train => train(cfg),
        Command::Eval { checkpoint, count } => eval(cfg, checkpoint, *count),
        Command::Infer { checkpoint, left, right } => run_infer(cfg, checkpoint, left, right),
        Command::Bench { checkpoint, height, width, reps } => {
            run_bench(cfg, checkpoint.as_deref(), *height, *width, *reps)
        }
        Command::GenData { root, split, count, seed } => gen_data(cfg, root, split, *count, *seed),
    }
    .context(format!("{} failed", cli.command.name()))
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Eval { .. } => "eval",
            Command::Infer { .. } => "infer",
            Command::Bench { .. } => "bench",
            Command::GenData { .. } => "gen-data",
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::NonFinite { .. }) => EXIT_NUMERIC,
        Some(e) if e.is_data_error() => EXIT_DATA,
        _ => EXIT_USAGE,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
