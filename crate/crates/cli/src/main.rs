use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use defectloc::features::ExtractorSpec;
use defectloc::render::RenderOptions;
use defectloc::run::{
    class_mix, cmd_bench, cmd_eval, cmd_gen, cmd_render, cmd_train, pattern_profile, BenchMatrix, EvalOptions,
    GenConfig, RunConfig, RENDER_DIR, TRACE_DIR,
};

#[derive(Parser)]
#[command(name = "defectloc", version, about = "RL defect localization on synthetic SEM line-space images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with an 80/20 train/test split.
    Gen(GenArgs),
    /// Train a DQN agent into a run directory.
    Train(TrainArgs),
    /// Evaluate a run on its test manifest.
    Eval(EvalArgs),
    /// Train and evaluate an extractor x seed matrix.
    Bench(BenchArgs),
    /// Render a detection trace as an SVG panel sequence.
    Render(RenderArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Output directory.
    #[arg(long, default_value = "data")]
    out: PathBuf,
    /// Total images before the split.
    #[arg(long, default_value_t = 1000)]
    n: usize,
    /// Pattern profile: easy, default or hard.
    #[arg(long, default_value = "easy")]
    profile: String,
    /// Class mix: uniform, imbalanced or a single class code.
    #[arg(long, default_value = "uniform")]
    mix: String,
    /// Fraction of images carrying a second defect.
    #[arg(long, default_value_t = 0.0)]
    double_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Run directory.
    run_dir: PathBuf,
    /// RunConfig JSON; command-line flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training manifest.
    #[arg(long)]
    train: Option<PathBuf>,
    /// Test manifest recorded for later evaluation.
    #[arg(long)]
    test: Option<PathBuf>,
    /// Feature extractor name (raw28, hog, randconv, external, vecdir).
    #[arg(long)]
    extractor: Option<String>,
    /// Extractor parameter as key=value (value parsed as JSON when possible).
    #[arg(long = "extractor-param", value_name = "KEY=VALUE")]
    extractor_params: Vec<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Hidden layer widths, comma separated.
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Environment steps per gradient update.
    #[arg(long)]
    update_every: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Continue from the run directory's latest checkpoint.
    #[arg(long, conflicts_with_all = ["config", "train", "test", "extractor", "epochs", "seed", "hidden", "batch_size", "update_every", "lr"])]
    resume: bool,
}

#[derive(Args)]
struct EvalArgs {
    run_dir: PathBuf,
    /// Test manifest; defaults to the one in the run config.
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    max_detections: Option<usize>,
    /// Evaluate the ground-truth greedy-IoU policy instead of the network.
    #[arg(long)]
    oracle: bool,
    /// Checkpoint to evaluate; defaults to the latest.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Skip writing per-image traces.
    #[arg(long)]
    no_traces: bool,
}

#[derive(Args)]
struct BenchArgs {
    /// BenchMatrix JSON.
    matrix: PathBuf,
    /// Output directory for cells and the aggregate report.
    #[arg(long, default_value = "bench")]
    out: PathBuf,
    /// Concurrent cells; overrides the matrix.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct RenderArgs {
    /// Trace JSON written by `eval`.
    trace: PathBuf,
    /// Image the trace was recorded on.
    #[arg(long)]
    image: PathBuf,
    /// Output SVG; defaults to <run>/renders/<stem>.svg next to a run's traces/.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 2.0)]
    scale: f64,
    #[arg(long, default_value_t = 8)]
    columns: usize,
}

fn parse_param(kv: &str) -> anyhow::Result<(String, Value)> {
    let (k, v) = kv.split_once('=').with_context(|| format!("extractor param `{kv}` is not KEY=VALUE"))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.to_string(), value))
}

fn absolute(p: &Path) -> anyhow::Result<PathBuf> {
    std::path::absolute(p).with_context(|| format!("resolving {}", p.display()))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"))
}

fn train(a: TrainArgs) -> anyhow::Result<()> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => RunConfig::default(),
    };
    if let Some(p) = &a.train {
        cfg.train_manifest = absolute(p)?;
    } else if cfg.train_manifest.is_relative() && !a.resume {
        cfg.train_manifest = absolute(&cfg.train_manifest)?;
    }
    if let Some(p) = &a.test {
        cfg.test_manifest = Some(absolute(p)?);
    }
    if let Some(name) = &a.extractor {
        cfg.extractor = ExtractorSpec::named(name);
    }
    for kv in &a.extractor_params {
        let (k, v) = parse_param(kv)?;
        cfg.extractor.params.insert(k, v);
    }
    let t = &mut cfg.train;
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(v) = a.seed {
        t.seed = v;
    }
    if let Some(v) = a.hidden.clone() {
        t.hidden = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.update_every {
        t.update_every = v;
    }
    if let Some(v) = a.lr {
        t.adam.lr = v;
    }
    let out = cmd_train(&a.run_dir, &cfg, a.resume)?;
    for l in &out.logs {
        println!(
            "epoch {:>3}  eps {:.2}  reward {:>7.3}  trigger {:.3}  iou@trigger {}  steps {:>5.1}  loss {}",
            l.epoch,
            l.epsilon,
            l.mean_reward,
            l.trigger_rate,
            fmt_opt(l.mean_iou_at_trigger),
            l.mean_episode_steps,
            fmt_opt(l.mean_loss)
        );
    }
    println!("checkpoint {}", out.final_checkpoint.display());
    Ok(())
}

fn eval(a: EvalArgs) -> anyhow::Result<()> {
    let opts = EvalOptions {
        test_manifest: a.test.as_deref().map(absolute).transpose()?,
        max_detections: a.max_detections,
        oracle: a.oracle,
        checkpoint: a.checkpoint,
        write_traces: !a.no_traces,
    };
    let report = cmd_eval(&a.run_dir, &opts)?;
    print!("{}", report.to_markdown());
    Ok(())
}

fn bench(a: BenchArgs) -> anyhow::Result<()> {
    let text = std::fs::read_to_string(&a.matrix).with_context(|| format!("reading {}", a.matrix.display()))?;
    let mut m: BenchMatrix = serde_json::from_str(&text).with_context(|| format!("parsing {}", a.matrix.display()))?;
    let base = a.matrix.parent().unwrap_or(Path::new("."));
    for p in [&mut m.train_manifest, &mut m.test_manifest] {
        if p.is_relative() {
            *p = absolute(&base.join(&*p))?;
        }
    }
    if let Some(w) = a.workers {
        m.workers = w;
    }
    let report = cmd_bench(&m, &a.out)?;
    print!("{}", report.to_markdown());
    if report.rows.iter().all(|r| r.cells_ok == 0) {
        bail!("every bench cell failed");
    }
    Ok(())
}

fn render(a: RenderArgs) -> anyhow::Result<()> {
    let out = match a.out {
        Some(o) => o,
        None => {
            let stem = a.trace.file_stem().context("trace path has no file name")?;
            let dir = a.trace.parent().unwrap_or(Path::new("."));
            let base = if dir.file_name().is_some_and(|n| n == TRACE_DIR) {
                dir.parent().unwrap_or(Path::new(".")).join(RENDER_DIR)
            } else {
                dir.to_path_buf()
            };
            base.join(stem).with_extension("svg")
        }
    };
    let opts = RenderOptions {
        scale: a.scale,
        columns: a.columns,
    };
    cmd_render(&a.trace, &a.image, &out, &opts)?;
    println!("{}", out.display());
    Ok(())
}

fn gen(a: GenArgs) -> anyhow::Result<()> {
    let cfg = GenConfig {
        n_images: a.n,
        pattern: pattern_profile(&a.profile)?,
        class_mix: class_mix(&a.mix)?,
        double_defect_fraction: a.double_fraction,
        seed: a.seed,
        ..GenConfig::default()
    };
    let out = cmd_gen(&a.out, &cfg)?;
    print!("{}", out.summary);
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Gen(a) => gen(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Bench(a) => bench(a),
        Command::Render(a) => render(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
