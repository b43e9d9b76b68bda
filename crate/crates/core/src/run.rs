//! Run directories and the command implementations behind the CLI.
//!
//! A training run lives in one directory:
//!
//! ```text
//! config.json          resolved RunConfig (schema + tool version, seeds, extractor)
//! checkpoints/         epoch_NNN.ckpt files and a `latest` pointer
//! train_log.jsonl      one EpochLog per line
//! eval/                report.json, report.md, predictions.json
//! traces/              per-image detection traces (JSON)
//! renders/             SVG renders of traces
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::agent::{predict, predict_with, train, EpochLog, ImagePrediction, PredictionSet, TrainConfig, TrainerState};
use crate::env::OraclePolicy;
use crate::eval::{spearman, EvalReport};
use crate::features::ExtractorSpec;
use crate::imaging::read_png;
use crate::qnet::{load_checkpoint, save_checkpoint, Mlp};
use crate::render::{render_svg, RenderOptions};
use crate::synthgen::{generate_dataset, ClassMix, DatasetManifest, DefectClass, PatternSpec, TEST_MANIFEST, TRAIN_MANIFEST};
use crate::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

pub const CONFIG_FILE: &str = "config.json";
pub const GEN_CONFIG_FILE: &str = "gen_config.json";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const LATEST_POINTER: &str = "latest";
pub const EVAL_DIR: &str = "eval";
pub const TRACE_DIR: &str = "traces";
pub const RENDER_DIR: &str = "renders";

/// Spearman rho between mAP and steps/image reported for the original
/// 18-backbone study; printed next to measured values for context only.
pub const REFERENCE_RHO: f64 = -0.50;

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Field-level differences between two JSON documents, as `path: a -> b` lines.
pub fn json_diff(a: &Value, b: &Value) -> Vec<String> {
    fn walk(path: &str, a: &Value, b: &Value, out: &mut Vec<String>) {
        match (a, b) {
            (Value::Object(x), Value::Object(y)) => {
                let keys: BTreeSet<&String> = x.keys().chain(y.keys()).collect();
                for k in keys {
                    let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                    walk(&p, x.get(k).unwrap_or(&Value::Null), y.get(k).unwrap_or(&Value::Null), out);
                }
            }
            _ if a != b => out.push(format!("{path}: {a} -> {b}")),
            _ => {}
        }
    }
    let mut out = Vec::new();
    walk("", a, b, &mut out);
    out
}

/// Synthetic dataset request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub schema_version: u32,
    pub n_images: usize,
    pub pattern: PatternSpec,
    pub class_mix: ClassMix,
    pub double_defect_fraction: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            schema_version: SCHEMA_VERSION,
            n_images: 1000,
            pattern: PatternSpec::easy(),
            class_mix: ClassMix::uniform_single(),
            double_defect_fraction: 0.0,
            seed: 0,
        }
    }
}

/// Named pattern presets accepted on the command line.
pub fn pattern_profile(name: &str) -> Result<PatternSpec> {
    match name {
        "easy" => Ok(PatternSpec::easy()),
        "default" => Ok(PatternSpec::default()),
        "hard" => Ok(PatternSpec::hard()),
        other => Err(Error::Config(format!(
            "unknown profile `{other}` (available: easy, default, hard)"
        ))),
    }
}

/// Named class mixes accepted on the command line: `uniform`, `imbalanced`,
/// or a single class code.
pub fn class_mix(name: &str) -> Result<ClassMix> {
    match name {
        "uniform" => Ok(ClassMix::uniform_single()),
        "imbalanced" => Ok(ClassMix::imbalanced()),
        code => code
            .parse::<DefectClass>()
            .map(ClassMix::only)
            .map_err(|_| Error::Config(format!("unknown class mix `{code}` (uniform, imbalanced or a class code)"))),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenOutcome {
    pub created: bool,
    pub summary: String,
}

/// Per-class counts for both splits, laid out as class rows with train,
/// test and total columns.
pub fn dataset_summary(train: &DatasetManifest, test: &DatasetManifest) -> String {
    let (a, b) = (train.class_counts(), test.class_counts());
    let mut s = String::new();
    let _ = writeln!(s, "{:<6} {:>8} {:>8} {:>8}", "Class", "Train", "Test", "Total");
    for c in DefectClass::ALL {
        let _ = writeln!(s, "{:<6} {:>8} {:>8} {:>8}", c.code(), a[&c], b[&c], a[&c] + b[&c]);
    }
    let (da, db) = (train.defect_count(), test.defect_count());
    let _ = writeln!(s, "{:<6} {:>8} {:>8} {:>8}", "All", da, db, da + db);
    let (ia, ib) = (train.records.len(), test.records.len());
    let _ = writeln!(s, "{:<6} {:>8} {:>8} {:>8}", "Images", ia, ib, ia + ib);
    s
}

/// Generates a dataset into `out_dir`, or confirms an identical one is there.
pub fn cmd_gen(out_dir: &Path, cfg: &GenConfig) -> Result<GenOutcome> {
    let cfg_path = out_dir.join(GEN_CONFIG_FILE);
    if cfg_path.exists() {
        let existing: Value = read_json(&cfg_path)?;
        let requested = serde_json::to_value(cfg).map_err(|e| Error::json(&cfg_path, e))?;
        let diff = json_diff(&existing, &requested);
        if !diff.is_empty() {
            return Err(Error::Config(format!(
                "{} already holds a dataset with a different configuration:\n  {}",
                out_dir.display(),
                diff.join("\n  ")
            )));
        }
        let train = DatasetManifest::load(out_dir.join(TRAIN_MANIFEST))?;
        let test = DatasetManifest::load(out_dir.join(TEST_MANIFEST))?;
        return Ok(GenOutcome {
            created: false,
            summary: format!("dataset exists, identical config\n{}", dataset_summary(&train, &test)),
        });
    }
    create_dir(out_dir)?;
    let ds = generate_dataset(
        out_dir,
        cfg.n_images,
        &cfg.class_mix,
        cfg.double_defect_fraction,
        &cfg.pattern,
        cfg.seed,
    )?;
    write_json(&cfg_path, cfg)?;
    Ok(GenOutcome {
        created: true,
        summary: dataset_summary(&ds.train, &ds.test),
    })
}

/// Everything a training run needs; persisted as `config.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub tool_version: String,
    pub train_manifest: PathBuf,
    pub test_manifest: Option<PathBuf>,
    pub extractor: ExtractorSpec,
    /// Provenance reported by the extractor when the run was created.
    pub extractor_metadata: Value,
    pub train: TrainConfig,
    /// Most recent checkpoints kept on disk; 0 keeps all.
    pub keep_checkpoints: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: SCHEMA_VERSION,
            tool_version: TOOL_VERSION.to_string(),
            train_manifest: PathBuf::from(TRAIN_MANIFEST),
            test_manifest: None,
            extractor: ExtractorSpec::named("hog"),
            extractor_metadata: Value::Null,
            train: TrainConfig::default(),
            keep_checkpoints: 3,
        }
    }
}

impl RunConfig {
    pub fn load(run_dir: &Path) -> Result<Self> {
        let cfg: RunConfig = read_json(&run_dir.join(CONFIG_FILE))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "{} has schema version {}, this tool reads {SCHEMA_VERSION}",
                run_dir.join(CONFIG_FILE).display(),
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }
}

fn checkpoint_name(epoch: usize) -> String {
    format!("epoch_{epoch:03}.ckpt")
}

fn parse_checkpoint_epoch(name: &str) -> Option<usize> {
    name.strip_prefix("epoch_")?.strip_suffix(".ckpt")?.parse().ok()
}

/// Path of the checkpoint the `latest` pointer names.
pub fn latest_checkpoint(run_dir: &Path) -> Result<PathBuf> {
    let pointer = run_dir.join(CHECKPOINT_DIR).join(LATEST_POINTER);
    let name = fs::read_to_string(&pointer).map_err(|e| Error::io(&pointer, e))?;
    Ok(run_dir.join(CHECKPOINT_DIR).join(name.trim()))
}

fn prune_checkpoints(dir: &Path, keep: usize) -> Result<()> {
    if keep == 0 {
        return Ok(());
    }
    let mut epochs: Vec<usize> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| parse_checkpoint_epoch(&e.file_name().to_string_lossy()))
        .collect();
    epochs.sort_unstable();
    let excess = epochs.len().saturating_sub(keep);
    for e in &epochs[..excess] {
        let p = dir.join(checkpoint_name(*e));
        fs::remove_file(&p).map_err(|err| Error::io(&p, err))?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub logs: Vec<EpochLog>,
    pub final_checkpoint: PathBuf,
}

/// Trains into `run_dir`. A fresh run refuses a directory that already holds
/// one; `resume` continues from the `latest` checkpoint of the stored config.
pub fn cmd_train(run_dir: &Path, cfg: &RunConfig, resume: bool) -> Result<TrainOutcome> {
    let cfg_path = run_dir.join(CONFIG_FILE);
    let ckpt_dir = run_dir.join(CHECKPOINT_DIR);
    let log_path = run_dir.join(TRAIN_LOG);
    let (cfg, start) = if resume {
        let stored = RunConfig::load(run_dir)?;
        let ckpt = latest_checkpoint(run_dir)?;
        let name = ckpt.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let epoch = parse_checkpoint_epoch(&name).ok_or_else(|| Error::Checkpoint {
            path: ckpt.clone(),
            reason: "name does not carry an epoch".into(),
        })?;
        let (net, adam) = load_checkpoint(&ckpt)?;
        let logs: Vec<EpochLog> = read_log(&log_path)?.into_iter().filter(|l| l.epoch <= epoch).collect();
        let total_episodes = logs.last().map(|l| l.total_episodes).unwrap_or(0);
        let mut text = String::new();
        for l in &logs {
            text.push_str(&serde_json::to_string(l).map_err(|e| Error::json(&log_path, e))?);
            text.push('\n');
        }
        fs::write(&log_path, text).map_err(|e| Error::io(&log_path, e))?;
        let state = TrainerState {
            net,
            adam,
            next_epoch: epoch + 1,
            total_episodes,
        };
        (stored, Some(state))
    } else {
        if cfg_path.exists() {
            return Err(Error::Config(format!(
                "{} already holds a run; pass --resume or choose a new directory",
                run_dir.display()
            )));
        }
        (cfg.clone(), None)
    };
    cfg.train.validate()?;
    let manifest = DatasetManifest::load(resolve(run_dir, &cfg.train_manifest))?;
    let extractor = cfg.extractor.build()?;
    create_dir(&ckpt_dir)?;
    if start.is_none() {
        let mut stored = cfg.clone();
        stored.extractor_metadata = extractor.metadata();
        write_json(&cfg_path, &stored)?;
        fs::write(&log_path, "").map_err(|e| Error::io(&log_path, e))?;
    }
    let mut final_checkpoint = latest_checkpoint(run_dir).ok();
    let (_, logs) = train(&manifest, &cfg.train, extractor.as_ref(), start, |log, state| {
        let path = ckpt_dir.join(checkpoint_name(log.epoch));
        save_checkpoint(&state.net, &state.adam, &path)?;
        let pointer = ckpt_dir.join(LATEST_POINTER);
        fs::write(&pointer, checkpoint_name(log.epoch) + "\n").map_err(|e| Error::io(&pointer, e))?;
        prune_checkpoints(&ckpt_dir, cfg.keep_checkpoints)?;
        let mut f = fs::OpenOptions::new()
            .append(true)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?;
        let line = serde_json::to_string(log).map_err(|e| Error::json(&log_path, e))?;
        writeln!(f, "{line}").map_err(|e| Error::io(&log_path, e))?;
        final_checkpoint = Some(path);
        Ok(())
    })?;
    let final_checkpoint = final_checkpoint.ok_or_else(|| Error::Config("no epoch left to train".into()))?;
    Ok(TrainOutcome { logs, final_checkpoint })
}

pub fn read_log(path: &Path) -> Result<Vec<EpochLog>> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(path, e)),
    };
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::json(path, e)))
        .collect()
}

/// Relative manifest paths in a run config resolve against the run directory.
fn resolve(run_dir: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        run_dir.join(p)
    }
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    /// Overrides the run config's test manifest.
    pub test_manifest: Option<PathBuf>,
    pub max_detections: Option<usize>,
    /// Evaluate the ground-truth greedy-IoU policy instead of the network.
    pub oracle: bool,
    pub checkpoint: Option<PathBuf>,
    pub write_traces: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            test_manifest: None,
            max_detections: None,
            oracle: false,
            checkpoint: None,
            write_traces: true,
        }
    }
}

pub const Q_SCORE: &str = "Q-value of TRIGGER at the final state";
pub const ORACLE_SCORE: &str = "IoU at trigger (ground-truth oracle)";

/// Evaluates a run on its test manifest and writes `eval/` and `traces/`.
///
/// With `oracle` the run directory needs no prior training: a missing
/// `config.json` falls back to defaults with the `raw28` extractor.
pub fn cmd_eval(run_dir: &Path, opts: &EvalOptions) -> Result<EvalReport> {
    let cfg = if opts.oracle && !run_dir.join(CONFIG_FILE).exists() {
        RunConfig {
            extractor: ExtractorSpec::named("raw28"),
            ..RunConfig::default()
        }
    } else {
        RunConfig::load(run_dir)?
    };
    let test_path = match (&opts.test_manifest, &cfg.test_manifest) {
        (Some(p), _) => p.clone(),
        (None, Some(p)) => resolve(run_dir, p),
        (None, None) => {
            return Err(Error::Config(
                "no test manifest: pass one or set test_manifest in config.json".into(),
            ))
        }
    };
    let manifest = DatasetManifest::load(&test_path)?;
    let env = cfg.train.env;
    let max_det = opts.max_detections.unwrap_or(env.max_detections);
    let extractor = cfg.extractor.build()?;
    let (set, score) = if opts.oracle {
        let p = predict_with(&manifest, &OraclePolicy { cfg: env }, extractor.as_ref(), &env, max_det, opts.write_traces)?;
        (p, ORACLE_SCORE)
    } else {
        let ckpt = match &opts.checkpoint {
            Some(c) => c.clone(),
            None => latest_checkpoint(run_dir)?,
        };
        let (net, _) = load_checkpoint(&ckpt)?;
        check_net(&net, extractor.dim() + env.history_dim(), &ckpt)?;
        (predict(&manifest, &net, extractor.as_ref(), &env, max_det, opts.write_traces)?, Q_SCORE)
    };
    let report = EvalReport::from_predictions(&set, env.reward.iou_threshold, score);
    write_eval(run_dir, &set, &report)?;
    Ok(report)
}

fn check_net(net: &Mlp, want: usize, path: &Path) -> Result<()> {
    if net.input_dim() != want {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            reason: format!("network input dim {} does not match the run's {want}", net.input_dim()),
        });
    }
    Ok(())
}

fn trace_name(file: &str) -> String {
    let stem = Path::new(file).file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    format!("{stem}.json")
}

fn write_eval(run_dir: &Path, set: &PredictionSet, report: &EvalReport) -> Result<()> {
    let eval_dir = run_dir.join(EVAL_DIR);
    create_dir(&eval_dir)?;
    let slim = PredictionSet {
        images: set
            .images
            .iter()
            .map(|i| ImagePrediction {
                traces: Vec::new(),
                ..i.clone()
            })
            .collect(),
    };
    write_json(&eval_dir.join("predictions.json"), &slim)?;
    write_json(&eval_dir.join("report.json"), report)?;
    let md = eval_dir.join("report.md");
    fs::write(&md, report.to_markdown()).map_err(|e| Error::io(&md, e))?;
    if set.images.iter().any(|i| !i.traces.is_empty()) {
        let dir = run_dir.join(TRACE_DIR);
        create_dir(&dir)?;
        for img in &set.images {
            write_json(&dir.join(trace_name(&img.file)), img)?;
        }
    }
    Ok(())
}

/// Renders a trace file over its image into an SVG file.
pub fn cmd_render(trace_path: &Path, image_path: &Path, out: &Path, opts: &RenderOptions) -> Result<()> {
    let trace: ImagePrediction = read_json(trace_path)?;
    let image = read_png(image_path)?;
    let svg = render_svg(&image, &trace, opts)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    fs::write(out, svg).map_err(|e| Error::io(out, e))
}

/// Extractors × seeds sharing one training and evaluation setup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchMatrix {
    pub schema_version: u32,
    pub train_manifest: PathBuf,
    pub test_manifest: PathBuf,
    pub extractors: Vec<ExtractorSpec>,
    pub seeds: Vec<u64>,
    pub train: TrainConfig,
    pub max_detections: Option<usize>,
    pub keep_checkpoints: usize,
    /// Cells run concurrently; 1 runs them in order.
    pub workers: usize,
}

impl Default for BenchMatrix {
    fn default() -> Self {
        BenchMatrix {
            schema_version: SCHEMA_VERSION,
            train_manifest: PathBuf::from(TRAIN_MANIFEST),
            test_manifest: PathBuf::from(TEST_MANIFEST),
            extractors: ["raw28", "hog", "randconv"].map(ExtractorSpec::named).to_vec(),
            seeds: vec![0, 1, 2],
            train: TrainConfig::default(),
            max_detections: None,
            keep_checkpoints: 1,
            workers: 1,
        }
    }
}

impl BenchMatrix {
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for e in &self.extractors {
            if !seen.insert(&e.name) {
                return Err(Error::Config(format!("extractor `{}` listed twice", e.name)));
            }
        }
        if self.extractors.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("bench matrix needs at least one extractor and one seed".into()));
        }
        self.train.validate()
    }

    pub fn cell_dir(&self, out_dir: &Path, extractor: &str, seed: u64) -> PathBuf {
        out_dir.join("cells").join(format!("{extractor}_seed{seed}"))
    }

    fn run_config(&self, extractor: &ExtractorSpec, seed: u64) -> RunConfig {
        RunConfig {
            train_manifest: self.train_manifest.clone(),
            test_manifest: Some(self.test_manifest.clone()),
            extractor: extractor.clone(),
            train: TrainConfig {
                seed,
                ..self.train.clone()
            },
            keep_checkpoints: self.keep_checkpoints,
            ..RunConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchCell {
    pub extractor: String,
    pub seed: u64,
    pub map: Option<f64>,
    pub avg_steps: Option<f64>,
    /// Set when the cell failed; failed cells are excluded from aggregates.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub extractor: String,
    pub cells_ok: usize,
    pub mean_map: Option<f64>,
    pub mean_steps: Option<f64>,
    pub mean_ap: BTreeMap<DefectClass, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub cells: Vec<BenchCell>,
    pub rows: Vec<BenchRow>,
    /// Spearman rho between per-extractor mean mAP and mean steps/image.
    pub rho: Option<f64>,
    pub reference_rho: f64,
}

impl BenchReport {
    pub fn to_markdown(&self) -> String {
        let mut s = String::from("# Benchmark\n\n");
        s.push_str("| Extractor |");
        for c in DefectClass::ALL {
            let _ = write!(s, " {} |", c.code());
        }
        s.push_str(" All (mAP) | Avg no. steps | Cells |\n|---|");
        s.push_str(&"---:|".repeat(DefectClass::ALL.len() + 3));
        s.push('\n');
        let pct = |v: Option<f64>| v.map(|v| format!("{:.1}", 100.0 * v)).unwrap_or_else(|| "n/a".into());
        for r in &self.rows {
            let _ = write!(s, "| {} |", r.extractor);
            for c in DefectClass::ALL {
                let _ = write!(s, " {} |", pct(r.mean_ap.get(&c).copied()));
            }
            let steps = r.mean_steps.map(|v| format!("{v:.1}")).unwrap_or_else(|| "n/a".into());
            let _ = writeln!(s, " {} | {steps} | {} |", pct(r.mean_map), r.cells_ok);
        }
        let rho = self.rho.map(|r| format!("{r:.2}")).unwrap_or_else(|| "n/a".into());
        let _ = writeln!(
            s,
            "\nSpearman rho (mean mAP vs mean steps/image across extractors): {rho} (reference value from the original study: {:.2})",
            self.reference_rho
        );
        let failed: Vec<&BenchCell> = self.cells.iter().filter(|c| c.error.is_some()).collect();
        if !failed.is_empty() {
            s.push_str("\nFailed cells:\n");
            for c in failed {
                let _ = writeln!(s, "- {} seed {}: {}", c.extractor, c.seed, c.error.as_deref().unwrap_or(""));
            }
        }
        s
    }
}

/// An error with its sources, `outer: inner: ...`.
pub fn error_chain(e: &dyn std::error::Error) -> String {
    let mut s = e.to_string();
    let mut cur = e.source();
    while let Some(c) = cur {
        let _ = write!(s, ": {c}");
        cur = c.source();
    }
    s
}

/// Reuses a finished cell whose stored config matches, else trains and evaluates it.
fn run_cell(matrix: &BenchMatrix, out_dir: &Path, spec: &ExtractorSpec, seed: u64) -> Result<EvalReport> {
    let dir = matrix.cell_dir(out_dir, &spec.name, seed);
    let cfg = matrix.run_config(spec, seed);
    let report_path = dir.join(EVAL_DIR).join("report.json");
    if report_path.exists() {
        let stored = RunConfig::load(&dir)?;
        let stored = RunConfig {
            extractor_metadata: Value::Null,
            ..stored
        };
        if stored == cfg {
            return read_json(&report_path);
        }
    }
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    create_dir(&dir)?;
    cmd_train(&dir, &cfg, false)?;
    cmd_eval(
        &dir,
        &EvalOptions {
            max_detections: matrix.max_detections,
            write_traces: false,
            ..EvalOptions::default()
        },
    )
}

/// Trains and evaluates every (extractor, seed) cell, then aggregates.
///
/// Manifest paths in the matrix resolve against each cell directory unless
/// absolute; the CLI makes them absolute. A failing cell is recorded, not fatal.
pub fn cmd_bench(matrix: &BenchMatrix, out_dir: &Path) -> Result<BenchReport> {
    matrix.validate()?;
    create_dir(out_dir)?;
    write_json(&out_dir.join("matrix.json"), matrix)?;
    let jobs: Vec<(&ExtractorSpec, u64)> = matrix
        .extractors
        .iter()
        .flat_map(|e| matrix.seeds.iter().map(move |&s| (e, s)))
        .collect();
    let run = |(spec, seed): &(&ExtractorSpec, u64)| match run_cell(matrix, out_dir, spec, *seed) {
        Ok(r) => BenchCell {
            extractor: spec.name.clone(),
            seed: *seed,
            map: r.map,
            avg_steps: Some(r.avg_steps),
            error: None,
        },
        Err(e) => BenchCell {
            extractor: spec.name.clone(),
            seed: *seed,
            map: None,
            avg_steps: None,
            error: Some(error_chain(&e)),
        },
    };
    let cells: Vec<BenchCell> = if matrix.workers > 1 {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(matrix.workers)
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
        pool.install(|| jobs.par_iter().map(run).collect())
    } else {
        jobs.iter().map(run).collect()
    };

    let mut rows = Vec::new();
    for spec in &matrix.extractors {
        let ok: Vec<&BenchCell> = cells
            .iter()
            .filter(|c| c.extractor == spec.name && c.error.is_none() && c.map.is_some())
            .collect();
        let mean = |f: &dyn Fn(&BenchCell) -> f64| (!ok.is_empty()).then(|| ok.iter().map(|c| f(c)).sum::<f64>() / ok.len() as f64);
        let mut mean_ap = BTreeMap::new();
        for c in DefectClass::ALL {
            let vals: Vec<f64> = ok
                .iter()
                .filter_map(|cell| {
                    let p = matrix.cell_dir(out_dir, &cell.extractor, cell.seed).join(EVAL_DIR).join("report.json");
                    read_json::<EvalReport>(&p).ok()?.per_class_ap.get(&c).copied()
                })
                .collect();
            if !vals.is_empty() {
                mean_ap.insert(c, vals.iter().sum::<f64>() / vals.len() as f64);
            }
        }
        rows.push(BenchRow {
            extractor: spec.name.clone(),
            cells_ok: ok.len(),
            mean_map: mean(&|c| c.map.unwrap_or(0.0)),
            mean_steps: mean(&|c| c.avg_steps.unwrap_or(0.0)),
            mean_ap,
        });
    }
    let usable: Vec<&BenchRow> = rows.iter().filter(|r| r.mean_map.is_some()).collect();
    let rho = if usable.len() >= 2 {
        let maps: Vec<f64> = usable.iter().filter_map(|r| r.mean_map).collect();
        let steps: Vec<f64> = usable.iter().filter_map(|r| r.mean_steps).collect();
        spearman(&maps, &steps)
    } else {
        None
    };
    let report = BenchReport {
        cells,
        rows,
        rho,
        reference_rho: REFERENCE_RHO,
    };
    write_json(&out_dir.join("report.json"), &report)?;
    let md = out_dir.join("report.md");
    fs::write(&md, report.to_markdown()).map_err(|e| Error::io(&md, e))?;
    Ok(report)
}
