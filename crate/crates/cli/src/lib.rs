//! `dkan` command-line driver: dataset synthesis and splitting, base
//! pretraining, distillation fine-tuning, evaluation, sweeps and reports.

pub mod config;
pub mod manifest;
pub mod render;

#[cfg(test)]
mod pipeline_tests;

use clap::{Args, Parser, Subcommand};
use config::{render_config, resolve, TrainArgs};
use dkan_core::dataset::{
    build_ifsnd_split, categories_by_name, generate_synthetic_dataset, neu_det_categories, parse_voc_annotations,
    read_partition_manifest, write_partition_manifest, write_voc_dataset, BoundingBox, CategoryId, DatasetError,
    DatasetPartition, DefectImage, SplitSpec, SynthConfig,
};
use dkan_core::detector::checkpoint::{load_checkpoint, save_checkpoint};
use dkan_core::detector::{DetectorError, MiniDetector};
use dkan_core::eval::{confusion_matrix, evaluate_groups, Detection, EvalReport, AP_IOU_THRESHOLD};
use dkan_core::train::{
    build_student, evaluate_model, finetune_dkan, finetune_data, pretrain_base, run_experiment, ExperimentReport,
    StepLog, TeacherSnapshot, TrainConfig, TrainError,
};
use manifest::RunManifest;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Environment variable naming the root directory for default outputs.
pub const OUTPUT_ROOT_ENV: &str = "DKAN_OUTPUT_ROOT";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("data: {0}")]
    Data(String),
    #[error("training diverged: {0}")]
    Divergence(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Divergence(_) => 3,
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Divergence { .. } => CliError::Divergence(e.to_string()),
            TrainError::Config(m) => CliError::Usage(m),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<DetectorError> for CliError {
    fn from(e: DetectorError) -> Self {
        CliError::Data(e.to_string())
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Data(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "dkan", version, about = "Incremental few-shot defect detection with dual knowledge alignment")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic defect dataset in VOC layout.
    Synth(SynthArgs),
    /// Build a base/novel partition manifest from a dataset.
    Split(SplitArgs),
    /// Train the base detector on base categories.
    Pretrain(PretrainArgs),
    /// Fine-tune a student against a frozen teacher checkpoint.
    Finetune(FinetuneArgs),
    /// Evaluate a checkpoint or a detections file on the test split.
    Eval(EvalArgs),
    /// Run experiments over a list of hyperparameter values.
    Sweep(SweepArgs),
    /// Compare evaluation reports.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 6)]
    pub categories: usize,
    #[arg(long, default_value_t = 60)]
    pub per_category: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 1)]
    pub max_instances: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    /// Dataset root (VOC layout).
    #[arg(long)]
    pub data: PathBuf,
    /// split1, split2 or split3.
    #[arg(long)]
    pub name: Option<String>,
    /// Explicit comma-separated base categories (with --novel).
    #[arg(long, value_delimiter = ',')]
    pub base: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    pub novel: Vec<String>,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 60)]
    pub test_per_category: usize,
    #[arg(long, default_value_t = 240)]
    pub base_per_category: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// Partition manifest written by `split`.
    #[arg(long)]
    pub partition: Option<PathBuf>,
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Print the effective config and exit.
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub partition: PathBuf,
    /// Base checkpoint written by `pretrain`.
    #[arg(long)]
    pub teacher: PathBuf,
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub partition: PathBuf,
    #[arg(long, conflicts_with = "detections", required_unless_present = "detections")]
    pub checkpoint: Option<PathBuf>,
    /// Line-delimited detections {image_id, category, x1, y1, x2, y2, confidence}.
    #[arg(long)]
    pub detections: Option<PathBuf>,
    #[arg(long, default_value_t = 0.3)]
    pub conf_threshold: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub partition: PathBuf,
    /// Base checkpoint; when absent the base detector is pretrained here.
    #[arg(long)]
    pub teacher: Option<PathBuf>,
    /// lambda1, lambda2, tau or alpha.
    #[arg(long)]
    pub param: String,
    #[arg(long, value_delimiter = ',')]
    pub values: Vec<f64>,
    #[arg(long, default_value_t = 1)]
    pub seeds: usize,
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Report files, each optionally tagged as `path=tag`.
    #[arg(required = true)]
    pub inputs: Vec<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn out_dir(given: &Option<PathBuf>, command: &str) -> Result<PathBuf, CliError> {
    let dir = match given {
        Some(p) => p.clone(),
        None => PathBuf::from(std::env::var(OUTPUT_ROOT_ENV).unwrap_or_else(|_| "runs".into())).join(command),
    };
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    Ok(dir)
}

fn write_text(path: &Path, text: &str) -> Result<PathBuf, CliError> {
    std::fs::write(path, text).map_err(io_err(path))?;
    Ok(path.to_path_buf())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<PathBuf, CliError> {
    write_text(path, &serde_json::to_string_pretty(value).expect("serializable"))
}

fn config_json(c: &TrainConfig) -> serde_json::Value {
    serde_json::to_value(c).expect("config serializes")
}

/// Categories of a dataset root: `categories.json` if present, NEU-DET
/// otherwise.
pub fn dataset_categories(root: &Path) -> Result<Vec<CategoryId>, CliError> {
    let path = root.join("categories.json");
    if !path.exists() {
        return Ok(neu_det_categories());
    }
    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    let names: Vec<String> =
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(names.into_iter().enumerate().map(|(i, n)| CategoryId::new(i, n)).collect())
}

pub fn load_dataset(root: &Path) -> Result<(Vec<CategoryId>, Vec<DefectImage>), CliError> {
    let cats = dataset_categories(root)?;
    let mut map: BTreeMap<String, CategoryId> = cats.iter().map(|c| (c.name.clone(), c.clone())).collect();
    if cats == neu_det_categories() {
        map = dkan_core::dataset::neu_det_name_map();
    }
    let report = parse_voc_annotations(root, &map)?;
    for r in &report.rejected {
        eprintln!("warning: skipped object {} of {}: {}", r.object_index, r.image_id, r.reason);
    }
    Ok((cats, report.images))
}

pub fn load_partition(path: &Path) -> Result<DatasetPartition, CliError> {
    if !path.exists() {
        return Err(CliError::Data(format!("partition manifest not found: {}", path.display())));
    }
    let m = read_partition_manifest(path)?;
    let (_, images) = load_dataset(&m.data_root)?;
    Ok(m.materialize(&images)?)
}

fn load_model(path: &Path, role: &str) -> Result<MiniDetector, CliError> {
    if !path.exists() {
        return Err(CliError::Data(format!("{role} checkpoint not found: {}", path.display())));
    }
    Ok(load_checkpoint(path)?.0)
}

fn write_log(path: &Path, log: &[StepLog]) -> Result<PathBuf, CliError> {
    let mut s = String::new();
    for l in log {
        s.push_str(&serde_json::to_string(l).expect("log serializes"));
        s.push('\n');
    }
    write_text(path, &s)
}

fn meta(pairs: &[(&str, serde_json::Value)]) -> serde_json::Map<String, serde_json::Value> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

pub fn cmd_synth(args: &SynthArgs) -> Result<PathBuf, CliError> {
    let out = out_dir(&args.out, "synth")?;
    let cfg = SynthConfig {
        num_categories: args.categories,
        images_per_category: args.per_category,
        image_size: args.size,
        max_instances_per_image: args.max_instances,
        primitives: None,
    };
    let images = generate_synthetic_dataset(&cfg, args.seed).map_err(|e| match e {
        DatasetError::InvalidSynthConfig(m) => CliError::Usage(m),
        other => other.into(),
    })?;
    write_voc_dataset(&out, &images)?;
    let names: Vec<String> = cfg.categories().into_iter().map(|c| c.name).collect();
    let cats = write_json(&out.join("categories.json"), &names)?;
    let mut m = RunManifest::new(
        "synth",
        serde_json::json!({
            "categories": args.categories,
            "per_category": args.per_category,
            "size": args.size,
            "max_instances": args.max_instances,
        }),
        vec![args.seed],
    );
    m.outputs = vec![out.join("images"), out.join("annotations"), cats];
    m.write(&out).map_err(io_err(&out))?;
    Ok(out)
}

pub fn split_spec(args: &SplitArgs, categories: &[CategoryId]) -> Result<SplitSpec, CliError> {
    match (&args.name, args.base.is_empty() && args.novel.is_empty()) {
        (Some(name), true) => {
            let valid: Vec<&str> = dkan_core::dataset::NAMED_SPLITS.iter().map(|s| s.0).collect();
            if !valid.contains(&name.as_str()) {
                return Err(CliError::Usage(format!("unknown split {name:?}; valid names: {}", valid.join(", "))));
            }
            Ok(SplitSpec::named(name, categories, args.k, args.seed)?)
        }
        (None, false) => {
            let base_names: Vec<&str> = args.base.iter().map(String::as_str).collect();
            let novel_names: Vec<&str> = args.novel.iter().map(String::as_str).collect();
            let base = categories_by_name(categories, &base_names).map_err(|e| CliError::Usage(e.to_string()))?;
            let novel = categories_by_name(categories, &novel_names).map_err(|e| CliError::Usage(e.to_string()))?;
            SplitSpec::new(base, novel, args.k, args.seed).map_err(|e| CliError::Usage(e.to_string()))
        }
        _ => Err(CliError::Usage("give either --name or both --base and --novel".into())),
    }
}

pub fn cmd_split(args: &SplitArgs) -> Result<PathBuf, CliError> {
    if args.k == 0 {
        return Err(CliError::Usage("--k must be at least 1".into()));
    }
    let (cats, images) = load_dataset(&args.data)?;
    let spec = split_spec(args, &cats)?;
    let partition = build_ifsnd_split(&images, &spec, args.test_per_category, args.base_per_category)?;
    let out = out_dir(&args.out, "split")?;
    let path = out.join("partition.jsonl");
    let root = args.data.canonicalize().map_err(io_err(&args.data))?;
    write_partition_manifest(&path, &root, &partition, args.test_per_category, args.base_per_category)?;
    let mut m = RunManifest::new("split", serde_json::to_value(&spec).expect("spec serializes"), vec![args.seed]);
    m.outputs = vec![path.clone()];
    m.write(&out).map_err(io_err(&out))?;
    println!(
        "test {} / base_train {} / novel_train {} images",
        partition.test.len(),
        partition.base_train.len(),
        partition.novel_train.len()
    );
    Ok(path)
}

pub fn cmd_pretrain(args: &PretrainArgs) -> Result<Option<PathBuf>, CliError> {
    let config = resolve(&args.train)?;
    if args.dry_run {
        print!("{}", render_config(&config));
        return Ok(None);
    }
    let part_path = args
        .partition
        .as_ref()
        .ok_or_else(|| CliError::Usage("--partition is required".into()))?;
    let partition = load_partition(part_path)?;
    let out = out_dir(&args.out, "pretrain")?;
    let mut log = Vec::new();
    let model = pretrain_base(&partition.base_train, &partition.spec.base_categories, &config, &mut |l| log.push(*l))?;
    let ckpt = out.join("base.ckpt");
    save_checkpoint(
        &ckpt,
        &model,
        meta(&[("stage", "pretrain".into()), ("seed", config.seed.into()), ("steps", log.len().into())]),
    )?;
    let mut m = RunManifest::new("pretrain", config_json(&config), vec![config.seed]);
    m.add_input(part_path).map_err(io_err(part_path))?;
    m.outputs = vec![
        ckpt.clone(),
        write_log(&out.join("train_log.jsonl"), &log)?,
        write_text(&out.join("config.cfg"), &render_config(&config))?,
    ];
    m.write(&out).map_err(io_err(&out))?;
    Ok(Some(ckpt))
}

pub fn cmd_finetune(args: &FinetuneArgs) -> Result<PathBuf, CliError> {
    let config = resolve(&args.train)?;
    let base = load_model(&args.teacher, "teacher")?;
    if base.config.input_size != config.input_size {
        return Err(CliError::Usage(format!(
            "input_size {} differs from the teacher's {}",
            config.input_size, base.config.input_size
        )));
    }
    let partition = load_partition(&args.partition)?.with_k_shot_seed(config.seed)?;
    let out = out_dir(&args.out, "finetune")?;
    let teacher = TeacherSnapshot::new(&base);
    let student = build_student(&base, &partition.spec.novel_categories, &config)?;
    let data = finetune_data(&partition, config.finetune_data_policy)?;
    let mut log = Vec::new();
    let student = finetune_dkan(student, &teacher, &data, &config, &mut |l| log.push(*l))?;
    let ckpt = out.join("student.ckpt");
    save_checkpoint(
        &ckpt,
        &student,
        meta(&[("stage", "finetune".into()), ("seed", config.seed.into()), ("steps", log.len().into())]),
    )?;
    let mut m = RunManifest::new("finetune", config_json(&config), vec![config.seed]);
    m.add_input(&args.partition).map_err(io_err(&args.partition))?;
    m.add_input(&args.teacher).map_err(io_err(&args.teacher))?;
    m.outputs = vec![
        ckpt.clone(),
        write_log(&out.join("train_log.jsonl"), &log)?,
        write_text(&out.join("config.cfg"), &render_config(&config))?,
    ];
    m.write(&out).map_err(io_err(&out))?;
    Ok(ckpt)
}

/// Flat detection record of the interchange file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: String,
    pub category: String,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub confidence: f64,
}

impl From<&Detection> for DetectionRecord {
    fn from(d: &Detection) -> Self {
        Self {
            image_id: d.image_id.clone(),
            category: d.category.name.clone(),
            x1: d.bbox.x1,
            y1: d.bbox.y1,
            x2: d.bbox.x2,
            y2: d.bbox.y2,
            confidence: d.confidence,
        }
    }
}

pub fn read_detections(path: &Path, categories: &[CategoryId]) -> Result<Vec<Detection>, CliError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let bad = |n: usize, m: String| CliError::Data(format!("{}:{}: {m}", path.display(), n + 1));
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            let r: DetectionRecord = serde_json::from_str(l).map_err(|e| bad(n, e.to_string()))?;
            let category = categories
                .iter()
                .find(|c| c.name == r.category)
                .ok_or_else(|| bad(n, format!("unknown category {}", r.category)))?
                .clone();
            if !(0.0..=1.0).contains(&r.confidence) {
                return Err(bad(n, format!("confidence {} outside [0, 1]", r.confidence)));
            }
            let bbox = BoundingBox::new(r.x1, r.y1, r.x2, r.y2).map_err(|e| bad(n, e.to_string()))?;
            Ok(Detection {
                image_id: r.image_id,
                category,
                bbox,
                confidence: r.confidence,
            })
        })
        .collect()
}

pub fn cmd_eval(args: &EvalArgs) -> Result<EvalReport, CliError> {
    let partition = load_partition(&args.partition)?;
    let out = out_dir(&args.out, "eval")?;
    let mut m = RunManifest::new("eval", serde_json::json!({ "conf_threshold": args.conf_threshold }), vec![]);
    m.add_input(&args.partition).map_err(io_err(&args.partition))?;
    let (mut report, dets) = match (&args.checkpoint, &args.detections) {
        (Some(ckpt), _) => {
            let model = load_model(ckpt, "evaluated")?;
            m.add_input(ckpt).map_err(io_err(ckpt))?;
            evaluate_model(&model, &partition)?
        }
        (None, Some(path)) => {
            let dets = read_detections(path, &partition.spec.all_categories())?;
            m.add_input(path).map_err(io_err(path))?;
            let r = evaluate_groups(&dets, &partition).map_err(|e| CliError::Data(e.to_string()))?;
            (r, dets)
        }
        (None, None) => return Err(CliError::Usage("give --checkpoint or --detections".into())),
    };
    report.confusion = confusion_matrix(&dets, &partition, args.conf_threshold, AP_IOU_THRESHOLD);
    let det_path = out.join("detections.jsonl");
    let mut f = std::io::BufWriter::new(std::fs::File::create(&det_path).map_err(io_err(&det_path))?);
    for d in &dets {
        writeln!(f, "{}", serde_json::to_string(&DetectionRecord::from(d)).expect("record serializes"))
            .map_err(io_err(&det_path))?;
    }
    drop(f);
    m.outputs = vec![
        write_json(&out.join("report.json"), &report)?,
        write_text(&out.join("report.md"), &render::report_table(&report))?,
        write_text(&out.join("confusion.svg"), &render::confusion_svg("confusion matrix", &report.confusion))?,
        det_path,
    ];
    m.write(&out).map_err(io_err(&out))?;
    print!("{}", render::report_table(&report));
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub experiment: ExperimentReport,
}

pub const SWEEP_PARAMS: [&str; 4] = ["lambda1", "lambda2", "tau", "alpha"];

pub fn apply_sweep_value(config: &TrainConfig, param: &str, value: f64) -> Result<TrainConfig, CliError> {
    let mut c = config.clone();
    let key = match param {
        "lambda1" => "lambda_fka",
        "lambda2" => "lambda_lka",
        "tau" | "alpha" => param,
        _ => {
            return Err(CliError::Usage(format!(
                "unknown sweep parameter {param:?}; valid: {}",
                SWEEP_PARAMS.join(", ")
            )))
        }
    };
    config::apply_setting(&mut c, key, &value.to_string())?;
    c.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(c)
}

/// One experiment per value. Without a base detector one is pretrained
/// from the partition; for `alpha` that happens once per value.
pub fn sweep(
    partition: &DatasetPartition,
    base: Option<&MiniDetector>,
    param: &str,
    values: &[f64],
    config: &TrainConfig,
    seeds: usize,
) -> Result<Vec<SweepRow>, CliError> {
    if values.is_empty() {
        return Err(CliError::Usage("--values must not be empty".into()));
    }
    if seeds == 0 {
        return Err(CliError::Usage("--seeds must be at least 1".into()));
    }
    let configs: Vec<TrainConfig> = values
        .iter()
        .map(|&v| apply_sweep_value(config, param, v))
        .collect::<Result<_, _>>()?;
    let pretrain = |c: &TrainConfig| pretrain_base(&partition.base_train, &partition.spec.base_categories, c, &mut |_| {});
    let shared = match base {
        Some(b) => Some(b.clone()),
        None if param != "alpha" => Some(pretrain(config)?),
        None => None,
    };
    let mut rows = Vec::new();
    for (&value, c) in values.iter().zip(&configs) {
        let own;
        let b = match &shared {
            Some(b) => b,
            None => {
                own = pretrain(c)?;
                &own
            }
        };
        rows.push(SweepRow {
            value,
            experiment: run_experiment(partition, b, c, seeds),
        });
    }
    Ok(rows)
}

pub fn sweep_table(param: &str, rows: &[SweepRow]) -> String {
    let mut s = format!("| {param} | AP_B | AP_N | AP_All | seeds | failures |\n|---|---|---|---|---|---|\n");
    for r in rows {
        let (b, n, a) = r
            .experiment
            .mean
            .as_ref()
            .map_or((f64::NAN, f64::NAN, f64::NAN), |m| (m.ap_base, m.ap_novel, m.ap_all));
        s.push_str(&format!(
            "| {} | {:.1} | {:.1} | {:.1} | {} | {} |\n",
            r.value,
            100.0 * b,
            100.0 * n,
            100.0 * a,
            r.experiment.per_seed.len(),
            r.experiment.failures.len()
        ));
    }
    s
}

pub fn cmd_sweep(args: &SweepArgs) -> Result<Vec<SweepRow>, CliError> {
    let config = resolve(&args.train)?;
    let partition = load_partition(&args.partition)?;
    let base = match &args.teacher {
        Some(p) => Some(load_model(p, "teacher")?),
        None => None,
    };
    let rows = sweep(&partition, base.as_ref(), &args.param, &args.values, &config, args.seeds)?;
    let out = out_dir(&args.out, "sweep")?;
    let xs: Vec<f64> = rows.iter().map(|r| r.value).collect();
    let pick = |f: fn(&EvalReport) -> f64| rows.iter().map(|r| r.experiment.mean.as_ref().map_or(0.0, f)).collect::<Vec<_>>();
    let series = [
        ("AP_B", pick(|m| m.ap_base)),
        ("AP_N", pick(|m| m.ap_novel)),
        ("AP_All", pick(|m| m.ap_all)),
    ];
    let mut m = RunManifest::new(
        "sweep",
        serde_json::json!({ "param": args.param, "values": args.values, "base": config_json(&config) }),
        (0..args.seeds as u64).map(|i| config.seed + i).collect(),
    );
    m.add_input(&args.partition).map_err(io_err(&args.partition))?;
    if let Some(p) = &args.teacher {
        m.add_input(p).map_err(io_err(p))?;
    }
    m.outputs = vec![
        write_json(&out.join("sweep.json"), &rows)?,
        write_text(&out.join("sweep.md"), &sweep_table(&args.param, &rows))?,
        write_text(
            &out.join("sweep.svg"),
            &render::line_plot_svg(&format!("AP50 over {}", args.param), &args.param, &xs, &series),
        )?,
    ];
    m.write(&out).map_err(io_err(&out))?;
    print!("{}", sweep_table(&args.param, &rows));
    let failures: usize = rows.iter().map(|r| r.experiment.failures.len()).sum();
    if failures > 0 {
        return Err(CliError::Data(format!("{failures} seed runs failed; see sweep.json")));
    }
    Ok(rows)
}

/// Reads an evaluation report, accepting the mean of an experiment report.
pub fn read_report(path: &Path) -> Result<EvalReport, CliError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    if let Ok(r) = serde_json::from_str::<EvalReport>(&text) {
        return Ok(r);
    }
    let e: ExperimentReport =
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: not a report: {e}", path.display())))?;
    e.mean
        .ok_or_else(|| CliError::Data(format!("{}: experiment has no successful seeds", path.display())))
}

/// Comparison table, plus the loss ablation grid when the tags are exactly
/// none, fka, lka and both.
pub fn build_report(inputs: &[(String, EvalReport)]) -> Result<String, CliError> {
    let first = &inputs.first().ok_or_else(|| CliError::Usage("no reports given".into()))?.1;
    for (tag, r) in inputs {
        if r.base_categories != first.base_categories || r.novel_categories != first.novel_categories {
            return Err(CliError::Data(format!("report {tag} uses a different category split")));
        }
    }
    let rows: Vec<(String, &EvalReport)> = inputs.iter().map(|(t, r)| (t.clone(), r)).collect();
    let mut s = render::comparison_table(&rows);
    let get = |t: &str| inputs.iter().find(|(tag, _)| tag == t).map(|(_, r)| r);
    let mut tags: Vec<&str> = inputs.iter().map(|(t, _)| t.as_str()).collect();
    tags.sort_unstable();
    if tags == ["both", "fka", "lka", "none"] {
        let g = render::ablation_grid(get("none").unwrap(), get("fka").unwrap(), get("lka").unwrap(), get("both").unwrap());
        s.push('\n');
        s.push_str(&g);
    }
    Ok(s)
}

pub fn cmd_report(args: &ReportArgs) -> Result<String, CliError> {
    let mut inputs = Vec::new();
    let mut m = RunManifest::new("report", serde_json::json!({ "inputs": args.inputs }), vec![]);
    for spec in &args.inputs {
        let (path, tag) = match spec.rsplit_once('=') {
            Some((p, t)) => (PathBuf::from(p), t.to_string()),
            None => {
                let p = PathBuf::from(spec);
                let tag = p
                    .parent()
                    .and_then(|d| d.file_name())
                    .map_or_else(|| spec.clone(), |n| n.to_string_lossy().into_owned());
                (p, tag)
            }
        };
        m.add_input(&path).map_err(io_err(&path))?;
        inputs.push((tag, read_report(&path)?));
    }
    let table = build_report(&inputs)?;
    let out = out_dir(&args.out, "report")?;
    m.outputs.push(write_text(&out.join("report.md"), &table)?);
    for (tag, r) in &inputs {
        let safe: String = tag.chars().map(|c| if c.is_alphanumeric() || c == '-' { c } else { '_' }).collect();
        m.outputs.push(write_text(
            &out.join(format!("confusion_{safe}.svg")),
            &render::confusion_svg(&format!("confusion matrix: {tag}"), &r.confusion),
        )?);
    }
    m.write(&out).map_err(io_err(&out))?;
    print!("{table}");
    Ok(table)
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a).map(|p| println!("dataset written to {}", p.display())),
        Command::Split(a) => cmd_split(&a).map(|p| println!("partition written to {}", p.display())),
        Command::Pretrain(a) => cmd_pretrain(&a).map(|p| {
            if let Some(p) = p {
                println!("checkpoint written to {}", p.display())
            }
        }),
        Command::Finetune(a) => cmd_finetune(&a).map(|p| println!("checkpoint written to {}", p.display())),
        Command::Eval(a) => cmd_eval(&a).map(|_| ()),
        Command::Sweep(a) => cmd_sweep(&a).map(|_| ()),
        Command::Report(a) => cmd_report(&a).map(|_| ()),
    }
}

/// Parses arguments and runs; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
