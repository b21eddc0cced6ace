//! Command-line surface: subcommands, run configuration, run directories and
//! report emission.
//!
//! Exit codes: 0 success, 2 validation failure, 3 numeric failure, 4 I/O.
//! Failures are printed to stderr as one JSON object.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checks::{self, Suite};
use crate::encoder::EncoderConfig;
use crate::ingest::{self, data_hash, procedural, IngestError, ProceduralFormat};
use crate::metrics::{procedural_report, story_metrics, MetricsError, ProceduralReport, StoryOutput, StoryReport};
use crate::schema::{ProceduralExample, RecreationPolicy};
use crate::story::{train_story_stage, StoryCheckpoint, StoryConfig};
use crate::trainer::{augment, augmentation_pipeline, train_stage, Checkpoint, RunManifest, TrainConfig, TrainError};

/// Environment variable overriding `output_dir` of every run.
pub const OUTPUT_ROOT_ENV: &str = "PROCTRACK_OUTPUT_ROOT";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Numeric(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Io(_) => 4,
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            CliError::Validation(_) => "validation",
            CliError::Numeric(_) => "numeric",
            CliError::Io(_) => "io",
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::json!({
            "error": { "code": self.code(), "exit": self.exit_code(), "message": self.to_string() }
        })
        .to_string()
    }
}

impl From<IngestError> for CliError {
    fn from(e: IngestError) -> Self {
        match e {
            IngestError::Io { .. } => CliError::Io(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        if e.is_numeric() {
            CliError::Numeric(e.to_string())
        } else {
            CliError::Validation(e.to_string())
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::Validation(e.to_string())
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn read(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| io_err(path, e))
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

fn pretty<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

#[derive(Debug, Parser)]
#[command(name = "proctrack", version, about = "Entity state tracking for procedural text and story pairs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Procedural,
    Story,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GradcheckModule {
    Numerics,
    Crf,
    Encoder,
    Story,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SynthFormat {
    Jsonl,
    Tsv,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse and validate a data file.
    Ingest {
        #[arg(long)]
        check: PathBuf,
    },
    /// Train from a JSON run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Predict timelines or story outputs with a checkpoint.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate predictions against gold data.
    Eval {
        #[arg(long)]
        gold: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Also write the report as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Pseudo-label an unannotated pool with a procedural checkpoint.
    Augment {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        pool: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run finite-difference gradient checks.
    Gradcheck {
        #[arg(long, value_enum, default_value = "all")]
        module: GradcheckModule,
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Emit a synthetic corpus.
    Synth {
        #[arg(long, default_value_t = 8)]
        paragraphs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "procedural")]
        task: Task,
        /// Unannotated paragraphs to append (procedural only).
        #[arg(long, default_value_t = 0)]
        pool: usize,
        #[arg(long, value_enum, default_value = "jsonl")]
        format: SynthFormat,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub train: PathBuf,
    #[serde(default)]
    pub dev: Option<PathBuf>,
    #[serde(default)]
    pub test: Option<PathBuf>,
    /// Unannotated paragraphs for augmentation.
    #[serde(default)]
    pub pool: Option<PathBuf>,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

/// Everything a training run needs. Relative paths resolve against the
/// directory of the configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    pub name: String,
    pub data: DataPaths,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub encoder: EncoderConfig,
    /// Procedural training, including ablation flags.
    #[serde(default)]
    pub train: TrainConfig,
    /// Story training.
    #[serde(default)]
    pub story: StoryConfig,
    /// Gold run, pseudo-labeling of `data.pool`, then a second run.
    #[serde(default)]
    pub augment: bool,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CliError::Validation(format!("run config: {e}")))?;
        cfg.encoder.validate().map_err(|e| CliError::Validation(format!("encoder: {e}")))?;
        cfg.train.validate()?;
        cfg.story.validate()?;
        if cfg.name.is_empty() || cfg.name.contains(['/', '\\']) {
            return Err(CliError::Validation(format!("run name '{}' is not a plain directory name", cfg.name)));
        }
        if cfg.augment && (cfg.task != Task::Procedural || cfg.data.pool.is_none()) {
            return Err(CliError::Validation("augment needs task 'procedural' and data.pool".into()));
        }
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        join(&mut self.data.train);
        for p in [&mut self.data.dev, &mut self.data.test, &mut self.data.pool].into_iter().flatten() {
            join(p);
        }
        join(&mut self.output_dir);
    }

    /// Run directory, honoring the output-root override.
    pub fn run_dir(&self) -> PathBuf {
        let root = std::env::var_os(OUTPUT_ROOT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| self.output_dir.clone());
        root.join(&self.name)
    }
}

/// Whether a file holds story pairs: its first line is an attribute header.
fn is_story_file(text: &str) -> bool {
    text.lines()
        .find(|l| !l.trim().is_empty())
        .and_then(|l| serde_json::from_str::<serde_json::Value>(l).ok())
        .is_some_and(|v| v.get("attributes").is_some() && v.get("para_id").is_none())
}

fn load_gold_procedural(path: &Path) -> Result<Vec<ProceduralExample>, CliError> {
    Ok(ingest::load_procedural(path, ProceduralFormat::from_path(path), RecreationPolicy::Reject)?.examples)
}

fn parse_story_outputs(text: &str) -> Result<Vec<StoryOutput>, CliError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| CliError::Validation(format!("line {}: {e}", i + 1)))
        })
        .collect()
}

/// A procedural or story report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", content = "report", rename_all = "snake_case")]
pub enum Report {
    Procedural(ProceduralReport),
    Story(StoryReport),
}

impl Report {
    pub fn to_table(&self) -> String {
        match self {
            Report::Procedural(r) => r.to_table(),
            Report::Story(r) => r.to_table(),
        }
    }

    pub fn to_csv(&self) -> String {
        match self {
            Report::Procedural(r) => r.to_csv(),
            Report::Story(r) => r.to_csv(),
        }
    }
}

/// Evaluates a prediction file against a gold file.
pub fn evaluate_files(gold: &Path, pred: &Path) -> Result<Report, CliError> {
    let gold_text = read(gold)?;
    if is_story_file(&gold_text) {
        let ds = ingest::story::parse(&gold_text, "gold".into())?;
        let outputs = parse_story_outputs(&read(pred)?)?;
        Ok(Report::Story(story_metrics(&ds.registry, &ds.split.examples, &outputs)?))
    } else {
        let g = load_gold_procedural(gold)?;
        let p = ingest::load_predictions(pred)?;
        Ok(Report::Procedural(procedural_report(&g, &p)))
    }
}

/// Checkpoint of either task.
pub enum AnyCheckpoint {
    Procedural(Checkpoint),
    Story(StoryCheckpoint),
}

pub fn load_checkpoint(path: &Path) -> Result<AnyCheckpoint, CliError> {
    let text = read(path)?;
    let task = serde_json::from_str::<serde_json::Value>(&text)
        .map_err(|e| CliError::Validation(format!("checkpoint {}: {e}", path.display())))?
        .get("task")
        .and_then(|t| t.as_str().map(str::to_string));
    match task.as_deref() {
        Some("procedural") => Ok(AnyCheckpoint::Procedural(Checkpoint::from_json(&text)?)),
        Some("story") => Ok(AnyCheckpoint::Story(StoryCheckpoint::from_json(&text)?)),
        other => Err(CliError::Validation(format!("checkpoint task {other:?} is not recognized"))),
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Ingest { check } => ingest_check(&check),
        Command::Train { config } => train(&config).map(|summary| println!("{}", summary)),
        Command::Predict { model, data, out } => predict(&model, &data, &out),
        Command::Eval { gold, pred, report, csv } => {
            let r = evaluate_files(&gold, &pred)?;
            write(&report, &pretty(&r))?;
            if let Some(csv) = csv {
                write(&csv, &r.to_csv())?;
            }
            print!("{}", r.to_table());
            Ok(())
        }
        Command::Augment { model, pool, out } => {
            let AnyCheckpoint::Procedural(ck) = load_checkpoint(&model)? else {
                return Err(CliError::Validation("augment needs a procedural checkpoint".into()));
            };
            let model = ck.into_model()?;
            let pool = load_gold_procedural(&pool)?;
            let (labels, skipped) = augment(&model, &pool)?;
            for id in &skipped {
                eprintln!("warning: skipped paragraph '{id}': no entity list");
            }
            write(&out, &procedural::to_jsonl(&labels, true))?;
            println!("{}", serde_json::json!({ "labeled": labels.len(), "skipped": skipped }));
            Ok(())
        }
        Command::Gradcheck { module, instances, seed } => {
            let suites: Vec<Suite> = match module {
                GradcheckModule::Numerics => vec![Suite::Numerics],
                GradcheckModule::Crf => vec![Suite::Crf],
                GradcheckModule::Encoder => vec![Suite::Encoder],
                GradcheckModule::Story => vec![Suite::Story],
                GradcheckModule::All => Suite::ALL.to_vec(),
            };
            let reports: Vec<_> = suites.into_iter().map(|s| checks::run(s, instances, seed)).collect();
            let max = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
            let passed = reports.iter().all(|r| r.passed);
            println!("{}", pretty(&serde_json::json!({ "passed": passed, "max_rel_err": max, "suites": reports })));
            if passed {
                Ok(())
            } else {
                Err(CliError::Numeric("gradient check failed".into()))
            }
        }
        Command::Synth {
            paragraphs,
            seed,
            task,
            pool,
            format,
            out,
        } => {
            let text = match task {
                Task::Procedural => {
                    let mut ex = ingest::synth::corpus("synth", paragraphs, &Default::default(), seed).examples;
                    let pool_ex = ingest::synth::pool(pool, &Default::default(), seed.wrapping_add(1)).examples;
                    match format {
                        SynthFormat::Jsonl => {
                            ex.extend(pool_ex);
                            procedural::to_jsonl(&ex, false)
                        }
                        SynthFormat::Tsv if pool_ex.is_empty() => procedural::to_grid(&ex),
                        SynthFormat::Tsv => {
                            return Err(CliError::Validation("the grid format cannot hold unannotated paragraphs".into()))
                        }
                    }
                }
                Task::Story => {
                    if format == SynthFormat::Tsv {
                        return Err(CliError::Validation("story pairs are JSONL only".into()));
                    }
                    let ds = ingest::synth::story_corpus(&Default::default(), paragraphs, seed);
                    ingest::story::to_jsonl(&ds.registry, &ds.split.examples)
                }
            };
            match out {
                Some(path) => write(&path, &text),
                None => {
                    print!("{text}");
                    Ok(())
                }
            }
        }
    }
}

fn ingest_check(path: &Path) -> Result<(), CliError> {
    let text = read(path)?;
    let hash = data_hash(text.as_bytes());
    let summary = if is_story_file(&text) {
        let ds = ingest::story::parse(&text, "check".into())?;
        serde_json::json!({
            "kind": "story",
            "attributes": ds.registry.len(),
            "stats": ds.split.stats(),
            "data_hash": hash,
        })
    } else {
        let split = ingest::load_procedural(path, ProceduralFormat::from_path(path), RecreationPolicy::Reject)?;
        serde_json::json!({
            "kind": "procedural",
            "annotated": split.annotated().count(),
            "unannotated": split.pool().count(),
            "stats": split.stats(),
            "data_hash": hash,
        })
    };
    println!("{}", pretty(&summary));
    Ok(())
}

fn predict(model: &Path, data: &Path, out: &Path) -> Result<(), CliError> {
    let text = match load_checkpoint(model)? {
        AnyCheckpoint::Procedural(ck) => {
            let model = ck.into_model()?;
            let examples = load_gold_procedural(data)?;
            procedural::to_jsonl(&model.predict_all(&examples)?, true)
        }
        AnyCheckpoint::Story(ck) => {
            let model = ck.into_model()?;
            let ds = ingest::load_story(data)?;
            story_outputs_jsonl(&model.predict_all(&ds.split.examples)?)
        }
    };
    write(out, &text)
}

fn story_outputs_jsonl(outputs: &[StoryOutput]) -> String {
    outputs
        .iter()
        .map(|o| serde_json::to_string(o).expect("serializable") + "\n")
        .collect()
}

fn write_stage(dir: &Path, checkpoint: &str, manifest: &RunManifest) -> Result<(), CliError> {
    write(&dir.join("checkpoint.json"), checkpoint)?;
    write(&dir.join("history.json"), &pretty(&manifest.history))?;
    write(&dir.join("manifest.json"), &pretty(manifest))
}

/// Runs a configured training job and returns a JSON summary.
pub fn train(config_path: &Path) -> Result<String, CliError> {
    let written = RunConfig::from_json(&read(config_path)?)?;
    let mut cfg = written.clone();
    cfg.resolve(config_path.parent().unwrap_or(Path::new(".")));
    let dir = cfg.run_dir();
    std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    // recorded as written so that artifacts do not depend on where they live
    write(&dir.join("config.json"), &pretty(&written))?;
    let eval_path = cfg.data.test.clone().or_else(|| cfg.data.dev.clone());

    let (checkpoint_json, mut manifest, predictions) = match cfg.task {
        Task::Procedural => {
            let train = load_gold_procedural(&cfg.data.train)?;
            let dev = cfg.data.dev.as_deref().map(load_gold_procedural).transpose()?;
            let stage = if cfg.augment {
                let pool_path = cfg.data.pool.as_deref().expect("checked in from_json");
                let pool = load_gold_procedural(pool_path)?;
                let run = augmentation_pipeline(cfg.encoder, &train, &pool, dev.as_deref(), &cfg.train)?;
                write_stage(&dir.join("gold"), &run.gold.checkpoint.to_json(), &run.gold.manifest)?;
                write(&dir.join("pseudo").join("pseudo_labels.jsonl"), &procedural::to_jsonl(&run.pseudo_labels, true))?;
                write(&dir.join("pseudo").join("manifest.json"), &pretty(&run.label_manifest))?;
                run.augmented
            } else {
                train_stage("gold", cfg.encoder, &train, dev.as_deref(), &cfg.train, cfg.train.epochs, Vec::new())?
            };
            let predictions = match &eval_path {
                Some(p) => Some(procedural::to_jsonl(&stage.model.predict_all(&load_gold_procedural(p)?)?, true)),
                None => None,
            };
            (stage.checkpoint.to_json(), stage.manifest, predictions)
        }
        Task::Story => {
            let train = ingest::load_story(&cfg.data.train)?;
            let dev = cfg.data.dev.as_deref().map(ingest::load_story).transpose()?;
            let (model, ck, manifest) = train_story_stage(
                cfg.encoder,
                &train.registry,
                &train.split.examples,
                dev.as_ref().map(|d| d.split.examples.as_slice()),
                &cfg.story,
            )?;
            let predictions = match &eval_path {
                Some(p) => Some(story_outputs_jsonl(&model.predict_all(&ingest::load_story(p)?.split.examples)?)),
                None => None,
            };
            (ck.to_json(), manifest, predictions)
        }
    };
    let run_config = serde_json::to_value(&written).expect("serializable");
    manifest.notes.push(format!("run config hash {}", crate::trainer::json_hash(&run_config)));
    if let (Some(gold), Some(pred)) = (&eval_path, predictions) {
        let pred_path = dir.join("predictions.jsonl");
        write(&pred_path, &pred)?;
        let report = evaluate_files(gold, &pred_path)?;
        write(&dir.join("report.json"), &pretty(&report))?;
        write(&dir.join("report.txt"), &report.to_table())?;
        write(&dir.join("report.csv"), &report.to_csv())?;
        manifest.data_hashes.insert("eval".into(), data_hash(read(gold)?.as_bytes()));
        if let serde_json::Value::Object(m) = &mut manifest.final_metrics {
            m.insert("eval".into(), serde_json::to_value(&report).expect("serializable"));
        }
    }
    write_stage(&dir, &checkpoint_json, &manifest)?;
    Ok(serde_json::json!({
        "run_dir": dir,
        "checkpoint_hash": manifest.checkpoint_hash,
        "manifest_hash": manifest.manifest_hash(),
    })
    .to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_config_rejects_unknown_keys() {
        let ok = r#"{"task":"procedural","name":"r","data":{"train":"t.jsonl"}}"#;
        assert!(RunConfig::from_json(ok).is_ok());
        let bad = r#"{"task":"procedural","name":"r","data":{"train":"t.jsonl"},"lr":1}"#;
        assert!(matches!(RunConfig::from_json(bad), Err(CliError::Validation(_))));
        let aug = r#"{"task":"procedural","name":"r","data":{"train":"t.jsonl"},"augment":true}"#;
        assert!(RunConfig::from_json(aug).is_err());
    }

    #[test]
    fn errors_map_to_exit_codes() {
        let e = CliError::Numeric("x".into());
        assert_eq!(e.exit_code(), 3);
        let v: serde_json::Value = serde_json::from_str(&e.to_json()).unwrap();
        assert_eq!(v["error"]["code"], "numeric");
        let io: CliError = IngestError::Io {
            path: "p".into(),
            source: std::io::Error::other("gone"),
        }
        .into();
        assert_eq!(io.exit_code(), 4);
    }

    #[test]
    fn story_files_are_sniffed() {
        assert!(is_story_file("{\"attributes\":[]}\n"));
        assert!(!is_story_file("{\"para_id\":\"p\"}\n"));
    }
}
