//! Experiment harness: config handling, pipeline orchestration, artifact
//! persistence, and machine-readable logging.
//!
//! All artifacts are reproducible: given the same config, reruns produce
//! byte-identical datasets, checkpoints, and result files. Nothing in any
//! output path reads the clock or OS entropy.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::datasynth::{
    generate_cohorts_with, read_cohort_jsonl, write_cohort_jsonl, Cohort, ShiftSpec, SynthOptions,
};
use crate::error::{Error, Result};
use crate::eval;
use crate::model::{load_checkpoint, save_checkpoint, ModelParams};
use crate::training::{
    self, adapt, crossvalidate_with_pretrained, inject_source_samples, pretrain, EpochLog, Method,
    TrainConfig,
};

/// Verbosity, from the `UDAMA_LOG` environment variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd)]
pub enum LogLevel {
    Quiet,
    Info,
    Debug,
}

pub fn log_level() -> LogLevel {
    match std::env::var("UDAMA_LOG").as_deref() {
        Ok("quiet") => LogLevel::Quiet,
        Ok("debug") => LogLevel::Debug,
        _ => LogLevel::Info,
    }
}

fn emit(level: LogLevel, event: &impl Serialize) {
    if log_level() >= level {
        if let Ok(line) = serde_json::to_string(event) {
            eprintln!("{line}");
        }
    }
}

fn emit_epochs(logs: &[EpochLog]) {
    #[derive(Serialize)]
    struct EpochEvent<'a> {
        event: &'static str,
        #[serde(flatten)]
        log: &'a EpochLog,
    }
    for log in logs {
        emit(LogLevel::Info, &EpochEvent { event: "epoch", log });
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub shift: ShiftSpec,
    pub synth: SynthOptions,
    pub train: TrainConfig,
    pub methods: Vec<Method>,
    pub output_dir: PathBuf,
    pub histogram_bins: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            shift: ShiftSpec::default(),
            synth: SynthOptions::default(),
            train: TrainConfig::default(),
            methods: vec![Method::Scratch, Method::Tf, Method::Udama],
            output_dir: PathBuf::from("out"),
            histogram_bins: eval::DEFAULT_HELLINGER_BINS,
        }
    }
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Parse { path: path.display().to_string(), detail: e.to_string() })?;
        Ok(cfg)
    }

    /// Flag-level overrides take precedence over file values.
    pub fn apply_overrides(&mut self, seed: Option<u64>, out: Option<PathBuf>) {
        if let Some(seed) = seed {
            self.shift.seed = seed;
            self.train.seed = seed;
        }
        if let Some(out) = out {
            self.output_dir = out;
        }
    }

    /// Rejects invalid configs before any training starts.
    pub fn validate(&self) -> Result<()> {
        self.shift.validate()?;
        self.train.validate()?;
        if self.methods.is_empty() {
            return Err(Error::config("methods must be non-empty"));
        }
        if self.histogram_bins < 2 {
            return Err(Error::config("histogram_bins must be >= 2"));
        }
        Ok(())
    }

    fn source_path(&self) -> PathBuf {
        self.output_dir.join("source.jsonl")
    }

    fn target_path(&self) -> PathBuf {
        self.output_dir.join("target.jsonl")
    }
}

// ── Artifacts ────────────────────────────────────────────────────────

#[derive(Debug, Serialize, Deserialize)]
struct FileDigest {
    name: String,
    sha256: String,
    lines: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    shift: ShiftSpec,
    synth: SynthOptions,
    files: Vec<FileDigest>,
}

fn sha256_hex(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let json = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Parse { path: path.display().to_string(), detail: e.to_string() })?;
    std::fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))
}

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path.display().to_string(), e))
}

fn count_lines(path: &Path) -> Result<usize> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(text.lines().count())
}

/// Generates both cohorts and writes `source.jsonl`, `target.jsonl`, and a
/// `manifest.json` recording the spec and content hashes.
pub fn cmd_generate(config: &ExperimentConfig) -> Result<()> {
    config.validate()?;
    ensure_dir(&config.output_dir)?;
    let (source, target) = generate_cohorts_with(&config.shift, &config.synth)?;
    write_cohort_jsonl(&config.source_path(), &source)?;
    write_cohort_jsonl(&config.target_path(), &target)?;

    let mut files = Vec::new();
    for path in [config.source_path(), config.target_path()] {
        files.push(FileDigest {
            name: path.file_name().unwrap().to_string_lossy().into_owned(),
            sha256: sha256_hex(&path)?,
            lines: count_lines(&path)?,
        });
    }
    files.sort_by(|a, b| a.name.cmp(&b.name));
    let manifest =
        Manifest { shift: config.shift.clone(), synth: config.synth.clone(), files };
    write_json(&config.output_dir.join("manifest.json"), &manifest)?;
    emit(LogLevel::Info, &serde_json::json!({
        "event": "generated",
        "source": config.source_path(),
        "target": config.target_path(),
    }));
    Ok(())
}

fn load_or_generate(config: &ExperimentConfig) -> Result<(Cohort, Cohort)> {
    if config.source_path().exists() && config.target_path().exists() {
        let source = read_cohort_jsonl(&config.source_path(), "source")?;
        let target = read_cohort_jsonl(&config.target_path(), "target")?;
        Ok((source, target))
    } else {
        cmd_generate(config)?;
        let source = read_cohort_jsonl(&config.source_path(), "source")?;
        let target = read_cohort_jsonl(&config.target_path(), "target")?;
        Ok((source, target))
    }
}

/// Stage 1 as a standalone command; saves `pretrained.json`.
pub fn cmd_pretrain(config: &ExperimentConfig) -> Result<PathBuf> {
    config.validate()?;
    let (source, _) = load_or_generate(config)?;
    let run = pretrain(&source, &config.train)?;
    emit_epochs(&run.log);
    let path = config.output_dir.join("pretrained.json");
    save_checkpoint(&run.params, &path)?;
    emit(LogLevel::Info, &serde_json::json!({ "event": "checkpoint", "path": path }));
    Ok(path)
}

/// Stage 2 as a standalone command: adapts a pretrained checkpoint on the
/// full target cohort (plus injected source samples); saves `adapted.json`.
pub fn cmd_adapt(config: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<PathBuf> {
    config.validate()?;
    let (source, target) = load_or_generate(config)?;
    let default_ckpt = config.output_dir.join("pretrained.json");
    let ckpt_path = checkpoint.unwrap_or(&default_ckpt);
    let pretrained = load_checkpoint(ckpt_path)?;
    let train_refs: Vec<_> = target.windows.iter().collect();
    let augmented = inject_source_samples(
        &source,
        &train_refs,
        config.train.injection_fraction,
        config.train.seed,
    )?;
    let run = adapt(&pretrained, &augmented, &config.train)?;
    emit_epochs(&run.log);
    let path = config.output_dir.join("adapted.json");
    save_checkpoint(&run.params, &path)?;
    emit(LogLevel::Info, &serde_json::json!({ "event": "checkpoint", "path": path }));
    Ok(path)
}

/// Metrics of one checkpoint on one dataset, plus the prediction/truth
/// histogram pair behind the Hellinger distance.
#[derive(Debug, Serialize, Deserialize)]
pub struct Evaluation {
    pub n: usize,
    pub r2: f64,
    pub corr: f64,
    pub mse: f64,
    pub mae: f64,
    pub hellinger: f64,
    pub histogram: HistogramPair,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct HistogramPair {
    pub range: (f64, f64),
    pub bins: usize,
    pub pred: Vec<f64>,
    pub truth: Vec<f64>,
}

/// Evaluates a checkpoint on a dataset file and writes `evaluation.json`.
pub fn cmd_evaluate(
    config: &ExperimentConfig,
    checkpoint: &Path,
    dataset: &Path,
) -> Result<Evaluation> {
    let params = load_checkpoint(checkpoint)?;
    let cohort = read_cohort_jsonl(dataset, "eval")?;
    let refs: Vec<_> = cohort.windows.iter().collect();
    let truth: Vec<f64> = refs.iter().map(|w| w.y).collect();
    let pred = crate::model::predict_batch(&params, &refs)?;
    let (r2, corr, mse, mae) = eval::compute_metrics(&pred, &truth)?;

    let bins = config.histogram_bins;
    let range = eval::union_range(&pred, &truth)?;
    let pred_hist = eval::label_histogram(&pred, bins, range)?;
    let truth_hist = eval::label_histogram(&truth, bins, range)?;
    let hellinger = eval::hellinger_from_histograms(&pred_hist, &truth_hist)?;

    let evaluation = Evaluation {
        n: refs.len(),
        r2,
        corr,
        mse,
        mae,
        hellinger,
        histogram: HistogramPair { range, bins, pred: pred_hist, truth: truth_hist },
    };
    ensure_dir(&config.output_dir)?;
    write_json(&config.output_dir.join("evaluation.json"), &evaluation)?;
    emit(LogLevel::Info, &serde_json::json!({
        "event": "evaluated",
        "n": evaluation.n,
        "corr": evaluation.corr,
        "hellinger": evaluation.hellinger,
    }));
    Ok(evaluation)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub metrics: training::FoldMetrics,
    pub checkpoint: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: String,
    pub report: eval::MetricsReport,
    pub folds: Vec<FoldResult>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ExperimentResults {
    pub partial: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub config: ExperimentConfig,
    pub methods: Vec<MethodResult>,
}

const CSV_HEADER: &str = "Method,R2,R2_std,Corr,Corr_std,MSE,MSE_std,MAE,MAE_std";

fn results_csv(methods: &[MethodResult]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for m in methods {
        let r = &m.report;
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            m.method,
            r.r2.mean,
            r.r2.std,
            r.corr.mean,
            r.corr.std,
            r.mse.mean,
            r.mse.std,
            r.mae.mean,
            r.mae.std,
        ));
    }
    out
}

/// Runs every requested method through cross-validation and writes
/// `results.csv`, `results.json`, and per-fold checkpoints. Rows are sorted
/// by method name. On a mid-run failure the partial results are written
/// with `partial = true` and the error is propagated.
pub fn cmd_experiment(config: &ExperimentConfig) -> Result<ExperimentResults> {
    config.validate()?;
    let (source, target) = load_or_generate(config)?;
    let ckpt_dir = config.output_dir.join("checkpoints");
    ensure_dir(&ckpt_dir)?;

    let mut methods: Vec<Method> = config.methods.clone();
    methods.sort_by_key(|m| m.name());
    methods.dedup();

    let mut shared_pretrain: Option<ModelParams> = None;
    let mut done: Vec<MethodResult> = Vec::new();
    let mut failure: Option<Error> = None;

    for method in methods {
        emit(LogLevel::Debug, &serde_json::json!({ "event": "method_start", "method": method.name() }));
        if method.needs_pretraining() && shared_pretrain.is_none() {
            match pretrain(&source, &config.train) {
                Ok(run) => {
                    emit_epochs(&run.log);
                    shared_pretrain = Some(run.params);
                }
                Err(e) => {
                    failure = Some(e);
                    break;
                }
            }
        }
        let outcome = match crossvalidate_with_pretrained(
            &target,
            &source,
            &config.train,
            method,
            shared_pretrain.as_ref(),
        ) {
            Ok(o) => o,
            Err(e) => {
                failure = Some(e);
                break;
            }
        };
        let mut folds = Vec::with_capacity(outcome.folds.len());
        for f in &outcome.folds {
            let name = format!("{}_fold{}.json", method.name(), f.split.fold);
            save_checkpoint(&f.params, &ckpt_dir.join(&name))?;
            emit(LogLevel::Info, &serde_json::json!({
                "event": "fold_done",
                "method": method.name(),
                "fold": f.split.fold,
                "corr": f.metrics.corr,
                "mse": f.metrics.mse,
            }));
            folds.push(FoldResult {
                fold: f.split.fold,
                n_train: f.split.train_ids.len(),
                n_test: f.split.test_ids.len(),
                metrics: f.metrics.clone(),
                checkpoint: format!("checkpoints/{name}"),
            });
        }
        done.push(MethodResult { method: method.name().to_string(), report: outcome.report, folds });
    }

    let results = ExperimentResults {
        partial: failure.is_some(),
        error: failure.as_ref().map(|e| e.to_string()),
        config: config.clone(),
        methods: done,
    };
    write_json(&config.output_dir.join("results.json"), &results)?;
    let csv = results_csv(&results.methods);
    let csv_path = config.output_dir.join("results.csv");
    let mut file = std::fs::File::create(&csv_path)
        .map_err(|e| Error::io(csv_path.display().to_string(), e))?;
    file.write_all(csv.as_bytes()).map_err(|e| Error::io(csv_path.display().to_string(), e))?;

    match failure {
        Some(e) => Err(e),
        None => Ok(results),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_and_overrides() {
        let mut cfg = ExperimentConfig::default();
        assert_eq!(cfg.shift.n_source, 2000);
        assert_eq!(cfg.train.folds, 3);
        cfg.apply_overrides(Some(7), Some(PathBuf::from("elsewhere")));
        assert_eq!(cfg.shift.seed, 7);
        assert_eq!(cfg.train.seed, 7);
        assert_eq!(cfg.output_dir, PathBuf::from("elsewhere"));
    }

    #[test]
    fn config_file_roundtrip_partial_fields() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        std::fs::write(
            &path,
            r#"{"shift": {"n_source": 12, "n_target": 6}, "methods": ["tf", "udama"]}"#,
        )
        .unwrap();
        let cfg = ExperimentConfig::from_file(&path).unwrap();
        assert_eq!(cfg.shift.n_source, 12);
        assert_eq!(cfg.shift.source_label_mean, 45.0, "unset fields keep defaults");
        assert_eq!(cfg.methods, vec![Method::Tf, Method::Udama]);
    }

    #[test]
    fn invalid_weights_rejected_before_training() {
        let mut cfg = ExperimentConfig::default();
        let json = r#"{"alpha": 1.0, "lambda1": 0.9, "lambda2": 0.9}"#;
        cfg.train.weights = serde_json::from_str(json).unwrap();
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("lambda1 + lambda2"), "{err}");
    }

    #[test]
    fn empty_methods_rejected() {
        let cfg = ExperimentConfig { methods: vec![], ..ExperimentConfig::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn csv_layout_is_fixed() {
        let csv = results_csv(&[]);
        assert_eq!(csv, format!("{CSV_HEADER}\n"));
    }
}
