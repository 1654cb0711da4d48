//! Implementations behind the `lorabox` subcommands.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use lorabox_core::eval::{
    accuracy, category_rows, f1, match_predictions, miou_categories, miou_samples, precision, recall, ConfusionCounts,
    MetricError,
};
use lorabox_core::iou::{iou_3d, monte_carlo_iou};
use lorabox_core::lora::LoraTarget;
use lorabox_core::model::{FusionModel, ModelError};
use lorabox_core::train::{predict_boxes, EpochLog, TrainError, Trainer, TrainingSample};
use lorabox_core::{Box7, GeomError};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{self, ConfigError, EvalRunConfig, IngestRunConfig, SynthRunConfig, TrainRunConfig};
use crate::formats::{self, EvalReport, FormatError};
use crate::scene::{self, Diagnostic, IngestError, IngestSummary, Processed, ProcessedSample};
use crate::synth::{synth_scenes, SynthError};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path} line {line}: {source}")]
    JsonLine { path: String, line: usize, source: serde_json::Error },
    #[error("{path}: {source}")]
    Json { path: String, source: serde_json::Error },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Geometry(#[from] GeomError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("{path}: {source}")]
    Format { path: String, source: FormatError },
    #[error("{0}")]
    Invalid(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.display().to_string(), source }
}

pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, contents).map_err(io_err(path))
}

fn read_file(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(io_err(path))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, CliError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|source| CliError::JsonLine { path: path.display().to_string(), line: i + 1, source })
        })
        .collect()
}

pub fn to_jsonl<T: Serialize>(items: &[T]) -> String {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).expect("serializable"));
        out.push('\n');
    }
    out
}

fn write_resolved<T: Serialize>(dir: &Path, command: &str, cfg: &T) -> Result<(), CliError> {
    write_file(&dir.join(format!("{command}.resolved.toml")), config::to_toml(cfg))
}

/// Text printed by `lorabox iou`.
pub fn cmd_iou(a: [f64; 7], b: [f64; 7], monte_carlo: Option<(u64, u64)>) -> Result<String, CliError> {
    let (pa, pb) = (Box7::from_array(a)?, Box7::from_array(b)?);
    let r = iou_3d(&pa, &pb);
    let mut out = format!("iou={:?}\nintersection={:?}\nunion={:?}\n", r.iou, r.intersection_volume, r.union_volume);
    if let Some((samples, seed)) = monte_carlo {
        if samples == 0 {
            return Err(CliError::Invalid("--mc-samples must be at least 1".into()));
        }
        let mc = monte_carlo_iou(&pa, &pb, samples, seed);
        let _ = writeln!(out, "mc_iou={:?}\nmc_std_error={:?}", mc.iou, mc.std_error);
    }
    Ok(out)
}

/// Result of the ingestion pipeline on one scene document.
#[derive(Debug, Clone, PartialEq)]
pub struct IngestOutcome {
    pub summary: IngestSummary,
    pub samples: Vec<ProcessedSample>,
    pub diagnostics: Vec<Diagnostic>,
}

pub fn run_ingest(text: &str, workers: usize) -> Result<IngestOutcome, IngestError> {
    let ingested = scene::ingest_str(text, workers)?;
    let mut diagnostics = ingested.rejected;
    let mut samples = Vec::new();
    let mut summary = IngestSummary { accepted: ingested.records.len(), rejected: diagnostics.len(), ..Default::default() };
    let rejected: std::collections::HashSet<usize> = diagnostics.iter().map(|d| d.index).collect();
    let original: Vec<usize> = (0..summary.accepted + summary.rejected).filter(|i| !rejected.contains(i)).collect();
    for processed in scene::process_all(&ingested.records, workers) {
        match processed {
            Processed::Samples(s) => samples.extend(s),
            Processed::Failed(mut d) => {
                d.index = original[d.index];
                summary.accepted -= 1;
                summary.rejected += 1;
                diagnostics.push(d);
            }
        }
    }
    summary.retained = samples.iter().filter(|s| s.retained).count();
    summary.dropped_invisible = samples.len() - summary.retained;
    diagnostics.sort_by_key(|d| d.index);
    Ok(IngestOutcome { summary, samples, diagnostics })
}

/// Writes processed samples as JSON lines to `cfg.out` and the resolved
/// config beside it.
pub fn cmd_ingest(cfg: &IngestRunConfig) -> Result<IngestOutcome, CliError> {
    let text = fs::read_to_string(&cfg.scenes).map_err(io_err(&cfg.scenes))?;
    let outcome = run_ingest(&text, cfg.workers)?;
    write_file(&cfg.out, to_jsonl(&outcome.samples))?;
    write_resolved(cfg.out.parent().unwrap_or(Path::new(".")), "ingest", cfg)?;
    Ok(outcome)
}

pub const SCENES_FILE: &str = "scenes.json";
pub const SAMPLES_FILE: &str = "samples.jsonl";

pub fn cmd_synth(cfg: &SynthRunConfig, out_dir: &Path) -> Result<(usize, usize), CliError> {
    let data = synth_scenes(&cfg.synth)?;
    write_file(&out_dir.join(SCENES_FILE), scene::emit(&data.records))?;
    write_file(&out_dir.join(SAMPLES_FILE), to_jsonl(&data.samples))?;
    write_resolved(out_dir, "synth", cfg)?;
    Ok((data.records.len(), data.samples.len()))
}

/// True for roughly one sample in ten, decided by a hash of the id.
pub fn in_validation_split(sample_id: &str) -> bool {
    let digest = Sha256::digest(sample_id.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes")) % 10 == 0
}

pub const MODEL_FILE: &str = "model.lbxm";
pub const LOG_FILE: &str = "train_log.jsonl";

fn target_name(t: LoraTarget) -> &'static str {
    match t {
        LoraTarget::Query => "q",
        LoraTarget::Key => "k",
        LoraTarget::Value => "v",
        LoraTarget::Output => "o",
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub logs: Vec<EpochLog>,
    pub train_samples: usize,
    pub val_samples: usize,
}

pub fn cmd_train(cfg: &TrainRunConfig, out_dir: &Path) -> Result<TrainOutcome, CliError> {
    let all: Vec<TrainingSample> = read_jsonl(&cfg.data.train)?;
    let (train, val): (Vec<_>, Vec<_>) = match &cfg.data.val {
        Some(path) => (all, read_jsonl(path)?),
        None => all.into_iter().partition(|s| !in_validation_split(&s.sample_id)),
    };
    write_resolved(out_dir, "train", cfg)?;
    let model = FusionModel::new(cfg.model.clone())?;
    let report = model.report();
    info!(
        "model: {} parameters, {} trainable ({} LoRA, {} projection and head), trainable fraction {:.6}",
        report.total_params,
        report.trainable_params(),
        report.lora_params,
        report.head_params,
        report.trainable_fraction()
    );
    let mut trainer = Trainer::new(model, cfg.trainer.clone(), &train)?;
    let mut log_text = String::new();
    let logs = trainer.fit(&train, &val, |log| {
        info!(
            "epoch {} stage {} loss {:.6} (mse {:.6}, iou {:.6}) val mIoU {:?}",
            log.epoch, log.stage, log.loss_total, log.loss_mse, log.loss_iou, log.val_miou
        );
        log_text.push_str(&serde_json::to_string(log).expect("log line"));
        log_text.push('\n');
    });
    write_file(&out_dir.join(LOG_FILE), &log_text)?;
    let logs = logs?;
    let model = trainer.into_model();
    write_file(&out_dir.join(MODEL_FILE), formats::write_model(&model))?;
    let targets: Vec<LoraTarget> =
        LoraTarget::ALL.into_iter().filter(|t| model.config().lora_targets.contains(t)).collect();
    for (i, adapter) in model.adapters().into_iter().enumerate() {
        let layer = i / targets.len();
        let name = format!("adapters/layer{layer}_{}.lbxa", target_name(targets[i % targets.len()]));
        write_file(&out_dir.join(name), formats::write_adapter(adapter))?;
    }
    Ok(TrainOutcome { logs, train_samples: train.len(), val_samples: val.len() })
}

/// One predicted box, as read and written by `eval`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prediction {
    pub sample_id: String,
    pub category: String,
    #[serde(rename = "box")]
    pub bbox: Box7,
}

pub const PREDICTIONS_FILE: &str = "predictions.jsonl";

/// Record id of a sample: the part before the last `/`, or the whole id.
fn record_of(sample_id: &str) -> &str {
    sample_id.rsplit_once('/').map_or(sample_id, |(r, _)| r)
}

/// Matches per record, then scores. Each ground-truth sample's IoU is taken
/// against the prediction with the same sample id (0 when missing).
pub fn evaluate(gts: &[TrainingSample], preds: &[Prediction], threshold: f64) -> Result<EvalReport, CliError> {
    type Side<'a> = Vec<(Box7, &'a str)>;
    let mut groups: BTreeMap<&str, (Side, Side)> = BTreeMap::new();
    for g in gts {
        groups.entry(record_of(&g.sample_id)).or_default().1.push((g.target, g.category.as_str()));
    }
    for p in preds {
        groups.entry(record_of(&p.sample_id)).or_default().0.push((p.bbox, p.category.as_str()));
    }
    let mut counts = ConfusionCounts::default();
    for (p, g) in groups.values() {
        counts = counts + match_predictions(p, g, threshold)?.counts;
    }
    let by_id: HashMap<&str, &Prediction> = preds.iter().map(|p| (p.sample_id.as_str(), p)).collect();
    let per_sample: Vec<(&str, f64)> = gts
        .iter()
        .map(|g| (g.category.as_str(), by_id.get(g.sample_id.as_str()).map_or(0.0, |p| iou_3d(&p.bbox, &g.target).iou)))
        .collect();
    let ious: Vec<f64> = per_sample.iter().map(|(_, v)| *v).collect();
    let p = precision(&counts).ok();
    let r = recall(&counts).ok();
    Ok(EvalReport {
        iou_threshold: threshold,
        predictions: preds.len(),
        ground_truth: gts.len(),
        counts,
        accuracy: accuracy(&counts).ok(),
        precision: p,
        recall: r,
        f1: f1(p.unwrap_or(0.0), r.unwrap_or(0.0)),
        miou_samples: miou_samples(&ious).ok(),
        categories: miou_categories(category_rows(per_sample)).ok(),
    })
}

pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_JSON: &str = "report.json";

pub fn load_checkpoint(path: &Path) -> Result<FusionModel, CliError> {
    formats::read_model(&read_file(path)?).map_err(|source| CliError::Format { path: path.display().to_string(), source })
}

pub fn cmd_eval(cfg: &EvalRunConfig, out_dir: &Path) -> Result<EvalReport, CliError> {
    let gts: Vec<TrainingSample> = read_jsonl(&cfg.data)?;
    let preds = match (&cfg.checkpoint, &cfg.predictions) {
        (Some(ckpt), None) => {
            let model = load_checkpoint(ckpt)?;
            let boxes = predict_boxes(&model, gts.iter().map(|s| s.input.as_slice()))?;
            let preds: Vec<Prediction> = gts
                .iter()
                .zip(boxes)
                .map(|(g, b)| Prediction { sample_id: g.sample_id.clone(), category: g.category.clone(), bbox: b })
                .collect();
            write_file(&out_dir.join(PREDICTIONS_FILE), to_jsonl(&preds))?;
            preds
        }
        (None, Some(path)) => read_jsonl(path)?,
        _ => return Err(CliError::Invalid("give exactly one of --checkpoint or --predictions".into())),
    };
    let report = evaluate(&gts, &preds, cfg.iou_threshold)?;
    write_resolved(out_dir, "eval", cfg)?;
    let csv = formats::report_csv(&report).map_err(|e| CliError::Invalid(e.to_string()))?;
    write_file(&out_dir.join(REPORT_CSV), csv)?;
    let json = serde_json::to_string_pretty(&report).expect("report json") + "\n";
    write_file(&out_dir.join(REPORT_JSON), json)?;
    Ok(report)
}

/// Per-category IoU table followed by the summary metrics.
pub fn render_report(report: &EvalReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<22}{:>10}{:>8}", "Category", "IoU", "Count");
    if let Some(table) = &report.categories {
        for row in &table.rows {
            let _ = writeln!(out, "{:<22}{:>10.4}{:>8}", row.category, row.iou, row.count);
        }
        let _ = writeln!(out, "{:<22}{:>10.4}", "mIoU", table.miou);
    }
    let opt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"));
    let _ = writeln!(out, "{:<22}{:>10}", "mIoU (per sample)", opt(report.miou_samples));
    let _ = writeln!(out, "{:<22}{:>10}", "Accuracy", opt(report.accuracy));
    let _ = writeln!(out, "{:<22}{:>10}", "Precision", opt(report.precision));
    let _ = writeln!(out, "{:<22}{:>10}", "Recall", opt(report.recall));
    let _ = writeln!(out, "{:<22}{:>10.4}", "F1", report.f1);
    out
}

/// Per-epoch table of a training log.
pub fn render_log(logs: &[EpochLog]) -> String {
    let mut out = format!(
        "{:>5} {:>5} {:>6} {:>6} {:>8} {:>10} {:>8} {:>10} {:>8}\n",
        "epoch", "stage", "l_mse", "l_iou", "lr", "L_mse", "L_iou", "L", "val_mIoU"
    );
    for l in logs {
        let val = l.val_miou.map_or_else(|| "n/a".into(), |v| format!("{v:.4}"));
        let _ = writeln!(
            out,
            "{:>5} {:>5} {:>6} {:>6} {:>8.0e} {:>10.4} {:>8.4} {:>10.4} {:>8}",
            l.epoch, l.stage, l.lambda_mse, l.lambda_iou, l.lr, l.loss_mse, l.loss_iou, l.loss_total, val
        );
    }
    out
}

/// One CSV row per projected corner: the text stand-in for box overlays.
pub fn overlay_csv(samples: &[ProcessedSample]) -> Result<String, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| CliError::Invalid(e.to_string());
    w.write_record(["sample_id", "annotation", "category", "camera", "corner", "state", "u", "v"]).map_err(csv_err)?;
    for s in samples {
        for view in &s.views {
            for (i, c) in view.corners.iter().enumerate() {
                let (state, u, v) = match c {
                    lorabox_core::CornerProjection::Visible { u, v } => ("visible", format!("{u:.3}"), format!("{v:.3}")),
                    lorabox_core::CornerProjection::OutOfBounds { u, v } => ("out_of_bounds", format!("{u:.3}"), format!("{v:.3}")),
                    lorabox_core::CornerProjection::BehindCamera => ("behind_camera", String::new(), String::new()),
                };
                w.write_record([
                    s.sample_id.as_str(),
                    &s.annotation.to_string(),
                    &s.category,
                    &view.camera,
                    &i.to_string(),
                    state,
                    &u,
                    &v,
                ])
                .map_err(csv_err)?;
            }
        }
    }
    let bytes = w.into_inner().map_err(|e| CliError::Invalid(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

pub fn read_report(path: &Path) -> Result<EvalReport, CliError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| CliError::Json { path: path.display().to_string(), source })
}

/// Default output directory when none is given.
pub fn default_out_dir(command: &str) -> PathBuf {
    PathBuf::from("runs").join(command)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(id: &str, category: &str, target: Box7) -> TrainingSample {
        TrainingSample { sample_id: id.into(), category: category.into(), input: vec![], target }
    }

    #[test]
    fn iou_output() {
        let unit = [0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0];
        assert!(cmd_iou(unit, unit, None).unwrap().starts_with("iou=1.0\n"));
        let far = [100.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0];
        assert!(cmd_iou(unit, far, None).unwrap().starts_with("iou=0.0\n"));
        let out = cmd_iou(unit, [0.0, 0.0, 0.0, 1.0, 1.0, 1.0, std::f64::consts::FRAC_PI_4], Some((1000, 1))).unwrap();
        let iou: f64 = out.lines().next().unwrap().trim_start_matches("iou=").parse().unwrap();
        assert!((iou - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-5);
        assert!(out.contains("mc_iou="));
        assert!(cmd_iou([0.0, 0.0, 0.0, -1.0, 1.0, 1.0, 0.0], unit, None).is_err());
    }

    #[test]
    fn ground_truth_scores_perfectly() {
        let b = |x: f64| Box7::new([x, 0.0, 0.0], [1.0; 3], 0.0).unwrap();
        let gts = vec![sample("r0/0", "car", b(0.0)), sample("r0/1", "adult", b(3.0)), sample("r1/0", "car", b(9.0))];
        let preds: Vec<Prediction> =
            gts.iter().map(|g| Prediction { sample_id: g.sample_id.clone(), category: g.category.clone(), bbox: g.target }).collect();
        let r = evaluate(&gts, &preds, 0.25).unwrap();
        assert_eq!(r.miou_samples, Some(1.0));
        assert_eq!(r.recall, Some(1.0));
        assert_eq!(r.categories.as_ref().unwrap().miou, 1.0);

        let r = evaluate(&gts, &[], 0.25).unwrap();
        assert_eq!(r.recall, Some(0.0));
        assert_eq!(r.precision, None);
        assert_eq!(r.miou_samples, Some(0.0));
        assert_eq!(r.f1, 0.0);
    }

    #[test]
    fn split_is_roughly_ten_percent() {
        let n = (0..5000).filter(|i| in_validation_split(&format!("s{i}"))).count();
        assert!((400..600).contains(&n), "{n}");
    }
}
