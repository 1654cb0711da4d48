//! Binary checkpoints and metric reports.
//!
//! Adapter checkpoint (all integers and floats little-endian):
//!
//! | bytes | field |
//! |-------|-------|
//! | 4 | magic `LBXA` |
//! | 4 | format version (u32, currently 1) |
//! | 8 | `d_in` (u64) |
//! | 8 | `d_out` (u64) |
//! | 8 | rank `r` (u64) |
//! | 8 | `alpha` (f64) |
//! | 8 r d_in | `A`, row-major f64 |
//! | 8 d_out r | `B`, row-major f64 |
//!
//! Model checkpoint: magic `LBXM`, one version byte, a u32 header length,
//! a UTF-8 JSON header `{config, output_map, tensors: [{name, rows, cols}]}`,
//! then every tensor in header order as column-major f64.

use std::io::Write as _;

use lorabox_core::eval::{CategoryIoUTable, ConfusionCounts};
use lorabox_core::lora::{LoraAdapter, LoraError};
use lorabox_core::model::{FusionModel, ModelConfig, ModelError, OutputMap};
use lorabox_core::nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

pub const ADAPTER_MAGIC: [u8; 4] = *b"LBXA";
pub const ADAPTER_VERSION: u32 = 1;
pub const MODEL_MAGIC: [u8; 4] = *b"LBXM";
pub const MODEL_VERSION: u8 = 1;

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("file truncated")]
    Truncated,
    #[error("{0} trailing bytes after the last tensor")]
    TrailingBytes(usize),
    #[error("header: {0}")]
    Header(#[from] serde_json::Error),
    #[error(transparent)]
    Lora(#[from] LoraError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        if self.buf.len() < n {
            return Err(FormatError::Truncated);
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, FormatError> {
        let bytes = self.take(n.checked_mul(8).ok_or(FormatError::Truncated)?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }

    fn finish(self) -> Result<(), FormatError> {
        match self.buf.len() {
            0 => Ok(()),
            n => Err(FormatError::TrailingBytes(n)),
        }
    }
}

fn put_row_major(out: &mut Vec<u8>, m: &DMatrix<f64>) {
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            out.extend_from_slice(&m[(r, c)].to_le_bytes());
        }
    }
}

pub fn write_adapter(a: &LoraAdapter) -> Vec<u8> {
    let mut out = Vec::with_capacity(40 + 8 * a.trainable_params());
    out.extend_from_slice(&ADAPTER_MAGIC);
    out.extend_from_slice(&ADAPTER_VERSION.to_le_bytes());
    for v in [a.d_in(), a.d_out(), a.rank()] {
        out.extend_from_slice(&(v as u64).to_le_bytes());
    }
    out.extend_from_slice(&a.alpha().to_le_bytes());
    put_row_major(&mut out, a.a());
    put_row_major(&mut out, a.b());
    out
}

pub fn read_adapter(bytes: &[u8]) -> Result<LoraAdapter, FormatError> {
    let mut r = Reader { buf: bytes };
    if r.take(4)? != ADAPTER_MAGIC {
        return Err(FormatError::BadMagic);
    }
    let version = r.u32()?;
    if version != ADAPTER_VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let d_in = r.u64()? as usize;
    let d_out = r.u64()? as usize;
    let rank = r.u64()? as usize;
    let alpha = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
    let a = DMatrix::from_row_slice(rank, d_in, &r.f64s(rank * d_in)?);
    let b = DMatrix::from_row_slice(d_out, rank, &r.f64s(d_out * rank)?);
    r.finish()?;
    Ok(LoraAdapter::from_factors(a, b, alpha)?)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorHeader {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelHeader {
    config: ModelConfig,
    output_map: OutputMap,
    tensors: Vec<TensorHeader>,
}

pub fn write_model(model: &FusionModel) -> Vec<u8> {
    let named = model.named_tensors();
    let header = ModelHeader {
        config: model.config().clone(),
        output_map: *model.output_map(),
        tensors: named.iter().map(|(n, (rows, cols), _)| TensorHeader { name: n.clone(), rows: *rows, cols: *cols }).collect(),
    };
    let json = serde_json::to_vec(&header).expect("model header");
    let mut out = Vec::new();
    out.extend_from_slice(&MODEL_MAGIC);
    out.push(MODEL_VERSION);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.write_all(&json).expect("in-memory write");
    for (_, _, data) in named {
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn read_model(bytes: &[u8]) -> Result<FusionModel, FormatError> {
    let mut r = Reader { buf: bytes };
    if r.take(4)? != MODEL_MAGIC {
        return Err(FormatError::BadMagic);
    }
    let version = r.take(1)?[0];
    if version != MODEL_VERSION {
        return Err(FormatError::UnsupportedVersion(u32::from(version)));
    }
    let len = r.u32()? as usize;
    let header: ModelHeader = serde_json::from_slice(r.take(len)?)?;
    let mut blobs = Vec::with_capacity(header.tensors.len());
    for t in &header.tensors {
        blobs.push((t.name.as_str(), r.f64s(t.rows * t.cols)?));
    }
    r.finish()?;
    let mut model = FusionModel::new(header.config)?;
    model.set_output_map(header.output_map);
    if blobs.len() != model.named_tensors().len() {
        return Err(ModelError::ShapeMismatch { expected: model.named_tensors().len(), got: blobs.len() }.into());
    }
    model.load_tensors(|name| blobs.iter().find(|(n, _)| *n == name).map(|(_, v)| v.as_slice()))?;
    Ok(model)
}

/// Metric report written by `eval`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub iou_threshold: f64,
    pub predictions: usize,
    pub ground_truth: usize,
    pub counts: ConfusionCounts,
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: f64,
    /// Mean IoU over ground-truth samples, each against its own prediction.
    pub miou_samples: Option<f64>,
    /// Unweighted mean over categories.
    pub categories: Option<CategoryIoUTable>,
}

/// `category,iou,count` rows followed by summary rows.
pub fn report_csv(report: &EvalReport) -> Result<String, csv::Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["category", "iou", "count"])?;
    let fmt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
    if let Some(table) = &report.categories {
        for row in &table.rows {
            w.write_record([row.category.as_str(), &format!("{:.6}", row.iou), &row.count.to_string()])?;
        }
        let total: u64 = table.rows.iter().map(|r| r.count).sum();
        w.write_record(["mIoU", &format!("{:.6}", table.miou), &total.to_string()])?;
    }
    w.write_record(["mIoU_samples", &fmt(report.miou_samples), &report.ground_truth.to_string()])?;
    w.write_record(["accuracy", &fmt(report.accuracy), ""])?;
    w.write_record(["precision", &fmt(report.precision), ""])?;
    w.write_record(["recall", &fmt(report.recall), ""])?;
    w.write_record(["f1", &format!("{:.6}", report.f1), ""])?;
    let bytes = w.into_inner().map_err(|e| e.into_error())?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}
