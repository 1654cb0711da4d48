//! nuScenes-lite scene files and the global -> LiDAR -> camera pipeline.
//!
//! A scene file is UTF-8 JSON:
//!
//! ```json
//! {
//!   "schema_version": 1,
//!   "records": [{
//!     "sample_id": "scene-0001/000",
//!     "ego_to_global": {"translation": [x, y, z], "rotation": [w, x, y, z]},
//!     "lidar_to_ego": {"translation": [...], "rotation": [...]},
//!     "cameras": [{
//!       "name": "front",
//!       "intrinsics": {"fx": 1266.4, "fy": 1266.4, "cx": 816.3, "cy": 491.5, "width": 1600, "height": 900},
//!       "sensor_to_ego": {"translation": [...], "rotation": [...]}
//!     }],
//!     "annotations": [{"category": "car", "box": {"x": 0, "y": 0, "z": 0, "l": 4.6, "w": 1.9, "h": 1.7, "yaw": 0}}]
//!   }]
//! }
//! ```
//!
//! Lengths are meters, angles radians, quaternions `[w, x, y, z]`. Boxes in
//! a scene file are in the global frame. Camera frames are x right, y down,
//! z forward.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use lorabox_core::geom::{project_corners, transform_box};
use lorabox_core::{Box7, CameraIntrinsics, CornerProjection, GeomError, Pose};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

/// The six camera positions a record may carry.
pub const CAMERA_NAMES: [&str; 6] = ["front", "front-right", "front-left", "back", "back-left", "back-right"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseJson {
    pub translation: [f64; 3],
    pub rotation: [f64; 4],
}

impl From<Pose> for PoseJson {
    fn from(p: Pose) -> Self {
        Self { translation: p.translation(), rotation: p.rotation_wxyz() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraJson {
    name: String,
    intrinsics: CameraIntrinsics,
    sensor_to_ego: PoseJson,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationJson {
    category: String,
    #[serde(rename = "box")]
    bbox: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordJson {
    sample_id: String,
    ego_to_global: PoseJson,
    lidar_to_ego: PoseJson,
    cameras: Vec<CameraJson>,
    annotations: Vec<AnnotationJson>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub name: String,
    pub intrinsics: CameraIntrinsics,
    pub sensor_to_ego: Pose,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Annotation {
    pub category: String,
    #[serde(rename = "box")]
    pub bbox: Box7,
}

/// One validated sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneRecord {
    pub sample_id: String,
    pub ego_to_global: Pose,
    pub lidar_to_ego: Pose,
    pub cameras: Vec<Camera>,
    /// Boxes in the global frame.
    pub annotations: Vec<Annotation>,
}

/// Why a record was rejected, with the offending field path.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnostic {
    pub index: usize,
    pub sample_id: Option<String>,
    pub field: String,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "records[{}]", self.index)?;
        if let Some(id) = &self.sample_id {
            write!(f, " ({id})")?;
        }
        write!(f, " {}: {}", self.field, self.message)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parse error at line {line}, column {column}: {message}")]
    ParseError { line: usize, column: usize, message: String },
    #[error("schema version {found} is not supported (expected {expected})")]
    SchemaVersionMismatch { found: u64, expected: u32 },
}

/// Outcome of ingesting a scene file: every input record is either accepted
/// or has exactly one diagnostic.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Ingested {
    pub records: Vec<SceneRecord>,
    pub rejected: Vec<Diagnostic>,
}

pub fn ingest(path: &Path, workers: usize) -> Result<Ingested, IngestError> {
    let text = std::fs::read_to_string(path).map_err(|source| IngestError::Io { path: path.display().to_string(), source })?;
    ingest_str(&text, workers)
}

/// Parses a scene document. Whitespace-only input is an empty scene set.
pub fn ingest_str(text: &str, workers: usize) -> Result<Ingested, IngestError> {
    if text.trim().is_empty() {
        return Ok(Ingested::default());
    }
    let doc: serde_json::Value = serde_json::from_str(text)
        .map_err(|e| IngestError::ParseError { line: e.line(), column: e.column(), message: e.to_string() })?;
    let top_err = |message: &str| IngestError::ParseError { line: 0, column: 0, message: message.into() };
    let obj = doc.as_object().ok_or_else(|| top_err("top level must be an object"))?;
    if let Some(k) = obj.keys().find(|k| *k != "schema_version" && *k != "records") {
        return Err(top_err(&format!("unknown top-level field `{k}`")));
    }
    let version = obj
        .get("schema_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| top_err("missing or non-integer field `schema_version`"))?;
    if version != u64::from(SCHEMA_VERSION) {
        return Err(IngestError::SchemaVersionMismatch { found: version, expected: SCHEMA_VERSION });
    }
    let raw = obj
        .get("records")
        .and_then(serde_json::Value::as_array)
        .ok_or_else(|| top_err("missing or non-array field `records`"))?;

    let results: Vec<Result<SceneRecord, Diagnostic>> =
        with_workers(workers, || raw.par_iter().enumerate().map(|(i, v)| validate_record(i, v)).collect());
    let mut out = Ingested::default();
    for r in results {
        match r {
            Ok(rec) => out.records.push(rec),
            Err(d) => out.rejected.push(d),
        }
    }
    Ok(out)
}

/// Runs `f` on a dedicated pool of `workers` threads (at least one).
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .expect("thread pool")
        .install(f)
}

fn validate_record(index: usize, value: &serde_json::Value) -> Result<SceneRecord, Diagnostic> {
    let sample_id = value.get("sample_id").and_then(|v| v.as_str()).map(str::to_owned);
    let diag = |field: &str, message: String| Diagnostic { index, sample_id: sample_id.clone(), field: field.into(), message };
    let raw: RecordJson = serde_json::from_value(value.clone()).map_err(|e| diag("record", e.to_string()))?;
    if raw.sample_id.is_empty() {
        return Err(diag("sample_id", "must be non-empty".into()));
    }
    let pose = |field: &str, p: &PoseJson| Pose::new(p.translation, p.rotation).map_err(|e| diag(field, e.to_string()));
    let ego_to_global = pose("ego_to_global", &raw.ego_to_global)?;
    let lidar_to_ego = pose("lidar_to_ego", &raw.lidar_to_ego)?;
    let mut seen = HashSet::new();
    let mut cameras = Vec::with_capacity(raw.cameras.len());
    for (c, cam) in raw.cameras.iter().enumerate() {
        let field = format!("cameras[{c}]");
        if !CAMERA_NAMES.contains(&cam.name.as_str()) {
            return Err(diag(&format!("{field}.name"), format!("unknown camera `{}`", cam.name)));
        }
        if !seen.insert(cam.name.as_str()) {
            return Err(diag(&format!("{field}.name"), format!("duplicate camera `{}`", cam.name)));
        }
        cam.intrinsics.validate().map_err(|e| diag(&format!("{field}.intrinsics"), e.to_string()))?;
        cameras.push(Camera {
            name: cam.name.clone(),
            intrinsics: cam.intrinsics,
            sensor_to_ego: pose(&format!("{field}.sensor_to_ego"), &cam.sensor_to_ego)?,
        });
    }
    let mut annotations = Vec::with_capacity(raw.annotations.len());
    for (a, ann) in raw.annotations.into_iter().enumerate() {
        if ann.category.is_empty() {
            return Err(diag(&format!("annotations[{a}].category"), "must be non-empty".into()));
        }
        let bbox: Box7 = serde_json::from_value(ann.bbox).map_err(|e| diag(&format!("annotations[{a}].box"), e.to_string()))?;
        annotations.push(Annotation { category: ann.category, bbox });
    }
    Ok(SceneRecord { sample_id: raw.sample_id, ego_to_global, lidar_to_ego, cameras, annotations })
}

/// Serializes records in the scene-file format.
pub fn emit(records: &[SceneRecord]) -> String {
    let records: Vec<RecordJson> = records
        .iter()
        .map(|r| RecordJson {
            sample_id: r.sample_id.clone(),
            ego_to_global: r.ego_to_global.into(),
            lidar_to_ego: r.lidar_to_ego.into(),
            cameras: r
                .cameras
                .iter()
                .map(|c| CameraJson { name: c.name.clone(), intrinsics: c.intrinsics, sensor_to_ego: c.sensor_to_ego.into() })
                .collect(),
            annotations: r
                .annotations
                .iter()
                .map(|a| AnnotationJson { category: a.category.clone(), bbox: serde_json::to_value(a.bbox).expect("box") })
                .collect(),
        })
        .collect();
    let doc = serde_json::json!({ "schema_version": SCHEMA_VERSION, "records": records });
    let mut s = serde_json::to_string_pretty(&doc).expect("scene json");
    s.push('\n');
    s
}

/// `(lidar_to_ego)^-1 ∘ (ego_to_global)^-1`, mapping global points into the LiDAR frame.
pub fn global_to_lidar(rec: &SceneRecord) -> Pose {
    rec.lidar_to_ego.inverse().compose(&rec.ego_to_global.inverse())
}

/// Annotation boxes re-expressed in the LiDAR frame.
pub fn to_lidar_frame(rec: &SceneRecord) -> Result<Vec<Box7>, GeomError> {
    let pose = global_to_lidar(rec);
    rec.annotations.iter().map(|a| transform_box(&a.bbox, &pose)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraView {
    pub camera: String,
    pub corners: [CornerProjection; 8],
}

impl CameraView {
    pub fn visible_corners(&self) -> usize {
        self.corners.iter().filter(|c| c.is_visible()).count()
    }
}

/// One annotation after the pipeline, tagged with its visibility.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessedSample {
    pub sample_id: String,
    pub annotation: usize,
    pub category: String,
    #[serde(rename = "box")]
    pub bbox: Box7,
    pub views: Vec<CameraView>,
    pub retained: bool,
}

/// Projects every LiDAR-frame box into every camera. An annotation is
/// retained when at least one corner is visible in at least one camera.
pub fn filter_visible(boxes: &[Box7], rec: &SceneRecord) -> Vec<ProcessedSample> {
    let cams: Vec<(&Camera, Pose)> =
        rec.cameras.iter().map(|c| (c, c.sensor_to_ego.inverse().compose(&rec.lidar_to_ego))).collect();
    boxes
        .iter()
        .zip(&rec.annotations)
        .enumerate()
        .map(|(i, (b, ann))| {
            let corners = b.corners();
            let views: Vec<CameraView> = cams
                .iter()
                .map(|(cam, pose)| CameraView {
                    camera: cam.name.clone(),
                    corners: project_corners(&corners.transformed(pose), &cam.intrinsics),
                })
                .collect();
            let retained = views.iter().any(|v| v.visible_corners() > 0);
            ProcessedSample { sample_id: rec.sample_id.clone(), annotation: i, category: ann.category.clone(), bbox: *b, views, retained }
        })
        .collect()
}

/// Per-record pipeline result.
#[derive(Debug, Clone, PartialEq)]
pub enum Processed {
    Samples(Vec<ProcessedSample>),
    Failed(Diagnostic),
}

pub fn process_record(index: usize, rec: &SceneRecord) -> Processed {
    match to_lidar_frame(rec) {
        Ok(boxes) => Processed::Samples(filter_visible(&boxes, rec)),
        Err(e) => Processed::Failed(Diagnostic {
            index,
            sample_id: Some(rec.sample_id.clone()),
            field: "ego_to_global".into(),
            message: e.to_string(),
        }),
    }
}

/// Runs the pipeline over all records in input order.
pub fn process_all(records: &[SceneRecord], workers: usize) -> Vec<Processed> {
    with_workers(workers, || records.par_iter().enumerate().map(|(i, r)| process_record(i, r)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct IngestSummary {
    pub accepted: usize,
    pub rejected: usize,
    pub dropped_invisible: usize,
    pub retained: usize,
}

impl fmt::Display for IngestSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "accepted={} rejected={} dropped_invisible={} retained={}",
            self.accepted, self.rejected, self.dropped_invisible, self.retained
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn front_camera() -> Camera {
        // optical axes: z forward = ego +x, x right = ego -y, y down = ego -z
        let r = lorabox_core::nalgebra::Matrix3::new(0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0);
        Camera {
            name: "front".into(),
            intrinsics: CameraIntrinsics::new(1000.0, 1000.0, 800.0, 450.0, 1600, 900).unwrap(),
            sensor_to_ego: Pose::from_rotation_matrix([0.0; 3], &r),
        }
    }

    fn record(boxes: &[Box7]) -> SceneRecord {
        SceneRecord {
            sample_id: "s0".into(),
            ego_to_global: Pose::identity(),
            lidar_to_ego: Pose::identity(),
            cameras: vec![front_camera()],
            annotations: boxes.iter().map(|b| Annotation { category: "car".into(), bbox: *b }).collect(),
        }
    }

    #[test]
    fn empty_input_is_empty() {
        assert_eq!(ingest_str("", 1).unwrap(), Ingested::default());
        let r = ingest_str(r#"{"schema_version": 1, "records": []}"#, 1).unwrap();
        assert!(r.records.is_empty() && r.rejected.is_empty());
    }

    #[test]
    fn schema_version_checked() {
        let e = ingest_str(r#"{"schema_version": 2, "records": []}"#, 1).unwrap_err();
        assert!(matches!(e, IngestError::SchemaVersionMismatch { found: 2, expected: 1 }));
        let e = ingest_str("{\n  \"schema_version\": 1,\n  \"records\": [\n", 1).unwrap_err();
        assert!(matches!(e, IngestError::ParseError { line: 4, .. }));
    }

    #[test]
    fn bad_quaternion_names_field() {
        let mut rec = record(&[]);
        rec.annotations.clear();
        let text = emit(&[rec]).replace("\"rotation\": [\n          1.0,", "\"rotation\": [\n          0.5,");
        let out = ingest_str(&text, 1).unwrap();
        assert_eq!(out.records.len(), 0);
        assert_eq!(out.rejected[0].field, "ego_to_global");
        assert!(out.rejected[0].message.contains("quaternion"));
    }

    #[test]
    fn pure_translation_to_lidar() {
        let mut rec = record(&[Box7::new([101.0, 0.0, 0.0], [1.0; 3], 0.0).unwrap()]);
        rec.ego_to_global = Pose::from_translation([100.0, 0.0, 0.0]);
        let b = to_lidar_frame(&rec).unwrap();
        assert!((b[0].center() - lorabox_core::nalgebra::Point3::new(1.0, 0.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn visibility_examples() {
        let ahead = Box7::new([10.0, 0.0, 0.0], [1.0; 3], 0.0).unwrap();
        let behind = Box7::new([-10.0, 0.0, 0.0], [1.0; 3], 0.0).unwrap();
        let rec = record(&[ahead, behind]);
        let out = filter_visible(&to_lidar_frame(&rec).unwrap(), &rec);
        assert!(out[0].retained);
        assert_eq!(out[0].views[0].visible_corners(), 8);
        assert!(!out[1].retained);
        assert_eq!(out[1].views[0].visible_corners(), 0);
        assert_eq!(out[1].bbox, behind);
    }
}
