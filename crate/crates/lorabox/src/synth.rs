//! Synthetic scenes with paired features.
//!
//! Each record holds boxes around a randomly placed ego vehicle with the six
//! standard cameras. Every retained box gets a visual feature that is a fixed
//! smooth invertible function of its LiDAR-frame parameters (plus optional
//! Gaussian noise) and a text feature that embeds its category, so a mapping
//! from features back to boxes exists by construction.

use std::collections::BTreeMap;
use std::f64::consts::{FRAC_PI_2, PI};

use lorabox_core::geom::transform_box;
use lorabox_core::lora::gaussian_matrix;
use lorabox_core::nalgebra::{DMatrix, DVector, Matrix3};
use lorabox_core::train::TrainingSample;
use lorabox_core::{Box7, CameraIntrinsics, Pose};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::scene::{process_record, Annotation, Camera, Processed, SceneRecord};

/// Mean `(l, w, h)` per category, in meters.
pub const CATEGORY_SIZES: [(&str, [f64; 3]); 16] = [
    ("car", [4.6, 1.9, 1.7]),
    ("adult", [0.7, 0.7, 1.75]),
    ("trafficcone", [0.4, 0.4, 1.0]),
    ("truck", [6.9, 2.5, 2.9]),
    ("barrier", [2.5, 0.5, 1.0]),
    ("construction", [6.4, 2.8, 3.2]),
    ("pushable_pullable", [0.6, 0.6, 1.0]),
    ("rigid", [11.0, 2.9, 3.5]),
    ("construction_worker", [0.7, 0.7, 1.8]),
    ("motorcycle", [2.1, 0.8, 1.5]),
    ("bicycle", [1.7, 0.6, 1.3]),
    ("trailer", [12.3, 2.9, 3.9]),
    ("bicycle_rack", [2.5, 1.5, 1.3]),
    ("child", [0.5, 0.5, 1.4]),
    ("bendy", [17.0, 3.0, 3.5]),
    ("wheelchair", [1.0, 0.7, 1.3]),
];

pub fn category_size(name: &str) -> Option<[f64; 3]> {
    CATEGORY_SIZES.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
}

/// Camera name and heading relative to the ego +x axis (degrees).
const CAMERA_LAYOUT: [(&str, f64); 6] = [
    ("front", 0.0),
    ("front-right", -55.0),
    ("front-left", 55.0),
    ("back", 180.0),
    ("back-left", 110.0),
    ("back-right", -110.0),
];

const VISUAL_INPUTS: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub count: usize,
    pub seed: u64,
    /// Seed of the feature maps; keep it fixed across train and val sets.
    pub feature_seed: u64,
    pub annotations_per_record: usize,
    /// Relative category weights; categories must appear in [`CATEGORY_SIZES`].
    pub category_mix: BTreeMap<String, f64>,
    pub d_v: usize,
    pub d_t: usize,
    /// Standard deviation of the noise added to visual features.
    pub noise_std: f64,
    /// Horizontal distance of boxes from the LiDAR, meters.
    pub min_range: f64,
    pub max_range: f64,
    /// Relative spread of sizes around the category mean.
    pub size_jitter: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            count: 1000,
            seed: 0,
            feature_seed: 0,
            annotations_per_record: 1,
            category_mix: CATEGORY_SIZES.iter().map(|(n, _)| (n.to_string(), 1.0)).collect(),
            d_v: 32,
            d_t: 32,
            noise_std: 0.0,
            min_range: 4.0,
            max_range: 40.0,
            size_jitter: 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SynthError {
    #[error("count must be at least 1")]
    ZeroCount,
    #[error("unknown category `{0}`")]
    UnknownCategory(String),
    #[error("category mix must have a positive total weight")]
    EmptyMix,
    #[error("invalid synth config: {0}")]
    Invalid(&'static str),
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.count == 0 {
            return Err(SynthError::ZeroCount);
        }
        if let Some(c) = self.category_mix.keys().find(|c| category_size(c).is_none()) {
            return Err(SynthError::UnknownCategory(c.clone()));
        }
        let weights: Vec<f64> = self.category_mix.values().copied().collect();
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || weights.iter().sum::<f64>() <= 0.0 {
            return Err(SynthError::EmptyMix);
        }
        if self.d_v == 0 || self.d_t == 0 || self.annotations_per_record == 0 {
            return Err(SynthError::Invalid("d_v, d_t and annotations_per_record must be at least 1"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(SynthError::Invalid("noise_std must be finite and non-negative"));
        }
        if !(self.min_range >= 0.0 && self.max_range > self.min_range && self.max_range.is_finite()) {
            return Err(SynthError::Invalid("need 0 <= min_range < max_range"));
        }
        if !(0.0..1.0).contains(&self.size_jitter) {
            return Err(SynthError::Invalid("size_jitter must be in [0, 1)"));
        }
        Ok(())
    }
}

/// The fixed maps from boxes and categories to features.
#[derive(Debug, Clone)]
pub struct FeatureMaps {
    visual: DMatrix<f64>,
    feature_seed: u64,
    d_t: usize,
}

impl FeatureMaps {
    pub fn new(feature_seed: u64, d_v: usize, d_t: usize) -> Self {
        let visual = gaussian_matrix(d_v, VISUAL_INPUTS, 1.0 / (VISUAL_INPUTS as f64).sqrt(), feature_seed);
        Self { visual, feature_seed, d_t }
    }

    /// `tanh(M phi(box))` with `phi = (x/20, y/20, z, ln l, ln w, ln h, sin yaw, cos yaw)`.
    pub fn visual(&self, b: &Box7) -> Vec<f64> {
        let [x, y, z, l, w, h, yaw] = b.to_array();
        let phi = DVector::from_column_slice(&[x / 20.0, y / 20.0, z, l.ln(), w.ln(), h.ln(), yaw.sin(), yaw.cos()]);
        (&self.visual * phi).iter().map(|v| v.tanh()).collect()
    }

    /// Unit-norm Gaussian embedding seeded by a hash of the category name.
    pub fn text(&self, category: &str) -> Vec<f64> {
        let mut hasher = Sha256::new();
        hasher.update(self.feature_seed.to_le_bytes());
        hasher.update(category.as_bytes());
        let digest = hasher.finalize();
        let seed = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
        let v = gaussian_matrix(self.d_t, 1, 1.0, seed);
        let norm = v.norm();
        v.iter().map(|x| x / norm).collect()
    }
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub records: Vec<SceneRecord>,
    /// One sample per retained annotation, targets in the LiDAR frame.
    pub samples: Vec<TrainingSample>,
}

fn optical_to_ego(t: [f64; 3], heading_deg: f64) -> Pose {
    // optical z forward, x right, y down
    let base = Matrix3::new(0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0);
    let (s, c) = heading_deg.to_radians().sin_cos();
    let yaw = Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0);
    Pose::from_rotation_matrix(t, &(yaw * base))
}

/// The six cameras with nuScenes-like intrinsics.
pub fn standard_cameras() -> Vec<Camera> {
    let intrinsics = CameraIntrinsics::new(1266.4, 1266.4, 816.3, 491.5, 1600, 900).expect("valid intrinsics");
    CAMERA_LAYOUT
        .iter()
        .map(|&(name, heading)| {
            let (s, c) = heading.to_radians().sin_cos();
            Camera { name: name.into(), intrinsics, sensor_to_ego: optical_to_ego([1.0 + 0.5 * c, 0.5 * s, 1.5], heading) }
        })
        .collect()
}

pub fn synth_scenes(cfg: &SynthConfig) -> Result<SynthDataset, SynthError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let names: Vec<&String> = cfg.category_mix.keys().collect();
    let pick = WeightedIndex::new(cfg.category_mix.values().copied()).map_err(|_| SynthError::EmptyMix)?;
    let maps = FeatureMaps::new(cfg.feature_seed, cfg.d_v, cfg.d_t);
    let noise = Normal::new(0.0, cfg.noise_std.max(f64::MIN_POSITIVE)).expect("valid std");
    let cameras = standard_cameras();

    let mut records = Vec::with_capacity(cfg.count);
    let mut samples = Vec::with_capacity(cfg.count * cfg.annotations_per_record);
    for i in 0..cfg.count {
        let ego_to_global = Pose::from_yaw(
            [rng.random_range(-500.0..500.0), rng.random_range(-500.0..500.0), rng.random_range(-1.0..1.0)],
            rng.random_range(-PI..PI),
        );
        let lidar_to_ego = Pose::from_yaw([0.94, 0.0, 1.84], -FRAC_PI_2 + rng.random_range(-0.01..0.01));
        let lidar_to_global = ego_to_global.compose(&lidar_to_ego);
        let mut annotations = Vec::with_capacity(cfg.annotations_per_record);
        for _ in 0..cfg.annotations_per_record {
            let category = names[pick.sample(&mut rng)].clone();
            let mean = category_size(&category).expect("validated category");
            let size = mean.map(|m| m * (1.0 + rng.random_range(-cfg.size_jitter..=cfg.size_jitter)));
            let range = rng.random_range(cfg.min_range..cfg.max_range);
            let azimuth: f64 = rng.random_range(-PI..PI);
            let center = [range * azimuth.cos(), range * azimuth.sin(), size[2] / 2.0 - 1.84 + rng.random_range(-0.3..0.3)];
            let yaw = FRAC_PI_2 - rng.random_range(0.0..PI);
            let lidar_box = Box7::new(center, size, yaw).expect("positive sizes");
            let bbox = transform_box(&lidar_box, &lidar_to_global).expect("yaw-only poses");
            annotations.push(Annotation { category, bbox });
        }
        let rec = SceneRecord { sample_id: format!("synth-{}-{i:06}", cfg.seed), ego_to_global, lidar_to_ego, cameras: cameras.clone(), annotations };
        if let Processed::Samples(processed) = process_record(i, &rec) {
            for p in processed.into_iter().filter(|p| p.retained) {
                let mut input = maps.visual(&p.bbox);
                if cfg.noise_std > 0.0 {
                    input.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
                }
                input.extend(maps.text(&p.category));
                samples.push(TrainingSample {
                    sample_id: format!("{}/{}", p.sample_id, p.annotation),
                    category: p.category,
                    input,
                    target: p.bbox,
                });
            }
        }
        records.push(rec);
    }
    Ok(SynthDataset { records, samples })
}
