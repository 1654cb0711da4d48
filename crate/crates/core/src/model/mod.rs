//! Fusion transformer: concatenated visual/text features are projected to a
//! two-token sequence, passed through LoRA-adapted self-attention blocks and
//! regressed to a 7-DOF box by an MLP head.
//!
//! Trainable: the input projection, every LoRA factor and the MLP head.
//! Frozen: the attention base weights and the feed-forward blocks.

mod layers;

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use libm::{exp, log, log1p, sqrt};
use nalgebra::{DMatrix, DVector};

use crate::geom::{normalize_yaw, Box7, GeomError};
use crate::lora::{gaussian_matrix, LoraAdapter, LoraError, LoraTarget, WeightMatrix};
use crate::optim::AdamW;

pub use layers::{relu, relu_backward, AdaptedProjection, EncoderLayer, Linear, SelfAttention};

/// Tokens per sample: one visual, one text.
pub const TOKENS: usize = 2;
/// Smallest size the output map can produce (meters).
pub const SIZE_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("expected a {expected:?} feature, got {got:?}")]
    ModalityMismatch { expected: Modality, got: Modality },
    #[error("feature vector contains non-finite values")]
    NonFinite,
    #[error("activations were recorded before the latest parameter update")]
    StaleActivation,
    #[error("unknown or missing tensor `{0}`")]
    MissingTensor(String),
    #[error(transparent)]
    Lora(#[from] LoraError),
    #[error(transparent)]
    Geometry(#[from] GeomError),
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct ModelConfig {
    pub d_v: usize,
    pub d_t: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_hidden: usize,
    pub mlp_hidden: [usize; 3],
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub lora_targets: Vec<LoraTarget>,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_v: 32,
            d_t: 32,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            ffn_hidden: 128,
            mlp_hidden: [512, 256, 128],
            lora_rank: crate::lora::DEFAULT_RANK,
            lora_alpha: crate::lora::DEFAULT_ALPHA,
            lora_targets: LoraTarget::ALL.to_vec(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let counts = [
            ("d_v", self.d_v),
            ("d_t", self.d_t),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("ffn_hidden", self.ffn_hidden),
            ("mlp_hidden[0]", self.mlp_hidden[0]),
            ("mlp_hidden[1]", self.mlp_hidden[1]),
            ("mlp_hidden[2]", self.mlp_hidden[2]),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(ModelError::InvalidConfig(format!("{name} must be at least 1")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !self.lora_alpha.is_finite() {
            return Err(ModelError::InvalidConfig("lora_alpha must be finite".into()));
        }
        let mut targets = self.lora_targets.clone();
        targets.sort();
        targets.dedup();
        if targets.len() != self.lora_targets.len() {
            return Err(ModelError::InvalidConfig("lora_targets contains duplicates".into()));
        }
        if !self.lora_targets.is_empty() {
            if self.lora_rank == 0 {
                return Err(LoraError::ZeroRank.into());
            }
            if self.lora_rank > self.d_model {
                return Err(LoraError::RankTooLarge { rank: self.lora_rank, max: self.d_model }.into());
            }
        }
        Ok(())
    }

    pub fn d_in(&self) -> usize {
        self.d_v + self.d_t
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Modality {
    Visual,
    Text,
    Fused,
}

/// Tagged feature vector with finite entries.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FeatureVector {
    modality: Modality,
    values: Vec<f64>,
}

impl FeatureVector {
    pub fn new(modality: Modality, values: Vec<f64>) -> Result<Self, ModelError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite);
        }
        Ok(Self { modality, values })
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// `[visual; text]`.
pub fn concat_features(visual: &FeatureVector, text: &FeatureVector) -> Result<FeatureVector, ModelError> {
    if visual.modality != Modality::Visual {
        return Err(ModelError::ModalityMismatch { expected: Modality::Visual, got: visual.modality });
    }
    if text.modality != Modality::Text {
        return Err(ModelError::ModalityMismatch { expected: Modality::Text, got: text.modality });
    }
    let mut values = Vec::with_capacity(visual.dim() + text.dim());
    values.extend_from_slice(&visual.values);
    values.extend_from_slice(&text.values);
    Ok(FeatureVector { modality: Modality::Fused, values })
}

/// 128-dimensional embedding of a box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SemanticFeature([f64; SemanticFeature::DIM]);

impl SemanticFeature {
    pub const DIM: usize = 128;

    pub fn new(values: [f64; Self::DIM]) -> Result<Self, ModelError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite);
        }
        Ok(Self(values))
    }

    pub fn zeros() -> Self {
        Self([0.0; Self::DIM])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn squared_distance(&self, other: &SemanticFeature) -> f64 {
        self.0.iter().zip(other.0.iter()).map(|(a, b)| (a - b) * (a - b)).sum()
    }
}

/// Fixed linear map from box parameters to [`SemanticFeature`]s, shared by
/// predictions and ground truth. It is not trained: a trainable head could
/// drive the semantic loss to zero by collapsing to the zero map.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticHead {
    weight: DMatrix<f64>,
    bias: DVector<f64>,
}

impl SemanticHead {
    /// Entries `N(0, 1/128)`, zero bias, so `E||H d||^2 = ||d||^2`.
    pub fn seeded(seed: u64) -> Self {
        let std = 1.0 / sqrt(SemanticFeature::DIM as f64);
        Self { weight: gaussian_matrix(SemanticFeature::DIM, 7, std, seed), bias: DVector::zeros(SemanticFeature::DIM) }
    }

    pub fn from_parts(weight: DMatrix<f64>, bias: DVector<f64>) -> Result<Self, ModelError> {
        if weight.nrows() != SemanticFeature::DIM || bias.len() != SemanticFeature::DIM {
            return Err(ModelError::ShapeMismatch { expected: SemanticFeature::DIM, got: weight.nrows() });
        }
        if weight.ncols() != 7 {
            return Err(ModelError::ShapeMismatch { expected: 7, got: weight.ncols() });
        }
        Ok(Self { weight, bias })
    }

    pub fn weight(&self) -> &DMatrix<f64> {
        &self.weight
    }

    pub fn bias(&self) -> &DVector<f64> {
        &self.bias
    }

    pub fn project(&self, params: &[f64; 7]) -> SemanticFeature {
        let y = &self.weight * DVector::from_column_slice(params) + &self.bias;
        let mut out = [0.0; SemanticFeature::DIM];
        out.copy_from_slice(y.as_slice());
        SemanticFeature(out)
    }

    /// `H^T H`, the metric the semantic MSE induces on box parameters.
    pub fn gram(&self) -> DMatrix<f64> {
        self.weight.tr_mul(&self.weight)
    }
}

/// Free-function form of [`SemanticHead::project`].
pub fn semantic_project(params: &[f64; 7], head: &SemanticHead) -> SemanticFeature {
    head.project(params)
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        log1p(exp(x))
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + exp(-x))
}

fn inverse_softplus(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        log(libm::expm1(y))
    }
}

/// Fixed affine de-normalization from the head's raw outputs to box
/// parameters: `offset + scale * raw` for center and yaw, and
/// `softplus(offset + scale * raw)` for sizes.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct OutputMap {
    pub offset: [f64; 7],
    pub scale: [f64; 7],
}

impl Default for OutputMap {
    fn default() -> Self {
        let s = inverse_softplus(1.0);
        Self { offset: [0.0, 0.0, 0.0, s, s, s, 0.0], scale: [1.0; 7] }
    }
}

impl OutputMap {
    /// Centers the raw outputs on the target mean with unit raw variance.
    pub fn fit(targets: &[Box7]) -> Self {
        if targets.is_empty() {
            return Self::default();
        }
        let n = targets.len() as f64;
        let mut mean = [0.0; 7];
        for t in targets {
            for (m, v) in mean.iter_mut().zip(t.to_array()) {
                *m += v / n;
            }
        }
        let mut var = [0.0; 7];
        for t in targets {
            for (i, v) in t.to_array().into_iter().enumerate() {
                var[i] += (v - mean[i]) * (v - mean[i]) / n;
            }
        }
        let std = var.map(|v| sqrt(v).max(1e-2));
        let mut map = Self { offset: mean, scale: std };
        for i in 3..6 {
            let pre = inverse_softplus((mean[i] - SIZE_FLOOR).max(SIZE_FLOOR));
            map.offset[i] = pre;
            map.scale[i] = std[i] / sigmoid(pre);
        }
        map
    }

    pub fn apply(&self, raw: &[f64]) -> [f64; 7] {
        let mut out = [0.0; 7];
        for i in 0..7 {
            let z = self.offset[i] + self.scale[i] * raw[i];
            out[i] = match i {
                3..=5 => softplus(z) + SIZE_FLOOR,
                6 => normalize_yaw(z),
                _ => z,
            };
        }
        out
    }

    /// Elementwise derivative of [`OutputMap::apply`].
    pub fn derivative(&self, raw: &[f64]) -> [f64; 7] {
        let mut out = [0.0; 7];
        for i in 0..7 {
            out[i] = match i {
                3..=5 => self.scale[i] * sigmoid(self.offset[i] + self.scale[i] * raw[i]),
                _ => self.scale[i],
            };
        }
        out
    }
}

/// Everything recorded by [`FusionModel::forward_batch`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    generation: u64,
    input: DMatrix<f64>,
    layers: Vec<layers::EncoderCache>,
    head_inputs: Vec<DMatrix<f64>>,
    head_pre: Vec<DMatrix<f64>>,
    raw: DMatrix<f64>,
}

impl ForwardCache {
    pub fn batch_size(&self) -> usize {
        self.input.ncols()
    }
}

/// Gradients for the trainable tensors, in [`FusionModel::trainable`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn as_slices(&self) -> Vec<&[f64]> {
        self.tensors.iter().map(Vec::as_slice).collect()
    }

    pub fn is_zero(&self) -> bool {
        self.tensors.iter().flatten().all(|v| *v == 0.0)
    }
}

/// Parameter accounting printed when a model is built.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainableReport {
    pub total_params: usize,
    pub lora_params: usize,
    /// Input projection plus MLP head.
    pub head_params: usize,
    pub frozen_params: usize,
}

impl TrainableReport {
    pub fn trainable_params(&self) -> usize {
        self.lora_params + self.head_params
    }

    pub fn trainable_fraction(&self) -> f64 {
        self.trainable_params() as f64 / self.total_params as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionModel {
    config: ModelConfig,
    projection: Linear,
    layers: Vec<EncoderLayer>,
    head: Vec<Linear>,
    output: OutputMap,
    generation: u64,
}

fn sub_seed(seed: u64, tag: u64) -> u64 {
    seed ^ tag.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

impl FusionModel {
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let seed = config.seed;
        let d = config.d_model;
        let d_in = config.d_in();
        let mut tag = 0u64;
        let mut next = || {
            tag += 1;
            sub_seed(seed, tag)
        };
        let projection = Linear::new(
            gaussian_matrix(TOKENS * d, d_in, 1.0 / sqrt(d_in as f64), next()),
            DVector::zeros(TOKENS * d),
        );
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let proj = LoraTarget::ALL.map(|t| {
                let base = WeightMatrix::new(gaussian_matrix(d, d, 1.0 / sqrt(d as f64), next())).expect("finite");
                let adapter_seed = next();
                let adapter = config
                    .lora_targets
                    .contains(&t)
                    .then(|| LoraAdapter::init(d, d, config.lora_rank, config.lora_alpha, adapter_seed).expect("validated rank"));
                AdaptedProjection { base, adapter }
            });
            let ffn_in = Linear::new(
                gaussian_matrix(config.ffn_hidden, d, sqrt(2.0 / d as f64), next()),
                DVector::zeros(config.ffn_hidden),
            );
            let ffn_out = Linear::new(
                gaussian_matrix(d, config.ffn_hidden, sqrt(1.0 / config.ffn_hidden as f64), next()),
                DVector::zeros(d),
            );
            layers.push(EncoderLayer { attention: SelfAttention { proj, n_heads: config.n_heads }, ffn_in, ffn_out });
        }
        let widths = [TOKENS * d, config.mlp_hidden[0], config.mlp_hidden[1], config.mlp_hidden[2], 7];
        let head = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let last = i == 3;
                let std = if last { 0.1 / sqrt(w[0] as f64) } else { sqrt(2.0 / w[0] as f64) };
                Linear::new(gaussian_matrix(w[1], w[0], std, next()), DVector::zeros(w[1]))
            })
            .collect();
        Ok(Self { config, projection, layers, head, output: OutputMap::default(), generation: 0 })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn output_map(&self) -> &OutputMap {
        &self.output
    }

    pub fn set_output_map(&mut self, map: OutputMap) {
        self.output = map;
        self.generation += 1;
    }

    pub fn adapters(&self) -> Vec<&LoraAdapter> {
        self.layers.iter().flat_map(|l| l.attention.proj.iter().filter_map(|p| p.adapter.as_ref())).collect()
    }

    pub fn report(&self) -> TrainableReport {
        let lora_params: usize = self.adapters().iter().map(|a| a.trainable_params()).sum();
        let head_params = self.projection.param_count() + self.head.iter().map(Linear::param_count).sum::<usize>();
        let frozen_params = self.frozen().iter().map(|t| t.len()).sum();
        TrainableReport { total_params: lora_params + head_params + frozen_params, lora_params, head_params, frozen_params }
    }

    /// Trainable tensors in optimizer order: projection weight and bias,
    /// then `A`, `B` for every adapter (layer-major, target order), then each
    /// head layer's weight and bias.
    pub fn trainable(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        out.push(self.projection.weight.as_slice());
        out.push(self.projection.bias.as_slice());
        for layer in &self.layers {
            for ad in layer.attention.proj.iter().filter_map(|p| p.adapter.as_ref()) {
                out.push(ad.a().as_slice());
                out.push(ad.b().as_slice());
            }
        }
        for lin in &self.head {
            out.push(lin.weight.as_slice());
            out.push(lin.bias.as_slice());
        }
        out
    }

    fn trainable_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        out.push(self.projection.weight.as_mut_slice());
        out.push(self.projection.bias.as_mut_slice());
        for layer in &mut self.layers {
            for ad in layer.attention.proj.iter_mut().filter_map(|p| p.adapter.as_mut()) {
                let (a, b) = ad.factors_mut();
                out.push(a.as_mut_slice());
                out.push(b.as_mut_slice());
            }
        }
        for lin in &mut self.head {
            out.push(lin.weight.as_mut_slice());
            out.push(lin.bias.as_mut_slice());
        }
        out
    }

    pub fn trainable_sizes(&self) -> Vec<usize> {
        self.trainable().iter().map(|t| t.len()).collect()
    }

    /// Frozen base tensors: attention weights and feed-forward blocks.
    pub fn frozen(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for layer in &self.layers {
            for p in &layer.attention.proj {
                out.push(p.base.matrix().as_slice());
            }
            for lin in [&layer.ffn_in, &layer.ffn_out] {
                out.push(lin.weight.as_slice());
                out.push(lin.bias.as_slice());
            }
        }
        out
    }

    /// Every tensor with a stable name and `(rows, cols)` shape.
    pub fn named_tensors(&self) -> Vec<(String, (usize, usize), &[f64])> {
        let mut out = Vec::new();
        let w = &self.projection.weight;
        out.push(("projection.weight".into(), (w.nrows(), w.ncols()), w.as_slice()));
        push_vec(&mut out, "projection.bias".into(), &self.projection.bias);
        for (li, layer) in self.layers.iter().enumerate() {
            for (t, p) in LoraTarget::ALL.iter().zip(&layer.attention.proj) {
                let key = target_key(*t);
                out.push((format!("layers.{li}.{key}.base"), (p.base.d_out(), p.base.d_in()), p.base.matrix().as_slice()));
                if let Some(ad) = &p.adapter {
                    out.push((format!("layers.{li}.{key}.lora_a"), (ad.a().nrows(), ad.a().ncols()), ad.a().as_slice()));
                    out.push((format!("layers.{li}.{key}.lora_b"), (ad.b().nrows(), ad.b().ncols()), ad.b().as_slice()));
                }
            }
            for (name, lin) in [("ffn_in", &layer.ffn_in), ("ffn_out", &layer.ffn_out)] {
                out.push((format!("layers.{li}.{name}.weight"), (lin.d_out(), lin.d_in()), lin.weight.as_slice()));
                push_vec(&mut out, format!("layers.{li}.{name}.bias"), &lin.bias);
            }
        }
        for (i, lin) in self.head.iter().enumerate() {
            out.push((format!("head.{i}.weight"), (lin.d_out(), lin.d_in()), lin.weight.as_slice()));
            push_vec(&mut out, format!("head.{i}.bias"), &lin.bias);
        }
        out
    }

    /// Overwrites tensors by name; every tensor of [`Self::named_tensors`]
    /// must be supplied with matching length.
    pub fn load_tensors<'a>(&mut self, mut lookup: impl FnMut(&str) -> Option<&'a [f64]>) -> Result<(), ModelError> {
        let names: Vec<(String, usize)> = self.named_tensors().into_iter().map(|(n, _, v)| (n, v.len())).collect();
        let mut values = Vec::with_capacity(names.len());
        for (name, len) in &names {
            let data = lookup(name).ok_or_else(|| ModelError::MissingTensor(name.clone()))?;
            if data.len() != *len {
                return Err(ModelError::ShapeMismatch { expected: *len, got: data.len() });
            }
            if data.iter().any(|v| !v.is_finite()) {
                return Err(ModelError::NonFinite);
            }
            values.push(data);
        }
        let mut slots = self.all_tensors_mut();
        for (slot, data) in slots.iter_mut().zip(values) {
            slot.copy_from_slice(data);
        }
        self.generation += 1;
        Ok(())
    }

    fn all_tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        out.push(self.projection.weight.as_mut_slice());
        out.push(self.projection.bias.as_mut_slice());
        for layer in &mut self.layers {
            for p in &mut layer.attention.proj {
                out.push(base_mut(&mut p.base));
                if let Some(ad) = &mut p.adapter {
                    let (a, b) = ad.factors_mut();
                    out.push(a.as_mut_slice());
                    out.push(b.as_mut_slice());
                }
            }
            for lin in [&mut layer.ffn_in, &mut layer.ffn_out] {
                out.push(lin.weight.as_mut_slice());
                out.push(lin.bias.as_mut_slice());
            }
        }
        for lin in &mut self.head {
            out.push(lin.weight.as_mut_slice());
            out.push(lin.bias.as_mut_slice());
        }
        out
    }

    /// Adds `delta` to one trainable scalar.
    pub fn perturb_trainable(&mut self, tensor: usize, index: usize, delta: f64) {
        self.trainable_mut()[tensor][index] += delta;
        self.generation += 1;
    }

    /// One optimizer update of the trainable tensors.
    pub fn apply_gradients(&mut self, optimizer: &mut AdamW, lr: f64, grads: &Gradients) {
        let g = grads.as_slices();
        let mut params = self.trainable_mut();
        optimizer.step(lr, &mut params, &g);
        self.generation += 1;
    }

    fn check_input(&self, rows: usize) -> Result<(), ModelError> {
        if rows != self.config.d_in() {
            return Err(ModelError::ShapeMismatch { expected: self.config.d_in(), got: rows });
        }
        Ok(())
    }

    /// Forward pass over a batch of fused inputs (one column per sample).
    /// Returns box parameters `7 x B` after the output map.
    pub fn forward_batch(&self, inputs: &DMatrix<f64>) -> Result<(DMatrix<f64>, ForwardCache), ModelError> {
        self.check_input(inputs.nrows())?;
        let d = self.config.d_model;
        let n = inputs.ncols();
        let projected = self.projection.forward(inputs);
        let mut x = DMatrix::zeros(d, TOKENS * n);
        for b in 0..n {
            for t in 0..TOKENS {
                x.column_mut(TOKENS * b + t).copy_from(&projected.view((t * d, b), (d, 1)));
            }
        }
        let mut layer_caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, cache) = layer.forward(&x, TOKENS);
            layer_caches.push(cache);
            x = y;
        }
        let mut z = DMatrix::zeros(TOKENS * d, n);
        for b in 0..n {
            for t in 0..TOKENS {
                z.view_mut((t * d, b), (d, 1)).copy_from(&x.column(TOKENS * b + t));
            }
        }
        let mut head_inputs = Vec::with_capacity(self.head.len());
        let mut head_pre = Vec::with_capacity(self.head.len());
        let last = self.head.len() - 1;
        for (i, lin) in self.head.iter().enumerate() {
            let pre = lin.forward(&z);
            head_inputs.push(z);
            z = if i == last { pre.clone() } else { relu(&pre) };
            head_pre.push(pre);
        }
        let raw = z;
        let mut boxes = DMatrix::zeros(7, n);
        for b in 0..n {
            let params = self.output.apply(raw.column(b).as_slice());
            boxes.column_mut(b).copy_from_slice(&params);
        }
        let cache = ForwardCache { generation: self.generation, input: inputs.clone(), layers: layer_caches, head_inputs, head_pre, raw };
        Ok((boxes, cache))
    }

    /// Box parameters `[x, y, z, l, w, h, yaw]` for one fused input.
    pub fn forward(&self, fused: &FeatureVector) -> Result<[f64; 7], ModelError> {
        if fused.modality() != Modality::Fused {
            return Err(ModelError::ModalityMismatch { expected: Modality::Fused, got: fused.modality() });
        }
        let input = DMatrix::from_column_slice(fused.dim(), 1, fused.values());
        let (boxes, _) = self.forward_batch(&input)?;
        let mut out = [0.0; 7];
        out.copy_from_slice(boxes.as_slice());
        Ok(out)
    }

    pub fn predict(&self, fused: &FeatureVector) -> Result<Box7, ModelError> {
        Ok(Box7::from_array(self.forward(fused)?)?)
    }

    /// Reverse-mode gradients of `sum(upstream .* boxes)` with respect to the
    /// trainable tensors, where `upstream` is `7 x B` (gradient of the loss
    /// with respect to the box parameters of each sample).
    pub fn backward(&self, cache: &ForwardCache, upstream: &DMatrix<f64>) -> Result<Gradients, ModelError> {
        if cache.generation != self.generation {
            return Err(ModelError::StaleActivation);
        }
        let n = cache.batch_size();
        if upstream.nrows() != 7 || upstream.ncols() != n {
            return Err(ModelError::ShapeMismatch { expected: 7 * n, got: upstream.len() });
        }
        let d = self.config.d_model;
        let mut d_raw = upstream.clone();
        for b in 0..n {
            let slope = self.output.derivative(cache.raw.column(b).as_slice());
            for i in 0..7 {
                d_raw[(i, b)] *= slope[i];
            }
        }
        let mut head_grads = Vec::with_capacity(self.head.len());
        let mut dz = d_raw;
        for i in (0..self.head.len()).rev() {
            let (dx, dw, db) = self.head[i].backward(&cache.head_inputs[i], &dz);
            head_grads.push((dw, db));
            dz = if i > 0 { relu_backward(&cache.head_pre[i - 1], &dx) } else { dx };
        }
        head_grads.reverse();

        let mut dx = DMatrix::zeros(d, TOKENS * n);
        for b in 0..n {
            for t in 0..TOKENS {
                dx.column_mut(TOKENS * b + t).copy_from(&dz.view((t * d, b), (d, 1)));
            }
        }
        let mut layer_grads = Vec::with_capacity(self.layers.len());
        for (layer, lc) in self.layers.iter().zip(&cache.layers).rev() {
            let (dprev, grads) = layer.backward(lc, &dx, TOKENS);
            layer_grads.push(grads);
            dx = dprev;
        }
        layer_grads.reverse();

        let mut dp = DMatrix::zeros(TOKENS * d, n);
        for b in 0..n {
            for t in 0..TOKENS {
                dp.view_mut((t * d, b), (d, 1)).copy_from(&dx.column(TOKENS * b + t));
            }
        }
        let (_, dw_p, db_p) = self.projection.backward(&cache.input, &dp);

        let mut tensors = Vec::with_capacity(self.trainable_sizes().len());
        tensors.push(dw_p.as_slice().to_vec());
        tensors.push(db_p.as_slice().to_vec());
        for (layer, grads) in self.layers.iter().zip(layer_grads) {
            for (p, g) in layer.attention.proj.iter().zip(grads) {
                if p.adapter.is_some() {
                    let (da, dbm) = g.expect("adapter gradients present for adapted projection");
                    tensors.push(da.as_slice().to_vec());
                    tensors.push(dbm.as_slice().to_vec());
                }
            }
        }
        for (dw, db) in head_grads {
            tensors.push(dw.as_slice().to_vec());
            tensors.push(db.as_slice().to_vec());
        }
        Ok(Gradients { tensors })
    }

    /// Backward pass for a single input; runs its own forward.
    pub fn backward_head(&self, fused: &FeatureVector, upstream: &[f64; 7]) -> Result<Gradients, ModelError> {
        let input = DMatrix::from_column_slice(fused.dim(), 1, fused.values());
        let (_, cache) = self.forward_batch(&input)?;
        self.backward(&cache, &DMatrix::from_column_slice(7, 1, upstream))
    }
}

fn push_vec<'a>(out: &mut Vec<(String, (usize, usize), &'a [f64])>, name: String, v: &'a DVector<f64>) {
    out.push((name, (v.len(), 1), v.as_slice()));
}

fn target_key(t: LoraTarget) -> &'static str {
    match t {
        LoraTarget::Query => "q",
        LoraTarget::Key => "k",
        LoraTarget::Value => "v",
        LoraTarget::Output => "o",
    }
}

fn base_mut(w: &mut WeightMatrix) -> &mut [f64] {
    w.matrix_mut().as_mut_slice()
}

#[cfg(test)]
mod tests;
