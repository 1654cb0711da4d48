//! Mini-batch training of a [`FusionModel`] under a two-stage [`LossSchedule`].

use alloc::string::String;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::geom::Box7;
use crate::iou::{iou_3d, iou_loss_grad, DEFAULT_FD_STEPS};
use crate::loss::{combined_loss, LossError, LossSchedule, MseReduction};
use crate::model::{FusionModel, ModelError, OutputMap, SemanticFeature, SemanticHead};
use crate::optim::{AdamW, AdamWConfig};

/// One supervised example: fused input features and the target box.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainingSample {
    pub sample_id: String,
    pub category: String,
    pub input: Vec<f64>,
    pub target: Box7,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct TrainerConfig {
    pub batch_size: usize,
    pub schedule: LossSchedule,
    pub optimizer: AdamWConfig,
    pub mse_reduction: MseReduction,
    /// Seed of the frozen semantic projection head.
    pub semantic_seed: u64,
    /// Seed of the per-epoch shuffle.
    pub shuffle_seed: u64,
    /// Finite-difference steps for the IoU-loss gradient.
    pub fd_steps: [f64; 7],
    /// Fit the model's output map to the training targets before the first epoch.
    pub fit_output_map: bool,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            schedule: LossSchedule::default(),
            optimizer: AdamWConfig::default(),
            mse_reduction: MseReduction::default(),
            semantic_seed: 0,
            shuffle_seed: 0,
            fd_steps: DEFAULT_FD_STEPS,
            fit_output_map: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrainError {
    #[error("training set is empty")]
    EmptyDataset,
    #[error("batch size must be at least 1")]
    ZeroBatch,
    #[error("sample {index} has {got} input features, model expects {expected}")]
    InputDim { index: usize, expected: usize, got: usize },
    #[error("training finished: all {0} epochs already run")]
    Finished(u32),
    #[error("non-finite loss in epoch {epoch}")]
    Diverged { epoch: u32 },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Per-epoch record written to the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EpochLog {
    pub epoch: u32,
    pub stage: u8,
    pub lambda_mse: f64,
    pub lambda_iou: f64,
    pub lr: f64,
    pub loss_mse: f64,
    pub loss_iou: f64,
    pub loss_total: f64,
    /// Mean per-sample IoU on the validation split, if one was given.
    pub val_miou: Option<f64>,
    /// Samples whose IoU gradient was unavailable (no overlap or a clipping kink).
    pub skipped_iou_grads: usize,
}

#[derive(Debug, Clone)]
pub struct Trainer {
    model: FusionModel,
    head: SemanticHead,
    optimizer: AdamW,
    config: TrainerConfig,
    epoch: u32,
}

impl Trainer {
    pub fn new(mut model: FusionModel, config: TrainerConfig, train: &[TrainingSample]) -> Result<Self, TrainError> {
        config.schedule.validate()?;
        if config.batch_size == 0 {
            return Err(TrainError::ZeroBatch);
        }
        check_inputs(&model, train)?;
        if train.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        if config.fit_output_map {
            let targets: Vec<Box7> = train.iter().map(|s| s.target).collect();
            model.set_output_map(OutputMap::fit(&targets));
        }
        let optimizer = AdamW::new(config.optimizer, &model.trainable_sizes());
        let head = SemanticHead::seeded(config.semantic_seed);
        Ok(Self { model, head, optimizer, config, epoch: 0 })
    }

    pub fn model(&self) -> &FusionModel {
        &self.model
    }

    pub fn into_model(self) -> FusionModel {
        self.model
    }

    pub fn semantic_head(&self) -> &SemanticHead {
        &self.head
    }

    pub fn config(&self) -> &TrainerConfig {
        &self.config
    }

    /// Epochs completed so far.
    pub fn epoch(&self) -> u32 {
        self.epoch
    }

    /// Replaces the schedule for the remaining epochs, e.g. to branch a
    /// run after a shared first stage.
    pub fn set_schedule(&mut self, schedule: LossSchedule) -> Result<(), TrainError> {
        schedule.validate()?;
        self.config.schedule = schedule;
        Ok(())
    }

    pub fn run_epoch(&mut self, train: &[TrainingSample], val: &[TrainingSample]) -> Result<EpochLog, TrainError> {
        if train.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        check_inputs(&self.model, train)?;
        check_inputs(&self.model, val)?;
        let epoch = self.epoch + 1;
        if epoch > self.config.schedule.total_epochs {
            return Err(TrainError::Finished(self.config.schedule.total_epochs));
        }
        let stage = self.config.schedule.stage(epoch)?;
        let weights = self.config.schedule.weights(epoch)?;

        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.shuffle_seed ^ (u64::from(epoch) << 32));
        order.shuffle(&mut rng);

        let gram = self.head.gram();
        let mse_scale = self.config.mse_reduction.scale(SemanticFeature::DIM);
        let (mut sum_mse, mut sum_iou, mut skipped) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(self.config.batch_size) {
            let n = chunk.len();
            let inputs = input_matrix(chunk.iter().map(|&i| train[i].input.as_slice()), self.model.config().d_in());
            let (boxes, cache) = self.model.forward_batch(&inputs)?;
            let mut upstream = DMatrix::zeros(7, n);
            let (mut batch_mse, mut batch_iou) = (0.0, 0.0);
            for (b, &i) in chunk.iter().enumerate() {
                let pred: [f64; 7] = core::array::from_fn(|k| boxes[(k, b)]);
                let target = train[i].target;
                let diff = DVector::from_fn(7, |k, _| pred[k] - target.to_array()[k]);
                let g_diff = &gram * &diff;
                batch_mse += mse_scale * diff.dot(&g_diff);

                let pred_box = Box7::from_array(pred).map_err(ModelError::from)?;
                batch_iou += 1.0 - iou_3d(&pred_box, &target).iou;

                let mut col = g_diff * (2.0 * mse_scale * weights.lambda_mse / n as f64);
                if weights.lambda_iou > 0.0 {
                    match iou_loss_grad(&pred_box, &target, &self.config.fd_steps) {
                        Ok(g) => {
                            for k in 0..7 {
                                col[k] += weights.lambda_iou * g[k] / n as f64;
                            }
                        }
                        Err(_) => skipped += 1,
                    }
                }
                upstream.column_mut(b).copy_from(&col);
            }
            if !(batch_mse.is_finite() && batch_iou.is_finite()) {
                return Err(TrainError::Diverged { epoch });
            }
            sum_mse += batch_mse;
            sum_iou += batch_iou;
            let grads = self.model.backward(&cache, &upstream)?;
            if grads.tensors.iter().flatten().any(|g| !g.is_finite()) {
                return Err(TrainError::Diverged { epoch });
            }
            self.model.apply_gradients(&mut self.optimizer, weights.lr, &grads);
        }
        self.epoch = epoch;
        let loss_mse = sum_mse / train.len() as f64;
        let loss_iou = sum_iou / train.len() as f64;
        let loss_total = combined_loss(loss_mse, loss_iou, weights.lambda_mse, weights.lambda_iou);
        if !loss_total.is_finite() {
            return Err(TrainError::Diverged { epoch });
        }
        let val_miou = if val.is_empty() { None } else { Some(mean_iou(&self.model, val)?) };
        Ok(EpochLog {
            epoch,
            stage,
            lambda_mse: weights.lambda_mse,
            lambda_iou: weights.lambda_iou,
            lr: weights.lr,
            loss_mse,
            loss_iou,
            loss_total,
            val_miou,
            skipped_iou_grads: skipped,
        })
    }

    /// Runs the remaining epochs of the schedule.
    pub fn fit(
        &mut self,
        train: &[TrainingSample],
        val: &[TrainingSample],
        mut on_epoch: impl FnMut(&EpochLog),
    ) -> Result<Vec<EpochLog>, TrainError> {
        let mut logs = Vec::new();
        while self.epoch < self.config.schedule.total_epochs {
            let log = self.run_epoch(train, val)?;
            on_epoch(&log);
            logs.push(log);
        }
        Ok(logs)
    }

    /// Runs epochs until `epoch` epochs have completed in total.
    pub fn fit_until(
        &mut self,
        epoch: u32,
        train: &[TrainingSample],
        val: &[TrainingSample],
        mut on_epoch: impl FnMut(&EpochLog),
    ) -> Result<Vec<EpochLog>, TrainError> {
        let mut logs = Vec::new();
        while self.epoch < epoch.min(self.config.schedule.total_epochs) {
            let log = self.run_epoch(train, val)?;
            on_epoch(&log);
            logs.push(log);
        }
        Ok(logs)
    }
}

fn check_inputs(model: &FusionModel, samples: &[TrainingSample]) -> Result<(), TrainError> {
    let expected = model.config().d_in();
    for (index, s) in samples.iter().enumerate() {
        if s.input.len() != expected {
            return Err(TrainError::InputDim { index, expected, got: s.input.len() });
        }
    }
    Ok(())
}

fn input_matrix<'a>(inputs: impl Iterator<Item = &'a [f64]>, d: usize) -> DMatrix<f64> {
    let data: Vec<f64> = inputs.flat_map(|x| x.iter().copied()).collect();
    let n = data.len() / d;
    DMatrix::from_vec(d, n, data)
}

/// Predicted boxes for `inputs`, evaluated in chunks.
pub fn predict_boxes<'a>(model: &FusionModel, inputs: impl IntoIterator<Item = &'a [f64]>) -> Result<Vec<Box7>, ModelError> {
    let d = model.config().d_in();
    let inputs: Vec<&[f64]> = inputs.into_iter().collect();
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(256) {
        for x in chunk {
            if x.len() != d {
                return Err(ModelError::ShapeMismatch { expected: d, got: x.len() });
            }
        }
        let (boxes, _) = model.forward_batch(&input_matrix(chunk.iter().copied(), d))?;
        for col in boxes.column_iter() {
            out.push(Box7::from_array(core::array::from_fn(|k| col[k]))?);
        }
    }
    Ok(out)
}

/// Mean per-sample IoU between predictions and targets (0 for an empty set).
pub fn mean_iou(model: &FusionModel, samples: &[TrainingSample]) -> Result<f64, ModelError> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let preds = predict_boxes(model, samples.iter().map(|s| s.input.as_slice()))?;
    let total: f64 = preds.iter().zip(samples).map(|(p, s)| iou_3d(p, &s.target).iou).sum();
    Ok(total / samples.len() as f64)
}
