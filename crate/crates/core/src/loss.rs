//! Semantic MSE, the weighted combined loss, and the two-stage schedule.

use crate::model::SemanticFeature;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LossError {
    #[error("prediction batch has {pred} items, ground truth has {gt}")]
    LengthMismatch { pred: usize, gt: usize },
    #[error("batch is empty")]
    EmptyBatch,
    #[error("epoch {epoch} outside 1..={total}")]
    EpochOutOfRange { epoch: u32, total: u32 },
    #[error("invalid schedule: {0}")]
    InvalidSchedule(&'static str),
}

/// How the squared feature distance is reduced per sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum MseReduction {
    /// `||f_pred - f_gt||^2`, averaged over the batch only.
    #[default]
    SumOverDims,
    /// Additionally divided by the feature dimension.
    MeanOverDims,
}

impl MseReduction {
    pub fn scale(self, dims: usize) -> f64 {
        match self {
            MseReduction::SumOverDims => 1.0,
            MseReduction::MeanOverDims => 1.0 / dims as f64,
        }
    }
}

/// `(1/N) sum_i ||pred_i - gt_i||^2` under `reduction`.
pub fn mse_semantic_loss(pred: &[SemanticFeature], gt: &[SemanticFeature], reduction: MseReduction) -> Result<f64, LossError> {
    if pred.len() != gt.len() {
        return Err(LossError::LengthMismatch { pred: pred.len(), gt: gt.len() });
    }
    if pred.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let total: f64 = pred.iter().zip(gt).map(|(p, g)| p.squared_distance(g)).sum();
    Ok(total * reduction.scale(SemanticFeature::DIM) / pred.len() as f64)
}

/// `lambda_mse * mse + lambda_iou * iou_loss`.
pub fn combined_loss(mse: f64, iou_loss: f64, lambda_mse: f64, lambda_iou: f64) -> f64 {
    lambda_mse * mse + lambda_iou * iou_loss
}

/// Loss weights and learning rate for one stage.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct StageWeights {
    pub lambda_mse: f64,
    pub lambda_iou: f64,
    pub lr: f64,
}

/// Epoch-indexed two-stage schedule. Epochs are 1-based; epochs up to and
/// including `transition_epoch` use `stage1`, later ones `stage2`.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct LossSchedule {
    pub transition_epoch: u32,
    pub total_epochs: u32,
    pub stage1: StageWeights,
    pub stage2: StageWeights,
}

impl Default for LossSchedule {
    fn default() -> Self {
        Self {
            transition_epoch: 50,
            total_epochs: 100,
            stage1: StageWeights { lambda_mse: 1.0, lambda_iou: 0.0, lr: 1e-4 },
            stage2: StageWeights { lambda_mse: 0.2, lambda_iou: 0.8, lr: 1e-5 },
        }
    }
}

impl LossSchedule {
    /// Same learning rates and epochs, but semantic MSE only in both stages.
    pub fn mse_only(&self) -> Self {
        let mut s = *self;
        s.stage2.lambda_mse = s.stage1.lambda_mse;
        s.stage2.lambda_iou = 0.0;
        s
    }

    pub fn validate(&self) -> Result<(), LossError> {
        if self.total_epochs == 0 {
            return Err(LossError::InvalidSchedule("total_epochs must be at least 1"));
        }
        if self.transition_epoch >= self.total_epochs {
            return Err(LossError::InvalidSchedule("transition_epoch must be below total_epochs"));
        }
        for w in [self.stage1, self.stage2] {
            if !(w.lambda_mse >= 0.0 && w.lambda_iou >= 0.0) || !w.lambda_mse.is_finite() || !w.lambda_iou.is_finite() {
                return Err(LossError::InvalidSchedule("loss weights must be finite and non-negative"));
            }
            if !(w.lr > 0.0 && w.lr.is_finite()) {
                return Err(LossError::InvalidSchedule("learning rates must be positive"));
            }
        }
        Ok(())
    }

    /// Stage number (1 or 2) for a 1-based epoch.
    pub fn stage(&self, epoch: u32) -> Result<u8, LossError> {
        if epoch == 0 || epoch > self.total_epochs {
            return Err(LossError::EpochOutOfRange { epoch, total: self.total_epochs });
        }
        Ok(if epoch <= self.transition_epoch { 1 } else { 2 })
    }

    pub fn weights(&self, epoch: u32) -> Result<StageWeights, LossError> {
        Ok(match self.stage(epoch)? {
            1 => self.stage1,
            _ => self.stage2,
        })
    }
}

/// Free-function form of [`LossSchedule::weights`].
pub fn schedule_weights(s: &LossSchedule, epoch: u32) -> Result<StageWeights, LossError> {
    s.weights(epoch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec::Vec;
    use proptest::prelude::*;

    fn basis(i: usize, scale: f64) -> SemanticFeature {
        let mut v = [0.0; SemanticFeature::DIM];
        v[i] = scale;
        SemanticFeature::new(v).unwrap()
    }

    #[test]
    fn mse_examples() {
        let z = SemanticFeature::zeros();
        let red = MseReduction::SumOverDims;
        assert_eq!(mse_semantic_loss(&[basis(3, 1.0)], &[basis(3, 1.0)], red).unwrap(), 0.0);
        assert_eq!(mse_semantic_loss(&[basis(0, 1.0)], &[z], red).unwrap(), 1.0);
        // squared norms 1 and 3
        let mut three = [0.0; SemanticFeature::DIM];
        three[..3].copy_from_slice(&[1.0; 3]);
        let three = SemanticFeature::new(three).unwrap();
        assert_eq!(mse_semantic_loss(&[basis(0, 1.0), three], &[z, z], red).unwrap(), 2.0);
        assert_eq!(mse_semantic_loss(&[basis(0, 1.0)], &[z], MseReduction::MeanOverDims).unwrap(), 1.0 / 128.0);
    }

    #[test]
    fn mse_errors() {
        let z = SemanticFeature::zeros();
        assert_eq!(mse_semantic_loss(&[z], &[z, z], MseReduction::SumOverDims), Err(LossError::LengthMismatch { pred: 1, gt: 2 }));
        assert_eq!(mse_semantic_loss(&[], &[], MseReduction::SumOverDims), Err(LossError::EmptyBatch));
    }

    #[test]
    fn schedule_examples() {
        let s = LossSchedule::default();
        s.validate().unwrap();
        assert_eq!(schedule_weights(&s, 10).unwrap(), StageWeights { lambda_mse: 1.0, lambda_iou: 0.0, lr: 1e-4 });
        assert_eq!(schedule_weights(&s, 60).unwrap(), StageWeights { lambda_mse: 0.2, lambda_iou: 0.8, lr: 1e-5 });
        assert_eq!(s.stage(50).unwrap(), 1);
        assert_eq!(s.stage(51).unwrap(), 2);
        assert_eq!(s.stage(100).unwrap(), 2);
        assert_eq!(s.weights(0), Err(LossError::EpochOutOfRange { epoch: 0, total: 100 }));
        assert_eq!(s.weights(101), Err(LossError::EpochOutOfRange { epoch: 101, total: 100 }));
    }

    #[test]
    fn schedule_validation() {
        let s = LossSchedule { transition_epoch: 100, ..Default::default() };
        assert!(s.validate().is_err());
        let mut s = LossSchedule::default();
        s.stage2.lr = 0.0;
        assert!(s.validate().is_err());
        let mut s = LossSchedule::default();
        s.stage1.lambda_iou = -0.1;
        assert!(s.validate().is_err());
        let m = LossSchedule::default().mse_only();
        assert_eq!(m.stage2, StageWeights { lambda_mse: 1.0, lambda_iou: 0.0, lr: 1e-5 });
    }

    #[test]
    fn combined_examples() {
        assert_eq!(combined_loss(5.0, 0.4, 1.0, 0.0), 5.0);
        assert!((combined_loss(5.0, 0.4, 0.2, 0.8) - 1.32).abs() < 1e-12);
        assert_eq!(combined_loss(0.0, 0.0, 0.3, 0.9), 0.0);
    }

    fn arb_feature() -> impl Strategy<Value = SemanticFeature> {
        prop::collection::vec(-5.0..5.0f64, SemanticFeature::DIM).prop_map(|v| {
            let mut a = [0.0; SemanticFeature::DIM];
            a.copy_from_slice(&v);
            SemanticFeature::new(a).unwrap()
        })
    }

    proptest! {
        #[test]
        fn mse_symmetric_and_permutation_invariant(pairs in prop::collection::vec((arb_feature(), arb_feature()), 1..6), rot in 0usize..6) {
            let (p, g): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
            let red = MseReduction::SumOverDims;
            let base = mse_semantic_loss(&p, &g, red).unwrap();
            prop_assert!(base >= 0.0);
            prop_assert_eq!(base, mse_semantic_loss(&g, &p, red).unwrap());
            let k = rot % p.len();
            let (mut p2, mut g2) = (p.clone(), g.clone());
            p2.rotate_left(k);
            g2.rotate_left(k);
            prop_assert!((mse_semantic_loss(&p2, &g2, red).unwrap() - base).abs() <= 1e-9 * base.max(1.0));
            prop_assert_eq!(mse_semantic_loss(&p, &p, red).unwrap(), 0.0);
        }

        #[test]
        fn combined_monotone(m in 0.0..10.0f64, i in 0.0..1.0f64, dm in 0.0..1.0f64, di in 0.0..1.0f64, l1 in 0.0..2.0f64, l2 in 0.0..2.0f64) {
            prop_assert!(combined_loss(m + dm, i, l1, l2) >= combined_loss(m, i, l1, l2));
            prop_assert!(combined_loss(m, i + di, l1, l2) >= combined_loss(m, i, l1, l2));
            prop_assert_eq!(combined_loss(m, i, 1.0, 0.0), combined_loss(m, i + di, 1.0, 0.0));
        }

        #[test]
        fn schedule_is_step_function(e1 in 1u32..=100, e2 in 1u32..=100) {
            let s = LossSchedule::default();
            if (e1 <= 50) == (e2 <= 50) {
                prop_assert_eq!(s.weights(e1).unwrap(), s.weights(e2).unwrap());
            }
        }
    }
}
