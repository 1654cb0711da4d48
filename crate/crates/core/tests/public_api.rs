use std::f64::consts::{FRAC_1_SQRT_2, FRAC_PI_2, FRAC_PI_4};

use lorabox_core::eval::{match_predictions, miou_categories, category_rows};
use lorabox_core::iou::{batch_iou_loss, iou_loss_grad, monte_carlo_iou, DEFAULT_FD_STEPS};
use lorabox_core::lora::{adapter_param_fraction, apply_adapted, gaussian_matrix, merge_adapter, LoraAdapter, WeightMatrix};
use lorabox_core::model::{FusionModel, ModelConfig};
use lorabox_core::nalgebra::{DMatrix, DVector, Point3};
use lorabox_core::train::{mean_iou, Trainer, TrainerConfig, TrainingSample};
use lorabox_core::loss::LossSchedule;
use lorabox_core::{iou_3d, iou_loss, Box7, IouError, Pose};

fn cube(x: f64, yaw: f64) -> Box7 {
    Box7::new([x, 0.0, 0.0], [1.0; 3], yaw).unwrap()
}

#[test]
fn iou_examples() {
    assert_eq!(iou_3d(&cube(0.0, 0.0), &cube(0.0, 0.0)).iou, 1.0);
    assert_eq!(iou_3d(&cube(0.0, 0.0), &cube(100.0, 0.0)).iou, 0.0);
    assert!((iou_3d(&cube(0.0, 0.0), &cube(0.5, 0.0)).iou - 1.0 / 3.0).abs() < 1e-12);
    let rotated = iou_3d(&cube(0.0, 0.0), &cube(0.0, FRAC_PI_4)).iou;
    assert!((rotated - FRAC_1_SQRT_2).abs() < 1e-9);
    assert!((iou_loss(&cube(0.0, 0.0), &cube(0.0, FRAC_PI_4)) - (1.0 - FRAC_1_SQRT_2)).abs() < 1e-9);
    let mc = monte_carlo_iou(&cube(0.0, 0.0), &cube(0.0, FRAC_PI_4), 1_000_000, 3);
    assert!((mc.iou - FRAC_1_SQRT_2).abs() < 0.003);

    let pairs = [(cube(0.0, 0.0), cube(0.0, 0.0)), (cube(0.0, 0.0), cube(0.5, 0.0)), (cube(0.0, 0.0), cube(9.0, 0.0))];
    assert!((batch_iou_loss(&pairs).unwrap() - 5.0 / 9.0).abs() < 1e-12);
    assert!(matches!(batch_iou_loss(&[]), Err(IouError::EmptyBatch)));
}

#[test]
fn iou_gradient_signs() {
    let p = Box7::new([0.5, 0.0, 0.0], [1.0, 1.2, 1.1], 0.0).unwrap();
    let g = cube(0.0, 0.0);
    let grad = iou_loss_grad(&p, &g, &DEFAULT_FD_STEPS).unwrap();
    assert!(grad[0] > 0.0);
    assert!(grad[1].abs() < 1e-9);
    assert!(matches!(iou_loss_grad(&g, &g, &DEFAULT_FD_STEPS), Err(IouError::DegenerateOverlap { .. })));
}

#[test]
fn pose_examples() {
    let p = Pose::from_translation([1.0, 0.0, 0.0]).compose(&Pose::from_yaw([0.0; 3], FRAC_PI_2));
    let q = p.transform_point(&Point3::new(1.0, 0.0, 0.0));
    assert!((q - Point3::new(1.0, 1.0, 0.0)).norm() < 1e-12);
    let inv = Pose::from_translation([1.0, -2.0, 3.0]).inverse();
    assert_eq!(inv.translation(), [-1.0, 2.0, -3.0]);
    let r = Pose::new([3.0, -1.0, 0.5], [0.9, 0.1, -0.3, 0.2].map(|v| v / 0.95f64.sqrt())).unwrap();
    let id = r.compose(&r.inverse());
    assert!(id.translation().iter().all(|v| v.abs() < 1e-9));
}

#[test]
fn lora_examples() {
    let w = WeightMatrix::new(DMatrix::zeros(4, 4)).unwrap();
    let ad = LoraAdapter::from_factors(DMatrix::from_element(1, 4, 1.0), DMatrix::from_element(4, 1, 1.0), 2.0).unwrap();
    let e1 = DVector::from_vec(vec![1.0, 0.0, 0.0, 0.0]);
    assert_eq!(apply_adapted(&w, &ad, &e1).unwrap().as_slice(), &[2.0; 4]);
    assert_eq!(merge_adapter(&w, &ad).unwrap().matrix(), &DMatrix::from_element(4, 4, 2.0));

    let w = WeightMatrix::new(gaussian_matrix(32, 32, 0.3, 1)).unwrap();
    let x = DVector::from_column_slice(gaussian_matrix(32, 1, 1.0, 2).as_slice());
    let (a, b) = (gaussian_matrix(4, 32, 0.3, 3), gaussian_matrix(32, 4, 0.3, 4));
    let out = |alpha: f64| apply_adapted(&w, &LoraAdapter::from_factors(a.clone(), b.clone(), alpha).unwrap(), &x).unwrap();
    let (y0, y1, y2) = (out(0.0), out(1.5), out(3.0));
    assert!(((&y2 - &y0) - 2.0 * (&y1 - &y0)).amax() < 1e-9);
    let ad = LoraAdapter::from_factors(a, b, 1.5).unwrap();
    assert!((merge_adapter(&w, &ad).unwrap().matrix() * &x - y1).amax() < 1e-9);

    assert_eq!(LoraAdapter::init(768, 768, 16, 32.0, 0).unwrap().trainable_params(), 24_576);
    assert!(LoraAdapter::init(8, 8, 8, 1.0, 0).is_ok());
    assert!(LoraAdapter::init(8, 8, 9, 1.0, 0).is_err());
    let one = LoraAdapter::init(768, 768, 16, 32.0, 0).unwrap();
    assert!((adapter_param_fraction(24_576_000, std::slice::from_ref(&one)).unwrap() - 0.001).abs() < 1e-15);
    assert_eq!(adapter_param_fraction(24_576_000, &[]).unwrap(), 0.0);
    assert_eq!(
        adapter_param_fraction(24_576_000, &[one.clone(), one.clone()]).unwrap(),
        2.0 * adapter_param_fraction(24_576_000, &[one]).unwrap()
    );
}

#[test]
fn matching_and_category_means() {
    let preds = [(cube(0.0, 0.0), "car"), (cube(5.0, 0.0), "car")];
    let gts = [(cube(0.1, 0.0), "car"), (cube(5.0, 0.0), "truck")];
    let r = match_predictions(&preds, &gts, 0.25).unwrap();
    assert_eq!((r.counts.tp, r.counts.fp, r.counts.r#fn), (1, 1, 1));
    let table = miou_categories(category_rows([("car", 1.0), ("car", 0.5), ("bus", 0.0)])).unwrap();
    assert_eq!(table.miou, (0.75 + 0.0) / 2.0);
}

/// A smooth synthetic task: the input is a fixed random mixing of the box parameters.
fn toy_samples(n: usize, d_in: usize) -> Vec<TrainingSample> {
    let mix = gaussian_matrix(d_in, 7, 0.4, 11);
    let raw = gaussian_matrix(7, n, 1.0, 12);
    (0..n)
        .map(|i| {
            let r = raw.column(i);
            let target = Box7::new([2.0 * r[0], 2.0 * r[1], 0.3 * r[2]], [1.0 + 0.2 * r[3].abs(), 1.0 + 0.2 * r[4].abs(), 1.0 + 0.2 * r[5].abs()], r[6]).unwrap();
            let t = target.to_array();
            let input = (&mix * DVector::from_column_slice(&t)).iter().map(|v| v.tanh()).collect();
            TrainingSample { sample_id: format!("toy/{i}"), category: "car".into(), input, target }
        })
        .collect()
}

#[test]
fn training_improves_validation_iou() {
    let cfg = ModelConfig { d_v: 8, d_t: 4, d_model: 16, n_heads: 2, ffn_hidden: 32, mlp_hidden: [64, 32, 16], lora_rank: 4, seed: 2, ..Default::default() };
    let data = toy_samples(120, cfg.d_in());
    let (train, val) = data.split_at(100);
    let tcfg = TrainerConfig { schedule: LossSchedule { transition_epoch: 30, total_epochs: 40, ..Default::default() }, ..Default::default() };
    let mut trainer = Trainer::new(FusionModel::new(cfg).unwrap(), tcfg, train).unwrap();
    let before = mean_iou(trainer.model(), val).unwrap();
    let logs = trainer.fit(train, val, |_| {}).unwrap();
    assert_eq!(logs.len(), 40);
    assert!(logs[29].loss_mse < logs[0].loss_mse);
    assert!(mean_iou(trainer.model(), val).unwrap() > before);
}
