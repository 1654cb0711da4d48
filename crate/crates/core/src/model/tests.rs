use super::*;
use alloc::vec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_config(seed: u64) -> ModelConfig {
    ModelConfig { d_v: 6, d_t: 4, d_model: 8, n_layers: 2, n_heads: 2, ffn_hidden: 12, mlp_hidden: [16, 12, 8], lora_rank: 2, seed, ..Default::default() }
}

fn random_input(d: usize, n: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DMatrix::from_fn(d, n, |_, _| rng.random_range(-1.0..1.0))
}

/// Fills every LoRA `B` with small random values so adapter gradients are non-trivial.
fn randomize_b(model: &mut FusionModel, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for layer in &mut model.layers {
        for p in &mut layer.attention.proj {
            if let Some(ad) = &mut p.adapter {
                let (_, b) = ad.factors_mut();
                b.iter_mut().for_each(|v| *v = rng.random_range(-0.05..0.05));
            }
        }
    }
    model.generation += 1;
}

fn fused(values: Vec<f64>) -> FeatureVector {
    FeatureVector::new(Modality::Fused, values).unwrap()
}

#[test]
fn concat_examples() {
    let v = FeatureVector::new(Modality::Visual, vec![1.0, 2.0]).unwrap();
    let t = FeatureVector::new(Modality::Text, vec![3.0, 4.0]).unwrap();
    let f = concat_features(&v, &t).unwrap();
    assert_eq!(f.values(), &[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(f.modality(), Modality::Fused);
    let zero = FeatureVector::new(Modality::Visual, vec![0.0; 3]).unwrap();
    assert_eq!(concat_features(&zero, &t).unwrap().values(), &[0.0, 0.0, 0.0, 3.0, 4.0]);
    assert_eq!(
        concat_features(&t, &t),
        Err(ModelError::ModalityMismatch { expected: Modality::Visual, got: Modality::Text })
    );
    assert!(FeatureVector::new(Modality::Text, vec![f64::NAN]).is_err());
}

#[test]
fn config_validation() {
    ModelConfig::default().validate().unwrap();
    let bad = ModelConfig { d_model: 30, n_heads: 4, ..Default::default() };
    assert!(matches!(bad.validate(), Err(ModelError::InvalidConfig(_))));
    let bad = ModelConfig { n_layers: 0, ..Default::default() };
    assert!(bad.validate().is_err());
    let bad = ModelConfig { lora_rank: 65, ..Default::default() };
    assert!(matches!(bad.validate(), Err(ModelError::Lora(LoraError::RankTooLarge { .. }))));
    let none = ModelConfig { lora_targets: vec![], lora_rank: 0, ..Default::default() };
    none.validate().unwrap();
}

#[test]
fn semantic_head_examples() {
    let head = SemanticHead::seeded(3);
    assert_eq!(head.project(&[0.0; 7]), SemanticFeature::zeros());
    let a = [0.3, -1.0, 2.0, 1.5, 0.7, 2.2, -0.4];
    let b = [1.0, 0.5, -0.5, 0.1, 0.2, 0.3, 1.1];
    let sum: [f64; 7] = core::array::from_fn(|i| a[i] + b[i]);
    let (pa, pb, ps) = (head.project(&a), head.project(&b), head.project(&sum));
    for i in 0..SemanticFeature::DIM {
        assert!((ps.as_slice()[i] - pa.as_slice()[i] - pb.as_slice()[i]).abs() <= 1e-12);
    }
    assert_eq!(semantic_project(&a, &head).squared_distance(&head.project(&a)), 0.0);
}

#[test]
fn output_map_is_positive_and_wraps_yaw() {
    let map = OutputMap::default();
    let out = map.apply(&[0.0, 0.0, 0.0, -50.0, 0.0, 50.0, 4.0]);
    assert!(out[3] > 0.0 && out[4] > 0.0 && out[5] > 0.0);
    assert!((out[4] - 1.0 - SIZE_FLOOR).abs() < 1e-12);
    assert!((out[6] - (4.0 - 2.0 * core::f64::consts::PI)).abs() < 1e-12);

    let targets = [
        Box7::new([0.0, 1.0, 2.0], [4.0, 2.0, 1.5], 0.1).unwrap(),
        Box7::new([2.0, -1.0, 0.0], [4.4, 1.8, 1.7], -0.3).unwrap(),
    ];
    let fit = OutputMap::fit(&targets);
    let centre = fit.apply(&[0.0; 7]);
    assert!((centre[0] - 1.0).abs() < 1e-12);
    assert!((centre[3] - 4.2).abs() < 1e-9);
    let d = fit.derivative(&[0.0; 7]);
    assert!((d[3] - 0.2).abs() < 1e-9);
}

#[test]
fn init_is_deterministic() {
    let cfg = ModelConfig { seed: 11, ..Default::default() };
    let a = FusionModel::new(cfg.clone()).unwrap();
    let b = FusionModel::new(cfg).unwrap();
    let x = fused(random_input(64, 1, 5).as_slice().to_vec());
    let ya = a.forward(&x).unwrap();
    let yb = b.forward(&x).unwrap();
    assert_eq!(ya.map(f64::to_bits), yb.map(f64::to_bits));
}

#[test]
fn zero_b_matches_unadapted_model_bitwise() {
    let cfg = ModelConfig { seed: 4, ..Default::default() };
    let adapted = FusionModel::new(cfg.clone()).unwrap();
    let mut plain = adapted.clone();
    for layer in &mut plain.layers {
        for p in &mut layer.attention.proj {
            p.adapter = None;
        }
    }
    let x = random_input(64, 16, 9);
    let (ya, _) = adapted.forward_batch(&x).unwrap();
    let (yp, _) = plain.forward_batch(&x).unwrap();
    assert!(ya.iter().zip(yp.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn batch_matches_single_forward() {
    let model = FusionModel::new(small_config(2)).unwrap();
    let x = random_input(10, 5, 3);
    let (batch, _) = model.forward_batch(&x).unwrap();
    for b in 0..5 {
        let single = model.forward(&fused(x.column(b).iter().copied().collect())).unwrap();
        for i in 0..7 {
            assert!((single[i] - batch[(i, b)]).abs() < 1e-12);
        }
    }
}

#[test]
fn outputs_finite_over_many_inputs() {
    let model = FusionModel::new(ModelConfig { seed: 1, ..Default::default() }).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let x = DMatrix::from_fn(64, 1000, |_, _| rng.random_range(-3.0..3.0));
    let (y, _) = model.forward_batch(&x).unwrap();
    assert_eq!(y.shape(), (7, 1000));
    assert!(y.iter().all(|v| v.is_finite()));
    for col in y.column_iter() {
        assert!(col[3] > 0.0 && col[4] > 0.0 && col[5] > 0.0);
    }
}

#[test]
fn shape_and_modality_errors() {
    let model = FusionModel::new(small_config(0)).unwrap();
    assert_eq!(model.forward(&fused(vec![0.0; 9])), Err(ModelError::ShapeMismatch { expected: 10, got: 9 }));
    let v = FeatureVector::new(Modality::Visual, vec![0.0; 10]).unwrap();
    assert!(matches!(model.forward(&v), Err(ModelError::ModalityMismatch { .. })));
}

#[test]
fn zero_upstream_gives_zero_gradients() {
    let mut model = FusionModel::new(small_config(5)).unwrap();
    randomize_b(&mut model, 1);
    let (_, cache) = model.forward_batch(&random_input(10, 3, 1)).unwrap();
    let g = model.backward(&cache, &DMatrix::zeros(7, 3)).unwrap();
    assert!(g.is_zero());
    assert_eq!(g.tensors.iter().map(Vec::len).collect::<Vec<_>>(), model.trainable_sizes());
}

#[test]
fn stale_cache_is_rejected() {
    let mut model = FusionModel::new(small_config(5)).unwrap();
    let (_, cache) = model.forward_batch(&random_input(10, 2, 1)).unwrap();
    model.perturb_trainable(0, 0, 1e-3);
    assert_eq!(model.backward(&cache, &DMatrix::zeros(7, 2)), Err(ModelError::StaleActivation));
}

fn objective(model: &FusionModel, x: &DMatrix<f64>, upstream: &DMatrix<f64>) -> f64 {
    let (y, _) = model.forward_batch(x).unwrap();
    y.component_mul(upstream).sum()
}

#[test]
fn gradients_match_finite_differences() {
    let mut model = FusionModel::new(small_config(21)).unwrap();
    randomize_b(&mut model, 22);
    let x = random_input(10, 3, 23);
    let upstream = random_input(7, 3, 24);
    let (_, cache) = model.forward_batch(&x).unwrap();
    let grads = model.backward(&cache, &upstream).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (t, size) in model.trainable_sizes().into_iter().enumerate() {
        for idx in (0..size).step_by((size / 6).max(1)) {
            let mut plus = model.clone();
            plus.perturb_trainable(t, idx, h);
            let mut minus = model.clone();
            minus.perturb_trainable(t, idx, -h);
            let numeric = (objective(&plus, &x, &upstream) - objective(&minus, &x, &upstream)) / (2.0 * h);
            let analytic = grads.tensors[t][idx];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-7);
            worst = worst.max(rel);
        }
    }
    assert!(worst <= 1e-4, "worst relative error {worst}");
}

#[test]
fn training_step_leaves_base_frozen() {
    let mut model = FusionModel::new(small_config(8)).unwrap();
    let frozen: Vec<Vec<f64>> = model.frozen().iter().map(|t| t.to_vec()).collect();
    let trainable: Vec<Vec<f64>> = model.trainable().iter().map(|t| t.to_vec()).collect();
    let mut opt = AdamW::new(Default::default(), &model.trainable_sizes());
    let x = random_input(10, 4, 2);
    for _ in 0..3 {
        let (_, cache) = model.forward_batch(&x).unwrap();
        let g = model.backward(&cache, &DMatrix::from_element(7, 4, 1.0)).unwrap();
        model.apply_gradients(&mut opt, 1e-3, &g);
    }
    for (a, b) in model.frozen().iter().zip(&frozen) {
        assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    assert_ne!(model.trainable().iter().map(|t| t.to_vec()).collect::<Vec<_>>(), trainable);
    assert!(model.adapters().iter().any(|a| !a.is_zero_update()));
}

#[test]
fn report_counts_parameters() {
    let model = FusionModel::new(ModelConfig::default()).unwrap();
    let r = model.report();
    assert_eq!(r.lora_params, 2 * 4 * 16 * (64 + 64));
    let head = (64 * 128 + 128) + (128 * 512 + 512) + (512 * 256 + 256) + (256 * 128 + 128) + (128 * 7 + 7);
    assert_eq!(r.head_params, head);
    let frozen = 2 * (4 * 64 * 64 + 64 * 128 + 128 + 128 * 64 + 64);
    assert_eq!(r.frozen_params, frozen);
    let adapters: Vec<LoraAdapter> = model.adapters().into_iter().cloned().collect();
    let expect = crate::lora::adapter_param_fraction(r.total_params, &adapters).unwrap() + head as f64 / r.total_params as f64;
    assert!((r.trainable_fraction() - expect).abs() < 1e-15);
}

#[test]
fn named_tensors_round_trip() {
    let mut src = FusionModel::new(small_config(3)).unwrap();
    randomize_b(&mut src, 4);
    let mut dst = FusionModel::new(small_config(99)).unwrap();
    let owned: Vec<(String, Vec<f64>)> = src.named_tensors().into_iter().map(|(n, _, v)| (n, v.to_vec())).collect();
    dst.load_tensors(|name| owned.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_slice())).unwrap();
    let x = random_input(10, 2, 0);
    assert_eq!(src.forward_batch(&x).unwrap().0, dst.forward_batch(&x).unwrap().0);
    let err = dst.load_tensors(|_| None);
    assert_eq!(err, Err(ModelError::MissingTensor("projection.weight".into())));
}

/// Local bound on the input-output Jacobian norm at `x`, built from
/// Frobenius norms of the effective weights and the attention activations.
fn local_lipschitz(model: &FusionModel, x: &DMatrix<f64>) -> f64 {
    let (_, cache) = model.forward_batch(x).unwrap();
    let effective = |p: &AdaptedProjection| match &p.adapter {
        Some(ad) => p.base.matrix() + ad.b() * ad.a() * ad.alpha(),
        None => p.base.matrix().clone(),
    };
    let t = TOKENS as f64;
    let heads = model.config.n_heads as f64;
    let dh = (model.config.d_model / model.config.n_heads) as f64;
    let mut bound = model.projection.weight.norm();
    for (layer, lc) in model.layers.iter().zip(&cache.layers) {
        let [wq, wk, wv, wo] = [0, 1, 2, 3].map(|i| effective(&layer.attention.proj[i]).norm());
        let (q, k, v) = (lc.attention.q.norm(), lc.attention.k.norm(), lc.attention.v.norm());
        let attn = wo * (sqrt(t) * wv + 0.5 * sqrt(heads) * v * (wq * k + q * wk) / sqrt(dh));
        bound *= (1.0 + attn) * (1.0 + layer.ffn_out.weight.norm() * layer.ffn_in.weight.norm());
    }
    for lin in &model.head {
        bound *= lin.weight.norm();
    }
    bound * model.output.scale.iter().fold(0.0f64, |m, s| m.max(s.abs()))
}

#[test]
fn single_entry_perturbation_respects_lipschitz_bound() {
    let mut model = FusionModel::new(ModelConfig { seed: 31, ..Default::default() }).unwrap();
    randomize_b(&mut model, 32);
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    for trial in 0..5 {
        let x = random_input(64, 1, 100 + trial);
        let l = local_lipschitz(&model, &x);
        let entry = rng.random_range(0..64);
        let mut xp = x.clone();
        xp[(entry, 0)] += 1e-6;
        let (y0, _) = model.forward_batch(&x).unwrap();
        let (y1, _) = model.forward_batch(&xp).unwrap();
        let mut diff = y1 - y0;
        diff[6] = normalize_yaw(diff[6]);
        assert!(diff.norm() <= l * 1e-6 * 1.01, "trial {trial}: {} > {}", diff.norm(), l * 1e-6);
        assert!(diff.norm() > 0.0);
    }
}
