//! Low-rank adapters.
//!
//! An adapter holds `A` (`r x d_in`) and `B` (`d_out x r`) and modifies a
//! frozen weight as `W' = W + alpha * B A`. `alpha` multiplies the update
//! directly; it is not divided by the rank.

use alloc::vec::Vec;
use core::fmt;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub const DEFAULT_RANK: usize = 16;
pub const DEFAULT_ALPHA: f64 = 32.0;
/// Standard deviation of the Gaussian used for `A` at initialization.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LoraError {
    #[error("rank {rank} exceeds min(d_in, d_out) = {max}")]
    RankTooLarge { rank: usize, max: usize },
    #[error("rank must be at least 1")]
    ZeroRank,
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: &'static str, got: usize },
    #[error("matrix must have at least one row and column and finite entries")]
    InvalidMatrix,
    #[error("model parameter count must be positive")]
    EmptyModel,
}

/// Dense frozen weight, `d_out x d_in`, finite entries.
#[derive(Clone, PartialEq)]
pub struct WeightMatrix(DMatrix<f64>);

impl fmt::Debug for WeightMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "WeightMatrix({}x{})", self.0.nrows(), self.0.ncols())
    }
}

impl WeightMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self, LoraError> {
        if m.nrows() == 0 || m.ncols() == 0 || m.iter().any(|v| !v.is_finite()) {
            return Err(LoraError::InvalidMatrix);
        }
        Ok(Self(m))
    }

    pub fn d_out(&self) -> usize {
        self.0.nrows()
    }

    pub fn d_in(&self) -> usize {
        self.0.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub(crate) fn matrix_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }
}

/// Which attention projections carry an adapter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum LoraTarget {
    Query,
    Key,
    Value,
    Output,
}

impl LoraTarget {
    pub const ALL: [LoraTarget; 4] = [LoraTarget::Query, LoraTarget::Key, LoraTarget::Value, LoraTarget::Output];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, PartialEq)]
pub struct LoraAdapter {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    alpha: f64,
}

impl fmt::Debug for LoraAdapter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LoraAdapter")
            .field("d_in", &self.d_in())
            .field("d_out", &self.d_out())
            .field("rank", &self.rank())
            .field("alpha", &self.alpha)
            .finish()
    }
}

impl LoraAdapter {
    /// `A ~ N(0, 0.02^2)` from `seed`, `B = 0`, so the initial update is zero.
    pub fn init(d_in: usize, d_out: usize, rank: usize, alpha: f64, seed: u64) -> Result<Self, LoraError> {
        check_rank(d_in, d_out, rank)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let a = DMatrix::from_fn(rank, d_in, |_, _| normal.sample(&mut rng));
        Ok(Self { a, b: DMatrix::zeros(d_out, rank), alpha })
    }

    pub fn from_factors(a: DMatrix<f64>, b: DMatrix<f64>, alpha: f64) -> Result<Self, LoraError> {
        let rank = a.nrows();
        if b.ncols() != rank {
            return Err(LoraError::ShapeMismatch { expected: "B columns == A rows", got: b.ncols() });
        }
        check_rank(a.ncols(), b.nrows(), rank)?;
        if a.iter().chain(b.iter()).any(|v| !v.is_finite()) || !alpha.is_finite() {
            return Err(LoraError::InvalidMatrix);
        }
        Ok(Self { a, b, alpha })
    }

    pub fn rank(&self) -> usize {
        self.a.nrows()
    }

    pub fn d_in(&self) -> usize {
        self.a.ncols()
    }

    pub fn d_out(&self) -> usize {
        self.b.nrows()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub(crate) fn factors_mut(&mut self) -> (&mut DMatrix<f64>, &mut DMatrix<f64>) {
        (&mut self.a, &mut self.b)
    }

    /// `r (d_in + d_out)`; equals `2 d r` for square weights.
    pub fn trainable_params(&self) -> usize {
        self.rank() * (self.d_in() + self.d_out())
    }

    pub fn is_zero_update(&self) -> bool {
        self.b.iter().all(|v| *v == 0.0)
    }

    /// Dense `alpha * B A`.
    pub fn delta(&self) -> DMatrix<f64> {
        (&self.b * &self.a) * self.alpha
    }

    /// `W X + alpha B (A X)` for a batch of column inputs, without forming `W'`.
    pub fn apply_columns(&self, w: &WeightMatrix, x: &DMatrix<f64>) -> Result<DMatrix<f64>, LoraError> {
        self.check(w)?;
        if x.nrows() != w.d_in() {
            return Err(LoraError::ShapeMismatch { expected: "input rows == d_in", got: x.nrows() });
        }
        let mut y = w.matrix() * x;
        if !self.is_zero_update() {
            let ax = &self.a * x;
            y.gemm(self.alpha, &self.b, &ax, 1.0);
        }
        Ok(y)
    }

    fn check(&self, w: &WeightMatrix) -> Result<(), LoraError> {
        if w.d_in() != self.d_in() {
            return Err(LoraError::ShapeMismatch { expected: "W columns == A columns", got: w.d_in() });
        }
        if w.d_out() != self.d_out() {
            return Err(LoraError::ShapeMismatch { expected: "W rows == B rows", got: w.d_out() });
        }
        Ok(())
    }
}

fn check_rank(d_in: usize, d_out: usize, rank: usize) -> Result<(), LoraError> {
    if rank == 0 {
        return Err(LoraError::ZeroRank);
    }
    let max = d_in.min(d_out);
    if rank > max {
        return Err(LoraError::RankTooLarge { rank, max });
    }
    Ok(())
}

/// `(W + alpha B A) x` evaluated as `W x + alpha B (A x)`.
pub fn apply_adapted(w: &WeightMatrix, adapter: &LoraAdapter, x: &DVector<f64>) -> Result<DVector<f64>, LoraError> {
    let cols = DMatrix::from_column_slice(x.len(), 1, x.as_slice());
    let y = adapter.apply_columns(w, &cols)?;
    Ok(DVector::from_column_slice(y.as_slice()))
}

/// Dense `W + alpha B A`.
pub fn merge_adapter(w: &WeightMatrix, adapter: &LoraAdapter) -> Result<WeightMatrix, LoraError> {
    adapter.check(w)?;
    Ok(WeightMatrix(w.matrix() + adapter.delta()))
}

/// Adapter parameters as a fraction of `model_params`.
pub fn adapter_param_fraction(model_params: usize, adapters: &[LoraAdapter]) -> Result<f64, LoraError> {
    if model_params == 0 {
        return Err(LoraError::EmptyModel);
    }
    let total: usize = adapters.iter().map(LoraAdapter::trainable_params).sum();
    Ok(total as f64 / model_params as f64)
}

/// Seeded dense Gaussian matrix; used for frozen base weights.
pub fn gaussian_matrix(rows: usize, cols: usize, std: f64, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, std).expect("valid std");
    DMatrix::from_fn(rows, cols, |_, _| normal.sample(&mut rng))
}

/// Adapters for all listed targets, returned in target order.
pub fn adapters_for(targets: &[LoraTarget], d: usize, rank: usize, alpha: f64, seed: u64) -> Result<Vec<(LoraTarget, LoraAdapter)>, LoraError> {
    targets
        .iter()
        .map(|&t| Ok((t, LoraAdapter::init(d, d, rank, alpha, seed.wrapping_add(t.index() as u64))?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seeded(d_out: usize, d_in: usize, r: usize, seed: u64) -> (WeightMatrix, LoraAdapter, DVector<f64>) {
        let w = WeightMatrix::new(gaussian_matrix(d_out, d_in, 1.0, seed)).unwrap();
        let a = gaussian_matrix(r, d_in, 1.0, seed + 1);
        let b = gaussian_matrix(d_out, r, 1.0, seed + 2);
        let x = DVector::from_column_slice(gaussian_matrix(d_in, 1, 1.0, seed + 3).as_slice());
        (w, LoraAdapter::from_factors(a, b, 1.5).unwrap(), x)
    }

    #[test]
    fn init_is_identity_update() {
        let w = WeightMatrix::new(gaussian_matrix(24, 24, 1.0, 3)).unwrap();
        let ad = LoraAdapter::init(24, 24, 4, DEFAULT_ALPHA, 11).unwrap();
        assert!(ad.is_zero_update());
        let x = DVector::from_fn(24, |i, _| (i as f64).sin());
        let base = w.matrix() * &x;
        let out = apply_adapted(&w, &ad, &x).unwrap();
        assert!(out.iter().zip(base.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(merge_adapter(&w, &ad).unwrap(), w);
        let std = (ad.a().iter().map(|v| v * v).sum::<f64>() / 96.0).sqrt();
        assert!((std - INIT_STD).abs() < 0.006);
    }

    #[test]
    fn rank_bounds() {
        assert!(LoraAdapter::init(8, 8, 8, 1.0, 0).is_ok());
        assert_eq!(LoraAdapter::init(8, 8, 9, 1.0, 0).unwrap_err(), LoraError::RankTooLarge { rank: 9, max: 8 });
        assert_eq!(LoraAdapter::init(8, 4, 5, 1.0, 0).unwrap_err(), LoraError::RankTooLarge { rank: 5, max: 4 });
        assert_eq!(LoraAdapter::init(8, 8, 0, 1.0, 0).unwrap_err(), LoraError::ZeroRank);
    }

    #[test]
    fn param_counts() {
        let ad = LoraAdapter::init(768, 768, 16, 32.0, 0).unwrap();
        assert_eq!(ad.trainable_params(), 24_576);
        assert_eq!(ad.trainable_params(), 2 * 768 * 16);
        assert!(ad.trainable_params() < 768 * 768);
        assert_eq!(adapter_param_fraction(24_576_000, core::slice::from_ref(&ad)).unwrap(), 0.001);
        assert_eq!(adapter_param_fraction(24_576_000, &[]).unwrap(), 0.0);
        let one = adapter_param_fraction(1_000_000, core::slice::from_ref(&ad)).unwrap();
        assert_eq!(adapter_param_fraction(1_000_000, &[ad.clone(), ad]).unwrap(), 2.0 * one);
        assert_eq!(adapter_param_fraction(0, &[]), Err(LoraError::EmptyModel));
        let rect = LoraAdapter::init(10, 6, 3, 1.0, 0).unwrap();
        assert_eq!(rect.trainable_params(), 3 * 16);
    }

    #[test]
    fn rank_one_hand_case() {
        let w = WeightMatrix::new(DMatrix::zeros(4, 4)).unwrap();
        let ad = LoraAdapter::from_factors(DMatrix::from_element(1, 4, 1.0), DMatrix::from_element(4, 1, 1.0), 2.0).unwrap();
        let x = DVector::from_column_slice(&[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(apply_adapted(&w, &ad, &x).unwrap().as_slice(), &[2.0; 4]);
        assert_eq!(merge_adapter(&w, &ad).unwrap().matrix(), &DMatrix::from_element(4, 4, 2.0));
    }

    #[test]
    fn factored_matches_merged() {
        for seed in 0..5 {
            let (w, ad, x) = seeded(32, 32, 4, 100 * seed);
            let factored = apply_adapted(&w, &ad, &x).unwrap();
            let merged = merge_adapter(&w, &ad).unwrap().matrix() * &x;
            assert!((factored - merged).amax() < 1e-9);
        }
    }

    #[test]
    fn linear_in_alpha() {
        let (w, ad, x) = seeded(12, 20, 3, 7);
        let with = |alpha: f64| {
            let a = LoraAdapter::from_factors(ad.a().clone(), ad.b().clone(), alpha).unwrap();
            apply_adapted(&w, &a, &x).unwrap()
        };
        let (y0, yc, y2c) = (with(0.0), with(0.7), with(1.4));
        assert!(((&y2c - &y0) - (&yc - &y0) * 2.0).amax() < 1e-9);
    }

    #[test]
    fn shape_errors() {
        let (w, ad, _) = seeded(12, 20, 3, 7);
        let bad_x = DVector::zeros(19);
        assert!(matches!(apply_adapted(&w, &ad, &bad_x), Err(LoraError::ShapeMismatch { .. })));
        let other = WeightMatrix::new(DMatrix::zeros(20, 12)).unwrap();
        assert!(matches!(merge_adapter(&other, &ad), Err(LoraError::ShapeMismatch { .. })));
        assert!(LoraAdapter::from_factors(DMatrix::zeros(3, 20), DMatrix::zeros(12, 2), 1.0).is_err());
        assert!(WeightMatrix::new(DMatrix::from_element(1, 1, f64::NAN)).is_err());
    }
}
