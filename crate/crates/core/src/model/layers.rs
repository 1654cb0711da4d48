//! Building blocks of the fusion transformer with hand-written backward passes.
//!
//! Activations are column-major batches: every column of an input matrix
//! is one token (inside the encoder) or one sample (in the head).

use alloc::vec;
use alloc::vec::Vec;

use libm::{exp, sqrt};
use nalgebra::{DMatrix, DVector};

use crate::lora::{LoraAdapter, WeightMatrix};

/// `(dA, dB)` for one adapter.
pub type AdapterGrads = Option<(DMatrix<f64>, DMatrix<f64>)>;

/// Affine layer `y = W x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Linear {
    pub fn new(weight: DMatrix<f64>, bias: DVector<f64>) -> Self {
        assert_eq!(weight.nrows(), bias.len(), "bias length must equal output width");
        Self { weight, bias }
    }

    pub fn zeros(d_out: usize, d_in: usize) -> Self {
        Self { weight: DMatrix::zeros(d_out, d_in), bias: DVector::zeros(d_out) }
    }

    pub fn d_in(&self) -> usize {
        self.weight.ncols()
    }

    pub fn d_out(&self) -> usize {
        self.weight.nrows()
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut y = &self.weight * x;
        for mut col in y.column_iter_mut() {
            col += &self.bias;
        }
        y
    }

    /// Returns `(dx, dW, db)` for upstream `dy` at input `x`.
    pub fn backward(&self, x: &DMatrix<f64>, dy: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>, DVector<f64>) {
        let dw = dy * x.transpose();
        let db = dy.column_sum();
        let dx = self.weight.tr_mul(dy);
        (dx, dw, db)
    }

    /// Input gradient only, for frozen layers.
    pub fn backward_input(&self, dy: &DMatrix<f64>) -> DMatrix<f64> {
        self.weight.tr_mul(dy)
    }
}

pub fn relu(x: &DMatrix<f64>) -> DMatrix<f64> {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// `dy` masked by `pre > 0`.
pub fn relu_backward(pre: &DMatrix<f64>, dy: &DMatrix<f64>) -> DMatrix<f64> {
    dy.zip_map(pre, |g, p| if p > 0.0 { g } else { 0.0 })
}

/// Frozen projection with an optional adapter: `W x + alpha B (A x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedProjection {
    pub base: WeightMatrix,
    pub adapter: Option<LoraAdapter>,
}

/// `A x`, kept for the adapter's backward pass.
pub type AdapterActivation = Option<DMatrix<f64>>;

impl AdaptedProjection {
    pub fn forward(&self, x: &DMatrix<f64>) -> (DMatrix<f64>, AdapterActivation) {
        let mut y = self.base.matrix() * x;
        let ax = self.adapter.as_ref().map(|ad| {
            let ax = ad.a() * x;
            // a zero B contributes nothing; skipping keeps outputs bit-identical to the base
            if !ad.is_zero_update() {
                y.gemm(ad.alpha(), ad.b(), &ax, 1.0);
            }
            ax
        });
        (y, ax)
    }

    /// Returns `dx` and, when adapted, `(dA, dB)`.
    pub fn backward(
        &self,
        x: &DMatrix<f64>,
        ax: &AdapterActivation,
        dy: &DMatrix<f64>,
    ) -> (DMatrix<f64>, AdapterGrads) {
        let mut dx = self.base.matrix().tr_mul(dy);
        let grads = match (&self.adapter, ax) {
            (Some(ad), Some(ax)) => {
                let alpha = ad.alpha();
                let bt_dy = ad.b().tr_mul(dy) * alpha;
                dx.gemm_tr(1.0, ad.a(), &bt_dy, 1.0);
                let d_a = &bt_dy * x.transpose();
                let d_b = (dy * ax.transpose()) * alpha;
                Some((d_a, d_b))
            }
            _ => None,
        };
        (dx, grads)
    }
}

/// Multi-head self-attention over fixed-length token groups.
///
/// Columns `[t * b, t * b + t)` of the activations belong to sample `b`;
/// tokens only attend within their own sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SelfAttention {
    /// Query, key, value, output, in [`crate::lora::LoraTarget`] order.
    pub proj: [AdaptedProjection; 4],
    pub n_heads: usize,
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    pub x: DMatrix<f64>,
    pub ax: [AdapterActivation; 4],
    pub q: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub v: DMatrix<f64>,
    /// Softmax weights, `[sample][head][query][key]` flattened.
    pub probs: Vec<f64>,
    pub o: DMatrix<f64>,
}

impl SelfAttention {
    fn head_dim(&self, d: usize) -> usize {
        d / self.n_heads
    }

    pub fn forward(&self, x: &DMatrix<f64>, tokens: usize) -> (DMatrix<f64>, AttentionCache) {
        let d = x.nrows();
        let n_samples = x.ncols() / tokens;
        let dh = self.head_dim(d);
        let inv_sqrt = 1.0 / sqrt(dh as f64);
        let (q, ax_q) = self.proj[0].forward(x);
        let (k, ax_k) = self.proj[1].forward(x);
        let (v, ax_v) = self.proj[2].forward(x);
        let mut o = DMatrix::zeros(d, x.ncols());
        let mut probs = vec![0.0; n_samples * self.n_heads * tokens * tokens];
        let mut scores = vec![0.0; tokens];
        for b in 0..n_samples {
            let c0 = b * tokens;
            for h in 0..self.n_heads {
                let r0 = h * dh;
                let base = (b * self.n_heads + h) * tokens * tokens;
                for i in 0..tokens {
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..tokens {
                        let mut s = 0.0;
                        for r in r0..r0 + dh {
                            s += q[(r, c0 + i)] * k[(r, c0 + j)];
                        }
                        scores[j] = s * inv_sqrt;
                        max = max.max(scores[j]);
                    }
                    let mut z = 0.0;
                    for s in scores.iter_mut() {
                        *s = exp(*s - max);
                        z += *s;
                    }
                    for j in 0..tokens {
                        let p = scores[j] / z;
                        probs[base + i * tokens + j] = p;
                        for r in r0..r0 + dh {
                            o[(r, c0 + i)] += p * v[(r, c0 + j)];
                        }
                    }
                }
            }
        }
        let (out, ax_o) = self.proj[3].forward(&o);
        let cache = AttentionCache { x: x.clone(), ax: [ax_q, ax_k, ax_v, ax_o], q, k, v, probs, o };
        (out, cache)
    }

    /// Returns `dx` and per-target adapter gradients.
    pub fn backward(
        &self,
        cache: &AttentionCache,
        dy: &DMatrix<f64>,
        tokens: usize,
    ) -> (DMatrix<f64>, [AdapterGrads; 4]) {
        let d = dy.nrows();
        let n_samples = dy.ncols() / tokens;
        let dh = self.head_dim(d);
        let inv_sqrt = 1.0 / sqrt(dh as f64);
        let (d_o, g_o) = self.proj[3].backward(&cache.o, &cache.ax[3], dy);
        let (q, k, v) = (&cache.q, &cache.k, &cache.v);
        let mut dq = DMatrix::zeros(d, dy.ncols());
        let mut dk = DMatrix::zeros(d, dy.ncols());
        let mut dv = DMatrix::zeros(d, dy.ncols());
        let mut dp = vec![0.0; tokens * tokens];
        for b in 0..n_samples {
            let c0 = b * tokens;
            for h in 0..self.n_heads {
                let r0 = h * dh;
                let base = (b * self.n_heads + h) * tokens * tokens;
                let p = &cache.probs[base..base + tokens * tokens];
                for i in 0..tokens {
                    for j in 0..tokens {
                        let mut acc = 0.0;
                        for r in r0..r0 + dh {
                            acc += d_o[(r, c0 + i)] * v[(r, c0 + j)];
                            dv[(r, c0 + j)] += p[i * tokens + j] * d_o[(r, c0 + i)];
                        }
                        dp[i * tokens + j] = acc;
                    }
                }
                for i in 0..tokens {
                    let row = &p[i * tokens..(i + 1) * tokens];
                    let dot: f64 = row.iter().zip(&dp[i * tokens..(i + 1) * tokens]).map(|(a, b)| a * b).sum();
                    for j in 0..tokens {
                        let ds = row[j] * (dp[i * tokens + j] - dot) * inv_sqrt;
                        for r in r0..r0 + dh {
                            dq[(r, c0 + i)] += ds * k[(r, c0 + j)];
                            dk[(r, c0 + j)] += ds * q[(r, c0 + i)];
                        }
                    }
                }
            }
        }
        let (mut dx, g_q) = self.proj[0].backward(&cache.x, &cache.ax[0], &dq);
        let (dx_k, g_k) = self.proj[1].backward(&cache.x, &cache.ax[1], &dk);
        let (dx_v, g_v) = self.proj[2].backward(&cache.x, &cache.ax[2], &dv);
        dx += dx_k;
        dx += dx_v;
        (dx, [g_q, g_k, g_v, g_o])
    }
}

/// Pre-residual encoder block: `h = x + attn(x)`, `y = h + W2 relu(W1 h + b1) + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub attention: SelfAttention,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
}

#[derive(Debug, Clone)]
pub struct EncoderCache {
    pub attention: AttentionCache,
    pub h: DMatrix<f64>,
    pub z1: DMatrix<f64>,
}

impl EncoderLayer {
    pub fn forward(&self, x: &DMatrix<f64>, tokens: usize) -> (DMatrix<f64>, EncoderCache) {
        let (attn, attention) = self.attention.forward(x, tokens);
        let h = x + attn;
        let z1 = self.ffn_in.forward(&h);
        let y = &h + self.ffn_out.forward(&relu(&z1));
        (y, EncoderCache { attention, h, z1 })
    }

    pub fn backward(
        &self,
        cache: &EncoderCache,
        dy: &DMatrix<f64>,
        tokens: usize,
    ) -> (DMatrix<f64>, [AdapterGrads; 4]) {
        let dr = self.ffn_out.backward_input(dy);
        let dz1 = relu_backward(&cache.z1, &dr);
        let dh = dy + self.ffn_in.backward_input(&dz1);
        let (dx_attn, grads) = self.attention.backward(&cache.attention, &dh, tokens);
        (dh + dx_attn, grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_linear_weight_gradient_is_input() {
        let lin = Linear::new(DMatrix::from_row_slice(1, 3, &[0.3, -1.0, 2.0]), DVector::from_element(1, 0.5));
        let x = DMatrix::from_column_slice(3, 1, &[1.5, -2.0, 0.25]);
        let (dx, dw, db) = lin.backward(&x, &DMatrix::from_element(1, 1, 1.0));
        assert_eq!(dw.as_slice(), x.as_slice());
        assert_eq!(db[0], 1.0);
        assert_eq!(dx.as_slice(), &[0.3, -1.0, 2.0]);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let lin = Linear::new(DMatrix::from_element(2, 3, 0.7), DVector::zeros(2));
        let x = DMatrix::from_element(3, 4, 1.0);
        let (dx, dw, db) = lin.backward(&x, &DMatrix::zeros(2, 4));
        assert!(dx.iter().chain(dw.iter()).chain(db.iter()).all(|v| *v == 0.0));
    }

    #[test]
    fn attention_rows_are_distributions() {
        let base = |s: f64| AdaptedProjection {
            base: WeightMatrix::new(DMatrix::from_fn(4, 4, |i, j| s * ((i * 4 + j) as f64).sin())).unwrap(),
            adapter: None,
        };
        let att = SelfAttention { proj: [base(1.0), base(0.5), base(0.8), base(1.1)], n_heads: 2 };
        let x = DMatrix::from_fn(4, 6, |i, j| ((i + 3 * j) as f64).cos());
        let (_, cache) = att.forward(&x, 2);
        for row in cache.probs.chunks(2) {
            assert!((row[0] + row[1] - 1.0).abs() < 1e-12);
        }
    }
}
