//! Rotated 3D IoU for yaw-only boxes.
//!
//! Because both boxes are upright, their intersection is the bird's-eye
//! footprint intersection extruded over the shared height interval. The
//! footprint intersection is computed with Sutherland–Hodgman clipping of
//! two convex quadrilaterals.

use alloc::vec::Vec;

use libm::sqrt;
use nalgebra::Point3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geom::{Box7, GeomError};

/// Vertices closer than this (meters) are merged after clipping.
pub const DEDUP_EPSILON: f64 = 1e-12;

/// Default central-difference steps for `[x, y, z, l, w, h, yaw]`.
pub const DEFAULT_FD_STEPS: [f64; 7] = [1e-4; 7];

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum IouError {
    #[error("polygon is not convex and counter-clockwise at vertex {vertex}")]
    NotConvex { vertex: usize },
    #[error("polygon needs at least 3 vertices, got {0}")]
    TooFewVertices(usize),
    #[error("batch is empty")]
    EmptyBatch,
    #[error("iou {iou} is on the boundary of [0, 1]; the loss is not differentiable there")]
    DegenerateOverlap { iou: f64 },
    #[error("finite-difference estimates disagree for component {component} ({coarse} vs {fine})")]
    NonSmoothPoint { component: usize, coarse: f64, fine: f64 },
    #[error("finite-difference step {step} for component {component} is not positive or leaves the valid box domain")]
    InvalidStep { component: usize, step: f64 },
    #[error(transparent)]
    Geometry(#[from] GeomError),
}

/// Convex polygon with counter-clockwise vertices, or the empty polygon.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConvexPolygon {
    vertices: Vec<[f64; 2]>,
}

impl ConvexPolygon {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Validates convexity and counter-clockwise orientation.
    pub fn new(vertices: Vec<[f64; 2]>) -> Result<Self, IouError> {
        if vertices.is_empty() {
            return Ok(Self::empty());
        }
        if vertices.len() < 3 {
            return Err(IouError::TooFewVertices(vertices.len()));
        }
        let n = vertices.len();
        for i in 0..n {
            let (a, b, c) = (vertices[i], vertices[(i + 1) % n], vertices[(i + 2) % n]);
            if cross(sub(b, a), sub(c, b)) < -1e-12 {
                return Err(IouError::NotConvex { vertex: (i + 1) % n });
            }
        }
        let poly = Self { vertices };
        if signed_area(&poly.vertices) <= 0.0 {
            return Err(IouError::NotConvex { vertex: 0 });
        }
        Ok(poly)
    }

    pub fn from_box(b: &Box7) -> Self {
        Self { vertices: b.footprint().to_vec() }
    }

    pub fn vertices(&self) -> &[[f64; 2]] {
        &self.vertices
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn area(&self) -> f64 {
        polygon_area(self)
    }

    pub fn clip(&self, clip: &ConvexPolygon) -> ConvexPolygon {
        polygon_clip(self, clip)
    }
}

fn sub(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] - b[0], a[1] - b[1]]
}

fn cross(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

fn signed_area(v: &[[f64; 2]]) -> f64 {
    let n = v.len();
    let mut twice = 0.0;
    for i in 0..n {
        twice += cross(v[i], v[(i + 1) % n]);
    }
    0.5 * twice
}

/// Shoelace area; zero for the empty polygon.
pub fn polygon_area(p: &ConvexPolygon) -> f64 {
    if p.vertices.len() < 3 {
        return 0.0;
    }
    signed_area(&p.vertices).abs()
}

/// Intersection of two convex counter-clockwise polygons.
pub fn polygon_clip(subject: &ConvexPolygon, clip: &ConvexPolygon) -> ConvexPolygon {
    if subject.is_empty() || clip.is_empty() {
        return ConvexPolygon::empty();
    }
    let mut output = subject.vertices.clone();
    let n = clip.vertices.len();
    for i in 0..n {
        if output.is_empty() {
            break;
        }
        let a = clip.vertices[i];
        let b = clip.vertices[(i + 1) % n];
        let edge = sub(b, a);
        let len = sqrt(edge[0] * edge[0] + edge[1] * edge[1]);
        if len <= DEDUP_EPSILON {
            continue;
        }
        // signed distance to the clip line, positive on the inner (left) side
        let dist = |p: [f64; 2]| cross(edge, sub(p, a)) / len;
        let input = core::mem::take(&mut output);
        let m = input.len();
        for j in 0..m {
            let s = input[(j + m - 1) % m];
            let e = input[j];
            let (ds, de) = (dist(s), dist(e));
            let (s_in, e_in) = (ds >= -DEDUP_EPSILON, de >= -DEDUP_EPSILON);
            if e_in {
                if !s_in {
                    output.push(crossing(s, e, ds, de));
                }
                output.push(e);
            } else if s_in {
                output.push(crossing(s, e, ds, de));
            }
        }
    }
    dedup(&mut output);
    if output.len() < 3 || signed_area(&output) <= 0.0 {
        return ConvexPolygon::empty();
    }
    ConvexPolygon { vertices: output }
}

fn crossing(s: [f64; 2], e: [f64; 2], ds: f64, de: f64) -> [f64; 2] {
    let t = (ds / (ds - de)).clamp(0.0, 1.0);
    [s[0] + t * (e[0] - s[0]), s[1] + t * (e[1] - s[1])]
}

fn dedup(v: &mut Vec<[f64; 2]>) {
    let near = |a: [f64; 2], b: [f64; 2]| {
        let d = sub(a, b);
        sqrt(d[0] * d[0] + d[1] * d[1]) <= DEDUP_EPSILON
    };
    v.dedup_by(|b, a| near(*a, *b));
    while v.len() > 1 && near(v[0], v[v.len() - 1]) {
        v.pop();
    }
}

/// Volumes and ratio for one box pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IouResult {
    pub iou: f64,
    pub intersection_volume: f64,
    pub union_volume: f64,
}

/// Volume as footprint area times height, the same arithmetic used for the
/// intersection so that identical boxes give an IoU of exactly one.
fn extruded_volume(footprint: &ConvexPolygon, b: &Box7) -> f64 {
    footprint.area() * (b.top() - b.bottom())
}

/// Exact IoU of two boxes in the same frame. Symmetric bit-for-bit.
pub fn iou_3d(p: &Box7, g: &Box7) -> IouResult {
    // Fix the argument order so the floating-point path does not depend on it.
    let (p, g) = if order_key(p) <= order_key(g) { (p, g) } else { (g, p) };
    let (fp, fg) = (ConvexPolygon::from_box(p), ConvexPolygon::from_box(g));
    let (vp, vg) = (extruded_volume(&fp, p), extruded_volume(&fg, g));
    let overlap_h = (p.top().min(g.top()) - p.bottom().max(g.bottom())).max(0.0);
    let inter = if overlap_h > 0.0 {
        (polygon_clip(&fp, &fg).area() * overlap_h).min(vp).min(vg)
    } else {
        0.0
    };
    let union = vp + vg - inter;
    let iou = if union > 0.0 { (inter / union).clamp(0.0, 1.0) } else { 0.0 };
    IouResult { iou, intersection_volume: inter, union_volume: union }
}

fn order_key(b: &Box7) -> impl PartialOrd {
    let a = b.to_array();
    OrderKey(a)
}

#[derive(PartialEq)]
struct OrderKey([f64; 7]);

impl PartialOrd for OrderKey {
    fn partial_cmp(&self, other: &Self) -> Option<core::cmp::Ordering> {
        for (a, b) in self.0.iter().zip(other.0.iter()) {
            match a.total_cmp(b) {
                core::cmp::Ordering::Equal => continue,
                o => return Some(o),
            }
        }
        Some(core::cmp::Ordering::Equal)
    }
}

/// `1 - IoU`.
pub fn iou_loss(p: &Box7, g: &Box7) -> f64 {
    1.0 - iou_3d(p, g).iou
}

/// Mean of `1 - IoU` over the batch.
pub fn batch_iou_loss(pairs: &[(Box7, Box7)]) -> Result<f64, IouError> {
    if pairs.is_empty() {
        return Err(IouError::EmptyBatch);
    }
    let total: f64 = pairs.iter().map(|(p, g)| iou_loss(p, g)).sum();
    Ok(total / pairs.len() as f64)
}

fn central_difference(p: &Box7, g: &Box7, steps: &[f64; 7]) -> Result<[f64; 7], IouError> {
    let base = p.to_array();
    let mut grad = [0.0; 7];
    for (i, &h) in steps.iter().enumerate() {
        let shifted = |delta: f64| -> Result<f64, IouError> {
            let mut a = base;
            a[i] += delta;
            let b = Box7::from_array(a).map_err(|_| IouError::InvalidStep { component: i, step: h })?;
            Ok(iou_loss(&b, g))
        };
        grad[i] = (shifted(h)? - shifted(-h)?) / (2.0 * h);
    }
    Ok(grad)
}

/// Gradient of `1 - IoU(p, g)` with respect to `p`'s seven parameters.
///
/// Central differences are taken at `steps` and `steps / 2`; the two must
/// agree per component within 1% relative or 1e-6 absolute, otherwise the
/// point straddles a change of clipping topology and
/// [`IouError::NonSmoothPoint`] is returned. The result is the Richardson
/// combination `(4 g_{h/2} - g_h) / 3`.
pub fn iou_loss_grad(p: &Box7, g: &Box7, steps: &[f64; 7]) -> Result<[f64; 7], IouError> {
    for (i, &h) in steps.iter().enumerate() {
        if !(h.is_finite() && h > 0.0) {
            return Err(IouError::InvalidStep { component: i, step: h });
        }
    }
    let iou = iou_3d(p, g).iou;
    if iou <= 0.0 || iou >= 1.0 {
        return Err(IouError::DegenerateOverlap { iou });
    }
    let coarse = central_difference(p, g, steps)?;
    let fine = central_difference(p, g, &steps.map(|h| 0.5 * h))?;
    let mut out = [0.0; 7];
    for i in 0..7 {
        let (c, f) = (coarse[i], fine[i]);
        let tol = (0.01 * c.abs().max(f.abs())).max(1e-6);
        if (c - f).abs() > tol {
            return Err(IouError::NonSmoothPoint { component: i, coarse: c, fine: f });
        }
        out[i] = (4.0 * f - c) / 3.0;
    }
    Ok(out)
}

/// Monte-Carlo IoU estimate with its binomial standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonteCarloEstimate {
    pub iou: f64,
    pub std_error: f64,
    /// Samples that landed in at least one box.
    pub union_hits: u64,
}

/// Reference IoU by uniform sampling of the axis-aligned bounding volume of
/// both boxes. Conditional on landing in the union, a sample lands in the
/// intersection with probability IoU, so the estimate is `both / union` and
/// its standard error is `sqrt(iou (1 - iou) / union)`.
pub fn monte_carlo_iou(p: &Box7, g: &Box7, samples: u64, seed: u64) -> MonteCarloEstimate {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for c in p.corners().0.iter().chain(g.corners().0.iter()) {
        for (k, v) in [c.x, c.y, c.z].into_iter().enumerate() {
            lo[k] = lo[k].min(v);
            hi[k] = hi[k].max(v);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut union, mut both) = (0u64, 0u64);
    for _ in 0..samples.max(1) {
        let q = Point3::new(
            lo[0] + (hi[0] - lo[0]) * rng.random::<f64>(),
            lo[1] + (hi[1] - lo[1]) * rng.random::<f64>(),
            lo[2] + (hi[2] - lo[2]) * rng.random::<f64>(),
        );
        let (in_p, in_g) = (p.contains(&q), g.contains(&q));
        if in_p || in_g {
            union += 1;
            if in_p && in_g {
                both += 1;
            }
        }
    }
    if union == 0 {
        return MonteCarloEstimate { iou: 0.0, std_error: 0.0, union_hits: 0 };
    }
    let iou = both as f64 / union as f64;
    let std_error = sqrt(iou * (1.0 - iou) / union as f64);
    MonteCarloEstimate { iou, std_error, union_hits: union }
}
