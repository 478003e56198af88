//! Training objectives and their exact gradients.
//!
//! * angle loss: InfoNCE over negated exterior angles, one softmax per brain
//!   anchor across all text candidates in the batch;
//! * centroid loss: pulls the Einstein midpoints of the brain and text sets
//!   to fixed geodesic distances from the origin;
//! * hierarchy loss: penalises a brain embedding with more active regions
//!   sitting further from the origin (larger time component) than one
//!   with fewer.
//!
//! Gradients are first taken with respect to each point's `(time, space)`
//! treated as free variables, then chained through `time = sqrt(1/c +
//! |space|^2)` and the origin exponential map down to the Euclidean
//! pre-projection vectors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    dot, exp_map_origin, guard_acos_arg, lorentz_centroid, lorentz_distance, norm_sq, origin,
    sinhc, Curvature, ExteriorParts, LorentzPoint, TangentVector,
};
use crate::par;

/// Index-aligned brain/text embeddings of one batch.
#[derive(Clone, Debug)]
pub struct BatchEmbeddings {
    pub brain: Vec<LorentzPoint>,
    pub text: Vec<LorentzPoint>,
    pub region_counts: Vec<u32>,
}

impl BatchEmbeddings {
    pub fn new(
        brain: Vec<LorentzPoint>,
        text: Vec<LorentzPoint>,
        region_counts: Vec<u32>,
    ) -> Result<Self> {
        let n = brain.len();
        if n == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        for len in [text.len(), region_counts.len()] {
            if len != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    found: len,
                });
            }
        }
        let dim = brain[0].dim();
        for p in brain.iter().chain(&text) {
            if p.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: p.dim(),
                });
            }
        }
        Ok(BatchEmbeddings {
            brain,
            text,
            region_counts,
        })
    }

    /// Lifts Euclidean pre-projection vectors through the origin exp map.
    pub fn from_tangents(
        brain: &[Vec<f64>],
        text: &[Vec<f64>],
        region_counts: &[u32],
        c: Curvature,
    ) -> Result<Self> {
        let lift = |z: &Vec<f64>| exp_map_origin(&TangentVector(z.clone()), c);
        BatchEmbeddings::new(
            brain.iter().map(lift).collect(),
            text.iter().map(lift).collect(),
            region_counts.to_vec(),
        )
    }

    pub fn len(&self) -> usize {
        self.brain.len()
    }

    pub fn is_empty(&self) -> bool {
        self.brain.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub tau: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub p: f64,
    pub q: f64,
    pub curvature: Curvature,
    /// Average the brain→text InfoNCE with its text→brain counterpart.
    #[serde(default)]
    pub symmetric: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: 0.1,
            lambda1: 0.5,
            lambda2: 30.0,
            p: 2.0,
            q: 0.5,
            // The smallest curvature for which acosh(c q) is defined at q = 0.5.
            curvature: Curvature::new(2.0).expect("positive"),
            symmetric: false,
        }
    }
}

impl LossConfig {
    /// Returns one message per offending field.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let c = self.curvature.value();
        if !(self.tau.is_finite() && self.tau > 0.0) {
            out.push(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.lambda1.is_finite() && self.lambda1 >= 0.0) {
            out.push(format!("lambda1 must be nonnegative, got {}", self.lambda1));
        }
        if !(self.lambda2.is_finite() && self.lambda2 >= 0.0) {
            out.push(format!("lambda2 must be nonnegative, got {}", self.lambda2));
        }
        if !(self.p > self.q) {
            out.push(format!("p must exceed q, got p={} q={}", self.p, self.q));
        }
        if !(c * self.p >= 1.0) {
            out.push(format!("p: c*p must be >= 1, got {}", c * self.p));
        }
        if !(c * self.q >= 1.0) {
            out.push(format!("q: c*q must be >= 1, got {}", c * self.q));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(problems.join("; ")))
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub angle: f64,
    pub centroid: f64,
    pub hierarchy: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn combine(angle: f64, centroid: f64, hierarchy: f64, lambda1: f64, lambda2: f64) -> Self {
        LossBreakdown {
            angle,
            centroid,
            hierarchy,
            total: angle + lambda1 * centroid + lambda2 * hierarchy,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.angle.is_finite()
            && self.centroid.is_finite()
            && self.hierarchy.is_finite()
            && self.total.is_finite()
    }
}

/// Gradient of a scalar with respect to one point's free `(time, space)`.
#[derive(Clone, Debug, PartialEq)]
struct PointGrad {
    time: f64,
    space: Vec<f64>,
}

impl PointGrad {
    fn zeros(dim: usize) -> Self {
        PointGrad {
            time: 0.0,
            space: vec![0.0; dim],
        }
    }
}

#[derive(Clone, Debug)]
struct BatchPointGrads {
    brain: Vec<PointGrad>,
    text: Vec<PointGrad>,
}

impl BatchPointGrads {
    fn zeros(n: usize, dim: usize) -> Self {
        BatchPointGrads {
            brain: vec![PointGrad::zeros(dim); n],
            text: vec![PointGrad::zeros(dim); n],
        }
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau.is_finite() && tau > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {tau}"
        )))
    }
}

/// Exterior angles for every (brain i, text j) pair, row-major by brain.
pub fn angle_matrix(batch: &BatchEmbeddings, c: Curvature) -> Result<Vec<f64>> {
    let n = batch.len();
    let rows = par::try_map_range(n, |i| {
        let b = &batch.brain[i];
        batch
            .text
            .iter()
            .map(|t| {
                let parts = ExteriorParts::new(b.time(), b.space(), t.time(), t.space(), c)?;
                Ok(guard_acos_arg(parts.cosine)?.acos())
            })
            .collect::<Result<Vec<f64>>>()
    })?;
    Ok(rows.concat())
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// InfoNCE of an `n x n` angle matrix (rows = anchors) and its gradient with
/// respect to every angle. With `symmetric`, the column-anchored loss is
/// averaged in.
pub fn info_nce(angles: &[f64], n: usize, tau: f64, symmetric: bool) -> Result<(f64, Vec<f64>)> {
    check_tau(tau)?;
    if angles.len() != n * n {
        return Err(Error::DimensionMismatch {
            expected: n * n,
            found: angles.len(),
        });
    }
    let nf = n as f64;
    let mut grad = vec![0.0; n * n];
    let directional = |grad: &mut [f64], at: &dyn Fn(usize, usize) -> usize, weight: f64| {
        let mut loss = 0.0;
        for i in 0..n {
            let logits = (0..n).map(|j| -angles[at(i, j)] / tau);
            let lse = log_sum_exp(logits.clone());
            loss += angles[at(i, i)] / tau + lse;
            for j in 0..n {
                let prob = (-angles[at(i, j)] / tau - lse).exp();
                let delta = if i == j { 1.0 } else { 0.0 };
                grad[at(i, j)] += weight * (delta - prob) / (nf * tau);
            }
        }
        weight * loss / nf
    };
    let loss = if symmetric {
        directional(&mut grad, &|i, j| i * n + j, 0.5) + directional(&mut grad, &|i, j| j * n + i, 0.5)
    } else {
        directional(&mut grad, &|i, j| i * n + j, 1.0)
    };
    Ok((loss, grad))
}

/// InfoNCE over negated exterior angles; the softmax of anchor `i` runs over
/// all text candidates `j`.
pub fn angle_loss(batch: &BatchEmbeddings, tau: f64, c: Curvature) -> Result<f64> {
    check_tau(tau)?;
    let angles = angle_matrix(batch, c)?;
    Ok(info_nce(&angles, batch.len(), tau, false)?.0)
}

fn angle_loss_with_grad(
    batch: &BatchEmbeddings,
    tau: f64,
    symmetric: bool,
    c: Curvature,
) -> Result<(f64, BatchPointGrads)> {
    let n = batch.len();
    let angles = angle_matrix(batch, c)?;
    let (loss, weights) = info_nce(&angles, n, tau, symmetric)?;
    // Two passes over the pairs, one owning each brain row and one owning
    // each text column, so that every accumulation has a fixed order.
    let brain = par::try_map_range(n, |i| {
        let mut g = PointGrad::zeros(batch.brain[i].dim());
        for j in 0..n {
            let w = weights[i * n + j];
            if w != 0.0 {
                accumulate_angle_grad(&batch.brain[i], &batch.text[j], c, w, Some(&mut g), None)?;
            }
        }
        Ok::<_, Error>(g)
    })?;
    let text = par::try_map_range(n, |j| {
        let mut g = PointGrad::zeros(batch.text[j].dim());
        for i in 0..n {
            let w = weights[i * n + j];
            if w != 0.0 {
                accumulate_angle_grad(&batch.brain[i], &batch.text[j], c, w, None, Some(&mut g))?;
            }
        }
        Ok::<_, Error>(g)
    })?;
    Ok((loss, BatchPointGrads { brain, text }))
}

/// Adds `weight * d ext(b, t)` to the requested accumulators.
fn accumulate_angle_grad(
    b: &LorentzPoint,
    t: &LorentzPoint,
    c: Curvature,
    weight: f64,
    brain_acc: Option<&mut PointGrad>,
    text_acc: Option<&mut PointGrad>,
) -> Result<()> {
    let (b0, bs, t0, ts) = (b.time(), b.space(), t.time(), t.space());
    let parts = ExteriorParts::new(b0, bs, t0, ts, c)?;
    let a = parts.cosine;
    guard_acos_arg(a)?;
    if a.abs() >= 1.0 {
        // Clamped: zero subgradient.
        return Ok(());
    }
    let scale = -weight / (1.0 - a * a).sqrt();
    let cv = c.value();
    let (r, s, ci) = (parts.brain_norm, parts.root, parts.scaled_inner);
    let d = r * s;
    // Coefficient of d<b,t>_L in dA.
    let ci_coef = (b0 * cv - a * r * ci * cv / s) / d;
    if let Some(g) = brain_acc {
        g.time += scale * (ci / d - ci_coef * t0);
        let inv_r2 = 1.0 / (r * r);
        for ((gk, tk), bk) in g.space.iter_mut().zip(ts).zip(bs) {
            *gk += scale * (ci_coef * tk - a * bk * inv_r2);
        }
    }
    if let Some(g) = text_acc {
        g.time += scale * (1.0 / d - ci_coef * b0);
        for (gk, bk) in g.space.iter_mut().zip(bs) {
            *gk += scale * ci_coef * bk;
        }
    }
    Ok(())
}

fn target_distance(x: f64, c: Curvature) -> Result<f64> {
    let arg = c.value() * x;
    if !(arg >= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "target distance undefined: c*{x} = {arg} < 1"
        )));
    }
    Ok(arg.acosh() / c.sqrt())
}

/// `|d(O, c_text) - acosh(c p)/sqrt(c)| + |d(O, c_brain) - acosh(c q)/sqrt(c)|`.
pub fn centroid_loss(batch: &BatchEmbeddings, p: f64, q: f64, c: Curvature) -> Result<f64> {
    if !(p > q) {
        return Err(Error::InvalidArgument(format!(
            "p must exceed q, got p={p} q={q}"
        )));
    }
    let (target_text, target_brain) = (target_distance(p, c)?, target_distance(q, c)?);
    let o = origin(batch.brain[0].dim(), c);
    let text_c = lorentz_centroid(&batch.text, None, c)?;
    let brain_c = lorentz_centroid(&batch.brain, None, c)?;
    Ok((lorentz_distance(&o, &text_c, c)? - target_text).abs()
        + (lorentz_distance(&o, &brain_c, c)? - target_brain).abs())
}

/// Gradient of `|d(O, centroid(points)) - target|`.
///
/// With Lorentz factors proportional to time, the Klein mean is
/// `k = sum(space) / sum(time)` and `d(O, centroid) = atanh(|k|) / sqrt(c)`.
fn centroid_term_grad(points: &[LorentzPoint], residual: f64, c: Curvature) -> Vec<PointGrad> {
    let dim = points[0].dim();
    let sign = if residual > 0.0 {
        1.0
    } else if residual < 0.0 {
        -1.0
    } else {
        0.0
    };
    let mut sum_space = vec![0.0; dim];
    let mut sum_time = 0.0;
    for p in points {
        for (a, v) in sum_space.iter_mut().zip(p.space()) {
            *a += v;
        }
        sum_time += p.time();
    }
    let k: Vec<f64> = sum_space.iter().map(|v| v / sum_time).collect();
    let k_norm_sq = norm_sq(&k);
    let k_norm = k_norm_sq.sqrt();
    if sign == 0.0 || k_norm == 0.0 {
        return vec![PointGrad::zeros(dim); points.len()];
    }
    let radial = sign / (c.sqrt() * (1.0 - k_norm_sq) * k_norm);
    // dL/dk = radial * k
    let dk: Vec<f64> = k.iter().map(|v| radial * v).collect();
    let space: Vec<f64> = dk.iter().map(|v| v / sum_time).collect();
    let time = -dot(&dk, &sum_space) / (sum_time * sum_time);
    vec![PointGrad { time, space }; points.len()]
}

fn centroid_loss_with_grad(
    batch: &BatchEmbeddings,
    p: f64,
    q: f64,
    c: Curvature,
) -> Result<(f64, BatchPointGrads)> {
    if !(p > q) {
        return Err(Error::InvalidArgument(format!(
            "p must exceed q, got p={p} q={q}"
        )));
    }
    let (target_text, target_brain) = (target_distance(p, c)?, target_distance(q, c)?);
    let o = origin(batch.brain[0].dim(), c);
    let text_res = lorentz_distance(&o, &lorentz_centroid(&batch.text, None, c)?, c)? - target_text;
    let brain_res =
        lorentz_distance(&o, &lorentz_centroid(&batch.brain, None, c)?, c)? - target_brain;
    let grads = BatchPointGrads {
        brain: centroid_term_grad(&batch.brain, brain_res, c),
        text: centroid_term_grad(&batch.text, text_res, c),
    };
    Ok((text_res.abs() + brain_res.abs(), grads))
}

/// `(1/N^2) sum_{R_i > R_j} (R_i - R_j) max(ln(t_i / t_j), 0)` over brain times.
pub fn hierarchy_loss(batch: &BatchEmbeddings) -> f64 {
    hierarchy_loss_with_grad(batch).0
}

fn hierarchy_loss_with_grad(batch: &BatchEmbeddings) -> (f64, BatchPointGrads) {
    let n = batch.len();
    let norm = 1.0 / (n * n) as f64;
    let times: Vec<f64> = batch.brain.iter().map(LorentzPoint::time).collect();
    let r = &batch.region_counts;
    let rows = par::map_range(n, |i| {
        let mut loss = 0.0;
        let mut grad = 0.0;
        for j in 0..n {
            // i as the broader activation
            if r[i] > r[j] && times[i] > times[j] {
                let w = f64::from(r[i] - r[j]) * norm;
                loss += w * (times[i] / times[j]).ln();
                grad += w / times[i];
            }
            // i as the narrower activation
            if r[j] > r[i] && times[j] > times[i] {
                grad -= f64::from(r[j] - r[i]) * norm / times[i];
            }
        }
        (loss, grad)
    });
    let dim = batch.brain[0].dim();
    let mut grads = BatchPointGrads::zeros(n, dim);
    let mut loss = 0.0;
    for (i, (l, g)) in rows.into_iter().enumerate() {
        loss += l;
        grads.brain[i].time = g;
    }
    (loss, grads)
}

pub fn joint_loss(batch: &BatchEmbeddings, cfg: &LossConfig) -> Result<LossBreakdown> {
    cfg.validate()?;
    let c = cfg.curvature;
    let angle = if cfg.symmetric {
        let angles = angle_matrix(batch, c)?;
        info_nce(&angles, batch.len(), cfg.tau, true)?.0
    } else {
        angle_loss(batch, cfg.tau, c)?
    };
    let centroid = centroid_loss(batch, cfg.p, cfg.q, c)?;
    let hierarchy = hierarchy_loss(batch);
    Ok(LossBreakdown::combine(
        angle,
        centroid,
        hierarchy,
        cfg.lambda1,
        cfg.lambda2,
    ))
}

/// Per-sample gradients with respect to the Euclidean pre-projection vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct TangentGrads {
    pub brain: Vec<Vec<f64>>,
    pub text: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct JointGradient {
    pub breakdown: LossBreakdown,
    /// Gradient of the weighted total.
    pub total: TangentGrads,
    /// Unweighted component gradients.
    pub angle: TangentGrads,
    pub centroid: TangentGrads,
    pub hierarchy: TangentGrads,
}

/// Chains a `(time, space)` gradient through `lift_time` and the origin
/// exponential map back to the tangent vector `z`.
fn tangent_grad(z: &[f64], point: &LorentzPoint, g: &PointGrad, c: Curvature) -> Vec<f64> {
    // Through time = sqrt(1/c + |s|^2).
    let t = point.time();
    let gs: Vec<f64> = g
        .space
        .iter()
        .zip(point.space())
        .map(|(gk, sk)| gk + g.time * sk / t)
        .collect();
    // Through s = sinhc(k n) z with k = sqrt(c), n = |z|.
    let k = c.sqrt();
    let n = norm_sq(z).sqrt();
    let x = k * n;
    let scale = sinhc(x);
    // sinhc'(k n) k / n, expanded near zero to avoid cancellation.
    let radial = if x < 1e-2 {
        let x2 = x * x;
        k * k * (1.0 / 3.0 + x2 / 30.0 + x2 * x2 / 840.0)
    } else {
        (x * x.cosh() - x.sinh()) / (x * n * n)
    };
    let zg = dot(z, &gs);
    gs.iter()
            .zip(z)
            .map(|(gk, zk)| scale * gk + radial * zg * zk)
            .collect()
}

fn chain_batch(
    brain_z: &[Vec<f64>],
    text_z: &[Vec<f64>],
    batch: &BatchEmbeddings,
    grads: &BatchPointGrads,
    c: Curvature,
) -> TangentGrads {
    let n = batch.len();
    let brain = par::map_range(n, |i| tangent_grad(&brain_z[i], &batch.brain[i], &grads.brain[i], c));
    let text = par::map_range(n, |i| tangent_grad(&text_z[i], &batch.text[i], &grads.text[i], c));
    TangentGrads { brain, text }
}

/// Joint loss and its gradient with respect to each pre-projection vector.
pub fn joint_loss_grad(
    brain_z: &[Vec<f64>],
    text_z: &[Vec<f64>],
    region_counts: &[u32],
    cfg: &LossConfig,
) -> Result<JointGradient> {
    cfg.validate()?;
    let c = cfg.curvature;
    if let Some(bad) = brain_z
        .iter()
        .chain(text_z)
        .flatten()
        .find(|v| !v.is_finite())
    {
        return Err(Error::InvalidArgument(format!(
            "non-finite embedding value {bad}"
        )));
    }
    let batch = BatchEmbeddings::from_tangents(brain_z, text_z, region_counts, c)?;
    let (angle, angle_g) = angle_loss_with_grad(&batch, cfg.tau, cfg.symmetric, c)?;
    let (centroid, centroid_g) = centroid_loss_with_grad(&batch, cfg.p, cfg.q, c)?;
    let (hierarchy, hierarchy_g) = hierarchy_loss_with_grad(&batch);

    let angle = (angle, chain_batch(brain_z, text_z, &batch, &angle_g, c));
    let centroid = (centroid, chain_batch(brain_z, text_z, &batch, &centroid_g, c));
    let hierarchy = (hierarchy, chain_batch(brain_z, text_z, &batch, &hierarchy_g, c));

    let combine = |a: &[Vec<f64>], b: &[Vec<f64>], h: &[Vec<f64>]| -> Vec<Vec<f64>> {
        a.iter()
            .zip(b)
            .zip(h)
            .map(|((av, bv), hv)| {
                av.iter()
                    .zip(bv)
                    .zip(hv)
                    .map(|((x, y), z)| x + cfg.lambda1 * y + cfg.lambda2 * z)
                    .collect()
            })
            .collect()
    };
    let total = TangentGrads {
        brain: combine(&angle.1.brain, &centroid.1.brain, &hierarchy.1.brain),
        text: combine(&angle.1.text, &centroid.1.text, &hierarchy.1.text),
    };
    Ok(JointGradient {
        breakdown: LossBreakdown::combine(angle.0, centroid.0, hierarchy.0, cfg.lambda1, cfg.lambda2),
        total,
        angle: angle.1,
        centroid: centroid.1,
        hierarchy: hierarchy.1,
    })
}
