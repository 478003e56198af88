//! Lorentz (hyperboloid) model primitives.
//!
//! Points live on the upper sheet `{x : <x,x>_L = -1/c, x_time > 0}` and are
//! stored as a time component plus a spatial vector. The origin is
//! `[1/sqrt(c), 0]`. All arithmetic is `f64`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Roundoff allowance for arcosh/arccos arguments. Inside the band the
/// argument is clamped silently; outside it a domain error is raised.
pub const GUARD_BAND: f64 = 1e-6;

/// Below this Euclidean norm a spatial vector counts as zero.
pub const NORM_EPS: f64 = 1e-12;

const SINHC_TAYLOR_BELOW: f64 = 1e-4;

/// Magnitude `c > 0` of the constant negative curvature `-c`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Curvature(f64);

impl Curvature {
    pub fn new(c: f64) -> Result<Self> {
        if c.is_finite() && c > 0.0 {
            Ok(Curvature(c))
        } else {
            Err(Error::InvalidArgument(format!(
                "curvature must be positive and finite, got {c}"
            )))
        }
    }

    #[inline]
    pub fn value(self) -> f64 {
        self.0
    }

    #[inline]
    pub fn sqrt(self) -> f64 {
        self.0.sqrt()
    }
}

impl Default for Curvature {
    fn default() -> Self {
        Curvature(1.0)
    }
}

impl TryFrom<f64> for Curvature {
    type Error = Error;

    fn try_from(c: f64) -> Result<Self> {
        Curvature::new(c)
    }
}

impl From<Curvature> for f64 {
    fn from(c: Curvature) -> f64 {
        c.0
    }
}

/// A point on the hyperboloid.
#[derive(Clone, Debug, PartialEq)]
pub struct LorentzPoint {
    time: f64,
    space: Vec<f64>,
}

impl LorentzPoint {
    /// Builds a point from explicit components, checking the hyperboloid
    /// constraint to `1e-9` relative tolerance.
    pub fn from_parts(time: f64, space: Vec<f64>, c: Curvature) -> Result<Self> {
        if !time.is_finite() || space.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite point component".into()));
        }
        if time <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "time component must be positive, got {time}"
            )));
        }
        let expected = lift_time(space.clone(), c).time;
        if (time - expected).abs() > 1e-9 * expected {
            return Err(Error::Validation(format!(
                "point is off the hyperboloid: time {time}, expected {expected}"
            )));
        }
        Ok(LorentzPoint { time, space })
    }

    #[inline]
    pub fn time(&self) -> f64 {
        self.time
    }

    #[inline]
    pub fn space(&self) -> &[f64] {
        &self.space
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.space.len()
    }

    pub fn into_space(self) -> Vec<f64> {
        self.space
    }

    /// `<x,x>_L + 1/c`, zero on the hyperboloid.
    pub fn constraint_residual(&self, c: Curvature) -> f64 {
        inner_parts(self.time, &self.space, self.time, &self.space) + 1.0 / c.value()
    }
}

/// Tangent vector at the origin. Its time component is implicitly zero.
#[derive(Clone, Debug, PartialEq)]
pub struct TangentVector(pub Vec<f64>);

/// A point in the Klein chart, `||coords|| < 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct KleinPoint {
    pub coords: Vec<f64>,
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

#[inline]
pub(crate) fn inner_parts(xt: f64, xs: &[f64], yt: f64, ys: &[f64]) -> f64 {
    -xt * yt + dot(xs, ys)
}

fn check_dims(a: usize, b: usize) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            expected: a,
            found: b,
        })
    }
}

/// Lorentzian inner product `-x_t y_t + <x_s, y_s>`.
pub fn lorentz_inner(x: &LorentzPoint, y: &LorentzPoint) -> Result<f64> {
    check_dims(x.dim(), y.dim())?;
    Ok(inner_parts(x.time, &x.space, y.time, &y.space))
}

/// Hyperboloid origin `[1/sqrt(c), 0]` in `dim` spatial dimensions.
pub fn origin(dim: usize, c: Curvature) -> LorentzPoint {
    LorentzPoint {
        time: 1.0 / c.sqrt(),
        space: vec![0.0; dim],
    }
}

/// Completes a spatial vector with `time = sqrt(1/c + ||space||^2)`.
pub fn lift_time(space: Vec<f64>, c: Curvature) -> LorentzPoint {
    let time = (1.0 / c.value() + norm_sq(&space)).sqrt();
    LorentzPoint { time, space }
}

/// Clamps an arcosh argument to `[1, inf)`, erroring below the guard band.
pub(crate) fn guard_acosh_arg(arg: f64) -> Result<f64> {
    if arg.is_nan() || arg < 1.0 - GUARD_BAND {
        return Err(Error::NumericalDomain(format!(
            "arcosh argument {arg} is below 1"
        )));
    }
    Ok(arg.max(1.0))
}

/// Clamps an arccos argument to `[-1, 1]`, erroring outside the guard band.
pub(crate) fn guard_acos_arg(arg: f64) -> Result<f64> {
    if arg.is_nan() || arg.abs() > 1.0 + GUARD_BAND {
        return Err(Error::NumericalDomain(format!(
            "arccos argument {arg} is outside [-1, 1]"
        )));
    }
    Ok(arg.clamp(-1.0, 1.0))
}

/// Geodesic distance `acosh(-c <x,y>_L) / sqrt(c)`.
pub fn lorentz_distance(x: &LorentzPoint, y: &LorentzPoint, c: Curvature) -> Result<f64> {
    let arg = guard_acosh_arg(-c.value() * lorentz_inner(x, y)?)?;
    if arg < 2.0 {
        // Near the diagonal arcosh turns one rounding error in its argument
        // into sqrt(2 eps) of distance. The equivalent chord form
        // sinh(sqrt(c) d / 2) = sqrt(c) |x - y|_L / 2 is exact at x == y.
        let dt = x.time - y.time;
        let ds: f64 = x.space.iter().zip(&y.space).map(|(a, b)| (a - b) * (a - b)).sum();
        let chord = (ds - dt * dt).max(0.0).sqrt();
        return Ok(2.0 * (0.5 * c.sqrt() * chord).asinh() / c.sqrt());
    }
    Ok(arg.acosh() / c.sqrt())
}

/// `sinh(t) / t`, continuous at zero.
#[inline]
pub fn sinhc(t: f64) -> f64 {
    if t.abs() < SINHC_TAYLOR_BELOW {
        1.0 + t * t / 6.0
    } else {
        t.sinh() / t
    }
}

/// Exponential map at the origin: `space = sinh(sqrt(c)|z|)/(sqrt(c)|z|) z`,
/// with the time component recovered by [`lift_time`].
pub fn exp_map_origin(z: &TangentVector, c: Curvature) -> LorentzPoint {
    let scale = sinhc(c.sqrt() * norm_sq(&z.0).sqrt());
    lift_time(z.0.iter().map(|v| scale * v).collect(), c)
}

pub fn lorentz_to_klein(x: &LorentzPoint) -> KleinPoint {
    KleinPoint {
        coords: x.space.iter().map(|v| v / x.time).collect(),
    }
}

/// Inverse of [`lorentz_to_klein`]: `[1, k] / sqrt(c (1 - ||k||^2))`.
pub fn klein_to_lorentz(k: &KleinPoint, c: Curvature) -> Result<LorentzPoint> {
    let nk = norm_sq(&k.coords);
    if nk.is_nan() || nk >= 1.0 {
        return Err(Error::NumericalDomain(format!(
            "Klein point has squared norm {nk} >= 1"
        )));
    }
    let scale = 1.0 / (c.value() * (1.0 - nk)).sqrt();
    // Recompute time from the scaled space so the result sits on the
    // hyperboloid to working precision.
    let space: Vec<f64> = k.coords.iter().map(|v| v * scale).collect();
    Ok(lift_time(space, c))
}

/// Lorentz factor of a Klein point, `1/sqrt(1 - ||k||^2)`.
fn lorentz_factor(k: &KleinPoint) -> f64 {
    1.0 / (1.0 - norm_sq(&k.coords)).sqrt()
}

/// Einstein-midpoint centroid: Lorentz-factor-weighted Klein average mapped
/// back onto the hyperboloid. Optional `weights` multiply the Lorentz factors.
pub fn lorentz_centroid(
    points: &[LorentzPoint],
    weights: Option<&[f64]>,
    c: Curvature,
) -> Result<LorentzPoint> {
    let first = points
        .first()
        .ok_or_else(|| Error::InvalidArgument("centroid of an empty point set".into()))?;
    let dim = first.dim();
    if let Some(w) = weights {
        check_dims(points.len(), w.len())?;
        if w.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::InvalidArgument(
                "centroid weights must be positive and finite".into(),
            ));
        }
    }
    let mut acc = vec![0.0; dim];
    let mut total = 0.0;
    for (j, p) in points.iter().enumerate() {
        check_dims(dim, p.dim())?;
        let k = lorentz_to_klein(p);
        let g = lorentz_factor(&k) * weights.map_or(1.0, |w| w[j]);
        for (a, v) in acc.iter_mut().zip(&k.coords) {
            *a += g * v;
        }
        total += g;
    }
    for a in &mut acc {
        *a /= total;
    }
    klein_to_lorentz(&KleinPoint { coords: acc }, c)
}

/// Exterior angle at `brain` between the outward radial direction and the
/// geodesic towards `text`, in `[0, pi]`.
pub fn exterior_angle(brain: &LorentzPoint, text: &LorentzPoint, c: Curvature) -> Result<f64> {
    check_dims(brain.dim(), text.dim())?;
    let parts = ExteriorParts::new(brain.time, &brain.space, text.time, &text.space, c)?;
    Ok(guard_acos_arg(parts.cosine)?.acos())
}

/// Intermediate quantities of the exterior-angle formula, shared with the
/// gradient code in `losses`.
pub(crate) struct ExteriorParts {
    /// `c <brain, text>_L`
    pub scaled_inner: f64,
    /// `||brain_space||`
    pub brain_norm: f64,
    /// `sqrt((c <brain,text>_L)^2 - 1)`
    pub root: f64,
    /// Unclamped cosine.
    pub cosine: f64,
}

impl ExteriorParts {
    pub(crate) fn new(bt: f64, bs: &[f64], tt: f64, ts: &[f64], c: Curvature) -> Result<Self> {
        let brain_norm = norm_sq(bs).sqrt();
        if brain_norm <= NORM_EPS {
            return Err(Error::DegeneratePair(
                "brain embedding is at the origin".into(),
            ));
        }
        let scaled_inner = c.value() * inner_parts(bt, bs, tt, ts);
        let root_sq = scaled_inner * scaled_inner - 1.0;
        if root_sq.is_nan() || root_sq <= NORM_EPS {
            return Err(Error::DegeneratePair(
                "brain and text embeddings coincide".into(),
            ));
        }
        let root = root_sq.sqrt();
        let cosine = (tt + bt * scaled_inner) / (brain_norm * root);
        Ok(ExteriorParts {
            scaled_inner,
            brain_norm,
            root,
            cosine,
        })
    }
}

/// Poincaré-ball coordinates `space / (1 + sqrt(c) time)`; the image has
/// norm below `1/sqrt(c)`.
pub fn poincare_projection(x: &LorentzPoint, c: Curvature) -> Vec<f64> {
    let denom = 1.0 + c.sqrt() * x.time;
    x.space.iter().map(|v| v / denom).collect()
}
