//! Generator pieces F, G, Lambda of the slope equation and deterministic
//! upper/lower envelopes of F over a coefficient box.

use thiserror::Error;

use crate::model::{CoefficientBox, Interval, SlopeCoeffs};

/// Minimum allowed |1 - s3*y| for any generator evaluation.
pub const DENOM_GUARD: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum GeneratorError {
    #[error("singular denominator: |1 - s3*y| = {0:.3e} below guard")]
    SingularDenominator(f64),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("guard violation: 1 - s3*y can vanish over box x y-range")]
    GuardViolation,
}

#[derive(Debug, Clone, Copy)]
pub struct GeneratorValue {
    pub f: f64,
    pub g: f64,
    pub lambda: f64,
    /// The value 1 - s3*y.
    pub denom: f64,
}

/// Evaluates
///   F(y) = f1 + f2 y + y(b1 + b2 y) + (f3 + b3 y) y (s1 + s2 y)/(1 - s3 y),
///   G(y) = ((s1 + f3) + (s2 + b3) y)/(1 - s3 y),
///   Lambda(y) = s3/(1 - s3 y).
pub fn eval_generator(c: SlopeCoeffs, y: f64) -> Result<GeneratorValue, GeneratorError> {
    let denom = 1.0 - c.s3 * y;
    if denom.abs() < DENOM_GUARD {
        return Err(GeneratorError::SingularDenominator(denom.abs()));
    }
    let f = c.f1
        + c.f2 * y
        + y * (c.b1 + c.b2 * y)
        + (c.f3 + c.b3 * y) * y * (c.s1 + c.s2 * y) / denom;
    let g = ((c.s1 + c.f3) + (c.s2 + c.b3) * y) / denom;
    let lambda = c.s3 / denom;
    Ok(GeneratorValue { f, g, lambda, denom })
}

/// Cubic coefficients (a0, a1, a2, a3) of F when s3 = 0:
/// F(y) = a0 + a1 y + a2 y^2 + a3 y^3.
pub fn cubic_form(c: SlopeCoeffs) -> Result<(f64, f64, f64, f64), GeneratorError> {
    if c.s3 != 0.0 {
        return Err(GeneratorError::Precondition("cubic_form requires s3 = 0".into()));
    }
    let a0 = c.f1;
    let a1 = c.f2 + c.b1 + c.s1 * c.f3;
    let a2 = c.b2 + c.f3 * c.s2 + c.b3 * c.s1;
    let a3 = c.s2 * c.b3;
    Ok((a0, a1, a2, a3))
}

/// Deterministic envelopes of F over a coefficient box: the pointwise max
/// and min over box vertices. F is affine in each of the eight coefficients
/// other than s3, and fractional-linear in s3 on intervals where the
/// denominator keeps its sign, so extrema over the box occur at vertices.
#[derive(Clone)]
pub struct Envelope {
    vertices: Vec<SlopeCoeffs>,
    s3: Interval,
    pub guard: f64,
}

impl Envelope {
    /// Degenerate envelope around a single coefficient point.
    pub fn point(c: SlopeCoeffs) -> Self {
        Envelope { vertices: vec![c], s3: Interval::point(c.s3), guard: DENOM_GUARD }
    }

    fn check_guard(&self, y: f64) -> Result<(), GeneratorError> {
        // 1 - s3*y is monotone in s3, so its range over the box at fixed y
        // is spanned by the s3 endpoints.
        let d1 = 1.0 - self.s3.lo * y;
        let d2 = 1.0 - self.s3.hi * y;
        if d1.abs() < self.guard || d2.abs() < self.guard || d1.signum() != d2.signum() {
            return Err(GeneratorError::SingularDenominator(d1.abs().min(d2.abs())));
        }
        Ok(())
    }

    pub fn upper(&self, y: f64) -> Result<f64, GeneratorError> {
        self.check_guard(y)?;
        let mut best = f64::NEG_INFINITY;
        for v in &self.vertices {
            best = best.max(eval_generator(*v, y)?.f);
        }
        Ok(best)
    }

    /// Sign of 1 - s3*y at y, assuming y passes the guard check.
    pub fn orientation(&self, y: f64) -> f64 {
        (1.0 - self.s3.lo * y).signum()
    }

    /// Signed clearance of 1 - s3*y from the guard band over the box,
    /// oriented so `orient` marks the safe side. Non-positive means y has
    /// entered the band or crossed the singular level.
    pub fn guard_clearance(&self, y: f64, orient: f64) -> f64 {
        let d1 = orient * (1.0 - self.s3.lo * y);
        let d2 = orient * (1.0 - self.s3.hi * y);
        d1.min(d2) - self.guard
    }

    pub fn lower(&self, y: f64) -> Result<f64, GeneratorError> {
        self.check_guard(y)?;
        let mut best = f64::INFINITY;
        for v in &self.vertices {
            best = best.min(eval_generator(*v, y)?.f);
        }
        Ok(best)
    }
}

/// Builds the vertex envelope, rejecting boxes whose denominator 1 - s3*y
/// can vanish (or cross zero) somewhere on box x y_range.
pub fn envelope_from_box(
    bounds: &CoefficientBox,
    y_range: Interval,
) -> Result<Envelope, GeneratorError> {
    // 1 - s3*y is bilinear in (s3, y); its extremes over the rectangle
    // s3-interval x y_range sit at the four corners.
    let corners = [
        1.0 - bounds.s3.lo * y_range.lo,
        1.0 - bounds.s3.lo * y_range.hi,
        1.0 - bounds.s3.hi * y_range.lo,
        1.0 - bounds.s3.hi * y_range.hi,
    ];
    let min_abs = corners.iter().fold(f64::INFINITY, |m, d| m.min(d.abs()));
    let same_sign = corners.iter().all(|d| *d > 0.0) || corners.iter().all(|d| *d < 0.0);
    if !same_sign || min_abs < DENOM_GUARD {
        return Err(GeneratorError::GuardViolation);
    }
    Ok(Envelope { vertices: bounds.vertices(), s3: bounds.s3, guard: DENOM_GUARD })
}
