//! Problem definitions, JSON ingestion, and validation of the standing
//! Lipschitz assumptions.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Coefficient of the state equation, evaluated at (t, x, y, z).
pub type CoeffFn = Arc<dyn Fn(f64, f64, f64, f64) -> f64>;
/// Terminal condition, evaluated at x.
pub type TerminalFn = Arc<dyn Fn(f64) -> f64>;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("quadrature error: {0}")]
    Quadrature(String),
}

/// Closed interval \[lo, hi\].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn point(v: f64) -> Self {
        Interval { lo: v, hi: v }
    }

    pub fn new(lo: f64, hi: f64) -> Self {
        Interval { lo, hi }
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }

    pub fn is_point(&self) -> bool {
        self.lo == self.hi
    }

    /// Widen by `rel` of the width plus `abs` on each side.
    pub fn widened(&self, rel: f64, abs: f64) -> Self {
        let pad = rel * self.width() + abs;
        Interval { lo: self.lo - pad, hi: self.hi + pad }
    }

    fn hull(&self, v: f64) -> Self {
        Interval { lo: self.lo.min(v), hi: self.hi.max(v) }
    }
}

/// The nine slope coefficients: b1,b2,b3 are the x,y,z slopes of b, and
/// likewise s* for sigma and f* for f.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SlopeCoeffs {
    pub b1: f64,
    pub b2: f64,
    pub b3: f64,
    pub s1: f64,
    pub s2: f64,
    pub s3: f64,
    pub f1: f64,
    pub f2: f64,
    pub f3: f64,
}

impl SlopeCoeffs {
    pub fn zero() -> Self {
        SlopeCoeffs::default()
    }
}

/// Interval bounds on the slope coefficients plus the terminal slope h and
/// the classification constants c1, c2, c3.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CoefficientBox {
    pub b1: Interval,
    pub b2: Interval,
    pub b3: Interval,
    pub s1: Interval,
    pub s2: Interval,
    pub s3: Interval,
    pub f1: Interval,
    pub f2: Interval,
    pub f3: Interval,
    pub h: Interval,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
}

impl CoefficientBox {
    /// Point box around constant slopes.
    pub fn point(c: SlopeCoeffs, h: f64) -> Self {
        CoefficientBox {
            b1: Interval::point(c.b1),
            b2: Interval::point(c.b2),
            b3: Interval::point(c.b3),
            s1: Interval::point(c.s1),
            s2: Interval::point(c.s2),
            s3: Interval::point(c.s3),
            f1: Interval::point(c.f1),
            f2: Interval::point(c.f2),
            f3: Interval::point(c.f3),
            h: Interval::point(h),
            c1: c.s3.abs(),
            c2: h.abs(),
            c3: h.abs() + 1.0,
        }
    }

    pub fn zero() -> Self {
        CoefficientBox::point(SlopeCoeffs::zero(), 0.0)
    }

    pub fn intervals(&self) -> [Interval; 9] {
        [self.b1, self.b2, self.b3, self.s1, self.s2, self.s3, self.f1, self.f2, self.f3]
    }

    /// All corners of the nine-dimensional coefficient box. Point intervals
    /// do not multiply the count.
    pub fn vertices(&self) -> Vec<SlopeCoeffs> {
        let iv = self.intervals();
        let mut out = vec![SlopeCoeffs::zero()];
        let mut fields: Vec<Vec<f64>> = Vec::with_capacity(9);
        for i in &iv {
            if i.is_point() {
                fields.push(vec![i.lo]);
            } else {
                fields.push(vec![i.lo, i.hi]);
            }
        }
        for (k, vals) in fields.iter().enumerate() {
            let mut next = Vec::with_capacity(out.len() * vals.len());
            for c in &out {
                for &v in vals {
                    let mut c2 = *c;
                    match k {
                        0 => c2.b1 = v,
                        1 => c2.b2 = v,
                        2 => c2.b3 = v,
                        3 => c2.s1 = v,
                        4 => c2.s2 = v,
                        5 => c2.s3 = v,
                        6 => c2.f1 = v,
                        7 => c2.f2 = v,
                        _ => c2.f3 = v,
                    }
                    next.push(c2);
                }
            }
            out = next;
        }
        out
    }

    pub fn contains(&self, c: SlopeCoeffs) -> bool {
        self.b1.contains(c.b1)
            && self.b2.contains(c.b2)
            && self.b3.contains(c.b3)
            && self.s1.contains(c.s1)
            && self.s2.contains(c.s2)
            && self.s3.contains(c.s3)
            && self.f1.contains(c.f1)
            && self.f2.contains(c.f2)
            && self.f3.contains(c.f3)
    }

    fn check(&self) -> Result<(), ModelError> {
        let named: [(&str, Interval); 10] = [
            ("b1", self.b1),
            ("b2", self.b2),
            ("b3", self.b3),
            ("s1", self.s1),
            ("s2", self.s2),
            ("s3", self.s3),
            ("f1", self.f1),
            ("f2", self.f2),
            ("f3", self.f3),
            ("h", self.h),
        ];
        for (name, iv) in named {
            if !(iv.lo <= iv.hi) {
                return Err(ModelError::Validation(format!(
                    "box interval {name} has lo {} > hi {}",
                    iv.lo, iv.hi
                )));
            }
        }
        Ok(())
    }
}

/// Sampling box for slope estimation and Lipschitz validation.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SampleDomain {
    pub t: (f64, f64),
    pub x: (f64, f64),
    pub y: (f64, f64),
    pub z: (f64, f64),
}

impl SampleDomain {
    pub fn symmetric(t_max: f64, half_width: f64) -> Self {
        SampleDomain {
            t: (0.0, t_max),
            x: (-half_width, half_width),
            y: (-half_width, half_width),
            z: (-half_width, half_width),
        }
    }

    fn nondegenerate(&self) -> bool {
        self.x.1 > self.x.0 && self.y.1 > self.y.0 && self.z.1 > self.z.0 && self.t.1 >= self.t.0
    }
}

/// Markovian coefficient functions with Lipschitz metadata.
#[derive(Clone)]
pub struct CoefficientModel {
    pub b: CoeffFn,
    pub sigma: CoeffFn,
    pub f: CoeffFn,
    pub g: TerminalFn,
    pub lipschitz_k0: f64,
    pub horizon_t: f64,
    pub x0: f64,
    pub domain: SampleDomain,
}

impl std::fmt::Debug for CoefficientModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CoefficientModel")
            .field("lipschitz_k0", &self.lipschitz_k0)
            .field("horizon_t", &self.horizon_t)
            .field("x0", &self.x0)
            .field("domain", &self.domain)
            .finish_non_exhaustive()
    }
}

impl CoefficientModel {
    pub fn new(
        b: CoeffFn,
        sigma: CoeffFn,
        f: CoeffFn,
        g: TerminalFn,
        lipschitz_k0: f64,
        horizon_t: f64,
        x0: f64,
    ) -> Self {
        let domain = SampleDomain::symmetric(horizon_t, 5.0);
        CoefficientModel { b, sigma, f, g, lipschitz_k0, horizon_t, x0, domain }
    }

    /// Linear model with the given constant slopes: b = b1*x + b2*y + b3*z,
    /// sigma = s0 + s1*x + s2*y + s3*z, f = f1*x + f2*y + f3*z, g(x) = h*x.
    pub fn linear(c: SlopeCoeffs, sigma0: f64, h: f64, horizon_t: f64, x0: f64) -> Self {
        let k0 = [c.b1, c.b2, c.b3, c.s1, c.s2, c.s3, c.f1, c.f2, c.f3, h, 1.0]
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        CoefficientModel::new(
            Arc::new(move |_t, x, y, z| c.b1 * x + c.b2 * y + c.b3 * z),
            Arc::new(move |_t, x, y, z| sigma0 + c.s1 * x + c.s2 * y + c.s3 * z),
            Arc::new(move |_t, x, y, z| c.f1 * x + c.f2 * y + c.f3 * z),
            Arc::new(move |x| h * x),
            k0 * 1.01,
            horizon_t,
            x0,
        )
    }

    /// Checks sampled difference quotients of b, sigma, f in each of x, y, z
    /// and of g in x against lipschitz_k0 (with a small tolerance for the
    /// sampling itself).
    pub fn validate(&self) -> Result<(), ModelError> {
        if !self.domain.nondegenerate() {
            return Err(ModelError::Domain("degenerate sampling domain".into()));
        }
        if !(self.horizon_t > 0.0) {
            return Err(ModelError::Validation("horizon_T must be positive".into()));
        }
        if !(self.lipschitz_k0 > 0.0) {
            return Err(ModelError::Validation("lipschitz_K0 must be positive".into()));
        }
        let cap = self.lipschitz_k0 * (1.0 + 1e-9) + 1e-12;
        let box_ = self.slope_box_raw(5)?;
        let named: [(&str, Interval); 9] = [
            ("b in x", box_.b1),
            ("b in y", box_.b2),
            ("b in z", box_.b3),
            ("sigma in x", box_.s1),
            ("sigma in y", box_.s2),
            ("sigma in z", box_.s3),
            ("f in x", box_.f1),
            ("f in y", box_.f2),
            ("f in z", box_.f3),
        ];
        for (name, iv) in named {
            let worst = iv.lo.abs().max(iv.hi.abs());
            if !worst.is_finite() {
                return Err(ModelError::Validation(format!("non-finite slope of {name}")));
            }
            if worst > cap {
                return Err(ModelError::Validation(format!(
                    "sampled slope of {name} is {worst:.6}, exceeds lipschitz_K0 {}",
                    self.lipschitz_k0
                )));
            }
        }
        let hw = box_.h.lo.abs().max(box_.h.hi.abs());
        if hw > cap {
            return Err(ModelError::Validation(format!(
                "sampled slope of g is {hw:.6}, exceeds lipschitz_K0 {}",
                self.lipschitz_k0
            )));
        }
        Ok(())
    }

    /// Unwidened sampled slope box; `per_axis` grid points per axis.
    fn slope_box_raw(&self, per_axis: usize) -> Result<CoefficientBox, ModelError> {
        let d = self.domain;
        let ts = linspace(d.t.0, d.t.1.max(d.t.0 + 1e-9), per_axis);
        let xs = linspace(d.x.0, d.x.1, per_axis);
        let ys = linspace(d.y.0, d.y.1, per_axis);
        let zs = linspace(d.z.0, d.z.1, per_axis);

        // Difference quotients both between adjacent grid nodes and across a
        // small centered offset at each node, so local slope extremes of
        // smooth nonlinear coefficients are picked up.
        let quotients = |phi: &CoeffFn, axis: usize| -> Result<Interval, ModelError> {
            let mut iv: Option<Interval> = None;
            let eps = match axis {
                0 => (d.x.1 - d.x.0) * 1e-5,
                1 => (d.y.1 - d.y.0) * 1e-5,
                _ => (d.z.1 - d.z.0) * 1e-5,
            };
            for &t in &ts {
                for &x in &xs {
                    for &y in &ys {
                        for &z in &zs {
                            let mut push = |q: f64| {
                                if !q.is_finite() {
                                    return Err(ModelError::Validation(
                                        "non-finite difference quotient".into(),
                                    ));
                                }
                                iv = Some(match iv {
                                    None => Interval::point(q),
                                    Some(v) => v.hull(q),
                                });
                                Ok(())
                            };
                            let at = |u: f64| match axis {
                                0 => phi(t, u, y, z),
                                1 => phi(t, x, u, z),
                                _ => phi(t, x, y, u),
                            };
                            let (base, grid) = match axis {
                                0 => (x, &xs),
                                1 => (y, &ys),
                                _ => (z, &zs),
                            };
                            push((at(base + eps) - at(base - eps)) / (2.0 * eps))?;
                            let idx = grid.iter().position(|&v| v == base).unwrap();
                            if idx + 1 < grid.len() {
                                let nb = grid[idx + 1];
                                push((at(nb) - at(base)) / (nb - base))?;
                            }
                        }
                    }
                }
            }
            Ok(iv.unwrap())
        };

        let b1 = quotients(&self.b, 0)?;
        let b2 = quotients(&self.b, 1)?;
        let b3 = quotients(&self.b, 2)?;
        let s1 = quotients(&self.sigma, 0)?;
        let s2 = quotients(&self.sigma, 1)?;
        let s3 = quotients(&self.sigma, 2)?;
        let f1 = quotients(&self.f, 0)?;
        let f2 = quotients(&self.f, 1)?;
        let f3 = quotients(&self.f, 2)?;

        let mut h: Option<Interval> = None;
        let eps = (d.x.1 - d.x.0) * 1e-5;
        for (i, &x) in xs.iter().enumerate() {
            let g = &self.g;
            let mut qs = vec![(g(x + eps) - g(x - eps)) / (2.0 * eps)];
            if i + 1 < xs.len() {
                qs.push((g(xs[i + 1]) - g(x)) / (xs[i + 1] - x));
            }
            for q in qs {
                if !q.is_finite() {
                    return Err(ModelError::Validation("non-finite quotient of g".into()));
                }
                h = Some(match h {
                    None => Interval::point(q),
                    Some(v) => v.hull(q),
                });
            }
        }
        let h = h.unwrap();

        Ok(CoefficientBox {
            b1,
            b2,
            b3,
            s1,
            s2,
            s3,
            f1,
            f2,
            f3,
            h,
            c1: s3.lo.abs().max(s3.hi.abs()),
            c2: h.lo.abs().max(h.hi.abs()),
            c3: h.lo.abs().max(h.hi.abs()) + 1.0,
        })
    }
}

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    let n = n.max(2);
    (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()
}

/// Relative widening applied to sampled slope boxes, guarding against
/// sampling that misses extrema.
pub const SLOPE_BOX_MARGIN: f64 = 0.05;

/// Componentwise min/max of sampled difference quotients, widened by
/// [`SLOPE_BOX_MARGIN`]. Affine coefficients collapse to points up to the
/// absolute floor of the widening.
pub fn slope_box_from_model(
    m: &CoefficientModel,
    domain: SampleDomain,
    samples: usize,
) -> Result<CoefficientBox, ModelError> {
    if samples < 2 {
        return Err(ModelError::Domain("samples must be at least 2".into()));
    }
    if !domain.nondegenerate() {
        return Err(ModelError::Domain("degenerate sampling domain".into()));
    }
    let mut m = m.clone();
    m.domain = domain;
    let per_axis = ((samples as f64).powf(0.25).ceil() as usize).clamp(2, 9);
    let raw = m.slope_box_raw(per_axis)?;
    let w = |iv: Interval| iv.widened(SLOPE_BOX_MARGIN, 1e-12);
    // c1, c2 cover the widened intervals, not the raw ones, so the case
    // hypotheses |s3| <= c1, |h| <= c2 stay satisfiable after widening.
    let s3 = w(raw.s3);
    let h = w(raw.h);
    let c1 = s3.lo.abs().max(s3.hi.abs());
    let c2 = h.lo.abs().max(h.hi.abs());
    Ok(CoefficientBox {
        b1: w(raw.b1),
        b2: w(raw.b2),
        b3: w(raw.b3),
        s1: w(raw.s1),
        s2: w(raw.s2),
        s3,
        f1: w(raw.f1),
        f2: w(raw.f2),
        f3: w(raw.f3),
        h,
        c1,
        c2,
        c3: c2 + 1.0,
    })
}

/// Square root of the integrability functional
/// (int |b|+|f| at (t,0,0,0))^2 + int |sigma|^2 at (t,0,0,0) + g(0)^2,
/// time integrals by Simpson quadrature.
pub fn compute_i0(m: &CoefficientModel) -> Result<f64, ModelError> {
    let n = 200;
    let t_grid = linspace(0.0, m.horizon_t, n + 1);
    let simpson = |vals: &[f64]| -> f64 {
        let h = m.horizon_t / n as f64;
        let mut s = vals[0] + vals[n];
        for (i, v) in vals.iter().enumerate().take(n).skip(1) {
            s += if i % 2 == 1 { 4.0 * v } else { 2.0 * v };
        }
        s * h / 3.0
    };
    let bf: Vec<f64> =
        t_grid.iter().map(|&t| (self::at0(&m.b, t)).abs() + (self::at0(&m.f, t)).abs()).collect();
    let s2: Vec<f64> = t_grid.iter().map(|&t| self::at0(&m.sigma, t).powi(2)).collect();
    let g0 = (m.g)(0.0);
    let i0_sq = simpson(&bf).powi(2) + simpson(&s2) + g0 * g0;
    if !i0_sq.is_finite() {
        return Err(ModelError::Quadrature("non-finite integrand".into()));
    }
    Ok(i0_sq.sqrt())
}

fn at0(phi: &CoeffFn, t: f64) -> f64 {
    phi(t, 0.0, 0.0, 0.0)
}

/// Numeric options carried by a problem spec.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct NumericOptions {
    pub dt: f64,
    pub dx: f64,
    pub band: Option<f64>,
    pub seed: u64,
    pub paths: usize,
    pub event_tol: f64,
    pub step_tol: f64,
}

impl Default for NumericOptions {
    fn default() -> Self {
        NumericOptions {
            dt: 0.01,
            dx: 0.05,
            band: None,
            seed: 1,
            paths: 10_000,
            event_tol: 1e-6,
            step_tol: 1e-9,
        }
    }
}

/// A parsed and validated problem specification.
#[derive(Debug, Clone)]
pub struct ProblemSpec {
    pub model: Option<CoefficientModel>,
    pub bounds: Option<CoefficientBox>,
    pub options: NumericOptions,
}

#[derive(Debug, Deserialize)]
struct RawModel {
    b: String,
    sigma: String,
    f: String,
    g: String,
    #[serde(rename = "lipschitz_K0")]
    lipschitz_k0: f64,
    #[serde(rename = "horizon_T")]
    horizon_t: f64,
    #[serde(default)]
    x0: f64,
    domain: Option<RawDomain>,
}

#[derive(Debug, Deserialize)]
struct RawDomain {
    #[serde(default = "default_axis")]
    t: (f64, f64),
    #[serde(default = "default_axis")]
    x: (f64, f64),
    #[serde(default = "default_axis")]
    y: (f64, f64),
    #[serde(default = "default_axis")]
    z: (f64, f64),
}

fn default_axis() -> (f64, f64) {
    (-5.0, 5.0)
}

#[derive(Debug, Deserialize)]
struct RawBox {
    #[serde(default = "zero_iv")]
    b1: Interval,
    #[serde(default = "zero_iv")]
    b2: Interval,
    #[serde(default = "zero_iv")]
    b3: Interval,
    #[serde(default = "zero_iv")]
    s1: Interval,
    #[serde(default = "zero_iv")]
    s2: Interval,
    #[serde(default = "zero_iv")]
    s3: Interval,
    #[serde(default = "zero_iv")]
    f1: Interval,
    #[serde(default = "zero_iv")]
    f2: Interval,
    #[serde(default = "zero_iv")]
    f3: Interval,
    #[serde(default = "zero_iv")]
    h: Interval,
    #[serde(default)]
    c1: f64,
    #[serde(default = "default_c2")]
    c2: f64,
    #[serde(default = "default_c3")]
    c3: f64,
}

fn zero_iv() -> Interval {
    Interval::point(0.0)
}
fn default_c2() -> f64 {
    0.45
}
fn default_c3() -> f64 {
    0.9
}

#[derive(Debug, Deserialize)]
struct RawSpec {
    model: Option<RawModel>,
    #[serde(rename = "box")]
    bounds: Option<RawBox>,
    #[serde(default)]
    options: NumericOptions,
}

fn compile_coeff(src: &str, what: &str) -> Result<CoeffFn, ModelError> {
    let expr: meval::Expr = src
        .parse()
        .map_err(|e| ModelError::Schema(format!("cannot parse {what} expression {src:?}: {e}")))?;
    let f = expr
        .bind4("t", "x", "y", "z")
        .map_err(|e| ModelError::Schema(format!("cannot bind {what} expression {src:?}: {e}")))?;
    Ok(Arc::new(f))
}

fn compile_terminal(src: &str) -> Result<TerminalFn, ModelError> {
    let expr: meval::Expr = src
        .parse()
        .map_err(|e| ModelError::Schema(format!("cannot parse g expression {src:?}: {e}")))?;
    let f = expr
        .bind("x")
        .map_err(|e| ModelError::Schema(format!("cannot bind g expression {src:?}: {e}")))?;
    Ok(Arc::new(f))
}

/// Loads a UTF-8 JSON spec with top-level keys "model", "box", "options",
/// compiles coefficient expressions, and checks all invariants.
pub fn load_spec(path: impl AsRef<Path>) -> Result<ProblemSpec, ModelError> {
    let text = std::fs::read_to_string(path.as_ref())
        .map_err(|e| ModelError::Parse(format!("cannot read {}: {e}", path.as_ref().display())))?;
    parse_spec(&text)
}

/// Same as [`load_spec`] but from an in-memory JSON string.
pub fn parse_spec(text: &str) -> Result<ProblemSpec, ModelError> {
    let raw: serde_json::Value =
        serde_json::from_str(text).map_err(|e| ModelError::Parse(e.to_string()))?;
    let raw: RawSpec =
        serde_json::from_value(raw).map_err(|e| ModelError::Schema(e.to_string()))?;
    if raw.model.is_none() && raw.bounds.is_none() {
        return Err(ModelError::Schema("spec needs at least one of \"model\", \"box\"".into()));
    }

    let model = match raw.model {
        None => None,
        Some(rm) => {
            let mut m = CoefficientModel::new(
                compile_coeff(&rm.b, "b")?,
                compile_coeff(&rm.sigma, "sigma")?,
                compile_coeff(&rm.f, "f")?,
                compile_terminal(&rm.g)?,
                rm.lipschitz_k0,
                rm.horizon_t,
                rm.x0,
            );
            if let Some(d) = rm.domain {
                m.domain = SampleDomain { t: (0.0, rm.horizon_t.max(d.t.1)), x: d.x, y: d.y, z: d.z };
            }
            m.validate()?;
            Some(m)
        }
    };

    let bounds = match raw.bounds {
        None => None,
        Some(rb) => {
            let b = CoefficientBox {
                b1: rb.b1,
                b2: rb.b2,
                b3: rb.b3,
                s1: rb.s1,
                s2: rb.s2,
                s3: rb.s3,
                f1: rb.f1,
                f2: rb.f2,
                f3: rb.f3,
                h: rb.h,
                c1: rb.c1,
                c2: rb.c2,
                c3: rb.c3,
            };
            b.check()?;
            Some(b)
        }
    };

    if let (Some(m), Some(bx)) = (&model, &bounds) {
        let sampled = slope_box_from_model(m, m.domain, 256)?;
        let mid = |iv: Interval| 0.5 * (iv.lo + iv.hi);
        let center = SlopeCoeffs {
            b1: mid(sampled.b1),
            b2: mid(sampled.b2),
            b3: mid(sampled.b3),
            s1: mid(sampled.s1),
            s2: mid(sampled.s2),
            s3: mid(sampled.s3),
            f1: mid(sampled.f1),
            f2: mid(sampled.f2),
            f3: mid(sampled.f3),
        };
        // Sampled difference quotients carry rounding noise, so the declared
        // box only has to contain the center up to a small absolute slack.
        let mut slack = *bx;
        let w = |iv: &mut Interval| *iv = iv.widened(0.0, 1e-9);
        w(&mut slack.b1);
        w(&mut slack.b2);
        w(&mut slack.b3);
        w(&mut slack.s1);
        w(&mut slack.s2);
        w(&mut slack.s3);
        w(&mut slack.f1);
        w(&mut slack.f2);
        w(&mut slack.f3);
        if !slack.contains(center) {
            return Err(ModelError::Validation(
                "box does not contain the model's sampled slope coefficients".into(),
            ));
        }
    }

    Ok(ProblemSpec { model, bounds, options: raw.options })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_model() -> CoefficientModel {
        CoefficientModel::new(
            Arc::new(|_, _, _, _| 0.0),
            Arc::new(|_, _, _, _| 0.0),
            Arc::new(|_, _, _, _| 0.0),
            Arc::new(|_| 0.0),
            1.0,
            1.0,
            0.0,
        )
    }

    #[test]
    fn zero_spec_is_valid() {
        let spec = parse_spec(
            r#"{"model":{"b":"0","sigma":"0","f":"0","g":"0","lipschitz_K0":1.0,"horizon_T":1.0}}"#,
        )
        .unwrap();
        assert!(spec.model.is_some());
    }

    #[test]
    fn lipschitz_violation_is_reported() {
        let err = parse_spec(
            r#"{"model":{"b":"0","sigma":"0","f":"0","g":"x","lipschitz_K0":0.1,"horizon_T":1.0}}"#,
        )
        .unwrap_err();
        match err {
            ModelError::Validation(msg) => assert!(msg.contains("g"), "{msg}"),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn box_only_spec_is_valid() {
        let spec = parse_spec(
            r#"{"box":{"b2":{"lo":-1,"hi":1},"h":{"lo":0.5,"hi":0.5},"c1":0,"c2":0.6,"c3":0.8}}"#,
        )
        .unwrap();
        let b = spec.bounds.unwrap();
        assert_eq!(b.b2, Interval::new(-1.0, 1.0));
        assert_eq!(b.s3, Interval::point(0.0));
        assert!(b.c2 < b.c3 && b.c1 * b.c3 < 1.0);
    }

    #[test]
    fn bad_interval_is_rejected() {
        let err = parse_spec(r#"{"box":{"b2":{"lo":1,"hi":-1}}}"#).unwrap_err();
        assert!(matches!(err, ModelError::Validation(_)));
    }

    #[test]
    fn malformed_json_is_parse_error() {
        assert!(matches!(parse_spec("{"), Err(ModelError::Parse(_))));
    }

    #[test]
    fn missing_field_is_schema_error() {
        let err = parse_spec(r#"{"model":{"b":"0","sigma":"0","f":"0","g":"0"}}"#).unwrap_err();
        assert!(matches!(err, ModelError::Schema(_)));
    }

    #[test]
    fn slope_box_affine_collapses_to_points() {
        let m = CoefficientModel::new(
            Arc::new(|_, _, y, _| 2.0 * y),
            Arc::new(|_, _, _, _| 0.0),
            Arc::new(|_, _, _, _| 0.0),
            Arc::new(|x| x),
            3.0,
            1.0,
            0.0,
        );
        let b = slope_box_from_model(&m, m.domain, 256).unwrap();
        assert!(b.b2.contains(2.0) && b.b2.width() < 1e-9);
        assert!(b.h.contains(1.0) && b.h.width() < 1e-9);
        assert!(b.b1.contains(0.0) && b.b1.width() < 1e-9);
    }

    #[test]
    fn slope_box_sin_bounded_by_unit_slope() {
        let m = CoefficientModel::new(
            Arc::new(|_, _, _, _| 0.0),
            Arc::new(|_, _, _, z| z.sin()),
            Arc::new(|_, _, _, _| 0.0),
            Arc::new(|_| 0.0),
            1.5,
            1.0,
            0.0,
        );
        let b = slope_box_from_model(&m, m.domain, 4096).unwrap();
        let margin = SLOPE_BOX_MARGIN * 2.0 + 1e-9;
        assert!(b.s3.lo >= -1.0 - margin && b.s3.hi <= 1.0 + margin, "{:?}", b.s3);
        assert!(b.s3.hi > 0.9 && b.s3.lo < -0.5, "{:?}", b.s3);
    }

    #[test]
    fn slope_box_monotone_in_domain() {
        let m = CoefficientModel::new(
            Arc::new(|_, _, _, _| 0.0),
            Arc::new(|_, _, _, z| z.sin()),
            Arc::new(|_, x, _, _| x * x / 20.0),
            Arc::new(|_| 0.0),
            2.0,
            1.0,
            0.0,
        );
        let small = SampleDomain::symmetric(1.0, 1.0);
        let large = SampleDomain::symmetric(1.0, 4.0);
        let bs = slope_box_from_model(&m, small, 4096).unwrap();
        let bl = slope_box_from_model(&m, large, 4096).unwrap();
        assert!(bl.s3.lo <= bs.s3.lo && bl.s3.hi >= bs.s3.hi);
        assert!(bl.f1.lo <= bs.f1.lo && bl.f1.hi >= bs.f1.hi);
    }

    #[test]
    fn i0_zero_model() {
        assert_eq!(compute_i0(&zero_model()).unwrap(), 0.0);
    }

    #[test]
    fn i0_unit_driver() {
        let m = CoefficientModel::new(
            Arc::new(|_, _, _, _| 0.0),
            Arc::new(|_, _, _, _| 0.0),
            Arc::new(|_, _, _, _| 1.0),
            Arc::new(|_| 0.0),
            1.0,
            1.0,
            0.0,
        );
        assert!((compute_i0(&m).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn i0_ignores_terminal_slope_at_zero() {
        let m = CoefficientModel::new(
            Arc::new(|_, _, _, _| 0.0),
            Arc::new(|_, _, _, _| 0.0),
            Arc::new(|_, _, _, _| 0.0),
            Arc::new(|x| x),
            1.0,
            1.0,
            0.0,
        );
        assert_eq!(compute_i0(&m).unwrap(), 0.0);
    }

    #[test]
    fn vertices_count_and_membership() {
        let mut b = CoefficientBox::zero();
        b.b2 = Interval::new(-1.0, 1.0);
        b.s3 = Interval::new(0.0, 0.5);
        let vs = b.vertices();
        assert_eq!(vs.len(), 4);
        assert!(vs.iter().all(|c| b.contains(*c)));
    }

    #[test]
    fn model_box_consistency_enforced() {
        let err = parse_spec(
            r#"{"model":{"b":"2*y","sigma":"0","f":"0","g":"0","lipschitz_K0":3.0,"horizon_T":1.0},
                "box":{"b2":{"lo":0,"hi":1}}}"#,
        )
        .unwrap_err();
        assert!(matches!(err, ModelError::Validation(_)));
    }
}
