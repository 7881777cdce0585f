//! Solvability classification: sharp constant-coefficient criteria, fixed-T
//! sufficient conditions, the box-based Cases I/II/III, the monotonicity
//! shortcut, and the admissible L^p exponent bound.

use thiserror::Error;

use crate::characteristic::{cubic_form, envelope_from_box, eval_generator, Envelope};
use crate::dominating::{
    integrate_dominating, integrate_scalar, BranchEvent, DominatingError, Event, IntegrateOpts,
};
use crate::model::{slope_box_from_model, CoefficientBox, Interval, ProblemSpec, SlopeCoeffs};

#[derive(Debug, Error)]
pub enum ClassifierError {
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("degenerate case: {0}")]
    Degenerate(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("box constraint violated: {0}")]
    Box(String),
    #[error(transparent)]
    Dominating(#[from] DominatingError),
    #[error(transparent)]
    Generator(#[from] crate::characteristic::GeneratorError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Verdict {
    SolvableAllT,
    SolvableUpTo { t_star: f64 },
    NotSolvableAllT,
    SolvableGivenT { t: f64 },
    Inconclusive,
}

#[derive(Debug, Clone)]
pub struct Classification {
    pub verdict: Verdict,
    /// Identifier of the rule that decided the verdict.
    pub fired_rule: Option<String>,
    /// Rules attempted before the decision (populated for Inconclusive).
    pub attempted: Vec<String>,
    /// Initial-time Lipschitz bracket (y_lower(0), y_upper(0)).
    pub bracket: Option<(f64, f64)>,
    pub p_max: Option<f64>,
    /// Horizon diagnostic from direct dominating-ODE integration.
    pub t_star: Option<f64>,
}

impl Classification {
    fn new(verdict: Verdict, rule: &str) -> Self {
        Classification {
            verdict,
            fired_rule: Some(rule.to_string()),
            attempted: Vec::new(),
            bracket: None,
            p_max: None,
            t_star: None,
        }
    }
}

/// Real roots with multiplicities, sorted ascending.
#[derive(Debug, Clone)]
pub struct CubicRootReport {
    pub real_roots: Vec<(f64, usize)>,
    /// True when the polynomial vanishes identically.
    pub identically_zero: bool,
}

impl CubicRootReport {
    pub fn roots(&self) -> impl Iterator<Item = f64> + '_ {
        self.real_roots.iter().map(|r| r.0)
    }
}

/// All real roots of a0 + a1 y + a2 y^2 + a3 y^3, by discriminant
/// classification with a Newton polish.
pub fn real_cubic_roots(a0: f64, a1: f64, a2: f64, a3: f64) -> CubicRootReport {
    let scale = a0.abs().max(a1.abs()).max(a2.abs()).max(a3.abs());
    let tol = 1e-14 * (1.0 + scale);
    let poly = |y: f64| a0 + y * (a1 + y * (a2 + y * a3));
    let dpoly = |y: f64| a1 + y * (2.0 * a2 + y * 3.0 * a3);

    let mut raw: Vec<f64> = Vec::new();
    if scale == 0.0 || (a1.abs() <= tol && a2.abs() <= tol && a3.abs() <= tol && a0.abs() <= tol) {
        return CubicRootReport { real_roots: vec![], identically_zero: true };
    }
    if a3.abs() <= tol {
        if a2.abs() <= tol {
            if a1.abs() > tol {
                raw.push(-a0 / a1);
            }
            // a1 == 0, a0 != 0: no roots.
        } else {
            let disc = a1 * a1 - 4.0 * a2 * a0;
            if disc >= 0.0 {
                let s = disc.sqrt();
                // Numerically stable quadratic roots.
                let q = -0.5 * (a1 + a1.signum() * s);
                if q != 0.0 {
                    raw.push(q / a2);
                    raw.push(a0 / q);
                } else {
                    raw.push(0.0);
                    raw.push(-a1 / a2);
                }
            }
        }
    } else {
        let b = a2 / a3;
        let c = a1 / a3;
        let d = a0 / a3;
        let p = c - b * b / 3.0;
        let q = 2.0 * b * b * b / 27.0 - b * c / 3.0 + d;
        let shift = -b / 3.0;
        let disc = -4.0 * p * p * p - 27.0 * q * q;
        let dtol = 1e-12 * (1.0 + p.abs().powi(3) + q.abs().powi(2));
        if disc > dtol {
            // Three distinct real roots, trigonometric form.
            let m = 2.0 * (-p / 3.0).sqrt();
            let theta = (3.0 * q / (p * m)).clamp(-1.0, 1.0).acos() / 3.0;
            for k in 0..3 {
                raw.push(shift + m * (theta - 2.0 * std::f64::consts::PI * k as f64 / 3.0).cos());
            }
        } else if disc < -dtol {
            // One real root, Cardano.
            let s = ((q * q / 4.0 + p * p * p / 27.0).max(0.0)).sqrt();
            let u = (-q / 2.0 + s).cbrt();
            let v = (-q / 2.0 - s).cbrt();
            raw.push(shift + u + v);
        } else if p.abs() <= 1e-12 * (1.0 + b * b) {
            raw.extend([shift; 3]); // triple root
        } else {
            raw.push(shift + 3.0 * q / p);
            raw.extend([shift - 1.5 * q / p; 2]); // double root
        }
    }

    // Newton polish, then cluster equal roots into multiplicities.
    for r in raw.iter_mut() {
        for _ in 0..4 {
            let d = dpoly(*r);
            if d.abs() > 1e-300 {
                let step = poly(*r) / d;
                if step.is_finite() && step.abs() < 1.0 + r.abs() {
                    *r -= step;
                }
            }
        }
    }
    raw.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let mut real_roots: Vec<(f64, usize)> = Vec::new();
    for r in raw {
        if !r.is_finite() {
            continue;
        }
        match real_roots.last_mut() {
            Some((prev, mult)) if (r - *prev).abs() <= 1e-7 * (1.0 + r.abs()) => *mult += 1,
            _ => real_roots.push((r, 1)),
        }
    }
    CubicRootReport { real_roots, identically_zero: false }
}

/// Relative tolerance band used for root-location decisions around h and
/// the singular level 1/s3.
const ROOT_BAND: f64 = 1e-9;

fn default_integrate_opts() -> IntegrateOpts {
    IntegrateOpts { event_tol: 1e-8, ..IntegrateOpts::default() }
}

/// Sharp decision for constant coefficients with s3 = 0, plus fixed-T
/// fallbacks when a horizon is supplied.
pub fn classify_constant_sigma3_zero(
    c: SlopeCoeffs,
    h: f64,
    t_horizon: Option<f64>,
) -> Result<Classification, ClassifierError> {
    if c.s3 != 0.0 {
        return Err(ClassifierError::Precondition("requires s3 = 0".into()));
    }
    let (a0, a1, a2, a3) = cubic_form(c)?;
    let scale = a0.abs().max(a1.abs()).max(a2.abs()).max(a3.abs()).max(h.abs());
    let fmargin = ROOT_BAND * (1.0 + scale);
    let band = ROOT_BAND * (1.0 + h.abs());
    let poly = |y: f64| a0 + y * (a1 + y * (a2 + y * a3));
    let fh = poly(h);
    let report = real_cubic_roots(a0, a1, a2, a3);
    let mut attempted = Vec::new();

    // Linear generator: a3 = a2 = 0 makes the dominating ODE linear. This
    // alternative is exact, not a tolerance test: any nonzero quadratic or
    // cubic term eventually dominates.
    attempted.push("sigma3_zero.linear".to_string());
    if a3 == 0.0 && a2 == 0.0 {
        return Ok(Classification::new(Verdict::SolvableAllT, "sigma3_zero.linear"));
    }

    // Terminal value is itself a root: both root-location cases hold at h.
    if fh.abs() <= fmargin {
        let mut cl = Classification::new(Verdict::SolvableAllT, "sigma3_zero.root_at_h");
        cl.bracket = Some((h, h));
        return Ok(cl);
    }

    let mut boundary = false;
    attempted.push("sigma3_zero.root_above_h".to_string());
    if fh > 0.0 {
        if report.identically_zero {
            return Ok(Classification::new(Verdict::SolvableAllT, "sigma3_zero.root_above_h"));
        }
        let clear = report.roots().filter(|&r| r >= h + band).fold(f64::INFINITY, f64::min);
        if clear.is_finite() {
            let mut cl = Classification::new(Verdict::SolvableAllT, "sigma3_zero.root_above_h");
            cl.bracket = Some((h, clear));
            return Ok(cl);
        }
        if report.roots().any(|r| (r - h).abs() < band) {
            boundary = true;
        }
    }
    attempted.push("sigma3_zero.root_below_h".to_string());
    if fh < 0.0 {
        if report.identically_zero {
            return Ok(Classification::new(Verdict::SolvableAllT, "sigma3_zero.root_below_h"));
        }
        let clear = report.roots().filter(|&r| r <= h - band).fold(f64::NEG_INFINITY, f64::max);
        if clear.is_finite() {
            let mut cl = Classification::new(Verdict::SolvableAllT, "sigma3_zero.root_below_h");
            cl.bracket = Some((clear, h));
            return Ok(cl);
        }
        if report.roots().any(|r| (r - h).abs() < band) {
            boundary = true;
        }
    }

    if boundary {
        let mut cl = Classification::new(Verdict::Inconclusive, "boundary_root");
        cl.attempted = attempted;
        return Ok(cl);
    }

    let mut cl = Classification::new(Verdict::NotSolvableAllT, "sigma3_zero.sharp_negative");
    if let Some(t) = t_horizon {
        let branch = integrate_scalar(|_t, y| poly(y), h, t, &default_integrate_opts())?;
        match branch.event {
            BranchEvent::None => {
                let symbolic = fixed_t_cubic_condition(a0, a1, a2, a3, fh, h, t);
                let rule = if symbolic {
                    "sigma3_zero.fixed_t_symbolic"
                } else {
                    "sigma3_zero.fixed_t_ode"
                };
                cl = Classification::new(Verdict::SolvableGivenT { t }, rule);
                let y0 = branch.y[0];
                cl.bracket = Some((y0.min(h), y0.max(h)));
            }
            BranchEvent::BlowUp { t_star } | BranchEvent::SingularHit { t_star } => {
                cl = Classification::new(Verdict::SolvableUpTo { t_star }, "sigma3_zero.ode_horizon");
                cl.t_star = Some(t_star);
            }
        }
        cl.attempted = attempted;
    } else {
        cl.attempted = attempted;
    }
    Ok(cl)
}

/// Fixed-horizon sufficient condition for the cubic generator: with
/// C2 = e^{C1 T} h^+ + (C0+1)/C1 (e^{C1 T} - 1) and eps = 1/(2 C2^3),
/// requires a3 <= eps and a2 <= eps when F(h) > 0 (mirrored through
/// y -> -y when F(h) < 0).
fn fixed_t_cubic_condition(a0: f64, a1: f64, a2: f64, a3: f64, fh: f64, h: f64, t: f64) -> bool {
    let check = |a0: f64, a1: f64, a2: f64, a3: f64, h: f64| -> bool {
        let c1 = a1.max(0.0);
        let c0 = a0.max(0.0) + 1.0;
        let hp = h.max(0.0);
        let c2 = if c1 > 1e-12 {
            (c1 * t).exp() * hp + (c0 + 1.0) / c1 * ((c1 * t).exp() - 1.0)
        } else {
            hp + (c0 + 1.0) * t
        };
        let eps = 1.0 / (2.0 * c2.powi(3).max(1e-300));
        a3 <= eps && a2 <= eps
    };
    if fh > 0.0 {
        check(a0, a1, a2, a3, h)
    } else {
        check(-a0, a1, -a2, a3, -h)
    }
}

/// Sharp decision for constant coefficients with s3 != 0 (requires
/// h*s3 != 1), plus the fixed-T dominating-ODE fallback.
pub fn classify_constant_sigma3_nonzero(
    c: SlopeCoeffs,
    h: f64,
    t_horizon: Option<f64>,
) -> Result<Classification, ClassifierError> {
    if c.s3 == 0.0 {
        return Err(ClassifierError::Precondition("requires s3 != 0".into()));
    }
    let hs = h * c.s3;
    if (hs - 1.0).abs() <= 1e-9 * (1.0 + hs.abs()) {
        return Err(ClassifierError::Degenerate(
            "h * s3 = 1: existence and uniqueness both fail in general".into(),
        ));
    }
    let sing = 1.0 / c.s3;
    // F(y) (1 - s3 y) expands to a cubic; roots of F are its real roots
    // away from the singular level.
    let p0 = c.f1;
    let p1 = (c.f2 + c.b1) - c.s3 * c.f1 + c.s1 * c.f3;
    let p2 = c.b2 - c.s3 * (c.f2 + c.b1) + c.s2 * c.f3 + c.s1 * c.b3;
    let p3 = c.s2 * c.b3 - c.s3 * c.b2;
    let report = real_cubic_roots(p0, p1, p2, p3);
    let band_s = ROOT_BAND * (1.0 + sing.abs());
    let roots: Vec<f64> = report.roots().filter(|r| (r - sing).abs() > band_s).collect();

    let fh = eval_generator(c, h)?.f;
    let scale =
        [c.b1, c.b2, c.b3, c.s1, c.s2, c.s3, c.f1, c.f2, c.f3, h].iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let fmargin = ROOT_BAND * (1.0 + scale);
    let band = ROOT_BAND * (1.0 + h.abs());
    let alpha3 = c.b2 - c.b3 * c.s2 / c.s3;
    // Exact alternative, not a tolerance test.
    let alpha3_zero = alpha3 == 0.0;
    // A root of the cleared cubic at the singular level is genuine only if F
    // itself becomes small as y approaches 1/s3 from the terminal side;
    // otherwise it is the structural zero of the clearing factor 1 - s3*y.
    let sing_root_genuine = report.roots().any(|r| (r - sing).abs() <= band_s) && {
        let probe = sing - (sing - h).signum() * (1.0 + sing.abs()) * 1e-5;
        match eval_generator(c, probe) {
            Ok(v) => v.f.abs() <= 1e-3 * (1.0 + scale),
            Err(_) => true,
        }
    };
    let mut attempted = Vec::new();
    let mut boundary = false;

    let mut solved: Option<(String, Option<f64>)> = None;
    if h < sing {
        attempted.push("constant.below_singular_root_below_h".to_string());
        if solved.is_none() && fh <= fmargin {
            if report.identically_zero || alpha3_zero {
                solved = Some(("constant.below_singular_root_below_h".into(), None));
            } else if let Some(r) =
                roots.iter().copied().filter(|&r| r <= h + band).fold(None, |m: Option<f64>, r| {
                    Some(m.map_or(r, |m| m.max(r)))
                })
            {
                solved = Some(("constant.below_singular_root_below_h".into(), Some(r)));
            }
        }
        attempted.push("constant.root_between_h_and_singular".to_string());
        if solved.is_none() && fh >= -fmargin {
            if report.identically_zero {
                solved = Some(("constant.root_between_h_and_singular".into(), None));
            } else if let Some(r) = roots
                .iter()
                .copied()
                .filter(|&r| r >= h - band && r < sing - band_s)
                .fold(None, |m: Option<f64>, r| Some(m.map_or(r, |m| m.min(r))))
            {
                solved = Some(("constant.root_between_h_and_singular".into(), Some(r)));
            } else if sing_root_genuine {
                boundary = true;
            }
        }
    } else {
        attempted.push("constant.above_singular_root_above_h".to_string());
        if solved.is_none() && fh >= -fmargin {
            if report.identically_zero || alpha3_zero {
                solved = Some(("constant.above_singular_root_above_h".into(), None));
            } else if let Some(r) =
                roots.iter().copied().filter(|&r| r >= h - band).fold(None, |m: Option<f64>, r| {
                    Some(m.map_or(r, |m| m.min(r)))
                })
            {
                solved = Some(("constant.above_singular_root_above_h".into(), Some(r)));
            }
        }
        attempted.push("constant.root_between_singular_and_h".to_string());
        if solved.is_none() && fh <= fmargin {
            if report.identically_zero {
                solved = Some(("constant.root_between_singular_and_h".into(), None));
            } else if let Some(r) = roots
                .iter()
                .copied()
                .filter(|&r| r <= h + band && r > sing + band_s)
                .fold(None, |m: Option<f64>, r| Some(m.map_or(r, |m| m.max(r))))
            {
                solved = Some(("constant.root_between_singular_and_h".into(), Some(r)));
            } else if sing_root_genuine {
                boundary = true;
            }
        }
    }

    if let Some((rule, root)) = solved {
        let mut cl = Classification::new(Verdict::SolvableAllT, &rule);
        if let Some(r) = root {
            cl.bracket = Some((h.min(r), h.max(r)));
        }
        return Ok(cl);
    }
    if boundary {
        let mut cl = Classification::new(Verdict::Inconclusive, "boundary_root");
        cl.attempted = attempted;
        return Ok(cl);
    }

    let mut cl = Classification::new(Verdict::NotSolvableAllT, "constant.sharp_negative");
    if let Some(t) = t_horizon {
        let env = Envelope::point(c);
        let sol = integrate_dominating(&env, h, h, t, &default_integrate_opts())?;
        match sol.event {
            Event::None => {
                cl = Classification::new(Verdict::SolvableGivenT { t }, "constant.fixed_t_ode");
                cl.bracket = Some((sol.y_lower[0].min(h), sol.y_upper[0].max(h)));
            }
            Event::BlowUp { t_star, .. } | Event::SingularHit { t_star, .. } => {
                cl = Classification::new(Verdict::SolvableUpTo { t_star }, "constant.ode_horizon");
                cl.t_star = Some(t_star);
            }
        }
    }
    cl.attempted = attempted;
    Ok(cl)
}

/// Vertex range of alpha3 = b2 - b3 s2 / s3 over the box. Vertices with
/// s3 = 0 contribute +-infinity according to the sign of b3 s2 (b2 when
/// that product vanishes).
fn alpha3_range(bounds: &CoefficientBox) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let ivs = [bounds.b2, bounds.b3, bounds.s2, bounds.s3];
    let ends =
        |iv: Interval| if iv.is_point() { vec![iv.lo] } else { vec![iv.lo, iv.hi] };
    for &b2 in &ends(ivs[0]) {
        for &b3 in &ends(ivs[1]) {
            for &s2 in &ends(ivs[2]) {
                for &s3 in &ends(ivs[3]) {
                    let v = if s3 != 0.0 {
                        b2 - b3 * s2 / s3
                    } else if b3 * s2 == 0.0 {
                        b2
                    } else if b3 * s2 > 0.0 {
                        f64::NEG_INFINITY
                    } else {
                        f64::INFINITY
                    };
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
            }
        }
    }
    (lo, hi)
}

/// Tolerance standing in for the "epsilon small enough" of the box cases;
/// smallness is then verified constructively by the dominating ODEs.
pub const CASE_EPSILON: f64 = 1e-9;

/// Box classification through Cases I, II (four cells), III (four cells):
/// symbolic envelope conditions at the prescribed points, then constructive
/// verification that the dominating solutions respect the case band over
/// [0, T].
pub fn classify_box(bounds: &CoefficientBox, t_horizon: f64) -> Result<Classification, ClassifierError> {
    classify_box_with_eps(bounds, t_horizon, CASE_EPSILON)
}

pub fn classify_box_with_eps(
    bounds: &CoefficientBox,
    t_horizon: f64,
    eps: f64,
) -> Result<Classification, ClassifierError> {
    let (c1, c2, c3) = (bounds.c1, bounds.c2, bounds.c3);
    if !(c1 >= 0.0 && 0.0 < c2 && c2 < c3 && c1 * c3 < 1.0) {
        return Err(ClassifierError::Box(format!(
            "need c1 >= 0, 0 < c2 < c3, c1*c3 < 1; got c1={c1}, c2={c2}, c3={c3}"
        )));
    }
    let s3 = bounds.s3;
    let h = bounds.h;
    let (a3_lo, a3_hi) = alpha3_range(bounds);
    let f1_lo = bounds.f1.lo;
    let f1_hi = bounds.f1.hi;
    let opts = default_integrate_opts();
    let mut attempted: Vec<String> = Vec::new();

    // Each candidate: (rule, symbolic check, band for the constructive run).
    struct Candidate {
        rule: &'static str,
        band: Interval,
    }
    let try_candidate = |cand: Candidate| -> Result<Option<Classification>, ClassifierError> {
        let env = match envelope_from_box(bounds, cand.band) {
            Ok(e) => e,
            Err(_) => return Ok(None),
        };
        let sol = match integrate_dominating(&env, h.hi, h.lo, t_horizon, &opts) {
            Ok(s) => s,
            Err(_) => return Ok(None),
        };
        if sol.event != Event::None {
            return Ok(None);
        }
        let tol = 1e-9 * (1.0 + cand.band.lo.abs().max(cand.band.hi.abs()));
        let inside = sol
            .y_upper
            .iter()
            .chain(sol.y_lower.iter())
            .all(|&y| y >= cand.band.lo - tol && y <= cand.band.hi + tol);
        if !inside {
            return Ok(None);
        }
        let mut cl = Classification::new(Verdict::SolvableGivenT { t: t_horizon }, cand.rule);
        cl.bracket = Some((sol.y_lower[0], sol.y_upper[0]));
        cl.p_max = if c1 > 0.0 { Some(p_max(c1, c3)?) } else { Some(f64::INFINITY) };
        Ok(Some(cl))
    };

    let cap = 1e6;
    let fbar_at = |y: f64| -> Option<f64> {
        // Probe envelope value; guard violations disqualify the case.
        let mut b = *bounds;
        b.c3 = c3;
        envelope_from_box(&b, Interval::point(y)).ok()?.upper(y).ok()
    };
    let flow_at = |y: f64| -> Option<f64> {
        let mut b = *bounds;
        b.c3 = c3;
        envelope_from_box(&b, Interval::point(y)).ok()?.lower(y).ok()
    };

    // Case I: |s3| <= c1, |h| <= c2, Fbar(c3) <= eps, Flow(-c3) >= -eps.
    attempted.push("box.case_i".into());
    if s3.lo >= -c1 && s3.hi <= c1 && h.lo >= -c2 && h.hi <= c2 {
        let ok = matches!(fbar_at(c3), Some(v) if v <= eps)
            && matches!(flow_at(-c3), Some(v) if v >= -eps);
        if ok {
            if let Some(cl) = try_candidate(Candidate { rule: "box.case_i", band: Interval::new(-c3, c3) })? {
                return Ok(with_attempted(cl, attempted));
            }
        }
    }

    if c1 > 0.0 {
        // Case II: |s3| >= 1/c1 and |h| >= 1/c2 with fixed signs.
        let (ic1, ic2, ic3) = (1.0 / c1, 1.0 / c2, 1.0 / c3);
        let s3_pos = s3.lo >= ic1;
        let s3_neg = s3.hi <= -ic1;
        if (s3_pos || s3_neg) && h.lo >= ic2 {
            let rule = if s3_pos { "box.case_ii_1" } else { "box.case_ii_2" };
            attempted.push(rule.into());
            if matches!(flow_at(ic3), Some(v) if v >= -eps) && a3_hi <= eps {
                if let Some(cl) =
                    try_candidate(Candidate { rule, band: Interval::new(ic3, cap) })?
                {
                    return Ok(with_attempted(cl, attempted));
                }
            }
        }
        if (s3_pos || s3_neg) && h.hi <= -ic2 {
            let rule = if s3_pos { "box.case_ii_3" } else { "box.case_ii_4" };
            attempted.push(rule.into());
            if matches!(fbar_at(-ic3), Some(v) if v <= eps) && a3_lo >= -eps {
                if let Some(cl) =
                    try_candidate(Candidate { rule, band: Interval::new(-cap, -ic3) })?
                {
                    return Ok(with_attempted(cl, attempted));
                }
            }
        }
    }

    // Case III: s3*h below 1 with one sign fixed.
    attempted.push("box.case_iii_1".into());
    if s3.hi <= c1 && h.lo >= 0.0 && h.hi <= c2 && f1_lo >= 0.0 {
        if matches!(fbar_at(c3), Some(v) if v <= eps) {
            if let Some(cl) =
                try_candidate(Candidate { rule: "box.case_iii_1", band: Interval::new(0.0, c3) })?
            {
                return Ok(with_attempted(cl, attempted));
            }
        }
    }
    attempted.push("box.case_iii_2".into());
    if s3.lo >= 0.0 && s3.hi <= c1 && h.hi <= c2 && a3_lo >= -eps {
        if matches!(fbar_at(c3), Some(v) if v <= eps) {
            if let Some(cl) =
                try_candidate(Candidate { rule: "box.case_iii_2", band: Interval::new(-cap, c3) })?
            {
                return Ok(with_attempted(cl, attempted));
            }
        }
    }
    attempted.push("box.case_iii_3".into());
    if s3.lo >= -c1 && h.hi <= 0.0 && h.lo >= -c2 && f1_hi <= 0.0 {
        if matches!(flow_at(-c3), Some(v) if v >= -eps) {
            if let Some(cl) =
                try_candidate(Candidate { rule: "box.case_iii_3", band: Interval::new(-c3, 0.0) })?
            {
                return Ok(with_attempted(cl, attempted));
            }
        }
    }
    attempted.push("box.case_iii_4".into());
    if s3.hi <= 0.0 && s3.lo >= -c1 && h.lo >= -c2 && a3_hi <= eps {
        if matches!(flow_at(-c3), Some(v) if v >= -eps) {
            if let Some(cl) =
                try_candidate(Candidate { rule: "box.case_iii_4", band: Interval::new(-c3, cap) })?
            {
                return Ok(with_attempted(cl, attempted));
            }
        }
    }

    let mut cl = Classification::new(Verdict::Inconclusive, "box.no_case");
    cl.attempted = attempted;
    Ok(cl)
}

fn with_attempted(mut cl: Classification, attempted: Vec<String>) -> Classification {
    cl.attempted = attempted;
    cl
}

/// Monotonicity shortcut for constant coefficients: either
/// s3 >= 0, h <= 0, f1 <= 0, b2 - b3 s2 / s3 >= 0, or the mirrored set.
/// With s3 = 0 the ratio is read as its one-sided limit: the condition
/// holds only if b3 s2 < 0, or b3 s2 = 0 with b2 of the matching sign.
pub fn check_monotonicity(c: SlopeCoeffs, h: f64) -> bool {
    let ratio_ok_ge = if c.s3 != 0.0 {
        c.b2 - c.b3 * c.s2 / c.s3 >= 0.0
    } else {
        c.b3 * c.s2 < 0.0 || (c.b3 * c.s2 == 0.0 && c.b2 >= 0.0)
    };
    let ratio_ok_le = if c.s3 != 0.0 {
        c.b2 - c.b3 * c.s2 / c.s3 <= 0.0
    } else {
        c.b3 * c.s2 < 0.0 || (c.b3 * c.s2 == 0.0 && c.b2 <= 0.0)
    };
    (c.s3 >= 0.0 && h <= 0.0 && c.f1 <= 0.0 && ratio_ok_ge)
        || (c.s3 <= 0.0 && h >= 0.0 && c.f1 >= 0.0 && ratio_ok_le)
}

/// Interval version over a coefficient box.
pub fn check_monotonicity_box(bounds: &CoefficientBox) -> bool {
    let (a3_lo, a3_hi) = alpha3_range(bounds);
    (bounds.s3.lo >= 0.0 && bounds.h.hi <= 0.0 && bounds.f1.hi <= 0.0 && a3_lo >= 0.0)
        || (bounds.s3.hi <= 0.0 && bounds.h.lo >= 0.0 && bounds.f1.lo >= 0.0 && a3_hi <= 0.0)
}

/// Entry point for problem specs: resolves the coefficient box (declared, or
/// sampled from the model), tries the monotonicity shortcut, then dispatches
/// to the constant-coefficient criteria (point boxes) or the box cases.
pub fn classify_spec(
    spec: &ProblemSpec,
    t_override: Option<f64>,
) -> Result<Classification, ClassifierError> {
    let bounds = match (&spec.bounds, &spec.model) {
        (Some(b), _) => *b,
        (None, Some(m)) => slope_box_from_model(m, m.domain, 256)
            .map_err(|e| ClassifierError::Precondition(e.to_string()))?,
        (None, None) => {
            return Err(ClassifierError::Precondition(
                "spec carries neither a coefficient box nor a model".into(),
            ))
        }
    };
    let t_horizon = t_override.or_else(|| spec.model.as_ref().map(|m| m.horizon_t));

    let point_tol = 1e-9;
    let is_point = bounds.intervals().iter().all(|iv| iv.width() <= point_tol)
        && bounds.h.width() <= point_tol;
    if is_point {
        let mid = |iv: Interval| 0.5 * (iv.lo + iv.hi);
        // Sampling of affine coefficients leaves sub-tolerance noise; snap it.
        let snap = |v: f64| if v.abs() <= point_tol { 0.0 } else { v };
        let [b1, b2, b3, s1, s2, s3, f1, f2, f3] = bounds.intervals().map(|iv| snap(mid(iv)));
        let c = SlopeCoeffs { b1, b2, b3, s1, s2, s3, f1, f2, f3 };
        let h = snap(mid(bounds.h));
        if check_monotonicity(c, h) {
            return Ok(Classification::new(Verdict::SolvableAllT, "monotone"));
        }
        if c.s3 == 0.0 {
            classify_constant_sigma3_zero(c, h, t_horizon)
        } else {
            classify_constant_sigma3_nonzero(c, h, t_horizon)
        }
    } else {
        if check_monotonicity_box(&bounds) {
            return Ok(Classification::new(Verdict::SolvableAllT, "monotone.box"));
        }
        let t = t_horizon.ok_or_else(|| {
            ClassifierError::Precondition("box classification needs a horizon T".into())
        })?;
        classify_box(&bounds, t)
    }
}

/// Burkholder-type constants: psi1 = 2^{-1/p} p^{1/2} A^{1/2 - 1/p} and
/// psi2 = ((p-1)/2)^{1/p} p^{1/2} (2^{p/2} + A)^{1/2 - 1/p}, where
/// A = (2^{p/2} - 2)/(p - 2) (its limit ln 2 at p = 2, so psi_i(2) = 1).
pub fn psi(p: f64) -> Result<(f64, f64, f64), ClassifierError> {
    if !(p >= 2.0) {
        return Err(ClassifierError::Domain(format!("psi requires p >= 2, got {p}")));
    }
    let a = if (p - 2.0).abs() < 1e-9 {
        std::f64::consts::LN_2
    } else {
        (2f64.powf(p / 2.0) - 2.0) / (p - 2.0)
    };
    let e = 0.5 - 1.0 / p;
    let psi1 = (-std::f64::consts::LN_2 / p).exp() * p.sqrt() * a.powf(e);
    let psi2 = ((p - 1.0) / 2.0).powf(1.0 / p) * p.sqrt() * (2f64.powf(p / 2.0) + a).powf(e);
    Ok((psi1, psi2, psi1 * psi2))
}

/// Largest admissible L^p exponent: the inverse of the increasing map
/// p -> psi1(p) psi2(p) at 1/(c1 c3), by bisection. c1 = 0 means sigma does
/// not depend on z and any exponent is admissible.
pub fn p_max(c1: f64, c3: f64) -> Result<f64, ClassifierError> {
    if c1 < 0.0 || c3 <= 0.0 {
        return Err(ClassifierError::Domain("need c1 >= 0 and c3 > 0".into()));
    }
    if c1 == 0.0 {
        return Ok(f64::INFINITY);
    }
    let prod = c1 * c3;
    if prod >= 1.0 {
        return Err(ClassifierError::Domain(format!("need c1*c3 < 1, got {prod}")));
    }
    let target = 1.0 / prod;
    let mut hi = 4.0;
    while psi(hi)?.2 < target {
        hi *= 2.0;
        if hi > 1e9 {
            return Ok(f64::INFINITY);
        }
    }
    let mut lo = 2.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if psi(mid)?.2 < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-13 * hi {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cs(f: impl FnOnce(&mut SlopeCoeffs)) -> SlopeCoeffs {
        let mut c = SlopeCoeffs::zero();
        f(&mut c);
        c
    }

    #[test]
    fn cubic_roots_factorized() {
        let r = real_cubic_roots(0.0, -1.0, 0.0, 1.0);
        let roots: Vec<f64> = r.roots().collect();
        assert_eq!(roots.len(), 3);
        for (got, want) in roots.iter().zip([-1.0, 0.0, 1.0]) {
            assert!((got - want).abs() < 1e-12, "{roots:?}");
        }
    }

    #[test]
    fn cubic_roots_triple() {
        let r = real_cubic_roots(0.0, 0.0, 0.0, 1.0);
        assert_eq!(r.real_roots.len(), 1);
        assert_eq!(r.real_roots[0].1, 3);
        assert!(r.real_roots[0].0.abs() < 1e-12);
    }

    #[test]
    fn cubic_roots_none() {
        let r = real_cubic_roots(1.0, 0.0, 1.0, 0.0);
        assert!(r.real_roots.is_empty() && !r.identically_zero);
    }

    #[test]
    fn cubic_roots_residual_small() {
        let (a0, a1, a2, a3) = (0.3, -1.2, 0.7, 2.0);
        let r = real_cubic_roots(a0, a1, a2, a3);
        assert!(!r.real_roots.is_empty());
        for root in r.roots() {
            let v = a0 + root * (a1 + root * (a2 + root * a3));
            assert!(v.abs() <= 1e-9 * (1.0 + 2.0), "residual {v}");
        }
    }

    #[test]
    fn zero_coefficients_solvable() {
        let cl = classify_constant_sigma3_zero(SlopeCoeffs::zero(), 0.7, None).unwrap();
        assert_eq!(cl.verdict, Verdict::SolvableAllT);
        assert_eq!(cl.fired_rule.as_deref(), Some("sigma3_zero.linear"));
    }

    #[test]
    fn negative_quadratic_solvable() {
        let cl = classify_constant_sigma3_zero(cs(|c| c.b2 = -1.0), 1.0, None).unwrap();
        assert_eq!(cl.verdict, Verdict::SolvableAllT);
        assert_eq!(cl.fired_rule.as_deref(), Some("sigma3_zero.root_below_h"));
        assert_eq!(cl.bracket, Some((0.0, 1.0)));
    }

    #[test]
    fn positive_quadratic_blows_up() {
        let cl = classify_constant_sigma3_zero(cs(|c| c.b2 = 1.0), 1.0, None).unwrap();
        assert_eq!(cl.verdict, Verdict::NotSolvableAllT);
        let cl = classify_constant_sigma3_zero(cs(|c| c.b2 = 1.0), 1.0, Some(2.0)).unwrap();
        match cl.verdict {
            Verdict::SolvableUpTo { t_star } => assert!((t_star - 1.0).abs() < 1e-3, "{t_star}"),
            other => panic!("{other:?}"),
        }
        let cl = classify_constant_sigma3_zero(cs(|c| c.b2 = 1.0), 1.0, Some(0.5)).unwrap();
        assert_eq!(cl.verdict, Verdict::SolvableGivenT { t: 0.5 });
    }

    #[test]
    fn fixed_t_symbolic_fires_for_tiny_cubic_term() {
        // F(y) = 1 + 1e-9 y^2: blows up eventually but not on a short horizon.
        let c = cs(|c| {
            c.f1 = 1.0;
            c.b2 = 1e-9;
        });
        let cl = classify_constant_sigma3_zero(c, 0.0, Some(0.5)).unwrap();
        assert_eq!(cl.verdict, Verdict::SolvableGivenT { t: 0.5 });
        assert_eq!(cl.fired_rule.as_deref(), Some("sigma3_zero.fixed_t_symbolic"));
    }

    #[test]
    fn nonzero_s3_free_generator_solvable() {
        let cl = classify_constant_sigma3_nonzero(cs(|c| c.s3 = 1.0), 2.0, None).unwrap();
        assert_eq!(cl.verdict, Verdict::SolvableAllT);
        assert_eq!(cl.fired_rule.as_deref(), Some("constant.above_singular_root_above_h"));
    }

    #[test]
    fn degenerate_terminal_slope_rejected() {
        let err = classify_constant_sigma3_nonzero(cs(|c| c.s3 = 1.0), 1.0, None).unwrap_err();
        assert!(matches!(err, ClassifierError::Degenerate(_)));
    }

    #[test]
    fn constant_generator_hits_singularity() {
        // F == 1 with s3 = 1, h = 0: y(t) = T - t reaches 1/s3 at t = T - 1.
        let c = cs(|c| {
            c.s3 = 1.0;
            c.f1 = 1.0;
        });
        let cl = classify_constant_sigma3_nonzero(c, 0.0, None).unwrap();
        assert_eq!(cl.verdict, Verdict::NotSolvableAllT);
        let cl = classify_constant_sigma3_nonzero(c, 0.0, Some(3.0)).unwrap();
        match cl.verdict {
            Verdict::SolvableUpTo { t_star } => assert!((t_star - 2.0).abs() < 1e-3, "{t_star}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn box_case_i_trivial() {
        let mut b = CoefficientBox::zero();
        b.c1 = 0.1;
        b.c2 = 0.2;
        b.c3 = 0.5;
        let cl = classify_box(&b, 10.0).unwrap();
        assert_eq!(cl.verdict, Verdict::SolvableGivenT { t: 10.0 });
        assert_eq!(cl.fired_rule.as_deref(), Some("box.case_i"));
        assert_eq!(cl.bracket, Some((0.0, 0.0)));
    }

    #[test]
    fn box_case_ii() {
        let mut b = CoefficientBox::zero();
        b.s3 = Interval::point(1.0);
        b.h = Interval::point(2.0);
        b.c1 = 1.0;
        b.c2 = 0.5;
        b.c3 = 0.6;
        let cl = classify_box(&b, 5.0).unwrap();
        assert_eq!(cl.verdict, Verdict::SolvableGivenT { t: 5.0 });
        assert_eq!(cl.fired_rule.as_deref(), Some("box.case_ii_1"));
    }

    #[test]
    fn box_inconclusive_on_escape() {
        let mut b = CoefficientBox::zero();
        b.b2 = Interval::point(1.0);
        b.h = Interval::point(0.9);
        b.c1 = 0.0;
        b.c2 = 0.95;
        b.c3 = 0.99;
        let cl = classify_box(&b, 5.0).unwrap();
        assert_eq!(cl.verdict, Verdict::Inconclusive);
        assert!(!cl.attempted.is_empty());
    }

    #[test]
    fn box_constraints_enforced() {
        let mut b = CoefficientBox::zero();
        b.c1 = 2.0;
        b.c2 = 0.5;
        b.c3 = 0.6;
        assert!(matches!(classify_box(&b, 1.0), Err(ClassifierError::Box(_))));
    }

    #[test]
    fn monotonicity_examples() {
        let c = cs(|c| {
            c.s3 = 1.0;
            c.f1 = -1.0;
            c.b2 = 1.0;
        });
        assert!(check_monotonicity(c, -1.0));
        assert!(check_monotonicity(SlopeCoeffs::zero(), 0.0));
        assert!(!check_monotonicity(cs(|c| c.s3 = 1.0), 1.0));
    }

    #[test]
    fn psi_at_two_and_four() {
        let (p1, p2, pp) = psi(2.0).unwrap();
        assert!((p1 - 1.0).abs() < 1e-12 && (p2 - 1.0).abs() < 1e-12 && (pp - 1.0).abs() < 1e-12);
        let (p1, _, _) = psi(4.0).unwrap();
        assert!((p1 - 2f64.powf(0.75)).abs() < 1e-12);
        assert!(matches!(psi(1.5), Err(ClassifierError::Domain(_))));
    }

    #[test]
    fn psi_strictly_increasing() {
        let mut prev = psi(2.0).unwrap().2;
        let mut p = 2.1;
        while p <= 10.0 {
            let v = psi(p).unwrap().2;
            assert!(v > prev, "psi not increasing at p={p}");
            prev = v;
            p += 0.1;
        }
    }

    #[test]
    fn p_max_round_trip() {
        let pm = p_max(0.5, 0.5).unwrap();
        let v = psi(pm).unwrap().2;
        assert!((v - 4.0).abs() < 1e-8, "psi(p_max)={v}");
        assert!((v * 0.25 - 1.0).abs() < 1e-6);
        assert_eq!(p_max(0.0, 0.5).unwrap(), f64::INFINITY);
        assert!(p_max(2.0, 0.5).is_err());
        // c1 c3 near 1 pushes p_max down to 2.
        let pm = p_max(0.999, 0.999).unwrap();
        assert!(pm > 2.0 && pm < 2.1, "{pm}");
    }
}
