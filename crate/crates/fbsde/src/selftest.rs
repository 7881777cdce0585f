//! Acceptance checks runnable both from the CLI (`fbsde selftest`) and the
//! integration test harness. Each criterion returns a pass/fail result with
//! a one-line detail string.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

use crate::characteristic::{envelope_from_box, eval_generator, Envelope};
use crate::classifier::{classify_constant_sigma3_zero, psi, Verdict};
use crate::dominating::{
    integrate_dominating, integrate_scalar, BranchEvent, Event, IntegrateOpts,
};
use crate::model::{CoefficientBox, CoefficientModel, Interval, SlopeCoeffs};
use crate::oracle::{comparison_check, linear_oracle};
use crate::solver::{
    forward_verify, phi_eps_bounds, phi_eps_transform, reverse_roles, shear_map_back, solve_field,
    SolveOptions,
};

#[derive(Debug, Clone)]
pub struct CriterionResult {
    pub id: usize,
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

fn result(id: usize, name: &'static str, pass: bool, detail: String) -> CriterionResult {
    CriterionResult { id, name, pass, detail }
}

pub fn criterion_1_psi_constants() -> CriterionResult {
    let name = "psi constants";
    let (p1, p2, _) = match psi(2.0) {
        Ok(v) => v,
        Err(e) => return result(1, name, false, e.to_string()),
    };
    let at_two = (p1 - 1.0).abs() <= 1e-12 && (p2 - 1.0).abs() <= 1e-12;
    let mut increasing = true;
    let mut prev = f64::NEG_INFINITY;
    let mut p = 2.0;
    while p <= 10.0 + 1e-9 {
        let v = psi(p).unwrap().2;
        if v <= prev {
            increasing = false;
        }
        prev = v;
        p += 0.1;
    }
    result(
        1,
        name,
        at_two && increasing,
        format!("psi1(2)={p1:.15}, psi2(2)={p2:.15}, increasing on [2,10]: {increasing}"),
    )
}

fn detected_t_star(rhs: impl Fn(f64, f64) -> f64, h: f64, t: f64) -> Option<f64> {
    let opts = IntegrateOpts { event_tol: 1e-5, ..IntegrateOpts::default() };
    match integrate_scalar(rhs, h, t, &opts).ok()?.event {
        BranchEvent::BlowUp { t_star } | BranchEvent::SingularHit { t_star } => Some(t_star),
        BranchEvent::None => None,
    }
}

pub fn criterion_2_blowup_oracle() -> CriterionResult {
    let name = "blow-up oracle agreement";
    let t = 2.0;
    let mut worst: f64 = 0.0;
    let mut ok = true;
    // Quadratic y' = -y^2 backward from 1: blows up at T - 1.
    match detected_t_star(|_, y| y * y, 1.0, t) {
        Some(ts) => worst = worst.max((ts - (t - 1.0)).abs()),
        None => ok = false,
    }
    // Cubic eps*(y - y1)^3: blows up at T - 1/(2 eps (h - y1)^2).
    for (eps, h, y1) in [(1.0, 1.0, 0.0), (2.0, 1.0, -1.0), (0.5, 2.0, 0.0)] {
        let want = t - 1.0 / (2.0 * eps * (h - y1) * (h - y1));
        match detected_t_star(move |_, y| eps * (y - y1).powi(3), h, t) {
            Some(ts) => worst = worst.max((ts - want).abs()),
            None => ok = false,
        }
    }
    result(2, name, ok && worst <= 1e-3, format!("worst |t_star error| = {worst:.2e}"))
}

pub fn criterion_3_singular_hit() -> CriterionResult {
    let name = "singular-hit agreement";
    // F(y) = 1/(1 - y): the squared distance to the singular level shrinks
    // linearly at rate 2, so from h=0 the hit is at t = T - 0.5.
    let c = SlopeCoeffs { f1: 1.0, f3: 1.0, s1: 1.0, s3: 1.0, ..SlopeCoeffs::zero() };
    let env = Envelope::point(c);
    let t = 2.0;
    let opts = IntegrateOpts { event_tol: 1e-5, ..IntegrateOpts::default() };
    match integrate_dominating(&env, 0.0, 0.0, t, &opts) {
        Ok(sol) => match sol.event {
            Event::SingularHit { t_star, .. } => {
                let err = (t_star - (t - 0.5)).abs();
                result(3, name, err <= 1e-3, format!("|t_star - 1.5| = {err:.2e}"))
            }
            other => result(3, name, false, format!("unexpected event {other:?}")),
        },
        Err(e) => result(3, name, false, e.to_string()),
    }
}

pub fn criterion_4_classifier_sharpness() -> CriterionResult {
    let name = "classifier sharpness";
    let mut rng = ChaCha8Rng::seed_from_u64(20240901);
    let margin = 1e-3;
    let mut kept = 0usize;
    let mut agree = 0usize;
    let mut samples = 0usize;
    while kept < 500 && samples < 20000 {
        samples += 1;
        let r = |rng: &mut ChaCha8Rng| rng.random_range(-1.0..1.0);
        let c = SlopeCoeffs {
            b1: r(&mut rng),
            b2: r(&mut rng),
            b3: r(&mut rng),
            s1: r(&mut rng),
            s2: r(&mut rng),
            s3: 0.0,
            f1: r(&mut rng),
            f2: r(&mut rng),
            f3: r(&mut rng),
        };
        let h = rng.random_range(-2.0..2.0);
        let (a0, a1, a2, a3) = crate::characteristic::cubic_form(c).unwrap();
        let poly = move |y: f64| a0 + y * (a1 + y * (a2 + y * a3));
        let rhs = move |_: f64, y: f64| poly(y);
        // Margin filter: decision boundary cases are excluded.
        if poly(h).abs() < margin {
            continue;
        }
        let roots = crate::classifier::real_cubic_roots(a0, a1, a2, a3);
        if roots.roots().any(|root| (root - h).abs() < margin) {
            continue;
        }
        kept += 1;
        let verdict = classify_constant_sigma3_zero(c, h, None).unwrap().verdict;
        let opts = IntegrateOpts { rel_tol: 1e-8, abs_tol: 1e-8, ..IntegrateOpts::default() };
        let survives = matches!(
            integrate_scalar(rhs, h, 20.0, &opts).map(|b| b.event),
            Ok(BranchEvent::None)
        );
        let matches = match verdict {
            Verdict::SolvableAllT => survives,
            Verdict::NotSolvableAllT => !survives,
            _ => false,
        };
        if matches {
            agree += 1;
        }
    }
    let rate = agree as f64 / kept.max(1) as f64;
    result(
        4,
        name,
        kept == 500 && rate >= 0.99,
        format!("{agree}/{kept} agree ({:.1}%)", rate * 100.0),
    )
}

fn heat_kernel_error(dt: f64, dx: f64) -> Result<f64, String> {
    let m = CoefficientModel::new(
        Arc::new(|_, _, _, _| 0.0),
        Arc::new(|_, _, _, _| 1.0),
        Arc::new(|_, _, _, _| 0.0),
        Arc::new(|x: f64| x.sin()),
        1.0,
        1.0,
        0.0,
    );
    let opts = SolveOptions { dt, dx, band: Some((-8.0, 8.0)), ..SolveOptions::default() };
    let field = solve_field(&m, &opts, None).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for (i, &t) in field.t_grid.iter().enumerate() {
        for (j, &x) in field.x_grid.iter().enumerate() {
            // Measured region excludes the ghost margin near the truncation
            // boundary (the band is sized so tails stay below scheme error).
            if x.abs() > 5.0 {
                continue;
            }
            let exact = x.sin() * (-(1.0 - t) / 2.0).exp();
            worst = worst.max((field.u[i][j] - exact).abs());
        }
    }
    Ok(worst)
}

pub fn criterion_5_heat_kernel() -> CriterionResult {
    let name = "solver vs heat kernel";
    let coarse = match heat_kernel_error(0.01, 0.05) {
        Ok(v) => v,
        Err(e) => return result(5, name, false, e),
    };
    let fine = match heat_kernel_error(0.005, 0.025) {
        Ok(v) => v,
        Err(e) => return result(5, name, false, e),
    };
    let gain = coarse / fine.max(1e-300);
    result(
        5,
        name,
        coarse <= 1e-2 && gain >= 1.8,
        format!("sup error {coarse:.2e}, refinement gain {gain:.2}x"),
    )
}

fn coupled_linear_model() -> CoefficientModel {
    CoefficientModel::new(
        Arc::new(|_, _, y, _| -0.5 * y),
        Arc::new(|_, _, _, _| 1.0),
        Arc::new(|_, _, y, _| 0.3 * y),
        Arc::new(|x: f64| 0.4 * x),
        1.0,
        1.0,
        1.0,
    )
}

pub fn criterion_6_linear_oracle() -> CriterionResult {
    let name = "solver vs linear oracle";
    let c = SlopeCoeffs { b2: -0.5, f2: 0.3, ..SlopeCoeffs::zero() };
    let yhat0 = match linear_oracle(c, 0.4, 1.0) {
        Ok(sol) => sol.yhat(0.0),
        Err(e) => return result(6, name, false, e.to_string()),
    };
    let m = coupled_linear_model();
    let opts = SolveOptions { dt: 0.01, dx: 0.05, band: Some((-7.0, 9.0)), ..SolveOptions::default() };
    let field = match solve_field(&m, &opts, None) {
        Ok(f) => f,
        Err(e) => return result(6, name, false, e.to_string()),
    };
    let mut worst: f64 = 0.0;
    for (j, &x) in field.x_grid.iter().enumerate() {
        if x.abs() < 0.1 || x.abs() > 5.0 {
            continue;
        }
        worst = worst.max((field.u[0][j] / x - yhat0).abs());
    }
    result(
        6,
        name,
        worst <= 1e-2,
        format!("yhat(0) = {yhat0:.6}, worst |u(0,x)/x - yhat(0)| = {worst:.2e}"),
    )
}

pub fn criterion_7_lipschitz_bracket() -> CriterionResult {
    let name = "Lipschitz slope bracket";
    let opts_dom = IntegrateOpts::default();
    // Heat-kernel model: zero generator, terminal slope range [-1, 1].
    let mut bounds = CoefficientBox::zero();
    bounds.h = Interval::new(-1.0, 1.0);
    let env = match envelope_from_box(&bounds, Interval::new(-2.0, 2.0)) {
        Ok(e) => e,
        Err(e) => return result(7, name, false, e.to_string()),
    };
    let dom_sin = match integrate_dominating(&env, 1.0, -1.0, 1.0, &opts_dom) {
        Ok(d) => d,
        Err(e) => return result(7, name, false, e.to_string()),
    };
    let m_sin = CoefficientModel::new(
        Arc::new(|_, _, _, _| 0.0),
        Arc::new(|_, _, _, _| 1.0),
        Arc::new(|_, _, _, _| 0.0),
        Arc::new(|x: f64| x.sin()),
        1.0,
        1.0,
        0.0,
    );
    let opts = SolveOptions { dt: 0.01, dx: 0.05, band: Some((-8.0, 8.0)), ..SolveOptions::default() };
    if let Err(e) = solve_field(&m_sin, &opts, Some(&dom_sin)) {
        return result(7, name, false, format!("heat-kernel field: {e}"));
    }

    // Coupled linear model: point box, both branches equal yhat.
    let c = SlopeCoeffs { b2: -0.5, f2: 0.3, ..SlopeCoeffs::zero() };
    let dom_lin =
        match integrate_dominating(&Envelope::point(c), 0.4, 0.4, 1.0, &opts_dom) {
            Ok(d) => d,
            Err(e) => return result(7, name, false, e.to_string()),
        };
    let opts6 = SolveOptions { dt: 0.01, dx: 0.05, band: Some((-7.0, 9.0)), ..SolveOptions::default() };
    if let Err(e) = solve_field(&coupled_linear_model(), &opts6, Some(&dom_lin)) {
        return result(7, name, false, format!("coupled linear field: {e}"));
    }
    result(7, name, true, "all interior slopes inside dominating bracket +- 1e-2".into())
}

pub fn criterion_8_z_coupled_fixed_point() -> CriterionResult {
    let name = "z-coupled fixed point";
    let m = CoefficientModel::new(
        Arc::new(|_, _, _, _| 0.0),
        Arc::new(|_, _, _, z: f64| 1.0 + 0.3 * z),
        Arc::new(|_, _, _, _| 0.0),
        Arc::new(|x: f64| 0.4 * x),
        2.0,
        1.0,
        0.0,
    );
    let opts = SolveOptions { dt: 0.01, dx: 0.05, ..SolveOptions::default() };
    let field = match solve_field(&m, &opts, None) {
        Ok(f) => f,
        Err(e) => return result(8, name, false, e.to_string()),
    };
    let resid_ok = field.meta.fp_residual_max <= 1e-10 && field.meta.fp_iters_max <= 100;
    match forward_verify(&field, &m, 10000, 42) {
        Ok(rep) => {
            let tr = rep.path_stats.unwrap().terminal_residual;
            result(
                8,
                name,
                resid_ok && tr <= 1e-3,
                format!(
                    "fp residual {:.1e} ({} iters max), terminal residual {:.1e}",
                    field.meta.fp_residual_max, field.meta.fp_iters_max, tr
                ),
            )
        }
        Err(e) => result(8, name, false, e.to_string()),
    }
}

pub fn criterion_9_comparison() -> CriterionResult {
    let name = "comparison monotonicity";
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let opts = SolveOptions { dt: 0.025, dx: 0.1, ..SolveOptions::default() };
    let scheme_tol = 2e-3;
    let mut worst: f64 = f64::NEG_INFINITY;
    for _ in 0..20 {
        let a = rng.random_range(0.0..0.2);
        let b = rng.random_range(0.0..0.2);
        let c = rng.random_range(0.0..0.1);
        let df = rng.random_range(0.0..0.5);
        let dg = rng.random_range(0.0..0.5);
        let mk = move |df: f64, dg: f64| {
            CoefficientModel::new(
                Arc::new(|_, _, _, _| 0.0),
                Arc::new(|_, _, _, _| 1.0),
                Arc::new(move |_, x: f64, _, _| c * x.cos() + df),
                Arc::new(move |x: f64| a * x.sin() + b * x + dg),
                1.0,
                0.5,
                0.0,
            )
        };
        match comparison_check(&mk(0.0, 0.0), &mk(df, dg), &opts, scheme_tol) {
            Ok(r) => {
                worst = worst.max(r.max_violation);
                if !r.pass {
                    return result(9, name, false, format!("violation {:.2e}", r.max_violation));
                }
            }
            Err(e) => return result(9, name, false, e.to_string()),
        }
    }
    // Additive exactness: terminal shift 1 and driver shift 0.5 over T = 1.
    let flat = |gs: f64, fs: f64| {
        CoefficientModel::new(
            Arc::new(|_, _, _, _| 0.0),
            Arc::new(|_, _, _, _| 1.0),
            Arc::new(move |_, _, _, _| fs),
            Arc::new(move |x: f64| 0.2 * x.sin() + gs),
            1.0,
            1.0,
            0.0,
        )
    };
    let opts1 = SolveOptions { dt: 0.02, dx: 0.1, ..SolveOptions::default() };
    let g_shift = match (solve_field(&flat(1.0, 0.0), &opts1, None), solve_field(&flat(0.0, 0.0), &opts1, None)) {
        (Ok(f2), Ok(f1)) => f2.eval(0.0, 0.0) - f1.eval(0.0, 0.0),
        _ => return result(9, name, false, "additive solve failed".into()),
    };
    let f_shift = match (solve_field(&flat(0.0, 0.5), &opts1, None), solve_field(&flat(0.0, 0.0), &opts1, None)) {
        (Ok(f2), Ok(f1)) => f2.eval(0.0, 0.0) - f1.eval(0.0, 0.0),
        _ => return result(9, name, false, "additive solve failed".into()),
    };
    let additive_ok = (g_shift - 1.0).abs() <= 1e-2 && (f_shift - 0.5).abs() <= 1e-2;
    result(
        9,
        name,
        additive_ok,
        format!(
            "20 pairs max violation {worst:.2e}; shifts {g_shift:.4} (want 1), {f_shift:.4} (want 0.5)"
        ),
    )
}

pub fn criterion_10_transforms() -> CriterionResult {
    let name = "transform round trips";
    // Double role reversal on a linear model.
    let mut m = CoefficientModel::new(
        Arc::new(|_, x: f64, y: f64, _| 0.2 * x - 0.1 * y),
        Arc::new(|_, _, _, z: f64| 0.5 + 2.0 * z),
        Arc::new(|_, x: f64, y: f64, _| 0.1 * x + 0.3 * y),
        Arc::new(|x: f64| 4.0 * x + 1.0),
        8.0,
        1.0,
        1.0,
    );
    m.lipschitz_k0 = 8.0;
    let rr = match reverse_roles(&m).and_then(|t| reverse_roles(&t)) {
        Ok(v) => v,
        Err(e) => return result(10, name, false, e.to_string()),
    };
    let mut slope_err: f64 = 0.0;
    for (z1, z2) in [(0.0, 1.0), (-1.0, 0.5)] {
        let s = ((rr.sigma)(0.2, 0.3, 0.1, z2) - (rr.sigma)(0.2, 0.3, 0.1, z1)) / (z2 - z1);
        slope_err = slope_err.max((s - 2.0).abs());
    }
    let hg = ((rr.g)(1.0) - (rr.g)(0.0)) / 1.0;
    slope_err = slope_err.max((hg - 4.0).abs());
    if slope_err > 1e-9 {
        return result(10, name, false, format!("double reversal slope error {slope_err:.2e}"));
    }

    // Bound identities.
    let b = match phi_eps_bounds(1.0, 0.5, 0.1) {
        Ok(b) => b,
        Err(e) => return result(10, name, false, e.to_string()),
    };
    if (b.c1_bar - 1.2 / 1.1).abs() > 1e-12
        || (b.c2_bar - 0.6 / 0.7).abs() > 1e-12
        || b.c1_bar * b.c2_bar >= 1.0
    {
        return result(10, name, false, "shear bound identities failed".into());
    }

    // Shear round trip on a directly solvable benchmark.
    let bench = CoefficientModel::new(
        Arc::new(|_, _, _, _| 0.0),
        Arc::new(|_, _, _, _| 1.0),
        Arc::new(|_, _, _, _| 0.0),
        Arc::new(|x: f64| 0.15 * (x + x.sin())),
        1.0,
        1.0,
        0.0,
    );
    let opts = SolveOptions { dt: 0.01, dx: 0.05, band: Some((-8.0, 8.0)), ..SolveOptions::default() };
    let direct = match solve_field(&bench, &opts, None) {
        Ok(f) => f,
        Err(e) => return result(10, name, false, format!("direct solve: {e}")),
    };
    let eps = 0.1;
    let (mt, _) = match phi_eps_transform(&bench, eps) {
        Ok(v) => v,
        Err(e) => return result(10, name, false, e.to_string()),
    };
    let opts_t = SolveOptions {
        dt: 0.02,
        dx: 0.05,
        band: Some((-10.0, 10.0)),
        max_fp: 300,
        ..SolveOptions::default()
    };
    let tf = match solve_field(&mt, &opts_t, None) {
        Ok(f) => f,
        Err(e) => return result(10, name, false, format!("transformed solve: {e}")),
    };
    let mut worst: f64 = 0.0;
    let mut x = -2.0;
    while x <= 2.0 {
        match shear_map_back(&tf, eps, 0.0, x) {
            Ok(y) => worst = worst.max((y - direct.eval(0.0, x)).abs()),
            Err(e) => return result(10, name, false, format!("map back: {e}")),
        }
        x += 0.25;
    }
    result(
        10,
        name,
        worst <= 2e-2,
        format!("double reversal ok; mapped-back field error {worst:.2e}"),
    )
}

pub fn criterion_11_envelope_exactness() -> CriterionResult {
    let name = "envelope exactness";
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst: f64 = 0.0;
    for _ in 0..40 {
        let iv = |rng: &mut ChaCha8Rng, scale: f64| {
            let a = rng.random_range(-scale..scale);
            let b = rng.random_range(-scale..scale);
            Interval::new(a.min(b), a.max(b))
        };
        let mut bounds = CoefficientBox::zero();
        bounds.b1 = iv(&mut rng, 1.0);
        bounds.b2 = iv(&mut rng, 1.0);
        bounds.b3 = iv(&mut rng, 1.0);
        bounds.s1 = iv(&mut rng, 1.0);
        bounds.s2 = iv(&mut rng, 1.0);
        bounds.s3 = iv(&mut rng, 0.2);
        bounds.f1 = iv(&mut rng, 1.0);
        bounds.f2 = iv(&mut rng, 1.0);
        bounds.f3 = iv(&mut rng, 1.0);
        let y_range = Interval::new(-2.0, 2.0);
        let env = match envelope_from_box(&bounds, y_range) {
            Ok(e) => e,
            Err(_) => continue,
        };
        for _ in 0..250 {
            let pick = |iv: Interval, rng: &mut ChaCha8Rng| {
                if iv.is_point() {
                    iv.lo
                } else {
                    rng.random_range(iv.lo..iv.hi)
                }
            };
            let c = SlopeCoeffs {
                b1: pick(bounds.b1, &mut rng),
                b2: pick(bounds.b2, &mut rng),
                b3: pick(bounds.b3, &mut rng),
                s1: pick(bounds.s1, &mut rng),
                s2: pick(bounds.s2, &mut rng),
                s3: pick(bounds.s3, &mut rng),
                f1: pick(bounds.f1, &mut rng),
                f2: pick(bounds.f2, &mut rng),
                f3: pick(bounds.f3, &mut rng),
            };
            let y = rng.random_range(y_range.lo..y_range.hi);
            let f = match eval_generator(c, y) {
                Ok(v) => v.f,
                Err(_) => continue,
            };
            let up = env.upper(y).unwrap();
            let lo = env.lower(y).unwrap();
            worst = worst.max(f - up).max(lo - f);
        }
    }
    result(11, name, worst <= 1e-9, format!("worst envelope violation {worst:.2e}"))
}

pub fn run_all() -> Vec<CriterionResult> {
    vec![
        criterion_1_psi_constants(),
        criterion_2_blowup_oracle(),
        criterion_3_singular_hit(),
        criterion_4_classifier_sharpness(),
        criterion_5_heat_kernel(),
        criterion_6_linear_oracle(),
        criterion_7_lipschitz_bracket(),
        criterion_8_z_coupled_fixed_point(),
        criterion_9_comparison(),
        criterion_10_transforms(),
        criterion_11_envelope_exactness(),
    ]
}
