//! Reference solutions for constant-coefficient linear models, where the
//! slope process is deterministic and X has an exact exponential
//! representation, plus comparison and stability harnesses run against the
//! grid solver.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::characteristic::eval_generator;
use crate::classifier::{
    classify_constant_sigma3_nonzero, classify_constant_sigma3_zero, ClassifierError, Verdict,
};
use crate::dominating::{integrate_scalar, BranchEvent, DominatingError, IntegrateOpts};
use crate::model::{CoefficientModel, SlopeCoeffs};
use crate::solver::{solve_field, DecouplingField, SolveOptions, SolverError};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("not solvable: {0}")]
    NotSolvable(String),
    #[error("1 - s3*yhat hit the singular guard at t = {t:.4}")]
    SingularHat { t: f64 },
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Dominating(#[from] DominatingError),
    #[error(transparent)]
    Solver(#[from] SolverError),
}

/// Deterministic solution data for a constant-coefficient linear model:
/// the slope yhat (with Zhat identically zero), the mean of X, and an exact
/// path simulator via the exponential formula.
#[derive(Debug, Clone)]
pub struct LinearSolution {
    pub coeffs: SlopeCoeffs,
    pub h: f64,
    pub t_horizon: f64,
    t: Vec<f64>,
    y: Vec<f64>,
}

/// One simulated path sampled on a uniform grid.
#[derive(Debug, Clone)]
pub struct SimPath {
    pub t: Vec<f64>,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub z: Vec<f64>,
}

impl LinearSolution {
    pub fn yhat(&self, t: f64) -> f64 {
        let n = self.t.len();
        if t <= self.t[0] {
            return self.y[0];
        }
        if t >= self.t[n - 1] {
            return self.y[n - 1];
        }
        let i = self.t.partition_point(|&s| s < t);
        let w = (t - self.t[i - 1]) / (self.t[i] - self.t[i - 1]);
        self.y[i - 1] * (1.0 - w) + self.y[i] * w
    }

    /// Drift rate of X along the deterministic slope: with y = yhat(t),
    /// H = b1 + b2 y + b3 * y (s1 + s2 y)/(1 - s3 y).
    pub fn drift_h(&self, t: f64) -> f64 {
        let c = self.coeffs;
        let y = self.yhat(t);
        c.b1 + c.b2 * y + c.b3 * y * (c.s1 + c.s2 * y) / (1.0 - c.s3 * y)
    }

    /// Diffusion rate of X: I = (s1 + s2 y)/(1 - s3 y).
    pub fn diffusion_i(&self, t: f64) -> f64 {
        let c = self.coeffs;
        let y = self.yhat(t);
        (c.s1 + c.s2 * y) / (1.0 - c.s3 * y)
    }

    /// Coefficient of X in Z: z(t) = yhat (s1 + s2 yhat)/(1 - s3 yhat).
    pub fn z_coef(&self, t: f64) -> f64 {
        self.yhat(t) * self.diffusion_i(t)
    }

    /// E[X_t] = x0 * exp(int_0^t H ds), trapezoid on the stored grid.
    pub fn mean_x(&self, t: f64, x0: f64) -> f64 {
        let n = 400;
        let mut acc = 0.0;
        for i in 0..n {
            let a = t * i as f64 / n as f64;
            let b = t * (i + 1) as f64 / n as f64;
            acc += 0.5 * (self.drift_h(a) + self.drift_h(b)) * (b - a);
        }
        x0 * acc.exp()
    }

    /// Exact exponential simulation of X on a uniform grid with `steps`
    /// steps (H, I frozen per step), one RNG stream per path. Y = yhat*X
    /// and Z = z_coef*X by construction.
    pub fn simulate(&self, x0: f64, paths: usize, steps: usize, seed: u64) -> Vec<SimPath> {
        let dt = self.t_horizon / steps as f64;
        let ts: Vec<f64> = (0..=steps).map(|i| dt * i as f64).collect();
        let mut out = Vec::with_capacity(paths);
        for p in 0..paths {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(p as u64 + 1);
            let mut lx = x0.abs().max(1e-300).ln();
            let sign = if x0 < 0.0 { -1.0 } else { 1.0 };
            let mut xs = Vec::with_capacity(steps + 1);
            xs.push(x0);
            for i in 0..steps {
                let t = ts[i];
                let hh = self.drift_h(t);
                let ii = self.diffusion_i(t);
                let u1: f64 = rng.random::<f64>().max(1e-300);
                let u2: f64 = rng.random::<f64>();
                let g = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
                lx += (hh - 0.5 * ii * ii) * dt + ii * dt.sqrt() * g;
                xs.push(sign * lx.exp());
            }
            let ys: Vec<f64> = ts.iter().zip(&xs).map(|(&t, &x)| self.yhat(t) * x).collect();
            let zs: Vec<f64> = ts.iter().zip(&xs).map(|(&t, &x)| self.z_coef(t) * x).collect();
            out.push(SimPath { t: ts.clone(), x: xs, y: ys, z: zs });
        }
        out
    }
}

/// Builds the reference solution for constant coefficients, after a
/// classifier check that the horizon is admissible.
pub fn linear_oracle(c: SlopeCoeffs, h: f64, t_horizon: f64) -> Result<LinearSolution, OracleError> {
    let cl = if c.s3 == 0.0 {
        classify_constant_sigma3_zero(c, h, Some(t_horizon))?
    } else {
        classify_constant_sigma3_nonzero(c, h, Some(t_horizon))?
    };
    match cl.verdict {
        Verdict::SolvableAllT | Verdict::SolvableGivenT { .. } => {}
        other => {
            return Err(OracleError::NotSolvable(format!(
                "classifier verdict {other:?} for T = {t_horizon}"
            )))
        }
    }
    let opts = IntegrateOpts {
        rel_tol: 1e-12,
        abs_tol: 1e-12,
        event_tol: 1e-10,
        ..IntegrateOpts::default()
    };
    let rhs = |_t: f64, y: f64| eval_generator(c, y).map(|v| v.f).unwrap_or(f64::NAN);
    let branch = integrate_scalar(rhs, h, t_horizon, &opts)?;
    match branch.event {
        BranchEvent::None => {}
        BranchEvent::BlowUp { t_star } | BranchEvent::SingularHit { t_star } => {
            return Err(OracleError::SingularHat { t: t_star });
        }
    }
    // Deterministic realization of the denominator bound.
    for &y in &branch.y {
        if (1.0 - c.s3 * y).abs() < crate::characteristic::DENOM_GUARD {
            return Err(OracleError::SingularHat { t: t_horizon });
        }
    }
    Ok(LinearSolution { coeffs: c, h, t_horizon, t: branch.t, y: branch.y })
}

#[derive(Debug, Clone)]
pub struct ComparisonReport {
    /// Max over grid nodes of u1 - u2 (positive = ordering violated).
    pub max_violation: f64,
    pub slack: f64,
    pub pass: bool,
}

/// Checks the comparison property: with shared b, sigma and f1 <= f2,
/// g1 <= g2, the solved fields must satisfy u1 <= u2 up to slack plus
/// scheme tolerance.
pub fn comparison_check(
    m1: &CoefficientModel,
    m2: &CoefficientModel,
    opts: &SolveOptions,
    scheme_tol: f64,
) -> Result<ComparisonReport, OracleError> {
    // Sampled preconditions over the shared domain.
    let d = m1.domain;
    let grid = |lo: f64, hi: f64, n: usize| -> Vec<f64> {
        (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
    };
    for &t in &grid(d.t.0, d.t.1, 4) {
        for &x in &grid(d.x.0, d.x.1, 5) {
            for &y in &grid(d.y.0, d.y.1, 4) {
                for &z in &grid(d.z.0, d.z.1, 4) {
                    if ((m1.b)(t, x, y, z) - (m2.b)(t, x, y, z)).abs() > 1e-9
                        || ((m1.sigma)(t, x, y, z) - (m2.sigma)(t, x, y, z)).abs() > 1e-9
                    {
                        return Err(OracleError::Precondition(
                            "models must share b and sigma".into(),
                        ));
                    }
                    if (m1.f)(t, x, y, z) > (m2.f)(t, x, y, z) + 1e-12 {
                        return Err(OracleError::Precondition(
                            "driver ordering f1 <= f2 violated on samples".into(),
                        ));
                    }
                }
            }
            if (m1.g)(x) > (m2.g)(x) + 1e-12 {
                return Err(OracleError::Precondition(
                    "terminal ordering g1 <= g2 violated on samples".into(),
                ));
            }
        }
    }
    let f1 = solve_field(m1, opts, None)?;
    let f2 = solve_field(m2, opts, None)?;
    let mut max_violation = f64::NEG_INFINITY;
    for (i, _) in f1.t_grid.iter().enumerate() {
        for j in 0..f1.x_grid.len() {
            max_violation = max_violation.max(f1.u[i][j] - f2.u[i][j]);
        }
    }
    let slack = 1e-8 + scheme_tol;
    Ok(ComparisonReport { max_violation, slack, pass: max_violation <= slack })
}

#[derive(Debug, Clone)]
pub struct StabilityReport {
    /// |u_perturbed(0, x0) - u(0, x0)|.
    pub diff: f64,
    /// Monte Carlo estimate of the squared perturbation functional along the
    /// base solution's paths.
    pub rhs: f64,
    /// diff^2 / rhs (0 when both vanish).
    pub ratio: f64,
    pub pass: bool,
}

/// Stability harness: solves both models and compares the squared initial
/// gap against the sampled perturbation size
///   E[ |dg(X_T)|^2 + (int |db| + |df| dt)^2 + int |dsigma|^2 dt ]
/// along base-model paths. Passes when the ratio stays below `c_test`.
pub fn stability_check(
    m: &CoefficientModel,
    m_pert: &CoefficientModel,
    opts: &SolveOptions,
    paths: usize,
    seed: u64,
    c_test: f64,
) -> Result<StabilityReport, OracleError> {
    let base = solve_field(m, opts, None)?;
    let pert = solve_field(m_pert, opts, None)?;
    let diff = (pert.eval(0.0, m.x0) - base.eval(0.0, m.x0)).abs();

    let rhs = simulate_perturbation_functional(&base, m, m_pert, paths, seed);
    let ratio = if diff == 0.0 && rhs < 1e-30 { 0.0 } else { diff * diff / rhs.max(1e-30) };
    Ok(StabilityReport { diff, rhs, ratio, pass: ratio <= c_test })
}

fn simulate_perturbation_functional(
    base: &DecouplingField,
    m: &CoefficientModel,
    m_pert: &CoefficientModel,
    paths: usize,
    seed: u64,
) -> f64 {
    let n_t = base.t_grid.len() - 1;
    let mut acc = 0.0;
    for p in 0..paths {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(p as u64 + 1);
        let mut x = m.x0;
        let mut drift_int = 0.0;
        let mut diff_int = 0.0;
        for i in 0..n_t {
            let t = base.t_grid[i];
            let dt = base.t_grid[i + 1] - t;
            let y = base.eval(t, x);
            let s = base.eval_ux(t, x);
            let mut z = (m.sigma)(t, x, y, 0.0) * s;
            for _ in 0..20 {
                let z_new = (m.sigma)(t, x, y, z) * s;
                if (z_new - z).abs() < 1e-12 {
                    z = z_new;
                    break;
                }
                z = z_new;
            }
            let db = ((m_pert.b)(t, x, y, z) - (m.b)(t, x, y, z)).abs();
            let df = ((m_pert.f)(t, x, y, z) - (m.f)(t, x, y, z)).abs();
            let ds = (m_pert.sigma)(t, x, y, z) - (m.sigma)(t, x, y, z);
            drift_int += (db + df) * dt;
            diff_int += ds * ds * dt;
            let u1: f64 = rng.random::<f64>().max(1e-300);
            let u2: f64 = rng.random::<f64>();
            let g = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            x += (m.b)(t, x, y, z) * dt + (m.sigma)(t, x, y, z) * dt.sqrt() * g;
            x = x.clamp(base.x_grid[0], *base.x_grid.last().unwrap());
        }
        let dg = (m_pert.g)(x) - (m.g)(x);
        acc += dg * dg + drift_int * drift_int + diff_int;
    }
    acc / paths as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    #[test]
    fn zero_coefficients_identity() {
        let sol = linear_oracle(SlopeCoeffs::zero(), 1.0, 1.0).unwrap();
        for t in [0.0, 0.3, 1.0] {
            assert!((sol.yhat(t) - 1.0).abs() < 1e-12);
            assert!((sol.mean_x(t, 2.0) - 2.0).abs() < 1e-10);
        }
        let paths = sol.simulate(2.0, 3, 10, 1);
        for p in &paths {
            assert!(p.x.iter().all(|&x| (x - 2.0).abs() < 1e-12));
            assert!(p.y.iter().all(|&y| (y - 2.0).abs() < 1e-12));
            assert!(p.z.iter().all(|&z| z.abs() < 1e-12));
        }
    }

    #[test]
    fn pure_driver_slope_exponential() {
        // y' = -y backward from 1 gives y(0) = e.
        let c = SlopeCoeffs { f2: 1.0, ..SlopeCoeffs::zero() };
        let sol = linear_oracle(c, 1.0, 1.0).unwrap();
        assert!((sol.yhat(0.0) - std::f64::consts::E).abs() < 1e-8, "{}", sol.yhat(0.0));
    }

    #[test]
    fn pure_drift_mean() {
        let c = SlopeCoeffs { b1: 1.0, ..SlopeCoeffs::zero() };
        let sol = linear_oracle(c, 1.0, 1.0).unwrap();
        for t in [0.2, 0.7, 1.0] {
            assert!((sol.mean_x(t, 3.0) - 3.0 * t.exp()).abs() < 1e-6);
        }
    }

    #[test]
    fn monte_carlo_mean_matches() {
        let c = SlopeCoeffs { b1: 1.0, s1: 0.5, ..SlopeCoeffs::zero() };
        let sol = linear_oracle(c, 1.0, 1.0).unwrap();
        let n = 20000;
        let paths = sol.simulate(1.0, n, 50, 11);
        let xs: Vec<f64> = paths.iter().map(|p| *p.x.last().unwrap()).collect();
        let mean: f64 = xs.iter().sum::<f64>() / n as f64;
        let var: f64 = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        let want = sol.mean_x(1.0, 1.0);
        assert!((mean - want).abs() < 3.0 * se, "mean {mean}, want {want}, se {se}");
    }

    #[test]
    fn simulated_pairs_satisfy_backward_equation() {
        // Discrete residual of dY = -f dt + Z dW along simulated paths.
        let c = SlopeCoeffs { b1: 0.3, f2: 0.5, s1: 0.4, ..SlopeCoeffs::zero() };
        let sol = linear_oracle(c, 1.0, 1.0).unwrap();
        let steps = 200;
        let dt = 1.0 / steps as f64;
        for p in sol.simulate(1.0, 5, steps, 3) {
            let mut mean_res = 0.0;
            for i in 0..steps {
                // Reconstruct dW from the forward equation.
                let hh = sol.drift_h(p.t[i]);
                let ii = sol.diffusion_i(p.t[i]);
                let dlnx = (p.x[i + 1] / p.x[i]).ln();
                let dw = (dlnx - (hh - 0.5 * ii * ii) * dt) / ii.max(1e-12);
                let f_val = c.f1 * p.x[i] + c.f2 * p.y[i] + c.f3 * p.z[i];
                // Second-order terms leave an O(dt) remainder per step
                // (the dW^2 - dt fluctuation), so test the path mean.
                mean_res += (p.y[i + 1] - p.y[i] + f_val * dt - p.z[i] * dw).abs();
            }
            mean_res /= steps as f64;
            assert!(mean_res < 10.0 * dt, "mean residual {mean_res}");
        }
    }

    #[test]
    fn blowing_up_model_rejected() {
        let c = SlopeCoeffs { b2: 1.0, ..SlopeCoeffs::zero() };
        assert!(matches!(linear_oracle(c, 1.0, 2.0), Err(OracleError::NotSolvable(_))));
    }

    fn flat(g_shift: f64, f_shift: f64) -> CoefficientModel {
        CoefficientModel::new(
            Arc::new(|_, _, _, _| 0.0),
            Arc::new(|_, _, _, _| 1.0),
            Arc::new(move |_, _, _, _| f_shift),
            Arc::new(move |x: f64| 0.2 * x.sin() + g_shift),
            1.0,
            1.0,
            0.0,
        )
    }

    fn quick_opts() -> SolveOptions {
        SolveOptions { dt: 0.05, dx: 0.1, ..SolveOptions::default() }
    }

    #[test]
    fn comparison_additive_terminal_shift() {
        let r = comparison_check(&flat(0.0, 0.0), &flat(1.0, 0.0), &quick_opts(), 1e-6).unwrap();
        assert!(r.pass);
        assert!((r.max_violation + 1.0).abs() < 1e-6, "{}", r.max_violation);
    }

    #[test]
    fn comparison_additive_driver_shift() {
        let r = comparison_check(&flat(0.0, 0.0), &flat(0.0, 0.5), &quick_opts(), 1e-6).unwrap();
        assert!(r.pass);
        // At t = 0 the gap is 0.5*T; max violation over all t is the t -> T limit 0.
        assert!(r.max_violation <= 1e-8 + 1e-6);
    }

    #[test]
    fn comparison_rejects_misordered() {
        assert!(matches!(
            comparison_check(&flat(1.0, 0.0), &flat(0.0, 0.0), &quick_opts(), 1e-6),
            Err(OracleError::Precondition(_))
        ));
    }

    #[test]
    fn stability_zero_and_constant_shift() {
        let r = stability_check(&flat(0.0, 0.0), &flat(0.0, 0.0), &quick_opts(), 200, 5, 10.0)
            .unwrap();
        assert_eq!(r.ratio, 0.0);
        assert!(r.pass);
        let r = stability_check(&flat(0.0, 0.0), &flat(0.01, 0.0), &quick_opts(), 200, 5, 10.0)
            .unwrap();
        assert!((r.ratio - 1.0).abs() < 0.2, "ratio {}", r.ratio);
        assert!(r.pass);
    }
}
