//! Grid solver for the decoupling field u(t,x): backward induction over a
//! delta-partition with per-interval Picard iteration, Gauss-Hermite
//! one-step conditional expectations, and a per-node fixed point for the
//! z-coupled diffusion. Also the role-reversal and shear transforms that
//! turn the other coefficient regimes into the directly solvable one, and a
//! Monte Carlo forward consistency check.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use thiserror::Error;

use crate::dominating::DominatingSolution;
use crate::model::{CoeffFn, CoefficientModel, SampleDomain, TerminalFn};

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("Picard iteration not contracting at minimum delta = {delta:.3e} (factor {factor:.3})")]
    ContractionFailure { delta: f64, factor: f64 },
    #[error("per-node fixed point exceeded {max_iters} iterations at t={t:.4}, x={x:.4}")]
    FixedPointFailure { t: f64, x: f64, max_iters: usize },
    #[error("slope u_x = {ux:.4} escaped the declared band at t={t:.4}, x={x:.4}")]
    BandEscape { t: f64, x: f64, ux: f64 },
    #[error("monotonicity violated: {0}")]
    Monotonicity(String),
    #[error("inversion failed: {0}")]
    Inversion(String),
    #[error("bound violated: {0}")]
    Bound(String),
    #[error("{frac:.1}% of forward paths exited the field band (limit 1%)")]
    BandExit { frac: f64 },
    #[error("precondition failed: {0}")]
    Precondition(String),
}

/// Gauss-Hermite abscissae/weights (7 nodes, physicists' convention).
/// For E[phi(xi)] with xi standard normal use sqrt(2)*x and w/sqrt(pi).
const GH_X: [f64; 7] = [
    -2.6519613568352334,
    -1.6735516287674714,
    -0.8162878828589647,
    0.0,
    0.8162878828589647,
    1.6735516287674714,
    2.6519613568352334,
];
const GH_W: [f64; 7] = [
    0.0009717812450995192,
    0.05451558281912703,
    0.4256072526101278,
    0.8102646175568073,
    0.4256072526101278,
    0.05451558281912703,
    0.0009717812450995192,
];

fn gauss_nodes() -> [(f64, f64); 7] {
    let spi = std::f64::consts::PI.sqrt();
    let mut out = [(0.0, 0.0); 7];
    for i in 0..7 {
        out[i] = (std::f64::consts::SQRT_2 * GH_X[i], GH_W[i] / spi);
    }
    out
}

#[derive(Debug, Clone)]
pub struct SolveOptions {
    pub dt: f64,
    pub dx: f64,
    /// Spatial band; default x0 +- (6 * diffusion scale * sqrt(T) + 1).
    pub band: Option<(f64, f64)>,
    pub picard_tol: f64,
    pub max_picard: usize,
    /// Initial delta-subinterval length before contraction-driven halving.
    pub delta0: f64,
    pub fp_tol: f64,
    pub max_fp: usize,
    /// Optional |u_x| cap; exceeding it is a BandEscape.
    pub slope_cap: Option<f64>,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            dt: 0.01,
            dx: 0.05,
            band: None,
            picard_tol: 1e-10,
            max_picard: 200,
            delta0: 0.25,
            fp_tol: 1e-12,
            max_fp: 100,
            slope_cap: None,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct FieldMeta {
    pub delta: f64,
    /// Picard sweep counts per delta-block, later blocks first.
    pub picard_iters: Vec<usize>,
    pub fp_residual_max: f64,
    pub fp_iters_max: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecouplingField {
    pub t_grid: Vec<f64>,
    pub x_grid: Vec<f64>,
    /// u[i][j] = u(t_grid[i], x_grid[j]).
    pub u: Vec<Vec<f64>>,
    /// Centered-difference slopes (one-sided at the edges).
    pub ux: Vec<Vec<f64>>,
    pub meta: FieldMeta,
}

fn interp(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    let n = xs.len();
    if x <= xs[0] {
        return ys[0];
    }
    if x >= xs[n - 1] {
        return ys[n - 1];
    }
    let i = xs.partition_point(|&s| s < x);
    let w = (x - xs[i - 1]) / (xs[i] - xs[i - 1]);
    ys[i - 1] * (1.0 - w) + ys[i] * w
}

fn slopes(x_grid: &[f64], u: &[f64]) -> Vec<f64> {
    let n = u.len();
    let mut s = vec![0.0; n];
    for j in 0..n {
        let (a, b) = if j == 0 {
            (j, j + 1)
        } else if j == n - 1 {
            (j - 1, j)
        } else {
            (j - 1, j + 1)
        };
        s[j] = (u[b] - u[a]) / (x_grid[b] - x_grid[a]);
    }
    s
}

impl DecouplingField {
    /// Piecewise-bilinear evaluation, clamped to the grid box.
    pub fn eval(&self, t: f64, x: f64) -> f64 {
        let n = self.t_grid.len();
        if t <= self.t_grid[0] {
            return interp(&self.x_grid, &self.u[0], x);
        }
        if t >= self.t_grid[n - 1] {
            return interp(&self.x_grid, &self.u[n - 1], x);
        }
        let i = self.t_grid.partition_point(|&s| s < t);
        let w = (t - self.t_grid[i - 1]) / (self.t_grid[i] - self.t_grid[i - 1]);
        interp(&self.x_grid, &self.u[i - 1], x) * (1.0 - w)
            + interp(&self.x_grid, &self.u[i], x) * w
    }

    pub fn eval_ux(&self, t: f64, x: f64) -> f64 {
        let n = self.t_grid.len();
        if t <= self.t_grid[0] {
            return interp(&self.x_grid, &self.ux[0], x);
        }
        if t >= self.t_grid[n - 1] {
            return interp(&self.x_grid, &self.ux[n - 1], x);
        }
        let i = self.t_grid.partition_point(|&s| s < t);
        let w = (t - self.t_grid[i - 1]) / (self.t_grid[i] - self.t_grid[i - 1]);
        interp(&self.x_grid, &self.ux[i - 1], x) * (1.0 - w)
            + interp(&self.x_grid, &self.ux[i], x) * w
    }
}

fn default_band(m: &CoefficientModel) -> (f64, f64) {
    // Diffusion scale from a few point probes around the start.
    let g0 = (m.g)(m.x0);
    let mut scale: f64 = 0.0;
    for dxp in [-1.0, 0.0, 1.0] {
        scale = scale.max((m.sigma)(0.0, m.x0 + dxp, g0, 0.0).abs());
    }
    let w = 6.0 * scale.max(0.5) * m.horizon_t.sqrt() + 1.0;
    (m.x0 - w, m.x0 + w)
}

/// One-step value at (t, x): the pair (y, z) solving
///   z = sigma(t,x,y,z) * slope,
///   y = E[u_next(x + b dt + sigma sqrt(dt) xi)] + f(t,x,y,z) dt,
/// by damped alternation; the z-iteration contracts because |sigma_z *
/// slope| stays below 1 in the admissible regime.
#[allow(clippy::too_many_arguments)]
fn node_step(
    m: &CoefficientModel,
    gauss: &[(f64, f64); 7],
    t: f64,
    x: f64,
    dt: f64,
    x_grid: &[f64],
    u_next: &[f64],
    slope: f64,
    opts: &SolveOptions,
) -> Result<(f64, f64, usize, f64), SolverError> {
    let mut y = interp(x_grid, u_next, x);
    let mut z = (m.sigma)(t, x, y, 0.0) * slope;
    let sdt = dt.sqrt();
    let mut iters = 0;
    loop {
        iters += 1;
        if iters > opts.max_fp {
            return Err(SolverError::FixedPointFailure { t, x, max_iters: opts.max_fp });
        }
        let z_new = (m.sigma)(t, x, y, z) * slope;
        let zc = 0.5 * (z + z_new);
        let sig = (m.sigma)(t, x, y, zc);
        let drift = (m.b)(t, x, y, zc);
        let mut ey = 0.0;
        for &(xi, w) in gauss {
            ey += w * interp(x_grid, u_next, x + drift * dt + sig * sdt * xi);
        }
        let y_new = ey + (m.f)(t, x, y, zc) * dt;
        let delta = (y_new - y).abs() + (z_new - z).abs();
        y = y_new;
        z = z_new;
        if delta < opts.fp_tol {
            break;
        }
    }
    let residual = (z - (m.sigma)(t, x, y, z) * slope).abs();
    Ok((y, z, iters, residual))
}

/// Backward-induction construction of the decoupling field. The time grid
/// is processed in delta-blocks; within a block the levels are recomputed
/// by Picard sweeps (slopes for the z-coupling taken from the previous
/// sweep) until the sweep-to-sweep change contracts below tolerance. The
/// block length is halved whenever the observed contraction factor reaches
/// 1/2.
pub fn solve_field(
    m: &CoefficientModel,
    opts: &SolveOptions,
    bracket: Option<&DominatingSolution>,
) -> Result<DecouplingField, SolverError> {
    let t_max = m.horizon_t;
    if !(t_max > 0.0) {
        return Err(SolverError::Precondition("horizon must be positive".into()));
    }
    let n_t = ((t_max / opts.dt).round() as usize).max(1);
    let dt = t_max / n_t as f64;
    let (x_lo, x_hi) = opts.band.unwrap_or_else(|| default_band(m));
    if !(x_hi > x_lo) {
        return Err(SolverError::Precondition("empty spatial band".into()));
    }
    let n_x = (((x_hi - x_lo) / opts.dx).round() as usize).max(2);
    let x_grid: Vec<f64> = (0..=n_x)
        .map(|j| x_lo + (x_hi - x_lo) * j as f64 / n_x as f64)
        .collect();
    let t_grid: Vec<f64> = (0..=n_t).map(|i| t_max * i as f64 / n_t as f64).collect();
    let gauss = gauss_nodes();

    let mut u: Vec<Vec<f64>> = vec![Vec::new(); n_t + 1];
    u[n_t] = x_grid.iter().map(|&x| (m.g)(x)).collect();

    let mut meta = FieldMeta { delta: opts.delta0.min(t_max), ..FieldMeta::default() };
    let mut block_steps = ((meta.delta / dt).round() as usize).clamp(1, n_t);

    let mut i_top = n_t;
    while i_top > 0 {
        let k = block_steps.min(i_top);
        // levels[l] holds the iterate for time index i_top - k + l, l < k.
        let mut levels: Vec<Vec<f64>> = Vec::new();
        let mut prev_diff = f64::INFINITY;
        let mut sweeps = 0usize;
        loop {
            sweeps += 1;
            let mut diff: f64 = 0.0;
            let mut new_levels: Vec<Vec<f64>> = vec![Vec::new(); k];
            for l in (0..k).rev() {
                let i = i_top - k + l;
                let t = t_grid[i];
                let u_next: &[f64] =
                    if l + 1 < k { &new_levels[l + 1] } else { &u[i_top] };
                // Slope source: previous sweep at this level, else the level
                // above (first sweep).
                let slope_src: Vec<f64> = if !levels.is_empty() {
                    slopes(&x_grid, &levels[l])
                } else {
                    slopes(&x_grid, u_next)
                };
                let mut row = vec![0.0; x_grid.len()];
                for (j, &x) in x_grid.iter().enumerate() {
                    let (y, _z, iters, resid) = node_step(
                        m, &gauss, t, x, dt, &x_grid, u_next, slope_src[j], opts,
                    )?;
                    meta.fp_iters_max = meta.fp_iters_max.max(iters);
                    meta.fp_residual_max = meta.fp_residual_max.max(resid);
                    if !levels.is_empty() {
                        diff = diff.max((y - levels[l][j]).abs());
                    } else {
                        diff = f64::INFINITY;
                    }
                    row[j] = y;
                }
                new_levels[l] = row;
            }
            levels = new_levels;
            if diff < opts.picard_tol {
                break;
            }
            let factor = diff / prev_diff;
            if sweeps >= 4 && factor >= 0.5 {
                // Not contracting fast enough: halve the block.
                if block_steps == 1 {
                    return Err(SolverError::ContractionFailure { delta: dt, factor });
                }
                block_steps = (block_steps / 2).max(1);
                meta.delta = block_steps as f64 * dt;
                levels = Vec::new();
                prev_diff = f64::INFINITY;
                sweeps = 0;
                continue;
            }
            if sweeps >= opts.max_picard {
                return Err(SolverError::ContractionFailure {
                    delta: meta.delta,
                    factor: factor.min(1.0),
                });
            }
            prev_diff = diff;
        }
        meta.picard_iters.push(sweeps);
        let k = levels.len();
        for (l, row) in levels.into_iter().enumerate() {
            u[i_top - k + l] = row;
        }
        i_top -= k;
    }

    let ux: Vec<Vec<f64>> = u.iter().map(|row| slopes(&x_grid, row)).collect();

    // Slope-band checks on interior nodes. Nodes within the quadrature's
    // diffusive reach of the truncation boundary depend on clamped edge
    // values and are not interior for this purpose.
    let tol_slope = 1e-2;
    let g0 = (m.g)(m.x0);
    let mut sig_probe: f64 = 0.5;
    for dxp in [-1.0, 0.0, 1.0] {
        sig_probe = sig_probe.max((m.sigma)(0.0, m.x0 + dxp, g0, 0.0).abs());
    }
    for (i, row) in ux.iter().enumerate() {
        let reach = 3.0 * sig_probe * (t_max - t_grid[i]).sqrt() + opts.dx;
        for (j, &s) in row.iter().enumerate() {
            if j == 0 || j + 1 == row.len() {
                continue;
            }
            if x_grid[j] - x_lo < reach || x_hi - x_grid[j] < reach {
                continue;
            }
            if let Some(cap) = opts.slope_cap {
                if s.abs() > cap + tol_slope {
                    return Err(SolverError::BandEscape { t: t_grid[i], x: x_grid[j], ux: s });
                }
            }
            if let Some(dom) = bracket {
                let lo = dom.lower_at(t_grid[i]) - tol_slope;
                let hi = dom.upper_at(t_grid[i]) + tol_slope;
                if s < lo || s > hi {
                    return Err(SolverError::BandEscape { t: t_grid[i], x: x_grid[j], ux: s });
                }
            }
        }
    }

    Ok(DecouplingField { t_grid, x_grid, u, ux, meta })
}

#[derive(Debug, Clone)]
pub struct PathStats {
    pub mean_x_t: f64,
    pub var_x_t: f64,
    pub terminal_residual: f64,
    pub bsde_residual: f64,
    pub clamped_fraction: f64,
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub y0: f64,
    pub z0: f64,
    pub path_stats: Option<PathStats>,
}

fn normal_pair(rng: &mut ChaCha8Rng) -> (f64, f64) {
    // Box-Muller; u1 bounded away from 0.
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random::<f64>();
    let r = (-2.0 * u1.ln()).sqrt();
    let a = 2.0 * std::f64::consts::PI * u2;
    (r * a.cos(), r * a.sin())
}

/// Euler-Maruyama forward pass through the solved field: X driven by the
/// z = sigma * u_x closure, Y read off as u(t, X). Deterministic per seed;
/// each path has its own RNG stream.
pub fn forward_verify(
    field: &DecouplingField,
    m: &CoefficientModel,
    paths: usize,
    seed: u64,
) -> Result<SolveReport, SolverError> {
    let n_t = field.t_grid.len() - 1;
    let (x_lo, x_hi) = (field.x_grid[0], *field.x_grid.last().unwrap());
    let mut sum_x = 0.0;
    let mut sum_x2 = 0.0;
    let mut sum_res = 0.0;
    let mut sum_bsde = 0.0;
    let mut clamped = 0usize;

    for p in 0..paths {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(p as u64 + 1);
        let mut x = m.x0;
        let mut was_clamped = false;
        let mut bsde = 0.0;
        for i in 0..n_t {
            let t = field.t_grid[i];
            let dt = field.t_grid[i + 1] - field.t_grid[i];
            let y = field.eval(t, x);
            let s = field.eval_ux(t, x);
            // z fixed point at the current state.
            let mut z = (m.sigma)(t, x, y, 0.0) * s;
            for _ in 0..50 {
                let z_new = (m.sigma)(t, x, y, z) * s;
                if (z_new - z).abs() < 1e-12 {
                    z = z_new;
                    break;
                }
                z = z_new;
            }
            let sig = (m.sigma)(t, x, y, z);
            let (g1, _) = normal_pair(&mut rng);
            let dw = dt.sqrt() * g1;
            let x_next = x + (m.b)(t, x, y, z) * dt + sig * dw;
            let x_next = if x_next < x_lo || x_next > x_hi {
                was_clamped = true;
                x_next.clamp(x_lo, x_hi)
            } else {
                x_next
            };
            let y_next = field.eval(field.t_grid[i + 1], x_next);
            let r = y_next - y + (m.f)(t, x, y, z) * dt - z * dw;
            bsde += r * r;
            x = x_next;
        }
        let y_t = field.eval(*field.t_grid.last().unwrap(), x);
        let res = y_t - (m.g)(x);
        sum_x += x;
        sum_x2 += x * x;
        sum_res += res * res;
        sum_bsde += bsde / n_t as f64;
        if was_clamped {
            clamped += 1;
        }
    }
    let n = paths as f64;
    let frac = clamped as f64 / n;
    if frac > 0.01 {
        return Err(SolverError::BandExit { frac: frac * 100.0 });
    }
    let mean = sum_x / n;
    let y0 = field.eval(0.0, m.x0);
    let s0 = field.eval_ux(0.0, m.x0);
    let z0 = (m.sigma)(0.0, m.x0, y0, 0.0) * s0;
    Ok(SolveReport {
        y0,
        z0,
        path_stats: Some(PathStats {
            mean_x_t: mean,
            var_x_t: (sum_x2 / n - mean * mean).max(0.0),
            terminal_residual: sum_res / n,
            bsde_residual: sum_bsde / n,
            clamped_fraction: frac,
        }),
    })
}

/// Solves phi(v) = target for v on a monotone branch by expanding bisection
/// plus Newton polish, to absolute tolerance 1e-12.
fn invert_monotone(
    phi: &dyn Fn(f64) -> f64,
    target: f64,
    guess: f64,
    what: &str,
) -> Result<f64, SolverError> {
    let f = |v: f64| phi(v) - target;
    // Newton first; well-conditioned coefficients converge in a few steps.
    let mut v = guess;
    for _ in 0..30 {
        let fv = f(v);
        if fv.abs() <= 1e-13 * (1.0 + target.abs() + v.abs()) {
            return Ok(v);
        }
        let h = 1e-7 * (1.0 + v.abs());
        let d = (f(v + h) - f(v - h)) / (2.0 * h);
        if !(d.abs() > 1e-12) {
            break;
        }
        let step = fv / d;
        if !step.is_finite() || step.abs() > 1e6 * (1.0 + v.abs()) {
            break;
        }
        v -= step;
    }
    let mut lo = guess;
    let mut hi = guess;
    let mut step = 1.0 + guess.abs() * 0.1;
    let mut flo = f(lo);
    let mut fhi = f(hi);
    for _ in 0..200 {
        if flo == 0.0 {
            return Ok(lo);
        }
        if fhi == 0.0 {
            return Ok(hi);
        }
        if flo * fhi < 0.0 {
            break;
        }
        lo -= step;
        hi += step;
        step *= 2.0;
        flo = f(lo);
        fhi = f(hi);
        if !flo.is_finite() || !fhi.is_finite() {
            return Err(SolverError::Inversion(format!("{what}: non-finite probe")));
        }
    }
    if flo * fhi > 0.0 {
        return Err(SolverError::Inversion(format!("{what}: no sign change found")));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let fm = f(mid);
        if fm == 0.0 || hi - lo < 1e-13 * (1.0 + mid.abs()) {
            break;
        }
        if fm * flo < 0.0 {
            hi = mid;
            fhi = fm;
        } else {
            lo = mid;
            flo = fm;
        }
        let _ = fhi;
    }
    let mut v = 0.5 * (lo + hi);
    // Newton polish with a numeric derivative.
    for _ in 0..4 {
        let h = 1e-7 * (1.0 + v.abs());
        let d = (f(v + h) - f(v - h)) / (2.0 * h);
        if d.abs() > 1e-14 {
            let step = f(v) / d;
            if step.is_finite() && step.abs() < 1.0 + v.abs() {
                v -= step;
            }
        }
    }
    Ok(v)
}

fn check_monotone_slope(
    name: &str,
    sample: impl Fn(f64) -> f64,
    range: (f64, f64),
) -> Result<f64, SolverError> {
    let n = 40;
    let micro = 1e-6 * (range.1 - range.0).abs().max(1.0);
    let mut min_slope = f64::INFINITY;
    let mut max_slope = f64::NEG_INFINITY;
    for i in 0..n {
        let a = range.0 + (range.1 - range.0) * i as f64 / n as f64;
        let b = range.0 + (range.1 - range.0) * (i + 1) as f64 / n as f64;
        // Both the interval quotient and a centered micro-quotient at the
        // midpoint, so isolated zero-slope points are not averaged away.
        let c = 0.5 * (a + b);
        for s in [
            (sample(b) - sample(a)) / (b - a),
            (sample(a + micro) - sample(a - micro)) / (2.0 * micro),
            (sample(c + micro) - sample(c - micro)) / (2.0 * micro),
            (sample(b + micro) - sample(b - micro)) / (2.0 * micro),
        ] {
            min_slope = min_slope.min(s);
            max_slope = max_slope.max(s);
        }
    }
    if min_slope > 1e-6 {
        return Ok(min_slope);
    }
    if max_slope < -1e-6 {
        return Ok(max_slope);
    }
    Err(SolverError::Monotonicity(format!(
        "{name}: sampled slope range [{min_slope:.3e}, {max_slope:.3e}] touches zero"
    )))
}

/// Swaps the roles of the forward and backward components. With the new
/// forward state equal to the old Y, the transformed coefficients are
///   sigma~(t,x~,y~,z~) = z where sigma(t,y~,x~,z) = z~,
///   b~ = -f(t,y~,x~,z),  f~ = -b(t,y~,x~,z),  g~ = g^{-1},
/// so the z-slope and terminal slope invert (1/sigma3, 1/h). Requires
/// sigma strictly monotone in z and g strictly monotone in x.
pub fn reverse_roles(m: &CoefficientModel) -> Result<CoefficientModel, SolverError> {
    let dom = m.domain;
    check_monotone_slope(
        "sigma in z",
        |z| (m.sigma)(0.5 * (dom.t.0 + dom.t.1), m.x0, (m.g)(m.x0), z),
        dom.z,
    )?;
    check_monotone_slope("g in x", |x| (m.g)(x), dom.x)?;

    let sigma = Arc::clone(&m.sigma);
    let sigma2 = Arc::clone(&m.sigma);
    let b = Arc::clone(&m.b);
    let f = Arc::clone(&m.f);
    let g = Arc::clone(&m.g);
    let g2 = Arc::clone(&m.g);

    // z solving sigma(t, y~, x~, z) = z~.
    let solve_z = move |sig: &CoeffFn, t: f64, xt: f64, yt: f64, zt: f64| -> f64 {
        let s = Arc::clone(sig);
        invert_monotone(&move |z| s(t, yt, xt, z), zt, zt, "sigma inverse").unwrap_or(f64::NAN)
    };

    let sig_t: CoeffFn = {
        let sigma = Arc::clone(&sigma);
        Arc::new(move |t, xt, yt, zt| solve_z(&sigma, t, xt, yt, zt))
    };
    let b_t: CoeffFn = {
        let sigma = Arc::clone(&sigma2);
        Arc::new(move |t, xt, yt, zt| {
            let z = solve_z(&sigma, t, xt, yt, zt);
            -f(t, yt, xt, z)
        })
    };
    let f_t: CoeffFn = {
        Arc::new(move |t, xt, yt, zt| {
            let z = solve_z(&sigma2, t, xt, yt, zt);
            -b(t, yt, xt, z)
        })
    };
    let g_t: TerminalFn = {
        Arc::new(move |xt| {
            invert_monotone(&|x| g(x), xt, xt, "g inverse").unwrap_or(f64::NAN)
        })
    };

    // Sample the sigma image to size the transformed z-range.
    let mut z_img = (f64::INFINITY, f64::NEG_INFINITY);
    for i in 0..=8 {
        let z = dom.z.0 + (dom.z.1 - dom.z.0) * i as f64 / 8.0;
        let v = (m.sigma)(0.5 * (dom.t.0 + dom.t.1), m.x0, (m.g)(m.x0), z);
        z_img.0 = z_img.0.min(v);
        z_img.1 = z_img.1.max(v);
    }
    if z_img.0 >= z_img.1 {
        z_img = (z_img.0 - 1.0, z_img.1 + 1.0);
    }
    let domain = SampleDomain { t: dom.t, x: dom.y, y: dom.x, z: z_img };
    let mut out = CoefficientModel::new(
        b_t,
        sig_t,
        f_t,
        g_t,
        m.lipschitz_k0.max(1.0 / m.lipschitz_k0.min(1.0)).max(4.0) * 4.0,
        m.horizon_t,
        (g2)(m.x0),
    );
    out.domain = domain;
    Ok(out)
}

/// Predicted slope bounds after the shear transform.
#[derive(Debug, Clone, Copy)]
pub struct ShearBounds {
    pub c1_bar: f64,
    pub c2_bar: f64,
}

pub fn phi_eps_bounds(c1: f64, c2: f64, eps: f64) -> Result<ShearBounds, SolverError> {
    let c1_bar = (1.0 + 2.0 * c1 * eps) / (1.0 + c1 * eps);
    let c2_bar = (eps + c2) / (2.0 * eps + c2);
    if c1_bar * c2_bar >= 1.0 {
        return Err(SolverError::Bound(format!(
            "transformed product c1_bar*c2_bar = {:.6} >= 1",
            c1_bar * c2_bar
        )));
    }
    Ok(ShearBounds { c1_bar, c2_bar })
}

/// Shear transform: new coordinates (x~, y~) = (2 eps x + y, eps x + y) and
/// z~ = eps sigma + z, giving
///   sigma~ = 2 eps sigma + z,  b~ = 2 eps b - f,  f~ = f - eps b,
///   g~(x~) = eps x + g(x) where 2 eps x + g(x) = x~.
/// Requires z -> eps sigma + z and x -> 2 eps x + g(x) strictly increasing.
pub fn phi_eps_transform(
    m: &CoefficientModel,
    eps: f64,
) -> Result<(CoefficientModel, ShearBounds), SolverError> {
    if !(eps > 0.0) {
        return Err(SolverError::Bound("eps must be positive".into()));
    }
    let dom = m.domain;
    check_monotone_slope(
        "eps*sigma + z in z",
        |z| eps * (m.sigma)(0.5 * (dom.t.0 + dom.t.1), m.x0, (m.g)(m.x0), z) + z,
        dom.z,
    )?;
    check_monotone_slope("2 eps x + g(x)", |x| 2.0 * eps * x + (m.g)(x), dom.x)?;

    // Transformed slope bounds from the sampled original ones.
    let raw = crate::model::slope_box_from_model(m, dom, 256)
        .map_err(|e| SolverError::Precondition(e.to_string()))?;
    let c1 = raw.s3.lo.abs().max(raw.s3.hi.abs());
    let c2 = raw.h.lo.abs().max(raw.h.hi.abs());
    let bounds = phi_eps_bounds(c1, c2, eps)?;

    let sigma = Arc::clone(&m.sigma);
    let b = Arc::clone(&m.b);
    let f = Arc::clone(&m.f);
    let g = Arc::clone(&m.g);
    let g_for_x0 = Arc::clone(&m.g);

    // Inverse state map: x = (x~ - y~)/eps, y = 2 y~ - x~.
    let inv = move |xt: f64, yt: f64| ((xt - yt) / eps, 2.0 * yt - xt);
    // Original z solving eps sigma(t,x,y,z) + z = z~.
    let solve_z = {
        let sigma = Arc::clone(&sigma);
        move |t: f64, x: f64, y: f64, zt: f64| -> f64 {
            let s = Arc::clone(&sigma);
            invert_monotone(&move |z| eps * s(t, x, y, z) + z, zt, zt, "shear z inverse")
                .unwrap_or(f64::NAN)
        }
    };

    let sig_t: CoeffFn = {
        let sigma = Arc::clone(&sigma);
        let solve_z = solve_z.clone();
        Arc::new(move |t, xt, yt, zt| {
            let (x, y) = inv(xt, yt);
            let z = solve_z(t, x, y, zt);
            2.0 * eps * sigma(t, x, y, z) + z
        })
    };
    let b_t: CoeffFn = {
        let solve_z = solve_z.clone();
        let f = Arc::clone(&f);
        Arc::new(move |t, xt, yt, zt| {
            let (x, y) = inv(xt, yt);
            let z = solve_z(t, x, y, zt);
            2.0 * eps * b(t, x, y, z) - f(t, x, y, z)
        })
    };
    let f_t: CoeffFn = {
        let b = Arc::clone(&m.b);
        Arc::new(move |t, xt, yt, zt| {
            let (x, y) = inv(xt, yt);
            let z = solve_z(t, x, y, zt);
            f(t, x, y, z) - eps * b(t, x, y, z)
        })
    };
    let g_t: TerminalFn = {
        Arc::new(move |xt| {
            let x = invert_monotone(&|x| 2.0 * eps * x + g(x), xt, 0.0, "shear g inverse")
                .unwrap_or(f64::NAN);
            eps * x + g(x)
        })
    };

    let scale = 1.0 + 2.0 * eps;
    let domain = SampleDomain {
        t: dom.t,
        x: (scale * dom.x.0 - 1.0, scale * dom.x.1 + 1.0),
        y: (scale * dom.x.0 - 1.0, scale * dom.x.1 + 1.0),
        z: (dom.z.0 - eps * 10.0 - 1.0, dom.z.1 + eps * 10.0 + 1.0),
    };
    let mut out = CoefficientModel::new(
        b_t,
        sig_t,
        f_t,
        g_t,
        m.lipschitz_k0 * (2.0 + 2.0 * eps),
        m.horizon_t,
        2.0 * eps * m.x0 + (g_for_x0)(m.x0),
    );
    out.domain = domain;
    Ok((out, bounds))
}

/// Maps the shear-transformed field back to original coordinates: for given
/// (t, x) solves u~(t, 2 eps x + y) = eps x + y for y.
pub fn shear_map_back(
    field_t: &DecouplingField,
    eps: f64,
    t: f64,
    x: f64,
) -> Result<f64, SolverError> {
    // Residual is strictly decreasing in y when |u~_x| < 1.
    let r = |y: f64| field_t.eval(t, 2.0 * eps * x + y) - (eps * x + y);
    invert_monotone(&r, 0.0, field_t.eval(t, 2.0 * eps * x), "shear map back")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SlopeCoeffs;

    fn trivial_model() -> CoefficientModel {
        CoefficientModel::new(
            Arc::new(|_, _, _, _| 0.0),
            Arc::new(|_, _, _, _| 1.0),
            Arc::new(|_, _, _, _| 0.0),
            Arc::new(|x| x),
            1.0,
            1.0,
            0.0,
        )
    }

    #[test]
    fn driftless_identity_terminal() {
        let m = trivial_model();
        let opts = SolveOptions { dt: 0.05, dx: 0.1, ..SolveOptions::default() };
        let field = solve_field(&m, &opts, None).unwrap();
        // u(t,x) = x away from the truncation boundary.
        for (i, _t) in field.t_grid.iter().enumerate() {
            for (j, &x) in field.x_grid.iter().enumerate() {
                if x.abs() < 3.0 {
                    assert!((field.u[i][j] - x).abs() < 2e-3, "u({},{x})={}", i, field.u[i][j]);
                }
            }
        }
    }

    #[test]
    fn terminal_condition_exact() {
        let m = trivial_model();
        let opts = SolveOptions { dt: 0.1, dx: 0.2, ..SolveOptions::default() };
        let field = solve_field(&m, &opts, None).unwrap();
        let n = field.t_grid.len() - 1;
        for (j, &x) in field.x_grid.iter().enumerate() {
            assert_eq!(field.u[n][j], (m.g)(x));
        }
    }

    #[test]
    fn heat_kernel_model() {
        let m = CoefficientModel::new(
            Arc::new(|_, _, _, _| 0.0),
            Arc::new(|_, _, _, _| 1.0),
            Arc::new(|_, _, _, _| 0.0),
            Arc::new(|x: f64| x.sin()),
            1.0,
            1.0,
            0.0,
        );
        let opts = SolveOptions { dt: 0.02, dx: 0.1, band: Some((-7.0, 7.0)), ..SolveOptions::default() };
        let field = solve_field(&m, &opts, None).unwrap();
        let mut worst: f64 = 0.0;
        for (i, &t) in field.t_grid.iter().enumerate() {
            for (j, &x) in field.x_grid.iter().enumerate() {
                if x.abs() > 5.0 {
                    continue;
                }
                let exact = x.sin() * (-(1.0 - t) / 2.0).exp();
                worst = worst.max((field.u[i][j] - exact).abs());
            }
        }
        assert!(worst < 2e-2, "sup error {worst}");
    }

    #[test]
    fn z_coupled_fixed_point_converges() {
        let m = CoefficientModel::new(
            Arc::new(|_, _, _, _| 0.0),
            Arc::new(|_, _, _, z: f64| 1.0 + 0.3 * z),
            Arc::new(|_, _, _, _| 0.0),
            Arc::new(|x: f64| 0.4 * x),
            2.0,
            1.0,
            0.0,
        );
        let opts = SolveOptions { dt: 0.05, dx: 0.1, ..SolveOptions::default() };
        let field = solve_field(&m, &opts, None).unwrap();
        assert!(field.meta.fp_residual_max <= 1e-10, "{}", field.meta.fp_residual_max);
        assert!(field.meta.fp_iters_max <= 100);
        // Exact field: u = 0.4 x, z = 0.4/(1 - 0.12).
        let z0 = field.eval_ux(0.0, 0.0) * (1.0 + 0.3 * 0.4 / 0.88);
        assert!((z0 - 0.4 / 0.88 * 1.0).abs() < 1e-2, "{z0}");
    }

    #[test]
    fn forward_verify_trivial() {
        let m = trivial_model();
        let opts = SolveOptions { dt: 0.01, dx: 0.05, ..SolveOptions::default() };
        let field = solve_field(&m, &opts, None).unwrap();
        let report = forward_verify(&field, &m, 2000, 7).unwrap();
        let stats = report.path_stats.unwrap();
        assert!(stats.terminal_residual < 1e-4, "{}", stats.terminal_residual);
        assert!((report.y0 - 0.0).abs() < 1e-6);
        // Same seed reproduces bit-identically.
        let report2 = forward_verify(&field, &m, 2000, 7).unwrap();
        assert_eq!(stats.mean_x_t, report2.path_stats.unwrap().mean_x_t);
    }

    #[test]
    fn corrupted_field_detected() {
        let m = trivial_model();
        let opts = SolveOptions { dt: 0.01, dx: 0.05, ..SolveOptions::default() };
        let field = solve_field(&m, &opts, None).unwrap();
        let base = forward_verify(&field, &m, 2000, 7)
            .unwrap()
            .path_stats
            .unwrap()
            .terminal_residual;
        let mut bad = field.clone();
        for row in bad.u.iter_mut() {
            for v in row.iter_mut() {
                *v += 0.1;
            }
        }
        let res = forward_verify(&bad, &m, 2000, 7)
            .unwrap()
            .path_stats
            .unwrap()
            .terminal_residual;
        assert!(res > 5.0 * base.max(1e-6), "base {base}, corrupted {res}");
    }

    #[test]
    fn reverse_roles_linear_example() {
        let m = CoefficientModel::new(
            Arc::new(|_, _, _, _| 0.0),
            Arc::new(|_, _, _, z: f64| 2.0 * z),
            Arc::new(|_, _, _, _| 0.0),
            Arc::new(|x: f64| 4.0 * x),
            8.0,
            1.0,
            0.5,
        );
        let rm = reverse_roles(&m).unwrap();
        // sigma~ slope in z is 1/2; terminal slope 1/4.
        let s = ((rm.sigma)(0.0, 0.0, 0.0, 1.0) - (rm.sigma)(0.0, 0.0, 0.0, 0.0)) / 1.0;
        assert!((s - 0.5).abs() < 1e-9, "{s}");
        let h = ((rm.g)(1.0) - (rm.g)(0.0)) / 1.0;
        assert!((h - 0.25).abs() < 1e-9, "{h}");
        assert!((rm.x0 - 2.0).abs() < 1e-12);
    }

    #[test]
    fn reverse_roles_involution_on_linear() {
        let c = SlopeCoeffs { b1: 0.2, b2: -0.1, f1: 0.1, f2: 0.3, ..SlopeCoeffs::zero() };
        let mut m = CoefficientModel::linear(c, 0.5, 4.0, 1.0, 1.0);
        m.sigma = Arc::new(|_, _, _, z: f64| 0.5 + 2.0 * z);
        m.g = Arc::new(|x: f64| 4.0 * x + 1.0);
        m.lipschitz_k0 = 8.0;
        let rr = reverse_roles(&reverse_roles(&m).unwrap()).unwrap();
        for (z, want) in [(0.0, 0.5), (1.0, 2.5), (-0.7, -0.9)] {
            let got = (rr.sigma)(0.3, 0.4, 0.2, z);
            assert!((got - want).abs() < 1e-9, "sigma({z}) = {got}");
        }
        for (x, want) in [(0.0, 1.0), (2.0, 9.0)] {
            let got = (rr.g)(x);
            assert!((got - want).abs() < 1e-9, "g({x}) = {got}");
        }
        let bb = (rr.b)(0.0, 1.0, 0.5, 0.25);
        assert!((bb - (0.2 * 1.0 - 0.1 * 0.5)).abs() < 1e-9, "{bb}");
    }

    #[test]
    fn reverse_roles_rejects_cubic_sigma() {
        let mut m = trivial_model();
        m.sigma = Arc::new(|_, _, _, z: f64| z * z * z);
        m.g = Arc::new(|x| x);
        assert!(matches!(reverse_roles(&m), Err(SolverError::Monotonicity(_))));
    }

    #[test]
    fn shear_bound_identities() {
        let b = phi_eps_bounds(1.0, 0.5, 0.1).unwrap();
        assert!((b.c1_bar - 1.2 / 1.1).abs() < 1e-12);
        assert!((b.c2_bar - 0.6 / 0.7).abs() < 1e-12);
        assert!(b.c1_bar * b.c2_bar < 1.0);
        // At eps = 0 the product degenerates to exactly 1.
        assert!(matches!(phi_eps_bounds(1.0, 0.5, 0.0), Err(SolverError::Bound(_))));
    }

    #[test]
    fn shear_transform_on_flat_model() {
        // b=f=0, sigma=1, g(x)=0.15(x+sin x): transformed sigma~ = z~ + eps.
        let m = CoefficientModel::new(
            Arc::new(|_, _, _, _| 0.0),
            Arc::new(|_, _, _, _| 1.0),
            Arc::new(|_, _, _, _| 0.0),
            Arc::new(|x: f64| 0.15 * (x + x.sin())),
            1.0,
            1.0,
            0.0,
        );
        let eps = 0.1;
        let (mt, bounds) = phi_eps_transform(&m, eps).unwrap();
        assert!(bounds.c1_bar * bounds.c2_bar < 1.0);
        for zt in [-0.5, 0.0, 0.8] {
            let got = (mt.sigma)(0.3, 0.2, 0.1, zt);
            assert!((got - (zt + eps)).abs() < 1e-9, "sigma~({zt}) = {got}");
        }
        // g~ slope sits in [ (eps+0)/(2eps+0), (eps+0.3)/(2eps+0.3) ].
        let h = ((mt.g)(1.0) - (mt.g)(0.0)) / 1.0;
        assert!(h > 0.49 && h < 0.81, "{h}");
        assert!((mt.b)(0.0, 0.3, 0.2, 0.1).abs() < 1e-12);
    }
}
