use clap::{Parser, Subcommand};
use serde_json::{json, Value};
use std::path::PathBuf;

use fbsde::classifier::{classify_spec, p_max, psi};
use fbsde::dominating::{integrate_dominating, IntegrateOpts};
use fbsde::model::{slope_box_from_model, Interval, ProblemSpec, SlopeCoeffs};
use fbsde::oracle::linear_oracle;
use fbsde::report::{
    classification_json, dominating_json, field_cache_key, load_cached_field, run_report,
    sha256_hex, store_cached_field,
};
use fbsde::solver::{forward_verify, solve_field, DecouplingField, SolveOptions};

#[derive(Parser)]
#[command(name = "fbsde", version, about = "Solvability analysis and decoupling fields for 1-D coupled FBSDEs")]
struct Cli {
    /// Write the JSON report here instead of stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Classify solvability of a problem spec.
    Classify {
        spec: Option<PathBuf>,
        #[arg(long = "T")]
        t: Option<f64>,
        /// Classify every .json spec in a directory.
        #[arg(long)]
        batch: Option<PathBuf>,
    },
    /// Integrate the dominating ODE pair up to a horizon.
    Dominate {
        spec: PathBuf,
        #[arg(long = "T")]
        t: f64,
        /// Write t, y_upper, y_lower rows here.
        #[arg(long)]
        emit_csv: Option<PathBuf>,
    },
    /// Solve for the decoupling field on a grid.
    Solve {
        spec: PathBuf,
        #[arg(long)]
        dt: Option<f64>,
        #[arg(long)]
        dx: Option<f64>,
        /// Spatial half-width around x0.
        #[arg(long)]
        band: Option<f64>,
        /// Write t, x, u, ux rows here.
        #[arg(long)]
        emit_field: Option<PathBuf>,
        #[arg(long)]
        no_cache: bool,
    },
    /// Solve, then run a forward Monte Carlo consistency pass.
    Verify {
        spec: PathBuf,
        #[arg(long)]
        paths: usize,
        #[arg(long)]
        seed: u64,
    },
    /// Constant-coefficient linear reference solution.
    Oracle {
        spec: PathBuf,
        #[arg(long = "T")]
        t: Option<f64>,
    },
    /// Moment-bound constants psi1, psi2 at a given p.
    Psi {
        #[arg(long)]
        p: f64,
    },
    /// Largest admissible moment exponent for given c1, c3.
    Pmax {
        #[arg(long)]
        c1: f64,
        #[arg(long)]
        c3: f64,
    },
    /// Generator envelope values at a given slope y.
    Envelope {
        spec: PathBuf,
        #[arg(long)]
        y: f64,
    },
    /// Run the full acceptance suite.
    Selftest,
}

fn read_spec(path: &PathBuf) -> Result<(ProblemSpec, String), String> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    let spec = fbsde::model::parse_spec(&text).map_err(|e| e.to_string())?;
    Ok((spec, sha256_hex(text.as_bytes())))
}

/// Resolves the coefficient box: declared, or sampled from the model.
fn spec_box(spec: &ProblemSpec) -> Result<fbsde::model::CoefficientBox, String> {
    match (&spec.bounds, &spec.model) {
        (Some(b), _) => Ok(*b),
        (None, Some(m)) => slope_box_from_model(m, m.domain, 256).map_err(|e| e.to_string()),
        (None, None) => Err("spec carries neither a coefficient box nor a model".into()),
    }
}

fn point_coeffs(bounds: &fbsde::model::CoefficientBox) -> Result<(SlopeCoeffs, f64), String> {
    let tol = 1e-9;
    if bounds.intervals().iter().any(|iv| iv.width() > tol) || bounds.h.width() > tol {
        return Err("constant-coefficient oracle needs a point coefficient box".into());
    }
    let snap = |iv: Interval| {
        let v = 0.5 * (iv.lo + iv.hi);
        if v.abs() <= tol {
            0.0
        } else {
            v
        }
    };
    let [b1, b2, b3, s1, s2, s3, f1, f2, f3] = bounds.intervals().map(snap);
    Ok((SlopeCoeffs { b1, b2, b3, s1, s2, s3, f1, f2, f3 }, snap(bounds.h)))
}

fn solve_options(spec: &ProblemSpec, dt: Option<f64>, dx: Option<f64>, band: Option<f64>) -> SolveOptions {
    let o = &spec.options;
    let half = band.or(o.band);
    let band = half.and_then(|w| spec.model.as_ref().map(|m| (m.x0 - w, m.x0 + w)));
    SolveOptions { dt: dt.unwrap_or(o.dt), dx: dx.unwrap_or(o.dx), band, ..SolveOptions::default() }
}

fn field_json(field: &DecouplingField, m: &fbsde::model::CoefficientModel, cached: bool) -> Value {
    json!({
        "y0": field.eval(0.0, m.x0),
        "ux0": field.eval_ux(0.0, m.x0),
        "t_nodes": field.t_grid.len(),
        "x_nodes": field.x_grid.len(),
        "delta": field.meta.delta,
        "picard_iters": field.meta.picard_iters,
        "fp_residual_max": field.meta.fp_residual_max,
        "fp_iters_max": field.meta.fp_iters_max,
        "cached": cached,
    })
}

fn emit_field_csv(path: &PathBuf, field: &DecouplingField) -> Result<(), String> {
    let mut out = String::from("t,x,u,ux\n");
    for (i, &t) in field.t_grid.iter().enumerate() {
        for (j, &x) in field.x_grid.iter().enumerate() {
            out.push_str(&format!("{t},{x},{},{}\n", field.u[i][j], field.ux[i][j]));
        }
    }
    std::fs::write(path, out).map_err(|e| e.to_string())
}

/// Solve with the on-disk cache keyed by spec text and grid options.
fn cached_solve(
    spec: &ProblemSpec,
    spec_text_hash: &str,
    opts: &SolveOptions,
    no_cache: bool,
) -> Result<(DecouplingField, bool), String> {
    let m = spec.model.as_ref().ok_or("solve needs a \"model\" entry in the spec")?;
    let fingerprint = format!("dt={};dx={};band={:?}", opts.dt, opts.dx, opts.band);
    let key = field_cache_key(spec_text_hash, &fingerprint);
    if !no_cache {
        if let Some(field) = load_cached_field(&key) {
            return Ok((field, true));
        }
    }
    let field = solve_field(m, opts, None).map_err(|e| e.to_string())?;
    if !no_cache {
        let _ = store_cached_field(&key, &field);
    }
    Ok((field, false))
}

fn run(cmd: &Command) -> (String, Option<String>, Result<Value, String>) {
    match cmd {
        Command::Classify { spec, t, batch } => {
            if let Some(dir) = batch {
                return ("classify".into(), None, classify_batch(dir, *t));
            }
            let Some(path) = spec else {
                return ("classify".into(), None, Err("need a spec file or --batch".into()));
            };
            match read_spec(path) {
                Ok((spec, hash)) => {
                    let res = classify_spec(&spec, *t)
                        .map(|cl| classification_json(&cl))
                        .map_err(|e| e.to_string());
                    ("classify".into(), Some(hash), res)
                }
                Err(e) => ("classify".into(), None, Err(e)),
            }
        }
        Command::Dominate { spec, t, emit_csv } => {
            let (spec, hash) = match read_spec(spec) {
                Ok(v) => v,
                Err(e) => return ("dominate".into(), None, Err(e)),
            };
            let res = (|| {
                let bounds = spec_box(&spec)?;
                let y_range = bounds.h.widened(0.0, 1.0);
                let env = fbsde::characteristic::envelope_from_box(&bounds, y_range)
                    .map_err(|e| e.to_string())?;
                let opts = IntegrateOpts {
                    event_tol: spec.options.event_tol.max(1e-10),
                    ..IntegrateOpts::default()
                };
                let sol = integrate_dominating(&env, bounds.h.hi, bounds.h.lo, *t, &opts)
                    .map_err(|e| e.to_string())?;
                if let Some(path) = emit_csv {
                    let mut out = String::from("t,y_upper,y_lower\n");
                    for (i, &ti) in sol.t_grid.iter().enumerate() {
                        out.push_str(&format!("{ti},{},{}\n", sol.y_upper[i], sol.y_lower[i]));
                    }
                    std::fs::write(path, out).map_err(|e| e.to_string())?;
                }
                Ok(dominating_json(&sol))
            })();
            ("dominate".into(), Some(hash), res)
        }
        Command::Solve { spec, dt, dx, band, emit_field, no_cache } => {
            let (spec, hash) = match read_spec(spec) {
                Ok(v) => v,
                Err(e) => return ("solve".into(), None, Err(e)),
            };
            let res = (|| {
                let opts = solve_options(&spec, *dt, *dx, *band);
                let (field, cached) = cached_solve(&spec, &hash, &opts, *no_cache)?;
                if let Some(path) = emit_field {
                    emit_field_csv(path, &field)?;
                }
                Ok(field_json(&field, spec.model.as_ref().unwrap(), cached))
            })();
            ("solve".into(), Some(hash), res)
        }
        Command::Verify { spec, paths, seed } => {
            let (spec, hash) = match read_spec(spec) {
                Ok(v) => v,
                Err(e) => return ("verify".into(), None, Err(e)),
            };
            let res = (|| {
                let opts = solve_options(&spec, None, None, None);
                let (field, cached) = cached_solve(&spec, &hash, &opts, false)?;
                let m = spec.model.as_ref().unwrap();
                let rep = forward_verify(&field, m, *paths, *seed).map_err(|e| e.to_string())?;
                let stats = rep.path_stats.map(|s| {
                    json!({
                        "mean_X_T": s.mean_x_t,
                        "var_X_T": s.var_x_t,
                        "terminal_residual": s.terminal_residual,
                        "bsde_residual": s.bsde_residual,
                        "clamped_fraction": s.clamped_fraction,
                    })
                });
                Ok(json!({
                    "y0": rep.y0,
                    "z0": rep.z0,
                    "paths": paths,
                    "seed": seed,
                    "cached": cached,
                    "path_stats": stats,
                }))
            })();
            ("verify".into(), Some(hash), res)
        }
        Command::Oracle { spec, t } => {
            let (spec, hash) = match read_spec(spec) {
                Ok(v) => v,
                Err(e) => return ("oracle".into(), None, Err(e)),
            };
            let res = (|| {
                let bounds = spec_box(&spec)?;
                let (c, h) = point_coeffs(&bounds)?;
                let t_horizon = t
                    .or_else(|| spec.model.as_ref().map(|m| m.horizon_t))
                    .ok_or("need --T or a model horizon")?;
                let x0 = spec.model.as_ref().map_or(1.0, |m| m.x0);
                let sol = linear_oracle(c, h, t_horizon).map_err(|e| e.to_string())?;
                Ok(json!({
                    "yhat0": sol.yhat(0.0),
                    "meanX_T": sol.mean_x(t_horizon, x0),
                }))
            })();
            ("oracle".into(), Some(hash), res)
        }
        Command::Psi { p } => {
            let res = psi(*p)
                .map(|(p1, p2, _)| json!({ "psi1": p1, "psi2": p2 }))
                .map_err(|e| e.to_string());
            ("psi".into(), None, res)
        }
        Command::Pmax { c1, c3 } => {
            let res = p_max(*c1, *c3)
                .map(|p| {
                    if p.is_finite() {
                        json!({ "p_max": p })
                    } else {
                        json!({ "p_max": Value::Null, "p_max_unbounded": true })
                    }
                })
                .map_err(|e| e.to_string());
            ("pmax".into(), None, res)
        }
        Command::Envelope { spec, y } => {
            let (spec, hash) = match read_spec(spec) {
                Ok(v) => v,
                Err(e) => return ("envelope".into(), None, Err(e)),
            };
            let res = (|| {
                let bounds = spec_box(&spec)?;
                let env =
                    fbsde::characteristic::envelope_from_box(&bounds, Interval::point(*y))
                        .map_err(|e| e.to_string())?;
                Ok(json!({
                    "F_upper": env.upper(*y).map_err(|e| e.to_string())?,
                    "F_lower": env.lower(*y).map_err(|e| e.to_string())?,
                }))
            })();
            ("envelope".into(), Some(hash), res)
        }
        Command::Selftest => {
            let results = fbsde::selftest::run_all();
            let mut all_pass = true;
            let mut items = Vec::new();
            for r in &results {
                let status = if r.pass { "PASS" } else { "FAIL" };
                eprintln!("[{status}] criterion {:2}: {} ({})", r.id, r.name, r.detail);
                all_pass &= r.pass;
                items.push(json!({
                    "id": r.id,
                    "name": r.name,
                    "pass": r.pass,
                    "detail": r.detail,
                }));
            }
            let payload = json!({ "pass": all_pass, "criteria": items });
            let res = if all_pass { Ok(payload) } else { Err("acceptance criteria failed".into()) };
            ("selftest".into(), None, res)
        }
    }
}

/// Classifies every .json file in a directory, one worker thread per spec.
fn classify_batch(dir: &PathBuf, t: Option<f64>) -> Result<Value, String> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| format!("cannot read {}: {e}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    let results: Vec<Value> = std::thread::scope(|scope| {
        let handles: Vec<_> = paths
            .iter()
            .map(|path| {
                scope.spawn(move || {
                    let item = read_spec(path)
                        .and_then(|(spec, _)| classify_spec(&spec, t).map_err(|e| e.to_string()));
                    match item {
                        Ok(cl) => json!({
                            "file": path.display().to_string(),
                            "classification": classification_json(&cl),
                        }),
                        Err(e) => {
                            json!({ "file": path.display().to_string(), "error": e })
                        }
                    }
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    Ok(json!({ "specs": results }))
}

fn main() {
    let cli = Cli::parse();
    let (command, hash, res) = run(&cli.command);
    let failed = res.is_err();
    let report = match res {
        Ok(payload) => run_report(&command, hash.as_deref(), payload, None),
        Err(e) => run_report(&command, hash.as_deref(), Value::Null, Some(e)),
    };
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    match &cli.out {
        Some(path) => {
            if let Err(e) = std::fs::write(path, text + "\n") {
                eprintln!("cannot write {}: {e}", path.display());
                std::process::exit(1);
            }
        }
        None => println!("{text}"),
    }
    if failed {
        std::process::exit(1);
    }
}
