//! Executes experiments in dependency order and writes CSVs plus `manifest.json`.

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use greenlab::bounds::{degiorgi_level, degiorgi_trace, estimate_n0, fit_kernel, n0_spread, verify_envelope};
use greenlab::coefficients::{check_all, CoefficientField, Regime};
use greenlab::davies::{check_envelope, check_envelope_with, compute_rates, doubling_windows, evolve_weighted_energy, WeightFunction};
use greenlab::elliptic::{check_elliptic_bound, integrate_kernel};
use greenlab::expr::Expr;
use greenlab::green::{adjoint_green, duality_check, green_family, GreenKernel};
use greenlab::grid::{ParabolicCylinder, SpaceTimeGrid, SpaceTimePoint};
use greenlab::solver::{energy_norm, interpolate, solve_adjoint, solve_cauchy, verify_energy_inequality, Direction, ProblemData, Source};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{Experiment, ExperimentConfig, Prepared};
use crate::error::CliError;
use crate::output::{axes, num, sha256_hex, FileEntry, OutputDir};

#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    /// Record wall times in the manifest.
    pub timestamps: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Outcome {
    pub experiment: &'static str,
    pub pass: bool,
    pub summary: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_seconds: Option<f64>,
}

/// Metrics aggregated by sweeps; `None` when the producing experiment did not run.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Headline {
    pub kappa: Option<f64>,
    pub c: Option<f64>,
    pub n0: Option<f64>,
    pub worst_ratio: Option<f64>,
    pub elliptic_constant: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunReport {
    pub outcomes: Vec<Outcome>,
    pub headline: Headline,
    pub pass: bool,
    pub files: Vec<FileEntry>,
}

#[derive(Serialize)]
struct Versions {
    greenlab: &'static str,
    greenlab_cli: &'static str,
}

#[derive(Serialize)]
struct Manifest<'a> {
    name: &'a str,
    config_sha256: String,
    versions: Versions,
    seed: u64,
    strict: bool,
    experiments: &'a [Outcome],
    headline: &'a Headline,
    pass: bool,
    exit_code: i32,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    wall_seconds: Option<f64>,
    files: &'a [FileEntry],
}

/// The selection closed under prerequisites, in execution order.
pub fn plan(selected: &[Experiment], strict: bool) -> Vec<Experiment> {
    let mut out: Vec<Experiment> = selected.to_vec();
    for e in selected {
        out.extend_from_slice(e.requires());
    }
    if strict && !out.is_empty() {
        out.push(Experiment::Check);
    }
    out.sort();
    out.dedup();
    out
}

struct Context<'a> {
    prep: &'a Prepared,
    opts: RunOptions,
    kernels: Vec<GreenKernel>,
    headline: Headline,
}

impl Context<'_> {
    fn cfg(&self) -> &ExperimentConfig {
        &self.prep.config
    }

    fn grid(&self) -> &Arc<SpaceTimeGrid> {
        &self.prep.grid
    }

    fn coeffs(&self) -> &CoefficientField {
        &self.prep.coeffs
    }
}

fn core<T>(experiment: &'static str, r: greenlab::Result<T>) -> Result<T, CliError> {
    r.map_err(|e| CliError::from_core(experiment, e))
}

fn nodes_with_stride(grid: &SpaceTimeGrid, stride: usize) -> Vec<usize> {
    let n = grid.dim();
    (0..grid.num_nodes())
        .filter(|&node| {
            let idx = grid.node_multi_index(node);
            idx[..n].iter().all(|i| i % stride == 0)
        })
        .collect()
}

fn coords(grid: &SpaceTimeGrid, node: usize) -> Vec<String> {
    grid.node_coords(node)[..grid.dim()].iter().map(|v| num(*v)).collect()
}

fn default_data(cfg: &ExperimentConfig) -> Expr {
    let width = cfg.grid.lower.iter().zip(&cfg.grid.upper).map(|(a, b)| b - a).fold(f64::INFINITY, f64::min);
    Expr::Gaussian {
        center: cfg.center(),
        variance: (width / 16.0).powi(2),
    }
}

fn default_bump(cfg: &ExperimentConfig) -> Expr {
    let c = cfg.center();
    let factors = c
        .iter()
        .enumerate()
        .map(|(a, &ca)| {
            let width = cfg.grid.upper[a] - cfg.grid.lower[a];
            Expr::bump(a, ca, width / 8.0, 2)
        })
        .collect();
    Expr::product(factors)
}

fn run_check(ctx: &mut Context, out: &mut OutputDir) -> Result<Outcome, CliError> {
    let cfg = ctx.cfg();
    let report = core("check", check_all(ctx.coeffs(), ctx.grid(), cfg.check.probe_directions, cfg.seed))?;
    let peclet = ctx.coeffs().peclet(ctx.grid());
    if peclet > cfg.check.peclet_warn {
        log::warn!("cell Peclet number {peclet:.3} exceeds {}", cfg.check.peclet_warn);
    }
    let rows = report.rows();
    out.csv(
        "hypotheses.csv",
        &["name", "value", "threshold", "pass"].map(String::from),
        rows.iter().map(|r| vec![r.name.to_string(), num(r.value), num(r.threshold), r.pass.to_string()]),
    )?;
    let failed: Vec<&str> = rows.iter().filter(|r| !r.pass).map(|r| r.name).collect();
    Ok(Outcome {
        experiment: "check",
        pass: failed.is_empty(),
        summary: if failed.is_empty() {
            format!("all hypotheses hold (regime {})", ctx.coeffs().regime())
        } else {
            format!("failed: {}", failed.join(", "))
        },
        wall_seconds: None,
    })
}

fn run_solve(ctx: &mut Context, out: &mut OutputDir) -> Result<Outcome, CliError> {
    let cfg = ctx.cfg();
    let grid = ctx.grid();
    let s = &cfg.solve;
    let data_expr = s.data.clone().unwrap_or_else(|| default_data(cfg));
    let t_data = match s.direction {
        Direction::Forward => grid.t_start(),
        Direction::Backward => grid.t_end(),
    };
    let data = interpolate(grid, &data_expr, t_data);
    let problem = match s.direction {
        Direction::Forward => ProblemData::forward(data),
        Direction::Backward => ProblemData::backward(data),
    };
    let problem = match &s.source {
        Some(f) => problem.with_source(Source::Field(f.clone())),
        None => problem,
    };
    let opts = cfg.solver.options();
    let sol = core(
        "solve",
        match s.direction {
            Direction::Forward => solve_cauchy(&problem, ctx.coeffs(), grid, &opts),
            Direction::Backward => solve_adjoint(&problem, ctx.coeffs(), grid, &opts),
        },
    )?;
    let energy = energy_norm(&sol);
    let ratio = core("solve", verify_energy_inequality(&sol, &problem))?;
    out.csv(
        "energy.csv",
        &["sup_l2", "grad_l2", "total", "ratio"].map(String::from),
        [vec![num(energy.sup_l2), num(energy.grad_l2), num(energy.total), num(ratio)]],
    )?;
    let n = grid.dim();
    let nodes = nodes_with_stride(grid, s.node_stride);
    let mut header = vec!["step".to_string(), "t".to_string()];
    header.extend(axes("i", n));
    header.extend(axes("x", n));
    header.push("u".into());
    let steps: Vec<usize> = sol.stored_steps().into_iter().filter(|k| (k - sol.first_step()) % s.step_stride == 0 || *k == sol.last_step()).collect();
    let sol = &sol;
    let nodes = &nodes;
    let rows = steps.iter().flat_map(|&k| {
        nodes.iter().map(move |&node| {
            let idx = grid.node_multi_index(node);
            let mut row = vec![k.to_string(), num(grid.time(k))];
            row.extend(idx[..n].iter().map(|i| i.to_string()));
            row.extend(coords(grid, node));
            row.push(num(sol.value(k, node)));
            row
        })
    });
    out.csv("solution.csv", &header, rows)?;
    let pass = ratio.is_finite() && s.energy_bound.is_none_or(|b| ratio <= b);
    Ok(Outcome {
        experiment: "solve",
        pass,
        summary: format!("energy ratio {ratio:.6}"),
        wall_seconds: None,
    })
}

fn kernel_rows<'a>(k: &'a GreenKernel, nodes: &'a [usize], stride: usize) -> impl Iterator<Item = Vec<String>> + 'a {
    let grid = k.grid();
    let pole = k.snapped_pole();
    let steps = k.active_steps();
    let first = steps.first().copied().unwrap_or(0);
    let last = steps.last().copied().unwrap_or(0);
    let mode = k.mode.to_string();
    steps
        .into_iter()
        .filter(move |s| (s.abs_diff(first)) % stride == 0 || *s == last)
        .flat_map(move |step| {
            let pole = pole.clone();
            let mode = mode.clone();
            nodes.iter().map(move |&node| {
                let mut row = vec![num(grid.time(step))];
                row.extend(coords(grid, node));
                row.push(num(pole.t));
                row.extend(pole.x.iter().map(|v| num(*v)));
                row.push(num(k.value(step, node)));
                row.push(num(k.epsilon));
                row.push(mode.clone());
                row
            })
        })
}

fn green_header(n: usize) -> Vec<String> {
    let mut h = vec!["t".to_string()];
    h.extend(axes("x", n));
    h.push("s".into());
    h.extend(axes("y", n));
    h.extend(["value", "epsilon", "mode"].map(String::from));
    h
}

fn run_green(ctx: &mut Context, out: &mut OutputDir) -> Result<Outcome, CliError> {
    let cfg = ctx.cfg().clone();
    let grid = ctx.grid().clone();
    let g = &cfg.green;
    let opts = cfg.solver.options();
    let poles = cfg.poles();
    let kernels = core("green", green_family(ctx.coeffs(), &grid, &poles, g.epsilon, g.mode, &opts))?;
    let n = grid.dim();
    let nodes = nodes_with_stride(&grid, g.node_stride);
    let header = green_header(n);
    out.csv("green.csv", &header, kernels.iter().flat_map(|k| kernel_rows(k, &nodes, g.step_stride)))?;
    if kernels.len() > 1 {
        for (i, k) in kernels.iter().enumerate() {
            out.csv(&format!("kernels/pole_{i:04}.csv"), &header, kernel_rows(k, &nodes, g.step_stride))?;
        }
        let mut ih = vec!["pole".to_string(), "s".to_string()];
        ih.extend(axes("y", n));
        ih.push("file".into());
        out.csv(
            "kernels/index.csv",
            &ih,
            kernels.iter().enumerate().map(|(i, k)| {
                let p = k.snapped_pole();
                let mut row = vec![i.to_string(), num(p.t)];
                row.extend(p.x.iter().map(|v| num(*v)));
                row.push(format!("pole_{i:04}.csv"));
                row
            }),
        )?;
    }
    let finite = kernels.iter().all(|k| k.max_abs().is_finite());
    let mut pass = finite;
    let mut summary = format!("{} kernel(s)", kernels.len());
    if !g.adjoint_poles.is_empty() {
        let adjoint = core(
            "green",
            g.adjoint_poles.par_iter().map(|p| adjoint_green(ctx.coeffs(), &grid, p, g.epsilon, g.mode, &opts)).collect::<greenlab::Result<Vec<_>>>(),
        )?;
        let d = core("green", duality_check(&kernels, &adjoint))?;
        out.csv(
            "duality.csv",
            &["max_relative", "pairs", "flagged"].map(String::from),
            [vec![num(d.max_relative), d.pairs.to_string(), d.flagged.to_string()]],
        )?;
        pass &= d.max_relative <= g.duality_tol;
        summary.push_str(&format!(", duality {:.3e} over {} pairs", d.max_relative, d.pairs));
    }
    ctx.kernels = kernels;
    Ok(Outcome {
        experiment: "green",
        pass,
        summary,
        wall_seconds: None,
    })
}

fn run_fit(ctx: &mut Context, out: &mut OutputDir) -> Result<Outcome, CliError> {
    let f = ctx.cfg().fit.clone();
    let fits = core("fit", ctx.kernels.par_iter().map(|k| fit_kernel(k, &f.filter)).collect::<greenlab::Result<Vec<_>>>())?;
    out.csv(
        "fit.csv",
        &["C", "kappa", "r_squared", "n_samples", "residual_max"].map(String::from),
        fits.iter().map(|g| vec![num(g.c), num(g.kappa), num(g.r_squared), g.n_samples.to_string(), num(g.residual_max)]),
    )?;
    let checks: Vec<_> = ctx
        .kernels
        .iter()
        .zip(&fits)
        .map(|(k, g)| {
            let [c, kappa] = f.envelope.unwrap_or([g.c, g.kappa]);
            (c, kappa, verify_envelope(k, &f.filter, c, kappa, f.margin))
        })
        .collect();
    out.csv(
        "envelope.csv",
        &["pole", "C", "kappa", "margin", "n_samples", "worst_ratio", "violations", "pass"].map(String::from),
        checks.iter().enumerate().map(|(i, (c, kappa, e))| {
            vec![i.to_string(), num(*c), num(*kappa), num(f.margin), e.n_samples.to_string(), num(e.worst_ratio), e.violations.len().to_string(), e.pass.to_string()]
        }),
    )?;
    let pass = checks.iter().all(|c| c.2.pass);
    ctx.headline.kappa = fits.first().map(|g| g.kappa);
    ctx.headline.c = fits.first().map(|g| g.c);
    Ok(Outcome {
        experiment: "fit",
        pass,
        summary: fits.first().map_or(String::new(), |g| format!("C = {:.6}, kappa = {:.6}, r^2 = {:.4}", g.c, g.kappa, g.r_squared)),
        wall_seconds: None,
    })
}

fn run_davies(ctx: &mut Context, out: &mut OutputDir) -> Result<Outcome, CliError> {
    let cfg = ctx.cfg().clone();
    let grid = ctx.grid().clone();
    let d = &cfg.davies;
    let n = grid.dim();
    let coeffs = ctx.coeffs();
    let rates = core("davies", compute_rates(coeffs.nu(), coeffs.theta(), coeffs.regime(), d.cn))?;
    let direction = if d.direction.is_empty() {
        let mut e = vec![0.0; n];
        e[0] = 1.0;
        e
    } else {
        d.direction.clone()
    };
    let data = interpolate(&grid, &d.data.clone().unwrap_or_else(|| default_bump(&cfg)), grid.t_start());
    let opts = cfg.solver.options();
    let results = core(
        "davies",
        d.gamma1
            .par_iter()
            .map(|&gamma| {
                let psi = WeightFunction::linear(gamma, &direction)?;
                let tr = evolve_weighted_energy(coeffs, &grid, &psi, &data, 0, grid.num_steps(), &opts)?;
                let rep = check_envelope(&tr, &rates, d.slack)?;
                let windows = match rates.delta_window(gamma) {
                    Some(delta) if delta.is_finite() => doubling_windows(&tr, delta)?,
                    _ => Vec::new(),
                };
                let true_rate = d.true_rate.map(|lambda| check_envelope_with(&tr, lambda, 0.0, d.true_rate_factor, 0.0)).transpose()?;
                Ok((gamma, rep, windows, true_rate))
            })
            .collect::<greenlab::Result<Vec<_>>>(),
    )?;
    out.csv(
        "davies.csv",
        &["gamma1", "t", "I", "envelope_value", "ratio"].map(String::from),
        results.iter().flat_map(|(gamma, rep, _, _)| {
            let tr = &rep.trajectory;
            (0..tr.values.len()).map(move |i| vec![num(*gamma), num(tr.times[i]), num(tr.values[i]), num(rep.envelope[i]), num(rep.ratios[i])])
        }),
    )?;
    let regime = match rates.regime {
        Regime::Supercritical => "p>n",
        Regime::Endpoint => "p=n",
    };
    out.csv(
        "rates.csv",
        &["gamma1", "regime", "nu", "theta", "cn", "lambda", "mu", "delta_window"].map(String::from),
        results.iter().map(|(gamma, ..)| {
            vec![
                num(*gamma),
                regime.to_string(),
                num(rates.nu),
                num(rates.theta),
                num(rates.cn),
                num(rates.lambda),
                num(rates.mu),
                rates.delta_window(*gamma).map_or_else(|| "NaN".to_string(), num),
            ]
        }),
    )?;
    let worst = results.iter().map(|r| r.1.worst_ratio).fold(0.0, f64::max);
    let envelope_ok = results.iter().all(|r| r.1.envelope_ok);
    let windows_ok = results.iter().all(|r| r.2.iter().all(|w| w.ok));
    let true_ok = results.iter().all(|r| r.3.as_ref().is_none_or(|t| t.envelope_ok));
    ctx.headline.worst_ratio = Some(worst);
    Ok(Outcome {
        experiment: "davies",
        pass: envelope_ok && windows_ok && true_ok,
        summary: format!("worst ratio {worst:.6} (prefactor {}), windows ok: {windows_ok}, true rate ok: {true_ok}", rates.prefactor()),
        wall_seconds: None,
    })
}

fn run_degiorgi(ctx: &mut Context, out: &mut OutputDir) -> Result<Outcome, CliError> {
    let cfg = ctx.cfg().clone();
    let dg = &cfg.degiorgi;
    let kernel = ctx.kernels.first().ok_or_else(|| CliError::Schema("degiorgi needs at least one kernel".into()))?;
    let grid = kernel.grid();
    let n = grid.dim();
    let pole = kernel.snapped_pole();
    let at = |r: f64| SpaceTimePoint::new(pole.t + 2.0 * r * r, &pole.x);
    // The delta or the source cylinder of the kernel lies before every cylinder used here.
    let source = Source::None;
    let cylinders: Vec<ParabolicCylinder> = dg.n0_radii.iter().map(|&r| ParabolicCylinder::past(at(r), r)).collect();
    let reports = core("degiorgi", estimate_n0(kernel.solution(), &source, &cylinders))?;
    let mut header = vec!["r".to_string(), "t0".to_string()];
    header.extend(axes("x0", n));
    header.push("N0".into());
    out.csv(
        "n0.csv",
        &header,
        reports.iter().map(|r| {
            let mut row = vec![num(r.r), num(r.center.t)];
            row.extend(r.center.x.iter().map(|v| num(*v)));
            row.push(num(r.n0));
            row
        }),
    )?;
    let spread = n0_spread(&reports);
    let cyl = ParabolicCylinder::past(at(dg.radius), dg.radius);
    let k = core("degiorgi", degiorgi_level(kernel.solution(), &source, &cyl, dg.delta))?;
    let trace = core("degiorgi", degiorgi_trace(kernel.solution(), &cyl, k, dg.levels))?;
    out.csv(
        "degiorgi.csv",
        &["m", "r_m", "k_m", "Y_m"].map(String::from),
        trace.levels.iter().map(|l| vec![l.m.to_string(), num(l.r_m), num(l.k_m), num(l.y_m)]),
    )?;
    let chebyshev = trace.levels.iter().all(|l| l.chebyshev_ok);
    ctx.headline.n0 = reports.iter().map(|r| r.n0).reduce(f64::max);
    Ok(Outcome {
        experiment: "degiorgi",
        pass: spread <= dg.n0_tol && trace.converged && chebyshev,
        summary: format!(
            "N0 spread {spread:.4}, Y_{}/Y_1 = {:.3e}, Chebyshev steps hold: {chebyshev}",
            dg.levels,
            trace.levels.last().map_or(f64::NAN, |l| l.y_m) / trace.levels[0].y_m,
        ),
        wall_seconds: None,
    })
}

fn run_elliptic(ctx: &mut Context, out: &mut OutputDir) -> Result<Outcome, CliError> {
    let cfg = ctx.cfg().clone();
    let e = &cfg.elliptic;
    let pole = e.pole.clone().unwrap_or_else(|| cfg.center());
    let green = core("elliptic", integrate_kernel(ctx.coeffs(), ctx.grid(), &pole, &e.quadrature, &e.sampling, &cfg.solver.options()))?;
    let bound = core("elliptic", check_elliptic_bound(&green))?;
    let n = ctx.grid().dim();
    let mut header = axes("x", n);
    header.extend(axes("y", n));
    header.extend(["G_value", "tail_bound", "rho"].map(String::from));
    out.csv(
        "elliptic.csv",
        &header,
        green.samples.iter().map(|s| {
            let mut row: Vec<String> = s.x.iter().map(|v| num(*v)).collect();
            row.extend(green.pole.iter().map(|v| num(*v)));
            row.extend([num(s.value), num(s.tail_bound), num(s.rho)]);
            row
        }),
    )?;
    let mut pass = bound.constant.is_finite() && green.samples.iter().all(|s| s.tail_bound.is_finite());
    let mut summary = format!("constant {:.6} over {} samples, t_cut {:.3}", bound.constant, bound.samples, green.t_cut);
    if let Some(expected) = e.expected_constant {
        let dev = bound.constant / expected - 1.0;
        pass &= dev.abs() <= e.tolerance;
        summary.push_str(&format!(", deviation {dev:+.4}"));
    }
    ctx.headline.elliptic_constant = Some(bound.constant);
    Ok(Outcome {
        experiment: "elliptic",
        pass,
        summary,
        wall_seconds: None,
    })
}

fn write_manifest(out: &mut OutputDir, cfg: &ExperimentConfig, outcomes: &[Outcome], headline: &Headline, exit_code: i32, error: Option<String>, wall: Option<f64>) -> Result<Vec<FileEntry>, CliError> {
    let files = out.entries()?;
    let manifest = Manifest {
        name: &cfg.name,
        config_sha256: sha256_hex(cfg.to_toml().as_bytes()),
        versions: Versions {
            greenlab: greenlab::VERSION,
            greenlab_cli: env!("CARGO_PKG_VERSION"),
        },
        seed: cfg.seed,
        strict: cfg.strict,
        experiments: outcomes,
        headline,
        pass: exit_code == 0,
        exit_code,
        error,
        wall_seconds: wall,
        files: &files,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Io(e.to_string()))?;
    std::fs::write(out.root().join("manifest.json"), text + "\n")?;
    Ok(files)
}

/// Runs `selected` (plus prerequisites) into `dir`. Check failures give a
/// report with `pass = false`; strict hypothesis failures and numerical
/// aborts are errors, recorded in the manifest before returning.
pub fn run(prep: &Prepared, selected: &[Experiment], dir: &Path, opts: RunOptions) -> Result<RunReport, CliError> {
    let started = Instant::now();
    let mut out = OutputDir::create(dir)?;
    let cfg = &prep.config;
    let steps = plan(selected, cfg.strict);
    if !steps.is_empty() {
        out.text("config.toml", &cfg.to_toml())?;
    }
    let mut ctx = Context {
        prep,
        opts,
        kernels: Vec::new(),
        headline: Headline::default(),
    };
    let mut outcomes = Vec::new();
    let mut failure = None;
    for exp in steps {
        let t0 = Instant::now();
        log::info!("running {}", exp.name());
        let result = match exp {
            Experiment::Check => run_check(&mut ctx, &mut out),
            Experiment::Solve => run_solve(&mut ctx, &mut out),
            Experiment::Green => run_green(&mut ctx, &mut out),
            Experiment::Fit => run_fit(&mut ctx, &mut out),
            Experiment::Davies => run_davies(&mut ctx, &mut out),
            Experiment::Degiorgi => run_degiorgi(&mut ctx, &mut out),
            Experiment::Elliptic => run_elliptic(&mut ctx, &mut out),
        };
        match result {
            Ok(mut o) => {
                o.wall_seconds = ctx.opts.timestamps.then(|| t0.elapsed().as_secs_f64());
                log::info!("{}: {} ({})", o.experiment, if o.pass { "pass" } else { "FAIL" }, o.summary);
                let hard = exp == Experiment::Check && cfg.strict && !o.pass;
                let summary = o.summary.clone();
                outcomes.push(o);
                if hard {
                    failure = Some(CliError::Hypothesis(summary));
                    break;
                }
            }
            Err(e) => {
                failure = Some(e);
                break;
            }
        }
    }
    let pass = failure.is_none() && outcomes.iter().all(|o| o.pass);
    let exit_code = match &failure {
        Some(e) => e.exit_code(),
        None if pass => 0,
        None => 1,
    };
    let wall = opts.timestamps.then(|| started.elapsed().as_secs_f64());
    let files = write_manifest(&mut out, cfg, &outcomes, &ctx.headline, exit_code, failure.as_ref().map(|e| e.to_string()), wall)?;
    match failure {
        Some(e) => Err(e),
        None => Ok(RunReport {
            outcomes,
            headline: ctx.headline,
            pass,
            files,
        }),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub value: f64,
    pub report: RunReport,
}

/// Runs the config once per axis value, concurrently, in `dir/run_NNN`, and
/// aggregates the headline metrics into `dir/sweep.csv`.
pub fn sweep(base: &ExperimentConfig, axis: &str, values: &[f64], dir: &Path, opts: RunOptions) -> Result<Vec<SweepRow>, CliError> {
    if values.is_empty() {
        return Err(CliError::InvalidAxis(format!("{axis}: no sweep values")));
    }
    let prepared = values
        .iter()
        .map(|&v| base.with_override(axis, v).and_then(ExperimentConfig::prepare))
        .collect::<Result<Vec<_>, _>>()?;
    let started = Instant::now();
    let mut out = OutputDir::create(dir)?;
    let results: Vec<Result<RunReport, CliError>> = prepared
        .par_iter()
        .enumerate()
        .map(|(i, prep)| run(prep, &prep.config.experiments, &dir.join(format!("run_{i:03}")), opts))
        .collect();
    let mut rows = Vec::new();
    let mut first_error = None;
    for (i, (r, &value)) in results.into_iter().zip(values).enumerate() {
        match r {
            Ok(report) => {
                for f in &report.files {
                    out.adopt(&format!("run_{i:03}/{}", f.path));
                }
                out.adopt(&format!("run_{i:03}/manifest.json"));
                rows.push(SweepRow { value, report });
            }
            Err(e) => {
                out.adopt(&format!("run_{i:03}/manifest.json"));
                first_error.get_or_insert(e);
            }
        }
    }
    let opt = |v: Option<f64>| v.map_or_else(|| "NaN".to_string(), num);
    out.csv(
        "sweep.csv",
        &["run", axis, "kappa", "C", "N0", "worst_ratio", "elliptic_constant", "pass"].map(String::from),
        rows.iter().enumerate().map(|(i, r)| {
            let h = &r.report.headline;
            vec![
                format!("run_{i:03}"),
                num(r.value),
                opt(h.kappa),
                opt(h.c),
                opt(h.n0),
                opt(h.worst_ratio),
                opt(h.elliptic_constant),
                r.report.pass.to_string(),
            ]
        }),
    )?;
    let pass = first_error.is_none() && rows.iter().all(|r| r.report.pass);
    let exit_code = match &first_error {
        Some(e) => e.exit_code(),
        None if pass => 0,
        None => 1,
    };
    let outcomes: Vec<Outcome> = Vec::new();
    write_manifest(
        &mut out,
        base,
        &outcomes,
        &Headline::default(),
        exit_code,
        first_error.as_ref().map(|e| e.to_string()),
        opts.timestamps.then(|| started.elapsed().as_secs_f64()),
    )?;
    match first_error {
        Some(e) => Err(e),
        None => Ok(rows),
    }
}
