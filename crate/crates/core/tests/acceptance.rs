//! Acceptance suite: one PASS/FAIL line per criterion, with the measured values.
//!
//! Run with `cargo test -p greenlab --test acceptance [-- name-filter]`. The process exits 0 even
//! when a criterion is red so that the report is always printed in full.

use std::f64::consts::PI;
use std::sync::Arc;
use std::time::Instant;

use greenlab::bounds::{degiorgi_level, degiorgi_trace, estimate_n0, fit_kernel, largest_convergent_delta, rescale_coefficients, verify_envelope, SampleFilter};
use greenlab::coefficients::{check_all, check_h2, check_h3, mixed_norm, CoefficientField, CoefficientSpec, Exponent, MatrixField, Regime};
use greenlab::davies::{check_envelope, check_envelope_with, compute_rates, doubling_windows, evolve_weighted_energy, WeightFunction};
use greenlab::elliptic::{calibration_error, check_elliptic_bound, integrate_kernel, EllipticSampling, TimeQuadrature};
use greenlab::expr::{Expr, Var};
use greenlab::green::{adjoint_green, approximate_green, duality_check, green_matrix, representation_check, GreenKernel, SourceMode};
use greenlab::grid::{GridConfig, ParabolicCylinder, SpaceTimeGrid, SpaceTimePoint};
use greenlab::solver::{energy_norm, interpolate, solve_cauchy, verify_energy_inequality, ProblemData, SolverOptions, Source};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = greenlab::Result<(bool, String)>;

fn grid(n: usize, lo: f64, hi: f64, cells: usize, t_end: f64, dt: f64) -> Arc<SpaceTimeGrid> {
    Arc::new(SpaceTimeGrid::build(&GridConfig::cube(n, lo, hi, cells, 0.0, t_end, dt)).unwrap())
}

fn origin(n: usize) -> SpaceTimePoint {
    SpaceTimePoint::new(0.0, &vec![0.0; n])
}

fn heat_kernel(a: f64, t: f64, x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let r2: f64 = x.iter().map(|v| v * v).sum();
    (4.0 * PI * a * t).powf(-n / 2.0) * (-r2 / (4.0 * a * t)).exp()
}

/// `max_t ||G - K||_inf / ||K||_inf` over `t - s` in `[t_lo, t_hi]`.
fn worst_linf(k: &GreenKernel, a: f64, t_lo: f64, t_hi: f64) -> f64 {
    let g = k.grid();
    let s = k.snapped_pole();
    let mut worst = 0.0f64;
    for step in k.active_steps() {
        let tau = g.time(step) - s.t;
        if tau < t_lo - 1e-12 || tau > t_hi + 1e-12 {
            continue;
        }
        let (mut num, mut den) = (0.0f64, 0.0f64);
        for &node in g.interior_nodes() {
            let x: Vec<f64> = g.node_coords(node)[..g.dim()].iter().zip(&s.x).map(|(a, b)| a - b).collect();
            let e = heat_kernel(a, tau, &x);
            num = num.max((k.value(step, node) - e).abs());
            den = den.max(e);
        }
        worst = worst.max(num / den);
    }
    worst
}

fn filter(xi_max: f64) -> SampleFilter {
    SampleFilter {
        t_min: Some(0.05),
        t_max: Some(0.5),
        xi_max,
        ..SampleFilter::default()
    }
}

fn spread(v: &[f64]) -> f64 {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = v.iter().cloned().fold(f64::INFINITY, f64::min);
    max / min - 1.0
}

fn spec(n: usize, nu: f64, p: f64, q: f64) -> CoefficientSpec {
    CoefficientSpec {
        dim: n,
        a: MatrixField::identity(),
        b: vec![],
        c: vec![],
        d: None,
        add_div_b: false,
        nu,
        theta: 0.0,
        p: Exponent(p),
        q: Exponent(q),
    }
}

/// Divergence-free `b = beta curl((1 - x^2)_+^3 (1 - y^2)_+^3)`, `||b||_{L4,4((0,1) x R^2)} = 1`.
fn drift_field() -> CoefficientField {
    let beta = 3.6594898883;
    let bumps = |a: usize, b: usize| vec![Expr::x(a), Expr::bump(a, 0.0, 1.0, 2), Expr::bump(b, 0.0, 1.0, 3)];
    let mut s = spec(2, 0.5, 4.0, 4.0);
    s.theta = 1.0;
    s.b = vec![
        Expr::product([vec![Expr::constant(-beta)], bumps(1, 0)].concat()),
        Expr::product([vec![Expr::constant(beta)], bumps(0, 1)].concat()),
    ];
    CoefficientField::new(s).unwrap()
}

fn heat_recovery() -> Outcome {
    let opts = SolverOptions::default();
    let mut pass = true;
    let mut detail = vec![];
    for (n, g) in [(1, grid(1, -8.0, 8.0, 512, 0.5, 1e-3)), (2, grid(2, -4.0, 4.0, 128, 0.5, 1e-3))] {
        let k = approximate_green(&CoefficientField::heat(n, 1.0), &g, &origin(n), None, SourceMode::Point, &opts)?;
        let err = worst_linf(&k, 1.0, 0.05, 0.5);
        let fit = fit_kernel(&k, &filter(12.0))?;
        let c_rel = fit.c / (4.0 * PI).powf(-(n as f64) / 2.0) - 1.0;
        pass &= err <= 0.05 && (0.23..=0.26).contains(&fit.kappa) && c_rel.abs() <= 0.1;
        detail.push(format!("n={n}: Linf {err:.4}, kappa {:.4}, C/C_heat - 1 = {c_rel:+.4}", fit.kappa));
    }
    Ok((pass, detail.join("; ")))
}

fn scaled_diffusion() -> Outcome {
    let g = grid(1, -8.0, 8.0, 512, 0.5, 1e-3);
    let k = approximate_green(&CoefficientField::heat(1, 2.0), &g, &origin(1), None, SourceMode::Point, &SolverOptions::default())?;
    // Same kappa * xi cut as the unit-diffusion fit.
    let fit = fit_kernel(&k, &filter(24.0))?;
    Ok(((0.115..=0.135).contains(&fit.kappa), format!("kappa {:.4} (oracle 0.125)", fit.kappa)))
}

fn critical_drift() -> Outcome {
    let g = grid(2, -4.0, 4.0, 128, 0.5, 1e-3);
    let base = drift_field();
    let h = check_all(&base, &g, 8, 0)?;
    let opts = SolverOptions::default();
    let f = filter(12.0);
    let mut fits = vec![];
    let mut kernels = vec![];
    for r in [0.5, 1.0, 2.0] {
        let coeffs = rescale_coefficients(&base, r)?;
        // Off the symmetry axes of the drift, so its first-order effect does not cancel.
        let k = approximate_green(&coeffs, &g, &SpaceTimePoint::new(0.0, &[0.375, 0.125]), None, SourceMode::Point, &opts)?;
        fits.push(fit_kernel(&k, &f)?);
        kernels.push(k);
    }
    // Every rescaled kernel against the envelope fitted at r = 1.
    let (c1, kappa1) = (fits[1].c, fits[1].kappa);
    let checks: Vec<_> = kernels.iter().map(|k| verify_envelope(k, &f, c1, kappa1, 0.1)).collect();
    let cs: Vec<f64> = fits.iter().map(|x| x.c).collect();
    let kappas: Vec<f64> = fits.iter().map(|x| x.kappa).collect();
    let pass = h.all_pass() && checks.iter().all(|c| c.pass) && spread(&cs) <= 0.15 && spread(&kappas) <= 0.15;
    let detail = format!(
        "(H) {}, ||b||_4,4 = {:.4}; r = 1/2, 1, 2: C {:.4?}, kappa {:.4?}; spread C {:.4}, kappa {:.4}; envelope worst ratio {:.4?}",
        h.all_pass(),
        h.h2_mixed_norm,
        cs,
        kappas,
        spread(&cs),
        spread(&kappas),
        checks.iter().map(|c| c.worst_ratio).collect::<Vec<_>>(),
    );
    Ok((pass, detail))
}

/// An (H)-passing field on `(-1, 1)^2`: rotated anisotropic `A`, a compact
/// divergence-free drift and a non-negative constant `d`.
fn draw(rng: &mut ChaCha8Rng, g: &SpaceTimeGrid) -> greenlab::Result<CoefficientField> {
    let mut s = spec(2, 0.5, 4.0, 4.0);
    s.theta = 1.0;
    s.a = MatrixField::RotatedDiagonal {
        angle: rng.gen_range(0.0..PI),
        diagonal: [rng.gen_range(0.6..1.3), rng.gen_range(0.6..1.3)],
        skew: rng.gen_range(-0.3..0.3),
    };
    let rho = rng.gen_range(0.4..0.7);
    let stream = Expr::product(vec![Expr::bump(0, rng.gen_range(-0.3..0.3), rho, 3), Expr::bump(1, rng.gen_range(-0.3..0.3), rho, 3)]);
    let b = vec![stream.derivative(Var::X(1))?, stream.derivative(Var::X(0))?.scaled(-1.0)];
    s.b = b.clone();
    let unit = check_h2(&CoefficientField::new(s.clone())?, g)?.h2_mixed_norm;
    let theta: f64 = rng.gen_range(0.2..1.0);
    s.b = b.into_iter().map(|e| e.scaled(theta / unit)).collect();
    s.d = Some(Expr::constant(rng.gen_range(0.0..1.0)));
    CoefficientField::new(s)
}

fn energy_inequality() -> Outcome {
    let coarse = grid(2, -1.0, 1.0, 32, 0.25, 0.01);
    let fine = grid(2, -1.0, 1.0, 64, 0.25, 0.005);
    let opts = SolverOptions::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let ratio = |coeffs: &CoefficientField, g: &Arc<SpaceTimeGrid>, data: &Expr, f: &Option<Expr>| -> greenlab::Result<f64> {
        let mut p = ProblemData::forward(interpolate(g, data, 0.0));
        if let Some(f) = f {
            p = p.with_source(Source::Field(f.clone()));
        }
        let u = solve_cauchy(&p, coeffs, g, &opts)?;
        verify_energy_inequality(&u, &p)
    };
    let mut changes = vec![];
    let mut all_h = true;
    let mut finite = true;
    for _ in 0..10 {
        let coeffs = draw(&mut rng, &coarse)?;
        all_h &= check_all(&coeffs, &coarse, 8, 0)?.all_pass();
        let data = Expr::Gaussian {
            center: vec![rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3)],
            variance: 0.0625,
        };
        let f = Some(Expr::product(vec![
            Expr::constant(rng.gen_range(0.0..1.0)),
            Expr::bump(0, 0.0, 0.5, 2),
            Expr::bump(1, 0.0, 0.5, 2),
        ]));
        let a = ratio(&coeffs, &coarse, &data, &f)?;
        let b = ratio(&coeffs, &fine, &data, &f)?;
        finite &= a.is_finite() && b.is_finite() && a > 0.0;
        changes.push((b / a - 1.0).abs());
    }
    let data = Expr::Gaussian {
        center: vec![0.0, 0.0],
        variance: 0.0625,
    };
    let heat = CoefficientField::heat(2, 1.0);
    let heat_ratios = [ratio(&heat, &coarse, &data, &None)?, ratio(&heat, &fine, &data, &None)?];
    let u = solve_cauchy(&ProblemData::forward(interpolate(&fine, &data, 0.0)), &heat, &fine, &opts)?;
    let e = energy_norm(&u);
    let worst = changes.iter().cloned().fold(0.0, f64::max);
    let pass = all_h && finite && worst <= 0.1 && heat_ratios.iter().all(|r| *r <= 2.5);
    let detail = format!(
        "10 draws, (H) {all_h}, worst refinement change {worst:.4}; heat ratio {:.4} / {:.4} (sup {:.4}, grad {:.4})",
        heat_ratios[0], heat_ratios[1], e.sup_l2, e.grad_l2
    );
    Ok((pass, detail))
}

fn duality_and_representation() -> Outcome {
    let opts = SolverOptions::default();
    let g = grid(2, -1.0, 1.0, 16, 0.2, 0.01);
    let mut s = spec(2, 0.5, 4.0, 4.0);
    s.a = MatrixField::RotatedDiagonal {
        angle: 0.5,
        diagonal: [1.0, 1.5],
        skew: 0.4,
    };
    let f = CoefficientField::new(s)?;
    let ys = [
        SpaceTimePoint::new(0.0, &[0.0, 0.0]),
        SpaceTimePoint::new(0.05, &[-0.25, 0.375]),
        SpaceTimePoint::new(0.1, &[0.5, -0.125]),
    ];
    let xs = [
        SpaceTimePoint::new(0.2, &[0.25, 0.0]),
        SpaceTimePoint::new(0.15, &[0.0, -0.5]),
        SpaceTimePoint::new(0.12, &[-0.375, 0.25]),
    ];
    let fwd = ys.iter().map(|y| approximate_green(&f, &g, y, None, SourceMode::Point, &opts)).collect::<greenlab::Result<Vec<_>>>()?;
    let adj = xs.iter().map(|x| adjoint_green(&f, &g, x, None, SourceMode::Point, &opts)).collect::<greenlab::Result<Vec<_>>>()?;
    let dual = duality_check(&fwd, &adj)?;

    // 65 cells on (-1, 1): 64 interior nodes.
    let line = grid(1, -1.0, 1.0, 65, 0.2, 0.01);
    let mut s = spec(1, 0.5, 2.0, 4.0);
    s.a = MatrixField::Scalar {
        value: Expr::sum(vec![Expr::constant(1.0), Expr::bump(0, 0.2, 0.5, 2).scaled(0.5)]),
    };
    s.b = vec![Expr::bump(0, -0.3, 0.5, 2).scaled(0.5)];
    s.c = vec![Expr::bump(0, 0.1, 0.4, 2).scaled(0.3)];
    s.add_div_b = true;
    s.theta = 10.0;
    let coeffs = CoefficientField::new(s)?;
    let kernels = green_matrix(&coeffs, &line, 0, &opts)?;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let psi0: Vec<f64> = (0..line.num_interior()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let steps: Vec<usize> = (1..=line.num_steps()).collect();
    let rep = representation_check(&kernels, &psi0, &coeffs, &line, &steps, &opts)?;
    let pass = !dual.flagged && dual.max_relative <= 1e-9 && rep.max_error <= 1e-8;
    Ok((
        pass,
        format!("duality {:.2e} over {} pairs; representation {:.2e} on {} nodes", dual.max_relative, dual.pairs, rep.max_error, kernels.len()),
    ))
}

fn n0_reports(coeffs: &CoefficientField, radii: &[f64]) -> greenlab::Result<Vec<f64>> {
    let g = grid(2, -4.0, 4.0, 128, 2.0, 1e-3);
    let y = [0.375, 0.125];
    let k = approximate_green(coeffs, &g, &SpaceTimePoint::new(0.0, &y), None, SourceMode::Point, &SolverOptions::default())?;
    // Cylinders sit after the pole, where the kernel solves the homogeneous equation.
    let cyls: Vec<_> = radii.iter().map(|&r| ParabolicCylinder::past(SpaceTimePoint::new(2.0 * r * r, &y), r)).collect();
    Ok(estimate_n0(k.solution(), &Source::None, &cyls)?.iter().map(|r| r.n0).collect())
}

fn local_boundedness() -> Outcome {
    let radii = [0.25, 0.5, 1.0];
    let heat = n0_reports(&CoefficientField::heat(2, 1.0), &radii)?;
    let drift = n0_reports(&drift_field(), &radii)?;
    let heat_spread = spread(&heat);
    let factor = heat.iter().zip(&drift).map(|(a, b)| (b / a).max(a / b)).fold(0.0, f64::max);
    let pass = heat_spread <= 0.2 && factor <= 3.0;
    Ok((pass, format!("heat N0 {heat:.4?} (spread {heat_spread:.4}); drift N0 {drift:.4?} (max factor {factor:.4})")))
}

fn degiorgi() -> Outcome {
    let opts = SolverOptions::default();
    let g = grid(1, -8.0, 8.0, 2048, 2.0, 1e-3);
    let mut s = spec(1, 1.0, 2.0, 4.0);
    s.b = vec![Expr::bump(0, 0.5, 1.0, 2)];
    s.c = s.b.clone();
    s.add_div_b = true;
    s.theta = 10.0;
    let mut pass = true;
    let mut detail = vec![];
    for (name, coeffs) in [("heat", CoefficientField::heat(1, 1.0)), ("drift", CoefficientField::new(s)?)] {
        let k = approximate_green(&coeffs, &g, &origin(1), None, SourceMode::Point, &opts)?;
        let cyl = ParabolicCylinder::past(SpaceTimePoint::new(2.0, &[0.0]), 1.0);
        let level = degiorgi_level(k.solution(), &Source::None, &cyl, 0.1)?;
        let trace = degiorgi_trace(k.solution(), &cyl, level, 5)?;
        let ratio = trace.y(5) / trace.y(1);
        let chebyshev = trace.levels.iter().all(|l| l.chebyshev_ok);
        let widest = largest_convergent_delta(k.solution(), &Source::None, &cyl, 5, &[0.1, 0.2, 0.3, 0.5, 0.7, 1.0])?;
        pass &= ratio <= 1e-2 && chebyshev;
        let ys: Vec<String> = trace.levels.iter().map(|l| format!("{:.3e}", l.y_m)).collect();
        detail.push(format!("{name}: Y [{}], Y5/Y1 {ratio:.2e}, Chebyshev {chebyshev}, largest convergent delta {widest:?}", ys.join(", ")));
    }
    Ok((pass, detail.join("; ")))
}

fn davies() -> Outcome {
    let g = grid(2, -4.0, 4.0, 128, 0.5, 1e-3);
    let opts = SolverOptions::default();
    let data = interpolate(
        &g,
        &Expr::Gaussian {
            center: vec![0.0, 0.0],
            variance: 0.25,
        },
        0.0,
    );
    let mut pass = true;
    let mut detail = vec![];
    for (name, coeffs) in [("drift", drift_field()), ("heat", CoefficientField::heat(2, 1.0))] {
        let rates = compute_rates(coeffs.nu(), coeffs.theta(), coeffs.regime(), 1.0)?;
        let mut worst = 0.0f64;
        let mut windows = 0;
        let mut windows_ok = true;
        let mut true_worst = 0.0f64;
        for gamma in [0.5, 1.0, 2.0] {
            let psi = WeightFunction::linear(gamma, &[1.0, 0.0])?;
            let tr = evolve_weighted_energy(&coeffs, &g, &psi, &data, 0, g.num_steps(), &opts)?;
            worst = worst.max(check_envelope(&tr, &rates, 0.1)?.worst_ratio);
            let w = doubling_windows(&tr, rates.delta_window(gamma).unwrap())?;
            windows += w.len();
            windows_ok &= !w.is_empty() && w.iter().all(|x| x.ok);
            if name == "heat" {
                let r = check_envelope_with(&tr, 1.0, 0.0, 1.05, 0.0)?;
                true_worst = true_worst.max(r.worst_ratio);
                pass &= r.envelope_ok;
            }
        }
        pass &= worst <= 4.0 * 1.1 && windows_ok;
        let mut d = format!("{name} (nu {:.3}, Theta {}): worst ratio {worst:.4}, {windows} windows ok {windows_ok}", rates.nu, rates.theta);
        if name == "heat" {
            d += &format!(", true-rate ratio {true_worst:.4} (limit 1.05)");
        }
        detail.push(d);
    }
    Ok((pass, detail.join("; ")))
}

fn rate_formulas() -> Outcome {
    let a = compute_rates(1.0, 0.0, Regime::Supercritical, 1.0)?.lambda;
    let b = compute_rates(0.5, 0.0, Regime::Supercritical, 1.0)?.lambda;
    let ea = (a - 10.0 * 4f64.ln()).abs();
    let eb = (b - 32.5 * 4f64.ln()).abs();
    Ok((ea <= 1e-12 && eb <= 1e-12, format!("|delta| = {ea:.1e}, {eb:.1e}")))
}

fn elliptic() -> Outcome {
    let quad = TimeQuadrature::default();
    let sampling = EllipticSampling::default();
    let expected = 1.0 / (4.0 * PI);
    let calibration = [0.2, 0.35, 0.5]
        .map(|rho| calibration_error(rho, quad.t_min, quad.t_min * 10f64.powf(quad.decades), quad.nodes_per_decade))
        .into_iter()
        .fold(0.0, f64::max);
    let heat = CoefficientField::heat(3, 1.0);
    let mut constants = vec![];
    let mut seconds = vec![];
    for cells in [48, 32] {
        let start = Instant::now();
        let g = grid(3, -2.0, 2.0, cells, 0.2, 0.1);
        let green = integrate_kernel(&heat, &g, &origin(3).x, &quad, &sampling, &SolverOptions::default())?;
        constants.push(check_elliptic_bound(&green)?.constant);
        seconds.push(start.elapsed().as_secs_f64());
    }
    let rel = constants[0] / expected - 1.0;
    let refinement = (constants[0] / constants[1] - 1.0).abs();
    let pass = rel.abs() <= 0.2 && calibration <= 5e-3 && seconds[0] <= 600.0;
    Ok((
        pass,
        format!(
            "48^3 constant {:.5} ({rel:+.4} vs 1/(4 pi)) in {:.0} s; 32^3 {:.5} (change {refinement:.4}); calibration {calibration:.1e}",
            constants[0], seconds[0], constants[1]
        ),
    ))
}

fn hypothesis_checker() -> Outcome {
    let line = |cells| SpaceTimeGrid::build(&GridConfig::cube(1, -1.0, 1.0, cells, 0.0, 1.0, 0.1)).unwrap();
    let h3 = |b: Vec<Expr>, c: Vec<Expr>, d: Option<Expr>| -> greenlab::Result<bool> {
        let mut s = spec(1, 1.0, 2.0, 4.0);
        s.b = b;
        s.c = c;
        s.d = d;
        s.theta = 10.0;
        Ok(check_h3(&CoefficientField::new(s)?, &line(32))?.h3_pass)
    };
    let verdicts = [
        h3(vec![], vec![], Some(Expr::constant(1.0)))?,
        h3(vec![Expr::x(0)], vec![], Some(Expr::constant(1.0)))?,
        h3(vec![], vec![Expr::x(0)], None)?,
    ];
    let mut errs = vec![];
    for cells in [16, 32, 64] {
        let g = SpaceTimeGrid::build(&GridConfig::cube(1, 0.0, 1.0, cells, 0.0, 1.0, 0.1)).unwrap();
        let v = mixed_norm(|_, x| x[0], Exponent(2.0), Exponent(2.0), &g)?;
        errs.push(((v - 1.0 / 3f64.sqrt()).abs(), 1.0 / cells as f64));
    }
    let second_order = errs.iter().all(|(e, h)| *e <= h * h) && errs[0].0 / errs[1].0 > 3.5 && errs[1].0 / errs[2].0 > 3.5;
    let pass = verdicts == [true, true, false] && second_order;
    Ok((pass, format!("H3 verdicts {verdicts:?}; mixed-norm errors {}", errs.iter().map(|e| format!("{:.2e}", e.0)).collect::<Vec<_>>().join(", "))))
}

fn main() {
    let criteria: [(&str, Option<f64>, fn() -> Outcome); 11] = [
        ("heat-kernel recovery", Some(120.0), heat_recovery),
        ("scaled diffusion A = 2I", Some(60.0), scaled_diffusion),
        ("Gaussian bound under critical drift", Some(300.0), critical_drift),
        ("energy inequality", None, energy_inequality),
        ("discrete duality and representation", None, duality_and_representation),
        ("local boundedness N0", None, local_boundedness),
        ("De Giorgi trace", None, degiorgi),
        ("Davies envelope", None, davies),
        ("rate formulas", None, rate_formulas),
        ("elliptic kernel", Some(600.0), elliptic),
        ("hypothesis checker", None, hypothesis_checker),
    ];
    // Optional name filters: `cargo test --test acceptance -- drift`.
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    let mut ran = 0;
    for (name, limit, f) in criteria {
        if !only.is_empty() && !only.iter().any(|o| name.contains(o.as_str())) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let result = f();
        let secs = start.elapsed().as_secs_f64();
        let (pass, detail) = match result {
            Ok((pass, detail)) => {
                let in_time = limit.is_none_or(|l| secs <= l);
                (pass && in_time, if in_time { detail } else { format!("{detail}; over the {} s budget", limit.unwrap()) })
            }
            Err(e) => (false, format!("error: {e}")),
        };
        failed += usize::from(!pass);
        println!("{} {name}: {detail} [{secs:.1} s]", if pass { "PASS" } else { "FAIL" });
    }
    println!("{} of {ran} criteria pass", ran - failed);
}
