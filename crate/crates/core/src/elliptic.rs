//! Elliptic Green's function `G(x, y) = int_0^inf K_t(x, y) dt` of an
//! autonomous operator in three dimensions, where `K_t` is its parabolic kernel.
//!
//! The march starts from the discrete delta at `y` with four uniform steps up
//! to `t_min`, then takes geometric steps. The integral of `t K_t` in `log t`
//! is accumulated on the whole nodal vector by the trapezoid rule. Values are
//! read off by testing with the discrete delta at `x`, `(M u)_x / h^3`, which
//! keeps `G(x, y) = G(y, x)` exact for self-adjoint operators.

use std::f64::consts::PI;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::bounds::{fit_gaussian, GaussianFit, KernelSample};
use crate::coefficients::CoefficientField;
use crate::error::{Error, Result};
use crate::grid::SpaceTimeGrid;
use crate::linalg::CsrMatrix;
use crate::solver::{mass_matrix, SolverOptions, Stepper};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimeQuadrature {
    pub t_min: f64,
    pub decades: f64,
    pub nodes_per_decade: usize,
    /// Geometric march steps per quadrature node.
    pub steps_per_node: usize,
    /// Extra decades allowed while the tail exceeds `tail_tol` of the integral.
    pub max_extra_decades: usize,
    pub tail_tol: f64,
}

impl Default for TimeQuadrature {
    fn default() -> Self {
        Self {
            t_min: 4e-4,
            decades: 4.0,
            nodes_per_decade: 40,
            steps_per_node: 4,
            max_extra_decades: 8,
            tail_tol: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EllipticSampling {
    pub rho_min: f64,
    pub rho_max: f64,
    /// Distance from the box boundary in units of `h`.
    pub buffer_cells: f64,
}

impl Default for EllipticSampling {
    fn default() -> Self {
        Self {
            rho_min: 0.2,
            rho_max: 0.5,
            buffer_cells: 4.0,
        }
    }
}

/// `int_T^inf C t^{-3/2} e^{-kappa rho^2 / t} dt = C sqrt(pi) erf(sqrt(kappa rho^2 / T)) / (rho sqrt(kappa))`.
pub fn gaussian_tail(c: f64, kappa: f64, rho: f64, t: f64) -> f64 {
    let a = kappa * rho * rho;
    c * PI.sqrt() * libm::erf((a / t).sqrt()) / a.sqrt()
}

/// `int_0^T C t^{-3/2} e^{-kappa rho^2 / t} dt`, the singular head.
pub fn gaussian_head(c: f64, kappa: f64, rho: f64, t: f64) -> f64 {
    let a = kappa * rho * rho;
    c * PI.sqrt() * libm::erfc((a / t).sqrt()) / a.sqrt()
}

/// `int_{t0}^{t1} f(t) dt` by the trapezoid rule in `log t`.
pub fn log_trapezoid<F: Fn(f64) -> f64>(f: F, t0: f64, t1: f64, nodes_per_decade: usize) -> f64 {
    let n = ((t1 / t0).log10() * nodes_per_decade as f64).ceil().max(1.0) as usize;
    let step = (t1 / t0).ln() / n as f64;
    let mut sum = 0.0;
    for i in 0..=n {
        let t = t0 * (step * i as f64).exp();
        let w = if i == 0 || i == n { 0.5 } else { 1.0 };
        sum += w * t * f(t);
    }
    sum * step
}

/// Relative error of the quadrature for `int_0^inf (4 pi t)^{-3/2} e^{-rho^2/(4t)} dt = 1/(4 pi rho)`,
/// with the head and tail outside `[t0, t1]` added analytically.
pub fn calibration_error(rho: f64, t0: f64, t1: f64, nodes_per_decade: usize) -> f64 {
    let c = (4.0 * PI).powf(-1.5);
    let f = |t: f64| c * t.powf(-1.5) * (-rho * rho / (4.0 * t)).exp();
    let total = gaussian_head(c, 0.25, rho, t0) + log_trapezoid(f, t0, t1, nodes_per_decade) + gaussian_tail(c, 0.25, rho, t1);
    (total * 4.0 * PI * rho - 1.0).abs()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EllipticSample {
    pub node: usize,
    pub x: Vec<f64>,
    pub rho: f64,
    /// Quadrature over `[t_min, t_cut]`.
    pub value: f64,
    /// Estimate of the remainder beyond `t_cut`.
    pub tail_bound: f64,
    /// Gaussian bound on the part below `t_min`.
    pub head_bound: f64,
}

#[derive(Clone, Debug)]
pub struct EllipticGreen {
    pub pole: Vec<f64>,
    pub pole_node: usize,
    pub t_min: f64,
    pub t_cut: f64,
    pub quadrature_nodes: usize,
    /// Exponential decay rate `-d log K / dt` at `t_cut`, when the kernel has entered that regime.
    pub decay_rate: Option<f64>,
    /// Gaussian fit of the early kernel used for the head and fallback tail bounds.
    pub fit: Option<GaussianFit>,
    pub samples: Vec<EllipticSample>,
    /// `(M G)_i / h^3` at every interior node.
    field: Vec<f64>,
    grid: Arc<SpaceTimeGrid>,
}

impl EllipticGreen {
    pub fn grid(&self) -> &Arc<SpaceTimeGrid> {
        &self.grid
    }

    /// Quadrature value at a node (zero on the boundary).
    pub fn value_at(&self, node: usize) -> f64 {
        self.grid.interior_index(node).map_or(0.0, |i| self.field[i])
    }
}

fn axis_probe_nodes(grid: &SpaceTimeGrid, pole: usize) -> Vec<usize> {
    let n = grid.dim();
    let npa = grid.nodes_per_axis();
    let base = grid.node_multi_index(pole);
    let mut out = Vec::new();
    for a in 0..n {
        for i in 0..npa[a] {
            let mut idx = base;
            idx[a] = i;
            out.push(grid.node_index(&idx[..n]));
        }
    }
    out.sort_unstable();
    out.dedup();
    out
}

/// Time-integrates the point kernel with pole `y` and samples the result at
/// nodes with `rho` in the sampling range.
pub fn integrate_kernel(
    coeffs: &CoefficientField,
    grid: &Arc<SpaceTimeGrid>,
    pole: &[f64],
    quad: &TimeQuadrature,
    sampling: &EllipticSampling,
    opts: &SolverOptions,
) -> Result<EllipticGreen> {
    let n = grid.dim();
    if n != 3 {
        return Err(Error::InvalidParameter(format!("the elliptic kernel needs n = 3, got n = {n}")));
    }
    if coeffs.dim() != n {
        return Err(Error::DimensionMismatch { expected: n, got: coeffs.dim() });
    }
    if !coeffs.is_autonomous() {
        return Err(Error::NonAutonomous);
    }
    if pole.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: pole.len() });
    }
    let h = grid.max_spacing();
    let buffer = sampling.buffer_cells * h;
    if !grid.contains(pole) || grid.distance_to_boundary(pole) < buffer {
        return Err(Error::InvalidPole(format!("{pole:?} is closer than {buffer} to the boundary")));
    }
    if !(quad.t_min > 0.0 && quad.decades > 0.0 && quad.nodes_per_decade > 0 && quad.steps_per_node > 0) {
        return Err(Error::InvalidParameter("time quadrature parameters must be positive".into()));
    }
    let pole_node = grid.nearest_node(pole);
    let ip = grid.interior_index(pole_node).ok_or_else(|| Error::InvalidPole(format!("{pole:?} snaps to the boundary")))?;
    let y = grid.node_coords(pole_node);
    let vol = grid.cell_volume();
    let m = grid.num_interior();
    // dt changes at every geometric step, so factorizations would not be reused.
    let mut opts = opts.clone();
    opts.direct.max_unknowns = 0;
    let mut stepper = Stepper::new(coeffs, grid, &opts)?;

    let mut u = vec![0.0; m];
    u[ip] = 1.0 / vol;
    let dt0 = quad.t_min / 4.0;
    let mut t = 0.0;
    for _ in 0..4 {
        t += dt0;
        u = stepper.forward(&u, t, dt0, None)?;
    }

    let ratio = 10f64.powf(1.0 / (quad.nodes_per_decade * quad.steps_per_node) as f64);
    let node_log_step = (10f64).ln() / quad.nodes_per_decade as f64;
    let probes = axis_probe_nodes(grid, pole_node);
    let fit_window = (grid.distance_to_boundary(&y[..n]) / 4.0).powi(2);
    let mut fit_samples: Vec<KernelSample> = Vec::new();
    let collect = |t: f64, u: &[f64], out: &mut Vec<KernelSample>| {
        if t > fit_window {
            return;
        }
        for &node in &probes {
            let Some(i) = grid.interior_index(node) else { continue };
            let x = grid.node_coords(node);
            let dist = (0..n).map(|a| (x[a] - y[a]).powi(2)).sum::<f64>().sqrt();
            let s = KernelSample { step: 0, node, tau: t, dist, value: u[i] };
            if dist >= 2.0 * h && grid.distance_to_boundary(&x[..n]) >= buffer && u[i] > 1e-30 && s.xi() <= 30.0 {
                out.push(s);
            }
        }
    };
    collect(t, &u, &mut fit_samples);

    let mut acc = vec![0.0; m];
    let mut prev: Vec<f64> = u.iter().map(|v| t * v).collect();
    let mut nodes = 1usize;
    let base_nodes = (quad.decades * quad.nodes_per_decade as f64).round() as usize;
    let max_nodes = base_nodes + quad.max_extra_decades * quad.nodes_per_decade;
    let mut history: Vec<(f64, f64)> = vec![(t, u.iter().sum())];
    let mass = mass_matrix(grid);
    let sample_nodes: Vec<(usize, f64)> = grid
        .interior_nodes()
        .iter()
        .filter_map(|&node| {
            let x = grid.node_coords(node);
            let rho = (0..n).map(|a| (x[a] - y[a]).powi(2)).sum::<f64>().sqrt();
            let ok = rho >= sampling.rho_min * (1.0 - 1e-12)
                && rho <= sampling.rho_max * (1.0 + 1e-12)
                && rho >= 2.0 * h * (1.0 - 1e-12)
                && grid.distance_to_boundary(&x[..n]) >= buffer * (1.0 - 1e-12);
            ok.then_some((node, rho))
        })
        .collect();
    if sample_nodes.is_empty() {
        return Err(Error::NoSamples("no node satisfies the elliptic sampling filter".into()));
    }

    let load = |mass: &CsrMatrix, v: &[f64]| -> Vec<f64> { mass.matvec(v).into_iter().map(|z| z / vol).collect() };
    let mut decay_rate;
    loop {
        for _ in 0..quad.steps_per_node {
            let dt = t * (ratio - 1.0);
            t *= ratio;
            u = stepper.forward(&u, t, dt, None)?;
        }
        let cur: Vec<f64> = u.iter().map(|v| t * v).collect();
        for ((a, p), c) in acc.iter_mut().zip(&prev).zip(&cur) {
            *a += 0.5 * node_log_step * (p + c);
        }
        prev = cur;
        nodes += 1;
        collect(t, &u, &mut fit_samples);
        history.push((t, u.iter().sum()));

        if nodes > base_nodes {
            let k = history.len();
            let rate = |i: usize, j: usize| -((history[j].1 / history[i].1).ln()) / (history[j].0 - history[i].0);
            let r1 = rate(k - 3, k - 2);
            let r2 = rate(k - 2, k - 1);
            decay_rate = (r1 > 0.0 && r2 > 0.0 && (r1 - r2).abs() <= 0.05 * r2).then_some(r2);
            let done = match decay_rate {
                Some(lambda) => {
                    let g = load(&mass, &acc);
                    let kt = load(&mass, &u);
                    sample_nodes.iter().all(|&(node, _)| {
                        let i = grid.interior_index(node).unwrap();
                        kt[i].abs() / lambda <= quad.tail_tol * g[i].abs()
                    })
                }
                None => false,
            };
            if done || nodes >= max_nodes {
                break;
            }
        }
    }

    let fit = fit_gaussian(&fit_samples, n).ok();
    let field = load(&mass, &acc);
    let kt = load(&mass, &u);
    let samples = sample_nodes
        .iter()
        .map(|&(node, rho)| {
            let i = grid.interior_index(node).unwrap();
            let gaussian = fit.as_ref().map(|f| (gaussian_tail(f.c, f.kappa, rho, t), gaussian_head(f.c, f.kappa, rho, quad.t_min)));
            let tail_bound = match (decay_rate, gaussian) {
                (Some(lambda), _) => kt[i].abs() / lambda,
                (None, Some((tail, _))) => tail,
                (None, None) => f64::INFINITY,
            };
            EllipticSample {
                node,
                x: grid.node_coords(node)[..n].to_vec(),
                rho,
                value: field[i],
                tail_bound,
                head_bound: gaussian.map_or(f64::NAN, |g| g.1),
            }
        })
        .collect();
    Ok(EllipticGreen {
        pole: y[..n].to_vec(),
        pole_node,
        t_min: quad.t_min,
        t_cut: t,
        quadrature_nodes: nodes,
        decay_rate,
        fit,
        samples,
        field,
        grid: grid.clone(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EllipticBound {
    /// `sup |G(x, y)| |x - y|^{n-2}` with `G` at the upper end of its interval.
    pub constant: f64,
    /// The same supremum at the lower end (quadrature only).
    pub constant_lower: f64,
    pub samples: usize,
}

pub fn check_elliptic_bound(green: &EllipticGreen) -> Result<EllipticBound> {
    if green.samples.is_empty() {
        return Err(Error::NoSamples("no admissible elliptic samples".into()));
    }
    let n = green.grid.dim() as i32;
    let mut upper = 0.0f64;
    let mut lower = 0.0f64;
    for s in &green.samples {
        let w = s.rho.powi(n - 2);
        lower = lower.max(s.value.abs() * w);
        let tail = if s.tail_bound.is_finite() { s.tail_bound } else { 0.0 };
        upper = upper.max((s.value.abs() + tail) * w);
    }
    Ok(EllipticBound {
        constant: upper,
        constant_lower: lower,
        samples: green.samples.len(),
    })
}
