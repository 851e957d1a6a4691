//! Quantitative checks on computed kernels and solutions: Gaussian envelope
//! fits, the local boundedness ratio `N0`, and De Giorgi level sequences.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coefficients::CoefficientField;
use crate::error::{Error, Result};
use crate::green::GreenKernel;
use crate::grid::{cylinder_nodes, ParabolicCylinder, SpaceTimeGrid, SpaceTimePoint};
use crate::solver::{Direction, DiscreteSolution, Source};

/// Which kernel samples enter fits and envelope checks. Unset fields take
/// grid-dependent defaults: `t_min = 4 dt`, `t_max = (t_end - s) / 2`,
/// `min_distance = 2h`, `buffer = 4h`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleFilter {
    pub t_min: Option<f64>,
    pub t_max: Option<f64>,
    pub min_distance: Option<f64>,
    pub buffer: Option<f64>,
    pub xi_max: f64,
    pub floor: f64,
    /// Time levels are thinned evenly to at most this many.
    pub max_time_levels: usize,
}

impl Default for SampleFilter {
    fn default() -> Self {
        Self {
            t_min: None,
            t_max: None,
            min_distance: None,
            buffer: None,
            xi_max: 30.0,
            floor: 1e-30,
            max_time_levels: 64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct KernelSample {
    pub step: usize,
    pub node: usize,
    /// `|t - s|`
    pub tau: f64,
    /// `|x - y|`
    pub dist: f64,
    pub value: f64,
}

impl KernelSample {
    pub fn xi(&self) -> f64 {
        self.dist * self.dist / self.tau
    }
}

/// Samples of a kernel that pass `filter`.
pub fn admitted_samples(kernel: &GreenKernel, filter: &SampleFilter) -> Vec<KernelSample> {
    let grid = kernel.grid();
    let n = grid.dim();
    let h = grid.max_spacing();
    let pole = kernel.snapped_pole();
    let span = match kernel.direction {
        Direction::Forward => grid.t_end() - pole.t,
        Direction::Backward => pole.t - grid.t_start(),
    };
    let t_min = filter.t_min.unwrap_or(4.0 * grid.dt());
    let t_max = filter.t_max.unwrap_or(0.5 * span);
    let min_distance = filter.min_distance.unwrap_or(2.0 * h);
    let buffer = filter.buffer.unwrap_or(4.0 * h);

    let mut steps: Vec<usize> = kernel
        .active_steps()
        .into_iter()
        .filter(|&k| {
            let tau = (grid.time(k) - pole.t).abs();
            tau >= t_min * (1.0 - 1e-12) && tau <= t_max * (1.0 + 1e-12)
        })
        .collect();
    let cap = filter.max_time_levels.max(1);
    if steps.len() > cap {
        let len = steps.len();
        steps = (0..cap).map(|i| steps[i * (len - 1) / (cap - 1).max(1)]).collect();
        steps.dedup();
    }
    let nodes: Vec<(usize, f64)> = grid
        .interior_nodes()
        .iter()
        .filter_map(|&node| {
            let x = &grid.node_coords(node)[..n];
            let dist = x.iter().zip(&pole.x).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            (dist >= min_distance * (1.0 - 1e-12) && grid.distance_to_boundary(x) >= buffer * (1.0 - 1e-12)).then_some((node, dist))
        })
        .collect();
    let mut out = Vec::new();
    for k in steps {
        let tau = (grid.time(k) - pole.t).abs();
        for &(node, dist) in &nodes {
            let value = kernel.value(k, node);
            let s = KernelSample { step: k, node, tau, dist, value };
            if value.abs() > filter.floor && s.xi() <= filter.xi_max {
                out.push(s);
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GaussianFit {
    /// Envelope amplitude after the residual shift.
    pub c: f64,
    pub kappa: f64,
    pub r_squared: f64,
    pub n_samples: usize,
    /// Largest log-residual above the fitted line.
    pub residual_max: f64,
}

/// One-sided Gaussian envelope: least squares of `log(tau^{n/2} |G|)` against
/// `xi = |x - y|^2 / tau`, then `log C` is raised by the largest residual.
pub fn fit_gaussian(samples: &[KernelSample], n: usize) -> Result<GaussianFit> {
    if samples.len() < 10 {
        return Err(Error::NoSamples(format!("{} admitted samples, need at least 10", samples.len())));
    }
    let half_n = n as f64 / 2.0;
    let pts: Vec<(f64, f64)> = samples
        .iter()
        .map(|s| (s.xi(), (s.tau.powf(half_n) * s.value.abs()).ln()))
        .collect();
    let m = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    if !(sxx > 1e-14 * (1.0 + mx * mx) * m) {
        return Err(Error::DegenerateFit("all samples share the same xi".into()));
    }
    let mut slope = sxy / sxx;
    let mut intercept = my - slope * mx;
    if slope > 0.0 {
        slope = 0.0;
        intercept = my;
    }
    let ss_res: f64 = pts.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
    let r_squared = if syy > 1e-24 * m * (1.0 + my * my) { (1.0 - ss_res / syy).clamp(0.0, 1.0) } else { 0.0 };
    let residual_max = pts
        .iter()
        .map(|p| p.1 - intercept - slope * p.0)
        .fold(f64::NEG_INFINITY, f64::max)
        .max(0.0);
    Ok(GaussianFit {
        c: (intercept + residual_max).exp(),
        kappa: -slope,
        r_squared,
        n_samples: samples.len(),
        residual_max,
    })
}

/// `fit_gaussian` on the admitted samples of a kernel.
pub fn fit_kernel(kernel: &GreenKernel, filter: &SampleFilter) -> Result<GaussianFit> {
    fit_gaussian(&admitted_samples(kernel, filter), kernel.grid().dim())
}

/// Fits for a family of kernels, computed concurrently.
pub fn fit_family(kernels: &[GreenKernel], filter: &SampleFilter) -> Vec<Result<GaussianFit>> {
    kernels.par_iter().map(|k| fit_kernel(k, filter)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Violation {
    pub step: usize,
    pub node: usize,
    pub t: f64,
    pub x: Vec<f64>,
    pub value: f64,
    pub bound: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EnvelopeCheck {
    pub pass: bool,
    pub n_samples: usize,
    /// `max |G| / (C tau^{-n/2} e^{-kappa xi})` over admitted samples.
    pub worst_ratio: f64,
    pub violations: Vec<Violation>,
}

/// `|G| <= (1 + margin) C tau^{-n/2} exp(-kappa xi)` at every admitted sample.
pub fn verify_envelope(kernel: &GreenKernel, filter: &SampleFilter, c: f64, kappa: f64, margin: f64) -> EnvelopeCheck {
    let grid = kernel.grid();
    let n = grid.dim();
    let samples = admitted_samples(kernel, filter);
    let mut worst = 0.0f64;
    let mut violations = Vec::new();
    for s in &samples {
        let env = c * s.tau.powf(-(n as f64) / 2.0) * (-kappa * s.xi()).exp();
        let ratio = s.value.abs() / env;
        worst = worst.max(ratio);
        // The slack absorbs the rounding of the log/exp round trip.
        if s.value.abs() > (1.0 + margin) * env * (1.0 + 1e-12) {
            violations.push(Violation {
                step: s.step,
                node: s.node,
                t: grid.time(s.step),
                x: grid.node_coords(s.node)[..n].to_vec(),
                value: s.value,
                bound: (1.0 + margin) * env,
            });
        }
    }
    EnvelopeCheck {
        pass: violations.is_empty(),
        n_samples: samples.len(),
        worst_ratio: worst,
        violations,
    }
}

/// The parabolically rescaled operator with coefficients taken at `(r^2 t, r x)`.
pub fn rescale_coefficients(coeffs: &CoefficientField, r: f64) -> Result<CoefficientField> {
    coeffs.rescale(r)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LocalBoundednessReport {
    pub r: f64,
    pub center: SpaceTimePoint,
    /// `||u||_{L_inf(Q_{r/2})}`
    pub sup_half: f64,
    /// `||u||_{L2(Q_r)}`
    pub l2_full: f64,
    /// `||f||_{L_inf(Q_r)}`
    pub f_sup: f64,
    pub n0: f64,
}

/// Step carrying the value of `u` on slab `j`.
fn slab_step(u: &DiscreteSolution, j: usize) -> usize {
    match u.direction() {
        Direction::Forward => j + 1,
        Direction::Backward => j,
    }
}

fn slab_value(u: &DiscreteSolution, j: usize, node: usize) -> Result<f64> {
    let k = slab_step(u, j);
    if !u.contains_step(k) {
        return Ok(0.0);
    }
    if u.at(k).is_none() {
        return Err(Error::InvalidParameter(format!("step {k} inside the cylinder was not stored")));
    }
    Ok(u.value(k, node))
}

fn source_sup(grid: &SpaceTimeGrid, source: &Source, pairs: &[(usize, usize)]) -> f64 {
    let n = grid.dim();
    match source {
        Source::None => 0.0,
        Source::Field(e) => pairs
            .iter()
            .map(|&(j, node)| e.eval(grid.time(j) + 0.5 * grid.dt(), &grid.node_coords(node)[..n]).abs())
            .fold(0.0, f64::max),
        Source::Cylinder(set) => {
            let hit = pairs.iter().any(|p| set.pairs.binary_search(p).is_ok());
            if hit {
                1.0 / set.measure
            } else {
                0.0
            }
        }
    }
}

/// `N0 = ||u||_{L_inf(Q_{r/2})} / (r^{-(n+2)/2} ||u||_{L2(Q_r)} + r^2 ||f||_{L_inf(Q_r)})`
/// on past cylinders.
pub fn estimate_n0(u: &DiscreteSolution, source: &Source, cylinders: &[ParabolicCylinder]) -> Result<Vec<LocalBoundednessReport>> {
    let grid = u.grid();
    let n = grid.dim() as f64;
    cylinders
        .iter()
        .map(|cyl| {
            let r = cyl.radius;
            let full = cylinder_nodes(grid, &ParabolicCylinder::past(cyl.center.clone(), r))?;
            let half = cylinder_nodes(grid, &ParabolicCylinder::past(cyl.center.clone(), r / 2.0))?;
            let mut sup_half = 0.0f64;
            for &(j, node) in &half.pairs {
                sup_half = sup_half.max(slab_value(u, j, node)?.abs());
            }
            let mut l2 = 0.0;
            for &(j, node) in &full.pairs {
                l2 += grid.node_weight(node) * grid.dt() * slab_value(u, j, node)?.powi(2);
            }
            let l2_full = l2.sqrt();
            let f_sup = source_sup(grid, source, &full.pairs);
            let denom = r.powf(-(n + 2.0) / 2.0) * l2_full + r * r * f_sup;
            if !(denom > 0.0) {
                return Err(Error::ZeroDenominator(format!("u and f vanish on the cylinder of radius {r}")));
            }
            Ok(LocalBoundednessReport {
                r,
                center: cyl.center.clone(),
                sup_half,
                l2_full,
                f_sup,
                n0: sup_half / denom,
            })
        })
        .collect()
}

/// `max N0 / min N0 - 1` over a family of reports.
pub fn n0_spread(reports: &[LocalBoundednessReport]) -> f64 {
    let max = reports.iter().map(|r| r.n0).fold(f64::NEG_INFINITY, f64::max);
    let min = reports.iter().map(|r| r.n0).fold(f64::INFINITY, f64::min);
    max / min - 1.0
}

/// `r_m = r (1/2 + 2^{-m})`
pub fn degiorgi_radius(r: f64, m: usize) -> f64 {
    r * (0.5 + 0.5f64.powi(m as i32))
}

/// `k_m = k (1 - 2^{1-m})`
pub fn degiorgi_threshold(k: f64, m: usize) -> f64 {
    k * (1.0 - 2f64.powi(1 - m as i32))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DeGiorgiLevel {
    pub m: usize,
    pub r_m: f64,
    pub k_m: f64,
    /// `||(u - k_m)_+||^2_{L2(Q_m)}`
    pub energy: f64,
    pub y_m: f64,
    /// `(k_{m+1} - k_m)^2 |Q_m ∩ {u > k_{m+1}}|`
    pub chebyshev_lhs: f64,
    pub chebyshev_ok: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DeGiorgiTrace {
    pub r: f64,
    pub k: f64,
    pub center: SpaceTimePoint,
    pub levels: Vec<DeGiorgiLevel>,
    pub converged: bool,
}

impl DeGiorgiTrace {
    pub fn y(&self, m: usize) -> f64 {
        self.levels[m - 1].y_m
    }

    /// `||(u - k_{m+1})_+||_{Q_{m+1}} <= ||(u - k_m)_+||_{Q_m}` for every `m`.
    pub fn energies_monotone(&self) -> bool {
        self.levels.windows(2).all(|w| w[1].energy <= w[0].energy)
    }
}

/// `k = max(r^2 ||f||_inf, delta^{-1} r^{-(n+2)/2} ||u_+||_{L2(Q_r)})`.
pub fn degiorgi_level(u: &DiscreteSolution, source: &Source, cylinder: &ParabolicCylinder, delta: f64) -> Result<f64> {
    if !(delta > 0.0) {
        return Err(Error::InvalidParameter(format!("delta must be positive, got {delta}")));
    }
    let grid = u.grid();
    let n = grid.dim() as f64;
    let r = cylinder.radius;
    let set = cylinder_nodes(grid, &ParabolicCylinder::past(cylinder.center.clone(), r))?;
    let mut l2 = 0.0;
    for &(j, node) in &set.pairs {
        l2 += grid.node_weight(node) * grid.dt() * slab_value(u, j, node)?.max(0.0).powi(2);
    }
    Ok((r * r * source_sup(grid, source, &set.pairs)).max(r.powf(-(n + 2.0) / 2.0) * l2.sqrt() / delta))
}

/// Normalized energies `Y_m` on the nested past cylinders `Q_m = Q_{r_m}`.
/// All sums run over the pairs of `Q_1` in a fixed order with non-members
/// contributing zero, so nesting and the Chebyshev step hold exactly in
/// floating point.
pub fn degiorgi_trace(u: &DiscreteSolution, cylinder: &ParabolicCylinder, k: f64, m_max: usize) -> Result<DeGiorgiTrace> {
    let grid = u.grid();
    let n = grid.dim();
    let r = cylinder.radius;
    if m_max == 0 || m_max > 12 {
        return Err(Error::InvalidParameter(format!("iteration count {m_max} outside 1..=12")));
    }
    if r / 2f64.powi(m_max as i32) < 2.0 * grid.max_spacing() {
        return Err(Error::UnderResolved(format!(
            "r / 2^M = {} is below 2h = {}",
            r / 2f64.powi(m_max as i32),
            2.0 * grid.max_spacing()
        )));
    }
    if !(k > 0.0) {
        return Err(Error::InvalidParameter(format!("level k must be positive, got {k}")));
    }
    let base = ParabolicCylinder::past(cylinder.center.clone(), r);
    let q1 = cylinder_nodes(grid, &base)?;
    let dt = grid.dt();
    let data: Vec<(f64, f64, f64, f64)> = q1
        .pairs
        .iter()
        .map(|&(j, node)| {
            let x = grid.node_coords(node);
            let d = x[..n].iter().zip(&cylinder.center.x).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            Ok((grid.time(j) + 0.5 * dt, d, grid.node_weight(node) * dt, slab_value(u, j, node)?))
        })
        .collect::<Result<_>>()?;
    let inside = |m: usize, t: f64, d: f64| {
        let c = base.with_radius(degiorgi_radius(r, m));
        c.contains_time(t) && d <= c.radius * (1.0 + 1e-12)
    };
    let scale = k * k * r.powi(n as i32 + 2);
    let mut levels = Vec::with_capacity(m_max);
    for m in 1..=m_max {
        let km = degiorgi_threshold(k, m);
        let kn = degiorgi_threshold(k, m + 1);
        let gap = kn - km;
        let mut energy = 0.0;
        let mut cheb = 0.0;
        for &(t, d, w, v) in &data {
            let member = inside(m, t, d);
            let e = if member { (v - km).max(0.0) } else { 0.0 };
            energy += w * e * e;
            let c = if member && v > kn { gap } else { 0.0 };
            cheb += w * c * c;
        }
        levels.push(DeGiorgiLevel {
            m,
            r_m: degiorgi_radius(r, m),
            k_m: km,
            energy,
            y_m: energy / scale,
            chebyshev_lhs: cheb,
            chebyshev_ok: cheb <= energy,
        });
    }
    let y1 = levels[0].y_m;
    let ym = levels[m_max - 1].y_m;
    let decreasing = m_max < 2 || ym <= levels[m_max - 2].y_m;
    Ok(DeGiorgiTrace {
        r,
        k,
        center: cylinder.center.clone(),
        converged: ym <= 1e-2 * y1 && decreasing,
        levels,
    })
}

/// Largest `delta` in the list whose level from `degiorgi_level` yields a
/// converged trace.
pub fn largest_convergent_delta(u: &DiscreteSolution, source: &Source, cylinder: &ParabolicCylinder, m_max: usize, deltas: &[f64]) -> Result<Option<f64>> {
    let mut best = None;
    for &delta in deltas {
        let k = degiorgi_level(u, source, cylinder, delta)?;
        if k > 0.0 && degiorgi_trace(u, cylinder, k, m_max)?.converged {
            best = Some(best.map_or(delta, |b: f64| b.max(delta)));
        }
    }
    Ok(best)
}
