//! Exponential-weight energies.
//!
//! For a bounded weight `psi` with `|D psi| <= gamma1`, `|D^2 psi| <= gamma2`
//! the conjugated evolution `u(s) = e^{-psi} f`, `Pu = 0` has the weighted
//! energy `I(t) = int e^{2 psi} u(t)^2`, which grows at most like
//! `e^{2 (lambda gamma1^2 + mu gamma2)(t - s)}`. The backward variant
//! `J(s) = int e^{-2 psi} v(s)^2` uses the adjoint march from `v(t) = e^{psi} g`.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::{admitted_samples, SampleFilter};
use crate::coefficients::{CoefficientField, Regime};
use crate::error::{Error, Result};
use crate::green::GreenKernel;
use crate::grid::SpaceTimeGrid;
use crate::solver::{mass_matrix, solve_adjoint, solve_cauchy, ProblemData, SolverOptions};

/// Beyond this value of `2 psi` the weight `e^{2 psi}` is treated as overflow.
const MAX_EXPONENT: f64 = 700.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum WeightFunction {
    /// `psi(x) = gamma e.x`
    Linear { gamma: f64, direction: Vec<f64> },
    /// `psi(x) = L tanh(gamma e.x / L)`
    SmoothedCapped { gamma: f64, direction: Vec<f64>, cap: f64 },
}

impl WeightFunction {
    pub fn linear(gamma: f64, direction: &[f64]) -> Result<Self> {
        Self::Linear {
            gamma,
            direction: direction.to_vec(),
        }
        .normalized()
    }

    pub fn smoothed(gamma: f64, direction: &[f64], cap: f64) -> Result<Self> {
        Self::SmoothedCapped {
            gamma,
            direction: direction.to_vec(),
            cap,
        }
        .normalized()
    }

    /// Validates the parameters and rescales the direction to unit length.
    pub fn normalized(self) -> Result<Self> {
        let (gamma, dir) = match &self {
            WeightFunction::Linear { gamma, direction } | WeightFunction::SmoothedCapped { gamma, direction, .. } => (*gamma, direction),
        };
        if !(gamma >= 0.0 && gamma.is_finite()) {
            return Err(Error::InvalidParameter(format!("gamma must be finite and non-negative, got {gamma}")));
        }
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::InvalidParameter("weight direction must be a non-zero vector".into()));
        }
        let unit: Vec<f64> = dir.iter().map(|v| v / norm).collect();
        Ok(match self {
            WeightFunction::Linear { gamma, .. } => WeightFunction::Linear { gamma, direction: unit },
            WeightFunction::SmoothedCapped { gamma, cap, .. } => {
                if !(cap > 0.0) {
                    return Err(Error::InvalidParameter(format!("cap must be positive, got {cap}")));
                }
                WeightFunction::SmoothedCapped { gamma, direction: unit, cap }
            }
        })
    }

    fn projection(direction: &[f64], x: &[f64]) -> f64 {
        direction.iter().zip(x).map(|(a, b)| a * b).sum()
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            WeightFunction::Linear { gamma, direction } => gamma * Self::projection(direction, x),
            WeightFunction::SmoothedCapped { gamma, direction, cap } => cap * (gamma * Self::projection(direction, x) / cap).tanh(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            WeightFunction::Linear { direction, .. } | WeightFunction::SmoothedCapped { direction, .. } => direction.len(),
        }
    }

    /// Bound on `|D psi|`.
    pub fn gamma1(&self) -> f64 {
        match self {
            WeightFunction::Linear { gamma, .. } | WeightFunction::SmoothedCapped { gamma, .. } => *gamma,
        }
    }

    /// Bound on `|D^2 psi|`: zero for the linear form, `4 gamma^2 / (3 sqrt 3 L)` for the capped one.
    pub fn gamma2(&self) -> f64 {
        match self {
            WeightFunction::Linear { .. } => 0.0,
            WeightFunction::SmoothedCapped { gamma, cap, .. } => 4.0 * gamma * gamma / (3.0 * 3f64.sqrt() * cap),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Rates {
    pub regime: Regime,
    pub nu: f64,
    pub theta: f64,
    pub cn: f64,
    /// Coefficient of `gamma1^2` in the growth exponent.
    pub lambda: f64,
    /// Coefficient of `gamma2`; zero for `p > n`.
    pub mu: f64,
}

impl Rates {
    /// `lambda gamma1^2 + mu gamma2`
    pub fn exponent(&self, gamma1: f64, gamma2: f64) -> f64 {
        self.lambda * gamma1 * gamma1 + self.mu * gamma2
    }

    /// Constant in front of the exponential envelope.
    pub fn prefactor(&self) -> f64 {
        match self.regime {
            Regime::Supercritical => 4.0,
            Regime::Endpoint => 1.0,
        }
    }

    /// Window length over which `I` at most quadruples (`p > n` only):
    /// `(3 - 2 nu) nu^3 / (4 (nu^4 + 4 Theta^2 nu^2 + 4) gamma1^2)`.
    pub fn delta_window(&self, gamma1: f64) -> Option<f64> {
        match self.regime {
            Regime::Supercritical => {
                let nu = self.nu;
                let num = (3.0 - 2.0 * nu) * nu.powi(3);
                let den = 4.0 * (nu.powi(4) + 4.0 * self.theta * self.theta * nu * nu + 4.0) * gamma1 * gamma1;
                Some(if gamma1 == 0.0 { f64::INFINITY } else { num / den })
            }
            Regime::Endpoint => None,
        }
    }

    /// Envelope exponent of the off-diagonal bound after optimizing a linear weight.
    pub fn kappa_davies(&self) -> f64 {
        1.0 / (4.0 * self.lambda)
    }
}

/// Growth constants of the weighted energy.
///
/// `p > n`: `lambda = 2 (nu^4 + 4 Theta^2 nu^2 + 4) ln 4 / ((3 - 2 nu) nu^3)`, `mu = 0`.
/// `p = n`: `2 lambda = 4 / nu^3 + C_n^2 Theta^2 / nu + 2 C_n Theta`, `2 mu = C_n Theta`.
pub fn compute_rates(nu: f64, theta: f64, regime: Regime, cn: f64) -> Result<Rates> {
    if !(nu > 0.0 && nu <= 1.0) {
        return Err(Error::InvalidParameter(format!("nu = {nu} outside (0, 1]")));
    }
    if !(theta >= 0.0 && theta.is_finite()) {
        return Err(Error::InvalidParameter(format!("theta = {theta} must be finite and non-negative")));
    }
    let (lambda, mu) = match regime {
        Regime::Supercritical => {
            let lambda = 2.0 * (nu.powi(4) + 4.0 * theta * theta * nu * nu + 4.0) * 4f64.ln() / ((3.0 - 2.0 * nu) * nu.powi(3));
            (lambda, 0.0)
        }
        Regime::Endpoint => {
            if !(cn > 0.0 && cn.is_finite()) {
                return Err(Error::InvalidParameter(format!("C_n = {cn} must be positive")));
            }
            let two_lambda = 4.0 / nu.powi(3) + cn * cn * theta * theta / nu + 2.0 * cn * theta;
            (two_lambda / 2.0, cn * theta / 2.0)
        }
    };
    Ok(Rates {
        regime,
        nu,
        theta,
        cn,
        lambda,
        mu,
    })
}

/// Weighted energy along a march.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DaviesTrajectory {
    /// Time of the data (`s` forward, `t` backward).
    pub start: f64,
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub gamma1: f64,
    pub gamma2: f64,
}

impl DaviesTrajectory {
    pub fn elapsed(&self, i: usize) -> f64 {
        (self.times[i] - self.start).abs()
    }

    pub fn initial(&self) -> f64 {
        self.values[0]
    }

    /// Linear interpolation of `I` at elapsed time `tau`.
    pub fn at_elapsed(&self, tau: f64) -> Option<f64> {
        let last = self.times.len() - 1;
        if tau < 0.0 || tau > self.elapsed(last) * (1.0 + 1e-12) {
            return None;
        }
        if last == 0 {
            return Some(self.values[0]);
        }
        let i = (0..last).find(|&i| self.elapsed(i + 1) >= tau).unwrap_or(last - 1);
        let (a, b) = (self.elapsed(i), self.elapsed(i + 1));
        let w = ((tau - a) / (b - a)).clamp(0.0, 1.0);
        Some(self.values[i] * (1.0 - w) + self.values[i + 1] * w)
    }
}

fn weights(grid: &SpaceTimeGrid, psi: &WeightFunction, sign: f64) -> Result<Vec<f64>> {
    let n = grid.dim();
    if psi.dim() != n {
        return Err(Error::DimensionMismatch { expected: n, got: psi.dim() });
    }
    let vals: Vec<f64> = grid.interior_nodes().iter().map(|&node| sign * psi.eval(&grid.node_coords(node)[..n])).collect();
    if vals.iter().any(|v| 2.0 * v.abs() > MAX_EXPONENT) {
        return Err(Error::Overflow { gamma1: psi.gamma1() });
    }
    Ok(vals)
}

fn weighted_energy(m: &crate::linalg::CsrMatrix, w: &[f64], u: &[f64]) -> Result<f64> {
    let z: Vec<f64> = u.iter().zip(w).map(|(a, p)| a * p.exp()).collect();
    let e = m.bilinear(&z, &z);
    if !e.is_finite() {
        return Err(Error::NonFinite { step: 0 });
    }
    Ok(e.max(0.0))
}

/// `I(t_k) = ||e^{psi} u(t_k)||^2` for `u(s) = e^{-psi} f`, `Pu = 0`, with the
/// weighted product taken at the nodes so that `I(s) = ||f||^2` exactly.
pub fn evolve_weighted_energy(
    coeffs: &CoefficientField,
    grid: &Arc<SpaceTimeGrid>,
    psi: &WeightFunction,
    f: &[f64],
    start_step: usize,
    end_step: usize,
    opts: &SolverOptions,
) -> Result<DaviesTrajectory> {
    if f.len() != grid.num_interior() {
        return Err(Error::DimensionMismatch { expected: grid.num_interior(), got: f.len() });
    }
    if f.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("non-finite data".into()));
    }
    let w = weights(grid, psi, 1.0)?;
    let data: Vec<f64> = f.iter().zip(&w).map(|(a, p)| a * (-p).exp()).collect();
    let u = solve_cauchy(&ProblemData::forward(data).between(start_step, end_step), coeffs, grid, opts)?;
    let m = mass_matrix(grid);
    let steps = u.stored_steps();
    let values = steps
        .iter()
        .map(|&k| weighted_energy(&m, &w, u.at(k).unwrap()).map_err(|_| Error::Overflow { gamma1: psi.gamma1() }))
        .collect::<Result<Vec<_>>>()?;
    Ok(DaviesTrajectory {
        start: grid.time(start_step),
        times: steps.iter().map(|&k| grid.time(k)).collect(),
        values,
        gamma1: psi.gamma1(),
        gamma2: psi.gamma2(),
    })
}

/// `J(t_k) = ||e^{-psi} v(t_k)||^2` for the adjoint march from `v(t) = e^{psi} g`.
/// The trajectory runs backward from `terminal_step`.
pub fn evolve_backward_energy(
    coeffs: &CoefficientField,
    grid: &Arc<SpaceTimeGrid>,
    psi: &WeightFunction,
    g: &[f64],
    terminal_step: usize,
    stop_step: usize,
    opts: &SolverOptions,
) -> Result<DaviesTrajectory> {
    if g.len() != grid.num_interior() {
        return Err(Error::DimensionMismatch { expected: grid.num_interior(), got: g.len() });
    }
    let w = weights(grid, psi, -1.0)?;
    let data: Vec<f64> = g.iter().zip(&w).map(|(a, p)| a * (-p).exp()).collect();
    let v = solve_adjoint(&ProblemData::backward(data).between(terminal_step, stop_step), coeffs, grid, opts)?;
    let m = mass_matrix(grid);
    let mut steps = v.stored_steps();
    steps.reverse();
    let values = steps
        .iter()
        .map(|&k| weighted_energy(&m, &w, v.at(k).unwrap()).map_err(|_| Error::Overflow { gamma1: psi.gamma1() }))
        .collect::<Result<Vec<_>>>()?;
    Ok(DaviesTrajectory {
        start: grid.time(terminal_step),
        times: steps.iter().map(|&k| grid.time(k)).collect(),
        values,
        gamma1: psi.gamma1(),
        gamma2: psi.gamma2(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DaviesReport {
    pub trajectory: DaviesTrajectory,
    pub lambda: f64,
    pub mu: f64,
    pub prefactor: f64,
    /// `I(s) e^{2 (lambda gamma1^2 + mu gamma2) |t - s|}` per level.
    pub envelope: Vec<f64>,
    pub ratios: Vec<f64>,
    /// `max I(t) / (I(s) e^{2 (lambda gamma1^2 + mu gamma2) |t - s|})`.
    pub worst_ratio: f64,
    pub envelope_ok: bool,
}

/// Envelope check with an explicit growth exponent and prefactor.
pub fn check_envelope_with(trajectory: &DaviesTrajectory, lambda: f64, mu: f64, prefactor: f64, slack: f64) -> Result<DaviesReport> {
    if trajectory.values.is_empty() {
        return Err(Error::NoSamples("empty trajectory".into()));
    }
    let rate = lambda * trajectory.gamma1 * trajectory.gamma1 + mu * trajectory.gamma2;
    let i0 = trajectory.initial();
    let mut envelope = Vec::with_capacity(trajectory.values.len());
    let mut ratios = Vec::with_capacity(trajectory.values.len());
    for (i, &v) in trajectory.values.iter().enumerate() {
        let growth = (2.0 * rate * trajectory.elapsed(i)).exp();
        envelope.push(prefactor * i0 * growth);
        ratios.push(if i0 > 0.0 { v / (i0 * growth) } else if v > 0.0 { f64::INFINITY } else { 0.0 });
    }
    let worst_ratio = ratios.iter().cloned().fold(0.0, f64::max);
    Ok(DaviesReport {
        trajectory: trajectory.clone(),
        lambda,
        mu,
        prefactor,
        envelope,
        ratios,
        worst_ratio,
        envelope_ok: worst_ratio <= prefactor * (1.0 + slack),
    })
}

/// `worst_ratio <= prefactor (1 + slack)` with the growth constants of `rates`.
pub fn check_envelope(trajectory: &DaviesTrajectory, rates: &Rates, slack: f64) -> Result<DaviesReport> {
    check_envelope_with(trajectory, rates.lambda, rates.mu, rates.prefactor(), slack)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DoublingWindow {
    pub t1: f64,
    pub ratio: f64,
    pub ok: bool,
}

/// `I(t1 + delta) <= 4 I(t1)` on consecutive windows of length `delta` from the data time.
pub fn doubling_windows(trajectory: &DaviesTrajectory, delta: f64) -> Result<Vec<DoublingWindow>> {
    if !(delta > 0.0) {
        return Err(Error::InvalidParameter(format!("window length {delta} must be positive")));
    }
    let total = trajectory.elapsed(trajectory.times.len() - 1);
    if !delta.is_finite() || delta > total {
        return Ok(vec![]);
    }
    let count = ((total / delta) * (1.0 + 1e-12)).floor() as usize;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let a = trajectory.at_elapsed(i as f64 * delta).unwrap();
        let b = trajectory.at_elapsed(((i + 1) as f64 * delta).min(total)).unwrap();
        let ratio = if a > 0.0 { b / a } else if b > 0.0 { f64::INFINITY } else { 0.0 };
        out.push(DoublingWindow {
            t1: trajectory.start + i as f64 * delta * (trajectory.times.last().unwrap() - trajectory.start).signum(),
            ratio,
            ok: ratio <= 4.0 * (1.0 + 1e-12),
        });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct WeightedBoundRow {
    pub step: usize,
    pub node: usize,
    pub tau: f64,
    pub dist: f64,
    pub value: f64,
    /// Minimizer over the gamma grid of the bound.
    pub best_gamma: f64,
    pub best_bound: f64,
    /// The bound holds for every gamma in the grid.
    pub holds: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WeightedBoundReport {
    pub rows: Vec<WeightedBoundRow>,
    pub all_hold: bool,
    pub kappa_davies: f64,
}

/// `e^{psi(x) - psi(y)} |G| <= C tau^{-n/2} e^{gamma1 sqrt(2 tau) + lambda gamma1^2 tau}`
/// for linear `psi` along `(x - y) / |x - y|` and every `gamma1` in the grid.
pub fn offdiag_from_weights(kernel: &GreenKernel, filter: &SampleFilter, gamma_grid: &[f64], rates: &Rates, c: f64) -> Result<WeightedBoundReport> {
    if gamma_grid.is_empty() {
        return Err(Error::InvalidParameter("empty gamma grid".into()));
    }
    let n = kernel.grid().dim() as f64;
    let samples = admitted_samples(kernel, filter);
    if samples.is_empty() {
        return Err(Error::NoSamples("no admitted kernel samples".into()));
    }
    let rows: Vec<WeightedBoundRow> = samples
        .par_iter()
        .map(|s| {
            let mut best_gamma = gamma_grid[0];
            let mut best_bound = f64::INFINITY;
            let mut holds = true;
            for &g in gamma_grid {
                let exponent = -g * s.dist + g * (2.0 * s.tau).sqrt() + rates.lambda * g * g * s.tau;
                let bound = c * s.tau.powf(-n / 2.0) * exponent.exp();
                if s.value.abs() > bound * (1.0 + 1e-12) {
                    holds = false;
                }
                if bound < best_bound {
                    best_bound = bound;
                    best_gamma = g;
                }
            }
            WeightedBoundRow {
                step: s.step,
                node: s.node,
                tau: s.tau,
                dist: s.dist,
                value: s.value,
                best_gamma,
                best_bound,
                holds,
            }
        })
        .collect();
    Ok(WeightedBoundReport {
        all_hold: rows.iter().all(|r| r.holds),
        kappa_davies: rates.kappa_davies(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bounds::fit_kernel;
    use crate::coefficients::{CoefficientSpec, Exponent, MatrixField};
    use crate::expr::Expr;
    use crate::green::{approximate_green, SourceMode};
    use crate::grid::{GridConfig, SpaceTimePoint};
    use crate::solver::interpolate;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn rate_arithmetic() {
        let r = compute_rates(1.0, 0.0, Regime::Supercritical, 1.0).unwrap();
        assert!((r.lambda - 10.0 * 4f64.ln()).abs() <= 1e-12);
        assert_eq!(r.mu, 0.0);
        let r = compute_rates(0.5, 0.0, Regime::Supercritical, 1.0).unwrap();
        assert!((r.lambda - 32.5 * 4f64.ln()).abs() <= 1e-12);
        let r = compute_rates(0.7, 0.0, Regime::Endpoint, 3.0).unwrap();
        assert_relative_eq!(2.0 * r.lambda, 4.0 / 0.7f64.powi(3), max_relative = 1e-14);
        assert_eq!(r.mu, 0.0);
        assert!(compute_rates(0.0, 0.0, Regime::Supercritical, 1.0).is_err());
        assert!(compute_rates(1.2, 0.0, Regime::Supercritical, 1.0).is_err());
        assert!(compute_rates(0.5, 1.0, Regime::Endpoint, 0.0).is_err());
    }

    #[test]
    fn window_quadruples_the_envelope() {
        let r = compute_rates(0.6, 1.5, Regime::Supercritical, 1.0).unwrap();
        for g in [0.5, 1.0, 2.0] {
            let d = r.delta_window(g).unwrap();
            assert_relative_eq!((2.0 * r.exponent(g, 0.0) * d).exp(), 4.0, max_relative = 1e-12);
        }
    }

    proptest! {
        #[test]
        fn rates_are_monotone(nu in 0.05f64..0.95, dnu in 0.0f64..0.05, theta in 0.0f64..5.0, dtheta in 0.0f64..1.0, cn in 0.1f64..3.0) {
            for regime in [Regime::Supercritical, Regime::Endpoint] {
                let base = compute_rates(nu, theta, regime, cn).unwrap();
                let more_theta = compute_rates(nu, theta + dtheta, regime, cn).unwrap();
                let more_nu = compute_rates(nu + dnu, theta, regime, cn).unwrap();
                prop_assert!(more_theta.lambda >= base.lambda && more_theta.mu >= base.mu);
                // For p > n the nu-monotonicity needs Theta <= 1/2, see below.
                if regime == Regime::Endpoint || theta <= 0.5 {
                    prop_assert!(more_nu.lambda <= base.lambda * (1.0 + 1e-14));
                }
            }
        }
    }

    #[test]
    fn supercritical_rate_turns_up_near_nu_one_for_large_theta() {
        // d lambda / d nu at nu = 1 is proportional to 4 Theta^2 - 1.
        let at = |nu: f64, theta: f64| compute_rates(nu, theta, Regime::Supercritical, 1.0).unwrap().lambda;
        assert!(at(0.99, 0.5) >= at(0.999, 0.5));
        assert!(at(1.0, 1.0) > at(0.95, 1.0));
        let h = 1e-6;
        for theta in [0.25, 1.0, 2.0] {
            let slope = (at(1.0, theta) - at(1.0 - h, theta)) / h;
            let expected = 2.0 * 4f64.ln() * (4.0 * theta * theta - 1.0);
            assert_relative_eq!(slope, expected, max_relative = 1e-4);
        }
    }

    #[test]
    fn weight_bounds() {
        let lin = WeightFunction::linear(1.5, &[3.0, 4.0]).unwrap();
        assert_eq!(lin.gamma2(), 0.0);
        assert_relative_eq!(lin.eval(&[1.0, 1.0]), 1.5 * 7.0 / 5.0, epsilon = 1e-14);
        // Finite-difference Hessian of the capped form along its direction.
        let (gamma, cap) = (2.0, 0.5);
        let s = WeightFunction::smoothed(gamma, &[1.0, 0.0], cap).unwrap();
        let h = 1e-4;
        let mut max2 = 0.0f64;
        let mut max1 = 0.0f64;
        for i in -2000..=2000 {
            let x = i as f64 * 1e-3;
            let d2 = (s.eval(&[x + h, 0.0]) - 2.0 * s.eval(&[x, 0.0]) + s.eval(&[x - h, 0.0])) / (h * h);
            let d1 = (s.eval(&[x + h, 0.0]) - s.eval(&[x - h, 0.0])) / (2.0 * h);
            max2 = max2.max(d2.abs());
            max1 = max1.max(d1.abs());
        }
        assert!((max2 - s.gamma2()).abs() <= 0.05 * s.gamma2(), "{max2} vs {}", s.gamma2());
        assert!(max1 <= gamma * (1.0 + 1e-6));
        assert!(WeightFunction::linear(1.0, &[0.0, 0.0]).is_err());
    }

    fn heat_grid() -> Arc<SpaceTimeGrid> {
        Arc::new(SpaceTimeGrid::build(&GridConfig::cube(1, -8.0, 8.0, 512, 0.0, 1.0, 1e-3)).unwrap())
    }

    fn bump_data(g: &SpaceTimeGrid) -> Vec<f64> {
        interpolate(g, &Expr::bump(0, 0.3, 1.0, 2), 0.0)
    }

    #[test]
    fn heat_weighted_energy_respects_true_rate() {
        let g = heat_grid();
        let heat = CoefficientField::heat(1, 1.0);
        let opts = SolverOptions::default();
        for gamma in [0.5, 1.0, 2.0] {
            let psi = WeightFunction::linear(gamma, &[1.0]).unwrap();
            let tr = evolve_weighted_energy(&heat, &g, &psi, &bump_data(&g), 0, g.num_steps(), &opts).unwrap();
            let m = mass_matrix(&g);
            let f = bump_data(&g);
            assert_relative_eq!(tr.initial(), m.bilinear(&f, &f), max_relative = 1e-12);
            let true_rate = check_envelope_with(&tr, 1.0, 0.0, 1.05, 0.0).unwrap();
            assert!(true_rate.envelope_ok, "gamma {gamma}: {}", true_rate.worst_ratio);
            let rates = compute_rates(0.9, 0.0, Regime::Supercritical, 1.0).unwrap();
            let rep = check_envelope(&tr, &rates, 0.1).unwrap();
            assert!(rep.envelope_ok && rep.worst_ratio <= 1.0 + 1e-12, "{}", rep.worst_ratio);
            let windows = doubling_windows(&tr, rates.delta_window(gamma).unwrap()).unwrap();
            assert!(!windows.is_empty() && windows.iter().all(|w| w.ok));
        }
    }

    #[test]
    fn zero_weight_and_zero_data() {
        let g = heat_grid();
        let heat = CoefficientField::heat(1, 1.0);
        let opts = SolverOptions::default();
        let psi = WeightFunction::linear(0.0, &[1.0]).unwrap();
        let tr = evolve_weighted_energy(&heat, &g, &psi, &bump_data(&g), 0, 200, &opts).unwrap();
        assert!(tr.values.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12)));
        let rates = compute_rates(0.9, 0.0, Regime::Supercritical, 1.0).unwrap();
        let rep = check_envelope(&tr, &rates, 0.0).unwrap();
        assert!(rep.worst_ratio <= 1.0 + 1e-12);
        let zero = evolve_weighted_energy(&heat, &g, &WeightFunction::linear(1.0, &[1.0]).unwrap(), &vec![0.0; g.num_interior()], 0, 50, &opts).unwrap();
        assert!(zero.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn constructed_violation_fails() {
        let rates = compute_rates(0.9, 0.0, Regime::Supercritical, 1.0).unwrap();
        let gamma = 1.0;
        let rate = rates.exponent(gamma, 0.0);
        let times: Vec<f64> = (0..=20).map(|i| i as f64 * 0.01).collect();
        let tr = DaviesTrajectory {
            start: 0.0,
            values: times.iter().map(|t| 2.0 * (3.0 * 2.0 * rate * t).exp()).collect(),
            times,
            gamma1: gamma,
            gamma2: 0.0,
        };
        assert!(!check_envelope(&tr, &rates, 0.1).unwrap().envelope_ok);
    }

    #[test]
    fn overflow_is_reported() {
        let g = heat_grid();
        let psi = WeightFunction::linear(100.0, &[1.0]).unwrap();
        let r = evolve_weighted_energy(&CoefficientField::heat(1, 1.0), &g, &psi, &bump_data(&g), 0, 10, &SolverOptions::default());
        assert!(matches!(r, Err(Error::Overflow { gamma1 }) if gamma1 == 100.0));
    }

    #[test]
    fn mirror_symmetry_of_the_weight() {
        let g = Arc::new(SpaceTimeGrid::build(&GridConfig::cube(1, -4.0, 4.0, 128, 0.0, 0.3, 1e-2)).unwrap());
        let f = CoefficientField::new(CoefficientSpec {
            dim: 1,
            a: MatrixField::Scalar { value: Expr::sum(vec![Expr::constant(1.0), Expr::bump(0, 0.0, 2.0, 2).scaled(0.5)]) },
            b: vec![],
            c: vec![],
            d: Some(Expr::bump(0, 0.0, 1.0, 2)),
            add_div_b: false,
            nu: 0.5,
            theta: 1.0,
            p: Exponent::INFINITY,
            q: Exponent(2.0),
        })
        .unwrap();
        let data = interpolate(&g, &Expr::bump(0, 0.7, 1.0, 2), 0.0);
        let mut reflected = data.clone();
        reflected.reverse();
        let opts = SolverOptions::default();
        let a = evolve_weighted_energy(&f, &g, &WeightFunction::linear(1.0, &[1.0]).unwrap(), &data, 0, 30, &opts).unwrap();
        let b = evolve_weighted_energy(&f, &g, &WeightFunction::linear(1.0, &[-1.0]).unwrap(), &reflected, 0, 30, &opts).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            assert_relative_eq!(x, y, max_relative = 1e-10);
        }
    }

    #[test]
    fn backward_energy_respects_reflected_envelope() {
        let g = heat_grid();
        let heat = CoefficientField::heat(1, 1.0);
        let psi = WeightFunction::linear(1.0, &[1.0]).unwrap();
        let tr = evolve_backward_energy(&heat, &g, &psi, &bump_data(&g), g.num_steps(), 0, &SolverOptions::default()).unwrap();
        assert_eq!(tr.times[0], g.t_end());
        let rates = compute_rates(0.9, 0.0, Regime::Supercritical, 1.0).unwrap();
        assert!(check_envelope(&tr, &rates, 0.1).unwrap().envelope_ok);
        assert!(check_envelope_with(&tr, 1.0, 0.0, 1.05, 0.0).unwrap().envelope_ok);
    }

    #[test]
    fn weighted_offdiagonal_bound_on_heat_kernel() {
        let g = heat_grid();
        let heat = CoefficientField::heat(1, 1.0);
        let k = approximate_green(&heat, &g, &SpaceTimePoint::new(0.0, &[0.0]), None, SourceMode::Point, &SolverOptions::default()).unwrap();
        let filter = SampleFilter {
            t_min: Some(0.05),
            t_max: Some(0.5),
            xi_max: 12.0,
            ..SampleFilter::default()
        };
        let fit = fit_kernel(&k, &filter).unwrap();
        let gammas: Vec<f64> = (0..=40).map(|i| 0.25 * i as f64).collect();
        let true_rates = Rates { regime: Regime::Endpoint, nu: 1.0, theta: 0.0, cn: 1.0, lambda: 1.0, mu: 0.0 };
        let rep = offdiag_from_weights(&k, &filter, &gammas, &true_rates, fit.c).unwrap();
        assert!(rep.all_hold);
        assert_relative_eq!(rep.kappa_davies, 0.25);
        assert!(rep.kappa_davies <= fit.kappa + 0.02);
        let rates = compute_rates(0.9, 0.0, Regime::Supercritical, 1.0).unwrap();
        let rep = offdiag_from_weights(&k, &filter, &gammas, &rates, fit.c).unwrap();
        assert!(rep.all_hold && rep.kappa_davies < fit.kappa);
        let zero = offdiag_from_weights(&k, &filter, &[0.0], &rates, fit.c).unwrap();
        assert!(zero.all_hold);
        assert!(offdiag_from_weights(&k, &filter, &[], &rates, fit.c).is_err());
    }
}
