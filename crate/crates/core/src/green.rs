//! Approximate Green's functions and their adjoint counterparts.
//!
//! A forward kernel `G(., Y)` is the solution of `Pv = 1_Q / |Q|` with
//! `Q = Q^-_eps(Y)` (cylinder mode) or of the homogeneous problem started
//! from a discrete delta at `Y` (point mode). The adjoint kernel `G*(., X)`
//! marches backward from `X` with the transposed step. In point mode the
//! adjoint march carries load vectors, `w_{k-1} = M S_k^{-T} w_k`, which makes
//! `G*(s, y; t, x) = G(t, x; s, y)` hold exactly at the nodes.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coefficients::CoefficientField;
use crate::error::{Error, Result};
use crate::grid::{cylinder_nodes, parabolic_distance, ParabolicCylinder, SpaceTimeGrid, SpaceTimePoint};
use crate::solver::{mass_matrix, solve_adjoint, solve_cauchy, Direction, DiscreteSolution, ProblemData, SolverOptions, Source, Stepper};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceMode {
    /// Discrete delta as initial (terminal) data.
    #[default]
    Point,
    /// Normalized indicator of a parabolic cylinder as source.
    Cylinder,
}

impl std::fmt::Display for SourceMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SourceMode::Point => "point",
            SourceMode::Cylinder => "cylinder",
        })
    }
}

/// Stable fingerprint of a coefficient field, used to match kernels.
pub fn coefficient_hash(coeffs: &CoefficientField) -> u64 {
    let mut h = DefaultHasher::new();
    format!("{:?}", coeffs.spec()).hash(&mut h);
    h.finish()
}

/// Smallest admissible cylinder radius on `grid`.
pub fn default_epsilon(grid: &SpaceTimeGrid) -> f64 {
    2.0 * grid.max_spacing().max(grid.dt().sqrt())
}

#[derive(Clone, Debug)]
pub struct GreenKernel {
    /// The requested pole.
    pub pole: SpaceTimePoint,
    pub pole_node: usize,
    pub pole_step: usize,
    /// Distance from the requested pole to the node it was snapped to.
    pub snap_distance: f64,
    pub epsilon: f64,
    pub mode: SourceMode,
    /// `Forward` for `G(., Y)`, `Backward` for `G*(., X)`.
    pub direction: Direction,
    pub coeff_hash: u64,
    values: DiscreteSolution,
}

impl GreenKernel {
    pub fn grid(&self) -> &Arc<SpaceTimeGrid> {
        self.values.grid()
    }

    pub fn solution(&self) -> &DiscreteSolution {
        &self.values
    }

    /// Snapped pole `(t_k, x_node)`.
    pub fn snapped_pole(&self) -> SpaceTimePoint {
        let g = self.grid();
        SpaceTimePoint::new(g.time(self.pole_step), &g.node_coords(self.pole_node)[..g.dim()])
    }

    /// Kernel value at `(step, node)`; zero outside the computed window,
    /// in particular before the pole for forward kernels.
    pub fn value(&self, step: usize, node: usize) -> f64 {
        self.values.value(step, node)
    }

    /// Steps strictly on the far side of the pole (after it for `G`, before it for `G*`).
    pub fn active_steps(&self) -> Vec<usize> {
        let k0 = self.pole_step;
        self.values
            .stored_steps()
            .into_iter()
            .filter(|&k| match self.direction {
                Direction::Forward => k > k0,
                Direction::Backward => k < k0,
            })
            .collect()
    }

    /// Total mass `int G(t_k, x) dx` by nodal quadrature.
    pub fn mass(&self, step: usize) -> f64 {
        let g = self.grid();
        match self.values.at(step) {
            Some(v) => g.interior_nodes().iter().zip(v).map(|(&n, u)| g.node_weight(n) * u).sum(),
            None => 0.0,
        }
    }

    /// `1 - mass`; meaningful for conservative operators.
    pub fn boundary_leak(&self, step: usize) -> f64 {
        1.0 - self.mass(step)
    }

    pub fn max_abs(&self) -> f64 {
        self.active_steps()
            .iter()
            .flat_map(|&k| self.values.at(k).unwrap().iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

fn snap(grid: &SpaceTimeGrid, pole: &SpaceTimePoint) -> Result<(usize, usize, f64)> {
    let n = grid.dim();
    if pole.x.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: pole.x.len() });
    }
    if !pole.t.is_finite() || pole.x.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidPole("non-finite coordinates".into()));
    }
    if !(pole.t >= grid.t_start() && pole.t <= grid.t_end()) {
        return Err(Error::InvalidPole(format!("time {} outside [{}, {}]", pole.t, grid.t_start(), grid.t_end())));
    }
    if !grid.contains(&pole.x) || grid.distance_to_boundary(&pole.x) <= 0.0 {
        return Err(Error::InvalidPole(format!("{:?} is not strictly inside the box", pole.x)));
    }
    let node = grid.nearest_node(&pole.x);
    if grid.is_boundary(node) {
        return Err(Error::InvalidPole(format!("{:?} snaps to a boundary node", pole.x)));
    }
    let c = grid.node_coords(node);
    let d = pole.x.iter().zip(&c).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    Ok((grid.nearest_step(pole.t), node, d))
}

fn resolve_epsilon(grid: &SpaceTimeGrid, epsilon: Option<f64>, mode: SourceMode) -> Result<f64> {
    let minimum = default_epsilon(grid);
    let eps = epsilon.unwrap_or(minimum);
    if !(eps > 0.0) {
        return Err(Error::InvalidParameter(format!("epsilon must be positive, got {eps}")));
    }
    if mode == SourceMode::Cylinder && eps < minimum * (1.0 - 1e-12) {
        return Err(Error::EpsilonTooSmall { epsilon: eps, minimum });
    }
    Ok(eps)
}

/// `G^eps(., Y)` for the forward operator.
pub fn approximate_green(
    coeffs: &CoefficientField,
    grid: &Arc<SpaceTimeGrid>,
    pole: &SpaceTimePoint,
    epsilon: Option<f64>,
    mode: SourceMode,
    opts: &SolverOptions,
) -> Result<GreenKernel> {
    let (pole_step, pole_node, snap_distance) = snap(grid, pole)?;
    let epsilon = resolve_epsilon(grid, epsilon, mode)?;
    let m = grid.num_interior();
    let values = match mode {
        SourceMode::Point => {
            if pole_step == grid.num_steps() {
                return Err(Error::InvalidPole("pole at the final time leaves no forward window".into()));
            }
            let mut data = vec![0.0; m];
            data[grid.interior_index(pole_node).unwrap()] = 1.0 / grid.cell_volume();
            solve_cauchy(&ProblemData::forward(data).between(pole_step, grid.num_steps()), coeffs, grid, opts)?
        }
        SourceMode::Cylinder => {
            let set = cylinder_nodes(grid, &ParabolicCylinder::past(pole.clone(), epsilon))?;
            let first = set.intervals().next().unwrap_or(pole_step.saturating_sub(1));
            let p = ProblemData::forward(vec![0.0; m])
                .with_source(Source::Cylinder(set))
                .between(first, grid.num_steps());
            solve_cauchy(&p, coeffs, grid, opts)?
        }
    };
    Ok(GreenKernel {
        pole: pole.clone(),
        pole_node,
        pole_step,
        snap_distance,
        epsilon,
        mode,
        direction: Direction::Forward,
        coeff_hash: coefficient_hash(coeffs),
        values,
    })
}

/// `G*^eps(., X)`: backward in time from the pole `X`.
pub fn adjoint_green(
    coeffs: &CoefficientField,
    grid: &Arc<SpaceTimeGrid>,
    pole: &SpaceTimePoint,
    epsilon: Option<f64>,
    mode: SourceMode,
    opts: &SolverOptions,
) -> Result<GreenKernel> {
    let (pole_step, pole_node, snap_distance) = snap(grid, pole)?;
    let epsilon = resolve_epsilon(grid, epsilon, mode)?;
    let m = grid.num_interior();
    let values = match mode {
        SourceMode::Point => {
            if pole_step == 0 {
                return Err(Error::InvalidPole("pole at the initial time leaves no backward window".into()));
            }
            let mut w = vec![0.0; m];
            w[grid.interior_index(pole_node).unwrap()] = 1.0 / grid.cell_volume();
            let mut stepper = Stepper::new(coeffs, grid, opts)?;
            let dt = grid.dt();
            let mut levels = vec![w.clone()];
            for k in (1..=pole_step).rev() {
                w = stepper.adjoint_load(&w, grid.time(k), dt)?;
                if w.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite { step: k - 1 });
                }
                levels.push(w.clone());
            }
            levels.reverse();
            DiscreteSolution::from_values(grid.clone(), Direction::Backward, 0, levels)?
        }
        SourceMode::Cylinder => {
            let set = cylinder_nodes(grid, &ParabolicCylinder::future(pole.clone(), epsilon))?;
            let last = set.intervals().last().map(|j| j + 1).unwrap_or(pole_step + 1).min(grid.num_steps());
            let p = ProblemData::backward(vec![0.0; m]).with_source(Source::Cylinder(set)).between(last, 0);
            solve_adjoint(&p, coeffs, grid, opts)?
        }
    };
    Ok(GreenKernel {
        pole: pole.clone(),
        pole_node,
        pole_step,
        snap_distance,
        epsilon,
        mode,
        direction: Direction::Backward,
        coeff_hash: coefficient_hash(coeffs),
        values,
    })
}

/// Forward point kernels for a list of poles, computed concurrently.
pub fn green_family(
    coeffs: &CoefficientField,
    grid: &Arc<SpaceTimeGrid>,
    poles: &[SpaceTimePoint],
    epsilon: Option<f64>,
    mode: SourceMode,
    opts: &SolverOptions,
) -> Result<Vec<GreenKernel>> {
    poles.par_iter().map(|p| approximate_green(coeffs, grid, p, epsilon, mode, opts)).collect()
}

/// Forward point kernels with the pole at step `pole_step` and every interior node.
pub fn green_matrix(coeffs: &CoefficientField, grid: &Arc<SpaceTimeGrid>, pole_step: usize, opts: &SolverOptions) -> Result<Vec<GreenKernel>> {
    let t = grid.time(pole_step);
    let poles: Vec<SpaceTimePoint> = grid
        .interior_nodes()
        .iter()
        .map(|&n| SpaceTimePoint::new(t, &grid.node_coords(n)[..grid.dim()]))
        .collect();
    if poles.len() > 10_000 {
        return Err(Error::InvalidParameter(format!("{} poles exceed the 10^4 limit", poles.len())));
    }
    green_family(coeffs, grid, &poles, None, SourceMode::Point, opts)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DualityReport {
    /// `max |G(X;Y) - G*(Y;X)| / max |G|` over the sampled pairs.
    pub max_relative: f64,
    pub pairs: usize,
    /// Set when the two kernel families differ in `eps` or are not both in point mode,
    /// in which case the discrepancy measures the mismatch rather than solver error.
    pub flagged: bool,
}

/// Compares `G(t, x; s, y)` with `G*(s, y; t, x)` for every forward pole `Y`
/// and adjoint pole `X` with `s < t`.
pub fn duality_check(forward: &[GreenKernel], adjoint: &[GreenKernel]) -> Result<DualityReport> {
    let Some(f0) = forward.first().filter(|_| !adjoint.is_empty()) else {
        return Err(Error::NoSamples("empty kernel family".into()));
    };
    let grid = f0.grid().clone();
    let mut flagged = false;
    for k in forward.iter().chain(adjoint) {
        if !k.grid().same_lattice(&grid) {
            return Err(Error::Mismatch("kernels live on different grids".into()));
        }
        if k.coeff_hash != f0.coeff_hash {
            return Err(Error::Mismatch("kernels belong to different coefficient fields".into()));
        }
        if k.mode != SourceMode::Point || (k.epsilon - f0.epsilon).abs() > 1e-12 * f0.epsilon {
            flagged = true;
        }
    }
    if forward.iter().any(|k| k.direction != Direction::Forward) || adjoint.iter().any(|k| k.direction != Direction::Backward) {
        return Err(Error::Mismatch("expected forward kernels and adjoint kernels".into()));
    }
    let mut worst = 0.0f64;
    let mut scale = 0.0f64;
    let mut pairs = 0;
    for g in forward {
        for gs in adjoint {
            if gs.pole_step <= g.pole_step {
                continue;
            }
            let a = g.value(gs.pole_step, gs.pole_node);
            let b = gs.value(g.pole_step, g.pole_node);
            worst = worst.max((a - b).abs());
            scale = scale.max(a.abs()).max(b.abs());
            pairs += 1;
        }
    }
    if pairs == 0 {
        return Err(Error::NoSamples("no pole pairs with s < t".into()));
    }
    Ok(DualityReport {
        max_relative: if scale > 0.0 { worst / scale } else { worst },
        pairs,
        flagged,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RepresentationReport {
    pub steps: Vec<usize>,
    /// Relative `L2` error of the kernel quadrature against the direct solve, per step.
    pub errors: Vec<f64>,
    pub max_error: f64,
}

/// `u(t, x) = sum_y G(t, x; s, y) psi0(y) h^n` against `solve_cauchy(psi0)`.
pub fn representation_check(
    kernels: &[GreenKernel],
    psi0: &[f64],
    coeffs: &CoefficientField,
    grid: &Arc<SpaceTimeGrid>,
    steps: &[usize],
    opts: &SolverOptions,
) -> Result<RepresentationReport> {
    let m = grid.num_interior();
    if psi0.len() != m {
        return Err(Error::DimensionMismatch { expected: m, got: psi0.len() });
    }
    let Some(first) = kernels.first() else {
        return Err(Error::IncompleteKernelSet("no kernels".into()));
    };
    let s = first.pole_step;
    let mut column: Vec<Option<&GreenKernel>> = vec![None; m];
    for k in kernels {
        if !k.grid().same_lattice(grid) || k.coeff_hash != coefficient_hash(coeffs) {
            return Err(Error::Mismatch("kernel does not match the grid or coefficients".into()));
        }
        if k.mode != SourceMode::Point || k.direction != Direction::Forward || k.pole_step != s {
            return Err(Error::IncompleteKernelSet("kernels must be forward point kernels with a common pole time".into()));
        }
        column[grid.interior_index(k.pole_node).unwrap()] = Some(k);
    }
    if let Some(j) = column.iter().position(|c| c.is_none()) {
        return Err(Error::IncompleteKernelSet(format!("missing pole at interior node {}", grid.interior_nodes()[j])));
    }
    if let Some(&k) = steps.iter().find(|&&k| k <= s || k > grid.num_steps()) {
        return Err(Error::InvalidParameter(format!("step {k} is not after the pole step {s}")));
    }
    let direct = solve_cauchy(&ProblemData::forward(psi0.to_vec()).between(s, grid.num_steps()), coeffs, grid, opts)?;
    let mass = mass_matrix(grid);
    let vol = grid.cell_volume();
    let mut errors = Vec::with_capacity(steps.len());
    for &k in steps {
        let mut rep = vec![0.0; m];
        for (j, col) in column.iter().enumerate() {
            if psi0[j] == 0.0 {
                continue;
            }
            let g = col.unwrap().solution().at(k).ok_or_else(|| Error::IncompleteKernelSet(format!("step {k} not stored")))?;
            rep.iter_mut().zip(g).for_each(|(r, v)| *r += v * psi0[j] * vol);
        }
        let u = direct.at(k).unwrap();
        let diff: Vec<f64> = rep.iter().zip(u).map(|(a, b)| a - b).collect();
        let den = mass.bilinear(u, u).sqrt();
        let num = mass.bilinear(&diff, &diff).max(0.0).sqrt();
        errors.push(if den > 0.0 { num / den } else { num });
    }
    let max_error = errors.iter().cloned().fold(0.0, f64::max);
    Ok(RepresentationReport {
        steps: steps.to_vec(),
        errors,
        max_error,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OffDiagonalReport {
    /// `sup |G(X, Y)| |X - Y|^n` over admissible samples (parabolic distance).
    pub c_offdiag: f64,
    /// The same supremum restricted to the cone `|x - y| >= sqrt(t - s)`.
    pub c_offdiag_spatial: f64,
    pub samples: usize,
}

/// Empirical constant of `|G^eps(X, Y)| <= C |X - Y|^{-n}` over samples with
/// `eps <= |X - Y| / 3` and `X` at least `buffer` from the lateral boundary.
pub fn pointwise_offdiag_check(kernel: &GreenKernel, buffer: f64) -> Result<OffDiagonalReport> {
    let grid = kernel.grid();
    let n = grid.dim();
    let pole = kernel.snapped_pole();
    let y = &pole.x;
    let mut c = 0.0f64;
    let mut c_spatial = 0.0f64;
    let mut samples = 0;
    for k in kernel.active_steps() {
        let t = grid.time(k);
        let tau = (t - pole.t).abs();
        let v = kernel.solution().at(k).unwrap();
        for (&node, g) in grid.interior_nodes().iter().zip(v) {
            let x = &grid.node_coords(node)[..n];
            if grid.distance_to_boundary(x) < buffer {
                continue;
            }
            let d = parabolic_distance(&SpaceTimePoint::new(t, x), &pole)?;
            if kernel.epsilon > d / 3.0 {
                continue;
            }
            samples += 1;
            let val = g.abs() * d.powi(n as i32);
            c = c.max(val);
            let r = x.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            if r * r >= tau {
                c_spatial = c_spatial.max(val);
            }
        }
    }
    if samples == 0 {
        return Err(Error::NoSamples("no sample satisfies eps <= |X - Y| / 3 inside the buffer".into()));
    }
    Ok(OffDiagonalReport {
        c_offdiag: c,
        c_offdiag_spatial: c_spatial,
        samples,
    })
}
