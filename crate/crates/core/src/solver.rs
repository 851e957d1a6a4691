//! Weak-form assembly on tensor-product linear elements and backward-Euler
//! marches for the forward problem and its discrete adjoint.
//!
//! With `S_k = M + dt B(t_k)` the forward march is `S_k u_k = M u_{k-1} + dt M f_k`
//! and the adjoint march is `S_k^T v_{k-1} = M v_k + dt M g_{k-1}`. The two are
//! exact transposes, so `<u_N, g>_M = <u_0, v_0>_M` holds to solver tolerance.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coefficients::{CoefficientField, Exponent};
use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::grid::{CylinderSet, SpaceTimeGrid, MAX_DIM};
use crate::linalg::{CsrMatrix, DirectLimits, IterativeConfig, LinearSolver};
use crate::quadrature::tensor_rule;

type Local = [[f64; 8]; 8];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MassKind {
    #[default]
    Consistent,
    Lumped,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolverOptions {
    pub mass: MassKind,
    /// Gauss points per axis for the lower-order terms.
    pub quad_points: usize,
    pub iterative: IterativeConfig,
    pub direct: DirectLimits,
    /// Keep every `store_stride`-th time level (the first and last are always kept).
    pub store_stride: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            mass: MassKind::Consistent,
            quad_points: 3,
            iterative: IterativeConfig::default(),
            direct: DirectLimits::default(),
            store_stride: 1,
        }
    }
}

/// Reference quantities shared by every cell of a uniform grid.
struct Element {
    n: usize,
    corners: usize,
    points: Vec<([f64; 3], f64)>,
    phi: Vec<[f64; 8]>,
    grad: Vec<[[f64; MAX_DIM]; 8]>,
    /// `int_cell D_i phi_r D_j phi_c`
    gg: [[Local; MAX_DIM]; MAX_DIM],
    /// `int_cell phi_r phi_c`
    mass: Local,
}

fn basis(n: usize, h: &[f64], z: &[f64; 3]) -> ([f64; 8], [[f64; MAX_DIM]; 8]) {
    let mut phi = [0.0; 8];
    let mut grad = [[0.0; MAX_DIM]; 8];
    for c in 0..(1usize << n) {
        let mut f = [0.0; MAX_DIM];
        let mut s = [0.0; MAX_DIM];
        for a in 0..n {
            if (c >> a) & 1 == 1 {
                f[a] = z[a];
                s[a] = 1.0 / h[a];
            } else {
                f[a] = 1.0 - z[a];
                s[a] = -1.0 / h[a];
            }
        }
        phi[c] = f[..n].iter().product();
        for a in 0..n {
            let mut g = s[a];
            for b in 0..n {
                if b != a {
                    g *= f[b];
                }
            }
            grad[c][a] = g;
        }
    }
    (phi, grad)
}

impl Element {
    fn new(grid: &SpaceTimeGrid, quad_points: usize) -> Self {
        let n = grid.dim();
        let h = grid.spacing();
        let vol = grid.cell_volume();
        let corners = 1usize << n;
        let points = tensor_rule(n, quad_points);
        let (phi, grad): (Vec<_>, Vec<_>) = points.iter().map(|(z, _)| basis(n, h, z)).unzip();
        let mut gg = [[[[0.0; 8]; 8]; MAX_DIM]; MAX_DIM];
        let mut mass = [[0.0; 8]; 8];
        for (z, w) in tensor_rule(n, 2) {
            let (p, g) = basis(n, h, &z);
            for r in 0..corners {
                for c in 0..corners {
                    mass[r][c] += w * vol * p[r] * p[c];
                    for i in 0..n {
                        for j in 0..n {
                            gg[i][j][r][c] += w * vol * g[r][i] * g[c][j];
                        }
                    }
                }
            }
        }
        Self {
            n,
            corners,
            points,
            phi,
            grad,
            gg,
            mass,
        }
    }
}

/// Zero matrix with the interior Q1 stencil pattern.
pub fn stencil_pattern(grid: &SpaceTimeGrid) -> CsrMatrix {
    let n = grid.dim();
    let npa = grid.nodes_per_axis();
    let rows: Vec<Vec<usize>> = grid
        .interior_nodes()
        .iter()
        .map(|&node| {
            let idx = grid.node_multi_index(node);
            let mut cols = Vec::with_capacity(27);
            for offset in 0..3usize.pow(n as u32) {
                let mut o = offset;
                let mut nb = [0usize; MAX_DIM];
                let mut ok = true;
                for a in 0..n {
                    let d = (o % 3) as isize - 1;
                    o /= 3;
                    let v = idx[a] as isize + d;
                    if v < 0 || v >= npa[a] as isize {
                        ok = false;
                        break;
                    }
                    nb[a] = v as usize;
                }
                if !ok {
                    continue;
                }
                if let Some(j) = grid.interior_index(grid.node_index(&nb[..n])) {
                    cols.push(j);
                }
            }
            cols.sort_unstable();
            cols
        })
        .collect();
    CsrMatrix::from_pattern(&rows)
}

fn assemble_cells<F>(grid: &SpaceTimeGrid, pattern: &CsrMatrix, corners: usize, local: F) -> CsrMatrix
where
    F: Fn(usize) -> Local + Sync,
{
    let locals: Vec<Local> = (0..grid.num_cells()).into_par_iter().map(&local).collect();
    let mut m = pattern.clone();
    for (cell, l) in locals.iter().enumerate() {
        let (nodes, _) = grid.cell_corners(cell);
        for r in 0..corners {
            let Some(ir) = grid.interior_index(nodes[r]) else {
                continue;
            };
            for c in 0..corners {
                if let Some(ic) = grid.interior_index(nodes[c]) {
                    m.add_to(ir, ic, l[r][c]);
                }
            }
        }
    }
    m
}

/// Consistent mass matrix `int phi_i phi_j` on interior nodes.
pub fn mass_matrix(grid: &SpaceTimeGrid) -> CsrMatrix {
    let e = Element::new(grid, 2);
    assemble_cells(grid, &stencil_pattern(grid), e.corners, |_| e.mass)
}

/// Row-sum lumped mass: `diag(node weight)`.
pub fn lumped_mass_matrix(grid: &SpaceTimeGrid) -> CsrMatrix {
    let mut m = stencil_pattern(grid);
    for (i, &node) in grid.interior_nodes().iter().enumerate() {
        m.add_to(i, i, grid.node_weight(node));
    }
    m
}

/// Laplacian stiffness `int grad phi_i . grad phi_j`.
pub fn stiffness_matrix(grid: &SpaceTimeGrid) -> CsrMatrix {
    let e = Element::new(grid, 2);
    let n = e.n;
    assemble_cells(grid, &stencil_pattern(grid), e.corners, |_| {
        let mut l = [[0.0; 8]; 8];
        for i in 0..n {
            for r in 0..e.corners {
                for c in 0..e.corners {
                    l[r][c] += e.gg[i][i][r][c];
                }
            }
        }
        l
    })
}

/// Weighted mass `int w(x) phi_i phi_j` by Gauss quadrature.
pub fn weighted_mass_matrix<W>(grid: &SpaceTimeGrid, quad_points: usize, w: W) -> CsrMatrix
where
    W: Fn(&[f64]) -> f64 + Sync,
{
    let e = Element::new(grid, quad_points);
    let vol = grid.cell_volume();
    let h = grid.spacing();
    assemble_cells(grid, &stencil_pattern(grid), e.corners, |cell| {
        let base = grid.cell_lower_corner(cell);
        let mut l = [[0.0; 8]; 8];
        for (q, (z, wq)) in e.points.iter().enumerate() {
            let mut x = [0.0; MAX_DIM];
            for a in 0..e.n {
                x[a] = base[a] + z[a] * h[a];
            }
            let s = wq * vol * w(&x[..e.n]);
            for r in 0..e.corners {
                for c in 0..e.corners {
                    l[r][c] += s * e.phi[q][r] * e.phi[q][c];
                }
            }
        }
        l
    })
}

fn operator_with(coeffs: &CoefficientField, grid: &SpaceTimeGrid, e: &Element, pattern: &CsrMatrix, t: f64) -> CsrMatrix {
    let n = e.n;
    let h = grid.spacing();
    let vol = grid.cell_volume();
    let lower = coeffs.has_b() || coeffs.has_c() || coeffs.has_d();
    assemble_cells(grid, pattern, e.corners, |cell| {
        let mut l = [[0.0; 8]; 8];
        let a = coeffs.a(t, &grid.cell_center(cell)[..n]);
        for i in 0..n {
            for j in 0..n {
                if a[i][j] == 0.0 {
                    continue;
                }
                for r in 0..e.corners {
                    for c in 0..e.corners {
                        l[r][c] += a[i][j] * e.gg[i][j][r][c];
                    }
                }
            }
        }
        if lower {
            let base = grid.cell_lower_corner(cell);
            for (q, (z, wq)) in e.points.iter().enumerate() {
                let mut x = [0.0; MAX_DIM];
                for k in 0..n {
                    x[k] = base[k] + z[k] * h[k];
                }
                let b = coeffs.b(t, &x[..n]);
                let cc = coeffs.c(t, &x[..n]);
                let d = coeffs.d(t, &x[..n]);
                let w = wq * vol;
                let phi = &e.phi[q];
                let grad = &e.grad[q];
                let mut b_grad = [0.0; 8];
                let mut c_grad = [0.0; 8];
                for k in 0..e.corners {
                    for i in 0..n {
                        b_grad[k] += b[i] * grad[k][i];
                        c_grad[k] += cc[i] * grad[k][i];
                    }
                }
                for r in 0..e.corners {
                    for c in 0..e.corners {
                        l[r][c] += w * (phi[c] * b_grad[r] + c_grad[c] * phi[r] + d * phi[c] * phi[r]);
                    }
                }
            }
        }
        l
    })
}

/// The bilinear form at time `t` on interior nodes: row `i` tests with `phi_i`,
/// column `j` is the trial function `phi_j`. `A` is taken at cell centers and
/// its gradient products integrated exactly; the lower-order terms use
/// `quad_points` Gauss points per axis.
pub fn assemble_operator(coeffs: &CoefficientField, grid: &SpaceTimeGrid, t: f64, quad_points: usize) -> Result<CsrMatrix> {
    if coeffs.dim() != grid.dim() {
        return Err(Error::DimensionMismatch {
            expected: grid.dim(),
            got: coeffs.dim(),
        });
    }
    if !(grid.cell_volume() > 0.0) {
        return Err(Error::SingularAssembly("zero cell volume".into()));
    }
    let e = Element::new(grid, quad_points);
    Ok(operator_with(coeffs, grid, &e, &stencil_pattern(grid), t))
}

/// Builds and caches the per-step systems `M + dt B(t)`.
pub struct Stepper<'a> {
    coeffs: &'a CoefficientField,
    grid: &'a SpaceTimeGrid,
    opts: SolverOptions,
    element: Element,
    pattern: CsrMatrix,
    mass: CsrMatrix,
    frozen: Option<CsrMatrix>,
    current: Option<(f64, f64, LinearSolver)>,
}

impl<'a> Stepper<'a> {
    pub fn new(coeffs: &'a CoefficientField, grid: &'a SpaceTimeGrid, opts: &SolverOptions) -> Result<Self> {
        if coeffs.dim() != grid.dim() {
            return Err(Error::DimensionMismatch {
                expected: grid.dim(),
                got: coeffs.dim(),
            });
        }
        let pattern = stencil_pattern(grid);
        let mass = match opts.mass {
            MassKind::Consistent => mass_matrix(grid),
            MassKind::Lumped => lumped_mass_matrix(grid),
        };
        let element = Element::new(grid, opts.quad_points);
        let frozen = coeffs
            .is_autonomous()
            .then(|| operator_with(coeffs, grid, &element, &pattern, grid.t_start()));
        Ok(Self {
            coeffs,
            grid,
            opts: opts.clone(),
            element,
            pattern,
            mass,
            frozen,
            current: None,
        })
    }

    pub fn mass(&self) -> &CsrMatrix {
        &self.mass
    }

    /// The factorized `M + dt B(t)`.
    pub fn system(&mut self, t: f64, dt: f64) -> Result<&LinearSolver> {
        let autonomous = self.frozen.is_some();
        let fresh = match &self.current {
            Some((ct, cdt, _)) => *cdt != dt || (!autonomous && *ct != t),
            None => true,
        };
        if fresh {
            let b = match &self.frozen {
                Some(b) => b.clone(),
                None => operator_with(self.coeffs, self.grid, &self.element, &self.pattern, t),
            };
            let s = self.mass.combine(1.0, &b, dt);
            let solver = LinearSolver::new(s, self.opts.direct, self.opts.iterative)?;
            self.current = Some((t, dt, solver));
        }
        Ok(&self.current.as_ref().unwrap().2)
    }

    /// One forward step from `u` (values at `t - dt`) with load vector `load`.
    pub fn forward(&mut self, u: &[f64], t: f64, dt: f64, load: Option<&[f64]>) -> Result<Vec<f64>> {
        let mut rhs = self.mass.matvec(u);
        if let Some(l) = load {
            rhs.iter_mut().zip(l).for_each(|(r, v)| *r += dt * v);
        }
        self.system(t, dt)?.solve(&rhs, Some(u))
    }

    /// One adjoint step: `S(t)^T v_prev = M v + dt load`.
    pub fn adjoint(&mut self, v: &[f64], t: f64, dt: f64, load: Option<&[f64]>) -> Result<Vec<f64>> {
        let mut rhs = self.mass.matvec(v);
        if let Some(l) = load {
            rhs.iter_mut().zip(l).for_each(|(r, x)| *r += dt * x);
        }
        self.system(t, dt)?.solve_transpose(&rhs, Some(v))
    }

    /// `v_prev = M S(t)^{-T} w`, the transpose of one forward step applied to nodal data.
    pub fn adjoint_load(&mut self, w: &[f64], t: f64, dt: f64) -> Result<Vec<f64>> {
        let z = self.system(t, dt)?.solve_transpose(w, Some(w))?;
        Ok(self.mass.matvec(&z))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Initial data at the first step, marching forward with `P`.
    Forward,
    /// Terminal data at the last step, marching backward with the adjoint.
    Backward,
}

/// Right-hand side of the parabolic problem.
#[derive(Clone, Debug, PartialEq)]
pub enum Source {
    None,
    Field(Expr),
    /// `1_Q / |Q|` on a discrete cylinder.
    Cylinder(CylinderSet),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProblemData {
    /// Interior nodal values of the initial (forward) or terminal (backward) data.
    pub data: Vec<f64>,
    pub source: Source,
    pub direction: Direction,
    /// Step index of the data; `None` means the first (forward) or last (backward) step.
    pub data_step: Option<usize>,
    /// Last (forward) or first (backward) step of the march.
    pub stop_step: Option<usize>,
}

impl ProblemData {
    pub fn forward(initial: Vec<f64>) -> Self {
        Self {
            data: initial,
            source: Source::None,
            direction: Direction::Forward,
            data_step: None,
            stop_step: None,
        }
    }

    pub fn backward(terminal: Vec<f64>) -> Self {
        Self {
            direction: Direction::Backward,
            ..Self::forward(terminal)
        }
    }

    pub fn with_source(mut self, source: Source) -> Self {
        self.source = source;
        self
    }

    pub fn between(mut self, data_step: usize, stop_step: usize) -> Self {
        self.data_step = Some(data_step);
        self.stop_step = Some(stop_step);
        self
    }

    fn window(&self, grid: &SpaceTimeGrid) -> Result<(usize, usize)> {
        let last = grid.num_steps();
        let (a, b) = match self.direction {
            Direction::Forward => (self.data_step.unwrap_or(0), self.stop_step.unwrap_or(last)),
            Direction::Backward => (self.stop_step.unwrap_or(0), self.data_step.unwrap_or(last)),
        };
        if a > b || b > last {
            return Err(Error::InvalidParameter(format!("step window [{a}, {b}] outside 0..={last}")));
        }
        Ok((a, b))
    }
}

/// Interior nodal values of `f(t, .)`.
pub fn interpolate(grid: &SpaceTimeGrid, f: &Expr, t: f64) -> Vec<f64> {
    grid.interior_nodes()
        .iter()
        .map(|&node| f.eval(t, &grid.node_coords(node)[..grid.dim()]))
        .collect()
}

/// Interior values padded with zeros on the boundary.
pub fn to_nodal(grid: &SpaceTimeGrid, interior: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; grid.num_nodes()];
    for (v, &node) in interior.iter().zip(grid.interior_nodes()) {
        out[node] = *v;
    }
    out
}

/// Nodal values of the source for slab `j = (t_j, t_{j+1})` (interior only).
fn source_values(grid: &SpaceTimeGrid, source: &Source, slab: usize, t: f64) -> Option<Vec<f64>> {
    match source {
        Source::None => None,
        Source::Field(e) => Some(interpolate(grid, e, t)),
        Source::Cylinder(set) => {
            let lo = set.pairs.partition_point(|&(j, _)| j < slab);
            let hi = set.pairs.partition_point(|&(j, _)| j <= slab);
            if lo == hi {
                return None;
            }
            let mut f = vec![0.0; grid.num_interior()];
            for &(_, node) in &set.pairs[lo..hi] {
                if let Some(i) = grid.interior_index(node) {
                    f[i] = 1.0 / set.measure;
                }
            }
            Some(f)
        }
    }
}

/// Values of a discrete solution on a window of time levels, with the
/// per-level energy components `||u_k||_{L2}` and `||grad u_k||^2_{L2}`.
#[derive(Clone, Debug)]
pub struct DiscreteSolution {
    grid: Arc<SpaceTimeGrid>,
    direction: Direction,
    first_step: usize,
    values: Vec<Option<Vec<f64>>>,
    l2: Vec<f64>,
    grad_sq: Vec<f64>,
}

impl DiscreteSolution {
    fn new(grid: Arc<SpaceTimeGrid>, direction: Direction, first_step: usize, len: usize) -> Self {
        Self {
            grid,
            direction,
            first_step,
            values: vec![None; len],
            l2: vec![0.0; len],
            grad_sq: vec![0.0; len],
        }
    }

    /// Solution from explicit interior values at consecutive steps.
    pub fn from_values(grid: Arc<SpaceTimeGrid>, direction: Direction, first_step: usize, values: Vec<Vec<f64>>) -> Result<Self> {
        if first_step + values.len() > grid.num_steps() + 1 || values.is_empty() {
            return Err(Error::InvalidParameter("values exceed the time grid".into()));
        }
        if let Some(v) = values.iter().find(|v| v.len() != grid.num_interior()) {
            return Err(Error::DimensionMismatch {
                expected: grid.num_interior(),
                got: v.len(),
            });
        }
        let m = mass_matrix(&grid);
        let k = stiffness_matrix(&grid);
        let mut s = Self::new(grid, direction, first_step, values.len());
        for (i, v) in values.into_iter().enumerate() {
            s.l2[i] = m.bilinear(&v, &v).max(0.0).sqrt();
            s.grad_sq[i] = k.bilinear(&v, &v).max(0.0);
            s.values[i] = Some(v);
        }
        Ok(s)
    }

    pub fn grid(&self) -> &Arc<SpaceTimeGrid> {
        &self.grid
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    pub fn first_step(&self) -> usize {
        self.first_step
    }

    pub fn last_step(&self) -> usize {
        self.first_step + self.values.len() - 1
    }

    /// Step carrying the initial (forward) or terminal (backward) data.
    pub fn data_step(&self) -> usize {
        match self.direction {
            Direction::Forward => self.first_step(),
            Direction::Backward => self.last_step(),
        }
    }

    pub fn contains_step(&self, k: usize) -> bool {
        k >= self.first_step() && k <= self.last_step()
    }

    /// Interior values at step `k` if stored.
    pub fn at(&self, k: usize) -> Option<&[f64]> {
        if !self.contains_step(k) {
            return None;
        }
        self.values[k - self.first_step].as_deref()
    }

    /// Steps with stored values.
    pub fn stored_steps(&self) -> Vec<usize> {
        (self.first_step()..=self.last_step()).filter(|&k| self.at(k).is_some()).collect()
    }

    /// Value at `(step, node)`; zero on the boundary and outside the window.
    pub fn value(&self, k: usize, node: usize) -> f64 {
        match (self.at(k), self.grid.interior_index(node)) {
            (Some(v), Some(i)) => v[i],
            _ => 0.0,
        }
    }

    /// All nodes at step `k` including the zero boundary values.
    pub fn nodal(&self, k: usize) -> Option<Vec<f64>> {
        self.at(k).map(|v| to_nodal(&self.grid, v))
    }

    pub fn l2_norm(&self, k: usize) -> f64 {
        if self.contains_step(k) {
            self.l2[k - self.first_step]
        } else {
            0.0
        }
    }

    pub fn l2_norms(&self) -> &[f64] {
        &self.l2
    }

    /// `||Du||_{L2}` over the window: the levels produced by the march, each
    /// weighted by `dt`.
    pub fn grad_l2(&self) -> f64 {
        let dt = self.grid.dt();
        let skip = match self.direction {
            Direction::Forward => 0,
            Direction::Backward => self.grad_sq.len() - 1,
        };
        self.grad_sq
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != skip)
            .map(|(_, g)| dt * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn sup_l2(&self) -> f64 {
        self.l2.iter().cloned().fold(0.0, f64::max)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EnergyNorm {
    pub sup_l2: f64,
    pub grad_l2: f64,
    pub total: f64,
}

/// `|||u||| = ||Du||_{L2} + max_k ||u(t_k)||_{L2}`.
pub fn energy_norm(solution: &DiscreteSolution) -> EnergyNorm {
    let sup_l2 = solution.sup_l2();
    let grad_l2 = solution.grad_l2();
    EnergyNorm {
        sup_l2,
        grad_l2,
        total: sup_l2 + grad_l2,
    }
}

fn march(problem: &ProblemData, coeffs: &CoefficientField, grid: &Arc<SpaceTimeGrid>, opts: &SolverOptions, expected: Direction) -> Result<DiscreteSolution> {
    if problem.direction != expected {
        return Err(Error::InvalidParameter(format!(
            "problem direction {:?} does not match the solver",
            problem.direction
        )));
    }
    if problem.data.len() != grid.num_interior() {
        return Err(Error::DimensionMismatch {
            expected: grid.num_interior(),
            got: problem.data.len(),
        });
    }
    if let Some(i) = problem.data.iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter(format!("non-finite data at interior node {i}")));
    }
    let (a, b) = problem.window(grid)?;
    let mut stepper = Stepper::new(coeffs, grid, opts)?;
    let consistent = match opts.mass {
        MassKind::Consistent => None,
        MassKind::Lumped => Some(mass_matrix(grid)),
    };
    let stiff = stiffness_matrix(grid);
    let dt = grid.dt();
    let stride = opts.store_stride.max(1);
    let mut sol = DiscreteSolution::new(grid.clone(), expected, a, b - a + 1);

    let record = |sol: &mut DiscreteSolution, stepper: &Stepper, k: usize, u: &[f64]| -> Result<()> {
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { step: k });
        }
        let i = k - a;
        let m = consistent.as_ref().unwrap_or_else(|| stepper.mass());
        sol.l2[i] = m.bilinear(u, u).max(0.0).sqrt();
        sol.grad_sq[i] = stiff.bilinear(u, u).max(0.0);
        let keep = k == a || k == b || (k - a) % stride == 0;
        if keep {
            sol.values[i] = Some(u.to_vec());
        }
        Ok(())
    };

    let mut u = problem.data.clone();
    match expected {
        Direction::Forward => {
            record(&mut sol, &stepper, a, &u)?;
            for k in (a + 1)..=b {
                let t = grid.time(k);
                let load = source_values(grid, &problem.source, k - 1, t).map(|f| stepper.mass().matvec(&f));
                u = stepper.forward(&u, t, dt, load.as_deref())?;
                record(&mut sol, &stepper, k, &u)?;
            }
        }
        Direction::Backward => {
            record(&mut sol, &stepper, b, &u)?;
            for k in ((a + 1)..=b).rev() {
                let t = grid.time(k);
                let load = source_values(grid, &problem.source, k - 1, grid.time(k - 1)).map(|f| stepper.mass().matvec(&f));
                u = stepper.adjoint(&u, t, dt, load.as_deref())?;
                record(&mut sol, &stepper, k - 1, &u)?;
            }
        }
    }
    Ok(sol)
}

/// Backward-Euler march of `Pu = f`, `u = data` at the data step.
pub fn solve_cauchy(problem: &ProblemData, coeffs: &CoefficientField, grid: &Arc<SpaceTimeGrid>, opts: &SolverOptions) -> Result<DiscreteSolution> {
    march(problem, coeffs, grid, opts, Direction::Forward)
}

/// Transposed march for the adjoint operator from terminal data.
pub fn solve_adjoint(problem: &ProblemData, coeffs: &CoefficientField, grid: &Arc<SpaceTimeGrid>, opts: &SolverOptions) -> Result<DiscreteSolution> {
    march(problem, coeffs, grid, opts, Direction::Backward)
}

/// `||f||_{L_r}` of the source over the slabs `first..last`.
pub fn source_norm(source: &Source, grid: &SpaceTimeGrid, first_slab: usize, last_slab: usize, r: f64) -> f64 {
    let dt = grid.dt();
    match source {
        Source::None => 0.0,
        Source::Field(e) => {
            let vol = grid.cell_volume();
            let total: f64 = (first_slab..last_slab)
                .into_par_iter()
                .map(|j| {
                    let t = grid.time(j) + 0.5 * dt;
                    (0..grid.num_cells())
                        .map(|c| e.eval(t, &grid.cell_center(c)[..grid.dim()]).abs().powf(r) * vol * dt)
                        .sum::<f64>()
                })
                .sum();
            total.powf(1.0 / r)
        }
        Source::Cylinder(set) => {
            let total: f64 = set
                .pairs
                .iter()
                .filter(|(j, _)| *j >= first_slab && *j < last_slab)
                .map(|&(_, node)| grid.node_weight(node) * dt * (1.0 / set.measure).powf(r))
                .sum();
            total.powf(1.0 / r)
        }
    }
}

/// `|||u||| / (||psi_0||_{L2} + ||f||_{L_{(2n+4)/(n+4)}})`.
pub fn verify_energy_inequality(solution: &DiscreteSolution, problem: &ProblemData) -> Result<f64> {
    let grid = solution.grid();
    let n = grid.dim() as f64;
    let r = (2.0 * n + 4.0) / (n + 4.0);
    let psi0 = solution.l2_norm(solution.data_step());
    let f = source_norm(&problem.source, grid, solution.first_step(), solution.last_step(), r);
    let denom = psi0 + f;
    if !(denom > 0.0) {
        return Err(Error::ZeroDenominator("zero initial data and source".into()));
    }
    Ok(energy_norm(solution).total / denom)
}

/// Empirical constant of `||u||_{L_{p,q}} <= beta |||u|||` with `p = q = 2(n+2)/n`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EmbeddingConstants {
    pub n: usize,
    pub p_tilde: Exponent,
    pub q_tilde: Exponent,
    pub beta: f64,
}

/// `||u||_{L_p}` over the produced levels by nodal trapezoid quadrature.
pub fn space_time_lp(solution: &DiscreteSolution, p: f64) -> f64 {
    let grid = solution.grid();
    let dt = grid.dt();
    let skip = solution.data_step();
    let total: f64 = solution
        .stored_steps()
        .into_iter()
        .filter(|&k| k != skip)
        .map(|k| {
            let v = solution.at(k).unwrap();
            grid.interior_nodes()
                .iter()
                .zip(v)
                .map(|(&node, u)| grid.node_weight(node) * u.abs().powf(p))
                .sum::<f64>()
                * dt
        })
        .sum();
    total.powf(1.0 / p)
}

pub fn estimate_embedding(corpus: &[DiscreteSolution]) -> Result<EmbeddingConstants> {
    let first = corpus.first().ok_or_else(|| Error::NoSamples("empty solution corpus".into()))?;
    let n = first.grid().dim();
    let p = 2.0 * (n as f64 + 2.0) / n as f64;
    let mut beta = 0.0f64;
    for s in corpus {
        if s.stored_steps().len() != s.last_step() - s.first_step() + 1 {
            return Err(Error::InvalidParameter("solutions must store every step".into()));
        }
        let e = energy_norm(s).total;
        if e > 0.0 {
            beta = beta.max(space_time_lp(s, p) / e);
        }
    }
    Ok(EmbeddingConstants {
        n,
        p_tilde: Exponent(p),
        q_tilde: Exponent(p),
        beta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::{CoefficientSpec, MatrixField};
    use crate::grid::GridConfig;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn grid1(cells: usize, lo: f64, hi: f64, t_end: f64, dt: f64) -> Arc<SpaceTimeGrid> {
        Arc::new(SpaceTimeGrid::build(&GridConfig::cube(1, lo, hi, cells, 0.0, t_end, dt)).unwrap())
    }

    fn field(n: usize, a: MatrixField, b: Vec<Expr>, c: Vec<Expr>, d: Option<Expr>) -> CoefficientField {
        CoefficientField::new(CoefficientSpec {
            dim: n,
            a,
            b,
            c,
            d,
            add_div_b: false,
            nu: 0.1,
            theta: 10.0,
            p: if n == 2 { Exponent(4.0) } else { Exponent::INFINITY },
            q: if n == 2 { Exponent(4.0) } else { Exponent(2.0) },
        })
        .unwrap()
    }

    #[test]
    fn laplacian_stencil() {
        let g = grid1(4, 0.0, 1.0, 1.0, 0.1);
        let b = assemble_operator(&CoefficientField::heat(1, 1.0), &g, 0.0, 3).unwrap().to_dense();
        let exp = [[8.0, -4.0, 0.0], [-4.0, 8.0, -4.0], [0.0, -4.0, 8.0]];
        for i in 0..3 {
            for j in 0..3 {
                assert_relative_eq!(b[i][j], exp[i][j], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn reaction_term_is_the_mass_matrix() {
        let g = grid1(4, 0.0, 1.0, 1.0, 0.1);
        let f = field(1, MatrixField::Scalar { value: Expr::zero() }, vec![], vec![], Some(Expr::constant(1.0)));
        let b = assemble_operator(&f, &g, 0.0, 3).unwrap().to_dense();
        let h = 0.25;
        assert_relative_eq!(b[1][1], 2.0 * h / 3.0, epsilon = 1e-14);
        assert_relative_eq!(b[1][0], h / 6.0, epsilon = 1e-14);
        assert_eq!(b[0][2], 0.0);
        let m = mass_matrix(&g).to_dense();
        for (x, y) in m.iter().flatten().zip(b.iter().flatten()) {
            assert_relative_eq!(x, y, epsilon = 1e-15);
        }
    }

    #[test]
    fn transport_term_row_sums_are_boundary_fluxes() {
        let g = grid1(8, 0.0, 1.0, 1.0, 0.1);
        let f = field(1, MatrixField::Scalar { value: Expr::zero() }, vec![], vec![Expr::constant(1.0)], None);
        let b = assemble_operator(&f, &g, 0.0, 3).unwrap().to_dense();
        let m = b.len();
        for i in 0..m {
            for j in 0..m {
                if i != j {
                    assert_relative_eq!(b[i][j], -b[j][i], epsilon = 1e-14);
                }
            }
            assert!(b[i][i].abs() < 1e-14);
        }
        let sums: Vec<f64> = b.iter().map(|r| r.iter().sum()).collect();
        assert_relative_eq!(sums[0], 0.5, epsilon = 1e-14);
        assert_relative_eq!(sums[m - 1], -0.5, epsilon = 1e-14);
        assert!(sums[1..m - 1].iter().all(|s| s.abs() < 1e-14));
    }

    #[test]
    fn zero_data_gives_zero() {
        let g = grid1(16, 0.0, 1.0, 0.2, 0.01);
        let s = solve_cauchy(&ProblemData::forward(vec![0.0; 15]), &CoefficientField::heat(1, 1.0), &g, &SolverOptions::default()).unwrap();
        assert!(s.stored_steps().iter().all(|&k| s.at(k).unwrap().iter().all(|v| *v == 0.0)));
        let a = solve_adjoint(&ProblemData::backward(vec![0.0; 15]), &CoefficientField::heat(1, 1.0), &g, &SolverOptions::default()).unwrap();
        assert_eq!(energy_norm(&a).total, 0.0);
    }

    #[test]
    fn heat_gaussian_matches_analytic_variance() {
        let g = grid1(512, -8.0, 8.0, 0.5, 1e-3);
        let sigma2 = 0.1;
        let psi = Expr::Gaussian {
            center: vec![0.0],
            variance: sigma2,
        };
        let s = solve_cauchy(&ProblemData::forward(interpolate(&g, &psi, 0.0)), &CoefficientField::heat(1, 1.0), &g, &SolverOptions::default()).unwrap();
        let mut worst = 0.0f64;
        for k in [100usize, 250, 500] {
            let t = g.time(k);
            let exact = interpolate(&g, &Expr::Gaussian { center: vec![0.0], variance: sigma2 + 2.0 * t }, t);
            let u = s.at(k).unwrap();
            let num: f64 = u.iter().zip(&exact).map(|(a, b)| (a - b).powi(2)).sum();
            let den: f64 = exact.iter().map(|b| b * b).sum();
            worst = worst.max((num / den).sqrt());
        }
        assert!(worst < 0.02, "relative L2 error {worst}");
    }

    #[test]
    fn heat_energy_identity_bound() {
        let g = grid1(128, -4.0, 4.0, 0.5, 1e-2);
        let psi = Expr::Gaussian { center: vec![0.3], variance: 0.2 };
        let p = ProblemData::forward(interpolate(&g, &psi, 0.0));
        let s = solve_cauchy(&p, &CoefficientField::heat(1, 1.0), &g, &SolverOptions::default()).unwrap();
        let e = energy_norm(&s);
        let psi0 = s.l2_norm(0);
        let last = s.last_step();
        assert!(0.5 * s.l2_norm(last).powi(2) + e.grad_l2.powi(2) <= 0.5 * psi0 * psi0 * (1.0 + 1e-12));
        assert!(e.total * e.total <= 2.5 * psi0 * psi0);
        assert!(verify_energy_inequality(&s, &p).unwrap() <= 2.5);
    }

    #[test]
    fn static_hat_energy_components() {
        let g = grid1(8, 0.0, 1.0, 0.5, 0.05);
        let mut hat = vec![0.0; 7];
        hat[3] = 2.0;
        let vals = vec![hat; g.num_steps() + 1];
        let s = DiscreteSolution::from_values(g.clone(), Direction::Forward, 0, vals).unwrap();
        let e = energy_norm(&s);
        let h: f64 = 0.125;
        assert_relative_eq!(e.sup_l2, (2.0 * h / 3.0f64).sqrt() * 2.0, epsilon = 1e-12);
        // The initial level is data; the march contributes N = T/dt levels.
        let steps = g.num_steps() as f64;
        let t = steps * g.dt();
        assert_relative_eq!(e.grad_l2, 2.0 * (2.0 * t / h).sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn recorded_norms_match_recomputation() {
        let g = grid1(32, 0.0, 1.0, 0.2, 0.02);
        let psi = Expr::bump(0, 0.5, 0.3, 2);
        let s = solve_cauchy(&ProblemData::forward(interpolate(&g, &psi, 0.0)), &CoefficientField::heat(1, 1.0), &g, &SolverOptions::default()).unwrap();
        let vals: Vec<Vec<f64>> = s.stored_steps().iter().map(|&k| s.at(k).unwrap().to_vec()).collect();
        let r = DiscreteSolution::from_values(g, Direction::Forward, 0, vals).unwrap();
        let (a, b) = (energy_norm(&s), energy_norm(&r));
        assert_relative_eq!(a.total, b.total, max_relative = 1e-10);
        assert_relative_eq!(a.grad_l2, b.grad_l2, max_relative = 1e-10);
    }

    #[test]
    fn self_adjoint_backward_equals_reflected_forward() {
        let g = grid1(32, -1.0, 1.0, 0.3, 0.01);
        let f = field(1, MatrixField::Scalar { value: Expr::constant(1.3) }, vec![Expr::x(0)], vec![Expr::x(0)], Some(Expr::constant(2.0)));
        let data = interpolate(&g, &Expr::bump(0, 0.2, 0.5, 2), 0.0);
        let fwd = solve_cauchy(&ProblemData::forward(data.clone()), &f, &g, &SolverOptions::default()).unwrap();
        let bwd = solve_adjoint(&ProblemData::backward(data), &f, &g, &SolverOptions::default()).unwrap();
        let n = g.num_steps();
        for k in 0..=n {
            for (u, v) in fwd.at(k).unwrap().iter().zip(bwd.at(n - k).unwrap()) {
                assert!((u - v).abs() < 1e-10 * (1.0 + u.abs()));
            }
        }
    }

    #[test]
    fn manufactured_solution_orders() {
        // u = e^{-t} sin(pi x) solves the heat equation with f = (pi^2 - 1) u.
        let pi = std::f64::consts::PI;
        let exact = |t: f64| Expr::product(vec![Expr::constant((-t).exp()), Expr::Cos { axis: 0, freq: pi, phase: -pi / 2.0 }]);
        let source = Expr::product(vec![
            Expr::constant(pi * pi - 1.0),
            Expr::Cos { axis: 0, freq: pi, phase: -pi / 2.0 },
        ]);
        let err = |cells: usize, dt: f64| {
            let t_end = 0.2;
            let g = grid1(cells, 0.0, 1.0, t_end, dt);
            let src = Source::Field(Expr::product(vec![source.clone(), time_exp()]));
            let p = ProblemData::forward(interpolate(&g, &exact(0.0), 0.0)).with_source(src);
            let s = solve_cauchy(&p, &CoefficientField::heat(1, 1.0), &g, &SolverOptions::default()).unwrap();
            let k = g.num_steps();
            let e = interpolate(&g, &exact(g.time(k)), 0.0);
            let u = s.at(k).unwrap();
            let m = mass_matrix(&g);
            let d: Vec<f64> = u.iter().zip(&e).map(|(a, b)| a - b).collect();
            m.bilinear(&d, &d).sqrt()
        };
        let hs: Vec<f64> = [8usize, 16, 32].iter().map(|&c| err(c, 1e-5)).collect();
        for w in hs.windows(2) {
            let order = (w[0] / w[1]).log2();
            assert!((order - 2.0).abs() <= 0.3, "space order {order} from {hs:?}");
        }
        let ts: Vec<f64> = [0.02, 0.01, 0.005].iter().map(|&dt| err(512, dt)).collect();
        for w in ts.windows(2) {
            let order = (w[0] / w[1]).log2();
            assert!((order - 1.0).abs() <= 0.3, "time order {order} from {ts:?}");
        }
    }

    /// Degree-8 Taylor polynomial of `e^{-t}`, accurate to 1e-10 on [0, 0.2].
    fn time_exp() -> Expr {
        let mut terms = vec![];
        let mut fact = 1.0;
        for k in 0..9 {
            if k > 0 {
                fact *= k as f64;
            }
            let mut factors = vec![Expr::constant((-1f64).powi(k) / fact)];
            for _ in 0..k {
                factors.push(Expr::T);
            }
            terms.push(Expr::product(factors));
        }
        Expr::sum(terms)
    }

    #[test]
    fn nonnegative_drift_free_l2_is_non_increasing() {
        let g = grid1(64, -1.0, 1.0, 0.5, 0.01);
        let f = field(1, MatrixField::Scalar { value: Expr::constant(1.0) }, vec![Expr::x(0)], vec![Expr::x(0)], Some(Expr::constant(1.0)));
        let data = interpolate(&g, &Expr::bump(0, 0.1, 0.6, 1), 0.0);
        let s = solve_cauchy(&ProblemData::forward(data), &f, &g, &SolverOptions::default()).unwrap();
        for w in s.l2_norms().windows(2) {
            assert!(w[1] <= w[0] + 1e-8);
        }
    }

    #[test]
    fn embedding_constant_is_finite_and_stable() {
        let beta = |cells: usize, dt: f64| {
            let g = grid1(cells, -2.0, 2.0, 0.5, dt);
            let corpus: Vec<DiscreteSolution> = [0.05, 0.1, 0.3]
                .iter()
                .map(|&v| {
                    let psi = Expr::Gaussian { center: vec![0.2], variance: v };
                    solve_cauchy(&ProblemData::forward(interpolate(&g, &psi, 0.0)), &CoefficientField::heat(1, 1.0), &g, &SolverOptions::default()).unwrap()
                })
                .collect();
            estimate_embedding(&corpus).unwrap().beta
        };
        let (b1, b2) = (beta(128, 4e-3), beta(256, 2e-3));
        assert!(b1.is_finite() && b1 > 0.0);
        assert!((b1 - b2).abs() / b2 < 0.1, "{b1} vs {b2}");
    }

    fn rotated_field(skew: f64) -> CoefficientField {
        field(
            2,
            MatrixField::RotatedDiagonal { angle: 0.5, diagonal: [1.0, 2.0], skew },
            vec![Expr::x(1).scaled(0.5), Expr::zero()],
            vec![Expr::zero(), Expr::x(0).scaled(-0.3)],
            Some(Expr::constant(0.2)),
        )
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]
        #[test]
        fn duality_pairing_holds(seed in prop::collection::vec(-1.0f64..1.0, 98), skew in -0.4f64..0.4) {
            let g = Arc::new(SpaceTimeGrid::build(&GridConfig::cube(2, -1.0, 1.0, 8, 0.0, 0.2, 0.02)).unwrap());
            let f = rotated_field(skew);
            let (psi, gt) = seed.split_at(49);
            let opts = SolverOptions::default();
            let u = solve_cauchy(&ProblemData::forward(psi.to_vec()), &f, &g, &opts).unwrap();
            let v = solve_adjoint(&ProblemData::backward(gt.to_vec()), &f, &g, &opts).unwrap();
            let m = mass_matrix(&g);
            let lhs = m.bilinear(u.at(g.num_steps()).unwrap(), gt);
            let rhs = m.bilinear(psi, v.at(0).unwrap());
            prop_assert!((lhs - rhs).abs() <= 1e-9 * (lhs.abs() + rhs.abs()).max(1e-12));
        }
    }

    #[test]
    fn iterative_duality_in_three_dimensions() {
        let g = Arc::new(SpaceTimeGrid::build(&GridConfig::cube(3, 0.0, 1.0, 6, 0.0, 0.05, 0.01)).unwrap());
        let f = field(3, MatrixField::identity(), vec![Expr::constant(0.5), Expr::zero(), Expr::zero()], vec![], None);
        let opts = SolverOptions {
            direct: DirectLimits { max_unknowns: 0, max_band_entries: 0 },
            ..SolverOptions::default()
        };
        let m = g.num_interior();
        let psi: Vec<f64> = (0..m).map(|i| ((i * 7) % 5) as f64 - 2.0).collect();
        let gt: Vec<f64> = (0..m).map(|i| ((i * 3) % 4) as f64 - 1.5).collect();
        let u = solve_cauchy(&ProblemData::forward(psi.clone()), &f, &g, &opts).unwrap();
        let v = solve_adjoint(&ProblemData::backward(gt.clone()), &f, &g, &opts).unwrap();
        let mm = mass_matrix(&g);
        let lhs = mm.bilinear(u.at(g.num_steps()).unwrap(), &gt);
        let rhs = mm.bilinear(&psi, v.at(0).unwrap());
        let scale = mm.bilinear(&gt, &gt).sqrt() * u.l2_norm(g.num_steps());
        assert!((lhs - rhs).abs() <= 1e-9 * scale, "{lhs} {rhs} {scale}");
    }
}
