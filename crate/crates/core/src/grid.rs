//! Space-time lattices over box domains and parabolic geometry.
//!
//! Nodes are numbered with axis 0 varying fastest. A node is a boundary node
//! iff it lies on the boundary of the box; interior nodes carry the unknowns
//! of the discrete problems and are numbered in the same order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest supported spatial dimension.
pub const MAX_DIM: usize = 3;

const NOT_INTERIOR: usize = usize::MAX;

/// User-facing grid parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub cells: Vec<usize>,
    pub t_start: f64,
    pub t_end: f64,
    pub dt: f64,
}

impl GridConfig {
    /// Uniform cube `[lower, upper]^n` with the same cell count on every axis.
    pub fn cube(n: usize, lower: f64, upper: f64, cells: usize, t_start: f64, t_end: f64, dt: f64) -> Self {
        Self {
            lower: vec![lower; n],
            upper: vec![upper; n],
            cells: vec![cells; n],
            t_start,
            t_end,
            dt,
        }
    }
}

/// A point `X = (t, x)` in space-time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpaceTimePoint {
    pub t: f64,
    pub x: Vec<f64>,
}

impl SpaceTimePoint {
    pub fn new(t: f64, x: &[f64]) -> Self {
        Self { t, x: x.to_vec() }
    }
}

/// Parabolic distance `max(sqrt|t - s|, |x - y|)`.
pub fn parabolic_distance(a: &SpaceTimePoint, b: &SpaceTimePoint) -> Result<f64> {
    if a.x.len() != b.x.len() {
        return Err(Error::DimensionMismatch {
            expected: a.x.len(),
            got: b.x.len(),
        });
    }
    let spatial = a
        .x
        .iter()
        .zip(&b.x)
        .map(|(p, q)| (p - q) * (p - q))
        .sum::<f64>()
        .sqrt();
    Ok((a.t - b.t).abs().sqrt().max(spatial))
}

/// Uniform tensor-product lattice on `(t_start, t_end) x box`.
#[derive(Clone, Debug)]
pub struct SpaceTimeGrid {
    n: usize,
    lower: [f64; MAX_DIM],
    upper: [f64; MAX_DIM],
    cells: [usize; MAX_DIM],
    h: [f64; MAX_DIM],
    t_start: f64,
    dt: f64,
    steps: usize,
    nodes_per_axis: [usize; MAX_DIM],
    strides: [usize; MAX_DIM],
    num_nodes: usize,
    interior_of_node: Vec<usize>,
    interior_nodes: Vec<usize>,
}

impl SpaceTimeGrid {
    /// Builds the lattice. The number of time steps is `round((t_end - t_start) / dt)`
    /// when that quotient is integral to 1e-9, and its ceiling otherwise; the
    /// effective end time is `t_start + steps * dt`.
    pub fn build(config: &GridConfig) -> Result<Self> {
        let n = config.lower.len();
        if n == 0 || n > MAX_DIM {
            return Err(Error::InvalidGrid(format!("dimension {n} not in 1..=3")));
        }
        if config.upper.len() != n || config.cells.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: config.upper.len().min(config.cells.len()),
            });
        }
        let mut lower = [0.0; MAX_DIM];
        let mut upper = [0.0; MAX_DIM];
        let mut cells = [0usize; MAX_DIM];
        let mut h = [0.0; MAX_DIM];
        let mut nodes_per_axis = [1usize; MAX_DIM];
        for a in 0..n {
            let (lo, hi, c) = (config.lower[a], config.upper[a], config.cells[a]);
            if !lo.is_finite() || !hi.is_finite() || hi <= lo {
                return Err(Error::InvalidGrid(format!(
                    "axis {a}: non-positive extent [{lo}, {hi}]"
                )));
            }
            if c < 4 {
                return Err(Error::InvalidGrid(format!(
                    "axis {a}: {c} cells, at least 4 required"
                )));
            }
            lower[a] = lo;
            upper[a] = hi;
            cells[a] = c;
            h[a] = (hi - lo) / c as f64;
            nodes_per_axis[a] = c + 1;
        }
        let window = config.t_end - config.t_start;
        if !(config.dt > 0.0) || !config.dt.is_finite() {
            return Err(Error::InvalidGrid(format!("dt = {} must be positive", config.dt)));
        }
        if !(window > 0.0) {
            return Err(Error::InvalidGrid(format!(
                "time window [{}, {}] is empty",
                config.t_start, config.t_end
            )));
        }
        if config.dt > window * (1.0 + 1e-12) {
            return Err(Error::InvalidGrid(format!(
                "dt = {} exceeds the time window {}",
                config.dt, window
            )));
        }
        let ratio = window / config.dt;
        let steps = if (ratio - ratio.round()).abs() <= 1e-9 * ratio.max(1.0) {
            ratio.round() as usize
        } else {
            ratio.ceil() as usize
        };

        let mut strides = [0usize; MAX_DIM];
        let mut acc = 1usize;
        for a in 0..MAX_DIM {
            strides[a] = acc;
            acc *= nodes_per_axis[a];
        }
        let num_nodes = acc;

        let mut interior_of_node = vec![NOT_INTERIOR; num_nodes];
        let mut interior_nodes = Vec::new();
        for node in 0..num_nodes {
            let mut idx = [0usize; MAX_DIM];
            let mut rem = node;
            for a in 0..MAX_DIM {
                idx[a] = rem % nodes_per_axis[a];
                rem /= nodes_per_axis[a];
            }
            let boundary = (0..n).any(|a| idx[a] == 0 || idx[a] == cells[a]);
            if !boundary {
                interior_of_node[node] = interior_nodes.len();
                interior_nodes.push(node);
            }
        }

        Ok(Self {
            n,
            lower,
            upper,
            cells,
            h,
            t_start: config.t_start,
            dt: config.dt,
            steps,
            nodes_per_axis,
            strides,
            num_nodes,
            interior_of_node,
            interior_nodes,
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower[..self.n]
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper[..self.n]
    }

    pub fn cells(&self) -> &[usize] {
        &self.cells[..self.n]
    }

    pub fn spacing(&self) -> &[f64] {
        &self.h[..self.n]
    }

    pub fn max_spacing(&self) -> f64 {
        self.spacing().iter().cloned().fold(0.0, f64::max)
    }

    pub fn min_spacing(&self) -> f64 {
        self.spacing().iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn cell_volume(&self) -> f64 {
        self.spacing().iter().product()
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn t_start(&self) -> f64 {
        self.t_start
    }

    pub fn t_end(&self) -> f64 {
        self.time(self.steps)
    }

    /// Number of time steps; times are `t_0 .. t_steps`.
    pub fn num_steps(&self) -> usize {
        self.steps
    }

    pub fn time(&self, step: usize) -> f64 {
        self.t_start + step as f64 * self.dt
    }

    /// Nearest time level to `t`, clamped to the grid.
    pub fn nearest_step(&self, t: f64) -> usize {
        let k = ((t - self.t_start) / self.dt).round();
        k.clamp(0.0, self.steps as f64) as usize
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_interior(&self) -> usize {
        self.interior_nodes.len()
    }

    pub fn num_cells(&self) -> usize {
        self.cells().iter().product()
    }

    pub fn nodes_per_axis(&self) -> &[usize] {
        &self.nodes_per_axis[..self.n]
    }

    pub fn node_index(&self, idx: &[usize]) -> usize {
        idx.iter().zip(&self.strides).map(|(i, s)| i * s).sum()
    }

    pub fn node_multi_index(&self, node: usize) -> [usize; MAX_DIM] {
        let mut idx = [0usize; MAX_DIM];
        let mut rem = node;
        for a in 0..MAX_DIM {
            idx[a] = rem % self.nodes_per_axis[a];
            rem /= self.nodes_per_axis[a];
        }
        idx
    }

    fn axis_coord(&self, axis: usize, i: usize) -> f64 {
        if i == self.cells[axis] {
            self.upper[axis]
        } else {
            self.lower[axis] + i as f64 * self.h[axis]
        }
    }

    /// Coordinates of a node; unused trailing axes are zero.
    pub fn node_coords(&self, node: usize) -> [f64; MAX_DIM] {
        let idx = self.node_multi_index(node);
        let mut x = [0.0; MAX_DIM];
        for a in 0..self.n {
            x[a] = self.axis_coord(a, idx[a]);
        }
        x
    }

    pub fn is_boundary(&self, node: usize) -> bool {
        self.interior_of_node[node] == NOT_INTERIOR
    }

    pub fn interior_index(&self, node: usize) -> Option<usize> {
        match self.interior_of_node[node] {
            NOT_INTERIOR => None,
            i => Some(i),
        }
    }

    pub fn interior_nodes(&self) -> &[usize] {
        &self.interior_nodes
    }

    /// Volume of the node's dual cell clipped to the box (trapezoid weight).
    pub fn node_weight(&self, node: usize) -> f64 {
        let idx = self.node_multi_index(node);
        (0..self.n)
            .map(|a| {
                if idx[a] == 0 || idx[a] == self.cells[a] {
                    0.5 * self.h[a]
                } else {
                    self.h[a]
                }
            })
            .product()
    }

    /// Half-width of the band of the interior Q1 stencil.
    pub fn interior_bandwidth(&self) -> usize {
        let mut stride = 1usize;
        let mut band = 0usize;
        for a in 0..self.n {
            band += stride;
            stride *= self.cells[a] - 1;
        }
        band
    }

    /// Multi-index of the lower corner of a cell.
    pub fn cell_multi_index(&self, cell: usize) -> [usize; MAX_DIM] {
        let mut idx = [0usize; MAX_DIM];
        let mut rem = cell;
        for a in 0..self.n {
            idx[a] = rem % self.cells[a];
            rem /= self.cells[a];
        }
        idx
    }

    /// The `2^n` corner nodes of a cell; corner `c` has bit `a` set when it
    /// sits at the upper end of axis `a`.
    pub fn cell_corners(&self, cell: usize) -> ([usize; 8], usize) {
        let base = self.cell_multi_index(cell);
        let count = 1usize << self.n;
        let mut out = [0usize; 8];
        for (c, slot) in out.iter_mut().enumerate().take(count) {
            let mut node = 0;
            for a in 0..self.n {
                let i = base[a] + ((c >> a) & 1);
                node += i * self.strides[a];
            }
            *slot = node;
        }
        (out, count)
    }

    pub fn cell_lower_corner(&self, cell: usize) -> [f64; MAX_DIM] {
        let idx = self.cell_multi_index(cell);
        let mut x = [0.0; MAX_DIM];
        for a in 0..self.n {
            x[a] = self.axis_coord(a, idx[a]);
        }
        x
    }

    pub fn cell_center(&self, cell: usize) -> [f64; MAX_DIM] {
        let mut x = self.cell_lower_corner(cell);
        for a in 0..self.n {
            x[a] += 0.5 * self.h[a];
        }
        x
    }

    /// Node closest to `x` (componentwise rounding).
    pub fn nearest_node(&self, x: &[f64]) -> usize {
        let mut idx = [0usize; MAX_DIM];
        for a in 0..self.n {
            let i = ((x[a] - self.lower[a]) / self.h[a]).round();
            idx[a] = i.clamp(0.0, self.cells[a] as f64) as usize;
        }
        self.node_index(&idx[..self.n])
    }

    /// Distance from `x` to the box boundary (negative outside).
    pub fn distance_to_boundary(&self, x: &[f64]) -> f64 {
        (0..self.n)
            .map(|a| (x[a] - self.lower[a]).min(self.upper[a] - x[a]))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.n && self.distance_to_boundary(x) >= 0.0
    }

    /// A new grid with identical geometry and a different time window.
    pub fn with_time_window(&self, t_start: f64, t_end: f64, dt: f64) -> Result<Self> {
        Self::build(&GridConfig {
            lower: self.lower().to_vec(),
            upper: self.upper().to_vec(),
            cells: self.cells().to_vec(),
            t_start,
            t_end,
            dt,
        })
    }

    pub fn config(&self) -> GridConfig {
        GridConfig {
            lower: self.lower().to_vec(),
            upper: self.upper().to_vec(),
            cells: self.cells().to_vec(),
            t_start: self.t_start,
            t_end: self.t_end(),
            dt: self.dt,
        }
    }

    /// Checks that two grids describe the same lattice.
    pub fn same_lattice(&self, other: &Self) -> bool {
        self.n == other.n
            && self.lower == other.lower
            && self.upper == other.upper
            && self.cells == other.cells
            && self.t_start == other.t_start
            && self.dt == other.dt
            && self.steps == other.steps
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    /// `(t0 - r^2, t0] x (B_r(x0) ∩ Ω)`
    Past,
    /// `[t0, t0 + r^2) x (B_r(x0) ∩ Ω)`
    Future,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParabolicCylinder {
    pub center: SpaceTimePoint,
    pub radius: f64,
    pub orientation: Orientation,
}

impl ParabolicCylinder {
    pub fn past(center: SpaceTimePoint, radius: f64) -> Self {
        Self {
            center,
            radius,
            orientation: Orientation::Past,
        }
    }

    pub fn future(center: SpaceTimePoint, radius: f64) -> Self {
        Self {
            center,
            radius,
            orientation: Orientation::Future,
        }
    }

    pub fn contains_time(&self, t: f64) -> bool {
        let r2 = self.radius * self.radius;
        match self.orientation {
            Orientation::Past => t > self.center.t - r2 && t <= self.center.t,
            Orientation::Future => t >= self.center.t && t < self.center.t + r2,
        }
    }

    pub fn contains_space(&self, x: &[f64]) -> bool {
        let d2: f64 = self
            .center
            .x
            .iter()
            .zip(x)
            .map(|(c, p)| (c - p) * (c - p))
            .sum();
        d2.sqrt() <= self.radius * (1.0 + 1e-12)
    }

    /// Same cylinder with another radius.
    pub fn with_radius(&self, radius: f64) -> Self {
        Self {
            radius,
            ..self.clone()
        }
    }
}

/// Discrete cylinder: pairs `(interval, node)` where interval `j` is the time
/// slab `(t_j, t_{j+1})`. For forward marches the slab is represented by the
/// values at step `j + 1`, for backward marches by those at step `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct CylinderSet {
    pub pairs: Vec<(usize, usize)>,
    pub measure: f64,
}

impl CylinderSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn intervals(&self) -> impl Iterator<Item = usize> + '_ {
        let mut last = None;
        self.pairs.iter().filter_map(move |&(j, _)| {
            if last == Some(j) {
                None
            } else {
                last = Some(j);
                Some(j)
            }
        })
    }
}

/// Lattice pairs whose slab midpoints and node positions lie in the cylinder.
/// When no pair qualifies but the center lies in the closed space-time box,
/// the single slab and node containing the center are returned.
pub fn cylinder_nodes(grid: &SpaceTimeGrid, cyl: &ParabolicCylinder) -> Result<CylinderSet> {
    let n = grid.dim();
    if cyl.center.x.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: cyl.center.x.len(),
        });
    }
    if !(cyl.radius > 0.0) {
        return Err(Error::InvalidParameter(format!("radius {} must be positive", cyl.radius)));
    }
    let dt = grid.dt();
    let intervals: Vec<usize> = (0..grid.num_steps())
        .filter(|&j| cyl.contains_time(grid.time(j) + 0.5 * dt))
        .collect();
    let nodes: Vec<usize> = ball_nodes(grid, &cyl.center.x, cyl.radius);

    let mut pairs = Vec::with_capacity(intervals.len() * nodes.len());
    for &j in &intervals {
        for &node in &nodes {
            pairs.push((j, node));
        }
    }
    if pairs.is_empty() {
        let t0 = cyl.center.t;
        let inside_time = t0 >= grid.t_start() && t0 <= grid.t_end();
        if !inside_time || !grid.contains(&cyl.center.x) {
            return Err(Error::EmptyCylinder);
        }
        let rel = (t0 - grid.t_start()) / dt;
        let j = match cyl.orientation {
            Orientation::Past => rel.ceil() as isize - 1,
            Orientation::Future => rel.floor() as isize,
        };
        let j = j.clamp(0, grid.num_steps() as isize - 1) as usize;
        pairs.push((j, grid.nearest_node(&cyl.center.x)));
    }
    let measure = pairs.iter().map(|&(_, node)| grid.node_weight(node) * dt).sum();
    Ok(CylinderSet { pairs, measure })
}

/// Nodes (interior and boundary) within the closed ball `B_r(x0)`.
pub fn ball_nodes(grid: &SpaceTimeGrid, x0: &[f64], r: f64) -> Vec<usize> {
    let n = grid.dim();
    let mut lo = [0usize; MAX_DIM];
    let mut hi = [0usize; MAX_DIM];
    for a in 0..n {
        let h = grid.spacing()[a];
        let l = ((x0[a] - r - grid.lower()[a]) / h).floor().max(0.0) as usize;
        let u = (((x0[a] + r - grid.lower()[a]) / h).ceil().max(0.0) as usize).min(grid.cells()[a]);
        lo[a] = l.min(grid.cells()[a]);
        hi[a] = u;
    }
    let mut out = Vec::new();
    let mut idx = lo;
    'outer: loop {
        let node = grid.node_index(&idx[..n]);
        let x = grid.node_coords(node);
        let d2: f64 = (0..n).map(|a| (x[a] - x0[a]).powi(2)).sum();
        if d2.sqrt() <= r * (1.0 + 1e-12) {
            out.push(node);
        }
        for a in 0..n {
            if idx[a] < hi[a] {
                idx[a] += 1;
                continue 'outer;
            }
            idx[a] = lo[a];
        }
        break;
    }
    out.sort_unstable();
    out
}
