//! Operator data `(A, b, c, d)` and checks of the structural hypotheses:
//! uniform ellipticity and boundedness of `A`, the critical mixed-norm bound
//! on `b - c`, and the sign conditions `d - div b >= 0`, `div(b - c) >= 0`
//! in the weak sense.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::expr::{Expr, Var};
use crate::grid::{SpaceTimeGrid, MAX_DIM};
use crate::quadrature::{halved, tensor_rule};

pub type Mat = [[f64; MAX_DIM]; MAX_DIM];
pub type Vec3 = [f64; MAX_DIM];

/// A Lebesgue exponent in `[1, inf]`. Serialized as a number, or `"inf"`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct Exponent(pub f64);

impl Exponent {
    pub const INFINITY: Exponent = Exponent(f64::INFINITY);

    pub fn is_infinite(self) -> bool {
        self.0.is_infinite()
    }

    /// `1 / p`, zero for `p = inf`.
    pub fn reciprocal(self) -> f64 {
        if self.is_infinite() {
            0.0
        } else {
            1.0 / self.0
        }
    }
}

impl fmt::Display for Exponent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_infinite() {
            write!(f, "inf")
        } else {
            write!(f, "{}", self.0)
        }
    }
}

impl Serialize for Exponent {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for Exponent {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Int(i64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Exponent(v)),
            Raw::Int(v) => Ok(Exponent(v as f64)),
            Raw::Str(s) if s == "inf" || s == "infinity" => Ok(Exponent::INFINITY),
            Raw::Str(s) => Err(serde::de::Error::custom(format!("invalid exponent {s:?}"))),
        }
    }
}

/// Which family of rate constants applies: `p > n` (finite `q`) or the
/// endpoint `p = n`, `q = inf`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Supercritical,
    Endpoint,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::Supercritical => "p>n",
            Regime::Endpoint => "p=n",
        })
    }
}

/// Checks `p, q in [2, inf]` and `n/p + 2/q = 1`.
pub fn check_critical(n: usize, p: Exponent, q: Exponent) -> Result<Regime> {
    for e in [p, q] {
        if e.0.is_nan() || e.0 < 2.0 {
            return Err(Error::InvalidExponent(format!("{e} is outside [2, inf]")));
        }
    }
    let lhs = n as f64 * p.reciprocal() + 2.0 * q.reciprocal();
    if (lhs - 1.0).abs() > 1e-12 {
        return Err(Error::NotCritical { n, p: p.0, q: q.0 });
    }
    Ok(if q.is_infinite() {
        Regime::Endpoint
    } else {
        Regime::Supercritical
    })
}

/// The principal coefficient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MatrixField {
    /// `a(t, x) I`
    Scalar { value: Expr },
    Diagonal { entries: Vec<Expr> },
    /// Two-dimensional `R(angle) diag(d) R^T + skew [[0, 1], [-1, 0]]`.
    RotatedDiagonal {
        angle: f64,
        diagonal: [f64; 2],
        #[serde(default)]
        skew: f64,
    },
    Full { entries: Vec<Vec<Expr>> },
}

impl MatrixField {
    pub fn identity() -> Self {
        MatrixField::Scalar {
            value: Expr::constant(1.0),
        }
    }

    pub fn eval(&self, n: usize, t: f64, x: &[f64]) -> Mat {
        let mut a = [[0.0; MAX_DIM]; MAX_DIM];
        match self {
            MatrixField::Scalar { value } => {
                let v = value.eval(t, x);
                for (i, row) in a.iter_mut().enumerate().take(n) {
                    row[i] = v;
                }
            }
            MatrixField::Diagonal { entries } => {
                for (i, e) in entries.iter().enumerate().take(n) {
                    a[i][i] = e.eval(t, x);
                }
            }
            MatrixField::RotatedDiagonal {
                angle,
                diagonal,
                skew,
            } => {
                let (s, c) = angle.sin_cos();
                let [l1, l2] = *diagonal;
                a[0][0] = c * c * l1 + s * s * l2;
                a[1][1] = s * s * l1 + c * c * l2;
                a[0][1] = c * s * (l1 - l2) + skew;
                a[1][0] = c * s * (l1 - l2) - skew;
            }
            MatrixField::Full { entries } => {
                for i in 0..n {
                    for j in 0..n {
                        a[i][j] = entries[i][j].eval(t, x);
                    }
                }
            }
        }
        a
    }

    fn validate(&self, n: usize) -> Result<()> {
        match self {
            MatrixField::Scalar { value } => value.validate(),
            MatrixField::Diagonal { entries } => {
                if entries.len() != n {
                    return Err(Error::DimensionMismatch {
                        expected: n,
                        got: entries.len(),
                    });
                }
                entries.iter().try_for_each(Expr::validate)
            }
            MatrixField::RotatedDiagonal { .. } => {
                if n != 2 {
                    return Err(Error::InvalidParameter(
                        "rotated_diagonal requires n = 2".into(),
                    ));
                }
                Ok(())
            }
            MatrixField::Full { entries } => {
                if entries.len() != n || entries.iter().any(|r| r.len() != n) {
                    return Err(Error::DimensionMismatch {
                        expected: n,
                        got: entries.len(),
                    });
                }
                entries.iter().flatten().try_for_each(Expr::validate)
            }
        }
    }

    fn exprs(&self) -> Vec<&Expr> {
        match self {
            MatrixField::Scalar { value } => vec![value],
            MatrixField::Diagonal { entries } => entries.iter().collect(),
            MatrixField::RotatedDiagonal { .. } => vec![],
            MatrixField::Full { entries } => entries.iter().flatten().collect(),
        }
    }

    pub fn transpose(&self) -> Self {
        match self {
            MatrixField::RotatedDiagonal {
                angle,
                diagonal,
                skew,
            } => MatrixField::RotatedDiagonal {
                angle: *angle,
                diagonal: *diagonal,
                skew: -skew,
            },
            MatrixField::Full { entries } => {
                let n = entries.len();
                MatrixField::Full {
                    entries: (0..n)
                        .map(|i| (0..n).map(|j| entries[j][i].clone()).collect())
                        .collect(),
                }
            }
            other => other.clone(),
        }
    }

    pub fn rescale(&self, r: f64) -> Self {
        match self {
            MatrixField::Scalar { value } => MatrixField::Scalar {
                value: value.rescale(r),
            },
            MatrixField::Diagonal { entries } => MatrixField::Diagonal {
                entries: entries.iter().map(|e| e.rescale(r)).collect(),
            },
            MatrixField::RotatedDiagonal { .. } => self.clone(),
            MatrixField::Full { entries } => MatrixField::Full {
                entries: entries
                    .iter()
                    .map(|row| row.iter().map(|e| e.rescale(r)).collect())
                    .collect(),
            },
        }
    }
}

/// Serialized form of [`CoefficientField`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoefficientSpec {
    pub dim: usize,
    pub a: MatrixField,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub b: Vec<Expr>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub c: Vec<Expr>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d: Option<Expr>,
    /// Adds `div b` to `d`, the usual way to make `d - div b >= 0` hold with equality.
    #[serde(default)]
    pub add_div_b: bool,
    pub nu: f64,
    #[serde(default)]
    pub theta: f64,
    pub p: Exponent,
    pub q: Exponent,
}

/// Validated coefficient data with the hypothesis parameters `(nu, Theta, p, q)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CoefficientSpec", into = "CoefficientSpec")]
pub struct CoefficientField {
    spec: CoefficientSpec,
    div_b: Option<Expr>,
    regime: Regime,
}

impl TryFrom<CoefficientSpec> for CoefficientField {
    type Error = Error;

    fn try_from(spec: CoefficientSpec) -> Result<Self> {
        CoefficientField::new(spec)
    }
}

impl From<CoefficientField> for CoefficientSpec {
    fn from(f: CoefficientField) -> Self {
        f.spec
    }
}

impl CoefficientField {
    pub fn new(spec: CoefficientSpec) -> Result<Self> {
        let n = spec.dim;
        if n == 0 || n > MAX_DIM {
            return Err(Error::InvalidParameter(format!("dimension {n} not in 1..=3")));
        }
        if !(spec.nu > 0.0 && spec.nu <= 1.0) {
            return Err(Error::InvalidParameter(format!("nu = {} outside (0, 1]", spec.nu)));
        }
        if !(spec.theta >= 0.0) {
            return Err(Error::InvalidParameter(format!("theta = {} is negative", spec.theta)));
        }
        let regime = check_critical(n, spec.p, spec.q)?;
        spec.a.validate(n)?;
        for v in [&spec.b, &spec.c] {
            if !v.is_empty() && v.len() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    got: v.len(),
                });
            }
            v.iter().try_for_each(Expr::validate)?;
        }
        if let Some(d) = &spec.d {
            d.validate()?;
        }
        let all: Vec<&Expr> = spec
            .a
            .exprs()
            .into_iter()
            .chain(spec.b.iter())
            .chain(spec.c.iter())
            .chain(spec.d.iter())
            .collect();
        if let Some(axis) = all.iter().filter_map(|e| e.max_axis()).max() {
            if axis >= n {
                return Err(Error::InvalidParameter(format!(
                    "expression references axis {axis} in dimension {n}"
                )));
            }
        }
        let div_b = if spec.add_div_b && !spec.b.is_empty() {
            let terms = spec
                .b
                .iter()
                .enumerate()
                .map(|(i, e)| e.derivative(Var::X(i)))
                .collect::<Result<Vec<_>>>()?;
            Some(Expr::sum(terms).simplify())
        } else {
            None
        };
        Ok(Self { spec, div_b, regime })
    }

    /// `A = a I` with no lower-order terms; `(p, q) = (inf, 2)` (`n/p + 2/q = 1`).
    pub fn heat(n: usize, a: f64) -> Self {
        Self::new(CoefficientSpec {
            dim: n,
            a: MatrixField::Scalar {
                value: Expr::constant(a),
            },
            b: vec![],
            c: vec![],
            d: None,
            add_div_b: false,
            nu: (a.min(1.0 / (a * (n as f64).sqrt())).min(1.0) * (1.0 - 1e-12)).max(1e-12),
            theta: 0.0,
            p: Exponent::INFINITY,
            q: Exponent(2.0),
        })
        .expect("valid heat coefficients")
    }

    pub fn spec(&self) -> &CoefficientSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.spec.dim
    }

    pub fn nu(&self) -> f64 {
        self.spec.nu
    }

    pub fn theta(&self) -> f64 {
        self.spec.theta
    }

    pub fn p(&self) -> Exponent {
        self.spec.p
    }

    pub fn q(&self) -> Exponent {
        self.spec.q
    }

    pub fn regime(&self) -> Regime {
        self.regime
    }

    pub fn has_b(&self) -> bool {
        !self.spec.b.is_empty()
    }

    pub fn has_c(&self) -> bool {
        !self.spec.c.is_empty()
    }

    pub fn has_d(&self) -> bool {
        self.spec.d.is_some() || self.div_b.is_some()
    }

    pub fn is_autonomous(&self) -> bool {
        let s = &self.spec;
        !(s.a.exprs().iter().any(|e| e.depends_on_time())
            || s.b.iter().any(Expr::depends_on_time)
            || s.c.iter().any(Expr::depends_on_time)
            || s.d.as_ref().is_some_and(Expr::depends_on_time)
            || self.div_b.as_ref().is_some_and(Expr::depends_on_time))
    }

    pub fn a(&self, t: f64, x: &[f64]) -> Mat {
        self.spec.a.eval(self.spec.dim, t, x)
    }

    fn vector(v: &[Expr], t: f64, x: &[f64]) -> Vec3 {
        let mut out = [0.0; MAX_DIM];
        for (o, e) in out.iter_mut().zip(v) {
            *o = e.eval(t, x);
        }
        out
    }

    pub fn b(&self, t: f64, x: &[f64]) -> Vec3 {
        Self::vector(&self.spec.b, t, x)
    }

    pub fn c(&self, t: f64, x: &[f64]) -> Vec3 {
        Self::vector(&self.spec.c, t, x)
    }

    /// Zeroth-order coefficient, including `div b` when requested.
    pub fn d(&self, t: f64, x: &[f64]) -> f64 {
        self.spec.d.as_ref().map_or(0.0, |e| e.eval(t, x))
            + self.div_b.as_ref().map_or(0.0, |e| e.eval(t, x))
    }

    /// Coefficients of the formal adjoint: `A^T`, with `b` and `c` exchanged.
    pub fn adjoint(&self) -> Self {
        let s = &self.spec;
        let d = match (&s.d, &self.div_b) {
            (None, None) => None,
            (Some(d), None) => Some(d.clone()),
            (None, Some(db)) => Some(db.clone()),
            (Some(d), Some(db)) => Some(Expr::sum(vec![d.clone(), db.clone()])),
        };
        Self::new(CoefficientSpec {
            dim: s.dim,
            a: s.a.transpose(),
            b: s.c.clone(),
            c: s.b.clone(),
            d,
            add_div_b: false,
            nu: s.nu,
            theta: s.theta,
            p: s.p,
            q: s.q,
        })
        .expect("adjoint of a valid field is valid")
    }

    /// Coefficients of the operator seen through `(t, x) -> (r^2 t, r x)`:
    /// `A(r^2 t, r x)`, `r b(r^2 t, r x)`, `r c(r^2 t, r x)`, `r^2 d(r^2 t, r x)`.
    pub fn rescale(&self, r: f64) -> Result<Self> {
        if !(r > 0.0) || !r.is_finite() {
            return Err(Error::InvalidParameter(format!("scale {r} must be positive")));
        }
        let s = &self.spec;
        let vec_scale = |v: &[Expr]| -> Vec<Expr> { v.iter().map(|e| e.rescale(r).scaled(r)).collect() };
        Self::new(CoefficientSpec {
            dim: s.dim,
            a: s.a.rescale(r),
            b: vec_scale(&s.b),
            c: vec_scale(&s.c),
            d: s.d.as_ref().map(|e| e.rescale(r).scaled(r * r)),
            add_div_b: s.add_div_b,
            nu: s.nu,
            theta: s.theta,
            p: s.p,
            q: s.q,
        })
    }

    /// `sup |b| * h / nu`, the cell Peclet number of the drift.
    pub fn peclet(&self, grid: &SpaceTimeGrid) -> f64 {
        let mut m = 0.0f64;
        let times = sample_times(self, grid);
        for &t in &times {
            for node in 0..grid.num_nodes() {
                let x = grid.node_coords(node);
                let b = self.b(t, &x);
                let c = self.c(t, &x);
                let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
                let nc = c.iter().map(|v| v * v).sum::<f64>().sqrt();
                m = m.max(nb.max(nc));
            }
        }
        m * grid.max_spacing() / self.nu()
    }
}

fn sample_times(coeffs: &CoefficientField, grid: &SpaceTimeGrid) -> Vec<f64> {
    if coeffs.is_autonomous() {
        vec![grid.t_start()]
    } else {
        (0..=grid.num_steps()).map(|k| grid.time(k)).collect()
    }
}

/// `(int (int |f|^p dx)^(q/p) dt)^(1/q)` by midpoint quadrature over cell
/// centers and time-slab midpoints, with maxima for infinite exponents.
pub fn mixed_norm<F>(f: F, p: Exponent, q: Exponent, grid: &SpaceTimeGrid) -> Result<f64>
where
    F: Fn(f64, &[f64]) -> f64 + Sync,
{
    for e in [p, q] {
        if e.0.is_nan() || e.0 < 1.0 {
            return Err(Error::InvalidExponent(format!("{e} is below 1")));
        }
    }
    let vol = grid.cell_volume();
    let dt = grid.dt();
    let spatial = |t: f64| -> f64 {
        let vals = (0..grid.num_cells()).map(|c| f(t, &grid.cell_center(c)).abs());
        if p.is_infinite() {
            vals.fold(0.0, f64::max)
        } else {
            vals.map(|v| v.powf(p.0) * vol).sum::<f64>().powf(1.0 / p.0)
        }
    };
    let slabs: Vec<f64> = (0..grid.num_steps())
        .into_par_iter()
        .map(|j| spatial(grid.time(j) + 0.5 * dt))
        .collect();
    Ok(if q.is_infinite() {
        slabs.into_iter().fold(0.0, f64::max)
    } else {
        slabs.iter().map(|s| s.powf(q.0) * dt).sum::<f64>().powf(1.0 / q.0)
    })
}

/// Outcome of the hypothesis checks; unset fields are `NaN` with a passing flag.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HypothesisReport {
    pub nu: f64,
    pub theta: f64,
    pub h1_min_ellipticity: f64,
    pub h1_max_frobenius_sq: f64,
    pub h2_mixed_norm: f64,
    pub h3_min_d_div_b: f64,
    pub h3_min_div_bc: f64,
    pub tol_weak: f64,
    pub h1_pass: bool,
    pub h2_pass: bool,
    pub h3_pass: bool,
}

/// One line of `hypotheses.csv`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HypothesisRow {
    pub name: &'static str,
    pub value: f64,
    pub threshold: f64,
    pub pass: bool,
}

impl HypothesisReport {
    fn empty(coeffs: &CoefficientField) -> Self {
        Self {
            nu: coeffs.nu(),
            theta: coeffs.theta(),
            h1_min_ellipticity: f64::NAN,
            h1_max_frobenius_sq: f64::NAN,
            h2_mixed_norm: f64::NAN,
            h3_min_d_div_b: f64::NAN,
            h3_min_div_bc: f64::NAN,
            tol_weak: f64::NAN,
            h1_pass: true,
            h2_pass: true,
            h3_pass: true,
        }
    }

    pub fn all_pass(&self) -> bool {
        self.h1_pass && self.h2_pass && self.h3_pass
    }

    pub fn merge(mut self, other: &HypothesisReport) -> Self {
        let pick = |a: f64, b: f64| if a.is_nan() { b } else { a };
        self.h1_min_ellipticity = pick(self.h1_min_ellipticity, other.h1_min_ellipticity);
        self.h1_max_frobenius_sq = pick(self.h1_max_frobenius_sq, other.h1_max_frobenius_sq);
        self.h2_mixed_norm = pick(self.h2_mixed_norm, other.h2_mixed_norm);
        self.h3_min_d_div_b = pick(self.h3_min_d_div_b, other.h3_min_d_div_b);
        self.h3_min_div_bc = pick(self.h3_min_div_bc, other.h3_min_div_bc);
        self.tol_weak = pick(self.tol_weak, other.tol_weak);
        self.h1_pass &= other.h1_pass;
        self.h2_pass &= other.h2_pass;
        self.h3_pass &= other.h3_pass;
        self
    }

    pub fn rows(&self) -> Vec<HypothesisRow> {
        let nu = self.nu;
        vec![
            HypothesisRow {
                name: "H1_ellipticity",
                value: self.h1_min_ellipticity,
                threshold: nu,
                pass: self.h1_min_ellipticity >= nu,
            },
            HypothesisRow {
                name: "H1_frobenius_sq",
                value: self.h1_max_frobenius_sq,
                threshold: 1.0 / (nu * nu),
                pass: self.h1_max_frobenius_sq <= 1.0 / (nu * nu),
            },
            HypothesisRow {
                name: "H2_mixed_norm",
                value: self.h2_mixed_norm,
                threshold: self.theta,
                pass: self.h2_pass,
            },
            HypothesisRow {
                name: "H3_d_minus_div_b",
                value: self.h3_min_d_div_b,
                threshold: -self.tol_weak,
                pass: self.h3_min_d_div_b >= -self.tol_weak,
            },
            HypothesisRow {
                name: "H3_div_b_minus_c",
                value: self.h3_min_div_bc,
                threshold: -self.tol_weak,
                pass: self.h3_min_div_bc >= -self.tol_weak,
            },
        ]
    }
}

/// Probe (H1) at every node and cell center with `probe_directions` unit
/// vectors: axes, normalized diagonals, then seeded random directions.
pub fn check_h1(coeffs: &CoefficientField, grid: &SpaceTimeGrid, probe_directions: usize, seed: u64) -> Result<HypothesisReport> {
    let n = grid.dim();
    if coeffs.dim() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: coeffs.dim(),
        });
    }
    if probe_directions < 2 * n {
        return Err(Error::InvalidParameter(format!(
            "{probe_directions} probe directions, at least {} required",
            2 * n
        )));
    }
    let mut dirs: Vec<Vec3> = Vec::new();
    for a in 0..n {
        let mut e = [0.0; MAX_DIM];
        e[a] = 1.0;
        dirs.push(e);
    }
    'diag: for a in 0..n {
        for b in (a + 1)..n {
            for sign in [1.0, -1.0] {
                if dirs.len() >= probe_directions {
                    break 'diag;
                }
                let mut e = [0.0; MAX_DIM];
                e[a] = std::f64::consts::FRAC_1_SQRT_2;
                e[b] = sign * std::f64::consts::FRAC_1_SQRT_2;
                dirs.push(e);
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    while dirs.len() < probe_directions {
        let mut e = [0.0; MAX_DIM];
        for v in e.iter_mut().take(n) {
            *v = rng.gen_range(-1.0..1.0);
        }
        let norm = e.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-3 {
            continue;
        }
        e.iter_mut().for_each(|v| *v /= norm);
        dirs.push(e);
    }

    let mut points: Vec<Vec3> = (0..grid.num_nodes()).map(|i| grid.node_coords(i)).collect();
    points.extend((0..grid.num_cells()).map(|c| grid.cell_center(c)));
    let times = sample_times(coeffs, grid);

    let (min_ell, max_frob) = times
        .par_iter()
        .flat_map_iter(|&t| points.iter().map(move |x| (t, x)))
        .map(|(t, x)| {
            let a = coeffs.a(t, x);
            let mut ell = f64::INFINITY;
            for e in &dirs {
                let mut q = 0.0;
                for i in 0..n {
                    for j in 0..n {
                        q += a[i][j] * e[j] * e[i];
                    }
                }
                ell = ell.min(q);
            }
            let frob: f64 = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
            (ell, frob)
        })
        .reduce(|| (f64::INFINITY, 0.0), |x, y| (x.0.min(y.0), x.1.max(y.1)));

    let nu = coeffs.nu();
    let mut r = HypothesisReport::empty(coeffs);
    r.h1_min_ellipticity = min_ell;
    r.h1_max_frobenius_sq = max_frob;
    r.h1_pass = min_ell >= nu && max_frob <= 1.0 / (nu * nu);
    Ok(r)
}

/// `|| |b - c| ||_{p,q}` against `Theta`.
pub fn check_h2(coeffs: &CoefficientField, grid: &SpaceTimeGrid) -> Result<HypothesisReport> {
    check_critical(coeffs.dim(), coeffs.p(), coeffs.q())?;
    let norm = mixed_norm(
        |t, x| {
            let b = coeffs.b(t, x);
            let c = coeffs.c(t, x);
            b.iter().zip(&c).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt()
        },
        coeffs.p(),
        coeffs.q(),
        grid,
    )?;
    let mut r = HypothesisReport::empty(coeffs);
    r.h2_mixed_norm = norm;
    r.h2_pass = norm <= coeffs.theta() * (1.0 + 1e-9) + 1e-12;
    Ok(r)
}

/// Integrates `g(x, phi, grad phi)` against the hat function of `node` with a
/// 4-point Gauss rule per axis on each cell of its support.
pub(crate) fn hat_integral<G>(grid: &SpaceTimeGrid, node: usize, rule: &[([f64; 3], f64)], mut g: G) -> f64
where
    G: FnMut(&[f64], f64, &Vec3) -> f64,
{
    let n = grid.dim();
    let h = grid.spacing();
    let center = grid.node_coords(node);
    let vol = grid.cell_volume();
    let mut total = 0.0;
    for cell_bits in 0..(1usize << n) {
        for (z, w) in rule {
            let mut x = [0.0; MAX_DIM];
            let mut phi = 1.0;
            let mut factors = [0.0; MAX_DIM];
            let mut slopes = [0.0; MAX_DIM];
            for a in 0..n {
                // Bit set: the cell lies above the node on axis a.
                let upper = (cell_bits >> a) & 1 == 1;
                let s = z[a];
                if upper {
                    x[a] = center[a] + s * h[a];
                    factors[a] = 1.0 - s;
                    slopes[a] = -1.0 / h[a];
                } else {
                    x[a] = center[a] - h[a] + s * h[a];
                    factors[a] = s;
                    slopes[a] = 1.0 / h[a];
                }
                phi *= factors[a];
            }
            let mut grad = [0.0; MAX_DIM];
            for a in 0..n {
                let mut gval = slopes[a];
                for b in 0..n {
                    if b != a {
                        gval *= factors[b];
                    }
                }
                grad[a] = gval;
            }
            total += w * vol * g(&x[..n], phi, &grad);
        }
    }
    total
}

/// Weak-form sign checks against every interior hat function:
/// `int d phi + b . grad phi` and `int -(b - c) . grad phi`, up to the estimated quadrature error.
pub fn check_h3(coeffs: &CoefficientField, grid: &SpaceTimeGrid) -> Result<HypothesisReport> {
    let n = grid.dim();
    if coeffs.dim() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: coeffs.dim(),
        });
    }
    let coarse = tensor_rule(n, 4);
    let fine = halved(&coarse, n);
    let times = if coeffs.is_autonomous() {
        vec![grid.t_start()]
    } else {
        (1..=grid.num_steps()).map(|k| grid.time(k)).collect()
    };
    let integrals = |t: f64, node: usize, rule: &[([f64; 3], f64)]| {
        let v1 = hat_integral(grid, node, rule, |x, phi, grad| {
            let b = coeffs.b(t, x);
            coeffs.d(t, x) * phi + (0..n).map(|a| b[a] * grad[a]).sum::<f64>()
        });
        let v2 = hat_integral(grid, node, rule, |x, _, grad| {
            let b = coeffs.b(t, x);
            let c = coeffs.c(t, x);
            -(0..n).map(|a| (b[a] - c[a]) * grad[a]).sum::<f64>()
        });
        (v1, v2)
    };
    // The halved rule gives the values; its distance to the plain rule estimates the
    // quadrature error, which matters where a bump's support edge cuts a cell.
    let (m1, m2, err) = times
        .par_iter()
        .flat_map_iter(|&t| grid.interior_nodes().iter().map(move |&node| (t, node)))
        .map(|(t, node)| {
            let (c1, c2) = integrals(t, node, &coarse);
            let (f1, f2) = integrals(t, node, &fine);
            (f1, f2, (f1 - c1).abs().max((f2 - c2).abs()))
        })
        .reduce(
            || (f64::INFINITY, f64::INFINITY, 0.0),
            |x, y| (x.0.min(y.0), x.1.min(y.1), x.2.max(y.2)),
        );
    let tol = 1e-10 * grid.cell_volume() + 2.0 * err;
    let mut r = HypothesisReport::empty(coeffs);
    r.h3_min_d_div_b = m1;
    r.h3_min_div_bc = m2;
    r.tol_weak = tol;
    r.h3_pass = m1 >= -tol && m2 >= -tol;
    Ok(r)
}

/// All three checks.
pub fn check_all(coeffs: &CoefficientField, grid: &SpaceTimeGrid, probe_directions: usize, seed: u64) -> Result<HypothesisReport> {
    let h1 = check_h1(coeffs, grid, probe_directions, seed)?;
    let h2 = check_h2(coeffs, grid)?;
    let h3 = check_h3(coeffs, grid)?;
    Ok(h1.merge(&h2).merge(&h3))
}
