//! Sparse matrices and the linear solvers used by the time marches.

use rayon::prelude::*;

use crate::error::{Error, Result};

const PAR_THRESHOLD: usize = 16_384;

/// Compressed sparse row matrix with sorted column indices.
#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub vals: Vec<f64>,
}

impl CsrMatrix {
    /// Zero matrix with the given sparsity pattern (each row sorted).
    pub fn from_pattern(rows: &[Vec<usize>]) -> Self {
        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        row_ptr.push(0);
        let mut col_idx = Vec::new();
        for r in rows {
            debug_assert!(r.windows(2).all(|w| w[0] < w[1]));
            col_idx.extend_from_slice(r);
            row_ptr.push(col_idx.len());
        }
        let nnz = col_idx.len();
        Self {
            n: rows.len(),
            row_ptr,
            col_idx,
            vals: vec![0.0; nnz],
        }
    }

    pub fn from_dense(a: &[Vec<f64>]) -> Self {
        let rows: Vec<Vec<usize>> = a
            .iter()
            .map(|r| (0..r.len()).filter(|&j| r[j] != 0.0).collect())
            .collect();
        let mut m = Self::from_pattern(&rows);
        for (i, r) in a.iter().enumerate() {
            for k in m.row_ptr[i]..m.row_ptr[i + 1] {
                m.vals[k] = r[m.col_idx[k]];
            }
        }
        m
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    /// Position of entry `(i, j)` in `vals`.
    pub fn position(&self, i: usize, j: usize) -> Option<usize> {
        let cols = &self.col_idx[self.row_ptr[i]..self.row_ptr[i + 1]];
        cols.binary_search(&j).ok().map(|p| self.row_ptr[i] + p)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.position(i, j).map_or(0.0, |p| self.vals[p])
    }

    pub fn add_to(&mut self, i: usize, j: usize, v: f64) {
        let p = self
            .position(i, j)
            .unwrap_or_else(|| panic!("entry ({i}, {j}) outside the sparsity pattern"));
        self.vals[p] += v;
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.n]; self.n];
        for i in 0..self.n {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                d[i][self.col_idx[k]] = self.vals[k];
            }
        }
        d
    }

    fn row_dot(&self, i: usize, x: &[f64]) -> f64 {
        let mut s = 0.0;
        for k in self.row_ptr[i]..self.row_ptr[i + 1] {
            s += self.vals[k] * x[self.col_idx[k]];
        }
        s
    }

    pub fn matvec_into(&self, x: &[f64], y: &mut [f64]) {
        if self.n >= PAR_THRESHOLD {
            y.par_iter_mut()
                .enumerate()
                .for_each(|(i, yi)| *yi = self.row_dot(i, x));
        } else {
            for (i, yi) in y.iter_mut().enumerate() {
                *yi = self.row_dot(i, x);
            }
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        self.matvec_into(x, &mut y);
        y
    }

    /// `x^T A y`
    pub fn bilinear(&self, x: &[f64], y: &[f64]) -> f64 {
        if self.n >= PAR_THRESHOLD {
            (0..self.n).into_par_iter().map(|i| x[i] * self.row_dot(i, y)).sum()
        } else {
            (0..self.n).map(|i| x[i] * self.row_dot(i, y)).sum()
        }
    }

    pub fn transpose(&self) -> Self {
        let mut counts = vec![0usize; self.n + 1];
        for &j in &self.col_idx {
            counts[j + 1] += 1;
        }
        for i in 0..self.n {
            counts[i + 1] += counts[i];
        }
        let mut next = counts.clone();
        let mut col_idx = vec![0usize; self.nnz()];
        let mut vals = vec![0.0; self.nnz()];
        for i in 0..self.n {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                let j = self.col_idx[k];
                let p = next[j];
                next[j] += 1;
                col_idx[p] = i;
                vals[p] = self.vals[k];
            }
        }
        Self {
            n: self.n,
            row_ptr: counts,
            col_idx,
            vals,
        }
    }

    /// Entrywise linear combination `alpha * self + beta * other` on a shared pattern.
    pub fn combine(&self, alpha: f64, other: &Self, beta: f64) -> Self {
        assert_eq!(self.row_ptr, other.row_ptr, "patterns differ");
        let vals = self
            .vals
            .iter()
            .zip(&other.vals)
            .map(|(a, b)| alpha * a + beta * b)
            .collect();
        Self {
            vals,
            ..self.clone()
        }
    }

    pub fn is_symmetric(&self, rel_tol: f64) -> bool {
        let t = self.transpose();
        if t.col_idx != self.col_idx {
            return false;
        }
        let scale = self.vals.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        self.vals
            .iter()
            .zip(&t.vals)
            .all(|(a, b)| (a - b).abs() <= rel_tol * scale)
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    pub fn bandwidth(&self) -> usize {
        (0..self.n)
            .flat_map(|i| {
                self.col_idx[self.row_ptr[i]..self.row_ptr[i + 1]]
                    .iter()
                    .map(move |&j| i.abs_diff(j))
            })
            .max()
            .unwrap_or(0)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    if a.len() >= PAR_THRESHOLD {
        a.par_iter().zip(b).map(|(x, y)| x * y).sum()
    } else {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Banded LU factorization without pivoting.
#[derive(Clone, Debug)]
pub struct BandLu {
    n: usize,
    w: usize,
    /// Row-major band: entry `(i, j)` at `i * (2w + 1) + (j + w - i)`.
    band: Vec<f64>,
}

impl BandLu {
    pub fn factor(a: &CsrMatrix) -> Result<Self> {
        let n = a.n;
        let w = a.bandwidth();
        let stride = 2 * w + 1;
        let mut band = vec![0.0; n * stride];
        for i in 0..n {
            for k in a.row_ptr[i]..a.row_ptr[i + 1] {
                let j = a.col_idx[k];
                band[i * stride + j + w - i] = a.vals[k];
            }
        }
        let scale = a.vals.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for k in 0..n {
            let pivot = band[k * stride + w];
            if !(pivot.abs() > 1e-14 * scale) {
                return Err(Error::SingularAssembly(format!("zero pivot at row {k}")));
            }
            let last = (k + w).min(n - 1);
            let (head, tail) = band.split_at_mut((k + 1) * stride);
            let pivot_row = &head[k * stride..];
            for i in (k + 1)..=last {
                let row = &mut tail[(i - k - 1) * stride..(i - k) * stride];
                let lik = row[k + w - i] / pivot;
                if lik == 0.0 {
                    continue;
                }
                row[k + w - i] = lik;
                for j in (k + 1)..=last {
                    row[j + w - i] -= lik * pivot_row[j + w - k];
                }
            }
        }
        Ok(Self { n, w, band })
    }

    fn at(&self, i: usize, j: usize) -> f64 {
        self.band[i * (2 * self.w + 1) + j + self.w - i]
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let (n, w) = (self.n, self.w);
        let mut x = b.to_vec();
        for i in 0..n {
            let lo = i.saturating_sub(w);
            let mut s = x[i];
            for j in lo..i {
                s -= self.at(i, j) * x[j];
            }
            x[i] = s;
        }
        for i in (0..n).rev() {
            let hi = (i + w).min(n - 1);
            let mut s = x[i];
            for j in (i + 1)..=hi {
                s -= self.at(i, j) * x[j];
            }
            x[i] = s / self.at(i, i);
        }
        x
    }

    /// Solves `A^T x = b` with the same factors: `U^T y = b`, then `L^T x = y`.
    pub fn solve_transpose(&self, b: &[f64]) -> Vec<f64> {
        let (n, w) = (self.n, self.w);
        let mut x = b.to_vec();
        for i in 0..n {
            x[i] /= self.at(i, i);
            let xi = x[i];
            for j in (i + 1)..=(i + w).min(n - 1) {
                x[j] -= self.at(i, j) * xi;
            }
        }
        for i in (0..n).rev() {
            let xi = x[i];
            for j in i.saturating_sub(w)..i {
                x[j] -= self.at(i, j) * xi;
            }
        }
        x
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterativeConfig {
    pub rel_tol: f64,
    pub max_iter: usize,
}

impl Default for IterativeConfig {
    fn default() -> Self {
        Self {
            rel_tol: 1e-10,
            max_iter: 20_000,
        }
    }
}

/// Jacobi-preconditioned conjugate gradients; `x` holds the initial guess.
pub fn cg(a: &CsrMatrix, inv_diag: &[f64], b: &[f64], x: &mut [f64], cfg: IterativeConfig) -> Result<usize> {
    let n = a.n;
    let bnorm = norm2(b);
    if bnorm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(0);
    }
    let mut r = a.matvec(x);
    r.iter_mut().zip(b).for_each(|(ri, bi)| *ri = bi - *ri);
    let mut z: Vec<f64> = r.iter().zip(inv_diag).map(|(ri, di)| ri * di).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    for it in 0..cfg.max_iter {
        let rn = norm2(&r);
        if rn <= cfg.rel_tol * bnorm {
            return Ok(it);
        }
        a.matvec_into(&p, &mut ap);
        let alpha = rz / dot(&p, &ap);
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
            z[i] = r[i] * inv_diag[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    let residual = norm2(&r) / bnorm;
    if residual <= cfg.rel_tol {
        Ok(cfg.max_iter)
    } else {
        Err(Error::SolveDiverged {
            iterations: cfg.max_iter,
            residual,
        })
    }
}

/// Jacobi-preconditioned BiCGSTAB; `x` holds the initial guess.
pub fn bicgstab(a: &CsrMatrix, inv_diag: &[f64], b: &[f64], x: &mut [f64], cfg: IterativeConfig) -> Result<usize> {
    let n = a.n;
    let bnorm = norm2(b);
    if bnorm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(0);
    }
    let mut r = a.matvec(x);
    r.iter_mut().zip(b).for_each(|(ri, bi)| *ri = bi - *ri);
    let r_hat = r.clone();
    let (mut rho, mut alpha, mut omega) = (1.0, 1.0, 1.0);
    let mut v = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut y = vec![0.0; n];
    let mut s = vec![0.0; n];
    let mut zz = vec![0.0; n];
    let mut t = vec![0.0; n];
    for it in 0..cfg.max_iter {
        if norm2(&r) <= cfg.rel_tol * bnorm {
            return Ok(it);
        }
        let rho_new = dot(&r_hat, &r);
        if rho_new == 0.0 {
            break;
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
            y[i] = p[i] * inv_diag[i];
        }
        a.matvec_into(&y, &mut v);
        alpha = rho / dot(&r_hat, &v);
        for i in 0..n {
            s[i] = r[i] - alpha * v[i];
        }
        if norm2(&s) <= cfg.rel_tol * bnorm {
            for i in 0..n {
                x[i] += alpha * y[i];
            }
            return Ok(it + 1);
        }
        for i in 0..n {
            zz[i] = s[i] * inv_diag[i];
        }
        a.matvec_into(&zz, &mut t);
        let tt = dot(&t, &t);
        omega = if tt > 0.0 { dot(&t, &s) / tt } else { 0.0 };
        for i in 0..n {
            x[i] += alpha * y[i] + omega * zz[i];
            r[i] = s[i] - omega * t[i];
        }
        if omega == 0.0 {
            break;
        }
    }
    let mut res = a.matvec(x);
    res.iter_mut().zip(b).for_each(|(ri, bi)| *ri = bi - *ri);
    let residual = norm2(&res) / bnorm;
    if residual <= cfg.rel_tol {
        Ok(cfg.max_iter)
    } else {
        Err(Error::SolveDiverged {
            iterations: cfg.max_iter,
            residual,
        })
    }
}

/// Size limits for the direct path.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DirectLimits {
    pub max_unknowns: usize,
    pub max_band_entries: usize,
}

impl Default for DirectLimits {
    fn default() -> Self {
        Self {
            max_unknowns: 100_000,
            max_band_entries: 25_000_000,
        }
    }
}

enum Backend {
    Direct(BandLu),
    Iterative {
        transpose: Option<CsrMatrix>,
        inv_diag: Vec<f64>,
        symmetric: bool,
    },
}

/// A factorized (or preconditioned) system matrix supporting `A x = b` and `A^T x = b`.
pub struct LinearSolver {
    a: CsrMatrix,
    backend: Backend,
    cfg: IterativeConfig,
}

impl LinearSolver {
    pub fn new(a: CsrMatrix, limits: DirectLimits, cfg: IterativeConfig) -> Result<Self> {
        let band = a.bandwidth();
        let entries = a.n.saturating_mul(2 * band + 1);
        if a.n <= limits.max_unknowns && entries <= limits.max_band_entries {
            if let Ok(lu) = BandLu::factor(&a) {
                // Guard against growth in the pivot-free factorization.
                let probe: Vec<f64> = (0..a.n).map(|i| 1.0 + (i % 7) as f64).collect();
                let x = lu.solve(&probe);
                let mut r = a.matvec(&x);
                r.iter_mut().zip(&probe).for_each(|(ri, bi)| *ri -= bi);
                if norm2(&r) <= 1e-11 * norm2(&probe) {
                    return Ok(Self {
                        a,
                        backend: Backend::Direct(lu),
                        cfg,
                    });
                }
                log::warn!("banded LU failed its residual check; using iterative solves");
            }
        }
        Ok(Self::iterative(a, cfg))
    }

    pub fn iterative(a: CsrMatrix, cfg: IterativeConfig) -> Self {
        let inv_diag = a
            .diagonal()
            .iter()
            .map(|d| if *d != 0.0 { 1.0 / d } else { 1.0 })
            .collect();
        let symmetric = a.is_symmetric(1e-14);
        let transpose = if symmetric { None } else { Some(a.transpose()) };
        Self {
            a,
            backend: Backend::Iterative {
                transpose,
                inv_diag,
                symmetric,
            },
            cfg,
        }
    }

    pub fn is_direct(&self) -> bool {
        matches!(self.backend, Backend::Direct(_))
    }

    pub fn matrix(&self) -> &CsrMatrix {
        &self.a
    }

    /// Solves `A x = b`; `guess` seeds iterative solves.
    pub fn solve(&self, b: &[f64], guess: Option<&[f64]>) -> Result<Vec<f64>> {
        self.solve_impl(b, guess, false)
    }

    pub fn solve_transpose(&self, b: &[f64], guess: Option<&[f64]>) -> Result<Vec<f64>> {
        self.solve_impl(b, guess, true)
    }

    fn solve_impl(&self, b: &[f64], guess: Option<&[f64]>, transposed: bool) -> Result<Vec<f64>> {
        match &self.backend {
            Backend::Direct(lu) => Ok(if transposed {
                lu.solve_transpose(b)
            } else {
                lu.solve(b)
            }),
            Backend::Iterative {
                transpose,
                inv_diag,
                symmetric,
            } => {
                let mut x = guess.map_or_else(|| vec![0.0; b.len()], <[f64]>::to_vec);
                if *symmetric {
                    cg(&self.a, inv_diag, b, &mut x, self.cfg)?;
                } else {
                    let m = if transposed { transpose.as_ref().unwrap() } else { &self.a };
                    bicgstab(m, inv_diag, b, &mut x, self.cfg)?;
                }
                Ok(x)
            }
        }
    }
}
