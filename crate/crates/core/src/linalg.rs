//! Compressed-sparse-row matrices and the linear solver used for the reduced
//! Newton system.
//!
//! The direct path factors the matrix with faer's sparse LU (sequential, so
//! results are bitwise reproducible) followed by a few steps of iterative
//! refinement. The iterative path is restarted GMRES with a Jacobi
//! preconditioner, meant for grids where fill-in makes LU too expensive.

use crate::grid::{norm2, Grid};
use faer::linalg::solvers::Solve;
use faer::sparse::linalg::solvers::{Lu, SymbolicLu};
use faer::sparse::{SparseColMat, Triplet};
use faer::Mat;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("LU factorization failed: {0}")]
    Factorization(String),
    #[error("linear solve stalled at relative residual {residual:e} after {iterations} iterations")]
    NotConverged { iterations: usize, residual: f64 },
}

/// Sparse matrix in CSR layout with sorted, unique column indices per row.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    n_rows: usize,
    n_cols: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Builds a matrix from `(row, col, value)` triplets; duplicates are summed
    /// in input order. Entries that sum to zero are kept as explicit zeros.
    pub fn from_triplets(
        n_rows: usize,
        n_cols: usize,
        triplets: &[(usize, usize, f64)],
    ) -> Result<Self, LinalgError> {
        let mut counts = vec![0usize; n_rows + 1];
        for &(r, c, _) in triplets {
            if r >= n_rows || c >= n_cols {
                return Err(LinalgError::Dimension(format!(
                    "entry ({r}, {c}) outside {n_rows}x{n_cols}"
                )));
            }
            counts[r + 1] += 1;
        }
        for r in 0..n_rows {
            counts[r + 1] += counts[r];
        }
        // Bucket by row (stable), then sort each row by column and merge.
        let mut cursor = counts.clone();
        let mut bucket = vec![(0usize, 0.0f64); triplets.len()];
        for &(r, c, v) in triplets {
            bucket[cursor[r]] = (c, v);
            cursor[r] += 1;
        }
        let mut row_offsets = Vec::with_capacity(n_rows + 1);
        let mut col_indices = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        row_offsets.push(0);
        for r in 0..n_rows {
            let row = &mut bucket[counts[r]..counts[r + 1]];
            row.sort_by_key(|&(c, _)| c);
            let mut last: Option<usize> = None;
            for &(c, v) in row.iter() {
                if last == Some(c) {
                    *values.last_mut().unwrap() += v;
                } else {
                    col_indices.push(c);
                    values.push(v);
                    last = Some(c);
                }
            }
            row_offsets.push(col_indices.len());
        }
        Ok(Self {
            n_rows,
            n_cols,
            row_offsets,
            col_indices,
            values,
        })
    }

    pub fn identity(n: usize) -> Self {
        Self::diagonal(&vec![1.0; n])
    }

    pub fn diagonal(d: &[f64]) -> Self {
        let n = d.len();
        Self {
            n_rows: n,
            n_cols: n,
            row_offsets: (0..=n).collect(),
            col_indices: (0..n).collect(),
            values: d.to_vec(),
        }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row_offsets(&self) -> &[usize] {
        &self.row_offsets
    }

    pub fn col_indices(&self) -> &[usize] {
        &self.col_indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Iterator over the `(col, value)` pairs of one row.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_offsets[r]..self.row_offsets[r + 1];
        self.col_indices[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let span = self.row_offsets[r]..self.row_offsets[r + 1];
        match self.col_indices[span.clone()].binary_search(&c) {
            Ok(pos) => self.values[span.start + pos],
            Err(_) => 0.0,
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n_cols, "mul_vec: length mismatch");
        (0..self.n_rows)
            .map(|r| self.row(r).map(|(c, v)| v * x[c]).sum())
            .collect()
    }

    pub fn transpose(&self) -> Self {
        let mut counts = vec![0usize; self.n_cols + 1];
        for &c in &self.col_indices {
            counts[c + 1] += 1;
        }
        for c in 0..self.n_cols {
            counts[c + 1] += counts[c];
        }
        let mut cursor = counts.clone();
        let mut col_indices = vec![0; self.nnz()];
        let mut values = vec![0.0; self.nnz()];
        for r in 0..self.n_rows {
            for (c, v) in self.row(r) {
                col_indices[cursor[c]] = r;
                values[cursor[c]] = v;
                cursor[c] += 1;
            }
        }
        Self {
            n_rows: self.n_cols,
            n_cols: self.n_rows,
            row_offsets: counts,
            col_indices,
            values,
        }
    }

    /// Sparse product `self * rhs` (row-by-row accumulation).
    pub fn matmul(&self, rhs: &SparseMatrix) -> Result<Self, LinalgError> {
        if self.n_cols != rhs.n_rows {
            return Err(LinalgError::Dimension(format!(
                "matmul {}x{} by {}x{}",
                self.n_rows, self.n_cols, rhs.n_rows, rhs.n_cols
            )));
        }
        let mut acc = vec![0.0; rhs.n_cols];
        let mut marker = vec![usize::MAX; rhs.n_cols];
        let mut touched: Vec<usize> = Vec::new();
        let mut row_offsets = Vec::with_capacity(self.n_rows + 1);
        let mut col_indices = Vec::new();
        let mut values = Vec::new();
        row_offsets.push(0);
        for r in 0..self.n_rows {
            touched.clear();
            for (k, a) in self.row(r) {
                for (c, b) in rhs.row(k) {
                    if marker[c] != r {
                        marker[c] = r;
                        acc[c] = 0.0;
                        touched.push(c);
                    }
                    acc[c] += a * b;
                }
            }
            touched.sort_unstable();
            for &c in &touched {
                col_indices.push(c);
                values.push(acc[c]);
            }
            row_offsets.push(col_indices.len());
        }
        Ok(Self {
            n_rows: self.n_rows,
            n_cols: rhs.n_cols,
            row_offsets,
            col_indices,
            values,
        })
    }

    /// `diag(d) * self`.
    pub fn scale_rows(&self, d: &[f64]) -> Self {
        assert_eq!(d.len(), self.n_rows);
        let mut out = self.clone();
        for r in 0..self.n_rows {
            for v in &mut out.values[self.row_offsets[r]..self.row_offsets[r + 1]] {
                *v *= d[r];
            }
        }
        out
    }

    /// `self * diag(d)`.
    pub fn scale_cols(&self, d: &[f64]) -> Self {
        assert_eq!(d.len(), self.n_cols);
        let mut out = self.clone();
        for (v, &c) in out.values.iter_mut().zip(&self.col_indices) {
            *v *= d[c];
        }
        out
    }

    /// `alpha * self + beta * other`.
    pub fn add_scaled(&self, alpha: f64, other: &SparseMatrix, beta: f64) -> Result<Self, LinalgError> {
        if self.n_rows != other.n_rows || self.n_cols != other.n_cols {
            return Err(LinalgError::Dimension("add_scaled shape mismatch".into()));
        }
        let mut triplets = Vec::with_capacity(self.nnz() + other.nnz());
        for r in 0..self.n_rows {
            triplets.extend(self.row(r).map(|(c, v)| (r, c, alpha * v)));
            triplets.extend(other.row(r).map(|(c, v)| (r, c, beta * v)));
        }
        Self::from_triplets(self.n_rows, self.n_cols, &triplets)
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.n_rows.min(self.n_cols)).map(|r| self.get(r, r)).collect()
    }

    /// Maximum absolute row sum.
    pub fn norm_inf(&self) -> f64 {
        (0..self.n_rows)
            .map(|r| self.row(r).map(|(_, v)| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    fn to_faer(&self) -> Result<SparseColMat<usize, f64>, LinalgError> {
        let triplets: Vec<Triplet<usize, usize, f64>> = (0..self.n_rows)
            .flat_map(|r| self.row(r).map(move |(c, v)| Triplet::new(r, c, v)))
            .collect();
        SparseColMat::try_new_from_triplets(self.n_rows, self.n_cols, &triplets)
            .map_err(|e| LinalgError::Factorization(format!("{e:?}")))
    }
}

/// The forward-difference gradient as a `(2N) x N` matrix: rows `0..N` give
/// the x component, rows `N..2N` the y component. The divergence is `-G^T`.
pub fn assemble_grad_matrix(grid: &Grid) -> SparseMatrix {
    let (nx, ny, n) = (grid.nx(), grid.ny(), grid.len());
    let inv_h = 1.0 / grid.h();
    let mut triplets = Vec::with_capacity(4 * n);
    for j in 0..ny {
        for i in 0..nx {
            let k = j * nx + i;
            if i + 1 < nx {
                triplets.push((k, k, -inv_h));
                triplets.push((k, k + 1, inv_h));
            }
            if j + 1 < ny {
                triplets.push((n + k, k, -inv_h));
                triplets.push((n + k, k + nx, inv_h));
            }
        }
    }
    SparseMatrix::from_triplets(2 * n, n, &triplets).expect("indices in range by construction")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveMethod {
    Direct,
    Iterative,
}

impl std::fmt::Display for SolveMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SolveMethod::Direct => "direct",
            SolveMethod::Iterative => "iterative",
        })
    }
}

impl std::str::FromStr for SolveMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "direct" => Ok(SolveMethod::Direct),
            "iterative" => Ok(SolveMethod::Iterative),
            other => Err(format!("unknown solver method '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearSettings {
    pub method: SolveMethod,
    /// Target: `||A x - b|| <= tol * max(1, ||b||)`.
    pub tol: f64,
    /// Total GMRES iteration cap (iterative path).
    pub max_iter: usize,
    /// GMRES restart length.
    pub restart: usize,
    /// Iterative refinement sweeps after the LU solve (direct path).
    pub refinement_steps: usize,
}

impl Default for LinearSettings {
    fn default() -> Self {
        Self {
            method: SolveMethod::Direct,
            tol: 1e-10,
            max_iter: 5000,
            restart: 60,
            refinement_steps: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearSolveReport {
    /// GMRES iterations, or refinement sweeps on the direct path.
    pub iterations: usize,
    /// `||A x - b||` relative to `max(1, ||b||, ||A||_inf ||x||)` on the direct
    /// path and to `max(1, ||b||)` on the iterative path.
    pub relative_residual: f64,
    pub method: SolveMethod,
}

/// Direct-path residual scale `max(1, ||b||, ||A||_inf ||x||)`: below
/// `||A|| ||x||` times machine precision the residual is rounding noise.
fn residual_scale(a_norm: f64, x: &[f64], b: &[f64]) -> f64 {
    norm2(b).max(a_norm * norm2(x)).max(1.0)
}

fn residual(a: &SparseMatrix, x: &[f64], b: &[f64]) -> Vec<f64> {
    a.mul_vec(x).iter().zip(b).map(|(ax, bi)| bi - ax).collect()
}

fn check_system(a: &SparseMatrix, b: &[f64]) -> Result<(), LinalgError> {
    if a.n_rows != a.n_cols {
        return Err(LinalgError::Dimension(format!(
            "matrix is {}x{}, expected square",
            a.n_rows, a.n_cols
        )));
    }
    if b.len() != a.n_rows {
        return Err(LinalgError::Dimension(format!(
            "rhs has length {}, matrix has {} rows",
            b.len(),
            a.n_rows
        )));
    }
    Ok(())
}

pub fn solve_sparse(
    a: &SparseMatrix,
    b: &[f64],
    settings: &LinearSettings,
) -> Result<(Vec<f64>, LinearSolveReport), LinalgError> {
    match settings.method {
        SolveMethod::Direct => DirectSolver::new().solve(a, b, settings),
        SolveMethod::Iterative => {
            check_system(a, b)?;
            solve_gmres(a, b, settings)
        }
    }
}

/// Direct LU solver that keeps the symbolic analysis (ordering and
/// elimination structure) while successive matrices share a sparsity pattern,
/// as the Newton matrices of one time step do.
#[derive(Debug, Default)]
pub struct DirectSolver {
    cached: Option<CachedSymbolic>,
}

#[derive(Debug)]
struct CachedSymbolic {
    n_cols: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
    symbolic: SymbolicLu<usize>,
}

impl DirectSolver {
    pub fn new() -> Self {
        Self::default()
    }

    /// Solves `a x = b` by LU plus up to `settings.refinement_steps` sweeps of
    /// iterative refinement. `settings.method` is ignored.
    pub fn solve(
        &mut self,
        a: &SparseMatrix,
        b: &[f64],
        settings: &LinearSettings,
    ) -> Result<(Vec<f64>, LinearSolveReport), LinalgError> {
        check_system(a, b)?;
        let mat = a.to_faer()?;
        let reuse = self.cached.as_ref().is_some_and(|c| {
            c.n_cols == a.n_cols && c.row_offsets == a.row_offsets && c.col_indices == a.col_indices
        });
        if !reuse {
            let symbolic = SymbolicLu::try_new(mat.symbolic())
                .map_err(|e| LinalgError::Factorization(format!("{e:?}")))?;
            self.cached = Some(CachedSymbolic {
                n_cols: a.n_cols,
                row_offsets: a.row_offsets.clone(),
                col_indices: a.col_indices.clone(),
                symbolic,
            });
        }
        let symbolic = self.cached.as_ref().expect("cached above").symbolic.clone();
        let lu = Lu::try_new_with_symbolic(symbolic, mat.as_ref())
            .map_err(|e| LinalgError::Factorization(format!("{e:?}")))?;

        let a_norm = a.norm_inf();
        let solve = |rhs: &[f64]| -> Vec<f64> {
            let mut col = Mat::<f64>::from_fn(rhs.len(), 1, |i, _| rhs[i]);
            lu.solve_in_place(col.as_mut());
            (0..rhs.len()).map(|i| col[(i, 0)]).collect()
        };
        let mut x = solve(b);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(LinalgError::Factorization("singular matrix (non-finite solution)".into()));
        }
        let mut r = residual(a, &x, b);
        let mut rel = norm2(&r) / residual_scale(a_norm, &x, b);
        let mut sweeps = 0;
        while rel > settings.tol && sweeps < settings.refinement_steps {
            let dx = solve(&r);
            for (xi, di) in x.iter_mut().zip(&dx) {
                *xi += di;
            }
            r = residual(a, &x, b);
            rel = norm2(&r) / residual_scale(a_norm, &x, b);
            sweeps += 1;
        }
        if !(rel <= settings.tol) {
            return Err(LinalgError::NotConverged {
                iterations: sweeps,
                residual: rel,
            });
        }
        Ok((
            x,
            LinearSolveReport {
                iterations: sweeps,
                relative_residual: rel,
                method: SolveMethod::Direct,
            },
        ))
    }
}

/// Restarted GMRES, right-preconditioned with the inverse diagonal.
fn solve_gmres(
    a: &SparseMatrix,
    b: &[f64],
    settings: &LinearSettings,
) -> Result<(Vec<f64>, LinearSolveReport), LinalgError> {
    let n = b.len();
    let scale = norm2(b).max(1.0);
    let inv_diag: Vec<f64> = a
        .diag()
        .iter()
        .map(|&d| if d != 0.0 { 1.0 / d } else { 1.0 })
        .collect();
    let precond = |v: &[f64]| -> Vec<f64> { v.iter().zip(&inv_diag).map(|(x, d)| x * d).collect() };
    let m = settings.restart.max(1);
    let mut x = vec![0.0; n];
    let mut iterations = 0;
    let mut rel = norm2(b) / scale;

    while rel > settings.tol && iterations < settings.max_iter {
        let r = residual(a, &x, b);
        let beta = norm2(&r);
        rel = beta / scale;
        if rel <= settings.tol {
            break;
        }
        let mut basis: Vec<Vec<f64>> = vec![r.iter().map(|v| v / beta).collect()];
        let mut hess = vec![vec![0.0; m]; m + 1];
        let (mut cs, mut sn) = (vec![0.0; m], vec![0.0; m]);
        let mut g = vec![0.0; m + 1];
        g[0] = beta;
        let mut used = 0;
        for j in 0..m {
            if iterations >= settings.max_iter {
                break;
            }
            let mut w = a.mul_vec(&precond(&basis[j]));
            for i in 0..=j {
                let hij = crate::grid::dot(&w, &basis[i]);
                hess[i][j] = hij;
                for (wk, vk) in w.iter_mut().zip(&basis[i]) {
                    *wk -= hij * vk;
                }
            }
            let wn = norm2(&w);
            hess[j + 1][j] = wn;
            for i in 0..j {
                let t = cs[i] * hess[i][j] + sn[i] * hess[i + 1][j];
                hess[i + 1][j] = -sn[i] * hess[i][j] + cs[i] * hess[i + 1][j];
                hess[i][j] = t;
            }
            let denom = hess[j][j].hypot(hess[j + 1][j]);
            if denom == 0.0 {
                break;
            }
            cs[j] = hess[j][j] / denom;
            sn[j] = hess[j + 1][j] / denom;
            hess[j][j] = denom;
            hess[j + 1][j] = 0.0;
            g[j + 1] = -sn[j] * g[j];
            g[j] *= cs[j];
            iterations += 1;
            used = j + 1;
            rel = g[j + 1].abs() / scale;
            if rel <= settings.tol || wn == 0.0 {
                break;
            }
            basis.push(w.iter().map(|v| v / wn).collect());
        }
        if used == 0 {
            break;
        }
        let mut y = vec![0.0; used];
        for i in (0..used).rev() {
            let s: f64 = ((i + 1)..used).map(|k| hess[i][k] * y[k]).sum();
            y[i] = (g[i] - s) / hess[i][i];
        }
        let mut z = vec![0.0; n];
        for (yi, v) in y.iter().zip(&basis) {
            for (zk, vk) in z.iter_mut().zip(v) {
                *zk += yi * vk;
            }
        }
        for (xk, dk) in x.iter_mut().zip(precond(&z)) {
            *xk += dk;
        }
        rel = norm2(&residual(a, &x, b)) / scale;
    }
    if !(rel <= settings.tol) {
        return Err(LinalgError::NotConverged {
            iterations,
            residual: rel,
        });
    }
    Ok((
        x,
        LinearSolveReport {
            iterations,
            relative_residual: rel,
            method: SolveMethod::Iterative,
        },
    ))
}
