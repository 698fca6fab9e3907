//! Patterned-matrix calculus.
//!
//! A patterned matrix has some cells that vary freely, some that repeat a
//! free cell, and some that are fixed constants. [`LStructure`] holds the
//! generalized duplication matrix `Δ` (vec ← υ) and elimination matrix `Δ⁺`
//! (υ ← vec) for such a pattern, where `υ(X)` stacks the free elements in the
//! order their first occurrence is met by a column-major scan.
//!
//! The module also carries the vec/commutation/Kronecker helpers and the
//! closed-form derivative rules that the reparameterization and PIV standard
//! errors are assembled from, plus a central-difference Jacobian used as the
//! oracle for all of them.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Kind of a single cell in a [`PatternSpec`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Cell {
    /// Free element with the given 0-based index into `υ(X)`.
    Free(usize),
    /// Repeats the free element with the given index.
    DuplicateOf(usize),
    /// Fixed constant.
    Constant(f64),
}

/// Cell layout of a patterned `rows × cols` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PatternSpec {
    rows: usize,
    cols: usize,
    /// Column-major, i.e. in `vec` order.
    cells: Vec<Cell>,
    n_free: usize,
}

impl PatternSpec {
    /// Builds a pattern from column-major cells, checking that free indices
    /// form the contiguous range `0..p*` and every duplicate points at one.
    pub fn new(rows: usize, cols: usize, cells: Vec<Cell>) -> Result<Self> {
        if cells.len() != rows * cols {
            return Err(Error::Validation(format!(
                "pattern has {} cells, expected {}x{}",
                cells.len(),
                rows,
                cols
            )));
        }
        let mut seen = Vec::new();
        for c in &cells {
            if let Cell::Free(k) = *c {
                if seen.len() <= k {
                    seen.resize(k + 1, 0usize);
                }
                seen[k] += 1;
            }
        }
        if let Some(k) = seen.iter().position(|&n| n != 1) {
            return Err(Error::Validation(format!(
                "free index {k} must appear exactly once as a free cell"
            )));
        }
        let n_free = seen.len();
        for c in &cells {
            if let Cell::DuplicateOf(k) = *c {
                if k >= n_free {
                    return Err(Error::Validation(format!(
                        "duplicate cell references missing free index {k}"
                    )));
                }
            }
        }
        Ok(Self {
            rows,
            cols,
            cells,
            n_free,
        })
    }

    /// General pattern: `rule(i, j)` returns `None` for a free cell or the
    /// constant value. Free indices follow the column-major scan.
    pub fn general_by(
        rows: usize,
        cols: usize,
        mut rule: impl FnMut(usize, usize) -> Option<f64>,
    ) -> Self {
        let mut cells = Vec::with_capacity(rows * cols);
        let mut next = 0;
        for j in 0..cols {
            for i in 0..rows {
                match rule(i, j) {
                    None => {
                        cells.push(Cell::Free(next));
                        next += 1;
                    }
                    Some(v) => cells.push(Cell::Constant(v)),
                }
            }
        }
        Self {
            rows,
            cols,
            cells,
            n_free: next,
        }
    }

    /// Symmetric pattern where `rule(i, j)` (called for `i >= j` only)
    /// gives `None` for free or the constant value. Upper cells mirror the
    /// lower triangle.
    pub fn symmetric_by(p: usize, mut rule: impl FnMut(usize, usize) -> Option<f64>) -> Self {
        let mut cells = vec![Cell::Constant(0.0); p * p];
        let mut next = 0;
        for j in 0..p {
            for i in j..p {
                let c = match rule(i, j) {
                    None => {
                        let c = Cell::Free(next);
                        next += 1;
                        c
                    }
                    Some(v) => Cell::Constant(v),
                };
                cells[i + j * p] = c;
                cells[j + i * p] = match c {
                    Cell::Free(k) if i != j => Cell::DuplicateOf(k),
                    other => other,
                };
            }
        }
        Self {
            rows: p,
            cols: p,
            cells,
            n_free: next,
        }
    }

    /// Full symmetric (covariance) pattern; `υ` is `vech`.
    pub fn symmetric(p: usize) -> Self {
        Self::symmetric_by(p, |_, _| None)
    }

    /// Correlation pattern: unit diagonal constants, free strictly-lower part.
    pub fn correlation(p: usize) -> Self {
        Self::symmetric_by(p, |i, j| if i == j { Some(1.0) } else { None })
    }

    /// Strictly lower-triangular pattern with zero upper triangle and diagonal.
    pub fn strictly_lower(p: usize) -> Self {
        Self::general_by(p, p, |i, j| if i > j { None } else { Some(0.0) })
    }

    /// Diagonal pattern whose diagonal cell `i` is free iff `free[i]`;
    /// otherwise it is the constant `fixed[i]`. Off-diagonal cells are zero.
    pub fn diagonal_by(free: &[bool], fixed: &[f64]) -> Self {
        let p = free.len();
        Self::general_by(p, p, |i, j| {
            if i != j {
                Some(0.0)
            } else if free[i] {
                None
            } else {
                Some(fixed[i])
            }
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Number of free elements `p*`.
    pub fn n_free(&self) -> usize {
        self.n_free
    }

    pub fn cell(&self, i: usize, j: usize) -> Cell {
        self.cells[i + j * self.rows]
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    /// Free index behind cell `(i, j)`, following duplicates.
    pub fn free_index(&self, i: usize, j: usize) -> Option<usize> {
        match self.cell(i, j) {
            Cell::Free(k) | Cell::DuplicateOf(k) => Some(k),
            Cell::Constant(_) => None,
        }
    }

    /// `(row, col)` of the first (free) cell of each free index.
    pub fn free_positions(&self) -> Vec<(usize, usize)> {
        let mut out = vec![(0, 0); self.n_free];
        for (pos, c) in self.cells.iter().enumerate() {
            if let Cell::Free(k) = *c {
                out[k] = (pos % self.rows, pos / self.rows);
            }
        }
        out
    }
}

/// Duplication/elimination pair for a pattern.
#[derive(Debug, Clone)]
pub struct LStructure {
    pattern: PatternSpec,
    duplication: DMatrix<f64>,
    elimination: DMatrix<f64>,
    constants: DVector<f64>,
}

/// Builds `Δ` and `Δ⁺` for a pattern by a column-major scan of its cells,
/// one `Δ` column per free index. `Δ⁺` is the Moore–Penrose inverse of `Δ`,
/// which averages repeated cells.
pub fn build_lstructure(pattern: &PatternSpec) -> Result<LStructure> {
    // Re-validate: a pattern may have been assembled by hand.
    let pattern = PatternSpec::new(pattern.rows, pattern.cols, pattern.cells.clone())?;
    let n = pattern.rows * pattern.cols;
    let pstar = pattern.n_free;
    let mut dup = DMatrix::zeros(n, pstar);
    let mut constants = DVector::zeros(n);
    let mut counts = vec![0.0; pstar];
    for (pos, c) in pattern.cells.iter().enumerate() {
        match *c {
            Cell::Free(k) | Cell::DuplicateOf(k) => {
                dup[(pos, k)] = 1.0;
                counts[k] += 1.0;
            }
            Cell::Constant(v) => constants[pos] = v,
        }
    }
    let mut elim = dup.transpose();
    for (k, &cnt) in counts.iter().enumerate() {
        elim.row_mut(k).scale_mut(1.0 / cnt);
    }
    Ok(LStructure {
        pattern,
        duplication: dup,
        elimination: elim,
        constants,
    })
}

impl LStructure {
    pub fn new(pattern: &PatternSpec) -> Result<Self> {
        build_lstructure(pattern)
    }

    pub fn pattern(&self) -> &PatternSpec {
        &self.pattern
    }

    /// `Δ`, of size `rows·cols × p*`.
    pub fn duplication(&self) -> &DMatrix<f64> {
        &self.duplication
    }

    /// `Δ⁺`, of size `p* × rows·cols`.
    pub fn elimination(&self) -> &DMatrix<f64> {
        &self.elimination
    }

    /// `vec` of the constant cells (zero at free and duplicate cells), so
    /// that `vec(X) = Δ·υ(X) + c`.
    pub fn constants(&self) -> &DVector<f64> {
        &self.constants
    }

    pub fn n_free(&self) -> usize {
        self.pattern.n_free
    }
}

/// `υ(X)`: free elements of a pattern-conforming matrix.
pub fn vec_apply(x: &DMatrix<f64>, l: &LStructure) -> Result<DVector<f64>> {
    let pat = &l.pattern;
    if x.nrows() != pat.rows || x.ncols() != pat.cols {
        return Err(Error::Validation(format!(
            "matrix is {}x{}, pattern is {}x{}",
            x.nrows(),
            x.ncols(),
            pat.rows,
            pat.cols
        )));
    }
    let mut out = DVector::zeros(pat.n_free);
    let mut set = vec![false; pat.n_free];
    let scale = x.amax().max(1.0);
    let tol = 1e-12 * scale;
    // First pass picks up the free cells; second checks duplicates/constants.
    for (pos, c) in pat.cells.iter().enumerate() {
        if let Cell::Free(k) = *c {
            out[k] = x[pos];
            set[k] = true;
        }
    }
    for (pos, c) in pat.cells.iter().enumerate() {
        let (i, j) = (pos % pat.rows, pos / pat.rows);
        match *c {
            Cell::DuplicateOf(k) if (x[pos] - out[k]).abs() > tol => {
                return Err(Error::Validation(format!(
                    "cell ({i}, {j}) = {} must duplicate free element {k} = {}",
                    x[pos], out[k]
                )));
            }
            Cell::Constant(v) if (x[pos] - v).abs() > tol => {
                return Err(Error::Validation(format!(
                    "cell ({i}, {j}) = {} must equal the constant {v}",
                    x[pos]
                )));
            }
            _ => {}
        }
    }
    debug_assert!(set.iter().all(|&s| s));
    Ok(out)
}

/// Inverse of [`vec_apply`]: rebuilds the matrix from its free elements.
pub fn unvec_apply(v: &DVector<f64>, l: &LStructure) -> Result<DMatrix<f64>> {
    let pat = &l.pattern;
    if v.len() != pat.n_free {
        return Err(Error::Validation(format!(
            "vector has {} elements, pattern has {} free",
            v.len(),
            pat.n_free
        )));
    }
    let mut m = DMatrix::zeros(pat.rows, pat.cols);
    for (pos, c) in pat.cells.iter().enumerate() {
        m[pos] = match *c {
            Cell::Free(k) | Cell::DuplicateOf(k) => v[k],
            Cell::Constant(c) => c,
        };
    }
    Ok(m)
}

/// Column-major `vec(X)`.
pub fn vec(x: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(x.as_slice())
}

/// Inverse of [`vec`] for an `rows × cols` matrix.
pub fn unvec(v: &DVector<f64>, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_column_slice(rows, cols, v.as_slice())
}

/// Commutation matrix `K_{m,n}` with `K_{m,n}·vec(Xᵀ) = vec(X)` for every
/// `m × n` matrix `X`.
pub fn commutation_matrix(m: usize, n: usize) -> DMatrix<f64> {
    let mut k = DMatrix::zeros(m * n, m * n);
    for i in 0..m {
        for j in 0..n {
            k[(i + j * m, j + i * n)] = 1.0;
        }
    }
    k
}

/// `A ⊗ B`.
pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

/// Product rule: `∂vec(UV)/∂x' = (V ⊗ I_p)ᵀ·dU + (I_r ⊗ U)·dV` where `U` is
/// `p × q`, `V` is `q × r` and `du`, `dv` are their vec-Jacobians.
pub fn product_rule(
    u: &DMatrix<f64>,
    v: &DMatrix<f64>,
    du: &DMatrix<f64>,
    dv: &DMatrix<f64>,
) -> DMatrix<f64> {
    let p = u.nrows();
    let r = v.ncols();
    kron(v, &DMatrix::identity(p, p)).transpose() * du + kron(&DMatrix::identity(r, r), u) * dv
}

/// `∂vec(X⁻¹)/∂vec(X)' = −(X⁻ᵀ ⊗ X⁻¹)`.
pub fn inverse_rule(x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let inv = x
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Numerical("inverse rule: matrix is singular".into()))?;
    Ok(-kron(&inv.transpose(), &inv))
}

/// `∂vec(XAX)/∂vec(X)' = (AX ⊗ I)ᵀ + (I ⊗ XA)` for symmetric `X`.
pub fn quadratic_form_rule(x: &DMatrix<f64>, a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows();
    let eye = DMatrix::identity(n, n);
    kron(&(a * x), &eye).transpose() + kron(&eye, &(x * a))
}

/// `∂vec(AᵀX⁻¹B)/∂vec(X)' = −(BᵀX⁻ᵀ ⊗ AᵀX⁻¹)`.
pub fn sandwich_inverse_rule(
    a: &DMatrix<f64>,
    x: &DMatrix<f64>,
    b: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let inv = x
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Numerical("sandwich rule: matrix is singular".into()))?;
    Ok(-kron(
        &(b.transpose() * inv.transpose()),
        &(a.transpose() * &inv),
    ))
}

/// Default relative step for [`numdiff`]: the cube root of machine epsilon.
pub const DEFAULT_STEP: f64 = 6.055_454_452_393_343e-6;

/// Central-difference Jacobian of `f` at `x0`. Coordinate `i` is perturbed
/// by `step · max(1, |x0[i]|)`.
pub fn numdiff<E>(
    mut f: impl FnMut(&DVector<f64>) -> std::result::Result<DVector<f64>, E>,
    x0: &DVector<f64>,
    step: f64,
) -> std::result::Result<DMatrix<f64>, E> {
    assert!(step > 0.0, "numdiff step must be positive");
    let mut cols: Vec<DVector<f64>> = Vec::with_capacity(x0.len());
    let mut x = x0.clone();
    for i in 0..x0.len() {
        let h = step * x0[i].abs().max(1.0);
        x[i] = x0[i] + h;
        let fp = f(&x)?;
        x[i] = x0[i] - h;
        let fm = f(&x)?;
        x[i] = x0[i];
        cols.push((fp - fm) / (2.0 * h));
    }
    let rows = cols.first().map_or(0, |c| c.len());
    let mut jac = DMatrix::zeros(rows, x0.len());
    for (j, c) in cols.into_iter().enumerate() {
        jac.set_column(j, &c);
    }
    Ok(jac)
}
