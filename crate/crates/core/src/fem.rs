//! Q1 finite-element assembly on the fine grid, sparse SPD solves, and the
//! small dense generalized eigensolves behind the local spectral problems.
//!
//! Operators are assembled over an explicit degree-of-freedom list (a subset
//! of fine nodes), so the same machinery serves the global Dirichlet problem,
//! patch-local harmonic extensions, and snapshot-space pencils. The
//! coefficient is piecewise constant per fine cell, sampled at cell centers,
//! which makes every element integral exact.
//!
//! Global solves go through a banded Cholesky factorization in the row-major
//! node ordering (bandwidth about one grid line), refined iteratively until
//! the residual contract `‖Ax − b‖ ≤ 1e-10 ‖b‖` holds. Snapshot-space
//! pencils are dense and are reduced to a standard symmetric problem through
//! a Cholesky factorization of the mass side.

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, numerical, Result};
use crate::grid::GridPair;

/// Element stiffness for Q1 on a square, unit coefficient, cyclic corner
/// order SW, SE, NE, NW. Scale-invariant in 2D.
const K_ELEM: [[f64; 4]; 4] = [
    [4.0 / 6.0, -1.0 / 6.0, -2.0 / 6.0, -1.0 / 6.0],
    [-1.0 / 6.0, 4.0 / 6.0, -1.0 / 6.0, -2.0 / 6.0],
    [-2.0 / 6.0, -1.0 / 6.0, 4.0 / 6.0, -1.0 / 6.0],
    [-1.0 / 6.0, -2.0 / 6.0, -1.0 / 6.0, 4.0 / 6.0],
];

/// Element mass for Q1 on a square of side 1; scales by `h²`.
const M_ELEM: [[f64; 4]; 4] = [
    [4.0 / 36.0, 2.0 / 36.0, 1.0 / 36.0, 2.0 / 36.0],
    [2.0 / 36.0, 4.0 / 36.0, 2.0 / 36.0, 1.0 / 36.0],
    [1.0 / 36.0, 2.0 / 36.0, 4.0 / 36.0, 2.0 / 36.0],
    [2.0 / 36.0, 1.0 / 36.0, 2.0 / 36.0, 4.0 / 36.0],
];

/// One value per fine cell, row-major; a piecewise-constant coefficient.
#[derive(Debug, Clone, PartialEq)]
pub struct CellField {
    /// Cells per side.
    pub n: usize,
    /// Cell values, row-major (`cy * n + cx`).
    pub values: Vec<f64>,
}

impl CellField {
    /// Constant field on the fine grid of `g`.
    pub fn constant(g: &GridPair, value: f64) -> Self {
        CellField { n: g.n_fine(), values: vec![value; g.n_cells()] }
    }

    /// Samples `f(x, y)` at fine-cell centers.
    pub fn from_fn(g: &GridPair, f: impl Fn(f64, f64) -> f64) -> Self {
        let n = g.n_fine();
        let mut values = Vec::with_capacity(n * n);
        for idx in 0..g.n_cells() {
            let (x, y) = g.cell_center(idx);
            values.push(f(x, y));
        }
        CellField { n, values }
    }

    pub fn value(&self, cell: usize) -> f64 {
        self.values[cell]
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Symmetric sparse operator in CSR form over an explicit dof list.
#[derive(Debug, Clone)]
pub struct SparseOperator {
    /// Global fine-node id per local dof, strictly ascending.
    dofs: Vec<usize>,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    vals: Vec<f64>,
}

#[derive(Clone, Copy)]
enum Kind {
    Stiffness,
    Mass,
}

impl SparseOperator {
    pub fn n(&self) -> usize {
        self.dofs.len()
    }

    /// Global fine-node ids backing the local dof numbering.
    pub fn dofs(&self) -> &[usize] {
        &self.dofs
    }

    /// Stored entries of local row `i` as parallel (columns, values) slices.
    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let (lo, hi) = (self.row_ptr[i], self.row_ptr[i + 1]);
        (&self.col_idx[lo..hi], &self.vals[lo..hi])
    }

    /// Largest `|i − j|` over stored entries.
    pub fn bandwidth(&self) -> usize {
        let mut bw = 0;
        for i in 0..self.n() {
            let (cols, _) = self.row(i);
            for &j in cols {
                bw = bw.max(i.abs_diff(j));
            }
        }
        bw
    }

    /// Dense copy; intended for the small snapshot-space pencils.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.n();
        let mut out = DMatrix::zeros(n, n);
        for i in 0..n {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                out[(i, j)] = v;
            }
        }
        out
    }

    /// Builds an operator from a dense symmetric matrix; dof ids are 0..n.
    pub fn from_dense(m: &DMatrix<f64>) -> Self {
        let n = m.nrows();
        assert_eq!(n, m.ncols());
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for i in 0..n {
            for j in 0..n {
                if m[(i, j)] != 0.0 {
                    col_idx.push(j);
                    vals.push(m[(i, j)]);
                }
            }
            row_ptr.push(col_idx.len());
        }
        SparseOperator { dofs: (0..n).collect(), row_ptr, col_idx, vals }
    }

    pub fn matvec(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n());
        debug_assert_eq!(out.len(), self.n());
        for i in 0..self.n() {
            let (cols, vals) = self.row(i);
            let mut s = 0.0;
            for (&j, &v) in cols.iter().zip(vals) {
                s += v * x[j];
            }
            out[i] = s;
        }
    }

    pub fn matvec_v(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.n());
        self.matvec(x.as_slice(), out.as_mut_slice());
        out
    }

    /// `self += alpha · other` for operators assembled over the same dofs,
    /// cells, and constraints, which share one sparsity pattern.
    pub fn axpy_same_pattern(&mut self, alpha: f64, other: &SparseOperator) -> Result<()> {
        if self.dofs != other.dofs || self.row_ptr != other.row_ptr || self.col_idx != other.col_idx
        {
            return Err(invalid("axpy_same_pattern", "sparsity patterns differ"));
        }
        for (a, b) in self.vals.iter_mut().zip(&other.vals) {
            *a += alpha * b;
        }
        Ok(())
    }

    /// Accumulates `out += A·x` for a sparse `x` given as (indices, values).
    /// Relies on symmetry: column `j` of `A` is read as row `j`.
    pub fn add_matvec_sparse(&self, idx: &[usize], val: &[f64], out: &mut [f64]) {
        for (&j, &xj) in idx.iter().zip(val) {
            let (cols, vals) = self.row(j);
            for (&i, &v) in cols.iter().zip(vals) {
                out[i] += v * xj;
            }
        }
    }

    /// Quadratic form `xᵀ A y` for sparse `x` and dense `y`.
    pub fn bilinear_sparse_dense(&self, idx: &[usize], val: &[f64], y: &[f64]) -> f64 {
        let mut s = 0.0;
        for (&i, &xi) in idx.iter().zip(val) {
            let (cols, vals) = self.row(i);
            let mut row_dot = 0.0;
            for (&j, &v) in cols.iter().zip(vals) {
                row_dot += v * y[j];
            }
            s += xi * row_dot;
        }
        s
    }

    /// Extracts the dof entries of a vector indexed by global fine node.
    pub fn gather(&self, global: &[f64]) -> DVector<f64> {
        DVector::from_iterator(self.n(), self.dofs.iter().map(|&g| global[g]))
    }

    /// Adds the local vector back into a global fine-node vector.
    pub fn scatter_add(&self, local: &[f64], global: &mut [f64]) {
        for (&g, &v) in self.dofs.iter().zip(local) {
            global[g] += v;
        }
    }
}

fn assemble(
    op_name: &'static str,
    field: Option<&CellField>,
    g: &GridPair,
    cells: Option<&[usize]>,
    fixed: &[usize],
    kind: Kind,
) -> Result<SparseOperator> {
    let nf = g.n_fine();
    if let Some(f) = field {
        if f.n != nf || f.values.len() != nf * nf {
            return Err(invalid(
                op_name,
                format!("field has {} cells per side, grid has {nf}", f.n),
            ));
        }
    }
    if let Some(cs) = cells {
        if cs.is_empty() {
            return Err(invalid(op_name, "empty subdomain"));
        }
        if let Some(&bad) = cs.iter().find(|&&c| c >= g.n_cells()) {
            return Err(invalid(op_name, format!("cell index {bad} out of range")));
        }
    }

    let mut in_cells = vec![false; g.n_cells()];
    match cells {
        Some(cs) => {
            for &c in cs {
                in_cells[c] = true;
            }
        }
        None => in_cells.fill(true),
    }

    let mut is_fixed = vec![false; g.n_nodes()];
    for &nd in fixed {
        if nd >= g.n_nodes() {
            return Err(invalid(op_name, format!("dirichlet node {nd} out of range")));
        }
        is_fixed[nd] = true;
    }

    // Dof set: nodes of included cells, Dirichlet nodes removed, ascending.
    let mut touched = vec![false; g.n_nodes()];
    for c in 0..g.n_cells() {
        if in_cells[c] {
            let (cx, cy) = g.cell_coords(c);
            for nd in g.cell_nodes(cx, cy) {
                touched[nd] = true;
            }
        }
    }
    let dofs: Vec<usize> =
        (0..g.n_nodes()).filter(|&nd| touched[nd] && !is_fixed[nd]).collect();
    if dofs.is_empty() {
        return Err(invalid(op_name, "no free dofs in subdomain"));
    }
    let mut node_to_dof = vec![usize::MAX; g.n_nodes()];
    for (d, &nd) in dofs.iter().enumerate() {
        node_to_dof[nd] = d;
    }

    let scale = match kind {
        Kind::Stiffness => 1.0,
        Kind::Mass => g.h() * g.h(),
    };
    let elem = match kind {
        Kind::Stiffness => &K_ELEM,
        Kind::Mass => &M_ELEM,
    };
    // Corner offsets in cyclic SW, SE, NE, NW order.
    const CORNER: [(usize, usize); 4] = [(0, 0), (1, 0), (1, 1), (0, 1)];

    let mut row_ptr = Vec::with_capacity(dofs.len() + 1);
    let mut col_idx = Vec::new();
    let mut vals = Vec::new();
    row_ptr.push(0);
    for (_d, &nd) in dofs.iter().enumerate() {
        let (ix, iy) = g.node_coords(nd);
        // 3x3 node stencil, ascending global index order.
        for dy in -1i64..=1 {
            let jy = iy as i64 + dy;
            if jy < 0 || jy > nf as i64 {
                continue;
            }
            for dx in -1i64..=1 {
                let jx = ix as i64 + dx;
                if jx < 0 || jx > nf as i64 {
                    continue;
                }
                let other = g.node_index(jx as usize, jy as usize);
                let od = node_to_dof[other];
                if od == usize::MAX {
                    continue;
                }
                // Cells incident to both nodes.
                let cx_lo = ix.max(jx as usize).saturating_sub(1);
                let cx_hi = ix.min(jx as usize).min(nf - 1);
                let cy_lo = iy.max(jy as usize).saturating_sub(1);
                let cy_hi = iy.min(jy as usize).min(nf - 1);
                let mut entry = 0.0;
                for cy in cy_lo..=cy_hi {
                    for cx in cx_lo..=cx_hi {
                        let c = g.cell_index(cx, cy);
                        if !in_cells[c] {
                            continue;
                        }
                        let li = CORNER
                            .iter()
                            .position(|&(ox, oy)| cx + ox == ix && cy + oy == iy)
                            .unwrap();
                        let lj = CORNER
                            .iter()
                            .position(|&(ox, oy)| cx + ox == jx as usize && cy + oy == jy as usize)
                            .unwrap();
                        let a = field.map_or(1.0, |f| f.value(c));
                        entry += a * elem[li][lj] * scale;
                    }
                }
                if entry != 0.0 {
                    col_idx.push(od);
                    vals.push(entry);
                }
            }
        }
        row_ptr.push(col_idx.len());
    }

    Ok(SparseOperator { dofs, row_ptr, col_idx, vals })
}

/// Assembles the Q1 stiffness matrix `∫ a ∇u·∇v` with per-cell constant
/// coefficient, restricted to `cells` (all cells if `None`), with the nodes
/// in `fixed` eliminated symmetrically.
pub fn assemble_stiffness(
    field: &CellField,
    g: &GridPair,
    cells: Option<&[usize]>,
    fixed: &[usize],
) -> Result<SparseOperator> {
    assemble("assemble_stiffness", Some(field), g, cells, fixed, Kind::Stiffness)
}

/// Assembles the Q1 consistent mass matrix `∫ u v`.
pub fn assemble_mass(
    g: &GridPair,
    cells: Option<&[usize]>,
    fixed: &[usize],
) -> Result<SparseOperator> {
    assemble("assemble_mass", None, g, cells, fixed, Kind::Mass)
}

/// Assembles the weighted mass matrix `∫ w u v` with per-cell constant
/// weight; used by the local spectral pencils.
pub fn assemble_weighted_mass(
    weight: &CellField,
    g: &GridPair,
    cells: Option<&[usize]>,
    fixed: &[usize],
) -> Result<SparseOperator> {
    assemble("assemble_weighted_mass", Some(weight), g, cells, fixed, Kind::Mass)
}

/// Banded Cholesky factor of an SPD operator in its local dof ordering.
pub struct BandedCholesky {
    n: usize,
    bw: usize,
    /// Lower band, row-major: entry `(i, j)` at `i*(bw+1) + (j − i + bw)`.
    band: Vec<f64>,
}

impl BandedCholesky {
    pub fn new(op: &SparseOperator) -> Result<Self> {
        let n = op.n();
        let bw = op.bandwidth();
        let w = bw + 1;
        let mut band = vec![0.0; n * w];
        for i in 0..n {
            let (cols, vals) = op.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                if j <= i {
                    band[i * w + (j + bw - i)] = v;
                }
            }
        }
        for i in 0..n {
            let j_lo = i.saturating_sub(bw);
            for j in j_lo..=i {
                let k_lo = j_lo.max(j.saturating_sub(bw));
                let mut s = band[i * w + (j + bw - i)];
                for k in k_lo..j {
                    s -= band[i * w + (k + bw - i)] * band[j * w + (k + bw - j)];
                }
                if j < i {
                    band[i * w + (j + bw - i)] = s / band[j * w + bw];
                } else {
                    if s <= 0.0 || !s.is_finite() {
                        return Err(numerical(
                            "solve_spd",
                            format!("operator is not positive definite (pivot {s:e} at row {i})"),
                        ));
                    }
                    band[i * w + bw] = s.sqrt();
                }
            }
        }
        Ok(BandedCholesky { n, bw, band })
    }

    /// Solves `L Lᵀ x = b` in place.
    pub fn solve_in_place(&self, x: &mut [f64]) {
        let (n, bw, w) = (self.n, self.bw, self.bw + 1);
        for i in 0..n {
            let j_lo = i.saturating_sub(bw);
            let mut s = x[i];
            for j in j_lo..i {
                s -= self.band[i * w + (j + bw - i)] * x[j];
            }
            x[i] = s / self.band[i * w + bw];
        }
        for i in (0..n).rev() {
            let j_hi = (i + bw).min(n - 1);
            let mut s = x[i];
            for j in i + 1..=j_hi {
                s -= self.band[j * w + (i + bw - j)] * x[j];
            }
            x[i] = s / self.band[i * w + bw];
        }
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        self.solve_in_place(x.as_mut_slice());
        x
    }

    /// Solves with iterative refinement against `op` until
    /// `‖op·x − b‖ ≤ tol·‖b‖`.
    pub fn solve_refined(
        &self,
        op: &SparseOperator,
        b: &DVector<f64>,
        tol: f64,
    ) -> Result<DVector<f64>> {
        let norm_b = b.norm();
        let mut x = self.solve(b);
        if norm_b == 0.0 {
            return Ok(x);
        }
        for _ in 0..8 {
            let r = b - op.matvec_v(&x);
            if r.norm() <= tol * norm_b {
                return Ok(x);
            }
            x += self.solve(&r);
        }
        let r = b - op.matvec_v(&x);
        if r.norm() <= tol * norm_b {
            Ok(x)
        } else {
            Err(numerical(
                "solve_spd",
                format!(
                    "iterative refinement stalled: residual {:e} of target {:e}",
                    r.norm(),
                    tol * norm_b
                ),
            ))
        }
    }
}

/// Direct SPD solve meeting the residual contract `‖Ax − b‖ ≤ 1e-10 ‖b‖`.
pub fn solve_spd(op: &SparseOperator, b: &DVector<f64>) -> Result<DVector<f64>> {
    if b.len() != op.n() {
        return Err(invalid("solve_spd", format!("rhs length {} vs dimension {}", b.len(), op.n())));
    }
    let f = BandedCholesky::new(op)?;
    f.solve_refined(op, b, 1e-10)
}

fn check_symmetric(op_name: &'static str, m: &DMatrix<f64>) -> Result<()> {
    let scale = m.amax().max(1e-300);
    for i in 0..m.nrows() {
        for j in 0..i {
            if (m[(i, j)] - m[(j, i)]).abs() > 1e-10 * scale {
                return Err(invalid(
                    op_name,
                    format!("matrix is not symmetric at ({i}, {j})"),
                ));
            }
        }
    }
    Ok(())
}

/// Solves the generalized symmetric pencil `A φ = λ B φ` densely and returns
/// the `k` smallest eigenvalues ascending with B-orthonormal eigenvectors as
/// matrix columns.
pub fn generalized_eig_smallest(
    a: &SparseOperator,
    b: &SparseOperator,
    k: usize,
) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let n = a.n();
    if b.n() != n {
        return Err(invalid("generalized_eig_smallest", "dimension mismatch"));
    }
    if k == 0 || k > n {
        return Err(invalid(
            "generalized_eig_smallest",
            format!("k = {k} out of range for dimension {n}"),
        ));
    }
    let ad = a.to_dense();
    let bd = b.to_dense();
    check_symmetric("generalized_eig_smallest", &ad)?;
    check_symmetric("generalized_eig_smallest", &bd)?;
    generalized_eig_smallest_dense(&ad, &bd, k)
}

/// Dense-input variant of [`generalized_eig_smallest`]; inputs must be
/// symmetric, `b` positive definite.
pub fn generalized_eig_smallest_dense(
    ad: &DMatrix<f64>,
    bd: &DMatrix<f64>,
    k: usize,
) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let n = ad.nrows();
    let chol = nalgebra::Cholesky::new(bd.clone()).ok_or_else(|| {
        numerical("generalized_eig_smallest", "mass side is not positive definite")
    })?;
    let l = chol.l();
    // C = L⁻¹ A L⁻ᵀ, computed with two triangular solves.
    let w = l
        .solve_lower_triangular(ad)
        .ok_or_else(|| numerical("generalized_eig_smallest", "singular Cholesky factor"))?;
    let c = l
        .solve_lower_triangular(&w.transpose())
        .ok_or_else(|| numerical("generalized_eig_smallest", "singular Cholesky factor"))?;
    let c = (&c + c.transpose()) * 0.5;
    let eig = nalgebra::SymmetricEigen::new(c);

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));

    let mut values = Vec::with_capacity(k);
    let mut vectors = DMatrix::zeros(n, k);
    for (col, &src) in order.iter().take(k).enumerate() {
        let y = eig.eigenvectors.column(src).into_owned();
        // x = L⁻ᵀ y keeps B-orthonormality: xᵀ B x = yᵀ y.
        let mut x = l
            .transpose()
            .solve_upper_triangular(&y)
            .ok_or_else(|| numerical("generalized_eig_smallest", "singular Cholesky factor"))?;
        // Deterministic sign: largest-magnitude component positive.
        let mut imax = 0;
        for i in 0..n {
            if x[i].abs() > x[imax].abs() {
                imax = i;
            }
        }
        if x[imax] < 0.0 {
            x.neg_mut();
        }
        vectors.set_column(col, &x);
        // The transformed eigenvalue carries an absolute error of order
        // ‖C‖ ε cond(B), which buries a near-zero eigenvalue. The Rayleigh
        // quotient in the original pencil is quadratic in the eigenvector
        // error and recovers it.
        let num = x.dot(&(ad * &x));
        let den = x.dot(&(bd * &x));
        values.push(num / den);
    }
    // Refinement can reorder near-degenerate pairs by rounding-level
    // amounts; restore ascending order jointly with the vectors.
    let mut perm: Vec<usize> = (0..k).collect();
    perm.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let sorted_values: Vec<f64> = perm.iter().map(|&i| values[i]).collect();
    let mut sorted_vectors = DMatrix::zeros(n, k);
    for (col, &src) in perm.iter().enumerate() {
        sorted_vectors.set_column(col, &vectors.column(src).into_owned());
    }
    Ok((sorted_values, sorted_vectors))
}
