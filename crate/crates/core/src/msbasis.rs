//! GMsFEM offline machinery: the multiscale partition of unity, local
//! snapshot spaces, local spectral problems with the `â` weight, and the
//! global offline space with its prolongation columns.
//!
//! The partition functions are cellwise `ā`-harmonic extensions of bilinear
//! hat boundary data. Interior coarse nodes carry the `N_in` partition
//! functions the method uses; the functions of boundary coarse nodes are kept
//! alongside them because only the completed family sums to one near the
//! domain boundary, while the spectral weight `â` and the offline spaces use
//! the interior family alone.
//!
//! Snapshot spaces are `ā`-harmonic extensions of nodal deltas on each
//! neighborhood boundary; the retained basis solves the snapshot-restricted
//! pencil `∫ ā ∇φ·∇v = λ ∫ â φ v` with
//! `â = ā · Σᵢ H² |∇χᵢ|²` (interior sum, `H` the coarse side length).
//! Offline columns are the nodal products `χᵢ φ_j`, which vanish on `∂Dᵢ`
//! and on the domain boundary, so the space conforms to the homogeneous
//! Dirichlet problem.

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, numerical, Result};
use crate::fem::{
    assemble_mass, assemble_stiffness, assemble_weighted_mass, generalized_eig_smallest_dense,
    BandedCholesky, CellField, SparseOperator,
};
use crate::grid::{neighborhood, GridPair, Neighborhood};

/// One partition function stored on its rectangular support patch.
#[derive(Debug, Clone)]
pub struct PouFunction {
    /// Southwest fine-node coordinates of the patch.
    pub origin: (usize, usize),
    /// Patch extent in nodes `(nx, ny)`.
    pub shape: (usize, usize),
    /// Nodal values, row-major with x fastest.
    pub values: Vec<f64>,
}

impl PouFunction {
    /// Value at global fine-node coordinates; zero outside the patch.
    pub fn at(&self, ix: usize, iy: usize) -> f64 {
        let (ox, oy) = self.origin;
        if ix < ox || iy < oy || ix >= ox + self.shape.0 || iy >= oy + self.shape.1 {
            return 0.0;
        }
        self.values[(iy - oy) * self.shape.0 + (ix - ox)]
    }

    /// Gradient at the center of fine cell `(cx, cy)` from the bilinear
    /// interpolant; `h` is the fine side length.
    pub fn grad_at_cell(&self, cx: usize, cy: usize, h: f64) -> (f64, f64) {
        let sw = self.at(cx, cy);
        let se = self.at(cx + 1, cy);
        let ne = self.at(cx + 1, cy + 1);
        let nw = self.at(cx, cy + 1);
        ((se + ne - sw - nw) / (2.0 * h), (nw + ne - sw - se) / (2.0 * h))
    }
}

/// The multiscale partition of unity.
#[derive(Debug, Clone)]
pub struct PartitionOfUnity {
    /// `χᵢ` per interior coarse node, row-major node order.
    pub interior: Vec<PouFunction>,
    /// Partition functions of the boundary coarse nodes; completes the
    /// interior family so the whole set sums to one.
    pub boundary: Vec<PouFunction>,
}

impl PartitionOfUnity {
    /// Sum of the completed family at a fine node.
    pub fn total_at(&self, ix: usize, iy: usize) -> f64 {
        self.interior.iter().chain(self.boundary.iter()).map(|f| f.at(ix, iy)).sum()
    }
}

/// An `ā`-harmonic extension solver on one rectangular cell patch.
struct PatchSolver {
    full: SparseOperator,
    inner: SparseOperator,
    factor: BandedCholesky,
}

impl PatchSolver {
    fn new(g: &GridPair, abar: &CellField, cells: &[usize], fixed: &[usize]) -> Result<Self> {
        let full = assemble_stiffness(abar, g, Some(cells), &[])?;
        let inner = assemble_stiffness(abar, g, Some(cells), fixed)?;
        let factor = BandedCholesky::new(&inner)?;
        Ok(PatchSolver { full, inner, factor })
    }

    /// Harmonic extension of boundary data given as (global node, value)
    /// pairs; returns values over `self.full.dofs()` order.
    fn extend(&self, bnd: &[(usize, f64)]) -> Result<Vec<f64>> {
        let full_dofs = self.full.dofs();
        let pos = |node: usize| full_dofs.binary_search(&node).ok();
        let mut idx = Vec::with_capacity(bnd.len());
        let mut val = Vec::with_capacity(bnd.len());
        for &(node, v) in bnd {
            let d = pos(node)
                .ok_or_else(|| invalid("harmonic_extension", "boundary node outside patch"))?;
            if v != 0.0 {
                idx.push(d);
                val.push(v);
            }
        }
        let mut flux = vec![0.0; self.full.n()];
        self.full.add_matvec_sparse(&idx, &val, &mut flux);

        let mut rhs = DVector::zeros(self.inner.n());
        for (i, &node) in self.inner.dofs().iter().enumerate() {
            let d = pos(node).unwrap();
            rhs[i] = -flux[d];
        }
        let sol = self.factor.solve_refined(&self.inner, &rhs, 1e-10)?;

        let mut out = vec![0.0; self.full.n()];
        for (&(node, v), _) in bnd.iter().zip(0..) {
            out[pos(node).unwrap()] = v;
        }
        for (i, &node) in self.inner.dofs().iter().enumerate() {
            out[pos(node).unwrap()] = sol[i];
        }
        Ok(out)
    }
}

fn cell_list(g: &GridPair, cx0: usize, cy0: usize, ncx: usize, ncy: usize) -> Vec<usize> {
    let mut cells = Vec::with_capacity(ncx * ncy);
    for cy in cy0..cy0 + ncy {
        for cx in cx0..cx0 + ncx {
            cells.push(g.cell_index(cx, cy));
        }
    }
    cells
}

fn rect_boundary_nodes(g: &GridPair, x0: usize, x1: usize, y0: usize, y1: usize) -> Vec<usize> {
    let mut out = Vec::new();
    for iy in y0..=y1 {
        for ix in x0..=x1 {
            if ix == x0 || ix == x1 || iy == y0 || iy == y1 {
                out.push(g.node_index(ix, iy));
            }
        }
    }
    out
}

/// Builds the partition of unity for mean field `abar`: per coarse cell, the
/// four corner-hat boundary problems are solved once and distributed to the
/// corner nodes' partition functions.
pub fn partition_of_unity(g: &GridPair, abar: &CellField) -> Result<PartitionOfUnity> {
    if abar.n != g.n_fine() {
        return Err(invalid("partition_of_unity", "field does not match grid"));
    }
    let k = g.n_fine_per_coarse;
    let nc = g.n_coarse;

    let make_fn = |jx: usize, jy: usize| -> PouFunction {
        // Clipped patch of coarse cells incident to coarse node (jx, jy).
        let cx0 = jx.saturating_sub(1);
        let cy0 = jy.saturating_sub(1);
        let cx1 = (jx + 1).min(nc);
        let cy1 = (jy + 1).min(nc);
        let shape = ((cx1 - cx0) * k + 1, (cy1 - cy0) * k + 1);
        PouFunction {
            origin: (cx0 * k, cy0 * k),
            shape,
            values: vec![0.0; shape.0 * shape.1],
        }
    };

    let n_in = g.n_interior_coarse();
    let mut interior: Vec<PouFunction> = (0..n_in)
        .map(|i| {
            let (jx, jy) = g.interior_coarse_coords(i);
            make_fn(jx, jy)
        })
        .collect();
    let mut boundary_nodes = Vec::new();
    for jy in 0..=nc {
        for jx in 0..=nc {
            if jx == 0 || jy == 0 || jx == nc || jy == nc {
                boundary_nodes.push((jx, jy));
            }
        }
    }
    let mut boundary: Vec<PouFunction> =
        boundary_nodes.iter().map(|&(jx, jy)| make_fn(jx, jy)).collect();

    for cyc in 0..nc {
        for cxc in 0..nc {
            let (x0, y0) = (cxc * k, cyc * k);
            let cells = cell_list(g, x0, y0, k, k);
            let fixed = rect_boundary_nodes(g, x0, x0 + k, y0, y0 + k);
            let solver = PatchSolver::new(g, abar, &cells, &fixed)?;
            for (dx, dy) in [(0usize, 0usize), (1, 0), (1, 1), (0, 1)] {
                // Bilinear hat of corner (cxc+dx, cyc+dy) on the cell boundary.
                let data: Vec<(usize, f64)> = fixed
                    .iter()
                    .map(|&nd| {
                        let (ix, iy) = g.node_coords(nd);
                        let tx = (ix - x0) as f64 / k as f64;
                        let ty = (iy - y0) as f64 / k as f64;
                        let v = (if dx == 1 { tx } else { 1.0 - tx })
                            * (if dy == 1 { ty } else { 1.0 - ty });
                        (nd, v)
                    })
                    .collect();
                let sol = solver.extend(&data)?;
                let (jx, jy) = (cxc + dx, cyc + dy);
                let target = if jx >= 1 && jx < nc && jy >= 1 && jy < nc {
                    let s = g.interior_coarse_per_side();
                    &mut interior[(jy - 1) * s + (jx - 1)]
                } else {
                    let pos = boundary_nodes.iter().position(|&b| b == (jx, jy)).unwrap();
                    &mut boundary[pos]
                };
                for (d, &nd) in solver.full.dofs().iter().enumerate() {
                    let (ix, iy) = g.node_coords(nd);
                    let lx = ix - target.origin.0;
                    let ly = iy - target.origin.1;
                    target.values[ly * target.shape.0 + lx] = sol[d];
                }
            }
        }
    }
    Ok(PartitionOfUnity { interior, boundary })
}

/// The spectral weight `â = ā · Σᵢ H² |∇χᵢ|²`, summed over the interior
/// partition functions.
pub fn spectral_weight(g: &GridPair, abar: &CellField, pou: &PartitionOfUnity) -> CellField {
    let h = g.h();
    let hc = g.h_coarse();
    let mut out = CellField::constant(g, 0.0);
    for chi in &pou.interior {
        // Cells under the patch.
        let (ox, oy) = chi.origin;
        for ly in 0..chi.shape.1 - 1 {
            for lx in 0..chi.shape.0 - 1 {
                let (cx, cy) = (ox + lx, oy + ly);
                let (gx, gy) = chi.grad_at_cell(cx, cy, h);
                out.values[g.cell_index(cx, cy)] += hc * hc * (gx * gx + gy * gy);
            }
        }
    }
    for (o, &a) in out.values.iter_mut().zip(&abar.values) {
        *o *= a;
    }
    out
}

/// A family of fine nodal vectors supported on one neighborhood patch.
#[derive(Debug, Clone)]
pub struct LocalBasis {
    /// Global fine-node ids of the patch, ascending; rows of `values`.
    pub nodes: Vec<usize>,
    /// One column per member function.
    pub values: DMatrix<f64>,
}

/// Snapshot space of neighborhood `i`: the `ā`-harmonic extension of a nodal
/// delta at each of the `L_i` boundary fine nodes, in the boundary-node order
/// of [`neighborhood`]. Data on the part of `∂Dᵢ` lying on the domain
/// boundary is kept; the later `χᵢ` multiplication restores the global zero
/// trace.
pub fn snapshots(g: &GridPair, abar: &CellField, i: usize) -> Result<LocalBasis> {
    let nb = neighborhood(g, i)?;
    snapshots_on(g, abar, &nb)
}

fn snapshots_on(g: &GridPair, abar: &CellField, nb: &Neighborhood) -> Result<LocalBasis> {
    let solver = PatchSolver::new(g, abar, &nb.fine_cells, &nb.boundary_nodes)?;
    let nodes = solver.full.dofs().to_vec();
    let li = nb.boundary_nodes.len();
    let mut values = DMatrix::zeros(nodes.len(), li);
    for (j, &bnode) in nb.boundary_nodes.iter().enumerate() {
        let data = [(bnode, 1.0)];
        let sol = solver.extend(&data)?;
        for (row, &v) in sol.iter().enumerate() {
            values[(row, j)] = v;
        }
    }
    Ok(LocalBasis { nodes, values })
}

/// Solves the local spectral problem of neighborhood `i` on its snapshot
/// space and returns the first `l_i` eigenfunctions (fine nodal coordinates)
/// together with the `l_i + 1` smallest eigenvalues, ascending.
pub fn spectral_basis(
    g: &GridPair,
    abar: &CellField,
    pou: &PartitionOfUnity,
    i: usize,
    l_i: usize,
) -> Result<(LocalBasis, Vec<f64>)> {
    let nb = neighborhood(g, i)?;
    let snaps = snapshots_on(g, abar, &nb)?;
    let ahat = spectral_weight(g, abar, pou);
    spectral_from_snapshots(g, abar, &ahat, &nb, &snaps, l_i)
}

fn spectral_from_snapshots(
    g: &GridPair,
    abar: &CellField,
    ahat: &CellField,
    nb: &Neighborhood,
    snaps: &LocalBasis,
    l_i: usize,
) -> Result<(LocalBasis, Vec<f64>)> {
    let li = snaps.values.ncols();
    if l_i + 1 > li {
        return Err(invalid(
            "spectral_basis",
            format!("l_i + 1 = {} exceeds snapshot count {li}", l_i + 1),
        ));
    }
    if nb.fine_cells.iter().all(|&c| ahat.value(c) == 0.0) {
        return Err(numerical("spectral_basis", "weight is identically zero on the neighborhood"));
    }
    let stiff = assemble_stiffness(abar, g, Some(&nb.fine_cells), &[])?;
    let wmass = assemble_weighted_mass(ahat, g, Some(&nb.fine_cells), &[])?;
    debug_assert_eq!(stiff.dofs(), snaps.nodes.as_slice());

    // Snapshot-space pencil: A = Fᵀ K F, B = Fᵀ M̂ F.
    let n = snaps.nodes.len();
    let mut kf = DMatrix::zeros(n, li);
    let mut mf = DMatrix::zeros(n, li);
    for j in 0..li {
        let col = snaps.values.column(j);
        stiff.matvec(col.as_slice(), kf.column_mut(j).as_mut_slice());
        wmass.matvec(col.as_slice(), mf.column_mut(j).as_mut_slice());
    }
    let a_snap = snaps.values.transpose() * &kf;
    let b_snap = snaps.values.transpose() * &mf;
    let a_snap = (&a_snap + a_snap.transpose()) * 0.5;
    let b_snap = (&b_snap + b_snap.transpose()) * 0.5;

    let (lambdas, w) = generalized_eig_smallest_dense(&a_snap, &b_snap, l_i + 1).map_err(|_| {
        numerical("spectral_basis", "degenerate weight: snapshot mass pencil not positive definite")
    })?;
    let phis = &snaps.values * w.columns(0, l_i);
    Ok((LocalBasis { nodes: snaps.nodes.clone(), values: phis }, lambdas))
}

/// One sparse column over the free (interior) fine dofs.
#[derive(Debug, Clone)]
pub struct SparseCol {
    pub idx: Vec<usize>,
    pub val: Vec<f64>,
}

impl SparseCol {
    pub fn dot_dense(&self, y: &[f64]) -> f64 {
        self.idx.iter().zip(&self.val).map(|(&i, &v)| v * y[i]).sum()
    }

    pub fn add_into(&self, scale: f64, out: &mut [f64]) {
        for (&i, &v) in self.idx.iter().zip(&self.val) {
            out[i] += scale * v;
        }
    }

    pub fn norm(&self) -> f64 {
        self.val.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Number of retained eigenfunctions per neighborhood.
#[derive(Debug, Clone)]
pub enum BasisCounts {
    Uniform(usize),
    PerNode(Vec<usize>),
}

/// The global offline space: per-neighborhood products `χᵢ φ_j` as sparse
/// prolongation columns over the free fine dofs, plus any online columns
/// appended by adaptive enrichment.
#[derive(Debug, Clone)]
pub struct OfflineSpace {
    pub g: GridPair,
    /// Free fine nodes (interior of the domain), ascending; the row space of
    /// every column.
    pub free_nodes: Vec<usize>,
    /// Fine-node id to free-dof index; `usize::MAX` for boundary nodes.
    pub free_index: Vec<usize>,
    /// Offline columns in (neighborhood, eigenfunction) lexicographic order.
    pub offline_cols: Vec<SparseCol>,
    /// Owning neighborhood per offline column.
    pub offline_owner: Vec<usize>,
    /// Retained count per neighborhood.
    pub counts: Vec<usize>,
    /// Ascending eigenvalues per neighborhood, `counts[i] + 1` of them.
    pub eigenvalues: Vec<Vec<f64>>,
    /// Online columns appended by enrichment, with owning neighborhood.
    pub online_cols: Vec<SparseCol>,
    pub online_owner: Vec<usize>,
}

impl OfflineSpace {
    /// Offline dimension `N_d = Σ lᵢ`.
    pub fn n_offline(&self) -> usize {
        self.offline_cols.len()
    }

    /// Total dimension including online columns.
    pub fn n_cols(&self) -> usize {
        self.offline_cols.len() + self.online_cols.len()
    }

    pub fn col(&self, j: usize) -> &SparseCol {
        if j < self.offline_cols.len() {
            &self.offline_cols[j]
        } else {
            &self.online_cols[j - self.offline_cols.len()]
        }
    }

    /// Error-indicator weight `λ_{lᵢ+1}` of a neighborhood.
    pub fn lambda_next(&self, i: usize) -> f64 {
        *self.eigenvalues[i].last().unwrap()
    }

    /// Drops all online columns.
    pub fn reset_online(&mut self) {
        self.online_cols.clear();
        self.online_owner.clear();
    }

    /// `R c` over the free dofs. Accepts a shorter coefficient vector from
    /// an earlier enrichment level; columns only ever append.
    pub fn prolong(&self, c: &DVector<f64>) -> DVector<f64> {
        debug_assert!(c.len() <= self.n_cols());
        let mut out = DVector::zeros(self.free_nodes.len());
        for (j, cj) in c.iter().enumerate() {
            if *cj != 0.0 {
                self.col(j).add_into(*cj, out.as_mut_slice());
            }
        }
        out
    }

    /// `Rᵀ b` for a free-dof vector.
    pub fn restrict(&self, b: &[f64]) -> DVector<f64> {
        DVector::from_iterator(self.n_cols(), (0..self.n_cols()).map(|j| self.col(j).dot_dense(b)))
    }

    /// Dense Galerkin matrix `Rᵀ A R` over all current columns.
    pub fn gram(&self, op: &SparseOperator) -> DMatrix<f64> {
        let n = self.n_cols();
        let mut out = DMatrix::zeros(n, n);
        let mut scratch = vec![0.0; self.free_nodes.len()];
        for j in 0..n {
            scratch.iter_mut().for_each(|v| *v = 0.0);
            let cj = self.col(j);
            op.add_matvec_sparse(&cj.idx, &cj.val, &mut scratch);
            for i in 0..=j {
                let v = self.col(i).dot_dense(&scratch);
                out[(i, j)] = v;
                out[(j, i)] = v;
            }
        }
        out
    }

    /// Checks linear independence of the columns through the mass Gram
    /// matrix; reports rank deficiency.
    pub fn verify_rank(&self, mass: &SparseOperator) -> Result<()> {
        let gram = self.gram(mass);
        let eig = gram.symmetric_eigen();
        let max = eig.eigenvalues.amax();
        let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
        if min <= 1e-10 * max {
            return Err(numerical(
                "build_offline_space",
                format!("prolongation columns are rank deficient (gram eigenvalue ratio {:e})", min / max),
            ));
        }
        Ok(())
    }
}

/// Builds the offline space: partition of unity, snapshots, spectral bases,
/// and the product columns, in deterministic neighborhood order.
pub fn build_offline_space(g: &GridPair, abar: &CellField, l: &BasisCounts) -> Result<OfflineSpace> {
    let n_in = g.n_interior_coarse();
    let counts: Vec<usize> = match l {
        BasisCounts::Uniform(c) => vec![*c; n_in],
        BasisCounts::PerNode(v) => {
            if v.len() != n_in {
                return Err(invalid(
                    "build_offline_space",
                    format!("{} per-node counts for {n_in} neighborhoods", v.len()),
                ));
            }
            v.clone()
        }
    };
    if counts.iter().any(|&c| c == 0) {
        return Err(invalid("build_offline_space", "basis counts must be positive"));
    }

    let pou = partition_of_unity(g, abar)?;
    let ahat = spectral_weight(g, abar, &pou);

    let free_nodes = g.interior_nodes();
    let mut free_index = vec![usize::MAX; g.n_nodes()];
    for (d, &nd) in free_nodes.iter().enumerate() {
        free_index[nd] = d;
    }

    let mut offline_cols = Vec::new();
    let mut offline_owner = Vec::new();
    let mut eigenvalues = Vec::with_capacity(n_in);
    for i in 0..n_in {
        let nb = neighborhood(g, i)?;
        let snaps = snapshots_on(g, abar, &nb)?;
        let (phis, lams) = spectral_from_snapshots(g, abar, &ahat, &nb, &snaps, counts[i])?;
        let chi = &pou.interior[i];
        for j in 0..counts[i] {
            let mut idx = Vec::new();
            let mut val = Vec::new();
            for (row, &nd) in phis.nodes.iter().enumerate() {
                let (ix, iy) = g.node_coords(nd);
                let v = chi.at(ix, iy) * phis.values[(row, j)];
                if v != 0.0 && free_index[nd] != usize::MAX {
                    idx.push(free_index[nd]);
                    val.push(v);
                }
            }
            offline_cols.push(SparseCol { idx, val });
            offline_owner.push(i);
        }
        eigenvalues.push(lams);
    }

    let space = OfflineSpace {
        g: *g,
        free_nodes,
        free_index,
        offline_cols,
        offline_owner,
        counts,
        eigenvalues,
        online_cols: Vec::new(),
        online_owner: Vec::new(),
    };
    let mass = assemble_mass(g, None, &g.boundary_nodes())?;
    space.verify_rank(&mass)?;
    Ok(space)
}
