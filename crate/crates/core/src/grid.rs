//! Nested uniform coarse/fine grids on the unit square and coarse-neighborhood
//! topology.
//!
//! Both meshes are uniform square grids on `(0,1)²`; the fine mesh refines
//! every coarse cell into `n_fine_per_coarse × n_fine_per_coarse` cells, so
//! every coarse edge is a union of fine edges. Nodes and cells are indexed
//! row-major with x fastest: node `(ix, iy)` has index `iy * (nf + 1) + ix`
//! and cell `(cx, cy)` has index `cy * nf + cx`, where `nf` is the number of
//! fine cells per side. Mesh sizes are stored as side lengths `1/n`; a
//! diagonal convention for the same grids differs only by a factor `√2`.

use crate::error::{invalid, Result};

/// A conforming pair of uniform square meshes on the unit square.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridPair {
    /// Coarse cells per side.
    pub n_coarse: usize,
    /// Fine cells per coarse cell, per side.
    pub n_fine_per_coarse: usize,
}

/// One coarse neighborhood: the union of the 4 coarse cells around an
/// interior coarse node.
#[derive(Debug, Clone)]
pub struct Neighborhood {
    /// The coarse node `(jx, jy)` at the center, `1 ≤ jx, jy ≤ n_coarse − 1`.
    pub coarse_node: (usize, usize),
    /// Global fine-cell indices covering the patch, row-major.
    pub fine_cells: Vec<usize>,
    /// Global fine-node indices on the patch boundary, counterclockwise from
    /// the southwest corner.
    pub boundary_nodes: Vec<usize>,
    /// Global fine-node indices strictly inside the patch, row-major.
    pub interior_nodes: Vec<usize>,
}

impl GridPair {
    /// Fine cells per side of the fine mesh.
    pub fn n_fine(&self) -> usize {
        self.n_coarse * self.n_fine_per_coarse
    }

    /// Fine nodes per side.
    pub fn nodes_per_side(&self) -> usize {
        self.n_fine() + 1
    }

    /// Total fine nodes, boundary included.
    pub fn n_nodes(&self) -> usize {
        self.nodes_per_side() * self.nodes_per_side()
    }

    /// Total fine cells.
    pub fn n_cells(&self) -> usize {
        self.n_fine() * self.n_fine()
    }

    /// Fine mesh side length.
    pub fn h(&self) -> f64 {
        1.0 / self.n_fine() as f64
    }

    /// Coarse mesh side length.
    pub fn h_coarse(&self) -> f64 {
        1.0 / self.n_coarse as f64
    }

    /// Interior coarse nodes per side.
    pub fn interior_coarse_per_side(&self) -> usize {
        self.n_coarse - 1
    }

    /// Number of interior coarse nodes, `N_in = (n_coarse − 1)²`.
    pub fn n_interior_coarse(&self) -> usize {
        let s = self.interior_coarse_per_side();
        s * s
    }

    /// Global index of fine node `(ix, iy)`.
    pub fn node_index(&self, ix: usize, iy: usize) -> usize {
        debug_assert!(ix < self.nodes_per_side() && iy < self.nodes_per_side());
        iy * self.nodes_per_side() + ix
    }

    /// Inverse of [`GridPair::node_index`].
    pub fn node_coords(&self, idx: usize) -> (usize, usize) {
        (idx % self.nodes_per_side(), idx / self.nodes_per_side())
    }

    /// Physical position of a fine node.
    pub fn node_pos(&self, idx: usize) -> (f64, f64) {
        let (ix, iy) = self.node_coords(idx);
        (ix as f64 * self.h(), iy as f64 * self.h())
    }

    /// Global index of fine cell `(cx, cy)`.
    pub fn cell_index(&self, cx: usize, cy: usize) -> usize {
        debug_assert!(cx < self.n_fine() && cy < self.n_fine());
        cy * self.n_fine() + cx
    }

    /// Inverse of [`GridPair::cell_index`].
    pub fn cell_coords(&self, idx: usize) -> (usize, usize) {
        (idx % self.n_fine(), idx / self.n_fine())
    }

    /// Center of a fine cell.
    pub fn cell_center(&self, idx: usize) -> (f64, f64) {
        let (cx, cy) = self.cell_coords(idx);
        ((cx as f64 + 0.5) * self.h(), (cy as f64 + 0.5) * self.h())
    }

    /// Corner nodes of fine cell `(cx, cy)` in cyclic order SW, SE, NE, NW.
    pub fn cell_nodes(&self, cx: usize, cy: usize) -> [usize; 4] {
        [
            self.node_index(cx, cy),
            self.node_index(cx + 1, cy),
            self.node_index(cx + 1, cy + 1),
            self.node_index(cx, cy + 1),
        ]
    }

    /// True if the fine node lies on the boundary of the unit square.
    pub fn is_boundary_node(&self, idx: usize) -> bool {
        let (ix, iy) = self.node_coords(idx);
        let last = self.n_fine();
        ix == 0 || iy == 0 || ix == last || iy == last
    }

    /// All fine nodes on the domain boundary, ascending.
    pub fn boundary_nodes(&self) -> Vec<usize> {
        (0..self.n_nodes()).filter(|&i| self.is_boundary_node(i)).collect()
    }

    /// All fine nodes strictly inside the domain, ascending. These are the
    /// free nodes of a homogeneous Dirichlet problem.
    pub fn interior_nodes(&self) -> Vec<usize> {
        (0..self.n_nodes()).filter(|&i| !self.is_boundary_node(i)).collect()
    }

    /// Coarse-grid coordinates `(jx, jy)` of interior coarse node `i`,
    /// row-major over the `(n_coarse − 1)²` interior nodes.
    pub fn interior_coarse_coords(&self, i: usize) -> (usize, usize) {
        let s = self.interior_coarse_per_side();
        debug_assert!(i < s * s);
        (i % s + 1, i / s + 1)
    }

    /// Global fine-node index of interior coarse node `i`.
    pub fn interior_coarse_node(&self, i: usize) -> usize {
        let (jx, jy) = self.interior_coarse_coords(i);
        self.node_index(jx * self.n_fine_per_coarse, jy * self.n_fine_per_coarse)
    }
}

/// Builds the conforming grid pair.
pub fn build_grids(n_coarse: usize, n_fine_per_coarse: usize) -> Result<GridPair> {
    if n_coarse < 2 || n_fine_per_coarse < 2 {
        return Err(invalid(
            "build_grids",
            format!("need n_coarse >= 2 and n_fine_per_coarse >= 2, got ({n_coarse}, {n_fine_per_coarse})"),
        ));
    }
    Ok(GridPair { n_coarse, n_fine_per_coarse })
}

/// Enumerates the coarse neighborhood `D_i` of interior coarse node `i`
/// (0-based, row-major).
pub fn neighborhood(g: &GridPair, i: usize) -> Result<Neighborhood> {
    if i >= g.n_interior_coarse() {
        return Err(invalid(
            "neighborhood",
            format!("node index {i} out of range (N_in = {})", g.n_interior_coarse()),
        ));
    }
    let (jx, jy) = g.interior_coarse_coords(i);
    let k = g.n_fine_per_coarse;
    // Fine-node extent of the 2x2 coarse-cell patch, inclusive.
    let (x0, x1) = ((jx - 1) * k, (jx + 1) * k);
    let (y0, y1) = ((jy - 1) * k, (jy + 1) * k);

    let mut fine_cells = Vec::with_capacity(4 * k * k);
    for cy in y0..y1 {
        for cx in x0..x1 {
            fine_cells.push(g.cell_index(cx, cy));
        }
    }

    let mut boundary_nodes = Vec::with_capacity(8 * k);
    for ix in x0..x1 {
        boundary_nodes.push(g.node_index(ix, y0));
    }
    for iy in y0..y1 {
        boundary_nodes.push(g.node_index(x1, iy));
    }
    for ix in (x0 + 1..=x1).rev() {
        boundary_nodes.push(g.node_index(ix, y1));
    }
    for iy in (y0 + 1..=y1).rev() {
        boundary_nodes.push(g.node_index(x0, iy));
    }

    let mut interior_nodes = Vec::with_capacity((2 * k - 1) * (2 * k - 1));
    for iy in y0 + 1..y1 {
        for ix in x0 + 1..x1 {
            interior_nodes.push(g.node_index(ix, iy));
        }
    }

    Ok(Neighborhood { coarse_node: (jx, jy), fine_cells, boundary_nodes, interior_nodes })
}

/// All neighborhoods in index order.
pub fn neighborhoods(g: &GridPair) -> Vec<Neighborhood> {
    (0..g.n_interior_coarse()).map(|i| neighborhood(g, i).unwrap()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn rejects_degenerate_sizes() {
        assert!(build_grids(0, 10).is_err());
        assert!(build_grids(10, 1).is_err());
        assert!(build_grids(1, 10).is_err());
    }

    #[test]
    fn ten_by_ten_counts() {
        let g = build_grids(10, 10).unwrap();
        assert_eq!(g.n_fine(), 100);
        assert_eq!(g.n_nodes(), 101 * 101);
        assert_eq!(g.n_interior_coarse(), 81);
        assert!((g.h() - 0.01).abs() < 1e-15);
        assert!((g.h_coarse() - 0.1).abs() < 1e-15);
    }

    #[test]
    fn example_three_refinement() {
        let g = build_grids(10, 40).unwrap();
        assert_eq!(g.n_fine(), 400);
    }

    #[test]
    fn smallest_grid_single_neighborhood_covers_domain() {
        let g = build_grids(2, 2).unwrap();
        assert_eq!(g.n_interior_coarse(), 1);
        let nb = neighborhood(&g, 0).unwrap();
        assert_eq!(nb.fine_cells.len(), g.n_cells());
        let all: HashSet<_> = nb
            .boundary_nodes
            .iter()
            .chain(nb.interior_nodes.iter())
            .copied()
            .collect();
        assert_eq!(all.len(), g.n_nodes());
    }

    #[test]
    fn neighborhood_boundary_count() {
        let g = build_grids(10, 10).unwrap();
        for i in 0..g.n_interior_coarse() {
            let nb = neighborhood(&g, i).unwrap();
            assert_eq!(nb.boundary_nodes.len(), 8 * g.n_fine_per_coarse);
            assert_eq!(nb.fine_cells.len(), 4 * g.n_fine_per_coarse * g.n_fine_per_coarse);
        }
    }

    #[test]
    fn neighborhood_out_of_range() {
        let g = build_grids(3, 4).unwrap();
        assert!(neighborhood(&g, g.n_interior_coarse()).is_err());
    }

    #[test]
    fn boundary_interior_partition_is_exact() {
        let g = build_grids(3, 3).unwrap();
        for i in 0..g.n_interior_coarse() {
            let nb = neighborhood(&g, i).unwrap();
            let b: HashSet<_> = nb.boundary_nodes.iter().copied().collect();
            let int: HashSet<_> = nb.interior_nodes.iter().copied().collect();
            assert_eq!(b.len(), nb.boundary_nodes.len());
            assert!(b.is_disjoint(&int));
            // Every node of every patch cell is classified.
            let mut patch_nodes = HashSet::new();
            for &c in &nb.fine_cells {
                let (cx, cy) = g.cell_coords(c);
                patch_nodes.extend(g.cell_nodes(cx, cy));
            }
            let classified: HashSet<_> = b.union(&int).copied().collect();
            assert_eq!(patch_nodes, classified);
        }
    }

    #[test]
    fn adjacent_neighborhoods_share_one_coarse_cell() {
        let g = build_grids(4, 3).unwrap();
        // Nodes (1,1) and (2,2) are diagonal neighbors: patches overlap in one coarse cell.
        let a = neighborhood(&g, 0).unwrap();
        let d = neighborhood(&g, 4).unwrap();
        let ca: HashSet<_> = a.fine_cells.iter().copied().collect();
        let cd: HashSet<_> = d.fine_cells.iter().copied().collect();
        let shared = ca.intersection(&cd).count();
        assert_eq!(shared, g.n_fine_per_coarse * g.n_fine_per_coarse);
    }

    #[test]
    fn neighborhoods_cover_interior_fine_nodes() {
        let g = build_grids(3, 2).unwrap();
        let mut count = vec![0usize; g.n_nodes()];
        for nb in neighborhoods(&g) {
            for &n in nb.interior_nodes.iter().chain(nb.boundary_nodes.iter()) {
                count[n] += 1;
            }
        }
        for idx in g.interior_nodes() {
            assert!(count[idx] >= 1, "interior fine node {idx} uncovered");
        }
        for c in count {
            assert!(c <= 4);
        }
    }
}
