//! Online adaptive enrichment: local residual functionals on coarse
//! neighborhoods, Riesz online-basis solves, greedy non-overlapping
//! selection, and the per-step enrichment loop with decay diagnostics.
//!
//! The residual of equation `e` at neighborhood `Dᵢ` is the functional
//! `v ↦ (b_e − A u_e, v)` restricted to the fine dofs interior to `Dᵢ`,
//! where `A` is the fine step operator and `b_e` the assembled dual
//! right-hand side. Its Riesz representative in the `ā`-energy inner
//! product on the patch interior is the online basis function; its norm
//! drives selection and the stopping rule.

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, numerical, Result};
use crate::fem::{assemble_stiffness, BandedCholesky, CellField, SparseOperator};
use crate::grid::{neighborhoods, GridPair, Neighborhood};
use crate::msbasis::{OfflineSpace, SparseCol};

/// Residual survey of one enrichment level.
#[derive(Debug, Clone)]
pub struct ResidualReport {
    /// Enrichment level the survey was taken at.
    pub level: usize,
    /// Per-neighborhood dual norms, aggregated over equations by maximum.
    pub norms: Vec<f64>,
    /// Error-indicator weights `(λ_{lᵢ+1})⁻¹`.
    pub weights: Vec<f64>,
    /// Neighborhoods enriched at this level; empty at a terminal level.
    pub selected: Vec<usize>,
}

/// Summary of one enrichment call.
#[derive(Debug, Clone, Default)]
pub struct EnrichOutcome {
    pub history: Vec<ResidualReport>,
    /// Coarse solutions of the entry-level solve, before any enrichment.
    pub x0: Vec<DVector<f64>>,
    /// Online columns appended.
    pub added: usize,
    /// Candidates dropped as linearly dependent.
    pub dropped: usize,
    /// Residual sum reached `θ` times its initial value.
    pub converged: bool,
    /// Residual sum failed to decrease across a round; indicates an
    /// insufficient offline basis.
    pub non_monotone: bool,
    /// Residual reduction fell under five percent in one round.
    pub stalled: bool,
    /// Energy errors per level against the fine reference, when given.
    pub energy: Vec<f64>,
    /// Seconds spent in coarse solves of the mean equation.
    pub solve_mean_s: f64,
    /// Seconds spent in coarse solves of the mode equations.
    pub solve_modes_s: f64,
}

/// Per-neighborhood Riesz solvers, built once per run.
pub struct OnlineContext {
    pub nbs: Vec<Neighborhood>,
    /// Free-dof indices of each neighborhood's interior nodes.
    pub patch_dofs: Vec<Vec<usize>>,
    /// Interior coarse-node coordinates, for the overlap test.
    pub coords: Vec<(usize, usize)>,
    riesz: Vec<(SparseOperator, BandedCholesky)>,
}

impl OnlineContext {
    pub fn new(g: &GridPair, abar: &CellField, space: &OfflineSpace) -> Result<Self> {
        let nbs = neighborhoods(g);
        let mut patch_dofs = Vec::with_capacity(nbs.len());
        let mut coords = Vec::with_capacity(nbs.len());
        let mut riesz = Vec::with_capacity(nbs.len());
        for (i, nb) in nbs.iter().enumerate() {
            let dofs: Vec<usize> = nb
                .interior_nodes
                .iter()
                .map(|&nd| {
                    let d = space.free_index[nd];
                    debug_assert_ne!(d, usize::MAX);
                    d
                })
                .collect();
            let op = assemble_stiffness(abar, g, Some(&nb.fine_cells), &nb.boundary_nodes)?;
            debug_assert_eq!(op.dofs(), nb.interior_nodes.as_slice());
            let factor = BandedCholesky::new(&op)?;
            patch_dofs.push(dofs);
            coords.push(g.interior_coarse_coords(i));
            riesz.push((op, factor));
        }
        Ok(OnlineContext { nbs, patch_dofs, coords, riesz })
    }

    pub fn n(&self) -> usize {
        self.nbs.len()
    }
}

/// Residual functional of neighborhood `i` as a dual vector on its interior
/// dofs: `ℛᵢ(v) = (c·M u_prev + sources − A u_off, v)`.
pub fn local_residual(
    ctx: &OnlineContext,
    i: usize,
    op: &SparseOperator,
    mass: &SparseOperator,
    u_off: &DVector<f64>,
    u_prev: &DVector<f64>,
    sources: &DVector<f64>,
    c: f64,
) -> Result<DVector<f64>> {
    let n = op.n();
    if mass.n() != n || u_off.len() != n || u_prev.len() != n || sources.len() != n {
        return Err(invalid("local_residual", "inconsistent dimensions"));
    }
    if i >= ctx.n() {
        return Err(invalid("local_residual", "neighborhood index out of range"));
    }
    let mut full = vec![0.0; n];
    mass.matvec(u_prev.as_slice(), &mut full);
    for (f, s) in full.iter_mut().zip(sources.iter()) {
        *f = c * *f + s;
    }
    let mut au = vec![0.0; n];
    op.matvec(u_off.as_slice(), &mut au);
    for (f, a) in full.iter_mut().zip(&au) {
        *f -= a;
    }
    Ok(gather_patch(ctx, i, &full))
}

fn gather_patch(ctx: &OnlineContext, i: usize, full: &[f64]) -> DVector<f64> {
    DVector::from_iterator(ctx.patch_dofs[i].len(), ctx.patch_dofs[i].iter().map(|&d| full[d]))
}

/// Riesz representative of a residual functional in the patch `ā`-energy
/// inner product, with its dual norm `‖ℛᵢ‖ = √(ℛᵢ(φ))`.
pub fn online_basis(ctx: &OnlineContext, i: usize, r: &DVector<f64>) -> Result<(DVector<f64>, f64)> {
    let (op, factor) = &ctx.riesz[i];
    if r.len() != op.n() {
        return Err(invalid("online_basis", "residual does not match patch"));
    }
    let phi = factor.solve_refined(op, r, 1e-12)?;
    let norm2 = phi.dot(r).max(0.0);
    #[cfg(debug_assertions)]
    {
        let mut kphi = vec![0.0; op.n()];
        op.matvec(phi.as_slice(), &mut kphi);
        let energy: f64 = phi.iter().zip(&kphi).map(|(a, b)| a * b).sum();
        debug_assert!(
            (energy - norm2).abs() <= 1e-9 * norm2.max(1e-30),
            "Riesz identity violated: {energy:e} vs {norm2:e}"
        );
    }
    Ok((phi, norm2.sqrt()))
}

/// Greedy choice of non-overlapping neighborhoods with the largest norms.
/// Two neighborhoods overlap when their coarse nodes differ by at most one
/// in both coordinates. Ties break toward the lower index.
pub fn select_non_overlapping(coords: &[(usize, usize)], norms: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..norms.len()).filter(|&i| norms[i] > 0.0).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));
    let mut chosen: Vec<usize> = Vec::new();
    'outer: for i in order {
        let (ix, iy) = coords[i];
        for &j in &chosen {
            let (jx, jy) = coords[j];
            if ix.abs_diff(jx) <= 1 && iy.abs_diff(jy) <= 1 {
                continue 'outer;
            }
        }
        chosen.push(i);
    }
    chosen.sort_unstable();
    chosen
}

/// Dense Galerkin system over the current space columns, with a Cholesky
/// factor that extends by one column at a time and truncates in place.
pub struct CoarseSolver {
    gram: DMatrix<f64>,
    chol: DMatrix<f64>,
    n: usize,
}

impl CoarseSolver {
    pub fn from_gram(gram: DMatrix<f64>) -> Result<Self> {
        let n = gram.nrows();
        let chol = nalgebra::Cholesky::new(gram.clone())
            .ok_or_else(|| numerical("coarse_solver", "galerkin matrix not positive definite"))?;
        let cap = n + 128;
        let mut g = DMatrix::zeros(cap, cap);
        let mut l = DMatrix::zeros(cap, cap);
        g.view_mut((0, 0), (n, n)).copy_from(&gram);
        l.view_mut((0, 0), (n, n)).copy_from(chol.l_dirty());
        Ok(CoarseSolver { gram: g, chol: l, n })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Drops trailing columns; pairs with [`OfflineSpace::reset_online`].
    pub fn truncate(&mut self, n: usize) {
        debug_assert!(n <= self.n);
        self.n = n;
    }

    /// Appends a column given its inner products `w` against the current
    /// columns and its own diagonal entry. Returns `false` without extending
    /// when the column is linearly dependent.
    pub fn extend(&mut self, w: &DVector<f64>, diag: f64) -> Result<bool> {
        let n = self.n;
        debug_assert_eq!(w.len(), n);
        let l = self.chol.view((0, 0), (n, n));
        let lw = l
            .solve_lower_triangular(w)
            .ok_or_else(|| numerical("coarse_solver", "singular factor"))?;
        let pivot2 = diag - lw.norm_squared();
        if !(pivot2 > 1e-10 * diag.max(0.0)) {
            return Ok(false);
        }
        if n + 1 > self.gram.nrows() {
            let cap = self.gram.nrows() * 2;
            self.gram = self.gram.clone().resize(cap, cap, 0.0);
            self.chol = self.chol.clone().resize(cap, cap, 0.0);
        }
        for j in 0..n {
            self.gram[(n, j)] = w[j];
            self.gram[(j, n)] = w[j];
            self.chol[(n, j)] = lw[j];
        }
        self.gram[(n, n)] = diag;
        self.chol[(n, n)] = pivot2.sqrt();
        self.n = n + 1;
        Ok(true)
    }

    pub fn solve(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        let n = self.n;
        debug_assert_eq!(b.len(), n);
        let l = self.chol.view((0, 0), (n, n));
        let y = l
            .solve_lower_triangular(b)
            .ok_or_else(|| numerical("coarse_solver", "singular factor"))?;
        l.transpose()
            .solve_upper_triangular(&y)
            .ok_or_else(|| numerical("coarse_solver", "singular factor"))
    }
}

fn solve_all(
    space: &OfflineSpace,
    solver: &CoarseSolver,
    rhs: &[DVector<f64>],
    times: &mut (f64, f64),
) -> Result<Vec<DVector<f64>>> {
    let mut out = Vec::with_capacity(rhs.len());
    for (e, b) in rhs.iter().enumerate() {
        let start = std::time::Instant::now();
        let x = solver.solve(&space.restrict(b.as_slice()))?;
        let spent = start.elapsed().as_secs_f64();
        if e == 0 {
            times.0 += spent;
        } else {
            times.1 += spent;
        }
        out.push(x);
    }
    Ok(out)
}

fn energy_error(
    op: &SparseOperator,
    space: &OfflineSpace,
    x: &[DVector<f64>],
    fine: &[DVector<f64>],
) -> f64 {
    let mut total = 0.0;
    let mut scratch = vec![0.0; op.n()];
    for (xe, fe) in x.iter().zip(fine) {
        let diff = space.prolong(xe) - fe;
        op.matvec(diff.as_slice(), &mut scratch);
        total += diff.iter().zip(&scratch).map(|(a, b)| a * b).sum::<f64>();
    }
    total.max(0.0).sqrt()
}

/// Runs the enrichment loop for one time step: survey residuals, pick
/// non-overlapping neighborhoods, append their online bases, re-solve, until
/// the residual sum falls under `θ` times its initial value, falls under the
/// absolute floor `tol_abs`, or `max_rounds` is reached. `solver` must match
/// the columns of `space` on entry and is extended alongside it. `fine_ref`
/// attaches per-equation fine solutions of the same systems for energy-error
/// diagnostics.
#[allow(clippy::too_many_arguments)]
pub fn enrich(
    space: &mut OfflineSpace,
    solver: &mut CoarseSolver,
    ctx: &OnlineContext,
    op: &SparseOperator,
    rhs: &[DVector<f64>],
    theta: f64,
    tol_abs: f64,
    max_rounds: usize,
    fine_ref: Option<&[DVector<f64>]>,
) -> Result<(Vec<DVector<f64>>, EnrichOutcome)> {
    if rhs.is_empty() {
        return Err(invalid("enrich", "no equations"));
    }
    let nfree = space.free_nodes.len();
    if op.n() != nfree || rhs.iter().any(|b| b.len() != nfree) {
        return Err(invalid("enrich", "operator or right-hand side does not match the free dofs"));
    }
    if solver.n() != space.n_cols() {
        return Err(invalid("enrich", "solver does not match the space"));
    }
    if !(0.0..=1.0).contains(&theta) {
        return Err(invalid("enrich", "theta must lie in [0, 1]"));
    }

    let weights: Vec<f64> = (0..ctx.n()).map(|i| 1.0 / space.lambda_next(i)).collect();
    let mut out = EnrichOutcome::default();
    let mut times = (0.0, 0.0);
    let mut x = solve_all(space, solver, rhs, &mut times)?;
    out.x0 = x.clone();
    if let Some(fine) = fine_ref {
        out.energy.push(energy_error(op, space, &x, fine));
    }

    let mut residual_full = vec![vec![0.0; nfree]; rhs.len()];
    let mut initial_sum = 0.0;
    let mut prev_sum = 0.0;
    let mut scratch = vec![0.0; nfree];
    for level in 0..=max_rounds {
        // Residual survey: aggregate equations by the largest local norm and
        // keep that equation's Riesz representative.
        for (re, (xe, be)) in residual_full.iter_mut().zip(x.iter().zip(rhs)) {
            let ue = space.prolong(xe);
            op.matvec(ue.as_slice(), re);
            for (r, b) in re.iter_mut().zip(be.iter()) {
                *r = b - *r;
            }
        }
        let mut norms = vec![0.0; ctx.n()];
        let mut reps: Vec<Option<DVector<f64>>> = vec![None; ctx.n()];
        for i in 0..ctx.n() {
            for re in &residual_full {
                let r_loc = gather_patch(ctx, i, re);
                let (phi, norm) = online_basis(ctx, i, &r_loc)?;
                if norm > norms[i] {
                    norms[i] = norm;
                    reps[i] = Some(phi);
                }
            }
        }
        let sum: f64 = norms.iter().sum();
        if level == 0 {
            initial_sum = sum;
        }

        let stop_converged = sum <= theta * initial_sum || sum <= tol_abs || sum == 0.0;
        let stop_rounds = level == max_rounds;
        let mut stop = stop_converged || stop_rounds;
        if level > 0 && !stop_converged {
            if sum >= prev_sum {
                out.non_monotone = true;
                stop = true;
            } else if sum > 0.95 * prev_sum {
                out.stalled = true;
                stop = true;
            }
        }
        prev_sum = sum;

        let selected = if stop { Vec::new() } else { select_non_overlapping(&ctx.coords, &norms) };
        let stop = stop || selected.is_empty();
        out.history.push(ResidualReport {
            level,
            norms,
            weights: weights.clone(),
            selected: selected.clone(),
        });
        if stop {
            out.converged = stop_converged;
            break;
        }

        for &i in &selected {
            let phi = reps[i].as_ref().unwrap();
            let norm = out.history.last().unwrap().norms[i];
            let col = SparseCol {
                idx: ctx.patch_dofs[i].clone(),
                val: phi.iter().map(|v| v / norm).collect(),
            };
            scratch.iter_mut().for_each(|v| *v = 0.0);
            op.add_matvec_sparse(&col.idx, &col.val, &mut scratch);
            let w = DVector::from_iterator(
                space.n_cols(),
                (0..space.n_cols()).map(|j| space.col(j).dot_dense(&scratch)),
            );
            let diag = col.dot_dense(&scratch);
            if solver.extend(&w, diag)? {
                space.online_cols.push(col);
                space.online_owner.push(i);
                out.added += 1;
            } else {
                out.dropped += 1;
            }
        }

        x = solve_all(space, solver, rhs, &mut times)?;
        if let Some(fine) = fine_ref {
            out.energy.push(energy_error(op, space, &x, fine));
        }
    }
    out.solve_mean_s = times.0;
    out.solve_modes_s = times.1;
    Ok((x, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::{assemble_mass, solve_spd};
    use crate::grid::build_grids;
    use crate::media::high_contrast_mean;
    use crate::msbasis::{build_offline_space, BasisCounts};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};

    struct Setup {
        space: OfflineSpace,
        ctx: OnlineContext,
        op: SparseOperator,
        mass: SparseOperator,
    }

    fn setup(nc: usize, k: usize, l: usize, c: f64, seed: u64) -> Setup {
        let g = build_grids(nc, k).unwrap();
        let abar = high_contrast_mean(&g, 2, 1.0, 40.0, seed).unwrap();
        let space = build_offline_space(&g, &abar, &BasisCounts::Uniform(l)).unwrap();
        let ctx = OnlineContext::new(&g, &abar, &space).unwrap();
        let fixed = g.boundary_nodes();
        let stiff = assemble_stiffness(&abar, &g, None, &fixed).unwrap();
        let mass = assemble_mass(&g, None, &fixed).unwrap();
        let mut op = stiff;
        op.axpy_same_pattern(c, &mass).unwrap();
        Setup { space, ctx, op, mass }
    }

    #[test]
    fn zero_inputs_give_zero_functional() {
        let s = setup(3, 3, 2, 8.0, 1);
        let z = DVector::zeros(s.op.n());
        let r = local_residual(&s.ctx, 0, &s.op, &s.mass, &z, &z, &z, 8.0).unwrap();
        assert_eq!(r.amax(), 0.0);
        let (phi, norm) = online_basis(&s.ctx, 0, &r).unwrap();
        assert_eq!(phi.amax(), 0.0);
        assert_eq!(norm, 0.0);
    }

    #[test]
    fn fine_solution_has_zero_residual() {
        let s = setup(3, 3, 2, 8.0, 2);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let u_prev =
            DVector::from_fn(s.op.n(), |_, _| rng.random::<f64>() - 0.5);
        let sources = DVector::from_fn(s.op.n(), |_, _| rng.random::<f64>() - 0.5);
        let b = 8.0 * s.mass.matvec_v(&u_prev) + &sources;
        let u_f = solve_spd(&s.op, &b).unwrap();
        let scale = b.amax();
        for i in 0..s.ctx.n() {
            let r = local_residual(&s.ctx, i, &s.op, &s.mass, &u_f, &u_prev, &sources, 8.0).unwrap();
            let (_, norm) = online_basis(&s.ctx, i, &r).unwrap();
            assert!(norm <= 1e-9 * scale, "neighborhood {i}: norm {norm:e}");
        }
    }

    #[test]
    fn riesz_identity_and_independent_dual_norm() {
        let s = setup(3, 4, 2, 4.0, 3);
        let i = 2;
        let nd = s.ctx.patch_dofs[i].len();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let r = DVector::from_fn(nd, |_, _| rng.random::<f64>() - 0.5);
        let (phi, norm) = online_basis(&s.ctx, i, &r).unwrap();

        // Independent path: dense patch stiffness, direct solve.
        let k_dense = s.ctx.riesz[i].0.to_dense();
        let phi_dense = nalgebra::Cholesky::new(k_dense.clone()).unwrap().solve(&r);
        let dual = r.dot(&phi_dense).sqrt();
        assert_abs_diff_eq!(norm, dual, epsilon = 1e-9 * dual);
        let energy = (phi.transpose() * &k_dense * &phi)[(0, 0)];
        assert_abs_diff_eq!(energy, norm * norm, epsilon = 1e-9 * norm * norm);
    }

    #[test]
    fn selection_is_non_overlapping_and_deterministic() {
        let coords: Vec<(usize, usize)> =
            (1..=4).flat_map(|y| (1..=4).map(move |x| (x, y))).collect();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let norms: Vec<f64> = (0..coords.len()).map(|_| rng.random::<f64>()).collect();
            let sel = select_non_overlapping(&coords, &norms);
            let again = select_non_overlapping(&coords, &norms);
            assert_eq!(sel, again);
            assert!(!sel.is_empty());
            for (a, &i) in sel.iter().enumerate() {
                for &j in &sel[a + 1..] {
                    let d = (coords[i].0.abs_diff(coords[j].0), coords[i].1.abs_diff(coords[j].1));
                    assert!(d.0 > 1 || d.1 > 1, "{i} and {j} overlap");
                }
            }
            // The argmax is always chosen.
            let best = (0..norms.len()).max_by(|&a, &b| norms[a].total_cmp(&norms[b])).unwrap();
            assert!(sel.contains(&best));
        }
    }

    #[test]
    fn theta_one_is_a_no_op() {
        let s = setup(3, 3, 2, 8.0, 4);
        let mut space = s.space;
        let mut solver = CoarseSolver::from_gram(space.gram(&s.op)).unwrap();
        let ones = DVector::from_element(s.op.n(), 1.0);
        let rhs = [s.mass.matvec_v(&ones)];
        let before = space.n_cols();
        let (_, out) =
            enrich(&mut space, &mut solver, &s.ctx, &s.op, &rhs, 1.0, 0.0, 5, None).unwrap();
        assert_eq!(space.n_cols(), before);
        assert_eq!(out.added, 0);
        assert!(out.converged);
        assert_eq!(out.history.len(), 1);
        assert!(out.history[0].selected.is_empty());
        assert!(out.history[0].norms.iter().all(|&n| n >= 0.0));
    }

    #[test]
    fn enrichment_decays_residual_and_energy() {
        let s = setup(4, 4, 2, 16.0, 6);
        let mut space = s.space;
        let mut solver = CoarseSolver::from_gram(space.gram(&s.op)).unwrap();
        let ones = DVector::from_element(s.op.n(), 1.0);
        let rhs = [s.mass.matvec_v(&ones)];
        let fine = [solve_spd(&s.op, &rhs[0]).unwrap()];
        let (x, out) =
            enrich(&mut space, &mut solver, &s.ctx, &s.op, &rhs, 1e-6, 0.0, 3, Some(&fine)).unwrap();
        assert!(out.added > 0);
        assert!(!out.non_monotone, "history: {:?}", out.history);
        // Energy errors non-increasing across rounds.
        for w in out.energy.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12), "energy grew: {:?}", out.energy);
        }
        assert!(out.energy.len() >= 3);
        assert!(out.energy.last().unwrap() < &out.energy[0]);
        // Residual sums decrease across levels.
        let sums: Vec<f64> = out.history.iter().map(|r| r.norms.iter().sum()).collect();
        for w in sums.windows(2) {
            assert!(w[1] < w[0], "sums: {sums:?}");
        }
        assert_eq!(x.len(), 1);
        assert_eq!(x[0].len(), space.n_cols());
        assert_eq!(solver.n(), space.n_cols());
    }

    #[test]
    fn enrichment_reaches_tolerance() {
        let s = setup(4, 3, 3, 16.0, 8);
        let mut space = s.space;
        let mut solver = CoarseSolver::from_gram(space.gram(&s.op)).unwrap();
        let ones = DVector::from_element(s.op.n(), 1.0);
        let rhs = [s.mass.matvec_v(&ones)];
        let (_, out) =
            enrich(&mut space, &mut solver, &s.ctx, &s.op, &rhs, 0.3, 0.0, 8, None).unwrap();
        assert!(out.converged, "history: {} levels, added {}", out.history.len(), out.added);
        let sums: Vec<f64> = out.history.iter().map(|r| r.norms.iter().sum()).collect();
        assert!(sums.last().unwrap() <= &(0.3 * sums[0]));
    }

    #[test]
    fn dependent_column_is_rejected() {
        let s = setup(3, 3, 2, 8.0, 9);
        let gram = s.space.gram(&s.op);
        let mut solver = CoarseSolver::from_gram(gram.clone()).unwrap();
        // A column equal to the first one: w = gram column 0, diag = gram[0,0].
        let w = gram.column(0).into_owned();
        assert!(!solver.extend(&w, gram[(0, 0)]).unwrap());
        assert_eq!(solver.n(), gram.nrows());
        // An independent column extends and solves consistently.
        let n = gram.nrows();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
        let w2 = DVector::from_fn(n, |_, _| 0.01 * (rng.random::<f64>() - 0.5));
        assert!(solver.extend(&w2, gram[(0, 0)] + 1.0).unwrap());
        assert_eq!(solver.n(), n + 1);
        solver.truncate(n);
        let b = DVector::from_fn(n, |_, _| rng.random::<f64>() - 0.5);
        let x = solver.solve(&b).unwrap();
        let direct = nalgebra::Cholesky::new(gram).unwrap().solve(&b);
        assert_abs_diff_eq!((x - direct).amax(), 0.0, epsilon = 1e-9);
    }

    #[test]
    fn truncate_matches_reset() {
        let s = setup(3, 3, 2, 8.0, 10);
        let mut space = s.space;
        let n_off = space.n_offline();
        let mut solver = CoarseSolver::from_gram(space.gram(&s.op)).unwrap();
        let ones = DVector::from_element(s.op.n(), 1.0);
        let rhs = [s.mass.matvec_v(&ones)];
        let (_, out) =
            enrich(&mut space, &mut solver, &s.ctx, &s.op, &rhs, 0.1, 0.0, 4, None).unwrap();
        assert!(out.added > 0);
        space.reset_online();
        solver.truncate(n_off);
        // The truncated solver reproduces the offline-only solution.
        let x = solver.solve(&space.restrict(rhs[0].as_slice())).unwrap();
        let fresh = CoarseSolver::from_gram(space.gram(&s.op)).unwrap();
        let y = fresh.solve(&space.restrict(rhs[0].as_slice())).unwrap();
        assert_abs_diff_eq!((x - y).amax(), 0.0, epsilon = 1e-10);
    }
}
