//! Verification backends: a coupled stochastic Galerkin solver on the fine
//! grid with no low-rank truncation, covariance-based KL extraction, and
//! the error metrics used by the experiment reports.
//!
//! The reference solution is expanded over the extended chaos basis
//! `H̃ = [1, H₁..H_Np]`; one implicit-Euler step couples all blocks through
//! the fluctuation stiffness matrices and the moment matrices `E[ξᵢH̃ᵀH̃]`.

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, numerical, Result};
use crate::fem::{assemble_mass, assemble_stiffness, BandedCholesky, SparseOperator};
use crate::gpc::GpcSpace;
use crate::grid::GridPair;
use crate::media::CoefficientModel;

/// Refuse coupled systems larger than this many unknowns.
const MAX_UNKNOWNS: usize = 5_000_000;
/// Assemble and factor the full coupled matrix below this size.
const DIRECT_LIMIT: usize = 1200;

enum BlockSolver {
    Direct(nalgebra::Cholesky<f64, nalgebra::Dyn>),
    /// Preconditioned conjugate gradients with a block-Jacobi preconditioner
    /// sharing one banded factor of `S₀ + cM`.
    Iterative,
}

/// The coupled fine-scale gPC-Galerkin system at a fixed step size.
pub struct GpcStepper {
    mass: SparseOperator,
    sys: SparseOperator,
    s: Vec<SparseOperator>,
    text: Vec<DMatrix<f64>>,
    factor: BandedCholesky,
    fhat: DVector<f64>,
    solver: BlockSolver,
    c: f64,
    nfree: usize,
    /// Blocks, `N_p + 1`.
    nb: usize,
}

impl GpcStepper {
    pub fn new(
        model: &CoefficientModel,
        g: &GridPair,
        gpc: &GpcSpace,
        f_all: &DVector<f64>,
        dt: f64,
    ) -> Result<Self> {
        Self::with_solver(model, g, gpc, f_all, dt, None)
    }

    fn with_solver(
        model: &CoefficientModel,
        g: &GridPair,
        gpc: &GpcSpace,
        f_all: &DVector<f64>,
        dt: f64,
        force_iterative: Option<bool>,
    ) -> Result<Self> {
        if model.r() != gpc.r {
            return Err(invalid("gpc_galerkin", "model and chaos space disagree on r"));
        }
        if f_all.len() != g.n_nodes() {
            return Err(invalid("gpc_galerkin", "source does not match the grid nodes"));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(invalid("gpc_galerkin", "step size must be positive"));
        }
        let fixed = g.boundary_nodes();
        let mass = assemble_mass(g, None, &fixed)?;
        let nfree = mass.n();
        let nb = gpc.n_p() + 1;
        if nfree * nb > MAX_UNKNOWNS {
            return Err(invalid(
                "gpc_galerkin",
                format!("coupled system has {} unknowns; refusing above {MAX_UNKNOWNS}", nfree * nb),
            ));
        }
        let c = 1.0 / dt;
        let s0 = assemble_stiffness(&model.abar, g, None, &fixed)?;
        let s: Vec<SparseOperator> = model
            .modes
            .iter()
            .map(|ai| assemble_stiffness(ai, g, None, &fixed))
            .collect::<Result<_>>()?;
        let mut sys = s0;
        sys.axpy_same_pattern(c, &mass)?;
        let factor = BandedCholesky::new(&sys)?;
        let text: Vec<DMatrix<f64>> = (0..gpc.r).map(|i| gpc.extended_t1(i)).collect();
        let full_mass = assemble_mass(g, None, &[])?;
        let fhat = mass.gather(full_mass.matvec_v(f_all).as_slice());

        let use_direct = match force_iterative {
            Some(force) => !force,
            None => nfree * nb <= DIRECT_LIMIT,
        };
        let solver = if use_direct {
            let n = nfree * nb;
            let sys_d = sys.to_dense();
            let s_d: Vec<DMatrix<f64>> = s.iter().map(|op| op.to_dense()).collect();
            let mut big = DMatrix::zeros(n, n);
            for a in 0..nb {
                for b in 0..nb {
                    let mut block = if a == b { sys_d.clone() } else { DMatrix::zeros(nfree, nfree) };
                    for (i, sd) in s_d.iter().enumerate() {
                        let w = text[i][(a, b)];
                        if w != 0.0 {
                            block += sd * w;
                        }
                    }
                    big.view_mut((a * nfree, b * nfree), (nfree, nfree)).copy_from(&block);
                }
            }
            BlockSolver::Direct(
                nalgebra::Cholesky::new(big)
                    .ok_or_else(|| numerical("gpc_galerkin", "coupled system not positive definite"))?,
            )
        } else {
            BlockSolver::Iterative
        };
        Ok(GpcStepper { mass, sys, s, text, factor, fhat, solver, c, nfree, nb })
    }

    pub fn n_free(&self) -> usize {
        self.nfree
    }

    pub fn n_blocks(&self) -> usize {
        self.nb
    }

    pub fn mass(&self) -> &SparseOperator {
        &self.mass
    }

    /// Applies the coupled operator to a block of coefficient columns.
    fn apply(&self, v: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.nfree, self.nb);
        let mut xi = vec![0.0; self.nfree];
        let mut yi = vec![0.0; self.nfree];
        for a in 0..self.nb {
            for (dst, src) in xi.iter_mut().zip(v.column(a).iter()) {
                *dst = *src;
            }
            self.sys.matvec(&xi, &mut yi);
            out.column_mut(a).copy_from_slice(&yi);
        }
        for (i, si) in self.s.iter().enumerate() {
            let w = v * &self.text[i];
            for a in 0..self.nb {
                for (dst, src) in xi.iter_mut().zip(w.column(a).iter()) {
                    *dst = *src;
                }
                si.matvec(&xi, &mut yi);
                for (o, y) in out.column_mut(a).iter_mut().zip(yi.iter()) {
                    *o += *y;
                }
            }
        }
        out
    }

    fn precondition(&self, r: &DMatrix<f64>) -> DMatrix<f64> {
        let mut z = DMatrix::zeros(self.nfree, self.nb);
        for a in 0..self.nb {
            let col = DVector::from_iterator(self.nfree, r.column(a).iter().cloned());
            z.column_mut(a).copy_from(&self.factor.solve(&col));
        }
        z
    }

    fn dot(x: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
        x.iter().zip(y.iter()).map(|(a, b)| a * b).sum()
    }

    fn solve_coupled(&self, b: &DMatrix<f64>, x0: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        match &self.solver {
            BlockSolver::Direct(chol) => {
                let stacked = DVector::from_iterator(self.nfree * self.nb, b.iter().cloned());
                let sol = chol.solve(&stacked);
                Ok(DMatrix::from_iterator(self.nfree, self.nb, sol.iter().cloned()))
            }
            BlockSolver::Iterative => {
                let bnorm = Self::dot(b, b).sqrt();
                if bnorm == 0.0 {
                    return Ok(DMatrix::zeros(self.nfree, self.nb));
                }
                let tol = 1e-12 * bnorm;
                let mut x = x0.clone();
                let mut r = b - self.apply(&x);
                let mut z = self.precondition(&r);
                let mut p = z.clone();
                let mut rz = Self::dot(&r, &z);
                for _ in 0..1000 {
                    if Self::dot(&r, &r).sqrt() <= tol {
                        return Ok(x);
                    }
                    let ap = self.apply(&p);
                    let alpha = rz / Self::dot(&p, &ap);
                    x += &p * alpha;
                    r -= &ap * alpha;
                    z = self.precondition(&r);
                    let rz_new = Self::dot(&r, &z);
                    let beta = rz_new / rz;
                    rz = rz_new;
                    p = &z + &p * beta;
                }
                if Self::dot(&r, &r).sqrt() <= tol * 100.0 {
                    return Ok(x);
                }
                Err(numerical("gpc_galerkin", "conjugate gradients failed to converge"))
            }
        }
    }

    /// One implicit-Euler step of the coupled system.
    pub fn step(&self, v: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if v.nrows() != self.nfree || v.ncols() != self.nb {
            return Err(invalid("gpc_galerkin", "coefficient block has the wrong shape"));
        }
        let mut rhs = DMatrix::zeros(self.nfree, self.nb);
        let mut xi = vec![0.0; self.nfree];
        let mut yi = vec![0.0; self.nfree];
        for a in 0..self.nb {
            for (dst, src) in xi.iter_mut().zip(v.column(a).iter()) {
                *dst = *src;
            }
            self.mass.matvec(&xi, &mut yi);
            for (dst, src) in rhs.column_mut(a).iter_mut().zip(yi.iter()) {
                *dst = self.c * *src;
            }
        }
        rhs.column_mut(0).iter_mut().zip(self.fhat.iter()).for_each(|(d, f)| *d += *f);
        let next = self.solve_coupled(&rhs, v)?;
        if next.iter().any(|x| !x.is_finite()) {
            return Err(numerical("gpc_galerkin", "non-finite reference solution"));
        }
        Ok(next)
    }
}

/// Gathers initial fields into a coefficient block over the extended basis:
/// column 0 is the mean, column `1+i` the i-th mode (stochastic coefficients
/// canonical), remaining columns zero. Fields are nodal values over all
/// grid nodes.
pub fn initial_block(
    g: &GridPair,
    gpc: &GpcSpace,
    u0_all: &DVector<f64>,
    mode_fields: &[DVector<f64>],
) -> Result<DMatrix<f64>> {
    let np = gpc.n_p();
    if mode_fields.len() > np {
        return Err(invalid("initial_block", "more modes than chaos basis functions"));
    }
    let nn = g.n_nodes();
    if u0_all.len() != nn || mode_fields.iter().any(|f| f.len() != nn) {
        return Err(invalid("initial_block", "fields do not match the grid nodes"));
    }
    let mass = assemble_mass(g, None, &g.boundary_nodes())?;
    let mut block = DMatrix::zeros(mass.n(), np + 1);
    block.column_mut(0).copy_from(&mass.gather(u0_all.as_slice()));
    for (i, f) in mode_fields.iter().enumerate() {
        block.column_mut(i + 1).copy_from(&mass.gather(f.as_slice()));
    }
    Ok(block)
}

/// Runs the coupled fine-scale reference from nodal initial fields and
/// returns all `n_steps + 1` coefficient blocks.
#[allow(clippy::too_many_arguments)]
pub fn gpc_galerkin_solve(
    model: &CoefficientModel,
    g: &GridPair,
    gpc: &GpcSpace,
    u0_all: &DVector<f64>,
    mode_fields: &[DVector<f64>],
    f_all: &DVector<f64>,
    dt: f64,
    n_steps: usize,
) -> Result<Vec<DMatrix<f64>>> {
    let stepper = GpcStepper::new(model, g, gpc, f_all, dt)?;
    let mut levels = Vec::with_capacity(n_steps + 1);
    levels.push(initial_block(g, gpc, u0_all, mode_fields)?);
    for _ in 0..n_steps {
        let next = stepper.step(levels.last().unwrap())?;
        levels.push(next);
    }
    Ok(levels)
}

/// KL factors of a gPC coefficient block.
#[derive(Debug, Clone)]
pub struct KlFactors {
    pub mean: DVector<f64>,
    /// M-orthogonal spatial modes with non-increasing norms, `N_f × m`.
    pub modes: DMatrix<f64>,
    /// Orthonormal stochastic coefficient columns, `N_p × m`.
    pub coeffs: DMatrix<f64>,
    /// KL spectrum, `Λᵢ = ⟨modeᵢ, modeᵢ⟩_M`.
    pub lambda: DVector<f64>,
    /// Modes zeroed because their eigenvalue fell below the rank floor.
    pub zeroed: usize,
}

/// Extracts the m-term KL factorization of a coefficient block by an
/// M-weighted eigendecomposition of the fluctuation covariance.
pub fn kl_extract(block: &DMatrix<f64>, mass: &SparseOperator, m: usize) -> Result<KlFactors> {
    let nfree = block.nrows();
    if nfree != mass.n() {
        return Err(invalid("kl_extract", "block does not match the mass matrix"));
    }
    if block.ncols() < 2 {
        return Err(invalid("kl_extract", "block has no fluctuation columns"));
    }
    let np = block.ncols() - 1;
    if m == 0 || m > np {
        return Err(invalid("kl_extract", format!("mode count {m} outside 1..={np}")));
    }
    let fluct = block.columns(1, np);
    let mut mf = DMatrix::zeros(nfree, np);
    let mut xi = vec![0.0; nfree];
    let mut yi = vec![0.0; nfree];
    for j in 0..np {
        for (dst, src) in xi.iter_mut().zip(fluct.column(j).iter()) {
            *dst = *src;
        }
        mass.matvec(&xi, &mut yi);
        mf.column_mut(j).copy_from_slice(&yi);
    }
    let gram = fluct.transpose() * &mf;
    let gram = (&gram + gram.transpose()) * 0.5;
    let eig = gram.symmetric_eigen();
    let mut order: Vec<usize> = (0..np).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let mut modes = DMatrix::zeros(nfree, m);
    let mut coeffs = DMatrix::zeros(np, m);
    let mut lambda = DVector::zeros(m);
    let max_ev = eig.eigenvalues[order[0]].max(0.0);
    let mut zeroed = 0;
    for j in 0..m {
        let src = order[j];
        let mut q = DVector::from_column_slice(eig.eigenvectors.column(src).as_slice());
        // Deterministic sign: largest stochastic entry positive.
        let mut imax = 0;
        for (i, v) in q.iter().enumerate() {
            if v.abs() > q[imax].abs() {
                imax = i;
            }
        }
        if q[imax] < 0.0 {
            q.neg_mut();
        }
        let ev = eig.eigenvalues[src].max(0.0);
        if ev <= 1e-12 * max_ev {
            zeroed += 1;
            coeffs.column_mut(j).copy_from(&q);
            continue;
        }
        modes.column_mut(j).copy_from(&(fluct * &q));
        coeffs.column_mut(j).copy_from(&q);
        lambda[j] = ev;
    }
    Ok(KlFactors {
        mean: DVector::from_column_slice(block.column(0).as_slice()),
        modes,
        coeffs,
        lambda,
        zeroed,
    })
}

/// Relative M-weighted L² error of `approx` against `reference`.
pub fn error_l2(
    reference: &DVector<f64>,
    approx: &DVector<f64>,
    mass: &SparseOperator,
) -> Result<f64> {
    if reference.len() != mass.n() || approx.len() != mass.n() {
        return Err(invalid("error_l2", "fields do not match the mass matrix"));
    }
    let mnorm = |v: &DVector<f64>| -> f64 {
        let mut y = vec![0.0; v.len()];
        mass.matvec(v.as_slice(), &mut y);
        v.as_slice().iter().zip(&y).map(|(a, b)| a * b).sum::<f64>().max(0.0).sqrt()
    };
    let rn = mnorm(reference);
    if rn == 0.0 {
        return Err(invalid("error_l2", "zero reference norm"));
    }
    Ok(mnorm(&(approx - reference)) / rn)
}

/// Pointwise variance field `var(u) = Σᵢ uᵢ²` of a mode block.
pub fn variance_field(modes: &DMatrix<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(modes.nrows());
    for j in 0..modes.ncols() {
        for (o, v) in out.iter_mut().zip(modes.column(j).iter()) {
            *o += v * v;
        }
    }
    out
}

/// Permutes and sign-fixes the columns of `target` to match `reference` by
/// greedy absolute M-correlation. Both must have the same shape.
pub fn align_modes(
    reference: &DMatrix<f64>,
    target: &DMatrix<f64>,
    mass: &SparseOperator,
) -> Result<DMatrix<f64>> {
    if reference.shape() != target.shape() || reference.nrows() != mass.n() {
        return Err(invalid("align_modes", "mode blocks do not match"));
    }
    let m = reference.ncols();
    let nfree = reference.nrows();
    let mut mt = DMatrix::zeros(nfree, m);
    let mut xi = vec![0.0; nfree];
    let mut yi = vec![0.0; nfree];
    for j in 0..m {
        for (dst, src) in xi.iter_mut().zip(target.column(j).iter()) {
            *dst = *src;
        }
        mass.matvec(&xi, &mut yi);
        mt.column_mut(j).copy_from_slice(&yi);
    }
    // corr[(i, j)] = ⟨refᵢ, tgtⱼ⟩_M
    let corr = reference.transpose() * &mt;
    let mut used = vec![false; m];
    let mut aligned = DMatrix::zeros(nfree, m);
    for i in 0..m {
        let mut best: Option<usize> = None;
        for j in 0..m {
            if used[j] && best != Some(j) {
                continue;
            }
            if !used[j]
                && best.map_or(true, |b| corr[(i, j)].abs() > corr[(i, b)].abs())
            {
                best = Some(j);
            }
        }
        let j = best.expect("columns remain");
        used[j] = true;
        let sign = if corr[(i, j)] < 0.0 { -1.0 } else { 1.0 };
        aligned.column_mut(i).copy_from(&(target.column(j) * sign));
    }
    Ok(aligned)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dybo::{
        assemble_operators, init_state, lambda_matrix, step, SpaceChoice, StepConfig,
    };
    use crate::fem::CellField;
    use crate::grid::build_grids;
    use crate::media::CoefficientModel;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mild_model(g: &crate::grid::GridPair, amp: f64, r: usize) -> CoefficientModel {
        let abar = CellField::from_fn(g, |x, y| 1.0 + 0.4 * (2.0 * x).sin() * (3.0 * y).cos());
        let modes = (0..r)
            .map(|i| {
                CellField::from_fn(g, |x, y| {
                    amp * (1.0 + ((i as f64 + 2.0) * x + y).sin()) / 2.0
                })
            })
            .collect();
        CoefficientModel::new(abar, modes).unwrap()
    }

    fn cosine_bump(g: &crate::grid::GridPair, amp: f64, k: f64) -> DVector<f64> {
        let tau = 2.0 * std::f64::consts::PI;
        DVector::from_fn(g.n_nodes(), |idx, _| {
            let (x, y) = g.node_pos(idx);
            amp * (1.0 - (tau * k * x).cos()) * (1.0 - (tau * k * y).cos())
        })
    }

    #[test]
    fn zero_fluctuation_blocks_decouple() {
        let g = build_grids(2, 3).unwrap();
        let abar = CellField::from_fn(&g, |x, y| 1.0 + x + y);
        let model =
            CoefficientModel::new(abar.clone(), vec![CellField::constant(&g, 0.0)]).unwrap();
        let gpc = GpcSpace::new(1, 2).unwrap();
        let f_all = DVector::from_element(g.n_nodes(), 1.0);
        let dt = 0.05;
        let stepper = GpcStepper::new(&model, &g, &gpc, &f_all, dt).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut v = DMatrix::from_fn(stepper.n_free(), stepper.n_blocks(), |_, _| {
            rng.random::<f64>() - 0.5
        });
        let fixed = g.boundary_nodes();
        let mass = assemble_mass(&g, None, &fixed).unwrap();
        let stiff = assemble_stiffness(&abar, &g, None, &fixed).unwrap();
        let mut sys = stiff.clone();
        sys.axpy_same_pattern(1.0 / dt, &mass).unwrap();
        let factor = BandedCholesky::new(&sys).unwrap();
        let mut reference = v.clone();
        for _ in 0..3 {
            v = stepper.step(&v).unwrap();
            for a in 0..stepper.n_blocks() {
                let col = DVector::from_iterator(
                    stepper.n_free(),
                    reference.column(a).iter().cloned(),
                );
                let mut rhs = mass.matvec_v(&col) * (1.0 / dt);
                if a == 0 {
                    let full = assemble_mass(&g, None, &[]).unwrap();
                    rhs += mass.gather(full.matvec_v(&f_all).as_slice());
                }
                reference.column_mut(a).copy_from(&factor.solve(&rhs));
            }
            assert_abs_diff_eq!((&v - &reference).amax(), 0.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn two_block_system_matches_hand_assembly() {
        let g = build_grids(2, 2).unwrap();
        let model = mild_model(&g, 0.2, 1);
        let gpc = GpcSpace::new(1, 1).unwrap();
        assert_eq!(gpc.n_p(), 1);
        let f_all = DVector::from_element(g.n_nodes(), 1.0);
        let dt = 0.01;
        let stepper = GpcStepper::new(&model, &g, &gpc, &f_all, dt).unwrap();
        let n = stepper.n_free();

        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let v = DMatrix::from_fn(n, 2, |_, _| rng.random::<f64>() - 0.5);
        let next = stepper.step(&v).unwrap();

        let fixed = g.boundary_nodes();
        let mass = assemble_mass(&g, None, &fixed).unwrap();
        let s0 = assemble_stiffness(&model.abar, &g, None, &fixed).unwrap();
        let s1 = assemble_stiffness(&model.modes[0], &g, None, &fixed).unwrap();
        let c = 1.0 / dt;
        let t = 1.0 / 3.0f64.sqrt();
        let mut big = DMatrix::zeros(2 * n, 2 * n);
        let sys_d = s0.to_dense() + mass.to_dense() * c;
        let s1_d = s1.to_dense();
        big.view_mut((0, 0), (n, n)).copy_from(&sys_d);
        big.view_mut((n, n), (n, n)).copy_from(&sys_d);
        big.view_mut((0, n), (n, n)).copy_from(&(&s1_d * t));
        big.view_mut((n, 0), (n, n)).copy_from(&(&s1_d * t));
        let full = assemble_mass(&g, None, &[]).unwrap();
        let fhat = mass.gather(full.matvec_v(&f_all).as_slice());
        let mut rhs = DVector::zeros(2 * n);
        let v0 = DVector::from_iterator(n, v.column(0).iter().cloned());
        let v1 = DVector::from_iterator(n, v.column(1).iter().cloned());
        rhs.rows_mut(0, n).copy_from(&(mass.matvec_v(&v0) * c + &fhat));
        rhs.rows_mut(n, n).copy_from(&(mass.matvec_v(&v1) * c));
        let sol = big.lu().solve(&rhs).unwrap();
        for i in 0..n {
            assert_abs_diff_eq!(next[(i, 0)], sol[i], epsilon = 1e-10);
            assert_abs_diff_eq!(next[(i, 1)], sol[n + i], epsilon = 1e-10);
        }
    }

    #[test]
    fn iterative_path_matches_direct() {
        let g = build_grids(2, 4).unwrap();
        let model = mild_model(&g, 0.3, 2);
        let gpc = GpcSpace::new(2, 2).unwrap();
        let f_all = DVector::from_element(g.n_nodes(), 1.0);
        let dt = 0.02;
        let direct =
            GpcStepper::with_solver(&model, &g, &gpc, &f_all, dt, Some(false)).unwrap();
        let pcg = GpcStepper::with_solver(&model, &g, &gpc, &f_all, dt, Some(true)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let mut vd = DMatrix::from_fn(direct.n_free(), direct.n_blocks(), |_, _| {
            rng.random::<f64>() - 0.5
        });
        let mut vp = vd.clone();
        for _ in 0..3 {
            vd = direct.step(&vd).unwrap();
            vp = pcg.step(&vp).unwrap();
        }
        assert_abs_diff_eq!((&vd - &vp).amax(), 0.0, epsilon = 1e-8 * vd.amax().max(1.0));
    }

    #[test]
    fn swap_symmetric_problem_stays_symmetric() {
        let g = build_grids(3, 3).unwrap();
        let abar = CellField::from_fn(&g, |x, y| 1.0 + 0.5 * (x * y));
        let fluct = CellField::from_fn(&g, |x, y| 0.2 * (1.0 + (3.0 * (x + y)).sin()) / 2.0);
        let model = CoefficientModel::new(abar, vec![fluct]).unwrap();
        let gpc = GpcSpace::new(1, 2).unwrap();
        let f_all = DVector::from_element(g.n_nodes(), 1.0);
        let stepper = GpcStepper::new(&model, &g, &gpc, &f_all, 0.05).unwrap();

        let u0 = cosine_bump(&g, 2.0, 1.0);
        let m1 = cosine_bump(&g, 1.0, 2.0);
        let mut v = initial_block(&g, &gpc, &u0, &[m1]).unwrap();
        for _ in 0..3 {
            v = stepper.step(&v).unwrap();
        }
        // Map each free node to its swap image.
        let nf = g.n_fine();
        let dofs = stepper.mass().dofs().to_vec();
        let mut node_to_free = vec![usize::MAX; g.n_nodes()];
        for (d, &nd) in dofs.iter().enumerate() {
            node_to_free[nd] = d;
        }
        for (d, &nd) in dofs.iter().enumerate() {
            let (ix, iy) = (nd % (nf + 1), nd / (nf + 1));
            let swapped = ix * (nf + 1) + iy;
            let sd = node_to_free[swapped];
            for a in 0..stepper.n_blocks() {
                assert_abs_diff_eq!(v[(d, a)], v[(sd, a)], epsilon = 1e-10 * v.amax());
            }
        }
    }

    #[test]
    fn kl_recovers_rank_one_block() {
        let g = build_grids(2, 3).unwrap();
        let mass = assemble_mass(&g, None, &g.boundary_nodes()).unwrap();
        let n = mass.n();
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let field = DVector::from_fn(n, |_, _| rng.random::<f64>() - 0.5);
        let y = DVector::from_vec(vec![0.6, -0.8, 0.0]);
        let mut block = DMatrix::zeros(n, 4);
        for j in 0..3 {
            block.column_mut(j + 1).copy_from(&(&field * y[j]));
        }
        let kl = kl_extract(&block, &mass, 2).unwrap();
        assert_eq!(kl.zeroed, 1);
        assert!(kl.lambda[0] > 0.0 && kl.lambda[1] == 0.0);
        // The mode recovers the field scaled by ‖y‖ up to sign; coefficients
        // recover y/‖y‖.
        let scale = kl.modes.column(0).amax() / field.amax();
        let s = if kl.coeffs[(0, 0)] * y[0] >= 0.0 { 1.0 } else { -1.0 };
        for i in 0..3 {
            assert_abs_diff_eq!(kl.coeffs[(i, 0)] * s, y[i], epsilon = 1e-12);
        }
        assert_abs_diff_eq!(scale, 1.0, epsilon = 1e-10);
        // Energy identity over the full rank.
        let klf = kl_extract(&block, &mass, 3).unwrap();
        let mut energy = 0.0;
        let mut y1 = vec![0.0; n];
        for j in 0..3 {
            let col: Vec<f64> = block.column(j + 1).iter().cloned().collect();
            mass.matvec(&col, &mut y1);
            energy += col.iter().zip(&y1).map(|(a, b)| a * b).sum::<f64>();
        }
        assert_abs_diff_eq!(klf.lambda.sum(), energy, epsilon = 1e-10 * energy.abs());
    }

    #[test]
    fn kl_reconstruction_is_identity_on_low_rank() {
        let g = build_grids(2, 3).unwrap();
        let mass = assemble_mass(&g, None, &g.boundary_nodes()).unwrap();
        let n = mass.n();
        let np = 5;
        let m = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(39);
        let modes = DMatrix::from_fn(n, m, |_, _| rng.random::<f64>() - 0.5);
        let raw = DMatrix::from_fn(np, m, |_, _| rng.random::<f64>() - 0.5);
        // Orthonormalize the stochastic columns.
        let qr = raw.qr();
        let coeffs = qr.q();
        let mut block = DMatrix::zeros(n, np + 1);
        block.columns_mut(1, np).copy_from(&(&modes * coeffs.transpose()));
        let kl = kl_extract(&block, &mass, m).unwrap();
        assert_eq!(kl.zeroed, 0);
        let recon = &kl.modes * kl.coeffs.transpose();
        let orig = block.columns(1, np).into_owned();
        assert_abs_diff_eq!((&recon - &orig).amax(), 0.0, epsilon = 1e-10 * orig.amax());
        assert!(kl.lambda[0] >= kl.lambda[1]);
        // Orthonormal stochastic columns.
        let gram = kl.coeffs.transpose() * &kl.coeffs;
        assert_abs_diff_eq!((gram - DMatrix::identity(m, m)).amax(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn kl_lambda_matches_init_state() {
        let g = build_grids(3, 3).unwrap();
        let model = mild_model(&g, 0.2, 2);
        let gpc = GpcSpace::new(2, 2).unwrap();
        let f_all = DVector::from_element(g.n_nodes(), 1.0);
        let dt = 0.01;
        let ops = assemble_operators(&SpaceChoice::Fine, &model, &g, &f_all, dt).unwrap();
        let u0 = cosine_bump(&g, 32.0, 1.0);
        let fields = [cosine_bump(&g, 24.0, 1.0), cosine_bump(&g, 8.0, 2.0)];
        let state = init_state(&u0, &fields, &SpaceChoice::Fine, &ops, &g, &gpc, dt).unwrap();
        let li = lambda_matrix(&state.modes, &ops, 1e-12);

        let block = initial_block(&g, &gpc, &u0, &fields).unwrap();
        let mass = assemble_mass(&g, None, &g.boundary_nodes()).unwrap();
        let kl = kl_extract(&block, &mass, 2).unwrap();
        for j in 0..2 {
            assert_abs_diff_eq!(kl.lambda[j], li.diag[j], epsilon = 1e-10 * li.diag[0]);
        }
    }

    #[test]
    fn error_l2_contract() {
        let g = build_grids(2, 3).unwrap();
        let mass = assemble_mass(&g, None, &g.boundary_nodes()).unwrap();
        let n = mass.n();
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let reference = DVector::from_fn(n, |_, _| rng.random::<f64>() + 0.5);
        assert_eq!(error_l2(&reference, &reference, &mass).unwrap(), 0.0);
        let zero = DVector::zeros(n);
        assert_abs_diff_eq!(error_l2(&reference, &zero, &mass).unwrap(), 1.0, epsilon = 1e-14);
        let scaled = &reference * 1.01;
        assert_abs_diff_eq!(
            error_l2(&reference, &scaled, &mass).unwrap(),
            0.01,
            epsilon = 1e-12
        );
        assert!(error_l2(&zero, &reference, &mass).is_err());
    }

    #[test]
    fn align_modes_fixes_permutation_and_sign() {
        let g = build_grids(2, 3).unwrap();
        let mass = assemble_mass(&g, None, &g.boundary_nodes()).unwrap();
        let n = mass.n();
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let reference = DMatrix::from_fn(n, 3, |_, _| rng.random::<f64>() - 0.5);
        let mut target = DMatrix::zeros(n, 3);
        // Permutation (2, 0, 1) with signs (−, +, −).
        target.column_mut(2).copy_from(&(reference.column(0) * -1.0));
        target.column_mut(0).copy_from(&reference.column(1));
        target.column_mut(1).copy_from(&(reference.column(2) * -1.0));
        let aligned = align_modes(&reference, &target, &mass).unwrap();
        assert_abs_diff_eq!((&aligned - &reference).amax(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn mesh_convergence_is_second_order() {
        let fluct_amp = 0.3;
        let dt = 2e-3;
        let n_steps = 25;
        let run = |n_coarse: usize, nfpc: usize| -> (crate::grid::GridPair, DVector<f64>) {
            let g = build_grids(n_coarse, nfpc).unwrap();
            let abar = CellField::from_fn(&g, |x, y| 1.5 + (2.0 * x).sin() * (1.5 * y).cos());
            let fl = CellField::from_fn(&g, |x, y| {
                fluct_amp * (1.0 + (x + 2.0 * y).sin()) / 2.0
            });
            let model = CoefficientModel::new(abar, vec![fl]).unwrap();
            let gpc = GpcSpace::new(1, 1).unwrap();
            let f_all = DVector::from_element(g.n_nodes(), 1.0);
            let u0 = cosine_bump(&g, 2.0, 1.0);
            let m1 = cosine_bump(&g, 1.0, 1.0);
            let levels =
                gpc_galerkin_solve(&model, &g, &gpc, &u0, &[m1], &f_all, dt, n_steps).unwrap();
            let last = levels.last().unwrap();
            (g, DVector::from_iterator(last.nrows(), last.column(0).iter().cloned()))
        };
        let (g_ref, u_ref) = run(8, 8); // 64×64
        let nodal_ref = {
            // Spread back to all nodes for restriction.
            let mass = assemble_mass(&g_ref, None, &g_ref.boundary_nodes()).unwrap();
            let mut all = vec![0.0; g_ref.n_nodes()];
            for (d, &nd) in mass.dofs().iter().enumerate() {
                all[nd] = u_ref[d];
            }
            all
        };
        let mut errs = Vec::new();
        for (nc, nfpc) in [(2usize, 4usize), (4, 4), (8, 4)] {
            let (g, u) = run(nc, nfpc);
            let n = g.n_fine();
            let ratio = g_ref.n_fine() / n;
            let mass = assemble_mass(&g, None, &g.boundary_nodes()).unwrap();
            let mut restricted = DVector::zeros(mass.n());
            for (d, &nd) in mass.dofs().iter().enumerate() {
                let (ix, iy) = (nd % (n + 1), nd / (n + 1));
                let fine_node = (iy * ratio) * (g_ref.n_fine() + 1) + ix * ratio;
                restricted[d] = nodal_ref[fine_node];
            }
            errs.push(error_l2(&restricted, &u, &mass).unwrap());
        }
        let r1 = errs[0] / errs[1];
        let r2 = errs[1] / errs[2];
        assert!(
            (2.7..6.0).contains(&r1) && (2.7..6.0).contains(&r2),
            "convergence ratios {r1} {r2} from errors {errs:?}"
        );
    }

    #[test]
    fn single_step_gap_to_dybo_shrinks_quadratically() {
        let g = build_grids(2, 2).unwrap();
        let model = mild_model(&g, 0.3, 1);
        let gpc = GpcSpace::new(1, 1).unwrap();
        let f_all = DVector::from_element(g.n_nodes(), 1.0);
        let u0 = cosine_bump(&g, 2.0, 1.0);
        let m1 = cosine_bump(&g, 1.0, 1.0);
        let gap = |dt: f64| -> f64 {
            let ops = assemble_operators(&SpaceChoice::Fine, &model, &g, &f_all, dt).unwrap();
            let mut state =
                init_state(&u0, &[m1.clone()], &SpaceChoice::Fine, &ops, &g, &gpc, dt).unwrap();
            step(&mut state, &ops, &gpc, &StepConfig::default()).unwrap();
            let levels =
                gpc_galerkin_solve(&model, &g, &gpc, &u0, &[m1.clone()], &f_all, dt, 1).unwrap();
            let oracle = &levels[1];
            let mass = assemble_mass(&g, None, &g.boundary_nodes()).unwrap();
            // Full rank (m = N_p = 1): compare mean and the reconstructed
            // fluctuation column.
            let mean_oracle = DVector::from_iterator(oracle.nrows(), oracle.column(0).iter().cloned());
            let fluct_oracle =
                DVector::from_iterator(oracle.nrows(), oracle.column(1).iter().cloned());
            let fluct_dybo = &state.modes * state.a.transpose();
            let fluct_dybo = DVector::from_iterator(oracle.nrows(), fluct_dybo.column(0).iter().cloned());
            let e_mean = error_l2(&mean_oracle, &state.u0, &mass).unwrap();
            let e_fluct = error_l2(&fluct_oracle, &fluct_dybo, &mass).unwrap();
            e_mean.max(e_fluct)
        };
        let g1 = gap(4e-3);
        let g2 = gap(2e-3);
        assert!(g1 > 0.0 && g2 > 0.0);
        let ratio = g1 / g2;
        assert!((2.8..5.5).contains(&ratio), "gap ratio {ratio} (g1 {g1:e}, g2 {g2:e})");
    }
}
