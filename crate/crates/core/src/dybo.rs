//! The dynamically bi-orthogonal core: operator assembly on a chosen space,
//! the C/D coupling system, the rotation source for the stochastic
//! coefficients, the implicit-Euler step, and the freeze/recast safeguards.
//!
//! The solution ansatz is `u ≈ ū + Û Aᵀ Hᵀ` with `H` the row of orthonormal
//! chaos basis functions. `Û` carries M-orthogonal spatial modes with
//! `Λ = diag(ÛᵀMÛ)`; `A` carries orthonormal stochastic coefficients. One
//! step advances the mean and the modes implicitly and rotates `A`
//! explicitly; both rotations derive from the same source term so the
//! orthonormality drift cancels to first order in the step size.

use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, numerical, Result};
use crate::fem::{assemble_mass, assemble_stiffness, BandedCholesky, SparseOperator};
use crate::gpc::GpcSpace;
use crate::grid::GridPair;
use crate::media::CoefficientModel;
use crate::msbasis::OfflineSpace;
use crate::online::{enrich, CoarseSolver, EnrichOutcome, OnlineContext};

/// State of one run: coefficients of the mean and the spatial modes in the
/// active space, and the stochastic coefficient matrix.
#[derive(Debug, Clone)]
pub struct DyboState {
    /// Mean coefficients, length `N`.
    pub u0: DVector<f64>,
    /// Mode coefficients, `N × m`.
    pub modes: DMatrix<f64>,
    /// Stochastic coefficients, `N_p × m`, columns orthonormal.
    pub a: DMatrix<f64>,
    /// Completed steps.
    pub n: usize,
    pub dt: f64,
}

impl DyboState {
    pub fn t(&self) -> f64 {
        self.n as f64 * self.dt
    }

    pub fn m(&self) -> usize {
        self.modes.ncols()
    }

    /// Max-norm departure of `AᵀA` from the identity.
    pub fn a_drift(&self) -> f64 {
        let g = self.a.transpose() * &self.a;
        let mut worst: f64 = 0.0;
        for i in 0..g.nrows() {
            for j in 0..g.ncols() {
                let want = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((g[(i, j)] - want).abs());
            }
        }
        worst
    }
}

/// Which space the operators live on.
pub enum SpaceChoice<'a> {
    /// The fine grid itself; the identity prolongation.
    Fine,
    /// A multiscale coarse space.
    Coarse(&'a OfflineSpace),
}

enum Backend {
    Dense {
        mass: DMatrix<f64>,
        s0: DMatrix<f64>,
        s: Vec<DMatrix<f64>>,
        fhat: DVector<f64>,
        sys: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    },
    Sparse {
        mass: SparseOperator,
        s0: SparseOperator,
        s: Vec<SparseOperator>,
        fhat: DVector<f64>,
        sys: SparseOperator,
        factor: BandedCholesky,
    },
}

/// Galerkin projections of the mass, mean-stiffness, and fluctuation
/// stiffness matrices plus the source, with a cached factor of the step
/// system `S₀ + cM`, `c = 1/Δt`.
pub struct AssembledOperators {
    backend: Backend,
    c: f64,
    n: usize,
    r: usize,
}

impl AssembledOperators {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn r(&self) -> usize {
        self.r
    }

    /// `1/Δt`.
    pub fn c(&self) -> f64 {
        self.c
    }

    pub fn fhat(&self) -> &DVector<f64> {
        match &self.backend {
            Backend::Dense { fhat, .. } => fhat,
            Backend::Sparse { fhat, .. } => fhat,
        }
    }

    fn apply(&self, which: Which, x: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.backend {
            Backend::Dense { mass, s0, s, .. } => match which {
                Which::Mass => mass * x,
                Which::S0 => s0 * x,
                Which::S(i) => &s[i] * x,
            },
            Backend::Sparse { mass, s0, s, .. } => {
                let op = match which {
                    Which::Mass => mass,
                    Which::S0 => s0,
                    Which::S(i) => &s[i],
                };
                let mut out = DMatrix::zeros(x.nrows(), x.ncols());
                for j in 0..x.ncols() {
                    let xi: Vec<f64> = x.column(j).iter().cloned().collect();
                    let mut yi = vec![0.0; x.nrows()];
                    op.matvec(&xi, &mut yi);
                    out.column_mut(j).copy_from_slice(&yi);
                }
                out
            }
        }
    }

    pub fn apply_mass(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.apply(Which::Mass, x)
    }

    pub fn apply_s0(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.apply(Which::S0, x)
    }

    pub fn apply_s(&self, i: usize, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.apply(Which::S(i), x)
    }

    pub fn apply_mass_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        let m = self.apply(Which::Mass, &DMatrix::from_column_slice(x.len(), 1, x.as_slice()));
        DVector::from_column_slice(m.column(0).as_slice())
    }

    pub fn apply_s_vec(&self, i: usize, x: &DVector<f64>) -> DVector<f64> {
        let m = self.apply(Which::S(i), &DMatrix::from_column_slice(x.len(), 1, x.as_slice()));
        DVector::from_column_slice(m.column(0).as_slice())
    }

    /// `Xᵀ M X`, symmetrized.
    pub fn mass_gram(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let g = x.transpose() * self.apply_mass(x);
        (&g + g.transpose()) * 0.5
    }

    /// Solves `(S₀ + cM) X = B` columnwise.
    pub fn solve_sys(&self, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        match &self.backend {
            Backend::Dense { sys, .. } => Ok(sys.solve(b)),
            Backend::Sparse { factor, .. } => {
                let mut out = DMatrix::zeros(b.nrows(), b.ncols());
                for j in 0..b.ncols() {
                    let col = DVector::from_column_slice(b.column(j).as_slice());
                    out.column_mut(j).copy_from(&factor.solve(&col));
                }
                Ok(out)
            }
        }
    }

    /// Solves `M X = B` columnwise; factors on demand (projection setup).
    pub fn solve_mass(&self, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        match &self.backend {
            Backend::Dense { mass, .. } => {
                let chol = nalgebra::Cholesky::new(mass.clone())
                    .ok_or_else(|| numerical("solve_mass", "mass matrix not positive definite"))?;
                Ok(chol.solve(b))
            }
            Backend::Sparse { mass, .. } => {
                let factor = BandedCholesky::new(mass)?;
                let mut out = DMatrix::zeros(b.nrows(), b.ncols());
                for j in 0..b.ncols() {
                    let col = DVector::from_column_slice(b.column(j).as_slice());
                    out.column_mut(j).copy_from(&factor.solve(&col));
                }
                Ok(out)
            }
        }
    }

    /// The fine-grid pieces when assembled on the fine space: the step
    /// operator `S₀ + cM`, its factor, and the mass.
    pub fn fine_parts(&self) -> Option<(&SparseOperator, &BandedCholesky, &SparseOperator)> {
        match &self.backend {
            Backend::Sparse { sys, factor, mass, .. } => Some((sys, factor, mass)),
            Backend::Dense { .. } => None,
        }
    }

    pub fn dense_parts(&self) -> Option<(&DMatrix<f64>, &DMatrix<f64>, &[DMatrix<f64>])> {
        match &self.backend {
            Backend::Dense { mass, s0, s, .. } => Some((mass, s0, s)),
            Backend::Sparse { .. } => None,
        }
    }
}

#[derive(Clone, Copy)]
enum Which {
    Mass,
    S0,
    S(usize),
}

/// Assembles mass, stiffness, and source projections on the chosen space
/// for the time-step size `dt`. `f_all` holds nodal source values over all
/// fine nodes; its dual enters through the unconstrained mass.
pub fn assemble_operators(
    space: &SpaceChoice,
    model: &CoefficientModel,
    g: &GridPair,
    f_all: &DVector<f64>,
    dt: f64,
) -> Result<AssembledOperators> {
    if model.abar.n != g.n_fine() {
        return Err(invalid("assemble_operators", "model does not match grid"));
    }
    if f_all.len() != g.n_nodes() {
        return Err(invalid("assemble_operators", "source does not match grid nodes"));
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(invalid("assemble_operators", "step size must be positive"));
    }
    let c = 1.0 / dt;
    let fixed = g.boundary_nodes();
    let mass_f = assemble_mass(g, None, &fixed)?;
    let s0_f = assemble_stiffness(&model.abar, g, None, &fixed)?;
    let s_f: Vec<SparseOperator> = model
        .modes
        .iter()
        .map(|ai| assemble_stiffness(ai, g, None, &fixed))
        .collect::<Result<_>>()?;
    let full_mass = assemble_mass(g, None, &[])?;
    let b_all = full_mass.matvec_v(f_all);
    let fhat_f = mass_f.gather(b_all.as_slice());

    let r = model.r();
    match space {
        SpaceChoice::Fine => {
            let mut sys = s0_f.clone();
            sys.axpy_same_pattern(c, &mass_f)?;
            let factor = BandedCholesky::new(&sys)?;
            let n = mass_f.n();
            Ok(AssembledOperators {
                backend: Backend::Sparse { mass: mass_f, s0: s0_f, s: s_f, fhat: fhat_f, sys, factor },
                c,
                n,
                r,
            })
        }
        SpaceChoice::Coarse(sp) => {
            if sp.free_nodes.as_slice() != mass_f.dofs() {
                return Err(invalid("assemble_operators", "space does not match the grid's free dofs"));
            }
            let mass = sp.gram(&mass_f);
            let s0 = sp.gram(&s0_f);
            let s: Vec<DMatrix<f64>> = s_f.iter().map(|op| sp.gram(op)).collect();
            let fhat = sp.restrict(fhat_f.as_slice());
            let sys_mat = &s0 + &mass * c;
            let sys = nalgebra::Cholesky::new(sys_mat)
                .ok_or_else(|| numerical("assemble_operators", "coarse step system not positive definite"))?;
            let n = mass.nrows();
            Ok(AssembledOperators { backend: Backend::Dense { mass, s0, s, fhat, sys }, c, n, r })
        }
    }
}

/// The KL spectrum and bi-orthogonality diagnostics of a mode matrix.
#[derive(Debug, Clone)]
pub struct LambdaInfo {
    /// `Λᵢ = ûᵢᵀMûᵢ`.
    pub diag: DVector<f64>,
    /// Largest relative off-diagonal of `ÛᵀMÛ`.
    pub drift: f64,
    /// Modes whose `Λᵢ` sits below the floor `eps_lambda · max Λ`.
    pub degenerate: Vec<usize>,
}

fn lambda_from_gram(gram: &DMatrix<f64>, eps_lambda: f64) -> LambdaInfo {
    let m = gram.nrows();
    let diag = DVector::from_iterator(m, (0..m).map(|i| gram[(i, i)]));
    let mut drift: f64 = 0.0;
    for i in 0..m {
        for j in 0..i {
            let g = gram[(i, j)];
            if g != 0.0 {
                drift = drift.max(g.abs() / (diag[i].max(0.0) * diag[j].max(0.0)).sqrt());
            }
        }
    }
    let floor = eps_lambda * diag.iter().cloned().fold(0.0f64, f64::max);
    let degenerate = (0..m).filter(|&i| diag[i] <= floor).collect();
    LambdaInfo { diag, drift, degenerate }
}

/// `Λ` of the modes under the operator mass, with drift and degeneracy
/// diagnostics. `eps_lambda` is relative to the largest entry.
pub fn lambda_matrix(modes: &DMatrix<f64>, ops: &AssembledOperators, eps_lambda: f64) -> LambdaInfo {
    lambda_from_gram(&ops.mass_gram(modes), eps_lambda)
}

/// Operator applications shared by the rotation terms and the step.
struct StepParts {
    mu: DMatrix<f64>,        // M Û
    s0u: DMatrix<f64>,       // S₀ Û
    siu: Vec<DMatrix<f64>>,  // Sᵢ Û
    siu0: Vec<DVector<f64>>, // Sᵢ û₀
    gram: DMatrix<f64>,      // Ûᵀ M Û
}

fn apply_parts(u0: &DVector<f64>, modes: &DMatrix<f64>, ops: &AssembledOperators) -> StepParts {
    let mu = ops.apply_mass(modes);
    let s0u = ops.apply_s0(modes);
    let siu: Vec<DMatrix<f64>> = (0..ops.r()).map(|i| ops.apply_s(i, modes)).collect();
    let siu0: Vec<DVector<f64>> = (0..ops.r()).map(|i| ops.apply_s_vec(i, u0)).collect();
    let gram = modes.transpose() * &mu;
    let gram = (&gram + gram.transpose()) * 0.5;
    StepParts { mu, s0u, siu, siu0, gram }
}

/// Rotation source for the stochastic coefficients, `N_p × m`.
fn a_source(
    parts: &StepParts,
    u0: &DVector<f64>,
    modes: &DMatrix<f64>,
    a: &DMatrix<f64>,
    gpc: &GpcSpace,
    lambda: &DVector<f64>,
) -> DMatrix<f64> {
    let m = modes.ncols();
    let np = gpc.n_p();
    let mut g3 = a * (modes.transpose() * &parts.s0u);
    for i in 0..parts.siu.len() {
        let b1 = parts.siu[i].transpose() * u0; // (Sᵢ Û)ᵀ û₀ = Ûᵀ Sᵢ û₀
        g3 += gpc.t0(i) * b1.transpose();
        let b2 = modes.transpose() * &parts.siu[i];
        g3 += gpc.t1(i) * a * b2;
    }
    debug_assert_eq!(g3.nrows(), np);
    for j in 0..m {
        let inv = 1.0 / lambda[j];
        g3.column_mut(j).scale_mut(inv);
    }
    g3
}

/// The rotation target `G*` of the current state. Errors on a degenerate
/// spectrum.
pub fn compute_gstar(
    state: &DyboState,
    ops: &AssembledOperators,
    gpc: &GpcSpace,
    eps_lambda: f64,
) -> Result<DMatrix<f64>> {
    let parts = apply_parts(&state.u0, &state.modes, ops);
    let li = lambda_from_gram(&parts.gram, eps_lambda);
    if !li.degenerate.is_empty() {
        return Err(numerical(
            "compute_gstar",
            format!("degenerate spectrum at modes {:?}", li.degenerate),
        ));
    }
    let g3 = a_source(&parts, &state.u0, &state.modes, &state.a, gpc, &li.diag);
    Ok(-(g3.transpose() * &state.a))
}

/// The coupling matrices of one step.
#[derive(Debug, Clone)]
pub struct CDPair {
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
}

/// Outcome of the C/D solve: a pair, or a freeze signal on near-degenerate
/// spectral separation.
#[derive(Debug, Clone)]
pub enum CdSolution {
    Pair(CDPair),
    Freeze,
}

/// Substitution residuals of the three defining equations, max norm:
/// off-diagonal antisymmetry of `ΛC`, antisymmetry of `D`, and
/// `Dᵀ + C = G*`.
pub fn cd_residuals(gstar: &DMatrix<f64>, lambda: &DVector<f64>, pair: &CDPair) -> [f64; 3] {
    let m = lambda.len();
    let mut r = [0.0f64; 3];
    for i in 0..m {
        for j in 0..m {
            if i != j {
                r[0] = r[0].max((lambda[i] * pair.c[(i, j)] + lambda[j] * pair.c[(j, i)]).abs());
            }
            r[1] = r[1].max((pair.d[(i, j)] + pair.d[(j, i)]).abs());
            r[2] = r[2].max((pair.d[(j, i)] + pair.c[(i, j)] - gstar[(i, j)]).abs());
        }
        r[2] = r[2].max((pair.c[(i, i)] - gstar[(i, i)]).abs());
    }
    r
}

static CD_CALLS: AtomicU64 = AtomicU64::new(0);

/// Solves the coupling system in closed form. The diagonal of `C` copies
/// `G*`; each off-diagonal pair solves a 2×2 system from the antisymmetry
/// constraints. Near-degenerate separation (below `eps_sep · max Λ`,
/// pairwise) returns the freeze signal instead.
pub fn solve_cd(gstar: &DMatrix<f64>, lambda: &DVector<f64>, eps_sep: f64) -> CdSolution {
    let m = lambda.len();
    let max_l = lambda.iter().cloned().fold(0.0f64, f64::max);
    if max_l <= 0.0 {
        return CdSolution::Freeze;
    }
    for i in 0..m {
        for j in 0..i {
            if (lambda[i] - lambda[j]).abs() < eps_sep * max_l {
                return CdSolution::Freeze;
            }
        }
    }
    let mut c = DMatrix::zeros(m, m);
    let mut d = DMatrix::zeros(m, m);
    for i in 0..m {
        c[(i, i)] = gstar[(i, i)];
        for j in 0..i {
            let dij = -(lambda[i] * gstar[(i, j)] + lambda[j] * gstar[(j, i)])
                / (lambda[i] - lambda[j]);
            d[(i, j)] = dij;
            d[(j, i)] = -dij;
            c[(i, j)] = gstar[(i, j)] + dij;
            c[(j, i)] = gstar[(j, i)] - dij;
        }
    }
    let pair = CDPair { c, d };
    let calls = CD_CALLS.fetch_add(1, Ordering::Relaxed);
    if cfg!(debug_assertions) || calls % 100 == 0 {
        let res = cd_residuals(gstar, lambda, &pair);
        // The off-diagonal entries cancel against terms of size λ·(|G*|+|D|),
        // so the attainable residual scales with that product. Overflowed
        // inputs make the scale non-finite; the caller's own finiteness
        // checks handle that case.
        let scale = 1.0 + max_l * (gstar.amax() + pair.d.amax());
        assert!(
            !scale.is_finite() || res.iter().all(|&v| v <= 1e-10 * scale),
            "coupling solve residuals {res:?} exceed tolerance"
        );
    }
    CdSolution::Pair(pair)
}

/// Numerical safeguards of the stepper.
#[derive(Debug, Clone, Copy)]
pub struct StepConfig {
    /// Pairwise spectral separation under which the rotation freezes,
    /// relative to `max Λ`.
    pub eps_sep: f64,
    /// Spectrum floor relative to `max Λ`; modes below it are flagged and
    /// the rotation freezes.
    pub eps_lambda: f64,
}

impl Default for StepConfig {
    fn default() -> Self {
        StepConfig { eps_sep: 1e-6, eps_lambda: 1e-12 }
    }
}

/// Per-step diagnostics.
#[derive(Debug, Clone)]
pub struct StepReport {
    /// The rotation was frozen this step (degenerate or near-degenerate
    /// spectrum); recast afterwards.
    pub freeze: bool,
    pub lambda: DVector<f64>,
    /// Relative off-diagonal of `ÛᵀMÛ` entering the step.
    pub bi_drift: f64,
    /// `‖AᵀA − I‖` max norm after the step.
    pub a_drift: f64,
    /// Seconds spent solving the mean system.
    pub solve_mean_s: f64,
    /// Seconds spent solving the mode systems.
    pub solve_modes_s: f64,
}

struct Prepared {
    rhs_mean: DVector<f64>,
    rhs_modes: DMatrix<f64>,
    a_update: Option<DMatrix<f64>>, // −Δt (A Cᵀ + source); None under freeze
    lambda: DVector<f64>,
    bi_drift: f64,
    freeze: bool,
}

fn prepare_step(
    state: &DyboState,
    ops: &AssembledOperators,
    gpc: &GpcSpace,
    cfg: &StepConfig,
) -> Result<Prepared> {
    let m = state.m();
    let np = gpc.n_p();
    if state.u0.len() != ops.n() || state.modes.nrows() != ops.n() {
        return Err(invalid("step", "state does not match operators"));
    }
    if state.a.nrows() != np || state.a.ncols() != m {
        return Err(invalid("step", "stochastic coefficients do not match the chaos space"));
    }
    if gpc.r != ops.r() {
        return Err(invalid("step", "chaos dimension does not match the coefficient model"));
    }
    let c = ops.c();
    if ((1.0 / state.dt) - c).abs() > 1e-9 * c {
        return Err(invalid("step", "state step size does not match operators"));
    }

    let parts = apply_parts(&state.u0, &state.modes, ops);
    let li = lambda_from_gram(&parts.gram, cfg.eps_lambda);

    let (freeze, d, a_update) = if li.degenerate.is_empty() {
        let g3 = a_source(&parts, &state.u0, &state.modes, &state.a, gpc, &li.diag);
        let gstar = -(g3.transpose() * &state.a);
        if !finite(gstar.iter().cloned()) {
            return Err(numerical(
                "step",
                format!(
                    "non-finite rotation source at n = {}, t = {:.6}, lambda = {:?}",
                    state.n,
                    state.t(),
                    li.diag.as_slice()
                ),
            ));
        }
        match solve_cd(&gstar, &li.diag, cfg.eps_sep) {
            CdSolution::Pair(pair) => {
                let upd = (&state.a * pair.c.transpose() + &g3) * (-state.dt);
                (false, pair.d, Some(upd))
            }
            CdSolution::Freeze => (true, DMatrix::zeros(m, m), None),
        }
    } else {
        (true, DMatrix::zeros(m, m), None)
    };

    let mut rhs_mean = ops.apply_mass_vec(&state.u0) * c + ops.fhat();
    for i in 0..ops.r() {
        let w = state.a.transpose() * gpc.t0(i); // m-vector
        rhs_mean -= &parts.siu[i] * w;
    }

    let mut rhs_modes = &parts.mu * c;
    if !freeze {
        rhs_modes -= &parts.mu * d.transpose();
    }
    for i in 0..ops.r() {
        let row = gpc.t0(i).transpose() * &state.a; // 1 × m
        rhs_modes -= &parts.siu0[i] * row;
        let t1a = state.a.transpose() * (gpc.t1(i) * &state.a); // m × m
        rhs_modes -= &parts.siu[i] * t1a;
    }

    Ok(Prepared { rhs_mean, rhs_modes, a_update, lambda: li.diag, bi_drift: li.drift, freeze })
}

fn finite(x: impl Iterator<Item = f64>) -> bool {
    for v in x {
        if !v.is_finite() {
            return false;
        }
    }
    true
}

fn commit_step(
    state: &mut DyboState,
    new_u0: DVector<f64>,
    new_modes: DMatrix<f64>,
    prep: &Prepared,
) -> Result<StepReport> {
    let a_new = match &prep.a_update {
        Some(upd) => &state.a + upd,
        None => state.a.clone(),
    };
    if !finite(new_u0.iter().cloned())
        || !finite(new_modes.iter().cloned())
        || !finite(a_new.iter().cloned())
    {
        return Err(numerical(
            "step",
            format!(
                "non-finite state at n = {}, t = {:.6}: |u0| = {:e}, lambda = {:?}",
                state.n + 1,
                state.t() + state.dt,
                state.u0.amax(),
                prep.lambda.as_slice()
            ),
        ));
    }
    state.u0 = new_u0;
    state.modes = new_modes;
    state.a = a_new;
    state.n += 1;
    Ok(StepReport {
        freeze: prep.freeze,
        lambda: prep.lambda.clone(),
        bi_drift: prep.bi_drift,
        a_drift: state.a_drift(),
        solve_mean_s: 0.0,
        solve_modes_s: 0.0,
    })
}

/// Advances the state by one implicit-Euler step on the operator space.
/// Under a freeze signal the stochastic coefficients stay fixed and the
/// mode rotation is dropped for the step; schedule a recast afterwards.
pub fn step(
    state: &mut DyboState,
    ops: &AssembledOperators,
    gpc: &GpcSpace,
    cfg: &StepConfig,
) -> Result<StepReport> {
    let prep = prepare_step(state, ops, gpc, cfg)?;
    let clock = std::time::Instant::now();
    let new_u0 = ops.solve_sys(&DMatrix::from_column_slice(ops.n(), 1, prep.rhs_mean.as_slice()))?;
    let new_u0 = DVector::from_column_slice(new_u0.column(0).as_slice());
    let mean_s = clock.elapsed().as_secs_f64();
    let clock = std::time::Instant::now();
    let new_modes = ops.solve_sys(&prep.rhs_modes)?;
    let modes_s = clock.elapsed().as_secs_f64();
    let mut report = commit_step(state, new_u0, new_modes, &prep)?;
    report.solve_mean_s = mean_s;
    report.solve_modes_s = modes_s;
    Ok(report)
}

/// Adaptive-enrichment controls for [`step_adaptive`].
#[derive(Debug, Clone, Copy)]
pub struct AdaptiveConfig {
    /// Relative residual reduction target per step.
    pub theta: f64,
    /// Absolute residual-sum floor; `0` disables it.
    pub tol_abs: f64,
    pub max_rounds: usize,
    /// Drop online columns at the start of every step.
    pub reset_each_step: bool,
    /// Solve the fine systems alongside for energy-error diagnostics.
    pub fine_check: bool,
}

impl Default for AdaptiveConfig {
    fn default() -> Self {
        AdaptiveConfig {
            theta: 0.05,
            tol_abs: 0.0,
            max_rounds: 5,
            reset_each_step: true,
            fine_check: false,
        }
    }
}

/// Diagnostics of one adaptive step.
#[derive(Debug, Clone)]
pub struct AdaptiveReport {
    pub freeze: bool,
    pub lambda: DVector<f64>,
    pub bi_drift: f64,
    pub a_drift: f64,
    /// Enrichment history; `x0` holds the pre-enrichment coarse solutions
    /// ordered mean first, then the modes.
    pub outcome: EnrichOutcome,
}

/// One step of the coarse method with online enrichment. The state carries
/// fine free-dof fields; `ops` must be assembled on the fine space. Each
/// step solves the coarse Galerkin systems on `space` (optionally reset and
/// enriched) and prolongs the solutions back to fine fields.
#[allow(clippy::too_many_arguments)]
pub fn step_adaptive(
    state: &mut DyboState,
    ops: &AssembledOperators,
    gpc: &GpcSpace,
    cfg: &StepConfig,
    space: &mut OfflineSpace,
    solver: &mut CoarseSolver,
    ctx: &OnlineContext,
    acfg: &AdaptiveConfig,
) -> Result<AdaptiveReport> {
    let (sys, factor, _) = ops
        .fine_parts()
        .ok_or_else(|| invalid("step_adaptive", "operators must be assembled on the fine space"))?;
    let prep = prepare_step(state, ops, gpc, cfg)?;

    if acfg.reset_each_step {
        space.reset_online();
        solver.truncate(space.n_offline());
    }

    let m = state.m();
    let mut rhs: Vec<DVector<f64>> = Vec::with_capacity(m + 1);
    rhs.push(prep.rhs_mean.clone());
    for j in 0..m {
        rhs.push(DVector::from_column_slice(prep.rhs_modes.column(j).as_slice()));
    }
    let fine_ref: Option<Vec<DVector<f64>>> =
        if acfg.fine_check { Some(rhs.iter().map(|b| factor.solve(b)).collect()) } else { None };

    let (x, outcome) = enrich(
        space,
        solver,
        ctx,
        sys,
        &rhs,
        acfg.theta,
        acfg.tol_abs,
        acfg.max_rounds,
        fine_ref.as_deref(),
    )?;

    let new_u0 = space.prolong(&x[0]);
    let mut new_modes = DMatrix::zeros(ops.n(), m);
    for j in 0..m {
        new_modes.column_mut(j).copy_from(&space.prolong(&x[j + 1]));
    }
    let mut report = commit_step(state, new_u0, new_modes, &prep)?;
    report.freeze = prep.freeze;
    Ok(AdaptiveReport {
        freeze: report.freeze,
        lambda: report.lambda,
        bi_drift: report.bi_drift,
        a_drift: report.a_drift,
        outcome,
    })
}

/// Outcome of a recast.
#[derive(Debug, Clone, Default)]
pub struct RecastReport {
    /// Modes zeroed because their singular value collapsed.
    pub collapsed: usize,
    /// Stochastic columns replaced during orthonormalization because they
    /// were linearly dependent.
    pub replaced: usize,
}

fn orthonormalize_columns(a: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>, usize) {
    let (np, m) = (a.nrows(), a.ncols());
    let mut q = DMatrix::zeros(np, m);
    let mut rmat = DMatrix::zeros(m, m);
    let mut replaced = 0;
    for j in 0..m {
        let mut v = DVector::from_column_slice(a.column(j).as_slice());
        for _ in 0..2 {
            for i in 0..j {
                let qi = q.column(i);
                let coef = qi.dot(&v);
                rmat[(i, j)] += coef;
                v -= DVector::from_column_slice(qi.as_slice()) * coef;
            }
        }
        let norm = v.norm();
        if norm <= 1e-12 * a.column(j).norm().max(1.0) {
            // Dependent column: orthonormalize a canonical vector instead;
            // it contributes nothing to the product.
            for i in 0..j {
                rmat[(i, j)] = 0.0;
            }
            rmat[(j, j)] = 0.0;
            let mut found = false;
            for k in 0..np {
                let mut w = DVector::zeros(np);
                w[k] = 1.0;
                for _ in 0..2 {
                    for i in 0..j {
                        let qi = q.column(i);
                        let coef = qi.dot(&w);
                        w -= DVector::from_column_slice(qi.as_slice()) * coef;
                    }
                }
                if w.norm() > 0.5 {
                    q.column_mut(j).copy_from(&(w.clone() / w.norm()));
                    found = true;
                    break;
                }
            }
            debug_assert!(found, "no canonical completion found");
            replaced += 1;
        } else {
            rmat[(j, j)] = norm;
            q.column_mut(j).copy_from(&(v / norm));
        }
    }
    (q, rmat, replaced)
}

/// Re-factorizes the perturbation `Û Aᵀ` into bi-orthogonal form: `A`
/// becomes orthonormal, `Û` becomes M-orthogonal with non-increasing norms,
/// and the product is preserved to rounding. Collapsed singular values are
/// zero-padded and reported.
pub fn recast(state: &mut DyboState, ops: &AssembledOperators, eps_lambda: f64) -> Result<RecastReport> {
    let m = state.m();
    if state.modes.nrows() != ops.n() {
        return Err(invalid("recast", "state does not match operators"));
    }
    if m == 0 {
        return Ok(RecastReport::default());
    }
    let (q, rmat, replaced) = orthonormalize_columns(&state.a);
    let v = &state.modes * rmat.transpose();
    let gram = ops.mass_gram(&v);
    let eig = gram.symmetric_eigen();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let mut w = DMatrix::zeros(m, m);
    let mut sigma2 = DVector::zeros(m);
    for (col, &src) in order.iter().enumerate() {
        w.column_mut(col).copy_from(&eig.eigenvectors.column(src));
        sigma2[col] = eig.eigenvalues[src];
    }

    let mut new_modes = v * &w;
    let mut new_a = q * &w;
    // Deterministic sign: the largest stochastic entry of each column is
    // positive.
    for j in 0..m {
        let col = new_a.column(j);
        let mut imax = 0;
        for (i, val) in col.iter().enumerate() {
            if val.abs() > col[imax].abs() {
                imax = i;
            }
        }
        if new_a[(imax, j)] < 0.0 {
            new_a.column_mut(j).neg_mut();
            new_modes.column_mut(j).neg_mut();
        }
    }
    let max_sigma = sigma2.iter().cloned().fold(0.0f64, f64::max);
    let mut collapsed = 0;
    for j in 0..m {
        if sigma2[j] <= eps_lambda * max_sigma {
            new_modes.column_mut(j).fill(0.0);
            collapsed += 1;
        }
    }
    state.modes = new_modes;
    state.a = new_a;
    Ok(RecastReport { collapsed, replaced })
}

/// Builds the initial state: M-weighted projections of the given fine nodal
/// fields (mean, then one per mode) onto the chosen space, canonical unit
/// stochastic columns, and one recast to establish bi-orthogonality.
pub fn init_state(
    u0_all: &DVector<f64>,
    mode_fields: &[DVector<f64>],
    space: &SpaceChoice,
    ops: &AssembledOperators,
    g: &GridPair,
    gpc: &GpcSpace,
    dt: f64,
) -> Result<DyboState> {
    let m = mode_fields.len();
    if m == 0 || m > gpc.n_p() {
        return Err(invalid(
            "init_state",
            format!("mode count {m} outside 1..={}", gpc.n_p()),
        ));
    }
    let nn = g.n_nodes();
    if u0_all.len() != nn || mode_fields.iter().any(|f| f.len() != nn) {
        return Err(invalid("init_state", "fields do not match the grid nodes"));
    }
    let full_mass = assemble_mass(g, None, &[])?;
    let fixed_mass = assemble_mass(g, None, &g.boundary_nodes())?;
    let project_rhs = |f_all: &DVector<f64>| -> DVector<f64> {
        let b_all = full_mass.matvec_v(f_all);
        let b_free = fixed_mass.gather(b_all.as_slice());
        match space {
            SpaceChoice::Fine => b_free,
            SpaceChoice::Coarse(sp) => sp.restrict(b_free.as_slice()),
        }
    };
    let mut rhs = DMatrix::zeros(ops.n(), m + 1);
    rhs.column_mut(0).copy_from(&project_rhs(u0_all));
    for (j, f) in mode_fields.iter().enumerate() {
        rhs.column_mut(j + 1).copy_from(&project_rhs(f));
    }
    let sol = ops.solve_mass(&rhs)?;
    let u0 = DVector::from_column_slice(sol.column(0).as_slice());
    let modes = sol.columns(1, m).into_owned();
    let mut a = DMatrix::zeros(gpc.n_p(), m);
    for j in 0..m {
        a[(j, j)] = 1.0;
    }
    let mut state = DyboState { u0, modes, a, n: 0, dt };
    recast(&mut state, ops, 1e-12)?;
    Ok(state)
}
