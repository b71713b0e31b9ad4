//! Acceptance gate: every stated requirement checked end to end, one
//! pass/fail line per criterion.
//!
//! Run with `cargo test --test acceptance -- --nocapture` to see the lines.
//! CPU-timed sections share a lock so concurrent test threads cannot
//! distort wall-clock comparisons.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Mutex;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dybo_cli::{config, driver, formats};
use dybo_core::dybo::{
    assemble_operators, cd_residuals, init_state, lambda_matrix, recast, solve_cd, step,
    CdSolution, SpaceChoice, StepConfig,
};
use dybo_core::fem::CellField;
use dybo_core::gpc::{eval_basis, GpcSpace};
use dybo_core::grid::{build_grids, GridPair};
use dybo_core::media::{trig_field, CoefficientModel, TrigVariant};
use dybo_core::msbasis::{build_offline_space, partition_of_unity, snapshots, BasisCounts};
use dybo_core::oracle::{error_l2, gpc_galerkin_solve, variance_field};

static TIMING_LOCK: Mutex<()> = Mutex::new(());

fn timing_lock() -> std::sync::MutexGuard<'static, ()> {
    TIMING_LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(criterion: &str, label: &str, pass: bool, detail: &str) {
    let status = if pass { "PASS" } else { "FAIL" };
    println!("criterion {criterion} ({label}): {status} [{detail}]");
    assert!(pass, "criterion {criterion} ({label}): {status} [{detail}]");
}

/// Nodal field `amp (1 - cos 2πkx)(1 - cos 2πky)` over all grid nodes.
fn cosine_field(g: &GridPair, amp: f64, k: usize) -> DVector<f64> {
    let tau = std::f64::consts::TAU;
    DVector::from_fn(g.n_nodes(), |idx, _| {
        let (x, y) = g.node_pos(idx);
        amp * (1.0 - (tau * k as f64 * x).cos()) * (1.0 - (tau * k as f64 * y).cos())
    })
}

#[test]
fn criterion_1_rotation_solver_on_random_draws() {
    let mut rng = ChaCha8Rng::seed_from_u64(20260822);
    let draws: Vec<(DMatrix<f64>, DVector<f64>)> = (0..1000)
        .map(|trial| {
            let m = 2 + trial % 5;
            let gstar = DMatrix::from_fn(m, m, |_, _| rng.random::<f64>() * 2.0 - 1.0);
            // Descending positive spectrum with adjacent gaps of at
            // least 1e-3.
            let gaps: Vec<f64> = (0..m).map(|_| 1e-3 + rng.random::<f64>()).collect();
            let mut lam = vec![0.0; m];
            let mut acc = 0.1 + rng.random::<f64>();
            for k in (0..m).rev() {
                lam[k] = acc;
                acc += gaps[k];
            }
            (gstar, DVector::from_vec(lam))
        })
        .collect();

    let _lock = timing_lock();
    let clock = Instant::now();
    let mut worst = [0.0f64; 3];
    let mut worst_skew = 0.0f64;
    for (gstar, lam) in &draws {
        let CdSolution::Pair(pair) = solve_cd(gstar, lam, 1e-9) else {
            report("1", "mode rotation solver", false, "freeze on a well-separated draw");
            return;
        };
        let res = cd_residuals(gstar, lam, &pair);
        for k in 0..3 {
            worst[k] = worst[k].max(res[k]);
        }
        let m = pair.d.nrows();
        for i in 0..m {
            for j in 0..m {
                worst_skew = worst_skew.max((pair.d[(i, j)] + pair.d[(j, i)]).abs());
            }
        }
    }
    let elapsed = clock.elapsed().as_secs_f64();
    let pass = worst.iter().all(|&r| r <= 1e-10) && worst_skew <= 1e-14 && elapsed < 1.0;
    report(
        "1",
        "mode rotation solver",
        pass,
        &format!(
            "1000 draws, residuals {:.1e} / {:.1e} / {:.1e}, skew {:.1e}, {:.3}s",
            worst[0], worst[1], worst[2], worst_skew, elapsed
        ),
    );
}

#[test]
fn criterion_2_orthonormality_drift_over_long_run() {
    let g = build_grids(4, 8).unwrap();
    let n = g.n_fine();
    let abar = CellField { n, values: vec![4.0; n * n] };
    let a1 = trig_field(&g, 0.04, 1.6, 1.0 / 8.0, TrigVariant::DiagSin).unwrap();
    let a2 = trig_field(&g, 0.08, 1.5, 1.0 / 7.0, TrigVariant::AxisCos).unwrap();
    let a3 = trig_field(&g, 0.16, 1.4, 1.0 / 6.0, TrigVariant::Shifted).unwrap();
    let model = CoefficientModel::new(abar.clone(), vec![a1, a2, a3]).unwrap();
    let gpc = GpcSpace::new(3, 2).unwrap();
    let space = build_offline_space(&g, &abar, &BasisCounts::Uniform(3)).unwrap();
    let f_all = DVector::from_element(g.n_nodes(), 1.0);
    let dt = 1e-7;
    let ops =
        assemble_operators(&SpaceChoice::Coarse(&space), &model, &g, &f_all, dt).unwrap();
    let u0_all = cosine_field(&g, 32.0, 1);
    let mode_fields =
        vec![cosine_field(&g, 24.0, 1), cosine_field(&g, 16.0, 2), cosine_field(&g, 8.0, 3)];
    let mut state =
        init_state(&u0_all, &mode_fields, &SpaceChoice::Coarse(&space), &ops, &g, &gpc, dt)
            .unwrap();
    let cfg = StepConfig::default();
    let (mut max_a, mut max_bi, mut max_post) = (0.0f64, 0.0f64, 0.0f64);
    let mut froze = 0usize;
    for n_step in 1..=200 {
        let rep = step(&mut state, &ops, &gpc, &cfg).unwrap();
        if rep.freeze {
            froze += 1;
        }
        max_a = max_a.max(state.a_drift());
        max_bi = max_bi.max(lambda_matrix(&state.modes, &ops, cfg.eps_lambda).drift);
        if n_step % 20 == 0 {
            recast(&mut state, &ops, cfg.eps_lambda).unwrap();
            let after = lambda_matrix(&state.modes, &ops, cfg.eps_lambda);
            max_post = max_post.max(state.a_drift()).max(after.drift);
        }
    }
    let pass = max_a < 1e-6 && max_bi < 1e-6 && max_post < 1e-12;
    report(
        "2",
        "orthonormality over 200 steps",
        pass,
        &format!(
            "max AᵀA drift {:.1e}, max ÛᵀMÛ drift {:.1e}, post-recast {:.1e}, {} freezes",
            max_a, max_bi, max_post, froze
        ),
    );
}

#[test]
fn criterion_3_full_rank_matches_coupled_solver() {
    let g = build_grids(2, 2).unwrap();
    let n = g.n_fine();
    // Slow diffusion keeps the fluctuation energy alive over the ten steps,
    // so the relative gap stays in the asymptotic first-order regime.
    let abar = CellField { n, values: vec![0.25; n * n] };
    let fluct = trig_field(&g, 0.05, 1.0, 1.0, TrigVariant::DiagSin).unwrap();
    let model = CoefficientModel::new(abar, vec![fluct]).unwrap();
    let gpc = GpcSpace::new(1, 1).unwrap();
    let f_all = DVector::from_element(g.n_nodes(), 1.0);
    let u0_all = cosine_field(&g, 8.0, 1);
    let mode_fields = vec![cosine_field(&g, 4.0, 1)];
    let gap = |dt: f64, n_steps: usize| -> (f64, f64) {
        let ops = assemble_operators(&SpaceChoice::Fine, &model, &g, &f_all, dt).unwrap();
        let mut state =
            init_state(&u0_all, &mode_fields, &SpaceChoice::Fine, &ops, &g, &gpc, dt).unwrap();
        let cfg = StepConfig::default();
        for _ in 0..n_steps {
            step(&mut state, &ops, &gpc, &cfg).unwrap();
        }
        let levels =
            gpc_galerkin_solve(&model, &g, &gpc, &u0_all, &mode_fields, &f_all, dt, n_steps)
                .unwrap();
        let last = levels.last().unwrap();
        let (_, _, mass) = ops.fine_parts().unwrap();
        let ref_mean = DVector::from_column_slice(last.column(0).as_slice());
        let e_mean = error_l2(&ref_mean, &state.u0, mass).unwrap();
        let recon = &state.modes * state.a.transpose();
        let var_ref = variance_field(&last.columns(1, 1).into_owned());
        let var_dybo = variance_field(&recon);
        let e_var = error_l2(&var_ref, &var_dybo, mass).unwrap();
        (e_mean, e_var)
    };
    let dt = 1e-2;
    let (m1, v1) = gap(dt, 10);
    let (m2, v2) = gap(dt / 2.0, 20);
    let (rm, rv) = (m1 / m2, v1 / v2);
    let in_halving_band = |r: f64| (2.0 / 1.5..=3.0).contains(&r);
    let pass = m1 <= 5.0 * dt
        && v1 <= 5.0 * dt
        && m2 <= 2.5 * dt
        && v2 <= 2.5 * dt
        && in_halving_band(rm)
        && in_halving_band(rv);
    report(
        "3",
        "full-rank equivalence",
        pass,
        &format!(
            "mean gap {:.2e} (ratio {:.2}), variance gap {:.2e} (ratio {:.2}), bound {:.1e}",
            m1,
            rm,
            v1,
            rv,
            5.0 * dt
        ),
    );
}

#[test]
fn criterion_4_and_5_high_contrast_recovery() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    let cfg = config::load(&dir.join("example1.toml")).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let _lock = timing_lock();
    let summary = driver::run(&cfg, &dir, tmp.path()).unwrap();

    let rows = formats::read_error_csv(&tmp.path().join("errors.csv")).unwrap();
    let mut start: BTreeMap<u64, f64> = BTreeMap::new();
    let mut end: BTreeMap<u64, f64> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.function == "ubar") {
        match r.status.as_str() {
            "start" => {
                start.insert(r.t.to_bits(), r.e2);
            }
            "end" => {
                end.insert(r.t.to_bits(), r.e2);
            }
            _ => {}
        }
    }
    let mut min_ratio = f64::INFINITY;
    let mut ratios = Vec::new();
    for (t, s) in &start {
        let r = s / end[t];
        ratios.push(format!("{:.3}:{:.1}({:.2e}/{:.2e})", f64::from_bits(*t), r, s, end[t]));
        min_ratio = min_ratio.min(r);
    }
    let terminal = summary.terminal_mean_e2.unwrap_or(f64::INFINITY);
    let pass4 = !start.is_empty() && min_ratio >= 5.0 && terminal <= 0.02;
    report(
        "4",
        "enrichment error reduction",
        pass4,
        &format!(
            "start/end ratios [{}], terminal mean error {:.2}%",
            ratios.join(", "),
            100.0 * terminal
        ),
    );
    let pass5 = summary.monotonicity_violations == 0 && summary.added_total > 0;
    report(
        "5",
        "energy monotonicity under enrichment",
        pass5,
        &format!(
            "{} violations over {} steps, {} online columns added",
            summary.monotonicity_violations, summary.steps, summary.added_total
        ),
    );
}

#[test]
fn criterion_6_partition_and_spectral_invariants() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    let cfg = config::load(&dir.join("example1.toml")).unwrap();
    let p = driver::build_problem(&cfg, &dir).unwrap();

    let pou = partition_of_unity(&p.g, &p.model.abar).unwrap();
    let nodes = p.g.nodes_per_side();
    let mut worst_pou = 0.0f64;
    for iy in 1..nodes - 1 {
        for ix in 1..nodes - 1 {
            worst_pou = worst_pou.max((pou.total_at(ix, iy) - 1.0).abs());
        }
    }

    let mut worst_snap = 0.0f64;
    for i in 0..p.g.n_interior_coarse() {
        let basis = snapshots(&p.g, &p.model.abar, i).unwrap();
        for row in 0..basis.values.nrows() {
            let s: f64 = basis.values.row(row).iter().sum();
            worst_snap = worst_snap.max((s - 1.0).abs());
        }
    }

    let space = build_offline_space(&p.g, &p.model.abar, &BasisCounts::Uniform(4)).unwrap();
    let mut ascending = true;
    let mut worst_first = 0.0f64;
    for ev in &space.eigenvalues {
        ascending &= ev.windows(2).all(|w| w[0] <= w[1] + 1e-14);
        worst_first = worst_first.max(ev[0].abs());
    }

    let pass = worst_pou <= 1e-10 && worst_snap <= 1e-10 && ascending && worst_first <= 1e-10;
    report(
        "6",
        "partition of unity and local spectra",
        pass,
        &format!(
            "max |Σχ-1| {:.1e}, max |Σψ-1| {:.1e}, max λ₁ {:.1e}, ascending {}",
            worst_pou, worst_snap, worst_first, ascending
        ),
    );
}

fn desk3_toml(space: &str) -> String {
    let online = if space == "coarse" {
        "\n[online]\nenabled = false\nl_per_node = 4\ntheta = 0.02\nmax_rounds = 3\n"
    } else {
        ""
    };
    format!(
        r#"
[grid]
n_coarse = 10
n_fine_per_coarse = 20

[media]
abar = "channels 4 1000 6"
seed = 17
fluctuations = [
  "trig 0.04 1.6 1/8 diag-sin",
  "trig 0.08 1.5 1/7 axis-cos",
  "trig 0.16 1.4 1/6 shifted",
]

[gpc]
r = 3
p = 2

[dybo]
m = 4
dt = 1e-5
T = 8e-4
space = "{space}"
recast_stride = 20
ic_mean = "cosine 32 1"
ic_modes = ["cosine 24 1", "cosine 16 2", "cosine 8 3", "cosine 4 4"]
{online}
[output]
record_times = [2e-4, 4e-4, 8e-4]
reference = "none"
"#
    )
}

#[test]
fn criterion_7_coarse_loop_speed_up() {
    let tmp = tempfile::tempdir().unwrap();
    let load = |s: &str| -> config::Config {
        let cfg = toml::from_str(s).unwrap();
        config::validate(&cfg).unwrap();
        cfg
    };
    let cfg_c = load(&desk3_toml("coarse"));
    let cfg_f = load(&desk3_toml("fine"));
    let _lock = timing_lock();
    let sc = driver::run(&cfg_c, tmp.path(), &tmp.path().join("coarse")).unwrap();
    let sf = driver::run(&cfg_f, tmp.path(), &tmp.path().join("fine")).unwrap();
    let cmp = driver::compare(&tmp.path().join("coarse"), &tmp.path().join("fine"), None).unwrap();
    let pass = cmp.speed_up >= 2.0 && cmp.report.is_file() && sc.steps == 80 && sf.steps == 80;
    report(
        "7",
        "coarse versus fine loop time",
        pass,
        &format!(
            "coarse loop {:.3}s, fine loop {:.3}s, speed-up {:.1}x",
            sc.cpu.total_s, sf.cpu.total_s, cmp.speed_up
        ),
    );
}

fn unit_vector_in(alpha: &[u32], i: usize) -> bool {
    alpha.iter().enumerate().all(|(d, &k)| if d == i { k == 1 } else { k == 0 })
}

fn neighbors_in(alpha: &[u32], beta: &[u32], i: usize) -> bool {
    alpha
        .iter()
        .zip(beta.iter())
        .enumerate()
        .all(|(d, (&a, &b))| if d == i { a.abs_diff(b) == 1 } else { a == b })
}

#[test]
fn criterion_8_moment_tensors_match_quadrature() {
    // 4-point Gauss-Legendre rule, weights normalized to the uniform
    // density on [-1, 1]; exact for the degree-5 integrands below.
    const GL_X: [f64; 4] = [
        -0.8611363115940526,
        -0.3399810435848563,
        0.3399810435848563,
        0.8611363115940526,
    ];
    const GL_W: [f64; 4] = [
        0.3478548451374538,
        0.6521451548625461,
        0.6521451548625461,
        0.3478548451374538,
    ];
    let space = GpcSpace::new(3, 2).unwrap();
    let np = space.n_p();
    let mut pts = Vec::with_capacity(64);
    for i in 0..4 {
        for j in 0..4 {
            for k in 0..4 {
                pts.push(([GL_X[i], GL_X[j], GL_X[k]], GL_W[i] * GL_W[j] * GL_W[k] / 8.0));
            }
        }
    }
    let mut max_dev = 0.0f64;
    let mut max_forbidden = 0.0f64;
    for i in 0..3 {
        let t0 = space.t0(i);
        let t1 = space.t1(i);
        let mut q0 = DVector::<f64>::zeros(np);
        let mut q1 = DMatrix::<f64>::zeros(np, np);
        for (x, w) in &pts {
            let h = eval_basis(&space, x);
            let xi = w * x[i];
            for a in 0..np {
                q0[a] += xi * h[a];
                for b in 0..np {
                    q1[(a, b)] += xi * h[a] * h[b];
                }
            }
        }
        for a in 0..np {
            max_dev = max_dev.max((t0[a] - q0[a]).abs());
            if !unit_vector_in(&space.indices[a], i) {
                max_forbidden = max_forbidden.max(t0[a].abs());
            }
            for b in 0..np {
                max_dev = max_dev.max((t1[(a, b)] - q1[(a, b)]).abs());
                if !neighbors_in(&space.indices[a], &space.indices[b], i) {
                    max_forbidden = max_forbidden.max(t1[(a, b)].abs());
                }
            }
        }
    }
    let uni = GpcSpace::new(1, 2).unwrap();
    let i1 = uni.indices.iter().position(|a| a.as_slice() == [1]).unwrap();
    let i2 = uni.indices.iter().position(|a| a.as_slice() == [2]).unwrap();
    let s1 = (uni.t0(0)[i1] - 1.0 / 3.0f64.sqrt()).abs();
    let s2 = (uni.t1(0)[(i1, i2)] - 2.0 / 15.0f64.sqrt()).abs();
    let pass = max_dev <= 1e-12 && max_forbidden <= 1e-14 && s1 <= 1e-12 && s2 <= 1e-12;
    report(
        "8",
        "stochastic moment tensors",
        pass,
        &format!(
            "max quadrature deviation {:.1e}, max forbidden entry {:.1e}, spot errors {:.1e} / {:.1e}",
            max_dev, max_forbidden, s1, s2
        ),
    );
}
