//! Experiment orchestration: problem construction from a configuration,
//! the time loop with optional online enrichment, reference comparison,
//! and the artifact files.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use dybo_core::dybo::{
    assemble_operators, init_state, lambda_matrix, recast, step, step_adaptive, AdaptiveConfig,
    AssembledOperators, DyboState, SpaceChoice, StepConfig,
};
use dybo_core::fem::{assemble_mass, CellField, SparseOperator};
use dybo_core::gpc::GpcSpace;
use dybo_core::grid::{build_grids, GridPair};
use dybo_core::media::{
    high_contrast_mean, raster_import, trig_field, CoefficientModel, TrigVariant,
};
use dybo_core::msbasis::{build_offline_space, BasisCounts, OfflineSpace};
use dybo_core::online::{CoarseSolver, OnlineContext};
use dybo_core::oracle::{align_modes, error_l2, gpc_galerkin_solve, kl_extract, variance_field};

use crate::config::{self, Config};
use crate::formats::{self, CpuBreakdown, EnrichRow, ErrorRow};
use crate::CliError;

fn core_err(e: dybo_core::Error) -> CliError {
    match e {
        dybo_core::Error::Numerical { .. } => CliError::Numerical(e.to_string()),
        _ => CliError::Config(e.to_string()),
    }
}

/// Everything a run needs about the continuous problem.
pub struct Problem {
    pub g: GridPair,
    pub model: CoefficientModel,
    pub gpc: GpcSpace,
    pub f_all: DVector<f64>,
    pub u0_all: DVector<f64>,
    pub mode_fields: Vec<DVector<f64>>,
}

fn parse_variant(token: &str, what: &str) -> Result<TrigVariant, CliError> {
    match token {
        "diag-sin" => Ok(TrigVariant::DiagSin),
        "axis-cos" => Ok(TrigVariant::AxisCos),
        "shifted" => Ok(TrigVariant::Shifted),
        "diag-sum" => Ok(TrigVariant::DiagSum),
        other => Err(CliError::Config(format!(
            "{what}: unknown variant `{other}` (expected diag-sin, axis-cos, shifted, or diag-sum)"
        ))),
    }
}

fn spec_tokens<'a>(spec: &'a str, arity: &[usize], what: &str) -> Result<Vec<&'a str>, CliError> {
    let tokens: Vec<&str> = spec.split_whitespace().collect();
    if tokens.is_empty() {
        return Err(CliError::Config(format!("{what}: empty field spec")));
    }
    if !arity.contains(&(tokens.len() - 1)) {
        return Err(CliError::Config(format!(
            "{what}: `{}` takes {:?} arguments, got {}",
            tokens[0],
            arity,
            tokens.len() - 1
        )));
    }
    Ok(tokens)
}

/// Builds a coefficient field from a spec string.
fn parse_cell_spec(
    spec: &str,
    g: &GridPair,
    seed: u64,
    base: &Path,
    what: &str,
) -> Result<CellField, CliError> {
    let tokens: Vec<&str> = spec.split_whitespace().collect();
    match tokens.first().copied() {
        Some("constant") => {
            let t = spec_tokens(spec, &[1], what)?;
            Ok(CellField::constant(g, config::parse_num(t[1], what)?))
        }
        Some("channels") => {
            let t = spec_tokens(spec, &[3], what)?;
            let background = config::parse_num(t[1], what)?;
            let contrast = config::parse_num(t[2], what)?;
            let n_channels = t[3]
                .parse::<usize>()
                .map_err(|_| CliError::Config(format!("{what}: `{}` is not a count", t[3])))?;
            high_contrast_mean(g, n_channels, background, contrast, seed).map_err(core_err)
        }
        Some("raster") => {
            let t = spec_tokens(spec, &[2], what)?;
            let path = base.join(t[1]);
            let scale = config::parse_num(t[2], what)?;
            raster_import(path.to_string_lossy().as_ref(), g, scale).map_err(core_err)
        }
        Some("trig") => {
            let t = spec_tokens(spec, &[4], what)?;
            let amplitude = config::parse_num(t[1], what)?;
            let p = config::parse_num(t[2], what)?;
            let eps = config::parse_num(t[3], what)?;
            trig_field(g, amplitude, p, eps, parse_variant(t[4], what)?).map_err(core_err)
        }
        Some(other) => Err(CliError::Config(format!("{what}: unknown field kind `{other}`"))),
        None => Err(CliError::Config(format!("{what}: empty field spec"))),
    }
}

/// Builds a nodal field from a spec string.
fn parse_node_spec(spec: &str, g: &GridPair, what: &str) -> Result<DVector<f64>, CliError> {
    let tokens: Vec<&str> = spec.split_whitespace().collect();
    match tokens.first().copied() {
        Some("constant") => {
            let t = spec_tokens(spec, &[1], what)?;
            let v = config::parse_num(t[1], what)?;
            Ok(DVector::from_element(g.n_nodes(), v))
        }
        Some("cosine") => {
            let t = spec_tokens(spec, &[2], what)?;
            let amp = config::parse_num(t[1], what)?;
            let k = config::parse_num(t[2], what)?;
            let tau = 2.0 * std::f64::consts::PI * k;
            Ok(DVector::from_fn(g.n_nodes(), |idx, _| {
                let (x, y) = g.node_pos(idx);
                amp * (1.0 - (tau * x).cos()) * (1.0 - (tau * y).cos())
            }))
        }
        Some(other) => Err(CliError::Config(format!("{what}: unknown field kind `{other}`"))),
        None => Err(CliError::Config(format!("{what}: empty field spec"))),
    }
}

pub fn build_problem(cfg: &Config, base: &Path) -> Result<Problem, CliError> {
    let g = build_grids(cfg.grid.n_coarse, cfg.grid.n_fine_per_coarse).map_err(core_err)?;
    let abar = parse_cell_spec(&cfg.media.abar, &g, cfg.media.seed, base, "media.abar")?;
    let mut fluct = Vec::with_capacity(cfg.media.fluctuations.len());
    for (i, spec) in cfg.media.fluctuations.iter().enumerate() {
        fluct.push(parse_cell_spec(spec, &g, cfg.media.seed, base, &format!("media.fluctuations[{i}]"))?);
    }
    let model = CoefficientModel::new(abar, fluct).map_err(core_err)?;
    let gpc = GpcSpace::new(cfg.gpc.r, cfg.gpc.p).map_err(core_err)?;
    let f_all = parse_node_spec(&cfg.media.source, &g, "media.source")?;
    let u0_all = parse_node_spec(&cfg.dybo.ic_mean, &g, "dybo.ic_mean")?;
    let mut mode_fields = Vec::with_capacity(cfg.dybo.m);
    for (i, spec) in cfg.dybo.ic_modes.iter().enumerate() {
        mode_fields.push(parse_node_spec(spec, &g, &format!("dybo.ic_modes[{i}]"))?);
    }
    Ok(Problem { g, model, gpc, f_all, u0_all, mode_fields })
}

/// Reference fields at one recorded step, on fine free dofs.
struct Snapshot {
    mean: DVector<f64>,
    modes: DMatrix<f64>,
    var: DVector<f64>,
}

fn mnorm(v: &DVector<f64>, mass: &SparseOperator) -> f64 {
    let mut y = vec![0.0; v.len()];
    mass.matvec(v.as_slice(), &mut y);
    v.as_slice().iter().zip(&y).map(|(a, b)| a * b).sum::<f64>().max(0.0).sqrt()
}

/// Relative M-weighted error; a zero reference falls back to the absolute
/// norm of the approximation so every emitted value stays finite.
fn rel_err(reference: &DVector<f64>, approx: &DVector<f64>, mass: &SparseOperator) -> f64 {
    match error_l2(reference, approx, mass) {
        Ok(e) => e,
        Err(_) => mnorm(approx, mass),
    }
}

/// Runs the fine-space scheme and snapshots it at the recorded steps.
fn fine_reference(
    p: &Problem,
    cfg: &Config,
    record: &BTreeMap<usize, f64>,
) -> Result<HashMap<usize, Snapshot>, CliError> {
    let dt = cfg.dybo.dt;
    let ops = assemble_operators(&SpaceChoice::Fine, &p.model, &p.g, &p.f_all, dt).map_err(core_err)?;
    let mut state = init_state(&p.u0_all, &p.mode_fields, &SpaceChoice::Fine, &ops, &p.g, &p.gpc, dt)
        .map_err(core_err)?;
    let scfg = StepConfig::default();
    let last = *record.keys().last().expect("record steps exist");
    let mut out = HashMap::new();
    for n in 1..=last {
        let rep = step(&mut state, &ops, &p.gpc, &scfg).map_err(core_err)?;
        if rep.freeze || (cfg.dybo.recast_stride > 0 && n % cfg.dybo.recast_stride == 0) {
            recast(&mut state, &ops, StepConfig::default().eps_lambda).map_err(core_err)?;
        }
        if record.contains_key(&n) {
            out.insert(
                n,
                Snapshot {
                    mean: state.u0.clone(),
                    modes: state.modes.clone(),
                    var: variance_field(&state.modes),
                },
            );
        }
    }
    Ok(out)
}

/// Runs the coupled stochastic Galerkin oracle and extracts KL snapshots.
fn gpc_reference(
    p: &Problem,
    cfg: &Config,
    record: &BTreeMap<usize, f64>,
    mass: &SparseOperator,
) -> Result<HashMap<usize, Snapshot>, CliError> {
    let last = *record.keys().last().expect("record steps exist");
    let levels = gpc_galerkin_solve(
        &p.model,
        &p.g,
        &p.gpc,
        &p.u0_all,
        &p.mode_fields,
        &p.f_all,
        cfg.dybo.dt,
        last,
    )
    .map_err(core_err)?;
    let mut out = HashMap::new();
    for (&n, _) in record {
        let block = &levels[n];
        let kl = kl_extract(block, mass, cfg.dybo.m).map_err(core_err)?;
        let np = block.ncols() - 1;
        out.insert(
            n,
            Snapshot {
                mean: kl.mean,
                modes: kl.modes,
                var: variance_field(&block.columns(1, np).into_owned()),
            },
        );
    }
    Ok(out)
}

/// Accumulates the per-time error table against the reference snapshots.
struct Recorder<'a> {
    record: &'a BTreeMap<usize, f64>,
    reference: Option<HashMap<usize, Snapshot>>,
    mass: &'a SparseOperator,
    rows: Vec<ErrorRow>,
    /// End-status mean-field error at the last recorded time.
    terminal_mean_e2: Option<f64>,
}

impl Recorder<'_> {
    /// Emits the `start`/`end` row pairs for one recorded step. Fields are
    /// fine free-dof vectors.
    fn record_step(
        &mut self,
        n: usize,
        start: Option<(&DVector<f64>, &DMatrix<f64>)>,
        end_mean: &DVector<f64>,
        end_modes: &DMatrix<f64>,
    ) -> Result<(), CliError> {
        let Some(reference) = &self.reference else {
            return Ok(());
        };
        let Some(&t) = self.record.get(&n) else {
            return Ok(());
        };
        let snap = reference.get(&n).expect("snapshot recorded");
        let (start_mean, start_modes) = match start {
            Some((mean, modes)) => (mean.clone(), modes.clone()),
            None => (end_mean.clone(), end_modes.clone()),
        };
        let starts = error_set(snap, &start_mean, &start_modes, self.mass)?;
        let ends = error_set(snap, end_mean, end_modes, self.mass)?;
        let m = end_modes.ncols();
        for (i, (s, e)) in starts.iter().zip(&ends).enumerate() {
            let function = if i == 0 {
                "ubar".to_string()
            } else if i <= m {
                format!("u{i}")
            } else {
                "var".to_string()
            };
            self.rows.push(ErrorRow { t, function: function.clone(), status: "start".into(), e2: *s });
            self.rows.push(ErrorRow { t, function, status: "end".into(), e2: *e });
        }
        let is_last = Some(&n) == self.record.keys().last();
        if is_last {
            self.terminal_mean_e2 = Some(ends[0]);
        }
        Ok(())
    }
}

/// Errors of one solution against a snapshot: mean, each aligned mode, and
/// the variance field.
fn error_set(
    snap: &Snapshot,
    mean: &DVector<f64>,
    modes: &DMatrix<f64>,
    mass: &SparseOperator,
) -> Result<Vec<f64>, CliError> {
    let mut out = Vec::with_capacity(modes.ncols() + 2);
    out.push(rel_err(&snap.mean, mean, mass));
    let aligned = align_modes(&snap.modes, modes, mass).map_err(core_err)?;
    for j in 0..modes.ncols() {
        let r = DVector::from_column_slice(snap.modes.column(j).as_slice());
        let a = DVector::from_column_slice(aligned.column(j).as_slice());
        out.push(rel_err(&r, &a, mass));
    }
    out.push(rel_err(&snap.var, &variance_field(modes), mass));
    Ok(out)
}

/// Results of one run, alongside the artifact files.
#[derive(Debug)]
pub struct RunSummary {
    pub steps: usize,
    pub cpu: CpuBreakdown,
    pub max_a_drift: f64,
    pub max_bi_drift: f64,
    /// Largest drift measured immediately after a recast.
    pub max_post_recast_drift: f64,
    /// Online columns committed over the whole run.
    pub added_total: usize,
    /// Energy-error increases across enrichment rounds (fine_check runs).
    pub monotonicity_violations: usize,
    pub terminal_mean_e2: Option<f64>,
    pub out_dir: PathBuf,
}

struct LoopState {
    cpu: CpuBreakdown,
    max_a_drift: f64,
    max_bi_drift: f64,
    max_post_recast_drift: f64,
    added_total: usize,
    monotonicity_violations: usize,
    enrich_rows: Vec<EnrichRow>,
}

impl LoopState {
    fn new() -> Self {
        LoopState {
            cpu: CpuBreakdown::default(),
            max_a_drift: 0.0,
            max_bi_drift: 0.0,
            max_post_recast_drift: 0.0,
            added_total: 0,
            monotonicity_violations: 0,
            enrich_rows: Vec::new(),
        }
    }
}

/// Recasts on a freeze or at the stride boundary; returns the drift right
/// after, measured as the larger of `‖AᵀA − I‖` and the bi-orthogonality
/// residual.
fn maybe_recast(
    state: &mut DyboState,
    ops: &AssembledOperators,
    n: usize,
    stride: usize,
    freeze: bool,
) -> Result<Option<f64>, CliError> {
    if !(freeze || (stride > 0 && n % stride == 0)) {
        return Ok(None);
    }
    recast(state, ops, StepConfig::default().eps_lambda).map_err(core_err)?;
    let li = lambda_matrix(&state.modes, ops, StepConfig::default().eps_lambda);
    Ok(Some(state.a_drift().max(li.drift)))
}

pub fn run(cfg: &Config, base: &Path, out_dir: &Path) -> Result<RunSummary, CliError> {
    std::fs::create_dir_all(out_dir)
        .map_err(|e| CliError::Config(format!("{}: {e}", out_dir.display())))?;
    let p = build_problem(cfg, base)?;
    let dt = cfg.dybo.dt;
    let n_steps = config::step_of(cfg.dybo.t_end, dt).expect("validated");
    let record: BTreeMap<usize, f64> = cfg
        .output
        .record_times
        .iter()
        .map(|&t| (config::step_of(t, dt).expect("validated"), t))
        .collect();
    let fine_mass = assemble_mass(&p.g, None, &p.g.boundary_nodes()).map_err(core_err)?;

    let reference = if record.is_empty() {
        None
    } else {
        match cfg.output.reference.as_str() {
            "fine" => Some(fine_reference(&p, cfg, &record)?),
            "gpc" => Some(gpc_reference(&p, cfg, &record, &fine_mass)?),
            _ => None,
        }
    };
    let mut recorder = Recorder {
        record: &record,
        reference,
        mass: &fine_mass,
        rows: Vec::new(),
        terminal_mean_e2: None,
    };

    let mut ls = LoopState::new();
    let scfg = StepConfig::default();
    match cfg.dybo.space.as_str() {
        "fine" => {
            let ops = assemble_operators(&SpaceChoice::Fine, &p.model, &p.g, &p.f_all, dt)
                .map_err(core_err)?;
            let mut state =
                init_state(&p.u0_all, &p.mode_fields, &SpaceChoice::Fine, &ops, &p.g, &p.gpc, dt)
                    .map_err(core_err)?;
            for n in 1..=n_steps {
                let clock = Instant::now();
                let rep = step(&mut state, &ops, &p.gpc, &scfg).map_err(core_err)?;
                let post = maybe_recast(&mut state, &ops, n, cfg.dybo.recast_stride, rep.freeze)?;
                ls.cpu.total_s += clock.elapsed().as_secs_f64();
                ls.cpu.mean_s += rep.solve_mean_s;
                ls.cpu.modes_s += rep.solve_modes_s;
                ls.max_a_drift = ls.max_a_drift.max(rep.a_drift);
                ls.max_bi_drift = ls.max_bi_drift.max(rep.bi_drift);
                if let Some(d) = post {
                    ls.max_post_recast_drift = ls.max_post_recast_drift.max(d);
                }
                recorder.record_step(n, None, &state.u0, &state.modes)?;
            }
        }
        _ => {
            let online = cfg.online.as_ref().expect("validated");
            let space0 = load_or_build_offline(cfg, &p, base)?;
            if online.enabled {
                let fine_ops = assemble_operators(&SpaceChoice::Fine, &p.model, &p.g, &p.f_all, dt)
                    .map_err(core_err)?;
                let coarse_ops =
                    assemble_operators(&SpaceChoice::Coarse(&space0), &p.model, &p.g, &p.f_all, dt)
                        .map_err(core_err)?;
                let coarse_state = init_state(
                    &p.u0_all,
                    &p.mode_fields,
                    &SpaceChoice::Coarse(&space0),
                    &coarse_ops,
                    &p.g,
                    &p.gpc,
                    dt,
                )
                .map_err(core_err)?;
                drop(coarse_ops);
                let mut space = space0;
                let ctx = OnlineContext::new(&p.g, &p.model.abar, &space).map_err(core_err)?;
                let (sys, _, _) = fine_ops.fine_parts().expect("fine backend");
                let mut solver = CoarseSolver::from_gram(space.gram(sys)).map_err(core_err)?;
                let m = cfg.dybo.m;
                let mut state = DyboState {
                    u0: space.prolong(&coarse_state.u0),
                    modes: {
                        let mut mm = DMatrix::zeros(fine_ops.n(), m);
                        for j in 0..m {
                            mm.column_mut(j).copy_from(&space.prolong(&DVector::from_column_slice(
                                coarse_state.modes.column(j).as_slice(),
                            )));
                        }
                        mm
                    },
                    a: coarse_state.a.clone(),
                    n: 0,
                    dt,
                };
                let acfg = AdaptiveConfig {
                    theta: online.theta,
                    tol_abs: online.tol_abs,
                    max_rounds: online.max_rounds,
                    reset_each_step: online.window == "reset",
                    fine_check: online.fine_check,
                };
                for n in 1..=n_steps {
                    let clock = Instant::now();
                    let rep = step_adaptive(
                        &mut state,
                        &fine_ops,
                        &p.gpc,
                        &scfg,
                        &mut space,
                        &mut solver,
                        &ctx,
                        &acfg,
                    )
                    .map_err(core_err)?;
                    let post =
                        maybe_recast(&mut state, &fine_ops, n, cfg.dybo.recast_stride, rep.freeze)?;
                    ls.cpu.total_s += clock.elapsed().as_secs_f64();
                    ls.cpu.mean_s += rep.outcome.solve_mean_s;
                    ls.cpu.modes_s += rep.outcome.solve_modes_s;
                    ls.max_a_drift = ls.max_a_drift.max(rep.a_drift);
                    ls.max_bi_drift = ls.max_bi_drift.max(rep.bi_drift);
                    if let Some(d) = post {
                        ls.max_post_recast_drift = ls.max_post_recast_drift.max(d);
                    }
                    ls.added_total += rep.outcome.added;
                    for w in rep.outcome.energy.windows(2) {
                        if w[1] > w[0] * (1.0 + 1e-12) {
                            ls.monotonicity_violations += 1;
                        }
                    }
                    let t = n as f64 * dt;
                    for report in &rep.outcome.history {
                        ls.enrich_rows.push(EnrichRow {
                            t,
                            level: report.level,
                            residual_sum: report.norms.iter().sum(),
                            selected: report.selected.len(),
                            added_total: rep.outcome.added,
                            energy: rep.outcome.energy.get(report.level).copied().unwrap_or(f64::NAN),
                        });
                    }
                    if record.contains_key(&n) && recorder.reference.is_some() {
                        let x0 = &rep.outcome.x0;
                        let start_mean = space.prolong(&x0[0]);
                        let mut start_modes = DMatrix::zeros(fine_ops.n(), m);
                        for j in 0..m {
                            start_modes.column_mut(j).copy_from(&space.prolong(&x0[j + 1]));
                        }
                        recorder.record_step(
                            n,
                            Some((&start_mean, &start_modes)),
                            &state.u0,
                            &state.modes,
                        )?;
                    }
                }
            } else {
                let ops =
                    assemble_operators(&SpaceChoice::Coarse(&space0), &p.model, &p.g, &p.f_all, dt)
                        .map_err(core_err)?;
                let mut state = init_state(
                    &p.u0_all,
                    &p.mode_fields,
                    &SpaceChoice::Coarse(&space0),
                    &ops,
                    &p.g,
                    &p.gpc,
                    dt,
                )
                .map_err(core_err)?;
                let m = cfg.dybo.m;
                for n in 1..=n_steps {
                    let clock = Instant::now();
                    let rep = step(&mut state, &ops, &p.gpc, &scfg).map_err(core_err)?;
                    let post = maybe_recast(&mut state, &ops, n, cfg.dybo.recast_stride, rep.freeze)?;
                    ls.cpu.total_s += clock.elapsed().as_secs_f64();
                    ls.cpu.mean_s += rep.solve_mean_s;
                    ls.cpu.modes_s += rep.solve_modes_s;
                    ls.max_a_drift = ls.max_a_drift.max(rep.a_drift);
                    ls.max_bi_drift = ls.max_bi_drift.max(rep.bi_drift);
                    if let Some(d) = post {
                        ls.max_post_recast_drift = ls.max_post_recast_drift.max(d);
                    }
                    if record.contains_key(&n) && recorder.reference.is_some() {
                        let mean = space0.prolong(&state.u0);
                        let cols: Vec<DVector<f64>> = (0..m)
                            .map(|j| {
                                space0.prolong(&DVector::from_column_slice(
                                    state.modes.column(j).as_slice(),
                                ))
                            })
                            .collect();
                        let modes = DMatrix::from_columns(&cols);
                        recorder.record_step(n, None, &mean, &modes)?;
                    }
                }
            }
        }
    }

    formats::write_error_csv(&out_dir.join("errors.csv"), &recorder.rows)?;
    formats::write_enrichment_csv(&out_dir.join("enrichment.csv"), &ls.enrich_rows)?;
    formats::write_cpu_csv(&out_dir.join("cpu.csv"), &ls.cpu)?;
    std::fs::write(out_dir.join("config_hash.txt"), format!("{}\n", config::problem_hash(cfg)))
        .map_err(|e| CliError::Config(format!("{}: {e}", out_dir.display())))?;
    if cfg.output.export_fields {
        let fields_dir = out_dir.join("fields");
        write_fields(&p, &fields_dir)?;
    }

    let summary = RunSummary {
        steps: n_steps,
        cpu: ls.cpu,
        max_a_drift: ls.max_a_drift,
        max_bi_drift: ls.max_bi_drift,
        max_post_recast_drift: ls.max_post_recast_drift,
        added_total: ls.added_total,
        monotonicity_violations: ls.monotonicity_violations,
        terminal_mean_e2: recorder.terminal_mean_e2,
        out_dir: out_dir.to_path_buf(),
    };
    std::fs::write(out_dir.join("summary.txt"), render_summary(cfg, &summary))
        .map_err(|e| CliError::Config(format!("{}: {e}", out_dir.display())))?;
    Ok(summary)
}

fn render_summary(cfg: &Config, s: &RunSummary) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "space: {}\nsteps: {}\ncpu mean solve: {:.6} s\ncpu modes solve: {:.6} s\ncpu total loop: {:.6} s\n",
        cfg.dybo.space, s.steps, s.cpu.mean_s, s.cpu.modes_s, s.cpu.total_s
    ));
    out.push_str(&format!(
        "max |A'A - I|: {:.3e}\nmax bi-orthogonality drift: {:.3e}\nmax post-recast drift: {:.3e}\n",
        s.max_a_drift, s.max_bi_drift, s.max_post_recast_drift
    ));
    out.push_str(&format!(
        "online columns added: {}\nenergy monotonicity violations: {}\n",
        s.added_total, s.monotonicity_violations
    ));
    if let Some(e2) = s.terminal_mean_e2 {
        out.push_str(&format!("terminal mean-field error: {:.4}%\n", 100.0 * e2));
    }
    out
}

fn load_or_build_offline(cfg: &Config, p: &Problem, base: &Path) -> Result<OfflineSpace, CliError> {
    let online = cfg.online.as_ref().expect("validated");
    if !online.offline_cache.is_empty() {
        let path = base.join(&online.offline_cache);
        return formats::load_offline(&path, p.g, formats::field_check(&p.model.abar));
    }
    build_offline_space(&p.g, &p.model.abar, &BasisCounts::Uniform(online.l_per_node))
        .map_err(core_err)
}

fn write_fields(p: &Problem, dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Config(format!("{}: {e}", dir.display())))?;
    formats::write_cell_field(&dir.join("abar.txt"), &p.model.abar)?;
    for (i, f) in p.model.modes.iter().enumerate() {
        formats::write_cell_field(&dir.join(format!("fluctuation_{}.txt", i + 1)), f)?;
    }
    formats::write_node_field(&dir.join("source.txt"), &p.g, &p.f_all)?;
    formats::write_node_field(&dir.join("ic_mean.txt"), &p.g, &p.u0_all)?;
    for (i, f) in p.mode_fields.iter().enumerate() {
        formats::write_node_field(&dir.join(format!("ic_mode_{}.txt", i + 1)), &p.g, f)?;
    }
    Ok(())
}

/// Builds the offline space for a configuration and writes it to `out`.
pub fn cache_offline(cfg: &Config, base: &Path, out: &Path) -> Result<usize, CliError> {
    let online = cfg
        .online
        .as_ref()
        .ok_or_else(|| CliError::Config("online: section required to cache an offline space".into()))?;
    let p = build_problem(cfg, base)?;
    let space = build_offline_space(&p.g, &p.model.abar, &BasisCounts::Uniform(online.l_per_node))
        .map_err(core_err)?;
    formats::save_offline(out, &space, formats::field_check(&p.model.abar))?;
    Ok(space.n_offline())
}

/// Writes the media and initial fields of a configuration to `out_dir`.
pub fn export_fields(cfg: &Config, base: &Path, out_dir: &Path) -> Result<(), CliError> {
    let p = build_problem(cfg, base)?;
    write_fields(&p, out_dir)
}

/// Comparison of a run against its reference run.
#[derive(Debug)]
pub struct CompareSummary {
    pub rows: usize,
    pub max_abs_diff: f64,
    pub max_e2_end: f64,
    pub mean_e2_end: f64,
    /// Reference CPU total over this run's CPU total.
    pub speed_up: f64,
    pub report: PathBuf,
}

impl CompareSummary {
    pub fn render(&self) -> String {
        format!(
            "merged rows: {}\nmax |e2 difference|: {:.3e}\nend-status errors: max {:.4}%, mean {:.4}%\nspeed-up (reference cpu / run cpu): {:.2}\nreport: {}\n",
            self.rows,
            self.max_abs_diff,
            100.0 * self.max_e2_end,
            100.0 * self.mean_e2_end,
            self.speed_up,
            self.report.display()
        )
    }
}

fn read_hash(dir: &Path) -> Result<String, CliError> {
    let path = dir.join("config_hash.txt");
    std::fs::read_to_string(&path)
        .map(|s| s.trim().to_string())
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

pub fn compare(
    run_dir: &Path,
    oracle_dir: &Path,
    out: Option<&Path>,
) -> Result<CompareSummary, CliError> {
    if read_hash(run_dir)? != read_hash(oracle_dir)? {
        return Err(CliError::Config(
            "config-hash mismatch: the two directories solve different problems".into(),
        ));
    }
    let run_rows = formats::read_error_csv(&run_dir.join("errors.csv"))?;
    let oracle_rows = formats::read_error_csv(&oracle_dir.join("errors.csv"))?;
    let run_cpu = formats::read_cpu_csv(&run_dir.join("cpu.csv"))?;
    let oracle_cpu = formats::read_cpu_csv(&oracle_dir.join("cpu.csv"))?;
    if !(run_cpu.total_s > 0.0 && oracle_cpu.total_s > 0.0) {
        return Err(CliError::Config("cpu tables must hold positive loop totals".into()));
    }

    let mut oracle_map: HashMap<(u64, &str, &str), f64> = HashMap::new();
    for r in &oracle_rows {
        oracle_map.insert((r.t.to_bits(), r.function.as_str(), r.status.as_str()), r.e2);
    }
    let report = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| run_dir.join("compare.csv"));
    let mut w = csv::Writer::from_path(&report)
        .map_err(|e| CliError::Config(format!("{}: {e}", report.display())))?;
    w.write_record(["t", "function", "status", "e2_run", "e2_reference", "abs_diff"])
        .map_err(|e| CliError::Config(format!("{}: {e}", report.display())))?;
    let mut rows = 0usize;
    let mut max_abs_diff: f64 = 0.0;
    let mut max_e2_end: f64 = 0.0;
    let mut sum_e2_end = 0.0;
    let mut n_end = 0usize;
    for r in &run_rows {
        let Some(&other) = oracle_map.get(&(r.t.to_bits(), r.function.as_str(), r.status.as_str()))
        else {
            continue;
        };
        let diff = (r.e2 - other).abs();
        w.write_record([
            r.t.to_string(),
            r.function.clone(),
            r.status.clone(),
            r.e2.to_string(),
            other.to_string(),
            diff.to_string(),
        ])
        .map_err(|e| CliError::Config(format!("{}: {e}", report.display())))?;
        rows += 1;
        max_abs_diff = max_abs_diff.max(diff);
        if r.status == "end" {
            max_e2_end = max_e2_end.max(r.e2);
            sum_e2_end += r.e2;
            n_end += 1;
        }
    }
    w.flush().map_err(|e| CliError::Config(format!("{}: {e}", report.display())))?;
    Ok(CompareSummary {
        rows,
        max_abs_diff,
        max_e2_end,
        mean_e2_end: if n_end > 0 { sum_e2_end / n_end as f64 } else { 0.0 },
        speed_up: oracle_cpu.total_s / run_cpu.total_s,
        report,
    })
}
