//! Experiment runners. Each returns plain data; [`crate::output`] writes it.

use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use rough_heat::algebra::loglog_slope;
use rough_heat::convrp::ConvolutionalRoughPath;
use rough_heat::dynamics::{
    additive_solution, commuting_flow_solution, picard_solve, solve, LinearField, Nonlinearity, Scheme,
    SolveReport, SolverConfig,
};
use rough_heat::semigroup::{
    apply_a, apply_generator, apply_heat, frac_laplacian, generator_constant, regularization_constant, sobolev_norm,
    GridFunction, SpectralGrid,
};
use rough_heat::signal::{all_triples, random_triples, RoughSignal};
use rough_heat::{Error, Vector};

use crate::config::{ExperimentConfig, FieldKind, Reference, SignalKind};
use crate::CliError;

/// One named identity or bound with its outcome.
#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub residual: f64,
    pub threshold: f64,
    pub pass: bool,
}

impl Check {
    pub fn at_most(name: impl Into<String>, residual: f64, threshold: f64) -> Self {
        Self { name: name.into(), residual, threshold, pass: residual <= threshold }
    }

    pub fn at_least(name: impl Into<String>, residual: f64, threshold: f64) -> Self {
        Self { name: name.into(), residual, threshold, pass: residual >= threshold }
    }
}

pub fn all_pass(checks: &[Check]) -> bool {
    checks.iter().all(|c| c.pass)
}

fn operators(cfg: &ExperimentConfig, signal: RoughSignal) -> Result<(ConvolutionalRoughPath, Arc<SpectralGrid>), CliError> {
    let spec = cfg.spectral()?;
    Ok((ConvolutionalRoughPath::new(Arc::new(signal), spec.clone()), spec))
}

/// Lift, semigroup and operator audits.
pub fn audit(cfg: &ExperimentConfig) -> Result<Vec<Check>, CliError> {
    let signal = cfg.signal()?;
    let cells = signal.cells();
    let mut checks = Vec::new();

    let triples = if cells <= 64 { all_triples(cells) } else { random_triples(cells, cfg.audit_triples, cfg.seed) };
    let chen = signal.chen_audit(&triples)?;
    checks.push(Check::at_most("chen_level2", chen.level2, 1e-12));
    if let Some(r) = chen.level3 {
        checks.push(Check::at_most("chen_level3", r, 1e-12));
    }
    checks.push(Check::at_most("shuffle", chen.shuffle, 1e-12));

    let (crp, spec) = operators(cfg, signal)?;
    checks.extend(semigroup_checks(&spec, cfg.seed)?);

    let phi = GridFunction::random_real(spec.clone(), cfg.modes, 0.5, cfg.seed + 1);
    let psi = GridFunction::random_real(spec.clone(), (cfg.modes / 2).max(1), 1.0, cfg.seed + 2);
    let sample = random_triples(cells, cfg.audit_relation_triples, cfg.seed + 3);
    let rel = crp.relation_audit(&sample, &phi, &psi, cfg.audit_epsilon, false)?;
    checks.push(Check::at_most("x_additivity", rel.x, 1e-10));
    checks.push(Check::at_most("x_equals_ax_plus_dx", rel.ax, 1e-10));
    checks.push(Check::at_most("xx_relation", rel.xx, 1e-10));
    if let Some(r) = rel.xxx {
        checks.push(Check::at_most("xxx_relation", r, 1e-9));
    }
    checks.push(Check::at_most("regularization_commutes", rel.commutation, 1e-13));

    // X^xa is quadrature-limited: its relation residual must at least halve
    // with each doubling of the panels per cell.
    let smooth_phi = GridFunction::random_real(spec.clone(), 4, 0.0, cfg.seed + 4);
    let smooth_psi = GridFunction::random_real(spec.clone(), 4, 0.0, cfg.seed + 5);
    let span = cells.min(64);
    let refine = crp.xa_refinement((0, 3 * span / 8, span), 0, &smooth_phi, &smooth_psi, &[1, 2, 4, 8])?;
    let worst_ratio = refine.residuals.windows(2).map(|w| w[1] / w[0]).fold(0.0, f64::max);
    checks.push(Check::at_most("xa_relation_halves", worst_ratio, 0.5));
    Ok(checks)
}

/// Contraction and the smoothing bounds over dyadic `τ ∈ [2^-12, 1]`.
pub fn semigroup_checks(spec: &Arc<SpectralGrid>, seed: u64) -> Result<Vec<Check>, CliError> {
    let mut contraction = 0.0f64;
    let mut holder = [0.0f64; 2];
    let mut regular = [0.0f64; 2];
    let mut generator = [0.0f64; 2];
    let alphas = [0.25, 0.5];
    for k in 0..4 {
        let f = GridFunction::random_real(spec.clone(), spec.modes(), 0.0, seed + 10 + k);
        for j in 0..=12 {
            let tau = (-(j as f64)).exp2();
            let st = apply_heat(&f, tau)?;
            contraction = contraction.max(st.l2_norm() / f.l2_norm());
            for (a, &alpha) in alphas.iter().enumerate() {
                holder[a] = holder[a].max(apply_a(&f, tau)?.l2_norm() / (tau.powf(alpha) * sobolev_norm(&f, alpha, 2.0)?));
                let reg = tau.powf(alpha) * sobolev_norm(&st, alpha, 2.0)? / f.l2_norm();
                regular[a] = regular[a].max(reg / regularization_constant(alpha));
                let gen = tau.powf(1.0 - alpha) * apply_generator(&st).l2_norm() / frac_laplacian(&f, alpha)?.l2_norm();
                generator[a] = generator[a].max(gen / generator_constant(alpha));
            }
        }
    }
    let mut out = vec![Check::at_most("heat_contraction", contraction, 1.0 + 1e-12)];
    for (a, alpha) in alphas.iter().enumerate() {
        out.push(Check::at_most(format!("holder_bound_alpha_{alpha}"), holder[a], 1.0 + 1e-9));
        out.push(Check::at_most(format!("regularization_bound_alpha_{alpha}"), regular[a], 1.0 + 1e-9));
        out.push(Check::at_most(format!("generator_bound_alpha_{alpha}"), generator[a], 1.0 + 1e-9));
    }
    Ok(out)
}

/// One row of a convergence table.
#[derive(Clone, Debug, Serialize)]
pub struct ConvergenceRow {
    pub mesh_exponent: u32,
    pub h: f64,
    /// Max over the row's nodes of the sup norm of the error.
    pub sup_error: f64,
    /// Max over the row's nodes of the `L^2` norm of the error.
    pub l2_error: f64,
    /// Slope against the previous finite row, from `l2_error`.
    pub fitted_order: Option<f64>,
    /// Set when a run on this mesh blew up.
    pub blowup: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ConvergenceTable {
    pub scheme: Scheme,
    pub reference: &'static str,
    pub seeds: Vec<u64>,
    pub rows: Vec<ConvergenceRow>,
    /// Least-squares slope of `log l2_error` against `log h`.
    pub fitted_order: f64,
}

/// The closed-form solution at a fine node, when the field has one.
fn oracle_at(
    cfg: &ExperimentConfig,
    solver: &SolverConfig,
    psi: &GridFunction,
    crp: &ConvolutionalRoughPath,
    node: usize,
) -> Result<GridFunction, CliError> {
    let spec = crp.spectral();
    match cfg.field_kind {
        FieldKind::Zero => Ok(apply_heat(psi, crp.signal().grid().time(node))?),
        FieldKind::Additive => {
            let mut g = cfg.additive_components(spec, crp.dim());
            if solver.scheme == Scheme::Rough2Regularized {
                g = g.iter().map(|v| apply_heat(v, solver.epsilon)).collect::<Result<_, _>>()?;
            }
            Ok(additive_solution(&g, psi, crp, node)?)
        }
        FieldKind::Linear => Ok(commuting_flow_solution(&cfg.coefficients, psi, crp, node)?),
        FieldKind::Sin => Err(CliError::Config("convergence.reference = oracle needs a zero, additive or linear field".into())),
    }
}

enum Outcome {
    Errors { sup: f64, l2: f64 },
    BlowUp(String),
}

fn errors_against(
    run: &SolveReport,
    reference: impl Fn(usize) -> Result<GridFunction, CliError>,
) -> Result<Outcome, CliError> {
    let (mut sup, mut l2) = (0.0f64, 0.0f64);
    for (m, &node) in run.path.nodes.iter().enumerate() {
        let diff = run.path.y[m].sub(&reference(node)?);
        sup = sup.max(diff.sup_norm());
        l2 = l2.max(diff.l2_norm());
    }
    Ok(Outcome::Errors { sup, l2 })
}

fn solve_level(
    solver: &SolverConfig,
    level: u32,
    psi: &GridFunction,
    crp: &ConvolutionalRoughPath,
    field: &dyn Nonlinearity,
) -> Result<Result<SolveReport, String>, CliError> {
    let cfg = SolverConfig { steps: 1 << level, audit_remainder: false, ..solver.clone() };
    match solve(&cfg, psi, crp, field) {
        Ok(r) => Ok(Ok(r)),
        Err(Error::BlowUp { time, norm, ceiling }) => {
            Ok(Err(format!("blow-up at t = {time} (norm {norm:e} > {ceiling:e})")))
        }
        Err(e) => Err(e.into()),
    }
}

/// Errors of the configured scheme on meshes `2^min_level ..= 2^max_level`,
/// averaged over `convergence.seeds` consecutive signal seeds.
pub fn convergence(cfg: &ExperimentConfig) -> Result<ConvergenceTable, CliError> {
    convergence_for(cfg, cfg.solver.scheme)
}

pub fn convergence_for(cfg: &ExperimentConfig, scheme: Scheme) -> Result<ConvergenceTable, CliError> {
    if cfg.max_level > cfg.level {
        return Err(CliError::Config(format!(
            "convergence.max_level {} exceeds the fine grid level {}",
            cfg.max_level, cfg.level
        )));
    }
    let seeds: Vec<u64> = if cfg.signal_kind == SignalKind::Fbm { (0..cfg.seeds).map(|k| cfg.seed + k).collect() } else { vec![cfg.seed] };
    let rows_levels: Vec<u32> = match cfg.reference {
        Reference::Oracle => (cfg.min_level..=cfg.max_level).collect(),
        Reference::Finest => (cfg.min_level..cfg.max_level).collect(),
    };
    if rows_levels.is_empty() {
        return Err(CliError::Config("convergence needs at least one mesh below the reference".into()));
    }
    let spec = cfg.spectral()?;
    let psi = cfg.initial(&spec);
    let solver = SolverConfig { scheme, ..cfg.solver.clone() };

    let per_seed: Vec<Vec<Outcome>> = seeds
        .par_iter()
        .map(|&seed| -> Result<Vec<Outcome>, CliError> {
            let (crp, spec) = operators(cfg, cfg.signal_with_seed(seed)?)?;
            let field = cfg.field(&spec, crp.dim())?;
            let solver = SolverConfig { seed: Some(seed), ..solver.clone() };
            let finest = match cfg.reference {
                Reference::Oracle => None,
                Reference::Finest => Some(solve_level(&solver, cfg.max_level, &psi, &crp, field.as_ref())?),
            };
            rows_levels
                .par_iter()
                .map(|&level| {
                    let run = match solve_level(&solver, level, &psi, &crp, field.as_ref())? {
                        Ok(r) => r,
                        Err(msg) => return Ok(Outcome::BlowUp(msg)),
                    };
                    match &finest {
                        None => errors_against(&run, |node| oracle_at(cfg, &solver, &psi, &crp, node)),
                        Some(Err(msg)) => Ok(Outcome::BlowUp(format!("reference mesh: {msg}"))),
                        Some(Ok(reference)) => errors_against(&run, |node| {
                            let m = reference.path.nodes.binary_search(&node).expect("nested dyadic meshes");
                            Ok(reference.path.y[m].clone())
                        }),
                    }
                })
                .collect()
        })
        .collect::<Result<_, _>>()?;

    let mut rows = Vec::with_capacity(rows_levels.len());
    for (k, &level) in rows_levels.iter().enumerate() {
        let h = 0.5f64.powi(level as i32);
        let blowup = per_seed.iter().find_map(|outs| match &outs[k] {
            Outcome::BlowUp(m) => Some(m.clone()),
            Outcome::Errors { .. } => None,
        });
        let (sup, l2) = match blowup {
            Some(_) => (f64::NAN, f64::NAN),
            None => {
                let n = per_seed.len() as f64;
                per_seed.iter().fold((0.0, 0.0), |(s, l), outs| match outs[k] {
                    Outcome::Errors { sup, l2 } => (s + sup / n, l + l2 / n),
                    Outcome::BlowUp(_) => unreachable!(),
                })
            }
        };
        rows.push(ConvergenceRow { mesh_exponent: level, h, sup_error: sup, l2_error: l2, fitted_order: None, blowup });
    }
    let mut previous: Option<(f64, f64)> = None;
    for row in rows.iter_mut() {
        if !(row.l2_error.is_finite() && row.l2_error > 0.0) {
            continue;
        }
        if let Some((h0, e0)) = previous {
            row.fitted_order = Some((e0 / row.l2_error).ln() / (h0 / row.h).ln());
        }
        previous = Some((row.h, row.l2_error));
    }
    let pts: Vec<(f64, f64)> =
        rows.iter().filter(|r| r.l2_error.is_finite() && r.l2_error > 0.0).map(|r| (r.h, r.l2_error)).collect();
    let fitted_order = if pts.len() >= 2 { loglog_slope(&pts).unwrap_or(f64::NAN) } else { f64::NAN };
    let reference = match cfg.reference {
        Reference::Oracle => "oracle",
        Reference::Finest => "finest",
    };
    Ok(ConvergenceTable { scheme, reference, seeds, rows, fitted_order })
}

/// Closed-form comparisons.
///
/// The additive check runs every scheme on several meshes against the
/// telescoped mild solution. The commuting-flow checks use the linear field
/// with `field.coefficients` and need a smooth (linear or sine) signal.
pub fn oracle(cfg: &ExperimentConfig) -> Result<Vec<Check>, CliError> {
    let (crp, spec) = operators(cfg, cfg.signal()?)?;
    let psi = cfg.initial(&spec);
    let n = crp.dim();
    let cells = crp.signal().cells();
    let mut checks = Vec::new();

    let g = cfg.additive_components(&spec, n);
    let additive = rough_heat::dynamics::AdditiveField::new(g.clone())?;
    let mut meshes = vec![1, 4, 16, cfg.solver.steps];
    meshes.retain(|&m| m <= cells && cells % m == 0);
    meshes.dedup();
    let epsilon = if cfg.solver.epsilon > 0.0 { cfg.solver.epsilon } else { 0.05 };
    for scheme in Scheme::ALL {
        if scheme == Scheme::Rough3 && !crp.signal().has_level3() {
            continue;
        }
        let source: Vec<GridFunction> = if scheme == Scheme::Rough2Regularized {
            g.iter().map(|v| apply_heat(v, epsilon)).collect::<Result<_, _>>()?
        } else {
            g.clone()
        };
        let mut worst = 0.0f64;
        for &steps in &meshes {
            let solver = SolverConfig { scheme, steps, epsilon, audit_remainder: false, ..cfg.solver.clone() };
            let rep = solve(&solver, &psi, &crp, &additive)?;
            for (m, &node) in rep.path.nodes.iter().enumerate() {
                worst = worst.max(rep.path.y[m].distance(&additive_solution(&source, &psi, &crp, node)?)?);
            }
        }
        checks.push(Check::at_most(format!("additive_{scheme}"), worst, 1e-10));
    }

    if matches!(cfg.signal_kind, SignalKind::Linear | SignalKind::Sine) {
        if cfg.coefficients.len() != n {
            return Err(CliError::Config(format!("field.coefficients needs {n} entries for the oracle")));
        }
        let linear = LinearField { coefficients: cfg.coefficients.clone() };
        let want = commuting_flow_solution(&cfg.coefficients, &psi, &crp, cells)?;
        let levels: Vec<u32> = (cfg.min_level..=cfg.max_level.min(cfg.level)).collect();
        let errors = |scheme: Scheme| -> Result<Vec<(f64, f64)>, CliError> {
            levels
                .par_iter()
                .map(|&level| {
                    let solver = SolverConfig { scheme, steps: 1 << level, audit_remainder: false, ..cfg.solver.clone() };
                    let rep = solve(&solver, &psi, &crp, &linear)?;
                    Ok((0.5f64.powi(level as i32), rep.terminal().distance(&want)?))
                })
                .collect()
        };
        let young = errors(Scheme::YoungEuler)?;
        let rough2 = errors(Scheme::Rough2)?;
        let order = |e: &[(f64, f64)]| loglog_slope(e).unwrap_or(f64::NAN);
        checks.push(Check::at_least("commuting_flow_young_order", order(&young), 0.8));
        checks.push(Check::at_least("commuting_flow_rough2_order", order(&rough2), 1.5));
        if crp.signal().has_level3() {
            let rough3 = errors(Scheme::Rough3)?;
            let worst = rough3.iter().zip(&rough2).map(|(a, b)| a.1 / b.1).fold(0.0, f64::max);
            checks.push(Check::at_most("commuting_flow_rough3_over_rough2", worst, 1.0));
        }
    }
    Ok(checks)
}

/// The configured solve, by steps or by Picard iteration.
pub fn solve_run(cfg: &ExperimentConfig) -> Result<SolveReport, CliError> {
    let (crp, spec) = operators(cfg, cfg.signal()?)?;
    let field = cfg.field(&spec, crp.dim())?;
    let psi = cfg.initial(&spec);
    let solver = cfg.solver_for(cfg.seed);
    let report = if cfg.picard_enabled {
        picard_solve(&solver, &psi, &crp, field.as_ref())?
    } else {
        solve(&solver, &psi, &crp, field.as_ref())?
    };
    Ok(report)
}
