//! Alternating optimization loop: trust-region position subproblem, convex
//! power/association subproblem, association rounding and penalty-multiplier
//! updates.
//!
//! One iteration freezes an expansion point at the incumbent, moves the UAVs
//! inside a shrinking trust region subject to the active line-of-sight
//! half-spaces, re-freezes link states at the new positions, solves the
//! relaxed power/association problem, rounds the association back to binary
//! (with a capacity-aware repair), updates the penalty multipliers and
//! shrinks the trust radius. True rates are always re-evaluated with the
//! exact model at the rounded state; surrogate values never leave the loop.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{self, Affine, BackendError, Constraint, ConvexExpr, ConvexSubproblem, NegLogTerm, QuadTerm};
use crate::channel::{channel_gain, link_state, ChannelError, LinkState, PropagationParams};
use crate::geometry::{active_los_constraints, is_los, BlockagePlaneSet, BuildingPrism, Point3};
use crate::rsma::{
    compute_rates, compute_rates_noma, GainTable, NetworkState, PowerAllocation, RateBreakdown,
    RsmaError,
};
use crate::surrogate::{
    build_expansion, penalty_terms, position_surrogate, power_assoc_surrogate, rho_value,
    ExpansionPoint, Multipliers, PositionSurrogate, PowerAssocSurrogate, SurrogateError,
};

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("position subproblem (iteration {iteration}): {source}")]
    Position { iteration: usize, source: BackendError },
    #[error("power/association subproblem (iteration {iteration}): {source}")]
    PowerAssoc { iteration: usize, source: BackendError },
    #[error(transparent)]
    Surrogate(#[from] SurrogateError),
    #[error(transparent)]
    Rate(#[from] RsmaError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
}

/// Which users must keep line-of-sight to their UAV.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum LosPolicy {
    ServedUsers,
    AllUsers,
}

/// Optimization scheme; the baselines disable one block each.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    Rsma,
    Noma,
    FixedPosition,
    FixedPower,
    NoGeometry,
}

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Scheme::Rsma => "rsma",
            Scheme::Noma => "noma",
            Scheme::FixedPosition => "fixed-position",
            Scheme::FixedPower => "fixed-power",
            Scheme::NoGeometry => "no-geometry",
        }
    }

    pub fn parse(s: &str) -> Option<Scheme> {
        match s {
            "rsma" => Some(Scheme::Rsma),
            "noma" => Some(Scheme::Noma),
            "fixed-position" => Some(Scheme::FixedPosition),
            "fixed-power" => Some(Scheme::FixedPower),
            "no-geometry" => Some(Scheme::NoGeometry),
            _ => None,
        }
    }

    pub fn use_common(self) -> bool {
        !matches!(self, Scheme::Noma)
    }

    fn optimize_positions(self) -> bool {
        !matches!(self, Scheme::FixedPosition)
    }

    fn optimize_power(self) -> bool {
        !matches!(self, Scheme::FixedPower)
    }

    fn assume_los(self) -> bool {
        matches!(self, Scheme::NoGeometry)
    }
}

/// Tuning knobs of the alternating optimization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct SolverConfig {
    /// Initial trust-region radius ζ⁰ in meters.
    pub zeta0: f64,
    /// Trust-region shrink ratio η ∈ (0, 1).
    pub eta: f64,
    /// Initial penalty multiplier λ⁰.
    pub lambda0: f64,
    /// Initial penalty step μ⁰.
    pub mu0: f64,
    /// Number of outer iterations.
    pub t_max: usize,
    /// Margin δ in meters on the linearized LoS half-spaces.
    pub los_margin: f64,
    pub round_low: f64,
    pub round_high: f64,
    /// Duality-gap tolerance of the convex backend.
    pub subproblem_tol: f64,
    pub los_policy: LosPolicy,
    /// Altitude bounds in meters.
    pub z_min: f64,
    pub z_max: f64,
    /// Initial deployment altitude in meters.
    pub init_altitude: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            zeta0: 50.0,
            eta: 0.9,
            lambda0: 0.05,
            mu0: 0.1,
            t_max: 15,
            los_margin: 1.0,
            round_low: 0.05,
            round_high: 0.95,
            subproblem_tol: 1e-8,
            los_policy: LosPolicy::ServedUsers,
            z_min: 101.0,
            z_max: 500.0,
            init_altitude: 300.0,
        }
    }
}

/// Horizontal deployment area.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AreaBounds {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

/// Everything the optimizer needs about the world.
#[derive(Debug, Clone)]
pub struct ProblemSetup {
    pub users: Vec<Point3>,
    pub buildings: Vec<BuildingPrism>,
    pub blockage: Vec<BlockagePlaneSet>,
    pub params: PropagationParams,
    pub p_max: f64,
    pub area: AreaBounds,
    pub capacities: Vec<usize>,
}

/// One row of the optimization trace; an initial row precedes the
/// iterations. `wall_ms` is wall-clock and is zeroed when written to files
/// so that reruns stay byte-identical.
#[derive(Debug, Clone, Serialize)]
pub struct IterationTrace {
    pub iter: usize,
    pub min_rate_true: f64,
    pub surrogate_objective: f64,
    pub penalty_value: f64,
    pub max_integrality_gap: f64,
    pub zeta: f64,
    pub los_violations: usize,
    pub wall_ms: u64,
}

/// Final state plus per-iteration trace.
#[derive(Debug, Clone)]
pub struct BcdOutcome {
    pub final_state: NetworkState,
    pub trace: Vec<IterationTrace>,
    /// Rates of the final state under the true model.
    pub true_rates: RateBreakdown,
    /// Rates of the final state under the scheme's own link model (differs
    /// from `true_rates` only for the no-geometry scheme).
    pub model_rates: RateBreakdown,
}

// ---------------------------------------------------------------------------
// Gain tables
// ---------------------------------------------------------------------------

/// Builds the gain table at the given positions, optionally pretending every
/// link is LoS.
pub fn gain_table(
    setup: &ProblemSetup,
    positions: &[Point3],
    assume_los: bool,
) -> Result<GainTable, ChannelError> {
    let num_users = setup.users.len();
    let mut gains = vec![vec![0.0; positions.len()]; num_users];
    let mut states = vec![vec![LinkState::Los; positions.len()]; num_users];
    for k in 0..num_users {
        for (m, &x) in positions.iter().enumerate() {
            let st = if assume_los { LinkState::Los } else { link_state(&setup.blockage[k], x) };
            states[k][m] = st;
            gains[k][m] = channel_gain(setup.users[k], x, st, &setup.params)?;
        }
    }
    Ok(GainTable { gains, states, noise_power: setup.params.noise_power })
}

// ---------------------------------------------------------------------------
// Position subproblem
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct PositionSolveInfo {
    /// min_k surrogate value at the returned positions.
    pub surrogate_objective: f64,
    pub gap_bound: f64,
    /// True when the LoS half-spaces were unreachable inside the trust
    /// region and a feasibility-restoration step was taken instead.
    pub restored: bool,
}

fn var_of(m: usize, axis: usize) -> usize {
    1 + 3 * m + axis
}

fn coords(point: Point3) -> [f64; 3] {
    [point.x, point.y, point.z]
}

/// Solves the trust-region position subproblem. With a degenerate trust
/// region (ζ ≈ 0) the incumbent positions are returned unchanged.
pub fn solve_position(
    exp: &ExpansionPoint,
    surrogate: &PositionSurrogate,
    setup: &ProblemSetup,
    config: &SolverConfig,
    zeta: f64,
    iteration: usize,
) -> Result<(Vec<Point3>, PositionSolveInfo), SolverError> {
    let num_uavs = exp.num_uavs();
    if zeta <= 1e-12 {
        return Ok((
            exp.positions.clone(),
            PositionSolveInfo {
                surrogate_objective: surrogate.min_value(&exp.positions),
                gap_bound: 0.0,
                restored: false,
            },
        ));
    }

    // Variables: t, UAV coordinates, then one common-rate variable per UAV
    // with common candidates.
    let base = 1 + 3 * num_uavs;
    let mut rho_index: Vec<Option<usize>> = vec![None; num_uavs];
    let mut n = base;
    for m in 0..num_uavs {
        if surrogate.use_common && !surrogate.common[m].is_empty() {
            rho_index[m] = Some(n);
            n += 1;
        }
    }
    let mut constraints = Vec::new();

    // Subtracts a concave quadratic model from the expression.
    let subtract_model = |expr: &mut ConvexExpr, model: &crate::surrogate::PositionModel| {
        expr.constant -= model.constant;
        for m in 0..num_uavs {
            if model.quad[m] != 0.0 {
                for axis in 0..3 {
                    expr.quadratic.push(QuadTerm {
                        var: var_of(m, axis),
                        weight: -model.quad[m],
                        shift: 0.0,
                    });
                }
            }
            for (axis, c) in coords(model.linear[m]).into_iter().enumerate() {
                if c != 0.0 {
                    expr.linear.push((var_of(m, axis), -c));
                }
            }
        }
    };

    for (k, model) in surrogate.private.iter().enumerate() {
        let mut expr = ConvexExpr::affine(vec![(0, 1.0)], 0.0);
        subtract_model(&mut expr, model);
        if let Some(s) = surrogate.server[k] {
            if let Some(var) = rho_index[s] {
                expr.linear.push((var, -1.0 / surrogate.served_count[s] as f64));
            }
        }
        constraints.push(Constraint { expr, label: format!("rate epigraph user {k}") });
    }
    for m in 0..num_uavs {
        let Some(var) = rho_index[m] else { continue };
        for (ci, candidate) in surrogate.common[m].iter().enumerate() {
            let mut expr = ConvexExpr::affine(vec![(var, 1.0)], 0.0);
            subtract_model(&mut expr, candidate);
            constraints.push(Constraint {
                expr,
                label: format!("common rate uav {m} candidate {ci}"),
            });
        }
    }

    let push_box = |constraints: &mut Vec<Constraint>, m: usize, axis: usize, lo: f64, hi: f64| {
        constraints.push(Constraint {
            expr: ConvexExpr::affine(vec![(var_of(m, axis), -1.0)], lo),
            label: format!("uav {m} axis {axis} lower bound"),
        });
        constraints.push(Constraint {
            expr: ConvexExpr::affine(vec![(var_of(m, axis), 1.0)], -hi),
            label: format!("uav {m} axis {axis} upper bound"),
        });
    };

    let mut los_rows = Vec::new();
    for m in 0..num_uavs {
        let mut ball = ConvexExpr { constant: -zeta * zeta, ..Default::default() };
        for (axis, c) in coords(exp.positions[m]).into_iter().enumerate() {
            ball.quadratic.push(QuadTerm { var: var_of(m, axis), weight: 1.0, shift: c });
        }
        constraints.push(Constraint { expr: ball, label: format!("trust region uav {m}") });

        push_box(&mut constraints, m, 0, setup.area.x_min, setup.area.x_max);
        push_box(&mut constraints, m, 1, setup.area.y_min, setup.area.y_max);
        push_box(&mut constraints, m, 2, config.z_min, config.z_max);

        let users_of_m: Vec<usize> = match config.los_policy {
            LosPolicy::ServedUsers => exp.served[m].clone(),
            LosPolicy::AllUsers => (0..exp.num_users()).collect(),
        };
        for half in
            active_los_constraints(&setup.blockage, &users_of_m, exp.positions[m], config.los_margin)
        {
            // normal·x ≥ offset + margin  →  (offset + margin) − normal·x ≤ 0
            let mut linear = Vec::new();
            for (axis, c) in coords(half.normal).into_iter().enumerate() {
                linear.push((var_of(m, axis), -c));
            }
            let expr = ConvexExpr::affine(linear, half.offset + half.margin);
            los_rows.push((m, expr.clone()));
            constraints.push(Constraint {
                expr,
                label: format!("los user {} building {} uav {m}", half.user_id, half.building_id),
            });
        }
    }

    let mut start = vec![0.0; n];
    start[0] = surrogate.min_value(&exp.positions) - 2.0;
    for m in 0..num_uavs {
        for (axis, c) in coords(exp.positions[m]).into_iter().enumerate() {
            start[var_of(m, axis)] = c;
        }
        if let Some(var) = rho_index[m] {
            start[var] = surrogate.common_value(m, &exp.positions) - 1.0;
        }
    }

    let mut objective = vec![0.0; n];
    objective[0] = 1.0;
    let problem = ConvexSubproblem {
        num_vars: n,
        objective,
        constraints,
        equalities: vec![],
        start,
    };

    match backend::solve(&problem, config.subproblem_tol) {
        Ok(sol) => {
            let positions = extract_positions(&sol.point, num_uavs);
            let objective = surrogate.min_value(&positions);
            Ok((
                positions,
                PositionSolveInfo { surrogate_objective: objective, gap_bound: sol.gap_bound, restored: false },
            ))
        }
        Err(BackendError::Infeasible { .. }) => {
            // LoS half-spaces unreachable inside the trust region: take the
            // step that minimizes total LoS violation instead.
            let positions = restore_feasibility(exp, setup, config, zeta, &los_rows, iteration)?;
            let objective = surrogate.min_value(&positions);
            Ok((
                positions,
                PositionSolveInfo { surrogate_objective: objective, gap_bound: f64::NAN, restored: true },
            ))
        }
        Err(source) => Err(SolverError::Position { iteration, source }),
    }
}

fn extract_positions(point: &[f64], num_uavs: usize) -> Vec<Point3> {
    (0..num_uavs)
        .map(|m| Point3::new(point[var_of(m, 0)], point[var_of(m, 1)], point[var_of(m, 2)]))
        .collect()
}

/// Minimizes the summed hinge violation of the LoS rows over the trust
/// region and box; always feasible.
fn restore_feasibility(
    exp: &ExpansionPoint,
    setup: &ProblemSetup,
    config: &SolverConfig,
    zeta: f64,
    los_rows: &[(usize, ConvexExpr)],
    iteration: usize,
) -> Result<Vec<Point3>, SolverError> {
    let num_uavs = exp.num_uavs();
    let base = 1 + 3 * num_uavs;
    let n = base + los_rows.len();
    let mut constraints = Vec::new();

    for m in 0..num_uavs {
        let mut ball = ConvexExpr { constant: -zeta * zeta, ..Default::default() };
        for (axis, c) in coords(exp.positions[m]).into_iter().enumerate() {
            ball.quadratic.push(QuadTerm { var: var_of(m, axis), weight: 1.0, shift: c });
        }
        constraints.push(Constraint { expr: ball, label: format!("trust region uav {m}") });
        for (axis, (lo, hi)) in [
            (setup.area.x_min, setup.area.x_max),
            (setup.area.y_min, setup.area.y_max),
            (config.z_min, config.z_max),
        ]
        .into_iter()
        .enumerate()
        {
            constraints.push(Constraint {
                expr: ConvexExpr::affine(vec![(var_of(m, axis), -1.0)], lo),
                label: format!("uav {m} axis {axis} lower bound"),
            });
            constraints.push(Constraint {
                expr: ConvexExpr::affine(vec![(var_of(m, axis), 1.0)], -hi),
                label: format!("uav {m} axis {axis} upper bound"),
            });
        }
    }
    for (i, (_, row)) in los_rows.iter().enumerate() {
        let slack = base + i;
        let mut expr = row.clone();
        expr.linear.push((slack, -1.0));
        constraints.push(Constraint { expr, label: format!("los row {i} with slack") });
        constraints.push(Constraint {
            expr: ConvexExpr::affine(vec![(slack, -1.0)], 0.0),
            label: format!("slack {i} nonnegative"),
        });
    }

    let mut start = vec![0.0; n];
    start[0] = 0.0;
    for m in 0..num_uavs {
        for (axis, c) in coords(exp.positions[m]).into_iter().enumerate() {
            start[var_of(m, axis)] = c;
        }
    }
    for (i, (_, row)) in los_rows.iter().enumerate() {
        start[base + i] = row.value(&start).max(0.0) + 1.0;
    }

    let mut objective = vec![0.0; n];
    for slack in base..n {
        objective[slack] = -1.0;
    }
    let problem = ConvexSubproblem { num_vars: n, objective, constraints, equalities: vec![], start };
    let sol = backend::solve(&problem, 1e-6)
        .map_err(|source| SolverError::Position { iteration, source })?;
    Ok(extract_positions(&sol.point, num_uavs))
}

// ---------------------------------------------------------------------------
// Power / association subproblem
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct PowerAssocSolveInfo {
    /// Achieved surrogate objective t + ρ_lb(C).
    pub surrogate_objective: f64,
    pub gap_bound: f64,
}

/// Solves the convex power/association subproblem at an expansion point
/// rebuilt at the updated positions. Returns the new powers and the
/// fractional association.
pub fn solve_power_assoc(
    exp: &ExpansionPoint,
    surrogate: &PowerAssocSurrogate,
    setup: &ProblemSetup,
    config: &SolverConfig,
    scheme: Scheme,
    iteration: usize,
) -> Result<(PowerAllocation, Vec<Vec<f64>>, PowerAssocSolveInfo), SolverError> {
    let num_users = exp.num_users();
    let num_uavs = exp.num_uavs();

    // Variable layout: t, common powers, served private powers, association,
    // then one common-rate variable per UAV with candidates.
    let pairs: Vec<(usize, usize)> = (0..num_users)
        .filter_map(|k| exp.server[k].map(|m| (k, m)))
        .collect();
    let common_var = |m: usize| 1 + m;
    let pair_var = |idx: usize| 1 + num_uavs + idx;
    let assoc_var = |k: usize, m: usize| 1 + num_uavs + pairs.len() + k * num_uavs + m;
    let base = 1 + num_uavs + pairs.len() + num_users * num_uavs;
    let mut rho_index: Vec<Option<usize>> = vec![None; num_uavs];
    let mut n = base;
    for m in 0..num_uavs {
        if !surrogate.common[m].is_empty() {
            rho_index[m] = Some(n);
            n += 1;
        }
    }
    let pair_index: Vec<Vec<Option<usize>>> = {
        let mut t = vec![vec![None; num_uavs]; num_users];
        for (i, &(k, m)) in pairs.iter().enumerate() {
            t[k][m] = Some(i);
        }
        t
    };

    let affine_power_to_backend = |a: &crate::surrogate::AffinePower| -> Affine {
        let mut coeffs = Vec::new();
        for (m, &c) in a.common.iter().enumerate() {
            if c != 0.0 {
                coeffs.push((common_var(m), c));
            }
        }
        for &(k, m, c) in &a.private {
            if c != 0.0 {
                if let Some(idx) = pair_index[k][m] {
                    coeffs.push((pair_var(idx), c));
                }
                // Powers of non-served pairs are identically zero.
            }
        }
        Affine { coeffs, constant: a.constant }
    };

    let mut constraints = Vec::new();

    // Epigraph rows: t − R_k(P, C) ≤ 0.
    for (k, model) in surrogate.per_user.iter().enumerate() {
        let mut expr = ConvexExpr::affine(vec![(0, 1.0)], -model.constant);
        let lin = affine_power_to_backend(&model.linear);
        expr.constant -= lin.constant;
        for (var, c) in lin.coeffs {
            expr.linear.push((var, -c));
        }
        for &(ku, m, c) in &model.assoc_coeffs {
            expr.linear.push((assoc_var(ku, m), -c));
        }
        for (weight, affine) in &model.logs {
            expr.neg_logs.push(NegLogTerm {
                weight: weight / std::f64::consts::LN_2,
                affine: affine_power_to_backend(affine),
            });
        }
        if let Some((s, share)) = model.common_share {
            if let Some(var) = rho_index[s] {
                expr.linear.push((var, -share));
            }
        }
        constraints.push(Constraint { expr, label: format!("rate epigraph user {k}") });
    }

    // Common-rate candidate rows: rho_m ≤ candidate_j(P).
    for m in 0..num_uavs {
        let Some(var) = rho_index[m] else { continue };
        for candidate in &surrogate.common[m] {
            let mut expr = ConvexExpr::affine(vec![(var, 1.0)], 0.0);
            let lin = affine_power_to_backend(&candidate.linear);
            expr.constant -= lin.constant;
            for (v, c) in lin.coeffs {
                expr.linear.push((v, -c));
            }
            expr.neg_logs.push(NegLogTerm {
                weight: 1.0 / std::f64::consts::LN_2,
                affine: affine_power_to_backend(&candidate.log_affine),
            });
            constraints.push(Constraint {
                expr,
                label: format!("common rate uav {m} user {}", candidate.user),
            });
        }
    }

    // Per-UAV power budget and nonnegativity.
    for m in 0..num_uavs {
        let mut linear = vec![(common_var(m), 1.0)];
        for (i, &(_, pm)) in pairs.iter().enumerate() {
            if pm == m {
                linear.push((pair_var(i), 1.0));
            }
        }
        constraints.push(Constraint {
            expr: ConvexExpr::affine(linear, -setup.p_max),
            label: format!("power budget uav {m}"),
        });
        constraints.push(Constraint {
            expr: ConvexExpr::affine(vec![(common_var(m), -1.0)], 0.0),
            label: format!("common power uav {m} nonnegative"),
        });
    }
    for (i, &(k, m)) in pairs.iter().enumerate() {
        constraints.push(Constraint {
            expr: ConvexExpr::affine(vec![(pair_var(i), -1.0)], 0.0),
            label: format!("private power ({k},{m}) nonnegative"),
        });
    }

    // Association box and capacity rows.
    for k in 0..num_users {
        for m in 0..num_uavs {
            constraints.push(Constraint {
                expr: ConvexExpr::affine(vec![(assoc_var(k, m), -1.0)], 0.0),
                label: format!("assoc ({k},{m}) >= 0"),
            });
            constraints.push(Constraint {
                expr: ConvexExpr::affine(vec![(assoc_var(k, m), 1.0)], -1.0),
                label: format!("assoc ({k},{m}) <= 1"),
            });
        }
    }
    for m in 0..num_uavs {
        let linear: Vec<(usize, f64)> = (0..num_users).map(|k| (assoc_var(k, m), 1.0)).collect();
        constraints.push(Constraint {
            expr: ConvexExpr::affine(linear, -(setup.capacities[m] as f64)),
            label: format!("capacity uav {m}"),
        });
    }

    // Unit association rows.
    let mut equalities: Vec<(Vec<(usize, f64)>, f64)> = (0..num_users)
        .map(|k| ((0..num_uavs).map(|m| (assoc_var(k, m), 1.0)).collect(), 1.0))
        .collect();

    // Scheme pins: fixed powers (whole P) or no common stream.
    if !scheme.optimize_power() {
        for m in 0..num_uavs {
            equalities.push((vec![(common_var(m), 1.0)], exp.power.common[m]));
        }
        for (i, &(k, m)) in pairs.iter().enumerate() {
            equalities.push((vec![(pair_var(i), 1.0)], exp.power.private[k][m]));
        }
    } else if !scheme.use_common() {
        for m in 0..num_uavs {
            equalities.push((vec![(common_var(m), 1.0)], 0.0));
        }
    }

    // Interior-shifted start.
    let mut start = vec![0.0; n];
    let shift = 1e-3;
    let mut assoc_start = exp.assoc.clone();
    for k in 0..num_users {
        for m in 0..num_uavs {
            let c = exp.assoc.values[k][m];
            let shifted = c * (1.0 - num_uavs as f64 * shift) + shift;
            assoc_start.values[k][m] = shifted;
            start[assoc_var(k, m)] = shifted;
        }
    }
    let mut power_start = exp.power.clone();
    for m in 0..num_uavs {
        let v = if scheme.use_common() { (exp.power.common[m] * (1.0 - 1e-6)).max(1e-9) } else { 0.0 };
        power_start.common[m] = v;
        start[common_var(m)] = v;
    }
    for (i, &(k, m)) in pairs.iter().enumerate() {
        let v = (exp.power.private[k][m] * (1.0 - 1e-6)).max(1e-9);
        power_start.private[k][m] = v;
        start[pair_var(i)] = v;
    }
    if !scheme.optimize_power() {
        for m in 0..num_uavs {
            power_start.common[m] = exp.power.common[m];
            start[common_var(m)] = exp.power.common[m];
        }
        for (i, &(k, m)) in pairs.iter().enumerate() {
            power_start.private[k][m] = exp.power.private[k][m];
            start[pair_var(i)] = exp.power.private[k][m];
        }
    }
    for m in 0..num_uavs {
        if let Some(var) = rho_index[m] {
            start[var] = surrogate.common_value(m, &power_start) - 1.0;
        }
    }
    start[0] = surrogate.min_user_value(&power_start, &assoc_start) - 2.0;

    // Objective: t + ρ_lb(C) (its constant is added back afterwards).
    let mut objective = vec![0.0; n];
    objective[0] = 1.0;
    for (k, row) in surrogate.penalty.coeffs.iter().enumerate() {
        for (m, &c) in row.iter().enumerate() {
            objective[assoc_var(k, m)] += c;
        }
    }

    let problem = ConvexSubproblem { num_vars: n, objective, constraints, equalities, start };
    let sol = backend::solve(&problem, config.subproblem_tol)
        .map_err(|source| SolverError::PowerAssoc { iteration, source })?;

    let mut power = PowerAllocation::zeros(num_users, num_uavs);
    for m in 0..num_uavs {
        power.common[m] = sol.point[common_var(m)].max(0.0);
    }
    for (i, &(k, m)) in pairs.iter().enumerate() {
        power.private[k][m] = sol.point[pair_var(i)].max(0.0);
    }
    // Polish the budget exactly.
    for m in 0..num_uavs {
        let total = power.total(m);
        if total > setup.p_max {
            let scale = setup.p_max / total;
            power.common[m] *= scale;
            for k in 0..num_users {
                power.private[k][m] *= scale;
            }
        }
    }
    let assoc: Vec<Vec<f64>> = (0..num_users)
        .map(|k| (0..num_uavs).map(|m| sol.point[assoc_var(k, m)].clamp(0.0, 1.0)).collect())
        .collect();

    Ok((
        power,
        assoc,
        PowerAssocSolveInfo {
            surrogate_objective: sol.objective + surrogate.penalty.constant,
            gap_bound: sol.gap_bound,
        },
    ))
}

// ---------------------------------------------------------------------------
// Rounding and multiplier update
// ---------------------------------------------------------------------------

/// Rounds the relaxed association to an exactly binary, capacity-feasible
/// matrix. Entries at or below `round_low` drop to 0, entries at or above
/// `round_high` rise to 1; every row without a 1 is repaired greedily
/// (largest fractional value first) respecting capacities.
pub fn round_association(
    values: &[Vec<f64>],
    config: &SolverConfig,
    capacities: &[usize],
) -> Vec<Vec<f64>> {
    let num_users = values.len();
    let num_uavs = capacities.len();
    let mut rounded: Vec<Vec<f64>> = values
        .iter()
        .map(|row| {
            row.iter()
                .map(|&c| {
                    if c <= config.round_low {
                        0.0
                    } else if c >= config.round_high {
                        1.0
                    } else {
                        c
                    }
                })
                .collect()
        })
        .collect();

    let mut load = vec![0usize; num_uavs];
    let mut unassigned: Vec<(usize, f64)> = Vec::new();
    for k in 0..num_users {
        if let Some(m) = (0..num_uavs).find(|&m| rounded[k][m] == 1.0) {
            load[m] += 1;
            for mm in 0..num_uavs {
                rounded[k][mm] = if mm == m { 1.0 } else { 0.0 };
            }
        } else {
            let best = rounded[k].iter().cloned().fold(0.0, f64::max);
            unassigned.push((k, best));
        }
    }
    // Largest fractional value first; user id breaks ties.
    unassigned.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for (k, _) in unassigned {
        let mut order: Vec<usize> = (0..num_uavs).collect();
        order.sort_by(|&a, &b| {
            rounded[k][b].partial_cmp(&rounded[k][a]).unwrap().then(a.cmp(&b))
        });
        let target = order
            .into_iter()
            .find(|&m| load[m] < capacities[m])
            .expect("total capacity covers all users");
        load[target] += 1;
        for mm in 0..num_uavs {
            rounded[k][mm] = if mm == target { 1.0 } else { 0.0 };
        }
    }
    rounded
}

/// Penalty multiplier update on the rounded association: each multiplier
/// grows by μ/S scaled by its own integrality gap, with S the squared-gap
/// sum; μ doubles every iteration. Binary associations leave λ unchanged.
pub fn update_multipliers(
    lambda: &Multipliers,
    assoc_values: &[Vec<f64>],
    mu: f64,
) -> (Multipliers, f64) {
    let s: f64 = assoc_values
        .iter()
        .flatten()
        .map(|&c| {
            let g = c * (1.0 - c);
            g * g
        })
        .sum();
    let next = if s < 1e-18 {
        lambda.clone()
    } else {
        let gamma = mu / s;
        lambda
            .iter()
            .enumerate()
            .map(|(k, row)| {
                row.iter()
                    .enumerate()
                    .map(|(m, &l)| {
                        let c = assoc_values[k][m];
                        l + gamma * c * (1.0 - c)
                    })
                    .collect()
            })
            .collect()
    };
    (next, 2.0 * mu)
}

// ---------------------------------------------------------------------------
// The alternating optimization loop
// ---------------------------------------------------------------------------

fn zero_unserved_powers(state: &mut NetworkState) {
    for k in 0..state.num_users() {
        for m in 0..state.num_uavs() {
            if state.assoc.values[k][m] < 0.5 {
                state.power.private[k][m] = 0.0;
            }
        }
    }
}

fn scheme_rates(
    state: &NetworkState,
    gains: &GainTable,
    scheme: Scheme,
) -> Result<RateBreakdown, RsmaError> {
    if scheme.use_common() {
        compute_rates(state, gains)
    } else {
        compute_rates_noma(state, gains)
    }
}

fn count_los_violations(setup: &ProblemSetup, state: &NetworkState) -> usize {
    let mut count = 0;
    for k in 0..state.num_users() {
        for m in 0..state.num_uavs() {
            if state.assoc.values[k][m] >= 0.999 && !is_los(&setup.blockage[k], state.positions[m])
            {
                count += 1;
            }
        }
    }
    count
}

/// Runs the full alternating optimization from an initial state.
pub fn run_bcd(
    setup: &ProblemSetup,
    init: &NetworkState,
    config: &SolverConfig,
    scheme: Scheme,
) -> Result<BcdOutcome, SolverError> {
    let num_users = init.num_users();
    let num_uavs = init.num_uavs();
    let mut state = init.clone();
    let mut lambda: Multipliers = vec![vec![config.lambda0; num_uavs]; num_users];
    let mut mu = config.mu0;
    let mut zeta = config.zeta0;

    let true_gains = gain_table(setup, &state.positions, false)?;
    let initial_rates = scheme_rates(&state, &true_gains, scheme)?;
    let (rho, _) = penalty_terms(&lambda, &state.assoc.values, &state.assoc.values)?;
    let mut trace = vec![IterationTrace {
        iter: 0,
        min_rate_true: initial_rates.min_rate,
        surrogate_objective: initial_rates.min_rate,
        penalty_value: rho,
        max_integrality_gap: state.assoc.max_gap(),
        zeta,
        los_violations: count_los_violations(setup, &state),
        wall_ms: 0,
    }];

    for iteration in 0..config.t_max {
        let started = std::time::Instant::now();

        // Position step at the incumbent expansion.
        let model_gains = gain_table(setup, &state.positions, scheme.assume_los())?;
        let exp = build_expansion(
            &state,
            &setup.users,
            &model_gains,
            &setup.params,
            &lambda,
            scheme.use_common(),
        )?;
        if scheme.optimize_positions() {
            let psur = position_surrogate(&exp);
            let mut los_free = setup.clone();
            if scheme.assume_los() {
                // No LoS half-spaces when geometry is ignored.
                for set in &mut los_free.blockage {
                    set.planes_by_building = vec![Vec::new(); setup.buildings.len()];
                }
            }
            let active_setup = if scheme.assume_los() { &los_free } else { setup };
            let (positions, _info) =
                solve_position(&exp, &psur, active_setup, config, zeta, iteration)?;
            state.positions = positions;
        }

        // Re-freeze link states and gains at the new positions.
        let model_gains = gain_table(setup, &state.positions, scheme.assume_los())?;
        let exp = build_expansion(
            &state,
            &setup.users,
            &model_gains,
            &setup.params,
            &lambda,
            scheme.use_common(),
        )?;
        let pasur = power_assoc_surrogate(&exp);
        let (power, c_frac, info) =
            solve_power_assoc(&exp, &pasur, setup, config, scheme, iteration)?;

        state.assoc.values = round_association(&c_frac, config, &setup.capacities);
        state.power = power;
        if !scheme.optimize_power() {
            let server: Vec<Option<usize>> = (0..num_users).map(|k| state.assoc.server(k)).collect();
            state.power =
                equal_split_power(num_users, num_uavs, &server, setup.p_max, scheme.use_common());
        }
        zero_unserved_powers(&mut state);

        let (next_lambda, next_mu) = update_multipliers(&lambda, &state.assoc.values, mu);
        lambda = next_lambda;
        mu = next_mu;
        zeta *= config.eta;

        let true_gains = gain_table(setup, &state.positions, false)?;
        let rates = scheme_rates(&state, &true_gains, scheme)?;
        trace.push(IterationTrace {
            iter: iteration + 1,
            min_rate_true: rates.min_rate,
            surrogate_objective: info.surrogate_objective,
            penalty_value: rho_value(&lambda, &state.assoc.values),
            max_integrality_gap: state.assoc.max_gap(),
            zeta,
            los_violations: count_los_violations(setup, &state),
            wall_ms: started.elapsed().as_millis() as u64,
        });
    }

    let true_gains = gain_table(setup, &state.positions, false)?;
    let true_rates = scheme_rates(&state, &true_gains, scheme)?;
    let model_gains = gain_table(setup, &state.positions, scheme.assume_los())?;
    let model_rates = scheme_rates(&state, &model_gains, scheme)?;
    Ok(BcdOutcome { final_state: state, trace, true_rates, model_rates })
}

/// Equal power split over the common stream and the served private streams:
/// p_c = p_k = P_max / (served + 1). Without a common stream the budget is
/// split over the private streams alone.
pub fn equal_split_power(
    num_users: usize,
    num_uavs: usize,
    server: &[Option<usize>],
    p_max: f64,
    include_common: bool,
) -> PowerAllocation {
    let mut power = PowerAllocation::zeros(num_users, num_uavs);
    for m in 0..num_uavs {
        let served: Vec<usize> = (0..num_users).filter(|&k| server[k] == Some(m)).collect();
        if include_common {
            let share = p_max / (served.len() + 1) as f64;
            power.common[m] = share;
            for &k in &served {
                power.private[k][m] = share;
            }
        } else if !served.is_empty() {
            let share = p_max / served.len() as f64;
            for &k in &served {
                power.private[k][m] = share;
            }
        }
    }
    power
}
