//! Deterministic convex solver used by both optimization subproblems.
//!
//! Problems are posed in a canonical form: maximize a linear objective over
//! smooth convex inequality constraints `f_i(v) ≤ 0` and linear equalities.
//! Each constraint function is a sum of an affine part, nonnegative-weight
//! shifted squares and nonnegative-weight negated logs of affine forms, which
//! covers everything the subproblems need: epigraph rows of concave
//! (quadratic or log-of-affine) rate models, trust-region balls, boxes,
//! budgets and half-spaces.
//!
//! The solver is a log-barrier interior-point method with equality-constrained
//! Newton centering. Singleton equality rows are eliminated up front, a
//! phase-I pass restores strict feasibility when the supplied start is not
//! interior (constraint sets with an empty strict interior are relaxed by at
//! most 2e-7), and the returned certificate is the standard central-path gap
//! bound m/t. Everything is plain f64 arithmetic: identical inputs produce
//! identical outputs.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Affine form `Σ coeffs·v + constant`.
#[derive(Debug, Clone, Default)]
pub struct Affine {
    pub coeffs: Vec<(usize, f64)>,
    pub constant: f64,
}

impl Affine {
    pub fn eval(&self, v: &[f64]) -> f64 {
        self.coeffs.iter().map(|&(i, c)| c * v[i]).sum::<f64>() + self.constant
    }
}

/// `weight · (v[var] − shift)²`, weight ≥ 0.
#[derive(Debug, Clone)]
pub struct QuadTerm {
    pub var: usize,
    pub weight: f64,
    pub shift: f64,
}

/// `− weight · ln(affine)`, weight ≥ 0; implies the domain `affine > 0`.
#[derive(Debug, Clone)]
pub struct NegLogTerm {
    pub weight: f64,
    pub affine: Affine,
}

/// Smooth convex expression; a constraint means `value ≤ 0`.
#[derive(Debug, Clone, Default)]
pub struct ConvexExpr {
    pub constant: f64,
    pub linear: Vec<(usize, f64)>,
    pub quadratic: Vec<QuadTerm>,
    pub neg_logs: Vec<NegLogTerm>,
}

impl ConvexExpr {
    pub fn affine(linear: Vec<(usize, f64)>, constant: f64) -> Self {
        Self { constant, linear, ..Default::default() }
    }

    /// Returns +inf when a log argument leaves its domain.
    pub fn value(&self, v: &[f64]) -> f64 {
        let mut val = self.constant;
        for &(i, c) in &self.linear {
            val += c * v[i];
        }
        for q in &self.quadratic {
            let d = v[q.var] - q.shift;
            val += q.weight * d * d;
        }
        for l in &self.neg_logs {
            let arg = l.affine.eval(v);
            if arg <= 0.0 {
                return f64::INFINITY;
            }
            val -= l.weight * arg.ln();
        }
        val
    }

    fn grad_into(&self, v: &[f64], out: &mut [f64]) {
        for &(i, c) in &self.linear {
            out[i] += c;
        }
        for q in &self.quadratic {
            out[q.var] += 2.0 * q.weight * (v[q.var] - q.shift);
        }
        for l in &self.neg_logs {
            let arg = l.affine.eval(v);
            let scale = -l.weight / arg;
            for &(i, c) in &l.affine.coeffs {
                out[i] += scale * c;
            }
        }
    }

    /// Accumulates `scale_g·∇f∇fᵀ + scale_h·∇²f` into `hess`, reusing the
    /// already-computed gradient.
    fn hess_into(
        &self,
        v: &[f64],
        grad: &[f64],
        scale_g: f64,
        scale_h: f64,
        hess: &mut DMatrix<f64>,
    ) {
        let n = hess.nrows();
        for i in 0..n {
            if grad[i] == 0.0 {
                continue;
            }
            for j in 0..n {
                if grad[j] != 0.0 {
                    hess[(i, j)] += scale_g * grad[i] * grad[j];
                }
            }
        }
        for q in &self.quadratic {
            hess[(q.var, q.var)] += scale_h * 2.0 * q.weight;
        }
        for l in &self.neg_logs {
            let arg = l.affine.eval(v);
            let s = scale_h * l.weight / (arg * arg);
            for &(i, ci) in &l.affine.coeffs {
                for &(j, cj) in &l.affine.coeffs {
                    hess[(i, j)] += s * ci * cj;
                }
            }
        }
    }
}

/// One inequality constraint with a diagnostic label.
#[derive(Debug, Clone)]
pub struct Constraint {
    pub expr: ConvexExpr,
    pub label: String,
}

/// Canonical convex subproblem: maximize `objective·v` subject to
/// `constraints ≤ 0` and `equalities`.
#[derive(Debug, Clone)]
pub struct ConvexSubproblem {
    pub num_vars: usize,
    pub objective: Vec<f64>,
    pub constraints: Vec<Constraint>,
    /// Rows `coeffs·v = rhs`.
    pub equalities: Vec<(Vec<(usize, f64)>, f64)>,
    /// Start point; must satisfy the equalities and all log domains.
    pub start: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct BackendSolution {
    pub point: Vec<f64>,
    /// Achieved value of the (maximized) linear objective.
    pub objective: f64,
    /// Duality-gap certificate from the final barrier parameter.
    pub gap_bound: f64,
    pub newton_steps: usize,
    /// Tiny uniform relaxation applied when the strict interior was empty.
    pub relaxation: f64,
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("infeasible subproblem: constraint `{label}` violated by {violation:.3e}")]
    Infeasible {
        label: String,
        violation: f64,
        /// Point minimizing the maximum violation; usable as a
        /// feasibility-restoration step.
        best_point: Vec<f64>,
    },
    #[error("unbounded subproblem")]
    Unbounded,
    #[error("iteration limit reached")]
    IterationLimit,
    #[error("numerical failure: {0}")]
    Numerical(String),
}

const NEWTON_TOL: f64 = 1e-10;
const MAX_NEWTON_PER_CENTER: usize = 100;
const MAX_TOTAL_NEWTON: usize = 20_000;
const MU: f64 = 20.0;
const FEAS_EPS: f64 = 1e-7;

/// Solves the subproblem to the requested duality-gap tolerance.
pub fn solve(problem: &ConvexSubproblem, tol: f64) -> Result<BackendSolution, BackendError> {
    let reduced = presolve(problem)?;
    if reduced.n == 0 {
        // Everything pinned by equalities.
        let point = reduced.expand(&[]);
        let objective = dot(&problem.objective, &point);
        return Ok(BackendSolution {
            point,
            objective,
            gap_bound: 0.0,
            newton_steps: 0,
            relaxation: 0.0,
        });
    }

    let mut cons = reduced.cons.clone();
    let mut start = reduced.start.clone();
    project_onto_equalities(&reduced, &mut start)?;

    let mut relaxation = 0.0;
    let worst = max_violation(&cons, &start);
    if !(worst.0 < -1e-11) {
        let (feas_point, relax) = phase1(&reduced, &cons, &start)?;
        start = feas_point;
        relaxation = relax;
        if relax > 0.0 {
            for c in &mut cons {
                c.expr.constant -= relax;
            }
        }
    }

    let objective_min: Vec<f64> = reduced.objective.iter().map(|c| -c).collect();
    let (mut point, gap, steps) = barrier(&reduced, &cons, &objective_min, start, tol, None)?;
    // Newton keeps the equalities only up to LU roundoff; polish them exactly.
    project_onto_equalities(&reduced, &mut point)?;
    let full = reduced.expand(&point);
    let objective = dot(&problem.objective, &full);
    Ok(BackendSolution { point: full, objective, gap_bound: gap, newton_steps: steps, relaxation })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn max_violation(cons: &[Constraint], v: &[f64]) -> (f64, usize) {
    let mut worst = (f64::NEG_INFINITY, 0);
    for (i, c) in cons.iter().enumerate() {
        let val = c.expr.value(v);
        if val > worst.0 {
            worst = (val, i);
        }
    }
    worst
}

// ---------------------------------------------------------------------------
// Presolve: eliminate variables pinned by singleton equality rows.
// ---------------------------------------------------------------------------

struct Reduced {
    n: usize,
    full_n: usize,
    fixed: Vec<Option<f64>>,
    to_reduced: Vec<Option<usize>>,
    objective: Vec<f64>,
    cons: Vec<Constraint>,
    eq_a: DMatrix<f64>,
    eq_b: DVector<f64>,
    start: Vec<f64>,
}

impl Reduced {
    fn expand(&self, v: &[f64]) -> Vec<f64> {
        (0..self.full_n)
            .map(|i| match self.fixed[i] {
                Some(val) => val,
                None => v[self.to_reduced[i].unwrap()],
            })
            .collect()
    }
}

fn presolve(problem: &ConvexSubproblem) -> Result<Reduced, BackendError> {
    let n = problem.num_vars;
    let mut fixed: Vec<Option<f64>> = vec![None; n];
    let rows: Vec<(Vec<(usize, f64)>, f64)> = problem.equalities.clone();
    let mut consumed = vec![false; rows.len()];

    loop {
        let mut changed = false;
        for (r, (coeffs, rhs)) in rows.iter().enumerate() {
            if consumed[r] {
                continue;
            }
            let mut free: Vec<(usize, f64)> = Vec::new();
            let mut adj = *rhs;
            for &(i, c) in coeffs {
                match fixed[i] {
                    Some(val) => adj -= c * val,
                    None => free.push((i, c)),
                }
            }
            match free.len() {
                0 => {
                    if adj.abs() > 1e-8 {
                        return Err(BackendError::Infeasible {
                            label: format!("equality row {r}"),
                            violation: adj.abs(),
                            best_point: problem.start.clone(),
                        });
                    }
                    consumed[r] = true;
                    changed = true;
                }
                1 => {
                    let (i, c) = free[0];
                    if c.abs() < 1e-14 {
                        return Err(BackendError::Numerical(format!(
                            "equality row {r} has a near-zero pivot"
                        )));
                    }
                    fixed[i] = Some(adj / c);
                    consumed[r] = true;
                    changed = true;
                }
                _ => {}
            }
        }
        if !changed {
            break;
        }
    }

    let mut to_reduced = vec![None; n];
    let mut to_full = Vec::new();
    for i in 0..n {
        if fixed[i].is_none() {
            to_reduced[i] = Some(to_full.len());
            to_full.push(i);
        }
    }
    let nr = to_full.len();

    let reduce_affine = |coeffs: &[(usize, f64)], constant: f64| -> Affine {
        let mut out = Affine { coeffs: Vec::new(), constant };
        for &(i, c) in coeffs {
            match fixed[i] {
                Some(val) => out.constant += c * val,
                None => out.coeffs.push((to_reduced[i].unwrap(), c)),
            }
        }
        out
    };

    let mut cons = Vec::new();
    for c in &problem.constraints {
        let lin = reduce_affine(&c.expr.linear, c.expr.constant);
        let mut expr =
            ConvexExpr { constant: lin.constant, linear: lin.coeffs, ..Default::default() };
        for q in &c.expr.quadratic {
            match fixed[q.var] {
                Some(val) => expr.constant += q.weight * (val - q.shift).powi(2),
                None => expr.quadratic.push(QuadTerm {
                    var: to_reduced[q.var].unwrap(),
                    weight: q.weight,
                    shift: q.shift,
                }),
            }
        }
        for l in &c.expr.neg_logs {
            let affine = reduce_affine(&l.affine.coeffs, l.affine.constant);
            if affine.coeffs.is_empty() {
                if affine.constant <= 0.0 {
                    return Err(BackendError::Infeasible {
                        label: format!("{} (log domain)", c.label),
                        violation: -affine.constant,
                        best_point: problem.start.clone(),
                    });
                }
                expr.constant -= l.weight * affine.constant.ln();
            } else {
                expr.neg_logs.push(NegLogTerm { weight: l.weight, affine });
            }
        }
        let is_constant =
            expr.linear.is_empty() && expr.quadratic.is_empty() && expr.neg_logs.is_empty();
        if is_constant {
            if expr.constant > FEAS_EPS {
                return Err(BackendError::Infeasible {
                    label: c.label.clone(),
                    violation: expr.constant,
                    best_point: problem.start.clone(),
                });
            }
            continue;
        }
        cons.push(Constraint { expr, label: c.label.clone() });
    }

    let kept: Vec<&(Vec<(usize, f64)>, f64)> = rows
        .iter()
        .enumerate()
        .filter(|(r, _)| !consumed[*r])
        .map(|(_, row)| row)
        .collect();
    let mut eq_a = DMatrix::zeros(kept.len(), nr);
    let mut eq_b = DVector::zeros(kept.len());
    for (r, (coeffs, rhs)) in kept.iter().enumerate() {
        let mut adj = *rhs;
        for &(i, c) in coeffs {
            match fixed[i] {
                Some(val) => adj -= c * val,
                None => eq_a[(r, to_reduced[i].unwrap())] += c,
            }
        }
        eq_b[r] = adj;
    }

    let mut objective = vec![0.0; nr];
    for i in 0..n {
        if let Some(ri) = to_reduced[i] {
            objective[ri] = problem.objective[i];
        }
    }
    let start: Vec<f64> = to_full.iter().map(|&i| problem.start[i]).collect();

    Ok(Reduced {
        n: nr,
        full_n: n,
        fixed,
        to_reduced,
        objective,
        cons,
        eq_a,
        eq_b,
        start,
    })
}

fn project_onto_equalities(reduced: &Reduced, v: &mut [f64]) -> Result<(), BackendError> {
    let p = reduced.eq_a.nrows();
    if p == 0 {
        return Ok(());
    }
    let vv = DVector::from_column_slice(v);
    let resid = &reduced.eq_b - &reduced.eq_a * &vv;
    if resid.amax() < 1e-12 {
        return Ok(());
    }
    let gram = &reduced.eq_a * reduced.eq_a.transpose();
    let corr = gram
        .lu()
        .solve(&resid)
        .ok_or_else(|| BackendError::Numerical("rank-deficient equality system".into()))?;
    let delta = reduced.eq_a.transpose() * corr;
    for i in 0..v.len() {
        v[i] += delta[i];
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Phase I: find a strictly feasible point (or certify infeasibility).
// ---------------------------------------------------------------------------

fn phase1(
    reduced: &Reduced,
    cons: &[Constraint],
    start: &[f64],
) -> Result<(Vec<f64>, f64), BackendError> {
    let n = reduced.n;
    // Augmented problem over (v, s): minimize s s.t. f_i(v) − s ≤ 0.
    let mut aug_cons = Vec::with_capacity(cons.len() + 1);
    for c in cons {
        let mut expr = c.expr.clone();
        expr.linear.push((n, -1.0));
        aug_cons.push(Constraint { expr, label: c.label.clone() });
    }
    let (worst0, _) = max_violation(cons, start);
    if !worst0.is_finite() {
        return Err(BackendError::Numerical("start point violates a log domain".into()));
    }
    let mut aug_start = start.to_vec();
    aug_start.push(worst0 + 1.0);

    // Variables without objective weight (epigraph rows' t, say) would let
    // the phase-I analytic center escape to infinity; a huge ball around the
    // start keeps it finite without affecting the verdict.
    let mut cage = ConvexExpr { constant: -1e14, ..Default::default() };
    for (i, &v0) in aug_start.iter().enumerate() {
        cage.quadratic.push(QuadTerm { var: i, weight: 1.0, shift: v0 });
    }
    aug_cons.push(Constraint { expr: cage, label: "phase-1 cage".into() });

    let aug_reduced = Reduced {
        n: n + 1,
        full_n: n + 1,
        fixed: vec![None; n + 1],
        to_reduced: (0..n + 1).map(Some).collect(),
        objective: Vec::new(),
        cons: Vec::new(),
        eq_a: {
            let mut a = DMatrix::zeros(reduced.eq_a.nrows(), n + 1);
            a.view_mut((0, 0), (reduced.eq_a.nrows(), n)).copy_from(&reduced.eq_a);
            a
        },
        eq_b: reduced.eq_b.clone(),
        start: aug_start.clone(),
    };

    let mut f0 = vec![0.0; n + 1];
    f0[n] = 1.0;

    // Stop as soon as some iterate is comfortably interior.
    let early = |v: &[f64]| max_violation(cons, &v[..n]).0 <= -FEAS_EPS;
    let (point, _, _) = barrier(&aug_reduced, &aug_cons, &f0, aug_start, 1e-9, Some(&early))?;

    let (maxf, worst_idx) = max_violation(cons, &point[..n]);
    if maxf <= -FEAS_EPS {
        return Ok((point[..n].to_vec(), 0.0));
    }
    if maxf > FEAS_EPS {
        return Err(BackendError::Infeasible {
            label: cons[worst_idx].label.clone(),
            violation: maxf,
            best_point: reduced.expand(&point[..n]),
        });
    }
    // Empty (or numerically empty) strict interior: relax uniformly.
    Ok((point[..n].to_vec(), maxf + FEAS_EPS))
}

// ---------------------------------------------------------------------------
// Barrier method with equality-constrained Newton centering.
// ---------------------------------------------------------------------------

fn barrier(
    reduced: &Reduced,
    cons: &[Constraint],
    f0: &[f64],
    start: Vec<f64>,
    tol: f64,
    early_exit: Option<&dyn Fn(&[f64]) -> bool>,
) -> Result<(Vec<f64>, f64, usize), BackendError> {
    let n = start.len();
    let p = reduced.eq_a.nrows();
    let m = cons.len() as f64;
    if cons.is_empty() {
        return Err(BackendError::Numerical("no inequality constraints".into()));
    }

    let mut v = start;
    let mut t = 1.0;
    let mut total_steps = 0usize;

    let barrier_value = |t: f64, v: &[f64]| -> f64 {
        let mut val = t * dot(f0, v);
        for c in cons {
            let f = c.expr.value(v);
            if f >= 0.0 {
                return f64::INFINITY;
            }
            val -= (-f).ln();
        }
        val
    };

    loop {
        // Centering at the current barrier parameter.
        for _ in 0..MAX_NEWTON_PER_CENTER {
            total_steps += 1;
            if total_steps > MAX_TOTAL_NEWTON {
                return Err(BackendError::IterationLimit);
            }

            let mut grad = vec![0.0; n];
            for (i, g) in grad.iter_mut().enumerate() {
                *g = t * f0[i];
            }
            let mut hess = DMatrix::zeros(n, n);
            let mut cgrad = vec![0.0; n];
            for c in cons {
                let f = c.expr.value(&v);
                if !(f < 0.0) {
                    return Err(BackendError::Numerical(format!(
                        "iterate left the interior at `{}`",
                        c.label
                    )));
                }
                cgrad.iter_mut().for_each(|x| *x = 0.0);
                c.expr.grad_into(&v, &mut cgrad);
                let inv = -1.0 / f;
                for i in 0..n {
                    grad[i] += inv * cgrad[i];
                }
                c.expr.hess_into(&v, &cgrad, 1.0 / (f * f), inv, &mut hess);
            }

            // KKT system [[H, Aᵀ], [A, 0]].
            let dim = n + p;
            let mut kkt = DMatrix::zeros(dim, dim);
            kkt.view_mut((0, 0), (n, n)).copy_from(&hess);
            if p > 0 {
                kkt.view_mut((0, n), (n, p)).copy_from(&reduced.eq_a.transpose());
                kkt.view_mut((n, 0), (p, n)).copy_from(&reduced.eq_a);
            }
            let mut rhs = DVector::zeros(dim);
            for i in 0..n {
                rhs[i] = -grad[i];
            }

            // Symmetric equilibration keeps pivots usable despite the
            // wildly mixed scales near the end of the barrier path.
            let mut scale = vec![1.0; dim];
            for (i, s) in scale.iter_mut().enumerate() {
                let maxabs = (0..dim).map(|j| kkt[(i, j)].abs()).fold(0.0, f64::max);
                if maxabs > 0.0 {
                    *s = 1.0 / maxabs.sqrt();
                }
            }
            for i in 0..dim {
                for j in 0..dim {
                    kkt[(i, j)] *= scale[i] * scale[j];
                }
            }
            for i in 0..dim {
                rhs[i] *= scale[i];
            }
            let mut step = kkt.clone().lu().solve(&rhs);
            if step.is_none() {
                // Regularize a singular KKT matrix.
                for i in 0..n {
                    kkt[(i, i)] += 1e-10;
                }
                step = kkt.lu().solve(&rhs);
            }
            let step =
                step.ok_or_else(|| BackendError::Numerical("singular KKT system".into()))?;
            let d: Vec<f64> = (0..n).map(|i| step[i] * scale[i]).collect();

            let decrement_sq: f64 = {
                let hd = &hess * DVector::from_column_slice(&d);
                d.iter().zip(hd.iter()).map(|(a, b)| a * b).sum()
            };
            if decrement_sq / 2.0 <= NEWTON_TOL {
                break;
            }

            // Backtracking line search with a domain guard.
            let g_dot_d = dot(&grad, &d);
            let phi0 = barrier_value(t, &v);
            let mut alpha = 1.0;
            let mut accepted = false;
            for _ in 0..60 {
                let trial: Vec<f64> = v.iter().zip(&d).map(|(x, dx)| x + alpha * dx).collect();
                let phi = barrier_value(t, &trial);
                if phi.is_finite() && phi <= phi0 + 0.01 * alpha * g_dot_d {
                    v = trial;
                    accepted = true;
                    break;
                }
                alpha *= 0.5;
            }
            if !accepted {
                break; // Stalled at numerical precision.
            }
            if v.iter().any(|x| x.abs() > 1e12) {
                return Err(BackendError::Unbounded);
            }
            if let Some(cb) = early_exit {
                if cb(&v) {
                    return Ok((v, m / t, total_steps));
                }
            }
        }

        let gap = m / t;
        if gap <= tol {
            return Ok((v, gap, total_steps));
        }
        t *= MU;
    }
}
