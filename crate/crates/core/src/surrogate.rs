//! Surrogate models for the alternating optimization: expansion points,
//! the concave position model, the power/association model and the
//! integrality penalty.
//!
//! An [`ExpansionPoint`] freezes everything nonlinear at the incumbent:
//! per-link LoS states (hence path-loss exponents and reference gains),
//! served sets and their decoding order, the weakest served user of every
//! UAV, and the first-order coefficients of the rate terms. Surrogates built
//! from it are exact in value and gradient at the expansion point.
//!
//! The position model writes every rate term as an affine function of the
//! squared link distances `y = ‖x_m − u‖²` and then splits terms by the sign
//! of their net coefficient: concave directions stay quadratic, convex
//! directions are linearized at the expansion point. The power/association
//! model keeps the exact concave log terms in P, replaces the subtracted
//! (concave) interference logs by their global first-order upper bounds, and
//! is affine in the association variables.

use thiserror::Error;

use crate::channel::{LinkState, PropagationParams};
use crate::geometry::Point3;
use crate::rsma::{Association, GainTable, NetworkState, PowerAllocation};

#[derive(Debug, Error, PartialEq)]
pub enum SurrogateError {
    #[error("zero distance between user {user} and UAV {uav}")]
    ZeroDistance { user: usize, uav: usize },
    #[error("association must be binary to build an expansion point")]
    NonBinaryAssociation,
    #[error("penalty multiplier ({user}, {uav}) = {value} is negative")]
    NegativeMultiplier { user: usize, uav: usize, value: f64 },
}

/// Penalty multipliers λ_{k,m}, indexed `[user][uav]`.
pub type Multipliers = Vec<Vec<f64>>;

const LN2: f64 = std::f64::consts::LN_2;

fn log2_1p(x: f64) -> f64 {
    x.ln_1p() / LN2
}

/// Frozen incumbent with cached gains, link states and surrogate
/// coefficients.
#[derive(Debug, Clone)]
pub struct ExpansionPoint {
    pub positions: Vec<Point3>,
    pub users: Vec<Point3>,
    pub power: PowerAllocation,
    pub assoc: Association,
    pub lambda: Multipliers,
    pub sigma2: f64,
    /// When false the common stream is dropped everywhere (NOMA mode).
    pub use_common: bool,

    /// Served users per UAV in decoding order (decreasing gain, id tiebreak).
    pub served: Vec<Vec<usize>>,
    /// Serving UAV per user.
    pub server: Vec<Option<usize>>,
    /// Weakest served user per UAV (argmin gain).
    pub weakest: Vec<Option<usize>>,

    pub states: Vec<Vec<LinkState>>,
    pub alpha: Vec<Vec<f64>>,
    pub beta: Vec<Vec<f64>>,
    /// Gains at the expansion positions, `β/dᵅ`.
    pub gains: Vec<Vec<f64>>,

    /// Total σ²-normalized transmit power per UAV.
    pub w_total: Vec<f64>,
    /// σ²-normalized served private power per UAV.
    pub own_private: Vec<f64>,
    /// σ²-normalized private power decoded after user k at UAV m.
    pub after: Vec<Vec<f64>>,
    /// `after + p_{k,m}/σ²`.
    pub post: Vec<Vec<f64>>,
    /// Σ_m w_total·g_k(x_m).
    pub p_total: Vec<f64>,
    /// Interference (σ²-normalized) from all UAVs other than m.
    pub i_other: Vec<Vec<f64>>,

    /// First-order gain coefficient φ = αβ / (2 d^{2+α}).
    pub phi: Vec<Vec<f64>>,
    /// c / (ln2 (1 + P_total)).
    pub theta_hat: Vec<Vec<f64>>,
    /// c / (ln2 (1 + ownPrivate·g + I_other)); used at the weakest user.
    pub theta_c: Vec<Vec<f64>>,
    /// c / (ln2 (1 + after·g + I_other)).
    pub theta_p: Vec<Vec<f64>>,
    /// c / (ln2 (1 + post·g + I_other)); post-cancellation counterpart.
    pub theta_hat_post: Vec<Vec<f64>>,
}

impl ExpansionPoint {
    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_uavs(&self) -> usize {
        self.positions.len()
    }

    /// Frozen-state rate of every user at the expansion point itself.
    pub fn frozen_rates(&self) -> Vec<f64> {
        self.frozen_rates_at_positions(&self.positions)
    }

    /// Frozen-state rate as a function of UAV positions: gains follow
    /// `β/dᵅ` with frozen (α, β), everything else (powers, served sets,
    /// decoding order) stays pinned. The common stream re-binds at the worst
    /// served user.
    pub fn frozen_rates_at_positions(&self, positions: &[Point3]) -> Vec<f64> {
        self.rates_from(&self.gains_at(positions), &self.power, false)
    }

    /// Like [`Self::frozen_rates_at_positions`] but with the common stream
    /// pinned at the expansion point's binding user; this is the smooth
    /// branch the iteration optimizes and the reference for gradient checks.
    pub fn pinned_rates_at_positions(&self, positions: &[Point3]) -> Vec<f64> {
        self.rates_from(&self.gains_at(positions), &self.power, true)
    }

    fn gains_at(&self, positions: &[Point3]) -> Vec<Vec<f64>> {
        (0..self.num_users())
            .map(|k| {
                (0..self.num_uavs())
                    .map(|m| {
                        let d = positions[m].distance(self.users[k]);
                        self.beta[k][m] / d.powf(self.alpha[k][m])
                    })
                    .collect()
            })
            .collect()
    }

    /// Frozen-state rate as a function of P at the expansion positions.
    pub fn frozen_rates_with_power(&self, power: &PowerAllocation) -> Vec<f64> {
        self.rates_from(&self.gains, power, false)
    }

    /// Rate of every user under frozen served sets and decoding order; the
    /// common part either re-binds at the worst served user or stays pinned
    /// at the expansion point's binding user.
    fn rates_from(&self, g: &[Vec<f64>], power: &PowerAllocation, pin_binding: bool) -> Vec<f64> {
        let num_users = self.num_users();
        let num_uavs = self.num_uavs();
        let w_total: Vec<f64> = (0..num_uavs)
            .map(|m| {
                let mut p = power.common[m];
                for &j in &self.served[m] {
                    p += power.private[j][m];
                }
                p / self.sigma2
            })
            .collect();
        let p_total = |k: usize| -> f64 { (0..num_uavs).map(|m| w_total[m] * g[k][m]).sum() };

        (0..num_users)
            .map(|k| {
                let Some(s) = self.server[k] else { return 0.0 };
                let io_at = |kk: usize| p_total(kk) - w_total[s] * g[kk][s];
                let mut rate = 0.0;
                if self.use_common && !self.served[s].is_empty() {
                    let own: f64 = self.served[s]
                        .iter()
                        .map(|&j| power.private[j][s])
                        .sum::<f64>()
                        / self.sigma2;
                    let branch =
                        |j: usize| log2_1p(p_total(j)) - log2_1p(own * g[j][s] + io_at(j));
                    let common = if pin_binding {
                        branch(self.weakest[s].expect("nonempty served set"))
                    } else {
                        // The common rate binds at the worst served user.
                        self.served[s]
                            .iter()
                            .map(|&j| branch(j))
                            .fold(f64::INFINITY, f64::min)
                    };
                    rate += common / self.served[s].len() as f64;
                }
                let after: f64 = self
                    .after_set(k, s)
                    .map(|j| power.private[j][s])
                    .sum::<f64>()
                    / self.sigma2;
                let own_k = power.private[k][s] / self.sigma2;
                rate += log2_1p((own_k + after) * g[k][s] + io_at(k))
                    - log2_1p(after * g[k][s] + io_at(k));
                rate
            })
            .collect()
    }

    /// Served users of `m` decoded after `k` under the frozen order.
    fn after_set(&self, k: usize, m: usize) -> impl Iterator<Item = usize> + '_ {
        let gk = self.gains[k][m];
        self.served[m]
            .iter()
            .cloned()
            .filter(move |&j| {
                j != k && (self.gains[j][m] < gk || (self.gains[j][m] == gk && j > k))
            })
    }
}

/// Builds an expansion point. The gain table supplies the frozen link states
/// and noise power; gains are recomputed as raw `β/dᵅ` so that surrogate
/// coefficients and anchors are mutually consistent.
pub fn build_expansion(
    state: &NetworkState,
    users: &[Point3],
    table: &GainTable,
    params: &PropagationParams,
    lambda: &Multipliers,
    use_common: bool,
) -> Result<ExpansionPoint, SurrogateError> {
    if !state.assoc.is_binary() {
        return Err(SurrogateError::NonBinaryAssociation);
    }
    let num_users = state.num_users();
    let num_uavs = state.num_uavs();
    let sigma2 = table.noise_power;

    let mut alpha = vec![vec![0.0; num_uavs]; num_users];
    let mut beta = vec![vec![0.0; num_uavs]; num_users];
    let mut gains = vec![vec![0.0; num_uavs]; num_users];
    let mut phi = vec![vec![0.0; num_uavs]; num_users];
    for k in 0..num_users {
        for m in 0..num_uavs {
            let st = table.states[k][m];
            let a = params.alpha(st);
            let b = params.beta(st);
            let d = state.positions[m].distance(users[k]);
            if d == 0.0 {
                return Err(SurrogateError::ZeroDistance { user: k, uav: m });
            }
            alpha[k][m] = a;
            beta[k][m] = b;
            gains[k][m] = b / d.powf(a);
            phi[k][m] = a * b / (2.0 * d.powf(2.0 + a));
        }
    }

    let server: Vec<Option<usize>> = (0..num_users).map(|k| state.assoc.server(k)).collect();
    let mut served: Vec<Vec<usize>> = vec![Vec::new(); num_uavs];
    for (k, &srv) in server.iter().enumerate() {
        if let Some(m) = srv {
            served[m].push(k);
        }
    }
    for (m, list) in served.iter_mut().enumerate() {
        list.sort_by(|&a, &b| gains[b][m].partial_cmp(&gains[a][m]).unwrap().then(a.cmp(&b)));
    }

    let w_total: Vec<f64> = (0..num_uavs)
        .map(|m| {
            let mut p = state.power.common[m];
            for &j in &served[m] {
                p += state.power.private[j][m];
            }
            p / sigma2
        })
        .collect();
    let own_private: Vec<f64> = (0..num_uavs)
        .map(|m| served[m].iter().map(|&j| state.power.private[j][m]).sum::<f64>() / sigma2)
        .collect();

    let p_total: Vec<f64> = (0..num_users)
        .map(|k| (0..num_uavs).map(|m| w_total[m] * gains[k][m]).sum())
        .collect();

    // The served user whose common-stream SINR binds the min rule at the
    // expansion point: argmin over K_m of g / (1 + ownPrivate·g + I_other).
    // With symmetric interference this is the weakest-gain user; with
    // obstacle-shaped interference the two can differ, and tracking the
    // binding user keeps the surrogate anchored to the true common rate.
    let weakest: Vec<Option<usize>> = (0..num_uavs)
        .map(|m| {
            served[m]
                .iter()
                .cloned()
                .min_by(|&a, &b| {
                    let score = |j: usize| {
                        let g = gains[j][m];
                        let io = p_total[j] - w_total[m] * g;
                        g / (1.0 + own_private[m] * g + io)
                    };
                    score(a).partial_cmp(&score(b)).unwrap().then(a.cmp(&b))
                })
        })
        .collect();

    let mut after = vec![vec![0.0; num_uavs]; num_users];
    let mut post = vec![vec![0.0; num_uavs]; num_users];
    let mut i_other = vec![vec![0.0; num_uavs]; num_users];
    let mut theta_hat = vec![vec![0.0; num_uavs]; num_users];
    let mut theta_c = vec![vec![0.0; num_uavs]; num_users];
    let mut theta_p = vec![vec![0.0; num_uavs]; num_users];
    let mut theta_hat_post = vec![vec![0.0; num_uavs]; num_users];

    for k in 0..num_users {
        for m in 0..num_uavs {
            let gk = gains[k][m];
            let aft: f64 = served[m]
                .iter()
                .filter(|&&j| j != k && (gains[j][m] < gk || (gains[j][m] == gk && j > k)))
                .map(|&j| state.power.private[j][m])
                .sum::<f64>()
                / sigma2;
            after[k][m] = aft;
            post[k][m] = aft + state.power.private[k][m] / sigma2;
            i_other[k][m] = p_total[k] - w_total[m] * gk;

            let c = state.assoc.values[k][m];
            theta_hat[k][m] = c / (LN2 * (1.0 + p_total[k]));
            theta_c[k][m] = c / (LN2 * (1.0 + own_private[m] * gk + i_other[k][m]));
            theta_p[k][m] = c / (LN2 * (1.0 + aft * gk + i_other[k][m]));
            theta_hat_post[k][m] = c / (LN2 * (1.0 + post[k][m] * gk + i_other[k][m]));
        }
    }

    Ok(ExpansionPoint {
        positions: state.positions.clone(),
        users: users.to_vec(),
        power: state.power.clone(),
        assoc: state.assoc.clone(),
        lambda: lambda.clone(),
        sigma2,
        use_common,
        served,
        server,
        weakest,
        states: table.states.clone(),
        alpha,
        beta,
        gains,
        w_total,
        own_private,
        after,
        post,
        p_total,
        i_other,
        phi,
        theta_hat,
        theta_c,
        theta_p,
        theta_hat_post,
    })
}

// ---------------------------------------------------------------------------
// Position surrogate
// ---------------------------------------------------------------------------

/// Concave quadratic form over all UAV positions:
/// `constant + Σ_m quad[m]·‖x_m‖² + linear[m]·x_m`, quad ≤ 0.
#[derive(Debug, Clone)]
pub struct PositionModel {
    pub constant: f64,
    pub quad: Vec<f64>,
    pub linear: Vec<Point3>,
}

impl PositionModel {
    fn zeros(constant: f64, num_uavs: usize) -> Self {
        Self {
            constant,
            quad: vec![0.0; num_uavs],
            linear: vec![Point3::new(0.0, 0.0, 0.0); num_uavs],
        }
    }

    pub fn value(&self, positions: &[Point3]) -> f64 {
        let mut v = self.constant;
        for (m, x) in positions.iter().enumerate() {
            v += self.quad[m] * x.norm_sq() + self.linear[m].dot(*x);
        }
        v
    }

    pub fn gradient(&self, positions: &[Point3]) -> Vec<Point3> {
        positions
            .iter()
            .enumerate()
            .map(|(m, x)| x.scale(2.0 * self.quad[m]).add(self.linear[m]))
            .collect()
    }
}

/// Concave position model of the whole network: a private-rate model per
/// user plus, per UAV, one common-rate candidate per served user. A UAV's
/// common rate is the minimum of its candidates, so the model never
/// overestimates the common stream when the binding user changes inside the
/// trust region.
#[derive(Debug, Clone)]
pub struct PositionSurrogate {
    pub private: Vec<PositionModel>,
    /// `common[m]` holds one candidate per served user of UAV m.
    pub common: Vec<Vec<PositionModel>>,
    /// Index of the binding candidate per UAV at the expansion point.
    pub binding: Vec<Option<usize>>,
    pub server: Vec<Option<usize>>,
    pub served_count: Vec<usize>,
    pub use_common: bool,
}

impl PositionSurrogate {
    /// Modeled common rate of one UAV (min over its candidates).
    pub fn common_value(&self, m: usize, positions: &[Point3]) -> f64 {
        self.common[m]
            .iter()
            .map(|c| c.value(positions))
            .fold(f64::INFINITY, f64::min)
    }

    /// Modeled rate of one user.
    pub fn user_value(&self, k: usize, positions: &[Point3]) -> f64 {
        let Some(s) = self.server[k] else { return 0.0 };
        let mut v = self.private[k].value(positions);
        if self.use_common && !self.common[s].is_empty() {
            v += self.common_value(s, positions) / self.served_count[s] as f64;
        }
        v
    }

    /// Gradient of the modeled rate along the binding common candidate (the
    /// branch frozen for the iteration).
    pub fn user_gradient(&self, k: usize, positions: &[Point3]) -> Vec<Point3> {
        let Some(s) = self.server[k] else {
            return vec![Point3::new(0.0, 0.0, 0.0); self.private[k].quad.len()];
        };
        let mut grad = self.private[k].gradient(positions);
        if self.use_common && !self.common[s].is_empty() {
            let active = &self.common[s][self.binding[s].expect("binding candidate")];
            let scale = 1.0 / self.served_count[s] as f64;
            for (g, c) in grad.iter_mut().zip(active.gradient(positions)) {
                *g = g.add(c.scale(scale));
            }
        }
        grad
    }

    pub fn min_value(&self, positions: &[Point3]) -> f64 {
        (0..self.private.len())
            .map(|k| self.user_value(k, positions))
            .fold(f64::INFINITY, f64::min)
    }
}

/// Splits the per-(UAV, reference-user) coefficients on `(y_t − y(x_m))` by
/// sign: concave directions stay quadratic, convex ones are linearized at
/// the expansion point. Exact in value and gradient there.
fn assemble_position_model(
    exp: &ExpansionPoint,
    anchor: f64,
    coeffs: &[(usize, usize, f64)],
) -> PositionModel {
    let mut model = PositionModel::zeros(anchor, exp.num_uavs());
    for &(m, w, b) in coeffs {
        let u = exp.users[w];
        let xt = exp.positions[m];
        let y_t = xt.sub(u).norm_sq();
        if b > 0.0 {
            // b·(y_t − ‖x − u‖²) stays concave in x.
            model.quad[m] -= b;
            model.linear[m] = model.linear[m].add(u.scale(2.0 * b));
            model.constant += b * (y_t - u.norm_sq());
        } else if b < 0.0 {
            // Convex direction: replace y by its linearization at x_t.
            let grad = xt.sub(u).scale(2.0);
            model.linear[m] = model.linear[m].add(grad.scale(-b));
            model.constant += b * grad.dot(xt);
        }
    }
    model
}

fn add_coeff(coeffs: &mut Vec<(usize, usize, f64)>, m: usize, w: usize, b: f64) {
    if b == 0.0 {
        return;
    }
    if let Some(e) = coeffs.iter_mut().find(|e| e.0 == m && e.1 == w) {
        e.2 += b;
    } else {
        coeffs.push((m, w, b));
    }
}

/// Assembles the concave position model at the expansion point.
pub fn position_surrogate(exp: &ExpansionPoint) -> PositionSurrogate {
    let num_users = exp.num_users();
    let num_uavs = exp.num_uavs();

    // Private part of every user: post-cancellation hat minus the residual
    // interference bound.
    let private = (0..num_users)
        .map(|k| {
            let Some(s) = exp.server[k] else {
                return PositionModel::zeros(0.0, num_uavs);
            };
            let anchor = log2_1p(exp.post[k][s] * exp.gains[k][s] + exp.i_other[k][s])
                - log2_1p(exp.after[k][s] * exp.gains[k][s] + exp.i_other[k][s]);
            let th_post = exp.theta_hat_post[k][s];
            let th_p = exp.theta_p[k][s];
            let mut coeffs = Vec::new();
            for m in 0..num_uavs {
                let w_hat = if m == s { exp.post[k][s] } else { exp.w_total[m] };
                add_coeff(&mut coeffs, m, k, th_post * exp.phi[k][m] * w_hat);
                let w_bar = if m == s { exp.after[k][s] } else { exp.w_total[m] };
                add_coeff(&mut coeffs, m, k, -th_p * exp.phi[k][m] * w_bar);
            }
            assemble_position_model(exp, anchor, &coeffs)
        })
        .collect();

    // Common-rate candidates: the total-power hat minus the own-private-plus-
    // interference bound, expanded at each served user.
    let common = (0..num_uavs)
        .map(|m| {
            if !exp.use_common {
                return Vec::new();
            }
            exp.served[m]
                .iter()
                .map(|&j| {
                    let anchor = log2_1p(exp.p_total[j])
                        - log2_1p(exp.own_private[m] * exp.gains[j][m] + exp.i_other[j][m]);
                    let th_hat = 1.0 / (LN2 * (1.0 + exp.p_total[j]));
                    let th_c = exp.theta_c[j][m];
                    let mut coeffs = Vec::new();
                    for mp in 0..num_uavs {
                        add_coeff(&mut coeffs, mp, j, th_hat * exp.phi[j][mp] * exp.w_total[mp]);
                        let w = if mp == m { exp.own_private[m] } else { exp.w_total[mp] };
                        add_coeff(&mut coeffs, mp, j, -th_c * exp.phi[j][mp] * w);
                    }
                    assemble_position_model(exp, anchor, &coeffs)
                })
                .collect()
        })
        .collect();

    let binding = (0..num_uavs)
        .map(|m| {
            exp.weakest[m]
                .map(|ks| exp.served[m].iter().position(|&j| j == ks).expect("binding served"))
        })
        .collect();
    PositionSurrogate {
        private,
        common,
        binding,
        server: exp.server.clone(),
        served_count: exp.served.iter().map(|s| s.len()).collect(),
        use_common: exp.use_common,
    }
}

// ---------------------------------------------------------------------------
// Power/association surrogate
// ---------------------------------------------------------------------------

/// Affine form over the power variables.
#[derive(Debug, Clone, Default)]
pub struct AffinePower {
    pub constant: f64,
    /// Coefficient per UAV on p_{c,m}.
    pub common: Vec<f64>,
    /// (user, uav, coefficient) on p_{k,m}.
    pub private: Vec<(usize, usize, f64)>,
}

impl AffinePower {
    fn zeros(num_uavs: usize) -> Self {
        Self { constant: 0.0, common: vec![0.0; num_uavs], private: Vec::new() }
    }

    fn add_private(&mut self, k: usize, m: usize, c: f64) {
        if let Some(e) = self.private.iter_mut().find(|e| e.0 == k && e.1 == m) {
            e.2 += c;
        } else {
            self.private.push((k, m, c));
        }
    }

    pub fn eval(&self, p: &PowerAllocation) -> f64 {
        let mut v = self.constant;
        for (m, c) in self.common.iter().enumerate() {
            v += c * p.common[m];
        }
        for &(k, m, c) in &self.private {
            v += c * p.private[k][m];
        }
        v
    }
}

/// One common-rate candidate of a UAV in the power step:
/// `log2(log_affine(P)) + linear(P)`.
#[derive(Debug, Clone)]
pub struct CommonPowerCandidate {
    pub user: usize,
    pub log_affine: AffinePower,
    pub linear: AffinePower,
}

impl CommonPowerCandidate {
    pub fn value(&self, power: &PowerAllocation) -> f64 {
        self.log_affine.eval(power).log2() + self.linear.eval(power)
    }
}

/// One user's private-plus-association model:
/// `constant + Σ w·log2(affine(P)) + linear(P) + Σ coeff·c_{k,m}`, plus an
/// equal share of the serving UAV's common rate.
#[derive(Debug, Clone)]
pub struct UserPowerAssocModel {
    pub constant: f64,
    /// (weight, affine) pairs, weight > 0; the log argument is `affine`.
    pub logs: Vec<(f64, AffinePower)>,
    pub linear: AffinePower,
    /// (user, uav, coefficient) on the association variables.
    pub assoc_coeffs: Vec<(usize, usize, f64)>,
    /// Serving UAV and its 1/|K_m| share factor.
    pub common_share: Option<(usize, f64)>,
}

#[derive(Debug, Clone)]
pub struct PowerAssocSurrogate {
    pub per_user: Vec<UserPowerAssocModel>,
    /// Common-rate candidates per UAV; the common rate is their minimum.
    pub common: Vec<Vec<CommonPowerCandidate>>,
    pub penalty: RhoLowerBound,
}

impl PowerAssocSurrogate {
    /// Modeled common rate of one UAV (min over candidates).
    pub fn common_value(&self, m: usize, power: &PowerAllocation) -> f64 {
        self.common[m]
            .iter()
            .map(|c| c.value(power))
            .fold(f64::INFINITY, f64::min)
    }

    /// Modeled rate of one user.
    pub fn user_value(&self, k: usize, power: &PowerAllocation, assoc: &Association) -> f64 {
        let model = &self.per_user[k];
        let mut v = model.constant + model.linear.eval(power);
        for (w, affine) in &model.logs {
            v += w * affine.eval(power).log2();
        }
        for &(ku, m, c) in &model.assoc_coeffs {
            v += c * assoc.values[ku][m];
        }
        if let Some((s, share)) = model.common_share {
            v += share * self.common_value(s, power);
        }
        v
    }

    pub fn min_user_value(&self, power: &PowerAllocation, assoc: &Association) -> f64 {
        (0..self.per_user.len())
            .map(|k| self.user_value(k, power, assoc))
            .fold(f64::INFINITY, f64::min)
    }
}

/// Total σ²-normalized received power at user `j` as an affine form of P
/// (frozen served sets).
fn received_power_affine(exp: &ExpansionPoint, j: usize, constant: f64) -> AffinePower {
    let num_uavs = exp.num_uavs();
    let mut aff = AffinePower::zeros(num_uavs);
    aff.constant = constant;
    for m in 0..num_uavs {
        let gn = exp.gains[j][m] / exp.sigma2;
        aff.common[m] += gn;
        for &u in &exp.served[m] {
            aff.add_private(u, m, gn);
        }
    }
    aff
}

/// Builds the separable power/association model at an expansion point that
/// has already been rebuilt at the updated positions.
pub fn power_assoc_surrogate(exp: &ExpansionPoint) -> PowerAssocSurrogate {
    let num_users = exp.num_users();
    let num_uavs = exp.num_uavs();
    let s2 = exp.sigma2;

    // Common rate of each UAV and would-be private rate of every pair, as
    // pure log differences at (X, P_t); these gate the association part.
    let d_common: Vec<f64> = (0..num_uavs)
        .map(|m| {
            exp.served[m]
                .iter()
                .map(|&j| {
                    log2_1p(exp.p_total[j])
                        - log2_1p(exp.own_private[m] * exp.gains[j][m] + exp.i_other[j][m])
                })
                .fold(f64::INFINITY, f64::min)
                .max(0.0)
        })
        .map(|v| if v.is_finite() { v } else { 0.0 })
        .collect();
    let d_private = |k: usize, m: usize| -> f64 {
        log2_1p(exp.post[k][m] * exp.gains[k][m] + exp.i_other[k][m])
            - log2_1p(exp.after[k][m] * exp.gains[k][m] + exp.i_other[k][m])
    };

    // Common-rate candidates per UAV.
    let common: Vec<Vec<CommonPowerCandidate>> = (0..num_uavs)
        .map(|m| {
            if !exp.use_common {
                return Vec::new();
            }
            exp.served[m]
                .iter()
                .map(|&j| {
                    let log_affine = received_power_affine(exp, j, 1.0);
                    // Taylor upper bound of the subtracted interference log.
                    let th = exp.theta_c[j][m];
                    let mut bound = AffinePower::zeros(num_uavs);
                    let gj = exp.gains[j][m] / s2;
                    for &u in &exp.served[m] {
                        bound.add_private(u, m, gj);
                    }
                    for mp in (0..num_uavs).filter(|&mp| mp != m) {
                        let gn = exp.gains[j][mp] / s2;
                        bound.common[mp] += gn;
                        for &u in &exp.served[mp] {
                            bound.add_private(u, mp, gn);
                        }
                    }
                    let anchor = bound.eval(&exp.power);
                    let r_bar_c_t =
                        log2_1p(exp.own_private[m] * exp.gains[j][m] + exp.i_other[j][m]);
                    let mut linear = AffinePower::zeros(num_uavs);
                    for mp in 0..num_uavs {
                        linear.common[mp] = -th * bound.common[mp];
                    }
                    for &(u, mp, c) in &bound.private {
                        linear.add_private(u, mp, -th * c);
                    }
                    linear.constant = th * anchor - r_bar_c_t;
                    CommonPowerCandidate { user: j, log_affine, linear }
                })
                .collect()
        })
        .collect();

    let per_user = (0..num_users)
        .map(|k| {
            let mut model = UserPowerAssocModel {
                constant: 0.0,
                logs: Vec::new(),
                linear: AffinePower::zeros(num_uavs),
                assoc_coeffs: Vec::new(),
                common_share: None,
            };

            if let Some(s) = exp.server[k] {
                let km = exp.served[s].len() as f64;
                if exp.use_common && !exp.served[s].is_empty() {
                    model.common_share = Some((s, 1.0 / km));
                }

                // Exact concave post-cancellation term.
                let mut aff = AffinePower::zeros(num_uavs);
                aff.constant = 1.0;
                let gk = exp.gains[k][s] / s2;
                aff.add_private(k, s, gk);
                for j in exp.after_set(k, s) {
                    aff.add_private(j, s, gk);
                }
                for m in (0..num_uavs).filter(|&m| m != s) {
                    let gn = exp.gains[k][m] / s2;
                    aff.common[m] += gn;
                    for &j in &exp.served[m] {
                        aff.add_private(j, m, gn);
                    }
                }
                model.logs.push((1.0, aff));

                // Subtracted residual-interference log → Taylor upper bound.
                let th = exp.theta_p[k][s];
                let mut bound = AffinePower::zeros(num_uavs);
                for j in exp.after_set(k, s) {
                    bound.add_private(j, s, gk);
                }
                for m in (0..num_uavs).filter(|&m| m != s) {
                    let gn = exp.gains[k][m] / s2;
                    bound.common[m] += gn;
                    for &j in &exp.served[m] {
                        bound.add_private(j, m, gn);
                    }
                }
                let anchor = bound.eval(&exp.power);
                let r_bar_p_t = log2_1p(exp.after[k][s] * exp.gains[k][s] + exp.i_other[k][s]);
                for m in 0..num_uavs {
                    model.linear.common[m] -= th * bound.common[m];
                }
                for &(j, m, c) in &bound.private {
                    model.linear.add_private(j, m, -th * c);
                }
                model.constant += th * anchor - r_bar_p_t;
            }

            // Association part at P_t: the user's own association gates both
            // its common share and its private rate. Zero net value at C_t.
            for m in 0..num_uavs {
                let mut coeff = d_private(k, m);
                if exp.use_common && !exp.served[m].is_empty() {
                    coeff += d_common[m] / exp.served[m].len() as f64;
                }
                if coeff != 0.0 {
                    push_assoc(&mut model.assoc_coeffs, k, m, coeff);
                    model.constant -= coeff * exp.assoc.values[k][m];
                }
            }

            model
        })
        .collect();

    let penalty = rho_lower_bound(&exp.lambda, &exp.assoc.values);
    PowerAssocSurrogate { per_user, common, penalty }
}

fn push_assoc(coeffs: &mut Vec<(usize, usize, f64)>, k: usize, m: usize, c: f64) {
    if let Some(e) = coeffs.iter_mut().find(|e| e.0 == k && e.1 == m) {
        e.2 += c;
    } else {
        coeffs.push((k, m, c));
    }
}

// ---------------------------------------------------------------------------
// Integrality penalty
// ---------------------------------------------------------------------------

/// Linear minorant of the penalty: `Σ λ (cᵗ(2c − cᵗ) − c)`.
#[derive(Debug, Clone)]
pub struct RhoLowerBound {
    /// Coefficient per (user, uav) on c.
    pub coeffs: Vec<Vec<f64>>,
    pub constant: f64,
}

impl RhoLowerBound {
    pub fn value(&self, assoc_values: &[Vec<f64>]) -> f64 {
        let mut v = self.constant;
        for (k, row) in self.coeffs.iter().enumerate() {
            for (m, c) in row.iter().enumerate() {
                v += c * assoc_values[k][m];
            }
        }
        v
    }
}

/// Exact penalty value ρ(Λ, C) = −Σ λ c (1 − c).
pub fn rho_value(lambda: &Multipliers, assoc_values: &[Vec<f64>]) -> f64 {
    let mut v = 0.0;
    for (k, row) in lambda.iter().enumerate() {
        for (m, &l) in row.iter().enumerate() {
            let c = assoc_values[k][m];
            v -= l * c * (1.0 - c);
        }
    }
    v
}

fn rho_lower_bound(lambda: &Multipliers, c_t: &[Vec<f64>]) -> RhoLowerBound {
    let mut constant = 0.0;
    let coeffs = lambda
        .iter()
        .enumerate()
        .map(|(k, row)| {
            row.iter()
                .enumerate()
                .map(|(m, &l)| {
                    let ct = c_t[k][m];
                    constant -= l * ct * ct;
                    l * (2.0 * ct - 1.0)
                })
                .collect()
        })
        .collect();
    RhoLowerBound { coeffs, constant }
}

/// Penalty value and its linear minorant at `c_t`. Errors on negative
/// multipliers.
pub fn penalty_terms(
    lambda: &Multipliers,
    assoc_values: &[Vec<f64>],
    c_t: &[Vec<f64>],
) -> Result<(f64, RhoLowerBound), SurrogateError> {
    for (k, row) in lambda.iter().enumerate() {
        for (m, &l) in row.iter().enumerate() {
            if l < 0.0 {
                return Err(SurrogateError::NegativeMultiplier { user: k, uav: m, value: l });
            }
        }
    }
    Ok((rho_value(lambda, assoc_values), rho_lower_bound(lambda, c_t)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::LinkState;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn zero_lambda(num_users: usize, num_uavs: usize) -> Multipliers {
        vec![vec![0.0; num_uavs]; num_users]
    }

    /// Two UAVs, four users, one NLoS link; equal-split powers.
    fn fixture() -> (NetworkState, Vec<Point3>, GainTable, PropagationParams) {
        let params = PropagationParams::defaults();
        let users = vec![
            Point3::new(100.0, 100.0, 0.0),
            Point3::new(220.0, 140.0, 0.0),
            Point3::new(520.0, 480.0, 0.0),
            Point3::new(640.0, 390.0, 0.0),
        ];
        let positions = vec![Point3::new(160.0, 120.0, 300.0), Point3::new(580.0, 430.0, 300.0)];
        let servers = [0usize, 0, 1, 1];
        let values = servers
            .iter()
            .map(|&m| {
                let mut row = vec![0.0; 2];
                row[m] = 1.0;
                row
            })
            .collect();
        let assoc = Association { values, capacities: vec![4, 4] };
        let mut power = PowerAllocation::zeros(4, 2);
        for m in 0..2 {
            power.common[m] = 1.0 / 3.0;
            for (k, &srv) in servers.iter().enumerate() {
                if srv == m {
                    power.private[k][m] = 1.0 / 3.0;
                }
            }
        }
        let mut states = vec![vec![LinkState::Los; 2]; 4];
        states[1][1] = LinkState::Nlos;
        states[2][0] = LinkState::Nlos;
        let gains = (0..4)
            .map(|k| {
                (0..2)
                    .map(|m| {
                        let d = positions[m].distance(users[k]);
                        params.beta(states[k][m]) / d.powf(params.alpha(states[k][m]))
                    })
                    .collect()
            })
            .collect();
        let table = GainTable { gains, states, noise_power: params.noise_power };
        let state = NetworkState { positions, power, assoc };
        (state, users, table, params)
    }

    #[test]
    fn phi_matches_alpha_two_closed_form() {
        let (state, users, table, params) = fixture();
        let exp =
            build_expansion(&state, &users, &table, &params, &zero_lambda(4, 2), true).unwrap();
        let d = state.positions[0].distance(users[0]);
        assert!((exp.phi[0][0] - params.beta_los / d.powi(4)).abs() / exp.phi[0][0] < 1e-12);
    }

    #[test]
    fn phi_is_negative_derivative_of_gain_in_squared_distance() {
        let (state, users, table, params) = fixture();
        let exp =
            build_expansion(&state, &users, &table, &params, &zero_lambda(4, 2), true).unwrap();
        for (k, m) in [(0usize, 0usize), (1, 1), (2, 0)] {
            let a = exp.alpha[k][m];
            let b = exp.beta[k][m];
            let y_t = state.positions[m].distance(users[k]).powi(2);
            let g = |y: f64| b * y.powf(-a / 2.0);
            let h = y_t * 1e-6;
            let fd = (g(y_t + h) - g(y_t - h)) / (2.0 * h);
            assert!(
                (fd + exp.phi[k][m]).abs() / exp.phi[k][m] < 1e-6,
                "({k},{m}): fd {fd} vs -phi {}",
                -exp.phi[k][m]
            );
        }
    }

    #[test]
    fn zero_power_theta_hat_is_c_over_ln2() {
        let (mut state, users, table, params) = fixture();
        state.power = PowerAllocation::zeros(4, 2);
        let exp =
            build_expansion(&state, &users, &table, &params, &zero_lambda(4, 2), true).unwrap();
        for k in 0..4 {
            for m in 0..2 {
                let expected = state.assoc.values[k][m] / std::f64::consts::LN_2;
                assert!((exp.theta_hat[k][m] - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn position_surrogate_anchors_to_frozen_rate() {
        let (state, users, table, params) = fixture();
        let exp =
            build_expansion(&state, &users, &table, &params, &zero_lambda(4, 2), true).unwrap();
        let surrogate = position_surrogate(&exp);
        let anchors = exp.frozen_rates();
        for k in 0..4 {
            let v = surrogate.user_value(k, &state.positions);
            assert!((v - anchors[k]).abs() < 1e-9, "user {k}: {v} vs {}", anchors[k]);
        }
    }

    #[test]
    fn position_surrogate_gradient_matches_finite_differences() {
        let (state, users, table, params) = fixture();
        let exp =
            build_expansion(&state, &users, &table, &params, &zero_lambda(4, 2), true).unwrap();
        let surrogate = position_surrogate(&exp);
        let h = 1e-3;
        for k in 0..4 {
            let grad = surrogate.user_gradient(k, &state.positions);
            for m in 0..2 {
                for axis in 0..3 {
                    let mut plus = state.positions.clone();
                    let mut minus = state.positions.clone();
                    match axis {
                        0 => {
                            plus[m].x += h;
                            minus[m].x -= h;
                        }
                        1 => {
                            plus[m].y += h;
                            minus[m].y -= h;
                        }
                        _ => {
                            plus[m].z += h;
                            minus[m].z -= h;
                        }
                    }
                    let fd = (exp.pinned_rates_at_positions(&plus)[k]
                        - exp.pinned_rates_at_positions(&minus)[k])
                        / (2.0 * h);
                    let an = match axis {
                        0 => grad[m].x,
                        1 => grad[m].y,
                        _ => grad[m].z,
                    };
                    let scale = an.abs().max(fd.abs()).max(1e-9);
                    assert!(
                        (fd - an).abs() / scale < 1e-4,
                        "user {k} uav {m} axis {axis}: fd {fd} vs {an}"
                    );
                }
            }
        }
    }

    #[test]
    fn position_surrogate_quadratics_are_concave() {
        let (state, users, table, params) = fixture();
        let exp =
            build_expansion(&state, &users, &table, &params, &zero_lambda(4, 2), true).unwrap();
        let surrogate = position_surrogate(&exp);
        for model in surrogate.private.iter().chain(surrogate.common.iter().flatten()) {
            for &q in &model.quad {
                assert!(q <= 0.0);
            }
        }
        // Midpoint concavity along random segments.
        let mut rng = StdRng::seed_from_u64(2);
        for _ in 0..200 {
            let random_positions = |rng: &mut StdRng| -> Vec<Point3> {
                (0..2)
                    .map(|_| {
                        Point3::new(
                            rng.gen_range(0.0..800.0),
                            rng.gen_range(0.0..800.0),
                            rng.gen_range(101.0..500.0),
                        )
                    })
                    .collect()
            };
            let a = random_positions(&mut rng);
            let b = random_positions(&mut rng);
            let mid: Vec<Point3> = a.iter().zip(&b).map(|(p, q)| p.add(*q).scale(0.5)).collect();
            for k in 0..4 {
                let lhs = surrogate.user_value(k, &mid);
                let rhs = 0.5 * (surrogate.user_value(k, &a) + surrogate.user_value(k, &b));
                assert!(lhs >= rhs - 1e-9);
            }
        }
    }

    #[test]
    fn power_surrogate_anchors_at_expansion() {
        let (state, users, table, params) = fixture();
        let exp =
            build_expansion(&state, &users, &table, &params, &zero_lambda(4, 2), true).unwrap();
        let surrogate = power_assoc_surrogate(&exp);
        let anchors = exp.frozen_rates();
        for k in 0..4 {
            let v = surrogate.user_value(k, &state.power, &state.assoc);
            assert!((v - anchors[k]).abs() < 1e-9, "user {k}: {v} vs {}", anchors[k]);
        }
    }

    #[test]
    fn power_surrogate_is_minorant_in_p() {
        let (state, users, table, params) = fixture();
        let exp =
            build_expansion(&state, &users, &table, &params, &zero_lambda(4, 2), true).unwrap();
        let surrogate = power_assoc_surrogate(&exp);
        let mut rng = StdRng::seed_from_u64(6);
        for _ in 0..1000 {
            let mut power = PowerAllocation::zeros(4, 2);
            for m in 0..2 {
                // Random point in the power simplex of UAV m.
                let mut parts: Vec<f64> = (0..3).map(|_| rng.gen_range(1e-6..1.0)).collect();
                let total: f64 = parts.iter().sum();
                let scale = rng.gen_range(0.1..1.0) / total;
                parts.iter_mut().for_each(|p| *p *= scale);
                power.common[m] = parts[0];
                let mut idx = 1;
                for k in 0..4 {
                    if exp.server[k] == Some(m) {
                        power.private[k][m] = parts[idx.min(2)];
                        idx += 1;
                    }
                }
            }
            let truth = exp.frozen_rates_with_power(&power);
            for k in 0..4 {
                let v = surrogate.user_value(k, &power, &state.assoc);
                assert!(
                    v <= truth[k] + 1e-9,
                    "user {k}: surrogate {v} exceeds frozen rate {}",
                    truth[k]
                );
            }
        }
    }

    #[test]
    fn power_surrogate_affine_in_association() {
        let (state, users, table, params) = fixture();
        let exp =
            build_expansion(&state, &users, &table, &params, &zero_lambda(4, 2), true).unwrap();
        let surrogate = power_assoc_surrogate(&exp);
        let mut rng = StdRng::seed_from_u64(9);
        for _ in 0..50 {
            let mut a = state.assoc.clone();
            let mut b = state.assoc.clone();
            for k in 0..4 {
                for m in 0..2 {
                    a.values[k][m] = rng.gen_range(0.0..1.0);
                    b.values[k][m] = rng.gen_range(0.0..1.0);
                }
            }
            let mid = Association {
                values: (0..4)
                    .map(|k| (0..2).map(|m| 0.5 * (a.values[k][m] + b.values[k][m])).collect())
                    .collect(),
                capacities: a.capacities.clone(),
            };
            for k in 0..4 {
                let va = surrogate.user_value(k, &state.power, &a);
                let vb = surrogate.user_value(k, &state.power, &b);
                let vm = surrogate.user_value(k, &state.power, &mid);
                assert!((vm - 0.5 * (va + vb)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn penalty_examples() {
        // Binary C gives zero penalty.
        let lambda = vec![vec![0.05, 0.05]];
        let binary = vec![vec![1.0, 0.0]];
        let (rho, lb) = penalty_terms(&lambda, &binary, &binary).unwrap();
        assert_eq!(rho, 0.0);
        assert!((lb.value(&binary) - rho).abs() < 1e-15);

        // Single fractional entry c = 0.5, λ = 0.05 → ρ = −0.0125.
        let frac = vec![vec![0.5, 0.5]];
        let (rho, lb) = penalty_terms(&lambda, &frac, &frac).unwrap();
        assert!((rho - (-0.025)).abs() < 1e-15); // two entries at −0.0125 each
        let single = vec![vec![0.5]];
        let (rho1, _) = penalty_terms(&vec![vec![0.05]], &single, &single).unwrap();
        assert!((rho1 - (-0.0125)).abs() < 1e-15);

        // Minorant equals ρ at the expansion point and stays below elsewhere.
        assert!((lb.value(&frac) - rho).abs() < 1e-15);
        let mut rng = StdRng::seed_from_u64(13);
        for _ in 0..500 {
            let c = vec![vec![rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)]];
            let rho_c = rho_value(&lambda, &c);
            assert!(lb.value(&c) <= rho_c + 1e-12);
        }
    }

    #[test]
    fn negative_multiplier_rejected() {
        let lambda = vec![vec![-0.1]];
        let c = vec![vec![0.5]];
        assert!(matches!(
            penalty_terms(&lambda, &c, &c),
            Err(SurrogateError::NegativeMultiplier { .. })
        ));
    }

    #[test]
    fn noma_expansion_drops_common_part() {
        let (mut state, users, table, params) = fixture();
        state.power.common = vec![0.0; 2];
        let exp =
            build_expansion(&state, &users, &table, &params, &zero_lambda(4, 2), false).unwrap();
        let surrogate = position_surrogate(&exp);
        let anchors = exp.frozen_rates();
        for k in 0..4 {
            let v = surrogate.user_value(k, &state.positions);
            assert!((v - anchors[k]).abs() < 1e-9);
        }
    }
}
