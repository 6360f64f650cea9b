//! RSMA rate model: common/private SINRs, achievable rates, the rate
//! decomposition used by the optimizer, and the NOMA baseline.
//!
//! Every UAV splits its transmission into one common stream (decoded by all
//! of its served users, rate pinned by the weakest and shared equally) and
//! per-user private streams decoded by successive interference cancellation
//! in order of decreasing channel gain. Other UAVs contribute plain
//! interference.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::LinkState;
use crate::geometry::Point3;

#[derive(Debug, Error, PartialEq)]
pub enum RsmaError {
    #[error("association entry ({user}, {uav}) = {value} is not binary")]
    NonBinaryAssociation { user: usize, uav: usize, value: f64 },
    #[error("UAV {uav} has nonzero common power {value} in a NOMA evaluation")]
    NonZeroCommonPower { uav: usize, value: f64 },
}

/// Common and private transmit powers in watts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerAllocation {
    /// `common[m]` = p_{c,m}.
    pub common: Vec<f64>,
    /// `private[k][m]` = p_{k,m}.
    pub private: Vec<Vec<f64>>,
}

impl PowerAllocation {
    pub fn zeros(num_users: usize, num_uavs: usize) -> Self {
        Self {
            common: vec![0.0; num_uavs],
            private: vec![vec![0.0; num_uavs]; num_users],
        }
    }

    /// Total transmit power of UAV `m` (common plus all private entries).
    pub fn total(&self, m: usize) -> f64 {
        self.common[m] + self.private.iter().map(|row| row[m]).sum::<f64>()
    }
}

/// Relaxed association matrix plus per-UAV capacities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Association {
    /// `values[k][m]` = c_{k,m} in [0, 1].
    pub values: Vec<Vec<f64>>,
    /// `capacities[m]` = κ_m.
    pub capacities: Vec<usize>,
}

impl Association {
    pub fn is_binary(&self) -> bool {
        self.values
            .iter()
            .flatten()
            .all(|&c| c <= 0.001 || c >= 0.999)
    }

    /// Max integrality gap `max c(1−c)` over all entries.
    pub fn max_gap(&self) -> f64 {
        self.values
            .iter()
            .flatten()
            .map(|&c| c * (1.0 - c))
            .fold(0.0, f64::max)
    }

    fn check_binary(&self) -> Result<(), RsmaError> {
        for (k, row) in self.values.iter().enumerate() {
            for (m, &c) in row.iter().enumerate() {
                if c > 0.001 && c < 0.999 {
                    return Err(RsmaError::NonBinaryAssociation { user: k, uav: m, value: c });
                }
            }
        }
        Ok(())
    }

    /// Serving UAV of user `k` in a binary state, if any.
    pub fn server(&self, k: usize) -> Option<usize> {
        self.values[k].iter().position(|&c| c >= 0.999)
    }
}

/// Joint decision variables: positions X, power P, association C.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetworkState {
    pub positions: Vec<Point3>,
    pub power: PowerAllocation,
    pub assoc: Association,
}

impl NetworkState {
    pub fn num_uavs(&self) -> usize {
        self.positions.len()
    }

    pub fn num_users(&self) -> usize {
        self.assoc.values.len()
    }
}

/// Cached gains and link states for all (user, UAV) pairs.
#[derive(Debug, Clone)]
pub struct GainTable {
    /// `gains[k][m]` = g_k(x_m).
    pub gains: Vec<Vec<f64>>,
    pub states: Vec<Vec<LinkState>>,
    /// Noise power σ² in watts.
    pub noise_power: f64,
}

/// Per-user rate summary in bit/s/Hz.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RateBreakdown {
    pub per_user_common: Vec<f64>,
    pub per_user_private: Vec<f64>,
    pub per_user_total: Vec<f64>,
    pub min_rate: f64,
}

/// Decomposition terms per (user, UAV), all σ²-normalized where applicable.
///
/// `r_hat` is the total-received-power log term; `r_hat_post` is its
/// post-cancellation counterpart (common stream and earlier-decoded private
/// streams removed) so that `r_hat_post − r_bar_p` reconstructs the private
/// rate exactly.
#[derive(Debug, Clone)]
pub struct RateDecomposition {
    /// `p_total[k]`: total received power over noise at user k.
    pub p_total: Vec<f64>,
    /// `i_other[k][m]`: σ²-normalized interference from UAVs other than m.
    pub i_other: Vec<Vec<f64>>,
    /// `r_hat[k][m]` = c_{k,m} log2(1 + p_total[k]).
    pub r_hat: Vec<Vec<f64>>,
    /// `r_hat_post[k][m]` = c_{k,m} log2(1 + (p_k + after)·g_k/σ² + i_other).
    pub r_hat_post: Vec<Vec<f64>>,
    /// `r_bar_c[k][m]` (k-independent in value): weakest-user interference log.
    pub r_bar_c: Vec<Vec<f64>>,
    /// `r_bar_p[k][m]`: residual-interference log for k's private stream.
    pub r_bar_p: Vec<Vec<f64>>,
    /// `weakest[m]`: k* = argmin over served users of g_k(x_m).
    pub weakest: Vec<Option<usize>>,
}

fn log2_1p(x: f64) -> f64 {
    x.ln_1p() / std::f64::consts::LN_2
}

/// Served sets K_m with users ordered by decreasing gain; ties break toward
/// the smaller user id.
pub fn served_sets_and_order(
    state: &NetworkState,
    gains: &GainTable,
) -> Result<Vec<Vec<usize>>, RsmaError> {
    state.assoc.check_binary()?;
    let mut served: Vec<Vec<usize>> = vec![Vec::new(); state.num_uavs()];
    for k in 0..state.num_users() {
        if let Some(m) = state.assoc.server(k) {
            served[m].push(k);
        }
    }
    for (m, list) in served.iter_mut().enumerate() {
        list.sort_by(|&a, &b| {
            gains.gains[b][m]
                .partial_cmp(&gains.gains[a][m])
                .unwrap()
                .then(a.cmp(&b))
        });
    }
    Ok(served)
}

/// Interference received by user `k` from all UAVs other than `uav`, in
/// watts: Σ_{m'≠m} (p_{c,m'} + Σ_{j∈K_{m'}} p_{j,m'}) g_k(x_{m'}).
pub fn interference_other(
    k: usize,
    uav: usize,
    state: &NetworkState,
    gains: &GainTable,
    served: &[Vec<usize>],
) -> f64 {
    let mut acc = 0.0;
    for m in 0..state.num_uavs() {
        if m == uav {
            continue;
        }
        let mut power = state.power.common[m];
        for &j in &served[m] {
            power += state.power.private[j][m];
        }
        acc += power * gains.gains[k][m];
    }
    acc
}

/// SINR of the common stream at user `k` served by `uav`.
pub fn sinr_common(
    k: usize,
    uav: usize,
    state: &NetworkState,
    gains: &GainTable,
    served: &[Vec<usize>],
) -> f64 {
    let g = gains.gains[k][uav];
    let own_private: f64 = served[uav]
        .iter()
        .map(|&j| state.power.private[j][uav])
        .sum();
    let interference = interference_other(k, uav, state, gains, served);
    state.power.common[uav] * g / (own_private * g + interference + gains.noise_power)
}

/// Users of `uav` decoded after `k` (strictly smaller gain, or equal gain
/// with larger id). Works for `k` outside the served set too, by inserting it
/// into the order at its gain.
fn decoded_after<'a>(
    k: usize,
    uav: usize,
    gains: &GainTable,
    served: &'a [Vec<usize>],
) -> impl Iterator<Item = usize> + 'a {
    let gk = gains.gains[k][uav];
    let gains_col: Vec<f64> = served[uav].iter().map(|&j| gains.gains[j][uav]).collect();
    served[uav]
        .iter()
        .zip(gains_col)
        .filter(move |&(&j, gj)| j != k && (gj < gk || (gj == gk && j > k)))
        .map(|(&j, _)| j)
}

/// SINR of user `k`'s private stream from `uav` under the SIC order.
pub fn sinr_private(
    k: usize,
    uav: usize,
    state: &NetworkState,
    gains: &GainTable,
    served: &[Vec<usize>],
) -> f64 {
    let g = gains.gains[k][uav];
    let residual: f64 = decoded_after(k, uav, gains, served)
        .map(|j| state.power.private[j][uav])
        .sum();
    let interference = interference_other(k, uav, state, gains, served);
    state.power.private[k][uav] * g / (residual * g + interference + gains.noise_power)
}

/// Full RSMA rate breakdown at a binary state.
///
/// The common stream rate of each UAV is the minimum over its served users
/// of log2(1 + SINR^c), split equally among the actual served count; private
/// rates follow the SIC order. UAVs serving nobody contribute interference
/// but no rate.
pub fn compute_rates(state: &NetworkState, gains: &GainTable) -> Result<RateBreakdown, RsmaError> {
    let served = served_sets_and_order(state, gains)?;
    compute_rates_with_served(state, gains, &served)
}

pub fn compute_rates_with_served(
    state: &NetworkState,
    gains: &GainTable,
    served: &[Vec<usize>],
) -> Result<RateBreakdown, RsmaError> {
    let num_users = state.num_users();
    let mut common = vec![0.0; num_users];
    let mut private = vec![0.0; num_users];

    for m in 0..state.num_uavs() {
        if served[m].is_empty() {
            continue;
        }
        let min_common = served[m]
            .iter()
            .map(|&j| log2_1p(sinr_common(j, m, state, gains, served)))
            .fold(f64::INFINITY, f64::min);
        let share = min_common / served[m].len() as f64;
        for &j in &served[m] {
            common[j] += share;
            private[j] += log2_1p(sinr_private(j, m, state, gains, served));
        }
    }

    let total: Vec<f64> = common.iter().zip(&private).map(|(c, p)| c + p).collect();
    let min_rate = total.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(RateBreakdown {
        per_user_common: common,
        per_user_private: private,
        per_user_total: total,
        min_rate,
    })
}

/// NOMA baseline: private streams only with full SIC. Errors when any common
/// power is nonzero.
pub fn compute_rates_noma(
    state: &NetworkState,
    gains: &GainTable,
) -> Result<RateBreakdown, RsmaError> {
    for (m, &pc) in state.power.common.iter().enumerate() {
        if pc > 0.0 {
            return Err(RsmaError::NonZeroCommonPower { uav: m, value: pc });
        }
    }
    let served = served_sets_and_order(state, gains)?;
    let num_users = state.num_users();
    let mut private = vec![0.0; num_users];
    for m in 0..state.num_uavs() {
        for &j in &served[m] {
            private[j] += log2_1p(sinr_private(j, m, state, gains, &served));
        }
    }
    let min_rate = private.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(RateBreakdown {
        per_user_common: vec![0.0; num_users],
        per_user_private: private.clone(),
        per_user_total: private,
        min_rate,
    })
}

/// Decomposition terms at a binary state.
pub fn rate_decomposition(
    state: &NetworkState,
    gains: &GainTable,
) -> Result<RateDecomposition, RsmaError> {
    let served = served_sets_and_order(state, gains)?;
    Ok(rate_decomposition_with_served(state, gains, &served))
}

pub fn rate_decomposition_with_served(
    state: &NetworkState,
    gains: &GainTable,
    served: &[Vec<usize>],
) -> RateDecomposition {
    let num_users = state.num_users();
    let num_uavs = state.num_uavs();
    let sigma2 = gains.noise_power;

    // Total σ²-normalized transmit power of each UAV (common + served private).
    let w_total: Vec<f64> = (0..num_uavs)
        .map(|m| {
            let mut p = state.power.common[m];
            for &j in &served[m] {
                p += state.power.private[j][m];
            }
            p / sigma2
        })
        .collect();

    let weakest: Vec<Option<usize>> = (0..num_uavs)
        .map(|m| {
            served[m]
                .iter()
                .cloned()
                .min_by(|&a, &b| {
                    gains.gains[a][m]
                        .partial_cmp(&gains.gains[b][m])
                        .unwrap()
                        .then(a.cmp(&b))
                })
        })
        .collect();

    let p_total: Vec<f64> = (0..num_users)
        .map(|k| (0..num_uavs).map(|m| w_total[m] * gains.gains[k][m]).sum())
        .collect();

    let mut i_other = vec![vec![0.0; num_uavs]; num_users];
    let mut r_hat = vec![vec![0.0; num_uavs]; num_users];
    let mut r_hat_post = vec![vec![0.0; num_uavs]; num_users];
    let mut r_bar_c = vec![vec![0.0; num_uavs]; num_users];
    let mut r_bar_p = vec![vec![0.0; num_uavs]; num_users];

    for k in 0..num_users {
        for m in 0..num_uavs {
            let c = state.assoc.values[k][m];
            let io: f64 = (0..num_uavs)
                .filter(|&mp| mp != m)
                .map(|mp| w_total[mp] * gains.gains[k][mp])
                .sum();
            i_other[k][m] = io;
            r_hat[k][m] = c * log2_1p(p_total[k]);

            let g = gains.gains[k][m];
            let after: f64 = decoded_after(k, m, gains, served)
                .map(|j| state.power.private[j][m])
                .sum::<f64>()
                / sigma2;
            let own = state.power.private[k][m] / sigma2;
            r_hat_post[k][m] = c * log2_1p((own + after) * g + io);
            r_bar_p[k][m] = c * log2_1p(after * g + io);

            if let Some(ks) = weakest[m] {
                let gks = gains.gains[ks][m];
                let own_private: f64 = served[m]
                    .iter()
                    .map(|&j| state.power.private[j][m])
                    .sum::<f64>()
                    / sigma2;
                let io_star: f64 = (0..num_uavs)
                    .filter(|&mp| mp != m)
                    .map(|mp| w_total[mp] * gains.gains[ks][mp])
                    .sum();
                r_bar_c[k][m] = state.assoc.values[ks][m] * log2_1p(own_private * gks + io_star);
            }
        }
    }

    RateDecomposition {
        p_total,
        i_other,
        r_hat,
        r_hat_post,
        r_bar_c,
        r_bar_p,
        weakest,
    }
}
