//! LoS/NLoS path-loss channel model.
//!
//! The effective channel gain between a user and a UAV position is
//! `β / d^α`, with `(α, β)` selected by the link state. `β` is the channel
//! power gain at 1 m in linear scale; distances below 1 m are clamped so the
//! reference gain is never exceeded.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{is_los, BlockagePlaneSet, Point3};

#[derive(Debug, Error, PartialEq)]
pub enum ChannelError {
    #[error("zero distance between user and UAV position")]
    ZeroDistance,
    #[error("invalid propagation parameters: {0}")]
    InvalidParams(String),
}

/// Link state of a (user, UAV position) pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LinkState {
    Los,
    Nlos,
}

/// Path-loss exponents, 1 m reference gains (linear) and noise power.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PropagationParams {
    pub alpha_los: f64,
    pub alpha_nlos: f64,
    /// Channel power gain at 1 m, linear scale.
    pub beta_los: f64,
    pub beta_nlos: f64,
    /// Total noise power over the band, watts (σ²).
    pub noise_power: f64,
}

impl PropagationParams {
    /// Table-style defaults: α = 2 / 3.3, β = −46.43 / −56.43 dB and
    /// σ² = −107 dBm over the band.
    pub fn defaults() -> Self {
        Self {
            alpha_los: 2.0,
            alpha_nlos: 3.3,
            beta_los: db_to_linear(-46.43),
            beta_nlos: db_to_linear(-56.43),
            noise_power: dbm_to_watts(-107.0),
        }
    }

    pub fn validate(&self) -> Result<(), ChannelError> {
        if !(self.alpha_los > 0.0 && self.alpha_nlos >= self.alpha_los) {
            return Err(ChannelError::InvalidParams(
                "need alpha_nlos >= alpha_los > 0".into(),
            ));
        }
        if !(self.beta_nlos > 0.0 && self.beta_los > self.beta_nlos) {
            return Err(ChannelError::InvalidParams(
                "need beta_los > beta_nlos > 0".into(),
            ));
        }
        if !(self.noise_power > 0.0) {
            return Err(ChannelError::InvalidParams("need noise_power > 0".into()));
        }
        Ok(())
    }

    pub fn alpha(&self, state: LinkState) -> f64 {
        match state {
            LinkState::Los => self.alpha_los,
            LinkState::Nlos => self.alpha_nlos,
        }
    }

    pub fn beta(&self, state: LinkState) -> f64 {
        match state {
            LinkState::Los => self.beta_los,
            LinkState::Nlos => self.beta_nlos,
        }
    }
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn linear_to_db(lin: f64) -> f64 {
    10.0 * lin.log10()
}

pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

/// Link state of a UAV position w.r.t. one user's blockage set.
pub fn link_state(blockage: &BlockagePlaneSet, x: Point3) -> LinkState {
    if is_los(blockage, x) {
        LinkState::Los
    } else {
        LinkState::Nlos
    }
}

/// Effective channel gain `β(state) / ‖x − user‖^α(state)`.
///
/// Distances in (0, 1) m are clamped to 1 m; exactly zero distance is an
/// error.
pub fn channel_gain(
    user: Point3,
    x: Point3,
    state: LinkState,
    params: &PropagationParams,
) -> Result<f64, ChannelError> {
    let d = x.distance(user);
    if d == 0.0 {
        return Err(ChannelError::ZeroDistance);
    }
    let d = d.max(1.0);
    Ok(params.beta(state) / d.powf(params.alpha(state)))
}
