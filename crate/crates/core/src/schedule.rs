//! Scalar schedules over normalized time `t` in `[0, 1)`.
//!
//! Round `r` of `T` sits at `t = r / T`; `gamma(1)` is defined as `0` so the
//! last round commits the whole chunk.

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Slack applied before taking the ceiling in [`keep_count_for_gamma`] so
/// that products which are integers up to rounding (e.g. `0.5 * 4`) do not
/// round up to the next count.
pub const KEEP_COUNT_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    #[default]
    Cosine,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskSchedule {
    pub kind: ScheduleKind,
    pub total_rounds: usize,
    pub chunk_len: usize,
}

impl MaskSchedule {
    pub fn new(kind: ScheduleKind, total_rounds: usize, chunk_len: usize) -> Self {
        Self {
            kind,
            total_rounds,
            chunk_len,
        }
    }

    /// Normalized time of round `r`.
    pub fn time_of_round(&self, round: usize) -> f64 {
        round as f64 / self.total_rounds as f64
    }

    /// Cumulative number of committed positions after `round`.
    pub fn keep_target_after_round(&self, round: usize) -> usize {
        keep_count(self.time_of_round(round + 1), self)
    }
}

/// Mask ratio at time `t`: `cos(pi t / 2)` (cosine) or `1 - t` (linear).
pub fn gamma(t: f64, kind: ScheduleKind) -> Result<f64> {
    if !(0.0..1.0).contains(&t) {
        return Err(Error::Domain(format!("gamma: t = {t} outside [0, 1)")));
    }
    Ok(gamma_unchecked(t, kind))
}

fn gamma_unchecked(t: f64, kind: ScheduleKind) -> f64 {
    match kind {
        ScheduleKind::Cosine => (FRAC_PI_2 * t).cos(),
        ScheduleKind::Linear => 1.0 - t,
    }
}

/// Mask ratio extended to `t = 1`, where it is exactly `0`.
pub fn gamma_closed(t: f64, kind: ScheduleKind) -> Result<f64> {
    if t == 1.0 {
        Ok(0.0)
    } else {
        gamma(t, kind)
    }
}

/// `ceil((1 - gamma) * len)` clamped to `[1, len]`.
pub fn keep_count_for_gamma(gamma: f64, len: usize) -> usize {
    let raw = ((1.0 - gamma) * len as f64 - KEEP_COUNT_SLACK).ceil();
    (raw.max(1.0) as usize).min(len)
}

/// Total positions committed once the schedule reaches `t_next`; the final
/// round (`t_next >= 1`) always returns the full length.
pub fn keep_count(t_next: f64, schedule: &MaskSchedule) -> usize {
    if t_next >= 1.0 {
        return schedule.chunk_len;
    }
    keep_count_for_gamma(gamma_unchecked(t_next.max(0.0), schedule.kind), schedule.chunk_len)
}

/// How the sampling temperature evolves over rounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TemperatureMode {
    /// `tau = 1 - t`.
    #[default]
    Decay,
    /// Constant temperature.
    Fixed,
    /// `tau = 0`: plain argmax.
    Hard,
    /// `tau = gamma(t)`, tracking the mask ratio instead of time.
    Gamma,
}

impl TemperatureMode {
    pub fn label(self) -> &'static str {
        match self {
            TemperatureMode::Decay => "decay",
            TemperatureMode::Fixed => "fixed",
            TemperatureMode::Hard => "hard",
            TemperatureMode::Gamma => "gamma",
        }
    }
}

/// Sampling temperature at time `t`. `fixed_value` is used by
/// [`TemperatureMode::Fixed`] and `kind` by [`TemperatureMode::Gamma`].
pub fn tau(t: f64, mode: TemperatureMode, fixed_value: f64, kind: ScheduleKind) -> Result<f64> {
    if !(0.0..1.0).contains(&t) {
        return Err(Error::Domain(format!("tau: t = {t} outside [0, 1)")));
    }
    Ok(match mode {
        TemperatureMode::Decay => 1.0 - t,
        TemperatureMode::Fixed => fixed_value.max(0.0),
        TemperatureMode::Hard => 0.0,
        TemperatureMode::Gamma => gamma_unchecked(t, kind),
    })
}

/// Re-masking thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdSchedule {
    pub eta_abs_start: f64,
    pub eta_abs_end: f64,
    pub eta_drop: f64,
    /// When set, the residual-drop check re-masks the `Q` largest drops
    /// instead of thresholding at `eta_drop`.
    #[serde(default)]
    pub top_q: Option<usize>,
}

impl Default for ThresholdSchedule {
    fn default() -> Self {
        Self {
            eta_abs_start: 0.0,
            eta_abs_end: 0.9,
            eta_drop: 0.15,
            top_q: None,
        }
    }
}

impl ThresholdSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta_abs_start.is_finite() && self.eta_abs_end.is_finite()) {
            return Err(Error::Config("eta_abs bounds must be finite".into()));
        }
        if self.eta_abs_end < self.eta_abs_start {
            return Err(Error::Config(format!(
                "eta_abs must be non-decreasing (start {} > end {})",
                self.eta_abs_start, self.eta_abs_end
            )));
        }
        if !self.eta_drop.is_finite() {
            return Err(Error::Config("eta_drop must be finite".into()));
        }
        Ok(())
    }
}

/// Absolute-confidence threshold at `round`, interpolated linearly from
/// `eta_abs_start` (round 0) towards `eta_abs_end` (round `total_rounds`).
pub fn eta_abs(round: usize, total_rounds: usize, schedule: &ThresholdSchedule) -> f64 {
    let frac = if total_rounds == 0 {
        0.0
    } else {
        round as f64 / total_rounds as f64
    };
    schedule.eta_abs_start + (schedule.eta_abs_end - schedule.eta_abs_start) * frac
}
