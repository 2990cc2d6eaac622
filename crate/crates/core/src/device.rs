//! Binary filamentary OxRAM device with cycle-to-cycle resistance spread.
//!
//! A device sits in either the low-resistance SET state or the high-resistance
//! RESET state. Every program operation draws a fresh resistance for the target
//! state, and every actual state transition is tallied in `switch_count`, which
//! is what the endurance reports aggregate.
//!
//! The default distribution parameters are placeholders in the range usually
//! reported for HfOx cells; they are meant to be swept from the config file.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

/// Floor of a draw, as a fraction of the configured mean.
const TRUNCATION_FRACTION: f64 = 0.01;
const MAX_REJECTIONS: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ResistanceDist {
    Normal,
    LogNormal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DeviceState {
    /// SET, filament formed.
    Lrs,
    /// RESET, filament dissolved.
    Hrs,
}

impl DeviceState {
    pub fn from_bit(bit: bool) -> Self {
        if bit {
            DeviceState::Lrs
        } else {
            DeviceState::Hrs
        }
    }

    pub fn as_bit(self) -> bool {
        self == DeviceState::Lrs
    }
}

/// Resistance distribution and read-circuit parameters. Resistances in ohms,
/// voltages in volts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeviceParams {
    pub dist: ResistanceDist,
    pub mu_on: f64,
    pub sigma_on: f64,
    pub mu_off: f64,
    pub sigma_off: f64,
    pub v_read: f64,
    pub r_series: f64,
}

impl Default for DeviceParams {
    fn default() -> Self {
        Self {
            dist: ResistanceDist::Normal,
            mu_on: 10e3,
            sigma_on: 2e3,
            mu_off: 100e3,
            sigma_off: 30e3,
            v_read: 1.0,
            r_series: 100e3,
        }
    }
}

impl DeviceParams {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.mu_on,
            self.sigma_on,
            self.mu_off,
            self.sigma_off,
            self.v_read,
            self.r_series,
        ]
        .iter()
        .all(|x| x.is_finite());
        if !finite {
            return Err(Error::InvalidParam("device parameters must be finite".into()));
        }
        if self.mu_on <= 0.0 {
            return Err(Error::InvalidParam(format!("mu_on must be > 0, got {}", self.mu_on)));
        }
        if self.mu_off <= self.mu_on {
            return Err(Error::InvalidParam(format!(
                "mu_off ({}) must exceed mu_on ({})",
                self.mu_off, self.mu_on
            )));
        }
        if self.sigma_on < 0.0 || self.sigma_off < 0.0 {
            return Err(Error::InvalidParam("resistance sigmas must be >= 0".into()));
        }
        if self.r_series < 0.0 {
            return Err(Error::InvalidParam("r_series must be >= 0".into()));
        }
        if self.v_read <= 0.0 {
            return Err(Error::InvalidParam("v_read must be > 0".into()));
        }
        Ok(())
    }

    fn moments(&self, target: DeviceState) -> (f64, f64) {
        match target {
            DeviceState::Lrs => (self.mu_on, self.sigma_on),
            DeviceState::Hrs => (self.mu_off, self.sigma_off),
        }
    }
}

/// Draws a resistance for `target` from the configured distribution.
///
/// Draws below `mu / 100` are rejected and redrawn; the floor is returned if
/// the rejection budget runs out, so the result is always positive.
pub fn sample_resistance<R: Rng + ?Sized>(
    params: &DeviceParams,
    target: DeviceState,
    rng: &mut R,
) -> f64 {
    let (mu, sigma) = params.moments(target);
    if sigma == 0.0 {
        return mu;
    }
    let floor = mu * TRUNCATION_FRACTION;
    let draw = |rng: &mut R| -> f64 {
        let z: f64 = rng.sample(StandardNormal);
        match params.dist {
            ResistanceDist::Normal => mu + sigma * z,
            ResistanceDist::LogNormal => {
                // Parameterized so that the draw itself has mean mu and sd sigma.
                let s2 = (1.0 + (sigma / mu).powi(2)).ln();
                let m = mu.ln() - 0.5 * s2;
                (m + s2.sqrt() * z).exp()
            }
        }
    };
    for _ in 0..MAX_REJECTIONS {
        let r = draw(rng);
        if r >= floor {
            return r;
        }
    }
    floor
}

/// `P(R <= r)` for a resistance drawn by [`sample_resistance`], with the
/// truncation at `mu / 100` renormalized away.
pub fn resistance_cdf(params: &DeviceParams, target: DeviceState, r: f64) -> f64 {
    let (mu, sigma) = params.moments(target);
    if sigma == 0.0 {
        return if r >= mu { 1.0 } else { 0.0 };
    }
    let floor = mu * TRUNCATION_FRACTION;
    if r < floor {
        return 0.0;
    }
    let untruncated = |x: f64| -> f64 {
        let z = match params.dist {
            ResistanceDist::Normal => (x - mu) / sigma,
            ResistanceDist::LogNormal => {
                let s2 = (1.0 + (sigma / mu).powi(2)).ln();
                (x.ln() - (mu.ln() - 0.5 * s2)) / s2.sqrt()
            }
        };
        0.5 * erfc(-z / std::f64::consts::SQRT_2)
    };
    let below = untruncated(floor);
    ((untruncated(r) - below) / (1.0 - below)).clamp(0.0, 1.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct OxRamDevice {
    state: DeviceState,
    resistance: f64,
    switch_count: u64,
}

impl OxRamDevice {
    /// A fresh device in the RESET state at the mean OFF resistance.
    pub fn new(params: &DeviceParams) -> Self {
        Self {
            state: DeviceState::Hrs,
            resistance: params.mu_off,
            switch_count: 0,
        }
    }

    /// Rebuilds a device from persisted fields.
    pub fn from_parts(state: DeviceState, resistance: f64, switch_count: u64) -> Self {
        Self {
            state,
            resistance: resistance.max(f64::MIN_POSITIVE),
            switch_count,
        }
    }

    pub fn state(&self) -> DeviceState {
        self.state
    }

    pub fn resistance(&self) -> f64 {
        self.resistance
    }

    pub fn switch_count(&self) -> u64 {
        self.switch_count
    }

    /// Programs the device into `target`. Only an actual transition counts as a
    /// switching event; the resistance is redrawn either way.
    pub fn program<R: Rng + ?Sized>(&mut self, target: DeviceState, params: &DeviceParams, rng: &mut R) {
        if self.state != target {
            self.switch_count += 1;
        }
        self.state = target;
        self.resistance = sample_resistance(params, target, rng);
    }

    /// One full SET/RESET cycle ending in RESET, counted as a single event.
    /// The stochastic reference of a neuron is regenerated this way.
    pub fn cycle<R: Rng + ?Sized>(&mut self, params: &DeviceParams, rng: &mut R) {
        self.switch_count += 1;
        self.state = DeviceState::Hrs;
        self.resistance = sample_resistance(params, DeviceState::Hrs, rng);
    }

    /// Voltage across the device in a series divider driven at `v_read`.
    pub fn read_reference_voltage(&self, params: &DeviceParams) -> f64 {
        divider_voltage(self.resistance, params)
    }

    /// Adds another replica's event count, for merging per-worker copies.
    pub fn absorb_count(&mut self, events: u64) {
        self.switch_count += events;
    }
}

pub(crate) fn divider_voltage(resistance: f64, params: &DeviceParams) -> f64 {
    params.v_read * resistance / (resistance + params.r_series)
}
