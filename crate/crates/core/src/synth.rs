//! Synthetic actuator systems.
//!
//! `pendulum-lag` is a damped pendulum driven through a first-order
//! actuator lag. Only the angle is observed, so the actuator torque `u` is a
//! hidden state and the observation sequence alone is not Markov:
//!
//! ```text
//! u[k+1]     = a[k] + (u[k] - a[k]) * exp(-dt / tau)
//! omega[k+1] = omega[k] + dt * (-(g / L) sin(theta[k]) - c omega[k] + u[k+1] / (m L^2))
//! theta[k+1] = theta[k] + dt * omega[k+1]
//! o[k]       = theta[k] (+ Gaussian noise)
//! ```
//!
//! `antagonistic-backlash` passes the command through a backlash (play)
//! element of total width `backlash` before the lag, adding hysteresis.
//! `linear-integrator` is the noiseless system `x[k+1] = x[k] + dt a[k]`.
//!
//! Commands are a smoothed random telegraph signal in `[-2, 2]`: a level
//! drawn uniformly is held for a geometric number of steps (mean 25) and
//! the applied command follows it through exponential smoothing.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Episode};
use crate::error::{CoreError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SystemKind {
    PendulumLag,
    AntagonisticBacklash,
    LinearIntegrator,
}

impl SystemKind {
    pub const ALL: [SystemKind; 3] = [
        SystemKind::PendulumLag,
        SystemKind::AntagonisticBacklash,
        SystemKind::LinearIntegrator,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SystemKind::PendulumLag => "pendulum-lag",
            SystemKind::AntagonisticBacklash => "antagonistic-backlash",
            SystemKind::LinearIntegrator => "linear-integrator",
        }
    }
}

impl fmt::Display for SystemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SystemKind {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        SystemKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| CoreError::Config(format!("unknown system `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSystem {
    pub kind: SystemKind,
    pub gravity: f64,
    pub length: f64,
    pub mass: f64,
    pub damping: f64,
    pub tau: f64,
    pub backlash: f64,
    pub dt: f64,
    /// Standard deviation of additive observation noise.
    pub noise: f64,
    pub command_limit: f64,
    pub command_hold: f64,
    pub command_smoothing: f64,
}

impl SyntheticSystem {
    pub fn new(kind: SystemKind) -> Self {
        Self {
            kind,
            gravity: 9.81,
            length: 1.0,
            mass: 1.0,
            damping: 0.3,
            tau: 0.25,
            backlash: if kind == SystemKind::AntagonisticBacklash { 0.2 } else { 0.0 },
            dt: 0.02,
            noise: 0.0,
            command_limit: 2.0,
            command_hold: 25.0,
            command_smoothing: 0.2,
        }
    }

    pub fn obs_dim(&self) -> usize {
        1
    }

    pub fn action_dim(&self) -> usize {
        1
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dt", self.dt),
            ("gravity", self.gravity),
            ("length", self.length),
            ("mass", self.mass),
            ("tau", self.tau),
            ("command_hold", self.command_hold),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(CoreError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        let non_negative = [
            ("damping", self.damping),
            ("backlash", self.backlash),
            ("noise", self.noise),
            ("command_limit", self.command_limit),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(CoreError::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        if !(self.command_smoothing > 0.0 && self.command_smoothing <= 1.0) {
            return Err(CoreError::Config(format!(
                "command_smoothing must be in (0, 1], got {}",
                self.command_smoothing
            )));
        }
        Ok(())
    }

    /// Hidden state after one step from `state` under command `a`.
    pub fn step(&self, state: PendulumState, a: f64) -> PendulumState {
        match self.kind {
            SystemKind::LinearIntegrator => PendulumState {
                theta: state.theta + self.dt * a,
                ..state
            },
            SystemKind::PendulumLag | SystemKind::AntagonisticBacklash => {
                let played = if self.backlash > 0.0 {
                    let half = 0.5 * self.backlash;
                    state.played.clamp(a - half, a + half)
                } else {
                    a
                };
                let decay = (-self.dt / self.tau).exp();
                let torque = played + (state.torque - played) * decay;
                let accel = -(self.gravity / self.length) * state.theta.sin() - self.damping * state.omega
                    + torque / (self.mass * self.length * self.length);
                let omega = state.omega + self.dt * accel;
                PendulumState {
                    theta: state.theta + self.dt * omega,
                    omega,
                    torque,
                    played,
                }
            }
        }
    }

    /// Mechanical energy of the pendulum.
    pub fn energy(&self, state: &PendulumState) -> f64 {
        let ml2 = self.mass * self.length * self.length;
        0.5 * ml2 * state.omega * state.omega
            + self.mass * self.gravity * self.length * (1.0 - state.theta.cos())
    }

    /// Rolls out `len` steps from `initial` under `commands`; returns the
    /// visited states `x[0..len]`.
    pub fn rollout(&self, initial: PendulumState, commands: &[f64]) -> Vec<PendulumState> {
        let mut states = Vec::with_capacity(commands.len());
        let mut s = initial;
        for &a in commands {
            states.push(s);
            s = self.step(s, a);
        }
        states
    }

    /// `episodes` trajectories of length `len`, episode ids `0..episodes`.
    pub fn simulate(&self, episodes: usize, len: usize, seed: u64) -> Result<Dataset> {
        self.validate()?;
        if len < 2 {
            return Err(CoreError::Config(format!("episode length must be >= 2, got {len}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, self.noise.max(f64::MIN_POSITIVE)).expect("valid std");
        let mut out = Vec::with_capacity(episodes);
        for id in 0..episodes {
            let initial = PendulumState {
                theta: rng.gen_range(-1.0..1.0),
                omega: if self.kind == SystemKind::LinearIntegrator { 0.0 } else { rng.gen_range(-1.0..1.0) },
                torque: 0.0,
                played: 0.0,
            };
            let commands = self.commands(len, &mut rng);
            let states = self.rollout(initial, &commands);
            let observations = states
                .iter()
                .map(|s| {
                    let eps = if self.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                    vec![s.theta + eps]
                })
                .collect();
            out.push(Episode {
                id: id as u64,
                observations,
                actions: commands.iter().map(|&a| vec![a]).collect(),
            });
        }
        Dataset::new(self.obs_dim(), self.action_dim(), out)
    }

    /// Smoothed random telegraph command sequence.
    pub fn commands(&self, len: usize, rng: &mut impl Rng) -> Vec<f64> {
        let limit = self.command_limit;
        let draw = |rng: &mut dyn rand::RngCore| {
            if limit > 0.0 {
                rng.gen_range(-limit..=limit)
            } else {
                0.0
            }
        };
        let switch = 1.0 / self.command_hold.max(1.0);
        let mut level = draw(rng);
        let mut applied = 0.0;
        (0..len)
            .map(|_| {
                if rng.gen::<f64>() < switch {
                    level = draw(rng);
                }
                applied += self.command_smoothing * (level - applied);
                applied
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PendulumState {
    pub theta: f64,
    pub omega: f64,
    /// Actuator output after the lag.
    pub torque: f64,
    /// Output of the backlash element.
    pub played: f64,
}
