//! Toy environments and their frozen reference returns.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::Error;

pub const POINT_MASS_DT: f64 = 0.05;
pub const POINT_MASS_DRAG: f64 = 0.1;
pub const POINT_MASS_GOAL: [f64; 2] = [0.8, 0.8];
pub const POINT_MASS_HORIZON: usize = 100;
/// Gains of the scripted PD controller used as expert and behavior policy.
pub const PD_KP: f64 = 4.0;
pub const PD_KD: f64 = 3.9;

pub const BANDIT_OPTIMUM: f64 = 0.3;
pub const BANDIT_NOISE: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvId {
    PointMass,
    GaussianBandit,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    pub next_state: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

/// Returns of the uniform-random and expert policies, used for score
/// normalization.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceReturns {
    pub random: f64,
    pub expert: f64,
}

impl ReferenceReturns {
    pub fn normalize(&self, score: f64) -> f64 {
        100.0 * (score - self.random) / (self.expert - self.random)
    }
}

impl EnvId {
    pub const ALL: [EnvId; 2] = [EnvId::PointMass, EnvId::GaussianBandit];

    pub fn state_dim(self) -> usize {
        match self {
            EnvId::PointMass => 4,
            EnvId::GaussianBandit => 1,
        }
    }

    pub fn action_dim(self) -> usize {
        match self {
            EnvId::PointMass => 2,
            EnvId::GaussianBandit => 1,
        }
    }

    pub fn horizon(self) -> usize {
        match self {
            EnvId::PointMass => POINT_MASS_HORIZON,
            EnvId::GaussianBandit => 1,
        }
    }

    /// Frozen reference returns.
    ///
    /// PointMass: Monte-Carlo means over 20 000 episodes (seed 2024) of the
    /// noiseless PD controller (expert) and of uniform actions (random);
    /// `frozen_references_match_monte_carlo` re-measures them.
    /// GaussianBandit: exact means, `0` at the optimum and
    /// `−(1/3 + 0.3²)` under uniform actions.
    pub fn reference_returns(self) -> ReferenceReturns {
        match self {
            EnvId::PointMass => ReferenceReturns {
                random: POINT_MASS_RANDOM_RETURN,
                expert: POINT_MASS_EXPERT_RETURN,
            },
            EnvId::GaussianBandit => ReferenceReturns {
                random: -(1.0 / 3.0 + BANDIT_OPTIMUM * BANDIT_OPTIMUM),
                expert: 0.0,
            },
        }
    }

    pub fn reset(self, rng: &mut impl Rng) -> Vec<f64> {
        match self {
            EnvId::PointMass => vec![
                rng.gen_range(-1.0..=1.0),
                rng.gen_range(-1.0..=1.0),
                0.0,
                0.0,
            ],
            EnvId::GaussianBandit => vec![0.0],
        }
    }

    /// Advance one step. Actions are clipped to `[−1, 1]`.
    pub fn step(self, state: &[f64], action: &[f64], rng: &mut impl Rng) -> Step {
        let a: Vec<f64> = action.iter().map(|x| x.clamp(-1.0, 1.0)).collect();
        match self {
            EnvId::PointMass => {
                let (p, v) = (&state[0..2], &state[2..4]);
                let dist = ((p[0] - POINT_MASS_GOAL[0]).powi(2) + (p[1] - POINT_MASS_GOAL[1]).powi(2)).sqrt();
                let effort = a[0] * a[0] + a[1] * a[1];
                let reward = -dist - 0.01 * effort;
                let mut next = vec![0.0; 4];
                for d in 0..2 {
                    next[d] = p[d] + POINT_MASS_DT * v[d];
                    next[2 + d] = v[d] + POINT_MASS_DT * (a[d] - POINT_MASS_DRAG * v[d]);
                }
                Step {
                    next_state: next,
                    reward,
                    done: false,
                }
            }
            EnvId::GaussianBandit => {
                let mean = -(a[0] - BANDIT_OPTIMUM).powi(2);
                let noise = Normal::new(0.0, BANDIT_NOISE).expect("positive sigma");
                Step {
                    next_state: state.to_vec(),
                    reward: mean + noise.sample(rng),
                    done: true,
                }
            }
        }
    }

    /// The scripted expert: PD control toward the goal, or the bandit optimum.
    pub fn expert_action(self, state: &[f64]) -> Vec<f64> {
        match self {
            EnvId::PointMass => (0..2)
                .map(|d| {
                    (PD_KP * (POINT_MASS_GOAL[d] - state[d]) - PD_KD * state[2 + d]).clamp(-1.0, 1.0)
                })
                .collect(),
            EnvId::GaussianBandit => vec![BANDIT_OPTIMUM],
        }
    }

    /// Run one episode under `policy`, returning the undiscounted return.
    pub fn rollout(
        self,
        rng: &mut impl Rng,
        mut policy: impl FnMut(&[f64], &mut dyn rand::RngCore) -> Vec<f64>,
    ) -> f64 {
        let mut state = self.reset(rng);
        let mut total = 0.0;
        for _ in 0..self.horizon() {
            let action = policy(&state, rng);
            let step = self.step(&state, &action, rng);
            total += step.reward;
            state = step.next_state;
            if step.done {
                break;
            }
        }
        total
    }
}

// Measured by `measure_point_mass_references` (see tests below).
const POINT_MASS_EXPERT_RETURN: f64 = -34.809;
const POINT_MASS_RANDOM_RETURN: f64 = -136.635;

impl fmt::Display for EnvId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EnvId::PointMass => "point-mass",
            EnvId::GaussianBandit => "gaussian-bandit",
        })
    }
}

impl FromStr for EnvId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "point-mass" | "pointmass" => Ok(EnvId::PointMass),
            "gaussian-bandit" | "bandit" => Ok(EnvId::GaussianBandit),
            other => Err(Error::Config(format!("unknown environment `{other}`"))),
        }
    }
}

/// Monte-Carlo estimate of expert and uniform-random mean returns.
pub fn measure_references(env: EnvId, episodes: usize, seed: u64) -> ReferenceReturns {
    let mut rng = crate::seeding::rng(seed, &[crate::seeding::stream::EVAL, env as u64]);
    let expert = (0..episodes)
        .map(|_| env.rollout(&mut rng, |s, _| env.expert_action(s)))
        .sum::<f64>()
        / episodes as f64;
    let random = (0..episodes)
        .map(|_| {
            env.rollout(&mut rng, |_, r| {
                (0..env.action_dim()).map(|_| r.gen_range(-1.0..=1.0)).collect()
            })
        })
        .sum::<f64>()
        / episodes as f64;
    ReferenceReturns { random, expert }
}
