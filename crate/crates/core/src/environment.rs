//! The simulated restless process.
//!
//! [`Environment`] is the only holder of the hidden arm states. A learner
//! sees [`MetaState`] and [`StepOutcome`] values and nothing else.
//!
//! Timing: at step `t` every arm makes one transition and the active arms
//! are observed after it. The transition an arm makes right after it was
//! pulled uses its active matrix; all other transitions use the passive
//! matrix. An observation made `n` steps after the previous one in state
//! `sigma` is therefore distributed as `e_sigma · active · passive^(n-1)`,
//! which is what [`crate::markov::n_step_distribution`] computes.

use rand::Rng;

use crate::error::{contract, Result};
use crate::markov::{n_step_distribution, PredictiveTable, SystemParams};

/// Per-arm last observed state and time elapsed since that observation.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MetaState {
    last_obs: Vec<usize>,
    elapsed: Vec<usize>,
}

impl MetaState {
    pub fn new(last_obs: Vec<usize>, elapsed: Vec<usize>) -> Result<Self> {
        if last_obs.len() != elapsed.len() {
            return Err(contract("state and elapsed vectors differ in length"));
        }
        if elapsed.contains(&0) {
            return Err(contract("elapsed times must be at least 1"));
        }
        Ok(Self { last_obs, elapsed })
    }

    pub fn num_arms(&self) -> usize {
        self.last_obs.len()
    }

    pub fn last_obs(&self) -> &[usize] {
        &self.last_obs
    }

    pub fn elapsed(&self) -> &[usize] {
        &self.elapsed
    }

    pub fn arm(&self, k: usize) -> (usize, usize) {
        (self.last_obs[k], self.elapsed[k])
    }

    /// Advances the meta-state past one step: observed arms reset to
    /// `(observed, 1)`, all others age by one.
    pub fn update(&mut self, action: &Action, observations: &[Observation]) -> Result<()> {
        if action.num_arms() != self.num_arms() {
            return Err(contract("action and meta-state differ in arm count"));
        }
        let mut seen = vec![false; self.num_arms()];
        for obs in observations {
            if obs.arm >= self.num_arms() || !action.is_active(obs.arm) {
                return Err(contract(format!("observation for passive arm {}", obs.arm)));
            }
            if seen[obs.arm] {
                return Err(contract(format!(
                    "duplicate observation for arm {}",
                    obs.arm
                )));
            }
            seen[obs.arm] = true;
        }
        if seen.iter().zip(action.flags()).any(|(&s, &a)| s != a) {
            return Err(contract("missing observation for an active arm"));
        }
        for e in self.elapsed.iter_mut() {
            *e += 1;
        }
        for obs in observations {
            self.last_obs[obs.arm] = obs.state;
            self.elapsed[obs.arm] = 1;
        }
        Ok(())
    }
}

/// Which arms are pulled at a step.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Action {
    active: Vec<bool>,
}

impl Action {
    pub fn from_flags(active: Vec<bool>) -> Self {
        Self { active }
    }

    /// Action on `num_arms` arms pulling exactly the listed ones.
    pub fn from_arms(num_arms: usize, arms: &[usize]) -> Result<Self> {
        let mut active = vec![false; num_arms];
        for &k in arms {
            if k >= num_arms || active[k] {
                return Err(contract(format!("invalid or repeated arm {k}")));
            }
            active[k] = true;
        }
        Ok(Self { active })
    }

    pub fn num_arms(&self) -> usize {
        self.active.len()
    }

    pub fn num_active(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }

    pub fn is_active(&self, k: usize) -> bool {
        self.active[k]
    }

    pub fn flags(&self) -> &[bool] {
        &self.active
    }

    pub fn active_arms(&self) -> impl Iterator<Item = usize> + '_ {
        self.active
            .iter()
            .enumerate()
            .filter(|(_, &a)| a)
            .map(|(k, _)| k)
    }
}

/// The true state of every arm.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HiddenState {
    pub states: Vec<usize>,
}

impl HiddenState {
    pub fn uniform(num_arms: usize, state: usize) -> Self {
        Self {
            states: vec![state; num_arms],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Observation {
    pub arm: usize,
    pub state: usize,
}

/// What the learner gets back from one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    /// One entry per active arm, in increasing arm order.
    pub observations: Vec<Observation>,
    pub reward: f64,
}

/// A running instance of the restless process.
#[derive(Debug, Clone)]
pub struct Environment<'a> {
    params: &'a SystemParams,
    n_active: usize,
    hidden: HiddenState,
    // Whether the arm's next transition uses the active matrix.
    pulled_last: Vec<bool>,
}

impl<'a> Environment<'a> {
    /// Starts the process in `init`; the learner's first meta-state treats
    /// every initial state as observed one step ago.
    pub fn reset(
        params: &'a SystemParams,
        n_active: usize,
        init: HiddenState,
    ) -> Result<(Self, MetaState)> {
        let k = params.num_arms();
        if init.states.len() != k {
            return Err(contract(format!(
                "{} initial states for {k} arms",
                init.states.len()
            )));
        }
        if n_active == 0 || n_active > k {
            return Err(contract(format!("cannot pull {n_active} of {k} arms")));
        }
        for (arm, &s) in init.states.iter().enumerate() {
            if s >= params.arm(arm).num_states() {
                return Err(contract(format!(
                    "initial state {s} out of range for arm {arm}"
                )));
            }
        }
        let meta = MetaState {
            last_obs: init.states.clone(),
            elapsed: vec![1; k],
        };
        let env = Self {
            params,
            n_active,
            hidden: init,
            pulled_last: vec![true; k],
        };
        Ok((env, meta))
    }

    pub fn params(&self) -> &SystemParams {
        self.params
    }

    pub fn n_active(&self) -> usize {
        self.n_active
    }

    #[cfg(test)]
    pub(crate) fn hidden(&self) -> &HiddenState {
        &self.hidden
    }

    /// Moves every arm one step and observes the active ones.
    pub fn step<R: Rng + ?Sized>(&mut self, action: &Action, rng: &mut R) -> Result<StepOutcome> {
        if action.num_arms() != self.params.num_arms() || action.num_active() != self.n_active {
            return Err(contract(format!(
                "action must pull exactly {} of {} arms",
                self.n_active,
                self.params.num_arms()
            )));
        }
        let mut observations = Vec::with_capacity(self.n_active);
        let mut reward = 0.0;
        for (k, arm) in self.params.arms().iter().enumerate() {
            let matrix = if self.pulled_last[k] {
                arm.active()
            } else {
                arm.passive()
            };
            let next = sample_row(matrix.row(self.hidden.states[k]), rng);
            self.hidden.states[k] = next;
            self.pulled_last[k] = action.is_active(k);
            if action.is_active(k) {
                observations.push(Observation {
                    arm: k,
                    state: next,
                });
                reward += arm.reward(next);
            }
        }
        Ok(StepOutcome {
            observations,
            reward,
        })
    }
}

/// Inverse-CDF draw from a probability row.
pub(crate) fn sample_row<R: Rng + ?Sized>(row: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left a sliver above the last cumulative sum.
    row.iter().rposition(|&p| p > 0.0).unwrap_or(row.len() - 1)
}

/// Expected reward of `action` at meta-state `meta` under `params`.
pub fn expected_reward(params: &SystemParams, meta: &MetaState, action: &Action) -> Result<f64> {
    let mut total = 0.0;
    for k in action.active_arms() {
        let arm = params.arm(k);
        let (sigma, n) = meta.arm(k);
        total += arm.expected_reward(&n_step_distribution(arm, sigma, n)?);
    }
    Ok(total)
}

/// Predictive tables for every arm of a system, for per-step use.
#[derive(Debug, Clone)]
pub struct BeliefModel {
    tables: Vec<PredictiveTable>,
}

impl BeliefModel {
    pub fn new(params: &SystemParams) -> Self {
        Self {
            tables: params.arms().iter().map(PredictiveTable::new).collect(),
        }
    }

    pub fn table(&self, k: usize) -> &PredictiveTable {
        &self.tables[k]
    }

    /// Same value as [`expected_reward`], read from the tables.
    pub fn expected_reward(&self, meta: &MetaState, action: &Action) -> f64 {
        action
            .active_arms()
            .map(|k| {
                let (sigma, n) = meta.arm(k);
                self.tables[k].expected_reward(sigma, n)
            })
            .sum()
    }
}
