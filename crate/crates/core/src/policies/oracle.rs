//! Exact planning on the joint truncated meta-state space, for tiny
//! instances used as ground truth in tests.

use crate::environment::{Action, MetaState};
use crate::error::{contract, Error, Result};
use crate::markov::{PredictiveTable, SystemParams};

use super::rvi::relative_value_iteration;

/// Largest joint state space the oracle will enumerate.
pub const ORACLE_STATE_BUDGET: usize = 100_000;

/// Number of joint truncated meta-states, or `None` on overflow.
pub fn joint_state_count(theta: &SystemParams, n_cap: usize) -> Option<usize> {
    theta.arms().iter().try_fold(1usize, |acc, arm| {
        acc.checked_mul(arm.num_states().checked_mul(n_cap)?)
    })
}

/// The joint meta-state space with every elapsed time capped at `n_cap`.
#[derive(Debug, Clone)]
pub struct JointStates {
    n_cap: usize,
    states: Vec<usize>,
    tables: Vec<PredictiveTable>,
    total: usize,
}

impl JointStates {
    pub fn new(theta: &SystemParams, n_cap: usize, budget: usize) -> Result<Self> {
        if n_cap == 0 {
            return Err(contract("n_cap must be positive"));
        }
        let total = joint_state_count(theta, n_cap).unwrap_or(usize::MAX);
        if total > budget {
            return Err(Error::StateBudget {
                states: total,
                budget,
            });
        }
        Ok(Self {
            n_cap,
            states: theta.arms().iter().map(|a| a.num_states()).collect(),
            tables: theta.arms().iter().map(PredictiveTable::new).collect(),
            total,
        })
    }

    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn num_arms(&self) -> usize {
        self.states.len()
    }

    fn radix(&self, k: usize) -> usize {
        self.states[k] * self.n_cap
    }

    /// Joint index of a meta-state, clamping elapsed times to the cap.
    pub fn encode(&self, meta: &MetaState) -> usize {
        let mut x = 0;
        for k in (0..self.num_arms()).rev() {
            let (sigma, n) = meta.arm(k);
            let local = (n.clamp(1, self.n_cap) - 1) * self.states[k] + sigma;
            x = x * self.radix(k) + local;
        }
        x
    }

    fn locals(&self, mut x: usize) -> Vec<usize> {
        (0..self.num_arms())
            .map(|k| {
                let r = self.radix(k);
                let local = x % r;
                x /= r;
                local
            })
            .collect()
    }

    fn compose(&self, locals: &[usize]) -> usize {
        locals
            .iter()
            .enumerate()
            .rev()
            .fold(0, |acc, (k, &l)| acc * self.radix(k) + l)
    }

    pub fn decode(&self, x: usize) -> MetaState {
        let (mut sigma, mut elapsed) = (Vec::new(), Vec::new());
        for (k, local) in self.locals(x).into_iter().enumerate() {
            sigma.push(local % self.states[k]);
            elapsed.push(local / self.states[k] + 1);
        }
        MetaState::new(sigma, elapsed).expect("decoded meta-state is valid")
    }

    /// Expected reward of `action` in joint state `x`.
    pub fn reward(&self, x: usize, action: &Action) -> f64 {
        let locals = self.locals(x);
        action
            .active_arms()
            .map(|k| {
                let (s, n) = (locals[k] % self.states[k], locals[k] / self.states[k] + 1);
                self.tables[k].expected_reward(s, n)
            })
            .sum()
    }

    /// Calls `visit(next, probability)` for every successor of `x`.
    pub fn for_each_successor(&self, x: usize, action: &Action, mut visit: impl FnMut(usize, f64)) {
        let mut next = self.locals(x);
        let mut active = Vec::new();
        for (k, local) in next.iter_mut().enumerate() {
            if action.is_active(k) {
                active.push((k, *local));
            } else if *local + self.states[k] < self.radix(k) {
                *local += self.states[k];
            }
        }
        self.expand(&active, 0, 1.0, &mut next, &mut visit);
    }

    fn expand(
        &self,
        active: &[(usize, usize)],
        depth: usize,
        prob: f64,
        next: &mut [usize],
        visit: &mut impl FnMut(usize, f64),
    ) {
        let Some(&(k, local)) = active.get(depth) else {
            visit(self.compose(next), prob);
            return;
        };
        let (s, n) = (local % self.states[k], local / self.states[k] + 1);
        for (obs, &p) in self.tables[k].distribution(s, n).iter().enumerate() {
            if p > 0.0 {
                next[k] = obs;
                self.expand(active, depth + 1, prob * p, next, visit);
            }
        }
    }
}

/// All actions pulling exactly `n_active` of `num_arms` arms.
pub(crate) fn all_actions(num_arms: usize, n_active: usize) -> Vec<Action> {
    fn rec(start: usize, left: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Action>) {
        if left == 0 {
            out.push(Action::from_arms(k, cur).expect("distinct arms"));
            return;
        }
        for arm in start..=k - left {
            cur.push(arm);
            rec(arm + 1, left - 1, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, n_active, num_arms, &mut Vec::new(), &mut out);
    out
}

/// Greedy policy of the solved joint problem.
#[derive(Debug, Clone)]
pub struct TabularPolicy {
    space: JointStates,
    actions: Vec<Action>,
    choice: Vec<usize>,
}

impl TabularPolicy {
    pub fn select(&self, meta: &MetaState) -> Result<Action> {
        if meta.num_arms() != self.space.num_arms() {
            return Err(contract("meta-state arm count does not match the policy"));
        }
        Ok(self.actions[self.choice[self.space.encode(meta)]].clone())
    }

    pub fn space(&self) -> &JointStates {
        &self.space
    }
}

/// Relative value iteration on the joint truncated problem.
///
/// Returns the greedy policy and its gain. Only small instances are
/// accepted (`K <= 3` and at most [`ORACLE_STATE_BUDGET`] joint states).
pub fn oracle_vi_policy(
    theta: &SystemParams,
    n_active: usize,
    n_cap: usize,
    tol: f64,
) -> Result<(TabularPolicy, f64)> {
    let k = theta.num_arms();
    if k > 3 {
        return Err(contract(format!("oracle supports at most 3 arms, got {k}")));
    }
    if n_active == 0 || n_active > k {
        return Err(contract(format!("cannot pull {n_active} of {k} arms")));
    }
    let space = JointStates::new(theta, n_cap, ORACLE_STATE_BUDGET)?;
    let actions = all_actions(k, n_active);
    // Successor lists per (state, action), built once.
    let mut successors: Vec<Vec<(usize, f64)>> = Vec::with_capacity(space.len() * actions.len());
    let mut rewards = Vec::with_capacity(space.len() * actions.len());
    for x in 0..space.len() {
        for a in &actions {
            let mut list = Vec::new();
            space.for_each_successor(x, a, |y, p| list.push((y, p)));
            successors.push(list);
            rewards.push(space.reward(x, a));
        }
    }
    let na = actions.len();
    let q = |x: usize, a: usize, h: &[f64]| {
        let i = x * na + a;
        rewards[i] + successors[i].iter().map(|&(y, p)| p * h[y]).sum::<f64>()
    };
    let mut h = vec![0.0; space.len()];
    let gain = relative_value_iteration(&mut h, tol, 1_000_000, 0.5, |h, image| {
        for (x, slot) in image.iter_mut().enumerate() {
            *slot = (0..na)
                .map(|a| q(x, a, h))
                .fold(f64::NEG_INFINITY, f64::max);
        }
    })?;
    let choice = (0..space.len())
        .map(|x| {
            // First maximiser, so ties follow action enumeration order.
            let mut best = 0;
            for a in 1..na {
                if q(x, a, &h) > q(x, best, &h) + 1e-12 {
                    best = a;
                }
            }
            best
        })
        .collect();
    Ok((
        TabularPolicy {
            space,
            actions,
            choice,
        },
        gain,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::markov::stationary_distribution;

    #[test]
    fn single_arm_gain_is_active_stationary_reward() {
        let theta = SystemParams::gilbert_elliott(&[(0.3, 0.8)]).unwrap();
        let (_, gain) = oracle_vi_policy(&theta, 1, 10, 1e-11).unwrap();
        let pi = stationary_distribution(theta.arm(0).active()).unwrap();
        let want = theta.arm(0).expected_reward(&pi);
        assert!((gain - want).abs() < 1e-9, "{gain} vs {want}");
    }

    #[test]
    fn iid_pair_gain_is_one_half() {
        let theta = SystemParams::gilbert_elliott(&[(0.5, 0.5), (0.5, 0.5)]).unwrap();
        let (_, gain) = oracle_vi_policy(&theta, 1, 6, 1e-11).unwrap();
        assert!((gain - 0.5).abs() < 1e-9);
    }

    #[test]
    fn encode_decode_round_trip() {
        let theta = SystemParams::gilbert_elliott(&[(0.3, 0.7), (0.4, 0.6), (0.2, 0.5)]).unwrap();
        let space = JointStates::new(&theta, 4, 1000).unwrap();
        assert_eq!(space.len(), 512);
        for x in 0..space.len() {
            assert_eq!(space.encode(&space.decode(x)), x);
        }
        let far = MetaState::new(vec![1, 0, 1], vec![9, 4, 1]).unwrap();
        assert_eq!(space.decode(space.encode(&far)).elapsed(), &[4, 4, 1]);
    }

    #[test]
    fn successor_probabilities_sum_to_one() {
        let theta = SystemParams::gilbert_elliott(&[(0.3, 0.7), (0.4, 0.6), (0.2, 0.5)]).unwrap();
        let space = JointStates::new(&theta, 3, 1000).unwrap();
        for a in all_actions(3, 2) {
            for x in 0..space.len() {
                let mut total = 0.0;
                space.for_each_successor(x, &a, |_, p| total += p);
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn budget_and_size_limits() {
        let theta = SystemParams::gilbert_elliott(&[(0.3, 0.7); 4]).unwrap();
        assert!(matches!(
            oracle_vi_policy(&theta, 1, 2, 1e-9),
            Err(Error::Contract(_))
        ));
        let three = SystemParams::gilbert_elliott(&[(0.3, 0.7); 3]).unwrap();
        assert!(matches!(
            oracle_vi_policy(&three, 1, 100, 1e-9),
            Err(Error::StateBudget { .. })
        ));
    }

    #[test]
    fn action_enumeration() {
        assert_eq!(all_actions(4, 2).len(), 6);
        assert_eq!(all_actions(3, 3).len(), 1);
        assert!(all_actions(5, 2).iter().all(|a| a.num_active() == 2));
    }
}
