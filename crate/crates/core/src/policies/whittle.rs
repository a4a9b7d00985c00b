//! Whittle indices by subsidy calibration.
//!
//! For one arm in isolation, a passive step earns a subsidy `lambda`. The
//! arm's belief chain lives on meta-states `(sigma, n)` with `n` capped at
//! `n_cap` (beliefs past the cap are clamped to the cap's value). The index
//! at `(sigma, n)` is the subsidy at which both actions are equally good
//! there, located by bisection on `[0, 1]`. Each subsidy problem is solved
//! exactly through its renewal structure (see [`SubsidyProblem::solve`]);
//! relative value iteration is kept as a fallback and a cross-check.

use crate::error::{contract, Error, Result};
use crate::markov::{ArmModel, PredictiveTable};

use super::rvi::relative_value_iteration;

/// Numerical settings for the index computation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WhittleOptions {
    /// Elapsed times at or beyond this are treated alike.
    pub n_cap: usize,
    /// Bisection stops once the bracket is this narrow.
    pub tol: f64,
    /// Iteration budget for each inner solve.
    pub max_iterations: usize,
}

impl WhittleOptions {
    pub fn new(n_cap: usize, tol: f64) -> Self {
        Self {
            n_cap,
            tol,
            max_iterations: 200_000,
        }
    }

    fn check(&self) -> Result<()> {
        if self.n_cap == 0 {
            return Err(contract("n_cap must be positive"));
        }
        if !(self.tol > 0.0 && self.tol < 1.0) {
            return Err(contract(format!(
                "tolerance {} must lie in (0,1)",
                self.tol
            )));
        }
        Ok(())
    }

    fn vi_tol(&self) -> f64 {
        (self.tol * 1e-3).min(1e-9)
    }
}

const DAMPING: f64 = 0.5;
// Slack when comparing gap signs, to absorb value-iteration error.
const SIGN_SLACK: f64 = 1e-8;
// Gaps this small count as indifference during bisection.
const TIE_SLACK: f64 = 1e-10;

/// Optimal gain and relative values of one subsidy problem.
#[derive(Debug, Clone)]
pub struct SubsidySolution {
    pub gain: f64,
    pub values: Vec<f64>,
}

/// The single-arm subsidy problem on the truncated belief chain.
#[derive(Debug, Clone)]
pub struct SubsidyProblem {
    states: usize,
    n_cap: usize,
    // dist[x * states + s]: predictive distribution at point x.
    dist: Vec<f64>,
    // Expected reward of pulling at point x.
    reward: Vec<f64>,
}

impl SubsidyProblem {
    pub fn new(arm: &ArmModel, n_cap: usize) -> Result<Self> {
        if n_cap == 0 {
            return Err(contract("n_cap must be positive"));
        }
        let table = PredictiveTable::new(arm);
        let states = arm.num_states();
        let mut dist = Vec::with_capacity(states * states * n_cap);
        let mut reward = Vec::with_capacity(states * n_cap);
        for n in 1..=n_cap {
            for sigma in 0..states {
                dist.extend_from_slice(table.distribution(sigma, n));
                reward.push(table.expected_reward(sigma, n));
            }
        }
        Ok(Self {
            states,
            n_cap,
            dist,
            reward,
        })
    }

    pub fn num_points(&self) -> usize {
        self.states * self.n_cap
    }

    /// Index of meta-state `(sigma, n)`, clamping `n` to the cap.
    pub fn point(&self, sigma: usize, elapsed: usize) -> usize {
        (elapsed.clamp(1, self.n_cap) - 1) * self.states + sigma
    }

    fn passive_next(&self, x: usize) -> usize {
        if x + self.states < self.num_points() {
            x + self.states
        } else {
            x
        }
    }

    fn q_active(&self, x: usize, h: &[f64]) -> f64 {
        // After a pull the arm sits at (observed, 1), i.e. point `observed`.
        self.reward[x] + self.continuation(x, h)
    }

    fn continuation(&self, x: usize, h: &[f64]) -> f64 {
        let row = &self.dist[x * self.states..(x + 1) * self.states];
        row.iter().zip(h).map(|(p, v)| p * v).sum::<f64>()
    }

    fn q_passive(&self, x: usize, lambda: f64, h: &[f64]) -> f64 {
        lambda + h[self.passive_next(x)]
    }

    /// Solves the subsidy problem by relative value iteration, warm-started
    /// from `h`, and returns the optimal gain. Convergence degrades near
    /// subsidies where passivity ties with the best pulling cycle.
    pub fn solve_rvi(
        &self,
        lambda: f64,
        h: &mut [f64],
        tol: f64,
        max_iterations: usize,
    ) -> Result<f64> {
        assert_eq!(h.len(), self.num_points());
        relative_value_iteration(h, tol, max_iterations, DAMPING, |h, image| {
            for (x, slot) in image.iter_mut().enumerate() {
                *slot = self.q_active(x, h).max(self.q_passive(x, lambda, h));
            }
        })
    }

    /// Active-minus-passive value at point `x` given relative values `h`.
    pub fn gap_with(&self, lambda: f64, x: usize, h: &[f64]) -> f64 {
        self.q_active(x, h) - self.q_passive(x, lambda, h)
    }

    /// Exact solution under subsidy `lambda`: optimal gain and relative
    /// values at every point.
    ///
    /// Every pull returns the arm to a reset point `(s, 1)`, so a policy is
    /// summarised by how long it waits on each reset path before pulling.
    /// That semi-Markov problem on the reset points is solved by policy
    /// iteration; relative values elsewhere follow by a backward pass over
    /// elapsed times. If no pulling cycle beats the subsidy, the gain is
    /// `lambda` and the values are the best total excess over `lambda`.
    pub fn solve(&self, lambda: f64, opts: &WhittleOptions) -> Result<SubsidySolution> {
        match self.best_cycle(lambda, opts)? {
            Some((gain, reset_values)) if gain > lambda => {
                let values = self.backward_pass(lambda, gain, &reset_values);
                return Ok(SubsidySolution { gain, values });
            }
            Some(_) => {}
            // Multichain embedded policy: fall back to value iteration.
            None => {
                let mut h = vec![0.0; self.num_points()];
                let gain = self.solve_rvi(lambda, &mut h, opts.vi_tol(), opts.max_iterations)?;
                return Ok(SubsidySolution { gain, values: h });
            }
        }
        let reset_values = self.excess_values(lambda, opts)?;
        let values = self.backward_pass(lambda, lambda, &reset_values);
        Ok(SubsidySolution {
            gain: lambda,
            values,
        })
    }

    /// Active-minus-passive value at point `x` under subsidy `lambda`.
    pub fn gap(&self, lambda: f64, x: usize, opts: &WhittleOptions) -> Result<f64> {
        let sol = self.solve(lambda, opts)?;
        Ok(self.gap_with(lambda, x, &sol.values))
    }

    // Value of pulling after waiting on the reset path of `s` until
    // elapsed time `m`, net of `gain` per step.
    fn wait_then_pull(
        &self,
        s: usize,
        m: usize,
        lambda: f64,
        gain: f64,
        reset_values: &[f64],
    ) -> f64 {
        let x = (m - 1) * self.states + s;
        lambda * (m - 1) as f64 + self.reward[x] - gain * m as f64
            + self.continuation(x, reset_values)
    }

    /// Policy iteration over pull times on the reset paths. Returns the best
    /// gain among policies that always pull eventually, with the reset
    /// points' relative values, or `None` if an evaluated policy is
    /// multichain.
    fn best_cycle(&self, lambda: f64, opts: &WhittleOptions) -> Result<Option<(f64, Vec<f64>)>> {
        let s_count = self.states;
        let mut wait = vec![1usize; s_count];
        for _ in 0..opts.max_iterations.max(1) {
            // Unknowns: h[0..S] and g, with h[0] = 0.
            let mut a = vec![vec![0.0; s_count + 2]; s_count + 1];
            for s in 0..s_count {
                let m = wait[s];
                let x = (m - 1) * s_count + s;
                let row = &mut a[s];
                row[s] += 1.0;
                for (sp, p) in self.dist[x * s_count..(x + 1) * s_count].iter().enumerate() {
                    row[sp] -= p;
                }
                row[s_count] = m as f64;
                row[s_count + 1] = lambda * (m - 1) as f64 + self.reward[x];
            }
            a[s_count][0] = 1.0;
            let Some(sol) = solve_dense(a) else {
                return Ok(None);
            };
            let (h, gain) = (&sol[..s_count], sol[s_count]);
            let mut changed = false;
            for s in 0..s_count {
                let current = self.wait_then_pull(s, wait[s], lambda, gain, h);
                let mut best = (current, wait[s]);
                for m in 1..=self.n_cap {
                    let v = self.wait_then_pull(s, m, lambda, gain, h);
                    if v > best.0 + 1e-12 * (1.0 + best.0.abs()) {
                        best = (v, m);
                    }
                }
                if best.1 != wait[s] {
                    wait[s] = best.1;
                    changed = true;
                }
            }
            if !changed {
                return Ok(Some((gain, h.to_vec())));
            }
        }
        Err(Error::NonConvergence {
            what: "subsidy policy iteration",
            residual: f64::NAN,
            iterations: opts.max_iterations,
        })
    }

    /// Best total excess reward over `lambda` from each reset point, where
    /// idling forever is worth zero. Valid when no pulling cycle beats
    /// `lambda`.
    fn excess_values(&self, lambda: f64, opts: &WhittleOptions) -> Result<Vec<f64>> {
        let mut h = vec![0.0; self.states];
        let mut residual = f64::INFINITY;
        for _ in 0..opts.max_iterations {
            let next: Vec<f64> = (0..self.states)
                .map(|s| {
                    (1..=self.n_cap)
                        .map(|m| self.wait_then_pull(s, m, lambda, lambda, &h))
                        .fold(0.0, f64::max)
                })
                .collect();
            residual = next
                .iter()
                .zip(&h)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            h = next;
            if residual <= 1e-14 {
                return Ok(h);
            }
        }
        Err(Error::NonConvergence {
            what: "excess value iteration",
            residual,
            iterations: opts.max_iterations,
        })
    }

    /// Relative values at every point from those at the reset points.
    fn backward_pass(&self, lambda: f64, gain: f64, reset_values: &[f64]) -> Vec<f64> {
        let mut values = vec![0.0; self.num_points()];
        for sigma in 0..self.states {
            let cap = (self.n_cap - 1) * self.states + sigma;
            let pull = |x: usize| self.reward[x] - gain + self.continuation(x, reset_values);
            // Waiting forever at the cap earns `lambda - gain` per step,
            // which is worth zero when the two agree and minus infinity
            // otherwise.
            values[cap] = if lambda >= gain {
                pull(cap).max(0.0)
            } else {
                pull(cap)
            };
            for n in (1..self.n_cap).rev() {
                let x = (n - 1) * self.states + sigma;
                values[x] = pull(x).max(lambda - gain + values[x + self.states]);
            }
        }
        values
    }

    /// Bisection for the indifference subsidy at point `x`.
    ///
    /// Average-reward problems can be indifferent at `x` over a whole range
    /// of subsidies (waiting is free once passivity is optimal). The index
    /// is the top of that range: the smallest subsidy at which passive is
    /// strictly better, which is also the vanishing-discount limit.
    fn index_at(&self, x: usize, opts: &WhittleOptions) -> Result<f64> {
        let mut evaluated: Vec<(f64, f64)> = Vec::with_capacity(32);
        let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
        let gap_lo = self.gap(lo, x, opts)?;
        evaluated.push((lo, gap_lo));
        let gap_hi = self.gap(hi, x, opts)?;
        evaluated.push((hi, gap_hi));
        let active_weakly = |g: f64| g >= -TIE_SLACK;
        let result = if !active_weakly(gap_lo) {
            lo
        } else if active_weakly(gap_hi) {
            hi
        } else {
            while hi - lo > opts.tol {
                let mid = 0.5 * (lo + hi);
                let g = self.gap(mid, x, opts)?;
                evaluated.push((mid, g));
                if active_weakly(g) {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            0.5 * (lo + hi)
        };
        self.check_monotone(x, &mut evaluated)?;
        Ok(result)
    }

    fn check_monotone(&self, x: usize, evaluated: &mut [(f64, f64)]) -> Result<()> {
        evaluated.sort_by(|a, b| a.0.total_cmp(&b.0));
        // Once passive is strictly preferred, active must never come back.
        let mut passive_from: Option<f64> = None;
        for &(lambda, gap) in evaluated.iter() {
            if gap < -SIGN_SLACK {
                passive_from.get_or_insert(lambda);
            } else if gap > SIGN_SLACK {
                if let Some(start) = passive_from {
                    return Err(Error::Indexability {
                        sigma: x % self.states,
                        elapsed: x / self.states + 1,
                        detail: format!(
                            "passive preferred at subsidy {start:.6} but active preferred again at {lambda:.6}"
                        ),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Gaussian elimination on an augmented system; `None` if singular.
fn solve_dense(mut a: Vec<Vec<f64>>) -> Option<Vec<f64>> {
    let n = a.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs()))?;
        if a[pivot][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, pivot);
        for r in 0..n {
            if r != col {
                let f = a[r][col] / a[col][col];
                if f != 0.0 {
                    for c in col..=n {
                        a[r][c] -= f * a[col][c];
                    }
                }
            }
        }
    }
    Some((0..n).map(|i| a[i][n] / a[i][i]).collect())
}

/// Whittle index of one arm at `(sigma, elapsed)`.
pub fn whittle_index(
    arm: &ArmModel,
    sigma: usize,
    elapsed: usize,
    opts: &WhittleOptions,
) -> Result<f64> {
    opts.check()?;
    if elapsed == 0 || sigma >= arm.num_states() {
        return Err(contract(format!(
            "invalid belief point ({sigma}, {elapsed})"
        )));
    }
    let problem = SubsidyProblem::new(arm, opts.n_cap)?;
    problem.index_at(problem.point(sigma, elapsed), opts)
}

/// Whittle indices of one arm at every truncated belief point, laid out
/// as `values[(n - 1) * states + sigma]` for `n` in `1..=n_cap`.
pub fn whittle_table(arm: &ArmModel, opts: &WhittleOptions) -> Result<Vec<f64>> {
    opts.check()?;
    let problem = SubsidyProblem::new(arm, opts.n_cap)?;
    (0..problem.num_points())
        .map(|x| problem.index_at(x, opts))
        .collect()
}
