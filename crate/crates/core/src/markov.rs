//! Finite Markov chain primitives.
//!
//! States are dense integers `0..size`. A [`TransitionMatrix`] is validated
//! at construction (entries in `[0,1]`, rows summing to one within
//! [`ROW_SUM_TOL`]), so every matrix in circulation is row-stochastic.
//! Ergodicity (irreducible and aperiodic) is a separate question answered by
//! [`TransitionMatrix::is_ergodic`].

use crate::error::{contract, Error, Result};

/// Tolerance on row sums and other algebraic identities.
pub const ROW_SUM_TOL: f64 = 1e-12;

/// Tolerance for iterative fixed points.
pub const FIXED_POINT_TOL: f64 = 1e-10;

/// Upper limit on the number of matrix powers tried by [`mixing_time`].
pub const MAX_MIXING_STEPS: usize = 1_000_000;

/// A square row-stochastic matrix, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    size: usize,
    entries: Vec<f64>,
}

impl TransitionMatrix {
    /// Builds a matrix from rows, rejecting anything that is not square and
    /// row-stochastic.
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let size = rows.len();
        if size == 0 {
            return Err(Error::MalformedMatrix("no states".into()));
        }
        let mut entries = Vec::with_capacity(size * size);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != size {
                return Err(Error::MalformedMatrix(format!(
                    "row {i} has {} entries, expected {size}",
                    row.len()
                )));
            }
            for (j, &p) in row.iter().enumerate() {
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::MalformedMatrix(format!(
                        "entry ({i},{j}) = {p} outside [0,1]"
                    )));
                }
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::MalformedMatrix(format!("row {i} sums to {sum}")));
            }
            entries.extend_from_slice(row);
        }
        Ok(Self { size, entries })
    }

    pub fn identity(size: usize) -> Self {
        let mut entries = vec![0.0; size * size];
        for i in 0..size {
            entries[i * size + i] = 1.0;
        }
        Self { size, entries }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, from: usize, to: usize) -> f64 {
        self.entries[from * self.size + to]
    }

    pub fn row(&self, from: usize) -> &[f64] {
        &self.entries[from * self.size..(from + 1) * self.size]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.entries.chunks_exact(self.size)
    }

    /// Matrix product `self · other`.
    pub fn mul(&self, other: &TransitionMatrix) -> TransitionMatrix {
        assert_eq!(self.size, other.size, "dimension mismatch");
        let n = self.size;
        let mut entries = vec![0.0; n * n];
        for i in 0..n {
            for k in 0..n {
                let a = self.entries[i * n + k];
                if a == 0.0 {
                    continue;
                }
                for j in 0..n {
                    entries[i * n + j] += a * other.entries[k * n + j];
                }
            }
        }
        TransitionMatrix { size: n, entries }
    }

    /// `self^power` by repeated squaring; `power = 0` gives the identity.
    pub fn pow(&self, mut power: usize) -> TransitionMatrix {
        let mut result = TransitionMatrix::identity(self.size);
        let mut base = self.clone();
        while power > 0 {
            if power & 1 == 1 {
                result = result.mul(&base);
            }
            power >>= 1;
            if power > 0 {
                base = base.mul(&base);
            }
        }
        result
    }

    /// Row vector times matrix: `dist · self`.
    pub fn propagate(&self, dist: &[f64]) -> Vec<f64> {
        let n = self.size;
        let mut out = vec![0.0; n];
        for (i, &w) in dist.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for (j, o) in out.iter_mut().enumerate() {
                *o += w * self.entries[i * n + j];
            }
        }
        out
    }

    /// Largest deviation of any row sum from one.
    pub fn max_row_defect(&self) -> f64 {
        self.rows()
            .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// True iff the chain is irreducible and aperiodic.
    pub fn is_ergodic(&self) -> bool {
        self.ergodicity_defect().is_none()
    }

    fn ergodicity_defect(&self) -> Option<String> {
        let n = self.size;
        // BFS levels from state 0 over the support graph.
        let mut level = vec![usize::MAX; n];
        level[0] = 0;
        let mut queue = std::collections::VecDeque::from([0usize]);
        while let Some(u) = queue.pop_front() {
            for v in 0..n {
                if self.get(u, v) > 0.0 && level[v] == usize::MAX {
                    level[v] = level[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        if level.contains(&usize::MAX) {
            return Some("state 0 does not reach every state".into());
        }
        // Every state must also reach state 0.
        let mut seen = vec![false; n];
        seen[0] = true;
        let mut stack = vec![0usize];
        while let Some(v) = stack.pop() {
            for u in 0..n {
                if self.get(u, v) > 0.0 && !seen[u] {
                    seen[u] = true;
                    stack.push(u);
                }
            }
        }
        if let Some(u) = seen.iter().position(|&s| !s) {
            return Some(format!("state {u} cannot reach state 0"));
        }
        // Period = gcd over support edges of level[u] + 1 - level[v].
        let mut period = 0usize;
        for u in 0..n {
            for v in 0..n {
                if self.get(u, v) > 0.0 {
                    let d = (level[u] + 1).abs_diff(level[v]);
                    period = gcd(period, d);
                }
            }
        }
        if period != 1 {
            return Some(format!("periodic with period {period}"));
        }
        None
    }
}

fn gcd(mut a: usize, mut b: usize) -> usize {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// One arm: transition matrices for both actions and a known reward table.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmModel {
    active: TransitionMatrix,
    passive: TransitionMatrix,
    rewards: Vec<f64>,
}

impl ArmModel {
    pub fn new(
        active: TransitionMatrix,
        passive: TransitionMatrix,
        rewards: Vec<f64>,
    ) -> Result<Self> {
        if active.size() != passive.size() {
            return Err(contract(format!(
                "active has {} states but passive has {}",
                active.size(),
                passive.size()
            )));
        }
        if rewards.len() != active.size() {
            return Err(contract(format!(
                "{} rewards for {} states",
                rewards.len(),
                active.size()
            )));
        }
        if let Some(r) = rewards.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return Err(contract(format!("reward {r} outside [0,1]")));
        }
        Ok(Self {
            active,
            passive,
            rewards,
        })
    }

    pub fn num_states(&self) -> usize {
        self.active.size()
    }

    pub fn active(&self) -> &TransitionMatrix {
        &self.active
    }

    pub fn passive(&self) -> &TransitionMatrix {
        &self.passive
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    pub fn reward(&self, state: usize) -> f64 {
        self.rewards[state]
    }

    /// Expected reward of a distribution over this arm's states.
    pub fn expected_reward(&self, dist: &[f64]) -> f64 {
        dist.iter().zip(&self.rewards).map(|(p, r)| p * r).sum()
    }

    /// Bit pattern of every parameter, usable as an exact cache key.
    pub fn fingerprint(&self) -> Vec<u64> {
        self.active
            .entries
            .iter()
            .chain(&self.passive.entries)
            .chain(&self.rewards)
            .map(|x| x.to_bits())
            .collect()
    }
}

/// Two-state Gilbert-Elliott channel. State 0 is bad, 1 is good.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GilbertElliott {
    /// P(bad -> good).
    pub p01: f64,
    /// P(good -> good).
    pub p11: f64,
}

impl GilbertElliott {
    pub const BAD: usize = 0;
    pub const GOOD: usize = 1;

    pub fn new(p01: f64, p11: f64) -> Result<Self> {
        for (name, p) in [("p01", p01), ("p11", p11)] {
            if !(p > 0.0 && p < 1.0) {
                return Err(contract(format!("{name} = {p} must lie in (0,1)")));
            }
        }
        Ok(Self { p01, p11 })
    }

    pub fn matrix(&self) -> TransitionMatrix {
        TransitionMatrix {
            size: 2,
            entries: vec![1.0 - self.p01, self.p01, 1.0 - self.p11, self.p11],
        }
    }

    /// Arm with identical active and passive dynamics and reward `r(s) = s`.
    pub fn arm(&self) -> ArmModel {
        let m = self.matrix();
        ArmModel {
            active: m.clone(),
            passive: m,
            rewards: vec![0.0, 1.0],
        }
    }
}

/// The full system parameter: one model per arm.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemParams {
    arms: Vec<ArmModel>,
}

impl SystemParams {
    pub fn new(arms: Vec<ArmModel>) -> Result<Self> {
        if arms.is_empty() {
            return Err(contract("a system needs at least one arm"));
        }
        for (k, arm) in arms.iter().enumerate() {
            if !arm.passive().is_ergodic() {
                return Err(Error::NotErgodic(format!("arm {k} passive chain")));
            }
        }
        Ok(Self { arms })
    }

    pub fn gilbert_elliott(params: &[(f64, f64)]) -> Result<Self> {
        let arms = params
            .iter()
            .map(|&(p01, p11)| GilbertElliott::new(p01, p11).map(|g| g.arm()))
            .collect::<Result<Vec<_>>>()?;
        Self::new(arms)
    }

    pub fn num_arms(&self) -> usize {
        self.arms.len()
    }

    pub fn arm(&self, k: usize) -> &ArmModel {
        &self.arms[k]
    }

    pub fn arms(&self) -> &[ArmModel] {
        &self.arms
    }

    pub fn total_states(&self) -> usize {
        self.arms.iter().map(ArmModel::num_states).sum()
    }
}

/// Validates raw rows and reports whether the chain is ergodic.
///
/// A malformed table is an `Err`; a well-formed but reducible or periodic
/// chain is `Ok(false)`.
pub fn validate_chain(rows: Vec<Vec<f64>>) -> Result<bool> {
    Ok(TransitionMatrix::new(rows)?.is_ergodic())
}

/// Stationary distribution of an ergodic chain.
///
/// Solves `p (P - I) = 0` with the normalisation `sum p = 1` replacing one
/// equation, by Gaussian elimination with partial pivoting.
pub fn stationary_distribution(p: &TransitionMatrix) -> Result<Vec<f64>> {
    if let Some(defect) = p.ergodicity_defect() {
        return Err(Error::NotErgodic(defect));
    }
    let n = p.size();
    // Row i of the system is the balance equation for state i:
    // sum_j p_j P(j,i) - p_i = 0; the last row is the normalisation.
    let mut a = vec![vec![0.0; n + 1]; n];
    for (i, row) in a.iter_mut().enumerate().take(n - 1) {
        for (j, cell) in row.iter_mut().enumerate().take(n) {
            *cell = p.get(j, i) - if i == j { 1.0 } else { 0.0 };
        }
    }
    for cell in a[n - 1].iter_mut() {
        *cell = 1.0;
    }
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs()))
            .unwrap_or(col);
        if a[pivot][col].abs() < 1e-300 {
            return Err(Error::NotErgodic("singular balance equations".into()));
        }
        a.swap(col, pivot);
        for r in 0..n {
            if r != col {
                let factor = a[r][col] / a[col][col];
                if factor != 0.0 {
                    for c in col..=n {
                        a[r][c] -= factor * a[col][c];
                    }
                }
            }
        }
    }
    let mut dist: Vec<f64> = (0..n).map(|i| (a[i][n] / a[i][i]).max(0.0)).collect();
    let total: f64 = dist.iter().sum();
    dist.iter_mut().for_each(|x| *x /= total);

    let residual = l1(&p.propagate(&dist), &dist);
    if residual > FIXED_POINT_TOL {
        return Err(Error::NonConvergence {
            what: "stationary distribution",
            residual,
            iterations: 1,
        });
    }
    Ok(dist)
}

/// Predictive distribution of an arm's state `elapsed` steps after it was
/// observed in `state` at a pull: one active transition followed by
/// `elapsed - 1` passive ones.
pub fn n_step_distribution(arm: &ArmModel, state: usize, elapsed: usize) -> Result<Vec<f64>> {
    if elapsed == 0 {
        return Err(contract("elapsed time must be at least 1"));
    }
    if state >= arm.num_states() {
        return Err(contract(format!("state {state} out of range")));
    }
    let after_pull = arm.active().row(state).to_vec();
    Ok(arm.passive().pow(elapsed - 1).propagate(&after_pull))
}

/// Smallest `t >= 1` at which every row of `P^t` is within `epsilon` (L1) of
/// the stationary distribution.
pub fn mixing_time(p: &TransitionMatrix, epsilon: f64) -> Result<usize> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(contract(format!("epsilon = {epsilon} must lie in (0,1)")));
    }
    let stationary = stationary_distribution(p)?;
    let mut power = p.clone();
    let mut gap = f64::INFINITY;
    for t in 1..=MAX_MIXING_STEPS {
        gap = power
            .rows()
            .map(|row| l1(row, &stationary))
            .fold(0.0, f64::max);
        if gap <= epsilon {
            return Ok(t);
        }
        power = power.mul(p);
    }
    Err(Error::NonConvergence {
        what: "mixing time",
        residual: gap,
        iterations: MAX_MIXING_STEPS,
    })
}

/// Truncation length used by the learner: `ceil(log2 T) * tmix_quarter`.
pub fn horizon_mixing_time(tmix_quarter: usize, horizon: usize) -> Result<usize> {
    if horizon < 2 {
        return Err(contract(format!("horizon {horizon} must be at least 2")));
    }
    if tmix_quarter == 0 {
        return Err(contract("mixing time must be positive"));
    }
    let log2_ceil = (horizon - 1).ilog2() as usize + 1;
    Ok(log2_ceil * tmix_quarter)
}

pub(crate) fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Cached n-step predictive distributions for one arm.
///
/// Rows are tabulated until every starting state is within `1e-14` (L1) of
/// the passive stationary distribution; later elapsed times reuse the last
/// row.
#[derive(Debug, Clone)]
pub struct PredictiveTable {
    states: usize,
    // rows[(n - 1) * states + sigma] is the distribution at elapsed n.
    rows: Vec<Vec<f64>>,
    expected: Vec<f64>,
}

const PLATEAU_TOL: f64 = 1e-14;
const MAX_TABLE_LEN: usize = 200_000;

impl PredictiveTable {
    pub fn new(arm: &ArmModel) -> Self {
        let states = arm.num_states();
        let stationary = stationary_distribution(arm.passive()).ok();
        let mut rows: Vec<Vec<f64>> = (0..states).map(|s| arm.active().row(s).to_vec()).collect();
        let mut last = rows.clone();
        for _ in 1..MAX_TABLE_LEN {
            let converged = match &stationary {
                Some(pi) => last.iter().all(|r| l1(r, pi) <= PLATEAU_TOL),
                None => false,
            };
            if converged {
                break;
            }
            last = last.iter().map(|r| arm.passive().propagate(r)).collect();
            rows.extend(last.iter().cloned());
        }
        let expected = rows.iter().map(|r| arm.expected_reward(r)).collect();
        Self {
            states,
            rows,
            expected,
        }
    }

    fn slot(&self, sigma: usize, elapsed: usize) -> usize {
        debug_assert!(elapsed >= 1 && sigma < self.states);
        let max_n = self.rows.len() / self.states;
        (elapsed.min(max_n) - 1) * self.states + sigma
    }

    pub fn distribution(&self, sigma: usize, elapsed: usize) -> &[f64] {
        &self.rows[self.slot(sigma, elapsed)]
    }

    pub fn probability(&self, sigma: usize, elapsed: usize, observed: usize) -> f64 {
        self.rows[self.slot(sigma, elapsed)][observed]
    }

    /// Expected reward of pulling the arm at meta-state `(sigma, elapsed)`.
    pub fn expected_reward(&self, sigma: usize, elapsed: usize) -> f64 {
        self.expected[self.slot(sigma, elapsed)]
    }

    /// Number of tabulated elapsed times before the plateau.
    pub fn len(&self) -> usize {
        self.rows.len() / self.states
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}
