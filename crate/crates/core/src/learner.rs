//! Thompson sampling with dynamic episodes.
//!
//! The posterior is a product of independent categorical distributions,
//! one per arm, over a finite candidate list. Episodes end when they grow
//! longer than the previous one by more than a step, or when some visit
//! counter more than doubles.

use std::sync::Arc;

use rand::Rng;

use crate::environment::{
    sample_row, Action, BeliefModel, Environment, HiddenState, MetaState, Observation,
};
use crate::error::{contract, Error, Result};
use crate::markov::{horizon_mixing_time, ArmModel, GilbertElliott, PredictiveTable, SystemParams};
use crate::policies::PolicyMapper;
use crate::rng::{stream, Purpose};

/// Tolerance for matching a model against grid candidates.
pub const MATCH_TOL: f64 = 1e-12;

type LabelledArm = (ArmModel, Option<(f64, f64)>);

#[derive(Debug, Clone)]
struct Candidate {
    model: ArmModel,
    table: PredictiveTable,
    label: Option<(f64, f64)>,
}

/// Per-arm candidate models.
#[derive(Debug, Clone)]
pub struct ParamGrid {
    arms: Vec<Arc<[Candidate]>>,
}

impl ParamGrid {
    pub fn new(arms: Vec<Vec<ArmModel>>) -> Result<Self> {
        let arms = arms
            .into_iter()
            .map(|models| models.into_iter().map(|m| (m, None)).collect())
            .collect();
        Self::build(arms)
    }

    /// The same `values x values` Gilbert-Elliott grid for every arm,
    /// ordered by `p01` then `p11`.
    pub fn gilbert_elliott(num_arms: usize, values: &[f64]) -> Result<Self> {
        let pairs: Vec<(f64, f64)> = values
            .iter()
            .flat_map(|&p01| values.iter().map(move |&p11| (p01, p11)))
            .collect();
        let shared = Self::gilbert_elliott_lists(&[pairs])?.arms.remove(0);
        Ok(Self {
            arms: vec![shared; num_arms],
        })
    }

    /// Explicit `(p01, p11)` candidate lists, one per arm.
    pub fn gilbert_elliott_lists(lists: &[Vec<(f64, f64)>]) -> Result<Self> {
        let arms = lists
            .iter()
            .map(|pairs| {
                pairs
                    .iter()
                    .map(|&(p01, p11)| Ok((GilbertElliott::new(p01, p11)?.arm(), Some((p01, p11)))))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Self::build(arms)
    }

    fn build(arms: Vec<Vec<LabelledArm>>) -> Result<Self> {
        if arms.is_empty() {
            return Err(contract("grid has no arms"));
        }
        let mut out = Vec::with_capacity(arms.len());
        for (k, models) in arms.into_iter().enumerate() {
            let Some(first) = models.first() else {
                return Err(contract(format!("arm {k} has no candidates")));
            };
            let states = first.0.num_states();
            if models.iter().any(|(m, _)| m.num_states() != states) {
                return Err(contract(format!(
                    "arm {k} candidates disagree on the state count"
                )));
            }
            // Every candidate must be usable as a system on its own.
            for (m, _) in &models {
                SystemParams::new(vec![m.clone()])?;
            }
            out.push(
                models
                    .into_iter()
                    .map(|(model, label)| Candidate {
                        table: PredictiveTable::new(&model),
                        model,
                        label,
                    })
                    .collect(),
            );
        }
        Ok(Self { arms: out })
    }

    pub fn num_arms(&self) -> usize {
        self.arms.len()
    }

    pub fn num_candidates(&self, k: usize) -> usize {
        self.arms[k].len()
    }

    pub fn num_states(&self, k: usize) -> usize {
        self.arms[k][0].model.num_states()
    }

    pub fn candidate(&self, k: usize, c: usize) -> &ArmModel {
        &self.arms[k][c].model
    }

    /// The `(p01, p11)` pair of a Gilbert-Elliott candidate.
    pub fn label(&self, k: usize, c: usize) -> Option<(f64, f64)> {
        self.arms[k][c].label
    }

    /// Probability of seeing `observed` from `sigma` after `elapsed` steps
    /// under candidate `c` of arm `k`.
    pub fn likelihood(
        &self,
        k: usize,
        c: usize,
        sigma: usize,
        elapsed: usize,
        observed: usize,
    ) -> f64 {
        self.arms[k][c].table.probability(sigma, elapsed, observed)
    }

    /// Index of the candidate of arm `k` equal to `model`, if any.
    pub fn locate(&self, k: usize, model: &ArmModel) -> Option<usize> {
        self.arms[k]
            .iter()
            .position(|c| same_model(&c.model, model))
    }

    /// Candidate indices of every arm of `theta`, if all are on the grid.
    pub fn locate_all(&self, theta: &SystemParams) -> Option<Vec<usize>> {
        if theta.num_arms() != self.num_arms() {
            return None;
        }
        (0..self.num_arms())
            .map(|k| self.locate(k, theta.arm(k)))
            .collect()
    }

    /// The system made of one chosen candidate per arm.
    pub fn assemble(&self, choice: &[usize]) -> Result<SystemParams> {
        if choice.len() != self.num_arms() {
            return Err(contract("one candidate per arm required"));
        }
        let arms = choice
            .iter()
            .enumerate()
            .map(|(k, &c)| {
                self.arms[k]
                    .get(c)
                    .map(|cand| cand.model.clone())
                    .ok_or_else(|| contract(format!("arm {k} has no candidate {c}")))
            })
            .collect::<Result<Vec<_>>>()?;
        SystemParams::new(arms)
    }
}

fn same_model(a: &ArmModel, b: &ArmModel) -> bool {
    let close = |x: &[f64], y: &[f64]| {
        x.len() == y.len() && x.iter().zip(y).all(|(p, q)| (p - q).abs() <= MATCH_TOL)
    };
    a.num_states() == b.num_states()
        && close(a.rewards(), b.rewards())
        && a.active()
            .rows()
            .zip(b.active().rows())
            .all(|(x, y)| close(x, y))
        && a.passive()
            .rows()
            .zip(b.passive().rows())
            .all(|(x, y)| close(x, y))
}

/// Product-form posterior over a [`ParamGrid`].
#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    weights: Vec<Vec<f64>>,
}

impl Posterior {
    pub fn uniform(grid: &ParamGrid) -> Self {
        Self {
            weights: (0..grid.num_arms())
                .map(|k| {
                    let m = grid.num_candidates(k);
                    vec![1.0 / m as f64; m]
                })
                .collect(),
        }
    }

    /// Normalises each arm's weights.
    pub fn from_weights(grid: &ParamGrid, weights: Vec<Vec<f64>>) -> Result<Self> {
        if weights.len() != grid.num_arms() {
            return Err(contract("one weight vector per arm required"));
        }
        let mut post = Self { weights };
        for k in 0..grid.num_arms() {
            let w = &mut post.weights[k];
            if w.len() != grid.num_candidates(k) {
                return Err(contract(format!(
                    "arm {k}: weight count does not match the grid"
                )));
            }
            if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
                return Err(contract(format!(
                    "arm {k}: weights must be finite and non-negative"
                )));
            }
            let total: f64 = w.iter().sum();
            if total <= 0.0 {
                return Err(contract(format!("arm {k}: weights sum to zero")));
            }
            w.iter_mut().for_each(|x| *x /= total);
        }
        Ok(post)
    }

    /// All mass on one candidate per arm.
    pub fn point_mass(grid: &ParamGrid, choice: &[usize]) -> Result<Self> {
        if choice.len() != grid.num_arms() {
            return Err(contract("one candidate per arm required"));
        }
        let weights = choice
            .iter()
            .enumerate()
            .map(|(k, &c)| {
                let mut w = vec![0.0; grid.num_candidates(k)];
                *w.get_mut(c)
                    .ok_or_else(|| contract(format!("arm {k} has no candidate {c}")))? = 1.0;
                Ok(w)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { weights })
    }

    pub fn num_arms(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self, k: usize) -> &[f64] {
        &self.weights[k]
    }

    pub fn all_weights(&self) -> &[Vec<f64>] {
        &self.weights
    }

    fn check_grid(&self, grid: &ParamGrid) -> Result<()> {
        let fits = self.weights.len() == grid.num_arms()
            && self
                .weights
                .iter()
                .enumerate()
                .all(|(k, w)| w.len() == grid.num_candidates(k));
        if fits {
            Ok(())
        } else {
            Err(contract("posterior does not match the grid"))
        }
    }

    /// Bayes update of arm `k` after seeing `observed` from meta-state
    /// `(sigma, elapsed)`.
    pub fn update(
        &mut self,
        grid: &ParamGrid,
        k: usize,
        sigma: usize,
        elapsed: usize,
        observed: usize,
    ) -> Result<()> {
        if k >= self.weights.len() {
            return Err(contract(format!("no arm {k}")));
        }
        let w = &mut self.weights[k];
        let mut total = 0.0;
        for (c, x) in w.iter_mut().enumerate() {
            *x *= grid.likelihood(k, c, sigma, elapsed, observed);
            total += *x;
        }
        if total <= 0.0 || !total.is_finite() {
            return Err(Error::Misspecified {
                arm: k,
                sigma,
                elapsed,
                observed,
            });
        }
        w.iter_mut().for_each(|x| *x /= total);
        Ok(())
    }

    /// One independent categorical draw per arm.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<usize> {
        self.weights.iter().map(|w| sample_row(w, rng)).collect()
    }

    /// Draws a full system from the posterior.
    pub fn sample_params<R: Rng + ?Sized>(
        &self,
        grid: &ParamGrid,
        rng: &mut R,
    ) -> Result<SystemParams> {
        self.check_grid(grid)?;
        grid.assemble(&self.sample(rng))
    }
}

/// Visit counts over `(arm, last observed state, elapsed bucket)`, with
/// the outcome of every counted pull.
///
/// Elapsed times from `t_mix` on share the last bucket.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CounterTable {
    t_mix: usize,
    states: Vec<usize>,
    offsets: Vec<usize>,
    counts: Vec<u64>,
    outcomes: Vec<u64>,
}

/// A counter cell: arm, last observed state and elapsed bucket.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Zeta {
    pub arm: usize,
    pub sigma: usize,
    pub bucket: usize,
}

impl CounterTable {
    pub fn new(states: &[usize], t_mix: usize) -> Result<Self> {
        if t_mix == 0 {
            return Err(contract("t_mix must be positive"));
        }
        let mut offsets = Vec::with_capacity(states.len() + 1);
        let mut acc = 0;
        for &s in states {
            offsets.push(acc);
            acc += s * t_mix;
        }
        offsets.push(acc);
        let outcome_cells = states.iter().map(|&s| s * s * t_mix).sum();
        Ok(Self {
            t_mix,
            states: states.to_vec(),
            offsets,
            counts: vec![0; acc],
            outcomes: vec![0; outcome_cells],
        })
    }

    pub fn for_grid(grid: &ParamGrid, t_mix: usize) -> Result<Self> {
        let states: Vec<usize> = (0..grid.num_arms()).map(|k| grid.num_states(k)).collect();
        Self::new(&states, t_mix)
    }

    pub fn t_mix(&self) -> usize {
        self.t_mix
    }

    pub fn bucket(&self, elapsed: usize) -> usize {
        elapsed.clamp(1, self.t_mix)
    }

    /// Number of cells, which bounds the number of distinct visited cells.
    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    /// Index of the cell counting pulls of arm `k` from `(sigma, elapsed)`.
    pub fn cell(&self, k: usize, sigma: usize, elapsed: usize) -> usize {
        self.offsets[k] + (self.bucket(elapsed) - 1) * self.states[k] + sigma
    }

    fn outcome_base(&self, cell: usize) -> usize {
        // Cells of arm k each own states[k] outcome slots.
        let k = self.offsets.partition_point(|&o| o <= cell) - 1;
        let before: usize = (0..k)
            .map(|j| self.states[j] * self.states[j] * self.t_mix)
            .sum();
        before + (cell - self.offsets[k]) * self.states[k]
    }

    pub fn zeta(&self, cell: usize) -> Zeta {
        let k = self.offsets.partition_point(|&o| o <= cell) - 1;
        let local = cell - self.offsets[k];
        Zeta {
            arm: k,
            sigma: local % self.states[k],
            bucket: local / self.states[k] + 1,
        }
    }

    /// Counts one pull of arm `k` from `(sigma, elapsed)` that showed
    /// `observed`; returns the cell index.
    pub fn record(
        &mut self,
        k: usize,
        sigma: usize,
        elapsed: usize,
        observed: usize,
    ) -> Result<usize> {
        if k >= self.states.len()
            || sigma >= self.states[k]
            || observed >= self.states[k]
            || elapsed == 0
        {
            return Err(contract(format!(
                "bad visit: arm {k}, state {sigma}, elapsed {elapsed}, observed {observed}"
            )));
        }
        let cell = self.cell(k, sigma, elapsed);
        self.counts[cell] += 1;
        let base = self.outcome_base(cell);
        self.outcomes[base + observed] += 1;
        Ok(cell)
    }

    pub fn count(&self, k: usize, sigma: usize, elapsed: usize) -> u64 {
        self.counts[self.cell(k, sigma, elapsed)]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    /// Outcome histogram of a cell.
    pub fn outcomes(&self, cell: usize) -> &[u64] {
        let base = self.outcome_base(cell);
        let k = self.zeta(cell).arm;
        &self.outcomes[base..base + self.states[k]]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn visited(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }
}

/// Bookkeeping for the running episode.
#[derive(Debug, Clone)]
pub struct EpisodeState {
    pub index: usize,
    pub start: usize,
    pub prev_len: usize,
    pub snapshot: CounterTable,
    pub sampled: Vec<usize>,
}

/// The episode ends at `t` if it has outlived the previous one by more
/// than a step, or if any counter more than doubled since it started.
pub fn should_terminate(t: usize, ep: &EpisodeState, counters: &CounterTable) -> bool {
    t > ep.start + ep.prev_len
        || counters
            .counts()
            .iter()
            .zip(ep.snapshot.counts())
            .any(|(&now, &then)| now > 2 * then)
}

/// Learner settings shared by every replication.
#[derive(Debug, Clone, PartialEq)]
pub struct TsdeConfig {
    pub n_active: usize,
    pub horizon: usize,
    /// Truncation point of the visit counters.
    pub t_mix: usize,
    /// Posterior snapshot period in steps; 0 keeps only the first and last.
    pub snapshot_every: usize,
    /// Keep a copy of the counters at each episode start.
    pub keep_counters: bool,
    /// State every arm starts in, observed one step before the first action.
    pub initial_state: usize,
}

impl TsdeConfig {
    pub fn new(n_active: usize, horizon: usize, tmix_quarter: usize) -> Result<Self> {
        Ok(Self {
            n_active,
            horizon,
            t_mix: horizon_mixing_time(tmix_quarter, horizon)?,
            snapshot_every: 50,
            keep_counters: false,
            initial_state: GilbertElliott::GOOD,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    /// Meta-state the action was chosen in.
    pub meta: MetaState,
    pub action: Action,
    pub observations: Vec<Observation>,
    pub reward: f64,
    /// Expected reward of the action under the true parameters.
    pub expected_reward: f64,
    pub episode: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub index: usize,
    pub start: usize,
    pub length: usize,
    pub sampled: Vec<usize>,
    /// Counters at the episode start, if requested.
    pub counters: Option<CounterTable>,
}

/// Posterior after `time` steps.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSnapshot {
    pub time: usize,
    pub weights: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunStatus {
    Complete,
    /// The run stopped before step `time` could finish.
    Aborted {
        time: usize,
        error: Error,
    },
}

/// Full trace of one learner run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub n_active: usize,
    pub horizon: usize,
    pub t_mix: usize,
    pub steps: Vec<StepRecord>,
    pub episodes: Vec<EpisodeRecord>,
    pub posterior: Vec<PosteriorSnapshot>,
    pub counters: CounterTable,
    pub status: RunStatus,
}

impl RunRecord {
    pub fn is_complete(&self) -> bool {
        self.status == RunStatus::Complete
    }

    pub fn num_episodes(&self) -> usize {
        self.episodes.len()
    }

    /// Partial sums of the expected (or realized) rewards, starting at 0.
    pub fn cumulative_rewards(&self, realized: bool) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.steps.len() + 1);
        let mut acc = 0.0;
        out.push(acc);
        for s in &self.steps {
            acc += if realized {
                s.reward
            } else {
                s.expected_reward
            };
            out.push(acc);
        }
        out
    }
}

/// Upper bound on the number of episodes after `horizon` steps.
pub fn episode_bound(total_states: usize, t_mix: usize, horizon: usize, n_active: usize) -> f64 {
    let (s, m, t, n) = (
        total_states as f64,
        t_mix as f64,
        horizon as f64,
        n_active as f64,
    );
    2.0 * (s * m * t * (n * t).ln()).sqrt()
}

/// Inputs of one learner run.
#[derive(Debug, Clone, Copy)]
pub struct RunInputs<'a> {
    pub grid: &'a ParamGrid,
    pub prior: &'a Posterior,
    pub mapper: &'a PolicyMapper,
    pub theta_star: &'a SystemParams,
    pub config: &'a TsdeConfig,
    pub seed: u64,
    /// Replication index selecting the random streams.
    pub replication: u64,
}

struct Run<'a> {
    inputs: RunInputs<'a>,
    truth: BeliefModel,
    record: RunRecord,
    post: Posterior,
}

/// Runs the learner against `theta_star` for `horizon` steps.
///
/// Input problems are returned as errors. Failures during the run stop
/// it and are reported through [`RunRecord::status`] with the partial
/// trace.
pub fn run_tsde(inputs: RunInputs<'_>) -> Result<RunRecord> {
    let RunInputs {
        grid,
        prior,
        mapper,
        theta_star,
        config,
        ..
    } = inputs;
    if config.horizon < 2 {
        return Err(contract("horizon must be at least 2"));
    }
    if config.n_active == 0
        || config.n_active > grid.num_arms()
        || mapper.n_active() != config.n_active
    {
        return Err(contract(format!(
            "cannot pull {} of {} arms (mapper pulls {})",
            config.n_active,
            grid.num_arms(),
            mapper.n_active()
        )));
    }
    prior.check_grid(grid)?;
    if theta_star.num_arms() != grid.num_arms()
        || (0..grid.num_arms()).any(|k| theta_star.arm(k).num_states() != grid.num_states(k))
    {
        return Err(contract("true parameters do not match the grid shape"));
    }
    let counters = CounterTable::for_grid(grid, config.t_mix)?;
    let mut run = Run {
        inputs,
        truth: BeliefModel::new(theta_star),
        record: RunRecord {
            n_active: config.n_active,
            horizon: config.horizon,
            t_mix: config.t_mix,
            steps: Vec::with_capacity(config.horizon),
            episodes: Vec::new(),
            posterior: vec![PosteriorSnapshot {
                time: 0,
                weights: prior.all_weights().to_vec(),
            }],
            counters,
            status: RunStatus::Complete,
        },
        post: prior.clone(),
    };
    if let Err(error) = run.drive() {
        let time = run.record.steps.len() + 1;
        run.record.status = RunStatus::Aborted { time, error };
    }
    let done = run.record.steps.len();
    if let Some(last) = run.record.episodes.last_mut() {
        last.length = done + 1 - last.start;
    }
    if run.record.posterior.last().map(|s| s.time) != Some(done) {
        run.record.posterior.push(PosteriorSnapshot {
            time: done,
            weights: run.post.all_weights().to_vec(),
        });
    }
    Ok(run.record)
}

impl Run<'_> {
    fn drive(&mut self) -> Result<()> {
        let RunInputs {
            grid,
            mapper,
            theta_star,
            config,
            seed,
            replication,
            ..
        } = self.inputs;
        let mut env_rng = stream(seed, Purpose::Environment, replication);
        let mut learner_rng = stream(seed, Purpose::Learner, replication);
        let init = HiddenState::uniform(theta_star.num_arms(), config.initial_state);
        let (mut env, mut meta) = Environment::reset(theta_star, config.n_active, init)?;

        let mut t = 1;
        let mut prev_start = 1;
        while t <= config.horizon {
            let sampled = self.post.sample(&mut learner_rng);
            let policy = mapper.policy(&grid.assemble(&sampled)?)?;
            let ep = EpisodeState {
                index: self.record.episodes.len() + 1,
                start: t,
                prev_len: t - prev_start,
                snapshot: self.record.counters.clone(),
                sampled,
            };
            prev_start = t;
            if let Some(last) = self.record.episodes.last_mut() {
                last.length = t - last.start;
            }
            self.record.episodes.push(EpisodeRecord {
                index: ep.index,
                start: ep.start,
                length: 0,
                sampled: ep.sampled.clone(),
                counters: config.keep_counters.then(|| ep.snapshot.clone()),
            });
            // Only the counters touched at a step can newly exceed twice
            // their snapshot, so the doubling rule is checked per visit.
            let mut doubled = false;
            while t <= config.horizon && t <= ep.start + ep.prev_len && !doubled {
                let action = policy.select(&meta, config.n_active)?;
                let expected_reward = self.truth.expected_reward(&meta, &action);
                let outcome = env.step(&action, &mut env_rng)?;
                for obs in &outcome.observations {
                    let (sigma, n) = meta.arm(obs.arm);
                    self.post.update(grid, obs.arm, sigma, n, obs.state)?;
                    let cell = self.record.counters.record(obs.arm, sigma, n, obs.state)?;
                    doubled |= self.record.counters.counts()[cell] > 2 * ep.snapshot.counts()[cell];
                }
                let before = meta.clone();
                meta.update(&action, &outcome.observations)?;
                self.record.steps.push(StepRecord {
                    meta: before,
                    action,
                    observations: outcome.observations,
                    reward: outcome.reward,
                    expected_reward,
                    episode: ep.index,
                });
                if config.snapshot_every > 0 && t % config.snapshot_every == 0 {
                    self.record.posterior.push(PosteriorSnapshot {
                        time: t,
                        weights: self.post.all_weights().to_vec(),
                    });
                }
                t += 1;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policies::PolicyMapping;

    const GRID: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

    fn two_candidates() -> ParamGrid {
        ParamGrid::gilbert_elliott_lists(&[
            vec![(0.3, 0.7), (0.7, 0.3)],
            vec![(0.5, 0.5), (0.2, 0.9)],
        ])
        .unwrap()
    }

    #[test]
    fn grid_shapes_and_lookup() {
        let grid = ParamGrid::gilbert_elliott(3, &GRID).unwrap();
        assert_eq!(grid.num_arms(), 3);
        assert_eq!(grid.num_candidates(2), 81);
        let theta = SystemParams::gilbert_elliott(&[(0.3, 0.7), (0.1, 0.1), (0.9, 0.4)]).unwrap();
        let ids = grid.locate_all(&theta).unwrap();
        assert_eq!(grid.label(0, ids[0]), Some((0.3, 0.7)));
        assert_eq!(grid.label(2, ids[2]), Some((0.9, 0.4)));
        let off = GilbertElliott::new(0.35, 0.7).unwrap().arm();
        assert_eq!(grid.locate(0, &off), None);
        assert!(ParamGrid::gilbert_elliott_lists(&[vec![]]).is_err());
        assert!(ParamGrid::gilbert_elliott_lists(&[vec![(1.5, 0.2)]]).is_err());
    }

    #[test]
    fn update_is_bayes_rule() {
        let grid = two_candidates();
        let mut post = Posterior::uniform(&grid);
        // From bad after one step: P(good) is p01.
        post.update(&grid, 0, 0, 1, 1).unwrap();
        let w = post.weights(0);
        assert!((w[0] - 0.3).abs() < 1e-12 && (w[1] - 0.7).abs() < 1e-12);
        assert_eq!(post.weights(1), &[0.5, 0.5]);
        let sum: f64 = w.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_likelihood_zeroes_weight_and_all_zero_errors() {
        let grid = ParamGrid::new(vec![vec![
            GilbertElliott::new(0.5, 0.5).unwrap().arm(),
            ArmModel::new(
                crate::markov::TransitionMatrix::new(vec![vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap(),
                crate::markov::TransitionMatrix::new(vec![vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap(),
                vec![0.0, 1.0],
            )
            .unwrap(),
        ]])
        .unwrap();
        let mut post = Posterior::uniform(&grid);
        post.update(&grid, 0, 0, 1, 0).unwrap();
        assert_eq!(post.weights(0)[1], 0.0);
        let mut only_flip = Posterior::point_mass(&grid, &[1]).unwrap();
        let err = only_flip.update(&grid, 0, 0, 1, 0).unwrap_err();
        assert!(matches!(err, Error::Misspecified { arm: 0, .. }));
    }

    #[test]
    fn sampling_matches_weights() {
        let grid = two_candidates();
        let post = Posterior::from_weights(&grid, vec![vec![0.2, 0.8], vec![0.9, 0.1]]).unwrap();
        let mut rng = stream(5, Purpose::Learner, 0);
        let draws = 100_000;
        let mut hits = [0usize; 2];
        for _ in 0..draws {
            let s = post.sample(&mut rng);
            hits[0] += s[0];
            hits[1] += s[1];
        }
        for (h, p) in hits.iter().zip([0.8, 0.1]) {
            let sd = (draws as f64 * p * (1.0 - p)).sqrt();
            assert!(
                (*h as f64 - draws as f64 * p).abs() < 3.0 * sd,
                "{h} vs {p}"
            );
        }
        let a = post
            .sample_params(&grid, &mut stream(9, Purpose::Learner, 0))
            .unwrap();
        let b = post
            .sample_params(&grid, &mut stream(9, Purpose::Learner, 0))
            .unwrap();
        assert_eq!(a, b);
        let point = Posterior::point_mass(&grid, &[1, 0]).unwrap();
        let theta = point.sample_params(&grid, &mut rng).unwrap();
        assert_eq!(grid.locate_all(&theta), Some(vec![1, 0]));
    }

    #[test]
    fn counters_aggregate_beyond_t_mix() {
        let mut c = CounterTable::new(&[2, 2], 5).unwrap();
        let a = c.record(1, 0, 5, 1).unwrap();
        let b = c.record(1, 0, 12, 0).unwrap();
        let d = c.record(1, 0, 4, 0).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, d);
        assert_eq!(c.count(1, 0, 100), 2);
        assert_eq!(c.outcomes(a), &[1, 1]);
        assert_eq!(
            c.zeta(a),
            Zeta {
                arm: 1,
                sigma: 0,
                bucket: 5
            }
        );
        assert_eq!(c.total(), 3);
        assert_eq!(c.visited(), 2);
        assert_eq!(c.len(), 20);
        assert!(c.record(0, 2, 1, 0).is_err());
    }

    fn episode(start: usize, prev_len: usize, snapshot: CounterTable) -> EpisodeState {
        EpisodeState {
            index: 1,
            start,
            prev_len,
            snapshot,
            sampled: vec![0],
        }
    }

    #[test]
    fn termination_rules() {
        let empty = CounterTable::new(&[2], 3).unwrap();
        // First episode: t_0 = t_1 = 1.
        let ep = episode(1, 0, empty.clone());
        assert!(!should_terminate(1, &ep, &empty));
        assert!(should_terminate(2, &ep, &empty));

        let mut c = empty.clone();
        c.record(0, 1, 2, 0).unwrap();
        c.record(0, 1, 2, 0).unwrap();
        let ep = episode(10, 100, c.clone());
        for _ in 0..2 {
            c.record(0, 1, 2, 1).unwrap();
            assert!(!should_terminate(11, &ep, &c));
        }
        c.record(0, 1, 2, 1).unwrap();
        assert!(should_terminate(11, &ep, &c));

        let mut fresh = ep.snapshot.clone();
        fresh.record(0, 0, 1, 0).unwrap();
        assert!(should_terminate(11, &ep, &fresh));
    }

    fn run_with(
        grid: &ParamGrid,
        theta: &SystemParams,
        mapping: PolicyMapping,
        horizon: usize,
        seed: u64,
    ) -> RunRecord {
        let mut config = TsdeConfig::new(1, horizon, 4).unwrap();
        config.keep_counters = true;
        let mapper = PolicyMapper::new(mapping, 1, config.t_mix, 1e-6);
        let prior = Posterior::uniform(grid);
        run_tsde(RunInputs {
            grid,
            prior: &prior,
            mapper: &mapper,
            theta_star: theta,
            config: &config,
            seed,
            replication: 0,
        })
        .unwrap()
    }

    #[test]
    fn run_invariants() {
        let values = [0.2, 0.5, 0.8];
        let grid = ParamGrid::gilbert_elliott(3, &values).unwrap();
        let theta = SystemParams::gilbert_elliott(&[(0.2, 0.8), (0.5, 0.5), (0.8, 0.2)]).unwrap();
        let truth = grid.locate_all(&theta).unwrap();
        for seed in 0..5 {
            let rec = run_with(&grid, &theta, PolicyMapping::Myopic, 600, seed);
            assert!(rec.is_complete());
            assert_eq!(rec.steps.len(), 600);
            assert_eq!(rec.counters.total(), 600);
            assert!(rec.counters.visited() <= 6 * rec.t_mix);
            let bound = episode_bound(6, rec.t_mix, 600, 1);
            assert!((rec.num_episodes() as f64) <= bound);
            assert_eq!(rec.episodes[0].length, 1);
            assert_eq!(rec.episodes.iter().map(|e| e.length).sum::<usize>(), 600);
            for w in rec.episodes.windows(2) {
                assert!(w[1].length <= w[0].length + 1);
                assert_eq!(w[1].start, w[0].start + w[0].length);
            }
            for snap in &rec.posterior {
                for (k, &c) in truth.iter().enumerate() {
                    assert!(snap.weights[k][c] > 0.0);
                }
            }
            assert_eq!(rec.posterior.first().unwrap().time, 0);
            assert_eq!(rec.posterior.last().unwrap().time, 600);
        }
    }

    #[test]
    fn episode_starts_agree_with_full_scan() {
        let grid = ParamGrid::gilbert_elliott(2, &[0.3, 0.7]).unwrap();
        let theta = SystemParams::gilbert_elliott(&[(0.3, 0.7), (0.7, 0.3)]).unwrap();
        let rec = run_with(&grid, &theta, PolicyMapping::Whittle, 800, 3);
        // Replay the counters and recompute every boundary with the full scan.
        let mut counters = CounterTable::for_grid(&grid, rec.t_mix).unwrap();
        let mut ep = episode(1, 0, counters.clone());
        let mut starts = vec![1];
        for (i, step) in rec.steps.iter().enumerate() {
            let t = i + 1;
            if t > 1 && should_terminate(t, &ep, &counters) {
                ep = episode(t, t - ep.start, counters.clone());
                starts.push(t);
            }
            for obs in &step.observations {
                let (s, n) = step.meta.arm(obs.arm);
                counters.record(obs.arm, s, n, obs.state).unwrap();
            }
        }
        let recorded: Vec<usize> = rec.episodes.iter().map(|e| e.start).collect();
        assert_eq!(starts, recorded);
        for e in &rec.episodes {
            let snap = e.counters.as_ref().unwrap();
            assert_eq!(snap.total() as usize, e.start - 1);
        }
        assert_eq!(counters, rec.counters);
    }

    #[test]
    fn single_arm_counts_only_first_bucket() {
        let grid = ParamGrid::gilbert_elliott(1, &[0.2, 0.6]).unwrap();
        let theta = SystemParams::gilbert_elliott(&[(0.2, 0.6)]).unwrap();
        let rec = run_with(&grid, &theta, PolicyMapping::BestFixed, 300, 1);
        assert!(rec
            .steps
            .iter()
            .all(|s| s.meta.elapsed() == [1] && s.action.is_active(0)));
        for cell in 0..rec.counters.len() {
            if rec.counters.zeta(cell).bucket != 1 {
                assert_eq!(rec.counters.counts()[cell], 0);
            }
        }
    }

    #[test]
    fn reproducible_and_aborts_on_impossible_observation() {
        let grid = ParamGrid::gilbert_elliott(2, &[0.3, 0.7]).unwrap();
        let theta = SystemParams::gilbert_elliott(&[(0.3, 0.7), (0.7, 0.7)]).unwrap();
        let a = run_with(&grid, &theta, PolicyMapping::Myopic, 400, 11);
        let b = run_with(&grid, &theta, PolicyMapping::Myopic, 400, 11);
        assert_eq!(a, b);

        // A grid whose only candidate forbids leaving state 1 cannot
        // explain a move out of it.
        let sticky = ArmModel::new(
            crate::markov::TransitionMatrix::new(vec![vec![0.5, 0.5], vec![0.0, 1.0]]).unwrap(),
            crate::markov::TransitionMatrix::new(vec![vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap(),
            vec![0.0, 1.0],
        )
        .unwrap();
        let grid = ParamGrid::new(vec![vec![sticky]]).unwrap();
        let theta = SystemParams::gilbert_elliott(&[(0.5, 0.5)]).unwrap();
        let rec = run_with(&grid, &theta, PolicyMapping::BestFixed, 200, 2);
        match &rec.status {
            RunStatus::Aborted { time, error } => {
                assert!(matches!(error, Error::Misspecified { .. }));
                assert_eq!(*time, rec.steps.len() + 1);
            }
            RunStatus::Complete => panic!("run should abort"),
        }
        assert!(rec.steps.len() < 200);
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let grid = two_candidates();
        let theta = SystemParams::gilbert_elliott(&[(0.3, 0.7), (0.5, 0.5)]).unwrap();
        let prior = Posterior::uniform(&grid);
        let mut config = TsdeConfig::new(1, 10, 4).unwrap();
        config.horizon = 1;
        let mapper = PolicyMapper::new(PolicyMapping::Myopic, 1, config.t_mix, 1e-6);
        let inputs = |config| RunInputs {
            grid: &grid,
            prior: &prior,
            mapper: &mapper,
            theta_star: &theta,
            config,
            seed: 0,
            replication: 0,
        };
        assert!(run_tsde(inputs(&config)).is_err());
        let wide = TsdeConfig {
            horizon: 10,
            n_active: 2,
            ..config.clone()
        };
        assert!(run_tsde(inputs(&wide)).is_err());
    }
}
