//! Monte Carlo measurements: average rewards, regret curves, posterior
//! traces, confidence-set diagnostics and bound overlays.

use rand::Rng;
use rayon::prelude::*;

use crate::environment::{Action, BeliefModel, Environment, HiddenState, MetaState, StepOutcome};
use crate::error::{contract, Error, Result};
use crate::learner::{
    run_tsde, CounterTable, ParamGrid, Posterior, RunInputs, RunRecord, RunStatus, TsdeConfig,
};
use crate::markov::{l1, PredictiveTable, SystemParams};
use crate::policies::oracle::{JointStates, ORACLE_STATE_BUDGET};
use crate::policies::{Policy, PolicyMapper};
use crate::rng::{stream, Purpose};

/// Sample mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
    pub samples: usize,
}

impl Estimate {
    pub fn from_samples(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                stderr: f64::NAN,
                samples: 0,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let stderr = if n > 1 {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Self {
            mean,
            stderr,
            samples: n,
        }
    }
}

/// Length and replication count of a policy simulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalSettings {
    pub horizon: usize,
    /// Steps discarded before averaging.
    pub burn_in: usize,
    pub reps: usize,
    /// State every arm starts in.
    pub initial_state: usize,
}

impl EvalSettings {
    fn check(&self) -> Result<()> {
        if self.reps == 0 || self.horizon <= self.burn_in {
            return Err(contract("evaluation needs reps > 0 and horizon > burn_in"));
        }
        Ok(())
    }
}

/// Runs `policy` on `theta` for `steps` steps from `init`, calling `visit` with the meta-state, action, outcome and expected reward.
pub fn execute_policy<R: Rng + ?Sized>(
    theta: &SystemParams,
    policy: &Policy,
    n_active: usize,
    init: HiddenState,
    steps: usize,
    rng: &mut R,
    mut visit: impl FnMut(&MetaState, &Action, &StepOutcome, f64),
) -> Result<()> {
    let truth = BeliefModel::new(theta);
    let (mut env, mut meta) = Environment::reset(theta, n_active, init)?;
    for _ in 0..steps {
        let action = policy.select(&meta, n_active)?;
        let expected = truth.expected_reward(&meta, &action);
        let outcome = env.step(&action, rng)?;
        visit(&meta, &action, &outcome, expected);
        meta.update(&action, &outcome.observations)?;
    }
    Ok(())
}

fn average_reward_reps(
    theta: &SystemParams,
    policy: &Policy,
    n_active: usize,
    eval: &EvalSettings,
    seed: u64,
    first_rep: u64,
) -> Result<Vec<f64>> {
    (0..eval.reps as u64)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream(seed, Purpose::Evaluation, first_rep + r);
            let (mut t, mut total) = (0, 0.0);
            let init = HiddenState::uniform(theta.num_arms(), eval.initial_state);
            execute_policy(
                theta,
                policy,
                n_active,
                init,
                eval.horizon,
                &mut rng,
                |_, _, _, expected| {
                    t += 1;
                    if t > eval.burn_in {
                        total += expected;
                    }
                },
            )?;
            Ok(total / (eval.horizon - eval.burn_in) as f64)
        })
        .collect()
}

/// Long-run average expected reward of the mapper's policy for `theta`.
pub fn estimate_average_reward(
    theta: &SystemParams,
    mapper: &PolicyMapper,
    eval: &EvalSettings,
    seed: u64,
) -> Result<Estimate> {
    eval.check()?;
    let policy = mapper.policy(theta)?;
    let reps = average_reward_reps(theta, &policy, mapper.n_active(), eval, seed, 0)?;
    Ok(Estimate::from_samples(&reps))
}

/// Draw `d` of the true parameters from the prior.
pub fn prior_draw(
    grid: &ParamGrid,
    prior: &Posterior,
    seed: u64,
    draw: u64,
) -> Result<(Vec<usize>, SystemParams)> {
    let mut rng = stream(seed, Purpose::Prior, draw);
    let ids = prior.sample(&mut rng);
    let theta = grid.assemble(&ids)?;
    Ok((ids, theta))
}

/// Average reward of the mapper's policy on draw `d`, with streams that do
/// not overlap other draws.
fn draw_average_reward(
    theta: &SystemParams,
    mapper: &PolicyMapper,
    eval: &EvalSettings,
    seed: u64,
    draw: u64,
) -> Result<f64> {
    let policy = mapper.policy(theta)?;
    let reps = average_reward_reps(
        theta,
        &policy,
        mapper.n_active(),
        eval,
        seed,
        draw * eval.reps as u64,
    )?;
    Ok(Estimate::from_samples(&reps).mean)
}

/// Prior-averaged reward: one estimate per prior draw, averaged across
/// draws. The standard error is taken across draws.
pub fn prior_average_reward(
    grid: &ParamGrid,
    prior: &Posterior,
    mapper: &PolicyMapper,
    eval: &EvalSettings,
    draws: usize,
    seed: u64,
) -> Result<Estimate> {
    eval.check()?;
    let per_draw = (0..draws as u64)
        .map(|d| {
            let (_, theta) = prior_draw(grid, prior, seed, d)?;
            draw_average_reward(&theta, mapper, eval, seed, d)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Estimate::from_samples(&per_draw))
}

/// Mean cumulative regret at a set of times.
#[derive(Debug, Clone, PartialEq)]
pub struct RegretCurve {
    pub times: Vec<usize>,
    pub values: Vec<f64>,
    pub stderr: Vec<f64>,
    pub reps: usize,
}

impl RegretCurve {
    /// Averages per-run regret vectors sampled at `times`.
    pub fn from_runs(times: Vec<usize>, runs: &[Vec<f64>]) -> Self {
        let (values, stderr) = (0..times.len())
            .map(|i| {
                let column: Vec<f64> = runs.iter().map(|r| r[i]).collect();
                let e = Estimate::from_samples(&column);
                (e.mean, e.stderr)
            })
            .unzip();
        Self {
            times,
            values,
            stderr,
            reps: runs.len(),
        }
    }

    pub fn value_at(&self, time: usize) -> Option<f64> {
        self.times
            .iter()
            .position(|&t| t == time)
            .map(|i| self.values[i])
    }
}

/// The learner pieces shared by every replication.
#[derive(Debug, Clone, Copy)]
pub struct LearnerSetup<'a> {
    pub grid: &'a ParamGrid,
    pub prior: &'a Posterior,
    pub mapper: &'a PolicyMapper,
    pub config: &'a TsdeConfig,
}

/// What a regret study keeps from each run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub replication: u64,
    /// Candidate indices of the true parameters, when on the grid.
    pub truth: Option<Vec<usize>>,
    pub j_star: f64,
    pub episodes: usize,
    pub pulls: u64,
    pub regret: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegretStudy {
    pub curve: RegretCurve,
    pub runs: Vec<RunSummary>,
}

/// Regret definition: expected rewards by default, realized on request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RewardKind {
    #[default]
    Expected,
    Realized,
}

fn check_times(times: &[usize], horizon: usize) -> Result<()> {
    if times.is_empty()
        || times.windows(2).any(|w| w[0] >= w[1])
        || times.last().is_some_and(|&t| t > horizon)
    {
        return Err(contract(
            "regret times must be strictly increasing and within the horizon",
        ));
    }
    Ok(())
}

fn regret_run(
    setup: &LearnerSetup<'_>,
    theta_star: &SystemParams,
    j_star: f64,
    times: &[usize],
    kind: RewardKind,
    seed: u64,
    replication: u64,
) -> Result<RunSummary> {
    let rec = run_tsde(RunInputs {
        grid: setup.grid,
        prior: setup.prior,
        mapper: setup.mapper,
        theta_star,
        config: setup.config,
        seed,
        replication,
    })?;
    if let RunStatus::Aborted { error, .. } = rec.status {
        return Err(error);
    }
    let cumulative = rec.cumulative_rewards(kind == RewardKind::Realized);
    Ok(RunSummary {
        replication,
        truth: setup.grid.locate_all(theta_star),
        j_star,
        episodes: rec.num_episodes(),
        pulls: rec.counters.total(),
        regret: times
            .iter()
            .map(|&t| j_star * t as f64 - cumulative[t])
            .collect(),
    })
}

/// Regret of the learner against fixed true parameters, averaged over
/// replications `0..reps`.
#[allow(clippy::too_many_arguments)]
pub fn frequentist_regret(
    setup: &LearnerSetup<'_>,
    theta_star: &SystemParams,
    j_star: f64,
    times: &[usize],
    reps: usize,
    kind: RewardKind,
    seed: u64,
) -> Result<RegretStudy> {
    check_times(times, setup.config.horizon)?;
    let runs = (0..reps as u64)
        .into_par_iter()
        .map(|r| regret_run(setup, theta_star, j_star, times, kind, seed, r))
        .collect::<Result<Vec<_>>>()?;
    Ok(study(times, runs))
}

fn study(times: &[usize], runs: Vec<RunSummary>) -> RegretStudy {
    let regrets: Vec<Vec<f64>> = runs.iter().map(|r| r.regret.clone()).collect();
    RegretStudy {
        curve: RegretCurve::from_runs(times.to_vec(), &regrets),
        runs,
    }
}

/// Regret averaged over true parameters drawn from the prior.
///
/// Draw `d` uses replications `d * reps_per_draw ..`, so a single draw
/// reproduces [`frequentist_regret`] on that draw with the same seed. Its
/// `J*` comes from [`EvalSettings`] with the same per-draw streams as
/// [`prior_average_reward`].
#[allow(clippy::too_many_arguments)]
pub fn bayesian_regret(
    setup: &LearnerSetup<'_>,
    eval: &EvalSettings,
    times: &[usize],
    prior_draws: usize,
    reps_per_draw: usize,
    kind: RewardKind,
    seed: u64,
) -> Result<RegretStudy> {
    check_times(times, setup.config.horizon)?;
    eval.check()?;
    let mut runs = Vec::with_capacity(prior_draws * reps_per_draw);
    for d in 0..prior_draws as u64 {
        let (_, theta) = prior_draw(setup.grid, setup.prior, seed, d)?;
        let j_star = draw_average_reward(&theta, setup.mapper, eval, seed, d)?;
        let base = d * reps_per_draw as u64;
        let batch = (0..reps_per_draw as u64)
            .into_par_iter()
            .map(|r| regret_run(setup, &theta, j_star, times, kind, seed, base + r))
            .collect::<Result<Vec<_>>>()?;
        runs.extend(batch);
    }
    Ok(study(times, runs))
}

/// One row of a posterior trace: the weight of the true candidate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub time: usize,
    pub arm: usize,
    pub weight: f64,
    pub episode: usize,
}

/// Weight of each arm's true candidate at every stored snapshot.
pub fn posterior_trace(run: &RunRecord, truth: &[usize]) -> Vec<TraceRow> {
    let mut rows = Vec::new();
    for snap in &run.posterior {
        let episode = match snap.time {
            0 => 1,
            t => run.steps[t - 1].episode,
        };
        for (arm, &c) in truth.iter().enumerate() {
            rows.push(TraceRow {
                time: snap.time,
                arm,
                weight: snap.weights[arm][c],
                episode,
            });
        }
    }
    rows
}

/// Confidence-set check of one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeDiagnostic {
    pub index: usize,
    pub start: usize,
    /// Radius of every counter cell, in counter-cell order.
    pub radii: Vec<f64>,
    /// Whether the truth lies within every cell's radius.
    pub member: bool,
    /// Number of cells where it does not.
    pub violations: usize,
    /// Running sum of estimation errors along the trajectory.
    pub delta_sum: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticRecord {
    pub delta: f64,
    pub episodes: Vec<EpisodeDiagnostic>,
}

impl DiagnosticRecord {
    pub fn delta_total(&self) -> f64 {
        self.episodes.last().map_or(0.0, |e| e.delta_sum)
    }

    pub fn non_members(&self) -> usize {
        self.episodes.iter().filter(|e| !e.member).count()
    }
}

/// Confidence radius for a cell of an arm with `states` states.
pub fn confidence_radius(states: usize, count: u64, delta: f64) -> f64 {
    (8.0 * states as f64 * (1.0 / delta).ln() / count.max(1) as f64).sqrt()
}

/// Default confidence level for a run of `horizon` steps.
pub fn default_delta(t_mix: usize, horizon: usize) -> f64 {
    1.0 / (t_mix as f64 * horizon as f64)
}

/// Checks the true parameters against the empirical confidence sets built
/// from the counters at each episode start. Requires a run made with
/// counter snapshots kept.
pub fn confidence_diagnostic(
    run: &RunRecord,
    theta_star: &SystemParams,
    delta: f64,
) -> Result<DiagnosticRecord> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(contract(format!("delta must lie in (0, 1), got {delta}")));
    }
    let tables: Vec<PredictiveTable> = theta_star.arms().iter().map(PredictiveTable::new).collect();
    let empirical = |counters: &CounterTable, cell: usize| -> Vec<f64> {
        let hist = counters.outcomes(cell);
        let n: u64 = hist.iter().sum();
        if n == 0 {
            vec![1.0 / hist.len() as f64; hist.len()]
        } else {
            hist.iter().map(|&h| h as f64 / n as f64).collect()
        }
    };
    let mut episodes = Vec::with_capacity(run.episodes.len());
    let mut delta_sum = 0.0;
    for ep in &run.episodes {
        let counters = ep
            .counters
            .as_ref()
            .ok_or_else(|| contract("run was recorded without counter snapshots"))?;
        let mut radii = Vec::with_capacity(counters.len());
        let mut estimates = Vec::with_capacity(counters.len());
        let mut violations = 0;
        for cell in 0..counters.len() {
            let z = counters.zeta(cell);
            let states = theta_star.arm(z.arm).num_states();
            let radius = confidence_radius(states, counters.counts()[cell], delta);
            let p_hat = empirical(counters, cell);
            if l1(tables[z.arm].distribution(z.sigma, z.bucket), &p_hat) > radius {
                violations += 1;
            }
            radii.push(radius);
            estimates.push(p_hat);
        }
        let end = (ep.start + ep.length - 1).min(run.steps.len());
        for step in run.steps.get(ep.start - 1..end).unwrap_or(&[]) {
            for k in step.action.active_arms() {
                let (sigma, n) = step.meta.arm(k);
                let cell = counters.cell(k, sigma, n);
                delta_sum += l1(&estimates[cell], tables[k].distribution(sigma, n));
            }
        }
        episodes.push(EpisodeDiagnostic {
            index: ep.index,
            start: ep.start,
            radii,
            member: violations == 0,
            violations,
            delta_sum,
        });
    }
    Ok(DiagnosticRecord { delta, episodes })
}

/// Span of the discounted value of a policy at one discount factor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpanEstimate {
    pub beta: f64,
    pub span: f64,
}

/// Discounted value spans of the mapper's policy for `theta`, on the joint
/// meta-state space truncated at `n_cap`.
pub fn discounted_span_probe(
    theta: &SystemParams,
    mapper: &PolicyMapper,
    betas: &[f64],
    n_cap: usize,
    tol: f64,
) -> Result<Vec<SpanEstimate>> {
    if betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) || !(tol > 0.0) {
        return Err(contract(
            "discount factors must lie in (0, 1) and tol must be positive",
        ));
    }
    let space = JointStates::new(theta, n_cap, ORACLE_STATE_BUDGET)?;
    let policy = mapper.policy(theta)?;
    let mut rewards = Vec::with_capacity(space.len());
    let mut successors = Vec::with_capacity(space.len());
    for x in 0..space.len() {
        let action = policy.select(&space.decode(x), mapper.n_active())?;
        rewards.push(space.reward(x, &action));
        let mut list = Vec::new();
        space.for_each_successor(x, &action, |y, p| list.push((y, p)));
        successors.push(list);
    }
    let max_iterations = 10_000_000 / space.len().max(1) + 100_000;
    betas
        .iter()
        .map(|&beta| {
            let mut v = vec![0.0; space.len()];
            let mut next = vec![0.0; space.len()];
            for _ in 0..max_iterations {
                let mut change: f64 = 0.0;
                for x in 0..space.len() {
                    next[x] = rewards[x]
                        + beta * successors[x].iter().map(|&(y, p)| p * v[y]).sum::<f64>();
                    change = change.max((next[x] - v[x]).abs());
                }
                std::mem::swap(&mut v, &mut next);
                // Distance to the fixed point is at most change * beta / (1 - beta).
                if change * beta / (1.0 - beta) < tol {
                    let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
                    return Ok(SpanEstimate {
                        beta,
                        span: hi - lo,
                    });
                }
            }
            Err(Error::NonConvergence {
                what: "discounted value iteration",
                residual: f64::NAN,
                iterations: max_iterations,
            })
        })
        .collect()
}

/// Regret bound overlay for a span constant `h`. Logarithms are natural.
pub fn theoretical_bound(
    h: f64,
    n_active: usize,
    sum_states: usize,
    t_mix: usize,
    horizon: usize,
) -> f64 {
    let (n, s, m, t) = (
        n_active as f64,
        sum_states as f64,
        t_mix as f64,
        horizon as f64,
    );
    2.0 * (h + n) * (s * m * t * (n * t).ln()).sqrt()
        + 28.0 * (h + 1.0) * s * (n * m * t * (m * t).ln()).sqrt()
}

/// Least-squares fit of `log(value)` against `log(time)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub points: usize,
}

/// Fits the log-log slope of `(time, value)` pairs with `lo <= time <= hi`.
pub fn loglog_slope(times: &[usize], values: &[f64], lo: usize, hi: usize) -> Result<SlopeFit> {
    if times.len() != values.len() {
        return Err(contract("times and values differ in length"));
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (&t, &v) in times.iter().zip(values) {
        if t < lo || t > hi {
            continue;
        }
        if t == 0 || !(v > 0.0) {
            return Err(contract(format!("value {v} at time {t} is not positive")));
        }
        xs.push((t as f64).ln());
        ys.push(v.ln());
    }
    if xs.len() < 2 {
        return Err(contract(format!(
            "window [{lo}, {hi}] holds fewer than two points"
        )));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(contract("window holds a single distinct time"));
    }
    let slope = sxy / sxx;
    let r_squared = if syy == 0.0 {
        1.0
    } else {
        sxy * sxy / (sxx * syy)
    };
    Ok(SlopeFit {
        slope,
        intercept: my - slope * mx,
        r_squared,
        points: xs.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learner::episode_bound;
    use crate::policies::PolicyMapping;

    fn eval(horizon: usize, reps: usize) -> EvalSettings {
        EvalSettings {
            horizon,
            burn_in: 50,
            reps,
            initial_state: 1,
        }
    }

    #[test]
    fn estimate_statistics() {
        let e = Estimate::from_samples(&[1.0, 2.0, 3.0]);
        assert_eq!(e.mean, 2.0);
        assert!((e.stderr - (1.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(Estimate::from_samples(&[4.0]).stderr, 0.0);
    }

    #[test]
    fn iid_arms_average_half_per_pull() {
        let theta = SystemParams::gilbert_elliott(&[(0.5, 0.5); 3]).unwrap();
        for mapping in PolicyMapping::INDEX_MAPPINGS {
            let mapper = PolicyMapper::new(mapping, 2, 10, 1e-6);
            let e = estimate_average_reward(&theta, &mapper, &eval(400, 2), 1).unwrap();
            assert!((e.mean - 1.0).abs() < 1e-12, "{mapping}: {}", e.mean);
        }
    }

    #[test]
    fn average_reward_is_reproducible() {
        let theta = SystemParams::gilbert_elliott(&[(0.3, 0.7), (0.6, 0.4)]).unwrap();
        let mapper = PolicyMapper::new(PolicyMapping::Myopic, 1, 10, 1e-6);
        let a = estimate_average_reward(&theta, &mapper, &eval(2000, 3), 7).unwrap();
        let b = estimate_average_reward(&theta, &mapper, &eval(2000, 3), 7).unwrap();
        assert_eq!(a, b);
        assert!(estimate_average_reward(&theta, &mapper, &eval(10, 3), 7).is_err());
    }

    #[test]
    fn average_reward_ignores_initial_state() {
        let theta = SystemParams::gilbert_elliott(&[(0.3, 0.7), (0.4, 0.6), (0.6, 0.4)]).unwrap();
        let mapper = PolicyMapper::new(PolicyMapping::Whittle, 1, 20, 1e-6);
        let good = eval(20_000, 8);
        let bad = EvalSettings {
            initial_state: 0,
            ..good
        };
        let a = estimate_average_reward(&theta, &mapper, &good, 3).unwrap();
        let b = estimate_average_reward(&theta, &mapper, &bad, 3).unwrap();
        let se = (a.stderr.powi(2) + b.stderr.powi(2)).sqrt();
        assert!((a.mean - b.mean).abs() <= 3.0 * se, "{a:?} {b:?}");
    }

    fn singleton_setup(theta: &[(f64, f64)]) -> (ParamGrid, Posterior) {
        let lists: Vec<Vec<(f64, f64)>> = theta.iter().map(|&p| vec![p]).collect();
        let grid = ParamGrid::gilbert_elliott_lists(&lists).unwrap();
        let prior = Posterior::uniform(&grid);
        (grid, prior)
    }

    #[test]
    fn regret_starts_at_zero_and_single_atom_prior_matches() {
        let pairs = [(0.3, 0.7), (0.6, 0.4), (0.2, 0.5)];
        let (grid, prior) = singleton_setup(&pairs);
        let theta = SystemParams::gilbert_elliott(&pairs).unwrap();
        let config = TsdeConfig::new(1, 300, 4).unwrap();
        let mapper = PolicyMapper::new(PolicyMapping::Whittle, 1, config.t_mix, 1e-6);
        let setup = LearnerSetup {
            grid: &grid,
            prior: &prior,
            mapper: &mapper,
            config: &config,
        };
        let settings = eval(3000, 2);
        let times = [0, 100, 200, 300];
        let bayes =
            bayesian_regret(&setup, &settings, &times, 1, 3, RewardKind::Expected, 4).unwrap();
        let j_star = estimate_average_reward(&theta, &mapper, &settings, 4)
            .unwrap()
            .mean;
        let freq =
            frequentist_regret(&setup, &theta, j_star, &times, 3, RewardKind::Expected, 4).unwrap();
        assert_eq!(bayes, freq);
        assert_eq!(freq.curve.values[0], 0.0);
        assert!(freq.curve.stderr.iter().all(|&s| s >= 0.0));
        // Knowing the truth, regret stays within a few units.
        assert!(freq.curve.values[3].abs() < 10.0, "{:?}", freq.curve.values);
        for run in &freq.runs {
            assert_eq!(run.pulls, 300);
            assert!((run.episodes as f64) <= episode_bound(6, config.t_mix, 300, 1));
        }
        assert!(
            frequentist_regret(&setup, &theta, j_star, &[5, 5], 1, RewardKind::Expected, 4)
                .is_err()
        );
        assert!(
            frequentist_regret(&setup, &theta, j_star, &[301], 1, RewardKind::Expected, 4).is_err()
        );
    }

    #[test]
    fn trace_tracks_true_candidate() {
        let grid = ParamGrid::gilbert_elliott(2, &[0.2, 0.8]).unwrap();
        let prior = Posterior::uniform(&grid);
        let theta = SystemParams::gilbert_elliott(&[(0.2, 0.8), (0.8, 0.2)]).unwrap();
        let mut config = TsdeConfig::new(1, 500, 2).unwrap();
        config.snapshot_every = 100;
        let mapper = PolicyMapper::new(PolicyMapping::Myopic, 1, config.t_mix, 1e-6);
        let rec = run_tsde(RunInputs {
            grid: &grid,
            prior: &prior,
            mapper: &mapper,
            theta_star: &theta,
            config: &config,
            seed: 2,
            replication: 0,
        })
        .unwrap();
        let truth = grid.locate_all(&theta).unwrap();
        let rows = posterior_trace(&rec, &truth);
        assert_eq!(rows.len(), 2 * 6);
        assert_eq!(
            (rows[0].time, rows[0].weight, rows[0].episode),
            (0, 0.25, 1)
        );
        assert!(rows
            .iter()
            .rev()
            .take(2)
            .all(|r| r.time == 500 && r.weight > 0.9));
    }

    #[test]
    fn radius_examples() {
        assert!((confidence_radius(2, 0, 1e-3) - 10.5131).abs() < 1e-3);
        assert!((confidence_radius(2, 1000, 1e-3) - 0.33246).abs() < 1e-4);
    }

    #[test]
    fn diagnostic_records_membership_and_growing_delta() {
        let grid = ParamGrid::gilbert_elliott(2, &[0.3, 0.7]).unwrap();
        let prior = Posterior::uniform(&grid);
        let theta = SystemParams::gilbert_elliott(&[(0.3, 0.7), (0.7, 0.3)]).unwrap();
        let mut config = TsdeConfig::new(1, 2000, 2).unwrap();
        config.keep_counters = true;
        let mapper = PolicyMapper::new(PolicyMapping::Whittle, 1, config.t_mix, 1e-6);
        let rec = run_tsde(RunInputs {
            grid: &grid,
            prior: &prior,
            mapper: &mapper,
            theta_star: &theta,
            config: &config,
            seed: 8,
            replication: 0,
        })
        .unwrap();
        let delta = default_delta(config.t_mix, config.horizon);
        let diag = confidence_diagnostic(&rec, &theta, delta).unwrap();
        assert_eq!(diag.episodes.len(), rec.num_episodes());
        assert!(diag
            .episodes
            .windows(2)
            .all(|w| w[0].delta_sum <= w[1].delta_sum));
        assert!(diag
            .episodes
            .iter()
            .all(|e| e.radii.iter().all(|&r| r > 0.0)));
        assert_eq!(diag.non_members(), 0);
        let cap = 12.0 * (config.t_mix as f64 * 2000.0 * (1.0 / delta).ln()).sqrt() * 4.0;
        assert!(diag.delta_total() <= cap);
        assert!(confidence_diagnostic(&rec, &theta, 1.0).is_err());
        assert!(confidence_diagnostic(&rec, &theta, 0.0).is_err());
        let mut bare = rec.clone();
        bare.episodes[0].counters = None;
        assert!(confidence_diagnostic(&bare, &theta, 0.1).is_err());
    }

    #[test]
    fn span_probe_basic_cases() {
        let iid = SystemParams::gilbert_elliott(&[(0.5, 0.5)]).unwrap();
        let mapper = PolicyMapper::new(PolicyMapping::Myopic, 1, 5, 1e-6);
        let spans = discounted_span_probe(&iid, &mapper, &[0.5], 5, 1e-9).unwrap();
        assert!(spans[0].span.abs() < 1e-9);

        let theta = SystemParams::gilbert_elliott(&[(0.3, 0.7), (0.6, 0.4)]).unwrap();
        let mapper = PolicyMapper::new(PolicyMapping::Whittle, 1, 10, 1e-6);
        let betas = [0.9, 0.99, 0.999];
        let spans = discounted_span_probe(&theta, &mapper, &betas, 10, 1e-7).unwrap();
        for s in &spans {
            assert!(s.span <= 1.0 / (1.0 - s.beta));
        }
        let (lo, hi) = spans.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), s| {
            (lo.min(s.span), hi.max(s.span))
        });
        assert!(hi <= 1.2 * lo, "{spans:?}");
        assert!(discounted_span_probe(&theta, &mapper, &[1.0], 10, 1e-7).is_err());
    }

    #[test]
    fn bound_scaling() {
        let b = |t| theoretical_bound(10.0, 3, 16, 77, t);
        let ratio = b(40_000) / b(10_000);
        let cap = 2.0 * (40_000f64.ln() / 10_000f64.ln()) * 1.3;
        assert!(ratio > 2.0 && ratio < cap);
        let second = |s| {
            theoretical_bound(10.0, 3, s, 77, 2000)
                - 2.0 * 13.0 * (s as f64 * 77.0 * 2000.0 * 6000f64.ln()).sqrt()
        };
        assert!((second(32) / second(16) - 2.0).abs() < 1e-9);
    }

    #[test]
    fn slope_fits() {
        let times: Vec<usize> = (1..=50).map(|i| i * 40).collect();
        let linear: Vec<f64> = times.iter().map(|&t| 2.5 * t as f64).collect();
        let root: Vec<f64> = times.iter().map(|&t| 3.0 * (t as f64).sqrt()).collect();
        assert!((loglog_slope(&times, &linear, 1, 2000).unwrap().slope - 1.0).abs() < 1e-9);
        let fit = loglog_slope(&times, &root, 500, 2000).unwrap();
        assert!((fit.slope - 0.5).abs() < 1e-9);
        assert!((fit.intercept - 3f64.ln()).abs() < 1e-9);
        assert!((fit.r_squared - 1.0).abs() < 1e-12);
        let mut bad = root.clone();
        bad[20] = -1.0;
        assert!(loglog_slope(&times, &bad, 500, 2000).is_err());
        assert!(loglog_slope(&times, &root, 3000, 4000).is_err());
    }
}
