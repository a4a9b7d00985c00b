use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::json;
use sha2::{Digest, Sha256};
use tsde::evaluation::{
    bayesian_regret, confidence_diagnostic, default_delta, discounted_span_probe,
    estimate_average_reward, frequentist_regret, loglog_slope, posterior_trace,
    prior_average_reward, prior_draw, Estimate, EvalSettings, LearnerSetup, RegretStudy,
    RewardKind,
};
use tsde::learner::{episode_bound, run_tsde, ParamGrid, Posterior, RunInputs, TsdeConfig};
use tsde::markov::SystemParams;
use tsde::policies::oracle::{joint_state_count, ORACLE_STATE_BUDGET};
use tsde::policies::{PolicyMapper, PolicyMapping};

use crate::config::{ExperimentConfig, GridSpec, Mode, ThetaStar};
use crate::error::CliError;

pub const REGRET_FILE: &str = "regret.csv";
pub const TRACE_FILE: &str = "trace.csv";
pub const EVAL_FILE: &str = "eval.csv";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.csv";
pub const SPANS_FILE: &str = "spans.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const ERROR_FILE: &str = "error.json";

const SPAN_BETAS: [f64; 3] = [0.9, 0.99, 0.999];

/// One line of the summary table.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub mapping: PolicyMapping,
    pub j: Estimate,
    pub final_regret: Option<(f64, f64)>,
    pub slope: Option<f64>,
    pub max_episodes: Option<usize>,
    pub episode_bound: Option<f64>,
    /// Confidence-set misses and episodes checked (diagnostics mode).
    pub coverage: Option<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub mode: Mode,
    pub rows: Vec<SummaryRow>,
    pub files: Vec<PathBuf>,
    pub config_hash: String,
    pub notes: Vec<String>,
}

fn fmt_opt(v: Option<String>) -> String {
    v.unwrap_or_else(|| "-".to_string())
}

impl Report {
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "mode: {}", self.mode.as_str());
        let _ = writeln!(
            out,
            "{:<11} {:>18} {:>20} {:>7} {:>9} {:>9} {:>11}",
            "mapping", "J", "final regret", "slope", "episodes", "bound", "misses"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<11} {:>18} {:>20} {:>7} {:>9} {:>9} {:>11}",
                r.mapping.as_str(),
                format!("{:.4} ± {:.4}", r.j.mean, r.j.stderr),
                fmt_opt(r.final_regret.map(|(m, s)| format!("{m:.2} ± {s:.2}"))),
                fmt_opt(r.slope.map(|s| format!("{s:.3}"))),
                fmt_opt(r.max_episodes.map(|e| e.to_string())),
                fmt_opt(r.episode_bound.map(|b| format!("{b:.0}"))),
                fmt_opt(r.coverage.map(|(m, n)| format!("{m}/{n}"))),
            );
        }
        for n in &self.notes {
            let _ = writeln!(out, "note: {n}");
        }
        let _ = writeln!(out, "config sha256: {}", self.config_hash);
        out
    }
}

pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let digest = Sha256::digest(cfg.to_json().to_string().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn build_grid(cfg: &ExperimentConfig) -> Result<ParamGrid, CliError> {
    Ok(match &cfg.grid {
        GridSpec::Values(v) => ParamGrid::gilbert_elliott(cfg.num_arms, v)?,
        GridSpec::Candidates(c) => ParamGrid::gilbert_elliott_lists(c)?,
    })
}

fn regret_times(horizon: usize, step: usize) -> Vec<usize> {
    let mut t: Vec<usize> = (0..=horizon).step_by(step).collect();
    if t.last() != Some(&horizon) {
        t.push(horizon);
    }
    t
}

struct Context {
    cfg: ExperimentConfig,
    grid: ParamGrid,
    prior: Posterior,
    theta: Option<SystemParams>,
    tsde: TsdeConfig,
    eval: EvalSettings,
    times: Vec<usize>,
    kind: RewardKind,
}

impl Context {
    fn new(cfg: &ExperimentConfig) -> Result<Self, CliError> {
        let grid = build_grid(cfg)?;
        let prior = Posterior::uniform(&grid);
        let theta = match &cfg.theta_star {
            ThetaStar::Explicit(p) => Some(SystemParams::gilbert_elliott(p)?),
            ThetaStar::SampleFromPrior => None,
        };
        let mut tsde = TsdeConfig::new(cfg.num_active, cfg.horizon, cfg.tmix_quarter())?;
        tsde.snapshot_every = cfg.snapshot_cadence();
        tsde.initial_state = cfg.initial_state;
        let eval = EvalSettings {
            horizon: cfg.eval_horizon,
            burn_in: cfg.eval_burn_in(),
            reps: cfg.eval_reps,
            initial_state: cfg.initial_state,
        };
        Ok(Self {
            cfg: cfg.clone(),
            grid,
            prior,
            theta,
            tsde,
            eval,
            times: regret_times(cfg.horizon, cfg.regret_step),
            kind: if cfg.realized_rewards {
                RewardKind::Realized
            } else {
                RewardKind::Expected
            },
        })
    }

    fn mapper(&self, mapping: PolicyMapping) -> PolicyMapper {
        PolicyMapper::new(
            mapping,
            self.cfg.num_active,
            self.tsde.t_mix,
            self.cfg.whittle_tol,
        )
    }

    fn setup<'a>(&'a self, mapper: &'a PolicyMapper) -> LearnerSetup<'a> {
        LearnerSetup {
            grid: &self.grid,
            prior: &self.prior,
            mapper,
            config: &self.tsde,
        }
    }

    fn bound(&self) -> f64 {
        let states = (0..self.grid.num_arms())
            .map(|k| self.grid.num_states(k))
            .sum();
        episode_bound(
            states,
            self.tsde.t_mix,
            self.cfg.horizon,
            self.cfg.num_active,
        )
    }

    fn row_from_study(
        &self,
        mapping: PolicyMapping,
        j: Estimate,
        study: &RegretStudy,
    ) -> SummaryRow {
        let curve = &study.curve;
        let last = curve.values.len() - 1;
        let t = self.cfg.horizon;
        SummaryRow {
            mapping,
            j,
            final_regret: Some((curve.values[last], curve.stderr[last])),
            slope: loglog_slope(&curve.times, &curve.values, t / 4, t)
                .ok()
                .map(|f| f.slope),
            max_episodes: study.runs.iter().map(|r| r.episodes).max(),
            episode_bound: Some(self.bound()),
            coverage: None,
        }
    }
}

fn writer(
    dir: &Path,
    name: &str,
    files: &mut Vec<PathBuf>,
) -> Result<csv::Writer<fs::File>, CliError> {
    let path = dir.join(name);
    files.push(path.clone());
    Ok(csv::Writer::from_path(path)?)
}

fn write_eval(dir: &Path, rows: &[SummaryRow], files: &mut Vec<PathBuf>) -> Result<(), CliError> {
    let mut w = writer(dir, EVAL_FILE, files)?;
    w.write_record(["mapping", "J_mean", "J_stderr"])?;
    for r in rows {
        w.write_record([
            r.mapping.as_str().to_string(),
            r.j.mean.to_string(),
            r.j.stderr.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn write_regret(
    dir: &Path,
    studies: &[(PolicyMapping, RegretStudy)],
    files: &mut Vec<PathBuf>,
) -> Result<(), CliError> {
    let mut w = writer(dir, REGRET_FILE, files)?;
    w.write_record(["time", "regret_mean", "regret_stderr", "mapping"])?;
    let Some((_, first)) = studies.first() else {
        return Ok(());
    };
    for (i, t) in first.curve.times.iter().enumerate() {
        for (mapping, s) in studies {
            w.write_record([
                t.to_string(),
                s.curve.values[i].to_string(),
                s.curve.stderr[i].to_string(),
                mapping.as_str().to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Runs the configured experiment, writing its files into `dir`.
pub fn run_experiment(cfg: &ExperimentConfig, dir: &Path) -> Result<Report, CliError> {
    let violations = cfg.violations();
    if !violations.is_empty() {
        return Err(CliError::Config(violations));
    }
    fs::create_dir_all(dir)?;
    let ctx = Context::new(cfg)?;
    let mut files = Vec::new();
    let mut notes = Vec::new();
    let rows = match cfg.mode {
        Mode::EvalPolicy => eval_policy(&ctx, dir, &mut files)?,
        Mode::Frequentist => frequentist(&ctx, dir, &mut files, &mut notes)?,
        Mode::Bayesian => bayesian(&ctx, dir, &mut files)?,
        Mode::Diagnostics => diagnostics(&ctx, dir, &mut files, &mut notes)?,
    };
    let hash = config_hash(cfg);
    let manifest = json!({
        "config": cfg.to_json(),
        "config_sha256": hash,
        "seed": cfg.seed,
        "version": env!("CARGO_PKG_VERSION"),
        "mode": cfg.mode.as_str(),
        "files": files.iter().filter_map(|p| p.file_name()).map(|n| n.to_string_lossy().into_owned()).collect::<Vec<_>>(),
    });
    let manifest_path = dir.join(MANIFEST_FILE);
    fs::write(
        &manifest_path,
        serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n",
    )?;
    files.push(manifest_path);
    Ok(Report {
        mode: cfg.mode,
        rows,
        files,
        config_hash: hash,
        notes,
    })
}

fn eval_policy(
    ctx: &Context,
    dir: &Path,
    files: &mut Vec<PathBuf>,
) -> Result<Vec<SummaryRow>, CliError> {
    let mut rows = Vec::new();
    for &mapping in &ctx.cfg.mappings {
        let mapper = ctx.mapper(mapping);
        let j = match &ctx.theta {
            Some(theta) => estimate_average_reward(theta, &mapper, &ctx.eval, ctx.cfg.seed)?,
            None => prior_average_reward(
                &ctx.grid,
                &ctx.prior,
                &mapper,
                &ctx.eval,
                ctx.cfg.prior_draws,
                ctx.cfg.seed,
            )?,
        };
        rows.push(SummaryRow {
            mapping,
            j,
            final_regret: None,
            slope: None,
            max_episodes: None,
            episode_bound: None,
            coverage: None,
        });
    }
    write_eval(dir, &rows, files)?;
    Ok(rows)
}

fn frequentist(
    ctx: &Context,
    dir: &Path,
    files: &mut Vec<PathBuf>,
    notes: &mut Vec<String>,
) -> Result<Vec<SummaryRow>, CliError> {
    let theta = ctx
        .theta
        .as_ref()
        .ok_or_else(|| CliError::Config(vec!["theta_star: required".into()]))?;
    let mut rows = Vec::new();
    let mut studies = Vec::new();
    let mut mappers = Vec::new();
    for &mapping in &ctx.cfg.mappings {
        let mapper = ctx.mapper(mapping);
        let j = estimate_average_reward(theta, &mapper, &ctx.eval, ctx.cfg.seed)?;
        let study = frequentist_regret(
            &ctx.setup(&mapper),
            theta,
            j.mean,
            &ctx.times,
            ctx.cfg.reps,
            ctx.kind,
            ctx.cfg.seed,
        )?;
        rows.push(ctx.row_from_study(mapping, j, &study));
        studies.push((mapping, study));
        mappers.push(mapper);
    }
    write_regret(dir, &studies, files)?;
    write_eval(dir, &rows, files)?;
    // The posterior trace follows the Whittle learner when it was run.
    let traced = ctx
        .cfg
        .mappings
        .iter()
        .position(|&m| m == PolicyMapping::Whittle)
        .unwrap_or(0);
    let mapper = &mappers[traced];
    let traced = ctx.cfg.mappings[traced];
    match ctx.grid.locate_all(theta) {
        Some(truth) => {
            let rec = run_tsde(RunInputs {
                grid: &ctx.grid,
                prior: &ctx.prior,
                mapper,
                theta_star: theta,
                config: &ctx.tsde,
                seed: ctx.cfg.seed,
                replication: 0,
            })?;
            let mut w = writer(dir, TRACE_FILE, files)?;
            w.write_record(["time", "arm", "posterior_weight_true", "episode_index"])?;
            for row in posterior_trace(&rec, &truth) {
                w.write_record([
                    row.time.to_string(),
                    row.arm.to_string(),
                    row.weight.to_string(),
                    row.episode.to_string(),
                ])?;
            }
            w.flush()?;
            notes.push(format!("posterior trace follows {traced}, replication 0"));
        }
        None => notes.push("true parameters are not on the grid; no posterior trace".to_string()),
    }
    Ok(rows)
}

fn bayesian(
    ctx: &Context,
    dir: &Path,
    files: &mut Vec<PathBuf>,
) -> Result<Vec<SummaryRow>, CliError> {
    let mut rows = Vec::new();
    let mut studies = Vec::new();
    for &mapping in &ctx.cfg.mappings {
        let mapper = ctx.mapper(mapping);
        let study = bayesian_regret(
            &ctx.setup(&mapper),
            &ctx.eval,
            &ctx.times,
            ctx.cfg.prior_draws,
            ctx.cfg.reps,
            ctx.kind,
            ctx.cfg.seed,
        )?;
        // One J* per draw; runs of the same draw share it.
        let per_draw: Vec<f64> = study
            .runs
            .iter()
            .step_by(ctx.cfg.reps)
            .map(|r| r.j_star)
            .collect();
        let j = Estimate::from_samples(&per_draw);
        rows.push(ctx.row_from_study(mapping, j, &study));
        studies.push((mapping, study));
    }
    write_regret(dir, &studies, files)?;
    write_eval(dir, &rows, files)?;
    Ok(rows)
}

fn diagnostics(
    ctx: &Context,
    dir: &Path,
    files: &mut Vec<PathBuf>,
    notes: &mut Vec<String>,
) -> Result<Vec<SummaryRow>, CliError> {
    let mut tsde = ctx.tsde.clone();
    tsde.keep_counters = true;
    let delta = ctx
        .cfg
        .delta
        .unwrap_or_else(|| default_delta(tsde.t_mix, ctx.cfg.horizon));
    let draws = if ctx.theta.is_some() {
        1
    } else {
        ctx.cfg.prior_draws
    };
    let mut w = writer(dir, DIAGNOSTICS_FILE, files)?;
    w.write_record([
        "mapping",
        "replication",
        "episode",
        "start",
        "member",
        "violations",
        "delta_sum",
    ])?;
    let mut rows = Vec::new();
    for &mapping in &ctx.cfg.mappings {
        let mapper = ctx.mapper(mapping);
        let (mut misses, mut checked, mut max_episodes) = (0, 0, 0);
        let mut totals = Vec::new();
        for d in 0..draws as u64 {
            let theta = match &ctx.theta {
                Some(t) => t.clone(),
                None => prior_draw(&ctx.grid, &ctx.prior, ctx.cfg.seed, d)?.1,
            };
            for r in 0..ctx.cfg.reps as u64 {
                let replication = d * ctx.cfg.reps as u64 + r;
                let rec = run_tsde(RunInputs {
                    grid: &ctx.grid,
                    prior: &ctx.prior,
                    mapper: &mapper,
                    theta_star: &theta,
                    config: &tsde,
                    seed: ctx.cfg.seed,
                    replication,
                })?;
                if let tsde::learner::RunStatus::Aborted { error, .. } = rec.status {
                    return Err(error.into());
                }
                let diag = confidence_diagnostic(&rec, &theta, delta)?;
                for e in &diag.episodes {
                    w.write_record([
                        mapping.as_str().to_string(),
                        replication.to_string(),
                        e.index.to_string(),
                        e.start.to_string(),
                        e.member.to_string(),
                        e.violations.to_string(),
                        e.delta_sum.to_string(),
                    ])?;
                }
                misses += diag.non_members();
                checked += diag.episodes.len();
                max_episodes = max_episodes.max(rec.num_episodes());
                totals.push(diag.delta_total());
            }
        }
        rows.push(SummaryRow {
            mapping,
            j: Estimate::from_samples(&totals),
            final_regret: None,
            slope: None,
            max_episodes: Some(max_episodes),
            episode_bound: Some(ctx.bound()),
            coverage: Some((misses, checked)),
        });
    }
    w.flush()?;
    notes.push(format!(
        "delta = {delta:e}; the J column holds the mean estimation-error sum"
    ));

    if let Some(theta) = &ctx.theta {
        let fits = joint_state_count(theta, tsde.t_mix).is_some_and(|n| n <= ORACLE_STATE_BUDGET);
        if fits {
            let mut w = writer(dir, SPANS_FILE, files)?;
            w.write_record(["mapping", "beta", "span"])?;
            for &mapping in &ctx.cfg.mappings {
                let mapper = ctx.mapper(mapping);
                for s in discounted_span_probe(theta, &mapper, &SPAN_BETAS, tsde.t_mix, 1e-6)? {
                    w.write_record([
                        mapping.as_str().to_string(),
                        s.beta.to_string(),
                        s.span.to_string(),
                    ])?;
                }
            }
            w.flush()?;
        } else {
            notes.push("joint meta-state space too large for the span probe".to_string());
        }
    }
    Ok(rows)
}

/// Writes `error.json` into `dir` if it can; failures here are ignored.
pub fn write_error_record(dir: &Path, err: &CliError) {
    if fs::create_dir_all(dir).is_ok() {
        let _ = fs::write(
            dir.join(ERROR_FILE),
            serde_json::to_string_pretty(&err.record()).expect("record serializes") + "\n",
        );
    }
}
