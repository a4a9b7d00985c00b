//! Flat JSON experiment configuration.
//!
//! A config file is a single JSON object of scalar and list values. A
//! `preset` key (or the `--preset` flag) fills every field first; the
//! remaining keys override it.

use std::path::{Path, PathBuf};

use serde_json::{json, Map, Value};
use tsde::markov::{mixing_time, GilbertElliott};
use tsde::policies::PolicyMapping;

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Bayesian,
    Frequentist,
    EvalPolicy,
    Diagnostics,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Bayesian => "bayesian",
            Mode::Frequentist => "frequentist",
            Mode::EvalPolicy => "eval-policy",
            Mode::Diagnostics => "diagnostics",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        [
            Mode::Bayesian,
            Mode::Frequentist,
            Mode::EvalPolicy,
            Mode::Diagnostics,
        ]
        .into_iter()
        .find(|m| m.as_str() == s)
    }
}

/// Candidate `(p01, p11)` pairs per arm.
#[derive(Debug, Clone, PartialEq)]
pub enum GridSpec {
    /// Every arm gets the product of these values with themselves.
    Values(Vec<f64>),
    Candidates(Vec<Vec<(f64, f64)>>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum ThetaStar {
    Explicit(Vec<(f64, f64)>),
    SampleFromPrior,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub num_arms: usize,
    pub num_active: usize,
    pub horizon: usize,
    pub grid: GridSpec,
    pub theta_star: ThetaStar,
    pub mappings: Vec<PolicyMapping>,
    /// Learner replications per true parameter.
    pub reps: usize,
    pub prior_draws: usize,
    pub seed: u64,
    /// Mixing time at accuracy 1/4; derived from the grid when absent.
    pub tmix_quarter: Option<usize>,
    pub output_dir: Option<PathBuf>,
    pub snapshot_every: usize,
    pub full_posterior: bool,
    pub eval_horizon: usize,
    pub eval_reps: usize,
    /// Defaults to ten mixing times.
    pub eval_burn_in: Option<usize>,
    pub regret_step: usize,
    pub realized_rewards: bool,
    /// Confidence level for diagnostics; defaults to 1 / (T^mix T).
    pub delta: Option<f64>,
    pub initial_state: usize,
    pub whittle_tol: f64,
}

pub const PRESETS: [&str; 2] = ["fig2", "fig3"];

fn unit_grid() -> Vec<f64> {
    (1..10).map(|i| i as f64 / 10.0).collect()
}

impl ExperimentConfig {
    pub fn preset(name: &str) -> Option<Self> {
        let base = Self {
            mode: Mode::Bayesian,
            num_arms: 8,
            num_active: 3,
            horizon: 2000,
            grid: GridSpec::Values(unit_grid()),
            theta_star: ThetaStar::SampleFromPrior,
            mappings: PolicyMapping::INDEX_MAPPINGS.to_vec(),
            reps: 1,
            prior_draws: 200,
            seed: 0,
            tmix_quarter: None,
            output_dir: None,
            snapshot_every: 50,
            full_posterior: false,
            eval_horizon: 20_000,
            eval_reps: 1,
            eval_burn_in: None,
            regret_step: 10,
            realized_rewards: false,
            delta: None,
            initial_state: GilbertElliott::GOOD,
            whittle_tol: 1e-6,
        };
        match name {
            "fig2" => Some(base),
            "fig3" => Some(Self {
                mode: Mode::Frequentist,
                num_arms: 4,
                num_active: 2,
                horizon: 10_000,
                theta_star: ThetaStar::Explicit(vec![
                    (0.3, 0.7),
                    (0.4, 0.6),
                    (0.5, 0.5),
                    (0.6, 0.4),
                ]),
                reps: 100,
                prior_draws: 1,
                eval_horizon: 100_000,
                eval_reps: 100,
                regret_step: 50,
                ..base
            }),
            _ => None,
        }
    }

    /// Effective T^mix(1/4): the configured value or the slowest chain
    /// among the grid and the true parameters.
    pub fn tmix_quarter(&self) -> usize {
        if let Some(t) = self.tmix_quarter {
            return t;
        }
        let mut pairs: Vec<(f64, f64)> = match &self.grid {
            GridSpec::Values(v) => v
                .iter()
                .flat_map(|&a| v.iter().map(move |&b| (a, b)))
                .collect(),
            GridSpec::Candidates(c) => c.iter().flatten().copied().collect(),
        };
        if let ThetaStar::Explicit(t) = &self.theta_star {
            pairs.extend(t);
        }
        pairs
            .iter()
            .filter_map(|&(a, b)| GilbertElliott::new(a, b).ok())
            .filter_map(|g| mixing_time(&g.matrix(), 0.25).ok())
            .max()
            .unwrap_or(1)
    }

    pub fn eval_burn_in(&self) -> usize {
        self.eval_burn_in.unwrap_or(10 * self.tmix_quarter())
    }

    pub fn snapshot_cadence(&self) -> usize {
        if self.full_posterior {
            1
        } else {
            self.snapshot_every
        }
    }

    /// All semantic problems, in a stable order.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.num_arms == 0 {
            v.push("num_arms: must be at least 1".to_string());
        }
        if self.num_active == 0 || self.num_active > self.num_arms {
            v.push(format!(
                "num_active: must lie in 1..=num_arms ({}), got {}",
                self.num_arms, self.num_active
            ));
        }
        if self.horizon < 2 {
            v.push(format!("horizon: must be at least 2, got {}", self.horizon));
        }
        let check_pair = |field: &str, i: usize, (a, b): (f64, f64), v: &mut Vec<String>| {
            if let Err(e) = GilbertElliott::new(a, b) {
                v.push(format!(
                    "{field}[{i}]: ({a}, {b}) is not a valid Gilbert-Elliott arm: {e}"
                ));
            }
        };
        match &self.grid {
            GridSpec::Values(values) => {
                if values.is_empty() {
                    v.push("grid_values: must not be empty".to_string());
                }
                for (i, &x) in values.iter().enumerate() {
                    if !(x > 0.0 && x < 1.0) {
                        v.push(format!("grid_values[{i}]: {x} must lie in (0, 1)"));
                    }
                }
            }
            GridSpec::Candidates(lists) => {
                if lists.len() != self.num_arms {
                    v.push(format!(
                        "grid_candidates: {} lists for {} arms",
                        lists.len(),
                        self.num_arms
                    ));
                }
                for (k, list) in lists.iter().enumerate() {
                    if list.is_empty() {
                        v.push(format!("grid_candidates[{k}]: must not be empty"));
                    }
                    for (i, &p) in list.iter().enumerate() {
                        check_pair(&format!("grid_candidates[{k}]"), i, p, &mut v);
                    }
                }
            }
        }
        match &self.theta_star {
            ThetaStar::Explicit(pairs) => {
                if pairs.len() != self.num_arms {
                    v.push(format!(
                        "theta_star: {} arms given, num_arms is {}",
                        pairs.len(),
                        self.num_arms
                    ));
                }
                for (i, &p) in pairs.iter().enumerate() {
                    check_pair("theta_star", i, p, &mut v);
                }
            }
            ThetaStar::SampleFromPrior => {
                if matches!(self.mode, Mode::Frequentist) {
                    v.push("theta_star: frequentist mode needs explicit parameters".to_string());
                }
            }
        }
        if self.mappings.is_empty() {
            v.push("mappings: must name at least one policy mapping".to_string());
        }
        for (i, m) in self.mappings.iter().enumerate() {
            if self.mappings[..i].contains(m) {
                v.push(format!("mappings: {m} listed twice"));
            }
        }
        if self.mappings.contains(&PolicyMapping::OracleVi) && self.num_arms > 3 {
            v.push("mappings: oracle-vi supports at most 3 arms".to_string());
        }
        if self.reps == 0 {
            v.push("reps: must be at least 1".to_string());
        }
        if self.prior_draws == 0 {
            v.push("prior_draws: must be at least 1".to_string());
        }
        if self.tmix_quarter == Some(0) {
            v.push("tmix_quarter: must be at least 1".to_string());
        }
        if self.eval_reps == 0 {
            v.push("eval_reps: must be at least 1".to_string());
        }
        if self.eval_horizon <= self.eval_burn_in() {
            v.push(format!(
                "eval_horizon: {} must exceed the burn-in {}",
                self.eval_horizon,
                self.eval_burn_in()
            ));
        }
        if self.regret_step == 0 {
            v.push("regret_step: must be at least 1".to_string());
        }
        if let Some(d) = self.delta {
            if !(d > 0.0 && d < 1.0) {
                v.push(format!("delta: {d} must lie in (0, 1)"));
            }
        }
        if self.initial_state > 1 {
            v.push(format!(
                "initial_state: {} is not a Gilbert-Elliott state",
                self.initial_state
            ));
        }
        if !(self.whittle_tol > 0.0) {
            v.push("whittle_tol: must be positive".to_string());
        }
        v
    }

    /// The flat JSON form; loading it yields an equal config.
    pub fn to_json(&self) -> Value {
        let pairs = |p: &[(f64, f64)]| {
            Value::from(p.iter().map(|&(a, b)| json!([a, b])).collect::<Vec<_>>())
        };
        let mut m = Map::new();
        m.insert("mode".into(), json!(self.mode.as_str()));
        m.insert("num_arms".into(), json!(self.num_arms));
        m.insert("num_active".into(), json!(self.num_active));
        m.insert("horizon".into(), json!(self.horizon));
        match &self.grid {
            GridSpec::Values(v) => m.insert("grid_values".into(), json!(v)),
            GridSpec::Candidates(c) => m.insert(
                "grid_candidates".into(),
                Value::from(c.iter().map(|l| pairs(l)).collect::<Vec<_>>()),
            ),
        };
        m.insert(
            "theta_star".into(),
            match &self.theta_star {
                ThetaStar::Explicit(p) => pairs(p),
                ThetaStar::SampleFromPrior => json!("sample-from-prior"),
            },
        );
        m.insert(
            "mappings".into(),
            json!(self.mappings.iter().map(|p| p.as_str()).collect::<Vec<_>>()),
        );
        m.insert("reps".into(), json!(self.reps));
        m.insert("prior_draws".into(), json!(self.prior_draws));
        m.insert("seed".into(), json!(self.seed));
        if let Some(t) = self.tmix_quarter {
            m.insert("tmix_quarter".into(), json!(t));
        }
        if let Some(p) = &self.output_dir {
            m.insert("output_dir".into(), json!(p.to_string_lossy()));
        }
        m.insert("snapshot_every".into(), json!(self.snapshot_every));
        m.insert("full_posterior".into(), json!(self.full_posterior));
        m.insert("eval_horizon".into(), json!(self.eval_horizon));
        m.insert("eval_reps".into(), json!(self.eval_reps));
        if let Some(b) = self.eval_burn_in {
            m.insert("eval_burn_in".into(), json!(b));
        }
        m.insert("regret_step".into(), json!(self.regret_step));
        m.insert("realized_rewards".into(), json!(self.realized_rewards));
        if let Some(d) = self.delta {
            m.insert("delta".into(), json!(d));
        }
        m.insert("initial_state".into(), json!(self.initial_state));
        m.insert("whittle_tol".into(), json!(self.whittle_tol));
        Value::Object(m)
    }
}

fn take<T: serde::de::DeserializeOwned>(
    obj: &Map<String, Value>,
    key: &str,
    errors: &mut Vec<String>,
) -> Option<T> {
    let value = obj.get(key)?;
    match serde_json::from_value(value.clone()) {
        Ok(v) => Some(v),
        Err(e) => {
            errors.push(format!("{key}: {e}"));
            None
        }
    }
}

const KEYS: [&str; 24] = [
    "preset",
    "mode",
    "num_arms",
    "num_active",
    "horizon",
    "grid_values",
    "grid_candidates",
    "theta_star",
    "mappings",
    "reps",
    "prior_draws",
    "seed",
    "tmix_quarter",
    "output_dir",
    "snapshot_every",
    "full_posterior",
    "eval_horizon",
    "eval_reps",
    "eval_burn_in",
    "regret_step",
    "realized_rewards",
    "delta",
    "initial_state",
    "whittle_tol",
];

/// Parses a config document. `preset` overrides any preset named inside.
pub fn parse_config(text: &str, preset: Option<&str>) -> Result<ExperimentConfig, CliError> {
    let value: Value = serde_json::from_str(text).map_err(|e| CliError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let Value::Object(obj) = value else {
        return Err(CliError::Config(vec![
            "config must be a JSON object".to_string()
        ]));
    };
    from_object(&obj, preset)
}

fn from_object(
    obj: &Map<String, Value>,
    preset: Option<&str>,
) -> Result<ExperimentConfig, CliError> {
    let mut errors = Vec::new();
    for key in obj.keys() {
        if !KEYS.contains(&key.as_str()) {
            errors.push(format!("{key}: unknown key"));
        }
    }
    let named: Option<String> = take(obj, "preset", &mut errors);
    let preset_name = preset.map(str::to_string).or(named);
    let mut cfg = match preset_name.as_deref() {
        Some(name) => match ExperimentConfig::preset(name) {
            Some(c) => c,
            None => {
                errors.push(format!(
                    "preset: unknown preset {name:?} (expected one of {PRESETS:?})"
                ));
                ExperimentConfig::preset("fig2").expect("built-in preset")
            }
        },
        None => {
            for key in ["mode", "num_arms", "num_active", "horizon"] {
                if !obj.contains_key(key) {
                    errors.push(format!("{key}: required without a preset"));
                }
            }
            ExperimentConfig::preset("fig2").expect("built-in preset")
        }
    };

    if let Some(s) = take::<String>(obj, "mode", &mut errors) {
        match Mode::parse(&s) {
            Some(m) => cfg.mode = m,
            None => errors.push(format!("mode: unknown mode {s:?}")),
        }
    }
    macro_rules! field {
        ($key:literal => $slot:expr) => {
            if let Some(v) = take(obj, $key, &mut errors) {
                $slot = v;
            }
        };
    }
    field!("num_arms" => cfg.num_arms);
    field!("num_active" => cfg.num_active);
    field!("horizon" => cfg.horizon);
    field!("reps" => cfg.reps);
    field!("prior_draws" => cfg.prior_draws);
    field!("seed" => cfg.seed);
    field!("snapshot_every" => cfg.snapshot_every);
    field!("full_posterior" => cfg.full_posterior);
    field!("eval_horizon" => cfg.eval_horizon);
    field!("eval_reps" => cfg.eval_reps);
    field!("regret_step" => cfg.regret_step);
    field!("realized_rewards" => cfg.realized_rewards);
    field!("initial_state" => cfg.initial_state);
    field!("whittle_tol" => cfg.whittle_tol);
    if let Some(t) = take(obj, "tmix_quarter", &mut errors) {
        cfg.tmix_quarter = Some(t);
    }
    if let Some(b) = take(obj, "eval_burn_in", &mut errors) {
        cfg.eval_burn_in = Some(b);
    }
    if let Some(d) = take(obj, "delta", &mut errors) {
        cfg.delta = Some(d);
    }
    if let Some(p) = take::<String>(obj, "output_dir", &mut errors) {
        cfg.output_dir = Some(PathBuf::from(p));
    }
    match (
        obj.contains_key("grid_values"),
        obj.contains_key("grid_candidates"),
    ) {
        (true, true) => errors.push("grid_values, grid_candidates: give at most one".to_string()),
        (true, false) => {
            if let Some(v) = take(obj, "grid_values", &mut errors) {
                cfg.grid = GridSpec::Values(v);
            }
        }
        (false, true) => {
            if let Some(c) = take(obj, "grid_candidates", &mut errors) {
                cfg.grid = GridSpec::Candidates(c);
            }
        }
        (false, false) => {}
    }
    match obj.get("theta_star") {
        Some(Value::String(s)) if s == "sample-from-prior" => {
            cfg.theta_star = ThetaStar::SampleFromPrior
        }
        Some(Value::String(s)) => errors.push(format!("theta_star: unknown value {s:?}")),
        Some(_) => {
            if let Some(p) = take(obj, "theta_star", &mut errors) {
                cfg.theta_star = ThetaStar::Explicit(p);
            }
        }
        None => {}
    }
    if let Some(names) = take::<Vec<String>>(obj, "mappings", &mut errors) {
        let mut parsed = Vec::new();
        for n in names {
            match n.parse::<PolicyMapping>() {
                Ok(m) => parsed.push(m),
                Err(e) => errors.push(format!("mappings: {e}")),
            }
        }
        cfg.mappings = parsed;
    }
    errors.extend(cfg.violations());
    if errors.is_empty() {
        Ok(cfg)
    } else {
        Err(CliError::Config(errors))
    }
}

pub fn load_config(path: &Path, preset: Option<&str>) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    parse_config(&text, preset)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_match_the_experiments() {
        let fig2 = ExperimentConfig::preset("fig2").unwrap();
        assert_eq!((fig2.num_arms, fig2.num_active, fig2.horizon), (8, 3, 2000));
        assert_eq!(fig2.mode, Mode::Bayesian);
        assert_eq!(fig2.grid, GridSpec::Values(unit_grid()));
        assert_eq!(fig2.tmix_quarter(), 7);
        let fig3 = ExperimentConfig::preset("fig3").unwrap();
        assert_eq!(
            (fig3.num_arms, fig3.num_active, fig3.horizon),
            (4, 2, 10_000)
        );
        assert_eq!(fig3.mode, Mode::Frequentist);
        assert!(fig3.violations().is_empty());
        assert!(ExperimentConfig::preset("fig9").is_none());
    }

    #[test]
    fn every_violation_is_reported() {
        let text =
            r#"{"preset": "fig3", "num_active": 7, "horizon": 1, "mappings": ["whittle", "nope"]}"#;
        let CliError::Config(errors) = parse_config(text, None).unwrap_err() else {
            panic!("expected config errors");
        };
        assert!(errors.iter().any(|e| e.starts_with("num_active")));
        assert!(errors.iter().any(|e| e.starts_with("horizon")));
        assert!(errors.iter().any(|e| e.starts_with("mappings")));
    }

    #[test]
    fn syntax_errors_carry_line_info() {
        let err = parse_config("{\n  \"mode\": \"bayesian\",\n  oops\n}", None).unwrap_err();
        assert!(matches!(err, CliError::Parse { line: 3, .. }), "{err:?}");
    }

    #[test]
    fn type_errors_and_unknown_keys() {
        let text = r#"{"preset": "fig2", "reps": "many", "colour": 1, "theta_star": "whatever"}"#;
        let CliError::Config(errors) = parse_config(text, None).unwrap_err() else {
            panic!("expected config errors");
        };
        assert_eq!(errors.len(), 3, "{errors:?}");
    }

    #[test]
    fn frequentist_needs_explicit_truth() {
        let text = r#"{"preset": "fig3", "theta_star": "sample-from-prior"}"#;
        assert!(matches!(parse_config(text, None), Err(CliError::Config(_))));
    }

    #[test]
    fn json_round_trip() {
        let mut cfg = ExperimentConfig::preset("fig3").unwrap();
        cfg.grid = GridSpec::Candidates(vec![vec![(0.3, 0.7), (0.2, 0.2)]; 4]);
        cfg.delta = Some(1e-4);
        cfg.output_dir = Some(PathBuf::from("out/x"));
        cfg.tmix_quarter = Some(3);
        let text = serde_json::to_string_pretty(&cfg.to_json()).unwrap();
        assert_eq!(parse_config(&text, None).unwrap(), cfg);
        let fig2 = ExperimentConfig::preset("fig2").unwrap();
        let text = fig2.to_json().to_string();
        assert_eq!(parse_config(&text, None).unwrap(), fig2);
    }

    #[test]
    fn flag_preset_wins_over_file_preset() {
        let cfg = parse_config(r#"{"preset": "fig2", "seed": 4}"#, Some("fig3")).unwrap();
        assert_eq!(cfg.num_arms, 4);
        assert_eq!(cfg.seed, 4);
    }
}
