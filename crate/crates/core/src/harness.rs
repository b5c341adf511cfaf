//! Experiment configuration, orchestration, and CSV artifacts.
//!
//! One [`ExperimentConfig`] names a scenario family, a list of algorithm
//! variants, and seeds. Every (variant, seed) cell is an independent run that
//! writes its own CSV; a summary CSV aggregates `gap_ave` per variant.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ada_portal::{run_ada_portal, run_blocks, AdaConfig, ArmChoice, FeasibleGrids};
use crate::env::{build_scenario, variation_budgets, DriftKind, RewardSpec, RewardSwitch, ScenarioConfig, ScenarioSequence, VariationBudgets};
use crate::learning::{ClassSpec, ModelClass};
use crate::mdp::StateActionSpace;
use crate::metrics::{run_rows, write_run_csv};
use crate::portal::{
    default_c_lambda, default_delta, default_n_eval, run_portal, PortalHyperparams, RestartTiming, RunLog,
};
use crate::random::{stream_rng, Stream};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config file not found: {0}")]
    FileNotFound(PathBuf),
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("config schema errors:\n  {}", .0.join("\n  "))]
    Schema(Vec<String>),
    #[error("{label} (seed {seed}): {message}")]
    Run { label: String, seed: u64, message: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl HarnessError {
    /// Process exit code: 2 for configuration problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::FileNotFound(_) | Self::Parse(_) | Self::Schema(_) => 2,
            _ => 1,
        }
    }
}

fn default_reach_floor() -> f64 {
    0.02
}

fn default_concentration() -> f64 {
    0.5
}

fn default_contrast() -> f64 {
    1.0
}

fn default_drift_period() -> usize {
    10
}

fn default_parallel() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSection {
    pub drift: DriftKind,
    pub rounds: usize,
    pub n_states: usize,
    pub n_actions: usize,
    pub horizon: usize,
    pub dim: usize,
    pub n_phi: usize,
    pub n_mu: usize,
    /// Start a new segment every this many rounds (abrupt and embedding-only).
    #[serde(default)]
    pub switch_every: Option<usize>,
    /// Explicit 1-based segment starts; exclusive with `switch_every`.
    #[serde(default)]
    pub switch_rounds: Vec<usize>,
    #[serde(default)]
    pub segment_models: Option<Vec<(usize, usize)>>,
    #[serde(default = "default_drift_period")]
    pub drift_period: usize,
    #[serde(default)]
    pub misspecified: bool,
    /// Lower bound on every transition probability.
    #[serde(default = "default_reach_floor")]
    pub reach_floor: f64,
    /// Optional upper bound on every transition probability.
    #[serde(default)]
    pub density_cap: Option<f64>,
    /// Dirichlet concentration of the embedding draws.
    #[serde(default = "default_concentration")]
    pub concentration: f64,
    #[serde(default = "default_contrast")]
    pub reward_contrast: f64,
    #[serde(default)]
    pub reward_switch: RewardSwitch,
    /// Shared class and scenario for all seeds; by default each seed draws its own.
    #[serde(default)]
    pub scenario_seed: Option<u64>,
}

impl ScenarioSection {
    pub fn space(&self) -> Option<StateActionSpace> {
        StateActionSpace::new(self.n_states, self.n_actions, self.horizon).ok()
    }

    pub fn class_spec(&self) -> ClassSpec {
        ClassSpec {
            n_phi: self.n_phi,
            n_mu: self.n_mu,
            dim: self.dim,
            reach_floor: self.reach_floor,
            density_cap: self.density_cap,
            concentration: self.concentration,
        }
    }

    pub fn scenario_config(&self) -> ScenarioConfig {
        let switch_rounds = match self.switch_every {
            Some(every) if every > 0 => (1..).map(|i| i * every + 1).take_while(|&k| k <= self.rounds).collect(),
            _ => self.switch_rounds.clone(),
        };
        ScenarioConfig {
            drift: self.drift,
            rounds: self.rounds,
            switch_rounds,
            segment_models: self.segment_models.clone(),
            drift_period: self.drift_period,
            misspecified: self.misspecified,
            reward: RewardSpec { contrast: self.reward_contrast, switch: self.reward_switch },
        }
    }

    fn errors(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.rounds == 0 {
            errs.push("scenario.rounds must be at least 1".into());
        }
        for (name, v) in [
            ("n_states", self.n_states),
            ("n_actions", self.n_actions),
            ("horizon", self.horizon),
            ("dim", self.dim),
            ("n_phi", self.n_phi),
            ("n_mu", self.n_mu),
        ] {
            if v == 0 {
                errs.push(format!("scenario.{name} must be at least 1"));
            }
        }
        if self.switch_every.is_some() && !self.switch_rounds.is_empty() {
            errs.push("scenario.switch_every and scenario.switch_rounds are exclusive".into());
        }
        if self.switch_every == Some(0) {
            errs.push("scenario.switch_every must be at least 1".into());
        }
        if !(self.reach_floor >= 0.0 && self.reach_floor * self.n_states as f64 <= 1.0) {
            errs.push(format!("scenario.reach_floor {} is infeasible for {} states", self.reach_floor, self.n_states));
        }
        if let Some(cap) = self.density_cap {
            if !(cap > 0.0 && cap <= 1.0) {
                errs.push(format!("scenario.density_cap must lie in (0, 1], got {cap}"));
            }
        }
        if !(self.concentration > 0.0 && self.concentration.is_finite()) {
            errs.push("scenario.concentration must be positive".into());
        }
        if !(self.reward_contrast > 0.0 && self.reward_contrast.is_finite()) {
            errs.push("scenario.reward_contrast must be positive".into());
        }
        errs
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuningSection {
    #[serde(default = "default_c_lambda")]
    pub c_lambda: f64,
    #[serde(default)]
    pub eta: Option<f64>,
    #[serde(default = "default_n_eval")]
    pub n_eval: usize,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default)]
    pub restart_timing: RestartTiming,
}

impl Default for TuningSection {
    fn default() -> Self {
        Self {
            c_lambda: default_c_lambda(),
            eta: None,
            n_eval: default_n_eval(),
            delta: default_delta(),
            restart_timing: RestartTiming::default(),
        }
    }
}

/// Algorithm variants a config can request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Variant {
    /// Fixed window and restart period.
    Portal { window: usize, restart: usize },
    /// Window and restart period from the scenario's true variation budgets.
    PortalOracle,
    AdaPortal,
    /// Never restarts (`tau = K`).
    NoRestart { window: usize },
    /// Never forgets (`W = K`).
    NoWindow { restart: usize },
    /// Blockwise runs that always play one grid arm.
    BlockwiseFixed { arm: usize },
}

impl Variant {
    pub fn label(&self) -> String {
        match self {
            Self::Portal { window, restart } => format!("portal-W{window}-tau{restart}"),
            Self::PortalOracle => "portal-oracle".into(),
            Self::AdaPortal => "ada-portal".into(),
            Self::NoRestart { window } => format!("no-restart-W{window}"),
            Self::NoWindow { restart } => format!("no-window-tau{restart}"),
            Self::BlockwiseFixed { arm } => format!("blockwise-fixed-arm{arm}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub scenario: ScenarioSection,
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default = "default_parallel")]
    pub parallel: usize,
    #[serde(default)]
    pub tuning: TuningSection,
}

impl ExperimentConfig {
    /// Every semantic problem of the config, empty when valid.
    pub fn schema_errors(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.version != CONFIG_VERSION {
            errs.push(format!("version {} is not supported (expected {CONFIG_VERSION})", self.version));
        }
        errs.extend(self.scenario.errors());
        if self.variants.is_empty() {
            errs.push("at least one variant is required".into());
        }
        if self.seeds.is_empty() {
            errs.push("at least one seed is required".into());
        }
        if self.parallel == 0 {
            errs.push("parallel must be at least 1".into());
        }
        let k = self.scenario.rounds;
        for v in &self.variants {
            let mut check = |name: &str, x: usize| {
                if x == 0 || x > k {
                    errs.push(format!("{}: {name} = {x} must lie in [1, {k}]", v.label()));
                }
            };
            match *v {
                Variant::Portal { window, restart } => {
                    check("window", window);
                    check("restart", restart);
                }
                Variant::NoRestart { window } => check("window", window),
                Variant::NoWindow { restart } => check("restart", restart),
                Variant::BlockwiseFixed { arm } => {
                    if k > 0 && self.scenario.dim > 0 && self.scenario.horizon > 0 {
                        let n = FeasibleGrids::new(self.scenario.dim, self.scenario.horizon, k).n_arms();
                        if arm >= n {
                            errs.push(format!("{}: arm {arm} out of range for {n} arms", v.label()));
                        }
                    }
                }
                Variant::PortalOracle | Variant::AdaPortal => {}
            }
        }
        let t = &self.tuning;
        if !(t.c_lambda > 0.0 && t.c_lambda.is_finite()) {
            errs.push("tuning.c_lambda must be positive".into());
        }
        if let Some(eta) = t.eta {
            if !(eta > 0.0 && eta.is_finite()) {
                errs.push("tuning.eta must be positive".into());
            }
        }
        if !(t.delta > 0.0 && t.delta < 1.0) {
            errs.push("tuning.delta must lie in (0, 1)".into());
        }
        if t.n_eval == 0 && self.variants.iter().any(|v| matches!(v, Variant::AdaPortal | Variant::BlockwiseFixed { .. })) {
            errs.push("tuning.n_eval must be at least 1 for blockwise variants".into());
        }
        errs
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Parse(e.to_string()))?;
        let errs = cfg.schema_errors();
        if errs.is_empty() {
            Ok(cfg)
        } else {
            Err(HarnessError::Schema(errs))
        }
    }

    /// Fixed-window PORTAL hyperparameters with the config's tuning knobs.
    pub fn portal_hyper(&self, window: usize, restart: usize) -> PortalHyperparams {
        PortalHyperparams {
            eta: self.tuning.eta,
            delta: self.tuning.delta,
            c_lambda: self.tuning.c_lambda,
            n_eval: self.tuning.n_eval,
            restart_timing: self.tuning.restart_timing,
            ..PortalHyperparams::new(self.scenario.rounds, window, restart)
        }
    }

    pub fn ada_config(&self) -> AdaConfig {
        AdaConfig {
            rounds: self.scenario.rounds,
            delta: self.tuning.delta,
            c_lambda: self.tuning.c_lambda,
            n_eval: self.tuning.n_eval,
            restart_timing: self.tuning.restart_timing,
        }
    }
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig, HarnessError> {
    if !path.exists() {
        return Err(HarnessError::FileNotFound(path.to_path_buf()));
    }
    ExperimentConfig::from_toml(&fs::read_to_string(path)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleTuning {
    pub window: usize,
    pub restart: usize,
}

/// Window and restart period from known variation budgets, clamped to
/// `[1, K]`; a zero budget maps to `K`.
pub fn oracle_tuning(budgets: &VariationBudgets, dim: usize, horizon: usize, rounds: usize) -> OracleTuning {
    let k = rounds as f64;
    let clamp = |x: f64| {
        if x.is_finite() {
            (x.floor().max(1.0) as usize).min(rounds)
        } else {
            rounds
        }
    };
    let w_budget = budgets.delta_sqrt_p + budgets.delta_phi;
    let window = if w_budget > 0.0 {
        clamp((horizon as f64 * dim as f64 * k).cbrt() * w_budget.powf(-1.0 / 3.0))
    } else {
        rounds
    };
    let tau_budget = budgets.delta_p + budgets.delta_pi;
    let restart = if tau_budget > 0.0 {
        clamp(k.powf(2.0 / 3.0) * tau_budget.powf(-2.0 / 3.0))
    } else {
        rounds
    };
    OracleTuning { window, restart }
}

/// Class and scenario the run with `seed` plays against.
pub fn instantiate(section: &ScenarioSection, seed: u64) -> Result<(ModelClass, ScenarioSequence), String> {
    let space = section.space().ok_or("invalid state-action space")?;
    let mut rng = stream_rng(section.scenario_seed.unwrap_or(seed), Stream::Scenario);
    let class = ModelClass::generate(&mut rng, space, section.class_spec()).map_err(|e| e.to_string())?;
    let scenario = build_scenario(&section.scenario_config(), &class, &mut rng).map_err(|e| e.to_string())?;
    Ok((class, scenario))
}

/// Runs one variant against an instantiated scenario.
pub fn run_variant(
    cfg: &ExperimentConfig,
    variant: Variant,
    class: &ModelClass,
    scenario: &ScenarioSequence,
    seed: u64,
) -> Result<RunLog, String> {
    let k = cfg.scenario.rounds;
    let err = |e: &dyn std::fmt::Display| e.to_string();
    match variant {
        Variant::Portal { window, restart } => run_portal(scenario, class, cfg.portal_hyper(window, restart), seed).map_err(|e| err(&e)),
        Variant::NoRestart { window } => run_portal(scenario, class, cfg.portal_hyper(window, k), seed).map_err(|e| err(&e)),
        Variant::NoWindow { restart } => run_portal(scenario, class, cfg.portal_hyper(k, restart), seed).map_err(|e| err(&e)),
        Variant::PortalOracle => {
            let t = oracle_tuning(&variation_budgets(scenario), class.dim(), class.space().horizon, k);
            run_portal(scenario, class, cfg.portal_hyper(t.window, t.restart), seed).map_err(|e| err(&e))
        }
        Variant::AdaPortal => run_ada_portal(scenario, class, cfg.ada_config(), seed).map_err(|e| err(&e)),
        Variant::BlockwiseFixed { arm } => {
            run_blocks(scenario, class, cfg.ada_config(), ArmChoice::Fixed(arm), seed).map_err(|e| err(&e))
        }
    }
}

/// Outcome of one (variant, seed) cell.
#[derive(Debug, Clone)]
pub struct CellResult {
    pub label: String,
    pub seed: u64,
    pub gap_ave: f64,
    pub csv_path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub variant: String,
    pub n: usize,
    pub mean: f64,
    pub std: f64,
}

/// Artifacts of a finished experiment.
#[derive(Debug)]
pub struct ExperimentOutcome {
    pub cells: Vec<CellResult>,
    pub failures: Vec<HarnessError>,
    pub summary: Vec<SummaryRow>,
    pub summary_path: PathBuf,
}

impl ExperimentOutcome {
    pub fn exit_code(&self) -> i32 {
        if self.failures.is_empty() {
            0
        } else {
            1
        }
    }
}

/// Sample standard deviation (`n - 1` denominator; 0 for fewer than two values).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn run_cell(
    cfg: &ExperimentConfig,
    variant: Variant,
    class: &ModelClass,
    scenario: &ScenarioSequence,
    seed: u64,
    out_dir: &Path,
) -> Result<CellResult, HarnessError> {
    let label = variant.label();
    let fail = |message: String| HarnessError::Run { label: label.clone(), seed, message };
    let log = run_variant(cfg, variant, class, scenario, seed).map_err(fail)?;
    let (gaps, rows) = run_rows(scenario, &log).map_err(|e| fail(e.to_string()))?;
    let csv_path = out_dir.join(format!("{label}_seed{seed}.csv"));
    let file = fs::File::create(&csv_path)?;
    write_run_csv(std::io::BufWriter::new(file), &rows).map_err(|e| fail(e.to_string()))?;
    log::info!("{label} seed {seed}: gap_ave {:.6} in {:?}", gaps.gap_ave, log.wall_clock);
    Ok(CellResult { label, seed, gap_ave: gaps.gap_ave, csv_path })
}

/// Runs every (variant, seed) cell and writes the CSVs into `out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path, parallel: usize) -> Result<ExperimentOutcome, HarnessError> {
    let errs = cfg.schema_errors();
    if !errs.is_empty() {
        return Err(HarnessError::Schema(errs));
    }
    fs::create_dir_all(out_dir)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallel.max(1))
        .build()
        .map_err(|e| HarnessError::Run { label: "pool".into(), seed: 0, message: e.to_string() })?;

    let results: Vec<Result<CellResult, HarnessError>> = pool.install(|| {
        cfg.seeds
            .par_iter()
            .flat_map_iter(|&seed| {
                let inst = instantiate(&cfg.scenario, seed);
                cfg.variants.iter().map(move |&v| (v, seed, inst.clone())).collect::<Vec<_>>()
            })
            .map(|(variant, seed, inst)| match inst {
                Ok((class, scenario)) => run_cell(cfg, variant, &class, &scenario, seed, out_dir),
                Err(message) => Err(HarnessError::Run { label: variant.label(), seed, message }),
            })
            .collect()
    });

    let mut cells = Vec::new();
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(c) => cells.push(c),
            Err(e) => failures.push(e),
        }
    }
    let summary: Vec<SummaryRow> = cfg
        .variants
        .iter()
        .map(|v| {
            let label = v.label();
            let xs: Vec<f64> = cells.iter().filter(|c| c.label == label).map(|c| c.gap_ave).collect();
            let (mean, std) = mean_std(&xs);
            SummaryRow { variant: label, n: xs.len(), mean, std }
        })
        .collect();
    let summary_path = out_dir.join("summary.csv");
    let mut w = csv::Writer::from_path(&summary_path)?;
    for row in &summary {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(ExperimentOutcome { cells, failures, summary, summary_path })
}
