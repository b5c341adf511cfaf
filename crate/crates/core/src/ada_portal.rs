//! Bandit-over-RL selection of the window and restart period.
//!
//! Rounds are split into blocks of length `M`. At the start of each block an
//! EXP3-P master draws an arm `(W, tau)` from a geometric grid, a fresh agent
//! plays the block with that arm, and the block's summed empirical return is
//! fed back to the master.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{EnvError, Environment, ScenarioSequence};
use crate::learning::ModelClass;
use crate::mdp::sample_index;
use crate::portal::{
    default_c_lambda, default_delta, default_n_eval, AgentRngs, BlockRecord, Portal, PortalError,
    PortalHyperparams, RestartTiming, RunLog,
};
use crate::random::{stream_rng, Stream};

#[derive(Debug, Error)]
pub enum AdaError {
    #[error("block reward {reward} outside [0, {block_len}]")]
    RewardOutOfRange { reward: f64, block_len: usize },
    #[error("arm {arm} out of range for {n_arms} arms")]
    InvalidArm { arm: usize, n_arms: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Portal(#[from] PortalError),
    #[error(transparent)]
    Env(#[from] EnvError),
}

/// `floor(n^(1/3))` without floating-point error.
pub fn integer_cbrt(n: u128) -> u128 {
    let mut x = (n as f64).cbrt() as u128;
    while x * x * x > n {
        x -= 1;
    }
    while (x + 1) * (x + 1) * (x + 1) <= n {
        x += 1;
    }
    x
}

/// `floor(m^(j/J))`, snapping values within rounding error of an integer.
fn grid_value(m: usize, j: usize, big_j: usize) -> usize {
    if j == big_j {
        return m;
    }
    let x = (m as f64).powf(j as f64 / big_j as f64);
    let r = x.round();
    let v = if (x - r).abs() <= 1e-9 * x.max(1.0) { r } else { x.floor() };
    (v as usize).max(1)
}

/// Geometric grid `{floor(m^(j/J))}_{j=0..J}` with `J = floor(ln m)`.
///
/// When `J = 0` (`m < e`) the grid is `{1, m}` without duplicates.
fn geometric_grid(m: usize) -> (usize, Vec<usize>) {
    let big_j = (m as f64).ln().floor() as usize;
    if big_j == 0 {
        let mut g = vec![1, m];
        g.dedup();
        return (0, g);
    }
    (big_j, (0..=big_j).map(|j| grid_value(m, j, big_j)).collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeasibleGrids {
    pub m_window: usize,
    pub m_restart: usize,
    /// Block length.
    pub block_len: usize,
    pub j_window: usize,
    pub j_restart: usize,
    pub windows: Vec<usize>,
    pub restarts: Vec<usize>,
}

impl FeasibleGrids {
    pub fn new(dim: usize, horizon: usize, rounds: usize) -> Self {
        assert!(dim >= 1 && horizon >= 1 && rounds >= 1, "d, H, K must be positive");
        let clamp = |x: u128| (x as usize).clamp(1, rounds);
        let (d, h, k) = (dim as u128, horizon as u128, rounds as u128);
        let m_window = clamp(integer_cbrt(d * h * k));
        let m_restart = clamp(integer_cbrt(k * k));
        let block_len = clamp(integer_cbrt(d * h * k * k));
        let (j_window, windows) = geometric_grid(m_window);
        let (j_restart, restarts) = geometric_grid(m_restart);
        Self { m_window, m_restart, block_len, j_window, j_restart, windows, restarts }
    }

    pub fn n_arms(&self) -> usize {
        self.windows.len() * self.restarts.len()
    }

    /// `(W, tau)` of arm `a`; arms enumerate windows major, restarts minor.
    pub fn arm(&self, a: usize) -> (usize, usize) {
        let n = self.restarts.len();
        (self.windows[a / n], self.restarts[a % n])
    }

    pub fn arms(&self) -> Vec<(usize, usize)> {
        (0..self.n_arms()).map(|a| self.arm(a)).collect()
    }

    pub fn n_blocks(&self, rounds: usize) -> usize {
        rounds.div_ceil(self.block_len)
    }
}

/// EXP3-P scores and parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exp3pState {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub q: Vec<f64>,
    pub block: usize,
}

impl Exp3pState {
    /// Parameters for `n_arms` arms over `n_blocks` blocks.
    pub fn new(n_arms: usize, n_blocks: usize) -> Self {
        assert!(n_arms >= 1 && n_blocks >= 1);
        let j = n_arms as f64;
        let l = n_blocks as f64;
        let lnj = j.ln();
        Self {
            alpha: 0.95 * (lnj / (j * l)).sqrt(),
            beta: (lnj / (j * l)).sqrt(),
            gamma: (1.05 * (j * lnj / l).sqrt()).min(1.0),
            q: vec![0.0; n_arms],
            block: 0,
        }
    }

    pub fn n_arms(&self) -> usize {
        self.q.len()
    }

    /// `(1 - gamma) softmax(alpha q) + gamma / J`.
    pub fn distribution(&self) -> Vec<f64> {
        let j = self.q.len() as f64;
        let top = self.q.iter().map(|q| self.alpha * q).fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = self.q.iter().map(|q| (self.alpha * q - top).exp()).collect();
        let z: f64 = w.iter().sum();
        w.iter().map(|x| (1.0 - self.gamma) * x / z + self.gamma / j).collect()
    }

    /// Credits `reward` earned by `arm` over a block of `block_len` rounds.
    /// `u` must be the distribution the arm was drawn from.
    pub fn update(&mut self, arm: usize, u: &[f64], reward: f64, block_len: usize) -> Result<(), AdaError> {
        if arm >= self.q.len() {
            return Err(AdaError::InvalidArm { arm, n_arms: self.q.len() });
        }
        if !(0.0..=block_len as f64).contains(&reward) {
            return Err(AdaError::RewardOutOfRange { reward, block_len });
        }
        for (a, q) in self.q.iter_mut().enumerate() {
            let hit = if a == arm { reward / block_len as f64 } else { 0.0 };
            *q += (self.beta + hit) / u[a];
        }
        self.block += 1;
        Ok(())
    }
}

/// Shannon entropy in nats.
pub fn entropy(u: &[f64]) -> f64 {
    -u.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaConfig {
    pub rounds: usize,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_c_lambda")]
    pub c_lambda: f64,
    #[serde(default = "default_n_eval")]
    pub n_eval: usize,
    #[serde(default)]
    pub restart_timing: RestartTiming,
}

impl AdaConfig {
    pub fn new(rounds: usize) -> Self {
        Self {
            rounds,
            delta: default_delta(),
            c_lambda: default_c_lambda(),
            n_eval: default_n_eval(),
            restart_timing: RestartTiming::default(),
        }
    }
}

/// How each block's arm is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArmChoice {
    Exp3p,
    /// Always play this arm (index into [`FeasibleGrids::arms`]).
    Fixed(usize),
}

/// Plays `cfg.rounds` rounds in blocks; deterministic in `seed`.
pub fn run_blocks(
    scenario: &ScenarioSequence,
    class: &ModelClass,
    cfg: AdaConfig,
    choice: ArmChoice,
    seed: u64,
) -> Result<RunLog, AdaError> {
    let start = Instant::now();
    if cfg.rounds == 0 || cfg.rounds > scenario.num_rounds() {
        return Err(AdaError::InvalidConfig(format!(
            "K = {} must lie in [1, {}]",
            cfg.rounds,
            scenario.num_rounds()
        )));
    }
    if cfg.n_eval == 0 {
        return Err(AdaError::InvalidConfig("block rewards need at least one evaluation episode".into()));
    }
    let space = class.space();
    let grids = FeasibleGrids::new(class.dim(), space.horizon, cfg.rounds);
    let n_blocks = grids.n_blocks(cfg.rounds);
    if let ArmChoice::Fixed(arm) = choice {
        if arm >= grids.n_arms() {
            return Err(AdaError::InvalidArm { arm, n_arms: grids.n_arms() });
        }
    }
    let mut master = Exp3pState::new(grids.n_arms(), n_blocks);
    let mut master_rng = stream_rng(seed, Stream::AdaMaster);
    let mut rngs = AgentRngs::new(seed);
    let budget = crate::env::EpisodeBudget { exploration: space.horizon, evaluation: cfg.n_eval };
    let mut env = Environment::new(scenario, budget);
    let mut rounds = Vec::with_capacity(cfg.rounds);
    let mut blocks = Vec::with_capacity(n_blocks);

    for i in 0..n_blocks {
        let first = i * grids.block_len + 1;
        let last = ((i + 1) * grids.block_len).min(cfg.rounds);
        let len = last + 1 - first;
        let u = master.distribution();
        let arm = match choice {
            ArmChoice::Exp3p => sample_index(&u, &mut master_rng),
            ArmChoice::Fixed(a) => a,
        };
        let (w, tau) = grids.arm(arm);
        let hyper = PortalHyperparams {
            eta: None,
            delta: cfg.delta,
            c_lambda: cfg.c_lambda,
            n_eval: cfg.n_eval,
            restart_timing: cfg.restart_timing,
            ..PortalHyperparams::new(len, w.min(len), tau.min(len))
        };
        let mut agent = Portal::new(class, hyper)?;
        let mut block_reward = 0.0;
        for k in first..=last {
            let mut handle = env.begin_round(k)?;
            let rec = agent.step(&mut handle, &mut rngs)?;
            block_reward += rec.empirical_return;
            rounds.push(rec);
        }
        // float sums of per-round returns in [0, 1] can overshoot by an ulp
        let block_reward = block_reward.clamp(0.0, len as f64);
        if choice == ArmChoice::Exp3p {
            master.update(arm, &u, block_reward, len)?;
        }
        blocks.push(BlockRecord {
            block: i + 1,
            first_round: first,
            last_round: last,
            arm,
            window: hyper.window,
            restart_period: hyper.restart_period,
            block_reward,
            entropy: entropy(&u),
            distribution: u,
        });
    }
    Ok(RunLog { seed, rounds, blocks, wall_clock: start.elapsed() })
}

/// Adaptive run with the EXP3-P master.
pub fn run_ada_portal(
    scenario: &ScenarioSequence,
    class: &ModelClass,
    cfg: AdaConfig,
    seed: u64,
) -> Result<RunLog, AdaError> {
    run_blocks(scenario, class, cfg, ArmChoice::Exp3p, seed)
}
