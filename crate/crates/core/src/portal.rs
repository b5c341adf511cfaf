//! Windowed, restarting policy optimization with representation learning.
//!
//! Each round the agent executes its target policy for evaluation, collects
//! `H` off-policy exploration sub-episodes with the previous exploration
//! policy, refits the model on the latest `W` rounds, evaluates the target
//! policy under the estimated model with the revealed reward, and takes one
//! mirror-descent step. Every `tau` rounds the target policy is reset.

use std::time::{Duration, Instant};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{EnvError, Environment, EpisodeBudget, RoundHandle};
use crate::learning::{
    e2u, LearningError, ModelClass, RoundSamples, ScheduleConstants, ScheduleInputs,
    TransitionSample, WindowDataset,
};
use crate::mdp::{
    policy_evaluation, LowRankKernel, MdpError, Policy, RewardTable, StateActionTable,
};
use crate::random::{stream_rng, Stream};

#[derive(Debug, Error)]
pub enum PortalError {
    #[error("invalid hyperparameters: {0}")]
    InvalidHyperparams(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Learning(#[from] LearningError),
    #[error(transparent)]
    Mdp(#[from] MdpError),
}

/// When a restart round resets the target policy.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RestartTiming {
    /// Evaluate `Q_hat` for the current policy, then zero it and reset the
    /// policy; the mirror step therefore emits a uniform next policy.
    #[default]
    AfterEvaluation,
    /// Reset before the round is played, so the round executes the uniform
    /// policy and the mirror step starts from it with a fresh `Q_hat`.
    BeforeRound,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PortalHyperparams {
    pub rounds: usize,
    pub window: usize,
    pub restart_period: usize,
    /// Overrides the default `sqrt(ceil(K/tau) ln A / K)`.
    #[serde(default)]
    pub eta: Option<f64>,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_c_lambda")]
    pub c_lambda: f64,
    /// Evaluation episodes executing the target policy per round.
    #[serde(default = "default_n_eval")]
    pub n_eval: usize,
    #[serde(default)]
    pub restart_timing: RestartTiming,
}

pub(crate) fn default_delta() -> f64 {
    0.1
}

pub(crate) fn default_c_lambda() -> f64 {
    1.0
}

pub(crate) fn default_n_eval() -> usize {
    1
}

impl PortalHyperparams {
    pub fn new(rounds: usize, window: usize, restart_period: usize) -> Self {
        Self {
            rounds,
            window,
            restart_period,
            eta: None,
            delta: default_delta(),
            c_lambda: default_c_lambda(),
            n_eval: default_n_eval(),
            restart_timing: RestartTiming::default(),
        }
    }

    pub fn validate(&self) -> Result<(), PortalError> {
        let mut errs = Vec::new();
        if self.rounds == 0 {
            errs.push("K must be at least 1".to_string());
        }
        if self.window == 0 || self.window > self.rounds {
            errs.push(format!("W = {} must lie in [1, K = {}]", self.window, self.rounds));
        }
        if self.restart_period == 0 || self.restart_period > self.rounds {
            errs.push(format!("tau = {} must lie in [1, K = {}]", self.restart_period, self.rounds));
        }
        if let Some(eta) = self.eta {
            if !(eta > 0.0 && eta.is_finite()) {
                errs.push(format!("eta must be positive, got {eta}"));
            }
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            errs.push(format!("delta must lie in (0, 1), got {}", self.delta));
        }
        if !(self.c_lambda > 0.0 && self.c_lambda.is_finite()) {
            errs.push(format!("c_lambda must be positive, got {}", self.c_lambda));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(PortalError::InvalidHyperparams(errs.join("; ")))
        }
    }

    /// Mirror-descent stepsize for `n_actions` actions.
    ///
    /// With a single action every policy is the same, so any positive value
    /// works; 1 is used.
    pub fn eta(&self, n_actions: usize) -> f64 {
        if let Some(eta) = self.eta {
            return eta;
        }
        if n_actions <= 1 {
            return 1.0;
        }
        let restarts = self.rounds.div_ceil(self.restart_period) as f64;
        (restarts * (n_actions as f64).ln() / self.rounds as f64).sqrt()
    }

    /// Episodes one round consumes.
    pub fn episode_budget(&self, horizon: usize) -> EpisodeBudget {
        EpisodeBudget { exploration: horizon, evaluation: self.n_eval }
    }
}

/// `true` on rounds `1, tau + 1, 2 tau + 1, ...`.
pub fn is_restart_round(k: usize, tau: usize) -> bool {
    k >= 1 && (k - 1).is_multiple_of(tau)
}

/// Runs the `H` exploration sub-episodes of local round `round`.
///
/// Sub-episode `h` rolls in with `explore` until step `h - 1`, then takes
/// uniform actions at steps `h - 1` and `h`. Its step-`h` transition feeds the
/// likelihood set and its step-`h - 1` transition the covariance set. The
/// final step has no later sub-episode, so its covariance entry reuses the
/// likelihood triple.
pub fn collect_round_data<R: Rng + ?Sized>(
    handle: &mut RoundHandle<'_, '_>,
    explore: &Policy,
    round: usize,
    rng: &mut R,
) -> Result<RoundSamples, PortalError> {
    let horizon = handle.space().horizon;
    let mut mle = Vec::with_capacity(horizon);
    let mut cov = Vec::with_capacity(horizon);
    let tag = |(state, action, next_state): (usize, usize, usize)| TransitionSample {
        round,
        state,
        action,
        next_state,
    };
    for h in 0..horizon {
        let (stop, tail) = if h == 0 { (0, 1) } else { (h - 1, 2) };
        let t = handle.explore(explore, Some(stop), tail, rng)?;
        if h >= 1 {
            cov.push(tag(t.transition(h - 1).expect("tail covers step h-1")));
        }
        mle.push(tag(t.transition(h).expect("tail covers step h")));
    }
    cov.push(*mle.last().expect("horizon is positive"));
    Ok(RoundSamples { round, mle, cov })
}

/// Appends a round to the window, evicting rounds older than `k - W + 1`.
pub fn update_windows(data: &mut WindowDataset, samples: &RoundSamples) {
    data.push_round(samples);
}

/// `Q^{pi}` under the estimated kernel with the revealed reward.
pub fn evaluate_target_q(
    kernel: &LowRankKernel,
    reward: &RewardTable,
    policy: &Policy,
) -> Result<StateActionTable, MdpError> {
    Ok(policy_evaluation(kernel, reward, policy)?.q_table().clone())
}

/// `pi'(a|s) ∝ pi(a|s) exp(eta Q(s,a))`, row by row.
pub fn mirror_descent_update(policy: &Policy, q: &StateActionTable, eta: f64) -> Policy {
    let space = policy.space();
    let mut table = StateActionTable::zeros(space);
    let mut w = vec![0.0; space.n_actions];
    for h in 0..space.horizon {
        for s in 0..space.n_states {
            let qs = q.row(h, s);
            let top = qs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for (a, p) in policy.row(h, s).iter().enumerate() {
                w[a] = p * (eta * (qs[a] - top)).exp();
            }
            let z: f64 = w.iter().sum();
            for (a, x) in w.iter().enumerate() {
                table.set(h, s, a, x / z);
            }
        }
    }
    Policy::from_table(table).expect("reweighted rows stay on the simplex")
}

/// One round of the run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    /// Environment round (global).
    pub round: usize,
    /// Round index within this run (restarts and schedules use it).
    pub local_round: usize,
    /// Target policy executed during the round.
    pub policy: Policy,
    /// Kernel estimated at the end of the round.
    pub estimate: LowRankKernel,
    pub pairs: Vec<(usize, usize)>,
    pub restarted: bool,
    /// Mean realized return of the evaluation episodes.
    pub empirical_return: f64,
    pub exploration_episodes: usize,
    pub evaluation_episodes: usize,
    /// Longest per-step window list after the update.
    pub window_len: usize,
    pub window: usize,
    pub restart_period: usize,
}

/// Bandit block summary (adaptive runs only).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockRecord {
    pub block: usize,
    pub first_round: usize,
    pub last_round: usize,
    pub arm: usize,
    pub window: usize,
    pub restart_period: usize,
    pub block_reward: f64,
    pub distribution: Vec<f64>,
    pub entropy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunLog {
    pub seed: u64,
    pub rounds: Vec<RoundRecord>,
    #[serde(default)]
    pub blocks: Vec<BlockRecord>,
    #[serde(skip)]
    pub wall_clock: Duration,
}

impl RunLog {
    pub fn policies(&self) -> Vec<&Policy> {
        self.rounds.iter().map(|r| &r.policy).collect()
    }

    pub fn estimates(&self) -> Vec<&LowRankKernel> {
        self.rounds.iter().map(|r| &r.estimate).collect()
    }
}

/// RNG streams consumed by the agent during a run.
#[derive(Debug, Clone)]
pub struct AgentRngs {
    pub exploration: ChaCha8Rng,
    pub evaluation: ChaCha8Rng,
}

impl AgentRngs {
    pub fn new(seed: u64) -> Self {
        Self {
            exploration: stream_rng(seed, Stream::Exploration),
            evaluation: stream_rng(seed, Stream::Evaluation),
        }
    }
}

/// Agent state between rounds.
#[derive(Debug, Clone)]
pub struct Portal<'c> {
    class: &'c ModelClass,
    hyper: PortalHyperparams,
    eta: f64,
    target: Policy,
    explore: Policy,
    data: WindowDataset,
    q_hat: StateActionTable,
    round: usize,
}

impl<'c> Portal<'c> {
    pub fn new(class: &'c ModelClass, hyper: PortalHyperparams) -> Result<Self, PortalError> {
        hyper.validate()?;
        let space = class.space();
        Ok(Self {
            class,
            hyper,
            eta: hyper.eta(space.n_actions),
            target: Policy::uniform(space),
            explore: Policy::uniform(space),
            data: WindowDataset::new(space.horizon, hyper.window),
            q_hat: StateActionTable::zeros(space),
            round: 0,
        })
    }

    pub fn hyper(&self) -> &PortalHyperparams {
        &self.hyper
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    /// Policy to execute in the next round.
    pub fn target_policy(&self) -> &Policy {
        &self.target
    }

    pub fn exploration_policy(&self) -> &Policy {
        &self.explore
    }

    pub fn dataset(&self) -> &WindowDataset {
        &self.data
    }

    pub fn q_hat(&self) -> &StateActionTable {
        &self.q_hat
    }

    /// Rounds completed so far.
    pub fn rounds_done(&self) -> usize {
        self.round
    }

    /// Plays one round through `handle`.
    pub fn step(
        &mut self,
        handle: &mut RoundHandle<'_, '_>,
        rngs: &mut AgentRngs,
    ) -> Result<RoundRecord, PortalError> {
        if self.round >= self.hyper.rounds {
            return Err(PortalError::InvalidHyperparams(format!(
                "run of {} rounds is already complete",
                self.hyper.rounds
            )));
        }
        let k = self.round + 1;
        let space = self.class.space();
        let restarted = is_restart_round(k, self.hyper.restart_period);
        if restarted && self.hyper.restart_timing == RestartTiming::BeforeRound {
            self.target = Policy::uniform(space);
            self.q_hat = StateActionTable::zeros(space);
        }
        let executed = self.target.clone();

        let mut evals = Vec::with_capacity(self.hyper.n_eval);
        for _ in 0..self.hyper.n_eval {
            evals.push(handle.evaluate(&executed, &mut rngs.evaluation)?);
        }
        let samples = collect_round_data(handle, &self.explore, k, &mut rngs.exploration)?;
        update_windows(&mut self.data, &samples);
        handle.finish_exploration();
        let reward = handle.reveal_rewards()?;

        let constants = ScheduleConstants::compute(&ScheduleInputs {
            round: k,
            window: self.hyper.window,
            n_phi: self.class.n_phi(),
            n_mu: self.class.n_mu(),
            horizon: space.horizon,
            n_actions: space.n_actions,
            dim: self.class.dim(),
            total_rounds: self.hyper.rounds,
            delta: self.hyper.delta,
            c_lambda: self.hyper.c_lambda,
        })?;
        let (model, update) = e2u(self.class, &self.data, constants)?;
        self.explore = update.policy;

        self.q_hat = evaluate_target_q(&model.kernel, &reward, &self.target)?;
        if restarted && self.hyper.restart_timing == RestartTiming::AfterEvaluation {
            self.q_hat = StateActionTable::zeros(space);
            self.target = Policy::uniform(space);
        }
        self.target = mirror_descent_update(&self.target, &self.q_hat, self.eta);
        self.round = k;

        let empirical_return = if evals.is_empty() {
            0.0
        } else {
            evals.iter().map(|t| t.total_reward(&reward)).sum::<f64>() / evals.len() as f64
        };
        let count = handle.count();
        Ok(RoundRecord {
            round: handle.round(),
            local_round: k,
            policy: executed,
            estimate: model.kernel,
            pairs: model.pairs,
            restarted,
            empirical_return,
            exploration_episodes: count.exploration,
            evaluation_episodes: count.evaluation,
            window_len: self.data.max_len(),
            window: self.hyper.window,
            restart_period: self.hyper.restart_period,
        })
    }
}

/// Runs `hyper.rounds` rounds against a fresh environment; deterministic in `seed`.
pub fn run_portal(
    scenario: &crate::env::ScenarioSequence,
    class: &ModelClass,
    hyper: PortalHyperparams,
    seed: u64,
) -> Result<RunLog, PortalError> {
    let start = Instant::now();
    hyper.validate()?;
    if scenario.num_rounds() < hyper.rounds {
        return Err(PortalError::InvalidHyperparams(format!(
            "scenario has {} rounds, run needs {}",
            scenario.num_rounds(),
            hyper.rounds
        )));
    }
    let mut env = Environment::new(scenario, hyper.episode_budget(class.space().horizon));
    let mut agent = Portal::new(class, hyper)?;
    let mut rngs = AgentRngs::new(seed);
    let mut rounds = Vec::with_capacity(hyper.rounds);
    for k in 1..=hyper.rounds {
        let mut handle = env.begin_round(k)?;
        rounds.push(agent.step(&mut handle, &mut rngs)?);
    }
    Ok(RunLog { seed, rounds, blocks: Vec::new(), wall_clock: start.elapsed() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{build_scenario, ScenarioConfig};
    use crate::learning::ClassSpec;
    use crate::mdp::{policy_evaluation, StateActionSpace};
    use crate::random::{random_policy, stream_rng};
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn small_class(seed: u64, space: StateActionSpace) -> ModelClass {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = ClassSpec { n_phi: 2, n_mu: 3, dim: 2, reach_floor: 0.05, density_cap: None, concentration: 1.0 };
        ModelClass::generate(&mut rng, space, spec).unwrap()
    }

    fn setup(horizon: usize, rounds: usize) -> (ModelClass, crate::env::ScenarioSequence) {
        let space = StateActionSpace::new(4, 2, horizon).unwrap();
        let class = small_class(3, space);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = build_scenario(&ScenarioConfig::stationary(rounds), &class, &mut rng).unwrap();
        (class, s)
    }

    /// Brute-force maximizer of `<q, p> - KL(p || pi) / eta` over a grid of step `res`.
    fn grid_argmax(q: &[f64], pi: &[f64], eta: f64, res: f64) -> Vec<f64> {
        let n = (1.0 / res).round() as usize;
        let mut best = (f64::NEG_INFINITY, vec![]);
        for i in 0..=n {
            for j in 0..=(n - i) {
                let p = [i as f64 * res, j as f64 * res, (n - i - j) as f64 * res];
                let kl: f64 = p.iter().zip(pi).filter(|(x, _)| **x > 0.0).map(|(x, y)| x * (x / y).ln()).sum();
                let obj = p.iter().zip(q).map(|(x, y)| x * y).sum::<f64>() - kl / eta;
                if obj > best.0 {
                    best = (obj, p.to_vec());
                }
            }
        }
        best.1
    }

    #[test]
    fn restart_schedule() {
        let at = |tau, k_max| (1..=k_max).filter(|&k| is_restart_round(k, tau)).collect::<Vec<_>>();
        assert_eq!(at(3, 7), vec![1, 4, 7]);
        assert_eq!(at(1, 5), vec![1, 2, 3, 4, 5]);
        assert_eq!(at(9, 9), vec![1]);
    }

    #[test]
    fn default_eta() {
        let h = PortalHyperparams::new(100, 10, 30);
        assert!((h.eta(3) - (4.0 * 3f64.ln() / 100.0).sqrt()).abs() < 1e-15);
        assert_eq!(h.eta(1), 1.0);
        assert_eq!(PortalHyperparams { eta: Some(0.3), ..h }.eta(3), 0.3);
    }

    #[test]
    fn invalid_hyperparams() {
        for h in [
            PortalHyperparams::new(0, 1, 1),
            PortalHyperparams::new(5, 6, 1),
            PortalHyperparams::new(5, 1, 0),
            PortalHyperparams { eta: Some(0.0), ..PortalHyperparams::new(5, 1, 1) },
        ] {
            assert!(matches!(h.validate(), Err(PortalError::InvalidHyperparams(_))));
        }
    }

    #[test]
    fn mirror_descent_fixed_points() {
        let space = StateActionSpace::new(3, 3, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pi = random_policy(&mut rng, space);
        let zero = StateActionTable::zeros(space);
        let constant_rows = StateActionTable::from_fn(space, |h, s, _| 0.1 * (h + s) as f64);
        for q in [zero, constant_rows] {
            let out = mirror_descent_update(&pi, &q, 0.7);
            for (x, y) in out.table().values().iter().zip(pi.table().values()) {
                assert!((x - y).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn mirror_descent_matches_grid_search() {
        let space = StateActionSpace::new(1, 3, 1).unwrap();
        let q = StateActionTable::from_values(space, vec![0.9, 0.1, 0.1]).unwrap();
        let out = mirror_descent_update(&Policy::uniform(space), &q, 1.0);
        let grid = grid_argmax(&[0.9, 0.1, 0.1], &[1.0 / 3.0; 3], 1.0, 1e-3);
        for a in 0..3 {
            assert!((out.prob(0, 0, a) - grid[a]).abs() <= 1e-3);
        }
    }

    proptest! {
        #[test]
        fn mirror_descent_rows_normalized(qs in proptest::collection::vec(0.0f64..1.0, 12), eta in 0.01f64..50.0) {
            let space = StateActionSpace::new(2, 3, 2).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let pi = random_policy(&mut rng, space);
            let q = StateActionTable::from_values(space, qs).unwrap();
            let out = mirror_descent_update(&pi, &q, eta);
            for h in 0..2 {
                for s in 0..2 {
                    prop_assert!((out.row(h, s).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn target_q_exact_under_true_model() {
        let (_, s) = setup(3, 1);
        let r = s.round(1);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pi = random_policy(&mut rng, s.space());
        let q = evaluate_target_q(&r.kernel, &r.reward, &pi).unwrap();
        assert_eq!(&q, policy_evaluation(&r.kernel, &r.reward, &pi).unwrap().q_table());
        let zero = evaluate_target_q(&r.kernel, &RewardTable::zeros(s.space()), &pi).unwrap();
        assert!(zero.values().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn collection_counts() {
        for (h, n) in [(1, 1), (3, 5)] {
            let (_, s) = setup(h, 1);
            let mut env = Environment::new(&s, EpisodeBudget { exploration: h, evaluation: 0 });
            let mut handle = env.begin_round(1).unwrap();
            let mut rng = stream_rng(1, Stream::Exploration);
            let data = collect_round_data(&mut handle, &Policy::uniform(s.space()), 1, &mut rng).unwrap();
            assert_eq!(handle.count().exploration, h);
            // distinct triples: one likelihood triple per step, a covariance
            // triple for steps below the last
            let distinct = data.mle.len() + data.cov.len() - 1;
            assert_eq!(distinct, n);
            assert!(data.mle.iter().chain(&data.cov).all(|x| x.round == 1));
            assert!(collect_round_data(&mut handle, &Policy::uniform(s.space()), 1, &mut rng).is_err());
        }
    }

    #[test]
    fn collection_deterministic() {
        let (_, s) = setup(3, 1);
        let run = || {
            let mut env = Environment::new(&s, EpisodeBudget { exploration: 3, evaluation: 0 });
            let mut handle = env.begin_round(1).unwrap();
            let mut rng = stream_rng(7, Stream::Exploration);
            collect_round_data(&mut handle, &Policy::uniform(s.space()), 1, &mut rng).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn single_round_keeps_uniform_policy() {
        let (class, s) = setup(3, 1);
        let log = run_portal(&s, &class, PortalHyperparams::new(1, 1, 1), 0).unwrap();
        assert_eq!(log.rounds.len(), 1);
        assert_eq!(log.rounds[0].policy, Policy::uniform(s.space()));
    }

    #[test]
    fn restart_every_round_stays_uniform() {
        let (class, s) = setup(3, 8);
        let log = run_portal(&s, &class, PortalHyperparams::new(8, 3, 1), 0).unwrap();
        assert!(log.rounds.iter().all(|r| r.restarted && r.policy == Policy::uniform(s.space())));
    }

    #[test]
    fn protocol_counts_and_determinism() {
        let (class, s) = setup(3, 12);
        let hyper = PortalHyperparams::new(12, 4, 5);
        let a = run_portal(&s, &class, hyper, 11).unwrap();
        let b = run_portal(&s, &class, hyper, 11).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        for r in &a.rounds {
            assert_eq!((r.exploration_episodes, r.evaluation_episodes), (3, 1));
            assert!(r.window_len <= r.local_round.min(4));
            assert_eq!(r.restarted, [1, 6, 11].contains(&r.local_round));
        }
    }

    #[test]
    fn restart_before_round_executes_uniform() {
        let (class, s) = setup(3, 6);
        let hyper = PortalHyperparams { restart_timing: RestartTiming::BeforeRound, ..PortalHyperparams::new(6, 6, 3) };
        let log = run_portal(&s, &class, hyper, 2).unwrap();
        assert_eq!(log.rounds[3].policy, Policy::uniform(s.space()));
        assert_ne!(log.rounds[4].policy, Policy::uniform(s.space()));
    }
}
