//! Round-indexed nonstationary environments.
//!
//! A [`ScenarioSequence`] holds the ground truth of every round: the factor
//! pair, its kernel, and the reward. Agents never see it directly. They go
//! through an [`Environment`], which hands out one [`RoundHandle`] per round
//! in order; the handle only samples episodes, counts them against the
//! round's budget, and reveals the reward once exploration is declared done.

use std::path::Path;
use std::sync::Arc;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::learning::ModelClass;
use crate::mdp::{
    optimal_planning, sample_episode, tv_distance, EmbeddingMap, KernelBounds, LowRankKernel,
    MdpError, Policy, RepresentationMap, RewardTable, StateActionSpace, StateActionTable,
    Trajectory,
};

/// Version tag written into scenario files.
pub const SCENARIO_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("rewards of round {round} are not revealed before exploration finishes")]
    RewardNotYetRevealed { round: usize },
    #[error("round {requested} requested, expected round {expected} (of {total})")]
    OutOfOrderRound { requested: usize, expected: usize, total: usize },
    #[error("round {round}: {kind} episode budget of {cap} exhausted")]
    BudgetExhausted { round: usize, kind: &'static str, cap: usize },
    #[error("invalid scenario config: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),
    #[error("infeasible drift: {0}")]
    InfeasibleDrift(String),
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error("scenario file: {0}")]
    Io(#[from] std::io::Error),
    #[error("scenario format: {0}")]
    Format(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DriftKind {
    Stationary,
    AbruptSwitch,
    PiecewiseDrift,
    EmbeddingOnly,
}

/// What happens to the reward when a new segment starts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RewardSwitch {
    /// Keep the first segment's reward throughout.
    Fixed,
    /// Draw an independent reward.
    #[default]
    Redraw,
    /// Reflect the previous reward, `r' = 1/H - r`, reversing every action
    /// preference.
    Mirror,
}

/// How rewards are drawn for each segment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardSpec {
    /// `r_h(s,a) = u^contrast / H` with `u ~ U(0,1)`; larger is sparser.
    pub contrast: f64,
    pub switch: RewardSwitch,
}

impl Default for RewardSpec {
    fn default() -> Self {
        Self { contrast: 1.0, switch: RewardSwitch::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub drift: DriftKind,
    pub rounds: usize,
    /// 1-based rounds at which a new segment starts.
    #[serde(default)]
    pub switch_rounds: Vec<usize>,
    /// Class members `(phi, mu)` per segment; drawn at random when absent.
    #[serde(default)]
    pub segment_models: Option<Vec<(usize, usize)>>,
    /// Piecewise drift: rounds between single-factor moves.
    #[serde(default = "default_drift_period")]
    pub drift_period: usize,
    /// Piecewise drift only: move `phi` linearly between class members,
    /// leaving the class (kernels are then not realizable).
    #[serde(default)]
    pub misspecified: bool,
    #[serde(default)]
    pub reward: RewardSpec,
}

fn default_drift_period() -> usize {
    10
}

impl ScenarioConfig {
    pub fn stationary(rounds: usize) -> Self {
        Self {
            drift: DriftKind::Stationary,
            rounds,
            switch_rounds: Vec::new(),
            segment_models: None,
            drift_period: default_drift_period(),
            misspecified: false,
            reward: RewardSpec::default(),
        }
    }

    pub fn abrupt(rounds: usize, switch_rounds: Vec<usize>) -> Self {
        Self { drift: DriftKind::AbruptSwitch, switch_rounds, ..Self::stationary(rounds) }
    }

    /// Segment start rounds, starting with 1.
    fn segment_starts(&self) -> Vec<usize> {
        match self.drift {
            DriftKind::Stationary => vec![1],
            DriftKind::AbruptSwitch | DriftKind::EmbeddingOnly => {
                let mut v = vec![1];
                v.extend(self.switch_rounds.iter().copied());
                v
            }
            DriftKind::PiecewiseDrift => (1..=self.rounds).step_by(self.drift_period.max(1)).collect(),
        }
    }

    fn validate(&self) -> Result<(), EnvError> {
        let mut errs = Vec::new();
        if self.rounds == 0 {
            errs.push("rounds must be at least 1".to_string());
        }
        let mut prev = 1;
        for &k in &self.switch_rounds {
            if k <= prev || k > self.rounds {
                errs.push(format!("switch round {k} must be increasing within (1, {}]", self.rounds));
            }
            prev = k;
        }
        if self.drift == DriftKind::Stationary && !self.switch_rounds.is_empty() {
            errs.push("stationary scenarios take no switch rounds".into());
        }
        if self.drift == DriftKind::PiecewiseDrift && self.drift_period == 0 {
            errs.push("drift_period must be at least 1".into());
        }
        if self.misspecified && self.drift != DriftKind::PiecewiseDrift {
            errs.push("misspecified drift is only defined for piecewise-drift".into());
        }
        if !(self.reward.contrast > 0.0 && self.reward.contrast.is_finite()) {
            errs.push(format!("reward contrast must be positive, got {}", self.reward.contrast));
        }
        if let Some(models) = &self.segment_models {
            if self.rounds > 0 && models.len() != self.segment_starts().len() {
                errs.push(format!(
                    "{} segment models given for {} segments",
                    models.len(),
                    self.segment_starts().len()
                ));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(EnvError::InvalidConfig(errs))
        }
    }
}

/// Ground truth of a single round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundModel {
    pub phi: RepresentationMap,
    pub mu: EmbeddingMap,
    pub kernel: LowRankKernel,
    pub reward: RewardTable,
    /// Class member the kernel came from; `None` for off-class kernels.
    pub class_pair: Option<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSequence {
    space: StateActionSpace,
    dim: usize,
    drift: DriftKind,
    misspecified: bool,
    rounds: Vec<Arc<RoundModel>>,
}

impl ScenarioSequence {
    /// Validates and assembles a scenario; every round shares `space` and `dim`.
    pub fn new(
        drift: DriftKind,
        misspecified: bool,
        rounds: Vec<Arc<RoundModel>>,
    ) -> Result<Self, EnvError> {
        let first = rounds
            .first()
            .ok_or_else(|| EnvError::InvalidConfig(vec!["scenario has no rounds".into()]))?;
        let space = first.kernel.space();
        let dim = first.phi.dim;
        for (i, r) in rounds.iter().enumerate() {
            if r.kernel.space() != space || r.phi.dim != dim || r.reward.space() != space {
                return Err(EnvError::InvalidConfig(vec![format!("round {} has a different shape", i + 1)]));
            }
        }
        Ok(Self { space, dim, drift, misspecified, rounds })
    }

    pub fn space(&self) -> StateActionSpace {
        self.space
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn drift(&self) -> DriftKind {
        self.drift
    }

    pub fn is_misspecified(&self) -> bool {
        self.misspecified
    }

    pub fn num_rounds(&self) -> usize {
        self.rounds.len()
    }

    /// Round `k`, 1-based.
    pub fn round(&self, k: usize) -> &RoundModel {
        &self.rounds[k - 1]
    }

    pub fn rounds(&self) -> impl Iterator<Item = &RoundModel> {
        self.rounds.iter().map(Arc::as_ref)
    }

    /// Rounds at which the model or reward differs from the previous round.
    pub fn change_points(&self) -> Vec<usize> {
        (2..=self.num_rounds())
            .filter(|&k| !Arc::ptr_eq(&self.rounds[k - 1], &self.rounds[k - 2]) && self.rounds[k - 1] != self.rounds[k - 2])
            .collect()
    }

    /// Writes the scenario as JSON, run-length encoding identical rounds.
    pub fn save(&self, path: &Path) -> Result<(), EnvError> {
        let file = ScenarioFile::from(self);
        std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, EnvError> {
        let text = std::fs::read_to_string(path)?;
        let file: ScenarioFile = serde_json::from_str(&text)?;
        file.into_scenario()
    }
}

/// On-disk scenario schema.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub version: u32,
    pub space: StateActionSpace,
    pub dim: usize,
    pub drift: DriftKind,
    pub misspecified: bool,
    pub segments: Vec<SegmentRecord>,
}

/// Rounds `first..=last` (1-based) share these factors and reward.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentRecord {
    pub first: usize,
    pub last: usize,
    pub class_pair: Option<(usize, usize)>,
    pub phi: RepresentationMap,
    pub mu: EmbeddingMap,
    pub reward: RewardTable,
}

impl From<&ScenarioSequence> for ScenarioFile {
    fn from(s: &ScenarioSequence) -> Self {
        let mut segments: Vec<SegmentRecord> = Vec::new();
        for (i, r) in s.rounds.iter().enumerate() {
            let k = i + 1;
            if let Some(last) = segments.last_mut() {
                if Arc::ptr_eq(r, &s.rounds[i - 1]) || **r == *s.rounds[i - 1] {
                    last.last = k;
                    continue;
                }
            }
            segments.push(SegmentRecord {
                first: k,
                last: k,
                class_pair: r.class_pair,
                phi: r.phi.clone(),
                mu: r.mu.clone(),
                reward: r.reward.clone(),
            });
        }
        Self {
            version: SCENARIO_FORMAT_VERSION,
            space: s.space,
            dim: s.dim,
            drift: s.drift,
            misspecified: s.misspecified,
            segments,
        }
    }
}

impl ScenarioFile {
    pub fn into_scenario(self) -> Result<ScenarioSequence, EnvError> {
        if self.version != SCENARIO_FORMAT_VERSION {
            return Err(EnvError::InvalidConfig(vec![format!(
                "unsupported scenario version {} (expected {SCENARIO_FORMAT_VERSION})",
                self.version
            )]));
        }
        let mut rounds = Vec::new();
        for seg in self.segments {
            if seg.first != rounds.len() + 1 || seg.last < seg.first {
                return Err(EnvError::InvalidConfig(vec![format!(
                    "segment {}..={} does not continue round {}",
                    seg.first,
                    seg.last,
                    rounds.len()
                )]));
            }
            if seg.phi.space != self.space || seg.phi.dim != self.dim {
                return Err(EnvError::InvalidConfig(vec![format!(
                    "segment starting at round {} has a different shape",
                    seg.first
                )]));
            }
            let kernel = LowRankKernel::from_factors(&seg.phi, &seg.mu, KernelBounds::default())
                .map_err(MdpError::from)?;
            let model = Arc::new(RoundModel {
                phi: seg.phi,
                mu: seg.mu,
                kernel,
                reward: seg.reward,
                class_pair: seg.class_pair,
            });
            for _ in seg.first..=seg.last {
                rounds.push(Arc::clone(&model));
            }
        }
        ScenarioSequence::new(self.drift, self.misspecified, rounds)
    }
}

fn draw_reward<R: Rng + ?Sized>(rng: &mut R, space: StateActionSpace, spec: &RewardSpec) -> RewardTable {
    let cap = 1.0 / space.horizon as f64;
    let t = StateActionTable::from_fn(space, |_, _, _| cap * rng.random::<f64>().powf(spec.contrast));
    RewardTable::new(t).expect("capped rewards are normalized")
}

fn mirror_reward(r: &RewardTable) -> RewardTable {
    let space = r.space();
    let cap = 1.0 / space.horizon as f64;
    let t = StateActionTable::from_fn(space, |h, s, a| (cap - r.get(h, s, a)).max(0.0));
    RewardTable::new(t).expect("reflected rewards stay normalized")
}

fn class_round(
    class: &ModelClass,
    pair: (usize, usize),
    reward: RewardTable,
) -> Result<Arc<RoundModel>, EnvError> {
    let kernel = class
        .kernel(pair.0, pair.1)
        .ok_or_else(|| EnvError::InfeasibleDrift(format!("pair {pair:?} is not a valid class member")))?
        .clone();
    Ok(Arc::new(RoundModel {
        phi: class.phi(pair.0).clone(),
        mu: class.mu(pair.1).clone(),
        kernel,
        reward,
        class_pair: Some(pair),
    }))
}

/// Draws a valid pair different from `current` satisfying `allowed`.
fn draw_pair<R: Rng + ?Sized>(
    rng: &mut R,
    class: &ModelClass,
    current: Option<(usize, usize)>,
    allowed: impl Fn((usize, usize)) -> bool,
) -> Result<(usize, usize), EnvError> {
    let options: Vec<(usize, usize)> = class
        .valid_pairs()
        .filter(|&p| Some(p) != current && allowed(p))
        .collect();
    options
        .choose(rng)
        .copied()
        .ok_or_else(|| EnvError::InfeasibleDrift(format!("no class member can follow {current:?}")))
}

/// Instantiates a scenario whose kernels are drawn from `class`.
pub fn build_scenario<R: Rng + ?Sized>(
    config: &ScenarioConfig,
    class: &ModelClass,
    rng: &mut R,
) -> Result<ScenarioSequence, EnvError> {
    config.validate()?;
    let space = class.space();
    let starts = config.segment_starts();
    let n_segments = starts.len();

    // pick one class member per segment
    let mut pairs: Vec<(usize, usize)> = Vec::with_capacity(n_segments);
    if let Some(models) = &config.segment_models {
        for &p in models {
            if !class.is_valid(p.0, p.1) {
                return Err(EnvError::InfeasibleDrift(format!("pair {p:?} is not a valid class member")));
            }
        }
        if config.drift == DriftKind::EmbeddingOnly && models.iter().any(|p| p.0 != models[0].0) {
            return Err(EnvError::InvalidConfig(vec!["embedding-only drift must keep phi fixed".into()]));
        }
        pairs.extend(models.iter().copied());
    } else {
        pairs.push(draw_pair(rng, class, None, |_| true)?);
        for i in 1..n_segments {
            let cur = pairs[i - 1];
            let next = match config.drift {
                DriftKind::EmbeddingOnly => draw_pair(rng, class, Some(cur), |p| p.0 == cur.0)?,
                // one factor at a time, alternating phi and mu
                DriftKind::PiecewiseDrift if i % 2 == 1 => draw_pair(rng, class, Some(cur), |p| p.1 == cur.1)?,
                DriftKind::PiecewiseDrift => draw_pair(rng, class, Some(cur), |p| p.0 == cur.0)?,
                _ => draw_pair(rng, class, Some(cur), |_| true)?,
            };
            pairs.push(next);
        }
    }

    let mut rewards: Vec<RewardTable> = Vec::with_capacity(n_segments);
    for i in 0..n_segments {
        let next = match (i, config.reward.switch) {
            (0, _) | (_, RewardSwitch::Redraw) => draw_reward(rng, space, &config.reward),
            (_, RewardSwitch::Fixed) => rewards[i - 1].clone(),
            (_, RewardSwitch::Mirror) => mirror_reward(&rewards[i - 1]),
        };
        rewards.push(next);
    }

    let mut rounds: Vec<Arc<RoundModel>> = Vec::with_capacity(config.rounds);
    for (i, &start) in starts.iter().enumerate() {
        let end = starts.get(i + 1).map_or(config.rounds, |&n| n - 1);
        if config.misspecified {
            let next = pairs.get(i + 1).copied().unwrap_or(pairs[i]);
            let mu_idx = pairs[i].1;
            if !class.is_valid(next.0, mu_idx) {
                return Err(EnvError::InfeasibleDrift(format!(
                    "linear drift needs ({}, {mu_idx}) to be a valid pair",
                    next.0
                )));
            }
            let len = (end + 1 - start) as f64;
            for k in start..=end {
                let t = (k - start) as f64 / len;
                let (a, b) = (class.phi(pairs[i].0), class.phi(next.0));
                let values: Vec<f64> = a
                    .values()
                    .iter()
                    .zip(b.values())
                    .map(|(x, y)| (1.0 - t) * x + t * y)
                    .collect();
                let phi = RepresentationMap::new(space, class.dim(), values)?;
                let mu = class.mu(mu_idx).clone();
                let kernel = LowRankKernel::from_factors(&phi, &mu, KernelBounds::default())
                    .map_err(MdpError::from)?;
                let class_pair = (t == 0.0).then_some((pairs[i].0, mu_idx));
                rounds.push(Arc::new(RoundModel { phi, mu, kernel, reward: rewards[i].clone(), class_pair }));
            }
        } else {
            let model = class_round(class, pairs[i], rewards[i].clone())?;
            for _ in start..=end {
                rounds.push(Arc::clone(&model));
            }
        }
    }
    ScenarioSequence::new(config.drift, config.misspecified, rounds)
}

/// Cumulative drift measures of a scenario.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct VariationBudgets {
    pub delta_p: f64,
    pub delta_sqrt_p: f64,
    pub delta_phi: f64,
    pub delta_pi: f64,
    pub delta_r: f64,
}

impl VariationBudgets {
    pub fn total(&self) -> f64 {
        self.delta_p + self.delta_sqrt_p + self.delta_phi + self.delta_pi + self.delta_r
    }
}

/// Budgets over all rounds.
pub fn variation_budgets(scenario: &ScenarioSequence) -> VariationBudgets {
    variation_budgets_over(scenario, 1, scenario.num_rounds())
}

/// Budgets summing the changes between consecutive rounds in `first..=last`.
pub fn variation_budgets_over(scenario: &ScenarioSequence, first: usize, last: usize) -> VariationBudgets {
    let mut out = VariationBudgets::default();
    if last <= first || first == 0 || last > scenario.num_rounds() {
        return out;
    }
    let space = scenario.space();
    let optimal: Vec<Policy> = (first..=last)
        .map(|k| {
            let r = scenario.round(k);
            optimal_planning(&r.kernel, &r.reward).expect("consistent shapes").0
        })
        .collect();
    for k in first..last {
        let (a, b) = (scenario.round(k), scenario.round(k + 1));
        if a == b {
            continue;
        }
        let tv = tv_distance(&b.kernel, &a.kernel).expect("shared space");
        for h in 0..space.horizon {
            let mut tv_max: f64 = 0.0;
            let mut phi_max: f64 = 0.0;
            let mut r_max: f64 = 0.0;
            for s in 0..space.n_states {
                for act in 0..space.n_actions {
                    tv_max = tv_max.max(tv.get(h, s, act));
                    let dphi: f64 = a
                        .phi
                        .feature(h, s, act)
                        .iter()
                        .zip(b.phi.feature(h, s, act))
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum::<f64>()
                        .sqrt();
                    phi_max = phi_max.max(dphi);
                    r_max = r_max.max((a.reward.get(h, s, act) - b.reward.get(h, s, act)).abs());
                }
            }
            out.delta_p += tv_max;
            out.delta_sqrt_p += tv_max.sqrt();
            out.delta_phi += phi_max;
            out.delta_r += r_max;
            let (pa, pb) = (&optimal[k - first], &optimal[k + 1 - first]);
            let pi_max = (0..space.n_states)
                .map(|s| {
                    0.5 * pa.row(h, s).iter().zip(pb.row(h, s)).map(|(x, y)| (x - y).abs()).sum::<f64>()
                })
                .fold(0.0, f64::max);
            out.delta_pi += pi_max;
        }
    }
    out
}

/// Episodes each round may consume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeBudget {
    pub exploration: usize,
    pub evaluation: usize,
}

/// Episodes actually consumed in one round.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeCount {
    pub exploration: usize,
    pub evaluation: usize,
}

/// Agent-facing view of a scenario.
#[derive(Debug)]
pub struct Environment<'s> {
    scenario: &'s ScenarioSequence,
    budget: EpisodeBudget,
    next_round: usize,
    consumed: Vec<EpisodeCount>,
}

impl<'s> Environment<'s> {
    pub fn new(scenario: &'s ScenarioSequence, budget: EpisodeBudget) -> Self {
        Self { scenario, budget, next_round: 1, consumed: Vec::new() }
    }

    pub fn space(&self) -> StateActionSpace {
        self.scenario.space()
    }

    pub fn dim(&self) -> usize {
        self.scenario.dim()
    }

    pub fn num_rounds(&self) -> usize {
        self.scenario.num_rounds()
    }

    pub fn budget(&self) -> EpisodeBudget {
        self.budget
    }

    /// Episodes consumed in each finished round.
    pub fn consumed(&self) -> &[EpisodeCount] {
        &self.consumed
    }

    /// Opens round `k`; rounds must be visited as `1, 2, ..., K`.
    pub fn begin_round(&mut self, k: usize) -> Result<RoundHandle<'_, 's>, EnvError> {
        let total = self.num_rounds();
        if k != self.next_round || k == 0 || k > total {
            return Err(EnvError::OutOfOrderRound { requested: k, expected: self.next_round, total });
        }
        self.next_round += 1;
        self.consumed.push(EpisodeCount::default());
        Ok(RoundHandle { env: self, round: k, count: EpisodeCount::default(), finished: false })
    }
}

/// Single-owner access to one round: sampling, then post-hoc rewards.
#[derive(Debug)]
pub struct RoundHandle<'e, 's> {
    env: &'e mut Environment<'s>,
    round: usize,
    count: EpisodeCount,
    finished: bool,
}

impl RoundHandle<'_, '_> {
    pub fn round(&self) -> usize {
        self.round
    }

    pub fn space(&self) -> StateActionSpace {
        self.env.space()
    }

    pub fn count(&self) -> EpisodeCount {
        self.count
    }

    fn model(&self) -> &RoundModel {
        self.env.scenario.round(self.round)
    }

    /// One exploration episode; see [`sample_episode`] for `stop_step`/`uniform_tail`.
    pub fn explore<R: Rng + ?Sized>(
        &mut self,
        policy: &Policy,
        stop_step: Option<usize>,
        uniform_tail: usize,
        rng: &mut R,
    ) -> Result<Trajectory, EnvError> {
        let cap = self.env.budget.exploration;
        if self.count.exploration >= cap {
            return Err(EnvError::BudgetExhausted { round: self.round, kind: "exploration", cap });
        }
        let t = sample_episode(&self.model().kernel, policy, rng, stop_step, uniform_tail)?;
        self.count.exploration += 1;
        self.sync();
        Ok(t)
    }

    /// One full episode executing `policy`.
    pub fn evaluate<R: Rng + ?Sized>(&mut self, policy: &Policy, rng: &mut R) -> Result<Trajectory, EnvError> {
        let cap = self.env.budget.evaluation;
        if self.count.evaluation >= cap {
            return Err(EnvError::BudgetExhausted { round: self.round, kind: "evaluation", cap });
        }
        let t = sample_episode(&self.model().kernel, policy, rng, None, 0)?;
        self.count.evaluation += 1;
        self.sync();
        Ok(t)
    }

    /// Declares the round's exploration done, unlocking the reward.
    pub fn finish_exploration(&mut self) {
        self.finished = true;
    }

    pub fn reveal_rewards(&self) -> Result<RewardTable, EnvError> {
        if !self.finished {
            return Err(EnvError::RewardNotYetRevealed { round: self.round });
        }
        Ok(self.model().reward.clone())
    }

    fn sync(&mut self) {
        if let Some(last) = self.env.consumed.last_mut() {
            *last = self.count;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learning::ClassSpec;
    use crate::mdp::tv_distance;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn class(seed: u64) -> ModelClass {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let space = StateActionSpace::new(4, 2, 3).unwrap();
        let spec = ClassSpec { n_phi: 3, n_mu: 4, dim: 2, reach_floor: 0.02, density_cap: None, concentration: 1.0 };
        ModelClass::generate(&mut rng, space, spec).unwrap()
    }

    #[test]
    fn stationary_rounds_identical_and_budgets_zero() {
        let c = class(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = build_scenario(&ScenarioConfig::stationary(10), &c, &mut rng).unwrap();
        assert_eq!(s.num_rounds(), 10);
        assert!(s.rounds().all(|r| r == s.round(1)));
        assert_eq!(variation_budgets(&s), VariationBudgets::default());
        assert!(s.change_points().is_empty());
    }

    #[test]
    fn abrupt_switch_is_piecewise_constant() {
        let c = class(1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut cfg = ScenarioConfig::abrupt(10, vec![5]);
        cfg.segment_models = Some(vec![(0, 1), (2, 3)]);
        let s = build_scenario(&cfg, &c, &mut rng).unwrap();
        for k in 1..=4 {
            assert_eq!(s.round(k).class_pair, Some((0, 1)));
        }
        for k in 5..=10 {
            assert_eq!(s.round(k).class_pair, Some((2, 3)));
        }
        assert_eq!(s.change_points(), vec![5]);
        let b = variation_budgets(&s);
        assert!(b.delta_p > 0.0 && b.delta_sqrt_p >= b.delta_p);
    }

    #[test]
    fn mirrored_reward_reverses_preferences() {
        let c = class(1);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut cfg = ScenarioConfig::abrupt(9, vec![4, 7]);
        cfg.reward.switch = RewardSwitch::Mirror;
        let s = build_scenario(&cfg, &c, &mut rng).unwrap();
        let cap = 1.0 / 3.0;
        let (a, b, c3) = (&s.round(1).reward, &s.round(4).reward, &s.round(7).reward);
        for (x, y) in a.table().values().iter().zip(b.table().values()) {
            assert!((x + y - cap).abs() < 1e-15);
        }
        for (x, y) in a.table().values().iter().zip(c3.table().values()) {
            assert!((x - y).abs() < 1e-15);
        }
        cfg.reward.switch = RewardSwitch::Fixed;
        let s = build_scenario(&cfg, &c, &mut rng).unwrap();
        assert_eq!(s.round(1).reward, s.round(9).reward);
    }

    #[test]
    fn embedding_only_keeps_phi() {
        let c = class(4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = ScenarioConfig {
            drift: DriftKind::EmbeddingOnly,
            switch_rounds: vec![3, 6, 9],
            ..ScenarioConfig::stationary(12)
        };
        let s = build_scenario(&cfg, &c, &mut rng).unwrap();
        let b = variation_budgets(&s);
        assert_eq!(b.delta_phi, 0.0);
        assert!(b.delta_p > 0.0);
    }

    #[test]
    fn single_switch_single_step_budget() {
        // H = 1, two rounds whose kernels differ by TV 0.4 in one row
        let space = StateActionSpace::new(2, 1, 1).unwrap();
        let phi = RepresentationMap::new(space, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let mu_a = EmbeddingMap::new(2, 1, 2, vec![0.5, 0.5, 0.5, 0.5]).unwrap();
        let mu_b = EmbeddingMap::new(2, 1, 2, vec![0.9, 0.5, 0.1, 0.5]).unwrap();
        let reward = RewardTable::zeros(space);
        let round = |mu: &EmbeddingMap| {
            Arc::new(RoundModel {
                phi: phi.clone(),
                mu: mu.clone(),
                kernel: LowRankKernel::from_factors(&phi, mu, KernelBounds::default()).unwrap(),
                reward: reward.clone(),
                class_pair: None,
            })
        };
        let s = ScenarioSequence::new(DriftKind::EmbeddingOnly, false, vec![round(&mu_a), round(&mu_b)]).unwrap();
        let b = variation_budgets(&s);
        assert!((b.delta_p - 0.4).abs() < 1e-12);
        assert!((b.delta_sqrt_p - 0.4f64.sqrt()).abs() < 1e-12);
        assert_eq!(b.delta_phi, 0.0);
        assert_eq!(b.delta_pi, 0.0);
    }

    #[test]
    fn budgets_split_additively() {
        let c = class(6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = ScenarioConfig { drift: DriftKind::PiecewiseDrift, drift_period: 3, ..ScenarioConfig::stationary(20) };
        let s = build_scenario(&cfg, &c, &mut rng).unwrap();
        let all = variation_budgets(&s);
        for m in [2, 7, 13, 19] {
            let left = variation_budgets_over(&s, 1, m);
            let right = variation_budgets_over(&s, m, 20);
            assert!((all.delta_p - left.delta_p - right.delta_p).abs() < 1e-12);
            assert!((all.delta_sqrt_p - left.delta_sqrt_p - right.delta_sqrt_p).abs() < 1e-12);
            assert!((all.delta_phi - left.delta_phi - right.delta_phi).abs() < 1e-12);
            assert!((all.delta_pi - left.delta_pi - right.delta_pi).abs() < 1e-12);
            assert!((all.delta_r - left.delta_r - right.delta_r).abs() < 1e-12);
        }
    }

    #[test]
    fn misspecified_drift_leaves_class() {
        let c = class(8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = ScenarioConfig {
            drift: DriftKind::PiecewiseDrift,
            drift_period: 5,
            misspecified: true,
            ..ScenarioConfig::stationary(12)
        };
        let s = build_scenario(&cfg, &c, &mut rng).unwrap();
        assert!(s.is_misspecified());
        assert!(s.rounds().any(|r| r.class_pair.is_none()));
        for k in 1..12 {
            let tv = tv_distance(&s.round(k).kernel, &s.round(k + 1).kernel).unwrap();
            assert!(tv.values().iter().all(|&x| x <= 1.0));
        }
    }

    #[test]
    fn bad_configs() {
        let c = class(1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let zero = ScenarioConfig::stationary(0);
        assert!(matches!(build_scenario(&zero, &c, &mut rng), Err(EnvError::InvalidConfig(_))));
        let mut off = ScenarioConfig::abrupt(10, vec![5]);
        off.segment_models = Some(vec![(0, 0), (7, 0)]);
        assert!(matches!(build_scenario(&off, &c, &mut rng), Err(EnvError::InfeasibleDrift(_))));
        let unordered = ScenarioConfig::abrupt(10, vec![6, 4]);
        assert!(matches!(build_scenario(&unordered, &c, &mut rng), Err(EnvError::InvalidConfig(_))));
    }

    #[test]
    fn round_protocol() {
        let c = class(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = build_scenario(&ScenarioConfig::abrupt(3, vec![2]), &c, &mut rng).unwrap();
        let mut env = Environment::new(&s, EpisodeBudget { exploration: 2, evaluation: 1 });
        assert!(matches!(env.begin_round(0), Err(EnvError::OutOfOrderRound { .. })));
        assert!(matches!(env.begin_round(2), Err(EnvError::OutOfOrderRound { .. })));
        let pi = Policy::uniform(s.space());
        for k in 1..=3 {
            let mut h = env.begin_round(k).unwrap();
            assert!(matches!(h.reveal_rewards(), Err(EnvError::RewardNotYetRevealed { .. })));
            h.explore(&pi, None, 0, &mut rng).unwrap();
            h.explore(&pi, Some(1), 1, &mut rng).unwrap();
            assert!(matches!(h.explore(&pi, None, 0, &mut rng), Err(EnvError::BudgetExhausted { .. })));
            h.evaluate(&pi, &mut rng).unwrap();
            assert!(h.evaluate(&pi, &mut rng).is_err());
            h.finish_exploration();
            assert_eq!(h.reveal_rewards().unwrap(), s.round(k).reward);
        }
        assert!(matches!(env.begin_round(4), Err(EnvError::OutOfOrderRound { .. })));
        assert_eq!(env.consumed(), &[EpisodeCount { exploration: 2, evaluation: 1 }; 3]);
    }

    #[test]
    fn file_round_trip() {
        let c = class(10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = ScenarioConfig::abrupt(30, vec![10, 20]);
        let s = build_scenario(&cfg, &c, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scenario.json");
        s.save(&path).unwrap();
        let back = ScenarioSequence::load(&path).unwrap();
        assert_eq!(back.num_rounds(), 30);
        for k in 1..=30 {
            assert_eq!(back.round(k), s.round(k));
        }
        assert_eq!(variation_budgets(&back), variation_budgets(&s));
    }
}
