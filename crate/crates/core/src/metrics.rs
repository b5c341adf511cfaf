//! Ground-truth measurements of a finished run.
//!
//! Everything here reads the scenario and the policies an agent emitted;
//! nothing depends on the agent's internal model except the explicit
//! model-error profile, which takes the estimates as input.

use std::io::Write;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::ScenarioSequence;
use crate::learning::truncated_value_dp;
use crate::mdp::{
    evaluate_table, optimal_planning, policy_evaluation, reachable_states, state_distributions, tv_distance,
    LowRankKernel, MdpError, Policy, RewardTable, StateActionSpace, StateActionTable,
};
use crate::portal::RunLog;
use crate::random::{random_kernel, random_policy, random_reward, stream_rng_indexed, Stream};

/// Gaps below this are treated as planner bugs rather than rounding.
pub const NEGATIVE_GAP_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("expected {expected} entries, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("round {round}: negative gap {gap}")]
    NegativeGap { round: usize, gap: f64 },
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error("csv output: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Per-round suboptimality of the emitted policies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub v_star: Vec<f64>,
    pub v_pi: Vec<f64>,
    pub gaps: Vec<f64>,
    pub gap_ave: f64,
}

impl GapReport {
    /// Mean gap over 1-based rounds `first..=last`.
    pub fn mean_over(&self, first: usize, last: usize) -> f64 {
        let xs = &self.gaps[first - 1..last];
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Exact `V*_k - V^{pi_k}_k` for every round.
pub fn gap_ave(scenario: &ScenarioSequence, policies: &[&Policy]) -> Result<GapReport, MetricsError> {
    let n = scenario.num_rounds();
    if policies.len() != n {
        return Err(MetricsError::LengthMismatch { expected: n, got: policies.len() });
    }
    let mut report = GapReport { v_star: vec![], v_pi: vec![], gaps: vec![], gap_ave: 0.0 };
    // consecutive rounds often share one model, so reuse the optimum
    let mut cached: Option<(&crate::env::RoundModel, f64)> = None;
    for (i, pi) in policies.iter().enumerate() {
        let r = scenario.round(i + 1);
        let v_star = match cached {
            Some((prev, v)) if std::ptr::eq(prev, r) => v,
            _ => optimal_planning(&r.kernel, &r.reward)?.1.initial_value(),
        };
        cached = Some((r, v_star));
        let v_pi = policy_evaluation(&r.kernel, &r.reward, pi)?.initial_value();
        let mut gap = v_star - v_pi;
        if gap < -NEGATIVE_GAP_TOL {
            return Err(MetricsError::NegativeGap { round: i + 1, gap });
        }
        gap = gap.max(0.0);
        report.v_star.push(v_star);
        report.v_pi.push(v_pi);
        report.gaps.push(gap);
    }
    report.gap_ave = report.gaps.iter().sum::<f64>() / n as f64;
    Ok(report)
}

/// TV error of one round's estimate at one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelErrorRow {
    pub round: usize,
    pub step: usize,
    /// Largest TV over cells whose state is reachable at this step; cells no
    /// policy can visit carry no data and are left out.
    pub max_tv: f64,
    /// `E[f_h(s,a)]` with `s ~ (P*, pi)` and `a ~ pi`.
    pub expected_tv: f64,
}

/// Rows ordered by round, then step.
pub fn model_error_profile(
    scenario: &ScenarioSequence,
    estimates: &[&LowRankKernel],
    policies: &[&Policy],
) -> Result<Vec<ModelErrorRow>, MetricsError> {
    let n = scenario.num_rounds();
    for len in [estimates.len(), policies.len()] {
        if len != n {
            return Err(MetricsError::LengthMismatch { expected: n, got: len });
        }
    }
    let space = scenario.space();
    let mut rows = Vec::with_capacity(n * space.horizon);
    for k in 1..=n {
        let truth = &scenario.round(k).kernel;
        let f = tv_distance(truth, estimates[k - 1])?;
        let dist = state_distributions(truth, policies[k - 1])?;
        let reachable = reachable_states(truth);
        for (h, d) in dist.iter().enumerate() {
            let mut max_tv: f64 = 0.0;
            for s in (0..space.n_states).filter(|&s| reachable[h][s]) {
                for a in 0..space.n_actions {
                    max_tv = max_tv.max(f.get(h, s, a));
                }
            }
            let mut expected = 0.0;
            for (s, w) in d.iter().enumerate() {
                for a in 0..space.n_actions {
                    expected += w * policies[k - 1].prob(h, s, a) * f.get(h, s, a);
                }
            }
            rows.push(ModelErrorRow { round: k, step: h, max_tv, expected_tv: expected });
        }
    }
    Ok(rows)
}

/// Largest TV error over steps and cells, per round.
pub fn max_tv_per_round(rows: &[ModelErrorRow]) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::new();
    for r in rows {
        if out.len() < r.round {
            out.resize(r.round, 0.0);
        }
        out[r.round - 1] = out[r.round - 1].max(r.max_tv);
    }
    out
}

/// Largest `|direct - expansion|` over both value-difference expansions and
/// every `(h, s)`.
///
/// The direct side is `V1 - V2`; the expansions accumulate
/// `r1 - r2 + (P1 - P2) V_next` along rollouts of the other kernel, once with
/// `V1` under `P2` and once with `V2` under `P1`.
pub fn simulation_lemma_error(
    p1: &LowRankKernel,
    r1: &RewardTable,
    p2: &LowRankKernel,
    r2: &RewardTable,
    pi: &Policy,
) -> Result<f64, MdpError> {
    let space = p1.space();
    let v1 = evaluate_table(p1, r1.table(), pi)?;
    let v2 = evaluate_table(p2, r2.table(), pi)?;
    let increments = |next: &crate::mdp::ValueTables| {
        StateActionTable::from_fn(space, |h, s, a| {
            let ev = if h + 1 < space.horizon {
                p1.expect(h, s, a, next.v_step(h + 1)) - p2.expect(h, s, a, next.v_step(h + 1))
            } else {
                0.0
            };
            r1.get(h, s, a) - r2.get(h, s, a) + ev
        })
    };
    let form1 = evaluate_table(p2, &increments(&v1), pi)?;
    let form2 = evaluate_table(p1, &increments(&v2), pi)?;
    let mut worst: f64 = 0.0;
    for h in 0..space.horizon {
        for s in 0..space.n_states {
            let direct = v1.v(h, s) - v2.v(h, s);
            worst = worst.max((direct - form1.v(h, s)).abs()).max((direct - form2.v(h, s)).abs());
        }
    }
    Ok(worst)
}

/// Smallest `V_hat_{P_hat, f} - |V_{P*} - V_{P_hat}|` over every `(h, s)`,
/// with `f` the exact TV table between the kernels.
pub fn bounded_difference_slack(
    p_star: &LowRankKernel,
    p_hat: &LowRankKernel,
    r: &RewardTable,
    pi: &Policy,
) -> Result<f64, MdpError> {
    let f = tv_distance(p_star, p_hat)?;
    let v_star = policy_evaluation(p_star, r, pi)?;
    let v_hat = policy_evaluation(p_hat, r, pi)?;
    let bound = truncated_value_dp(p_hat, &f, pi)?;
    let space = p_star.space();
    let mut slack = f64::INFINITY;
    for h in 0..space.horizon {
        for s in 0..space.n_states {
            slack = slack.min(bound.v(h, s) - (v_star.v(h, s) - v_hat.v(h, s)).abs());
        }
    }
    Ok(slack)
}

/// Both sides of the elliptical potential bound for one sequence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EllipticalTerms {
    /// `sum_n tr(X_n M_{n-1}^{-1})`
    pub potential: f64,
    /// `2 log det M_N - 2 log det M_0`
    pub log_det_gap: f64,
    /// `2 d log(1 + N / (d lambda_0))`
    pub bound: f64,
}

impl EllipticalTerms {
    /// `potential - bound`; positive means the bound is violated.
    pub fn excess(&self) -> f64 {
        self.potential - self.bound
    }
}

/// Evaluates the potential sum with `M_0 = lambda0 I`, `M_n = M_{n-1} + X_n`.
pub fn elliptical_potential(dim: usize, lambda0: f64, xs: &[DMatrix<f64>]) -> EllipticalTerms {
    let mut m = DMatrix::<f64>::identity(dim, dim) * lambda0;
    let mut potential = 0.0;
    for x in xs {
        let chol = m.clone().cholesky().expect("M_n stays positive definite");
        potential += (x * chol.inverse()).trace();
        m += x;
    }
    let log_det = |m: &DMatrix<f64>| {
        let chol = m.clone().cholesky().expect("positive definite");
        2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>()
    };
    let m0 = DMatrix::<f64>::identity(dim, dim) * lambda0;
    let n = xs.len() as f64;
    EllipticalTerms {
        potential,
        log_det_gap: 2.0 * (log_det(&m) - log_det(&m0)),
        bound: 2.0 * dim as f64 * (1.0 + n / (dim as f64 * lambda0)).ln(),
    }
}

/// Uniform draw from the unit ball of `R^dim`.
pub fn unit_ball_point<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<f64> {
    let g: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
    let radius = rng.random::<f64>().powf(1.0 / dim as f64);
    if norm == 0.0 {
        return vec![0.0; dim];
    }
    g.iter().map(|x| x * radius / norm).collect()
}

/// Random tabular instance with `|S| <= 5`, `A <= 3`, `H <= 4`.
#[derive(Debug, Clone)]
pub struct LemmaInstance {
    pub p1: LowRankKernel,
    pub p2: LowRankKernel,
    pub r1: RewardTable,
    pub r2: RewardTable,
    pub policy: Policy,
}

pub fn lemma_instance<R: Rng + ?Sized>(rng: &mut R) -> LemmaInstance {
    let space = StateActionSpace::new(rng.random_range(1..=5), rng.random_range(1..=3), rng.random_range(1..=4))
        .expect("positive sizes");
    LemmaInstance {
        p1: random_kernel(rng, space),
        p2: random_kernel(rng, space),
        r1: random_reward(rng, space),
        r2: random_reward(rng, space),
        policy: random_policy(rng, space),
    }
}

/// Random rank-one sequence `X_n = x x^T`, `x` uniform in the unit ball,
/// with `d <= 4` and `N <= 500`.
pub fn elliptical_instance<R: Rng + ?Sized>(rng: &mut R) -> (usize, Vec<DMatrix<f64>>) {
    let dim = rng.random_range(1..=4);
    let n = rng.random_range(1..=500);
    let xs = (0..n)
        .map(|_| {
            let x = nalgebra::DVector::from_vec(unit_ball_point(rng, dim));
            &x * x.transpose()
        })
        .collect();
    (dim, xs)
}

/// Outcome of the three deterministic checks over random instances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LemmaReport {
    pub tabular_instances: usize,
    pub elliptical_instances: usize,
    pub simulation_max_error: f64,
    pub bounded_difference_min_slack: f64,
    pub elliptical_max_excess: f64,
    /// Sequences whose potential exceeded the bound, with `(d, N, lambda0)`.
    pub elliptical_failures: Vec<(usize, usize, f64)>,
}

impl LemmaReport {
    pub fn simulation_ok(&self, tol: f64) -> bool {
        self.simulation_max_error <= tol
    }

    pub fn bounded_difference_ok(&self, tol: f64) -> bool {
        self.bounded_difference_min_slack >= -tol
    }

    pub fn elliptical_ok(&self) -> bool {
        self.elliptical_failures.is_empty()
    }
}

/// `lambda0` used by the `i`-th elliptical sequence: alternates 0.1 and 1.
pub fn elliptical_lambda(i: usize) -> f64 {
    if i.is_multiple_of(2) {
        0.1
    } else {
        1.0
    }
}

/// Offset separating the elliptical draws from the tabular ones inside the
/// oracle stream.
const ELLIPTICAL_OFFSET: u64 = 1 << 32;

/// Runs the two value-function checks on `n_tabular` random instances and the
/// potential check on `n_elliptical` random sequences, all drawn from
/// `seed`'s oracle stream.
pub fn lemma_oracles(n_tabular: usize, n_elliptical: usize, seed: u64) -> Result<LemmaReport, MdpError> {
    let mut report = LemmaReport {
        tabular_instances: n_tabular,
        elliptical_instances: n_elliptical,
        simulation_max_error: 0.0,
        bounded_difference_min_slack: f64::INFINITY,
        elliptical_max_excess: f64::NEG_INFINITY,
        elliptical_failures: Vec::new(),
    };
    for i in 0..n_tabular {
        let mut rng = stream_rng_indexed(seed, Stream::Oracles, i as u64);
        let x = lemma_instance(&mut rng);
        report.simulation_max_error = report
            .simulation_max_error
            .max(simulation_lemma_error(&x.p1, &x.r1, &x.p2, &x.r2, &x.policy)?);
        report.bounded_difference_min_slack = report
            .bounded_difference_min_slack
            .min(bounded_difference_slack(&x.p1, &x.p2, &x.r1, &x.policy)?);
    }
    for i in 0..n_elliptical {
        let mut rng = stream_rng_indexed(seed, Stream::Oracles, ELLIPTICAL_OFFSET + i as u64);
        let lambda0 = elliptical_lambda(i);
        let (dim, xs) = elliptical_instance(&mut rng);
        let terms = elliptical_potential(dim, lambda0, &xs);
        report.elliptical_max_excess = report.elliptical_max_excess.max(terms.excess());
        if terms.excess() > 0.0 {
            report.elliptical_failures.push((dim, xs.len(), lambda0));
        }
    }
    Ok(report)
}

/// Per-round CSV row of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub round: usize,
    pub gap: f64,
    pub v_star: f64,
    pub v_pi: f64,
    pub max_tv_err: f64,
    pub restart_flag: bool,
    pub window: usize,
    pub tau: usize,
    pub seed: u64,
    /// Bandit block fields, present for adaptive runs.
    pub block: Option<BlockColumns>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockColumns {
    pub block: usize,
    pub arm_w: usize,
    pub arm_tau: usize,
    pub r_i: f64,
    pub u_entropy: f64,
}

pub const RUN_COLUMNS: [&str; 9] = ["round", "gap", "V_star", "V_pi", "max_TV_err", "restart_flag", "W", "tau", "seed"];
pub const BLOCK_COLUMNS: [&str; 5] = ["block", "arm_W", "arm_tau", "R_i", "u_entropy"];

/// Joins a run log with its ground-truth gaps and model errors.
pub fn run_rows(scenario: &ScenarioSequence, log: &RunLog) -> Result<(GapReport, Vec<RunRow>), MetricsError> {
    let policies = log.policies();
    let gaps = gap_ave(scenario, &policies)?;
    let errors = model_error_profile(scenario, &log.estimates(), &policies)?;
    let max_tv = max_tv_per_round(&errors);
    let mut rows = Vec::with_capacity(log.rounds.len());
    for (i, r) in log.rounds.iter().enumerate() {
        let block = log
            .blocks
            .iter()
            .find(|b| (b.first_round..=b.last_round).contains(&r.round))
            .map(|b| BlockColumns {
                block: b.block,
                arm_w: b.window,
                arm_tau: b.restart_period,
                r_i: b.block_reward,
                u_entropy: b.entropy,
            });
        rows.push(RunRow {
            round: r.round,
            gap: gaps.gaps[i],
            v_star: gaps.v_star[i],
            v_pi: gaps.v_pi[i],
            max_tv_err: max_tv[i],
            restart_flag: r.restarted,
            window: r.window,
            tau: r.restart_period,
            seed: log.seed,
            block,
        });
    }
    Ok((gaps, rows))
}

/// Writes rows as CSV; block columns are added when any row carries them.
pub fn write_run_csv<W: Write>(out: W, rows: &[RunRow]) -> Result<(), MetricsError> {
    let adaptive = rows.iter().any(|r| r.block.is_some());
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<&str> = RUN_COLUMNS.to_vec();
    if adaptive {
        header.extend(BLOCK_COLUMNS);
    }
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.round.to_string(),
            r.gap.to_string(),
            r.v_star.to_string(),
            r.v_pi.to_string(),
            r.max_tv_err.to_string(),
            u8::from(r.restart_flag).to_string(),
            r.window.to_string(),
            r.tau.to_string(),
            r.seed.to_string(),
        ];
        if adaptive {
            match &r.block {
                Some(b) => rec.extend([
                    b.block.to_string(),
                    b.arm_w.to_string(),
                    b.arm_tau.to_string(),
                    b.r_i.to_string(),
                    b.u_entropy.to_string(),
                ]),
                None => rec.extend(std::iter::repeat_n(String::new(), BLOCK_COLUMNS.len())),
            }
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
