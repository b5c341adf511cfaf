//! Brute-force oracles shared by unit tests.

pub use crate::random::{random_factors, random_kernel, random_policy, random_reward};

use crate::mdp::{LowRankKernel, Policy, RewardTable, StateActionSpace, INITIAL_STATE};

/// `V_1(s_1)` by summing reward-weighted probabilities over every trajectory.
pub fn enumerate_value(k: &LowRankKernel, r: &RewardTable, pi: &Policy) -> f64 {
    fn go(k: &LowRankKernel, r: &RewardTable, pi: &Policy, h: usize, s: usize, w: f64, acc: f64) -> f64 {
        let sp = k.space();
        if h == sp.horizon {
            return w * acc;
        }
        let mut total = 0.0;
        for a in 0..sp.n_actions {
            let pa = pi.prob(h, s, a);
            if pa == 0.0 {
                continue;
            }
            for n in 0..sp.n_states {
                let p = k.prob(h, s, a, n);
                total += go(k, r, pi, h + 1, n, w * pa * p, acc + r.get(h, s, a));
            }
        }
        total
    }
    go(k, r, pi, 0, INITIAL_STATE, 1.0, 0.0)
}

/// Every deterministic policy of the space (`A^(|S| H)` of them).
pub fn all_deterministic_policies(space: StateActionSpace) -> impl Iterator<Item = Policy> {
    let cells = space.n_states * space.horizon;
    let total = (space.n_actions as u64).pow(cells as u32);
    (0..total).map(move |mut code| {
        let mut actions = vec![vec![0; space.n_states]; space.horizon];
        for cell in actions.iter_mut().flatten() {
            *cell = (code % space.n_actions as u64) as usize;
            code /= space.n_actions as u64;
        }
        Policy::deterministic(space, &actions).unwrap()
    })
}
