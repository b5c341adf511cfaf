//! Random instance generators and seeded RNG streams.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};

use crate::mdp::{
    EmbeddingMap, LowRankKernel, Policy, RepresentationMap, RewardTable, StateActionSpace,
    StateActionTable,
};

/// Named consumers of randomness within one run.
///
/// Each stream is the same ChaCha key with a distinct stream id, so adding a
/// consumer never perturbs the draws of existing ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Scenario = 1,
    Exploration = 2,
    Evaluation = 3,
    AdaMaster = 4,
    Oracles = 5,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    stream_rng_indexed(seed, stream, 0)
}

/// Stream with a sub-index (e.g. one per block or per instance).
pub fn stream_rng_indexed(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stream as u64) << 48) | (index & 0xFFFF_FFFF_FFFF));
    rng
}

/// Dirichlet(`concentration`, ..., `concentration`) draw over `n` coordinates.
pub fn simplex_point<R: Rng + ?Sized>(rng: &mut R, n: usize, concentration: f64) -> Vec<f64> {
    let gamma = Gamma::new(concentration, 1.0).expect("positive concentration");
    loop {
        let xs: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
        let total: f64 = xs.iter().sum();
        if total > 0.0 && total.is_finite() {
            return xs.into_iter().map(|x| x / total).collect();
        }
    }
}

/// Dense kernel with Dirichlet(1) rows; no low-rank structure beyond `d = |S|`.
pub fn random_kernel<R: Rng + ?Sized>(rng: &mut R, space: StateActionSpace) -> LowRankKernel {
    let n = space.n_states;
    let mut probs = Vec::with_capacity(space.table_len() * n);
    for _ in 0..space.table_len() {
        probs.extend(simplex_point(rng, n, 1.0));
    }
    LowRankKernel::from_dense(space, probs).expect("simplex rows")
}

/// Rewards uniform on `[0, 1/H]`, which keeps every trajectory's total in `[0,1]`.
pub fn random_reward<R: Rng + ?Sized>(rng: &mut R, space: StateActionSpace) -> RewardTable {
    let cap = 1.0 / space.horizon as f64;
    let t = StateActionTable::from_fn(space, |_, _, _| cap * rng.random::<f64>());
    RewardTable::new(t).expect("capped rewards are normalized")
}

pub fn random_policy<R: Rng + ?Sized>(rng: &mut R, space: StateActionSpace) -> Policy {
    let mut values = Vec::with_capacity(space.table_len());
    for _ in 0..space.horizon * space.n_states {
        values.extend(simplex_point(rng, space.n_actions, 1.0));
    }
    let t = StateActionTable::from_values(space, values).expect("shape");
    Policy::from_table(t).expect("simplex rows")
}

/// Random valid factor pair.
///
/// `phi_h(s,a)` is a point of the `d`-simplex and every coordinate of `mu_h`
/// is a distribution over next states with mass at least `floor` on each
/// state, so `<phi, mu>` is a kernel with `P >= floor` for any pairing of
/// factors built this way.
pub fn random_factors<R: Rng + ?Sized>(
    rng: &mut R,
    space: StateActionSpace,
    dim: usize,
    floor: f64,
) -> (RepresentationMap, EmbeddingMap) {
    let phi = random_representation(rng, space, dim, 1.0);
    let mu = random_embedding(rng, space, dim, floor, 1.0);
    (phi, mu)
}

pub fn random_representation<R: Rng + ?Sized>(
    rng: &mut R,
    space: StateActionSpace,
    dim: usize,
    concentration: f64,
) -> RepresentationMap {
    RepresentationMap::from_fn(space, dim, |_, _, _| simplex_point(rng, dim, concentration))
        .expect("shape")
}

pub fn random_embedding<R: Rng + ?Sized>(
    rng: &mut R,
    space: StateActionSpace,
    dim: usize,
    floor: f64,
    concentration: f64,
) -> EmbeddingMap {
    let n = space.n_states;
    assert!(floor * n as f64 <= 1.0, "floor {floor} infeasible for {n} states");
    let mut values = vec![0.0; space.horizon * n * dim];
    for h in 0..space.horizon {
        for i in 0..dim {
            let q = simplex_point(rng, n, concentration);
            for (s, qs) in q.into_iter().enumerate() {
                values[(h * n + s) * dim + i] = floor + (1.0 - floor * n as f64) * qs;
            }
        }
    }
    EmbeddingMap::new(n, space.horizon, dim, values).expect("shape")
}
