//! Finite episodic MDPs with low-rank transition kernels.
//!
//! Steps are 0-based internally (`h = 0..horizon`), states and actions are
//! dense indices. Every episode starts from [`INITIAL_STATE`].
//!
//! A kernel at step `h` factors as `P_h(s'|s,a) = <phi_h(s,a), mu_h(s')>`.
//! [`LowRankKernel`] stores the dense tables; the factors live in
//! [`RepresentationMap`] / [`EmbeddingMap`] and are only needed to build
//! and validate a kernel.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Fixed initial state `s_1` of every episode.
pub const INITIAL_STATE: usize = 0;

/// Tolerance for row sums of stochastic tables.
pub const SIMPLEX_TOL: f64 = 1e-12;

/// Largest state count for which the embedding-norm vertex check runs.
pub const EMBEDDING_CHECK_MAX_STATES: usize = 12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MdpError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid stop step {stop_step} with uniform tail {uniform_tail} (horizon {horizon})")]
    InvalidStopStep {
        stop_step: usize,
        uniform_tail: usize,
        horizon: usize,
    },
    #[error("{0}")]
    Validation(#[from] ValidationError),
}

/// One violated invariant found while validating a kernel or its factors.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    DimensionMismatch(String),
    FeatureNormExceeded { h: usize, s: usize, a: usize, norm: f64 },
    EmbeddingNormExceeded { h: usize, norm: f64 },
    NegativeEntry { h: usize, s: usize, a: usize, next: usize, value: f64 },
    NonSimplexRow { h: usize, s: usize, a: usize, sum: f64 },
    DensityBoundViolated { h: usize, s: usize, a: usize, next: usize, value: f64, bound: f64 },
    ReachabilityViolated { h: usize, s: usize, a: usize, next: usize, value: f64, floor: f64 },
    RewardOutOfRange { h: usize, s: usize, a: usize, value: f64 },
    RewardNotNormalized { total: f64 },
    PolicyRow { h: usize, s: usize, sum: f64 },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::DimensionMismatch(m) => write!(f, "dimension mismatch: {m}"),
            Violation::FeatureNormExceeded { h, s, a, norm } => {
                write!(f, "|phi_{h}({s},{a})| = {norm} > 1")
            }
            Violation::EmbeddingNormExceeded { h, norm } => {
                write!(f, "embedding norm at step {h} reaches {norm} > sqrt(d)")
            }
            Violation::NegativeEntry { h, s, a, next, value } => {
                write!(f, "P_{h}({next}|{s},{a}) = {value} < 0")
            }
            Violation::NonSimplexRow { h, s, a, sum } => {
                write!(f, "row P_{h}(.|{s},{a}) sums to {sum}")
            }
            Violation::DensityBoundViolated { h, s, a, next, value, bound } => {
                write!(f, "P_{h}({next}|{s},{a}) = {value} exceeds density bound {bound}")
            }
            Violation::ReachabilityViolated { h, s, a, next, value, floor } => {
                write!(f, "P_{h}({next}|{s},{a}) = {value} below reachability floor {floor}")
            }
            Violation::RewardOutOfRange { h, s, a, value } => {
                write!(f, "r_{h}({s},{a}) = {value} outside [0,1]")
            }
            Violation::RewardNotNormalized { total } => {
                write!(f, "sum over steps of max reward is {total} > 1")
            }
            Violation::PolicyRow { h, s, sum } => write!(f, "pi_{h}(.|{s}) sums to {sum}"),
        }
    }
}

/// Every invariant violation found during one validation pass.
#[derive(Debug, Error, Clone, PartialEq)]
#[error("validation failed with {} violation(s): {}", .violations.len(), summarize(.violations))]
pub struct ValidationError {
    pub violations: Vec<Violation>,
}

fn summarize(v: &[Violation]) -> String {
    let mut parts: Vec<String> = v.iter().take(3).map(|x| x.to_string()).collect();
    if v.len() > 3 {
        parts.push(format!("... and {} more", v.len() - 3));
    }
    parts.join("; ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateActionSpace {
    pub n_states: usize,
    pub n_actions: usize,
    pub horizon: usize,
}

impl StateActionSpace {
    pub fn new(n_states: usize, n_actions: usize, horizon: usize) -> Result<Self, MdpError> {
        if n_states == 0 || n_actions == 0 || horizon == 0 {
            return Err(MdpError::ShapeMismatch(format!(
                "space sizes must be positive, got |S|={n_states}, A={n_actions}, H={horizon}"
            )));
        }
        Ok(Self { n_states, n_actions, horizon })
    }

    /// Number of `(h, s, a)` cells.
    pub fn table_len(&self) -> usize {
        self.horizon * self.n_states * self.n_actions
    }

    #[inline]
    pub fn index(&self, h: usize, s: usize, a: usize) -> usize {
        (h * self.n_states + s) * self.n_actions + a
    }

    fn ensure_same(&self, other: &StateActionSpace, what: &str) -> Result<(), MdpError> {
        if self != other {
            return Err(MdpError::ShapeMismatch(format!(
                "{what}: {self:?} vs {other:?}"
            )));
        }
        Ok(())
    }
}

/// Step-indexed `(s, a) -> R` table. Backs rewards, bonuses and TV tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateActionTable {
    space: StateActionSpace,
    values: Vec<f64>,
}

impl StateActionTable {
    pub fn zeros(space: StateActionSpace) -> Self {
        Self { space, values: vec![0.0; space.table_len()] }
    }

    pub fn filled(space: StateActionSpace, value: f64) -> Self {
        Self { space, values: vec![value; space.table_len()] }
    }

    pub fn from_values(space: StateActionSpace, values: Vec<f64>) -> Result<Self, MdpError> {
        if values.len() != space.table_len() {
            return Err(MdpError::ShapeMismatch(format!(
                "table has {} entries, expected {}",
                values.len(),
                space.table_len()
            )));
        }
        Ok(Self { space, values })
    }

    pub fn from_fn(space: StateActionSpace, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(space.table_len());
        for h in 0..space.horizon {
            for s in 0..space.n_states {
                for a in 0..space.n_actions {
                    values.push(f(h, s, a));
                }
            }
        }
        Self { space, values }
    }

    pub fn space(&self) -> StateActionSpace {
        self.space
    }

    #[inline]
    pub fn get(&self, h: usize, s: usize, a: usize) -> f64 {
        self.values[self.space.index(h, s, a)]
    }

    #[inline]
    pub fn set(&mut self, h: usize, s: usize, a: usize, v: f64) {
        let i = self.space.index(h, s, a);
        self.values[i] = v;
    }

    pub fn row(&self, h: usize, s: usize) -> &[f64] {
        let start = self.space.index(h, s, 0);
        &self.values[start..start + self.space.n_actions]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Maximum entry at step `h`.
    pub fn step_max(&self, h: usize) -> f64 {
        let n = self.space.n_states * self.space.n_actions;
        self.values[h * n..(h + 1) * n]
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Deterministic reward `r_h(s,a)` with `sum_h r_h <= 1` along every trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "StateActionTable", into = "StateActionTable")]
pub struct RewardTable(StateActionTable);

impl RewardTable {
    /// Validates entries in `[0,1]` and the sufficient normalization
    /// `sum_h max_{s,a} r_h(s,a) <= 1`.
    pub fn new(table: StateActionTable) -> Result<Self, ValidationError> {
        let space = table.space();
        let mut violations = Vec::new();
        for h in 0..space.horizon {
            for s in 0..space.n_states {
                for a in 0..space.n_actions {
                    let v = table.get(h, s, a);
                    if !(0.0..=1.0).contains(&v) {
                        violations.push(Violation::RewardOutOfRange { h, s, a, value: v });
                    }
                }
            }
        }
        let total: f64 = (0..space.horizon).map(|h| table.step_max(h)).sum();
        if total > 1.0 + SIMPLEX_TOL {
            violations.push(Violation::RewardNotNormalized { total });
        }
        if violations.is_empty() {
            Ok(Self(table))
        } else {
            Err(ValidationError { violations })
        }
    }

    pub fn zeros(space: StateActionSpace) -> Self {
        Self(StateActionTable::zeros(space))
    }

    pub fn table(&self) -> &StateActionTable {
        &self.0
    }

    pub fn space(&self) -> StateActionSpace {
        self.0.space()
    }

    #[inline]
    pub fn get(&self, h: usize, s: usize, a: usize) -> f64 {
        self.0.get(h, s, a)
    }
}

impl TryFrom<StateActionTable> for RewardTable {
    type Error = ValidationError;
    fn try_from(t: StateActionTable) -> Result<Self, Self::Error> {
        RewardTable::new(t)
    }
}

impl From<RewardTable> for StateActionTable {
    fn from(r: RewardTable) -> Self {
        r.0
    }
}

/// `phi_h(s, a) in R^d` for every step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepresentationMap {
    pub space: StateActionSpace,
    pub dim: usize,
    values: Vec<f64>,
}

impl RepresentationMap {
    pub fn new(space: StateActionSpace, dim: usize, values: Vec<f64>) -> Result<Self, MdpError> {
        if dim == 0 || values.len() != space.table_len() * dim {
            return Err(MdpError::ShapeMismatch(format!(
                "representation needs {} values for d={dim}, got {}",
                space.table_len() * dim,
                values.len()
            )));
        }
        Ok(Self { space, dim, values })
    }

    pub fn from_fn(
        space: StateActionSpace,
        dim: usize,
        mut f: impl FnMut(usize, usize, usize) -> Vec<f64>,
    ) -> Result<Self, MdpError> {
        let mut values = Vec::with_capacity(space.table_len() * dim);
        for h in 0..space.horizon {
            for s in 0..space.n_states {
                for a in 0..space.n_actions {
                    let v = f(h, s, a);
                    if v.len() != dim {
                        return Err(MdpError::ShapeMismatch(format!(
                            "feature at ({h},{s},{a}) has length {}, expected {dim}",
                            v.len()
                        )));
                    }
                    values.extend(v);
                }
            }
        }
        Ok(Self { space, dim, values })
    }

    #[inline]
    pub fn feature(&self, h: usize, s: usize, a: usize) -> &[f64] {
        let start = self.space.index(h, s, a) * self.dim;
        &self.values[start..start + self.dim]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Violations of `|phi_h(s,a)|_2 <= 1`.
    pub fn norm_violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        for h in 0..self.space.horizon {
            for s in 0..self.space.n_states {
                for a in 0..self.space.n_actions {
                    let norm = l2(self.feature(h, s, a));
                    if norm > 1.0 + SIMPLEX_TOL {
                        out.push(Violation::FeatureNormExceeded { h, s, a, norm });
                    }
                }
            }
        }
        out
    }
}

/// `mu_h(s') in R^d` for every step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingMap {
    pub n_states: usize,
    pub horizon: usize,
    pub dim: usize,
    values: Vec<f64>,
}

impl EmbeddingMap {
    pub fn new(n_states: usize, horizon: usize, dim: usize, values: Vec<f64>) -> Result<Self, MdpError> {
        if dim == 0 || values.len() != n_states * horizon * dim {
            return Err(MdpError::ShapeMismatch(format!(
                "embedding needs {} values, got {}",
                n_states * horizon * dim,
                values.len()
            )));
        }
        Ok(Self { n_states, horizon, dim, values })
    }

    pub fn from_fn(
        n_states: usize,
        horizon: usize,
        dim: usize,
        mut f: impl FnMut(usize, usize) -> Vec<f64>,
    ) -> Result<Self, MdpError> {
        let mut values = Vec::with_capacity(n_states * horizon * dim);
        for h in 0..horizon {
            for s in 0..n_states {
                let v = f(h, s);
                if v.len() != dim {
                    return Err(MdpError::ShapeMismatch(format!(
                        "embedding at ({h},{s}) has length {}, expected {dim}",
                        v.len()
                    )));
                }
                values.extend(v);
            }
        }
        Ok(Self { n_states, horizon, dim, values })
    }

    #[inline]
    pub fn embedding(&self, h: usize, next: usize) -> &[f64] {
        let start = (h * self.n_states + next) * self.dim;
        &self.values[start..start + self.dim]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Largest `|sum_s' mu_h(s') g(s')|_2` over binary `g`, per step.
    ///
    /// The norm is convex in `g`, so the maximum over `g: S -> [0,1]` sits on a
    /// hypercube vertex. Returns `None` above [`EMBEDDING_CHECK_MAX_STATES`].
    pub fn max_vertex_norm(&self) -> Option<Vec<f64>> {
        if self.n_states > EMBEDDING_CHECK_MAX_STATES {
            return None;
        }
        let mut out = Vec::with_capacity(self.horizon);
        for h in 0..self.horizon {
            let mut best: f64 = 0.0;
            for mask in 0u32..(1u32 << self.n_states) {
                let mut acc = vec![0.0; self.dim];
                for s in 0..self.n_states {
                    if mask & (1 << s) != 0 {
                        for (x, m) in acc.iter_mut().zip(self.embedding(h, s)) {
                            *x += m;
                        }
                    }
                }
                best = best.max(l2(&acc));
            }
            out.push(best);
        }
        Some(out)
    }

    pub fn norm_violations(&self) -> Vec<Violation> {
        let bound = (self.dim as f64).sqrt();
        match self.max_vertex_norm() {
            Some(norms) => norms
                .into_iter()
                .enumerate()
                .filter(|(_, n)| *n > bound + 1e-9)
                .map(|(h, norm)| Violation::EmbeddingNormExceeded { h, norm })
                .collect(),
            None => {
                log::warn!(
                    "skipping embedding norm check: {} states exceeds enumeration limit {}",
                    self.n_states,
                    EMBEDDING_CHECK_MAX_STATES
                );
                Vec::new()
            }
        }
    }
}

/// Optional density cap `B` and reachability floor `p_min` a kernel must respect.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct KernelBounds {
    pub density_cap: Option<f64>,
    pub reach_floor: Option<f64>,
}

/// Dense tabular kernel `P_h(s'|s,a)`.
///
/// Every finite kernel is low rank with `d = |S|`; kernels built through
/// [`LowRankKernel::from_factors`] additionally carry the factor validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowRankKernel {
    space: StateActionSpace,
    probs: Vec<f64>,
}

impl LowRankKernel {
    /// Multiplies out `<phi_h(s,a), mu_h(s')>` and validates the result.
    pub fn from_factors(
        phi: &RepresentationMap,
        mu: &EmbeddingMap,
        bounds: KernelBounds,
    ) -> Result<Self, ValidationError> {
        let space = phi.space;
        if phi.dim != mu.dim || mu.n_states != space.n_states || mu.horizon != space.horizon {
            return Err(ValidationError {
                violations: vec![Violation::DimensionMismatch(format!(
                    "phi (d={}, |S|={}, H={}) vs mu (d={}, |S|={}, H={})",
                    phi.dim, space.n_states, space.horizon, mu.dim, mu.n_states, mu.horizon
                ))],
            });
        }
        let kernel = Self::product(phi, mu);
        let mut violations = phi.norm_violations();
        violations.extend(mu.norm_violations());
        violations.extend(kernel.violations(bounds));
        if violations.is_empty() {
            Ok(kernel)
        } else {
            Err(ValidationError { violations })
        }
    }

    /// Unvalidated product of factors; callers must check [`Self::violations`].
    pub(crate) fn product(phi: &RepresentationMap, mu: &EmbeddingMap) -> Self {
        let space = phi.space;
        let n = space.n_states;
        let mut probs = Vec::with_capacity(space.table_len() * n);
        for h in 0..space.horizon {
            for s in 0..n {
                for a in 0..space.n_actions {
                    let f = phi.feature(h, s, a);
                    for next in 0..n {
                        probs.push(dot(f, mu.embedding(h, next)));
                    }
                }
            }
        }
        Self { space, probs }
    }

    /// Builds a kernel from dense rows laid out as `[h][s][a][s']`.
    pub fn from_dense(space: StateActionSpace, probs: Vec<f64>) -> Result<Self, MdpError> {
        if probs.len() != space.table_len() * space.n_states {
            return Err(MdpError::ShapeMismatch(format!(
                "kernel has {} entries, expected {}",
                probs.len(),
                space.table_len() * space.n_states
            )));
        }
        let kernel = Self { space, probs };
        let violations = kernel.violations(KernelBounds::default());
        if violations.is_empty() {
            Ok(kernel)
        } else {
            Err(ValidationError { violations }.into())
        }
    }

    /// Assembles a kernel whose step-`h` rows are copied from `steps[h]`.
    pub fn from_steps(steps: &[&LowRankKernel]) -> Result<Self, MdpError> {
        let first = steps
            .first()
            .ok_or_else(|| MdpError::ShapeMismatch("no steps".into()))?;
        let space = first.space;
        if steps.len() != space.horizon {
            return Err(MdpError::ShapeMismatch(format!(
                "{} step kernels for horizon {}",
                steps.len(),
                space.horizon
            )));
        }
        let stride = space.n_states * space.n_actions * space.n_states;
        let mut probs = Vec::with_capacity(stride * space.horizon);
        for (h, k) in steps.iter().enumerate() {
            space.ensure_same(&k.space, "step kernel")?;
            probs.extend_from_slice(&k.probs[h * stride..(h + 1) * stride]);
        }
        Ok(Self { space, probs })
    }

    pub fn violations(&self, bounds: KernelBounds) -> Vec<Violation> {
        let space = self.space;
        let mut out = Vec::new();
        for h in 0..space.horizon {
            for s in 0..space.n_states {
                for a in 0..space.n_actions {
                    let row = self.row(h, s, a);
                    let mut sum = 0.0;
                    for (next, &p) in row.iter().enumerate() {
                        sum += p;
                        if p < 0.0 {
                            out.push(Violation::NegativeEntry { h, s, a, next, value: p });
                        }
                        if let Some(bound) = bounds.density_cap {
                            if p > bound {
                                out.push(Violation::DensityBoundViolated { h, s, a, next, value: p, bound });
                            }
                        }
                        if let Some(floor) = bounds.reach_floor {
                            if p < floor {
                                out.push(Violation::ReachabilityViolated { h, s, a, next, value: p, floor });
                            }
                        }
                    }
                    if (sum - 1.0).abs() > SIMPLEX_TOL * (space.n_states as f64).max(1.0) {
                        out.push(Violation::NonSimplexRow { h, s, a, sum });
                    }
                }
            }
        }
        out
    }

    pub fn space(&self) -> StateActionSpace {
        self.space
    }

    #[inline]
    pub fn row(&self, h: usize, s: usize, a: usize) -> &[f64] {
        let n = self.space.n_states;
        let start = self.space.index(h, s, a) * n;
        &self.probs[start..start + n]
    }

    #[inline]
    pub fn prob(&self, h: usize, s: usize, a: usize, next: usize) -> f64 {
        self.row(h, s, a)[next]
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// `(P_h f)(s, a)`.
    #[inline]
    pub fn expect(&self, h: usize, s: usize, a: usize, f: &[f64]) -> f64 {
        dot(self.row(h, s, a), f)
    }

    /// Largest entry (the density constant `B` of this kernel).
    pub fn max_density(&self) -> f64 {
        self.probs.iter().copied().fold(0.0, f64::max)
    }

    /// Smallest entry (the reachability constant `p_min` of this kernel).
    pub fn min_density(&self) -> f64 {
        self.probs.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Per-step stochastic action distributions `pi_h(a|s)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy(StateActionTable);

impl Policy {
    pub fn uniform(space: StateActionSpace) -> Self {
        Self(StateActionTable::filled(space, 1.0 / space.n_actions as f64))
    }

    /// Point-mass policy; `actions[h][s]` is the chosen action.
    pub fn deterministic(space: StateActionSpace, actions: &[Vec<usize>]) -> Result<Self, MdpError> {
        if actions.len() != space.horizon || actions.iter().any(|r| r.len() != space.n_states) {
            return Err(MdpError::ShapeMismatch("deterministic action table".into()));
        }
        if actions.iter().flatten().any(|&a| a >= space.n_actions) {
            return Err(MdpError::ShapeMismatch("action index out of range".into()));
        }
        Ok(Self(StateActionTable::from_fn(space, |h, s, a| {
            if actions[h][s] == a {
                1.0
            } else {
                0.0
            }
        })))
    }

    pub fn from_table(table: StateActionTable) -> Result<Self, ValidationError> {
        let space = table.space();
        let mut violations = Vec::new();
        for h in 0..space.horizon {
            for s in 0..space.n_states {
                let row = table.row(h, s);
                let sum: f64 = row.iter().sum();
                if row.iter().any(|&p| p < 0.0) || (sum - 1.0).abs() > SIMPLEX_TOL * 4.0 {
                    violations.push(Violation::PolicyRow { h, s, sum });
                }
            }
        }
        if violations.is_empty() {
            Ok(Self(table))
        } else {
            Err(ValidationError { violations })
        }
    }

    pub fn space(&self) -> StateActionSpace {
        self.0.space()
    }

    #[inline]
    pub fn prob(&self, h: usize, s: usize, a: usize) -> f64 {
        self.0.get(h, s, a)
    }

    pub fn row(&self, h: usize, s: usize) -> &[f64] {
        self.0.row(h, s)
    }

    pub fn table(&self) -> &StateActionTable {
        &self.0
    }

    /// Greedy action per `(h, s)`; only meaningful for point-mass policies.
    pub fn argmax_actions(&self) -> Vec<Vec<usize>> {
        let space = self.space();
        (0..space.horizon)
            .map(|h| (0..space.n_states).map(|s| argmax_first(self.row(h, s))).collect())
            .collect()
    }

    pub fn sample_action<R: Rng + ?Sized>(&self, h: usize, s: usize, rng: &mut R) -> usize {
        sample_index(self.row(h, s), rng)
    }
}

/// `V_h(s)` and `Q_h(s,a)`; `V_{H+1} = 0` is implicit.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueTables {
    space: StateActionSpace,
    v: Vec<f64>,
    q: StateActionTable,
}

impl ValueTables {
    pub fn zeros(space: StateActionSpace) -> Self {
        Self {
            space,
            v: vec![0.0; space.horizon * space.n_states],
            q: StateActionTable::zeros(space),
        }
    }

    #[inline]
    pub fn v(&self, h: usize, s: usize) -> f64 {
        self.v[h * self.space.n_states + s]
    }

    #[inline]
    pub fn q(&self, h: usize, s: usize, a: usize) -> f64 {
        self.q.get(h, s, a)
    }

    pub fn v_step(&self, h: usize) -> &[f64] {
        let n = self.space.n_states;
        &self.v[h * n..(h + 1) * n]
    }

    pub fn q_table(&self) -> &StateActionTable {
        &self.q
    }

    /// Clips rounding overshoot so every entry lies in `[0, 1]`.
    pub(crate) fn clamp_unit(mut self) -> Self {
        for x in self.v.iter_mut().chain(self.q.values.iter_mut()) {
            *x = x.clamp(0.0, 1.0);
        }
        self
    }

    /// `V_1(s_1)`.
    pub fn initial_value(&self) -> f64 {
        self.v(0, INITIAL_STATE)
    }

    pub fn space(&self) -> StateActionSpace {
        self.space
    }
}

/// Backward induction with a pluggable Bellman backup.
///
/// `backup(h, s, a, next_v)` returns `Q_h(s,a)` given `V_{h+1}`; `policy`
/// supplies the action weights for `V_h = E_pi[Q_h]`.
pub(crate) fn backward_induction(
    kernel: &LowRankKernel,
    policy: &Policy,
    mut backup: impl FnMut(usize, usize, usize, &[f64]) -> f64,
) -> ValueTables {
    let space = kernel.space();
    let n = space.n_states;
    let mut out = ValueTables::zeros(space);
    let zero = vec![0.0; n];
    for h in (0..space.horizon).rev() {
        let next_v: Vec<f64> = if h + 1 < space.horizon {
            out.v_step(h + 1).to_vec()
        } else {
            zero.clone()
        };
        for s in 0..n {
            let mut vs = 0.0;
            for a in 0..space.n_actions {
                let q = backup(h, s, a, &next_v);
                out.q.set(h, s, a, q);
                vs += policy.prob(h, s, a) * q;
            }
            out.v[h * n + s] = vs;
        }
    }
    out
}

/// Backward induction that maximizes over actions; ties go to the lowest index.
pub(crate) fn greedy_induction(
    kernel: &LowRankKernel,
    mut backup: impl FnMut(usize, usize, usize, &[f64]) -> f64,
) -> (Policy, ValueTables) {
    let space = kernel.space();
    let n = space.n_states;
    let mut out = ValueTables::zeros(space);
    let mut actions = vec![vec![0usize; n]; space.horizon];
    let zero = vec![0.0; n];
    for h in (0..space.horizon).rev() {
        let next_v: Vec<f64> = if h + 1 < space.horizon {
            out.v_step(h + 1).to_vec()
        } else {
            zero.clone()
        };
        for s in 0..n {
            let mut best = f64::NEG_INFINITY;
            for a in 0..space.n_actions {
                let q = backup(h, s, a, &next_v);
                out.q.set(h, s, a, q);
                if q > best {
                    best = q;
                    actions[h][s] = a;
                }
            }
            out.v[h * n + s] = best;
        }
    }
    let policy = Policy::deterministic(space, &actions).expect("greedy actions are in range");
    (policy, out)
}

fn ensure_shapes(
    kernel: &LowRankKernel,
    reward: &StateActionTable,
    policy: Option<&Policy>,
) -> Result<(), MdpError> {
    kernel.space.ensure_same(&reward.space(), "kernel vs reward")?;
    if let Some(p) = policy {
        kernel.space.ensure_same(&p.space(), "kernel vs policy")?;
    }
    Ok(())
}

/// Exact `V^pi` and `Q^pi` by backward induction.
pub fn policy_evaluation(
    kernel: &LowRankKernel,
    reward: &RewardTable,
    policy: &Policy,
) -> Result<ValueTables, MdpError> {
    Ok(evaluate_table(kernel, reward.table(), policy)?.clamp_unit())
}

/// Policy evaluation for an arbitrary (possibly signed) per-step reward.
pub fn evaluate_table(
    kernel: &LowRankKernel,
    reward: &StateActionTable,
    policy: &Policy,
) -> Result<ValueTables, MdpError> {
    ensure_shapes(kernel, reward, Some(policy))?;
    Ok(backward_induction(kernel, policy, |h, s, a, next| {
        reward.get(h, s, a) + kernel.expect(h, s, a, next)
    }))
}

/// Optimal deterministic policy and its values; ties broken by lowest action.
pub fn optimal_planning(
    kernel: &LowRankKernel,
    reward: &RewardTable,
) -> Result<(Policy, ValueTables), MdpError> {
    ensure_shapes(kernel, reward.table(), None)?;
    let (policy, values) = greedy_induction(kernel, |h, s, a, next| {
        reward.get(h, s, a) + kernel.expect(h, s, a, next)
    });
    Ok((policy, values.clamp_unit()))
}

/// Per-step marginal state distributions `d_h(s)` of `(P, pi)` from [`INITIAL_STATE`].
pub fn state_distributions(kernel: &LowRankKernel, policy: &Policy) -> Result<Vec<Vec<f64>>, MdpError> {
    let space = kernel.space();
    space.ensure_same(&policy.space(), "kernel vs policy")?;
    let n = space.n_states;
    let mut dist = vec![0.0; n];
    dist[INITIAL_STATE] = 1.0;
    let mut out = Vec::with_capacity(space.horizon);
    for h in 0..space.horizon {
        let mut next = vec![0.0; n];
        for s in 0..n {
            if dist[s] == 0.0 {
                continue;
            }
            for a in 0..space.n_actions {
                let w = dist[s] * policy.prob(h, s, a);
                if w == 0.0 {
                    continue;
                }
                for (x, p) in next.iter_mut().zip(kernel.row(h, s, a)) {
                    *x += w * p;
                }
            }
        }
        out.push(std::mem::replace(&mut dist, next));
    }
    Ok(out)
}

/// `reachable[h][s]`: some policy visits `s` at step `h` with positive probability.
pub fn reachable_states(kernel: &LowRankKernel) -> Vec<Vec<bool>> {
    let dist = state_distributions(kernel, &Policy::uniform(kernel.space())).expect("same space");
    dist.into_iter().map(|d| d.into_iter().map(|p| p > 0.0).collect()).collect()
}

/// States `s_1..` and actions `a_1..` of one (possibly truncated) episode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trajectory {
    pub states: Vec<usize>,
    pub actions: Vec<usize>,
}

impl Trajectory {
    /// Transition `(s_h, a_h, s_{h+1})` at 0-based step `h`.
    pub fn transition(&self, h: usize) -> Option<(usize, usize, usize)> {
        Some((*self.states.get(h)?, *self.actions.get(h)?, *self.states.get(h + 1)?))
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn total_reward(&self, reward: &RewardTable) -> f64 {
        self.actions
            .iter()
            .enumerate()
            .map(|(h, &a)| reward.get(h, self.states[h], a))
            .sum()
    }
}

/// Samples one episode from [`INITIAL_STATE`].
///
/// With `stop_step = None` the policy acts for all `H` steps. With
/// `Some(t)` the policy acts for steps `1..=t`, then `uniform_tail` uniform
/// actions follow and the episode ends. The state after each taken action is
/// drawn from that step's kernel, so an action at step `H` yields the
/// terminal observation `s_{H+1}`.
pub fn sample_episode<R: Rng + ?Sized>(
    kernel: &LowRankKernel,
    policy: &Policy,
    rng: &mut R,
    stop_step: Option<usize>,
    uniform_tail: usize,
) -> Result<Trajectory, MdpError> {
    let space = kernel.space();
    let steps = match stop_step {
        None => space.horizon,
        Some(t) => {
            if t > space.horizon || uniform_tail > 2 || t + uniform_tail > space.horizon {
                return Err(MdpError::InvalidStopStep {
                    stop_step: t,
                    uniform_tail,
                    horizon: space.horizon,
                });
            }
            t + uniform_tail
        }
    };
    let policy_steps = stop_step.unwrap_or(space.horizon);
    let mut states = Vec::with_capacity(steps + 1);
    let mut actions = Vec::with_capacity(steps);
    let mut s = INITIAL_STATE;
    states.push(s);
    for h in 0..steps {
        let a = if h < policy_steps {
            policy.sample_action(h, s, rng)
        } else {
            rng.random_range(0..space.n_actions)
        };
        s = sample_index(kernel.row(h, s, a), rng);
        actions.push(a);
        states.push(s);
    }
    Ok(Trajectory { states, actions })
}

/// `||P1_h(.|s,a) - P2_h(.|s,a)||_TV` for every cell.
pub fn tv_distance(p1: &LowRankKernel, p2: &LowRankKernel) -> Result<StateActionTable, MdpError> {
    p1.space.ensure_same(&p2.space, "tv_distance")?;
    Ok(StateActionTable::from_fn(p1.space, |h, s, a| {
        0.5 * p1
            .row(h, s, a)
            .iter()
            .zip(p2.row(h, s, a))
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>()
    }))
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn l2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn argmax_first(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Inverse-CDF draw from a probability row.
pub(crate) fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding slack: fall back to the last index with positive mass
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}
