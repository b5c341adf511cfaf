//! Finite candidate classes `Phi x Psi` and maximum-likelihood selection.

use rand::Rng;

use super::dataset::TransitionSample;
use super::LearningError;
use crate::mdp::{EmbeddingMap, KernelBounds, LowRankKernel, RepresentationMap, StateActionSpace};
use crate::random::{random_embedding, random_representation};

/// Knobs for [`ModelClass::generate`].
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ClassSpec {
    pub n_phi: usize,
    pub n_mu: usize,
    pub dim: usize,
    /// Reachability floor `p_min` every generated kernel satisfies.
    pub reach_floor: f64,
    /// Optional density cap `B`; `None` accepts whatever the draw produces.
    pub density_cap: Option<f64>,
    /// Dirichlet concentration of the embedding coordinates; smaller is peakier.
    pub concentration: f64,
}

/// Candidate representation and embedding maps with per-pair validity.
#[derive(Debug, Clone)]
pub struct ModelClass {
    space: StateActionSpace,
    dim: usize,
    phis: Vec<RepresentationMap>,
    mus: Vec<EmbeddingMap>,
    bounds: KernelBounds,
    kernels: Vec<Option<LowRankKernel>>,
    log_probs: Vec<Option<Vec<f64>>>,
}

/// Result of [`mle_fit`]: the chosen pair and its log-likelihood.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MleFit {
    pub phi: usize,
    pub mu: usize,
    pub loglik: f64,
}

impl ModelClass {
    /// Builds the class and precomputes which pairs form valid kernels.
    pub fn new(
        phis: Vec<RepresentationMap>,
        mus: Vec<EmbeddingMap>,
        bounds: KernelBounds,
    ) -> Result<Self, LearningError> {
        let first = phis
            .first()
            .ok_or_else(|| LearningError::InvalidClass("empty representation class".into()))?;
        let space = first.space;
        let dim = first.dim;
        if mus.is_empty() {
            return Err(LearningError::InvalidClass("empty embedding class".into()));
        }
        if phis.iter().any(|p| p.space != space || p.dim != dim)
            || mus
                .iter()
                .any(|m| m.dim != dim || m.n_states != space.n_states || m.horizon != space.horizon)
        {
            return Err(LearningError::InvalidClass("candidates disagree on shape".into()));
        }
        let phi_ok: Vec<bool> = phis.iter().map(|p| p.norm_violations().is_empty()).collect();
        let mu_ok: Vec<bool> = mus.iter().map(|m| m.norm_violations().is_empty()).collect();
        let mut kernels = Vec::with_capacity(phis.len() * mus.len());
        let mut log_probs = Vec::with_capacity(phis.len() * mus.len());
        for (i, phi) in phis.iter().enumerate() {
            for (j, mu) in mus.iter().enumerate() {
                let kernel = LowRankKernel::product(phi, mu);
                let valid = phi_ok[i] && mu_ok[j] && kernel.violations(bounds).is_empty();
                if valid {
                    log_probs.push(Some(
                        kernel
                            .probs()
                            .iter()
                            .map(|&p| if p > 0.0 { p.ln() } else { f64::NEG_INFINITY })
                            .collect(),
                    ));
                    kernels.push(Some(kernel));
                } else {
                    log_probs.push(None);
                    kernels.push(None);
                }
            }
        }
        if kernels.iter().all(Option::is_none) {
            return Err(LearningError::NoValidCandidate);
        }
        Ok(Self { space, dim, phis, mus, bounds, kernels, log_probs })
    }

    /// Random class whose every pair is a valid kernel with `P >= reach_floor`.
    pub fn generate<R: Rng + ?Sized>(
        rng: &mut R,
        space: StateActionSpace,
        spec: ClassSpec,
    ) -> Result<Self, LearningError> {
        if spec.n_phi == 0 || spec.n_mu == 0 || spec.dim == 0 {
            return Err(LearningError::InvalidClass("class sizes and dimension must be positive".into()));
        }
        if spec.reach_floor < 0.0 || spec.reach_floor * space.n_states as f64 > 1.0 {
            return Err(LearningError::InvalidClass(format!(
                "reachability floor {} infeasible for {} states",
                spec.reach_floor, space.n_states
            )));
        }
        let phis = (0..spec.n_phi)
            .map(|_| random_representation(rng, space, spec.dim, 1.0))
            .collect();
        let mus = (0..spec.n_mu)
            .map(|_| random_embedding(rng, space, spec.dim, spec.reach_floor, spec.concentration))
            .collect();
        let bounds = KernelBounds {
            density_cap: spec.density_cap,
            reach_floor: Some(spec.reach_floor),
        };
        Self::new(phis, mus, bounds)
    }

    pub fn space(&self) -> StateActionSpace {
        self.space
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_phi(&self) -> usize {
        self.phis.len()
    }

    pub fn n_mu(&self) -> usize {
        self.mus.len()
    }

    pub fn bounds(&self) -> KernelBounds {
        self.bounds
    }

    pub fn phi(&self, i: usize) -> &RepresentationMap {
        &self.phis[i]
    }

    pub fn mu(&self, j: usize) -> &EmbeddingMap {
        &self.mus[j]
    }

    pub fn phis(&self) -> &[RepresentationMap] {
        &self.phis
    }

    pub fn mus(&self) -> &[EmbeddingMap] {
        &self.mus
    }

    #[inline]
    fn pair_index(&self, phi: usize, mu: usize) -> usize {
        phi * self.mus.len() + mu
    }

    pub fn is_valid(&self, phi: usize, mu: usize) -> bool {
        phi < self.phis.len() && mu < self.mus.len() && self.kernels[self.pair_index(phi, mu)].is_some()
    }

    /// Kernel `<phi_i, mu_j>` at every step, if the pair is valid.
    pub fn kernel(&self, phi: usize, mu: usize) -> Option<&LowRankKernel> {
        if phi >= self.phis.len() || mu >= self.mus.len() {
            return None;
        }
        self.kernels[self.pair_index(phi, mu)].as_ref()
    }

    /// Valid pairs in lexicographic `(phi, mu)` order.
    pub fn valid_pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let n_mu = self.mus.len();
        self.kernels
            .iter()
            .enumerate()
            .filter(|(_, k)| k.is_some())
            .map(move |(i, _)| (i / n_mu, i % n_mu))
    }

    #[inline]
    fn log_prob(&self, pair: usize, h: usize, sample: &TransitionSample) -> f64 {
        let table = self.log_probs[pair].as_ref().expect("valid pair");
        let n = self.space.n_states;
        table[self.space.index(h, sample.state, sample.action) * n + sample.next_state]
    }

    /// `sum log <phi_h(s,a), mu_h(s')>` over the samples; `-inf` if any is impossible.
    pub fn log_likelihood<'a>(
        &self,
        phi: usize,
        mu: usize,
        h: usize,
        samples: impl IntoIterator<Item = &'a TransitionSample>,
    ) -> Option<f64> {
        if !self.is_valid(phi, mu) {
            return None;
        }
        let pair = self.pair_index(phi, mu);
        Some(samples.into_iter().map(|x| self.log_prob(pair, h, x)).sum())
    }
}

/// Exhaustive maximum-likelihood choice of `(phi, mu)` for step `h`.
///
/// Ties (including the empty dataset) resolve to the lowest `(phi, mu)` pair.
pub fn mle_fit<'a>(
    class: &ModelClass,
    h: usize,
    samples: impl IntoIterator<Item = &'a TransitionSample>,
) -> Result<MleFit, LearningError> {
    let samples: Vec<&TransitionSample> = samples.into_iter().collect();
    let sp = class.space;
    if h >= sp.horizon
        || samples
            .iter()
            .any(|x| x.state >= sp.n_states || x.action >= sp.n_actions || x.next_state >= sp.n_states)
    {
        return Err(LearningError::Mdp(crate::mdp::MdpError::ShapeMismatch(
            "sample outside the class's state-action space".into(),
        )));
    }
    let mut best: Option<MleFit> = None;
    for (phi, mu) in class.valid_pairs() {
        let pair = class.pair_index(phi, mu);
        let loglik: f64 = samples.iter().map(|x| class.log_prob(pair, h, x)).sum();
        match best {
            Some(b) if loglik <= b.loglik => {}
            _ => best = Some(MleFit { phi, mu, loglik }),
        }
    }
    best.ok_or(LearningError::NoValidCandidate)
}
