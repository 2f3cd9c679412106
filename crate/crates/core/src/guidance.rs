//! Memory-bank Vendi Score guidance and its contextualized variant.
//!
//! Every `gfreq`-th reverse step the noise prediction is shifted by
//!
//! ```text
//! eps' = eps - sqrt(1 - xi_t) / sqrt(xi_t) * (alpha * g_bank - beta * g_exemplars)
//! ```
//!
//! where `g_*` is the Vendi Score gradient of the denoised estimate against
//! the memory bank and the exemplar set. The denoiser output is treated as
//! constant when differentiating the denoised estimate with respect to
//! `x_t`, which gives the `1 / sqrt(xi_t)` factor. Each finished sample is
//! appended to the bank before the next one starts.

use std::collections::BTreeMap;

use crate::diffusion::{
    analytic_epsilon, classifier_guidance_epsilon, classifier_log_prob, classifier_log_prob_gradient,
    ddim_denoise_approx, ddim_step, stream_seed, Condition, LabelQuery, MixtureWorld, NoiseSchedule,
    SampleState,
};
use crate::error::{contract, Result};
use crate::kernel::{FeatureMap, FeatureVector, KernelSpec};
use crate::vendi::BankKernel;

/// Append-only store of finished generations.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MemoryBank {
    samples: Vec<FeatureVector>,
    version: u64,
}

impl MemoryBank {
    pub fn new() -> Self {
        Self::default()
    }

    /// A bank pre-seeded with user supplied samples (version 0).
    pub fn seeded(samples: Vec<FeatureVector>) -> Result<Self> {
        if samples.iter().any(|s| s.iter().any(|v| !v.is_finite())) {
            return Err(contract("memory bank samples must be finite"));
        }
        Ok(Self { samples, version: 0 })
    }

    pub fn push(&mut self, x: FeatureVector) -> Result<u64> {
        if x.iter().any(|v| !v.is_finite()) {
            return Err(contract("memory bank samples must be finite"));
        }
        if let Some(first) = self.samples.first() {
            if first.len() != x.len() {
                return Err(contract("memory bank sample has wrong dimension"));
            }
        }
        self.samples.push(x);
        self.version += 1;
        Ok(self.version)
    }

    pub fn samples(&self) -> &[FeatureVector] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Copy holding only the first `n` samples.
    pub fn truncated(&self, n: usize) -> Self {
        let n = n.min(self.samples.len());
        Self {
            samples: self.samples[..n].to_vec(),
            version: self.version.saturating_sub((self.samples.len() - n) as u64),
        }
    }
}

/// Fixed real samples that contextualize the guidance.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExemplarSet {
    samples: Vec<FeatureVector>,
    per_condition: Option<BTreeMap<Condition, Vec<usize>>>,
}

impl ExemplarSet {
    pub fn new(samples: Vec<FeatureVector>) -> Self {
        Self {
            samples,
            per_condition: None,
        }
    }

    pub fn with_index(samples: Vec<FeatureVector>, per_condition: BTreeMap<Condition, Vec<usize>>) -> Result<Self> {
        for (cond, idx) in &per_condition {
            if idx.iter().any(|&i| i >= samples.len()) {
                return Err(contract(format!("exemplar index out of range for {cond}")));
            }
        }
        Ok(Self {
            samples,
            per_condition: Some(per_condition),
        })
    }

    pub fn samples(&self) -> &[FeatureVector] {
        &self.samples
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    /// Exemplars relevant to `cond`: the indexed subset when an index exists,
    /// otherwise all of them.
    pub fn for_condition(&self, cond: &Condition) -> Vec<FeatureVector> {
        match &self.per_condition {
            Some(map) => map
                .get(cond)
                .map(|idx| idx.iter().map(|&i| self.samples[i].clone()).collect())
                .unwrap_or_default(),
            None => self.samples.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceConfig {
    /// Weight of the memory-bank diversity term.
    pub alpha: f64,
    /// Weight of the exemplar contextualization term.
    pub beta: f64,
    /// Classifier guidance scale; `None` uses the conditional noise
    /// prediction directly.
    pub gamma: Option<f64>,
    pub gfreq: usize,
    /// Steps with `t % gfreq == phase` are guided.
    pub phase: usize,
    /// Generations per `generate_sequence` call.
    pub n: usize,
    /// Bound on the L2 norm of the added noise-space term.
    pub grad_clip: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 2.0,
            gamma: None,
            gfreq: 5,
            phase: 0,
            n: 1,
            grad_clip: 10.0,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(contract("alpha and beta must be non-negative"));
        }
        if let Some(g) = self.gamma {
            if !(g >= 0.0) {
                return Err(contract("gamma must be non-negative"));
            }
        }
        if self.gfreq < 1 || self.n < 1 {
            return Err(contract("gfreq and n must be at least 1"));
        }
        if !(self.grad_clip > 0.0) {
            return Err(contract("grad_clip must be positive"));
        }
        Ok(())
    }

    pub fn is_guided_step(&self, t: usize) -> bool {
        t % self.gfreq == self.phase % self.gfreq
    }

    /// Number of guided steps in a trajectory of `steps` steps.
    pub fn guided_steps(&self, steps: usize) -> usize {
        (1..=steps).filter(|&t| self.is_guided_step(t)).count()
    }
}

/// Where and how similarity is measured for the Vendi terms.
#[derive(Debug, Clone, PartialEq)]
pub struct Similarity {
    pub map: FeatureMap,
    pub kernel: KernelSpec,
}

impl Similarity {
    pub fn new(map: FeatureMap, kernel: KernelSpec) -> Self {
        Self { map, kernel }
    }

    pub fn identity(kernel: KernelSpec) -> Self {
        Self::new(FeatureMap::Identity, kernel)
    }

    pub fn features(&self, xs: &[FeatureVector]) -> Vec<FeatureVector> {
        xs.iter().map(|x| self.map.apply(x)).collect()
    }
}

/// Kernel sub-matrices reused between guided steps. Tied to one bank; a new
/// bank version rebuilds the bank entry.
#[derive(Debug, Default)]
pub struct GuidanceCache {
    bank: Option<(u64, usize, BankKernel)>,
    exemplars: Option<BankKernel>,
}

impl GuidanceCache {
    pub fn new() -> Self {
        Self::default()
    }

    fn bank_kernel(&mut self, bank: &MemoryBank, sim: &Similarity) -> Result<&BankKernel> {
        let fresh = matches!(&self.bank, Some((v, n, _)) if *v == bank.version() && *n == bank.len());
        if !fresh {
            let k = BankKernel::new(sim.features(bank.samples()), sim.kernel)?;
            self.bank = Some((bank.version(), bank.len(), k));
        }
        Ok(&self.bank.as_ref().expect("bank cache filled").2)
    }

    fn exemplar_kernel(&mut self, exemplars: &[FeatureVector], sim: &Similarity) -> Result<&BankKernel> {
        if self.exemplars.is_none() {
            self.exemplars = Some(BankKernel::new(sim.features(exemplars), sim.kernel)?);
        }
        Ok(self.exemplars.as_ref().expect("exemplar cache filled"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidedEpsilon {
    pub eps: FeatureVector,
    /// A Vendi gradient was degenerate; `eps` is the unguided prediction.
    pub degenerate: bool,
    pub clipped: bool,
}

/// Base noise prediction for `cond`: classifier guided when `gamma` is set,
/// plain conditional otherwise.
pub fn base_epsilon(
    x: &FeatureVector,
    t: usize,
    cond: &Condition,
    cfg: &GuidanceConfig,
    world: &MixtureWorld,
    sched: &NoiseSchedule,
) -> Result<FeatureVector> {
    match cfg.gamma {
        Some(gamma) => classifier_guidance_epsilon(x, t, cond, gamma, world, sched),
        None => analytic_epsilon(x, t, Some(cond), world, sched),
    }
}

fn clip(v: FeatureVector, bound: f64) -> (FeatureVector, bool) {
    let norm = v.norm();
    if norm > bound {
        (v * (bound / norm), true)
    } else {
        (v, false)
    }
}

/// Noise prediction with the bank diversity and exemplar terms applied.
#[allow(clippy::too_many_arguments)]
pub fn cvsg_epsilon(
    state: &SampleState,
    cond: &Condition,
    bank: &MemoryBank,
    exemplars: &ExemplarSet,
    cfg: &GuidanceConfig,
    world: &MixtureWorld,
    sched: &NoiseSchedule,
    sim: &Similarity,
    cache: &mut GuidanceCache,
) -> Result<GuidedEpsilon> {
    let t = state.t;
    let eps = base_epsilon(&state.x, t, cond, cfg, world, sched)?;
    let use_bank = cfg.alpha != 0.0 && !bank.is_empty();
    let use_exemplars = cfg.beta != 0.0;
    if !use_bank && !use_exemplars {
        return Ok(GuidedEpsilon {
            eps,
            degenerate: false,
            clipped: false,
        });
    }

    let x0 = ddim_denoise_approx(&state.x, t, &eps, sched)?;
    let phi = sim.map.apply(&x0);
    let mut score_shift = FeatureVector::zeros(phi.len());
    let mut degenerate = false;
    if use_bank {
        let g = cache.bank_kernel(bank, sim)?.gradient(&phi)?;
        degenerate |= g.degenerate;
        score_shift.axpy(cfg.alpha, &g.grad, 1.0);
    }
    if use_exemplars {
        let ex = exemplars.for_condition(cond);
        if ex.is_empty() {
            return Err(contract(format!("beta > 0 but no exemplars for {cond}")));
        }
        let g = cache.exemplar_kernel(&ex, sim)?.gradient(&phi)?;
        degenerate |= g.degenerate;
        score_shift.axpy(-cfg.beta, &g.grad, 1.0);
    }
    if degenerate {
        return Ok(GuidedEpsilon {
            eps,
            degenerate: true,
            clipped: false,
        });
    }

    let xi = sched.xi(t);
    let shift = sim.map.pullback(&score_shift) * (-(1.0 - xi).sqrt() / xi.sqrt());
    let (shift, clipped) = clip(shift, cfg.grad_clip);
    Ok(GuidedEpsilon {
        eps: eps + shift,
        degenerate: false,
        clipped,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SampleDiagnostics {
    pub guided_steps: usize,
    pub degenerate_fallbacks: usize,
    pub clipped_steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub samples: Vec<FeatureVector>,
    pub diagnostics: Vec<SampleDiagnostics>,
}

/// Produces one sample against the current bank, which is left unchanged.
#[allow(clippy::too_many_arguments)]
pub fn generate_one(
    cond: &Condition,
    bank: &MemoryBank,
    exemplars: &ExemplarSet,
    cfg: &GuidanceConfig,
    world: &MixtureWorld,
    sched: &NoiseSchedule,
    sim: &Similarity,
    sample_seed: u64,
) -> Result<(FeatureVector, SampleDiagnostics)> {
    if !world.has_match(&LabelQuery::Cell(*cond)) {
        return Err(contract(format!("condition {cond} has no component")));
    }
    let mut cache = GuidanceCache::new();
    let mut diag = SampleDiagnostics::default();
    let mut state = SampleState::initial(world.dim(), sched.steps(), sample_seed);
    while state.t > 0 {
        let eps = if cfg.is_guided_step(state.t) {
            diag.guided_steps += 1;
            let g = cvsg_epsilon(&state, cond, bank, exemplars, cfg, world, sched, sim, &mut cache)?;
            diag.degenerate_fallbacks += g.degenerate as usize;
            diag.clipped_steps += g.clipped as usize;
            g.eps
        } else {
            base_epsilon(&state.x, state.t, cond, cfg, world, sched)?
        };
        state = ddim_step(state, &eps, sched)?;
    }
    Ok((state.x, diag))
}

/// Generates `cfg.n` samples in order, appending each to `bank` before the
/// next starts. Sample `i` uses the stream `stream_seed(seed, i)`.
#[allow(clippy::too_many_arguments)]
pub fn generate_sequence(
    cond: &Condition,
    bank: &mut MemoryBank,
    exemplars: &ExemplarSet,
    cfg: &GuidanceConfig,
    world: &MixtureWorld,
    sched: &NoiseSchedule,
    sim: &Similarity,
    seed: u64,
) -> Result<Generation> {
    cfg.validate()?;
    if cfg.beta > 0.0 && exemplars.for_condition(cond).is_empty() {
        return Err(contract(format!("beta > 0 requires exemplars for {cond}")));
    }
    let mut samples = Vec::with_capacity(cfg.n);
    let mut diagnostics = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        let (x, diag) = generate_one(cond, bank, exemplars, cfg, world, sched, sim, stream_seed(seed, i as u64))?;
        bank.push(x.clone())?;
        samples.push(x);
        diagnostics.push(diag);
    }
    Ok(Generation { samples, diagnostics })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeedbackMode {
    /// Push away from the prompted region: ascend `-log p(region | x_t)`.
    Loss,
    /// Ascend the entropy of the region posterior.
    Entropy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackConfig {
    pub mode: FeedbackMode,
    pub weight: f64,
    pub gfreq: usize,
    pub phase: usize,
    pub n: usize,
    pub grad_clip: f64,
}

impl FeedbackConfig {
    fn is_guided_step(&self, t: usize) -> bool {
        t % self.gfreq == self.phase % self.gfreq
    }
}

/// Entropy of the region posterior `p(. | x_t)` and its gradient in `x_t`.
pub fn region_entropy_gradient(
    x: &FeatureVector,
    t: usize,
    classifier: &MixtureWorld,
    sched: &NoiseSchedule,
) -> Result<(f64, FeatureVector)> {
    let mut entropy = 0.0;
    let mut grad = FeatureVector::zeros(x.len());
    for r in classifier.regions() {
        let q = LabelQuery::Region(r);
        let lp = classifier_log_prob(x, t, &q, classifier, sched)?;
        let p = lp.exp();
        if p == 0.0 {
            continue;
        }
        entropy -= p * lp;
        // grad H = -sum_r p_r log p_r grad log p_r, using sum_r p_r grad log p_r = 0
        let g = classifier_log_prob_gradient(x, t, &q, classifier, sched)?;
        grad.axpy(-p * lp, &g, 1.0);
    }
    Ok((entropy, grad))
}

/// Conditional noise prediction from `sampler` with the region classifier
/// feedback term of `classifier` added in score space.
pub fn feedback_guidance_epsilon(
    state: &SampleState,
    cond: &Condition,
    cfg: &FeedbackConfig,
    sampler: &MixtureWorld,
    classifier: &MixtureWorld,
    sched: &NoiseSchedule,
) -> Result<GuidedEpsilon> {
    if classifier.regions().len() < 2 {
        return Err(contract("feedback guidance needs a classifier over at least two regions"));
    }
    let t = state.t;
    let eps = analytic_epsilon(&state.x, t, Some(cond), sampler, sched)?;
    if cfg.weight == 0.0 {
        return Ok(GuidedEpsilon {
            eps,
            degenerate: false,
            clipped: false,
        });
    }
    let score_shift = match cfg.mode {
        FeedbackMode::Loss => {
            classifier_log_prob_gradient(&state.x, t, &LabelQuery::Region(cond.region), classifier, sched)?
                * -cfg.weight
        }
        FeedbackMode::Entropy => region_entropy_gradient(&state.x, t, classifier, sched)?.1 * cfg.weight,
    };
    let shift = score_shift * -(1.0 - sched.xi(t)).sqrt();
    let (shift, clipped) = clip(shift, cfg.grad_clip);
    Ok(GuidedEpsilon {
        eps: eps + shift,
        degenerate: false,
        clipped,
    })
}

/// Independent feedback-guided samples (no memory bank).
pub fn generate_feedback(
    cond: &Condition,
    cfg: &FeedbackConfig,
    sampler: &MixtureWorld,
    classifier: &MixtureWorld,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<Generation> {
    if cfg.gfreq < 1 || cfg.n < 1 || !(cfg.grad_clip > 0.0) || !(cfg.weight >= 0.0) {
        return Err(contract("invalid feedback configuration"));
    }
    if !sampler.has_match(&LabelQuery::Cell(*cond)) {
        return Err(contract(format!("condition {cond} has no component")));
    }
    let mut samples = Vec::with_capacity(cfg.n);
    let mut diagnostics = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        let mut diag = SampleDiagnostics::default();
        let mut state = SampleState::initial(sampler.dim(), sched.steps(), stream_seed(seed, i as u64));
        while state.t > 0 {
            let eps = if cfg.is_guided_step(state.t) {
                diag.guided_steps += 1;
                let g = feedback_guidance_epsilon(&state, cond, cfg, sampler, classifier, sched)?;
                diag.clipped_steps += g.clipped as usize;
                g.eps
            } else {
                analytic_epsilon(&state.x, state.t, Some(cond), sampler, sched)?
            };
            state = ddim_step(state, &eps, sched)?;
        }
        samples.push(state.x);
        diagnostics.push(diag);
    }
    Ok(Generation { samples, diagnostics })
}
