//! Labeled Gaussian-mixture worlds and DDIM sampling with their exact noise
//! predictor.
//!
//! A world `sum_i w_i N(mu_i, diag(c_i))` noised to level `xi` has marginal
//! `sum_i w_i N(sqrt(xi) mu_i, xi c_i + (1 - xi) I)`, so its score, and hence
//! `eps = -sqrt(1 - xi) grad log p`, is available in closed form. All mixture
//! arithmetic goes through max-shifted log responsibilities.

use std::collections::BTreeSet;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{contract, Error, Result};
use crate::kernel::FeatureVector;

/// Per-dimension variance floor for mixture evaluation.
pub const COVARIANCE_FLOOR: f64 = 1e-8;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ObjectId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RegionId(pub u32);

impl fmt::Display for ObjectId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "o{}", self.0)
    }
}

impl fmt::Display for RegionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

/// The "{object} in {region}" prompt of a generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Condition {
    pub object: ObjectId,
    pub region: RegionId,
}

impl Condition {
    pub fn new(object: u32, region: u32) -> Self {
        Self {
            object: ObjectId(object),
            region: RegionId(region),
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.object, self.region)
    }
}

/// Which components a classifier query sums over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelQuery {
    All,
    Cell(Condition),
    Region(RegionId),
    Object(ObjectId),
}

impl LabelQuery {
    fn matches(&self, c: &Component) -> bool {
        match self {
            LabelQuery::All => true,
            LabelQuery::Cell(cond) => c.object == cond.object && c.region == cond.region,
            LabelQuery::Region(r) => c.region == *r,
            LabelQuery::Object(o) => c.object == *o,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub mean: FeatureVector,
    /// Diagonal covariance; zero entries describe point masses.
    pub cov_diag: FeatureVector,
    pub weight: f64,
    pub object: ObjectId,
    pub region: RegionId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureWorld {
    components: Vec<Component>,
    dim: usize,
}

impl MixtureWorld {
    /// Weights must already sum to one within `1e-12`.
    pub fn new(components: Vec<Component>) -> Result<Self> {
        let world = Self::unchecked(components)?;
        let total: f64 = world.components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(contract(format!("mixture weights sum to {total}, not 1")));
        }
        Ok(world)
    }

    /// Rescales the weights to sum to one.
    pub fn normalized(mut components: Vec<Component>) -> Result<Self> {
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if !(total > 0.0 && total.is_finite()) {
            return Err(contract("mixture weights must have a positive finite sum"));
        }
        for c in &mut components {
            c.weight /= total;
        }
        Self::unchecked(components)
    }

    fn unchecked(components: Vec<Component>) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| contract("mixture world needs at least one component"))?;
        let dim = first.mean.len();
        for (i, c) in components.iter().enumerate() {
            if c.mean.len() != dim || c.cov_diag.len() != dim {
                return Err(contract(format!("component {i} has wrong dimension")));
            }
            if !(c.weight > 0.0 && c.weight.is_finite()) {
                return Err(contract(format!("component {i} has non-positive weight")));
            }
            if c.cov_diag.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
                return Err(contract(format!("component {i} has invalid covariance")));
            }
            if c.mean.iter().any(|v| !v.is_finite()) {
                return Err(contract(format!("component {i} has non-finite mean")));
            }
        }
        Ok(Self { components, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn regions(&self) -> Vec<RegionId> {
        self.components
            .iter()
            .map(|c| c.region)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn objects(&self) -> Vec<ObjectId> {
        self.components
            .iter()
            .map(|c| c.object)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn has_match(&self, query: &LabelQuery) -> bool {
        self.components.iter().any(|c| query.matches(c))
    }

    /// Indices of the components a query selects.
    pub fn matching(&self, query: &LabelQuery) -> Vec<usize> {
        (0..self.components.len())
            .filter(|&i| query.matches(&self.components[i]))
            .collect()
    }

    /// Log density and score of the subset selected by `query`, noised to
    /// level `xi` (unnormalized: the subset weights are not rescaled).
    pub(crate) fn noised_terms(
        &self,
        x: &FeatureVector,
        xi: f64,
        query: &LabelQuery,
    ) -> Result<MixtureTerms> {
        if x.len() != self.dim {
            return Err(contract(format!(
                "dimension mismatch: x has {}, world has {}",
                x.len(),
                self.dim
            )));
        }
        let sqrt_xi = xi.sqrt();
        let mut logs = Vec::new();
        let mut scores = Vec::new();
        for c in self.components.iter().filter(|c| query.matches(c)) {
            let mut log_n = c.weight.ln();
            let mut score = FeatureVector::zeros(self.dim);
            for k in 0..self.dim {
                let var = (xi * c.cov_diag[k] + (1.0 - xi)).max(COVARIANCE_FLOOR);
                let diff = x[k] - sqrt_xi * c.mean[k];
                log_n -= 0.5 * (diff * diff / var + LN_2PI + var.ln());
                score[k] = -diff / var;
            }
            logs.push(log_n);
            scores.push(score);
        }
        if logs.is_empty() {
            return Err(contract(format!("query {query:?} matches no component")));
        }
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        let mut score = FeatureVector::zeros(self.dim);
        let mut resp = Vec::with_capacity(logs.len());
        for (l, s) in logs.iter().zip(&scores) {
            let r = (l - max).exp();
            total += r;
            score.axpy(r, s, 1.0);
            resp.push(r);
        }
        score /= total;
        for r in &mut resp {
            *r /= total;
        }
        Ok(MixtureTerms {
            log_density: max + total.ln(),
            score,
            responsibilities: resp,
        })
    }

    /// `log p(query | x)` for the un-noised world (covariances floored).
    pub fn posterior_log_prob(&self, x: &FeatureVector, query: &LabelQuery) -> Result<f64> {
        let num = self.noised_terms(x, 1.0, query)?;
        let den = self.noised_terms(x, 1.0, &LabelQuery::All)?;
        Ok(num.log_density - den.log_density)
    }

    /// Index of the component with the largest posterior responsibility at
    /// `x` (un-noised).
    pub fn nearest_component(&self, x: &FeatureVector) -> Result<usize> {
        let t = self.noised_terms(x, 1.0, &LabelQuery::All)?;
        Ok(t.responsibilities
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(0))
    }
}

pub(crate) struct MixtureTerms {
    pub log_density: f64,
    pub score: FeatureVector,
    pub responsibilities: Vec<f64>,
}

/// Cumulative signal levels `xi[0..=T]` and per-step noise `sigma[1..=T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    xi: Vec<f64>,
    sigma: Vec<f64>,
    eta: f64,
}

impl NoiseSchedule {
    /// Builds a schedule from explicit coefficients, checking its invariants.
    pub fn from_parts(xi: Vec<f64>, sigma: Vec<f64>, eta: f64) -> Result<Self> {
        if xi.len() < 2 || sigma.len() + 1 != xi.len() {
            return Err(contract("schedule needs xi of length T+1 and sigma of length T"));
        }
        if xi[0] != 1.0 {
            return Err(contract("xi[0] must be 1"));
        }
        if xi.windows(2).any(|w| !(w[1] < w[0])) || !(xi[xi.len() - 1] > 0.0) {
            return Err(contract("xi must be strictly decreasing and positive"));
        }
        for (i, s) in sigma.iter().enumerate() {
            if !(*s >= 0.0) || s * s > 1.0 - xi[i] + 1e-15 {
                return Err(contract(format!("sigma[{}] violates sigma^2 <= 1 - xi[t-1]", i + 1)));
            }
        }
        if !(0.0..=1.0).contains(&eta) {
            return Err(contract("eta must lie in [0, 1]"));
        }
        Ok(Self { xi, sigma, eta })
    }

    pub fn steps(&self) -> usize {
        self.sigma.len()
    }

    pub fn xi(&self, t: usize) -> f64 {
        self.xi[t]
    }

    /// Noise of the step that leaves `x_t`; `t` in `1..=T`.
    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t - 1]
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn xi_all(&self) -> &[f64] {
        &self.xi
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(contract(format!("step {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }
}

/// Linear beta ladder `beta_1..beta_T`, `xi_t = prod_{s<=t} (1 - beta_s)` and
/// the DDIM noise `sigma_t` scaled by `eta`.
pub fn make_schedule(steps: usize, beta_min: f64, beta_max: f64, eta: f64) -> Result<NoiseSchedule> {
    if steps < 1 {
        return Err(contract("schedule needs at least one step"));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(contract(format!(
            "need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
        )));
    }
    if !(0.0..=1.0).contains(&eta) {
        return Err(contract(format!("eta must lie in [0, 1], got {eta}")));
    }
    let mut xi = Vec::with_capacity(steps + 1);
    xi.push(1.0);
    for s in 0..steps {
        let beta = if steps == 1 {
            beta_min
        } else {
            beta_min + (beta_max - beta_min) * s as f64 / (steps - 1) as f64
        };
        let prev = xi[s];
        xi.push(prev * (1.0 - beta));
    }
    let sigma = (1..=steps)
        .map(|t| {
            let (prev, cur) = (xi[t - 1], xi[t]);
            eta * ((1.0 - prev) / (1.0 - cur)).sqrt() * (1.0 - cur / prev).sqrt()
        })
        .collect();
    NoiseSchedule::from_parts(xi, sigma, eta)
}

/// A point of a reverse trajectory together with its private noise stream.
#[derive(Debug, Clone)]
pub struct SampleState {
    pub x: FeatureVector,
    pub t: usize,
    pub rng: ChaCha8Rng,
}

impl SampleState {
    /// Draws `x_T ~ N(0, I)` from the stream seeded by `seed`.
    pub fn initial(dim: usize, steps: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = standard_normal(dim, &mut rng);
        Self { x, t: steps, rng }
    }
}

fn standard_normal(dim: usize, rng: &mut ChaCha8Rng) -> FeatureVector {
    FeatureVector::from_fn(dim, |_, _| StandardNormal.sample(rng))
}

/// Mixes a base seed with an index into an independent stream seed
/// (splitmix64 finalizer).
pub fn stream_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn cond_query(cond: Option<&Condition>) -> LabelQuery {
    cond.map_or(LabelQuery::All, |c| LabelQuery::Cell(*c))
}

/// Exact noise prediction `-sqrt(1 - xi_t) grad log p_t(x)`, restricted to
/// the components of `cond` when given.
pub fn analytic_epsilon(
    x: &FeatureVector,
    t: usize,
    cond: Option<&Condition>,
    world: &MixtureWorld,
    sched: &NoiseSchedule,
) -> Result<FeatureVector> {
    sched.check_t(t)?;
    let xi = sched.xi(t);
    let terms = world.noised_terms(x, xi, &cond_query(cond))?;
    Ok(terms.score * -(1.0 - xi).sqrt())
}

/// `log p(query | x_t)` under the noised mixture.
pub fn classifier_log_prob(
    x: &FeatureVector,
    t: usize,
    query: &LabelQuery,
    world: &MixtureWorld,
    sched: &NoiseSchedule,
) -> Result<f64> {
    sched.check_t(t)?;
    let xi = sched.xi(t);
    let num = world.noised_terms(x, xi, query)?;
    let den = world.noised_terms(x, xi, &LabelQuery::All)?;
    Ok(num.log_density - den.log_density)
}

/// `grad_x log p(query | x_t)`: the query-restricted score minus the full
/// score.
pub fn classifier_log_prob_gradient(
    x: &FeatureVector,
    t: usize,
    query: &LabelQuery,
    world: &MixtureWorld,
    sched: &NoiseSchedule,
) -> Result<FeatureVector> {
    sched.check_t(t)?;
    let xi = sched.xi(t);
    let num = world.noised_terms(x, xi, query)?;
    let den = world.noised_terms(x, xi, &LabelQuery::All)?;
    Ok(num.score - den.score)
}

/// Unconditional noise prediction steered by `gamma * grad log p(cond | x_t)`
/// converted to noise space.
pub fn classifier_guidance_epsilon(
    x: &FeatureVector,
    t: usize,
    cond: &Condition,
    gamma: f64,
    world: &MixtureWorld,
    sched: &NoiseSchedule,
) -> Result<FeatureVector> {
    let eps = analytic_epsilon(x, t, None, world, sched)?;
    if gamma == 0.0 {
        return Ok(eps);
    }
    let grad = classifier_log_prob_gradient(x, t, &LabelQuery::Cell(*cond), world, sched)?;
    Ok(eps - grad * (gamma * (1.0 - sched.xi(t)).sqrt()))
}

/// One-shot estimate of the clean sample from `x_t` and a noise prediction.
pub fn ddim_denoise_approx(
    x: &FeatureVector,
    t: usize,
    eps: &FeatureVector,
    sched: &NoiseSchedule,
) -> Result<FeatureVector> {
    sched.check_t(t)?;
    if x.len() != eps.len() {
        return Err(contract("x and eps dimensions differ"));
    }
    let xi = sched.xi(t);
    Ok((x - eps * (1.0 - xi).sqrt()) / xi.sqrt())
}

/// One reverse DDIM step `x_t -> x_{t-1}`.
pub fn ddim_step(mut state: SampleState, eps: &FeatureVector, sched: &NoiseSchedule) -> Result<SampleState> {
    let t = state.t;
    let x0 = ddim_denoise_approx(&state.x, t, eps, sched)?;
    let prev = sched.xi(t - 1);
    let sigma = sched.sigma(t);
    let mut radicand = 1.0 - prev - sigma * sigma;
    if radicand < 0.0 {
        if radicand < -1e-12 {
            return Err(Error::Schedule { t, radicand });
        }
        radicand = 0.0;
    }
    let mut next = x0 * prev.sqrt() + eps * radicand.sqrt();
    if sigma > 0.0 {
        let z = standard_normal(next.len(), &mut state.rng);
        next.axpy(sigma, &z, 1.0);
    }
    state.x = next;
    state.t = t - 1;
    Ok(state)
}

/// Conditional DDIM sample with the exact noise predictor and no guidance.
pub fn sample_unguided(
    cond: &Condition,
    world: &MixtureWorld,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<FeatureVector> {
    if !world.has_match(&LabelQuery::Cell(*cond)) {
        return Err(contract(format!("condition {cond} has no component")));
    }
    let mut state = SampleState::initial(world.dim(), sched.steps(), seed);
    while state.t > 0 {
        let eps = analytic_epsilon(&state.x, state.t, Some(cond), world, sched)?;
        state = ddim_step(state, &eps, sched)?;
    }
    Ok(state.x)
}
