//! Similarity kernels and kernel matrices.
//!
//! Every kernel here satisfies `k(x, x) = 1`, so the trace of `K / n` is one
//! and its eigenvalues form a probability vector.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{contract, Result};

/// A point in sample or feature space.
pub type FeatureVector = DVector<f64>;

/// Guard used for cosine normalization when none is given.
pub const DEFAULT_EPSILON_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum KernelKind {
    Cosine,
    Rbf,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelSpec {
    pub kind: KernelKind,
    /// Length scale of the rbf kernel; ignored for cosine.
    pub bandwidth: f64,
    pub epsilon_norm: f64,
}

impl KernelSpec {
    pub fn cosine() -> Self {
        Self {
            kind: KernelKind::Cosine,
            bandwidth: 1.0,
            epsilon_norm: DEFAULT_EPSILON_NORM,
        }
    }

    pub fn rbf(bandwidth: f64) -> Self {
        Self {
            kind: KernelKind::Rbf,
            bandwidth,
            epsilon_norm: DEFAULT_EPSILON_NORM,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon_norm > 0.0) {
            return Err(contract(format!(
                "epsilon_norm must be positive, got {}",
                self.epsilon_norm
            )));
        }
        if self.kind == KernelKind::Rbf && !(self.bandwidth > 0.0 && self.bandwidth.is_finite()) {
            return Err(contract(format!(
                "rbf bandwidth must be positive and finite, got {}",
                self.bandwidth
            )));
        }
        Ok(())
    }
}

/// Gradient of a kernel with respect to its first argument.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelGradient {
    pub grad: FeatureVector,
    /// Set when a cosine norm fell under `epsilon_norm` and the guard was used.
    pub degenerate: bool,
}

fn check_dims(a: &FeatureVector, b: &FeatureVector) -> Result<()> {
    if a.len() != b.len() {
        return Err(contract(format!(
            "dimension mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

pub fn kernel_value(a: &FeatureVector, b: &FeatureVector, spec: &KernelSpec) -> Result<f64> {
    check_dims(a, b)?;
    Ok(kernel_value_unchecked(a, b, spec))
}

pub(crate) fn kernel_value_unchecked(a: &FeatureVector, b: &FeatureVector, spec: &KernelSpec) -> f64 {
    match spec.kind {
        KernelKind::Cosine => {
            let na = a.norm().max(spec.epsilon_norm);
            let nb = b.norm().max(spec.epsilon_norm);
            a.dot(b) / (na * nb)
        }
        KernelKind::Rbf => {
            let d2 = (a - b).norm_squared();
            (-d2 / (2.0 * spec.bandwidth * spec.bandwidth)).exp()
        }
    }
}

/// `d k(a, b) / d a`.
pub fn kernel_gradient(
    a: &FeatureVector,
    b: &FeatureVector,
    spec: &KernelSpec,
) -> Result<KernelGradient> {
    check_dims(a, b)?;
    Ok(kernel_gradient_unchecked(a, b, spec))
}

pub(crate) fn kernel_gradient_unchecked(
    a: &FeatureVector,
    b: &FeatureVector,
    spec: &KernelSpec,
) -> KernelGradient {
    match spec.kind {
        KernelKind::Rbf => {
            let h2 = spec.bandwidth * spec.bandwidth;
            let diff = a - b;
            let k = (-diff.norm_squared() / (2.0 * h2)).exp();
            KernelGradient {
                grad: diff * (-k / h2),
                degenerate: false,
            }
        }
        KernelKind::Cosine => {
            let (ra, rb) = (a.norm(), b.norm());
            let degenerate = ra < spec.epsilon_norm || rb < spec.epsilon_norm;
            let na = ra.max(spec.epsilon_norm);
            let nb = rb.max(spec.epsilon_norm);
            let dot = a.dot(b);
            let grad = b / (na * nb) - a * (dot / (na * na * na * nb));
            KernelGradient { grad, degenerate }
        }
    }
}

/// Symmetric similarity matrix with an exact unit diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix {
    entries: DMatrix<f64>,
}

impl KernelMatrix {
    pub fn n(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.entries
    }
}

pub fn build_kernel_matrix(samples: &[FeatureVector], spec: &KernelSpec) -> Result<KernelMatrix> {
    if samples.is_empty() {
        return Err(contract("kernel matrix needs at least one sample"));
    }
    spec.validate()?;
    let d = samples[0].len();
    if let Some(bad) = samples.iter().position(|s| s.len() != d) {
        return Err(contract(format!(
            "sample {bad} has dimension {}, expected {d}",
            samples[bad].len()
        )));
    }
    Ok(KernelMatrix {
        entries: fill_kernel(samples, spec),
    })
}

pub(crate) fn fill_kernel(samples: &[FeatureVector], spec: &KernelSpec) -> DMatrix<f64> {
    let n = samples.len();
    let mut k = DMatrix::<f64>::identity(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = kernel_value_unchecked(&samples[i], &samples[j], spec);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Median of all pairwise Euclidean distances, the usual rbf bandwidth
/// heuristic. `None` for fewer than two samples or when every distance is 0.
pub fn median_pairwise_distance(samples: &[FeatureVector]) -> Option<f64> {
    let mut dists = Vec::with_capacity(samples.len() * samples.len().saturating_sub(1) / 2);
    for i in 0..samples.len() {
        for j in (i + 1)..samples.len() {
            dists.push((&samples[i] - &samples[j]).norm());
        }
    }
    if dists.is_empty() {
        return None;
    }
    dists.sort_by(f64::total_cmp);
    let m = dists.len();
    let med = if m % 2 == 1 {
        dists[m / 2]
    } else {
        0.5 * (dists[m / 2 - 1] + dists[m / 2])
    };
    (med > 0.0).then_some(med)
}

/// Map from sample coordinates into the space where similarity is measured.
#[derive(Debug, Clone, PartialEq)]
pub enum FeatureMap {
    Identity,
    /// Fixed linear lift `x -> W x`.
    Linear(DMatrix<f64>),
}

impl FeatureMap {
    /// Gaussian random lift from `dim_in` to `dim_out`, entries scaled by
    /// `1/sqrt(dim_out)` so that norms are preserved in expectation.
    pub fn random_lift(dim_in: usize, dim_out: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (dim_out as f64).sqrt();
        let w = DMatrix::from_fn(dim_out, dim_in, |_, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * scale
        });
        FeatureMap::Linear(w)
    }

    pub fn apply(&self, x: &FeatureVector) -> FeatureVector {
        match self {
            FeatureMap::Identity => x.clone(),
            FeatureMap::Linear(w) => w * x,
        }
    }

    /// Pulls a feature-space gradient back to sample space.
    pub fn pullback(&self, grad: &FeatureVector) -> FeatureVector {
        match self {
            FeatureMap::Identity => grad.clone(),
            FeatureMap::Linear(w) => w.tr_mul(grad),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn v(xs: &[f64]) -> FeatureVector {
        FeatureVector::from_column_slice(xs)
    }

    #[test]
    fn cosine_basics() {
        let s = KernelSpec::cosine();
        assert_eq!(kernel_value(&v(&[1.0, 0.0]), &v(&[1.0, 0.0]), &s).unwrap(), 1.0);
        assert_eq!(kernel_value(&v(&[1.0, 0.0]), &v(&[0.0, 1.0]), &s).unwrap(), 0.0);
    }

    #[test]
    fn rbf_value_at_sqrt2() {
        let k = kernel_value(&v(&[0.0, 0.0]), &v(&[1.0, 1.0]), &KernelSpec::rbf(1.0)).unwrap();
        assert!(close(k, (-1.0f64).exp(), 1e-15));
        assert!(close(k, 0.367879, 1e-6));
    }

    #[test]
    fn dimension_mismatch_is_contract_error() {
        let s = KernelSpec::rbf(1.0);
        assert!(kernel_value(&v(&[0.0]), &v(&[0.0, 1.0]), &s).is_err());
        assert!(kernel_gradient(&v(&[0.0]), &v(&[0.0, 1.0]), &s).is_err());
    }

    #[test]
    fn rbf_gradient_vanishes_at_coincidence() {
        let a = v(&[0.3, -1.2]);
        let g = kernel_gradient(&a, &a, &KernelSpec::rbf(0.7)).unwrap();
        assert_eq!(g.grad, FeatureVector::zeros(2));
    }

    #[test]
    fn rbf_gradient_against_origin() {
        let g = kernel_gradient(&v(&[1.0, 0.0]), &v(&[0.0, 0.0]), &KernelSpec::rbf(1.0)).unwrap();
        let expected = -(-0.5f64).exp();
        assert!(close(g.grad[0], expected, 1e-15));
        assert_eq!(g.grad[1], 0.0);
        // central differences
        let h = 1e-5;
        let s = KernelSpec::rbf(1.0);
        let fd = (kernel_value(&v(&[1.0 + h, 0.0]), &v(&[0.0, 0.0]), &s).unwrap()
            - kernel_value(&v(&[1.0 - h, 0.0]), &v(&[0.0, 0.0]), &s).unwrap())
            / (2.0 * h);
        assert!(((fd - expected) / expected).abs() < 1e-8);
    }

    #[test]
    fn cosine_zero_vector_is_guarded_and_flagged() {
        let g = kernel_gradient(&v(&[1.0, 0.0]), &v(&[0.0, 0.0]), &KernelSpec::cosine()).unwrap();
        assert!(g.degenerate);
        assert!(g.grad.iter().all(|x| x.is_finite()));
        let k = kernel_value(&v(&[0.0, 0.0]), &v(&[1.0, 1.0]), &KernelSpec::cosine()).unwrap();
        assert_eq!(k, 0.0);
    }

    #[test]
    fn kernel_matrix_examples() {
        let same = vec![v(&[0.5, 2.0]); 3];
        let k = build_kernel_matrix(&same, &KernelSpec::rbf(1.0)).unwrap();
        assert_eq!(k.entries(), &DMatrix::from_element(3, 3, 1.0));

        let ortho = vec![v(&[2.0, 0.0, 0.0]), v(&[0.0, 3.0, 0.0]), v(&[0.0, 0.0, 0.1])];
        let k = build_kernel_matrix(&ortho, &KernelSpec::cosine()).unwrap();
        assert_eq!(k.entries(), &DMatrix::identity(3, 3));

        // 60 degrees apart
        let theta = std::f64::consts::FRAC_PI_3;
        let pair = vec![v(&[1.0, 0.0]), v(&[theta.cos(), theta.sin()])];
        let k = build_kernel_matrix(&pair, &KernelSpec::cosine()).unwrap();
        assert!(close(k.entries()[(0, 1)], 0.5, 1e-15));
        assert_eq!(k.entries()[(0, 1)], k.entries()[(1, 0)]);

        assert!(build_kernel_matrix(&[], &KernelSpec::cosine()).is_err());
    }

    #[test]
    fn invalid_specs() {
        assert!(KernelSpec::rbf(0.0).validate().is_err());
        assert!(KernelSpec::rbf(-1.0).validate().is_err());
        let mut s = KernelSpec::cosine();
        s.epsilon_norm = 0.0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn median_heuristic() {
        let pts = vec![v(&[0.0]), v(&[1.0]), v(&[3.0])];
        assert_eq!(median_pairwise_distance(&pts), Some(2.0));
        assert_eq!(median_pairwise_distance(&pts[..1]), None);
    }

    #[test]
    fn linear_lift_pullback_is_transpose() {
        let map = FeatureMap::random_lift(2, 5, 7);
        let x = v(&[0.2, -0.4]);
        let y = map.apply(&x);
        assert_eq!(y.len(), 5);
        let g = v(&[1.0, 0.0, 0.0, 0.0, 0.0]);
        let back = map.pullback(&g);
        if let FeatureMap::Linear(w) = &map {
            assert_eq!(back[0], w[(0, 0)]);
            assert_eq!(back[1], w[(0, 1)]);
        }
    }
}
