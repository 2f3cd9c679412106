//! Vendi Score and its analytic gradient with respect to one sample.
//!
//! The score of `x_1..x_n` is `exp(-sum_i l_i ln l_i)` where `l_i` are the
//! eigenvalues of `K / n`. Because `K` is symmetric, first-order eigenvalue
//! perturbation gives `dl_m / dK = v_m v_m^T`, so the entropy gradient is
//!
//! ```text
//! dH/dK = -(1/n) * sum_m (ln l_m + 1) v_m v_m^T
//! ```
//!
//! and the gradient with respect to a sample follows by the chain rule
//! through the kernel.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{contract, Error, Result};
use crate::kernel::{fill_kernel, kernel_gradient_unchecked, kernel_value_unchecked, FeatureVector, KernelSpec};

/// Eigenvalues at or below this are dropped from the gradient.
pub const LAMBDA_FLOOR: f64 = 1e-10;

/// Distance below which the differentiated sample counts as a duplicate of a
/// bank entry.
pub const COINCIDENCE_DISTANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct VendiResult {
    pub score: f64,
    /// Eigenvalues of `K / n`, descending.
    pub eigenvalues: Vec<f64>,
    pub entropy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VendiGradient {
    pub grad: FeatureVector,
    pub degenerate: bool,
}

impl VendiGradient {
    fn zero(dim: usize) -> Self {
        Self {
            grad: FeatureVector::zeros(dim),
            degenerate: false,
        }
    }
}

fn eigen(k: DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let n = k.nrows();
    let frobenius = k.norm();
    let non_finite = k.iter().filter(|v| !v.is_finite()).count();
    let mut max_asymmetry: f64 = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            max_asymmetry = max_asymmetry.max((k[(i, j)] - k[(j, i)]).abs());
        }
    }
    let fail = Error::Eigen {
        n,
        frobenius,
        max_asymmetry,
        non_finite,
    };
    if non_finite > 0 {
        return Err(fail);
    }
    SymmetricEigen::try_new(k, f64::EPSILON, 1000 * n.max(1)).ok_or(fail)
}

fn entropy_of(eigenvalues: &[f64]) -> f64 {
    eigenvalues
        .iter()
        .map(|&l| l.clamp(0.0, 1.0))
        .filter(|&l| l > 0.0)
        .map(|l| -l * l.ln())
        .sum()
}

/// Vendi Score of a sample set under `spec`.
pub fn vendi_score(samples: &[FeatureVector], spec: &KernelSpec) -> Result<VendiResult> {
    let k = crate::kernel::build_kernel_matrix(samples, spec)?;
    vendi_from_kernel(k.into_inner())
}

/// Vendi Score of an already built kernel matrix.
pub fn vendi_from_kernel(k: DMatrix<f64>) -> Result<VendiResult> {
    let n = k.nrows();
    if n == 0 {
        return Err(contract("vendi score needs at least one sample"));
    }
    let eig = eigen(k / n as f64)?;
    let mut eigenvalues: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    eigenvalues.sort_by(|a, b| b.total_cmp(a));
    let entropy = entropy_of(&eigenvalues);
    Ok(VendiResult {
        score: entropy.exp(),
        eigenvalues,
        entropy,
    })
}

/// `d VS({x} U others) / d x`, with `others` held fixed.
pub fn vendi_gradient(
    x: &FeatureVector,
    others: &[FeatureVector],
    spec: &KernelSpec,
) -> Result<VendiGradient> {
    BankKernel::new(others.to_vec(), *spec)?.gradient(x)
}

/// Kernel over a fixed sample set, reused across gradient evaluations for
/// different query points. Only the row of the query point is recomputed.
#[derive(Debug, Clone)]
pub struct BankKernel {
    samples: Vec<FeatureVector>,
    sub: DMatrix<f64>,
    spec: KernelSpec,
}

impl BankKernel {
    pub fn new(samples: Vec<FeatureVector>, spec: KernelSpec) -> Result<Self> {
        spec.validate()?;
        if let Some(first) = samples.first() {
            let d = first.len();
            if samples.iter().any(|s| s.len() != d) {
                return Err(contract("bank samples have inconsistent dimensions"));
            }
        }
        let sub = fill_kernel(&samples, &spec);
        Ok(Self { samples, sub, spec })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn spec(&self) -> &KernelSpec {
        &self.spec
    }

    fn full_kernel(&self, x: &FeatureVector) -> DMatrix<f64> {
        let m = self.samples.len();
        let mut k = DMatrix::<f64>::identity(m + 1, m + 1);
        k.view_mut((1, 1), (m, m)).copy_from(&self.sub);
        for (j, s) in self.samples.iter().enumerate() {
            let v = kernel_value_unchecked(x, s, &self.spec);
            k[(0, j + 1)] = v;
            k[(j + 1, 0)] = v;
        }
        k
    }

    fn check_query(&self, x: &FeatureVector) -> Result<()> {
        if let Some(first) = self.samples.first() {
            if first.len() != x.len() {
                return Err(contract(format!(
                    "dimension mismatch: query {} vs bank {}",
                    x.len(),
                    first.len()
                )));
            }
        }
        Ok(())
    }

    /// Vendi Score of `{x}` joined with the bank.
    pub fn score_with(&self, x: &FeatureVector) -> Result<VendiResult> {
        self.check_query(x)?;
        vendi_from_kernel(self.full_kernel(x))
    }

    pub fn gradient(&self, x: &FeatureVector) -> Result<VendiGradient> {
        self.check_query(x)?;
        if self.samples.is_empty() {
            return Ok(VendiGradient::zero(x.len()));
        }
        let n = self.samples.len() + 1;
        let nf = n as f64;
        let eig = eigen(self.full_kernel(x) / nf)?;
        let lambdas = &eig.eigenvalues;
        let v = &eig.eigenvectors;

        let entropy = entropy_of(lambdas.as_slice());
        let score = entropy.exp();

        // Row 0 of dH/dK, restricted to the kept spectrum.
        let weights: DVector<f64> = lambdas.map(|l| {
            if l > LAMBDA_FLOOR {
                -(l.min(1.0).ln() + 1.0)
            } else {
                0.0
            }
        });

        let mut degenerate = false;
        let mut grad = FeatureVector::zeros(x.len());
        for (j, s) in self.samples.iter().enumerate() {
            let col = j + 1;
            let mut dh = 0.0;
            for m in 0..n {
                dh += weights[m] * v[(0, m)] * v[(col, m)];
            }
            dh /= nf;
            if (x - s).norm() < COINCIDENCE_DISTANCE {
                degenerate = true;
            }
            let kg = kernel_gradient_unchecked(x, s, &self.spec);
            degenerate |= kg.degenerate;
            // K[0,j] and K[j,0] both move with x.
            grad.axpy(2.0 * score * dh, &kg.grad, 1.0);
        }
        if grad.iter().any(|g| !g.is_finite()) {
            degenerate = true;
        }
        Ok(VendiGradient { grad, degenerate })
    }
}
