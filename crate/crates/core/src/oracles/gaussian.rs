//! Closed-form entropic coupling between two Gaussians for the cost
//! `½‖x − y‖²` and regularization `σ²`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Joint law of `(X, Y)` under the optimal plan: stacked mean and block
/// covariance `[[Σ₀, C], [Cᵀ, Σ₁]]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianCoupling {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianCoupling {
    pub fn dim(&self) -> usize {
        self.mean.len() / 2
    }

    pub fn source_mean(&self) -> DVector<f64> {
        self.mean.rows(0, self.dim()).into_owned()
    }

    pub fn target_mean(&self) -> DVector<f64> {
        self.mean.rows(self.dim(), self.dim()).into_owned()
    }

    pub fn source_cov(&self) -> DMatrix<f64> {
        let d = self.dim();
        self.cov.view((0, 0), (d, d)).into_owned()
    }

    pub fn target_cov(&self) -> DMatrix<f64> {
        let d = self.dim();
        self.cov.view((d, d), (d, d)).into_owned()
    }

    /// Cross-covariance block `C = Cov(X, Y)`.
    pub fn cross_cov(&self) -> DMatrix<f64> {
        let d = self.dim();
        self.cov.view((0, d), (d, d)).into_owned()
    }

    /// `E ½‖X − Y‖² = ½(‖m₀ − m₁‖² + tr(Σ₀ + Σ₁ − 2C))`.
    pub fn transport_cost(&self) -> f64 {
        let dm = self.source_mean() - self.target_mean();
        let tr = self.source_cov().trace() + self.target_cov().trace() - 2.0 * self.cross_cov().trace();
        0.5 * (dm.norm_squared() + tr)
    }

    pub fn min_eigenvalue(&self) -> f64 {
        SymmetricEigen::new(self.cov.clone())
            .eigenvalues
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }

    /// `n` joint draws, returned as `(x, y)` with one sample per row.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> (Matrix, Matrix) {
        let d = self.dim();
        let root = sqrtm_psd(&self.cov);
        let mut x = Matrix::zeros(n, d);
        let mut y = Matrix::zeros(n, d);
        for r in 0..n {
            let z = DVector::from_fn(2 * d, |_, _| rng.sample::<f64, _>(StandardNormal));
            let s = &self.mean + &root * z;
            x.row_mut(r).copy_from_slice(&s.as_slice()[..d]);
            y.row_mut(r).copy_from_slice(&s.as_slice()[d..]);
        }
        (x, y)
    }
}

fn check_spd(m: &DMatrix<f64>, context: &'static str) -> Result<()> {
    if !m.is_square() {
        return Err(Error::DimensionMismatch {
            context,
            expected: m.nrows(),
            got: m.ncols(),
        });
    }
    if !m.iter().all(|v| v.is_finite()) {
        return Err(Error::NotPositiveDefinite { context });
    }
    let asym = (m - m.transpose()).abs().max();
    if asym > 1e-10 * m.abs().max().max(1.0) {
        return Err(Error::NotPositiveDefinite { context });
    }
    let eig = SymmetricEigen::new(m.clone());
    if eig.eigenvalues.iter().any(|&l| l <= 0.0) {
        return Err(Error::NotPositiveDefinite { context });
    }
    Ok(())
}

/// Principal square root of a symmetric PSD matrix; negative rounding
/// eigenvalues are clamped to zero.
pub fn sqrtm_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

fn inv_sqrtm_spd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new((m + m.transpose()) * 0.5);
    let vals = eig.eigenvalues.map(|l| 1.0 / l.sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// `C = ½ S₀^{1/2} ((4 S₀^{1/2} S₁ S₀^{1/2} + σ⁴ I)^{1/2} − σ² I) S₀^{−1/2}`.
pub fn gaussian_eot_coupling(
    m0: &DVector<f64>,
    s0: &DMatrix<f64>,
    m1: &DVector<f64>,
    s1: &DMatrix<f64>,
    sigma2: f64,
) -> Result<GaussianCoupling> {
    let d = m0.len();
    for (got, context) in [
        (m1.len(), "target mean"),
        (s0.nrows(), "source covariance"),
        (s1.nrows(), "target covariance"),
    ] {
        if got != d {
            return Err(Error::DimensionMismatch {
                context,
                expected: d,
                got,
            });
        }
    }
    check_spd(s0, "source covariance")?;
    check_spd(s1, "target covariance")?;
    if !(sigma2.is_finite() && sigma2 >= 0.0) {
        return Err(Error::InvalidConfig(format!(
            "sigma2 must be nonnegative, got {sigma2}"
        )));
    }
    let r0 = sqrtm_psd(s0);
    let r0_inv = inv_sqrtm_spd(s0);
    let eye = DMatrix::<f64>::identity(d, d);
    let inner = &r0 * s1 * &r0 * 4.0 + &eye * (sigma2 * sigma2);
    let c = &r0 * (sqrtm_psd(&inner) - &eye * sigma2) * &r0_inv * 0.5;

    let mut mean = DVector::zeros(2 * d);
    mean.rows_mut(0, d).copy_from(m0);
    mean.rows_mut(d, d).copy_from(m1);
    let mut cov = DMatrix::zeros(2 * d, 2 * d);
    cov.view_mut((0, 0), (d, d)).copy_from(s0);
    cov.view_mut((d, d), (d, d)).copy_from(s1);
    cov.view_mut((0, d), (d, d)).copy_from(&c);
    cov.view_mut((d, 0), (d, d)).copy_from(&c.transpose());
    Ok(GaussianCoupling { mean, cov })
}
