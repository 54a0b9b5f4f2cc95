//! Seedable samplers for the source and target distributions.
//!
//! Two-moons and the spiral are fixed reconstructions: moons of radius 1
//! with noise 0.05, centred and scaled by 8; an Archimedean spiral
//! `r = 0.4θ`, `θ ∈ [π, 4π]`, noise 0.1, scaled by 2.4 so both fit the same
//! box of half-width about 12.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracles::{gaussian_eot_coupling, GaussianCoupling};
use crate::tensor::Matrix;

pub const EIGHT_GAUSSIAN_RADIUS: f64 = 12.0;
pub const EIGHT_GAUSSIAN_STD: f64 = 0.04;
pub const MOON_NOISE: f64 = 0.05;
pub const MOON_SCALE: f64 = 8.0;
pub const SPIRAL_NOISE: f64 = 0.1;
pub const SPIRAL_SCALE: f64 = 2.4;
/// Every moon and spiral sample lies within this distance of the origin.
pub const TOY_BOUND: f64 = 20.0;

fn default_component_std() -> f64 {
    EIGHT_GAUSSIAN_STD
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    StdGaussian {
        dim: usize,
    },
    /// Equal-variance mixture at `12(cos(iπ/4), sin(iπ/4))`, `i = 0..8`.
    EightGaussian {
        #[serde(default = "default_component_std")]
        component_std: f64,
        /// Unnormalized mode weights; uniform when absent.
        #[serde(default)]
        mode_weights: Option<Vec<f64>>,
    },
    Moon,
    Spiral,
    /// Target half of [`gaussian_pair`].
    GaussianPair {
        dim: usize,
        pair_seed: u64,
    },
    Gaussian {
        mean: Vec<f64>,
        cov: Vec<Vec<f64>>,
    },
}

impl DatasetSpec {
    pub fn name(&self) -> &'static str {
        match self {
            DatasetSpec::StdGaussian { .. } => "std_gaussian",
            DatasetSpec::EightGaussian { .. } => "eight_gaussian",
            DatasetSpec::Moon => "moon",
            DatasetSpec::Spiral => "spiral",
            DatasetSpec::GaussianPair { .. } => "gaussian_pair",
            DatasetSpec::Gaussian { .. } => "gaussian",
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            DatasetSpec::StdGaussian { dim } | DatasetSpec::GaussianPair { dim, .. } => *dim,
            DatasetSpec::EightGaussian { .. } | DatasetSpec::Moon | DatasetSpec::Spiral => 2,
            DatasetSpec::Gaussian { mean, .. } => mean.len(),
        }
    }

    pub fn sampler(&self) -> Result<Sampler> {
        let kind = match self {
            DatasetSpec::StdGaussian { dim } => {
                positive_dim(*dim)?;
                SamplerKind::StdGaussian
            }
            DatasetSpec::EightGaussian {
                component_std,
                mode_weights,
            } => {
                if !(component_std.is_finite() && *component_std >= 0.0) {
                    return Err(Error::InvalidConfig(format!(
                        "component_std must be nonnegative, got {component_std}"
                    )));
                }
                let weights = match mode_weights {
                    None => vec![1.0; 8],
                    Some(w) => w.clone(),
                };
                if weights.len() != 8 || weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
                    return Err(Error::InvalidConfig("mode_weights needs 8 positive entries".into()));
                }
                let total: f64 = weights.iter().sum();
                let mut acc = 0.0;
                let cumulative = weights
                    .iter()
                    .map(|w| {
                        acc += w / total;
                        acc
                    })
                    .collect();
                SamplerKind::Mixture {
                    means: eight_gaussian_means(),
                    std: *component_std,
                    cumulative,
                }
            }
            DatasetSpec::Moon => SamplerKind::Moon,
            DatasetSpec::Spiral => SamplerKind::Spiral,
            DatasetSpec::GaussianPair { dim, pair_seed } => {
                let (mean, cov) = pair_target_params(*dim, *pair_seed)?;
                SamplerKind::gaussian(mean, cov)?
            }
            DatasetSpec::Gaussian { mean, cov } => {
                let d = mean.len();
                positive_dim(d)?;
                if cov.len() != d || cov.iter().any(|r| r.len() != d) {
                    return Err(Error::InvalidConfig(format!("covariance must be {d}x{d}")));
                }
                let cov = DMatrix::from_fn(d, d, |i, j| cov[i][j]);
                SamplerKind::gaussian(DVector::from_vec(mean.clone()), cov)?
            }
        };
        Ok(Sampler { dim: self.dim(), kind })
    }

    /// Mixture centres, if the distribution has discrete modes.
    pub fn modes(&self) -> Option<Vec<Vec<f64>>> {
        match self {
            DatasetSpec::EightGaussian { .. } => Some(eight_gaussian_means()),
            _ => None,
        }
    }
}

fn positive_dim(dim: usize) -> Result<()> {
    if dim == 0 {
        return Err(Error::InvalidConfig("dimension must be positive".into()));
    }
    Ok(())
}

pub fn eight_gaussian_means() -> Vec<Vec<f64>> {
    (0..8)
        .map(|i| {
            let a = i as f64 * std::f64::consts::FRAC_PI_4;
            vec![EIGHT_GAUSSIAN_RADIUS * a.cos(), EIGHT_GAUSSIAN_RADIUS * a.sin()]
        })
        .collect()
}

#[derive(Debug, Clone)]
enum SamplerKind {
    StdGaussian,
    Mixture {
        means: Vec<Vec<f64>>,
        std: f64,
        cumulative: Vec<f64>,
    },
    Moon,
    Spiral,
    Gaussian {
        mean: DVector<f64>,
        chol: DMatrix<f64>,
    },
}

impl SamplerKind {
    fn gaussian(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let sym_err = (&cov - cov.transpose()).abs().max();
        if sym_err > 1e-10 {
            return Err(Error::NotPositiveDefinite {
                context: "dataset covariance (not symmetric)",
            });
        }
        let chol = Cholesky::new(cov).ok_or(Error::NotPositiveDefinite {
            context: "dataset covariance",
        })?;
        Ok(SamplerKind::Gaussian { mean, chol: chol.l() })
    }
}

/// A validated, ready-to-draw dataset.
#[derive(Debug, Clone)]
pub struct Sampler {
    dim: usize,
    kind: SamplerKind,
}

impl Sampler {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Matrix {
        let mut out = Matrix::zeros(n, self.dim);
        for r in 0..n {
            self.draw(rng, out.row_mut(r));
        }
        out
    }

    /// Draws with the index of the mixture component for each row.
    pub fn sample_labeled<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> (Matrix, Vec<usize>) {
        let mut out = Matrix::zeros(n, self.dim);
        let labels = (0..n).map(|r| self.draw(rng, out.row_mut(r))).collect();
        (out, labels)
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R, row: &mut [f64]) -> usize {
        let mut normal = || -> f64 { rng.sample(StandardNormal) };
        match &self.kind {
            SamplerKind::StdGaussian => {
                for v in row.iter_mut() {
                    *v = normal();
                }
                0
            }
            SamplerKind::Mixture { means, std, cumulative } => {
                let u: f64 = rng.random();
                let k = cumulative.iter().position(|&c| u < c).unwrap_or(7);
                for (v, m) in row.iter_mut().zip(&means[k]) {
                    let e: f64 = rng.sample(StandardNormal);
                    *v = m + std * e;
                }
                k
            }
            SamplerKind::Moon => {
                let upper = rng.random::<bool>();
                let theta = rng.sample(Uniform::new(0.0, std::f64::consts::PI).unwrap());
                let (x, y) = if upper {
                    (theta.cos(), theta.sin())
                } else {
                    (1.0 - theta.cos(), 0.5 - theta.sin())
                };
                let nx: f64 = rng.sample(StandardNormal);
                let ny: f64 = rng.sample(StandardNormal);
                row[0] = MOON_SCALE * (x + MOON_NOISE * nx - 0.5);
                row[1] = MOON_SCALE * (y + MOON_NOISE * ny - 0.25);
                usize::from(!upper)
            }
            SamplerKind::Spiral => {
                let theta = rng.sample(Uniform::new(std::f64::consts::PI, 4.0 * std::f64::consts::PI).unwrap());
                let r = 0.4 * theta;
                let nx: f64 = rng.sample(StandardNormal);
                let ny: f64 = rng.sample(StandardNormal);
                row[0] = SPIRAL_SCALE * (r * theta.cos() + SPIRAL_NOISE * nx);
                row[1] = SPIRAL_SCALE * (r * theta.sin() + SPIRAL_NOISE * ny);
                0
            }
            SamplerKind::Gaussian { mean, chol } => {
                let z: Vec<f64> = (0..self.dim).map(|_| normal()).collect();
                for i in 0..self.dim {
                    let mut acc = mean[i];
                    for (j, zj) in z.iter().enumerate().take(i + 1) {
                        acc += chol[(i, j)] * zj;
                    }
                    row[i] = acc;
                }
                0
            }
        }
    }
}

pub fn sample<R: Rng + ?Sized>(spec: &DatasetSpec, n: usize, rng: &mut R) -> Result<Matrix> {
    if n == 0 {
        return Err(Error::InvalidConfig("sample count must be positive".into()));
    }
    Ok(spec.sampler()?.sample(n, rng))
}

/// Seeded target of the Gaussian benchmark: mean entries uniform in
/// `[−1, 1]`, covariance `AAᵀ/dim + 0.5 I` with `A` standard normal.
pub fn pair_target_params(dim: usize, seed: u64) -> Result<(DVector<f64>, DMatrix<f64>)> {
    positive_dim(dim)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unif = Uniform::new_inclusive(-1.0, 1.0).unwrap();
    let mean = DVector::from_fn(dim, |_, _| unif.sample(&mut rng));
    let a = DMatrix::from_fn(dim, dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut cov = &a * a.transpose() / dim as f64 + DMatrix::identity(dim, dim) * 0.5;
    // Exact symmetry regardless of rounding in the product.
    for i in 0..dim {
        for j in 0..i {
            let v = 0.5 * (cov[(i, j)] + cov[(j, i)]);
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    Ok((mean, cov))
}

#[derive(Debug, Clone)]
pub struct GaussianPair {
    pub source: DatasetSpec,
    pub target: DatasetSpec,
    pub truth: GaussianCoupling,
}

/// Standard Gaussian source, seeded Gaussian target, and the entropic
/// coupling between them for regularization `sigma2`.
pub fn gaussian_pair(dim: usize, seed: u64, sigma2: f64) -> Result<GaussianPair> {
    let (m1, s1) = pair_target_params(dim, seed)?;
    let truth = gaussian_eot_coupling(&DVector::zeros(dim), &DMatrix::identity(dim, dim), &m1, &s1, sigma2)?;
    Ok(GaussianPair {
        source: DatasetSpec::StdGaussian { dim },
        target: DatasetSpec::GaussianPair { dim, pair_seed: seed },
        truth,
    })
}
