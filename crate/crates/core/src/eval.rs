//! Metrics comparing generated pairs `(x, T(x))` with targets and oracles.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracles::{DiscreteCoupling, GaussianCoupling};
use crate::tensor::Matrix;

pub const MIN_MOMENT_PAIRS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub name: String,
    pub value: f64,
    pub n_samples: usize,
    pub seed: u64,
}

/// Relative errors in percent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentErrors {
    /// `None` when the true target mean is zero.
    pub dm_rel: Option<f64>,
    pub dvar_rel: f64,
    pub dcov_rel: f64,
}

fn check_pairs(x: &Matrix, tx: &Matrix) -> Result<()> {
    if x.shape() != tx.shape() {
        return Err(Error::DimensionMismatch {
            context: "pairs (x, T(x))",
            expected: x.len(),
            got: tx.len(),
        });
    }
    if x.rows() == 0 {
        return Err(Error::InvalidConfig("no pairs".into()));
    }
    Ok(())
}

fn column_means(m: &Matrix) -> DVector<f64> {
    DVector::from_vec(m.sum_rows().scale(1.0 / m.rows() as f64).into_vec())
}

/// Unbiased `Cov(a, b)` between the columns of two paired sample sets.
pub fn cross_covariance(a: &Matrix, b: &Matrix) -> DMatrix<f64> {
    let n = a.rows();
    let (ma, mb) = (column_means(a), column_means(b));
    let mut c = DMatrix::zeros(a.cols(), b.cols());
    for r in 0..n {
        let (ra, rb) = (a.row(r), b.row(r));
        for i in 0..a.cols() {
            let da = ra[i] - ma[i];
            for j in 0..b.cols() {
                c[(i, j)] += da * (rb[j] - mb[j]);
            }
        }
    }
    c / (n as f64 - 1.0)
}

pub fn relative_moment_errors(x: &Matrix, tx: &Matrix, truth: &GaussianCoupling) -> Result<MomentErrors> {
    check_pairs(x, tx)?;
    if x.cols() != truth.dim() {
        return Err(Error::DimensionMismatch {
            context: "moment errors vs truth",
            expected: truth.dim(),
            got: x.cols(),
        });
    }
    if x.rows() < MIN_MOMENT_PAIRS {
        return Err(Error::InvalidConfig(format!(
            "moment errors need at least {MIN_MOMENT_PAIRS} pairs, got {}",
            x.rows()
        )));
    }
    let m1 = truth.target_mean();
    let var1 = truth.target_cov().diagonal();
    let c = truth.cross_cov();
    if var1.norm() == 0.0 || c.norm() == 0.0 {
        return Err(Error::Degenerate("target variance or cross-covariance is zero"));
    }
    let m_hat = column_means(tx);
    let self_cov = cross_covariance(tx, tx);
    let c_hat = cross_covariance(x, tx);
    let dm_rel = (m1.norm() > 0.0).then(|| 100.0 * (&m_hat - &m1).norm() / m1.norm());
    Ok(MomentErrors {
        dm_rel,
        dvar_rel: 100.0 * (self_cov.diagonal() - &var1).norm() / var1.norm(),
        dcov_rel: 100.0 * (c_hat - &c).norm() / c.norm(),
    })
}

/// Mean `½‖x − T(x)‖²`.
pub fn transport_cost(x: &Matrix, tx: &Matrix) -> Result<f64> {
    check_pairs(x, tx)?;
    Ok(0.5 * x.sub(tx).norm_sq() / x.rows() as f64)
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Fraction of `modes` with at least one sample within `radius`.
pub fn mode_coverage(samples: &Matrix, modes: &[Vec<f64>], radius: f64) -> Result<f64> {
    if modes.is_empty() {
        return Err(Error::InvalidConfig("no modes".into()));
    }
    let hit = modes
        .iter()
        .filter(|m| (0..samples.rows()).any(|r| dist(samples.row(r), m) <= radius))
        .count();
    Ok(hit as f64 / modes.len() as f64)
}

/// Share of samples whose nearest mode is each of `modes`.
pub fn mode_frequencies(samples: &Matrix, modes: &[Vec<f64>]) -> Vec<f64> {
    let mut counts = vec![0usize; modes.len()];
    for r in 0..samples.rows() {
        let k = modes
            .iter()
            .enumerate()
            .map(|(k, m)| (k, dist(samples.row(r), m)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(k, _)| k)
            .expect("modes nonempty");
        counts[k] += 1;
    }
    counts
        .into_iter()
        .map(|c| c as f64 / samples.rows().max(1) as f64)
        .collect()
}

fn cross_mean_dist(a: &Matrix, b: &Matrix) -> f64 {
    let mut total = 0.0;
    for i in 0..a.rows() {
        let ra = a.row(i);
        let mut s = 0.0;
        for j in 0..b.rows() {
            s += dist(ra, b.row(j));
        }
        total += s;
    }
    total / (a.rows() as f64 * b.rows() as f64)
}

fn within_mean_dist(a: &Matrix) -> f64 {
    let n = a.rows();
    let mut total = 0.0;
    for i in 0..n {
        let ri = a.row(i);
        let mut s = 0.0;
        for j in i + 1..n {
            s += dist(ri, a.row(j));
        }
        total += s;
    }
    2.0 * total / (n as f64 * n as f64)
}

/// V-statistic energy distance `2E‖X−Y‖ − E‖X−X'‖ − E‖Y−Y'‖` between two
/// empirical distributions. Nonnegative, and exactly zero for identical sets.
pub fn energy_distance(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.cols() != b.cols() {
        return Err(Error::DimensionMismatch {
            context: "energy distance",
            expected: a.cols(),
            got: b.cols(),
        });
    }
    if a.rows() == 0 || b.rows() == 0 {
        return Err(Error::InvalidConfig("energy distance of an empty set".into()));
    }
    if a == b {
        return Ok(0.0);
    }
    let e = 2.0 * cross_mean_dist(a, b) - within_mean_dist(a) - within_mean_dist(b);
    Ok(e.max(0.0))
}

/// Energy distance between joint samples `(x, y)` of a model and of an
/// oracle plan.
pub fn coupling_energy_distance(
    model_x: &Matrix,
    model_y: &Matrix,
    oracle_x: &Matrix,
    oracle_y: &Matrix,
) -> Result<f64> {
    check_pairs(model_x, model_y)?;
    check_pairs(oracle_x, oracle_y)?;
    energy_distance(&model_x.hconcat(model_y), &oracle_x.hconcat(oracle_y))
}

/// `quantile` of the energy distance under random relabelling of the pooled
/// samples, over `n_perm` permutations.
pub fn energy_null_quantile<R: Rng + ?Sized>(
    a: &Matrix,
    b: &Matrix,
    n_perm: usize,
    quantile: f64,
    rng: &mut R,
) -> Result<f64> {
    if n_perm == 0 || !(0.0..=1.0).contains(&quantile) {
        return Err(Error::InvalidConfig("need n_perm >= 1 and quantile in [0, 1]".into()));
    }
    let pooled: Vec<&[f64]> = (0..a.rows())
        .map(|r| a.row(r))
        .chain((0..b.rows()).map(|r| b.row(r)))
        .collect();
    let mut idx: Vec<usize> = (0..pooled.len()).collect();
    let mut stats = Vec::with_capacity(n_perm);
    let gather = |ids: &[usize]| {
        let mut data = Vec::with_capacity(ids.len() * a.cols());
        for &i in ids {
            data.extend_from_slice(pooled[i]);
        }
        Matrix::from_vec(ids.len(), a.cols(), data)
    };
    for _ in 0..n_perm {
        idx.shuffle(rng);
        let pa = gather(&idx[..a.rows()]);
        let pb = gather(&idx[a.rows()..]);
        stats.push(energy_distance(&pa, &pb)?);
    }
    stats.sort_by(f64::total_cmp);
    let pos = ((quantile * n_perm as f64).ceil() as usize).clamp(1, n_perm) - 1;
    Ok(stats[pos])
}

/// `n` pairs drawn from the plan, treated as a distribution over its entries.
pub fn sample_plan_pairs<R: Rng + ?Sized>(
    coupling: &DiscreteCoupling,
    x_support: &Matrix,
    y_support: &Matrix,
    n: usize,
    rng: &mut R,
) -> (Matrix, Matrix) {
    let plan = &coupling.plan;
    let total = plan.sum();
    let mut acc = 0.0;
    let cdf: Vec<f64> = plan
        .as_slice()
        .iter()
        .map(|p| {
            acc += p / total;
            acc
        })
        .collect();
    let mut ids = Vec::with_capacity(n);
    for _ in 0..n {
        let u: f64 = rng.random();
        let k = cdf.partition_point(|&c| c <= u).min(cdf.len() - 1);
        ids.push(k);
    }
    let xs: Vec<usize> = ids.iter().map(|k| k / plan.cols()).collect();
    let ys: Vec<usize> = ids.iter().map(|k| k % plan.cols()).collect();
    (x_support.select_rows(&xs), y_support.select_rows(&ys))
}

/// One pair per source atom: `y` drawn from the row's conditional law.
pub fn conditional_plan_pairs<R: Rng + ?Sized>(
    coupling: &DiscreteCoupling,
    x_support: &Matrix,
    y_support: &Matrix,
    rng: &mut R,
) -> (Matrix, Matrix) {
    let plan = &coupling.plan;
    let mut ys = Vec::with_capacity(plan.rows());
    for i in 0..plan.rows() {
        let row = plan.row(i);
        let total: f64 = row.iter().sum();
        let u: f64 = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = row.len() - 1;
        for (j, p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                pick = j;
                break;
            }
        }
        ys.push(pick);
    }
    (x_support.clone(), y_support.select_rows(&ys))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn transport_cost_examples() {
        let x = Matrix::from_rows(&[vec![1.0, 2.0], vec![-3.0, 0.5]]);
        assert_eq!(transport_cost(&x, &x).unwrap(), 0.0);
        let a = Matrix::from_rows(&[vec![0.0]]);
        let b = Matrix::from_rows(&[vec![2.0]]);
        assert_eq!(transport_cost(&a, &b).unwrap(), 2.0);
    }

    #[test]
    fn coverage_examples() {
        let modes = crate::data::eight_gaussian_means();
        let all = Matrix::from_rows(&modes);
        assert_eq!(mode_coverage(&all, &modes, 1.5).unwrap(), 1.0);
        let half = Matrix::from_rows(&modes[..4]);
        assert_eq!(mode_coverage(&half, &modes, 1.5).unwrap(), 0.5);
        assert!(mode_coverage(&half, &[], 1.5).is_err());
        let f = mode_frequencies(&half, &modes);
        assert_eq!(&f[..5], &[0.25, 0.25, 0.25, 0.25, 0.0]);
    }

    #[test]
    fn energy_distance_identical_is_zero() {
        let a = Matrix::from_fn(50, 3, |i, j| (i * 7 + j) as f64 % 5.0);
        assert_eq!(energy_distance(&a, &a).unwrap(), 0.0);
        let mut rev = a.clone();
        for r in 0..25 {
            let top = a.row(r).to_vec();
            let bottom = a.row(49 - r).to_vec();
            rev.row_mut(r).copy_from_slice(&bottom);
            rev.row_mut(49 - r).copy_from_slice(&top);
        }
        assert!(energy_distance(&a, &rev).unwrap().abs() < 1e-12);
    }

    #[test]
    fn energy_distance_one_dimensional_by_hand() {
        // A = {0}, B = {1}: 2·1 − 0 − 0.
        let a = Matrix::from_rows(&[vec![0.0]]);
        let b = Matrix::from_rows(&[vec![1.0]]);
        assert_eq!(energy_distance(&a, &b).unwrap(), 2.0);
        // A = {0, 2}, B = {1}: 2·1 − (2·2)/4 − 0 = 1.
        let a = Matrix::from_rows(&[vec![0.0], vec![2.0]]);
        assert_eq!(energy_distance(&a, &b).unwrap(), 1.0);
    }

    #[test]
    fn null_quantile_orders() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Matrix::from_fn(40, 1, |i, _| i as f64);
        let b = Matrix::from_fn(40, 1, |i, _| i as f64 + 0.5);
        let q50 = energy_null_quantile(&a, &b, 30, 0.5, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let q99 = energy_null_quantile(&a, &b, 30, 0.99, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(q50 <= q99);
        assert!(energy_null_quantile(&a, &b, 0, 0.5, &mut rng).is_err());
    }
}
