//! Reference solvers used to check learned couplings.

mod brute;
mod gaussian;
mod sinkhorn;

pub use brute::{brute_force_tiny, BruteOptions, MAX_FREE_PARAMS};
pub use gaussian::{gaussian_eot_coupling, sqrtm_psd, GaussianCoupling};
pub use sinkhorn::{
    primal_objective, sinkhorn, sinkhorn_balanced, sinkhorn_semi_relaxed_kl, sinkhorn_traced, SinkhornOptions,
    TraceEntry,
};

use std::fmt::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::tensor::Matrix;

/// Which constraint the second marginal of a discrete plan satisfies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Relaxation {
    Balanced,
    /// `alpha_div · KL(P1ᵀ | b)` replaces the column constraint.
    SemiRelaxedKl {
        alpha_div: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteCoupling {
    pub plan: Matrix,
    pub source_weights: Vec<f64>,
    pub target_weights: Vec<f64>,
    pub epsilon: f64,
    pub relaxation: Relaxation,
    pub iterations: usize,
    /// L1 marginal violation at termination: columns for balanced runs, rows
    /// for semi-relaxed ones.
    pub violation: f64,
    pub objective: f64,
}

impl DiscreteCoupling {
    pub fn row_sums(&self) -> Vec<f64> {
        self.plan.sum_cols().into_vec()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        self.plan.sum_rows().into_vec()
    }

    pub fn total_mass(&self) -> f64 {
        self.plan.sum()
    }

    /// Max absolute deviation of the row sums from the source weights.
    pub fn row_violation(&self) -> f64 {
        max_dev(&self.row_sums(), &self.source_weights)
    }

    pub fn col_violation(&self) -> f64 {
        max_dev(&self.col_sums(), &self.target_weights)
    }

    /// `i,j,mass` lines with a header.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("i,j,mass\n");
        for i in 0..self.plan.rows() {
            for j in 0..self.plan.cols() {
                writeln!(s, "{i},{j},{}", self.plan.get(i, j)).unwrap();
            }
        }
        s
    }
}

fn max_dev(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `½‖xᵢ − yⱼ‖²` between rows of two point sets.
pub fn squared_cost(x: &Matrix, y: &Matrix) -> Matrix {
    assert_eq!(x.cols(), y.cols(), "cost dimension");
    Matrix::from_fn(x.rows(), y.rows(), |i, j| {
        0.5 * x
            .row(i)
            .iter()
            .zip(y.row(j))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
    })
}

/// Seeded instance: points uniform in `[−1, 1]²`, squared cost, weights
/// uniform in `[0.5, 1.5]` then normalized.
pub fn seeded_instance(n: usize, m: usize, seed: u64) -> (Matrix, Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Matrix::from_fn(n, 2, |_, _| rng.random_range(-1.0..1.0));
    let y = Matrix::from_fn(m, 2, |_, _| rng.random_range(-1.0..1.0));
    let mut weights = |k: usize| {
        let w: Vec<f64> = (0..k).map(|_| rng.random_range(0.5..1.5)).collect();
        let total: f64 = w.iter().sum();
        w.into_iter().map(|v| v / total).collect::<Vec<_>>()
    };
    let a = weights(n);
    let b = weights(m);
    (squared_cost(&x, &y), a, b)
}

/// Cross-covariance of the balanced Sinkhorn plan between two centred 1D
/// Gaussians discretized on `points` nodes of `[−half_width, half_width]`,
/// with `ε = sigma2` and cost `½|x − y|²`.
pub fn grid_cross_covariance(var0: f64, var1: f64, sigma2: f64, points: usize, half_width: f64) -> Result<f64> {
    let nodes: Vec<f64> = (0..points)
        .map(|i| -half_width + 2.0 * half_width * i as f64 / (points - 1) as f64)
        .collect();
    let density = |var: f64| {
        let w: Vec<f64> = nodes.iter().map(|x| (-0.5 * x * x / var).exp()).collect();
        let total: f64 = w.iter().sum();
        w.into_iter().map(|v| v / total).collect::<Vec<_>>()
    };
    let a = density(var0);
    let b = density(var1);
    let pts = Matrix::column(&nodes);
    let cost = squared_cost(&pts, &pts);
    let plan = sinkhorn_balanced(&cost, &a, &b, sigma2, SinkhornOptions::default())?.plan;
    let (mut mx, mut my, mut mxy) = (0.0, 0.0, 0.0);
    for i in 0..points {
        for j in 0..points {
            let p = plan.get(i, j);
            mx += p * nodes[i];
            my += p * nodes[j];
            mxy += p * nodes[i] * nodes[j];
        }
    }
    Ok(mxy - mx * my)
}
