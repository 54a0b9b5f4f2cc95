//! Brownian-bridge sampling between endpoint pairs and the discrete time grid.
//!
//! With a Wiener reference of diffusion `σ`, the law of the path at time `t`
//! given endpoints `(x, ŷ)` is `N((1−t)x + tŷ, σ²t(1−t)I)`. Training only ever
//! needs two consecutive points of such a path: `x_t` drawn from the bridge
//! marginal and `x_{t+Δt}` drawn from the bridge conditioned on `x_t`.
//!
//! All noise is supplied by the caller so every draw is reproducible from a
//! seeded generator.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Slack for comparing times that should land on the grid.
pub const TIME_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(n_steps: usize) -> Result<Self> {
        if n_steps == 0 {
            return Err(Error::InvalidConfig("n_steps must be positive".into()));
        }
        Ok(TimeGrid { n_steps })
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.n_steps as f64
    }

    pub fn point(&self, k: usize) -> f64 {
        k as f64 / self.n_steps as f64
    }

    /// `{0, Δt, …, (N−1)Δt}`.
    pub fn points(&self) -> Vec<f64> {
        (0..self.n_steps).map(|k| self.point(k)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TimeDistKind {
    #[default]
    Uniform,
    /// Mass `2(k+1)/(N(N+1))` on grid point `k`, favouring late times.
    Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimeDistribution {
    pub kind: TimeDistKind,
    pub grid: TimeGrid,
}

impl TimeDistribution {
    pub fn new(kind: TimeDistKind, n_steps: usize) -> Result<Self> {
        Ok(TimeDistribution {
            kind,
            grid: TimeGrid::new(n_steps)?,
        })
    }

    pub fn masses(&self) -> Vec<f64> {
        let n = self.grid.n_steps();
        match self.kind {
            TimeDistKind::Uniform => vec![1.0 / n as f64; n],
            TimeDistKind::Linear => {
                let denom = (n * (n + 1)) as f64;
                (0..n).map(|k| 2.0 * (k + 1) as f64 / denom).collect()
            }
        }
    }

    /// Index of a grid point drawn with the distribution's mass.
    pub fn sample_index<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let n = self.grid.n_steps();
        match self.kind {
            TimeDistKind::Uniform => rng.random_range(0..n),
            TimeDistKind::Linear => {
                // Integer inverse CDF: k has weight k+1 out of N(N+1)/2.
                let total = (n as u64) * (n as u64 + 1) / 2;
                let r = rng.random_range(0..total);
                let mut cum = 0u64;
                for k in 0..n {
                    cum += k as u64 + 1;
                    if r < cum {
                        return k;
                    }
                }
                n - 1
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.grid.point(self.sample_index(rng))
    }
}

pub fn sample_time<R: Rng + ?Sized>(dist: &TimeDistribution, rng: &mut R) -> f64 {
    dist.sample(rng)
}

/// `x_t = from·x + to·ŷ + noise·η`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BridgeCoeffs {
    pub from: f64,
    pub to: f64,
    pub noise: f64,
}

pub fn bridge_coeffs(t: f64, sigma: f64) -> Result<BridgeCoeffs> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidTime {
            context: "bridge sample",
            t,
        });
    }
    Ok(BridgeCoeffs {
        from: 1.0 - t,
        to: t,
        noise: sigma * (t * (1.0 - t)).sqrt(),
    })
}

/// `x_{t+Δt} = keep·x_t + toward·ŷ + noise·η`, the bridge conditioned on
/// `x_t` and the endpoint `ŷ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepCoeffs {
    pub keep: f64,
    pub toward: f64,
    pub noise: f64,
}

pub fn step_coeffs(t: f64, dt: f64, sigma: f64) -> Result<StepCoeffs> {
    if !(0.0..1.0).contains(&t) || !(dt > 0.0) {
        return Err(Error::InvalidTime {
            context: "conditional step",
            t,
        });
    }
    let remaining = 1.0 - t - dt;
    if remaining < -TIME_EPS {
        return Err(Error::InvalidTime {
            context: "conditional step (t + dt > 1)",
            t: t + dt,
        });
    }
    if remaining <= TIME_EPS {
        // Final step: the bridge is pinned at ŷ.
        return Ok(StepCoeffs {
            keep: 0.0,
            toward: 1.0,
            noise: 0.0,
        });
    }
    let left = 1.0 - t;
    Ok(StepCoeffs {
        keep: remaining / left,
        toward: dt / left,
        noise: sigma * (remaining * dt / left).sqrt(),
    })
}

fn check_dims(context: &'static str, expected: usize, others: &[usize]) -> Result<()> {
    for &got in others {
        if got != expected {
            return Err(Error::DimensionMismatch { context, expected, got });
        }
    }
    Ok(())
}

pub fn bridge_sample(x: &[f64], y_hat: &[f64], t: f64, sigma: f64, eta: &[f64]) -> Result<Vec<f64>> {
    check_dims("bridge sample", x.len(), &[y_hat.len(), eta.len()])?;
    let c = bridge_coeffs(t, sigma)?;
    Ok(x.iter()
        .zip(y_hat)
        .zip(eta)
        .map(|((&a, &b), &e)| c.from * a + c.to * b + c.noise * e)
        .collect())
}

pub fn conditional_step(x_t: &[f64], y_hat: &[f64], t: f64, dt: f64, sigma: f64, eta: &[f64]) -> Result<Vec<f64>> {
    check_dims("conditional step", x_t.len(), &[y_hat.len(), eta.len()])?;
    let c = step_coeffs(t, dt, sigma)?;
    if c.keep == 0.0 {
        return Ok(y_hat.to_vec());
    }
    Ok(x_t
        .iter()
        .zip(y_hat)
        .zip(eta)
        .map(|((&a, &b), &e)| c.keep * a + c.toward * b + c.noise * e)
        .collect())
}

/// Row-wise [`bridge_sample`] with one time per row.
pub fn bridge_sample_batch(x: &Matrix, y_hat: &Matrix, t: &[f64], sigma: f64, eta: &Matrix) -> Result<Matrix> {
    check_dims("bridge batch rows", x.rows(), &[y_hat.rows(), eta.rows(), t.len()])?;
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let row = bridge_sample(x.row(r), y_hat.row(r), t[r], sigma, eta.row(r))?;
        out.row_mut(r).copy_from_slice(&row);
    }
    Ok(out)
}

/// Row-wise [`conditional_step`] with one time per row.
pub fn conditional_step_batch(
    x_t: &Matrix,
    y_hat: &Matrix,
    t: &[f64],
    dt: f64,
    sigma: f64,
    eta: &Matrix,
) -> Result<Matrix> {
    check_dims("step batch rows", x_t.rows(), &[y_hat.rows(), eta.rows(), t.len()])?;
    let mut out = Matrix::zeros(x_t.rows(), x_t.cols());
    for r in 0..x_t.rows() {
        let row = conditional_step(x_t.row(r), y_hat.row(r), t[r], dt, sigma, eta.row(r))?;
        out.row_mut(r).copy_from_slice(&row);
    }
    Ok(out)
}
