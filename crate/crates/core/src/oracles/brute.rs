//! Direct minimization of the discrete primal objective over the free entries
//! of a tiny plan, by nested grid search.

use super::{primal_objective, DiscreteCoupling, Relaxation};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const MAX_FREE_PARAMS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BruteOptions {
    /// Grid points per free parameter in the first pass.
    pub initial_points: usize,
    /// Grid points per free parameter in each refinement pass.
    pub refine_points: usize,
    /// Stop refining once the grid spacing drops below this.
    pub resolution: f64,
}

impl Default for BruteOptions {
    fn default() -> Self {
        BruteOptions {
            initial_points: 41,
            refine_points: 15,
            resolution: 1e-7,
        }
    }
}

/// Free entries and how the remaining ones follow from the fixed marginals.
struct Layout<'a> {
    n: usize,
    m: usize,
    a: &'a [f64],
    b: &'a [f64],
    relax: Relaxation,
}

impl Layout<'_> {
    fn n_free(&self) -> usize {
        match self.relax {
            Relaxation::Balanced => (self.n - 1) * (self.m - 1),
            Relaxation::SemiRelaxedKl { .. } => self.n * (self.m - 1),
        }
    }

    fn free_rows(&self) -> usize {
        match self.relax {
            Relaxation::Balanced => self.n - 1,
            Relaxation::SemiRelaxedKl { .. } => self.n,
        }
    }

    /// Upper bound of each free entry.
    fn bounds(&self) -> Vec<f64> {
        let cols = self.m - 1;
        (0..self.n_free())
            .map(|k| {
                let (i, j) = (k / cols, k % cols);
                match self.relax {
                    Relaxation::Balanced => self.a[i].min(self.b[j]),
                    Relaxation::SemiRelaxedKl { .. } => self.a[i],
                }
            })
            .collect()
    }

    /// Completes the plan, or `None` if some implied entry is negative.
    fn plan(&self, free: &[f64]) -> Option<Matrix> {
        let (n, m) = (self.n, self.m);
        let mut p = Matrix::zeros(n, m);
        let cols = m - 1;
        for i in 0..self.free_rows() {
            let mut rest = self.a[i];
            for j in 0..cols {
                let v = free[i * cols + j];
                p.set(i, j, v);
                rest -= v;
            }
            if rest < 0.0 {
                return None;
            }
            p.set(i, m - 1, rest);
        }
        if let Relaxation::Balanced = self.relax {
            let mut corner = self.a[n - 1];
            for j in 0..m {
                let used: f64 = (0..n - 1).map(|i| p.get(i, j)).sum();
                let v = self.b[j] - used;
                if v < 0.0 {
                    return None;
                }
                if j < m - 1 {
                    p.set(n - 1, j, v);
                    corner -= v;
                }
            }
            if corner < 0.0 {
                return None;
            }
            p.set(n - 1, m - 1, corner);
        }
        Some(p)
    }
}

/// Exhaustive minimization over a box: `centre ± half` per coordinate,
/// clipped to `[0, upper]`.
fn grid_pass(
    f: &dyn Fn(&[f64]) -> f64,
    centre: &[f64],
    half: f64,
    upper: &[f64],
    points: usize,
) -> (Vec<f64>, f64, f64) {
    let k = centre.len();
    let lo: Vec<f64> = centre.iter().map(|c| (c - half).max(0.0)).collect();
    let hi: Vec<f64> = centre.iter().zip(upper).map(|(c, u)| (c + half).min(*u)).collect();
    let step: Vec<f64> = lo.iter().zip(&hi).map(|(l, h)| (h - l) / (points - 1) as f64).collect();
    let mut idx = vec![0usize; k];
    let mut x = lo.clone();
    let mut best = (centre.to_vec(), f(centre));
    loop {
        let val = f(&x);
        if val < best.1 {
            best = (x.clone(), val);
        }
        let mut d = 0;
        loop {
            if d == k {
                let spacing = step.iter().copied().fold(0.0, f64::max);
                return (best.0, best.1, spacing);
            }
            idx[d] += 1;
            if idx[d] < points {
                x[d] = lo[d] + step[d] * idx[d] as f64;
                break;
            }
            idx[d] = 0;
            x[d] = lo[d];
            d += 1;
        }
    }
}

/// Minimizes the entropic primal directly. Balanced plans have
/// `(n−1)(m−1)` free entries, semi-relaxed plans `n(m−1)`; at most
/// [`MAX_FREE_PARAMS`] are accepted.
pub fn brute_force_tiny(
    cost: &Matrix,
    a: &[f64],
    b: &[f64],
    epsilon: f64,
    relax: Relaxation,
    opts: BruteOptions,
) -> Result<DiscreteCoupling> {
    let (n, m) = cost.shape();
    if a.len() != n || b.len() != m || n == 0 || m == 0 {
        return Err(Error::DimensionMismatch {
            context: "brute force marginals",
            expected: n,
            got: a.len(),
        });
    }
    if !(epsilon > 0.0) || opts.initial_points < 3 || opts.refine_points < 3 {
        return Err(Error::InvalidConfig(
            "brute force needs epsilon > 0 and >= 3 grid points".into(),
        ));
    }
    let layout = Layout { n, m, a, b, relax };
    let free = layout.n_free();
    if free > MAX_FREE_PARAMS {
        return Err(Error::TooLarge {
            free,
            max: MAX_FREE_PARAMS,
        });
    }
    let objective = |x: &[f64]| match layout.plan(x) {
        Some(p) => primal_objective(cost, &p, a, b, epsilon, relax),
        None => f64::INFINITY,
    };
    let upper = layout.bounds();
    let mut iterations = 0;
    let mut best: Vec<f64> = upper.iter().map(|u| 0.5 * u).collect();
    if free > 0 {
        let span = upper.iter().copied().fold(0.0, f64::max);
        let (x, _, mut spacing) = grid_pass(&objective, &best, span, &upper, opts.initial_points);
        best = x;
        iterations += 1;
        while spacing > opts.resolution && iterations < 200 {
            let (x, _, s) = grid_pass(&objective, &best, 2.0 * spacing, &upper, opts.refine_points);
            // Re-centre without shrinking when the optimum sits on the box edge.
            let on_edge = x
                .iter()
                .zip(&best)
                .any(|(xi, bi)| (xi - bi).abs() >= 2.0 * spacing * 0.999)
                && x != best;
            best = x;
            if !on_edge {
                spacing = s;
            }
            iterations += 1;
        }
    }
    let plan = layout.plan(&best).expect("grid search stays feasible");
    let value = primal_objective(cost, &plan, a, b, epsilon, relax);
    let mut out = DiscreteCoupling {
        plan,
        source_weights: a.to_vec(),
        target_weights: b.to_vec(),
        epsilon,
        relaxation: relax,
        iterations,
        violation: 0.0,
        objective: value,
    };
    out.violation = out.row_violation();
    Ok(out)
}
