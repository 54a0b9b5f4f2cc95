//! Log-domain Sinkhorn with the reference measure `a ⊗ b`:
//! `P_ij = a_i b_j exp((f_i + g_j − C_ij)/ε)`.

use super::{DiscreteCoupling, Relaxation};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinkhornOptions {
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for SinkhornOptions {
    fn default() -> Self {
        SinkhornOptions {
            max_iters: 100_000,
            tol: 1e-9,
        }
    }
}

/// Objective values after each full iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceEntry {
    pub primal: f64,
    pub dual: f64,
    pub violation: f64,
}

fn validate(cost: &Matrix, a: &[f64], b: &[f64], epsilon: f64) -> Result<()> {
    if cost.rows() != a.len() {
        return Err(Error::DimensionMismatch {
            context: "sinkhorn source weights",
            expected: cost.rows(),
            got: a.len(),
        });
    }
    if cost.cols() != b.len() {
        return Err(Error::DimensionMismatch {
            context: "sinkhorn target weights",
            expected: cost.cols(),
            got: b.len(),
        });
    }
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidConfig("empty marginal".into()));
    }
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(Error::InvalidConfig(format!("epsilon must be positive, got {epsilon}")));
    }
    for (name, w) in [("a", a), ("b", b)] {
        if w.iter().any(|&v| !(v.is_finite() && v > 0.0)) {
            return Err(Error::InvalidConfig(format!(
                "marginal {name} must be strictly positive"
            )));
        }
        let total: f64 = w.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "marginal {name} sums to {total}, expected 1"
            )));
        }
    }
    if !cost.all_finite() {
        return Err(Error::InvalidConfig("cost has non-finite entries".into()));
    }
    Ok(())
}

struct Solver<'a> {
    cost: &'a Matrix,
    log_a: Vec<f64>,
    log_b: Vec<f64>,
    eps: f64,
}

impl Solver<'_> {
    /// `−ε log Σ_j b_j exp((g_j − C_ij)/ε)` for every row.
    fn row_potential(&self, g: &[f64], f: &mut [f64]) {
        let m = self.cost.cols();
        let mut buf = vec![0.0; m];
        for (i, fi) in f.iter_mut().enumerate() {
            let row = self.cost.row(i);
            let mut mx = f64::NEG_INFINITY;
            for j in 0..m {
                buf[j] = self.log_b[j] + (g[j] - row[j]) / self.eps;
                mx = mx.max(buf[j]);
            }
            let s: f64 = buf.iter().map(|v| (v - mx).exp()).sum();
            *fi = -self.eps * (mx + s.ln());
        }
    }

    /// `−ε log Σ_i a_i exp((f_i − C_ij)/ε)` for every column.
    fn col_potential(&self, f: &[f64], g: &mut [f64]) {
        let (n, m) = self.cost.shape();
        let mut mx = vec![f64::NEG_INFINITY; m];
        for i in 0..n {
            let row = self.cost.row(i);
            let base = self.log_a[i] + f[i] / self.eps;
            for j in 0..m {
                mx[j] = mx[j].max(base - row[j] / self.eps);
            }
        }
        let mut s = vec![0.0; m];
        for i in 0..n {
            let row = self.cost.row(i);
            let base = self.log_a[i] + f[i] / self.eps;
            for j in 0..m {
                s[j] += (base - row[j] / self.eps - mx[j]).exp();
            }
        }
        for j in 0..m {
            g[j] = -self.eps * (mx[j] + s[j].ln());
        }
    }

    fn plan(&self, f: &[f64], g: &[f64]) -> Matrix {
        Matrix::from_fn(self.cost.rows(), self.cost.cols(), |i, j| {
            (self.log_a[i] + self.log_b[j] + (f[i] + g[j] - self.cost.get(i, j)) / self.eps).exp()
        })
    }

    fn dual(&self, f: &[f64], g: &[f64], relax: Relaxation, plan: &Matrix) -> f64 {
        let af: f64 = f.iter().zip(&self.log_a).map(|(f, la)| la.exp() * f).sum();
        let mass = plan.sum();
        let second = match relax {
            Relaxation::Balanced => g.iter().zip(&self.log_b).map(|(g, lb)| lb.exp() * g).sum(),
            Relaxation::SemiRelaxedKl { alpha_div } => {
                -alpha_div
                    * g.iter()
                        .zip(&self.log_b)
                        .map(|(g, lb)| lb.exp() * ((-g / alpha_div).exp() - 1.0))
                        .sum::<f64>()
            }
        };
        af + second - self.eps * (mass - 1.0)
    }
}

/// `⟨C, P⟩ + ε KL(P | a⊗b)`, plus `α KL(P1ᵀ | b)` in the semi-relaxed case.
/// KL is the generalized divergence `Σ p log(p/q) − p + q`.
pub fn primal_objective(cost: &Matrix, plan: &Matrix, a: &[f64], b: &[f64], epsilon: f64, relax: Relaxation) -> f64 {
    let mut transport = 0.0;
    let mut entropy = 0.0;
    for i in 0..plan.rows() {
        for j in 0..plan.cols() {
            let p = plan.get(i, j);
            let q = a[i] * b[j];
            transport += cost.get(i, j) * p;
            entropy += kl_term(p, q);
        }
    }
    let mut total = transport + epsilon * entropy;
    if let Relaxation::SemiRelaxedKl { alpha_div } = relax {
        let cols = plan.sum_rows();
        let kl: f64 = cols.as_slice().iter().zip(b).map(|(&p, &q)| kl_term(p, q)).sum();
        total += alpha_div * kl;
    }
    total
}

fn kl_term(p: f64, q: f64) -> f64 {
    if p > 0.0 {
        p * (p / q).ln() - p + q
    } else {
        q
    }
}

fn run(
    cost: &Matrix,
    a: &[f64],
    b: &[f64],
    epsilon: f64,
    relax: Relaxation,
    opts: SinkhornOptions,
    mut trace: Option<&mut Vec<TraceEntry>>,
) -> Result<DiscreteCoupling> {
    validate(cost, a, b, epsilon)?;
    let damping = match relax {
        Relaxation::Balanced => 1.0,
        Relaxation::SemiRelaxedKl { alpha_div } => {
            if !(alpha_div.is_finite() && alpha_div > 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "alpha_div must be positive, got {alpha_div}"
                )));
            }
            alpha_div / (alpha_div + epsilon)
        }
    };
    let s = Solver {
        cost,
        log_a: a.iter().map(|v| v.ln()).collect(),
        log_b: b.iter().map(|v| v.ln()).collect(),
        eps: epsilon,
    };
    let (n, m) = cost.shape();
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let mut g_new = vec![0.0; m];
    s.row_potential(&g, &mut f);
    let mut violation = f64::INFINITY;

    for it in 1..=opts.max_iters {
        s.col_potential(&f, &mut g_new);
        let converged = match relax {
            Relaxation::Balanced => {
                // Column sums of the current plan are b_j exp((g_j − g_new_j)/ε).
                violation = g
                    .iter()
                    .zip(&g_new)
                    .zip(b)
                    .map(|((g, gn), b)| b * (((g - gn) / epsilon).exp() - 1.0).abs())
                    .sum();
                violation < opts.tol
            }
            Relaxation::SemiRelaxedKl { alpha_div } => {
                for v in g_new.iter_mut() {
                    *v *= damping;
                }
                // Exact ascent along (f + c, g − c), the direction the plan
                // does not see; without it that mode decays like `damping^k`.
                let top = g_new.iter().map(|v| -v / alpha_div).fold(f64::NEG_INFINITY, f64::max);
                let lse = top
                    + g_new
                        .iter()
                        .zip(b)
                        .map(|(v, b)| b * (-v / alpha_div - top).exp())
                        .sum::<f64>()
                        .ln();
                let shift = alpha_div * lse;
                for v in g_new.iter_mut() {
                    *v += shift;
                }
                let change = g.iter().zip(&g_new).map(|(g, gn)| (g - gn).abs()).fold(0.0, f64::max);
                violation = change;
                change < opts.tol
            }
        };
        if converged {
            let plan = s.plan(&f, &g);
            let objective = primal_objective(cost, &plan, a, b, epsilon, relax);
            let mut out = DiscreteCoupling {
                plan,
                source_weights: a.to_vec(),
                target_weights: b.to_vec(),
                epsilon,
                relaxation: relax,
                iterations: it,
                violation,
                objective,
            };
            if let Relaxation::SemiRelaxedKl { .. } = relax {
                out.violation = out.row_sums().iter().zip(a).map(|(r, a)| (r - a).abs()).sum();
            }
            return Ok(out);
        }
        std::mem::swap(&mut g, &mut g_new);
        s.row_potential(&g, &mut f);
        if let Some(t) = trace.as_deref_mut() {
            let plan = s.plan(&f, &g);
            t.push(TraceEntry {
                primal: primal_objective(cost, &plan, a, b, epsilon, relax),
                dual: s.dual(&f, &g, relax, &plan),
                violation,
            });
        }
        if !f.iter().all(|v| v.is_finite()) {
            return Err(Error::NotConverged {
                iterations: it,
                violation: f64::NAN,
            });
        }
    }
    Err(Error::NotConverged {
        iterations: opts.max_iters,
        violation,
    })
}

pub fn sinkhorn(
    cost: &Matrix,
    a: &[f64],
    b: &[f64],
    epsilon: f64,
    relax: Relaxation,
    opts: SinkhornOptions,
) -> Result<DiscreteCoupling> {
    run(cost, a, b, epsilon, relax, opts, None)
}

pub fn sinkhorn_balanced(
    cost: &Matrix,
    a: &[f64],
    b: &[f64],
    epsilon: f64,
    opts: SinkhornOptions,
) -> Result<DiscreteCoupling> {
    run(cost, a, b, epsilon, Relaxation::Balanced, opts, None)
}

pub fn sinkhorn_semi_relaxed_kl(
    cost: &Matrix,
    a: &[f64],
    b: &[f64],
    epsilon: f64,
    alpha_div: f64,
    opts: SinkhornOptions,
) -> Result<DiscreteCoupling> {
    run(cost, a, b, epsilon, Relaxation::SemiRelaxedKl { alpha_div }, opts, None)
}

/// Like [`sinkhorn`], also returning primal and dual values per iteration.
pub fn sinkhorn_traced(
    cost: &Matrix,
    a: &[f64],
    b: &[f64],
    epsilon: f64,
    relax: Relaxation,
    opts: SinkhornOptions,
) -> Result<(DiscreteCoupling, Vec<TraceEntry>)> {
    let mut trace = Vec::new();
    let c = run(cost, a, b, epsilon, relax, opts, Some(&mut trace))?;
    Ok((c, trace))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts() -> SinkhornOptions {
        SinkhornOptions::default()
    }

    #[test]
    fn one_by_one_is_trivial() {
        let c = sinkhorn_balanced(&Matrix::scalar(3.0), &[1.0], &[1.0], 0.1, opts()).unwrap();
        assert!((c.plan.item() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn huge_epsilon_gives_product_plan() {
        let cost = Matrix::from_rows(&[vec![0.0, 1.0, 4.0], vec![1.0, 0.0, 1.0]]);
        let a = [0.3, 0.7];
        let b = [0.2, 0.5, 0.3];
        let c = sinkhorn_balanced(&cost, &a, &b, 4e3, opts()).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                assert!((c.plan.get(i, j) - a[i] * b[j]).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn balanced_marginals_hold() {
        let cost = Matrix::from_fn(4, 5, |i, j| ((i as f64) - 0.7 * j as f64).powi(2));
        let a = [0.1, 0.2, 0.3, 0.4];
        let b = [0.2; 5];
        let c = sinkhorn_balanced(&cost, &a, &b, 0.3, opts()).unwrap();
        assert!(c.row_violation() < 1e-9);
        assert!(c.col_violation() < 1e-9);
    }

    #[test]
    fn non_convergence_is_reported() {
        let cost = Matrix::from_fn(3, 3, |i, j| ((i as f64) - 0.5 * j as f64).powi(2));
        let a = [0.6, 0.3, 0.1];
        let b = [0.1, 0.2, 0.7];
        let err = sinkhorn_balanced(
            &cost,
            &a,
            &b,
            0.5,
            SinkhornOptions {
                max_iters: 2,
                tol: 1e-12,
            },
        );
        assert!(matches!(err, Err(Error::NotConverged { iterations: 2, .. })));
    }

    #[test]
    fn rejects_bad_marginals() {
        let cost = Matrix::zeros(2, 2);
        assert!(sinkhorn_balanced(&cost, &[0.5, 0.6], &[0.5, 0.5], 1.0, opts()).is_err());
        assert!(sinkhorn_balanced(&cost, &[1.0, 0.0], &[0.5, 0.5], 1.0, opts()).is_err());
        assert!(sinkhorn_balanced(&cost, &[1.0], &[0.5, 0.5], 1.0, opts()).is_err());
        assert!(sinkhorn_balanced(&cost, &[0.5, 0.5], &[0.5, 0.5], 0.0, opts()).is_err());
    }

    #[test]
    fn semi_relaxed_fixes_rows_and_keeps_unit_mass() {
        let cost = Matrix::from_fn(3, 4, |i, j| (i as f64 - j as f64).abs() * 2.0);
        let a = [0.5, 0.3, 0.2];
        let b = [0.1, 0.2, 0.3, 0.4];
        let c = sinkhorn_semi_relaxed_kl(&cost, &a, &b, 0.5, 1.0, opts()).unwrap();
        assert!(c.row_violation() < 1e-9);
        assert!((c.total_mass() - 1.0).abs() < 1e-4);
        assert!(c.col_violation() > 1e-3, "relaxation should move the column marginal");
    }
}
