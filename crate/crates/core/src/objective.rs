//! The discretized HJB residual and the two adversarial losses.
//!
//! For a sample `(t, x_t, x_{t+Δt})`
//!
//! ```text
//! R = (v(t+Δt, x_{t+Δt}) − v(t, x_t)) / Δt − (α/2)‖∇v(t, x_t)‖² + (σ²/2) Δv(t, x_t)
//! ```
//!
//! with the Laplacian replaced by a Hutchinson estimate. The value network
//! minimizes
//!
//! ```text
//! λ_D |R|^p − (α/2)‖∇v(t, x_t)‖² − v(1, ŷ) + Ψ*(v(1, y))  [+ r1·‖∇v(t, x_t)‖²]
//! ```
//!
//! and the generator minimizes `λ_G · R`, both averaged over the batch.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::bridge::{bridge_coeffs, step_coeffs};
use crate::entropy::EntropySpec;
use crate::error::{Error, Result};
use crate::nets::{hutchinson_graph, rademacher, value_graph, Generator, NetVars, ParamGrads, ValueNetwork};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub sigma: f64,
    pub lambda_g: f64,
    pub lambda_d: f64,
    pub p: f64,
    pub r1_coeff: f64,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("alpha", self.alpha),
            ("sigma", self.sigma),
            ("lambda_g", self.lambda_g),
            ("lambda_d", self.lambda_d),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        if !(1.0..=2.0).contains(&self.p) {
            return Err(Error::InvalidConfig(format!("p must lie in [1, 2], got {}", self.p)));
        }
        if !(self.r1_coeff.is_finite() && self.r1_coeff >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "r1_coeff must be nonnegative, got {}",
                self.r1_coeff
            )));
        }
        Ok(())
    }
}

/// A scalar field `v(t, x)` that can be placed on a graph. Implemented by the
/// value network's parameter handles; tests also use analytic fields.
pub trait ValueField {
    /// `n × 1` values at rows of `x`, with `t` an `n × 1` column.
    fn eval(&self, g: &mut Graph, t: &Matrix, x: Var) -> Var;
}

impl ValueField for NetVars {
    fn eval(&self, g: &mut Graph, t: &Matrix, x: Var) -> Var {
        value_graph(g, self, t, x)
    }
}

/// Graph nodes of one residual evaluation, all `n × 1` except `grad`.
#[derive(Debug, Clone, Copy)]
pub struct ResidualNodes {
    pub r: Var,
    pub v_t: Var,
    pub v_next: Var,
    /// `∇ₓv(t, x_t)`, `n × d`.
    pub grad: Var,
    /// `‖∇ₓv(t, x_t)‖²`.
    pub grad_sq: Var,
    pub laplacian: Var,
}

/// Records `R` for a batch on `g`. `t` holds one time per row; `x_t` must
/// be a node that `x_next` may or may not depend on.
pub fn residual_graph<F: ValueField + ?Sized>(
    g: &mut Graph,
    v: &F,
    t: &[f64],
    x_t: Var,
    x_next: Var,
    dt: f64,
    w: &LossWeights,
    probes: &[Matrix],
) -> ResidualNodes {
    let t_col = Matrix::column(t);
    let t_next = Matrix::column(&t.iter().map(|&s| s + dt).collect::<Vec<_>>());
    let v_t = v.eval(g, &t_col, x_t);
    let v_next = v.eval(g, &t_next, x_next);
    let total = g.sum(v_t);
    let grad = g.grad(total, &[x_t])[0];
    let laplacian = hutchinson_graph(g, grad, x_t, probes);
    let grad_sq = g.row_dot(grad, grad);

    let diff = g.sub(v_next, v_t);
    let time_term = g.scale(diff, 1.0 / dt);
    let running = g.scale(grad_sq, 0.5 * w.alpha);
    let diffusion = g.scale(laplacian, 0.5 * w.sigma * w.sigma);
    let r = g.sub(time_term, running);
    let r = g.add(r, diffusion);
    ResidualNodes {
        r,
        v_t,
        v_next,
        grad,
        grad_sq,
        laplacian,
    }
}

fn check_time(t: f64, dt: f64) -> Result<()> {
    if !(t.is_finite() && dt.is_finite() && dt > 0.0 && t >= 0.0 && t + dt <= 1.0 + crate::bridge::TIME_EPS) {
        return Err(Error::InvalidTime {
            context: "hjb residual (needs 0 <= t, t + dt <= 1)",
            t,
        });
    }
    Ok(())
}

fn finite(what: &'static str, m: &Matrix) -> Result<()> {
    if m.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss { what, iteration: 0 })
    }
}

/// Intermediates of a residual evaluation, one entry per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualCache {
    pub r: Vec<f64>,
    pub v_t: Vec<f64>,
    pub v_next: Vec<f64>,
    pub grad: Matrix,
    pub laplacian: Vec<f64>,
}

/// Batched residual with caller-supplied probes.
pub fn hjb_residual_batch(
    v: &ValueNetwork,
    t: &[f64],
    x_t: &Matrix,
    x_next: &Matrix,
    dt: f64,
    w: &LossWeights,
    probes: &[Matrix],
) -> Result<ResidualCache> {
    for &s in t {
        check_time(s, dt)?;
    }
    check_batch(v, t, &[x_t, x_next])?;
    check_probes(probes, x_t)?;
    let mut g = Graph::new();
    let vars = v.net.register(&mut g, false);
    let xa = g.constant(x_t.clone());
    let xb = g.constant(x_next.clone());
    let n = residual_graph(&mut g, &vars, t, xa, xb, dt, w, probes);
    let col = |g: &Graph, v: Var| g.value(v).as_slice().to_vec();
    let cache = ResidualCache {
        r: col(&g, n.r),
        v_t: col(&g, n.v_t),
        v_next: col(&g, n.v_next),
        grad: g.value(n.grad).clone(),
        laplacian: col(&g, n.laplacian),
    };
    if !cache.r.iter().all(|r| r.is_finite()) {
        return Err(Error::NonFiniteLoss {
            what: "hjb residual",
            iteration: 0,
        });
    }
    Ok(cache)
}

/// Single-sample residual with `n_probes` fresh Rademacher probes.
pub fn hjb_residual<R: Rng + ?Sized>(
    v: &ValueNetwork,
    t: f64,
    x_t: &[f64],
    x_next: &[f64],
    dt: f64,
    w: &LossWeights,
    n_probes: usize,
    rng: &mut R,
) -> Result<(f64, ResidualCache)> {
    let probes = draw_probes(rng, n_probes, 1, x_t.len())?;
    let a = Matrix::from_vec(1, x_t.len(), x_t.to_vec());
    let b = Matrix::from_vec(1, x_next.len(), x_next.to_vec());
    let cache = hjb_residual_batch(v, &[t], &a, &b, dt, w, &probes)?;
    Ok((cache.r[0], cache))
}

pub fn draw_probes<R: Rng + ?Sized>(rng: &mut R, n_probes: usize, rows: usize, dim: usize) -> Result<Vec<Matrix>> {
    if n_probes == 0 {
        return Err(Error::InvalidConfig("n_probes must be at least 1".into()));
    }
    Ok((0..n_probes).map(|_| rademacher(rng, rows, dim)).collect())
}

fn check_batch(v: &ValueNetwork, t: &[f64], xs: &[&Matrix]) -> Result<()> {
    if t.is_empty() {
        return Err(Error::InvalidConfig("empty batch".into()));
    }
    for x in xs {
        if x.rows() != t.len() {
            return Err(Error::DimensionMismatch {
                context: "batch rows",
                expected: t.len(),
                got: x.rows(),
            });
        }
        if x.cols() != v.dim() {
            return Err(Error::DimensionMismatch {
                context: "batch dimension",
                expected: v.dim(),
                got: x.cols(),
            });
        }
    }
    Ok(())
}

fn check_probes(probes: &[Matrix], x: &Matrix) -> Result<()> {
    if probes.is_empty() {
        return Err(Error::InvalidConfig("at least one probe is required".into()));
    }
    for p in probes {
        if p.shape() != x.shape() {
            return Err(Error::DimensionMismatch {
                context: "probe shape",
                expected: x.len(),
                got: p.len(),
            });
        }
    }
    Ok(())
}

/// `|r|^p` with derivative `p·|r|^{p−1}·sign(r)`, `sign(0) = 0`.
pub fn abs_pow(g: &mut Graph, r: Var, p: f64) -> Var {
    g.map(
        r,
        move |x| x.abs().powf(p),
        move |x| {
            if x == 0.0 {
                0.0
            } else if p == 1.0 {
                x.signum()
            } else {
                p * x.abs().powf(p - 1.0) * x.signum()
            }
        },
    )
}

/// Inputs of the value update. The generator outputs enter as constants.
#[derive(Debug, Clone)]
pub struct ValueBatch {
    pub t: Vec<f64>,
    pub dt: f64,
    pub x_t: Matrix,
    pub x_next: Matrix,
    pub y_hat: Matrix,
    pub y_real: Matrix,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossStats {
    pub loss: f64,
    pub mean_abs_r: f64,
}

/// Records the value loss on `g` and returns `(loss, R)`.
pub fn value_loss_graph<F: ValueField + ?Sized>(
    g: &mut Graph,
    v: &F,
    batch: &ValueBatch,
    psi: &EntropySpec,
    w: &LossWeights,
    probes: &[Matrix],
) -> (Var, Var) {
    let x_t = g.constant(batch.x_t.clone());
    let x_next = g.constant(batch.x_next.clone());
    let res = residual_graph(g, v, &batch.t, x_t, x_next, batch.dt, w, probes);

    let hjb = abs_pow(g, res.r, w.p);
    let hjb = g.scale(hjb, w.lambda_d);
    let running = g.scale(res.grad_sq, 0.5 * w.alpha - w.r1_coeff);
    let path_term = g.sub(hjb, running);
    let path_term = g.mean(path_term);

    let y_hat = g.constant(batch.y_hat.clone());
    let ones_hat = Matrix::filled(batch.y_hat.rows(), 1, 1.0);
    let v_hat = v.eval(g, &ones_hat, y_hat);
    let v_hat = g.mean(v_hat);

    let y_real = g.constant(batch.y_real.clone());
    let ones_real = Matrix::filled(batch.y_real.rows(), 1, 1.0);
    let v_real = v.eval(g, &ones_real, y_real);
    let psi = *psi;
    let conj = g.map(
        v_real,
        move |x| psi.conjugate_unchecked(x),
        move |x| psi.conjugate_grad_unchecked(x),
    );
    let conj = g.mean(conj);

    let loss = g.sub(path_term, v_hat);
    let loss = g.add(loss, conj);
    (loss, res.r)
}

fn check_value_batch(v: &ValueNetwork, batch: &ValueBatch, probes: &[Matrix]) -> Result<()> {
    for &s in &batch.t {
        check_time(s, batch.dt)?;
    }
    check_batch(v, &batch.t, &[&batch.x_t, &batch.x_next])?;
    for m in [&batch.y_hat, &batch.y_real] {
        if m.rows() == 0 || m.cols() != v.dim() {
            return Err(Error::DimensionMismatch {
                context: "terminal batch",
                expected: v.dim(),
                got: m.cols(),
            });
        }
    }
    check_probes(probes, &batch.x_t)
}

/// Value loss and its gradient with respect to the value parameters.
pub fn value_loss_and_grads(
    v: &ValueNetwork,
    batch: &ValueBatch,
    psi: &EntropySpec,
    w: &LossWeights,
    probes: &[Matrix],
) -> Result<(LossStats, ParamGrads)> {
    check_value_batch(v, batch, probes)?;
    psi.validate()?;
    let mut g = Graph::new();
    let vars = v.net.register(&mut g, true);
    let (loss, r) = value_loss_graph(&mut g, &vars, batch, psi, w, probes);
    let stats = LossStats {
        loss: g.value(loss).item(),
        mean_abs_r: mean_abs(g.value(r)),
    };
    if !stats.loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            what: "value loss",
            iteration: 0,
        });
    }
    let grads = g.into_gradients(loss, vars.vars());
    for gm in &grads {
        finite("value gradient", gm)?;
    }
    Ok((stats, grads))
}

pub fn value_loss(
    v: &ValueNetwork,
    batch: &ValueBatch,
    psi: &EntropySpec,
    w: &LossWeights,
    probes: &[Matrix],
) -> Result<f64> {
    check_value_batch(v, batch, probes)?;
    psi.validate()?;
    let mut g = Graph::new();
    let vars = v.net.register(&mut g, false);
    let (loss, _) = value_loss_graph(&mut g, &vars, batch, psi, w, probes);
    let loss = g.value(loss).item();
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            what: "value loss",
            iteration: 0,
        });
    }
    Ok(loss)
}

fn mean_abs(m: &Matrix) -> f64 {
    m.as_slice().iter().map(|r| r.abs()).sum::<f64>() / m.len() as f64
}

/// `λ_G · mean(R)` on `g`, given nodes `x_t` and `x_next` that carry the
/// dependence on the generator.
pub fn generator_loss_graph<F: ValueField + ?Sized>(
    g: &mut Graph,
    v: &F,
    t: &[f64],
    x_t: Var,
    x_next: Var,
    dt: f64,
    w: &LossWeights,
    probes: &[Matrix],
) -> (Var, Var) {
    let res = residual_graph(g, v, t, x_t, x_next, dt, w, probes);
    let mean = g.mean(res.r);
    (g.scale(mean, w.lambda_g), res.r)
}

/// Draws of one generator update: source points, auxiliary noise, times and
/// the two bridge noises.
#[derive(Debug, Clone)]
pub struct GeneratorBatch {
    pub x: Matrix,
    pub z: Matrix,
    pub t: Vec<f64>,
    pub dt: f64,
    pub eta1: Matrix,
    pub eta2: Matrix,
}

/// Builds `ŷ = T(x, z)`, the bridge point `x_t` and the step `x_{t+Δt}` on the
/// graph, so the residual depends on the generator parameters.
pub fn bridge_path_graph(
    g: &mut Graph,
    gen_vars: &NetVars,
    batch: &GeneratorBatch,
    sigma: f64,
) -> Result<(Var, Var, Var)> {
    let n = batch.t.len();
    let mut from = Vec::with_capacity(n);
    let mut to = Vec::with_capacity(n);
    let mut n1 = Vec::with_capacity(n);
    let mut keep = Vec::with_capacity(n);
    let mut toward = Vec::with_capacity(n);
    let mut n2 = Vec::with_capacity(n);
    for &s in &batch.t {
        let b = bridge_coeffs(s, sigma)?;
        let c = step_coeffs(s, batch.dt, sigma)?;
        from.push(b.from);
        to.push(b.to);
        n1.push(b.noise);
        keep.push(c.keep);
        toward.push(c.toward);
        n2.push(c.noise);
    }
    let x = g.constant(batch.x.clone());
    let z = g.constant(batch.z.clone());
    let y_hat = Generator::forward_graph(g, gen_vars, x, z);

    let col = |g: &mut Graph, v: Vec<f64>| g.constant(Matrix::column(&v));
    let (from, to, n1) = (col(g, from), col(g, to), col(g, n1));
    let (keep, toward, n2) = (col(g, keep), col(g, toward), col(g, n2));
    let eta1 = g.constant(batch.eta1.clone());
    let eta2 = g.constant(batch.eta2.clone());

    let a = g.mul_col(x, from);
    let b = g.mul_col(y_hat, to);
    let c = g.mul_col(eta1, n1);
    let x_t = g.add(a, b);
    let x_t = g.add(x_t, c);

    let a = g.mul_col(x_t, keep);
    let b = g.mul_col(y_hat, toward);
    let c = g.mul_col(eta2, n2);
    let x_next = g.add(a, b);
    let x_next = g.add(x_next, c);
    Ok((y_hat, x_t, x_next))
}

fn check_generator_batch(gen: &Generator, v: &ValueNetwork, batch: &GeneratorBatch, probes: &[Matrix]) -> Result<()> {
    if gen.dim() != v.dim() {
        return Err(Error::DimensionMismatch {
            context: "generator vs value network",
            expected: v.dim(),
            got: gen.dim(),
        });
    }
    for &s in &batch.t {
        check_time(s, batch.dt)?;
    }
    check_batch(v, &batch.t, &[&batch.x, &batch.z, &batch.eta1, &batch.eta2])?;
    check_probes(probes, &batch.x)
}

/// Generator loss and its gradient with respect to the generator parameters.
/// The value network is held fixed.
pub fn generator_loss_and_grads(
    gen: &Generator,
    v: &ValueNetwork,
    batch: &GeneratorBatch,
    w: &LossWeights,
    probes: &[Matrix],
) -> Result<(LossStats, ParamGrads)> {
    check_generator_batch(gen, v, batch, probes)?;
    let mut g = Graph::new();
    let gen_vars = gen.net.register(&mut g, true);
    let v_vars = v.net.register(&mut g, false);
    let (_, x_t, x_next) = bridge_path_graph(&mut g, &gen_vars, batch, w.sigma)?;
    let (loss, r) = generator_loss_graph(&mut g, &v_vars, &batch.t, x_t, x_next, batch.dt, w, probes);
    let stats = LossStats {
        loss: g.value(loss).item(),
        mean_abs_r: mean_abs(g.value(r)),
    };
    if !stats.loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            what: "generator loss",
            iteration: 0,
        });
    }
    let grads = g.into_gradients(loss, gen_vars.vars());
    for gm in &grads {
        finite("generator gradient", gm)?;
    }
    Ok((stats, grads))
}

pub fn generator_loss(
    gen: &Generator,
    v: &ValueNetwork,
    batch: &GeneratorBatch,
    w: &LossWeights,
    probes: &[Matrix],
) -> Result<f64> {
    check_generator_batch(gen, v, batch, probes)?;
    let mut g = Graph::new();
    let gen_vars = gen.net.register(&mut g, false);
    let v_vars = v.net.register(&mut g, false);
    let (_, x_t, x_next) = bridge_path_graph(&mut g, &gen_vars, batch, w.sigma)?;
    let (loss, _) = generator_loss_graph(&mut g, &v_vars, &batch.t, x_t, x_next, batch.dt, w, probes);
    Ok(g.value(loss).item())
}
