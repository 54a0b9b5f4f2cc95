//! Finite-difference checks of every gradient the training loop uses.
//!
//! Analytic gradients are taken from the tape (optionally with corrupted SiLU
//! derivatives); the reference side uses central differences of forward-only
//! evaluations built on fresh, uncorrupted graphs.

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::Graph;
use crate::entropy::EntropySpec;
use crate::error::{Error, Result};
use crate::nets::{hutchinson_graph, rademacher, value_and_input_grad, Generator, NetworkParams, ValueNetwork};
use crate::objective::{
    bridge_path_graph, generator_loss, generator_loss_graph, value_loss, value_loss_graph, GeneratorBatch, LossWeights,
    ValueBatch,
};
use crate::tensor::Matrix;

/// Denominator floor of [`relative_error`].
pub const REL_FLOOR: f64 = 1e-6;
/// SiLU derivative bias applied by the negative control.
pub const CORRUPTION_BIAS: f64 = 0.05;

pub const TERMS: [&str; 6] = [
    "value_loss",
    "generator_loss",
    "input_gradient",
    "grad_norm_path",
    "hutchinson_path",
    "value_loss_p1_at_zero",
];

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub dim: usize,
    pub hidden: Vec<usize>,
    /// Random draws of networks and inputs per term.
    pub points: usize,
    pub batch: usize,
    /// Parameter coordinates differenced per point; all when `None`.
    pub coords_per_point: Option<usize>,
    pub step: f64,
    pub tolerance: f64,
    pub corrupt: bool,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            seed: 0,
            dim: 2,
            hidden: vec![16, 16],
            points: 20,
            batch: 4,
            coords_per_point: Some(24),
            step: 1e-5,
            tolerance: 1e-3,
            corrupt: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TermResult {
    pub term: &'static str,
    pub points: usize,
    pub comparisons: usize,
    pub worst_rel: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub terms: Vec<TermResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.terms.iter().all(|t| t.worst_rel <= self.tolerance)
    }

    pub fn worst(&self) -> f64 {
        self.terms.iter().map(|t| t.worst_rel).fold(0.0, f64::max)
    }
}

/// `|a − b| / max(|a|, |b|, REL_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

fn normals(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

fn random_net(dims: &[usize], rng: &mut ChaCha8Rng) -> Result<NetworkParams> {
    let mut net = NetworkParams::xavier(dims, rng)?;
    for b in net.biases_mut() {
        for v in b.as_mut_slice() {
            *v = 0.1 * rng.sample::<f64, _>(StandardNormal);
        }
    }
    Ok(net)
}

fn random_weights(rng: &mut ChaCha8Rng, k: usize, p: f64) -> LossWeights {
    LossWeights {
        alpha: rng.random_range(0.5..2.0),
        sigma: rng.random_range(0.3..1.2),
        lambda_g: rng.random_range(0.05..1.0),
        lambda_d: rng.random_range(0.5..2.0),
        p,
        r1_coeff: if k % 2 == 0 { 0.0 } else { 0.5 },
    }
}

fn random_psi(rng: &mut ChaCha8Rng, k: usize) -> EntropySpec {
    match k % 3 {
        0 => EntropySpec::Indicator,
        1 => EntropySpec::ScaledKl {
            scale: rng.random_range(1.0..5.0),
        },
        _ => EntropySpec::SoftplusConjugate,
    }
}

/// Times on a random grid `k/N`, each with room for one step.
fn random_times(rng: &mut ChaCha8Rng, n: usize) -> (Vec<f64>, f64) {
    let steps = rng.random_range(5..=20usize);
    let dt = 1.0 / steps as f64;
    let t = (0..n).map(|_| rng.random_range(0..steps) as f64 * dt).collect();
    (t, dt)
}

struct Checker<'a> {
    cfg: &'a GradcheckConfig,
    worst: f64,
    comparisons: usize,
}

impl Checker<'_> {
    fn coords(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        match self.cfg.coords_per_point {
            Some(k) if k < n => sample_indices(rng, n, k).into_vec(),
            _ => (0..n).collect(),
        }
    }

    /// Compares `analytic` against central differences of `f` over the
    /// flattened parameters of `net`.
    fn params(
        &mut self,
        net: &NetworkParams,
        analytic: &[Matrix],
        rng: &mut ChaCha8Rng,
        mut f: impl FnMut(&NetworkParams) -> Result<f64>,
    ) -> Result<()> {
        let flat_grad: Vec<f64> = analytic.iter().flat_map(|m| m.as_slice().to_vec()).collect();
        let base = net.to_flat();
        let mut probe = net.clone();
        let h = self.cfg.step;
        for i in self.coords(base.len(), rng) {
            let mut shifted = base.clone();
            shifted[i] = base[i] + h;
            probe.set_flat(&shifted);
            let up = f(&probe)?;
            shifted[i] = base[i] - h;
            probe.set_flat(&shifted);
            let down = f(&probe)?;
            let fd = (up - down) / (2.0 * h);
            self.record(flat_grad[i], fd);
        }
        Ok(())
    }

    fn record(&mut self, analytic: f64, fd: f64) {
        let rel = relative_error(analytic, fd);
        self.worst = if rel.is_nan() {
            f64::INFINITY
        } else {
            self.worst.max(rel)
        };
        self.comparisons += 1;
    }
}

fn graph(cfg: &GradcheckConfig) -> Graph {
    let mut g = Graph::new();
    if cfg.corrupt {
        g.corrupt_derivatives(CORRUPTION_BIAS);
    }
    g
}

fn value_batch(rng: &mut ChaCha8Rng, n: usize, d: usize) -> ValueBatch {
    let (t, dt) = random_times(rng, n);
    let x_t = normals(rng, n, d);
    let x_next = x_t.add(&normals(rng, n, d).scale(0.3));
    ValueBatch {
        t,
        dt,
        x_t,
        x_next,
        y_hat: normals(rng, n, d),
        y_real: normals(rng, n, d),
    }
}

fn check_value_loss(cfg: &GradcheckConfig, c: &mut Checker, rng: &mut ChaCha8Rng, k: usize) -> Result<()> {
    let d = cfg.dim;
    let v = ValueNetwork::from_params(random_net(&value_dims(cfg), rng)?)?;
    let batch = value_batch(rng, cfg.batch, d);
    let p = [1.5, 2.0, 1.25][k % 3];
    let w = random_weights(rng, k, p);
    let psi = random_psi(rng, k);
    let probes = vec![rademacher(rng, cfg.batch, d)];
    let mut g = graph(cfg);
    let vars = v.net.register(&mut g, true);
    let (loss, _) = value_loss_graph(&mut g, &vars, &batch, &psi, &w, &probes);
    let analytic = g.into_gradients(loss, vars.vars());
    c.params(&v.net, &analytic, rng, |net| {
        value_loss(&ValueNetwork::from_params(net.clone())?, &batch, &psi, &w, &probes)
    })
}

fn check_p1_at_zero(cfg: &GradcheckConfig, c: &mut Checker, rng: &mut ChaCha8Rng, k: usize) -> Result<()> {
    let d = cfg.dim;
    let mut net = random_net(&value_dims(cfg), rng)?;
    let last = net.n_layers() - 1;
    net.weights_mut()[last] = Matrix::zeros(cfg.hidden.last().copied().unwrap_or(d + 1), 1);
    net.biases_mut()[last] = Matrix::scalar(rng.random_range(-1.0..1.0));
    let v = ValueNetwork::from_params(net)?;
    let batch = value_batch(rng, cfg.batch, d);
    let w = random_weights(rng, k, 1.0);
    let psi = random_psi(rng, k);
    let probes = vec![rademacher(rng, cfg.batch, d)];
    let mut g = graph(cfg);
    let vars = v.net.register(&mut g, true);
    let (loss, r) = value_loss_graph(&mut g, &vars, &batch, &psi, &w, &probes);
    if g.value(r).as_slice().iter().any(|&r| r != 0.0) {
        return Err(Error::Degenerate("constant value field must give R = 0"));
    }
    let analytic = g.into_gradients(loss, vars.vars());
    c.params(&v.net, &analytic, rng, |net| {
        value_loss(&ValueNetwork::from_params(net.clone())?, &batch, &psi, &w, &probes)
    })
}

fn check_generator_loss(cfg: &GradcheckConfig, c: &mut Checker, rng: &mut ChaCha8Rng, k: usize) -> Result<()> {
    let d = cfg.dim;
    let n = cfg.batch;
    let v = ValueNetwork::from_params(random_net(&value_dims(cfg), rng)?)?;
    let gen = Generator::from_params(random_net(&generator_dims(cfg), rng)?)?;
    let (t, dt) = random_times(rng, n);
    let batch = GeneratorBatch {
        x: normals(rng, n, d),
        z: normals(rng, n, d),
        t,
        dt,
        eta1: normals(rng, n, d),
        eta2: normals(rng, n, d),
    };
    let w = random_weights(rng, k, 2.0);
    let probes = vec![rademacher(rng, n, d)];
    let mut g = graph(cfg);
    let gen_vars = gen.net.register(&mut g, true);
    let v_vars = v.net.register(&mut g, false);
    let (_, x_t, x_next) = bridge_path_graph(&mut g, &gen_vars, &batch, w.sigma)?;
    let (loss, _) = generator_loss_graph(&mut g, &v_vars, &batch.t, x_t, x_next, batch.dt, &w, &probes);
    let analytic = g.into_gradients(loss, gen_vars.vars());
    c.params(&gen.net, &analytic, rng, |net| {
        generator_loss(&Generator::from_params(net.clone())?, &v, &batch, &w, &probes)
    })
}

fn check_input_gradient(cfg: &GradcheckConfig, c: &mut Checker, rng: &mut ChaCha8Rng) -> Result<()> {
    let d = cfg.dim;
    let v = ValueNetwork::from_params(random_net(&value_dims(cfg), rng)?)?;
    let t: f64 = rng.random_range(0.0..1.0);
    let x: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let mut g = graph(cfg);
    let vars = v.net.register(&mut g, false);
    let xv = g.constant(Matrix::from_vec(1, d, x.clone()));
    let (_, grad) = value_and_input_grad(&mut g, &vars, &Matrix::scalar(t), xv);
    let analytic = g.value(grad).as_slice().to_vec();
    let h = cfg.step;
    for i in 0..d {
        let mut xs = x.clone();
        xs[i] = x[i] + h;
        let up = v.value(t, &xs)?;
        xs[i] = x[i] - h;
        let down = v.value(t, &xs)?;
        c.record(analytic[i], (up - down) / (2.0 * h));
    }
    Ok(())
}

/// Parameter gradient of `mean ‖∇ₓv‖²` or of the mean Hutchinson estimate.
fn check_second_order_path(
    cfg: &GradcheckConfig,
    c: &mut Checker,
    rng: &mut ChaCha8Rng,
    hutchinson: bool,
) -> Result<()> {
    let d = cfg.dim;
    let n = cfg.batch;
    let v = ValueNetwork::from_params(random_net(&value_dims(cfg), rng)?)?;
    let (t, _) = random_times(rng, n);
    let x = normals(rng, n, d);
    let probes = vec![rademacher(rng, n, d), rademacher(rng, n, d)];
    let mut g = graph(cfg);
    let vars = v.net.register(&mut g, true);
    let xv = g.constant(x.clone());
    let (_, grad) = value_and_input_grad(&mut g, &vars, &Matrix::column(&t), xv);
    let term = if hutchinson {
        hutchinson_graph(&mut g, grad, xv, &probes)
    } else {
        g.row_dot(grad, grad)
    };
    let loss = g.mean(term);
    let analytic = g.into_gradients(loss, vars.vars());
    c.params(&v.net, &analytic, rng, |net| {
        let v = ValueNetwork::from_params(net.clone())?;
        if hutchinson {
            Ok(v.hutchinson_batch(&t, &x, &probes)?.mean())
        } else {
            let gr = v.input_grad_batch(&t, &x)?;
            Ok(gr.norm_sq() / n as f64)
        }
    })
}

fn value_dims(cfg: &GradcheckConfig) -> Vec<usize> {
    let mut dims = vec![cfg.dim + 1];
    dims.extend(&cfg.hidden);
    dims.push(1);
    dims
}

fn generator_dims(cfg: &GradcheckConfig) -> Vec<usize> {
    let mut dims = vec![2 * cfg.dim];
    dims.extend(&cfg.hidden);
    dims.push(cfg.dim);
    dims
}

/// Runs every term on `cfg.points` random draws.
pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    if cfg.dim == 0 || cfg.batch == 0 || cfg.points == 0 || cfg.hidden.contains(&0) {
        return Err(Error::InvalidConfig(
            "gradcheck needs positive dim, batch, points and hidden widths".into(),
        ));
    }
    if !(cfg.step > 0.0 && cfg.step.is_finite()) {
        return Err(Error::InvalidConfig(format!("step must be positive, got {}", cfg.step)));
    }
    let mut terms = Vec::with_capacity(TERMS.len());
    for (ti, &term) in TERMS.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(ti as u64);
        let mut c = Checker {
            cfg,
            worst: 0.0,
            comparisons: 0,
        };
        for k in 0..cfg.points {
            match term {
                "value_loss" => check_value_loss(cfg, &mut c, &mut rng, k)?,
                "generator_loss" => check_generator_loss(cfg, &mut c, &mut rng, k)?,
                "input_gradient" => check_input_gradient(cfg, &mut c, &mut rng)?,
                "grad_norm_path" => check_second_order_path(cfg, &mut c, &mut rng, false)?,
                "hutchinson_path" => check_second_order_path(cfg, &mut c, &mut rng, true)?,
                _ => check_p1_at_zero(cfg, &mut c, &mut rng, k)?,
            }
        }
        terms.push(TermResult {
            term,
            points: cfg.points,
            comparisons: c.comparisons,
            worst_rel: c.worst,
        });
    }
    Ok(GradcheckReport {
        tolerance: cfg.tolerance,
        terms,
    })
}
