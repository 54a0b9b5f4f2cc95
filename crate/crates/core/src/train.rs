//! Alternating training loop: one value update followed by several
//! generator updates per iteration, Adam with cosine decay, optional
//! global-norm clipping, periodic evaluation and resumable checkpoints.
//!
//! Randomness for iteration `k` comes from its own ChaCha stream of the run
//! seed, so a resumed run replays exactly the draws of an uninterrupted one.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bridge::{bridge_sample_batch, conditional_step_batch, TimeDistKind, TimeDistribution};
use crate::checkpoint::{load_networks, save_networks, write_atomic};
use crate::data::{gaussian_pair, DatasetSpec, Sampler};
use crate::entropy::EntropySpec;
use crate::error::{Error, Result};
use crate::eval::{mode_coverage, relative_moment_errors, transport_cost};
use crate::nets::{Generator, NetworkParams, ValueNetwork};
use crate::objective::{
    draw_probes, generator_loss_and_grads, value_loss_and_grads, GeneratorBatch, LossWeights, ValueBatch,
};
use crate::optim::{clip_global_norm, cosine_lr, Adam};
use crate::oracles::GaussianCoupling;
use crate::tensor::Matrix;

pub const MODEL_FILE: &str = "model.sfeu";
pub const OPTIMIZER_FILE: &str = "optimizer.sfeu";
pub const STATE_FILE: &str = "checkpoint.json";
pub const COVERAGE_RADIUS: f64 = 1.5;

const INIT_STREAM: u64 = 0;
const EVAL_STREAM: u64 = u64::MAX;

fn default_alpha() -> f64 {
    1.0
}
fn default_n_probes() -> usize {
    1
}
fn default_betas() -> [f64; 2] {
    [0.0, 0.9]
}
fn default_inner() -> usize {
    3
}
fn default_true() -> bool {
    true
}
fn default_hidden() -> Vec<usize> {
    vec![256, 256, 256]
}
fn default_eval_samples() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub source: DatasetSpec,
    pub target: DatasetSpec,
    pub sigma: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub psi: EntropySpec,
    pub n_steps: usize,
    #[serde(default)]
    pub time_dist: TimeDistKind,
    pub lambda_g: f64,
    pub lambda_d: f64,
    pub p: f64,
    #[serde(default)]
    pub r1_coeff: f64,
    #[serde(default = "default_n_probes")]
    pub n_probes: usize,
    pub batch_size: usize,
    pub total_iters: u64,
    pub lr_g: f64,
    pub lr_v: f64,
    pub lr_final: f64,
    #[serde(default = "default_betas")]
    pub betas: [f64; 2],
    #[serde(default)]
    pub grad_clip: Option<f64>,
    #[serde(default = "default_inner")]
    pub inner_updates_per_outer: usize,
    #[serde(default = "default_true")]
    pub resample_t_inner: bool,
    pub seed: u64,
    #[serde(default = "default_hidden")]
    pub generator_hidden: Vec<usize>,
    #[serde(default = "default_hidden")]
    pub value_hidden: Vec<usize>,
    #[serde(default = "default_eval_samples")]
    pub eval_samples: usize,
    /// Defaults to `max(total_iters / 100, 100)`.
    #[serde(default)]
    pub eval_every: Option<u64>,
}

impl TrainConfig {
    /// The 2D Gaussian → 8-Gaussian setting: N = 20, σ = 0.8, α = 1, p = 1,
    /// λ_G = 0.1, λ_D = 1, batch 1024, three SiLU layers of width 256,
    /// learning rates 2e-4 / 1e-4 decayed to 5e-5 over 120k iterations.
    pub fn eight_gaussian_reference() -> Self {
        TrainConfig {
            source: DatasetSpec::StdGaussian { dim: 2 },
            target: DatasetSpec::EightGaussian {
                component_std: crate::data::EIGHT_GAUSSIAN_STD,
                mode_weights: None,
            },
            sigma: 0.8,
            alpha: 1.0,
            psi: EntropySpec::Indicator,
            n_steps: 20,
            time_dist: TimeDistKind::Uniform,
            lambda_g: 0.1,
            lambda_d: 1.0,
            p: 1.0,
            r1_coeff: 0.0,
            n_probes: 1,
            batch_size: 1024,
            total_iters: 120_000,
            lr_g: 2e-4,
            lr_v: 1e-4,
            lr_final: 5e-5,
            betas: [0.0, 0.9],
            grad_clip: None,
            inner_updates_per_outer: 3,
            resample_t_inner: true,
            seed: 0,
            generator_hidden: default_hidden(),
            value_hidden: default_hidden(),
            eval_samples: 1000,
            eval_every: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.source.dim()
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            sigma: self.sigma,
            lambda_g: self.lambda_g,
            lambda_d: self.lambda_d,
            p: self.p,
            r1_coeff: self.r1_coeff,
        }
    }

    pub fn eval_interval(&self) -> u64 {
        self.eval_every
            .unwrap_or_else(|| (self.total_iters / 100).max(100))
            .max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.source.dim() != self.target.dim() {
            return bad(format!(
                "source dim {} differs from target dim {}",
                self.source.dim(),
                self.target.dim()
            ));
        }
        self.loss_weights().validate()?;
        self.psi.validate()?;
        if self.n_steps < 2 {
            return bad(format!("n_steps must be at least 2, got {}", self.n_steps));
        }
        if self.batch_size == 0 || self.n_probes == 0 || self.eval_samples == 0 {
            return bad("batch_size, n_probes and eval_samples must be positive".into());
        }
        for (name, lr) in [("lr_g", self.lr_g), ("lr_v", self.lr_v), ("lr_final", self.lr_final)] {
            if !(lr.is_finite() && lr >= 0.0) {
                return bad(format!("{name} must be nonnegative, got {lr}"));
            }
        }
        if self.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return bad(format!("betas must lie in [0, 1), got {:?}", self.betas));
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                return bad(format!("grad_clip must be positive, got {c}"));
            }
        }
        if self.inner_updates_per_outer == 0 {
            return bad("inner_updates_per_outer must be at least 1".into());
        }
        if self.generator_hidden.contains(&0) || self.value_hidden.contains(&0) {
            return bad("hidden widths must be positive".into());
        }
        if self.eval_every == Some(0) {
            return bad("eval_every must be positive".into());
        }
        Ok(())
    }
}

/// Samplers and derived constants of a validated config.
#[derive(Debug, Clone)]
pub struct Problem {
    pub source: Sampler,
    pub target: Sampler,
    pub time: TimeDistribution,
    pub weights: LossWeights,
    pub psi: EntropySpec,
    pub dt: f64,
    /// Entropic coupling for Gaussian-pair runs with a hard target marginal.
    pub truth: Option<GaussianCoupling>,
    pub modes: Option<Vec<Vec<f64>>>,
}

impl Problem {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let time = TimeDistribution::new(config.time_dist, config.n_steps)?;
        let truth = match (&config.source, &config.target, config.psi) {
            (
                DatasetSpec::StdGaussian { dim },
                DatasetSpec::GaussianPair { dim: d2, pair_seed },
                EntropySpec::Indicator,
            ) if dim == d2 => Some(gaussian_pair(*dim, *pair_seed, config.sigma * config.sigma)?.truth),
            _ => None,
        };
        Ok(Problem {
            source: config.source.sampler()?,
            target: config.target.sampler()?,
            dt: 1.0 / config.n_steps as f64,
            time,
            weights: config.loss_weights(),
            psi: config.psi,
            truth,
            modes: config.target.modes(),
        })
    }
}

pub fn iteration_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub generator: Generator,
    pub value: ValueNetwork,
    pub opt_g: Adam,
    pub opt_v: Adam,
    /// Completed iterations.
    pub iteration: u64,
}

impl TrainState {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = iteration_rng(config.seed, INIT_STREAM);
        let d = config.dim();
        let generator = Generator::new(d, &config.generator_hidden, &mut rng)?;
        let value = ValueNetwork::new(d, &config.value_hidden, &mut rng)?;
        let opt_g = Adam::new(&generator.net, config.betas)?;
        let opt_v = Adam::new(&value.net, config.betas)?;
        Ok(TrainState {
            config,
            generator,
            value,
            opt_g,
            opt_v,
            iteration: 0,
        })
    }

    pub fn lr_g(&self, k: u64) -> f64 {
        cosine_lr(self.config.lr_g, self.config.lr_final, k, self.config.total_iters)
    }

    pub fn lr_v(&self, k: u64) -> f64 {
        cosine_lr(self.config.lr_v, self.config.lr_final, k, self.config.total_iters)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss_v: f64,
    pub loss_g: f64,
    pub mean_abs_r: f64,
}

fn normals(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    use rand::Rng;
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

fn with_iteration(e: Error, k: u64) -> Error {
    match e {
        Error::NonFiniteLoss { what, .. } => Error::NonFiniteLoss { what, iteration: k },
        Error::NumericLayer { network, .. } => Error::NonFiniteLoss {
            what: network,
            iteration: k,
        },
        other => other,
    }
}

fn apply(opt: &mut Adam, net: &mut NetworkParams, mut grads: Vec<Matrix>, lr: f64, clip: Option<f64>) {
    if let Some(c) = clip {
        clip_global_norm(&mut grads, c);
    }
    opt.update(net, &grads, lr);
}

/// Runs iteration `state.iteration` with draws from `rng`.
pub fn train_step(state: &mut TrainState, problem: &Problem, rng: &mut ChaCha8Rng) -> Result<StepStats> {
    let k = state.iteration;
    let cfg = &state.config;
    let (b, d) = (cfg.batch_size, cfg.dim());
    let x = problem.source.sample(b, rng);
    let y = problem.target.sample(b, rng);
    let t: Vec<f64> = (0..b).map(|_| problem.time.sample(rng)).collect();
    let z = normals(rng, b, d);
    let eta1 = normals(rng, b, d);
    let eta2 = normals(rng, b, d);
    let probes = draw_probes(rng, cfg.n_probes, b, d)?;

    let run = |state: &mut TrainState, rng: &mut ChaCha8Rng| -> Result<StepStats> {
        let w = problem.weights;
        let y_hat = state.generator.forward_batch(&x, &z)?;
        let x_t = bridge_sample_batch(&x, &y_hat, &t, w.sigma, &eta1)?;
        let x_next = conditional_step_batch(&x_t, &y_hat, &t, problem.dt, w.sigma, &eta2)?;
        let vb = ValueBatch {
            t: t.clone(),
            dt: problem.dt,
            x_t,
            x_next,
            y_hat,
            y_real: y.clone(),
        };
        let (v_stats, v_grads) = value_loss_and_grads(&state.value, &vb, &problem.psi, &w, &probes)?;
        let lr_v = state.lr_v(k);
        let clip = state.config.grad_clip;
        apply(&mut state.opt_v, &mut state.value.net, v_grads, lr_v, clip);

        let mut loss_g = 0.0;
        let inner = state.config.inner_updates_per_outer;
        let lr_g = state.lr_g(k);
        for j in 0..inner {
            let batch = if j == 0 {
                GeneratorBatch {
                    x: x.clone(),
                    z: z.clone(),
                    t: t.clone(),
                    dt: problem.dt,
                    eta1: eta1.clone(),
                    eta2: eta2.clone(),
                }
            } else {
                GeneratorBatch {
                    x: problem.source.sample(b, rng),
                    z: normals(rng, b, d),
                    t: if state.config.resample_t_inner {
                        (0..b).map(|_| problem.time.sample(rng)).collect()
                    } else {
                        t.clone()
                    },
                    dt: problem.dt,
                    eta1: normals(rng, b, d),
                    eta2: normals(rng, b, d),
                }
            };
            let (g_stats, g_grads) = generator_loss_and_grads(&state.generator, &state.value, &batch, &w, &probes)?;
            loss_g += g_stats.loss / inner as f64;
            apply(&mut state.opt_g, &mut state.generator.net, g_grads, lr_g, clip);
        }
        if !state.generator.net.all_finite() || !state.value.net.all_finite() {
            return Err(Error::NonFiniteLoss {
                what: "parameters after update",
                iteration: k,
            });
        }
        Ok(StepStats {
            loss_v: v_stats.loss,
            loss_g,
            mean_abs_r: v_stats.mean_abs_r,
        })
    };
    let stats = run(state, rng).map_err(|e| with_iteration(e, k))?;
    state.iteration += 1;
    Ok(stats)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub iter: u64,
    pub loss_v: f64,
    pub loss_g: f64,
    pub mean_abs_r: f64,
    pub lr_g: f64,
    pub lr_v: f64,
    pub metric_name: String,
    pub metric_value: f64,
    pub wall_ms: u64,
}

pub const REPORT_HEADER: &str = "iter,loss_v,loss_g,mean_abs_R,lr_g,lr_v,metric_name,metric_value,wall_ms";

impl ReportRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.iter,
            self.loss_v,
            self.loss_g,
            self.mean_abs_r,
            self.lr_g,
            self.lr_v,
            self.metric_name,
            self.metric_value,
            self.wall_ms
        )
    }
}

/// Interval records; losses are averaged over the iterations since the
/// previous record.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub rows: Vec<ReportRow>,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(REPORT_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.csv_line());
            s.push('\n');
        }
        s
    }

    /// The CSV without the wall-clock column, for run-to-run comparisons.
    pub fn without_timing(&self) -> Vec<ReportRow> {
        self.rows
            .iter()
            .map(|r| ReportRow {
                wall_ms: 0,
                ..r.clone()
            })
            .collect()
    }
}

/// Fixed evaluation inputs: source points and auxiliary noise.
pub fn eval_inputs(config: &TrainConfig, problem: &Problem, n: usize) -> (Matrix, Matrix) {
    let mut rng = iteration_rng(config.seed, EVAL_STREAM);
    let x = problem.source.sample(n, &mut rng);
    let z = normals(&mut rng, n, config.dim());
    (x, z)
}

/// Metrics of the generator on fixed inputs: transport cost always, moment
/// errors when the Gaussian ground truth exists, mode coverage for
/// multimodal targets.
pub fn model_metrics(gen: &Generator, problem: &Problem, x: &Matrix, z: &Matrix) -> Result<Vec<(String, f64)>> {
    let tx = gen.forward_batch(x, z)?;
    let mut out = vec![("transport_cost".to_string(), transport_cost(x, &tx)?)];
    if let Some(truth) = &problem.truth {
        if x.rows() >= crate::eval::MIN_MOMENT_PAIRS {
            let e = relative_moment_errors(x, &tx, truth)?;
            if let Some(dm) = e.dm_rel {
                out.push(("dm_rel".into(), dm));
            }
            out.push(("dvar_rel".into(), e.dvar_rel));
            out.push(("dcov_rel".into(), e.dcov_rel));
        }
    }
    if let Some(modes) = &problem.modes {
        out.push(("mode_coverage".into(), mode_coverage(&tx, modes, COVERAGE_RADIUS)?));
    }
    Ok(out)
}

/// Trains from `state.iteration` up to `config.total_iters`, appending
/// interval rows to `report`. On error the state and report hold everything
/// up to the failing iteration.
pub fn train_until(
    state: &mut TrainState,
    problem: &Problem,
    report: &mut TrainReport,
    mut on_interval: impl FnMut(&TrainState, &[ReportRow]),
) -> Result<()> {
    let start = Instant::now();
    let total = state.config.total_iters;
    let every = state.config.eval_interval();
    let (ex, ez) = eval_inputs(&state.config, problem, state.config.eval_samples);
    let mut acc = (0.0, 0.0, 0.0, 0u64);
    while state.iteration < total {
        let k = state.iteration;
        let mut rng = iteration_rng(state.config.seed, k + 1);
        let s = train_step(state, problem, &mut rng)?;
        acc = (acc.0 + s.loss_v, acc.1 + s.loss_g, acc.2 + s.mean_abs_r, acc.3 + 1);
        let done = state.iteration;
        if done % every == 0 || done == total {
            let n = acc.3 as f64;
            let metrics = model_metrics(&state.generator, problem, &ex, &ez)?;
            let wall_ms = start.elapsed().as_millis() as u64;
            let first = report.rows.len();
            for (name, value) in metrics {
                report.rows.push(ReportRow {
                    iter: done,
                    loss_v: acc.0 / n,
                    loss_g: acc.1 / n,
                    mean_abs_r: acc.2 / n,
                    lr_g: state.lr_g(k),
                    lr_v: state.lr_v(k),
                    metric_name: name,
                    metric_value: value,
                    wall_ms,
                });
            }
            on_interval(state, &report.rows[first..]);
            acc = (0.0, 0.0, 0.0, 0);
        }
    }
    Ok(())
}

/// Fresh state trained for the configured number of iterations.
pub fn train(config: TrainConfig) -> Result<(TrainState, TrainReport)> {
    let problem = Problem::new(&config)?;
    let mut state = TrainState::new(config)?;
    let mut report = TrainReport::default();
    train_until(&mut state, &problem, &mut report, |_, _| {})?;
    Ok((state, report))
}

#[derive(Debug, Serialize, Deserialize)]
struct StateSidecar {
    config: TrainConfig,
    iteration: u64,
    adam_steps_g: u64,
    adam_steps_v: u64,
}

fn moments_as_net(tensors: &[Matrix]) -> Result<NetworkParams> {
    let weights = tensors.iter().step_by(2).cloned().collect();
    let biases = tensors.iter().skip(1).step_by(2).cloned().collect();
    NetworkParams::from_parts(weights, biases)
}

fn net_as_moments(net: NetworkParams) -> Vec<Matrix> {
    net.tensors().into_iter().cloned().collect()
}

/// Writes networks, optimizer moments and the config sidecar into `dir`.
pub fn save_state(dir: &Path, state: &TrainState) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_networks(&dir.join(MODEL_FILE), &[&state.generator.net, &state.value.net])?;
    let (mg, vg) = state.opt_g.moments();
    let (mv, vv) = state.opt_v.moments();
    save_networks(
        &dir.join(OPTIMIZER_FILE),
        &[
            &moments_as_net(mg)?,
            &moments_as_net(vg)?,
            &moments_as_net(mv)?,
            &moments_as_net(vv)?,
        ],
    )?;
    let side = StateSidecar {
        config: state.config.clone(),
        iteration: state.iteration,
        adam_steps_g: state.opt_g.steps(),
        adam_steps_v: state.opt_v.steps(),
    };
    let json = serde_json::to_string_pretty(&side).expect("config serializes");
    write_atomic(&dir.join(STATE_FILE), json.as_bytes())
}

fn checkpoint_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Reads only the networks of a checkpoint directory.
pub fn load_networks_from(dir: &Path) -> Result<(Generator, ValueNetwork)> {
    let path = dir.join(MODEL_FILE);
    let mut nets = load_networks(&path)?;
    if nets.len() != 2 {
        return Err(checkpoint_err(
            &path,
            format!("expected 2 networks, found {}", nets.len()),
        ));
    }
    let value = ValueNetwork::from_params(nets.pop().unwrap())?;
    let generator = Generator::from_params(nets.pop().unwrap())?;
    Ok((generator, value))
}

pub fn load_state(dir: &Path) -> Result<TrainState> {
    let side_path = dir.join(STATE_FILE);
    let text = fs::read_to_string(&side_path).map_err(|e| Error::io(&side_path, e))?;
    let side: StateSidecar = serde_json::from_str(&text).map_err(|e| checkpoint_err(&side_path, e.to_string()))?;
    side.config.validate()?;
    let (generator, value) = load_networks_from(dir)?;
    let opt_path = dir.join(OPTIMIZER_FILE);
    let opt = load_networks(&opt_path)?;
    if opt.len() != 4 {
        return Err(checkpoint_err(&opt_path, "expected 4 moment tensors sets"));
    }
    let mut it = opt.into_iter().map(net_as_moments);
    let (mg, vg, mv, vv) = (
        it.next().unwrap(),
        it.next().unwrap(),
        it.next().unwrap(),
        it.next().unwrap(),
    );
    let mut opt_g = Adam::new(&generator.net, side.config.betas)?;
    opt_g
        .restore(side.adam_steps_g, mg, vg)
        .map_err(|e| checkpoint_err(&opt_path, e.to_string()))?;
    let mut opt_v = Adam::new(&value.net, side.config.betas)?;
    opt_v
        .restore(side.adam_steps_v, mv, vv)
        .map_err(|e| checkpoint_err(&opt_path, e.to_string()))?;
    Ok(TrainState {
        config: side.config,
        generator,
        value,
        opt_g,
        opt_v,
        iteration: side.iteration,
    })
}
