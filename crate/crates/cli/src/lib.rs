//! Commands behind the `sfeuot` binary: training, evaluation, oracle runs
//! and gradient checks, each writing CSV artifacts plus a run manifest.

pub mod manifest;
pub mod plot;

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use sfeuot::entropy::EntropySpec;
use sfeuot::eval::{
    conditional_plan_pairs, coupling_energy_distance, energy_null_quantile, mode_coverage, mode_frequencies,
    relative_moment_errors, transport_cost, MetricsRecord, MIN_MOMENT_PAIRS,
};
use sfeuot::gradcheck::{run_gradcheck, GradcheckConfig, GradcheckReport};
use sfeuot::oracles::{
    brute_force_tiny, gaussian_eot_coupling, seeded_instance, sinkhorn, squared_cost, BruteOptions, DiscreteCoupling,
    Relaxation, SinkhornOptions,
};
use sfeuot::train::{
    load_networks_from, load_state, save_state, train_until, Problem, ReportRow, TrainConfig, TrainReport, TrainState,
    COVERAGE_RADIUS, REPORT_HEADER,
};
use sfeuot::{Error, Matrix};
use thiserror::Error as ThisError;

use manifest::{write_file, RunManifest, MANIFEST_FILE};

pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const REPORT_FILE: &str = "report.csv";
pub const ERROR_FILE: &str = "error.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SCATTER_CSV: &str = "scatter.csv";
pub const SCATTER_SVG: &str = "scatter.svg";
pub const COUPLING_FILE: &str = "coupling.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const GRADCHECK_FILE: &str = "gradcheck.csv";

/// Stream of the evaluation draws, disjoint from training iterations.
const EVAL_CLI_STREAM: u64 = u64::MAX - 1;

#[derive(Debug, ThisError)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    /// 1 for usage and input errors, 2 for numeric failures.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Numeric(_) => 2,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::NumericLayer { .. }
            | Error::NonFiniteLoss { .. }
            | Error::NotConverged { .. }
            | Error::Domain { .. } => CliError::Numeric(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

/// Flags shared by every command.
#[derive(Debug, Clone, Default)]
pub struct Common {
    /// Overrides the seed of the config document.
    pub seed: Option<u64>,
    /// 0 selects the single-threaded reference mode.
    pub threads: usize,
    /// The command line, recorded in the manifest.
    pub args: Vec<String>,
}

impl Common {
    fn announce_threads(&self) {
        if self.threads > 1 {
            eprintln!(
                "note: only the single-threaded reference mode is implemented; ignoring --threads {}",
                self.threads
            );
        }
    }
}

fn normals(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Usage(format!("cannot create {}: {e}", dir.display())))
}

pub fn read_config(path: &Path, seed: Option<u64>) -> CliResult<TrainConfig> {
    let text =
        fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let mut config: TrainConfig =
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))?;
    if let Some(s) = seed {
        config.seed = s;
    }
    config.validate()?;
    Ok(config)
}

fn to_value<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("config serializes")
}

fn report_csv(rows: &[ReportRow]) -> String {
    let mut s = String::from(REPORT_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_line());
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub report: TrainReport,
    pub checkpoint: PathBuf,
}

/// Trains from `config_path` (or continues the checkpoint in `resume`) and
/// writes `checkpoint/`, `report.csv` and `manifest.json` under `out`.
/// With `progress`, interval rows are echoed to stderr.
pub fn cmd_train(
    config_path: &Path,
    out: &Path,
    resume: Option<&Path>,
    progress: bool,
    common: &Common,
) -> CliResult<TrainOutcome> {
    common.announce_threads();
    let config = read_config(config_path, common.seed)?;
    let manifest = RunManifest::start("train", &common.args, to_value(&config));
    create_dir(out)?;
    let problem = Problem::new(&config)?;
    let mut state = match resume {
        Some(dir) => {
            let mut s = load_state(dir)?;
            let same_nets = s.config.dim() == config.dim()
                && s.config.generator_hidden == config.generator_hidden
                && s.config.value_hidden == config.value_hidden
                && s.config.betas == config.betas;
            if !same_nets {
                return Err(CliError::Usage(format!(
                    "checkpoint {} does not match the network shapes of {}",
                    dir.display(),
                    config_path.display()
                )));
            }
            s.config = config.clone();
            s
        }
        None => TrainState::new(config.clone())?,
    };
    let ckpt = out.join(CHECKPOINT_DIR);
    let report_path = out.join(REPORT_FILE);
    let mut report = TrainReport::default();
    let mut io_error = None;
    let mut so_far = Vec::new();
    let result = train_until(&mut state, &problem, &mut report, |s, rows| {
        if progress {
            for r in rows {
                eprintln!(
                    "iter {} loss_v {:.6} loss_g {:.6} |R| {:.6} {} {}",
                    r.iter, r.loss_v, r.loss_g, r.mean_abs_r, r.metric_name, r.metric_value
                );
            }
        }
        so_far.extend_from_slice(rows);
        if let Err(e) = save_state(&ckpt, s) {
            io_error.get_or_insert(e.into());
        }
        if let Err(e) = write_file(&report_path, &report_csv(&so_far)) {
            io_error.get_or_insert(e);
        }
    });
    write_file(&report_path, &report_csv(&report.rows))?;
    if let Some(e) = io_error {
        return Err(e);
    }
    if let Err(e) = result {
        let err = CliError::from(e);
        write_file(&out.join(ERROR_FILE), &format!("{err}\n"))?;
        manifest.finish(out, &[REPORT_FILE, ERROR_FILE, MANIFEST_FILE])?;
        return Err(err);
    }
    save_state(&ckpt, &state)?;
    manifest.finish(out, &[CHECKPOINT_DIR, REPORT_FILE, MANIFEST_FILE])?;
    Ok(TrainOutcome {
        state,
        report,
        checkpoint: ckpt,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    /// Generated pairs, and oracle pairs for the energy distance.
    pub samples: usize,
    /// Target atoms of the discrete oracle; 0 disables the oracle comparison.
    pub oracle_atoms: usize,
    pub permutations: usize,
    pub null_quantile: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            samples: 10_000,
            oracle_atoms: 2000,
            permutations: 50,
            null_quantile: 0.95,
        }
    }
}

/// Pairs from the reference plan: exact joint draws when the Gaussian truth
/// is known, otherwise one conditional draw per source atom of a balanced
/// Sinkhorn plan with `ε = σ²`.
pub fn oracle_pairs(
    config: &TrainConfig,
    problem: &Problem,
    n: usize,
    atoms: usize,
    rng: &mut ChaCha8Rng,
) -> CliResult<Option<(Matrix, Matrix)>> {
    if let Some(truth) = &problem.truth {
        return Ok(Some(truth.sample(n, rng)));
    }
    if config.psi != EntropySpec::Indicator || atoms == 0 {
        return Ok(None);
    }
    let xs = problem.source.sample(n, rng);
    let ys = problem.target.sample(atoms, rng);
    let cost = squared_cost(&xs, &ys);
    let a = vec![1.0 / n as f64; n];
    let b = vec![1.0 / atoms as f64; atoms];
    let opts = SinkhornOptions {
        max_iters: 20_000,
        tol: 1e-6,
    };
    let plan = sinkhorn(&cost, &a, &b, config.sigma * config.sigma, Relaxation::Balanced, opts)?;
    Ok(Some(conditional_plan_pairs(&plan, &xs, &ys, rng)))
}

fn record(name: impl Into<String>, value: f64, n: usize, seed: u64) -> MetricsRecord {
    MetricsRecord {
        name: name.into(),
        value,
        n_samples: n,
        seed,
    }
}

pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let mut s = String::from("name,value,n_samples,seed\n");
    for r in records {
        s.push_str(&format!("{},{},{},{}\n", r.name, r.value, r.n_samples, r.seed));
    }
    s
}

/// Evaluates a checkpoint on fresh draws and writes `metrics.csv`,
/// `scatter.csv`, `scatter.svg` and `manifest.json` under `out`.
pub fn cmd_eval(
    checkpoint: &Path,
    config_path: &Path,
    out: &Path,
    opts: &EvalOptions,
    common: &Common,
) -> CliResult<Vec<MetricsRecord>> {
    common.announce_threads();
    let config = read_config(config_path, common.seed)?;
    let mut doc = to_value(&config);
    doc["eval"] = serde_json::json!({
        "samples": opts.samples,
        "oracle_atoms": opts.oracle_atoms,
        "permutations": opts.permutations,
        "null_quantile": opts.null_quantile,
        "checkpoint": checkpoint.display().to_string(),
    });
    let manifest = RunManifest::start("eval", &common.args, doc);
    let (generator, value) = load_networks_from(checkpoint)?;
    let d = config.dim();
    if generator.dim() != d || value.dim() != d {
        return Err(CliError::Usage(format!(
            "checkpoint {} has dimension {} but the config has {d}",
            checkpoint.display(),
            generator.dim()
        )));
    }
    if opts.samples == 0 {
        return Err(CliError::Usage("--samples must be positive".into()));
    }
    create_dir(out)?;
    let problem = Problem::new(&config)?;
    let (n, seed) = (opts.samples, config.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(EVAL_CLI_STREAM);
    let x = problem.source.sample(n, &mut rng);
    let z = normals(&mut rng, n, d);
    let tx = generator.forward_batch(&x, &z)?;

    let mut records = vec![record("transport_cost", transport_cost(&x, &tx)?, n, seed)];
    if let Some(truth) = &problem.truth {
        if n >= MIN_MOMENT_PAIRS {
            let e = relative_moment_errors(&x, &tx, truth)?;
            if let Some(dm) = e.dm_rel {
                records.push(record("dm_rel", dm, n, seed));
            }
            records.push(record("dvar_rel", e.dvar_rel, n, seed));
            records.push(record("dcov_rel", e.dcov_rel, n, seed));
        }
    }
    if let Some(modes) = &problem.modes {
        records.push(record(
            "mode_coverage",
            mode_coverage(&tx, modes, COVERAGE_RADIUS)?,
            n,
            seed,
        ));
        let reference = problem.target.sample(n, &mut rng);
        for (k, f) in mode_frequencies(&tx, modes).into_iter().enumerate() {
            records.push(record(format!("mode_freq_{k}"), f, n, seed));
        }
        for (k, f) in mode_frequencies(&reference, modes).into_iter().enumerate() {
            records.push(record(format!("target_mode_freq_{k}"), f, n, seed));
        }
    }
    if let Some((ox, oy)) = oracle_pairs(&config, &problem, n, opts.oracle_atoms, &mut rng)? {
        let e = coupling_energy_distance(&x, &tx, &ox, &oy)?;
        let null = energy_null_quantile(
            &x.hconcat(&tx),
            &ox.hconcat(&oy),
            opts.permutations,
            opts.null_quantile,
            &mut rng,
        )?;
        records.push(record("energy_distance", e, n, seed));
        records.push(record("energy_null", null, n, seed));
        records.push(record("energy_ratio", e / null, n, seed));
    }
    write_file(&out.join(METRICS_FILE), &metrics_csv(&records))?;
    write_file(&out.join(SCATTER_CSV), &plot::pairs_csv(&x, &tx))?;
    write_file(&out.join(SCATTER_SVG), &plot::scatter_svg(&x, &tx))?;
    manifest.finish(out, &[METRICS_FILE, SCATTER_CSV, SCATTER_SVG, MANIFEST_FILE])?;
    Ok(records)
}

/// Inputs of the `oracle` command.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "oracle", rename_all = "snake_case")]
pub enum OracleRequest {
    /// Seeded `n × m` instance solved by log-domain Sinkhorn; semi-relaxed
    /// when `alpha_div` is set.
    Sinkhorn {
        n: usize,
        m: usize,
        seed: u64,
        epsilon: f64,
        alpha_div: Option<f64>,
    },
    /// Seeded instance solved by direct search, compared with Sinkhorn.
    Brute {
        n: usize,
        m: usize,
        seed: u64,
        epsilon: f64,
        alpha_div: Option<f64>,
    },
    /// Isotropic Gaussians `N(0, var0 I)` and `N(shift·1, var1 I)`.
    Gaussian {
        dim: usize,
        var0: f64,
        var1: f64,
        shift: f64,
        sigma2: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleSummary {
    pub lines: Vec<(String, f64)>,
}

impl OracleSummary {
    pub fn get(&self, key: &str) -> Option<f64> {
        self.lines.iter().find(|(k, _)| k == key).map(|(_, v)| *v)
    }

    fn csv(&self) -> String {
        let mut s = String::from("quantity,value\n");
        for (k, v) in &self.lines {
            s.push_str(&format!("{k},{v}\n"));
        }
        s
    }
}

fn relaxation(alpha_div: Option<f64>) -> Relaxation {
    match alpha_div {
        Some(alpha_div) => Relaxation::SemiRelaxedKl { alpha_div },
        None => Relaxation::Balanced,
    }
}

fn coupling_lines(c: &DiscreteCoupling) -> Vec<(String, f64)> {
    vec![
        ("objective".into(), c.objective),
        ("row_violation".into(), c.row_violation()),
        ("col_violation".into(), c.col_violation()),
        ("total_mass".into(), c.total_mass()),
        ("iterations".into(), c.iterations as f64),
    ]
}

/// Runs one oracle, prints its summary and writes `coupling.csv`,
/// `summary.csv` and `manifest.json` under `out`.
pub fn cmd_oracle(request: &OracleRequest, out: &Path, common: &Common) -> CliResult<OracleSummary> {
    common.announce_threads();
    let manifest = RunManifest::start("oracle", &common.args, to_value(request));
    let (coupling_csv, lines) = match *request {
        OracleRequest::Sinkhorn {
            n,
            m,
            seed,
            epsilon,
            alpha_div,
        } => {
            let (cost, a, b) = seeded_instance(n, m, seed);
            let c = sinkhorn(
                &cost,
                &a,
                &b,
                epsilon,
                relaxation(alpha_div),
                SinkhornOptions::default(),
            )?;
            (c.to_csv(), coupling_lines(&c))
        }
        OracleRequest::Brute {
            n,
            m,
            seed,
            epsilon,
            alpha_div,
        } => {
            let (cost, a, b) = seeded_instance(n, m, seed);
            let relax = relaxation(alpha_div);
            let brute = brute_force_tiny(&cost, &a, &b, epsilon, relax, BruteOptions::default())?;
            let sk = sinkhorn(&cost, &a, &b, epsilon, relax, SinkhornOptions::default())?;
            let mut lines = coupling_lines(&brute);
            lines.push(("sinkhorn_objective".into(), sk.objective));
            lines.push(("max_abs_diff_vs_sinkhorn".into(), brute.plan.max_abs_diff(&sk.plan)));
            (brute.to_csv(), lines)
        }
        OracleRequest::Gaussian {
            dim,
            var0,
            var1,
            shift,
            sigma2,
        } => {
            if dim == 0 {
                return Err(CliError::Usage("--dim must be positive".into()));
            }
            let zero = nalgebra::DVector::zeros(dim);
            let m1 = nalgebra::DVector::from_element(dim, shift);
            let eye = nalgebra::DMatrix::<f64>::identity(dim, dim);
            let g = gaussian_eot_coupling(&zero, &(&eye * var0), &m1, &(&eye * var1), sigma2)?;
            let mut s = String::from("row");
            for j in 0..2 * dim {
                s.push_str(&format!(",c{j}"));
            }
            s.push('\n');
            for i in 0..2 * dim {
                s.push_str(&i.to_string());
                for j in 0..2 * dim {
                    s.push_str(&format!(",{}", g.cov[(i, j)]));
                }
                s.push('\n');
            }
            let lines = vec![
                ("cross_cov_00".into(), g.cross_cov()[(0, 0)]),
                ("transport_cost".into(), g.transport_cost()),
                ("min_eigenvalue".into(), g.min_eigenvalue()),
            ];
            (s, lines)
        }
    };
    create_dir(out)?;
    let summary = OracleSummary { lines };
    for (k, v) in &summary.lines {
        println!("{k} = {v}");
    }
    write_file(&out.join(COUPLING_FILE), &coupling_csv)?;
    write_file(&out.join(SUMMARY_FILE), &summary.csv())?;
    manifest.finish(out, &[COUPLING_FILE, SUMMARY_FILE, MANIFEST_FILE])?;
    Ok(summary)
}

/// Runs the finite-difference suite and prints the worst relative error per
/// term; fails with a numeric error when any term exceeds the tolerance.
pub fn cmd_gradcheck(cfg: &GradcheckConfig, out: Option<&Path>, common: &Common) -> CliResult<GradcheckReport> {
    common.announce_threads();
    let doc = serde_json::json!({
        "seed": cfg.seed,
        "dim": cfg.dim,
        "hidden": cfg.hidden,
        "points": cfg.points,
        "batch": cfg.batch,
        "coords_per_point": cfg.coords_per_point,
        "step": cfg.step,
        "tolerance": cfg.tolerance,
        "corrupt": cfg.corrupt,
    });
    let manifest = RunManifest::start("gradcheck", &common.args, doc);
    let report = run_gradcheck(cfg)?;
    let mut csv = String::from("term,points,comparisons,worst_rel,pass\n");
    for t in &report.terms {
        let pass = t.worst_rel <= report.tolerance;
        println!(
            "{:<24} points {:>3}  worst rel {:.3e}  {}",
            t.term,
            t.points,
            t.worst_rel,
            if pass { "ok" } else { "FAIL" }
        );
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            t.term, t.points, t.comparisons, t.worst_rel, pass
        ));
    }
    if let Some(dir) = out {
        create_dir(dir)?;
        write_file(&dir.join(GRADCHECK_FILE), &csv)?;
        manifest.finish(dir, &[GRADCHECK_FILE, MANIFEST_FILE])?;
    }
    if !report.passed() {
        return Err(CliError::Numeric(format!(
            "gradient check failed: worst relative error {:.3e} exceeds {:.1e}",
            report.worst(),
            report.tolerance
        )));
    }
    Ok(report)
}
