//! Small fully connected networks: the stochastic generator `T(x, z)` and the
//! time-conditioned value function `v(t, x)`.
//!
//! Hidden layers use SiLU, the output layer is affine. Weights are stored
//! `in × out` so a batch (one sample per row) is propagated as `H·W + b`.
//! Besides plain batched forward passes, every network can be placed on an
//! autodiff [`Graph`] for the parameter and input derivatives the training
//! losses need.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::autodiff::{silu, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Output-layer scale for a fresh generator, so `T(x, z) ≈ x` at start.
pub const GENERATOR_OUTPUT_SCALE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    layer_dims: Vec<usize>,
    weights: Vec<Matrix>,
    biases: Vec<Matrix>,
}

/// Gradients aligned with [`NetworkParams::tensors`]: `[W₀, b₀, W₁, b₁, …]`.
pub type ParamGrads = Vec<Matrix>;

impl NetworkParams {
    pub fn zeros(layer_dims: &[usize]) -> Result<Self> {
        validate_dims(layer_dims)?;
        let weights = layer_dims.windows(2).map(|w| Matrix::zeros(w[0], w[1])).collect();
        let biases = layer_dims[1..].iter().map(|&d| Matrix::zeros(1, d)).collect();
        Ok(NetworkParams {
            layer_dims: layer_dims.to_vec(),
            weights,
            biases,
        })
    }

    /// Glorot-uniform weights, zero biases.
    pub fn xavier<R: Rng + ?Sized>(layer_dims: &[usize], rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(layer_dims)?;
        for w in &mut p.weights {
            let bound = (6.0 / (w.rows() + w.cols()) as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            for v in w.as_mut_slice() {
                *v = dist.sample(rng);
            }
        }
        Ok(p)
    }

    pub fn from_parts(weights: Vec<Matrix>, biases: Vec<Matrix>) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(Error::InvalidConfig(
                "network needs matching, non-empty weight and bias lists".into(),
            ));
        }
        let mut dims = vec![weights[0].rows()];
        for (i, (w, b)) in weights.iter().zip(&biases).enumerate() {
            if w.rows() != *dims.last().unwrap() {
                return Err(Error::DimensionMismatch {
                    context: "layer input",
                    expected: *dims.last().unwrap(),
                    got: w.rows(),
                });
            }
            if b.shape() != (1, w.cols()) {
                return Err(Error::DimensionMismatch {
                    context: "bias width",
                    expected: w.cols(),
                    got: b.len(),
                });
            }
            if !w.all_finite() || !b.all_finite() {
                return Err(Error::NumericLayer {
                    network: "parameters",
                    layer: i,
                });
            }
            dims.push(w.cols());
        }
        validate_dims(&dims)?;
        Ok(NetworkParams {
            layer_dims: dims,
            weights,
            biases,
        })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[Matrix] {
        &self.weights
    }

    pub fn biases(&self) -> &[Matrix] {
        &self.biases
    }

    pub fn weights_mut(&mut self) -> &mut [Matrix] {
        &mut self.weights
    }

    pub fn biases_mut(&mut self) -> &mut [Matrix] {
        &mut self.biases
    }

    pub fn tensors(&self) -> Vec<&Matrix> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors()
            .iter()
            .flat_map(|t| t.as_slice().iter().copied())
            .collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.n_params(), "flat parameter length");
        let mut off = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.as_mut_slice().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }

    pub fn zeros_like_grads(&self) -> ParamGrads {
        self.tensors()
            .iter()
            .map(|t| Matrix::zeros(t.rows(), t.cols()))
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.all_finite())
    }

    /// Batched forward pass. Fails with the index of the first layer whose
    /// output is not finite.
    pub fn forward(&self, input: &Matrix, network: &'static str) -> Result<Matrix> {
        if input.cols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                context: network,
                expected: self.input_dim(),
                got: input.cols(),
            });
        }
        let last = self.n_layers() - 1;
        let mut h = input.clone();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            h = h.matmul(w).add_row(b);
            if l < last {
                h = h.map(silu);
            }
            if !h.all_finite() {
                return Err(Error::NumericLayer { network, layer: l });
            }
        }
        Ok(h)
    }

    /// Places the parameters on `g` as leaves.
    pub fn register(&self, g: &mut Graph, tracked: bool) -> NetVars {
        NetVars {
            tensors: self.tensors().into_iter().map(|t| g.leaf(t.clone(), tracked)).collect(),
        }
    }
}

fn validate_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 || dims.contains(&0) {
        return Err(Error::InvalidConfig(format!(
            "layer dims must have at least two positive entries, got {dims:?}"
        )));
    }
    Ok(())
}

/// Graph handles for one network's parameters, in [`NetworkParams::tensors`]
/// order.
#[derive(Debug, Clone)]
pub struct NetVars {
    tensors: Vec<Var>,
}

impl NetVars {
    pub fn vars(&self) -> &[Var] {
        &self.tensors
    }

    pub fn forward(&self, g: &mut Graph, input: Var) -> Var {
        let n_layers = self.tensors.len() / 2;
        let mut h = input;
        for l in 0..n_layers {
            let lin = g.matmul(h, self.tensors[2 * l]);
            h = g.add_row(lin, self.tensors[2 * l + 1]);
            if l + 1 < n_layers {
                h = g.silu(h);
            }
        }
        h
    }
}

/// `T(x, z) = x + net([x, z])` with `z` of the data dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub net: NetworkParams,
}

impl Generator {
    pub fn new<R: Rng + ?Sized>(dim: usize, hidden: &[usize], rng: &mut R) -> Result<Self> {
        let mut dims = vec![2 * dim];
        dims.extend_from_slice(hidden);
        dims.push(dim);
        let mut net = NetworkParams::xavier(&dims, rng)?;
        let last = net.n_layers() - 1;
        net.weights[last] = net.weights[last].scale(GENERATOR_OUTPUT_SCALE);
        Ok(Generator { net })
    }

    pub fn from_params(net: NetworkParams) -> Result<Self> {
        if net.input_dim() != 2 * net.output_dim() {
            return Err(Error::DimensionMismatch {
                context: "generator input (data + auxiliary)",
                expected: 2 * net.output_dim(),
                got: net.input_dim(),
            });
        }
        Ok(Generator { net })
    }

    pub fn dim(&self) -> usize {
        self.net.output_dim()
    }

    pub fn forward_batch(&self, x: &Matrix, z: &Matrix) -> Result<Matrix> {
        for (m, ctx) in [(x, "generator x"), (z, "generator z")] {
            if m.cols() != self.dim() {
                return Err(Error::DimensionMismatch {
                    context: ctx,
                    expected: self.dim(),
                    got: m.cols(),
                });
            }
        }
        let out = self.net.forward(&x.hconcat(z), "generator")?;
        Ok(x.add(&out))
    }

    pub fn forward(&self, x: &[f64], z: &[f64]) -> Result<Vec<f64>> {
        let xm = Matrix::from_vec(1, x.len(), x.to_vec());
        let zm = Matrix::from_vec(1, z.len(), z.to_vec());
        Ok(self.forward_batch(&xm, &zm)?.into_vec())
    }

    pub fn forward_graph(g: &mut Graph, vars: &NetVars, x: Var, z: Var) -> Var {
        let input = g.concat_cols(x, z);
        let out = vars.forward(g, input);
        g.add(x, out)
    }
}

pub fn generator_forward(gen: &Generator, x: &[f64], z: &[f64]) -> Result<Vec<f64>> {
    gen.forward(x, z)
}

/// `v(t, x) = net([t, x])`, scalar output. Time enters as the raw scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueNetwork {
    pub net: NetworkParams,
}

impl ValueNetwork {
    pub fn new<R: Rng + ?Sized>(dim: usize, hidden: &[usize], rng: &mut R) -> Result<Self> {
        let mut dims = vec![dim + 1];
        dims.extend_from_slice(hidden);
        dims.push(1);
        Ok(ValueNetwork {
            net: NetworkParams::xavier(&dims, rng)?,
        })
    }

    pub fn from_params(net: NetworkParams) -> Result<Self> {
        if net.output_dim() != 1 || net.input_dim() < 2 {
            return Err(Error::DimensionMismatch {
                context: "value network output",
                expected: 1,
                got: net.output_dim(),
            });
        }
        Ok(ValueNetwork { net })
    }

    pub fn dim(&self) -> usize {
        self.net.input_dim() - 1
    }

    fn check_x(&self, cols: usize) -> Result<()> {
        if cols != self.dim() {
            return Err(Error::DimensionMismatch {
                context: "value network x",
                expected: self.dim(),
                got: cols,
            });
        }
        Ok(())
    }

    fn check_batch(&self, t: &[f64], x: &Matrix) -> Result<()> {
        self.check_x(x.cols())?;
        if t.len() != x.rows() {
            return Err(Error::DimensionMismatch {
                context: "value network batch times",
                expected: x.rows(),
                got: t.len(),
            });
        }
        Ok(())
    }

    /// `n × 1` values at rows of `x` with per-row times.
    pub fn values(&self, t: &[f64], x: &Matrix) -> Result<Matrix> {
        self.check_batch(t, x)?;
        self.net.forward(&Matrix::column(t).hconcat(x), "value network")
    }

    pub fn value(&self, t: f64, x: &[f64]) -> Result<f64> {
        let xm = Matrix::from_vec(1, x.len(), x.to_vec());
        Ok(self.values(&[t], &xm)?.item())
    }

    /// Spatial gradients `∇ₓv(tᵢ, xᵢ)`, one row per sample.
    pub fn input_grad_batch(&self, t: &[f64], x: &Matrix) -> Result<Matrix> {
        self.check_batch(t, x)?;
        let mut g = Graph::new();
        let vars = self.net.register(&mut g, false);
        let xv = g.constant(x.clone());
        let (_, grad) = value_and_input_grad(&mut g, &vars, &Matrix::column(t), xv);
        let out = g.value(grad).clone();
        if !out.all_finite() {
            return Err(Error::NumericLayer {
                network: "value network input gradient",
                layer: self.net.n_layers(),
            });
        }
        Ok(out)
    }

    pub fn input_grad(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        let xm = Matrix::from_vec(1, x.len(), x.to_vec());
        Ok(self.input_grad_batch(&[t], &xm)?.into_vec())
    }

    /// Probe-averaged `ηᵀ∇ₓ(ηᵀ∇ₓv)` per row for the given probe matrices.
    pub fn hutchinson_batch(&self, t: &[f64], x: &Matrix, probes: &[Matrix]) -> Result<Matrix> {
        self.check_batch(t, x)?;
        let mut g = Graph::new();
        let vars = self.net.register(&mut g, false);
        let xv = g.constant(x.clone());
        let (_, grad) = value_and_input_grad(&mut g, &vars, &Matrix::column(t), xv);
        let lap = hutchinson_graph(&mut g, grad, xv, probes);
        let out = g.value(lap).clone();
        if !out.all_finite() {
            return Err(Error::NumericLayer {
                network: "value network laplacian",
                layer: self.net.n_layers(),
            });
        }
        Ok(out)
    }

    /// Hutchinson estimate of `tr ∇ₓ²v(t, x)` with `n_probes` Rademacher probes.
    pub fn laplacian_hutchinson<R: Rng + ?Sized>(
        &self,
        t: f64,
        x: &[f64],
        n_probes: usize,
        rng: &mut R,
    ) -> Result<f64> {
        if n_probes == 0 {
            return Err(Error::InvalidConfig("n_probes must be at least 1".into()));
        }
        let probes: Vec<Matrix> = (0..n_probes).map(|_| rademacher(rng, 1, x.len())).collect();
        let xm = Matrix::from_vec(1, x.len(), x.to_vec());
        Ok(self.hutchinson_batch(&[t], &xm, &probes)?.item())
    }
}

/// Builds `v(t, x)` on the graph; `t` is a constant column.
pub fn value_graph(g: &mut Graph, vars: &NetVars, t: &Matrix, x: Var) -> Var {
    let tv = g.constant(t.clone());
    let input = g.concat_cols(tv, x);
    vars.forward(g, input)
}

/// `(v, ∇ₓv)` on the graph. The gradient is itself differentiable.
pub fn value_and_input_grad(g: &mut Graph, vars: &NetVars, t: &Matrix, x: Var) -> (Var, Var) {
    let v = value_graph(g, vars, t, x);
    let total = g.sum(v);
    let grad = g.grad(total, &[x])[0];
    (v, grad)
}

/// Probe average of `ηᵀ∇ₓ(ηᵀ grad)` per row, where `grad = ∇ₓv` was built from `x`.
pub fn hutchinson_graph(g: &mut Graph, grad: Var, x: Var, probes: &[Matrix]) -> Var {
    assert!(!probes.is_empty(), "at least one probe");
    let mut acc: Option<Var> = None;
    for probe in probes {
        let eta = g.constant(probe.clone());
        let directional = g.row_dot(grad, eta);
        let total = g.sum(directional);
        let hvp = g.grad(total, &[x])[0];
        let quad = g.row_dot(hvp, eta);
        acc = Some(match acc {
            Some(a) => g.add(a, quad),
            None => quad,
        });
    }
    let sum = acc.unwrap();
    g.scale(sum, 1.0 / probes.len() as f64)
}

/// `rows × cols` matrix of independent ±1 entries.
pub fn rademacher<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| if rng.random::<bool>() { 1.0 } else { -1.0 })
}
