//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! Every node of a [`Graph`] holds its forward value. [`Graph::grad`] appends
//! the adjoint computation to the same tape, so the gradients it returns are
//! ordinary nodes that can be differentiated again. That is what the value
//! loss needs: `‖∇ₓv‖²` and the Hutchinson term `ηᵀ∇ₓ(ηᵀ∇ₓv)` are built from
//! first and second input-gradients and then differentiated once more with
//! respect to the network parameters.
//!
//! Elementwise maps registered through [`Graph::map`] are the exception: their
//! derivative is frozen at forward time, so they support exactly one level of
//! differentiation. They are only used for the outermost loss transforms
//! (`|R|^p`, `Ψ*`).

use std::collections::HashMap;

use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MulCol(Var, Var),
    /// `order`-th derivative of SiLU, applied elementwise.
    Silu {
        a: Var,
        order: usize,
    },
    SumRows(Var),
    SumCols(Var),
    SumAll(Var),
    BroadcastRows(Var),
    BroadcastCols(Var),
    BroadcastScalar(Var),
    ConcatCols(Var, Var),
    SliceCols {
        a: Var,
        start: usize,
    },
    PadCols {
        a: Var,
        start: usize,
    },
    Map {
        a: Var,
        deriv: Matrix,
    },
}

impl Op {
    fn parents(&self) -> [Option<Var>; 2] {
        use Op::*;
        match *self {
            Leaf => [None, None],
            MatMul { a, b, .. } | Add(a, b) | Sub(a, b) | Mul(a, b) | AddRow(a, b) | MulCol(a, b) => [Some(a), Some(b)],
            ConcatCols(a, b) => [Some(a), Some(b)],
            Scale(a, _)
            | Silu { a, .. }
            | SumRows(a)
            | SumCols(a)
            | SumAll(a)
            | BroadcastRows(a)
            | BroadcastCols(a)
            | BroadcastScalar(a)
            | SliceCols { a, .. }
            | PadCols { a, .. }
            | Map { a, .. } => [Some(a), None],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    tracked: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    derivative_bias: f64,
    sigmoids: HashMap<Var, Matrix>,
    silu_nodes: HashMap<(Var, usize), Var>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Debug hook: scales every SiLU derivative used in backward passes by
    /// `1 + bias`. Forward values are untouched, so finite-difference checks
    /// must flag the resulting gradients.
    pub fn corrupt_derivatives(&mut self, bias: f64) {
        self.derivative_bias = bias;
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        let tracked = op.parents().iter().flatten().any(|p| self.nodes[p.0].tracked);
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    /// A leaf. `tracked` leaves (parameters) propagate trackedness to every
    /// node computed from them.
    pub fn leaf(&mut self, value: Matrix, tracked: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Matrix) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.leaf(value, false)
    }

    /// Copy of `v` with no history.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let value = self.value(a).matmul_t(ta, self.value(b), tb);
        self.push(value, Op::MatMul { a, b, ta, tb })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).add(self.value(b));
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).sub(self.value(b));
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).hadamard(self.value(b));
        self.push(value, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        self.push(value, Op::Scale(a, s))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let value = self.value(a).add_row(self.value(row));
        self.push(value, Op::AddRow(a, row))
    }

    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let value = self.value(a).mul_col(self.value(col));
        self.push(value, Op::MulCol(a, col))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.silu_derivative(a, 0)
    }

    fn silu_derivative(&mut self, a: Var, order: usize) -> Var {
        if let Some(&v) = self.silu_nodes.get(&(a, order)) {
            return v;
        }
        let poly = SiluPoly::new(order);
        if !self.sigmoids.contains_key(&a) {
            let s = self.value(a).map(crate::entropy::sigmoid);
            self.sigmoids.insert(a, s);
        }
        let sig = &self.sigmoids[&a];
        let value = match order {
            0 => self.value(a).hadamard(sig),
            1..=4 => self.value(a).zip_map(sig, |u, s| silu_derivative_closed(order, u, s)),
            _ => self.value(a).zip_map(sig, |u, s| poly.eval_with(u, s)),
        };
        let v = self.push(value, Op::Silu { a, order });
        self.silu_nodes.insert((a, order), v);
        v
    }

    pub fn sum_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_rows();
        self.push(value, Op::SumRows(a))
    }

    pub fn sum_cols(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_cols();
        self.push(value, Op::SumCols(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        self.push(value, Op::SumAll(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    fn broadcast_rows(&mut self, a: Var, rows: usize) -> Var {
        let src = self.value(a);
        let value = Matrix::from_fn(rows, src.cols(), |_, c| src.get(0, c));
        self.push(value, Op::BroadcastRows(a))
    }

    fn broadcast_cols(&mut self, a: Var, cols: usize) -> Var {
        let src = self.value(a);
        let value = Matrix::from_fn(src.rows(), cols, |r, _| src.get(r, 0));
        self.push(value, Op::BroadcastCols(a))
    }

    fn broadcast_scalar(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let value = Matrix::filled(rows, cols, self.value(a).item());
        self.push(value, Op::BroadcastScalar(a))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).hconcat(self.value(b));
        self.push(value, Op::ConcatCols(a, b))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice_cols(start, len);
        self.push(value, Op::SliceCols { a, start })
    }

    fn pad_cols(&mut self, a: Var, start: usize, total: usize) -> Var {
        let value = self.value(a).pad_cols(start, total);
        self.push(value, Op::PadCols { a, start })
    }

    /// Elementwise `f` with derivative `df`. Differentiable once.
    pub fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, df: impl Fn(f64) -> f64) -> Var {
        let src = self.value(a);
        let value = src.map(&f);
        let deriv = src.map(&df);
        self.push(value, Op::Map { a, deriv })
    }

    /// Row-wise dot product of two `n × d` nodes, as an `n × 1` node.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let prod = self.mul(a, b);
        self.sum_cols(prod)
    }

    /// Gradients of the scalar `output` with respect to each of `wrt`.
    ///
    /// The adjoint computation is recorded on this graph, so the returned
    /// nodes can themselves be differentiated. Nodes of `wrt` that `output`
    /// does not depend on receive a zero gradient.
    pub fn grad(&mut self, output: Var, wrt: &[Var]) -> Vec<Var> {
        assert_eq!(self.shape(output), (1, 1), "grad() requires a scalar output");
        let n = output.0 + 1;
        // reach[i]: node i depends on some node in `wrt`.
        let mut reach = vec![false; n];
        for w in wrt {
            if w.0 < n {
                reach[w.0] = true;
            }
        }
        for i in 0..n {
            if !reach[i] && self.nodes[i].op.parents().iter().flatten().any(|p| reach[p.0]) {
                reach[i] = true;
            }
        }

        let mut adj: Vec<Option<Var>> = vec![None; n];
        if reach[output.0] {
            adj[output.0] = Some(self.constant(Matrix::scalar(1.0)));
        }
        for i in (0..n).rev() {
            let Some(g) = adj[i] else { continue };
            let op = self.nodes[i].op.clone();
            self.backprop_node(&op, g, &reach, &mut adj);
        }

        wrt.iter()
            .map(|w| match adj.get(w.0).copied().flatten() {
                Some(v) => v,
                None => {
                    let (r, c) = self.shape(*w);
                    self.constant(Matrix::zeros(r, c))
                }
            })
            .collect()
    }

    fn accumulate(&mut self, adj: &mut [Option<Var>], target: Var, contrib: Var) {
        adj[target.0] = Some(match adj[target.0] {
            Some(prev) => self.add(prev, contrib),
            None => contrib,
        });
    }

    fn backprop_node(&mut self, op: &Op, g: Var, reach: &[bool], adj: &mut [Option<Var>]) {
        use Op::*;
        let want = |v: Var| reach[v.0];
        match *op {
            Leaf => {}
            MatMul { a, b, ta, tb } => {
                if want(a) {
                    let da = if ta {
                        self.matmul_t(b, tb, g, true)
                    } else {
                        self.matmul_t(g, false, b, !tb)
                    };
                    self.accumulate(adj, a, da);
                }
                if want(b) {
                    let db = if tb {
                        self.matmul_t(g, true, a, ta)
                    } else {
                        self.matmul_t(a, !ta, g, false)
                    };
                    self.accumulate(adj, b, db);
                }
            }
            Add(a, b) => {
                if want(a) {
                    self.accumulate(adj, a, g);
                }
                if want(b) {
                    self.accumulate(adj, b, g);
                }
            }
            Sub(a, b) => {
                if want(a) {
                    self.accumulate(adj, a, g);
                }
                if want(b) {
                    let nb = self.scale(g, -1.0);
                    self.accumulate(adj, b, nb);
                }
            }
            Mul(a, b) => {
                if want(a) {
                    let da = self.mul(g, b);
                    self.accumulate(adj, a, da);
                }
                if want(b) {
                    let db = self.mul(g, a);
                    self.accumulate(adj, b, db);
                }
            }
            Scale(a, s) => {
                if want(a) {
                    let da = self.scale(g, s);
                    self.accumulate(adj, a, da);
                }
            }
            AddRow(a, row) => {
                if want(a) {
                    self.accumulate(adj, a, g);
                }
                if want(row) {
                    let dr = self.sum_rows(g);
                    self.accumulate(adj, row, dr);
                }
            }
            MulCol(a, col) => {
                if want(a) {
                    let da = self.mul_col(g, col);
                    self.accumulate(adj, a, da);
                }
                if want(col) {
                    let prod = self.mul(g, a);
                    let dc = self.sum_cols(prod);
                    self.accumulate(adj, col, dc);
                }
            }
            Silu { a, order } => {
                if want(a) {
                    let d = self.silu_derivative(a, order + 1);
                    let d = if self.derivative_bias != 0.0 {
                        self.scale(d, 1.0 + self.derivative_bias)
                    } else {
                        d
                    };
                    let da = self.mul(g, d);
                    self.accumulate(adj, a, da);
                }
            }
            SumRows(a) => {
                if want(a) {
                    let rows = self.shape(a).0;
                    let da = self.broadcast_rows(g, rows);
                    self.accumulate(adj, a, da);
                }
            }
            SumCols(a) => {
                if want(a) {
                    let cols = self.shape(a).1;
                    let da = self.broadcast_cols(g, cols);
                    self.accumulate(adj, a, da);
                }
            }
            SumAll(a) => {
                if want(a) {
                    let (r, c) = self.shape(a);
                    let da = self.broadcast_scalar(g, r, c);
                    self.accumulate(adj, a, da);
                }
            }
            BroadcastRows(a) => {
                if want(a) {
                    let da = self.sum_rows(g);
                    self.accumulate(adj, a, da);
                }
            }
            BroadcastCols(a) => {
                if want(a) {
                    let da = self.sum_cols(g);
                    self.accumulate(adj, a, da);
                }
            }
            BroadcastScalar(a) => {
                if want(a) {
                    let da = self.sum(g);
                    self.accumulate(adj, a, da);
                }
            }
            ConcatCols(a, b) => {
                let ca = self.shape(a).1;
                let cb = self.shape(b).1;
                if want(a) {
                    let da = self.slice_cols(g, 0, ca);
                    self.accumulate(adj, a, da);
                }
                if want(b) {
                    let db = self.slice_cols(g, ca, cb);
                    self.accumulate(adj, b, db);
                }
            }
            SliceCols { a, start } => {
                if want(a) {
                    let total = self.shape(a).1;
                    let da = self.pad_cols(g, start, total);
                    self.accumulate(adj, a, da);
                }
            }
            PadCols { a, start } => {
                if want(a) {
                    let len = self.shape(a).1;
                    let da = self.slice_cols(g, start, len);
                    self.accumulate(adj, a, da);
                }
            }
            Map { a, ref deriv } => {
                if want(a) {
                    let d = self.constant(deriv.clone());
                    let da = self.mul(g, d);
                    self.accumulate(adj, a, da);
                }
            }
        }
    }

    /// Consumes the graph and returns the gradient values of `output` with
    /// respect to `wrt`.
    pub fn into_gradients(mut self, output: Var, wrt: &[Var]) -> Vec<Matrix> {
        let grads = self.grad(output, wrt);
        let mut nodes = self.nodes;
        grads
            .into_iter()
            .map(|g| std::mem::replace(&mut nodes[g.0].value, Matrix::zeros(0, 0)))
            .collect()
    }
}

/// `d^k/du^k silu(u)` written as `P_k(s) + u·Q_k(s)` with `s = sigmoid(u)`.
///
/// Since `ds/du = s − s²`, the polynomials follow the recursion
/// `P_{k+1} = D P_k + Q_k`, `Q_{k+1} = D Q_k` with `D p = p'(s)·(s − s²)`.
const SILU_MAX_ORDER: usize = 6;
const SILU_COEFFS: usize = SILU_MAX_ORDER + 2;

#[derive(Debug, Clone)]
pub(crate) struct SiluPoly {
    p: [f64; SILU_COEFFS],
    q: [f64; SILU_COEFFS],
}

impl SiluPoly {
    pub(crate) fn new(order: usize) -> Self {
        assert!(order <= SILU_MAX_ORDER, "SiLU derivative order {order} unsupported");
        let mut p = [0.0; SILU_COEFFS];
        let mut q = [0.0; SILU_COEFFS];
        q[1] = 1.0;
        for _ in 0..order {
            let dq = Self::d(&q);
            let mut np = Self::d(&p);
            for (a, b) in np.iter_mut().zip(&q) {
                *a += b;
            }
            p = np;
            q = dq;
        }
        SiluPoly { p, q }
    }

    fn d(poly: &[f64; SILU_COEFFS]) -> [f64; SILU_COEFFS] {
        // p'(s) * (s - s^2)
        let mut out = [0.0; SILU_COEFFS];
        for k in 1..SILU_COEFFS - 1 {
            let kc = k as f64 * poly[k];
            out[k] += kc;
            out[k + 1] -= kc;
        }
        out
    }

    #[inline]
    fn horner(poly: &[f64; SILU_COEFFS], s: f64) -> f64 {
        poly.iter().rev().fold(0.0, |acc, &c| acc * s + c)
    }

    #[cfg(test)]
    pub(crate) fn eval(&self, u: f64) -> f64 {
        self.eval_with(u, crate::entropy::sigmoid(u))
    }

    #[inline]
    pub(crate) fn eval_with(&self, u: f64, s: f64) -> f64 {
        Self::horner(&self.p, s) + u * Self::horner(&self.q, s)
    }
}

/// Orders 1 to 4 in terms of `s = sigmoid(u)` and `t = s(1 − s)`.
#[inline]
fn silu_derivative_closed(order: usize, u: f64, s: f64) -> f64 {
    let t = s * (1.0 - s);
    let c = 1.0 - 2.0 * s;
    match order {
        1 => s + u * t,
        2 => t * (2.0 + u * c),
        3 => t * (3.0 * c + u * (1.0 - 6.0 * t)),
        4 => t * (4.0 * (1.0 - 6.0 * t) + u * c * (1.0 - 12.0 * t)),
        _ => unreachable!(),
    }
}

pub fn silu(u: f64) -> f64 {
    u * crate::entropy::sigmoid(u)
}
