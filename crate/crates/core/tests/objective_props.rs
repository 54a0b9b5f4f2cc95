use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sfeuot::autodiff::{Graph, Var};
use sfeuot::entropy::EntropySpec;
use sfeuot::nets::{rademacher, ValueNetwork};
use sfeuot::objective::{hjb_residual_batch, residual_graph, value_loss, LossWeights, ValueBatch, ValueField};
use sfeuot::Matrix;

fn normals(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Matrix {
    Matrix::from_fn(n, d, |_, _| rng.sample(StandardNormal))
}

fn weights(p: f64) -> LossWeights {
    LossWeights {
        alpha: 1.0,
        sigma: 0.8,
        lambda_g: 0.1,
        lambda_d: 1.0,
        p,
        r1_coeff: 0.0,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn indicator_loss_ignores_constant_shift(seed in any::<u64>(), shift in -50.0f64..50.0, p in 1.0f64..=2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 2;
        let n = 6;
        let v = ValueNetwork::new(d, &[8, 8], &mut rng).unwrap();
        let mut shifted = v.clone();
        let last = shifted.net.n_layers() - 1;
        let b = shifted.net.biases()[last].item();
        shifted.net.biases_mut()[last] = Matrix::scalar(b + shift);
        let t: Vec<f64> = (0..n).map(|_| rng.random_range(0..10) as f64 * 0.1).collect();
        let x_t = normals(&mut rng, n, d);
        let batch = ValueBatch {
            t,
            dt: 0.1,
            x_next: x_t.add(&normals(&mut rng, n, d).scale(0.1)),
            x_t,
            y_hat: normals(&mut rng, n, d),
            y_real: normals(&mut rng, n, d),
        };
        let probes = vec![rademacher(&mut rng, n, d)];
        let w = weights(p);
        let a = value_loss(&v, &batch, &EntropySpec::Indicator, &w, &probes).unwrap();
        let b = value_loss(&shifted, &batch, &EntropySpec::Indicator, &w, &probes).unwrap();
        let scale = 1.0 + shift.abs() / batch.dt;
        prop_assert!((a - b).abs() <= 1e-11 * scale * (1.0 + a.abs()), "{} vs {}", a, b);
    }
}

/// `v(t, x) = t²·Σx + ½‖x‖²`.
struct Analytic;

impl ValueField for Analytic {
    fn eval(&self, g: &mut Graph, t: &Matrix, x: Var) -> Var {
        let t2 = g.constant(t.map(|s| s * s));
        let sx = g.sum_cols(x);
        let a = g.mul(sx, t2);
        let sq = g.row_dot(x, x);
        let b = g.scale(sq, 0.5);
        g.add(a, b)
    }
}

/// `|R − d/ds v(s, x(s))|` along the straight path toward `y`, σ = 0, α ≈ 0.
fn euler_gap(t: f64, dt: f64, x: &[f64], y: &[f64]) -> f64 {
    let d = x.len();
    let u: Vec<f64> = x.iter().zip(y).map(|(a, b)| (b - a) / (1.0 - t)).collect();
    let next: Vec<f64> = x.iter().zip(&u).map(|(a, u)| a + dt * u).collect();
    let mut g = Graph::new();
    let xa = g.constant(Matrix::from_vec(1, d, x.to_vec()));
    let xb = g.constant(Matrix::from_vec(1, d, next));
    let w = LossWeights {
        alpha: 1e-300,
        sigma: 1e-300,
        ..weights(2.0)
    };
    let probes = vec![Matrix::filled(1, d, 1.0)];
    let nodes = residual_graph(&mut g, &Analytic, &[t], xa, xb, dt, &w, &probes);
    let r = g.value(nodes.r).item();
    let sx: f64 = x.iter().sum();
    let su: f64 = u.iter().sum();
    let xu: f64 = x.iter().zip(&u).map(|(a, b)| a * b).sum();
    let material = 2.0 * t * sx + t * t * su + xu;
    (r - material).abs()
}

#[test]
fn residual_is_first_order_consistent() {
    let x = [0.7, -1.2, 2.0];
    let y = [-1.0, 0.5, 3.5];
    for t in [0.0, 0.3, 0.6] {
        let coarse = euler_gap(t, 0.02, &x, &y);
        let fine = euler_gap(t, 0.01, &x, &y);
        assert!(coarse > 0.0);
        let ratio = fine / coarse;
        assert!((ratio - 0.5).abs() < 0.05, "t = {t}: ratio {ratio}");
    }
}

#[test]
fn residual_cache_is_consistent() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let v = ValueNetwork::new(2, &[8], &mut rng).unwrap();
    let n = 5;
    let t = vec![0.2; n];
    let x_t = normals(&mut rng, n, 2);
    let x_next = normals(&mut rng, n, 2);
    let probes = vec![rademacher(&mut rng, n, 2)];
    let w = weights(1.0);
    let c = hjb_residual_batch(&v, &t, &x_t, &x_next, 0.1, &w, &probes).unwrap();
    for i in 0..n {
        let g2 = c.grad.row(i).iter().map(|g| g * g).sum::<f64>();
        let r = (c.v_next[i] - c.v_t[i]) / 0.1 - 0.5 * w.alpha * g2 + 0.5 * w.sigma.powi(2) * c.laplacian[i];
        assert!((r - c.r[i]).abs() < 1e-10);
        assert!((c.v_t[i] - v.value(0.2, x_t.row(i)).unwrap()).abs() < 1e-14);
    }
}
