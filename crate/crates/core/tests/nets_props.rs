use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sfeuot::autodiff::Graph;
use sfeuot::nets::{hutchinson_graph, rademacher, value_graph, NetworkParams, ValueNetwork};
use sfeuot::Matrix;

/// Per-row Hutchinson estimates for `v = ½ xᵀAx`, one probe per row.
fn quadratic_estimates(a: &Matrix, rows: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let d = a.rows();
    let mut g = Graph::new();
    let x = g.constant(Matrix::from_fn(rows, d, |_, _| rng.sample(StandardNormal)));
    let av = g.constant(a.clone());
    let ax = g.matmul(x, av);
    let quad = g.row_dot(x, ax);
    let v = g.scale(quad, 0.5);
    let total = g.sum(v);
    let grad = g.grad(total, &[x])[0];
    let probes = vec![rademacher(rng, rows, d)];
    let est = hutchinson_graph(&mut g, grad, x, &probes);
    g.value(est).as_slice().to_vec()
}

#[test]
fn diag_one_three_trace_is_four() {
    let a = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 3.0]]);
    let est = quadratic_estimates(&a, 10_000, &mut ChaCha8Rng::seed_from_u64(3));
    let mean = est.iter().sum::<f64>() / est.len() as f64;
    let var = est.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (est.len() - 1) as f64;
    let se = (var / est.len() as f64).sqrt();
    assert!((mean - 4.0).abs() <= 3.0 * se + 1e-12, "{mean} ± {se}");
    // Rademacher probes are exact on diagonal Hessians.
    assert!(est.iter().all(|e| (e - 4.0).abs() < 1e-12));
}

#[test]
fn identity_hessian_gives_dimension_for_every_probe() {
    for d in [1, 3, 7] {
        let a = Matrix::from_fn(d, d, |i, j| if i == j { 1.0 } else { 0.0 });
        let est = quadratic_estimates(&a, 50, &mut ChaCha8Rng::seed_from_u64(d as u64));
        assert!(est.iter().all(|e| (e - d as f64).abs() < 1e-12));
    }
}

#[test]
fn linear_field_has_zero_laplacian() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut g = Graph::new();
    let x = g.constant(Matrix::from_fn(20, 4, |_, _| rng.sample(StandardNormal)));
    let c = g.constant(Matrix::column(&[1.0, -2.0, 0.5, 3.0]));
    let v = g.matmul(x, c);
    let total = g.sum(v);
    let grad = g.grad(total, &[x])[0];
    let probes = vec![rademacher(&mut rng, 20, 4)];
    let est = hutchinson_graph(&mut g, grad, x, &probes);
    assert!(g.value(est).as_slice().iter().all(|&e| e == 0.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn hutchinson_is_unbiased_on_random_quadratics(d in 1usize..=16, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = Matrix::from_fn(d, d, |_, _| rng.sample(StandardNormal));
        let a = b.add(&b.transpose()).scale(0.5);
        let trace: f64 = (0..d).map(|i| a.get(i, i)).sum();
        let k = 4000;
        let est = quadratic_estimates(&a, k, &mut rng);
        let mean = est.iter().sum::<f64>() / k as f64;
        let var = est.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (k - 1) as f64;
        let se = (var / k as f64).sqrt();
        prop_assert!((mean - trace).abs() <= 4.0 * se + 1e-9, "{} vs {} (se {})", mean, trace, se);
    }

    #[test]
    fn input_gradient_matches_finite_differences(seed in any::<u64>(), d in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = ValueNetwork::new(d, &[7], &mut rng).unwrap();
        for _ in 0..5 {
            let t: f64 = rng.random();
            let x: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let grad = v.input_grad(t, &x).unwrap();
            for i in 0..d {
                let h = 1e-5;
                let mut xp = x.clone();
                xp[i] += h;
                let mut xm = x.clone();
                xm[i] -= h;
                let fd = (v.value(t, &xp).unwrap() - v.value(t, &xm).unwrap()) / (2.0 * h);
                let rel = (grad[i] - fd).abs() / grad[i].abs().max(fd.abs()).max(1e-6);
                prop_assert!(rel <= 1e-4, "rel {}", rel);
            }
        }
    }

    #[test]
    fn single_linear_layer_weight_gradient_is_input(
        t in 0.0f64..1.0,
        x in prop::collection::vec(-5.0f64..5.0, 1..6),
        seed in any::<u64>(),
    ) {
        let d = x.len();
        let net = NetworkParams::xavier(&[d + 1, 1], &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let mut g = Graph::new();
        let vars = net.register(&mut g, true);
        let xv = g.constant(Matrix::from_vec(1, d, x.clone()));
        let v = value_graph(&mut g, &vars, &Matrix::scalar(t), xv);
        let loss = g.sum(v);
        let grads = g.into_gradients(loss, vars.vars());
        let mut expect = vec![t];
        expect.extend(&x);
        prop_assert_eq!(grads[0].as_slice(), &expect[..]);
        prop_assert_eq!(grads[1].item(), 1.0);
    }
}

#[test]
fn loss_without_parameter_path_has_zero_gradients() {
    let net = NetworkParams::xavier(&[3, 4, 1], &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let mut g = Graph::new();
    let vars = net.register(&mut g, true);
    let c = g.constant(Matrix::from_rows(&[vec![1.0, 2.0]]));
    let loss = g.sum(c);
    let grads = g.into_gradients(loss, vars.vars());
    assert_eq!(grads.len(), 4);
    for (gm, p) in grads.iter().zip(net.tensors()) {
        assert_eq!(gm.shape(), p.shape());
        assert!(gm.as_slice().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn forward_and_gradients_are_bit_reproducible() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let v = ValueNetwork::new(3, &[16, 16], &mut rng).unwrap();
        let x = Matrix::from_fn(9, 3, |_, _| rng.sample(StandardNormal));
        let t: Vec<f64> = (0..9).map(|i| i as f64 / 10.0).collect();
        let probes = vec![rademacher(&mut rng, 9, 3)];
        let vals = v.values(&t, &x).unwrap();
        let grads = v.input_grad_batch(&t, &x).unwrap();
        let lap = v.hutchinson_batch(&t, &x, &probes).unwrap();
        [vals, grads, lap]
            .iter()
            .flat_map(|m| m.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
            .collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}
