use nalgebra::DVector;
use proptest::prelude::*;
use roadmrf::datagen::{grid, random_planar, sample_snapshots, GroundTruth, TrafficSpec};
use roadmrf::gmrf::Snapshot;
use roadmrf::graph::{precision_pattern, RoadGraph};
use roadmrf::learn::{compute_stats, fit, fit_stats, LearnConfig, Likelihood, SufficientStats};

fn data(max_n: usize) -> impl Strategy<Value = (RoadGraph, Vec<Snapshot>)> {
    (2..=max_n, 0.01..=1.0f64, any::<u64>(), 3..30usize)
        .prop_map(|(n, d, seed, k)| (random_planar(n, d, seed).unwrap(), k))
        .prop_flat_map(|(g, k)| {
            let n = g.n();
            (
                Just(g),
                prop::collection::vec(prop::collection::vec(0.0..1.0f64, n), k),
            )
        })
        .prop_map(|(g, rows)| (g, rows.into_iter().map(Snapshot).collect()))
}

/// Gradient of the printed (negated) objective, evaluated from the moments.
fn printed_gradient(
    stats: &SufficientStats,
    g: &RoadGraph,
    beta: &[f64],
    eta: f64,
    eps: f64,
    lambda: f64,
) -> (Vec<f64>, f64) {
    let c = precision_pattern(g, eps).unwrap().to_dense();
    let c_inv_beta = c
        .clone()
        .cholesky()
        .unwrap()
        .solve(&DVector::from_column_slice(beta));
    let d_beta = (0..g.n())
        .map(|i| -stats.mean[i] + c_inv_beta[i] / eta + lambda * beta[i])
        .collect();
    let diag: f64 = (0..g.n())
        .map(|i| (eps + g.degree(i) as f64) * stats.second_moment[i])
        .sum();
    let edges: f64 = stats.edge_moment.iter().sum();
    let quad: f64 = beta.iter().zip(c_inv_beta.iter()).map(|(a, b)| a * b).sum();
    let n = g.n() as f64;
    let d_eta = 0.5 * diag - edges - quad / (2.0 * eta * eta) + n / (2.0 * eta) + lambda * eta;
    (d_beta, d_eta)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn central_differences_match((g, snaps) in data(20), eta in 0.2..8.0f64, lambda in 0.0..3.0f64) {
        let stats = compute_stats(&snaps, &g).unwrap();
        let lik = Likelihood::new(&stats, &g, 1e-3).unwrap();
        let beta: Vec<f64> = (0..g.n()).map(|i| 0.3 * (i as f64).cos()).collect();
        let grad = lik.gradient(&beta, eta, lambda).unwrap();
        let f = |b: &[f64], e: f64| lik.objective(b, e, lambda).unwrap();
        for i in 0..g.n() {
            let (mut up, mut down) = (beta.clone(), beta.clone());
            up[i] += 1e-4;
            down[i] -= 1e-4;
            let fd = (f(&up, eta) - f(&down, eta)) / 2e-4;
            prop_assert!((fd - grad.beta[i]).abs() <= 1e-5 * (1.0 + grad.beta[i].abs()));
        }
        let h = 1e-5 * eta;
        let fd = (f(&beta, eta + h) - f(&beta, eta - h)) / (2.0 * h);
        prop_assert!((fd - grad.eta).abs() <= 1e-5 * (1.0 + grad.eta.abs()));
    }

    #[test]
    fn sparse_solve_matches_dense_inverse(g in (1..60usize, 0.01..=1.0f64, any::<u64>()).prop_map(|(n, d, s)| random_planar(n, d, s).unwrap())) {
        let stats = compute_stats(&[Snapshot(vec![0.0; g.n()])], &g).unwrap();
        let lik = Likelihood::new(&stats, &g, 1e-4).unwrap();
        let v: Vec<f64> = (0..g.n()).map(|i| (i as f64 * 0.7).sin()).collect();
        let dense = lik.pattern().to_dense().try_inverse().unwrap() * DVector::from_column_slice(&v);
        let sparse = lik.solve_c(&v);
        let scale = dense.amax().max(1.0);
        for (a, b) in sparse.iter().zip(dense.iter()) {
            prop_assert!((a - b).abs() <= 1e-10 * scale);
        }
    }

    #[test]
    fn penalized_fit_trace_never_decreases((g, snaps) in data(15), lambda in 0.01..5.0f64) {
        let cfg = LearnConfig { lambda, ..Default::default() };
        let fitted = fit(&snaps, &g, 1e-4, &cfg).unwrap();
        let trace = &fitted.report.objective_trace;
        for w in trace.windows(2) {
            prop_assert!(w[1] >= w[0] - 1e-9 * (1.0 + w[0].abs()));
        }
        prop_assert!(fitted.report.grad_norm < cfg.grad_tolerance);
    }

    #[test]
    fn printed_gradient_relation_at_the_optimum((g, snaps) in data(15), lambda in prop_oneof![Just(0.0), 0.01..2.0f64]) {
        let stats = compute_stats(&snaps, &g).unwrap();
        let cfg = LearnConfig { lambda, ..Default::default() };
        let m = fit_stats(&stats, &g, 1e-4, &cfg).unwrap().model;
        let (d_beta, d_eta) = printed_gradient(&stats, &g, &m.beta, m.eta, 1e-4, lambda);
        let ours = Likelihood::new(&stats, &g, 1e-4).unwrap().gradient(&m.beta, m.eta, lambda).unwrap();
        // The β part is the negated ascent gradient and vanishes at the fit.
        let worst = d_beta.iter().fold(0.0f64, |w, v| w.max(v.abs()));
        prop_assert!(worst < cfg.grad_tolerance * (1.0 + lambda) * 10.0);
        // The printed η part differs from the negated ascent gradient by N/η.
        let n = g.n() as f64;
        let expected = -ours.eta + n / m.eta;
        prop_assert!((d_eta - expected).abs() <= 1e-8 * (1.0 + expected.abs()));
    }
}

#[test]
fn lambda_zero_fit_is_closed_form() {
    let g = grid(6, 5).unwrap();
    let c = precision_pattern(&g, 1.0).unwrap();
    let mean: Vec<f64> = (0..g.n()).map(|i| 0.1 + 0.01 * (i % 7) as f64).collect();
    let beta = c.mul_vec(&mean).iter().map(|v| 40.0 * v).collect();
    let spec = TrafficSpec {
        ground_truth: GroundTruth::Gmrf {
            beta,
            eta: 40.0,
            epsilon: 1.0,
        },
        snapshots: 300,
        clamp_negative: false,
        seed: 11,
    };
    let snaps = sample_snapshots(&g, &spec).unwrap();
    let stats = compute_stats(&snaps, &g).unwrap();
    let m = fit_stats(&stats, &g, 1e-4, &LearnConfig::default())
        .unwrap()
        .model;
    let c = precision_pattern(&g, 1e-4).unwrap();
    let c_mean = c.mul_vec(&stats.mean);
    for (b, cm) in m.beta.iter().zip(&c_mean) {
        assert!((b - m.eta * cm).abs() <= 1e-9 * (1.0 + b.abs()));
    }
    let second: f64 = (0..g.n())
        .map(|i| c.diag()[i] * stats.second_moment[i])
        .sum::<f64>()
        - 2.0 * stats.edge_moment.iter().sum::<f64>();
    let eta = g.n() as f64 / (second - c.quadratic_form(&stats.mean));
    assert!((m.eta - eta).abs() <= 1e-9 * eta);
}
