use proptest::prelude::*;
use roadmrf::datagen::random_planar;
use roadmrf::graph::{precision_pattern, subgraph_pattern, RoadGraph};

fn graph_strategy(max_n: usize) -> impl Strategy<Value = RoadGraph> {
    (1..=max_n, 0.01..=1.0f64, any::<u64>())
        .prop_map(|(n, density, seed)| random_planar(n, density, seed).unwrap())
}

fn graph_and_vector(max_n: usize) -> impl Strategy<Value = (RoadGraph, Vec<f64>)> {
    graph_strategy(max_n).prop_flat_map(|g| {
        let n = g.n();
        (Just(g), prop::collection::vec(-10.0..10.0f64, n))
    })
}

proptest! {
    #[test]
    fn quadratic_form_is_shift_plus_edge_differences(
        (g, x) in graph_and_vector(40),
        eps in 1e-6..2.0f64,
    ) {
        let c = precision_pattern(&g, eps).unwrap();
        let expected = eps * x.iter().map(|v| v * v).sum::<f64>()
            + g.edges().iter().map(|&(i, j)| (x[i] - x[j]).powi(2)).sum::<f64>();
        let got = c.quadratic_form(&x);
        prop_assert!((got - expected).abs() <= 1e-10 * (1.0 + expected.abs()));
    }

    #[test]
    fn strictly_diagonally_dominant(g in graph_strategy(60), eps in 1e-6..2.0f64) {
        let c = precision_pattern(&g, eps).unwrap().to_dense();
        for r in 0..g.n() {
            let off: f64 = (0..g.n()).filter(|&s| s != r).map(|s| c[(r, s)].abs()).sum();
            prop_assert!(c[(r, r)] > off);
            prop_assert!((c[(r, r)] - eps - off).abs() < 1e-12);
        }
    }

    #[test]
    fn building_twice_gives_identical_patterns(g in graph_strategy(40)) {
        let a = precision_pattern(&g, 1e-4).unwrap();
        let b = precision_pattern(&g, 1e-4).unwrap();
        prop_assert_eq!(a.to_dense(), b.to_dense());
        let again = RoadGraph::from_index_edges(g.n(), g.edges().iter().copied()).unwrap();
        prop_assert_eq!(again.fingerprint(), g.fingerprint());
    }

    #[test]
    fn subgraph_pattern_is_principal_submatrix(
        g in graph_strategy(40),
        mask_seed in any::<u64>(),
    ) {
        let hidden: Vec<usize> = (0..g.n())
            .filter(|&i| !(mask_seed.rotate_left(i as u32 % 64) ^ i as u64).is_multiple_of(3))
            .collect();
        let full = precision_pattern(&g, 1e-4).unwrap().to_dense();
        let sub = subgraph_pattern(&g, &hidden, 1e-4).unwrap().to_dense();
        for (r, &i) in hidden.iter().enumerate() {
            for (s, &j) in hidden.iter().enumerate() {
                prop_assert_eq!(sub[(r, s)], full[(i, j)]);
            }
        }
    }

    #[test]
    fn json_round_trip_preserves_fingerprint(g in graph_strategy(30)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.json");
        g.write_json(&path).unwrap();
        let back = RoadGraph::read_json(&path).unwrap();
        prop_assert_eq!(back.fingerprint(), g.fingerprint());
        prop_assert_eq!(back.edges(), g.edges());
    }
}
