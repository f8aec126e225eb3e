//! Cross-module invariants: the sparse filter path against the dense
//! spectral path, Parseval-style completeness, spectral bounds, and a few
//! randomized structural properties.

use freqd::data::{chronological_split, synthetic, SyntheticConfig};
use freqd::distill::{freqd_loss, project, Projector};
use freqd::filter::{apply_filter, GraphFilter};
use freqd::graph::{
    build_knn_graph, edge_dropout, normalized_laplacian, random_er_graph, random_features,
    GraphKind, SparseGraph,
};
use freqd::spectral::{eigendecompose, per_frequency_losses, reweighted_loss_explicit};

use ndarray::Array2;
use proptest::prelude::*;

#[test]
fn laplacian_spectrum_stays_in_bounds_up_to_128_nodes() {
    for (idx, n) in [8usize, 32, 64, 128].iter().enumerate() {
        let graph = random_er_graph(*n, 0.15, 7000 + idx as u64);
        let lap = normalized_laplacian(&graph).unwrap();
        let dec = eigendecompose(&lap).unwrap();
        assert!(dec.eigenvalues()[0] >= -1e-9);
        assert!(dec.eigenvalues()[*n - 1] <= 2.0 + 1e-9);
    }
}

#[test]
fn filter_path_matches_spectral_definition() {
    // H x computed sparsely must match U diag(h(lambda)) U^T x
    for n in [16usize, 48, 64] {
        let graph = random_er_graph(n, 0.2, 7100 + n as u64);
        let lap = normalized_laplacian(&graph).unwrap();
        let dec = eigendecompose(&lap).unwrap();
        let x = random_features(n, 5, 7200 + n as u64);
        for filter in [
            GraphFilter::linear(0.45).unwrap(),
            GraphFilter::quadratic(0.05, -0.3).unwrap(),
        ] {
            let sparse = apply_filter(&filter, &lap, &x).unwrap();
            let u = dec.eigenvectors();
            let h = Array2::from_diag(&ndarray::Array1::from_iter(
                dec.eigenvalues().iter().map(|&l| filter.response(l)),
            ));
            let dense = u.dot(&h).dot(&u.t()).dot(&x);
            let num: f64 = (&sparse - &dense).iter().map(|v| v * v).sum::<f64>().sqrt();
            let den: f64 = dense.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(num / den <= 1e-9, "n={n}: rel err {}", num / den);
        }
    }
}

#[test]
fn parseval_completeness() {
    for n in [12usize, 32, 64] {
        let graph = random_er_graph(n, 0.25, 7300 + n as u64);
        let lap = normalized_laplacian(&graph).unwrap();
        let dec = eigendecompose(&lap).unwrap();
        let x = random_features(n, 6, 7400 + n as u64);
        let zero = Array2::zeros(x.raw_dim());
        // per-frequency energies of x itself
        let energies = per_frequency_losses(&x, &zero, &dec).unwrap();
        let total: f64 = energies.iter().sum();
        let direct: f64 = x.iter().map(|v| v * v).sum();
        assert!((total - direct).abs() / direct <= 1e-9);
    }
}

#[test]
fn filtered_loss_weights_are_non_increasing() {
    // for any valid filter, h^2(lambda_k) is non-increasing in k
    let graph = random_er_graph(40, 0.2, 7500);
    let lap = normalized_laplacian(&graph).unwrap();
    let dec = eigendecompose(&lap).unwrap();
    for filter in [
        GraphFilter::identity(),
        GraphFilter::linear(0.1).unwrap(),
        GraphFilter::linear(0.5).unwrap(),
        GraphFilter::quadratic(0.2025, -0.9).unwrap(),
    ] {
        let weights: Vec<f64> = dec
            .eigenvalues()
            .iter()
            .map(|&l| filter.response(l).powi(2))
            .collect();
        for pair in weights.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-12);
        }
        // and the strict-mode reweighted loss accepts them
        let s = random_features(40, 3, 7600);
        let t = random_features(40, 3, 7601);
        assert!(reweighted_loss_explicit(&s, &t, &dec, &weights, true).is_ok());
    }
}

#[test]
fn freqd_loss_equals_weighted_spectral_loss_full_rows() {
    for n in [16usize, 40, 64] {
        let graph = random_er_graph(n, 0.25, 7700 + n as u64);
        let lap = normalized_laplacian(&graph).unwrap();
        let dec = eigendecompose(&lap).unwrap();
        let s = random_features(n, 4, 7800 + n as u64);
        let t = random_features(n, 8, 7900 + n as u64);
        let proj = Projector::init(4, 8, 8000 + n as u64);
        let filter = GraphFilter::linear(0.35).unwrap();

        let filtered = freqd_loss(&s, &t, &proj, &filter, &lap, None).unwrap();
        let weights: Vec<f64> = dec
            .eigenvalues()
            .iter()
            .map(|&l| filter.response(l).powi(2))
            .collect();
        let p = project(&proj, &s).unwrap();
        let explicit = reweighted_loss_explicit(&p, &t, &dec, &weights, true).unwrap();
        assert!(
            (filtered - explicit).abs() / filtered <= 1e-9,
            "n={n}: {filtered} vs {explicit}"
        );
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    /// Any KNN graph yields a Laplacian whose Rayleigh quotients stay in
    /// [0, 2]; dropout preserves that because degrees are recomputed.
    #[test]
    fn dropout_keeps_spectral_bounds(
        seed in 0u64..1000,
        n in 6usize..24,
        k in 1usize..5,
        rate in 0.0f64..0.9,
    ) {
        let emb = random_features(n, 3, seed);
        let graph = build_knn_graph(&emb, k, GraphKind::UserKnn).unwrap();
        let dropped = edge_dropout(&graph, rate, seed ^ 0xd0d0);
        let lap = normalized_laplacian(&dropped).unwrap();
        let dec = eigendecompose(&lap).unwrap();
        prop_assert!(dec.eigenvalues()[0] >= -1e-9);
        prop_assert!(dec.eigenvalues()[n - 1] <= 2.0 + 1e-9);
    }

    /// Filtering is linear in the features.
    #[test]
    fn filter_linearity(
        seed in 0u64..1000,
        a in -2.0f64..2.0,
        b in -2.0f64..2.0,
    ) {
        let graph = random_er_graph(12, 0.3, seed);
        let lap = normalized_laplacian(&graph).unwrap();
        let filter = GraphFilter::linear(0.4).unwrap();
        let x = random_features(12, 2, seed ^ 1);
        let y = random_features(12, 2, seed ^ 2);
        let lhs = apply_filter(&filter, &lap, &(&x * a + &y * b)).unwrap();
        let rhs = &apply_filter(&filter, &lap, &x).unwrap() * a
            + &apply_filter(&filter, &lap, &y).unwrap() * b;
        for (l, r) in lhs.iter().zip(rhs.iter()) {
            prop_assert!((l - r).abs() <= 1e-10);
        }
    }

    /// Graph serialization round-trips exactly.
    #[test]
    fn graph_export_import_roundtrip(seed in 0u64..1000, n in 4usize..20) {
        let graph = random_er_graph(n, 0.3, seed);
        let mut buf = Vec::new();
        graph.export(&mut buf).unwrap();
        let restored = SparseGraph::import(&mut &buf[..], GraphKind::UserKnn).unwrap();
        prop_assert_eq!(restored, graph);
    }

    /// Chronological splits partition the input without temporal leakage.
    #[test]
    fn split_partitions_without_leakage(seed in 0u64..200) {
        let data = synthetic(
            &SyntheticConfig {
                n_users: 12,
                n_items: 40,
                per_user: 10,
                clusters: 5,
                temperature: 0.3,
            },
            seed,
        );
        let split = chronological_split(&data, (0.8, 0.1, 0.1)).unwrap();
        prop_assert_eq!(
            split.train.len() + split.validation.len() + split.test.len(),
            data.len()
        );
        for u in 0..data.n_users as u32 {
            let ts = |set: &freqd::data::InteractionSet, pick_max: bool| {
                let it = set.interactions.iter().filter(|i| i.user == u).map(|i| i.ts);
                if pick_max { it.max() } else { it.min() }
            };
            if let (Some(a), Some(b)) = (ts(&split.train, true), ts(&split.validation, false)) {
                prop_assert!(a <= b);
            }
            if let (Some(a), Some(b)) = (ts(&split.validation, true), ts(&split.test, false)) {
                prop_assert!(a <= b);
            }
        }
    }
}
