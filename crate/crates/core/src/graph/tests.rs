use std::path::PathBuf;

use proptest::prelude::*;

use super::*;
use crate::error::Error;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

fn raw() -> LoadOptions {
    LoadOptions {
        symmetrize: false,
        ..LoadOptions::default()
    }
}

fn incoming(g: &HeteroGraph, v: usize) -> Vec<(usize, usize)> {
    g.in_edges(v)
        .map(|k| (g.edge_sources()[k], g.edge_types()[k]))
        .collect()
}

#[test]
fn small_fixture_adjacency_matches_file() {
    let g = load_graph_dir(&fixture("small5"), &raw()).unwrap();
    assert_eq!(g.num_nodes(), 5);
    assert_eq!(g.num_edges(), 4);
    assert_eq!(g.num_node_types(), 2);
    assert_eq!(g.num_edge_types(), 2);
    assert_eq!(incoming(&g, 0), vec![(2, 0), (3, 0)]);
    assert_eq!(incoming(&g, 1), vec![(0, 1)]);
    assert_eq!(incoming(&g, 2), vec![(4, 0)]);
    assert!(incoming(&g, 3).is_empty());
    assert!(incoming(&g, 4).is_empty());
    assert_eq!(g.in_segments().offsets().as_ref(), &[0, 2, 3, 4, 4, 4]);
    assert_eq!(g.feature_row(4), &[0.0, 3.0]);
    // featureless type 1 falls back to one-hot by local index
    assert_eq!(g.feature_dim(1), 2);
    assert_eq!(g.feature_row(2), &[1.0, 0.0]);
    assert_eq!(g.feature_row(3), &[0.0, 1.0]);
    assert_eq!(g.target_type(), Some(0));
    match g.labels().unwrap() {
        Labels::Single { classes, of } => {
            assert_eq!(*classes, 2);
            assert_eq!(of, &vec![Some(1), Some(0), None, None, Some(1)]);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn all_one_fallback_and_symmetrize() {
    let opts = LoadOptions {
        fallback: FeatureFallback::AllOne,
        ..LoadOptions::default()
    };
    let g = load_graph_dir(&fixture("small5"), &opts).unwrap();
    assert_eq!(g.feature_dim(1), 1);
    assert_eq!(g.feature_row(3), &[1.0]);
    assert_eq!(g.num_edges(), 8);
    assert_eq!(incoming(&g, 3), vec![(0, 0)]);
}

fn write_files(dir: &std::path::Path, nodes: &str, edges: &str) {
    std::fs::write(dir.join(NODE_FILE), nodes).unwrap();
    std::fs::write(dir.join(EDGE_FILE), edges).unwrap();
}

#[test]
fn empty_edge_file_gives_isolated_nodes() {
    let dir = tempfile::tempdir().unwrap();
    write_files(dir.path(), "0\t0\n1\t0\n2\t0\n", "# nothing\n");
    let g = load_graph_dir(dir.path(), &raw()).unwrap();
    assert_eq!(g.num_nodes(), 3);
    assert_eq!(g.num_edges(), 0);
    let looped = g.add_self_loops();
    assert_eq!(looped.num_edges(), 3);
    assert!(looped.edge_types().iter().all(|&t| t == g.num_edge_types()));
}

#[test]
fn load_errors_carry_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    write_files(dir.path(), "0\t0\n1\t0\n", "0\t1\t0\n# c\n1\t7\t0\n");
    match load_graph_dir(dir.path(), &raw()) {
        Err(Error::Load { line: 3, msg, .. }) => assert!(msg.contains("dangling"), "{msg}"),
        other => panic!("{other:?}"),
    }

    write_files(dir.path(), "0\t0\n0\t1\n", "");
    assert!(matches!(
        load_graph_dir(dir.path(), &raw()),
        Err(Error::Load { line: 2, .. })
    ));

    write_files(dir.path(), "0\t0\n1\t5\n", "");
    let opts = LoadOptions {
        num_node_types: Some(2),
        ..raw()
    };
    assert!(matches!(
        load_graph_dir(dir.path(), &opts),
        Err(Error::Load { line: 2, .. })
    ));

    write_files(dir.path(), "0\t0\n1\t0\n", "0\t1\t4\n");
    let opts = LoadOptions {
        num_edge_types: Some(2),
        ..raw()
    };
    assert!(matches!(
        load_graph_dir(dir.path(), &opts),
        Err(Error::Load { line: 1, .. })
    ));

    write_files(dir.path(), "0\t0\t1,2\n1\t0\t3\n", "");
    assert!(matches!(
        load_graph_dir(dir.path(), &raw()),
        Err(Error::Load { line: 2, .. })
    ));
}

#[test]
fn self_loops_are_idempotent_and_use_fresh_type() {
    let g = load_graph_dir(&fixture("small5"), &raw()).unwrap();
    let once = g.add_self_loops();
    assert_eq!(once.num_edges(), g.num_edges() + g.num_nodes());
    let twice = once.add_self_loops();
    assert_eq!(once, twice);
    for v in 0..once.num_nodes() {
        assert!(incoming(&once, v).contains(&(v, 2)));
    }
}

#[test]
fn six_edge_types_get_self_loop_type_six() {
    let edges = (0..6).map(|t| Edge::new(t, (t + 1) % 6, t)).collect();
    let nodes: Arc<[usize]> = (0..6).collect();
    let g = HeteroGraph::new(
        vec![0; 6],
        1,
        6,
        edges,
        vec![FeatureBlock::fallback(nodes, FeatureFallback::AllOne)],
    )
    .unwrap()
    .add_self_loops();
    assert_eq!(g.self_loop_type(), 6);
    let loops: Vec<_> = g.edges().filter(|e| e.src == e.dst).collect();
    assert_eq!(loops.len(), 6);
    assert!(loops.iter().all(|e| e.edge_type == 6));
}

#[test]
fn split_24_6_70() {
    let spec = SynthSpec {
        nodes_per_type: vec![100],
        num_edge_types: 1,
        feature_dims: vec![4],
        ..SynthSpec::default()
    };
    let g = synth_generate(&spec).unwrap();
    let m = split_nodes(&g, (0.24, 0.06, 0.70), 9).unwrap();
    assert_eq!(m.train_nodes().len(), 24);
    assert_eq!(m.valid_nodes().len(), 6);
    assert_eq!(m.test_nodes().len(), 70);
    assert_eq!(m, split_nodes(&g, (0.24, 0.06, 0.70), 9).unwrap());
    assert_ne!(m, split_nodes(&g, (0.24, 0.06, 0.70), 10).unwrap());
    let g = g.with_masks(m).unwrap();
    assert!(g.masks().is_some());
}

#[test]
fn split_rejects_bad_inputs() {
    let g = load_graph_dir(&fixture("small5"), &raw()).unwrap();
    assert!(matches!(
        split_nodes(&g, (1.0, 0.0, 0.0), 0),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        split_nodes(&g, (0.5, 0.3, 0.3), 0),
        Err(Error::Config(_))
    ));
    let m = split_nodes(&g, (0.34, 0.33, 0.33), 0).unwrap();
    assert_eq!(
        m.train_nodes().len() + m.valid_nodes().len() + m.test_nodes().len(),
        3
    );

    let dir = tempfile::tempdir().unwrap();
    write_files(dir.path(), "0\t0\n1\t0\n", "");
    std::fs::write(dir.path().join(LABEL_FILE), "0\t0\n1\t1\n").unwrap();
    let g = load_graph_dir(dir.path(), &raw()).unwrap();
    assert!(matches!(
        split_nodes(&g, (0.24, 0.06, 0.70), 0),
        Err(Error::Graph(_))
    ));
}

#[test]
fn masks_must_cover_labeled_nodes() {
    let g = load_graph_dir(&fixture("small5"), &raw()).unwrap();
    let mut m = split_nodes(&g, (0.34, 0.33, 0.33), 0).unwrap();
    m.train[2] = true;
    assert!(g.clone().with_masks(m).is_err());
}

#[test]
fn multi_label_file() {
    let dir = tempfile::tempdir().unwrap();
    write_files(dir.path(), "0\t0\n1\t0\n2\t1\n", "");
    std::fs::write(dir.path().join(LABEL_FILE), "0\t0,2\n1\t1\n").unwrap();
    let opts = LoadOptions {
        multi_label: true,
        ..raw()
    };
    let g = load_graph_dir(dir.path(), &opts).unwrap();
    match g.labels().unwrap() {
        Labels::Multi { classes, of } => {
            assert_eq!(*classes, 3);
            assert_eq!(of[0], Some(vec![0, 2]));
            assert_eq!(of[2], None);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn shuffled_neighbor_order_keeps_edge_multiset() {
    let g = synth_generate(&SynthSpec::default())
        .unwrap()
        .add_self_loops();
    let s = g.shuffle_neighbor_order(4);
    assert_ne!(g.edge_sources(), s.edge_sources());
    let mut a: Vec<Edge> = g.edges().collect();
    let mut b: Vec<Edge> = s.edges().collect();
    a.sort();
    b.sort();
    assert_eq!(a, b);
}

/// Nearest-centroid classifier fitted on even-indexed target nodes and
/// scored on odd-indexed ones.
fn centroid_oracle_accuracy(g: &HeteroGraph) -> f64 {
    let Labels::Single { classes, of } = g.labels().unwrap() else {
        unreachable!()
    };
    let nodes: Vec<usize> = (0..g.num_nodes()).filter(|&v| of[v].is_some()).collect();
    let dim = g.feature_dim(0);
    let mut sums = vec![vec![0.0; dim]; *classes];
    let mut counts = vec![0usize; *classes];
    for &v in nodes.iter().step_by(2) {
        let c = of[v].unwrap();
        counts[c] += 1;
        for (s, x) in sums[c].iter_mut().zip(g.feature_row(v)) {
            *s += x;
        }
    }
    let cents: Vec<Vec<f64>> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| s.iter().map(|x| x / c.max(1) as f64).collect())
        .collect();
    let held: Vec<usize> = nodes.iter().skip(1).step_by(2).copied().collect();
    let correct = held
        .iter()
        .filter(|&&v| {
            let x = g.feature_row(v);
            let best = (0..*classes)
                .min_by(|&a, &b| {
                    let da: f64 = x.iter().zip(&cents[a]).map(|(p, q)| (p - q).powi(2)).sum();
                    let db: f64 = x.iter().zip(&cents[b]).map(|(p, q)| (p - q).powi(2)).sum();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            best == of[v].unwrap()
        })
        .count();
    correct as f64 / held.len() as f64
}

fn centroid_spec(signal: f64, seed: u64) -> SynthSpec {
    SynthSpec {
        nodes_per_type: vec![200, 60, 60],
        num_classes: 3,
        signal,
        seed,
        ..SynthSpec::default()
    }
}

#[test]
fn synth_signal_controls_separability() {
    for seed in 0..5 {
        let strong = centroid_oracle_accuracy(&synth_generate(&centroid_spec(1.0, seed)).unwrap());
        assert!(strong >= 0.95, "seed {seed}: {strong}");
        let none = centroid_oracle_accuracy(&synth_generate(&centroid_spec(0.0, seed)).unwrap());
        assert!((none - 1.0 / 3.0).abs() <= 0.1, "seed {seed}: {none}");
    }
}

#[test]
fn synth_is_reproducible() {
    let spec = SynthSpec {
        type_affinity: 0.5,
        ..SynthSpec::default()
    };
    assert_eq!(
        synth_generate(&spec).unwrap(),
        synth_generate(&spec).unwrap()
    );
    let other = SynthSpec {
        seed: 1,
        ..spec.clone()
    };
    assert_ne!(
        synth_generate(&spec).unwrap(),
        synth_generate(&other).unwrap()
    );
    assert!(synth_generate(&SynthSpec {
        signal: 1.5,
        ..spec
    })
    .is_err());
}

#[test]
fn write_then_load_round_trips() {
    let spec = SynthSpec {
        feature_dims: vec![5, 0, 3],
        ..SynthSpec::default()
    };
    let g = synth_generate(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_graph(&g.add_self_loops(), dir.path()).unwrap();
    let opts = LoadOptions {
        num_edge_types: Some(g.num_edge_types()),
        num_classes: Some(3),
        ..raw()
    };
    let back = load_graph_dir(dir.path(), &opts).unwrap();
    assert_eq!(back, g);
}

proptest! {
    #[test]
    fn self_loops_add_exactly_n_edges(n in 1usize..30, m in 0usize..60, seed in 0u64..100) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let edges: Vec<Edge> = (0..m)
            .map(|_| (rng.gen_range(0..n), rng.gen_range(0..n), rng.gen_range(0..3)))
            .filter(|(s, d, _)| s != d)
            .map(|(s, d, t)| Edge::new(s, d, t))
            .collect();
        let nodes: Arc<[usize]> = (0..n).collect();
        let g = HeteroGraph::new(vec![0; n], 1, 3, edges, vec![FeatureBlock::fallback(nodes, FeatureFallback::AllOne)]).unwrap();
        let looped = g.add_self_loops();
        prop_assert_eq!(looped.num_edges(), g.num_edges() + n);
        let offs = looped.in_segments().offsets();
        prop_assert!(offs.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(*offs.last().unwrap(), looped.num_edges());
    }
}

#[test]
fn hgb_layout_is_detected_and_parsed() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join(HGB_NODE_FILE),
        "0\tpaper a\t0\t1.0,2.0\n1\tauthor b\t1\n2\tpaper c\t0\t0.5,0.5\n",
    )
    .unwrap();
    std::fs::write(
        d.join(HGB_EDGE_FILE),
        "1\t0\t0\t1.0\n0\t1\t1\t1.0\n2\t1\t1\n",
    )
    .unwrap();
    std::fs::write(d.join("label.dat"), "0\tpaper a\t0\t1\n").unwrap();
    std::fs::write(d.join("label.dat.test"), "2\tpaper c\t0\t0\n").unwrap();
    assert_eq!(FileFormat::detect(d), FileFormat::Hgb);
    let g = load_graph_dir(d, &raw()).unwrap();
    assert_eq!(
        (
            g.num_nodes(),
            g.num_node_types(),
            g.num_edge_types(),
            g.num_edges()
        ),
        (3, 2, 2, 3)
    );
    assert_eq!(incoming(&g, 1), vec![(0, 1), (2, 1)]);
    assert_eq!(g.feature_row(2), &[0.5, 0.5]);
    match g.labels().unwrap() {
        Labels::Single { of, classes } => {
            assert_eq!(*classes, 2);
            assert_eq!(of, &vec![Some(1), None, Some(0)]);
        }
        other => panic!("unexpected labels {other:?}"),
    }

    std::fs::write(d.join("label.dat.test"), "0\tpaper a\t0\t0\n").unwrap();
    let e = load_graph_dir(d, &raw()).unwrap_err();
    assert!(e.to_string().contains("duplicate label"), "{e}");
    std::fs::write(d.join(HGB_EDGE_FILE), "1\t0\n").unwrap();
    assert_eq!(load_graph_dir(d, &raw()).unwrap_err().exit_code(), 2);
}
