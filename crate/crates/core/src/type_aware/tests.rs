use std::sync::Arc;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::graph::{Edge, FeatureBlock};
use crate::numerics::grad_check;
use crate::testutil::random_graph;

const ID: Activation = Activation::Identity;
const LEAKY: Activation = Activation::LeakyRelu(0.2);

struct Fixture {
    store: ParamStore,
    proj: ProjectionParams,
    types: NodeTypeTable,
    edges: EdgeTypeTable,
    layers: Vec<TypeAwareLayerParams>,
}

fn build(g: &HeteroGraph, d: usize, heads: usize, layers: usize, seed: u64) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let dims: Vec<usize> = (0..g.num_node_types()).map(|t| g.feature_dim(t)).collect();
    let proj = ProjectionParams::new(&mut store, &dims, d, &mut rng);
    let types = NodeTypeTable::new(&mut store, "types", g.num_node_types(), d, &mut rng);
    let edges = EdgeTypeTable::new(&mut store, "edges", g.num_edge_types(), 3, &mut rng);
    let layers = (0..layers)
        .map(|l| {
            TypeAwareLayerParams::new(&mut store, &format!("layer{l}"), heads, d, 3, 3, &mut rng)
        })
        .collect();
    Fixture {
        store,
        proj,
        types,
        edges,
        layers,
    }
}

fn run(
    f: &Fixture,
    g: &HeteroGraph,
    table: Option<NodeTypeTable>,
    settings: &TypeAwareSettings,
) -> (Tensor, Vec<Vec<Tensor>>) {
    let mut pass = Pass::eval(&f.store);
    let h = project_features(&mut pass, g, &f.proj).unwrap();
    let out = encoder_forward(
        &mut pass, h, g, table, &f.layers, f.edges, settings, LEAKY, ID,
    )
    .unwrap();
    let alphas = out
        .alpha_hat
        .iter()
        .map(|l| l.iter().map(|&a| pass.tape.value(a).clone()).collect())
        .collect();
    (pass.tape.value(out.h).clone(), alphas)
}

fn one_type_graph(
    n: usize,
    dim: usize,
    data: Vec<f64>,
    edges: Vec<Edge>,
    edge_types: usize,
) -> HeteroGraph {
    let nodes: Arc<[usize]> = (0..n).collect();
    let block = FeatureBlock {
        dim,
        nodes,
        data,
        fallback: None,
    };
    HeteroGraph::new(vec![0; n], 1, edge_types, edges, vec![block]).unwrap()
}

fn set(store: &mut ParamStore, id: ParamId, rows: &[&[f64]]) {
    store
        .get_mut(id)
        .data_mut()
        .copy_from_slice(Tensor::from_rows(rows).unwrap().data());
}

#[test]
fn projection_examples() {
    let g = one_type_graph(1, 2, vec![2.0, 3.0], vec![], 1);
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let p = ProjectionParams::new(&mut store, &[2], 2, &mut rng);
    // stored input-major: this is the map x ↦ [x0, x0 + x1]
    set(&mut store, p.weights[0], &[&[1.0, 1.0], &[0.0, 1.0]]);
    let mut pass = Pass::eval(&store);
    let h = project_features(&mut pass, &g, &p).unwrap();
    assert_eq!(pass.tape.value(h).data(), &[2.0, 5.0]);

    set(&mut store, p.weights[0], &[&[1.0, 0.0], &[0.0, 1.0]]);
    let mut pass = Pass::eval(&store);
    let h = project_features(&mut pass, &g, &p).unwrap();
    assert_eq!(pass.tape.value(h).data(), &[2.0, 3.0]);

    let zero = one_type_graph(1, 2, vec![0.0, 0.0], vec![], 1);
    set(&mut store, p.biases[0], &[&[1.0, 2.0]]);
    let mut pass = Pass::eval(&store);
    let h = project_features(&mut pass, &zero, &p).unwrap();
    assert_eq!(pass.tape.value(h).data(), &[1.0, 2.0]);
}

#[test]
fn projection_width_mismatch_names_type() {
    let g = one_type_graph(1, 2, vec![2.0, 3.0], vec![], 1);
    let mut store = ParamStore::new();
    let p = ProjectionParams::new(&mut store, &[3], 2, &mut ChaCha8Rng::seed_from_u64(0));
    let mut pass = Pass::eval(&store);
    let err = project_features(&mut pass, &g, &p).err().unwrap();
    assert!(err.to_string().contains("node type 0"), "{err}");
}

#[test]
fn combine_examples() {
    let g = one_type_graph(2, 1, vec![0.0, 0.0], vec![], 1);
    let mut store = ParamStore::new();
    let table = NodeTypeTable(store.insert("m", Tensor::from_rows(&[&[3.0, 4.0]]).unwrap()));
    let mut pass = Pass::eval(&store);
    let h = pass
        .tape
        .constant(Tensor::from_rows(&[&[1.0, 2.0], &[0.0, 0.0]]).unwrap());
    let out = combine(&mut pass, h, &g, Some(table)).unwrap();
    assert_eq!(pass.tape.value(out).data(), &[3.0, 8.0, 0.0, 0.0]);

    let mut store = ParamStore::new();
    let ones = NodeTypeTable(store.insert("m", Tensor::ones(1, 2)));
    let mut pass = Pass::eval(&store);
    let h = pass
        .tape
        .constant(Tensor::from_rows(&[&[1.5, -2.0], &[7.0, 0.25]]).unwrap());
    let out = combine(&mut pass, h, &g, Some(ones)).unwrap();
    assert_eq!(pass.tape.value(out).data(), &[1.5, -2.0, 7.0, 0.25]);
}

#[test]
fn self_loop_only_gets_full_weight() {
    let g = one_type_graph(2, 2, vec![1.0, 2.0, -1.0, 0.5], vec![], 1).add_self_loops();
    let f = build(&g, 2, 1, 1, 3);
    let mut pass = Pass::eval(&f.store);
    let h = project_features(&mut pass, &g, &f.proj).unwrap();
    let alpha =
        attention_coefficients(&mut pass, h, &g, &f.layers[0].heads[0], f.edges, 0.2).unwrap();
    assert_eq!(pass.tape.value(alpha).data(), &[1.0, 1.0]);

    let agg = aggregate_head(&mut pass, h, &g, alpha, f.layers[0].heads[0].w, ID).unwrap();
    let w = pass.p(f.layers[0].heads[0].w);
    let direct = pass.tape.matmul(h, w).unwrap();
    assert_eq!(pass.tape.value(agg).data(), pass.tape.value(direct).data());
}

#[test]
fn identical_neighbors_share_weight_and_average() {
    // nodes 1..=3 are copies feeding node 0 through the same edge type
    let data = vec![0.3, -0.2, 1.0, 0.5, 1.0, 0.5, 1.0, 0.5];
    let edges = (1..4).map(|s| Edge::new(s, 0, 0)).collect();
    let g = one_type_graph(4, 2, data, edges, 1);
    let f = build(&g, 2, 1, 1, 4);
    let mut pass = Pass::eval(&f.store);
    let h = project_features(&mut pass, &g, &f.proj).unwrap();
    let head = &f.layers[0].heads[0];
    // every node needs a neighborhood, so use the looped graph but only read node 0's own edges
    let looped = g.add_self_loops();
    let alpha = attention_coefficients(&mut pass, h, &looped, head, f.edges, 0.2).unwrap();
    let a = pass.tape.value(alpha).data().to_vec();
    let r = looped.in_edges(0);
    let neigh: Vec<f64> = r
        .clone()
        .filter(|&k| looped.edge_sources()[k] != 0)
        .map(|k| a[k])
        .collect();
    assert_eq!(neigh.len(), 3);
    assert!((neigh[0] - neigh[1]).abs() < 1e-15 && (neigh[1] - neigh[2]).abs() < 1e-15);

    // uniform α over the copies → the mean of their transforms, which is any one of them
    let uniform = pass.tape.constant(Tensor::column(&[1.0 / 3.0; 3]).unwrap());
    let agg = aggregate_head(
        &mut pass,
        h,
        &g.without_edges(&Default::default()),
        uniform,
        head.w,
        ID,
    );
    assert!(agg.is_ok());
    let w = pass.p(head.w);
    let z = pass.tape.matmul(h, w).unwrap();
    let out = pass.tape.value(agg.unwrap()).row(0).to_vec();
    let expected = pass.tape.value(z).row(1).to_vec();
    for (o, e) in out.iter().zip(&expected) {
        assert!((o - e).abs() < 1e-12);
    }
}

#[test]
fn empty_neighborhood_is_an_error() {
    let g = one_type_graph(2, 1, vec![1.0, 2.0], vec![Edge::new(0, 1, 0)], 1);
    let f = build(&g, 2, 1, 1, 0);
    let mut pass = Pass::eval(&f.store);
    let h = project_features(&mut pass, &g, &f.proj).unwrap();
    assert!(matches!(
        attention_coefficients(&mut pass, h, &g, &f.layers[0].heads[0], f.edges, 0.2),
        Err(Error::Graph(_))
    ));
}

#[test]
fn residual_examples() {
    let store = ParamStore::new();
    let mut pass = Pass::eval(&store);
    let now = pass.tape.constant(Tensor::column(&[0.6]).unwrap());
    let prev = pass.tape.constant(Tensor::column(&[0.2]).unwrap());
    let first = attention_residual(&mut pass, now, None, 0.5).unwrap();
    assert_eq!(first, now);
    let b0 = attention_residual(&mut pass, now, Some(prev), 0.0).unwrap();
    assert_eq!(pass.tape.value(b0).data(), &[0.6]);
    let b1 = attention_residual(&mut pass, now, Some(prev), 1.0).unwrap();
    assert_eq!(pass.tape.value(b1).data(), &[0.2]);
    let half = attention_residual(&mut pass, now, Some(prev), 0.5).unwrap();
    assert!((pass.tape.value(half).data()[0] - 0.4).abs() < 1e-15);

    let longer = pass.tape.constant(Tensor::column(&[0.5, 0.5]).unwrap());
    assert!(matches!(
        attention_residual(&mut pass, now, Some(longer), 0.5),
        Err(Error::Shape { .. })
    ));
    assert!(attention_residual(&mut pass, now, Some(prev), 1.5).is_err());
}

#[test]
fn two_identical_heads_equal_one() {
    let g = random_graph(12, 2, 2, 30, 3, 9);
    let mut two = build(&g, 4, 2, 2, 5);
    for layer in &two.layers {
        let (h0, h1) = (&layer.heads[0], &layer.heads[1]);
        for (a, b) in [
            (h0.w, h1.w),
            (h0.w_edge, h1.w_edge),
            (h0.a_target, h1.a_target),
            (h0.a_source, h1.a_source),
            (h0.a_edge, h1.a_edge),
        ] {
            let v = two.store.get(a).clone();
            *two.store.get_mut(b) = v;
        }
    }
    let settings = TypeAwareSettings::default();
    let both = run(&two, &g, Some(two.types), &settings).0;
    two.layers = two
        .layers
        .iter()
        .map(|l| TypeAwareLayerParams {
            heads: vec![l.heads[0].clone()],
        })
        .collect();
    let single = run(&two, &g, Some(two.types), &settings).0;
    assert!(both.max_abs_diff(&single).unwrap() < 1e-12);
}

#[test]
fn beta_one_repeats_first_layer_attention() {
    let g = random_graph(15, 3, 2, 40, 4, 1);
    let f = build(&g, 4, 2, 2, 2);
    let settings = TypeAwareSettings {
        beta: 1.0,
        ..TypeAwareSettings::default()
    };
    let (_, alphas) = run(&f, &g, Some(f.types), &settings);
    for (now, prev) in alphas[1].iter().zip(&alphas[0]) {
        assert_eq!(now.data(), prev.data());
    }
}

#[test]
fn all_one_type_table_matches_skipped_combine() {
    let g = random_graph(20, 3, 3, 60, 4, 6);
    let mut f = build(&g, 4, 2, 2, 8);
    f.store.get_mut(f.types.0).data_mut().fill(1.0);
    let settings = TypeAwareSettings::default();
    let with = run(&f, &g, Some(f.types), &settings).0;
    let without = run(&f, &g, None, &settings).0;
    assert!(with.max_abs_diff(&without).unwrap() <= 1e-12);
}

#[test]
fn equal_edge_rows_make_labels_irrelevant() {
    let g = random_graph(20, 2, 3, 60, 3, 12);
    let mut f = build(&g, 4, 2, 2, 13);
    let rows = f.store.get(f.edges.0).rows();
    let cols = f.store.get(f.edges.0).cols();
    let first = f.store.get(f.edges.0).row(0).to_vec();
    let tiled: Vec<f64> = first.iter().cycle().take(rows * cols).copied().collect();
    f.store
        .get_mut(f.edges.0)
        .data_mut()
        .copy_from_slice(&tiled);
    let settings = TypeAwareSettings::default();
    let base = run(&f, &g, Some(f.types), &settings).0;

    let relabeled: Vec<Edge> = g
        .edges()
        .map(|e| {
            Edge::new(
                e.src,
                e.dst,
                if e.edge_type == g.self_loop_type() {
                    e.edge_type
                } else {
                    (e.edge_type + 1) % 3
                },
            )
        })
        .collect();
    let nt: Vec<usize> = g.node_types().to_vec();
    let h = HeteroGraph::new(nt, g.num_node_types(), 3, relabeled, g.features().to_vec()).unwrap();
    let other = run(&f, &h, Some(f.types), &settings).0;
    assert!(base.max_abs_diff(&other).unwrap() <= 1e-12);
}

#[test]
fn edge_storage_order_does_not_matter() {
    let g = random_graph(30, 3, 2, 120, 4, 21);
    let f = build(&g, 4, 2, 2, 22);
    let settings = TypeAwareSettings::default();
    let base = run(&f, &g, Some(f.types), &settings).0;
    for seed in 0..5 {
        let shuffled = g.shuffle_neighbor_order(seed);
        let out = run(&f, &shuffled, Some(f.types), &settings).0;
        assert!(base.max_abs_diff(&out).unwrap() <= 1e-12);
    }
}

#[test]
fn single_layer_gradients_match_finite_differences() {
    let g = random_graph(10, 2, 2, 25, 3, 31);
    let f = build(&g, 4, 2, 1, 32);
    let report = grad_check(
        |pass_tape, params| {
            let mut pass = Pass::with_tape(std::mem::take(pass_tape), params);
            let h = project_features(&mut pass, &g, &f.proj)?;
            let out = encoder_forward(
                &mut pass,
                h,
                &g,
                Some(f.types),
                &f.layers,
                f.edges,
                &TypeAwareSettings::default(),
                LEAKY,
                LEAKY,
            )?;
            let sq = pass.tape.mul(out.h, out.h)?;
            let loss = pass.tape.sum_all(sq)?;
            *pass_tape = pass.tape;
            Ok(loss)
        },
        &f.store,
        1e-5,
        8,
        0,
    )
    .unwrap();
    assert!(report.max_relative_error < 1e-4, "{report:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn attention_rows_sum_to_one(seed in 0u64..1000, n in 3usize..25, m in 0usize..80) {
        let g = random_graph(n, 3, 2, m, 3, seed);
        let f = build(&g, 4, 2, 3, seed + 1);
        let (_, alphas) = run(&f, &g, Some(f.types), &TypeAwareSettings { beta: 0.3, ..TypeAwareSettings::default() });
        for layer in &alphas {
            for a in layer {
                for v in 0..n {
                    let s: f64 = g.in_edges(v).map(|k| a.data()[k]).sum();
                    prop_assert!((s - 1.0).abs() < 1e-9);
                }
            }
        }
    }
}
