use std::sync::Arc;

use super::*;
use crate::graph::Labels;
use crate::numerics::grad_check;
use crate::testutil::random_graph;

fn small_config() -> CascadeConfig {
    CascadeConfig {
        d: 4,
        heads: 2,
        dim_heads: 2,
        d_k: 3,
        d_v: 2,
        dropout: 0.0,
        seed: 7,
        ..CascadeConfig::default()
    }
}

fn labeled(g: HeteroGraph, classes: usize) -> HeteroGraph {
    let of = (0..g.num_nodes())
        .map(|v| (g.node_type(v) == 0).then_some(v % classes))
        .collect();
    g.with_labels(Labels::Single { classes, of }).unwrap()
}

fn shape_of(g: &HeteroGraph) -> GraphShape {
    GraphShape::of(g)
}

fn eval(model: &HetCan, g: &HeteroGraph, opts: ForwardOptions) -> Tensor {
    let mut pass = Pass::eval(&model.params);
    let h = model.forward_with(&mut pass, g, opts).unwrap();
    pass.tape.value(h).clone()
}

#[test]
fn output_width_is_twice_hidden() {
    let g = random_graph(15, 3, 2, 40, 3, 1);
    for (blocks, dim_layers) in [(1, 1), (2, 1), (3, 0), (2, 2)] {
        let config = CascadeConfig {
            blocks,
            dim_layers,
            ..small_config()
        };
        let model = HetCan::new(config, shape_of(&g)).unwrap();
        assert_eq!(model.embed(&g).unwrap().shape(), (15, 8));
    }
}

#[test]
fn left_half_is_type_aware_output() {
    let g = random_graph(12, 2, 2, 30, 3, 2);
    let model = HetCan::new(small_config(), shape_of(&g)).unwrap();
    let out = model.embed(&g).unwrap();
    let mut pass = Pass::eval(&model.params);
    let h = type_aware::project_features(&mut pass, &g, &model.projection).unwrap();
    let b = &model.blocks[0];
    let enc = type_aware::encoder_forward(
        &mut pass,
        h,
        &g,
        Some(b.type_table),
        &b.type_layers,
        model.edge_table,
        &model.settings(),
        Activation::LeakyRelu(0.2),
        Activation::Identity,
    )
    .unwrap();
    let hp = pass.tape.value(enc.h);
    for v in 0..12 {
        assert_eq!(&out.row(v)[..4], hp.row(v));
    }
}

#[test]
fn no_dim_encoder_repeats_type_encoded_left_half() {
    let g = random_graph(12, 3, 2, 30, 3, 3);
    let config = CascadeConfig {
        dim_layers: 0,
        ..small_config()
    };
    let mut model = HetCan::new(config, shape_of(&g)).unwrap();
    model.freeze_type_tables_to_ones();
    let out = model.embed(&g).unwrap();
    for v in 0..12 {
        assert_eq!(&out.row(v)[..4], &out.row(v)[4..]);
    }
}

#[test]
fn frozen_ones_match_skipped_tables() {
    let g = random_graph(20, 3, 3, 60, 3, 4);
    for share in [true, false] {
        let config = CascadeConfig {
            blocks: 2,
            share_type_table: share,
            ..small_config()
        };
        let mut model = HetCan::new(config, shape_of(&g)).unwrap();
        model.freeze_type_tables_to_ones();
        let a = eval(&model, &g, ForwardOptions::default());
        let b = eval(
            &model,
            &g,
            ForwardOptions {
                skip_type_tables: true,
            },
        );
        assert!(a.max_abs_diff(&b).unwrap() <= 1e-12);
    }
}

#[test]
fn l2_output_rows_have_unit_norm() {
    let g = random_graph(15, 2, 2, 40, 3, 5);
    let config = CascadeConfig {
        l2_normalize_output: Some(true),
        ..small_config()
    };
    let model = HetCan::new(config, shape_of(&g)).unwrap();
    let out = model.embed(&g).unwrap();
    for v in 0..15 {
        let n: f64 = out.row(v).iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-9);
    }
}

#[test]
fn eval_forward_is_deterministic_and_order_free() {
    let g = random_graph(25, 3, 2, 80, 3, 6);
    let config = CascadeConfig {
        blocks: 2,
        dropout: 0.5,
        ..small_config()
    };
    let model = HetCan::new(config.clone(), shape_of(&g)).unwrap();
    let a = model.embed(&g).unwrap();
    let again = HetCan::new(config, shape_of(&g))
        .unwrap()
        .embed(&g)
        .unwrap();
    assert_eq!(a, again);
    let b = model.embed(&g.shuffle_neighbor_order(3)).unwrap();
    assert!(a.max_abs_diff(&b).unwrap() <= 1e-12);
}

#[test]
fn graph_without_self_loops_is_rejected() {
    let g = random_graph(10, 2, 2, 20, 3, 7);
    let model = HetCan::new(small_config(), shape_of(&g)).unwrap();
    let bare = g.without_edges(
        &g.edges()
            .filter(|e| e.edge_type == g.self_loop_type())
            .collect(),
    );
    assert!(matches!(model.embed(&bare), Err(Error::Graph(_))));
}

#[test]
fn zero_head_gives_uniform_probabilities() {
    let g = labeled(random_graph(10, 2, 2, 20, 3, 8), 3);
    let mut model = HetCan::new(small_config(), shape_of(&g)).unwrap();
    let head = model.head.unwrap();
    model.params.get_mut(head).data_mut().fill(0.0);
    let logits = model.logits(&g).unwrap();
    assert!(logits.data().iter().all(|&z| z == 0.0));
    let nodes: Arc<[usize]> = g.labels().unwrap().labeled_nodes().into();
    let labels: Arc<[usize]> = nodes.iter().map(|&v| v % 3).collect();
    let mut pass = Pass::eval(&model.params);
    let h = model.forward(&mut pass, &g).unwrap();
    let z = model.classify(&mut pass, h).unwrap();
    let loss = classification_loss(&mut pass, z, &Batch::Nodes { nodes, labels }).unwrap();
    assert!((pass.tape.value(loss).data()[0] - 3f64.ln()).abs() < 1e-12);
}

#[test]
fn cross_entropy_and_bce_match_scalar_formulas() {
    let store = ParamStore::new();
    let mut pass = Pass::eval(&store);
    let z = pass
        .tape
        .constant(Tensor::from_rows(&[&[1.0, -1.0], &[0.5, 2.0]]).unwrap());
    let batch = Batch::Nodes {
        nodes: vec![0, 1].into(),
        labels: vec![0, 0].into(),
    };
    let loss = classification_loss(&mut pass, z, &batch).unwrap();
    let p0 = 1f64.exp() / (1f64.exp() + (-1f64).exp());
    let p1 = 0.5f64.exp() / (0.5f64.exp() + 2f64.exp());
    let expected = -(p0.ln() + p1.ln()) / 2.0;
    assert!((pass.tape.value(loss).data()[0] - expected).abs() < 1e-14);

    let zero = pass.tape.constant(Tensor::zeros(1, 1));
    let multi = Batch::MultiLabel {
        nodes: vec![0].into(),
        targets: vec![1.0].into(),
    };
    let bce = classification_loss(&mut pass, zero, &multi).unwrap();
    // sigmoid(0) = 0.5
    assert!((pass.tape.value(bce).data()[0] - 2f64.ln()).abs() < 1e-15);
}

#[test]
fn link_score_examples() {
    let h = Tensor::from_rows(&[&[0.6, 0.8], &[0.6, 0.8], &[-0.8, 0.6], &[-0.6, -0.8]]).unwrap();
    assert!((link_score(&h, 0, 1) - 1.0).abs() < 1e-15);
    assert_eq!(link_score(&h, 0, 2), 0.0);
    assert!((link_score(&h, 0, 3) + 1.0).abs() < 1e-15);
}

#[test]
fn link_loss_examples() {
    let sigmoid = |x: f64| 1.0 / (1.0 + (-x).exp());
    let store = ParamStore::new();
    let mut pass = Pass::eval(&store);
    let h = pass
        .tape
        .constant(Tensor::from_rows(&[&[0.0, 0.0], &[1.0, 1.0]]).unwrap());
    let batch = LinkBatch::new(&[(0, 1)], &[(1, 0), (0, 0)]);
    let loss = link_loss(&mut pass, h, &batch).unwrap();
    assert!((pass.tape.value(loss).data()[0] - 2f64.ln()).abs() < 1e-15);

    // positive scores 2, negative scores -1
    let h = pass
        .tape
        .constant(Tensor::from_rows(&[&[1.0, 1.0], &[1.0, 1.0], &[-1.0, 0.0]]).unwrap());
    let batch = LinkBatch::new(&[(0, 1)], &[(0, 2)]);
    let loss = link_loss(&mut pass, h, &batch).unwrap();
    let expected = -0.5 * (sigmoid(2.0).ln() + (1.0 - sigmoid(-1.0)).ln());
    assert!((pass.tape.value(loss).data()[0] - expected).abs() < 1e-14);

    let far = pass
        .tape
        .constant(Tensor::from_rows(&[&[30.0], &[30.0], &[-30.0]]).unwrap());
    let loss = link_loss(&mut pass, far, &batch).unwrap();
    assert!(pass.tape.value(loss).data()[0] < 1e-12);

    let none = LinkBatch::new(&[], &[(0, 2)]);
    assert!(link_loss(&mut pass, h, &none).is_err());
}

fn node_batch(g: &HeteroGraph) -> Batch {
    let nodes: Vec<usize> = g.labels().unwrap().labeled_nodes();
    let labels: Vec<usize> = match g.labels().unwrap() {
        Labels::Single { of, .. } => nodes.iter().map(|&v| of[v].unwrap()).collect(),
        _ => unreachable!(),
    };
    Batch::Nodes {
        nodes: nodes.into(),
        labels: labels.into(),
    }
}

#[test]
fn zero_learning_rate_leaves_parameters() {
    let g = labeled(random_graph(12, 2, 2, 30, 3, 9), 2);
    let mut model = HetCan::new(small_config(), shape_of(&g)).unwrap();
    let before = model.params.clone();
    let mut adam = Adam::new(
        AdamSettings {
            lr: 0.0,
            ..AdamSettings::default()
        },
        &model.params,
    );
    model.train_step(&g, &node_batch(&g), &mut adam, 0).unwrap();
    for ((_, _, a), (_, _, b)) in before.iter().zip(model.params.iter()) {
        assert_eq!(a.data(), b.data());
    }
}

#[test]
fn small_steps_decrease_loss() {
    let g = labeled(random_graph(12, 2, 2, 30, 3, 10), 2);
    let mut model = HetCan::new(small_config(), shape_of(&g)).unwrap();
    let batch = node_batch(&g);
    let mut adam = Adam::new(
        AdamSettings {
            lr: 1e-3,
            weight_decay: 0.0,
            ..AdamSettings::default()
        },
        &model.params,
    );
    let first = model.train_step(&g, &batch, &mut adam, 0).unwrap().loss;
    let (pass, loss, _) = model.loss(&g, &batch, 0).unwrap();
    assert!(pass.tape.value(loss).data()[0] < first);
}

#[test]
fn frozen_parameters_do_not_move() {
    let g = labeled(random_graph(12, 3, 2, 30, 3, 11), 2);
    let mut model = HetCan::new(small_config(), shape_of(&g)).unwrap();
    model.freeze_type_tables_to_ones();
    let mut adam = Adam::new(AdamSettings::default(), &model.params);
    for s in 0..3 {
        model.train_step(&g, &node_batch(&g), &mut adam, s).unwrap();
    }
    for NodeTypeTable(id) in model.type_tables() {
        assert!(model.params.get(id).data().iter().all(|&x| x == 1.0));
    }
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let g = labeled(random_graph(12, 3, 2, 30, 3, 12), 3);
    let config = CascadeConfig {
        blocks: 2,
        d: 4,
        ..small_config()
    };
    let model = HetCan::new(config, shape_of(&g)).unwrap();
    let batch = node_batch(&g);
    let report = grad_check(
        |tape, params| {
            let mut pass = Pass::with_tape(std::mem::take(tape), params);
            let h = model.forward(&mut pass, &g)?;
            let z = model.classify(&mut pass, h)?;
            let loss = classification_loss(&mut pass, z, &batch)?;
            *tape = pass.tape;
            Ok(loss)
        },
        &model.params,
        1e-5,
        4,
        0,
    )
    .unwrap();
    // some entries are structurally zero (shift-invariant softmax inputs), where
    // central differences only resolve about 1e-10
    assert!(report.within(1e-4, 1e-9), "{:?}", report.worst_entries(3));
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let g = labeled(random_graph(14, 2, 3, 40, 3, 13), 2);
    let config = CascadeConfig {
        blocks: 2,
        share_type_table: false,
        ..small_config()
    };
    let mut model = HetCan::new(config, shape_of(&g)).unwrap();
    let mut adam = Adam::new(AdamSettings::default(), &model.params);
    for s in 0..2 {
        model.train_step(&g, &node_batch(&g), &mut adam, s).unwrap();
    }
    model.params.freeze(model.edge_table.0);
    let mut bytes = Vec::new();
    write_checkpoint(&mut bytes, &model, Some(&adam), 2).unwrap();
    let back = read_checkpoint(&mut bytes.as_slice()).unwrap();
    assert_eq!(back.epoch, 2);
    assert_eq!(back.adam.as_ref(), Some(&adam));
    assert!(back.model.params.is_frozen(model.edge_table.0));
    let a = model.logits(&g).unwrap();
    let b = back.model.logits(&g).unwrap();
    assert!(a
        .data()
        .iter()
        .zip(b.data())
        .all(|(x, y)| x.to_bits() == y.to_bits()));

    let mut plain = Vec::new();
    write_checkpoint(&mut plain, &model, None, 0).unwrap();
    assert!(read_checkpoint(&mut plain.as_slice())
        .unwrap()
        .adam
        .is_none());

    let mut wrong = bytes.clone();
    wrong[0] = b'X';
    assert!(matches!(
        read_checkpoint(&mut wrong.as_slice()),
        Err(Error::Checkpoint(_))
    ));
    let mut future = bytes.clone();
    future[8] = 9;
    let err = read_checkpoint(&mut future.as_slice()).err().unwrap();
    assert!(err.to_string().contains("version 9"), "{err}");
    let cut = &bytes[..bytes.len() - 3];
    assert!(matches!(
        read_checkpoint(&mut &cut[..]),
        Err(Error::Checkpoint(_))
    ));
}

#[test]
fn config_text_round_trips() {
    let c = CascadeConfig {
        beta: 0.125,
        l2_normalize_output: Some(false),
        task: Task::LinkPrediction,
        ..small_config()
    };
    assert_eq!(CascadeConfig::from_kv(&c.to_kv()).unwrap(), c);
    assert!(matches!(
        CascadeConfig::from_kv("bogus = 1"),
        Err(Error::Config(_))
    ));
    assert!(CascadeConfig::from_kv("d = 6\nt = 4").is_err());
}
