use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::graph::FeatureBlock;
use crate::numerics::grad_check;

fn shape(d: usize, t: usize, heads: usize, ffn: Option<usize>) -> DimShape {
    DimShape {
        d,
        t,
        heads,
        d_k: 3,
        d_v: 2,
        ffn_hidden: ffn,
    }
}

fn layers(store: &mut ParamStore, s: &DimShape, count: usize, seed: u64) -> Vec<DimLayerParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|l| DimLayerParams::new(store, &format!("dim{l}"), s, &mut rng).unwrap())
        .collect()
}

fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect(),
    )
    .unwrap()
}

fn apply(store: &ParamStore, x: &Tensor, t: usize, ls: &[DimLayerParams]) -> Tensor {
    let mut pass = Pass::eval(store);
    let h = pass.tape.constant(x.clone());
    let mut seq = expand(&mut pass, h, t).unwrap();
    for l in ls {
        seq = dim_self_attention(&mut pass, seq, l).unwrap().0;
    }
    let out = flatten(&mut pass, seq).unwrap();
    pass.tape.value(out).clone()
}

fn one_type_graph(n: usize) -> HeteroGraph {
    let nodes: Arc<[usize]> = (0..n).collect();
    let block = FeatureBlock {
        dim: 1,
        nodes,
        data: vec![0.0; n],
        fallback: None,
    };
    HeteroGraph::new(vec![0; n], 1, 1, vec![], vec![block]).unwrap()
}

#[test]
fn type_encode_is_hadamard() {
    let g = one_type_graph(1);
    let mut store = ParamStore::new();
    let m = NodeTypeTable(store.insert("m", Tensor::from_rows(&[&[3.0, 4.0]]).unwrap()));
    let mut pass = Pass::eval(&store);
    let h = pass
        .tape
        .constant(Tensor::from_rows(&[&[1.0, 2.0]]).unwrap());
    let out = type_encode(&mut pass, h, &g, Some(m)).unwrap();
    assert_eq!(pass.tape.value(out).data(), &[3.0, 8.0]);
}

#[test]
fn expand_splits_rows_into_tokens() {
    let store = ParamStore::new();
    let mut pass = Pass::eval(&store);
    let x = random(3, 4, 1);
    let h = pass.tape.constant(x.clone());
    let one = expand(&mut pass, h, 1).unwrap();
    assert_eq!((one.per_node, one.width), (4, 1));
    assert_eq!(pass.tape.shape(one.tokens), (12, 1));
    let two = expand(&mut pass, h, 2).unwrap();
    assert_eq!((two.per_node, two.width), (2, 2));
    assert_eq!(pass.tape.value(two.tokens).row(1), &x.row(0)[2..4]);
    let back = flatten(&mut pass, two).unwrap();
    assert_eq!(pass.tape.value(back), &x);
    assert!(matches!(expand(&mut pass, h, 3), Err(Error::Config(_))));
}

#[test]
fn single_token_attends_to_itself() {
    let s = shape(2, 2, 2, None);
    let mut store = ParamStore::new();
    let ls = layers(&mut store, &s, 1, 4);
    let x = random(2, 2, 5);
    let mut pass = Pass::eval(&store);
    let h = pass.tape.constant(x.clone());
    let seq = expand(&mut pass, h, 2).unwrap();
    let (out, weights) = dim_self_attention(&mut pass, seq, &ls[0]).unwrap();
    for w in &weights {
        assert_eq!(pass.tape.value(*w).data(), &[1.0, 1.0]);
    }
    let got = pass.tape.value(out.tokens).clone();

    // LayerNorm(concat_k(x W_v^k) W_o + x) by hand
    let layer = &ls[0];
    for r in 0..2 {
        let xr = x.row(r);
        let mut cat = Vec::new();
        for head in &layer.heads {
            let wv = store.get(head.w_v);
            for c in 0..wv.cols() {
                cat.push((0..2).map(|i| xr[i] * wv.get(i, c)).sum::<f64>());
            }
        }
        let wo = store.get(layer.w_o);
        let y: Vec<f64> = (0..2)
            .map(|c| xr[c] + (0..cat.len()).map(|i| cat[i] * wo.get(i, c)).sum::<f64>())
            .collect();
        let mean = (y[0] + y[1]) / 2.0;
        let var = ((y[0] - mean).powi(2) + (y[1] - mean).powi(2)) / 2.0;
        for (c, yc) in y.iter().enumerate() {
            let expected = (yc - mean) / (var + LAYER_NORM_EPS).sqrt();
            assert!((got.get(r, c) - expected).abs() < 1e-12);
        }
    }
}

#[test]
fn identical_tokens_get_uniform_weights() {
    let s = shape(5, 1, 2, None);
    let mut store = ParamStore::new();
    let ls = layers(&mut store, &s, 1, 6);
    let mut pass = Pass::eval(&store);
    let h = pass
        .tape
        .constant(Tensor::from_rows(&[&[0.7; 5], &[-1.3; 5]]).unwrap());
    let seq = expand(&mut pass, h, 1).unwrap();
    let (_, weights) = dim_self_attention(&mut pass, seq, &ls[0]).unwrap();
    for w in weights {
        for &a in pass.tape.value(w).data() {
            assert!((a - 0.2).abs() < 1e-15);
        }
    }
}

#[test]
fn zero_layers_return_type_encoding() {
    let g = one_type_graph(3);
    let mut store = ParamStore::new();
    let ones = NodeTypeTable(store.insert("m", Tensor::ones(1, 4)));
    let x = random(3, 4, 7);
    let mut pass = Pass::eval(&store);
    let h = pass.tape.constant(x.clone());
    let out = encoder_forward(&mut pass, h, &g, Some(ones), &[], 1).unwrap();
    assert_eq!(pass.tape.value(out), &x);
}

#[test]
fn nodes_are_processed_independently() {
    for (t, ffn) in [(1, None), (2, Some(3))] {
        let s = shape(6, t, 2, ffn);
        let mut store = ParamStore::new();
        let ls = layers(&mut store, &s, 2, 8);
        let mut x = random(5, 6, 9);
        // rows 1 and 3 are identical
        let dup = x.row(1).to_vec();
        x.data_mut()[18..24].copy_from_slice(&dup);
        let batch = apply(&store, &x, t, &ls);
        assert_eq!(batch.row(1), batch.row(3));
        for v in 0..5 {
            let alone = Tensor::new(1, 6, x.row(v).to_vec()).unwrap();
            let single = apply(&store, &alone, t, &ls);
            for (a, b) in single.data().iter().zip(batch.row(v)) {
                assert!((a - b).abs() <= 1e-15);
            }
        }
    }
}

#[test]
fn one_layer_gradients_match_finite_differences() {
    // at t = 1 the FFN output bias shifts a whole row and the norm cancels it
    for (t, ffn) in [(1, None), (2, Some(3))] {
        let s = shape(4, t, 2, ffn);
        let mut store = ParamStore::new();
        let ls = layers(&mut store, &s, 1, 10);
        let x = store.insert("x", random(3, 4, 11));
        let target = random(3, 4, 12);
        let report = grad_check(
            |tape, params| {
                let mut pass = Pass::with_tape(std::mem::take(tape), params);
                let h = pass.p(x);
                let seq = expand(&mut pass, h, t)?;
                let (out, _) = dim_self_attention(&mut pass, seq, &ls[0])?;
                let y = flatten(&mut pass, out)?;
                let c = pass.tape.constant(target.clone());
                let prod = pass.tape.mul(y, c)?;
                let loss = pass.tape.sum_all(prod)?;
                *tape = pass.tape;
                Ok(loss)
            },
            &store,
            1e-5,
            8,
            1,
        )
        .unwrap();
        assert!(report.max_relative_error < 1e-4, "{report:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn attention_rows_sum_to_one(seed in 0u64..1000, n in 1usize..6, t in 1usize..3) {
        let s = shape(6, t, 2, None);
        let mut store = ParamStore::new();
        let ls = layers(&mut store, &s, 1, seed);
        let mut pass = Pass::eval(&store);
        let h = pass.tape.constant(random(n, 6, seed + 1));
        let seq = expand(&mut pass, h, t).unwrap();
        let (_, weights) = dim_self_attention(&mut pass, seq, &ls[0]).unwrap();
        for w in weights {
            let v = pass.tape.value(w);
            for r in 0..v.rows() {
                prop_assert!((v.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }
}
