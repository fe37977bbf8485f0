use std::collections::BTreeSet;

use histograph_core::explain::{
    explainer_init, gnn_explainer, gnn_explainer_from, gradcam_pp_raw, gradcam_raw, graph_gradcam, graph_gradcam_pp,
    graph_lrp, render_overlay, top_k_entities, GnnExplainerParams, Saliency,
};
use histograph_core::gnn::{train, GnnConfig, GnnModel, GraphClassifier, LayerType, Readout, TrainConfig};
use histograph_core::graph_build::EntityGraph;
use histograph_core::synth::planted_graph;
use histograph_core::{EntityTable, Error, Image};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_graph(rng: &mut impl Rng, n: usize, d: usize, p: f64) -> EntityGraph {
    let mut edges = vec![];
    for u in 0..n {
        for v in u + 1..n {
            if rng.random_bool(p) {
                edges.push((u, v));
            }
        }
    }
    let features = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    EntityGraph::new(
        n,
        edges,
        features,
        (0..n).map(|i| (i as f64, 0.0)).collect(),
        (0..d).map(|i| format!("f{i}")).collect(),
    )
    .unwrap()
}

fn random_config(rng: &mut impl Rng, layer: LayerType, readout: Readout, d: usize) -> GnnConfig {
    GnnConfig {
        layer,
        input_dim: d,
        num_layers: rng.random_range(1..4),
        hidden: rng.random_range(2..9),
        mlp_depth: rng.random_range(1..3),
        head_hidden: rng.random_range(2..9),
        head_depth: rng.random_range(1..3),
        readout,
        num_classes: 3,
        gin_eps: rng.random_range(0.0..0.5),
        pna_delta: Some(1.0),
    }
}

/// Random architecture with every parameter, biases included, uniform.
fn random_model(rng: &mut impl Rng, layer: LayerType, readout: Readout, d: usize) -> GnnModel {
    let config = random_config(rng, layer, readout, d);
    let mut model = GnnModel::new(config, rng.random()).unwrap();
    for p in model.params_mut() {
        *p = rng.random_range(-0.8..0.8);
    }
    model
}

/// One hidden channel, linear head; `w` and `b` feed the layer, `head`
/// holds the class weights.
fn one_channel_model(w: f64, b: f64, head: [f64; 2]) -> GnnModel {
    let config = GnnConfig {
        layer: LayerType::Gin,
        input_dim: 1,
        num_layers: 1,
        hidden: 1,
        mlp_depth: 1,
        head_hidden: 1,
        head_depth: 1,
        readout: Readout::Mean,
        num_classes: 2,
        gin_eps: 0.0,
        pna_delta: None,
    };
    let mut model = GnnModel::new(config, 0).unwrap();
    let mut tensors = model.tensors();
    for t in &mut tensors {
        t.values = match t.name.as_str() {
            "layer0.mlp0.weight" => vec![w],
            "layer0.mlp0.bias" => vec![b],
            "head0.weight" => head.to_vec(),
            "head0.bias" => vec![0.0, 0.0],
            other => panic!("unexpected tensor {other}"),
        };
    }
    model.set_tensors(&tensors).unwrap();
    model
}

fn column_graph(values: &[f64], edges: Vec<(usize, usize)>) -> EntityGraph {
    let n = values.len();
    EntityGraph::new(n, edges, values.to_vec(), (0..n).map(|i| (0.0, i as f64)).collect(), vec!["x".into()]).unwrap()
}

fn argmax(v: &[f64]) -> usize {
    (0..v.len()).fold(0, |b, i| if v[i] > v[b] { i } else { b })
}

#[test]
fn cam_diagnostic_concentrates_on_signal_node() {
    let model = one_channel_model(1.0, 0.0, [1.0, 0.0]);
    let g = column_graph(&[0.0, 0.0, 0.0, 2.0, 0.0, 0.0], vec![]);
    let cam = graph_gradcam(&model, &g, 0, None).unwrap();
    assert_eq!(cam.scores, vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
    let pp = graph_gradcam_pp(&model, &g, 0, None).unwrap();
    assert_eq!(argmax(&pp.scores), 3);
    assert_eq!(pp.scores[3], 1.0);
    assert_eq!(cam.method, "gradcam");
    assert_eq!(pp.method, "gradcampp");
}

#[test]
fn cam_degenerate_maps() {
    let model = one_channel_model(1.0, 0.0, [1.0, 0.0]);
    let zeros = column_graph(&[0.0; 5], vec![(0, 1), (1, 2)]);
    assert_eq!(graph_gradcam(&model, &zeros, 0, None).unwrap().scores, vec![0.0; 5]);
    assert_eq!(graph_gradcam_pp(&model, &zeros, 0, None).unwrap().scores, vec![0.0; 5]);

    let single = column_graph(&[1.5], vec![]);
    assert_eq!(graph_gradcam_pp(&model, &single, 0, None).unwrap().scores, vec![1.0]);

    let negative = one_channel_model(1.0, 0.0, [-1.0, 0.0]);
    let g = column_graph(&[0.5, 1.0, 2.0], vec![(0, 1)]);
    assert_eq!(gradcam_pp_raw(&negative, &g, 0, None).unwrap(), vec![0.0; 3]);
    assert_eq!(graph_gradcam_pp(&negative, &g, 0, None).unwrap().scores, vec![0.0; 3]);
    assert_eq!(graph_gradcam(&negative, &g, 0, None).unwrap().scores, vec![0.0; 3]);

    assert!(matches!(graph_gradcam(&model, &g, 2, None), Err(Error::InvalidParameter(_))));
    assert!(matches!(graph_gradcam(&model, &g, 0, Some(1)), Err(Error::InvalidParameter(_))));
}

#[test]
fn cam_maps_are_bounded_and_equivariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for seed in 0..20 {
        let layer = if seed % 2 == 0 { LayerType::Gin } else { LayerType::Pna };
        let model = random_model(&mut rng, layer, Readout::Mean, 3);
        let n = rng.random_range(1..15);
        let g = random_graph(&mut rng, n, 3, 0.3);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let pg = g.permuted(&perm).unwrap();
        let class = rng.random_range(0..3);
        let l = Some(rng.random_range(0..model.config().num_layers));
        for raw in [gradcam_raw(&model, &g, class, l).unwrap(), gradcam_pp_raw(&model, &g, class, l).unwrap()] {
            assert!(raw.iter().all(|&s| s >= 0.0));
        }
        for explain in [graph_gradcam, graph_gradcam_pp] {
            let s = explain(&model, &g, class, l).unwrap();
            let ps = explain(&model, &pg, class, l).unwrap();
            assert!(s.scores.iter().all(|&v| (0.0..=1.0).contains(&v)));
            for v in 0..n {
                assert!((s.scores[v] - ps.scores[perm[v]]).abs() <= 1e-9, "seed {seed}");
            }
        }
    }
}

#[test]
fn lrp_conserves_the_class_logit() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for seed in 0..10 {
        let readout = if seed % 2 == 0 { Readout::Mean } else { Readout::Sum };
        let config = random_config(&mut rng, LayerType::Gin, readout, 4);
        let model = GnnModel::new(config, seed).unwrap();
        let n = rng.random_range(1..20);
        let g = random_graph(&mut rng, n, 4, 0.25);
        let class = rng.random_range(0..3);
        let y = model.logits(&g).unwrap()[class];
        let r = graph_lrp(&model, &g, class).unwrap();
        let total: f64 = r.scores.iter().sum();
        assert!((total - y).abs() <= 1e-3 * y.abs().max(1.0), "seed {seed}: {total} vs {y}");
    }
}

#[test]
fn lrp_single_node_identity_and_pna_rejection() {
    let model = one_channel_model(1.0, 0.0, [1.0, 0.0]);
    let r = graph_lrp(&model, &column_graph(&[2.5], vec![]), 0).unwrap();
    assert!((r.scores[0] - 2.5).abs() < 1e-5);

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let pna = random_model(&mut rng, LayerType::Pna, Readout::Mean, 2);
    let g = random_graph(&mut rng, 4, 2, 0.5);
    assert!(matches!(graph_lrp(&pna, &g, 0), Err(Error::UnsupportedModel(_))));
}

#[test]
fn lrp_is_permutation_equivariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10 {
        let model = random_model(&mut rng, LayerType::Gin, Readout::Mean, 2);
        let n = rng.random_range(2..12);
        let g = random_graph(&mut rng, n, 2, 0.4);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let a = graph_lrp(&model, &g, 1).unwrap();
        let b = graph_lrp(&model, &g.permuted(&perm).unwrap(), 1).unwrap();
        for v in 0..n {
            assert!((a.scores[v] - b.scores[perm[v]]).abs() <= 1e-9);
        }
    }
}

#[test]
fn explainer_sparsity_and_zero_model() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let model = random_model(&mut rng, LayerType::Gin, Readout::Mean, 2);
    let g = random_graph(&mut rng, 12, 2, 0.3);
    let sparse = GnnExplainerParams {
        steps: 200,
        lr: 0.1,
        lambda_sparsity: 1e3,
        ..Default::default()
    };
    let s = gnn_explainer(&model, &g, 0, &sparse).unwrap();
    assert!(s.scores.iter().sum::<f64>() / 12.0 < 0.1);

    let mut zero = random_model(&mut rng, LayerType::Gin, Readout::Mean, 2);
    zero.params_mut().iter_mut().for_each(|p| *p = 0.0);
    let params = GnnExplainerParams {
        lambda_sparsity: 0.0,
        lambda_entropy: 0.0,
        ..Default::default()
    };
    let (s, objective) = gnn_explainer_from(&zero, &g, 1, &params, &explainer_init(12, 0)).unwrap();
    let mean = s.scores.iter().sum::<f64>() / 12.0;
    assert!(mean > 0.4 && mean < 0.6);
    let first = objective[0];
    assert!(objective.iter().all(|&o| o.is_finite() && (o - first).abs() < 1e-12));
    assert!((first - 3f64.ln()).abs() < 1e-12);
}

#[test]
fn explainer_is_equivariant_with_permuted_noise() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let model = random_model(&mut rng, LayerType::Pna, Readout::Mean, 2);
    let n = 9;
    let g = random_graph(&mut rng, n, 2, 0.4);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    let init = explainer_init(n, 4);
    let mut pinit = vec![0.0; n];
    for v in 0..n {
        pinit[perm[v]] = init[v];
    }
    let params = GnnExplainerParams::default();
    let (a, oa) = gnn_explainer_from(&model, &g, 2, &params, &init).unwrap();
    let (b, ob) = gnn_explainer_from(&model, &g.permuted(&perm).unwrap(), 2, &params, &pinit).unwrap();
    assert_eq!(oa.len(), 100);
    assert!(oa.iter().zip(&ob).all(|(x, y)| x.is_finite() && (x - y).abs() <= 1e-9));
    for v in 0..n {
        assert!((a.scores[v] - b.scores[perm[v]]).abs() <= 1e-9);
    }
    assert!(gnn_explainer(&model, &g, 0, &GnnExplainerParams { steps: 0, ..Default::default() }).is_err());
}

/// Trains a small GIN on planted graphs and explains a fresh one; returns
/// (marked mean, unmarked mean) for GNNExplainer and for |LRP|.
fn planted_run(seed: u64) -> ([f64; 2], [f64; 2]) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<(EntityGraph, usize)> = (0..40)
        .map(|_| {
            let n = rng.random_range(10..16);
            let p = planted_graph(&mut rng, n, 0.2);
            (p.graph, p.label)
        })
        .collect();
    let config = GnnConfig {
        input_dim: 2,
        num_layers: 2,
        hidden: 16,
        head_hidden: 16,
        ..Default::default()
    };
    let mut model = GnnModel::new(config, seed).unwrap();
    train(&mut model, &data, &TrainConfig { epochs: 60, seed, ..Default::default() }).unwrap();
    let probe = planted_graph(&mut rng, 14, 0.2);
    let split = |scores: &[f64]| {
        let (mut m, mut u) = (0.0, 0.0);
        for (v, s) in scores.iter().enumerate() {
            if probe.marked.contains(&v) {
                m += s / 3.0;
            } else {
                u += s / 11.0;
            }
        }
        [m, u]
    };
    let params = GnnExplainerParams {
        steps: 300,
        lr: 0.1,
        seed,
        ..Default::default()
    };
    let mask = gnn_explainer(&model, &probe.graph, probe.label, &params).unwrap();
    let lrp = graph_lrp(&model, &probe.graph, probe.label).unwrap();
    let abs: Vec<f64> = lrp.scores.iter().map(|r| r.abs()).collect();
    (split(&mask.scores), split(&abs))
}

#[test]
fn planted_signal_ranks_marked_nodes_first() {
    let (mut explainer_hits, mut lrp_hits) = (0, 0);
    for seed in 0..10 {
        let (mask, lrp) = planted_run(seed);
        explainer_hits += usize::from(mask[0] > mask[1]);
        lrp_hits += usize::from(lrp[0] > lrp[1]);
    }
    assert!(explainer_hits >= 9, "gnnexplainer {explainer_hits}/10");
    assert!(lrp_hits >= 9, "lrp {lrp_hits}/10");
}

fn top_k_oracle(scores: &[f64], ids: &[u32], k: usize) -> Vec<u32> {
    let mut all: Vec<(f64, u32)> = scores.iter().copied().zip(ids.iter().copied()).collect();
    // Insertion sort as an independent ordering.
    for i in 1..all.len() {
        let mut j = i;
        while j > 0 && (all[j].0 > all[j - 1].0 || (all[j].0 == all[j - 1].0 && all[j].1 < all[j - 1].1)) {
            all.swap(j, j - 1);
            j -= 1;
        }
    }
    all.into_iter().take(k).map(|(_, id)| id).collect()
}

#[test]
fn top_k_examples() {
    let t = EntityTable::from_centroids(&[(0.0, 0.0), (1.0, 0.0), (2.0, 0.0)]);
    let s = Saliency {
        scores: vec![0.1, 0.9, 0.9],
        class: 0,
        method: "lrp".into(),
    };
    assert_eq!(top_k_entities(&s, &t, 1).unwrap(), vec![2]);
    assert_eq!(top_k_entities(&s, &t, 3).unwrap(), vec![2, 3, 1]);
    assert_eq!(top_k_entities(&s, &t, 50).unwrap().len(), 3);
}

#[test]
fn saliency_json_and_overlay() {
    let dir = tempfile::tempdir().unwrap();
    let s = Saliency {
        scores: vec![0.0, 0.25, 1.0 / 3.0],
        class: 1,
        method: "gradcam".into(),
    };
    let path = dir.path().join("s.json");
    s.save(&path).unwrap();
    assert_eq!(Saliency::load(&path).unwrap(), s);
    let v: serde_json::Value = serde_json::from_str(&s.to_json().unwrap()).unwrap();
    let keys: BTreeSet<&str> = v.as_object().unwrap().keys().map(|k| k.as_str()).collect();
    assert_eq!(keys, BTreeSet::from(["scores", "class", "method"]));

    let img = Image::filled(20, 20, [200, 200, 200]).unwrap();
    let out = render_overlay(&img, &[(5.0, 5.0), (15.0, 15.0)], &[0.0, 2.0], 2.0).unwrap();
    assert_eq!(out.pixel(5, 5), [0, 0, 255]);
    assert_eq!(out.pixel(15, 15), [255, 0, 0]);
    assert_eq!(out.pixel(10, 10), [200, 200, 200]);
    assert!(render_overlay(&img, &[(5.0, 5.0)], &[], 2.0).is_err());
}

proptest! {
    #[test]
    fn top_k_matches_full_sort(scores in prop::collection::vec(0u8..6, 1..40), k in 1usize..50) {
        let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
        let pts: Vec<(f64, f64)> = (0..scores.len()).map(|i| (i as f64, 0.0)).collect();
        let t = EntityTable::from_centroids(&pts);
        let s = Saliency { scores: scores.clone(), class: 0, method: "x".into() };
        prop_assert_eq!(top_k_entities(&s, &t, k).unwrap(), top_k_oracle(&scores, &t.ids(), k));
    }
}
