use std::collections::BTreeSet;

use histograph_core::features::FeatureMatrix;
use histograph_core::graph_build::{
    build_knn_graph, build_rag, deserialize_graph, knn_candidates, serialize_graph, EntityGraph, KnnParams,
};
use histograph_core::{EntityTable, LabelMap};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn feats_for(ids: Vec<u32>) -> FeatureMatrix {
    let n = ids.len();
    FeatureMatrix::new(ids, vec!["v".into()], (0..n).map(|i| i as f64 * 0.5).collect()).unwrap()
}

/// Sort every other node by (distance, index), keep k, prune, union.
fn knn_oracle(pts: &[(f64, f64)], k: usize, threshold: Option<f64>) -> BTreeSet<(usize, usize)> {
    let mut edges = BTreeSet::new();
    for (i, p) in pts.iter().enumerate() {
        let mut others: Vec<(f64, usize)> = pts
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(j, q)| ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2), j))
            .collect();
        others.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for &(d2, j) in others.iter().take(k) {
            if threshold.is_none_or(|t| d2.sqrt() <= t) {
                edges.insert((i.min(j), i.max(j)));
            }
        }
    }
    edges
}

fn random_points(rng: &mut impl Rng, n: usize, side: f64, integer: bool) -> Vec<(f64, f64)> {
    (0..n)
        .map(|_| {
            let (r, c) = (rng.random_range(0.0..side), rng.random_range(0.0..side));
            if integer {
                (r.floor(), c.floor())
            } else {
                (r, c)
            }
        })
        .collect()
}

#[test]
fn knn_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for seed in 0..100 {
        let n = if seed % 4 == 0 { rng.random_range(256..700) } else { rng.random_range(1..300) };
        let side = rng.random_range(50.0..800.0);
        let pts = random_points(&mut rng, n, side, seed % 3 == 0);
        let k = rng.random_range(1..9);
        let threshold = if seed % 5 == 0 { None } else { Some(rng.random_range(5.0..120.0)) };
        let table = EntityTable::from_centroids(&pts);
        let params = KnnParams { k, threshold };
        let g = build_knn_graph(&table, &feats_for(table.ids()), &params).unwrap();
        let got: BTreeSet<_> = g.edges().iter().copied().collect();
        assert_eq!(got, knn_oracle(&pts, k, threshold), "seed {seed}, n {n}, k {k}, t {threshold:?}");

        let cands = knn_candidates(&pts, &params).unwrap();
        assert!(cands.iter().all(|c| c.len() <= k));
        if let Some(t) = threshold {
            for &(u, v) in g.edges() {
                let (a, b) = (pts[u], pts[v]);
                assert!(((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt() <= t);
            }
        }
    }
}

#[test]
fn spec_sized_knn_case() {
    let mut rng = ChaCha8Rng::seed_from_u64(200);
    let pts = random_points(&mut rng, 200, 300.0, false);
    let table = EntityTable::from_centroids(&pts);
    let g = build_knn_graph(&table, &feats_for(table.ids()), &KnnParams { k: 5, threshold: Some(50.0) }).unwrap();
    let got: BTreeSet<_> = g.edges().iter().copied().collect();
    assert_eq!(got, knn_oracle(&pts, 5, Some(50.0)));
}

/// Every pair of labels seen across any of the 8 neighbor offsets.
fn rag_oracle(lm: &LabelMap) -> BTreeSet<(u32, u32)> {
    let (h, w) = (lm.height() as isize, lm.width() as isize);
    let mut pairs = BTreeSet::new();
    for r in 0..h {
        for c in 0..w {
            for dr in -1..=1 {
                for dc in -1..=1 {
                    let (nr, nc) = (r + dr, c + dc);
                    if nr < 0 || nc < 0 || nr >= h || nc >= w {
                        continue;
                    }
                    let (a, b) = (lm.get(r as usize, c as usize), lm.get(nr as usize, nc as usize));
                    if a != b && a > 0 && b > 0 {
                        pairs.insert((a.min(b), a.max(b)));
                    }
                }
            }
        }
    }
    pairs
}

fn rag_edges_as_labels(g: &EntityGraph, lm: &LabelMap) -> BTreeSet<(u32, u32)> {
    let order: BTreeSet<u32> = lm.labels().iter().copied().filter(|&l| l > 0).collect();
    let order: Vec<u32> = order.into_iter().collect();
    g.edges().iter().map(|&(u, v)| (order[u], order[v])).collect()
}

#[test]
fn rag_matches_pixel_scan_on_voronoi() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..12 {
        let seeds = random_points(&mut rng, 12, 64.0, false);
        let labels: Vec<u32> = (0..64 * 64)
            .map(|i| {
                let (r, c) = ((i / 64) as f64, (i % 64) as f64);
                let nearest = (0..12)
                    .min_by(|&a, &b| {
                        let da = (seeds[a].0 - r).powi(2) + (seeds[a].1 - c).powi(2);
                        let db = (seeds[b].0 - r).powi(2) + (seeds[b].1 - c).powi(2);
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                nearest as u32 + 1
            })
            .collect();
        let lm = LabelMap::from_sparse(64, 64, labels).unwrap();
        let table = EntityTable::from_label_map(&lm);
        let g = build_rag(&lm, &feats_for(table.ids()), &table).unwrap();
        assert_eq!(rag_edges_as_labels(&g, &lm), rag_oracle(&lm));
    }
}

#[test]
fn rag_with_void_and_two_halves() {
    let halves = LabelMap::new(8, 8, (0..64).map(|i| if i % 8 < 4 { 1 } else { 2 }).collect()).unwrap();
    let t = EntityTable::from_label_map(&halves);
    assert_eq!(build_rag(&halves, &feats_for(t.ids()), &t).unwrap().edges(), &[(0, 1)]);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let labels: Vec<u32> = (0..32 * 32).map(|_| rng.random_range(0..6)).collect();
    let lm = LabelMap::from_sparse(32, 32, labels).unwrap();
    let t = EntityTable::from_label_map(&lm);
    let g = build_rag(&lm, &feats_for(t.ids()), &t).unwrap();
    assert_eq!(rag_edges_as_labels(&g, &lm), rag_oracle(&lm));
    assert!(build_rag(&lm, &feats_for(vec![1, 2]), &t).is_err());
}

fn random_graph(rng: &mut impl Rng, n: usize, d: usize) -> EntityGraph {
    let mut edges = BTreeSet::new();
    for _ in 0..n * 2 {
        let (u, v) = (rng.random_range(0..n.max(1)), rng.random_range(0..n.max(1)));
        if u != v {
            edges.insert((u.min(v), u.max(v)));
        }
    }
    let features = (0..n * d).map(|_| rng.random_range(-1e3..1e3) * rng.random::<f64>()).collect();
    let centroids = (0..n).map(|_| (rng.random::<f64>() * 512.0, rng.random::<f64>() / 3.0)).collect();
    let names = (0..d).map(|i| format!("f{i}")).collect();
    EntityGraph::new(n, edges.into_iter().collect(), features, centroids, names).unwrap()
}

#[test]
fn graph_json_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.json");
    let empty = EntityGraph::new(0, vec![], vec![], vec![], vec!["a".into()]).unwrap();
    serialize_graph(&empty, &path).unwrap();
    assert_eq!(deserialize_graph(&path).unwrap(), empty);
    let one = EntityGraph::new(1, vec![], vec![0.1], vec![(2.5, 3.25)], vec!["a".into()]).unwrap();
    serialize_graph(&one, &path).unwrap();
    assert_eq!(deserialize_graph(&path).unwrap(), one);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn random_graph_round_trip_is_exact(n in 0usize..40, d in 0usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_graph(&mut rng, n, d);
        let back = EntityGraph::from_json(&g.to_json().unwrap()).unwrap();
        prop_assert_eq!(back.features(), g.features());
        prop_assert_eq!(back.centroids(), g.centroids());
        prop_assert_eq!(back.edges(), g.edges());
        prop_assert_eq!(back, g);
    }
}
