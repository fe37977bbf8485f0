//! Entity graphs: thresholded kNN over centroids, region adjacency over
//! label maps, and their JSON form.

use std::collections::BTreeSet;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::raster::{read_text, write_file, EntityTable, LabelMap};
use crate::superpixel::adjacent_pairs;

/// Undirected graph over entities with per-node features and centroids.
#[derive(Clone, Debug, PartialEq)]
pub struct EntityGraph {
    num_nodes: usize,
    /// `(u, v)` with `u < v`, sorted, no duplicates.
    edges: Vec<(usize, usize)>,
    /// Row-major `num_nodes x feature_names.len()`.
    features: Vec<f64>,
    centroids: Vec<(f64, f64)>,
    feature_names: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct GraphJson {
    num_nodes: usize,
    edges: Vec<[usize; 2]>,
    node_features: Vec<Vec<f64>>,
    centroids: Vec<[f64; 2]>,
    feature_names: Vec<String>,
}

impl EntityGraph {
    pub fn new(
        num_nodes: usize,
        edges: Vec<(usize, usize)>,
        features: Vec<f64>,
        centroids: Vec<(f64, f64)>,
        feature_names: Vec<String>,
    ) -> Result<Self> {
        let d = feature_names.len();
        if features.len() != num_nodes * d {
            return Err(Error::schema(
                "node_features",
                format!("{} values for {num_nodes} nodes x {d} features", features.len()),
            ));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::schema("node_features", "non-finite value"));
        }
        if centroids.len() != num_nodes {
            return Err(Error::schema(
                "centroids",
                format!("{} centroids for {num_nodes} nodes", centroids.len()),
            ));
        }
        for w in edges.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::schema("edges", format!("edges not strictly sorted at {:?}", w[1])));
            }
        }
        if let Some(e) = edges.iter().find(|&&(u, v)| u >= v || v >= num_nodes) {
            return Err(Error::schema("edges", format!("invalid edge {e:?} for {num_nodes} nodes")));
        }
        Ok(Self {
            num_nodes,
            edges,
            features,
            centroids,
            feature_names,
        })
    }

    /// Sorts and deduplicates the edges (orienting each as `u < v`) first.
    pub fn from_edge_set(
        edges: impl IntoIterator<Item = (usize, usize)>,
        feats: &FeatureMatrix,
        centroids: Vec<(f64, f64)>,
    ) -> Result<Self> {
        let set: BTreeSet<(usize, usize)> = edges
            .into_iter()
            .filter(|(u, v)| u != v)
            .map(|(u, v)| (u.min(v), u.max(v)))
            .collect();
        Self::new(
            feats.rows(),
            set.into_iter().collect(),
            feats.data.clone(),
            centroids,
            feats.names.clone(),
        )
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_names.len()
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn node_features(&self, v: usize) -> &[f64] {
        let d = self.feature_dim();
        &self.features[v * d..(v + 1) * d]
    }

    pub fn centroids(&self) -> &[(f64, f64)] {
        &self.centroids
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    /// Neighbor lists in ascending order.
    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.num_nodes];
        for &(u, v) in &self.edges {
            adj[u].push(v);
            adj[v].push(u);
        }
        adj.iter_mut().for_each(|a| a.sort_unstable());
        adj
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.num_nodes];
        for &(u, v) in &self.edges {
            deg[u] += 1;
            deg[v] += 1;
        }
        deg
    }

    /// Same graph with replaced node features.
    pub fn with_features(&self, features: Vec<f64>, names: Vec<String>) -> Result<Self> {
        Self::new(self.num_nodes, self.edges.clone(), features, self.centroids.clone(), names)
    }

    /// Relabels node `v` as `perm[v]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let n = self.num_nodes;
        let mut check = perm.to_vec();
        check.sort_unstable();
        if check != (0..n).collect::<Vec<_>>() {
            return Err(Error::input("not a permutation of the node indices"));
        }
        let d = self.feature_dim();
        let mut features = vec![0.0; n * d];
        let mut centroids = vec![(0.0, 0.0); n];
        for v in 0..n {
            features[perm[v] * d..(perm[v] + 1) * d].copy_from_slice(self.node_features(v));
            centroids[perm[v]] = self.centroids[v];
        }
        let edges: BTreeSet<(usize, usize)> = self
            .edges
            .iter()
            .map(|&(u, v)| (perm[u].min(perm[v]), perm[u].max(perm[v])))
            .collect();
        Self::new(n, edges.into_iter().collect(), features, centroids, self.feature_names.clone())
    }

    pub fn to_json(&self) -> Result<String> {
        let d = self.feature_dim();
        let doc = GraphJson {
            num_nodes: self.num_nodes,
            edges: self.edges.iter().map(|&(u, v)| [u, v]).collect(),
            node_features: (0..self.num_nodes).map(|v| self.features[v * d..(v + 1) * d].to_vec()).collect(),
            centroids: self.centroids.iter().map(|&(r, c)| [r, c]).collect(),
            feature_names: self.feature_names.clone(),
        };
        Ok(serde_json::to_string(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: GraphJson = serde_json::from_str(text)?;
        let d = doc.feature_names.len();
        if doc.node_features.len() != doc.num_nodes {
            return Err(Error::schema(
                "node_features",
                format!("{} rows for {} nodes", doc.node_features.len(), doc.num_nodes),
            ));
        }
        if let Some(i) = doc.node_features.iter().position(|r| r.len() != d) {
            return Err(Error::schema("node_features", format!("row {i} does not have {d} values")));
        }
        Self::new(
            doc.num_nodes,
            doc.edges.iter().map(|e| (e[0], e[1])).collect(),
            doc.node_features.concat(),
            doc.centroids.iter().map(|c| (c[0], c[1])).collect(),
            doc.feature_names,
        )
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), self.to_json()?.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&read_text(path.as_ref())?)
    }
}

pub fn serialize_graph(g: &EntityGraph, path: impl AsRef<Path>) -> Result<()> {
    g.save(path)
}

pub fn deserialize_graph(path: impl AsRef<Path>) -> Result<EntityGraph> {
    EntityGraph::load(path)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KnnParams {
    pub k: usize,
    /// Candidate edges longer than this many pixels are dropped.
    pub threshold: Option<f64>,
}

impl Default for KnnParams {
    fn default() -> Self {
        Self {
            k: 5,
            threshold: Some(50.0),
        }
    }
}

impl KnnParams {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::param("k must be >= 1"));
        }
        if let Some(t) = self.threshold {
            if !(t > 0.0) {
                return Err(Error::param(format!("distance threshold must be > 0, got {t}")));
            }
        }
        Ok(())
    }
}

const GRID_MIN_NODES: usize = 256;

fn dist2(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)
}

/// Inserts `(d2, j)` into the sorted best-`k` list.
fn offer(best: &mut Vec<(f64, usize)>, k: usize, cand: (f64, usize)) {
    let key = |x: &(f64, usize)| (x.0, x.1);
    if best.len() == k && key(&cand) >= key(&best[k - 1]) {
        return;
    }
    let at = best.partition_point(|x| key(x) < key(&cand));
    best.insert(at, cand);
    best.truncate(k);
}

fn brute_force_knn(pts: &[(f64, f64)], k: usize) -> Vec<Vec<(f64, usize)>> {
    pts.iter()
        .enumerate()
        .map(|(i, &p)| {
            let mut best = Vec::with_capacity(k + 1);
            for (j, &q) in pts.iter().enumerate() {
                if j != i {
                    offer(&mut best, k, (dist2(p, q), j));
                }
            }
            best
        })
        .collect()
}

fn grid_knn(pts: &[(f64, f64)], k: usize, threshold: Option<f64>) -> Vec<Vec<(f64, usize)>> {
    let n = pts.len();
    let (mut r0, mut c0, mut r1, mut c1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &(r, c) in pts {
        r0 = r0.min(r);
        c0 = c0.min(c);
        r1 = r1.max(r);
        c1 = c1.max(c);
    }
    let extent = ((r1 - r0) * (c1 - c0)).max((r1 - r0).max(c1 - c0));
    if !(extent > 0.0) {
        return brute_force_knn(pts, k);
    }
    // about k points per cell, never more than ~4N cells
    let mut cell = (extent * k as f64 / n as f64).sqrt();
    if let Some(t) = threshold {
        cell = cell.min(t);
    }
    let max_side = (r1 - r0).max(c1 - c0);
    cell = cell.max((extent / (4 * n) as f64).sqrt()).max(max_side / (4 * n) as f64);
    let rows = ((r1 - r0) / cell).floor() as usize + 1;
    let cols = ((c1 - c0) / cell).floor() as usize + 1;
    let cell_of = |p: (f64, f64)| {
        (
            (((p.0 - r0) / cell).floor() as usize).min(rows - 1),
            (((p.1 - c0) / cell).floor() as usize).min(cols - 1),
        )
    };
    let mut buckets = vec![Vec::new(); rows * cols];
    for (i, &p) in pts.iter().enumerate() {
        let (a, b) = cell_of(p);
        buckets[a * cols + b].push(i);
    }
    let max_ring = rows.max(cols);
    pts.iter()
        .enumerate()
        .map(|(i, &p)| {
            let (pr, pc) = cell_of(p);
            let mut best = Vec::with_capacity(k + 1);
            for ring in 0..=max_ring {
                let (lo_r, hi_r) = (pr as isize - ring as isize, pr as isize + ring as isize);
                let (lo_c, hi_c) = (pc as isize - ring as isize, pc as isize + ring as isize);
                for gr in lo_r.max(0)..=hi_r.min(rows as isize - 1) {
                    let on_edge_row = gr == lo_r || gr == hi_r;
                    let step = if on_edge_row { 1 } else { (hi_c - lo_c).max(1) as usize };
                    let mut gc = lo_c;
                    while gc <= hi_c {
                        if gc >= 0 && gc < cols as isize {
                            for &j in &buckets[gr as usize * cols + gc as usize] {
                                if j != i {
                                    offer(&mut best, k, (dist2(p, pts[j]), j));
                                }
                            }
                        }
                        gc += step as isize;
                    }
                }
                // unvisited points are at least `ring * cell` away
                let reach = ring as f64 * cell;
                let full = best.len() == k && best[k - 1].0 < reach * reach;
                let beyond = threshold.is_some_and(|t| reach > t);
                if full || beyond {
                    break;
                }
            }
            best
        })
        .collect()
}

/// Outgoing kNN candidates of every node after threshold pruning, nearest
/// first (ties to the lower index).
pub fn knn_candidates(centroids: &[(f64, f64)], params: &KnnParams) -> Result<Vec<Vec<usize>>> {
    params.validate()?;
    if centroids.iter().any(|c| !c.0.is_finite() || !c.1.is_finite()) {
        return Err(Error::NonFinite("centroid coordinate".into()));
    }
    let k = params.k.min(centroids.len().saturating_sub(1));
    if k == 0 {
        return Ok(vec![Vec::new(); centroids.len()]);
    }
    let raw = if centroids.len() < GRID_MIN_NODES {
        brute_force_knn(centroids, k)
    } else {
        grid_knn(centroids, k, params.threshold)
    };
    let limit = params.threshold.map_or(f64::INFINITY, |t| t * t);
    Ok(raw
        .into_iter()
        .map(|best| best.into_iter().filter(|&(d2, _)| d2 <= limit).map(|(_, j)| j).collect())
        .collect())
}

/// Union of every node's pruned kNN candidates as undirected edges.
pub fn build_knn_graph(table: &EntityTable, feats: &FeatureMatrix, params: &KnnParams) -> Result<EntityGraph> {
    if feats.ids != table.ids() {
        return Err(Error::shape("feature rows do not follow the entity table"));
    }
    let centroids = table.centroids();
    let cands = knn_candidates(&centroids, params)?;
    let edges = cands
        .iter()
        .enumerate()
        .flat_map(|(i, js)| js.iter().map(move |&j| (i, j)));
    EntityGraph::from_edge_set(edges, feats, centroids)
}

/// Region adjacency graph: nodes are the regions in label order, joined when
/// 8-adjacent.
pub fn build_rag(labels: &LabelMap, feats: &FeatureMatrix, table: &EntityTable) -> Result<EntityGraph> {
    let present: BTreeSet<u32> = labels.labels().iter().copied().filter(|&l| l > 0).collect();
    let order: Vec<u32> = present.into_iter().collect();
    if feats.rows() != order.len() {
        return Err(Error::shape(format!(
            "{} feature rows for {} regions",
            feats.rows(),
            order.len()
        )));
    }
    if feats.ids != order || table.ids() != order {
        return Err(Error::shape("feature rows and entity table must follow region labels"));
    }
    let index = |l: u32| order.binary_search(&l).expect("label present");
    let edges = adjacent_pairs(labels).into_iter().map(|(a, b)| (index(a), index(b)));
    EntityGraph::from_edge_set(edges, feats, table.centroids())
}

/// Tissue-node index of each cell: the region under its rounded centroid.
/// Cells over void (label 0) get `None` and are logged.
pub fn assign_cells_to_tissue(cells: &EntityTable, tissue: &LabelMap) -> Result<Vec<Option<usize>>> {
    let present: BTreeSet<u32> = tissue.labels().iter().copied().filter(|&l| l > 0).collect();
    let order: Vec<u32> = present.into_iter().collect();
    let mut dropped = 0;
    let out = cells
        .entities
        .iter()
        .map(|e| {
            let (r, c) = (e.centroid.0.round(), e.centroid.1.round());
            if r < 0.0 || c < 0.0 || r as usize >= tissue.height() || c as usize >= tissue.width() {
                return Err(Error::input(format!("cell {} lies outside the tissue map", e.id)));
            }
            let l = tissue.get(r as usize, c as usize);
            let idx = (l > 0).then(|| order.binary_search(&l).expect("label present"));
            if idx.is_none() {
                dropped += 1;
            }
            Ok(idx)
        })
        .collect::<Result<Vec<_>>>()?;
    if dropped > 0 {
        warn!("{dropped} cells fall on unlabeled tissue and are dropped");
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feats(n: usize) -> FeatureMatrix {
        FeatureMatrix::new((1..=n as u32).collect(), vec!["x".into()], (0..n).map(|i| i as f64).collect()).unwrap()
    }

    #[test]
    fn threshold_prunes_far_node() {
        let table = EntityTable::from_centroids(&[(0.0, 0.0), (0.0, 10.0), (0.0, 1000.0)]);
        let g = build_knn_graph(&table, &feats(3), &KnnParams { k: 1, threshold: Some(50.0) }).unwrap();
        assert_eq!(g.edges(), &[(0, 1)]);
    }

    #[test]
    fn large_k_gives_complete_graph() {
        let table = EntityTable::from_centroids(&[(0.0, 0.0), (3.0, 1.0), (7.0, 9.0), (2.0, 5.0)]);
        let g = build_knn_graph(&table, &feats(4), &KnnParams { k: 10, threshold: None }).unwrap();
        assert_eq!(g.edges().len(), 6);
        let single = build_knn_graph(&EntityTable::from_centroids(&[(1.0, 1.0)]), &feats(1), &KnnParams::default()).unwrap();
        assert!(single.edges().is_empty());
    }

    #[test]
    fn ties_go_to_lower_index() {
        let pts = [(0.0, 0.0), (0.0, 1.0), (0.0, -1.0)];
        let c = knn_candidates(&pts, &KnnParams { k: 1, threshold: None }).unwrap();
        assert_eq!(c[0], vec![1]);
    }

    #[test]
    fn two_by_two_grid_has_six_edges() {
        let labels = LabelMap::new(4, 4, vec![1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4]).unwrap();
        let table = EntityTable::from_label_map(&labels);
        let g = build_rag(&labels, &feats(4), &table).unwrap();
        assert_eq!(g.edges(), &[(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]);
    }

    #[test]
    fn schema_errors_name_the_key() {
        let err = EntityGraph::from_json(r#"{"num_nodes":2,"edges":[[0,5]],"node_features":[[1],[2]],"centroids":[[0,0],[1,1]],"feature_names":["a"]}"#)
            .unwrap_err()
            .to_string();
        assert!(err.contains("edges"), "{err}");
        let err = EntityGraph::from_json(r#"{"num_nodes":2,"edges":[],"node_features":[[1]],"centroids":[[0,0],[1,1]],"feature_names":["a"]}"#)
            .unwrap_err()
            .to_string();
        assert!(err.contains("node_features"), "{err}");
    }
}
