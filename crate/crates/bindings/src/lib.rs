//! Script-facing entry points. Everything crosses this boundary as the same
//! JSON/CSV artifacts the `histograph` CLI reads and writes, so a call here
//! and the matching CLI invocation serialize identically.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Deserialize;
use serde_json::Value;

use histograph_core::explain::{explain as run_explainer, top_k_entities, ExplainMethod, ExplainParams, Saliency};
use histograph_core::gnn::{GnnModel, GraphClassifier, Prediction};
use histograph_core::graph_build::EntityGraph;
use histograph_core::pipeline::{execute_op, Artifact, OpParams};
use histograph_core::raster::{decode_ppm, read_ppm};
use histograph_core::{EntityTable, Error, Image, Result};

#[cfg(feature = "python")]
mod python;

pub enum ImageSource<'a> {
    Path(&'a Path),
    Ppm(&'a [u8]),
}

impl ImageSource<'_> {
    fn load(&self) -> Result<Image> {
        match self {
            Self::Path(p) => read_ppm(p),
            Self::Ppm(bytes) => decode_ppm(bytes),
        }
    }
}

/// Per-stage params, each in the format of the CLI's `--params` file.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CellGraphParams {
    pub nuclei: Value,
    pub features: Value,
    pub graph: Value,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TissueGraphParams {
    pub superpixel: Value,
    pub features: Value,
}

fn parse_params<T: for<'de> Deserialize<'de> + Default>(json: &str) -> Result<T> {
    if json.trim().is_empty() {
        return Ok(T::default());
    }
    Ok(serde_json::from_str(json)?)
}

fn step(op: &str, params: &Value, inputs: Vec<(&str, Artifact)>) -> Result<Artifact> {
    let (parsed, _) = OpParams::parse(op, params)?;
    let inputs: BTreeMap<String, Artifact> = inputs.into_iter().map(|(k, a)| (k.to_string(), a)).collect();
    let mut out = execute_op(&parsed, &inputs)?;
    Ok(out.pop_first().expect("every op has one output").1)
}

fn graph_of(a: Artifact) -> EntityGraph {
    match a {
        Artifact::Graph(g) => g,
        _ => unreachable!("graph ops produce graphs"),
    }
}

/// Same as `nuclei`, then `features`, then `build-graph --mode knn`.
pub fn build_cell_graph(image: ImageSource, params_json: &str) -> Result<EntityGraph> {
    let p: CellGraphParams = parse_params(params_json)?;
    let img = image.load()?;
    let labels = step("nuclei", &p.nuclei, vec![("image", Artifact::Image(img.clone()))])?;
    let features = step("features", &p.features, vec![("image", Artifact::Image(img)), ("labels", labels.clone())])?;
    Ok(graph_of(step("knn_graph", &p.graph, vec![("labels", labels), ("features", features)])?))
}

/// Same as `superpixel`, then `features`, then `build-graph --mode rag`.
pub fn build_tissue_graph(image: ImageSource, params_json: &str) -> Result<EntityGraph> {
    let p: TissueGraphParams = parse_params(params_json)?;
    let img = image.load()?;
    let labels = step("superpixel", &p.superpixel, vec![("image", Artifact::Image(img.clone()))])?;
    let features = step("features", &p.features, vec![("image", Artifact::Image(img)), ("labels", labels.clone())])?;
    Ok(graph_of(step("rag_graph", &Value::Null, vec![("labels", labels), ("features", features)])?))
}

pub fn predict(model: &Path, graph_json: &str) -> Result<Prediction> {
    GnnModel::load(model)?.predict(&EntityGraph::from_json(graph_json)?)
}

/// Saliency as written by `explain --out`; `class` defaults to the prediction.
pub fn explain(model: &Path, graph_json: &str, method: &str, class: Option<usize>, params_json: &str) -> Result<Saliency> {
    let method: ExplainMethod = method.parse()?;
    let params: ExplainParams = parse_params(params_json)?;
    let model = GnnModel::load(model)?;
    let g = EntityGraph::from_json(graph_json)?;
    let class = match class {
        Some(c) => c,
        None => model.predict(&g)?.class,
    };
    run_explainer(&model, &g, method, class, &params)
}

/// Ids (`1..=N` in node order) of the `k` highest scores, as `explain --top-k`.
pub fn top_entities(scores: &[f64], k: usize) -> Result<Vec<u32>> {
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("saliency score".into()));
    }
    let s = Saliency {
        scores: scores.to_vec(),
        class: 0,
        method: String::new(),
    };
    let table = EntityTable::from_centroids(&vec![(0.0, 0.0); scores.len()]);
    top_k_entities(&s, &table, k)
}
