//! Node-level saliency for graph classifiers: GraphGrad-CAM, GraphGrad-CAM++,
//! a node-mask GNNExplainer and layer-wise relevance propagation.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gnn::{cross_entropy, softmax, Adam, Dense, GnnModel, GraphClassifier, LayerType, Matrix, Readout};
use crate::graph_build::EntityGraph;
use crate::raster::{read_text, write_file, EntityTable, Image};
use crate::stats::sigmoid;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExplainMethod {
    GradCam,
    GradCamPp,
    GnnExplainer,
    Lrp,
}

impl ExplainMethod {
    pub fn name(self) -> &'static str {
        match self {
            Self::GradCam => "gradcam",
            Self::GradCamPp => "gradcampp",
            Self::GnnExplainer => "gnnexplainer",
            Self::Lrp => "lrp",
        }
    }
}

impl std::str::FromStr for ExplainMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gradcam" => Ok(Self::GradCam),
            "gradcampp" => Ok(Self::GradCamPp),
            "gnnexplainer" => Ok(Self::GnnExplainer),
            "lrp" => Ok(Self::Lrp),
            _ => Err(Error::param(format!("unknown explainer {s:?}"))),
        }
    }
}

/// Per-node importance for one class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Saliency {
    pub scores: Vec<f64>,
    pub class: usize,
    pub method: String,
}

impl Saliency {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: Self = serde_json::from_str(text)?;
        if s.scores.iter().any(|v| !v.is_finite()) {
            return Err(Error::schema("scores", "non-finite score"));
        }
        Ok(s)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), self.to_json()?.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&read_text(path.as_ref())?)
    }
}

fn check_class(model: &GnnModel, class: usize) -> Result<()> {
    if class >= model.config().num_classes {
        return Err(Error::param(format!(
            "class {class} out of range for {} classes",
            model.config().num_classes
        )));
    }
    Ok(())
}

fn one_hot(n: usize, c: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[c] = 1.0;
    v
}

/// Rescales non-negative scores to [0, 1]; a constant map becomes all ones
/// if positive and all zeros otherwise.
pub fn min_max_normalize(scores: &[f64]) -> Vec<f64> {
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if scores.is_empty() {
        return Vec::new();
    }
    if hi > lo {
        scores.iter().map(|s| (s - lo) / (hi - lo)).collect()
    } else {
        vec![if hi > 0.0 { 1.0 } else { 0.0 }; scores.len()]
    }
}

/// Activations and class-logit gradients at a message-passing layer
/// (default: the last).
fn layer_signal(model: &GnnModel, g: &EntityGraph, class: usize, layer: Option<usize>) -> Result<(Matrix, Matrix)> {
    check_class(model, class)?;
    let n_layers = model.config().num_layers;
    let l = layer.unwrap_or(n_layers - 1);
    if l >= n_layers {
        return Err(Error::param(format!("layer {l} out of range for {n_layers} layers")));
    }
    let trace = model.trace(g)?;
    let mut bp = model.backprop(&trace, &one_hot(model.config().num_classes, class));
    let acts = trace.layers[l].output().clone();
    Ok((acts, std::mem::replace(&mut bp.layer_outputs[l], Matrix::zeros(0, 0))))
}

/// Raw (unnormalized) GraphGrad-CAM map.
pub fn gradcam_raw(model: &GnnModel, g: &EntityGraph, class: usize, layer: Option<usize>) -> Result<Vec<f64>> {
    let (a, grad) = layer_signal(model, g, class, layer)?;
    let n = a.rows as f64;
    let alpha: Vec<f64> = (0..a.cols).map(|k| (0..a.rows).map(|v| grad.get(v, k)).sum::<f64>() / n).collect();
    Ok((0..a.rows)
        .map(|v| a.row(v).iter().zip(&alpha).map(|(x, w)| x * w).sum::<f64>().max(0.0))
        .collect())
}

pub fn graph_gradcam(model: &GnnModel, g: &EntityGraph, class: usize, layer: Option<usize>) -> Result<Saliency> {
    Ok(Saliency {
        scores: min_max_normalize(&gradcam_raw(model, g, class, layer)?),
        class,
        method: ExplainMethod::GradCam.name().into(),
    })
}

/// Raw GraphGrad-CAM++ map. The positive factor `exp(y_c)` of the
/// exponential-score gradients scales every node equally and is left out.
pub fn gradcam_pp_raw(model: &GnnModel, g: &EntityGraph, class: usize, layer: Option<usize>) -> Result<Vec<f64>> {
    let (a, grad) = layer_signal(model, g, class, layer)?;
    let mut w = vec![0.0; a.cols];
    for (k, wk) in w.iter_mut().enumerate() {
        let cube_sum: f64 = (0..a.rows).map(|u| a.get(u, k) * grad.get(u, k).powi(3)).sum();
        for v in 0..a.rows {
            let g1 = grad.get(v, k);
            let denom = 2.0 * g1 * g1 + cube_sum;
            let alpha = if denom != 0.0 { g1 * g1 / denom } else { 0.0 };
            *wk += alpha * g1.max(0.0);
        }
    }
    Ok((0..a.rows)
        .map(|v| a.row(v).iter().zip(&w).map(|(x, wk)| x * wk).sum::<f64>().max(0.0))
        .collect())
}

pub fn graph_gradcam_pp(model: &GnnModel, g: &EntityGraph, class: usize, layer: Option<usize>) -> Result<Saliency> {
    Ok(Saliency {
        scores: min_max_normalize(&gradcam_pp_raw(model, g, class, layer)?),
        class,
        method: ExplainMethod::GradCamPp.name().into(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GnnExplainerParams {
    pub steps: usize,
    pub lr: f64,
    pub lambda_sparsity: f64,
    pub lambda_entropy: f64,
    pub seed: u64,
}

impl Default for GnnExplainerParams {
    fn default() -> Self {
        Self {
            steps: 100,
            lr: 0.01,
            lambda_sparsity: 0.05,
            lambda_entropy: 0.1,
            seed: 0,
        }
    }
}

/// Initial mask logits drawn from Normal(0, 0.1), one per node in order.
pub fn explainer_init(num_nodes: usize, seed: u64) -> Vec<f64> {
    let normal = Normal::new(0.0, 0.1).expect("valid normal");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..num_nodes).map(|_| normal.sample(&mut rng)).collect()
}

/// Node mask and the objective value at every step, starting from the
/// given mask logits.
pub fn gnn_explainer_from(
    model: &GnnModel,
    g: &EntityGraph,
    class: usize,
    params: &GnnExplainerParams,
    init: &[f64],
) -> Result<(Saliency, Vec<f64>)> {
    check_class(model, class)?;
    if params.steps == 0 || !(params.lr >= 0.0) {
        return Err(Error::param("explainer needs steps >= 1 and lr >= 0"));
    }
    let n = g.num_nodes();
    if init.len() != n {
        return Err(Error::shape(format!("{} initial mask values for {n} nodes", init.len())));
    }
    let x = Matrix::features_of(g);
    let mut logits_mask = init.to_vec();
    let mut adam = Adam::new(n, params.lr, 0.9, 0.999, 1e-8);
    let mut objective = Vec::with_capacity(params.steps);
    for step in 0..params.steps {
        let mask: Vec<f64> = logits_mask.iter().map(|&m| sigmoid(m)).collect();
        let mut masked = x.clone();
        for v in 0..n {
            masked.row_mut(v).iter_mut().for_each(|f| *f *= mask[v]);
        }
        let trace = model.trace_with(g, masked)?;
        let mut dlogits = softmax(&trace.logits);
        dlogits[class] -= 1.0;
        let dx = model.backprop(&trace, &dlogits).input;
        let entropy = |p: f64| {
            let p = p.clamp(1e-12, 1.0 - 1e-12);
            -p * p.ln() - (1.0 - p) * (1.0 - p).ln()
        };
        let value = cross_entropy(&trace.logits, class)
            + params.lambda_sparsity * mask.iter().sum::<f64>() / n as f64
            + params.lambda_entropy * mask.iter().map(|&p| entropy(p)).sum::<f64>() / n as f64;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("explainer objective at step {step}")));
        }
        objective.push(value);
        let grad: Vec<f64> = (0..n)
            .map(|v| {
                let p = mask[v];
                let pc = p.clamp(1e-12, 1.0 - 1e-12);
                let dp = x.row(v).iter().zip(dx.row(v)).map(|(f, d)| f * d).sum::<f64>()
                    + params.lambda_sparsity / n as f64
                    + params.lambda_entropy / n as f64 * ((1.0 - pc) / pc).ln();
                dp * p * (1.0 - p)
            })
            .collect();
        adam.step(&mut logits_mask, &grad);
    }
    let scores = logits_mask.iter().map(|&m| sigmoid(m)).collect();
    Ok((
        Saliency {
            scores,
            class,
            method: ExplainMethod::GnnExplainer.name().into(),
        },
        objective,
    ))
}

pub fn gnn_explainer(model: &GnnModel, g: &EntityGraph, class: usize, params: &GnnExplainerParams) -> Result<Saliency> {
    let init = explainer_init(g.num_nodes(), params.seed);
    gnn_explainer_from(model, g, class, params, &init).map(|(s, _)| s)
}

pub const LRP_EPSILON: f64 = 1e-6;

fn stabilize(z: f64) -> f64 {
    z + if z >= 0.0 { LRP_EPSILON } else { -LRP_EPSILON }
}

/// Epsilon rule through one affine map; the bias share is redistributed
/// over the inputs.
fn lrp_dense(p: &[f64], dense: &Dense, input: &Matrix, relevance: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(input.rows, dense.input);
    for r in 0..input.rows {
        let a = input.row(r);
        let z: Vec<f64> = (0..dense.output)
            .map(|j| stabilize((0..dense.input).map(|i| a[i] * dense.weight(p, i, j)).sum()))
            .collect();
        for i in 0..dense.input {
            out.data[r * dense.input + i] = (0..dense.output)
                .map(|j| a[i] * dense.weight(p, i, j) / z[j] * relevance.get(r, j))
                .sum();
        }
    }
    out
}

/// Layer-wise relevance of each node for the class logit. Only GIN models
/// are supported.
pub fn graph_lrp(model: &GnnModel, g: &EntityGraph, class: usize) -> Result<Saliency> {
    check_class(model, class)?;
    if model.config().layer != LayerType::Gin {
        return Err(Error::UnsupportedModel(
            "relevance propagation is defined for GIN layers only".into(),
        ));
    }
    let p = model.params();
    let trace = model.trace(g)?;
    let mut r = Matrix::from_vec(1, trace.logits.len(), {
        let mut v = vec![0.0; trace.logits.len()];
        v[class] = trace.logits[class];
        v
    })?;
    for (i, dense) in model.head.iter().enumerate().rev() {
        r = lrp_dense(p, dense, &trace.head.acts[i], &r);
    }
    let last = trace.layers.last().expect("at least one layer").output();
    let scale = if model.config().readout == Readout::Mean { 1.0 / last.rows as f64 } else { 1.0 };
    let mut rh = Matrix::zeros(last.rows, last.cols);
    for k in 0..last.cols {
        let total = stabilize((0..last.rows).map(|v| last.get(v, k) * scale).sum());
        for v in 0..last.rows {
            rh.data[v * last.cols + k] = last.get(v, k) * scale / total * r.data[k];
        }
    }
    let eps = model.config().gin_eps;
    for (mlp, cache) in model.stack.layers.iter().zip(&trace.layers).rev() {
        for (m, dense) in mlp.iter().enumerate().rev() {
            rh = lrp_dense(p, dense, &cache.acts[m], &rh);
        }
        let (h, z) = (&cache.input, &cache.acts[0]);
        let mut below = Matrix::zeros(h.rows, h.cols);
        for v in 0..h.rows {
            for k in 0..h.cols {
                let share = rh.get(v, k) / stabilize(z.get(v, k));
                below.data[v * h.cols + k] += (1.0 + eps) * h.get(v, k) * share;
                for &u in &trace.adj[v] {
                    below.data[u * h.cols + k] += h.get(u, k) * share;
                }
            }
        }
        rh = below;
    }
    let scores = (0..rh.rows).map(|v| rh.row(v).iter().sum()).collect();
    Ok(Saliency {
        scores,
        class,
        method: ExplainMethod::Lrp.name().into(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExplainParams {
    /// Message-passing layer read by the CAM explainers; `None` is the last.
    pub layer: Option<usize>,
    pub gnn_explainer: GnnExplainerParams,
}

impl Default for ExplainParams {
    fn default() -> Self {
        Self {
            layer: None,
            gnn_explainer: GnnExplainerParams::default(),
        }
    }
}

pub fn explain(model: &GnnModel, g: &EntityGraph, method: ExplainMethod, class: usize, params: &ExplainParams) -> Result<Saliency> {
    match method {
        ExplainMethod::GradCam => graph_gradcam(model, g, class, params.layer),
        ExplainMethod::GradCamPp => graph_gradcam_pp(model, g, class, params.layer),
        ExplainMethod::GnnExplainer => gnn_explainer(model, g, class, &params.gnn_explainer),
        ExplainMethod::Lrp => graph_lrp(model, g, class),
    }
}

/// Ids of the `k` highest-scoring entities, ties to the lower id.
pub fn top_k_entities(s: &Saliency, table: &EntityTable, k: usize) -> Result<Vec<u32>> {
    if k == 0 {
        return Err(Error::param("k must be >= 1"));
    }
    if s.scores.len() != table.len() {
        return Err(Error::shape(format!(
            "{} scores for {} entities",
            s.scores.len(),
            table.len()
        )));
    }
    let mut order: Vec<(f64, u32)> = s.scores.iter().zip(table.ids()).map(|(&v, id)| (v, id)).collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(order.into_iter().take(k).map(|(_, id)| id).collect())
}

/// Draws each node as a filled disk from blue (0) to red (1) over the image.
pub fn render_overlay(img: &Image, centroids: &[(f64, f64)], scores: &[f64], radius: f64) -> Result<Image> {
    if centroids.len() != scores.len() {
        return Err(Error::shape("one score per centroid is required"));
    }
    let normalized = min_max_normalize(&scores.iter().map(|s| s.max(0.0)).collect::<Vec<_>>());
    let mut out = img.clone();
    let (h, w) = (img.height() as f64, img.width() as f64);
    for (&(cr, cc), &s) in centroids.iter().zip(&normalized) {
        let color = [(255.0 * s).round() as u8, 0, (255.0 * (1.0 - s)).round() as u8];
        let r0 = (cr - radius).floor().max(0.0) as usize;
        let r1 = (cr + radius).ceil().min(h - 1.0).max(0.0) as usize;
        let c0 = (cc - radius).floor().max(0.0) as usize;
        let c1 = (cc + radius).ceil().min(w - 1.0).max(0.0) as usize;
        for r in r0..=r1 {
            for c in c0..=c1 {
                if (r as f64 - cr).powi(2) + (c as f64 - cc).powi(2) <= radius * radius {
                    out.set_pixel(r, c, color);
                }
            }
        }
    }
    Ok(out)
}
