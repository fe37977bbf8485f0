//! GIN and PNA graph classifiers with hand-written reverse-mode gradients,
//! the hierarchical cell-to-tissue model, Adam training and checkpoints.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph_build::EntityGraph;
use crate::raster::{read_text, write_file};

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!("{} values for a {rows}x{cols} matrix", data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn features_of(g: &EntityGraph) -> Self {
        Self {
            rows: g.num_nodes(),
            cols: g.feature_dim(),
            data: g.features().to_vec(),
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerType {
    Gin,
    Pna,
}

impl std::str::FromStr for LayerType {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gin" => Ok(Self::Gin),
            "pna" => Ok(Self::Pna),
            _ => Err(Error::param(format!("unknown layer type {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Readout {
    Mean,
    Sum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GnnConfig {
    pub layer: LayerType,
    pub input_dim: usize,
    pub num_layers: usize,
    pub hidden: usize,
    /// Affine+ReLU layers in each GIN MLP.
    pub mlp_depth: usize,
    pub head_hidden: usize,
    /// Affine layers in the classifier head; the last one is linear.
    pub head_depth: usize,
    pub readout: Readout,
    pub num_classes: usize,
    pub gin_eps: f64,
    /// PNA degree normalizer; the trainer fills it from the data when unset.
    pub pna_delta: Option<f64>,
}

impl Default for GnnConfig {
    fn default() -> Self {
        Self {
            layer: LayerType::Gin,
            input_dim: 1,
            num_layers: 3,
            hidden: 32,
            mlp_depth: 2,
            head_hidden: 32,
            head_depth: 2,
            readout: Readout::Mean,
            num_classes: 2,
            gin_eps: 0.0,
            pna_delta: None,
        }
    }
}

impl GnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.hidden == 0 || self.input_dim == 0 {
            return Err(Error::param("layers, hidden units and input dimension must be >= 1"));
        }
        if self.num_classes < 2 {
            return Err(Error::param(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        if self.mlp_depth == 0 || self.head_depth == 0 || (self.head_depth > 1 && self.head_hidden == 0) {
            return Err(Error::param("MLP and head depths must be >= 1 with >= 1 hidden unit"));
        }
        if let Some(d) = self.pna_delta {
            if !(d > 0.0) {
                return Err(Error::param(format!("PNA delta must be > 0, got {d}")));
            }
        }
        Ok(())
    }
}

/// View of one affine map inside the flat parameter vector: an
/// `input x output` weight block followed by `output` biases.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct Dense {
    pub input: usize,
    pub output: usize,
    pub offset: usize,
}

impl Dense {
    pub(crate) fn weight(&self, p: &[f64], i: usize, j: usize) -> f64 {
        p[self.offset + i * self.output + j]
    }

    pub(crate) fn bias<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        let start = self.offset + self.input * self.output;
        &p[start..start + self.output]
    }

    fn len(&self) -> usize {
        self.input * self.output + self.output
    }

    fn forward(&self, p: &[f64], x: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(x.rows, self.output);
        let w = &p[self.offset..self.offset + self.input * self.output];
        let b = self.bias(p);
        for r in 0..x.rows {
            let o = out.row_mut(r);
            o.copy_from_slice(b);
            for (i, &xi) in x.row(r).iter().enumerate() {
                if xi == 0.0 {
                    continue;
                }
                for (oj, wj) in o.iter_mut().zip(&w[i * self.output..(i + 1) * self.output]) {
                    *oj += xi * wj;
                }
            }
        }
        out
    }

    /// Accumulates parameter gradients and returns the input gradient.
    fn backward(&self, p: &[f64], x: &Matrix, dpre: &Matrix, grad: &mut [f64]) -> Matrix {
        let (wo, bo) = (self.offset, self.offset + self.input * self.output);
        let mut dx = Matrix::zeros(x.rows, self.input);
        for r in 0..x.rows {
            let d = dpre.row(r);
            for (j, &dj) in d.iter().enumerate() {
                grad[bo + j] += dj;
            }
            let xr = x.row(r);
            for i in 0..self.input {
                let row = wo + i * self.output;
                let mut acc = 0.0;
                for (j, &dj) in d.iter().enumerate() {
                    grad[row + j] += xr[i] * dj;
                    acc += p[row + j] * dj;
                }
                dx.data[r * self.input + i] = acc;
            }
        }
        dx
    }
}

fn relu(m: &Matrix) -> Matrix {
    Matrix {
        rows: m.rows,
        cols: m.cols,
        data: m.data.iter().map(|&v| v.max(0.0)).collect(),
    }
}

fn relu_backward(pre: &Matrix, dout: &Matrix) -> Matrix {
    Matrix {
        rows: pre.rows,
        cols: pre.cols,
        data: pre.data.iter().zip(&dout.data).map(|(&z, &d)| if z > 0.0 { d } else { 0.0 }).collect(),
    }
}

/// One tensor of a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Default)]
struct Layout {
    denses: Vec<(String, Dense)>,
    size: usize,
}

impl Layout {
    fn dense(&mut self, name: String, input: usize, output: usize) -> Dense {
        let d = Dense {
            input,
            output,
            offset: self.size,
        };
        self.size += d.len();
        self.denses.push((name, d));
        d
    }

    fn init(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut p = vec![0.0; self.size];
        for (_, d) in &self.denses {
            let limit = (6.0 / (d.input + d.output) as f64).sqrt();
            for v in &mut p[d.offset..d.offset + d.input * d.output] {
                *v = rng.random_range(-limit..=limit);
            }
        }
        p
    }

    fn tensors(&self, p: &[f64]) -> Vec<Tensor> {
        let mut out = Vec::with_capacity(2 * self.denses.len());
        for (name, d) in &self.denses {
            let split = d.offset + d.input * d.output;
            out.push(Tensor {
                name: format!("{name}.weight"),
                shape: vec![d.input, d.output],
                values: p[d.offset..split].to_vec(),
            });
            out.push(Tensor {
                name: format!("{name}.bias"),
                shape: vec![d.output],
                values: p[split..split + d.output].to_vec(),
            });
        }
        out
    }

    fn load(&self, tensors: &[Tensor]) -> Result<Vec<f64>> {
        let expected = self.tensors(&vec![0.0; self.size]);
        if tensors.len() != expected.len() {
            return Err(Error::schema(
                "tensors",
                format!("{} tensors, model needs {}", tensors.len(), expected.len()),
            ));
        }
        let mut p = Vec::with_capacity(self.size);
        for (t, e) in tensors.iter().zip(&expected) {
            if t.name != e.name || t.shape != e.shape || t.values.len() != e.values.len() {
                return Err(Error::schema(
                    "tensors",
                    format!("tensor {:?} {:?} does not match expected {:?} {:?}", t.name, t.shape, e.name, e.shape),
                ));
            }
            if t.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::schema("tensors", format!("non-finite value in {:?}", t.name)));
            }
            p.extend_from_slice(&t.values);
        }
        Ok(p)
    }
}

/// Message-passing layers of one kind.
#[derive(Clone, Debug)]
pub(crate) struct Stack {
    pub kind: LayerType,
    pub eps: f64,
    pub delta: f64,
    /// Per layer, its MLP (GIN) or single projection (PNA).
    pub layers: Vec<Vec<Dense>>,
}

pub(crate) const PNA_BLOCKS: usize = 13;

impl Stack {
    fn build(
        layout: &mut Layout,
        prefix: &str,
        kind: LayerType,
        input_dim: usize,
        num_layers: usize,
        hidden: usize,
        mlp_depth: usize,
    ) -> Vec<Vec<Dense>> {
        (0..num_layers)
            .map(|l| {
                let din = if l == 0 { input_dim } else { hidden };
                match kind {
                    LayerType::Gin => (0..mlp_depth)
                        .map(|m| layout.dense(format!("{prefix}{l}.mlp{m}"), if m == 0 { din } else { hidden }, hidden))
                        .collect(),
                    LayerType::Pna => vec![layout.dense(format!("{prefix}{l}.post"), PNA_BLOCKS * din, hidden)],
                }
            })
            .collect()
    }
}

/// Per-node neighbor statistics of one PNA layer.
#[derive(Clone, Debug)]
pub(crate) struct PnaAux {
    argmin: Vec<usize>,
    argmax: Vec<usize>,
    mean: Matrix,
    std: Matrix,
    scalers: Vec<[f64; 3]>,
}

#[derive(Clone, Debug)]
pub(crate) struct LayerCache {
    pub input: Matrix,
    /// `acts[0]` is the aggregated input, `acts[i + 1] = ReLU(pres[i])`.
    pub acts: Vec<Matrix>,
    pub pres: Vec<Matrix>,
    pna: Option<PnaAux>,
}

impl LayerCache {
    pub(crate) fn output(&self) -> &Matrix {
        self.acts.last().expect("layer has an MLP")
    }
}

fn gin_aggregate(h: &Matrix, adj: &[Vec<usize>], eps: f64) -> Matrix {
    let mut z = Matrix::zeros(h.rows, h.cols);
    for v in 0..h.rows {
        let zr = &mut z.data[v * h.cols..(v + 1) * h.cols];
        for (o, &x) in zr.iter_mut().zip(h.row(v)) {
            *o = (1.0 + eps) * x;
        }
        for &u in &adj[v] {
            for (o, &x) in zr.iter_mut().zip(h.row(u)) {
                *o += x;
            }
        }
    }
    z
}

fn pna_aggregate(h: &Matrix, adj: &[Vec<usize>], delta: f64) -> (Matrix, PnaAux) {
    let (n, d) = (h.rows, h.cols);
    let mut z = Matrix::zeros(n, PNA_BLOCKS * d);
    let mut aux = PnaAux {
        argmin: vec![usize::MAX; n * d],
        argmax: vec![usize::MAX; n * d],
        mean: Matrix::zeros(n, d),
        std: Matrix::zeros(n, d),
        scalers: vec![[0.0; 3]; n],
    };
    for v in 0..n {
        z.row_mut(v)[..d].copy_from_slice(h.row(v));
        let nb = &adj[v];
        if nb.is_empty() {
            continue;
        }
        let deg = nb.len() as f64;
        let log = (deg + 1.0).ln();
        let scalers = [1.0, log / delta, delta / log];
        aux.scalers[v] = scalers;
        for k in 0..d {
            let (mut lo, mut hi, mut sum) = (nb[0], nb[0], 0.0);
            for &u in nb {
                let x = h.get(u, k);
                sum += x;
                if x < h.get(lo, k) {
                    lo = u;
                }
                if x > h.get(hi, k) {
                    hi = u;
                }
            }
            let mean = sum / deg;
            let (min, max) = (h.get(lo, k), h.get(hi, k));
            let std = if min == max {
                0.0
            } else {
                (nb.iter().map(|&u| (h.get(u, k) - mean).powi(2)).sum::<f64>() / deg).sqrt()
            };
            aux.argmin[v * d + k] = lo;
            aux.argmax[v * d + k] = hi;
            aux.mean.data[v * d + k] = mean;
            aux.std.data[v * d + k] = std;
            let aggs = [mean, min, max, std];
            let row = z.row_mut(v);
            for (s, &scale) in scalers.iter().enumerate() {
                for (a, &agg) in aggs.iter().enumerate() {
                    row[d * (1 + 4 * s + a) + k] = scale * agg;
                }
            }
        }
    }
    (z, aux)
}

fn pna_aggregate_backward(h: &Matrix, adj: &[Vec<usize>], aux: &PnaAux, dz: &Matrix) -> Matrix {
    let (n, d) = (h.rows, h.cols);
    let mut dh = Matrix::zeros(n, d);
    for v in 0..n {
        let dzr = dz.row(v);
        for k in 0..d {
            dh.data[v * d + k] += dzr[k];
        }
        let nb = &adj[v];
        if nb.is_empty() {
            continue;
        }
        let deg = nb.len() as f64;
        for k in 0..d {
            let mut dagg = [0.0; 4];
            for (s, &scale) in aux.scalers[v].iter().enumerate() {
                for (a, da) in dagg.iter_mut().enumerate() {
                    *da += scale * dzr[d * (1 + 4 * s + a) + k];
                }
            }
            let [dmean, dmin, dmax, dstd] = dagg;
            let mean = aux.mean.data[v * d + k];
            let std = aux.std.data[v * d + k];
            for &u in nb {
                let mut g = dmean / deg;
                if std > 0.0 {
                    g += dstd * (h.get(u, k) - mean) / (deg * std);
                }
                dh.data[u * d + k] += g;
            }
            dh.data[aux.argmin[v * d + k] * d + k] += dmin;
            dh.data[aux.argmax[v * d + k] * d + k] += dmax;
        }
    }
    dh
}

impl Stack {
    pub(crate) fn forward(&self, p: &[f64], adj: &[Vec<usize>], x: Matrix) -> Vec<LayerCache> {
        let mut caches: Vec<LayerCache> = Vec::with_capacity(self.layers.len());
        for mlp in &self.layers {
            let input = caches.last().map_or_else(|| x.clone(), |c| c.output().clone());
            let (agg, pna) = match self.kind {
                LayerType::Gin => (gin_aggregate(&input, adj, self.eps), None),
                LayerType::Pna => {
                    let (z, aux) = pna_aggregate(&input, adj, self.delta);
                    (z, Some(aux))
                }
            };
            let mut acts = vec![agg];
            let mut pres = Vec::with_capacity(mlp.len());
            for dense in mlp {
                let pre = dense.forward(p, acts.last().expect("non-empty"));
                acts.push(relu(&pre));
                pres.push(pre);
            }
            caches.push(LayerCache { input, acts, pres, pna });
        }
        caches
    }

    /// Returns the input gradient and the gradient at each layer's output.
    pub(crate) fn backward(
        &self,
        p: &[f64],
        adj: &[Vec<usize>],
        caches: &[LayerCache],
        d_out: Matrix,
        grad: &mut [f64],
    ) -> (Matrix, Vec<Matrix>) {
        let mut outs = vec![Matrix::zeros(0, 0); caches.len()];
        let mut d = d_out;
        for (l, (mlp, cache)) in self.layers.iter().zip(caches).enumerate().rev() {
            outs[l] = d.clone();
            for (m, dense) in mlp.iter().enumerate().rev() {
                let dpre = relu_backward(&cache.pres[m], &d);
                d = dense.backward(p, &cache.acts[m], &dpre, grad);
            }
            d = match &cache.pna {
                None => gin_aggregate(&d, adj, self.eps),
                Some(aux) => pna_aggregate_backward(&cache.input, adj, aux, &d),
            };
        }
        (d, outs)
    }
}

fn readout(h: &Matrix, kind: Readout) -> Vec<f64> {
    let mut pooled = vec![0.0; h.cols];
    for r in 0..h.rows {
        for (o, &x) in pooled.iter_mut().zip(h.row(r)) {
            *o += x;
        }
    }
    if kind == Readout::Mean && h.rows > 0 {
        pooled.iter_mut().for_each(|v| *v /= h.rows as f64);
    }
    pooled
}

fn readout_backward(rows: usize, dpooled: &[f64], kind: Readout) -> Matrix {
    let scale = if kind == Readout::Mean { 1.0 / rows as f64 } else { 1.0 };
    let mut d = Matrix::zeros(rows, dpooled.len());
    for r in 0..rows {
        for (o, &g) in d.row_mut(r).iter_mut().zip(dpooled) {
            *o = g * scale;
        }
    }
    d
}

/// Classifier head activations: `acts[0]` is the pooled vector.
#[derive(Clone, Debug)]
pub(crate) struct HeadCache {
    pub acts: Vec<Matrix>,
    pub pres: Vec<Matrix>,
}

fn head_forward(head: &[Dense], p: &[f64], pooled: Vec<f64>) -> (HeadCache, Vec<f64>) {
    let mut acts = vec![Matrix {
        rows: 1,
        cols: pooled.len(),
        data: pooled,
    }];
    let mut pres = Vec::with_capacity(head.len());
    for (i, dense) in head.iter().enumerate() {
        let pre = dense.forward(p, acts.last().expect("non-empty"));
        if i + 1 < head.len() {
            acts.push(relu(&pre));
        }
        pres.push(pre);
    }
    let logits = pres.last().expect("head has a layer").data.clone();
    (HeadCache { acts, pres }, logits)
}

fn head_backward(head: &[Dense], p: &[f64], cache: &HeadCache, dlogits: &[f64], grad: &mut [f64]) -> Vec<f64> {
    let mut d = Matrix {
        rows: 1,
        cols: dlogits.len(),
        data: dlogits.to_vec(),
    };
    for (i, dense) in head.iter().enumerate().rev() {
        if i + 1 < head.len() {
            d = relu_backward(&cache.pres[i], &d);
        }
        d = dense.backward(p, &cache.acts[i], &d, grad);
    }
    d.data
}

fn build_head(layout: &mut Layout, input: usize, hidden: usize, depth: usize, classes: usize) -> Vec<Dense> {
    (0..depth)
        .map(|i| {
            let din = if i == 0 { input } else { hidden };
            let dout = if i + 1 == depth { classes } else { hidden };
            layout.dense(format!("head{i}"), din, dout)
        })
        .collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Cross-entropy of the softmax of `logits` against `label`.
pub fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    lse - logits[label]
}

/// Index of the largest value; ties go to the lower index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub class: usize,
    pub probabilities: Vec<f64>,
}

impl Prediction {
    fn from_logits(logits: &[f64]) -> Self {
        Self {
            class: argmax(logits),
            probabilities: softmax(logits),
        }
    }
}

/// Forward state of a [`GnnModel`], kept for backward passes.
#[derive(Clone, Debug)]
pub(crate) struct Trace {
    pub adj: Vec<Vec<usize>>,
    pub layers: Vec<LayerCache>,
    pub head: HeadCache,
    pub logits: Vec<f64>,
}

/// Gradients of one backward pass.
#[derive(Clone, Debug)]
pub struct Backprop {
    /// Flat, aligned with the model parameters.
    pub params: Vec<f64>,
    /// With respect to the node features.
    pub input: Matrix,
    /// With respect to each message-passing layer's output.
    pub layer_outputs: Vec<Matrix>,
}

/// Graph classifiers trainable by [`train`].
pub trait GraphClassifier {
    type Input;

    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];
    fn logits(&self, x: &Self::Input) -> Result<Vec<f64>>;
    /// Cross-entropy loss and its gradient with respect to the parameters.
    fn loss_and_grad(&self, x: &Self::Input, label: usize) -> Result<(f64, Vec<f64>)>;

    /// Data-dependent setup before the first epoch.
    fn prepare(&mut self, _data: &[(Self::Input, usize)]) {}

    fn predict(&self, x: &Self::Input) -> Result<Prediction> {
        Ok(Prediction::from_logits(&self.logits(x)?))
    }
}

/// GIN or PNA layers, a readout and an MLP head.
#[derive(Clone, Debug)]
pub struct GnnModel {
    config: GnnConfig,
    seed: u64,
    params: Vec<f64>,
    layout_names: Vec<(String, Dense)>,
    pub(crate) stack: Stack,
    pub(crate) head: Vec<Dense>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint<C> {
    model: String,
    config: C,
    seed: u64,
    tensors: Vec<Tensor>,
}

impl GnnModel {
    pub fn new(config: GnnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut layout = Layout::default();
        let layers = Stack::build(
            &mut layout,
            "layer",
            config.layer,
            config.input_dim,
            config.num_layers,
            config.hidden,
            config.mlp_depth,
        );
        let head = build_head(&mut layout, config.hidden, config.head_hidden, config.head_depth, config.num_classes);
        let params = layout.init(&mut ChaCha8Rng::seed_from_u64(seed));
        let stack = Stack {
            kind: config.layer,
            eps: config.gin_eps,
            delta: config.pna_delta.unwrap_or(1.0),
            layers,
        };
        Ok(Self {
            config,
            seed,
            params,
            layout_names: layout.denses,
            stack,
            head,
        })
    }

    pub fn config(&self) -> &GnnConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn set_pna_delta(&mut self, delta: f64) -> Result<()> {
        if !(delta > 0.0) {
            return Err(Error::param(format!("PNA delta must be > 0, got {delta}")));
        }
        self.config.pna_delta = Some(delta);
        self.stack.delta = delta;
        Ok(())
    }

    fn layout(&self) -> Layout {
        Layout {
            denses: self.layout_names.clone(),
            size: self.params.len(),
        }
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.layout().tensors(&self.params)
    }

    pub fn set_tensors(&mut self, tensors: &[Tensor]) -> Result<()> {
        self.params = self.layout().load(tensors)?;
        Ok(())
    }

    fn check_graph(&self, g: &EntityGraph) -> Result<()> {
        if g.feature_dim() != self.config.input_dim {
            return Err(Error::shape(format!(
                "graph has {} features per node, model expects {}",
                g.feature_dim(),
                self.config.input_dim
            )));
        }
        if g.num_nodes() == 0 {
            return Err(Error::input("cannot classify an empty graph"));
        }
        Ok(())
    }

    /// Forward pass on `g` with its node features replaced by `x`.
    pub(crate) fn trace_with(&self, g: &EntityGraph, x: Matrix) -> Result<Trace> {
        self.check_graph(g)?;
        if (x.rows, x.cols) != (g.num_nodes(), self.config.input_dim) {
            return Err(Error::shape("feature matrix does not match the graph"));
        }
        let adj = g.adjacency();
        let layers = self.stack.forward(&self.params, &adj, x);
        let pooled = readout(layers.last().expect("at least one layer").output(), self.config.readout);
        let (head, logits) = head_forward(&self.head, &self.params, pooled);
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("model logits".into()));
        }
        Ok(Trace { adj, layers, head, logits })
    }

    pub(crate) fn trace(&self, g: &EntityGraph) -> Result<Trace> {
        self.trace_with(g, Matrix::features_of(g))
    }

    pub(crate) fn backprop(&self, t: &Trace, dlogits: &[f64]) -> Backprop {
        let mut grad = vec![0.0; self.params.len()];
        let dpooled = head_backward(&self.head, &self.params, &t.head, dlogits, &mut grad);
        let n = t.layers[0].input.rows;
        let dh = readout_backward(n, &dpooled, self.config.readout);
        let (input, layer_outputs) = self.stack.backward(&self.params, &t.adj, &t.layers, dh, &mut grad);
        Backprop {
            params: grad,
            input,
            layer_outputs,
        }
    }

    /// Gradients of `dlogits . logits` for graph `g`.
    pub fn gradients(&self, g: &EntityGraph, dlogits: &[f64]) -> Result<Backprop> {
        if dlogits.len() != self.config.num_classes {
            return Err(Error::shape("one upstream gradient per class is required"));
        }
        Ok(self.backprop(&self.trace(g)?, dlogits))
    }

    /// Logits when the output of message-passing layer `layer` is replaced
    /// by `h`; the layers after it and the head run as usual.
    pub fn logits_from_layer(&self, g: &EntityGraph, layer: usize, h: &Matrix) -> Result<Vec<f64>> {
        self.check_graph(g)?;
        if layer >= self.config.num_layers {
            return Err(Error::param(format!("layer {layer} out of range for {} layers", self.config.num_layers)));
        }
        if (h.rows, h.cols) != (g.num_nodes(), self.config.hidden) {
            return Err(Error::shape("activation matrix does not match the graph and hidden width"));
        }
        let rest = Stack {
            layers: self.stack.layers[layer + 1..].to_vec(),
            ..self.stack.clone()
        };
        let caches = rest.forward(&self.params, &g.adjacency(), h.clone());
        let last = caches.last().map_or(h, |c| c.output());
        let (_, logits) = head_forward(&self.head, &self.params, readout(last, self.config.readout));
        Ok(logits)
    }

    /// Output of every message-passing layer.
    pub fn embeddings(&self, g: &EntityGraph) -> Result<Vec<Matrix>> {
        Ok(self.trace(g)?.layers.iter().map(|c| c.output().clone()).collect())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&Checkpoint {
            model: "gnn".into(),
            config: self.config.clone(),
            seed: self.seed,
            tensors: self.tensors(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint<GnnConfig> = serde_json::from_str(text)?;
        if ck.model != "gnn" {
            return Err(Error::schema("model", format!("expected \"gnn\", found {:?}", ck.model)));
        }
        let mut m = Self::new(ck.config, ck.seed)?;
        if let Some(d) = m.config.pna_delta {
            m.stack.delta = d;
        }
        m.set_tensors(&ck.tensors)?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), self.to_json()?.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&read_text(path.as_ref())?)
    }
}

/// Mean of `ln(d + 1)` over all nodes of the graphs.
pub fn pna_delta_for<'a>(graphs: impl IntoIterator<Item = &'a EntityGraph>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for g in graphs {
        for d in g.degrees() {
            sum += (d as f64 + 1.0).ln();
            n += 1;
        }
    }
    if n == 0 || sum <= 0.0 {
        1.0
    } else {
        sum / n as f64
    }
}

impl GraphClassifier for GnnModel {
    type Input = EntityGraph;

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn logits(&self, g: &EntityGraph) -> Result<Vec<f64>> {
        Ok(self.trace(g)?.logits)
    }

    fn loss_and_grad(&self, g: &EntityGraph, label: usize) -> Result<(f64, Vec<f64>)> {
        check_label(label, self.config.num_classes)?;
        let t = self.trace(g)?;
        let (loss, dlogits) = loss_seed(&t.logits, label);
        Ok((loss, self.backprop(&t, &dlogits).params))
    }

    fn prepare(&mut self, data: &[(EntityGraph, usize)]) {
        if self.config.layer == LayerType::Pna && self.config.pna_delta.is_none() {
            let delta = pna_delta_for(data.iter().map(|(g, _)| g));
            self.set_pna_delta(delta).expect("delta is positive");
        }
    }
}

fn check_label(label: usize, classes: usize) -> Result<()> {
    if label >= classes {
        return Err(Error::input(format!("label {label} out of range for {classes} classes")));
    }
    Ok(())
}

fn loss_seed(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let mut d = softmax(logits);
    d[label] -= 1.0;
    (cross_entropy(logits, label), d)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HactConfig {
    pub layer: LayerType,
    pub cell_input_dim: usize,
    pub tissue_input_dim: usize,
    pub cell_layers: usize,
    pub tissue_layers: usize,
    pub hidden: usize,
    pub mlp_depth: usize,
    pub head_hidden: usize,
    pub head_depth: usize,
    pub readout: Readout,
    pub num_classes: usize,
    pub gin_eps: f64,
    pub cell_pna_delta: Option<f64>,
    pub tissue_pna_delta: Option<f64>,
}

impl Default for HactConfig {
    fn default() -> Self {
        Self {
            layer: LayerType::Gin,
            cell_input_dim: 1,
            tissue_input_dim: 1,
            cell_layers: 2,
            tissue_layers: 2,
            hidden: 32,
            mlp_depth: 2,
            head_hidden: 32,
            head_depth: 2,
            readout: Readout::Mean,
            num_classes: 2,
            gin_eps: 0.0,
            cell_pna_delta: None,
            tissue_pna_delta: None,
        }
    }
}

/// A cell graph, a tissue graph and the tissue node of every cell.
#[derive(Clone, Debug)]
pub struct HactSample {
    pub cell_graph: EntityGraph,
    pub tissue_graph: EntityGraph,
    /// `None` marks cells outside every tissue region; they are ignored.
    pub assignment: Vec<Option<usize>>,
}

/// Cell-graph layers whose node embeddings are mean-pooled into tissue
/// nodes and concatenated with the tissue features, then tissue-graph
/// layers, readout and head.
#[derive(Clone, Debug)]
pub struct HactModel {
    config: HactConfig,
    seed: u64,
    params: Vec<f64>,
    layout_names: Vec<(String, Dense)>,
    cell: Stack,
    tissue: Stack,
    head: Vec<Dense>,
}

struct HactTrace {
    cell_adj: Vec<Vec<usize>>,
    tissue_adj: Vec<Vec<usize>>,
    cell: Vec<LayerCache>,
    tissue: Vec<LayerCache>,
    counts: Vec<usize>,
    head: HeadCache,
    logits: Vec<f64>,
}

impl HactModel {
    pub fn new(config: HactConfig, seed: u64) -> Result<Self> {
        let as_gnn = |input_dim, num_layers| GnnConfig {
            layer: config.layer,
            input_dim,
            num_layers,
            hidden: config.hidden,
            mlp_depth: config.mlp_depth,
            head_hidden: config.head_hidden,
            head_depth: config.head_depth,
            readout: config.readout,
            num_classes: config.num_classes,
            gin_eps: config.gin_eps,
            pna_delta: None,
        };
        as_gnn(config.cell_input_dim, config.cell_layers).validate()?;
        as_gnn(config.tissue_input_dim, config.tissue_layers).validate()?;
        for d in [config.cell_pna_delta, config.tissue_pna_delta].into_iter().flatten() {
            if !(d > 0.0) {
                return Err(Error::param(format!("PNA delta must be > 0, got {d}")));
            }
        }
        let mut layout = Layout::default();
        let cell_layers = Stack::build(
            &mut layout,
            "cell",
            config.layer,
            config.cell_input_dim,
            config.cell_layers,
            config.hidden,
            config.mlp_depth,
        );
        let tissue_layers = Stack::build(
            &mut layout,
            "tissue",
            config.layer,
            config.tissue_input_dim + config.hidden,
            config.tissue_layers,
            config.hidden,
            config.mlp_depth,
        );
        let head = build_head(&mut layout, config.hidden, config.head_hidden, config.head_depth, config.num_classes);
        let params = layout.init(&mut ChaCha8Rng::seed_from_u64(seed));
        Ok(Self {
            cell: Stack {
                kind: config.layer,
                eps: config.gin_eps,
                delta: config.cell_pna_delta.unwrap_or(1.0),
                layers: cell_layers,
            },
            tissue: Stack {
                kind: config.layer,
                eps: config.gin_eps,
                delta: config.tissue_pna_delta.unwrap_or(1.0),
                layers: tissue_layers,
            },
            config,
            seed,
            params,
            layout_names: layout.denses,
            head,
        })
    }

    pub fn config(&self) -> &HactConfig {
        &self.config
    }

    fn layout(&self) -> Layout {
        Layout {
            denses: self.layout_names.clone(),
            size: self.params.len(),
        }
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.layout().tensors(&self.params)
    }

    pub fn set_tensors(&mut self, tensors: &[Tensor]) -> Result<()> {
        self.params = self.layout().load(tensors)?;
        Ok(())
    }

    /// Mean cell embedding per tissue node (zeros where no cell is assigned)
    /// and the number of cells behind each.
    pub fn pool_cells(cells: &Matrix, assignment: &[Option<usize>], tissue_nodes: usize) -> (Matrix, Vec<usize>) {
        let mut pooled = Matrix::zeros(tissue_nodes, cells.cols);
        let mut counts = vec![0usize; tissue_nodes];
        for (c, a) in assignment.iter().enumerate() {
            if let Some(t) = *a {
                counts[t] += 1;
                for (o, &x) in pooled.row_mut(t).iter_mut().zip(cells.row(c)) {
                    *o += x;
                }
            }
        }
        for (t, &n) in counts.iter().enumerate() {
            if n > 0 {
                pooled.row_mut(t).iter_mut().for_each(|v| *v /= n as f64);
            }
        }
        (pooled, counts)
    }

    fn trace(&self, s: &HactSample) -> Result<HactTrace> {
        let (cg, tg) = (&s.cell_graph, &s.tissue_graph);
        if cg.feature_dim() != self.config.cell_input_dim || tg.feature_dim() != self.config.tissue_input_dim {
            return Err(Error::shape("cell or tissue feature dimension does not match the model"));
        }
        if s.assignment.len() != cg.num_nodes() {
            return Err(Error::shape("one assignment entry per cell is required"));
        }
        if let Some(t) = s.assignment.iter().flatten().find(|&&t| t >= tg.num_nodes()) {
            return Err(Error::input(format!(
                "assignment to tissue node {t} out of range for {} nodes",
                tg.num_nodes()
            )));
        }
        if tg.num_nodes() == 0 {
            return Err(Error::input("cannot classify an empty tissue graph"));
        }
        let cell_adj = cg.adjacency();
        let tissue_adj = tg.adjacency();
        let cell = self.cell.forward(&self.params, &cell_adj, Matrix::features_of(cg));
        let emb = cell.last().map_or_else(|| Matrix::zeros(0, self.config.hidden), |c| c.output().clone());
        let (pooled, counts) = Self::pool_cells(&emb, &s.assignment, tg.num_nodes());
        let dt = self.config.tissue_input_dim;
        let mut x = Matrix::zeros(tg.num_nodes(), dt + self.config.hidden);
        for t in 0..tg.num_nodes() {
            let row = x.row_mut(t);
            row[..dt].copy_from_slice(tg.node_features(t));
            row[dt..].copy_from_slice(pooled.row(t));
        }
        let tissue = self.tissue.forward(&self.params, &tissue_adj, x);
        let r = readout(tissue.last().expect("at least one layer").output(), self.config.readout);
        let (head, logits) = head_forward(&self.head, &self.params, r);
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("model logits".into()));
        }
        Ok(HactTrace {
            cell_adj,
            tissue_adj,
            cell,
            tissue,
            counts,
            head,
            logits,
        })
    }

    fn backprop(&self, s: &HactSample, t: &HactTrace, dlogits: &[f64]) -> Vec<f64> {
        let mut grad = vec![0.0; self.params.len()];
        let dpooled = head_backward(&self.head, &self.params, &t.head, dlogits, &mut grad);
        let dh = readout_backward(s.tissue_graph.num_nodes(), &dpooled, self.config.readout);
        let (dx, _) = self.tissue.backward(&self.params, &t.tissue_adj, &t.tissue, dh, &mut grad);
        let (dt, h) = (self.config.tissue_input_dim, self.config.hidden);
        let mut demb = Matrix::zeros(s.cell_graph.num_nodes(), h);
        for (c, a) in s.assignment.iter().enumerate() {
            if let Some(node) = *a {
                let share = 1.0 / t.counts[node] as f64;
                for (o, &g) in demb.row_mut(c).iter_mut().zip(&dx.row(node)[dt..]) {
                    *o = g * share;
                }
            }
        }
        if !t.cell.is_empty() {
            self.cell.backward(&self.params, &t.cell_adj, &t.cell, demb, &mut grad);
        }
        grad
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&Checkpoint {
            model: "hact".into(),
            config: self.config.clone(),
            seed: self.seed,
            tensors: self.tensors(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint<HactConfig> = serde_json::from_str(text)?;
        if ck.model != "hact" {
            return Err(Error::schema("model", format!("expected \"hact\", found {:?}", ck.model)));
        }
        let mut m = Self::new(ck.config, ck.seed)?;
        m.set_tensors(&ck.tensors)?;
        Ok(m)
    }
}

impl GraphClassifier for HactModel {
    type Input = HactSample;

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn logits(&self, s: &HactSample) -> Result<Vec<f64>> {
        Ok(self.trace(s)?.logits)
    }

    fn loss_and_grad(&self, s: &HactSample, label: usize) -> Result<(f64, Vec<f64>)> {
        check_label(label, self.config.num_classes)?;
        let t = self.trace(s)?;
        let (loss, dlogits) = loss_seed(&t.logits, label);
        Ok((loss, self.backprop(s, &t, &dlogits)))
    }

    fn prepare(&mut self, data: &[(HactSample, usize)]) {
        if self.config.layer != LayerType::Pna {
            return;
        }
        if self.config.cell_pna_delta.is_none() {
            let d = pna_delta_for(data.iter().map(|(s, _)| &s.cell_graph));
            self.config.cell_pna_delta = Some(d);
            self.cell.delta = d;
        }
        if self.config.tissue_pna_delta.is_none() {
            let d = pna_delta_for(data.iter().map(|(s, _)| &s.tissue_graph));
            self.config.tissue_pna_delta = Some(d);
            self.tissue.delta = d;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 100,
            batch_size: 8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::param("need lr >= 0, epochs >= 1 and batch size >= 1"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::param("Adam betas must be in [0, 1) and eps > 0"));
        }
        Ok(())
    }
}

/// Adam optimizer state.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
        }
    }
}

/// Minibatch Adam on mean cross-entropy; returns the mean loss of each epoch.
pub fn train<M: GraphClassifier>(model: &mut M, data: &[(M::Input, usize)], cfg: &TrainConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::input("empty training set"));
    }
    model.prepare(data);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(model.params().len(), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grad = vec![0.0; model.params().len()];
            for &i in batch {
                let (x, label) = &data[i];
                let (loss, g) = model.loss_and_grad(x, *label)?;
                if !loss.is_finite() {
                    return Err(Error::NonFinite(format!("training loss at epoch {epoch}, sample {i}")));
                }
                total += loss;
                for (a, b) in grad.iter_mut().zip(g) {
                    *a += b;
                }
            }
            let scale = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|g| *g *= scale);
            adam.step(model.params_mut(), &grad);
        }
        trace.push(total / data.len() as f64);
    }
    Ok(trace)
}

/// Fraction of samples whose predicted class equals the label.
pub fn accuracy<M: GraphClassifier>(model: &M, data: &[(M::Input, usize)]) -> Result<f64> {
    let mut hits = 0;
    for (x, label) in data {
        if model.predict(x)?.class == *label {
            hits += 1;
        }
    }
    Ok(hits as f64 / data.len().max(1) as f64)
}
