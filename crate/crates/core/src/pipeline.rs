//! Linear pipelines of preprocessing ops with content-hash caching, and the
//! runtime benchmark harness.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{debug, info};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::{extract_features, FeatureMatrix, FeatureParams};
use crate::graph_build::{build_knn_graph, build_rag, EntityGraph, KnnParams};
use crate::nuclei::{detect_nuclei_with, NucleiParams};
use crate::raster::{decode_ppm, encode_ppm, EntityTable, Image, LabelMap};
use crate::stain::{normalize, StainMethod, StainParams, StainProfile};
use crate::superpixel::{merge_superpixels, slic, MergeParams, SlicParams};
use crate::synth::pseudo_tissue;
use crate::tissue_mask::{detect_tissue, TissueMaskParams};

/// Kind of value flowing between steps; fixes the on-disk format.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArtifactKind {
    Image,
    Labels,
    Features,
    Graph,
}

impl ArtifactKind {
    pub fn extension(self) -> &'static str {
        match self {
            Self::Image => "ppm",
            Self::Labels | Self::Graph => "json",
            Self::Features => "csv",
        }
    }

    pub fn decode(self, bytes: &[u8]) -> Result<Artifact> {
        let text = || std::str::from_utf8(bytes).map_err(|e| Error::input(format!("artifact is not UTF-8: {e}")));
        Ok(match self {
            Self::Image => Artifact::Image(decode_ppm(bytes)?),
            Self::Labels => Artifact::Labels(LabelMap::from_json(text()?)?),
            Self::Features => Artifact::Features(FeatureMatrix::from_csv(text()?)?),
            Self::Graph => Artifact::Graph(EntityGraph::from_json(text()?)?),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Artifact {
    Image(Image),
    Labels(LabelMap),
    Features(FeatureMatrix),
    Graph(EntityGraph),
}

impl Artifact {
    pub fn kind(&self) -> ArtifactKind {
        match self {
            Self::Image(_) => ArtifactKind::Image,
            Self::Labels(_) => ArtifactKind::Labels,
            Self::Features(_) => ArtifactKind::Features,
            Self::Graph(_) => ArtifactKind::Graph,
        }
    }

    /// Exact bytes written to disk.
    pub fn encode(&self) -> Result<Vec<u8>> {
        Ok(match self {
            Self::Image(img) => encode_ppm(img),
            Self::Labels(l) => l.to_json()?.into_bytes(),
            Self::Features(f) => f.to_csv()?.into_bytes(),
            Self::Graph(g) => g.to_json()?.into_bytes(),
        })
    }

    fn take_image(&self) -> &Image {
        match self {
            Self::Image(i) => i,
            _ => unreachable!("slot kinds are checked before execution"),
        }
    }

    fn take_labels(&self) -> &LabelMap {
        match self {
            Self::Labels(l) => l,
            _ => unreachable!("slot kinds are checked before execution"),
        }
    }

    fn take_features(&self) -> &FeatureMatrix {
        match self {
            Self::Features(f) => f,
            _ => unreachable!("slot kinds are checked before execution"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NormalizeParams {
    pub method: StainMethod,
    pub stain: StainParams,
    /// Target appearance; the default H&E profile when absent.
    pub reference: Option<StainProfile>,
}

impl Default for NormalizeParams {
    fn default() -> Self {
        Self {
            method: StainMethod::Macenko,
            stain: StainParams::default(),
            reference: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SuperpixelParams {
    pub slic: SlicParams,
    /// Region merging after SLIC; skipped when absent.
    pub merge: Option<MergeParams>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RagParams {}

/// Parsed parameters of one op.
#[derive(Clone, Debug, PartialEq)]
pub enum OpParams {
    Normalize(NormalizeParams),
    TissueMask(TissueMaskParams),
    Nuclei(NucleiParams),
    Superpixel(SuperpixelParams),
    Features(FeatureParams),
    KnnGraph(KnnParams),
    RagGraph(RagParams),
}

struct OpSpec {
    name: &'static str,
    /// Bumped whenever the op's output changes for the same input.
    version: u32,
    inputs: &'static [(&'static str, ArtifactKind, bool)],
    outputs: &'static [(&'static str, ArtifactKind)],
}

use ArtifactKind as K;

const OPS: &[OpSpec] = &[
    OpSpec {
        name: "normalize",
        version: 1,
        inputs: &[("image", K::Image, true)],
        outputs: &[("image", K::Image)],
    },
    OpSpec {
        name: "tissue_mask",
        version: 1,
        inputs: &[("image", K::Image, true)],
        outputs: &[("mask", K::Labels)],
    },
    OpSpec {
        name: "nuclei",
        version: 1,
        inputs: &[("image", K::Image, true), ("mask", K::Labels, false)],
        outputs: &[("labels", K::Labels)],
    },
    OpSpec {
        name: "superpixel",
        version: 1,
        inputs: &[("image", K::Image, true)],
        outputs: &[("labels", K::Labels)],
    },
    OpSpec {
        name: "features",
        version: 1,
        inputs: &[("image", K::Image, true), ("labels", K::Labels, true)],
        outputs: &[("features", K::Features)],
    },
    OpSpec {
        name: "knn_graph",
        version: 1,
        inputs: &[("labels", K::Labels, true), ("features", K::Features, true)],
        outputs: &[("graph", K::Graph)],
    },
    OpSpec {
        name: "rag_graph",
        version: 1,
        inputs: &[("labels", K::Labels, true), ("features", K::Features, true)],
        outputs: &[("graph", K::Graph)],
    },
];

fn op_spec(name: &str) -> Option<&'static OpSpec> {
    OPS.iter().find(|o| o.name == name)
}

pub fn op_names() -> Vec<&'static str> {
    OPS.iter().map(|o| o.name).collect()
}

/// First key of `given` (dotted path) that the canonical form does not know.
fn unknown_key(given: &Value, canonical: &Value, prefix: &str) -> Option<String> {
    let (Value::Object(g), Value::Object(c)) = (given, canonical) else {
        return None;
    };
    for (k, v) in g {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match c.get(k) {
            None => return Some(path),
            Some(cv) => {
                if let Some(found) = unknown_key(v, cv, &path) {
                    return Some(found);
                }
            }
        }
    }
    None
}

fn typed<T: Serialize + for<'de> Deserialize<'de>>(params: &Value) -> std::result::Result<(T, Value), String> {
    let value = if params.is_null() { Value::Object(Default::default()) } else { params.clone() };
    let parsed: T = serde_json::from_value(value.clone()).map_err(|e| e.to_string())?;
    let canonical = serde_json::to_value(&parsed).map_err(|e| e.to_string())?;
    if let Some(key) = unknown_key(&value, &canonical, "") {
        return Err(format!("unknown parameter `{key}`"));
    }
    Ok((parsed, canonical))
}

impl OpParams {
    /// Parses `params` for `op`, returning the typed form and its canonical
    /// JSON (all defaults filled in).
    pub fn parse(op: &str, params: &Value) -> Result<(Self, Value)> {
        let fail = |m: String| Error::schema("params", m);
        Ok(match op {
            "normalize" => typed(params).map(|(p, c)| (Self::Normalize(p), c)).map_err(fail)?,
            "tissue_mask" => typed(params).map(|(p, c)| (Self::TissueMask(p), c)).map_err(fail)?,
            "nuclei" => typed(params).map(|(p, c)| (Self::Nuclei(p), c)).map_err(fail)?,
            "superpixel" => typed(params).map(|(p, c)| (Self::Superpixel(p), c)).map_err(fail)?,
            "features" => typed(params).map(|(p, c)| (Self::Features(p), c)).map_err(fail)?,
            "knn_graph" => typed(params).map(|(p, c)| (Self::KnnGraph(p), c)).map_err(fail)?,
            "rag_graph" => typed(params).map(|(p, c)| (Self::RagGraph(p), c)).map_err(fail)?,
            other => {
                return Err(Error::schema(
                    "op",
                    format!("unknown op `{other}`, expected one of {}", op_names().join(", ")),
                ))
            }
        })
    }

    fn validate(&self) -> Result<()> {
        match self {
            Self::TissueMask(p) => p.validate(),
            Self::Nuclei(p) => p.validate(),
            Self::Features(p) => p.glcm.validate(),
            Self::KnnGraph(p) => p.validate(),
            _ => Ok(()),
        }
    }
}

/// Runs one op on in-memory artifacts keyed by slot name.
pub fn execute_op(params: &OpParams, inputs: &BTreeMap<String, Artifact>) -> Result<BTreeMap<String, Artifact>> {
    params.validate()?;
    let get = |slot: &str| {
        inputs
            .get(slot)
            .ok_or_else(|| Error::input(format!("missing input slot `{slot}`")))
    };
    let one = |slot: &str, a: Artifact| BTreeMap::from([(slot.to_string(), a)]);
    Ok(match params {
        OpParams::Normalize(p) => {
            let img = normalize(get("image")?.take_image(), p.method, p.reference.as_ref(), &p.stain)?;
            one("image", Artifact::Image(img))
        }
        OpParams::TissueMask(p) => one("mask", Artifact::Labels(detect_tissue(get("image")?.take_image(), p)?)),
        OpParams::Nuclei(p) => {
            let stains = StainProfile::default_he().stain_matrix;
            let mask = inputs.get("mask").map(|m| m.take_labels());
            let (labels, _) = detect_nuclei_with(get("image")?.take_image(), p, &stains, mask)?;
            one("labels", Artifact::Labels(labels))
        }
        OpParams::Superpixel(p) => {
            let img = get("image")?.take_image();
            let mut labels = slic(img, &p.slic)?;
            if let Some(m) = &p.merge {
                labels = merge_superpixels(img, &labels, m)?;
            }
            one("labels", Artifact::Labels(labels))
        }
        OpParams::Features(p) => {
            let labels = get("labels")?.take_labels();
            let table = EntityTable::from_label_map(labels);
            let f = extract_features(get("image")?.take_image(), labels, &table, p)?;
            one("features", Artifact::Features(f))
        }
        OpParams::KnnGraph(p) => {
            let table = EntityTable::from_label_map(get("labels")?.take_labels());
            one("graph", Artifact::Graph(build_knn_graph(&table, get("features")?.take_features(), p)?))
        }
        OpParams::RagGraph(_) => {
            let labels = get("labels")?.take_labels();
            let table = EntityTable::from_label_map(labels);
            one("graph", Artifact::Graph(build_rag(labels, get("features")?.take_features(), &table)?))
        }
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepConfig {
    pub name: String,
    pub op: String,
    #[serde(default)]
    pub params: Value,
    /// Op input slot -> artifact key.
    #[serde(default)]
    pub inputs: BTreeMap<String, String>,
    /// Op output slot -> artifact key.
    #[serde(default)]
    pub outputs: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub workspace: PathBuf,
    #[serde(default = "default_cache")]
    pub cache: bool,
    /// Artifact key -> file path of externally provided inputs.
    #[serde(default)]
    pub sources: BTreeMap<String, PathBuf>,
    #[serde(default)]
    pub steps: Vec<StepConfig>,
}

fn default_cache() -> bool {
    true
}

fn step_error(step: &str, key: &str, message: impl Into<String>) -> Error {
    Error::schema(format!("{step}.{key}"), message)
}

/// Parses and validates a pipeline document. Relative paths are kept as
/// written; see [`load_pipeline`] for file-relative resolution.
pub fn parse_pipeline(doc: &str) -> Result<PipelineConfig> {
    let cfg: PipelineConfig = serde_json::from_str(doc)?;
    validate_pipeline(&cfg)?;
    Ok(cfg)
}

pub fn validate_pipeline(cfg: &PipelineConfig) -> Result<()> {
    let mut kinds: BTreeMap<&str, Option<ArtifactKind>> = cfg.sources.keys().map(|k| (k.as_str(), None)).collect();
    let mut names = BTreeSet::new();
    for step in &cfg.steps {
        let name = step.name.as_str();
        if name.is_empty() || name.contains(['/', '\\']) || name == "." || name == ".." {
            return Err(step_error(name, "name", "step names must be non-empty plain directory names"));
        }
        if !names.insert(name) {
            return Err(step_error(name, "name", "duplicate step name"));
        }
        let spec = op_spec(&step.op).ok_or_else(|| {
            step_error(name, "op", format!("unknown op `{}`, expected one of {}", step.op, op_names().join(", ")))
        })?;
        OpParams::parse(&step.op, &step.params).map_err(|e| match e {
            Error::Schema { message, .. } => step_error(name, "params", message),
            other => other,
        })?;
        for slot in step.inputs.keys() {
            if !spec.inputs.iter().any(|(s, _, _)| s == slot) {
                return Err(step_error(name, &format!("inputs.{slot}"), format!("op `{}` has no such input", spec.name)));
            }
        }
        for &(slot, kind, required) in spec.inputs {
            match step.inputs.get(slot) {
                None if required => {
                    return Err(step_error(name, &format!("inputs.{slot}"), "required input is not bound"))
                }
                None => {}
                Some(key) => match kinds.get(key.as_str()) {
                    None => {
                        return Err(step_error(
                            name,
                            &format!("inputs.{slot}"),
                            format!("`{key}` is neither a source nor an earlier output"),
                        ))
                    }
                    Some(Some(k)) if *k != kind => {
                        return Err(step_error(
                            name,
                            &format!("inputs.{slot}"),
                            format!("`{key}` is a {k:?} artifact, expected {kind:?}"),
                        ))
                    }
                    Some(_) => {}
                },
            }
        }
        for slot in step.outputs.keys() {
            if !spec.outputs.iter().any(|(s, _)| s == slot) {
                return Err(step_error(name, &format!("outputs.{slot}"), format!("op `{}` has no such output", spec.name)));
            }
        }
        for &(slot, kind) in spec.outputs {
            let key = step.outputs.get(slot).map(String::as_str).unwrap_or(slot);
            if kinds.contains_key(key) {
                return Err(step_error(name, &format!("outputs.{slot}"), format!("key `{key}` is already defined")));
            }
            kinds.insert(key, Some(kind));
        }
    }
    Ok(())
}

/// Reads a pipeline file, resolving relative `workspace` and `sources`
/// against the file's directory.
pub fn load_pipeline(path: impl AsRef<Path>) -> Result<PipelineConfig> {
    let path = path.as_ref();
    let mut cfg = parse_pipeline(&crate::raster::read_text(path)?)?;
    let base = path.parent().unwrap_or(Path::new("."));
    if cfg.workspace.is_relative() {
        cfg.workspace = base.join(&cfg.workspace);
    }
    for p in cfg.sources.values_mut() {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    }
    Ok(cfg)
}

/// Keys produced by a step, in slot order.
fn output_keys<'a>(step: &'a StepConfig, spec: &'static OpSpec) -> Vec<(&'static str, ArtifactKind, &'a str)> {
    spec.outputs
        .iter()
        .map(|&(slot, kind)| (slot, kind, step.outputs.get(slot).map(String::as_str).unwrap_or(slot)))
        .collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ManifestOutput {
    file: String,
    sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    key: String,
    outputs: BTreeMap<String, ManifestOutput>,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|source| Error::File { path: tmp.clone(), source })?;
    fs::rename(&tmp, path).map_err(|source| Error::File {
        path: path.to_path_buf(),
        source,
    })
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| Error::File {
        path: path.to_path_buf(),
        source,
    })
}

/// Outcome of a run: final artifact locations and which steps ran.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub outputs: BTreeMap<String, PathBuf>,
    pub executed: Vec<String>,
    pub cached: Vec<String>,
}

/// Reuses the recorded outputs when the manifest key matches and every file
/// still hashes to its recorded value.
fn cache_hit(dir: &Path, key: &str) -> Option<Manifest> {
    let text = fs::read_to_string(dir.join("manifest.json")).ok()?;
    let manifest: Manifest = serde_json::from_str(&text).ok()?;
    if manifest.key != key {
        return None;
    }
    for out in manifest.outputs.values() {
        let bytes = fs::read(dir.join(&out.file)).ok()?;
        if sha256_hex(&bytes) != out.sha256 {
            return None;
        }
    }
    Some(manifest)
}

pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunReport> {
    validate_pipeline(cfg)?;
    fs::create_dir_all(&cfg.workspace).map_err(|source| Error::File {
        path: cfg.workspace.clone(),
        source,
    })?;
    // artifact key -> (path, content hash)
    let mut known: BTreeMap<String, (PathBuf, String)> = BTreeMap::new();
    for (key, path) in &cfg.sources {
        known.insert(key.clone(), (path.clone(), sha256_hex(&read_bytes(path)?)));
    }
    let mut report = RunReport::default();
    for step in &cfg.steps {
        let spec = op_spec(&step.op).expect("validated op");
        let (params, canonical) = OpParams::parse(&step.op, &step.params)?;
        let bound: Vec<(&str, ArtifactKind, &(PathBuf, String))> = spec
            .inputs
            .iter()
            .filter_map(|&(slot, kind, _)| step.inputs.get(slot).map(|k| (slot, kind, &known[k])))
            .collect();
        let key_doc = serde_json::json!({
            "op": spec.name,
            "version": spec.version,
            "params": canonical,
            "inputs": bound.iter().map(|(slot, _, (_, h))| (slot.to_string(), Value::String(h.clone()))).collect::<serde_json::Map<_, _>>(),
        });
        let key = sha256_hex(key_doc.to_string().as_bytes());
        let dir = cfg.workspace.join(&step.name);
        let outs = output_keys(step, spec);

        if cfg.cache {
            if let Some(manifest) = cache_hit(&dir, &key) {
                debug!("step {} cached", step.name);
                for (slot, _, out_key) in &outs {
                    let m = &manifest.outputs[*slot];
                    known.insert(out_key.to_string(), (dir.join(&m.file), m.sha256.clone()));
                }
                report.cached.push(step.name.clone());
                continue;
            }
        }

        info!("running step {} ({})", step.name, spec.name);
        let result = (|| -> Result<Manifest> {
            let mut inputs = BTreeMap::new();
            for (slot, kind, (path, _)) in &bound {
                inputs.insert(slot.to_string(), kind.decode(&read_bytes(path)?)?);
            }
            if dir.exists() {
                fs::remove_dir_all(&dir).map_err(|source| Error::File { path: dir.clone(), source })?;
            }
            fs::create_dir_all(&dir).map_err(|source| Error::File { path: dir.clone(), source })?;
            let produced = execute_op(&params, &inputs)?;
            let mut manifest = Manifest {
                key: key.clone(),
                outputs: BTreeMap::new(),
            };
            for (slot, kind, out_key) in &outs {
                let bytes = produced[*slot].encode()?;
                let file = format!("{out_key}.{}", kind.extension());
                write_atomic(&dir.join(&file), &bytes)?;
                manifest.outputs.insert(
                    slot.to_string(),
                    ManifestOutput {
                        file,
                        sha256: sha256_hex(&bytes),
                    },
                );
            }
            write_atomic(&dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
            Ok(manifest)
        })();
        let manifest = match result {
            Ok(m) => m,
            Err(e) => {
                let _ = fs::remove_dir_all(&dir);
                return Err(Error::Step {
                    step: step.name.clone(),
                    source: Box::new(e),
                });
            }
        };
        for (slot, _, out_key) in &outs {
            let m = &manifest.outputs[*slot];
            known.insert(out_key.to_string(), (dir.join(&m.file), m.sha256.clone()));
        }
        report.executed.push(step.name.clone());
    }
    for step in &cfg.steps {
        for (_, _, out_key) in output_keys(step, op_spec(&step.op).expect("validated op")) {
            report.outputs.insert(out_key.to_string(), known[out_key].0.clone());
        }
    }
    Ok(report)
}

/// Ops timed by [`benchmark`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchOp {
    Macenko,
    Vahadane,
    TissueMask,
    Nuclei,
    Superpixel,
    Features,
    KnnGraph,
}

impl BenchOp {
    pub const ALL: [BenchOp; 7] = [
        Self::Macenko,
        Self::Vahadane,
        Self::TissueMask,
        Self::Nuclei,
        Self::Superpixel,
        Self::Features,
        Self::KnnGraph,
    ];

    /// (module, op) labels of the CSV.
    pub fn labels(self) -> (&'static str, &'static str) {
        match self {
            Self::Macenko => ("stain", "macenko"),
            Self::Vahadane => ("stain", "vahadane"),
            Self::TissueMask => ("tissue_mask", "detect"),
            Self::Nuclei => ("nuclei", "detect"),
            Self::Superpixel => ("superpixel", "slic_merge"),
            Self::Features => ("features", "extract"),
            Self::KnnGraph => ("graph_build", "knn"),
        }
    }
}

impl std::str::FromStr for BenchOp {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "macenko" => Self::Macenko,
            "vahadane" => Self::Vahadane,
            "tissue_mask" => Self::TissueMask,
            "nuclei" => Self::Nuclei,
            "superpixel" => Self::Superpixel,
            "features" => Self::Features,
            "knn_graph" => Self::KnnGraph,
            other => return Err(Error::param(format!("unknown benchmark op `{other}`"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub module: String,
    pub op: String,
    pub side: usize,
    pub seconds: f64,
    pub reps: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub rows: Vec<BenchmarkRow>,
}

pub const BENCHMARK_HEADER: [&str; 4] = ["module", "op", "side", "seconds"];

impl BenchmarkReport {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(BENCHMARK_HEADER)?;
        for r in &self.rows {
            w.write_record([r.module.clone(), r.op.clone(), r.side.to_string(), format!("{:.6}", r.seconds)])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn seconds(&self, op: BenchOp, side: usize) -> Option<f64> {
        let (module, name) = op.labels();
        self.rows
            .iter()
            .find(|r| r.module == module && r.op == name && r.side == side)
            .map(|r| r.seconds)
    }
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Median wall time of `reps` calls.
pub fn median_seconds(reps: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    if reps == 0 {
        return Err(Error::param("repetitions must be >= 1"));
    }
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        f()?;
        times.push(start.elapsed().as_secs_f64().max(f64::MIN_POSITIVE));
    }
    Ok(median(&mut times))
}

/// Times each op on a seeded pseudo-tissue image per side length.
pub fn benchmark(sizes: &[usize], ops: &[BenchOp], reps: usize) -> Result<BenchmarkReport> {
    if let Some(&s) = sizes.iter().find(|&&s| s < 64) {
        return Err(Error::param(format!("benchmark sides must be >= 64, got {s}")));
    }
    let mut report = BenchmarkReport::default();
    for &side in sizes {
        let img = pseudo_tissue(side, side as u64);
        let stains = StainProfile::default_he().stain_matrix;
        let needs_nuclei = ops.iter().any(|op| matches!(op, BenchOp::Features | BenchOp::KnnGraph));
        let nuclei = if needs_nuclei {
            Some(detect_nuclei_with(&img, &NucleiParams::default(), &stains, None)?)
        } else {
            None
        };
        let features = if ops.contains(&BenchOp::KnnGraph) {
            let (labels, table) = nuclei.as_ref().expect("nuclei computed");
            Some(extract_features(&img, labels, table, &FeatureParams::default())?)
        } else {
            None
        };
        for &op in ops {
            let stain = StainParams::default();
            let seconds = median_seconds(reps, || {
                match op {
                    BenchOp::Macenko => drop(normalize(&img, StainMethod::Macenko, None, &stain)?),
                    BenchOp::Vahadane => drop(normalize(&img, StainMethod::Vahadane, None, &stain)?),
                    BenchOp::TissueMask => drop(detect_tissue(&img, &TissueMaskParams::default())?),
                    BenchOp::Nuclei => drop(detect_nuclei_with(&img, &NucleiParams::default(), &stains, None)?),
                    BenchOp::Superpixel => {
                        let sp = slic(&img, &SlicParams::default())?;
                        drop(merge_superpixels(&img, &sp, &MergeParams::default())?)
                    }
                    BenchOp::Features => {
                        let (labels, table) = nuclei.as_ref().expect("nuclei computed");
                        drop(extract_features(&img, labels, table, &FeatureParams::default())?)
                    }
                    BenchOp::KnnGraph => {
                        let (_, table) = nuclei.as_ref().expect("nuclei computed");
                        drop(build_knn_graph(table, features.as_ref().expect("features computed"), &KnnParams::default())?)
                    }
                }
                Ok(())
            })?;
            let (module, name) = op.labels();
            info!("benchmark {module}/{name} side {side}: {seconds:.4} s");
            report.rows.push(BenchmarkRow {
                module: module.into(),
                op: name.into(),
                side,
                seconds,
                reps,
            });
        }
    }
    Ok(report)
}
