use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use serde_json::{json, Value};

use histograph_core::explain::{explain, render_overlay, top_k_entities, ExplainMethod, ExplainParams};
use histograph_core::features::FeatureMatrix;
use histograph_core::gnn::{accuracy, train, GnnConfig, GnnModel, GraphClassifier, TrainConfig};
use histograph_core::graph_build::EntityGraph;
use histograph_core::pipeline::{benchmark, execute_op, load_pipeline, run_pipeline, Artifact, BenchOp, OpParams};
use histograph_core::raster::{encode_pgm, read_pgm, read_ppm, write_ppm};
use histograph_core::stain::{estimate_profile, StainProfile};
use histograph_core::{EntityTable, LabelMap};

#[derive(Parser)]
#[command(name = "histograph", version, about = "Entity-graph analysis of H&E tiles")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Stain-normalize an RGB tile.
    Normalize(NormalizeArgs),
    /// Foreground mask as a 0/255 PGM (or label JSON for a .json output).
    TissueMask(TissueMaskArgs),
    /// Nuclei instance labels and the entity table.
    Nuclei(NucleiArgs),
    /// SLIC superpixels, optionally merged into tissue regions.
    Superpixel(SuperpixelArgs),
    /// Per-entity feature CSV.
    Features(FeaturesArgs),
    /// kNN cell graph or region adjacency graph.
    BuildGraph(BuildGraphArgs),
    /// Train a GIN/PNA classifier on a graph dataset CSV (graph_path,label).
    Train(TrainArgs),
    /// Class probabilities for one graph JSON or a dataset CSV.
    Predict(PredictArgs),
    /// Node saliency for one graph.
    Explain(ExplainArgs),
    /// Declarative multi-step runs with a content-hash cache.
    #[command(subcommand)]
    Pipeline(PipelineCommand),
    /// Time the core ops on synthetic tiles and emit CSV.
    Benchmark(BenchmarkArgs),
}

#[derive(Subcommand)]
enum PipelineCommand {
    /// Run a pipeline config, reusing cached steps.
    Run(PipelineArgs),
}

#[derive(Args)]
struct Io {
    #[arg(long = "in", value_name = "PATH")]
    input: PathBuf,
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
    /// JSON parameter file; flags given explicitly take precedence.
    #[arg(long, value_name = "FILE")]
    params: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Macenko,
    Vahadane,
}

#[derive(Args)]
struct NormalizeArgs {
    #[command(flatten)]
    io: Io,
    #[arg(long, value_enum)]
    method: Option<Method>,
    /// Target stain profile JSON.
    #[arg(long, value_name = "FILE")]
    reference: Option<PathBuf>,
    /// Also write the input's own stain profile.
    #[arg(long, value_name = "FILE")]
    save_profile: Option<PathBuf>,
}

#[derive(Args)]
struct TissueMaskArgs {
    #[command(flatten)]
    io: Io,
}

#[derive(Args)]
struct NucleiArgs {
    #[command(flatten)]
    io: Io,
    /// Restrict detection to a tissue mask (PGM or label JSON).
    #[arg(long, value_name = "FILE")]
    mask: Option<PathBuf>,
    /// Entity table CSV.
    #[arg(long, value_name = "FILE")]
    entities: Option<PathBuf>,
}

#[derive(Args)]
struct SuperpixelArgs {
    #[command(flatten)]
    io: Io,
    #[arg(long)]
    k: Option<usize>,
    /// Merge adjacent regions closer than this in CIELAB.
    #[arg(long)]
    merge_threshold: Option<f64>,
}

#[derive(Args)]
struct FeaturesArgs {
    #[command(flatten)]
    io: Io,
    #[arg(long, value_name = "FILE")]
    labels: PathBuf,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum GraphMode {
    Knn,
    Rag,
}

#[derive(Args)]
struct BuildGraphArgs {
    /// Feature CSV.
    #[command(flatten)]
    io: Io,
    #[arg(long, value_name = "FILE")]
    labels: PathBuf,
    #[arg(long, value_enum, default_value = "knn")]
    mode: GraphMode,
    #[arg(long)]
    k: Option<usize>,
    /// Drop kNN edges longer than this (pixels).
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    io: Io,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct PredictArgs {
    /// Graph JSON or dataset CSV.
    #[arg(long = "in", value_name = "PATH")]
    input: PathBuf,
    #[arg(long, value_name = "FILE")]
    model: PathBuf,
    /// Prediction CSV; stdout when absent.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExplainArgs {
    #[arg(long)]
    method: ExplainMethod,
    #[arg(long, value_name = "FILE")]
    model: PathBuf,
    #[arg(long, alias = "in", value_name = "FILE")]
    graph: PathBuf,
    /// Explained class; the predicted one when absent.
    #[arg(long)]
    class: Option<usize>,
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// ExplainParams JSON.
    #[arg(long, value_name = "FILE")]
    params: Option<PathBuf>,
    /// Message-passing layer read by gradcam/gradcampp.
    #[arg(long)]
    layer: Option<usize>,
    /// Write the scores as colored disks over --image.
    #[arg(long, value_name = "FILE", requires = "image")]
    overlay: Option<PathBuf>,
    /// Background for --overlay.
    #[arg(long, value_name = "FILE")]
    image: Option<PathBuf>,
    #[arg(long, default_value_t = 4.0)]
    radius: f64,
    /// Print the ids of the k most salient entities.
    #[arg(long)]
    top_k: Option<usize>,
    /// Label map supplying entity ids for --top-k (default ids 1..=N).
    #[arg(long, value_name = "FILE")]
    labels: Option<PathBuf>,
}

#[derive(Args)]
struct PipelineArgs {
    /// Pipeline config JSON.
    #[arg(long = "in", value_name = "FILE")]
    input: PathBuf,
    #[arg(long, env = "HISTOGRAPH_WORKSPACE", value_name = "DIR")]
    workspace: Option<PathBuf>,
    #[arg(long)]
    no_cache: bool,
    /// Write the run report (outputs, executed, cached) as JSON.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchmarkArgs {
    /// CSV output; stdout when absent.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    /// JSON with any of sizes, ops, reps.
    #[arg(long, value_name = "FILE")]
    params: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    sizes: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    ops: Option<Vec<BenchOp>>,
    #[arg(long)]
    reps: Option<usize>,
}

#[derive(Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainParams {
    model: GnnConfig,
    train: TrainConfig,
    seed: u64,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            model: GnnConfig::default(),
            train: TrainConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Deserialize)]
#[serde(default, deny_unknown_fields)]
struct BenchParams {
    sizes: Vec<usize>,
    ops: Vec<BenchOp>,
    reps: usize,
}

impl Default for BenchParams {
    fn default() -> Self {
        Self {
            sizes: vec![512, 1024],
            ops: BenchOp::ALL.to_vec(),
            reps: 3,
        }
    }
}

#[derive(Deserialize)]
struct DatasetRow {
    graph_path: PathBuf,
    label: Option<usize>,
}

fn read_params(path: Option<&Path>) -> Result<Value> {
    match path {
        None => Ok(json!({})),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

fn typed_params<T: for<'de> Deserialize<'de>>(path: Option<&Path>) -> Result<T> {
    Ok(serde_json::from_value(read_params(path)?)?)
}

/// Sets `value[path]`, creating objects on the way.
fn set(value: &mut Value, path: &[&str], v: Value) {
    let mut cur = value;
    for key in &path[..path.len() - 1] {
        if !cur[*key].is_object() {
            cur[*key] = json!({});
        }
        cur = &mut cur[*key];
    }
    cur[path[path.len() - 1]] = v;
}

fn read_labels(path: &Path) -> Result<LabelMap> {
    let ctx = || format!("reading {}", path.display());
    if path.extension().is_some_and(|e| e == "pgm") {
        let mask = read_pgm(path).with_context(ctx)?;
        let labels = mask.data().iter().map(|&v| u32::from(v > 0)).collect();
        Ok(LabelMap::new(mask.height(), mask.width(), labels)?)
    } else {
        LabelMap::load_json(path).with_context(ctx)
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

/// Runs one op exactly as the pipeline runner would and returns its outputs.
fn run_op(op: &str, params: &Value, inputs: Vec<(&str, Artifact)>) -> Result<BTreeMap<String, Artifact>> {
    let (parsed, _) = OpParams::parse(op, params)?;
    let inputs = inputs.into_iter().map(|(k, a)| (k.to_string(), a)).collect();
    Ok(execute_op(&parsed, &inputs)?)
}

fn image_input(path: &Path) -> Result<Artifact> {
    Ok(Artifact::Image(read_ppm(path).with_context(|| format!("reading {}", path.display()))?))
}

fn cmd_normalize(a: NormalizeArgs) -> Result<()> {
    let mut params = read_params(a.io.params.as_deref())?;
    if let Some(m) = a.method {
        let name = match m {
            Method::Macenko => "macenko",
            Method::Vahadane => "vahadane",
        };
        set(&mut params, &["method"], json!(name));
    }
    if let Some(r) = &a.reference {
        let text = fs::read_to_string(r).with_context(|| format!("reading {}", r.display()))?;
        let profile = StainProfile::from_json(&text)?;
        set(&mut params, &["reference"], serde_json::to_value(profile)?);
    }
    let image = image_input(&a.io.input)?;
    if let Some(path) = &a.save_profile {
        let OpParams::Normalize(p) = OpParams::parse("normalize", &params)?.0 else { unreachable!() };
        let Artifact::Image(img) = &image else { unreachable!() };
        write(path, estimate_profile(img, p.method, &p.stain)?.to_json()?.as_bytes())?;
    }
    let out = run_op("normalize", &params, vec![("image", image)])?;
    write(&a.io.out, &out["image"].encode()?)
}

fn cmd_tissue_mask(a: TissueMaskArgs) -> Result<()> {
    let params = read_params(a.io.params.as_deref())?;
    let out = run_op("tissue_mask", &params, vec![("image", image_input(&a.io.input)?)])?;
    let Artifact::Labels(mask) = &out["mask"] else { unreachable!() };
    if a.io.out.extension().is_some_and(|e| e == "json") {
        write(&a.io.out, mask.to_json()?.as_bytes())
    } else {
        write(&a.io.out, &encode_pgm(&mask.to_mask()))
    }
}

fn cmd_nuclei(a: NucleiArgs) -> Result<()> {
    let params = read_params(a.io.params.as_deref())?;
    let mut inputs = vec![("image", image_input(&a.io.input)?)];
    if let Some(m) = &a.mask {
        inputs.push(("mask", Artifact::Labels(read_labels(m)?)));
    }
    let out = run_op("nuclei", &params, inputs)?;
    write(&a.io.out, &out["labels"].encode()?)?;
    if let Some(path) = &a.entities {
        let Artifact::Labels(labels) = &out["labels"] else { unreachable!() };
        write(path, EntityTable::from_label_map(labels).to_csv()?.as_bytes())?;
    }
    Ok(())
}

fn cmd_superpixel(a: SuperpixelArgs) -> Result<()> {
    let mut params = read_params(a.io.params.as_deref())?;
    if let Some(k) = a.k {
        set(&mut params, &["slic", "k"], json!(k));
    }
    if let Some(t) = a.merge_threshold {
        set(&mut params, &["merge", "threshold"], json!(t));
    }
    let out = run_op("superpixel", &params, vec![("image", image_input(&a.io.input)?)])?;
    write(&a.io.out, &out["labels"].encode()?)
}

fn cmd_features(a: FeaturesArgs) -> Result<()> {
    let params = read_params(a.io.params.as_deref())?;
    let inputs = vec![
        ("image", image_input(&a.io.input)?),
        ("labels", Artifact::Labels(read_labels(&a.labels)?)),
    ];
    let out = run_op("features", &params, inputs)?;
    write(&a.io.out, &out["features"].encode()?)
}

fn cmd_build_graph(a: BuildGraphArgs) -> Result<()> {
    let mut params = read_params(a.io.params.as_deref())?;
    if a.mode == GraphMode::Knn {
        if let Some(k) = a.k {
            set(&mut params, &["k"], json!(k));
        }
        if let Some(t) = a.threshold {
            set(&mut params, &["threshold"], json!(t));
        }
    } else if a.k.is_some() || a.threshold.is_some() {
        bail!("--k and --threshold only apply to --mode knn");
    }
    let features = FeatureMatrix::load_csv(&a.io.input).with_context(|| format!("reading {}", a.io.input.display()))?;
    let inputs = vec![
        ("labels", Artifact::Labels(read_labels(&a.labels)?)),
        ("features", Artifact::Features(features)),
    ];
    let op = if a.mode == GraphMode::Knn { "knn_graph" } else { "rag_graph" };
    let out = run_op(op, &params, inputs)?;
    write(&a.io.out, &out["graph"].encode()?)
}

/// Graphs and optional labels; relative paths resolve against the CSV.
fn read_dataset(path: &Path) -> Result<Vec<(PathBuf, EntityGraph, Option<usize>)>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut reader = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let mut rows = vec![];
    for (i, row) in reader.deserialize::<DatasetRow>().enumerate() {
        let row = row.with_context(|| format!("{} row {}", path.display(), i + 1))?;
        let full = base.join(&row.graph_path);
        let g = EntityGraph::load(&full).with_context(|| format!("reading {}", full.display()))?;
        rows.push((row.graph_path, g, row.label));
    }
    Ok(rows)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut p: TrainParams = typed_params(a.io.params.as_deref())?;
    if let Some(e) = a.epochs {
        p.train.epochs = e;
    }
    if let Some(s) = a.seed {
        p.seed = s;
    }
    let rows = read_dataset(&a.io.input)?;
    let mut data = Vec::with_capacity(rows.len());
    for (path, g, label) in rows {
        let label = label.with_context(|| format!("{} has no label", path.display()))?;
        data.push((g, label));
    }
    let Some(first) = data.first() else { bail!("{} lists no graphs", a.io.input.display()) };
    p.model.input_dim = first.0.feature_dim();
    p.model.num_classes = p.model.num_classes.max(data.iter().map(|d| d.1).max().unwrap_or(0) + 1);
    let mut model = GnnModel::new(p.model, p.seed)?;
    let losses = train(&mut model, &data, &p.train)?;
    log::info!(
        "trained {} epochs, final loss {:.4e}, train accuracy {:.3}",
        losses.len(),
        losses.last().copied().unwrap_or(f64::NAN),
        accuracy(&model, &data)?
    );
    model.save(&a.io.out).with_context(|| format!("writing {}", a.io.out.display()))
}

fn cmd_predict(a: PredictArgs) -> Result<()> {
    let model = GnnModel::load(&a.model).with_context(|| format!("reading {}", a.model.display()))?;
    let rows = if a.input.extension().is_some_and(|e| e == "csv") {
        read_dataset(&a.input)?
    } else {
        vec![(a.input.clone(), EntityGraph::load(&a.input)?, None)]
    };
    let classes = model.config().num_classes;
    let mut w = csv::Writer::from_writer(vec![]);
    let mut header = vec!["graph_path".to_string(), "predicted".to_string()];
    header.extend((0..classes).map(|c| format!("p{c}")));
    w.write_record(&header)?;
    let (mut correct, mut labelled) = (0, 0);
    for (path, g, label) in &rows {
        let pred = model.predict(g)?;
        if let Some(l) = label {
            labelled += 1;
            correct += usize::from(*l == pred.class);
        }
        let mut record = vec![path.display().to_string(), pred.class.to_string()];
        record.extend(pred.probabilities.iter().map(|p| format!("{p:.17e}")));
        w.write_record(&record)?;
    }
    if labelled > 0 {
        log::info!("accuracy {correct}/{labelled}");
    }
    let bytes = w.into_inner()?;
    match &a.out {
        Some(p) => write(p, &bytes),
        None => {
            print!("{}", String::from_utf8(bytes)?);
            Ok(())
        }
    }
}

fn cmd_explain(a: ExplainArgs) -> Result<()> {
    let mut params: ExplainParams = typed_params(a.params.as_deref())?;
    if a.layer.is_some() {
        params.layer = a.layer;
    }
    let model = GnnModel::load(&a.model).with_context(|| format!("reading {}", a.model.display()))?;
    let g = EntityGraph::load(&a.graph).with_context(|| format!("reading {}", a.graph.display()))?;
    let class = match a.class {
        Some(c) => c,
        None => model.predict(&g)?.class,
    };
    let saliency = explain(&model, &g, a.method, class, &params)?;
    saliency.save(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    if let (Some(path), Some(image)) = (&a.overlay, &a.image) {
        let img = read_ppm(image).with_context(|| format!("reading {}", image.display()))?;
        write_ppm(&render_overlay(&img, g.centroids(), &saliency.scores, a.radius)?, path)?;
    }
    if let Some(k) = a.top_k {
        let table = match &a.labels {
            Some(l) => EntityTable::from_label_map(&read_labels(l)?),
            None => EntityTable::from_centroids(g.centroids()),
        };
        for id in top_k_entities(&saliency, &table, k)? {
            println!("{id}");
        }
    }
    Ok(())
}

fn cmd_pipeline(a: PipelineArgs) -> Result<()> {
    let mut cfg = load_pipeline(&a.input).with_context(|| format!("loading {}", a.input.display()))?;
    if let Some(ws) = a.workspace {
        cfg.workspace = ws;
    }
    if a.no_cache {
        cfg.cache = false;
    }
    let report = run_pipeline(&cfg)?;
    log::info!("executed {:?}, cached {:?}", report.executed, report.cached);
    let text = serde_json::to_string_pretty(&report)?;
    match &a.out {
        Some(p) => write(p, text.as_bytes()),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn cmd_benchmark(a: BenchmarkArgs) -> Result<()> {
    let mut p: BenchParams = typed_params(a.params.as_deref())?;
    p.sizes = a.sizes.unwrap_or(p.sizes);
    p.ops = a.ops.unwrap_or(p.ops);
    p.reps = a.reps.unwrap_or(p.reps);
    let csv = benchmark(&p.sizes, &p.ops, p.reps)?.to_csv()?;
    match &a.out {
        Some(path) => write(path, csv.as_bytes()),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Normalize(a) => cmd_normalize(a),
        Command::TissueMask(a) => cmd_tissue_mask(a),
        Command::Nuclei(a) => cmd_nuclei(a),
        Command::Superpixel(a) => cmd_superpixel(a),
        Command::Features(a) => cmd_features(a),
        Command::BuildGraph(a) => cmd_build_graph(a),
        Command::Train(a) => cmd_train(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Explain(a) => cmd_explain(a),
        Command::Pipeline(PipelineCommand::Run(a)) => cmd_pipeline(a),
        Command::Benchmark(a) => cmd_benchmark(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
