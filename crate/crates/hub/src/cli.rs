//! Command line: dataset generation, training, reconstruction,
//! manipulation, evaluation and the HTTP service.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use partsdf::eval::{detect_tube_at, evaluate, EvalConfig, Metric};
use partsdf::mesher::{marching_cubes, GridSpec, Mesh};
use partsdf::model::{ModelBundle, Variant};
use partsdf::nets::ShapeParams;
use partsdf::sdf::Vec3;
use partsdf::shapegen::dataset::{read_manifest, read_samples};
use partsdf::shapegen::{generate_dataset, load_dataset, write_dataset, DatasetConfig, FamilyParams, LabelNoise, SampleSet, Split};
use partsdf::trainer::{manipulate_direct, manipulate_shared, reconstruct, train, InferConfig, ManipulateConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::api::{router, ServiceState};
use crate::exit::HubError;

#[derive(Debug, Parser)]
#[command(name = "partsdf-hub", version, about = "Part-structured implicit shapes: data, training, editing, serving")]
pub struct Cli {
    /// Report errors as one JSON object on stderr.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Gen(GenArgs),
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Fit a trained model to an unseen shape.
    Reconstruct(ReconArgs),
    /// Edit a shape's parameters and export the decoded mesh.
    Manipulate(ManipArgs),
    /// Metrics and the tube manipulation benchmark.
    Eval(EvalArgs),
    /// Serve the HTTP API (and optionally the studio assets).
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Family {
    Mixer,
    ChairToy,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum VariantArg {
    Disentangled,
    Shared,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, value_enum, default_value = "mixer")]
    pub family: Family,
    /// Training shapes.
    #[arg(long)]
    pub count: usize,
    /// Held-out shapes, numbered after the training ones.
    #[arg(long, default_value_t = 0)]
    pub test_count: usize,
    #[arg(long, default_value_t = 1.0 / 15.0)]
    pub labeled_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// SDF samples per shape.
    #[arg(long, default_value_t = 50_000)]
    pub samples: usize,
    #[arg(long, default_value_t = 10_000)]
    pub cloud_points: usize,
    /// Fraction of part labels perturbed on labelled shapes.
    #[arg(long)]
    pub label_noise: Option<f64>,
    #[arg(long, default_value_t = 0.1)]
    pub noise_magnitude: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// TrainConfig JSON; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub variant: Option<VariantArg>,
    /// Comma list of Lrp, Lga, Lic, Lcs, encoder (or none).
    #[arg(long, value_delimiter = ',')]
    pub ablate: Vec<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReconArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Sample file (`.bin`) written by `gen`.
    #[arg(long)]
    pub input: PathBuf,
    /// Surface points, one `x y z` per line or OBJ `v` lines. Without it the
    /// samples closest to the surface stand in.
    #[arg(long)]
    pub cloud: Option<PathBuf>,
    #[arg(long, default_value_t = 800)]
    pub iters: usize,
    #[arg(long, default_value_t = 8000)]
    pub samples_per_iter: usize,
    #[arg(long, default_value_t = 128)]
    pub resolution: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory for `params.json` and `mesh.obj`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ManipArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Stored training shape to start from.
    #[arg(long, conflicts_with = "params")]
    pub shape_id: Option<String>,
    /// Latent and parameters from `reconstruct` or an earlier `manipulate`.
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Direct edit `name=value`, repeatable.
    #[arg(long = "set")]
    pub set: Vec<String>,
    /// Shared-variant target `name=value`, repeatable.
    #[arg(long = "target", conflicts_with = "set")]
    pub target: Vec<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, default_value_t = 128)]
    pub resolution: usize,
    /// OBJ path; the parameters go next to it as `.json`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, required_unless_present = "params")]
    pub data: Option<PathBuf>,
    /// Single shape: run only tube detection on these parameters.
    #[arg(long, conflicts_with = "data")]
    pub params: Option<PathBuf>,
    /// Primitive measured by tube detection.
    #[arg(long, default_value = "tube")]
    pub slot: String,
    #[arg(long, default_value = "cd,emd,siou,tube")]
    pub metrics: String,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    #[arg(long)]
    pub max_shapes: Option<usize>,
    /// EvalConfig JSON; flags above override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long)]
    pub static_dir: Option<PathBuf>,
}

/// Latent plus parameters, the file exchanged between subcommands.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamsFile {
    pub latent: Vec<f64>,
    pub params: ShapeParams,
    #[serde(default)]
    pub parameters: std::collections::BTreeMap<String, f64>,
}

impl ParamsFile {
    pub fn new(model: &ModelBundle, latent: Vec<f64>, params: ShapeParams) -> Self {
        let parameters = model.layout.param_names().into_iter().zip(model.layout.explicit_vector(&params)).collect();
        ParamsFile { latent, params, parameters }
    }

    pub fn load(path: &Path) -> Result<Self, HubError> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

fn print_json<T: Serialize>(v: &T) -> Result<(), HubError> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn usage(msg: impl Into<String>) -> HubError {
    HubError::Usage(msg.into())
}

pub fn parse_assignment(s: &str) -> Result<(String, f64), HubError> {
    let (k, v) = s.split_once('=').ok_or_else(|| usage(format!("expected name=value, got `{s}`")))?;
    let v: f64 = v.trim().parse().map_err(|_| usage(format!("`{v}` is not a number")))?;
    Ok((k.trim().to_string(), v))
}

fn load_model(path: &Path) -> Result<ModelBundle, HubError> {
    ModelBundle::load(path).map_err(|e| match e {
        partsdf::Error::Io(io) => HubError::Core(partsdf::Error::Format(format!("{}: {io}", path.display()))),
        other => HubError::Core(other),
    })
}

fn mesh_for(model: &ModelBundle, latent: &[f64], params: &ShapeParams, resolution: usize) -> Result<Mesh, HubError> {
    let f = |pts: &[Vec3]| model.eval_sdf(latent, params, pts);
    Ok(marching_cubes(&f, &GridSpec::cube(resolution))?.weld(0.0))
}

pub fn run(cli: Cli) -> Result<(), HubError> {
    match cli.command {
        Command::Gen(a) => gen(a),
        Command::Train(a) => train_cmd(a),
        Command::Reconstruct(a) => recon(a),
        Command::Manipulate(a) => manipulate(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Serve(a) => serve(a),
    }
}

fn gen(a: GenArgs) -> Result<(), HubError> {
    let family = match a.family {
        Family::Mixer => FamilyParams::from_name("mixer")?,
        Family::ChairToy => FamilyParams::from_name("chair-toy")?,
    };
    let mut cfg = DatasetConfig::new(family, a.count, a.test_count, a.seed);
    cfg.labeled_fraction = a.labeled_fraction;
    cfg.samples_per_shape = a.samples;
    cfg.cloud_points = a.cloud_points;
    cfg.label_noise = a.label_noise.map(|rate| LabelNoise { rate, magnitude: a.noise_magnitude });
    let data = generate_dataset(&cfg)?;
    write_dataset(&a.out, &data)?;
    print_json(&serde_json::json!({
        "out": a.out,
        "train": data.indices(Split::Train).len(),
        "test": data.indices(Split::Test).len(),
    }))
}

fn train_cmd(a: TrainArgs) -> Result<(), HubError> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = a.variant {
        cfg.variant = match v {
            VariantArg::Disentangled => Variant::Disentangled,
            VariantArg::Shared => Variant::Shared,
        };
    }
    for flag in &a.ablate {
        match flag.trim().to_ascii_lowercase().as_str() {
            "none" | "" => {}
            "lrp" => cfg.ablation.disable_lrp = true,
            "lga" => cfg.ablation.disable_lga = true,
            "lic" => cfg.ablation.disable_lic = true,
            "lcs" => cfg.ablation.disable_lcs = true,
            "encoder" | "point-encoder" => cfg.ablation.disable_point_encoder = true,
            other => return Err(usage(format!("unknown ablation `{other}` (Lrp, Lga, Lic, Lcs, encoder)"))),
        }
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let data = load_dataset(&a.data)?;
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("config.json"), serde_json::to_string_pretty(&cfg)? + "\n")?;
    let out = train(&data, &cfg, Some(&a.out))?;
    let last = out.history.last();
    print_json(&serde_json::json!({
        "model": a.out.join("model.json"),
        "epochs": out.history.len(),
        "final_loss": last.map(|m| m.total),
        "components": last.map(|m| &m.components),
    }))
}

/// Points to feed the encoder when no cloud file is given: the samples
/// nearest to the surface.
fn cloud_from_samples(s: &SampleSet, n: usize) -> Vec<Vec3> {
    let mut idx: Vec<usize> = (0..s.len()).collect();
    idx.sort_by(|&a, &b| s.sdf_full[a].abs().total_cmp(&s.sdf_full[b].abs()).then(a.cmp(&b)));
    idx.truncate(n.max(1));
    idx.iter().map(|&i| s.points[i]).collect()
}

pub fn read_cloud(path: &Path) -> Result<Vec<Vec3>, HubError> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        let line = line.strip_prefix("v ").unwrap_or(line);
        if line.is_empty() || line.starts_with('#') || line.chars().next().is_some_and(char::is_alphabetic) {
            continue;
        }
        let v: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<Result<_, _>>()
            .map_err(|_| HubError::Core(partsdf::Error::Format(format!("{}:{}: not a point", path.display(), n + 1))))?;
        if v.len() < 3 {
            return Err(HubError::Core(partsdf::Error::Format(format!("{}:{}: expected x y z", path.display(), n + 1))));
        }
        out.push([v[0], v[1], v[2]]);
    }
    Ok(out)
}

fn recon(a: ReconArgs) -> Result<(), HubError> {
    let model = load_model(&a.model)?;
    let samples = read_samples(&a.input)?;
    let cloud = match &a.cloud {
        Some(p) => read_cloud(p)?,
        None => cloud_from_samples(&samples, model.meta.encoder_points.max(256)),
    };
    let cfg = InferConfig { iterations: a.iters, samples_per_iteration: a.samples_per_iter, seed: a.seed, ..InferConfig::default() };
    let r = reconstruct(&model, &samples, Some(&cloud), &cfg)?;
    fs::create_dir_all(&a.out)?;
    let file = ParamsFile::new(&model, r.latent.clone(), r.params.clone());
    fs::write(a.out.join("params.json"), serde_json::to_string_pretty(&file)? + "\n")?;
    mesh_for(&model, &r.latent, &r.params, a.resolution)?.export_obj(&a.out.join("mesh.obj"))?;
    print_json(&serde_json::json!({
        "out": a.out,
        "initial_loss": r.initial_loss,
        "final_loss": r.final_loss,
    }))
}

fn manipulate(a: ManipArgs) -> Result<(), HubError> {
    let model = load_model(&a.model)?;
    let (latent, params) = match (&a.shape_id, &a.params) {
        (Some(id), None) => {
            let i = model.shape_index(id).ok_or_else(|| usage(format!("unknown shape `{id}`")))?;
            (model.shapes[i].latent.clone(), model.shapes[i].params.clone())
        }
        (None, Some(p)) => {
            let f = ParamsFile::load(p)?;
            (f.latent, f.params)
        }
        _ => return Err(usage("give exactly one of --shape-id and --params")),
    };
    let (latent, params) = if !a.target.is_empty() {
        let names = model.layout.param_names();
        let mut targets = Vec::new();
        for t in &a.target {
            let (k, v) = parse_assignment(t)?;
            let i = names.iter().position(|n| *n == k).ok_or_else(|| usage(format!("unknown parameter `{k}`")))?;
            targets.push((i, v));
        }
        let mut cfg = ManipulateConfig::default();
        if let Some(s) = a.steps {
            cfg.steps = s;
        }
        let r = manipulate_shared(&model, &latent, &targets, &cfg)?;
        (r.latent, r.params)
    } else {
        let edits = a.set.iter().map(|s| parse_assignment(s)).collect::<Result<Vec<_>, _>>()?;
        (latent.clone(), manipulate_direct(&model, &params, &edits)?)
    };
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    mesh_for(&model, &latent, &params, a.resolution)?.export_obj(&a.out)?;
    let file = ParamsFile::new(&model, latent, params);
    fs::write(a.out.with_extension("json"), serde_json::to_string_pretty(&file)? + "\n")?;
    print_json(&file.parameters)
}

fn eval_cmd(a: EvalArgs) -> Result<(), HubError> {
    let model = load_model(&a.model)?;
    if let Some(p) = &a.params {
        let f = ParamsFile::load(p)?;
        let si = model.layout.slot_index(&a.slot).ok_or_else(|| usage(format!("unknown primitive `{}`", a.slot)))?;
        let t = f.params.prims[si].translation;
        let sdf = |pts: &[Vec3]| model.eval_sdf(&f.latent, &f.params, pts);
        let d = detect_tube_at(&sdf, [t[0], t[1]], t[2])?;
        return print_json(&d);
    }
    let data_dir = a.data.as_ref().ok_or_else(|| usage("--data is required"))?;
    let mut cfg = match &a.config {
        Some(p) => serde_json::from_str::<EvalConfig>(&fs::read_to_string(p)?)?,
        None => EvalConfig::default(),
    };
    cfg.metrics = Metric::parse_list(&a.metrics)?;
    cfg.split = match a.split {
        SplitArg::Train => Split::Train,
        SplitArg::Test => Split::Test,
    };
    if a.max_shapes.is_some() {
        cfg.max_shapes = a.max_shapes;
    }
    if let Some(i) = a.iters {
        cfg.infer.iterations = i;
    }
    cfg.benchmark.slot = a.slot.clone();
    let data = load_dataset(data_dir)?;
    let report = evaluate(&model, &data, &cfg)?;
    if let Some(out) = &a.out {
        report.write(out)?;
    }
    print_json(&report.summary)
}

fn serve(a: ServeArgs) -> Result<(), HubError> {
    let model = load_model(&a.model)?;
    let manifest = a.data.as_deref().map(read_manifest).transpose()?;
    let state = Arc::new(ServiceState::new(model, manifest, Some(a.model.clone())));
    let app = router(state, a.static_dir.as_deref());
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind((a.host.as_str(), a.port)).await?;
        eprintln!("partsdf-hub listening on http://{}", listener.local_addr()?);
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
    })?;
    Ok(())
}
