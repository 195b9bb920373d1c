//! `sgctx`: dataset generation, training, image generation, evaluation and
//! rating studies from one command.

use std::ffi::OsString;
use std::fs;
use std::io::BufReader;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use sgctx_core::dataset::{generate_shapes_world, ingest_coco, load_split, save_split, DatasetSplit, ShapesWorldConfig, SyntheticGraphParams};
use sgctx_core::image::RgbImage;
use sgctx_core::metrics::{aggregate_study, random_baseline, read_ratings, relation_tally, avg_iou, CategoryMap, Design, MetricsError, DEFAULT_MIN_CONTROL_ACCURACY};
use sgctx_core::model::infer_boxes;
use sgctx_core::scene::{parse_scene_graph, BoundingBox, SceneGraph};
use sgctx_core::study::{export_study, valid_id, ExportItem, ExportOptions, StudyManifest, DEFAULT_CONTROL_RATE, DEFAULT_TARGET_RATINGS};
use sgctx_core::train::{generate_images, run_training, step_rng, TrainConfig, Trainer};
use sgctx_rating_service::{Service, ServiceConfig};

#[derive(Debug, Parser)]
#[command(name = "sgctx", version, about = "Scene-graph-conditioned image generation at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build datasets.
    #[command(subcommand)]
    Dataset(DatasetCmd),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Render one scene graph to a PPM image.
    Generate(GenerateArgs),
    /// Layout metrics and rating studies.
    #[command(subcommand)]
    Eval(EvalCmd),
    /// Host rating studies over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, Subcommand)]
enum DatasetCmd {
    /// Generate a shapes-world dataset.
    Gen(GenArgs),
    /// Ingest COCO-style annotations.
    Ingest(IngestArgs),
}

#[derive(Debug, Args)]
struct GenArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    scenes: Option<usize>,
    #[arg(long)]
    image_size: Option<usize>,
    /// Shapes-world config JSON; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct IngestArgs {
    /// Annotation JSON.
    #[arg(long)]
    annotations: PathBuf,
    /// Directory of `<image id>.ppm` files.
    #[arg(long)]
    images: Option<PathBuf>,
    /// Graph-construction parameters JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Training config JSON; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Boxes {
    Gt,
    Pred,
}

#[derive(Debug, Args)]
struct GenerateArgs {
    /// Scene-graph JSON.
    #[arg(long)]
    graph: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    /// `gt` lays objects out from the graph's own boxes and masks.
    #[arg(long, value_enum, default_value = "pred")]
    boxes: Boxes,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum EvalCmd {
    /// Relation score and IoU of ground-truth or predicted layouts.
    Layout(LayoutArgs),
    /// Rating studies.
    #[command(subcommand)]
    Study(StudyCmd),
}

#[derive(Debug, Args)]
struct LayoutArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_enum)]
    boxes: Boxes,
    /// Required for `--boxes pred`.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Random layouts drawn for the baseline.
    #[arg(long, default_value_t = 100)]
    baseline_samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Metrics JSON; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum StudyCmd {
    /// Build a study manifest and its media.
    Export(ExportArgs),
    /// Aggregate a ratings CSV.
    Aggregate(AggregateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DesignArg {
    Mors,
    Avb,
    Abx,
}

impl From<DesignArg> for Design {
    fn from(d: DesignArg) -> Self {
        match d {
            DesignArg::Mors => Design::Mors,
            DesignArg::Avb => Design::AvB,
            DesignArg::Abx => Design::Abx,
        }
    }
}

#[derive(Debug, Args)]
struct ExportArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// `name=checkpoint`; repeat for each compared model.
    #[arg(long = "model", value_parser = parse_model, required = true)]
    models: Vec<(String, PathBuf)>,
    #[arg(long, value_enum)]
    design: DesignArg,
    /// Total trials, controls included.
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = DEFAULT_CONTROL_RATE)]
    control_rate: f64,
    #[arg(long, default_value_t = DEFAULT_TARGET_RATINGS)]
    target_ratings: usize,
    #[arg(long, value_enum, default_value = "pred")]
    boxes: Boxes,
    #[arg(long, default_value = "study")]
    study_id: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn parse_model(s: &str) -> Result<(String, PathBuf), String> {
    let (name, path) = s.split_once('=').ok_or("expected name=checkpoint")?;
    if !valid_id(name) {
        return Err(format!("model name {name:?} must be [A-Za-z0-9._-]"));
    }
    Ok((name.to_string(), PathBuf::from(path)))
}

#[derive(Debug, Args)]
struct AggregateArgs {
    #[arg(long)]
    ratings: PathBuf,
    /// Study manifest; supplies the compared model pair.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_MIN_CONTROL_ACCURACY)]
    min_control_acc: f64,
    /// Predicate-to-category JSON replacing the default table.
    #[arg(long)]
    categories: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long)]
    data_dir: PathBuf,
    /// Media directory; defaults to `<data-dir>/media`.
    #[arg(long)]
    media: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: SocketAddr,
    #[arg(long, default_value_t = DEFAULT_MIN_CONTROL_ACCURACY)]
    min_control_acc: f64,
}

/// Runs the CLI and returns the process exit code: 0 on success, 2 for
/// usage errors, 1 for runtime failures.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or("SGCTX_LOG", "info")).format_timestamp(None).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Dataset(DatasetCmd::Gen(a)) => dataset_gen(a),
        Command::Dataset(DatasetCmd::Ingest(a)) => dataset_ingest(a),
        Command::Train(a) => train(a),
        Command::Generate(a) => generate(a),
        Command::Eval(EvalCmd::Layout(a)) => eval_layout(a),
        Command::Eval(EvalCmd::Study(StudyCmd::Export(a))) => study_export(a),
        Command::Eval(EvalCmd::Study(StudyCmd::Aggregate(a))) => study_aggregate(a),
        Command::Serve(a) => serve(a),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write_file(p, text.as_bytes()),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn load_dataset(dir: &Path) -> Result<DatasetSplit> {
    load_split(dir).with_context(|| format!("loading dataset {}", dir.display()))
}

fn load_model(path: &Path) -> Result<Trainer> {
    Trainer::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn dataset_gen(a: GenArgs) -> Result<()> {
    let mut cfg: ShapesWorldConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => ShapesWorldConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.scenes {
        cfg.scenes = n;
    }
    if let Some(s) = a.image_size {
        cfg.image_size = s;
    }
    cfg.validate()?;
    let split = generate_shapes_world(&cfg)?;
    save_split(&split, &a.out)?;
    log::info!("wrote {} scenes to {}", split.len(), a.out.display());
    Ok(())
}

fn dataset_ingest(a: IngestArgs) -> Result<()> {
    let params: SyntheticGraphParams = match &a.config {
        Some(p) => read_json(p)?,
        None => SyntheticGraphParams::default(),
    };
    if let Some(dir) = &a.images {
        if !dir.is_dir() {
            bail!("image directory {} does not exist", dir.display());
        }
    }
    let text = fs::read_to_string(&a.annotations).with_context(|| format!("reading {}", a.annotations.display()))?;
    let (split, report) = ingest_coco(&text, &params, a.images.as_deref(), a.seed)?;
    save_split(&split, &a.out)?;
    log::info!("kept {} of {} images ({} too few objects, {} too many)", report.kept, report.images, report.too_few, report.too_many);
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut trainer = match &a.resume {
        Some(ck) => {
            if a.config.is_some() {
                bail!("--config cannot change a resumed run");
            }
            load_model(ck)?
        }
        None => {
            let cfg: TrainConfig = match &a.config {
                Some(p) => read_json(p)?,
                None => TrainConfig::default(),
            };
            let dataset = a.dataset.clone().or(cfg.dataset.clone()).context("no dataset: pass --dataset or set it in the config")?;
            let mut cfg = TrainConfig { dataset: Some(dataset.clone()), ..cfg };
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            if let Some(s) = a.steps {
                cfg.steps = s;
            }
            cfg.validate()?;
            let split = load_dataset(&dataset)?;
            Trainer::new(cfg, split.vocab.clone())?
        }
    };
    if a.resume.is_some() {
        if let Some(s) = a.steps {
            trainer.config.steps = s;
        }
        if a.seed.is_some_and(|s| s != trainer.config.seed) {
            bail!("--seed cannot change a resumed run");
        }
        if let Some(d) = &a.dataset {
            trainer.config.dataset = Some(d.clone());
        }
    }
    let dataset = trainer.config.dataset.clone().context("checkpoint records no dataset: pass --dataset")?;
    let split = load_dataset(&dataset)?;
    let summary = run_training(&mut trainer, &split, &a.out)?;
    let report = json!({
        "steps": summary.steps,
        "checkpoint": summary.checkpoint,
        "log": summary.log,
        "losses": summary.last.components,
        "relation_score": summary.relation_score,
        "iou": summary.iou,
    });
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn generate(a: GenerateArgs) -> Result<()> {
    let text = fs::read_to_string(&a.graph).with_context(|| format!("reading {}", a.graph.display()))?;
    let model = load_model(&a.ckpt)?;
    let graph = parse_scene_graph(&text, &model.vocab).with_context(|| format!("parsing {}", a.graph.display()))?;
    let (images, layout) = generate_images(&model.params.generator, model.model_config(), &[&graph], a.boxes == Boxes::Gt, a.seed)?;
    let img = RgbImage::from_chw(&images.index0(0));
    write_file(&a.out, &img.to_ppm_bytes())?;
    let boxes: Vec<[f64; 4]> = layout[0].iter().map(BoundingBox::to_array).collect();
    log::info!("wrote {}×{} image to {}", img.width, img.height, a.out.display());
    println!("{}", json!({ "out": a.out, "boxes": boxes }));
    Ok(())
}

fn eval_layout(a: LayoutArgs) -> Result<()> {
    if a.boxes == Boxes::Pred && a.ckpt.is_none() {
        bail!("--boxes pred needs --ckpt");
    }
    let split = load_dataset(&a.dataset)?;
    let graphs: Vec<SceneGraph> = split.examples.iter().map(|e| e.graph.with_image_node()).collect();
    let refs: Vec<&SceneGraph> = graphs.iter().collect();
    let boxes: Vec<Vec<BoundingBox>> = match a.boxes {
        Boxes::Gt => graphs
            .iter()
            .enumerate()
            .map(|(i, g)| g.nodes.iter().map(|n| n.gt_box.with_context(|| format!("scene {i} has an object without a box"))).collect())
            .collect::<Result<_>>()?,
        Boxes::Pred => {
            let model = load_model(a.ckpt.as_deref().unwrap())?;
            if model.vocab != split.vocab {
                bail!("checkpoint vocabulary differs from the dataset's");
            }
            let mut out = Vec::with_capacity(refs.len());
            for chunk in refs.chunks(64) {
                out.extend(infer_boxes(&model.params.generator, model.model_config(), chunk)?);
            }
            out
        }
    };
    let (score, satisfied, total) = match relation_tally(&refs, &boxes, &split.vocab) {
        Ok(t) => (t.score(), Some(t.satisfied), Some(t.total)),
        Err(MetricsError::NonSpatial { .. }) => (None, None, None),
        Err(e) => return Err(e.into()),
    };
    let baseline = match score {
        Some(_) => Some(random_baseline(&refs, &split.vocab, a.baseline_samples, &mut step_rng(a.seed, 0))?),
        None => None,
    };
    let (mut p, mut g) = (Vec::new(), Vec::new());
    for (graph, bx) in graphs.iter().zip(&boxes) {
        for i in graph.real_objects() {
            if let Some(gt) = graph.nodes[i].gt_box {
                p.push(bx[i]);
                g.push(gt);
            }
        }
    }
    let iou = if p.is_empty() { None } else { Some(avg_iou(&p, &g)?) };
    let metrics = json!({
        "dataset": a.dataset,
        "boxes": if a.boxes == Boxes::Gt { "gt" } else { "pred" },
        "graphs": graphs.len(),
        "spatial_triples": total,
        "satisfied": satisfied,
        "relation_score": score,
        "random_baseline": baseline,
        "avg_iou": iou,
    });
    emit(a.out.as_deref(), &serde_json::to_string_pretty(&metrics)?)
}

fn study_export(a: ExportArgs) -> Result<()> {
    let design: Design = a.design.into();
    if !(0.0..=1.0).contains(&a.control_rate) {
        bail!("--control-rate must be within [0, 1]");
    }
    if !valid_id(&a.study_id) {
        bail!("--study-id must be [A-Za-z0-9._-]");
    }
    if design != Design::Mors && a.models.len() != 2 {
        bail!("a {design} study compares exactly two models");
    }
    let mut names: Vec<&str> = a.models.iter().map(|(n, _)| n.as_str()).collect();
    names.sort();
    if names.windows(2).any(|w| w[0] == w[1]) {
        bail!("model names must be distinct");
    }
    let split = load_dataset(&a.dataset)?;
    let models: Vec<(String, Trainer)> = a.models.iter().map(|(n, p)| Ok((n.clone(), load_model(p)?))).collect::<Result<_>>()?;
    for (n, m) in &models {
        if m.vocab != split.vocab {
            bail!("model {n}: checkpoint vocabulary differs from the dataset's");
        }
    }
    let n = split.len().min(a.trials.max(2));
    let examples = &split.examples[..n];
    let mut items: Vec<ExportItem> = examples
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let gt = e.image.clone().with_context(|| format!("scene {i} has no image"))?;
            Ok(ExportItem { name: format!("scene{i:05}"), graph: e.graph.clone(), ground_truth: gt, generated: Default::default() })
        })
        .collect::<Result<_>>()?;
    for (name, m) in &models {
        for (c, chunk) in examples.chunks(32).enumerate() {
            let graphs: Vec<&SceneGraph> = chunk.iter().map(|e| &e.graph).collect();
            let (imgs, _) = generate_images(&m.params.generator, m.model_config(), &graphs, a.boxes == Boxes::Gt, a.seed)?;
            for k in 0..chunk.len() {
                items[c * 32 + k].generated.insert(name.clone(), RgbImage::from_chw(&imgs.index0(k)));
            }
        }
    }
    let opts = ExportOptions {
        study_id: a.study_id.clone(),
        design,
        trials: a.trials,
        control_rate: a.control_rate,
        seed: a.seed,
        target_ratings: a.target_ratings,
    };
    let study = export_study(&items, &split.vocab, &opts)?;
    let media = a.out.join("media");
    for (name, bytes) in &study.media {
        write_file(&media.join(name), bytes)?;
    }
    write_file(&a.out.join("manifest.json"), study.manifest.to_json().as_bytes())?;
    log::info!(
        "exported {} trials ({} controls) and {} images to {}",
        study.manifest.trials.len(),
        study.manifest.control_count(),
        study.media.len(),
        a.out.display()
    );
    Ok(())
}

fn study_aggregate(a: AggregateArgs) -> Result<()> {
    if !(0.0..=1.0).contains(&a.min_control_acc) {
        bail!("--min-control-acc must be within [0, 1]");
    }
    let manifest = match &a.manifest {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Some(StudyManifest::from_json(&text).with_context(|| format!("parsing {}", p.display()))?)
        }
        None => None,
    };
    let categories = match &a.categories {
        Some(p) => CategoryMap::from_json(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
        None => CategoryMap::default(),
    };
    let f = fs::File::open(&a.ratings).with_context(|| format!("opening {}", a.ratings.display()))?;
    let records = read_ratings(BufReader::new(f)).with_context(|| format!("reading {}", a.ratings.display()))?;
    let models = manifest.as_ref().and_then(|m| m.model_pair());
    let result = aggregate_study(&records, a.min_control_acc, &categories, models)?;
    emit(a.out.as_deref(), &result.to_json())
}

fn serve(a: ServeArgs) -> Result<()> {
    if !(0.0..=1.0).contains(&a.min_control_acc) {
        bail!("--min-control-acc must be within [0, 1]");
    }
    let config = ServiceConfig { data_dir: a.data_dir.clone(), media_dir: a.media.clone(), min_control_accuracy: a.min_control_acc };
    let svc = Service::open(config)?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(a.addr).await.with_context(|| format!("binding {}", a.addr))?;
        log::info!("listening on http://{}", listener.local_addr()?);
        println!("listening on http://{}", listener.local_addr()?);
        sgctx_rating_service::serve(listener, svc, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
        Ok(())
    })
}
