//! Training corpora: synthetic scene graphs from annotated boxes, VG-style
//! frequency preprocessing, COCO-style ingestion and the shapes-world
//! generator, plus the on-disk dataset directory format.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::image::RgbImage;
use crate::scene::{
    parse_scene_graph, scene_graph_value, spatial_predicate, BinaryMask, BoundingBox, GraphError, ObjectNode,
    RelationTriple, SceneGraph, SpatialPredicate, Vocab,
};

/// Per-object mask resolution stored in datasets and predicted by the model.
pub const MASK_SIZE: usize = 16;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: String, source: serde_json::Error },
    #[error("{path}: {source}")]
    Graph { path: String, source: GraphError },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("no examples survive filtering ({0})")]
    EmptyAfterFiltering(String),
    #[error("degenerate shape: box spans {width}×{height} pixels, need at least 2×2")]
    DegenerateShape { width: usize, height: usize },
    #[error("vocabulary lacks spatial predicate {0:?}")]
    MissingPredicate(SpatialPredicate),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.display().to_string(), source }
}

/// One annotated object: category, box and optional mask (box-relative).
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedObject {
    pub category: usize,
    pub bbox: BoundingBox,
    pub mask: Option<BinaryMask>,
}

/// A graph with its (optional) source image.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub image: Option<RgbImage>,
    pub graph: SceneGraph,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub name: String,
    pub vocab: Vocab,
    pub examples: Vec<Example>,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Whether every real object carries a ground-truth mask.
    pub fn has_masks(&self) -> bool {
        self.examples
            .iter()
            .all(|e| e.graph.real_objects().all(|i| e.graph.nodes[i].gt_mask.is_some()))
    }

    /// Splits off the last `n` examples as a held-out split.
    pub fn split_tail(mut self, n: usize, name: &str) -> (DatasetSplit, DatasetSplit) {
        let tail = self.examples.split_off(self.examples.len().saturating_sub(n));
        let held = DatasetSplit { name: name.to_string(), vocab: self.vocab.clone(), examples: tail };
        (self, held)
    }
}

/// Knobs for [`build_synthetic_graph`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticGraphParams {
    /// Objects covering less than this fraction of the image are dropped.
    pub min_area: f64,
    /// Inclusive range of surviving objects for a scene to be kept.
    pub count_range: (usize, usize),
    /// Partners sampled per object.
    pub triples_per_object: usize,
}

impl Default for SyntheticGraphParams {
    fn default() -> Self {
        Self { min_area: 0.02, count_range: (3, 8), triples_per_object: 2 }
    }
}

/// Why a scene did not yield a graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rejection {
    TooFewObjects(usize),
    TooManyObjects(usize),
}

/// Builds a spatial scene graph from annotated objects.
///
/// Small objects are dropped, the scene is rejected if the survivor count
/// falls outside the range, then each survivor is related to up to
/// `triples_per_object` partners sampled without replacement, every edge
/// labelled by [`spatial_predicate`]. The `__image__` node and its edges are
/// appended last.
pub fn build_synthetic_graph<R: Rng + ?Sized>(
    objects: &[AnnotatedObject],
    vocab: &Vocab,
    params: &SyntheticGraphParams,
    rng: &mut R,
) -> Result<Result<SceneGraph, Rejection>, DatasetError> {
    let kept: Vec<&AnnotatedObject> = objects.iter().filter(|o| o.bbox.area() >= params.min_area).collect();
    let (lo, hi) = params.count_range;
    if kept.len() < lo {
        return Ok(Err(Rejection::TooFewObjects(kept.len())));
    }
    if kept.len() > hi {
        return Ok(Err(Rejection::TooManyObjects(kept.len())));
    }
    let nodes: Vec<ObjectNode> = kept
        .iter()
        .map(|o| ObjectNode {
            category: o.category,
            gt_box: Some(o.bbox),
            gt_mask: o.mask.as_ref().map(|m| m.resample(MASK_SIZE, MASK_SIZE)),
        })
        .collect();
    let n = nodes.len();
    let mut triples = Vec::new();
    for s in 0..n {
        let partners = params.triples_per_object.min(n - 1);
        for pick in sample(rng, n - 1, partners).into_iter() {
            let o = if pick >= s { pick + 1 } else { pick };
            let p = spatial_predicate(&kept[s].bbox, &kept[o].bbox);
            let pid = vocab.spatial_id(p).ok_or(DatasetError::MissingPredicate(p))?;
            triples.push(RelationTriple::new(s, pid, o));
        }
    }
    let graph = SceneGraph::new(nodes, triples)
        .map_err(|source| DatasetError::Graph { path: "<synthetic>".into(), source })?
        .with_image_node();
    Ok(Ok(graph))
}

/// One raw image for VG-style preprocessing: object names with optional
/// boxes, and triples over object indices.
#[derive(Debug, Clone, PartialEq)]
pub struct RawImage {
    pub image: Option<RgbImage>,
    pub objects: Vec<(String, Option<BoundingBox>)>,
    pub triples: Vec<(usize, String, usize)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VgParams {
    pub object_min_count: usize,
    pub predicate_min_count: usize,
    pub object_count_range: (usize, usize),
    /// Objects with a box smaller than this image fraction are dropped.
    pub min_area: f64,
}

impl Default for VgParams {
    fn default() -> Self {
        Self { object_min_count: 2000, predicate_min_count: 500, object_count_range: (3, 30), min_area: 0.02 }
    }
}

/// Restricts the vocabulary to frequent categories and keeps images with an
/// object count in range and at least one surviving relationship.
pub fn preprocess_vg_style(raw: &[RawImage], params: &VgParams, name: &str) -> Result<DatasetSplit, DatasetError> {
    let mut object_counts: BTreeMap<&str, usize> = BTreeMap::new();
    let mut predicate_counts: BTreeMap<&str, usize> = BTreeMap::new();
    for img in raw {
        for (o, _) in &img.objects {
            *object_counts.entry(o.as_str()).or_default() += 1;
        }
        for (_, p, _) in &img.triples {
            *predicate_counts.entry(p.as_str()).or_default() += 1;
        }
    }
    let objects: Vec<&str> =
        object_counts.iter().filter(|(_, &c)| c >= params.object_min_count).map(|(n, _)| *n).collect();
    let predicates: Vec<&str> =
        predicate_counts.iter().filter(|(_, &c)| c >= params.predicate_min_count).map(|(n, _)| *n).collect();
    let vocab = Vocab::new(objects, predicates).map_err(|source| DatasetError::Graph { path: name.into(), source })?;

    let (lo, hi) = params.object_count_range;
    let mut examples = Vec::new();
    for img in raw {
        let mut remap = vec![None; img.objects.len()];
        let mut nodes = Vec::new();
        for (i, (o, b)) in img.objects.iter().enumerate() {
            let Some(cat) = vocab.object_id(o) else { continue };
            if b.is_some_and(|b| b.area() < params.min_area) {
                continue;
            }
            remap[i] = Some(nodes.len());
            nodes.push(ObjectNode { category: cat, gt_box: *b, gt_mask: None });
        }
        let triples: Vec<RelationTriple> = img
            .triples
            .iter()
            .filter_map(|(s, p, o)| {
                let (s, o) = (remap.get(*s).copied().flatten()?, remap.get(*o).copied().flatten()?);
                (s != o).then_some(RelationTriple::new(s, vocab.predicate_id(p)?, o))
            })
            .collect();
        if nodes.len() < lo || nodes.len() > hi || triples.is_empty() {
            continue;
        }
        let graph = SceneGraph::new(nodes, triples).map_err(|source| DatasetError::Graph { path: name.into(), source })?;
        examples.push(Example { image: img.image.clone(), graph: graph.with_image_node() });
    }
    if examples.is_empty() {
        return Err(DatasetError::EmptyAfterFiltering(format!(
            "{} objects and {} predicates in vocabulary",
            vocab.num_objects() - 1,
            vocab.num_predicates() - 1
        )));
    }
    Ok(DatasetSplit { name: name.to_string(), vocab, examples })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeColor {
    pub name: String,
    pub rgb: [u8; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShapesWorldConfig {
    pub seed: u64,
    pub scenes: usize,
    pub image_size: usize,
    pub objects: (usize, usize),
    pub shapes: Vec<ShapeKind>,
    pub colors: Vec<ShapeColor>,
    /// Shape side length range as a fraction of the image.
    pub side_range: (f64, f64),
    pub graph: SyntheticGraphParams,
}

impl Default for ShapesWorldConfig {
    fn default() -> Self {
        let color = |name: &str, rgb| ShapeColor { name: name.to_string(), rgb };
        Self {
            seed: 0,
            scenes: 100,
            image_size: 32,
            objects: (3, 8),
            shapes: ShapeKind::ALL.to_vec(),
            colors: vec![color("red", [220, 40, 40]), color("green", [40, 180, 60]), color("blue", [50, 80, 230])],
            side_range: (0.2, 0.45),
            graph: SyntheticGraphParams::default(),
        }
    }
}

/// Uniform mid-gray background.
pub const BACKGROUND: [u8; 3] = [128, 128, 128];

impl ShapesWorldConfig {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |m: String| Err(DatasetError::Config(m));
        if self.image_size < 8 {
            return bad(format!("image size {} < 8", self.image_size));
        }
        let (lo, hi) = self.objects;
        if lo < 1 || hi > 16 || lo > hi {
            return bad(format!("object range {lo}..{hi} not within 1..16"));
        }
        if self.shapes.is_empty() || self.colors.is_empty() {
            return bad("empty shape or color palette".into());
        }
        let (smin, smax) = self.side_range;
        if !(smin > 0.0 && smin <= smax && smax <= 1.0) {
            return bad(format!("side range {smin}..{smax}"));
        }
        if 2.0 * (self.image_size as f64 * smin).floor() < 4.0 {
            return bad("smallest shape would be under 2×2 pixels".into());
        }
        Ok(())
    }

    /// Category names, one per (color, shape), e.g. `"red circle"`.
    pub fn category_names(&self) -> Vec<String> {
        self.colors
            .iter()
            .flat_map(|c| self.shapes.iter().map(move |s| format!("{} {}", c.name, s.name())))
            .collect()
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::spatial(self.category_names()).expect("palette names are distinct")
    }
}

/// Rasterized shape on a full `size × size` canvas with its tight box.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterShape {
    pub mask: BinaryMask,
    /// Pixel-aligned bounding box of the set pixels.
    pub bbox: BoundingBox,
    pub color: [f64; 3],
}

/// Binary rasterization of a shape inscribed in `bbox` on a `size × size`
/// canvas. A pixel is set when its centre lies inside the box and the shape.
pub fn rasterize_shape(kind: ShapeKind, color: [u8; 3], bbox: &BoundingBox, size: usize) -> Result<RasterShape, DatasetError> {
    let s = size as f64;
    let px = |v: f64| (v * s - 0.5).ceil().max(0.0) as usize;
    let (xa, xb) = (px(bbox.x0), px(bbox.x1).min(size));
    let (ya, yb) = (px(bbox.y0), px(bbox.y1).min(size));
    let (w, h) = (xb.saturating_sub(xa), yb.saturating_sub(ya));
    if w < 2 || h < 2 {
        return Err(DatasetError::DegenerateShape { width: w, height: h });
    }
    let (cx, cy) = bbox.center();
    let (rx, ry) = (bbox.width() / 2.0, bbox.height() / 2.0);
    let mut mask = BinaryMask::new(size, size);
    let (mut minx, mut miny, mut maxx, mut maxy) = (usize::MAX, usize::MAX, 0, 0);
    for y in ya..yb {
        let py = (y as f64 + 0.5) / s;
        for x in xa..xb {
            let pxn = (x as f64 + 0.5) / s;
            let inside = match kind {
                ShapeKind::Square => true,
                ShapeKind::Circle => ((pxn - cx) / rx).powi(2) + ((py - cy) / ry).powi(2) <= 1.0,
                ShapeKind::Triangle => {
                    // Apex at top centre, base along the bottom edge; every
                    // row keeps its centre pixel so thin triangles stay solid.
                    let t = (py - bbox.y0) / bbox.height();
                    (pxn - cx).abs() <= (t * rx).max(0.5 / s)
                }
            };
            if inside {
                mask.set(x, y, true);
                minx = minx.min(x);
                miny = miny.min(y);
                maxx = maxx.max(x);
                maxy = maxy.max(y);
            }
        }
    }
    if mask.count() == 0 {
        return Err(DatasetError::DegenerateShape { width: w, height: h });
    }
    let tight = BoundingBox::new(minx as f64 / s, miny as f64 / s, (maxx + 1) as f64 / s, (maxy + 1) as f64 / s)
        .expect("non-empty pixel box is valid");
    Ok(RasterShape { mask, bbox: tight, color: color.map(|c| c as f64 / 255.0) })
}

/// Crops a full-canvas mask to a pixel-aligned box.
pub fn crop_mask(mask: &BinaryMask, bbox: &BoundingBox) -> BinaryMask {
    let (w, h) = (mask.width as f64, mask.height as f64);
    let (x0, y0) = ((bbox.x0 * w).round() as usize, (bbox.y0 * h).round() as usize);
    let (x1, y1) = ((bbox.x1 * w).round() as usize, (bbox.y1 * h).round() as usize);
    let mut out = BinaryMask::new(x1 - x0, y1 - y0);
    for y in y0..y1 {
        for x in x0..x1 {
            out.set(x - x0, y - y0, mask.get(x, y));
        }
    }
    out
}

/// Deterministic per-scene generator: scene `i` of seed `s` always draws
/// from ChaCha stream `i` of key `s`.
pub fn scene_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// One shapes-world scene with its full-canvas rasters (painted in order).
#[derive(Debug, Clone)]
pub struct ShapesScene {
    pub image: RgbImage,
    pub rasters: Vec<RasterShape>,
    pub graph: SceneGraph,
}

/// Generates scene `index` of the configured world.
pub fn generate_scene(cfg: &ShapesWorldConfig, vocab: &Vocab, index: u64) -> Result<ShapesScene, DatasetError> {
    let size = cfg.image_size;
    let mut rng = scene_rng(cfg.seed, index);
    loop {
        let count = rng.random_range(cfg.objects.0..=cfg.objects.1);
        let mut rasters = Vec::with_capacity(count);
        let mut annotated = Vec::with_capacity(count);
        for _ in 0..count {
            let kind = cfg.shapes[rng.random_range(0..cfg.shapes.len())];
            let ci = rng.random_range(0..cfg.colors.len());
            let w = rng.random_range(cfg.side_range.0..=cfg.side_range.1);
            let h = rng.random_range(cfg.side_range.0..=cfg.side_range.1);
            let x0 = rng.random_range(0.0..=1.0 - w);
            let y0 = rng.random_range(0.0..=1.0 - h);
            let nominal = BoundingBox::new(x0, y0, (x0 + w).min(1.0), (y0 + h).min(1.0)).expect("inside the unit square");
            let raster = rasterize_shape(kind, cfg.colors[ci].rgb, &nominal, size)?;
            let category = ci * cfg.shapes.len() + cfg.shapes.iter().position(|s| *s == kind).unwrap() + 1;
            let mask = crop_mask(&raster.mask, &raster.bbox);
            annotated.push(AnnotatedObject { category, bbox: raster.bbox, mask: Some(mask) });
            rasters.push(raster);
        }
        let graph = match build_synthetic_graph(&annotated, vocab, &cfg.graph, &mut rng)? {
            Ok(g) => g,
            Err(_) => continue,
        };
        let mut image = RgbImage::filled(size, size, BACKGROUND.map(|c| c as f64 / 255.0));
        for r in &rasters {
            for y in 0..size {
                for x in 0..size {
                    if r.mask.get(x, y) {
                        image.set(x, y, r.color);
                    }
                }
            }
        }
        return Ok(ShapesScene { image, rasters, graph });
    }
}

/// Generates the whole split; content is a pure function of `cfg`.
pub fn generate_shapes_world(cfg: &ShapesWorldConfig) -> Result<DatasetSplit, DatasetError> {
    cfg.validate()?;
    let vocab = cfg.vocab();
    let examples = (0..cfg.scenes as u64)
        .map(|i| generate_scene(cfg, &vocab, i).map(|s| Example { image: Some(s.image), graph: s.graph }))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(DatasetSplit { name: "shapes-world".into(), vocab, examples })
}

#[derive(Debug, Deserialize)]
struct CocoFile {
    images: Vec<CocoImage>,
}

#[derive(Debug, Deserialize)]
struct CocoImage {
    id: Value,
    width: f64,
    height: f64,
    objects: Vec<CocoObject>,
}

#[derive(Debug, Deserialize)]
struct CocoObject {
    category: String,
    bbox: [f64; 4],
    #[serde(default)]
    mask: Option<Value>,
}

/// Counts of scenes dropped during ingestion.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct IngestReport {
    pub images: usize,
    pub kept: usize,
    pub too_few: usize,
    pub too_many: usize,
}

/// Ingests the simplified COCO-style annotation JSON
/// `{"images":[{"id","width","height","objects":[{"category","bbox":[x,y,w,h],"mask"?}]}]}`.
/// Pixel boxes are normalized; masks use the `{width,height,data}` bitmap
/// encoding of the scene-graph format and are box-relative. Images come from
/// `images_dir/<id>.ppm` when a directory is given.
pub fn ingest_coco(
    text: &str,
    params: &SyntheticGraphParams,
    images_dir: Option<&Path>,
    seed: u64,
) -> Result<(DatasetSplit, IngestReport), DatasetError> {
    let file: CocoFile =
        serde_json::from_str(text).map_err(|source| DatasetError::Json { path: "<annotations>".into(), source })?;
    let mut names: Vec<&str> = file.images.iter().flat_map(|i| i.objects.iter().map(|o| o.category.as_str())).collect();
    names.sort_unstable();
    names.dedup();
    let vocab = Vocab::spatial(names).map_err(|source| DatasetError::Graph { path: "<annotations>".into(), source })?;
    let mut report = IngestReport { images: file.images.len(), ..Default::default() };
    let mut examples = Vec::new();
    for (idx, img) in file.images.iter().enumerate() {
        let mut objects = Vec::new();
        for (k, o) in img.objects.iter().enumerate() {
            let loc = || format!("images[{idx}].objects[{k}]");
            let bbox = BoundingBox::from_pixel_xywh(o.bbox, img.width, img.height).ok_or_else(|| DatasetError::Graph {
                path: "<annotations>".into(),
                source: GraphError::InvalidBox { location: loc(), coords: o.bbox },
            })?;
            let mask = match &o.mask {
                Some(v) => Some(BinaryMask::from_json(v).ok_or_else(|| DatasetError::Graph {
                    path: "<annotations>".into(),
                    source: GraphError::Invalid { location: format!("{}.mask", loc()), message: "bad bitmap".into() },
                })?),
                None => None,
            };
            objects.push(AnnotatedObject { category: vocab.object_id(&o.category).unwrap(), bbox, mask });
        }
        let mut rng = scene_rng(seed, idx as u64);
        match build_synthetic_graph(&objects, &vocab, params, &mut rng)? {
            Ok(graph) => {
                let image = match images_dir {
                    Some(dir) => {
                        let id = match &img.id {
                            Value::String(s) => s.clone(),
                            other => other.to_string(),
                        };
                        let path = dir.join(format!("{id}.ppm"));
                        let f = fs::File::open(&path).map_err(io_err(&path))?;
                        Some(RgbImage::read_ppm(BufReader::new(f)).map_err(io_err(&path))?)
                    }
                    None => None,
                };
                report.kept += 1;
                examples.push(Example { image, graph });
            }
            Err(Rejection::TooFewObjects(_)) => report.too_few += 1,
            Err(Rejection::TooManyObjects(_)) => report.too_many += 1,
        }
    }
    if examples.is_empty() {
        return Err(DatasetError::EmptyAfterFiltering(format!("all {} images rejected", report.images)));
    }
    Ok((DatasetSplit { name: "coco".into(), vocab, examples }, report))
}

/// Writes `split.json` plus one `images/NNNNN.ppm` per example with an image.
pub fn save_split(split: &DatasetSplit, dir: &Path) -> Result<(), DatasetError> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(io_err(&images))?;
    let mut records = Vec::with_capacity(split.len());
    for (i, ex) in split.examples.iter().enumerate() {
        let image = match &ex.image {
            Some(img) => {
                let rel = format!("images/{i:05}.ppm");
                let path = dir.join(&rel);
                fs::write(&path, img.to_ppm_bytes()).map_err(io_err(&path))?;
                Value::String(rel)
            }
            None => Value::Null,
        };
        records.push(json!({ "graph": scene_graph_value(&ex.graph, &split.vocab), "image": image }));
    }
    let vocab: Value = serde_json::from_str(&split.vocab.to_json()).expect("vocab JSON");
    let doc = json!({ "name": split.name, "vocab": vocab, "examples": records });
    let path = dir.join("split.json");
    fs::write(&path, serde_json::to_string_pretty(&doc).expect("serializes")).map_err(io_err(&path))
}

#[derive(Deserialize)]
struct SplitFile {
    name: String,
    vocab: Value,
    examples: Vec<SplitRecord>,
}

#[derive(Deserialize)]
struct SplitRecord {
    graph: Value,
    image: Option<String>,
}

pub fn load_split(dir: &Path) -> Result<DatasetSplit, DatasetError> {
    let path = dir.join("split.json");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let json_err = |source| DatasetError::Json { path: path.display().to_string(), source };
    let file: SplitFile = serde_json::from_str(&text).map_err(json_err)?;
    let graph_err = |source| DatasetError::Graph { path: path.display().to_string(), source };
    let vocab = Vocab::from_json(&file.vocab.to_string()).map_err(graph_err)?;
    let mut examples = Vec::with_capacity(file.examples.len());
    for (i, rec) in file.examples.into_iter().enumerate() {
        let graph = parse_scene_graph(&rec.graph.to_string(), &vocab).map_err(|source| DatasetError::Graph {
            path: format!("{} examples[{i}]", path.display()),
            source,
        })?;
        let image = match rec.image {
            Some(rel) => {
                let p: PathBuf = dir.join(rel);
                let f = fs::File::open(&p).map_err(io_err(&p))?;
                Some(RgbImage::read_ppm(BufReader::new(f)).map_err(io_err(&p))?)
            }
            None => None,
        };
        examples.push(Example { image, graph });
    }
    Ok(DatasetSplit { name: file.name, vocab, examples })
}

/// Category frequency table, used by tests and reports.
pub fn category_histogram(split: &DatasetSplit) -> HashMap<usize, usize> {
    let mut h = HashMap::new();
    for ex in &split.examples {
        for i in ex.graph.real_objects() {
            *h.entry(ex.graph.nodes[i].category).or_default() += 1;
        }
    }
    h
}
