//! Network stack: graph convolution, context pooling, box and mask heads,
//! layout composition, the cascade-refinement generator and the image and
//! object discriminators.
//!
//! All forward functions record onto a caller-owned [`Tape`] and read their
//! weights from a [`Bound`] parameter group, so the same code serves
//! training (variables) and inference (constants).

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, ParamStore, ShapeError, Tape, Tensor, Var, BATCH_NORM_EPS};
use crate::dataset::MASK_SIZE;
use crate::scene::{BoundingBox, SceneGraph};

/// Context width fed to the generator.
pub const GEN_CONTEXT_DIM: usize = 8;
/// Context width fed to the image discriminator.
pub const DISC_CONTEXT_DIM: usize = 4;
/// Box-head outputs are squeezed into `[BOX_EPS, 1 − BOX_EPS]`.
pub const BOX_EPS: f64 = 1e-3;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("node {node} of graph {graph} has no incident edges")]
    IsolatedNode { graph: usize, node: usize },
    #[error("graph {0} has no real objects")]
    NoObjects(usize),
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("parameter {name}: expected shape {expected:?}, found {found:?}")]
    ParamShape { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("missing parameter {0}")]
    MissingParam(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub num_objects: usize,
    pub num_predicates: usize,
    pub embed_dim: usize,
    pub gcn_layers: usize,
    pub box_hidden: usize,
    pub mask_channels: usize,
    pub image_size: usize,
    /// Output channels of each refinement block, coarsest scale first. The
    /// coarsest scale is `image_size / 2^(len − 1)`.
    pub gen_channels: Vec<usize>,
    /// Per-pixel noise channels concatenated at the coarsest scale.
    pub noise_channels: usize,
    pub dimg_channels: Vec<usize>,
    /// Also feed the layout to the image discriminator.
    pub dimg_layout: bool,
    pub dobj_channels: Vec<usize>,
    pub crop_size: usize,
    pub leaky_slope: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_objects: 0,
            num_predicates: 0,
            embed_dim: 32,
            gcn_layers: 3,
            box_hidden: 64,
            mask_channels: 16,
            image_size: 32,
            gen_channels: vec![32, 32, 16, 16],
            noise_channels: 0,
            dimg_channels: vec![16, 32, 32],
            dimg_layout: false,
            dobj_channels: vec![16, 32],
            crop_size: 16,
            leaky_slope: 0.2,
        }
    }
}

impl ModelConfig {
    pub fn for_vocab(num_objects: usize, num_predicates: usize) -> Self {
        Self { num_objects, num_predicates, ..Self::default() }
    }

    /// Default channel schedule for a given output size (4×4 coarsest scale).
    pub fn with_image_size(mut self, size: usize) -> Self {
        let scales = (size / 4).max(1).trailing_zeros() as usize + 1;
        self.image_size = size;
        self.gen_channels = [32, 32, 16, 16, 16].iter().take(scales).copied().collect();
        self
    }

    pub fn coarsest_size(&self) -> usize {
        self.image_size >> (self.gen_channels.len() - 1)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.num_objects < 2 || self.num_predicates < 1 {
            return bad(format!("vocabulary sizes {}/{}", self.num_objects, self.num_predicates));
        }
        if self.embed_dim == 0 || self.gcn_layers == 0 || self.box_hidden == 0 || self.mask_channels == 0 {
            return bad("zero-width layer".into());
        }
        if self.gen_channels.is_empty() || self.gen_channels.contains(&0) {
            return bad("generator needs at least one non-empty scale".into());
        }
        let steps = self.gen_channels.len() - 1;
        if self.image_size == 0 || self.image_size % (1 << steps) != 0 {
            return bad(format!("image size {} not divisible by 2^{steps}", self.image_size));
        }
        let d = self.dimg_channels.len();
        if d < 2 || self.dimg_channels.contains(&0) || self.image_size % (1 << d) != 0 {
            return bad(format!("image discriminator needs ≥2 blocks dividing size {}", self.image_size));
        }
        let o = self.dobj_channels.len();
        if o == 0 || self.dobj_channels.contains(&0) || self.crop_size % (1 << o) != 0 {
            return bad(format!("object discriminator blocks do not divide crop size {}", self.crop_size));
        }
        Ok(())
    }

    /// Spatial size of the image discriminator's patch map.
    pub fn patch_size(&self) -> usize {
        self.image_size >> self.dimg_channels.len()
    }
}

/// Trainable weights, one store per optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// Graph convolution, heads, generator context FC and image generator.
    pub generator: ParamStore,
    /// Image discriminator including its context FC.
    pub d_img: ParamStore,
    pub d_obj: ParamStore,
}

fn he<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

impl ModelParams {
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut g = ParamStore::new();
        let add_dense = |store: &mut ParamStore, name: &str, i: usize, o: usize, rng: &mut R| {
            store.insert(format!("{name}/w"), he(&[i, o], i, rng));
            store.insert(format!("{name}/b"), Tensor::zeros(&[o]));
        };
        let conv = |store: &mut ParamStore, name: &str, o: usize, i: usize, k: usize, bias: bool, rng: &mut R| {
            store.insert(format!("{name}/w"), he(&[o, i, k, k], i * k * k, rng));
            if bias {
                store.insert(format!("{name}/b"), Tensor::zeros(&[o]));
            }
        };
        let d = cfg.embed_dim;
        g.insert("gcn/obj_embed", Tensor::randn(&[cfg.num_objects, d], 1.0, rng));
        g.insert("gcn/pred_embed", Tensor::randn(&[cfg.num_predicates, d], 1.0, rng));
        for l in 0..cfg.gcn_layers {
            add_dense(&mut g, &format!("gcn/{l}/edge"), 3 * d, 3 * d, rng);
            add_dense(&mut g, &format!("gcn/{l}/node"), d, d, rng);
        }
        add_dense(&mut g, "box/hidden", d, cfg.box_hidden, rng);
        add_dense(&mut g, "box/out", cfg.box_hidden, 4, rng);
        let c = cfg.mask_channels;
        add_dense(&mut g, "mask/proj", d, c * 16, rng);
        conv(&mut g, "mask/conv0", c, c, 3, true, rng);
        conv(&mut g, "mask/conv1", c, c, 3, true, rng);
        conv(&mut g, "mask/out", 1, c, 1, true, rng);
        add_dense(&mut g, "ctx", d, GEN_CONTEXT_DIM, rng);
        let mut prev = 0;
        for (k, &ch) in cfg.gen_channels.iter().enumerate() {
            let noise = if k == 0 { cfg.noise_channels } else { 0 };
            conv(&mut g, &format!("gen/{k}/conv"), ch, d + GEN_CONTEXT_DIM + noise + prev, 3, false, rng);
            g.insert(format!("gen/{k}/gamma"), Tensor::ones(&[ch]));
            g.insert(format!("gen/{k}/beta"), Tensor::zeros(&[ch]));
            prev = ch;
        }
        conv(&mut g, "gen/out", 3, prev, 1, true, rng);

        let mut di = ParamStore::new();
        add_dense(&mut di, "ctx", d, DISC_CONTEXT_DIM, rng);
        let mut prev = 3;
        for (k, &ch) in cfg.dimg_channels.iter().enumerate() {
            if k == 2 {
                prev += DISC_CONTEXT_DIM + if cfg.dimg_layout { d } else { 0 };
            }
            conv(&mut di, &format!("block/{k}"), ch, prev, 3, true, rng);
            prev = ch;
        }
        if cfg.dimg_channels.len() == 2 {
            prev += DISC_CONTEXT_DIM + if cfg.dimg_layout { d } else { 0 };
        }
        conv(&mut di, "out", 1, prev, 1, true, rng);

        let mut dobj = ParamStore::new();
        let mut prev = 3;
        for (k, &ch) in cfg.dobj_channels.iter().enumerate() {
            conv(&mut dobj, &format!("block/{k}"), ch, prev, 3, true, rng);
            prev = ch;
        }
        let side = cfg.crop_size >> cfg.dobj_channels.len();
        let flat = prev * side * side;
        add_dense(&mut dobj, "score", flat, 1, rng);
        add_dense(&mut dobj, "class", flat, cfg.num_objects, rng);
        Ok(Self { generator: g, d_img: di, d_obj: dobj })
    }

    /// Checks loaded weights against a freshly initialized template, which
    /// also pins both context widths.
    pub fn check(&self, cfg: &ModelConfig) -> Result<(), ModelError> {
        let template = Self::init(cfg, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0))?;
        for (have, want) in [(&self.generator, &template.generator), (&self.d_img, &template.d_img), (&self.d_obj, &template.d_obj)]
        {
            for (name, t) in want.iter() {
                let found = have.get(name).ok_or_else(|| ModelError::MissingParam(name.clone()))?;
                if found.shape() != t.shape() {
                    return Err(ModelError::ParamShape {
                        name: name.clone(),
                        expected: t.shape().to_vec(),
                        found: found.shape().to_vec(),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Several scene graphs packed into one disjoint graph.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphBatch {
    pub num_graphs: usize,
    /// Category of every node, graph by graph.
    pub categories: Vec<usize>,
    /// Graph index of every node.
    pub owner: Vec<usize>,
    /// `(subject, predicate, object)` with batch-global node indices.
    pub triples: Vec<(usize, usize, usize)>,
    /// Global indices of real (non-image) nodes, graph by graph.
    pub real: Vec<usize>,
    /// Graph index of each entry of `real`.
    pub real_owner: Vec<usize>,
    /// Offset of each graph's first node.
    pub offsets: Vec<usize>,
}

impl GraphBatch {
    pub fn new(graphs: &[&SceneGraph]) -> Result<Self, ModelError> {
        if graphs.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let mut b = GraphBatch {
            num_graphs: graphs.len(),
            categories: Vec::new(),
            owner: Vec::new(),
            triples: Vec::new(),
            real: Vec::new(),
            real_owner: Vec::new(),
            offsets: Vec::new(),
        };
        for (gi, g) in graphs.iter().enumerate() {
            let base = b.categories.len();
            b.offsets.push(base);
            let mut touched = vec![false; g.nodes.len()];
            for t in &g.triples {
                touched[t.subject] = true;
                touched[t.object] = true;
                b.triples.push((base + t.subject, t.predicate, base + t.object));
            }
            if let Some(node) = touched.iter().position(|t| !t) {
                return Err(ModelError::IsolatedNode { graph: gi, node });
            }
            let before = b.real.len();
            for (i, n) in g.nodes.iter().enumerate() {
                b.categories.push(n.category);
                b.owner.push(gi);
                if n.category != 0 {
                    b.real.push(base + i);
                    b.real_owner.push(gi);
                }
            }
            if b.real.len() == before {
                return Err(ModelError::NoObjects(gi));
            }
        }
        Ok(b)
    }

    pub fn num_nodes(&self) -> usize {
        self.categories.len()
    }
}

/// Output of [`graph_conv`]: one row per node and one per triple.
#[derive(Debug, Clone, Copy)]
pub struct GraphEmbedding {
    pub objects: Var,
    pub predicates: Var,
}

fn dense(tape: &mut Tape, p: &Bound, name: &str, x: Var) -> Result<Var, ShapeError> {
    tape.linear(x, p.get(&format!("{name}/w")), p.get(&format!("{name}/b")))
}

fn conv(tape: &mut Tape, p: &Bound, name: &str, x: Var) -> Result<Var, ShapeError> {
    tape.conv2d(x, p.get(&format!("{name}/w")), p.try_get(&format!("{name}/b")))
}

/// Graph convolution over the whole batch. Each layer runs every triple's
/// `[subject, predicate, object]` through the edge MLP, averages the
/// resulting subject and object candidates per node and applies the node
/// MLP.
pub fn graph_conv(tape: &mut Tape, p: &Bound, cfg: &ModelConfig, batch: &GraphBatch) -> Result<GraphEmbedding, ModelError> {
    let d = cfg.embed_dim;
    let n = batch.num_nodes();
    let subj: Vec<usize> = batch.triples.iter().map(|t| t.0).collect();
    let preds: Vec<usize> = batch.triples.iter().map(|t| t.1).collect();
    let obj: Vec<usize> = batch.triples.iter().map(|t| t.2).collect();
    let mut counts = vec![0.0; n];
    for (&s, &o) in subj.iter().zip(&obj) {
        counts[s] += 1.0;
        counts[o] += 1.0;
    }
    let inv: Vec<f64> = counts.iter().flat_map(|c| std::iter::repeat_n(1.0 / c, d)).collect();
    let inv = Tensor::new(&[n, d], inv)?;

    let mut nodes = tape.embedding(p.get("gcn/obj_embed"), &batch.categories)?;
    let mut edges = tape.embedding(p.get("gcn/pred_embed"), &preds)?;
    for l in 0..cfg.gcn_layers {
        let sv = tape.gather_rows(nodes, &subj)?;
        let ov = tape.gather_rows(nodes, &obj)?;
        let x = tape.concat(&[sv, edges, ov], 1)?;
        let h = dense(tape, p, &format!("gcn/{l}/edge"), x)?;
        let h = tape.relu(h);
        let new_s = tape.slice(h, 1, 0, d)?;
        edges = tape.slice(h, 1, d, d)?;
        let new_o = tape.slice(h, 1, 2 * d, d)?;
        let from_s = tape.scatter_add_rows(new_s, &subj, n)?;
        let from_o = tape.scatter_add_rows(new_o, &obj, n)?;
        let pooled = tape.add(from_s, from_o)?;
        let pooled = tape.mul_const(pooled, inv.clone())?;
        let out = dense(tape, p, &format!("gcn/{l}/node"), pooled)?;
        nodes = tape.relu(out);
    }
    Ok(GraphEmbedding { objects: nodes, predicates: edges })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContextSide {
    Generator,
    Discriminator,
}

impl ContextSide {
    pub fn width(self) -> usize {
        match self {
            ContextSide::Generator => GEN_CONTEXT_DIM,
            ContextSide::Discriminator => DISC_CONTEXT_DIM,
        }
    }
}

/// Sum-pools the real-object vectors of each graph and applies the side's
/// linear context layer: `s = FC(Σ v_i)`. `vectors` holds one row per
/// entry of `owner`; the result is `num_graphs × width`.
pub fn pool_context(
    tape: &mut Tape,
    p: &Bound,
    side: ContextSide,
    vectors: Var,
    owner: &[usize],
    num_graphs: usize,
) -> Result<Var, ModelError> {
    if owner.is_empty() {
        return Err(ModelError::NoObjects(0));
    }
    let pooled = tape.scatter_add_rows(vectors, owner, num_graphs)?;
    let s = dense(tape, p, "ctx", pooled)?;
    let width = tape.shape(s)[1];
    assert_eq!(width, side.width(), "context width for {side:?}");
    Ok(s)
}

/// Box head: MLP → sigmoid → `(x0, y0, w, h)` squeezed away from 0 and 1,
/// then `x1 = x0 + w·(1 − x0)` and likewise for y. Returns `R × 4` boxes
/// `(x0, y0, x1, y1)`, valid for any weights.
pub fn predict_boxes(tape: &mut Tape, p: &Bound, vectors: Var) -> Result<Var, ModelError> {
    let h = dense(tape, p, "box/hidden", vectors)?;
    let h = tape.relu(h);
    let z = dense(tape, p, "box/out", h)?;
    let q = tape.sigmoid(z);
    let q = tape.scale(q, 1.0 - 2.0 * BOX_EPS);
    let q = tape.add_scalar(q, BOX_EPS);
    let origin = tape.slice(q, 1, 0, 2)?;
    let extent = tape.slice(q, 1, 2, 2)?;
    let shrink = tape.mul(extent, origin)?;
    let span = tape.sub(extent, shrink)?;
    let far = tape.add(origin, span)?;
    Ok(tape.concat(&[origin, far], 1)?)
}

/// Mask head: projection to a `C × 4 × 4` map, two upsample + conv + ReLU
/// rounds and a 1×1 conv with sigmoid, giving `R × 1 × 16 × 16`.
pub fn predict_masks(tape: &mut Tape, p: &Bound, cfg: &ModelConfig, vectors: Var) -> Result<Var, ModelError> {
    let r = tape.shape(vectors)[0];
    let h = dense(tape, p, "mask/proj", vectors)?;
    let h = tape.reshape(h, &[r, cfg.mask_channels, 4, 4])?;
    let mut h = tape.relu(h);
    for k in 0..2 {
        let up = tape.upsample2(h)?;
        let c = conv(tape, p, &format!("mask/conv{k}"), up)?;
        h = tape.relu(c);
    }
    let out = conv(tape, p, "mask/out", h)?;
    debug_assert_eq!(tape.shape(out)[2], MASK_SIZE);
    Ok(tape.sigmoid(out))
}

/// Scene layout `B × D × H × W`: each object's mask is warped into its box
/// and scaled by its vector, and contributions of one graph are summed.
/// Pixels outside every box are exactly zero.
pub fn compose_layout(
    tape: &mut Tape,
    boxes: Var,
    masks: Var,
    vectors: Var,
    owner: &[usize],
    num_graphs: usize,
    size: usize,
) -> Result<Var, ModelError> {
    let r = owner.len();
    let d = tape.shape(vectors)[1];
    let warped = tape.grid_sample_with_box_grad(masks, boxes, size, size)?;
    let warped = tape.reshape(warped, &[r, size * size])?;
    let mut parts = Vec::with_capacity(num_graphs);
    for g in 0..num_graphs {
        let rows: Vec<usize> = (0..r).filter(|&i| owner[i] == g).collect();
        if rows.is_empty() {
            parts.push(tape.constant(Tensor::zeros(&[1, d, size, size])));
            continue;
        }
        let v = tape.gather_rows(vectors, &rows)?;
        let vt = tape.transpose(v)?;
        let m = tape.gather_rows(warped, &rows)?;
        let l = tape.matmul(vt, m)?;
        parts.push(tape.reshape(l, &[1, d, size, size])?);
    }
    Ok(tape.concat(&parts, 0)?)
}

/// Cascade-refinement generator. At every scale the layout (average-pooled
/// to that scale), the tiled context and the upsampled previous features
/// are concatenated and passed through conv → batch norm → leaky ReLU. A
/// final 1×1 conv and sigmoid give `B × 3 × H × W` in `[0, 1]`.
pub fn generate_image(
    tape: &mut Tape,
    p: &Bound,
    cfg: &ModelConfig,
    layout: Var,
    context: Var,
    noise: Option<Var>,
) -> Result<Var, ModelError> {
    let ls = tape.shape(layout).to_vec();
    if ls.len() != 4 || ls[2] != cfg.image_size || ls[3] != cfg.image_size {
        return Err(ShapeError::new("generate_image", format!("layout must be B×D×{0}×{0}", cfg.image_size), &[&ls]).into());
    }
    let scales = cfg.gen_channels.len();
    let mut pyramid = vec![layout];
    for _ in 1..scales {
        let next = tape.avg_pool2(*pyramid.last().unwrap())?;
        pyramid.push(next);
    }
    let mut prev: Option<Var> = None;
    for k in 0..scales {
        let size = cfg.coarsest_size() << k;
        let mut parts = vec![pyramid[scales - 1 - k], tape.tile_spatial(context, size, size)?];
        if k == 0 && cfg.noise_channels > 0 {
            let z = noise.ok_or_else(|| ModelError::Config("generator expects a noise input".into()))?;
            parts.push(z);
        }
        parts.extend(prev);
        let x = tape.concat(&parts, 1)?;
        let h = conv(tape, p, &format!("gen/{k}/conv"), x)?;
        let h = tape.batch_norm(h, p.get(&format!("gen/{k}/gamma")), p.get(&format!("gen/{k}/beta")), BATCH_NORM_EPS)?;
        let h = tape.leaky_relu(h, cfg.leaky_slope);
        prev = Some(if k + 1 < scales { tape.upsample2(h)? } else { h });
    }
    let out = conv(tape, p, "gen/out", prev.expect("at least one scale"))?;
    Ok(tape.sigmoid(out))
}

/// Patch discriminator. Blocks are conv → leaky ReLU → average pool; the
/// tiled context (and optionally the layout) joins after the second block.
/// Returns `B × 1 × h × w` raw scores with `h = H / 2^blocks`.
pub fn discriminate_image(
    tape: &mut Tape,
    p: &Bound,
    cfg: &ModelConfig,
    images: Var,
    context: Var,
    layout: Option<Var>,
) -> Result<Var, ModelError> {
    let mut x = images;
    let mut layout_scaled = layout;
    let blocks = cfg.dimg_channels.len();
    for k in 0..=blocks {
        if k == 2 {
            let size = tape.shape(x)[2];
            let mut parts = vec![x, tape.tile_spatial(context, size, size)?];
            if cfg.dimg_layout {
                let mut l = layout_scaled.ok_or_else(|| ModelError::Config("image discriminator expects a layout".into()))?;
                while tape.shape(l)[2] > size {
                    l = tape.avg_pool2(l)?;
                }
                layout_scaled = Some(l);
                parts.push(l);
            }
            x = tape.concat(&parts, 1)?;
        }
        if k == blocks {
            break;
        }
        let h = conv(tape, p, &format!("block/{k}"), x)?;
        let h = tape.leaky_relu(h, cfg.leaky_slope);
        x = tape.avg_pool2(h)?;
    }
    Ok(conv(tape, p, "out", x)?)
}

/// Object discriminator on `n × 3 × S × S` crops: raw real/fake scores
/// (`n × 1`) and class logits (`n × |objects|`).
pub fn discriminate_objects(tape: &mut Tape, p: &Bound, cfg: &ModelConfig, crops: Var) -> Result<(Var, Var), ModelError> {
    let n = tape.shape(crops)[0];
    if n == 0 {
        return Err(ModelError::NoObjects(0));
    }
    let mut x = crops;
    for k in 0..cfg.dobj_channels.len() {
        let h = conv(tape, p, &format!("block/{k}"), x)?;
        let h = tape.leaky_relu(h, cfg.leaky_slope);
        x = tape.avg_pool2(h)?;
    }
    let flat = tape.value(x).len() / n;
    let x = tape.reshape(x, &[n, flat])?;
    let score = dense(tape, p, "score", x)?;
    let logits = dense(tape, p, "class", x)?;
    Ok((score, logits))
}

/// Intermediate values of one generator pass.
#[derive(Debug, Clone, Copy)]
pub struct GeneratorOutput {
    pub embedding: GraphEmbedding,
    /// Real-object vectors, `R × D`, in [`GraphBatch::real`] order.
    pub vectors: Var,
    pub boxes: Var,
    pub masks: Var,
    pub layout: Var,
    pub context: Var,
    pub image: Var,
}

/// Ground-truth layout inputs used in place of the heads' predictions.
#[derive(Debug, Clone, Copy)]
pub struct Teacher<'a> {
    /// One box per real object, in [`GraphBatch::real`] order.
    pub boxes: &'a [[f64; 4]],
    /// `R × 1 × 16 × 16` masks; predicted masks are used when absent.
    pub masks: Option<&'a Tensor>,
}

/// Full generator pass. With a teacher, the layout is composed from the
/// given boxes (and masks) while the heads still produce their outputs.
pub fn run_generator(
    tape: &mut Tape,
    p: &Bound,
    cfg: &ModelConfig,
    batch: &GraphBatch,
    teacher: Option<Teacher<'_>>,
    noise: Option<Var>,
) -> Result<GeneratorOutput, ModelError> {
    let embedding = graph_conv(tape, p, cfg, batch)?;
    let vectors = tape.gather_rows(embedding.objects, &batch.real)?;
    let boxes = predict_boxes(tape, p, vectors)?;
    let masks = predict_masks(tape, p, cfg, vectors)?;
    let (layout_boxes, layout_masks) = match teacher {
        Some(t) => {
            let flat = t.boxes.iter().flatten().copied().collect();
            let b = tape.constant(Tensor::new(&[t.boxes.len(), 4], flat)?);
            let m = match t.masks {
                Some(m) => tape.constant(m.clone()),
                None => masks,
            };
            (b, m)
        }
        None => (boxes, masks),
    };
    let layout = compose_layout(tape, layout_boxes, layout_masks, vectors, &batch.real_owner, batch.num_graphs, cfg.image_size)?;
    let context = pool_context(tape, p, ContextSide::Generator, vectors, &batch.real_owner, batch.num_graphs)?;
    let image = generate_image(tape, p, cfg, layout, context, noise)?;
    Ok(GeneratorOutput { embedding, vectors, boxes, masks, layout, context, image })
}

/// Predicted boxes for every node of every graph; the image node gets the
/// full frame. Only the graph convolution and box head run.
pub fn infer_boxes(params: &ParamStore, cfg: &ModelConfig, graphs: &[&SceneGraph]) -> Result<Vec<Vec<BoundingBox>>, ModelError> {
    let batch = GraphBatch::new(graphs)?;
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false);
    let e = graph_conv(&mut tape, &p, cfg, &batch)?;
    let v = tape.gather_rows(e.objects, &batch.real)?;
    let boxes = predict_boxes(&mut tape, &p, v)?;
    let coords = tape.value(boxes).data();
    let mut out: Vec<Vec<BoundingBox>> = graphs.iter().map(|g| vec![BoundingBox::full(); g.nodes.len()]).collect();
    for (k, &node) in batch.real.iter().enumerate() {
        let g = batch.owner[node];
        let c = &coords[k * 4..k * 4 + 4];
        out[g][node - batch.offsets[g]] = BoundingBox::new(c[0], c[1], c[2], c[3]).expect("box head output is valid");
    }
    Ok(out)
}
