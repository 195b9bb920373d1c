//! Losses, matching-aware triplets and the alternating training loop.
//!
//! Each step runs the generator once, then updates the image discriminator
//! on real, fake and mismatched triplets, then the object discriminator on
//! real and fake crops, and finally the generator through all of its
//! losses with both discriminators bound as constants.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::autodiff::{AdamConfig, AdamError, AdamState, BackwardError, Bound, Checkpoint, CheckpointError, ParamStore, Tape, Tensor, Var};
use crate::dataset::{scene_rng, DatasetSplit, Example, MASK_SIZE};
use crate::metrics::{avg_iou, relation_score, MetricsError};
use crate::model::{
    discriminate_image, discriminate_objects, infer_boxes, pool_context, run_generator, ContextSide, GeneratorOutput, GraphBatch, ModelConfig,
    ModelError, ModelParams, Teacher,
};
use crate::scene::{BoundingBox, SceneGraph, Vocab};

/// Probabilities are clamped to `[MASK_EPS, 1 − MASK_EPS]` inside the mask
/// cross-entropy.
pub const MASK_EPS: f64 = 1e-6;

/// Header of the metrics log.
pub const LOG_HEADER: &str = "step,l_box,l_mask,l_pix,l_gan_img,l_gan_obj,l_ac,relation_score,iou";

/// Key mixed into the seed for per-step randomness, so that training and
/// dataset generation with the same seed draw unrelated streams.
const STEP_STREAM_KEY: u64 = 0x7472_6169_6e5f_7374;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Backward(#[from] BackwardError),
    #[error(transparent)]
    Adam(#[from] AdamError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("example {index}: {message}")]
    Example { index: usize, message: String },
    #[error("mismatched contexts need a batch of at least 2, got {0}")]
    BatchTooSmall(usize),
    #[error("step {step}: loss {component} is {value}; last good checkpoint: {}", last_checkpoint.as_ref().map_or("none".to_string(), |p| p.display().to_string()))]
    NonFinite { step: u64, component: String, value: f64, last_checkpoint: Option<PathBuf> },
    #[error("checkpoint metadata: {0}")]
    Meta(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_box: f64,
    pub w_mask: f64,
    pub w_pix: f64,
    pub w_gan_img: f64,
    pub w_gan_obj: f64,
    pub w_ac: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { w_box: 10.0, w_mask: 0.1, w_pix: 1.0, w_gan_img: 0.01, w_gan_obj: 0.01, w_ac: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), TrainError> {
        for (name, w) in self.named() {
            if !w.is_finite() || w < 0.0 {
                return Err(TrainError::Config(format!("weight {name} = {w}")));
            }
        }
        Ok(())
    }

    pub fn named(&self) -> [(&'static str, f64); 6] {
        [
            ("l_box", self.w_box),
            ("l_mask", self.w_mask),
            ("l_pix", self.w_pix),
            ("l_gan_img", self.w_gan_img),
            ("l_gan_obj", self.w_gan_obj),
            ("l_ac", self.w_ac),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    pub weights: LossWeights,
    pub adam: AdamConfig,
    /// Save a checkpoint every this many steps (0: only the final one).
    pub checkpoint_every: u64,
    /// Write a log row every this many steps; the last step always logs.
    pub log_every: u64,
    /// Examples held out from the end of the dataset for probe metrics.
    pub probe_size: usize,
    /// Compose training layouts from ground-truth boxes and masks.
    pub teacher_forcing: bool,
    pub hflip: bool,
    pub dataset: Option<PathBuf>,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            steps: 1000,
            seed: 0,
            weights: LossWeights::default(),
            adam: AdamConfig::default(),
            checkpoint_every: 500,
            log_every: 10,
            probe_size: 32,
            teacher_forcing: true,
            hflip: true,
            dataset: None,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size < 2 {
            return Err(TrainError::Config(format!("batch size {} < 2", self.batch_size)));
        }
        if self.steps < 1 {
            return Err(TrainError::Config("steps must be at least 1".into()));
        }
        if self.log_every < 1 {
            return Err(TrainError::Config("log_every must be at least 1".into()));
        }
        self.weights.validate()
    }
}

/// Picks, for each of `n` examples, a uniformly random donor `j ≠ i` whose
/// context serves as the mismatched one.
pub fn sample_mismatched_context<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<Vec<usize>, TrainError> {
    if n < 2 {
        return Err(TrainError::BatchTooSmall(n));
    }
    Ok((0..n)
        .map(|i| {
            let j = rng.random_range(0..n - 1);
            if j >= i {
                j + 1
            } else {
                j
            }
        })
        .collect())
}

/// Bilinear resize of a `C × h × w` tensor to `C × size × size`.
fn resize_chw(t: &Tensor, size: usize) -> Tensor {
    let s = t.shape();
    if s[1] == size && s[2] == size {
        return t.clone();
    }
    let mut tape = Tape::new();
    let x = tape.constant(t.reshape(&[1, s[0], s[1], s[2]]).expect("rank 3"));
    let y = tape.crop_resize(x, &[(0, [0.0, 0.0, 1.0, 1.0])], size).expect("valid crop");
    tape.value(y).reshape(&[s[0], size, size]).expect("same size")
}

/// Tensors for one training batch.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub graphs: Vec<SceneGraph>,
    pub batch: GraphBatch,
    /// `B × 3 × H × W` real images.
    pub images: Tensor,
    /// Ground-truth box per real object, in [`GraphBatch::real`] order.
    pub boxes: Vec<[f64; 4]>,
    /// `R × 1 × 16 × 16` ground-truth masks, when every object has one.
    pub masks: Option<Tensor>,
    /// Category per real object.
    pub labels: Vec<usize>,
}

impl TrainBatch {
    pub fn new(examples: &[Example], image_size: usize) -> Result<Self, TrainError> {
        let graphs: Vec<SceneGraph> = examples.iter().map(|e| e.graph.with_image_node()).collect();
        let refs: Vec<&SceneGraph> = graphs.iter().collect();
        let batch = GraphBatch::new(&refs)?;
        let mut images = Vec::with_capacity(examples.len());
        for (i, e) in examples.iter().enumerate() {
            let img = e.image.as_ref().ok_or_else(|| TrainError::Example { index: i, message: "no image".into() })?;
            images.push(resize_chw(&img.to_chw(), image_size));
        }
        let images = Tensor::stack(&images).map_err(ModelError::from)?;
        let mut boxes = Vec::with_capacity(batch.real.len());
        let mut masks = Vec::with_capacity(batch.real.len() * MASK_SIZE * MASK_SIZE);
        let mut all_masks = true;
        let mut labels = Vec::with_capacity(batch.real.len());
        for &node in &batch.real {
            let g = batch.owner[node];
            let n = &graphs[g].nodes[node - batch.offsets[g]];
            let b = n.gt_box.ok_or_else(|| TrainError::Example { index: g, message: "object without a box".into() })?;
            boxes.push(b.to_array());
            labels.push(n.category);
            match &n.gt_mask {
                Some(m) => masks.extend(m.resample(MASK_SIZE, MASK_SIZE).to_f64()),
                None => all_masks = false,
            }
        }
        let masks = all_masks
            .then(|| Tensor::new(&[batch.real.len(), 1, MASK_SIZE, MASK_SIZE], masks))
            .transpose()
            .map_err(ModelError::from)?;
        Ok(Self { graphs, batch, images, boxes, masks, labels })
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    /// `(image index, box)` of every real object, for object crops.
    pub fn crops(&self) -> Vec<(usize, [f64; 4])> {
        self.batch.real_owner.iter().copied().zip(self.boxes.iter().copied()).collect()
    }
}

/// Named loss components of one step, plus the discriminator objectives.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossReport {
    pub step: u64,
    /// The generator-side components: six, or five without masks.
    pub components: BTreeMap<String, f64>,
    pub total: f64,
    pub d_img: f64,
    pub d_obj: f64,
}

impl LossReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.components.get(name).copied()
    }
}

fn l1(tape: &mut Tape, a: Var, target: Var) -> Result<Var, ModelError> {
    let d = tape.sub(a, target)?;
    let d = tape.abs(d);
    Ok(tape.mean(d))
}

/// Least-squares adversarial term `mean((x − target)²)`.
fn lsgan(tape: &mut Tape, x: Var, target: f64) -> Var {
    let d = tape.add_scalar(x, -target);
    let d = tape.square(d);
    tape.mean(d)
}

/// Pixel-wise binary cross-entropy of predicted masks against 0/1 targets.
fn mask_bce(tape: &mut Tape, m: Var, target: &Tensor) -> Result<Var, ModelError> {
    let p = tape.clamp(m, MASK_EPS, 1.0 - MASK_EPS);
    let log_p = tape.ln(p);
    let q = tape.scale(p, -1.0);
    let q = tape.add_scalar(q, 1.0);
    let log_q = tape.ln(q);
    let pos = tape.mul_const(log_p, target.clone())?;
    let neg = tape.mul_const(log_q, target.map(|t| 1.0 - t))?;
    let sum = tape.add(pos, neg)?;
    let mean = tape.mean(sum);
    Ok(tape.scale(mean, -1.0))
}

/// Generator-side inputs to [`compute_losses`], all on one tape.
#[derive(Debug, Clone, Copy)]
pub struct LossInputs {
    pub boxes: Var,
    pub masks: Var,
    pub image: Var,
    /// Image discriminator scores of the generated images.
    pub d_img_fake: Var,
    /// Object discriminator real/fake scores and class logits of fake crops.
    pub d_obj_fake: Var,
    pub d_obj_logits: Var,
}

/// Weighted sum of the generator losses. Returns the total and each named
/// component; `l_mask` is omitted when the batch has no masks.
pub fn compute_losses(
    tape: &mut Tape,
    inputs: &LossInputs,
    batch: &TrainBatch,
    weights: &LossWeights,
) -> Result<(Var, Vec<(&'static str, Var)>), ModelError> {
    let gt_boxes = tape.constant(Tensor::new(&[batch.boxes.len(), 4], batch.boxes.iter().flatten().copied().collect())?);
    let real = tape.constant(batch.images.clone());
    let mut parts = vec![("l_box", l1(tape, inputs.boxes, gt_boxes)?)];
    if let Some(m) = &batch.masks {
        parts.push(("l_mask", mask_bce(tape, inputs.masks, m)?));
    }
    parts.push(("l_pix", l1(tape, inputs.image, real)?));
    parts.push(("l_gan_img", lsgan(tape, inputs.d_img_fake, 1.0)));
    parts.push(("l_gan_obj", lsgan(tape, inputs.d_obj_fake, 1.0)));
    parts.push(("l_ac", tape.softmax_cross_entropy(inputs.d_obj_logits, &batch.labels)?));
    let w: BTreeMap<&str, f64> = weights.named().into_iter().collect();
    let mut total: Option<Var> = None;
    for (name, v) in &parts {
        let term = tape.scale(*v, w[name]);
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    Ok((total.expect("at least one loss"), parts))
}

/// Generator objective of one pass: scores the generated images with the
/// (fixed) discriminators and weighs every loss. The discriminator context
/// is computed from `vectors`, the detached values of `out.vectors`.
#[allow(clippy::too_many_arguments)]
pub fn generator_losses(
    tape: &mut Tape,
    out: &GeneratorOutput,
    vectors: &Tensor,
    d_img: &Bound,
    d_obj: &Bound,
    cfg: &ModelConfig,
    batch: &TrainBatch,
    weights: &LossWeights,
) -> Result<(Var, Vec<(&'static str, Var)>), ModelError> {
    let v = tape.constant(vectors.clone());
    let s = pool_context(tape, d_img, ContextSide::Discriminator, v, &batch.batch.real_owner, batch.len())?;
    let d_img_fake = discriminate_image(tape, d_img, cfg, out.image, s, cfg.dimg_layout.then_some(out.layout))?;
    let cf = crop_objects(tape, out.image, &batch.crops(), cfg.crop_size)?;
    let (d_obj_fake, d_obj_logits) = discriminate_objects(tape, d_obj, cfg, cf)?;
    let inputs = LossInputs { boxes: out.boxes, masks: out.masks, image: out.image, d_img_fake, d_obj_fake, d_obj_logits };
    compute_losses(tape, &inputs, batch, weights)
}

/// `size × size` bilinear crops of `images` (`B × C × H × W`), one per
/// `(image index, box)`.
pub fn crop_objects(tape: &mut Tape, images: Var, boxes: &[(usize, [f64; 4])], size: usize) -> Result<Var, ModelError> {
    Ok(tape.crop_resize(images, boxes, size)?)
}

/// Inputs of the image discriminator objective, all on one tape.
#[derive(Debug, Clone, Copy)]
pub struct DImgInputs<'a> {
    pub real: Var,
    pub fake: Var,
    /// Per-object vectors that feed the discriminator's context network.
    pub vectors: Var,
    /// Image index of each vector.
    pub owner: &'a [usize],
    /// Mismatched-context donor per image.
    pub donors: &'a [usize],
    pub layout: Option<Var>,
}

/// Matching-aware objective: real images with their own context are pushed
/// towards 1; generated images and real images under a mismatched context
/// are both fakes pushed towards 0, averaged over the two pools.
pub fn d_img_loss(tape: &mut Tape, d: &Bound, cfg: &ModelConfig, x: &DImgInputs<'_>) -> Result<Var, ModelError> {
    let n = tape.shape(x.real)[0];
    let s = pool_context(tape, d, ContextSide::Discriminator, x.vectors, x.owner, n)?;
    let s_bar = tape.gather_rows(s, x.donors)?;
    let d_real = discriminate_image(tape, d, cfg, x.real, s, x.layout)?;
    let d_fake = discriminate_image(tape, d, cfg, x.fake, s, x.layout)?;
    let d_mis = discriminate_image(tape, d, cfg, x.real, s_bar, x.layout)?;
    let l_real = lsgan(tape, d_real, 1.0);
    let l_fake = lsgan(tape, d_fake, 0.0);
    let l_mis = lsgan(tape, d_mis, 0.0);
    let pool = tape.add(l_fake, l_mis)?;
    let pool = tape.scale(pool, 0.5);
    Ok(tape.add(l_real, pool)?)
}

/// Object discriminator objective: real crops towards 1, generated crops
/// towards 0, plus classification of the real crops.
pub fn d_obj_loss(tape: &mut Tape, d: &Bound, cfg: &ModelConfig, real_crops: Var, fake_crops: Var, labels: &[usize]) -> Result<Var, ModelError> {
    let (sr, logits) = discriminate_objects(tape, d, cfg, real_crops)?;
    let (sf, _) = discriminate_objects(tape, d, cfg, fake_crops)?;
    let l_real = lsgan(tape, sr, 1.0);
    let l_fake = lsgan(tape, sf, 0.0);
    let l_cls = tape.softmax_cross_entropy(logits, labels)?;
    let adv = tape.add(l_real, l_fake)?;
    Ok(tape.add(adv, l_cls)?)
}

/// Parameters, optimizer state and step counter.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub vocab: Vocab,
    pub params: ModelParams,
    pub opt_g: AdamState,
    pub opt_d_img: AdamState,
    pub opt_d_obj: AdamState,
    /// Steps completed so far.
    pub step: u64,
    pub last_checkpoint: Option<PathBuf>,
}

/// Deterministic generator for step `step` of a run seeded with `seed`.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    scene_rng(seed ^ STEP_STREAM_KEY, step)
}

impl Trainer {
    /// Fresh model sized to `vocab`; the model config's vocabulary sizes
    /// are filled in from it.
    pub fn new(mut config: TrainConfig, vocab: Vocab) -> Result<Self, TrainError> {
        config.validate()?;
        config.model.num_objects = vocab.num_objects();
        config.model.num_predicates = vocab.num_predicates();
        let params = ModelParams::init(&config.model, &mut scene_rng(config.seed, u64::MAX))?;
        let adam = config.adam;
        Ok(Self {
            config,
            vocab,
            params,
            opt_g: AdamState::new(adam),
            opt_d_img: AdamState::new(adam),
            opt_d_obj: AdamState::new(adam),
            step: 0,
            last_checkpoint: None,
        })
    }

    pub fn model_config(&self) -> &ModelConfig {
        &self.config.model
    }

    /// One alternating update on `batch`.
    pub fn train_step<R: Rng + ?Sized>(&mut self, batch: &TrainBatch, rng: &mut R) -> Result<LossReport, TrainError> {
        let cfg = self.config.model.clone();
        let weights = self.effective_weights(batch);
        let n = batch.len();
        let donors = sample_mismatched_context(n, rng)?;
        let noise = (cfg.noise_channels > 0).then(|| {
            let c = cfg.coarsest_size();
            Tensor::randn(&[n, cfg.noise_channels, c, c], 1.0, rng)
        });

        let mut tape = Tape::new();
        let gb = self.params.generator.bind(&mut tape, true);
        let noise_var = noise.map(|z| tape.constant(z));
        let teacher = self.config.teacher_forcing.then(|| Teacher { boxes: &batch.boxes, masks: batch.masks.as_ref() });
        let out = run_generator(&mut tape, &gb, &cfg, &batch.batch, teacher, noise_var)?;
        let fake = tape.value(out.image).clone();
        let vectors = tape.value(out.vectors).clone();
        let layout = cfg.dimg_layout.then(|| tape.value(out.layout).clone());
        let crops = batch.crops();

        let d_img = {
            let mut t = Tape::new();
            let db = self.params.d_img.bind(&mut t, true);
            let v = t.constant(vectors.clone());
            let real = t.constant(batch.images.clone());
            let fake = t.constant(fake.clone());
            let lay = layout.clone().map(|l| t.constant(l));
            let inputs = DImgInputs { real, fake, vectors: v, owner: &batch.batch.real_owner, donors: &donors, layout: lay };
            let loss = d_img_loss(&mut t, &db, &cfg, &inputs)?;
            let value = self.finite(&t, loss, "d_img")?;
            let grads = db.grads(&t.backward(loss)?);
            self.opt_d_img.step(&mut self.params.d_img, &grads)?;
            value
        };

        let d_obj = {
            let mut t = Tape::new();
            let ob = self.params.d_obj.bind(&mut t, true);
            let real = t.constant(batch.images.clone());
            let fake = t.constant(fake);
            let cr = crop_objects(&mut t, real, &crops, cfg.crop_size)?;
            let cf = crop_objects(&mut t, fake, &crops, cfg.crop_size)?;
            let loss = d_obj_loss(&mut t, &ob, &cfg, cr, cf, &batch.labels)?;
            let value = self.finite(&t, loss, "d_obj")?;
            let grads = ob.grads(&t.backward(loss)?);
            self.opt_d_obj.step(&mut self.params.d_obj, &grads)?;
            value
        };

        let db = self.params.d_img.bind(&mut tape, false);
        let ob = self.params.d_obj.bind(&mut tape, false);
        let (total, parts) = generator_losses(&mut tape, &out, &vectors, &db, &ob, &cfg, batch, &weights)?;
        let mut components = BTreeMap::new();
        for (name, v) in &parts {
            components.insert(name.to_string(), self.finite(&tape, *v, name)?);
        }
        let total_value = self.finite(&tape, total, "total")?;
        let grads = gb.grads(&tape.backward(total)?);
        self.opt_g.step(&mut self.params.generator, &grads)?;
        self.step += 1;
        Ok(LossReport { step: self.step, components, total: total_value, d_img, d_obj })
    }

    fn effective_weights(&self, batch: &TrainBatch) -> LossWeights {
        let mut w = self.config.weights;
        if batch.masks.is_none() {
            w.w_mask = 0.0;
        }
        w
    }

    fn finite(&self, tape: &Tape, v: Var, component: &str) -> Result<f64, TrainError> {
        let value = tape.value(v).item();
        if value.is_finite() {
            Ok(value)
        } else {
            Err(TrainError::NonFinite {
                step: self.step + 1,
                component: component.to_string(),
                value,
                last_checkpoint: self.last_checkpoint.clone(),
            })
        }
    }

    /// The batch for step `step` (0-based): a seeded sample of distinct
    /// examples, each flipped horizontally with probability ½ when enabled.
    pub fn sample_batch<R: Rng + ?Sized>(&self, examples: &[Example], rng: &mut R) -> Result<TrainBatch, TrainError> {
        let k = self.config.batch_size.min(examples.len());
        if k < 2 {
            return Err(TrainError::BatchTooSmall(k));
        }
        let mut picked = Vec::with_capacity(k);
        for i in sample(rng, examples.len(), k).into_iter() {
            let e = &examples[i];
            if self.config.hflip && rng.random_bool(0.5) {
                picked.push(Example { image: e.image.as_ref().map(|im| im.hflip()), graph: e.graph.hflip(&self.vocab) });
            } else {
                picked.push(e.clone());
            }
        }
        TrainBatch::new(&picked, self.config.model.image_size)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut tensors = BTreeMap::new();
        for (group, store) in self.groups() {
            for (k, v) in store.iter() {
                tensors.insert(format!("{group}/{k}"), v.clone());
            }
        }
        for (group, opt) in self.optimizers() {
            for (k, v) in &opt.m {
                tensors.insert(format!("adam/{group}/m/{k}"), v.clone());
            }
            for (k, v) in &opt.v {
                tensors.insert(format!("adam/{group}/v/{k}"), v.clone());
            }
        }
        let vocab: serde_json::Value = serde_json::from_str(&self.vocab.to_json()).expect("vocab JSON");
        let meta = json!({
            "model": self.config.model,
            "train": self.config,
            "vocab": vocab,
            "step": self.step,
            "adam_steps": {
                "generator": self.opt_g.step,
                "d_img": self.opt_d_img.step,
                "d_obj": self.opt_d_obj.step,
            },
        });
        Checkpoint { meta, tensors }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, TrainError> {
        let meta = |k: &str| ck.meta.get(k).cloned().ok_or_else(|| TrainError::Meta(format!("missing {k}")));
        let config: TrainConfig = serde_json::from_value(meta("train")?).map_err(|e| TrainError::Meta(e.to_string()))?;
        let vocab = Vocab::from_json(&meta("vocab")?.to_string()).map_err(|e| TrainError::Meta(e.to_string()))?;
        let step = meta("step")?.as_u64().ok_or_else(|| TrainError::Meta("step".into()))?;
        let adam_steps = meta("adam_steps")?;
        let mut groups: BTreeMap<&str, ParamStore> = BTreeMap::new();
        let mut moments: BTreeMap<(&str, &str), BTreeMap<String, Tensor>> = BTreeMap::new();
        for (name, t) in &ck.tensors {
            if let Some(rest) = name.strip_prefix("adam/") {
                let mut it = rest.splitn(3, '/');
                let (g, kind, key) = (it.next(), it.next(), it.next());
                let (Some(g), Some(kind @ ("m" | "v")), Some(key)) = (g, kind, key) else {
                    return Err(TrainError::Meta(format!("unexpected tensor {name}")));
                };
                let g = ["generator", "d_img", "d_obj"].into_iter().find(|x| *x == g).ok_or_else(|| TrainError::Meta(name.clone()))?;
                moments.entry((g, kind)).or_default().insert(key.to_string(), t.clone());
            } else {
                let (g, key) = name.split_once('/').ok_or_else(|| TrainError::Meta(format!("unexpected tensor {name}")))?;
                let g = ["generator", "d_img", "d_obj"].into_iter().find(|x| *x == g).ok_or_else(|| TrainError::Meta(name.clone()))?;
                groups.entry(g).or_default().insert(key, t.clone());
            }
        }
        let mut take = |g: &str| groups.remove(g).unwrap_or_default();
        let params = ModelParams { generator: take("generator"), d_img: take("d_img"), d_obj: take("d_obj") };
        params.check(&config.model)?;
        let mut opt = |g: &'static str| -> Result<AdamState, TrainError> {
            let mut s = AdamState::new(config.adam);
            s.step = adam_steps.get(g).and_then(|v| v.as_u64()).ok_or_else(|| TrainError::Meta(format!("adam step for {g}")))?;
            s.m = moments.remove(&(g, "m")).unwrap_or_default();
            s.v = moments.remove(&(g, "v")).unwrap_or_default();
            Ok(s)
        };
        let (opt_g, opt_d_img, opt_d_obj) = (opt("generator")?, opt("d_img")?, opt("d_obj")?);
        Ok(Self { config, vocab, params, opt_g, opt_d_img, opt_d_obj, step, last_checkpoint: None })
    }

    fn groups(&self) -> [(&'static str, &ParamStore); 3] {
        [("generator", &self.params.generator), ("d_img", &self.params.d_img), ("d_obj", &self.params.d_obj)]
    }

    fn optimizers(&self) -> [(&'static str, &AdamState); 3] {
        [("generator", &self.opt_g), ("d_img", &self.opt_d_img), ("d_obj", &self.opt_d_obj)]
    }

    pub fn save(&mut self, path: &Path) -> Result<(), TrainError> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        self.to_checkpoint().save(path)?;
        self.last_checkpoint = Some(path.to_path_buf());
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let mut t = Self::from_checkpoint(&Checkpoint::load(path)?)?;
        t.last_checkpoint = Some(path.to_path_buf());
        Ok(t)
    }
}

/// Relation score (when every predicate is spatial) and mean IoU of the
/// predicted boxes on `probe`.
pub fn probe_metrics(params: &ParamStore, cfg: &ModelConfig, vocab: &Vocab, probe: &[Example]) -> Result<(Option<f64>, Option<f64>), TrainError> {
    if probe.is_empty() {
        return Ok((None, None));
    }
    let graphs: Vec<SceneGraph> = probe.iter().map(|e| e.graph.with_image_node()).collect();
    let refs: Vec<&SceneGraph> = graphs.iter().collect();
    let pred = infer_boxes(params, cfg, &refs)?;
    let rel = match relation_score(&refs, &pred, vocab) {
        Ok(v) => Some(v),
        Err(MetricsError::NonSpatial { .. } | MetricsError::Empty(_)) => None,
        Err(e) => return Err(e.into()),
    };
    let (mut p, mut g) = (Vec::new(), Vec::new());
    for (graph, boxes) in graphs.iter().zip(&pred) {
        for i in graph.real_objects() {
            if let Some(gt) = graph.nodes[i].gt_box {
                p.push(boxes[i]);
                g.push(gt);
            }
        }
    }
    let iou = (!p.is_empty()).then(|| avg_iou(&p, &g)).transpose()?;
    Ok((rel, iou))
}

/// Mean image-discriminator score on real images with their own context
/// and with a mismatched one (donors drawn with `rng`).
pub fn matching_scores<R: Rng + ?Sized>(params: &ModelParams, cfg: &ModelConfig, examples: &[Example], rng: &mut R) -> Result<(f64, f64), TrainError> {
    let batch = TrainBatch::new(examples, cfg.image_size)?;
    let donors = sample_mismatched_context(batch.len(), rng)?;
    let mut tape = Tape::new();
    let gb = params.generator.bind(&mut tape, false);
    let db = params.d_img.bind(&mut tape, false);
    let e = crate::model::graph_conv(&mut tape, &gb, cfg, &batch.batch)?;
    let v = tape.gather_rows(e.objects, &batch.batch.real).map_err(ModelError::from)?;
    let s = pool_context(&mut tape, &db, ContextSide::Discriminator, v, &batch.batch.real_owner, batch.len())?;
    let s_bar = tape.gather_rows(s, &donors).map_err(ModelError::from)?;
    let real = tape.constant(batch.images.clone());
    let layout = if cfg.dimg_layout {
        let teacher = Teacher { boxes: &batch.boxes, masks: batch.masks.as_ref() };
        Some(run_generator(&mut tape, &gb, cfg, &batch.batch, Some(teacher), None)?.layout)
    } else {
        None
    };
    let matched = discriminate_image(&mut tape, &db, cfg, real, s, layout)?;
    let mismatched = discriminate_image(&mut tape, &db, cfg, real, s_bar, layout)?;
    let mean = |t: &Tensor| t.sum() / t.len() as f64;
    Ok((mean(tape.value(matched)), mean(tape.value(mismatched))))
}

/// Summary of a finished run.
#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub steps: u64,
    pub last: LossReport,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub relation_score: Option<f64>,
    pub iou: Option<f64>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x}"))
}

/// Splits `split` into training examples and the held-out probe tail.
pub fn split_probe(split: &DatasetSplit, probe_size: usize) -> (&[Example], &[Example]) {
    let n = split.examples.len();
    let probe = probe_size.min(n / 5);
    split.examples.split_at(n - probe)
}

/// Trains until `trainer.config.steps`, writing `log.csv`, periodic
/// checkpoints under `out/checkpoints/` and `out/final.ckpt`.
pub fn run_training(trainer: &mut Trainer, split: &DatasetSplit, out: &Path) -> Result<TrainSummary, TrainError> {
    if split.vocab != trainer.vocab {
        return Err(TrainError::Config("dataset vocabulary differs from the model's".into()));
    }
    fs::create_dir_all(out).map_err(io_err(out))?;
    let (train, probe) = split_probe(split, trainer.config.probe_size);
    let log = out.join("log.csv");
    let fresh = trainer.step == 0 || !log.exists();
    let mut file = OpenOptions::new().create(true).append(!fresh).write(true).truncate(fresh).open(&log).map_err(io_err(&log))?;
    if fresh {
        writeln!(file, "{LOG_HEADER}").map_err(io_err(&log))?;
    }
    let steps = trainer.config.steps;
    let mut last = None;
    let (mut rel, mut iou) = (None, None);
    while trainer.step < steps {
        let mut rng = step_rng(trainer.config.seed, trainer.step);
        let batch = trainer.sample_batch(train, &mut rng)?;
        let report = trainer.train_step(&batch, &mut rng)?;
        let s = report.step;
        if s % trainer.config.log_every == 0 || s == steps {
            (rel, iou) = probe_metrics(&trainer.params.generator, &trainer.config.model, &trainer.vocab, probe)?;
            let c = |k: &str| fmt_opt(report.get(k));
            writeln!(
                file,
                "{s},{},{},{},{},{},{},{},{}",
                c("l_box"),
                c("l_mask"),
                c("l_pix"),
                c("l_gan_img"),
                c("l_gan_obj"),
                c("l_ac"),
                fmt_opt(rel),
                fmt_opt(iou)
            )
            .map_err(io_err(&log))?;
            file.flush().map_err(io_err(&log))?;
            log::info!("step {s}: total {:.4} d_img {:.4} d_obj {:.4} relation {:?}", report.total, report.d_img, report.d_obj, rel);
        }
        if trainer.config.checkpoint_every > 0 && s % trainer.config.checkpoint_every == 0 && s != steps {
            trainer.save(&out.join("checkpoints").join(format!("step_{s:06}.ckpt")))?;
        }
        last = Some(report);
    }
    let checkpoint = out.join("final.ckpt");
    trainer.save(&checkpoint)?;
    let last = last.ok_or_else(|| TrainError::Config(format!("nothing to do: already at step {steps}")))?;
    Ok(TrainSummary { steps: trainer.step, last, checkpoint, log, relation_score: rel, iou })
}

/// Generated images `B × 3 × H × W` for `graphs`, laid out from the
/// ground-truth boxes and masks when `gt_layout` is set (falling back to
/// predictions for anything missing) and from the heads otherwise.
pub fn generate_images(params: &ParamStore, cfg: &ModelConfig, graphs: &[&SceneGraph], gt_layout: bool, seed: u64) -> Result<(Tensor, Vec<Vec<BoundingBox>>), TrainError> {
    let graphs: Vec<SceneGraph> = graphs.iter().map(|g| g.with_image_node()).collect();
    let refs: Vec<&SceneGraph> = graphs.iter().collect();
    let batch = GraphBatch::new(&refs)?;
    let mut boxes = Vec::new();
    let mut masks = Vec::new();
    let mut have_boxes = true;
    let mut have_masks = true;
    for &node in &batch.real {
        let g = batch.owner[node];
        let n = &graphs[g].nodes[node - batch.offsets[g]];
        match n.gt_box {
            Some(b) => boxes.push(b.to_array()),
            None => have_boxes = false,
        }
        match &n.gt_mask {
            Some(m) => masks.extend(m.resample(MASK_SIZE, MASK_SIZE).to_f64()),
            None => have_masks = false,
        }
    }
    let masks = (gt_layout && have_boxes && have_masks)
        .then(|| Tensor::new(&[batch.real.len(), 1, MASK_SIZE, MASK_SIZE], masks))
        .transpose()
        .map_err(ModelError::from)?;
    if gt_layout && !have_boxes {
        return Err(TrainError::Config("ground-truth layout requested but some objects have no box".into()));
    }
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false);
    let noise = (cfg.noise_channels > 0).then(|| {
        let c = cfg.coarsest_size();
        tape.constant(Tensor::randn(&[graphs.len(), cfg.noise_channels, c, c], 1.0, &mut step_rng(seed, 0)))
    });
    let teacher = gt_layout.then(|| Teacher { boxes: &boxes, masks: masks.as_ref() });
    let out = run_generator(&mut tape, &p, cfg, &batch, teacher, noise)?;
    let coords = tape.value(out.boxes).data();
    let mut layout: Vec<Vec<BoundingBox>> = graphs.iter().map(|g| vec![BoundingBox::full(); g.nodes.len()]).collect();
    for (k, &node) in batch.real.iter().enumerate() {
        let g = batch.owner[node];
        let c = if gt_layout { boxes[k] } else { [coords[4 * k], coords[4 * k + 1], coords[4 * k + 2], coords[4 * k + 3]] };
        layout[g][node - batch.offsets[g]] = BoundingBox::new(c[0], c[1], c[2], c[3]).expect("valid box");
    }
    Ok((tape.value(out.image).clone(), layout))
}
