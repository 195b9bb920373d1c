//! Rating studies: exported manifests, blinded trial payloads, per-worker
//! trial order and at-most-once answer bookkeeping.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::scene_rng;
use crate::image::RgbImage;
use crate::metrics::{Answer, Design, RatingRecord};
use crate::scene::{to_pseudo_caption, SceneGraph, SpatialPredicate, Vocab};

pub const DEFAULT_CONTROL_RATE: f64 = 0.10;
pub const DEFAULT_TARGET_RATINGS: usize = 5;

/// Model name recorded for ground-truth images in control trials.
pub const GROUND_TRUTH: &str = "ground_truth";
/// Model name recorded for pixel-scrambled images in realism controls.
pub const SCRAMBLED: &str = "scrambled";

pub const AVB_PROMPT: &str = "Which image looks more realistic?";
pub const ABX_PROMPT: &str = "Which image matches the caption better?";

#[derive(Debug, thiserror::Error)]
pub enum StudyError {
    #[error("invalid manifest: {0}")]
    Invalid(String),
    #[error("duplicate trial id {0}")]
    DuplicateTrial(String),
    #[error("missing media: {}", .0.join(", "))]
    MissingMedia(Vec<String>),
    #[error("unknown trial {0}")]
    UnknownTrial(String),
    #[error("worker {worker} already answered trial {trial}")]
    Duplicate { worker: String, trial: String },
    #[error("trial {trial} was not served to worker {worker}")]
    Unserved { worker: String, trial: String },
    #[error("answer {} does not fit a {design} study", answer.as_str())]
    BadAnswer { answer: Answer, design: Design },
    #[error("not enough material: {0}")]
    NotEnough(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyTrial {
    pub trial_id: String,
    /// Media references in display order (one for MORS, A then B otherwise).
    pub media: Vec<String>,
    pub prompt: String,
    pub item_ref: String,
    pub side_a_model: String,
    pub is_control: bool,
    #[serde(default)]
    pub control_truth: Option<Answer>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyManifest {
    pub study_id: String,
    pub design: Design,
    #[serde(default = "default_target")]
    pub target_ratings: usize,
    pub seed: u64,
    /// Compared models; forced-choice results are reported for this pair.
    #[serde(default)]
    pub models: Vec<String>,
    pub trials: Vec<StudyTrial>,
}

fn default_target() -> usize {
    DEFAULT_TARGET_RATINGS
}

/// Identifiers for studies, trials, workers and media: `[A-Za-z0-9._-]`,
/// at most 128 bytes, not starting with a dot.
pub fn valid_id(s: &str) -> bool {
    !s.is_empty() && s.len() <= 128 && s.bytes().all(|b| b.is_ascii_alphanumeric() || b"-_.".contains(&b)) && !s.starts_with('.')
}

/// True for a bare file name that is safe to resolve inside a media
/// directory.
pub fn valid_media_ref(s: &str) -> bool {
    valid_id(s)
}

impl StudyManifest {
    pub fn from_json(text: &str) -> Result<Self, StudyError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    /// Structural checks, plus media existence when `media_dir` is given.
    pub fn validate(&self, media_dir: Option<&Path>) -> Result<(), StudyError> {
        let bad = |m: String| Err(StudyError::Invalid(m));
        if !valid_id(&self.study_id) {
            return bad(format!("study id {:?} must be a non-empty name of [A-Za-z0-9._-]", self.study_id));
        }
        if self.target_ratings == 0 {
            return bad("target_ratings must be positive".into());
        }
        if self.trials.is_empty() {
            return bad("no trials".into());
        }
        let images = if self.design == Design::Mors { 1 } else { 2 };
        let mut seen = BTreeSet::new();
        let mut missing = BTreeSet::new();
        for t in &self.trials {
            if !valid_id(&t.trial_id) {
                return bad(format!("trial id {:?}", t.trial_id));
            }
            if !seen.insert(t.trial_id.as_str()) {
                return Err(StudyError::DuplicateTrial(t.trial_id.clone()));
            }
            if t.media.len() != images {
                return bad(format!("trial {} has {} images, a {} trial needs {images}", t.trial_id, t.media.len(), self.design));
            }
            if t.is_control != t.control_truth.is_some() {
                return bad(format!("trial {}: control truth must be present exactly for controls", t.trial_id));
            }
            if let Some(a) = t.control_truth {
                if !a.fits(self.design) {
                    return Err(StudyError::BadAnswer { answer: a, design: self.design });
                }
            }
            if t.side_a_model.is_empty() {
                return bad(format!("trial {} has no side-A model", t.trial_id));
            }
            for m in &t.media {
                if !valid_media_ref(m) {
                    return bad(format!("trial {} media ref {m:?}", t.trial_id));
                }
                if let Some(dir) = media_dir {
                    if !dir.join(m).is_file() {
                        missing.insert(m.clone());
                    }
                }
            }
        }
        if !missing.is_empty() {
            return Err(StudyError::MissingMedia(missing.into_iter().collect()));
        }
        Ok(())
    }

    pub fn control_count(&self) -> usize {
        self.trials.iter().filter(|t| t.is_control).count()
    }

    pub fn trial_index(&self, trial_id: &str) -> Option<usize> {
        self.trials.iter().position(|t| t.trial_id == trial_id)
    }

    /// The model pair passed to forced-choice aggregation, if declared.
    pub fn model_pair(&self) -> Option<[&str; 2]> {
        match self.models.as_slice() {
            [a, b] if self.design != Design::Mors => Some([a.as_str(), b.as_str()]),
            _ => None,
        }
    }

    /// This worker's seeded permutation of trial indices.
    pub fn worker_order(&self, worker: &str) -> Vec<usize> {
        let digest = Sha256::digest(worker.as_bytes());
        let stream = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
        let mut order: Vec<usize> = (0..self.trials.len()).collect();
        order.shuffle(&mut scene_rng(self.seed, stream));
        order
    }

    /// The rating row for `worker` answering trial `index`.
    pub fn record(&self, index: usize, worker: &str, answer: Answer) -> RatingRecord {
        let t = &self.trials[index];
        RatingRecord {
            worker_id: worker.to_string(),
            trial_id: t.trial_id.clone(),
            design: self.design,
            item_ref: t.item_ref.clone(),
            side_a_model: t.side_a_model.clone(),
            answer,
            is_control: t.is_control,
            control_truth: t.control_truth,
        }
    }

    pub fn payload(&self, index: usize) -> TrialPayload {
        let t = &self.trials[index];
        TrialPayload {
            study_id: self.study_id.clone(),
            trial_id: t.trial_id.clone(),
            design: self.design,
            media: t.media.iter().map(|m| format!("/media/{m}")).collect(),
            prompt: t.prompt.clone(),
        }
    }
}

/// What a rater sees: no model names, item references or control flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialPayload {
    pub study_id: String,
    pub trial_id: String,
    pub design: Design,
    pub media: Vec<String>,
    pub prompt: String,
}

/// Serving state of one study: which worker was shown and answered what.
#[derive(Debug, Clone, Default)]
pub struct Progress {
    counts: Vec<usize>,
    served: BTreeMap<String, BTreeSet<usize>>,
    answered: BTreeMap<String, BTreeSet<usize>>,
}

impl Progress {
    pub fn new(manifest: &StudyManifest) -> Self {
        Self { counts: vec![0; manifest.trials.len()], ..Default::default() }
    }

    /// Ratings recorded per trial.
    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    /// A served trial this worker has not answered yet, if any.
    pub fn pending(&self, worker: &str) -> Option<usize> {
        let answered = self.answered.get(worker);
        self.served.get(worker)?.iter().copied().find(|i| answered.is_none_or(|a| !a.contains(i)))
    }

    /// Trial to show next: the pending one, else the unserved trial below
    /// target with the fewest ratings, ties broken by the worker's order.
    /// `None` means the worker is done.
    pub fn next(&mut self, manifest: &StudyManifest, worker: &str) -> Option<usize> {
        if let Some(i) = self.pending(worker) {
            return Some(i);
        }
        let served = self.served.get(worker);
        let pick = manifest
            .worker_order(worker)
            .into_iter()
            .filter(|i| served.is_none_or(|s| !s.contains(i)) && self.counts[*i] < manifest.target_ratings)
            .min_by_key(|i| self.counts[*i])?;
        self.mark_served(worker, pick);
        Some(pick)
    }

    pub fn mark_served(&mut self, worker: &str, index: usize) {
        self.served.entry(worker.to_string()).or_default().insert(index);
    }

    /// Checks that `worker` may answer trial `index` with `answer`.
    pub fn check(&self, manifest: &StudyManifest, worker: &str, index: usize, answer: Answer) -> Result<(), StudyError> {
        let trial = manifest.trials[index].trial_id.clone();
        if !answer.fits(manifest.design) {
            return Err(StudyError::BadAnswer { answer, design: manifest.design });
        }
        if self.answered.get(worker).is_some_and(|a| a.contains(&index)) {
            return Err(StudyError::Duplicate { worker: worker.to_string(), trial });
        }
        if !self.served.get(worker).is_some_and(|s| s.contains(&index)) {
            return Err(StudyError::Unserved { worker: worker.to_string(), trial });
        }
        Ok(())
    }

    /// Records an answer; a recorded answer also counts as served.
    pub fn record(&mut self, worker: &str, index: usize) {
        self.mark_served(worker, index);
        if self.answered.entry(worker.to_string()).or_default().insert(index) {
            self.counts[index] += 1;
        }
    }
}

/// A scene offered for export with its ground-truth image and one
/// generated image per model.
#[derive(Debug, Clone)]
pub struct ExportItem {
    pub name: String,
    pub graph: SceneGraph,
    pub ground_truth: RgbImage,
    pub generated: BTreeMap<String, RgbImage>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExportOptions {
    pub study_id: String,
    pub design: Design,
    /// Total trials, controls included.
    pub trials: usize,
    pub control_rate: f64,
    pub seed: u64,
    pub target_ratings: usize,
}

/// Manifest plus the media files it references, keyed by file name.
#[derive(Debug, Clone)]
pub struct ExportedStudy {
    pub manifest: StudyManifest,
    pub media: BTreeMap<String, Vec<u8>>,
}

/// Opaque content-addressed name for an image.
pub fn media_name(bytes: &[u8]) -> String {
    format!("{:x}.ppm", Sha256::digest(bytes))
}

/// Number of control trials among `total`: the rate, rounded.
pub fn control_count(total: usize, rate: f64) -> usize {
    ((total as f64 * rate).round() as usize).min(total)
}

fn scrambled<R: Rng + ?Sized>(img: &RgbImage, rng: &mut R) -> RgbImage {
    let mut pixels: Vec<[f64; 3]> = (0..img.width * img.height).map(|p| img.get(p % img.width, p / img.width)).collect();
    pixels.shuffle(rng);
    let mut out = img.clone();
    for (p, rgb) in pixels.into_iter().enumerate() {
        out.set(p % img.width, p / img.width, rgb);
    }
    out
}

fn caption(g: &SceneGraph, vocab: &Vocab) -> String {
    let parts: Vec<String> = g.triples.iter().filter(|t| t.predicate != 0).take(3).map(|t| to_pseudo_caption(t, g, vocab)).collect();
    parts.join(", ")
}

struct Builder {
    media: BTreeMap<String, Vec<u8>>,
}

impl Builder {
    fn add(&mut self, img: &RgbImage) -> String {
        let bytes = img.to_ppm_bytes();
        let name = media_name(&bytes);
        self.media.insert(name.clone(), bytes);
        name
    }
}

/// Builds a study: scored trials over `items` (each model per item for
/// MORS; one pair per item otherwise), about `control_rate` ground-truth
/// controls, all interleaved in a seeded order.
pub fn export_study(items: &[ExportItem], vocab: &Vocab, opts: &ExportOptions) -> Result<ExportedStudy, StudyError> {
    if !(0.0..=1.0).contains(&opts.control_rate) {
        return Err(StudyError::Invalid(format!("control rate {}", opts.control_rate)));
    }
    if items.is_empty() {
        return Err(StudyError::NotEnough("no items".into()));
    }
    let models: Vec<String> = items[0].generated.keys().cloned().collect();
    if items.iter().any(|it| it.generated.keys().ne(models.iter())) {
        return Err(StudyError::Invalid("every item needs an image from every model".into()));
    }
    if models.is_empty() || (opts.design != Design::Mors && models.len() != 2) {
        return Err(StudyError::Invalid(format!("a {} study needs {} models, got {}", opts.design, if opts.design == Design::Mors { "1 or more" } else { "2" }, models.len())));
    }
    let mut rng = scene_rng(opts.seed, 0);
    let n_controls = control_count(opts.trials, opts.control_rate);
    let n_scored = opts.trials - n_controls;
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut rng);
    let mut b = Builder { media: BTreeMap::new() };
    let mut trials = Vec::with_capacity(opts.trials);

    let mut slots = order.iter().flat_map(|&i| {
        let per_item = if opts.design == Design::Mors { models.len() } else { 1 };
        (0..per_item).map(move |m| (i, m))
    });
    for _ in 0..n_scored {
        let (i, m) = slots.next().ok_or_else(|| StudyError::NotEnough(format!("{} items cannot fill {n_scored} scored trials", items.len())))?;
        let it = &items[i];
        trials.push(match opts.design {
            Design::Mors => {
                let model = &models[m];
                let rels: Vec<_> = it.graph.triples.iter().filter(|t| t.predicate != 0).collect();
                let t = rels.get(rng.random_range(0..rels.len().max(1))).ok_or_else(|| StudyError::NotEnough(format!("item {} has no relationships", it.name)))?;
                StudyTrial {
                    trial_id: String::new(),
                    media: vec![b.add(&it.generated[model])],
                    prompt: to_pseudo_caption(t, &it.graph, vocab),
                    item_ref: item_ref(&it.name, &it.graph, vocab, t.subject, t.predicate, t.object),
                    side_a_model: model.clone(),
                    is_control: false,
                    control_truth: None,
                }
            }
            Design::AvB | Design::Abx => {
                let a = rng.random_range(0..2);
                let (ma, mb) = (&models[a], &models[1 - a]);
                let prompt = if opts.design == Design::AvB { AVB_PROMPT.to_string() } else { format!("{ABX_PROMPT} {}", caption(&it.graph, vocab)) };
                StudyTrial {
                    trial_id: String::new(),
                    media: vec![b.add(&it.generated[ma]), b.add(&it.generated[mb])],
                    prompt,
                    item_ref: it.name.clone(),
                    side_a_model: ma.clone(),
                    is_control: false,
                    control_truth: None,
                }
            }
        });
    }

    for k in 0..n_controls {
        let it = &items[order[k % order.len()]];
        trials.push(control_trial(it, items, vocab, opts.design, &mut b, &mut rng)?);
    }
    trials.shuffle(&mut rng);
    for (k, t) in trials.iter_mut().enumerate() {
        t.trial_id = format!("t{k:04}");
    }
    let manifest = StudyManifest {
        study_id: opts.study_id.clone(),
        design: opts.design,
        target_ratings: opts.target_ratings,
        seed: opts.seed,
        models,
        trials,
    };
    manifest.validate(None)?;
    Ok(ExportedStudy { manifest, media: b.media })
}

fn item_ref(name: &str, g: &SceneGraph, vocab: &Vocab, s: usize, p: usize, o: usize) -> String {
    format!("{name}|{}|{}|{}", vocab.object_name(g.nodes[s].category), vocab.predicate_name(p), vocab.object_name(g.nodes[o].category))
}

fn control_trial<R: Rng + ?Sized>(
    it: &ExportItem,
    items: &[ExportItem],
    vocab: &Vocab,
    design: Design,
    b: &mut Builder,
    rng: &mut R,
) -> Result<StudyTrial, StudyError> {
    let gt = b.add(&it.ground_truth);
    match design {
        Design::Mors => {
            let rels: Vec<_> = it.graph.triples.iter().filter(|t| t.predicate != 0).collect();
            let t = *rels.get(rng.random_range(0..rels.len().max(1))).ok_or_else(|| StudyError::NotEnough(format!("item {} has no relationships", it.name)))?;
            // A false statement swaps in the converse spatial predicate.
            let converse = SpatialPredicate::from_name(vocab.predicate_name(t.predicate)).and_then(|p| vocab.spatial_id(p.converse()));
            let (pred, truth) = match converse {
                Some(c) if rng.random_bool(0.5) => (c, Answer::No),
                _ => (t.predicate, Answer::Yes),
            };
            let mut shown = *t;
            shown.predicate = pred;
            Ok(StudyTrial {
                trial_id: String::new(),
                media: vec![gt],
                prompt: to_pseudo_caption(&shown, &it.graph, vocab),
                item_ref: item_ref(&it.name, &it.graph, vocab, t.subject, pred, t.object),
                side_a_model: GROUND_TRUTH.into(),
                is_control: true,
                control_truth: Some(truth),
            })
        }
        Design::AvB | Design::Abx => {
            let (other, other_model, prompt) = if design == Design::AvB {
                (b.add(&scrambled(&it.ground_truth, rng)), SCRAMBLED, AVB_PROMPT.to_string())
            } else {
                let j = items.iter().position(|x| x.name != it.name).ok_or_else(|| StudyError::NotEnough("caption controls need two items".into()))?;
                let j = (j + rng.random_range(0..items.len())) % items.len();
                let j = if items[j].name == it.name { (j + 1) % items.len() } else { j };
                (b.add(&items[j].ground_truth), GROUND_TRUTH, format!("{ABX_PROMPT} {}", caption(&it.graph, vocab)))
            };
            let gt_on_a = rng.random_bool(0.5);
            let (media, side_a, truth) =
                if gt_on_a { (vec![gt, other], GROUND_TRUTH, Answer::A) } else { (vec![other, gt], other_model, Answer::B) };
            Ok(StudyTrial {
                trial_id: String::new(),
                media,
                prompt,
                item_ref: it.name.clone(),
                side_a_model: side_a.into(),
                is_control: true,
                control_truth: Some(truth),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_shapes_world, ShapesWorldConfig};

    fn items(n: usize, models: &[&str]) -> (Vec<ExportItem>, Vocab) {
        let split = generate_shapes_world(&ShapesWorldConfig { seed: 3, scenes: n, image_size: 16, ..Default::default() }).unwrap();
        let items = split
            .examples
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let img = e.image.clone().unwrap();
                let generated = models.iter().enumerate().map(|(k, m)| (m.to_string(), RgbImage::filled(16, 16, [k as f64 / 4.0, i as f64 / n as f64, 0.5]))).collect();
                ExportItem { name: format!("scene{i:03}"), graph: e.graph.clone(), ground_truth: img, generated }
            })
            .collect();
        (items, split.vocab)
    }

    fn opts(design: Design, trials: usize) -> ExportOptions {
        ExportOptions { study_id: "s1".into(), design, trials, control_rate: 0.1, seed: 9, target_ratings: 5 }
    }

    #[test]
    fn hundred_trial_mors_has_ten_controls() {
        let (it, vocab) = items(60, &["ours", "base"]);
        let s = export_study(&it, &vocab, &opts(Design::Mors, 100)).unwrap();
        assert_eq!(s.manifest.trials.len(), 100);
        assert_eq!(s.manifest.control_count(), 10);
        for t in &s.manifest.trials {
            assert!(s.media.contains_key(&t.media[0]));
            assert_eq!(t.item_ref.split('|').count(), 4);
        }
        let again = export_study(&it, &vocab, &opts(Design::Mors, 100)).unwrap();
        assert_eq!(again.manifest, s.manifest);
    }

    #[test]
    fn forced_choice_controls_know_the_right_side() {
        for design in [Design::AvB, Design::Abx] {
            let (it, vocab) = items(30, &["ours", "base"]);
            let s = export_study(&it, &vocab, &opts(design, 30)).unwrap();
            assert_eq!(s.manifest.control_count(), 3);
            assert_eq!(s.manifest.model_pair(), Some(["base", "ours"]));
            for t in s.manifest.trials.iter().filter(|t| t.is_control) {
                let item = it.iter().find(|x| x.name == t.item_ref).unwrap();
                let side = if t.control_truth == Some(Answer::A) { 0 } else { 1 };
                assert_eq!(t.media[side], media_name(&item.ground_truth.to_ppm_bytes()));
                assert_ne!(t.media[1 - side], t.media[side]);
            }
        }
    }

    #[test]
    fn duplicate_trials_are_rejected() {
        let (it, vocab) = items(20, &["ours"]);
        let mut m = export_study(&it, &vocab, &opts(Design::Mors, 10)).unwrap().manifest;
        m.trials[1].trial_id = m.trials[0].trial_id.clone();
        assert!(matches!(m.validate(None), Err(StudyError::DuplicateTrial(_))));
    }

    #[test]
    fn missing_media_are_listed() {
        let (it, vocab) = items(20, &["ours"]);
        let m = export_study(&it, &vocab, &opts(Design::Mors, 10)).unwrap().manifest;
        let dir = tempfile::tempdir().unwrap();
        match m.validate(Some(dir.path())) {
            Err(StudyError::MissingMedia(list)) => assert!(!list.is_empty()),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn worker_orders_differ_but_cover_all_trials() {
        let (it, vocab) = items(40, &["ours"]);
        let m = export_study(&it, &vocab, &opts(Design::Mors, 40)).unwrap().manifest;
        let orders: Vec<Vec<usize>> = (0..5).map(|w| m.worker_order(&format!("w{w}"))).collect();
        for o in &orders {
            let mut s = o.clone();
            s.sort();
            assert_eq!(s, (0..40).collect::<Vec<_>>());
        }
        assert!(orders.windows(2).all(|w| w[0] != w[1]));
        assert_eq!(m.worker_order("w0"), orders[0]);
    }

    #[test]
    fn five_workers_rate_every_trial_five_times() {
        let (it, vocab) = items(30, &["ours"]);
        let m = export_study(&it, &vocab, &opts(Design::Mors, 20)).unwrap().manifest;
        let mut p = Progress::new(&m);
        let workers: Vec<String> = (0..6).map(|w| format!("w{w}")).collect();
        let first = m.worker_order("w0")[0];
        assert_eq!(p.next(&m, "w0"), Some(first));
        let mut active = true;
        while active {
            active = false;
            for w in &workers[..5] {
                if let Some(i) = p.next(&m, w) {
                    p.check(&m, w, i, Answer::Yes).unwrap();
                    p.record(w, i);
                    assert!(matches!(p.check(&m, w, i, Answer::Yes), Err(StudyError::Duplicate { .. })));
                    active = true;
                }
            }
        }
        assert!(p.counts().iter().all(|&c| c == 5));
        assert_eq!(p.next(&m, &workers[5]), None);
        assert!(matches!(p.check(&m, &workers[5], 0, Answer::Yes), Err(StudyError::Unserved { .. })));
    }

    #[test]
    fn payload_hides_models() {
        let (it, vocab) = items(20, &["ours", "base"]);
        let m = export_study(&it, &vocab, &opts(Design::AvB, 10)).unwrap().manifest;
        let text = serde_json::to_string(&m.payload(0)).unwrap();
        assert!(!text.contains("ours") && !text.contains("base") && !text.contains("is_control"));
    }
}
