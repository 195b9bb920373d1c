//! Evaluation: relation score, average IoU, relation categories, rating
//! records and study aggregation (MORS, AvB, AB-X).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::scene::{spatial_predicate, BoundingBox, SceneGraph, SpatialPredicate, Vocab};

/// Reference values reported for full-scale training. They document what
/// the metrics measured at scale and are not targets for this code base.
pub mod reference {
    pub const RELATION_SCORE_COCO: (f64, f64) = (0.536, 0.512);
    pub const AVG_IOU_COCO: (f64, f64) = (0.483, 0.459);
    pub const AVG_IOU_VG: (f64, f64) = (0.234, 0.223);
    pub const MORS_OVERALL: (f64, f64) = (0.74, 0.64);
    pub const MORS_SEMANTIC: (f64, f64) = (0.78, 0.60);
    pub const MORS_GEOMETRIC: (f64, f64) = (0.68, 0.64);
    pub const MORS_POSSESSIVE: (f64, f64) = (0.80, 0.62);
    pub const MORS_MISCELLANEOUS: (f64, f64) = (0.86, 0.78);
    /// AB-X preference on COCO with ground-truth layouts.
    pub const ABX_COCO_GT_LAYOUT: (f64, f64) = (0.605, 0.395);
    /// Control-trial accuracies observed across the reported studies.
    pub const CONTROL_ACCURACIES: [f64; 7] = [0.972, 0.916, 0.945, 0.932, 0.833, 0.836, 0.864];
}

/// Default minimum control accuracy for keeping a worker.
pub const DEFAULT_MIN_CONTROL_ACCURACY: f64 = 0.8;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("graph {graph}, triple {triple}: predicate {predicate:?} is not spatial; use MORS for such relations")]
    NonSpatial { graph: usize, triple: usize, predicate: String },
    #[error("{what}: {left} vs {right} entries")]
    LengthMismatch { what: &'static str, left: usize, right: usize },
    #[error("no {0} to score")]
    Empty(&'static str),
    #[error("ratings CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("trial {0} has no side-assignment metadata")]
    MissingSide(String),
    #[error("cannot tell the two compared models apart: {0}")]
    Models(String),
    #[error("record {trial}: {message}")]
    Record { trial: String, message: String },
    #[error("category map: {0}")]
    CategoryMap(#[from] serde_json::Error),
}

/// Satisfied and total spatial triples.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct RelationTally {
    pub satisfied: usize,
    pub total: usize,
}

impl RelationTally {
    pub fn score(&self) -> Option<f64> {
        (self.total > 0).then(|| self.satisfied as f64 / self.total as f64)
    }
}

/// Counts the triples of each graph whose predicate holds between the given
/// boxes. `boxes[i]` holds one box per node of graph `i`; in-image triples
/// are structural and skipped, any other non-spatial predicate is an error.
pub fn relation_tally(graphs: &[&SceneGraph], boxes: &[Vec<BoundingBox>], vocab: &Vocab) -> Result<RelationTally, MetricsError> {
    if graphs.len() != boxes.len() {
        return Err(MetricsError::LengthMismatch { what: "graphs vs box lists", left: graphs.len(), right: boxes.len() });
    }
    let mut tally = RelationTally::default();
    for (gi, (g, b)) in graphs.iter().zip(boxes).enumerate() {
        if b.len() != g.nodes.len() {
            return Err(MetricsError::LengthMismatch { what: "nodes vs boxes", left: g.nodes.len(), right: b.len() });
        }
        for (ti, t) in g.triples.iter().enumerate() {
            if t.predicate == 0 {
                continue;
            }
            let name = vocab.predicate_name(t.predicate);
            let p = SpatialPredicate::from_name(name).ok_or_else(|| MetricsError::NonSpatial {
                graph: gi,
                triple: ti,
                predicate: name.to_string(),
            })?;
            tally.total += 1;
            if spatial_predicate(&b[t.subject], &b[t.object]) == p {
                tally.satisfied += 1;
            }
        }
    }
    Ok(tally)
}

/// Fraction of spatial relationships satisfied by the layout.
pub fn relation_score(graphs: &[&SceneGraph], boxes: &[Vec<BoundingBox>], vocab: &Vocab) -> Result<f64, MetricsError> {
    relation_tally(graphs, boxes, vocab)?.score().ok_or(MetricsError::Empty("spatial triples"))
}

/// Uniformly random box: both corners per axis drawn uniformly and sorted.
pub fn random_box<R: Rng + ?Sized>(rng: &mut R) -> BoundingBox {
    loop {
        let (a, b): (f64, f64) = (rng.random(), rng.random());
        let (c, d): (f64, f64) = (rng.random(), rng.random());
        if let Some(bx) = BoundingBox::new(a.min(b), c.min(d), a.max(b), c.max(d)) {
            return bx;
        }
    }
}

/// Expected relation score of uniformly random placement, estimated over
/// `samples` independent layouts of the same graphs.
pub fn random_baseline<R: Rng + ?Sized>(graphs: &[&SceneGraph], vocab: &Vocab, samples: usize, rng: &mut R) -> Result<f64, MetricsError> {
    let mut tally = RelationTally::default();
    for _ in 0..samples {
        let boxes: Vec<Vec<BoundingBox>> = graphs.iter().map(|g| g.nodes.iter().map(|_| random_box(rng)).collect()).collect();
        let t = relation_tally(graphs, &boxes, vocab)?;
        tally.satisfied += t.satisfied;
        tally.total += t.total;
    }
    tally.score().ok_or(MetricsError::Empty("spatial triples"))
}

/// Mean IoU over aligned box lists.
pub fn avg_iou(pred: &[BoundingBox], gt: &[BoundingBox]) -> Result<f64, MetricsError> {
    if pred.len() != gt.len() {
        return Err(MetricsError::LengthMismatch { what: "predicted vs ground-truth boxes", left: pred.len(), right: gt.len() });
    }
    if pred.is_empty() {
        return Err(MetricsError::Empty("boxes"));
    }
    Ok(pred.iter().zip(gt).map(|(a, b)| a.iou(b)).sum::<f64>() / pred.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RelationCategory {
    Semantic,
    Geometric,
    Possessive,
    Miscellaneous,
}

impl RelationCategory {
    pub const ALL: [RelationCategory; 4] = [
        RelationCategory::Semantic,
        RelationCategory::Geometric,
        RelationCategory::Possessive,
        RelationCategory::Miscellaneous,
    ];
}

const SEMANTIC: [&str; 11] = [
    "covering",
    "eating",
    "standing on",
    "carrying",
    "looking at",
    "walking on",
    "sitting on",
    "sitting in",
    "standing in",
    "holding",
    "riding",
];
const GEOMETRIC: [&str; 20] = [
    "next to",
    "above",
    "beside",
    "behind",
    "by",
    "laying on",
    "hanging on",
    "under",
    "on",
    "below",
    "against",
    "attached to",
    "near",
    "on top of",
    "at",
    "in front of",
    "around",
    "along",
    "on side of",
    "parked on",
];
const POSSESSIVE: [&str; 10] =
    ["has", "belonging to", "inside", "with", "over", "covered in", "have", "in", "wears", "wearing"];
const MISCELLANEOUS: [&str; 4] = ["and", "for", "of", "made of"];

/// Predicate name → category. Unknown names fall back to Miscellaneous.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CategoryMap(pub BTreeMap<String, RelationCategory>);

impl Default for CategoryMap {
    fn default() -> Self {
        let mut m = BTreeMap::new();
        for (names, cat) in [
            (&SEMANTIC[..], RelationCategory::Semantic),
            (&GEOMETRIC[..], RelationCategory::Geometric),
            (&POSSESSIVE[..], RelationCategory::Possessive),
            (&MISCELLANEOUS[..], RelationCategory::Miscellaneous),
        ] {
            for n in names {
                m.insert(n.to_string(), cat);
            }
        }
        Self(m)
    }
}

impl CategoryMap {
    pub fn categorize(&self, predicate: &str) -> RelationCategory {
        self.0.get(predicate).copied().unwrap_or(RelationCategory::Miscellaneous)
    }

    pub fn from_json(text: &str) -> Result<Self, MetricsError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("map serializes")
    }
}

pub fn categorize_relation(predicate: &str) -> RelationCategory {
    CategoryMap::default().categorize(predicate)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Design {
    #[serde(rename = "MORS")]
    Mors,
    #[serde(rename = "AvB")]
    AvB,
    #[serde(rename = "ABX")]
    Abx,
}

impl Design {
    pub fn as_str(self) -> &'static str {
        match self {
            Design::Mors => "MORS",
            Design::AvB => "AvB",
            Design::Abx => "ABX",
        }
    }

    pub fn is_forced_choice(self) -> bool {
        self != Design::Mors
    }
}

impl fmt::Display for Design {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Design {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "mors" => Ok(Design::Mors),
            "avb" => Ok(Design::AvB),
            "abx" | "ab-x" => Ok(Design::Abx),
            _ => Err(format!("unknown study design {s:?} (expected MORS, AvB or ABX)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Answer {
    #[serde(rename = "yes")]
    Yes,
    #[serde(rename = "no")]
    No,
    A,
    B,
}

impl Answer {
    pub fn as_str(self) -> &'static str {
        match self {
            Answer::Yes => "yes",
            Answer::No => "no",
            Answer::A => "A",
            Answer::B => "B",
        }
    }

    pub fn fits(self, design: Design) -> bool {
        matches!((design, self), (Design::Mors, Answer::Yes | Answer::No) | (Design::AvB | Design::Abx, Answer::A | Answer::B))
    }
}

impl FromStr for Answer {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "yes" => Ok(Answer::Yes),
            "no" => Ok(Answer::No),
            "A" => Ok(Answer::A),
            "B" => Ok(Answer::B),
            _ => Err(format!("unknown answer {s:?}")),
        }
    }
}

/// One row of the ratings log.
///
/// For MORS, `item_ref` is `image|subject|predicate|object` and
/// `side_a_model` names the model that produced the image. For forced
/// choice, `side_a_model` names the model shown on side A.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingRecord {
    pub worker_id: String,
    pub trial_id: String,
    pub design: Design,
    pub item_ref: String,
    pub side_a_model: String,
    pub answer: Answer,
    pub is_control: bool,
    pub control_truth: Option<Answer>,
}

/// Column order of the ratings CSV.
pub const RATINGS_HEADER: [&str; 8] =
    ["worker_id", "trial_id", "design", "item_ref", "side_a_model", "answer", "is_control", "control_truth"];

impl RatingRecord {
    pub fn validate(&self) -> Result<(), MetricsError> {
        let err = |m: &str| Err(MetricsError::Record { trial: self.trial_id.clone(), message: m.to_string() });
        if self.is_control != self.control_truth.is_some() {
            return err("control truth must be present exactly for control trials");
        }
        if !self.answer.fits(self.design) || self.control_truth.is_some_and(|t| !t.fits(self.design)) {
            return err("answer does not fit the study design");
        }
        Ok(())
    }

    pub fn control_correct(&self) -> Option<bool> {
        self.control_truth.map(|t| t == self.answer)
    }
}

pub fn read_ratings<R: Read>(input: R) -> Result<Vec<RatingRecord>, MetricsError> {
    let mut rdr = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for rec in rdr.deserialize() {
        let rec: RatingRecord = rec?;
        rec.validate()?;
        out.push(rec);
    }
    Ok(out)
}

/// Appends rows without a header.
pub fn append_ratings<W: Write>(out: W, records: &[RatingRecord]) -> Result<(), MetricsError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn write_ratings<W: Write>(mut out: W, records: &[RatingRecord]) -> Result<(), MetricsError> {
    writeln!(out, "{}", RATINGS_HEADER.join(",")).map_err(csv::Error::from)?;
    append_ratings(out, records)
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ExcludedWorker {
    pub worker_id: String,
    pub controls_correct: usize,
    pub controls_total: usize,
}

/// Drops every record of workers whose control accuracy is below
/// `min_accuracy`. Workers who saw no control trial are kept.
pub fn filter_workers(records: &[RatingRecord], min_accuracy: f64) -> (Vec<RatingRecord>, Vec<ExcludedWorker>) {
    let mut stats: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for r in records {
        if let Some(ok) = r.control_correct() {
            let e = stats.entry(&r.worker_id).or_default();
            e.0 += ok as usize;
            e.1 += 1;
        }
    }
    let excluded: Vec<ExcludedWorker> = stats
        .iter()
        .filter(|(_, (c, t))| (*c as f64) < min_accuracy * *t as f64)
        .map(|(w, (c, t))| ExcludedWorker { worker_id: w.to_string(), controls_correct: *c, controls_total: *t })
        .collect();
    let drop: BTreeSet<&str> = excluded.iter().map(|e| e.worker_id.as_str()).collect();
    let kept = records.iter().filter(|r| !drop.contains(r.worker_id.as_str())).cloned().collect();
    (kept, excluded)
}

/// Aggregated study outcome. Scores are fractions in `[0, 1]`: the MORS of
/// each model, or each model's share of forced-choice votes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyResult {
    pub design: Design,
    pub scores: BTreeMap<String, f64>,
    /// MORS only: per-model, per-category scores.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub categories: BTreeMap<String, BTreeMap<RelationCategory, f64>>,
    /// Items (MORS) or votes (forced choice) counted per model.
    pub counts: BTreeMap<String, usize>,
    pub ratings: usize,
    pub workers: usize,
    pub excluded_workers: Vec<ExcludedWorker>,
}

impl StudyResult {
    /// Canonical JSON used by both the CLI and the rating service.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("result serializes")
    }
}

fn predicate_of(item_ref: &str) -> Option<&str> {
    let parts: Vec<&str> = item_ref.split('|').collect();
    (parts.len() == 4).then_some(parts[2])
}

fn count_workers(records: &[RatingRecord]) -> usize {
    records.iter().map(|r| r.worker_id.as_str()).collect::<BTreeSet<_>>().len()
}

/// MORS per model: each `(model, item)` gets a majority verdict (ties count
/// as absent); the score is the fraction of items judged present. Control
/// trials are not scored.
pub fn aggregate_mors(records: &[RatingRecord], categories: &CategoryMap) -> Result<StudyResult, MetricsError> {
    let mut votes: BTreeMap<(&str, &str), (usize, usize)> = BTreeMap::new();
    let mut scored = 0;
    for r in records.iter().filter(|r| !r.is_control) {
        if r.design != Design::Mors {
            return Err(MetricsError::Record { trial: r.trial_id.clone(), message: format!("{} record in a MORS study", r.design) });
        }
        if r.side_a_model.is_empty() {
            return Err(MetricsError::MissingSide(r.trial_id.clone()));
        }
        let e = votes.entry((&r.side_a_model, &r.item_ref)).or_default();
        match r.answer {
            Answer::Yes => e.0 += 1,
            _ => e.1 += 1,
        }
        scored += 1;
    }
    if votes.is_empty() {
        return Err(MetricsError::Empty("MORS ratings"));
    }
    let mut per_model: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let mut per_cat: BTreeMap<String, BTreeMap<RelationCategory, (usize, usize)>> = BTreeMap::new();
    for ((model, item), (yes, no)) in &votes {
        let present = yes > no;
        let e = per_model.entry(model.to_string()).or_default();
        e.0 += present as usize;
        e.1 += 1;
        let cat = categories.categorize(predicate_of(item).unwrap_or(""));
        let c = per_cat.entry(model.to_string()).or_default().entry(cat).or_default();
        c.0 += present as usize;
        c.1 += 1;
    }
    Ok(StudyResult {
        design: Design::Mors,
        scores: per_model.iter().map(|(m, (p, n))| (m.clone(), *p as f64 / *n as f64)).collect(),
        categories: per_cat
            .into_iter()
            .map(|(m, cats)| (m, cats.into_iter().map(|(c, (p, n))| (c, p as f64 / n as f64)).collect()))
            .collect(),
        counts: per_model.iter().map(|(m, (_, n))| (m.clone(), *n)).collect(),
        ratings: scored,
        workers: count_workers(records),
        excluded_workers: Vec::new(),
    })
}

/// Vote share per model after unblinding which model was on side A. The
/// two models come from `models` or, when absent, from the distinct
/// side-A names of the scored trials. Control trials are not scored.
pub fn aggregate_forced_choice(records: &[RatingRecord], models: Option<[&str; 2]>) -> Result<StudyResult, MetricsError> {
    let scored: Vec<&RatingRecord> = records.iter().filter(|r| !r.is_control).collect();
    let design = scored.first().map(|r| r.design).ok_or(MetricsError::Empty("forced-choice ratings"))?;
    if !design.is_forced_choice() {
        return Err(MetricsError::Record { trial: scored[0].trial_id.clone(), message: "MORS record in a forced-choice study".into() });
    }
    for r in &scored {
        if r.side_a_model.is_empty() {
            return Err(MetricsError::MissingSide(r.trial_id.clone()));
        }
        if r.design != design {
            return Err(MetricsError::Record { trial: r.trial_id.clone(), message: "mixed study designs".into() });
        }
    }
    let pair: Vec<String> = match models {
        Some(m) => m.iter().map(|s| s.to_string()).collect(),
        None => scored.iter().map(|r| r.side_a_model.clone()).collect::<BTreeSet<_>>().into_iter().collect(),
    };
    if pair.len() != 2 || pair[0] == pair[1] {
        return Err(MetricsError::Models(format!("found {pair:?}")));
    }
    let mut counts: BTreeMap<String, usize> = pair.iter().map(|m| (m.clone(), 0)).collect();
    for r in &scored {
        let other = if r.side_a_model == pair[0] {
            &pair[1]
        } else if r.side_a_model == pair[1] {
            &pair[0]
        } else {
            return Err(MetricsError::Models(format!("trial {} names unknown model {:?}", r.trial_id, r.side_a_model)));
        };
        let winner = if r.answer == Answer::A { &r.side_a_model } else { other };
        *counts.get_mut(winner).unwrap() += 1;
    }
    let total = scored.len() as f64;
    Ok(StudyResult {
        design,
        scores: counts.iter().map(|(m, c)| (m.clone(), *c as f64 / total)).collect(),
        categories: BTreeMap::new(),
        counts,
        ratings: scored.len(),
        workers: count_workers(records),
        excluded_workers: Vec::new(),
    })
}

/// Worker filtering followed by the design's aggregator. This is the only
/// path used to produce study results.
pub fn aggregate_study(
    records: &[RatingRecord],
    min_control_accuracy: f64,
    categories: &CategoryMap,
    models: Option<[&str; 2]>,
) -> Result<StudyResult, MetricsError> {
    let design = records.first().map(|r| r.design).ok_or(MetricsError::Empty("ratings"))?;
    let (kept, excluded) = filter_workers(records, min_control_accuracy);
    let mut result = if design == Design::Mors { aggregate_mors(&kept, categories)? } else { aggregate_forced_choice(&kept, models)? };
    result.excluded_workers = excluded;
    Ok(result)
}
