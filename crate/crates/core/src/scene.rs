//! Scene-graph data model: vocabulary, boxes, masks, graphs, the JSON
//! interchange format and the box-pair spatial predicate shared by dataset
//! construction and layout evaluation.

use std::collections::HashMap;
use std::fmt;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

/// Name of the synthetic whole-image node. Always object id 0.
pub const IMAGE_OBJECT: &str = "__image__";
/// Predicate linking every real object to the image node. Always predicate id 0.
pub const IN_IMAGE_PREDICATE: &str = "__in_image__";

#[derive(Debug, thiserror::Error)]
pub enum GraphError {
    #[error("malformed scene-graph JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{location}: unknown object category {name:?}")]
    UnknownCategory { location: String, name: String },
    #[error("{location}: unknown predicate {name:?}")]
    UnknownPredicate { location: String, name: String },
    #[error("{location}: node index {index} out of range for {count} objects")]
    DanglingIndex {
        location: String,
        index: usize,
        count: usize,
    },
    #[error("{location}: triple relates node {index} to itself")]
    SelfLoop { location: String, index: usize },
    #[error("scene graph has no objects")]
    Empty,
    #[error("{location}: invalid box {coords:?}")]
    InvalidBox { location: String, coords: [f64; 4] },
    #[error("{location}: {message}")]
    Invalid { location: String, message: String },
    #[error("vocabulary error: {0}")]
    Vocab(String),
}

/// Object and predicate vocabularies with dense ids.
///
/// Object id 0 is always [`IMAGE_OBJECT`] and predicate id 0 is always
/// [`IN_IMAGE_PREDICATE`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    object_names: Vec<String>,
    predicate_names: Vec<String>,
    object_index: HashMap<String, usize>,
    predicate_index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    objects: Vec<String>,
    predicates: Vec<String>,
}

impl Vocab {
    /// Builds a vocabulary, inserting the reserved names at index 0 when
    /// the caller did not already put them there.
    pub fn new<S: Into<String>>(
        objects: impl IntoIterator<Item = S>,
        predicates: impl IntoIterator<Item = S>,
    ) -> Result<Self, GraphError> {
        let object_names = with_reserved(objects, IMAGE_OBJECT)?;
        let predicate_names = with_reserved(predicates, IN_IMAGE_PREDICATE)?;
        let object_index = index_of(&object_names)?;
        let predicate_index = index_of(&predicate_names)?;
        Ok(Self {
            object_names,
            predicate_names,
            object_index,
            predicate_index,
        })
    }

    pub fn from_json(text: &str) -> Result<Self, GraphError> {
        let file: VocabFile = serde_json::from_str(text)?;
        Self::new(file.objects, file.predicates)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&VocabFile {
            objects: self.object_names.clone(),
            predicates: self.predicate_names.clone(),
        })
        .expect("vocab serializes")
    }

    pub fn object_names(&self) -> &[String] {
        &self.object_names
    }

    pub fn predicate_names(&self) -> &[String] {
        &self.predicate_names
    }

    pub fn num_objects(&self) -> usize {
        self.object_names.len()
    }

    pub fn num_predicates(&self) -> usize {
        self.predicate_names.len()
    }

    pub fn object_id(&self, name: &str) -> Option<usize> {
        self.object_index.get(name).copied()
    }

    pub fn predicate_id(&self, name: &str) -> Option<usize> {
        self.predicate_index.get(name).copied()
    }

    pub fn object_name(&self, id: usize) -> &str {
        &self.object_names[id]
    }

    pub fn predicate_name(&self, id: usize) -> &str {
        &self.predicate_names[id]
    }

    /// Id of a spatial predicate, if the vocabulary carries it.
    pub fn spatial_id(&self, p: SpatialPredicate) -> Option<usize> {
        self.predicate_id(p.name())
    }

    /// Vocabulary with the given object names and the six spatial predicates.
    pub fn spatial<S: Into<String>>(objects: impl IntoIterator<Item = S>) -> Result<Self, GraphError> {
        Self::new(
            objects.into_iter().map(Into::into).collect::<Vec<String>>(),
            SpatialPredicate::ALL.iter().map(|p| p.name().to_string()).collect::<Vec<String>>(),
        )
    }
}

fn with_reserved<S: Into<String>>(
    names: impl IntoIterator<Item = S>,
    reserved: &str,
) -> Result<Vec<String>, GraphError> {
    let mut out: Vec<String> = names.into_iter().map(Into::into).collect();
    match out.iter().position(|n| n == reserved) {
        Some(0) => {}
        Some(i) => {
            return Err(GraphError::Vocab(format!(
                "reserved name {reserved:?} must be at index 0, found at {i}"
            )))
        }
        None => out.insert(0, reserved.to_string()),
    }
    Ok(out)
}

fn index_of(names: &[String]) -> Result<HashMap<String, usize>, GraphError> {
    let mut index = HashMap::with_capacity(names.len());
    for (i, name) in names.iter().enumerate() {
        if index.insert(name.clone(), i).is_some() {
            return Err(GraphError::Vocab(format!("duplicate name {name:?}")));
        }
    }
    Ok(index)
}

/// Axis-aligned box in normalized image coordinates, y pointing down.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BoundingBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Option<Self> {
        let b = Self { x0, y0, x1, y1 };
        b.is_valid().then_some(b)
    }

    /// Converts a pixel-space `[x, y, w, h]` box, clamping to the image.
    pub fn from_pixel_xywh(xywh: [f64; 4], width: f64, height: f64) -> Option<Self> {
        let [x, y, w, h] = xywh;
        Self::new(
            (x / width).clamp(0.0, 1.0),
            (y / height).clamp(0.0, 1.0),
            ((x + w) / width).clamp(0.0, 1.0),
            ((y + h) / height).clamp(0.0, 1.0),
        )
    }

    pub fn full() -> Self {
        Self { x0: 0.0, y0: 0.0, x1: 1.0, y1: 1.0 }
    }

    pub fn is_valid(&self) -> bool {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        in_unit(self.x0)
            && in_unit(self.y0)
            && in_unit(self.x1)
            && in_unit(self.y1)
            && self.x0 < self.x1
            && self.y0 < self.y1
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)
    }

    /// Containment with shared edges counting as contained.
    pub fn contains(&self, other: &BoundingBox) -> bool {
        self.x0 <= other.x0 && self.y0 <= other.y0 && self.x1 >= other.x1 && self.y1 >= other.y1
    }

    pub fn intersection_area(&self, other: &BoundingBox) -> f64 {
        let w = (self.x1.min(other.x1) - self.x0.max(other.x0)).max(0.0);
        let h = (self.y1.min(other.y1) - self.y0.max(other.y0)).max(0.0);
        w * h
    }

    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Mirror across the vertical image axis.
    pub fn hflip(&self) -> Self {
        Self { x0: 1.0 - self.x1, y0: self.y0, x1: 1.0 - self.x0, y1: self.y1 }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }
}

/// Row-major binary bitmap.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, bits: vec![false; width * height] }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Nearest-neighbour resample to `width × height`.
    pub fn resample(&self, width: usize, height: usize) -> Self {
        let mut out = Self::new(width, height);
        for y in 0..height {
            let sy = ((y as f64 + 0.5) * self.height as f64 / height as f64) as usize;
            for x in 0..width {
                let sx = ((x as f64 + 0.5) * self.width as f64 / width as f64) as usize;
                out.set(x, y, self.get(sx.min(self.width - 1), sy.min(self.height - 1)));
            }
        }
        out
    }

    pub fn hflip(&self) -> Self {
        let mut out = Self::new(self.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                out.set(self.width - 1 - x, y, self.get(x, y));
            }
        }
        out
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    /// Bits packed MSB-first into bytes, row-major, no row padding.
    pub fn pack(&self) -> Vec<u8> {
        let mut bytes = vec![0u8; self.bits.len().div_ceil(8)];
        for (i, _) in self.bits.iter().enumerate().filter(|(_, &b)| b) {
            bytes[i / 8] |= 0x80 >> (i % 8);
        }
        bytes
    }

    pub fn unpack(width: usize, height: usize, bytes: &[u8]) -> Option<Self> {
        let n = width * height;
        if bytes.len() != n.div_ceil(8) {
            return None;
        }
        let bits = (0..n).map(|i| bytes[i / 8] & (0x80 >> (i % 8)) != 0).collect();
        Some(Self { width, height, bits })
    }

    pub fn to_json(&self) -> Value {
        json!({ "width": self.width, "height": self.height, "data": BASE64.encode(self.pack()) })
    }

    pub fn from_json(v: &Value) -> Option<Self> {
        let width = v.get("width")?.as_u64()? as usize;
        let height = v.get("height")?.as_u64()? as usize;
        let data = BASE64.decode(v.get("data")?.as_str()?).ok()?;
        Self::unpack(width, height, &data)
    }
}

/// The six mutually exclusive geometric relations, in serialization order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SpatialPredicate {
    LeftOf,
    RightOf,
    Above,
    Below,
    Inside,
    Surrounding,
}

impl SpatialPredicate {
    pub const ALL: [SpatialPredicate; 6] = [
        SpatialPredicate::LeftOf,
        SpatialPredicate::RightOf,
        SpatialPredicate::Above,
        SpatialPredicate::Below,
        SpatialPredicate::Inside,
        SpatialPredicate::Surrounding,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SpatialPredicate::LeftOf => "left of",
            SpatialPredicate::RightOf => "right of",
            SpatialPredicate::Above => "above",
            SpatialPredicate::Below => "below",
            SpatialPredicate::Inside => "inside",
            SpatialPredicate::Surrounding => "surrounding",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|p| p.name() == name)
    }

    /// The predicate that holds with subject and object swapped.
    pub fn converse(self) -> Self {
        match self {
            SpatialPredicate::LeftOf => SpatialPredicate::RightOf,
            SpatialPredicate::RightOf => SpatialPredicate::LeftOf,
            SpatialPredicate::Above => SpatialPredicate::Below,
            SpatialPredicate::Below => SpatialPredicate::Above,
            SpatialPredicate::Inside => SpatialPredicate::Surrounding,
            SpatialPredicate::Surrounding => SpatialPredicate::Inside,
        }
    }

    /// The predicate that holds after a horizontal image flip.
    pub fn mirrored(self) -> Self {
        match self {
            SpatialPredicate::LeftOf => SpatialPredicate::RightOf,
            SpatialPredicate::RightOf => SpatialPredicate::LeftOf,
            other => other,
        }
    }
}

impl fmt::Display for SpatialPredicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Decides the relation of `subject` to `object`.
///
/// Containment wins first (subject containing object is `Surrounding`,
/// the reverse is `Inside`, ties on edges count as containment). Otherwise
/// the direction `d` from the subject centre to the object centre picks a
/// quadrant of `atan2(d.y, d.x)`: `|θ| ≤ π/4` left of, `(π/4, 3π/4]` above,
/// `(-3π/4, -π/4)` below, anything else right of. The quadrant test is done
/// with exact comparisons on `d` rather than through `atan2`, so boundary
/// directions land on the documented side regardless of rounding.
pub fn spatial_predicate(subject: &BoundingBox, object: &BoundingBox) -> SpatialPredicate {
    if subject.contains(object) {
        return SpatialPredicate::Surrounding;
    }
    if object.contains(subject) {
        return SpatialPredicate::Inside;
    }
    let (sx, sy) = subject.center();
    let (ox, oy) = object.center();
    let dx = ox - sx;
    let dy = oy - sy;
    if dx >= dy.abs() {
        SpatialPredicate::LeftOf
    } else if dy > 0.0 && dy > dx && dy >= -dx {
        SpatialPredicate::Above
    } else if -dy > dx.abs() {
        SpatialPredicate::Below
    } else {
        SpatialPredicate::RightOf
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectNode {
    pub category: usize,
    pub gt_box: Option<BoundingBox>,
    pub gt_mask: Option<BinaryMask>,
}

impl ObjectNode {
    pub fn new(category: usize) -> Self {
        Self { category, gt_box: None, gt_mask: None }
    }

    pub fn with_box(category: usize, bbox: BoundingBox) -> Self {
        Self { category, gt_box: Some(bbox), gt_mask: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RelationTriple {
    pub subject: usize,
    pub predicate: usize,
    pub object: usize,
}

impl RelationTriple {
    pub fn new(subject: usize, predicate: usize, object: usize) -> Self {
        Self { subject, predicate, object }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneGraph {
    pub nodes: Vec<ObjectNode>,
    pub triples: Vec<RelationTriple>,
}

impl SceneGraph {
    /// Checks structural invariants: at least one node, in-range non-self
    /// triple endpoints and valid boxes.
    pub fn new(nodes: Vec<ObjectNode>, triples: Vec<RelationTriple>) -> Result<Self, GraphError> {
        let g = Self { nodes, triples };
        g.check_structure()?;
        Ok(g)
    }

    fn check_structure(&self) -> Result<(), GraphError> {
        if self.nodes.is_empty() {
            return Err(GraphError::Empty);
        }
        let count = self.nodes.len();
        for (i, t) in self.triples.iter().enumerate() {
            for (slot, index) in [(0, t.subject), (2, t.object)] {
                if index >= count {
                    return Err(GraphError::DanglingIndex {
                        location: format!("triples[{i}][{slot}]"),
                        index,
                        count,
                    });
                }
            }
            if t.subject == t.object {
                return Err(GraphError::SelfLoop { location: format!("triples[{i}]"), index: t.subject });
            }
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if let Some(b) = n.gt_box {
                if !b.is_valid() {
                    return Err(GraphError::InvalidBox { location: format!("boxes[{i}]"), coords: b.to_array() });
                }
            }
        }
        Ok(())
    }

    /// Checks structure plus category and predicate ids against `vocab`.
    pub fn validate(&self, vocab: &Vocab) -> Result<(), GraphError> {
        self.check_structure()?;
        for (i, n) in self.nodes.iter().enumerate() {
            if n.category >= vocab.num_objects() {
                return Err(GraphError::UnknownCategory {
                    location: format!("objects[{i}]"),
                    name: format!("#{}", n.category),
                });
            }
        }
        for (i, t) in self.triples.iter().enumerate() {
            if t.predicate >= vocab.num_predicates() {
                return Err(GraphError::UnknownPredicate {
                    location: format!("triples[{i}][1]"),
                    name: format!("#{}", t.predicate),
                });
            }
        }
        Ok(())
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn image_node(&self) -> Option<usize> {
        self.nodes.iter().position(|n| n.category == 0)
    }

    /// Indices of the real (non-image) objects.
    pub fn real_objects(&self) -> impl Iterator<Item = usize> + '_ {
        self.nodes.iter().enumerate().filter(|(_, n)| n.category != 0).map(|(i, _)| i)
    }

    /// Returns a copy with the `__image__` node appended and every real
    /// object linked to it, unless the graph already has one.
    pub fn with_image_node(&self) -> SceneGraph {
        if self.image_node().is_some() {
            return self.clone();
        }
        let mut g = self.clone();
        let image = g.nodes.len();
        g.nodes.push(ObjectNode::with_box(0, BoundingBox::full()));
        for i in 0..image {
            g.triples.push(RelationTriple::new(i, 0, image));
        }
        g
    }

    /// Whether every node is touched by at least one triple.
    pub fn all_nodes_connected(&self) -> bool {
        let mut seen = vec![false; self.nodes.len()];
        for t in &self.triples {
            seen[t.subject] = true;
            seen[t.object] = true;
        }
        seen.into_iter().all(|s| s)
    }

    pub fn gt_boxes(&self) -> Option<Vec<BoundingBox>> {
        self.nodes.iter().map(|n| n.gt_box).collect()
    }

    /// Horizontal flip of boxes and masks with left/right predicates swapped.
    pub fn hflip(&self, vocab: &Vocab) -> SceneGraph {
        let nodes = self
            .nodes
            .iter()
            .map(|n| ObjectNode {
                category: n.category,
                gt_box: n.gt_box.map(|b| b.hflip()),
                gt_mask: n.gt_mask.as_ref().map(BinaryMask::hflip),
            })
            .collect();
        let triples = self
            .triples
            .iter()
            .map(|t| {
                let predicate = SpatialPredicate::from_name(vocab.predicate_name(t.predicate))
                    .and_then(|p| vocab.spatial_id(p.mirrored()))
                    .unwrap_or(t.predicate);
                RelationTriple { predicate, ..*t }
            })
            .collect();
        SceneGraph { nodes, triples }
    }
}

#[derive(Deserialize)]
struct RawGraph {
    objects: Vec<String>,
    triples: Vec<(usize, String, usize)>,
    #[serde(default)]
    boxes: Option<Vec<Option<[f64; 4]>>>,
    #[serde(default)]
    masks: Option<Vec<Option<Value>>>,
}

/// Parses the scene-graph JSON interchange format, resolving names via `vocab`.
pub fn parse_scene_graph(text: &str, vocab: &Vocab) -> Result<SceneGraph, GraphError> {
    let raw: RawGraph = serde_json::from_str(text)?;
    let mut nodes = Vec::with_capacity(raw.objects.len());
    for (i, name) in raw.objects.iter().enumerate() {
        let category = vocab.object_id(name).ok_or_else(|| GraphError::UnknownCategory {
            location: format!("objects[{i}]"),
            name: name.clone(),
        })?;
        nodes.push(ObjectNode::new(category));
    }
    if let Some(boxes) = raw.boxes {
        if boxes.len() != nodes.len() {
            return Err(GraphError::Invalid {
                location: "boxes".into(),
                message: format!("{} boxes for {} objects", boxes.len(), nodes.len()),
            });
        }
        for (i, b) in boxes.into_iter().enumerate() {
            if let Some(c) = b {
                let bbox = BoundingBox::new(c[0], c[1], c[2], c[3])
                    .ok_or(GraphError::InvalidBox { location: format!("boxes[{i}]"), coords: c })?;
                nodes[i].gt_box = Some(bbox);
            }
        }
    }
    if let Some(masks) = raw.masks {
        if masks.len() != nodes.len() {
            return Err(GraphError::Invalid {
                location: "masks".into(),
                message: format!("{} masks for {} objects", masks.len(), nodes.len()),
            });
        }
        for (i, m) in masks.into_iter().enumerate() {
            if let Some(v) = m {
                let mask = BinaryMask::from_json(&v).ok_or_else(|| GraphError::Invalid {
                    location: format!("masks[{i}]"),
                    message: "expected {width, height, data} with matching base64 bitmap".into(),
                })?;
                nodes[i].gt_mask = Some(mask);
            }
        }
    }
    let mut triples = Vec::with_capacity(raw.triples.len());
    for (i, (s, p, o)) in raw.triples.iter().enumerate() {
        let predicate = vocab.predicate_id(p).ok_or_else(|| GraphError::UnknownPredicate {
            location: format!("triples[{i}][1]"),
            name: p.clone(),
        })?;
        triples.push(RelationTriple::new(*s, predicate, *o));
    }
    SceneGraph::new(nodes, triples)
}

/// Canonical JSON value: sorted keys, triples in graph order, `boxes` and
/// `masks` present only when some node carries one.
pub fn scene_graph_value(g: &SceneGraph, vocab: &Vocab) -> Value {
    let objects: Vec<&str> = g.nodes.iter().map(|n| vocab.object_name(n.category)).collect();
    let triples: Vec<Value> = g
        .triples
        .iter()
        .map(|t| json!([t.subject, vocab.predicate_name(t.predicate), t.object]))
        .collect();
    let mut map = serde_json::Map::new();
    if g.nodes.iter().any(|n| n.gt_box.is_some()) {
        let boxes: Vec<Value> =
            g.nodes.iter().map(|n| n.gt_box.map_or(Value::Null, |b| json!(b.to_array()))).collect();
        map.insert("boxes".into(), Value::Array(boxes));
    }
    if g.nodes.iter().any(|n| n.gt_mask.is_some()) {
        let masks: Vec<Value> =
            g.nodes.iter().map(|n| n.gt_mask.as_ref().map_or(Value::Null, BinaryMask::to_json)).collect();
        map.insert("masks".into(), Value::Array(masks));
    }
    map.insert("objects".into(), json!(objects));
    map.insert("triples".into(), Value::Array(triples));
    Value::Object(map)
}

pub fn serialize_scene_graph(g: &SceneGraph, vocab: &Vocab) -> String {
    serde_json::to_string(&scene_graph_value(g, vocab)).expect("scene graph serializes")
}

/// `"<subject> <predicate> <object>"` using vocabulary names.
pub fn to_pseudo_caption(t: &RelationTriple, g: &SceneGraph, vocab: &Vocab) -> String {
    format!(
        "{} {} {}",
        vocab.object_name(g.nodes[t.subject].category),
        vocab.predicate_name(t.predicate),
        vocab.object_name(g.nodes[t.object].category)
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bb(x0: f64, y0: f64, x1: f64, y1: f64) -> BoundingBox {
        BoundingBox::new(x0, y0, x1, y1).unwrap()
    }

    fn sky_vocab() -> Vocab {
        Vocab::new(
            ["sky", "grass", "person", "tree", "dog"],
            ["above", "below", "left of", "on top of"],
        )
        .unwrap()
    }

    #[test]
    fn minimal_document_parses() {
        let v = sky_vocab();
        let g = parse_scene_graph(r#"{"objects":["sky","grass"],"triples":[[0,"above",1]]}"#, &v).unwrap();
        assert_eq!(g.num_nodes(), 2);
        assert_eq!(g.triples.len(), 1);
        assert_eq!(g.triples[0], RelationTriple::new(0, v.predicate_id("above").unwrap(), 1));
    }

    #[test]
    fn unknown_predicate_names_the_string() {
        let err = parse_scene_graph(r#"{"objects":["sky","grass"],"triples":[[0,"abov",1]]}"#, &sky_vocab())
            .unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, GraphError::UnknownPredicate { .. }));
        assert!(msg.contains("\"abov\"") && msg.contains("triples[0][1]"), "{msg}");
    }

    #[test]
    fn unknown_category_and_dangling_index() {
        let v = sky_vocab();
        let err = parse_scene_graph(r#"{"objects":["sky","cat"],"triples":[]}"#, &v).unwrap_err();
        assert!(err.to_string().contains("objects[1]"));
        let err = parse_scene_graph(r#"{"objects":["sky"],"triples":[[0,"above",3]]}"#, &v).unwrap_err();
        assert!(matches!(err, GraphError::DanglingIndex { index: 3, .. }));
        let err = parse_scene_graph(r#"{"objects":["sky""#, &v).unwrap_err();
        assert!(matches!(err, GraphError::Json(_)));
        let err = parse_scene_graph(r#"{"objects":[],"triples":[]}"#, &v).unwrap_err();
        assert!(matches!(err, GraphError::Empty));
    }

    #[test]
    fn serialization_matches_quoted_document() {
        let v = sky_vocab();
        let text = r#"{"objects":["sky","grass"],"triples":[[0,"above",1]]}"#;
        let g = parse_scene_graph(text, &v).unwrap();
        assert_eq!(serialize_scene_graph(&g, &v), text);
        let empty = SceneGraph::new(vec![ObjectNode::new(1)], vec![]).unwrap();
        assert_eq!(serialize_scene_graph(&empty, &v), r#"{"objects":["sky"],"triples":[]}"#);
    }

    #[test]
    fn boxes_and_masks_round_trip() {
        let v = sky_vocab();
        let mut mask = BinaryMask::new(5, 3);
        mask.set(1, 1, true);
        mask.set(4, 2, true);
        let mut a = ObjectNode::with_box(1, bb(0.1, 0.2, 0.3, 0.4));
        a.gt_mask = Some(mask);
        let g = SceneGraph::new(vec![a, ObjectNode::new(2)], vec![RelationTriple::new(0, 1, 1)]).unwrap();
        let text = serialize_scene_graph(&g, &v);
        assert_eq!(parse_scene_graph(&text, &v).unwrap(), g);
    }

    #[test]
    fn spatial_predicate_examples() {
        use SpatialPredicate::*;
        assert_eq!(spatial_predicate(&bb(0.1, 0.4, 0.3, 0.6), &bb(0.7, 0.4, 0.9, 0.6)), LeftOf);
        assert_eq!(spatial_predicate(&bb(0.0, 0.0, 1.0, 1.0), &bb(0.4, 0.4, 0.6, 0.6)), Surrounding);
        assert_eq!(spatial_predicate(&bb(0.4, 0.4, 0.6, 0.6), &bb(0.0, 0.0, 1.0, 1.0)), Inside);
        assert_eq!(spatial_predicate(&bb(0.4, 0.7, 0.6, 0.9), &bb(0.4, 0.1, 0.6, 0.3)), Below);
    }

    #[test]
    fn quadrant_boundaries_follow_tie_rule() {
        use SpatialPredicate::*;
        let s = bb(0.375, 0.375, 0.625, 0.625);
        let at = |dx: f64, dy: f64| bb(0.375 + dx, 0.375 + dy, 0.625 + dx, 0.625 + dy);
        // θ = π/4, 3π/4, -3π/4, -π/4 with y down.
        assert_eq!(spatial_predicate(&s, &at(0.25, 0.25)), LeftOf);
        assert_eq!(spatial_predicate(&s, &at(-0.25, 0.25)), Above);
        assert_eq!(spatial_predicate(&s, &at(-0.25, -0.25)), RightOf);
        assert_eq!(spatial_predicate(&s, &at(0.25, -0.25)), LeftOf);
        assert_eq!(spatial_predicate(&s, &at(-0.25, 0.0)), RightOf);
        // Identical boxes contain each other; subject containment wins.
        assert_eq!(spatial_predicate(&s, &s), Surrounding);
    }

    #[test]
    fn pseudo_captions() {
        let v = Vocab::new(["person", "grass", "sky"], ["on top of", "above"]).unwrap();
        let g = SceneGraph::new(
            vec![ObjectNode::new(1), ObjectNode::new(2), ObjectNode::new(3)],
            vec![RelationTriple::new(0, 1, 1), RelationTriple::new(2, 2, 1)],
        )
        .unwrap();
        assert_eq!(to_pseudo_caption(&g.triples[0], &g, &v), "person on top of grass");
        assert_eq!(to_pseudo_caption(&g.triples[1], &g, &v), "sky above grass");
    }

    #[test]
    fn vocab_reserves_index_zero() {
        let v = Vocab::new(["a", "b"], ["p"]).unwrap();
        assert_eq!(v.object_name(0), IMAGE_OBJECT);
        assert_eq!(v.predicate_name(0), IN_IMAGE_PREDICATE);
        assert_eq!(Vocab::from_json(&v.to_json()).unwrap(), v);
        assert!(Vocab::new(["a", "a"], ["p"]).is_err());
        assert!(Vocab::new(["a", IMAGE_OBJECT], ["p"]).is_err());
    }

    #[test]
    fn image_node_connects_everything() {
        let g = SceneGraph::new(vec![ObjectNode::new(1), ObjectNode::new(2), ObjectNode::new(3)], vec![]).unwrap();
        assert!(!g.all_nodes_connected());
        let aug = g.with_image_node();
        assert!(aug.all_nodes_connected());
        assert_eq!(aug.num_nodes(), 4);
        assert_eq!(aug.with_image_node(), aug);
        assert_eq!(aug.real_objects().collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn mask_pack_unpack() {
        let mut m = BinaryMask::new(3, 3);
        m.set(0, 0, true);
        m.set(2, 2, true);
        assert_eq!(m.pack(), vec![0b1000_0000, 0b1000_0000]);
        assert_eq!(BinaryMask::unpack(3, 3, &m.pack()).unwrap(), m);
        assert!(BinaryMask::unpack(3, 3, &[0]).is_none());
    }
}
