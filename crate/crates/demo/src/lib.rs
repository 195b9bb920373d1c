//! Browser bindings for three operations: the spatial predicate of two
//! boxes, shapes-world scene generation, and relation scoring of a layout.
//!
//! Every function takes and returns plain values or JSON strings; errors
//! come back as strings.

use serde_json::{json, Value};
use sgctx_core::dataset::{generate_scene, ShapesWorldConfig};
use sgctx_core::metrics::{avg_iou, relation_tally};
use sgctx_core::scene::{parse_scene_graph, scene_graph_value, spatial_predicate, BoundingBox, SpatialPredicate};
use wasm_bindgen::prelude::wasm_bindgen;

fn parse_box(c: &[f64]) -> Result<BoundingBox, String> {
    match c {
        [x0, y0, x1, y1] => BoundingBox::new(*x0, *y0, *x1, *y1).ok_or_else(|| format!("invalid box {c:?}")),
        _ => Err(format!("a box has 4 coordinates, got {}", c.len())),
    }
}

/// Relation of `subject` to `object`, each given as `[x0, y0, x1, y1]` in
/// normalized image coordinates with y pointing down.
#[wasm_bindgen]
pub fn predicate(subject: &[f64], object: &[f64]) -> Result<String, String> {
    Ok(spatial_predicate(&parse_box(subject)?, &parse_box(object)?).name().to_string())
}

/// Scene `index` of the shapes world with the given seed, rendered at
/// `size × size`. Returns `{"graph": …, "size": n, "rgba": […]}` where
/// `graph` is the scene-graph interchange JSON with ground-truth boxes.
#[wasm_bindgen]
pub fn scene(seed: u32, index: u32, size: u32) -> Result<String, String> {
    let cfg = ShapesWorldConfig { seed: seed as u64, image_size: size as usize, ..Default::default() };
    cfg.validate().map_err(|e| e.to_string())?;
    let vocab = cfg.vocab();
    let s = generate_scene(&cfg, &vocab, index as u64).map_err(|e| e.to_string())?;
    let n = size as usize;
    let mut rgba = Vec::with_capacity(n * n * 4);
    for y in 0..n {
        for x in 0..n {
            let [r, g, b] = s.image.get(x, y);
            rgba.extend([r, g, b].map(|c| (c * 255.0).round() as u8));
            rgba.push(255);
        }
    }
    let mut graph = scene_graph_value(&s.graph, &vocab);
    graph.as_object_mut().expect("graph is an object").remove("masks");
    Ok(json!({ "graph": graph, "size": n, "rgba": rgba }).to_string())
}

/// Scores `boxes` (a JSON array with one `[x0, y0, x1, y1]` per object)
/// against a shapes-world scene graph. Returns the relation score, the
/// mean IoU against the graph's boxes, and the verdict on every spatial
/// triple (in-image edges are structural and left out).
#[wasm_bindgen]
pub fn score_layout(graph: &str, boxes: &str) -> Result<String, String> {
    let vocab = ShapesWorldConfig::default().vocab();
    let g = parse_scene_graph(graph, &vocab).map_err(|e| e.to_string())?;
    let coords: Vec<Vec<f64>> = serde_json::from_str(boxes).map_err(|e| format!("boxes: {e}"))?;
    let layout = coords.iter().map(|c| parse_box(c)).collect::<Result<Vec<_>, _>>()?;
    let tally = relation_tally(&[&g], std::slice::from_ref(&layout), &vocab).map_err(|e| e.to_string())?;
    let iou = g.gt_boxes().map(|gt| avg_iou(&layout, &gt)).transpose().map_err(|e| e.to_string())?;
    let triples: Vec<Value> = g
        .triples
        .iter()
        .filter_map(|t| {
            let want = SpatialPredicate::from_name(vocab.predicate_name(t.predicate))?;
            let got = spatial_predicate(&layout[t.subject], &layout[t.object]);
            Some(json!({ "subject": t.subject, "object": t.object, "predicate": want.name(),
                         "actual": got.name(), "holds": want == got }))
        })
        .collect();
    Ok(json!({
        "relation_score": tally.score(),
        "satisfied": tally.satisfied,
        "total": tally.total,
        "avg_iou": iou,
        "triples": triples,
    })
    .to_string())
}
