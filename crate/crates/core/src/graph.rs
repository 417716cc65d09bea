//! Scene graphs: objects with optional boxes and appearance features, directed
//! predicate edges, validation, JSON interchange, and the user edit operations
//! together with the input masking each edit implies.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::raster::PixelRect;

/// Length of the per-object appearance vector.
pub const DEFAULT_FEATURE_DIM: usize = 128;

/// Normalized `(top, left, bottom, right)` box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub top: f64,
    pub left: f64,
    pub bottom: f64,
    pub right: f64,
}

impl From<[f64; 4]> for BBox {
    fn from(v: [f64; 4]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

impl BBox {
    pub const fn new(top: f64, left: f64, bottom: f64, right: f64) -> Self {
        Self {
            top,
            left,
            bottom,
            right,
        }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.top, self.left, self.bottom, self.right]
    }

    /// `(cy, cx)`.
    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.top + self.bottom),
            0.5 * (self.left + self.right),
        )
    }

    /// `(height, width)`.
    pub fn size(&self) -> (f64, f64) {
        (self.bottom - self.top, self.right - self.left)
    }

    pub fn from_center_size(cy: f64, cx: f64, h: f64, w: f64) -> Self {
        Self::new(cy - 0.5 * h, cx - 0.5 * w, cy + 0.5 * h, cx + 0.5 * w)
    }

    /// Covering pixel rectangle on a `height × width` grid, clipped to the
    /// grid and never empty.
    pub fn to_pixel_rect(&self, height: usize, width: usize) -> PixelRect {
        const EPS: f64 = 1e-6;
        let span = |lo: f64, hi: f64, n: usize| {
            let nf = n as f64;
            let a = (lo * nf + EPS).floor().clamp(0.0, nf) as usize;
            let b = (hi * nf - EPS).ceil().clamp(0.0, nf) as usize;
            if b > a {
                (a, b)
            } else if a < n {
                (a, a + 1)
            } else {
                (n - 1, n)
            }
        };
        let (y0, y1) = span(self.top, self.bottom, height);
        let (x0, x1) = span(self.left, self.right, width);
        PixelRect { y0, x0, y1, x1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectNode {
    #[serde(rename = "category")]
    pub category_id: usize,
    pub bbox: Option<BBox>,
    #[serde(rename = "feature")]
    pub visual_feature: Option<Vec<f32>>,
    #[serde(default)]
    pub attributes: BTreeMap<String, serde_json::Value>,
    #[serde(default, skip_serializing_if = "is_false")]
    pub feature_masked: bool,
    #[serde(default, skip_serializing_if = "is_false")]
    pub bbox_masked: bool,
    /// The box is withheld for size estimation but its centre still pins the
    /// object in place (category replacement).
    #[serde(default, skip_serializing_if = "is_false")]
    pub anchor: bool,
}

fn is_false(b: &bool) -> bool {
    !*b
}

impl ObjectNode {
    pub fn new(category_id: usize, bbox: Option<BBox>) -> Self {
        Self {
            category_id,
            bbox,
            visual_feature: None,
            attributes: BTreeMap::new(),
            feature_masked: false,
            bbox_masked: false,
            anchor: false,
        }
    }

    /// Box as the network sees it.
    pub fn input_bbox(&self) -> Option<BBox> {
        if self.bbox_masked {
            None
        } else {
            self.bbox
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "[usize; 3]", into = "[usize; 3]")]
pub struct RelationEdge {
    pub subject_index: usize,
    pub predicate_id: usize,
    pub object_index: usize,
}

impl From<[usize; 3]> for RelationEdge {
    fn from(v: [usize; 3]) -> Self {
        Self::new(v[0], v[1], v[2])
    }
}

impl From<RelationEdge> for [usize; 3] {
    fn from(e: RelationEdge) -> Self {
        [e.subject_index, e.predicate_id, e.object_index]
    }
}

impl RelationEdge {
    pub const fn new(subject_index: usize, predicate_id: usize, object_index: usize) -> Self {
        Self {
            subject_index,
            predicate_id,
            object_index,
        }
    }

    pub fn touches(&self, node: usize) -> bool {
        self.subject_index == node || self.object_index == node
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SceneGraph {
    pub nodes: Vec<ObjectNode>,
    pub edges: Vec<RelationEdge>,
    #[serde(rename = "image", default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
}

impl SceneGraph {
    pub fn new(nodes: Vec<ObjectNode>, edges: Vec<RelationEdge>) -> Self {
        Self {
            nodes,
            edges,
            image_ref: None,
        }
    }

    /// Number of edges starting or ending at `node`.
    pub fn degree(&self, node: usize) -> usize {
        self.edges.iter().filter(|e| e.touches(node)).count()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("graph serialization is infallible");
        hex(&Sha256::digest(json))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub objects: Vec<String>,
    pub predicates: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabSizes {
    pub objects: usize,
    pub predicates: usize,
}

impl Vocab {
    pub fn sizes(&self) -> VocabSizes {
        VocabSizes {
            objects: self.objects.len(),
            predicates: self.predicates.len(),
        }
    }

    /// Vocabulary files are JSON arrays of strings, index = id.
    pub fn load(objects: impl AsRef<Path>, predicates: impl AsRef<Path>) -> Result<Self> {
        Ok(Self {
            objects: serde_json::from_str(&std::fs::read_to_string(objects)?)?,
            predicates: serde_json::from_str(&std::fs::read_to_string(predicates)?)?,
        })
    }

    pub fn save(&self, objects: impl AsRef<Path>, predicates: impl AsRef<Path>) -> Result<()> {
        std::fs::write(objects, serde_json::to_string(&self.objects)?)?;
        std::fs::write(predicates, serde_json::to_string(&self.predicates)?)?;
        Ok(())
    }

    pub fn predicate_id(&self, name: &str) -> Option<usize> {
        self.predicates.iter().position(|p| p == name)
    }

    pub fn object_id(&self, name: &str) -> Option<usize> {
        self.objects.iter().position(|p| p == name)
    }
}

// ---------------------------------------------------------------------------
// Validation

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "index")]
pub enum Location {
    Node(usize),
    Edge(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    CategoryOutOfRange,
    BboxNotFinite,
    BboxOutOfUnitRange,
    TopBeforeBottom,
    LeftBeforeRight,
    FeatureNotFinite,
    SelfEdge,
    EdgeIndexOutOfRange,
    PredicateOutOfRange,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub at: Location,
    pub rule: Rule,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.at {
            Location::Node(i) => write!(f, "node {i}: {:?}", self.rule),
            Location::Edge(i) => write!(f, "edge {i}: {:?}", self.rule),
        }
    }
}

/// Every invariant breach in `g`; empty means the graph is well formed.
pub fn validate_graph(g: &SceneGraph, vocab: VocabSizes) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |at, rule| out.push(Violation { at, rule });
    for (i, n) in g.nodes.iter().enumerate() {
        let at = Location::Node(i);
        if n.category_id >= vocab.objects {
            push(at, Rule::CategoryOutOfRange);
        }
        if let Some(b) = n.bbox {
            let v = b.to_array();
            if v.iter().any(|x| !x.is_finite()) {
                push(at, Rule::BboxNotFinite);
            } else {
                if v.iter().any(|x| !(0.0..=1.0).contains(x)) {
                    push(at, Rule::BboxOutOfUnitRange);
                }
                if b.top >= b.bottom {
                    push(at, Rule::TopBeforeBottom);
                }
                if b.left >= b.right {
                    push(at, Rule::LeftBeforeRight);
                }
            }
        }
        if let Some(f) = &n.visual_feature {
            if f.iter().any(|x| !x.is_finite()) {
                push(at, Rule::FeatureNotFinite);
            }
        }
    }
    let n = g.nodes.len();
    for (i, e) in g.edges.iter().enumerate() {
        let at = Location::Edge(i);
        if e.subject_index >= n || e.object_index >= n {
            push(at, Rule::EdgeIndexOutOfRange);
        } else if e.subject_index == e.object_index {
            push(at, Rule::SelfEdge);
        }
        if e.predicate_id >= vocab.predicates {
            push(at, Rule::PredicateOutOfRange);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Edits

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// The added node is the subject.
    Outgoing,
    /// The added node is the object.
    Incoming,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NewEdge {
    pub predicate_id: usize,
    pub other_node_index: usize,
    pub direction: Direction,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum EditOp {
    RemoveNode {
        node_index: usize,
    },
    ReplaceCategory {
        node_index: usize,
        new_category_id: usize,
    },
    ChangePredicate {
        edge_index: usize,
        new_predicate_id: usize,
    },
    AddNode {
        category_id: usize,
        new_edges: Vec<NewEdge>,
    },
    /// Withhold only the box so the object gets re-placed.
    RepositionNode {
        node_index: usize,
    },
}

/// An image region hidden from the decoder because of an edit or a training
/// mask draw.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OccludedRegion {
    /// Index of the responsible node in the resulting graph; `None` when the
    /// node no longer exists.
    pub node: Option<usize>,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MaskSpec {
    pub nodes_feature_masked: BTreeSet<usize>,
    pub nodes_bbox_masked: BTreeSet<usize>,
    pub occlude_regions: Vec<OccludedRegion>,
    pub fully_generative: bool,
}

impl MaskSpec {
    pub fn is_empty(&self) -> bool {
        self.nodes_feature_masked.is_empty()
            && self.nodes_bbox_masked.is_empty()
            && self.occlude_regions.is_empty()
            && !self.fully_generative
    }

    /// Occluded regions in source-image pixel coordinates.
    pub fn pixel_regions(&self, height: usize, width: usize) -> Vec<PixelRect> {
        if self.fully_generative {
            return vec![PixelRect {
                y0: 0,
                x0: 0,
                y1: height,
                x1: width,
            }];
        }
        self.occlude_regions
            .iter()
            .map(|r| r.bbox.to_pixel_rect(height, width))
            .collect()
    }
}

fn reject(msg: impl Into<String>) -> Error {
    Error::InvalidEdit(msg.into())
}

fn check_node(g: &SceneGraph, i: usize) -> Result<()> {
    if i < g.nodes.len() {
        Ok(())
    } else {
        Err(reject(format!(
            "node index {i} out of range for {} node(s)",
            g.nodes.len()
        )))
    }
}

/// Apply `edit` to a copy of `g`, returning the edited graph and the masking
/// the edit implies. Invalid edits are rejected without partial effects.
pub fn apply_edit(g: &SceneGraph, edit: &EditOp) -> Result<(SceneGraph, MaskSpec)> {
    let mut out = g.clone();
    let mut mask = MaskSpec::default();
    match *edit {
        EditOp::RemoveNode { node_index } => {
            check_node(g, node_index)?;
            let removed = out.nodes.remove(node_index);
            out.edges = g
                .edges
                .iter()
                .filter(|e| !e.touches(node_index))
                .map(|e| {
                    let shift = |i: usize| if i > node_index { i - 1 } else { i };
                    RelationEdge::new(shift(e.subject_index), e.predicate_id, shift(e.object_index))
                })
                .collect();
            if let Some(bbox) = removed.bbox {
                mask.occlude_regions.push(OccludedRegion { node: None, bbox });
            }
        }
        EditOp::ReplaceCategory {
            node_index,
            new_category_id,
        } => {
            check_node(g, node_index)?;
            let node = &mut out.nodes[node_index];
            node.category_id = new_category_id;
            if let Some(f) = node.visual_feature.as_mut() {
                f.iter_mut().for_each(|x| *x = 0.0);
            }
            node.feature_masked = true;
            node.bbox_masked = true;
            node.anchor = node.bbox.is_some();
            mask.nodes_feature_masked.insert(node_index);
            mask.nodes_bbox_masked.insert(node_index);
            if let Some(bbox) = node.bbox {
                mask.occlude_regions.push(OccludedRegion {
                    node: Some(node_index),
                    bbox,
                });
            }
        }
        EditOp::ChangePredicate {
            edge_index,
            new_predicate_id,
        } => {
            if edge_index >= g.edges.len() {
                return Err(reject(format!(
                    "edge index {edge_index} out of range for {} edge(s)",
                    g.edges.len()
                )));
            }
            let old = g.edges[edge_index];
            check_node(g, old.subject_index)?;
            check_node(g, old.object_index)?;
            // Duplicates of the edited edge become stale once one copy changes.
            let mut kept = Vec::with_capacity(g.edges.len());
            let mut edited = 0;
            for (i, e) in g.edges.iter().enumerate() {
                if i == edge_index {
                    edited = kept.len();
                    kept.push(RelationEdge::new(e.subject_index, new_predicate_id, e.object_index));
                } else if *e != old {
                    kept.push(*e);
                }
            }
            out.edges = kept;
            out = dedupe_edges(&out, edited);
            for idx in [old.subject_index, old.object_index] {
                let node = &mut out.nodes[idx];
                node.bbox_masked = true;
                node.anchor = false;
                mask.nodes_bbox_masked.insert(idx);
                if let Some(bbox) = node.bbox {
                    mask.occlude_regions.push(OccludedRegion {
                        node: Some(idx),
                        bbox,
                    });
                }
            }
        }
        EditOp::AddNode {
            category_id,
            ref new_edges,
        } => {
            let new_index = g.nodes.len();
            for ne in new_edges {
                if ne.other_node_index == new_index {
                    return Err(reject("added edge references the new node itself"));
                }
                check_node(g, ne.other_node_index)?;
            }
            let mut node = ObjectNode::new(category_id, None);
            node.feature_masked = true;
            node.bbox_masked = true;
            out.nodes.push(node);
            mask.nodes_feature_masked.insert(new_index);
            mask.nodes_bbox_masked.insert(new_index);
            for ne in new_edges {
                let e = match ne.direction {
                    Direction::Outgoing => {
                        RelationEdge::new(new_index, ne.predicate_id, ne.other_node_index)
                    }
                    Direction::Incoming => {
                        RelationEdge::new(ne.other_node_index, ne.predicate_id, new_index)
                    }
                };
                out.edges.push(e);
                let last = out.edges.len() - 1;
                out = dedupe_edges(&out, last);
            }
        }
        EditOp::RepositionNode { node_index } => {
            check_node(g, node_index)?;
            let node = &mut out.nodes[node_index];
            node.bbox_masked = true;
            node.anchor = false;
            mask.nodes_bbox_masked.insert(node_index);
            if let Some(bbox) = node.bbox {
                mask.occlude_regions.push(OccludedRegion {
                    node: Some(node_index),
                    bbox,
                });
            }
        }
    }
    Ok((out, mask))
}

/// Apply `edits` in order; the returned mask accumulates every edit's
/// masking, with node indices kept in step with removals.
pub fn apply_edits(g: &SceneGraph, edits: &[EditOp]) -> Result<(SceneGraph, MaskSpec)> {
    let mut graph = g.clone();
    let mut mask = MaskSpec::default();
    for edit in edits {
        let (next, step) = apply_edit(&graph, edit)?;
        if let EditOp::RemoveNode { node_index } = *edit {
            let shift = |set: &BTreeSet<usize>| -> BTreeSet<usize> {
                set.iter()
                    .filter(|&&i| i != node_index)
                    .map(|&i| if i > node_index { i - 1 } else { i })
                    .collect()
            };
            mask.nodes_feature_masked = shift(&mask.nodes_feature_masked);
            mask.nodes_bbox_masked = shift(&mask.nodes_bbox_masked);
            for r in &mut mask.occlude_regions {
                r.node = match r.node {
                    Some(i) if i == node_index => None,
                    Some(i) if i > node_index => Some(i - 1),
                    other => other,
                };
            }
        }
        mask.nodes_feature_masked.extend(step.nodes_feature_masked);
        mask.nodes_bbox_masked.extend(step.nodes_bbox_masked);
        mask.occlude_regions.extend(step.occlude_regions);
        mask.fully_generative |= step.fully_generative;
        graph = next;
    }
    Ok((graph, mask))
}

/// Collapse every other edge identical to `edges[edited_edge_index]` into it.
pub fn dedupe_edges(g: &SceneGraph, edited_edge_index: usize) -> SceneGraph {
    let Some(&target) = g.edges.get(edited_edge_index) else {
        return g.clone();
    };
    let mut out = g.clone();
    out.edges = g
        .edges
        .iter()
        .enumerate()
        .filter(|&(i, e)| i == edited_edge_index || *e != target)
        .map(|(_, e)| *e)
        .collect();
    out
}
