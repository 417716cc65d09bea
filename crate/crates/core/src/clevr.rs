//! Procedural CLEVR-like scenes: flat shapes on a gray floor, their scene
//! graphs, edited counterparts and an on-disk dataset format.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{
    apply_edit, BBox, Direction, EditOp, MaskSpec, NewEdge, ObjectNode, RelationEdge, SceneGraph, Vocab,
};
use crate::raster::RgbImage;

pub const MIN_OBJECTS: usize = 3;
pub const MAX_OBJECTS: usize = 7;
/// Smallest allowed distance between object centres.
pub const MIN_DISTANCE: f64 = 0.15;
/// Centres are drawn from `[MARGIN, 1 − MARGIN]` so every shape is inside
/// the frame.
pub const MARGIN: f64 = 0.12;
pub const BACKGROUND: [f32; 3] = [0.5, 0.5, 0.5];
const PLACEMENT_ATTEMPTS: usize = 200;
const SCENE_ATTEMPTS: usize = 100;
const SUPERSAMPLE: usize = 4;

pub const PREDICATES: [&str; 4] = ["left of", "right of", "behind", "in front of"];
pub const LEFT_OF: usize = 0;
pub const RIGHT_OF: usize = 1;
pub const BEHIND: usize = 2;
pub const IN_FRONT_OF: usize = 3;

pub const COLORS: [(&str, [u8; 3]); 8] = [
    ("gray", [87, 87, 87]),
    ("red", [173, 35, 35]),
    ("blue", [42, 75, 215]),
    ("green", [29, 105, 20]),
    ("brown", [129, 74, 25]),
    ("purple", [129, 38, 192]),
    ("cyan", [41, 208, 208]),
    ("yellow", [255, 238, 51]),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Square,
    Circle,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Circle, Shape::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Triangle => "triangle",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Size {
    Small,
    Large,
}

impl Size {
    pub fn radius(self) -> f64 {
        match self {
            Size::Small => 0.07,
            Size::Large => 0.11,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Size::Small => "small",
            Size::Large => "large",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Shape,
    /// Index into [`COLORS`].
    pub color: usize,
    pub size: Size,
    pub cx: f64,
    pub cy: f64,
    /// Stable identity across an edit pair.
    pub object_id: usize,
}

pub fn category_id(shape: Shape, color: usize, size: Size) -> usize {
    let s = Shape::ALL.iter().position(|&x| x == shape).unwrap_or(0);
    s * 16 + color * 2 + usize::from(size == Size::Large)
}

pub fn num_categories() -> usize {
    Shape::ALL.len() * COLORS.len() * 2
}

impl SceneObject {
    pub fn category(&self) -> usize {
        category_id(self.shape, self.color, self.size)
    }

    /// Tight bounds of the drawn shape.
    pub fn bbox(&self) -> BBox {
        let r = self.size.radius();
        BBox::new(self.cy - r, self.cx - r, self.cy + r, self.cx + r)
    }

    /// Whether the normalized point `(px, py)` is inside the shape.
    pub fn contains(&self, px: f64, py: f64) -> bool {
        let r = self.size.radius();
        let (dx, dy) = (px - self.cx, py - self.cy);
        match self.shape {
            Shape::Square => dx.abs() <= r && dy.abs() <= r,
            Shape::Circle => dx * dx + dy * dy <= r * r,
            // apex at the top, base along the bottom edge of the box
            Shape::Triangle => dy >= -r && dy <= r && dx.abs() <= 0.5 * (dy + r),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub objects: Vec<SceneObject>,
    /// Whole-scene restarts needed to place every object.
    #[serde(default)]
    pub resamples: usize,
}

pub fn vocab() -> Vocab {
    let mut objects = vec![String::new(); num_categories()];
    for shape in Shape::ALL {
        for (c, (color, _)) in COLORS.iter().enumerate() {
            for size in [Size::Small, Size::Large] {
                objects[category_id(shape, c, size)] = format!("{} {color} {}", size.name(), shape.name());
            }
        }
    }
    Vocab {
        objects,
        predicates: PREDICATES.iter().map(|s| s.to_string()).collect(),
    }
}

fn random_object<R: Rng>(rng: &mut R, existing: &[SceneObject], object_id: usize) -> Option<SceneObject> {
    for _ in 0..PLACEMENT_ATTEMPTS {
        let o = SceneObject {
            shape: Shape::ALL[rng.random_range(0..Shape::ALL.len())],
            color: rng.random_range(0..COLORS.len()),
            size: if rng.random_bool(0.5) { Size::Large } else { Size::Small },
            cx: rng.random_range(MARGIN..=1.0 - MARGIN),
            cy: rng.random_range(MARGIN..=1.0 - MARGIN),
            object_id,
        };
        if existing
            .iter()
            .all(|e| (e.cx - o.cx).hypot(e.cy - o.cy) >= MIN_DISTANCE)
        {
            return Some(o);
        }
    }
    None
}

/// Draw 3..=7 objects with rejection of colliding centres.
pub fn sample_scene<R: Rng>(rng: &mut R) -> Result<SceneSpec> {
    let n = rng.random_range(MIN_OBJECTS..=MAX_OBJECTS);
    for attempt in 0..SCENE_ATTEMPTS {
        let mut objects: Vec<SceneObject> = Vec::with_capacity(n);
        for id in 0..n {
            match random_object(rng, &objects, id) {
                Some(o) => objects.push(o),
                None => break,
            }
        }
        if objects.len() == n {
            return Ok(SceneSpec {
                objects,
                resamples: attempt,
            });
        }
    }
    Err(Error::Sampling(format!(
        "could not place {n} objects after {SCENE_ATTEMPTS} resamples"
    )))
}

/// Anti-aliased rendering, far objects first. Returns the tight box of every
/// object in scene order.
pub fn rasterize(scene: &SceneSpec, resolution: usize) -> (RgbImage, Vec<BBox>) {
    let mut img = RgbImage::filled(resolution, resolution, BACKGROUND);
    let mut order: Vec<usize> = (0..scene.objects.len()).collect();
    order.sort_by(|&a, &b| scene.objects[a].cy.total_cmp(&scene.objects[b].cy).then(a.cmp(&b)));
    let res = resolution as f64;
    let samples = (SUPERSAMPLE * SUPERSAMPLE) as f32;
    for &i in &order {
        let o = &scene.objects[i];
        let rect = o.bbox().to_pixel_rect(resolution, resolution);
        let rgb = COLORS[o.color].1.map(|c| c as f32 / 255.0);
        for y in rect.y0..rect.y1 {
            for x in rect.x0..rect.x1 {
                let mut hits = 0;
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let py = (y as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64) / res;
                        let px = (x as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64) / res;
                        hits += usize::from(o.contains(px, py));
                    }
                }
                if hits > 0 {
                    let a = hits as f32 / samples;
                    for (c, &v) in rgb.iter().enumerate() {
                        let old = img.get(c, y, x);
                        img.set(c, y, x, old * (1.0 - a) + v * a);
                    }
                }
            }
        }
    }
    (img, scene.objects.iter().map(|o| o.bbox()).collect())
}

/// Relation of `a` to `b` along the axis where their centres differ most:
/// horizontally left/right, vertically behind (smaller y) / in front.
pub fn predicate_between(a: &BBox, b: &BBox) -> usize {
    let (ay, ax) = a.center();
    let (by, bx) = b.center();
    let (dx, dy) = (ax - bx, ay - by);
    if dx.abs() >= dy.abs() {
        if dx < 0.0 {
            LEFT_OF
        } else {
            RIGHT_OF
        }
    } else if dy > 0.0 {
        IN_FRONT_OF
    } else {
        BEHIND
    }
}

/// Unordered pairs `(i, j)`, `i < j`: every pair where one is among the
/// other's two nearest neighbours, topped up with the closest remaining
/// pairs, at most `2n` in total.
pub fn sample_pairs(scene: &SceneSpec) -> Vec<(usize, usize)> {
    let objs = &scene.objects;
    let n = objs.len();
    let dist = |i: usize, j: usize| (objs[i].cx - objs[j].cx).hypot(objs[i].cy - objs[j].cy);
    let by_distance = |i: usize| {
        let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        others.sort_by(|&a, &b| dist(i, a).total_cmp(&dist(i, b)).then(a.cmp(&b)));
        others
    };
    let mut pairs = std::collections::BTreeSet::new();
    for i in 0..n {
        for &j in by_distance(i).iter().take(2) {
            pairs.insert((i.min(j), i.max(j)));
        }
    }
    let mut rest: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .filter(|p| !pairs.contains(p))
        .collect();
    rest.sort_by(|a, b| dist(a.0, a.1).total_cmp(&dist(b.0, b.1)).then(a.cmp(b)));
    let cap = 2 * n;
    let mut out: Vec<(usize, usize)> = pairs.into_iter().collect();
    out.truncate(cap);
    let room = cap.saturating_sub(out.len());
    out.extend(rest.into_iter().take(room));
    out
}

fn node_for(o: &SceneObject) -> ObjectNode {
    let mut node = ObjectNode::new(o.category(), Some(o.bbox()));
    let attrs = [
        ("object_id", serde_json::json!(o.object_id)),
        ("shape", serde_json::json!(o.shape.name())),
        ("color", serde_json::json!(COLORS[o.color].0)),
        ("size", serde_json::json!(o.size.name())),
    ];
    for (k, v) in attrs {
        node.attributes.insert(k.to_string(), v);
    }
    node
}

fn edges_for(scene: &SceneSpec, pairs: &[(usize, usize)]) -> Vec<RelationEdge> {
    pairs
        .iter()
        .map(|&(s, o)| RelationEdge::new(s, predicate_between(&scene.objects[s].bbox(), &scene.objects[o].bbox()), o))
        .collect()
}

pub fn derive_graph(scene: &SceneSpec) -> SceneGraph {
    SceneGraph::new(
        scene.objects.iter().map(node_for).collect(),
        edges_for(scene, &sample_pairs(scene)),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditKind {
    Swap,
    Add,
    Remove,
    Attribute,
}

impl EditKind {
    pub const ALL: [EditKind; 4] = [EditKind::Swap, EditKind::Add, EditKind::Remove, EditKind::Attribute];
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EditDescriptor {
    /// Objects `a` and `b` trade places.
    Swap { a: usize, b: usize },
    Add { category_id: usize, new_edges: Vec<NewEdge> },
    Remove { node_index: usize },
    /// Colour change.
    Attribute { node_index: usize, new_category_id: usize },
}

impl EditDescriptor {
    pub fn kind(&self) -> EditKind {
        match self {
            EditDescriptor::Swap { .. } => EditKind::Swap,
            EditDescriptor::Add { .. } => EditKind::Add,
            EditDescriptor::Remove { .. } => EditKind::Remove,
            EditDescriptor::Attribute { .. } => EditKind::Attribute,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditPair {
    pub source_scene: SceneSpec,
    pub target_scene: SceneSpec,
    pub source_graph: SceneGraph,
    pub target_graph: SceneGraph,
    pub edit: EditDescriptor,
}

pub fn feasible(scene: &SceneSpec, kind: EditKind) -> std::result::Result<(), String> {
    let n = scene.objects.len();
    match kind {
        EditKind::Remove if n <= MIN_OBJECTS => Err(format!("removal would leave {} objects", n - 1)),
        EditKind::Add if n >= MAX_OBJECTS => Err(format!("scene already has {n} objects")),
        _ => Ok(()),
    }
}

/// Build a source/target pair that differs by one edit of `kind`.
pub fn make_edit_pair<R: Rng>(scene: &SceneSpec, kind: EditKind, rng: &mut R) -> Result<EditPair> {
    feasible(scene, kind).map_err(Error::Infeasible)?;
    let source_graph = derive_graph(scene);
    let n = scene.objects.len();
    let mut target_scene = scene.clone();
    let (target_graph, edit) = match kind {
        EditKind::Swap => {
            let e = source_graph.edges[rng.random_range(0..source_graph.edges.len())];
            let (a, b) = (e.subject_index, e.object_index);
            let (pa, pb) = (&scene.objects[a], &scene.objects[b]);
            let (ax, ay, bx, by) = (pa.cx, pa.cy, pb.cx, pb.cy);
            target_scene.objects[a].cx = bx;
            target_scene.objects[a].cy = by;
            target_scene.objects[b].cx = ax;
            target_scene.objects[b].cy = ay;
            let pairs: Vec<_> = source_graph.edges.iter().map(|e| (e.subject_index, e.object_index)).collect();
            let g = SceneGraph::new(
                target_scene.objects.iter().map(node_for).collect(),
                edges_for(&target_scene, &pairs),
            );
            (g, EditDescriptor::Swap { a, b })
        }
        EditKind::Remove => {
            let k = rng.random_range(0..n);
            target_scene.objects.remove(k);
            let (g, _) = apply_edit(&source_graph, &EditOp::RemoveNode { node_index: k })?;
            (g, EditDescriptor::Remove { node_index: k })
        }
        EditKind::Attribute => {
            let k = rng.random_range(0..n);
            let old = scene.objects[k].color;
            let mut color = rng.random_range(0..COLORS.len() - 1);
            if color >= old {
                color += 1;
            }
            target_scene.objects[k].color = color;
            let mut g = source_graph.clone();
            g.nodes[k] = node_for(&target_scene.objects[k]);
            let c = target_scene.objects[k].category();
            (
                g,
                EditDescriptor::Attribute {
                    node_index: k,
                    new_category_id: c,
                },
            )
        }
        EditKind::Add => {
            let next_id = scene.objects.iter().map(|o| o.object_id).max().map_or(0, |m| m + 1);
            let o = random_object(rng, &scene.objects, next_id)
                .ok_or_else(|| Error::Infeasible("no free spot for a new object".into()))?;
            target_scene.objects.push(o);
            let mut near: Vec<usize> = (0..n).collect();
            let d = |j: usize| (scene.objects[j].cx - o.cx).hypot(scene.objects[j].cy - o.cy);
            near.sort_by(|&a, &b| d(a).total_cmp(&d(b)).then(a.cmp(&b)));
            let new_edges: Vec<NewEdge> = near
                .iter()
                .take(2)
                .map(|&j| NewEdge {
                    predicate_id: predicate_between(&o.bbox(), &scene.objects[j].bbox()),
                    other_node_index: j,
                    direction: Direction::Outgoing,
                })
                .collect();
            let mut g = source_graph.clone();
            g.nodes.push(node_for(&o));
            g.edges.extend(
                new_edges
                    .iter()
                    .map(|e| RelationEdge::new(n, e.predicate_id, e.other_node_index)),
            );
            (
                g,
                EditDescriptor::Add {
                    category_id: o.category(),
                    new_edges,
                },
            )
        }
    };
    Ok(EditPair {
        source_scene: scene.clone(),
        target_scene,
        source_graph,
        target_graph,
        edit,
    })
}

/// The masked graph and occlusion a manipulation of the source presents to
/// the generator. Swaps withhold both boxes and occlude both source
/// regions while the graph carries the target relations.
pub fn edit_input(source: &SceneGraph, target: &SceneGraph, edit: &EditDescriptor) -> Result<(SceneGraph, MaskSpec)> {
    match *edit {
        EditDescriptor::Remove { node_index } => apply_edit(source, &EditOp::RemoveNode { node_index }),
        EditDescriptor::Attribute {
            node_index,
            new_category_id,
        } => apply_edit(
            source,
            &EditOp::ReplaceCategory {
                node_index,
                new_category_id,
            },
        ),
        EditDescriptor::Add {
            category_id,
            ref new_edges,
        } => apply_edit(
            source,
            &EditOp::AddNode {
                category_id,
                new_edges: new_edges.clone(),
            },
        ),
        EditDescriptor::Swap { a, b } => {
            let (mut g, mask) = crate::graph::apply_edits(
                source,
                &[
                    EditOp::RepositionNode { node_index: a },
                    EditOp::RepositionNode { node_index: b },
                ],
            )?;
            if target.edges.len() != source.edges.len() {
                return Err(Error::Dataset("swap target must keep the source edge pairs".into()));
            }
            g.edges = target.edges.clone();
            Ok((g, mask))
        }
    }
}

/// One generated sample on its own RNG stream.
pub fn generate_sample(seed: u64, index: u64) -> Result<EditPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let scene = sample_scene(&mut rng)?;
    let first = rng.random_range(0..EditKind::ALL.len());
    let kind = (0..EditKind::ALL.len())
        .map(|k| EditKind::ALL[(first + k) % EditKind::ALL.len()])
        .find(|&k| feasible(&scene, k).is_ok())
        .expect("swap is always feasible");
    make_edit_pair(&scene, kind, &mut rng)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub edit: EditDescriptor,
    pub stream: u64,
    pub source_image: String,
    pub target_image: String,
    pub source_graph: String,
    pub target_graph: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub seed: u64,
    pub count: usize,
    pub resolution: usize,
    pub edge_policy: String,
    pub objects_vocab: String,
    pub predicates_vocab: String,
    pub splits: Splits,
    pub samples: Vec<ManifestEntry>,
}

pub const EDGE_POLICY: &str = "pairs with a top-2 nearest neighbour, then nearest remaining pairs, at most 2n";

/// 80/10/10 split sizes (training takes the rounding remainder).
pub fn split_sizes(count: usize) -> (usize, usize, usize) {
    let val = count / 10;
    let test = count / 10;
    (count - val - test, val, test)
}

/// Render `count` samples into `out_dir` and write the manifest.
pub fn export_dataset(count: usize, out_dir: impl AsRef<Path>, seed: u64, resolution: usize) -> Result<Manifest> {
    let root = out_dir.as_ref();
    for sub in ["images", "graphs", "vocab"] {
        std::fs::create_dir_all(root.join(sub))?;
    }
    let vocab = vocab();
    vocab.save(root.join("vocab/objects.json"), root.join("vocab/predicates.json"))?;
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let id = format!("{i:06}");
        let pair = generate_sample(seed, i as u64)?;
        let (src, _) = rasterize(&pair.source_scene, resolution);
        let (tgt, _) = rasterize(&pair.target_scene, resolution);
        let entry = ManifestEntry {
            source_image: format!("images/{id}_src.png"),
            target_image: format!("images/{id}_tgt.png"),
            source_graph: format!("graphs/{id}_src.json"),
            target_graph: format!("graphs/{id}_tgt.json"),
            id,
            edit: pair.edit.clone(),
            stream: i as u64,
        };
        src.save_png(root.join(&entry.source_image))?;
        tgt.save_png(root.join(&entry.target_image))?;
        let mut gs = pair.source_graph;
        gs.image_ref = Some(entry.source_image.clone());
        gs.save(root.join(&entry.source_graph))?;
        let mut gt = pair.target_graph;
        gt.image_ref = Some(entry.target_image.clone());
        gt.save(root.join(&entry.target_graph))?;
        samples.push(entry);
    }
    let mut ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    ids.shuffle(&mut rng);
    let (n_train, n_val, _) = split_sizes(count);
    let test = ids.split_off(n_train + n_val);
    let val = ids.split_off(n_train);
    let manifest = Manifest {
        format_version: 1,
        seed,
        count,
        resolution,
        edge_policy: EDGE_POLICY.into(),
        objects_vocab: "vocab/objects.json".into(),
        predicates_vocab: "vocab/predicates.json".into(),
        splits: Splits { train: ids, val, test },
        samples,
    };
    std::fs::write(root.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

#[derive(Debug, Clone)]
pub struct DataSample {
    pub id: String,
    pub source: RgbImage,
    pub target: RgbImage,
    pub source_graph: SceneGraph,
    pub target_graph: SceneGraph,
    pub edit: EditDescriptor,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub vocab: Vocab,
}

impl Dataset {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let root = dir.as_ref().to_path_buf();
        let text = std::fs::read_to_string(root.join("manifest.json"))
            .map_err(|e| Error::Dataset(format!("{}: {e}", root.join("manifest.json").display())))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        let vocab = Vocab::load(root.join(&manifest.objects_vocab), root.join(&manifest.predicates_vocab))?;
        Ok(Self { root, manifest, vocab })
    }

    pub fn split(&self, name: &str) -> Result<&[String]> {
        let s = &self.manifest.splits;
        match name {
            "train" => Ok(&s.train),
            "val" => Ok(&s.val),
            "test" => Ok(&s.test),
            other => Err(Error::Dataset(format!("unknown split {other:?}"))),
        }
    }

    pub fn entry(&self, id: &str) -> Result<&ManifestEntry> {
        self.manifest
            .samples
            .iter()
            .find(|e| e.id == id)
            .ok_or_else(|| Error::Dataset(format!("no sample {id:?}")))
    }

    pub fn load(&self, id: &str) -> Result<DataSample> {
        let e = self.entry(id)?;
        let p = |rel: &str| self.root.join(rel);
        Ok(DataSample {
            id: e.id.clone(),
            source: RgbImage::load_png(p(&e.source_image))?,
            target: RgbImage::load_png(p(&e.target_image))?,
            source_graph: SceneGraph::load(p(&e.source_graph))?,
            target_graph: SceneGraph::load(p(&e.target_graph))?,
            edit: e.edit.clone(),
        })
    }

    pub fn load_split(&self, name: &str, limit: Option<usize>) -> Result<Vec<DataSample>> {
        let ids = self.split(name)?;
        ids.iter()
            .take(limit.unwrap_or(ids.len()))
            .map(|id| self.load(id))
            .collect()
    }
}
