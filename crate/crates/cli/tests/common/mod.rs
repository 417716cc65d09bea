#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sgedit::graph::{BBox, ObjectNode, RelationEdge, SceneGraph, VocabSizes};
use sgedit::sgn::SgnConfig;
use sgedit::synthesis::CrnConfig;
use sgedit::{ModelConfig, Preset, RgbImage};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A model small enough for finite differences and quick checkpoints.
pub fn tiny_config(resolution: usize, vocab: VocabSizes) -> ModelConfig {
    let mut cfg = ModelConfig::new(Preset::Desk, resolution, vocab);
    cfg.sgn = SgnConfig {
        embed_dim: 6,
        feature_dim: 6,
        width: 6,
        hidden: 10,
        head_hidden: 6,
        layers: 2,
        mask_size: 4,
        node_feature_dim: 5,
    };
    cfg.crn = CrnConfig {
        widths: vec![6, 4],
        resolution,
    };
    cfg.image_channels = 3;
    cfg.crop_size = 16;
    cfg.layout_dim = Some(4);
    cfg
}

pub fn random_bbox<R: Rng>(rng: &mut R) -> BBox {
    let (a, b) = (rng.random_range(0.0..0.9), rng.random_range(0.0..0.9));
    let (h, w) = (rng.random_range(0.05..0.5), rng.random_range(0.05..0.5));
    BBox::new(a, b, (a + h).min(1.0), (b + w).min(1.0))
}

pub struct GraphShape {
    pub max_nodes: usize,
    pub feature_dim: usize,
    /// Also draw mask flags and missing boxes.
    pub flags: bool,
    pub duplicates: bool,
}

/// Random well-formed graph, possibly with parallel duplicate edges.
pub fn random_graph<R: Rng>(rng: &mut R, vocab: VocabSizes, shape: &GraphShape) -> SceneGraph {
    let n = rng.random_range(1..=shape.max_nodes);
    let nodes = (0..n)
        .map(|i| {
            let bbox = (!shape.flags || rng.random_bool(0.85)).then(|| random_bbox(rng));
            let mut node = ObjectNode::new(rng.random_range(0..vocab.objects), bbox);
            if !shape.flags || rng.random_bool(0.8) {
                node.visual_feature = Some((0..shape.feature_dim).map(|_| rng.random_range(-1.0..1.0)).collect());
            }
            if shape.flags {
                node.feature_masked = rng.random_bool(0.2);
                node.bbox_masked = rng.random_bool(0.2);
            }
            node.attributes.insert("i".into(), serde_json::json!(i));
            node
        })
        .collect();
    let mut edges: Vec<RelationEdge> = Vec::new();
    if n > 1 {
        for _ in 0..rng.random_range(0..=2 * n) {
            if shape.duplicates && !edges.is_empty() && rng.random_bool(0.3) {
                edges.push(edges[rng.random_range(0..edges.len())]);
                continue;
            }
            let s = rng.random_range(0..n);
            let mut o = rng.random_range(0..n - 1);
            if o >= s {
                o += 1;
            }
            edges.push(RelationEdge::new(s, rng.random_range(0..vocab.predicates), o));
        }
    }
    SceneGraph::new(nodes, edges)
}

pub fn random_image<R: Rng>(rng: &mut R, width: usize, height: usize) -> RgbImage {
    let mut img = RgbImage::new(width, height);
    for v in img.data.iter_mut() {
        *v = rng.random_range(0.0..1.0);
    }
    img
}
