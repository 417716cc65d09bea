//! Spatio-semantic graph network: per-edge triple perceptrons, mean
//! aggregation onto nodes, and the box / mask / feature heads.

use candle_core::{DType, Device, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{RelationEdge, SceneGraph, VocabSizes};
use crate::nn::{self, Linear, Mlp2, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SgnConfig {
    /// Category and predicate embedding width.
    pub embed_dim: usize,
    /// Visual feature length `n`.
    pub feature_dim: usize,
    /// Node/edge state width after the first layer.
    pub width: usize,
    /// Hidden width of the edge and node perceptrons.
    pub hidden: usize,
    /// Hidden width of the output heads.
    pub head_hidden: usize,
    /// Message-passing rounds `T`.
    pub layers: usize,
    /// Side of the predicted object mask.
    pub mask_size: usize,
    /// Output node feature length `s`.
    pub node_feature_dim: usize,
}

impl Default for SgnConfig {
    fn default() -> Self {
        Self {
            embed_dim: 128,
            feature_dim: crate::graph::DEFAULT_FEATURE_DIM,
            width: 128,
            hidden: 512,
            head_hidden: 128,
            layers: 5,
            mask_size: 16,
            node_feature_dim: 128,
        }
    }
}

impl SgnConfig {
    /// Width of the initial node state: category embedding, box, feature.
    pub fn input_width(&self) -> usize {
        self.embed_dim + 4 + self.feature_dim
    }

    fn state_width(&self, layer: usize) -> usize {
        if layer == 0 {
            self.input_width()
        } else {
            self.width
        }
    }

    fn predicate_width(&self, layer: usize) -> usize {
        if layer == 0 {
            self.embed_dim
        } else {
            self.width
        }
    }
}

#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    /// `|objects| × d`.
    pub objects: Tensor,
    /// `|predicates| × d`.
    pub predicates: Tensor,
}

#[derive(Debug, Clone)]
pub struct SgnLayer {
    pub edge: Mlp2,
    pub node: Mlp2,
    /// Carries nodes without any incident edge to the next width.
    pub isolated: Linear,
}

/// Everything the network sees about a graph. Masked boxes and features are
/// already zero rows.
#[derive(Debug, Clone)]
pub struct SgnInput {
    pub categories: Vec<usize>,
    /// `(N, 4)`.
    pub boxes: Tensor,
    /// `(N, n)`.
    pub features: Tensor,
    pub edges: Vec<RelationEdge>,
}

#[derive(Debug, Clone)]
pub struct SgnOutput {
    /// `(N, 4)` predicted `(top, left, bottom, right)`.
    pub boxes: Tensor,
    /// `(N, M, M)` in `(0, 1)`.
    pub masks: Tensor,
    /// `(N, s)`.
    pub features: Tensor,
}

impl SgnInput {
    /// Build from the graph's own boxes and stored features, honouring the
    /// mask flags. Nodes without a stored feature get zeros.
    pub fn from_graph(g: &SceneGraph, cfg: &SgnConfig, dtype: DType) -> Result<Self> {
        let n = g.nodes.len();
        let mut boxes = vec![0.0f64; n * 4];
        let mut feats = vec![0.0f64; n * cfg.feature_dim];
        for (i, node) in g.nodes.iter().enumerate() {
            if let Some(b) = node.input_bbox() {
                boxes[i * 4..i * 4 + 4].copy_from_slice(&b.to_array());
            }
            if let (false, Some(f)) = (node.feature_masked, &node.visual_feature) {
                if f.len() != cfg.feature_dim {
                    return Err(Error::Shape(format!(
                        "node {i} feature has length {}, expected {}",
                        f.len(),
                        cfg.feature_dim
                    )));
                }
                for (dst, &v) in feats[i * cfg.feature_dim..].iter_mut().zip(f) {
                    *dst = v as f64;
                }
            }
        }
        Ok(Self {
            categories: g.nodes.iter().map(|n| n.category_id).collect(),
            boxes: Tensor::from_vec(boxes, (n, 4), &Device::Cpu)?.to_dtype(dtype)?,
            features: Tensor::from_vec(feats, (n, cfg.feature_dim), &Device::Cpu)?.to_dtype(dtype)?,
            edges: g.edges.clone(),
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.categories.len()
    }
}

#[derive(Debug, Clone)]
pub struct Sgn {
    pub cfg: SgnConfig,
    pub vocab: VocabSizes,
    pub embeddings: EmbeddingTable,
    pub layers: Vec<SgnLayer>,
    pub bbox_head: Mlp2,
    pub mask_head: Mlp2,
    pub feature_head: Mlp2,
}

fn ids(v: impl IntoIterator<Item = usize>) -> Result<Tensor> {
    let v: Vec<u32> = v.into_iter().map(|x| x as u32).collect();
    let n = v.len();
    Ok(Tensor::from_vec(v, n, &Device::Cpu)?)
}

impl Sgn {
    pub fn new(cfg: SgnConfig, vocab: VocabSizes, ps: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        if cfg.layers == 0 {
            return Err(Error::Config("the graph network needs at least one layer".into()));
        }
        let embeddings = EmbeddingTable {
            objects: ps.embedding(rng, "sgn.obj_emb", vocab.objects, cfg.embed_dim)?,
            predicates: ps.embedding(rng, "sgn.pred_emb", vocab.predicates, cfg.embed_dim)?,
        };
        let mut layers = Vec::with_capacity(cfg.layers);
        for t in 0..cfg.layers {
            let w = cfg.state_width(t);
            let p = cfg.predicate_width(t);
            layers.push(SgnLayer {
                edge: ps.mlp2(rng, &format!("sgn.layer{t}.edge"), 2 * w + p, cfg.hidden, 3 * cfg.width)?,
                node: ps.mlp2(rng, &format!("sgn.layer{t}.node"), cfg.width, cfg.hidden, cfg.width)?,
                isolated: ps.linear(rng, &format!("sgn.layer{t}.isolated"), w, cfg.width)?,
            });
        }
        let m = cfg.mask_size * cfg.mask_size;
        Ok(Self {
            cfg,
            vocab,
            embeddings,
            layers,
            bbox_head: ps.mlp2(rng, "sgn.head.bbox", cfg.width, cfg.head_hidden, 4)?,
            mask_head: ps.mlp2(rng, "sgn.head.mask", cfg.width, cfg.head_hidden, m)?,
            feature_head: ps.mlp2(rng, "sgn.head.feature", cfg.width, cfg.head_hidden, cfg.node_feature_dim)?,
        })
    }

    fn check_input(&self, input: &SgnInput) -> Result<()> {
        let n = input.num_nodes();
        if let Some(&c) = input.categories.iter().find(|&&c| c >= self.vocab.objects) {
            return Err(Error::Shape(format!(
                "category {c} out of range for {} object classes",
                self.vocab.objects
            )));
        }
        for e in &input.edges {
            if e.predicate_id >= self.vocab.predicates {
                return Err(Error::Shape(format!(
                    "predicate {} out of range for {} predicate classes",
                    e.predicate_id, self.vocab.predicates
                )));
            }
            if e.subject_index >= n || e.object_index >= n {
                return Err(Error::Shape(format!("edge {e:?} references a missing node")));
            }
        }
        if input.boxes.dims() != [n, 4] || input.features.dims() != [n, self.cfg.feature_dim] {
            return Err(Error::Shape(format!(
                "node inputs have shapes {:?} and {:?} for {n} nodes",
                input.boxes.dims(),
                input.features.dims()
            )));
        }
        Ok(())
    }

    /// `ν⁽⁰⁾ = [embedding(c) ‖ box ‖ φ]`, one row per node.
    pub fn init_node_states(&self, input: &SgnInput) -> Result<Tensor> {
        self.check_input(input)?;
        let emb = self
            .embeddings
            .objects
            .index_select(&ids(input.categories.iter().copied())?, 0)?;
        Ok(Tensor::cat(&[&emb, &input.boxes, &input.features], 1)?)
    }

    /// One triple perceptron evaluation per edge, split into
    /// `(α, ρ′, β)`, each `(E, width)`.
    pub fn edge_message(
        &self,
        layer: usize,
        subject: &Tensor,
        predicate: &Tensor,
        object: &Tensor,
    ) -> Result<(Tensor, Tensor, Tensor)> {
        let w = self.cfg.width;
        let out = self.layers[layer]
            .edge
            .forward(&Tensor::cat(&[subject, predicate, object], 1)?)?;
        Ok((out.narrow(1, 0, w)?, out.narrow(1, w, w)?, out.narrow(1, 2 * w, w)?))
    }

    /// Mean of outgoing `α` and incoming `β` per node followed by the node
    /// perceptron; nodes without edges go through the isolated projection of
    /// their previous state instead.
    pub fn aggregate_nodes(
        &self,
        layer: usize,
        edges: &[RelationEdge],
        alpha: &Tensor,
        beta: &Tensor,
        prev: &Tensor,
    ) -> Result<Tensor> {
        let (n, _) = prev.dims2()?;
        let l = &self.layers[layer];
        let carried = l.isolated.forward(prev)?;
        if edges.is_empty() {
            return Ok(carried);
        }
        let e = edges.len();
        let mut out_inc = vec![0.0f64; n * e];
        let mut in_inc = vec![0.0f64; n * e];
        let mut count = vec![0.0f64; n];
        for (k, edge) in edges.iter().enumerate() {
            out_inc[edge.subject_index * e + k] = 1.0;
            in_inc[edge.object_index * e + k] = 1.0;
            count[edge.subject_index] += 1.0;
            count[edge.object_index] += 1.0;
        }
        let dt = prev.dtype();
        let dev = prev.device();
        let connected: Vec<f64> = count.iter().map(|&c| if c > 0.0 { 1.0 } else { 0.0 }).collect();
        let inv: Vec<f64> = count.iter().map(|&c| if c > 0.0 { 1.0 / c } else { 0.0 }).collect();
        let out_inc = Tensor::from_vec(out_inc, (n, e), dev)?.to_dtype(dt)?;
        let in_inc = Tensor::from_vec(in_inc, (n, e), dev)?.to_dtype(dt)?;
        let inv = Tensor::from_vec(inv, (n, 1), dev)?.to_dtype(dt)?;
        let connected = Tensor::from_vec(connected, (n, 1), dev)?.to_dtype(dt)?;
        let sum = (out_inc.matmul(alpha)? + in_inc.matmul(beta)?)?;
        let mean = sum.broadcast_mul(&inv)?;
        let updated = l.node.forward(&mean)?;
        let keep = connected.affine(-1.0, 1.0)?;
        Ok((updated.broadcast_mul(&connected)? + carried.broadcast_mul(&keep)?)?)
    }

    pub fn forward(&self, input: &SgnInput) -> Result<SgnOutput> {
        let n = input.num_nodes();
        let mut states = self.init_node_states(input)?;
        let subj = ids(input.edges.iter().map(|e| e.subject_index))?;
        let obj = ids(input.edges.iter().map(|e| e.object_index))?;
        let mut preds = if input.edges.is_empty() {
            None
        } else {
            Some(
                self.embeddings
                    .predicates
                    .index_select(&ids(input.edges.iter().map(|e| e.predicate_id))?, 0)?,
            )
        };
        for t in 0..self.layers.len() {
            match preds.take() {
                Some(p) => {
                    let (alpha, rho, beta) = self.edge_message(
                        t,
                        &states.index_select(&subj, 0)?,
                        &p,
                        &states.index_select(&obj, 0)?,
                    )?;
                    states = self.aggregate_nodes(t, &input.edges, &alpha, &beta, &states)?;
                    preds = Some(rho);
                }
                None => {
                    states = self.aggregate_nodes(t, &input.edges, &states, &states, &states)?;
                }
            }
        }
        let m = self.cfg.mask_size;
        Ok(SgnOutput {
            boxes: self.bbox_head.forward(&states)?,
            masks: nn::sigmoid(&self.mask_head.forward(&states)?)?.reshape((n, m, m))?,
            features: self.feature_head.forward(&states)?,
        })
    }

    /// Convenience: run on a graph using its stored features.
    pub fn forward_graph(&self, g: &SceneGraph) -> Result<SgnOutput> {
        let dtype = self.embeddings.objects.dtype();
        self.forward(&SgnInput::from_graph(g, &self.cfg, dtype)?)
    }
}
