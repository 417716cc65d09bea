//! Editing sessions shared by the HTTP service and the one-shot CLI.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clevr::Dataset;
use crate::error::{Error, Result};
use crate::graph::{apply_edits, hex, validate_graph, EditOp, MaskSpec, SceneGraph, Vocab};
use crate::model::{fit_resolution, Generator};
use crate::raster::RgbImage;

/// Resize `source` to the model resolution, apply `edits` cumulatively and
/// decode. Both the CLI and the service go through here.
pub fn render_edit(gen: &Generator, source: &RgbImage, graph: &SceneGraph, edits: &[EditOp], seed: u64) -> Result<Vec<u8>> {
    let source = fit_resolution(source, gen.resolution());
    let (edited, mask) = apply_edits(graph, edits)?;
    gen.generate(&source, &edited, &mask, seed)?.to_png_bytes()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSummary {
    pub nodes_feature_masked: Vec<usize>,
    pub nodes_bbox_masked: Vec<usize>,
    pub occluded_regions: usize,
    pub fully_generative: bool,
}

impl From<&MaskSpec> for MaskSummary {
    fn from(m: &MaskSpec) -> Self {
        Self {
            nodes_feature_masked: m.nodes_feature_masked.iter().copied().collect(),
            nodes_bbox_masked: m.nodes_bbox_masked.iter().copied().collect(),
            occluded_regions: m.occlude_regions.len(),
            fully_generative: m.fully_generative,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Session {
    pub id: String,
    pub sample_id: Option<String>,
    /// Original upload or sample image, not resized.
    pub source: RgbImage,
    source_digest: String,
    pub source_graph: SceneGraph,
    pub graph: SceneGraph,
    pub mask: MaskSpec,
    pub history: Vec<EditOp>,
    pub seed: u64,
    pub last_image: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub id: String,
    pub sample_id: Option<String>,
    pub graph: SceneGraph,
    pub history: Vec<EditOp>,
    pub mask: MaskSummary,
    pub seed: u64,
    pub source_image: String,
    pub image: Option<String>,
}

impl Session {
    fn view(&self) -> SessionView {
        SessionView {
            id: self.id.clone(),
            sample_id: self.sample_id.clone(),
            graph: self.graph.clone(),
            history: self.history.clone(),
            mask: (&self.mask).into(),
            seed: self.seed,
            source_image: self.source_digest.clone(),
            image: self.last_image.clone(),
        }
    }

    fn image_id(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.source_digest.as_bytes());
        h.update(self.graph.digest().as_bytes());
        h.update(serde_json::to_vec(&self.mask).expect("mask serialization is infallible"));
        h.update(self.seed.to_le_bytes());
        hex(&h.finalize()[..16])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleInfo {
    pub id: String,
    pub edit: crate::clevr::EditDescriptor,
}

/// In-memory session store around an immutable generator.
pub struct EditService {
    generator: Option<Arc<Generator>>,
    vocab: Vocab,
    dataset: Option<Dataset>,
    sessions: Mutex<HashMap<String, Arc<Mutex<Session>>>>,
    images: Mutex<HashMap<String, Arc<Vec<u8>>>>,
    next_id: AtomicU64,
    /// Validation MAE recorded in the checkpoint, if any.
    pub validation_mae: Option<f64>,
}

fn lock<T>(m: &Mutex<T>) -> std::sync::MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

impl EditService {
    pub fn new(generator: Option<Arc<Generator>>, vocab: Vocab, dataset: Option<Dataset>) -> Self {
        Self {
            generator,
            vocab,
            dataset,
            sessions: Mutex::new(HashMap::new()),
            images: Mutex::new(HashMap::new()),
            next_id: AtomicU64::new(1),
            validation_mae: None,
        }
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn generator(&self) -> Option<&Arc<Generator>> {
        self.generator.as_ref()
    }

    pub fn samples(&self, split: &str) -> Result<Vec<SampleInfo>> {
        let ds = self
            .dataset
            .as_ref()
            .ok_or_else(|| Error::Unavailable("no dataset loaded".into()))?;
        ds.split(split)?
            .iter()
            .map(|id| {
                Ok(SampleInfo {
                    id: id.clone(),
                    edit: ds.entry(id)?.edit.clone(),
                })
            })
            .collect()
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>> {
        lock(&self.sessions)
            .get(id)
            .cloned()
            .ok_or_else(|| Error::NotFound(format!("session {id}")))
    }

    fn insert(&self, sample_id: Option<String>, source: RgbImage, graph: SceneGraph, seed: u64) -> Result<SessionView> {
        let n = self.next_id.fetch_add(1, Ordering::Relaxed);
        let source_png = source.to_png_bytes()?;
        let source_digest = hex(&Sha256::digest(&source_png)[..16]);
        lock(&self.images).insert(source_digest.clone(), Arc::new(source_png));
        let mut s = Session {
            id: format!("s{n}"),
            sample_id,
            source,
            source_digest,
            source_graph: graph.clone(),
            graph,
            mask: MaskSpec::default(),
            history: Vec::new(),
            seed,
            last_image: None,
        };
        if self.generator.is_some() {
            self.render(&mut s)?;
        }
        let view = s.view();
        lock(&self.sessions).insert(s.id.clone(), Arc::new(Mutex::new(s)));
        Ok(view)
    }

    pub fn create_from_sample(&self, sample_id: &str, seed: u64) -> Result<SessionView> {
        let ds = self
            .dataset
            .as_ref()
            .ok_or_else(|| Error::Unavailable("no dataset loaded".into()))?;
        ds.entry(sample_id)
            .map_err(|_| Error::NotFound(format!("sample {sample_id}")))?;
        let s = ds.load(sample_id)?;
        self.insert(Some(s.id), s.source, s.source_graph, seed)
    }

    /// Uploaded PNG and graph; the graph must validate against the vocabulary.
    pub fn create_from_upload(&self, png: &[u8], graph: SceneGraph, seed: u64) -> Result<SessionView> {
        let v = validate_graph(&graph, self.vocab.sizes());
        if !v.is_empty() {
            return Err(Error::InvalidGraph(v));
        }
        let image = RgbImage::from_png_bytes(png)?;
        self.insert(None, image, graph, seed)
    }

    pub fn get(&self, id: &str) -> Result<SessionView> {
        let s = self.session(id)?;
        let view = lock(&s).view();
        Ok(view)
    }

    /// Apply one more edit. A rejected edit leaves the session unchanged.
    pub fn post_edit(&self, id: &str, op: EditOp) -> Result<SessionView> {
        let s = self.session(id)?;
        let mut s = lock(&s);
        let mut history = s.history.clone();
        history.push(op);
        let (graph, mask) = apply_edits(&s.source_graph, &history)?;
        s.graph = graph;
        s.mask = mask;
        s.history = history;
        s.last_image = None;
        Ok(s.view())
    }

    /// Render the current state, drawing a fresh noise seed first when
    /// `reseed` is set.
    pub fn generate(&self, id: &str, reseed: bool) -> Result<SessionView> {
        if self.generator.is_none() {
            return Err(Error::Unavailable("no model checkpoint loaded".into()));
        }
        let s = self.session(id)?;
        let mut s = lock(&s);
        if reseed {
            s.seed = splitmix(s.seed);
        }
        self.render(&mut s)?;
        Ok(s.view())
    }

    fn render(&self, s: &mut Session) -> Result<()> {
        let gen = self
            .generator
            .as_ref()
            .ok_or_else(|| Error::Unavailable("no model checkpoint loaded".into()))?;
        let id = s.image_id();
        if !lock(&self.images).contains_key(&id) {
            let png = render_edit(gen, &s.source, &s.source_graph, &s.history, s.seed)?;
            lock(&self.images).insert(id.clone(), Arc::new(png));
        }
        s.last_image = Some(id);
        Ok(())
    }

    pub fn image(&self, id: &str) -> Result<Arc<Vec<u8>>> {
        lock(&self.images)
            .get(id)
            .cloned()
            .ok_or_else(|| Error::NotFound(format!("image {id}")))
    }

    pub fn cached_images(&self) -> usize {
        lock(&self.images).len()
    }
}

fn splitmix(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
