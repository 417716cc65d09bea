//! The full generator: graph network, layout, source-image branch and
//! decoder, plus the discriminators used during training.

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversarial::{GlobalDiscriminator, ObjectDiscriminator};
use crate::error::{Error, Result};
use crate::graph::{validate_graph, MaskSpec, SceneGraph, VocabSizes};
use crate::layout::{batch_layout, resolve_box, ResolvedBox};
use crate::nn::{Linear, ParamStore};
use crate::raster::RgbImage;
use crate::sgn::{Sgn, SgnConfig, SgnInput, SgnOutput};
use crate::synthesis::{occlude, CrnConfig, FeatureExtractor, ImageEncoder, OccludedImage, Crn};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Paper,
    Desk,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Self::Paper),
            "desk" => Ok(Self::Desk),
            other => Err(Error::Config(format!("unknown preset {other:?} (expected paper or desk)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub sgn: SgnConfig,
    pub crn: CrnConfig,
    /// Channels of the encoded source image.
    pub image_channels: usize,
    pub crop_size: usize,
    /// Width each node's `[φ ‖ ψ]` is linearly projected to before it is
    /// painted into the layout; `None` paints it unprojected.
    #[serde(default)]
    pub layout_dim: Option<usize>,
    pub vocab: VocabSizes,
}

impl ModelConfig {
    pub fn new(preset: Preset, resolution: usize, vocab: VocabSizes) -> Self {
        Self {
            sgn: SgnConfig::default(),
            crn: match preset {
                Preset::Paper => CrnConfig::paper(resolution),
                Preset::Desk => CrnConfig::desk(resolution),
            },
            image_channels: 32,
            crop_size: 32,
            layout_dim: match preset {
                Preset::Paper => None,
                Preset::Desk => Some(32),
            },
            vocab,
        }
    }

    pub fn resolution(&self) -> usize {
        self.crn.resolution
    }

    /// Channels of the layout.
    pub fn layout_channels(&self) -> usize {
        self.layout_dim
            .unwrap_or(self.sgn.feature_dim + self.sgn.node_feature_dim)
    }
}

/// One image to generate: the clean source (for appearance features), the
/// graph with its mask flags, and the occluded copy the decoder sees.
#[derive(Debug, Clone, Copy)]
pub struct GenInput<'a> {
    pub source: &'a RgbImage,
    pub graph: &'a SceneGraph,
    pub occluded: &'a OccludedImage,
}

#[derive(Debug, Clone)]
pub struct GenOutput {
    /// `(3, B, H, W)` in `[0, 1]`.
    pub images: Tensor,
    pub sgn: SgnOutput,
    /// Visual features fed to the network, `(N, n)`.
    pub phi: Tensor,
    pub boxes: Vec<ResolvedBox>,
    /// Batch index of every node.
    pub node_image: Vec<usize>,
    /// Index of each sample's first node.
    pub node_offset: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Generator {
    pub cfg: ModelConfig,
    pub sgn: Sgn,
    pub encoder: ImageEncoder,
    pub extractor: FeatureExtractor,
    pub crn: Crn,
    pub layout_proj: Option<Linear>,
    dtype: DType,
}

fn tensor(data: Vec<f64>, shape: (usize, usize), dtype: DType) -> Result<Tensor> {
    Ok(Tensor::from_vec(data, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

impl Generator {
    pub fn new(cfg: ModelConfig, ps: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        let sgn = Sgn::new(cfg.sgn, cfg.vocab, ps, rng)?;
        let encoder = ImageEncoder::new(ps, rng, cfg.image_channels)?;
        let extractor = FeatureExtractor::new(ps, rng, cfg.sgn.feature_dim, cfg.crop_size)?;
        let crn = Crn::new(ps, rng, cfg.crn.clone(), cfg.layout_channels() + cfg.image_channels)?;
        let width = cfg.sgn.feature_dim + cfg.sgn.node_feature_dim;
        let layout_proj = match cfg.layout_dim {
            Some(d) => Some(ps.linear(rng, "layout_proj", width, d)?),
            None => None,
        };
        Ok(Self {
            cfg,
            sgn,
            encoder,
            extractor,
            crn,
            layout_proj,
            dtype: ps.dtype(),
        })
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn resolution(&self) -> usize {
        self.cfg.resolution()
    }

    /// Visual features: extracted from the clean source crop unless the node
    /// is feature-masked (zeros) or carries its own vector.
    fn visual_features(&self, inputs: &[GenInput], sources: &Tensor) -> Result<Tensor> {
        let n_dim = self.cfg.sgn.feature_dim;
        let total: usize = inputs.iter().map(|s| s.graph.nodes.len()).sum();
        let mut constant = vec![0.0f64; total * n_dim];
        let mut crops = Vec::new();
        let mut rows = Vec::new();
        let mut i = 0;
        for (b, s) in inputs.iter().enumerate() {
            for node in &s.graph.nodes {
                match (node.feature_masked, &node.visual_feature, node.bbox) {
                    (true, _, _) => {}
                    (false, Some(f), _) => {
                        if f.len() != n_dim {
                            return Err(Error::Shape(format!(
                                "stored feature has length {}, expected {n_dim}",
                                f.len()
                            )));
                        }
                        for (d, &v) in constant[i * n_dim..(i + 1) * n_dim].iter_mut().zip(f) {
                            *d = v as f64;
                        }
                    }
                    (false, None, Some(bbox)) => {
                        crops.push((b, bbox));
                        rows.push(i);
                    }
                    (false, None, None) => {}
                }
                i += 1;
            }
        }
        let constant = tensor(constant, (total, n_dim), self.dtype)?;
        if crops.is_empty() {
            return Ok(constant);
        }
        let extracted = self.extractor.extract(sources, &crops)?;
        let mut select = vec![0.0f64; total * crops.len()];
        for (k, &row) in rows.iter().enumerate() {
            select[row * crops.len() + k] = 1.0;
        }
        let select = tensor(select, (total, crops.len()), self.dtype)?;
        Ok((select.matmul(&extracted)? + constant)?)
    }

    pub fn forward(&self, inputs: &[GenInput]) -> Result<GenOutput> {
        let r = self.resolution();
        if inputs.is_empty() {
            return Err(Error::Shape("empty generator batch".into()));
        }
        for s in inputs {
            for img in [s.source, &s.occluded.image] {
                if img.width != r || img.height != r {
                    return Err(Error::Shape(format!(
                        "image is {}x{}, working resolution is {r}x{r}",
                        img.width, img.height
                    )));
                }
            }
            let v = validate_graph(s.graph, self.cfg.vocab);
            if !v.is_empty() {
                return Err(Error::InvalidGraph(v));
            }
        }
        let b = inputs.len();
        let sources = Tensor::stack(
            &inputs
                .iter()
                .map(|s| s.source.to_tensor(self.dtype, &Device::Cpu))
                .collect::<Result<Vec<_>>>()?,
            0,
        )?;
        let mut categories = Vec::new();
        let mut boxes = Vec::new();
        let mut edges = Vec::new();
        let mut node_image = Vec::new();
        let mut node_offset = Vec::with_capacity(b);
        for (k, s) in inputs.iter().enumerate() {
            let off = categories.len();
            node_offset.push(off);
            for node in &s.graph.nodes {
                categories.push(node.category_id);
                boxes.extend(node.input_bbox().map(|bb| bb.to_array()).unwrap_or([0.0; 4]));
                node_image.push(k);
            }
            edges.extend(s.graph.edges.iter().map(|e| {
                crate::graph::RelationEdge::new(e.subject_index + off, e.predicate_id, e.object_index + off)
            }));
        }
        let n = categories.len();
        let phi = self.visual_features(inputs, &sources)?;
        let sgn = self.sgn.forward(&SgnInput {
            categories,
            boxes: tensor(boxes, (n, 4), self.dtype)?,
            features: phi.clone(),
            edges,
        })?;
        let predicted: Vec<Vec<f64>> = if n == 0 {
            Vec::new()
        } else {
            sgn.boxes.to_dtype(DType::F64)?.to_vec2()?
        };
        let mut resolved = Vec::with_capacity(n);
        for (k, s) in inputs.iter().enumerate() {
            for (j, node) in s.graph.nodes.iter().enumerate() {
                let p = &predicted[node_offset[k] + j];
                resolved.push(resolve_box(node, [p[0], p[1], p[2], p[3]], r, r));
            }
        }
        let rects: Vec<_> = resolved.iter().map(|x| x.rect).collect();
        let layout = if n == 0 {
            Tensor::zeros((self.cfg.layout_channels(), b, r, r), self.dtype, &Device::Cpu)?
        } else {
            let mut feats = Tensor::cat(&[&phi, &sgn.features], 1)?;
            if let Some(p) = &self.layout_proj {
                feats = p.forward(&feats)?;
            }
            batch_layout(&sgn.masks, &feats, &rects, &node_image, b, r, r)?
        };
        let occluded = Tensor::stack(
            &inputs
                .iter()
                .map(|s| s.occluded.to_tensor(self.dtype))
                .collect::<Result<Vec<_>>>()?,
            1,
        )?;
        let encoded = self.encoder.forward(&occluded)?;
        let images = self.crn.decode(&layout, &encoded)?;
        Ok(GenOutput {
            images,
            sgn,
            phi,
            boxes: resolved,
            node_image,
            node_offset,
        })
    }

    /// Graph network outputs for one image without running the decoder.
    pub fn predict_layout(&self, source: &RgbImage, graph: &SceneGraph) -> Result<SgnOutput> {
        let r = self.resolution();
        if source.width != r || source.height != r {
            return Err(Error::Shape(format!(
                "image is {}x{}, working resolution is {r}x{r}",
                source.width, source.height
            )));
        }
        let v = validate_graph(graph, self.cfg.vocab);
        if !v.is_empty() {
            return Err(Error::InvalidGraph(v));
        }
        let occluded = OccludedImage {
            image: source.clone(),
            indicator: vec![0.0; r * r],
        };
        let input = GenInput {
            source,
            graph,
            occluded: &occluded,
        };
        let sources = source.to_tensor(self.dtype, &Device::Cpu)?.unsqueeze(0)?;
        let phi = self.visual_features(&[input], &sources)?;
        let mut sgn_input = SgnInput::from_graph(graph, &self.cfg.sgn, self.dtype)?;
        sgn_input.features = phi;
        self.sgn.forward(&sgn_input)
    }

    /// Occlude `source` as `mask` says with noise from `seed` and generate
    /// one image. `graph` must already carry the mask flags.
    pub fn generate(&self, source: &RgbImage, graph: &SceneGraph, mask: &MaskSpec, seed: u64) -> Result<RgbImage> {
        let r = self.resolution();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let occluded = occlude(source, &mask.pixel_regions(r, r), mask.fully_generative, &mut rng);
        let out = self.forward(&[GenInput {
            source,
            graph,
            occluded: &occluded,
        }])?;
        RgbImage::from_tensor(&out.images.squeeze(1)?)
    }
}

/// Resample `img` to the working resolution when it differs.
pub fn fit_resolution(img: &RgbImage, resolution: usize) -> RgbImage {
    if img.width == resolution && img.height == resolution {
        img.clone()
    } else {
        img.resized(resolution, resolution)
    }
}

/// Generator and discriminators with their parameter stores.
#[derive(Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub gen_params: ParamStore,
    pub disc_params: ParamStore,
    pub generator: Generator,
    pub d_global: GlobalDiscriminator,
    pub d_obj: ObjectDiscriminator,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64, dtype: DType) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gen_params = ParamStore::new(dtype);
        let mut disc_params = ParamStore::new(dtype);
        let generator = Generator::new(cfg.clone(), &mut gen_params, &mut rng)?;
        let d_global = GlobalDiscriminator::new(&mut disc_params, &mut rng)?;
        let d_obj = ObjectDiscriminator::new(&mut disc_params, &mut rng, cfg.vocab.objects)?;
        Ok(Self {
            cfg,
            gen_params,
            disc_params,
            generator,
            d_global,
            d_obj,
        })
    }
}
