//! Self-supervised training: random masking turns editing into
//! reconstruction of the unmodified input image.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversarial::{
    aux_class_loss, box_loss, gan_loss, photometric_loss, total_synthesis_loss, LossBreakdown, LossTerms,
    LossWeights, Side,
};
use crate::checkpoint;
use crate::clevr::{edit_input, DataSample, Dataset};
use crate::error::{Error, Result};
use crate::graph::{validate_graph, BBox, MaskSpec, OccludedRegion, SceneGraph, Vocab};
use crate::metrics::{eval_case, score_case, EvalMode, ModeMetrics};
use crate::model::{GenInput, Model, ModelConfig, Preset};
use crate::nn::{self, Adam};
use crate::raster::RgbImage;
use crate::synthesis::{crop_regions, occlude};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskingConfig {
    pub p_phi: f64,
    pub p_x: f64,
    pub fully_generative: bool,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        Self {
            p_phi: 0.25,
            p_x: 0.35,
            fully_generative: false,
        }
    }
}

impl MaskingConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("p_phi", self.p_phi), ("p_x", self.p_x)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} is not a probability")));
            }
        }
        Ok(())
    }
}

/// Independent per-node draws: visual feature first, then box. The boxes
/// of feature-masked nodes are occluded.
pub fn sample_masks<R: Rng>(g: &SceneGraph, cfg: &MaskingConfig, rng: &mut R) -> MaskSpec {
    let mut m = MaskSpec {
        fully_generative: cfg.fully_generative,
        ..Default::default()
    };
    for (i, node) in g.nodes.iter().enumerate() {
        let phi = rng.random_bool(cfg.p_phi);
        let x = rng.random_bool(cfg.p_x);
        if phi {
            m.nodes_feature_masked.insert(i);
            if let Some(bbox) = node.bbox {
                m.occlude_regions.push(OccludedRegion { node: Some(i), bbox });
            }
        }
        if x {
            m.nodes_bbox_masked.insert(i);
        }
    }
    m
}

/// Copy of `g` with the mask flags of `m` set and masked features zeroed.
pub fn apply_mask(g: &SceneGraph, m: &MaskSpec) -> SceneGraph {
    let mut out = g.clone();
    for &i in &m.nodes_feature_masked {
        if let Some(n) = out.nodes.get_mut(i) {
            n.feature_masked = true;
            if let Some(f) = n.visual_feature.as_mut() {
                f.iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
    for &i in &m.nodes_bbox_masked {
        if let Some(n) = out.nodes.get_mut(i) {
            n.bbox_masked = true;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[serde(rename = "self")]
    SelfSupervised,
    Supervised,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "self" => Ok(Mode::SelfSupervised),
            "supervised" => Ok(Mode::Supervised),
            other => Err(Error::Config(format!("unknown mode {other:?} (expected self or supervised)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub mode: Mode,
    pub masking: MaskingConfig,
    pub weights: LossWeights,
    pub preset: Preset,
    pub resolution: usize,
    pub validate_every: u64,
    pub val_samples: usize,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 10_000,
            batch_size: 8,
            lr: 1e-4,
            seed: 0,
            mode: Mode::SelfSupervised,
            masking: MaskingConfig::default(),
            weights: LossWeights::default(),
            preset: Preset::Desk,
            resolution: 64,
            validate_every: 500,
            val_samples: 64,
            checkpoint_every: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.masking.validate()?;
        self.weights.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        Ok(())
    }
}

/// One training example. In self-supervised mode `graph` is the unmasked
/// source graph and the target is the source image itself.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub source: RgbImage,
    pub graph: SceneGraph,
    /// `None` means the source image.
    pub target: Option<RgbImage>,
    /// Ground-truth box per node of `graph`.
    pub target_boxes: Vec<Option<BBox>>,
    /// Fixed masking for supervised pairs.
    pub edit_mask: Option<MaskSpec>,
}

impl TrainSample {
    pub fn self_supervised(source: RgbImage, graph: SceneGraph) -> Self {
        let target_boxes = graph.nodes.iter().map(|n| n.bbox).collect();
        Self {
            source,
            graph,
            target: None,
            target_boxes,
            edit_mask: None,
        }
    }

    pub fn supervised(s: &DataSample) -> Result<Self> {
        let (graph, mask) = edit_input(&s.source_graph, &s.target_graph, &s.edit)?;
        if graph.nodes.len() != s.target_graph.nodes.len() {
            return Err(Error::Dataset(format!("sample {}: target graph does not align", s.id)));
        }
        Ok(Self {
            source: s.source.clone(),
            target_boxes: s.target_graph.nodes.iter().map(|n| n.bbox).collect(),
            graph,
            target: Some(s.target.clone()),
            edit_mask: Some(mask),
        })
    }

    pub fn target(&self) -> &RgbImage {
        self.target.as_ref().unwrap_or(&self.source)
    }
}

/// A crop handed to the object discriminator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropRecord {
    pub image: usize,
    pub node: usize,
    pub bbox: BBox,
    pub category: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub losses: LossBreakdown,
    pub d_loss: f64,
    pub masks: Vec<MaskSpec>,
    pub crops: Vec<CropRecord>,
}

#[derive(Debug)]
pub struct Trainer {
    pub model: Model,
    pub cfg: TrainConfig,
    pub vocab: Vocab,
    pub adam_g: Adam,
    pub adam_d: Adam,
    /// Completed steps.
    pub step: u64,
    pub last_val_mae: Option<f64>,
}

/// RNG for everything random in step `step`; independent of history so
/// training can resume anywhere.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step + 1);
    rng
}

impl Trainer {
    pub fn new(cfg: TrainConfig, vocab: Vocab, dtype: DType) -> Result<Self> {
        let model_cfg = ModelConfig::new(cfg.preset, cfg.resolution, vocab.sizes());
        Self::with_model_config(cfg, model_cfg, vocab, dtype)
    }

    pub fn with_model_config(cfg: TrainConfig, model_cfg: ModelConfig, vocab: Vocab, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(model_cfg, cfg.seed, dtype)?;
        let adam_g = Adam::new(&model.gen_params, cfg.lr)?;
        let adam_d = Adam::new(&model.disc_params, cfg.lr)?;
        Ok(Self {
            model,
            cfg,
            vocab,
            adam_g,
            adam_d,
            step: 0,
            last_val_mae: None,
        })
    }

    /// Losses of a batch under the masks and noise of the current step,
    /// without updating anything.
    pub fn losses(&self, batch: &[TrainSample]) -> Result<(Tensor, Tensor, StepReport)> {
        if batch.is_empty() {
            return Err(Error::Dataset("empty batch".into()));
        }
        let r = self.model.cfg.resolution();
        let w = &self.cfg.weights;
        let mut rng = step_rng(self.cfg.seed, self.step);
        let mut graphs = Vec::with_capacity(batch.len());
        let mut masks = Vec::with_capacity(batch.len());
        let mut occluded = Vec::with_capacity(batch.len());
        for s in batch {
            let (g, m) = match (&s.edit_mask, self.cfg.mode) {
                (Some(m), _) => (s.graph.clone(), m.clone()),
                (None, Mode::SelfSupervised) => {
                    let m = sample_masks(&s.graph, &self.cfg.masking, &mut rng);
                    (apply_mask(&s.graph, &m), m)
                }
                (None, Mode::Supervised) => {
                    return Err(Error::Dataset("supervised training needs edit pairs".into()));
                }
            };
            occluded.push(occlude(&s.source, &m.pixel_regions(r, r), m.fully_generative, &mut rng));
            graphs.push(g);
            masks.push(m);
        }
        let inputs: Vec<GenInput> = batch
            .iter()
            .zip(&graphs)
            .zip(&occluded)
            .map(|((s, g), o)| GenInput {
                source: &s.source,
                graph: g,
                occluded: o,
            })
            .collect();
        let out = self.model.generator.forward(&inputs)?;
        let dtype = self.model.generator.dtype();
        let real = Tensor::stack(
            &batch
                .iter()
                .map(|s| s.target().to_tensor(dtype, &candle_core::Device::Cpu))
                .collect::<Result<Vec<_>>>()?,
            1,
        )?;
        let fake = &out.images;

        // box regression on every node with a known box
        let mut rows = Vec::new();
        let mut wanted = Vec::new();
        for (k, s) in batch.iter().enumerate() {
            if s.target_boxes.len() != graphs[k].nodes.len() {
                return Err(Error::Shape("one target box slot per node required".into()));
            }
            for (j, b) in s.target_boxes.iter().enumerate() {
                if let Some(b) = b {
                    rows.push((out.node_offset[k] + j) as u32);
                    wanted.extend(b.to_array());
                }
            }
        }
        let l_b = if rows.is_empty() {
            None
        } else {
            let n = rows.len();
            let idx = Tensor::from_vec(rows, n, &candle_core::Device::Cpu)?;
            let target = Tensor::from_vec(wanted, (n, 4), &candle_core::Device::Cpu)?.to_dtype(dtype)?;
            Some(box_loss(&out.sgn.boxes.index_select(&idx, 0)?, &target)?)
        };

        // object crops: exactly the occluded regions that belong to a node
        let mut crops = Vec::new();
        for (k, m) in masks.iter().enumerate() {
            for reg in &m.occlude_regions {
                if let Some(node) = reg.node {
                    crops.push(CropRecord {
                        image: k,
                        node,
                        bbox: reg.bbox,
                        category: graphs[k].nodes[node].category_id,
                    });
                }
            }
        }
        let boxes: Vec<(usize, BBox)> = crops.iter().map(|c| (c.image, c.bbox)).collect();
        let labels: Vec<usize> = crops.iter().map(|c| c.category).collect();
        let crop_size = self.model.cfg.crop_size;
        let real_bchw = real.transpose(0, 1)?.contiguous()?;
        let fake_bchw = fake.transpose(0, 1)?.contiguous()?;
        let fake_detached = fake.detach();

        // discriminator objective against the current generator output
        let mut d_loss = (gan_loss(
            Some(&self.model.d_global.forward(&real)?),
            &self.model.d_global.forward(&fake_detached)?,
            Side::Discriminator,
        )? * w.lambda_g)?;
        // generator objective against the same, not yet updated, discriminators
        let gan_g = gan_loss(None, &self.model.d_global.forward(fake)?, Side::Generator)?;
        let (mut gan_o, mut aux) = (None, None);
        if !crops.is_empty() {
            let real_crops = crop_regions(&real_bchw, &boxes, crop_size)?;
            let fake_crops_d = crop_regions(&fake_bchw.detach(), &boxes, crop_size)?;
            let (rf_real, cls_real) = self.model.d_obj.forward(&real_crops)?;
            let (rf_fake, cls_fake) = self.model.d_obj.forward(&fake_crops_d)?;
            d_loss = (d_loss + (gan_loss(Some(&rf_real), &rf_fake, Side::Discriminator)? * w.lambda_o)?)?;
            let aux_d = (aux_class_loss(&cls_real, &labels)? + aux_class_loss(&cls_fake, &labels)?)?;
            d_loss = (d_loss + (aux_d * w.lambda_a)?)?;

            let fake_crops = crop_regions(&fake_bchw, &boxes, crop_size)?;
            let (rf, cls) = self.model.d_obj.forward(&fake_crops)?;
            gan_o = Some(gan_loss(None, &rf, Side::Generator)?);
            aux = Some(aux_class_loss(&cls, &labels)?);
        }
        let terms = LossTerms {
            l_r: photometric_loss(fake, &real)?,
            l_b,
            gan_g: Some(gan_g),
            gan_o,
            aux,
        };
        let (total, losses) = total_synthesis_loss(&terms, w)?;
        let report = StepReport {
            step: self.step,
            losses,
            d_loss: nn::scalar(&d_loss)?,
            masks,
            crops,
        };
        Ok((total, d_loss, report))
    }

    /// One discriminator and one generator update. Nothing changes when a
    /// loss is not finite.
    pub fn train_step(&mut self, batch: &[TrainSample]) -> Result<StepReport> {
        let (total, d_loss, report) = self.losses(batch)?;
        if !report.losses.is_finite() {
            return Err(Error::NonFinite {
                step: self.step,
                what: "generator",
            });
        }
        if !report.d_loss.is_finite() {
            return Err(Error::NonFinite {
                step: self.step,
                what: "discriminator",
            });
        }
        let g_grads = total.backward()?;
        let d_grads = d_loss.backward()?;
        self.adam_d.apply(&self.model.disc_params, &d_grads)?;
        self.adam_g.apply(&self.model.gen_params, &g_grads)?;
        self.step += 1;
        Ok(report)
    }
}

/// Indices of batch `step` in a reshuffled-per-epoch pass over `n` items.
pub fn batch_indices(seed: u64, step: u64, batch: usize, n: usize) -> Vec<usize> {
    let mut cache: Option<(u64, Vec<usize>)> = None;
    (0..batch)
        .map(|k| {
            let global = step * batch as u64 + k as u64;
            let epoch = global / n as u64;
            if cache.as_ref().map(|c| c.0) != Some(epoch) {
                let mut perm: Vec<usize> = (0..n).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream((1 << 40) + epoch);
                perm.shuffle(&mut rng);
                cache = Some((epoch, perm));
            }
            cache.as_ref().expect("filled above").1[(global % n as u64) as usize]
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub step: u64,
    pub mae_all: f64,
    pub mae_roi: f64,
    pub ssim_all: f64,
    pub ssim_roi: f64,
}

/// Auto-encoding metrics over `samples` with the current weights.
pub fn validate(trainer: &Trainer, samples: &[DataSample]) -> Result<ValidationRecord> {
    let gen = &trainer.model.generator;
    let mut acc = ModeMetrics::default();
    for (i, s) in samples.iter().enumerate() {
        if let Some(case) = eval_case(EvalMode::Auto, s, gen.resolution())? {
            let m = score_case(gen, &s.source, &s.source, &case, i as u64)?;
            acc.count += 1;
            acc.mae_all += m.mae_all;
            acc.mae_roi += m.mae_roi;
            acc.ssim_all += m.ssim_all;
            acc.ssim_roi += m.ssim_roi;
        }
    }
    let n = acc.count.max(1) as f64;
    Ok(ValidationRecord {
        step: trainer.step,
        mae_all: acc.mae_all / n,
        mae_roi: acc.mae_roi / n,
        ssim_all: acc.ssim_all / n,
        ssim_roi: acc.ssim_roi / n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub start_step: u64,
    pub final_step: u64,
    pub seconds: f64,
    pub checkpoint: PathBuf,
    pub validations: Vec<ValidationRecord>,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.sgck";
pub const LOG_FILE: &str = "train_log.csv";
pub const VAL_LOG_FILE: &str = "val_log.csv";

/// Training examples of a split, checked before any step runs.
pub fn load_training_set(ds: &Dataset, cfg: &TrainConfig, split: &str) -> Result<Vec<TrainSample>> {
    if ds.manifest.resolution != cfg.resolution {
        return Err(Error::Dataset(format!(
            "dataset is rendered at {0}x{0}, training resolution is {1}x{1}",
            ds.manifest.resolution, cfg.resolution
        )));
    }
    let sizes = ds.vocab.sizes();
    let samples = ds.load_split(split, None)?;
    if samples.is_empty() {
        return Err(Error::Dataset(format!("split {split:?} is empty")));
    }
    samples
        .iter()
        .map(|s| {
            for g in [&s.source_graph, &s.target_graph] {
                let v = validate_graph(g, sizes);
                if !v.is_empty() {
                    return Err(Error::Dataset(format!("sample {}: {}", s.id, Error::InvalidGraph(v))));
                }
            }
            if s.source.width != cfg.resolution || s.source.height != cfg.resolution {
                return Err(Error::Dataset(format!("sample {} has the wrong image size", s.id)));
            }
            match cfg.mode {
                // never touches the edit targets
                Mode::SelfSupervised => Ok(TrainSample::self_supervised(s.source.clone(), s.source_graph.clone())),
                Mode::Supervised => TrainSample::supervised(s),
            }
        })
        .collect()
}

/// Train from scratch or from `resume` up to `cfg.steps`, logging to and
/// checkpointing into `out_dir`.
pub fn fit(ds: &Dataset, cfg: TrainConfig, out_dir: impl AsRef<Path>, resume: Option<&Path>) -> Result<FitReport> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir)?;
    cfg.validate()?;
    let train = load_training_set(ds, &cfg, "train")?;
    let val = ds.load_split("val", Some(cfg.val_samples))?;
    let mut trainer = match resume {
        Some(p) => {
            let mut t = checkpoint::load_trainer(p)?;
            if t.vocab != ds.vocab {
                return Err(Error::Shape("checkpoint vocabulary differs from the dataset".into()));
            }
            t.cfg.steps = cfg.steps;
            t
        }
        None => Trainer::new(cfg, ds.vocab.clone(), DType::F32)?,
    };
    let start = trainer.step;
    let ckpt = out_dir.join(CHECKPOINT_FILE);
    let log_path = out_dir.join(LOG_FILE);
    let val_path = out_dir.join(VAL_LOG_FILE);
    let open_log = |p: &Path, header: &str| -> Result<File> {
        let fresh = resume.is_none() || !p.exists();
        let mut f = OpenOptions::new().create(true).append(!fresh).write(true).truncate(fresh).open(p)?;
        if fresh {
            writeln!(f, "{header}")?;
        }
        Ok(f)
    };
    let mut log = open_log(&log_path, LossBreakdown::csv_header())?;
    let mut val_log = open_log(&val_path, "step,mae_all,mae_roi,ssim_all,ssim_roi")?;
    let t0 = Instant::now();
    let mut validations = Vec::new();
    if trainer.step >= trainer.cfg.steps {
        checkpoint::save_trainer(&ckpt, &trainer)?;
    }
    while trainer.step < trainer.cfg.steps {
        let idx = batch_indices(trainer.cfg.seed, trainer.step, trainer.cfg.batch_size, train.len());
        let batch: Vec<TrainSample> = idx.iter().map(|&i| train[i].clone()).collect();
        let report = trainer.train_step(&batch)?;
        writeln!(log, "{}", report.losses.csv_row(report.step))?;
        let done = trainer.step;
        if done % 50 == 0 {
            log.flush()?;
            tracing::info!(
                step = done,
                l_r = report.losses.l_r,
                total = report.losses.total,
                secs = t0.elapsed().as_secs_f64(),
                "training"
            );
        }
        if trainer.cfg.validate_every > 0 && done % trainer.cfg.validate_every == 0 && !val.is_empty() {
            let v = validate(&trainer, &val)?;
            writeln!(val_log, "{},{},{},{},{}", v.step, v.mae_all, v.mae_roi, v.ssim_all, v.ssim_roi)?;
            val_log.flush()?;
            tracing::info!(step = done, mae = v.mae_all, ssim = v.ssim_all, "validation");
            trainer.last_val_mae = Some(v.mae_all);
            validations.push(v);
        }
        if done == trainer.cfg.steps || (trainer.cfg.checkpoint_every > 0 && done % trainer.cfg.checkpoint_every == 0) {
            checkpoint::save_trainer(&ckpt, &trainer)?;
        }
    }
    log.flush()?;
    Ok(FitReport {
        start_step: start,
        final_step: trainer.step,
        seconds: t0.elapsed().as_secs_f64(),
        checkpoint: ckpt,
        validations,
    })
}
