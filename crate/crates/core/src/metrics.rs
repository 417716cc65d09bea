//! Reconstruction metrics, evaluation drivers and predicate heatmaps.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clevr::{edit_input, DataSample, Dataset, EditKind};
use crate::error::{Error, Result};
use crate::graph::{hex, MaskSpec, OccludedRegion, SceneGraph};
use crate::model::{fit_resolution, Generator};
use crate::raster::{union_mask, PixelRect, RgbImage};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn same_shape(a: &RgbImage, b: &RgbImage) -> Result<()> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::Metric(format!(
            "images differ in size: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

/// Mean absolute difference on the 0–255 scale over all pixels or over the
/// union of `roi`. An empty region gives 0.
pub fn mae(a: &RgbImage, b: &RgbImage, roi: Option<&[PixelRect]>) -> Result<f64> {
    same_shape(a, b)?;
    let plane = a.width * a.height;
    let mask = roi.map(|r| union_mask(r, a.height, a.width));
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for p in 0..plane {
        if mask.as_ref().is_some_and(|m| !m[p]) {
            continue;
        }
        for c in 0..3 {
            sum += (a.data[c * plane + p] as f64 - b.data[c * plane + p] as f64).abs();
        }
        count += 3;
    }
    if count == 0 {
        tracing::warn!("MAE over an empty region of interest is reported as 0");
        return Ok(0.0);
    }
    Ok(255.0 * sum / count as f64)
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering of an `h × w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x0 in 0..ow {
            rows[y * ow + x0] = (0..k).map(|i| g[i] * x[y * w + x0 + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y0 in 0..oh {
        for x0 in 0..ow {
            out[y0 * ow + x0] = (0..k).map(|i| g[i] * rows[(y0 + i) * ow + x0]).sum();
        }
    }
    out
}

/// Mean structural similarity ×100 with an 11×11 Gaussian window (σ 1.5)
/// over valid window positions, averaged over channels. With `roi`, only
/// windows centred inside the region count.
pub fn ssim(a: &RgbImage, b: &RgbImage, roi: Option<&[PixelRect]>) -> Result<f64> {
    same_shape(a, b)?;
    let (h, w) = (a.height, a.width);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Metric(format!(
            "{w}x{h} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let g = gaussian_window();
    let half = SSIM_WINDOW / 2;
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let selected: Vec<bool> = match roi {
        None => vec![true; oh * ow],
        Some(rects) => {
            let m = union_mask(rects, h, w);
            if !m.iter().any(|&v| v) {
                tracing::warn!("SSIM over an empty region of interest is reported as 0");
                return Ok(0.0);
            }
            let mut sel: Vec<bool> = (0..oh * ow).map(|i| m[(i / ow + half) * w + i % ow + half]).collect();
            if !sel.iter().any(|&v| v) {
                // region hugs the border: use the nearest window centres
                for (p, _) in m.iter().enumerate().filter(|(_, &v)| v) {
                    let y = (p / w).clamp(half, h - 1 - half) - half;
                    let x = (p % w).clamp(half, w - 1 - half) - half;
                    sel[y * ow + x] = true;
                }
            }
            sel
        }
    };
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let plane = h * w;
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..3 {
        let pa: Vec<f64> = a.data[c * plane..(c + 1) * plane].iter().map(|&v| v as f64).collect();
        let pb: Vec<f64> = b.data[c * plane..(c + 1) * plane].iter().map(|&v| v as f64).collect();
        let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<f64>>();
        let mu_a = filter_valid(&pa, h, w, &g);
        let mu_b = filter_valid(&pb, h, w, &g);
        let e_aa = filter_valid(&prod(&pa, &pa), h, w, &g);
        let e_bb = filter_valid(&prod(&pb, &pb), h, w, &g);
        let e_ab = filter_valid(&prod(&pa, &pb), h, w, &g);
        for i in 0..oh * ow {
            if !selected[i] {
                continue;
            }
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    Ok(100.0 * total / count as f64)
}

// ---------------------------------------------------------------------------
// Evaluation

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Reconstruct one occluded object with its visual feature.
    Auto,
    /// As `Auto` with the object's visual feature withheld.
    AutoNoFeature,
    Remove,
    Replace,
    Relationship,
    Add,
}

impl EvalMode {
    pub fn name(self) -> &'static str {
        match self {
            EvalMode::Auto => "auto",
            EvalMode::AutoNoFeature => "auto_no_feature",
            EvalMode::Remove => "remove",
            EvalMode::Replace => "replace",
            EvalMode::Relationship => "relationship",
            EvalMode::Add => "add",
        }
    }

    fn edit_kind(self) -> Option<EditKind> {
        match self {
            EvalMode::Remove => Some(EditKind::Remove),
            EvalMode::Replace => Some(EditKind::Attribute),
            EvalMode::Relationship => Some(EditKind::Swap),
            EvalMode::Add => Some(EditKind::Add),
            EvalMode::Auto | EvalMode::AutoNoFeature => None,
        }
    }
}

impl std::str::FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "auto" => EvalMode::Auto,
            "auto_no_feature" | "auto-no-feature" => EvalMode::AutoNoFeature,
            "remove" => EvalMode::Remove,
            "replace" => EvalMode::Replace,
            "relationship" => EvalMode::Relationship,
            "add" => EvalMode::Add,
            other => return Err(Error::Config(format!("unknown evaluation mode {other:?}"))),
        })
    }
}

/// Everything needed to run and score one evaluation case.
#[derive(Debug, Clone)]
pub struct EvalCase {
    pub graph: SceneGraph,
    pub mask: MaskSpec,
    pub roi: Vec<PixelRect>,
}

/// The object reconstructed in auto-encoding: chosen from the sample id so
/// every run picks the same one.
pub fn auto_candidate(sample: &DataSample) -> Option<usize> {
    let n = sample.source_graph.nodes.len();
    if n == 0 {
        return None;
    }
    let key = sample.id.bytes().fold(0usize, |h, b| h.wrapping_mul(31).wrapping_add(b as usize));
    Some(key % n)
}

/// Build the inputs of `mode` for `sample`, or `None` when the sample has
/// no case for that mode.
pub fn eval_case(mode: EvalMode, sample: &DataSample, resolution: usize) -> Result<Option<EvalCase>> {
    match mode {
        EvalMode::Auto | EvalMode::AutoNoFeature => {
            let Some(k) = auto_candidate(sample) else {
                return Ok(None);
            };
            let mut graph = sample.source_graph.clone();
            let Some(bbox) = graph.nodes[k].bbox else {
                return Ok(None);
            };
            let mut mask = MaskSpec::default();
            mask.occlude_regions.push(OccludedRegion { node: Some(k), bbox });
            if mode == EvalMode::AutoNoFeature {
                graph.nodes[k].feature_masked = true;
                mask.nodes_feature_masked.insert(k);
            }
            let roi = mask.pixel_regions(resolution, resolution);
            Ok(Some(EvalCase { graph, mask, roi }))
        }
        _ => {
            if Some(sample.edit.kind()) != mode.edit_kind() {
                return Ok(None);
            }
            let (graph, mask) = edit_input(&sample.source_graph, &sample.target_graph, &sample.edit)?;
            let mut roi = mask.pixel_regions(resolution, resolution);
            if mode == EvalMode::Add {
                if let Some(b) = sample.target_graph.nodes.last().and_then(|n| n.bbox) {
                    roi.push(b.to_pixel_rect(resolution, resolution));
                }
            }
            Ok(Some(EvalCase { graph, mask, roi }))
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ModeMetrics {
    pub count: usize,
    pub mae_all: f64,
    pub mae_roi: f64,
    pub ssim_all: f64,
    pub ssim_roi: f64,
}

impl ModeMetrics {
    fn add(&mut self, other: &ModeMetrics) {
        self.count += other.count;
        self.mae_all += other.mae_all;
        self.mae_roi += other.mae_roi;
        self.ssim_all += other.ssim_all;
        self.ssim_roi += other.ssim_roi;
    }

    fn mean(mut self) -> Self {
        if self.count > 0 {
            let n = self.count as f64;
            self.mae_all /= n;
            self.mae_roi /= n;
            self.ssim_all /= n;
            self.ssim_roi /= n;
        }
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub modes: BTreeMap<String, ModeMetrics>,
    /// Count-weighted over the manipulation modes (all modes when none ran).
    pub aggregate: ModeMetrics,
    pub samples: usize,
    pub split: String,
    pub seed: u64,
    pub ssim: SsimParams,
    pub config_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub split: String,
    pub limit: Option<usize>,
    /// Noise seed; sample `i` uses `seed + i`.
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            split: "test".into(),
            limit: None,
            seed: 0,
        }
    }
}

/// Generate and score one case.
pub fn score_case(gen: &Generator, source: &RgbImage, target: &RgbImage, case: &EvalCase, seed: u64) -> Result<ModeMetrics> {
    let r = gen.resolution();
    let src = fit_resolution(source, r);
    let tgt = fit_resolution(target, r);
    let out = gen.generate(&src, &case.graph, &case.mask, seed)?.quantized();
    Ok(ModeMetrics {
        count: 1,
        mae_all: mae(&out, &tgt, None)?,
        mae_roi: mae(&out, &tgt, Some(&case.roi))?,
        ssim_all: ssim(&out, &tgt, None)?,
        ssim_roi: ssim(&out, &tgt, Some(&case.roi))?,
    })
}

pub fn evaluate_samples(gen: &Generator, samples: &[DataSample], modes: &[EvalMode], opts: &EvalOptions) -> Result<EvalReport> {
    let r = gen.resolution();
    let mut per_mode: BTreeMap<EvalMode, ModeMetrics> = BTreeMap::new();
    for &mode in modes {
        let mut acc = ModeMetrics::default();
        for (i, s) in samples.iter().enumerate() {
            let Some(case) = eval_case(mode, s, r)? else {
                continue;
            };
            let target = if mode.edit_kind().is_some() { &s.target } else { &s.source };
            acc.add(&score_case(gen, &s.source, target, &case, opts.seed.wrapping_add(i as u64))?);
        }
        if acc.count == 0 {
            return Err(Error::Dataset(format!(
                "no samples in split {:?} support mode {}",
                opts.split,
                mode.name()
            )));
        }
        per_mode.insert(mode, acc);
    }
    let manipulation: Vec<_> = per_mode.iter().filter(|(m, _)| m.edit_kind().is_some()).collect();
    let mut agg = ModeMetrics::default();
    if manipulation.is_empty() {
        per_mode.values().for_each(|m| agg.add(m));
    } else {
        manipulation.iter().for_each(|(_, m)| agg.add(m));
    }
    let ssim = SsimParams {
        window: SSIM_WINDOW,
        sigma: SSIM_SIGMA,
        k1: SSIM_K1,
        k2: SSIM_K2,
    };
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&gen.cfg)?);
    h.update(serde_json::to_vec(&ssim)?);
    Ok(EvalReport {
        modes: per_mode.into_iter().map(|(m, v)| (m.name().to_string(), v.mean())).collect(),
        aggregate: agg.mean(),
        samples: samples.len(),
        split: opts.split.clone(),
        seed: opts.seed,
        ssim,
        config_digest: hex(&h.finalize()),
    })
}

pub fn evaluate(gen: &Generator, ds: &Dataset, modes: &[EvalMode], opts: &EvalOptions) -> Result<EvalReport> {
    let samples = ds.load_split(&opts.split, opts.limit)?;
    evaluate_samples(gen, &samples, modes, opts)
}

// ---------------------------------------------------------------------------
// Predicate heatmaps

pub const HEATMAP_BINS: usize = 25;

/// Axis (0 = horizontal, 1 = vertical) and sign of the subject-minus-object
/// centre offset a spatial predicate implies.
pub fn expected_offset_sign(predicate: &str) -> Option<(usize, f64)> {
    match predicate {
        "left of" => Some((0, -1.0)),
        "right of" => Some((0, 1.0)),
        "behind" | "above" => Some((1, -1.0)),
        "in front of" | "below" => Some((1, 1.0)),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredicateHeatmap {
    pub predicate: String,
    pub count: usize,
    /// Row-major `bins × bins` over offsets in `[-1, 1]²`, `y` down.
    pub ground_truth: Vec<f64>,
    pub predicted: Vec<f64>,
    pub gt_agreement: Option<f64>,
    pub predicted_agreement: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapReport {
    pub bins: usize,
    pub triplets: usize,
    pub predicates: Vec<PredicateHeatmap>,
    /// Share of triplets with a spatial predicate whose predicted subject
    /// box lies on the side the predicate implies.
    pub predicted_agreement: f64,
    pub gt_agreement: f64,
}

fn bin(v: f64, bins: usize) -> usize {
    (((v + 1.0) / 2.0 * bins as f64).floor().max(0.0) as usize).min(bins - 1)
}

/// For every triplet, withhold the subject's box, predict it and record the
/// subject-minus-object centre offset next to the true one.
pub fn predicate_heatmaps(gen: &Generator, samples: &[DataSample], predicates: &[String]) -> Result<HeatmapReport> {
    let bins = HEATMAP_BINS;
    let mut maps: Vec<PredicateHeatmap> = predicates
        .iter()
        .map(|p| PredicateHeatmap {
            predicate: p.clone(),
            count: 0,
            ground_truth: vec![0.0; bins * bins],
            predicted: vec![0.0; bins * bins],
            gt_agreement: None,
            predicted_agreement: None,
        })
        .collect();
    let mut hits = vec![(0usize, 0usize, 0usize); predicates.len()];
    let r = gen.resolution();
    for s in samples {
        let source = fit_resolution(&s.source, r);
        for e in &s.source_graph.edges {
            let g = &s.source_graph;
            let (Some(sb), Some(ob)) = (g.nodes[e.subject_index].bbox, g.nodes[e.object_index].bbox) else {
                continue;
            };
            let mut masked = g.clone();
            masked.nodes[e.subject_index].bbox_masked = true;
            let out = gen.predict_layout(&source, &masked)?;
            let row: Vec<f64> = out.boxes.get(e.subject_index)?.to_dtype(candle_core::DType::F64)?.to_vec1()?;
            let (oy, ox) = ob.center();
            let (gy, gx) = sb.center();
            let gt = [gx - ox, gy - oy];
            let pred = [0.5 * (row[1] + row[3]) - ox, 0.5 * (row[0] + row[2]) - oy];
            let m = maps
                .get_mut(e.predicate_id)
                .ok_or_else(|| Error::Dataset(format!("predicate {} not in vocabulary", e.predicate_id)))?;
            m.count += 1;
            m.ground_truth[bin(gt[1], bins) * bins + bin(gt[0], bins)] += 1.0;
            m.predicted[bin(pred[1], bins) * bins + bin(pred[0], bins)] += 1.0;
            if let Some((axis, sign)) = expected_offset_sign(&m.predicate) {
                let h = &mut hits[e.predicate_id];
                h.0 += 1;
                h.1 += usize::from(gt[axis] * sign > 0.0);
                h.2 += usize::from(pred[axis] * sign > 0.0);
            }
        }
    }
    let (mut total, mut gt_ok, mut pred_ok) = (0, 0, 0);
    for (m, &(n, g, p)) in maps.iter_mut().zip(&hits) {
        if m.count > 0 {
            let c = m.count as f64;
            m.ground_truth.iter_mut().for_each(|v| *v /= c);
            m.predicted.iter_mut().for_each(|v| *v /= c);
        }
        if n > 0 {
            m.gt_agreement = Some(g as f64 / n as f64);
            m.predicted_agreement = Some(p as f64 / n as f64);
        }
        total += n;
        gt_ok += g;
        pred_ok += p;
    }
    let share = |k: usize| if total == 0 { 0.0 } else { k as f64 / total as f64 };
    Ok(HeatmapReport {
        bins,
        triplets: maps.iter().map(|m| m.count).sum(),
        predicates: maps,
        predicted_agreement: share(pred_ok),
        gt_agreement: share(gt_ok),
    })
}

/// One PNG per predicate: ground truth on the left, prediction on the right,
/// each bin drawn as a 4×4 block.
pub fn write_heatmaps(report: &HeatmapReport, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let (bins, scale, gap) = (report.bins, 4u32, 4u32);
    let side = bins as u32 * scale;
    for m in &report.predicates {
        let mut img = image::RgbImage::from_pixel(2 * side + gap, side, image::Rgb([255, 255, 255]));
        for (panel, hist) in [&m.ground_truth, &m.predicted].into_iter().enumerate() {
            let peak = hist.iter().cloned().fold(0.0f64, f64::max);
            for (i, &v) in hist.iter().enumerate() {
                let c = crate::layout::heat(if peak > 0.0 { (v / peak) as f32 } else { 0.0 });
                let (by, bx) = ((i / bins) as u32, (i % bins) as u32);
                for dy in 0..scale {
                    for dx in 0..scale {
                        img.put_pixel(panel as u32 * (side + gap) + bx * scale + dx, by * scale + dy, c);
                    }
                }
            }
        }
        img.save(dir.join(format!("{}.png", m.predicate.replace(' ', "_"))))?;
    }
    Ok(())
}
