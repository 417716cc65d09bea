//! Fixtures shared by the benchmarks.

use sgedit::clevr;
use sgedit::{RgbImage, SceneGraph};

/// Source image and graph of generated sample `index` at `res`.
pub fn scene(index: u64, res: usize) -> (RgbImage, SceneGraph) {
    let pair = clevr::generate_sample(7, index).expect("sampler succeeds for the fixed seed");
    let (img, _) = clevr::rasterize(&pair.source_scene, res);
    (img, pair.source_graph)
}
