//! Scene-graph driven image editing.
//!
//! A graph network turns a scene graph into per-object boxes, masks and
//! features; those are composed into a spatial layout and decoded together
//! with an occluded copy of the source image.

pub mod adversarial;
pub mod checkpoint;
pub mod clevr;
pub mod error;
pub mod graph;
pub mod layout;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod raster;
pub mod session;
pub mod sgn;
pub mod synthesis;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::{
    apply_edit, validate_graph, BBox, EditOp, MaskSpec, ObjectNode, RelationEdge, SceneGraph, Vocab, VocabSizes,
};
pub use model::{Generator, Model, ModelConfig, Preset};
pub use raster::{PixelRect, RgbImage};
