//! Joint structured pruning and mixed-precision quantization of Gaussian-splat
//! scenes: a CPU renderer with analytic gradients, learnable per-attribute
//! quantizers, a dependency graph over Gaussian attributes, saliency scoring,
//! rate-distortion bit allocation, the staged training driver, and the packed
//! `.g3dq` format.

pub mod bitalloc;
pub mod codec;
pub mod error;
pub mod image;
pub mod linalg;
pub mod optimizer;
pub mod qadg;
pub mod quantizer;
pub mod render;
pub mod saliency;
pub mod scene;
pub mod schedule;
pub mod sh;
pub mod svg;
pub mod synth;

pub use error::{Error, Result};
pub use image::Image;
pub use quantizer::{BitBounds, BitRangePreset, QuantizerBank, QuantizerState};
pub use render::{render, RenderOutput, SceneGradients};
pub use scene::{AttributeClass, Camera, Gaussian, GaussianScene};
