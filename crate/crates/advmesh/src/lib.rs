//! Non-invasive 3D adversarial object generation against multi-camera
//! bird's-eye-view (BEV) 3D object detectors.
//!
//! The pipeline places a triangle mesh next to (never touching) a target
//! vehicle, renders it into every camera of a surround rig with a
//! differentiable soft rasterizer and depth-correct occlusion, feeds the
//! composited images to a trainable toy BEV detector, and optimizes mesh
//! vertices and per-vertex texture by gradient descent until the detector
//! stops seeing the target.

pub mod attack;
pub mod autodiff;
pub mod config;
pub mod detector;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod img;
pub mod mesh;
pub mod occlusion;
pub mod optim;
pub mod oracle;
pub mod render;
pub mod scene;

pub use autodiff::{Array, Tape, Var};
pub use error::Error;
