//! Multi-view mesh and camera reconstruction by differentiable rendering.
//!
//! A triangle mesh and the camera poses are fitted to a handful of masked RGB
//! views. Each view is re-rendered with colors transferred from the other
//! views through the current shape; the photometric disagreement, silhouette
//! losses and mesh regularizers are minimized by gradient descent, with
//! periodic visual-hull remeshing to change topology.

pub mod autodiff;
pub mod camera;
pub mod imageio;
pub mod losses;
pub mod math;
pub mod mesh;
pub mod raster;
pub mod texture;
pub mod pipeline;
pub mod scene;
pub mod topology;
pub mod shapes;
pub mod gradcheck;
pub mod optim;
pub mod eval;
pub mod cli;
