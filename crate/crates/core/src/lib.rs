//! Neural feature fields: distill per-view 2D feature maps into a 3D field
//! through differentiable volume rendering, then query the field for
//! retrieval, 3D segmentation, scene editing, and amodal masks.

pub mod apps;
pub mod diffkernel;
pub mod field;
pub mod geom;
pub mod dataset;
pub mod imageio;
pub mod renderer;
pub mod synthscene;
pub mod teacher;
pub mod trainer;
