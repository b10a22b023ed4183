//! Explicit Gaussian primitives and the software rasterizer producing
//! color, depth, normal, and accumulated-opacity maps.

pub mod camera;
pub mod gaussians;
pub mod raster;

pub use camera::Camera;
pub use gaussians::GaussianSet;
pub use raster::{
    composited_depth_normal, project_gaussian, rasterize, render_maps, GaussianNodes,
    Projected2d, RasterMaps, RenderMaps,
};
