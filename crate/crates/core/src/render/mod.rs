//! Differentiable rendering: the deformation/refinement stage that turns
//! canonical Gaussians into per-frame primitives, and the tile rasterizer.

mod pipeline;
mod raster;

pub use pipeline::{
    deform, deform_backward, render, render_backward, Deformed, ExtraGrads, RenderSettings, RenderTape,
    SceneGrads, SceneView, VelocityMode,
};
pub use raster::{
    rasterize, rasterize_backward, rasterize_naive, Primitive, PrimitiveGrads, RasterSettings, RasterTape,
    RenderedFrame, TILE_SIZE,
};
