//! Data-parallel ray tracing by ray queue cycling.
//!
//! Scene triangles are split arbitrarily across `R` logical ranks. Every ray batch is
//! passed around a ring so that each ray is traced against every rank's local BVH; hits
//! are reduced with a deterministic `(t, global_id)` key, shaded on the rank that owns
//! the pixel, and the framebuffer tiles are gathered on rank 0.

pub mod accel;
pub mod api;
pub mod engine;
pub mod geom;
pub mod image;
pub mod scene;
pub mod transport;
