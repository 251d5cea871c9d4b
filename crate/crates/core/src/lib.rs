//! Multi-frame LiDAR and camera scene tokenization.
//!
//! A [`SceneBundle`](model::SceneBundle) of point clouds, perception boxes and
//! camera feature maps is decomposed into ground tiles, agents and open-set
//! clusters, compacted into a fixed point budget, and fused into one
//! embedding per scene element.

pub mod compact;
pub mod decompose;
pub mod error;
pub mod fuse;
pub mod ground;
pub mod harness;
pub mod io;
pub mod model;
pub mod pipeline;
pub mod project;
pub mod track;

pub use error::{Error, FormatError, Result};
