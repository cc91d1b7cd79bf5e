//! Sequence-conditioned 3D part assembly.
//!
//! Given the point clouds of an object's parts and an assembly order, predict a
//! rigid pose for every part so the placed parts form the object.

pub mod config;
pub mod data;
pub mod generator;
pub mod geom;
pub mod knowledge;
pub mod metrics;
pub mod numerics;
pub mod objective;
pub mod partenc;
