//! Dataset model: manifest, synthetic scene generation with an analytic
//! rendering oracle, scene-bounds computation, and ICP alignment.

pub mod bounds;
pub mod icp;
pub mod manifest;
pub mod synthetic;
