//! Multi-sequence dynamic scene reconstruction with graph-structured
//! radiance fields: scene graph, encodings, autodiff substrate, fields,
//! composite sampling/rendering, losses, training, synthetic data, and
//! image metrics.

pub mod autodiff;
pub mod data;
pub mod dual;
pub mod encoding;
pub mod fields;
pub mod geom;
pub mod graph;
pub mod imgio;
pub mod lie;
pub mod losses;
pub mod metrics;
pub mod render;

#[cfg(test)]
pub mod testutil;
