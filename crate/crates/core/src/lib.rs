//! Gender estimation from walking skeletons trained on automatically
//! derived labels: face-analysis pseudo-labels on front views, propagated
//! to other viewpoints through a gait-embedding similarity graph.

pub mod config;
pub mod error;
pub mod face;
pub mod labels;
pub mod losses;
pub mod manifest;
pub mod nn;
pub mod pipeline;
pub mod posefile;
pub mod seed;
pub mod propagation;
pub mod skeleton;
pub mod synth;
pub mod train;
pub mod tssi;

pub use error::{Error, Result};
pub use labels::{Gender, LabelSource, PseudoLabel};
