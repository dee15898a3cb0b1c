pub mod assemble;
pub mod camera;
pub mod config;
pub mod error;
pub mod leafmodel;
pub mod lm;
pub mod measure;
pub mod pipeline;
pub mod refine;
pub mod silhouette;
pub mod skelgraph;
pub mod synth;

pub use error::{Error, Result};
