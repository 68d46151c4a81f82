pub mod bounds;
pub mod dataset;
pub mod editor;
pub mod error;
pub mod graph;
pub mod influence;
pub mod linalg;
pub mod model;
pub mod oracle;
pub mod perturbation;
pub mod synth;

pub use error::{Error, Result};
