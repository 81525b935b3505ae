pub mod autodiff;
pub mod checkpoint;
pub mod dist;
pub mod error;
pub mod eval;
pub mod dataset;
pub mod features;
pub mod generate;
pub mod gradcheck;
pub mod nn;
pub mod formula;
pub mod lbfgs;
pub mod loss;
pub mod metrics;
pub mod ots;
pub mod params;
pub mod queue;
pub mod report;
pub mod render;
pub mod schedule;
pub mod seed;
pub mod teacher;
pub mod train;
pub mod tree;
pub mod vocab;

pub use error::{Error, Result};
