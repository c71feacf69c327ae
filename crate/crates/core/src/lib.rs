//! Semi-supervised segmentation with bidirectional copy-paste mixing,
//! voxel-graph alignment and correlation clustering.

pub mod autodiff;
pub mod backbone;
pub mod datamodel;
pub mod error;
pub mod evalreport;
pub mod graph;
pub mod losses;
pub mod mixing;
pub mod synthdata;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
