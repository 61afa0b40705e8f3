//! Two-stage screening mammography classifier on procedurally generated
//! phantom exams: a patch classifier whose sliding-window heatmaps feed a
//! four-view ResNet breast-level model, plus training, ensembling and
//! evaluation tooling.

pub mod breast;
pub mod cli;
pub mod error;
pub mod eval;
pub mod heatmap;
pub mod image;
pub mod manifest;
pub mod patch;
pub mod phantom;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
