//! Breast-level multi-view model.

pub mod column;
pub mod model;

pub use column::{Column, ColumnConfig};
pub use model::{BreastModel, ExamInput, ForwardOutput, ModelConfig, Tap, Targets, Task, Variant, ViewInput};
