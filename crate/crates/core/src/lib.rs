//! Calibration laboratory for text classification.

pub mod autodiff;
pub mod metrics;
pub mod model;

pub use autodiff::{ParamId, ParamSet, Parameter, Tape, Tensor, TensorId};
pub use model::{EncoderConfig, MimoClassifier, Prediction, TransformerClassifier};
