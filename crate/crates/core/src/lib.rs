//! Open-vocabulary spatio-temporal action detection on frozen video-language features.

pub mod autograd;
pub mod backend;
pub mod config;
pub mod criterion;
pub mod data;
pub mod dfa;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod head;
pub mod model;
pub mod nn;
pub mod prior;
pub mod tensor;
pub mod train;

pub use config::{RunConfig, TrainingMode};
pub use error::{Error, Result};
pub use eval::{EvalProtocol, Metrics, ProtocolMode};
pub use geometry::{CenterBox, Rect};
pub use model::{OpenMixer, PriorContext};
pub use tensor::Tensor;
pub use train::{Checkpoint, Dataset, Trainer, TrainingSet};
