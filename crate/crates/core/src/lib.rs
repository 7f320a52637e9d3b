//! Temporal visual prompts and bottleneck adapters on a frozen dual
//! (vision/text) encoder, with a motion-regularized contrastive objective,
//! evaluation protocols and synthetic motion/appearance data.

pub mod adapters;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod encoders;
pub mod error;
pub mod evalkit;
pub mod gradcheck;
pub mod layers;
pub mod losses;
pub mod model;
pub mod params;
pub mod session;
pub mod synthdata;
pub mod tensor;
pub mod trainer;
pub mod tvp;

pub use config::{EvalConfig, ModelConfig, PromptDepth, Protocol, RunConfig};
pub use error::{Error, Result};
pub use params::{ParameterStore, Tag};
pub use tensor::{Array, Precision};
pub use trainer::TrainConfig;
