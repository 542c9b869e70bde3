pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod gradcheck;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod peft;
pub mod pgm;
pub mod preprocess;
pub mod pretrain;
pub mod prompt;
pub mod rng;
pub mod sdt;
pub mod synth;
pub mod train;
pub mod vra;

pub use config::RunConfig;
pub use error::{Result, SptError};
pub use mask::{Image, Mask};
pub use model::SptModel;
pub use params::{Bound, ParamId, ParamStore};
pub use prompt::{BoxPrompt, Point, PointLabel, PromptSet};
