//! From-scratch differentiable encoder stack and prediction heads.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod matrix;
pub mod model;
pub mod params;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use gradcheck::{gradcheck, GradcheckOptions, GradcheckReport, HasParams};
pub use matrix::Matrix;
pub use model::{sinusoidal_positions, BackwardOutput, EncoderConfig, ForwardCache, ForwardMode, GroundingModel, ModelOutput, OutputGrads};
pub use params::{Grads, Param, ParamId, ParamSet};
