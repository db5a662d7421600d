//! Deformable 3D image registration with dual-attention encoders and
//! nested attention fusion, on a small reverse-mode autodiff engine.

pub mod attention;
pub mod autodiff;
pub mod config;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod kernels;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod warp;

pub use autodiff::{Gradients, Tape, Var};
pub use config::{ModelConfig, Precision};
pub use error::{Error, Result};
pub use metrics::RegistrationReport;
pub use model::{count_params, NestedMorph, ParamTable};
pub use tensor::{Scalar, Tensor};
pub use train::{register, train, Checkpoint, Pair, Trainer, TrainingCurve};
