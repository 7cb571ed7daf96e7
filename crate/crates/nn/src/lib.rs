//! Small reverse-mode automatic differentiation engine with the layer set a
//! convolutional/recurrent variational autoencoder needs: affine maps, 1-D
//! convolutions, batch normalization, LSTM and BiLSTM, plus Adam and a
//! binary checkpoint format.
//!
//! Everything is generic over [`Scalar`] so the same graph can be built in
//! `f32` for training and in `f64` for finite-difference checks.

pub mod adam;
pub mod checkpoint;
mod error;
pub mod gradcheck;
mod graph;
mod kernels;
pub mod layers;
mod params;
mod scalar;

pub use adam::Adam;
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointData};
pub use error::{NnError, Result};
pub use gradcheck::{gradient_check, GradCheckConfig, GradCheckReport};
pub use graph::{BnMode, BnStats, Gradients, Graph, Var};
pub use layers::{conv_output_len, BatchNorm1d, BiLstm, Conv1d, Linear, Lstm, LstmLayer, LstmState, Mode};
pub use params::{ParamId, ParamStore, Parameter};
pub use scalar::Scalar;
