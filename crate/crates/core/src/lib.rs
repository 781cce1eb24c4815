//! Binaural speaker separation with a self-attentive gated RNN.
//!
//! The crate covers the whole pipeline: a small reverse-mode autodiff engine
//! ([`autodiff`]), the network layers ([`nn`]) and separation model
//! ([`model`]), the training objective and optimizer ([`loss`], [`optim`],
//! [`train`]), a synthetic binaural scene simulator ([`sim`]), the
//! interaural cue analysis ([`cue`]) and test-set scoring ([`evaluate`]).
//! Models are stored with [`checkpoint`]; [`gradcheck`] compares every
//! backward rule against central differences.

pub mod autodiff;
pub mod checkpoint;
pub mod cue;
pub mod error;
pub mod evaluate;
pub mod gradcheck;
pub mod loss;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod sim;
pub mod tensor;
pub mod train;
pub mod wav;

pub use autodiff::{Activation, Gradients, Graph, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
