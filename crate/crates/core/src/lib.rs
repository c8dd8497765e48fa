//! CIF-Transducer: integrate-and-fire alignment in front of a transducer-style
//! predictor/joint network, trained with cross-entropy instead of a transducer
//! loss, plus the vanilla RNN-T baseline it is compared against.

pub mod autograd;
pub mod cif;
pub mod data;
pub mod error;
pub mod harness;
pub mod losses;
pub mod model;

pub use autograd::{Graph, Tensor, Var};
pub use error::{Error, Result};
