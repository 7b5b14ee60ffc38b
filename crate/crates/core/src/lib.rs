//! Entropy-regularized classification losses and a small training toolkit
//! around them.
//!
//! * [`loss`]: cross entropy, swapped cross entropy, entropy, KL divergence,
//!   and the MIX-ENT / MIN-ENT objectives with analytic gradients.
//! * [`net`]: a fully-connected ReLU classifier.
//! * [`data`]: IDX (MNIST/EMNIST) decoding and dataset utilities.
//! * [`trainer`]: optimization loop with a learnable loss head.
//! * [`sweeper`]: random search under successive halving.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod net;
pub mod optim;
pub mod seed;
pub mod sweeper;
pub mod trainer;

pub use error::{Error, IdxError, Result};
