//! Episodic meta-reinforcement learning on a symbolic Harlow task.
//!
//! * [`env`]: the one-dimensional episodic Harlow environment.
//! * [`model`]: encoder, epLSTM cell with reinstatement gate, actor-critic heads, BPTT.
//! * [`memory`]: context-keyed store of committed cell states (dense or sparse).
//! * [`a2c`]: rollouts, returns, loss, RMSProp and the training loop.
//! * [`analysis`]: gate statistics, similarity traces, masking ablations, curves.
//! * [`io`]: tensor files, checkpoints and CSV logs.
//! * [`experiment`]: configuration and the train / eval / analyze drivers.

pub mod a2c;
pub mod analysis;
pub mod env;
pub mod error;
pub mod experiment;
pub mod io;
pub mod kernels;
pub mod memory;
pub mod model;

pub use error::{Error, Result};
