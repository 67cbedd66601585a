//! Mean-field multi-agent Q-learning for distributed bandwidth negotiation.
//!
//! Every device is an independent learner that requests a number of
//! subchannels each round. The access point answers with a single shared
//! reward that peaks when the requests exactly fill the channel and collapses
//! when they overflow it. Mean-field agents additionally condition on a
//! smoothed distribution of their neighbors' requests; the IDQL baseline does
//! not.
//!
//! Modules, bottom-up:
//! - [`sim`]: device ids, action spaces, neighbor ring, run configuration.
//! - [`env`]: reward, synchronous step, channel allocation, utilization.
//! - [`nn`]: MLP with manual backprop, Adam, Polyak updates, gradient check.
//! - [`meanfield`]: empirical neighbor mean and its soft update.
//! - [`rl`]: epsilon-greedy policy, replay buffer, clipped double-Q training.
//! - [`harness`]: training loop, metrics, CSV output and sweeps.

pub mod env;
pub mod error;
mod gemm;
pub mod harness;
pub mod meanfield;
pub mod nn;
pub mod rl;
pub mod sim;

pub use error::{Error, Result};
pub use harness::{run_experiment, run_experiment_with, RunOptions, RunResult};
pub use sim::{ActionMode, Algorithm, SimConfig};
