//! Categorical Markov-bridge sequence design with energy-preference
//! fine-tuning.
//!
//! The crate covers the whole desk-scale pipeline:
//!
//! - [`bridge`]: noise schedules, bridge kernels, forward and reverse sampling
//! - [`predictor`]: the conditioned target predictor, prior head and gradients
//! - [`objectives`]: pretraining, preference, energy and total losses
//! - [`world`]: synthetic structures, the Potts energy oracle, mutant libraries
//! - [`prefs`]: preference-pair construction and structure-level splits
//! - [`trainer`]: Adam, learning-rate schedules and the training loops
//! - [`eval`]: perplexity, recovery, ZScore and the ddG metric suite
//! - [`io`]: checkpoints, JSONL datasets and external score tables
//! - [`pipeline`]: the end-to-end reproduction driver

#![allow(clippy::needless_range_loop)]

pub mod bridge;
pub mod error;
pub mod eval;
pub mod io;
pub mod objectives;
pub mod pipeline;
pub mod predictor;
pub mod prefs;
pub mod rng;
pub mod sequence;
pub mod trainer;
pub mod world;

pub use error::{Error, Result};
pub use sequence::Sequence;
