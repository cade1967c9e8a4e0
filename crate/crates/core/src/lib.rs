//! Ranks pre-trained models for a new target task without fine-tuning.
//!
//! The pipeline has three phases:
//!
//! * transfer: FDA proxy scores ([`fda`]) fill a models × tasks performance
//!   matrix that is factorized into a latent transfer space ([`nmf`]);
//! * meta: architecture graphs are embedded ([`archi2vec`]) and joined with
//!   cheap model/task statistics into a linear score model ([`meta`]);
//! * merge: a new task is placed in the transfer space from its proxy
//!   embedding and both scores are merged into a ranking ([`merge`]).
//!
//! [`eval`] runs the leave-one-task-out protocol and [`pipeline`] wires the
//! stages to their on-disk artifacts.

pub mod archi2vec;
pub mod data;
pub mod error;
pub mod eval;
pub mod fda;
pub mod io;
pub mod merge;
pub mod meta;
pub mod nmf;
pub mod pipeline;
pub mod synth;

pub use error::{Error, Result};
