//! Transfer of reactive policies between equi-sized factored-MDP instances.
//!
//! The crate is `no_std` (it needs `alloc`) and covers everything that is pure
//! computation: ground instances and their generators, the exact transition
//! model and simulator, a small reverse-mode differentiation tape, the
//! graph-convolutional networks, the multi-task actor-critic learning phase,
//! the two-step transfer procedure and the evaluation math.
//!
//! File formats, checkpoints, threads and the command line live in the
//! `torpido` companion crate.

#![no_std]

extern crate alloc;

pub mod domain;
pub mod dynamics;
pub mod eval;
pub mod networks;
pub mod numerics;
pub mod rng;
pub mod training;

pub use domain::{DomainKind, ExperimentSet, InstanceSpec, State};
pub use networks::{Dims, ModelBundle};
pub use rng::RngStream;
pub use training::{TrainConfig, Variant};
