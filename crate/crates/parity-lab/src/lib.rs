//! Product and XOR nodes for subset-parity learning.
//!
//! The crate covers the forward passes of four node types ([`nodes`]), their
//! exact gradients, Hessians and expectations ([`grad`]), seeded data
//! generation ([`data`], [`rng`]), SGD training ([`trainer`], [`mlp`]), the
//! two-moment weight recurrence and its bounds ([`dynamics`]), statistical
//! validators ([`stats`]) and the experiment harness ([`experiments`],
//! [`config`]).

pub mod config;
pub mod data;
pub mod dynamics;
pub mod error;
pub mod experiments;
pub mod grad;
pub mod mlp;
pub mod nodes;
pub mod rng;
pub mod stats;
pub mod trainer;

pub use error::{LabError, Result};

/// Version of this crate, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
