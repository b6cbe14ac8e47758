//! Cost-aware routing of decomposed tasks over a capability-ranked,
//! price-tagged model pool.
//!
//! The crate splits a task into a subtask chain, estimates per-subtask
//! difficulty, searches or learns a subtask-to-model assignment, executes
//! the routed workflow (optionally with procedural review by a strong
//! model), and accounts accuracy against API cost in exact arithmetic.
//!
//! See the `book/` guide for a narrative walkthrough; the CLI in the
//! companion binary crate exposes every pipeline stage as a subcommand.
//!
//! ```
//! use model_router::pool::{ModelPool, partition_groups};
//!
//! let pool = ModelPool::load(r#"
//!     [[models]]
//!     name = "tiny"
//!     deployment = "local"
//!
//!     [[models]]
//!     name = "mid"
//!     deployment = "cloud"
//!     price_in_cents_per_1k = 0.1
//!     price_out_cents_per_1k = 0.3
//!
//!     [[models]]
//!     name = "big"
//!     deployment = "cloud"
//!     price_in_cents_per_1k = 1.0
//!     price_out_cents_per_1k = 3.0
//! "#).unwrap();
//! let groups = partition_groups(&pool).unwrap();
//! assert_eq!(groups.slm_group[0].name, "tiny");
//! ```

pub mod alloc;
pub mod backend;
pub mod decomp;
pub mod error;
pub mod exec;
pub mod grpo;
pub mod orchestrate;
pub mod pool;
pub mod sim;
#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
