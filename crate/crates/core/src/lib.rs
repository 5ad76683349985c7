//! A succinct dynamic ordered dictionary over an integer universe `[0, U)`.
//!
//! Keys are organised in a treap whose priorities come from a tabulation
//! weight function. The treap is stored as a recursive spillover encoding
//! (a word array plus one arbitrary-precision integer per node) whose size
//! tracks `log2 C(U, n)` closely. The top level partitions the universe into
//! blocks, each holding one compressed treap.
//!
//! Module map:
//!
//! * [`numeric`]: big integers, binomials, fixed-point bit costs, geometric rounding.
//! * [`weight`]: the tabulation weight function and its counting helpers.
//! * [`reftreap`]: an uncompressed treap used as oracle and structural reference.
//! * [`info`]: the information-model accountant and the distribution registry.
//! * [`vm`]: virtual memories, spill pairs, the two-way adapter and the chunk allocator.
//! * [`coding`]: the core prefix-offset coder plus general and uniform entropy encoders.
//! * [`ctreap`]: the compressed treap with queries, updates and failure mode.
//! * [`fid`]: the block-partitioned top-level dictionary.

pub mod coding;
pub mod config;
pub mod ctreap;
pub mod error;
pub mod fid;
pub mod info;
pub mod numeric;
pub mod reftreap;
pub mod vm;
pub mod weight;

pub use config::Config;
pub use error::{Error, Result};
pub use numeric::{BigNat, BitCost, Rounding};

/// Machine word size in bits used throughout the encodings.
pub const WORD_BITS: u32 = 64;
