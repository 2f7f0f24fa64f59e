//! Precision experiments for rotary position embeddings and an attention-mask
//! compiler for anchor-style packed training.
//!
//! The numeric side measures how far bf16 storage of rotated queries and keys
//! breaks the relative-position property of RoPE. The mask side turns packed
//! document layouts into interval attention plans.

pub mod attention;
pub mod cli;
pub mod diagnostics;
pub mod mask;
pub mod precision;
pub mod reduce;
pub mod rope;
pub mod selftest;

pub use attention::{AttentionError, AttentionStack, Matrix};
pub use diagnostics::{DiagnosticsError, DiffConfig, DiffReport};
pub use mask::{compile, AttentionPlan, BatchLayout, LayoutToken, MaskError, MaskScheme, TokenRole};
pub use precision::{Bf16, ComputePrecision, PrecisionPolicy, StorageFormat};
pub use rope::{PairLayout, PositionShift, RopeError, RotaryConfig};
