//! Residual backbones with selectable channel attention, their cost model,
//! and the checkpoint format.

mod arch;
mod block;
pub mod checkpoint;
pub mod cost;
mod network;
#[cfg(test)]
mod tests;

pub use arch::{
    ArchSpec, AttentionKind, BlockKind, BlockSpec, PoolSpec, StageSpec, StemSpec, BUILTIN_ARCHS,
};
pub use block::{build_block, Block, BlockAttention};
pub use cost::Cost;
pub use network::{build_network, Body, Network};
