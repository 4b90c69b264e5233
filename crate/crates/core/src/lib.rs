//! Bridge attention and squeeze-excitation networks on a small reverse-mode
//! autodiff engine.
//!
//! * [`tensor`]: dense tensors, the tape, and every differentiable primitive.
//! * [`attention`]: squeeze-excitation and bridge attention modules.
//! * [`backbones`]: residual blocks and networks, cost accounting, checkpoints.
//! * [`training`]: data loading, augmentation, SGD with cosine decay, metrics.
//! * [`analysis`]: attention traces, class means, forest feature importance.

pub mod analysis;
pub mod attention;
pub mod backbones;
pub mod error;
pub mod io;
pub mod nn;
pub mod params;
pub mod tensor;
pub mod training;

#[cfg(test)]
mod testing;

pub use attention::{BridgeAttention, BridgeSourceConfig, SqueezeExcite};
pub use backbones::{build_network, ArchSpec, AttentionKind, BlockKind, BlockSpec, Network};
pub use error::{Error, Result};
pub use nn::{Mode, Session};
pub use params::{ParamId, ParamKind, ParamStore};
pub use tensor::{BnConfig, Float, Precision, Tape, Tensor, Var};
