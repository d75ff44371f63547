//! Minimal reverse-mode differentiation for the decoders and losses.

pub mod adam;
pub mod mat;
pub mod params;
pub mod tape;

pub use adam::{adam_step, AdamState};
pub use mat::{gemm, Mat};
pub use params::{Checkpoint, ParamBlock, ParamId, ParamStore, StoredBlock, CHECKPOINT_FORMAT_VERSION};
pub use tape::{dense_forward, Tape, Var};
