//! The learnable fusion-restoration model.
//!
//! The encoder concatenates the 2D and 3D feature vectors of each pixel and maps them to
//! one fused embedding. Two decoders restore each modality from that embedding. Each adds
//! a linear skip projection of its input and refines the result with channel-then-spatial
//! attention over the whole map.

pub mod cbam;
pub mod checkpoint;
pub mod layers;
mod model;

pub use cbam::{Cbam, CbamCache};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointIndex};
pub use layers::{LayerNorm, Linear};
pub use model::{
    backward, decode, encode, forward, init_params, ramp, Architecture, Decoder, DropoutMasks, ForwardCache,
    ForwardPass, GradientBundle, LayerStack, Mode, ModelParams, DEFAULT_D_2D, DEFAULT_D_3D, DEFAULT_FUSED,
};
