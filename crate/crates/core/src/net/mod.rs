//! The spatial-pyramid pose network: configuration, parameters, passes and
//! checkpoints.

mod checkpoint;
mod config;
mod forward;
mod linalg;
mod params;

pub use checkpoint::{
    quantize, read_checkpoint, write_checkpoint, Checkpoint, TrainingState, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use config::{BnOrder, SppNetConfig, BASE_BRANCH_WIDTHS, MAX_LEVEL};
pub use forward::{
    backward, contribution_counts, forward, forward_batch, positive_contribution_counts,
    BatchOutput, ConvTrace, DenseTrace, ForwardTrace, Mode,
};
pub use params::{
    forward_flops, init_params, layer_counts, Gradients, LayerCount, Layout, ParamKind,
    SppNetParams, TensorInfo,
};

#[cfg(test)]
mod tests;
