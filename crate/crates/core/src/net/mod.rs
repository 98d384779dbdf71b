//! Fully convolutional seizure detector built from scratch.

pub mod checkpoint;
pub mod layers;
pub mod model;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest};
pub use layers::{Mode, Tensor3};
pub use model::{
    init_params, model_backward, model_forward, predict_window, Architecture, BatchNormLayer, ConvLayer,
    ForwardCache, ForwardOutput, NetworkParams, ParamGrads, INPUT_LEN,
};
