//! The relation extraction model.

pub mod checkpoint;
mod config;
mod encoder;
pub mod head;
mod params;
mod window;

pub use checkpoint::{load_checkpoint, save_checkpoint, Manifest, CHECKPOINT_VERSION};
pub use config::{ModelConfig, Variant};
pub use encoder::{encode_entities, kind_token, token_id, DocInputs};
pub use head::{
    forward, forward_graph, gradcheck_loss, loss_and_grads, predict, Diagnostics, RoundStats, StepOutput,
};
pub use params::{GoseParams, ParamVars, INIT_SCALE};
pub use window::WindowLayout;
