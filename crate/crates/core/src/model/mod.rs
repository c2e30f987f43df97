//! Dense decoder-only transformer reference.

mod cache;
mod config;
pub mod forward;
mod generate;
mod weights;

pub use cache::{HeadCache, KvCache, KvEntry, LayerCache};
pub use config::{Activation, AttnScale, ModelConfig};
pub use forward::{
    block_forward, dense_mha, dense_mha_heads, dense_mlp, mlp_activations, BlockOutput,
};
pub use generate::{
    dense_step, drive, drive_forced, generate_dense, random_prompt, Decoder, Generation,
    LayerTrace, StepTrace,
};
pub use weights::{BlockWeights, PlantedSpec, TransformerWeights};
