//! The denoiser: dual-stream transformer over packed text, reference,
//! motion and video tokens, trained by velocity matching.

pub mod bundle;
pub mod config;
pub mod denoiser;
pub mod flow;
pub mod pack;

pub use bundle::Model;
pub use config::ModelConfig;
pub use denoiser::{
    build_graph, denoiser_forward, denoiser_forward_raw, init_params, sample_loss, AudioRouting,
    ConditionBundle,
};
pub use flow::{flow_pair, mse_loss, NoiseState};
pub use pack::{build_rope, pack_tokens, stack_latents, PackedSequence, TokenKind};
pub mod gradcheck;
