//! Staged multi-condition training: routing clips to the conditions their
//! flags allow, dropping conditions by keep ratio, and the optimizer loop.

pub mod batch;
pub mod optim;
pub mod plan;
pub mod run;
pub mod state;

pub use batch::{build_batch, build_item, prepare_clips, PreparedClip, TrainItem, MOTION_FRAMES};
pub use optim::{clip_global_norm, AdamW};
pub use plan::{
    default_schedule, route_clip, sample_condition_mask, Condition, ConditionMask, Eligibility,
    KeepRatios, TrainPlan,
};
pub use run::{
    run_stages, stage_checkpoint_name, train_step, validation_loss, validation_times, RunOptions,
    StageReport, METRICS_CSV,
};
pub use state::{load_model, Exposure, TrainState};

use crate::codec::{fit_norm_stats, CodecConfig};
use crate::conditions::text::Vocab;
use crate::data::Clip;
use crate::error::Result;
use crate::model::{Model, ModelConfig};

/// Fresh model whose vocabulary and latent normalization are fitted to
/// `clips`.
pub fn init_model(cfg: ModelConfig, clips: &[Clip], seed: u64) -> Result<Model> {
    let vocab = Vocab::build(clips.iter().map(|c| c.caption.as_str()), cfg.vocab_size);
    let mut codec = CodecConfig::new(cfg.sp, cfg.gt);
    let videos: Vec<_> = clips.iter().map(|c| c.video.clone()).collect();
    codec.norm = fit_norm_stats(&videos, &codec)?;
    Model::init(cfg, codec, vocab, seed)
}
