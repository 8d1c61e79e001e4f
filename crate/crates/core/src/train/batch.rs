use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::codec::{encode_video, PixelVideo, VideoLatent};
use crate::conditions::text::TextTokens;
use crate::data::Clip;
use crate::error::{Error, Result};
use crate::exec;
use crate::model::{
    flow_pair, pack_tokens, stack_latents, ConditionBundle, Model, NoiseState, PackedSequence,
};
use crate::tensor::Tensor;

use super::plan::{route_clip, sample_condition_mask, ConditionMask, Eligibility, TrainPlan};

/// Pixel frames carried from one segment into the next.
pub const MOTION_FRAMES: usize = 5;

/// A clip with its driving signals already extracted.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedClip {
    pub id: String,
    pub video: PixelVideo,
    /// `[frames, F]` audio features.
    pub audio: Tensor<f32>,
    pub pose: PixelVideo,
    pub text: TextTokens,
    pub eligible: Eligibility,
}

impl PreparedClip {
    pub fn new(clip: &Clip, model: &Model) -> Result<Self> {
        let inner = || -> Result<Self> {
            let frames = clip.video.frames();
            if clip.skeleton.len() != frames {
                return Err(Error::DimensionMismatch("skeleton length".into()));
            }
            Ok(Self {
                id: clip.id.clone(),
                video: clip.video.clone(),
                audio: model.audio_features(&clip.wave, frames)?,
                pose: model.pose_maps(&clip.skeleton, clip.video.height(), clip.video.width())?,
                text: model.text(&clip.caption),
                eligible: route_clip(&clip.flags),
            })
        };
        inner().map_err(|e| e.in_clip(&clip.id))
    }

    pub fn frames(&self) -> usize {
        self.video.frames()
    }
}

pub fn prepare_clips(clips: &[Clip], model: &Model) -> Result<Vec<PreparedClip>> {
    exec::map(clips, |c| PreparedClip::new(c, model))
        .into_iter()
        .collect()
}

/// One training sample ready for the denoiser.
#[derive(Clone, Debug)]
pub struct TrainItem {
    pub clip: usize,
    pub mask: ConditionMask,
    pub seq: PackedSequence,
    pub cond: ConditionBundle,
    pub noise: NoiseState,
    pub loss_mask: Vec<f32>,
}

/// Randomness for one item, drawn on the coordinating thread.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ItemDraw {
    pub clip: usize,
    pub mask: ConditionMask,
    pub seed: u64,
}

pub fn draw_items(clips: &[PreparedClip], plan: &TrainPlan, rng: &mut impl Rng) -> Vec<ItemDraw> {
    (0..plan.batch)
        .map(|_| {
            let clip = rng.random_range(0..clips.len());
            let mask = sample_condition_mask(clips[clip].eligible, plan, rng);
            ItemDraw {
                clip,
                mask,
                seed: rng.random(),
            }
        })
        .collect()
}

pub fn gaussian_like(z: &VideoLatent, rng: &mut impl Rng) -> VideoLatent {
    VideoLatent {
        data: (0..z.data.len())
            .map(|_| rng.sample(StandardNormal))
            .collect(),
        ..z.clone()
    }
}

/// Single-frame latents of `frames`, stacked along time.
pub fn motion_latent(video: &PixelVideo, model: &Model) -> Result<VideoLatent> {
    let parts = (0..video.frames())
        .map(|t| encode_video(&video.slice(t..t + 1), &model.codec))
        .collect::<Result<Vec<_>>>()?;
    stack_latents(&parts)
}

/// Reference frame, time and noise come from `draw.seed`. With a motion
/// prefix the first [`MOTION_FRAMES`] frames are packed clean and only the
/// remainder is noised and scored.
pub fn build_item(clip: &PreparedClip, draw: ItemDraw, model: &Model) -> Result<TrainItem> {
    let mut rng = ChaCha8Rng::seed_from_u64(draw.seed);
    let frames = clip.frames();
    let mut mask = draw.mask;
    mask.motion_frames &= frames > MOTION_FRAMES && model.cfg.max_motion >= MOTION_FRAMES;
    let start = if mask.motion_frames { MOTION_FRAMES } else { 0 };
    let r = rng.random_range(0..frames);
    let t: f64 = rng.random();
    let x0 = encode_video(&clip.video.slice(start..frames), &model.codec)?;
    let noise = flow_pair(&x0, &gaussian_like(&x0, &mut rng), t)?;
    let z_ref = encode_video(&clip.video.slice(r..r + 1), &model.codec)?;
    let motion = if mask.motion_frames {
        Some(motion_latent(&clip.video.slice(0..start), model)?)
    } else {
        None
    };
    let text = if mask.text {
        clip.text.clone()
    } else {
        TextTokens::null(model.cfg.text_len)
    };
    let seq = pack_tokens(&noise.x_t, &z_ref, motion.as_ref(), &text, &model.cfg)?;
    let cond = ConditionBundle {
        text,
        audio: mask.audio.then(|| clip.audio.rows_range(start..frames)),
        pose: mask.pose.then(|| clip.pose.slice(start..frames)),
    };
    Ok(TrainItem {
        clip: draw.clip,
        mask,
        seq,
        cond,
        loss_mask: x0.valid_mask(model.cfg.gt),
        noise,
    })
}

pub fn build_batch(
    clips: &[PreparedClip],
    plan: &TrainPlan,
    model: &Model,
    rng: &mut impl Rng,
) -> Result<Vec<TrainItem>> {
    if clips.is_empty() {
        return Err(Error::Empty("training clips".into()));
    }
    let draws = draw_items(clips, plan, rng);
    exec::map(&draws, |d| {
        build_item(&clips[d.clip], *d, model).map_err(|e| e.in_clip(&clips[d.clip].id))
    })
    .into_iter()
    .collect()
}
