//! Sampling: condition activation by driving mode, guidance on audio and
//! text, Euler integration of the flow, and long videos built from
//! segments chained through motion frames.

use std::ops::Range;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{decode_video, encode_video, DecodeMode, PixelVideo, VideoLatent, FPS};
use crate::conditions::audio::Waveform;
use crate::conditions::skeleton::SkeletonSequence;
use crate::error::{Error, Result};
use crate::exec;
use crate::model::{denoiser_forward_raw, pack_tokens, ConditionBundle, Model};
use crate::tensor::{Scalar, Tensor};
use crate::train::batch::{gaussian_like, motion_latent, MOTION_FRAMES};
use crate::train::ConditionMask;

pub const DEFAULT_CFG_SCALE: f64 = 6.5;
pub const DEFAULT_STEPS: usize = 32;
pub const DEFAULT_SEGMENT: usize = 25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DriveMode {
    #[serde(rename = "audio")]
    Audio,
    #[serde(rename = "pose")]
    Pose,
    #[serde(rename = "audio+pose")]
    AudioPose,
}

impl std::str::FromStr for DriveMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "audio" => Ok(Self::Audio),
            "pose" => Ok(Self::Pose),
            "audio+pose" => Ok(Self::AudioPose),
            _ => Err(Error::Config(format!("unknown mode {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DrivingRequest {
    /// Single-frame reference image.
    pub reference: PixelVideo,
    pub caption: Option<String>,
    pub waveform: Option<Waveform>,
    pub skeleton: Option<SkeletonSequence>,
    pub mode: DriveMode,
    pub duration: usize,
    pub cfg_scale: f64,
    pub steps: usize,
    pub seed: u64,
    pub segment_len: usize,
}

impl DrivingRequest {
    pub fn new(reference: PixelVideo, mode: DriveMode, duration: usize) -> Self {
        Self {
            reference,
            caption: None,
            waveform: None,
            skeleton: None,
            mode,
            duration,
            cfg_scale: DEFAULT_CFG_SCALE,
            steps: DEFAULT_STEPS,
            seed: 0,
            segment_len: DEFAULT_SEGMENT,
        }
    }
}

/// Activating a condition also activates every weaker one; pose is only on
/// when the mode asks for it. The text slot is always occupied, by the
/// null caption when none is given.
pub fn resolve_activation(req: &DrivingRequest) -> Result<ConditionMask> {
    let audio = matches!(req.mode, DriveMode::Audio | DriveMode::AudioPose);
    let pose = matches!(req.mode, DriveMode::Pose | DriveMode::AudioPose);
    if audio && req.waveform.is_none() {
        return Err(Error::MissingSignal("audio mode needs a waveform".into()));
    }
    if pose {
        match &req.skeleton {
            None => return Err(Error::MissingSignal("pose mode needs a skeleton".into())),
            Some(s) if s.len() < req.duration => {
                return Err(Error::MissingSignal(format!(
                    "skeleton has {} frames, duration is {}",
                    s.len(),
                    req.duration
                )))
            }
            _ => {}
        }
    }
    if req.duration == 0 {
        return Err(Error::OutOfRange("duration must be >= 1".into()));
    }
    if req.reference.frames() != 1 {
        return Err(Error::DimensionMismatch(
            "reference must be a single frame".into(),
        ));
    }
    if req.steps == 0 {
        return Err(Error::OutOfRange("steps must be >= 1".into()));
    }
    if !(req.cfg_scale >= 0.0) {
        return Err(Error::OutOfRange("cfg_scale must be >= 0".into()));
    }
    Ok(ConditionMask {
        text: true,
        audio,
        pose,
        reference: true,
        motion_frames: false,
    })
}

/// `(1 - s) v_drop + s v_full`, which is `v_full` exactly at `s = 1` and
/// `v_drop` exactly at `s = 0`.
pub fn cfg_combine<T: Scalar>(v_full: &[T], v_drop: &[T], s: f64) -> Vec<T> {
    let (a, b) = (T::from_f64(1.0 - s), T::from_f64(s));
    v_full
        .iter()
        .zip(v_drop)
        .map(|(f, d)| a * *d + b * *f)
        .collect()
}

/// Guided velocity for the video tokens of `x_t`. The dropped branch nulls
/// audio and text together and keeps pose, reference and motion.
pub fn cfg_predict(
    model: &Model,
    x_t: &VideoLatent,
    z_ref: &VideoLatent,
    motion: Option<&VideoLatent>,
    cond: &ConditionBundle,
    t: f64,
    scale: f64,
) -> Result<Tensor<f32>> {
    let run = |c: &ConditionBundle| -> Result<Tensor<f32>> {
        let seq = pack_tokens(x_t, z_ref, motion, &c.text, &model.cfg)?;
        denoiser_forward_raw(&model.params, &model.cfg, &seq, c, t, None)
    };
    let drop = cond.unconditional();
    let (full, dropped) = exec::join(|| run(cond), || run(&drop));
    let (full, dropped) = (full?, dropped?);
    Ok(Tensor::from_vec(
        full.rows(),
        full.cols(),
        cfg_combine(full.data(), dropped.data(), scale),
    ))
}

/// Euler steps from `t = 1` down to `t = 0` on a uniform grid:
/// `x <- x - dt * v(x, t)`.
pub fn euler<T: Scalar>(
    x: &mut [T],
    steps: usize,
    mut velocity: impl FnMut(&[T], f64) -> Result<Vec<T>>,
) -> Result<()> {
    if steps == 0 {
        return Err(Error::OutOfRange("steps must be >= 1".into()));
    }
    let dt = 1.0 / steps as f64;
    for i in 0..steps {
        let t = 1.0 - i as f64 * dt;
        let v = velocity(x, t)?;
        let d = T::from_f64(dt);
        for (xi, vi) in x.iter_mut().zip(&v) {
            *xi -= d * *vi;
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::SamplerDiverged(i));
        }
    }
    Ok(())
}

/// Samples one segment of `frames` pixel frames.
#[allow(clippy::too_many_arguments)]
pub fn sample_segment(
    model: &Model,
    z_ref: &VideoLatent,
    motion: Option<&VideoLatent>,
    cond: &ConditionBundle,
    frames: usize,
    scale: f64,
    steps: usize,
    seed: u64,
) -> Result<VideoLatent> {
    let shape = VideoLatent {
        frames,
        tlat: model.codec.latent_frames(frames),
        data: Vec::new(),
        ..z_ref.clone()
    };
    let shape = VideoLatent {
        data: vec![0.0; shape.tlat * shape.hlat * shape.wlat * shape.channels],
        ..shape
    };
    let mut x = gaussian_like(&shape, &mut ChaCha8Rng::seed_from_u64(seed));
    let mut data = std::mem::take(&mut x.data);
    euler(&mut data, steps, |d, t| {
        let xt = VideoLatent {
            data: d.to_vec(),
            ..shape.clone()
        };
        Ok(cfg_predict(model, &xt, z_ref, motion, cond, t, scale)?.into_vec())
    })?;
    x.data = data;
    Ok(x)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Segment {
    pub generate: Range<usize>,
    pub motion_source: Option<Range<usize>>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SegmentPlan {
    pub segments: Vec<Segment>,
    pub segment_len: usize,
    pub overlap: usize,
}

/// The first segment covers `[0, lseg)`; each later one generates up to
/// `lseg - m` new frames from the previous `m`.
pub fn plan_segments(duration: usize, lseg: usize, m: usize) -> Result<SegmentPlan> {
    if duration == 0 {
        return Err(Error::OutOfRange("duration must be >= 1".into()));
    }
    if lseg <= m {
        return Err(Error::OutOfRange(format!(
            "segment length {lseg} must exceed overlap {m}"
        )));
    }
    let mut segments = vec![Segment {
        generate: 0..lseg.min(duration),
        motion_source: None,
    }];
    let mut end = lseg.min(duration);
    while end < duration {
        let next = (end + lseg - m).min(duration);
        segments.push(Segment {
            generate: end..next,
            motion_source: Some(end - m..end),
        });
        end = next;
    }
    Ok(SegmentPlan {
        segments,
        segment_len: lseg,
        overlap: m,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    pub video: PixelVideo,
    pub mask: ConditionMask,
    pub plan: SegmentPlan,
    pub latents: Vec<VideoLatent>,
}

/// Runs every segment in order. Motion frames are the previous segment's
/// decoded tail, re-encoded frame by frame; the patch codec makes that
/// exact.
pub fn generate(req: &DrivingRequest, model: &Model) -> Result<Generated> {
    generate_with_mask(req, model, resolve_activation(req)?)
}

/// [`generate`] with an explicit activation, e.g. to null a signal the mode
/// would otherwise use.
pub fn generate_with_mask(
    req: &DrivingRequest,
    model: &Model,
    mask: ConditionMask,
) -> Result<Generated> {
    let plan = plan_segments(req.duration, req.segment_len, MOTION_FRAMES)?;
    let (h, w) = (req.reference.height(), req.reference.width());
    let z_ref = encode_video(&req.reference, &model.codec)?;
    let text = model.text(req.caption.as_deref().unwrap_or(""));
    let audio = match (&req.waveform, mask.audio) {
        (Some(wv), true) => Some(model.audio_features(wv, req.duration)?),
        _ => None,
    };
    let pose = match (&req.skeleton, mask.pose) {
        (Some(s), true) => Some(model.pose_maps(&s.slice(0..req.duration), h, w)?),
        _ => None,
    };
    let mut raw: Vec<PixelVideo> = Vec::new();
    let mut latents = Vec::new();
    for (i, seg) in plan.segments.iter().enumerate() {
        let so_far = PixelVideo::concat(&raw).ok();
        let motion = match (&seg.motion_source, &so_far) {
            (Some(r), Some(v)) => Some(motion_latent(&v.slice(r.clone()), model)?),
            _ => None,
        };
        let cond = ConditionBundle {
            text: text.clone(),
            audio: audio.as_ref().map(|a| a.rows_range(seg.generate.clone())),
            pose: pose.as_ref().map(|p| p.slice(seg.generate.clone())),
        };
        let mut seed_rng = ChaCha8Rng::seed_from_u64(req.seed);
        seed_rng.set_stream(i as u64);
        let z = sample_segment(
            model,
            &z_ref,
            motion.as_ref(),
            &cond,
            seg.generate.len(),
            req.cfg_scale,
            req.steps,
            rand::Rng::random(&mut seed_rng),
        )
        .map_err(|e| Error::Segment {
            index: i,
            source: Box::new(e),
        })?;
        raw.push(decode_video(&z, &model.codec, DecodeMode::Raw)?);
        latents.push(z);
    }
    let video = PixelVideo::concat(&raw)?.clamped();
    Ok(Generated {
        video,
        mask,
        plan,
        latents,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputManifest {
    pub fps: usize,
    pub frames: usize,
    pub seed: u64,
    pub model_hash: String,
    pub mode: DriveMode,
    pub mask: ConditionMask,
    pub segments: Vec<(usize, usize)>,
    pub files: Vec<String>,
}

/// Writes `frame_NNNNN.png` files and `manifest.json`; with `dump_latents`
/// also `segment_N.olc` raw latents.
pub fn write_output(
    dir: &Path,
    req: &DrivingRequest,
    model: &Model,
    out: &Generated,
    dump_latents: bool,
) -> Result<OutputManifest> {
    let files = crate::io::write_frame_dir(dir, &out.video)?;
    if dump_latents {
        for (i, z) in out.latents.iter().enumerate() {
            let mut f = std::io::BufWriter::new(std::fs::File::create(
                dir.join(format!("segment_{i}.olc")),
            )?);
            z.write_to(&mut f)?;
        }
    }
    let manifest = OutputManifest {
        fps: FPS,
        frames: out.video.frames(),
        seed: req.seed,
        model_hash: model.cfg.hash(),
        mode: req.mode,
        mask: out.mask,
        segments: out
            .plan
            .segments
            .iter()
            .map(|s| (s.generate.start, s.generate.end))
            .collect(),
        files,
    };
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::synth::{clip_rng, synth_clip, SynthConfig};
    use crate::train::init_model;

    fn fixture() -> (Model, crate::data::Clip) {
        let clip = synth_clip("a", 30, &SynthConfig::default(), &mut clip_rng(1, 0));
        let cfg = ModelConfig {
            hidden: 16,
            blocks: 1,
            ..ModelConfig::small()
        };
        let mut model = init_model(cfg, std::slice::from_ref(&clip), 3).unwrap();
        // give the zero-initialized output path some weight
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (_, name, _) in model.params.clone().iter() {
            if name.starts_with("final")
                || name.contains("ada")
                || name.contains("xa.o")
                || name.starts_with("pose.conv2")
            {
                for v in model.params.by_name_mut(name).unwrap().data_mut() {
                    *v = rand::Rng::random_range(&mut rng, -0.05..0.05);
                }
            }
        }
        (model, clip)
    }

    fn request(clip: &crate::data::Clip, mode: DriveMode, duration: usize) -> DrivingRequest {
        DrivingRequest {
            caption: Some(clip.caption.clone()),
            waveform: Some(clip.wave.clone()),
            skeleton: Some(clip.skeleton.clone()),
            steps: 2,
            seed: 11,
            ..DrivingRequest::new(clip.video.slice(0..1), mode, duration)
        }
    }

    #[test]
    fn activation_follows_mode() {
        let (_, clip) = fixture();
        let m = resolve_activation(&request(&clip, DriveMode::Audio, 10)).unwrap();
        assert!(m.text && m.audio && !m.pose);
        let m = resolve_activation(&request(&clip, DriveMode::Pose, 10)).unwrap();
        assert!(m.text && !m.audio && m.pose);
        let m = resolve_activation(&request(&clip, DriveMode::AudioPose, 10)).unwrap();
        assert!(m.text && m.audio && m.pose);
        let mut r = request(&clip, DriveMode::Audio, 10);
        r.waveform = None;
        assert!(matches!(
            resolve_activation(&r),
            Err(Error::MissingSignal(_))
        ));
        r.mode = DriveMode::Pose;
        r.skeleton = None;
        assert!(matches!(
            resolve_activation(&r),
            Err(Error::MissingSignal(_))
        ));
    }

    #[test]
    fn guidance_endpoints_are_exact() {
        let full = [0.3f32, -1.7, 2.0e-3];
        let drop = [1.1f32, 0.25, -9.0];
        assert_eq!(cfg_combine(&full, &drop, 1.0), full);
        assert_eq!(cfg_combine(&full, &drop, 0.0), drop);
        assert_eq!(cfg_combine(&[1.0f64], &[0.0], 6.5), vec![6.5]);
    }

    #[test]
    fn euler_on_a_linear_field_is_first_order() {
        let err = |n: usize| {
            let mut x = vec![1.0f64];
            euler(&mut x, n, |x, _| Ok(x.to_vec())).unwrap();
            (x[0] - (-1f64).exp()).abs()
        };
        for n in [8, 16, 32] {
            let r = err(n) / err(2 * n);
            assert!((1.7..=2.3).contains(&r), "{n}: {r}");
        }
        let mut x = vec![2.0f64];
        euler(&mut x, 1, |x, t| Ok(vec![x[0] * t + 1.0])).unwrap();
        assert_eq!(x[0], 2.0 - 3.0);
    }

    #[test]
    fn zero_model_returns_the_starting_noise() {
        let clip = synth_clip("a", 10, &SynthConfig::default(), &mut clip_rng(1, 0));
        let model = init_model(
            ModelConfig {
                hidden: 16,
                blocks: 1,
                ..ModelConfig::small()
            },
            std::slice::from_ref(&clip),
            3,
        )
        .unwrap();
        let z_ref = encode_video(&clip.video.slice(0..1), &model.codec).unwrap();
        let cond = ConditionBundle {
            text: model.text(&clip.caption),
            audio: None,
            pose: None,
        };
        let z = sample_segment(&model, &z_ref, None, &cond, 9, 6.5, 4, 8).unwrap();
        let start = gaussian_like(&z, &mut ChaCha8Rng::seed_from_u64(8));
        assert_eq!(z, start);
    }

    #[test]
    fn segment_plans_tile_the_duration() {
        let p = plan_segments(25, 25, 5).unwrap();
        assert_eq!(
            p.segments,
            vec![Segment {
                generate: 0..25,
                motion_source: None
            }]
        );
        let p = plan_segments(65, 25, 5).unwrap();
        let g: Vec<_> = p.segments.iter().map(|s| s.generate.clone()).collect();
        assert_eq!(g, vec![0..25, 25..45, 45..65]);
        for s in &p.segments[1..] {
            let m = s.motion_source.clone().unwrap();
            assert_eq!((m.len(), m.end), (5, s.generate.start));
        }
        assert!(plan_segments(0, 25, 5).is_err());
        assert!(plan_segments(10, 5, 5).is_err());
    }

    #[test]
    fn generated_length_matches_duration_and_is_deterministic() {
        let (model, clip) = fixture();
        for d in [1, 7, 26] {
            let mut r = request(&clip, DriveMode::AudioPose, d);
            r.segment_len = 12;
            let a = generate(&r, &model).unwrap();
            assert_eq!(a.video.frames(), d);
            assert_eq!(a.video, generate(&r, &model).unwrap().video);
        }
    }

    #[test]
    fn pose_reaches_both_guidance_branches() {
        let (model, clip) = fixture();
        let z_ref = encode_video(&clip.video.slice(0..1), &model.codec).unwrap();
        let x = gaussian_like(
            &encode_video(&clip.video.slice(0..9), &model.codec).unwrap(),
            &mut ChaCha8Rng::seed_from_u64(2),
        );
        let maps = model.pose_maps(&clip.skeleton.slice(0..9), 16, 16).unwrap();
        let cond = ConditionBundle {
            text: model.text(&clip.caption),
            audio: Some(model.audio_features(&clip.wave, 9).unwrap()),
            pose: Some(maps),
        };
        let no_pose = ConditionBundle {
            pose: None,
            ..cond.clone()
        };
        for c in [&cond, &no_pose] {
            assert_eq!(c.unconditional().pose.is_some(), c.pose.is_some());
        }
        let branch = |c: &ConditionBundle| {
            let seq = pack_tokens(&x, &z_ref, None, &c.text, &model.cfg).unwrap();
            denoiser_forward_raw(&model.params, &model.cfg, &seq, c, 0.5, None).unwrap()
        };
        assert_ne!(branch(&cond), branch(&no_pose));
        assert_ne!(
            branch(&cond.unconditional()),
            branch(&no_pose.unconditional())
        );
    }
}
