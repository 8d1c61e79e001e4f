//! Procedural talking sprite with exactly known audio and pose coupling,
//! and the metrics that read that coupling back out of a video.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::PixelVideo;
use crate::conditions::audio::{Waveform, SAMPLES_PER_FRAME, SAMPLE_RATE};
use crate::conditions::skeleton::{
    Keypoint, SkeletonFrame, SkeletonSequence, HEAD, L_ELBOW, L_SHOULDER, L_WRIST, NECK, R_ELBOW,
    R_SHOULDER, R_WRIST,
};
use crate::data::{Clip, Flags};
use crate::error::{Error, Result};

pub const CANVAS: usize = 16;

pub const FACE_CENTER: (f64, f64) = (8.0, 5.5);
pub const FACE_RADIUS: f64 = 4.5;
/// Mouth bar columns `[6, 10)`, opening downward from row 6 by up to 3 px.
pub const MOUTH_X: (usize, usize) = (6, 10);
pub const MOUTH_TOP: f64 = 6.0;
pub const MOUTH_MAX: f64 = 3.0;
pub const MOUTH_ROWS: (usize, usize) = (6, 9);
pub const SHOULDERS: [(f64, f64); 2] = [(5.5, 11.0), (10.5, 11.0)];
pub const ARM_RADIUS: f64 = 1.0;
/// Rows searched for arm pixels.
pub const ARM_ROWS: (usize, usize) = (9, 16);
const MOUTH_COLOR: [f32; 3] = [1.0, 0.0, 1.0];
const ARM_COLOR: [f32; 3] = [0.0, 1.0, 0.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub frames: usize,
    pub lipsync_rate: f64,
    pub pose_rate: f64,
    pub aesthetic_rate: f64,
    /// Probability that a clip is silent throughout.
    pub silent_rate: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            frames: 25,
            lipsync_rate: 0.3,
            pose_rate: 0.6,
            aesthetic_rate: 0.9,
            silent_rate: 0.0,
        }
    }
}

impl SynthConfig {
    /// Lipsync pass rate of a strictly filtered corpus.
    pub fn strict_filter() -> Self {
        Self {
            lipsync_rate: 0.13,
            ..Self::default()
        }
    }
}

/// Per-clip generator stream derived from a run seed and clip index.
pub fn clip_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(index.wrapping_add(1));
    r
}

/// Identity and motion parameters sampled for one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct SpriteSpec {
    pub face: [f32; 3],
    pub background: f32,
    /// Per-frame mouth opening in `[0, 1]`.
    pub mouth: Vec<f64>,
    /// Per-frame wrist positions in pixels, `[left, right]`.
    pub wrists: Vec<[(f64, f64); 2]>,
}

fn color_name(face: [f32; 3]) -> &'static str {
    if face[0] > face[2] + 0.15 {
        "red"
    } else if face[2] > face[0] + 0.15 {
        "blue"
    } else {
        "purple"
    }
}

fn disc_coverage(px: f64, py: f64, c: (f64, f64), r: f64) -> f64 {
    let d = ((px - c.0).powi(2) + (py - c.1).powi(2)).sqrt();
    (r + 0.5 - d).clamp(0.0, 1.0)
}

fn segment_coverage(px: f64, py: f64, a: (f64, f64), b: (f64, f64), r: f64) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let s = if len2 == 0.0 {
        0.0
    } else {
        (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let d = ((a.0 + s * dx - px).powi(2) + (a.1 + s * dy - py).powi(2)).sqrt();
    (r - d).clamp(0.0, 1.0)
}

fn blend(px: &mut [f32], color: [f32; 3], cov: f64) {
    let c = cov as f32;
    for (p, k) in px.iter_mut().zip(color) {
        *p = *p * (1.0 - c) + k * c;
    }
}

/// Renders the sprite frames for `spec`.
pub fn render(spec: &SpriteSpec) -> PixelVideo {
    let n = spec.mouth.len();
    let mut data = vec![0.0f32; n * CANVAS * CANVAS * 3];
    for t in 0..n {
        let open = spec.mouth[t] * MOUTH_MAX;
        for y in 0..CANVAS {
            for x in 0..CANVAS {
                let i = ((t * CANVAS + y) * CANVAS + x) * 3;
                let px = &mut data[i..i + 3];
                px.copy_from_slice(&[spec.background, 0.0, spec.background]);
                let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
                blend(
                    px,
                    spec.face,
                    disc_coverage(cx, cy, FACE_CENTER, FACE_RADIUS),
                );
                if (MOUTH_X.0..MOUTH_X.1).contains(&x) {
                    let lo = (y as f64).max(MOUTH_TOP);
                    let hi = (y as f64 + 1.0).min(MOUTH_TOP + open);
                    blend(px, MOUTH_COLOR, (hi - lo).max(0.0));
                }
                for (s, w) in SHOULDERS.iter().zip(&spec.wrists[t]) {
                    blend(px, ARM_COLOR, segment_coverage(cx, cy, *s, *w, ARM_RADIUS));
                }
            }
        }
    }
    PixelVideo::from_raw(n, CANVAS, CANVAS, data)
}

/// Skeleton in normalized coordinates matching the rendered sprite.
pub fn skeleton_of(spec: &SpriteSpec) -> SkeletonSequence {
    let k =
        |(x, y): (f64, f64)| Keypoint::new((x / CANVAS as f64) as f32, (y / CANVAS as f64) as f32);
    let frames = spec
        .wrists
        .iter()
        .map(|w| {
            let mut f = SkeletonFrame::hidden();
            f.joints[HEAD] = k(FACE_CENTER);
            f.joints[NECK] = k((8.0, 10.5));
            f.joints[L_SHOULDER] = k(SHOULDERS[0]);
            f.joints[R_SHOULDER] = k(SHOULDERS[1]);
            let mid = |a: (f64, f64), b: (f64, f64)| ((a.0 + b.0) / 2.0, (a.1 + b.1) / 2.0);
            f.joints[L_ELBOW] = k(mid(SHOULDERS[0], w[0]));
            f.joints[R_ELBOW] = k(mid(SHOULDERS[1], w[1]));
            f.joints[L_WRIST] = k(w[0]);
            f.joints[R_WRIST] = k(w[1]);
            f
        })
        .collect();
    SkeletonSequence { frames }
}

/// Per-frame burst amplitudes: syllables of 3-8 frames separated by 1-5
/// silent frames, smoothed with a `[1, 2, 1] / 4` kernel.
fn burst_envelope(frames: usize, rng: &mut impl Rng) -> Vec<f64> {
    let mut raw = vec![0.0; frames];
    let mut t = rng.random_range(0..3);
    while t < frames {
        let len = rng.random_range(3..9);
        let peak = rng.random_range(0.3..0.9);
        for v in raw.iter_mut().skip(t).take(len) {
            *v = peak;
        }
        t += len + rng.random_range(1..6);
    }
    (0..frames)
        .map(|i| {
            let at = |j: isize| {
                raw.get(j as usize)
                    .copied()
                    .filter(|_| j >= 0)
                    .unwrap_or(0.0)
            };
            let j = i as isize;
            0.25 * at(j - 1) + 0.5 * at(j) + 0.25 * at(j + 1)
        })
        .collect()
}

/// Tone mix with unit mean square over every frame: each partial completes
/// an integer number of periods per frame.
fn tone_mix(frames: usize, amp: &[f64], rng: &mut impl Rng) -> Vec<f32> {
    let partials = rng.random_range(2..5);
    let base = SAMPLE_RATE as f64 / SAMPLES_PER_FRAME as f64;
    let mut ks: Vec<u32> = Vec::new();
    while ks.len() < partials {
        let k = rng.random_range(4..80);
        if !ks.contains(&k) {
            ks.push(k);
        }
    }
    let weights: Vec<f64> = (0..partials).map(|_| rng.random_range(0.5..1.0)).collect();
    let norm = (weights.iter().map(|w| w * w / 2.0).sum::<f64>()).sqrt();
    let phases: Vec<f64> = (0..partials)
        .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
        .collect();
    (0..frames * SAMPLES_PER_FRAME)
        .map(|n| {
            let t = n as f64 / SAMPLE_RATE as f64;
            let s: f64 = ks
                .iter()
                .zip(&weights)
                .zip(&phases)
                .map(|((k, w), p)| w * (std::f64::consts::TAU * base * *k as f64 * t + p).sin())
                .sum();
            (amp[n / SAMPLES_PER_FRAME] * s / norm * 0.5) as f32
        })
        .collect()
}

fn wrist_track(frames: usize, xr: (f64, f64), rng: &mut impl Rng) -> Vec<(f64, f64)> {
    let (cx, ax) = (
        (xr.0 + xr.1) / 2.0,
        rng.random_range(0.3..1.0) * (xr.1 - xr.0) / 2.0,
    );
    let (cy, ay) = (12.25, rng.random_range(0.3..1.0) * 2.25);
    let (fx, fy) = (rng.random_range(0.02..0.12), rng.random_range(0.02..0.12));
    let (px, py) = (
        rng.random_range(0.0..std::f64::consts::TAU),
        rng.random_range(0.0..std::f64::consts::TAU),
    );
    (0..frames)
        .map(|t| {
            let a = std::f64::consts::TAU * t as f64;
            (cx + ax * (fx * a + px).sin(), cy + ay * (fy * a + py).sin())
        })
        .collect()
}

/// Samples and renders one clip.
pub fn synth_clip(id: &str, frames: usize, cfg: &SynthConfig, rng: &mut impl Rng) -> Clip {
    let face = [
        rng.random_range(0.2..0.7f32),
        0.0,
        rng.random_range(0.2..0.7f32),
    ];
    let background = rng.random_range(0.0..0.15f32);
    let silent = rng.random_bool(cfg.silent_rate.clamp(0.0, 1.0));
    let env = burst_envelope(frames, rng);
    let env: Vec<f64> = if silent { vec![0.0; frames] } else { env };
    let samples = tone_mix(frames, &env, rng);
    let left = wrist_track(frames, (1.5, 4.5), rng);
    let right = wrist_track(frames, (11.5, 14.5), rng);
    let flags = Flags {
        lipsync_ok: rng.random_bool(cfg.lipsync_rate.clamp(0.0, 1.0)),
        pose_visible: rng.random_bool(cfg.pose_rate.clamp(0.0, 1.0)),
        aesthetic_ok: rng.random_bool(cfg.aesthetic_rate.clamp(0.0, 1.0)),
    };
    let peak = 0.9;
    let spec = SpriteSpec {
        face,
        background,
        mouth: env.iter().map(|e| e / peak).collect(),
        wrists: left.into_iter().zip(right).map(|(l, r)| [l, r]).collect(),
    };
    let activity = if silent {
        "waving"
    } else {
        "talking and waving"
    };
    Clip {
        id: id.to_string(),
        video: render(&spec),
        wave: Waveform::new(samples),
        skeleton: skeleton_of(&spec),
        caption: format!("a {} person {activity}", color_name(face)),
        flags,
    }
}

/// Frame RMS of the waveform, one value per video frame.
pub fn audio_envelope(wave: &Waveform, frames: usize) -> Vec<f64> {
    (0..frames)
        .map(|t| {
            let s = wave.frame_samples(t);
            (s.iter().map(|v| (*v as f64).powi(2)).sum::<f64>() / s.len() as f64).sqrt()
        })
        .collect()
}

/// Mean intensity over all channels of the mouth region, per frame.
pub fn mouth_intensity(video: &PixelVideo) -> Vec<f64> {
    (0..video.frames())
        .map(|t| {
            let mut s = 0.0;
            let mut n = 0;
            for y in MOUTH_ROWS.0..MOUTH_ROWS.1 {
                for x in MOUTH_X.0..MOUTH_X.1 {
                    s += video.pixel(t, y, x).iter().map(|v| *v as f64).sum::<f64>();
                    n += 3;
                }
            }
            s / n as f64
        })
        .collect()
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::DimensionMismatch(
            "pearson needs equal series of length >= 2".into(),
        ));
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    let tiny = 1e-12;
    if saa <= tiny * n || sbb <= tiny * n {
        return Err(Error::Undefined("zero-variance series".into()));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Pearson correlation between mouth-region intensity and the audio
/// envelope.
pub fn sync_correlation(video: &PixelVideo, wave: &Waveform) -> Result<f64> {
    if video.frames() < 3 {
        return Err(Error::OutOfRange(format!(
            "{} frames, need at least 3",
            video.frames()
        )));
    }
    if video.height() != CANVAS || video.width() != CANVAS {
        return Err(Error::DimensionMismatch(
            "sync metric expects the sprite canvas".into(),
        ));
    }
    pearson(
        &mouth_intensity(video),
        &audio_envelope(wave, video.frames()),
    )
}

/// Wrist estimates per frame from the green arm mask: the coverage-weighted
/// centroid of each canvas half is the arm's midpoint.
pub fn recover_wrists(video: &PixelVideo) -> Result<Vec<[(f64, f64); 2]>> {
    let half = CANVAS / 2;
    (0..video.frames())
        .map(|t| {
            let mut out = [(0.0, 0.0); 2];
            for (side, o) in out.iter_mut().enumerate() {
                let (mut sw, mut sx, mut sy) = (0.0, 0.0, 0.0);
                for y in ARM_ROWS.0..ARM_ROWS.1 {
                    for x in side * half..(side + 1) * half {
                        let w = video.pixel(t, y, x)[1].max(0.0) as f64;
                        sw += w;
                        sx += w * (x as f64 + 0.5);
                        sy += w * (y as f64 + 0.5);
                    }
                }
                if sw < 0.5 {
                    return Err(Error::Undefined(format!("no arm pixels in frame {t}")));
                }
                let s = SHOULDERS[side];
                *o = (2.0 * sx / sw - s.0, 2.0 * sy / sw - s.1);
            }
            Ok(out)
        })
        .collect()
}

/// Mean wrist deviation in pixels between the arms seen in `video` and the
/// driving skeleton.
pub fn pose_deviation(video: &PixelVideo, skeleton: &SkeletonSequence) -> Result<f64> {
    if skeleton.len() != video.frames() {
        return Err(Error::DimensionMismatch(
            "skeleton and video lengths differ".into(),
        ));
    }
    let est = recover_wrists(video)?;
    let (mut s, mut n) = (0.0, 0);
    for (e, f) in est.iter().zip(&skeleton.frames) {
        for (side, j) in [L_WRIST, R_WRIST].into_iter().enumerate() {
            let k = f.joints[j];
            let (x, y) = (
                k.x as f64 * video.width() as f64,
                k.y as f64 * video.height() as f64,
            );
            s += ((e[side].0 - x).powi(2) + (e[side].1 - y).powi(2)).sqrt();
            n += 1;
        }
    }
    Ok(s / n as f64)
}

pub fn psnr(a: &PixelVideo, b: &PixelVideo) -> Result<f64> {
    if a.data().len() != b.data().len() {
        return Err(Error::DimensionMismatch(
            "psnr inputs differ in size".into(),
        ));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| ((x.clamp(0.0, 1.0) - y.clamp(0.0, 1.0)) as f64).powi(2))
        .sum::<f64>()
        / a.data().len() as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    })
}
