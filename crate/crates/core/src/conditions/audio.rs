//! Audio features and frame-aligned audio tokens.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::codec::{CodecConfig, FPS};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SAMPLE_RATE: u32 = 16_000;
pub const SAMPLES_PER_FRAME: usize = SAMPLE_RATE as usize / FPS;

/// Mono waveform.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub sample_rate: u32,
    pub samples: Vec<f32>,
}

impl Waveform {
    pub fn new(samples: Vec<f32>) -> Self {
        Self {
            sample_rate: SAMPLE_RATE,
            samples,
        }
    }

    pub fn silence(frames: usize) -> Self {
        Self::new(vec![0.0; frames * SAMPLES_PER_FRAME])
    }

    pub fn duration_frames(&self) -> usize {
        self.samples.len().div_ceil(SAMPLES_PER_FRAME)
    }

    /// Samples `[t * 640, (t + 1) * 640)` of frame `t`, zero-padded.
    pub fn frame_samples(&self, t: usize) -> Vec<f32> {
        (t * SAMPLES_PER_FRAME..(t + 1) * SAMPLES_PER_FRAME)
            .map(|i| self.samples.get(i).copied().unwrap_or(0.0))
            .collect()
    }

    pub fn read_wav(path: &std::path::Path) -> Result<Self> {
        let mut reader =
            hound::WavReader::open(path).map_err(|e| Error::Format(format!("wav: {e}")))?;
        let spec = reader.spec();
        if spec.channels != 1 {
            return Err(Error::Format(format!(
                "expected mono wav, got {} channels",
                spec.channels
            )));
        }
        let samples = match spec.sample_format {
            hound::SampleFormat::Int => reader
                .samples::<i16>()
                .map(|s| s.map(|v| v as f32 / 32768.0))
                .collect::<std::result::Result<Vec<_>, _>>(),
            hound::SampleFormat::Float => reader.samples::<f32>().collect(),
        }
        .map_err(|e| Error::Format(format!("wav: {e}")))?;
        Ok(Self {
            sample_rate: spec.sample_rate,
            samples,
        })
    }

    /// 16-bit PCM mono.
    pub fn write_wav(&self, path: &std::path::Path) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w =
            hound::WavWriter::create(path, spec).map_err(|e| Error::Format(format!("wav: {e}")))?;
        for s in &self.samples {
            let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
            w.write_sample(v)
                .map_err(|e| Error::Format(format!("wav: {e}")))?;
        }
        w.finalize()
            .map_err(|e| Error::Format(format!("wav: {e}")))?;
        Ok(())
    }
}

/// Per-frame acoustic feature rows `[T x F]`.
pub trait AudioFeatureExtractor {
    fn feature_dim(&self) -> usize;
    fn extract(&self, wave: &Waveform, frames: usize) -> Result<Tensor<f32>>;
}

/// Log mel-filterbank energies at several window lengths centred on each
/// video frame.
#[derive(Clone)]
pub struct FilterbankExtractor {
    pub window_ms: Vec<usize>,
    pub bands: usize,
    pub floor: f64,
    plans: Vec<(usize, Arc<dyn Fft<f64>>, Vec<f64>, Vec<Vec<f64>>)>,
}

impl std::fmt::Debug for FilterbankExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FilterbankExtractor")
            .field("window_ms", &self.window_ms)
            .field("bands", &self.bands)
            .finish()
    }
}

impl Default for FilterbankExtractor {
    fn default() -> Self {
        Self::new(vec![10, 20, 40], 16, 1e-10)
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Periodic Hann window.
pub fn hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / len as f64).cos())
        .collect()
}

/// Triangular mel filters over DFT bins `0..=len/2`, `[bands][bins]`.
pub fn mel_filters(len: usize, bands: usize) -> Vec<Vec<f64>> {
    let nyquist = SAMPLE_RATE as f64 / 2.0;
    let top = hz_to_mel(nyquist);
    let edges: Vec<f64> = (0..bands + 2)
        .map(|i| mel_to_hz(top * i as f64 / (bands + 1) as f64))
        .collect();
    let bins = len / 2 + 1;
    (0..bands)
        .map(|b| {
            let (lo, mid, hi) = (edges[b], edges[b + 1], edges[b + 2]);
            (0..bins)
                .map(|k| {
                    let f = k as f64 * SAMPLE_RATE as f64 / len as f64;
                    if f <= lo || f >= hi {
                        0.0
                    } else if f <= mid {
                        (f - lo) / (mid - lo)
                    } else {
                        (hi - f) / (hi - mid)
                    }
                })
                .collect()
        })
        .collect()
}

impl FilterbankExtractor {
    pub fn new(window_ms: Vec<usize>, bands: usize, floor: f64) -> Self {
        let mut planner = FftPlanner::new();
        let plans = window_ms
            .iter()
            .map(|ms| {
                let len = SAMPLE_RATE as usize * ms / 1000;
                (
                    len,
                    planner.plan_fft_forward(len),
                    hann(len),
                    mel_filters(len, bands),
                )
            })
            .collect();
        Self {
            window_ms,
            bands,
            floor,
            plans,
        }
    }

    pub fn floor_value(&self) -> f32 {
        self.floor.ln() as f32
    }
}

impl AudioFeatureExtractor for FilterbankExtractor {
    fn feature_dim(&self) -> usize {
        self.window_ms.len() * self.bands
    }

    fn extract(&self, wave: &Waveform, frames: usize) -> Result<Tensor<f32>> {
        if wave.samples.is_empty() {
            return Err(Error::Empty("waveform".into()));
        }
        if wave.sample_rate != SAMPLE_RATE {
            return Err(Error::SampleRate {
                expected: SAMPLE_RATE,
                found: wave.sample_rate,
            });
        }
        if frames == 0 {
            return Err(Error::Empty("frame count".into()));
        }
        let f = self.feature_dim();
        let mut out = Tensor::zeros(frames, f);
        let mut buf = Vec::new();
        for t in 0..frames {
            let centre = (t * SAMPLES_PER_FRAME + SAMPLES_PER_FRAME / 2) as isize;
            for (si, (len, fft, win, filt)) in self.plans.iter().enumerate() {
                let start = centre - (*len as isize) / 2;
                buf.clear();
                buf.extend((0..*len).map(|i| {
                    let j = start + i as isize;
                    let s = if j < 0 {
                        0.0
                    } else {
                        wave.samples.get(j as usize).copied().unwrap_or(0.0) as f64
                    };
                    Complex::new(s * win[i], 0.0)
                }));
                fft.process(&mut buf);
                let row = out.row_mut(t);
                for (b, weights) in filt.iter().enumerate() {
                    let e: f64 = weights
                        .iter()
                        .zip(&buf)
                        .map(|(w, c)| w * c.norm_sqr())
                        .sum::<f64>()
                        / *len as f64;
                    row[si * self.bands + b] = e.max(self.floor).ln() as f32;
                }
            }
        }
        Ok(out)
    }
}

/// `[T x k x D]` audio tokens: `k = 2w + 1` window tokens per pixel frame.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioTokens {
    pub frames: usize,
    pub k: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl AudioTokens {
    pub fn token(&self, t: usize, j: usize) -> &[f32] {
        let i = (t * self.k + j) * self.dim;
        &self.data[i..i + self.dim]
    }
}

/// Feature row feeding window slot `j` of frame `t` (edges replicate).
pub fn window_source(t: usize, j: usize, w: usize, frames: usize) -> usize {
    (t + j).saturating_sub(w).min(frames - 1)
}

/// Applies `proj` to the clamped window of feature rows around each frame.
pub fn assemble_audio_tokens(
    feats: &Tensor<f32>,
    w: usize,
    proj: impl Fn(&[f32]) -> Vec<f32>,
) -> Result<AudioTokens> {
    let frames = feats.rows();
    if frames == 0 {
        return Err(Error::Empty("audio features".into()));
    }
    let k = 2 * w + 1;
    let projected: Vec<Vec<f32>> = (0..frames).map(|t| proj(feats.row(t))).collect();
    let dim = projected[0].len();
    let mut data = Vec::with_capacity(frames * k * dim);
    for t in 0..frames {
        for j in 0..k {
            let src = &projected[window_source(t, j, w, frames)];
            if src.len() != dim {
                return Err(Error::DimensionMismatch("projection width".into()));
            }
            data.extend_from_slice(src);
        }
    }
    Ok(AudioTokens {
        frames,
        k,
        dim,
        data,
    })
}

/// One latent frame's audio tokens. `tags[i] = slot * k + j` records which
/// pixel-frame slot and window offset token `i` came from.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioTokenSet {
    pub tokens: Tensor<f32>,
    pub tags: Vec<usize>,
}

/// Reference into the feature rows for one pooled token.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PooledSource {
    /// Pixel frame (relative to the segment start) the token belongs to.
    pub frame: usize,
    /// Window offset `j` in `0..k`.
    pub window: usize,
    pub tag: usize,
}

/// Token sources for each latent frame of a `frames`-long segment.
pub fn pooling_plan(frames: usize, k: usize, codec: &CodecConfig) -> Vec<Vec<PooledSource>> {
    codec
        .groups(frames)
        .into_iter()
        .map(|group| {
            let mut v = Vec::with_capacity(group.len() * k);
            for (slot, t) in group.into_iter().enumerate() {
                for j in 0..k {
                    v.push(PooledSource {
                        frame: t,
                        window: j,
                        tag: slot * k + j,
                    });
                }
            }
            v
        })
        .collect()
}

/// Groups per-pixel-frame tokens by latent frame using the codec's causal
/// grouping.
pub fn pool_audio_per_latent_frame(
    a: &AudioTokens,
    codec: &CodecConfig,
    frames: usize,
) -> Result<Vec<AudioTokenSet>> {
    if a.frames != frames {
        return Err(Error::DimensionMismatch(format!(
            "audio has {} frames, video has {frames}",
            a.frames
        )));
    }
    Ok(pooling_plan(frames, a.k, codec)
        .into_iter()
        .map(|srcs| {
            let mut data = Vec::with_capacity(srcs.len() * a.dim);
            for s in &srcs {
                data.extend_from_slice(a.token(s.frame, s.window));
            }
            AudioTokenSet {
                tokens: Tensor::from_vec(srcs.len(), a.dim, data),
                tags: srcs.iter().map(|s| s.tag).collect(),
            }
        })
        .collect())
}
