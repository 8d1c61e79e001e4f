//! Exactly invertible patch-packing video codec with causal temporal
//! grouping.
//!
//! Latent frame 0 holds pixel frame 0 alone; latent frame `k >= 1` holds
//! pixel frames `[1 + (k-1)*gt, 1 + k*gt)`. Each latent cell packs an
//! `sp x sp` pixel patch across the `gt` temporal slots, so a latent has
//! `3 * sp^2 * gt` channels laid out as `(slot, dy, dx, rgb)`. Slots with
//! no pixel frame are zero in latent space.
//!
//! Normalization is a per-channel affine map. To keep the round trip
//! bit-exact in 32-bit arithmetic, pixels live on a `2^-24` grid, means are
//! snapped to that grid and scales are snapped to powers of two; every
//! intermediate is then exactly representable.

use std::io::{Read, Write};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Frames per second for all video and audio alignment.
pub const FPS: usize = 25;

const GRID: f64 = 16_777_216.0; // 2^24
const STD_FLOOR: f64 = 1e-6;

fn snap(v: f32) -> f32 {
    ((v as f64 * GRID).round() / GRID) as f32
}

/// `[T][H][W][3]` RGB frames.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelVideo {
    frames: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl PixelVideo {
    /// Validated constructor: values must be finite and in `[0, 1]`; they
    /// are snapped to the codec's pixel grid.
    pub fn new(frames: usize, height: usize, width: usize, mut data: Vec<f32>) -> Result<Self> {
        if frames == 0 || height == 0 || width == 0 {
            return Err(Error::Empty("video has a zero dimension".into()));
        }
        if data.len() != frames * height * width * 3 {
            return Err(Error::DimensionMismatch(format!(
                "video data length {} != {frames}x{height}x{width}x3",
                data.len()
            )));
        }
        for v in &mut data {
            if !v.is_finite() {
                return Err(Error::NonFinite("pixel video".into()));
            }
            if !(0.0..=1.0).contains(v) {
                return Err(Error::OutOfRange(format!("pixel value {v} outside [0,1]")));
            }
            *v = snap(*v);
        }
        Ok(Self {
            frames,
            height,
            width,
            data,
        })
    }

    /// Unchecked constructor for decoder output, which may leave `[0, 1]`.
    pub fn from_raw(frames: usize, height: usize, width: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), frames * height * width * 3);
        Self {
            frames,
            height,
            width,
            data,
        }
    }

    pub fn blank(frames: usize, height: usize, width: usize) -> Self {
        Self::from_raw(
            frames,
            height,
            width,
            vec![0.0; frames * height * width * 3],
        )
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width * 3
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.frame_len();
        &self.data[t * n..(t + 1) * n]
    }

    pub fn pixel(&self, t: usize, y: usize, x: usize) -> [f32; 3] {
        let i = ((t * self.height + y) * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Frames `range` as a new video.
    pub fn slice(&self, range: std::ops::Range<usize>) -> PixelVideo {
        let n = self.frame_len();
        PixelVideo::from_raw(
            range.len(),
            self.height,
            self.width,
            self.data[range.start * n..range.end * n].to_vec(),
        )
    }

    pub fn concat(parts: &[PixelVideo]) -> Result<PixelVideo> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Empty("no videos to concatenate".into()))?;
        let mut data = Vec::new();
        let mut frames = 0;
        for p in parts {
            if p.height != first.height || p.width != first.width {
                return Err(Error::DimensionMismatch("concat frame size".into()));
            }
            data.extend_from_slice(&p.data);
            frames += p.frames;
        }
        Ok(PixelVideo::from_raw(
            frames,
            first.height,
            first.width,
            data,
        ))
    }

    pub fn clamped(&self) -> PixelVideo {
        PixelVideo::from_raw(
            self.frames,
            self.height,
            self.width,
            self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        )
    }
}

/// Per-channel statistics of packed (unnormalized) latent entries.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// Grid-snapped mean and power-of-two scale actually applied.
    fn applied(&self) -> (Vec<f32>, Vec<f32>) {
        let mean = self
            .mean
            .iter()
            .map(|m| ((m.clamp(0.0, 1.0) * GRID).round() / GRID) as f32)
            .collect();
        let scale = self
            .std
            .iter()
            .map(|s| 2f64.powi(s.max(STD_FLOOR).log2().round() as i32) as f32)
            .collect();
        (mean, scale)
    }

    /// Identifier of the applied normalization.
    pub fn stats_id(&self) -> String {
        let (mean, scale) = self.applied();
        if mean.iter().all(|m| *m == 0.0) && scale.iter().all(|s| *s == 1.0) {
            return format!("identity-{}", mean.len());
        }
        let mut h = Sha256::new();
        for v in mean.iter().chain(&scale) {
            h.update(v.to_le_bytes());
        }
        let digest = h.finalize();
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CodecConfig {
    /// Spatial patch size.
    pub sp: usize,
    /// Temporal group size.
    pub gt: usize,
    pub norm: NormStats,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self::new(2, 4)
    }
}

impl CodecConfig {
    pub fn new(sp: usize, gt: usize) -> Self {
        Self {
            sp,
            gt,
            norm: NormStats::identity(3 * sp * sp * gt),
        }
    }

    pub fn channels(&self) -> usize {
        3 * self.sp * self.sp * self.gt
    }

    pub fn latent_frames(&self, frames: usize) -> usize {
        1 + (frames.saturating_sub(1)).div_ceil(self.gt)
    }

    /// Pixel frame held by `(latent frame, slot)`, if any.
    pub fn pixel_frame(&self, k: usize, slot: usize, frames: usize) -> Option<usize> {
        let f = if k == 0 {
            (slot == 0).then_some(0)?
        } else {
            1 + (k - 1) * self.gt + slot
        };
        (f < frames).then_some(f)
    }

    /// Latent frame that contains pixel frame `t`.
    pub fn latent_of(&self, t: usize) -> usize {
        if t == 0 {
            0
        } else {
            1 + (t - 1) / self.gt
        }
    }

    /// Pixel frames grouped per latent frame.
    pub fn groups(&self, frames: usize) -> Vec<Vec<usize>> {
        (0..self.latent_frames(frames))
            .map(|k| {
                (0..self.gt)
                    .filter_map(|s| self.pixel_frame(k, s, frames))
                    .collect()
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.sp == 0 || self.gt == 0 {
            return Err(Error::Config("codec sp and gt must be >= 1".into()));
        }
        if self.norm.channels() != self.channels() || self.norm.std.len() != self.channels() {
            return Err(Error::Config(format!(
                "norm stats have {} channels, codec needs {}",
                self.norm.channels(),
                self.channels()
            )));
        }
        if self.norm.std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Config("norm std entries must be > 0".into()));
        }
        Ok(())
    }

    pub fn check_dims(&self, v: &PixelVideo) -> Result<()> {
        if !v.height.is_multiple_of(self.sp) || !v.width.is_multiple_of(self.sp) {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} frame not divisible by patch {}",
                v.height, v.width, self.sp
            )));
        }
        Ok(())
    }
}

/// `[Tlat][Hlat][Wlat][C]` latent grid.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoLatent {
    /// Pixel frame count the latent was encoded from.
    pub frames: usize,
    pub tlat: usize,
    pub hlat: usize,
    pub wlat: usize,
    pub channels: usize,
    pub stats_id: String,
    pub data: Vec<f32>,
}

impl VideoLatent {
    pub fn zeros_like(&self) -> Self {
        Self {
            data: vec![0.0; self.data.len()],
            ..self.clone()
        }
    }

    pub fn cells_per_frame(&self) -> usize {
        self.hlat * self.wlat
    }

    pub fn tokens(&self) -> usize {
        self.tlat * self.hlat * self.wlat
    }

    pub fn same_shape(&self, other: &VideoLatent) -> bool {
        self.tlat == other.tlat
            && self.hlat == other.hlat
            && self.wlat == other.wlat
            && self.channels == other.channels
    }

    /// Mask over entries that correspond to real pixel frames; padded
    /// temporal slots are 0.
    pub fn valid_mask(&self, gt: usize) -> Vec<f32> {
        let per_slot = self.channels / gt;
        let mut mask = Vec::with_capacity(self.data.len());
        for k in 0..self.tlat {
            let real: Vec<bool> = (0..gt)
                .map(|s| {
                    let f = if k == 0 {
                        if s == 0 {
                            Some(0)
                        } else {
                            None
                        }
                    } else {
                        Some(1 + (k - 1) * gt + s)
                    };
                    f.is_some_and(|f| f < self.frames)
                })
                .collect();
            for _ in 0..self.hlat * self.wlat {
                for c in 0..self.channels {
                    mask.push(if real[c / per_slot] { 1.0 } else { 0.0 });
                }
            }
        }
        mask
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(b"OLC1")?;
        for d in [self.frames, self.tlat, self.hlat, self.wlat, self.channels] {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let id = self.stats_id.as_bytes();
        w.write_all(&(id.len() as u32).to_le_bytes())?;
        w.write_all(id)?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"OLC1" {
            return Err(Error::Format("latent file magic".into()));
        }
        let mut dims = [0usize; 6];
        for d in &mut dims {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            *d = u32::from_le_bytes(b) as usize;
        }
        let [frames, tlat, hlat, wlat, channels, id_len] = dims;
        let mut id = vec![0u8; id_len];
        r.read_exact(&mut id)?;
        let stats_id =
            String::from_utf8(id).map_err(|_| Error::Format("stats id is not utf-8".into()))?;
        let n = tlat * hlat * wlat * channels;
        let mut raw = vec![0u8; n * 4];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self {
            frames,
            tlat,
            hlat,
            wlat,
            channels,
            stats_id,
            data,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum DecodeMode {
    /// Exact inverse; values may leave `[0, 1]`.
    #[default]
    Raw,
    /// Clamp to `[0, 1]` for display and image export.
    Display,
}

/// Encoder/decoder boundary; the patch codec is one implementation.
pub trait VideoCodec {
    fn encode(&self, v: &PixelVideo) -> Result<VideoLatent>;
    fn decode(&self, z: &VideoLatent, mode: DecodeMode) -> Result<PixelVideo>;
}

impl VideoCodec for CodecConfig {
    fn encode(&self, v: &PixelVideo) -> Result<VideoLatent> {
        encode_video(v, self)
    }

    fn decode(&self, z: &VideoLatent, mode: DecodeMode) -> Result<PixelVideo> {
        decode_video(z, self, mode)
    }
}

fn pack(v: &PixelVideo, cfg: &CodecConfig, mut f: impl FnMut(usize, usize, f32)) {
    let (sp, gt) = (cfg.sp, cfg.gt);
    let (hl, wl) = (v.height / sp, v.width / sp);
    let c = cfg.channels();
    for k in 0..cfg.latent_frames(v.frames) {
        for s in 0..gt {
            let Some(t) = cfg.pixel_frame(k, s, v.frames) else {
                continue;
            };
            for hy in 0..hl {
                for wx in 0..wl {
                    let cell = (k * hl + hy) * wl + wx;
                    for dy in 0..sp {
                        for dx in 0..sp {
                            let px = v.pixel(t, hy * sp + dy, wx * sp + dx);
                            for (ch, p) in px.iter().enumerate() {
                                let chan = ((s * sp + dy) * sp + dx) * 3 + ch;
                                f(cell * c + chan, chan, *p);
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn encode_video(v: &PixelVideo, cfg: &CodecConfig) -> Result<VideoLatent> {
    cfg.validate()?;
    cfg.check_dims(v)?;
    if v.data.iter().any(|p| !p.is_finite()) {
        return Err(Error::NonFinite("encoder input".into()));
    }
    let (mean, scale) = cfg.norm.applied();
    let inv: Vec<f32> = scale.iter().map(|s| 1.0 / s).collect();
    let tlat = cfg.latent_frames(v.frames);
    let (hl, wl) = (v.height / cfg.sp, v.width / cfg.sp);
    let mut data = vec![0.0f32; tlat * hl * wl * cfg.channels()];
    pack(v, cfg, |i, chan, p| {
        data[i] = (p - mean[chan]) * inv[chan];
    });
    Ok(VideoLatent {
        frames: v.frames,
        tlat,
        hlat: hl,
        wlat: wl,
        channels: cfg.channels(),
        stats_id: cfg.norm.stats_id(),
        data,
    })
}

pub fn decode_video(z: &VideoLatent, cfg: &CodecConfig, mode: DecodeMode) -> Result<PixelVideo> {
    cfg.validate()?;
    let expected = cfg.norm.stats_id();
    if z.stats_id != expected {
        return Err(Error::StatsMismatch {
            expected,
            found: z.stats_id.clone(),
        });
    }
    if z.channels != cfg.channels() || z.tlat != cfg.latent_frames(z.frames) {
        return Err(Error::DimensionMismatch(format!(
            "latent {}x{}x{}x{} does not match codec for {} frames",
            z.tlat, z.hlat, z.wlat, z.channels, z.frames
        )));
    }
    let (mean, scale) = cfg.norm.applied();
    let (sp, gt) = (cfg.sp, cfg.gt);
    let (h, w) = (z.hlat * sp, z.wlat * sp);
    let mut out = vec![0.0f32; z.frames * h * w * 3];
    let c = z.channels;
    for k in 0..z.tlat {
        for s in 0..gt {
            let Some(t) = cfg.pixel_frame(k, s, z.frames) else {
                continue;
            };
            for hy in 0..z.hlat {
                for wx in 0..z.wlat {
                    let cell = (k * z.hlat + hy) * z.wlat + wx;
                    for dy in 0..sp {
                        for dx in 0..sp {
                            let (y, x) = (hy * sp + dy, wx * sp + dx);
                            for ch in 0..3 {
                                let chan = ((s * sp + dy) * sp + dx) * 3 + ch;
                                let mut p = z.data[cell * c + chan] * scale[chan] + mean[chan];
                                if mode == DecodeMode::Display {
                                    p = p.clamp(0.0, 1.0);
                                }
                                out[((t * h + y) * w + x) * 3 + ch] = p;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(PixelVideo::from_raw(z.frames, h, w, out))
}

/// Per-channel population mean and standard deviation over every packed
/// entry backed by a real pixel frame.
pub fn fit_norm_stats(corpus: &[PixelVideo], cfg: &CodecConfig) -> Result<NormStats> {
    if corpus.is_empty() {
        return Err(Error::Empty("normalization corpus".into()));
    }
    let c = cfg.channels();
    let mut count = vec![0u64; c];
    let mut sum = vec![0.0f64; c];
    for v in corpus {
        cfg.check_dims(v)?;
        pack(v, cfg, |_, chan, p| {
            count[chan] += 1;
            sum[chan] += p as f64;
        });
    }
    let mean: Vec<f64> = (0..c)
        .map(|i| {
            if count[i] == 0 {
                0.0
            } else {
                sum[i] / count[i] as f64
            }
        })
        .collect();
    let mut m2 = vec![0.0f64; c];
    for v in corpus {
        pack(v, cfg, |_, chan, p| {
            let d = p as f64 - mean[chan];
            m2[chan] += d * d;
        });
    }
    let std = (0..c)
        .map(|i| {
            if count[i] == 0 {
                1.0
            } else {
                (m2[i] / count[i] as f64).sqrt().max(STD_FLOOR)
            }
        })
        .collect();
    Ok(NormStats { mean, std })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_video(rng: &mut ChaCha8Rng, t: usize, h: usize, w: usize) -> PixelVideo {
        let data = (0..t * h * w * 3).map(|_| rng.random::<f32>()).collect();
        PixelVideo::new(t, h, w, data).unwrap()
    }

    #[test]
    fn latent_frame_count_for_25_frames() {
        let cfg = CodecConfig::new(2, 4);
        assert_eq!(cfg.latent_frames(25), 7);
        for t in 1..=100 {
            assert_eq!(cfg.latent_frames(t), 1 + (t - 1).div_ceil(4));
        }
    }

    #[test]
    fn zero_video_encodes_to_zero_latent() {
        let cfg = CodecConfig::new(2, 4);
        let v = PixelVideo::new(5, 4, 4, vec![0.0; 5 * 4 * 4 * 3]).unwrap();
        let z = encode_video(&v, &cfg).unwrap();
        assert!(z.data.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn round_trip_is_bit_exact_with_fitted_stats() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut cfg = CodecConfig::new(2, 4);
        let corpus: Vec<_> = (0..3).map(|_| random_video(&mut rng, 5, 16, 16)).collect();
        cfg.norm = fit_norm_stats(&corpus, &cfg).unwrap();
        for _ in 0..100 {
            let v = random_video(&mut rng, 5, 16, 16);
            let z = encode_video(&v, &cfg).unwrap();
            let back = decode_video(&z, &cfg, DecodeMode::Raw).unwrap();
            assert_eq!(back.data(), v.data());
        }
    }

    #[test]
    fn zero_latent_decodes_to_mean() {
        let mut cfg = CodecConfig::new(2, 1);
        cfg.norm.mean = vec![0.25; 12];
        let z = VideoLatent {
            frames: 2,
            tlat: 2,
            hlat: 2,
            wlat: 2,
            channels: 12,
            stats_id: cfg.norm.stats_id(),
            data: vec![0.0; 2 * 2 * 2 * 12],
        };
        let v = decode_video(&z, &cfg, DecodeMode::Raw).unwrap();
        assert!(v.data().iter().all(|p| *p == 0.25));
    }

    #[test]
    fn corrupted_stats_id_is_rejected() {
        let cfg = CodecConfig::new(2, 4);
        let v = PixelVideo::new(1, 2, 2, vec![0.5; 12]).unwrap();
        let mut z = encode_video(&v, &cfg).unwrap();
        z.stats_id.push('x');
        assert!(matches!(
            decode_video(&z, &cfg, DecodeMode::Raw),
            Err(Error::StatsMismatch { .. })
        ));
    }

    #[test]
    fn indivisible_frame_size_is_rejected() {
        let cfg = CodecConfig::new(4, 4);
        let v = PixelVideo::new(1, 6, 8, vec![0.0; 6 * 8 * 3]).unwrap();
        assert!(matches!(
            encode_video(&v, &cfg),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn non_finite_pixels_are_rejected() {
        let mut data = vec![0.0; 12];
        data[3] = f32::NAN;
        assert!(matches!(
            PixelVideo::new(1, 2, 2, data),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn stats_of_constant_video_floor_the_std() {
        let cfg = CodecConfig::new(2, 4);
        let v = PixelVideo::new(5, 4, 4, vec![0.5; 5 * 4 * 4 * 3]).unwrap();
        let s = fit_norm_stats(&[v], &cfg).unwrap();
        assert!(s.mean.iter().all(|m| *m == 0.5));
        assert!(s.std.iter().all(|d| *d == 1e-6));
    }

    #[test]
    fn stats_of_zero_and_one_videos_average_to_half() {
        let cfg = CodecConfig::new(2, 4);
        let n = 5 * 4 * 4 * 3;
        let a = PixelVideo::new(5, 4, 4, vec![0.0; n]).unwrap();
        let b = PixelVideo::new(5, 4, 4, vec![1.0; n]).unwrap();
        let s = fit_norm_stats(&[a, b], &cfg).unwrap();
        assert!(s.mean.iter().all(|m| *m == 0.5));
    }

    #[test]
    fn stats_match_two_pass_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = CodecConfig::new(2, 2);
        let corpus: Vec<_> = (0..4).map(|_| random_video(&mut rng, 4, 4, 6)).collect();
        let got = fit_norm_stats(&corpus, &cfg).unwrap();
        // Oracle: gather every entry per channel straight from pixel
        // coordinates, then the textbook two-pass formula.
        let c = cfg.channels();
        let mut per: Vec<Vec<f64>> = vec![Vec::new(); c];
        for v in &corpus {
            for t in 0..v.frames() {
                let slot = if t == 0 { 0 } else { (t - 1) % cfg.gt };
                for y in 0..v.height() {
                    for x in 0..v.width() {
                        let px = v.pixel(t, y, x);
                        for ch in 0..3 {
                            let chan =
                                ((slot * cfg.sp + y % cfg.sp) * cfg.sp + x % cfg.sp) * 3 + ch;
                            per[chan].push(px[ch] as f64);
                        }
                    }
                }
            }
        }
        for ch in 0..c {
            let n = per[ch].len() as f64;
            let m = per[ch].iter().sum::<f64>() / n;
            let var = per[ch].iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
            assert!((got.mean[ch] - m).abs() < 1e-12);
            assert!((got.std[ch] - var.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(matches!(
            fit_norm_stats(&[], &CodecConfig::default()),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn latent_file_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = CodecConfig::new(2, 4);
        let z = encode_video(&random_video(&mut rng, 6, 4, 4), &cfg).unwrap();
        let mut buf = Vec::new();
        z.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"OLC1");
        let back = VideoLatent::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, z);
    }

    #[test]
    fn perturbing_a_frame_only_touches_its_group_and_later() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = CodecConfig::new(2, 4);
        let v = random_video(&mut rng, 13, 4, 4);
        let z = encode_video(&v, &cfg).unwrap();
        for t in 0..13 {
            let mut d = v.data().to_vec();
            let i = t * v.frame_len() + 5;
            d[i] = if d[i] > 0.5 { 0.0 } else { 1.0 };
            let z2 = encode_video(&PixelVideo::new(13, 4, 4, d).unwrap(), &cfg).unwrap();
            let per_frame = z.hlat * z.wlat * z.channels;
            let group = cfg.latent_of(t);
            for k in 0..z.tlat {
                let same = z.data[k * per_frame..(k + 1) * per_frame]
                    == z2.data[k * per_frame..(k + 1) * per_frame];
                if k < group {
                    assert!(same, "frame {t} changed earlier latent {k}");
                }
                if k == group {
                    assert!(!same);
                }
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn round_trip_identity(
            t in 1usize..12, hp in 1usize..4, wp in 1usize..4,
            sp in 1usize..4, gt in 1usize..5, seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut cfg = CodecConfig::new(sp, gt);
            let v = random_video(&mut rng, t, hp * sp, wp * sp);
            cfg.norm = fit_norm_stats(&[random_video(&mut rng, t, hp * sp, wp * sp)], &cfg).unwrap();
            let z = encode_video(&v, &cfg).unwrap();
            prop_assert_eq!(z.tlat, 1 + (t - 1).div_ceil(gt));
            let back = decode_video(&z, &cfg, DecodeMode::Raw).unwrap();
            prop_assert_eq!(back.data(), v.data());
        }
    }
}
