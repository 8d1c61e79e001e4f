use crate::codec::VideoLatent;
use crate::conditions::text::TextTokens;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::config::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TokenKind {
    Text,
    Reference,
    Motion,
    Video,
}

/// Token layout `[text | reference | motion | video]`. Visual tokens keep
/// their raw latent channels; projection happens inside the denoiser.
#[derive(Clone, Debug, PartialEq)]
pub struct PackedSequence {
    pub text_ids: Vec<u32>,
    /// `[n_ref + n_motion + n_video, C]` latent rows.
    pub visual: Tensor<f32>,
    pub kinds: Vec<TokenKind>,
    /// `(t, h, w)` per token.
    pub positions: Vec<[usize; 3]>,
    /// Latent frame of the noisy segment for video tokens.
    pub frame_of: Vec<Option<usize>>,
    pub n_text: usize,
    pub n_ref: usize,
    pub n_motion: usize,
    pub n_video: usize,
    pub motion_frames: usize,
    /// Layout of the noisy latent, used to shape the output.
    pub target: VideoLatent,
}

impl PackedSequence {
    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }

    pub fn video_offset(&self) -> usize {
        self.n_ref + self.n_motion
    }

    pub fn cells(&self) -> usize {
        self.target.hlat * self.target.wlat
    }

    /// Rewrites the temporal tag of every reference token.
    pub fn set_reference_time(&mut self, t: usize) {
        for (k, p) in self.kinds.iter().zip(&mut self.positions) {
            if *k == TokenKind::Reference {
                p[0] = t;
            }
        }
    }
}

/// Concatenates single-frame latents along time into one `m`-frame latent.
pub fn stack_latents(frames: &[VideoLatent]) -> Result<VideoLatent> {
    let first = frames
        .first()
        .ok_or_else(|| Error::Empty("motion latents".into()))?;
    let mut data = Vec::new();
    let mut tlat = 0;
    for f in frames {
        if (f.hlat, f.wlat, f.channels) != (first.hlat, first.wlat, first.channels) {
            return Err(Error::DimensionMismatch(
                "motion latents differ in shape".into(),
            ));
        }
        data.extend_from_slice(&f.data);
        tlat += f.tlat;
    }
    Ok(VideoLatent {
        frames: frames.iter().map(|f| f.frames).sum(),
        tlat,
        hlat: first.hlat,
        wlat: first.wlat,
        channels: first.channels,
        stats_id: first.stats_id.clone(),
        data,
    })
}

pub fn pack_tokens(
    z_noisy: &VideoLatent,
    z_ref: &VideoLatent,
    z_motion: Option<&VideoLatent>,
    text: &TextTokens,
    cfg: &ModelConfig,
) -> Result<PackedSequence> {
    let spatial = |z: &VideoLatent| (z.hlat, z.wlat, z.channels);
    if spatial(z_ref) != spatial(z_noisy) {
        return Err(Error::DimensionMismatch(format!(
            "reference latent {:?} vs noisy {:?}",
            spatial(z_ref),
            spatial(z_noisy)
        )));
    }
    if z_noisy.channels != cfg.latent_channels() {
        return Err(Error::DimensionMismatch(format!(
            "latent has {} channels, model expects {}",
            z_noisy.channels,
            cfg.latent_channels()
        )));
    }
    if text.len() != cfg.text_len {
        return Err(Error::DimensionMismatch(format!(
            "text has {} ids, model expects {}",
            text.len(),
            cfg.text_len
        )));
    }
    if let Some(&bad) = text.ids.iter().find(|&&i| i as usize >= cfg.vocab_size) {
        return Err(Error::OutOfRange(format!(
            "text id {bad} >= vocab {}",
            cfg.vocab_size
        )));
    }
    let m = match z_motion {
        Some(z) => {
            if spatial(z) != spatial(z_noisy) {
                return Err(Error::DimensionMismatch(
                    "motion latent spatial dims".into(),
                ));
            }
            if z.tlat > cfg.max_motion {
                return Err(Error::TooManyMotionFrames {
                    found: z.tlat,
                    max: cfg.max_motion,
                });
            }
            z.tlat
        }
        None => 0,
    };
    let (hl, wl) = (z_noisy.hlat, z_noisy.wlat);
    let cells = hl * wl;
    let n_ref = z_ref.tlat * cells;
    let n_motion = m * cells;
    let n_video = z_noisy.tokens();
    let n = cfg.text_len + n_ref + n_motion + n_video;

    let mut kinds = Vec::with_capacity(n);
    let mut positions = Vec::with_capacity(n);
    let mut frame_of = Vec::with_capacity(n);
    for _ in 0..cfg.text_len {
        kinds.push(TokenKind::Text);
        positions.push([0, 0, 0]);
        frame_of.push(None);
    }
    let mut grid = |kind: TokenKind, frames: usize, t0: usize, video: bool| {
        for f in 0..frames {
            for h in 0..hl {
                for w in 0..wl {
                    kinds.push(kind);
                    positions.push([t0 + f, h, w]);
                    frame_of.push(video.then_some(f));
                }
            }
        }
    };
    grid(TokenKind::Reference, z_ref.tlat, 0, false);
    grid(TokenKind::Motion, m, 0, false);
    grid(TokenKind::Video, z_noisy.tlat, m, true);

    let mut visual = Vec::with_capacity((n_ref + n_motion + n_video) * z_noisy.channels);
    visual.extend_from_slice(&z_ref.data);
    if let Some(z) = z_motion {
        visual.extend_from_slice(&z.data);
    }
    visual.extend_from_slice(&z_noisy.data);
    Ok(PackedSequence {
        text_ids: text.ids.clone(),
        visual: Tensor::from_vec(n_ref + n_motion + n_video, z_noisy.channels, visual),
        kinds,
        positions,
        frame_of,
        n_text: cfg.text_len,
        n_ref,
        n_motion,
        n_video,
        motion_frames: m,
        target: z_noisy.zeros_like(),
    })
}

/// Rotation phases `[N, 3 * pairs_per_axis]`, axis-major `(t, h, w)`.
/// Text tokens get no rotation and reference tokens no temporal rotation.
pub fn build_rope(positions: &[[usize; 3]], kinds: &[TokenKind], cfg: &ModelConfig) -> Vec<f64> {
    let na = cfg.rope_axis_pairs();
    let d_axis = (2 * na) as f64;
    let freqs: Vec<f64> = (0..na)
        .map(|i| cfg.rope_base.powf(-((2 * i) as f64) / d_axis))
        .collect();
    let mut out = vec![0.0; positions.len() * 3 * na];
    for (r, (pos, kind)) in positions.iter().zip(kinds).enumerate() {
        if *kind == TokenKind::Text {
            continue;
        }
        let row = &mut out[r * 3 * na..(r + 1) * 3 * na];
        for axis in 0..3 {
            if axis == 0 && *kind == TokenKind::Reference {
                continue;
            }
            for (i, f) in freqs.iter().enumerate() {
                row[axis * na + i] = pos[axis] as f64 * f;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn latent(tlat: usize, hl: usize, wl: usize, c: usize) -> VideoLatent {
        VideoLatent {
            frames: 1 + (tlat - 1) * 4,
            tlat,
            hlat: hl,
            wlat: wl,
            channels: c,
            stats_id: "identity-48".into(),
            data: (0..tlat * hl * wl * c).map(|v| v as f32).collect(),
        }
    }

    fn cfg(text_len: usize) -> ModelConfig {
        ModelConfig {
            text_len,
            sp: 2,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn token_count_and_order() {
        let c = cfg(8);
        let seq = pack_tokens(
            &latent(4, 4, 4, 48),
            &latent(1, 4, 4, 48),
            None,
            &TextTokens::null(8),
            &c,
        )
        .unwrap();
        assert_eq!(seq.len(), 8 + 16 + 64);
        assert!(!seq.kinds.contains(&TokenKind::Motion));
        assert_eq!(seq.kinds[8], TokenKind::Reference);
        assert_eq!(seq.kinds[24], TokenKind::Video);
        assert_eq!(seq.frame_of[24 + 17], Some(1));
    }

    #[test]
    fn motion_frames_precede_video_in_time() {
        let c = cfg(2);
        let motion = latent(5, 2, 2, 48);
        let seq = pack_tokens(
            &latent(2, 2, 2, 48),
            &latent(1, 2, 2, 48),
            Some(&motion),
            &TextTokens::null(2),
            &c,
        )
        .unwrap();
        let tm: Vec<usize> = seq
            .kinds
            .iter()
            .zip(&seq.positions)
            .filter(|(k, _)| **k == TokenKind::Motion)
            .map(|(_, p)| p[0])
            .collect();
        assert_eq!(*tm.iter().min().unwrap(), 0);
        assert_eq!(*tm.iter().max().unwrap(), 4);
        let first_video = seq
            .kinds
            .iter()
            .position(|k| *k == TokenKind::Video)
            .unwrap();
        assert_eq!(seq.positions[first_video][0], 5);
    }

    #[test]
    fn packing_errors() {
        let c = cfg(2);
        let t = TextTokens::null(2);
        assert!(matches!(
            pack_tokens(&latent(2, 2, 2, 48), &latent(1, 2, 4, 48), None, &t, &c),
            Err(Error::DimensionMismatch(_))
        ));
        assert!(matches!(
            pack_tokens(
                &latent(2, 2, 2, 48),
                &latent(1, 2, 2, 48),
                Some(&latent(6, 2, 2, 48)),
                &t,
                &c
            ),
            Err(Error::TooManyMotionFrames { found: 6, max: 5 })
        ));
    }

    #[test]
    fn rope_phases() {
        let c = cfg(1);
        let na = c.rope_axis_pairs();
        let pos = [[7, 1, 2], [3, 1, 2], [9, 9, 9]];
        let kinds = [TokenKind::Reference, TokenKind::Video, TokenKind::Text];
        let ph = build_rope(&pos, &kinds, &c);
        let row = |r: usize| &ph[r * 3 * na..(r + 1) * 3 * na];
        assert!(row(0)[..na].iter().all(|p| *p == 0.0));
        assert_eq!(row(0)[na], 1.0);
        assert_eq!(row(1)[0], 3.0);
        assert_eq!(row(1)[2 * na], 2.0);
        assert!(row(2).iter().all(|p| *p == 0.0));
        let ph2 = build_rope(&[[0, 1, 2]], &[TokenKind::Reference], &c);
        assert_eq!(&ph2[..], row(0));
    }

    #[test]
    fn stacking_concatenates_time() {
        let s = stack_latents(&[latent(1, 2, 2, 3), latent(1, 2, 2, 3)]).unwrap();
        assert_eq!(s.tlat, 2);
        assert_eq!(s.data.len(), 24);
    }
}
