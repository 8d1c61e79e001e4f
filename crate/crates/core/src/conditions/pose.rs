//! Strided convolutional pose guider and its latent-aligned feature grid.

use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{ConvGeom, Tape, Var};
use crate::codec::{CodecConfig, PixelVideo, VideoLatent};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoseGuiderConfig {
    /// Output channels of the three conv stages; the last is the per-frame
    /// feature width.
    pub channels: [usize; 3],
    pub kernel: usize,
}

impl Default for PoseGuiderConfig {
    fn default() -> Self {
        Self {
            channels: [16, 32, 8],
            kernel: 3,
        }
    }
}

impl PoseGuiderConfig {
    pub fn frame_channels(&self) -> usize {
        self.channels[2]
    }

    /// Width of a latent-frame pose feature: `gt` frame encodings side by side.
    pub fn grid_channels(&self, codec: &CodecConfig) -> usize {
        self.channels[2] * codec.gt
    }

    /// Stride-2 stages come first; `sp` must be 1, 2, 4 or 8.
    pub fn strides(&self, sp: usize) -> Result<[usize; 3]> {
        if !sp.is_power_of_two() || sp > 8 {
            return Err(Error::Config(format!(
                "pose guider needs a spatial patch of 1, 2, 4 or 8, got {sp}"
            )));
        }
        let n = sp.trailing_zeros() as usize;
        let mut s = [1; 3];
        for v in s.iter_mut().take(n) {
            *v = 2;
        }
        Ok(s)
    }

    fn geoms(
        &self,
        frames: usize,
        height: usize,
        width: usize,
        sp: usize,
    ) -> Result<[ConvGeom; 3]> {
        let strides = self.strides(sp)?;
        let ins = [3, self.channels[0], self.channels[1]];
        let (mut h, mut w) = (height, width);
        let mut out = [ConvGeom {
            frames,
            height: 0,
            width: 0,
            channels: 0,
            kernel: self.kernel,
            stride: 1,
            pad: self.kernel / 2,
        }; 3];
        for i in 0..3 {
            out[i].height = h;
            out[i].width = w;
            out[i].channels = ins[i];
            out[i].stride = strides[i];
            h = out[i].out_height();
            w = out[i].out_width();
        }
        Ok(out)
    }

    /// Input pixel rows and columns that can influence output cell
    /// `(cy, cx)`, clipped to the canvas.
    pub fn receptive_field(
        &self,
        sp: usize,
        cy: usize,
        cx: usize,
        height: usize,
        width: usize,
    ) -> Result<(Range<usize>, Range<usize>)> {
        let strides = self.strides(sp)?;
        let pad = (self.kernel / 2) as isize;
        let (mut ylo, mut yhi, mut xlo, mut xhi) =
            (cy as isize, cy as isize, cx as isize, cx as isize);
        for &s in strides.iter().rev() {
            let s = s as isize;
            ylo = ylo * s - pad;
            yhi = yhi * s - pad + self.kernel as isize - 1;
            xlo = xlo * s - pad;
            xhi = xhi * s - pad + self.kernel as isize - 1;
        }
        let clip =
            |lo: isize, hi: isize, n: usize| lo.max(0) as usize..((hi + 1).max(0) as usize).min(n);
        Ok((clip(ylo, yhi, height), clip(xlo, xhi, width)))
    }

    /// Registers `pose.conv{i}.w` / `.b`. The final stage starts at zero.
    pub fn init_params<T: Scalar>(&self, params: &mut ParamSet<T>, rng: &mut impl Rng) {
        let ins = [3, self.channels[0], self.channels[1]];
        for i in 0..3 {
            let fan_in = self.kernel * self.kernel * ins[i];
            let mut w = Tensor::zeros(fan_in, self.channels[i]);
            if i < 2 {
                let n = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
                for v in w.data_mut() {
                    *v = T::from_f64(n.sample(rng));
                }
            }
            params.insert(format!("pose.conv{i}.w"), w);
            params.insert(
                format!("pose.conv{i}.b"),
                Tensor::zeros(1, self.channels[i]),
            );
        }
    }

    /// Per-frame features `[frames * hlat * wlat, channels[2]]` from maps laid
    /// out as `[frames * height * width, 3]` rows.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        maps: Var,
        frames: usize,
        height: usize,
        width: usize,
        sp: usize,
    ) -> Result<Var> {
        let geoms = self.geoms(frames, height, width, sp)?;
        let mut x = maps;
        for (i, g) in geoms.iter().enumerate() {
            let cols = tape.im2col(x, *g);
            let w = tape.param_named(&format!("pose.conv{i}.w"));
            let b = tape.param_named(&format!("pose.conv{i}.b"));
            x = tape.linear(cols, w, Some(b));
            if i < 2 {
                x = tape.silu(x);
            }
        }
        Ok(x)
    }
}

/// `[Tlat * Hlat * Wlat, Cp]` pose features aligned with a video latent.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseFeatureGrid {
    pub tlat: usize,
    pub hlat: usize,
    pub wlat: usize,
    pub grid: Tensor<f32>,
}

impl PoseFeatureGrid {
    pub fn zeros(tlat: usize, hlat: usize, wlat: usize, channels: usize) -> Self {
        Self {
            tlat,
            hlat,
            wlat,
            grid: Tensor::zeros(tlat * hlat * wlat, channels),
        }
    }

    pub fn channels(&self) -> usize {
        self.grid.cols()
    }

    pub fn matches(&self, z: &VideoLatent) -> bool {
        (self.tlat, self.hlat, self.wlat) == (z.tlat, z.hlat, z.wlat)
    }
}

/// Maps in the `[frames * height * width, 3]` row layout used by the guider.
pub fn map_rows<T: Scalar>(maps: &PixelVideo) -> Tensor<T> {
    let n = maps.frames() * maps.height() * maps.width();
    Tensor::from_vec(
        n,
        3,
        maps.data().iter().map(|v| T::from_f64(*v as f64)).collect(),
    )
}

/// Groups per-frame guider outputs by the codec's temporal layout. Slot `s`
/// of latent frame `k` occupies columns `s*c..(s+1)*c`; slots without a pixel
/// frame stay zero.
pub fn group_frames<T: Scalar>(
    tape: &mut Tape<'_, T>,
    per_frame: Var,
    frames: usize,
    cells: usize,
    codec: &CodecConfig,
) -> Var {
    let c = tape.value(per_frame).cols();
    let zero = tape.constant(Tensor::zeros(1, c));
    let src = tape.concat_rows(&[per_frame, zero]);
    let zero_row = frames * cells;
    let tlat = codec.latent_frames(frames);
    let slots: Vec<Var> = (0..codec.gt)
        .map(|s| {
            let idx: Vec<usize> = (0..tlat)
                .flat_map(|k| {
                    let f = codec.pixel_frame(k, s, frames);
                    (0..cells).map(move |cell| f.map_or(zero_row, |f| f * cells + cell))
                })
                .collect();
            tape.gather_rows(src, &idx)
        })
        .collect();
    tape.concat_cols(&slots)
}

/// Runs the guider on skeleton maps with frozen parameters.
pub fn encode_pose_features(
    maps: &PixelVideo,
    codec: &CodecConfig,
    guider: &PoseGuiderConfig,
    params: &ParamSet<f32>,
) -> Result<PoseFeatureGrid> {
    codec.check_dims(maps)?;
    let (frames, h, w) = (maps.frames(), maps.height(), maps.width());
    let mut tape = Tape::new(params);
    let x = tape.constant(map_rows(maps));
    let per_frame = guider.forward(&mut tape, x, frames, h, w, codec.sp)?;
    let (hl, wl) = (h / codec.sp, w / codec.sp);
    let grid = group_frames(&mut tape, per_frame, frames, hl * wl, codec);
    Ok(PoseFeatureGrid {
        tlat: codec.latent_frames(frames),
        hlat: hl,
        wlat: wl,
        grid: tape.value(grid).clone(),
    })
}
