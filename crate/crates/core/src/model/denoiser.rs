use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{AttnBlock, RopeTable, Tape, Var};
use crate::codec::{CodecConfig, PixelVideo, VideoLatent};
use crate::conditions::audio::{pooling_plan, window_source, PooledSource};
use crate::conditions::pose::{group_frames, map_rows};
use crate::conditions::text::TextTokens;
use crate::error::{Error, Result};
use crate::params::{Grads, ParamSet};
use crate::tensor::{Scalar, Tensor};

use super::config::ModelConfig;
use super::pack::{build_rope, PackedSequence};

const STREAMS: [&str; 2] = ["txt", "vis"];

/// Driving conditions for one denoiser call. `None` selects the null form.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionBundle {
    pub text: TextTokens,
    /// Audio feature rows, one per pixel frame of the noisy segment.
    pub audio: Option<Tensor<f32>>,
    /// Skeleton maps, one per pixel frame of the noisy segment.
    pub pose: Option<PixelVideo>,
}

impl ConditionBundle {
    /// Audio and text replaced by their null forms; pose is kept.
    pub fn unconditional(&self) -> Self {
        Self {
            text: TextTokens::null(self.text.len()),
            audio: None,
            pose: self.pose.clone(),
        }
    }
}

/// Which feature rows feed each latent frame's audio tokens. The default
/// routing follows the codec's temporal grouping; tests may permute or
/// silence sets.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioRouting {
    pub sets: Vec<Vec<PooledSource>>,
    pub silenced: Vec<bool>,
}

impl AudioRouting {
    pub fn standard(frames: usize, cfg: &ModelConfig) -> Self {
        let sets = pooling_plan(frames, cfg.audio_k(), &CodecConfig::new(cfg.sp, cfg.gt));
        let silenced = vec![false; sets.len()];
        Self { sets, silenced }
    }
}

fn normal<T: Scalar>(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Tensor<T> {
    let n = Normal::new(0.0, std).expect("finite std");
    Tensor::from_vec(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| T::from_f64(n.sample(rng)))
            .collect(),
    )
}

/// Fresh parameters. adaLN projections, the cross-attention output, the
/// pose guider's last stage and the output head start at zero.
pub fn init_params(cfg: &ModelConfig, rng: &mut impl Rng) -> ParamSet<f32> {
    let d = cfg.hidden;
    let c = cfg.latent_channels();
    let mut p = ParamSet::new();
    let fan = |n: usize| 1.0 / (n as f64).sqrt();
    p.insert(
        "time.l1.w",
        normal(cfg.time_freqs, d, fan(cfg.time_freqs), rng),
    );
    p.insert("time.l1.b", Tensor::zeros(1, d));
    p.insert("time.l2.w", normal(d, d, fan(d), rng));
    p.insert("time.l2.b", Tensor::zeros(1, d));
    p.insert("text.embed", normal(cfg.vocab_size, d, 0.02, rng));
    p.insert(
        "in.w",
        normal(
            c + cfg.pose_channels(),
            d,
            fan(c + cfg.pose_channels()),
            rng,
        ),
    );
    p.insert("in.b", Tensor::zeros(1, d));
    cfg.pose.init_params(&mut p, rng);
    p.insert(
        "audio.l1.w",
        normal(cfg.audio_features, d, fan(cfg.audio_features), rng),
    );
    p.insert("audio.l1.b", Tensor::zeros(1, d));
    p.insert("audio.l2.w", normal(d, d, fan(d), rng));
    p.insert("audio.l2.b", Tensor::zeros(1, d));
    p.insert("audio.tag", normal(cfg.audio_tags(), d, 0.02, rng));
    p.insert("audio.null", normal(1, d, 0.02, rng));
    for b in 0..cfg.blocks {
        for s in STREAMS {
            let n = |x: &str| format!("b{b}.{s}.{x}");
            p.insert(n("ada.w"), Tensor::zeros(d, 6 * d));
            p.insert(n("ada.b"), Tensor::zeros(1, 6 * d));
            p.insert(n("qkv.w"), normal(d, 3 * d, fan(d), rng));
            p.insert(n("qkv.b"), Tensor::zeros(1, 3 * d));
            p.insert(n("proj.w"), normal(d, d, fan(d), rng));
            p.insert(n("proj.b"), Tensor::zeros(1, d));
            p.insert(n("ff1.w"), normal(d, 4 * d, fan(d), rng));
            p.insert(n("ff1.b"), Tensor::zeros(1, 4 * d));
            p.insert(n("ff2.w"), normal(4 * d, d, fan(4 * d), rng));
            p.insert(n("ff2.b"), Tensor::zeros(1, d));
        }
        let n = |x: &str| format!("b{b}.xa.{x}");
        p.insert(n("q.w"), normal(d, d, fan(d), rng));
        p.insert(n("q.b"), Tensor::zeros(1, d));
        p.insert(n("kv.w"), normal(d, 2 * d, fan(d), rng));
        p.insert(n("kv.b"), Tensor::zeros(1, 2 * d));
        p.insert(n("o.w"), Tensor::zeros(d, d));
        p.insert(n("o.b"), Tensor::zeros(1, d));
    }
    p.insert("final.ada.w", Tensor::zeros(d, 2 * d));
    p.insert("final.ada.b", Tensor::zeros(1, 2 * d));
    p.insert("final.w", Tensor::zeros(d, c));
    p.insert("final.b", Tensor::zeros(1, c));
    p
}

/// Sinusoidal embedding of `1000 t`, `[1, dim]` as `[cos | sin]`.
pub fn timestep_embedding<T: Scalar>(t: f64, dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut out = Tensor::zeros(1, dim);
    for i in 0..half {
        let f = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let a = 1000.0 * t * f;
        out.data_mut()[i] = T::from_f64(a.cos());
        out.data_mut()[half + i] = T::from_f64(a.sin());
    }
    out
}

fn lin<T: Scalar>(tape: &mut Tape<'_, T>, x: Var, prefix: &str) -> Var {
    let w = tape.param_named(&format!("{prefix}.w"));
    let b = tape.param_named(&format!("{prefix}.b"));
    tape.linear(x, w, Some(b))
}

/// Splits a `[1, n*d]` row into `n` rows of width `d`.
fn chunks<T: Scalar>(tape: &mut Tape<'_, T>, x: Var, n: usize, d: usize) -> Vec<Var> {
    (0..n).map(|i| tape.slice_cols(x, i * d, d)).collect()
}

fn check_finite<T: Scalar>(tape: &Tape<'_, T>, v: Var, block: usize, what: &str) -> Result<()> {
    if tape.value(v).all_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteActivation {
            block,
            what: what.into(),
        })
    }
}

fn audio_rows<T: Scalar>(
    tape: &mut Tape<'_, T>,
    cfg: &ModelConfig,
    seq: &PackedSequence,
    feats: Option<&Tensor<f32>>,
    routing: Option<&AudioRouting>,
) -> Result<(Var, Vec<std::ops::Range<usize>>)> {
    let tlat = seq.target.tlat;
    let Some(feats) = feats else {
        let null = tape.param_named("audio.null");
        let rows = tape.gather_rows(null, &vec![0; tlat]);
        return Ok((rows, (0..tlat).map(|k| k..k + 1).collect()));
    };
    let frames = seq.target.frames;
    if feats.rows() != frames || feats.cols() != cfg.audio_features {
        return Err(Error::DimensionMismatch(format!(
            "audio features {}x{}, expected {frames}x{}",
            feats.rows(),
            feats.cols(),
            cfg.audio_features
        )));
    }
    let standard;
    let routing = match routing {
        Some(r) => r,
        None => {
            standard = AudioRouting::standard(frames, cfg);
            &standard
        }
    };
    if routing.sets.len() != tlat {
        return Err(Error::DimensionMismatch(format!(
            "{} audio sets for {tlat} latent frames",
            routing.sets.len()
        )));
    }
    let lo = cfg.audio_floor;
    let scaled: Vec<T> = feats
        .data()
        .iter()
        .map(|v| T::from_f64((*v as f64 - lo) / -lo))
        .collect();
    let x = tape.constant(Tensor::from_vec(frames, cfg.audio_features, scaled));
    let h = lin(tape, x, "audio.l1");
    let h = tape.silu(h);
    let proj = lin(tape, h, "audio.l2");

    let mut src = Vec::new();
    let mut tags = Vec::new();
    let mut keep = Vec::new();
    let mut ranges = Vec::with_capacity(tlat);
    for (set, silenced) in routing.sets.iter().zip(&routing.silenced) {
        let start = src.len();
        for s in set {
            src.push(window_source(s.frame, s.window, cfg.audio_window, frames));
            tags.push(s.tag);
            keep.push(if *silenced { T::ZERO } else { T::ONE });
        }
        ranges.push(start..src.len());
    }
    let tok = tape.gather_rows(proj, &src);
    let tag_table = tape.param_named("audio.tag");
    let tag = tape.gather_rows(tag_table, &tags);
    let mut rows = tape.add(tok, tag);
    if keep.contains(&T::ZERO) {
        let d = cfg.hidden;
        let mask: Vec<T> = keep
            .iter()
            .flat_map(|k| std::iter::repeat_n(*k, d))
            .collect();
        let m = tape.constant(Tensor::from_vec(keep.len(), d, mask));
        rows = tape.mul(rows, m);
    }
    Ok((rows, ranges))
}

fn pose_cols<T: Scalar>(
    tape: &mut Tape<'_, T>,
    cfg: &ModelConfig,
    seq: &PackedSequence,
    maps: Option<&PixelVideo>,
) -> Result<Var> {
    let cp = cfg.pose_channels();
    let n_vis = seq.visual.rows();
    let Some(maps) = maps else {
        return Ok(tape.constant(Tensor::zeros(n_vis, cp)));
    };
    let z = &seq.target;
    if maps.frames() != z.frames
        || maps.height() != z.hlat * cfg.sp
        || maps.width() != z.wlat * cfg.sp
    {
        return Err(Error::DimensionMismatch(format!(
            "pose maps {}x{}x{} do not match latent {}x{}x{} at patch {}",
            maps.frames(),
            maps.height(),
            maps.width(),
            z.frames,
            z.hlat,
            z.wlat,
            cfg.sp
        )));
    }
    let x = tape.constant(map_rows(maps));
    let per_frame =
        cfg.pose
            .forward(tape, x, maps.frames(), maps.height(), maps.width(), cfg.sp)?;
    let grid = group_frames(
        tape,
        per_frame,
        z.frames,
        z.hlat * z.wlat,
        &CodecConfig::new(cfg.sp, cfg.gt),
    );
    let pad = tape.constant(Tensor::zeros(seq.video_offset(), cp));
    Ok(tape.concat_rows(&[pad, grid]))
}

/// Records the denoiser on `tape` and returns the `[n_video, C]` velocity.
pub fn build_graph<T: Scalar>(
    tape: &mut Tape<'_, T>,
    cfg: &ModelConfig,
    seq: &PackedSequence,
    cond: &ConditionBundle,
    t: f64,
    routing: Option<&AudioRouting>,
) -> Result<Var> {
    let d = cfg.hidden;
    let (nt, nv) = (seq.n_text, seq.visual.rows());
    let n = nt + nv;
    let te = tape.constant(timestep_embedding(t, cfg.time_freqs));
    let h = lin(tape, te, "time.l1");
    let h = tape.silu(h);
    let c = lin(tape, h, "time.l2");
    let c = tape.silu(c);

    let table = tape.param_named("text.embed");
    let ids: Vec<usize> = cond.text.ids.iter().map(|&i| i as usize).collect();
    if ids.iter().any(|&i| i >= cfg.vocab_size) || ids.len() != nt {
        return Err(Error::OutOfRange("text ids".into()));
    }
    let mut x_txt = tape.gather_rows(table, &ids);

    let lat = tape.constant(seq.visual.cast());
    let pose = pose_cols(tape, cfg, seq, cond.pose.as_ref())?;
    let inp = tape.concat_cols(&[lat, pose]);
    let mut x_vis = lin(tape, inp, "in");

    let (audio, audio_ranges) = if cfg.cross_attention {
        let (a, r) = audio_rows(tape, cfg, seq, cond.audio.as_ref(), routing)?;
        (Some(a), r)
    } else {
        (None, Vec::new())
    };

    let rope = Arc::new(RopeTable::from_phases(
        n,
        cfg.rope_pairs(),
        &build_rope(&seq.positions, &seq.kinds, cfg),
    ));
    let (off, nvid, cells) = (seq.video_offset(), seq.n_video, seq.cells());

    for b in 0..cfg.blocks {
        let mods: Vec<Vec<Var>> = STREAMS
            .iter()
            .map(|s| {
                let m = lin(tape, c, &format!("b{b}.{s}.ada"));
                chunks(tape, m, 6, d)
            })
            .collect();
        let (mt, mv) = (&mods[0], &mods[1]);

        if cfg.self_attention {
            let lt = tape.layer_norm(x_txt);
            let ht = tape.modulate(lt, mt[0], mt[1]);
            let lv = tape.layer_norm(x_vis);
            let hv = tape.modulate(lv, mv[0], mv[1]);
            let qkv_t = lin(tape, ht, &format!("b{b}.txt.qkv"));
            let qkv_v = lin(tape, hv, &format!("b{b}.vis.qkv"));
            let mut qkv = Vec::with_capacity(3);
            for i in 0..3 {
                let a = tape.slice_cols(qkv_t, i * d, d);
                let bv = tape.slice_cols(qkv_v, i * d, d);
                qkv.push(tape.concat_rows(&[a, bv]));
            }
            let q = tape.rope(qkv[0], rope.clone(), cfg.heads, 0..nt);
            let k = tape.rope(qkv[1], rope.clone(), cfg.heads, 0..nt);
            let a = tape.attention(
                q,
                k,
                qkv[2],
                cfg.heads,
                vec![AttnBlock { q: 0..n, k: 0..n }],
            );
            let at = tape.slice_rows(a, 0, nt);
            let av = tape.slice_rows(a, nt, nv);
            let ot = lin(tape, at, &format!("b{b}.txt.proj"));
            let ov = lin(tape, av, &format!("b{b}.vis.proj"));
            x_txt = tape.gated_add(x_txt, ot, mt[2]);
            x_vis = tape.gated_add(x_vis, ov, mv[2]);
        }

        if let Some(audio) = audio {
            let vid = tape.slice_rows(x_vis, off, nvid);
            let lv = tape.layer_norm(vid);
            let q = lin(tape, lv, &format!("b{b}.xa.q"));
            let kv = lin(tape, audio, &format!("b{b}.xa.kv"));
            let k = tape.slice_cols(kv, 0, d);
            let v = tape.slice_cols(kv, d, d);
            let blocks = audio_ranges
                .iter()
                .enumerate()
                .map(|(f, r)| AttnBlock {
                    q: f * cells..(f + 1) * cells,
                    k: r.clone(),
                })
                .collect();
            let a = tape.attention(q, k, v, cfg.heads, blocks);
            let o = lin(tape, a, &format!("b{b}.xa.o"));
            x_vis = tape.scatter_add_rows(x_vis, off, o);
        }

        for (s, x) in [(0usize, &mut x_txt), (1, &mut x_vis)] {
            let m = &mods[s];
            let l = tape.layer_norm(*x);
            let h = tape.modulate(l, m[3], m[4]);
            let h = lin(tape, h, &format!("b{b}.{}.ff1", STREAMS[s]));
            let h = tape.gelu(h);
            let h = lin(tape, h, &format!("b{b}.{}.ff2", STREAMS[s]));
            *x = tape.gated_add(*x, h, m[5]);
        }
        check_finite(tape, x_vis, b, "visual stream")?;
        check_finite(tape, x_txt, b, "text stream")?;
    }

    let vid = tape.slice_rows(x_vis, off, nvid);
    let fm = lin(tape, c, "final.ada");
    let fm = chunks(tape, fm, 2, d);
    let l = tape.layer_norm(vid);
    let h = tape.modulate(l, fm[0], fm[1]);
    let out = lin(tape, h, "final");
    check_finite(tape, out, cfg.blocks, "output head")?;
    Ok(out)
}

fn to_latent<T: Scalar>(seq: &PackedSequence, v: &Tensor<T>) -> VideoLatent {
    VideoLatent {
        data: v.data().iter().map(|x| x.to_f64() as f32).collect(),
        ..seq.target.clone()
    }
}

/// Velocity prediction for the video tokens of `seq`.
pub fn denoiser_forward<T: Scalar>(
    params: &ParamSet<T>,
    cfg: &ModelConfig,
    seq: &PackedSequence,
    cond: &ConditionBundle,
    t: f64,
) -> Result<VideoLatent> {
    let mut tape = Tape::new(params);
    let out = build_graph(&mut tape, cfg, seq, cond, t, None)?;
    Ok(to_latent(seq, tape.value(out)))
}

/// Same as [`denoiser_forward`] but returns the raw `[n_video, C]` tensor in
/// the parameter precision.
pub fn denoiser_forward_raw<T: Scalar>(
    params: &ParamSet<T>,
    cfg: &ModelConfig,
    seq: &PackedSequence,
    cond: &ConditionBundle,
    t: f64,
    routing: Option<&AudioRouting>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new(params);
    let out = build_graph(&mut tape, cfg, seq, cond, t, routing)?;
    Ok(tape.value(out).clone())
}

/// Masked velocity MSE for one sample; when `grads` is given, its gradient
/// is added into it.
#[allow(clippy::too_many_arguments)]
pub fn sample_loss<T: Scalar>(
    params: &ParamSet<T>,
    cfg: &ModelConfig,
    seq: &PackedSequence,
    cond: &ConditionBundle,
    t: f64,
    target: &VideoLatent,
    mask: &[f32],
    grads: Option<&mut Grads<T>>,
) -> Result<f64> {
    if !target.same_shape(&seq.target) || mask.len() != target.data.len() {
        return Err(Error::DimensionMismatch("loss target or mask".into()));
    }
    if !mask.iter().any(|m| *m > 0.0) {
        return Err(Error::Empty("loss mask".into()));
    }
    let mut tape = Tape::new(params);
    let pred = build_graph(&mut tape, cfg, seq, cond, t, None)?;
    let target = Tensor::from_vec(
        seq.n_video,
        target.channels,
        target.data.iter().map(|v| T::from_f64(*v as f64)).collect(),
    );
    let mask = mask.iter().map(|m| T::from_f64(*m as f64)).collect();
    let loss = tape.mse_masked(pred, target, mask);
    let value = tape.value(loss).data()[0].to_f64();
    if let Some(g) = grads {
        tape.backward(loss, g);
    }
    Ok(value)
}
