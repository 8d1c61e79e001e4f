//! Central finite-difference check of denoiser parameter gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::{PixelVideo, VideoLatent};
use crate::conditions::pose::PoseGuiderConfig;
use crate::conditions::text::TextTokens;
use crate::error::Result;
use crate::params::ParamSet;
use crate::tensor::Tensor;

use super::config::ModelConfig;
use super::denoiser::{init_params, sample_loss, ConditionBundle};
use super::pack::{pack_tokens, PackedSequence};

/// D=16, one block, two latent frames on a 4x4 grid.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        hidden: 16,
        blocks: 1,
        heads: 2,
        text_len: 4,
        vocab_size: 16,
        sp: 2,
        gt: 2,
        pose: PoseGuiderConfig {
            channels: [4, 4, 2],
            kernel: 3,
        },
        audio_features: 6,
        audio_window: 1,
        time_freqs: 8,
        ..ModelConfig::default()
    }
}

/// Everything one loss evaluation needs.
pub struct Fixture {
    pub cfg: ModelConfig,
    pub params: ParamSet<f64>,
    pub seq: PackedSequence,
    pub cond: ConditionBundle,
    pub t: f64,
    pub target: VideoLatent,
    pub mask: Vec<f32>,
}

impl Fixture {
    pub fn loss(&self, params: &ParamSet<f64>) -> Result<f64> {
        sample_loss(
            params,
            &self.cfg,
            &self.seq,
            &self.cond,
            self.t,
            &self.target,
            &self.mask,
            None,
        )
    }
}

fn latent(
    cfg: &ModelConfig,
    frames: usize,
    hl: usize,
    wl: usize,
    rng: &mut impl Rng,
) -> VideoLatent {
    let tlat = 1 + frames.saturating_sub(1).div_ceil(cfg.gt);
    let c = cfg.latent_channels();
    VideoLatent {
        frames,
        tlat,
        hlat: hl,
        wlat: wl,
        channels: c,
        stats_id: format!("identity-{c}"),
        data: (0..tlat * hl * wl * c)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    }
}

/// Random parameters (no zero-initialized groups) and fully active
/// conditions, including one motion frame.
pub fn random_fixture(
    cfg: &ModelConfig,
    hl: usize,
    wl: usize,
    frames: usize,
    seed: u64,
) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params: ParamSet<f64> = init_params(cfg, &mut rng).cast();
    for t in params.tensors_mut() {
        for v in t.data_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
    }
    let noisy = latent(cfg, frames, hl, wl, &mut rng);
    let reference = latent(cfg, 1, hl, wl, &mut rng);
    let motion = latent(cfg, 1, hl, wl, &mut rng);
    let ids = (0..cfg.text_len)
        .map(|_| rng.random_range(0..cfg.vocab_size as u32))
        .collect();
    let text = TextTokens { ids };
    let seq = pack_tokens(&noisy, &reference, Some(&motion), &text, cfg).expect("fixture packs");
    let floor = cfg.audio_floor as f32;
    let audio = Tensor::from_vec(
        frames,
        cfg.audio_features,
        (0..frames * cfg.audio_features)
            .map(|_| rng.random_range(floor..0.0))
            .collect(),
    );
    let (h, w) = (hl * cfg.sp, wl * cfg.sp);
    let maps = PixelVideo::new(
        frames,
        h,
        w,
        (0..frames * h * w * 3)
            .map(|_| rng.random_range(0.0..1.0))
            .collect(),
    )
    .expect("valid maps");
    let target = latent(cfg, frames, hl, wl, &mut rng);
    let mask = target.valid_mask(cfg.gt);
    Fixture {
        cfg: cfg.clone(),
        params,
        seq,
        cond: ConditionBundle {
            text,
            audio: Some(audio),
            pose: Some(maps),
        },
        t: rng.random_range(0.05..0.95),
        target,
        mask,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
}

/// Compares analytic gradients with central differences for up to
/// `per_group` entries of every parameter tensor. The relative error of an
/// entry is `|a - n| / max(|a|, |n|, 1e-3 * group_max)`, so entries whose
/// gradient is negligible next to the rest of the group are judged on the
/// group's scale.
pub fn check_gradients(
    fx: &Fixture,
    eps: f64,
    per_group: usize,
    seed: u64,
) -> Result<Vec<GroupCheck>> {
    let mut grads = fx.params.zeros_like();
    sample_loss(
        &fx.params,
        &fx.cfg,
        &fx.seq,
        &fx.cond,
        fx.t,
        &fx.target,
        &fx.mask,
        Some(&mut grads),
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = fx.params.clone();
    let mut out = Vec::with_capacity(params.len());
    for g in 0..params.len() {
        let len = params.tensors()[g].len();
        let idx: Vec<usize> = if len <= per_group {
            (0..len).collect()
        } else {
            sample(&mut rng, len, per_group).into_vec()
        };
        let analytic = &grads.tensors[g];
        let scale = analytic.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut worst = 0.0f64;
        for &i in &idx {
            let orig = params.tensors()[g].data()[i];
            params.tensors_mut()[g].data_mut()[i] = orig + eps;
            let lp = fx.loss(&params)?;
            params.tensors_mut()[g].data_mut()[i] = orig - eps;
            let lm = fx.loss(&params)?;
            params.tensors_mut()[g].data_mut()[i] = orig;
            let num = (lp - lm) / (2.0 * eps);
            let a = analytic.data()[i];
            let denom = a.abs().max(num.abs()).max(1e-3 * scale).max(1e-300);
            worst = worst.max((a - num).abs() / denom);
        }
        let name = params
            .iter()
            .nth(g)
            .map(|(_, n, _)| n.to_string())
            .unwrap_or_default();
        out.push(GroupCheck {
            name,
            checked: idx.len(),
            max_rel_err: worst,
        });
    }
    Ok(out)
}
