use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::conditions::pose::PoseGuiderConfig;
use crate::conditions::text::{DEFAULT_MAX_LEN, DEFAULT_VOCAB_SIZE};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: usize,
    pub blocks: usize,
    pub heads: usize,
    pub text_len: usize,
    pub vocab_size: usize,
    pub rope_base: f64,
    pub max_motion: usize,
    /// Codec spatial patch and temporal group the model is built for.
    pub sp: usize,
    pub gt: usize,
    pub pose: PoseGuiderConfig,
    pub audio_features: usize,
    pub audio_window: usize,
    /// Log-energy floor of the feature extractor; features are rescaled so
    /// the floor maps to 0.
    pub audio_floor: f64,
    pub time_freqs: usize,
    pub self_attention: bool,
    pub cross_attention: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            blocks: 4,
            heads: 4,
            text_len: DEFAULT_MAX_LEN,
            vocab_size: DEFAULT_VOCAB_SIZE,
            rope_base: 10_000.0,
            max_motion: 5,
            sp: 4,
            gt: 4,
            pose: PoseGuiderConfig::default(),
            audio_features: 48,
            audio_window: 2,
            audio_floor: (1e-10f64).ln(),
            time_freqs: 64,
            self_attention: true,
            cross_attention: true,
        }
    }
}

impl ModelConfig {
    /// Reduced width and depth for quick experiments and tests.
    pub fn small() -> Self {
        Self {
            hidden: 32,
            blocks: 2,
            heads: 2,
            text_len: 8,
            vocab_size: 64,
            time_freqs: 16,
            ..Self::default()
        }
    }

    pub fn latent_channels(&self) -> usize {
        3 * self.sp * self.sp * self.gt
    }

    pub fn pose_channels(&self) -> usize {
        self.pose.channels[2] * self.gt
    }

    pub fn audio_k(&self) -> usize {
        2 * self.audio_window + 1
    }

    pub fn audio_tags(&self) -> usize {
        self.gt * self.audio_k()
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    /// Rotary pairs per (t, h, w) axis.
    pub fn rope_axis_pairs(&self) -> usize {
        self.head_dim() / 6
    }

    pub fn rope_pairs(&self) -> usize {
        3 * self.rope_axis_pairs()
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.hidden == 0 || self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            errs.push(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            ));
        } else if self.head_dim() < 6 {
            errs.push(format!(
                "head dim {} too small for 3-axis rope",
                self.head_dim()
            ));
        }
        if self.blocks == 0 {
            errs.push("blocks must be >= 1".into());
        }
        if self.text_len == 0 {
            errs.push("text_len must be >= 1".into());
        }
        if self.vocab_size < 4 {
            errs.push("vocab_size must be >= 4".into());
        }
        if self.sp == 0 || self.gt == 0 {
            errs.push("sp and gt must be >= 1".into());
        }
        if let Err(e) = self.pose.strides(self.sp) {
            errs.push(e.to_string());
        }
        if self.time_freqs < 2 || !self.time_freqs.is_multiple_of(2) {
            errs.push("time_freqs must be even and >= 2".into());
        }
        if !(self.rope_base > 1.0) {
            errs.push("rope_base must be > 1".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs.join("; ")))
        }
    }

    /// Hex digest of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let d = Sha256::digest(&json);
        d[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}
