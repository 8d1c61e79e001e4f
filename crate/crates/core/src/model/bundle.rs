use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::codec::{CodecConfig, PixelVideo};
use crate::conditions::audio::{AudioFeatureExtractor, FilterbankExtractor, Waveform};
use crate::conditions::skeleton::{rasterize_skeleton, RasterStyle, SkeletonSequence};
use crate::conditions::text::{encode_text, words, TextTokens, Vocab};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

use super::config::ModelConfig;
use super::denoiser::init_params;

/// Everything needed to run the denoiser on raw signals.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub codec: CodecConfig,
    pub vocab: Vocab,
    pub params: ParamSet<f32>,
}

impl Model {
    pub fn init(cfg: ModelConfig, codec: CodecConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        let params = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(seed));
        let m = Self {
            cfg,
            codec,
            vocab,
            params,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        self.cfg.validate()?;
        self.codec.validate()?;
        let mut errs = Vec::new();
        if (self.codec.sp, self.codec.gt) != (self.cfg.sp, self.cfg.gt) {
            errs.push(format!(
                "codec (sp {}, gt {}) differs from model (sp {}, gt {})",
                self.codec.sp, self.codec.gt, self.cfg.sp, self.cfg.gt
            ));
        }
        if self.vocab.size() != self.cfg.vocab_size {
            errs.push(format!(
                "vocabulary size {} differs from model {}",
                self.vocab.size(),
                self.cfg.vocab_size
            ));
        }
        let fx = self.extractor();
        if fx.feature_dim() != self.cfg.audio_features {
            errs.push(format!(
                "audio extractor gives {} features, model expects {}",
                fx.feature_dim(),
                self.cfg.audio_features
            ));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs.join("; ")))
        }
    }

    pub fn extractor(&self) -> FilterbankExtractor {
        FilterbankExtractor::default()
    }

    /// Caption ids; a caption without words becomes the null text.
    pub fn text(&self, caption: &str) -> TextTokens {
        if words(caption).next().is_none() {
            TextTokens::null(self.cfg.text_len)
        } else {
            encode_text(caption, &self.vocab, self.cfg.text_len)
        }
    }

    pub fn audio_features(&self, wave: &Waveform, frames: usize) -> Result<Tensor<f32>> {
        self.extractor().extract(wave, frames)
    }

    pub fn pose_maps(
        &self,
        skeleton: &SkeletonSequence,
        height: usize,
        width: usize,
    ) -> Result<PixelVideo> {
        rasterize_skeleton(skeleton, height, width, &RasterStyle::default())
    }
}
