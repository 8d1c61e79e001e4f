//! Driving-signal encoders: audio, skeleton pose and caption text.

pub mod audio;
pub mod pose;
pub mod skeleton;
pub mod text;

pub use audio::{
    assemble_audio_tokens, pool_audio_per_latent_frame, AudioFeatureExtractor, AudioTokenSet,
    AudioTokens, FilterbankExtractor, Waveform,
};
pub use pose::{encode_pose_features, PoseFeatureGrid, PoseGuiderConfig};
pub use skeleton::{rasterize_skeleton, Keypoint, RasterStyle, SkeletonFrame, SkeletonSequence};
pub use text::{encode_text, TextTokens, Vocab};
