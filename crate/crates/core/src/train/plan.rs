use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Flags;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    Text,
    Audio,
    Pose,
}

/// Driving conditions a clip may be trained with.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Eligibility {
    pub text: bool,
    pub audio: bool,
    pub pose: bool,
}

/// Text is always allowed; stronger conditions only when their quality
/// flag passed. No clip is ever discarded.
pub fn route_clip(flags: &Flags) -> Eligibility {
    Eligibility {
        text: true,
        audio: flags.lipsync_ok,
        pose: flags.pose_visible,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeepRatios {
    pub text: f64,
    pub audio: f64,
    pub pose: f64,
}

impl Default for KeepRatios {
    fn default() -> Self {
        Self {
            text: 0.9,
            audio: 0.5,
            pose: 0.25,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainPlan {
    pub stage: u8,
    pub keep: KeepRatios,
    pub steps: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub batch: usize,
    pub seed: u64,
    pub betas: [f64; 2],
    /// Probability of packing a ground-truth motion prefix.
    pub motion_prob: f64,
    /// The one driving condition stage 2 adds on top of text.
    pub stage2_condition: Condition,
    /// End the stage early once this many audio-active samples were seen.
    pub audio_budget: Option<u64>,
}

impl Default for TrainPlan {
    fn default() -> Self {
        Self {
            stage: 3,
            keep: KeepRatios::default(),
            steps: 0,
            lr: 1e-4,
            weight_decay: 0.0,
            grad_clip: 1.0,
            batch: 16,
            seed: 0,
            betas: [0.9, 0.95],
            motion_prob: 0.5,
            stage2_condition: Condition::Audio,
            audio_budget: None,
        }
    }
}

impl TrainPlan {
    pub fn stage(stage: u8) -> Self {
        Self {
            stage,
            ..Self::default()
        }
    }

    /// Keep ratios after the stage rules: stage 1 trains text only, stage
    /// 2 adds a single driving condition.
    pub fn effective_keep(&self) -> KeepRatios {
        let mut k = self.keep;
        match self.stage {
            1 => {
                k.audio = 0.0;
                k.pose = 0.0;
            }
            2 => match self.stage2_condition {
                Condition::Pose => k.audio = 0.0,
                _ => k.pose = 0.0,
            },
            _ => {}
        }
        k
    }

    pub fn budget_reached(&self, audio_samples: u64) -> bool {
        self.audio_budget.is_some_and(|b| audio_samples >= b)
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(1..=3).contains(&self.stage) {
            errs.push(format!("stage {} not in 1..=3", self.stage));
        }
        for (name, v) in [
            ("keep.text", self.keep.text),
            ("keep.audio", self.keep.audio),
            ("keep.pose", self.keep.pose),
            ("motion_prob", self.motion_prob),
        ] {
            if !(0.0..=1.0).contains(&v) {
                errs.push(format!("{name} = {v} outside [0, 1]"));
            }
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            errs.push(format!("lr = {} must be finite and >= 0", self.lr));
        }
        if !(self.weight_decay >= 0.0) {
            errs.push("weight_decay must be >= 0".into());
        }
        if !(self.grad_clip > 0.0) {
            errs.push("grad_clip must be > 0".into());
        }
        if self.batch == 0 {
            errs.push("batch must be >= 1".into());
        }
        if self.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            errs.push(format!("betas {:?} outside [0, 1)", self.betas));
        }
        if self.stage2_condition == Condition::Text {
            errs.push("stage2_condition must be audio or pose".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs.join("; ")))
        }
    }
}

/// The three standard stages with the given per-stage step counts.
pub fn default_schedule(steps: [u64; 3]) -> Vec<TrainPlan> {
    (0..3)
        .map(|i| TrainPlan {
            steps: steps[i],
            ..TrainPlan::stage(i as u8 + 1)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionMask {
    pub text: bool,
    pub audio: bool,
    pub pose: bool,
    pub reference: bool,
    pub motion_frames: bool,
}

/// Independent keep draws. Four uniforms are consumed on every call, so the
/// random stream does not depend on eligibility.
pub fn sample_condition_mask(
    elig: Eligibility,
    plan: &TrainPlan,
    rng: &mut impl Rng,
) -> ConditionMask {
    let k = plan.effective_keep();
    let u: [f64; 4] = std::array::from_fn(|_| rng.random());
    ConditionMask {
        text: elig.text && u[0] < k.text,
        audio: elig.audio && u[1] < k.audio,
        pose: elig.pose && u[2] < k.pose,
        reference: true,
        motion_frames: u[3] < plan.motion_prob,
    }
}
