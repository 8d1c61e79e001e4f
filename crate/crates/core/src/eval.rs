//! Per-clip generation and scoring on a held-out set.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Clip;
use crate::error::{Error, Result};
use crate::exec;
use crate::infer::{generate_with_mask, resolve_activation, DriveMode, DrivingRequest};
use crate::model::Model;
use crate::synth::{pose_deviation, psnr, sync_correlation};

pub const REPORT_HEADER: &str =
    "# desk-scale proxy metrics on synthetic sprites: sync_corr stands in for Sync-C, pose_err for keypoint distance";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EvalMode {
    #[serde(rename = "audio")]
    Audio,
    #[serde(rename = "pose")]
    Pose,
    #[serde(rename = "audio+pose")]
    AudioPose,
    /// Audio-driven request with the audio condition replaced by its null
    /// form.
    #[serde(rename = "audio-null")]
    AudioNull,
}

impl EvalMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::Audio => "audio",
            Self::Pose => "pose",
            Self::AudioPose => "audio+pose",
            Self::AudioNull => "audio-null",
        }
    }

    fn drive(self) -> DriveMode {
        match self {
            Self::Audio | Self::AudioNull => DriveMode::Audio,
            Self::Pose => DriveMode::Pose,
            Self::AudioPose => DriveMode::AudioPose,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    pub steps: usize,
    pub cfg_scale: f64,
    pub seed: u64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            steps: crate::infer::DEFAULT_STEPS,
            cfg_scale: crate::infer::DEFAULT_CFG_SCALE,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRow {
    pub clip: String,
    pub mode: EvalMode,
    /// `None` when the correlation is undefined.
    pub sync_corr: Option<f64>,
    pub pose_err: Option<f64>,
    pub psnr: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MetricSummary {
    pub count: usize,
    pub mean: Option<f64>,
    pub median: Option<f64>,
}

impl MetricSummary {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        Self {
            count: values.len(),
            mean: Some(values.iter().sum::<f64>() / values.len() as f64),
            median: Some(median(values)),
        }
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModeSummary {
    pub mode: EvalMode,
    pub clips: usize,
    pub failures: usize,
    pub sync_corr: MetricSummary,
    /// Sync with undefined correlations counted as 0.
    pub sync_corr_or_zero: MetricSummary,
    pub pose_err: MetricSummary,
    pub psnr: MetricSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub summaries: Vec<ModeSummary>,
}

impl EvalReport {
    pub fn summary(&self, mode: EvalMode) -> Option<&ModeSummary> {
        self.summaries.iter().find(|s| s.mode == mode)
    }
}

fn eval_one(
    model: &Model,
    clip: &Clip,
    index: usize,
    mode: EvalMode,
    s: &EvalSettings,
) -> Result<EvalRow> {
    let req = DrivingRequest {
        caption: Some(clip.caption.clone()),
        waveform: Some(clip.wave.clone()),
        skeleton: Some(clip.skeleton.clone()),
        cfg_scale: s.cfg_scale,
        steps: s.steps,
        seed: s.seed.wrapping_add(index as u64),
        ..DrivingRequest::new(clip.video.slice(0..1), mode.drive(), clip.video.frames())
    };
    let mut mask = resolve_activation(&req)?;
    if mode == EvalMode::AudioNull {
        mask.audio = false;
    }
    let out = generate_with_mask(&req, model, mask)?;
    Ok(EvalRow {
        clip: clip.id.clone(),
        mode,
        sync_corr: sync_correlation(&out.video, &clip.wave).ok(),
        pose_err: pose_deviation(&out.video, &clip.skeleton).ok(),
        psnr: psnr(&out.video, &clip.video).ok(),
        error: None,
    })
}

/// Generates every (clip, mode) pair. A failing pair is recorded with its
/// error and the rest continue.
pub fn evaluate_model(
    model: &Model,
    clips: &[Clip],
    modes: &[EvalMode],
    settings: &EvalSettings,
) -> EvalReport {
    let jobs: Vec<(usize, EvalMode)> = (0..clips.len())
        .flat_map(|c| modes.iter().map(move |m| (c, *m)))
        .collect();
    let rows = exec::map(&jobs, |&(c, mode)| {
        eval_one(model, &clips[c], c, mode, settings).unwrap_or_else(|e| EvalRow {
            clip: clips[c].id.clone(),
            mode,
            sync_corr: None,
            pose_err: None,
            psnr: None,
            error: Some(e.to_string()),
        })
    });
    let summaries = modes
        .iter()
        .map(|&mode| {
            let rs: Vec<&EvalRow> = rows.iter().filter(|r| r.mode == mode).collect();
            let ok: Vec<&&EvalRow> = rs.iter().filter(|r| r.error.is_none()).collect();
            let pick =
                |f: fn(&EvalRow) -> Option<f64>| ok.iter().filter_map(|r| f(r)).collect::<Vec<_>>();
            let zeroed: Vec<f64> = ok.iter().map(|r| r.sync_corr.unwrap_or(0.0)).collect();
            ModeSummary {
                mode,
                clips: rs.len(),
                failures: rs.len() - ok.len(),
                sync_corr: MetricSummary::of(&pick(|r| r.sync_corr)),
                sync_corr_or_zero: MetricSummary::of(&zeroed),
                pose_err: MetricSummary::of(&pick(|r| r.pose_err)),
                psnr: MetricSummary::of(&pick(|r| r.psnr)),
            }
        })
        .collect();
    EvalReport { rows, summaries }
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}"))
        .unwrap_or_else(|| "undefined".into())
}

/// `report.csv`, `summary.json` and one `<metric>.dat` two-column file per
/// metric.
pub fn write_report(dir: &Path, report: &EvalReport) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut csv = format!("{REPORT_HEADER}\nclip,mode,sync_corr,pose_err,psnr,error\n");
    for r in &report.rows {
        let err = r.error.as_deref().unwrap_or("").replace([',', '\n'], ";");
        writeln!(
            csv,
            "{},{},{},{},{},{}",
            r.clip,
            r.mode.name(),
            cell(r.sync_corr),
            cell(r.pose_err),
            cell(r.psnr),
            err
        )
        .map_err(|e| Error::Format(e.to_string()))?;
    }
    std::fs::write(dir.join("report.csv"), csv)?;
    std::fs::write(
        dir.join("summary.json"),
        serde_json::to_string_pretty(&report.summaries)?,
    )?;
    let metrics: [(&str, fn(&EvalRow) -> Option<f64>); 3] = [
        ("sync_corr", |r| r.sync_corr),
        ("pose_err", |r| r.pose_err),
        ("psnr", |r| r.psnr),
    ];
    for (name, f) in metrics {
        let mut dat = format!("{REPORT_HEADER}\n# row {name}  (mode clip)\n");
        for (i, r) in report.rows.iter().enumerate() {
            if let Some(v) = f(r) {
                writeln!(dat, "{i} {v}  # {} {}", r.mode.name(), r.clip)
                    .map_err(|e| Error::Format(e.to_string()))?;
            }
        }
        std::fs::write(dir.join(format!("{name}.dat")), dat)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::synth::{clip_rng, synth_clip, SynthConfig};
    use crate::train::init_model;

    #[test]
    fn zero_model_bookkeeping() {
        let clips: Vec<Clip> = (0..3)
            .map(|i| {
                synth_clip(
                    &format!("v{i}"),
                    9,
                    &SynthConfig::default(),
                    &mut clip_rng(4, i),
                )
            })
            .collect();
        let cfg = ModelConfig {
            hidden: 16,
            blocks: 1,
            ..ModelConfig::small()
        };
        let model = init_model(cfg, &clips, 0).unwrap();
        let modes = [EvalMode::Audio, EvalMode::Pose];
        let s = EvalSettings {
            steps: 2,
            ..EvalSettings::default()
        };
        let a = evaluate_model(&model, &clips, &modes, &s);
        assert_eq!(a.rows.len(), 6);
        assert_eq!(a, evaluate_model(&model, &clips, &modes, &s));
        let audio = a.summary(EvalMode::Audio).unwrap();
        assert_eq!(audio.clips, 3);
        assert_eq!(audio.failures, 0);
        assert_eq!(audio.sync_corr_or_zero.count, 3);
        let dir = tempfile::tempdir().unwrap();
        write_report(dir.path(), &a).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
        assert_eq!(csv.lines().count(), 2 + 6);
        assert!(dir.path().join("psnr.dat").exists());
    }

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
