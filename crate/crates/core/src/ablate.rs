//! Grid of independent training runs along the three ablation axes: how
//! much text-only data is reused, the order conditions are introduced in,
//! and whether audio is kept more often than pose.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::Clip;
use crate::error::Result;
use crate::eval::{evaluate_model, median, EvalMode, EvalSettings};
use crate::exec;
use crate::model::ModelConfig;
use crate::train::{
    init_model, prepare_clips, run_stages, validation_loss, validation_times, Condition,
    KeepRatios, RunOptions, TrainPlan, TrainState,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Order {
    /// Text, then audio; pose never.
    #[serde(rename = "IA")]
    Ia,
    /// Text, then pose, then everything.
    #[serde(rename = "IPA")]
    Ipa,
    /// Text, then audio, then everything.
    #[serde(rename = "IAP")]
    Iap,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "axis", rename_all = "snake_case", deny_unknown_fields)]
pub enum CellSpec {
    /// Fraction of the clips failing the lipsync filter that join training.
    TData {
        fraction: f64,
    },
    Order {
        order: Order,
    },
    Ratio {
        audio: f64,
        pose: f64,
    },
}

impl CellSpec {
    pub fn label(&self) -> String {
        match self {
            Self::TData { fraction } => format!("{:.0}% T-Data", fraction * 100.0),
            Self::Order { order } => format!("{order:?}").to_uppercase(),
            Self::Ratio { audio, pose } if audio > pose => format!("A>P (A={audio}, P={pose})"),
            Self::Ratio { audio, pose } => format!("A<=P (A={audio}, P={pose})"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSettings {
    pub model: ModelConfig,
    pub steps: [u64; 3],
    pub batch: usize,
    pub lr: f64,
    /// Audio-active samples per audio stage in T-Data cells; the stage runs
    /// until it has seen this many.
    pub audio_budget: u64,
    pub val_times: usize,
    pub val_seed: u64,
    /// Held-out clips scored by generation; 0 skips generation metrics.
    pub eval_clips: usize,
    pub eval: EvalSettings,
}

impl Default for AblationSettings {
    fn default() -> Self {
        Self {
            model: ModelConfig::small(),
            steps: [100, 300, 300],
            batch: 8,
            lr: 1e-3,
            audio_budget: 600,
            val_times: 8,
            val_seed: 99,
            eval_clips: 0,
            eval: EvalSettings {
                steps: 16,
                ..EvalSettings::default()
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub spec: CellSpec,
    pub seed: u64,
}

/// Every axis of the grid, each under every seed.
pub fn standard_grid(seeds: &[u64]) -> Vec<Cell> {
    let specs = [
        CellSpec::TData { fraction: 0.0 },
        CellSpec::TData { fraction: 0.25 },
        CellSpec::TData { fraction: 0.5 },
        CellSpec::TData { fraction: 1.0 },
        CellSpec::Order { order: Order::Ia },
        CellSpec::Order { order: Order::Ipa },
        CellSpec::Order { order: Order::Iap },
        CellSpec::Ratio {
            audio: 0.5,
            pose: 0.25,
        },
        CellSpec::Ratio {
            audio: 0.25,
            pose: 0.5,
        },
    ];
    specs
        .iter()
        .flat_map(|&spec| seeds.iter().map(move |&seed| Cell { spec, seed }))
        .collect()
}

pub fn cell_plans(spec: &CellSpec, s: &AblationSettings, seed: u64) -> Vec<TrainPlan> {
    let base = |stage: u8| TrainPlan {
        stage,
        steps: s.steps[stage as usize - 1],
        batch: s.batch,
        lr: s.lr,
        seed: seed.wrapping_mul(31).wrapping_add(stage as u64),
        ..TrainPlan::default()
    };
    let mut plans = vec![base(1), base(2), base(3)];
    match *spec {
        CellSpec::TData { .. } => {
            for p in &mut plans[1..] {
                p.audio_budget = Some(s.audio_budget);
                p.steps = u64::MAX;
            }
        }
        CellSpec::Order { order } => match order {
            Order::Ia => plans[2].keep.pose = 0.0,
            Order::Ipa => plans[1].stage2_condition = Condition::Pose,
            Order::Iap => {}
        },
        CellSpec::Ratio { audio, pose } => {
            plans[2].keep = KeepRatios {
                audio,
                pose,
                ..KeepRatios::default()
            }
        }
    }
    plans
}

/// Indices of `pool` the cell trains on. Only T-Data cells subsample: all
/// lipsync-passing clips plus the leading `fraction` of the others.
pub fn cell_training_set(spec: &CellSpec, pool: &[Clip]) -> Vec<usize> {
    match *spec {
        CellSpec::TData { fraction } => {
            let others: Vec<usize> = (0..pool.len())
                .filter(|&i| !pool[i].flags.lipsync_ok)
                .collect();
            let keep = (fraction * others.len() as f64).round() as usize;
            let mut idx: Vec<usize> = (0..pool.len())
                .filter(|&i| pool[i].flags.lipsync_ok)
                .collect();
            idx.extend(&others[..keep]);
            idx.sort_unstable();
            idx
        }
        _ => (0..pool.len()).collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CellResult {
    pub label: String,
    pub spec: CellSpec,
    pub seed: u64,
    pub clips: usize,
    pub steps: u64,
    pub audio_samples: u64,
    pub pose_samples: u64,
    pub val_audio_loss: Option<f64>,
    pub audio_sync: Option<f64>,
    pub pose_err: Option<f64>,
    pub error: Option<String>,
}

fn run_inner(
    cell: &Cell,
    s: &AblationSettings,
    pool: &[Clip],
    val: &[Clip],
    out: &mut CellResult,
) -> Result<()> {
    let model = init_model(s.model.clone(), pool, cell.seed)?;
    let idx = cell_training_set(&cell.spec, pool);
    let subset: Vec<Clip> = idx.iter().map(|&i| pool[i].clone()).collect();
    let data = prepare_clips(&subset, &model)?;
    let val_data = prepare_clips(val, &model)?;
    out.clips = subset.len();
    let plans = cell_plans(&cell.spec, s, cell.seed);
    let opts = RunOptions {
        quiet: true,
        ..RunOptions::default()
    };
    let (state, reports): (TrainState, _) =
        run_stages(TrainState::new(model), &plans, &data, &opts)?;
    out.steps = state.step;
    out.audio_samples = reports.iter().map(|r| r.exposure.audio).sum();
    out.pose_samples = reports.iter().map(|r| r.exposure.pose).sum();
    out.val_audio_loss = Some(validation_loss(
        &state,
        &val_data,
        &validation_times(s.val_times),
        s.val_seed,
    )?);
    if s.eval_clips > 0 {
        let n = s.eval_clips.min(val.len());
        let rep = evaluate_model(
            &state.model,
            &val[..n],
            &[EvalMode::Audio, EvalMode::Pose],
            &s.eval,
        );
        out.audio_sync = rep
            .summary(EvalMode::Audio)
            .and_then(|m| m.sync_corr_or_zero.median);
        out.pose_err = rep.summary(EvalMode::Pose).and_then(|m| m.pose_err.mean);
    }
    Ok(())
}

/// Trains and scores one cell. Failures are recorded in the result.
pub fn run_cell(cell: &Cell, s: &AblationSettings, pool: &[Clip], val: &[Clip]) -> CellResult {
    let mut out = CellResult {
        label: cell.spec.label(),
        spec: cell.spec,
        seed: cell.seed,
        clips: 0,
        steps: 0,
        audio_samples: 0,
        pose_samples: 0,
        val_audio_loss: None,
        audio_sync: None,
        pose_err: None,
        error: None,
    };
    if let Err(e) = run_inner(cell, s, pool, val, &mut out) {
        out.error = Some(e.to_string());
    }
    out
}

pub fn run_grid(
    cells: &[Cell],
    s: &AblationSettings,
    pool: &[Clip],
    val: &[Clip],
) -> Vec<CellResult> {
    exec::map(cells, |c| run_cell(c, s, pool, val))
}

fn opt(v: Option<f64>, digits: usize) -> String {
    v.map(|x| format!("{x:.digits$}"))
        .unwrap_or_else(|| "-".into())
}

/// One row per cell label (seed medians), then one row per run.
pub fn format_table(results: &[CellResult]) -> String {
    let mut labels: Vec<&str> = Vec::new();
    for r in results {
        if !labels.contains(&r.label.as_str()) {
            labels.push(&r.label);
        }
    }
    let mut t = String::new();
    let _ = writeln!(t, "{}", crate::eval::REPORT_HEADER);
    let _ = writeln!(
        t,
        "| setting | runs | val audio loss | audio sync | pose err (px) | steps | audio samples |"
    );
    let _ = writeln!(t, "|---|---|---|---|---|---|---|");
    let med = |xs: Vec<f64>| (!xs.is_empty()).then(|| median(&xs));
    for l in &labels {
        let rs: Vec<&CellResult> = results
            .iter()
            .filter(|r| r.label == *l && r.error.is_none())
            .collect();
        let _ = writeln!(
            t,
            "| {l} | {} | {} | {} | {} | {} | {} |",
            rs.len(),
            opt(med(rs.iter().filter_map(|r| r.val_audio_loss).collect()), 5),
            opt(med(rs.iter().filter_map(|r| r.audio_sync).collect()), 3),
            opt(med(rs.iter().filter_map(|r| r.pose_err).collect()), 2),
            opt(med(rs.iter().map(|r| r.steps as f64).collect()), 0),
            opt(med(rs.iter().map(|r| r.audio_samples as f64).collect()), 0),
        );
    }
    let _ = writeln!(
        t,
        "\n| setting | seed | val audio loss | audio sync | pose err (px) | steps | error |"
    );
    let _ = writeln!(t, "|---|---|---|---|---|---|---|");
    for r in results {
        let _ = writeln!(
            t,
            "| {} | {} | {} | {} | {} | {} | {} |",
            r.label,
            r.seed,
            opt(r.val_audio_loss, 5),
            opt(r.audio_sync, 3),
            opt(r.pose_err, 2),
            r.steps,
            r.error.as_deref().unwrap_or("")
        );
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{clip_rng, synth_clip, SynthConfig};

    fn pool(n: u64) -> Vec<Clip> {
        (0..n)
            .map(|i| {
                synth_clip(
                    &format!("p{i}"),
                    9,
                    &SynthConfig::default(),
                    &mut clip_rng(3, i),
                )
            })
            .collect()
    }

    #[test]
    fn grid_axes_match_their_definitions() {
        let s = AblationSettings::default();
        let ratio = cell_plans(
            &CellSpec::Ratio {
                audio: 0.5,
                pose: 0.25,
            },
            &s,
            1,
        );
        assert_eq!((ratio[2].keep.audio, ratio[2].keep.pose), (0.5, 0.25));
        let ipa = cell_plans(&CellSpec::Order { order: Order::Ipa }, &s, 1);
        assert_eq!(ipa[1].stage2_condition, Condition::Pose);
        assert_eq!(ipa[1].effective_keep().audio, 0.0);
        let ia = cell_plans(&CellSpec::Order { order: Order::Ia }, &s, 1);
        assert_eq!(ia[2].effective_keep().pose, 0.0);
        assert_eq!(standard_grid(&[1, 2, 3]).len(), 27);
    }

    #[test]
    fn t_data_fraction_selects_text_only_clips() {
        let p = pool(40);
        let eligible = p.iter().filter(|c| c.flags.lipsync_ok).count();
        let none = cell_training_set(&CellSpec::TData { fraction: 0.0 }, &p);
        let all = cell_training_set(&CellSpec::TData { fraction: 1.0 }, &p);
        assert_eq!(none.len(), eligible);
        assert_eq!(all.len(), 40);
        assert!(none.iter().all(|&i| p[i].flags.lipsync_ok));
    }

    #[test]
    fn single_cell_grid_gives_one_row() {
        let s = AblationSettings {
            model: ModelConfig {
                hidden: 16,
                blocks: 1,
                ..ModelConfig::small()
            },
            steps: [1, 1, 1],
            batch: 2,
            val_times: 2,
            ..AblationSettings::default()
        };
        let p = pool(6);
        let cells = [Cell {
            spec: CellSpec::Ratio {
                audio: 0.5,
                pose: 0.25,
            },
            seed: 1,
        }];
        let r = run_grid(&cells, &s, &p, &p[..2]);
        assert_eq!(r.len(), 1);
        assert!(r[0].error.is_none(), "{:?}", r[0].error);
        assert_eq!(r[0].steps, 3);
        let table = format_table(&r);
        assert_eq!(table.lines().filter(|l| l.starts_with("| A>P")).count(), 2);
    }
}
