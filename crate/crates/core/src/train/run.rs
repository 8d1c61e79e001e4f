use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::exec;
use crate::model::{flow_pair, pack_tokens, sample_loss, ConditionBundle};

use super::batch::{build_batch, gaussian_like, PreparedClip, TrainItem};
use super::optim::clip_global_norm;
use super::plan::TrainPlan;
use super::state::{Exposure, TrainState};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Serialize)]
struct ItemDump<'a> {
    clip: &'a str,
    t: f64,
    loss: f64,
    text: bool,
    audio: bool,
    pose: bool,
    motion: bool,
}

/// Mean loss over the batch, one clipped AdamW update.
pub fn train_step(
    state: &mut TrainState,
    plan: &TrainPlan,
    items: &[TrainItem],
    clips: &[PreparedClip],
) -> Result<StepStats> {
    if items.is_empty() {
        return Err(Error::Empty("batch".into()));
    }
    let model = &state.model;
    let results = exec::map(items, |it| {
        let mut g = model.params.zeros_like();
        let loss = sample_loss(
            &model.params,
            &model.cfg,
            &it.seq,
            &it.cond,
            it.noise.t,
            &it.noise.target_v,
            &it.loss_mask,
            Some(&mut g),
        );
        loss.map(|l| (l, g))
    });
    let mut total = 0.0;
    let mut grads = model.params.zeros_like();
    let mut losses = Vec::with_capacity(items.len());
    for (r, it) in results.into_iter().zip(items) {
        let (l, g) = r.map_err(|e| e.in_clip(&clips[it.clip].id))?;
        total += l;
        losses.push(l);
        grads.add_assign(&g);
    }
    let loss = total / items.len() as f64;
    if !loss.is_finite() || !grads.all_finite() {
        let dump: Vec<ItemDump> = items
            .iter()
            .zip(&losses)
            .map(|(it, l)| ItemDump {
                clip: &clips[it.clip].id,
                t: it.noise.t,
                loss: *l,
                text: it.mask.text,
                audio: it.mask.audio,
                pose: it.mask.pose,
                motion: it.mask.motion_frames,
            })
            .collect();
        return Err(Error::NonFiniteLoss {
            step: state.step,
            detail: serde_json::to_string(&dump)?,
        });
    }
    grads.scale(1.0 / items.len() as f32);
    let grad_norm = clip_global_norm(&mut grads, plan.grad_clip);
    state.opt.beta1 = plan.betas[0];
    state.opt.beta2 = plan.betas[1];
    state
        .opt
        .update(&mut state.model.params, &grads, plan.lr, plan.weight_decay);
    state.step += 1;
    state.push_loss(loss);
    Ok(StepStats { loss, grad_norm })
}

/// Where and how often a run writes its artifacts.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub out_dir: Option<PathBuf>,
    /// Write `latest.ohck` every this many steps (0 disables).
    pub checkpoint_every: u64,
    /// Return early once the global step reaches this value.
    pub stop_at: Option<u64>,
    pub quiet: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageReport {
    pub stage: u8,
    pub steps: u64,
    pub mean_loss: Option<f64>,
    pub exposure: Exposure,
}

pub const METRICS_CSV: &str = "metrics.csv";

pub fn stage_checkpoint_name(index: usize) -> String {
    format!("stage{}.ohck", index + 1)
}

fn open_metrics(state: &TrainState, opts: &RunOptions) -> Result<Option<BufWriter<File>>> {
    let Some(dir) = &opts.out_dir else {
        return Ok(None);
    };
    std::fs::create_dir_all(dir)?;
    let path = dir.join(METRICS_CSV);
    let fresh = state.step == 0 || !path.exists();
    let f = if fresh {
        let mut f = File::create(&path)?;
        writeln!(f, "step,stage,loss,text_rate,audio_rate,pose_rate")?;
        f
    } else {
        OpenOptions::new().append(true).open(&path)?
    };
    Ok(Some(BufWriter::new(f)))
}

/// Runs the remaining stages of `plans` from wherever `state` stands.
/// A stage starts by reseeding the sampling stream from its plan seed, so
/// checkpoints taken at a boundary or mid-stage both resume exactly.
pub fn run_stages(
    mut state: TrainState,
    plans: &[TrainPlan],
    clips: &[PreparedClip],
    opts: &RunOptions,
) -> Result<(TrainState, Vec<StageReport>)> {
    for p in plans {
        p.validate()?;
    }
    let mut metrics = open_metrics(&state, opts)?;
    let mut reports = Vec::new();
    let mut stage_loss = (0.0, 0u64);
    while state.stage < plans.len() {
        let plan = &plans[state.stage];
        if state.stage_step == 0 {
            let mut r = ChaCha8Rng::seed_from_u64(plan.seed);
            r.set_stream(state.stage as u64 + 1);
            state.rng = r;
            state.exposure = Exposure::default();
        }
        while state.stage_step < plan.steps && !plan.budget_reached(state.exposure.audio) {
            if opts.stop_at.is_some_and(|s| state.step >= s) {
                if let Some(m) = metrics.as_mut() {
                    m.flush()?;
                }
                return Ok((state, reports));
            }
            let items = build_batch(clips, plan, &state.model, &mut state.rng)?;
            for it in &items {
                let e = &mut state.exposure;
                e.samples += 1;
                e.text += it.mask.text as u64;
                e.audio += it.mask.audio as u64;
                e.pose += it.mask.pose as u64;
                e.motion += it.mask.motion_frames as u64;
            }
            let rates = batch_rates(&items);
            let stats = train_step(&mut state, plan, &items, clips).inspect_err(|e| {
                if let (Some(dir), Error::NonFiniteLoss { step, detail }) = (&opts.out_dir, e) {
                    let _ = std::fs::write(dir.join(format!("nonfinite_step{step}.json")), detail);
                }
            })?;
            state.stage_step += 1;
            stage_loss.0 += stats.loss;
            stage_loss.1 += 1;
            if let Some(m) = metrics.as_mut() {
                writeln!(
                    m,
                    "{},{},{},{},{},{}",
                    state.step, plan.stage, stats.loss, rates[0], rates[1], rates[2]
                )?;
            }
            if !opts.quiet
                && (state.stage_step.is_multiple_of(50) || state.stage_step == plan.steps)
            {
                eprintln!(
                    "stage {} step {}/{} loss {:.5} |g| {:.3}",
                    plan.stage, state.stage_step, plan.steps, stats.loss, stats.grad_norm
                );
            }
            if let Some(dir) = &opts.out_dir {
                if opts.checkpoint_every > 0 && state.step.is_multiple_of(opts.checkpoint_every) {
                    if let Some(m) = metrics.as_mut() {
                        m.flush()?;
                    }
                    state.save(&dir.join("latest.ohck"))?;
                }
            }
        }
        reports.push(StageReport {
            stage: plan.stage,
            steps: state.stage_step,
            mean_loss: (stage_loss.1 > 0).then(|| stage_loss.0 / stage_loss.1 as f64),
            exposure: state.exposure,
        });
        stage_loss = (0.0, 0);
        let index = state.stage;
        state.stage += 1;
        state.stage_step = 0;
        if let Some(dir) = &opts.out_dir {
            if let Some(m) = metrics.as_mut() {
                m.flush()?;
            }
            state.save(&dir.join(stage_checkpoint_name(index)))?;
            std::fs::write(
                dir.join(format!("exposure_stage{}.json", index + 1)),
                serde_json::to_string_pretty(reports.last().expect("just pushed"))?,
            )?;
        }
    }
    if let Some(m) = metrics.as_mut() {
        m.flush()?;
    }
    Ok((state, reports))
}

fn batch_rates(items: &[TrainItem]) -> [f64; 3] {
    let n = items.len() as f64;
    let c = |f: fn(&TrainItem) -> bool| items.iter().filter(|i| f(i)).count() as f64 / n;
    [c(|i| i.mask.text), c(|i| i.mask.audio), c(|i| i.mask.pose)]
}

/// Velocity loss of the audio-driven task (text and audio on, pose off, no
/// motion prefix) on a fixed grid of times and seeded noise. Frame 0 is the
/// reference.
pub fn validation_loss(
    state: &TrainState,
    clips: &[PreparedClip],
    ts: &[f64],
    seed: u64,
) -> Result<f64> {
    if clips.is_empty() || ts.is_empty() {
        return Err(Error::Empty("validation set".into()));
    }
    let model = &state.model;
    let jobs: Vec<(usize, usize)> = (0..clips.len())
        .flat_map(|c| (0..ts.len()).map(move |k| (c, k)))
        .collect();
    let losses = exec::map(&jobs, |&(c, k)| -> Result<f64> {
        let clip = &clips[c];
        let x0 = crate::codec::encode_video(&clip.video, &model.codec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream((c * ts.len() + k) as u64);
        let noise = flow_pair(&x0, &gaussian_like(&x0, &mut rng), ts[k])?;
        let z_ref = crate::codec::encode_video(&clip.video.slice(0..1), &model.codec)?;
        let seq = pack_tokens(&noise.x_t, &z_ref, None, &clip.text, &model.cfg)?;
        let cond = ConditionBundle {
            text: clip.text.clone(),
            audio: Some(clip.audio.clone()),
            pose: None,
        };
        let mask = x0.valid_mask(model.cfg.gt);
        sample_loss(
            &model.params,
            &model.cfg,
            &seq,
            &cond,
            ts[k],
            &noise.target_v,
            &mask,
            None,
        )
        .map_err(|e| e.in_clip(&clip.id))
    });
    let mut sum = 0.0;
    for l in losses {
        sum += l?;
    }
    Ok(sum / jobs.len() as f64)
}

/// Evenly spaced interior times used for validation.
pub fn validation_times(n: usize) -> Vec<f64> {
    (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect()
}
