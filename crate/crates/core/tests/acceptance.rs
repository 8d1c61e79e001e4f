//! Acceptance criteria, one PASS/FAIL line each. The desk-model run is
//! cached under the cargo target directory keyed by its recipe, and an
//! interrupted run resumes from its last checkpoint.
//!
//! Exits nonzero only on a harness error, or on any FAIL when
//! `ACCEPTANCE_STRICT=1`.

use std::path::PathBuf;
use std::time::Instant;

use omnicond::ablate::{run_grid, AblationSettings, Cell, CellResult, CellSpec, Order};
use omnicond::codec::{
    decode_video, encode_video, fit_norm_stats, CodecConfig, DecodeMode, PixelVideo,
};
use omnicond::data::Clip;
use omnicond::eval::{evaluate_model, EvalMode, EvalSettings};
use omnicond::infer::{
    cfg_combine, cfg_predict, euler, generate, plan_segments, DriveMode, DrivingRequest,
};
use omnicond::model::gradcheck::{check_gradients, random_fixture, tiny_config};
use omnicond::model::{
    denoiser_forward, denoiser_forward_raw, pack_tokens, ConditionBundle, ModelConfig,
};
use omnicond::params::ParamSet;
use omnicond::synth::{clip_rng, synth_clip, SynthConfig};
use omnicond::train::{
    default_schedule, init_model, prepare_clips, route_clip, run_stages, sample_condition_mask,
    Condition, KeepRatios, RunOptions, TrainPlan, TrainState, MOTION_FRAMES,
};
use omnicond::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

struct Runner {
    results: Vec<(usize, bool)>,
}

impl Runner {
    fn run(&mut self, id: usize, name: &str, budget_s: f64, f: impl FnOnce() -> Result<Outcome>) {
        if !wanted(id) {
            return;
        }
        let t = Instant::now();
        let o = f().unwrap_or_else(|e| outcome(false, format!("error: {e}")));
        let secs = t.elapsed().as_secs_f64();
        let pass = o.pass && secs <= budget_s;
        let over = if secs > budget_s {
            format!(" (over the {budget_s:.0}s budget)")
        } else {
            String::new()
        };
        println!(
            "[{}] criterion {id}: {name} | {} | {secs:.1}s{over}",
            if pass { "PASS" } else { "FAIL" },
            o.detail
        );
        self.results.push((id, pass));
    }
}

/// `ACCEPTANCE_ONLY=1,4` restricts the run to the listed criteria.
fn wanted(id: usize) -> bool {
    match std::env::var("ACCEPTANCE_ONLY") {
        Ok(v) => v.split(',').any(|x| x.trim() == id.to_string()),
        Err(_) => true,
    }
}

fn clips(seed: u64, n: usize, frames: usize, prefix: &str) -> Vec<Clip> {
    omnicond::exec::map_range(n, |i| {
        synth_clip(
            &format!("{prefix}{i}"),
            frames,
            &SynthConfig::default(),
            &mut clip_rng(seed, i as u64),
        )
    })
}

fn gradient_check() -> Result<Outcome> {
    // 4x4 latent grid, 3 frames at temporal group 2 = 2 latent frames
    let cfg = tiny_config();
    let fx = random_fixture(&cfg, 4, 4, 3, 11);
    let report = check_gradients(&fx, 1e-3, 24, 5)?;
    let worst = report
        .iter()
        .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
        .expect("groups");
    let ok = report.iter().all(|g| g.max_rel_err < 1e-4);
    Ok(outcome(
        ok,
        format!(
            "{} groups, Tlat={}, worst {} at {:.2e} (< 1e-4)",
            report.len(),
            fx.seq.target.tlat,
            worst.name,
            worst.max_rel_err
        ),
    ))
}

fn structural() -> Result<Outcome> {
    let mut fails = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    // codec round trip
    let vids: Vec<PixelVideo> = (0..4)
        .map(|_| {
            let data = (0..9 * 16 * 16 * 3).map(|_| rng.random::<f32>()).collect();
            PixelVideo::new(9, 16, 16, data).expect("valid video")
        })
        .collect();
    let mut codec = CodecConfig::new(4, 4);
    codec.norm = fit_norm_stats(&vids, &codec)?;
    for v in &vids {
        if decode_video(&encode_video(v, &codec)?, &codec, DecodeMode::Raw)? != *v {
            fails.push("codec round trip");
        }
    }
    // reference time tag
    let fx = random_fixture(&tiny_config(), 4, 4, 3, 2);
    let p: ParamSet<f32> = fx.params.cast();
    let a = denoiser_forward(&p, &fx.cfg, &fx.seq, &fx.cond, fx.t)?;
    let mut seq = fx.seq.clone();
    seq.set_reference_time(17);
    if denoiser_forward(&p, &fx.cfg, &seq, &fx.cond, fx.t)? != a {
        fails.push("reference RoPE");
    }
    // guidance at s = 1 is the conditional prediction
    let c = clips(21, 1, 40, "L").remove(0);
    let mut model = init_model(
        ModelConfig {
            hidden: 16,
            blocks: 1,
            ..ModelConfig::small()
        },
        std::slice::from_ref(&c),
        1,
    )?;
    let x_t = encode_video(&c.video.slice(0..9), &model.codec)?;
    let z_ref = encode_video(&c.video.slice(0..1), &model.codec)?;
    let cond = ConditionBundle {
        text: model.text(&c.caption),
        audio: Some(model.audio_features(&c.wave, 9)?),
        pose: None,
    };
    for t in model.params.tensors_mut() {
        for v in t.data_mut() {
            *v = rng.random_range(-0.1..0.1);
        }
    }
    let seq = pack_tokens(&x_t, &z_ref, None, &cond.text, &model.cfg)?;
    let full = denoiser_forward_raw(&model.params, &model.cfg, &seq, &cond, 0.6, None)?;
    let guided = cfg_predict(&model, &x_t, &z_ref, None, &cond, 0.6, 1.0)?;
    if guided != full || full.data().iter().all(|v| *v == 0.0) {
        fails.push("CFG s=1");
    }
    let drop: Vec<f32> = full.data().iter().map(|v| v * 0.5 + 1.0).collect();
    if cfg_combine(full.data(), &drop, 1.0) != full.data() {
        fails.push("CFG combine s=1");
    }
    model = init_model(model.cfg.clone(), std::slice::from_ref(&c), 1)?;
    // zero pose output layer
    let mut pz = p.clone();
    for name in ["pose.conv2.w", "pose.conv2.b"] {
        pz.by_name_mut(name)
            .expect("pose layer")
            .data_mut()
            .fill(0.0);
    }
    let mut no_pose = fx.cond.clone();
    no_pose.pose = None;
    let with = denoiser_forward(&pz, &fx.cfg, &fx.seq, &fx.cond, fx.t)?;
    if fx.cond.pose.is_none() || with != denoiser_forward(&pz, &fx.cfg, &fx.seq, &no_pose, fx.t)? {
        fails.push("pose no-op");
    }
    // output length
    for d in [1, 4, 5, 6, 13, 25, 26, 40] {
        let req = DrivingRequest {
            waveform: Some(c.wave.clone()),
            steps: 1,
            segment_len: 12,
            ..DrivingRequest::new(c.video.slice(0..1), DriveMode::Audio, d)
        };
        if generate(&req, &model)?.video.frames() != d {
            fails.push("output length");
            break;
        }
    }
    // segment plans
    'plans: for lseg in [6, 12, 25] {
        for d in 1..=120 {
            let plan = plan_segments(d, lseg, MOTION_FRAMES)?;
            let mut end = 0;
            for (i, s) in plan.segments.iter().enumerate() {
                let law = if i == 0 {
                    s.motion_source.is_none() && s.generate.start == 0
                } else {
                    s.motion_source == Some(end - MOTION_FRAMES..end) && s.generate.start == end
                };
                if !law || s.generate.len() > lseg {
                    fails.push("segment plan");
                    break 'plans;
                }
                end = s.generate.end;
            }
            if end != d {
                fails.push("segment coverage");
                break 'plans;
            }
        }
    }
    let detail = if fails.is_empty() {
        "codec round trip, reference RoPE, CFG s=1, pose no-op, output length, last-five-frames law all exact".into()
    } else {
        format!("failed: {}", fails.join(", "))
    };
    Ok(outcome(fails.is_empty(), detail))
}

fn ratios() -> Result<Outcome> {
    let plan = TrainPlan::stage(3);
    let elig = route_clip(&omnicond::data::Flags {
        lipsync_ok: true,
        pose_visible: true,
        aesthetic_ok: true,
    });
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let n = 100_000;
    let mut c = [0usize; 3];
    for _ in 0..n {
        let m = sample_condition_mask(elig, &plan, &mut rng);
        c[0] += m.text as usize;
        c[1] += m.audio as usize;
        c[2] += m.pose as usize;
    }
    let f = c.map(|x| x as f64 / n as f64);
    let target = [0.9, 0.5, 0.25];
    let within = f.iter().zip(target).all(|(a, b)| (a - b).abs() <= 0.01);
    let mut forced = true;
    let all_on = KeepRatios {
        text: 1.0,
        audio: 1.0,
        pose: 1.0,
    };
    for stage in 1..=2u8 {
        for cond in [Condition::Audio, Condition::Pose] {
            for (a, p) in [(false, false), (false, true), (true, false), (true, true)] {
                let plan = TrainPlan {
                    keep: all_on,
                    stage2_condition: cond,
                    ..TrainPlan::stage(stage)
                };
                let e = route_clip(&omnicond::data::Flags {
                    lipsync_ok: a,
                    pose_visible: p,
                    aesthetic_ok: true,
                });
                for _ in 0..200 {
                    let m = sample_condition_mask(e, &plan, &mut rng);
                    let ok = match (stage, cond) {
                        (1, _) => !m.audio && !m.pose,
                        (_, Condition::Pose) => !m.audio && m.pose == p,
                        _ => !m.pose && m.audio == a,
                    };
                    forced &= ok && m.text && m.reference;
                }
            }
        }
    }
    Ok(outcome(
        within && forced,
        format!(
            "stage-3 (T,A,P) = ({:.4}, {:.4}, {:.4}) vs (0.9, 0.5, 0.25) ±0.01; stage 1/2 forcing {}",
            f[0],
            f[1],
            f[2],
            if forced { "holds" } else { "violated" }
        ),
    ))
}

fn sampler_order() -> Result<Outcome> {
    // dx/dt = x integrated from t=1 down to 0 gives x(0) = x(1) e^{-1}
    let err = |n: usize| -> Result<f64> {
        let mut x = vec![1.0f64];
        euler(&mut x, n, |x, _| Ok(x.to_vec()))?;
        Ok((x[0] - (-1f64).exp()).abs())
    };
    let mut rs = Vec::new();
    for n in [8, 16, 32] {
        rs.push(err(n)? / err(2 * n)?);
    }
    let ok = rs.iter().all(|r| (1.7..=2.3).contains(r));
    Ok(outcome(
        ok,
        format!("error ratios {rs:.3?} for n = 8/16, 16/32, 32/64 (in [1.7, 2.3])"),
    ))
}

/// Everything that determines the desk-model checkpoint.
#[derive(Serialize)]
struct DeskRecipe {
    model: ModelConfig,
    train_clips: usize,
    data_seed: u64,
    init_seed: u64,
    plans: Vec<TrainPlan>,
}

fn desk_recipe() -> DeskRecipe {
    let plans = default_schedule(DESK_STEPS)
        .into_iter()
        .enumerate()
        .map(|(i, p)| TrainPlan {
            lr: DESK_LR,
            seed: 100 + i as u64,
            ..p
        })
        .collect();
    DeskRecipe {
        model: ModelConfig::default(),
        train_clips: 2000,
        data_seed: 1,
        init_seed: 0,
        plans,
    }
}

const DESK_STEPS: [u64; 3] = [400, 7600, 8000];
const DESK_LR: f64 = 3e-4;
const HELDOUT_SEED: u64 = 2;

/// Trained model, a note on where it came from, and the training wall time
/// in seconds summed over all sessions that contributed to it.
fn desk_model() -> Result<(omnicond::model::Model, String, f64)> {
    let recipe = desk_recipe();
    let key: String = Sha256::digest(serde_json::to_vec(&recipe)?)[..6]
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect();
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(format!("desk-{key}"));
    let done = dir.join("final.ohck");
    let clock = dir.join("train_seconds");
    let spent = || -> f64 {
        std::fs::read_to_string(&clock)
            .ok()
            .and_then(|s| s.trim().parse().ok())
            .unwrap_or(0.0)
    };
    if done.exists() {
        let s = TrainState::load(&done)?;
        let secs = spent();
        return Ok((
            s.model,
            format!(
                "cached run {key}, {} steps, trained in {:.2} h",
                s.step,
                secs / 3600.0
            ),
            secs,
        ));
    }
    let mut mark = Instant::now();
    let train = clips(recipe.data_seed, recipe.train_clips, 25, "t");
    let latest = dir.join("latest.ohck");
    let (state, note) = if latest.exists() {
        let s = TrainState::load(&latest)?;
        let step = s.step;
        (s, format!("resumed run {key} at step {step}"))
    } else {
        (
            TrainState::new(init_model(recipe.model.clone(), &train, recipe.init_seed)?),
            format!("fresh run {key}"),
        )
    };
    let data = prepare_clips(&train, &state.model)?;
    let total: u64 = recipe.plans.iter().map(|p| p.steps).sum();
    let mut state = state;
    let mut secs = spent();
    while state.stage < recipe.plans.len() {
        let opts = RunOptions {
            out_dir: Some(dir.clone()),
            checkpoint_every: 200,
            stop_at: Some((state.step / 200 + 1) * 200).filter(|s| *s < total),
            quiet: true,
        };
        state = run_stages(state, &recipe.plans, &data, &opts)?.0;
        secs += mark.elapsed().as_secs_f64();
        mark = Instant::now();
        std::fs::write(&clock, format!("{secs}"))?;
    }
    state.save(&done)?;
    Ok((
        state.model,
        format!(
            "{note}, {} steps, trained in {:.2} h",
            state.step,
            secs / 3600.0
        ),
        secs,
    ))
}

fn end_to_end(model: &omnicond::model::Model, note: &str) -> Result<Outcome> {
    let held = clips(HELDOUT_SEED, 50, 25, "h");
    let settings = EvalSettings {
        seed: 500,
        ..EvalSettings::default()
    };
    let rep = evaluate_model(
        model,
        &held,
        &[EvalMode::Audio, EvalMode::AudioNull],
        &settings,
    );
    let a = rep.summary(EvalMode::Audio).expect("audio");
    let n = rep.summary(EvalMode::AudioNull).expect("null");
    let (ma, mn) = (
        a.sync_corr_or_zero.median.unwrap_or(f64::NAN),
        n.sync_corr_or_zero.median.unwrap_or(f64::NAN),
    );
    Ok(outcome(
        ma >= 0.6 && mn <= 0.2 && a.failures + n.failures == 0,
        format!(
            "{note}; 50 held-out clips: median sync {ma:.3} with audio (>= 0.6), {mn:.3} with audio nulled (<= 0.2); \
             undefined counted as 0 ({} / {})",
            a.clips - a.sync_corr.count,
            n.clips - n.sync_corr.count
        ),
    ))
}

fn small_settings(eval_clips: usize) -> AblationSettings {
    AblationSettings {
        model: ModelConfig::small(),
        steps: ABLATION_STEPS,
        batch: 8,
        lr: 1e-3,
        audio_budget: ABLATION_AUDIO_BUDGET,
        val_times: 8,
        val_seed: 99,
        eval_clips,
        eval: EvalSettings {
            steps: 16,
            seed: 7,
            ..EvalSettings::default()
        },
    }
}

const ABLATION_STEPS: [u64; 3] = [100, 300, 300];
const ABLATION_AUDIO_BUDGET: u64 = 600;
const SEEDS: [u64; 3] = [1, 2, 3];

fn grid(specs: &[CellSpec], s: &AblationSettings, pool: &[Clip], val: &[Clip]) -> Vec<CellResult> {
    let cells: Vec<Cell> = specs
        .iter()
        .flat_map(|&spec| SEEDS.iter().map(move |&seed| Cell { spec, seed }))
        .collect();
    run_grid(&cells, s, pool, val)
}

fn pick(rs: &[CellResult], spec: CellSpec) -> Vec<&CellResult> {
    rs.iter().filter(|r| r.spec == spec).collect()
}

fn errors(rs: &[CellResult]) -> Option<String> {
    let e: Vec<String> = rs
        .iter()
        .filter_map(|r| {
            r.error
                .as_ref()
                .map(|e| format!("{} seed {}: {e}", r.label, r.seed))
        })
        .collect();
    (!e.is_empty()).then(|| e.join("; "))
}

fn loss(r: &CellResult) -> f64 {
    r.val_audio_loss.unwrap_or(f64::NAN)
}

fn principle_one(pool: &[Clip], val: &[Clip]) -> Result<Outcome> {
    let (none, all) = (
        CellSpec::TData { fraction: 0.0 },
        CellSpec::TData { fraction: 1.0 },
    );
    let rs = grid(&[none, all], &small_settings(0), pool, val);
    if let Some(e) = errors(&rs) {
        return Ok(outcome(false, e));
    }
    let (a, b) = (pick(&rs, none), pick(&rs, all));
    let wins = a.iter().zip(&b).filter(|(x, y)| loss(y) <= loss(x)).count();
    let pairs: Vec<String> = a
        .iter()
        .zip(&b)
        .map(|(x, y)| {
            format!(
                "{:.4}/{:.4} ({}/{} steps, {}/{} audio)",
                loss(x),
                loss(y),
                x.steps,
                y.steps,
                x.audio_samples,
                y.audio_samples
            )
        })
        .collect();
    Ok(outcome(
        wins >= 2,
        format!(
            "val audio loss 0%/100% T-Data per seed: {}; 100% no worse in {wins}/3",
            pairs.join(", ")
        ),
    ))
}

fn principle_two(pool: &[Clip], val: &[Clip]) -> Result<Outcome> {
    let iap = CellSpec::Order { order: Order::Iap };
    let ipa = CellSpec::Order { order: Order::Ipa };
    let a_lt_p = CellSpec::Ratio {
        audio: 0.25,
        pose: 0.5,
    };
    let mut rs = grid(&[iap, ipa], &small_settings(10), pool, val);
    rs.extend(grid(&[a_lt_p], &small_settings(0), pool, val));
    if let Some(e) = errors(&rs) {
        return Ok(outcome(false, e));
    }
    // the A>P cell (A=0.5, P=0.25) trains exactly the IAP schedule
    let (hi, lo, pf) = (pick(&rs, iap), pick(&rs, a_lt_p), pick(&rs, ipa));
    let ratio_wins = hi
        .iter()
        .zip(&lo)
        .filter(|(h, l)| loss(h) <= loss(l))
        .count();
    let pose_close = hi
        .iter()
        .zip(&pf)
        .filter(|(h, p)| match (h.pose_err, p.pose_err) {
            (Some(a), Some(b)) => a - b <= 1.0,
            _ => false,
        })
        .count();
    let order_wins = hi
        .iter()
        .zip(&pf)
        .filter(|(h, p)| loss(h) < loss(p))
        .count();
    let fmt = |v: &[&CellResult], f: fn(&CellResult) -> Option<f64>| {
        v.iter()
            .map(|r| f(r).map_or("-".into(), |x| format!("{x:.4}")))
            .collect::<Vec<_>>()
            .join("/")
    };
    Ok(outcome(
        ratio_wins >= 2 && pose_close >= 2 && order_wins >= 2,
        format!(
            "A>P vs A<P loss {} vs {} ({ratio_wins}/3 no worse); IAP vs IPA pose_err {} vs {} ({pose_close}/3 within 1 px), \
             audio loss {} vs {} ({order_wins}/3 strictly lower)",
            fmt(&hi, |r| r.val_audio_loss),
            fmt(&lo, |r| r.val_audio_loss),
            fmt(&hi, |r| r.pose_err),
            fmt(&pf, |r| r.pose_err),
            fmt(&hi, |r| r.val_audio_loss),
            fmt(&pf, |r| r.val_audio_loss),
        ),
    ))
}

fn mean_abs(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() as f64)
        .sum::<f64>()
        / a.len() as f64
}

fn chaining(model: &omnicond::model::Model) -> Result<Outcome> {
    let clip = clips(HELDOUT_SEED + 1, 1, 65, "long").remove(0);
    let req = DrivingRequest {
        caption: Some(clip.caption.clone()),
        waveform: Some(clip.wave.clone()),
        seed: 9,
        ..DrivingRequest::new(clip.video.slice(0..1), DriveMode::Audio, 65)
    };
    let a = generate(&req, model)?;
    let b = generate(&req, model)?;
    let v = &a.video;
    let mut within = Vec::new();
    let mut seams = Vec::new();
    for s in &a.plan.segments {
        if s.motion_source.is_some() {
            seams.push(mean_abs(
                v.frame(s.generate.start - 1),
                v.frame(s.generate.start),
            ));
        }
        for t in s.generate.start + 1..s.generate.end {
            within.push(mean_abs(v.frame(t - 1), v.frame(t)));
        }
    }
    let within_mean = within.iter().sum::<f64>() / within.len() as f64;
    let tails: Vec<f64> = a
        .plan
        .segments
        .iter()
        .filter(|s| s.motion_source.is_some())
        .map(|s| {
            let t = s.generate.start - 1;
            (t - 3..t)
                .map(|i| mean_abs(v.frame(i), v.frame(i + 1)))
                .sum::<f64>()
                / 3.0
        })
        .collect();
    let ok = v.frames() == 65 && a.video == b.video && seams.iter().all(|s| *s < within_mean);
    Ok(outcome(
        ok,
        format!(
            "{} frames in {} segments, deterministic: {}; seam diffs {seams:.4?} vs within-segment mean {within_mean:.4} (preceding 3 in-segment diffs average {tails:.4?})",
            v.frames(),
            a.plan.segments.len(),
            a.video == b.video
        ),
    ))
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        for i in 1..=8 {
            println!("criterion_{i}: test");
        }
        return;
    }
    omnicond::exec::init_threads(None);
    let mut r = Runner {
        results: Vec::new(),
    };
    r.run(1, "gradient correctness", 120.0, gradient_check);
    r.run(2, "structural invariants", 60.0, structural);
    r.run(3, "ratio statistics", 60.0, ratios);
    r.run(4, "sampler order", 60.0, sampler_order);

    let (pool, val) = if wanted(6) || wanted(7) {
        (clips(31, 300, 25, "p"), clips(32, 20, 25, "v"))
    } else {
        (Vec::new(), Vec::new())
    };
    r.run(
        6,
        "more text-only data helps the audio task",
        3600.0,
        || principle_one(&pool, &val),
    );
    r.run(
        7,
        "stronger condition at lower ratio, audio before pose",
        3600.0,
        || principle_two(&pool, &val),
    );

    match (wanted(5) || wanted(8)).then(desk_model) {
        None => {}
        Some(Ok((model, note, train_s))) => {
            r.run(5, "end-to-end learning", 8.0 * 3600.0 - train_s, || {
                end_to_end(&model, &note)
            });
            r.run(8, "long-video chaining", 600.0, || chaining(&model));
        }
        Some(Err(e)) => {
            println!("[FAIL] criterion 5: end-to-end learning | training failed: {e}");
            println!("[FAIL] criterion 8: long-video chaining | no trained model: {e}");
            r.results.push((5, false));
            r.results.push((8, false));
        }
    }
    r.results.sort();
    let passed = r.results.iter().filter(|(_, p)| *p).count();
    println!("acceptance: {passed}/{} criteria passed", r.results.len());
    if passed < r.results.len() && std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
