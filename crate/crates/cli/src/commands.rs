use std::path::{Path, PathBuf};

use omnicond::ablate::{format_table, run_grid, standard_grid, Cell};
use omnicond::codec::PixelVideo;
use omnicond::conditions::audio::Waveform;
use omnicond::conditions::skeleton::SkeletonSequence;
use omnicond::data::{write_manifest, Clip, Dataset, MANIFEST};
use omnicond::eval::{evaluate_model, write_report, EvalMode};
use omnicond::infer::{generate, resolve_activation, write_output, DriveMode, DrivingRequest};
use omnicond::model::Model;
use omnicond::synth::{clip_rng, synth_clip};
use omnicond::train::{
    init_model, load_model, prepare_clips, run_stages, ConditionMask, RunOptions, TrainState,
};
use omnicond::{exec, io, Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{derive_seed, RunConfig};

pub const HELDOUT_DIR: &str = "heldout";

fn on_off(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

pub fn mask_line(m: &ConditionMask) -> String {
    format!(
        "text={} audio={} pose={} reference={} motion_frames={}",
        on_off(m.text),
        on_off(m.audio),
        on_off(m.pose),
        on_off(m.reference),
        on_off(m.motion_frames)
    )
}

fn write_dataset(
    dir: &Path,
    prefix: &str,
    range: std::ops::Range<usize>,
    cfg: &RunConfig,
) -> Result<Vec<Clip>> {
    std::fs::create_dir_all(dir)?;
    let seed = derive_seed(cfg.seed, "synth");
    let idx: Vec<usize> = range.collect();
    let clips = exec::map(&idx, |&i| {
        let clip = synth_clip(
            &format!("{prefix}{i:05}"),
            cfg.synth.frames,
            &cfg.synth,
            &mut clip_rng(seed, i as u64),
        );
        clip.save(dir).map(|rec| (clip, rec))
    });
    let mut out = Vec::with_capacity(clips.len());
    let mut records = Vec::with_capacity(clips.len());
    for c in clips {
        let (clip, rec) = c?;
        out.push(clip);
        records.push(rec);
    }
    write_manifest(&dir.join(MANIFEST), &records)?;
    Ok(out)
}

#[derive(Debug, PartialEq, Serialize)]
pub struct FlagSummary {
    pub clips: usize,
    pub lipsync_ok: f64,
    pub pose_visible: f64,
    pub aesthetic_ok: f64,
    pub text_only: f64,
}

pub fn flag_summary(clips: &[Clip]) -> FlagSummary {
    let n = clips.len().max(1) as f64;
    let rate = |f: fn(&Clip) -> bool| clips.iter().filter(|c| f(c)).count() as f64 / n;
    FlagSummary {
        clips: clips.len(),
        lipsync_ok: rate(|c| c.flags.lipsync_ok),
        pose_visible: rate(|c| c.flags.pose_visible),
        aesthetic_ok: rate(|c| c.flags.aesthetic_ok),
        text_only: rate(|c| !c.flags.lipsync_ok && !c.flags.pose_visible),
    }
}

/// Training clips into `dir`, held-out clips into `dir/heldout`.
pub fn cmd_synth(cfg: &RunConfig, dir: &Path) -> Result<FlagSummary> {
    let clips = write_dataset(dir, "c", 0..cfg.dataset.clips, cfg)?;
    let summary = flag_summary(&clips);
    println!(
        "synth: {} clips in {} | lipsync_ok {:.4} (configured {:.4}) | pose_visible {:.4} | text-only {:.4}",
        summary.clips,
        dir.display(),
        summary.lipsync_ok,
        cfg.synth.lipsync_rate,
        summary.pose_visible,
        summary.text_only
    );
    if cfg.dataset.heldout > 0 {
        let n = cfg.dataset.clips;
        write_dataset(&dir.join(HELDOUT_DIR), "h", n..n + cfg.dataset.heldout, cfg)?;
        println!(
            "synth: {} held-out clips in {}",
            cfg.dataset.heldout,
            dir.join(HELDOUT_DIR).display()
        );
    }
    std::fs::write(
        dir.join("flags.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    Ok(summary)
}

fn load_clips(dir: &Path) -> Result<Vec<Clip>> {
    let ds = Dataset::open(dir)?;
    if ds.records.is_empty() {
        return Err(Error::Empty(format!("dataset {}", dir.display())));
    }
    ds.load_all()
}

fn check_model_hash(expected: &str, model: &Model, what: &str) -> Result<()> {
    let got = model.cfg.hash();
    if got != expected {
        return Err(Error::Config(format!(
            "checkpoint model hash {got} does not match {what} hash {expected}"
        )));
    }
    Ok(())
}

#[derive(Serialize)]
struct RunRecord<'a> {
    config_hash: String,
    model_hash: String,
    config: &'a RunConfig,
}

pub struct TrainArgs {
    pub out: PathBuf,
    pub resume: Option<PathBuf>,
    pub stop_at: Option<u64>,
    pub quiet: bool,
}

pub fn cmd_train(cfg: &RunConfig, args: &TrainArgs) -> Result<TrainState> {
    cfg.validate()?;
    let clips = load_clips(&cfg.paths.data)?;
    let state = match &args.resume {
        Some(path) => {
            let s = TrainState::load(path)?;
            check_model_hash(&cfg.model.hash(), &s.model, "config model")?;
            eprintln!(
                "resuming from {} at step {} (stage {})",
                path.display(),
                s.step,
                s.stage + 1
            );
            s
        }
        None => TrainState::new(init_model(
            cfg.model.clone(),
            &clips,
            derive_seed(cfg.seed, "init"),
        )?),
    };
    let data = prepare_clips(&clips, &state.model)?;
    std::fs::create_dir_all(&args.out)?;
    let record = RunRecord {
        config_hash: cfg.hash(),
        model_hash: cfg.model.hash(),
        config: cfg,
    };
    std::fs::write(
        args.out.join("run.json"),
        serde_json::to_string_pretty(&record)?,
    )?;
    let opts = RunOptions {
        out_dir: Some(args.out.clone()),
        checkpoint_every: cfg.train.checkpoint_every,
        stop_at: args.stop_at,
        quiet: args.quiet,
    };
    let (state, reports) = run_stages(state, &cfg.plans(), &data, &opts)?;
    for r in &reports {
        let [t, a, p] = r.exposure.rates();
        println!(
            "stage {}: {} steps, mean loss {}, exposure text {t:.3} audio {a:.3} pose {p:.3}",
            r.stage,
            r.steps,
            r.mean_loss.map_or("-".into(), |l| format!("{l:.5}"))
        );
    }
    if opts.stop_at.is_some() && state.stage < cfg.stages.len() {
        state.save(&args.out.join("latest.ohck"))?;
        println!(
            "stopped at step {}; resume from {}",
            state.step,
            args.out.join("latest.ohck").display()
        );
    }
    Ok(state)
}

/// A generation request file. Relative paths resolve against the file's
/// directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RequestFile {
    pub mode: String,
    pub duration: usize,
    /// Single-frame PNG; defaults to the first frame of `clip`.
    pub reference: Option<PathBuf>,
    pub caption: Option<String>,
    pub waveform: Option<PathBuf>,
    pub skeleton: Option<PathBuf>,
    /// Dataset directory and clip id to take any unspecified signals from.
    pub dataset: Option<PathBuf>,
    pub clip: Option<String>,
    pub cfg_scale: Option<f64>,
    pub steps: Option<usize>,
    pub seed: Option<u64>,
    pub segment_len: Option<usize>,
    pub model_hash: Option<String>,
    #[serde(default)]
    pub dump_latents: bool,
}

pub fn load_request(path: &Path) -> Result<(RequestFile, DrivingRequest)> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let file: RequestFile =
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mode: DriveMode = file.mode.parse()?;
    let clip = match (&file.dataset, &file.clip) {
        (Some(d), Some(id)) => {
            let d = base.join(d);
            let ds = Dataset::open(&d)?;
            let rec = ds
                .records
                .iter()
                .find(|r| &r.id == id)
                .ok_or_else(|| Error::Config(format!("clip {id} not in {}", d.display())))?;
            Some(Clip::load(&d, rec)?)
        }
        (None, None) => None,
        _ => return Err(Error::Config("`dataset` and `clip` go together".into())),
    };
    let reference = match (&file.reference, &clip) {
        (Some(p), _) => io::read_image(&base.join(p))?,
        (None, Some(c)) => c.video.slice(0..1),
        (None, None) => return Err(Error::Config("request needs `reference` or `clip`".into())),
    };
    let waveform = match &file.waveform {
        Some(p) => Some(Waveform::read_wav(&base.join(p))?),
        None => clip.as_ref().map(|c| c.wave.clone()),
    };
    let skeleton = match &file.skeleton {
        Some(p) => Some(SkeletonSequence::read_jsonl(std::io::BufReader::new(
            std::fs::File::open(base.join(p))?,
        ))?),
        None => clip.as_ref().map(|c| c.skeleton.clone()),
    };
    let mut req = DrivingRequest::new(reference, mode, file.duration);
    req.caption = file
        .caption
        .clone()
        .or_else(|| clip.as_ref().map(|c| c.caption.clone()));
    req.waveform = waveform;
    req.skeleton = skeleton;
    if let Some(s) = file.cfg_scale {
        req.cfg_scale = s;
    }
    if let Some(s) = file.steps {
        req.steps = s;
    }
    if let Some(s) = file.seed {
        req.seed = s;
    }
    if let Some(s) = file.segment_len {
        req.segment_len = s;
    }
    Ok((file, req))
}

pub fn video_hash(v: &PixelVideo) -> String {
    let mut h = Sha256::new();
    for x in v.data() {
        h.update(x.to_le_bytes());
    }
    h.finalize()[..8]
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub struct GenerateArgs {
    pub checkpoint: PathBuf,
    pub request: PathBuf,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub config: Option<RunConfig>,
}

pub fn cmd_generate(args: &GenerateArgs) -> Result<String> {
    let (file, mut req) = load_request(&args.request)?;
    if let Some(s) = args.seed {
        req.seed = s;
    }
    let model = load_model(&args.checkpoint)?;
    if let Some(cfg) = &args.config {
        check_model_hash(&cfg.model.hash(), &model, "config model")?;
    }
    if let Some(h) = &file.model_hash {
        check_model_hash(h, &model, "request model")?;
    }
    let mask = resolve_activation(&req)?;
    println!("mode {:?}: {}", req.mode, mask_line(&mask));
    let out = generate(&req, &model)?;
    for (i, s) in out.plan.segments.iter().enumerate() {
        match &s.motion_source {
            Some(m) => println!(
                "segment {i}: frames {}..{} (motion {}..{})",
                s.generate.start, s.generate.end, m.start, m.end
            ),
            None => println!(
                "segment {i}: frames {}..{}",
                s.generate.start, s.generate.end
            ),
        }
    }
    std::fs::create_dir_all(&args.out)?;
    write_output(&args.out, &req, &model, &out, file.dump_latents)?;
    let hash = video_hash(&out.video);
    println!(
        "wrote {} frames to {} | output hash {hash}",
        out.video.frames(),
        args.out.display()
    );
    Ok(hash)
}

pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub out: PathBuf,
    pub modes: Vec<EvalMode>,
    pub limit: Option<usize>,
}

pub fn cmd_eval(cfg: &RunConfig, args: &EvalArgs) -> Result<()> {
    let model = load_model(&args.checkpoint)?;
    let mut clips = load_clips(&args.data)?;
    if let Some(n) = args.limit {
        clips.truncate(n);
    }
    let mut settings = cfg.eval.clone();
    settings.seed = derive_seed(cfg.seed, "eval").wrapping_add(settings.seed);
    let report = evaluate_model(&model, &clips, &args.modes, &settings);
    write_report(&args.out, &report)?;
    for s in &report.summaries {
        println!(
            "{:<11} clips {:>3} failures {} | sync median {} (undefined as 0: {}) | pose_err mean {} | psnr mean {}",
            s.mode.name(),
            s.clips,
            s.failures,
            fmt(s.sync_corr.median),
            fmt(s.sync_corr_or_zero.median),
            fmt(s.pose_err.mean),
            fmt(s.psnr.mean)
        );
    }
    Ok(())
}

fn fmt(v: Option<f64>) -> String {
    v.map_or("-".into(), |x| format!("{x:.4}"))
}

pub fn cmd_ablate(cfg: &RunConfig, out: &Path) -> Result<()> {
    cfg.validate()?;
    let pool = load_clips(&cfg.paths.data)?;
    let val = load_clips(&cfg.paths.data.join(HELDOUT_DIR))?;
    let seeds: Vec<u64> = cfg
        .grid
        .seeds
        .iter()
        .map(|s| derive_seed(cfg.seed, &format!("cell{s}")))
        .collect();
    let cells: Vec<Cell> = if cfg.grid.cells.is_empty() {
        standard_grid(&seeds)
    } else {
        cfg.grid
            .cells
            .iter()
            .flat_map(|&spec| seeds.iter().map(move |&seed| Cell { spec, seed }))
            .collect()
    };
    eprintln!(
        "ablation: {} runs on {} clips, {} validation clips",
        cells.len(),
        pool.len(),
        val.len()
    );
    let results = run_grid(&cells, &cfg.ablation, &pool, &val);
    let table = format_table(&results);
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("ablation.md"), &table)?;
    std::fs::write(
        out.join("ablation.json"),
        serde_json::to_string_pretty(&results)?,
    )?;
    print!("{table}");
    let failed = results.iter().filter(|r| r.error.is_some()).count();
    if failed > 0 {
        eprintln!("ablation: {failed} of {} runs failed", results.len());
    }
    Ok(())
}
