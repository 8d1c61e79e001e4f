use std::path::Path;
use std::process::{Command, Output};

use omnicond::synth::{clip_rng, synth_clip, SynthConfig};
use omnicond_cli::commands::flag_summary;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_omnicond"));
    c.env("OMNI_THREADS", "2");
    c
}

fn run(dir: &Path, args: &[&str]) -> Output {
    let out = bin()
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs");
    if !out.status.success() {
        eprintln!("stderr: {}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const TINY: &str = r#"
seed = 5
[paths]
data = "data"
out = "run"
[dataset]
clips = 6
heldout = 2
[synth]
frames = 9
lipsync_rate = 0.5
[model]
hidden = 16
blocks = 1
heads = 2
text_len = 8
vocab_size = 64
time_freqs = 16
[train]
checkpoint_every = 0
[eval]
steps = 2
[[stages]]
stage = 1
steps = 2
batch = 2
[[stages]]
stage = 2
steps = 3
batch = 2
[[stages]]
stage = 3
steps = 3
batch = 2
"#;

fn setup(config: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), config).unwrap();
    let o = run(dir.path(), &["synth", "--config", "run.toml"]);
    assert!(o.status.success());
    dir
}

#[test]
fn synth_is_reproducible_and_reports_flags() {
    let dir = setup(TINY);
    let first = std::fs::read(dir.path().join("data/manifest.jsonl")).unwrap();
    let o = run(
        dir.path(),
        &["synth", "--config", "run.toml", "--out", "again"],
    );
    assert!(stdout(&o).contains("lipsync_ok"));
    assert_eq!(
        first,
        std::fs::read(dir.path().join("again/manifest.jsonl")).unwrap()
    );
    assert!(dir.path().join("data/heldout/manifest.jsonl").exists());
}

#[test]
fn zero_lipsync_rate_routes_everything_text_only_for_audio() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("r.toml"),
        "[dataset]\nclips = 10\nheldout = 0\n[synth]\nframes = 5\nlipsync_rate = 0.0\n",
    )
    .unwrap();
    let o = run(dir.path(), &["synth", "--config", "r.toml", "--out", "d"]);
    assert!(o.status.success());
    let m = std::fs::read_to_string(dir.path().join("d/manifest.jsonl")).unwrap();
    assert_eq!(m.lines().count(), 10);
    assert!(m.lines().all(|l| l.contains("\"lipsync_ok\":false")));
}

#[test]
fn flag_summary_matches_configured_rate() {
    let cfg = SynthConfig {
        frames: 3,
        ..SynthConfig::default()
    };
    let clips: Vec<_> = (0..10_000u64)
        .map(|i| synth_clip("x", cfg.frames, &cfg, &mut clip_rng(8, i)))
        .collect();
    let s = flag_summary(&clips);
    assert!(
        (s.lipsync_ok - cfg.lipsync_rate).abs() <= 0.02,
        "{}",
        s.lipsync_ok
    );
    assert!(
        (s.pose_visible - cfg.pose_rate).abs() <= 0.02,
        "{}",
        s.pose_visible
    );
}

#[test]
fn zero_step_training_writes_three_checkpoints() {
    let cfg = TINY
        .replace("stage = 1\nsteps = 2", "stage = 1\nsteps = 0")
        .replace("stage = 2\nsteps = 3", "stage = 2\nsteps = 0")
        .replace("stage = 3\nsteps = 3", "stage = 3\nsteps = 0");
    let dir = setup(&cfg);
    assert!(
        run(dir.path(), &["train", "--config", "run.toml", "--quiet"])
            .status
            .success()
    );
    for i in 1..=3 {
        assert!(dir.path().join(format!("run/stage{i}.ohck")).exists());
    }
    let csv = std::fs::read_to_string(dir.path().join("run/metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1);
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let dir = setup(TINY);
    let p = dir.path();
    assert!(run(
        p,
        &["train", "--config", "run.toml", "--quiet", "--out", "full"]
    )
    .status
    .success());
    assert!(run(
        p,
        &[
            "train",
            "--config",
            "run.toml",
            "--quiet",
            "--out",
            "part",
            "--stop-at",
            "4"
        ]
    )
    .status
    .success());
    let o = run(
        p,
        &[
            "train",
            "--config",
            "run.toml",
            "--quiet",
            "--out",
            "part",
            "--resume",
            "part/latest.ohck",
        ],
    );
    assert!(o.status.success());
    let read = |f: &str| std::fs::read(p.join(f)).unwrap();
    assert_eq!(read("full/metrics.csv"), read("part/metrics.csv"));
    assert_eq!(read("full/stage3.ohck"), read("part/stage3.ohck"));
    let e1 = std::fs::read_to_string(p.join("full/exposure_stage1.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&e1).unwrap();
    assert_eq!(v["exposure"]["audio"], 0);
    assert_eq!(v["exposure"]["pose"], 0);
}

#[test]
fn generation_echoes_mask_plans_segments_and_is_deterministic() {
    let dir = setup(TINY);
    let p = dir.path();
    assert!(run(p, &["train", "--config", "run.toml", "--quiet"])
        .status
        .success());
    std::fs::write(
        p.join("req.toml"),
        "mode = \"audio\"\nduration = 65\nsteps = 2\nseed = 4\ndataset = \"data/heldout\"\nclip = \"h00006\"\n",
    )
    .unwrap();
    let args = [
        "generate",
        "--checkpoint",
        "run/stage3.ohck",
        "--request",
        "req.toml",
        "--out",
        "g1",
    ];
    let a = run(p, &args);
    assert!(a.status.success());
    let text = stdout(&a);
    assert!(
        text.contains("pose=off") && text.contains("audio=on"),
        "{text}"
    );
    assert_eq!(
        text.lines().filter(|l| l.starts_with("segment ")).count(),
        3
    );
    let b = run(
        p,
        &[
            "generate",
            "--checkpoint",
            "run/stage3.ohck",
            "--request",
            "req.toml",
            "--out",
            "g2",
        ],
    );
    let hash = |s: &str| {
        s.lines()
            .last()
            .unwrap()
            .rsplit(' ')
            .next()
            .unwrap()
            .to_string()
    };
    assert_eq!(hash(&text), hash(&stdout(&b)));
    let frames = std::fs::read_dir(p.join("g1")).unwrap().filter(|e| {
        e.as_ref()
            .unwrap()
            .path()
            .extension()
            .is_some_and(|x| x == "png")
    });
    assert_eq!(frames.count(), 65);

    std::fs::write(
        p.join("other.toml"),
        TINY.replace("hidden = 16", "hidden = 32"),
    )
    .unwrap();
    let c = run(
        p,
        &[
            "generate",
            "--config",
            "other.toml",
            "--checkpoint",
            "run/stage3.ohck",
            "--request",
            "req.toml",
        ],
    );
    assert_eq!(c.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&c.stderr).contains("hash"));
}

#[test]
fn single_cell_grid_reports_one_row() {
    let cfg = format!(
        "{TINY}\n[ablation]\nsteps = [1, 1, 1]\nbatch = 2\nval_times = 2\n[ablation.model]\nhidden = 16\nblocks = 1\nheads = 2\ntext_len = 8\nvocab_size = 64\ntime_freqs = 16\n[grid]\nseeds = [1]\ncells = [{{ axis = \"ratio\", audio = 0.5, pose = 0.25 }}]\n"
    );
    let dir = setup(&cfg);
    let o = run(dir.path(), &["ablate", "--config", "run.toml"]);
    assert!(o.status.success());
    let table = std::fs::read_to_string(dir.path().join("run/ablation/ablation.md")).unwrap();
    assert_eq!(table.lines().filter(|l| l.starts_with("| A>P")).count(), 2);
    let v: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("run/ablation/ablation.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(v.as_array().unwrap().len(), 1);
}

#[test]
fn errors_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("bad.toml"), "unknown_key = 1\n").unwrap();
    let o = run(p, &["synth", "--config", "bad.toml"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error[config]"));
    std::fs::write(p.join("ok.toml"), "[paths]\ndata = \"missing\"\n").unwrap();
    let o = run(p, &["train", "--config", "ok.toml"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error[runtime]"));
    std::fs::write(p.join("inv.toml"), "[[stages]]\nstage = 9\n").unwrap();
    assert_eq!(
        run(p, &["train", "--config", "inv.toml"]).status.code(),
        Some(2)
    );
}
