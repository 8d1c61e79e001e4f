use omnicond::data::{write_manifest, Dataset, MANIFEST};
use omnicond::eval::{evaluate_model, EvalMode, EvalSettings};
use omnicond::exec::{self, Mode};
use omnicond::infer::{generate, DriveMode, DrivingRequest};
use omnicond::model::ModelConfig;
use omnicond::synth::{clip_rng, synth_clip, SynthConfig};
use omnicond::train::{
    default_schedule, init_model, load_model, prepare_clips, run_stages, RunOptions, TrainPlan,
    TrainState,
};
use proptest::prelude::*;

fn tiny() -> ModelConfig {
    ModelConfig {
        hidden: 16,
        blocks: 1,
        ..ModelConfig::small()
    }
}

fn plans() -> Vec<TrainPlan> {
    default_schedule([2, 2, 2])
        .into_iter()
        .map(|p| TrainPlan {
            batch: 3,
            lr: 1e-3,
            ..p
        })
        .collect()
}

#[test]
fn disk_dataset_trains_checkpoints_generates_and_scores() {
    let dir = tempfile::tempdir().unwrap();
    let clips: Vec<_> = (0..5)
        .map(|i| {
            synth_clip(
                &format!("c{i}"),
                9,
                &SynthConfig::default(),
                &mut clip_rng(4, i),
            )
        })
        .collect();
    let recs: Vec<_> = clips.iter().map(|c| c.save(dir.path()).unwrap()).collect();
    write_manifest(&dir.path().join(MANIFEST), &recs).unwrap();
    let loaded = Dataset::open(dir.path()).unwrap().load_all().unwrap();
    assert_eq!(loaded.len(), clips.len());
    for (a, b) in loaded.iter().zip(&clips) {
        assert_eq!(
            (&a.id, &a.caption, a.flags, &a.skeleton),
            (&b.id, &b.caption, b.flags, &b.skeleton)
        );
        let dv = a
            .video
            .data()
            .iter()
            .zip(b.video.data())
            .fold(0f32, |m, (x, y)| m.max((x - y).abs()));
        assert!(dv <= 1.0 / 65535.0, "pixel error {dv}");
        let dw = a
            .wave
            .samples
            .iter()
            .zip(&b.wave.samples)
            .fold(0f32, |m, (x, y)| m.max((x - y).abs()));
        assert!(
            dw <= 1e-4 && a.wave.samples.len() == b.wave.samples.len(),
            "audio error {dw}"
        );
    }

    let model = init_model(tiny(), &loaded, 1).unwrap();
    let data = prepare_clips(&loaded, &model).unwrap();
    let out = dir.path().join("run");
    let opts = RunOptions {
        out_dir: Some(out.clone()),
        quiet: true,
        ..RunOptions::default()
    };
    let (state, reports) = run_stages(TrainState::new(model), &plans(), &data, &opts).unwrap();
    assert_eq!(state.step, 6);
    assert_eq!(reports.len(), 3);
    assert!(reports
        .iter()
        .all(|r| r.mean_loss.is_some_and(f64::is_finite)));

    let model = load_model(&out.join("stage3.ohck")).unwrap();
    assert_eq!(model.params, state.model.params);
    let c = &loaded[0];
    let req = DrivingRequest {
        caption: Some(c.caption.clone()),
        waveform: Some(c.wave.clone()),
        skeleton: Some(c.skeleton.clone()),
        steps: 2,
        ..DrivingRequest::new(c.video.slice(0..1), DriveMode::AudioPose, 9)
    };
    let g = generate(&req, &model).unwrap();
    assert_eq!(g.video.frames(), 9);
    assert!(g.mask.audio && g.mask.pose && g.mask.text);

    let modes = [EvalMode::Audio, EvalMode::Pose];
    let rep = evaluate_model(
        &model,
        &loaded[..2],
        &modes,
        &EvalSettings {
            steps: 2,
            ..EvalSettings::default()
        },
    );
    assert_eq!(rep.rows.len(), 4);
    assert!(rep.rows.iter().all(|r| r.error.is_none()));
}

#[test]
fn sequential_and_parallel_training_agree() {
    let clips: Vec<_> = (0..4)
        .map(|i| {
            synth_clip(
                &format!("s{i}"),
                9,
                &SynthConfig::default(),
                &mut clip_rng(6, i),
            )
        })
        .collect();
    let model = init_model(tiny(), &clips, 2).unwrap();
    let data = prepare_clips(&clips, &model).unwrap();
    let run = |mode| {
        exec::set_mode(mode);
        let (s, _) = run_stages(
            TrainState::new(model.clone()),
            &plans(),
            &data,
            &RunOptions {
                quiet: true,
                ..RunOptions::default()
            },
        )
        .unwrap();
        exec::set_mode(Mode::Parallel);
        s
    };
    assert_eq!(run(Mode::Sequential), run(Mode::Parallel));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]
    #[test]
    fn generated_length_matches_request(duration in 1usize..40, lseg in 6usize..14, seed in any::<u64>()) {
        let c = synth_clip("p", 40, &SynthConfig::default(), &mut clip_rng(seed, 0));
        let model = init_model(tiny(), std::slice::from_ref(&c), 3).unwrap();
        let req = DrivingRequest {
            waveform: Some(c.wave.clone()),
            steps: 1,
            segment_len: lseg,
            seed,
            ..DrivingRequest::new(c.video.slice(0..1), DriveMode::Audio, duration)
        };
        let g = generate(&req, &model).unwrap();
        prop_assert_eq!(g.video.frames(), duration);
        prop_assert_eq!(g.plan.segments.last().unwrap().generate.end, duration);
    }
}
