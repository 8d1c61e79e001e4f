use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use omnicond::exec::{self, Mode};
use omnicond::infer::{generate, DriveMode, DrivingRequest};
use omnicond::model::ModelConfig;
use omnicond::synth::{clip_rng, synth_clip, SynthConfig};
use omnicond::train::{build_batch, init_model, prepare_clips, train_step, TrainPlan, TrainState};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn modes() -> [(&'static str, Mode); 2] {
    [
        ("parallel", Mode::Parallel),
        ("sequential", Mode::Sequential),
    ]
}

fn bench(c: &mut Criterion) {
    let clips: Vec<_> = (0..16)
        .map(|i| {
            synth_clip(
                &format!("b{i}"),
                25,
                &SynthConfig::default(),
                &mut clip_rng(1, i),
            )
        })
        .collect();
    let model = init_model(ModelConfig::small(), &clips, 0).unwrap();
    let data = prepare_clips(&clips, &model).unwrap();
    let plan = TrainPlan {
        batch: 8,
        ..TrainPlan::stage(3)
    };

    let mut g = c.benchmark_group("train_step");
    g.sample_size(10);
    for (name, mode) in modes() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            exec::set_mode(mode);
            let mut state = TrainState::new(model.clone());
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            b.iter(|| {
                let items = build_batch(&data, &plan, &state.model, &mut rng).unwrap();
                train_step(&mut state, &plan, &items, &data).unwrap()
            });
        });
    }
    g.finish();

    let mut g = c.benchmark_group("generate_65_frames");
    g.sample_size(10);
    let clip = &clips[0];
    let mut wave = clip.wave.clone();
    for _ in 0..2 {
        wave = omnicond::conditions::audio::Waveform::new(
            [wave.samples.clone(), clip.wave.samples.clone()].concat(),
        );
    }
    let req = DrivingRequest {
        caption: Some(clip.caption.clone()),
        waveform: Some(wave),
        steps: 4,
        ..DrivingRequest::new(clip.video.slice(0..1), DriveMode::Audio, 65)
    };
    for (name, mode) in modes() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            exec::set_mode(mode);
            b.iter(|| generate(&req, &model).unwrap());
        });
    }
    g.finish();
    exec::set_mode(Mode::Parallel);
}

criterion_group!(benches, bench);
criterion_main!(benches);
