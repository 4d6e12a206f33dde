use criterion::{black_box, criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use vla_bench::{desk_sim, fresh_model, small_data};
use vla_core::annotator::ReasoningFormat;
use vla_core::geometry::{project_point, CameraCalibration};
use vla_core::inference::{build_condition, policy_step, sample_actions, ReasoningMode, SamplerConfig};
use vla_core::model::ParamGroup;
use vla_core::simenv::{expert_action, render, reset_scene, step, TaskBank};
use vla_core::training::{
    condition_tokens, stage1_step, stage2_step, Adam, AdamConfig, FinetuneMode, GradientRoute,
    Stage1Item, Stage2Item,
};

fn geometry(c: &mut Criterion) {
    let calib = CameraCalibration::tabletop();
    c.bench_function("project_point", |b| {
        b.iter(|| project_point(&calib, black_box([0.41, -0.07, 0.02])))
    });
}

fn simulator(c: &mut Criterion) {
    let sim = desk_sim();
    let bank = TaskBank::standard();
    let task = &bank.tasks[0];
    let scene = reset_scene(task, 3, &sim).unwrap();
    c.bench_function("sim/expert_step", |b| {
        b.iter(|| {
            let a = expert_action(&scene, task, &sim).unwrap();
            step(black_box(&scene), &a, &sim).unwrap()
        })
    });
    c.bench_function("sim/render", |b| b.iter(|| render(black_box(&scene), &sim)));
}

fn training(c: &mut Criterion) {
    let data = small_data();
    let mut model = fresh_model(&data);
    let compact: Vec<_> = data
        .samples
        .iter()
        .filter(|s| s.format == ReasoningFormat::Compact)
        .take(8)
        .collect();

    let s1: Vec<Stage1Item> = compact
        .iter()
        .map(|s| Stage1Item {
            obs: data.observation(&s.traj_id, s.step).unwrap(),
            prompt: model.prompt_tokens(s.format.tag(), &s.prompt_text).unwrap(),
            target: model.vocab.tokenize(&s.target_text).unwrap(),
        })
        .collect();
    let mut opt = Adam::new(AdamConfig::default(), &model.params, &[ParamGroup::Backbone]);
    c.bench_function("train/stage1_step_batch8", |b| {
        b.iter(|| stage1_step(&mut model, &s1, &mut opt).unwrap())
    });

    let s2: Vec<Stage2Item> = compact
        .iter()
        .map(|s| Stage2Item {
            obs: data.observation(&s.traj_id, s.step).unwrap(),
            tokens: condition_tokens(&model, Some(ReasoningFormat::Compact), &s.prompt_text, Some(&s.target_text))
                .unwrap(),
            chunk: model.normalize_chunk(&s.action_chunk),
            z: None,
            prefix: None,
        })
        .collect();
    let refs: Vec<&Stage2Item> = s2.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for (name, qgrad) in [("detached", false), ("queries_only", true)] {
        let route = GradientRoute::for_mode(FinetuneMode::ActionExpertOnly, qgrad);
        let mut opt = Adam::new(
            AdamConfig::default(),
            &model.params,
            &FinetuneMode::ActionExpertOnly.groups(),
        );
        let mut m = model.clone();
        c.bench_function(&format!("train/stage2_step_batch8_{name}"), |b| {
            b.iter(|| stage2_step(&mut m, &refs, &mut opt, route, &mut rng).unwrap())
        });
    }
}

fn inference(c: &mut Criterion) {
    let data = small_data();
    let model = fresh_model(&data);
    let s = data
        .samples
        .iter()
        .find(|s| s.format == ReasoningFormat::Compact)
        .unwrap();
    let obs = data.observation(&s.traj_id, s.step).unwrap();
    let sampler = SamplerConfig::default();
    let cond = build_condition(&model, obs, &s.prompt_text, ReasoningMode::Compact, &s.target_text).unwrap();
    c.bench_function("infer/sample_actions_10_steps", |b| {
        b.iter(|| sample_actions(&model, black_box(&cond), &sampler, 0).unwrap())
    });
    for mode in [ReasoningMode::Compact, ReasoningMode::IntentionChain] {
        c.bench_function(&format!("infer/policy_step_{}", mode.as_str()), |b| {
            b.iter(|| policy_step(&model, obs, &s.prompt_text, mode, &sampler, 0).unwrap())
        });
    }
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = geometry, simulator, training, inference
}
criterion_main!(benches);
