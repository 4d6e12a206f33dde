//! Acceptance run over the thirteen release criteria, each at its stated
//! tolerance and time limit. Prints one PASS/FAIL line per criterion and a
//! summary. Criterion numbers given as arguments select a subset.
//!
//! The process exits 0 once every selected criterion has been run and
//! reported; set `ACCEPTANCE_STRICT=1` to exit 1 when any of them fails.

mod common;

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use common::{backbone_gradcheck, connector_gradcheck, denoiser_gradcheck, GRAD_TOL};
use vla_core::annotator::{
    build_dataset, discretize_delta, matches_compact_grammar, undiscretize, write_dataset,
    AnnotatorConfig, BinRanges, DeltaActionTokens, ReasoningFormat, ReasoningSample,
    TemplateClient, NUM_BINS,
};
use vla_core::config::RunConfig;
use vla_core::eval::{
    latency_report, run_episodes_traced, EpisodeResult, EvalCondition, ModelPolicy,
};
use vla_core::geometry::{project_point, CameraCalibration, Delta7};
use vla_core::inference::{
    build_condition, denoise, sample_actions, NoisePredictor, ReasoningMode, SamplerConfig,
    TraceRecord,
};
use vla_core::model::{
    add_noise, make_schedule, reconstruct_x0, save_checkpoint, Checkpoint, DiffusionSchedule,
    Graph, Model, ModelConfig, ModelError, ParamGroup, Tensor,
};
use vla_core::simenv::{generate_demo, write_jsonl, SimConfig, TaskBank, TrajectoryRecord};
use vla_core::training::{
    condition_tokens, run_training, sample_noise, stage1_loss, stage1_step, stage2_step, Adam,
    AdamConfig, FinetuneMode, GradientRoute, Stage, Stage1Item, Stage2Item, StageConfig,
    TrainConfig, TrainingData,
};

const DESK_CONFIG: &str = include_str!("../../../configs/desk.toml");

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

fn within(limit: Duration, elapsed: Duration) -> bool {
    elapsed < limit
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

// ---------------------------------------------------------------- 1

/// `K [R | t]` as an explicit 3×4 matrix applied to homogeneous points.
fn projection_matrix(c: &CameraCalibration) -> [[f64; 4]; 3] {
    let k = [[c.fx, 0.0, c.cx], [0.0, c.fy, c.cy], [0.0, 0.0, 1.0]];
    let mut rt = [[0.0; 4]; 3];
    for i in 0..3 {
        for j in 0..3 {
            rt[i][j] = c.rotation[i * 3 + j];
        }
        rt[i][3] = c.translation[i];
    }
    let mut p = [[0.0; 4]; 3];
    for i in 0..3 {
        for j in 0..4 {
            p[i][j] = (0..3).map(|m| k[i][m] * rt[m][j]).sum();
        }
    }
    p
}

fn random_rotation(rng: &mut ChaCha8Rng) -> [f64; 9] {
    let mut q: [f64; 4] = [0.0; 4];
    loop {
        for v in &mut q {
            *v = rng.gen_range(-1.0..1.0);
        }
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.1 && n <= 1.0 {
            q.iter_mut().for_each(|v| *v /= n);
            break;
        }
    }
    let [w, x, y, z] = q;
    [
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    ]
}

fn geometry_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    let mut cases = 0;
    while cases < 1000 {
        let calib = CameraCalibration {
            fx: rng.gen_range(50.0..500.0),
            fy: rng.gen_range(50.0..500.0),
            cx: rng.gen_range(0.0..320.0),
            cy: rng.gen_range(0.0..240.0),
            rotation: random_rotation(&mut rng),
            translation: [
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
            ],
            image_width: 640,
            image_height: 480,
        };
        let p = [
            rng.gen_range(-3.0..3.0),
            rng.gen_range(-3.0..3.0),
            rng.gen_range(-3.0..3.0),
        ];
        let m = projection_matrix(&calib);
        let h: Vec<f64> = (0..3)
            .map(|i| m[i][0] * p[0] + m[i][1] * p[1] + m[i][2] * p[2] + m[i][3])
            .collect();
        // Depth is the third row of [R | t]; K leaves it unchanged.
        if h[2] <= 1e-3 {
            continue;
        }
        let (u, v) = (h[0] / h[2], h[1] / h[2]);
        let got = project_point(&calib, p).expect("point in front of camera");
        let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1.0);
        worst = worst.max(rel(got.u, u)).max(rel(got.v, v));
        cases += 1;
    }
    let t = start.elapsed();
    Outcome::new(
        worst <= 1e-9 && within(Duration::from_secs(1), t),
        format!("max rel err {worst:.2e} over {cases} cases in {}", secs(t)),
    )
}

// ---------------------------------------------------------------- 2

fn quantization() -> Outcome {
    let start = Instant::now();
    let ranges = BinRanges::default();
    let width: Vec<f64> = (0..6)
        .map(|i| (ranges.hi[i] - ranges.lo[i]) / NUM_BINS as f64)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let mut v = [0.0; 7];
        for i in 0..6 {
            v[i] = rng.gen_range(ranges.lo[i]..ranges.hi[i]);
        }
        v[6] = if rng.gen_bool(0.5) { 1.0 } else { 0.0 };
        let d = Delta7::from_array(v);
        let back = undiscretize(&discretize_delta(&d, &ranges), &ranges).to_array();
        for i in 0..6 {
            worst = worst.max((back[i] - v[i]).abs() / (width[i] / 2.0));
        }
        assert_eq!(back[6], v[6]);
    }
    let mut edge_failures = Vec::new();
    let bins = |v: [f64; 7]| discretize_delta(&Delta7::from_array(v), &ranges);
    let at = |f: &dyn Fn(usize) -> f64| {
        let mut v = [0.0; 7];
        for (i, x) in v.iter_mut().enumerate().take(6) {
            *x = f(i);
        }
        v
    };
    let top = (NUM_BINS - 1) as u8;
    let cases: Vec<(&str, [f64; 7], DeltaActionTokens)> = vec![
        ("lower edge", at(&|i| ranges.lo[i]), DeltaActionTokens { pose_bins: [0; 6], gripper_token: 0 }),
        ("upper edge", at(&|i| ranges.hi[i]), DeltaActionTokens { pose_bins: [top; 6], gripper_token: 0 }),
        ("below range", at(&|i| ranges.lo[i] - 10.0), DeltaActionTokens { pose_bins: [0; 6], gripper_token: 0 }),
        ("above range", at(&|i| ranges.hi[i] + 10.0), DeltaActionTokens { pose_bins: [top; 6], gripper_token: 0 }),
    ];
    for (name, v, want) in cases {
        if bins(v) != want {
            edge_failures.push(name.to_string());
        }
    }
    for k in 0..NUM_BINS {
        let centre = at(&|i| ranges.lo[i] + (k as f64 + 0.5) * width[i]);
        let t = bins(centre);
        if t.pose_bins != [k as u8; 6] || undiscretize(&t, &ranges).to_array()[..6] != centre[..6] {
            edge_failures.push(format!("centre of bin {k}"));
        }
    }
    for (g, want) in [(0.0, 0), (0.4999, 0), (0.5, 1), (1.0, 1)] {
        let mut v = [0.0; 7];
        v[6] = g;
        if bins(v).gripper_token != want {
            edge_failures.push(format!("gripper {g}"));
        }
    }
    let t = start.elapsed();
    Outcome::new(
        worst <= 1.0 + 1e-12 && edge_failures.is_empty() && within(Duration::from_secs(1), t),
        format!(
            "max error {:.4} half-bins over 10000 deltas, edge failures {:?}, {}",
            worst,
            edge_failures,
            secs(t)
        ),
    )
}

// ---------------------------------------------------------------- 3

/// Recovers `ε` exactly from a known `A_0`.
struct OracleDenoiser {
    a0: Tensor,
    schedule: DiffusionSchedule,
}

impl NoisePredictor for OracleDenoiser {
    fn predict(&self, a_k: &Tensor, k: usize) -> Result<Tensor, ModelError> {
        let ab = self.schedule.alpha_bar[k];
        let data = a_k
            .data
            .iter()
            .zip(&self.a0.data)
            .map(|(x, a)| (x - ab.sqrt() * a) / (1.0 - ab).sqrt())
            .collect();
        Ok(Tensor::from_vec(a_k.rows, a_k.cols, data))
    }
}

fn diffusion_algebra() -> Outcome {
    let start = Instant::now();
    let mc = ModelConfig::default();
    let schedule = make_schedule(mc.diffusion_steps, mc.beta_start, mc.beta_end).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut round_trip = 0.0f64;
    let mut one_step = 0.0f64;
    for trial in 0..20 {
        let a0 = Tensor::from_vec(8, 7, (0..56).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let eps = sample_noise(8, 7, &mut rng);
        for k in 1..=schedule.steps {
            let ak = add_noise(&a0, k, &eps, &schedule).unwrap();
            let back = reconstruct_x0(&ak, k, &eps, &schedule).unwrap();
            round_trip = round_trip.max(back.max_abs_diff(&a0));
        }
        let x = add_noise(&a0, schedule.steps, &eps, &schedule).unwrap();
        let oracle = OracleDenoiser {
            a0: a0.clone(),
            schedule: schedule.clone(),
        };
        let sampler = SamplerConfig {
            num_steps: 1,
            ..SamplerConfig::default()
        };
        let mut srng = ChaCha8Rng::seed_from_u64(trial);
        let out = denoise(&oracle, &schedule, &sampler, x, &mut srng).unwrap();
        one_step = one_step.max(out.max_abs_diff(&a0));
    }
    let t = start.elapsed();
    Outcome::new(
        round_trip <= 1e-9 && one_step <= 1e-9 && within(Duration::from_secs(1), t),
        format!(
            "noise/reconstruct max err {round_trip:.2e} (all k), oracle one-step {one_step:.2e}, {}",
            secs(t)
        ),
    )
}

// ---------------------------------------------------------------- 4

fn gradient_checks() -> Outcome {
    let start = Instant::now();
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, check) in [
        ("backbone", backbone_gradcheck as fn() -> _),
        ("connector", connector_gradcheck),
        ("denoiser", denoiser_gradcheck),
    ] {
        let (params, r) = check();
        pass &= params <= 10_000 && r.checked == params && r.max_rel < GRAD_TOL;
        parts.push(format!("{name} {params} params max rel {:.1e}", r.max_rel));
    }
    let t = start.elapsed();
    Outcome::new(
        pass && within(Duration::from_secs(300), t),
        format!("{}, {}", parts.join("; "), secs(t)),
    )
}

// ---------------------------------------------------------------- shared fixtures

fn small_sim() -> SimConfig {
    SimConfig {
        grid: 4,
        ..SimConfig::default()
    }
}

fn small_model() -> ModelConfig {
    ModelConfig {
        layers: 2,
        heads: 4,
        model_dim: 32,
        context_len: 96,
        query_count: 4,
        diff_dim: 32,
        chunk_horizon: 8,
        connector_layers: 2,
        connector_heads: 4,
        dit_layers: 2,
        dit_heads: 4,
        grid: 4,
        ..ModelConfig::default()
    }
}

fn demos(per_task: u64, sim: &SimConfig) -> Vec<TrajectoryRecord> {
    let bank = TaskBank::standard();
    let calib = CameraCalibration::tabletop();
    let jobs: Vec<_> = bank
        .in_distribution()
        .flat_map(|t| (0..per_task).map(move |s| (t, s)))
        .collect();
    jobs.par_iter()
        .map(|&(t, s)| generate_demo(t, s, sim, &calib).unwrap())
        .collect()
}

fn annotate(trajs: &[TrajectoryRecord], formats: &[ReasoningFormat]) -> Vec<ReasoningSample> {
    let f: BTreeSet<_> = formats.iter().copied().collect();
    build_dataset(trajs, &TaskBank::standard(), &f, &TemplateClient, &AnnotatorConfig::default())
        .unwrap()
        .samples
}

fn small_data(per_task: u64, formats: &[ReasoningFormat]) -> TrainingData {
    let trajs = demos(per_task, &small_sim());
    let samples = annotate(&trajs, formats);
    TrainingData::new(TaskBank::standard(), trajs, samples)
}

// ---------------------------------------------------------------- 5

fn detachment() -> Outcome {
    let start = Instant::now();
    let data = small_data(1, &ReasoningFormat::ALL);
    let model = ModelConfig {
        model_dim: 16,
        diff_dim: 16,
        ..small_model()
    };
    let stage = |steps| StageConfig {
        steps,
        batch_size: 4,
        optim: AdamConfig::default(),
    };
    let base = TrainConfig {
        stage1: stage(50),
        stage2: stage(1000),
        log_every: 100,
        ..TrainConfig::default()
    };
    let s1 = run_training(Stage::Stage1, &model, &base, &data, None).unwrap();
    let before = s1.checkpoint.model.params.hash(Some(ParamGroup::Backbone));
    let mut pass = true;
    let mut parts = Vec::new();
    for query_gradient in [false, true] {
        let tc = TrainConfig {
            query_gradient,
            finetune_mode: FinetuneMode::ActionExpertOnly,
            ..base.clone()
        };
        let s2 = run_training(Stage::Stage2, &model, &tc, &data, Some(&s1.checkpoint)).unwrap();
        let p = &s2.checkpoint.model.params;
        let intact = p.hash(Some(ParamGroup::Backbone)) == before;
        let trained = p.hash(Some(ParamGroup::Dit))
            != s1.checkpoint.model.params.hash(Some(ParamGroup::Dit));
        pass &= intact && trained;
        parts.push(format!(
            "query_gradient={query_gradient}: backbone {} ({} params), denoiser {}",
            if intact { "bitwise unchanged" } else { "CHANGED" },
            p.count(Some(ParamGroup::Backbone)),
            if trained { "updated" } else { "NOT updated" }
        ));
    }
    Outcome::new(pass, format!("1000 stage-2 steps; {}; {}", parts.join("; "), secs(start.elapsed())))
}

// ---------------------------------------------------------------- 6

fn stage1_memorization() -> Outcome {
    let start = Instant::now();
    let mut data = small_data(2, &ReasoningFormat::ALL);
    // 32 samples spread over formats, tasks and steps.
    let n = data.samples.len();
    let picked: Vec<ReasoningSample> = (0..32).map(|i| data.samples[i * n / 32].clone()).collect();
    data.samples = picked;
    let mut model = Model::new(small_model(), data.vocab().unwrap()).unwrap();
    let items: Vec<Stage1Item> = data
        .samples
        .iter()
        .map(|s| Stage1Item {
            obs: data.observation(&s.traj_id, s.step).unwrap(),
            prompt: model.prompt_tokens(s.format.tag(), &s.prompt_text).unwrap(),
            target: model.vocab.tokenize(&s.target_text).unwrap(),
        })
        .collect();
    let total_tokens: usize = items.iter().map(|i| i.target.len()).sum();
    let corpus_ce = |m: &Model| -> f64 {
        items
            .par_iter()
            .map(|it| {
                let mut g = Graph::new(&m.params);
                let l = stage1_loss(m, &mut g, it).unwrap();
                g.value(l).data[0] * it.target.len() as f64
            })
            .sum::<f64>()
            / total_tokens as f64
    };
    let cfg = AdamConfig {
        lr: 3e-3,
        warmup: 20,
        ..AdamConfig::default()
    };
    let mut opt = Adam::new(cfg, &model.params, &[ParamGroup::Backbone]);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let (mut ce, mut steps) = (corpus_ce(&model), 0);
    let batch = 8;
    while steps < 2000 && ce >= 0.1 {
        for _ in 0..50 {
            if steps % (items.len() / batch) == 0 {
                rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
            }
            let off = (steps % (items.len() / batch)) * batch;
            let b: Vec<Stage1Item> = order[off..off + batch]
                .iter()
                .map(|&i| Stage1Item {
                    obs: items[i].obs,
                    prompt: items[i].prompt.clone(),
                    target: items[i].target.clone(),
                })
                .collect();
            stage1_step(&mut model, &b, &mut opt).unwrap();
            steps += 1;
        }
        ce = corpus_ce(&model);
    }
    let t = start.elapsed();
    Outcome::new(
        ce < 0.1 && within(Duration::from_secs(600), t),
        format!(
            "corpus CE {ce:.4} nats/token over {total_tokens} tokens after {steps} steps, {}",
            secs(t)
        ),
    )
}

// ---------------------------------------------------------------- 7

fn stage2_memorization() -> Outcome {
    let start = Instant::now();
    let data = small_data(1, &[ReasoningFormat::Compact]);
    // Stage 2 starts from a stage-1 backbone, as in the curriculum.
    let s1 = TrainConfig {
        stage1: StageConfig {
            steps: 300,
            batch_size: 8,
            optim: AdamConfig {
                lr: 3e-3,
                ..AdamConfig::default()
            },
        },
        ..TrainConfig::default()
    };
    let mut model = run_training(Stage::Stage1, &small_model(), &s1, &data, None)
        .unwrap()
        .checkpoint
        .model;
    let n = data.samples.len();
    let batch: Vec<&ReasoningSample> = (0..4).map(|i| &data.samples[i * n / 4 + 1]).collect();
    let items: Vec<Stage2Item> = batch
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
    let route = GradientRoute::for_mode(FinetuneMode::ActionExpertOnly, TrainConfig::default().query_gradient);
    let cfg = AdamConfig {
        lr: 2e-3,
        ..AdamConfig::default()
    };
    let mut opt = Adam::new(cfg, &model.params, &FinetuneMode::ActionExpertOnly.groups());
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let refs: Vec<&Stage2Item> = items.iter().collect();
    let sampler = SamplerConfig::default();
    let linf = |m: &Model| -> f64 {
        batch
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let obs = data.observation(&s.traj_id, s.step).unwrap();
                let c = build_condition(m, obs, &s.prompt_text, ReasoningMode::Compact, &s.target_text).unwrap();
                let a = sample_actions(m, &c, &sampler, i as u64).unwrap();
                a.iter()
                    .zip(&s.action_chunk)
                    .flat_map(|(p, q)| p.iter().zip(q).map(|(x, y)| (x - y).abs()))
                    .fold(0.0, f64::max)
            })
            .fold(0.0, f64::max)
    };
    let (mut err, mut steps) = (f64::INFINITY, 0);
    while steps < 20_000 && err > 0.01 && start.elapsed() < Duration::from_secs(600) {
        for _ in 0..500 {
            stage2_step(&mut model, &refs, &mut opt, route, &mut rng).unwrap();
            steps += 1;
        }
        err = linf(&model);
        // Anneal once the batch is fitted coarsely; a fixed step size keeps
        // the sampled chunk jittering around the target.
        if err < 0.1 {
            opt.cfg.lr = (opt.cfg.lr * 0.7).max(5e-5);
        }
    }
    let t = start.elapsed();
    Outcome::new(
        err <= 0.01 && within(Duration::from_secs(600), t),
        format!("sampled chunk L-inf error {err:.4} on a batch of 4 after {steps} steps, {}", secs(t)),
    )
}

// ---------------------------------------------------------------- desk pipeline

struct SeedRun {
    seed: u64,
    checkpoint: Checkpoint,
    episodes: Vec<(EpisodeResult, Vec<TraceRecord>)>,
}

impl SeedRun {
    fn success_rate(&self) -> f64 {
        let n = self.episodes.len().max(1) as f64;
        100.0 * self.episodes.iter().filter(|e| e.0.success).count() as f64 / n
    }
}

/// Demonstrations, dataset and per-seed trained policies of the desk run,
/// built on first use.
struct Desk {
    cfg: RunConfig,
    trajs: Vec<TrajectoryRecord>,
    samples: Vec<ReasoningSample>,
    data_time: Duration,
    full: Option<(Vec<SeedRun>, Duration)>,
    without_compact: Option<Vec<SeedRun>>,
}

impl Desk {
    fn new() -> Self {
        let start = Instant::now();
        let cfg = RunConfig::from_toml_str(DESK_CONFIG).expect("desk config");
        let bank = cfg.task_bank().unwrap();
        let calib = cfg.calibration().unwrap();
        let tasks = cfg.selected_tasks(&bank).unwrap();
        let jobs: Vec<_> = tasks
            .iter()
            .flat_map(|t| cfg.demo_seeds().map(move |s| (t, s)))
            .collect();
        let trajs: Vec<_> = jobs
            .par_iter()
            .map(|&(t, s)| generate_demo(t, s, &cfg.simenv, &calib).unwrap())
            .collect();
        let formats: BTreeSet<_> = cfg.data.formats.iter().copied().collect();
        let samples = build_dataset(&trajs, &bank, &formats, &TemplateClient, &cfg.annotator)
            .unwrap()
            .samples;
        Self {
            cfg,
            trajs,
            samples,
            data_time: start.elapsed(),
            full: None,
            without_compact: None,
        }
    }

    fn training_data(&self) -> TrainingData {
        TrainingData::new(self.cfg.task_bank().unwrap(), self.trajs.clone(), self.samples.clone())
    }

    fn train_and_eval(&self, omit: &[ReasoningFormat]) -> Vec<SeedRun> {
        let data = self.training_data();
        let bank = self.cfg.task_bank().unwrap();
        let tasks: Vec<_> = bank.in_distribution().cloned().collect();
        let eval = self.cfg.eval_config();
        self.cfg
            .eval
            .training_seeds
            .iter()
            .map(|&seed| {
                let t0 = Instant::now();
                let tc = TrainConfig {
                    seed,
                    omit_formats: omit.to_vec(),
                    ..self.cfg.training.clone()
                };
                let s1 = run_training(Stage::Stage1, &self.cfg.model, &tc, &data, None).unwrap();
                let s2 = run_training(Stage::Stage2, &self.cfg.model, &tc, &data, Some(&s1.checkpoint))
                    .unwrap()
                    .checkpoint;
                let t1 = Instant::now();
                let policy = ModelPolicy::from_checkpoint(&s2, self.cfg.sampler.clone(), eval.execute_steps);
                let episodes = run_episodes_traced(&policy, &tasks, &[EvalCondition::Intention], &eval).unwrap();
                let run = SeedRun {
                    seed,
                    checkpoint: s2,
                    episodes,
                };
                eprintln!(
                    "  [omit {:?}] training seed {seed}: {:.1}% (train {}, eval {})",
                    omit,
                    run.success_rate(),
                    secs(t1 - t0),
                    secs(t1.elapsed())
                );
                run
            })
            .collect()
    }

    fn full(&mut self) -> &(Vec<SeedRun>, Duration) {
        if self.full.is_none() {
            let start = Instant::now();
            let runs = self.train_and_eval(&[]);
            self.full = Some((runs, self.data_time + start.elapsed()));
        }
        self.full.as_ref().unwrap()
    }

    fn without_compact(&mut self) -> &[SeedRun] {
        if self.without_compact.is_none() {
            self.without_compact = Some(self.train_and_eval(&[ReasoningFormat::Compact]));
        }
        self.without_compact.as_ref().unwrap()
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

// ---------------------------------------------------------------- 8

fn grammar(desk: &mut Desk) -> Outcome {
    let compact = desk
        .samples
        .iter()
        .filter(|s| s.format == ReasoningFormat::Compact)
        .count();
    let bad_targets = desk
        .samples
        .iter()
        .filter(|s| s.format == ReasoningFormat::Compact && !matches_compact_grammar(&s.target_text))
        .count();
    let (runs, _) = desk.full();
    let strings: Vec<&str> = runs
        .iter()
        .flat_map(|r| r.episodes.iter().flat_map(|e| e.1.iter().map(|t| t.reasoning_text.as_str())))
        .collect();
    let ok = strings.iter().filter(|s| matches_compact_grammar(s)).count();
    let rate = 100.0 * ok as f64 / strings.len().max(1) as f64;
    Outcome::new(
        compact > 0 && bad_targets == 0 && !strings.is_empty() && rate >= 99.0,
        format!(
            "dataset targets {}/{} match; rollout reasoning {ok}/{} ({rate:.2}%) match",
            compact - bad_targets,
            compact,
            strings.len()
        ),
    )
}

// ---------------------------------------------------------------- 9

fn desk_end_to_end(desk: &mut Desk) -> Outcome {
    let trials = desk.cfg.eval.trials;
    let demos = desk.trajs.len();
    let (runs, elapsed) = desk.full();
    let per_seed: Vec<String> = runs
        .iter()
        .map(|r| format!("seed {} {:.1}%", r.seed, r.success_rate()))
        .collect();
    let avg = mean(runs.iter().map(SeedRun::success_rate));
    Outcome::new(
        demos == 300 && trials >= 20 && runs.len() >= 3 && avg >= 70.0 && within(Duration::from_secs(3600), *elapsed),
        format!(
            "{demos} demos, {trials} trials/task, intention instructions: average {avg:.1}% ({}), {}",
            per_seed.join(", "),
            secs(*elapsed)
        ),
    )
}

// ---------------------------------------------------------------- 10

fn ablation_ordering(desk: &mut Desk) -> Outcome {
    let full = mean(desk.full().0.iter().map(SeedRun::success_rate));
    let seeds_full: Vec<Vec<u64>> = desk.full().0.iter().map(|r| episode_seeds(&r.episodes)).collect();
    let without = desk.without_compact();
    let wo = mean(without.iter().map(SeedRun::success_rate));
    let same_seeds = without
        .iter()
        .zip(&seeds_full)
        .all(|(r, s)| episode_seeds(&r.episodes) == *s);
    Outcome::new(
        same_seeds && full - wo >= 10.0,
        format!(
            "full {full:.1}% vs w/o compact {wo:.1}% (margin {:+.1} points, {} training seeds, shared episode seeds: {same_seeds})",
            full - wo,
            without.len()
        ),
    )
}

fn episode_seeds(eps: &[(EpisodeResult, Vec<TraceRecord>)]) -> Vec<u64> {
    eps.iter().map(|e| e.0.seed).collect()
}

// ---------------------------------------------------------------- 11

fn latency_direction(desk: &mut Desk) -> Outcome {
    let n = desk.cfg.eval.latency_probes.max(100);
    let compact: Vec<&ReasoningSample> = desk
        .samples
        .iter()
        .filter(|s| s.format == ReasoningFormat::Compact)
        .collect();
    let probes: Vec<_> = (0..n)
        .map(|i| {
            let s = compact[i * compact.len() / n];
            let traj = desk.trajs.iter().find(|t| t.id() == s.traj_id).unwrap();
            (traj.steps[s.step].observation.clone(), s.prompt_text.clone())
        })
        .collect();
    let sampler = desk.cfg.sampler.clone();
    drop(compact);
    let model = &desk.full().0[0].checkpoint.model;
    let r = latency_report(
        model,
        &probes,
        &[ReasoningMode::Compact, ReasoningMode::IntentionChain],
        &sampler,
    )
    .unwrap();
    let c = r.mode(ReasoningMode::Compact).unwrap();
    let i = r.mode(ReasoningMode::IntentionChain).unwrap();
    let ratio = r.token_ratio().unwrap_or(0.0);
    Outcome::new(
        c.mean_seconds < i.mean_seconds && ratio >= 4.0 && r.probes >= 100,
        format!(
            "{} paired states: compact {:.2} ms / {:.1} tokens, chain {:.2} ms / {:.1} tokens, ratio {ratio:.2}",
            r.probes,
            1e3 * c.mean_seconds,
            c.mean_tokens,
            1e3 * i.mean_seconds,
            i.mean_tokens
        ),
    )
}

// ---------------------------------------------------------------- 12

fn split_hygiene(desk: &mut Desk) -> Outcome {
    let bank = desk.cfg.task_bank().unwrap();
    let heldout: Vec<&str> = bank
        .tasks
        .iter()
        .flat_map(|t| t.heldout_instructions.iter().map(String::as_str))
        .collect();
    let mut leaks = Vec::new();
    for s in &desk.samples {
        for h in &heldout {
            if s.prompt_text.contains(h) || s.target_text.contains(h) {
                leaks.push(format!("{} step {}: {h:?}", s.traj_id, s.step));
            }
        }
    }
    for t in &desk.trajs {
        if heldout.contains(&t.instruction.as_str()) {
            leaks.push(format!("{}: {:?}", t.id(), t.instruction));
        }
    }
    Outcome::new(
        !heldout.is_empty() && leaks.is_empty(),
        format!(
            "{} held-out strings against {} samples and {} demos: {} leaks {:?}",
            heldout.len(),
            desk.samples.len(),
            desk.trajs.len(),
            leaks.len(),
            leaks.iter().take(3).collect::<Vec<_>>()
        ),
    )
}

// ---------------------------------------------------------------- 13

fn artifacts_once() -> (Vec<u8>, Vec<u8>, Vec<(String, Vec<u8>)>) {
    let sim = small_sim();
    let trajs = demos(3, &sim);
    let mut demo_bytes = Vec::new();
    write_jsonl(&trajs, &mut demo_bytes).unwrap();
    let samples = annotate(&trajs, &ReasoningFormat::ALL);
    let mut dataset_bytes = Vec::new();
    write_dataset(&samples, &mut dataset_bytes).unwrap();
    let data = TrainingData::new(TaskBank::standard(), trajs, samples);
    let stage = StageConfig {
        steps: 40,
        batch_size: 4,
        optim: AdamConfig::default(),
    };
    let tc = TrainConfig {
        stage1: stage.clone(),
        stage2: stage,
        seed: 13,
        log_every: 5,
        ..TrainConfig::default()
    };
    let model = ModelConfig {
        model_dim: 16,
        diff_dim: 16,
        ..small_model()
    };
    let s1 = run_training(Stage::Stage1, &model, &tc, &data, None).unwrap();
    let s2 = run_training(Stage::Stage2, &model, &tc, &data, Some(&s1.checkpoint)).unwrap();
    let mut files = Vec::new();
    for (name, ck, log) in [("stage1", &s1.checkpoint, &s1.log), ("stage2", &s2.checkpoint, &s2.log)] {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(ck, dir.path()).unwrap();
        let mut entries: Vec<_> = std::fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        entries.sort();
        for p in entries {
            let rel = format!("{name}/{}", p.file_name().unwrap().to_string_lossy());
            files.push((rel, std::fs::read(&p).unwrap()));
        }
        let mut csv = Vec::new();
        vla_core::training::write_loss_csv(log, &mut csv).unwrap();
        files.push((format!("{name}/loss.csv"), csv));
    }
    (demo_bytes, dataset_bytes, files)
}

fn reproducibility() -> Outcome {
    let start = Instant::now();
    let a = artifacts_once();
    let b = artifacts_once();
    let mut diffs = Vec::new();
    if a.0 != b.0 {
        diffs.push("demos".to_string());
    }
    if a.1 != b.1 {
        diffs.push("dataset".to_string());
    }
    if a.2.len() != b.2.len() {
        diffs.push("checkpoint file set".to_string());
    }
    for ((na, fa), (nb, fb)) in a.2.iter().zip(&b.2) {
        if na != nb || fa != fb {
            diffs.push(na.clone());
        }
    }
    Outcome::new(
        diffs.is_empty() && !a.0.is_empty() && !a.1.is_empty(),
        format!(
            "demos {} B, dataset {} B, {} checkpoint/log files compared; differing: {:?}; {}",
            a.0.len(),
            a.1.len(),
            a.2.len(),
            diffs,
            secs(start.elapsed())
        ),
    )
}

// ---------------------------------------------------------------- runner

fn main() {
    let selected: BTreeSet<usize> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .filter_map(|a| a.parse().ok())
        .collect();
    let want = |n: usize| selected.is_empty() || selected.contains(&n);
    let mut desk: Option<Desk> = None;

    type Plain = fn() -> Outcome;
    type WithDesk = fn(&mut Desk) -> Outcome;
    enum Check {
        Plain(Plain),
        Desk(WithDesk),
    }
    let checks: [(usize, &str, Check); 13] = [
        (1, "geometry oracle", Check::Plain(geometry_oracle)),
        (2, "quantization round trip", Check::Plain(quantization)),
        (3, "diffusion algebra", Check::Plain(diffusion_algebra)),
        (4, "gradient checks", Check::Plain(gradient_checks)),
        (5, "backbone detachment", Check::Plain(detachment)),
        (6, "stage-1 memorization", Check::Plain(stage1_memorization)),
        (7, "stage-2 memorization", Check::Plain(stage2_memorization)),
        (8, "compact grammar", Check::Desk(grammar)),
        (9, "desk-scale end to end", Check::Desk(desk_end_to_end)),
        (10, "ablation ordering", Check::Desk(ablation_ordering)),
        (11, "latency direction", Check::Desk(latency_direction)),
        (12, "split hygiene", Check::Desk(split_hygiene)),
        (13, "reproducibility", Check::Plain(reproducibility)),
    ];
    let mut failed = Vec::new();
    let mut ran = 0;
    for (n, name, check) in checks {
        if !want(n) {
            continue;
        }
        let start = Instant::now();
        let out = match check {
            Check::Plain(f) => f(),
            Check::Desk(f) => f(desk.get_or_insert_with(Desk::new)),
        };
        ran += 1;
        let verdict = if out.pass { "PASS" } else { "FAIL" };
        println!(
            "criterion {n:>2} {verdict}  {name}: {} [wall {}]",
            out.detail,
            secs(start.elapsed())
        );
        if !out.pass {
            failed.push(n);
        }
    }
    println!("acceptance: {}/{ran} passed, failed {:?}", ran - failed.len(), failed);
    if !failed.is_empty() && std::env::var_os("ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}
