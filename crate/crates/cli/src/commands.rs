//! Subcommand implementations. Each one validates its inputs, writes
//! under the run directory and refreshes the hash index.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use vla_core::annotator::{
    build_dataset, client_from_env, read_dataset, write_dataset, ReasoningFormat, ReasoningSample,
    SampleSplit,
};
use vla_core::config::RunConfig;
use vla_core::eval::{ablation_suite, latency_report, run_episodes_traced, tabulate, EvalTable, ModelPolicy};
use vla_core::geometry::CameraCalibration;
use vla_core::inference::{read_trace, write_trace, ReasoningMode};
use vla_core::model::{load_checkpoint, save_checkpoint, Checkpoint};
use vla_core::simenv::{generate_demo, read_jsonl, write_jsonl, InstructionKind, TrajectoryRecord};
use vla_core::training::{run_training, write_loss_csv, Stage, TrainingData};

use crate::run_dir::{file_sha256, RunDir};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
const DEMOS: &str = "data/demos.jsonl";
const MANIFEST: &str = "data/manifest.json";
const DATASET: &str = "data/dataset.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEntry {
    pub task: String,
    /// Half-open seed range `[start, end)`.
    pub seeds: (u64, u64),
    pub demos: usize,
    pub steps: usize,
    pub direct: usize,
    pub intention: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub config_sha256: String,
    pub calibration: CameraCalibration,
    pub tasks: Vec<TaskEntry>,
    pub total_demos: usize,
    pub total_steps: usize,
    /// Evaluation episode seeds, disjoint from every demo seed.
    pub eval_seeds: (u64, u64),
    pub demos_file: String,
    pub demos_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotateReport {
    pub schema_version: u32,
    pub backend: String,
    pub formats: Vec<ReasoningFormat>,
    pub omitted: Vec<ReasoningFormat>,
    pub samples: Vec<(ReasoningFormat, usize)>,
    pub skipped: Vec<(String, String)>,
    pub dataset_sha256: String,
}

pub fn gen_data(cfg: &RunConfig, run: &RunDir) -> Result<Manifest> {
    let bank = cfg.task_bank()?;
    let tasks = cfg.selected_tasks(&bank)?;
    let calib = cfg.calibration()?;
    let seeds = cfg.demo_seeds();
    let jobs: Vec<(usize, u64)> = (0..tasks.len())
        .flat_map(|t| seeds.clone().map(move |s| (t, s)))
        .collect();
    let start = Instant::now();
    let demos: Vec<TrajectoryRecord> = jobs
        .par_iter()
        .map(|&(t, s)| generate_demo(&tasks[t], s, &cfg.simenv, &calib))
        .collect::<Result<_, _>>()
        .context("generating demonstrations")?;
    log::info!("{} demos in {:.1}s", demos.len(), start.elapsed().as_secs_f64());

    let mut out = run.create(DEMOS)?;
    write_jsonl(&demos, &mut out)?;
    out.flush()?;
    drop(out);

    let entries = tasks
        .iter()
        .map(|t| {
            let mine: Vec<_> = demos.iter().filter(|d| d.task == t.name).collect();
            let kind = |k: InstructionKind| mine.iter().filter(|d| d.instruction_kind == k).count();
            TaskEntry {
                task: t.name.clone(),
                seeds: (seeds.start, seeds.end),
                demos: mine.len(),
                steps: mine.iter().map(|d| d.steps.len()).sum(),
                direct: kind(InstructionKind::Direct),
                intention: kind(InstructionKind::Intention),
            }
        })
        .collect::<Vec<_>>();
    let manifest = Manifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        config_sha256: cfg.hash(),
        calibration: calib,
        total_demos: demos.len(),
        total_steps: entries.iter().map(|e| e.steps).sum(),
        tasks: entries,
        eval_seeds: (
            cfg.eval.seed_base,
            cfg.eval.seed_base + cfg.eval.trials as u64,
        ),
        demos_file: DEMOS.into(),
        demos_sha256: file_sha256(&run.path(DEMOS))?,
    };
    run.write(MANIFEST, serde_json::to_string_pretty(&manifest)? + "\n")?;
    run.refresh_hashes()?;
    Ok(manifest)
}

fn load_manifest(run: &RunDir) -> Result<Manifest> {
    let p = run.path(MANIFEST);
    let text = fs::read_to_string(&p)
        .with_context(|| format!("reading {} (run `vla gen-data` first)", p.display()))?;
    let m: Manifest = serde_json::from_str(&text).context("parsing manifest")?;
    if m.schema_version != MANIFEST_SCHEMA_VERSION {
        bail!("unsupported manifest schema_version {}", m.schema_version);
    }
    Ok(m)
}

pub fn load_demos(run: &RunDir) -> Result<Vec<TrajectoryRecord>> {
    let m = load_manifest(run)?;
    let p = run.path(&m.demos_file);
    let actual = file_sha256(&p)?;
    if actual != m.demos_sha256 {
        bail!("{} does not match the manifest hash", p.display());
    }
    let f = fs::File::open(&p).with_context(|| format!("opening {}", p.display()))?;
    Ok(read_jsonl(BufReader::new(f), &m.calibration)?)
}

pub fn annotate(cfg: &RunConfig, run: &RunDir, omit: &[ReasoningFormat], serial: bool) -> Result<AnnotateReport> {
    let demos = load_demos(run)?;
    let bank = cfg.task_bank()?;
    let formats: BTreeSet<ReasoningFormat> = cfg
        .data
        .formats
        .iter()
        .copied()
        .filter(|f| !omit.contains(f))
        .collect();
    if formats.is_empty() {
        bail!("every reasoning format was omitted");
    }
    let client = client_from_env();
    let build = || build_dataset(&demos, &bank, &formats, client.as_ref(), &cfg.annotator);
    let build = if serial {
        rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()?
            .install(build)?
    } else {
        build()?
    };
    let mut out = run.create(DATASET)?;
    write_dataset(&build.samples, &mut out)?;
    out.flush()?;
    drop(out);
    let report = AnnotateReport {
        schema_version: MANIFEST_SCHEMA_VERSION,
        backend: format!("{:?}", client.backend()),
        formats: formats.iter().copied().collect(),
        omitted: omit.to_vec(),
        samples: formats.iter().map(|&f| (f, build.count(f))).collect(),
        skipped: build.skipped.clone(),
        dataset_sha256: file_sha256(&run.path(DATASET))?,
    };
    run.write("data/annotate_report.json", serde_json::to_string_pretty(&report)? + "\n")?;
    run.refresh_hashes()?;
    Ok(report)
}

pub fn load_samples(run: &RunDir) -> Result<Vec<ReasoningSample>> {
    let p = run.path(DATASET);
    let f = fs::File::open(&p)
        .with_context(|| format!("opening {} (run `vla annotate` first)", p.display()))?;
    Ok(read_dataset(BufReader::new(f))?)
}

pub fn training_data(cfg: &RunConfig, run: &RunDir) -> Result<TrainingData> {
    Ok(TrainingData::new(cfg.task_bank()?, load_demos(run)?, load_samples(run)?))
}

fn stage_dir(stage: Stage) -> String {
    format!("ckpt/{}", stage.as_str())
}

pub fn train(cfg: &RunConfig, run: &RunDir, stage: Stage, stage1: Option<&Path>) -> Result<String> {
    // Refuse before loading any data.
    let s1 = match stage {
        Stage::Stage1 => None,
        Stage::Stage2 => {
            let p = stage1
                .map(Path::to_path_buf)
                .unwrap_or_else(|| run.path(&stage_dir(Stage::Stage1)));
            if !p.join("manifest.json").exists() {
                bail!(
                    "stage 2 needs a stage-1 checkpoint, none found at {}; run `vla train --stage stage1` first",
                    p.display()
                );
            }
            Some(load_checkpoint(&p).with_context(|| format!("loading {}", p.display()))?)
        }
    };
    let data = training_data(cfg, run)?;
    let start = Instant::now();
    let out = run_training(stage, &cfg.model, &cfg.training, &data, s1.as_ref())?;
    log::info!("{} finished in {:.1}s", stage.as_str(), start.elapsed().as_secs_f64());
    let dir = run.path(&stage_dir(stage));
    let hash = save_checkpoint(&out.checkpoint, &dir)?;
    let mut csv = run.create(&format!("tables/loss_{}.csv", stage.as_str()))?;
    write_loss_csv(&out.log, &mut csv)?;
    csv.flush()?;
    drop(csv);
    run.refresh_hashes()?;
    Ok(hash)
}

fn load_ck(run: &RunDir, path: Option<&Path>) -> Result<(PathBuf, Checkpoint)> {
    let p = path
        .map(Path::to_path_buf)
        .unwrap_or_else(|| run.path(&stage_dir(Stage::Stage2)));
    let ck = load_checkpoint(&p).with_context(|| format!("loading checkpoint {}", p.display()))?;
    Ok((p, ck))
}

fn write_table(run: &RunDir, stem: &str, t: &EvalTable) -> Result<()> {
    run.write(&format!("tables/{stem}.csv"), t.to_csv())?;
    run.write(&format!("tables/{stem}.txt"), t.to_text())?;
    Ok(())
}

pub fn eval(cfg: &RunConfig, run: &RunDir, checkpoint: Option<&Path>) -> Result<EvalTable> {
    let (_, ck) = load_ck(run, checkpoint)?;
    let bank = cfg.task_bank()?;
    let tasks: Vec<_> = bank.in_distribution().cloned().collect();
    let ecfg = cfg.eval_config();
    let policy = ModelPolicy::from_checkpoint(&ck, cfg.sampler.clone(), ecfg.execute_steps);
    let start = Instant::now();
    let episodes = run_episodes_traced(&policy, &tasks, &cfg.eval.conditions, &ecfg)?;
    log::info!("{} episodes in {:.1}s", episodes.len(), start.elapsed().as_secs_f64());
    let results: Vec<_> = episodes.iter().map(|e| e.0.clone()).collect();
    let table = tabulate(
        &format!("success rate (%), {}", ReasoningMode::for_conditioning(ck.conditioning).as_str()),
        &tasks,
        &cfg.eval.conditions,
        &results,
        &ecfg,
    );
    write_table(run, "eval", &table)?;
    let mut ep = run.create("tables/episodes.jsonl")?;
    for r in &results {
        writeln!(ep, "{}", serde_json::to_string(r)?)?;
    }
    ep.flush()?;
    drop(ep);
    let mut tr = run.create("traces/eval.jsonl")?;
    for (_, trace) in &episodes {
        write_trace(trace, &mut tr)?;
    }
    tr.flush()?;
    drop(tr);
    run.refresh_hashes()?;
    Ok(table)
}

pub fn ablate(cfg: &RunConfig, run: &RunDir) -> Result<(EvalTable, EvalTable)> {
    let data = training_data(cfg, run)?;
    let report = ablation_suite(&cfg.ablation_config(), &data)?;
    write_table(run, "ablation_pretraining", &report.pretraining)?;
    write_table(run, "ablation_finetune", &report.finetune)?;
    run.refresh_hashes()?;
    Ok((report.pretraining, report.finetune))
}

pub fn latency(cfg: &RunConfig, run: &RunDir, checkpoint: Option<&Path>) -> Result<String> {
    let (_, ck) = load_ck(run, checkpoint)?;
    let data = training_data(cfg, run)?;
    let compact: Vec<_> = data
        .samples
        .iter()
        .filter(|s| s.format == ReasoningFormat::Compact && s.split == SampleSplit::Train)
        .collect();
    if compact.is_empty() {
        bail!("the dataset has no compact samples to draw probe states from");
    }
    let n = cfg.eval.latency_probes;
    let stride = (compact.len() / n).max(1);
    let probes = (0..n)
        .map(|i| {
            let s = compact[(i * stride) % compact.len()];
            Ok((data.observation(&s.traj_id, s.step)?.clone(), s.prompt_text.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    let report = latency_report(
        &ck.model,
        &probes,
        &[ReasoningMode::Compact, ReasoningMode::IntentionChain],
        &cfg.sampler,
    )?;
    let text = report.to_text();
    run.write("tables/latency.txt", &text)?;
    run.write("tables/latency.json", serde_json::to_string_pretty(&report)? + "\n")?;
    run.refresh_hashes()?;
    Ok(text)
}

/// Human-readable dump of a trace file, optionally one episode only.
pub fn inspect(trace: &Path, episode: Option<&str>) -> Result<String> {
    let f = fs::File::open(trace).with_context(|| format!("opening {}", trace.display()))?;
    let records = read_trace(BufReader::new(f))?;
    let mut out = String::new();
    let mut current = None;
    for r in records.iter().filter(|r| episode.map_or(true, |e| r.episode == e)) {
        if current.as_deref() != Some(r.episode.as_str()) {
            out.push_str(&format!("== episode {}\n", r.episode));
            current = Some(r.episode.clone());
        }
        let reasoning = if r.reasoning_text.is_empty() {
            "(none)"
        } else {
            r.reasoning_text.as_str()
        };
        out.push_str(&format!(
            "step {:>3}  reasoning: {reasoning}  [{:.1} ms]\n",
            r.step,
            r.timing.total_seconds * 1e3
        ));
        for (i, a) in r.actions.iter().enumerate() {
            out.push_str(&format!(
                "    a{i}: dx {:+.4} dy {:+.4} dz {:+.4} droll {:+.3} dpitch {:+.3} dyaw {:+.3} grip {:.2}\n",
                a[0], a[1], a[2], a[3], a[4], a[5], a[6]
            ));
        }
    }
    if current.is_none() {
        bail!("no matching trace records in {}", trace.display());
    }
    Ok(out)
}
