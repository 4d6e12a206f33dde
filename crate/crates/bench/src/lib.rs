//! Fixtures shared by the benchmarks: a desk-sized model and a handful of
//! annotated samples.

use std::collections::BTreeSet;

use vla_core::annotator::{build_dataset, AnnotatorConfig, ReasoningFormat, TemplateClient};
use vla_core::geometry::CameraCalibration;
use vla_core::model::{Model, ModelConfig};
use vla_core::simenv::{generate_demo, SimConfig, TaskBank};
use vla_core::training::TrainingData;

pub fn desk_sim() -> SimConfig {
    SimConfig {
        grid: 8,
        ..SimConfig::default()
    }
}

/// The model sizes of `configs/desk.toml`.
pub fn desk_model() -> ModelConfig {
    ModelConfig {
        layers: 2,
        heads: 4,
        model_dim: 32,
        context_len: 144,
        query_count: 4,
        diff_dim: 32,
        chunk_horizon: 8,
        connector_layers: 4,
        connector_heads: 4,
        dit_layers: 2,
        dit_heads: 4,
        grid: 8,
        ..ModelConfig::default()
    }
}

/// One demonstration per in-distribution task, annotated in every format.
pub fn small_data() -> TrainingData {
    let bank = TaskBank::standard();
    let calib = CameraCalibration::tabletop();
    let sim = desk_sim();
    let trajs: Vec<_> = bank
        .in_distribution()
        .map(|t| generate_demo(t, 0, &sim, &calib).expect("demo"))
        .collect();
    let formats: BTreeSet<_> = ReasoningFormat::ALL.into_iter().collect();
    let samples = build_dataset(&trajs, &bank, &formats, &TemplateClient, &AnnotatorConfig::default())
        .expect("dataset")
        .samples;
    TrainingData::new(bank, trajs, samples)
}

pub fn fresh_model(data: &TrainingData) -> Model {
    Model::new(desk_model(), data.vocab().expect("vocab")).expect("model")
}
