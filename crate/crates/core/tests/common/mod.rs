//! Finite-difference oracle and small fixtures shared by integration tests.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vla_core::model::{normal_tensor, Graph, Model, ModelConfig, ParamGroup, ParamStore, Var, Vocab};
use vla_core::simenv::{Observation, SimConfig, TaskBank};

/// Gradient-check threshold on the relative error.
pub const GRAD_TOL: f64 = 1e-4;

pub struct GradReport {
    pub checked: usize,
    pub max_rel: f64,
    pub worst: String,
}

/// Relative error with a floor on the denominator so that gradients which
/// are zero up to rounding do not divide by nothing.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Compares reverse-mode gradients of `loss` against central differences
/// for every scalar in the selected groups.
pub fn gradcheck<F>(store: &ParamStore, groups: &[ParamGroup], loss: F) -> GradReport
where
    F: Fn(&mut Graph) -> Var,
{
    let h = 1e-5;
    let grads = {
        let mut g = Graph::with_trainable(store, groups);
        let l = loss(&mut g);
        g.backward(l)
    };
    let eval = |s: &ParamStore| {
        let mut g = Graph::with_trainable(s, &[]);
        let l = loss(&mut g);
        g.value(l).data[0]
    };
    let mut work = store.clone();
    let mut report = GradReport {
        checked: 0,
        max_rel: 0.0,
        worst: String::new(),
    };
    for (id, p) in store.iter() {
        if !groups.contains(&p.group) {
            continue;
        }
        for i in 0..p.value.len() {
            let orig = p.value.data[i];
            work.value_mut(id).data[i] = orig + h;
            let up = eval(&work);
            work.value_mut(id).data[i] = orig - h;
            let down = eval(&work);
            work.value_mut(id).data[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.get(id).map_or(0.0, |g| g.data[i]);
            let e = rel_err(analytic, numeric);
            report.checked += 1;
            if e > report.max_rel {
                report.max_rel = e;
                report.worst = format!("{}[{i}] analytic {analytic:e} numeric {numeric:e}", p.name);
            }
        }
    }
    report
}

/// A model small enough that every parameter group stays under 10k scalars.
pub fn gradcheck_config() -> ModelConfig {
    ModelConfig {
        layers: 2,
        heads: 2,
        model_dim: 8,
        context_len: 64,
        query_count: 3,
        diff_dim: 8,
        chunk_horizon: 4,
        connector_layers: 4,
        connector_heads: 2,
        dit_layers: 2,
        dit_heads: 2,
        grid: 3,
        channels: SimConfig::CHANNELS,
        diffusion_steps: 20,
        init_std: 0.3,
        seed: 21,
        ..ModelConfig::default()
    }
}

/// Model with every parameter (including zero-initialised and unit-gain
/// ones) moved to a generic random point.
pub fn perturbed_model(seed: u64) -> Model {
    let mut m = Model::new(
        gradcheck_config(),
        Vocab::build(&TaskBank::standard(), &[]).unwrap(),
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = m.params.iter().map(|(id, _)| id).collect();
    for id in ids {
        for v in &mut m.params.value_mut(id).data {
            *v += rng.gen_range(-0.2..0.2);
        }
    }
    m
}

pub fn random_obs(seed: u64) -> Observation {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut o = Observation::zeros(3, SimConfig::CHANNELS);
    for v in &mut o.data {
        *v = rng.gen::<f64>();
    }
    o
}

/// Backbone parameters under the next-token cross-entropy of a compact
/// reasoning target.
pub fn backbone_gradcheck() -> (usize, GradReport) {
    let m = perturbed_model(1);
    let o = random_obs(2);
    let mut toks = m.prompt_tokens("<compact>", "i need to make a call").unwrap();
    let start = toks.len();
    toks.extend(m.vocab.tokenize("move left to phone").unwrap());
    let targets: Vec<usize> = toks[start..].iter().map(|&t| t as usize).collect();
    let r = gradcheck(&m.params, &[ParamGroup::Backbone], |g| {
        let h = m.vlm_forward(g, &o, &toks, false).unwrap();
        let first = m.sequence_len(start, false) - 1;
        let logits = m.logits(g, h, first, targets.len());
        g.cross_entropy(logits, &targets)
    });
    (m.params.count(Some(ParamGroup::Backbone)), r)
}

/// Connector parameters under a squared error on its output.
pub fn connector_gradcheck() -> (usize, GradReport) {
    let m = perturbed_model(3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let z = normal_tensor(3, 8, 1.0, &mut rng);
    let target = normal_tensor(3, 8, 1.0, &mut rng);
    let r = gradcheck(&m.params, &[ParamGroup::Connector], |g| {
        let zv = g.constant(z.clone());
        let c = m.connector_forward(g, zv);
        let l = g.sum_sq_diff(c, target.clone());
        g.scale(l, 1.0 / 24.0)
    });
    (m.params.count(Some(ParamGroup::Connector)), r)
}

/// Denoiser parameters under the noise-prediction loss.
pub fn denoiser_gradcheck() -> (usize, GradReport) {
    let m = perturbed_model(5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let ak = normal_tensor(4, 7, 1.0, &mut rng);
    let c = normal_tensor(3, 8, 1.0, &mut rng);
    let eps = normal_tensor(4, 7, 1.0, &mut rng);
    let r = gradcheck(&m.params, &[ParamGroup::Dit], |g| {
        let cv = g.constant(c.clone());
        let e = m.dit_denoise(g, &ak, 9, cv).unwrap();
        let l = g.sum_sq_diff(e, eps.clone());
        g.scale(l, 1.0 / 28.0)
    });
    (m.params.count(Some(ParamGroup::Dit)), r)
}
