use super::*;
use crate::simenv::{SimConfig, TaskBank};
use rand::Rng;

fn tiny_config() -> ModelConfig {
    ModelConfig {
        layers: 2,
        heads: 2,
        model_dim: 8,
        context_len: 64,
        query_count: 3,
        diff_dim: 8,
        chunk_horizon: 4,
        connector_layers: 2,
        connector_heads: 2,
        dit_layers: 2,
        dit_heads: 2,
        grid: 3,
        channels: SimConfig::CHANNELS,
        diffusion_steps: 20,
        init_std: 0.3,
        seed: 11,
        ..ModelConfig::default()
    }
}

fn tiny_model() -> Model {
    Model::new(tiny_config(), Vocab::build(&TaskBank::standard(), &[]).unwrap()).unwrap()
}

fn random_obs(grid: usize, seed: u64) -> Observation {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut o = Observation::zeros(grid, SimConfig::CHANNELS);
    for v in &mut o.data {
        *v = rng.gen::<f64>();
    }
    o
}

#[test]
fn encode_observation_shape_and_sensitivity() {
    let m = tiny_model();
    let mut g = Graph::new(&m.params);
    let a = m.encode_observation(&mut g, &random_obs(3, 1)).unwrap();
    let b = m.encode_observation(&mut g, &random_obs(3, 2)).unwrap();
    assert_eq!(g.value(a).shape(), (9, 8));
    assert!(g.value(a).max_abs_diff(g.value(b)) > 1e-6);
}

#[test]
fn zero_grid_gives_bias_plus_position() {
    let m = tiny_model();
    let mut g = Graph::new(&m.params);
    let e = m
        .encode_observation(&mut g, &Observation::zeros(3, SimConfig::CHANNELS))
        .unwrap();
    let pe = grid_encoding(3, 8);
    let bias = m.params.value(m.params.id("vis.b").unwrap());
    for r in 0..9 {
        for c in 0..8 {
            let want = pe.get(r, c) + bias.get(0, c);
            assert!((g.value(e).get(r, c) - want).abs() < 1e-15);
        }
    }
}

#[test]
fn forward_shape_and_causality() {
    let m = tiny_model();
    let obs = random_obs(3, 3);
    let toks = m.prompt_tokens("<compact>", "i need to make a call").unwrap();
    let mut g = Graph::new(&m.params);
    let h = m.vlm_forward(&mut g, &obs, &toks, true).unwrap();
    let seq = m.sequence_len(toks.len(), true);
    assert_eq!(g.value(h).shape(), (seq, 8));

    let mut changed = toks.clone();
    let last = changed.len() - 2;
    changed[last] = m.vocab.id("phone").unwrap();
    let mut g2 = Graph::new(&m.params);
    let h2 = m.vlm_forward(&mut g2, &obs, &changed, true).unwrap();
    let cut = 9 + last;
    let (a, b) = (g.value(h), g2.value(h2));
    for r in 0..seq {
        let same = a.row(r) == b.row(r);
        assert_eq!(same, r < cut, "row {r}");
    }
}

#[test]
fn context_overflow_is_reported() {
    let m = tiny_model();
    let toks = vec![m.vocab.bos(); 60];
    let mut g = Graph::new(&m.params);
    assert!(matches!(
        m.vlm_forward(&mut g, &random_obs(3, 0), &toks, true),
        Err(ModelError::ContextOverflow { .. })
    ));
}

#[test]
fn generation_budget_and_determinism() {
    let m = tiny_model();
    let obs = random_obs(3, 4);
    let p = m.prompt_tokens("<compact>", "i need to make a call").unwrap();
    let one = m.vlm_generate(&obs, &p, 1).unwrap();
    assert_eq!(one.tokens.len(), 1);
    let a = m.vlm_generate(&obs, &p, 6).unwrap();
    let b = m.vlm_generate(&obs, &p, 6).unwrap();
    assert_eq!(a, b);
    assert!(a.tokens.len() <= 6);
}

#[test]
fn queries_are_hidden_tail() {
    let m = tiny_model();
    let obs = random_obs(3, 5);
    let toks = m.prompt_tokens("<compact>", "i need to make a call").unwrap();
    let mut g = Graph::new(&m.params);
    let h = m.vlm_forward(&mut g, &obs, &toks, true).unwrap();
    let z = m.extract_queries(&mut g, h, 3).unwrap();
    let hv = g.value(h).clone();
    assert_eq!(g.value(z).shape(), (3, 8));
    assert_eq!(g.value(z).data[..], hv.data[(hv.rows - 3) * 8..]);
    assert!(matches!(
        m.extract_queries(&mut g, h, 0),
        Err(ModelError::TooFewPositions { .. })
    ));
    let mut cfg = tiny_config();
    cfg.query_count = 0;
    assert!(cfg.validate().is_err());
}

#[test]
fn connector_is_permutation_equivariant() {
    let m = tiny_model();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let z = normal_tensor(3, 8, 1.0, &mut rng);
    let perm = [2usize, 0, 1];
    let mut zp = Tensor::zeros(3, 8);
    for (i, &p) in perm.iter().enumerate() {
        zp.row_mut(i).copy_from_slice(z.row(p));
    }
    let mut g = Graph::new(&m.params);
    let a = g.constant(z);
    let b = g.constant(zp);
    let ca = m.connector_forward(&mut g, a);
    let cb = m.connector_forward(&mut g, b);
    assert_eq!(g.value(ca).shape(), (3, 8));
    for (i, &p) in perm.iter().enumerate() {
        for c in 0..8 {
            assert!((g.value(cb).get(i, c) - g.value(ca).get(p, c)).abs() < 1e-12);
        }
    }
}

#[test]
fn denoiser_shape_and_live_condition() {
    let mut m = tiny_model();
    // The zero-initialised output layer would hide the conditioning.
    let id = m.params.id("dit.out.w").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    *m.params.value_mut(id) = normal_tensor(8, 7, 0.5, &mut rng);
    let ak = normal_tensor(4, 7, 1.0, &mut rng);
    let c1 = normal_tensor(3, 8, 1.0, &mut rng);
    let c2 = normal_tensor(3, 8, 1.0, &mut rng);
    let mut g = Graph::new(&m.params);
    let v1 = g.constant(c1);
    let v2 = g.constant(c2);
    let e1 = m.dit_denoise(&mut g, &ak, 5, v1).unwrap();
    let e2 = m.dit_denoise(&mut g, &ak, 5, v2).unwrap();
    assert_eq!(g.value(e1).shape(), (4, 7));
    assert!(g.value(e1).max_abs_diff(g.value(e2)) > 1e-6);
    assert!(matches!(
        m.dit_denoise(&mut g, &ak, 0, v1),
        Err(ModelError::TimestepOutOfRange(0, 20))
    ));
    assert!(m.dit_denoise(&mut g, &ak, 21, v1).is_err());
}

#[test]
fn fresh_denoiser_predicts_zero() {
    let m = tiny_model();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut g = Graph::new(&m.params);
    let c = g.constant(normal_tensor(3, 8, 1.0, &mut rng));
    let e = m
        .dit_denoise(&mut g, &normal_tensor(4, 7, 1.0, &mut rng), 7, c)
        .unwrap();
    assert!(g.value(e).data.iter().all(|v| *v == 0.0));
}

#[test]
fn chunk_normalisation_round_trip() {
    let m = tiny_model();
    let chunk = vec![[0.01, -0.02, 0.03, 0.0, 0.1, -0.1, 1.0], [0.0; 7]];
    let back = m.denormalize_chunk(&m.normalize_chunk(&chunk));
    for (a, b) in chunk.iter().zip(&back) {
        for i in 0..7 {
            assert!((a[i] - b[i]).abs() < 1e-15);
        }
    }
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let m = tiny_model();
    let dir = tempfile::tempdir().unwrap();
    let ck = Checkpoint::new(m, StageTag::Stage1);
    let h = save_checkpoint(&ck, dir.path()).unwrap();
    let back = load_checkpoint(dir.path()).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.hash(), h);

    let payload = dir.path().join("params.bin");
    let mut bytes = std::fs::read(&payload).unwrap();
    bytes[0] ^= 1;
    std::fs::write(&payload, bytes).unwrap();
    assert!(matches!(
        load_checkpoint(dir.path()),
        Err(ModelError::Checkpoint(_))
    ));
}

#[test]
fn cached_queries_match_full_forward() {
    let m = tiny_model();
    let obs = random_obs(3, 6);
    let mut toks = m.prompt_tokens("<compact>", "i need to make a call").unwrap();
    toks.extend(m.vocab.tokenize("move left to phone").unwrap());
    let mut g = Graph::new(&m.params);
    let h = m.vlm_forward(&mut g, &obs, &toks, true).unwrap();
    let z = m.extract_queries(&mut g, h, 3).unwrap();
    let (cache, last) = m.prefix_cache(&obs, &toks).unwrap();
    assert_eq!(cache.len, 9 + toks.len());
    let zc = m.cached_queries(&mut g, &cache).unwrap();
    assert!(g.value(z).max_abs_diff(g.value(zc)) < 1e-12);
    let hv = g.value(h).clone();
    let row = hv.rows - 3 - 1;
    assert!(hv.slice_rows(row, 1).max_abs_diff(&last) < 1e-12);
}

#[test]
fn cached_generation_matches_full_recompute() {
    let m = tiny_model();
    let obs = random_obs(3, 7);
    let prompt = m.prompt_tokens("<intention>", "my phone is almost dead").unwrap();
    let got = m.vlm_generate(&obs, &prompt, 12).unwrap();
    let mut seq = prompt.clone();
    let mut want = Vec::new();
    for _ in 0..12 {
        let mut g = Graph::new(&m.params);
        let h = m.vlm_forward(&mut g, &obs, &seq, false).unwrap();
        let last = m.sequence_len(seq.len(), false) - 1;
        let l = m.logits(&mut g, h, last, 1);
        let row = &g.value(l).data;
        let best = (0..row.len()).fold(0, |b, i| if row[i] > row[b] { i } else { b }) as u32;
        want.push(best);
        seq.push(best);
        if best == m.vocab.eos() {
            break;
        }
    }
    assert_eq!(got.tokens, want);
}
