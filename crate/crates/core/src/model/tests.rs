use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::nn::{analytic_grads, compare_numeric, CheckConfig};
use crate::taskgen::{generate_dataset, GenConfig};

fn tiny(dialect: Dialect) -> ModelConfig {
    ModelConfig { dialect, embed_dim: 8, hidden: 12, layers: 1, heads: 2, codes: 4, seed: 3, ..Default::default() }
}

fn tasks(dialect: Dialect, n: usize, seed: u64) -> Vec<Task> {
    generate_dataset(&GenConfig { dialect, seed, max_expressions: 4, ..Default::default() }, n).unwrap()
}

fn permuted(t: &Task, order: &[usize]) -> Task {
    Task {
        inputs: order.iter().map(|&i| t.inputs[i].clone()).collect(),
        outputs: order.iter().map(|&i| t.outputs[i].clone()).collect(),
        program: t.program.clone(),
    }
}

#[test]
fn spec_shapes_and_permutation() {
    let m = Model::<f64>::new(tiny(Dialect::Toy)).unwrap();
    let t = &tasks(Dialect::Toy, 1, 1)[0];
    let enc = m.encode(t).unwrap();
    let cache = m.spec_cache(&enc.io);
    let want: Vec<usize> = t.outputs.iter().map(|o| o.chars().count() + 2).collect();
    assert_eq!(cache.lens, want);

    let order = [2, 0, 3, 1];
    let p = m.spec_cache(&m.encode(&permuted(t, &order)).unwrap().io);
    let offs = offsets(&cache.lens);
    let poffs = offsets(&p.lens);
    for (slot, &src) in order.iter().enumerate() {
        let a = cache.enc.rows_slice(offs[src], offs[src] + cache.lens[src]);
        let b = p.enc.rows_slice(poffs[slot], poffs[slot] + p.lens[slot]);
        assert_eq!(a, b);
    }

    let twin = Task { inputs: vec![t.inputs[0].clone(); 2], outputs: vec![t.outputs[0].clone(); 2], program: None };
    let c = m.spec_cache(&m.encode(&twin).unwrap().io);
    assert_eq!(c.enc.rows_slice(0, c.lens[0]), c.enc.rows_slice(c.lens[0], 2 * c.lens[0]));
}

#[test]
fn latent_length_law() {
    for compression in 0..=4 {
        let cfg = ModelConfig { compression, ..tiny(Dialect::Toy) };
        let m = Model::<f32>::new(cfg.clone()).unwrap();
        let programs: Vec<Vec<usize>> = (1..=64).map(|t| vec![5; t]).collect();
        let refs: Vec<&[usize]> = programs.iter().map(Vec::as_slice).collect();
        let mut g = Graph::new();
        let (e, lens) = m.program_encode(&mut g, &refs);
        let (avg, avg_lens) = m.averaged_embeddings(&mut g, &refs);
        for t in 1..=64 {
            assert_eq!(lens[t - 1], t.div_ceil(1 << compression));
            assert_eq!(cfg.latent_len(t), lens[t - 1]);
        }
        assert_eq!(lens, avg_lens);
        assert_eq!(g.value(e).rows(), lens.iter().sum::<usize>());
        assert_eq!(g.value(avg).rows(), g.value(e).rows());
        let codes = m.codebook.quantize_rows(g.value(e)).0;
        assert!(codes.iter().all(|&k| k < cfg.codes));
    }
}

#[test]
fn averaged_embeddings_pad_with_eos() {
    let m = Model::<f64>::new(tiny(Dialect::Toy)).unwrap();
    let mut g = Graph::new();
    let (avg, lens) = m.averaged_embeddings(&mut g, &[&[5, 6, 7, 8, 9]]);
    assert_eq!(lens, vec![2]);
    let mut h = Graph::new();
    let rows = m.parts.program_emb.forward(&mut h, &m.params, &[5, 6, 7, 8, 9, EOS, EOS, EOS]);
    let r = h.value(rows);
    for c in 0..8 {
        let first = (0..4).map(|i| r.get(i, c)).sum::<f64>() / 4.0;
        let second = (4..8).map(|i| r.get(i, c)).sum::<f64>() / 4.0;
        assert!((g.value(avg).get(0, c) - first).abs() < 1e-12);
        assert!((g.value(avg).get(1, c) - second).abs() < 1e-12);
    }
}

#[test]
fn predictor_and_decoder_distributions() {
    let m = Model::<f64>::new(tiny(Dialect::Toy)).unwrap();
    let t = &tasks(Dialect::Toy, 1, 2)[0];
    let cache = m.spec_cache(&m.encode(t).unwrap().io);
    let perm = m.spec_cache(&m.encode(&permuted(t, &[3, 1, 0, 2])).unwrap().io);
    let prefixes = vec![vec![], vec![1], vec![1, 3, 0]];
    let a = m.latent_next(&cache, &prefixes);
    let b = m.latent_next(&perm, &prefixes);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.len(), 5);
        assert!((x.iter().map(|v| v.exp()).sum::<f64>() - 1.0).abs() < 1e-5);
        for (p, q) in x.iter().zip(y) {
            assert!((p - q).abs() < 1e-12);
        }
    }
    let progs = vec![vec![BOS], vec![BOS, 10, 20]];
    let a = m.program_next(&cache, Some(&[1, 2]), &progs);
    let b = m.program_next(&perm, Some(&[1, 2]), &progs);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.len(), m.vocab.size(Stream::Program));
        assert!((x.iter().map(|v| v.exp()).sum::<f64>() - 1.0).abs() < 1e-5);
        for (p, q) in x.iter().zip(y) {
            assert!((p - q).abs() < 1e-12);
        }
    }
    let other = m.program_next(&cache, Some(&[3, 3]), &progs);
    assert_ne!(a, other);
    let empty = m.program_next(&cache, Some(&[]), &progs);
    assert!(empty.iter().flatten().all(|v| v.is_finite()));
}

#[test]
fn causal_prefixes_share_earlier_rows() {
    let m = Model::<f64>::new(tiny(Dialect::Toy)).unwrap();
    let t = &tasks(Dialect::Toy, 1, 4)[0];
    let enc = m.encode(t).unwrap();
    let mut g = Graph::new();
    let spec = m.encode_spec(&mut g, &[&enc.io]);
    let long = m.latent_logits(&mut g, &spec, &[(0, &[2, 0, 1])]);
    let short = m.latent_logits(&mut g, &spec, &[(0, &[2])]);
    let (l, s) = (g.value(long), g.value(short));
    assert!(l.rows_slice(0, 2).max_abs_diff(s) < 1e-6);

    let long = m.decoder_logits(&mut g, &spec, &[(0, &[BOS, 7, 8, 9])], None);
    let short = m.decoder_logits(&mut g, &spec, &[(0, &[BOS, 7])], None);
    assert!(g.value(long).rows_slice(0, 2).max_abs_diff(g.value(short)) < 1e-6);
}

#[test]
fn loss_parts_add_up() {
    let m = Model::<f64>::new(tiny(Dialect::Toy)).unwrap();
    let ts = tasks(Dialect::Toy, 3, 5);
    let enc: Vec<Encoded> = ts.iter().map(|t| m.encode(t).unwrap()).collect();
    let refs: Vec<&Encoded> = enc.iter().collect();
    for pretraining in [true, false] {
        let mut g = Graph::new();
        let out = m.compute_loss(&mut g, &refs, pretraining, &QuantMode::Nearest).unwrap();
        let p = out.parts;
        for v in [p.autoencoder, p.latent, p.end_to_end, p.commitment] {
            assert!(v >= 0.0);
        }
        assert!((p.total - (p.autoencoder + p.latent + p.end_to_end + p.commitment)).abs() < 1e-6);
        assert_eq!(pretraining, p.end_to_end == 0.0);
        let t: Vec<usize> = refs.iter().map(|e| e.program.as_ref().unwrap().len()).collect();
        let want: Vec<usize> = t.iter().map(|&n| m.config.latent_len(n)).collect();
        assert_eq!(out.latent_lens, want);
        assert_eq!(out.codes.len(), want.iter().sum::<usize>());
    }
}

#[test]
fn missing_program_is_an_error() {
    let m = Model::<f64>::new(tiny(Dialect::Toy)).unwrap();
    let mut t = tasks(Dialect::Toy, 1, 6).remove(0);
    t.program = None;
    let enc = m.encode(&t).unwrap();
    let mut g = Graph::new();
    assert!(matches!(m.compute_loss(&mut g, &[&enc], false, &QuantMode::Nearest), Err(ModelError::MissingProgram)));
}

/// Reverse-mode gradient with the straight-through quantizer against central differences of
/// the same loss with the code assignment frozen.
fn full_loss_error(dialect: Dialect, pretraining: bool) -> f64 {
    let mut m = Model::<f64>::new(tiny(dialect)).unwrap();
    let ts = tasks(dialect, 2, 7);
    let enc: Vec<Encoded> = ts.iter().map(|t| m.encode(t).unwrap()).collect();
    let refs: Vec<&Encoded> = enc.iter().collect();
    let (ids, offsets) = {
        let mut g = Graph::new();
        let programs: Vec<&[usize]> = refs.iter().map(|e| e.program.as_deref().unwrap()).collect();
        let (e, _) = m.program_encode(&mut g, &programs);
        let (ids, q) = m.codebook.quantize_rows(g.value(e));
        let off: Vec<f64> = q.data().iter().zip(g.value(e).data()).map(|(c, x)| c - x).collect();
        (ids, Tensor::from_rows(q.rows(), q.cols(), off))
    };
    let frozen = QuantMode::Frozen { ids, offsets };
    let codebook = m.codebook.clone();
    let config = m.config.clone();
    let vocab = m.vocab.clone();
    let parts = m.parts.clone();
    let rebuild = |params: &ParamStore<f64>| Model {
        config: config.clone(),
        vocab: vocab.clone(),
        params: params.clone(),
        codebook: codebook.clone(),
        parts: parts.clone(),
    };
    let mut st = |g: &mut Graph<f64>, s: &ParamStore<f64>| {
        rebuild(s).compute_loss(g, &refs, pretraining, &QuantMode::Nearest).unwrap().loss
    };
    let mut fixed = |g: &mut Graph<f64>, s: &ParamStore<f64>| {
        rebuild(s).compute_loss(g, &refs, pretraining, &frozen).unwrap().loss
    };
    let grads = analytic_grads(&mut m.params, &mut st);
    let cfg = CheckConfig { coords_per_tensor: 3, ..Default::default() };
    compare_numeric(&mut m.params, &mut fixed, &grads, cfg, &mut ChaCha8Rng::seed_from_u64(0))
}

#[test]
fn full_loss_gradient_check() {
    let err = full_loss_error(Dialect::Toy, false);
    assert!(err < 1e-4, "{err}");
}

#[test]
fn pretraining_loss_gradient_check() {
    let err = full_loss_error(Dialect::Full, true);
    assert!(err < 1e-4, "{err}");
}

#[test]
fn gradient_separation() {
    let m = Model::<f64>::new(ModelConfig { baseline: true, ..tiny(Dialect::Toy) }).unwrap();
    let ts = tasks(Dialect::Toy, 2, 8);
    let enc: Vec<Encoded> = ts.iter().map(|t| m.encode(t).unwrap()).collect();
    let refs: Vec<&Encoded> = enc.iter().collect();
    let mut params = m.params.clone();
    let grads = analytic_grads(&mut params, &mut |g: &mut Graph<f64>, s: &ParamStore<f64>| {
        let mut copy = m.clone();
        copy.params = s.clone();
        copy.compute_loss(g, &refs, false, &QuantMode::Nearest).unwrap().loss
    });
    for id in params.ids() {
        let name = params.name(id);
        let latent_side = ["prog_enc", "conv", "lp", "dec_latent"].iter().any(|p| name.starts_with(p));
        let zero = grads[id.0].data().iter().all(|&x| x == 0.0);
        if latent_side {
            assert!(zero, "{name} should get no gradient in baseline mode");
        }
    }
    assert!(grads.iter().any(|g| g.data().iter().any(|&x| x != 0.0)));

    // The codebook is not a trainable tensor: loss gradients cannot reach it.
    let full = Model::<f64>::new(tiny(Dialect::Toy)).unwrap();
    assert!(full.params.ids().all(|id| !full.params.name(id).contains("codebook")));
    let before = full.codebook.clone();
    let mut g = Graph::new();
    let out = full.compute_loss(&mut g, &refs, false, &QuantMode::Nearest).unwrap();
    let _ = g.backward(out.loss);
    assert_eq!(full.codebook, before);
}
