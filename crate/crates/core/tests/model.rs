use mpsl_core::model::{
    activation_dims, client_loss, contrastive_loss, cross_entropy, encoder_forward, head_forward, server_predict,
    tokenize, Activations, Fusion, Inputs, LateSummary, Modality, ModelConfig, ParamStore, Precision, ServerOutput,
    SplitModel, Task,
};
use mpsl_tensor::{DType, Graph, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cfg64() -> ModelConfig {
    ModelConfig {
        precision: Precision::F64,
        ..Default::default()
    }
}

fn inputs(cfg: &ModelConfig, b: usize, seed: u64) -> Inputs {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.image_size * cfg.image_size * cfg.image_channels;
    Inputs {
        size: b,
        vision: cfg
            .has(Modality::Vision)
            .then(|| (0..b * n).map(|_| rng.random_range(-1.0..1.0)).collect()),
        audio: cfg
            .has(Modality::Audio)
            .then(|| (0..b * cfg.audio_len).map(|_| rng.random_range(-1.0..1.0)).collect()),
        text: cfg
            .has(Modality::Text)
            .then(|| (0..b * cfg.text_len).map(|_| rng.random_range(0..cfg.vocab_size)).collect()),
        text_tokens: cfg.text_len,
    }
}

fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn partition_is_complete_and_disjoint() {
    let configs = [
        ModelConfig::default(),
        ModelConfig {
            modalities: vec![Modality::Audio, Modality::Vision, Modality::Text],
            depth: 3,
            ..Default::default()
        },
        ModelConfig {
            task: Task::Retrieval { proj_dim: 8 },
            fusion: Fusion::Late,
            ..Default::default()
        },
    ];
    for cfg in configs {
        let m = SplitModel::init(&cfg).unwrap();
        let head = m.head();
        let server = m.server();
        assert_eq!(head.len() + server.len(), m.params.len());
        for n in head.names() {
            assert!(server.get(n).is_none());
        }
        for n in m.params.names() {
            assert!(head.get(n).is_some() || server.get(n).is_some());
        }
        for &mo in &cfg.modalities {
            assert!(head.names().any(|n| n.starts_with(&format!("head.{mo}."))));
        }
    }
}

#[test]
fn vision_tokenizer_shapes_and_zero_image() {
    let cfg = ModelConfig {
        modalities: vec![Modality::Vision],
        precision: Precision::F64,
        ..Default::default()
    };
    let mut m = SplitModel::init(&cfg).unwrap();
    m.params.get_mut("head.vision.pos").unwrap().data_mut().fill(0.0);
    let mut g = Graph::new(0);
    let bound = m.params.bind(&mut g);
    let inp = Inputs {
        size: 1,
        vision: Some(vec![0.0; 64]),
        ..Default::default()
    };
    let tok = tokenize(&mut g, &cfg, &bound, Modality::Vision, &inp).unwrap();
    assert_eq!(g.dims(tok), &[1, 5, 16]);
    let v = g.value(tok).data();
    assert_eq!(&v[..16], m.params.get("head.vision.cls").unwrap().data());
    assert!(v[16..].iter().all(|x| *x == 0.0));
}

#[test]
fn vision_indivisible_is_shape_error() {
    let cfg = ModelConfig {
        image_size: 10,
        ..Default::default()
    };
    assert!(cfg.validate().is_err());
}

#[test]
fn text_tokenizer_examples() {
    let cfg = ModelConfig {
        modalities: vec![Modality::Text],
        precision: Precision::F64,
        ..Default::default()
    };
    let m = SplitModel::init(&cfg).unwrap();
    let mut g = Graph::new(0);
    let bound = m.params.bind(&mut g);
    let empty = Inputs { size: 1, text: Some(vec![]), text_tokens: 0, ..Default::default() };
    let tok = tokenize(&mut g, &cfg, &bound, Modality::Text, &empty).unwrap();
    assert_eq!(g.dims(tok), &[1, 1, 16]);

    let rep = Inputs { size: 1, text: Some(vec![3, 3]), text_tokens: 2, ..Default::default() };
    let tok = tokenize(&mut g, &cfg, &bound, Modality::Text, &rep).unwrap();
    let pos = m.params.get("head.text.pos").unwrap().data();
    let v = g.value(tok).data();
    for j in 0..16 {
        assert!(((v[16 + j] - pos[16 + j]) - (v[32 + j] - pos[32 + j])).abs() < 1e-15);
    }

    let bad = Inputs { size: 1, text: Some(vec![1, 99]), text_tokens: 2, ..Default::default() };
    let err = tokenize(&mut g, &cfg, &bound, Modality::Text, &bad).unwrap_err();
    assert!(err.to_string().contains("index 1"), "{err}");
}

#[test]
fn text_table_gradient_only_on_used_rows() {
    let cfg = ModelConfig {
        modalities: vec![Modality::Text],
        precision: Precision::F64,
        ..Default::default()
    };
    let m = SplitModel::init(&cfg).unwrap();
    let mut g = Graph::new(0);
    let inp = Inputs { size: 2, text: Some(vec![1, 4, 4, 7, 1, 2, 2, 2]), text_tokens: 4, ..Default::default() };
    let (bound, out) = m.forward(&mut g, &inp).unwrap();
    let ServerOutput::Logits(l) = out else { panic!() };
    let loss = cross_entropy(&mut g, l, &[0, 3]).unwrap();
    let grads = g.backward(loss).unwrap();
    let gt = grads.get(bound.get("head.text.table").unwrap()).unwrap();
    for row in 0..cfg.vocab_size {
        let used = [1, 2, 4, 7].contains(&row);
        let nz = gt[row * 16..(row + 1) * 16].iter().any(|v| *v != 0.0);
        assert_eq!(used, nz, "row {row}");
    }
}

#[test]
fn audio_zero_signal_gives_bias_tokens() {
    let cfg = ModelConfig {
        modalities: vec![Modality::Audio],
        precision: Precision::F64,
        ..Default::default()
    };
    let mut m = SplitModel::init(&cfg).unwrap();
    m.params.get_mut("head.audio.pos").unwrap().data_mut().fill(0.0);
    m.params.get_mut("head.audio.bias").unwrap().data_mut().fill(0.25);
    let mut g = Graph::new(0);
    let bound = m.params.bind(&mut g);
    let inp = Inputs { size: 1, audio: Some(vec![0.0; 256]), ..Default::default() };
    let tok = tokenize(&mut g, &cfg, &bound, Modality::Audio, &inp).unwrap();
    assert_eq!(g.dims(tok), &[1, 17, 16]);
    assert!(g.value(tok).data()[16..].iter().all(|v| *v == 0.25));

    let short = Inputs { size: 1, audio: Some(vec![0.0; 32]), ..Default::default() };
    assert!(tokenize(&mut g, &cfg, &bound, Modality::Audio, &short).is_err());
}

#[test]
fn early_fusion_concatenates_and_late_matches_tokenizers() {
    let cfg = ModelConfig { precision: Precision::F64, text_len: 3, ..Default::default() };
    let m = SplitModel::init(&cfg).unwrap();
    let inp = inputs(&cfg, 3, 1);
    let mut g = Graph::new(0);
    let bound = m.params.bind(&mut g);
    let Activations::Early(a) = head_forward(&mut g, &cfg, &bound, &inp).unwrap() else { panic!() };
    assert_eq!(g.dims(a), &[3, 9, 16]);
    assert_eq!(activation_dims(&cfg, 3, 3), vec![vec![3, 9, 16]]);

    let late = ModelConfig { fusion: Fusion::Late, ..cfg.clone() };
    let Activations::Late(parts) = head_forward(&mut g, &late, &bound, &inp).unwrap() else { panic!() };
    for (&mo, &p) in late.modalities.iter().zip(&parts) {
        let direct = tokenize(&mut g, &late, &bound, mo, &inp).unwrap();
        assert_eq!(bits(g.value(p)), bits(g.value(direct)));
    }
}

#[test]
fn missing_modality_is_protocol_error() {
    let cfg = cfg64();
    let m = SplitModel::init(&cfg).unwrap();
    let mut inp = inputs(&cfg, 2, 0);
    inp.text = None;
    let mut g = Graph::new(0);
    let bound = m.params.bind(&mut g);
    assert!(matches!(head_forward(&mut g, &cfg, &bound, &inp), Err(mpsl_core::Error::Protocol(_))));
}

#[test]
fn single_modality_early_equals_late_bitwise() {
    for precision in [Precision::F32, Precision::F64] {
        let early = ModelConfig { modalities: vec![Modality::Vision], precision, ..Default::default() };
        let late = ModelConfig { fusion: Fusion::Late, ..early.clone() };
        let m = SplitModel::init(&early).unwrap();
        let inp = inputs(&early, 4, 2);
        let run = |cfg: &ModelConfig| {
            let mut g = Graph::new(0);
            let bound = m.params.bind(&mut g);
            let a = head_forward(&mut g, cfg, &bound, &inp).unwrap();
            let out = server_predict(&mut g, cfg, &bound, &a).unwrap();
            let loss = cross_entropy(&mut g, out.prediction(), &[0, 1, 2, 3]).unwrap();
            let grads = g.backward(loss).unwrap();
            let gw = grads.get(bound.get("body.0.wq").unwrap()).unwrap().to_vec();
            (bits(g.value(out.prediction())), gw)
        };
        assert_eq!(run(&early), run(&late));
    }
}

#[test]
fn cls_summary_is_selectable() {
    let cfg = ModelConfig { fusion: Fusion::Late, late_summary: LateSummary::Cls, ..cfg64() };
    let m = SplitModel::init(&cfg).unwrap();
    let mut g = Graph::new(0);
    let (_, out) = m.forward(&mut g, &inputs(&cfg, 2, 3)).unwrap();
    assert_eq!(g.dims(out.prediction()), &[2, 4]);
}

#[test]
fn split_forward_equals_monolithic() {
    let cfg = cfg64();
    let m = SplitModel::init(&cfg).unwrap();
    let inp = inputs(&cfg, 3, 4);
    let mut g = Graph::new(0);
    let (_, mono) = m.forward(&mut g, &inp).unwrap();
    let mono = g.value(mono.prediction()).clone();

    let mut gc = Graph::new(0);
    let hb = m.head().bind(&mut gc);
    let acts = head_forward(&mut gc, &cfg, &hb, &inp).unwrap();
    let Activations::Early(a) = acts else { panic!() };
    let sent = gc.value(a).clone();

    let mut gs = Graph::new(0);
    let sb = m.server().bind(&mut gs);
    let leaf = gs.insert(sent.with_requires_grad(true));
    let out = server_predict(&mut gs, &cfg, &sb, &Activations::Early(leaf)).unwrap();
    assert!(gs.value(out.prediction()).max_abs_diff(&mono).unwrap() < 1e-12);
}

#[test]
fn retrieval_embeddings_are_unit_norm() {
    let cfg = ModelConfig { task: Task::Retrieval { proj_dim: 8 }, fusion: Fusion::Late, ..Default::default() };
    let m = SplitModel::init(&cfg).unwrap();
    let mut g = Graph::new(0);
    let (_, out) = m.forward(&mut g, &inputs(&cfg, 5, 5)).unwrap();
    let ServerOutput::Retrieval { embeddings, similarity } = out else { panic!() };
    assert_eq!(g.dims(similarity), &[5, 5]);
    for e in embeddings {
        for row in g.value(e).data().chunks(8) {
            let n: f64 = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-5);
        }
    }
}

#[test]
fn freezing_all_blocks_zeroes_body_gradients() {
    let cfg = ModelConfig { freeze_first_k: 2, ..cfg64() };
    let mut m = SplitModel::init(&cfg).unwrap();
    let mut g = Graph::new(0);
    let (bound, out) = m.forward(&mut g, &inputs(&cfg, 2, 6)).unwrap();
    let loss = cross_entropy(&mut g, out.prediction(), &[1, 2]).unwrap();
    let grads = g.backward(loss).unwrap();
    m.params.accumulate(&bound, &grads).unwrap();
    for (n, t) in m.params.iter() {
        if n.starts_with("body.") {
            assert!(t.grad().is_none_or(|g| g.iter().all(|v| *v == 0.0)), "{n}");
        } else {
            assert!(t.grad().is_some(), "{n}");
        }
    }
}

#[test]
fn trainable_count_decreases_with_freezing() {
    let mut last = usize::MAX;
    for k in 0..=3 {
        let cfg = ModelConfig { depth: 3, freeze_first_k: k, ..Default::default() };
        let n = SplitModel::init(&cfg).unwrap().params.trainable_elements();
        assert!(n < last);
        last = n;
    }
}

#[test]
fn empty_body_is_identity() {
    let cfg = ModelConfig { depth: 0, ..cfg64() };
    let m = SplitModel::init(&cfg).unwrap();
    let mut g = Graph::new(0);
    let bound = m.params.bind(&mut g);
    let x = g.insert(Tensor::full(&[2, 3, 16], 0.5, DType::F64));
    let y = encoder_forward(&mut g, &cfg, &bound, x).unwrap();
    assert_eq!(g.value(x), g.value(y));
}

/// Explicit-loop reference for one pre-norm block.
fn naive_block(x: &[f64], s: usize, d: usize, heads: usize, p: &ParamStore) -> Vec<f64> {
    let w = |n: &str| p.get(&format!("body.0.{n}")).unwrap().data().to_vec();
    let ln = |v: &[f64], gain: &[f64], bias: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; v.len()];
        for t in 0..s {
            let row = &v[t * d..(t + 1) * d];
            let mu: f64 = row.iter().sum::<f64>() / d as f64;
            let var: f64 = row.iter().map(|a| (a - mu).powi(2)).sum::<f64>() / d as f64;
            for j in 0..d {
                out[t * d + j] = (row[j] - mu) / (var + 1e-5).sqrt() * gain[j] + bias[j];
            }
        }
        out
    };
    let lin = |v: &[f64], wm: &[f64], b: &[f64], din: usize, dout: usize| -> Vec<f64> {
        let mut out = vec![0.0; s * dout];
        for t in 0..s {
            for o in 0..dout {
                let mut acc = b[o];
                for i in 0..din {
                    acc += v[t * din + i] * wm[i * dout + o];
                }
                out[t * dout + o] = acc;
            }
        }
        out
    };
    let n1 = ln(x, &w("ln1.gain"), &w("ln1.bias"));
    let q = lin(&n1, &w("wq"), &w("bq"), d, d);
    let k = lin(&n1, &w("wk"), &w("bk"), d, d);
    let v = lin(&n1, &w("wv"), &w("bv"), d, d);
    let dh = d / heads;
    let mut ctx = vec![0.0; s * d];
    for h in 0..heads {
        for i in 0..s {
            let mut scores = vec![0.0; s];
            for j in 0..s {
                for c in 0..dh {
                    scores[j] += q[i * d + h * dh + c] * k[j * d + h * dh + c];
                }
                scores[j] /= (dh as f64).sqrt();
            }
            let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = scores.iter().map(|a| (a - mx).exp()).sum();
            for j in 0..s {
                let a = (scores[j] - mx).exp() / z;
                for c in 0..dh {
                    ctx[i * d + h * dh + c] += a * v[j * d + h * dh + c];
                }
            }
        }
    }
    let att = lin(&ctx, &w("wo"), &w("bo"), d, d);
    let h1: Vec<f64> = x.iter().zip(&att).map(|(a, b)| a + b).collect();
    let n2 = ln(&h1, &w("ln2.gain"), &w("ln2.bias"));
    let m1 = lin(&n2, &w("w1"), &w("b1"), d, 4 * d);
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let m1: Vec<f64> = m1.iter().map(|&a| 0.5 * a * (1.0 + (c * (a + 0.044715 * a.powi(3))).tanh())).collect();
    let m2 = lin(&m1, &w("w2"), &w("b2"), 4 * d, d);
    h1.iter().zip(&m2).map(|(a, b)| a + b).collect()
}

#[test]
fn one_block_matches_naive_loops() {
    let cfg = ModelConfig { embed_dim: 8, heads: 2, depth: 1, ..cfg64() };
    let mut m = SplitModel::init(&cfg).unwrap();
    // Larger weights than the init so attention is far from uniform.
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (_, t) in m.params.iter_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    let s = 5;
    let x: Vec<f64> = (0..s * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut g = Graph::new(0);
    let bound = m.params.bind(&mut g);
    let xv = g.insert(Tensor::new(vec![1, s, 8], x.clone(), DType::F64).unwrap());
    let y = encoder_forward(&mut g, &cfg, &bound, xv).unwrap();
    let reference = naive_block(&x, s, 8, 2, &m.params);
    for (a, b) in g.value(y).data().iter().zip(&reference) {
        assert!((a - b).abs() < 1e-5);
    }
}

#[test]
fn end_to_end_gradient_matches_finite_differences() {
    let cfg = ModelConfig { embed_dim: 8, heads: 2, depth: 1, text_len: 3, ..cfg64() };
    let mut m = SplitModel::init(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (_, t) in m.params.iter_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.2..0.2);
        }
    }
    let inp = inputs(&cfg, 2, 9);
    let labels = [1, 3];
    let loss_of = |params: &ParamStore| {
        let mm = SplitModel { config: cfg.clone(), params: params.clone() };
        let mut g = Graph::new(0);
        let (_, out) = mm.forward(&mut g, &inp).unwrap();
        let l = cross_entropy(&mut g, out.prediction(), &labels).unwrap();
        g.value(l).item()
    };
    let mut g = Graph::new(0);
    let (bound, out) = m.forward(&mut g, &inp).unwrap();
    let l = cross_entropy(&mut g, out.prediction(), &labels).unwrap();
    let grads = g.backward(l).unwrap();
    let h = 1e-6;
    let names: Vec<String> = m.params.names().map(String::from).collect();
    for name in names {
        let analytic = grads.get(bound.get(&name).unwrap()).unwrap().to_vec();
        let n = analytic.len();
        for i in (0..n).step_by((n / 6).max(1)) {
            let mut plus = m.params.clone();
            plus.get_mut(&name).unwrap().data_mut()[i] += h;
            let mut minus = m.params.clone();
            minus.get_mut(&name).unwrap().data_mut()[i] -= h;
            let num = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
            let rel = (num - analytic[i]).abs() / num.abs().max(analytic[i].abs()).max(1e-4);
            assert!(rel < 1e-3, "{name}[{i}]: numeric {num} analytic {}", analytic[i]);
        }
    }
}

#[test]
fn retrieval_gradient_matches_finite_differences() {
    let cfg = ModelConfig {
        embed_dim: 8,
        heads: 2,
        depth: 1,
        text_len: 3,
        task: Task::Retrieval { proj_dim: 4 },
        fusion: Fusion::Late,
        ..cfg64()
    };
    let mut m = SplitModel::init(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (_, t) in m.params.iter_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.2..0.2);
        }
    }
    let inp = inputs(&cfg, 3, 5);
    let loss_of = |params: &ParamStore| {
        let mm = SplitModel { config: cfg.clone(), params: params.clone() };
        let mut g = Graph::new(0);
        let (_, out) = mm.forward(&mut g, &inp).unwrap();
        let l = mpsl_core::model::info_nce(&mut g, out.prediction()).unwrap();
        g.value(l).item()
    };
    let mut g = Graph::new(0);
    let (bound, out) = m.forward(&mut g, &inp).unwrap();
    let l = mpsl_core::model::info_nce(&mut g, out.prediction()).unwrap();
    let grads = g.backward(l).unwrap();
    let h = 1e-6;
    let names: Vec<String> = m.params.names().map(String::from).collect();
    for name in names {
        let analytic = grads.get(bound.get(&name).unwrap()).unwrap().to_vec();
        let n = analytic.len();
        for i in (0..n).step_by((n / 6).max(1)) {
            let mut plus = m.params.clone();
            plus.get_mut(&name).unwrap().data_mut()[i] += h;
            let mut minus = m.params.clone();
            minus.get_mut(&name).unwrap().data_mut()[i] -= h;
            let num = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
            let rel = (num - analytic[i]).abs() / num.abs().max(analytic[i].abs()).max(1e-4);
            assert!(rel < 1e-3, "{name}[{i}]: numeric {num} analytic {}", analytic[i]);
        }
    }
}

#[test]
fn vision_projection_gradient_matches_finite_differences() {
    let cfg = ModelConfig { modalities: vec![Modality::Vision], depth: 0, ..cfg64() };
    let m = SplitModel::init(&cfg).unwrap();
    let inp = inputs(&cfg, 2, 10);
    let eval = |params: &ParamStore| {
        let mut g = Graph::new(0);
        let bound = params.bind(&mut g);
        let tok = tokenize(&mut g, &cfg, &bound, Modality::Vision, &inp).unwrap();
        let sq = g.mul(tok, tok).unwrap();
        let s = g.sum(sq);
        (g, bound, s)
    };
    let (mut g, bound, s) = eval(&m.params);
    let grads = g.backward(s).unwrap();
    let analytic = grads.get(bound.get("head.vision.proj").unwrap()).unwrap().to_vec();
    for i in (0..analytic.len()).step_by(17) {
        let mut p = m.params.clone();
        p.get_mut("head.vision.proj").unwrap().data_mut()[i] += 1e-6;
        let (gp, _, sp) = eval(&p);
        let mut q = m.params.clone();
        q.get_mut("head.vision.proj").unwrap().data_mut()[i] -= 1e-6;
        let (gq, _, sq) = eval(&q);
        let num = (gp.value(sp).item() - gq.value(sq).item()) / 2e-6;
        assert!((num - analytic[i]).abs() / num.abs().max(1e-4) < 1e-4);
    }
}

#[test]
fn contrastive_loss_decreases_with_positive_similarity() {
    let base = [0.6, 0.8, 1.0, 0.0, 0.0, 1.0];
    let text = [0.8, 0.6, 0.0, 1.0, 1.0, 0.0];
    let eval = |a: &[f64]| {
        let mut g = Graph::new(0);
        let ea = g.insert(Tensor::new(vec![3, 2], a.to_vec(), DType::F64).unwrap());
        let eb = g.insert(Tensor::new(vec![3, 2], text.to_vec(), DType::F64).unwrap());
        let na = g.l2_normalize(ea).unwrap();
        let l = contrastive_loss(&mut g, na, eb, 0.5).unwrap();
        g.value(l).item()
    };
    let before = eval(&base);
    let mut moved = base;
    moved[0] = 0.7; // row 0 rotates toward its positive [0.8, 0.6]
    moved[1] = 0.714;
    assert!(eval(&moved) < before);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn contrastive_is_permutation_equivariant(seed in 0u64..1000, b in 2usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<f64> = (0..b * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let t: Vec<f64> = (0..b * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut perm: Vec<usize> = (0..b).collect();
        for i in (1..b).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let eval = |a: &[f64], t: &[f64]| {
            let mut g = Graph::new(0);
            let ea = g.insert(Tensor::new(vec![b, 4], a.to_vec(), DType::F64).unwrap());
            let eb = g.insert(Tensor::new(vec![b, 4], t.to_vec(), DType::F64).unwrap());
            let na = g.l2_normalize(ea).unwrap();
            let nb = g.l2_normalize(eb).unwrap();
            let l = contrastive_loss(&mut g, na, nb, 0.1).unwrap();
            g.value(l).item()
        };
        let pa: Vec<f64> = perm.iter().flat_map(|&i| a[i * 4..(i + 1) * 4].to_vec()).collect();
        let pt: Vec<f64> = perm.iter().flat_map(|&i| t[i * 4..(i + 1) * 4].to_vec()).collect();
        prop_assert!((eval(&a, &t) - eval(&pa, &pt)).abs() < 1e-6);
    }
}

#[test]
fn client_loss_matches_graph_recompute() {
    let pred = Tensor::new(vec![2, 3], vec![0.1, -0.4, 2.0, 1.0, 0.0, -1.0], DType::F32).unwrap();
    let l = client_loss(&pred, Some(&[2, 0])).unwrap();
    let mut g = Graph::new(0);
    let y = g.insert(pred.clone());
    let ce = cross_entropy(&mut g, y, &[2, 0]).unwrap();
    assert_eq!(l.value.to_bits(), g.value(ce).item().to_bits());
}
