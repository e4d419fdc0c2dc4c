use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::{AdamState, Gradients, Mode};
use crate::tokenizer::{BOS, EOS};

fn tiny(layers: usize, heads: usize, d: usize, v: usize) -> TransformerConfig {
    TransformerConfig {
        num_layers: layers,
        num_heads: heads,
        d_model: d,
        d_ff: 2 * d,
        dropout: 0.0,
        src_vocab: v,
        tgt_vocab: v,
        max_len: 16,
    }
}

fn build(cfg: TransformerConfig, seed: u64) -> (ParamStore, TransformerModel) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = TransformerModel::new(cfg, &mut store, "F", &mut rng).unwrap();
    (store, m)
}

fn logits(store: &ParamStore, m: &TransformerModel, src: &[usize], pad: &[bool], tgt: &[usize]) -> Tensor {
    let mut g = Graph::eval(store);
    let mem = m.encode(&mut g, SeqInput::Tokens(src), pad).unwrap();
    let l = m.decode_teacher_forced(&mut g, SeqInput::Tokens(tgt), mem, pad).unwrap();
    g.value(l).clone()
}

#[test]
fn positional_encoding_closed_form() {
    let pe = positional_encoding(10, 8).unwrap();
    for i in 0..4 {
        assert_eq!(pe.get(0, 2 * i), 0.0);
        assert_eq!(pe.get(0, 2 * i + 1), 1.0);
    }
    assert!((pe.get(1, 0) - 0.8414709848078965).abs() < 1e-15);
    // pos 3, i = 1: 3 / 10000^(2/8) = 0.3
    assert!((pe.get(3, 2) - 0.3f64.sin()).abs() < 1e-15);
    assert!((pe.get(3, 3) - 0.3f64.cos()).abs() < 1e-15);
    assert!(pe.data().iter().all(|x| (-1.0..=1.0).contains(x)));
    assert!(positional_encoding(4, 7).is_err());
}

#[test]
fn parameter_count_matches_closed_form() {
    for (l, h, d, v) in [(1, 2, 8, 11), (2, 4, 16, 20), (3, 1, 6, 5)] {
        let mut cfg = tiny(l, h, d, v);
        cfg.tgt_vocab = v + 3;
        let (store, _) = build(cfg.clone(), 1);
        assert_eq!(store.numel(), cfg.parameter_count());
        assert_eq!(store.numel_with_prefix("F."), cfg.parameter_count());
    }
    let def = TransformerConfig::default();
    let (d, f, v) = (128usize, 512usize, 4000usize);
    let hand = 2 * v * d + (4 * d * d + 2 * d * f + f + 5 * d) + (8 * d * d + 2 * d * f + f + 7 * d) + d * v + v;
    assert_eq!(def.parameter_count(), hand);
}

#[test]
fn config_validation() {
    assert!(TransformerConfig::default().validate().is_ok());
    let mut c = TransformerConfig::default();
    c.num_heads = 3;
    assert!(c.validate().is_err());
    let mut c = TransformerConfig::default();
    c.dropout = 1.0;
    assert!(c.validate().is_err());
    let mut c = TransformerConfig::default();
    c.num_layers = 0;
    assert!(c.validate().is_err());
}

#[test]
fn soft_embed_cases() {
    let store = ParamStore::new();
    let mut g = Graph::eval(&store);
    let table = Tensor::from_rows(&[vec![1.0, 0.0, 2.0], vec![0.0, 1.0, -1.0], vec![0.5, 0.5, 0.5]]).unwrap();
    let e = g.constant(table.clone());
    let p = g.constant(Tensor::from_rows(&[vec![0.5, 0.5, 0.0], vec![0.0, 0.0, 1.0]]).unwrap());
    let out = soft_embed(&mut g, p, e).unwrap();
    assert_eq!(g.value(out).row(0), &[0.5, 0.5, 0.5]);
    assert_eq!(g.value(out).row(1), table.row(2));
    let u = g.constant(Tensor::full(&[1, 3], 1.0 / 3.0));
    let out = soft_embed(&mut g, u, e).unwrap();
    for c in 0..3 {
        let mean = (0..3).map(|r| table.get(r, c)).sum::<f64>() / 3.0;
        assert!((g.value(out).get(0, c) - mean).abs() < 1e-15);
    }
    let bad = g.constant(Tensor::from_rows(&[vec![0.5, 0.4, 0.0]]).unwrap());
    assert!(soft_embed(&mut g, bad, e).is_err());
}

#[test]
fn one_hot_input_matches_hard_tokens() {
    let (store, m) = build(tiny(2, 2, 8, 9), 3);
    let src = [5, 1, 7, 2];
    let tgt = [BOS, 4, 6];
    let hard = logits(&store, &m, &src, &[], &tgt);

    let mut g = Graph::eval(&store);
    let ssrc = g.constant(Tensor::one_hot_rows(&src, 9));
    let stgt = g.constant(Tensor::one_hot_rows(&tgt, 9));
    let mem = m.encode(&mut g, SeqInput::Soft(ssrc), &[]).unwrap();
    let l = m.decode_teacher_forced(&mut g, SeqInput::Soft(stgt), mem, &[]).unwrap();
    for (a, b) in g.value(l).data().iter().zip(hard.data()) {
        assert!((a - b).abs() <= 1e-12);
    }
}

#[test]
fn decoder_is_causal() {
    let (store, m) = build(tiny(2, 2, 8, 10), 4);
    let src = [4, 5, 6];
    let base = [BOS, 4, 7, 8, 9];
    let l0 = logits(&store, &m, &src, &[], &base);
    for j in 1..base.len() {
        let mut t = base;
        t[j] = if t[j] == 5 { 6 } else { 5 };
        let l1 = logits(&store, &m, &src, &[], &t);
        let v = l0.cols();
        assert_eq!(&l0.data()[..j * v], &l1.data()[..j * v], "position {j} leaked");
        assert_ne!(&l0.data()[j * v..], &l1.data()[j * v..]);
    }
}

#[test]
fn source_padding_is_invisible() {
    let (store, m) = build(tiny(1, 2, 8, 10), 5);
    let tgt = [BOS, 4, 5];
    let plain = logits(&store, &m, &[6, 7, EOS], &[], &tgt);
    for filler in [PAD, 9, 4] {
        let padded = logits(&store, &m, &[6, 7, EOS, filler, filler], &[false, false, false, true, true], &tgt);
        for (a, b) in plain.data().iter().zip(padded.data()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }
}

#[test]
fn zero_layer_memory_is_embedding_plus_pe() {
    let (store, m) = build(tiny(0, 2, 8, 6), 6);
    let src = [3, 5];
    let mut g = Graph::eval(&store);
    let mem = m.encode(&mut g, SeqInput::Tokens(&src), &[]).unwrap();
    let table = store.value(m.src_embedding());
    let pe = positional_encoding(2, 8).unwrap();
    let s = 8f64.sqrt();
    for (p, &id) in src.iter().enumerate() {
        for c in 0..8 {
            let want = table.get(id, c) * s + pe.get(p, c);
            assert!((g.value(mem).get(p, c) - want).abs() < 1e-15);
        }
    }
}

#[test]
fn shape_and_length_contracts() {
    let (store, m) = build(tiny(1, 2, 8, 7), 7);
    let l = logits(&store, &m, &[4], &[], &[BOS]);
    assert_eq!(l.shape(), &[1, 7]);
    let mut g = Graph::eval(&store);
    let long = vec![4; 17];
    assert!(m.encode(&mut g, SeqInput::Tokens(&long), &[]).is_err());
    let bad_mem = g.constant(Tensor::zeros(&[2, 4]));
    assert!(m.decode_hidden(&mut g, SeqInput::Tokens(&[BOS]), bad_mem, &[]).is_err());
}

#[test]
fn eval_mode_is_deterministic_and_train_mode_drops() {
    let mut cfg = tiny(1, 2, 8, 7);
    cfg.dropout = 0.5;
    let (store, m) = build(cfg, 8);
    let a = logits(&store, &m, &[4, 5], &[], &[BOS, 6]);
    let b = logits(&store, &m, &[4, 5], &[], &[BOS, 6]);
    assert_eq!(a, b);
    let mut g = Graph::new(&store, Mode::Train, 1);
    let (l, _) = m.shifted_logits(&mut g, SeqInput::Tokens(&[4, 5]), &[BOS, 6, EOS]).unwrap();
    assert_ne!(g.value(l).row(0), a.row(0));
}

#[test]
fn untrained_loss_is_near_log_vocab() {
    let mut cfg = TransformerConfig::default();
    cfg.src_vocab = 300;
    cfg.tgt_vocab = 300;
    let (store, m) = build(cfg, 9);
    let mut g = Graph::eval(&store);
    let loss = m
        .forward_nll(&mut g, SeqInput::Tokens(&[10, 20, 30, EOS]), &[BOS, 40, 50, 60, EOS])
        .unwrap();
    let l = g.value(loss).item();
    assert!(l >= 0.0);
    assert!((l - 300f64.ln()).abs() < 0.5, "{l}");
}

#[test]
fn overfits_a_single_pair() {
    let (mut store, m) = build(tiny(1, 2, 16, 12), 10);
    let mut adam = AdamState::new(&store, 0.9, 0.999, 1e-8);
    let src = [4, 5, 6, EOS];
    let tgt = [BOS, 7, 8, 9, 10, EOS];
    let mut last = f64::INFINITY;
    for _ in 0..500 {
        let grads = {
            let mut g = Graph::new(&store, Mode::Train, 0);
            let loss = m.forward_nll(&mut g, SeqInput::Tokens(&src), &tgt).unwrap();
            last = g.value(loss).item();
            g.backward(loss).unwrap()
        };
        if last < 0.01 {
            break;
        }
        store.accumulate(&grads);
        adam.step(&mut store, 0.01).unwrap();
    }
    assert!(last < 0.01, "{last}");
}

#[test]
fn batch_nll_weights_and_normalizes_by_tokens() {
    let (store, m) = build(tiny(1, 2, 8, 9), 11);
    let a_src = [4, 5, EOS];
    let a_tgt = [BOS, 6, EOS];
    let b_src = [7, EOS];
    let b_tgt = [BOS, 8, 4, 5, EOS];
    let mut g = Graph::eval(&store);
    let la = m.forward_nll(&mut g, SeqInput::Tokens(&a_src), &a_tgt).unwrap();
    let lb = m.forward_nll(&mut g, SeqInput::Tokens(&b_src), &b_tgt).unwrap();
    let (la, lb) = (g.value(la).item(), g.value(lb).item());
    let rows = [
        NllRow { src: SeqInput::Tokens(&a_src), tgt: &a_tgt, weight: 1.0 },
        NllRow { src: SeqInput::Tokens(&b_src), tgt: &b_tgt, weight: 0.25 },
    ];
    let l = batch_nll(&mut g, &m, &rows).unwrap();
    let want = (2.0 * la + 0.25 * 4.0 * lb) / 6.0;
    assert!((g.value(l).item() - want).abs() < 1e-12);
}

/// Full-model finite-difference check on a two-example batch.
#[test]
fn full_model_gradient_check() {
    let (store, m) = build(tiny(1, 2, 8, 7), 12);
    let a = ([4usize, 5, EOS], [BOS, 6, 4, EOS]);
    let b = ([6usize, EOS, EOS], [BOS, 5, 5, EOS]);
    let loss_of = |s: &ParamStore| -> (f64, Gradients) {
        let mut g = Graph::eval(s);
        let rows = [
            NllRow { src: SeqInput::Tokens(&a.0), tgt: &a.1, weight: 1.0 },
            NllRow { src: SeqInput::Tokens(&b.0), tgt: &b.1, weight: 1.0 },
        ];
        let l = batch_nll(&mut g, &m, &rows).unwrap();
        (g.value(l).item(), g.backward(l).unwrap())
    };
    let (_, grads) = loss_of(&store);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let n = store.value(id).len();
        // every entry of small tensors, a stride through large ones
        let stride = (n / 12).max(1);
        for i in (0..n).step_by(stride) {
            let mut s = store.clone();
            s.value_mut(id).data_mut()[i] += h;
            let plus = loss_of(&s).0;
            s.value_mut(id).data_mut()[i] -= 2.0 * h;
            let minus = loss_of(&s).0;
            let numeric = (plus - minus) / (2.0 * h);
            let analytic = grads.param(id).map_or(0.0, |t| t.data()[i]);
            let e = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(e);
        }
    }
    assert!(worst < 1e-4, "worst relative error {worst}");
}
