use ehrformer::attention::{build_layout, dense_attention_reference, sparse_attention, sparse_attention_forward};
use ehrformer::embedding::EmbeddingConfig;
use ehrformer::encoder::{multi_task_loss, EncoderConfig, EncoderLayer, Transformer, LN_EPS};
use ehrformer::tokenizer::EventToken;
use ehrformer::Error;
use ehrformer_nn::{grad_check, grad_check_store, ParamStore, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const VOCAB: usize = 20;
const STATIC_ID: u32 = 19;
const STATIC_DIM: usize = 5;

fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor<f64> {
    Tensor::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
}

/// 7 CLS tokens, a static slot, then `n_events` random events whose
/// positions follow a random non-decreasing pattern.
fn sequence(rng: &mut ChaCha8Rng, n_events: usize) -> Vec<EventToken> {
    let mut toks: Vec<EventToken> = (0..7)
        .map(|k| EventToken {
            pos: 0,
            var_id: 12 + k,
            t_abs: 0.4,
            values: [0.0; 9],
        })
        .collect();
    toks.push(EventToken {
        pos: 0,
        var_id: STATIC_ID,
        t_abs: 0.0,
        values: [0.0; 9],
    });
    let mut pos = 0;
    for _ in 0..n_events {
        if rng.gen_bool(0.6) {
            pos += 1;
        }
        let mut values = [0.0; 9];
        values.iter_mut().for_each(|v| *v = rng.gen_range(-2.0..2.0));
        toks.push(EventToken {
            pos,
            var_id: rng.gen_range(0..12),
            t_abs: rng.gen_range(-1.0..1.0),
            values,
        });
    }
    toks
}

fn model<T: ehrformer_nn::Scalar>(cfg: EncoderConfig, seed: u64) -> (Transformer, ParamStore<T>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let emb = EmbeddingConfig {
        d_model: cfg.d_model,
        vocab_size: VOCAB,
        static_dim: STATIC_DIM,
        static_id: STATIC_ID,
        discrete_only: false,
    };
    let m = Transformer::new(&mut store, cfg, emb, &mut rng).unwrap();
    (m, store)
}

fn tiny_cfg(layers: usize, d: usize, window: usize) -> EncoderConfig {
    EncoderConfig {
        layers,
        d_model: d,
        d_ff: 2 * d,
        heads: 2,
        window,
        dropout: 0.0,
        tasks: 7,
    }
}

#[test]
fn sparse_matches_dense_when_window_covers_sequence() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let t = rng.gen_range(1..=64);
        let heads = [1, 2, 4][rng.gen_range(0..3)];
        let d = heads * rng.gen_range(1..=8);
        let qkv = Tensor::<f32>::from_fn(t, 3 * d, |_, _| rng.gen_range(-1.0..1.0));
        let layout = build_layout(t, t, 2 * t, &[0]).unwrap();
        let (sparse, _) = sparse_attention_forward::<f32, ChaCha8Rng>(&qkv, &layout, heads, None).unwrap();
        let (dense, _, _) = dense_attention_reference(&qkv, &layout, heads).unwrap();
        assert!(sparse.max_abs_diff(&dense) < 1e-6, "T={t} d={d}");

        let qkv64 = qkv.cast::<f64>();
        let (s64, _) = sparse_attention_forward::<f64, ChaCha8Rng>(&qkv64, &layout, heads, None).unwrap();
        let (d64, _, _) = dense_attention_reference(&qkv64, &layout, heads).unwrap();
        assert!(s64.max_abs_diff(&d64) < 1e-10);
    }
}

#[test]
fn banded_layout_matches_dense_masked_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..10 {
        let t = rng.gen_range(10..50);
        let valid = rng.gen_range(1..=t);
        let window = 2 * rng.gen_range(1..6);
        let globals: Vec<usize> = (0..3).map(|_| rng.gen_range(0..t)).collect();
        let layout = build_layout(t, valid, window, &globals).unwrap();
        let qkv = rand_tensor(&mut rng, t, 12);
        let (sparse, cache) = sparse_attention_forward::<f64, ChaCha8Rng>(&qkv, &layout, 2, None).unwrap();
        let (dense, weights, _) = dense_attention_reference(&qkv, &layout, 2).unwrap();
        assert!(sparse.max_abs_diff(&dense) < 1e-12);
        for h in 0..2 {
            for i in 0..t {
                for j in 0..t {
                    let w = cache.weight(h, i, j);
                    assert_eq!(w, weights[(h * t + i) * t + j]);
                    if !layout.allows(i, j) {
                        assert_eq!(w, 0.0);
                    }
                }
            }
        }
        // padded query rows are exactly zero
        for i in valid..t {
            assert!(sparse.row(i).iter().all(|&x| x == 0.0));
        }
    }
}

#[test]
fn single_token_returns_its_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let qkv = rand_tensor(&mut rng, 1, 12);
    let layout = build_layout(1, 1, 2, &[]).unwrap();
    let (out, _) = sparse_attention_forward::<f64, ChaCha8Rng>(&qkv, &layout, 2, None).unwrap();
    assert_eq!(out.data(), &qkv.data()[8..12]);
}

#[test]
fn disallowed_perturbation_leaves_row_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let layout = build_layout(20, 20, 4, &[0]).unwrap();
    let qkv = rand_tensor(&mut rng, 20, 12);
    let (base, _) = sparse_attention_forward::<f64, ChaCha8Rng>(&qkv, &layout, 2, None).unwrap();
    let mut poked = qkv.clone();
    for c in 0..12 {
        poked.row_mut(15)[c] += 0.5;
    }
    let (after, _) = sparse_attention_forward::<f64, ChaCha8Rng>(&poked, &layout, 2, None).unwrap();
    assert_eq!(base.row(5), after.row(5));
    assert_ne!(base.row(14), after.row(14));
    assert_ne!(base.row(0), after.row(0));
}

#[test]
fn sparse_attention_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let layout = build_layout(9, 8, 4, &[0, 6]).unwrap();
    let qkv = rand_tensor(&mut rng, 9, 12);
    let w = rand_tensor(&mut rng, 9, 4);
    let report = grad_check(
        |tape, v| {
            let a = sparse_attention(tape, v[0], &layout, 2, 0.0)?;
            let wv = tape.input(w.clone());
            let p = tape.mul(a, wv)?;
            Ok::<_, Error>(tape.sum(p)?)
        },
        &[qkv],
        1e-6,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-6, "{report:?}");
}

#[test]
fn attention_dropout_gradient_uses_the_same_mask() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let layout = build_layout(6, 6, 2, &[0]).unwrap();
    let qkv = rand_tensor(&mut rng, 6, 6);
    // central differences on a training tape with a fixed seed see the
    // identical dropout mask at every evaluation
    let f = |x: &Tensor<f64>| {
        let mut tape = Tape::training(9);
        let v = tape.leaf(x.clone());
        let a = sparse_attention(&mut tape, v, &layout, 1, 0.3).unwrap();
        let s = tape.sum(a).unwrap();
        (tape.value(s).item(), tape.backward(s).unwrap().wrt(v).unwrap().clone())
    };
    let (_, g) = f(&qkv);
    for idx in 0..qkv.len() {
        let mut p = qkv.clone();
        p.data_mut()[idx] += 1e-6;
        let mut m = qkv.clone();
        m.data_mut()[idx] -= 1e-6;
        let num = (f(&p).0 - f(&m).0) / 2e-6;
        assert!((num - g.data()[idx]).abs() < 1e-6);
    }
}

#[test]
fn score_evaluations_scale_linearly() {
    let mut counts = Vec::new();
    for t in [128usize, 256, 512] {
        let layout = build_layout(t, t, 32, &(0..8).collect::<Vec<_>>()).unwrap();
        let qkv = Tensor::<f32>::from_fn(t, 6, |i, j| ((i * 7 + j) % 5) as f32 * 0.1);
        let (_, cache) = sparse_attention_forward::<f32, ChaCha8Rng>(&qkv, &layout, 1, None).unwrap();
        let (_, _, dense) = dense_attention_reference(&qkv, &layout, 1).unwrap();
        counts.push((cache.counts.non_global_rows as f64, dense.non_global_rows as f64));
    }
    for w in counts.windows(2) {
        let r = w[1].0 / w[0].0;
        assert!((r - 2.0).abs() <= 0.2, "sparse ratio {r}");
        let rd = w[1].1 / w[0].1;
        assert!(rd > 3.5, "dense ratio {rd}");
    }
}

#[test]
fn residual_dominance_with_zero_projections() {
    let cfg = tiny_cfg(1, 6, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::<f64>::new();
    let layer = EncoderLayer::new(&mut store, "l", &cfg, &mut rng).unwrap();
    for id in [layer.out_w, layer.out_b, layer.ff2_w, layer.ff2_b] {
        store.get_mut(id).data_mut().iter_mut().for_each(|x| *x = 0.0);
    }
    let x = rand_tensor(&mut rng, 5, 6);
    let layout = build_layout(5, 5, 4, &[]).unwrap();
    let mut tape = Tape::new();
    let xv = tape.input(x.clone());
    let y = layer.forward(&mut tape, &store, xv, &layout, 2, 0.0).unwrap();
    let ln = |row: &[f64]| -> Vec<f64> {
        let m = row.iter().sum::<f64>() / row.len() as f64;
        let v = row.iter().map(|a| (a - m).powi(2)).sum::<f64>() / row.len() as f64;
        row.iter().map(|a| (a - m) / (v + LN_EPS).sqrt()).collect()
    };
    for i in 0..5 {
        let expected = ln(&ln(x.row(i)));
        for (a, e) in tape.value(y).row(i).iter().zip(&expected) {
            assert!((a - e).abs() < 1e-9);
        }
    }
}

#[test]
fn encoder_layer_gradient() {
    let cfg = tiny_cfg(1, 4, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParamStore::<f64>::new();
    let layer = EncoderLayer::new(&mut store, "l", &cfg, &mut rng).unwrap();
    let x = rand_tensor(&mut rng, 7, 4);
    let w = rand_tensor(&mut rng, 7, 4);
    let layout = build_layout(7, 7, 4, &[0]).unwrap();
    let report = grad_check_store(
        &store,
        |tape, s| {
            let xv = tape.input(x.clone());
            let y = layer.forward(tape, s, xv, &layout, 2, 0.0)?;
            let wv = tape.input(w.clone());
            let p = tape.mul(y, wv)?;
            Ok::<_, Error>(tape.sum(p)?)
        },
        1e-6,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn full_model_gradient_check() {
    let cfg = tiny_cfg(2, 8, 4);
    let (m, store) = model::<f64>(cfg, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let toks = sequence(&mut rng, 4);
    assert_eq!(toks.len(), 12);
    let sv: Vec<f64> = (0..STATIC_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let labels = [true, false, false, true, false, true, false];
    let report = grad_check_store(
        &store,
        |tape, s| {
            let logits = m.forward(tape, s, &toks, &sv)?;
            multi_task_loss(tape, logits, &labels)
        },
        1e-6,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn forward_shapes_and_prefix_check() {
    let cfg = tiny_cfg(3, 8, 4);
    let (m, store) = model::<f32>(cfg, 11);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let toks = sequence(&mut rng, 10);
    let sv = vec![0.0; STATIC_DIM];
    let mut tape = Tape::new();
    let out = m.forward_detailed(&mut tape, &store, &toks, &sv, toks.len()).unwrap();
    assert_eq!(tape.shape(out.logits), &[1, 7]);
    assert_eq!(out.cls.len(), 3);
    assert_eq!(tape.shape(out.hidden), &[18, 8]);

    let mut tape = Tape::new();
    let err = m.forward(&mut tape, &store, &toks[1..], &sv).unwrap_err();
    assert!(matches!(err, Error::MissingPrefix { expected: 8 }));
}

#[test]
fn same_timestamp_permutation_is_invariant() {
    let cfg = tiny_cfg(2, 8, 64);
    let (m, store) = model::<f32>(cfg, 13);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut toks = sequence(&mut rng, 12);
    toks[10].pos = 3;
    toks[11].pos = 3;
    toks[10].var_id = 4;
    let sv = vec![0.3; STATIC_DIM];
    let run = |t: &[EventToken]| {
        let mut tape = Tape::new();
        let l = m.forward(&mut tape, &store, t, &sv).unwrap();
        tape.value(l).clone()
    };
    let before = run(&toks);
    toks.swap(10, 11);
    let after = run(&toks);
    assert!(before.max_abs_diff(&after) < 1e-6);
}

#[test]
fn every_event_reaches_every_cls_row() {
    let cfg = EncoderConfig {
        layers: 2,
        d_model: 16,
        d_ff: 32,
        heads: 2,
        window: 8,
        dropout: 0.0,
        tasks: 7,
    };
    let (m, store) = model::<f64>(cfg, 15);
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let toks = sequence(&mut rng, 32);
    assert_eq!(toks.len(), 40);
    let sv = vec![0.1; STATIC_DIM];
    let final_cls = |t: &[EventToken]| {
        let mut tape = Tape::new();
        let out = m.forward_detailed(&mut tape, &store, t, &sv, t.len()).unwrap();
        tape.value(*out.cls.last().unwrap()).clone()
    };
    let base = final_cls(&toks);
    for i in 8..toks.len() {
        let mut p = toks.clone();
        p[i].values[0] += 0.25;
        let after = final_cls(&p);
        for k in 0..7 {
            assert_ne!(base.row(k), after.row(k), "event {i} did not reach CLS {k}");
        }
    }
}

#[test]
fn padding_does_not_change_valid_rows() {
    let cfg = tiny_cfg(2, 8, 4);
    let (m, store) = model::<f64>(cfg, 17);
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let toks = sequence(&mut rng, 6);
    let mut padded = toks.clone();
    padded.extend(sequence(&mut rng, 3).into_iter().skip(8));
    let sv = vec![0.0; STATIC_DIM];
    let mut tape = Tape::new();
    let a = m.forward(&mut tape, &store, &toks, &sv).unwrap();
    let b = m.forward_detailed(&mut tape, &store, &padded, &sv, toks.len()).unwrap().logits;
    assert!(tape.value(a).max_abs_diff(tape.value(b)) < 1e-12);
}

#[test]
fn loss_matches_high_precision_recomputation() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    for _ in 0..20 {
        let logits: Vec<f64> = (0..7).map(|_| rng.gen_range(-8.0..8.0)).collect();
        let labels: Vec<bool> = (0..7).map(|_| rng.gen_bool(0.4)).collect();
        let mut tape = Tape::<f32>::new();
        let lv = tape.input(Tensor::row_vector(logits.iter().map(|&x| x as f32).collect()));
        let loss = multi_task_loss(&mut tape, lv, &labels).unwrap();
        let expected: f64 = logits
            .iter()
            .zip(&labels)
            .map(|(&x, &y)| {
                let p = 1.0 / (1.0 + (-x).exp());
                if y {
                    -p.ln()
                } else {
                    -(1.0 - p).ln()
                }
            })
            .sum::<f64>()
            / 7.0;
        assert!((tape.value(loss).item() as f64 - expected).abs() < 1e-5);
    }
}

/// One layer, d = 2, one head, two tasks on a 3-token sequence
/// (2 CLS + static), every step written out in scalar arithmetic.
#[test]
fn hand_forward_tiny_model() {
    let cfg = EncoderConfig {
        layers: 1,
        d_model: 2,
        d_ff: 2,
        heads: 1,
        window: 2,
        dropout: 0.0,
        tasks: 2,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let mut store = ParamStore::<f64>::new();
    let emb = EmbeddingConfig {
        d_model: 2,
        vocab_size: 3,
        static_dim: 1,
        static_id: 2,
        discrete_only: false,
    };
    let m = Transformer::new(&mut store, cfg, emb, &mut rng).unwrap();
    // deterministic hand-set weights
    for (i, t) in store.tensors_mut().iter_mut().enumerate() {
        let n = t.len();
        for (j, x) in t.data_mut().iter_mut().enumerate() {
            *x = 0.1 * ((i * 3 + j) % 7) as f64 - 0.3 + if n == 2 && j == 1 { 0.05 } else { 0.0 };
        }
    }
    let get = |name: &str| store.get(store.id(name).unwrap()).data().to_vec();
    let tok = |id: u32, t: f64| EventToken {
        pos: 0,
        var_id: id,
        t_abs: t,
        values: [0.0; 9],
    };
    let toks = vec![tok(0, 0.7), tok(1, 0.7), tok(2, 0.0)];
    let sv = [0.5];

    // embedding
    let table = get("emb.id_table");
    let vw = get("emb.value.w");
    let vb = get("emb.value.b");
    let mut x = vec![[0.0f64; 2]; 3];
    for r in 0..2 {
        for c in 0..2 {
            let pe = if c == 0 { 0.0 } else { 1.0 };
            x[r][c] = table[r * 2 + c] + pe + toks[r].t_abs * vw[c] + vb[c];
        }
    }
    let (f1w, f1b, f2w, f2b) = (
        get("emb.static.fc1.w"),
        get("emb.static.fc1.b"),
        get("emb.static.fc2.w"),
        get("emb.static.fc2.b"),
    );
    let h: Vec<f64> = (0..2).map(|c| (sv[0] * f1w[c] + f1b[c]).tanh()).collect();
    for c in 0..2 {
        let pe = if c == 0 { 0.0 } else { 1.0 };
        x[2][c] = h[0] * f2w[c] + h[1] * f2w[2 + c] + f2b[c] + pe;
    }

    let affine = |v: &[f64], w: &[f64], b: &[f64], n: usize| -> Vec<f64> {
        (0..n).map(|c| v.iter().enumerate().map(|(k, a)| a * w[k * n + c]).sum::<f64>() + b[c]).collect()
    };
    let ln = |v: &[f64], g: &[f64], b: &[f64]| -> Vec<f64> {
        let m = (v[0] + v[1]) / 2.0;
        let var = ((v[0] - m).powi(2) + (v[1] - m).powi(2)) / 2.0;
        (0..2).map(|c| (v[c] - m) / (var + LN_EPS).sqrt() * g[c] + b[c]).collect()
    };
    let gelu = |z: f64| 0.5 * z * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (z + 0.044715 * z.powi(3))).tanh());

    let qkv: Vec<Vec<f64>> = x.iter().map(|r| affine(r, &get("layer0.qkv.w"), &get("layer0.qkv.b"), 6)).collect();
    let mut att = vec![vec![0.0; 2]; 3];
    for i in 0..3 {
        // all three slots are global here, so every pair is allowed
        let s: Vec<f64> = (0..3)
            .map(|j| (qkv[i][0] * qkv[j][2] + qkv[i][1] * qkv[j][3]) / 2f64.sqrt())
            .collect();
        let mx = s.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = s.iter().map(|v| (v - mx).exp()).collect();
        let z: f64 = e.iter().sum();
        for j in 0..3 {
            att[i][0] += e[j] / z * qkv[j][4];
            att[i][1] += e[j] / z * qkv[j][5];
        }
    }
    let mut y = vec![vec![0.0; 2]; 3];
    for i in 0..3 {
        let a = affine(&att[i], &get("layer0.out.w"), &get("layer0.out.b"), 2);
        let r1 = ln(&[x[i][0] + a[0], x[i][1] + a[1]], &get("layer0.ln1.g"), &get("layer0.ln1.b"));
        let f = affine(&r1, &get("layer0.ff1.w"), &get("layer0.ff1.b"), 2);
        let f: Vec<f64> = f.into_iter().map(gelu).collect();
        let f = affine(&f, &get("layer0.ff2.w"), &get("layer0.ff2.b"), 2);
        y[i] = ln(&[r1[0] + f[0], r1[1] + f[1]], &get("layer0.ln2.g"), &get("layer0.ln2.b"));
    }
    let hw = get("head.w");
    let hb = get("head.b");
    let expected: Vec<f64> = (0..2).map(|k| y[k][0] * hw[k * 2] + y[k][1] * hw[k * 2 + 1] + hb[k]).collect();

    let mut tape = Tape::new();
    let logits = m.forward(&mut tape, &store, &toks, &sv).unwrap();
    for (a, e) in tape.value(logits).data().iter().zip(&expected) {
        assert!((a - e).abs() < 1e-12, "{a} vs {e}");
    }
}

proptest! {
    #[test]
    fn layout_keys_match_predicate(t in 1usize..60, valid_frac in 0.0f64..1.0, half in 0usize..8, g in prop::collection::vec(0usize..60, 0..4)) {
        let valid = ((t as f64 * valid_frac).ceil() as usize).min(t);
        let globals: Vec<usize> = g.into_iter().filter(|&x| x < t).collect();
        let layout = build_layout(t, valid, 2 * half, &globals).unwrap();
        let mut keys = Vec::new();
        for i in 0..t {
            layout.keys(i, &mut keys);
            let brute: Vec<u32> = (0..t)
                .filter(|&j| {
                    j < valid && i < valid && (i.abs_diff(j) <= half || globals.contains(&i) || globals.contains(&j))
                })
                .map(|j| j as u32)
                .collect();
            prop_assert_eq!(&keys, &brute);
            if i < valid {
                prop_assert!(layout.allows(i, i));
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one(t in 1usize..40, half in 1usize..6, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = build_layout(t, t, 2 * half, &[0]).unwrap();
        let qkv = Tensor::<f32>::from_fn(t, 12, |_, _| rng.gen_range(-3.0..3.0));
        let (_, cache) = sparse_attention_forward::<f32, ChaCha8Rng>(&qkv, &layout, 2, None).unwrap();
        let mut sums = vec![0.0f32; 2 * t];
        for (h, i, _, w) in cache.entries() {
            sums[h * t + i] += w;
        }
        for s in sums {
            prop_assert!((s - 1.0).abs() < 1e-6);
        }
    }
}
