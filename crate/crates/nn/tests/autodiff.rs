use ehrformer_nn::{grad_check, normal, Axis, ParamStore, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const LAYER_TOL: f64 = 1e-6;

fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor<f64> {
    Tensor::from_fn(r, c, |_, _| rng.gen_range(-1.5..1.5))
}

/// Reduces an arbitrary-shaped output to a scalar with fixed random weights
/// so every output element contributes a distinct gradient.
fn weighted_sum(tape: &mut Tape<f64>, x: Var, seed: u64) -> ehrformer_nn::Result<Var> {
    let shape = tape.shape(x).to_vec();
    let (r, c) = tape.value(x).dims2()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.input(rand_mat(&mut rng, r, c).reshape(shape)?);
    let p = tape.mul(x, w)?;
    tape.sum(p)
}

fn check(
    name: &str,
    params: Vec<Tensor<f64>>,
    f: impl Fn(&mut Tape<f64>, &[Var]) -> ehrformer_nn::Result<Var>,
) {
    let report = grad_check(f, &params, 1e-6).unwrap();
    assert!(
        report.max_rel_error < LAYER_TOL,
        "{name}: rel error {} at {:?}",
        report.max_rel_error,
        report.worst
    );
}

#[test]
fn every_op_passes_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..3 {
        let m = rng.gen_range(1..5);
        let k = rng.gen_range(1..6);
        let n = rng.gen_range(1..5);
        let s = trial as u64;
        let a = rand_mat(&mut rng, m, k);
        let b = rand_mat(&mut rng, k, n);
        let c = rand_mat(&mut rng, m, k);
        let bias = rand_mat(&mut rng, 1, n);
        let rowk = rand_mat(&mut rng, 1, k);

        check("matmul", vec![a.clone(), b.clone()], |t, v| {
            let y = t.matmul(v[0], v[1])?;
            weighted_sum(t, y, s)
        });
        check("affine", vec![a.clone(), b.clone(), bias.clone()], |t, v| {
            let y = t.affine(v[0], v[1], v[2])?;
            weighted_sum(t, y, s)
        });
        check("add/sub/mul", vec![a.clone(), c.clone()], |t, v| {
            let x = t.add(v[0], v[1])?;
            let y = t.sub(x, v[1])?;
            let z = t.mul(y, v[1])?;
            weighted_sum(t, z, s)
        });
        check("add_row/scale", vec![a.clone(), rowk.clone()], |t, v| {
            let x = t.add_row(v[0], v[1])?;
            let y = t.scale(x, -0.7)?;
            weighted_sum(t, y, s)
        });
        check("concat/slice", vec![a.clone(), c.clone()], |t, v| {
            let rows = t.concat(&[v[0], v[1]], Axis::Rows)?;
            let cols = t.concat(&[v[0], v[1]], Axis::Cols)?;
            let sr = t.slice_rows(rows, 1, 2 * m)?;
            let sc = t.slice_cols(cols, 1, 2 * k)?;
            let a = weighted_sum(t, sr, s)?;
            let b = weighted_sum(t, sc, s + 1)?;
            t.add(a, b)
        });
        check("gather/transpose/reshape", vec![a.clone()], |t, v| {
            let idx: Vec<usize> = (0..m + 2).map(|i| (i * 7) % m).collect();
            let g = t.gather_rows(v[0], &idx)?;
            let tr = t.transpose(g)?;
            let r = t.reshape(tr, &[1, (m + 2) * k])?;
            weighted_sum(t, r, s)
        });
        check("softmax", vec![a.clone()], |t, v| {
            let y = t.softmax(v[0])?;
            weighted_sum(t, y, s)
        });
        let gain = rand_mat(&mut rng, 1, k);
        check("layer_norm", vec![a.clone(), gain, rowk.clone()], |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
            weighted_sum(t, y, s)
        });
        check("gelu/tanh/sigmoid", vec![a.clone()], |t, v| {
            let g = t.gelu(v[0])?;
            let h = t.tanh(g)?;
            let y = t.sigmoid(h)?;
            weighted_sum(t, y, s)
        });
        check("relu", vec![a.map(|x| if x.abs() < 0.05 { 0.3 } else { x })], |t, v| {
            let y = t.relu(v[0])?;
            weighted_sum(t, y, s)
        });
        check("mean/sum_cols", vec![a.clone()], |t, v| {
            let sc = t.sum_cols(v[0])?;
            let w = weighted_sum(t, sc, s)?;
            let mn = t.mean(v[0])?;
            t.add(w, mn)
        });
        let targets: Vec<f64> = (0..m * k).map(|i| (i % 2) as f64).collect();
        check("bce", vec![a.clone()], move |t, v| t.bce_with_logits(v[0], &targets));
    }
}

#[test]
fn sum_of_product_gradient_is_ones_times_b_transpose() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = rand_mat(&mut rng, 3, 4);
    let b = rand_mat(&mut rng, 4, 2);
    let mut tape = Tape::new();
    let va = tape.leaf(a);
    let vb = tape.leaf(b.clone());
    let p = tape.matmul(va, vb).unwrap();
    let s = tape.sum(p).unwrap();
    let grads = tape.backward(s).unwrap();
    let expected = Tensor::<f64>::ones(vec![3, 2]).matmul(&b.transpose().unwrap()).unwrap();
    assert!(grads.wrt(va).unwrap().max_abs_diff(&expected) < 1e-14);
}

#[test]
fn fan_out_accumulates_on_a_diamond() {
    // y = (x·2) * (x + 3) => dy/dx = 4x + 6
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::row_vector(vec![1.5f64, -2.0]));
    let three = tape.input(Tensor::row_vector(vec![3.0, 3.0]));
    let left = tape.scale(x, 2.0).unwrap();
    let right = tape.add(x, three).unwrap();
    let y = tape.mul(left, right).unwrap();
    let s = tape.sum(y).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.wrt(x).unwrap().data(), &[12.0, -2.0]);
}

#[test]
fn linear_function_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = rand_mat(&mut rng, 3, 3);
    let report = grad_check(
        |t, v| {
            let y = t.scale(v[0], 2.5)?;
            weighted_sum(t, y, 9)
        },
        &[a],
        1e-3,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-9, "{report:?}");
}

#[test]
fn quadratic_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let q = rand_mat(&mut rng, 4, 4);
    let x = rand_mat(&mut rng, 1, 4);
    let report = grad_check(
        move |t, v| {
            let qv = t.input(q.clone());
            let xq = t.matmul(v[0], qv)?;
            let xqx = t.mul(xq, v[0])?;
            t.sum(xqx)
        },
        &[x],
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-8, "{report:?}");
}

#[test]
fn layer_norm_constant_row_yields_bias() {
    let mut tape = Tape::<f64>::new();
    let x = tape.input(Tensor::row_vector(vec![4.0; 5]));
    let g = tape.input(Tensor::row_vector(vec![2.0; 5]));
    let b = tape.input(Tensor::row_vector(vec![0.1, 0.2, 0.3, 0.4, 0.5]));
    let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
    assert_eq!(tape.value(y).data(), &[0.1, 0.2, 0.3, 0.4, 0.5]);
}

#[test]
fn layer_norm_matches_two_pass_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let row: Vec<f64> = (0..16).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let mean = row.iter().sum::<f64>() / 16.0;
    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
    let expected: Vec<f64> = row.iter().map(|v| (v - mean) / (var + 1e-5).sqrt()).collect();
    let mut tape = Tape::<f64>::new();
    let x = tape.input(Tensor::row_vector(row));
    let g = tape.input(Tensor::ones(vec![1, 16]));
    let b = tape.input(Tensor::zeros(vec![1, 16]));
    let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
    for (a, e) in tape.value(y).data().iter().zip(&expected) {
        assert!((a - e).abs() < 1e-12);
    }
}

#[test]
fn dropout_contracts() {
    let x = Tensor::<f64>::from_fn(1, 100_000, |_, j| 1.0 + j as f64 * 1e-6);
    let mut eval = Tape::new();
    let v = eval.input(x.clone());
    assert_eq!(eval.dropout(v, 0.3).unwrap(), v);

    let mut train = Tape::training(1);
    let v = train.input(x.clone());
    assert_eq!(train.dropout(v, 0.0).unwrap(), v);

    let d = train.dropout(v, 0.3).unwrap();
    let out = train.value(d);
    let kept = out.data().iter().filter(|&&y| y != 0.0).count();
    let rate = kept as f64 / 1e5;
    assert!((rate - 0.7).abs() < 0.01, "keep rate {rate}");
    for (&y, &x0) in out.data().iter().zip(x.data()) {
        assert!(y == 0.0 || (y - x0 / 0.7).abs() < 1e-12);
    }
}

#[test]
fn dropout_is_deterministic_per_seed() {
    let run = |seed| {
        let mut t = Tape::<f32>::training(seed);
        let v = t.input(Tensor::ones(vec![4, 64]));
        let d = t.dropout(v, 0.5).unwrap();
        t.value(d).clone()
    };
    assert_eq!(run(4), run(4));
    assert_ne!(run(4), run(5));
}

#[test]
fn shape_errors() {
    let mut t = Tape::<f32>::new();
    let a = t.input(Tensor::zeros(vec![2, 3]));
    let b = t.input(Tensor::zeros(vec![2, 3]));
    assert!(t.matmul(a, b).is_err());
    let c = t.input(Tensor::zeros(vec![3, 2]));
    assert!(t.add(a, c).is_err());
    assert!(t.slice_cols(a, 1, 4).is_err());
    assert!(t.gather_rows(a, &[2]).is_err());
    assert!(t.backward(a).is_err());
}

#[test]
fn params_bind_once_and_collect_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::<f64>::new();
    let w = store.add("w", normal(&mut rng, 2, 2, 0.5)).unwrap();
    let unused = store.add("unused", Tensor::zeros(vec![3])).unwrap();
    let mut tape = Tape::new();
    let a = tape.param(&store, w);
    let b = tape.param(&store, w);
    assert_eq!(a, b);
    let y = tape.mul(a, b).unwrap();
    let s = tape.sum(y).unwrap();
    let grads = tape.backward(s).unwrap().param_grads(&store);
    let expected = store.get(w).map(|x| 2.0 * x);
    assert!(grads[w.index()].max_abs_diff(&expected) < 1e-15);
    assert!(grads[unused.index()].data().iter().all(|&x| x == 0.0));
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(row in prop::collection::vec(-30.0f64..30.0, 1..40)) {
        let mut t = Tape::<f64>::new();
        let n = row.len();
        let v = t.input(Tensor::matrix(1, n, row).unwrap());
        let y = t.softmax(v).unwrap();
        let total: f64 = t.value(y).data().iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
    }
}
