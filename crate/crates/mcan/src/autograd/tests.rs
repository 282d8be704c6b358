use super::*;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn t2(rows: usize, cols: usize, values: Vec<f64>) -> Tensor {
    Tensor::new(vec![rows, cols], values).unwrap()
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let values: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect();
    t2(rows, cols, values)
}

#[test]
fn matmul_identity() {
    let tape = Tape::new();
    let eye = tape.leaf(&t2(2, 2, vec![1.0, 0.0, 0.0, 1.0]));
    let a = tape.leaf(&t2(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
    let c = tape.matmul(eye, a).unwrap();
    assert_eq!(tape.values(c), vec![1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn matmul_selector_row() {
    let tape = Tape::new();
    let sel = tape.leaf(&t2(1, 2, vec![1.0, 0.0]));
    let col = tape.leaf(&t2(2, 1, vec![2.0, 5.0]));
    let c = tape.matmul(sel, col).unwrap();
    assert_eq!(tape.values(c), vec![2.0]);
}

#[test]
fn matmul_matches_triple_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = random_matrix(&mut rng, 3, 4);
    let b = random_matrix(&mut rng, 4, 2);
    // Independent brute-force triple loop.
    let mut expected = vec![0.0; 3 * 2];
    for i in 0..3 {
        for j in 0..2 {
            let mut s = 0.0;
            for p in 0..4 {
                s += a.values()[i * 4 + p] * b.values()[p * 2 + j];
            }
            expected[i * 2 + j] = s;
        }
    }
    let tape = Tape::new();
    let (ia, ib) = (tape.leaf(&a), tape.leaf(&b));
    let c = tape.matmul(ia, ib).unwrap();
    for (got, want) in tape.values(c).iter().zip(expected.iter()) {
        assert!((got - want).abs() < 1e-12);
    }
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let tape = Tape::new();
    let a = tape.leaf(&t2(2, 3, vec![0.0; 6]));
    let b = tape.leaf(&t2(2, 2, vec![0.0; 4]));
    let err = tape.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("2x3") && msg.contains("2x2"), "{msg}");
}

#[test]
fn softmax_uniform_scores() {
    let tape = Tape::new();
    let a = tape.leaf(&t2(1, 3, vec![0.0, 0.0, 0.0]));
    let s = tape.softmax_rows(a, None).unwrap();
    for v in tape.values(s) {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn softmax_masked_symmetry() {
    let tape = Tape::new();
    let a = tape.leaf(&t2(1, 3, vec![10.0, 10.0, 33.0]));
    let mask = [true, true, false];
    let s = tape.softmax_rows(a, Some(&mask)).unwrap();
    let v = tape.values(s);
    assert!((v[0] - 0.5).abs() < 1e-15);
    assert!((v[1] - 0.5).abs() < 1e-15);
    assert_eq!(v[2], 0.0);
}

#[test]
fn softmax_matches_direct_formula_oracle() {
    let tape = Tape::new();
    let a = tape.leaf(&t2(1, 3, vec![1.0, 2.0, 3.0]));
    let s = tape.softmax_rows(a, None).unwrap();
    let denom: f64 = [1.0f64, 2.0, 3.0].iter().map(|x| x.exp()).sum();
    for (j, v) in tape.values(s).iter().enumerate() {
        let direct = ((j + 1) as f64).exp() / denom;
        assert!((v - direct).abs() < 1e-12);
    }
}

#[test]
fn softmax_fully_masked_row_is_degenerate() {
    let tape = Tape::new();
    let a = tape.leaf(&t2(2, 2, vec![1.0; 4]));
    let mask = [true, true, false, false];
    let err = tape.softmax_rows(a, Some(&mask)).unwrap_err();
    assert!(matches!(err, TensorError::DegenerateRow { row: 1 }));
}

#[test]
fn log_softmax_agrees_with_log_of_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random_matrix(&mut rng, 4, 5);
    let tape = Tape::new();
    let id = tape.leaf(&a);
    let ls = tape.log_softmax_rows(id).unwrap();
    let s = tape.softmax_rows(id, None).unwrap();
    let sl = tape.log(s).unwrap();
    for (x, y) in tape.values(ls).iter().zip(tape.values(sl).iter()) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn backward_of_sum_is_ones() {
    let tape = Tape::new();
    let x = tape.leaf(&Tensor::new(vec![3], vec![5.0, -1.0, 2.0]).unwrap().with_grad());
    let loss = tape.sum(x).unwrap();
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap(), &[1.0, 1.0, 1.0]);
}

#[test]
fn backward_of_square_is_two_x() {
    let tape = Tape::new();
    let x = tape.leaf(&Tensor::scalar(2.0).with_grad());
    let sq = tape.mul(x, x).unwrap();
    let loss = tape.sum(sq).unwrap();
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap(), &[4.0]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let tape = Tape::new();
    let x = tape.leaf(&t2(1, 2, vec![1.0, 2.0]).with_grad());
    let err = tape.backward(x).unwrap_err();
    assert!(matches!(err, TensorError::NonScalarLoss { .. }));
}

#[test]
fn unused_parameter_gets_zero_gradient() {
    let tape = Tape::new();
    let x = tape.leaf(&Tensor::scalar(2.0).with_grad());
    let unused = tape.leaf(&t2(2, 2, vec![1.0; 4]).with_grad());
    let loss = tape.sum(x).unwrap();
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.get(unused).unwrap(), &[0.0; 4]);
}

#[test]
fn composite_graph_matches_finite_differences() {
    // matmul + relu + softmax + log, the composition the model relies on.
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let a = random_matrix(&mut rng, 3, 4);
    let b = random_matrix(&mut rng, 4, 3);
    let w = random_matrix(&mut rng, 3, 3);
    let err = gradcheck(
        &[a, b, w],
        |tape, ids| {
            let prod = tape.matmul(ids[0], ids[1])?;
            let act = tape.relu(prod)?;
            let scored = tape.matmul(act, ids[2])?;
            let probs = tape.softmax_rows(scored, None)?;
            let lp = tape.log(probs)?;
            let picked = tape.pick(lp, 4)?;
            let s = tape.sum(scored)?;
            let damped = tape.scale(s, 1e-3)?;
            tape.add(picked, damped)
        },
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "max scaled gradient error {err}");
}

#[test]
fn gather_concat_reshape_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let a = random_matrix(&mut rng, 3, 2);
    let b = random_matrix(&mut rng, 4, 2);
    let err = gradcheck(
        &[a, b],
        |tape, ids| {
            let g = tape.gather_rows(ids[0], &[0, 2, 1, 0])?;
            let cat = tape.concat_cols(g, ids[1])?;
            let flat = tape.reshape(cat, vec![2, 8])?;
            let sm = tape.softmax_rows(flat, None)?;
            let lg = tape.log(sm)?;
            tape.mean(lg)
        },
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "max scaled gradient error {err}");
}

#[test]
fn masked_softmax_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let a = random_matrix(&mut rng, 3, 3);
    let mask = vec![
        true, false, false, //
        true, true, false, //
        true, true, true,
    ];
    let err = gradcheck(
        &[a],
        |tape, ids| {
            let sm = tape.softmax_rows(ids[0], Some(&mask))?;
            let picked = tape.pick(sm, 4)?;
            let s = tape.sum(sm)?;
            let damped = tape.scale(s, 0.25)?;
            tape.add(picked, damped)
        },
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "max scaled gradient error {err}");
}

#[test]
fn sgd_step_applies_update_in_place() {
    let tape = Tape::new();
    let mut p = Tensor::scalar(1.0).with_grad();
    let id = tape.leaf(&p);
    let doubled = tape.scale(id, 2.0).unwrap();
    let loss = tape.sum(doubled).unwrap();
    let grads = tape.backward(loss).unwrap();
    sgd_step(&mut [(id, &mut p)], &grads, 0.01).unwrap();
    assert!((p.values()[0] - 0.98).abs() < 1e-15);
}

#[test]
fn sgd_step_zero_gradient_is_identity() {
    let tape = Tape::new();
    let mut p = Tensor::scalar(3.5).with_grad();
    let used = tape.leaf(&Tensor::scalar(1.0).with_grad());
    let id = tape.leaf(&p);
    let loss = tape.sum(used).unwrap();
    let grads = tape.backward(loss).unwrap();
    sgd_step(&mut [(id, &mut p)], &grads, 0.5).unwrap();
    assert_eq!(p.values()[0], 3.5);
}

#[test]
fn sgd_step_missing_gradient_is_contract_error() {
    let tape = Tape::new();
    let mut p = Tensor::scalar(1.0); // never marked requires_grad
    let id = tape.leaf(&p);
    let loss = tape.sum(id).unwrap();
    let grads = tape.backward(loss).unwrap();
    let err = sgd_step(&mut [(id, &mut p)], &grads, 0.1).unwrap_err();
    assert!(matches!(err, TensorError::MissingGradient(_)));
}

#[test]
fn two_sgd_steps_match_closed_form_on_linear_model() {
    // Least squares on one point: loss(w) = 0.5 (w x - y)^2, x=2, y=3.
    // Gradient is x (w x - y); two steps from w0 have a closed form.
    let x = 2.0;
    let y = 3.0;
    let lr = 0.05;
    let step = |w: f64| w - lr * x * (w * x - y);
    let expected = step(step(0.1));

    let mut w = Tensor::scalar(0.1).with_grad();
    for _ in 0..2 {
        let tape = Tape::new();
        let wid = tape.leaf(&w);
        let xs = tape.leaf(&Tensor::scalar(x));
        let ys = tape.leaf(&Tensor::scalar(y));
        let pred = tape.mul(wid, xs).unwrap();
        let resid = tape.sub(pred, ys).unwrap();
        let sq = tape.mul(resid, resid).unwrap();
        let half = tape.scale(sq, 0.5).unwrap();
        let loss = tape.sum(half).unwrap();
        let grads = tape.backward(loss).unwrap();
        sgd_step(&mut [(wid, &mut w)], &grads, lr).unwrap();
    }
    assert!((w.values()[0] - expected).abs() < 1e-14);
}

#[test]
fn forward_and_gradients_are_bit_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let a = random_matrix(&mut rng, 4, 4);
        let b = random_matrix(&mut rng, 4, 4);
        let tape = Tape::new();
        let ia = tape.leaf(&a.with_grad());
        let ib = tape.leaf(&b.with_grad());
        let prod = tape.matmul(ia, ib).unwrap();
        let act = tape.relu(prod).unwrap();
        let sm = tape.softmax_rows(act, None).unwrap();
        let loss = tape.mean(sm).unwrap();
        let grads = tape.backward(loss).unwrap();
        let bits: Vec<u64> = tape
            .values(sm)
            .iter()
            .chain(grads.get(ia).unwrap().iter())
            .chain(grads.get(ib).unwrap().iter())
            .map(|v| v.to_bits())
            .collect();
        bits
    };
    assert_eq!(run(), run());
}

mod properties {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(rows in 1usize..5, cols in 1usize..6, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_matrix(&mut rng, rows, cols);
            let tape = Tape::new();
            let id = tape.leaf(&a);
            let s = tape.softmax_rows(id, None).unwrap();
            let v = tape.values(s);
            for r in 0..rows {
                let sum: f64 = v[r * cols..(r + 1) * cols].iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-9);
            }
            prop_assert!(v.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }

        #[test]
        fn concat_then_split_roundtrips(rows in 1usize..4, p in 1usize..4, q in 1usize..4, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_matrix(&mut rng, rows, p);
            let b = random_matrix(&mut rng, rows, q);
            let tape = Tape::new();
            let (ia, ib) = (tape.leaf(&a), tape.leaf(&b));
            let cat = tape.concat_cols(ia, ib).unwrap();
            let v = tape.values(cat);
            for r in 0..rows {
                prop_assert_eq!(&v[r * (p + q)..r * (p + q) + p], &a.values()[r * p..(r + 1) * p]);
                prop_assert_eq!(&v[r * (p + q) + p..(r + 1) * (p + q)], &b.values()[r * q..(r + 1) * q]);
            }
        }
    }
}
