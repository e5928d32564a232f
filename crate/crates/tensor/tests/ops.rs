use pixelrep_tensor::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_slice(shape, v).unwrap()
}

fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::uniform(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

const TOL: f64 = 1e-4;
const H: f64 = 1e-5;

#[test]
fn relu_values() {
    let mut tape = Tape::<f64>::inference();
    let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
    let y = tape.relu(x);
    assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
}

#[test]
fn square_derivative() {
    let mut tape = Tape::<f64>::new(true, 0);
    let x = tape.param(Tensor::scalar(3.0));
    let y = tape.mul(x, x).unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.get(x).unwrap().item(), 6.0);
}

#[test]
fn unreached_leaf_gets_zero() {
    let mut tape = Tape::<f64>::new(true, 0);
    let x = tape.param(Tensor::scalar(3.0));
    let unused = tape.param(Tensor::zeros(&[2, 2]));
    let y = tape.scale(x, 2.0);
    let g = tape.backward(y).unwrap();
    assert_eq!(g.get(unused).unwrap().data(), &[0.0; 4]);
    assert_eq!(g.get(x).unwrap().item(), 2.0);
}

#[test]
fn non_scalar_loss_rejected() {
    let mut tape = Tape::<f64>::new(true, 0);
    let x = tape.param(Tensor::zeros(&[2]));
    assert!(matches!(tape.backward(x), Err(TensorError::NonScalarLoss(_))));
}

#[test]
fn conv_shape_matches_window_geometry() {
    let mut tape = Tape::<f32>::inference();
    let x = tape.constant(Tensor::zeros(&[1, 1, 32, 32]));
    let w = tape.constant(Tensor::zeros(&[1, 1, 3, 1]));
    let y = tape.conv2d(x, w, None, (1, 1)).unwrap();
    assert_eq!(tape.shape(y), &[1, 1, 30, 32]);
}

#[test]
fn shape_errors_name_both_shapes() {
    let mut tape = Tape::<f32>::inference();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[4, 5]));
    let err = tape.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]") && err.contains("[4, 5]"), "{err}");
    let err = tape.add(a, b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]") && err.contains("[4, 5]"), "{err}");
}

#[test]
fn zero_variance_channel_normalizes_to_zero() {
    let mut tape = Tape::<f64>::new(true, 0);
    let x = tape.constant(Tensor::full(&[4, 1, 2, 2], 7.5));
    let g = tape.constant(Tensor::ones(&[1]));
    let b = tape.constant(Tensor::zeros(&[1]));
    let (y, stats) = tape.batch_norm2d(x, g, b, BnMode::Train { include: None }).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    let stats = stats.unwrap();
    assert_eq!(stats.mean, vec![7.5]);
    assert_eq!(stats.var, vec![0.0]);
}

#[test]
fn batchnorm_training_output_is_standardized() {
    let mut tape = Tape::<f64>::new(true, 0);
    let x = tape.constant(rand_t(&[5, 3, 4, 4], 1).map(|v| 3.0 * v + 2.0));
    let g = tape.constant(Tensor::ones(&[3]));
    let b = tape.constant(Tensor::zeros(&[3]));
    let (y, _) = tape.batch_norm2d(x, g, b, BnMode::Train { include: None }).unwrap();
    let yv = tape.value(y).data();
    for c in 0..3 {
        let vals: Vec<f64> = (0..5).flat_map(|n| yv[(n * 3 + c) * 16..][..16].to_vec()).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-3, "mean {mean}");
        assert!((var - 1.0).abs() < 1e-3, "var {var}");
    }
}

#[test]
fn label_smoothing_distribution() {
    // d loss / d logits = p - q, so with uniform logits q = 1/V - grad * N.
    let v = 5;
    let mut tape = Tape::<f64>::new(true, 0);
    let l = tape.param(Tensor::zeros(&[1, v]));
    let loss = tape.cross_entropy(l, &[2], 0.2, None).unwrap();
    let g = tape.backward(loss).unwrap();
    let q: Vec<f64> = g.get(l).unwrap().data().iter().map(|d| 0.2 - d).collect();
    for (i, qi) in q.iter().enumerate() {
        let want = if i == 2 { 0.84 } else { 0.04 };
        assert!((qi - want).abs() < 1e-12, "{i}: {qi}");
    }
}

#[test]
fn uniform_logits_loss_is_log_v() {
    for eps in [0.0, 0.1, 0.2, 0.7] {
        let mut tape = Tape::<f64>::inference();
        let l = tape.constant(Tensor::full(&[3, 7], 1.25));
        let loss = tape.cross_entropy(l, &[0, 6, 3], eps, None).unwrap();
        assert!((tape.value(loss).item() - 7f64.ln()).abs() < 1e-12);
    }
}

#[test]
fn zero_smoothing_is_standard_cross_entropy() {
    let logits = [0.3, -1.2, 2.0, 0.5];
    let mut tape = Tape::<f64>::inference();
    let l = tape.constant(t(&[1, 4], &logits));
    let loss = tape.cross_entropy(l, &[1], 0.0, None).unwrap();
    let lse = logits.iter().map(|x: &f64| x.exp()).sum::<f64>().ln();
    assert!((tape.value(loss).item() - (lse + 1.2)).abs() < 1e-12);
}

#[test]
fn cross_entropy_rejects_bad_target_and_ignores_pad() {
    let mut tape = Tape::<f64>::new(true, 0);
    let l = tape.param(rand_t(&[2, 3], 4));
    assert!(matches!(
        tape.cross_entropy(l, &[0, 3], 0.1, None),
        Err(TensorError::TargetOutOfRange { id: 3, classes: 3 })
    ));
    let loss = tape.cross_entropy(l, &[1, 0], 0.1, Some(0)).unwrap();
    let g = tape.backward(loss).unwrap();
    assert!(g.get(l).unwrap().row(1).iter().all(|&x| x == 0.0));
}

#[test]
fn dropout_identity_at_zero_and_in_eval() {
    let x0 = rand_t(&[4, 4], 2);
    let mut tape = Tape::<f64>::new(true, 9);
    let x = tape.constant(x0.clone());
    let y = tape.dropout(x, 0.0).unwrap();
    assert_eq!(tape.value(y).data(), x0.data());
    let mut tape = Tape::<f64>::inference();
    let x = tape.constant(x0.clone());
    let y = tape.dropout(x, 0.5).unwrap();
    assert_eq!(tape.value(y).data(), x0.data());
}

#[test]
fn dropout_is_seeded() {
    let run = |seed| {
        let mut tape = Tape::<f32>::new(true, seed);
        let x = tape.constant(Tensor::ones(&[64]));
        let y = tape.dropout(x, 0.5).unwrap();
        tape.value(y).data().to_vec()
    };
    assert_eq!(run(3), run(3));
    assert_ne!(run(3), run(4));
    assert!(run(3).iter().all(|&v| v == 0.0 || v == 2.0));
}

#[test]
fn softmax_jacobian_rows_sum_to_zero() {
    // Shift invariance: adding c to every logit leaves the output unchanged.
    let x0 = rand_t(&[1, 5], 7);
    for out_idx in 0..5 {
        let f = |x: &[f64]| {
            let mut tape = Tape::<f64>::new(true, 0);
            let xv = tape.param(t(&[1, 5], x));
            let y = tape.softmax(xv);
            let y = tape.slice(y, 1, out_idx, 1).unwrap();
            let y = tape.sum(y);
            let val = tape.value(y).item();
            let g = tape.backward(y).unwrap();
            (val, g.get(xv).unwrap().data().to_vec())
        };
        let (_, row) = f(x0.data());
        assert!(row.iter().sum::<f64>().abs() < 1e-12);
        assert!(grad_check(f, x0.data(), H).max_rel_error < TOL);
    }
}

#[test]
fn grad_check_linear_is_exact() {
    let w = [0.5, -2.0, 3.0];
    let f = |x: &[f64]| (x.iter().zip(&w).map(|(a, b)| a * b).sum(), w.to_vec());
    let r = grad_check(f, &[1.0, 2.0, 3.0], H);
    assert!(r.max_rel_error < 1e-9, "{}", r.max_rel_error);
}

#[test]
fn grad_check_flags_wrong_gradient() {
    let f = |x: &[f64]| (x[0] * x[0], vec![x[0]]);
    assert!(grad_check(f, &[1.5], H).max_rel_error > 0.4);
}

/// Random projection onto a scalar so every output element matters.
fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let w = tape.constant(rand_t(tape.shape(y), seed));
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn check(inputs: &[Tensor<f64>], build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>) {
    let r = grad_check_tape(inputs, H, build).unwrap();
    assert!(
        r.max_rel_error < TOL,
        "rel err {} at {} (analytic {}, numeric {})",
        r.max_rel_error,
        r.worst_index,
        r.analytic[r.worst_index],
        r.numeric[r.worst_index]
    );
}

#[test]
fn fd_matmul_variants() {
    check(&[rand_t(&[2, 3, 4], 1), rand_t(&[4, 5], 2)], |tp, v| {
        let y = tp.matmul(v[0], v[1])?;
        project(tp, y, 9)
    });
    check(&[rand_t(&[2, 3, 4], 1), rand_t(&[5, 4], 2)], |tp, v| {
        let y = tp.matmul_nt(v[0], v[1])?;
        project(tp, y, 9)
    });
    check(&[rand_t(&[2, 3, 4], 1), rand_t(&[2, 4, 5], 2)], |tp, v| {
        let y = tp.matmul(v[0], v[1])?;
        project(tp, y, 9)
    });
    check(&[rand_t(&[2, 3, 4], 1), rand_t(&[2, 5, 4], 2)], |tp, v| {
        let y = tp.matmul_nt(v[0], v[1])?;
        project(tp, y, 9)
    });
}

#[test]
fn fd_broadcast_add_mul() {
    check(&[rand_t(&[3, 2, 4], 1), rand_t(&[2, 4], 2)], |tp, v| {
        let y = tp.add(v[0], v[1])?;
        let y = tp.mul(y, v[1])?;
        project(tp, y, 5)
    });
}

#[test]
fn fd_conv2d() {
    check(
        &[rand_t(&[2, 2, 6, 5], 1), rand_t(&[3, 2, 3, 2], 2), rand_t(&[3], 3)],
        |tp, v| {
            let y = tp.conv2d(v[0], v[1], Some(v[2]), (2, 1))?;
            project(tp, y, 4)
        },
    );
}

#[test]
fn fd_batchnorm_train_masked_and_eval() {
    let inputs = [rand_t(&[4, 2, 3, 3], 1), rand_t(&[2], 2), rand_t(&[2], 3)];
    check(&inputs, |tp, v| {
        let (y, _) = tp.batch_norm2d(v[0], v[1], v[2], BnMode::Train { include: None })?;
        project(tp, y, 4)
    });
    let mask = [true, false, true, true];
    check(&inputs, |tp, v| {
        let (y, _) = tp.batch_norm2d(v[0], v[1], v[2], BnMode::Train { include: Some(&mask) })?;
        project(tp, y, 4)
    });
    let (mean, var) = ([0.1, -0.3], [0.8, 1.7]);
    check(&inputs, |tp, v| {
        let (y, _) = tp.batch_norm2d(v[0], v[1], v[2], BnMode::Eval { mean: &mean, var: &var })?;
        project(tp, y, 4)
    });
}

#[test]
fn masked_batchnorm_ignores_excluded_samples() {
    let base = rand_t(&[3, 1, 2, 2], 1);
    let mut other = base.clone();
    other.data_mut()[8..].iter_mut().for_each(|v| *v = 100.0);
    let mask = [true, true, false];
    let run = |x: &Tensor<f64>| {
        let mut tp = Tape::<f64>::new(true, 0);
        let x = tp.constant(x.clone());
        let g = tp.constant(Tensor::ones(&[1]));
        let b = tp.constant(Tensor::zeros(&[1]));
        let (y, s) = tp
            .batch_norm2d(x, g, b, BnMode::Train { include: Some(&mask) })
            .unwrap();
        (tp.value(y).data()[..8].to_vec(), s.unwrap())
    };
    assert_eq!(run(&base), run(&other));
}

#[test]
fn fd_layernorm_softmax_relu() {
    check(&[rand_t(&[3, 6], 1), rand_t(&[6], 2), rand_t(&[6], 3)], |tp, v| {
        let y = tp.layer_norm(v[0], v[1], v[2])?;
        let y = tp.softmax(y);
        project(tp, y, 4)
    });
    // Inputs bounded away from the kink.
    let x = rand_t(&[10], 5).map(|v| if v.abs() < 0.1 { v + 0.3 } else { v });
    check(&[x], |tp, v| {
        let y = tp.relu(v[0]);
        project(tp, y, 4)
    });
}

#[test]
fn fd_embedding_concat_slice_mean_permute_reshape() {
    check(&[rand_t(&[5, 3], 1), rand_t(&[2, 3], 2)], |tp, v| {
        let e = tp.embedding(v[0], &[4, 0, 4, 2])?;
        let c = tp.concat(&[e, v[1]], 0)?;
        let c = tp.reshape(c, &[2, 3, 3])?;
        let p = tp.permute(c, &[2, 0, 1])?;
        let s = tp.slice(p, 1, 1, 1)?;
        let m = tp.mean(p, Some(2))?;
        let a = project(tp, s, 3)?;
        let b = project(tp, m, 4)?;
        let total = tp.add(a, b)?;
        let all = tp.mean(c, None)?;
        tp.add(total, all)
    });
}

#[test]
fn fd_cross_entropy() {
    check(&[rand_t(&[4, 6], 1)], |tp, v| {
        let s = tp.scale(v[0], 3.0);
        tp.cross_entropy(s, &[0, 5, 2, 1], 0.2, Some(1))
    });
}

#[test]
fn fd_attention_block() {
    // Single-head attention with a residual, as used by the model.
    check(
        &[rand_t(&[2, 3, 4], 1), rand_t(&[4, 4], 2), rand_t(&[4, 4], 3)],
        |tp, v| {
            let q = tp.matmul(v[0], v[1])?;
            let k = tp.matmul(v[0], v[2])?;
            let s = tp.matmul_nt(q, k)?;
            let s = tp.scale(s, 0.5);
            let a = tp.softmax(s);
            let o = tp.matmul(a, v[0])?;
            let o = tp.add(o, v[0])?;
            project(tp, o, 7)
        },
    );
}

#[test]
fn permute_roundtrip() {
    let x = rand_t(&[2, 3, 4, 5], 1);
    let mut tp = Tape::<f64>::inference();
    let v = tp.constant(x.clone());
    let p = tp.permute(v, &[0, 2, 1, 3]).unwrap();
    assert_eq!(tp.shape(p), &[2, 4, 3, 5]);
    let back = tp.permute(p, &[0, 2, 1, 3]).unwrap();
    assert_eq!(tp.value(back).data(), x.data());
    assert!(tp.permute(v, &[0, 0, 1, 2]).is_err());
}

#[test]
fn f32_and_f64_agree() {
    let a = rand_t(&[3, 8], 1);
    let b = rand_t(&[8, 2], 2);
    let run64 = {
        let mut tp = Tape::<f64>::inference();
        let (x, y) = (tp.constant(a.clone()), tp.constant(b.clone()));
        let z = tp.matmul(x, y).unwrap();
        tp.value(z).data().to_vec()
    };
    let mut tp = Tape::<f32>::inference();
    let (x, y) = (tp.constant(a.cast()), tp.constant(b.cast()));
    let z = tp.matmul(x, y).unwrap();
    for (p, q) in tp.value(z).data().iter().zip(&run64) {
        assert!((*p as f64 - q).abs() < 1e-5);
    }
}
