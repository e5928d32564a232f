use pixelrep_tensor::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::uniform(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let w = tape.constant(rand_t(tape.shape(y), seed));
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..5, cols in 1usize..9, seed in any::<u64>(), scale in 0.1f64..50.0) {
        let mut tape = Tape::<f32>::inference();
        let x = tape.constant(Tensor::<f64>::uniform(&[rows, cols], scale, &mut ChaCha8Rng::seed_from_u64(seed)).cast());
        let y = tape.softmax(x);
        for row in tape.value(y).data().chunks(cols) {
            prop_assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn linear_stack_passes_fd(b in 1usize..4, m in 1usize..4, k in 1usize..5, n in 1usize..5, seed in any::<u64>()) {
        let inputs = [rand_t(&[b, m, k], seed), rand_t(&[k, n], seed ^ 1), rand_t(&[n], seed ^ 2), rand_t(&[n], seed ^ 3), rand_t(&[n], seed ^ 4)];
        let r = grad_check_tape(&inputs, 1e-5, |tp, v| {
            let y = tp.matmul(v[0], v[1])?;
            let y = tp.add(y, v[2])?;
            let y = tp.layer_norm(y, v[3], v[4])?;
            let y = tp.softmax(y);
            project(tp, y, seed ^ 5)
        }).unwrap();
        prop_assert!(r.max_rel_error < 1e-4, "{}", r.max_rel_error);
    }

    #[test]
    fn conv_bn_passes_fd(n in 2usize..4, cin in 1usize..3, cout in 1usize..3, h in 3usize..6, w in 1usize..5, seed in any::<u64>()) {
        let inputs = [rand_t(&[n, cin, h, w], seed), rand_t(&[cout, cin, 3, 1], seed ^ 1), rand_t(&[cout], seed ^ 2), rand_t(&[cout], seed ^ 3)];
        let r = grad_check_tape(&inputs, 1e-5, |tp, v| {
            let y = tp.conv2d(v[0], v[1], None, (1, 1))?;
            let (y, _) = tp.batch_norm2d(y, v[2], v[3], BnMode::Train { include: None })?;
            project(tp, y, seed ^ 4)
        }).unwrap();
        prop_assert!(r.max_rel_error < 1e-4, "{}", r.max_rel_error);
    }

    #[test]
    fn cross_entropy_passes_fd(rows in 1usize..5, v in 2usize..8, eps in 0.0f64..0.5, seed in any::<u64>()) {
        let targets: Vec<usize> = (0..rows).map(|i| (seed as usize + i * 7) % v).collect();
        let r = grad_check_tape(&[rand_t(&[rows, v], seed)], 1e-5, |tp, x| {
            tp.cross_entropy(x[0], &targets, eps, None)
        }).unwrap();
        prop_assert!(r.max_rel_error < 1e-4, "{}", r.max_rel_error);
    }

    #[test]
    fn batchnorm_standardizes(n in 2usize..6, c in 1usize..4, seed in any::<u64>(), shift in -5.0f64..5.0, scale in 0.5f64..4.0) {
        let mut tape = Tape::<f64>::new(true, 0);
        let x = tape.constant(rand_t(&[n, c, 3, 2], seed).map(|v| v * scale + shift));
        let g = tape.constant(Tensor::ones(&[c]));
        let b = tape.constant(Tensor::zeros(&[c]));
        let (y, _) = tape.batch_norm2d(x, g, b, BnMode::Train { include: None }).unwrap();
        let yv = tape.value(y).data();
        for ci in 0..c {
            let vals: Vec<f64> = (0..n).flat_map(|ni| yv[(ni * c + ci) * 6..][..6].to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            prop_assert!(mean.abs() < 1e-3);
            prop_assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn dropout_zero_is_identity(len in 1usize..50, seed in any::<u64>()) {
        let x0 = rand_t(&[len], seed);
        let mut tape = Tape::<f64>::new(true, seed);
        let x = tape.constant(x0.clone());
        let y = tape.dropout(x, 0.0).unwrap();
        prop_assert_eq!(tape.value(y).data(), x0.data());
    }
}
