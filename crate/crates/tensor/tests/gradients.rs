use fan_tensor::gradcheck::{registered_ops, run_suite, TOLERANCE};
use fan_tensor::{BnMode, Padding, RunningStats, Tape, Tensor};
use proptest::prelude::*;

#[test]
fn every_registered_op_passes_finite_differences() {
    let reports = run_suite(&registered_ops(), 20, 2024);
    for r in &reports {
        assert!(
            r.passed,
            "{}: max rel error {:e} ({:?})",
            r.name, r.max_rel_error, r.error
        );
        assert!(r.max_rel_error < TOLERANCE);
    }
}

#[test]
fn maxpool_relu_conv_chain_matches_numeric() {
    use fan_tensor::gradcheck::{check_case, GradCase};
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::<f64>::uniform(vec![2, 2, 6, 6], -1.0, 1.0, &mut rng).with_grad();
    let w = Tensor::<f64>::uniform(vec![3, 2, 3, 3], -0.5, 0.5, &mut rng).with_grad();
    let case = GradCase {
        inputs: vec![x, w],
        build: Box::new(|t, v| {
            let spec = fan_tensor::Conv2dSpec {
                stride: 1,
                padding: Padding::uniform(1),
            };
            let y = t.conv2d(v[0], v[1], None, spec)?;
            let y = t.upsample_nearest2x(y)?;
            t.global_avg_pool(y)
        }),
    };
    assert!(check_case(&case).unwrap() < TOLERANCE);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn mse_gradient_is_two_diff_over_numel(xs in prop::collection::vec(-100.0f64..100.0, 1..40), shift in -5.0f64..5.0) {
        let ys: Vec<f64> = xs.iter().map(|x| x * 0.5 + shift).collect();
        let n = xs.len();
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::new(vec![n], xs.clone()).unwrap().with_grad());
        let b = tape.leaf(&Tensor::new(vec![n], ys.clone()).unwrap().with_grad());
        let l = tape.mse_loss(a, b).unwrap();
        let g = tape.backward(l).unwrap();
        for i in 0..n {
            prop_assert_eq!(g.get(a).unwrap()[i], 2.0 * (xs[i] - ys[i]) / n as f64);
            prop_assert_eq!(g.get(b).unwrap()[i], -(2.0 * (xs[i] - ys[i]) / n as f64));
        }
    }

    #[test]
    fn forward_is_deterministic(seed in 0u64..1000) {
        use rand::SeedableRng;
        let run = || {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::<f32>::uniform(vec![2, 3, 6, 6], -1.0, 1.0, &mut rng);
            let mut tape = Tape::new();
            let xv = tape.leaf(&x);
            let g = tape.constant(vec![3], vec![1.0; 3], false).unwrap();
            let b = tape.constant(vec![3], vec![0.0; 3], false).unwrap();
            let mut stats = RunningStats::new(3);
            let y = tape.batchnorm2d(xv, g, b, &mut stats, BnMode::Train, 0.1, 1e-5).unwrap();
            let y = tape.maxpool2x2(y).unwrap();
            tape.value(y).iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        prop_assert_eq!(run(), run());
    }
}
