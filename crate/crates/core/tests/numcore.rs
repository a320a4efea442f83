use mpg_core::numcore::gradcheck::{compare_gradient, finite_difference_check, op_suite, DEFAULT_STEP};
use mpg_core::numcore::{Adam, AdamConfig, Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor {
    Tensor::normal(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn gelu_sum_passes_the_oracle() {
    let x = random(&[4, 5], 1);
    let r = finite_difference_check(|_, v| Ok(v.gelu().sum()), &x, DEFAULT_STEP, 1e-5).unwrap();
    assert!(r.passed && r.max_rel_err < 1e-5, "{r:?}");
    assert_eq!(r.checked, 20);
}

#[test]
fn linear_function_is_exact() {
    let x = random(&[6], 2);
    let r = finite_difference_check(|_, v| Ok(v.scale(3.0).sum()), &x, 1e-4, 1e-9).unwrap();
    assert!(r.max_rel_err < 1e-9, "{r:?}");
}

#[test]
fn wrong_gradient_is_reported() {
    let x = random(&[3], 3);
    let value = |t: &Tensor| t.data().iter().map(|v| v * v).sum::<f64>();
    let right: Vec<f64> = x.data().iter().map(|v| 2.0 * v).collect();
    let wrong: Vec<f64> = x.data().iter().map(|v| 2.2 * v).collect();
    assert!(compare_gradient("x", value, &x, &right, 1e-5, 1e-6, None).passed);
    let r = compare_gradient("x", value, &x, &wrong, 1e-5, 1e-4, None);
    assert!(!r.passed && r.max_rel_err > 0.05);
}

#[test]
fn every_differentiable_op_passes() {
    let reports = op_suite(DEFAULT_STEP, 1e-4, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    for r in &reports {
        assert!(r.passed, "{r:?}");
    }
}

#[test]
fn adam_zero_gradient_and_first_step() {
    let mut p = Tensor::vector(vec![0.5, -1.0, 2.0]);
    let mut adam = Adam::new(AdamConfig::default());
    adam.step(&mut [&mut p], &[Tensor::zeros(&[3])]).unwrap();
    assert_eq!(p.data(), &[0.5, -1.0, 2.0]);

    let mut p = Tensor::vector(vec![0.5, -1.0, 2.0]);
    let g = Tensor::vector(vec![3.0, -0.01, 1e-3]);
    let mut adam = Adam::new(AdamConfig {
        lr: 0.1,
        ..AdamConfig::default()
    });
    adam.step(&mut [&mut p], &[g.clone()]).unwrap();
    // At t = 1 the bias-corrected moments are g and g^2, so the step is
    // lr * g / (|g| + eps).
    for ((after, before), gi) in p.data().iter().zip([0.5, -1.0, 2.0]).zip(g.data()) {
        let expected = before - 0.1 * gi / (gi.abs() + 1e-8);
        assert!((after - expected).abs() < 1e-12);
    }
    assert_eq!(adam.step_count(), 1);
    assert!(adam.step(&mut [&mut p], &[Tensor::zeros(&[2])]).is_err());
}

fn train(seed: u64) -> Tensor {
    let mut w = random(&[3, 3], seed);
    let x = random(&[5, 3], seed + 1);
    let mut adam = Adam::new(AdamConfig::default());
    for _ in 0..20 {
        let tape = Tape::new();
        let wv = tape.param(w.clone());
        let loss = tape
            .constant(x.clone())
            .matmul(wv)
            .unwrap()
            .tanh()
            .mul(tape.constant(x.clone()))
            .unwrap()
            .mean();
        tape.backward(loss).unwrap();
        let g = wv.grad().unwrap();
        adam.step(&mut [&mut w], &[g]).unwrap();
    }
    w
}

#[test]
fn identical_runs_are_bitwise_equal() {
    let (a, b) = (train(9), train(9));
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    assert_ne!(bits(&a), bits(&train(10)));
}

proptest! {
    #[test]
    fn masked_softmax_rows_sum_to_one(seed in any::<u64>(), rows in 1usize..5, cols in 1usize..7, scale in 0.1f64..50.0) {
        let x = random(&[rows, cols], seed);
        let x = Tensor::new(vec![rows, cols], x.data().iter().map(|v| v * scale).collect()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let mut mask: Vec<bool> = (0..rows * cols).map(|_| rand::Rng::gen_bool(&mut rng, 0.6)).collect();
        for r in 0..rows {
            mask[r * cols] = true;
        }
        let tape = Tape::new();
        let y = tape.constant(x).softmax_rows(Some(&mask)).unwrap().to_tensor();
        for r in 0..rows {
            let row = y.row(r);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for (c, &v) in row.iter().enumerate() {
                prop_assert!(v >= 0.0 && v.is_finite());
                if !mask[r * cols + c] {
                    prop_assert_eq!(v, 0.0);
                }
            }
        }
    }

    #[test]
    fn composite_gradients_match_differences(seed in any::<u64>()) {
        let x = random(&[3, 4], seed);
        let w = random(&[4, 4], seed + 1);
        let r = finite_difference_check(
            move |tape, v| {
                let h = v.matmul(tape.constant(w.clone()))?.sigmoid();
                let g = tape.constant(Tensor::ones(&[4]));
                let b = tape.constant(Tensor::zeros(&[4]));
                Ok(h.layer_norm(g, b, 1e-5)?.gelu().mul(v)?.softmax_rows(None)?.mul(v)?.sum())
            },
            &x,
            DEFAULT_STEP,
            1e-4,
        )
        .unwrap();
        prop_assert!(r.passed, "{:?}", r);
    }

    #[test]
    fn backward_twice_doubles(seed in any::<u64>()) {
        let x = random(&[2, 3], seed);
        let tape = Tape::new();
        let v = tape.param(x);
        let loss = v.tanh().mul(v).unwrap().sum();
        tape.backward(loss).unwrap();
        let once = v.grad().unwrap();
        tape.backward(loss).unwrap();
        let twice = v.grad().unwrap();
        for (a, b) in once.data().iter().zip(twice.data()) {
            prop_assert_eq!(2.0 * a, *b);
        }
    }
}
