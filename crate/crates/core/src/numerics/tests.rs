use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn full_mask(n: usize) -> Arc<Vec<bool>> {
    Arc::new(vec![true; n * n])
}

#[test]
fn activation_values() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![0.0, 2.0, -1.0]).unwrap());
    let s = tape.activation(Activation::Sigmoid, x).unwrap();
    assert_eq!(tape.value(s).data()[0], 0.5);
    assert!((tape.value(s).data()[1] - 0.880_797_077_977_882_4).abs() < 1e-15);
    let l = tape.activation(Activation::LeakyRelu(0.2), x).unwrap();
    assert!((tape.value(l).data()[2] + 0.2).abs() < 1e-15);
    let e = tape.activation(Activation::Elu, x).unwrap();
    assert!((tape.value(e).data()[2] - ((-1.0f64).exp() - 1.0)).abs() < 1e-15);

    assert!(tape.activation(Activation::LeakyRelu(1.5), x).is_err());
    let bad = tape.constant(Tensor::vector(vec![f64::NAN]).unwrap());
    assert!(matches!(
        tape.activation(Activation::Sigmoid, bad),
        Err(crate::Error::NonFinite(_))
    ));
}

#[test]
fn masked_softmax_cases() {
    let mut tape = Tape::new();
    let eq = tape.constant(Tensor::full(&[3, 3], 0.7));
    let s = tape.masked_softmax(eq, full_mask(3)).unwrap();
    for v in tape.value(s).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }

    let diag: Vec<bool> = (0..9).map(|i| i % 4 == 0).collect();
    let s = tape.masked_softmax(eq, Arc::new(diag)).unwrap();
    assert_eq!(tape.value(s), &Tensor::eye(3));

    let row = tape.constant(Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap());
    let s = tape.masked_softmax(row, Arc::new(vec![true; 3])).unwrap();
    let expected = [0.090_030_573_170_380_46, 0.244_728_471_054_797_65, 0.665_240_955_774_821_9];
    for (v, e) in tape.value(s).data().iter().zip(expected) {
        assert!((v - e).abs() < 1e-8);
    }

    let dead = Arc::new(vec![true, true, false, true]);
    let two = tape.constant(Tensor::zeros(&[2, 2]));
    assert!(tape.masked_softmax(two, Arc::new(vec![false, false, true, true])).is_err());
    assert!(tape.masked_softmax(two, dead).is_ok());
}

#[test]
fn bce_cases() {
    let mut tape = Tape::new();
    let p = tape.constant(Tensor::vector(vec![1.0 - BCE_EPS]).unwrap());
    let l = tape.bce_loss(p, Arc::new(vec![1.0])).unwrap();
    assert!(tape.value(l).data()[0] <= 1e-6);

    let p = tape.constant(Tensor::vector(vec![0.5, 0.5]).unwrap());
    let l = tape.bce_loss(p, Arc::new(vec![0.0, 1.0])).unwrap();
    assert!((tape.value(l).data()[0] - std::f64::consts::LN_2).abs() < 1e-12);

    let p = tape.constant(Tensor::vector(vec![0.9, 0.2]).unwrap());
    let l = tape.bce_loss(p, Arc::new(vec![1.0, 0.0])).unwrap();
    assert!((tape.value(l).data()[0] - 0.164_252_033_486_018).abs() < 1e-12);

    assert!(tape.bce_loss(p, Arc::new(vec![1.0])).is_err());

    // Clamping keeps exact zeros and ones finite.
    let p = tape.constant(Tensor::vector(vec![0.0, 1.0]).unwrap());
    let l = tape.bce_loss(p, Arc::new(vec![1.0, 0.0])).unwrap();
    assert!(tape.value(l).data()[0].is_finite());
}

#[test]
fn backward_requires_scalar() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::zeros(&[2, 2]));
    assert!(tape.backward(x).is_err());
}

#[test]
fn backward_visits_in_reverse_order() {
    // y = (x * x) + x reuses x twice: gradient 2x + 1 requires full accumulation.
    let mut tape = Tape::new();
    let x = tape.param(Tensor::vector(vec![3.0]).unwrap());
    let sq = tape.mul(x, x).unwrap();
    let y = tape.add(sq, x).unwrap();
    let s = tape.sum_all(y);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[7.0]);
}

#[test]
fn grad_check_linear_bce() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random(&[4, 3], &mut rng);
    let w = random(&[3, 1], &mut rng);
    let b = random(&[1], &mut rng);
    let labels = Arc::new(vec![1.0, 0.0, 1.0, 0.0]);
    let err = grad_check(
        |t, v| {
            let z = t.matmul(v[0], v[1])?;
            let z = t.add_row(z, v[2])?;
            let p = t.activation(Activation::Sigmoid, z)?;
            t.bce_loss(p, labels.clone())
        },
        &[x, w, b],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn grad_check_constant_function() {
    let x = Tensor::vector(vec![0.3, -0.2]).unwrap();
    let err = grad_check(
        |t, _| Ok(t.constant(Tensor::scalar(2.5))),
        &[x],
        1e-5,
    )
    .unwrap();
    assert_eq!(err, 0.0);
}

#[test]
fn grad_check_rejects_non_scalar_and_bad_eps() {
    let x = Tensor::vector(vec![0.3, -0.2]).unwrap();
    assert!(grad_check(|_, v| Ok(v[0]), std::slice::from_ref(&x), 1e-5).is_err());
    assert!(grad_check(|t, v| Ok(t.sum_all(v[0])), &[x], 1e-2).is_err());
}

/// Weighted sum with fixed random weights so every output coordinate matters.
fn probe_sum(t: &mut Tape, y: Var, seed: u64) -> crate::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = t.shape(y).to_vec();
    let w = t.constant(random(&shape, &mut rng));
    let m = t.mul(y, w)?;
    Ok(t.sum_all(m))
}

#[test]
fn grad_check_every_op() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = random(&[3, 4], &mut rng);
    let b = random(&[4, 2], &mut rng);
    let c = random(&[3, 4], &mut rng);
    let col = random(&[3, 1], &mut rng);
    let bias = random(&[4], &mut rng);
    let eps = 1e-5;
    type Case = Box<dyn Fn(&mut Tape, &[Var]) -> crate::Result<Var>>;
    let cases: Vec<(&str, Vec<Tensor>, Case)> = vec![
        ("matmul", vec![a.clone(), b.clone()], Box::new(|t, v| {
            let y = t.matmul(v[0], v[1])?;
            probe_sum(t, y, 1)
        })),
        ("add_row", vec![a.clone(), bias.clone()], Box::new(|t, v| {
            let y = t.add_row(v[0], v[1])?;
            probe_sum(t, y, 2)
        })),
        ("mul+add+scale", vec![a.clone(), c.clone()], Box::new(|t, v| {
            let m = t.mul(v[0], v[1])?;
            let s = t.scale(v[1], -1.7);
            let y = t.add(m, s)?;
            probe_sum(t, y, 3)
        })),
        ("sigmoid", vec![a.clone()], Box::new(|t, v| {
            let y = t.activation(Activation::Sigmoid, v[0])?;
            probe_sum(t, y, 4)
        })),
        ("leaky_relu", vec![a.clone()], Box::new(|t, v| {
            let y = t.activation(Activation::LeakyRelu(0.2), v[0])?;
            probe_sum(t, y, 5)
        })),
        ("elu", vec![a.clone()], Box::new(|t, v| {
            let y = t.activation(Activation::Elu, v[0])?;
            probe_sum(t, y, 6)
        })),
        ("masked_softmax", vec![random(&[3, 3], &mut rng)], Box::new(|t, v| {
            let mask = Arc::new(vec![true, false, true, true, true, false, false, true, true]);
            let y = t.masked_softmax(v[0], mask)?;
            probe_sum(t, y, 7)
        })),
        ("softmax_axis0", vec![c.clone()], Box::new(|t, v| {
            let y = t.softmax_axis0(v[0], Some(Arc::new(vec![true, false, true])))?;
            probe_sum(t, y, 8)
        })),
        ("ratio_axis0", vec![c.clone()], Box::new(|t, v| {
            let s = t.activation(Activation::Sigmoid, v[0])?;
            let y = t.ratio_axis0(s, None)?;
            probe_sum(t, y, 9)
        })),
        ("sum_axis0+transpose+reshape", vec![a.clone()], Box::new(|t, v| {
            let tr = t.transpose(v[0]);
            let r = t.reshape(tr, &[2, 6])?;
            let y = t.sum_axis0(r);
            probe_sum(t, y, 10)
        })),
        ("stack+concat", vec![a.clone(), c.clone()], Box::new(|t, v| {
            let s = t.stack_rows(&[v[0], v[1]])?;
            let k = t.concat_cols(&[v[0], v[1]])?;
            let y1 = probe_sum(t, s, 11)?;
            let y2 = probe_sum(t, k, 12)?;
            t.add(y1, y2)
        })),
        ("outer_add", vec![col.clone(), random(&[4, 1], &mut rng)], Box::new(|t, v| {
            let y = t.outer_add(v[0], v[1])?;
            let y = t.activation(Activation::LeakyRelu(0.2), y)?;
            probe_sum(t, y, 13)
        })),
        ("gather", vec![a.clone()], Box::new(|t, v| {
            let y = t.gather_rows(v[0], Arc::new(vec![2, 0, 2]))?;
            probe_sum(t, y, 14)
        })),
        ("row_dot+row_cosine", vec![a.clone(), c.clone()], Box::new(|t, v| {
            let d = t.row_dot(v[0], v[1])?;
            let k = t.row_cosine(v[0], v[1])?;
            let y = t.add(d, k)?;
            probe_sum(t, y, 15)
        })),
        ("segment_reduce", vec![random(&[6, 1], &mut rng)], Box::new(|t, v| {
            let off = Arc::new(vec![0, 2, 2, 6]);
            let s = t.segment_reduce(v[0], off.clone(), Reduce::Sum)?;
            let m = t.segment_reduce(v[0], off.clone(), Reduce::Mean)?;
            let x = t.segment_reduce(v[0], off, Reduce::Max)?;
            let y = t.concat_cols(&[s, m, x])?;
            probe_sum(t, y, 16)
        })),
        ("bce", vec![col.clone()], Box::new(|t, v| {
            let p = t.activation(Activation::Sigmoid, v[0])?;
            t.bce_loss(p, Arc::new(vec![1.0, 0.0, 1.0]))
        })),
    ];
    for (name, inputs, f) in cases {
        let err = grad_check(|t, v| f(t, v), &inputs, eps).unwrap();
        assert!(err < 1e-4, "{name}: {err}");
    }
}

#[test]
fn ratio_axis0_guard() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::matrix(2, 1, vec![1.0, -1.0]).unwrap());
    let y = tape.ratio_axis0(x, None).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0 / RATIO_FLOOR, -1.0 / RATIO_FLOOR]);
}

#[test]
fn gather_touches_only_used_rows() {
    let mut tape = Tape::new();
    let table = tape.param(Tensor::matrix(3, 2, vec![1.0; 6]).unwrap());
    let g = tape.gather_rows(table, Arc::new(vec![1])).unwrap();
    let s = tape.sum_all(g);
    let grads = tape.backward(s).unwrap();
    assert_eq!(grads.get(table).unwrap().data(), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
}

#[test]
fn ops_are_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random(&[64, 64], &mut rng);
    let b = random(&[64, 64], &mut rng);
    set_kernel_execution(crate::Execution::Sequential);
    let s = a.matmul(&b).unwrap();
    set_kernel_execution(crate::Execution::Parallel);
    let p = a.matmul(&b).unwrap();
    assert_eq!(s, p);
}

proptest! {
    #[test]
    fn matmul_identity(rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&[rows, cols], &mut rng);
        prop_assert_eq!(Tensor::eye(rows).matmul(&a).unwrap(), a.clone());
        prop_assert_eq!(a.matmul(&Tensor::eye(cols)).unwrap(), a);
    }

    #[test]
    fn masked_softmax_rows_normalised(n in 1usize..8, shift in -50.0f64..50.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scores = random(&[n, n], &mut rng);
        let mut mask: Vec<bool> = (0..n * n).map(|_| rng.random_bool(0.5)).collect();
        for i in 0..n { mask[i * n + i] = true; }
        let mask = Arc::new(mask);
        let mut shifted = scores.clone();
        for r in 0..n {
            for c in 0..n {
                shifted.data_mut()[r * n + c] += shift * (r as f64 + 1.0);
            }
        }
        let mut tape = Tape::new();
        let a = tape.constant(scores);
        let b = tape.constant(shifted);
        let ya = tape.masked_softmax(a, mask.clone()).unwrap();
        let yb = tape.masked_softmax(b, mask.clone()).unwrap();
        let (ya, yb) = (tape.value(ya), tape.value(yb));
        for r in 0..n {
            let s: f64 = ya.row(r).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            for c in 0..n {
                if !mask[r * n + c] { prop_assert_eq!(ya.get(r, c), 0.0); }
            }
        }
        prop_assert!(ya.max_abs_diff(yb) < 1e-12);
    }
}
