use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::Tensor;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, data).unwrap()
}

#[test]
fn matmul_examples() {
    let tape = Tape::<f64>::new();
    let eye = tape.constant(Tensor::identity(2));
    let col = tape.constant(t(&[2, 1], &[5.0, 6.0]));
    let out = tape.matmul(eye, col).unwrap();
    assert_eq!(tape.value(out).data(), &[5.0, 6.0]);

    let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let out = tape.matmul(a, col).unwrap();
    assert_eq!(tape.value(out).data(), &[17.0, 39.0]);

    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[4, 2]));
    let err = tape.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
}

#[test]
fn softmax_examples() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(t(&[3], &[0.0, 0.0, 0.0]));
    let y = tape.softmax(x, 0).unwrap();
    for &v in tape.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let x = tape.constant(t(&[2], &[1000.0, 0.0]));
    let y = tape.softmax(x, 0).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, 0.0]);

    let x = tape.constant(t(&[2], &[2f64.ln(), 0.0]));
    let y = tape.softmax(x, 0).unwrap();
    let v = tape.value(y);
    assert!((v.data()[0] - 2.0 / 3.0).abs() < 1e-12);
    assert!((v.data()[1] - 1.0 / 3.0).abs() < 1e-12);

    assert!(tape.softmax(x, 1).is_err());
}

#[test]
fn softmax_along_leading_axis() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(t(&[2, 2], &[0.0, 5.0, 0.0, 5.0]));
    let y = tape.softmax(x, 0).unwrap();
    assert_eq!(tape.value(y).data(), &[0.5, 0.5, 0.5, 0.5]);
}

#[test]
fn attention_examples() {
    let tape = Tape::<f64>::new();
    let q = tape.constant(t(&[1, 2], &[0.3, -1.0]));
    let k = tape.constant(t(&[1, 2], &[2.0, 0.5]));
    let v = tape.constant(t(&[1, 2], &[7.0, -3.0]));
    let out = attention(&tape, q, k, v, &Tensor::zeros(&[1, 1])).unwrap();
    assert_eq!(tape.value(out).data(), &[7.0, -3.0]);

    // Fully masked row -> zero row.
    let q = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let k = tape.constant(t(&[2, 2], &[0.5, 0.1, -0.2, 0.3]));
    let v = tape.constant(t(&[2, 2], &[1.0, 1.0, 2.0, -2.0]));
    let mask = t(&[2, 2], &[f64::NEG_INFINITY, f64::NEG_INFINITY, 0.0, 0.0]);
    let out = attention(&tape, q, k, v, &mask).unwrap();
    assert_eq!(tape.value(out).row(0), &[0.0, 0.0]);
    assert!(tape.value(out).row(1).iter().all(|x| x.abs() > 0.0));

    // Causal 2x2: row 0 sees only v0.
    let out = attention(&tape, q, k, v, &causal_mask(2)).unwrap();
    assert_eq!(tape.value(out).row(0), &[1.0, 1.0]);

    let k3 = tape.constant(Tensor::zeros(&[2, 3]));
    assert!(attention(&tape, q, k3, v, &Tensor::zeros(&[2, 2])).is_err());
}

#[test]
fn layer_norm_examples() {
    let tape = Tape::<f64>::new();
    let ones = tape.constant(Tensor::ones(&[3]));
    let zeros = tape.constant(Tensor::zeros(&[3]));
    let x = tape.constant(t(&[1, 3], &[4.0, 4.0, 4.0]));
    let y = tape.layer_norm(x, ones, zeros, 1e-5).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0, 0.0, 0.0]);

    let g2 = tape.constant(Tensor::ones(&[2]));
    let b2 = tape.constant(Tensor::zeros(&[2]));
    let x = tape.constant(t(&[1, 2], &[1.0, 3.0]));
    let y = tape.layer_norm(x, g2, b2, 1e-12).unwrap();
    {
        let v = tape.value(y);
        assert!((v.data()[0] + 1.0).abs() < 1e-9 && (v.data()[1] - 1.0).abs() < 1e-9);
    }

    let g0 = tape.constant(Tensor::zeros(&[2]));
    let b5 = tape.constant(Tensor::full(&[2], 5.0));
    let y = tape.layer_norm(x, g0, b5, 1e-5).unwrap();
    assert_eq!(tape.value(y).data(), &[5.0, 5.0]);
}

#[test]
fn backward_examples() {
    let tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::scalar(3.0));
    let loss = tape.mul(x, x).unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(x).unwrap().item(), 6.0);

    let tape = Tape::<f64>::new();
    let x = tape.leaf(t(&[4], &[0.1, -2.0, 3.0, 0.5]));
    let s = tape.softmax(x, 0).unwrap();
    let loss = tape.sum(s).unwrap();
    let g = tape.backward(loss).unwrap();
    assert!(g.get(x).unwrap().data().iter().all(|v| v.abs() < 1e-15));
}

#[test]
fn backward_errors() {
    let tape = Tape::<f64>::new();
    let x = tape.leaf(t(&[2], &[1.0, 2.0]));
    assert!(tape.backward(x).is_err(), "non-scalar loss");

    let tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::scalar(2.0));
    let y = tape.square(x).unwrap();
    tape.backward(y).unwrap();
    assert!(
        matches!(tape.backward(y), Err(crate::Error::Tape(_))),
        "stale tape"
    );
}

#[test]
fn unused_leaf_gets_exact_zero() {
    let mut store = ParamStore::<f64>::new();
    let used = store.add("used", Tensor::scalar(2.0));
    let unused = store.add("unused", t(&[2], &[1.0, 1.0]));
    let tape = Tape::new();
    let u = tape.param(&store, used);
    let _ = tape.param(&store, unused);
    let loss = tape.square(u).unwrap();
    let g = tape.backward(loss).unwrap();
    store.zero_grad();
    g.accumulate_into(&mut store);
    assert_eq!(store.get(used).grad.item(), 4.0);
    assert_eq!(store.get(unused).grad.data(), &[0.0, 0.0]);
}

#[test]
fn nan_forward_is_an_error() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(t(&[1], &[-1.0]));
    assert!(matches!(tape.ln(x), Err(crate::Error::NonFinite { .. })));
}

#[test]
fn gradcheck_identity_is_exact() {
    // Dyadic point and step: every difference is exact.
    let x = t(&[3], &[1.0, 2.5, -3.0]);
    let err = check_gradients(|t, v| t.sum(v[0]), &[x], 1.0 / 65536.0).unwrap();
    assert_eq!(err, 0.0);
}

#[test]
fn gradcheck_matmul_and_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = Tensor::<f64>::randn(&[3, 3], 1.0, &mut rng);
    let b = Tensor::<f64>::randn(&[3, 3], 1.0, &mut rng);
    let w = Tensor::<f64>::randn(&[3, 3], 1.0, &mut rng);
    let err = check_gradients(
        |t, v| {
            let p = t.matmul(v[0], v[1])?;
            let wc = t.constant(w.clone());
            t.sum(t.mul(p, wc)?)
        },
        &[a, b],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "matmul err {err}");

    let x = Tensor::<f64>::randn(&[8], 1.0, &mut rng);
    let w = Tensor::<f64>::randn(&[8], 1.0, &mut rng);
    let err = check_gradients(
        |t, v| {
            let s = t.softmax(v[0], 0)?;
            let wc = t.constant(w.clone());
            t.sum(t.mul(s, wc)?)
        },
        &[x],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "softmax err {err}");
}

#[test]
fn attention_is_causal_under_perturbation() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::<f64>::randn(&[6, 4], 1.0, &mut rng);
    let run = |x: &Tensor<f64>| {
        let tape = Tape::new();
        let v = tape.constant(x.clone());
        let out = attention(&tape, v, v, v, &causal_mask(6)).unwrap();
        let r = tape.value(out).clone();
        r
    };
    let base = run(&x);
    for j in 0..6 {
        let mut p = x.clone();
        p.data_mut()[j * 4] += 0.5;
        let out = run(&p);
        for i in 0..j {
            for c in 0..4 {
                assert!((out.at(i, c) - base.at(i, c)).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn replay_is_bit_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::<f32>::randn(&[4, 8], 1.0, &mut rng);
        let tape = Tape::new();
        let v = tape.constant(x);
        let s = tape.softmax(v, 1).unwrap();
        let out = tape.value(s).clone();
        out
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(data in prop::collection::vec(-50.0f64..50.0, 12)) {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![3, 4], data).unwrap());
        let y = tape.softmax(x, 1).unwrap();
        let v = tape.value(y);
        for r in 0..3 {
            let s: f64 = v.row(r).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
            prop_assert!(v.row(r).iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn weighted_softmax_matches_masked_softmax(
        data in prop::collection::vec(-5.0f64..5.0, 9),
        mask in prop::collection::vec(any::<bool>(), 9),
    ) {
        let tape = Tape::<f64>::new();
        let s = tape.constant(Tensor::new(vec![3, 3], data.clone()).unwrap());
        let w = tape.constant(Tensor::new(vec![3, 3], mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect()).unwrap());
        let y = tape.weighted_softmax(s, w).unwrap();
        let y = tape.value(y);
        for r in 0..3 {
            let allowed: Vec<usize> = (0..3).filter(|&c| mask[r * 3 + c]).collect();
            let z: f64 = allowed.iter().map(|&c| data[r * 3 + c].exp()).sum();
            for c in 0..3 {
                let expect = if mask[r * 3 + c] { data[r * 3 + c].exp() / z } else { 0.0 };
                prop_assert!((y.at(r, c) - expect).abs() < 1e-12);
            }
        }
    }
}
