use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::StumError;
use crate::gradcheck::finite_diff_check;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = numel(shape);
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn brute_matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (p, q, r) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = Tensor::zeros(&[p, r]);
    for i in 0..p {
        for j in 0..r {
            let mut s = 0.0;
            for k in 0..q {
                s += a.get(&[i, k]) * b.get(&[k, j]);
            }
            out.set(&[i, j], s);
        }
    }
    out
}

fn eval2(a: &Tensor, b: &Tensor, f: impl Fn(&mut Tape, Var, Var) -> Result<Var>) -> Result<Tensor> {
    let mut t = Tape::new();
    let (x, y) = (t.constant(a.clone()), t.constant(b.clone()));
    let out = f(&mut t, x, y)?;
    Ok(t.value(out).clone())
}

fn eval1(a: &Tensor, f: impl Fn(&mut Tape, Var) -> Result<Var>) -> Result<Tensor> {
    let mut t = Tape::new();
    let x = t.constant(a.clone());
    let out = f(&mut t, x)?;
    Ok(t.value(out).clone())
}

#[test]
fn matmul_identity_and_hand_example() {
    let m = Tensor::matrix(&[&[0.5, -2.0], &[3.0, 7.0]]).unwrap();
    assert_eq!(eval2(&Tensor::eye(2), &m, |t, a, b| t.matmul(a, b)).unwrap(), m);

    let a = Tensor::matrix(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
    let b = Tensor::matrix(&[&[5.0], &[6.0]]).unwrap();
    let c = eval2(&a, &b, |t, a, b| t.matmul(a, b)).unwrap();
    assert_eq!(c.data(), &[17.0, 39.0]);
}

#[test]
fn matmul_rejects_inner_mismatch() {
    let a = Tensor::zeros(&[2, 3]);
    let err = eval2(&a, &a, |t, a, b| t.matmul(a, b)).unwrap_err();
    assert!(matches!(err, StumError::ShapeMismatch { .. }));
}

#[test]
fn matmul_broadcasts_batch_dims() {
    let a = random(&[3, 2, 4], 1);
    let b = random(&[4, 5], 2);
    let c = eval2(&a, &b, |t, a, b| t.matmul(a, b)).unwrap();
    assert_eq!(c.shape(), &[3, 2, 5]);
    for batch in 0..3 {
        let ab = Tensor::new(&[2, 4], a.data()[batch * 8..(batch + 1) * 8].to_vec()).unwrap();
        let expect = brute_matmul(&ab, &b);
        assert_eq!(&c.data()[batch * 10..(batch + 1) * 10], expect.data());
    }
}

#[test]
fn elementwise_examples() {
    let a = Tensor::vector(&[1.0, 2.0]);
    let b = Tensor::vector(&[3.0, 4.0]);
    assert_eq!(eval2(&a, &b, |t, a, b| t.add(a, b)).unwrap().data(), &[4.0, 6.0]);
    let ones = Tensor::ones(&[2]);
    assert_eq!(eval2(&a, &ones, |t, a, b| t.mul(a, b)).unwrap(), a);
    let v = Tensor::vector(&[2.0, 4.0]);
    assert_eq!(eval1(&v, |t, x| Ok(t.scale(x, 0.5))).unwrap().data(), &[1.0, 2.0]);
    let err = eval2(&a, &Tensor::zeros(&[3]), |t, a, b| t.sub(a, b)).unwrap_err();
    assert!(matches!(err, StumError::ShapeMismatch { .. }));
}

#[test]
fn activation_examples() {
    let x = Tensor::vector(&[-1.0, 0.0, 2.0]);
    assert_eq!(eval1(&x, |t, x| t.relu(x)).unwrap().data(), &[0.0, 0.0, 2.0]);
    assert_eq!(eval1(&Tensor::scalar(0.0), |t, x| t.sigmoid(x)).unwrap().item(), 0.5);
    let s = eval1(&Tensor::vector(&[0.0, 0.0]), |t, x| t.softmax(x, 0)).unwrap();
    assert_eq!(s.data(), &[0.5, 0.5]);
    let bad = Tensor::vector(&[f64::NAN]);
    assert!(matches!(
        eval1(&bad, |t, x| t.relu(x)),
        Err(StumError::NonFiniteInput(_))
    ));
    assert!(matches!(
        eval1(&x, |t, x| t.softmax(x, 1)),
        Err(StumError::AxisOutOfRange { .. })
    ));
}

#[test]
fn rms_norm_examples() {
    let x = Tensor::vector(&[3.0, 4.0]);
    let w = Tensor::ones(&[2]);
    let y = eval2(&x, &w, |t, x, w| t.rms_norm(x, w, 0.0, NormVariant::Rms)).unwrap();
    let root = 12.5f64.sqrt();
    assert!((y.data()[0] - 3.0 / root).abs() < 1e-15);
    assert!((y.data()[1] - 4.0 / root).abs() < 1e-15);
    assert!((y.data()[0] - 0.8485).abs() < 1e-4 && (y.data()[1] - 1.1314).abs() < 1e-4);

    for c in [-2.5, 0.1, 7.0] {
        let x = Tensor::full(&[4], c);
        let y = eval2(&x, &Tensor::ones(&[4]), |t, x, w| {
            t.rms_norm(x, w, 1e-14, NormVariant::Rms)
        })
        .unwrap();
        for v in y.data() {
            assert!((v - c.signum()).abs() < 1e-10, "{v}");
        }
    }

    let y = eval2(&random(&[3, 4], 5), &Tensor::zeros(&[4]), |t, x, w| {
        t.rms_norm(x, w, 1e-6, NormVariant::Rms)
    })
    .unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));

    // Literal variant divides by mean square without the root.
    let y = eval2(&x, &w, |t, x, w| t.rms_norm(x, w, 0.0, NormVariant::MeanSquare)).unwrap();
    assert!((y.data()[0] - 3.0 / 12.5).abs() < 1e-15);
}

#[test]
fn reduce_examples() {
    let x = Tensor::vector(&[1.0, 2.0, 3.0]);
    assert_eq!(eval1(&x, |t, x| Ok(t.sum(x))).unwrap().item(), 6.0);
    assert_eq!(eval1(&Tensor::zeros(&[5]), |t, x| Ok(t.mean(x))).unwrap().item(), 0.0);
    let y = Tensor::vector(&[-2.0, 2.0]);
    assert_eq!(eval1(&y, |t, x| Ok(t.abs_mean(x))).unwrap().item(), 2.0);
    let m = Tensor::matrix(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
    let s = eval1(&m, |t, x| t.reduce(ReduceKind::Sum, x, Some(0))).unwrap();
    assert_eq!(s.data(), &[4.0, 6.0]);
    assert!(matches!(
        eval1(&m, |t, x| t.reduce(ReduceKind::Mean, x, Some(2))),
        Err(StumError::AxisOutOfRange { .. })
    ));
}

#[test]
fn backward_examples() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::vector(&[0.2, -4.0, 9.0]), true);
    let loss = t.sum(x);
    t.backward(loss).unwrap();
    assert_eq!(t.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);

    let mut t = Tape::new();
    let x = t.leaf(Tensor::vector(&[-1.0, 2.0]), true);
    let r = t.relu(x).unwrap();
    let loss = t.sum(r);
    t.backward(loss).unwrap();
    assert_eq!(t.grad(x).unwrap().data(), &[0.0, 1.0]);
    let fd = finite_diff_check(
        |t, x| {
            let r = t.relu(x)?;
            Ok(t.sum(r))
        },
        &Tensor::vector(&[-1.0, 2.0]),
        1e-5,
    )
    .unwrap();
    assert!(fd < 1e-9);

    let mut t = Tape::new();
    let x = t.leaf(Tensor::vector(&[1.0, 2.0]), true);
    assert!(matches!(t.backward(x), Err(StumError::NotScalarLoss(_))));
}

#[test]
fn frozen_leaf_gets_no_grad() {
    let mut t = Tape::new();
    let w = t.leaf(Tensor::matrix(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap(), false);
    let x = t.leaf(Tensor::matrix(&[&[1.0], &[-1.0]]).unwrap(), true);
    let y = t.matmul(w, x).unwrap();
    let loss = t.sum(y);
    t.backward(loss).unwrap();
    assert!(t.grad(w).is_none());
    assert_eq!(t.grad(x).unwrap().data(), &[4.0, 6.0]);
}

#[test]
fn gradients_accumulate_over_reuse() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::vector(&[3.0]), true);
    let a = t.add(x, x).unwrap();
    let b = t.mul(a, x).unwrap();
    let loss = t.sum(b);
    t.backward(loss).unwrap();
    // d(2x²)/dx
    assert_eq!(t.grad(x).unwrap().data(), &[12.0]);
}

#[test]
fn axis_mix_matches_permute_matmul() {
    let x = random(&[2, 3, 4, 5], 11);
    let m = random(&[4, 4], 12);
    let mixed = eval2(&x, &m, |t, x, m| t.axis_mix(x, m, None, 2)).unwrap();
    let via = eval2(&x, &m, |t, x, m| {
        let p = t.permute(x, &[0, 1, 3, 2])?;
        let y = t.matmul(p, m)?;
        t.permute(y, &[0, 1, 3, 2])
    })
    .unwrap();
    assert!(mixed.max_abs_diff(&via) < 1e-14);
}

/// Builds `mix_update` either fused or from its constituent ops and returns
/// the output plus gradients of a weighted sum with respect to every input.
fn mix_update_case(fused: bool, axis: usize, gated: bool, with_prev: bool, act: Activation) -> Vec<Tensor> {
    let shape = [2, 3, 4, 5];
    let len = shape[axis];
    let mut t = Tape::new();
    let x = t.leaf(random(&shape, 21), true);
    let prev = with_prev.then(|| t.leaf(random(&shape, 22), true));
    let m = t.leaf(random(&[len, len], 23), true);
    let b = t.leaf(random(&[len], 24), true);
    let g = t.leaf(Tensor::scalar(0.35), true);
    let gate = gated.then_some(g);
    let y = if fused {
        t.mix_update(x, prev, m, Some(b), gate, axis, act).unwrap()
    } else {
        let input = match prev {
            Some(p) => t.add(x, p).unwrap(),
            None => x,
        };
        let mixed = t.axis_mix(input, m, Some(b), axis).unwrap();
        let fresh = t.activation(act, mixed).unwrap();
        match gate {
            Some(g) => t.lerp(prev, fresh, g).unwrap(),
            None => fresh,
        }
    };
    let loss = probe(&mut t, y, 25).unwrap();
    t.backward(loss).unwrap();
    let mut out = vec![t.value(y).clone()];
    for v in [Some(x), prev, Some(m), Some(b), gate].into_iter().flatten() {
        out.push(t.grad(v).cloned().unwrap());
    }
    out
}

#[test]
fn mix_update_matches_composition() {
    for axis in 1..4 {
        for gated in [true, false] {
            for with_prev in [true, false] {
                for act in [Activation::Relu, Activation::Identity] {
                    let fused = mix_update_case(true, axis, gated, with_prev, act);
                    let composed = mix_update_case(false, axis, gated, with_prev, act);
                    assert_eq!(fused.len(), composed.len());
                    for (k, (a, b)) in fused.iter().zip(&composed).enumerate() {
                        let tol = 1e-12 * (1.0 + b.data().iter().fold(0.0f64, |m, v| m.max(v.abs())));
                        assert!(
                            a.max_abs_diff(b) < tol,
                            "axis {axis} gated {gated} prev {with_prev} {act:?} item {k}: {}",
                            a.max_abs_diff(b)
                        );
                    }
                }
            }
        }
    }
}

#[test]
fn mix_update_rejects_bad_operands() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::zeros(&[2, 3, 4]));
    let square = t.constant(Tensor::zeros(&[3, 3]));
    let wide = t.constant(Tensor::zeros(&[3, 4]));
    let g = t.constant(Tensor::zeros(&[2]));
    assert!(t.mix_update(x, None, wide, None, None, 1, Activation::Relu).is_err());
    assert!(t
        .mix_update(x, None, square, None, Some(g), 1, Activation::Relu)
        .is_err());
    assert!(t
        .mix_update(x, None, square, None, None, 1, Activation::Sigmoid)
        .is_err());
    assert!(t
        .mix_update(x, None, square, None, None, 1, Activation::Identity)
        .is_ok());
}

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

/// Weighted sum so every output element carries a distinct cotangent.
fn probe(t: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let w = random(t.shape(y), seed);
    let wv = t.constant(w);
    let p = t.mul(y, wv)?;
    Ok(t.sum(p))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn matmul_agrees_with_triple_loop(seed in any::<u64>()) {
        let a = random(&[5, 5], seed);
        let b = random(&[5, 5], seed.wrapping_add(1));
        let c = eval2(&a, &b, |t, a, b| t.matmul(a, b)).unwrap();
        prop_assert!(c.max_abs_diff(&brute_matmul(&a, &b)) < 1e-12);
    }

    #[test]
    fn softmax_is_a_distribution(seed in any::<u64>(), axis in 0usize..3) {
        let x = random(&[3, 4, 5], seed).map(|v| 6.0 * v);
        let y = eval1(&x, |t, x| t.softmax(x, axis)).unwrap();
        prop_assert!(y.data().iter().all(|&v| v >= 0.0));
        let sums = eval1(&y, |t, y| t.reduce(ReduceKind::Sum, y, Some(axis))).unwrap();
        for s in sums.data() {
            prop_assert!((s - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn random_point_gradients(seed in any::<u64>()) {
        let x = random(&[3, 4], seed);
        let err = finite_diff_check(|t, x| {
            let w = t.constant(random(&[4], 99));
            let n = t.rms_norm(x, w, 1e-6, NormVariant::Rms)?;
            let s = t.sigmoid(n)?;
            let m = t.constant(random(&[4, 2], 98));
            let y = t.matmul(s, m)?;
            let sm = t.softmax(y, 1)?;
            probe(t, sm, 97)
        }, &x, H).unwrap();
        prop_assert!(err < TOL, "{}", err);
    }
}
