use super::*;
use crate::error::DarcError;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn tensor_rejects_inconsistent_shape() {
    assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
    assert!(Tensor::<f64>::new(vec![0, 3], vec![]).is_err());
}

#[test]
fn matmul_small_cases() {
    let mut tape = Tape::new();
    let eye = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let p = tape.matmul(eye, m).unwrap();
    assert_eq!(tape.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

    let a = tape.constant(t(&[1, 2], &[1.0, 2.0]));
    let b = tape.constant(t(&[2, 1], &[3.0, 4.0]));
    let p = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(p).data(), &[11.0]);

    assert!(matches!(tape.matmul(a, a), Err(DarcError::Dimension(_))));
}

#[test]
fn conv_identity_and_zero_kernels() {
    let mut rng = rand::rng();
    let x = Tensor::<f64>::uniform(&[2, 1, 4, 5], -1.0, 1.0, &mut rng);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let one = tape.constant(t(&[1, 1, 1, 1], &[1.0]));
    let y = tape.conv2d(xv, one, 1, 0).unwrap();
    assert_eq!(tape.value(y), &x);

    let zero = tape.constant(Tensor::zeros(&[3, 1, 3, 3]));
    let y = tape.conv2d(xv, zero, 1, 1).unwrap();
    assert_eq!(tape.shape(y), &[2, 3, 4, 5]);
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv_rejects_indivisible_groups() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::<f64>::zeros(&[1, 3, 4, 4]));
    let w = tape.constant(Tensor::zeros(&[4, 1, 3, 3]));
    assert!(matches!(tape.conv2d(x, w, 2, 1), Err(DarcError::Config(_))));
}

#[test]
fn elementwise_cases() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
    let r = tape.elementwise(ElementwiseOp::Relu, x, None).unwrap();
    assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);

    let zero = tape.constant(Tensor::scalar(0.0));
    let s = tape.elementwise(ElementwiseOp::Add, x, Some(zero)).unwrap();
    assert_eq!(tape.value(s).data(), tape.value(x).data());
    let s = tape.add(zero, x).unwrap();
    assert_eq!(tape.value(s).data(), tape.value(x).data());

    let other = tape.constant(Tensor::from_vec(vec![1.0, 2.0]));
    assert!(matches!(tape.add(x, other), Err(DarcError::Dimension(_))));
    assert!(tape.elementwise(ElementwiseOp::Relu, x, Some(x)).is_err());
}

#[test]
fn relu_subgradient_at_zero_is_zero() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
    let r = tape.relu(x).unwrap();
    let s = tape.sum(r).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0, 1.0]);
}

#[test]
fn loss_reference_values() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[2, 3], &[0.1, -0.4, 2.0, 1.0, 0.0, 3.0]));
    let mse = tape.loss(LossKind::MeanSquaredError, x, x).unwrap();
    assert_eq!(tape.value(mse).data(), &[0.0]);

    let k = 5;
    let logits = tape.constant(Tensor::filled(&[3, k], 0.7));
    let labels = tape.constant(Tensor::from_vec(vec![0.0, 4.0, 2.0]));
    let xe = tape.loss(LossKind::SoftmaxCrossEntropy, logits, labels).unwrap();
    assert!((tape.value(xe).data()[0] - (k as f64).ln()).abs() < 1e-14);
}

#[test]
fn cross_entropy_rejects_out_of_range_label() {
    let mut tape = Tape::<f64>::new();
    let logits = tape.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(
        tape.softmax_cross_entropy(logits, &[0, 3]),
        Err(DarcError::Data(_))
    ));
    let bad = tape.constant(Tensor::from_vec(vec![0.0, 1.5]));
    assert!(matches!(
        tape.loss(LossKind::SoftmaxCrossEntropy, logits, bad),
        Err(DarcError::Data(_))
    ));
}

#[test]
fn quadratic_grad_check_is_tight() {
    let x = Tensor::from_vec(vec![1.0, 2.0]);
    let err = grad_check(
        |tape, v| {
            let sq = tape.mul(v, v)?;
            tape.sum(sq)
        },
        &x,
        1e-4,
    )
    .unwrap();
    assert!(err <= 1e-8, "{err}");
    assert!(grad_check(|tape, v| tape.sum(v), &x, 0.5).is_err());
}

#[test]
fn backward_needs_scalar_root() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::from_vec(vec![1.0, 2.0]));
    assert!(tape.backward(x).is_err());
}

#[test]
fn mixture_one_hot_is_exact() {
    let mut rng = rand::rng();
    let mut tape = Tape::new();
    let y0 = tape.constant(Tensor::<f64>::uniform(&[2, 3], -1.0, 1.0, &mut rng));
    let y1 = tape.constant(Tensor::<f64>::uniform(&[2, 3], -1.0, 1.0, &mut rng));
    let alpha = tape.param(Tensor::from_vec(vec![0.0, 1.0]));
    let m = tape.mixture(alpha, &[(0, y0), (1, y1)]).unwrap();
    assert_eq!(tape.value(m).data(), tape.value(y1).data());
    let s = tape.sum(m).unwrap();
    tape.backward(s).unwrap();
    // the zero-weight term still reports its gradient
    let g = tape.grad(alpha).unwrap();
    let want0: f64 = tape.value(y0).data().iter().sum();
    assert!((g[0] - want0).abs() < 1e-12);
}

#[test]
fn works_in_single_precision() {
    let mut tape = Tape::<f32>::new();
    let a = tape.param(Tensor::new(vec![1, 2], vec![1.0f32, 2.0]).unwrap());
    let b = tape.constant(Tensor::new(vec![2, 1], vec![3.0f32, 4.0]).unwrap());
    let p = tape.matmul(a, b).unwrap();
    tape.backward(p).unwrap();
    assert_eq!(tape.value(p).data(), &[11.0f32]);
    assert_eq!(tape.grad(a).unwrap(), &[3.0f32, 4.0]);
}
