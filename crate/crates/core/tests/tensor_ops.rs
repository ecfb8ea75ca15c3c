use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use skipcross::tensor::{grad_check, Tape, Tensor, TensorError};

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::new(shape, v.to_vec()).unwrap()
}

const GRAD_TOL: f64 = 1e-4;
const EPS: f64 = 1e-6;

#[test]
fn conv2d_hand_example() {
    let tape = Tape::new();
    let x = tape.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let w = tape.constant(t(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let y = x.conv2d(w, None, 1, 0).unwrap();
    assert_eq!(y.shape(), vec![1, 1, 1, 1]);
    assert_eq!(y.value().data(), &[5.0]);
}

#[test]
fn conv2d_identity_kernel_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x0 = random(&[2, 1, 5, 7], &mut rng);
    let tape = Tape::new();
    let x = tape.constant(x0.clone());
    let w = tape.constant(t(&[1, 1, 1, 1], &[1.0]));
    let y = x.conv2d(w, None, 1, 0).unwrap();
    assert!(y.value().bitwise_eq(&x0));
}

#[test]
fn conv2d_output_extent_law() {
    let tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros(&[1, 2, 9, 7]));
    let w = tape.constant(Tensor::zeros(&[3, 2, 3, 3]));
    for (stride, pad) in [(1, 0), (1, 1), (2, 1), (3, 0)] {
        let y = x.conv2d(w, None, stride, pad).unwrap();
        let ho = (9 + 2 * pad - 3) / stride + 1;
        let wo = (7 + 2 * pad - 3) / stride + 1;
        assert_eq!(y.shape(), vec![1, 3, ho, wo]);
    }
}

#[test]
fn conv2d_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in 0..5 {
        let (stride, pad) = [(1, 0), (1, 1), (2, 1), (2, 0), (1, 2)][case];
        let x = random(&[2, 3, 5, 5], &mut rng);
        let w = random(&[4, 3, 3, 3], &mut rng);
        let b = random(&[4], &mut rng);
        let out_shape = {
            let ho = (5 + 2 * pad - 3) / stride + 1;
            vec![2, 4, ho, ho]
        };
        let coeff = random(&out_shape, &mut rng);
        let report = grad_check(
            |_, p| {
                p[0].conv2d(p[1], Some(p[2]), stride, pad)?
                    .weighted_sum(coeff.clone())
            },
            &[x, w, b],
            EPS,
            None,
            case as u64,
        )
        .unwrap();
        assert!(report.max_rel_error < GRAD_TOL, "case {case}: {report:?}");
    }
}

#[test]
fn conv2d_shape_mismatch_names_dimension() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(&[1, 3, 4, 4]));
    let w = tape.constant(Tensor::zeros(&[2, 2, 3, 3]));
    let err = x.conv2d(w, None, 1, 0).unwrap_err();
    assert_eq!(
        err,
        TensorError::ShapeMismatch {
            op: "conv2d",
            dim: "in_channels",
            expected: 3,
            got: 2
        }
    );
    assert!(err.to_string().contains("in_channels"));
}

#[test]
fn transposed_conv_hand_example() {
    let tape = Tape::new();
    let x = tape.constant(t(&[1, 1, 1, 1], &[2.0]));
    let w = tape.constant(t(&[1, 1, 2, 2], &[1.0; 4]));
    let y = x.conv_transpose2d(w, None, 2, 0, 0).unwrap();
    assert_eq!(y.shape(), vec![1, 1, 2, 2]);
    assert_eq!(y.value().data(), &[2.0, 2.0, 2.0, 2.0]);
}

#[test]
fn transposed_conv_output_extent_law() {
    let tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros(&[1, 4, 3, 5]));
    let w = tape.constant(Tensor::zeros(&[4, 2, 3, 3]));
    for (stride, pad) in [(1, 0), (2, 0), (2, 1), (3, 1)] {
        let y = x.conv_transpose2d(w, None, stride, pad, 0).unwrap();
        assert_eq!(
            y.shape(),
            vec![
                1,
                2,
                (3 - 1) * stride - 2 * pad + 3,
                (5 - 1) * stride - 2 * pad + 3
            ]
        );
    }
}

/// Transposed convolution forward against the input gradient of conv2d
/// with the same kernel.
#[allow(clippy::too_many_arguments)]
fn adjoint_gap(
    n: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    seed: u64,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = random(&[n, cin, h, w], &mut rng);
    let k0 = random(&[cout, cin, k, k], &mut rng);
    let tape = Tape::new();
    let x = tape.leaf(x0);
    let kern = tape.constant(k0.clone());
    let y = x.conv2d(kern, None, stride, pad).unwrap();
    let (_, _, ho, wo) = y.value().dims4("t").unwrap();
    let up = random(&y.shape(), &mut rng);
    let loss = y.weighted_sum(up.clone()).unwrap();
    tape.backward(loss).unwrap();
    let input_grad = x.grad().unwrap();

    let op_h = h - ((ho - 1) * stride + k - 2 * pad);
    let op_w = w - ((wo - 1) * stride + k - 2 * pad);
    assert_eq!(op_h, op_w, "test geometry must use equal output padding");
    let tape2 = Tape::new();
    let g = tape2.constant(up);
    let kern2 = tape2.constant(k0);
    let z = g.conv_transpose2d(kern2, None, stride, pad, op_h).unwrap();
    let z = z.value();
    assert_eq!(z.shape(), input_grad.shape());
    let scale = input_grad
        .data()
        .iter()
        .map(|v| v.abs())
        .fold(1e-12, f64::max);
    z.max_abs_diff(&input_grad) / scale
}

#[test]
fn transposed_conv_is_conv_input_gradient() {
    for (i, &(n, cin, cout, h, k, s, p)) in [
        (1, 1, 1, 4, 2, 2, 0),
        (2, 3, 4, 8, 3, 2, 1),
        (1, 2, 5, 7, 3, 1, 1),
        (2, 4, 2, 9, 3, 2, 0),
        (1, 3, 3, 6, 1, 1, 0),
    ]
    .iter()
    .enumerate()
    {
        let gap = adjoint_gap(n, cin, cout, h, h, k, s, p, i as u64);
        assert!(gap <= 1e-6, "case {i}: relative gap {gap}");
    }
}

#[test]
fn transposed_conv_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..5 {
        let (stride, pad, opad) = [(2, 1, 1), (2, 0, 0), (1, 1, 0), (2, 1, 0), (3, 1, 2)][case];
        let x = random(&[2, 3, 3, 4], &mut rng);
        let w = random(&[3, 2, 3, 3], &mut rng);
        let b = random(&[2], &mut rng);
        let oh = (3 - 1) * stride + 3 + opad - 2 * pad;
        let ow = (4 - 1) * stride + 3 + opad - 2 * pad;
        let coeff = random(&[2, 2, oh, ow], &mut rng);
        let report = grad_check(
            |_, p| {
                p[0].conv_transpose2d(p[1], Some(p[2]), stride, pad, opad)?
                    .weighted_sum(coeff.clone())
            },
            &[x, w, b],
            EPS,
            None,
            case as u64,
        )
        .unwrap();
        assert!(report.max_rel_error < GRAD_TOL, "case {case}: {report:?}");
    }
}

#[test]
fn maxpool_hand_example_and_gradient_routing() {
    let tape = Tape::new();
    let x = tape.leaf(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let y = x.maxpool2d().unwrap();
    assert_eq!(y.value().data(), &[4.0]);
    let loss = y.weighted_sum(Tensor::full(&[1, 1, 1, 1], 1.0)).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(x.grad().unwrap().data(), &[0.0, 0.0, 0.0, 1.0]);
}

#[test]
fn maxpool_constant_input_routes_to_window_origin() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::full(&[1, 2, 4, 4], 3.0));
    let y = x.maxpool2d().unwrap();
    assert!(y.value().data().iter().all(|&v| v == 3.0));
    let loss = y.weighted_sum(Tensor::full(&[1, 2, 2, 2], 1.0)).unwrap();
    tape.backward(loss).unwrap();
    let g = x.grad().unwrap();
    for c in 0..2 {
        for yy in 0..4 {
            for xx in 0..4 {
                let expect = if yy % 2 == 0 && xx % 2 == 0 { 1.0 } else { 0.0 };
                assert_eq!(g.data()[(c * 4 + yy) * 4 + xx], expect);
            }
        }
    }
}

#[test]
fn maxpool_shape_law_and_odd_extent() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let tape = Tape::new();
    let x = tape.constant(random(&[2, 3, 8, 8], &mut rng));
    assert_eq!(x.maxpool2d().unwrap().shape(), vec![2, 3, 4, 4]);
    let odd = tape.constant(Tensor::zeros(&[1, 1, 4, 5]));
    let err = odd.maxpool2d().unwrap_err();
    assert!(err.to_string().contains("pad"), "{err}");
}

#[test]
fn maxpool_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..5 {
        let x = random(&[2, 2, 6, 4], &mut rng);
        let coeff = random(&[2, 2, 3, 2], &mut rng);
        let report = grad_check(
            |_, p| p[0].maxpool2d()?.weighted_sum(coeff.clone()),
            &[x],
            EPS,
            None,
            case,
        )
        .unwrap();
        assert!(report.max_rel_error < GRAD_TOL, "case {case}: {report:?}");
    }
}

#[test]
fn relu_values() {
    let tape = Tape::new();
    let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
    assert_eq!(x.relu().value().data(), &[0.0, 0.0, 2.0]);
}

#[test]
fn scale_add_product_rule() {
    let tape = Tape::new();
    let a = tape.leaf(t(&[1], &[3.0]));
    let w = tape.leaf(Tensor::scalar(0.5));
    let b = tape.leaf(t(&[1], &[5.0]));
    let y = a.scale_add(w, b).unwrap();
    assert_eq!(y.value().data(), &[5.5]);
    tape.backward(y.weighted_sum(t(&[1], &[1.0])).unwrap())
        .unwrap();
    assert_eq!(w.grad().unwrap().item(), 5.0);
    assert_eq!(a.grad().unwrap().data(), &[1.0]);
    assert_eq!(b.grad().unwrap().data(), &[0.5]);
}

#[test]
fn scale_add_with_zero_weight_leaves_a_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a0 = random(&[1, 2, 3, 3], &mut rng);
    let tape = Tape::new();
    let a = tape.leaf(a0.clone());
    let w = tape.leaf(Tensor::scalar(0.0));
    let b = tape.leaf(random(&[1, 2, 3, 3], &mut rng));
    let y = a.scale_add(w, b).unwrap();
    assert!(y.value().bitwise_eq(&a0));
    tape.backward(y.weighted_sum(Tensor::full(&[1, 2, 3, 3], 1.0)).unwrap())
        .unwrap();
    assert!(b.grad().unwrap().data().iter().all(|&g| g == 0.0));
}

#[test]
fn elementwise_shape_mismatch() {
    let tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(&[1, 2, 3, 3]));
    let b = tape.constant(Tensor::zeros(&[1, 2, 3, 4]));
    let w = tape.constant(Tensor::scalar(1.0));
    assert!(matches!(
        a.add(b),
        Err(TensorError::ShapeMismatch { dim: "width", .. })
    ));
    assert!(matches!(
        a.scale_add(w, b),
        Err(TensorError::ShapeMismatch { .. })
    ));
    let not_scalar = tape.constant(Tensor::zeros(&[2]));
    assert!(a.scale_add(not_scalar, a).is_err());
}

#[test]
fn elementwise_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for case in 0..5 {
        let a = random(&[1, 2, 3, 3], &mut rng);
        let b = random(&[1, 2, 3, 3], &mut rng);
        let w = Tensor::scalar(rng.random_range(-1.0..1.0));
        let coeff = random(&[1, 2, 3, 3], &mut rng);
        let report = grad_check(
            |_, p| {
                let s = p[0].scale_add(p[2], p[1])?;
                let r = s.relu().add(p[0])?.scale(p[2])?.mul_const(1.5);
                r.weighted_sum(coeff.clone())
            },
            &[a, b, w],
            EPS,
            None,
            case,
        )
        .unwrap();
        assert!(report.max_rel_error < GRAD_TOL, "case {case}: {report:?}");
    }
}

#[test]
fn cross_entropy_uniform_logits_is_ln2() {
    let tape = Tape::new();
    let logits = tape.constant(Tensor::full(&[2, 2, 3, 3], 0.7));
    let target: Vec<u8> = (0..18).map(|i| (i % 2) as u8).collect();
    let loss = logits.softmax_cross_entropy(&target).unwrap();
    assert!((loss.value().item() - std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn cross_entropy_confident_pixel() {
    let tape = Tape::new();
    let logits = tape.constant(t(&[1, 2, 1, 1], &[0.0, 10.0]));
    let loss = logits.softmax_cross_entropy(&[1]).unwrap().value().item();
    let expect = (1.0 + (-10.0f64).exp()).ln();
    assert!((loss - expect).abs() < 1e-15);
    assert!((loss - 4.54e-5).abs() < 1e-7);
}

#[test]
fn cross_entropy_is_stable_for_large_logits() {
    let tape = Tape::<f32>::new();
    let logits = tape.constant(Tensor::new(&[1, 2, 1, 1], vec![1000.0, -1000.0]).unwrap());
    let loss = logits.softmax_cross_entropy(&[0]).unwrap().value().item();
    assert!(loss.is_finite() && loss.abs() < 1e-6);
}

#[test]
fn cross_entropy_rejects_bad_targets() {
    let tape = Tape::<f64>::new();
    let logits = tape.constant(Tensor::zeros(&[1, 2, 2, 2]));
    let err = logits.softmax_cross_entropy(&[0, 1, 2, 0]).unwrap_err();
    assert_eq!(
        err,
        TensorError::InvalidTarget {
            value: 2,
            index: 2,
            classes: 2
        }
    );
    assert!(logits.softmax_cross_entropy(&[0, 1, 1]).is_err());
}

#[test]
fn cross_entropy_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for case in 0..5 {
        let logits = Tensor::from_fn(&[2, 2, 3, 4], |_| rng.random_range(-3.0..3.0));
        let target: Vec<u8> = (0..24).map(|_| rng.random_range(0..2u8)).collect();
        let report = grad_check(
            |_, p| p[0].softmax_cross_entropy(&target),
            &[logits],
            EPS,
            None,
            case,
        )
        .unwrap();
        assert!(report.max_rel_error < GRAD_TOL, "case {case}: {report:?}");
    }
}

#[test]
fn backward_product_rule_and_accumulation() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(3.0));
    let w = tape.leaf(Tensor::scalar(2.0));
    let y = x.scale(w).unwrap();
    tape.backward(y).unwrap();
    assert_eq!(w.grad().unwrap().item(), 3.0);
    assert_eq!(x.grad().unwrap().item(), 2.0);
    tape.backward(y).unwrap();
    assert_eq!(w.grad().unwrap().item(), 6.0);
    assert_eq!(x.grad().unwrap().item(), 4.0);
}

#[test]
fn backward_requires_scalar_loss() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::<f64>::zeros(&[2, 2]));
    let err = tape.backward(x.relu()).unwrap_err();
    assert_eq!(err, TensorError::NotScalar { shape: vec![2, 2] });
}

#[test]
fn backward_rejects_foreign_tape() {
    let a = Tape::<f64>::new();
    let b = Tape::<f64>::new();
    let x = a.leaf(Tensor::scalar(1.0));
    assert!(matches!(
        b.backward(x),
        Err(TensorError::ForeignTape { .. })
    ));
}

#[test]
fn conv_relu_pool_loss_chain() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for case in 0..5 {
        let x = random(&[2, 2, 8, 8], &mut rng);
        let w = random(&[3, 2, 3, 3], &mut rng);
        let b = random(&[3], &mut rng);
        let head = random(&[2, 3, 1, 1], &mut rng);
        let target: Vec<u8> = (0..32).map(|_| rng.random_range(0..2u8)).collect();
        let report = grad_check(
            |_, p| {
                p[0].conv2d(p[1], Some(p[2]), 1, 1)?
                    .relu()
                    .maxpool2d()?
                    .conv2d(p[3], None, 1, 0)?
                    .softmax_cross_entropy(&target)
            },
            &[x, w, b, head],
            EPS,
            None,
            case,
        )
        .unwrap();
        assert!(report.max_rel_error < GRAD_TOL, "case {case}: {report:?}");
    }
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_fn(&[2, 3, 16, 16], |_| {
            rng.random_range(-1.0..1.0)
        }));
        let w = tape.constant(Tensor::from_fn(&[8, 3, 3, 3], |_| {
            rng.random_range(-1.0..1.0)
        }));
        let up = tape.constant(Tensor::from_fn(&[8, 4, 3, 3], |_| {
            rng.random_range(-1.0..1.0)
        }));
        let y = x.conv2d(w, None, 2, 1).unwrap().relu().maxpool2d().unwrap();
        let z = y.conv_transpose2d(up, None, 2, 1, 1).unwrap();
        (*z.value()).clone()
    };
    assert!(run().bitwise_eq(&run()));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn adjoint_identity_holds(
        n in 1usize..3,
        cin in 1usize..4,
        cout in 1usize..4,
        h in 4usize..10,
        k in 1usize..4,
        stride in 1usize..3,
        pad in 0usize..2,
        seed in any::<u64>(),
    ) {
        prop_assume!(k <= h + 2 * pad);
        let ho = (h + 2 * pad - k) / stride + 1;
        let op = h - ((ho - 1) * stride + k - 2 * pad);
        prop_assume!(op < stride);
        prop_assert!(adjoint_gap(n, cin, cout, h, h, k, stride, pad, seed) <= 1e-6);
    }

    #[test]
    fn gradient_accumulation_is_additive(seed in any::<u64>(), passes in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = random(&[1, 2, 4, 4], &mut rng);
        let w0 = random(&[2, 2, 3, 3], &mut rng);
        let tape = Tape::new();
        let x = tape.constant(x0);
        let w = tape.leaf(w0);
        let loss = x.conv2d(w, None, 1, 1).unwrap().relu()
            .weighted_sum(Tensor::full(&[1, 2, 4, 4], 0.5)).unwrap();
        tape.backward(loss).unwrap();
        let once = w.grad().unwrap();
        for _ in 1..passes {
            tape.backward(loss).unwrap();
        }
        let many = w.grad().unwrap();
        for (a, b) in once.data().iter().zip(many.data()) {
            prop_assert!((a * passes as f64 - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }
}

#[test]
fn gradcheck_skips_coordinates_on_a_kink() {
    let x = Tensor::new(&[1, 1, 1, 3], vec![0.0, 0.5, -0.5]).unwrap();
    let coeff = Tensor::new(&[1, 1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap();
    let report = grad_check(
        |_, p| p[0].relu().weighted_sum(coeff.clone()),
        &[x],
        EPS,
        None,
        0,
    )
    .unwrap();
    assert_eq!((report.kinks, report.checked), (1, 2));
    assert!(report.max_rel_error < 1e-9);
}
