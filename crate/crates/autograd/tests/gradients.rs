use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use reflect_autograd::gradcheck::{check, uniform, GradCheckOptions};
use reflect_autograd::{Activation, Reduction, Tape, Tensor};

const TOL: f64 = 1e-4;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random values in [-1, 1] kept away from the origin, where relu-like
/// kinks would make a finite difference meaningless.
fn away_from_kink(shape: &[usize], seed: u64) -> Tensor<f64> {
    uniform(shape, -1.0, 1.0, &mut rng(seed)).map(|x| if x.abs() < 0.05 { x + 0.1 } else { x })
}

fn assert_grad<F>(name: &str, inputs: &[Tensor<f64>], f: F)
where
    F: Fn(&mut Tape<f64>, &[reflect_autograd::Var]) -> reflect_autograd::Result<reflect_autograd::Var>,
{
    let report = check(inputs, f, &GradCheckOptions::default()).unwrap();
    assert!(
        report.max_rel_error < TOL,
        "{name}: max relative error {:.3e}",
        report.max_rel_error
    );
}

#[test]
fn elementwise_gradients() {
    let a = uniform(&[2, 3], -1.0, 1.0, &mut rng(1));
    let b = uniform(&[2, 3], 0.5, 1.5, &mut rng(2));
    assert_grad("add", &[a.clone(), b.clone()], |t, v| t.add(v[0], v[1]));
    assert_grad("sub", &[a.clone(), b.clone()], |t, v| t.sub(v[0], v[1]));
    assert_grad("mul", &[a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]));
    assert_grad("div", &[a.clone(), b.clone()], |t, v| t.div(v[0], v[1]));
    let row = uniform(&[1, 3], 0.5, 1.5, &mut rng(3));
    assert_grad("mul broadcast", &[a.clone(), row.clone()], |t, v| t.mul(v[0], v[1]));
    assert_grad("div broadcast", &[a.clone(), row], |t, v| t.div(v[0], v[1]));
    assert_grad("add_scalar", &[a.clone()], |t, v| t.add_scalar(v[0], 0.3));
    assert_grad("mul_scalar", &[a.clone()], |t, v| t.mul_scalar(v[0], -1.7));
    assert_grad("div_scalar", &[a.clone()], |t, v| t.div_scalar(v[0], 255.0));
    assert_grad("square", &[a.clone()], |t, v| t.square(v[0]));
    assert_grad("exp", &[a.clone()], |t, v| t.exp(v[0]));
    assert_grad("abs", &[away_from_kink(&[2, 3], 4)], |t, v| t.abs(v[0]));
    assert_grad("log_clamped", &[b], |t, v| t.log_clamped(v[0], 1e-7));
}

#[test]
fn mul_gradient_scalar_example() {
    let inputs = [Tensor::scalar(2.0), Tensor::scalar(3.0)];
    let report = check(&inputs, |t, v| t.mul(v[0], v[1]), &GradCheckOptions::default()).unwrap();
    assert!(report.max_abs_error < 1e-8);
}

#[test]
fn activation_gradients() {
    let x = away_from_kink(&[1, 2, 3, 3], 5);
    for kind in [Activation::Relu, Activation::LEAKY, Activation::Sigmoid, Activation::Tanh] {
        assert_grad(&format!("{kind:?}"), &[x.clone()], move |t, v| t.activation(kind, v[0]));
    }
}

#[test]
fn conv2d_gradients() {
    let x = uniform(&[1, 1, 5, 5], -1.0, 1.0, &mut rng(6));
    let k = uniform(&[2, 1, 3, 3], -1.0, 1.0, &mut rng(7));
    assert_grad("conv2d kernel", &[x.clone(), k.clone()], |t, v| {
        t.conv2d(v[0], v[1], None, 1, 0)
    });
    let x = uniform(&[2, 3, 6, 6], -1.0, 1.0, &mut rng(8));
    let k = uniform(&[4, 3, 3, 3], -1.0, 1.0, &mut rng(9));
    let b = uniform(&[4], -1.0, 1.0, &mut rng(10));
    assert_grad("conv2d padded", &[x.clone(), k.clone(), b.clone()], |t, v| {
        t.conv2d(v[0], v[1], Some(v[2]), 1, 1)
    });
    let x = uniform(&[1, 3, 7, 7], -1.0, 1.0, &mut rng(11));
    assert_grad("conv2d strided", &[x, k, b], |t, v| t.conv2d(v[0], v[1], Some(v[2]), 2, 1));
}

#[test]
fn spatial_gradients() {
    let x = uniform(&[1, 2, 3, 3], -1.0, 1.0, &mut rng(12));
    assert_grad("upsample", &[x.clone()], |t, v| t.upsample_nearest2x(v[0]));
    assert_grad("pad_replicate", &[x.clone()], |t, v| t.pad_replicate_to_multiple(v[0], 4));
    let y = uniform(&[1, 2, 4, 6], -1.0, 1.0, &mut rng(13));
    assert_grad("avg_pool", &[y.clone()], |t, v| t.avg_pool2x(v[0]));
    let z = uniform(&[1, 3, 4, 6], -1.0, 1.0, &mut rng(14));
    assert_grad("concat", &[y, z], |t, v| t.concat_channels(v[0], v[1]));
    assert_grad("reshape", &[x], |t, v| t.reshape(v[0], &[2, 9]));
}

#[test]
fn softmax_jacobian() {
    let x = uniform(&[1, 3, 2, 2], -1.0, 1.0, &mut rng(15));
    assert_grad("softmax", &[x], |t, v| t.softmax_channels(v[0]));
}

#[test]
fn reduction_gradients() {
    let x = uniform(&[2, 3, 4], -1.0, 1.0, &mut rng(16));
    assert_grad("sum", &[x.clone()], |t, v| t.sum(v[0]));
    assert_grad("mean", &[x.clone()], |t, v| t.mean(v[0]));
    assert_grad("mean axes", &[x.clone()], |t, v| t.reduce(Reduction::Mean, v[0], &[0, 2]));
    assert_grad("sum axis", &[x], |t, v| t.reduce(Reduction::Sum, v[0], &[1]));
}

#[test]
fn mean_gradient_is_one_over_n() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::from_fn([7], |i| i as f64));
    let m = tape.mean(x).unwrap();
    let g = tape.backward(m).unwrap();
    assert!(g.get(x).unwrap().data().iter().all(|&v| (v - 1.0 / 7.0).abs() < 1e-15));
}

#[test]
fn scalar_leaf_loss() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::scalar(4.0f64));
    let g = tape.backward(x).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1.0]);
}

#[test]
fn bilinear_loss_gradient() {
    let mut tape = Tape::new();
    let a = tape.param(Tensor::from_fn([5], |i| i as f64 - 2.0));
    let b = tape.param(Tensor::from_fn([5], |i| (i * i) as f64));
    let p = tape.mul(a, b).unwrap();
    let s = tape.sum(p).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(a).unwrap(), tape.value(b));
}

#[test]
fn non_scalar_backward_is_rejected() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::<f64>::zeros([3]));
    assert!(matches!(tape.backward(x), Err(reflect_autograd::Error::Shape(_))));
}

#[test]
fn constants_get_no_gradient() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::<f64>::ones([3]));
    let c = tape.constant(Tensor::<f64>::ones([3]));
    let y = tape.mul(x, c).unwrap();
    let s = tape.sum(y).unwrap();
    let g = tape.backward(s).unwrap();
    assert!(g.get(c).is_none());
    assert!(g.get(x).is_some());
}

#[test]
fn fault_injection_is_detected() {
    let fault = reflect_autograd::FaultInjection {
        op: "conv2d".into(),
        scale: 1.5,
    };
    let inputs = [
        uniform(&[1, 1, 5, 5], -1.0, 1.0, &mut rng(17)),
        uniform(&[1, 1, 3, 3], -1.0, 1.0, &mut rng(18)),
    ];
    let mut tape = Tape::with_fault(Some(fault));
    let a = tape.param(inputs[0].clone());
    let b = tape.param(inputs[1].clone());
    let y = tape.conv2d(a, b, None, 1, 1).unwrap();
    let s = tape.sum(y).unwrap();
    let faulty = tape.backward(s).unwrap().get(b).unwrap().clone();
    let mut clean_tape = Tape::new();
    let a = clean_tape.param(inputs[0].clone());
    let b = clean_tape.param(inputs[1].clone());
    let y = clean_tape.conv2d(a, b, None, 1, 1).unwrap();
    let s = clean_tape.sum(y).unwrap();
    let clean = clean_tape.backward(s).unwrap().get(b).unwrap().clone();
    assert_eq!(faulty, clean.scale(1.5));
}

fn conv_out(x: &Tensor<f64>, k: &Tensor<f64>) -> Tensor<f64> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let kv = tape.constant(k.clone());
    let y = tape.conv2d(xv, kv, None, 1, 1).unwrap();
    tape.value(y).clone()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn softmax_is_a_distribution(seed in any::<u64>(), scale in 0.1f64..10.0) {
        let x = uniform(&[2, 4, 3, 3], -scale, scale, &mut rng(seed));
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let p = tape.softmax_channels(xv).unwrap();
        let d = tape.value(p).data();
        for b in 0..2 {
            for px in 0..9 {
                let s: f64 = (0..4).map(|c| d[b * 36 + c * 9 + px]).sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
                for c in 0..4 {
                    let v = d[b * 36 + c * 9 + px];
                    prop_assert!(v > 0.0 && v < 1.0);
                }
            }
        }
    }

    #[test]
    fn conv_is_linear(seed in any::<u64>(), alpha in -2.0f64..2.0, beta in -2.0f64..2.0) {
        let mut r = rng(seed);
        let x = uniform(&[1, 2, 6, 6], -1.0, 1.0, &mut r);
        let y = uniform(&[1, 2, 6, 6], -1.0, 1.0, &mut r);
        let k = uniform(&[3, 2, 3, 3], -1.0, 1.0, &mut r);
        let mix = x.zip_map(&y, |a, b| alpha * a + beta * b).unwrap();
        let lhs = conv_out(&mix, &k);
        let rhs = conv_out(&x, &k).zip_map(&conv_out(&y, &k), |a, b| alpha * a + beta * b).unwrap();
        let scale = rhs.max_abs().max(1e-3);
        for (a, b) in lhs.data().iter().zip(rhs.data()) {
            prop_assert!((a - b).abs() / scale < 1e-5);
        }
    }

    #[test]
    fn repeated_backward_is_bit_identical(seed in any::<u64>()) {
        let mut r = rng(seed);
        let x = uniform(&[1, 2, 8, 8], -1.0, 1.0, &mut r).cast::<f32>();
        let k = uniform(&[4, 2, 3, 3], -1.0, 1.0, &mut r).cast::<f32>();
        let run = || {
            let mut tape = Tape::new();
            let xv = tape.param(x.clone());
            let kv = tape.param(k.clone());
            let y = tape.conv2d(xv, kv, None, 1, 1).unwrap();
            let y = tape.activation(Activation::Tanh, y).unwrap();
            let p = tape.avg_pool2x(y).unwrap();
            let s = tape.mean(p).unwrap();
            let g = tape.backward(s).unwrap();
            (g.get(xv).unwrap().clone(), g.get(kv).unwrap().clone())
        };
        prop_assert_eq!(run(), run());
    }
}
