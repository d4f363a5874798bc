mod common;

use common::{rand_t, rng};
use fusion_core::{Result, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-6;

/// Uniform magnitude in [lo, hi] with a random sign, so nothing sits near a kink at 0.
fn away_from_zero(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut r = rng(seed);
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = r.gen_range(lo..hi);
            if r.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

type Build = dyn Fn(&mut Tape, &[Var]) -> Result<Var>;

/// Reduces the op output with fixed random weights so every output element
/// contributes to the scalar.
fn scalar_loss(inputs: &[Tensor], build: &Build, weights: &mut Option<Tensor>) -> Result<(Tape, Vec<Var>, Var)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let shape = tape.value(out).shape().to_vec();
    let w = weights.get_or_insert_with(|| rand_t(&shape, -1.0, 1.0, 999)).clone();
    let w = tape.constant(w);
    let prod = tape.mul(out, w)?;
    let loss = tape.sum(prod)?;
    Ok((tape, vars, loss))
}

/// Worst relative error between backprop and central differences over every
/// scalar of every input.
fn worst_error(inputs: Vec<Tensor>, build: &Build) -> f64 {
    let mut weights = None;
    let (mut tape, vars, loss) = scalar_loss(&inputs, build, &mut weights).unwrap();
    tape.backward_only(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(&inputs)
        .map(|(&v, t)| tape.grad(v).map_or(vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();
    let eval = |inputs: &[Tensor]| {
        let (tape, _, loss) = scalar_loss(inputs, build, &mut weights.clone()).unwrap();
        tape.value(loss).data()[0]
    };
    let mut worst = 0.0f64;
    for (k, grads) in analytic.iter().enumerate() {
        for (i, &a) in grads.iter().enumerate() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += H;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= H;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * H);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-2);
            worst = worst.max(rel);
        }
    }
    worst
}

fn assert_grad(name: &str, inputs: Vec<Tensor>, build: &Build) {
    let e = worst_error(inputs, build);
    assert!(e <= TOL, "{name}: relative error {e:e}");
}

#[test]
fn conv2d_gradients() {
    assert_grad(
        "conv2d",
        vec![rand_t(&[2, 5, 6], -1.0, 1.0, 1), rand_t(&[3, 2, 3, 3], -1.0, 1.0, 2), rand_t(&[3], -1.0, 1.0, 3)],
        &|t, v| t.conv2d(v[0], v[1], Some(v[2])),
    );
    assert_grad(
        "conv2d 5x5 no bias",
        vec![rand_t(&[1, 6, 5], -1.0, 1.0, 4), rand_t(&[2, 1, 5, 5], -1.0, 1.0, 5)],
        &|t, v| t.conv2d(v[0], v[1], None),
    );
    assert_grad(
        "conv2d kernel wider than image",
        vec![rand_t(&[2, 2, 3], -1.0, 1.0, 6), rand_t(&[1, 2, 7, 7], -1.0, 1.0, 7)],
        &|t, v| t.conv2d(v[0], v[1], None),
    );
}

#[test]
fn linear_and_pooling_gradients() {
    assert_grad(
        "linear",
        vec![rand_t(&[4], -1.0, 1.0, 1), rand_t(&[3, 4], -1.0, 1.0, 2), rand_t(&[3], -1.0, 1.0, 3)],
        &|t, v| t.linear(v[0], v[1], Some(v[2])),
    );
    assert_grad("global_avg_pool", vec![rand_t(&[3, 4, 5], -1.0, 1.0, 4)], &|t, v| t.global_avg_pool(v[0]));
    // distinct values per pixel keep the max away from ties
    assert_grad("spatial_pool_pair", vec![rand_t(&[4, 3, 3], -1.0, 1.0, 5)], &|t, v| t.spatial_pool_pair(v[0]));
}

#[test]
fn activation_gradients() {
    let x = away_from_zero(&[2, 3, 3], 0.05, 2.0, 1);
    assert_grad("relu", vec![x.clone()], &|t, v| t.relu(v[0]));
    assert_grad("sigmoid", vec![rand_t(&[2, 3, 3], -4.0, 4.0, 2)], &|t, v| t.sigmoid(v[0]));
    assert_grad("prelu", vec![x.clone(), Tensor::new(&[1], vec![0.25]).unwrap()], &|t, v| t.prelu(v[0], v[1]));
    assert_grad("abs", vec![x], &|t, v| t.abs(v[0]));
}

#[test]
fn arithmetic_gradients() {
    let a = rand_t(&[2, 3, 2], -1.0, 1.0, 1);
    let b = away_from_zero(&[2, 3, 2], 0.5, 2.0, 2);
    assert_grad("add", vec![a.clone(), b.clone()], &|t, v| t.add(v[0], v[1]));
    assert_grad("sub", vec![a.clone(), b.clone()], &|t, v| t.sub(v[0], v[1]));
    assert_grad("mul", vec![a.clone(), b.clone()], &|t, v| t.mul(v[0], v[1]));
    assert_grad("div", vec![a.clone(), b], &|t, v| t.div(v[0], v[1]));
    assert_grad("add_scalar", vec![a.clone()], &|t, v| t.add_scalar(v[0], 0.7));
    assert_grad("mul_scalar", vec![a.clone()], &|t, v| t.mul_scalar(v[0], -1.3));
    assert_grad("mean", vec![a.clone()], &|t, v| t.mean(v[0]));
    assert_grad("sum", vec![a], &|t, v| t.sum(v[0]));
}

#[test]
fn broadcast_and_layout_gradients() {
    let x = rand_t(&[3, 4, 3], -1.0, 1.0, 1);
    let plane = rand_t(&[1, 4, 3], -1.0, 1.0, 2);
    assert_grad("scale_channels", vec![x.clone(), rand_t(&[3], -1.0, 1.0, 3)], &|t, v| {
        t.scale_channels(v[0], v[1])
    });
    assert_grad("scale_pixels", vec![x.clone(), plane.clone()], &|t, v| t.scale_pixels(v[0], v[1]));
    assert_grad("add_plane", vec![x.clone(), plane.clone()], &|t, v| t.add_plane(v[0], v[1]));
    assert_grad("concat", vec![x.clone(), plane], &|t, v| t.concat(&[v[0], v[1]]));
    assert_grad("select_channel", vec![x], &|t, v| t.select_channel(v[0], 1));
}

#[test]
fn normalization_gradients() {
    assert_grad(
        "channel_norm",
        vec![rand_t(&[2, 4, 4], -1.0, 1.0, 1), rand_t(&[2], 0.5, 1.5, 2), rand_t(&[2], -0.5, 0.5, 3)],
        &|t, v| t.channel_norm(v[0], v[1], v[2], 1e-5),
    );
    assert_grad("gaussian_valid", vec![rand_t(&[2, 12, 13], 0.0, 1.0, 4)], &|t, v| t.gaussian_valid(v[0]));
}

#[test]
fn spectral_gradients() {
    let x = rand_t(&[2, 6, 5], -1.0, 1.0, 1);
    assert_grad("fft_magnitude", vec![x.clone()], &|t, v| t.fft_magnitude(v[0]));
    assert_grad("fft_phase", vec![x.clone()], &|t, v| t.fft_phase(v[0]));
    // The spectrum stays conjugate symmetric because the gain is itself the
    // magnitude of a real signal.
    let gain = rand_t(&[2, 6, 5], -1.0, 1.0, 2);
    assert_grad("polar_inverse", vec![x, gain], &|t, v| {
        let mag = t.fft_magnitude(v[0])?;
        let phase = t.fft_phase(v[0])?;
        let g = t.fft_magnitude(v[1])?;
        let scaled = t.mul(mag, g)?;
        t.polar_inverse(scaled, phase)
    });
}

#[test]
fn conv_relu_stack_gradients() {
    // loss through two convs and a relu, inputs chosen with no pre-activation at 0
    assert_grad(
        "conv+relu stack",
        vec![
            rand_t(&[1, 5, 5], 0.1, 1.0, 1),
            rand_t(&[2, 1, 3, 3], 0.1, 1.0, 2),
            rand_t(&[1, 2, 3, 3], -1.0, 1.0, 3),
        ],
        &|t, v| {
            let a = t.conv2d(v[0], v[1], None)?;
            let a = t.relu(a)?;
            t.conv2d(a, v[2], None)
        },
    );
}

fn conv(x: &Tensor, w: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let (x, w) = (tape.constant(x.clone()), tape.constant(w.clone()));
    let y = tape.conv2d(x, w, None).unwrap();
    tape.value(y).clone()
}

fn gap(x: &Tensor) -> Vec<f64> {
    let mut tape = Tape::new();
    let x = tape.constant(x.clone());
    let y = tape.global_avg_pool(x).unwrap();
    tape.value(y).data().to_vec()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_is_linear(seed in any::<u64>(), alpha in -3.0f64..3.0, beta in -3.0f64..3.0, k in prop::sample::select(vec![1usize, 3, 5])) {
        let x = rand_t(&[2, 6, 7], -1.0, 1.0, seed);
        let y = rand_t(&[2, 6, 7], -1.0, 1.0, seed ^ 1);
        let w = rand_t(&[3, 2, k, k], -1.0, 1.0, seed ^ 2);
        let mix = Tensor::new(x.shape(), x.data().iter().zip(y.data()).map(|(a, b)| alpha * a + beta * b).collect()).unwrap();
        let lhs = conv(&mix, &w);
        let (cx, cy) = (conv(&x, &w), conv(&y, &w));
        for ((l, a), b) in lhs.data().iter().zip(cx.data()).zip(cy.data()) {
            prop_assert!((l - (alpha * a + beta * b)).abs() <= 1e-10);
        }
    }

    #[test]
    fn ones_kernel_pool_identity(seed in any::<u64>(), c in 1usize..5, h in 1usize..8, w in 1usize..8) {
        let x = rand_t(&[c, h, w], -2.0, 2.0, seed);
        let pooled = gap(&conv(&x, &Tensor::full(&[1, c, 1, 1], 1.0)))[0];
        let want: f64 = gap(&x).iter().sum();
        prop_assert!((pooled - want).abs() <= 1e-12);
    }

    #[test]
    fn ops_stay_finite(seed in any::<u64>(), exp_lo in -6i32..3) {
        // magnitudes spanning [1e-6, 1e3]
        let mut r = rng(seed);
        let shape = [3usize, 11, 12];
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|_| {
                let m = 10f64.powf(r.gen_range(exp_lo as f64..3.0));
                if r.gen_bool(0.5) { m } else { -m }
            })
            .collect();
        let x = Tensor::new(&shape, data).unwrap();
        let mut t = Tape::new();
        let v = t.constant(x.clone());
        let w = t.constant(rand_t(&[2, 3, 3, 3], -1.0, 1.0, seed ^ 7));
        let g = t.constant(Tensor::full(&[3], 1.0));
        let b = t.constant(Tensor::zeros(&[3]));
        let slope = t.constant(Tensor::new(&[1], vec![0.25]).unwrap());
        let outs = [
            t.conv2d(v, w, None),
            t.global_avg_pool(v),
            t.spatial_pool_pair(v),
            t.relu(v),
            t.sigmoid(v),
            t.prelu(v, slope),
            t.abs(v),
            t.mul(v, v),
            t.div(v, v),
            t.mean(v),
            t.channel_norm(v, g, b, 1e-5),
            t.fft_magnitude(v),
            t.fft_phase(v),
            t.gaussian_valid(v),
        ];
        for o in outs {
            let o = o.unwrap();
            prop_assert!(t.value(o).is_finite());
        }
        let mag = t.fft_magnitude(v).unwrap();
        let ph = t.fft_phase(v).unwrap();
        let back = t.polar_inverse(mag, ph).unwrap();
        prop_assert!(t.value(back).max_abs_diff(&x) <= 1e-9 * x.max_abs().max(1.0));
        let s = t.sum(back).unwrap();
        t.backward_only(s).unwrap();
        prop_assert!(t.grad(v).unwrap().iter().all(|g| g.is_finite()));
    }
}
