mod common;

use common::{attention_inputs, rand_t, rng, AttentionSet};
use fusion_core::metrics::{mse, psnr, ssim};
use fusion_core::spectral::{fft2, ifft2, recombine};
use fusion_core::training::{adam_step, degrade, AdamConfig, DegradationParams, TrainState};
use fusion_core::{ParamStore, Tape, Tensor};
use proptest::prelude::*;
use rand::Rng;

fn spectral_shape() -> impl Strategy<Value = (usize, usize, usize)> {
    (1usize..4, 1usize..20, 1usize..20)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn parseval((c, h, w) in spectral_shape(), seed in any::<u64>()) {
        let x = rand_t(&[c, h, w], -2.0, 2.0, seed);
        let s = fft2(&x).unwrap();
        let energy: f64 = x.data().iter().map(|v| v * v).sum();
        let spec: f64 = s.magnitude.data().iter().map(|m| m * m).sum::<f64>() / (h * w) as f64;
        prop_assert!((energy - spec).abs() <= 1e-8 * energy.max(1e-300));
    }

    #[test]
    fn spectrum_is_conjugate_symmetric((c, h, w) in spectral_shape(), seed in any::<u64>()) {
        let x = rand_t(&[c, h, w], -1.0, 1.0, seed);
        let s = fft2(&x).unwrap();
        let (m, ph) = (s.magnitude.data(), s.phase.data());
        for ch in 0..c {
            for u in 0..h {
                for v in 0..w {
                    let i = (ch * h + u) * w + v;
                    let j = (ch * h + (h - u) % h) * w + (w - v) % w;
                    prop_assert!(m[i] >= 0.0);
                    prop_assert!((m[i] - m[j]).abs() <= 1e-9);
                    if m[i] > 1e-9 {
                        // phase[i] = -phase[j] modulo 2 pi
                        let d = (ph[i] + ph[j]).rem_euclid(2.0 * std::f64::consts::PI);
                        prop_assert!(d.min(2.0 * std::f64::consts::PI - d) <= 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn round_trip((c, h, w) in (1usize..4, 1usize..65, 1usize..65), seed in any::<u64>()) {
        let x = rand_t(&[c, h, w], -1.0, 1.0, seed);
        prop_assert!(ifft2(&fft2(&x).unwrap()).unwrap().max_abs_diff(&x) <= 1e-9);
    }

    #[test]
    fn cross_channel_magnitude_maps_stay_real((c, h, w) in spectral_shape(), seed in any::<u64>()) {
        let x = rand_t(&[c, h, w], -1.0, 1.0, seed);
        let s = fft2(&x).unwrap();
        let mix = rand_t(&[c, c], -1.0, 1.0, seed ^ 5);
        let plane = h * w;
        let m = s.magnitude.data();
        let mut mixed = vec![0.0; c * plane];
        for o in 0..c {
            for i in 0..c {
                for p in 0..plane {
                    mixed[o * plane + p] += mix.data()[o * c + i] * m[i * plane + p];
                }
            }
        }
        let refined = recombine(&Tensor::new(&[c, h, w], mixed).unwrap(), &s.phase).unwrap();
        // ifft2 fails loudly when the imaginary residue exceeds its bound
        prop_assert!(ifft2(&refined).is_ok());
    }

    #[test]
    fn attention_weights_bounded(seed in any::<u64>(), c in prop::sample::select(vec![1usize, 2, 4, 8, 16, 32])) {
        let att = AttentionSet::fuzzed(c, seed);
        let (f, mag, e) = attention_inputs(c, seed);
        let (weights, out) = att.emitted(&f, &mag, &e);
        for w in weights.iter().flatten() {
            prop_assert!(*w > 0.0 && *w < 1.0, "{w}");
        }
        prop_assert!(weights[1].len() == f.shape()[1] * f.shape()[2]);
        if f.max_abs() > 0.0 {
            prop_assert!(out.max_abs() < f.max_abs());
        }
    }

    #[test]
    fn channel_attention_commutes_with_pixel_permutation(seed in any::<u64>(), c in 1usize..6) {
        let att = AttentionSet::fuzzed(c, seed);
        let (f, _, _) = attention_inputs(c, seed);
        let (_, h, w) = f.chw().unwrap();
        let mut perm: Vec<usize> = (0..h * w).collect();
        let mut r = rng(seed ^ 9);
        for i in (1..perm.len()).rev() {
            perm.swap(i, r.gen_range(0..=i));
        }
        let permute = |t: &Tensor| {
            let d = t.data();
            let out = (0..c).flat_map(|ch| perm.iter().map(move |&p| d[ch * h * w + p])).collect();
            Tensor::new(t.shape(), out).unwrap()
        };
        let run = |x: &Tensor| {
            let mut t = Tape::new();
            let p = t.bind(&att.store);
            let v = t.constant(x.clone());
            let y = att.channel.forward(&mut t, &p, v).unwrap();
            t.value(y).clone()
        };
        prop_assert!(run(&permute(&f)).max_abs_diff(&permute(&run(&f))) <= 1e-12);
    }

    #[test]
    fn metric_symmetry_and_identity(seed in any::<u64>(), h in 11usize..20, w in 11usize..20) {
        let a = rand_t(&[3, h, w], 0.0, 1.0, seed);
        let b = rand_t(&[3, h, w], 0.0, 1.0, seed ^ 1);
        prop_assert_eq!(mse(&a, &b).unwrap(), mse(&b, &a).unwrap());
        prop_assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
        prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() <= 1e-15);
        prop_assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        prop_assert_eq!(mse(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn psnr_falls_with_noise(seed in any::<u64>()) {
        let clean = rand_t(&[3, 16, 16], 0.0, 1.0, seed);
        let noise = rand_t(&[3, 16, 16], -1.0, 1.0, seed ^ 3);
        let mut last = f64::INFINITY;
        for k in 1..=10 {
            let amp = 0.01 * k as f64;
            let noisy = Tensor::new(clean.shape(), clean.data().iter().zip(noise.data()).map(|(c, n)| c + amp * n).collect()).unwrap();
            let db = psnr(&noisy, &clean, 1.0).unwrap().db();
            prop_assert!(db < last);
            last = db;
        }
    }

    #[test]
    fn degradation_monotone_in_depth(seed in any::<u64>()) {
        let mut r = rng(seed);
        let clean = rand_t(&[3, 8, 8], 0.0, 1.0, seed);
        let base = DegradationParams::sample(&mut r);
        let mut depths: Vec<f64> = (0..6).map(|_| r.gen_range(0.0..8.0)).collect();
        depths.sort_by(f64::total_cmp);
        let distance = |d: f64| {
            let out = degrade(&clean, &DegradationParams { depth: d, ..base }).unwrap();
            let plane = 64;
            (0..3)
                .map(|c| out.data()[c * plane..(c + 1) * plane].iter().map(|v| (v - base.backscatter[c]).abs()).sum::<f64>() / plane as f64)
                .collect::<Vec<_>>()
        };
        let mut prev = distance(depths[0]);
        for &d in &depths[1..] {
            let cur = distance(d);
            for c in 0..3 {
                prop_assert!(cur[c] <= prev[c] + 1e-12);
            }
            prev = cur;
        }
        let surface = degrade(&clean, &DegradationParams { depth: 0.0, ..base }).unwrap();
        prop_assert!(surface == clean);
    }
}

#[test]
fn adam_converges_monotonically_on_quadratics() {
    let cfg = AdamConfig::default();
    for seed in 0..100u64 {
        let mut r = rng(seed);
        let a = r.gen_range(0.1..10.0);
        let start = r.gen_range(0.5..5.0) * if r.gen_bool(0.5) { 1.0 } else { -1.0 };
        let mut store = ParamStore::new();
        store.add("theta", Tensor::new(&[1], vec![start]).unwrap()).unwrap();
        let mut state = TrainState::new(&store, seed);
        let mut prev = f64::INFINITY;
        for step in 0..500 {
            let theta = store.iter().next().unwrap().tensor.data()[0];
            // after a short bias-correction transient |theta| must never grow
            if step >= 5 {
                assert!(theta.abs() <= prev, "seed {seed} step {step}: {theta} after {prev}");
            }
            prev = theta.abs();
            store.iter_mut().next().unwrap().tensor.grad = Some(vec![2.0 * a * theta]);
            adam_step(&mut state, &mut store, &cfg).unwrap();
        }
        assert!(prev < start.abs());
        assert!(state.v.iter().flatten().all(|&v| v >= 0.0));
    }
}

#[test]
fn calibration_keeps_channel_order_at_zero_weights() {
    let mut att = AttentionSet::fuzzed(2, 3);
    for p in att.store.iter_mut() {
        if p.name.starts_with("cal.w") {
            p.tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let e = rand_t(&[3, 4, 4], 0.0, 1.0, 8);
    for s in [0.1, 0.5, 1.0] {
        let scaled = Tensor::new(e.shape(), e.data().iter().map(|v| v * s).collect()).unwrap();
        let (w, _) = att.emitted(&Tensor::zeros(&[2, 4, 4]), &Tensor::zeros(&[2, 4, 4]), &scaled);
        let gains = &w[3];
        assert!(gains.iter().all(|g| g == &gains[0]), "{gains:?}");
        let order = |t: &Tensor| -> Vec<usize> {
            let means: Vec<f64> = t.data().chunks(16).map(|p| p.iter().sum()).collect();
            let mut idx = vec![0, 1, 2];
            idx.sort_by(|&a, &b| means[a].total_cmp(&means[b]));
            idx
        };
        let out = Tensor::new(e.shape(), scaled.data().iter().map(|v| v * gains[0]).collect()).unwrap();
        assert_eq!(order(&out), order(&e));
    }
}
