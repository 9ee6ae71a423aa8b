mod common;

use uniroute::normalization::{DsbnLayer, RunningStats, DEFAULT_EPS, DEFAULT_MOMENTUM};
use uniroute::params::{Ctx, ParamStore};
use uniroute::rng::Xoshiro256;
use uniroute::tensor::{grad_check, Tensor};
use uniroute::{DomainId, Error};

const A: DomainId = DomainId(0);
const B: DomainId = DomainId(1);

fn layer(c: usize) -> (ParamStore, DsbnLayer) {
    let mut store = ParamStore::new();
    let l = DsbnLayer::new(&mut store, "bn", 0, c, 3);
    (store, l)
}

fn train_pass(store: &ParamStore, l: &mut DsbnLayer, x: &Tensor, d: DomainId) -> Tensor {
    let mut ctx = Ctx::train(store, None);
    let xv = ctx.tape.constant(x.clone());
    let y = l.forward_train(&mut ctx, xv, &vec![d; x.shape()[0]]).unwrap();
    ctx.tape.value(y).clone()
}

/// Per-channel mean and biased variance over `(B, H, W)`.
fn channel_moments(t: &Tensor) -> Vec<(f64, f64)> {
    let (b, c, h, w) = t.dims4().unwrap();
    (0..c)
        .map(|ch| {
            let vals: Vec<f64> = (0..b).flat_map(|bi| (0..h * w).map(move |j| (bi, j))).map(|(bi, j)| t.at4(bi, ch, j / w, j % w)).collect();
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            (mean, vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n)
        })
        .collect()
}

#[test]
fn defaults() {
    let (_, l) = layer(4);
    assert_eq!(l.momentum, 0.1);
    assert_eq!(l.eps, 1e-5);
    assert_eq!((DEFAULT_MOMENTUM, DEFAULT_EPS), (0.1, 1e-5));
    assert!(l.running.iter().all(|r| r.var.iter().all(|&v| v > 0.0)));
}

#[test]
fn training_output_is_standardized() {
    let (store, mut l) = layer(5);
    for seed in 0..10 {
        let x = common::randn(&[4, 5, 6, 6], seed).map(|v| 3.0 * v + 7.0);
        let y = train_pass(&store, &mut l, &x, A);
        for (c, (mean, var)) in channel_moments(&y).into_iter().enumerate() {
            // With eps in the denominator the variance is s²/(s²+eps); the
            // oracle recomputes that ratio from the input.
            let s2 = channel_moments(&x)[c].1;
            assert!(mean.abs() < 1e-10, "mean {mean}");
            assert!((var - s2 / (s2 + DEFAULT_EPS)).abs() < 1e-10, "var {var}");
            assert!((var - 1.0).abs() < 2.0 * DEFAULT_EPS / s2);
        }
    }
}

#[test]
fn other_domains_are_isolated_to_the_bit() {
    let (store, mut l) = layer(4);
    for seed in 0..5 {
        train_pass(&store, &mut l, &common::randn(&[2, 4, 5, 5], seed), A);
    }
    let snapshot_a = l.running[A.0].clone();
    let snapshot_c = l.running[2].clone();
    for seed in 0..100 {
        train_pass(&store, &mut l, &common::randn(&[2, 4, 5, 5], 1000 + seed).map(|v| 2.0 * v - 4.0), B);
    }
    assert_eq!(l.running[A.0], snapshot_a);
    assert_eq!(l.running[2], snapshot_c);
    for (x, y) in l.running[A.0].mean.iter().chain(&l.running[A.0].var).zip(snapshot_a.mean.iter().chain(&snapshot_a.var)) {
        assert_eq!(x.to_bits(), y.to_bits());
    }
    assert_ne!(l.running[B.0], snapshot_a);
}

/// Noise re-centred so every batch has the same per-channel mean.
fn offset_batch(rng: &mut Xoshiro256, offsets: &[f64]) -> Tensor {
    let c = offsets.len();
    let mut t = Tensor::randn(vec![4, c, 8, 8], 1.0, rng);
    let m = channel_moments(&t);
    let plane = 64;
    for (i, v) in t.data_mut().iter_mut().enumerate() {
        let ch = (i / plane) % c;
        *v += offsets[ch] - m[ch].0;
    }
    t
}

#[test]
fn running_means_track_offset_streams() {
    let (store, mut l) = layer(3);
    let off_a = [0.0, -1.5, 2.0];
    let off_b: Vec<f64> = off_a.iter().map(|o| o + 5.0).collect();
    let mut rng = Xoshiro256::seed_from(7);
    // EMA oracle with the same momentum, fed the exact stream means.
    let mut oracle = [0.0f64; 3];
    for _ in 0..500 {
        let xa = offset_batch(&mut rng, &off_a);
        let xb = offset_batch(&mut rng, &off_b);
        train_pass(&store, &mut l, &xa, A);
        train_pass(&store, &mut l, &xb, B);
        for (o, t) in oracle.iter_mut().zip(off_a) {
            *o = 0.9 * *o + 0.1 * t;
        }
    }
    for c in 0..3 {
        assert!((l.running[A.0].mean[c] - off_a[c]).abs() < 0.01);
        assert!((l.running[B.0].mean[c] - off_b[c]).abs() < 0.01);
        assert!((l.running[A.0].mean[c] - oracle[c]).abs() < 1e-9);
        assert!((l.running[B.0].mean[c] - l.running[A.0].mean[c] - 5.0).abs() < 0.01);
        assert!(l.running[A.0].var[c] > 0.0 && l.running[B.0].var[c] > 0.0);
    }
}

#[test]
fn eval_mode_uses_running_statistics() {
    let (mut store, mut l) = layer(2);
    l.running[B.0] = RunningStats {
        mean: vec![1.0, -2.0],
        var: vec![4.0, 0.25],
    };
    store.set(l.gamma[B.0], Tensor::new(vec![2], vec![2.0, 3.0]).unwrap()).unwrap();
    store.set(l.beta[B.0], Tensor::new(vec![2], vec![0.5, -0.5]).unwrap()).unwrap();
    let x = common::randn(&[2, 2, 3, 3], 3);
    let mut ctx = Ctx::eval(&store);
    let xv = ctx.tape.constant(x.clone());
    let y = l.forward(&mut ctx, xv, &[B, B]).unwrap();
    let y = ctx.tape.value(y);
    let (mean, var, g, b) = ([1.0, -2.0], [4.0, 0.25], [2.0, 3.0], [0.5, -0.5]);
    for (i, &v) in y.data().iter().enumerate() {
        let c = (i / 9) % 2;
        let expect = g[c] * (x.data()[i] - mean[c]) / (var[c] + DEFAULT_EPS).sqrt() + b[c];
        assert!((v - expect).abs() < 1e-12);
    }
}

#[test]
fn mixed_and_unknown_domains_are_rejected() {
    let (store, mut l) = layer(2);
    let x = common::randn(&[2, 2, 3, 3], 4);
    let mut ctx = Ctx::train(&store, None);
    let xv = ctx.tape.constant(x.clone());
    assert!(matches!(l.forward_train(&mut ctx, xv, &[A, B]), Err(Error::Contract(_))));
    assert!(matches!(l.forward_train(&mut ctx, xv, &[DomainId(3), DomainId(3)]), Err(Error::UnknownDomain(3))));
    let mut ctx = Ctx::eval(&store);
    let xv = ctx.tape.constant(x);
    assert!(matches!(l.forward(&mut ctx, xv, &[B, A]), Err(Error::Contract(_))));
}

#[test]
fn gradients_in_eval_mode() {
    let (mut store, mut l) = layer(3);
    l.running[A.0] = RunningStats {
        mean: vec![0.3, -0.2, 1.0],
        var: vec![0.5, 2.0, 1.5],
    };
    let mut rng = Xoshiro256::seed_from(5);
    for seed in 0..20u64 {
        store.set(l.gamma[A.0], Tensor::randn(vec![3], 1.0, &mut rng)).unwrap();
        store.set(l.beta[A.0], Tensor::randn(vec![3], 1.0, &mut rng)).unwrap();
        let x = common::randn(&[2, 3, 3, 3], 10 + seed);
        let coords = common::all_coords(&store, &[l.gamma[A.0], l.beta[A.0]]);
        let err = common::param_grad_error(&store, &coords, 1e-5, false, |ctx| {
            let xv = ctx.tape.constant(x.clone());
            let y = l.forward(ctx, xv, &[A, A])?;
            common::probe(&mut ctx.tape, y, seed)
        });
        assert!(err < 1e-4, "affine: {err}");
        let err = grad_check(
            |tape, xv| {
                let mut ctx = Ctx::with_tape(&store, std::mem::take(tape), false, None);
                let y = l.forward(&mut ctx, xv, &[A, A])?;
                let out = common::probe(&mut ctx.tape, y, seed)?;
                *tape = std::mem::take(&mut ctx.tape);
                Ok(out)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "input: {err}");
    }
}

#[test]
fn gradients_in_training_mode() {
    let (store, l) = layer(3);
    for seed in 0..20u64 {
        let x = common::randn(&[2, 3, 3, 3], 40 + seed);
        let err = grad_check(
            |tape, xv| {
                let mut ctx = Ctx::with_tape(&store, std::mem::take(tape), true, None);
                let y = l.forward(&mut ctx, xv, &[B, B])?;
                let out = common::probe(&mut ctx.tape, y, seed)?;
                *tape = std::mem::take(&mut ctx.tape);
                Ok(out)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}
