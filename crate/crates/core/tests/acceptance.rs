//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.
//!
//! `UNIROUTE_ACCEPTANCE=1,2,10` restricts the run to the listed criteria.

mod common;

use std::panic::{self, AssertUnwindSafe};
use std::time::{Duration, Instant};

use uniroute::casd::{build_teacher, consistency_loss, entropy_loss, kd_loss, HorizontalFlip};
use uniroute::experts::{GlobalContextExpert, LocalDetailExpert};
use uniroute::harness::{
    ablate, evaluate, export_routing_map, read_pgm, train, AblationReport, Dataset, MetricsLog, RoutingMap, TrainConfig, Variant,
};
use uniroute::model::{Fusion, ModelConfig, UniRouteNet};
use uniroute::normalization::DsbnLayer;
use uniroute::params::{Ctx, ParamRole, ParamStore};
use uniroute::rng::Xoshiro256;
use uniroute::routing::{
    ste_binary, ste_top1, threshold_mask, Ar2Block, DomainEmbedding, GateMode, MdrBlock, Primitive, DOMAIN_DIM,
};
use uniroute::synthdata::{generate, Modality, SceneSpec, Speckle};
use uniroute::tensor::{grad_check_params, NormStats, Tape, Tensor, Var};
use uniroute::{DomainId, Result};

const STEP: f64 = 1e-5;
const SEEDS: [u64; 3] = [0, 1, 2];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn progress(msg: &str) {
    eprintln!("  .. {msg}");
}

// ---------------------------------------------------------------------------
// 1. Gradient suite

type OpFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

#[derive(Clone, Copy)]
enum Init {
    Normal,
    Positive,
    Unit,
}

fn draw(shape: &[usize], init: Init, rng: &mut Xoshiro256) -> Tensor {
    match init {
        Init::Normal => Tensor::randn(shape.to_vec(), 1.0, rng),
        Init::Positive => Tensor::uniform(shape.to_vec(), 0.5, 2.0, rng),
        Init::Unit => Tensor::uniform(shape.to_vec(), 0.05, 0.95, rng),
    }
}

/// Reduces a tensor output to a scalar with fixed random weights.
fn probed(f: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static) -> OpFn {
    Box::new(move |t, v| {
        let y = f(t, v)?;
        common::probe(t, y, 99)
    })
}

/// Soft labels; loss targets receive no gradient.
fn target(shape: &[usize]) -> Tensor {
    Tensor::uniform(shape.to_vec(), 0.0, 1.0, &mut Xoshiro256::seed_from(31))
}

/// Every differentiable tape operation. `straight_through` has no finite
/// difference counterpart; its contract is criterion 2.
fn op_table() -> Vec<(&'static str, Vec<(Vec<usize>, Init)>, OpFn)> {
    use Init::*;
    let x4 = |c: usize| (vec![2, c, 4, 4], Normal);
    vec![
        ("conv2d s1p1", vec![x4(3), (vec![4, 3, 3, 3], Normal), (vec![4], Normal)], probed(|t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 1))),
        ("conv2d s2p0", vec![x4(3), (vec![4, 3, 2, 2], Normal)], probed(|t, v| t.conv2d(v[0], v[1], None, 2, 0))),
        ("depthwise d1", vec![(vec![1, 2, 7, 7], Normal), (vec![2, 1, 3, 3], Normal)], probed(|t, v| t.depthwise_conv(v[0], v[1], 1))),
        ("depthwise d3", vec![(vec![1, 2, 9, 9], Normal), (vec![2, 1, 5, 5], Normal)], probed(|t, v| t.depthwise_conv(v[0], v[1], 3))),
        ("pointwise", vec![x4(3), (vec![5, 3, 1, 1], Normal), (vec![5], Normal)], probed(|t, v| t.pointwise_conv(v[0], v[1], Some(v[2])))),
        ("add", vec![x4(3), x4(3)], probed(|t, v| t.add(v[0], v[1]))),
        ("sub", vec![x4(3), x4(3)], probed(|t, v| t.sub(v[0], v[1]))),
        ("mul", vec![x4(3), x4(3)], probed(|t, v| t.mul(v[0], v[1]))),
        ("mul broadcast", vec![x4(3), (vec![1, 3, 1, 1], Normal)], probed(|t, v| t.mul(v[0], v[1]))),
        ("div", vec![x4(3), (vec![2, 3, 4, 4], Positive)], probed(|t, v| t.div(v[0], v[1]))),
        ("affine", vec![x4(2)], probed(|t, v| Ok(t.affine(v[0], -1.7, 0.4)))),
        ("one_minus", vec![x4(2)], probed(|t, v| Ok(t.one_minus(v[0])))),
        ("sigmoid", vec![x4(2)], probed(|t, v| Ok(t.sigmoid(v[0])))),
        ("gelu", vec![x4(2)], probed(|t, v| Ok(t.gelu(v[0])))),
        ("relu", vec![x4(2)], probed(|t, v| Ok(t.relu(v[0])))),
        ("ln_eps", vec![(vec![2, 2, 4, 4], Positive)], probed(|t, v| Ok(t.ln_eps(v[0], 1e-8)))),
        ("concat_channels", vec![x4(2), x4(3)], probed(|t, v| t.concat_channels(v[0], v[1]))),
        ("slice_channels", vec![x4(4)], probed(|t, v| t.slice_channels(v[0], 1, 2))),
        ("flip_horizontal", vec![x4(2)], probed(|t, v| t.flip_horizontal(v[0]))),
        ("upsample2x", vec![x4(2)], probed(|t, v| t.upsample2x(v[0]))),
        ("upsample4x", vec![x4(2)], probed(|t, v| t.upsample(v[0], 4))),
        ("sum", vec![x4(2)], probed(|t, v| Ok(t.sum(v[0])))),
        ("mean", vec![x4(2)], probed(|t, v| Ok(t.mean(v[0])))),
        ("sum_channels", vec![x4(3)], probed(|t, v| t.sum_channels(v[0]))),
        ("softmax_channels", vec![x4(3)], probed(|t, v| t.softmax_channels(v[0], 0.7))),
        ("mse", vec![x4(2), x4(2)], Box::new(|t, v| t.mse(v[0], v[1]))),
        (
            "bce_with_logits",
            vec![x4(1)],
            Box::new(|t, v| {
                let y = t.constant(target(&[2, 1, 4, 4]));
                t.bce_with_logits(v[0], y)
            }),
        ),
        (
            "dice_loss",
            vec![(vec![2, 1, 4, 4], Unit)],
            Box::new(|t, v| {
                let y = t.constant(target(&[2, 1, 4, 4]));
                t.dice_loss(v[0], y, 1.0)
            }),
        ),
        ("cosine_channels", vec![x4(3), x4(3)], probed(|t, v| t.cosine_channels(v[0], v[1], 1e-8))),
        ("embed_row", vec![(vec![3, 4], Normal)], probed(|t, v| t.embed_row(v[0], 2))),
        ("reshape", vec![x4(2)], probed(|t, v| t.reshape(v[0], vec![4, 1, 4, 4]))),
        ("slice_batch", vec![(vec![3, 2, 4, 4], Normal)], probed(|t, v| t.slice_batch(v[0], 1, 2))),
        ("concat_batch", vec![x4(2), (vec![1, 2, 4, 4], Normal)], probed(|t, v| t.concat_batch(v[0], v[1]))),
        ("avg_pool", vec![x4(2)], probed(|t, v| t.avg_pool(v[0], 2))),
        ("depth_to_space", vec![x4(4)], probed(|t, v| t.depth_to_space(v[0], 2))),
        (
            "batch_norm batch",
            vec![x4(3), (vec![3], Normal), (vec![3], Normal)],
            probed(|t, v| Ok(t.batch_norm(v[0], v[1], v[2], &NormStats::Batch { eps: 1e-5 })?.0)),
        ),
        (
            "batch_norm fixed",
            vec![x4(3), (vec![3], Normal), (vec![3], Normal)],
            probed(|t, v| {
                let stats = NormStats::Fixed { mean: vec![0.1, -0.2, 0.3], var: vec![1.5, 0.5, 2.0], eps: 1e-5 };
                Ok(t.batch_norm(v[0], v[1], v[2], &stats)?.0)
            }),
        ),
    ]
}

fn embedding(store: &mut ParamStore, rng: &mut Xoshiro256) -> DomainEmbedding {
    DomainEmbedding::new(store, 3, DOMAIN_DIM, rng)
}

fn block_errors(seed: u64) -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    let mut rng = Xoshiro256::seed_from(1000 + seed);

    let mut store = ParamStore::new();
    let e = LocalDetailExpert::new(&mut store, "local", 3, &mut rng);
    let x = common::randn(&[1, 3, 5, 5], 2000 + seed);
    let coords = common::all_coords(&store, &[e.dw, e.pw, e.pw_bias]);
    out.push((
        "local expert",
        common::param_grad_error(&store, &coords, STEP, true, |ctx| {
            let xv = ctx.tape.constant(x.clone());
            let y = e.forward(ctx, xv)?;
            common::probe(&mut ctx.tape, y, 7)
        }),
    ));

    let mut store = ParamStore::new();
    let e = GlobalContextExpert::new(&mut store, "global", 2, &mut rng);
    let x = common::randn(&[1, 2, 9, 9], 3000 + seed);
    let coords = common::all_coords(&store, &[e.dw, e.dilated, e.pw, e.pw_bias]);
    out.push((
        "global expert",
        common::param_grad_error(&store, &coords, STEP, true, |ctx| {
            let xv = ctx.tape.constant(x.clone());
            let y = e.forward(ctx, xv)?;
            common::probe(&mut ctx.tape, y, 8)
        }),
    ));

    let mut store = ParamStore::new();
    let emb = embedding(&mut store, &mut rng);
    let mut b = Ar2Block::new(&mut store, "ar2", 4, emb, &mut rng);
    b.gate.mode = GateMode::Soft;
    let x = common::randn(&[1, 4, 9, 9], 4000 + seed);
    let coords = common::all_coords(&store, &store.ids().collect::<Vec<_>>());
    out.push((
        "ar2 block (soft)",
        common::param_grad_error(&store, &coords, STEP, true, |ctx| {
            let xv = ctx.tape.constant(x.clone());
            let (y, _) = b.forward(ctx, xv, DomainId(seed as usize % 3))?;
            common::probe(&mut ctx.tape, y, 9)
        }),
    ));

    let mut store = ParamStore::new();
    let emb = embedding(&mut store, &mut rng);
    let mut b = MdrBlock::new(&mut store, "mdr", 4, emb, &mut rng);
    b.gate.mode = GateMode::Soft;
    let f1 = common::randn(&[1, 4, 3, 3], 5000 + seed);
    let f2 = common::randn(&[1, 4, 3, 3], 6000 + seed);
    let coords = common::all_coords(&store, &store.ids().collect::<Vec<_>>());
    out.push((
        "mdr block (soft)",
        common::param_grad_error(&store, &coords, STEP, true, |ctx| {
            let (a, c) = (ctx.tape.constant(f1.clone()), ctx.tape.constant(f2.clone()));
            let (y, _) = b.forward(ctx, a, c, DomainId(seed as usize % 3))?;
            common::probe(&mut ctx.tape, y, 10)
        }),
    ));

    let mut store = ParamStore::new();
    let l = DsbnLayer::new(&mut store, "bn", 0, 3, 3);
    let x = common::randn(&[2, 3, 4, 4], 7000 + seed);
    let coords = common::all_coords(&store, &[l.gamma[1], l.beta[1]]);
    out.push((
        "dsbn (train)",
        common::param_grad_error(&store, &coords, STEP, true, |ctx| {
            let xv = ctx.tape.constant(x.clone());
            let y = l.forward(ctx, xv, &[DomainId(1); 2])?;
            let y2 = ctx.tape.mul(y, y)?;
            common::probe(&mut ctx.tape, y2, 11)
        }),
    ));
    out
}

fn end_to_end_error(seed: u64) -> f64 {
    let cfg = ModelConfig {
        gate_mode: GateMode::Soft,
        ..ModelConfig::default()
    };
    let net = UniRouteNet::new(cfg, seed).unwrap();
    let mut rng = Xoshiro256::seed_from(8000 + seed);
    let t1 = Tensor::uniform(vec![1, 3, 16, 16], 0.0, 1.0, &mut rng);
    let t2 = Tensor::uniform(vec![1, 3, 16, 16], 0.0, 1.0, &mut rng);
    let coords = common::sample_coords(&net.params, 40, &mut rng);
    common::param_grad_error(&net.params, &coords, STEP, true, |ctx| {
        let (a, b) = (ctx.tape.constant(t1.clone()), ctx.tape.constant(t2.clone()));
        let out = net.forward(ctx, a, b, DomainId(seed as usize % 3))?;
        common::probe(&mut ctx.tape, out.logits, 3)
    })
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut worst_op = ("", 0.0f64);
    for (name, inputs, f) in op_table() {
        for seed in 0..20u64 {
            let mut rng = Xoshiro256::seed_from(seed * 7919 + name.len() as u64);
            let params: Vec<Tensor> = inputs.iter().map(|(s, init)| draw(s, *init, &mut rng)).collect();
            let err = grad_check_params(&f, &params, STEP, None).unwrap().max_rel_error;
            if err > worst_op.1 {
                worst_op = (name, err);
            }
        }
    }
    let mut worst_block = ("", 0.0f64);
    for seed in 0..20 {
        for (name, err) in block_errors(seed) {
            if err > worst_block.1 {
                worst_block = (name, err);
            }
        }
    }
    let worst_e2e = (0..20).map(end_to_end_error).fold(0.0, f64::max);
    let elapsed = start.elapsed();
    let pass = worst_op.1 < 1e-6 && worst_block.1 < 1e-4 && worst_e2e < 1e-3 && elapsed < Duration::from_secs(120);
    outcome(
        pass,
        format!(
            "ops max {:.2e} ({}), blocks max {:.2e} ({}), end-to-end max {:.2e}, {:.1} s",
            worst_op.1,
            worst_op.0,
            worst_block.1,
            worst_block.0,
            worst_e2e,
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------------------
// 2. Straight-through contract

fn is_binary(t: &Tensor) -> bool {
    t.data().iter().all(|&v| v == 0.0 || v == 1.0)
}

fn is_one_hot(t: &Tensor) -> bool {
    let (b, k, h, w) = t.dims4().unwrap();
    is_binary(t) && (0..b).all(|bi| (0..h * w).all(|j| (0..k).map(|c| t.at4(bi, c, j / w, j % w)).sum::<f64>() == 1.0))
}

fn gate_grad_max(mode: GateMode, seed: u64) -> f64 {
    let cfg = ModelConfig {
        gate_mode: mode,
        ..ModelConfig::default()
    };
    let net = UniRouteNet::new(cfg, seed).unwrap();
    let mut rng = Xoshiro256::seed_from(seed);
    let t1 = Tensor::uniform(vec![2, 3, 32, 32], 0.0, 1.0, &mut rng);
    let t2 = Tensor::uniform(vec![2, 3, 32, 32], 0.0, 1.0, &mut rng);
    let mut ctx = Ctx::train(&net.params, None);
    let (a, b) = (ctx.tape.constant(t1), ctx.tape.constant(t2));
    let out = net.forward(&mut ctx, a, b, DomainId(0)).unwrap();
    let loss = common::probe(&mut ctx.tape, out.logits, 5).unwrap();
    let grads = ctx.backward(loss).unwrap();
    grads.max_abs_for_role(&net.params, ParamRole::Gate)
}

fn criterion_2() -> Outcome {
    let mut masks_ok = true;
    for seed in 0..5 {
        let net = UniRouteNet::new(ModelConfig::default(), seed).unwrap();
        let mut rng = Xoshiro256::seed_from(100 + seed);
        let t1 = Tensor::uniform(vec![2, 3, 64, 64], 0.0, 1.0, &mut rng);
        let t2 = Tensor::uniform(vec![2, 3, 64, 64], 0.0, 1.0, &mut rng);
        let mut ctx = Ctx::eval(&net.params);
        let (a, b) = (ctx.tape.constant(t1), ctx.tape.constant(t2));
        let out = net.forward(&mut ctx, a, b, DomainId(seed as usize % 3)).unwrap();
        for d in &out.decisions {
            let m = &d.hard_mask;
            masks_ok &= if m.shape()[1] == 1 { is_binary(m) } else { is_one_hot(m) };
        }
    }
    let mut identity_ok = true;
    for seed in 0..20 {
        let mut rng = Xoshiro256::seed_from(200 + seed);
        for k in [1usize, 3] {
            let mut tape = Tape::new();
            let p = tape.leaf(Tensor::uniform(vec![2, k, 5, 5], 0.0, 1.0, &mut rng));
            let up = Tensor::randn(vec![2, k, 5, 5], 2.0, &mut rng);
            let m = if k == 1 { ste_binary(&mut tape, p) } else { ste_top1(&mut tape, p) }.unwrap();
            identity_ok &= if k == 1 {
                tape.value(m).bit_eq(&threshold_mask(tape.value(p)))
            } else {
                is_one_hot(tape.value(m))
            };
            let upv = tape.constant(up.clone());
            let prod = tape.mul(m, upv).unwrap();
            let loss = tape.sum(prod);
            let g = tape.backward(loss).unwrap();
            identity_ok &= g.tensor(&tape, p).bit_eq(&up);
        }
    }
    let no_ste = (0..3).map(|s| gate_grad_max(GateMode::Top1NoSte, s)).fold(0.0, f64::max);
    let ste = (0..3).map(|s| gate_grad_max(GateMode::SteHard, s)).fold(f64::INFINITY, f64::min);
    let pass = masks_ok && identity_ok && no_ste == 0.0 && ste > 0.0;
    outcome(
        pass,
        format!("masks binary/one-hot {masks_ok}, d mask/d probs identity {identity_ok}, top1_no_ste gate grad max {no_ste:e}, STE gate grad min {ste:.2e}"),
    )
}

// ---------------------------------------------------------------------------
// 3. Analytic loss values

fn entropy_of(p: Tensor) -> f64 {
    let mut tape = Tape::new();
    let v = tape.constant(p);
    let e = entropy_loss(&mut tape, v).unwrap();
    tape.value(e).item()
}

fn cosine_value(a: [f64; 3], b: [f64; 3]) -> f64 {
    let mut tape = Tape::new();
    let f1 = tape.constant(Tensor::new(vec![1, 3, 1, 1], a.to_vec()).unwrap());
    let f2 = tape.constant(Tensor::new(vec![1, 3, 1, 1], b.to_vec()).unwrap());
    let c = consistency_loss(&mut tape, f1, f2, &Tensor::zeros(vec![1, 1, 1, 1])).unwrap();
    tape.value(c).item()
}

fn criterion_3() -> Outcome {
    let e3 = entropy_of(Tensor::full(vec![2, 3, 4, 4], 1.0 / 3.0));
    let e2 = entropy_of(Tensor::full(vec![2, 2, 4, 4], 0.5));
    let e1 = entropy_of(Tensor::from_fn(vec![1, 3, 2, 2], |i| (i / 4 == 2) as u8 as f64));
    let v = [1.0, -2.0, 0.5];
    let c_eq = cosine_value(v, v.map(|x| 3.0 * x));
    let c_orth = cosine_value([1.0, 0.0, 0.0], [0.0, 2.0, 0.0]);
    let c_anti = cosine_value(v, v.map(|x| -0.5 * x));
    let mut tape = Tape::new();
    let l = tape.constant(Tensor::zeros(vec![1]));
    let y = tape.constant(Tensor::ones(vec![1]));
    let bce = tape.bce_with_logits(l, y).unwrap();
    let bce = tape.value(bce).item();
    let ln2 = 2f64.ln();
    let pass = (e3 - 3f64.ln()).abs() <= 1e-6
        && (e2 - ln2).abs() <= 1e-6
        && e1.abs() <= 1e-7
        && c_eq.abs() <= 1e-8
        && (c_orth - 1.0).abs() <= 1e-8
        && (c_anti - 2.0).abs() <= 1e-8
        && (bce - ln2).abs() <= 1e-9;
    outcome(
        pass,
        format!(
            "H(K=3) err {:.1e}, H(K=2) err {:.1e}, H(one-hot) {:.1e}, cos {{{:.1e}, {:.1e}, {:.1e}}} err, bce err {:.1e}",
            (e3 - 3f64.ln()).abs(),
            (e2 - ln2).abs(),
            e1,
            c_eq.abs(),
            (c_orth - 1.0).abs(),
            (c_anti - 2.0).abs(),
            (bce - ln2).abs()
        ),
    )
}

// ---------------------------------------------------------------------------
// 4. Teacher symmetry

/// Per-pixel model, hence equivariant to any spatial permutation.
fn pointwise_model(t1: &Tensor, t2: &Tensor, _d: DomainId) -> Result<Tensor> {
    let (b, c, h, w) = t1.dims4()?;
    let plane = h * w;
    Tensor::new(
        vec![b, 1, h, w],
        (0..b * plane)
            .map(|i| {
                let (bi, j) = (i / plane, i % plane);
                let s: f64 = (0..c).map(|ch| (ch as f64 + 1.0) * (t1.data()[(bi * c + ch) * plane + j] - t2.data()[(bi * c + ch) * plane + j])).sum();
                1.0 / (1.0 + (-(2.0 * s + 0.1)).exp())
            })
            .collect(),
    )
}

fn criterion_4() -> Outcome {
    let mut worst_kd = 0.0f64;
    for seed in 0..10 {
        let t1 = common::randn(&[2, 3, 8, 8], 10 + seed);
        let t2 = common::randn(&[2, 3, 8, 8], 20 + seed);
        let teacher = build_teacher(&pointwise_model, &t1, &t2, DomainId(0), &HorizontalFlip).unwrap();
        let direct = pointwise_model(&t1, &t2, DomainId(0)).unwrap();
        let mut tape = Tape::new();
        let s = tape.leaf(direct.map(|p| (p / (1.0 - p)).ln()));
        let k = kd_loss(&mut tape, s, &teacher).unwrap();
        worst_kd = worst_kd.max(tape.value(k).item().abs());
    }
    let mut worst_equiv = 0.0f64;
    for seed in 0..3u64 {
        let model = UniRouteNet::new(ModelConfig::default(), 40 + seed).unwrap();
        let t1 = common::randn(&[1, 3, 32, 32], 50 + seed);
        let t2 = common::randn(&[1, 3, 32, 32], 60 + seed);
        let d = DomainId(seed as usize);
        let teacher = build_teacher(&model, &t1, &t2, d, &HorizontalFlip).unwrap();
        let flipped = build_teacher(&model, &t1.flip_w().unwrap(), &t2.flip_w().unwrap(), d, &HorizontalFlip).unwrap();
        worst_equiv = worst_equiv.max(flipped.max_abs_diff(&teacher.flip_w().unwrap()));
    }
    outcome(
        worst_kd <= 1e-10 && worst_equiv <= 1e-10,
        format!("L_kd for equivariant model max {worst_kd:.1e}, teacher flip identity max {worst_equiv:.1e}"),
    )
}

// ---------------------------------------------------------------------------
// 5. DSBN isolation

fn dsbn_pass(store: &ParamStore, l: &mut DsbnLayer, x: &Tensor, d: DomainId) {
    let mut ctx = Ctx::train(store, None);
    let xv = ctx.tape.constant(x.clone());
    l.forward_train(&mut ctx, xv, &vec![d; x.shape()[0]]).unwrap();
}

/// Noise re-centred so every batch has exactly the requested channel means.
fn offset_batch(rng: &mut Xoshiro256, offsets: &[f64]) -> Tensor {
    let c = offsets.len();
    let (b, plane) = (4, 64);
    let mut t = Tensor::randn(vec![b, c, 8, 8], 1.0, rng);
    let mut means = vec![0.0; c];
    for (i, v) in t.data().iter().enumerate() {
        means[(i / plane) % c] += v / (b * plane) as f64;
    }
    for (i, v) in t.data_mut().iter_mut().enumerate() {
        let ch = (i / plane) % c;
        *v += offsets[ch] - means[ch];
    }
    t
}

fn criterion_5() -> Outcome {
    let mut store = ParamStore::new();
    let mut l = DsbnLayer::new(&mut store, "bn", 0, 4, 3);
    let (a, b) = (DomainId(0), DomainId(1));
    for seed in 0..5 {
        dsbn_pass(&store, &mut l, &common::randn(&[2, 4, 5, 5], seed), a);
    }
    let snap = l.running[a.0].clone();
    for seed in 0..100 {
        dsbn_pass(&store, &mut l, &common::randn(&[2, 4, 5, 5], 1000 + seed).map(|v| 2.0 * v - 4.0), b);
    }
    let bits = |r: &uniroute::normalization::RunningStats| r.mean.iter().chain(&r.var).map(|v| v.to_bits()).collect::<Vec<_>>();
    let isolated = bits(&l.running[a.0]) == bits(&snap);

    let mut store = ParamStore::new();
    let mut l = DsbnLayer::new(&mut store, "bn", 0, 3, 3);
    let off_a = [0.0, -1.5, 2.0];
    let off_b = [5.0, 3.5, -7.0];
    let mut rng = Xoshiro256::seed_from(7);
    for _ in 0..500 {
        let xa = offset_batch(&mut rng, &off_a);
        let xb = offset_batch(&mut rng, &off_b);
        dsbn_pass(&store, &mut l, &xa, a);
        dsbn_pass(&store, &mut l, &xb, b);
    }
    let dev = (0..3)
        .map(|c| (l.running[a.0].mean[c] - off_a[c]).abs().max((l.running[b.0].mean[c] - off_b[c]).abs()))
        .fold(0.0, f64::max);
    outcome(isolated && dev <= 0.01, format!("domain A stats bit-identical after 100 B batches {isolated}, max running-mean deviation {dev:.2e}"))
}

// ---------------------------------------------------------------------------
// 6. MDR brute force

fn criterion_6() -> Outcome {
    let mut pixels = 0usize;
    let mut mismatches = 0usize;
    for seed in 0..20u64 {
        let mut store = ParamStore::new();
        let mut rng = Xoshiro256::seed_from(300 + seed);
        let emb = embedding(&mut store, &mut rng);
        let blk = MdrBlock::new(&mut store, "mdr", 8, emb, &mut rng);
        let f1 = common::randn(&[2, 8, 6, 6], 400 + seed);
        let f2 = common::randn(&[2, 8, 6, 6], 500 + seed);
        let mut ctx = Ctx::eval(&store);
        let (a, c) = (ctx.tape.constant(f1), ctx.tape.constant(f2));
        let prims = Primitive::ALL.map(|p| {
            let v = blk.primitive(&mut ctx, p, a, c).unwrap();
            ctx.tape.value(v).clone()
        });
        let (y, dec) = blk.forward(&mut ctx, a, c, DomainId(seed as usize % 3)).unwrap();
        let probs = ctx.tape.value(dec.probs).clone();
        let y = ctx.tape.value(y).clone();
        let (bn, ch, h, w) = y.dims4().unwrap();
        for bi in 0..bn {
            for yy in 0..h {
                for xx in 0..w {
                    let mut k = 0;
                    for j in 1..3 {
                        if probs.at4(bi, j, yy, xx) > probs.at4(bi, k, yy, xx) {
                            k = j;
                        }
                    }
                    pixels += 1;
                    if (0..ch).any(|cc| y.at4(bi, cc, yy, xx).to_bits() != prims[k].at4(bi, cc, yy, xx).to_bits()) {
                        mismatches += 1;
                    }
                }
            }
        }
    }
    outcome(mismatches == 0, format!("{mismatches} of {pixels} pixels differ from the argmax primitive"))
}

// ---------------------------------------------------------------------------
// 7-9. Training on the synthetic benchmark

struct Trained {
    /// Default model, one run per seed, with its training wall time.
    default: Vec<(uniroute::harness::ablate::VariantRun, Duration)>,
    ablation: AblationReport,
    scarce: AblationReport,
}

const DEFAULT_VARIANT: Variant = Variant::Fusion(Fusion::Mdr);

fn run_training() -> Trained {
    let base = TrainConfig::default();
    let data = Dataset::generate(&base.data.manifest().unwrap(), base.data.size).unwrap();
    let mut default = Vec::new();
    for &seed in &SEEDS {
        let start = Instant::now();
        let mut r = ablate(&base, &[DEFAULT_VARIANT], &[seed], &data, None).unwrap();
        let took = start.elapsed();
        let run = r.runs.remove(0);
        progress(&format!("default seed {seed}: mean F1 {:.4} in {:.0} s", run.test.mean_f1(), took.as_secs_f64()));
        default.push((run, took));
    }
    let mut ablation = AblationReport::default();
    for v in [
        Variant::Fusion(Fusion::SubOnly),
        Variant::Fusion(Fusion::ConcatOnly),
        Variant::Gate(GateMode::Soft),
        Variant::Gate(GateMode::Top1NoSte),
    ] {
        for &seed in &SEEDS {
            let r = ablate(&base, &[v], &[seed], &data, None).unwrap();
            progress(&format!("{} seed {seed}: mean F1 {:.4}", v.label(), r.runs[0].test.mean_f1()));
            ablation.runs.extend(r.runs);
        }
    }
    for (run, _) in &default {
        ablation.runs.push(run.clone());
    }

    let mut scarce_cfg = base.clone();
    scarce_cfg.data.sar_train = 60;
    let scarce_data = Dataset::generate(&scarce_cfg.data.manifest().unwrap(), scarce_cfg.data.size).unwrap();
    let mut scarce = AblationReport::default();
    for &seed in &SEEDS {
        let r = ablate(&scarce_cfg, &[Variant::Casd(true), Variant::Casd(false)], &[seed], &scarce_data, None).unwrap();
        progress(&format!(
            "scarce SAR seed {seed}: OPT_SAR F1 casd on {:.4}, off {:.4}",
            r.runs[0].test.f1(Modality::OptSar).unwrap_or(f64::NAN),
            r.runs[1].test.f1(Modality::OptSar).unwrap_or(f64::NAN)
        ));
        scarce.runs.extend(r.runs);
    }
    eprintln!("{ablation}");
    eprintln!("{scarce}");
    Trained { default, ablation, scarce }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn criterion_7(t: &Trained) -> Outcome {
    let med = |d: Modality| median(t.default.iter().map(|(r, _)| r.test.f1(d).unwrap_or(0.0)).collect());
    let slowest = t.default.iter().map(|(_, d)| d.as_secs_f64()).fold(0.0, f64::max);
    let f1: Vec<(Modality, f64)> = Modality::ALL.into_iter().map(|d| (d, med(d))).collect();
    let pass = slowest <= 1800.0 && f1.iter().all(|&(d, v)| v >= 0.80 && (d != Modality::OptOpt || v >= 0.85));
    let parts: Vec<String> = f1.iter().map(|(d, v)| format!("{} {v:.4}", d.name())).collect();
    outcome(pass, format!("median test F1 {}; slowest run {slowest:.0} s", parts.join(", ")))
}

fn mean_f1_median(r: &AblationReport, v: Variant) -> f64 {
    median(r.runs.iter().filter(|x| x.variant == v).map(|x| x.test.mean_f1()).collect())
}

fn criterion_8(t: &Trained) -> Outcome {
    let a = &t.ablation;
    let f = |v: Variant, d: Modality| a.median_f1(v, d).unwrap_or(f64::NAN);
    let (sar, opt) = (Modality::OptSar, Modality::OptOpt);
    let mdr_sar = f(DEFAULT_VARIANT, sar);
    let sub = Variant::Fusion(Fusion::SubOnly);
    let cat = Variant::Fusion(Fusion::ConcatOnly);
    let soft = Variant::Gate(GateMode::Soft);
    let no_ste = Variant::Gate(GateMode::Top1NoSte);
    let a_gap = mdr_sar - f(sub, sar);
    let a_opt = (f(sub, opt) - f(DEFAULT_VARIANT, opt)).abs();
    let pass_a = a_gap >= 0.03 && a_opt <= 0.01;
    let b_gap = mdr_sar - f(cat, sar);
    let pass_b = b_gap >= 0.01;
    let c_soft = mdr_sar - f(soft, sar);
    let c_nste = mean_f1_median(a, DEFAULT_VARIANT) - mean_f1_median(a, no_ste);
    let pass_c = c_soft > 0.0 && c_nste >= 0.10;
    let d_gap = t.scarce.median_f1(Variant::Casd(true), sar).unwrap_or(f64::NAN) - t.scarce.median_f1(Variant::Casd(false), sar).unwrap_or(f64::NAN);
    let pass_d = d_gap >= 0.01;
    let mark = |p: bool| if p { "ok" } else { "FAIL" };
    outcome(
        pass_a && pass_b && pass_c && pass_d,
        format!(
            "(a) sub_only SAR gap {:+.2} pts [{}], OPT diff {:.2} pts [{}]; (b) concat_only SAR gap {:+.2} pts [{}]; (c) soft SAR gap {:+.2} pts, top1_no_ste mean gap {:+.2} pts [{}]; (d) CASD scarce-SAR gain {:+.2} pts [{}]",
            100.0 * a_gap,
            mark(a_gap >= 0.03),
            100.0 * a_opt,
            mark(a_opt <= 0.01),
            100.0 * b_gap,
            mark(pass_b),
            100.0 * c_soft,
            100.0 * c_nste,
            mark(pass_c),
            100.0 * d_gap,
            mark(pass_d)
        ),
    )
}

fn criterion_9(t: &Trained) -> Outcome {
    let rate = |run: &uniroute::harness::ablate::VariantRun, d: Modality, f: &dyn Fn(&uniroute::harness::DomainReport) -> Option<f64>| {
        run.test.per_domain.get(&d).and_then(f).unwrap_or(f64::NAN)
    };
    let global = |r: &uniroute::harness::DomainReport| r.global_rate();
    let sub = |r: &uniroute::harness::DomainReport| r.primitive_rate(Primitive::Sub);
    let g_gap = median(t.default.iter().map(|(r, _)| rate(r, Modality::OptSar, &global) - rate(r, Modality::OptOpt, &global)).collect());
    let s_gap = median(t.default.iter().map(|(r, _)| rate(r, Modality::OptOpt, &sub) - rate(r, Modality::OptUav, &sub)).collect());
    outcome(
        g_gap >= 0.10 && s_gap >= 0.10,
        format!("global-expert rate SAR - OPT {:+.1} pp, subtraction rate OPT - UAV {:+.1} pp (median over seeds)", 100.0 * g_gap, 100.0 * s_gap),
    )
}

// ---------------------------------------------------------------------------
// 10. Reproducibility and formats

fn luminance(t: &Tensor) -> Vec<f64> {
    let p = t.shape()[1] * t.shape()[2];
    let d = t.data();
    (0..p).map(|j| (d[j] + d[p + j] + d[2 * p + j]) / 3.0).collect()
}

/// Offset `(ox, oy)` maximizing the normalized cross-correlation of a
/// central window of `a` against `b` displaced by up to `r` pixels.
fn correlation_peak(a: &[f64], b: &[f64], h: usize, w: usize, r: i64) -> (i64, i64) {
    let (h, w) = (h as i64, w as i64);
    let mut best = (f64::NEG_INFINITY, (0, 0));
    for oy in -r..=r {
        for ox in -r..=r {
            let mut pairs = Vec::new();
            for y in r..h - r {
                for x in r..w - r {
                    pairs.push((a[(y * w + x) as usize], b[((y + oy) * w + x + ox) as usize]));
                }
            }
            let n = pairs.len() as f64;
            let ma = pairs.iter().map(|p| p.0).sum::<f64>() / n;
            let mb = pairs.iter().map(|p| p.1).sum::<f64>() / n;
            let (mut s, mut sa, mut sb) = (0.0, 0.0, 0.0);
            for (va, vb) in pairs {
                s += (va - ma) * (vb - mb);
                sa += (va - ma).powi(2);
                sb += (vb - mb).powi(2);
            }
            let c = s / (sa * sb).sqrt();
            if c > best.0 {
                best = (c, (ox, oy));
            }
        }
    }
    best.1
}

fn criterion_10() -> Outcome {
    let mut cfg = TrainConfig::default();
    cfg.data.train = 8;
    cfg.data.sar_train = 8;
    cfg.data.val = 4;
    cfg.data.test = 4;
    cfg.data.size = 32;
    cfg.stage1.epochs = 2;
    cfg.stage2.epochs = 1;
    let data = Dataset::generate(&cfg.data.manifest().unwrap(), cfg.data.size).unwrap();
    let data_again = Dataset::generate(&cfg.data.manifest().unwrap(), cfg.data.size).unwrap();
    let same_data = data.test.iter().zip(&data_again.test).all(|(a, b)| a.t1.bit_eq(&b.t1) && a.t2.bit_eq(&b.t2) && a.gt.bit_eq(&b.gt));

    let dir = tempfile::tempdir().unwrap();
    let (a, log_a) = train(&cfg, &data, Some(dir.path())).unwrap();
    let (b, log_b) = train(&cfg, &data, None).unwrap();
    let totals = |l: &MetricsLog| l.steps.iter().map(|s| s.total.to_bits()).collect::<Vec<_>>();
    let test_a = evaluate(a.model(), &data.test, None, 16).unwrap();
    let test_b = evaluate(b.model(), &data.test, None, 16).unwrap();
    let bit_identical = totals(&log_a) == totals(&log_b)
        && a.model().params.ids().all(|id| a.model().params.get(id).bit_eq(b.model().params.get(id)))
        && test_a == test_b;

    let path = dir.path().join("roundtrip.urkt");
    a.model().save(&path).unwrap();
    let back = UniRouteNet::load(&path).unwrap();
    let sample = &data.test[0];
    let batch = |t: &Tensor| {
        let mut s = vec![1];
        s.extend_from_slice(t.shape());
        t.clone().reshape(s).unwrap()
    };
    let (t1, t2) = (batch(&sample.t1), batch(&sample.t2));
    let checkpoint_ok = back.config == a.model().config
        && a.model().params.ids().all(|id| a.model().params.get(id).bit_eq(back.params.get(id)))
        && a.model().dsbn_layers().zip(back.dsbn_layers()).all(|(x, y)| x.running == y.running)
        && a.model().logits(&t1, &t2, sample.domain).unwrap().bit_eq(&back.logits(&t1, &t2, sample.domain).unwrap());

    let mut pgm_ok = true;
    for block in 0..a.model().decision_kinds().len() {
        let p = dir.path().join(format!("block{block}.pgm"));
        let map = export_routing_map(a.model(), sample, block, &p).unwrap();
        let (w, h, px) = read_pgm(&p).unwrap();
        pgm_ok &= RoutingMap::from_grey(map.kind, w, h, &px).map(|m| m == map).unwrap_or(false);
    }

    let mut gen_ok = true;
    for m in Modality::ALL {
        for seed in 0..5 {
            let spec = SceneSpec::new(seed, m);
            let (x, y) = (generate(&spec).unwrap(), generate(&spec).unwrap());
            gen_ok &= x.t1.bit_eq(&y.t1) && x.t2.bit_eq(&y.t2) && x.gt.bit_eq(&y.gt);
        }
    }

    let sp = Speckle::default();
    let mut rng = Xoshiro256::seed_from(2024);
    let n = 1_000_000;
    let speckle_mean = (0..n).map(|_| sp.sample(&mut rng)).sum::<f64>() / n as f64;

    let mut recovered = 0;
    let shifts = [(3i64, -2i64), (0, 0), (-1, 3), (-3, -3), (2, 1)];
    for (i, &shift) in shifts.iter().enumerate() {
        let spec = SceneSpec {
            shift: Some(shift),
            ..SceneSpec::new(70 + i as u64, Modality::OptUav)
        };
        let s = generate(&spec).unwrap();
        let (h, w) = (s.t1.shape()[1], s.t1.shape()[2]);
        if correlation_peak(&luminance(&s.t1), &luminance(&s.t2), h, w, 5) == shift {
            recovered += 1;
        }
    }

    let pass = same_data && bit_identical && checkpoint_ok && pgm_ok && gen_ok && (0.995..=1.005).contains(&speckle_mean) && recovered == shifts.len();
    outcome(
        pass,
        format!(
            "runs bit-identical {bit_identical}, checkpoint round trip {checkpoint_ok}, PGM round trip {pgm_ok}, generator deterministic {}, speckle mean {speckle_mean:.4}, shifts recovered {recovered}/{}",
            gen_ok && same_data,
            shifts.len()
        ),
    )
}

// ---------------------------------------------------------------------------

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    match panic::catch_unwind(AssertUnwindSafe(f)) {
        Ok(o) => o,
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            outcome(false, format!("panicked: {msg}"))
        }
    }
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    if args.iter().any(|a| a == "--list") {
        return;
    }
    let selected: Option<Vec<usize>> = std::env::var("UNIROUTE_ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |n: usize| selected.as_ref().is_none_or(|s| s.contains(&n));

    let names = [
        "gradient suite",
        "straight-through contract",
        "analytic loss values",
        "teacher symmetry",
        "DSBN isolation",
        "MDR brute force",
        "desk-scale end-to-end",
        "directional ablations",
        "routing statistics",
        "reproducibility and formats",
    ];
    let mut results: Vec<(usize, Outcome)> = Vec::new();
    let mut report = |n: usize, o: Outcome| {
        println!("criterion {n:>2} {:<28} {}  {}", names[n - 1], if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, o));
    };
    let quick: [(usize, fn() -> Outcome); 7] = [
        (1, criterion_1),
        (2, criterion_2),
        (3, criterion_3),
        (4, criterion_4),
        (5, criterion_5),
        (6, criterion_6),
        (10, criterion_10),
    ];
    for (n, f) in quick.iter().take(6) {
        if wanted(*n) {
            report(*n, guarded(*f));
        }
    }
    if wanted(7) || wanted(8) || wanted(9) {
        match panic::catch_unwind(run_training) {
            Ok(t) => {
                for (n, f) in [(7, criterion_7 as fn(&Trained) -> Outcome), (8, criterion_8), (9, criterion_9)] {
                    if wanted(n) {
                        report(n, guarded(|| f(&t)));
                    }
                }
            }
            Err(_) => {
                for n in [7, 8, 9] {
                    if wanted(n) {
                        report(n, outcome(false, "training panicked"));
                    }
                }
            }
        }
    }
    if wanted(10) {
        report(10, guarded(quick[6].1));
    }
    let failed: Vec<usize> = results.iter().filter(|(_, o)| !o.pass).map(|(n, _)| *n).collect();
    println!("acceptance: {} passed, {} failed", results.len() - failed.len(), failed.len());
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
