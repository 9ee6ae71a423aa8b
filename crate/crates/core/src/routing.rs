//! Domain-conditioned gating and the two hard-routed mixtures: the
//! receptive-field mixture (local vs. global expert) and the difference
//! mixture (subtraction, concatenation, multiplication).

use std::fmt;
use std::str::FromStr;

use crate::error::{ensure, Error, Result};
use crate::experts::{GlobalContextExpert, LocalDetailExpert};
use crate::params::{lecun_normal, Ctx, DomainId, ParamId, ParamRole, ParamStore};
use crate::rng::Xoshiro256;
use crate::tensor::{Tape, Tensor, Var};

pub const DOMAIN_DIM: usize = 16;

/// How a gate turns probabilities into a mixing mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateMode {
    /// Hard forward decision, identity gradient into the probabilities.
    SteHard,
    /// Probability-weighted sum of all experts.
    Soft,
    /// Straight-through Gumbel: noisy hard forward, tempered softmax backward.
    Gumbel,
    /// Hard forward decision with no gradient path to the gate.
    Top1NoSte,
}

impl GateMode {
    pub fn as_str(self) -> &'static str {
        match self {
            GateMode::SteHard => "ste_hard",
            GateMode::Soft => "soft",
            GateMode::Gumbel => "gumbel",
            GateMode::Top1NoSte => "top1_no_ste",
        }
    }
}

impl fmt::Display for GateMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GateMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ste_hard" | "ste" => Ok(GateMode::SteHard),
            "soft" => Ok(GateMode::Soft),
            "gumbel" => Ok(GateMode::Gumbel),
            "top1_no_ste" => Ok(GateMode::Top1NoSte),
            other => Err(Error::Usage(format!("unknown gate mode {other:?}"))),
        }
    }
}

/// Learned per-domain code shared by every gate of a network.
#[derive(Debug, Clone, Copy)]
pub struct DomainEmbedding {
    pub table: ParamId,
    pub n_domains: usize,
    pub dim: usize,
}

impl DomainEmbedding {
    pub fn new(store: &mut ParamStore, n_domains: usize, dim: usize, rng: &mut Xoshiro256) -> Self {
        let table = store.add("domain_embedding", ParamRole::Gate, Tensor::randn(vec![n_domains, dim], 1.0, rng));
        Self { table, n_domains, dim }
    }

    pub fn check(&self, domain: DomainId) -> Result<()> {
        if domain.0 >= self.n_domains {
            return Err(Error::UnknownDomain(domain.0));
        }
        Ok(())
    }

    /// The embedding row of `domain` as a `[1, dim, 1, 1]` variable.
    pub fn lookup(&self, ctx: &mut Ctx, domain: DomainId) -> Result<Var> {
        self.check(domain)?;
        let table = ctx.p(self.table);
        ctx.tape.embed_row(table, domain.0)
    }
}

/// `σ(W_g(γ(z) ⊙ φ(x) + β(z)))` evaluated per pixel (or per pooled cell).
#[derive(Debug, Clone)]
pub struct GateNetwork {
    pub c_in: usize,
    pub c_g: usize,
    pub k_out: usize,
    pub phi_w: ParamId,
    pub phi_b: ParamId,
    pub gamma_w: ParamId,
    pub gamma_b: ParamId,
    pub beta_w: ParamId,
    pub beta_b: ParamId,
    pub wg_w: ParamId,
    pub wg_b: ParamId,
    pub embedding: DomainEmbedding,
    pub mode: GateMode,
    pub tau: f64,
    pub pool: usize,
}

pub fn gate_width(c_in: usize) -> usize {
    (c_in / 4).max(8)
}

impl GateNetwork {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        c_in: usize,
        k_out: usize,
        embedding: DomainEmbedding,
        rng: &mut Xoshiro256,
    ) -> Self {
        let c_g = gate_width(c_in);
        let dz = embedding.dim;
        let mut add = |name: &str, t: Tensor| store.add(format!("{prefix}.{name}"), ParamRole::Gate, t);
        let phi_w = add("phi_w", lecun_normal(vec![c_g, c_in, 1, 1], c_in, rng));
        let phi_b = add("phi_b", Tensor::zeros(vec![c_g]));
        let gamma_w = add("gamma_w", Tensor::randn(vec![c_g, dz, 1, 1], 0.5 / (dz as f64).sqrt(), rng));
        let gamma_b = add("gamma_b", Tensor::ones(vec![c_g]));
        let beta_w = add("beta_w", Tensor::randn(vec![c_g, dz, 1, 1], 0.5 / (dz as f64).sqrt(), rng));
        let beta_b = add("beta_b", Tensor::zeros(vec![c_g]));
        let wg_w = add("wg_w", lecun_normal(vec![k_out, c_g, 1, 1], c_g, rng));
        let wg_b = add("wg_b", Tensor::zeros(vec![k_out]));
        Self {
            c_in,
            c_g,
            k_out,
            phi_w,
            phi_b,
            gamma_w,
            gamma_b,
            beta_w,
            beta_b,
            wg_w,
            wg_b,
            embedding,
            mode: GateMode::SteHard,
            tau: 1.0,
            pool: 1,
        }
    }

    /// Pre-sigmoid gate logits `[B, K, H/pool, W/pool]`.
    pub fn logits(&self, ctx: &mut Ctx, x: Var, domain: DomainId) -> Result<Var> {
        let shape = ctx.tape.shape(x).to_vec();
        ensure!(shape.len() == 4 && shape[1] == self.c_in, "gate: expected [B,{},H,W], got {:?}", self.c_in, shape);
        let z = self.embedding.lookup(ctx, domain)?;
        let x = if self.pool > 1 { ctx.tape.avg_pool(x, self.pool)? } else { x };
        let (pw, pb) = (ctx.p(self.phi_w), ctx.p(self.phi_b));
        let phi = ctx.tape.pointwise_conv(x, pw, Some(pb))?;
        let (gw, gb, bw, bb) = (ctx.p(self.gamma_w), ctx.p(self.gamma_b), ctx.p(self.beta_w), ctx.p(self.beta_b));
        let gamma = ctx.tape.pointwise_conv(z, gw, Some(gb))?;
        let beta = ctx.tape.pointwise_conv(z, bw, Some(bb))?;
        let modulated = ctx.tape.mul(phi, gamma)?;
        let modulated = ctx.tape.add(modulated, beta)?;
        let (ww, wb) = (ctx.p(self.wg_w), ctx.p(self.wg_b));
        ctx.tape.pointwise_conv(modulated, ww, Some(wb))
    }

    /// Gate probabilities.
    pub fn forward(&self, ctx: &mut Ctx, x: Var, domain: DomainId) -> Result<Var> {
        let l = self.logits(ctx, x, domain)?;
        Ok(ctx.tape.sigmoid(l))
    }
}

/// `1(g > 0.5)` as a tensor; the tie `g == 0.5` maps to 0.
pub fn threshold_mask(g: &Tensor) -> Tensor {
    g.map(|v| if v > 0.5 { 1.0 } else { 0.0 })
}

/// Per-pixel one-hot of the channel argmax; ties go to the lowest index.
pub fn argmax_one_hot(p: &Tensor) -> Result<Tensor> {
    let (bn, k, h, w) = p.dims4()?;
    let plane = h * w;
    let src = p.data();
    let mut out = vec![0.0; src.len()];
    for b in 0..bn {
        for j in 0..plane {
            let mut best = 0;
            for c in 1..k {
                if src[(b * k + c) * plane + j] > src[(b * k + best) * plane + j] {
                    best = c;
                }
            }
            out[(b * k + best) * plane + j] = 1.0;
        }
    }
    Tensor::new(p.shape().to_vec(), out)
}

/// Binary straight-through mask: forward `1(g > 0.5)`, backward identity.
pub fn ste_binary(tape: &mut Tape, g: Var) -> Result<Var> {
    let hard = threshold_mask(tape.value(g));
    tape.straight_through(hard, g)
}

/// Top-1 straight-through mask over channels.
pub fn ste_top1(tape: &mut Tape, probs: Var) -> Result<Var> {
    let shape = tape.shape(probs);
    ensure!(shape.len() == 4 && shape[1] >= 2, "ste_top1: need [B,K>=2,H,W], got {:?}", shape);
    let hard = argmax_one_hot(tape.value(probs))?;
    tape.straight_through(hard, probs)
}

/// The hard decision with no gradient path. Binary for `K == 1`, one-hot otherwise.
pub fn top1_no_ste(tape: &mut Tape, probs: Var) -> Result<Var> {
    let v = tape.value(probs);
    let hard = if v.shape().get(1) == Some(&1) { threshold_mask(v) } else { argmax_one_hot(v)? };
    Ok(tape.constant(hard))
}

/// `Σ_k w_k ⊙ outputs_k` with `w: [B, K, H, W]`.
pub fn soft_mix(tape: &mut Tape, weights: Var, outputs: &[Var]) -> Result<Var> {
    ensure!(tape.shape(weights)[1] == outputs.len(), "soft_mix: {} weights for {} outputs", tape.shape(weights)[1], outputs.len());
    let mut acc: Option<Var> = None;
    for (k, &o) in outputs.iter().enumerate() {
        let wk = tape.slice_channels(weights, k, 1)?;
        let term = tape.mul(o, wk)?;
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
    }
    acc.ok_or_else(|| Error::Contract("soft_mix: no outputs".into()))
}

/// Straight-through Gumbel top-1 over `K ≥ 2` logits: one-hot of
/// `argmax(logits + G)` forward, `softmax((logits + G)/τ)` backward.
/// `noise = None` disables the Gumbel perturbation.
pub fn gumbel_top1(tape: &mut Tape, logits: Var, tau: f64, noise: Option<&mut Xoshiro256>) -> Result<Var> {
    ensure!(tau > 0.0, "gumbel_top1: temperature must be positive, got {}", tau);
    let perturbed = perturb(tape, logits, noise);
    let soft = tape.softmax_channels(perturbed, tau)?;
    let hard = argmax_one_hot(tape.value(perturbed))?;
    tape.straight_through(hard, soft)
}

/// Binary straight-through Gumbel for a single logit: the two-class case
/// with class logits `(0, l)`, whose tempered softmax is `σ((l + G₁ − G₀)/τ)`.
pub fn gumbel_binary(tape: &mut Tape, logit: Var, tau: f64, noise: Option<&mut Xoshiro256>) -> Result<Var> {
    ensure!(tau > 0.0, "gumbel_binary: temperature must be positive, got {}", tau);
    let perturbed = match noise {
        Some(rng) => {
            let shape = tape.shape(logit).to_vec();
            let n: usize = shape.iter().product();
            let g = Tensor::new(shape, (0..n).map(|_| rng.gumbel() - rng.gumbel()).collect())?;
            let g = tape.constant(g);
            tape.add(logit, g)?
        }
        None => logit,
    };
    let scaled = tape.affine(perturbed, 1.0 / tau, 0.0);
    let soft = tape.sigmoid(scaled);
    let hard = threshold_mask(tape.value(soft));
    tape.straight_through(hard, soft)
}

fn perturb(tape: &mut Tape, logits: Var, noise: Option<&mut Xoshiro256>) -> Var {
    match noise {
        Some(rng) => {
            let shape = tape.shape(logits).to_vec();
            let n: usize = shape.iter().product();
            let g = Tensor::new(shape, (0..n).map(|_| rng.gumbel()).collect()).expect("shape product matches");
            let g = tape.constant(g);
            tape.add(logits, g).expect("identical shapes")
        }
        None => logits,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    /// Receptive-field mixture; one logit, experts (local, global).
    Ar2,
    /// Difference mixture; three logits (sub, cat, mul).
    Mdr,
}

/// Gate output of one routed block for one forward pass.
#[derive(Debug, Clone)]
pub struct RoutingDecision {
    pub kind: BlockKind,
    /// Gate probabilities on the tape, `[B, 1, h, w]` for the receptive-field
    /// mixture and `[B, 3, h, w]` for the difference mixture. Detached when
    /// the gate mode has no gradient path.
    pub probs: Var,
    /// Pre-sigmoid gate logits, detached together with `probs`.
    pub logits: Var,
    /// Forward routing: `[B, 1, h, w]` in {0, 1} (1 = global expert) or a
    /// `[B, 3, h, w]` one-hot.
    pub hard_mask: Tensor,
    /// Fraction of pixels routed to each expert, in expert order.
    pub selection_rate: Vec<f64>,
}

impl RoutingDecision {
    fn new(kind: BlockKind, probs: Var, logits: Var, hard_mask: Tensor) -> Self {
        let selection_rate = selection_rates(kind, &hard_mask);
        Self {
            kind,
            probs,
            logits,
            hard_mask,
            selection_rate,
        }
    }

    /// Per-pixel expert index map of batch item `b`.
    pub fn expert_map(&self, b: usize) -> Vec<usize> {
        let (_, k, h, w) = self.hard_mask.dims4().expect("rank-4 mask");
        let plane = h * w;
        let m = self.hard_mask.data();
        (0..plane)
            .map(|j| {
                if k == 1 {
                    usize::from(m[b * plane + j] > 0.5)
                } else {
                    (0..k).find(|&c| m[(b * k + c) * plane + j] > 0.5).unwrap_or(0)
                }
            })
            .collect()
    }
}

pub fn selection_rates(kind: BlockKind, hard_mask: &Tensor) -> Vec<f64> {
    let n = hard_mask.len() as f64;
    match kind {
        BlockKind::Ar2 => {
            let global = hard_mask.sum() / n;
            vec![1.0 - global, global]
        }
        BlockKind::Mdr => {
            let (bn, k, h, w) = hard_mask.dims4().expect("rank-4 mask");
            let plane = h * w;
            let total = (bn * plane) as f64;
            let m = hard_mask.data();
            (0..k)
                .map(|c| (0..bn).map(|b| m[(b * k + c) * plane..(b * k + c + 1) * plane].iter().sum::<f64>()).sum::<f64>() / total)
                .collect()
        }
    }
}

/// Turns gate logits into the mixing mask used by the assembly, plus the
/// probabilities recorded in the decision and the forward hard mask.
fn route(ctx: &mut Ctx, gate: &GateNetwork, logits: Var, kind: BlockKind) -> Result<(Var, Var, Var, Tensor)> {
    let probs = ctx.tape.sigmoid(logits);
    let train = ctx.is_train();
    let mut logits_out = logits;
    let (mask, probs) = match (gate.mode, kind) {
        (GateMode::SteHard, BlockKind::Ar2) => (ste_binary(&mut ctx.tape, probs)?, probs),
        (GateMode::SteHard, BlockKind::Mdr) => (ste_top1(&mut ctx.tape, probs)?, probs),
        (GateMode::Soft, BlockKind::Ar2) => (probs, probs),
        (GateMode::Soft, BlockKind::Mdr) => (renormalize(&mut ctx.tape, probs)?, probs),
        (GateMode::Gumbel, kind) => {
            let noise = if train { ctx.rng.as_mut() } else { None };
            let mask = match kind {
                BlockKind::Ar2 => gumbel_binary(&mut ctx.tape, logits, gate.tau, noise)?,
                BlockKind::Mdr => gumbel_top1(&mut ctx.tape, logits, gate.tau, noise)?,
            };
            (mask, probs)
        }
        (GateMode::Top1NoSte, _) => {
            let mask = top1_no_ste(&mut ctx.tape, probs)?;
            let probs = ctx.tape.detach(probs);
            logits_out = ctx.tape.detach(logits);
            (mask, probs)
        }
    };
    let hard = match gate.mode {
        GateMode::Gumbel | GateMode::SteHard | GateMode::Top1NoSte => ctx.tape.value(mask).clone(),
        GateMode::Soft => match kind {
            BlockKind::Ar2 => threshold_mask(ctx.tape.value(probs)),
            BlockKind::Mdr => argmax_one_hot(ctx.tape.value(probs))?,
        },
    };
    Ok((mask, probs, logits_out, hard))
}

/// `p / Σ_k p` per pixel.
pub fn renormalize(tape: &mut Tape, p: Var) -> Result<Var> {
    let s = tape.sum_channels(p)?;
    tape.div(p, s)
}

/// Receptive-field mixture: `y = (1 − M) ⊙ E_local(x) + M ⊙ E_global(x) + x`.
#[derive(Debug, Clone)]
pub struct Ar2Block {
    pub local: LocalDetailExpert,
    pub global: GlobalContextExpert,
    pub gate: GateNetwork,
}

impl Ar2Block {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize, embedding: DomainEmbedding, rng: &mut Xoshiro256) -> Self {
        Self {
            local: LocalDetailExpert::new(store, &format!("{prefix}.local"), channels, rng),
            global: GlobalContextExpert::new(store, &format!("{prefix}.global"), channels, rng),
            gate: GateNetwork::new(store, &format!("{prefix}.gate"), channels, 1, embedding, rng),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var, domain: DomainId) -> Result<(Var, RoutingDecision)> {
        ensure!(self.gate.k_out == 1, "receptive-field gate must emit one logit");
        let e_local = self.local.forward(ctx, x)?;
        let e_global = self.global.forward(ctx, x)?;
        let logits = self.gate.logits(ctx, x, domain)?;
        let (mask, probs, logits, hard) = route(ctx, &self.gate, logits, BlockKind::Ar2)?;
        let mask = upsample_mask(&mut ctx.tape, mask, self.gate.pool)?;
        let keep = ctx.tape.one_minus(mask);
        let a = ctx.tape.mul(e_local, keep)?;
        let b = ctx.tape.mul(e_global, mask)?;
        let mixed = ctx.tape.add(a, b)?;
        let y = ctx.tape.add(mixed, x)?;
        Ok((y, RoutingDecision::new(BlockKind::Ar2, probs, logits, hard)))
    }
}

fn upsample_mask(tape: &mut Tape, mask: Var, pool: usize) -> Result<Var> {
    if pool > 1 {
        tape.upsample(mask, pool)
    } else {
        Ok(mask)
    }
}

/// One difference primitive: a pointwise projection of a raw interaction.
#[derive(Debug, Clone, Copy)]
pub struct Projection {
    pub w: ParamId,
    pub b: ParamId,
}

impl Projection {
    pub fn new(store: &mut ParamStore, prefix: &str, c_in: usize, c_out: usize, rng: &mut Xoshiro256) -> Self {
        Self {
            w: store.add(format!("{prefix}.w"), ParamRole::Weight, lecun_normal(vec![c_out, c_in, 1, 1], c_in, rng)),
            b: store.add(format!("{prefix}.b"), ParamRole::Weight, Tensor::zeros(vec![c_out])),
        }
    }

    pub fn apply(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let (w, b) = (ctx.p(self.w), ctx.p(self.b));
        ctx.tape.pointwise_conv(x, w, Some(b))
    }
}

/// Difference primitive, in gate channel order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Primitive {
    Sub = 0,
    Cat = 1,
    Mul = 2,
}

impl Primitive {
    pub const ALL: [Primitive; 3] = [Primitive::Sub, Primitive::Cat, Primitive::Mul];
}

/// `proj(f1 − f2)`, `proj([f1, f2])` or `proj(f1 ⊙ f2)`.
pub fn apply_primitive(ctx: &mut Ctx, which: Primitive, proj: Projection, f1: Var, f2: Var) -> Result<Var> {
    let raw = match which {
        Primitive::Sub => ctx.tape.sub(f1, f2)?,
        Primitive::Cat => ctx.tape.concat_channels(f1, f2)?,
        Primitive::Mul => ctx.tape.mul(f1, f2)?,
    };
    proj.apply(ctx, raw)
}

impl Primitive {
    /// Input width of the projection for `C`-channel features.
    pub fn input_width(self, channels: usize) -> usize {
        match self {
            Primitive::Cat => 2 * channels,
            _ => channels,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Primitive::Sub => "sub",
            Primitive::Cat => "cat",
            Primitive::Mul => "mul",
        }
    }
}

/// Difference mixture: `M_diff = Σ_k Z_k ⊙ P_k(f1, f2)`.
#[derive(Debug, Clone)]
pub struct MdrBlock {
    pub channels: usize,
    pub sub: Projection,
    pub cat: Projection,
    pub mul: Projection,
    pub gate: GateNetwork,
}

impl MdrBlock {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize, embedding: DomainEmbedding, rng: &mut Xoshiro256) -> Self {
        Self {
            channels,
            sub: Projection::new(store, &format!("{prefix}.p_sub"), channels, channels, rng),
            cat: Projection::new(store, &format!("{prefix}.p_cat"), 2 * channels, channels, rng),
            mul: Projection::new(store, &format!("{prefix}.p_mul"), channels, channels, rng),
            gate: GateNetwork::new(store, &format!("{prefix}.gate"), 2 * channels, 3, embedding, rng),
        }
    }

    /// A single primitive evaluated densely.
    pub fn primitive(&self, ctx: &mut Ctx, which: Primitive, f1: Var, f2: Var) -> Result<Var> {
        self.check(ctx, f1, f2)?;
        let proj = match which {
            Primitive::Sub => self.sub,
            Primitive::Cat => self.cat,
            Primitive::Mul => self.mul,
        };
        apply_primitive(ctx, which, proj, f1, f2)
    }

    fn check(&self, ctx: &Ctx, f1: Var, f2: Var) -> Result<()> {
        let (s1, s2) = (ctx.tape.shape(f1), ctx.tape.shape(f2));
        ensure!(s1 == s2, "difference mixture: feature shapes {:?} and {:?} differ", s1, s2);
        ensure!(s1.len() == 4 && s1[1] == self.channels, "difference mixture: expected [B,{},H,W], got {:?}", self.channels, s1);
        Ok(())
    }

    pub fn forward(&self, ctx: &mut Ctx, f1: Var, f2: Var, domain: DomainId) -> Result<(Var, RoutingDecision)> {
        self.check(ctx, f1, f2)?;
        let prims = [
            self.primitive(ctx, Primitive::Sub, f1, f2)?,
            self.primitive(ctx, Primitive::Cat, f1, f2)?,
            self.primitive(ctx, Primitive::Mul, f1, f2)?,
        ];
        let pair = ctx.tape.concat_channels(f1, f2)?;
        let logits = self.gate.logits(ctx, pair, domain)?;
        let (mask, probs, logits, hard) = route(ctx, &self.gate, logits, BlockKind::Mdr)?;
        let mask = upsample_mask(&mut ctx.tape, mask, self.gate.pool)?;
        let fused = soft_mix(&mut ctx.tape, mask, &prims)?;
        Ok((fused, RoutingDecision::new(BlockKind::Mdr, probs, logits, hard)))
    }
}
