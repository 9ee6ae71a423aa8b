//! Consistency-aware self-distillation: the flip-TTA teacher, the four
//! loss terms and their stage-wise activation.

use std::fmt;

use crate::error::{ensure, Error, Result};
use crate::params::DomainId;
use crate::routing::{renormalize, BlockKind, RoutingDecision};
use crate::tensor::{Tape, Tensor, Var};

pub const ENTROPY_EPS: f64 = 1e-8;
pub const COSINE_EPS: f64 = 1e-8;
pub const DICE_EPS: f64 = 1.0;

/// Which auxiliary terms a training stage uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    /// seg + cons + ent.
    Pretrain,
    /// seg + cons + kd (teacher required).
    Finetune,
    /// seg only; fine-tuning with self-distillation disabled.
    Plain,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
            Stage::Plain => "plain",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pretrain" | "1" => Ok(Stage::Pretrain),
            "finetune" | "2" => Ok(Stage::Finetune),
            "plain" => Ok(Stage::Plain),
            other => Err(Error::Usage(format!("unknown stage {other:?}"))),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Term {
    Seg,
    Cons,
    Kd,
    Ent,
}

impl Term {
    pub fn as_str(self) -> &'static str {
        match self {
            Term::Seg => "seg",
            Term::Cons => "cons",
            Term::Kd => "kd",
            Term::Ent => "ent",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_cons: f64,
    pub lambda_kd: f64,
    pub lambda_ent: f64,
    pub stage: Stage,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_cons: 0.1,
            lambda_kd: 1.0,
            lambda_ent: 0.01,
            stage: Stage::Pretrain,
        }
    }
}

impl LossWeights {
    pub fn with_stage(self, stage: Stage) -> Self {
        Self { stage, ..self }
    }

    /// Terms the stage allows, independent of weight values.
    pub fn stage_terms(&self) -> &'static [Term] {
        match self.stage {
            Stage::Pretrain => &[Term::Seg, Term::Cons, Term::Ent],
            Stage::Finetune => &[Term::Seg, Term::Cons, Term::Kd],
            Stage::Plain => &[Term::Seg],
        }
    }

    /// Weight actually applied to `term` after the stage gate.
    pub fn effective(&self, term: Term) -> f64 {
        if !self.stage_terms().contains(&term) {
            return 0.0;
        }
        match term {
            Term::Seg => 1.0,
            Term::Cons => self.lambda_cons,
            Term::Kd => self.lambda_kd,
            Term::Ent => self.lambda_ent,
        }
    }

    /// Terms whose requested nonzero weight the stage gate zeroed.
    pub fn forced_zero(&self) -> Vec<Term> {
        [(Term::Cons, self.lambda_cons), (Term::Kd, self.lambda_kd), (Term::Ent, self.lambda_ent)]
            .into_iter()
            .filter(|&(t, l)| l != 0.0 && !self.stage_terms().contains(&t))
            .map(|(t, _)| t)
            .collect()
    }

    pub fn teacher_required(&self) -> bool {
        self.stage == Stage::Finetune
    }
}

/// Scalar loss terms on the tape. `kd` is present exactly when a
/// teacher was built.
#[derive(Debug, Clone, Copy)]
pub struct LossInputs {
    pub seg: Var,
    pub cons: Option<Var>,
    pub kd: Option<Var>,
    pub ent: Option<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub seg: f64,
    pub cons: Option<f64>,
    pub kd: Option<f64>,
    pub ent: Option<f64>,
    pub total: f64,
    pub stage: Stage,
    pub lambda_cons: f64,
    pub lambda_kd: f64,
    pub lambda_ent: f64,
    pub active_terms: Vec<Term>,
    pub forced_zero: Vec<Term>,
}

/// `L_seg + λ_cons L_cons + λ_kd L_kd + λ_ent L_ent` under the stage gate.
/// Terms outside the stage are reported as absent; zero-weight terms are
/// reported but add nothing.
pub fn total_loss(tape: &mut Tape, inputs: LossInputs, w: &LossWeights) -> Result<(Var, LossReport)> {
    match (w.teacher_required(), inputs.kd.is_some()) {
        (true, false) => return Err(Error::Contract(format!("stage {} requires a teacher", w.stage))),
        (false, true) => return Err(Error::Contract(format!("stage {} must not use a teacher", w.stage))),
        _ => {}
    }
    let scalar = |tape: &Tape, v: Var| -> Result<f64> {
        ensure!(tape.value(v).len() == 1, "loss terms must be scalars");
        Ok(tape.value(v).data()[0])
    };
    let mut total = inputs.seg;
    let mut active = vec![Term::Seg];
    let mut report = LossReport {
        seg: scalar(tape, inputs.seg)?,
        cons: None,
        kd: None,
        ent: None,
        total: 0.0,
        stage: w.stage,
        lambda_cons: w.effective(Term::Cons),
        lambda_kd: w.effective(Term::Kd),
        lambda_ent: w.effective(Term::Ent),
        active_terms: Vec::new(),
        forced_zero: w.forced_zero(),
    };
    for (term, var) in [(Term::Cons, inputs.cons), (Term::Kd, inputs.kd), (Term::Ent, inputs.ent)] {
        let Some(v) = var else { continue };
        if !w.stage_terms().contains(&term) {
            continue;
        }
        let value = scalar(tape, v)?;
        match term {
            Term::Cons => report.cons = Some(value),
            Term::Kd => report.kd = Some(value),
            Term::Ent => report.ent = Some(value),
            Term::Seg => unreachable!(),
        }
        active.push(term);
        let lambda = w.effective(term);
        if lambda != 0.0 {
            let scaled = tape.affine(v, lambda, 0.0);
            total = tape.add(total, scaled)?;
        }
    }
    report.total = scalar(tape, total)?;
    report.active_terms = active;
    Ok((total, report))
}

/// `BCE(logits, gt) + Dice(σ(logits), gt)` with dice smoothing 1.
pub fn seg_loss(tape: &mut Tape, logits: Var, gt: Var) -> Result<Var> {
    ensure!(tape.shape(logits) == tape.shape(gt), "seg loss: logits {:?} vs gt {:?}", tape.shape(logits), tape.shape(gt));
    let bce = tape.bce_with_logits(logits, gt)?;
    let probs = tape.sigmoid(logits);
    let dice = tape.dice_loss(probs, gt, DICE_EPS)?;
    tape.add(bce, dice)
}

/// Mean squared error between student probabilities and a fixed teacher.
pub fn kd_loss(tape: &mut Tape, student_logits: Var, teacher: &Tensor) -> Result<Var> {
    ensure!(tape.shape(student_logits) == teacher.shape(), "kd loss: student {:?} vs teacher {:?}", tape.shape(student_logits), teacher.shape());
    let probs = tape.sigmoid(student_logits);
    let t = tape.constant(teacher.clone());
    tape.mse(probs, t)
}

/// `−mean_u Σ_k p_{u,k} log(p_{u,k} + ε)` for per-pixel distributions over channels.
pub fn entropy_loss(tape: &mut Tape, p: Var) -> Result<Var> {
    let logp = tape.ln_eps(p, ENTROPY_EPS);
    let plogp = tape.mul(p, logp)?;
    let per_pixel = tape.sum_channels(plogp)?;
    let m = tape.mean(per_pixel);
    Ok(tape.affine(m, -1.0, 0.0))
}

/// How the three sigmoid outputs of the difference gate become a
/// distribution for the entropy term.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntropyNorm {
    /// `Π / Σ_k Π_k`.
    Renormalize,
    /// `softmax(logits)`.
    Softmax,
}

/// Per-pixel routing distribution of a decision: `(1 − g, g)` for the
/// receptive-field gate, normalized `Π` for the difference gate.
pub fn gate_distribution(tape: &mut Tape, d: &RoutingDecision, norm: EntropyNorm) -> Result<Var> {
    match d.kind {
        BlockKind::Ar2 => {
            let q = tape.one_minus(d.probs);
            tape.concat_channels(q, d.probs)
        }
        BlockKind::Mdr => match norm {
            EntropyNorm::Renormalize => renormalize(tape, d.probs),
            EntropyNorm::Softmax => tape.softmax_channels(d.logits, 1.0),
        },
    }
}

/// Entropy averaged over all routed blocks.
pub fn routing_entropy(tape: &mut Tape, decisions: &[RoutingDecision], norm: EntropyNorm) -> Result<Option<Var>> {
    let mut acc: Option<Var> = None;
    for d in decisions {
        let p = gate_distribution(tape, d, norm)?;
        let e = entropy_loss(tape, p)?;
        acc = Some(match acc {
            None => e,
            Some(a) => tape.add(a, e)?,
        });
    }
    Ok(acc.map(|a| tape.affine(a, 1.0 / decisions.len() as f64, 0.0)))
}

/// Nearest-neighbour downsampling of a `[B,1,H,W]` mask to `h × w`
/// (source index `⌊dst · H / h⌋`).
pub fn downsample_nearest(gt: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (bn, c, gh, gw) = gt.dims4()?;
    ensure!(h > 0 && w > 0 && h <= gh && w <= gw, "downsample: cannot map {}x{} to {}x{}", gh, gw, h, w);
    let src = gt.data();
    let mut out = Vec::with_capacity(bn * c * h * w);
    for p in 0..bn * c {
        for y in 0..h {
            for x in 0..w {
                out.push(src[p * gh * gw + (y * gh / h) * gw + x * gw / w]);
            }
        }
    }
    Tensor::new(vec![bn, c, h, w], out)
}

/// Mean of `1 − cos(f1(u), f2(u))` over unchanged pixels; 0 when every
/// pixel changed. `gt` may be at a finer resolution than the features.
pub fn consistency_loss(tape: &mut Tape, f1: Var, f2: Var, gt: &Tensor) -> Result<Var> {
    let (bn, _, h, w) = tape.value(f1).dims4()?;
    let (gb, gc, _, _) = gt.dims4()?;
    ensure!(gb == bn && gc == 1, "consistency loss: gt {:?} does not match features {:?}", gt.shape(), tape.shape(f1));
    let small = downsample_nearest(gt, h, w)?;
    let unchanged = small.map(|v| if v > 0.5 { 0.0 } else { 1.0 });
    let n0 = unchanged.sum();
    if n0 == 0.0 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let cos = tape.cosine_channels(f1, f2, COSINE_EPS)?;
    let dist = tape.one_minus(cos);
    let mask = tape.constant(unchanged);
    let masked = tape.mul(dist, mask)?;
    let s = tape.sum(masked);
    Ok(tape.affine(s, 1.0 / n0, 0.0))
}

/// A spatial transform applied jointly to both epochs of a pair.
pub trait SpatialTransform {
    fn apply(&self, x: &Tensor) -> Result<Tensor>;
    fn invert(&self, x: &Tensor) -> Result<Tensor>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct HorizontalFlip;

impl SpatialTransform for HorizontalFlip {
    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        x.flip_w()
    }

    fn invert(&self, x: &Tensor) -> Result<Tensor> {
        x.flip_w()
    }
}

/// Anything that maps a pair to change probabilities without gradients.
pub trait ChangeModel {
    fn predict_probs(&self, t1: &Tensor, t2: &Tensor, domain: DomainId) -> Result<Tensor>;
}

impl<F> ChangeModel for F
where
    F: Fn(&Tensor, &Tensor, DomainId) -> Result<Tensor>,
{
    fn predict_probs(&self, t1: &Tensor, t2: &Tensor, domain: DomainId) -> Result<Tensor> {
        self(t1, t2, domain)
    }
}

/// `½ (σ(M(t1, t2)) + T⁻¹ σ(M(T t1, T t2)))`.
pub fn build_teacher(
    model: &impl ChangeModel,
    t1: &Tensor,
    t2: &Tensor,
    domain: DomainId,
    transform: &dyn SpatialTransform,
) -> Result<Tensor> {
    let (a1, a2) = (transform.apply(t1)?, transform.apply(t2)?);
    ensure!(
        transform.invert(&a1)?.bit_eq(t1) && transform.invert(&a2)?.bit_eq(t2),
        "teacher transform is not invertible on the input grid"
    );
    let direct = model.predict_probs(t1, t2, domain)?;
    let viewed = transform.invert(&model.predict_probs(&a1, &a2, domain)?)?;
    ensure!(direct.shape() == viewed.shape(), "teacher views disagree in shape");
    let data = direct.data().iter().zip(viewed.data()).map(|(a, b)| 0.5 * (a + b)).collect();
    Tensor::new(direct.shape().to_vec(), data)
}
