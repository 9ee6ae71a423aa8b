//! Two-stage training, evaluation and the per-step metrics log.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use crate::casd::{
    build_teacher, consistency_loss, kd_loss, routing_entropy, seg_loss, total_loss, EntropyNorm, HorizontalFlip, LossInputs, LossReport,
    LossWeights, Stage, Term,
};
use crate::error::{ensure, Error, Result};
use crate::harness::config::TrainConfig;
use crate::harness::metrics::{BlockRates, Confusion, DomainReport, MetricReport};
use crate::harness::optim::AdamW;
use crate::harness::thread_pool;
use crate::model::{binarize, UniRouteNet};
use crate::params::{Ctx, ParamRole};
use crate::rng::{derive_seed, Xoshiro256};
use crate::synthdata::{generate, Manifest, Modality, SamplePair, Split};
use crate::tensor::Tensor;

/// Materialized splits grouped by domain.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub train: BTreeMap<Modality, Vec<SamplePair>>,
    pub val: Vec<SamplePair>,
    pub test: Vec<SamplePair>,
}

impl Dataset {
    pub fn generate(manifest: &Manifest, size: usize) -> Result<Self> {
        let build = |split: Split| -> Result<Vec<SamplePair>> {
            let records = manifest.select(split, None);
            thread_pool().install(|| records.par_iter().map(|r| generate(&r.spec((size, size)))).collect())
        };
        let mut train: BTreeMap<Modality, Vec<SamplePair>> = BTreeMap::new();
        for s in build(Split::Train)? {
            train.entry(Modality::from_id(s.domain)?).or_default().push(s);
        }
        Ok(Self {
            train,
            val: build(Split::Val)?,
            test: build(Split::Test)?,
        })
    }

    pub fn n_train(&self) -> usize {
        self.train.values().map(Vec::len).sum()
    }

    pub fn split(&self, split: Split) -> Vec<SamplePair> {
        match split {
            Split::Train => self.train.values().flatten().cloned().collect(),
            Split::Val => self.val.clone(),
            Split::Test => self.test.clone(),
        }
    }
}

/// A single-domain batch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub t1: Tensor,
    pub t2: Tensor,
    pub gt: Tensor,
    pub domain: Modality,
}

impl Batch {
    pub fn stack(samples: &[&SamplePair]) -> Result<Self> {
        ensure!(!samples.is_empty(), "empty batch");
        let domain = Modality::from_id(samples[0].domain)?;
        ensure!(samples.iter().all(|s| s.domain == samples[0].domain), "batch mixes domains");
        let lift = |t: &Tensor| -> Result<Tensor> {
            let mut s = vec![1];
            s.extend_from_slice(t.shape());
            t.clone().reshape(s)
        };
        let cat = |f: &dyn Fn(&SamplePair) -> &Tensor| -> Result<Tensor> {
            let parts = samples.iter().map(|s| lift(f(s))).collect::<Result<Vec<_>>>()?;
            Tensor::stack_batch(&parts.iter().collect::<Vec<_>>())
        };
        Ok(Self {
            t1: cat(&|s| &s.t1)?,
            t2: cat(&|s| &s.t2)?,
            gt: cat(&|s| &s.gt)?,
            domain,
        })
    }

    pub fn len(&self) -> usize {
        self.t1.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Result of one optimizer step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub report: LossReport,
    /// Largest gate-parameter gradient magnitude seen by the update.
    pub gate_grad_max: f64,
}

/// Forward, loss, backward, AdamW update and running-statistics commit.
pub fn train_step(model: &mut UniRouteNet, opt: &mut AdamW, batch: &Batch, weights: &LossWeights, lr: f64, noise_seed: u64) -> Result<StepOutcome> {
    let domain = batch.domain.id();
    let teacher = if weights.teacher_required() { Some(build_teacher(&*model, &batch.t1, &batch.t2, domain, &HorizontalFlip)?) } else { None };
    let terms = weights.stage_terms();
    let mut ctx = Ctx::train(&model.params, Some(Xoshiro256::seed_from(noise_seed)));
    let t1 = ctx.tape.constant(batch.t1.clone());
    let t2 = ctx.tape.constant(batch.t2.clone());
    let out = model.forward(&mut ctx, t1, t2, domain)?;
    let gt = ctx.tape.constant(batch.gt.clone());
    let seg = seg_loss(&mut ctx.tape, out.logits, gt)?;
    let cons = match (terms.contains(&Term::Cons), out.features.last()) {
        (true, Some(&(f1, f2))) => Some(consistency_loss(&mut ctx.tape, f1, f2, &batch.gt)?),
        _ => None,
    };
    let ent = if terms.contains(&Term::Ent) { routing_entropy(&mut ctx.tape, &out.decisions, EntropyNorm::Renormalize)? } else { None };
    let kd = match &teacher {
        Some(t) => Some(kd_loss(&mut ctx.tape, out.logits, t)?),
        None => None,
    };
    let (loss, report) = total_loss(&mut ctx.tape, LossInputs { seg, cons, kd, ent }, weights)?;
    let grads = ctx.backward(loss)?;
    let updates = ctx.take_norm_updates();
    drop(ctx);
    let gate_grad_max = grads.max_abs_for_role(&model.params, ParamRole::Gate);
    opt.step(&mut model.params, &grads, lr)?;
    model.commit_norm_updates(&updates)?;
    Ok(StepOutcome { report, gate_grad_max })
}

/// Eval-mode scores and routing statistics over `samples`, optionally
/// restricted to one domain.
pub fn evaluate(model: &UniRouteNet, samples: &[SamplePair], domain: Option<Modality>, batch_size: usize) -> Result<MetricReport> {
    ensure!(batch_size > 0, "evaluation batch size must be positive");
    let mut by_domain: BTreeMap<Modality, Vec<&SamplePair>> = BTreeMap::new();
    for s in samples {
        let m = Modality::from_id(s.domain)?;
        model.embedding().check(s.domain)?;
        if domain.is_none_or(|d| d == m) {
            by_domain.entry(m).or_default().push(s);
        }
    }
    let names = model.routed_block_names();
    let mut report = MetricReport::default();
    for (m, items) in by_domain {
        let chunks: Vec<&[&SamplePair]> = items.chunks(batch_size).collect();
        let parts: Vec<(Confusion, Vec<Vec<f64>>, usize)> = thread_pool().install(|| {
            chunks
                .par_iter()
                .map(|chunk| {
                    let batch = Batch::stack(chunk)?;
                    let mut ctx = Ctx::eval(&model.params);
                    let t1 = ctx.tape.constant(batch.t1.clone());
                    let t2 = ctx.tape.constant(batch.t2.clone());
                    let out = model.forward(&mut ctx, t1, t2, m.id())?;
                    let pred = binarize(ctx.tape.value(out.logits), 0.5);
                    let confusion = Confusion::from_masks(&pred, &batch.gt)?;
                    let rates = out.decisions.iter().map(|d| d.selection_rate.clone()).collect();
                    Ok((confusion, rates, batch.len()))
                })
                .collect::<Result<Vec<_>>>()
        })?;
        let mut confusion = Confusion::default();
        let mut sums: Vec<Vec<f64>> = Vec::new();
        let mut n = 0;
        for (c, rates, len) in parts {
            confusion.merge(&c);
            if sums.is_empty() {
                sums = rates.iter().map(|r| vec![0.0; r.len()]).collect();
            }
            for (acc, r) in sums.iter_mut().zip(&rates) {
                for (a, v) in acc.iter_mut().zip(r) {
                    *a += v * len as f64;
                }
            }
            n += len;
        }
        let routing = model
            .decision_kinds()
            .into_iter()
            .zip(&names)
            .zip(sums)
            .map(|((kind, name), s)| BlockRates {
                name: name.clone(),
                kind,
                rates: s.into_iter().map(|v| v / n as f64).collect(),
            })
            .collect();
        report.per_domain.insert(m, DomainReport { confusion, samples: n, routing });
    }
    Ok(report)
}

/// One metrics-log line per optimizer step.
#[derive(Debug, Clone, Serialize)]
pub struct StepRecord {
    pub event: &'static str,
    pub stage: &'static str,
    pub epoch: usize,
    pub step: u64,
    pub domain: &'static str,
    pub lr: f64,
    pub total: f64,
    pub seg: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cons: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kd: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ent: Option<f64>,
    pub gate_grad_max: f64,
}

/// One metrics-log line per validation pass.
#[derive(Debug, Clone, Serialize)]
pub struct ValRecord {
    pub event: &'static str,
    pub stage: &'static str,
    pub epoch: usize,
    pub mean_f1: f64,
    pub f1: BTreeMap<&'static str, f64>,
    pub best: bool,
}

/// Line-oriented JSON log; in memory when no file is attached.
#[derive(Debug, Default)]
pub struct MetricsLog {
    file: Option<BufWriter<File>>,
    pub steps: Vec<StepRecord>,
    pub vals: Vec<ValRecord>,
}

impl MetricsLog {
    pub fn to_file(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            file: Some(BufWriter::new(f)),
            ..Self::default()
        })
    }

    fn write(&mut self, line: String) -> Result<()> {
        if let Some(f) = &mut self.file {
            writeln!(f, "{line}").and_then(|_| f.flush()).map_err(|e| Error::io("metrics log", e))?;
        }
        Ok(())
    }

    pub fn step(&mut self, r: StepRecord) -> Result<()> {
        let line = serde_json::to_string(&r).map_err(|e| Error::format("metrics log", e.to_string()))?;
        self.steps.push(r);
        self.write(line)
    }

    pub fn val(&mut self, r: ValRecord) -> Result<()> {
        let line = serde_json::to_string(&r).map_err(|e| Error::format("metrics log", e.to_string()))?;
        self.vals.push(r);
        self.write(line)
    }
}

/// Best model of a stage with its validation score.
#[derive(Debug, Clone)]
pub struct StageResult {
    pub model: UniRouteNet,
    pub best_epoch: usize,
    pub best_val: MetricReport,
    pub steps: u64,
}

const EVAL_BATCH: usize = 16;

/// Round-robin over domains, one shuffled queue per domain.
struct DomainQueues {
    order: Vec<Modality>,
    queues: BTreeMap<Modality, Vec<usize>>,
    sizes: BTreeMap<Modality, usize>,
}

impl DomainQueues {
    fn new(data: &Dataset) -> Self {
        let sizes: BTreeMap<Modality, usize> = data.train.iter().filter(|(_, v)| !v.is_empty()).map(|(m, v)| (*m, v.len())).collect();
        Self {
            order: sizes.keys().copied().collect(),
            queues: BTreeMap::new(),
            sizes,
        }
    }

    fn take(&mut self, domain: Modality, n: usize, rng: &mut Xoshiro256) -> Vec<usize> {
        let size = self.sizes[&domain];
        let q = self.queues.entry(domain).or_default();
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if q.is_empty() {
                let mut idx: Vec<usize> = (0..size).collect();
                rng.shuffle(&mut idx);
                idx.reverse();
                *q = idx;
            }
            let i = q.pop().expect("refilled queue");
            if out.len() < size && out.contains(&i) {
                q.insert(0, i);
                continue;
            }
            out.push(i);
        }
        out
    }
}

/// Runs one stage from `model`, keeping the best validation state.
pub fn run_stage(cfg: &TrainConfig, data: &Dataset, mut model: UniRouteNet, stage: Stage, log: &mut MetricsLog) -> Result<StageResult> {
    ensure!(data.n_train() > 0, "training split is empty");
    ensure!(!data.val.is_empty(), "validation split is empty");
    let (schedule, label, round_robin) = match stage {
        Stage::Pretrain => (cfg.stage1, 1u64, true),
        Stage::Finetune | Stage::Plain => (cfg.stage2, 2u64, false),
    };
    let weights = cfg.loss.with_stage(stage);
    let mut rng = Xoshiro256::seed_from(derive_seed(cfg.seed, 0x7A_0000 + label));
    let mut opt = AdamW::new(cfg.adam, cfg.weight_decay);
    let mut queues = DomainQueues::new(data);
    let steps_per_epoch = data.n_train().div_ceil(cfg.batch_size);
    let total_steps = (steps_per_epoch * schedule.epochs) as u64;
    let mut best: Option<StageResult> = None;
    let mut step = 0u64;
    for epoch in 1..=schedule.epochs {
        for _ in 0..steps_per_epoch {
            let domain = if round_robin {
                queues.order[step as usize % queues.order.len()]
            } else {
                queues.order[rng.below(queues.order.len())]
            };
            let idx = queues.take(domain, cfg.batch_size, &mut rng);
            let pool = &data.train[&domain];
            let refs: Vec<&SamplePair> = idx.iter().map(|&i| &pool[i]).collect();
            let batch = Batch::stack(&refs)?;
            let noise_seed = rng.next();
            let lr = schedule.lr_at(step, total_steps);
            let out = train_step(&mut model, &mut opt, &batch, &weights, lr, noise_seed)?;
            step += 1;
            ensure!(out.report.total.is_finite(), "non-finite loss at {} step {}", stage, step);
            log.step(StepRecord {
                event: "step",
                stage: stage.as_str(),
                epoch,
                step,
                domain: domain.name(),
                lr,
                total: out.report.total,
                seg: out.report.seg,
                cons: out.report.cons,
                kd: out.report.kd,
                ent: out.report.ent,
                gate_grad_max: out.gate_grad_max,
            })?;
        }
        let val = evaluate(&model, &data.val, None, EVAL_BATCH)?;
        let mean = val.mean_f1();
        let improved = best.as_ref().is_none_or(|b| mean > b.best_val.mean_f1());
        log.val(ValRecord {
            event: "val",
            stage: stage.as_str(),
            epoch,
            mean_f1: mean,
            f1: val.per_domain.iter().map(|(d, r)| (d.name(), r.f1())).collect(),
            best: improved,
        })?;
        if improved {
            best = Some(StageResult {
                model: model.clone(),
                best_epoch: epoch,
                best_val: val,
                steps: step,
            });
        }
    }
    let mut best = best.expect("at least one epoch");
    best.steps = step;
    Ok(best)
}

/// Artifacts of a full two-stage run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub stage1: StageResult,
    pub stage2: StageResult,
    pub out_dir: Option<PathBuf>,
}

impl TrainOutcome {
    pub fn model(&self) -> &UniRouteNet {
        &self.stage2.model
    }
}

pub const STAGE1_CHECKPOINT: &str = "stage1_best.urkt";
pub const BEST_CHECKPOINT: &str = "best.urkt";
pub const METRICS_LOG: &str = "metrics.jsonl";
pub const CONFIG_FILE: &str = "config.txt";

fn stage2_kind(cfg: &TrainConfig) -> Stage {
    if cfg.casd {
        Stage::Finetune
    } else {
        Stage::Plain
    }
}

/// Stage 1 only; writes `stage1_best.urkt` when `out_dir` is given.
pub fn train_stage1(cfg: &TrainConfig, data: &Dataset, log: &mut MetricsLog, out_dir: Option<&Path>) -> Result<StageResult> {
    cfg.validate()?;
    let model = UniRouteNet::new(cfg.model.clone(), derive_seed(cfg.seed, 0x1417))?;
    let r = run_stage(cfg, data, model, Stage::Pretrain, log)?;
    if let Some(dir) = out_dir {
        r.model.save(&dir.join(STAGE1_CHECKPOINT))?;
    }
    Ok(r)
}

/// Stage 2 from a stage-1 checkpoint file.
pub fn train_stage2_from(cfg: &TrainConfig, data: &Dataset, checkpoint: &Path, log: &mut MetricsLog, out_dir: Option<&Path>) -> Result<StageResult> {
    let init = UniRouteNet::load(checkpoint)?;
    train_stage2(cfg, data, init, log, out_dir)
}

pub fn train_stage2(cfg: &TrainConfig, data: &Dataset, init: UniRouteNet, log: &mut MetricsLog, out_dir: Option<&Path>) -> Result<StageResult> {
    cfg.validate()?;
    ensure!(init.config == cfg.model, "stage-1 checkpoint was trained with a different model configuration");
    let r = run_stage(cfg, data, init, stage2_kind(cfg), log)?;
    if let Some(dir) = out_dir {
        r.model.save(&dir.join(BEST_CHECKPOINT))?;
    }
    Ok(r)
}

/// Full run: stage 1, reload of its best checkpoint, stage 2.
pub fn train(cfg: &TrainConfig, data: &Dataset, out_dir: Option<&Path>) -> Result<(TrainOutcome, MetricsLog)> {
    cfg.validate()?;
    let mut log = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            crate::model::write_atomic(&dir.join(CONFIG_FILE), cfg.to_text().as_bytes())?;
            MetricsLog::to_file(&dir.join(METRICS_LOG))?
        }
        None => MetricsLog::default(),
    };
    let stage1 = train_stage1(cfg, data, &mut log, out_dir)?;
    let stage2 = match out_dir {
        Some(dir) => train_stage2_from(cfg, data, &dir.join(STAGE1_CHECKPOINT), &mut log, out_dir)?,
        None => train_stage2(cfg, data, stage1.model.clone(), &mut log, None)?,
    };
    Ok((
        TrainOutcome {
            stage1,
            stage2,
            out_dir: out_dir.map(Path::to_path_buf),
        },
        log,
    ))
}
