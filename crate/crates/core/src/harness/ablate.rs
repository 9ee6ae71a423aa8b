//! Side-by-side training of model and objective variants.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::harness::config::TrainConfig;
use crate::harness::metrics::MetricReport;
use crate::harness::train::{evaluate, train_stage1, train_stage2, Dataset, MetricsLog, StageResult, METRICS_LOG};
use crate::model::Fusion;
use crate::routing::GateMode;
use crate::synthdata::Modality;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Variant {
    Gate(GateMode),
    Fusion(Fusion),
    Casd(bool),
}

impl Variant {
    pub fn apply(&self, cfg: &mut TrainConfig) {
        match *self {
            Variant::Gate(g) => cfg.model.gate_mode = g,
            Variant::Fusion(f) => cfg.model.fusion = f,
            Variant::Casd(on) => cfg.casd = on,
        }
    }

    pub fn label(&self) -> String {
        match self {
            Variant::Gate(g) => format!("gate={g}"),
            Variant::Fusion(f) => format!("fusion={f}"),
            Variant::Casd(on) => format!("casd={}", if *on { "on" } else { "off" }),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for Variant {
    type Err = Error;

    /// `gate=<mode>`, `fusion=<kind>`, `casd=on|off`, or a bare mode/kind name.
    fn from_str(s: &str) -> Result<Self> {
        let usage = || Error::Usage(format!("unknown variant {s:?}"));
        let (key, value) = match s.split_once('=') {
            Some((k, v)) => (Some(k.trim()), v.trim()),
            None => (None, s.trim()),
        };
        match key {
            Some("gate") => value.parse().map(Variant::Gate).map_err(|_| usage()),
            Some("fusion") => value.parse().map(Variant::Fusion).map_err(|_| usage()),
            Some("casd") => match value {
                "on" => Ok(Variant::Casd(true)),
                "off" => Ok(Variant::Casd(false)),
                _ => Err(usage()),
            },
            Some(_) => Err(usage()),
            None => value
                .parse()
                .map(Variant::Gate)
                .or_else(|_| value.parse().map(Variant::Fusion))
                .or_else(|_| match value {
                    "casd_on" => Ok(Variant::Casd(true)),
                    "casd_off" => Ok(Variant::Casd(false)),
                    _ => Err(usage()),
                }),
        }
    }
}

#[derive(Debug, Clone)]
pub struct VariantRun {
    pub variant: Variant,
    pub seed: u64,
    pub test: MetricReport,
    pub val_mean_f1: f64,
    /// Largest gate gradient magnitude over every logged step of the run.
    pub max_gate_grad: f64,
}

#[derive(Debug, Clone, Default)]
pub struct AblationReport {
    pub runs: Vec<VariantRun>,
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

impl AblationReport {
    pub fn variants(&self) -> Vec<Variant> {
        let mut out: Vec<Variant> = Vec::new();
        for r in &self.runs {
            if !out.contains(&r.variant) {
                out.push(r.variant);
            }
        }
        out
    }

    /// Median test F1 of a variant on a domain across seeds.
    pub fn median_f1(&self, variant: Variant, domain: Modality) -> Option<f64> {
        median(self.runs.iter().filter(|r| r.variant == variant).filter_map(|r| r.test.f1(domain)).collect())
    }
}

impl fmt::Display for AblationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:<22} {:>6}", "variant", "seed")?;
        for d in Modality::ALL {
            write!(f, " {:>8}", d.name())?;
        }
        writeln!(f, " {:>8} {:>10}", "mean", "gate_grad")?;
        for r in &self.runs {
            write!(f, "{:<22} {:>6}", r.variant.label(), r.seed)?;
            for d in Modality::ALL {
                match r.test.f1(d) {
                    Some(v) => write!(f, " {v:>8.4}")?,
                    None => write!(f, " {:>8}", "-")?,
                }
            }
            writeln!(f, " {:>8.4} {:>10.3e}", r.test.mean_f1(), r.max_gate_grad)?;
        }
        for v in self.variants() {
            write!(f, "{:<22} {:>6}", v.label(), "median")?;
            for d in Modality::ALL {
                match self.median_f1(v, d) {
                    Some(x) => write!(f, " {x:>8.4}")?,
                    None => write!(f, " {:>8}", "-")?,
                }
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

fn finish(variant: Variant, seed: u64, result: &StageResult, log: &MetricsLog, data: &Dataset) -> Result<VariantRun> {
    Ok(VariantRun {
        variant,
        seed,
        test: evaluate(&result.model, &data.test, None, 16)?,
        val_mean_f1: result.best_val.mean_f1(),
        max_gate_grad: log.steps.iter().map(|s| s.gate_grad_max).fold(0.0, f64::max),
    })
}

/// Trains every variant for every seed on the same data. Distillation
/// on/off variants share one stage-1 run per seed.
pub fn ablate(base: &TrainConfig, variants: &[Variant], seeds: &[u64], data: &Dataset, out_dir: Option<&Path>) -> Result<AblationReport> {
    if variants.is_empty() || seeds.is_empty() {
        return Err(Error::Usage("ablation needs at least one variant and one seed".into()));
    }
    let mut report = AblationReport::default();
    for &seed in seeds {
        let mut shared: Option<(StageResult, MetricsLog)> = None;
        for &variant in variants {
            let mut cfg = base.clone();
            cfg.seed = seed;
            variant.apply(&mut cfg);
            cfg.validate()?;
            let dir = out_dir.map(|d| d.join(format!("{}_seed{seed}", variant.label().replace('=', "_"))));
            let mut log = match &dir {
                Some(d) => MetricsLog::to_file(&d.join(METRICS_LOG))?,
                None => MetricsLog::default(),
            };
            let stage1 = match variant {
                Variant::Casd(_) => {
                    if shared.is_none() {
                        let mut l1 = MetricsLog::default();
                        let s1 = train_stage1(&cfg, data, &mut l1, None)?;
                        shared = Some((s1, l1));
                    }
                    let (s1, l1) = shared.as_ref().expect("shared stage 1");
                    for r in &l1.steps {
                        log.step(r.clone())?;
                    }
                    s1.clone()
                }
                _ => train_stage1(&cfg, data, &mut log, None)?,
            };
            let stage2 = train_stage2(&cfg, data, stage1.model, &mut log, dir.as_deref())?;
            report.runs.push(finish(variant, seed, &stage2, &log, data)?);
        }
    }
    Ok(report)
}
