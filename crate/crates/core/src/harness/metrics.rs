//! Pixel confusion counts and the derived scores.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{ensure, Result};
use crate::routing::{BlockKind, Primitive};
use crate::synthdata::Modality;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

/// `num / den`, with the empty-prediction-on-empty-truth case scored 1.
fn ratio(num: u64, den: u64, both_empty: bool) -> f64 {
    if den == 0 {
        if both_empty {
            1.0
        } else {
            0.0
        }
    } else {
        num as f64 / den as f64
    }
}

impl Confusion {
    /// Counts binary `pred` against binary `gt` (values > 0.5 are positive).
    pub fn from_masks(pred: &Tensor, gt: &Tensor) -> Result<Self> {
        ensure!(pred.shape() == gt.shape(), "confusion: prediction {:?} vs gt {:?}", pred.shape(), gt.shape());
        let mut c = Self::default();
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            match (p > 0.5, g > 0.5) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn merge(&mut self, o: &Confusion) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.tn += o.tn;
    }

    fn both_empty(&self) -> bool {
        self.tp == 0 && self.fp == 0 && self.fn_ == 0
    }

    pub fn f1(&self) -> f64 {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_, self.both_empty())
    }

    pub fn iou(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp + self.fn_, self.both_empty())
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp, self.both_empty())
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_, self.both_empty())
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// Mean expert selection rates of one routed block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockRates {
    pub name: String,
    pub kind: BlockKind,
    pub rates: Vec<f64>,
}

impl BlockRates {
    pub fn labels(&self) -> Vec<&'static str> {
        match self.kind {
            BlockKind::Ar2 => vec!["local", "global"],
            BlockKind::Mdr => Primitive::ALL.iter().map(|p| p.as_str()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainReport {
    pub confusion: Confusion,
    pub samples: usize,
    pub routing: Vec<BlockRates>,
}

impl DomainReport {
    pub fn f1(&self) -> f64 {
        self.confusion.f1()
    }

    pub fn iou(&self) -> f64 {
        self.confusion.iou()
    }

    /// Selection rate of the global expert averaged over all receptive-field blocks.
    pub fn global_rate(&self) -> Option<f64> {
        mean_rate(&self.routing, BlockKind::Ar2, 1)
    }

    /// Selection rate of primitive `p` averaged over all difference blocks.
    pub fn primitive_rate(&self, p: Primitive) -> Option<f64> {
        mean_rate(&self.routing, BlockKind::Mdr, p as usize)
    }
}

fn mean_rate(blocks: &[BlockRates], kind: BlockKind, idx: usize) -> Option<f64> {
    let v: Vec<f64> = blocks.iter().filter(|b| b.kind == kind).map(|b| b.rates[idx]).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Scores per domain plus pooled counts.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricReport {
    pub per_domain: BTreeMap<Modality, DomainReport>,
}

impl MetricReport {
    pub fn aggregate(&self) -> Confusion {
        let mut c = Confusion::default();
        for d in self.per_domain.values() {
            c.merge(&d.confusion);
        }
        c
    }

    /// Unweighted mean F1 across the domains present.
    pub fn mean_f1(&self) -> f64 {
        if self.per_domain.is_empty() {
            return 0.0;
        }
        self.per_domain.values().map(DomainReport::f1).sum::<f64>() / self.per_domain.len() as f64
    }

    pub fn f1(&self, d: Modality) -> Option<f64> {
        self.per_domain.get(&d).map(DomainReport::f1)
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<8} {:>7} {:>7} {:>7} {:>7} {:>9} {:>9} {:>9}", "domain", "F1", "IoU", "prec", "recall", "TP", "FP", "FN")?;
        let mut row = |name: &str, c: &Confusion| {
            writeln!(
                f,
                "{:<8} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>9} {:>9} {:>9}",
                name,
                c.f1(),
                c.iou(),
                c.precision(),
                c.recall(),
                c.tp,
                c.fp,
                c.fn_
            )
        };
        for (d, r) in &self.per_domain {
            row(d.name(), &r.confusion)?;
        }
        row("all", &self.aggregate())?;
        writeln!(f, "mean F1 across domains: {:.4}", self.mean_f1())?;
        for (d, r) in &self.per_domain {
            for b in &r.routing {
                let rates: Vec<String> = b.labels().iter().zip(&b.rates).map(|(l, v)| format!("{l}={v:.3}")).collect();
                writeln!(f, "routing {:<8} {:<10} {}", d.name(), b.name, rates.join(" "))?;
            }
        }
        Ok(())
    }
}
