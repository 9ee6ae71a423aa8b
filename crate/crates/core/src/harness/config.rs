//! Run configuration and its `key = value` text form.

use std::fmt::Write as _;
use std::path::Path;

use crate::casd::LossWeights;
use crate::error::{Error, Result};
use crate::harness::optim::AdamConfig;
use crate::model::ModelConfig;
use crate::synthdata::{make_split, standard_ranges, Manifest, Modality, SplitCounts};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageSchedule {
    pub epochs: usize,
    pub lr: f64,
    /// Cosine decay from `lr` towards zero over the stage; constant when off.
    pub cosine: bool,
}

impl StageSchedule {
    /// Learning rate for 0-based `step` of `total`.
    pub fn lr_at(&self, step: u64, total: u64) -> f64 {
        if !self.cosine || total == 0 {
            return self.lr;
        }
        let t = step as f64 / total as f64;
        0.5 * self.lr * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// Synthetic benchmark layout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DataConfig {
    pub base_seed: u64,
    pub size: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// OPT_SAR training pairs (scarcity knob).
    pub sar_train: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            base_seed: 0,
            size: 64,
            train: SplitCounts::DEFAULT.train,
            val: SplitCounts::DEFAULT.val,
            test: SplitCounts::DEFAULT.test,
            sar_train: SplitCounts::DEFAULT.train,
        }
    }
}

impl DataConfig {
    pub fn manifest(&self) -> Result<Manifest> {
        let counts: Vec<(Modality, SplitCounts)> = Modality::ALL
            .into_iter()
            .map(|m| {
                let train = if m == Modality::OptSar { self.sar_train } else { self.train };
                (m, SplitCounts { train, val: self.val, test: self.test })
            })
            .collect();
        make_split(&standard_ranges(self.base_seed, &counts))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub stage1: StageSchedule,
    pub stage2: StageSchedule,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub adam: AdamConfig,
    pub loss: LossWeights,
    /// Stage 2 with the distillation objective; off trains stage 2 on the
    /// segmentation loss alone.
    pub casd: bool,
    pub data: DataConfig,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            stage1: StageSchedule { epochs: 40, lr: 3e-4, cosine: false },
            stage2: StageSchedule { epochs: 5, lr: 1e-5, cosine: false },
            batch_size: 8,
            weight_decay: 0.01,
            adam: AdamConfig::default(),
            loss: LossWeights::default(),
            casd: true,
            data: DataConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

fn on_off(v: bool) -> &'static str {
    if v {
        "on"
    } else {
        "off"
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.stage1.epochs == 0 || self.stage2.epochs == 0 {
            return fail("epochs must be positive");
        }
        if !(self.stage2.lr < self.stage1.lr) || self.stage2.lr <= 0.0 {
            return fail("stage-2 lr must be positive and below the stage-1 lr");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive");
        }
        if self.data.size == 0 || self.data.size % 16 != 0 {
            return fail("data.size must be a positive multiple of 16");
        }
        if self.data.val == 0 {
            return fail("data.val must be positive (checkpoint selection needs a validation split)");
        }
        if self.model.n_domains != Modality::ALL.len() {
            return fail("model.n_domains must equal the number of synthetic domains (3)");
        }
        self.model.validate()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("stage1.epochs", self.stage1.epochs.to_string());
        kv("stage1.lr", format!("{:?}", self.stage1.lr));
        kv("stage1.cosine", on_off(self.stage1.cosine).to_string());
        kv("stage2.epochs", self.stage2.epochs.to_string());
        kv("stage2.lr", format!("{:?}", self.stage2.lr));
        kv("stage2.cosine", on_off(self.stage2.cosine).to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("weight_decay", format!("{:?}", self.weight_decay));
        kv("adam.beta1", format!("{:?}", self.adam.beta1));
        kv("adam.beta2", format!("{:?}", self.adam.beta2));
        kv("adam.eps", format!("{:?}", self.adam.eps));
        kv("loss.lambda_cons", format!("{:?}", self.loss.lambda_cons));
        kv("loss.lambda_kd", format!("{:?}", self.loss.lambda_kd));
        kv("loss.lambda_ent", format!("{:?}", self.loss.lambda_ent));
        kv("casd", on_off(self.casd).to_string());
        kv("data.base_seed", self.data.base_seed.to_string());
        kv("data.size", self.data.size.to_string());
        kv("data.train", self.data.train.to_string());
        kv("data.val", self.data.val.to_string());
        kv("data.test", self.data.test.to_string());
        kv("data.sar_train", self.data.sar_train.to_string());
        for (k, v) in self.model.to_lines() {
            kv(&k, v);
        }
        s
    }

    /// Applies one key; unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || Error::Config(format!("{key}: invalid value {value:?}"));
        let f = || value.parse::<f64>().map_err(|_| bad());
        let u = || value.parse::<usize>().map_err(|_| bad());
        let u64_ = || value.parse::<u64>().map_err(|_| bad());
        let flag = || match value {
            "on" | "true" => Ok(true),
            "off" | "false" => Ok(false),
            _ => Err(bad()),
        };
        match key {
            "seed" => self.seed = u64_()?,
            "stage1.epochs" => self.stage1.epochs = u()?,
            "stage1.lr" => self.stage1.lr = f()?,
            "stage1.cosine" => self.stage1.cosine = flag()?,
            "stage2.epochs" => self.stage2.epochs = u()?,
            "stage2.lr" => self.stage2.lr = f()?,
            "stage2.cosine" => self.stage2.cosine = flag()?,
            "batch_size" => self.batch_size = u()?,
            "weight_decay" => self.weight_decay = f()?,
            "adam.beta1" => self.adam.beta1 = f()?,
            "adam.beta2" => self.adam.beta2 = f()?,
            "adam.eps" => self.adam.eps = f()?,
            "loss.lambda_cons" => self.loss.lambda_cons = f()?,
            "loss.lambda_kd" => self.loss.lambda_kd = f()?,
            "loss.lambda_ent" => self.loss.lambda_ent = f()?,
            "casd" => self.casd = flag()?,
            "data.base_seed" => self.data.base_seed = u64_()?,
            "data.size" => self.data.size = u()?,
            "data.train" => self.data.train = u()?,
            "data.val" => self.data.val = u()?,
            "data.test" => self.data.test = u()?,
            "data.sar_train" => self.data.sar_train = u()?,
            _ => {
                if !self.model.apply(key, value)? {
                    return Err(Error::Config(format!("unknown key {key:?}")));
                }
            }
        }
        Ok(())
    }

    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}
