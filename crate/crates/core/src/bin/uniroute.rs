use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use uniroute::harness::train::{BEST_CHECKPOINT, CONFIG_FILE, METRICS_LOG, STAGE1_CHECKPOINT};
use uniroute::harness::{ablate, evaluate, export_routing_map, train, train_stage1, train_stage2_from, Dataset, MetricsLog, TrainConfig, Variant};
use uniroute::model::UniRouteNet;
use uniroute::synthdata::{generate, write_cache, Manifest, Modality, SceneSpec, Split};
use uniroute::{Error, Result};

#[derive(Parser)]
#[command(name = "uniroute", version, about = "Modality-adaptive change detection on a synthetic multi-modality benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// `key = value` configuration file; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "runs/default")]
    out_dir: PathBuf,
    /// Manifest to read instead of deriving one from the config.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the split manifest and optionally raw sample caches.
    Gen {
        #[command(flatten)]
        common: Common,
        /// Also write `<split>.ursd` sample caches.
        #[arg(long)]
        cache: bool,
    },
    /// Two-stage training.
    Train {
        #[command(flatten)]
        common: Common,
        /// `1`, `2` (from the stage-1 checkpoint in --out-dir) or `all`.
        #[arg(long, default_value = "all")]
        stage: String,
    },
    /// Score a checkpoint on a split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Restrict to one domain (OPT_OPT, OPT_UAV, OPT_SAR).
        #[arg(long)]
        domain: Option<Modality>,
        /// `1` for the stage-1 checkpoint, `2` for the final one.
        #[arg(long, default_value = "2")]
        stage: String,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Train variants side by side under shared seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Repeatable: gate=<mode>, fusion=<kind>, casd=on|off, or a bare name.
        #[arg(long, required = true)]
        variant: Vec<Variant>,
        /// Extra seeds beyond --seed.
        #[arg(long = "extra-seed")]
        extra_seeds: Vec<u64>,
    },
    /// Write a routed block's expert map as a PGM image.
    ExportRouting {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "OPT_SAR")]
        domain: Modality,
        /// Sample seed to render.
        #[arg(long, default_value_t = 0)]
        sample: u64,
        /// Routed block index in decision order.
        #[arg(long, default_value_t = 0)]
        block: usize,
        #[arg(long, default_value = "2")]
        stage: String,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn load_config(c: &Common) -> Result<TrainConfig> {
    let mut cfg = match &c.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_manifest(c: &Common, cfg: &TrainConfig) -> Result<Manifest> {
    match &c.manifest {
        Some(p) => Manifest::read(p),
        None => cfg.data.manifest(),
    }
}

fn checkpoint_for(dir: &Path, stage: &str) -> Result<PathBuf> {
    match stage {
        "1" => Ok(dir.join(STAGE1_CHECKPOINT)),
        "2" | "all" => Ok(dir.join(BEST_CHECKPOINT)),
        other => Err(Error::Usage(format!("unknown stage {other:?} (expected 1 or 2)"))),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { common, cache } => {
            let cfg = load_config(&common)?;
            let manifest = load_manifest(&common, &cfg)?;
            let dir = &common.out_dir;
            manifest.write(&dir.join("manifest.tsv"))?;
            println!("wrote {} records to {}", manifest.records.len(), dir.join("manifest.tsv").display());
            if cache {
                for split in Split::ALL {
                    let samples = manifest.materialize(split, (cfg.data.size, cfg.data.size))?;
                    let path = dir.join(format!("{split}.ursd"));
                    write_cache(&path, &samples)?;
                    println!("wrote {} samples to {}", samples.len(), path.display());
                }
            }
        }
        Command::Train { common, stage } => {
            let cfg = load_config(&common)?;
            let manifest = load_manifest(&common, &cfg)?;
            let t0 = Instant::now();
            let data = Dataset::generate(&manifest, cfg.data.size)?;
            let dir = &common.out_dir;
            match stage.as_str() {
                "all" => {
                    let (outcome, _) = train(&cfg, &data, Some(dir))?;
                    println!(
                        "stage 1 best epoch {} (val mean F1 {:.4}); stage 2 best epoch {} (val mean F1 {:.4})",
                        outcome.stage1.best_epoch,
                        outcome.stage1.best_val.mean_f1(),
                        outcome.stage2.best_epoch,
                        outcome.stage2.best_val.mean_f1()
                    );
                    print!("{}", evaluate(outcome.model(), &data.test, None, 16)?);
                }
                "1" => {
                    uniroute::model::write_atomic(&dir.join(CONFIG_FILE), cfg.to_text().as_bytes())?;
                    let mut log = MetricsLog::to_file(&dir.join(METRICS_LOG))?;
                    let r = train_stage1(&cfg, &data, &mut log, Some(dir))?;
                    println!("stage 1 best epoch {} (val mean F1 {:.4})", r.best_epoch, r.best_val.mean_f1());
                }
                "2" => {
                    let mut log = MetricsLog::to_file(&dir.join("metrics_stage2.jsonl"))?;
                    let r = train_stage2_from(&cfg, &data, &dir.join(STAGE1_CHECKPOINT), &mut log, Some(dir))?;
                    println!("stage 2 best epoch {} (val mean F1 {:.4})", r.best_epoch, r.best_val.mean_f1());
                }
                other => return Err(Error::Usage(format!("unknown stage {other:?} (expected 1, 2 or all)"))),
            }
            println!("elapsed {:.1} s", t0.elapsed().as_secs_f64());
        }
        Command::Eval { common, domain, stage, split } => {
            let cfg = load_config(&common)?;
            let manifest = load_manifest(&common, &cfg)?;
            let model = UniRouteNet::load(&checkpoint_for(&common.out_dir, &stage)?)?;
            let samples = manifest.materialize(split, (cfg.data.size, cfg.data.size))?;
            print!("{}", evaluate(&model, &samples, domain, 16)?);
        }
        Command::Ablate { common, variant, extra_seeds } => {
            let cfg = load_config(&common)?;
            let manifest = load_manifest(&common, &cfg)?;
            let data = Dataset::generate(&manifest, cfg.data.size)?;
            let mut seeds = vec![cfg.seed];
            seeds.extend(extra_seeds);
            let report = ablate(&cfg, &variant, &seeds, &data, Some(&common.out_dir))?;
            let table = report.to_string();
            uniroute::model::write_atomic(&common.out_dir.join("ablation.txt"), table.as_bytes())?;
            print!("{table}");
        }
        Command::ExportRouting { common, domain, sample, block, stage, output } => {
            let cfg = load_config(&common)?;
            let model = UniRouteNet::load(&checkpoint_for(&common.out_dir, &stage)?)?;
            let spec = SceneSpec {
                size: (cfg.data.size, cfg.data.size),
                ..SceneSpec::new(sample, domain)
            };
            let pair = generate(&spec)?;
            let path = output.unwrap_or_else(|| common.out_dir.join(format!("routing_{}_block{block}.pgm", domain.name())));
            let map = export_routing_map(&model, &pair, block, &path)?;
            println!("wrote {}x{} {:?} map to {}", map.width, map.height, map.kind, path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
